//! Hardware profiles for the compiler and the runtime simulator.
//!
//! Worker/scheduler counts and the shared-memory page budget are taken from
//! published configurations of the three GPU generations. Bandwidth,
//! throughput and latency constants are invented per-SM estimates in integer
//! nanosecond units; override them with a profile file.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("unknown profile {0:?} (expected a100, h100, b200 or a JSON file path)")]
    Unknown(String),
    #[error("cannot read profile file: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed profile file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("profile field {0} must be positive")]
    NonPositive(&'static str),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardwareProfile {
    pub name: String,
    pub num_workers: u32,
    pub num_schedulers: u32,
    pub pages_per_worker: u32,
    pub page_size_bytes: u64,
    /// Per-worker device-memory bandwidth, bytes per time unit.
    pub mem_bandwidth: u64,
    /// Per-worker arithmetic throughput, flops per time unit.
    pub compute_throughput: u64,
    pub comm_latency: u64,
    /// Per-device link bandwidth, bytes per time unit.
    pub comm_bandwidth: u64,
    /// One queue hop (worker to scheduler, scheduler to worker, worker to worker).
    pub sync_latency: u64,
    /// Scheduler work to enqueue one task.
    pub dispatch_cost: u64,
    pub descriptor_fetch_latency: u64,
    pub queue_capacity: u32,
}

pub const DEFAULT_SYNC_LATENCY: u64 = 500;
pub const DEFAULT_DISPATCH_COST: u64 = 100;
pub const DEFAULT_DESCRIPTOR_FETCH_LATENCY: u64 = 300;
pub const DEFAULT_QUEUE_CAPACITY: u32 = 1024;
pub const PAGE_SIZE_BYTES: u64 = 32 * 1024;

impl HardwareProfile {
    #[allow(clippy::too_many_arguments)]
    fn builtin(
        name: &str,
        num_workers: u32,
        pages_per_worker: u32,
        mem_bandwidth: u64,
        compute_throughput: u64,
        comm_bandwidth: u64,
    ) -> Self {
        Self {
            name: name.to_string(),
            num_workers,
            num_schedulers: 16,
            pages_per_worker,
            page_size_bytes: PAGE_SIZE_BYTES,
            mem_bandwidth,
            compute_throughput,
            comm_latency: 2000,
            comm_bandwidth,
            sync_latency: DEFAULT_SYNC_LATENCY,
            dispatch_cost: DEFAULT_DISPATCH_COST,
            descriptor_fetch_latency: DEFAULT_DESCRIPTOR_FETCH_LATENCY,
            queue_capacity: DEFAULT_QUEUE_CAPACITY,
        }
    }

    pub fn a100() -> Self {
        Self::builtin("a100", 104, 5, 14, 2_900, 300)
    }

    pub fn h100() -> Self {
        Self::builtin("h100", 128, 7, 25, 7_500, 450)
    }

    pub fn b200() -> Self {
        Self::builtin("b200", 144, 7, 54, 15_200, 900)
    }

    pub fn builtins() -> [Self; 3] {
        [Self::a100(), Self::h100(), Self::b200()]
    }

    /// Resolves a built-in name or loads a JSON profile file.
    pub fn resolve(name_or_path: &str) -> Result<Self, ProfileError> {
        match name_or_path.to_ascii_lowercase().as_str() {
            "a100" => Ok(Self::a100()),
            "h100" => Ok(Self::h100()),
            "b200" => Ok(Self::b200()),
            _ => {
                let path = Path::new(name_or_path);
                if !path.exists() {
                    return Err(ProfileError::Unknown(name_or_path.to_string()));
                }
                Self::from_json(&std::fs::read_to_string(path)?)
            }
        }
    }

    pub fn from_json(text: &str) -> Result<Self, ProfileError> {
        let profile: Self = serde_json::from_str(text)?;
        profile.check()?;
        Ok(profile)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("profile serialization cannot fail")
    }

    pub fn check(&self) -> Result<(), ProfileError> {
        let fields: [(&'static str, u64); 12] = [
            ("num_workers", self.num_workers.into()),
            ("num_schedulers", self.num_schedulers.into()),
            ("pages_per_worker", self.pages_per_worker.into()),
            ("page_size_bytes", self.page_size_bytes),
            ("mem_bandwidth", self.mem_bandwidth),
            ("compute_throughput", self.compute_throughput),
            ("comm_latency", self.comm_latency),
            ("comm_bandwidth", self.comm_bandwidth),
            ("sync_latency", self.sync_latency),
            ("dispatch_cost", self.dispatch_cost),
            ("descriptor_fetch_latency", self.descriptor_fetch_latency),
            ("queue_capacity", self.queue_capacity.into()),
        ];
        match fields.iter().find(|(_, v)| *v == 0) {
            Some((name, _)) => Err(ProfileError::NonPositive(name)),
            None => Ok(()),
        }
    }

    /// Pages needed for a footprint, capped at the per-worker budget.
    pub fn pages_for(&self, bytes: u64) -> u32 {
        let pages = bytes.div_ceil(self.page_size_bytes).max(1);
        pages.min(self.pages_per_worker as u64) as u32
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_worker_and_page_counts() {
        let [a, h, b] = HardwareProfile::builtins();
        assert_eq!((a.num_workers, a.num_schedulers, a.pages_per_worker), (104, 16, 5));
        assert_eq!((h.num_workers, h.num_schedulers, h.pages_per_worker), (128, 16, 7));
        assert_eq!((b.num_workers, b.num_schedulers, b.pages_per_worker), (144, 16, 7));
        for p in [a, h, b] {
            assert_eq!(p.page_size_bytes, 32768);
            p.check().unwrap();
        }
    }

    #[test]
    fn json_round_trip_and_validation() {
        let h = HardwareProfile::h100();
        assert_eq!(HardwareProfile::from_json(&h.to_json()).unwrap(), h);
        let mut bad = h.clone();
        bad.num_schedulers = 0;
        assert!(matches!(
            HardwareProfile::from_json(&bad.to_json()),
            Err(ProfileError::NonPositive("num_schedulers"))
        ));
        assert!(HardwareProfile::resolve("tpu").is_err());
        assert_eq!(HardwareProfile::resolve("H100").unwrap(), h);
    }

    #[test]
    fn pages_round_up_and_cap() {
        let h = HardwareProfile::h100();
        assert_eq!(h.pages_for(1), 1);
        assert_eq!(h.pages_for(32768), 1);
        assert_eq!(h.pages_for(32769), 2);
        assert_eq!(h.pages_for(10 << 20), 7);
    }
}
