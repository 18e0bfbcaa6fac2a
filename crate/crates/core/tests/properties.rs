use std::collections::BTreeSet;

use proptest::prelude::*;
use tgraph::compile::{compile, CompileOptions};
use tgraph::decompose::{tile_regions, valid_split, Tiling};
use tgraph::ir::Region;
use tgraph::mpkg::{deserialize, serialize};
use tgraph::profile::HardwareProfile;
use tgraph::sim::{simulate, validate_trace, DurationModel, ForceMode, SimOptions};
use tgraph::tgraph::{fuse_fixpoint, Granularity};
use tgraph::workloads::random_dag;

fn cells(r: &Region) -> BTreeSet<Vec<u64>> {
    let mut out = BTreeSet::from([vec![]]);
    for d in 0..r.rank() {
        out = out
            .into_iter()
            .flat_map(|p| (r.offsets[d]..r.end(d)).map(move |x| [p.clone(), vec![x]].concat()))
            .collect();
    }
    out
}

fn region() -> impl Strategy<Value = Region> {
    prop::collection::vec((0u64..6, 1u64..5), 2).prop_map(|v| Region::new(v.iter().map(|x| x.0).collect(), v.iter().map(|x| x.1).collect()))
}

fn force() -> impl Strategy<Value = ForceMode> {
    prop_oneof![Just(ForceMode::Hybrid), Just(ForceMode::Jit), Just(ForceMode::Aot)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn overlap_matches_cell_sets(a in region(), b in region()) {
        let shared: BTreeSet<_> = cells(&a).intersection(&cells(&b)).cloned().collect();
        let inter = a.intersect(&b);
        prop_assert_eq!(inter.is_some(), !shared.is_empty());
        if let Some(i) = inter {
            prop_assert_eq!(cells(&i), shared);
        }
    }

    #[test]
    fn tiles_partition_the_output(d0 in 1u64..12, d1 in 1u64..12, s0 in 1u64..6, s1 in 1u64..6) {
        prop_assume!(valid_split(d0, s0) && valid_split(d1, s1));
        let tiles = tile_regions(&[d0, d1], &Tiling::new(vec![s0, s1]));
        prop_assert_eq!(tiles.len() as u64, s0 * s1);
        let mut seen = BTreeSet::new();
        for t in &tiles {
            for c in cells(t) {
                prop_assert!(seen.insert(c));
            }
        }
        prop_assert_eq!(seen, cells(&Region::full(&[d0, d1])));
    }

    #[test]
    fn pipeline_invariants(target in 1u32..40, seed in 0u64..10_000, coarse in any::<bool>()) {
        let g = random_dag(target, seed).unwrap();
        let granularity = if coarse { Granularity::Coarse } else { Granularity::Fine };
        let c = compile(&g, &HardwareProfile::h100(), CompileOptions { granularity, force: ForceMode::Hybrid }).unwrap();
        prop_assert_eq!(fuse_fixpoint(&c.fused), c.fused.clone());
        let real = |t: tgraph::decompose::TaskId| !c.normalized.tasks[&t].is_dummy();
        prop_assert_eq!(c.normalized.task_closure().pairs_where(real), c.fused.task_closure().pairs());
        prop_assert!(c.image.violations().is_empty());
        let bytes = serialize(&c.image);
        prop_assert_eq!(serialize(&deserialize(&bytes).unwrap()), bytes);
    }

    #[test]
    fn simulation_is_safe(target in 1u32..30, seed in 0u64..10_000, f in force(), pipelining in any::<bool>(), workers in 1u32..6) {
        let p = HardwareProfile { num_workers: workers, ..HardwareProfile::a100() };
        let g = random_dag(target, seed).unwrap();
        let c = compile(&g, &p, CompileOptions { granularity: Granularity::Fine, force: f }).unwrap();
        let opts = SimOptions { pipelining, iterations: 2, ..SimOptions::default() };
        let t = simulate(&c.image, &p, &DurationModel::default(), opts).unwrap();
        prop_assert_eq!(t.tasks.len(), 2 * c.image.tasks.len());
        let v = validate_trace(&t, &c.image);
        prop_assert!(v.is_empty(), "{:?}", v);
    }

    #[test]
    fn pipelining_never_hurts_a_single_worker(target in 1u32..30, seed in 0u64..10_000) {
        let p = HardwareProfile { num_workers: 1, ..HardwareProfile::h100() };
        let c = compile(&random_dag(target, seed).unwrap(), &p, CompileOptions::default()).unwrap();
        let run = |pipelining| simulate(&c.image, &p, &DurationModel::default(), SimOptions { pipelining, ..SimOptions::default() }).unwrap().makespan;
        prop_assert!(run(true) <= run(false));
    }
}
