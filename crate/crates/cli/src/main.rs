//! `tgc`: generate fixtures, compile graphs to `.mpkg`, simulate, verify and export DOT.
//!
//! Exit codes: 0 success, 1 verification or simulation failure, 2 input error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use tgraph::compile::{compile, CompileOptions, Compiled};
use tgraph::ir::CompGraph;
use tgraph::mpkg::{deserialize, deserialize_unchecked, serialize, MAGIC};
use tgraph::normalize::LinearizedImage;
use tgraph::profile::HardwareProfile;
use tgraph::sim::{apply_launch_modes, simulate, validate_trace, DurationModel, ForceMode, SimError, SimOptions};
use tgraph::tgraph::Granularity;
use tgraph::workloads::{FixtureSpec, FIXTURE_NAMES};

#[derive(Parser)]
#[command(name = "tgc", version, about = "Task/event graph compiler and runtime simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a fixture graph as JSON.
    Gen(GenArgs),
    /// Compile a graph JSON file into an .mpkg image.
    Compile(CompileArgs),
    /// Run an .mpkg image on the simulated runtime and print metrics.
    Simulate(SimulateArgs),
    /// Export DOT for one pipeline stage.
    Dot(DotArgs),
    /// Re-check every image invariant of an .mpkg file.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct GenArgs {
    /// One of attention, matmul-allreduce, transformer, matmul-chain, random.
    fixture: String,
    #[arg(long)]
    seed: Option<u64>,
    /// Task count for `random`.
    #[arg(long)]
    target: Option<u32>,
    #[arg(long)]
    tp: Option<u32>,
    /// AllReduce tile count for `matmul-allreduce`.
    #[arg(long)]
    tiles: Option<u64>,
    /// MatMul split for `matmul-allreduce`, e.g. 16,12.
    #[arg(long, value_delimiter = ',')]
    mm_partition: Option<Vec<u64>>,
    /// Op count for `matmul-chain`.
    #[arg(long)]
    count: Option<u32>,
    /// Comma-separated request lengths.
    #[arg(long, value_delimiter = ',')]
    seqs: Option<Vec<u64>>,
    #[arg(long)]
    d_model: Option<u64>,
    #[arg(long)]
    heads: Option<u64>,
    #[arg(long, num_args = 3, value_names = ["M", "K", "N"])]
    mkn: Option<Vec<u64>>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BuildArgs {
    /// a100, h100, b200 or a profile JSON path.
    #[arg(long, default_value = "h100")]
    profile: String,
    /// One barrier event per producer/consumer op pair.
    #[arg(long)]
    coarse_events: bool,
    #[arg(long, value_enum, default_value_t = Mode::Hybrid)]
    force_mode: Mode,
}

#[derive(Args)]
struct CompileArgs {
    graph: PathBuf,
    #[command(flatten)]
    build: BuildArgs,
    /// Defaults to the input path with an .mpkg extension.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    image: PathBuf,
    #[arg(long, default_value = "h100")]
    profile: String,
    #[arg(long)]
    no_pipelining: bool,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    iterations: u32,
    /// Overrides the launch modes stored in the image.
    #[arg(long, value_enum)]
    force_mode: Option<Mode>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Uniform compute-time jitter in percent.
    #[arg(long, default_value_t = 0)]
    jitter: u32,
    /// JSON-lines trace output.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct DotArgs {
    /// Graph JSON, or an .mpkg image for the linearized stage.
    input: PathBuf,
    #[arg(long, value_enum, default_value_t = Stage::Linearized)]
    stage: Stage,
    #[command(flatten)]
    build: BuildArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    image: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Hybrid,
    Jit,
    Aot,
}

impl From<Mode> for ForceMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Hybrid => ForceMode::Hybrid,
            Mode::Jit => ForceMode::Jit,
            Mode::Aot => ForceMode::Aot,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Stage {
    Raw,
    Fused,
    Normalized,
    Linearized,
}

enum Failure {
    Input(anyhow::Error),
    Check(Vec<String>),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Input(e)
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Gen(a) => gen(a),
        Cmd::Compile(a) => cmd_compile(a),
        Cmd::Simulate(a) => cmd_simulate(a),
        Cmd::Dot(a) => cmd_dot(a),
        Cmd::Verify(a) => cmd_verify(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(e)) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(2)
        }
        Err(Failure::Check(problems)) => {
            for p in &problems {
                eprintln!("violation: {p}");
            }
            ExitCode::from(1)
        }
    }
}

/// Error chain without repeating sources already embedded in their parent's message.
fn describe(e: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in e.chain() {
        let part = cause.to_string();
        if msg.is_empty() {
            msg = part;
        } else if !msg.ends_with(&part) {
            msg = format!("{msg}: {part}");
        }
    }
    msg
}

fn read(path: &Path) -> anyhow::Result<Vec<u8>> {
    fs::read(path).with_context(|| format!("reading {}", path.display()))
}

fn write(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn emit(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(p) => write(p, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load_graph(path: &Path) -> anyhow::Result<CompGraph> {
    let text = String::from_utf8(read(path)?).with_context(|| format!("{} is not UTF-8", path.display()))?;
    CompGraph::from_json(&text).with_context(|| format!("parsing {}", path.display()))
}

fn load_profile(spec: &str) -> anyhow::Result<HardwareProfile> {
    HardwareProfile::resolve(spec).with_context(|| format!("profile {spec}"))
}

fn build(graph: &CompGraph, b: &BuildArgs) -> anyhow::Result<Compiled> {
    let profile = load_profile(&b.profile)?;
    let granularity = if b.coarse_events { Granularity::Coarse } else { Granularity::Fine };
    Ok(compile(graph, &profile, CompileOptions { granularity, force: b.force_mode.into() })?)
}

fn gen(a: GenArgs) -> Outcome {
    if !FIXTURE_NAMES.contains(&a.fixture.as_str()) {
        return Err(anyhow!("unknown fixture {:?}; expected one of {}", a.fixture, FIXTURE_NAMES.join(", ")).into());
    }
    let mut spec = FixtureSpec::new(&a.fixture);
    if let Some(v) = a.seed {
        spec.seed = v;
    }
    if let Some(v) = a.target {
        spec.target = v;
    }
    if let Some(v) = a.tp {
        spec.tp = v;
    }
    if let Some(v) = a.count {
        spec.count = v;
    }
    if let Some(v) = a.seqs {
        spec.seqs = v;
    }
    if let Some(v) = a.d_model {
        spec.d_model = v;
    }
    if let Some(v) = a.heads {
        spec.n_heads = v;
    }
    if let Some(v) = a.mkn {
        (spec.m, spec.k, spec.n) = (v[0], v[1], v[2]);
    }
    spec.tiles = a.tiles.or(spec.tiles);
    spec.mm_partition = a.mm_partition.or(spec.mm_partition);
    let g = spec.generate().map_err(anyhow::Error::from)?;
    let mut text = g.to_json();
    text.push('\n');
    emit(a.out.as_deref(), &text)?;
    Ok(())
}

fn cmd_compile(a: CompileArgs) -> Outcome {
    let graph = load_graph(&a.graph)?;
    let c = build(&graph, &a.build)?;
    let out = a.out.unwrap_or_else(|| a.graph.with_extension("mpkg"));
    write(&out, &serialize(&c.image))?;
    println!("{}", serde_json::to_string(&c.summary).expect("summary serializes"));
    Ok(())
}

fn load_image(path: &Path) -> anyhow::Result<LinearizedImage> {
    deserialize(&read(path)?).with_context(|| format!("loading {}", path.display()))
}

fn cmd_simulate(a: SimulateArgs) -> Outcome {
    let mut img = load_image(&a.image)?;
    if let Some(m) = a.force_mode {
        apply_launch_modes(&mut img, m.into());
    }
    let profile = load_profile(&a.profile)?;
    let opts = SimOptions { iterations: a.iterations, pipelining: !a.no_pipelining, seed: a.seed, jitter_pct: a.jitter };
    let trace = match simulate(&img, &profile, &DurationModel::default(), opts) {
        Ok(t) => t,
        Err(e @ SimError::InvalidImage(_)) => return Err(anyhow!(e).into()),
        Err(e) => return Err(Failure::Check(vec![e.to_string()])),
    };
    if let Some(p) = &a.trace {
        write(p, trace.to_json_lines().as_bytes())?;
    }
    let violations = validate_trace(&trace, &img);
    if !violations.is_empty() {
        return Err(Failure::Check(violations.iter().map(|v| v.to_string()).collect()));
    }
    let m = trace.metrics;
    let report = serde_json::json!({
        "profile": profile.name,
        "tasks": img.tasks.len(),
        "iterations": trace.iterations,
        "workers": trace.total_workers,
        "pipelining": opts.pipelining,
        "makespan": m.makespan,
        "utilization": m.utilization,
        "bubble_fraction": m.bubble_fraction,
        "jit_tasks": m.jit_tasks,
        "aot_tasks": m.aot_tasks,
        "mean_queue_wait": m.mean_queue_wait,
    });
    println!("{report}");
    Ok(())
}

fn cmd_dot(a: DotArgs) -> Outcome {
    let bytes = read(&a.input)?;
    let text = if bytes.starts_with(MAGIC) {
        if a.stage != Stage::Linearized {
            return Err(anyhow!("an .mpkg image only has the linearized stage").into());
        }
        deserialize(&bytes).with_context(|| format!("loading {}", a.input.display()))?.to_dot()
    } else {
        let c = build(&load_graph(&a.input)?, &a.build)?;
        match a.stage {
            Stage::Raw => c.raw.to_dot(),
            Stage::Fused => c.fused.to_dot(),
            Stage::Normalized => c.normalized.to_dot(),
            Stage::Linearized => c.image.to_dot(),
        }
    };
    emit(a.out.as_deref(), &text)?;
    Ok(())
}

fn cmd_verify(a: VerifyArgs) -> Outcome {
    let bytes = read(&a.image)?;
    let img = deserialize_unchecked(&bytes).map_err(|e| Failure::Check(vec![e.to_string()]))?;
    let problems = img.violations();
    if !problems.is_empty() {
        return Err(Failure::Check(problems));
    }
    println!("ok: {} tasks, {} events", img.tasks.len(), img.events.len());
    Ok(())
}
