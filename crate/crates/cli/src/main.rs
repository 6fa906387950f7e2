use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use pcgroup::bench::{dense_scene, UniformWorkload, Workload, EXPECTED_NEIGHBORS};
use pcgroup::io::{read_proposals, read_scene, write_atomic, write_json, write_proposals, write_scene};
use pcgroup::knn::{Backend, OctreeLevels};
use pcgroup::metrics::MetricsReport;
use pcgroup::pipeline::{median, run_detailed, run_repeated, PipelineConfig, RunReport};
use pcgroup::synth::{synthesize, BlobShape, SynthSpec};
use pcgroup::{selftest, Error};

const THREADS_ENV: &str = "PCGROUP_THREADS";

#[derive(Parser)]
#[command(name = "pcgroup", version, about = "Point-cloud instance grouping: synth, run, bench, eval")]
struct Cli {
    /// Worker threads (also read from PCGROUP_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene with predictions and ground truth.
    Synth(SynthArgs),
    /// Group a scene into instance proposals.
    Run(RunArgs),
    /// Time k-NN or the full pipeline over a range of sizes.
    Bench(BenchArgs),
    /// Score proposals against a scene's ground truth.
    Eval(EvalArgs),
    /// Check octree index arithmetic and octree search against brute force.
    Selftest(SelftestArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

impl Switch {
    fn on(self) -> bool {
        self == Switch::On
    }
}

#[derive(Args)]
struct SynthArgs {
    /// JSON spec; flags below override its fields.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    instances: Option<usize>,
    /// Points per instance as `min,max`.
    #[arg(long, value_parser = parse_pair::<usize>)]
    points: Option<[usize; 2]>,
    #[arg(long, value_enum)]
    shape: Option<ShapeArg>,
    #[arg(long)]
    confusion: Option<f64>,
    #[arg(long)]
    offset_sigma: Option<f64>,
    #[arg(long)]
    background: Option<usize>,
    /// Output scene; `.txt` selects the text format.
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ShapeArg {
    Gaussian,
    Cuboid,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long, default_value = "s3dis")]
    preset: String,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    radius: Option<f64>,
    #[arg(long)]
    voxel_size: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    min_points: Option<usize>,
    /// Octree depth: `auto` or a fixed number of levels.
    #[arg(long, value_parser = parse_levels)]
    levels: Option<OctreeLevels>,
    #[arg(long, value_enum, default_value = "on")]
    caps: Switch,
    #[arg(long, value_enum, default_value = "on")]
    late_devox: Switch,
}

impl PipelineArgs {
    fn config(&self, octree: bool) -> pcgroup::Result<PipelineConfig> {
        let mut c = PipelineConfig::from_preset(&self.preset)?
            .with_toggles(octree, self.caps.on(), self.late_devox.on());
        if let Some(t) = self.tau {
            c.grouping.tau = t;
        }
        if let Some(r) = self.radius {
            c.grouping.radius = r;
        }
        if let Some(v) = self.voxel_size {
            c.voxel_size = v;
        }
        if let Some(k) = self.k {
            c.grouping.k = k;
        }
        if let Some(m) = self.min_points {
            c.grouping.min_points = m;
        }
        if let Some(l) = self.levels {
            c.octree_levels = l;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    scene: PathBuf,
    #[command(flatten)]
    pipeline: PipelineArgs,
    #[arg(long, value_enum, default_value = "on")]
    octree: Switch,
    /// Repeat the run and report median stage timings.
    #[arg(long, default_value_t = 1)]
    repeat: usize,
    /// JSON report; printed to stdout when omitted.
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Proposal file (`.sgpr` binary or `.json`).
    #[arg(long)]
    proposals: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BackendArg {
    Vanilla,
    Octree,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum WorkloadArg {
    Knn,
    Pipeline,
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated point counts, e.g. `1e5,2e5`.
    #[arg(long, value_delimiter = ',', value_parser = parse_size, required = true)]
    sizes: Vec<usize>,
    #[arg(long, value_enum, default_value = "both")]
    backend: BackendArg,
    #[arg(long, value_enum, default_value = "pipeline")]
    workload: WorkloadArg,
    #[arg(long, default_value_t = 3)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    pipeline: BenchPipelineArgs,
    /// CSV output; printed to stdout when omitted.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

/// Pipeline settings for `bench`; scaling and late devoxelization default
/// to off so the backend comparison isolates the k-NN stage.
#[derive(Args)]
struct BenchPipelineArgs {
    #[arg(long, default_value = "s3dis")]
    preset: String,
    #[arg(long, value_enum, default_value = "off")]
    caps: Switch,
    #[arg(long, value_enum, default_value = "off")]
    late_devox: Switch,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    proposals: PathBuf,
    /// Threshold for the semantic precision/recall table.
    #[arg(long, default_value_t = 0.2)]
    tau: f64,
    /// JSON metrics; printed to stdout when omitted.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct SelftestArgs {
    /// Randomized scenes in the octree equivalence sweep.
    #[arg(long, default_value_t = 200)]
    cases: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_pair<T: std::str::FromStr>(s: &str) -> Result<[T; 2], String> {
    let (a, b) = s.split_once(',').ok_or("expected `min,max`")?;
    let a = a.trim().parse().map_err(|_| format!("bad value `{a}`"))?;
    let b = b.trim().parse().map_err(|_| format!("bad value `{b}`"))?;
    Ok([a, b])
}

fn parse_levels(s: &str) -> Result<OctreeLevels, String> {
    if s.eq_ignore_ascii_case("auto") {
        return Ok(OctreeLevels::Auto);
    }
    s.parse()
        .map(OctreeLevels::Fixed)
        .map_err(|_| format!("expected `auto` or a level count, got `{s}`"))
}

fn parse_size(s: &str) -> Result<usize, String> {
    let v: f64 = s.trim().parse().map_err(|_| format!("bad size `{s}`"))?;
    if !(v >= 1.0 && v.fract() == 0.0 && v <= 1e12) {
        return Err(format!("size `{s}` must be a positive integer"));
    }
    Ok(v as usize)
}

fn emit_json<T: Serialize>(value: &T, path: Option<&Path>) -> pcgroup::Result<()> {
    match path {
        Some(p) => write_json(value, p),
        None => {
            let text = serde_json::to_string_pretty(value).map_err(|e| Error::InvalidData(e.to_string()))?;
            println!("{text}");
            Ok(())
        }
    }
}

fn synth(args: SynthArgs) -> pcgroup::Result<()> {
    let mut spec = match &args.spec {
        Some(path) => {
            let bytes = std::fs::read(path)?;
            serde_json::from_slice::<SynthSpec>(&bytes).map_err(|e| Error::Format {
                offset: 0,
                message: format!("{}: line {} column {}: {e}", path.display(), e.line(), e.column()),
            })?
        }
        None => SynthSpec::default(),
    };
    if let Some(v) = args.seed {
        spec.seed = v;
    }
    if let Some(v) = args.classes {
        spec.num_classes = v;
    }
    if let Some(v) = args.instances {
        spec.num_instances = v;
    }
    if let Some(v) = args.points {
        spec.points_per_instance = v;
    }
    if let Some(v) = args.shape {
        spec.shape = match v {
            ShapeArg::Gaussian => BlobShape::Gaussian,
            ShapeArg::Cuboid => BlobShape::Cuboid,
        };
    }
    if let Some(v) = args.confusion {
        spec.confusion_rate = v;
    }
    if let Some(v) = args.offset_sigma {
        spec.offset_sigma = v;
    }
    if let Some(v) = args.background {
        spec.background_points = v;
    }
    let scene = synthesize(&spec)?;
    write_scene(&scene, &args.output)?;
    eprintln!(
        "wrote {} points, {} instances to {}",
        scene.len(),
        scene.gt_instances()?.len(),
        args.output.display()
    );
    Ok(())
}

fn run(args: RunArgs) -> pcgroup::Result<()> {
    let scene = read_scene(&args.scene)?;
    let config = args.pipeline.config(args.octree.on())?;
    if args.repeat == 0 {
        return Err(Error::InvalidArgument("--repeat must be at least 1".into()));
    }
    let mut out = run_detailed(&scene, &config)?;
    if args.repeat > 1 {
        out.timings = run_repeated(&scene, &config, args.repeat)?.1;
    }
    let report = RunReport::new(&scene, &config, &out)?;
    if let Some(path) = &args.proposals {
        write_proposals(&out.proposals, path)?;
    }
    eprintln!(
        "{} proposals from {} points in {:.3} s",
        out.proposals.len(),
        scene.len(),
        out.timings.total
    );
    emit_json(&report, args.output.as_deref())
}

#[derive(Serialize)]
struct BenchRow {
    workload: Workload,
    size: usize,
    points: usize,
    backend: String,
    reps: usize,
    point_wise_s: f64,
    knn_s: f64,
    grouping_s: f64,
    top_down_s: f64,
    total_s: f64,
    proposals: Option<usize>,
    edges: Option<usize>,
}

fn bench(args: BenchArgs) -> pcgroup::Result<()> {
    if args.reps == 0 {
        return Err(Error::InvalidArgument("--reps must be at least 1".into()));
    }
    let mut sizes = args.sizes.clone();
    sizes.sort_unstable();
    sizes.dedup();
    let octree_flags: Vec<bool> = match args.backend {
        BackendArg::Vanilla => vec![false],
        BackendArg::Octree => vec![true],
        BackendArg::Both => vec![false, true],
    };
    let mut rows = Vec::new();
    for &size in &sizes {
        match args.workload {
            WorkloadArg::Knn => {
                let w = UniformWorkload::new(size, EXPECTED_NEIGHBORS, args.seed);
                for &octree in &octree_flags {
                    let backend = if octree { Backend::Octree(OctreeLevels::Auto) } else { Backend::Vanilla };
                    let mut times = Vec::new();
                    let mut edges = 0;
                    for _ in 0..args.reps {
                        let (t, e) = w.time(backend)?;
                        times.push(t);
                        edges = e;
                    }
                    let t = median(times);
                    eprintln!("knn size {size} {backend}: {t:.4} s");
                    rows.push(BenchRow {
                        workload: Workload::Knn,
                        size,
                        points: size,
                        backend: backend.to_string(),
                        reps: args.reps,
                        point_wise_s: 0.0,
                        knn_s: t,
                        grouping_s: 0.0,
                        top_down_s: 0.0,
                        total_s: t,
                        proposals: None,
                        edges: Some(edges),
                    });
                }
            }
            WorkloadArg::Pipeline => {
                let scene = dense_scene(size, args.seed)?;
                for &octree in &octree_flags {
                    let p = &args.pipeline;
                    let config = PipelineConfig::from_preset(&p.preset)?
                        .with_toggles(octree, p.caps.on(), p.late_devox.on());
                    let (proposals, t) = run_repeated(&scene, &config, args.reps)?;
                    eprintln!("pipeline size {size} {}: {:.4} s", config.backend(), t.total);
                    rows.push(BenchRow {
                        workload: Workload::Pipeline,
                        size,
                        points: scene.len(),
                        backend: config.backend().to_string(),
                        reps: args.reps,
                        point_wise_s: t.point_wise,
                        knn_s: t.knn,
                        grouping_s: t.grouping,
                        top_down_s: t.top_down,
                        total_s: t.total,
                        proposals: Some(proposals.len()),
                        edges: None,
                    });
                }
            }
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in &rows {
        w.serialize(row).map_err(std::io::Error::from)?;
    }
    let bytes = w.into_inner().map_err(|e| e.into_error())?;
    match &args.output {
        Some(path) => write_atomic(path, &bytes),
        None => {
            print!("{}", String::from_utf8_lossy(&bytes));
            Ok(())
        }
    }
}

fn eval(args: EvalArgs) -> pcgroup::Result<()> {
    let scene = read_scene(&args.scene)?;
    let proposals = read_proposals(&args.proposals)?;
    let report = MetricsReport::evaluate(&scene, &proposals, args.tau)?;
    eprintln!(
        "AP {:.4}  AP50 {:.4}  AP25 {:.4}  mPrec50 {:.4}  mRec50 {:.4}",
        report.ap, report.ap50, report.ap25, report.mprec50, report.mrec50
    );
    emit_json(&report, args.output.as_deref())
}

fn run_selftest(args: SelftestArgs) -> pcgroup::Result<bool> {
    let checks = selftest::run_all(args.cases, args.seed);
    for c in &checks {
        let status = if c.passed { "PASS" } else { "FAIL" };
        println!("{status} {:<22} {:>8.2}s  {}", c.name, c.seconds, c.detail);
    }
    Ok(checks.iter().all(|c| c.passed))
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Format { .. } => 3,
        Error::Io(_) => 1,
        _ => 2,
    }
}

fn threads(cli: Option<usize>) -> Result<Option<usize>, String> {
    if cli.is_some() {
        return Ok(cli);
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| format!("{THREADS_ENV}={v} is not a thread count")),
        Err(_) => Ok(None),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match threads(cli.threads) {
        Ok(Some(n)) => {
            if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                eprintln!("error: {e}");
                return ExitCode::from(2);
            }
        }
        Ok(None) => {}
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::Synth(a) => synth(a).map(|_| true),
        Command::Run(a) => run(a).map(|_| true),
        Command::Bench(a) => bench(a).map(|_| true),
        Command::Eval(a) => eval(a).map(|_| true),
        Command::Selftest(a) => run_selftest(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
