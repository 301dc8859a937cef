//! `bevloop`: synthesize, train, index, retrieve, verify, evaluate and
//! profile the coarse-to-fine loop-closure pipeline.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bevloop::checks;
use bevloop::config::{Config, Preset};
use bevloop::dataset::{
    eligible_count, exhaustive_cost_ms, load_sequence, ms_to_hours, synth_world, write_sequence,
    Profiler, Stage, SynthConfig,
};
use bevloop::overlap::{format_overlap_dump, OverlapCounter};
use bevloop::pipeline::{evaluate, index_scans, retrieve, verify_query, EvalOptions, Index, Model};
use bevloop::retrieval::{format_candidates, read_candidates, CandidateSet};
use bevloop::trainer::{train, TrainConfig, TrainMode};
use clap::{Args, Parser, Subcommand};

type CliResult<T = ()> = Result<T, Box<dyn std::error::Error>>;

#[derive(Parser, Debug)]
#[command(
    name = "bevloop",
    version,
    about = "Coarse-to-fine LiDAR loop closure on BEV features"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// `key = value` file applied on top of the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for world generation, initialization and mining.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Candidates verified per query.
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Shape preset: full or desk.
    #[arg(long, global = true, default_value = "full")]
    preset: Preset,
    /// Worker threads; 1 runs everything serially.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic sequence in KITTI layout.
    Synth(SynthArgs),
    /// Train a model on a sequence with poses.
    Train(TrainArgs),
    /// Voxelize, encode and describe a sequence into the feature and
    /// descriptor databases.
    Index(IndexArgs),
    /// Coarse Top-K candidates for queries of an index.
    Retrieve(RetrieveArgs),
    /// Overlap scores for a candidate file.
    Verify(VerifyArgs),
    /// Full coarse-to-fine run with recall report.
    Evaluate(EvaluateArgs),
    /// Per-stage timings and the total-cost projection.
    Profile(ProfileArgs),
    /// Run every finite-difference gradient suite.
    Gradcheck,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    scans: usize,
    #[arg(long, default_value_t = 20)]
    revisits: usize,
    #[arg(long, default_value_t = 0.3)]
    reverse_fraction: f64,
    /// Point noise standard deviation, meters.
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    /// Obstacles per hectare.
    #[arg(long, default_value_t = 40.0)]
    density: f64,
    /// Distance between consecutive scans, meters.
    #[arg(long, default_value_t = 3.0)]
    step: f64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Sequence directory (velodyne/ and poses.txt).
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "B", value_parser = parse_mode)]
    mode: TrainMode,
    /// Checkpoint to start from instead of a fresh initialization.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct IndexArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RetrieveArgs {
    /// Directory written by `index`.
    #[arg(long)]
    index: PathBuf,
    /// Comma-separated query ids; default is every query with an eligible scan.
    #[arg(long, value_delimiter = ',')]
    queries: Option<Vec<u64>>,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[arg(long)]
    index: PathBuf,
    /// File written by `retrieve`.
    #[arg(long)]
    candidates: PathBuf,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Reuse an existing index instead of rebuilding it.
    #[arg(long)]
    index: Option<PathBuf>,
    /// Also run queries without a true loop.
    #[arg(long)]
    all_queries: bool,
}

#[derive(Args, Debug)]
struct ProfileArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

fn parse_mode(s: &str) -> Result<TrainMode, String> {
    s.parse().map_err(|e: bevloop::Error| e.to_string())
}

/// Inputs and outputs of one invocation.
#[derive(Debug, Default)]
struct RunManifest {
    command: &'static str,
    config: Option<PathBuf>,
    preset: String,
    seed: u64,
    checkpoints: Vec<PathBuf>,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
}

impl RunManifest {
    fn check(&self) -> CliResult {
        let inputs = self
            .config
            .iter()
            .chain(&self.checkpoints)
            .chain(&self.data);
        for p in inputs {
            if !p.exists() {
                return Err(format!("{} does not exist", p.display()).into());
            }
        }
        Ok(())
    }

    fn to_text(&self) -> String {
        let show = |p: &Option<PathBuf>| {
            p.as_ref()
                .map_or("-".to_string(), |p| p.display().to_string())
        };
        let ckpts: Vec<String> = self
            .checkpoints
            .iter()
            .map(|p| p.display().to_string())
            .collect();
        let mut s = String::new();
        let mut line = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("write to string");
        line("command", self.command.into());
        line("config", show(&self.config));
        line("preset", self.preset.clone());
        line("seed", self.seed.to_string());
        line(
            "checkpoints",
            if ckpts.is_empty() {
                "-".into()
            } else {
                ckpts.join(", ")
            },
        );
        line("data", show(&self.data));
        line("out", show(&self.out));
        s
    }

    fn write_into(&self, dir: &Path) -> CliResult {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("manifest.txt"), self.to_text())?;
        Ok(())
    }
}

fn resolve_config(g: &Global) -> CliResult<Config> {
    let mut cfg = Config::preset(g.preset);
    if let Some(path) = &g.config {
        cfg = Config::load(path, cfg)?;
    }
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    if let Some(k) = g.k {
        cfg.k = k;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_model(cfg: &Config, checkpoint: &Option<PathBuf>) -> CliResult<Model> {
    Ok(match checkpoint {
        Some(p) => Model::load(cfg, p)?,
        None => Model::new(cfg, cfg.seed)?,
    })
}

/// Writes `text` to `out` when given, otherwise prints it.
fn emit(out: &Option<PathBuf>, text: &str) -> CliResult {
    match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            std::fs::write(p, text)?;
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn require_out(g: &Global, command: &str) -> CliResult<PathBuf> {
    g.out
        .clone()
        .ok_or_else(|| format!("{command} needs --out").into())
}

fn manifest(g: &Global, cfg: &Config, command: &'static str) -> RunManifest {
    RunManifest {
        command,
        config: g.config.clone(),
        preset: format!("{:?}", g.preset).to_lowercase(),
        seed: cfg.seed,
        out: g.out.clone(),
        ..Default::default()
    }
}

fn cmd_synth(g: &Global, a: &SynthArgs) -> CliResult {
    let out = require_out(g, "synth")?;
    let sc = SynthConfig {
        trajectory_length: a.scans,
        revisit_count: a.revisits,
        reverse_fraction: a.reverse_fraction,
        step_m: a.step,
        obstacle_density: a.density,
        noise_sigma: a.noise,
        seed: g.seed.unwrap_or(0),
        ..Default::default()
    };
    let world = synth_world(&sc);
    write_sequence(&out, &world.clouds, &world.poses)?;
    let mut meta = String::new();
    writeln!(meta, "seed = {}", sc.seed)?;
    writeln!(meta, "scans = {}", sc.trajectory_length)?;
    writeln!(meta, "revisits = {}", sc.revisit_count)?;
    writeln!(meta, "reverse_fraction = {}", sc.reverse_fraction)?;
    writeln!(meta, "step = {}", sc.step_m)?;
    writeln!(meta, "density = {}", sc.obstacle_density)?;
    writeln!(meta, "noise = {}", sc.noise_sigma)?;
    std::fs::write(out.join("synth.txt"), meta)?;
    println!("wrote {} scans to {}", world.clouds.len(), out.display());
    Ok(())
}

fn cmd_train(g: &Global, cfg: &Config, a: &TrainArgs) -> CliResult {
    let out = require_out(g, "train")?;
    let mut m = manifest(g, cfg, "train");
    m.data = Some(a.data.clone());
    m.checkpoints = a.checkpoint.iter().cloned().collect();
    m.check()?;
    let (clouds, poses) = load_sequence(&a.data)?;
    let mut model = load_model(cfg, &a.checkpoint)?;
    m.write_into(&out)?;
    std::fs::write(out.join("config.txt"), cfg.to_text())?;
    let tc = TrainConfig::from_config(cfg, a.mode);
    let mut log = String::from("# epoch loss lr seed\n");
    train(&mut model, &clouds, &poses, &tc, Some(&out), |e| {
        println!("{} {}", e.line(), e.phase);
        log.push_str(&e.line());
        log.push('\n');
    })?;
    std::fs::write(out.join("train.log"), log)?;
    Ok(())
}

fn cmd_index(g: &Global, cfg: &Config, a: &IndexArgs) -> CliResult {
    let out = require_out(g, "index")?;
    let mut m = manifest(g, cfg, "index");
    m.data = Some(a.data.clone());
    m.checkpoints = a.checkpoint.iter().cloned().collect();
    m.check()?;
    let (clouds, _) = load_sequence(&a.data)?;
    let model = load_model(cfg, &a.checkpoint)?;
    let index = index_scans(&model, &clouds, None)?;
    index.save(&out)?;
    m.write_into(&out)?;
    println!(
        "indexed {} scans into {}",
        index.descriptors.len(),
        out.display()
    );
    Ok(())
}

fn cmd_retrieve(g: &Global, cfg: &Config, a: &RetrieveArgs) -> CliResult {
    let mut m = manifest(g, cfg, "retrieve");
    m.data = Some(a.index.clone());
    m.check()?;
    let index = Index::open(&a.index)?;
    let ids: Vec<u64> = index.descriptors.iter().map(|d| d.scan_id).collect();
    let queries = match &a.queries {
        Some(q) => q.clone(),
        None => ids
            .into_iter()
            .filter(|&q| eligible_count(q, cfg.exclusion) > 0)
            .collect(),
    };
    let sets: Vec<CandidateSet> = queries
        .iter()
        .map(|&q| retrieve(&index, q, cfg.k, cfg.exclusion))
        .collect::<Result<_, _>>()?;
    let text = format!(
        "# query rank scan affinity (seed {}, k {})\n{}",
        cfg.seed,
        cfg.k,
        format_candidates(&sets)
    );
    emit(&g.out, &text)
}

fn cmd_verify(g: &Global, cfg: &Config, a: &VerifyArgs) -> CliResult {
    let mut m = manifest(g, cfg, "verify");
    m.data = Some(a.index.clone());
    m.checkpoints = a.checkpoint.iter().cloned().collect();
    m.check()?;
    if !a.candidates.exists() {
        return Err(format!("{} does not exist", a.candidates.display()).into());
    }
    let index = Index::open(&a.index)?;
    let model = load_model(cfg, &a.checkpoint)?;
    let sets = read_candidates(&a.candidates)?;
    let counter = OverlapCounter::new();
    let decisions = sets
        .iter()
        .map(|s| verify_query(&model, &index, s, &counter))
        .collect::<Result<Vec<_>, _>>()?;
    let mut text = format!(
        "# query scan tau (seed {}, overlap calls {})\n",
        cfg.seed,
        counter.get()
    );
    text.push_str(&format_overlap_dump(&decisions));
    for d in &decisions {
        match d.best() {
            Some((id, tau)) => writeln!(text, "# match {} {} {}", d.query_id, id, tau)?,
            None => writeln!(text, "# match {} none", d.query_id)?,
        }
    }
    emit(&g.out, &text)
}

fn cmd_evaluate(g: &Global, cfg: &Config, a: &EvaluateArgs) -> CliResult {
    let mut m = manifest(g, cfg, "evaluate");
    m.data = Some(a.data.clone());
    m.checkpoints = a.checkpoint.iter().cloned().collect();
    m.check()?;
    let (clouds, poses) = load_sequence(&a.data)?;
    let model = load_model(cfg, &a.checkpoint)?;
    let index = match &a.index {
        Some(dir) => Index::open(dir)?,
        None => index_scans(&model, &clouds, None)?,
    };
    let mut opts = EvalOptions::from_config(cfg);
    opts.all_queries = a.all_queries;
    let ev = evaluate(&model, &index, &poses, &opts, None)?;
    let name = a
        .data
        .file_name()
        .map_or("sequence".into(), |n| n.to_string_lossy().into_owned());
    let report = ev.report(&name, cfg.seed, cfg.k);
    let kv = report.to_kv_text();
    print!("{kv}");
    if let Some(out) = &g.out {
        m.write_into(out)?;
        std::fs::write(out.join("report.txt"), &kv)?;
        std::fs::write(out.join("curve.dat"), report.curve_table())?;
        let mut matches = format!("# query match (seed {})\n", cfg.seed);
        for f in &ev.fine {
            match f.ranked.first() {
                Some(id) => writeln!(matches, "{} {}", f.query_id, id)?,
                None => writeln!(matches, "{} none", f.query_id)?,
            }
        }
        std::fs::write(out.join("matches.txt"), matches)?;
        std::fs::write(out.join("overlap.txt"), format_overlap_dump(&ev.decisions))?;
    }
    Ok(())
}

fn cmd_profile(g: &Global, cfg: &Config, a: &ProfileArgs) -> CliResult {
    let mut m = manifest(g, cfg, "profile");
    m.data = Some(a.data.clone());
    m.checkpoints = a.checkpoint.iter().cloned().collect();
    m.check()?;
    let (clouds, poses) = load_sequence(&a.data)?;
    if clouds.is_empty() {
        return Err(format!("no scans in {}", a.data.display()).into());
    }
    let model = load_model(cfg, &a.checkpoint)?;
    // Warm-up pass over a few scans so first-touch costs stay out.
    index_scans(&model, &clouds[..clouds.len().min(3)], None)?;

    let mut prof = Profiler::new();
    let index = index_scans(&model, &clouds, Some(&mut prof))?;
    let mut opts = EvalOptions::from_config(cfg);
    opts.all_queries = true;
    let ev = evaluate(&model, &index, &poses, &opts, Some(&mut prof))?;
    let timing = prof.report();

    let n_scans = clouds.len() as u64;
    let n_queries = ev.coarse.len() as u64;
    let n_pairs: u64 = (0..n_scans)
        .map(|q| eligible_count(q, cfg.exclusion) as u64)
        .sum();
    let projected = timing.projected_ms(n_scans, n_queries, cfg.k as u64);
    let exhaustive = exhaustive_cost_ms(
        n_scans,
        timing.per_scan_ms(),
        n_pairs,
        timing.mean_ms(Stage::OverlapEstimation),
    );
    let mut text = format!(
        "# seed {} scans {} queries {} k {}\n",
        cfg.seed, n_scans, n_queries, cfg.k
    );
    text.push_str(&timing.to_table());
    writeln!(text, "overlap_calls {}", ev.overlap_calls)?;
    writeln!(text, "projected_hours {:.6}", ms_to_hours(projected))?;
    writeln!(text, "exhaustive_pairs {n_pairs}")?;
    writeln!(text, "exhaustive_hours {:.6}", ms_to_hours(exhaustive))?;
    print!("{text}");
    if let Some(out) = &g.out {
        m.write_into(out)?;
        std::fs::write(out.join("profile.txt"), &text)?;
    }
    Ok(())
}

fn cmd_gradcheck(g: &Global) -> CliResult {
    let seed = g.seed.unwrap_or(0);
    let mut failed = Vec::new();
    let mut text = format!("# suite max_rel_error tolerance coordinates (seed {seed})\n");
    for r in checks::all_suites(seed)? {
        let verdict = if r.report.passed() { "PASS" } else { "FAIL" };
        writeln!(
            text,
            "{} {:.3e} {:.0e} {} {verdict}",
            r.name, r.report.max_rel_error, r.report.tolerance, r.report.coordinates
        )?;
        if !r.report.passed() {
            failed.push(r.name);
        }
    }
    emit(&g.out, &text)?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(format!("gradient check failed: {}", failed.join(", ")).into())
    }
}

fn run(cli: Cli) -> CliResult {
    let g = &cli.global;
    if let Some(jobs) = g.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global()?;
    }
    if let Command::Synth(a) = &cli.command {
        return cmd_synth(g, a);
    }
    if let Command::Gradcheck = &cli.command {
        return cmd_gradcheck(g);
    }
    let cfg = resolve_config(g)?;
    match &cli.command {
        Command::Train(a) => cmd_train(g, &cfg, a),
        Command::Index(a) => cmd_index(g, &cfg, a),
        Command::Retrieve(a) => cmd_retrieve(g, &cfg, a),
        Command::Verify(a) => cmd_verify(g, &cfg, a),
        Command::Evaluate(a) => cmd_evaluate(g, &cfg, a),
        Command::Profile(a) => cmd_profile(g, &cfg, a),
        Command::Synth(_) | Command::Gradcheck => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
