//! Command-line driver: synthetic data, training, evaluation, the ablation
//! grid and the gradient check.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use cite_core::baselines::{ablation_sweep, zero_shot_model, Cell, GridRun, TaskSource};
use cite_core::check::check_all;
use cite_core::autodiff::BackwardFault;
use cite_core::data::{split, synth_generate, Dataset, SynthSpec};
use cite_core::eval::{evaluate, Report};
use cite_core::par::Exec;
use cite_core::trainer::{train, write_log, TRAIN_LOG};
use cite_core::{Error, ExperimentConfig, FreezePolicy, Result};

const DATA_ROOT_ENV: &str = "CITE_DATA_ROOT";

#[derive(Parser)]
#[command(name = "cite", version, about = "Prompt tuning with text-anchored classification on a frozen ViT")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic slide dataset with a train/validation split.
    Synth(SynthArgs),
    /// Train one policy and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint (or the zero-shot model) and print a JSON report.
    Eval(EvalArgs),
    /// Run the prompt × text grid over shots and seeds.
    Ablate(AblateArgs),
    /// Compare analytic and finite-difference gradients on a toy model.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 25)]
    slides_per_class: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fraction of each class's slides assigned to training.
    #[arg(long, default_value_t = 0.2)]
    train_fraction: f64,
    #[arg(long)]
    out: PathBuf,
    /// Allow writing into a non-empty directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct DataArgs {
    /// Dataset directory; falls back to $CITE_DATA_ROOT, then the config.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    policy: Option<String>,
    /// Train on the k slides per class with the most patches.
    #[arg(long)]
    shots: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint directory written by `train`.
    #[arg(long, conflicts_with = "policy")]
    checkpoint: Option<PathBuf>,
    /// Only `none` (zero-shot) is accepted here; trained policies need a checkpoint.
    #[arg(long)]
    policy: Option<String>,
    /// Config for the zero-shot model.
    #[arg(long, requires = "policy")]
    config: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    /// Manifest to evaluate, relative to the data directory.
    #[arg(long)]
    manifest: Option<String>,
    /// Write per-patch probabilities to this CTNS file.
    #[arg(long)]
    dump_patch_probs: Option<PathBuf>,
    /// Also write the report to `<out>/report.json`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
    shots: Vec<usize>,
    /// Number of seeds, run as 0..N.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    /// Use a fixed dataset instead of a fresh synthetic task per seed.
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 25)]
    slides_per_class: usize,
    #[arg(long, default_value_t = 0.2)]
    train_fraction: f64,
    #[arg(long)]
    iterations: Option<usize>,
    /// Worker threads for independent cells.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 1e-3)]
    eps: f64,
    #[arg(long, default_value_t = 1e-3)]
    tol: f64,
    /// Test hook: use a wrong GELU derivative in the backward pass.
    #[arg(long, hide = true)]
    corrupt_backward: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let outcome = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn print_json(v: &Value) -> Result<()> {
    print_text(&(serde_json::to_string_pretty(v)? + "\n"))
}

/// Writes to stdout; a closed pipe (e.g. `| head`) is not an error.
fn print_text(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(io_err(Path::new("<stdout>"), e)),
        _ => Ok(()),
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

/// Flag, then environment, then config file.
fn data_root(flag: Option<&Path>, cfg: &ExperimentConfig) -> Result<PathBuf> {
    flag.map(Path::to_path_buf)
        .or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
        .or_else(|| cfg.data.root.clone())
        .ok_or_else(|| Error::Config(format!("no data directory: pass --data, set {DATA_ROOT_ENV} or data.root")))
}

fn cmd_synth(a: SynthArgs) -> Result<u8> {
    if a.out.exists() {
        let non_empty = fs::read_dir(&a.out).map_err(|e| io_err(&a.out, e))?.next().is_some();
        if non_empty && !a.force {
            return Err(Error::Invalid(format!("{} is not empty; pass --force to overwrite", a.out.display())));
        }
    }
    let spec = SynthSpec::new(a.classes, a.slides_per_class, a.seed);
    let ds = synth_generate(&spec, &a.out)?;
    let (train_m, val_m) = split(ds.manifest(), a.train_fraction, a.seed)?;
    let cfg = ExperimentConfig::default();
    train_m.save(a.out.join(&cfg.data.train_manifest))?;
    val_m.save(a.out.join(&cfg.data.validation_manifest))?;
    write_file(&a.out.join("synth.json"), &(serde_json::to_string_pretty(&spec)? + "\n"))?;
    print_json(&json!({
        "manifest": a.out.join("manifest.json"),
        "train_manifest": a.out.join(&cfg.data.train_manifest),
        "validation_manifest": a.out.join(&cfg.data.validation_manifest),
        "slides": ds.num_slides(),
        "train_slides": train_m.slides.len(),
        "validation_slides": val_m.slides.len(),
        "patches": ds.total_patches(),
        "synth": spec,
    }))?;
    Ok(0)
}

fn cmd_train(a: TrainArgs) -> Result<u8> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(p) = &a.policy {
        cfg.train.policy = FreezePolicy::parse(p)?;
    }
    if cfg.train.policy == FreezePolicy::None {
        return Err(Error::Config("zero-shot requires no training; use eval".into()));
    }
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    if let Some(n) = a.iterations {
        cfg.train.iterations = n;
    }
    if a.shots.is_some() {
        cfg.data.shots = a.shots;
    }
    let root = data_root(a.data.data.as_deref(), &cfg)?;
    cfg.data.root = Some(root.clone());
    let cfg = cfg.resolve()?;

    let full = Dataset::open(&root, &cfg.data.train_manifest)?;
    let train_set = match cfg.data.shots {
        Some(k) => full.few_shot(k)?,
        None => full,
    };
    let (ckpt, log) = train(&train_set, &cfg, Exec::default())?;
    ckpt.save(&a.out)?;
    write_log(a.out.join(TRAIN_LOG), &log)?;
    print_json(&json!({
        "checkpoint": a.out,
        "policy": cfg.train.policy,
        "seed": cfg.train.seed,
        "train_slides": train_set.num_slides(),
        "final_loss": log.last().map(|e| e.loss),
        "trainable": ckpt.budget(),
        "config": cfg,
    }))?;
    Ok(0)
}

fn cmd_eval(a: EvalArgs) -> Result<u8> {
    let (model, cfg, method) = match (&a.checkpoint, &a.policy) {
        (Some(dir), _) => {
            let ckpt = cite_core::trainer::Checkpoint::load(dir)?;
            let method = ckpt.policy().tag().to_string();
            (ckpt.model, ckpt.config, method)
        }
        (None, Some(p)) => {
            let policy = FreezePolicy::parse(p)?;
            if policy != FreezePolicy::None {
                return Err(Error::Config(format!("policy `{policy}` needs a trained checkpoint; pass --checkpoint")));
            }
            let mut cfg = load_config(a.config.as_deref())?;
            cfg.train.policy = FreezePolicy::None;
            let cfg = cfg.resolve()?;
            let root = data_root(a.data.data.as_deref(), &cfg)?;
            let name = a.manifest.clone().unwrap_or_else(|| cfg.data.validation_manifest.clone());
            let cats = cite_core::data::SlideManifest::load(root.join(name))?.categories;
            (zero_shot_model(&cfg, &cats)?, cfg, "zero_shot".to_string())
        }
        (None, None) => return Err(Error::Config("pass --checkpoint or --policy none".into())),
    };
    let root = data_root(a.data.data.as_deref(), &cfg)?;
    let name = a.manifest.clone().unwrap_or_else(|| cfg.data.validation_manifest.clone());
    let ds = Dataset::open(&root, &name)?;
    let ev = evaluate(&model, &ds, Exec::default())?;
    if let Some(path) = &a.dump_patch_probs {
        ev.patch_probs.write(path)?;
    }
    let mut echo = serde_json::to_value(&cfg)?;
    if let Value::Object(m) = &mut echo {
        if let Some(Value::Object(d)) = m.get_mut("data") {
            d.insert("evaluated_manifest".into(), Value::String(name.clone()));
        }
    }
    let report = Report::new(&method, cfg.train.seed, echo, &ev, &ds.manifest().categories);
    let text = report.to_json()?;
    if let Some(out) = &a.out {
        write_file(&out.join("report.json"), &text)?;
    }
    print_text(&text)?;
    Ok(0)
}

fn cmd_ablate(a: AblateArgs) -> Result<u8> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(n) = a.iterations {
        cfg.train.iterations = n;
    }
    if a.shots.is_empty() || a.shots.contains(&0) {
        return Err(Error::Config("--shots needs positive counts".into()));
    }
    if a.seeds == 0 || a.jobs == 0 {
        return Err(Error::Config("--seeds and --jobs must be at least 1".into()));
    }
    let explicit = a.data.data.clone().or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from));
    let (source, data_echo) = match explicit.or_else(|| cfg.data.root.clone()) {
        Some(root) => {
            let train_set = Dataset::open(&root, &cfg.data.train_manifest)?;
            let validation = Dataset::open(&root, &cfg.data.validation_manifest)?;
            (TaskSource::Fixed { train: train_set, validation }, json!({ "fixed": root }))
        }
        None => {
            let spec = SynthSpec::new(a.classes, a.slides_per_class, 0);
            let echo = json!({ "synthetic": spec, "train_fraction": a.train_fraction });
            (
                TaskSource::Synthetic {
                    spec,
                    train_fraction: a.train_fraction,
                },
                echo,
            )
        }
    };
    let seeds: Vec<u64> = (0..a.seeds).collect();
    let exec = if a.jobs > 1 { Exec::Parallel } else { Exec::Sequential };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(a.jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let runs = if a.jobs > 1 {
        pool.install(|| ablation_sweep(&source, &a.shots, &seeds, &cfg, exec))?
    } else {
        ablation_sweep(&source, &a.shots, &seeds, &cfg, exec)?
    };
    let summary = summarize(&runs, &a.shots);
    let doc = json!({
        "config": cfg,
        "data": data_echo,
        "shots": a.shots,
        "seeds": seeds,
        "summary": summary,
        "runs": runs,
    });
    let text = serde_json::to_string_pretty(&doc)? + "\n";
    if let Some(out) = &a.out {
        write_file(&out.join("ablation.json"), &text)?;
    }
    eprint!("{}", table(&runs, &a.shots));
    print_text(&text)?;
    Ok(0)
}

/// Per-shot mean macro accuracy of every cell and how often the prompt +
/// text cell is best.
fn summarize(runs: &[GridRun], shots: &[usize]) -> Value {
    let mut means = serde_json::Map::new();
    for &k in shots {
        let at: Vec<&GridRun> = runs.iter().filter(|r| r.shots == k).collect();
        let mut row = serde_json::Map::new();
        for cell in Cell::ALL {
            let m = at.iter().map(|r| r.cells[cell.name()].macro_accuracy).sum::<f64>() / at.len() as f64;
            row.insert(cell.name().into(), json!(m));
        }
        means.insert(k.to_string(), Value::Object(row));
    }
    json!({
        "mean_macro": means,
        "pairs": runs.len(),
        "cite_best": runs.iter().filter(|r| r.is_best(Cell::Cite)).count(),
        "cite_strictly_best": runs.iter().filter(|r| r.is_strictly_best(Cell::Cite)).count(),
    })
}

fn table(runs: &[GridRun], shots: &[usize]) -> String {
    let mut s = format!("{:>6} {:>5}", "shots", "seed");
    for cell in Cell::ALL {
        s += &format!(" {:>14}", cell.name());
    }
    s.push('\n');
    for &k in shots {
        for r in runs.iter().filter(|r| r.shots == k) {
            s += &format!("{:>6} {:>5}", r.shots, r.seed);
            for cell in Cell::ALL {
                s += &format!(" {:>14.3}", r.cells[cell.name()].macro_accuracy);
            }
            s.push('\n');
        }
    }
    s
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<u8> {
    let fault = a.corrupt_backward.then_some(BackwardFault::GeluDerivative);
    let started = std::time::Instant::now();
    let checks = check_all(a.eps, a.tol, fault)?;
    let pass = checks.iter().all(|c| c.report.pass);
    // timing goes to stderr so the report itself is reproducible
    eprintln!("gradcheck finished in {:.2} s", started.elapsed().as_secs_f64());
    print_json(&json!({
        "eps": a.eps,
        "tol": a.tol,
        "pass": pass,
        "checks": checks,
    }))?;
    if pass {
        Ok(0)
    } else {
        eprintln!("error: gradient check failed");
        Ok(2)
    }
}
