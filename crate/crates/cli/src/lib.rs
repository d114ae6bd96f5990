//! `cmunet` command-line interface.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
//! `CMUNET_THREADS` caps the number of worker threads.

pub mod bench;
pub mod checks;

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use cmunet::checkpoint::Checkpoint;
use cmunet::data::{predict, read_ppm, rgb_to_tensor, synth_generate, tta_predict, write_pgm, Dataset, Split, MAX_CLASSES};
use cmunet::metrics::compute_metrics;
use cmunet::model::{CmUnet, ModelConfig};
use cmunet::train::{best_path, evaluate, log_path, train, RunConfig};
use cmunet_tensor::par;

use crate::bench::{bench_scan, BenchConfig};
use crate::checks::{report, run_suite, Suite};

/// Effective defaults of a run configuration; every field may be omitted.
pub const DEFAULT_CONFIG_HELP: &str = r#"Run configuration (JSON, unknown keys rejected). Defaults:
{
  "model": {
    "in_channels": 3,
    "encoder_channels": [16, 32, 64, 128],
    "blocks_per_stage": [2, 2, 2, 2],
    "decoder_csmamba_per_stage": 1,
    "num_classes": 4,
    "msaa": { "reduction": 4, "kernel_set": [3, 5, 7], "spatial_kernel": 7 },
    "csmamba": { "expansion": 2.0, "state_size": 8, "merge_mode": "sum",
                 "share_directions": false, "residual": true },
    "aux_weight": 0.4,
    "included_classes": [],
    "use_msaa": true,
    "multi_output": true,
    "seed": 0
  },
  "train": { "epochs": 30, "batch_size": 8, "lr": 0.0006, "schedule": "cosine",
             "weight_decay": 0.01, "seed": 42, "deterministic": true, "eval_tta": false },
  "data": { "root": null, "crop": 64,
            "augment": { "hflip": true, "vflip": true, "rotate": true,
                         "scales": [0.5, 0.75, 1.0, 1.25, 1.5] } },
  "ablation": { "msaa": true, "multi_output": true }
}
An empty model.included_classes means every class counts towards the means.
The ablation section overrides model.use_msaa and model.multi_output."#;

#[derive(Parser, Debug)]
#[command(name = "cmunet", version, about = "Segmentation network with selective-scan decoder: data, training, evaluation, checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset (images/, masks/, meta.json).
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 250)]
        num: usize,
        /// Image side, a multiple of 32.
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Number of classes, 2 to 8.
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Train a model; writes <out>, <out stem>.best.cmuw and <out>.log.jsonl.
    #[command(after_long_help = DEFAULT_CONFIG_HELP)]
    Train {
        /// JSON run configuration (see --help for defaults).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory; overrides data.root.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides train.epochs.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a checkpoint and write a metric report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
        /// Average predictions over horizontal and vertical flips.
        #[arg(long)]
        tta: bool,
        #[arg(long, value_enum, default_value_t = SplitArg::Val)]
        split: SplitArg,
    },
    /// Time the parallel and sequential scans over sequence lengths.
    BenchScan {
        #[arg(long, value_delimiter = ',', default_value = "4096,8192,16384,32768")]
        lengths: Vec<usize>,
        #[arg(long, default_value_t = 16)]
        channels: usize,
        #[arg(long, default_value_t = 8)]
        state: usize,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long, default_value_t = 3)]
        warmup: usize,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run a verification suite; exit 0 iff every check passes.
    Check {
        #[arg(long, value_enum, default_value_t = Suite::All)]
        suite: Suite,
        /// Test hook: perturb the parallel scan output.
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Print a configuration summary and parameter counts.
    Info {
        #[arg(long, conflicts_with_all = ["config", "paper_scale"])]
        ckpt: Option<PathBuf>,
        #[arg(long, conflicts_with = "paper_scale")]
        config: Option<PathBuf>,
        /// Use the full-size ResNet-18 configuration.
        #[arg(long)]
        paper_scale: bool,
    },
    /// Segment one PPM image into a PGM class mask.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        tta: bool,
    },
}

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(String),
}

impl Failure {
    pub fn code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }
}

impl From<cmunet::Error> for Failure {
    fn from(e: cmunet::Error) -> Self {
        match e {
            cmunet::Error::Config(_) => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

type Outcome = Result<(), Failure>;

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = configure_threads().and_then(|()| dispatch(cli.command));
    match result {
        Ok(()) => 0,
        Err(f) => {
            match &f {
                Failure::Usage(m) => eprintln!("error: {m}"),
                Failure::Runtime(m) => eprintln!("error: {m}"),
            }
            f.code()
        }
    }
}

fn configure_threads() -> Outcome {
    let Ok(v) = std::env::var("CMUNET_THREADS") else { return Ok(()) };
    let n: usize = v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| Failure::Usage(format!("CMUNET_THREADS must be a positive integer, got {v:?}")))?;
    #[cfg(feature = "parallel")]
    {
        // A pool may already exist when called repeatedly in one process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = n;
    Ok(())
}

fn dispatch(cmd: Command) -> Outcome {
    match cmd {
        Command::Generate { out, num, size, classes, seed } => cmd_generate(&out, num, size, classes, seed),
        Command::Train { config, data, out, epochs } => cmd_train(config.as_deref(), data, &out, epochs),
        Command::Eval { ckpt, data, report, tta, split } => cmd_eval(&ckpt, &data, report.as_deref(), tta, split),
        Command::BenchScan { lengths, channels, state, batch, reps, warmup, report } => {
            cmd_bench_scan(BenchConfig { lengths, channels, state, batch, warmup, reps }, report.as_deref())
        }
        Command::Check { suite, inject_fault } => cmd_check(suite, inject_fault),
        Command::Info { ckpt, config, paper_scale } => cmd_info(ckpt.as_deref(), config.as_deref(), paper_scale),
        Command::Predict { ckpt, image, out, tta } => cmd_predict(&ckpt, &image, &out, tta),
    }
}

fn write_text(path: &Path, text: &str) -> Outcome {
    std::fs::write(path, text).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn cmd_generate(out: &Path, num: usize, size: usize, classes: usize, seed: u64) -> Outcome {
    if !(2..=MAX_CLASSES).contains(&classes) {
        return Err(Failure::Usage(format!("--classes must be between 2 and {MAX_CLASSES}, got {classes}")));
    }
    if size == 0 || !size.is_multiple_of(32) {
        return Err(Failure::Usage(format!("--size must be a positive multiple of 32, got {size}")));
    }
    if num == 0 {
        return Err(Failure::Usage("--num must be positive".into()));
    }
    let meta = synth_generate(out, num, size, classes, seed)?;
    println!("wrote {num} samples ({} train / {} val, {size}x{size}, {classes} classes) to {}", meta.train.len(), meta.val.len(), out.display());
    Ok(())
}

fn cmd_train(config: Option<&Path>, data: Option<PathBuf>, out: &Path, epochs: Option<usize>) -> Outcome {
    let mut cfg = match config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?;
            RunConfig::from_json(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    if data.is_some() {
        cfg.data.root = data;
    }
    cfg.validate()?;
    let root = cfg.data.root.clone().ok_or_else(|| Failure::Usage("no dataset: pass --data or set data.root".into()))?;
    let dataset = Dataset::open(&root)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Failure::Runtime(format!("{}: {e}", parent.display())))?;
    }
    let total = cfg.train.epochs;
    println!(
        "training {} epochs on {} ({} train / {} val), log {}",
        total,
        root.display(),
        dataset.meta.train.len(),
        dataset.meta.val.len(),
        log_path(out).display()
    );
    let rep = train(&cfg, &dataset, out, |e| {
        println!("epoch {:>3}/{total}  loss {:.4}  val mIoU {:.4}  lr {:.2e}  {:.1}s", e.epoch, e.train_loss, e.val_miou, e.lr, e.seconds);
    })?;
    println!("{} parameters; checkpoint {}", rep.parameters, out.display());
    if let Some(b) = rep.best_epoch {
        println!("best val mIoU {:.4} at epoch {b}; {}", rep.best_val_miou, best_path(out).display());
    }
    Ok(())
}

fn load_model(ckpt: &Path) -> Result<CmUnet<f32>, Failure> {
    Ok(Checkpoint::load(ckpt)?.to_model::<f32>()?)
}

fn cmd_eval(ckpt: &Path, data: &Path, report_path: Option<&Path>, tta: bool, split: SplitArg) -> Outcome {
    let model = load_model(ckpt)?;
    let dataset = Dataset::open(data)?;
    if dataset.meta.num_classes != model.config.num_classes {
        return Err(Failure::Runtime(format!(
            "checkpoint predicts {} classes, dataset has {}",
            model.config.num_classes, dataset.meta.num_classes
        )));
    }
    let samples = dataset.load(match split {
        SplitArg::Train => Split::Train,
        SplitArg::Val => Split::Val,
    })?;
    if samples.is_empty() {
        return Err(Failure::Runtime("the selected split is empty".into()));
    }
    let cm = evaluate(&model, &samples, 8, tta)?;
    let rep = compute_metrics(&cm, &model.config.metric_classes())?;
    print!("{}", rep.table(&dataset.meta.class_names));
    if let Some(p) = report_path {
        write_text(p, &rep.to_json())?;
    }
    Ok(())
}

fn cmd_bench_scan(cfg: BenchConfig, report_path: Option<&Path>) -> Outcome {
    if cfg.lengths.is_empty() || cfg.lengths.contains(&0) || cfg.lengths.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Failure::Usage("--lengths must be positive and strictly ascending".into()));
    }
    if cfg.reps < 5 || cfg.channels == 0 || cfg.state == 0 || cfg.batch == 0 {
        return Err(Failure::Usage("--reps must be at least 5; --channels, --state and --batch positive".into()));
    }
    par::set_deterministic(false);
    let rep = bench_scan(&cfg).map_err(Failure::Runtime)?;
    println!("{:>8}  {:>28}  {:>28}", "L", "parallel ms (median, mean±sd)", "sequential ms (median, mean±sd)");
    for e in &rep.entries {
        let t = |t: &bench::Timing| format!("{:>9.3}  {:>9.3} ± {:<6.3}", t.median_ms, t.mean_ms, t.std_ms);
        println!("{:>8}  {}  {}", e.length, t(&e.parallel), t(&e.sequential));
    }
    for (i, r) in rep.parallel_ratios.iter().enumerate() {
        println!(
            "growth {} -> {}: parallel {:.3}, sequential {:.3}",
            rep.entries[i].length,
            rep.entries[i + 1].length,
            r,
            rep.sequential_ratios[i]
        );
    }
    println!("{}", rep.environment);
    if let Some(p) = report_path {
        write_text(p, &serde_json::to_string_pretty(&rep).expect("report serializes"))?;
    }
    Ok(())
}

fn cmd_check(suite: Suite, inject_fault: bool) -> Outcome {
    cmunet::ssm::inject_parallel_fault(inject_fault);
    let started = Instant::now();
    let results = run_suite(suite);
    cmunet::ssm::inject_parallel_fault(false);
    if report(&results, started) {
        Ok(())
    } else {
        let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
        Err(Failure::Runtime(format!("failed: {}", failed.join("; "))))
    }
}

fn cmd_info(ckpt: Option<&Path>, config: Option<&Path>, paper_scale: bool) -> Outcome {
    let (cfg, source) = match (ckpt, config) {
        (Some(p), _) => (Checkpoint::load(p)?.meta.model, p.display().to_string()),
        (None, Some(p)) => {
            let text = std::fs::read_to_string(p).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?;
            (RunConfig::from_json(&text)?.model_config(), p.display().to_string())
        }
        (None, None) if paper_scale => (ModelConfig::paper_scale(), "paper-scale configuration".to_string()),
        (None, None) => (ModelConfig::default(), "default configuration".to_string()),
    };
    let model = match ckpt {
        Some(p) => load_model(p)?,
        None => CmUnet::<f32>::new(cfg.clone())?,
    };
    println!("{source}");
    println!(
        "  encoder channels {:?}, blocks {:?}, {} CSMamba block(s) per decoder stage",
        cfg.encoder_channels, cfg.blocks_per_stage, cfg.decoder_csmamba_per_stage
    );
    println!(
        "  {} classes, state size {}, expansion {}, MSAA {}, multi-output {}",
        cfg.num_classes, cfg.csmamba.state_size, cfg.csmamba.expansion, cfg.use_msaa, cfg.multi_output
    );
    let total = model.count_parameters();
    println!("parameters: {total} ({:.2} M)", total as f64 / 1e6);
    for (name, n) in model.parameter_breakdown() {
        println!("  {name:<12} {n:>10}");
    }
    Ok(())
}

fn cmd_predict(ckpt: &Path, image: &Path, out: &Path, tta: bool) -> Outcome {
    let model = load_model(ckpt)?;
    let (w, h, rgb) = read_ppm(image)?;
    if h % 32 != 0 || w % 32 != 0 {
        return Err(Failure::Runtime(format!("image is {w}x{h}; both sides must be multiples of 32")));
    }
    let x = rgb_to_tensor(w, h, &rgb).reshape(&[1, 3, h, w]).map_err(|e| Failure::Runtime(e.to_string()))?;
    let mask = if tta { tta_predict(&model, &x)? } else { predict(&model, &x)? };
    write_pgm(out, w, h, &mask)?;
    println!("wrote {w}x{h} mask to {}", out.display());
    Ok(())
}
