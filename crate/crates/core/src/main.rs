use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use adkd::config::{Profile, TrainConfig};
use adkd::corpus::{generate_corpus, CorpusSpec};
use adkd::data::{load_image, preprocess, save_pgm, scan_layout, Dataset};
use adkd::evaluate::{evaluate, EvalOptions};
use adkd::gradcheck::{run_suite, TOLERANCE};
use adkd::metrics::{latency_report, DEFAULT_FPR_LIMIT};
use adkd::trainer::{resume, train, Checkpoint};
use adkd::{weights, Error, Result};

/// Student-teacher anomaly detection with attention-refined distillation.
#[derive(Parser)]
#[command(name = "adkd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus described by a spec file.
    Gen {
        /// Corpus spec (`key = value`); defaults to the built-in desk corpus.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output root of the dataset tree.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the spec seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the student and attention modules.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Where the best checkpoint is written.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Teacher backbone weights file; a seeded random teacher otherwise.
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Continue from the checkpoint instead of starting over.
        #[arg(long)]
        resume: bool,
    },
    /// Anomaly maps of individual images.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory receiving `<stem>.adam` grids and `<stem>_map.pgm` previews.
        #[arg(long)]
        out: Option<PathBuf>,
        /// PPM or PGM images.
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Per-class AUROC, PRO and latency on a dataset's test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset root; defaults to the checkpoint's `data_root`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Directory receiving `report.txt` and `report.tsv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Random instances per operation.
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
    /// Single-threaded timed inference over a dataset's test images.
    Bench {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Timed passes over the test images.
        #[arg(long, default_value_t = 1)]
        repeat: usize,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Run config (`key = value`) applied on top of the profile.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset root; overrides `data_root`.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "desk")]
    profile: Profile,
}

impl RunArgs {
    fn config(&self, checkpoint: Option<&Path>) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::for_profile(self.profile);
        if let Some(p) = &self.config {
            cfg = cfg.load(p)?;
        }
        if let Some(d) = &self.data {
            cfg.data_root = Some(d.clone());
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(c) = checkpoint {
            cfg.checkpoint_path = Some(c.to_path_buf());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn dataset(root: Option<&Path>) -> Result<Dataset> {
    let root = root.ok_or_else(|| Error::Config("no dataset root: pass --data or set data_root".into()))?;
    scan_layout(root)
}

fn eval_options(cfg: &TrainConfig) -> EvalOptions {
    EvalOptions {
        input_size: cfg.input_size(),
        mean: cfg.norm_mean,
        std: cfg.norm_std,
        fpr_limit: DEFAULT_FPR_LIMIT,
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Output file stems: the image stem, or `<parent>_<stem>` when stems
/// collide.
fn output_names(images: &[PathBuf]) -> Vec<String> {
    let part = |p: Option<&std::ffi::OsStr>| p.and_then(|s| s.to_str()).unwrap_or("image").to_string();
    let stems: Vec<String> = images.iter().map(|p| part(p.file_stem())).collect();
    let unique = stems.iter().collect::<std::collections::BTreeSet<_>>().len() == stems.len();
    if unique {
        return stems;
    }
    images
        .iter()
        .zip(stems)
        .map(|(p, stem)| format!("{}_{stem}", part(p.parent().and_then(Path::file_name))))
        .collect()
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("ADKD_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("ADKD_THREADS must be a thread count, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n.max(1))
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> Result<bool> {
    configure_threads()?;
    match cli.command {
        Command::Gen { config, out, seed } => {
            let mut spec = match &config {
                Some(p) => CorpusSpec::load(p)?,
                None => CorpusSpec::default(),
            };
            if let Some(s) = seed {
                spec.seed = s;
            }
            generate_corpus(&spec, &out)?;
            let data = scan_layout(&out)?;
            println!(
                "wrote {} classes, {} train and {} test images to {}",
                data.classes.len(),
                data.train_count(),
                data.test_count(),
                out.display()
            );
        }
        Command::Train {
            run,
            checkpoint,
            teacher,
            resume: cont,
        } => {
            let cfg = run.config(checkpoint.as_deref())?;
            let data = dataset(cfg.data_root.as_deref())?;
            let result = if cont {
                let path = cfg
                    .checkpoint_path
                    .as_deref()
                    .ok_or_else(|| Error::Config("--resume needs --checkpoint".into()))?;
                resume(Checkpoint::load(path)?, &cfg, &data)?
            } else {
                let teacher = teacher.map(|p| weights::load::<f32>(&p).map(|(s, _)| s)).transpose()?;
                train(&cfg, &data, teacher)?
            };
            for e in &result.history {
                println!(
                    "epoch {:>4}  train {:.6}  val {:.6}{}",
                    e.epoch,
                    e.train_loss,
                    e.val_loss,
                    if e.improved { "  *" } else { "" }
                );
            }
            println!(
                "best epoch {} val {:.6}",
                result.best.epoch, result.best.best_val_loss
            );
            if cfg.checkpoint_path.is_none() {
                eprintln!("note: no checkpoint path given, weights were not saved");
            }
        }
        Command::Infer {
            checkpoint,
            out,
            images,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let det = ckpt.detector()?;
            let cfg = &ckpt.config;
            let names = output_names(&images);
            for (path, name) in images.iter().zip(&names) {
                let x = preprocess(&load_image(path)?, cfg.input_size(), cfg.norm_mean, cfg.norm_std)?;
                let r = det.infer(&x)?;
                println!("{}\t{:.6}\t{:.6}", path.display(), r.score, r.elapsed.as_secs_f64());
                if let Some(dir) = &out {
                    write(&dir.join(format!("{name}.adam")), weights::encode_map(&r.map.scores)?)?;
                    save_pgm(
                        &dir.join(format!("{name}_map.pgm")),
                        r.map.width(),
                        r.map.height(),
                        &weights::map_preview(&r.map.scores),
                    )?;
                }
            }
        }
        Command::Eval { checkpoint, data, out } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let root = data.or_else(|| ckpt.config.data_root.clone());
            let report = evaluate(&ckpt.detector()?, &dataset(root.as_deref())?, &eval_options(&ckpt.config))?;
            print!("{}", report.table());
            if let Some(dir) = &out {
                write(&dir.join("report.txt"), report.table())?;
                write(&dir.join("report.tsv"), report.lines())?;
            }
        }
        Command::Gradcheck { seed, instances } => {
            let reports = run_suite(instances, seed)?;
            let mut ok = true;
            for r in &reports {
                ok &= r.passed();
                println!(
                    "{:<20} {:>4} instances  max rel err {:.3e}  {}",
                    r.name,
                    r.instances,
                    r.max_rel_error,
                    if r.passed() { "ok" } else { "FAIL" }
                );
            }
            println!("tolerance {TOLERANCE:e}: {}", if ok { "all passed" } else { "failures" });
            return Ok(ok);
        }
        Command::Bench {
            checkpoint,
            data,
            repeat,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let root = data.or_else(|| ckpt.config.data_root.clone());
            let data = dataset(root.as_deref())?;
            let det = ckpt.detector()?;
            let cfg = &ckpt.config;
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(1)
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
            let mut per_class = Vec::new();
            for class in data.classes.iter().filter(|c| !c.test.is_empty()) {
                let inputs = class
                    .test
                    .iter()
                    .map(|s| preprocess(&s.load_image()?, cfg.input_size(), cfg.norm_mean, cfg.norm_std))
                    .collect::<Result<Vec<_>>>()?;
                let mut times = Vec::new();
                for _ in 0..repeat.max(1) {
                    for x in &inputs {
                        times.push(pool.install(|| det.infer(x))?.elapsed.as_secs_f64());
                    }
                }
                per_class.push((class.name.clone(), times));
            }
            let report = latency_report(&per_class)?;
            let width = report.classes.iter().map(|c| c.class.len()).max().unwrap_or(8).max(8);
            println!("{:<width$}  {:>7}  {:>11}", "CATEGORY", "IMAGES", "Latency (s)");
            for c in &report.classes {
                println!("{:<width$}  {:>7}  {:>11.6}", c.class, c.count, c.mean);
            }
            println!("{:<width$}  {:>7}  {:>11.6}", "MEAN", "", report.weighted_mean);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("adkd: {e}");
            ExitCode::from(1)
        }
    }
}
