use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use skel_tta::corruptions::{corrupt_dataset, CorruptionKind, CorruptionSpec};
use skel_tta::datasets::{
    gen_dataset, load_dataset, read_xyz, save_dataset, write_metrics, write_xyz, AdaptMode, Augmentation,
    DatasetFormat, LabeledDataset, MetricsRow, RunConfig,
};
use skel_tta::diagnostics::gradient_suite;
use skel_tta::network::{load_checkpoint, save_checkpoint, Model};
use skel_tta::pipeline::{
    adapt_dataset, bench_throughput, evaluate, export_bn_snapshot, pretrain, tokenize_for, write_history,
    AdaptSession,
};
use skel_tta::skeleton::{export_skeleton, reconstruct};
use skel_tta::{Error, Result};

const FORMATS_HELP: &str = "\
File formats:
  dataset directory  manifest.json {class_names, entries:[{file, label}]} plus one .xyz per sample
  dataset file       SPCD packed binary (any path that is not a directory)
  .xyz               one 'x y z' line per point; blank lines and '#' comments ignored
  .spck              model checkpoint: magic, version, JSON header, little-endian f32 tensors
  config JSON        run configuration; unknown keys are rejected, missing keys take defaults
  metrics CSV        config,corruption,severity,mode,views,samples,skipped,accuracy,
                     samples_per_second,samples_per_second_std

Exit codes: 0 success, 1 user error, 2 internal error.";

#[derive(Debug, Parser)]
#[command(name = "skel-tta", version, about = "Skeleton-supervised test-time training for point-cloud classifiers", after_help = FORMATS_HELP)]
struct Cli {
    /// Seed for every random choice; overrides the config file's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FormatArg {
    /// Directory with manifest.json and .xyz files.
    Manifest,
    /// Single packed binary file.
    Spcd,
}

impl From<FormatArg> for DatasetFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Manifest => DatasetFormat::Manifest,
            FormatArg::Spcd => DatasetFormat::Spcd,
        }
    }
}

/// Labels written into the metrics CSV.
#[derive(Debug, Args)]
struct RowLabels {
    /// Value of the `config` column.
    #[arg(long, default_value = "default")]
    label: String,
    /// Value of the `corruption` column.
    #[arg(long, default_value = "clean")]
    corruption: String,
    /// Value of the `severity` column.
    #[arg(long, default_value_t = 0)]
    severity: u32,
}

/// Adaptation settings; flags override the config file.
#[derive(Debug, Args)]
struct AdaptArgs {
    /// Run configuration JSON supplying loss weights and adaptation defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Inner iterations per sample [default: 1 online, 20 standard].
    #[arg(long)]
    iterations: Option<usize>,
    /// BatchNorm momentum for folding statistics [default: 0.1].
    #[arg(long)]
    momentum: Option<f64>,
    /// Adaptation learning rate [default: 1e-4].
    #[arg(long)]
    lr: Option<f64>,
    /// View augmentation: rotation, hflip, translation or none [default: rotation].
    #[arg(long)]
    augmentation: Option<Augmentation>,
    /// Samples adapted together in standard mode [default: 1].
    #[arg(long)]
    adapt_batch: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic 8-class shape dataset.
    GenData {
        #[arg(long, default_value_t = 100)]
        per_class: usize,
        /// Points per cloud.
        #[arg(long, default_value_t = 256)]
        points: usize,
        /// Fraction of each class assigned to the training split.
        #[arg(long, default_value_t = 0.8)]
        split: f64,
        /// Destination; receives every sample unless --test-out is given.
        #[arg(long)]
        out: PathBuf,
        /// Write the training split to --out and the test split here.
        #[arg(long)]
        test_out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "manifest")]
        format: FormatArg,
    },
    /// Apply one corruption at one severity to every sample of a dataset.
    Corrupt {
        #[arg(long = "in")]
        input: PathBuf,
        /// One of uniform-noise, gaussian-noise, impulse-noise, background-noise,
        /// upsampling, density-decrease, shear, rotation, occlusion, scale.
        #[arg(long)]
        kind: CorruptionKind,
        /// Integer severity 1..=5.
        #[arg(long)]
        severity: u32,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "manifest")]
        format: FormatArg,
    },
    /// Pretrain on the skeletal plus classification objective.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        /// Run configuration JSON [default: built-in defaults].
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint destination.
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch loss history CSV.
        #[arg(long)]
        history: Option<PathBuf>,
        /// Clean test set evaluated after every epoch.
        #[arg(long)]
        test: Option<PathBuf>,
        /// Overrides the configured epoch count.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Source-only accuracy of a checkpoint.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Metrics CSV destination.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        labels: RowLabels,
    },
    /// Adapt a checkpoint over a test stream and report accuracy.
    Adapt {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// online-bn, online-bp or standard.
        #[arg(long)]
        mode: AdaptMode,
        /// Augmented views per sample [default: 48].
        #[arg(long)]
        views: Option<usize>,
        /// Metrics CSV destination.
        #[arg(long)]
        out: PathBuf,
        /// BatchNorm snapshots before and after the stream, as PRE.csv,POST.csv.
        #[arg(long, value_delimiter = ',')]
        bn_snapshot: Option<Vec<PathBuf>>,
        /// Per-sample CSV with columns sample_id,label,prediction.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[command(flatten)]
        adapt: AdaptArgs,
        #[command(flatten)]
        labels: RowLabels,
    },
    /// Measure samples per second for combinations of modes and view counts.
    Bench {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated modes.
        #[arg(long, value_delimiter = ',', default_value = "online-bn,online-bp,standard")]
        modes: Vec<AdaptMode>,
        /// Comma-separated view counts.
        #[arg(long, value_delimiter = ',', default_value = "48")]
        views: Vec<usize>,
        /// Metrics CSV destination, one row per mode and view count.
        #[arg(long)]
        out: PathBuf,
        /// Untimed samples at the start of each repetition.
        #[arg(long, default_value_t = 2)]
        warmup: usize,
        /// Timed repetitions.
        #[arg(long, default_value_t = 3)]
        reps: usize,
        /// Use only the first N samples of the stream.
        #[arg(long)]
        limit: Option<usize>,
        #[command(flatten)]
        adapt: AdaptArgs,
        #[command(flatten)]
        labels: RowLabels,
    },
    /// Predict the skeleton of one cloud.
    Skeleton {
        #[arg(long)]
        model: PathBuf,
        /// Input .xyz cloud.
        #[arg(long)]
        cloud: PathBuf,
        /// Skeleton CSV (cx,cy,cz,r).
        #[arg(long)]
        out: PathBuf,
        /// Reconstructed surface .xyz.
        #[arg(long)]
        surface: Option<PathBuf>,
        /// Surface samples per sphere.
        #[arg(long, default_value_t = 8)]
        n_per_sphere: usize,
    },
    /// Finite-difference check of every differentiable component.
    Gradcheck {
        /// Check the small model exhaustively instead of sampling the default one.
        #[arg(long)]
        tiny: bool,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_user_error() { 1 } else { 2 })
        }
    }
}

fn banner(command: &str, seed: u64, config: Option<&RunConfig>) {
    eprintln!("skel-tta {} | {command} | seed {seed}", env!("CARGO_PKG_VERSION"));
    if let Some(c) = config {
        eprintln!("config: {}", serde_json::to_string(c).expect("config serializes"));
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn adapt_config(args: &AdaptArgs, mode: AdaptMode, views: Option<usize>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = load_config(args.config.as_deref(), seed)?;
    let a = &mut cfg.adapt;
    a.mode = mode;
    if let Some(v) = views {
        a.views = v;
    }
    if args.iterations.is_some() {
        a.iterations = args.iterations;
    }
    if let Some(m) = args.momentum {
        a.momentum = m;
    }
    if let Some(lr) = args.lr {
        a.optimizer.learning_rate = lr;
    }
    if let Some(aug) = args.augmentation {
        a.augmentation = aug;
    }
    if let Some(b) = args.adapt_batch {
        a.batch_size = b;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn row(labels: &RowLabels, mode: &str, views: usize, samples: usize) -> MetricsRow {
    MetricsRow {
        config: labels.label.clone(),
        corruption: labels.corruption.clone(),
        severity: labels.severity,
        mode: mode.to_string(),
        views,
        samples,
        skipped: 0,
        accuracy: 0.0,
        samples_per_second: 0.0,
        samples_per_second_std: 0.0,
    }
}

fn csv_error(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::Io {
            path: path.to_path_buf(),
            source,
        },
        other => Error::Format(format!("{}: {other:?}", path.display())),
    }
}

fn write_predictions(ds: &LabeledDataset, predictions: &[usize], path: &Path) -> Result<()> {
    let err = csv_error(path);
    let mut w = csv::Writer::from_path(path).map_err(&err)?;
    w.write_record(["sample_id", "label", "prediction"]).map_err(&err)?;
    for ((id, label), p) in ds.ids.iter().zip(&ds.labels).zip(predictions) {
        w.write_record([id.as_str(), &label.to_string(), &p.to_string()]).map_err(&err)?;
    }
    w.flush().map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn run(cli: Cli) -> Result<ExitCode> {
    let seed = cli.seed;
    match cli.command {
        Command::GenData {
            per_class,
            points,
            split,
            out,
            test_out,
            format,
        } => {
            let seed = seed.unwrap_or(0);
            banner("gen-data", seed, None);
            let (train, test) = gen_dataset(per_class, points, seed, split)?;
            match test_out {
                Some(t) => {
                    save_dataset(&train, &out, format.into())?;
                    save_dataset(&test, &t, format.into())?;
                    eprintln!("wrote {} training samples to {} and {} test samples to {}", train.len(), out.display(), test.len(), t.display());
                }
                None => {
                    let all = train.concat(&test)?;
                    save_dataset(&all, &out, format.into())?;
                    eprintln!("wrote {} samples to {}", all.len(), out.display());
                }
            }
        }
        Command::Corrupt {
            input,
            kind,
            severity,
            out,
            format,
        } => {
            let seed = seed.unwrap_or(0);
            banner("corrupt", seed, None);
            let ds = load_dataset(&input)?;
            let spec = CorruptionSpec::new(kind, severity, seed)?;
            save_dataset(&corrupt_dataset(&ds, &spec)?, &out, format.into())?;
            eprintln!("wrote {} {kind} severity {severity} samples to {}", ds.len(), out.display());
        }
        Command::Pretrain {
            data,
            config,
            out,
            history,
            test,
            epochs,
        } => {
            let mut cfg = load_config(config.as_deref(), seed)?;
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            cfg.model.seed = cfg.seed;
            cfg.validate()?;
            banner("pretrain", cfg.seed, Some(&cfg));
            let train = load_dataset(&data)?;
            let test = test.as_deref().map(load_dataset).transpose()?;
            let model = Model::new(cfg.model.clone())?;
            let start = Instant::now();
            let (model, hist) = pretrain(model, &train, test.as_ref(), &cfg)?;
            for h in &hist {
                match h.test_accuracy {
                    Some(a) => eprintln!("epoch {:>3} loss {:.4} (skeletal {:.4}, ce {:.4}) test {:.4}", h.epoch, h.total, h.skeletal, h.classification, a),
                    None => eprintln!("epoch {:>3} loss {:.4} (skeletal {:.4}, ce {:.4})", h.epoch, h.total, h.skeletal, h.classification),
                }
            }
            eprintln!("trained {} epochs in {:.1}s", hist.len(), start.elapsed().as_secs_f64());
            save_checkpoint(&model, &out)?;
            if let Some(h) = history {
                write_history(&hist, &h)?;
            }
        }
        Command::Eval { model, data, out, labels } => {
            banner("eval", seed.unwrap_or(0), None);
            let model = load_checkpoint(&model)?;
            let ds = load_dataset(&data)?;
            let start = Instant::now();
            let e = evaluate(&model, &ds)?;
            let secs = start.elapsed().as_secs_f64();
            let mut r = row(&labels, "source-only", 1, ds.len());
            r.accuracy = e.accuracy;
            r.samples_per_second = ds.len() as f64 / secs.max(f64::MIN_POSITIVE);
            write_metrics(&[r], &out)?;
            eprintln!("accuracy {:.4} ({}/{})", e.accuracy, e.correct, e.total);
        }
        Command::Adapt {
            model,
            data,
            mode,
            views,
            out,
            bn_snapshot,
            predictions,
            adapt,
            labels,
        } => {
            let cfg = adapt_config(&adapt, mode, views, seed)?;
            if let Some(paths) = &bn_snapshot {
                if paths.len() != 2 {
                    return Err(Error::InvalidArgument(format!(
                        "--bn-snapshot takes PRE.csv,POST.csv, got {} paths",
                        paths.len()
                    )));
                }
            }
            banner("adapt", cfg.seed, Some(&cfg));
            let model = load_checkpoint(&model)?;
            let ds = load_dataset(&data)?;
            if let Some(paths) = &bn_snapshot {
                export_bn_snapshot(&model, &paths[0])?;
            }
            let mut session = AdaptSession::from_run_config(model, &cfg)?;
            let (outcome, e) = adapt_dataset(&mut session, &ds)?;
            if let Some(paths) = &bn_snapshot {
                export_bn_snapshot(session.live(), &paths[1])?;
            }
            if let Some(p) = &predictions {
                write_predictions(&ds, &outcome.predictions, p)?;
            }
            let mut r = row(&labels, mode.name(), cfg.adapt.views, ds.len());
            r.skipped = outcome.skipped_count();
            r.accuracy = e.accuracy;
            r.samples_per_second = outcome.samples_per_second();
            write_metrics(&[r], &out)?;
            eprintln!(
                "{mode}: accuracy {:.4} ({}/{}), {} skipped, {:.2} samples/s",
                e.accuracy,
                e.correct,
                e.total,
                outcome.skipped_count(),
                outcome.samples_per_second()
            );
        }
        Command::Bench {
            model,
            data,
            modes,
            views,
            out,
            warmup,
            reps,
            limit,
            adapt,
            labels,
        } => {
            let base = load_config(adapt.config.as_deref(), seed)?;
            banner("bench", base.seed, Some(&base));
            let model = load_checkpoint(&model)?;
            let mut ds = load_dataset(&data)?;
            if let Some(n) = limit {
                let n = n.min(ds.len());
                ds = ds.subset(&(0..n).collect::<Vec<_>>());
            }
            let mut rows = Vec::new();
            for &mode in &modes {
                for &v in &views {
                    let cfg = adapt_config(&adapt, mode, Some(v), seed)?;
                    let mut session = AdaptSession::from_run_config(model.clone(), &cfg)?;
                    let (outcome, e) = adapt_dataset(&mut session, &ds)?;
                    let t = bench_throughput(&mut session, &ds.clouds, &ds.ids, warmup, reps)?;
                    let mut r = row(&labels, mode.name(), v, ds.len());
                    r.skipped = outcome.skipped_count();
                    r.accuracy = e.accuracy;
                    r.samples_per_second = t.mean;
                    r.samples_per_second_std = t.std;
                    eprintln!("{mode} views {v}: accuracy {:.4}, {:.2} ± {:.2} samples/s", e.accuracy, t.mean, t.std);
                    rows.push(r);
                }
            }
            write_metrics(&rows, &out)?;
        }
        Command::Skeleton {
            model,
            cloud,
            out,
            surface,
            n_per_sphere,
        } => {
            banner("skeleton", seed.unwrap_or(0), None);
            let model = load_checkpoint(&model)?;
            let cloud = read_xyz(&cloud)?;
            let patches = tokenize_for(&model, &cloud)?;
            let skel = model.forward_eval(&[patches])?.skeletons.remove(0);
            export_skeleton(&skel, &out)?;
            if let Some(s) = surface {
                write_xyz(&reconstruct(&skel, n_per_sphere)?, &s)?;
            }
            eprintln!("wrote {} spheres to {}", skel.len(), out.display());
        }
        Command::Gradcheck { tiny } => {
            let seed = seed.unwrap_or(0);
            banner("gradcheck", seed, None);
            let checks = gradient_suite(tiny, seed)?;
            for c in &checks {
                println!("{c}");
            }
            if checks.iter().any(|c| !c.passed()) {
                eprintln!("gradient check failed");
                return Ok(ExitCode::from(2));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
