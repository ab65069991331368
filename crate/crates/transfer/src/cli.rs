//! Command-line front end: `gen-data`, `train`, `eval`, `sweep`, `visualize`.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand};
use rayon::prelude::*;
use transfer_core::data::{synthetic_splits, Dataset, Split};
use transfer_core::train::train_with;
use transfer_core::visualize::HeadFusion;
use transfer_core::TrainConfig;

use crate::error::{CliError, Result};
use crate::reports::{self, SweepRow};
use crate::{checkpoint, dataset_io, heatmaps, parallel, pnm, sweep};

pub const CHECKPOINT_FILE: &str = "checkpoint.tfc";
pub const METRICS_FILE: &str = "metrics.csv";
pub const DROPS_FILE: &str = "drops.csv";
pub const CONFIG_FILE: &str = "config.txt";
pub const SWEEP_FILE: &str = "sweep.csv";

#[derive(Debug, Parser)]
#[command(name = "transfer", version, about = "Train and inspect TransFER models on synthetic expression-like data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Config sources shared by every subcommand, applied in order:
/// defaults, `--config` file, `--set` overrides, `--seed`.
#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// File of key=value lines.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Shorthand for --set seed=N.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic train and test splits as PPM images plus a manifest.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Train a model and write its checkpoint and per-epoch metrics.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Dataset written by gen-data; synthetic data is generated when absent.
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
    },
    /// Print test metrics of a checkpoint. The config options only select the evaluation data.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
    },
    /// Train one model per grid point and tabulate the test metrics.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Axes such as p1=0.4:0.8:0.1, B=1,2,4 or p2=0.3.
        #[arg(long, value_name = "KEY=VALUES", num_args = 1.., required = true)]
        grid: Vec<String>,
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
    },
    /// Write attention-rollout heatmaps for test images or a single PPM file.
    Visualize {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Render only this P6 image instead of a batch of test images.
        #[arg(long, value_name = "PATH")]
        image: Option<PathBuf>,
        /// Number of test images rendered in batch mode.
        #[arg(long, default_value_t = 8)]
        count: usize,
        /// How attention heads are combined before rollout: mean, max or min.
        #[arg(long, default_value = "mean")]
        fusion: String,
        /// Also write the raw patch scores as TFT1 tensors.
        #[arg(long)]
        dump: bool,
    },
}

impl ConfigArgs {
    pub fn apply(&self, cfg: &mut TrainConfig) -> Result<()> {
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            cfg.apply_text(&text)?;
        }
        for pair in &self.overrides {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {pair:?}")))?;
            cfg.set(k.trim(), v)?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(())
    }

    pub fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        self.apply(&mut cfg)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Train and test splits from `data`, or freshly generated from the config.
fn load_splits(cfg: &TrainConfig, data: Option<&Path>) -> Result<(Dataset, Dataset)> {
    let (train, test) = match data {
        Some(dir) => (
            dataset_io::read_split(dir, Split::Train)?,
            dataset_io::read_split(dir, Split::Test)?,
        ),
        None => synthetic_splits(
            cfg.num_classes,
            cfg.train_per_class,
            cfg.test_per_class,
            cfg.input_size,
            cfg.seed,
        )?,
    };
    for d in [&train, &test] {
        if d.image_size() != Some(cfg.input_size) {
            return Err(CliError::Usage(format!(
                "dataset images are {:?} pixels wide, config input_size is {}",
                d.image_size(),
                cfg.input_size
            )));
        }
    }
    Ok((train, test))
}

fn gen_data(cfg: &TrainConfig, out: &Path) -> Result<()> {
    let (train, test) = load_splits(cfg, None)?;
    create_dir(out)?;
    dataset_io::write_dataset(out, &[&train, &test])?;
    println!("wrote {} train and {} test images to {}", train.len(), test.len(), out.display());
    Ok(())
}

fn train_cmd(cfg: TrainConfig, out: &Path, data: Option<&Path>) -> Result<()> {
    let (train, test) = load_splits(&cfg, data)?;
    create_dir(out)?;
    write_text(&out.join(CONFIG_FILE), &cfg.to_text())?;
    let log_drops = cfg.log_drops;
    let outcome = train_with(cfg, &train, Some(&test), |m, d| parallel::evaluate(m, d), |_| true)?;
    checkpoint::save(&out.join(CHECKPOINT_FILE), &outcome.model)?;
    write_text(&out.join(METRICS_FILE), &reports::metrics_csv(&outcome.history))?;
    if log_drops {
        write_text(&out.join(DROPS_FILE), &reports::drops_csv(&outcome.drops))?;
    }
    if let Some(m) = &outcome.metrics {
        println!("test accuracy {:.4} (mean class {:.4})", m.overall_accuracy, m.mean_class_accuracy);
    }
    Ok(())
}

fn eval_cmd(args: &ConfigArgs, path: &Path, data: Option<&Path>) -> Result<()> {
    let model = checkpoint::load(path)?;
    let mut cfg = model.config.clone();
    args.apply(&mut cfg)?;
    cfg.validate()?;
    let (_, test) = load_splits(&cfg, data)?;
    let metrics = parallel::evaluate(&model, &test)?;
    print!("{}", reports::metrics_text(&metrics, &test.class_names));
    Ok(())
}

fn sweep_cmd(base: TrainConfig, out: &Path, grid: &[String], data: Option<&Path>) -> Result<()> {
    let axes = grid.iter().map(|g| sweep::parse_axis(g)).collect::<Result<Vec<_>>>()?;
    let keys: Vec<String> = axes.iter().map(|a| a.key.clone()).collect();
    let configs = sweep::points(&axes)
        .into_iter()
        .map(|point| {
            let mut cfg = base.clone();
            for (k, v) in &point {
                cfg.set(k, v)?;
            }
            cfg.validate()?;
            Ok((point, cfg))
        })
        .collect::<Result<Vec<_>>>()?;
    let (train, test) = load_splits(&base, data)?;
    let rows = configs
        .into_par_iter()
        .map(|(point, cfg)| {
            log::info!("sweep point {point:?}");
            let outcome = train_with(cfg, &train, Some(&test), |m, d| parallel::evaluate(m, d), |_| true)?;
            let metrics = outcome.metrics.expect("a test set was supplied");
            let final_train_loss = outcome.history.last().map_or(f64::NAN, |r| r.train_loss);
            Ok(SweepRow {
                point,
                metrics,
                final_train_loss,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    create_dir(out)?;
    write_text(&out.join(SWEEP_FILE), &reports::sweep_csv(&keys, &rows))?;
    println!("wrote {} sweep rows to {}", rows.len(), out.join(SWEEP_FILE).display());
    Ok(())
}

struct VisualizeArgs<'a> {
    checkpoint: &'a Path,
    out: &'a Path,
    data: Option<&'a Path>,
    image: Option<&'a Path>,
    count: usize,
    fusion: &'a str,
    dump: bool,
}

fn visualize_cmd(args: &ConfigArgs, v: VisualizeArgs) -> Result<()> {
    let fusion: HeadFusion = v.fusion.parse()?;
    let model = checkpoint::load(v.checkpoint)?;
    let images = match v.image {
        Some(path) => {
            let img = pnm::rgb_to_tensor(&pnm::read_ppm(path)?);
            if img.shape() != [model.config.input_size, model.config.input_size, 3] {
                return Err(CliError::Usage(format!(
                    "{} is {:?}, the model expects {}x{} RGB images",
                    path.display(),
                    img.shape(),
                    model.config.input_size,
                    model.config.input_size
                )));
            }
            let stem = path.file_stem().map_or("image".into(), |s| s.to_string_lossy().into_owned());
            vec![(stem, img)]
        }
        None => {
            let mut cfg = model.config.clone();
            args.apply(&mut cfg)?;
            cfg.validate()?;
            let (_, test) = load_splits(&cfg, v.data)?;
            test.samples
                .iter()
                .take(v.count)
                .enumerate()
                .map(|(i, s)| (format!("{i:03}"), s.image.clone()))
                .collect()
        }
    };
    let predictions = heatmaps::write_all(&model, &images, fusion, v.dump, v.out)?;
    for (name, class) in predictions {
        println!("{name} predicted {class}");
    }
    Ok(())
}

pub fn execute(cli: Cli) -> Result<()> {
    parallel::init_pool()?;
    match cli.command {
        Command::GenData { config, out } => gen_data(&config.resolve()?, &out),
        Command::Train { config, out, data } => train_cmd(config.resolve()?, &out, data.as_deref()),
        Command::Eval {
            config,
            checkpoint,
            data,
        } => eval_cmd(&config, &checkpoint, data.as_deref()),
        Command::Sweep {
            config,
            out,
            grid,
            data,
        } => sweep_cmd(config.resolve()?, &out, &grid, data.as_deref()),
        Command::Visualize {
            config,
            checkpoint,
            out,
            data,
            image,
            count,
            fusion,
            dump,
        } => visualize_cmd(
            &config,
            VisualizeArgs {
                checkpoint: &checkpoint,
                out: &out,
                data: data.as_deref(),
                image: image.as_deref(),
                count,
                fusion: &fusion,
                dump,
            },
        ),
    }
}

/// Parses `argv`, runs the command and returns the process exit status.
/// Diagnostics go to stderr as a single line, followed by usage text for
/// usage errors.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            let code = e.exit_code();
            if code == 2 {
                eprintln!("{}", Cli::command().render_usage());
            }
            code
        }
    }
}
