mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rangeseg::model::Preset;

use config::RunConfig;

/// LIDAR range-image semantic segmentation.
#[derive(Parser, Debug)]
#[command(name = "rangeseg", version, arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic labeled dataset.
    Synth {
        /// Number of scans.
        #[arg(long)]
        scans: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Dump the range image of one scan.
    Project {
        /// Scan file (.bin).
        #[arg(long)]
        scan: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train a model on a dataset directory.
    Train {
        /// Training dataset (velodyne/ and labels/).
        #[arg(long)]
        data: PathBuf,
        /// Validation dataset.
        #[arg(long)]
        val: Option<PathBuf>,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Predict per-point labels with a trained checkpoint.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory with velodyne/.
        #[arg(long)]
        data: PathBuf,
        /// Refine labels with the depth KNN vote.
        #[arg(long)]
        knn: bool,
        #[command(flatten)]
        knn_args: KnnArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Score predictions against ground truth.
    Eval {
        /// Directory of <id>.label predictions.
        #[arg(long)]
        pred: PathBuf,
        /// Dataset directory with velodyne/ and labels/.
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        num_classes: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Time every pipeline stage.
    Bench {
        #[arg(long)]
        data: PathBuf,
        /// Include the network forward pass.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Use at most this many scans.
        #[arg(long)]
        scans: Option<usize>,
        #[arg(long, default_value_t = 1)]
        warmup: usize,
        #[command(flatten)]
        knn_args: KnnArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Print parameter counts.
    Params {
        /// One preset; all of them when omitted.
        #[arg(long)]
        preset: Option<Preset>,
        #[arg(long, default_value_t = 19)]
        num_classes: usize,
    },
}

#[derive(Args, Debug, Default)]
struct Common {
    /// TOML config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    fov_up_deg: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    fov_down_deg: Option<f64>,
    /// Group side in pixels.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
}

#[derive(Args, Debug, Default)]
struct ModelArgs {
    #[arg(long)]
    preset: Option<Preset>,
    #[arg(long)]
    num_classes: Option<usize>,
    /// Wrap the azimuth axis.
    #[arg(long)]
    circular: bool,
}

#[derive(Args, Debug, Default)]
struct TrainArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lr_decay: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    /// Exponent of the class-balancing weights.
    #[arg(long)]
    power_i: Option<f64>,
    #[arg(long)]
    no_augment: bool,
    /// Save a checkpoint every this many epochs (the final one is always saved).
    #[arg(long, default_value_t = 10)]
    save_every: usize,
}

#[derive(Args, Debug, Default)]
struct KnnArgs {
    #[arg(long)]
    knn_window: Option<usize>,
    #[arg(long)]
    knn_k: Option<usize>,
}

fn set<T>(dst: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *dst = v;
    }
}

impl Common {
    fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        set(&mut c.seed, self.seed);
        set(&mut c.threads, self.threads);
        set(&mut c.projection.width, self.width);
        set(&mut c.projection.height, self.height);
        set(&mut c.projection.fov_up_deg, self.fov_up_deg);
        set(&mut c.projection.fov_down_deg, self.fov_down_deg);
        set(&mut c.grouping.k, self.k);
        set(&mut c.grouping.stride, self.stride);
        Ok(c)
    }
}

impl ModelArgs {
    fn apply(&self, c: &mut RunConfig) {
        set(&mut c.model.preset, self.preset);
        set(&mut c.model.num_classes, self.num_classes);
        c.model.circular |= self.circular;
    }
}

impl TrainArgs {
    fn apply(&self, c: &mut RunConfig) {
        set(&mut c.train.epochs, self.epochs);
        set(&mut c.train.batch_size, self.batch);
        set(&mut c.train.lr0, self.lr);
        set(&mut c.train.lr_decay, self.lr_decay);
        set(&mut c.train.momentum, self.momentum);
        set(&mut c.loss.power, self.power_i);
        if self.no_augment {
            config::no_augmentation(&mut c.train);
        }
    }
}

impl KnnArgs {
    fn apply(&self, c: &mut RunConfig) {
        set(&mut c.knn.window, self.knn_window);
        set(&mut c.knn.k, self.knn_k);
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth { scans, common } => {
            let mut c = common.resolve()?;
            set(&mut c.synth.scans, scans);
            commands::synth(&c, commands::out_dir(&common.out)?)
        }
        Command::Project { scan, common } => {
            let c = common.resolve()?;
            commands::project(&c, &scan, commands::out_dir(&common.out)?)
        }
        Command::Train {
            data,
            val,
            model,
            train,
            common,
        } => {
            let mut c = common.resolve()?;
            model.apply(&mut c);
            train.apply(&mut c);
            commands::train(&c, &data, val.as_deref(), train.save_every, commands::out_dir(&common.out)?)
        }
        Command::Infer {
            checkpoint,
            data,
            knn,
            knn_args,
            common,
        } => {
            let mut c = common.resolve()?;
            knn_args.apply(&mut c);
            commands::infer(&c, &checkpoint, &data, knn, commands::out_dir(&common.out)?)
        }
        Command::Eval {
            pred,
            truth,
            num_classes,
            common,
        } => {
            let mut c = common.resolve()?;
            set(&mut c.model.num_classes, num_classes);
            commands::eval(&c, &pred, &truth, commands::out_dir(&common.out)?)
        }
        Command::Bench {
            data,
            checkpoint,
            scans,
            warmup,
            knn_args,
            common,
        } => {
            let mut c = common.resolve()?;
            knn_args.apply(&mut c);
            commands::bench(&c, &data, checkpoint.as_deref(), scans, warmup, commands::out_dir(&common.out)?)
        }
        Command::Params { preset, num_classes } => commands::params(preset, num_classes),
    }
}

/// Exit codes: 2 usage, 3 configuration, 4 I/O, 5 file format, 1 anything else.
fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<rangeseg::Error>() {
        Some(rangeseg::Error::Config(_)) => 3,
        Some(rangeseg::Error::Io { .. }) => 4,
        Some(rangeseg::Error::Format(_)) => 5,
        Some(rangeseg::Error::Tensor(rangeseg::tensor::TensorError::Io(_))) => 4,
        Some(rangeseg::Error::Tensor(rangeseg::tensor::TensorError::Format(_))) => 5,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Drop causes already spelled out by the message above them.
            let mut msg = String::new();
            for cause in e.chain().map(|c| c.to_string()) {
                if !msg.contains(&cause) {
                    if !msg.is_empty() {
                        msg.push_str(": ");
                    }
                    msg.push_str(&cause);
                }
            }
            eprintln!("error: {msg}");
            ExitCode::from(exit_code(&e))
        }
    }
}
