use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use scalpnet_core::data::{scan_dataset_dir, split_dataset, BatchLoader, Order, SplitSpec};
use scalpnet_core::imageproc::{encode_png, tensor_to_image, Preprocess};
use scalpnet_core::model_io::{load_model, save_model};
use scalpnet_core::nn::ModelSpec;
use scalpnet_core::train::{
    evaluate, predict, train_with_progress, TrainConfig, DEFAULT_BATCH_SIZE, DEFAULT_EPOCHS,
    DEFAULT_IMAGE_SIZE, DEFAULT_SEED,
};
use scalpnet_serve::{ServeConfig, DEFAULT_PORT, PORT_ENV};

const SEED_ENV: &str = "SCALPNET_SEED";

#[derive(Parser)]
#[command(name = "scalpnet", version, about = "Train, evaluate and serve hair and scalp image classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on DIR/<class>/<image> and write it to MODEL.
    Train(TrainArgs),
    /// Evaluate a model on a dataset directory.
    Eval(EvalArgs),
    /// Classify a single image.
    Predict(PredictArgs),
    /// Run the HTTP prediction service.
    Serve(ServeArgs),
    /// Export a few preprocessed samples from the first shuffled batch.
    Inspect(InspectArgs),
}

#[derive(Args, Clone, Copy)]
struct PreprocessArgs {
    /// Gaussian low-pass sigma applied after rescaling.
    #[arg(long, value_name = "SIGMA")]
    lowpass: Option<f32>,
    /// Histogram-equalize images before resizing.
    #[arg(long)]
    equalize: bool,
}

impl PreprocessArgs {
    fn get(self) -> Result<Preprocess> {
        if let Some(s) = self.lowpass {
            if !(s.is_finite() && s > 0.0) {
                bail!("--lowpass must be a positive number, got {s}");
            }
        }
        Ok(Preprocess {
            lowpass_sigma: self.lowpass,
            equalize: self.equalize,
        })
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    #[arg(long, value_name = "MODEL")]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_EPOCHS)]
    epochs: usize,
    #[arg(long, default_value_t = DEFAULT_BATCH_SIZE)]
    batch_size: usize,
    #[arg(long, default_value_t = DEFAULT_IMAGE_SIZE)]
    image_size: usize,
    #[arg(long, env = SEED_ENV, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Disable random flips and quarter turns.
    #[arg(long)]
    no_augment: bool,
    #[command(flatten)]
    preprocess: PreprocessArgs,
    /// Write per-epoch metrics as CSV.
    #[arg(long, value_name = "CSV")]
    history: Option<PathBuf>,
    /// JSON model spec to use instead of the default architecture.
    #[arg(long, value_name = "FILE")]
    model_spec: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalSplit {
    Test,
    All,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    #[arg(long, value_name = "MODEL")]
    model: PathBuf,
    /// `test` rebuilds the training run's held-out split from the model's seed.
    #[arg(long, value_enum, default_value = "test")]
    split: EvalSplit,
    #[arg(long, default_value_t = DEFAULT_BATCH_SIZE)]
    batch_size: usize,
    #[command(flatten)]
    preprocess: PreprocessArgs,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long, value_name = "MODEL")]
    model: PathBuf,
    #[arg(long, value_name = "FILE")]
    image: PathBuf,
    #[command(flatten)]
    preprocess: PreprocessArgs,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, value_name = "MODEL")]
    model: PathBuf,
    #[arg(long, env = PORT_ENV, default_value_t = DEFAULT_PORT)]
    port: u16,
    #[arg(long, default_value = "0.0.0.0")]
    bind: std::net::IpAddr,
    #[arg(long, default_value_t = scalpnet_serve::DEFAULT_MAX_UPLOAD_BYTES)]
    max_upload_bytes: usize,
    #[command(flatten)]
    preprocess: PreprocessArgs,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    #[arg(long, default_value_t = 9)]
    count: usize,
    #[arg(long, default_value_t = DEFAULT_IMAGE_SIZE)]
    image_size: usize,
    #[arg(long, env = SEED_ENV, default_value_t = DEFAULT_SEED)]
    seed: u64,
    #[command(flatten)]
    preprocess: PreprocessArgs,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Predict(a) => run_predict(a),
        Command::Serve(a) => run_serve(a),
        Command::Inspect(a) => run_inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run_train(a: TrainArgs) -> Result<()> {
    let cfg = TrainConfig {
        batch_size: a.batch_size,
        image_size: a.image_size,
        epochs: a.epochs,
        split: SplitSpec::standard(a.seed),
        seed: a.seed,
        augment: !a.no_augment,
        preprocess: a.preprocess.get()?,
        ..TrainConfig::default()
    };
    let spec = match &a.model_spec {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            Some(serde_json::from_str::<ModelSpec>(&text).with_context(|| format!("parsing {}", path.display()))?)
        }
        None => None,
    };
    let trained = train_with_progress(&a.data, &cfg, spec, |r| {
        let val = match (r.val_loss, r.val_accuracy) {
            (Some(l), Some(acc)) => format!(" val_loss {l:.4} val_acc {acc:.4}"),
            _ => String::new(),
        };
        eprintln!(
            "epoch {:>3}/{}: loss {:.4} acc {:.4}{val}",
            r.epoch, cfg.epochs, r.train_loss, r.train_accuracy
        );
    })?;
    save_model(&trained.model, &a.out)?;
    if let Some(path) = &a.history {
        trained.history.write_csv(path)?;
    }
    let split = &trained.split;
    println!(
        "trained {} parameters on {} images ({} validation, {} test)",
        trained.model.param_count(),
        split.train.len(),
        split.val.len(),
        split.test.len()
    );
    if let Some(r) = trained.history.last() {
        println!("final train loss {:.4}, train accuracy {:.4}", r.train_loss, r.train_accuracy);
        if let (Some(l), Some(acc)) = (r.val_loss, r.val_accuracy) {
            println!("final validation loss {l:.4}, validation accuracy {acc:.4}");
        }
    }
    if !split.test.is_empty() {
        let report = evaluate(&trained.model, &split.test, &cfg)?;
        println!(
            "test accuracy {:.4}, macro F1 {:.4}",
            report.accuracy, report.macro_f1
        );
    }
    println!("model written to {}", a.out.display());
    Ok(())
}

fn run_eval(a: EvalArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let ds = scan_dataset_dir(&a.data)?;
    let ds = match a.split {
        EvalSplit::All => ds,
        EvalSplit::Test => {
            let test = split_dataset(&ds, &SplitSpec::standard(model.seed()))?.test;
            if test.is_empty() {
                bail!("the test split of {} is empty; use --split all", a.data.display());
            }
            test
        }
    };
    let cfg = TrainConfig {
        batch_size: a.batch_size,
        image_size: model.spec().input_size(),
        preprocess: a.preprocess.get()?,
        ..TrainConfig::default()
    };
    let report = evaluate(&model, &ds, &cfg)?;
    println!("{report}");
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn run_predict(a: PredictArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let bytes = fs::read(&a.image).with_context(|| format!("reading {}", a.image.display()))?;
    let p = predict(&model, &bytes, &a.preprocess.get()?)?;
    println!("{}", p.render());
    Ok(())
}

fn run_serve(a: ServeArgs) -> Result<()> {
    tracing_subscriber::fmt().with_writer(std::io::stderr).init();
    let cfg = ServeConfig {
        model_path: a.model,
        bind: a.bind,
        port: a.port,
        max_upload_bytes: a.max_upload_bytes,
        preprocess: a.preprocess.get()?,
    };
    scalpnet_serve::serve(&cfg)?;
    Ok(())
}

fn run_inspect(a: InspectArgs) -> Result<()> {
    let ds = scan_dataset_dir(&a.data)?;
    let loader = BatchLoader::new(&ds, a.image_size, a.preprocess.get()?, false);
    let count = a.count.min(ds.len());
    let batch = match loader.epoch(count.max(1), Order::Shuffled(a.seed))?.next() {
        Some(b) => b?,
        None => bail!("dataset is empty"),
    };
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let s = a.image_size;
    for (i, &label) in batch.labels.iter().enumerate().take(count) {
        let img = batch.images.data()[i * s * s * 3..(i + 1) * s * s * 3].to_vec();
        let raw = tensor_to_image(&scalpnet_core::Tensor::new(vec![s, s, 3], img)?)?;
        let path = out_path(&a.out, i, &ds.class_names[label]);
        fs::write(&path, encode_png(&raw)?).with_context(|| format!("writing {}", path.display()))?;
        println!("{}", path.display());
    }
    Ok(())
}

fn out_path(dir: &Path, i: usize, class: &str) -> PathBuf {
    dir.join(format!("{i:02}_{class}.png"))
}
