//! Training loop, evaluation, and single-image prediction.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{
    augment_batch, derive_seed, scan_dataset_dir, split_dataset, BatchLoader, DatasetSplit,
    LabeledDataset, Order, SplitSpec,
};
use crate::error::{Error, Result};
use crate::imageproc::Preprocess;
use crate::metrics::{confusion_matrix, summarize, EvalReport};
use crate::nn::{Mode, Model, ModelSpec};
use crate::optim::{accuracy, sparse_cce, AdamConfig, AdamState};
use crate::tensor::{argmax, Tensor};

pub const DEFAULT_BATCH_SIZE: usize = 32;
pub const DEFAULT_IMAGE_SIZE: usize = 256;
pub const DEFAULT_CHANNELS: usize = 3;
pub const DEFAULT_EPOCHS: usize = 50;
pub const DEFAULT_SEED: u64 = 42;

const SHUFFLE_STREAM: u64 = 0x5348_5546;
const AUGMENT_STREAM: u64 = 0x4155_474d;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub image_size: usize,
    pub channels: usize,
    pub epochs: usize,
    /// Split fractions; the split seed is always `seed`.
    pub split: SplitSpec,
    /// Drives the split, weight init, shuffles and augmentation.
    pub seed: u64,
    pub adam: AdamConfig,
    pub augment: bool,
    pub preprocess: Preprocess,
    /// Keep decoded training/validation tensors in memory across epochs.
    pub cache: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: DEFAULT_BATCH_SIZE,
            image_size: DEFAULT_IMAGE_SIZE,
            channels: DEFAULT_CHANNELS,
            epochs: DEFAULT_EPOCHS,
            split: SplitSpec::standard(DEFAULT_SEED),
            seed: DEFAULT_SEED,
            adam: AdamConfig::default(),
            augment: true,
            preprocess: Preprocess::default(),
            cache: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.image_size == 0 {
            return Err(Error::InvalidArgument(
                "batch size and image size must be positive".into(),
            ));
        }
        if self.channels != 3 {
            return Err(Error::InvalidArgument(format!(
                "only 3-channel input is supported, got {}",
                self.channels
            )));
        }
        self.split.validate()
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            seed: self.seed,
            ..self.split
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    /// `None` when the validation split is empty.
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub records: Vec<EpochRecord>,
}

impl History {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,train_acc,val_loss,val_acc";

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.epoch,
                r.train_loss,
                r.train_accuracy,
                opt(r.val_loss),
                opt(r.val_accuracy)
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub model: Model,
    pub history: History,
    pub split: DatasetSplit,
}

/// Trains on `root/<class>/<image>` with no progress reporting.
pub fn train(root: &Path, cfg: &TrainConfig, spec: Option<ModelSpec>) -> Result<Trained> {
    train_with_progress(root, cfg, spec, |_| {})
}

pub fn train_with_progress(
    root: &Path,
    cfg: &TrainConfig,
    spec: Option<ModelSpec>,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<Trained> {
    cfg.validate()?;
    let ds = scan_dataset_dir(root)?;
    let split = split_dataset(&ds, &cfg.split_spec())?;
    let spec = match spec {
        Some(spec) => {
            if spec.class_names != ds.class_names {
                return Err(Error::Spec(format!(
                    "model spec classes {:?} do not match dataset classes {:?}",
                    spec.class_names, ds.class_names
                )));
            }
            if spec.input_shape != [cfg.image_size, cfg.image_size, cfg.channels] {
                return Err(Error::Spec(format!(
                    "model spec input {:?} does not match image size {}",
                    spec.input_shape, cfg.image_size
                )));
            }
            spec
        }
        None => ModelSpec::default_for(cfg.image_size, ds.class_names.clone())?,
    };
    let model = Model::init(spec, cfg.seed)?;
    let (model, history) = fit(model, &split, cfg, on_epoch)?;
    Ok(Trained {
        model,
        history,
        split,
    })
}

/// Runs the epoch loop on an already split dataset.
pub fn fit(
    mut model: Model,
    split: &DatasetSplit,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(Model, History)> {
    let mut history = History::default();
    if cfg.epochs == 0 {
        return Ok((model, history));
    }
    if split.train.is_empty() {
        return Err(Error::Dataset("training split is empty".into()));
    }
    let train_loader = BatchLoader::new(&split.train, cfg.image_size, cfg.preprocess, cfg.cache);
    let val_loader = BatchLoader::new(&split.val, cfg.image_size, cfg.preprocess, cfg.cache);
    let mut adam = AdamState::new(cfg.adam, model.params());
    let shuffle_base = derive_seed(cfg.seed, SHUFFLE_STREAM);
    let augment_base = derive_seed(cfg.seed, AUGMENT_STREAM);

    for epoch in 0..cfg.epochs {
        let (mut loss_sum, mut correct, mut seen) = (0.0f64, 0.0f64, 0usize);
        let batches = train_loader.epoch(cfg.batch_size, Order::Shuffled(derive_seed(shuffle_base, epoch as u64)))?;
        for (b, batch) in batches.enumerate() {
            let mut batch = batch?;
            if cfg.augment {
                let seed = derive_seed(derive_seed(augment_base, epoch as u64), b as u64);
                batch = augment_batch(&batch, seed)?;
            }
            let pass = model.forward(&batch.images, Mode::Training)?;
            let (loss, grad) = sparse_cce(&pass.logits, &batch.labels)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            let n = batch.len();
            loss_sum += loss as f64 * n as f64;
            correct += accuracy(&pass.probs, &batch.labels)? * n as f64;
            seen += n;
            let grads = model.backward(&pass, &grad)?;
            drop(pass);
            adam.step(&mut model.params_mut(), &grads)?;
        }
        let (val_loss, val_accuracy) = match loss_and_accuracy(&model, &val_loader, cfg.batch_size)? {
            Some((l, a)) => (Some(l), Some(a)),
            None => (None, None),
        };
        let record = EpochRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / seen as f64,
            train_accuracy: correct / seen as f64,
            val_loss,
            val_accuracy,
        };
        on_epoch(&record);
        history.records.push(record);
    }
    Ok((model, history))
}

/// Mean loss and accuracy over a loader in inference mode; `None` if empty.
fn loss_and_accuracy(model: &Model, loader: &BatchLoader, batch_size: usize) -> Result<Option<(f64, f64)>> {
    if loader.is_empty() {
        return Ok(None);
    }
    let (mut loss_sum, mut correct, mut seen) = (0.0f64, 0.0f64, 0usize);
    for batch in loader.epoch(batch_size, Order::Sequential)? {
        let batch = batch?;
        let pass = model.forward(&batch.images, Mode::Inference)?;
        let (loss, _) = sparse_cce(&pass.logits, &batch.labels)?;
        let n = batch.len();
        loss_sum += loss as f64 * n as f64;
        correct += accuracy(&pass.probs, &batch.labels)? * n as f64;
        seen += n;
    }
    Ok(Some((loss_sum / seen as f64, correct / seen as f64)))
}

/// Class probabilities for every item of `ds`, in dataset order.
pub fn predict_dataset(model: &Model, ds: &LabeledDataset, batch_size: usize, preprocess: Preprocess) -> Result<Tensor> {
    let spec = model.spec();
    if spec.input_shape[0] != spec.input_shape[1] {
        return Err(Error::Spec("dataset evaluation needs a square model input".into()));
    }
    let loader = BatchLoader::new(ds, spec.input_size(), preprocess, false);
    let k = spec.n_classes();
    let mut probs = Vec::with_capacity(ds.len() * k);
    for batch in loader.epoch(batch_size.max(1), Order::Sequential)? {
        let pass = model.forward(&batch?.images, Mode::Inference)?;
        probs.extend_from_slice(pass.probs.data());
    }
    Tensor::new(vec![ds.len(), k], probs)
}

/// Inference over `ds` summarized as a confusion matrix and metrics.
pub fn evaluate(model: &Model, ds: &LabeledDataset, cfg: &TrainConfig) -> Result<EvalReport> {
    if ds.is_empty() {
        return Err(Error::Empty("evaluation dataset is empty"));
    }
    if ds.class_names != model.class_names() {
        return Err(Error::Spec(format!(
            "dataset classes {:?} do not match model classes {:?}",
            ds.class_names,
            model.class_names()
        )));
    }
    let probs = predict_dataset(model, ds, cfg.batch_size, cfg.preprocess)?;
    let predicted = probs.argmax_rows()?;
    let cm = confusion_matrix(&ds.labels(), &predicted, model.class_names())?;
    summarize(&cm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub class_name: String,
    pub class_index: usize,
    /// 100 × the winning probability.
    pub confidence: f64,
    pub probabilities: Vec<f32>,
}

impl Prediction {
    pub fn from_probabilities(probs: &[f32], class_names: &[String]) -> Result<Prediction> {
        if probs.len() != class_names.len() || probs.is_empty() {
            return Err(Error::Spec(format!(
                "{} probabilities for {} class names",
                probs.len(),
                class_names.len()
            )));
        }
        let best = argmax(probs);
        Ok(Prediction {
            class_name: class_names[best].clone(),
            class_index: best,
            confidence: 100.0 * probs[best] as f64,
            probabilities: probs.to_vec(),
        })
    }

    /// Confidence rounded to one decimal place.
    pub fn rounded_confidence(&self) -> f64 {
        (self.confidence * 10.0).round() / 10.0
    }

    /// `Predicted: <name>. Confidence: <p>%`
    pub fn render(&self) -> String {
        format!(
            "Predicted: {}. Confidence: {:.1}%",
            display_name(&self.class_name),
            self.rounded_confidence()
        )
    }
}

/// `head_lice` → `Head Lice`.
pub fn display_name(raw: &str) -> String {
    raw.split('_')
        .filter(|w| !w.is_empty())
        .map(|w| {
            let mut chars = w.chars();
            match chars.next() {
                Some(first) => first.to_uppercase().chain(chars).collect::<String>(),
                None => String::new(),
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Decodes one image and classifies it.
pub fn predict(model: &Model, image_bytes: &[u8], preprocess: &Preprocess) -> Result<Prediction> {
    let [h, w, c] = model.spec().input_shape;
    if c != 3 {
        return Err(Error::Spec(format!("model expects {c} channels, images provide 3")));
    }
    let image = preprocess.image_to_tensor(image_bytes, w, h)?.reshape(&[1, h, w, 3])?;
    let pass = model.forward(&image, Mode::Inference)?;
    Prediction::from_probabilities(pass.probs.data(), model.class_names())
}
