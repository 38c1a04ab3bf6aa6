//! Mini-batch SGD over labeled patches with per-epoch error curves.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{subsample, Channels, Patch, PatchLabel, PATCH_SIZE};
use crate::model::{CnnModel, ModelError, Regularization};
use crate::tensor::{softmax, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("patch has {actual} channels, model expects {expected}")]
    ChannelMismatch { expected: usize, actual: usize },
    #[error("{0} patch set is empty")]
    EmptySplit(&'static str),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error(transparent)]
    Model(ModelError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Tensor(TensorError::NonFinite { op }) => TrainError::NonFinite(op.to_string()),
            other => TrainError::Model(other),
        }
    }
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        ModelError::from(e).into()
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub l2: f64,
    /// Decay the fc layer as well as the convolutions.
    pub l2_on_output: bool,
    pub epochs: usize,
    /// Follows the run seed in config files.
    #[serde(skip)]
    pub shuffle_seed: u64,
    pub channels: Channels,
    /// Cap on patches scored per split each epoch; `None` scores all.
    pub eval_subsample: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 100,
            lr: 0.001,
            momentum: 0.9,
            l2: 0.001,
            l2_on_output: true,
            epochs: 30,
            shuffle_seed: 0,
            channels: Channels::Rgbd,
            eval_subsample: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.momentum > 0.0 && self.momentum < 1.0) {
            return bad("momentum must be in (0, 1)");
        }
        if !(self.l2 > 0.0 && self.l2.is_finite()) {
            return bad("l2 must be positive");
        }
        if self.eval_subsample == Some(0) {
            return bad("eval_subsample must be at least 1");
        }
        Ok(())
    }

    fn regularization(&self) -> Regularization {
        Regularization {
            l2: self.l2,
            l2_on_output: self.l2_on_output,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_error: f64,
    pub test_error: f64,
    pub mean_loss: f64,
    pub wall_time: f64,
}

pub const EPOCH_CSV_HEADER: &str = "epoch,train_error,test_error,mean_loss,wall_time";

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.3}",
            self.epoch, self.train_error, self.test_error, self.mean_loss, self.wall_time
        )
    }
}

pub fn write_epoch_csv(path: &Path, records: &[EpochRecord]) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{EPOCH_CSV_HEADER}")?;
    for r in records {
        writeln!(f, "{}", r.csv_row())?;
    }
    f.flush()
}

fn check_channels(model: &CnnModel, patches: &[Patch]) -> Result<()> {
    let expected = model.channels();
    match patches.iter().find(|p| p.channels() != expected) {
        Some(p) => Err(TrainError::ChannelMismatch {
            expected,
            actual: p.channels(),
        }),
        None => Ok(()),
    }
}

/// Stacks patches into an N×C×32×32 batch.
pub fn stack_patches<'a>(patches: impl IntoIterator<Item = &'a Patch>) -> Result<Tensor<f32>> {
    let mut data = Vec::new();
    let mut n = 0;
    let mut c = 0;
    for p in patches {
        c = p.channels();
        data.extend_from_slice(p.data.data());
        n += 1;
    }
    Ok(Tensor::new(&[n, c, PATCH_SIZE, PATCH_SIZE], data)?)
}

/// Occlusion posterior for every example of an N×C×32×32 batch.
pub fn occlusion_probabilities(model: &CnnModel, batch: &Tensor<f32>) -> Result<Vec<f32>> {
    let logits = model.predict(batch)?;
    let classes = logits.shape()[1];
    Ok(logits
        .data()
        .chunks_exact(classes)
        .map(|z| softmax(z)[PatchLabel::Occlusion.class_index()])
        .collect())
}

/// Predicted label per patch, scored in chunks of `chunk`.
pub fn predict_labels(model: &CnnModel, patches: &[Patch], chunk: usize) -> Result<Vec<PatchLabel>> {
    check_channels(model, patches)?;
    let mut out = Vec::with_capacity(patches.len());
    for group in patches.chunks(chunk.max(1)) {
        let logits = model.predict(&stack_patches(group)?)?;
        let classes = logits.shape()[1];
        out.extend(logits.data().chunks_exact(classes).map(|z| PatchLabel::from_class_index(argmax(z))));
    }
    Ok(out)
}

fn argmax(z: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = i;
        }
    }
    best
}

/// Fraction of patches whose argmax class differs from the label.
pub fn error_rate(model: &CnnModel, patches: &[Patch], chunk: usize) -> Result<f64> {
    if patches.is_empty() {
        return Err(TrainError::EmptySplit("evaluation"));
    }
    let predicted = predict_labels(model, patches, chunk)?;
    let wrong = predicted.iter().zip(patches).filter(|(p, q)| **p != q.label).count();
    Ok(wrong as f64 / patches.len() as f64)
}

/// Argmax label and the Occlusion-class probability, whichever class wins.
pub fn classify(model: &CnnModel, patch: &Patch) -> Result<(PatchLabel, f32)> {
    check_channels(model, std::slice::from_ref(patch))?;
    let probs = softmax(&model.predict_example(patch.data.data())?);
    Ok((PatchLabel::from_class_index(argmax(&probs)), probs[PatchLabel::Occlusion.class_index()]))
}

pub fn train(model: &mut CnnModel, train: &[Patch], test: &[Patch], cfg: &TrainConfig) -> Result<Vec<EpochRecord>> {
    train_with(model, train, test, cfg, |_, _| Ok(()))
}

/// Like [`train`], calling `observer` after every epoch (CSV streaming,
/// checkpoints).
pub fn train_with(
    model: &mut CnnModel,
    train: &[Patch],
    test: &[Patch],
    cfg: &TrainConfig,
    mut observer: impl FnMut(&EpochRecord, &CnnModel) -> Result<()>,
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptySplit("training"));
    }
    if test.is_empty() {
        return Err(TrainError::EmptySplit("test"));
    }
    if model.channels() != cfg.channels.count() {
        return Err(TrainError::ChannelMismatch {
            expected: cfg.channels.count(),
            actual: model.channels(),
        });
    }
    check_channels(model, train)?;
    check_channels(model, test)?;

    let (train_eval, test_eval) = match cfg.eval_subsample {
        Some(n) => (
            subsample(train, n, cfg.shuffle_seed ^ 0x7472),
            subsample(test, n, cfg.shuffle_seed ^ 0x7465),
        ),
        None => (train.to_vec(), test.to_vec()),
    };
    let reg = cfg.regularization();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.shuffle_seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut records = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let batch = stack_patches(idx.iter().map(|&i| &train[i]))?;
            let labels: Vec<usize> = idx.iter().map(|&i| train[i].label.class_index()).collect();
            model.forward(&batch)?;
            let (loss, grads) = model.backward(&labels, &reg)?;
            if !loss.is_finite() {
                return Err(TrainError::NonFinite("loss".into()));
            }
            loss_sum += loss as f64 * idx.len() as f64;
            model.sgd_step(&grads, cfg.lr, cfg.momentum)?;
        }
        let record = EpochRecord {
            epoch,
            train_error: error_rate(model, &train_eval, cfg.batch_size)?,
            test_error: error_rate(model, &test_eval, cfg.batch_size)?,
            mean_loss: loss_sum / train.len() as f64,
            wall_time: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {:.4} train {:.4} test {:.4} ({:.1}s)",
            record.mean_loss,
            record.train_error,
            record.test_error,
            record.wall_time
        );
        observer(&record, model)?;
        records.push(record);
    }
    Ok(records)
}
