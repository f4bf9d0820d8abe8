//! Mini-batch training with ADADELTA, validation-based early stopping and
//! periodic negative resampling.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::adadelta::{adadelta_step, AdadeltaState, DEFAULT_EPSILON, DEFAULT_RHO};
use crate::nn::model::{Model, PATCH_LEN};
use crate::ops::{self, Mode};
use crate::patches::PatchDataset;
use crate::tensor::Tensor;
use crate::volume::Case;

const SHUFFLE_SALT: u64 = 0x7368_7566_666c_65;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub max_epochs: usize,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    pub batch_size: usize,
    pub validation_fraction: f64,
    /// Negatives are redrawn every this many epochs; 0 disables resampling.
    pub negative_resample_period: usize,
    pub rho: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 400,
            patience: 50,
            batch_size: 128,
            validation_fraction: 0.25,
            negative_resample_period: 10,
            rho: DEFAULT_RHO,
            epsilon: DEFAULT_EPSILON,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 {
            return Err(Error::InvalidArgument(
                "max_epochs must be at least 1".into(),
            ));
        }
        if self.patience > self.max_epochs {
            return Err(Error::InvalidArgument(format!(
                "patience {} exceeds max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidArgument(
                "batch_size must be at least 2".into(),
            ));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "validation_fraction {} outside (0, 1)",
                self.validation_fraction
            )));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) || !(self.epsilon > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "bad ADADELTA constants rho={} eps={}",
                self.rho, self.epsilon
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: f64,
    /// Negatives redrawn before this epoch.
    pub resampled: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_validation_loss: f64,
}

/// Optimizer state for the trainable tensors of one model.
#[derive(Clone, Debug)]
pub struct Trainer {
    states: BTreeMap<(usize, usize), AdadeltaState<f32>>,
    rho: f64,
    epsilon: f64,
}

impl Trainer {
    pub fn new(rho: f64, epsilon: f64) -> Self {
        Self {
            states: BTreeMap::new(),
            rho,
            epsilon,
        }
    }

    /// One ADADELTA update on a labelled batch of sample-major inputs to layer
    /// `start` (raw patches for `start == 0`, conv features at the feature
    /// boundary). Returns the training-mode loss before the update.
    pub fn step_from(
        &mut self,
        model: &mut Model<f32>,
        start: usize,
        inputs: &[f32],
        labels: &[u8],
        dropout_seed: u64,
    ) -> Result<f32> {
        let batch = labels.len();
        let sample_len = model.layers()[start].input.len();
        if inputs.len() != batch * sample_len {
            return Err(Error::shape(
                "training batch",
                &[batch, sample_len],
                &[inputs.len()],
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
        let act = model.to_layer_layout(start, inputs, batch);
        let (logits, pass) = model.run(
            start,
            model.layers().len(),
            act,
            batch,
            Mode::Train,
            Some(&mut rng),
            true,
        );
        let pass = pass.expect("recorded");
        let logits = Tensor::from_vec(&[batch, 2], logits)?;
        let (loss, grad) = ops::softmax_crossentropy(&logits, &ops::one_hot_labels(labels))?;
        let mut grads = model.zero_gradients();
        model.backward(&pass, grad.into_data(), &mut grads);
        if let Some((l, s, _)) = grads
            .iter()
            .find(|(_, _, g)| g.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::NonFinite(format!("gradient of layer {l} slot {s}")));
        }
        for (l, s, g) in grads.iter() {
            let state = self
                .states
                .entry((l, s))
                .or_insert_with(|| AdadeltaState::new(g.len()));
            adadelta_step(
                state,
                model.param_mut(l, s).data_mut(),
                g,
                self.rho,
                self.epsilon,
            )?;
        }
        model.apply_bn_updates(&pass);
        Ok(loss)
    }

    /// [`Self::step_from`] on raw patches.
    pub fn step(
        &mut self,
        model: &mut Model<f32>,
        patches: &Tensor<f32>,
        labels: &[u8],
        dropout_seed: u64,
    ) -> Result<f32> {
        self.step_from(model, 0, patches.data(), labels, dropout_seed)
    }
}

/// Mean inference-mode cross-entropy of sample-major inputs to layer `start`.
pub(crate) fn inference_loss(
    model: &Model<f32>,
    start: usize,
    inputs: &[f32],
    labels: &[u8],
) -> Result<f64> {
    let n = labels.len();
    if n == 0 {
        return Ok(0.0);
    }
    let sample_len = model.layers()[start].input.len();
    let logits = model.infer_from(start, inputs, n, sample_len);
    let logits = Tensor::from_vec(&[n, 2], logits)?;
    Ok(ops::softmax_crossentropy(&logits, &ops::one_hot_labels(labels))?.0 as f64)
}

/// Inputs fed to the optimizer: either raw patches or, when the convolutional
/// stage cannot change, its cached output.
struct Inputs {
    start: usize,
    sample_len: usize,
    features: Option<Vec<f32>>,
}

impl Inputs {
    fn new(model: &Model<f32>, dataset: &PatchDataset) -> Self {
        if model.conv_stage_is_static() {
            let start = model.feature_boundary();
            let features = model.features_raw(dataset.patches().data(), dataset.len());
            Self {
                start,
                sample_len: model.feature_len(),
                features: Some(features),
            }
        } else {
            Self {
                start: 0,
                sample_len: PATCH_LEN,
                features: None,
            }
        }
    }

    fn refresh(&mut self, model: &Model<f32>, dataset: &PatchDataset, changed: &[usize]) {
        if changed.is_empty() {
            return;
        }
        if let Some(f) = self.features.as_mut() {
            let (patches, _) = dataset.gather(changed);
            let fresh = model.features_raw(patches.data(), changed.len());
            for (&i, row) in changed.iter().zip(fresh.chunks_exact(self.sample_len)) {
                f[i * self.sample_len..(i + 1) * self.sample_len].copy_from_slice(row);
            }
        }
    }

    fn gather(&self, dataset: &PatchDataset, idx: &[usize]) -> (Vec<f32>, Vec<u8>) {
        let labels = idx.iter().map(|&i| dataset.labels()[i]).collect();
        let src = match &self.features {
            Some(f) => f.as_slice(),
            None => dataset.patches().data(),
        };
        let mut out = Vec::with_capacity(idx.len() * self.sample_len);
        for &i in idx {
            out.extend_from_slice(&src[i * self.sample_len..(i + 1) * self.sample_len]);
        }
        (out, labels)
    }
}

/// Trains `model` in place and leaves it holding the weights of the epoch with
/// the lowest validation loss.
///
/// The dataset is split with `config.validation_fraction` unless it already
/// carries a split. With `cases` given, training negatives are redrawn every
/// `config.negative_resample_period` epochs.
pub fn train(
    model: &mut Model<f32>,
    dataset: &mut PatchDataset,
    cases: Option<&[Case]>,
    config: &TrainConfig,
) -> Result<TrainHistory> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset(
            "training dataset has no patches".into(),
        ));
    }
    if dataset.positives() == 0 || dataset.negatives() == 0 {
        return Err(Error::InvalidArgument(
            "training dataset contains a single class".into(),
        ));
    }
    if !dataset.is_split() {
        dataset.split_validation(config.validation_fraction, config.seed)?;
    }
    if cases.is_none() && config.negative_resample_period > 0 {
        log::debug!("no cases supplied; negatives stay fixed");
    }
    let mut inputs = Inputs::new(model, dataset);
    let (val_x, val_y) = inputs.gather(dataset, &dataset.validation_indices());
    let mut train_idx = dataset.train_indices();
    let mut trainer = Trainer::new(config.rho, config.epsilon);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ SHUFFLE_SALT);

    let mut history = TrainHistory {
        epochs: Vec::new(),
        best_epoch: 0,
        best_validation_loss: f64::INFINITY,
    };
    let mut best_params = None;
    let mut since_best = 0;
    for epoch in 0..config.max_epochs {
        let mut resampled = 0;
        if let Some(cases) = cases {
            let changed =
                dataset.resample_negatives(cases, epoch, config.negative_resample_period)?;
            inputs.refresh(model, dataset, &changed);
            resampled = changed.len();
        }
        train_idx.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut seen = 0;
        for batch in train_idx.chunks(config.batch_size) {
            // a lone trailing sample gives degenerate batch statistics
            if batch.len() < 2 {
                continue;
            }
            let (x, y) = inputs.gather(dataset, batch);
            let loss = trainer.step_from(model, inputs.start, &x, &y, rng.next_u64())?;
            loss_sum += loss as f64 * batch.len() as f64;
            seen += batch.len();
        }
        let validation_loss = inference_loss(model, inputs.start, &val_x, &val_y)?;
        if !validation_loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "validation loss at epoch {epoch}"
            )));
        }
        let train_loss = loss_sum / seen.max(1) as f64;
        log::debug!("epoch {epoch}: train {train_loss:.5} validation {validation_loss:.5}");
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            validation_loss,
            resampled,
        });
        if validation_loss < history.best_validation_loss {
            history.best_validation_loss = validation_loss;
            history.best_epoch = epoch;
            best_params = Some(model.all_params().to_vec());
            since_best = 0;
        } else {
            since_best += 1;
        }
        if since_best >= config.patience {
            break;
        }
    }
    if let Some(p) = best_params {
        model.restore_params(p);
    }
    log::info!(
        "trained {} epochs, best validation loss {:.5} at epoch {}",
        history.epochs.len(),
        history.best_validation_loss,
        history.best_epoch
    );
    Ok(history)
}
