//! The eleven-layer patch classifier: topology, parameters, forward and backward passes.
//!
//! The published description gives the stack depths, the fully connected widths
//! and the parameter totals, but not kernel size, padding, activation sharing or
//! batch-norm placement. The configuration here (3x3x3 same-padded kernels, two
//! floor-mode poolings 11 -> 5 -> 2, per-element PReLU slopes on feature maps and
//! per-unit slopes on dense layers, conv -> BN -> PReLU ordering) is a
//! reconstruction that reproduces those totals exactly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nn::layer::{FeatureShape, FreezeConfig, FreezeMode, Group, LayerKind, LayerSpec};
use crate::ops::{self, Dims3, Mode};
use crate::tensor::{Scalar, Tensor};

/// Side length of the cubic input patch.
pub const PATCH_SIZE: usize = 11;
/// Input modalities (FLAIR, T1-w).
pub const CHANNELS: usize = 2;
pub const DROPOUT_P: f64 = 0.5;
pub const PRELU_INIT: f64 = 0.25;

/// Samples per forward chunk during inference.
const INFER_CHUNK: usize = 48;

/// Patch dimensions as `[channels, d, h, w]`.
pub const fn patch_shape() -> [usize; 4] {
    [CHANNELS, PATCH_SIZE, PATCH_SIZE, PATCH_SIZE]
}

pub const PATCH_LEN: usize = CHANNELS * PATCH_SIZE * PATCH_SIZE * PATCH_SIZE;

/// Parameter totals of a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCounts {
    /// Every stored value, including batch-norm running statistics.
    pub total: usize,
    /// Weights, biases and PReLU slopes of the retrained FC groups, excluding the
    /// softmax head (the convention of the published parameter table). Equals
    /// `total` for [`FreezeMode::None`].
    pub trainable_table: usize,
    /// Values the optimizer actually updates under the model's current flags.
    pub trainable_actual: usize,
}

/// Ordered layer list with weights and per-group trainability.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T = f32> {
    layers: Vec<LayerSpec>,
    params: Vec<Vec<Tensor<T>>>,
    trainable: [bool; 5],
    frozen_bn_batch_stats: bool,
    seed: u64,
}

fn canonical_layers() -> Vec<LayerSpec> {
    use LayerKind::*;
    let mut layers = Vec::new();
    let mut shape = FeatureShape::Volume {
        channels: CHANNELS,
        dims: Dims3::cube(PATCH_SIZE),
    };
    let mut push = |kind: LayerKind, group: Group, shape: &mut FeatureShape| {
        let spec = LayerSpec {
            kind,
            group,
            input: *shape,
        };
        *shape = spec.output().expect("canonical topology is consistent");
        layers.push(spec);
    };
    let bn = |channels| BatchNorm {
        channels,
        momentum: ops::BN_MOMENTUM,
        epsilon: ops::BN_EPSILON,
    };
    for (cin, cout) in [(CHANNELS, 32), (32, 32)] {
        push(
            Conv3d {
                in_channels: cin,
                out_channels: cout,
            },
            Group::Conv,
            &mut shape,
        );
        push(bn(cout), Group::Conv, &mut shape);
        push(Prelu, Group::Conv, &mut shape);
    }
    push(MaxPool, Group::Conv, &mut shape);
    for (cin, cout) in [(32, 64), (64, 64)] {
        push(
            Conv3d {
                in_channels: cin,
                out_channels: cout,
            },
            Group::Conv,
            &mut shape,
        );
        push(bn(cout), Group::Conv, &mut shape);
        push(Prelu, Group::Conv, &mut shape);
    }
    push(MaxPool, Group::Conv, &mut shape);
    push(Flatten, Group::Conv, &mut shape);
    for (group, width) in [(Group::Fc1, 256), (Group::Fc2, 128), (Group::Fc3, 64)] {
        push(
            Dense {
                inputs: shape.len(),
                outputs: width,
            },
            group,
            &mut shape,
        );
        push(Prelu, group, &mut shape);
        push(Dropout { p: DROPOUT_P }, group, &mut shape);
    }
    push(
        Dense {
            inputs: 64,
            outputs: 2,
        },
        Group::Out,
        &mut shape,
    );
    push(Softmax, Group::Out, &mut shape);
    layers
}

/// Per-layer values kept by a recorded forward pass.
enum Cache<T> {
    Input(Vec<T>),
    Norm {
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Pool {
        argmax: Vec<usize>,
        input_len: usize,
    },
    Mask(Vec<T>),
    Nothing,
}

/// Recorded forward pass over layers `start..`.
pub(crate) struct Pass<T> {
    start: usize,
    batch: usize,
    caches: Vec<Cache<T>>,
    /// New running statistics `(layer, mean, var)` from batch-normalized layers.
    bn_updates: Vec<(usize, Vec<T>, Vec<T>)>,
}

/// Gradients for every trainable parameter slot, mirroring the model's parameters.
#[derive(Clone, Debug)]
pub struct Gradients<T = f32> {
    slots: Vec<Vec<Option<Vec<T>>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, layer: usize, slot: usize) -> Option<&[T]> {
        self.slots.get(layer)?.get(slot)?.as_deref()
    }

    pub(crate) fn iter(&self) -> impl Iterator<Item = (usize, usize, &[T])> {
        self.slots.iter().enumerate().flat_map(|(l, slots)| {
            slots
                .iter()
                .enumerate()
                .filter_map(move |(s, g)| g.as_deref().map(|g| (l, s, g)))
        })
    }
}

impl<T: Scalar> Model<T> {
    /// Canonical architecture with He-normal weights, zero biases, PReLU slopes
    /// 0.25 and identity batch-norm parameters.
    pub fn canonical(seed: u64) -> Self {
        let layers = canonical_layers();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = layers
            .iter()
            .map(|spec| {
                let shapes = spec.param_shapes();
                match spec.kind {
                    LayerKind::Conv3d { .. } | LayerKind::Dense { .. } => {
                        let fan_in: usize = shapes[0][1..].iter().product();
                        let normal =
                            Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
                        let len = shapes[0].iter().product();
                        let w = (0..len)
                            .map(|_| T::from_f64(normal.sample(&mut rng)))
                            .collect();
                        vec![
                            Tensor::from_vec(&shapes[0], w).expect("shape"),
                            Tensor::zeros(&shapes[1]),
                        ]
                    }
                    LayerKind::BatchNorm { .. } => vec![
                        Tensor::full(&shapes[0], T::ONE),
                        Tensor::zeros(&shapes[1]),
                        Tensor::zeros(&shapes[2]),
                        Tensor::full(&shapes[3], T::ONE),
                    ],
                    LayerKind::Prelu => vec![Tensor::full(&shapes[0], T::from_f64(PRELU_INIT))],
                    _ => Vec::new(),
                }
            })
            .collect();
        Self {
            layers,
            params,
            trainable: [true; 5],
            frozen_bn_batch_stats: false,
            seed,
        }
    }

    /// Assembles a model from parts, validating parameter shapes against the specs.
    pub fn from_parts(
        layers: Vec<LayerSpec>,
        params: Vec<Vec<Tensor<T>>>,
        seed: u64,
    ) -> Result<Self> {
        if layers.len() != params.len() {
            return Err(Error::Format(format!(
                "{} layers but {} parameter lists",
                layers.len(),
                params.len()
            )));
        }
        let mut prev: Option<FeatureShape> = None;
        for (spec, ps) in layers.iter().zip(&params) {
            let out = spec.output()?;
            if let Some(p) = prev {
                if p != spec.input {
                    return Err(Error::Format(format!(
                        "layer input {} does not follow {}",
                        spec.input, p
                    )));
                }
            }
            prev = Some(out);
            let shapes = spec.param_shapes();
            if shapes.len() != ps.len()
                || shapes
                    .iter()
                    .zip(ps)
                    .any(|(s, t)| s.as_slice() != t.shape())
            {
                return Err(Error::Format(format!(
                    "parameter shapes do not match layer {}",
                    spec.render()
                )));
            }
        }
        if layers.first().map(|l| l.input.to_vec()) != Some(patch_shape().to_vec())
            || prev != Some(FeatureShape::Flat(2))
        {
            return Err(Error::Format(
                "model must map 2x11x11x11 patches to two logits".into(),
            ));
        }
        Ok(Self {
            layers,
            params,
            trainable: [true; 5],
            frozen_bn_batch_stats: false,
            seed,
        })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self, layer: usize) -> &[Tensor<T>] {
        &self.params[layer]
    }

    pub fn param_mut(&mut self, layer: usize, slot: usize) -> &mut Tensor<T> {
        &mut self.params[layer][slot]
    }

    pub(crate) fn all_params(&self) -> &[Vec<Tensor<T>>] {
        &self.params
    }

    pub(crate) fn restore_params(&mut self, params: Vec<Vec<Tensor<T>>>) {
        debug_assert_eq!(params.len(), self.params.len());
        self.params = params;
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn is_trainable(&self, group: Group) -> bool {
        self.trainable[group.index()]
    }

    pub fn frozen_bn_batch_stats(&self) -> bool {
        self.frozen_bn_batch_stats
    }

    pub(crate) fn set_flags(&mut self, trainable: [bool; 5], frozen_bn_batch_stats: bool) {
        self.trainable = trainable;
        self.frozen_bn_batch_stats = frozen_bn_batch_stats;
    }

    /// Applies a freeze configuration; frozen groups receive no optimizer updates.
    pub fn set_trainable(&mut self, freeze: &FreezeConfig) {
        let groups = freeze.trainable_groups();
        for g in Group::ALL {
            self.trainable[g.index()] = groups.contains(&g);
        }
        self.frozen_bn_batch_stats = freeze.frozen_bn_batch_stats;
    }

    /// Parameter totals; `freeze` selects which groups the table convention counts.
    pub fn count_params(&self, freeze: Option<FreezeMode>) -> ParamCounts {
        let total = self.params.iter().flatten().map(Tensor::len).sum();
        let trainable_table = match freeze.unwrap_or(FreezeMode::None) {
            FreezeMode::None => total,
            mode => self
                .layers
                .iter()
                .zip(&self.params)
                .filter(|(spec, _)| mode.retrained_groups().contains(&spec.group))
                .flat_map(|(spec, ps)| spec.trainable_slots().iter().map(move |&s| ps[s].len()))
                .sum(),
        };
        let trainable_actual = self
            .layers
            .iter()
            .zip(&self.params)
            .filter(|(spec, _)| self.is_trainable(spec.group))
            .flat_map(|(spec, ps)| spec.trainable_slots().iter().map(move |&s| ps[s].len()))
            .sum();
        ParamCounts {
            total,
            trainable_table,
            trainable_actual,
        }
    }

    /// Parameter count per layer, for inspection listings.
    pub fn layer_param_count(&self, layer: usize) -> usize {
        self.params[layer].iter().map(Tensor::len).sum()
    }

    /// Index of the first layer after the flatten stage.
    pub fn feature_boundary(&self) -> usize {
        self.layers
            .iter()
            .position(|l| l.kind == LayerKind::Flatten)
            .map_or(0, |i| i + 1)
    }

    /// Length of the flattened convolutional feature vector.
    pub fn feature_len(&self) -> usize {
        self.layers[self.feature_boundary() - 1].input.len()
    }

    /// True when the convolutional stage is a fixed function of its input during
    /// training, so its outputs can be computed once and reused.
    pub fn conv_stage_is_static(&self) -> bool {
        self.layers[..self.feature_boundary()]
            .iter()
            .all(|l| !self.is_trainable(l.group))
            && !self.frozen_bn_batch_stats
    }

    fn first_trainable_layer(&self) -> Option<usize> {
        self.layers
            .iter()
            .position(|l| self.is_trainable(l.group) && !l.trainable_slots().is_empty())
    }

    fn bn_uses_batch_stats(&self, group: Group, mode: Mode) -> bool {
        mode == Mode::Train && (self.is_trainable(group) || self.frozen_bn_batch_stats)
    }

    /// Runs layers `start..end` on `act` (layout native to layer `start`).
    pub(crate) fn run(
        &self,
        start: usize,
        end: usize,
        mut act: Vec<T>,
        batch: usize,
        mode: Mode,
        mut rng: Option<&mut ChaCha8Rng>,
        record: bool,
    ) -> (Vec<T>, Option<Pass<T>>) {
        let mut pass = Pass {
            start,
            batch,
            caches: Vec::new(),
            bn_updates: Vec::new(),
        };
        for (i, spec) in self.layers.iter().enumerate().take(end).skip(start) {
            let ps = &self.params[i];
            let (next, cache) = match (spec.kind, spec.input) {
                (
                    LayerKind::Conv3d {
                        in_channels,
                        out_channels,
                    },
                    FeatureShape::Volume { dims, .. },
                ) => {
                    let out = ops::conv_forward_raw(
                        &act,
                        in_channels,
                        batch,
                        dims,
                        ps[0].data(),
                        ps[1].data(),
                        out_channels,
                    );
                    (out, Cache::Input(act))
                }
                (
                    LayerKind::BatchNorm {
                        channels,
                        momentum,
                        epsilon,
                    },
                    shape,
                ) => {
                    let n = batch * shape.len() / channels;
                    let batch_stats = self.bn_uses_batch_stats(spec.group, mode);
                    let mut rm = ps[2].data().to_vec();
                    let mut rv = ps[3].data().to_vec();
                    let (y, xhat, inv_std) = ops::bn_forward_raw(
                        &act,
                        channels,
                        n,
                        ps[0].data(),
                        ps[1].data(),
                        &mut rm,
                        &mut rv,
                        batch_stats,
                        true,
                        momentum,
                        epsilon,
                    );
                    if batch_stats && record {
                        pass.bn_updates.push((i, rm, rv));
                    }
                    (
                        y,
                        Cache::Norm {
                            xhat,
                            inv_std,
                            batch_stats,
                        },
                    )
                }
                (LayerKind::Prelu, shape) => {
                    let (outer, inner) = prelu_layout(shape);
                    let out = ops::prelu_forward_raw(&act, ps[0].data(), outer, batch, inner);
                    (out, Cache::Input(act))
                }
                (LayerKind::MaxPool, FeatureShape::Volume { channels, dims }) => {
                    let (out, argmax) = ops::maxpool_forward_raw(&act, channels * batch, dims);
                    let input_len = act.len();
                    (out, Cache::Pool { argmax, input_len })
                }
                (LayerKind::Flatten, FeatureShape::Volume { channels, dims }) => {
                    (flatten(&act, channels, batch, dims.len()), Cache::Nothing)
                }
                (LayerKind::Dense { inputs, outputs }, _) => {
                    let out = ops::dense_forward_raw(
                        &act,
                        batch,
                        inputs,
                        ps[0].data(),
                        ps[1].data(),
                        outputs,
                    );
                    (out, Cache::Input(act))
                }
                (LayerKind::Dropout { p }, _) if mode == Mode::Train => {
                    let rng = rng
                        .as_deref_mut()
                        .expect("training forward needs a random stream");
                    let mask = ops::dropout_mask::<T, _>(act.len(), p, rng);
                    act.iter_mut().zip(&mask).for_each(|(v, &m)| *v *= m);
                    (act, Cache::Mask(mask))
                }
                _ => (act, Cache::Nothing),
            };
            act = next;
            if record {
                pass.caches.push(cache);
            }
        }
        (act, record.then_some(pass))
    }

    /// Back-propagates `grad` (w.r.t. the output of the last recorded layer) and
    /// accumulates parameter gradients of trainable layers. Propagation stops at
    /// the first layer that has trainable parameters.
    pub(crate) fn backward(&self, pass: &Pass<T>, mut grad: Vec<T>, grads: &mut Gradients<T>) {
        let Some(first) = self.first_trainable_layer() else {
            return;
        };
        let stop = first.max(pass.start);
        let end = pass.start + pass.caches.len();
        let batch = pass.batch;
        for i in (stop..end).rev() {
            let spec = &self.layers[i];
            let ps = &self.params[i];
            let cache = &pass.caches[i - pass.start];
            let need_input = i > stop;
            let trainable = self.is_trainable(spec.group);
            let slots = &mut grads.slots[i];
            grad = match (spec.kind, spec.input, cache) {
                (
                    LayerKind::Conv3d {
                        in_channels,
                        out_channels,
                    },
                    FeatureShape::Volume { dims, .. },
                    Cache::Input(x),
                ) => {
                    let (mut sw, mut sb);
                    let (gw, gb) = match (trainable, slots.as_mut_slice()) {
                        (true, [Some(gw), Some(gb), ..]) => (gw.as_mut_slice(), gb.as_mut_slice()),
                        _ => {
                            sw = vec![T::ZERO; ps[0].len()];
                            sb = vec![T::ZERO; ps[1].len()];
                            (sw.as_mut_slice(), sb.as_mut_slice())
                        }
                    };
                    let gi = ops::conv_backward_raw(
                        x,
                        in_channels,
                        batch,
                        dims,
                        ps[0].data(),
                        out_channels,
                        &grad,
                        gw,
                        gb,
                        need_input,
                    );
                    gi.unwrap_or_default()
                }
                (
                    LayerKind::BatchNorm { channels, .. },
                    shape,
                    Cache::Norm {
                        xhat,
                        inv_std,
                        batch_stats,
                    },
                ) => {
                    let n = batch * shape.len() / channels;
                    let pg = match (trainable, slots.as_mut_slice()) {
                        (true, [Some(gg), Some(gb), ..]) => {
                            Some((gg.as_mut_slice(), gb.as_mut_slice()))
                        }
                        _ => None,
                    };
                    ops::bn_backward_raw(
                        xhat,
                        inv_std,
                        ps[0].data(),
                        &grad,
                        channels,
                        n,
                        *batch_stats,
                        pg,
                    )
                }
                (LayerKind::Prelu, shape, Cache::Input(x)) => {
                    let (outer, inner) = prelu_layout(shape);
                    let gs = match (trainable, slots.as_mut_slice()) {
                        (true, [Some(gs)]) => Some(gs.as_mut_slice()),
                        _ => None,
                    };
                    ops::prelu_backward_raw(x, ps[0].data(), &grad, outer, batch, inner, gs)
                }
                (LayerKind::MaxPool, _, Cache::Pool { argmax, input_len }) => {
                    ops::maxpool_backward_raw(*input_len, argmax, &grad)
                }
                (LayerKind::Flatten, FeatureShape::Volume { channels, dims }, _) => {
                    unflatten(&grad, channels, batch, dims.len())
                }
                (LayerKind::Dense { inputs, outputs }, _, Cache::Input(x)) => {
                    let pg = match (trainable, slots.as_mut_slice()) {
                        (true, [Some(gw), Some(gb)]) => {
                            Some((gw.as_mut_slice(), gb.as_mut_slice()))
                        }
                        _ => None,
                    };
                    ops::dense_backward_raw(
                        x,
                        batch,
                        inputs,
                        ps[0].data(),
                        outputs,
                        &grad,
                        pg,
                        need_input,
                    )
                    .unwrap_or_default()
                }
                (LayerKind::Dropout { .. }, _, Cache::Mask(mask)) => {
                    grad.iter_mut().zip(mask).for_each(|(g, &m)| *g *= m);
                    grad
                }
                _ => grad,
            };
        }
    }

    /// Zeroed gradient buffers for the currently trainable slots.
    pub fn zero_gradients(&self) -> Gradients<T> {
        let slots = self
            .layers
            .iter()
            .zip(&self.params)
            .map(|(spec, ps)| {
                (0..ps.len())
                    .map(|s| {
                        (self.is_trainable(spec.group) && spec.trainable_slots().contains(&s))
                            .then(|| vec![T::ZERO; ps[s].len()])
                    })
                    .collect()
            })
            .collect();
        Gradients { slots }
    }

    pub(crate) fn apply_bn_updates(&mut self, pass: &Pass<T>) {
        for (layer, mean, var) in &pass.bn_updates {
            self.params[*layer][2].data_mut().copy_from_slice(mean);
            self.params[*layer][3].data_mut().copy_from_slice(var);
        }
    }

    fn check_patches(&self, patches: &Tensor<T>) -> Result<usize> {
        let s = patches.shape();
        if s.len() != 5 || s[1..] != patch_shape() {
            return Err(Error::shape(
                "patch batch",
                &[0, CHANNELS, PATCH_SIZE, PATCH_SIZE, PATCH_SIZE],
                s,
            ));
        }
        Ok(s[0])
    }

    /// Two-class logits for a batch in inference mode, `[batch][2]`.
    pub fn logits(&self, patches: &Tensor<T>) -> Result<Vec<T>> {
        let batch = self.check_patches(patches)?;
        Ok(self.infer_from(0, patches.data(), batch, PATCH_LEN))
    }

    /// Inference-mode forward from layer `start` over sample-major inputs of
    /// `sample_len` values each; returns `[batch][2]` logits.
    pub(crate) fn infer_from(
        &self,
        start: usize,
        inputs: &[T],
        batch: usize,
        sample_len: usize,
    ) -> Vec<T> {
        let end = self.layers.len();
        inputs
            .par_chunks(INFER_CHUNK * sample_len)
            .map(|chunk| {
                let n = chunk.len() / sample_len;
                let act = self.to_layer_layout(start, chunk, n);
                self.run(start, end, act, n, Mode::Infer, None, false).0
            })
            .collect::<Vec<_>>()
            .concat()
            .into_iter()
            .take(batch * 2)
            .collect()
    }

    /// Convolutional features `[batch][feature_len]` in inference mode.
    pub fn features(&self, patches: &Tensor<T>) -> Result<Vec<T>> {
        let batch = self.check_patches(patches)?;
        Ok(self.features_raw(patches.data(), batch))
    }

    pub(crate) fn features_raw(&self, patches: &[T], batch: usize) -> Vec<T> {
        debug_assert_eq!(patches.len(), batch * PATCH_LEN);
        let end = self.feature_boundary();
        patches
            .par_chunks(INFER_CHUNK * PATCH_LEN)
            .map(|chunk| {
                let n = chunk.len() / PATCH_LEN;
                let act = self.to_layer_layout(0, chunk, n);
                self.run(0, end, act, n, Mode::Infer, None, false).0
            })
            .collect::<Vec<_>>()
            .concat()
    }

    /// Lesion-class probability per patch.
    pub fn predict(&self, patches: &Tensor<T>) -> Result<Vec<T>> {
        Ok(lesion_probabilities(&self.logits(patches)?))
    }

    /// `[p_background, p_lesion]` per patch.
    pub fn predict_proba(&self, patches: &Tensor<T>) -> Result<Vec<[T; 2]>> {
        Ok(self
            .logits(patches)?
            .chunks_exact(2)
            .map(|l| softmax2(l[0], l[1]))
            .collect())
    }

    /// Converts sample-major inputs into the layout expected by layer `start`.
    pub(crate) fn to_layer_layout(&self, start: usize, samples: &[T], batch: usize) -> Vec<T> {
        match self.layers[start].input {
            FeatureShape::Volume { channels, dims } => {
                let s = dims.len();
                let mut out = vec![T::ZERO; samples.len()];
                for b in 0..batch {
                    for c in 0..channels {
                        out[(c * batch + b) * s..][..s]
                            .copy_from_slice(&samples[(b * channels + c) * s..][..s]);
                    }
                }
                out
            }
            FeatureShape::Flat(_) => samples.to_vec(),
        }
    }

    /// Mean cross-entropy and gradients for labelled patches in training mode.
    /// Dropout masks are drawn from a stream seeded with `dropout_seed`.
    pub fn loss_and_gradients(
        &self,
        patches: &Tensor<T>,
        labels: &[u8],
        dropout_seed: u64,
    ) -> Result<(T, Gradients<T>)> {
        let batch = self.check_patches(patches)?;
        if labels.len() != batch {
            return Err(Error::shape("labels", &[batch], &[labels.len()]));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
        let act = self.to_layer_layout(0, patches.data(), batch);
        let (logits, pass) = self.run(
            0,
            self.layers.len(),
            act,
            batch,
            Mode::Train,
            Some(&mut rng),
            true,
        );
        let logits = Tensor::from_vec(&[batch, 2], logits)?;
        let (loss, grad) = ops::softmax_crossentropy(&logits, &ops::one_hot_labels(labels))?;
        let mut grads = self.zero_gradients();
        self.backward(&pass.expect("recorded"), grad.into_data(), &mut grads);
        Ok((loss, grads))
    }

    /// Training-mode loss only, with the same dropout stream as [`Self::loss_and_gradients`].
    pub fn training_loss(
        &self,
        patches: &Tensor<T>,
        labels: &[u8],
        dropout_seed: u64,
    ) -> Result<T> {
        let batch = self.check_patches(patches)?;
        let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
        let act = self.to_layer_layout(0, patches.data(), batch);
        let (logits, _) = self.run(
            0,
            self.layers.len(),
            act,
            batch,
            Mode::Train,
            Some(&mut rng),
            false,
        );
        let logits = Tensor::from_vec(&[batch, 2], logits)?;
        Ok(ops::softmax_crossentropy(&logits, &ops::one_hot_labels(labels))?.0)
    }

    /// Element-wise conversion to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            layers: self.layers.clone(),
            params: self
                .params
                .iter()
                .map(|ps| ps.iter().map(Tensor::cast).collect())
                .collect(),
            trainable: self.trainable,
            frozen_bn_batch_stats: self.frozen_bn_batch_stats,
            seed: self.seed,
        }
    }
}

fn prelu_layout(shape: FeatureShape) -> (usize, usize) {
    match shape {
        FeatureShape::Volume { channels, dims } => (channels, dims.len()),
        FeatureShape::Flat(n) => (1, n),
    }
}

/// `[c][batch][s] -> [batch][c * s]`
fn flatten<T: Scalar>(x: &[T], c: usize, batch: usize, s: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; x.len()];
    for ch in 0..c {
        for b in 0..batch {
            out[(b * c + ch) * s..][..s].copy_from_slice(&x[(ch * batch + b) * s..][..s]);
        }
    }
    out
}

fn unflatten<T: Scalar>(x: &[T], c: usize, batch: usize, s: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; x.len()];
    for ch in 0..c {
        for b in 0..batch {
            out[(ch * batch + b) * s..][..s].copy_from_slice(&x[(b * c + ch) * s..][..s]);
        }
    }
    out
}

pub(crate) fn softmax2<T: Scalar>(l0: T, l1: T) -> [T; 2] {
    let m = if l0 > l1 { l0 } else { l1 };
    let (e0, e1) = ((l0 - m).exp(), (l1 - m).exp());
    let z = e0 + e1;
    [e0 / z, e1 / z]
}

pub(crate) fn lesion_probabilities<T: Scalar>(logits: &[T]) -> Vec<T> {
    logits
        .chunks_exact(2)
        .map(|l| softmax2(l[0], l[1])[1])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_counts_reproduce_the_parameter_table() {
        let m = Model::<f32>::canonical(3);
        assert_eq!(m.count_params(None).total, 470_466);
        assert_eq!(m.count_params(Some(FreezeMode::Fc3)).trainable_table, 8_320);
        assert_eq!(
            m.count_params(Some(FreezeMode::Fc2Fc3)).trainable_table,
            41_344
        );
        assert_eq!(
            m.count_params(Some(FreezeMode::Fc1Fc2Fc3)).trainable_table,
            172_928
        );
        assert_eq!(m.feature_len(), 512);
    }

    #[test]
    fn count_identity_by_component() {
        let m = Model::<f32>::canonical(0);
        let mut by_kind = std::collections::HashMap::new();
        for (i, spec) in m.layers().iter().enumerate() {
            let key = match (spec.kind, spec.group) {
                (LayerKind::Conv3d { .. }, _) => "conv",
                (LayerKind::BatchNorm { .. }, _) => "bn",
                (LayerKind::Prelu, Group::Conv) => "conv_prelu",
                (_, Group::Out) => "out",
                _ => "fc",
            };
            *by_kind.entry(key).or_insert(0) += m.layer_param_count(i);
        }
        assert_eq!(by_kind["conv"], 195_456);
        assert_eq!(by_kind["bn"], 768);
        assert_eq!(by_kind["conv_prelu"], 101_184);
        assert_eq!(by_kind["fc"], 172_928);
        assert_eq!(by_kind["out"], 130);
    }

    #[test]
    fn same_seed_same_weights() {
        assert_eq!(Model::<f32>::canonical(9), Model::<f32>::canonical(9));
        assert_ne!(Model::<f32>::canonical(9), Model::<f32>::canonical(10));
    }

    #[test]
    fn freeze_flags() {
        let mut m = Model::<f32>::canonical(1);
        m.set_trainable(&FreezeConfig::new(FreezeMode::Fc3));
        let flags: Vec<bool> = Group::ALL.iter().map(|&g| m.is_trainable(g)).collect();
        assert_eq!(flags, vec![false, false, false, true, true]);
        assert_eq!(
            m.count_params(Some(FreezeMode::Fc3)).trainable_actual,
            8_320 + 130
        );
        assert!(m.conv_stage_is_static());
        m.set_trainable(&FreezeConfig::new(FreezeMode::None));
        assert!(Group::ALL.iter().all(|&g| m.is_trainable(g)));
    }

    #[test]
    fn flatten_round_trip() {
        let x: Vec<f64> = (0..24).map(f64::from).collect();
        assert_eq!(unflatten(&flatten(&x, 2, 3, 4), 2, 3, 4), x);
        // sample 1, channel 1, voxel 2
        assert_eq!(
            flatten(&x, 2, 3, 4)[(1 * 2 + 1) * 4 + 2],
            x[(1 * 3 + 1) * 4 + 2]
        );
    }
}
