//! The occlusion-edge network: three conv → ReLU → 2×2 max-pool stages
//! followed by a fully connected softmax layer.
//!
//! Training is a serialized sequence of [`CnnModel::forward`],
//! [`CnnModel::backward`] and [`CnnModel::sgd_step`]. Per-example work in a
//! batch runs in parallel and is combined in example-index order, so results
//! are bitwise identical for any thread count.

mod io;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use thiserror::Error;

use crate::tensor::{
    self, conv_backward_single, conv_forward_single, matmul, pool_backward_single, pool_forward_single, ConvSpec,
    Real, Tensor, TensorError,
};

pub use io::{load_model, save_model, FORMAT_VERSION, MAGIC};

pub const LAYER_NAMES: [&str; 4] = ["conv1", "conv2", "conv3", "fc"];

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("unsupported channel count {0} (expected 3 or 4)")]
    UnsupportedChannels(usize),
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
    #[error("invalid init schedule: {0}")]
    InvalidInit(String),
    #[error("batch shape {actual:?} does not match expected N×{expected:?}")]
    BatchShape { expected: Vec<usize>, actual: Vec<usize> },
    #[error("backward called without a preceding forward")]
    BackwardWithoutForward,
    #[error("got {actual} labels for a batch of {expected}")]
    LabelCount { expected: usize, actual: usize },
    #[error("{name} gradient has shape {actual:?}, parameter has {expected:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("not a model file (bad magic bytes)")]
    BadMagic,
    #[error("model format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("model file is truncated")]
    Truncated,
    #[error("malformed model file: {0}")]
    Malformed(String),
    #[error("model file not found: {0}")]
    NotFound(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Layer sizes of the network. [`Architecture::paper`] is the default
/// 32×32 input, 32-32-64 filter configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Architecture {
    pub channels: usize,
    pub input_size: usize,
    pub filters: [usize; 3],
    pub kernel: usize,
    pub padding: usize,
    pub classes: usize,
}

impl Architecture {
    pub fn paper(channels: usize) -> Self {
        Self {
            channels,
            input_size: 32,
            filters: [32, 32, 64],
            kernel: 5,
            padding: 2,
            classes: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.channels == 3 || self.channels == 4) {
            return Err(ModelError::UnsupportedChannels(self.channels));
        }
        if self.input_size == 0 || !self.input_size.is_multiple_of(8) {
            return Err(ModelError::InvalidArchitecture(format!(
                "input size {} must be a positive multiple of 8",
                self.input_size
            )));
        }
        if self.filters.contains(&0) || self.classes < 2 || self.kernel == 0 {
            return Err(ModelError::InvalidArchitecture(format!("{self:?}")));
        }
        let mut size = self.input_size;
        for spec in self.conv_specs() {
            let out = spec.output_extent(size)?;
            if out != size {
                return Err(ModelError::InvalidArchitecture(format!(
                    "kernel {} with padding {} does not preserve spatial size",
                    self.kernel, self.padding
                )));
            }
            size /= 2;
        }
        Ok(())
    }

    pub fn conv_specs(&self) -> [ConvSpec; 3] {
        let ins = [self.channels, self.filters[0], self.filters[1]];
        std::array::from_fn(|l| ConvSpec::new(ins[l], self.filters[l], self.kernel, 1, self.padding))
    }

    /// Length of the flattened activation entering the output layer.
    pub fn fc_inputs(&self) -> usize {
        let side = self.input_size / 8;
        self.filters[2] * side * side
    }

    pub fn example_len(&self) -> usize {
        self.channels * self.input_size * self.input_size
    }

    pub fn param_shapes(&self) -> [(Vec<usize>, Vec<usize>); 4] {
        let specs = self.conv_specs();
        let mut out: [(Vec<usize>, Vec<usize>); 4] = Default::default();
        for (l, spec) in specs.iter().enumerate() {
            out[l] = (spec.weight_shape().to_vec(), vec![spec.out_channels]);
        }
        out[3] = (vec![self.classes, self.fc_inputs()], vec![self.classes]);
        out
    }
}

/// Zero-mean Gaussian weight initialization per layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitSchedule {
    pub conv_stds: [f64; 3],
    pub output_std: f64,
    pub bias_init: f64,
}

impl Default for InitSchedule {
    fn default() -> Self {
        Self {
            conv_stds: [0.0001, 0.01, 0.01],
            output_std: 0.3,
            bias_init: 0.0,
        }
    }
}

impl InitSchedule {
    fn validate(&self) -> Result<()> {
        let ok = self
            .conv_stds
            .iter()
            .chain(std::iter::once(&self.output_std))
            .all(|s| s.is_finite() && *s > 0.0);
        if !ok || !self.bias_init.is_finite() {
            return Err(ModelError::InvalidInit(format!("{self:?}")));
        }
        Ok(())
    }
}

/// L2 weight decay added to the data gradient of every weight tensor.
/// Biases are never decayed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Regularization {
    pub l2: f64,
    pub l2_on_output: bool,
}

impl Regularization {
    pub const NONE: Self = Self {
        l2: 0.0,
        l2_on_output: false,
    };
}

impl Default for Regularization {
    fn default() -> Self {
        Self {
            l2: 0.001,
            l2_on_output: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T: Real = f32> {
    pub weights: Tensor<T>,
    pub biases: Tensor<T>,
}

/// One tensor pair per layer, in [`LAYER_NAMES`] order. Used for the
/// parameters themselves, their gradients and the momentum buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T: Real = f32> {
    pub layers: [LayerParams<T>; 4],
}

impl<T: Real> Params<T> {
    fn zeros(arch: &Architecture) -> Result<Self> {
        let shapes = arch.param_shapes();
        let mut layers = Vec::with_capacity(4);
        for (w, b) in &shapes {
            layers.push(LayerParams {
                weights: Tensor::zeros(w)?,
                biases: Tensor::zeros(b)?,
            });
        }
        Ok(Self {
            layers: layers.try_into().expect("four layers"),
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: std::array::from_fn(|l| LayerParams {
                weights: self.layers[l].weights.zeros_like(),
                biases: self.layers[l].biases.zeros_like(),
            }),
        }
    }

    /// `(name, tensor)` pairs in canonical order, weights before biases.
    pub fn named(&self) -> impl Iterator<Item = (String, &Tensor<T>)> {
        self.layers.iter().zip(LAYER_NAMES).flat_map(|(p, name)| {
            [(format!("{name}.weight"), &p.weights), (format!("{name}.bias"), &p.biases)]
        })
    }

    fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.layers
            .iter_mut()
            .flat_map(|p| [&mut p.weights, &mut p.biases])
    }

    pub fn num_values(&self) -> usize {
        self.named().map(|(_, t)| t.len()).sum()
    }

    fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors_mut().zip(other.named()) {
            for (x, &y) in a.data_mut().iter_mut().zip(b.1.data()) {
                *x += y;
            }
        }
    }

    fn scale(&mut self, factor: T) {
        for t in self.tensors_mut() {
            for x in t.data_mut() {
                *x *= factor;
            }
        }
    }

    pub fn cast<U: Real>(&self) -> Params<U> {
        Params {
            layers: std::array::from_fn(|l| LayerParams {
                weights: self.layers[l].weights.cast(),
                biases: self.layers[l].biases.cast(),
            }),
        }
    }

    fn check_congruent(&self, other: &Self) -> Result<()> {
        for ((name, a), (_, b)) in self.named().zip(other.named()) {
            if a.shape() != b.shape() {
                return Err(ModelError::ParamShape {
                    name,
                    expected: a.shape().to_vec(),
                    actual: b.shape().to_vec(),
                });
            }
        }
        Ok(())
    }
}

/// Activations of one example kept for the backward pass.
#[derive(Debug, Clone)]
struct ExampleCache<T: Real> {
    input: Vec<T>,
    activations: [Vec<T>; 3],
    masks: [Vec<u32>; 3],
    pooled: [Vec<T>; 3],
    logits: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct CnnModel<T: Real = f32> {
    arch: Architecture,
    params: Params<T>,
    velocity: Params<T>,
    cache: Option<Vec<ExampleCache<T>>>,
}

impl<T: Real> PartialEq for CnnModel<T> {
    fn eq(&self, other: &Self) -> bool {
        self.arch == other.arch && self.params == other.params && self.velocity == other.velocity
    }
}

/// Paper-configuration model for 3 (RGB) or 4 (RGB-D) input channels.
pub fn init_model(channels: usize, schedule: &InitSchedule, seed: u64) -> Result<CnnModel<f32>> {
    CnnModel::init(Architecture::paper(channels), schedule, seed)
}

impl<T: Real> CnnModel<T> {
    /// Gaussian weights drawn layer by layer from a seeded ChaCha stream,
    /// constant biases, zero momentum.
    pub fn init(arch: Architecture, schedule: &InitSchedule, seed: u64) -> Result<Self> {
        arch.validate()?;
        schedule.validate()?;
        let mut params = Params::zeros(&arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stds = [
            schedule.conv_stds[0],
            schedule.conv_stds[1],
            schedule.conv_stds[2],
            schedule.output_std,
        ];
        let bias = T::from_f64_lossy(schedule.bias_init);
        for (layer, std) in params.layers.iter_mut().zip(stds) {
            let normal = Normal::new(0.0, std).map_err(|e| ModelError::InvalidInit(e.to_string()))?;
            for w in layer.weights.data_mut() {
                *w = T::from_f64_lossy(normal.sample(&mut rng));
            }
            layer.biases.data_mut().fill(bias);
        }
        Self::from_params(arch, params)
    }

    /// Wraps existing parameters with zeroed momentum buffers.
    pub fn from_params(arch: Architecture, params: Params<T>) -> Result<Self> {
        arch.validate()?;
        let velocity = Params::zeros(&arch)?;
        velocity.check_congruent(&params)?;
        Ok(Self {
            arch,
            params,
            velocity,
            cache: None,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn channels(&self) -> usize {
        self.arch.channels
    }

    pub fn params(&self) -> &Params<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params<T> {
        &mut self.params
    }

    pub fn velocity(&self) -> &Params<T> {
        &self.velocity
    }

    pub(crate) fn set_velocity(&mut self, velocity: Params<T>) -> Result<()> {
        self.params.check_congruent(&velocity)?;
        self.velocity = velocity;
        Ok(())
    }

    /// Converts to another element type, keeping momentum buffers.
    pub fn cast<U: Real>(&self) -> CnnModel<U> {
        CnnModel {
            arch: self.arch,
            params: self.params.cast(),
            velocity: self.velocity.cast(),
            cache: None,
        }
    }

    fn batch_size(&self, batch: &Tensor<T>) -> Result<usize> {
        let a = &self.arch;
        let want = [a.channels, a.input_size, a.input_size];
        match batch.shape() {
            [n, rest @ ..] if rest == want => Ok(*n),
            other => Err(ModelError::BatchShape {
                expected: want.to_vec(),
                actual: other.to_vec(),
            }),
        }
    }

    fn example_forward(&self, x: &[T]) -> Result<ExampleCache<T>> {
        let specs = self.arch.conv_specs();
        let mut size = self.arch.input_size;
        let mut col = Vec::new();
        let mut activations: [Vec<T>; 3] = Default::default();
        let mut masks: [Vec<u32>; 3] = Default::default();
        let mut pooled: [Vec<T>; 3] = Default::default();
        for (l, spec) in specs.iter().enumerate() {
            let input = if l == 0 { x } else { &pooled[l - 1] };
            let mut act = vec![T::zero(); spec.out_channels * size * size];
            let layer = &self.params.layers[l];
            conv_forward_single(input, size, size, layer.weights.data(), layer.biases.data(), spec, &mut act, &mut col);
            tensor::all_finite(&act, LAYER_NAMES[l])?;
            for v in &mut act {
                *v = v.max(T::zero());
            }
            let half = size / 2;
            let mut out = vec![T::zero(); spec.out_channels * half * half];
            let mut mask = vec![0u32; out.len()];
            pool_forward_single(&act, spec.out_channels, size, size, &mut out, &mut mask);
            activations[l] = act;
            masks[l] = mask;
            pooled[l] = out;
            size = half;
        }
        let fc = &self.params.layers[3];
        let mut logits = fc.biases.data().to_vec();
        matmul(1, self.arch.fc_inputs(), self.arch.classes, &pooled[2], false, fc.weights.data(), true, &mut logits, true);
        tensor::all_finite(&logits, "fc")?;
        Ok(ExampleCache {
            input: x.to_vec(),
            activations,
            masks,
            pooled,
            logits,
        })
    }

    /// Gradients of one example's loss given `d loss / d logits`.
    fn example_backward(&self, cache: &ExampleCache<T>, grad_logits: &[T]) -> Params<T> {
        let mut grads = self.params.zeros_like();
        let specs = self.arch.conv_specs();
        let fc_in = self.arch.fc_inputs();
        let classes = self.arch.classes;
        let fc = &self.params.layers[3];
        matmul(classes, 1, fc_in, grad_logits, false, &cache.pooled[2], false, grads.layers[3].weights.data_mut(), false);
        grads.layers[3].biases.data_mut().copy_from_slice(grad_logits);
        let mut grad_pooled = vec![T::zero(); fc_in];
        matmul(1, classes, fc_in, grad_logits, false, fc.weights.data(), false, &mut grad_pooled, false);

        let mut col = Vec::new();
        let mut size = self.arch.input_size >> 2;
        for l in (0..3).rev() {
            let spec = &specs[l];
            let act = &cache.activations[l];
            let mut grad_act = vec![T::zero(); act.len()];
            pool_backward_single(&cache.masks[l], &grad_pooled, &mut grad_act);
            for (g, &a) in grad_act.iter_mut().zip(act) {
                if a <= T::zero() {
                    *g = T::zero();
                }
            }
            let input: &[T] = if l == 0 { &cache.input } else { &cache.pooled[l - 1] };
            let mut grad_input = if l > 0 { vec![T::zero(); input.len()] } else { Vec::new() };
            let LayerParams { weights, biases } = &mut grads.layers[l];
            conv_backward_single(
                input,
                size,
                size,
                self.params.layers[l].weights.data(),
                &grad_act,
                spec,
                (l > 0).then_some(grad_input.as_mut_slice()),
                weights.data_mut(),
                biases.data_mut(),
                &mut col,
            );
            grad_pooled = grad_input;
            size *= 2;
        }
        grads
    }

    fn run_examples(&self, batch: &Tensor<T>) -> Result<Vec<ExampleCache<T>>> {
        let n = self.batch_size(batch)?;
        let len = self.arch.example_len();
        (0..n)
            .into_par_iter()
            .map(|i| self.example_forward(&batch.data()[i * len..(i + 1) * len]))
            .collect()
    }

    /// N×C×S×S batch → N×classes logits. Activations are retained for
    /// [`CnnModel::backward`].
    pub fn forward(&mut self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let caches = self.run_examples(batch)?;
        let logits = Self::stack_logits(&caches, self.arch.classes)?;
        self.cache = Some(caches);
        Ok(logits)
    }

    /// Read-only forward pass; safe to call from many threads at once.
    pub fn predict(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let caches = self.run_examples(batch)?;
        Self::stack_logits(&caches, self.arch.classes)
    }

    /// Logits for one flattened C×S×S example.
    pub fn predict_example(&self, example: &[T]) -> Result<Vec<T>> {
        if example.len() != self.arch.example_len() {
            return Err(ModelError::BatchShape {
                expected: vec![self.arch.channels, self.arch.input_size, self.arch.input_size],
                actual: vec![example.len()],
            });
        }
        Ok(self.example_forward(example)?.logits)
    }

    /// Shapes (channels, height, width) after every conv and pool stage,
    /// followed by the logit count, for one example.
    pub fn activation_shapes(&self, example: &Tensor<T>) -> Result<Vec<Vec<usize>>> {
        let batch = example.clone().reshape(&[1, self.arch.channels, self.arch.input_size, self.arch.input_size]);
        let batch = batch.map_err(|_| ModelError::BatchShape {
            expected: vec![self.arch.channels, self.arch.input_size, self.arch.input_size],
            actual: example.shape().to_vec(),
        })?;
        self.batch_size(&batch)?;
        let cache = self.example_forward(batch.data())?;
        let mut shapes = Vec::new();
        let mut size = self.arch.input_size;
        for l in 0..3 {
            let c = self.arch.filters[l];
            assert_eq!(cache.activations[l].len(), c * size * size);
            shapes.push(vec![c, size, size]);
            size /= 2;
            assert_eq!(cache.pooled[l].len(), c * size * size);
            shapes.push(vec![c, size, size]);
        }
        shapes.push(vec![cache.logits.len()]);
        Ok(shapes)
    }

    fn stack_logits(caches: &[ExampleCache<T>], classes: usize) -> Result<Tensor<T>> {
        let data: Vec<T> = caches.iter().flat_map(|c| c.logits.iter().copied()).collect();
        Ok(Tensor::new(&[caches.len(), classes], data)?)
    }

    /// Mean cross-entropy of the last forward batch and its gradient, plus
    /// `l2·w` on weight tensors. The returned loss excludes the L2 term.
    pub fn backward(&mut self, labels: &[usize], reg: &Regularization) -> Result<(T, Params<T>)> {
        let caches = self.cache.take().ok_or(ModelError::BackwardWithoutForward)?;
        if labels.len() != caches.len() {
            return Err(ModelError::LabelCount {
                expected: caches.len(),
                actual: labels.len(),
            });
        }
        let per_example: Vec<(T, Params<T>)> = caches
            .par_iter()
            .zip(labels.par_iter())
            .map(|(cache, &label)| {
                let logits = Tensor::new(&[cache.logits.len()], cache.logits.clone())?;
                let xent = tensor::softmax_xent(&logits, label)?;
                Ok((xent.loss, self.example_backward(cache, xent.grad_logits.data())))
            })
            .collect::<Result<_>>()?;
        let n = T::from_usize(labels.len()).expect("batch size fits");
        let mut total = T::zero();
        let mut grads = self.params.zeros_like();
        for (loss, g) in &per_example {
            total += *loss;
            grads.add_assign(g);
        }
        grads.scale(T::one() / n);
        self.add_weight_decay(&mut grads, reg);
        Ok((total / n, grads))
    }

    fn add_weight_decay(&self, grads: &mut Params<T>, reg: &Regularization) {
        if reg.l2 == 0.0 {
            return;
        }
        let l2 = T::from_f64_lossy(reg.l2);
        let decayed = if reg.l2_on_output { 4 } else { 3 };
        for l in 0..decayed {
            let w = self.params.layers[l].weights.data();
            for (g, &w) in grads.layers[l].weights.data_mut().iter_mut().zip(w) {
                *g += l2 * w;
            }
        }
    }

    /// Momentum update `v ← momentum·v − lr·grad`, `w ← w + v` on every
    /// parameter tensor.
    pub fn sgd_step(&mut self, grads: &Params<T>, lr: f64, momentum: f64) -> Result<()> {
        self.params.check_congruent(grads)?;
        let lr = T::from_f64_lossy(lr);
        let momentum = T::from_f64_lossy(momentum);
        for ((p, v), (_, g)) in self
            .params
            .tensors_mut()
            .zip(self.velocity.tensors_mut())
            .zip(grads.named())
        {
            for ((w, v), &g) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *v = momentum * *v - lr * g;
                *w += *v;
            }
        }
        Ok(())
    }
}
