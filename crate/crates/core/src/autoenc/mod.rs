//! Convolutional denoising autoencoder.
//!
//! Encoder: two 10-channel convolutions with ReLU, then a dense map to an
//! 8-dimensional latent vector. Decoder: dense map back to the feature grid,
//! ReLU, two transposed convolutions (ReLU between them, linear output).
//!
//! Kernel size 1 runs every layer at stride 1; larger kernels use stride 2
//! per layer (100 → 50 → 25 and back).

mod layers;
mod train;

pub use train::{train, Adam, EpochRecord, TrainingHistory};

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use layers::ConvGeom;

pub const SUPPORTED_KERNELS: [usize; 5] = [1, 3, 7, 11, 17];
pub const CHANNELS: usize = 10;
pub const LATENT_DIM: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kernel_size: usize,
    pub channels: usize,
    pub latent_dim: usize,
    pub input_side: usize,
    pub seed: u64,
    pub learning_rate: f64,
    pub lr_decay_per_epoch: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kernel_size: 1,
            channels: CHANNELS,
            latent_dim: LATENT_DIM,
            input_side: crate::prep::INPUT_SIDE,
            seed: 0,
            learning_rate: 1e-4,
            lr_decay_per_epoch: 0.9995,
            batch_size: 8,
            max_epochs: 50,
            early_stop_patience: 5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !SUPPORTED_KERNELS.contains(&self.kernel_size) {
            return Err(Error::invalid(format!(
                "kernel size {} not supported (expected one of {SUPPORTED_KERNELS:?})",
                self.kernel_size
            )));
        }
        if self.channels != CHANNELS || self.latent_dim != LATENT_DIM {
            return Err(Error::invalid("the architecture is fixed at 10 channels and an 8-dim latent"));
        }
        let s = self.stride();
        if self.input_side < 4 || self.input_side % (s * s) != 0 {
            return Err(Error::invalid(format!(
                "input side {} must be >= 4 and divisible by {}",
                self.input_side,
                s * s
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be >= 1"));
        }
        if !(self.learning_rate >= 0.0) || !(self.lr_decay_per_epoch > 0.0) {
            return Err(Error::invalid("learning rate must be >= 0 and decay > 0"));
        }
        Ok(())
    }

    /// Spatial stride of every (transposed) convolution.
    pub fn stride(&self) -> usize {
        if self.kernel_size == 1 {
            1
        } else {
            2
        }
    }

    fn pad(&self) -> usize {
        (self.kernel_size - 1) / 2
    }

    pub fn mid_side(&self) -> usize {
        self.input_side / self.stride()
    }

    /// Side of the feature grid flattened into the dense layers.
    pub fn feature_side(&self) -> usize {
        self.mid_side() / self.stride()
    }

    pub fn feature_len(&self) -> usize {
        self.channels * self.feature_side() * self.feature_side()
    }

    fn outer(&self, in_c: usize, out_c: usize) -> ConvGeom {
        ConvGeom {
            in_c,
            out_c,
            kernel: self.kernel_size,
            stride: self.stride(),
            pad: self.pad(),
            small: self.mid_side(),
            big: self.input_side,
        }
    }

    fn inner(&self) -> ConvGeom {
        ConvGeom {
            in_c: self.channels,
            out_c: self.channels,
            kernel: self.kernel_size,
            stride: self.stride(),
            pad: self.pad(),
            small: self.feature_side(),
            big: self.mid_side(),
        }
    }
}

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    fn uniform<R: Rng>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(|_| rng.random_range(-bound..=bound)).collect(),
        }
    }
}

/// Names of the parameter tensors, in storage order.
pub const TENSOR_NAMES: [&str; 12] = [
    "conv1.weight",
    "conv1.bias",
    "conv2.weight",
    "conv2.bias",
    "enc_dense.weight",
    "enc_dense.bias",
    "dec_dense.weight",
    "dec_dense.bias",
    "deconv1.weight",
    "deconv1.bias",
    "deconv2.weight",
    "deconv2.bias",
];

/// All learnable parameters. Also used as a gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    tensors: Vec<Tensor>,
}

const CONV1_W: usize = 0;
const CONV1_B: usize = 1;
const CONV2_W: usize = 2;
const CONV2_B: usize = 3;
const ENC_W: usize = 4;
const ENC_B: usize = 5;
const DEC_W: usize = 6;
const DEC_B: usize = 7;
const DECONV1_W: usize = 8;
const DECONV1_B: usize = 9;
const DECONV2_W: usize = 10;
const DECONV2_B: usize = 11;

impl ModelWeights {
    /// Shapes of every tensor, in [`TENSOR_NAMES`] order.
    pub fn shapes(cfg: &ModelConfig) -> Vec<Vec<usize>> {
        let (c, k, l, f) = (cfg.channels, cfg.kernel_size, cfg.latent_dim, cfg.feature_len());
        vec![
            vec![c, 1, k, k],
            vec![c],
            vec![c, c, k, k],
            vec![c],
            vec![l, f],
            vec![l],
            vec![f, l],
            vec![f],
            vec![c, c, k, k],
            vec![c],
            vec![c, 1, k, k],
            vec![1],
        ]
    }

    /// Fan-in of each tensor's layer, used for initialization.
    fn fan_ins(cfg: &ModelConfig) -> [usize; 12] {
        let kk = cfg.kernel_size * cfg.kernel_size;
        let c = cfg.channels;
        let conv1 = kk;
        let conv2 = c * kk;
        let enc = cfg.feature_len();
        let dec = cfg.latent_dim;
        [conv1, conv1, conv2, conv2, enc, enc, dec, dec, conv2, conv2, conv2, conv2]
    }

    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            config: cfg.clone(),
            tensors: Self::shapes(cfg).iter().map(|s| Tensor::zeros(s)).collect(),
        })
    }

    /// Uniform `±√(1/fan_in)` initialization from `cfg.seed`.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let fan = Self::fan_ins(cfg);
        let tensors = Self::shapes(cfg)
            .iter()
            .zip(fan)
            .map(|(s, f)| Tensor::uniform(s, (1.0 / f as f64).sqrt(), &mut rng))
            .collect();
        Ok(Self {
            config: cfg.clone(),
            tensors,
        })
    }

    /// Assembles weights from named tensors, checking every shape.
    pub fn from_tensors(cfg: ModelConfig, tensors: Vec<Tensor>) -> Result<Self> {
        cfg.validate()?;
        let shapes = Self::shapes(&cfg);
        if tensors.len() != shapes.len() {
            return Err(Error::invalid(format!(
                "expected {} tensors, got {}",
                shapes.len(),
                tensors.len()
            )));
        }
        for ((t, s), name) in tensors.iter().zip(&shapes).zip(TENSOR_NAMES) {
            if &t.shape != s || t.data.len() != s.iter().product::<usize>() {
                return Err(Error::invalid(format!(
                    "{name}: expected shape {s:?}, got {:?}",
                    t.shape
                )));
            }
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("{name} contains non-finite values")));
            }
        }
        Ok(Self { config: cfg, tensors })
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn named(&self) -> impl Iterator<Item = (&'static str, &Tensor)> {
        TENSOR_NAMES.iter().copied().zip(self.tensors.iter())
    }

    pub fn n_params(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub(crate) fn zero_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            tensors: self.tensors.iter().map(|t| Tensor::zeros(&t.shape)).collect(),
        }
    }

    /// Short content hash identifying this exact set of weights.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.config.kernel_size.to_le_bytes());
        h.update(self.config.input_side.to_le_bytes());
        for t in &self.tensors {
            for v in &t.data {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize()
            .iter()
            .take(8)
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    fn w(&self, i: usize) -> &[f64] {
        &self.tensors[i].data
    }
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct Trace {
    input: Vec<f64>,
    a1: Vec<f64>,
    h1: Vec<f64>,
    a2: Vec<f64>,
    h2: Vec<f64>,
    pub(crate) latent: Vec<f64>,
    d: Vec<f64>,
    g0: Vec<f64>,
    a3: Vec<f64>,
    g1: Vec<f64>,
    pub(crate) output: Vec<f64>,
}

impl Trace {
    /// Signs of every ReLU pre-activation, for detecting kinks in tests.
    #[cfg(test)]
    pub(crate) fn activation_signs(&self) -> Vec<bool> {
        self.a1
            .iter()
            .chain(&self.a2)
            .chain(&self.d)
            .chain(&self.a3)
            .map(|v| *v > 0.0)
            .collect()
    }
}

fn encode_flat(input: &[f64], w: &ModelWeights) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let cfg = &w.config;
    let g1 = cfg.outer(1, cfg.channels);
    let a1 = layers::conv_forward(&g1, input, w.w(CONV1_W), w.w(CONV1_B));
    let h1 = layers::relu(&a1);
    let a2 = layers::conv_forward(&cfg.inner(), &h1, w.w(CONV2_W), w.w(CONV2_B));
    let h2 = layers::relu(&a2);
    let z = layers::dense_forward(&h2, w.w(ENC_W), w.w(ENC_B));
    (a1, h1, a2, h2, z)
}

fn decode_flat(z: &[f64], w: &ModelWeights) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let cfg = &w.config;
    let d = layers::dense_forward(z, w.w(DEC_W), w.w(DEC_B));
    let g0 = layers::relu(&d);
    let a3 = layers::deconv_forward(&cfg.inner(), &g0, w.w(DECONV1_W), w.w(DECONV1_B));
    let g1 = layers::relu(&a3);
    let y = layers::deconv_forward(&cfg.outer(cfg.channels, 1), &g1, w.w(DECONV2_W), w.w(DECONV2_B));
    (d, g0, a3, g1, y)
}

pub(crate) fn forward_trace(input: &[f64], w: &ModelWeights) -> Trace {
    let (a1, h1, a2, h2, latent) = encode_flat(input, w);
    let (d, g0, a3, g1, output) = decode_flat(&latent, w);
    Trace {
        input: input.to_vec(),
        a1,
        h1,
        a2,
        h2,
        latent,
        d,
        g0,
        a3,
        g1,
        output,
    }
}

/// Accumulates parameter gradients for `d_output = ∂loss/∂output`.
pub(crate) fn backward(trace: &Trace, d_output: &[f64], w: &ModelWeights, grad: &mut ModelWeights) {
    let cfg = &w.config;
    let outer_out = cfg.outer(cfg.channels, 1);
    let inner = cfg.inner();
    let g = &mut grad.tensors;

    let (lo, hi) = g.split_at_mut(DECONV2_B);
    let mut d_g1 = layers::deconv_backward(
        &outer_out,
        &trace.g1,
        w.w(DECONV2_W),
        d_output,
        &mut lo[DECONV2_W].data,
        &mut hi[0].data,
    );
    layers::relu_backward(&trace.a3, &mut d_g1);

    let (lo, hi) = g.split_at_mut(DECONV1_B);
    let mut d_g0 = layers::deconv_backward(
        &inner,
        &trace.g0,
        w.w(DECONV1_W),
        &d_g1,
        &mut lo[DECONV1_W].data,
        &mut hi[0].data,
    );
    layers::relu_backward(&trace.d, &mut d_g0);

    let (lo, hi) = g.split_at_mut(DEC_B);
    let d_z = layers::dense_backward(
        &trace.latent,
        w.w(DEC_W),
        &d_g0,
        &mut lo[DEC_W].data,
        &mut hi[0].data,
        true,
    )
    .expect("input gradient requested");

    let (lo, hi) = g.split_at_mut(ENC_B);
    let mut d_h2 = layers::dense_backward(
        &trace.h2,
        w.w(ENC_W),
        &d_z,
        &mut lo[ENC_W].data,
        &mut hi[0].data,
        true,
    )
    .expect("input gradient requested");
    layers::relu_backward(&trace.a2, &mut d_h2);

    let (lo, hi) = g.split_at_mut(CONV2_B);
    let mut d_h1 = layers::conv_backward(
        &inner,
        &trace.h1,
        w.w(CONV2_W),
        &d_h2,
        &mut lo[CONV2_W].data,
        &mut hi[0].data,
        true,
    )
    .expect("input gradient requested");
    layers::relu_backward(&trace.a1, &mut d_h1);

    let (lo, hi) = g.split_at_mut(CONV1_B);
    layers::conv_backward(
        &cfg.outer(1, cfg.channels),
        &trace.input,
        w.w(CONV1_W),
        &d_h1,
        &mut lo[CONV1_W].data,
        &mut hi[0].data,
        false,
    );
}

fn check_input(x: &Array2<f64>, side: usize) -> Result<()> {
    if x.dim() != (side, side) {
        return Err(Error::invalid(format!(
            "model input must be {side}x{side}, got {:?}",
            x.dim()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("model input contains non-finite values"));
    }
    Ok(())
}

fn flat(x: &Array2<f64>) -> Vec<f64> {
    x.iter().copied().collect()
}

/// Latent vector of a (standardized) model input.
pub fn encode(x: &Array2<f64>, w: &ModelWeights) -> Result<Array1<f64>> {
    check_input(x, w.config.input_side)?;
    let (_, _, _, _, z) = encode_flat(&flat(x), w);
    Ok(Array1::from(z))
}

pub fn decode(z: &Array1<f64>, w: &ModelWeights) -> Result<Array2<f64>> {
    if z.len() != w.config.latent_dim {
        return Err(Error::invalid(format!(
            "latent must have length {}, got {}",
            w.config.latent_dim,
            z.len()
        )));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("latent contains non-finite values"));
    }
    let (_, _, _, _, y) = decode_flat(z.as_slice().expect("contiguous"), w);
    let side = w.config.input_side;
    Ok(Array2::from_shape_vec((side, side), y).expect("decoder output has the input shape"))
}

/// `decode(encode(x))`.
pub fn reconstruct(x: &Array2<f64>, w: &ModelWeights) -> Result<Array2<f64>> {
    check_input(x, w.config.input_side)?;
    let t = forward_trace(&flat(x), w);
    let side = w.config.input_side;
    Ok(Array2::from_shape_vec((side, side), t.output).expect("decoder output has the input shape"))
}

/// Mean-square reconstruction loss of one standardized input, and its trace.
pub(crate) fn example_loss(input: &[f64], w: &ModelWeights) -> (f64, Trace) {
    let t = forward_trace(input, w);
    let n = input.len() as f64;
    let loss = t
        .output
        .iter()
        .zip(input)
        .map(|(y, x)| (y - x) * (y - x))
        .sum::<f64>()
        / n;
    (loss, t)
}

/// Mean loss over `batch` and its gradient (averaged over the batch).
pub fn batch_loss_and_grad(batch: &[&[f64]], w: &ModelWeights) -> (f64, ModelWeights) {
    let mut grad = w.zero_like();
    let mut total = 0.0;
    let scale = 1.0 / batch.len() as f64;
    for x in batch {
        let (loss, trace) = example_loss(x, w);
        total += loss;
        let n = x.len() as f64;
        let d_out: Vec<f64> = trace
            .output
            .iter()
            .zip(x.iter())
            .map(|(y, t)| 2.0 * (y - t) / n * scale)
            .collect();
        backward(&trace, &d_out, w, &mut grad);
    }
    (total * scale, grad)
}

/// Mean loss over a set of standardized inputs, without gradients.
pub fn mean_loss(inputs: &[Vec<f64>], w: &ModelWeights) -> f64 {
    if inputs.is_empty() {
        return f64::NAN;
    }
    inputs.iter().map(|x| example_loss(x, w).0).sum::<f64>() / inputs.len() as f64
}
