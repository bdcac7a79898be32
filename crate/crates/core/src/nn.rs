//! Classifier architectures: the 4-block convolutional backbone and a small
//! MLP for vector-valued data.
//!
//! Parameters live in a [`ParamSet`] keyed by layer name; the forward pass is
//! a pure function of `(spec, params, batch)`, so the same code runs on plain
//! values, on first-order graphs and on higher-order graphs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, Tensor};
use crate::error::{Error, Result};
use crate::params::{ParamSet, ParamVars};

/// Logits per sample for the binary episodes.
pub const BINARY_CLASSES: usize = 2;

/// Number of conv blocks in [`ArchKind::Conv4`].
pub const CONV_BLOCKS: usize = 4;

/// Side length of the square conv kernels.
pub const KERNEL: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchKind {
    /// Four blocks of {3×3 conv, batchnorm, ReLU, 2×2 max-pool}, then a linear head.
    Conv4,
    /// Fully connected ReLU layers, then a linear head.
    Mlp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub arch: ArchKind,
    /// Shape of one sample: `[C, H, W]` for conv4, `[D]` for mlp.
    pub input_shape: Vec<usize>,
    /// Filters per conv block, or units per hidden layer.
    pub widths: Vec<usize>,
    pub classes: usize,
}

impl ArchSpec {
    pub fn conv4(channels: usize, side: usize, width: usize) -> Self {
        ArchSpec {
            arch: ArchKind::Conv4,
            input_shape: vec![channels, side, side],
            widths: vec![width; CONV_BLOCKS],
            classes: BINARY_CLASSES,
        }
    }

    pub fn mlp(input_dim: usize, hidden: &[usize]) -> Self {
        ArchSpec {
            arch: ArchKind::Mlp,
            input_shape: vec![input_dim],
            widths: hidden.to_vec(),
            classes: BINARY_CLASSES,
        }
    }

    /// Same body with a different number of output logits.
    pub fn with_classes(&self, classes: usize) -> Self {
        ArchSpec {
            classes,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_shape.contains(&0) || self.widths.contains(&0) {
            return Err(Error::Spec(format!(
                "zero extent in input shape {:?} or widths {:?}",
                self.input_shape, self.widths
            )));
        }
        if self.classes < 2 {
            return Err(Error::Spec(format!(
                "need at least 2 classes, got {}",
                self.classes
            )));
        }
        match self.arch {
            ArchKind::Conv4 => {
                if self.input_shape.len() != 3 {
                    return Err(Error::Spec(format!(
                        "conv4 input must be [C, H, W], got {:?}",
                        self.input_shape
                    )));
                }
                if self.widths.len() != CONV_BLOCKS {
                    return Err(Error::Spec(format!(
                        "conv4 needs exactly {CONV_BLOCKS} block widths, got {}",
                        self.widths.len()
                    )));
                }
                let (h, w) = self.pooled_side();
                if h == 0 || w == 0 {
                    return Err(Error::Spec(format!(
                        "input {:?} is too small for {CONV_BLOCKS} pooling stages",
                        self.input_shape
                    )));
                }
            }
            ArchKind::Mlp => {
                if self.input_shape.len() != 1 {
                    return Err(Error::Spec(format!(
                        "mlp input must be [D], got {:?}",
                        self.input_shape
                    )));
                }
            }
        }
        Ok(())
    }

    /// Spatial size after the conv blocks (each pool floors odd sizes).
    fn pooled_side(&self) -> (usize, usize) {
        let (mut h, mut w) = (self.input_shape[1], self.input_shape[2]);
        for _ in 0..CONV_BLOCKS {
            h /= 2;
            w /= 2;
        }
        (h, w)
    }

    /// Width of the penultimate (feature) layer.
    pub fn feature_dim(&self) -> usize {
        match self.arch {
            ArchKind::Conv4 => {
                let (h, w) = self.pooled_side();
                self.widths[CONV_BLOCKS - 1] * h * w
            }
            ArchKind::Mlp => *self.widths.last().unwrap_or(&self.input_shape[0]),
        }
    }

    /// Every parameter as `(name, shape, fan_in)`, in definition order.
    /// `fan_in` is `None` for entries not drawn at random.
    pub fn layout(&self) -> Vec<(String, Vec<usize>, Option<usize>)> {
        let mut out = Vec::new();
        match self.arch {
            ArchKind::Conv4 => {
                let mut channels = self.input_shape[0];
                for (i, &width) in self.widths.iter().enumerate() {
                    let fan_in = channels * KERNEL * KERNEL;
                    out.push((
                        format!("block{i}.conv.weight"),
                        vec![width, channels, KERNEL, KERNEL],
                        Some(fan_in),
                    ));
                    out.push((format!("block{i}.conv.bias"), vec![width], None));
                    out.push((format!("block{i}.bn.scale"), vec![width], None));
                    out.push((format!("block{i}.bn.shift"), vec![width], None));
                    channels = width;
                }
            }
            ArchKind::Mlp => {
                let mut fan_in = self.input_shape[0];
                for (i, &width) in self.widths.iter().enumerate() {
                    out.push((format!("layer{i}.weight"), vec![fan_in, width], Some(fan_in)));
                    out.push((format!("layer{i}.bias"), vec![width], None));
                    fan_in = width;
                }
            }
        }
        let features = self.feature_dim();
        out.push(("head.weight".into(), vec![features, self.classes], Some(features)));
        out.push(("head.bias".into(), vec![self.classes], None));
        out
    }

    pub fn param_count(&self) -> usize {
        self.layout()
            .iter()
            .map(|(_, shape, _)| shape.iter().product::<usize>())
            .sum()
    }
}

/// Weights uniform in `±sqrt(6 / fan_in)`, biases and batchnorm shifts zero,
/// batchnorm scales one. Deterministic in `seed`.
pub fn init_params(spec: &ArchSpec, seed: u64) -> Result<ParamSet> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    for (name, shape, fan_in) in spec.layout() {
        let n: usize = shape.iter().product();
        let data = match fan_in {
            Some(fan_in) => {
                let bound = (6.0 / fan_in as f64).sqrt();
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            }
            None if name.ends_with("bn.scale") => vec![1.0; n],
            None => vec![0.0; n],
        };
        params.insert(name, Array::new(shape, data)?);
    }
    Ok(params)
}

fn linear(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let n = x.shape()[0];
    let out = weight.shape().get(1).copied().unwrap_or(0);
    let b = bias.reshape(&[1, out])?.broadcast_axis(0, n)?;
    x.matmul(weight)?.add(&b)
}

fn check_batch(spec: &ArchSpec, batch: &Tensor) -> Result<usize> {
    let s = batch.shape();
    if s.len() != spec.input_shape.len() + 1 || s[1..] != spec.input_shape[..] {
        let mut expected = vec![0];
        expected.extend_from_slice(&spec.input_shape);
        return Err(Error::shape("forward", s, &expected));
    }
    Ok(s[0])
}

/// Penultimate activations, `[N, feature_dim]`.
pub fn features(spec: &ArchSpec, params: &ParamVars, batch: &Tensor) -> Result<Tensor> {
    let n = check_batch(spec, batch)?;
    match spec.arch {
        ArchKind::Conv4 => {
            let mut h = batch.clone();
            for i in 0..CONV_BLOCKS {
                let p = |suffix: &str| params.require(&format!("block{i}.{suffix}"));
                h = h
                    .conv2d(p("conv.weight")?, p("conv.bias")?)?
                    .batchnorm2d(p("bn.scale")?, p("bn.shift")?)?
                    .relu()?
                    .maxpool2d()?;
            }
            h.reshape(&[n, spec.feature_dim()])
        }
        ArchKind::Mlp => {
            let mut h = batch.clone();
            for i in 0..spec.widths.len() {
                let w = params.require(&format!("layer{i}.weight"))?;
                let b = params.require(&format!("layer{i}.bias"))?;
                h = linear(&h, w, b)?.relu()?;
            }
            Ok(h)
        }
    }
}

/// Logits, `[N, classes]`.
pub fn forward(spec: &ArchSpec, params: &ParamVars, batch: &Tensor) -> Result<Tensor> {
    let h = features(spec, params, batch)?;
    linear(&h, params.require("head.weight")?, params.require("head.bias")?)
}

/// Probability of class 1 under the softmax over the two logits.
pub fn positive_probability(logits: &Tensor) -> Result<Tensor> {
    logits.softmax()?.column(1)
}

/// Class-1 probabilities for plain values (nothing is recorded).
pub fn predict(spec: &ArchSpec, params: &ParamSet, batch: &Array) -> Result<Array> {
    let logits = forward(spec, &params.constants(), &Tensor::from(batch.clone()))?;
    Ok(positive_probability(&logits)?.into_value())
}
