//! Layers and the parameter registry.
//!
//! Model constructors receive a [`Vars`] builder that creates named,
//! trainable tensors. Names are hierarchical dot paths assembled at
//! construction ("encoder.stage0.block1.attn.q.weight"); they are unique
//! within a model and serialized in lexicographic order by the checkpoint
//! code. Non-trainable state (batch-norm running statistics) registers as
//! buffers under the same naming scheme.

use crate::error::{Error, Result};
use crate::tensor::{rng::SplitMix64, NormMode, Tensor};
use std::collections::HashSet;

/// Weight initialization schemes.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Truncated normal (|z| <= 2 sigma), used for projection matrices.
    TruncNormal { std: f32 },
    /// Normal with std sqrt(2 / fan_out), used for convolution kernels.
    FanOut { fan_out: usize },
    Zeros,
    Ones,
}

/// Named parameter: a trainable tensor plus its unique path.
#[derive(Clone)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
}

/// Parameter/buffer registry threaded through model construction.
pub struct Vars {
    pub rng: SplitMix64,
    params: Vec<Param>,
    buffers: Vec<Param>,
    seen: HashSet<String>,
}

impl Vars {
    pub fn new(seed: u64) -> Self {
        Vars {
            rng: SplitMix64::new(seed),
            params: Vec::new(),
            buffers: Vec::new(),
            seen: HashSet::new(),
        }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Tensor {
        assert!(self.seen.insert(name.to_string()), "duplicate parameter name {name}");
        let t = match init {
            Init::TruncNormal { std } => {
                let numel: usize = shape.iter().product();
                let data = (0..numel).map(|_| self.rng.trunc_normal(std)).collect();
                Tensor::from_vec(data, shape).expect("init shape")
            }
            Init::FanOut { fan_out } => {
                let std = (2.0 / fan_out as f32).sqrt();
                Tensor::rand_normal(shape, std, &mut self.rng)
            }
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::full(shape, 1.0),
        };
        t.set_requires_grad(true).expect("fresh leaf");
        self.params.push(Param { name: name.to_string(), tensor: t.clone() });
        t
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], value: f32) -> Tensor {
        assert!(self.seen.insert(name.to_string()), "duplicate buffer name {name}");
        let t = Tensor::full(shape, value);
        self.buffers.push(Param { name: name.to_string(), tensor: t.clone() });
        t
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn buffers(&self) -> &[Param] {
        &self.buffers
    }

    pub fn into_parts(self) -> (Vec<Param>, Vec<Param>) {
        (self.params, self.buffers)
    }
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

/// Affine map on the last axis: x[..., in] -> x[..., out].
pub struct Linear {
    pub weight: Tensor, // [in, out]
    pub bias: Option<Tensor>,
    in_features: usize,
    out_features: usize,
}

impl Linear {
    pub fn new(vars: &mut Vars, prefix: &str, in_features: usize, out_features: usize, bias: bool) -> Linear {
        let weight = vars.param(
            &format!("{prefix}.weight"),
            &[in_features, out_features],
            Init::TruncNormal { std: 0.02 },
        );
        let bias = bias.then(|| vars.param(&format!("{prefix}.bias"), &[out_features], Init::Zeros));
        Linear { weight, bias, in_features, out_features }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let shape = x.shape();
        let last = *shape.last().ok_or_else(|| Error::Shape("linear on rank-0 tensor".into()))?;
        if last != self.in_features {
            return Err(Error::Shape(format!(
                "linear expects last dim {}, got {shape:?}",
                self.in_features
            )));
        }
        let rows = x.numel() / last;
        let flat = x.reshape(&[rows, last])?;
        let mut y = flat.matmul(&self.weight)?;
        if let Some(b) = &self.bias {
            y = y.add(b)?;
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.out_features;
        y.reshape(&out_shape)
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.as_ref().map_or(0, |b| b.numel())
    }
}

// ---------------------------------------------------------------------------
// Conv2d
// ---------------------------------------------------------------------------

pub struct Conv2d {
    pub weight: Tensor, // [out, in/groups, k, k]
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        vars: &mut Vars,
        prefix: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        bias: bool,
    ) -> Conv2d {
        // 1x1 convolutions are per-pixel linear projections and share the
        // projection init; spatial kernels use fan-out scaling
        let init = if k == 1 {
            Init::TruncNormal { std: 0.02 }
        } else {
            Init::FanOut { fan_out: out_ch * k * k / groups }
        };
        let weight = vars.param(&format!("{prefix}.weight"), &[out_ch, in_ch / groups, k, k], init);
        let bias = bias.then(|| vars.param(&format!("{prefix}.bias"), &[out_ch], Init::Zeros));
        Conv2d { weight, bias, stride, padding, groups }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.stride, self.padding, self.groups, false)?;
        match &self.bias {
            Some(b) => {
                let c = b.numel();
                y.add(&b.reshape(&[c, 1, 1])?)
            }
            None => Ok(y),
        }
    }
}

// ---------------------------------------------------------------------------
// LayerNorm
// ---------------------------------------------------------------------------

/// Layer normalization over the last axis with learnable affine.
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f32,
}

impl LayerNorm {
    pub fn new(vars: &mut Vars, prefix: &str, dim: usize) -> LayerNorm {
        LayerNorm {
            gamma: vars.param(&format!("{prefix}.gamma"), &[dim], Init::Ones),
            beta: vars.param(&format!("{prefix}.beta"), &[dim], Init::Zeros),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.normalize(NormMode::Layer, self.eps)?.mul(&self.gamma)?.add(&self.beta)
    }
}

// ---------------------------------------------------------------------------
// BatchNorm
// ---------------------------------------------------------------------------

/// Batch normalization over (batch, spatial) per channel. Training mode uses
/// batch statistics and updates running estimates; eval mode applies the
/// stored running statistics.
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f32,
    pub momentum: f32,
    channels: usize,
}

impl BatchNorm {
    pub fn new(vars: &mut Vars, prefix: &str, channels: usize) -> BatchNorm {
        BatchNorm {
            gamma: vars.param(&format!("{prefix}.gamma"), &[channels], Init::Ones),
            beta: vars.param(&format!("{prefix}.beta"), &[channels], Init::Zeros),
            running_mean: vars.buffer(&format!("{prefix}.running_mean"), &[channels], 0.0),
            running_var: vars.buffer(&format!("{prefix}.running_var"), &[channels], 1.0),
            eps: 1e-5,
            momentum: 0.1,
            channels,
        }
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(Error::Shape(format!(
                "batch norm expects [B,{},H,W], got {shape:?}",
                self.channels
            )));
        }
        let c = self.channels;
        let g = self.gamma.reshape(&[c, 1, 1])?;
        let b = self.beta.reshape(&[c, 1, 1])?;
        if train {
            self.update_running_stats(x);
            x.normalize(NormMode::Batch, self.eps)?.mul(&g)?.add(&b)
        } else {
            // (x - rm) / sqrt(rv + eps) * gamma + beta with stored statistics
            let rm = self.running_mean.to_vec();
            let rv = self.running_var.to_vec();
            let scale: Vec<f32> = rv.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
            let neg_off: Vec<f32> = rm.iter().zip(&scale).map(|(m, s)| -m * s).collect();
            let scale_t = Tensor::from_vec(scale, &[c, 1, 1])?;
            let off_t = Tensor::from_vec(neg_off, &[c, 1, 1])?;
            x.mul(&scale_t)?.add(&off_t)?.mul(&g)?.add(&b)
        }
    }

    fn update_running_stats(&self, x: &Tensor) {
        let shape = x.shape();
        let (bsz, c) = (shape[0], shape[1]);
        let sp: usize = shape[2..].iter().product();
        let n = (bsz * sp) as f64;
        let data = x.data();
        let mut rm = self.running_mean.to_vec();
        let mut rv = self.running_var.to_vec();
        for ch in 0..c {
            let mut mean = 0.0f64;
            for bi in 0..bsz {
                for s in 0..sp {
                    mean += data[(bi * c + ch) * sp + s] as f64;
                }
            }
            mean /= n;
            let mut var = 0.0f64;
            for bi in 0..bsz {
                for s in 0..sp {
                    let d = data[(bi * c + ch) * sp + s] as f64 - mean;
                    var += d * d;
                }
            }
            // unbiased estimate for the running variance
            let var = if n > 1.0 { var / (n - 1.0) } else { 0.0 };
            rm[ch] = (1.0 - self.momentum) * rm[ch] + self.momentum * mean as f32;
            rv[ch] = (1.0 - self.momentum) * rv[ch] + self.momentum * var as f32;
        }
        self.running_mean.copy_from(&rm);
        self.running_var.copy_from(&rv);
    }
}

/// 1x1 convolution (no bias) followed by batch norm; the channel-change
/// block used throughout the decoder.
pub struct ConvBn {
    pub conv: Conv2d,
    pub bn: BatchNorm,
}

impl ConvBn {
    pub fn new(vars: &mut Vars, prefix: &str, in_ch: usize, out_ch: usize) -> ConvBn {
        ConvBn {
            conv: Conv2d::new(vars, &format!("{prefix}.conv"), in_ch, out_ch, 1, 1, 0, 1, false),
            bn: BatchNorm::new(vars, &format!("{prefix}.bn"), out_ch),
        }
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        self.bn.forward(&self.conv.forward(x)?, train)
    }
}
