//! Building blocks over the tensor backend.

use candle_core::{Tensor, Var, D};
use rand_chacha::ChaCha8Rng;

use super::params::{Group, GroupSet, Init, ParamKind, ParamStore};
use crate::error::Result;

pub const LEAKY_SLOPE: f64 = 0.2;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Std of a fan-in scaled normal init for leaky-rectifier layers.
pub fn init_std(fan_in: usize) -> f64 {
    (2.0 / ((1.0 + LEAKY_SLOPE * LEAKY_SLOPE) * fan_in.max(1) as f64)).sqrt()
}

/// How a forward pass treats batch normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardCtx {
    /// Batch statistics (true) or running statistics (false).
    pub train: bool,
    /// Groups whose running statistics this pass may update.
    pub update_stats: GroupSet,
}

impl ForwardCtx {
    pub const EVAL: ForwardCtx = ForwardCtx {
        train: false,
        update_stats: GroupSet::EMPTY,
    };

    pub fn train(update_stats: GroupSet) -> Self {
        ForwardCtx {
            train: true,
            update_stats,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    LeakyRelu,
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, x: &Tensor) -> Result<Tensor> {
        Ok(match self {
            Activation::LeakyRelu => leaky_relu(x)?,
            Activation::Relu => x.relu()?,
            Activation::Tanh => x.tanh()?,
            Activation::Identity => x.clone(),
        })
    }
}

pub fn leaky_relu(x: &Tensor) -> Result<Tensor> {
    let zeros = x.zeros_like()?;
    Ok((x.maximum(&zeros)? + (x.minimum(&zeros)? * LEAKY_SLOPE)?)?)
}

fn bias_4d(b: &Var) -> Result<Tensor> {
    Ok(b.as_tensor().reshape((1, b.dim(0)?, 1, 1))?)
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Var,
    pub bias: Option<Var>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        group: Group,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let weight = store.create(
            group,
            &format!("{name}.weight"),
            &[c_out, c_in, kernel, kernel],
            Init::Normal(init_std(c_in * kernel * kernel)),
            ParamKind::Weight,
            rng,
        )?;
        let bias = if bias {
            Some(store.create(group, &format!("{name}.bias"), &[c_out], Init::Zeros, ParamKind::Weight, rng)?)
        } else {
            None
        };
        Ok(Conv2d {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&bias_4d(b)?)?),
            None => Ok(y),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }
}

/// Transposed convolution; the weight is laid out (in, out, k, k).
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub weight: Var,
    pub bias: Option<Var>,
    pub stride: usize,
    pub padding: usize,
    pub output_padding: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        group: Group,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        output_padding: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let weight = store.create(
            group,
            &format!("{name}.weight"),
            &[c_in, c_out, kernel, kernel],
            // Each output sees about 1/stride² of the kernel taps.
            Init::Normal(init_std(c_in * kernel * kernel / (stride * stride))),
            ParamKind::Weight,
            rng,
        )?;
        let bias = if bias {
            Some(store.create(group, &format!("{name}.bias"), &[c_out], Init::Zeros, ParamKind::Weight, rng)?)
        } else {
            None
        };
        Ok(ConvTranspose2d {
            weight,
            bias,
            stride,
            padding,
            output_padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv_transpose2d(&self.weight, self.padding, self.output_padding, self.stride, 1)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&bias_4d(b)?)?),
            None => Ok(y),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[1]
    }
}

/// Per-channel batch normalization over (batch, height, width).
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub group: Group,
    pub gamma: Var,
    pub beta: Var,
    pub running_mean: Var,
    pub running_var: Var,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, group: Group, name: &str, channels: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut mk = |local: &str, init, kind| store.create(group, &format!("{name}.{local}"), &[channels], init, kind, rng);
        Ok(BatchNorm {
            group,
            gamma: mk("gamma", Init::Ones, ParamKind::Weight)?,
            beta: mk("beta", Init::Zeros, ParamKind::Weight)?,
            running_mean: mk("running_mean", Init::Zeros, ParamKind::Buffer)?,
            running_var: mk("running_var", Init::Ones, ParamKind::Buffer)?,
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: &ForwardCtx) -> Result<Tensor> {
        let c = self.gamma.dim(0)?;
        let shape = (1, c, 1, 1);
        let (mean, var) = if ctx.train {
            let mean = x.mean_keepdim((0, 2, 3))?;
            let centered = x.broadcast_sub(&mean)?;
            let var = centered.sqr()?.mean_keepdim((0, 2, 3))?;
            if ctx.update_stats.contains(self.group) {
                let n = (x.elem_count() / c) as f64;
                let unbiased = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
                let m = BN_MOMENTUM;
                let new_mean = ((self.running_mean.as_tensor() * (1.0 - m))?
                    + (mean.detach().flatten_all()? * m)?)?;
                let new_var = ((self.running_var.as_tensor() * (1.0 - m))?
                    + (var.detach().flatten_all()? * (m * unbiased))?)?;
                self.running_mean.set(&new_mean)?;
                self.running_var.set(&new_var)?;
            }
            (mean, var)
        } else {
            (
                self.running_mean.as_detached_tensor().reshape(shape)?,
                self.running_var.as_detached_tensor().reshape(shape)?,
            )
        };
        let normed = x.broadcast_sub(&mean)?.broadcast_div(&(var + BN_EPS)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&self.gamma.as_tensor().reshape(shape)?)?
            .broadcast_add(&self.beta.as_tensor().reshape(shape)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        group: Group,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Linear {
            weight: store.create(group, &format!("{name}.weight"), &[d_out, d_in], Init::Normal(init_std(d_in)), ParamKind::Weight, rng)?,
            bias: store.create(group, &format!("{name}.bias"), &[d_out], Init::Zeros, ParamKind::Weight, rng)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }

    pub fn out_features(&self) -> usize {
        self.weight.dims()[0]
    }
}

/// Convolution, batch norm, activation.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub conv: Conv2d,
    pub norm: BatchNorm,
    pub act: Activation,
}

impl ConvBlock {
    pub fn forward(&self, x: &Tensor, ctx: &ForwardCtx) -> Result<Tensor> {
        self.act.apply(&self.norm.forward(&self.conv.forward(x)?, ctx)?)
    }
}

/// Mean over the last axis of a rank-2 tensor, kept for readability at call sites.
pub fn row_mean(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean(D::Minus1)?)
}
