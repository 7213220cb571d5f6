//! Alignment heads: residual generators and discriminator/classifiers.

use candle_core::Tensor;
use rand_chacha::ChaCha8Rng;

use super::layers::{leaky_relu, Activation, BatchNorm, Conv2d, ConvBlock, ForwardCtx, Linear};
use super::params::{Group, ParamStore};
use super::ArchConfig;
use crate::error::Result;
use crate::{IMAGE_SIZE, MODEL_CHANNELS, NUM_CLASSES};

#[derive(Debug, Clone)]
pub struct ResBlock {
    pub first: ConvBlock,
    pub second: ConvBlock,
}

impl ResBlock {
    fn forward(&self, x: &Tensor, ctx: &ForwardCtx) -> Result<Tensor> {
        let h = self.second.forward(&self.first.forward(x, ctx)?, ctx)?;
        Ok((x + h)?)
    }
}

/// Image-to-image residual generator; output is `clamp(x + r(x), -1, 1)`.
#[derive(Debug, Clone)]
pub struct Generator {
    pub input: ConvBlock,
    pub blocks: Vec<ResBlock>,
    pub output: Conv2d,
}

fn conv_bn(
    store: &mut ParamStore,
    group: Group,
    name: &str,
    c_in: usize,
    c_out: usize,
    act: Activation,
    rng: &mut ChaCha8Rng,
) -> Result<ConvBlock> {
    Ok(ConvBlock {
        conv: Conv2d::new(store, group, &format!("{name}.conv"), c_in, c_out, 3, 1, 1, false, rng)?,
        norm: BatchNorm::new(store, group, &format!("{name}.bn"), c_out, rng)?,
        act,
    })
}

impl Generator {
    pub fn build(store: &mut ParamStore, group: Group, arch: &ArchConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let f = arch.gen_filters;
        let input = conv_bn(store, group, "in", MODEL_CHANNELS, f, Activation::Relu, rng)?;
        let blocks = (0..arch.gen_blocks)
            .map(|b| {
                Ok(ResBlock {
                    first: conv_bn(store, group, &format!("res{b}.a"), f, f, Activation::Relu, rng)?,
                    second: conv_bn(store, group, &format!("res{b}.b"), f, f, Activation::Identity, rng)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let output = Conv2d::new(store, group, "out", f, MODEL_CHANNELS, 3, 1, 1, true, rng)?;
        Ok(Generator { input, blocks, output })
    }

    pub fn forward(&self, x: &Tensor, ctx: &ForwardCtx) -> Result<Tensor> {
        let mut h = self.input.forward(x, ctx)?;
        for b in &self.blocks {
            h = b.forward(&h, ctx)?;
        }
        let r = self.output.forward(&h)?;
        Ok((x + r)?.clamp(-1.0, 1.0)?)
    }
}

/// Logits and penultimate features of a discriminator.
#[derive(Debug, Clone)]
pub struct DiscOutput {
    /// (batch,) domain logit; sigmoid gives the probability of "source association".
    pub domain_logit: Tensor,
    /// (batch, 10) unnormalized class scores.
    pub class_logits: Tensor,
    /// (batch, feature_dim) shared trunk features.
    pub features: Tensor,
}

impl DiscOutput {
    pub fn domain_prob(&self) -> Result<Tensor> {
        Ok((self.domain_logit.neg()?.exp()? + 1.0)?.recip()?)
    }
}

#[derive(Debug, Clone)]
pub struct Discriminator {
    pub convs: Vec<Conv2d>,
    pub trunk: Linear,
    pub domain_head: Linear,
    pub class_head: Linear,
}

impl Discriminator {
    pub fn build(store: &mut ParamStore, group: Group, arch: &ArchConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut convs = Vec::with_capacity(arch.disc_filters.len());
        let mut c_in = MODEL_CHANNELS;
        let mut side = IMAGE_SIZE;
        for (i, &f) in arch.disc_filters.iter().enumerate() {
            convs.push(Conv2d::new(store, group, &format!("conv{i}"), c_in, f, 3, 2, 1, true, rng)?);
            c_in = f;
            side = side.div_ceil(2);
        }
        let flat = c_in * side * side;
        Ok(Discriminator {
            convs,
            trunk: Linear::new(store, group, "fc", flat, arch.feature_dim, rng)?,
            domain_head: Linear::new(store, group, "domain", arch.feature_dim, 1, rng)?,
            class_head: Linear::new(store, group, "class", arch.feature_dim, NUM_CLASSES, rng)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<DiscOutput> {
        let mut h = x.clone();
        for c in &self.convs {
            h = leaky_relu(&c.forward(&h)?)?;
        }
        let features = leaky_relu(&self.trunk.forward(&h.flatten_from(1)?)?)?;
        Ok(DiscOutput {
            domain_logit: self.domain_head.forward(&features)?.squeeze(1)?,
            class_logits: self.class_head.forward(&features)?,
            features,
        })
    }
}
