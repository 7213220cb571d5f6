//! Coupled VAEs: per-domain low encoders, a shared high encoder with latent
//! heads, and two six-layer decoders that can be cut and cross-grafted.

use candle_core::Tensor;
use rand_chacha::ChaCha8Rng;

use super::layers::{Activation, BatchNorm, Conv2d, ConvBlock, ConvTranspose2d, ForwardCtx};
use super::params::{Group, ParamStore};
use super::{normal_tensor, ArchConfig, Domain, DECODER_DEPTH};
use crate::error::Result;
use crate::MODEL_CHANNELS;

/// Decoder strides and output paddings: 4 → 4 → 7 → 14 → 28 → 28 → 28.
const DEC_STRIDES: [usize; DECODER_DEPTH] = [1, 2, 2, 2, 1, 1];
const DEC_OUTPUT_PADDING: [usize; DECODER_DEPTH] = [0, 0, 1, 1, 0, 0];
const DEC_KERNEL: usize = 3;

/// Gaussian perturbation of pre-activations.
pub struct PreActNoise<'a> {
    pub rng: &'a mut ChaCha8Rng,
    pub sigma: f64,
}

#[derive(Debug, Clone)]
pub struct EncoderStack {
    pub layers: Vec<ConvBlock>,
}

impl EncoderStack {
    pub fn forward(&self, x: &Tensor, ctx: &ForwardCtx) -> Result<Tensor> {
        self.layers.iter().try_fold(x.clone(), |h, l| l.forward(&h, ctx))
    }
}

#[derive(Debug, Clone)]
pub struct LatentHeads {
    pub mean: Conv2d,
    pub logvar: Conv2d,
}

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub conv: ConvTranspose2d,
    pub norm: Option<BatchNorm>,
    pub act: Activation,
}

impl DecoderLayer {
    fn forward(&self, x: &Tensor, ctx: &ForwardCtx, noise: Option<&mut PreActNoise<'_>>) -> Result<Tensor> {
        let mut h = self.conv.forward(x)?;
        if let Some(bn) = &self.norm {
            h = bn.forward(&h, ctx)?;
        }
        if let Some(n) = noise {
            if n.sigma > 0.0 {
                let eps = normal_tensor(n.rng, h.dims(), h.dtype())?;
                h = (h + (eps * n.sigma)?)?;
            }
        }
        self.act.apply(&h)
    }
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub layers: Vec<DecoderLayer>,
}

impl Decoder {
    /// Runs layers `range` on `x`; `noise`, when given, perturbs each layer's pre-activation.
    pub fn forward_range(
        &self,
        x: &Tensor,
        range: std::ops::Range<usize>,
        ctx: &ForwardCtx,
        mut noise: Option<&mut PreActNoise<'_>>,
    ) -> Result<Tensor> {
        let mut h = x.clone();
        for layer in &self.layers[range] {
            h = layer.forward(&h, ctx, noise.as_deref_mut())?;
        }
        Ok(h)
    }
}

#[derive(Debug, Clone)]
pub struct VaePair {
    pub encoder_low_s: EncoderStack,
    pub encoder_low_t: EncoderStack,
    pub encoder_high_shared: EncoderStack,
    pub latent: LatentHeads,
    pub decoder_s: Decoder,
    pub decoder_t: Decoder,
    pub latent_dim: usize,
}

fn encoder_stack(
    store: &mut ParamStore,
    group: Group,
    arch: &ArchConfig,
    layers: std::ops::Range<usize>,
    rng: &mut ChaCha8Rng,
) -> Result<EncoderStack> {
    let mut out = Vec::new();
    for i in layers {
        let c_in = if i == 0 { MODEL_CHANNELS } else { arch.enc_filters[i - 1] };
        let k = ArchConfig::ENC_KERNELS[i];
        let name = format!("conv{i}");
        let conv = Conv2d::new(store, group, &name, c_in, arch.enc_filters[i], k, ArchConfig::ENC_STRIDES[i], k / 2, false, rng)?;
        let norm = BatchNorm::new(store, group, &format!("bn{i}"), arch.enc_filters[i], rng)?;
        out.push(ConvBlock {
            conv,
            norm,
            act: Activation::LeakyRelu,
        });
    }
    Ok(EncoderStack { layers: out })
}

fn decoder(store: &mut ParamStore, group: Group, arch: &ArchConfig, rng: &mut ChaCha8Rng) -> Result<Decoder> {
    let mut layers = Vec::with_capacity(DECODER_DEPTH);
    let filters = arch.decoder_filters();
    for i in 0..DECODER_DEPTH {
        let c_in = if i == 0 { arch.latent_dim } else { filters[i - 1] };
        let last = i + 1 == DECODER_DEPTH;
        let conv = ConvTranspose2d::new(
            store,
            group,
            &format!("deconv{i}"),
            c_in,
            filters[i],
            DEC_KERNEL,
            DEC_STRIDES[i],
            DEC_KERNEL / 2,
            DEC_OUTPUT_PADDING[i],
            last,
            rng,
        )?;
        let (norm, act) = if last {
            (None, Activation::Tanh)
        } else {
            (
                Some(BatchNorm::new(store, group, &format!("bn{i}"), filters[i], rng)?),
                Activation::LeakyRelu,
            )
        };
        layers.push(DecoderLayer { conv, norm, act });
    }
    Ok(Decoder { layers })
}

impl VaePair {
    pub fn build(store: &mut ParamStore, arch: &ArchConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let n_enc = arch.enc_filters.len();
        let n_low = n_enc - arch.shared_encoder_layers;
        let encoder_low_s = encoder_stack(store, Group::EncLowS, arch, 0..n_low, rng)?;
        let encoder_low_t = encoder_stack(store, Group::EncLowT, arch, 0..n_low, rng)?;
        let encoder_high_shared = encoder_stack(store, Group::EncHigh, arch, n_low..n_enc, rng)?;
        let top = arch.enc_filters[n_enc - 1];
        let latent = LatentHeads {
            mean: Conv2d::new(store, Group::EncHigh, "mean", top, arch.latent_dim, 1, 1, 0, true, rng)?,
            logvar: Conv2d::new(store, Group::EncHigh, "logvar", top, arch.latent_dim, 1, 1, 0, true, rng)?,
        };
        let decoder_s = decoder(store, Group::DecS, arch, rng)?;
        let decoder_t = decoder(store, Group::DecT, arch, rng)?;
        Ok(VaePair {
            encoder_low_s,
            encoder_low_t,
            encoder_high_shared,
            latent,
            decoder_s,
            decoder_t,
            latent_dim: arch.latent_dim,
        })
    }

    pub fn encoder_low(&self, d: Domain) -> &EncoderStack {
        match d {
            Domain::Source => &self.encoder_low_s,
            Domain::Target => &self.encoder_low_t,
        }
    }

    pub fn decoder(&self, d: Domain) -> &Decoder {
        match d {
            Domain::Source => &self.decoder_s,
            Domain::Target => &self.decoder_t,
        }
    }

    /// Latent mean and log-variance of `x` (NCHW).
    pub fn encode_moments(&self, x: &Tensor, d: Domain, ctx: &ForwardCtx) -> Result<(Tensor, Tensor)> {
        let low = self.encoder_low(d).forward(x, ctx)?;
        let high = self.encoder_high_shared.forward(&low, ctx)?;
        Ok((self.latent.mean.forward(&high)?, self.latent.logvar.forward(&high)?))
    }
}
