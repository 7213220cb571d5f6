//! Parametric functions of the model: coupled VAEs with a shared high encoder,
//! cross-graftable decoders, residual generators and discriminator/classifier
//! heads.
//!
//! Images inside the model are NCHW tensors with values in `[-1, 1]`; use
//! [`images_to_tensor`] and [`tensor_to_images`] at the boundary.

pub mod heads;
pub mod layers;
pub mod params;
pub mod vae;

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::{IMAGE_SIZE, MODEL_CHANNELS};
use heads::{DiscOutput, Discriminator, Generator};
pub use layers::ForwardCtx;
use params::{Group, ParamStore};
pub use vae::PreActNoise;
use vae::VaePair;

/// Number of layers in each decoder.
pub const DECODER_DEPTH: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn short(self) -> &'static str {
        match self {
            Domain::Source => "s",
            Domain::Target => "t",
        }
    }
}

/// Graft direction: `St` takes high layers from the source decoder and low
/// layers from the target decoder; `Ts` the reverse.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    St,
    Ts,
}

impl Channel {
    pub const BOTH: [Channel; 2] = [Channel::St, Channel::Ts];

    pub fn high(self) -> Domain {
        match self {
            Channel::St => Domain::Source,
            Channel::Ts => Domain::Target,
        }
    }

    pub fn low(self) -> Domain {
        match self {
            Channel::St => Domain::Target,
            Channel::Ts => Domain::Source,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Channel::St => "st",
            Channel::Ts => "ts",
        }
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Channel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "st" => Ok(Channel::St),
            "ts" => Ok(Channel::Ts),
            _ => config_err(format!("unknown channel {s:?} (expected st or ts)")),
        }
    }
}

/// Division of the decoder depth into high (first) and low (last) layers,
/// written `HxLy`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct StackSplit {
    n_high: usize,
    n_low: usize,
}

impl StackSplit {
    pub fn new(n_high: usize, n_low: usize) -> Result<Self> {
        if n_high + n_low != DECODER_DEPTH {
            return config_err(format!(
                "stack split H{n_high}L{n_low} must cover exactly {DECODER_DEPTH} layers"
            ));
        }
        Ok(StackSplit { n_high, n_low })
    }

    pub fn n_high(self) -> usize {
        self.n_high
    }

    pub fn n_low(self) -> usize {
        self.n_low
    }

    /// All splits from H0L6 to H6L0.
    pub fn all() -> impl Iterator<Item = StackSplit> {
        (0..=DECODER_DEPTH).map(|h| StackSplit {
            n_high: h,
            n_low: DECODER_DEPTH - h,
        })
    }
}

impl Default for StackSplit {
    fn default() -> Self {
        StackSplit { n_high: 2, n_low: 4 }
    }
}

impl fmt::Display for StackSplit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "H{}L{}", self.n_high, self.n_low)
    }
}

impl FromStr for StackSplit {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("stack split {s:?} is not of the form HxLy"));
        let rest = s.trim().strip_prefix(['H', 'h']).ok_or_else(bad)?;
        let (h, l) = rest.split_once(['L', 'l']).ok_or_else(bad)?;
        StackSplit::new(h.parse().map_err(|_| bad())?, l.parse().map_err(|_| bad())?)
    }
}

impl TryFrom<String> for StackSplit {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<StackSplit> for String {
    fn from(s: StackSplit) -> String {
        s.to_string()
    }
}

/// Layer widths of the model. Kernels and strides are fixed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    /// Filters of the four encoder layers.
    pub enc_filters: Vec<usize>,
    /// How many of the top encoder layers both domains share.
    pub shared_encoder_layers: usize,
    /// Channels of the (4, 4) latent code.
    pub latent_dim: usize,
    /// Filters of the first five decoder layers; the last layer emits 3 channels.
    pub dec_filters: Vec<usize>,
    pub gen_filters: usize,
    pub gen_blocks: usize,
    /// Filters of the stride-2 discriminator convolutions.
    pub disc_filters: Vec<usize>,
    /// Width of the discriminator feature layer.
    pub feature_dim: usize,
}

impl ArchConfig {
    pub const ENC_KERNELS: [usize; 4] = [5, 5, 3, 3];
    pub const ENC_STRIDES: [usize; 4] = [2, 2, 2, 1];
    /// Spatial side of the latent code.
    pub const LATENT_SIDE: usize = 4;

    pub fn reference() -> Self {
        ArchConfig {
            enc_filters: vec![64, 128, 256, 512],
            shared_encoder_layers: 2,
            latent_dim: 512,
            dec_filters: vec![512, 256, 128, 64, 32],
            gen_filters: 64,
            gen_blocks: 4,
            disc_filters: vec![64, 128, 256, 512],
            feature_dim: 256,
        }
    }

    /// A few-thousand-parameter model for tests.
    pub fn tiny() -> Self {
        ArchConfig {
            enc_filters: vec![4, 4, 8, 8],
            shared_encoder_layers: 2,
            latent_dim: 8,
            dec_filters: vec![8, 8, 4, 4, 4],
            gen_filters: 4,
            gen_blocks: 1,
            disc_filters: vec![4, 4, 8, 8],
            feature_dim: 16,
        }
    }

    /// A quarter-width model that trains on one CPU core.
    pub fn compact() -> Self {
        ArchConfig {
            enc_filters: vec![16, 32, 64, 128],
            shared_encoder_layers: 2,
            latent_dim: 64,
            dec_filters: vec![128, 64, 32, 16, 8],
            gen_filters: 16,
            gen_blocks: 2,
            disc_filters: vec![16, 32, 64, 128],
            feature_dim: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.enc_filters.len() != 4 {
            return config_err("arch.enc_filters needs exactly 4 entries");
        }
        if !(1..=4).contains(&self.shared_encoder_layers) {
            return config_err("arch.shared_encoder_layers must be in 1..=4");
        }
        if self.dec_filters.len() != DECODER_DEPTH - 1 {
            return config_err(format!("arch.dec_filters needs exactly {} entries", DECODER_DEPTH - 1));
        }
        if self.disc_filters.is_empty() || self.disc_filters.len() > 5 {
            return config_err("arch.disc_filters needs 1 to 5 entries");
        }
        let widths = self
            .enc_filters
            .iter()
            .chain(&self.dec_filters)
            .chain(&self.disc_filters)
            .chain([&self.latent_dim, &self.gen_filters, &self.feature_dim]);
        if widths.copied().any(|w| w == 0) {
            return config_err("arch widths must be positive");
        }
        Ok(())
    }

    pub fn decoder_filters(&self) -> Vec<usize> {
        let mut f = self.dec_filters.clone();
        f.push(MODEL_CHANNELS);
        f
    }
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self::reference()
    }
}

/// Posterior moments and a reparameterized sample, each (batch, latent_dim, 4, 4).
#[derive(Debug, Clone)]
pub struct LatentBatch {
    pub mean: Tensor,
    pub logvar: Tensor,
    pub sample: Tensor,
}

/// Source of the reparameterization noise in [`Model::encode`].
pub enum LatentNoise<'a> {
    /// The sample equals the mean.
    Zero,
    Explicit(&'a Tensor),
    Sample(&'a mut ChaCha8Rng),
}

/// Log-variance range used when sampling and in the prior term.
pub const LOGVAR_CLAMP: f64 = 20.0;

/// A tensor of i.i.d. standard normals drawn from `rng`.
pub fn normal_tensor(rng: &mut ChaCha8Rng, dims: &[usize], dtype: DType) -> Result<Tensor> {
    let n: usize = dims.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Ok(Tensor::from_vec(v, dims, &Device::Cpu)?.to_dtype(dtype)?)
}

/// NHWC pixels in `[-1, 1]` → NCHW tensor.
pub fn images_to_tensor(pixels: &[f32], count: usize, dtype: DType) -> Result<Tensor> {
    let per = IMAGE_SIZE * IMAGE_SIZE * MODEL_CHANNELS;
    if pixels.len() != count * per {
        return Err(Error::Contract(format!(
            "expected {count}x{IMAGE_SIZE}x{IMAGE_SIZE}x{MODEL_CHANNELS} pixels, got {}",
            pixels.len()
        )));
    }
    let t = Tensor::from_slice(pixels, (count, IMAGE_SIZE, IMAGE_SIZE, MODEL_CHANNELS), &Device::Cpu)?;
    Ok(t.permute((0, 3, 1, 2))?.contiguous()?.to_dtype(dtype)?)
}

/// NCHW tensor → NHWC `f32` pixels.
pub fn tensor_to_images(t: &Tensor) -> Result<Vec<f32>> {
    Ok(t.permute((0, 2, 3, 1))?
        .to_dtype(DType::F32)?
        .flatten_all()?
        .to_vec1::<f32>()?)
}

fn check_image_batch(x: &Tensor) -> Result<()> {
    match x.dims() {
        [_, c, h, w] if *c == MODEL_CHANNELS && *h == IMAGE_SIZE && *w == IMAGE_SIZE => Ok(()),
        d => Err(Error::Contract(format!(
            "expected an image batch (n, {MODEL_CHANNELS}, {IMAGE_SIZE}, {IMAGE_SIZE}), got {d:?}"
        ))),
    }
}

/// The whole model: parameters plus the networks that read them.
#[derive(Debug)]
pub struct Model {
    pub store: ParamStore,
    pub vae: VaePair,
    pub generators: [Generator; 2],
    pub discriminators: [Discriminator; 2],
    pub arch: ArchConfig,
}

impl Model {
    /// Instantiates every network with parameters drawn from `seed`.
    pub fn build(arch: &ArchConfig, seed: u64, dtype: DType) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new(dtype);
        let vae = VaePair::build(&mut store, arch, &mut rng)?;
        let generators = [
            Generator::build(&mut store, Group::GenSt, arch, &mut rng)?,
            Generator::build(&mut store, Group::GenTs, arch, &mut rng)?,
        ];
        let discriminators = [
            Discriminator::build(&mut store, Group::DiscSt, arch, &mut rng)?,
            Discriminator::build(&mut store, Group::DiscTs, arch, &mut rng)?,
        ];
        Ok(Model {
            store,
            vae,
            generators,
            discriminators,
            arch: arch.clone(),
        })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn latent_dims(&self, batch: usize) -> [usize; 4] {
        [batch, self.arch.latent_dim, ArchConfig::LATENT_SIDE, ArchConfig::LATENT_SIDE]
    }

    pub fn encode(&self, x: &Tensor, domain: Domain, noise: LatentNoise<'_>, ctx: &ForwardCtx) -> Result<LatentBatch> {
        check_image_batch(x)?;
        let (mean, logvar) = self.vae.encode_moments(x, domain, ctx)?;
        let sample = match noise {
            LatentNoise::Zero => mean.clone(),
            LatentNoise::Explicit(eps) => {
                if eps.dims() != mean.dims() {
                    return Err(Error::Contract(format!(
                        "noise shape {:?} does not match latent {:?}",
                        eps.dims(),
                        mean.dims()
                    )));
                }
                reparameterize(&mean, &logvar, eps)?
            }
            LatentNoise::Sample(rng) => {
                let eps = normal_tensor(rng, mean.dims(), mean.dtype())?;
                reparameterize(&mean, &logvar, &eps)?
            }
        };
        Ok(LatentBatch { mean, logvar, sample })
    }

    fn check_latent(&self, z: &Tensor) -> Result<()> {
        let want = self.latent_dims(z.dims().first().copied().unwrap_or(0));
        if z.dims() != want {
            return Err(Error::Contract(format!("expected latent {want:?}, got {:?}", z.dims())));
        }
        Ok(())
    }

    pub fn decode(&self, z: &Tensor, domain: Domain, ctx: &ForwardCtx) -> Result<Tensor> {
        self.check_latent(z)?;
        self.vae.decoder(domain).forward_range(z, 0..DECODER_DEPTH, ctx, None)
    }

    /// First `n_high` layers of the `channel.high()` decoder, then the last
    /// `n_low` layers of the `channel.low()` decoder. `noise` perturbs only the
    /// low stack.
    pub fn graft(
        &self,
        z: &Tensor,
        channel: Channel,
        split: StackSplit,
        ctx: &ForwardCtx,
        noise: Option<&mut PreActNoise<'_>>,
    ) -> Result<Tensor> {
        self.check_latent(z)?;
        let cut = split.n_high();
        let h = self.vae.decoder(channel.high()).forward_range(z, 0..cut, ctx, None)?;
        self.vae.decoder(channel.low()).forward_range(&h, cut..DECODER_DEPTH, ctx, noise)
    }

    pub fn generate(&self, association: &Tensor, channel: Channel, ctx: &ForwardCtx) -> Result<Tensor> {
        check_image_batch(association)?;
        self.generators[channel.index()].forward(association, ctx)
    }

    pub fn discriminate(&self, batch: &Tensor, channel: Channel) -> Result<DiscOutput> {
        check_image_batch(batch)?;
        self.discriminators[channel.index()].forward(batch)
    }

    /// Inference path for target images: posterior mean, graft, generator,
    /// discriminator heads.
    pub fn classify_target(&self, x: &Tensor, channel: Channel, split: StackSplit) -> Result<DiscOutput> {
        let ctx = ForwardCtx::EVAL;
        let z = self.encode(x, Domain::Target, LatentNoise::Zero, &ctx)?;
        let assoc = self.graft(&z.sample, channel, split, &ctx, None)?;
        let fake = self.generate(&assoc, channel, &ctx)?;
        self.discriminate(&fake, channel)
    }
}

fn reparameterize(mean: &Tensor, logvar: &Tensor, eps: &Tensor) -> Result<Tensor> {
    let std = (logvar.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP)? * 0.5)?.exp()?;
    Ok((mean + (std * eps)?)?)
}
