//! Loss families: VAE (likelihood + prior), adversarial, content constancy
//! (masked pairwise MSE) and task cross-entropy.
//!
//! Every function returns a scalar tensor that stays on the autodiff tape.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::networks::{LatentBatch, LOGVAR_CLAMP};
use crate::NUM_CLASSES;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Adversarial terms.
    pub lambda0: f64,
    /// Reconstruction likelihood.
    pub lambda1: f64,
    /// KL prior.
    pub lambda2: f64,
    /// Content constancy.
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda0: 1.0,
            lambda1: 10.0,
            lambda2: 0.01,
            lambda3: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda0, self.lambda1, self.lambda2, self.lambda3];
        if all.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return config_err(format!("loss weights must be finite and nonnegative, got {all:?}"));
        }
        Ok(())
    }
}

/// Weighted loss values of one round. Fields a phase does not compute stay 0.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub vae_total: f64,
    pub vae_like: f64,
    pub vae_prior: f64,
    /// Discriminator objective per channel.
    pub disc_st: f64,
    pub disc_ts: f64,
    /// Generator-side adversarial loss per channel.
    pub adv_st: f64,
    pub adv_ts: f64,
    pub content_st: f64,
    pub content_ts: f64,
    pub task: f64,
}

impl LossReport {
    pub const FIELDS: [&'static str; 10] = [
        "vae_total",
        "vae_like",
        "vae_prior",
        "disc_st",
        "disc_ts",
        "adv_st",
        "adv_ts",
        "content_st",
        "content_ts",
        "task",
    ];

    pub fn values(&self) -> [f64; 10] {
        [
            self.vae_total,
            self.vae_like,
            self.vae_prior,
            self.disc_st,
            self.disc_ts,
            self.adv_st,
            self.adv_ts,
            self.content_st,
            self.content_ts,
            self.task,
        ]
    }

    /// Overall objective: VAE + adversarial + content + task.
    pub fn objective(&self) -> f64 {
        self.vae_total + self.adv_st + self.adv_ts + self.content_st + self.content_ts + self.task
    }

    /// Name of the first non-finite field.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        Self::FIELDS
            .into_iter()
            .zip(self.values())
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| n)
    }

    /// Fieldwise sum; phases fill disjoint fields.
    pub fn merge(self, other: LossReport) -> LossReport {
        LossReport {
            vae_total: self.vae_total + other.vae_total,
            vae_like: self.vae_like + other.vae_like,
            vae_prior: self.vae_prior + other.vae_prior,
            disc_st: self.disc_st + other.disc_st,
            disc_ts: self.disc_ts + other.disc_ts,
            adv_st: self.adv_st + other.adv_st,
            adv_ts: self.adv_ts + other.adv_ts,
            content_st: self.content_st + other.content_st,
            content_ts: self.content_ts + other.content_ts,
            task: self.task + other.task,
        }
    }
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// `KL(N(mean, exp(logvar)) || N(0, I))` summed over latent dimensions and
/// averaged over the batch.
pub fn kl_prior(mean: &Tensor, logvar: &Tensor) -> Result<Tensor> {
    let lv = logvar.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP)?;
    let per = ((mean.sqr()? + lv.exp()?)? - lv)?;
    let per = (per - 1.0)?.flatten_from(1)?.sum(1)?;
    Ok((per.mean_all()? * 0.5)?)
}

/// Mean squared error over every element.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((a - b)?.sqr()?.mean_all()?)
}

/// The three VAE terms, already weighted.
#[derive(Debug, Clone)]
pub struct VaeTerms {
    pub total: Tensor,
    pub like: Tensor,
    pub prior: Tensor,
}

#[allow(clippy::too_many_arguments)]
pub fn vae_loss(
    x_s: &Tensor,
    x_t: &Tensor,
    recon_s: &Tensor,
    recon_t: &Tensor,
    lat_s: &LatentBatch,
    lat_t: &LatentBatch,
    w: &LossWeights,
) -> Result<VaeTerms> {
    for (x, r) in [(x_s, recon_s), (x_t, recon_t)] {
        if x.dims() != r.dims() {
            return Err(Error::Contract(format!(
                "reconstruction shape {:?} does not match input {:?}",
                r.dims(),
                x.dims()
            )));
        }
    }
    let like = ((mse(x_s, recon_s)? + mse(x_t, recon_t)?)? * w.lambda1)?;
    let prior = ((kl_prior(&lat_s.mean, &lat_s.logvar)? + kl_prior(&lat_t.mean, &lat_t.logvar)?)? * w.lambda2)?;
    Ok(VaeTerms {
        total: (&like + &prior)?,
        like,
        prior,
    })
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let relu = x.relu()?;
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((relu + tail)?)
}

/// `log sigmoid(x) = -softplus(-x)`.
pub fn log_sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(softplus(&x.neg()?)?.neg()?)
}

/// `-λ0 [E log D(real) + E log(1 - D(fake))]` from domain logits.
pub fn disc_loss(real_logit: &Tensor, fake_logit: &Tensor, w: &LossWeights) -> Result<Tensor> {
    let real = log_sigmoid(real_logit)?.mean_all()?;
    let fake = log_sigmoid(&fake_logit.neg()?)?.mean_all()?;
    Ok(((real + fake)? * -w.lambda0)?)
}

/// Non-saturating generator loss `-λ0 E log D(fake)`.
pub fn gen_loss(fake_logit: &Tensor, w: &LossWeights) -> Result<Tensor> {
    Ok((log_sigmoid(fake_logit)?.mean_all()? * -w.lambda0)?)
}

/// Masked pairwise mean squared error, averaged over the batch.
///
/// With `d = a - b` per image and `k` elements per image:
/// `(1/k) Σ (d∘m)² - (1/k²) (dᵀm)²`. The mask holds either one value per
/// element or one per pixel (shared by all channels); `None` is all ones.
pub fn pmse(a: &Tensor, b: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
    if a.dims() != b.dims() || a.rank() < 2 {
        return Err(Error::Contract(format!("pmse inputs {:?} and {:?}", a.dims(), b.dims())));
    }
    let k = a.dims()[1..].iter().product::<usize>();
    if k == 0 {
        return config_err("pmse needs at least one element per image");
    }
    let mut d = (a - b)?;
    if let Some(m) = mask {
        d = d.broadcast_mul(&expand_mask(m, a.dims(), a.dtype())?)?;
    }
    let d = d.flatten_from(1)?;
    let kf = k as f64;
    let sq = (d.sqr()?.sum(1)? / kf)?;
    let lin = (d.sum(1)?.sqr()? / (kf * kf))?;
    Ok((sq - lin)?.mean_all()?)
}

fn expand_mask(m: &Tensor, dims: &[usize], dtype: DType) -> Result<Tensor> {
    let per_element: usize = dims[1..].iter().product();
    let per_pixel: usize = dims[2..].iter().product();
    let n = m.elem_count();
    let mut shape = vec![1usize];
    if n == per_element {
        shape.extend_from_slice(&dims[1..]);
    } else if dims.len() == 4 && n == per_pixel {
        shape.push(1);
        shape.extend_from_slice(&dims[2..]);
    } else {
        return config_err(format!("mask of {n} values fits neither {per_element} elements nor {per_pixel} pixels"));
    }
    Ok(m.reshape(shape)?.to_dtype(dtype)?)
}

/// λ3-weighted content-constancy term of one channel.
pub fn content_loss(real: &Tensor, fake: &Tensor, mask: Option<&Tensor>, w: &LossWeights) -> Result<Tensor> {
    Ok((pmse(real, fake, mask)? * w.lambda3)?)
}

/// Row-wise log-softmax.
pub fn log_softmax(logits: &Tensor) -> Result<Tensor> {
    let max = logits.max_keepdim(D::Minus1)?.detach();
    let shifted = logits.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Labels as a (batch,) `u32` tensor, validated.
pub fn label_tensor(labels: &[u8], device: &candle_core::Device) -> Result<Tensor> {
    if let Some(bad) = labels.iter().find(|l| usize::from(**l) >= NUM_CLASSES) {
        return Err(Error::Data(format!("label {bad} outside [0, {NUM_CLASSES})")));
    }
    let v: Vec<u32> = labels.iter().map(|l| u32::from(*l)).collect();
    Ok(Tensor::from_vec(v, labels.len(), device)?)
}

/// Mean softmax cross-entropy of (batch, classes) logits.
pub fn cross_entropy(logits: &Tensor, labels: &[u8]) -> Result<Tensor> {
    let (n, _) = logits.dims2()?;
    if n != labels.len() {
        return Err(Error::Contract(format!("{n} logit rows for {} labels", labels.len())));
    }
    let idx = label_tensor(labels, logits.device())?.unsqueeze(1)?;
    let picked = log_softmax(logits)?.gather(&idx, 1)?;
    Ok(picked.mean_all()?.neg()?)
}

/// Cross-entropy of both channels' classifiers, summed.
pub fn task_loss(logits_st: &Tensor, logits_ts: &Tensor, labels: &[u8]) -> Result<Tensor> {
    Ok((cross_entropy(logits_st, labels)? + cross_entropy(logits_ts, labels)?)?)
}
