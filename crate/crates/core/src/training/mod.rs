//! Three-phase alternating optimization.
//!
//! Each round samples one batch per domain and runs, in order:
//!
//! 1. [`TrainState::step_vae`]: encoders and decoders against the VAE loss;
//! 2. [`TrainState::step_discriminator`]: both discriminators (with their class
//!    heads) against the discriminator loss plus the task loss on source
//!    associations;
//! 3. [`TrainState::step_generator`]: encoders and generators against the
//!    generator loss, plus content constancy when enabled.
//!
//! Batch-norm running statistics move only for groups being updated. Decoders
//! can be frozen for CGRS transfer.

pub mod config;
pub mod optim;

use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datasets::{self, ImagePool, LabeledImageSet, Split};
use crate::error::{Error, Result};
use crate::losses::{self, scalar, LossReport};
use crate::networks::params::GroupSet;
use crate::networks::{
    images_to_tensor, Channel, Domain, ForwardCtx, LatentNoise, Model, PreActNoise, StackSplit,
};
use crate::persistence;
use crate::MODEL_CHANNELS;
use config::ExperimentConfig;
use optim::Adam;

/// Stream of the training RNG; stream 0 of the same seed initializes parameters.
const TRAIN_RNG_STREAM: u64 = 1;

/// `lr0 · decay^⌊step / decay_every⌋`.
pub fn lr_schedule(step: u64, cfg: &ExperimentConfig) -> f64 {
    let k = step / cfg.decay_every.max(1);
    cfg.lr0 * cfg.decay.powi(k.min(i32::MAX as u64) as i32)
}

/// Reads a content mask: whitespace-separated numbers, 0 or 1.
pub fn load_mask(path: &Path, dtype: candle_core::DType) -> Result<Tensor> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let values = text
        .split_whitespace()
        .map(|t| match t.parse::<f64>() {
            Ok(v) if v == 0.0 || v == 1.0 => Ok(v),
            _ => Err(Error::ingest(path, format!("mask value {t:?} is not 0 or 1"))),
        })
        .collect::<Result<Vec<f64>>>()?;
    let n = values.len();
    Ok(Tensor::from_vec(values, n, &Device::Cpu)?.to_dtype(dtype)?)
}

/// Everything training reads: labeled source, unlabeled target, and in
/// semi-supervised mode a small labeled target subset.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub source: LabeledImageSet,
    pub target: ImagePool,
    pub target_labeled: Option<LabeledImageSet>,
    pub mask: Option<Tensor>,
}

impl TrainData {
    /// Builds training data from raw `[0, 1]` sets. Target labels are dropped
    /// except for the per-class semi-supervised subset.
    pub fn from_sets(source: &LabeledImageSet, target: &LabeledImageSet, cfg: &ExperimentConfig) -> Result<Self> {
        let limit = |s: &LabeledImageSet| match cfg.train_limit {
            Some(n) => s.truncated(n),
            None => s.clone(),
        };
        let source = datasets::preprocess(&limit(source), MODEL_CHANNELS)?;
        let target_full = datasets::preprocess(&limit(target), MODEL_CHANNELS)?;
        if source.is_empty() || target_full.is_empty() {
            return Err(Error::Data("training sets must not be empty".into()));
        }
        let target_labeled = match cfg.semi_supervised_target_count {
            0 => None,
            n => Some(target_full.per_class_subset(n)),
        };
        let mask = cfg.mask_path.as_deref().map(|p| load_mask(p, cfg.dtype())).transpose()?;
        Ok(TrainData {
            source,
            target: target_full.unlabeled(),
            target_labeled,
            mask,
        })
    }

    /// Loads the scenario's training splits from `cfg.data_root`.
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let s = datasets::load_dataset(cfg.scenario.source, Split::Train, &cfg.data_root)?;
        let t = datasets::load_dataset(cfg.scenario.target, Split::Train, &cfg.data_root)?;
        Self::from_sets(&s, &t, cfg)
    }

    pub fn sample_batch(&self, rng: &mut ChaCha8Rng, batch_size: usize, dtype: candle_core::DType) -> Result<Batch> {
        let pick = |rng: &mut ChaCha8Rng, n: usize| -> Vec<usize> { (0..batch_size).map(|_| rng.gen_range(0..n)).collect() };
        let si = pick(rng, self.source.len());
        let ti = pick(rng, self.target.len());
        let gather = |imgs: &mut Vec<f32>, img: &[f32]| imgs.extend_from_slice(img);
        let mut xs = Vec::with_capacity(batch_size * self.source.image_len());
        let mut xt = Vec::with_capacity(batch_size * self.target.image_len());
        for &i in &si {
            gather(&mut xs, self.source.image(i));
        }
        for &i in &ti {
            gather(&mut xt, self.target.image(i));
        }
        let extra = match &self.target_labeled {
            Some(set) if !set.is_empty() => {
                let idx = pick(rng, set.len());
                let mut px = Vec::with_capacity(idx.len() * set.image_len());
                for &i in &idx {
                    gather(&mut px, set.image(i));
                }
                Some((images_to_tensor(&px, idx.len(), dtype)?, idx.iter().map(|&i| set.label(i)).collect()))
            }
            _ => None,
        };
        Ok(Batch {
            x_s: images_to_tensor(&xs, batch_size, dtype)?,
            y_s: si.iter().map(|&i| self.source.label(i)).collect(),
            x_t: images_to_tensor(&xt, batch_size, dtype)?,
            extra,
            mask: self.mask.clone(),
        })
    }
}

fn accumulate(acc: &mut Option<Tensor>, t: Tensor) -> Result<()> {
    *acc = Some(match acc.take() {
        Some(a) => (a + t)?,
        None => t,
    });
    Ok(())
}

/// One round's inputs, as NCHW tensors in `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x_s: Tensor,
    pub y_s: Vec<u8>,
    pub x_t: Tensor,
    /// Labeled target images for the classifier (semi-supervised mode).
    pub extra: Option<(Tensor, Vec<u8>)>,
    /// Content-loss mask; `None` is all ones.
    pub mask: Option<Tensor>,
}

/// Which training phase a step belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Vae,
    Discriminator,
    Generator,
}

impl Phase {
    pub fn update_set(self) -> GroupSet {
        match self {
            Phase::Vae => GroupSet::VAE,
            Phase::Discriminator => GroupSet::DISCRIMINATORS,
            Phase::Generator => GroupSet::ENCODERS.union(GroupSet::GENERATORS),
        }
    }
}

/// Parameters, optimizer moments, step counter and RNG of a run.
#[derive(Debug)]
pub struct TrainState {
    pub config: ExperimentConfig,
    pub model: Model,
    pub opt_vae: Adam,
    pub opt_disc: Adam,
    pub opt_gen: Adam,
    /// Completed rounds.
    pub step: u64,
    pub rng: ChaCha8Rng,
    /// Groups excluded from every update set.
    pub frozen: GroupSet,
}

impl TrainState {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::build(&config.arch, config.seed, config.dtype())?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(TRAIN_RNG_STREAM);
        Ok(TrainState {
            opt_vae: Adam::new(config.adam),
            opt_disc: Adam::new(config.adam),
            opt_gen: Adam::new(config.adam),
            config,
            model,
            step: 0,
            rng,
            frozen: GroupSet::EMPTY,
        })
    }

    pub fn lr(&self) -> f64 {
        lr_schedule(self.step, &self.config)
    }

    pub fn split(&self) -> StackSplit {
        self.config.split
    }

    pub fn update_set(&self, phase: Phase) -> GroupSet {
        phase.update_set().minus(self.frozen)
    }

    /// Graft for `channel` with the configured split and optional noise.
    fn associate(&mut self, z: &Tensor, channel: Channel, ctx: &ForwardCtx) -> Result<Tensor> {
        let sigma = self.config.effective_graft_sigma();
        let mut noise = PreActNoise {
            rng: &mut self.rng,
            sigma,
        };
        let noise = (sigma > 0.0).then_some(&mut noise);
        self.model.graft(z, channel, self.config.split, ctx, noise)
    }

    fn check_finite(&self, report: &LossReport, phase: Phase) -> Result<()> {
        match report.first_non_finite() {
            None => Ok(()),
            Some(field) => Err(Error::Numeric {
                step: self.step,
                msg: format!("{field} is not finite in the {phase:?} phase"),
            }),
        }
    }

    fn apply(&mut self, phase: Phase, loss: &Tensor) -> Result<()> {
        let params = self.model.store.weights(self.update_set(phase));
        let grads = loss.backward()?;
        let lr = self.lr();
        let opt = match phase {
            Phase::Vae => &mut self.opt_vae,
            Phase::Discriminator => &mut self.opt_disc,
            Phase::Generator => &mut self.opt_gen,
        };
        opt.step(&params, &grads, lr)?;
        Ok(())
    }

    fn guarded<F>(&mut self, phase: Phase, f: F) -> Result<LossReport>
    where
        F: FnOnce(&mut Self) -> Result<LossReport>,
    {
        // Running statistics move during the forward pass; keep a copy so a
        // rejected step leaves no trace.
        let saved = self
            .model
            .store
            .buffers(self.update_set(phase))
            .into_iter()
            .map(|(_, v)| Ok((v.as_tensor().copy()?, v)))
            .collect::<Result<Vec<_>>>()?;
        let restore = |saved: Vec<(Tensor, candle_core::Var)>| -> Result<()> {
            for (t, v) in saved {
                v.set(&t)?;
            }
            Ok(())
        };
        if !self.config.verify_update_sets {
            return f(self).or_else(|e| {
                restore(saved)?;
                Err(e)
            });
        }
        let fixed = self.update_set(phase).complement();
        let before = fixed
            .iter()
            .map(|g| Ok((g, self.model.store.group_digest(g)?)))
            .collect::<Result<Vec<_>>>()?;
        let report = match f(self) {
            Ok(r) => r,
            Err(e) => {
                restore(saved)?;
                return Err(e);
            }
        };
        for (g, digest) in before {
            if self.model.store.group_digest(g)? != digest {
                return Err(Error::Contract(format!("{phase:?} phase changed frozen group {g}")));
            }
        }
        Ok(report)
    }

    /// Phase 1: encoders and decoders against the VAE loss.
    pub fn step_vae(&mut self, batch: &Batch) -> Result<LossReport> {
        self.guarded(Phase::Vae, |st| {
            let ctx = ForwardCtx::train(st.update_set(Phase::Vae));
            let m = &st.model;
            let zs = m.encode(&batch.x_s, Domain::Source, LatentNoise::Sample(&mut st.rng), &ctx)?;
            let zt = m.encode(&batch.x_t, Domain::Target, LatentNoise::Sample(&mut st.rng), &ctx)?;
            let rs = m.decode(&zs.sample, Domain::Source, &ctx)?;
            let rt = m.decode(&zt.sample, Domain::Target, &ctx)?;
            let terms = losses::vae_loss(&batch.x_s, &batch.x_t, &rs, &rt, &zs, &zt, &st.config.weights)?;
            let report = LossReport {
                vae_total: scalar(&terms.total)?,
                vae_like: scalar(&terms.like)?,
                vae_prior: scalar(&terms.prior)?,
                ..Default::default()
            };
            st.check_finite(&report, Phase::Vae)?;
            st.apply(Phase::Vae, &terms.total)?;
            Ok(report)
        })
    }

    /// Phase 2: discriminators and their class heads.
    pub fn step_discriminator(&mut self, batch: &Batch) -> Result<LossReport> {
        self.guarded(Phase::Discriminator, |st| {
            let ctx = ForwardCtx::train(st.update_set(Phase::Discriminator));
            let w = st.config.weights;
            let zs = st.model.encode(&batch.x_s, Domain::Source, LatentNoise::Sample(&mut st.rng), &ctx)?;
            let zt = st.model.encode(&batch.x_t, Domain::Target, LatentNoise::Sample(&mut st.rng), &ctx)?;
            let extra_z = match &batch.extra {
                Some((x, _)) => Some(st.model.encode(x, Domain::Target, LatentNoise::Sample(&mut st.rng), &ctx)?),
                None => None,
            };
            let mut report = LossReport::default();
            let mut total: Option<Tensor> = None;
            let mut task: Option<Tensor> = None;
            for ch in Channel::BOTH {
                let real = st.associate(&zs.sample, ch, &ctx)?.detach();
                let assoc_t = st.associate(&zt.sample, ch, &ctx)?;
                let fake = st.model.generate(&assoc_t, ch, &ctx)?.detach();
                let d_real = st.model.discriminate(&real, ch)?;
                let d_fake = st.model.discriminate(&fake, ch)?;
                let disc = losses::disc_loss(&d_real.domain_logit, &d_fake.domain_logit, &w)?;
                let ce = losses::cross_entropy(&d_real.class_logits, &batch.y_s)?;
                match ch {
                    Channel::St => report.disc_st = scalar(&disc)?,
                    Channel::Ts => report.disc_ts = scalar(&disc)?,
                }
                accumulate(&mut total, disc)?;
                accumulate(&mut task, ce)?;
                if let (Some((_, labels)), Some(z)) = (&batch.extra, &extra_z) {
                    let assoc = st.associate(&z.sample, ch, &ctx)?;
                    let gen = st.model.generate(&assoc, ch, &ctx)?.detach();
                    let logits = st.model.discriminate(&gen, ch)?.class_logits;
                    accumulate(&mut task, losses::cross_entropy(&logits, labels)?)?;
                }
            }
            let task = task.expect("two channels");
            report.task = scalar(&task)?;
            let total = (total.expect("two channels") + task)?;
            st.check_finite(&report, Phase::Discriminator)?;
            st.apply(Phase::Discriminator, &total)?;
            Ok(report)
        })
    }

    /// Phase 3: encoders and generators against the generator loss (plus
    /// content constancy when enabled).
    pub fn step_generator(&mut self, batch: &Batch) -> Result<LossReport> {
        self.guarded(Phase::Generator, |st| {
            let ctx = ForwardCtx::train(st.update_set(Phase::Generator));
            let w = st.config.weights;
            let zs = st.model.encode(&batch.x_s, Domain::Source, LatentNoise::Sample(&mut st.rng), &ctx)?;
            let zt = st.model.encode(&batch.x_t, Domain::Target, LatentNoise::Sample(&mut st.rng), &ctx)?;
            let mut report = LossReport::default();
            let mut total: Option<Tensor> = None;
            for ch in Channel::BOTH {
                let assoc_t = st.associate(&zt.sample, ch, &ctx)?;
                let fake = st.model.generate(&assoc_t, ch, &ctx)?;
                let adv = losses::gen_loss(&st.model.discriminate(&fake, ch)?.domain_logit, &w)?;
                let mut term = adv.clone();
                let adv_v = scalar(&adv)?;
                let content_v = if st.config.content_constancy {
                    let real = st.associate(&zs.sample, ch, &ctx)?;
                    let c = losses::content_loss(&real, &fake, batch.mask.as_ref(), &w)?;
                    let v = scalar(&c)?;
                    term = (term + c)?;
                    v
                } else {
                    0.0
                };
                match ch {
                    Channel::St => (report.adv_st, report.content_st) = (adv_v, content_v),
                    Channel::Ts => (report.adv_ts, report.content_ts) = (adv_v, content_v),
                }
                accumulate(&mut total, term)?;
            }
            st.check_finite(&report, Phase::Generator)?;
            st.apply(Phase::Generator, &total.expect("two channels"))?;
            Ok(report)
        })
    }

    /// Samples a batch and runs the three phases; advances `step`.
    pub fn round(&mut self, data: &TrainData) -> Result<LossReport> {
        let batch = data.sample_batch(&mut self.rng, self.config.batch_size, self.config.dtype())?;
        let r1 = self.step_vae(&batch)?;
        let r2 = self.step_discriminator(&batch)?;
        let r3 = self.step_generator(&batch)?;
        self.step += 1;
        Ok(r1.merge(r2).merge(r3))
    }
}

/// CSV training log: `step,lr,<loss fields>,objective`.
pub struct TrainLog {
    writer: csv::Writer<std::fs::File>,
}

impl TrainLog {
    pub const FILE: &'static str = "train_log.csv";

    /// Opens `path` for appending, writing the header if the file is new.
    pub fn open(path: &Path) -> Result<Self> {
        let fresh = !path.exists() || std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut writer = csv::Writer::from_writer(file);
        if fresh {
            let mut header = vec!["step", "lr"];
            header.extend(LossReport::FIELDS);
            header.push("objective");
            writer.write_record(&header).map_err(|e| csv_err(path, e))?;
        }
        Ok(TrainLog { writer })
    }

    pub fn append(&mut self, step: u64, lr: f64, r: &LossReport) -> Result<()> {
        let mut row = vec![step.to_string(), format!("{lr:e}")];
        row.extend(r.values().iter().map(|v| v.to_string()));
        row.push(r.objective().to_string());
        self.writer.write_record(&row).map_err(|e| csv_err(Path::new(TrainLog::FILE), e))?;
        self.writer.flush().map_err(|e| Error::io(TrainLog::FILE, e))
    }
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other:?}", path.display())),
    }
}

/// Result of [`run_training`].
#[derive(Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub last_report: Option<LossReport>,
}

pub fn checkpoint_path(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join(format!("checkpoint-{step:07}.ckpt"))
}

pub const FINAL_CHECKPOINT: &str = "final.ckpt";

/// Runs rounds until `state.step` reaches the configured total, logging every
/// `log_every` rounds and checkpointing every `checkpoint_every`. On a
/// non-finite loss the pre-update state is saved as `diagnostic-<step>.ckpt`
/// and the numerical error is returned.
pub fn run_training_from(mut state: TrainState, data: &TrainData) -> Result<TrainOutcome> {
    let out = state.config.out_dir.clone();
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let log_path = out.join(TrainLog::FILE);
    let mut log = TrainLog::open(&log_path)?;
    let total = state.config.total_steps();
    let mut last = None;
    while state.step < total {
        let lr = state.lr();
        let report = match state.round(data) {
            Ok(r) => r,
            Err(e @ Error::Numeric { .. }) => {
                let diag = out.join(format!("diagnostic-{:07}.ckpt", state.step));
                match persistence::save_checkpoint(&state, &diag) {
                    Ok(_) => log::error!("{e}; diagnostic checkpoint written to {}", diag.display()),
                    Err(save) => log::error!("{e}; diagnostic checkpoint failed: {save}"),
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        let done = state.step;
        if done.is_multiple_of(state.config.log_every.max(1)) || done == total {
            log.append(done, lr, &report)?;
            log::info!("step {done}/{total} lr {lr:.3e} objective {:.4}", report.objective());
        }
        if state.config.checkpoint_every > 0 && done.is_multiple_of(state.config.checkpoint_every) && done < total {
            persistence::save_checkpoint(&state, &checkpoint_path(&out, done))?;
        }
        last = Some(report);
    }
    let checkpoint = out.join(FINAL_CHECKPOINT);
    persistence::save_checkpoint(&state, &checkpoint)?;
    Ok(TrainOutcome {
        state,
        checkpoint,
        log: log_path,
        last_report: last,
    })
}

/// Fresh run: loads data per the config and trains from step 0.
pub fn run_training(config: ExperimentConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let data = TrainData::load(&config)?;
    run_training_from(TrainState::new(config)?, &data)
}
