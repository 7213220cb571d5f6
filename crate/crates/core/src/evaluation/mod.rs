//! Accuracy measurement, baselines, CGRS sweeps and transfer, plus exports.

pub mod export;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::{Tensor, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{self, LabeledImageSet, Split};
use crate::error::{config_err, Error, Result};
use crate::losses;
use crate::networks::heads::Discriminator;
use crate::networks::params::{Group, GroupSet, ParamStore};
use crate::networks::{images_to_tensor, Channel, Model, StackSplit};
use crate::persistence;
use crate::training::config::ExperimentConfig;
use crate::training::optim::Adam;
use crate::training::{csv_err, lr_schedule, run_training_from, TrainData, TrainOutcome, TrainState};
use crate::MODEL_CHANNELS;

pub use export::{export_associations, export_features};

/// Which prediction an accuracy refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalChannel {
    St,
    Ts,
    /// Average of both channels' softmax outputs.
    Combined,
}

impl EvalChannel {
    pub fn single(self) -> Option<Channel> {
        match self {
            EvalChannel::St => Some(Channel::St),
            EvalChannel::Ts => Some(Channel::Ts),
            EvalChannel::Combined => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EvalChannel::St => "st",
            EvalChannel::Ts => "ts",
            EvalChannel::Combined => "combined",
        }
    }
}

impl From<Channel> for EvalChannel {
    fn from(c: Channel) -> Self {
        match c {
            Channel::St => EvalChannel::St,
            Channel::Ts => EvalChannel::Ts,
        }
    }
}

impl fmt::Display for EvalChannel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EvalChannel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "st" => Ok(EvalChannel::St),
            "ts" => Ok(EvalChannel::Ts),
            "combined" => Ok(EvalChannel::Combined),
            _ => config_err(format!("unknown channel {s:?} (expected st, ts or combined)")),
        }
    }
}

/// One row of the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scenario: String,
    /// `st`, `ts`, `combined`, or the baseline name.
    pub channel: String,
    pub split: String,
    pub accuracy: f64,
    pub correct: usize,
    pub n_test: usize,
    pub checkpoint_step: u64,
    /// Training rounds behind the model (sweeps and baselines record their budget).
    pub train_steps: u64,
}

impl EvalReport {
    fn new(scenario: String, channel: String, split: String, correct: usize, n_test: usize, step: u64) -> Self {
        EvalReport {
            scenario,
            channel,
            split,
            accuracy: if n_test == 0 { 0.0 } else { correct as f64 / n_test as f64 },
            correct,
            n_test,
            checkpoint_step: step,
            train_steps: step,
        }
    }
}

fn preprocessed(set: &LabeledImageSet) -> Result<LabeledImageSet> {
    if set.is_normalized() {
        if set.channels() != MODEL_CHANNELS {
            return config_err(format!("{}: expected {MODEL_CHANNELS} channels", set.name));
        }
        Ok(set.clone())
    } else {
        datasets::preprocess(set, MODEL_CHANNELS)
    }
}

/// Class scores of `x` for a channel, or the mean of both channels' softmax.
pub fn class_probs(model: &Model, x: &Tensor, channel: EvalChannel, split: StackSplit) -> Result<Tensor> {
    let probs = |c: Channel| -> Result<Tensor> {
        let logits = model.classify_target(x, c, split)?.class_logits;
        Ok(losses::log_softmax(&logits)?.exp()?)
    };
    match channel.single() {
        Some(c) => probs(c),
        None => Ok(((probs(Channel::St)? + probs(Channel::Ts)?)? * 0.5)?),
    }
}

/// Predicted labels for every image of `set` (raw or preprocessed).
pub fn predict(
    model: &Model,
    set: &LabeledImageSet,
    channel: EvalChannel,
    split: StackSplit,
    batch_size: usize,
) -> Result<Vec<u8>> {
    let set = preprocessed(set)?;
    let mut out = Vec::with_capacity(set.len());
    let per = set.image_len();
    for start in (0..set.len()).step_by(batch_size.max(1)) {
        let end = (start + batch_size).min(set.len());
        let x = images_to_tensor(&set.images()[start * per..end * per], end - start, model.dtype())?;
        let p = class_probs(model, &x, channel, split)?;
        out.extend(p.argmax(D::Minus1)?.to_vec1::<u32>()?.into_iter().map(|c| c as u8));
    }
    Ok(out)
}

/// Accuracy of the target pipeline (encode, graft, generate, classify) on a
/// labeled test set.
pub fn evaluate_accuracy(
    state: &TrainState,
    target_test: &LabeledImageSet,
    channel: EvalChannel,
) -> Result<EvalReport> {
    let cfg = &state.config;
    let pred = predict(&state.model, target_test, channel, cfg.split, cfg.eval_batch_size)?;
    let correct = pred.iter().zip(target_test.labels()).filter(|(p, y)| p == y).count();
    Ok(EvalReport::new(
        cfg.scenario.to_string(),
        channel.to_string(),
        cfg.split.to_string(),
        correct,
        target_test.len(),
        state.step,
    ))
}

/// The target test split named by a config, truncated to `test_limit`.
pub fn load_target_test(cfg: &ExperimentConfig) -> Result<LabeledImageSet> {
    let set = datasets::load_dataset(cfg.scenario.target, Split::Test, &cfg.data_root)?;
    Ok(match cfg.test_limit {
        Some(n) => set.truncated(n),
        None => set,
    })
}

/// Loads a checkpoint and evaluates it on its scenario's target test split.
pub fn evaluate_checkpoint(path: &Path, channel: EvalChannel, data_root: Option<&Path>) -> Result<EvalReport> {
    let state = persistence::load_checkpoint(path, None)?;
    let mut cfg = state.config.clone();
    if let Some(r) = data_root {
        cfg.data_root = r.to_path_buf();
    }
    evaluate_accuracy(&state, &load_target_test(&cfg)?, channel)
}

/// Lower and upper bounds: a plain classifier trained on one labeled set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Baseline {
    SourceOnly,
    TargetOnly,
}

impl Baseline {
    pub fn as_str(self) -> &'static str {
        match self {
            Baseline::SourceOnly => "source-only",
            Baseline::TargetOnly => "target-only",
        }
    }
}

/// Trains a discriminator-shaped classifier (conv trunk and class head) on
/// `train` with cross-entropy for `steps` batches and scores it on `test`.
pub fn train_classifier(
    train: &LabeledImageSet,
    test: &LabeledImageSet,
    cfg: &ExperimentConfig,
    steps: u64,
) -> Result<(usize, usize)> {
    let train = preprocessed(train)?;
    let test = preprocessed(test)?;
    if train.is_empty() {
        return Err(Error::Data("baseline training set is empty".into()));
    }
    let dtype = cfg.dtype();
    let mut init = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new(dtype);
    let net = Discriminator::build(&mut store, Group::DiscSt, &cfg.arch, &mut init)?;
    let params = store.weights(GroupSet::ALL);
    let mut adam = Adam::new(cfg.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    let per = train.image_len();
    for step in 0..steps {
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.gen_range(0..train.len())).collect();
        let mut px = Vec::with_capacity(idx.len() * per);
        for &i in &idx {
            px.extend_from_slice(train.image(i));
        }
        let labels: Vec<u8> = idx.iter().map(|&i| train.label(i)).collect();
        let x = images_to_tensor(&px, idx.len(), dtype)?;
        let loss = losses::cross_entropy(&net.forward(&x)?.class_logits, &labels)?;
        let v = losses::scalar(&loss)?;
        if !v.is_finite() {
            return Err(Error::Numeric {
                step,
                msg: "baseline cross-entropy is not finite".into(),
            });
        }
        adam.step(&params, &loss.backward()?, lr_schedule(step, cfg))?;
    }
    let mut correct = 0;
    let tper = test.image_len();
    for start in (0..test.len()).step_by(cfg.eval_batch_size.max(1)) {
        let end = (start + cfg.eval_batch_size).min(test.len());
        let x = images_to_tensor(&test.images()[start * tper..end * tper], end - start, dtype)?;
        let pred = net.forward(&x)?.class_logits.argmax(D::Minus1)?.to_vec1::<u32>()?;
        correct += pred
            .iter()
            .zip(&test.labels()[start..end])
            .filter(|(p, y)| **p == u32::from(**y))
            .count();
    }
    Ok((correct, test.len()))
}

/// Source-only (lower bound) or target-only (upper bound) accuracy on the
/// target test split, trained for the config's step count.
pub fn evaluate_baseline(cfg: &ExperimentConfig, kind: Baseline) -> Result<EvalReport> {
    cfg.validate()?;
    let domain = match kind {
        Baseline::SourceOnly => cfg.scenario.source,
        Baseline::TargetOnly => cfg.scenario.target,
    };
    let mut train = datasets::load_dataset(domain, Split::Train, &cfg.data_root)?;
    if let Some(n) = cfg.train_limit {
        train = train.truncated(n);
    }
    let test = load_target_test(cfg)?;
    let steps = cfg.total_steps();
    let (correct, n) = train_classifier(&train, &test, cfg, steps)?;
    Ok(EvalReport {
        train_steps: steps,
        ..EvalReport::new(cfg.scenario.to_string(), kind.as_str().into(), "-".into(), correct, n, steps)
    })
}

pub fn evaluate_source_only(cfg: &ExperimentConfig) -> Result<EvalReport> {
    evaluate_baseline(cfg, Baseline::SourceOnly)
}

/// Default share of the full step budget given to each split of a sweep.
pub const DEFAULT_SWEEP_BUDGET: f64 = 0.2;

#[derive(Debug, Default)]
pub struct SweepResult {
    pub reports: Vec<EvalReport>,
    /// Splits whose training or evaluation failed, with the error text.
    pub failures: Vec<(StackSplit, String)>,
}

/// Trains one model per split for `budget` × the full step count and reports
/// both channels of each. A failing split is recorded and the sweep goes on.
pub fn sweep_cgrs(
    cfg: &ExperimentConfig,
    splits: &[StackSplit],
    budget: f64,
    data: &TrainData,
    target_test: &LabeledImageSet,
) -> Result<SweepResult> {
    cfg.validate()?;
    if !(budget > 0.0 && budget <= 1.0) {
        return config_err(format!("sweep budget must be in (0, 1], got {budget}"));
    }
    let steps = ((cfg.total_steps() as f64 * budget).ceil() as u64).max(1);
    let mut result = SweepResult::default();
    for &split in splits {
        let run_cfg = ExperimentConfig {
            split,
            total_steps: Some(steps),
            out_dir: cfg.out_dir.join(format!("sweep-{split}")),
            ..cfg.clone()
        };
        let outcome = TrainState::new(run_cfg).and_then(|st| run_training_from(st, data));
        let rows = outcome.and_then(|o| {
            // Reload from disk so each row is tied to the checkpoint of its own split.
            let state = persistence::load_checkpoint(&o.checkpoint, Some(&o.state.config))?;
            if state.config.split != split {
                return Err(Error::Integrity(format!("checkpoint for {split} carries {}", state.config.split)));
            }
            Channel::BOTH
                .into_iter()
                .map(|c| evaluate_accuracy(&state, target_test, c.into()))
                .collect::<Result<Vec<_>>>()
        });
        match rows {
            Ok(r) => result.reports.extend(r.into_iter().map(|r| EvalReport { train_steps: steps, ..r })),
            Err(e) => {
                log::error!("sweep split {split} failed: {e}");
                result.failures.push((split, e.to_string()));
            }
        }
    }
    Ok(result)
}

/// Starts from every parameter of `source_checkpoint`, freezes both decoders,
/// and reruns the three phases on `new_config`'s scenario with fresh optimizers.
pub fn transfer_cgrs(source_checkpoint: &Path, new_config: ExperimentConfig, data: &TrainData) -> Result<TrainOutcome> {
    new_config.validate()?;
    let source = persistence::load_checkpoint(source_checkpoint, None)?;
    if source.config.arch != new_config.arch {
        return config_err(format!(
            "transfer needs the same architecture: checkpoint {:?}, config {:?}",
            source.config.arch, new_config.arch
        ));
    }
    let mut state = TrainState::new(new_config)?;
    state.model.store.copy_groups_from(&source.model.store, GroupSet::ALL)?;
    state.frozen = GroupSet::DECODERS;
    run_training_from(state, data)
}

pub const RESULTS_HEADER: [&str; 8] = [
    "scenario",
    "channel",
    "split",
    "accuracy",
    "correct",
    "n_test",
    "checkpoint_step",
    "train_steps",
];

/// Appends rows to a results CSV, writing the header when the file is new.
pub fn append_results(path: &Path, reports: &[EvalReport]) -> Result<()> {
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    if fresh {
        w.write_record(RESULTS_HEADER).map_err(|e| csv_err(path, e))?;
    }
    for r in reports {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Default results file inside a run directory.
pub fn results_path(out_dir: &Path) -> PathBuf {
    out_dir.join("results.csv")
}
