//! The `cgrs` command line.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::datasets::fetch::{self, FetchTarget};
use crate::datasets::{self, cache, DatasetId, Split};
use crate::error::{config_err, Error, Result};
use crate::evaluation::{self, Baseline, EvalChannel, EvalReport, DEFAULT_SWEEP_BUDGET};
use crate::networks::{ArchConfig, Channel, StackSplit};
use crate::persistence;
use crate::training::config::{ExperimentConfig, Precision, Scenario, DATA_ROOT_ENV};
use crate::training::{self, TrainData};

#[derive(Debug, Parser)]
#[command(name = "cgrs", version, about = "Cross-grafted representation stacks for domain adaptation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Download benchmark archives into the data root.
    Fetch {
        /// mnist, fashion, usps or bsds; all when omitted.
        targets: Vec<FetchTarget>,
        /// Base URL replacing the default hosts.
        #[arg(long)]
        mirror: Option<String>,
        #[command(flatten)]
        common: ConfigArgs,
    },
    /// Generate a derived dataset (mnist-m, fashion-m, m-digits) into a cache.
    Synth {
        dataset: DatasetId,
        #[arg(long = "data-split", value_enum, default_value_t = SplitArg::Both)]
        data_split: SplitArg,
        #[arg(long, default_value_t = datasets::DEFAULT_SYNTH_SEED)]
        synth_seed: u64,
        /// Output root; the cache goes under `<out>/cache/`.
        #[arg(long)]
        out: PathBuf,
        /// Directory of background images (default `<data_root>/bsds/images`).
        #[arg(long)]
        backgrounds: Option<PathBuf>,
        #[command(flatten)]
        common: ConfigArgs,
    },
    /// Train a model.
    Train {
        /// Continue from a checkpoint of the same scenario, split and architecture.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        common: ConfigArgs,
    },
    /// Target accuracy of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = ChannelArg::Ts)]
        channel: ChannelArg,
        /// Append the row to this CSV.
        #[arg(long)]
        results: Option<PathBuf>,
        #[command(flatten)]
        common: ConfigArgs,
    },
    /// Train a classifier on source images only and score it on the target.
    SourceOnly {
        /// Train on labeled target images instead (upper bound).
        #[arg(long)]
        target_only: bool,
        #[arg(long)]
        results: Option<PathBuf>,
        #[command(flatten)]
        common: ConfigArgs,
    },
    /// Train and evaluate one model per stack split.
    Sweep {
        /// Comma-separated splits; all seven when omitted.
        #[arg(long, value_delimiter = ',')]
        splits: Vec<StackSplit>,
        /// Fraction of the full step budget per split.
        #[arg(long, default_value_t = DEFAULT_SWEEP_BUDGET)]
        budget: f64,
        #[arg(long)]
        results: Option<PathBuf>,
        #[command(flatten)]
        common: ConfigArgs,
    },
    /// Reuse a trained model on a new scenario with both decoders frozen.
    Transfer {
        #[arg(long)]
        from: PathBuf,
        #[arg(long)]
        results: Option<PathBuf>,
        #[command(flatten)]
        common: ConfigArgs,
    },
    /// Write a PNG grid of associations for both channels.
    ExportAssoc {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[command(flatten)]
        common: ConfigArgs,
    },
    /// Write discriminator features of source and target test images as TSV.
    ExportFeatures {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = ChannelArg::Ts)]
        channel: ChannelArg,
        #[arg(long, default_value_t = 500)]
        count: usize,
        #[command(flatten)]
        common: ConfigArgs,
    },
    /// Print a checkpoint header as JSON.
    Inspect {
        checkpoint: PathBuf,
        #[command(flatten)]
        common: ConfigArgs,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ChannelArg {
    St,
    Ts,
    Combined,
}

impl From<ChannelArg> for EvalChannel {
    fn from(c: ChannelArg) -> Self {
        match c {
            ChannelArg::St => EvalChannel::St,
            ChannelArg::Ts => EvalChannel::Ts,
            ChannelArg::Combined => EvalChannel::Combined,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ArchPreset {
    Reference,
    Compact,
    Tiny,
}

impl ArchPreset {
    fn config(self) -> ArchConfig {
        match self {
            ArchPreset::Reference => ArchConfig::reference(),
            ArchPreset::Compact => ArchConfig::compact(),
            ArchPreset::Tiny => ArchConfig::tiny(),
        }
    }
}

/// Flags shared by every command. Each overrides the config file field of the
/// same name.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// TOML experiment config; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Validate and print the plan without side effects.
    #[arg(long)]
    pub dry_run: bool,
    /// Dataset root directory.
    #[arg(long, env = DATA_ROOT_ENV)]
    pub data_root: Option<PathBuf>,
    /// Adaptation pair as source:target, e.g. mnist:usps.
    #[arg(long)]
    pub scenario: Option<Scenario>,
    /// Stack split HxLy with x + y = 6, e.g. H2L4.
    #[arg(long)]
    pub split: Option<StackSplit>,
    /// Training rounds (default depends on the scenario).
    #[arg(long)]
    pub steps: Option<u64>,
    /// Images per domain per round.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Initial learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Learning-rate decay factor.
    #[arg(long)]
    pub decay: Option<f64>,
    /// Rounds between decays.
    #[arg(long)]
    pub decay_every: Option<u64>,
    /// Seed for initialization and batch sampling.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Weight of the VAE loss.
    #[arg(long)]
    pub lambda0: Option<f64>,
    /// Weight of the content-constancy loss.
    #[arg(long)]
    pub lambda1: Option<f64>,
    /// Weight of the adversarial losses.
    #[arg(long)]
    pub lambda2: Option<f64>,
    /// Weight of the classification loss.
    #[arg(long)]
    pub lambda3: Option<f64>,
    /// Enable the content-constancy loss.
    #[arg(long)]
    pub content_constancy: Option<bool>,
    /// Number of labelled target images (0 = unsupervised).
    #[arg(long)]
    pub semi_supervised: Option<usize>,
    /// Add noise to the low stack of grafted decoders.
    #[arg(long)]
    pub graft_noise: Option<bool>,
    /// Standard deviation of the graft noise.
    #[arg(long)]
    pub graft_noise_sigma: Option<f64>,
    /// Network size preset.
    #[arg(long, value_enum)]
    pub arch: Option<ArchPreset>,
    /// Floating-point precision of parameters.
    #[arg(long, value_enum)]
    pub precision: Option<PrecisionArg>,
    /// Directory for checkpoints and logs.
    #[arg(long = "out-dir")]
    pub out_dir: Option<PathBuf>,
    /// Content-loss mask file (784 or 2352 whitespace-separated 0/1 values).
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// Use only the first n training images of each domain.
    #[arg(long)]
    pub train_limit: Option<usize>,
    /// Use only the first n target test images.
    #[arg(long)]
    pub test_limit: Option<usize>,
    /// Batch size for evaluation.
    #[arg(long)]
    pub eval_batch_size: Option<usize>,
    /// Rounds between log lines.
    #[arg(long)]
    pub log_every: Option<u64>,
    /// Rounds between checkpoints (0 = final only).
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// Fail if a frozen parameter group changes during a phase.
    #[arg(long)]
    pub verify_update_sets: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PrecisionArg {
    F32,
    F64,
}

impl ConfigArgs {
    /// File config (or defaults) with every given flag applied, validated.
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        macro_rules! set {
            ($($flag:ident => $($field:ident).+),* $(,)?) => {
                $(if let Some(v) = self.$flag.clone() { c.$($field).+ = v.into(); })*
            };
        }
        set!(
            data_root => data_root,
            scenario => scenario,
            split => split,
            batch_size => batch_size,
            lr => lr0,
            decay => decay,
            decay_every => decay_every,
            seed => seed,
            lambda0 => weights.lambda0,
            lambda1 => weights.lambda1,
            lambda2 => weights.lambda2,
            lambda3 => weights.lambda3,
            content_constancy => content_constancy,
            semi_supervised => semi_supervised_target_count,
            graft_noise => graft_noise,
            graft_noise_sigma => graft_noise_sigma,
            out_dir => out_dir,
            eval_batch_size => eval_batch_size,
            log_every => log_every,
            checkpoint_every => checkpoint_every,
            verify_update_sets => verify_update_sets,
        );
        if let Some(s) = self.steps {
            c.total_steps = Some(s);
        }
        if let Some(a) = self.arch {
            c.arch = a.config();
        }
        if let Some(p) = self.precision {
            c.precision = match p {
                PrecisionArg::F32 => Precision::F32,
                PrecisionArg::F64 => Precision::F64,
            };
        }
        if let Some(m) = &self.mask {
            c.mask_path = Some(m.clone());
        }
        if let Some(n) = self.train_limit {
            c.train_limit = Some(n);
        }
        if let Some(n) = self.test_limit {
            c.test_limit = Some(n);
        }
        c.validate()?;
        Ok(c)
    }
}

fn print_config(cfg: &ExperimentConfig) {
    eprintln!("# resolved configuration\n{}", cfg.to_toml());
}

fn plan(dry_run: bool, msg: impl AsRef<str>) -> bool {
    if dry_run {
        eprintln!("dry run: {}", msg.as_ref());
    }
    dry_run
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "no such file")))
    }
}

fn report(reports: &[EvalReport], results: Option<&Path>) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(std::io::stdout());
    for r in reports {
        w.serialize(r).map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io("<stdout>", e))?;
    if let Some(p) = results {
        evaluation::append_results(p, reports)?;
    }
    Ok(())
}

/// Checkpoint config with the data-root flag applied.
fn checkpoint_state(path: &Path, common: &ConfigArgs) -> Result<training::TrainState> {
    require_file(path)?;
    let mut state = persistence::load_checkpoint(path, None)?;
    if let Some(r) = &common.data_root {
        state.config.data_root = r.clone();
    }
    if let Some(n) = common.test_limit {
        state.config.test_limit = Some(n);
    }
    if let Some(n) = common.eval_batch_size {
        state.config.eval_batch_size = n;
    }
    Ok(state)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Fetch { targets, mirror, common } => {
            let cfg = common.resolve()?;
            print_config(&cfg);
            let targets = if targets.is_empty() { FetchTarget::ALL.to_vec() } else { targets };
            for t in targets {
                for res in fetch::resources(t, mirror.as_deref()) {
                    eprintln!("{t}: {} -> {}", res.url, cfg.data_root.join(t.dir_name()).join(res.file).display());
                }
                if !common.dry_run {
                    fetch::fetch(t, &cfg.data_root, mirror.as_deref(), false)?;
                }
            }
            Ok(())
        }
        Command::Synth {
            dataset,
            data_split,
            synth_seed,
            out,
            backgrounds,
            common,
        } => {
            let cfg = common.resolve()?;
            print_config(&cfg);
            if dataset.derivation().is_none() {
                return config_err(format!("{dataset} is not a synthesized dataset"));
            }
            let splits: &[Split] = match data_split {
                SplitArg::Train => &[Split::Train],
                SplitArg::Test => &[Split::Test],
                SplitArg::Both => &[Split::Train, Split::Test],
            };
            for &s in splits {
                let dir = cache::cache_dir(&out, dataset, s);
                if plan(common.dry_run, format!("synthesize {dataset}/{s} (seed {synth_seed}) into {}", dir.display())) {
                    continue;
                }
                let set = datasets::synthesize(dataset, s, &cfg.data_root, synth_seed, backgrounds.as_deref())?;
                let m = cache::write_cache(&set, &dir)?;
                eprintln!("{dataset}/{s}: {} images, sha256 {}", m.count, m.digest);
            }
            Ok(())
        }
        Command::Train { resume, common } => {
            let cfg = common.resolve()?;
            print_config(&cfg);
            if let Some(p) = &resume {
                require_file(p)?;
            }
            if plan(
                common.dry_run,
                format!("train {} steps into {}", cfg.total_steps(), cfg.out_dir.display()),
            ) {
                return Ok(());
            }
            let data = TrainData::load(&cfg)?;
            let state = match &resume {
                Some(p) => {
                    let mut st = persistence::load_checkpoint(p, Some(&cfg))?;
                    st.config = cfg;
                    st
                }
                None => training::TrainState::new(cfg)?,
            };
            let outcome = training::run_training_from(state, &data)?;
            eprintln!("final checkpoint: {}", outcome.checkpoint.display());
            Ok(())
        }
        Command::Eval {
            checkpoint,
            channel,
            results,
            common,
        } => {
            let state = checkpoint_state(&checkpoint, &common)?;
            print_config(&state.config);
            if plan(common.dry_run, format!("evaluate {} on channel {:?}", checkpoint.display(), channel)) {
                return Ok(());
            }
            let test = evaluation::load_target_test(&state.config)?;
            let r = evaluation::evaluate_accuracy(&state, &test, channel.into())?;
            report(&[r], results.as_deref())
        }
        Command::SourceOnly {
            target_only,
            results,
            common,
        } => {
            let cfg = common.resolve()?;
            print_config(&cfg);
            let kind = if target_only { Baseline::TargetOnly } else { Baseline::SourceOnly };
            if plan(common.dry_run, format!("{} baseline for {} steps", kind.as_str(), cfg.total_steps())) {
                return Ok(());
            }
            let r = evaluation::evaluate_baseline(&cfg, kind)?;
            report(&[r], results.as_deref())
        }
        Command::Sweep {
            splits,
            budget,
            results,
            common,
        } => {
            let cfg = common.resolve()?;
            print_config(&cfg);
            let splits = if splits.is_empty() { StackSplit::all().collect() } else { splits };
            if !(budget > 0.0 && budget <= 1.0) {
                return config_err(format!("budget must be in (0, 1], got {budget}"));
            }
            let names: Vec<String> = splits.iter().map(ToString::to_string).collect();
            if plan(common.dry_run, format!("sweep {} at budget {budget}", names.join(","))) {
                return Ok(());
            }
            let data = TrainData::load(&cfg)?;
            let test = evaluation::load_target_test(&cfg)?;
            let sweep = evaluation::sweep_cgrs(&cfg, &splits, budget, &data, &test)?;
            report(&sweep.reports, results.as_deref())?;
            for (split, err) in &sweep.failures {
                log::error!("{split}: {err}");
            }
            if sweep.reports.is_empty() && !sweep.failures.is_empty() {
                return Err(Error::Numeric {
                    step: 0,
                    msg: format!("all {} sweep splits failed", sweep.failures.len()),
                });
            }
            Ok(())
        }
        Command::Transfer { from, results, common } => {
            let cfg = common.resolve()?;
            print_config(&cfg);
            require_file(&from)?;
            if plan(
                common.dry_run,
                format!("transfer {} to {} with frozen decoders", from.display(), cfg.scenario),
            ) {
                return Ok(());
            }
            let data = TrainData::load(&cfg)?;
            let outcome = evaluation::transfer_cgrs(&from, cfg, &data)?;
            let test = evaluation::load_target_test(&outcome.state.config)?;
            let rows = Channel::BOTH
                .into_iter()
                .map(|c| evaluation::evaluate_accuracy(&outcome.state, &test, c.into()))
                .collect::<Result<Vec<_>>>()?;
            report(&rows, results.as_deref())
        }
        Command::ExportAssoc {
            checkpoint,
            out,
            count,
            common,
        } => {
            let state = checkpoint_state(&checkpoint, &common)?;
            print_config(&state.config);
            if plan(common.dry_run, format!("write {count} association rows to {}", out.display())) {
                return Ok(());
            }
            let cfg = &state.config;
            let src = datasets::load_dataset(cfg.scenario.source, Split::Test, &cfg.data_root)?.truncated(count);
            let tgt = evaluation::load_target_test(cfg)?.truncated(count);
            evaluation::export_associations(&state.model, cfg.split, &src, &tgt, count, &out)
        }
        Command::ExportFeatures {
            checkpoint,
            out,
            channel,
            count,
            common,
        } => {
            let state = checkpoint_state(&checkpoint, &common)?;
            print_config(&state.config);
            let Some(ch) = EvalChannel::from(channel).single() else {
                return config_err("feature export needs a single channel (st or ts)");
            };
            if plan(common.dry_run, format!("write features of {count} images per domain to {}", out.display())) {
                return Ok(());
            }
            let cfg = &state.config;
            let src = datasets::load_dataset(cfg.scenario.source, Split::Test, &cfg.data_root)?.truncated(count);
            let tgt = evaluation::load_target_test(cfg)?.truncated(count);
            let n = evaluation::export_features(&state.model, cfg.split, ch, &src, &tgt, cfg.eval_batch_size, &out)?;
            eprintln!("{n} feature rows written to {}", out.display());
            Ok(())
        }
        Command::Inspect { checkpoint, common } => {
            require_file(&checkpoint)?;
            if plan(common.dry_run, format!("inspect {}", checkpoint.display())) {
                return Ok(());
            }
            println!("{}", persistence::inspect(&checkpoint)?);
            Ok(())
        }
    }
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Command {
        Cli::try_parse_from(std::iter::once("cgrs").chain(args.iter().copied())).unwrap().command
    }

    #[test]
    fn command_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn flags_override_defaults() {
        let Command::Train { common, .. } = parse(&["train", "--scenario", "mnist:mnist-m", "--split", "H4L2", "--steps", "7", "--lambda1", "3"])
        else {
            panic!()
        };
        let c = common.resolve().unwrap();
        assert_eq!(c.scenario.to_string(), "mnist:mnist-m");
        assert_eq!(c.split.to_string(), "H4L2");
        assert_eq!(c.total_steps(), 7);
        assert_eq!(c.weights.lambda1, 3.0);
        assert_eq!(c.batch_size, 64);
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "seed = 5\nbatch_size = 8\n").unwrap();
        let Command::Train { common, .. } = parse(&["train", "--config", p.to_str().unwrap(), "--seed", "9"]) else {
            panic!()
        };
        let c = common.resolve().unwrap();
        assert_eq!((c.seed, c.batch_size), (9, 8));
    }

    #[test]
    fn unknown_flag_exits_2() {
        assert_eq!(main_with_args(["cgrs", "train", "--bogus"]), 2);
        assert_eq!(main_with_args(["cgrs", "frobnicate"]), 2);
    }

    #[test]
    fn invalid_value_is_a_config_error() {
        assert_eq!(main_with_args(["cgrs", "train", "--dry-run", "--batch-size", "0"]), 2);
        assert_eq!(main_with_args(["cgrs", "train", "--dry-run", "--split", "H3L2"]), 2);
    }

    #[test]
    fn missing_checkpoint_is_io() {
        assert_eq!(main_with_args(["cgrs", "inspect", "/nonexistent/x.ckpt"]), 5);
    }

    #[test]
    fn dry_run_train_writes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        let code = main_with_args(["cgrs", "train", "--dry-run", "--out-dir", out.to_str().unwrap()]);
        assert_eq!(code, 0);
        assert!(!out.exists());
    }
}
