//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Criteria 6 to 8 need the real benchmark files under `CGRS_DATA_ROOT` and
//! hours of compute; they run only with `CGRS_ACCEPTANCE_FULL=1` and print
//! SKIP otherwise.

mod support;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor, Var};
use cgrs::datasets::{self, mdigits, BackgroundPatchSet, DatasetId, LabeledImageSet, Split};
use cgrs::evaluation::{self, EvalChannel};
use cgrs::losses::{self, LossWeights};
use cgrs::networks::layers::ForwardCtx;
use cgrs::networks::params::Group;
use cgrs::networks::{ArchConfig, Channel, Domain, LatentBatch, Model, StackSplit};
use cgrs::training::config::{ExperimentConfig, Precision, Scenario};
use cgrs::training::{Phase, TrainData, TrainState};
use cgrs::persistence;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const FD_EPS: f64 = 1e-6;
const FD_REL_TOL: f64 = 1e-3;
const FD_MAX_PARAMS: usize = 50;
const SUITE_BUDGET: Duration = Duration::from_secs(60);
const KL_TOL: f64 = 1e-6;
const PMSE_TOL: f64 = 1e-9;
const CE_TOL: f64 = 1e-6;
const GRAFT_ORACLE_TOL: f64 = 1e-9;
const GRAFT_LATENTS: usize = 16;
const PARTITION_ROUNDS: usize = 10;
const MDIGITS_SAMPLES: usize = 1000;
const RESUME_STEPS: usize = 10;
const RESUME_REL_TOL: f64 = 1e-6;
const CHANCE: f64 = 0.10;
const CHANCE_TOL: f64 = 0.03;
const CHANCE_SEEDS: u64 = 10;
const DESK_STEPS: u64 = 10_000;
const USPS_MIN_ACC: f64 = 0.85;
const USPS_MIN_GAIN: f64 = 0.15;
const MNISTM_MIN_ACC: f64 = 0.70;
const ABLATION_SEEDS: [u64; 3] = [0, 1, 2];

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

type Check = fn() -> Outcome;

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn main() {
    let criteria: [(u32, &str, Check); 10] = [
        (1, "loss gradients match finite differences", c1_gradients),
        (2, "analytic loss values", c2_analytic),
        (3, "graft identities", c3_graft),
        (4, "update-set partition", c4_partition),
        (5, "dataset properties", c5_datasets),
        (6, "desk-scale MNIST->USPS", c6_usps),
        (7, "desk-scale MNIST->MNIST-M", c7_mnist_m),
        (8, "content-constancy ablation direction", c8_ablation),
        (9, "checkpoint fidelity", c9_resume),
        (10, "chance-level untrained accuracy", c10_chance),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (n, name, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str()) || *f == n.to_string()) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Outcome::Fail(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match outcome {
            Outcome::Pass(d) => ("PASS", d),
            Outcome::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Outcome::Skip(d) => ("SKIP", d),
        };
        println!("criterion {n:>2} {tag} {name} ({secs:.1}s): {detail}");
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- criterion 1

/// Tiny affine map `h = x Wᵀ + b`, 10 outputs from 4 inputs (50 parameters).
struct Toy {
    w: Var,
    b: Var,
}

impl Toy {
    fn new(rng: &mut ChaCha8Rng) -> Toy {
        let mut randn = |n: usize, dims: &[usize]| {
            let v: Vec<f64> = (0..n).map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal)).collect();
            Var::from_tensor(&Tensor::from_vec(v, dims, &Device::Cpu).unwrap()).unwrap()
        };
        Toy {
            w: randn(40, &[10, 4]),
            b: randn(10, &[10]),
        }
    }

    fn vars(&self) -> [&Var; 2] {
        [&self.w, &self.b]
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        x.matmul(&self.w.as_tensor().t().unwrap())
            .unwrap()
            .broadcast_add(self.b.as_tensor())
            .unwrap()
    }
}

fn random(rng: &mut ChaCha8Rng, dims: &[usize], scale: f64) -> Tensor {
    let n = dims.iter().product();
    let v: Vec<f64> = (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::from_vec(v, dims, &Device::Cpu).unwrap()
}

fn value(t: &Tensor) -> f64 {
    t.to_scalar::<f64>().unwrap()
}

/// Normwise relative error between the autodiff and central-difference
/// gradients over every parameter of `toy`.
fn gradient_error(toy: &Toy, loss: &dyn Fn() -> Tensor) -> f64 {
    let grads = loss().backward().unwrap();
    let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
    for var in toy.vars() {
        let analytic = grads
            .get(var)
            .map(|g| g.flatten_all().unwrap().to_vec1::<f64>().unwrap())
            .unwrap_or_else(|| vec![0.0; var.elem_count()]);
        let base = var.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for i in 0..base.len() {
            let at = |delta: f64| {
                let mut v = base.clone();
                v[i] += delta;
                var.set(&Tensor::from_vec(v, var.dims(), &Device::Cpu).unwrap()).unwrap();
                value(&loss())
            };
            let numeric = (at(FD_EPS) - at(-FD_EPS)) / (2.0 * FD_EPS);
            diff += (analytic[i] - numeric).powi(2);
            na += analytic[i].powi(2);
            nn += numeric.powi(2);
        }
        var.set(&Tensor::from_vec(base, var.dims(), &Device::Cpu).unwrap()).unwrap();
    }
    diff.sqrt() / na.sqrt().max(nn.sqrt()).max(1e-12)
}

fn c1_gradients() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let toy = Toy::new(&mut rng);
    let n_params: usize = toy.vars().iter().map(|v| v.elem_count()).sum();
    let xa = random(&mut rng, &[3, 4], 1.0);
    let xb = random(&mut rng, &[3, 4], 1.0);
    let target_s = random(&mut rng, &[3, 5], 0.5);
    let target_t = random(&mut rng, &[3, 5], 0.5);
    let labels = [1u8, 7, 3];
    let mask = Tensor::new(&[1.0f64, 0., 1., 1., 0., 1., 1., 1., 0., 1.], &Device::Cpu).unwrap();
    let w = LossWeights::default();

    let latent = |h: &Tensor| {
        let mean = h.narrow(1, 5, 5).unwrap().reshape((3, 5, 1, 1)).unwrap();
        let logvar = (h.narrow(1, 0, 5).unwrap() * 0.3).unwrap().reshape((3, 5, 1, 1)).unwrap();
        LatentBatch {
            sample: mean.clone(),
            mean,
            logvar,
        }
    };
    let vae = || {
        let (ha, hb) = (toy.forward(&xa), toy.forward(&xb));
        let rs = ha.narrow(1, 0, 5).unwrap().tanh().unwrap();
        let rt = hb.narrow(1, 0, 5).unwrap().tanh().unwrap();
        losses::vae_loss(&target_s, &target_t, &rs, &rt, &latent(&ha), &latent(&hb), &w).unwrap().total
    };
    let disc = || {
        let real = toy.forward(&xa).sum(1).unwrap();
        let fake = (toy.forward(&xb).sum(1).unwrap() * 0.5).unwrap();
        losses::disc_loss(&real, &fake, &w).unwrap()
    };
    let gen = || losses::gen_loss(&toy.forward(&xb).sum(1).unwrap(), &w).unwrap();
    let content = || {
        let real = toy.forward(&xa).tanh().unwrap();
        let fake = toy.forward(&xb).tanh().unwrap();
        losses::content_loss(&real, &fake, Some(&mask), &w).unwrap()
    };
    let task = || losses::task_loss(&toy.forward(&xa), &toy.forward(&xb), &labels).unwrap();

    let checks: [(&str, &dyn Fn() -> Tensor); 5] = [
        ("vae", &vae),
        ("adv-disc", &disc),
        ("adv-gen", &gen),
        ("content", &content),
        ("task", &task),
    ];
    let errs: Vec<(&str, f64)> = checks.iter().map(|(n, f)| (*n, gradient_error(&toy, *f))).collect();
    let elapsed = start.elapsed();
    let ok = n_params <= FD_MAX_PARAMS && errs.iter().all(|(_, e)| *e <= FD_REL_TOL) && elapsed < SUITE_BUDGET;
    let detail = errs.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ");
    verdict(ok, format!("{n_params} params, rel err {detail} (tol {FD_REL_TOL:e})"))
}

// ---------------------------------------------------------------- criterion 2

fn c2_analytic() -> Outcome {
    let t = |v: &[f64], d: &[usize]| Tensor::from_slice(v, d, &Device::Cpu).unwrap();
    let kl0 = value(&losses::kl_prior(&t(&[0.0], &[1, 1]), &t(&[0.0], &[1, 1])).unwrap());
    let kl1 = value(&losses::kl_prior(&t(&[1.0], &[1, 1]), &t(&[0.0], &[1, 1])).unwrap());
    let pm = value(
        &losses::pmse(&t(&[1.0, 0.0], &[1, 2]), &t(&[0.0, 0.0], &[1, 2]), Some(&t(&[1.0, 1.0], &[2]))).unwrap(),
    );
    let ce = value(&losses::cross_entropy(&t(&[0.0; 10], &[1, 10]), &[4]).unwrap());
    let ok = kl0 == 0.0
        && (kl1 - 0.5).abs() <= KL_TOL
        && (pm - 0.25).abs() <= PMSE_TOL
        && (ce - 10f64.ln()).abs() <= CE_TOL;
    verdict(ok, format!("KL0 {kl0}, KL1 {kl1}, PMSE {pm}, CE {ce:.9} (ln10 {:.9})", 10f64.ln()))
}

// ---------------------------------------------------------------- criterion 3

/// Plain-loop decoder used as the oracle: 3x3 transposed convolution, padding
/// 1, then inference batch norm and leaky ReLU, or bias and tanh on the last layer.
struct OracleLayer {
    weight: Vec<f64>,
    c_in: usize,
    c_out: usize,
    stride: usize,
    out_pad: usize,
    bn: Option<[Vec<f64>; 4]>,
    bias: Option<Vec<f64>>,
}

const ORACLE_STRIDES: [usize; 6] = [1, 2, 2, 2, 1, 1];
const ORACLE_OUT_PAD: [usize; 6] = [0, 0, 1, 1, 0, 0];

fn read(model: &Model, name: &str) -> (Vec<f64>, Vec<usize>) {
    let p = model.store.get(name).unwrap_or_else(|| panic!("missing parameter {name}"));
    let t = p.var.as_tensor();
    (t.flatten_all().unwrap().to_vec1::<f64>().unwrap(), t.dims().to_vec())
}

fn oracle_layers(model: &Model, group: &str) -> Vec<OracleLayer> {
    (0..6)
        .map(|i| {
            let (weight, dims) = read(model, &format!("{group}.deconv{i}.weight"));
            let last = i == 5;
            OracleLayer {
                weight,
                c_in: dims[0],
                c_out: dims[1],
                stride: ORACLE_STRIDES[i],
                out_pad: ORACLE_OUT_PAD[i],
                bn: (!last).then(|| {
                    ["gamma", "beta", "running_mean", "running_var"].map(|k| read(model, &format!("{group}.bn{i}.{k}")).0)
                }),
                bias: last.then(|| read(model, &format!("{group}.deconv{i}.bias")).0),
            }
        })
        .collect()
}

fn oracle_apply(layer: &OracleLayer, x: &[f64], side: usize) -> (Vec<f64>, usize) {
    let s = layer.stride;
    let out_side = (side - 1) * s - 2 + 3 + layer.out_pad;
    let mut y = vec![0.0; layer.c_out * out_side * out_side];
    for ci in 0..layer.c_in {
        for iy in 0..side {
            for ix in 0..side {
                let v = x[(ci * side + iy) * side + ix];
                for co in 0..layer.c_out {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let oy = (iy * s + ky) as isize - 1;
                            let ox = (ix * s + kx) as isize - 1;
                            if oy < 0 || ox < 0 || oy as usize >= out_side || ox as usize >= out_side {
                                continue;
                            }
                            let wv = layer.weight[((ci * layer.c_out + co) * 3 + ky) * 3 + kx];
                            y[(co * out_side + oy as usize) * out_side + ox as usize] += v * wv;
                        }
                    }
                }
            }
        }
    }
    let plane = out_side * out_side;
    for co in 0..layer.c_out {
        for v in &mut y[co * plane..(co + 1) * plane] {
            *v = match (&layer.bn, &layer.bias) {
                (Some([g, b, m, var]), _) => {
                    let n = g[co] * (*v - m[co]) / (var[co] + 1e-5).sqrt() + b[co];
                    if n > 0.0 {
                        n
                    } else {
                        0.2 * n
                    }
                }
                (None, Some(bias)) => (*v + bias[co]).tanh(),
                (None, None) => unreachable!(),
            };
        }
    }
    (y, out_side)
}

fn c3_graft() -> Outcome {
    let start = Instant::now();
    let arch = ArchConfig::tiny();
    let model = Model::build(&arch, 3, DType::F64).unwrap();
    // Move every batch-norm parameter and statistic off its initial value.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (name, p) in model.store.iter() {
        if name.contains(".bn") {
            let n = p.var.elem_count();
            let v: Vec<f64> = (0..n)
                .map(|_| {
                    let r: f64 = rng.gen_range(0.2..1.5);
                    if name.ends_with("mean") || name.ends_with("beta") {
                        r - 0.85
                    } else {
                        r
                    }
                })
                .collect();
            p.var.set(&Tensor::from_vec(v, p.var.dims(), &Device::Cpu).unwrap()).unwrap();
        }
    }
    let ctx = ForwardCtx::EVAL;
    let z = random(&mut rng, &model.latent_dims(GRAFT_LATENTS), 1.0);
    let bits = |t: &Tensor| t.flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let split = |h, l| StackSplit::new(h, l).unwrap();

    let mut identities = true;
    for ch in Channel::BOTH {
        let plain_high = bits(&model.decode(&z, ch.high(), &ctx).unwrap());
        let plain_low = bits(&model.decode(&z, ch.low(), &ctx).unwrap());
        identities &= bits(&model.graft(&z, ch, split(6, 0), &ctx, None).unwrap()) == plain_high;
        identities &= bits(&model.graft(&z, ch, split(0, 6), &ctx, None).unwrap()) == plain_low;
    }

    let dec = |d: Domain| oracle_layers(&model, if d == Domain::Source { "dec_s" } else { "dec_t" });
    let (ds, dt) = (dec(Domain::Source), dec(Domain::Target));
    let per = arch.latent_dim * 16;
    let zv = z.flatten_all().unwrap().to_vec1::<f64>().unwrap();
    let mut worst: f64 = 0.0;
    for ch in Channel::BOTH {
        let (high, low) = if ch == Channel::St { (&ds, &dt) } else { (&dt, &ds) };
        let got = model.graft(&z, ch, split(4, 2), &ctx, None).unwrap();
        let got = got.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let out_per = got.len() / GRAFT_LATENTS;
        for k in 0..GRAFT_LATENTS {
            let (mut x, mut side) = (zv[k * per..(k + 1) * per].to_vec(), 4);
            for layer in high[..4].iter().chain(&low[4..]) {
                (x, side) = oracle_apply(layer, &x, side);
            }
            for (a, b) in x.iter().zip(&got[k * out_per..(k + 1) * out_per]) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    let elapsed = start.elapsed();
    let ok = identities && worst <= GRAFT_ORACLE_TOL && elapsed < SUITE_BUDGET;
    verdict(
        ok,
        format!("H6L0/H0L6 bitwise {identities}, H4L2 max |diff| {worst:.2e} over {GRAFT_LATENTS} latents (tol {GRAFT_ORACLE_TOL:e})"),
    )
}

// ---------------------------------------------------------------- criterion 4

fn glyph_data(cfg: &ExperimentConfig, n: usize, seed: u64) -> TrainData {
    let source = support::mnist_like(n, Split::Train, seed);
    let rasters = support::usps_rasters(n, seed + 1);
    let dir = tempfile::tempdir().unwrap();
    let text: String = rasters
        .iter()
        .map(|(r, l)| datasets::usps::format_line(r, *l) + "\n")
        .collect();
    std::fs::write(dir.path().join("usps"), text).unwrap();
    let target = datasets::usps::load_usps(dir.path(), Split::Train).unwrap();
    TrainData::from_sets(&source, &target, cfg).unwrap()
}

fn tiny_config(seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        arch: ArchConfig::tiny(),
        batch_size: 8,
        seed,
        ..ExperimentConfig::default()
    }
}

fn c4_partition() -> Outcome {
    use Group::*;
    // Groups each phase must leave untouched.
    let fixed: [(Phase, &[Group]); 3] = [
        (Phase::Vae, &[GenSt, GenTs, DiscSt, DiscTs]),
        (Phase::Discriminator, &[EncLowS, EncLowT, EncHigh, DecS, DecT, GenSt, GenTs]),
        (Phase::Generator, &[DecS, DecT, DiscSt, DiscTs]),
    ];
    let cfg = tiny_config(4);
    let data = glyph_data(&cfg, 60, 40);
    let mut state = TrainState::new(cfg).unwrap();
    let mut violations = Vec::new();
    let mut moved = [0usize; 3];
    for round in 0..PARTITION_ROUNDS {
        let batch = data.sample_batch(&mut state.rng, state.config.batch_size, state.config.dtype()).unwrap();
        for (i, (phase, groups)) in fixed.iter().enumerate() {
            let before = state.model.store.digests().unwrap();
            match phase {
                Phase::Vae => state.step_vae(&batch),
                Phase::Discriminator => state.step_discriminator(&batch),
                Phase::Generator => state.step_generator(&batch),
            }
            .unwrap();
            let after = state.model.store.digests().unwrap();
            for g in Group::ALL {
                let same = before[&g] == after[&g];
                if groups.contains(&g) && !same {
                    violations.push(format!("round {round} {phase:?} changed {g:?}"));
                }
                if !groups.contains(&g) && !same {
                    moved[i] += 1;
                }
            }
        }
        state.step += 1;
    }
    // Every updatable group must have moved in every round.
    let expected = fixed.map(|(_, g)| (Group::ALL.len() - g.len()) * PARTITION_ROUNDS);
    let ok = violations.is_empty() && moved == expected;
    verdict(
        ok,
        format!(
            "{PARTITION_ROUNDS} rounds, {} violations, updated-group changes {moved:?} of {expected:?}{}",
            violations.len(),
            violations.first().map(|v| format!("; first: {v}")).unwrap_or_default()
        ),
    )
}

// ---------------------------------------------------------------- criterion 5

fn c5_datasets() -> Outcome {
    let base = support::mnist_like(MDIGITS_SAMPLES, Split::Train, 8);
    let (set, layouts) = mdigits::compose_m_digits_traced(&base, 17).unwrap();
    let center_ok = layouts.iter().enumerate().all(|(i, l)| {
        let c = (l.members.len() - 1) / 2;
        l.center == c && set.label(i) == base.label(l.members[c])
    });

    let patches = BackgroundPatchSet::procedural(64, 3);
    let blend = datasets::blend_background(&base.truncated(200), &patches, 9).unwrap();
    let in_range = blend.images().iter().all(|v| (0.0..=1.0).contains(v));

    let dir = tempfile::tempdir().unwrap();
    support::write_corpus(dir.path(), 60, 20, 21);
    let mut reproducible = true;
    for id in [DatasetId::MnistM, DatasetId::FashionM, DatasetId::MDigits] {
        for split in [Split::Train, Split::Test] {
            let bytes = |s: &LabeledImageSet| {
                let mut v: Vec<u8> = s.images().iter().flat_map(|x| x.to_le_bytes()).collect();
                v.extend_from_slice(s.labels());
                v
            };
            let a = datasets::synthesize(id, split, dir.path(), 123, None).unwrap();
            let b = datasets::synthesize(id, split, dir.path(), 123, None).unwrap();
            reproducible &= bytes(&a) == bytes(&b);
        }
    }
    verdict(
        center_ok && in_range && reproducible,
        format!("center rule on {MDIGITS_SAMPLES}: {center_ok}; blend in [0,1]: {in_range}; synthesizers reproducible: {reproducible}"),
    )
}

// ---------------------------------------------------------- criteria 6 to 8

fn full_enabled() -> Option<String> {
    if std::env::var("CGRS_ACCEPTANCE_FULL").as_deref() == Ok("1") {
        None
    } else {
        Some(format!(
            "needs the full datasets under CGRS_DATA_ROOT and {DESK_STEPS} reference-size steps; set CGRS_ACCEPTANCE_FULL=1"
        ))
    }
}

fn desk_config(scenario: &str, content_constancy: bool, seed: u64, out: &Path) -> ExperimentConfig {
    ExperimentConfig {
        scenario: scenario.parse::<Scenario>().unwrap(),
        split: StackSplit::new(2, 4).unwrap(),
        total_steps: Some(DESK_STEPS),
        content_constancy,
        seed,
        precision: Precision::F32,
        out_dir: out.to_path_buf(),
        checkpoint_every: 0,
        ..ExperimentConfig::default()
    }
}

/// Best single-channel target accuracy after a desk-scale run.
fn desk_accuracy(cfg: ExperimentConfig) -> f64 {
    let outcome = cgrs::training::run_training(cfg).unwrap();
    let test = evaluation::load_target_test(&outcome.state.config).unwrap();
    Channel::BOTH
        .into_iter()
        .map(|c| evaluation::evaluate_accuracy(&outcome.state, &test, c.into()).unwrap().accuracy)
        .fold(0.0, f64::max)
}

fn c6_usps() -> Outcome {
    if let Some(why) = full_enabled() {
        return Outcome::Skip(why);
    }
    let dir = tempfile::tempdir().unwrap();
    let cfg = desk_config("mnist:usps", true, 0, dir.path());
    let baseline = evaluation::evaluate_source_only(&cfg).unwrap().accuracy;
    let acc = desk_accuracy(cfg);
    verdict(
        acc >= USPS_MIN_ACC && acc - baseline >= USPS_MIN_GAIN,
        format!("best channel {acc:.4} (min {USPS_MIN_ACC}), source-only {baseline:.4} (min gain {USPS_MIN_GAIN})"),
    )
}

fn c7_mnist_m() -> Outcome {
    if let Some(why) = full_enabled() {
        return Outcome::Skip(why);
    }
    let dir = tempfile::tempdir().unwrap();
    let cfg = desk_config("mnist:mnist-m", true, 0, dir.path());
    let baseline = evaluation::evaluate_source_only(&cfg).unwrap().accuracy;
    let acc = desk_accuracy(cfg);
    verdict(
        acc >= MNISTM_MIN_ACC && acc > baseline,
        format!("best channel {acc:.4} (min {MNISTM_MIN_ACC}), source-only {baseline:.4}"),
    )
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn c8_ablation() -> Outcome {
    if let Some(why) = full_enabled() {
        return Outcome::Skip(why);
    }
    let run = |cc: bool| {
        ABLATION_SEEDS
            .iter()
            .map(|&s| {
                let dir = tempfile::tempdir().unwrap();
                desk_accuracy(desk_config("mnist:mnist-m", cc, s, dir.path()))
            })
            .collect::<Vec<_>>()
    };
    let (with, without) = (run(true), run(false));
    let (mw, mo) = (median(with.clone()), median(without.clone()));
    verdict(mo <= mw, format!("median with {mw:.4} {with:?}, without {mo:.4} {without:?}"))
}

// ---------------------------------------------------------------- criterion 9

fn c9_resume() -> Outcome {
    let cfg = tiny_config(9);
    let data = glyph_data(&cfg, 60, 90);
    let mut state = TrainState::new(cfg.clone()).unwrap();
    for _ in 0..3 {
        state.round(&data).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");
    persistence::save_checkpoint(&state, &path).unwrap();
    let run = |st: &mut TrainState| (0..RESUME_STEPS).map(|_| st.round(&data).unwrap().values()).collect::<Vec<_>>();
    let original = run(&mut state);
    let mut resumed = persistence::load_checkpoint(&path, Some(&cfg)).unwrap();
    let replay = run(&mut resumed);
    let mut worst: f64 = 0.0;
    for (a, b) in original.iter().flatten().zip(replay.iter().flatten()) {
        worst = worst.max((a - b).abs() / a.abs().max(b.abs()).max(1e-12));
    }
    verdict(
        worst <= RESUME_REL_TOL,
        format!("{RESUME_STEPS} steps after resume, max relative loss difference {worst:.2e} (tol {RESUME_REL_TOL:e})"),
    )
}

// --------------------------------------------------------------- criterion 10

fn c10_chance() -> Outcome {
    let rasters = support::usps_rasters(300, 77);
    let dir = tempfile::tempdir().unwrap();
    let text: String = rasters.iter().map(|(r, l)| datasets::usps::format_line(r, *l) + "\n").collect();
    std::fs::write(dir.path().join("usps.t"), text).unwrap();
    let test = datasets::usps::load_usps(dir.path(), Split::Test).unwrap();
    let mut accs = Vec::new();
    for seed in 0..CHANCE_SEEDS {
        let state = TrainState::new(ExperimentConfig {
            arch: ArchConfig::compact(),
            seed,
            ..ExperimentConfig::default()
        })
        .unwrap();
        accs.push(evaluation::evaluate_accuracy(&state, &test, EvalChannel::Ts).unwrap().accuracy);
    }
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    verdict(
        (mean - CHANCE).abs() <= CHANCE_TOL,
        format!(
            "mean {mean:.4} over {CHANCE_SEEDS} seeds (target {CHANCE} ± {CHANCE_TOL}); per seed {}",
            accs.iter().map(|a| format!("{a:.3}")).collect::<Vec<_>>().join(" ")
        ),
    )
}
