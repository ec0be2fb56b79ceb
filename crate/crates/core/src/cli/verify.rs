//! The `verify` suites: exact property checks with declared tolerances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::chain::{CategoricalDistribution, CorruptionKernel, KernelVariant, NoiseSchedule};
use crate::denoiser::{Architecture, DenoiserParams, PredictionGrid};
use crate::error::{CdlmError, Result};
use crate::objective::{anchor_loss, consistency_loss, loss_positions, weight, Divergence, MaxStepMixer};
use crate::oracle::{
    consistency_residual, exact_posterior, expected_anchor_loss, tabulate_posterior, verify_bridges,
    verify_global_bound, verify_operator_composition, ConstantPredictor, DataDistribution, ExactPosterior,
    Predictor,
};
use crate::trainer::{check_plan_gradient, plan_batch, train_loop, Optimizer, TrainState, TrainingConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Suite {
    Bridges,
    FixedPoint,
    MdlmEquiv,
    Composition,
    GlobalBound,
    Grad,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Size {
    #[default]
    Small,
    Full,
}

/// Whether a check passes when its value is below or above the threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    Below,
    Above,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub max_discrepancy: f64,
    pub tolerance: f64,
    pub relation: Relation,
    pub passed: bool,
}

impl Check {
    pub fn below(name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            max_discrepancy: value,
            tolerance,
            relation: Relation::Below,
            passed: value < tolerance,
        }
    }

    pub fn above(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            max_discrepancy: value,
            tolerance: threshold,
            relation: Relation::Above,
            passed: value > threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub suite: Suite,
    pub size: Size,
    pub passed: bool,
    pub checks: Vec<Check>,
}

impl Report {
    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

pub fn run_suite(suite: Suite, size: Size) -> Result<Report> {
    let checks = match suite {
        Suite::Bridges => bridges(size)?,
        Suite::FixedPoint => fixed_point(size)?,
        Suite::MdlmEquiv => mdlm_equiv(size)?,
        Suite::Composition => composition(size)?,
        Suite::GlobalBound => global_bound(size)?,
        Suite::Grad => grad(size)?,
    };
    Ok(Report {
        suite,
        size,
        passed: checks.iter().all(|c| c.passed),
        checks,
    })
}

fn grid(step: f64, lo: f64, hi: f64) -> Vec<f64> {
    let n = ((hi - lo) / step).round() as usize;
    (0..=n).map(|k| ((lo + step * k as f64) * 1e12).round() / 1e12).collect()
}

fn kernel_label(k: &CorruptionKernel) -> String {
    let v = match k.variant() {
        KernelVariant::Masked => "masked",
        KernelVariant::Uniform => "uniform",
    };
    let s = match k.schedule() {
        NoiseSchedule::Linear => "linear",
        NoiseSchedule::Cosine => "cosine",
    };
    format!("{v}{}_{s}", k.size())
}

fn divergences() -> [Divergence; 3] {
    [Divergence::ForwardKl, Divergence::ReverseKl, Divergence::Jsd]
}

fn div_label(d: Divergence) -> &'static str {
    match d {
        Divergence::ForwardKl => "forward_kl",
        Divergence::ReverseKl => "reverse_kl",
        Divergence::Jsd => "jsd",
    }
}

/// Bridge normalization, masked closed form and semigroup on `|V| <= 8`.
pub fn bridges(size: Size) -> Result<Vec<Check>> {
    let (times, kernels) = match size {
        Size::Small => (
            grid(0.2, 0.1, 0.9),
            vec![
                CorruptionKernel::masked(2)?,
                CorruptionKernel::masked(4)?,
                CorruptionKernel::uniform(3)?,
                CorruptionKernel::uniform(5)?,
            ],
        ),
        Size::Full => {
            let mut ks = Vec::new();
            for schedule in [NoiseSchedule::Linear, NoiseSchedule::Cosine] {
                for c in 2..=7 {
                    ks.push(CorruptionKernel::masked(c)?.with_schedule(schedule));
                }
                for n in 2..=8 {
                    ks.push(CorruptionKernel::uniform(n)?.with_schedule(schedule));
                }
            }
            (grid(0.1, 0.1, 0.9), ks)
        }
    };
    let mut checks = Vec::new();
    for k in &kernels {
        let rep = verify_bridges::<f64>(k, &times)?;
        let label = kernel_label(k);
        checks.push(Check::below(format!("{label}.normalization"), rep.normalization, 1e-10));
        if k.variant() == KernelVariant::Masked {
            checks.push(Check::below(format!("{label}.masked_closed_form"), rep.masked_closed_form, 1e-10));
        }
        checks.push(Check::below(format!("{label}.semigroup"), rep.semigroup, 1e-10));
    }
    Ok(checks)
}

/// Two clean tokens, two positions, correlated.
pub fn toy_pair_data() -> DataDistribution {
    DataDistribution::new(2, 2, vec![0.4, 0.1, 0.2, 0.3]).expect("valid toy")
}

fn max_residual<P: Predictor<f64> + ?Sized>(
    f: &P,
    data: &DataDistribution,
    kernel: &CorruptionKernel,
    times: &[f64],
    d: Divergence,
    interior_only: bool,
) -> Result<f64> {
    let mut worst = 0.0f64;
    for (j, &t) in times.iter().enumerate() {
        for &s in &times[..j] {
            if interior_only && (s == 0.0 || t == 1.0) {
                continue;
            }
            worst = worst.max(consistency_residual(f, data, kernel, t, s, d)?.abs());
        }
    }
    Ok(worst)
}

/// The Bayes posterior (closed form and tabulated) is a fixed point; the
/// constant predictor is too, but the anchor loss rules it out.
pub fn fixed_point(size: Size) -> Result<Vec<Check>> {
    let data = toy_pair_data();
    let step = match size {
        Size::Small => 0.25,
        Size::Full => 0.1,
    };
    let mut times = vec![0.0];
    times.extend(grid(step, 0.1, 0.9));
    times.push(1.0);
    let bins = 10;
    let mut mids = vec![0.0];
    mids.extend((0..bins).map(|b| (b as f64 + 0.5) / bins as f64));
    let mut checks = Vec::new();
    for kernel in [CorruptionKernel::masked(2)?, CorruptionKernel::uniform(2)?] {
        let label = kernel_label(&kernel);
        let exact = ExactPosterior {
            data: &data,
            kernel: &kernel,
        };
        let table = tabulate_posterior::<f64>(&data, &kernel, bins)?;
        for d in divergences() {
            let r = max_residual(&exact, &data, &kernel, &times, d, false)?;
            checks.push(Check::below(format!("{label}.posterior.{}", div_label(d)), r, 1e-10));
            let r = max_residual(&table, &data, &kernel, &mids, d, false)?;
            checks.push(Check::below(format!("{label}.oracle_table.{}", div_label(d)), r, 1e-10));
        }
    }
    let kernel = CorruptionKernel::masked(2)?;
    let constant = ConstantPredictor {
        row: CategoricalDistribution::new(vec![0.5, 0.5, 0.0])?,
        seq_len: 2,
    };
    for d in divergences() {
        let r = max_residual(&constant, &data, &kernel, &times, d, true)?;
        checks.push(Check::below(format!("degenerate.residual.{}", div_label(d)), r, 1e-10));
    }
    let mut anchor = f64::INFINITY;
    for &t in times.iter().filter(|&&t| t > 0.0) {
        anchor = anchor.min(expected_anchor_loss(&constant, &data, &kernel, t)?);
    }
    checks.push(Check::above("degenerate.anchor_loss", anchor, 0.1));
    Ok(checks)
}

/// Loss of one clean sequence under the max-step reduction: forward KL to the
/// boundary prediction at `s = 0`, weighted `1/t`, against the anchor loss.
fn max_step_gap(p: &DenoiserParams<f64>, x0: &[usize], t: f64, rng: &mut ChaCha8Rng) -> Result<f64> {
    let kernel = *p.kernel();
    let xt = kernel.corrupt(x0, t, rng)?.0;
    let online = p.predict(&xt, t)?;
    let boundary = p.predict(x0, 0.0)?;
    let positions = loss_positions(&kernel, &xt);
    let cons = consistency_loss(Divergence::ForwardKl, &online, &boundary, &positions, weight(t, t)?)?;
    let anchor = anchor_loss(&online, x0, &positions, kernel.schedule().anchor_weight(t)?)?;
    Ok((cons - anchor.value).abs() / anchor.value.abs().max(1.0))
}

/// Settings of the max-step (`kappa = 1`) reference comparison.
pub fn mdlm_reference_config(steps: u64) -> Result<TrainingConfig> {
    let kernel = CorruptionKernel::masked(3)?;
    let mut cfg = TrainingConfig::new(kernel, Architecture::Tabular { time_bins: 8 }, 3);
    cfg.mixer = MaxStepMixer::constant(1.0);
    cfg.total_steps = steps;
    cfg.batch_size = 32;
    cfg.learning_rate = 0.5;
    cfg.optimizer = Optimizer::Sgd;
    cfg.log_every = steps;
    Ok(cfg)
}

/// Time-weighted cross-entropy training of a masked tabular model, written
/// without the trainer or objective modules. Consumes randomness in the same
/// order as the trainer (batch indices; then per element `t`, branch draw,
/// masking draws) and returns the batch loss of every step.
pub fn weighted_ce_reference(
    clean: usize,
    seq_len: usize,
    time_bins: usize,
    batch_size: usize,
    steps: u64,
    lr: f64,
    t_min: f64,
    seeds: (u64, u64),
    dataset: &[Vec<usize>],
) -> Vec<f64> {
    let n = clean + 1;
    let width = seq_len * n;
    let states = n.pow(seq_len as u32);
    let mut table = vec![0.0f64; states * time_bins * width];
    let mut data_rng = ChaCha8Rng::seed_from_u64(seeds.0);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seeds.1);
    let mut losses = Vec::with_capacity(steps as usize);
    for _ in 0..steps {
        let idx: Vec<usize> = (0..batch_size).map(|_| data_rng.random_range(0..dataset.len())).collect();
        let mut grad = vec![0.0f64; table.len()];
        let mut total = 0.0;
        for &i in &idx {
            let x0 = &dataset[i];
            let t = t_min + (1.0 - t_min) * noise_rng.random::<f64>();
            let _branch: f64 = noise_rng.random();
            let alpha = 1.0 - t;
            let xt: Vec<usize> = x0
                .iter()
                .map(|&v| if noise_rng.random::<f64>() < alpha { v } else { clean })
                .collect();
            let state = xt.iter().rev().fold(0usize, |acc, &v| acc * n + v);
            let bin = ((t * time_bins as f64).floor() as usize).min(time_bins - 1);
            let row = (state * time_bins + bin) * width;
            for (pos, &v) in xt.iter().enumerate() {
                if v != clean {
                    continue;
                }
                let z = &table[row + pos * n..row + pos * n + clean];
                let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = z.iter().map(|a| (a - m).exp()).collect();
                let s: f64 = e.iter().sum();
                let target = x0[pos];
                total += (s.ln() + m - z[target]) / t;
                for c in 0..clean {
                    let g = e[c] / s - if c == target { 1.0 } else { 0.0 };
                    grad[row + pos * n + c] += g / t / batch_size as f64;
                }
            }
        }
        for (p, g) in table.iter_mut().zip(&grad) {
            *p -= lr * g;
        }
        losses.push(total / batch_size as f64);
    }
    losses
}

/// Largest per-step gap between the `kappa = 1` training loop and the reference.
pub fn mdlm_loop_gap(steps: u64) -> Result<f64> {
    let cfg = mdlm_reference_config(steps)?;
    let data = DataDistribution::new(3, 3, {
        let mut p: Vec<f64> = (0..27).map(|i| 1.0 + ((i * 7) % 5) as f64).collect();
        let s: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= s);
        p
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let dataset: Vec<Vec<usize>> = (0..500).map(|_| data.sample(&mut rng)).collect();
    let state = TrainState::<f64>::new(&cfg)?;
    let out = train_loop(&cfg, state, &dataset)?;
    let reference = weighted_ce_reference(
        3,
        3,
        8,
        cfg.batch_size,
        steps,
        cfg.learning_rate,
        cfg.t_min,
        (cfg.seeds.data, cfg.seeds.noise),
        &dataset,
    );
    let mut worst = 0.0f64;
    for (a, b) in out.history.iter().zip(&reference) {
        worst = worst.max((a.total - b).abs());
    }
    if out.history.len() != reference.len() {
        return Err(CdlmError::Invariant("reference loop ran a different number of steps".into()));
    }
    Ok(worst)
}

/// Max-step consistency equals the anchor loss pointwise, and the full
/// `kappa = 1` loop equals weighted cross-entropy step by step.
pub fn mdlm_equiv(size: Size) -> Result<Vec<Check>> {
    let (draws, steps) = match size {
        Size::Small => (200, 100),
        Size::Full => (2000, 1000),
    };
    let mut checks = Vec::new();
    let kernel = CorruptionKernel::masked(3)?;
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for arch in [Architecture::Tabular { time_bins: 8 }, small_mlp()] {
        let mut p = DenoiserParams::<f64>::init(arch, kernel, 3, &mut rng)?;
        for v in p.values_mut() {
            *v += rng.random::<f64>() - 0.5;
        }
        let mut worst = 0.0f64;
        for _ in 0..draws {
            let x0: Vec<usize> = (0..3).map(|_| rng.random_range(0..3)).collect();
            let t = 1e-3 + (1.0 - 1e-3) * rng.random::<f64>();
            worst = worst.max(max_step_gap(&p, &x0, t, &mut rng)?);
        }
        let name = match arch {
            Architecture::Tabular { .. } => "pointwise.tabular",
            Architecture::Mlp { .. } => "pointwise.mlp",
        };
        checks.push(Check::below(name, worst, 1e-12));
    }
    checks.push(Check::below("loop.weighted_ce", mdlm_loop_gap(steps)?, 1e-12));
    Ok(checks)
}

fn small_mlp() -> Architecture {
    Architecture::Mlp {
        embed_dim: 4,
        hidden: 8,
        time_features: 4,
    }
}

fn random_mlp(kernel: CorruptionKernel, seq_len: usize, seed: u64) -> Result<DenoiserParams<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = DenoiserParams::init(small_mlp(), kernel, seq_len, &mut rng)?;
    for v in p.values_mut() {
        *v += 2.0 * (rng.random::<f64>() - 0.5);
    }
    Ok(p)
}

/// Composing the operator over `t -> t - delta -> 0` equals one application
/// over `t -> 0`, for arbitrary (random) predictors.
pub fn composition(size: Size) -> Result<Vec<Check>> {
    let (models, times) = match size {
        Size::Small => (2, vec![(0.9, 0.3), (0.6, 0.3), (1.0, 0.1)]),
        Size::Full => (6, {
            let g = grid(0.1, 0.1, 1.0);
            let mut v = Vec::new();
            for &t in &g {
                for &d in g.iter().filter(|&&d| 2.0 * d <= t + 1e-12) {
                    v.push((t, d));
                }
            }
            v
        }),
    };
    let three = DataDistribution::new(3, 2, vec![0.2, 0.05, 0.1, 0.0, 0.25, 0.05, 0.1, 0.15, 0.1])?;
    let cases = [
        (CorruptionKernel::masked(2)?, toy_pair_data()),
        (CorruptionKernel::uniform(2)?, toy_pair_data()),
        (CorruptionKernel::masked(3)?, three.clone()),
        (CorruptionKernel::uniform(3)?, three),
    ];
    let mut checks = Vec::new();
    for (kernel, data) in &cases {
        let mut worst = 0.0f64;
        for m in 0..models {
            let f = random_mlp(*kernel, 2, 100 + m as u64)?;
            for &(t, d) in &times {
                worst = worst.max(verify_operator_composition(&f, data, kernel, t, d)?);
            }
        }
        checks.push(Check::below(format!("{}.random_mlp", kernel_label(kernel)), worst, 1e-10));
    }
    Ok(checks)
}

/// Oracle mixed with the uniform clean row at weight `eps`.
pub struct PerturbedOracle<'a> {
    pub oracle: ExactPosterior<'a>,
    pub eps: f64,
}

impl Predictor<f64> for PerturbedOracle<'_> {
    fn predict(&self, xt: &[usize], t: f64) -> Result<PredictionGrid<f64>> {
        let g: PredictionGrid<f64> = exact_posterior(self.oracle.data, self.oracle.kernel, xt, t)?;
        let vocab = self.oracle.kernel.vocab();
        let c = vocab.clean_size() as f64;
        let rows = g
            .rows()
            .iter()
            .map(|r| {
                let probs = r
                    .probs()
                    .iter()
                    .enumerate()
                    .map(|(k, &p)| if vocab.is_mask(k) { 0.0 } else { (1.0 - self.eps) * p + self.eps / c })
                    .collect();
                CategoricalDistribution::new(probs)
            })
            .collect::<Result<_>>()?;
        Ok(PredictionGrid::new(rows))
    }
}

/// A tabular model trained briefly on samples of `data`.
pub fn trained_table(data: &DataDistribution, kernel: CorruptionKernel, steps: u64) -> Result<DenoiserParams<f64>> {
    let mut cfg = TrainingConfig::new(kernel, Architecture::Tabular { time_bins: 8 }, data.seq_len());
    cfg.total_steps = steps;
    cfg.batch_size = 64;
    cfg.log_every = steps;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seeds.data ^ 0xabc);
    let dataset: Vec<Vec<usize>> = (0..2000).map(|_| data.sample(&mut rng)).collect();
    Ok(train_loop(&cfg, TrainState::new(&cfg)?, &dataset)?.state.online)
}

/// `E(k, m) <= (k - m) max eps` for oracle, perturbed and trained predictors.
pub fn global_bound(size: Size) -> Result<Vec<Check>> {
    let (horizons, steps): (Vec<usize>, u64) = match size {
        Size::Small => (vec![1, 2, 4, 8], 200),
        Size::Full => ((1..=8).collect(), 2000),
    };
    let data = toy_pair_data();
    let mut checks = Vec::new();
    for kernel in [CorruptionKernel::masked(2)?, CorruptionKernel::uniform(2)?] {
        let label = kernel_label(&kernel);
        let oracle = ExactPosterior {
            data: &data,
            kernel: &kernel,
        };
        let table = trained_table(&data, kernel, steps)?;
        let predictors: Vec<(String, Box<dyn Predictor<f64> + '_>)> = vec![
            ("oracle".into(), Box::new(oracle)),
            ("perturbed_0.05".into(), Box::new(PerturbedOracle { oracle, eps: 0.05 })),
            ("perturbed_0.3".into(), Box::new(PerturbedOracle { oracle, eps: 0.3 })),
            ("trained_table".into(), Box::new(table)),
        ];
        for (name, f) in &predictors {
            let mut violation = 0.0f64;
            for &k in &horizons {
                let times: Vec<f64> = (0..=k).map(|j| j as f64 / k as f64).collect();
                let rep = verify_global_bound(f.as_ref(), &data, &kernel, &times)?;
                violation = violation.max(-rep.min_slack);
            }
            checks.push(Check::below(format!("{label}.{name}.violation"), violation.max(0.0), 1e-12));
        }
    }
    Ok(checks)
}

/// Analytic against central-difference gradients for every denoiser,
/// divergence and loss branch.
pub fn grad(size: Size) -> Result<Vec<Check>> {
    let coords = match size {
        Size::Small => 40,
        Size::Full => 200,
    };
    let data = DataDistribution::new(3, 2, vec![0.3, 0.05, 0.1, 0.0, 0.2, 0.05, 0.1, 0.1, 0.1])?;
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let set: Vec<Vec<usize>> = (0..16).map(|_| data.sample(&mut rng)).collect();
    let batch: Vec<&[usize]> = set.iter().map(|v| v.as_slice()).collect();
    let mut checks = Vec::new();
    for kernel in [CorruptionKernel::masked(3)?, CorruptionKernel::uniform(3)?] {
        for arch in [Architecture::Tabular { time_bins: 4 }, small_mlp()] {
            for d in divergences() {
                let mut cfg = TrainingConfig::new(kernel, arch, 2);
                cfg.divergence = d;
                cfg.exact_mixture = true;
                let mut online = DenoiserParams::<f64>::init(arch, kernel, 2, &mut rng)?;
                for v in online.values_mut() {
                    *v += 0.5 * (rng.random::<f64>() - 0.5);
                }
                let mut target = online.clone();
                for v in target.values_mut() {
                    *v += 0.3 * (rng.random::<f64>() - 0.5);
                }
                let plans = plan_batch::<f64, _>(&cfg, &batch, 0.3, &mut rng)?;
                for (branch, kappa) in [("consistency", 0.0), ("anchor", 1.0), ("mixture", 0.4)] {
                    let r = check_plan_gradient(&cfg, &online, &target, &plans, kappa, coords, 1e-5, 7)?;
                    let arch_label = match arch {
                        Architecture::Tabular { .. } => "tabular",
                        Architecture::Mlp { .. } => "mlp",
                    };
                    checks.push(Check::below(
                        format!("{}.{arch_label}.{}.{branch}", kernel_label(&kernel), div_label(d)),
                        r.max_rel_error,
                        1e-4,
                    ));
                }
            }
        }
    }
    Ok(checks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grids_are_exact_decimals() {
        assert_eq!(grid(0.1, 0.1, 0.9), vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]);
        assert_eq!(grid(0.25, 0.0, 1.0), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
    }

    #[test]
    fn small_suites_pass() {
        for suite in [
            Suite::Bridges,
            Suite::FixedPoint,
            Suite::MdlmEquiv,
            Suite::Composition,
            Suite::GlobalBound,
            Suite::Grad,
        ] {
            let rep = run_suite(suite, Size::Small).unwrap();
            let bad: Vec<_> = rep.failures().collect();
            assert!(rep.passed, "{suite:?}: {bad:?}");
        }
    }

    #[test]
    fn checks_compare_strictly() {
        assert!(!Check::below("x", 1e-10, 1e-10).passed);
        assert!(Check::above("y", 0.2, 0.1).passed);
        assert!(!Check::above("y", 0.1, 0.1).passed);
    }

    #[test]
    fn reference_loop_detects_a_different_learning_rate() {
        let cfg = mdlm_reference_config(5).unwrap();
        let data = vec![vec![0, 1, 2], vec![2, 2, 0]];
        let a = weighted_ce_reference(3, 3, 8, 32, 5, 0.5, cfg.t_min, (0, 1), &data);
        let b = weighted_ce_reference(3, 3, 8, 32, 5, 0.4, cfg.t_min, (0, 1), &data);
        assert_eq!(a[0], b[0]);
        assert!((a[4] - b[4]).abs() > 1e-6);
    }
}
