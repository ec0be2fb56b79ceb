//! Training loop for the mixed consistency / max-step objective.
//!
//! One step draws, per batch element and in this order from the noise
//! stream: `t ~ U(t_min, 1)`, the branch uniform, `delta` (consistency branch
//! only), the corruption of every position, then the bridge draw of every
//! position. Data indices come from a separate stream. Batch reductions run
//! sequentially in element order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::chain::CorruptionKernel;
use crate::denoiser::{Architecture, DenoiserParams, EmaState};
use crate::error::{CdlmError, Result};
use crate::objective::{
    anchor_loss_with_grad, consistency_loss_with_grad, loss_positions, sample_step_size, weight, Divergence,
    LossBreakdown, MaxStepMixer, StepSizeScheduler,
};
use crate::scalar::Scalar;

/// Relative-error denominator floor used by [`grad_check`].
pub const GRAD_CHECK_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Optimizer {
    Sgd,
    AdaptiveMoments {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::AdaptiveMoments {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub data: u64,
    pub noise: u64,
    pub init: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds {
            data: 0,
            noise: 1,
            init: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub kernel: CorruptionKernel,
    pub architecture: Architecture,
    pub seq_len: usize,
    pub divergence: Divergence,
    pub scheduler: StepSizeScheduler,
    pub mixer: MaxStepMixer,
    pub batch_size: usize,
    pub total_steps: u64,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub ema_decay: f64,
    pub hard_update_every: Option<u64>,
    pub t_min: f64,
    /// Evaluate both loss terms for every element instead of sampling a branch.
    pub exact_mixture: bool,
    pub log_every: u64,
    pub seeds: Seeds,
}

impl TrainingConfig {
    /// Defaults for the given model: adaptive moments at `3e-4` for the MLP,
    /// plain gradient descent at `0.5` for the table.
    pub fn new(kernel: CorruptionKernel, architecture: Architecture, seq_len: usize) -> Self {
        let (optimizer, learning_rate) = match architecture {
            Architecture::Mlp { .. } => (Optimizer::adam(), 3e-4),
            Architecture::Tabular { .. } => (Optimizer::Sgd, 0.5),
        };
        Self {
            kernel,
            architecture,
            seq_len,
            divergence: Divergence::Jsd,
            scheduler: StepSizeScheduler::default(),
            mixer: MaxStepMixer::default(),
            batch_size: 256,
            total_steps: 1000,
            learning_rate,
            optimizer,
            ema_decay: 0.999,
            hard_update_every: None,
            t_min: 1e-3,
            exact_mixture: false,
            log_every: 100,
            seeds: Seeds::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CdlmError::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if self.total_steps == 0 {
            return bad("total steps must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if !(self.ema_decay > 0.0 && self.ema_decay <= 1.0) {
            return bad(format!("EMA decay must lie in (0, 1], got {}", self.ema_decay));
        }
        if !(self.t_min > 0.0 && self.t_min < 1.0) {
            return bad(format!("t_min must lie in (0, 1), got {}", self.t_min));
        }
        if self.hard_update_every == Some(0) || self.log_every == 0 {
            return bad("periods must be at least 1".into());
        }
        if let Optimizer::AdaptiveMoments { beta1, beta2, eps } = self.optimizer {
            if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0) {
                return bad("adaptive-moment settings need beta in [0, 1) and eps > 0".into());
            }
        }
        self.scheduler.validate()?;
        self.mixer.validate()
    }
}

/// Everything that changes during training.
#[derive(Debug, Clone)]
pub struct TrainState<T> {
    pub online: DenoiserParams<T>,
    pub ema: EmaState<T>,
    first_moment: Vec<T>,
    second_moment: Vec<T>,
    pub step: u64,
    pub data_rng: ChaCha8Rng,
    pub noise_rng: ChaCha8Rng,
}

impl<T: Scalar> TrainState<T> {
    /// Fresh parameters from the init seed; the EMA target starts as a copy.
    pub fn new(config: &TrainingConfig) -> Result<Self> {
        let mut init_rng = ChaCha8Rng::seed_from_u64(config.seeds.init);
        let online = DenoiserParams::init(config.architecture, config.kernel, config.seq_len, &mut init_rng)?;
        Self::from_params(config, online)
    }

    pub fn from_params(config: &TrainingConfig, online: DenoiserParams<T>) -> Result<Self> {
        let ema = EmaState::new(&online, T::of(config.ema_decay))?;
        let n = online.len();
        Ok(Self {
            online,
            ema,
            first_moment: vec![T::zero(); n],
            second_moment: vec![T::zero(); n],
            step: 0,
            data_rng: ChaCha8Rng::seed_from_u64(config.seeds.data),
            noise_rng: ChaCha8Rng::seed_from_u64(config.seeds.noise),
        })
    }

    fn apply_update(&mut self, config: &TrainingConfig, grad: &[T]) {
        let lr = T::of(config.learning_rate);
        match config.optimizer {
            Optimizer::Sgd => {
                for (p, &g) in self.online.values_mut().iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            Optimizer::AdaptiveMoments { beta1, beta2, eps } => {
                let k = (self.step + 1) as i32;
                let (b1, b2, e) = (T::of(beta1), T::of(beta2), T::of(eps));
                let c1 = T::one() - T::of(beta1.powi(k));
                let c2 = T::one() - T::of(beta2.powi(k));
                let values = self.online.values_mut();
                for (((p, &g), m), v) in values
                    .iter_mut()
                    .zip(grad)
                    .zip(self.first_moment.iter_mut())
                    .zip(self.second_moment.iter_mut())
                {
                    *m = b1 * *m + (T::one() - b1) * g;
                    *v = b2 * *v + (T::one() - b2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + e);
                }
            }
        }
    }
}

/// Which loss an element contributes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Consistency,
    Anchor,
    Both,
}

/// The random draws behind one batch element. Fixing a plan turns the loss
/// into a deterministic function of the online parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ElementPlan<T> {
    pub x0: Vec<usize>,
    pub t: T,
    pub branch: Branch,
    /// Step size and bridge sample, present unless the branch is `Anchor`.
    pub delta: Option<T>,
    pub xt: Vec<usize>,
    pub xs: Option<Vec<usize>>,
}

/// Draws every random quantity of a batch from `rng`.
pub fn plan_batch<T: Scalar, R: Rng + ?Sized>(
    config: &TrainingConfig,
    batch: &[&[usize]],
    progress: f64,
    rng: &mut R,
) -> Result<Vec<ElementPlan<T>>> {
    let kappa = config.mixer.value(progress);
    let t_min = config.t_min;
    let mut plans = Vec::with_capacity(batch.len());
    for &x0 in batch {
        let u: f64 = rng.random();
        let t = T::of(t_min + (1.0 - t_min) * u);
        let b: f64 = rng.random();
        let branch = if config.exact_mixture {
            Branch::Both
        } else if b < kappa {
            Branch::Anchor
        } else {
            Branch::Consistency
        };
        let delta = match branch {
            Branch::Anchor => None,
            _ => Some(sample_step_size(&config.scheduler, progress, t, rng)?),
        };
        let xt = config.kernel.corrupt(x0, t, rng)?.0;
        let xs = match delta {
            Some(d) => Some(config.kernel.sample_bridge(x0, &xt, t - d, t, rng)?.0),
            None => None,
        };
        plans.push(ElementPlan {
            x0: x0.to_vec(),
            t,
            branch,
            delta,
            xt,
            xs,
        });
    }
    Ok(plans)
}

fn element_diagnostic<T: Scalar>(i: usize, p: &ElementPlan<T>, what: &str) -> CdlmError {
    CdlmError::Numeric(format!(
        "{what} at batch element {i}: x0={:?} xt={:?} t={} delta={:?} xs={:?}",
        p.x0, p.xt, p.t, p.delta, p.xs
    ))
}

/// Batch-mean loss of a fixed plan and, optionally, its gradient with respect
/// to the online parameters. The target grid is computed from `target` and
/// treated as a constant.
pub fn evaluate_plan<T: Scalar>(
    config: &TrainingConfig,
    online: &DenoiserParams<T>,
    target: &DenoiserParams<T>,
    plans: &[ElementPlan<T>],
    kappa: f64,
    grad: Option<&mut [T]>,
) -> Result<LossBreakdown<T>> {
    let n = online.vocab_size();
    let l = online.seq_len();
    let batch = plans.len();
    if batch == 0 {
        return Err(CdlmError::Shape("empty batch".into()));
    }
    let online_inputs: Vec<(&[usize], T)> = plans.iter().map(|p| (p.xt.as_slice(), p.t)).collect();
    let fwd = online.forward_batch(&online_inputs)?;
    let with_target: Vec<usize> = (0..batch).filter(|&i| plans[i].xs.is_some()).collect();
    let target_inputs: Vec<(&[usize], T)> = with_target
        .iter()
        .map(|&i| {
            let p = &plans[i];
            (p.xs.as_deref().expect("planned"), p.t - p.delta.expect("planned"))
        })
        .collect();
    let target_fwd = target.forward_batch(&target_inputs)?;

    let k = T::of(kappa);
    let inv_b = T::one() / T::of_usize(batch);
    let mut h = vec![T::zero(); batch * l * n];
    let (mut cons_sum, mut anchor_sum) = (T::zero(), T::zero());
    let (mut n_cons, mut n_anchor) = (0usize, 0usize);
    let mut positions_counted = 0;
    let mut target_slot = 0;
    for (i, p) in plans.iter().enumerate() {
        let grid = fwd.grid(i, l, n);
        let positions = loss_positions(online.kernel(), &p.xt);
        positions_counted += positions.len();
        let (cons_scale, anchor_scale) = match p.branch {
            Branch::Consistency => (inv_b, T::zero()),
            Branch::Anchor => (T::zero(), inv_b),
            Branch::Both => ((T::one() - k) * inv_b, k * inv_b),
        };
        let mut add = |hs: Vec<Option<Vec<T>>>, scale: T| {
            for (pos, hv) in hs.into_iter().enumerate() {
                if let Some(hv) = hv {
                    let base = (i * l + pos) * n;
                    for (acc, v) in h[base..base + n].iter_mut().zip(hv) {
                        *acc += scale * v;
                    }
                }
            }
        };
        if p.branch != Branch::Anchor {
            let delta = p.delta.expect("planned");
            let tgrid = target_fwd.grid(target_slot, l, n);
            target_slot += 1;
            let (v, hs) = consistency_loss_with_grad(config.divergence, &grid, &tgrid, &positions, weight(p.t, delta)?)?;
            if !v.is_finite() {
                return Err(element_diagnostic(i, p, "non-finite consistency loss"));
            }
            cons_sum += v;
            n_cons += 1;
            add(hs, cons_scale);
        }
        if p.branch != Branch::Consistency {
            let w = online.kernel().schedule().anchor_weight(p.t)?;
            let (a, hs) = anchor_loss_with_grad(&grid, &p.x0, &positions, w)?;
            if !a.value.is_finite() {
                return Err(element_diagnostic(i, p, "non-finite anchor loss"));
            }
            anchor_sum += a.value;
            n_anchor += 1;
            add(hs, anchor_scale);
        }
    }
    if let Some(grad) = grad {
        online.backward_batch(&fwd, &h, grad)?;
    }
    let mean = |s: T, c: usize| if c == 0 { T::zero() } else { s / T::of_usize(c) };
    let consistency_term = mean(cons_sum, n_cons);
    let anchor_term = mean(anchor_sum, n_anchor);
    let (total, kappa_eff) = if plans.iter().all(|p| p.branch == Branch::Both) {
        ((T::one() - k) * consistency_term + k * anchor_term, k)
    } else {
        let kh = T::of_usize(n_anchor) * inv_b;
        ((cons_sum + anchor_sum) * inv_b, kh)
    };
    Ok(LossBreakdown {
        consistency_term,
        anchor_term,
        total,
        kappa: kappa_eff,
        positions_counted,
    })
}

/// Outcome of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport<T> {
    pub loss: LossBreakdown<T>,
    pub grad_norm: T,
}

/// One optimizer step on the given clean sequences.
pub fn train_step<T: Scalar>(
    state: &mut TrainState<T>,
    config: &TrainingConfig,
    batch: &[&[usize]],
) -> Result<StepReport<T>> {
    let progress = state.step as f64 / config.total_steps.max(1) as f64;
    let kappa = config.mixer.value(progress);
    let plans = plan_batch::<T, _>(config, batch, progress, &mut state.noise_rng)?;
    let mut grad = vec![T::zero(); state.online.len()];
    let loss = evaluate_plan(config, &state.online, &state.ema.target, &plans, kappa, Some(&mut grad))?;
    if !loss.total.is_finite() {
        return Err(CdlmError::Numeric(format!("non-finite batch loss at step {}", state.step)));
    }
    let mut sq = T::zero();
    for (j, g) in grad.iter().enumerate() {
        if !g.is_finite() {
            return Err(CdlmError::Numeric(format!(
                "non-finite gradient at parameter {j}, step {}",
                state.step
            )));
        }
        sq += *g * *g;
    }
    state.apply_update(config, &grad);
    state.ema.ema_update(&state.online)?;
    state.step += 1;
    if let Some(k) = config.hard_update_every {
        if state.step % k == 0 {
            state.ema.hard_update(&state.online)?;
        }
    }
    Ok(StepReport {
        loss,
        grad_norm: sq.sqrt(),
    })
}

/// One row of `metrics.csv`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricRow {
    pub step: u64,
    pub loss_total: f64,
    pub loss_cons: f64,
    pub loss_anchor: f64,
    pub grad_norm: f64,
}

pub const METRICS_HEADER: &str = "step,loss_total,loss_cons,loss_anchor,grad_norm";

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{:e},{:e},{:e},{:e}\n",
            r.step, r.loss_total, r.loss_cons, r.loss_anchor, r.grad_norm
        ));
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub state: TrainState<T>,
    pub metrics: Vec<MetricRow>,
    /// Batch loss of every step.
    pub history: Vec<LossBreakdown<T>>,
}

/// Runs steps until `state.step == config.total_steps`, drawing batches
/// uniformly with replacement from `dataset`.
pub fn train_loop<T: Scalar>(
    config: &TrainingConfig,
    mut state: TrainState<T>,
    dataset: &[Vec<usize>],
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(CdlmError::Config("training set is empty".into()));
    }
    let mut metrics = Vec::new();
    let mut history = Vec::new();
    while state.step < config.total_steps {
        let batch: Vec<&[usize]> = (0..config.batch_size)
            .map(|_| dataset[state.data_rng.random_range(0..dataset.len())].as_slice())
            .collect();
        let report = train_step(&mut state, config, &batch)?;
        history.push(report.loss);
        if state.step % config.log_every == 0 || state.step == config.total_steps {
            metrics.push(MetricRow {
                step: state.step,
                loss_total: report.loss.total.as_f64(),
                loss_cons: report.loss.consistency_term.as_f64(),
                loss_anchor: report.loss.anchor_term.as_f64(),
                grad_norm: report.grad_norm.as_f64(),
            });
        }
    }
    Ok(TrainOutcome {
        state,
        metrics,
        history,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_coord: usize,
    pub coords: usize,
}

/// Compares `analytic` with central differences of `f` at `n_coords`
/// coordinates chosen uniformly (without replacement) by `seed`. The relative
/// error is `|a - n| / max(|a|, |n|, GRAD_CHECK_FLOOR)`.
pub fn grad_check<T: Scalar, F>(
    x: &[T],
    analytic: &[T],
    mut f: F,
    n_coords: usize,
    fd_step: T,
    seed: u64,
) -> Result<GradCheck>
where
    F: FnMut(&[T]) -> Result<T>,
{
    if x.len() != analytic.len() {
        return Err(CdlmError::Shape("gradient and point differ in length".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords: Vec<usize> = if n_coords >= x.len() {
        (0..x.len()).collect()
    } else {
        rand::seq::index::sample(&mut rng, x.len(), n_coords).into_vec()
    };
    let mut point = x.to_vec();
    let mut worst = (0.0f64, 0usize);
    for &j in &coords {
        let orig = point[j];
        point[j] = orig + fd_step;
        let up = f(&point)?;
        point[j] = orig - fd_step;
        let down = f(&point)?;
        point[j] = orig;
        let numeric = ((up - down) / (fd_step + fd_step)).as_f64();
        let a = analytic[j].as_f64();
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
        if rel > worst.0 || !rel.is_finite() {
            worst = (rel, j);
        }
    }
    Ok(GradCheck {
        max_rel_error: worst.0,
        worst_coord: worst.1,
        coords: coords.len(),
    })
}

/// Gradient check of the batch loss of `plans` with respect to the online
/// parameters, target held fixed.
pub fn check_plan_gradient<T: Scalar>(
    config: &TrainingConfig,
    online: &DenoiserParams<T>,
    target: &DenoiserParams<T>,
    plans: &[ElementPlan<T>],
    kappa: f64,
    n_coords: usize,
    fd_step: T,
    seed: u64,
) -> Result<GradCheck> {
    let mut grad = vec![T::zero(); online.len()];
    evaluate_plan(config, online, target, plans, kappa, Some(&mut grad))?;
    let mut probe = online.clone();
    grad_check(
        online.values(),
        &grad,
        |x| {
            probe.values_mut().copy_from_slice(x);
            Ok(evaluate_plan(config, &probe, target, plans, kappa, None)?.total)
        },
        n_coords,
        fd_step,
        seed,
    )
}
