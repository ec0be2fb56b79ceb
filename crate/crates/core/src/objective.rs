//! Divergences, loss weights, step-size and max-step schedules, and the
//! assembled consistency / anchor losses.
//!
//! Argument order: `divergence(d, p, q)` evaluates `KL(p || q)` for
//! [`Divergence::ForwardKl`] and `KL(q || p)` for [`Divergence::ReverseKl`].
//! Consistency losses always pass the (stop-gradient) target first and the
//! online prediction second, so forward KL is `KL(target || online)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::chain::{CategoricalDistribution, CorruptionKernel, KernelVariant, NoiseSchedule};
use crate::denoiser::PredictionGrid;
use crate::error::{CdlmError, Result};
use crate::scalar::Scalar;

/// Uniform mixing weight applied to both arguments of a KL divergence when
/// the first argument's support is not covered by the second.
pub const KL_SMOOTHING: f64 = 1e-9;

/// Floor applied to the predicted probability of the true token in the anchor loss.
pub const ANCHOR_PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Divergence {
    ForwardKl,
    ReverseKl,
    #[default]
    Jsd,
}

fn smooth<T: Scalar>(p: &[T], eps: T) -> Vec<T> {
    let n = T::of_usize(p.len());
    p.iter().map(|&v| (T::one() - eps) * v + eps / n).collect()
}

fn covers<T: Scalar>(p: &[T], q: &[T]) -> bool {
    p.iter().zip(q).all(|(&a, &b)| a == T::zero() || b > T::zero())
}

fn kl_unchecked<T: Scalar>(p: &[T], q: &[T]) -> T {
    p.iter()
        .zip(q)
        .filter(|(a, _)| **a > T::zero())
        .map(|(&a, &b)| a * (a / b).ln())
        .sum()
}

/// `KL(p || q)` without smoothing; errors when `q` misses part of `p`'s support.
pub fn kl_strict<T: Scalar>(p: &[T], q: &[T]) -> Result<T> {
    if !covers(p, q) {
        return Err(CdlmError::InfiniteDivergence);
    }
    Ok(kl_unchecked(p, q))
}

/// `KL(p || q)`, falling back to [`KL_SMOOTHING`] when the support check fails.
pub fn kl<T: Scalar>(p: &[T], q: &[T]) -> T {
    if covers(p, q) {
        kl_unchecked(p, q)
    } else {
        let eps = T::of(KL_SMOOTHING);
        kl_unchecked(&smooth(p, eps), &smooth(q, eps))
    }
}

/// Jensen-Shannon divergence in nats; always finite and at most `ln 2`.
pub fn jsd<T: Scalar>(p: &[T], q: &[T]) -> T {
    let half = T::of(0.5);
    let mut total = T::zero();
    for (&a, &b) in p.iter().zip(q) {
        let m = half * (a + b);
        if a > T::zero() {
            total += half * a * (a / m).ln();
        }
        if b > T::zero() {
            total += half * b * (b / m).ln();
        }
    }
    total.max(T::zero())
}

impl Divergence {
    fn check<T: Scalar>(p: &[T], q: &[T]) -> Result<()> {
        if p.len() != q.len() {
            return Err(CdlmError::Shape(format!(
                "divergence between distributions of length {} and {}",
                p.len(),
                q.len()
            )));
        }
        Ok(())
    }

    /// Evaluates the divergence; KL variants are smoothed if needed.
    pub fn eval<T: Scalar>(&self, p: &[T], q: &[T]) -> Result<T> {
        Self::check(p, q)?;
        Ok(match self {
            Divergence::ForwardKl => kl(p, q),
            Divergence::ReverseKl => kl(q, p),
            Divergence::Jsd => jsd(p, q),
        })
    }

    /// Evaluates the divergence without smoothing.
    pub fn eval_strict<T: Scalar>(&self, p: &[T], q: &[T]) -> Result<T> {
        Self::check(p, q)?;
        match self {
            Divergence::ForwardKl => kl_strict(p, q),
            Divergence::ReverseKl => kl_strict(q, p),
            Divergence::Jsd => Ok(jsd(p, q)),
        }
    }

    /// Value and `q * dD/dq` (elementwise) where `q` is the second argument.
    ///
    /// The product form keeps the softmax backward pass division free:
    /// `dD/dz_j = h_j - q_j * sum_k h_k` for `q = softmax(z)`.
    pub fn eval_with_second_grad<T: Scalar>(&self, p: &[T], q: &[T]) -> Result<(T, Vec<T>)> {
        Self::check(p, q)?;
        let eps = T::of(KL_SMOOTHING);
        let one = T::one();
        Ok(match self {
            Divergence::ForwardKl => {
                if covers(p, q) {
                    let h = p.iter().map(|&a| -a).collect();
                    (kl_unchecked(p, q), h)
                } else {
                    let ps = smooth(p, eps);
                    let qs = smooth(q, eps);
                    let h = q
                        .iter()
                        .zip(ps.iter().zip(&qs))
                        .map(|(&qj, (&a, &b))| -qj * (one - eps) * a / b)
                        .collect();
                    (kl_unchecked(&ps, &qs), h)
                }
            }
            Divergence::ReverseKl => {
                if covers(q, p) {
                    let h = q
                        .iter()
                        .zip(p)
                        .map(|(&b, &a)| if b > T::zero() { b * ((b / a).ln() + one) } else { T::zero() })
                        .collect();
                    (kl_unchecked(q, p), h)
                } else {
                    let ps = smooth(p, eps);
                    let qs = smooth(q, eps);
                    let h = q
                        .iter()
                        .zip(ps.iter().zip(&qs))
                        .map(|(&qj, (&a, &b))| qj * (one - eps) * ((b / a).ln() + one))
                        .collect();
                    (kl_unchecked(&qs, &ps), h)
                }
            }
            Divergence::Jsd => {
                let half = T::of(0.5);
                let h = p
                    .iter()
                    .zip(q)
                    .map(|(&a, &b)| {
                        if b > T::zero() {
                            half * b * (b / (half * (a + b))).ln()
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                (jsd(p, q), h)
            }
        })
    }
}

/// Divergence between two categorical distributions, in nats.
pub fn divergence<T: Scalar>(
    d: Divergence,
    p: &CategoricalDistribution<T>,
    q: &CategoricalDistribution<T>,
) -> Result<T> {
    d.eval(p.probs(), q.probs())
}

/// Path-length normalization `w(t, delta) = 1 / delta`.
pub fn weight<T: Scalar>(_t: T, delta: T) -> Result<T> {
    if !(delta > T::zero()) {
        return Err(CdlmError::Domain(format!("step size must be positive, got {delta}")));
    }
    Ok(T::one() / delta)
}

/// Positions that contribute to the loss: masked positions for the masked
/// kernel, every position otherwise.
pub fn loss_positions(kernel: &CorruptionKernel, xt: &[usize]) -> Vec<usize> {
    match kernel.variant() {
        KernelVariant::Masked => xt
            .iter()
            .enumerate()
            .filter(|(_, &v)| kernel.vocab().is_mask(v))
            .map(|(i, _)| i)
            .collect(),
        KernelVariant::Uniform => (0..xt.len()).collect(),
    }
}

fn check_grids<T: Scalar>(a: &PredictionGrid<T>, b: &PredictionGrid<T>) -> Result<()> {
    if a.len() != b.len() {
        return Err(CdlmError::Shape(format!(
            "prediction grids of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// `w * sum_i D(target_i || online_i)` over `positions`.
pub fn consistency_loss<T: Scalar>(
    d: Divergence,
    online: &PredictionGrid<T>,
    target: &PredictionGrid<T>,
    positions: &[usize],
    w: T,
) -> Result<T> {
    check_grids(online, target)?;
    let mut total = T::zero();
    for &i in positions {
        total += d.eval(target.row(i).probs(), online.row(i).probs())?;
    }
    Ok(w * total)
}

/// Consistency loss and its gradient with respect to the online
/// probabilities, in `q * dL/dq` form, one vector per position.
pub fn consistency_loss_with_grad<T: Scalar>(
    d: Divergence,
    online: &PredictionGrid<T>,
    target: &PredictionGrid<T>,
    positions: &[usize],
    w: T,
) -> Result<(T, Vec<Option<Vec<T>>>)> {
    check_grids(online, target)?;
    let mut total = T::zero();
    let mut grads = vec![None; online.len()];
    for &i in positions {
        let (v, mut h) = d.eval_with_second_grad(target.row(i).probs(), online.row(i).probs())?;
        total += v;
        h.iter_mut().for_each(|x| *x *= w);
        grads[i] = Some(h);
    }
    Ok((w * total, grads))
}

/// Weighted cross-entropy of the online prediction against the clean tokens.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorTerm<T> {
    pub value: T,
    /// Positions whose true-token probability fell below [`ANCHOR_PROB_FLOOR`].
    pub clamped: usize,
}

/// `w * sum_i -ln online_i[x0_i]` over `positions`, with `w = 1/t` under the
/// linear schedule (see [`anchor_weight`]).
pub fn anchor_loss<T: Scalar>(
    online: &PredictionGrid<T>,
    x0: &[usize],
    positions: &[usize],
    w: T,
) -> Result<AnchorTerm<T>> {
    anchor_loss_with_grad(online, x0, positions, w).map(|(a, _)| a)
}

pub fn anchor_loss_with_grad<T: Scalar>(
    online: &PredictionGrid<T>,
    x0: &[usize],
    positions: &[usize],
    w: T,
) -> Result<(AnchorTerm<T>, Vec<Option<Vec<T>>>)> {
    if x0.len() != online.len() {
        return Err(CdlmError::Shape(format!(
            "x0 has length {} but the grid has {} rows",
            x0.len(),
            online.len()
        )));
    }
    let floor = T::of(ANCHOR_PROB_FLOOR);
    let mut total = T::zero();
    let mut clamped = 0;
    let mut grads = vec![None; online.len()];
    for &i in positions {
        let row = online.row(i).probs();
        let p = row[x0[i]];
        let mut h = vec![T::zero(); row.len()];
        if p < floor {
            clamped += 1;
            total += -floor.ln();
        } else {
            total += -p.ln();
            h[x0[i]] = -w;
        }
        grads[i] = Some(h);
    }
    Ok((
        AnchorTerm {
            value: w * total,
            clamped,
        },
        grads,
    ))
}

/// Weight of the max-step anchor term at time `t`: `-alpha'(t) / (1 - alpha(t))`.
pub fn anchor_weight<T: Scalar>(schedule: NoiseSchedule, t: T) -> Result<T> {
    schedule.anchor_weight(t)
}

/// Consistency and anchor terms with their mixture.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossBreakdown<T> {
    pub consistency_term: T,
    pub anchor_term: T,
    pub total: T,
    /// Mixing weight applied to the anchor term.
    pub kappa: T,
    pub positions_counted: usize,
}

/// `(1 - kappa) * cons + kappa * anchor`.
pub fn combined_loss<T: Scalar>(cons: T, anchor: T, kappa: T) -> Result<LossBreakdown<T>> {
    if !(kappa >= T::zero() && kappa <= T::one()) {
        return Err(CdlmError::Domain(format!("kappa must lie in [0, 1], got {kappa}")));
    }
    Ok(LossBreakdown {
        consistency_term: cons,
        anchor_term: anchor,
        total: (T::one() - kappa) * cons + kappa * anchor,
        kappa,
        positions_counted: 0,
    })
}

/// Distribution of step sizes `delta = t - s` over the course of training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StepSizeScheduler {
    /// Uniform on `[lo, hi]` throughout.
    RandomRange { lo: f64, hi: f64 },
    /// Uniform on `[lo, lo + (hi - lo) * progress]`.
    LinearIncreasing { lo: f64, hi: f64 },
    /// Uniform on `[hi - (hi - lo) * progress, hi]`.
    LinearDecreasing { lo: f64, hi: f64 },
    /// Uniform on `stages[j]` during the j-th equal fraction of training.
    Staged { stages: Vec<[f64; 2]> },
}

impl Default for StepSizeScheduler {
    fn default() -> Self {
        StepSizeScheduler::RandomRange {
            lo: 0.125,
            hi: 0.625,
        }
    }
}

fn check_range(lo: f64, hi: f64) -> Result<()> {
    if !(lo > 0.0 && lo < hi && hi <= 1.0) {
        return Err(CdlmError::Config(format!(
            "step-size range must satisfy 0 < lo < hi <= 1, got [{lo}, {hi}]"
        )));
    }
    Ok(())
}

impl StepSizeScheduler {
    pub fn validate(&self) -> Result<()> {
        match self {
            StepSizeScheduler::RandomRange { lo, hi }
            | StepSizeScheduler::LinearIncreasing { lo, hi }
            | StepSizeScheduler::LinearDecreasing { lo, hi } => check_range(*lo, *hi),
            StepSizeScheduler::Staged { stages } => {
                if stages.is_empty() {
                    return Err(CdlmError::Config("staged scheduler needs at least one stage".into()));
                }
                stages.iter().try_for_each(|[lo, hi]| check_range(*lo, *hi))
            }
        }
    }

    /// The three-stage increasing schedule `[1/8,1/4]`, `[1/8,3/8]`, `[1/8,5/8]`.
    pub fn staged_increasing() -> Self {
        StepSizeScheduler::Staged {
            stages: vec![[0.125, 0.25], [0.125, 0.375], [0.125, 0.625]],
        }
    }

    /// Range in force at `progress` in `[0, 1]`.
    pub fn range(&self, progress: f64) -> (f64, f64) {
        let p = progress.clamp(0.0, 1.0);
        match self {
            StepSizeScheduler::RandomRange { lo, hi } => (*lo, *hi),
            StepSizeScheduler::LinearIncreasing { lo, hi } => (*lo, lo + (hi - lo) * p),
            StepSizeScheduler::LinearDecreasing { lo, hi } => (hi - (hi - lo) * p, *hi),
            StepSizeScheduler::Staged { stages } => {
                let k = stages.len();
                let j = ((p * k as f64).floor() as usize).min(k - 1);
                (stages[j][0], stages[j][1])
            }
        }
    }
}

/// Draws `delta` for the current progress and clamps it to `t`.
pub fn sample_step_size<T: Scalar, R: Rng + ?Sized>(
    sched: &StepSizeScheduler,
    progress: f64,
    t: T,
    rng: &mut R,
) -> Result<T> {
    sched.validate()?;
    if !(t > T::zero()) {
        return Err(CdlmError::Domain(format!("step size needs t > 0, got {t}")));
    }
    let (lo, hi) = sched.range(progress);
    let u: f64 = rng.random();
    let delta = T::of(lo + (hi - lo) * u);
    Ok(delta.min(t))
}

/// Probability of a max-step (anchor) task as a function of training progress.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MaxStepMixer {
    Constant { value: f64 },
    /// Piecewise-linear through `(progress, value)` knots, flat outside.
    Annealed { knots: Vec<[f64; 2]> },
}

impl Default for MaxStepMixer {
    fn default() -> Self {
        MaxStepMixer::Constant { value: 0.4 }
    }
}

impl MaxStepMixer {
    pub fn constant(value: f64) -> Self {
        MaxStepMixer::Constant { value }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| (0.0..=1.0).contains(&v);
        match self {
            MaxStepMixer::Constant { value } if ok(*value) => Ok(()),
            MaxStepMixer::Annealed { knots }
                if !knots.is_empty()
                    && knots.iter().all(|[p, v]| ok(*p) && ok(*v))
                    && knots.windows(2).all(|w| w[0][0] < w[1][0]) =>
            {
                Ok(())
            }
            _ => Err(CdlmError::Config(
                "max-step weights must lie in [0, 1] with increasing knot positions".into(),
            )),
        }
    }

    pub fn value(&self, progress: f64) -> f64 {
        match self {
            MaxStepMixer::Constant { value } => *value,
            MaxStepMixer::Annealed { knots } => {
                let first = knots[0];
                let last = knots[knots.len() - 1];
                if progress <= first[0] {
                    return first[1];
                }
                if progress >= last[0] {
                    return last[1];
                }
                for w in knots.windows(2) {
                    let ([p0, v0], [p1, v1]) = (w[0], w[1]);
                    if progress <= p1 {
                        return v0 + (v1 - v0) * (progress - p0) / (p1 - p0);
                    }
                }
                last[1]
            }
        }
    }
}
