//! Brute-force ground truth on enumerable token spaces.
//!
//! Sequences are indexed in mixed radix with position 0 least significant,
//! the same convention the tabular denoiser uses for its rows.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::chain::{masked_bridge, CategoricalDistribution, CorruptionKernel, KernelVariant, NoiseSchedule};
use crate::denoiser::{Architecture, DenoiserParams, PredictionGrid};
use crate::error::{CdlmError, Result};
use crate::objective::{divergence, loss_positions, Divergence};
use crate::scalar::Scalar;

/// Largest number of joint states any oracle routine will enumerate.
pub const ENUMERATION_CAP: u128 = 1 << 20;

/// Number of sequences of length `seq_len` over `base` symbols, if within the cap.
pub fn state_count(base: usize, seq_len: usize) -> Result<usize> {
    let states = (base as u128).checked_pow(seq_len as u32).unwrap_or(u128::MAX);
    if states > ENUMERATION_CAP {
        return Err(CdlmError::EnumerationCap {
            states,
            cap: ENUMERATION_CAP,
        });
    }
    Ok(states as usize)
}

pub fn encode_state(seq: &[usize], base: usize) -> usize {
    seq.iter().rev().fold(0, |acc, &v| acc * base + v)
}

pub fn decode_state(mut index: usize, base: usize, seq_len: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(seq_len);
    for _ in 0..seq_len {
        out.push(index % base);
        index /= base;
    }
    out
}

/// Explicit probability table over every clean sequence of length `seq_len`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataDistribution {
    clean_size: usize,
    seq_len: usize,
    probs: Vec<f64>,
}

impl DataDistribution {
    pub fn new(clean_size: usize, seq_len: usize, probs: Vec<f64>) -> Result<Self> {
        let d = Self {
            clean_size,
            seq_len,
            probs,
        };
        d.validate()?;
        Ok(d)
    }

    /// Checks shape and normalization; used after deserialization as well.
    pub fn validate(&self) -> Result<()> {
        if self.clean_size == 0 || self.seq_len == 0 {
            return Err(CdlmError::Shape("data distribution needs a vocabulary and a length".into()));
        }
        let states = state_count(self.clean_size, self.seq_len)?;
        if self.probs.len() != states {
            return Err(CdlmError::Shape(format!(
                "expected {states} probabilities, got {}",
                self.probs.len()
            )));
        }
        if self.probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(CdlmError::InvalidDistribution("negative or non-finite mass".into()));
        }
        let total: f64 = self.probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(CdlmError::InvalidDistribution(format!("total mass {total}")));
        }
        Ok(())
    }

    /// Empirical frequencies of the given sequences.
    pub fn empirical<'a, I>(clean_size: usize, seq_len: usize, seqs: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [usize]>,
    {
        let states = state_count(clean_size, seq_len)?;
        let mut counts = vec![0u64; states];
        let mut n = 0u64;
        for s in seqs {
            if s.len() != seq_len || s.iter().any(|&v| v >= clean_size) {
                return Err(CdlmError::Shape(format!("sequence {s:?} is not a clean length-{seq_len} sequence")));
            }
            counts[encode_state(s, clean_size)] += 1;
            n += 1;
        }
        if n == 0 {
            return Err(CdlmError::InvalidDistribution("no sequences".into()));
        }
        let probs = counts.iter().map(|&c| c as f64 / n as f64).collect();
        Self::new(clean_size, seq_len, probs)
    }

    pub fn clean_size(&self) -> usize {
        self.clean_size
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, seq: &[usize]) -> f64 {
        self.probs[encode_state(seq, self.clean_size)]
    }

    /// `(sequence, probability)` for every sequence with positive mass.
    pub fn support(&self) -> impl Iterator<Item = (Vec<usize>, f64)> + '_ {
        self.probs
            .iter()
            .enumerate()
            .filter(|(_, p)| **p > 0.0)
            .map(|(i, &p)| (decode_state(i, self.clean_size, self.seq_len), p))
    }

    pub fn support_size(&self) -> usize {
        self.probs.iter().filter(|p| **p > 0.0).count()
    }

    /// Inverse-CDF draw using one uniform.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut last = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > 0.0 {
                acc += p;
                last = i;
                if u < acc {
                    return decode_state(i, self.clean_size, self.seq_len);
                }
            }
        }
        decode_state(last, self.clean_size, self.seq_len)
    }

    /// Per-position marginal over clean tokens.
    pub fn marginals(&self) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; self.clean_size]; self.seq_len];
        for (seq, p) in self.support() {
            for (i, &v) in seq.iter().enumerate() {
                out[i][v] += p;
            }
        }
        out
    }

    pub fn entropy(&self) -> f64 {
        self.probs.iter().filter(|p| **p > 0.0).map(|p| -p * p.ln()).sum()
    }

    fn check_kernel(&self, kernel: &CorruptionKernel) -> Result<()> {
        if kernel.vocab().clean_size() != self.clean_size {
            return Err(CdlmError::Shape(format!(
                "data over {} clean tokens, kernel over {}",
                self.clean_size,
                kernel.vocab().clean_size()
            )));
        }
        state_count(kernel.size(), self.seq_len)?;
        Ok(())
    }
}

/// Anything that maps `(x_t, t)` to a per-position prediction.
pub trait Predictor<T: Scalar> {
    fn predict(&self, xt: &[usize], t: T) -> Result<PredictionGrid<T>>;

    /// Predictions for several sequences at one time.
    fn predict_many(&self, xs: &[&[usize]], t: T) -> Result<Vec<PredictionGrid<T>>> {
        xs.iter().map(|x| self.predict(x, t)).collect()
    }
}

impl<T: Scalar> Predictor<T> for DenoiserParams<T> {
    fn predict(&self, xt: &[usize], t: T) -> Result<PredictionGrid<T>> {
        DenoiserParams::predict(self, xt, t)
    }

    fn predict_many(&self, xs: &[&[usize]], t: T) -> Result<Vec<PredictionGrid<T>>> {
        let inputs: Vec<(&[usize], T)> = xs.iter().map(|x| (*x, t)).collect();
        let fwd = self.forward_batch(&inputs)?;
        Ok(self.grids(&fwd))
    }
}

impl<T: Scalar, F> Predictor<T> for F
where
    F: Fn(&[usize], T) -> Result<PredictionGrid<T>>,
{
    fn predict(&self, xt: &[usize], t: T) -> Result<PredictionGrid<T>> {
        self(xt, t)
    }
}

/// The Bayes-optimal per-position predictor for `data` under `kernel`.
#[derive(Debug, Clone, Copy)]
pub struct ExactPosterior<'a> {
    pub data: &'a DataDistribution,
    pub kernel: &'a CorruptionKernel,
}

impl<T: Scalar> Predictor<T> for ExactPosterior<'_> {
    fn predict(&self, xt: &[usize], t: T) -> Result<PredictionGrid<T>> {
        exact_posterior(self.data, self.kernel, xt, t)
    }
}

/// The same distribution at every position, for every input and time.
/// A degenerate fixed point of the consistency operator.
#[derive(Debug, Clone)]
pub struct ConstantPredictor<T> {
    pub row: CategoricalDistribution<T>,
    pub seq_len: usize,
}

impl<T: Scalar> Predictor<T> for ConstantPredictor<T> {
    fn predict(&self, _xt: &[usize], _t: T) -> Result<PredictionGrid<T>> {
        Ok(PredictionGrid::new(vec![self.row.clone(); self.seq_len]))
    }
}

/// `q(x_t | x_0)` for whole sequences.
fn likelihood<T: Scalar>(kernel: &CorruptionKernel, x0: &[usize], xt: &[usize], t: T) -> T {
    let c = |a: usize, b: usize| kernel.marginal(a, t).map(|m| m.probs()[b]).unwrap_or(T::zero());
    x0.iter().zip(xt).fold(T::one(), |acc, (&a, &b)| acc * c(a, b))
}

/// Unnormalized joint posterior over clean sequences: `(x0, p(x0) q(xt|x0))`.
fn joint_weights<T: Scalar>(
    data: &DataDistribution,
    kernel: &CorruptionKernel,
    xt: &[usize],
    t: T,
) -> Result<(T, Vec<(Vec<usize>, T)>)> {
    data.check_kernel(kernel)?;
    if xt.len() != data.seq_len {
        return Err(CdlmError::Shape(format!(
            "sequence of length {} for data of length {}",
            xt.len(),
            data.seq_len
        )));
    }
    for &v in xt {
        kernel.vocab().check_token(v)?;
    }
    let mut total = T::zero();
    let mut out = Vec::new();
    for (x0, p) in data.support() {
        let w = T::of(p) * likelihood(kernel, &x0, xt, t);
        if w > T::zero() {
            total += w;
            out.push((x0, w));
        }
    }
    if !(total > T::zero()) {
        return Err(CdlmError::Domain(format!("sequence {xt:?} is unreachable at t={t}")));
    }
    Ok((total, out))
}

/// Marginal law of `x_t` over all noisy sequences.
pub fn noisy_marginal<T: Scalar>(data: &DataDistribution, kernel: &CorruptionKernel, t: T) -> Result<Vec<T>> {
    data.check_kernel(kernel)?;
    let n = kernel.size();
    let states = state_count(n, data.seq_len)?;
    let mut out = vec![T::zero(); states];
    for (x0, p) in data.support() {
        let rows: Vec<Vec<T>> = x0
            .iter()
            .map(|&v| kernel.marginal(v, t).map(|m| m.into_probs()))
            .collect::<Result<_>>()?;
        expand_product(&rows, n, T::of(p), &mut out);
    }
    Ok(out)
}

/// Adds `scale * prod_i rows[i][x_i]` into `out` for every sequence `x`.
fn expand_product<T: Scalar>(rows: &[Vec<T>], base: usize, scale: T, out: &mut [T]) {
    let mut partial = vec![(0usize, scale)];
    let mut stride = 1usize;
    for row in rows {
        let mut next = Vec::with_capacity(partial.len() * 2);
        for &(idx, w) in &partial {
            for (k, &p) in row.iter().enumerate() {
                if p > T::zero() {
                    next.push((idx + k * stride, w * p));
                }
            }
        }
        partial = next;
        stride *= base;
    }
    for (idx, w) in partial {
        out[idx] += w;
    }
}

/// Per-position posterior marginal `p(x_0^i = v | x_t)` by enumeration.
pub fn exact_posterior<T: Scalar>(
    data: &DataDistribution,
    kernel: &CorruptionKernel,
    xt: &[usize],
    t: T,
) -> Result<PredictionGrid<T>> {
    let (total, weights) = joint_weights(data, kernel, xt, t)?;
    let n = kernel.size();
    let mut rows = vec![vec![T::zero(); n]; data.seq_len];
    for (x0, w) in &weights {
        for (i, &v) in x0.iter().enumerate() {
            rows[i][v] += *w;
        }
    }
    Ok(PredictionGrid::new(
        rows.into_iter()
            .map(|r| CategoricalDistribution::from_probs_unchecked(r.into_iter().map(|v| v / total).collect()))
            .collect(),
    ))
}

/// Joint posterior `p(x_0 | x_t)` as a dense table over clean sequences.
pub fn joint_posterior<T: Scalar>(
    data: &DataDistribution,
    kernel: &CorruptionKernel,
    xt: &[usize],
    t: T,
) -> Result<Vec<T>> {
    let (total, weights) = joint_weights(data, kernel, xt, t)?;
    let mut out = vec![T::zero(); data.probs.len()];
    for (x0, w) in weights {
        out[encode_state(&x0, data.clean_size)] = w / total;
    }
    Ok(out)
}

/// True reverse transition `p(x_s | x_t)` as a dense table over all noisy
/// sequences: the bridge averaged over the joint posterior of `x_0`.
pub fn exact_reverse<T: Scalar>(
    data: &DataDistribution,
    kernel: &CorruptionKernel,
    xt: &[usize],
    s: T,
    t: T,
) -> Result<Vec<T>> {
    let (total, weights) = joint_weights(data, kernel, xt, t)?;
    let n = kernel.size();
    let mut out = vec![T::zero(); state_count(n, data.seq_len)?];
    if s == t {
        out[encode_state(xt, n)] = T::one();
        return Ok(out);
    }
    for (x0, w) in weights {
        let rows: Vec<Vec<T>> = x0
            .iter()
            .zip(xt)
            .map(|(&a, &b)| kernel.bridge(a, b, s, t).map(|d| d.into_probs()))
            .collect::<Result<_>>()?;
        expand_product(&rows, n, w / total, &mut out);
    }
    Ok(out)
}

/// `E_{x_s ~ p(.|x_t)} [ f(x_s, s) ]`, the consistency operator applied to `f` at `x_t`.
pub fn reverse_expectation<T: Scalar, P: Predictor<T> + ?Sized>(
    f: &P,
    data: &DataDistribution,
    kernel: &CorruptionKernel,
    xt: &[usize],
    s: T,
    t: T,
) -> Result<PredictionGrid<T>> {
    let law = exact_reverse(data, kernel, xt, s, t)?;
    average_predictions(f, &law, kernel.size(), data.seq_len, s)
}

fn average_predictions<T: Scalar, P: Predictor<T> + ?Sized>(
    f: &P,
    law: &[T],
    base: usize,
    seq_len: usize,
    s: T,
) -> Result<PredictionGrid<T>> {
    let mut rows = vec![vec![T::zero(); base]; seq_len];
    for (idx, &w) in law.iter().enumerate() {
        if w == T::zero() {
            continue;
        }
        let g = f.predict(&decode_state(idx, base, seq_len), s)?;
        for (acc, row) in rows.iter_mut().zip(g.rows()) {
            for (a, &p) in acc.iter_mut().zip(row.probs()) {
                *a += w * p;
            }
        }
    }
    Ok(PredictionGrid::new(
        rows.into_iter().map(CategoricalDistribution::from_probs_unchecked).collect(),
    ))
}

/// Expected consistency loss `E_{x_t}[ sum_i D(E[f(x_s, s)]_i || f(x_t, t)_i) ]`
/// over loss positions, with every expectation an exact sum.
pub fn consistency_residual<T: Scalar, P: Predictor<T> + ?Sized>(
    f: &P,
    data: &DataDistribution,
    kernel: &CorruptionKernel,
    t: T,
    s: T,
    d: Divergence,
) -> Result<T> {
    if !(s < t) {
        return Err(CdlmError::Domain(format!("residual needs s < t, got s={s}, t={t}")));
    }
    let n = kernel.size();
    let marginal = noisy_marginal(data, kernel, t)?;
    let mut total = T::zero();
    for (idx, &pt) in marginal.iter().enumerate() {
        if pt == T::zero() {
            continue;
        }
        let xt = decode_state(idx, n, data.seq_len);
        let online = f.predict(&xt, t)?;
        let target = reverse_expectation(f, data, kernel, &xt, s, t)?;
        let mut local = T::zero();
        for i in loss_positions(kernel, &xt) {
            local += divergence(d, target.row(i), online.row(i))?;
        }
        total += pt * local;
    }
    Ok(total)
}

/// Expected anchor loss `E[(1/t) sum_i -ln f(x_t, t)_i[x_0^i]]` over loss positions.
pub fn expected_anchor_loss<T: Scalar, P: Predictor<T> + ?Sized>(
    f: &P,
    data: &DataDistribution,
    kernel: &CorruptionKernel,
    t: T,
) -> Result<T> {
    let n = kernel.size();
    let w = kernel.schedule().anchor_weight(t)?;
    let mut total = T::zero();
    for (x0, p) in data.support() {
        let mut rows = Vec::with_capacity(x0.len());
        for &v in &x0 {
            rows.push(kernel.marginal(v, t)?.into_probs());
        }
        let mut law = vec![T::zero(); state_count(n, data.seq_len)?];
        expand_product(&rows, n, T::of(p), &mut law);
        for (idx, &q) in law.iter().enumerate() {
            if q == T::zero() {
                continue;
            }
            let xt = decode_state(idx, n, data.seq_len);
            let g = f.predict(&xt, t)?;
            for i in loss_positions(kernel, &xt) {
                let prob = g.row(i).probs()[x0[i]].max(T::of(crate::objective::ANCHOR_PROB_FLOOR));
                total += q * w * -prob.ln();
            }
        }
    }
    Ok(total)
}

/// Discrepancies found by [`verify_bridges`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BridgeReport {
    /// Largest `|sum_k q(k | ...) - 1|`.
    pub normalization: f64,
    /// Largest entrywise gap between the closed masked form and the general bridge.
    pub masked_closed_form: f64,
    /// Largest entrywise gap between a two-leg composition and the direct bridge.
    pub semigroup: f64,
    pub checked: usize,
}

/// Largest entrywise gap `|compose_bridge(t -> s -> u) - bridge(t -> u)|` over
/// every clean `x0`, reachable `xt` and ordered triple `u < s < t` drawn from `times`.
pub fn verify_semigroup<T: Scalar>(kernel: &CorruptionKernel, times: &[T]) -> Result<T> {
    let mut worst = T::zero();
    for_each_triple(times, |u, s, t| {
        for x0 in kernel.vocab().clean_tokens() {
            for xt in 0..kernel.size() {
                let direct = match kernel.bridge(x0, xt, u, t) {
                    Ok(d) => d,
                    Err(CdlmError::ImpossibleTransition { .. }) => continue,
                    Err(e) => return Err(e),
                };
                let two = kernel.compose_bridge(x0, xt, t, s, u)?;
                worst = worst.max(direct.max_abs_diff(&two));
            }
        }
        Ok(())
    })?;
    Ok(worst)
}

fn for_each_triple<T: Scalar>(times: &[T], mut f: impl FnMut(T, T, T) -> Result<()>) -> Result<()> {
    for &t in times {
        for &s in times {
            for &u in times {
                if u < s && s < t {
                    f(u, s, t)?;
                }
            }
        }
    }
    Ok(())
}

/// Normalization, closed-form agreement (masked kernel, linear schedule)
/// and the semigroup identity over `times`.
pub fn verify_bridges<T: Scalar>(kernel: &CorruptionKernel, times: &[T]) -> Result<BridgeReport> {
    let mut norm = T::zero();
    let mut closed = T::zero();
    let mut checked = 0usize;
    let compare_closed =
        kernel.variant() == KernelVariant::Masked && kernel.schedule() == NoiseSchedule::Linear;
    for &t in times {
        for &s in times {
            if !(s < t) {
                continue;
            }
            for x0 in kernel.vocab().clean_tokens() {
                for xt in 0..kernel.size() {
                    let b = match kernel.bridge(x0, xt, s, t) {
                        Ok(d) => d,
                        Err(CdlmError::ImpossibleTransition { .. }) => continue,
                        Err(e) => return Err(e),
                    };
                    checked += 1;
                    let total: T = b.probs().iter().copied().sum();
                    norm = norm.max((total - T::one()).abs());
                    if compare_closed {
                        let m = masked_bridge(kernel.vocab(), x0, xt, s, t)?;
                        closed = closed.max(m.max_abs_diff(&b));
                    }
                }
            }
        }
    }
    let semigroup = verify_semigroup(kernel, times)?;
    Ok(BridgeReport {
        normalization: norm.as_f64(),
        masked_closed_form: closed.as_f64(),
        semigroup: semigroup.as_f64(),
        checked,
    })
}

/// Both sides of `C_{t-2d <- t} f = C_{t-d <- t} C_{t-2d <- t-d} f`, compared
/// exactly at every reachable `x_t`; returns the largest per-position TV gap.
pub fn verify_operator_composition<T: Scalar, P: Predictor<T> + ?Sized>(
    f: &P,
    data: &DataDistribution,
    kernel: &CorruptionKernel,
    t: T,
    delta: T,
) -> Result<T> {
    let two = delta + delta;
    if !(delta > T::zero() && two <= t) {
        return Err(CdlmError::Domain(format!("need 0 < 2*delta <= t, got t={t}, delta={delta}")));
    }
    let n = kernel.size();
    let mid = t - delta;
    let low = t - two;
    let marginal = noisy_marginal(data, kernel, t)?;
    // inner operator C_{t-2d <- t-d} f, tabulated on states reachable at t - d
    let mid_marginal = noisy_marginal(data, kernel, mid)?;
    let mut inner: Vec<Option<PredictionGrid<T>>> = vec![None; mid_marginal.len()];
    for (idx, &p) in mid_marginal.iter().enumerate() {
        if p > T::zero() {
            let xs = decode_state(idx, n, data.seq_len);
            inner[idx] = Some(reverse_expectation(f, data, kernel, &xs, low, mid)?);
        }
    }
    let inner_fn = |xs: &[usize], _s: T| -> Result<PredictionGrid<T>> {
        inner[encode_state(xs, n)]
            .clone()
            .ok_or_else(|| CdlmError::Invariant(format!("reverse chain reached unreachable state {xs:?}")))
    };
    let mut worst = T::zero();
    for (idx, &p) in marginal.iter().enumerate() {
        if p == T::zero() {
            continue;
        }
        let xt = decode_state(idx, n, data.seq_len);
        let direct = reverse_expectation(f, data, kernel, &xt, low, t)?;
        let composed = reverse_expectation(&inner_fn, data, kernel, &xt, mid, t)?;
        worst = worst.max(direct.max_tv(&composed));
    }
    Ok(worst)
}

/// Local and global tracking errors on a time grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResidualReport {
    /// Ascending grid `tau_0 = 0 < ... < tau_K = 1`.
    pub times: Vec<f64>,
    /// `local[k-1]` is the expected TV between `f_k` and `E_{k-1|k}[f_{k-1}]`.
    pub local: Vec<f64>,
    /// `(k, m, error)` for every horizon `k > m`.
    pub global: Vec<(usize, usize, f64)>,
    /// Smallest `(k - m) * max local - global` over all horizons.
    pub min_slack: f64,
}

impl ResidualReport {
    pub fn max_local(&self) -> f64 {
        self.local.iter().copied().fold(0.0, f64::max)
    }

    pub fn holds(&self, tol: f64) -> bool {
        self.min_slack >= -tol
    }
}

/// Exact local errors `eps_k` and global errors `E(k, m)` with TV summed over
/// positions, and the slack of `E(k, m) <= (k - m) max eps`.
pub fn verify_global_bound<T: Scalar, P: Predictor<T> + ?Sized>(
    f: &P,
    data: &DataDistribution,
    kernel: &CorruptionKernel,
    times: &[T],
) -> Result<ResidualReport> {
    if times.len() < 2 || times.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(CdlmError::Domain("time grid must be strictly increasing with at least two points".into()));
    }
    let n = kernel.size();
    let kmax = times.len() - 1;
    let marginals: Vec<Vec<T>> = times
        .iter()
        .map(|&t| noisy_marginal(data, kernel, t))
        .collect::<Result<_>>()?;
    // error(k, m) = E_{x_k}[ TV(f_k, E_{m|k} f_m) ]
    let error = |k: usize, m: usize| -> Result<T> {
        let mut total = T::zero();
        for (idx, &p) in marginals[k].iter().enumerate() {
            if p == T::zero() {
                continue;
            }
            let xk = decode_state(idx, n, data.seq_len);
            let here = f.predict(&xk, times[k])?;
            let there = reverse_expectation(f, data, kernel, &xk, times[m], times[k])?;
            let tv: T = here.rows().iter().zip(there.rows()).map(|(a, b)| a.tv(b)).sum();
            total += p * tv;
        }
        Ok(total)
    };
    let mut local = Vec::with_capacity(kmax);
    for k in 1..=kmax {
        local.push(error(k, k - 1)?.as_f64());
    }
    let max_local = local.iter().copied().fold(0.0, f64::max);
    let mut global = Vec::new();
    let mut min_slack = f64::INFINITY;
    for k in 1..=kmax {
        for m in 0..k {
            let g = if k - m == 1 { local[m] } else { error(k, m)?.as_f64() };
            min_slack = min_slack.min((k - m) as f64 * max_local - g);
            global.push((k, m, g));
        }
    }
    Ok(ResidualReport {
        times: times.iter().map(|t| t.as_f64()).collect(),
        local,
        global,
        min_slack,
    })
}

/// Tabular parameters whose predictions are the exact posterior. Each time
/// bin is filled with the posterior at its midpoint; for the masked kernel
/// the posterior does not depend on `t`, so the table is exact everywhere.
pub fn tabulate_posterior<T: Scalar>(
    data: &DataDistribution,
    kernel: &CorruptionKernel,
    time_bins: usize,
) -> Result<DenoiserParams<T>> {
    let arch = Architecture::Tabular { time_bins };
    let mut params = DenoiserParams::<T>::zeros(arch, *kernel, data.seq_len)?;
    let n = kernel.size();
    let states = state_count(n, data.seq_len)?;
    let floor = T::of(1e-300).ln();
    for bin in 0..time_bins {
        let t = T::of((bin as f64 + 0.5) / time_bins as f64);
        let marginal = noisy_marginal(data, kernel, t)?;
        for idx in 0..states {
            if marginal[idx] == T::zero() {
                continue;
            }
            let xt = decode_state(idx, n, data.seq_len);
            let post = exact_posterior(data, kernel, &xt, t)?;
            let row = params.table_row(&xt, t).expect("tabular");
            let logits = params.table_logits_mut(row).expect("tabular");
            for (i, r) in post.rows().iter().enumerate() {
                for (v, &p) in r.probs().iter().enumerate() {
                    logits[i * n + v] = if p > T::zero() { p.ln().max(floor) } else { floor };
                }
            }
        }
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::Vocabulary;

    const A: usize = 0;
    const B: usize = 1;
    const M: usize = 2;

    fn skewed() -> DataDistribution {
        DataDistribution::new(2, 1, vec![0.75, 0.25]).unwrap()
    }

    fn correlated() -> DataDistribution {
        DataDistribution::new(2, 2, vec![0.5, 0.0, 0.0, 0.5]).unwrap()
    }

    fn grid_times() -> Vec<f64> {
        (0..=10).map(|k| k as f64 / 10.0).collect()
    }

    #[test]
    fn state_codec_round_trips() {
        for idx in 0..27 {
            let s = decode_state(idx, 3, 3);
            assert_eq!(encode_state(&s, 3), idx);
        }
        assert_eq!(decode_state(5, 3, 2), vec![2, 1]);
        assert!(state_count(33, 4).is_err());
        assert_eq!(state_count(32, 4).unwrap(), 1 << 20);
    }

    #[test]
    fn data_distribution_validation() {
        assert!(DataDistribution::new(2, 1, vec![0.5, 0.4]).is_err());
        assert!(DataDistribution::new(2, 2, vec![1.0]).is_err());
        let e = DataDistribution::empirical(2, 2, [&[0usize, 1][..], &[0, 1], &[1, 1], &[0, 0]]).unwrap();
        assert_eq!(e.probs(), &[0.25, 0.0, 0.5, 0.25]);
        assert_eq!(e.marginals(), vec![vec![0.75, 0.25], vec![0.25, 0.75]]);
    }

    #[test]
    fn posterior_examples() {
        let k = CorruptionKernel::masked(2).unwrap();
        let d = skewed();
        for t in [0.1, 0.5, 1.0] {
            let g = exact_posterior(&d, &k, &[M], t).unwrap();
            assert_eq!(g.row(0).probs(), &[0.75, 0.25, 0.0]);
        }
        let g = exact_posterior(&d, &k, &[A], 0.5).unwrap();
        assert_eq!(g.row(0).probs(), &[1.0, 0.0, 0.0]);
        let g = exact_posterior(&correlated(), &k, &[A, M], 0.5).unwrap();
        assert_eq!(g.row(1).probs(), &[1.0, 0.0, 0.0]);
        assert!(exact_posterior(&correlated(), &k, &[A, B], 0.5f64).is_err());
    }

    #[test]
    fn reverse_examples() {
        let k = CorruptionKernel::masked(2).unwrap();
        let d = skewed();
        let r = exact_reverse::<f64>(&d, &k, &[M], 0.4, 0.8).unwrap();
        assert!((r[A] - 0.375).abs() < 1e-15);
        assert!((r[B] - 0.125).abs() < 1e-15);
        assert!((r[M] - 0.5).abs() < 1e-15);

        let dc = correlated();
        let r0 = exact_reverse::<f64>(&dc, &k, &[M, M], 0.0, 0.6).unwrap();
        let joint = joint_posterior::<f64>(&dc, &k, &[M, M], 0.6).unwrap();
        for (idx, p) in joint.iter().enumerate() {
            let seq = decode_state(idx, 2, 2);
            assert!((r0[encode_state(&seq, 3)] - p).abs() < 1e-15);
        }
        let same = exact_reverse(&dc, &k, &[A, M], 0.6, 0.6).unwrap();
        assert_eq!(same[encode_state(&[A, M], 3)], 1.0);
        let near = exact_reverse::<f64>(&dc, &k, &[A, M], 0.6 - 1e-9, 0.6).unwrap();
        assert!((near[encode_state(&[A, M], 3)] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn reverse_is_normalized_and_consistent_with_marginals() {
        let u = CorruptionKernel::uniform(3).unwrap();
        let d = DataDistribution::new(3, 2, vec![0.1, 0.2, 0.05, 0.15, 0.0, 0.1, 0.2, 0.1, 0.1]).unwrap();
        let (s, t) = (0.3, 0.7);
        let pt = noisy_marginal(&d, &u, t).unwrap();
        let ps = noisy_marginal(&d, &u, s).unwrap();
        let mut pushed = vec![0.0; 9];
        for idx in 0..9 {
            let xt = decode_state(idx, 3, 2);
            let r = exact_reverse(&d, &u, &xt, s, t).unwrap();
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (j, p) in r.iter().enumerate() {
                pushed[j] += pt[idx] * p;
            }
        }
        for j in 0..9 {
            assert!((pushed[j] - ps[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn posterior_is_a_fixed_point_for_every_divergence() {
        let dc = DataDistribution::new(2, 2, vec![0.4, 0.1, 0.2, 0.3]).unwrap();
        for k in [CorruptionKernel::masked(2).unwrap(), CorruptionKernel::uniform(2).unwrap()] {
            let f = ExactPosterior { data: &dc, kernel: &k };
            let ts = grid_times();
            for (j, &t) in ts.iter().enumerate().skip(1) {
                for &s in &ts[..j] {
                    for d in [Divergence::ForwardKl, Divergence::ReverseKl, Divergence::Jsd] {
                        let r = consistency_residual(&f, &dc, &k, t, s, d).unwrap();
                        assert!(r.abs() < 1e-10, "{k:?} t={t} s={s} {d:?}: {r}");
                    }
                }
            }
        }
    }

    #[test]
    fn constant_predictor_is_degenerate() {
        let dc = correlated();
        let k = CorruptionKernel::masked(2).unwrap();
        let c = ConstantPredictor {
            row: CategoricalDistribution::new(vec![0.5, 0.5, 0.0]).unwrap(),
            seq_len: 2,
        };
        assert_eq!(consistency_residual(&c, &dc, &k, 0.7, 0.3, Divergence::Jsd).unwrap(), 0.0);
        assert!(expected_anchor_loss(&c, &dc, &k, 0.5).unwrap() > 0.1);
        let f = ExactPosterior { data: &dc, kernel: &k };
        assert!(expected_anchor_loss(&f, &dc, &k, 0.5).unwrap() < expected_anchor_loss(&c, &dc, &k, 0.5).unwrap());
    }

    #[test]
    fn mismatched_predictor_has_positive_residual() {
        let d = skewed();
        let k = CorruptionKernel::masked(2).unwrap();
        let (t, s) = (0.8, 0.4);
        let f = |xt: &[usize], time: f64| -> Result<PredictionGrid<f64>> {
            if time == t {
                exact_posterior(&d, &k, xt, time)
            } else if xt[0] == M {
                Ok(PredictionGrid::new(vec![CategoricalDistribution::new(vec![0.5, 0.5, 0.0])?]))
            } else {
                Ok(PredictionGrid::one_hot(xt, 3))
            }
        };
        // at x_t = MASK: target = 0.5 * (0.75, 0.25) + 0.5 * (0.5, 0.5) = (0.625, 0.375)
        let r = consistency_residual(&f, &d, &k, t, s, Divergence::ForwardKl).unwrap();
        // only x_t = MASK has a loss position, reached with probability t
        let expect = t * (0.625f64 * (0.625f64 / 0.75).ln() + 0.375 * (0.375f64 / 0.25).ln());
        assert!((r - expect).abs() < 1e-12, "{r} vs {expect}");
        assert!(r > 0.0);
    }

    #[test]
    fn semigroup_on_grids() {
        let times = grid_times();
        let m = CorruptionKernel::masked(2).unwrap();
        assert!(verify_semigroup(&m, &times).unwrap() < 1e-12);
        let u = CorruptionKernel::uniform(4).unwrap();
        assert!(verify_semigroup(&u, &times).unwrap() < 1e-10);
        // u = 0 edges: both sides are the point mass at x0
        let zero_edges = verify_semigroup(&u, &[0.0, 0.5, 0.9]).unwrap();
        assert_eq!(zero_edges, 0.0);
        let rep = verify_bridges(&m, &times).unwrap();
        assert!(rep.normalization < 1e-12 && rep.masked_closed_form < 1e-15 && rep.semigroup < 1e-12);
        assert!(rep.checked > 0);
    }

    #[test]
    fn operator_composition_holds_for_arbitrary_predictors() {
        let dc = DataDistribution::new(2, 2, vec![0.4, 0.1, 0.2, 0.3]).unwrap();
        let k = CorruptionKernel::masked(2).unwrap();
        let weird = |xt: &[usize], t: f64| -> Result<PredictionGrid<f64>> {
            let rows = xt
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    let a = 0.5 + 0.4 * ((v * 3 + i) as f64 + 7.0 * t).sin();
                    CategoricalDistribution::new(vec![a, 1.0 - a, 0.0])
                })
                .collect::<Result<_>>()?;
            Ok(PredictionGrid::new(rows))
        };
        assert!(verify_operator_composition(&weird, &dc, &k, 0.9, 0.3).unwrap() < 1e-10);
        let c = ConstantPredictor {
            row: CategoricalDistribution::new(vec![0.3, 0.7, 0.0]).unwrap(),
            seq_len: 2,
        };
        assert!(verify_operator_composition(&c, &dc, &k, 0.9, 0.3).unwrap() < 1e-15);
    }

    #[test]
    fn global_bound_cases() {
        let dc = DataDistribution::new(2, 2, vec![0.4, 0.1, 0.2, 0.3]).unwrap();
        let k = CorruptionKernel::masked(2).unwrap();
        let times = [0.0, 0.25, 0.5, 0.75, 1.0];
        let f = ExactPosterior { data: &dc, kernel: &k };
        let rep = verify_global_bound(&f, &dc, &k, &times).unwrap();
        assert!(rep.max_local() < 1e-12);
        assert!(rep.global.iter().all(|g| g.2 < 1e-12));

        let eps = 0.05;
        let noisy = |xt: &[usize], t: f64| -> Result<PredictionGrid<f64>> {
            let g: PredictionGrid<f64> = exact_posterior(&dc, &k, xt, t)?;
            Ok(PredictionGrid::new(
                g.rows()
                    .iter()
                    .map(|r| {
                        let p = r.probs();
                        CategoricalDistribution::new(vec![
                            (1.0 - eps) * p[0] + eps / 2.0,
                            (1.0 - eps) * p[1] + eps / 2.0,
                            0.0,
                        ])
                    })
                    .collect::<Result<_>>()?,
            ))
        };
        let rep = verify_global_bound(&noisy, &dc, &k, &times).unwrap();
        assert!(rep.holds(1e-10), "{rep:?}");
        assert!(rep.max_local() > 0.0);

        let single = verify_global_bound(&noisy, &dc, &k, &[0.0, 1.0]).unwrap();
        assert_eq!(single.global, vec![(1, 0, single.local[0])]);
    }

    #[test]
    fn tabulated_posterior_matches_oracle() {
        let d = DataDistribution::new(3, 2, vec![0.3, 0.05, 0.1, 0.0, 0.2, 0.05, 0.1, 0.1, 0.1]).unwrap();
        let k = CorruptionKernel::masked(3).unwrap();
        let table = tabulate_posterior::<f64>(&d, &k, 8).unwrap();
        for idx in 0..16 {
            let xt = decode_state(idx, 4, 2);
            for t in [0.05, 0.33, 0.5, 0.99, 1.0] {
                let Ok(exact) = exact_posterior::<f64>(&d, &k, &xt, t) else {
                    continue;
                };
                let got = table.predict(&xt, t).unwrap();
                assert!(got.max_tv(&exact) < 1e-10, "{xt:?} {t}");
            }
        }
    }

    #[test]
    fn vocabulary_mismatch_is_rejected() {
        let k = CorruptionKernel::new(
            KernelVariant::Masked,
            Vocabulary::masked(3).unwrap(),
            NoiseSchedule::Linear,
        )
        .unwrap();
        assert!(exact_posterior::<f64>(&skewed(), &k, &[3], 0.5).is_err());
    }
}
