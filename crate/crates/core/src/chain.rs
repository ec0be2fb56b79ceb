//! Forward corruption process.
//!
//! Two continuous-time kernels are supported: absorbing ("masked") diffusion
//! and interpolation towards the uniform distribution. Both are defined
//! directly through the survival probability `alpha(t)` of the noise
//! schedule, so the cumulative matrix from time 0 to `t` and the relative
//! kernel between any `s < t` have closed forms:
//!
//! * masked:  `C_t = alpha_t I + (1 - alpha_t) 1 e_mask^T`
//! * uniform: `C_t = alpha_t I + (1 - alpha_t) 1 1^T / N`
//!
//! and in both cases `C_s R = C_t` holds for the relative kernel of the same
//! form with rate `alpha_t / alpha_s`.
//!
//! The single-token posterior bridge between `s` and `t` given clean token
//! `x0` and noisy token `xt` is
//!
//! ```text
//! q(x_s = k | x_t, x_0) = C_s[x0, k] * R_{s->t}[k, xt] / C_t[x0, xt]
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CdlmError, Result};
use crate::scalar::Scalar;

/// Token alphabet. Indices `0..size`; the mask token, when present, never
/// appears in clean data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    size: usize,
    mask_index: Option<usize>,
}

impl Vocabulary {
    /// Vocabulary of `clean` data tokens plus a mask token at index `clean`.
    pub fn masked(clean: usize) -> Result<Self> {
        Self::new(clean + 1, Some(clean))
    }

    /// Vocabulary without a mask token.
    pub fn plain(size: usize) -> Result<Self> {
        Self::new(size, None)
    }

    pub fn new(size: usize, mask_index: Option<usize>) -> Result<Self> {
        if size < 2 {
            return Err(CdlmError::Domain(format!(
                "vocabulary size must be at least 2, got {size}"
            )));
        }
        if let Some(m) = mask_index {
            if m >= size {
                return Err(CdlmError::Domain(format!(
                    "mask index {m} outside vocabulary of size {size}"
                )));
            }
            if size < 3 {
                return Err(CdlmError::Domain(
                    "a masked vocabulary needs at least two clean tokens".into(),
                ));
            }
        }
        Ok(Self { size, mask_index })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn mask_index(&self) -> Option<usize> {
        self.mask_index
    }

    pub fn is_mask(&self, token: usize) -> bool {
        self.mask_index == Some(token)
    }

    /// Number of tokens that may appear in clean data.
    pub fn clean_size(&self) -> usize {
        self.size - usize::from(self.mask_index.is_some())
    }

    /// Clean tokens in increasing index order.
    pub fn clean_tokens(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.size).filter(move |&v| !self.is_mask(v))
    }

    pub fn check_token(&self, token: usize) -> Result<()> {
        if token >= self.size {
            return Err(CdlmError::TokenOutOfRange {
                token,
                size: self.size,
            });
        }
        Ok(())
    }

    pub fn check_clean(&self, token: usize) -> Result<()> {
        self.check_token(token)?;
        if self.is_mask(token) {
            return Err(CdlmError::InvalidCleanToken { token });
        }
        Ok(())
    }
}

/// Survival probability `alpha(t)` of a clean token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseSchedule {
    /// `alpha(t) = 1 - t`.
    #[default]
    Linear,
    /// `alpha(t) = cos(pi t / 2)`.
    Cosine,
}

impl NoiseSchedule {
    pub fn alpha<T: Scalar>(&self, t: T) -> T {
        if t >= T::one() {
            return T::zero();
        }
        if t <= T::zero() {
            return T::one();
        }
        match self {
            NoiseSchedule::Linear => T::one() - t,
            NoiseSchedule::Cosine => (T::FRAC_PI_2() * t).cos(),
        }
    }

    pub fn alpha_prime<T: Scalar>(&self, t: T) -> T {
        match self {
            NoiseSchedule::Linear => -T::one(),
            NoiseSchedule::Cosine => -T::FRAC_PI_2() * (T::FRAC_PI_2() * t).sin(),
        }
    }

    /// Continuous-time cross-entropy weight `-alpha'(t) / (1 - alpha(t))`.
    /// Equals `1/t` for the linear schedule.
    pub fn anchor_weight<T: Scalar>(&self, t: T) -> Result<T> {
        if !(t > T::zero()) {
            return Err(CdlmError::Domain(format!("anchor weight needs t > 0, got {t}")));
        }
        Ok(match self {
            NoiseSchedule::Linear => T::one() / t,
            NoiseSchedule::Cosine => -self.alpha_prime(t) / (T::one() - self.alpha(t)),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelVariant {
    Masked,
    Uniform,
}

/// A forward corruption process: variant, vocabulary and noise schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionKernel {
    variant: KernelVariant,
    vocab: Vocabulary,
    schedule: NoiseSchedule,
}

impl CorruptionKernel {
    pub fn new(variant: KernelVariant, vocab: Vocabulary, schedule: NoiseSchedule) -> Result<Self> {
        match (variant, vocab.mask_index()) {
            (KernelVariant::Masked, None) => Err(CdlmError::Domain(
                "masked kernel requires a vocabulary with a mask token".into(),
            )),
            (KernelVariant::Uniform, Some(_)) => Err(CdlmError::Domain(
                "uniform kernel forbids a mask token".into(),
            )),
            _ => Ok(Self {
                variant,
                vocab,
                schedule,
            }),
        }
    }

    /// Masked kernel over `clean` data tokens with the linear schedule.
    pub fn masked(clean: usize) -> Result<Self> {
        Self::new(
            KernelVariant::Masked,
            Vocabulary::masked(clean)?,
            NoiseSchedule::Linear,
        )
    }

    /// Uniform kernel over `size` tokens with the linear schedule.
    pub fn uniform(size: usize) -> Result<Self> {
        Self::new(
            KernelVariant::Uniform,
            Vocabulary::plain(size)?,
            NoiseSchedule::Linear,
        )
    }

    pub fn with_schedule(mut self, schedule: NoiseSchedule) -> Self {
        self.schedule = schedule;
        self
    }

    pub fn variant(&self) -> KernelVariant {
        self.variant
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn schedule(&self) -> NoiseSchedule {
        self.schedule
    }

    pub fn size(&self) -> usize {
        self.vocab.size()
    }

    fn check_time<T: Scalar>(t: T) -> Result<()> {
        if !(t >= T::zero() && t <= T::one()) {
            return Err(CdlmError::Domain(format!("time {t} outside [0, 1]")));
        }
        Ok(())
    }

    fn check_times<T: Scalar>(s: T, t: T) -> Result<()> {
        Self::check_time(s)?;
        Self::check_time(t)?;
        if !(s < t) {
            return Err(CdlmError::Domain(format!("bridge needs s < t, got s={s}, t={t}")));
        }
        Ok(())
    }

    /// Entry `[from, to]` of the interpolation kernel with survival `rate`.
    fn interp_entry<T: Scalar>(&self, rate: T, from: usize, to: usize) -> T {
        let stay = if from == to { rate } else { T::zero() };
        match self.variant {
            KernelVariant::Masked => {
                let mask = self.vocab.mask_index().expect("masked kernel has a mask");
                if from == mask {
                    if to == mask {
                        T::one()
                    } else {
                        T::zero()
                    }
                } else if to == mask {
                    T::one() - rate
                } else {
                    stay
                }
            }
            KernelVariant::Uniform => stay + (T::one() - rate) / T::of_usize(self.size()),
        }
    }

    /// `C_t[from, to]` without range checks on `t`.
    fn cumulative_entry<T: Scalar>(&self, t: T, from: usize, to: usize) -> T {
        self.interp_entry(self.schedule.alpha(t), from, to)
    }

    /// `R_{s->t}[from, to]`, the unique kernel with `C_s R = C_t`.
    fn relative_entry<T: Scalar>(&self, s: T, t: T, from: usize, to: usize) -> T {
        let a_s = self.schedule.alpha(s);
        let a_t = self.schedule.alpha(t);
        let rate = if a_s > T::zero() { a_t / a_s } else { T::zero() };
        self.interp_entry(rate, from, to)
    }

    /// Cumulative transition matrix from time 0 to `t`.
    pub fn cumulative_matrix<T: Scalar>(&self, t: T) -> Result<TransitionMatrix<T>> {
        Self::check_time(t)?;
        let n = self.size();
        let mut entries = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                entries.push(self.cumulative_entry(t, i, j));
            }
        }
        Ok(TransitionMatrix { n, entries })
    }

    /// Relative kernel carrying the state at time `s` to time `t`.
    pub fn relative_matrix<T: Scalar>(&self, s: T, t: T) -> Result<TransitionMatrix<T>> {
        Self::check_time(s)?;
        Self::check_time(t)?;
        if !(s <= t) {
            return Err(CdlmError::Domain(format!("relative kernel needs s <= t, got s={s}, t={t}")));
        }
        let n = self.size();
        let mut entries = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                entries.push(self.relative_entry(s, t, i, j));
            }
        }
        Ok(TransitionMatrix { n, entries })
    }

    /// `q(x_t | x_0)`, row `x0` of the cumulative matrix.
    pub fn marginal<T: Scalar>(&self, x0: usize, t: T) -> Result<CategoricalDistribution<T>> {
        self.vocab.check_clean(x0)?;
        Self::check_time(t)?;
        let probs = (0..self.size())
            .map(|j| self.cumulative_entry(t, x0, j))
            .collect();
        Ok(CategoricalDistribution::from_probs_unchecked(probs))
    }

    /// Corrupts every position independently from its marginal at time `t`.
    pub fn corrupt<T: Scalar, R: Rng + ?Sized>(
        &self,
        x0: &[usize],
        t: T,
        rng: &mut R,
    ) -> Result<TokenSequence> {
        Self::check_time(t)?;
        let mut out = Vec::with_capacity(x0.len());
        for &v in x0 {
            out.push(self.marginal(v, t)?.sample(rng));
        }
        Ok(TokenSequence(out))
    }

    /// Posterior bridge `q(x_s | x_t, x_0)` for a single token.
    pub fn bridge<T: Scalar>(
        &self,
        x0: usize,
        xt: usize,
        s: T,
        t: T,
    ) -> Result<CategoricalDistribution<T>> {
        self.vocab.check_clean(x0)?;
        self.vocab.check_token(xt)?;
        Self::check_times(s, t)?;
        let evidence = self.cumulative_entry(t, x0, xt);
        if !(evidence > T::zero()) {
            return Err(CdlmError::ImpossibleTransition {
                position: None,
                x0,
                xt,
                s: s.as_f64(),
                t: t.as_f64(),
            });
        }
        let probs = (0..self.size())
            .map(|k| self.cumulative_entry(s, x0, k) * self.relative_entry(s, t, k, xt) / evidence)
            .collect();
        Ok(CategoricalDistribution::from_probs_unchecked(probs))
    }

    /// Draws `x_s` position by position from the bridge.
    pub fn sample_bridge<T: Scalar, R: Rng + ?Sized>(
        &self,
        x0: &[usize],
        xt: &[usize],
        s: T,
        t: T,
        rng: &mut R,
    ) -> Result<TokenSequence> {
        if x0.len() != xt.len() {
            return Err(CdlmError::Shape(format!(
                "x0 has length {} but xt has length {}",
                x0.len(),
                xt.len()
            )));
        }
        let mut out = Vec::with_capacity(x0.len());
        for (i, (&a, &b)) in x0.iter().zip(xt).enumerate() {
            let dist = self.bridge(a, b, s, t).map_err(|e| match e {
                CdlmError::ImpossibleTransition { x0, xt, s, t, .. } => {
                    CdlmError::ImpossibleTransition {
                        position: Some(i),
                        x0,
                        xt,
                        s,
                        t,
                    }
                }
                other => other,
            })?;
            out.push(dist.sample(rng));
        }
        Ok(TokenSequence(out))
    }

    /// Two-leg bridge `t -> s -> u` with the intermediate state summed out.
    /// Equal to `bridge(x0, xt, u, t)` by the semigroup property.
    pub fn compose_bridge<T: Scalar>(
        &self,
        x0: usize,
        xt: usize,
        t: T,
        s: T,
        u: T,
    ) -> Result<CategoricalDistribution<T>> {
        if !(u < s && s < t) {
            return Err(CdlmError::Domain(format!(
                "composition needs u < s < t, got u={u}, s={s}, t={t}"
            )));
        }
        let outer = self.bridge(x0, xt, s, t)?;
        let mut probs = vec![T::zero(); self.size()];
        let mut mass = T::zero();
        for (mid, &w) in outer.probs().iter().enumerate() {
            if w == T::zero() {
                continue;
            }
            mass += w;
            let inner = self.bridge(x0, mid, u, s)?;
            for (acc, &p) in probs.iter_mut().zip(inner.probs()) {
                *acc += w * p;
            }
        }
        // divide out the rounding in the outer weights so point masses stay exact
        for p in probs.iter_mut() {
            *p /= mass;
        }
        Ok(CategoricalDistribution::from_probs_unchecked(probs))
    }
}

/// Closed-form bridge of the masked kernel under `alpha(t) = 1 - t`.
pub fn masked_bridge<T: Scalar>(
    vocab: &Vocabulary,
    x0: usize,
    xt: usize,
    s: T,
    t: T,
) -> Result<CategoricalDistribution<T>> {
    let mask = vocab
        .mask_index()
        .ok_or_else(|| CdlmError::Domain("masked bridge needs a mask token".into()))?;
    vocab.check_clean(x0)?;
    vocab.check_token(xt)?;
    CorruptionKernel::check_times(s, t)?;
    let mut probs = vec![T::zero(); vocab.size()];
    if xt == mask {
        probs[x0] = (t - s) / t;
        probs[mask] = s / t;
    } else if xt == x0 {
        probs[xt] = T::one();
    } else {
        return Err(CdlmError::ImpossibleTransition {
            position: None,
            x0,
            xt,
            s: s.as_f64(),
            t: t.as_f64(),
        });
    }
    Ok(CategoricalDistribution::from_probs_unchecked(probs))
}

/// Probability vector over a vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalDistribution<T> {
    probs: Vec<T>,
}

impl<T: Scalar> CategoricalDistribution<T> {
    /// Validates nonnegativity and normalization (within [`Scalar::NORM_TOL`]).
    pub fn new(probs: Vec<T>) -> Result<Self> {
        if probs.is_empty() {
            return Err(CdlmError::InvalidDistribution("empty probability vector".into()));
        }
        if let Some(p) = probs.iter().find(|p| !(**p >= T::zero()) || !p.is_finite()) {
            return Err(CdlmError::InvalidDistribution(format!("entry {p} is not a probability")));
        }
        let total: T = probs.iter().copied().sum();
        if (total.as_f64() - 1.0).abs() > T::NORM_TOL {
            return Err(CdlmError::InvalidDistribution(format!("entries sum to {total}")));
        }
        Ok(Self { probs })
    }

    pub(crate) fn from_probs_unchecked(probs: Vec<T>) -> Self {
        Self { probs }
    }

    pub fn one_hot(size: usize, index: usize) -> Self {
        let mut probs = vec![T::zero(); size];
        probs[index] = T::one();
        Self { probs }
    }

    pub fn uniform(size: usize) -> Self {
        Self {
            probs: vec![T::one() / T::of_usize(size); size],
        }
    }

    pub fn probs(&self) -> &[T] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn into_probs(self) -> Vec<T> {
        self.probs
    }

    pub fn is_normalized(&self) -> bool {
        let total: T = self.probs.iter().copied().sum();
        self.probs.iter().all(|p| *p >= T::zero()) && (total.as_f64() - 1.0).abs() <= T::NORM_TOL
    }

    /// Inverse-CDF draw consuming exactly one uniform variate.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u = T::of(rng.random::<f64>());
        let mut acc = T::zero();
        let mut last = 0;
        for (k, &p) in self.probs.iter().enumerate() {
            if p > T::zero() {
                acc += p;
                last = k;
                if u < acc {
                    return k;
                }
            }
        }
        last
    }

    /// Index of the largest probability; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (k, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = k;
            }
        }
        best
    }

    /// Total variation distance, half the L1 distance.
    pub fn tv(&self, other: &Self) -> T {
        let l1: T = self
            .probs
            .iter()
            .zip(&other.probs)
            .map(|(a, b)| (*a - *b).abs())
            .sum();
        l1 / T::of(2.0)
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.probs
            .iter()
            .zip(&other.probs)
            .fold(T::zero(), |m, (a, b)| m.max((*a - *b).abs()))
    }

    pub fn entropy(&self) -> T {
        -self
            .probs
            .iter()
            .filter(|p| **p > T::zero())
            .map(|&p| p * p.ln())
            .sum::<T>()
    }
}

/// A sequence of token indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSequence(pub Vec<usize>);

impl TokenSequence {
    pub fn new(tokens: Vec<usize>, vocab: &Vocabulary) -> Result<Self> {
        if tokens.is_empty() {
            return Err(CdlmError::Domain("token sequences must be non-empty".into()));
        }
        for &t in &tokens {
            vocab.check_token(t)?;
        }
        Ok(Self(tokens))
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl std::ops::Deref for TokenSequence {
    type Target = [usize];

    fn deref(&self) -> &[usize] {
        &self.0
    }
}

impl From<Vec<usize>> for TokenSequence {
    fn from(v: Vec<usize>) -> Self {
        Self(v)
    }
}

/// Dense row-stochastic matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix<T> {
    n: usize,
    entries: Vec<T>,
}

impl<T: Scalar> TransitionMatrix<T> {
    pub fn from_rows(rows: Vec<Vec<T>>) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(CdlmError::Shape("transition matrix must be square".into()));
        }
        let m = Self {
            n,
            entries: rows.into_iter().flatten().collect(),
        };
        if !m.is_row_stochastic() {
            return Err(CdlmError::InvalidDistribution(
                "transition matrix rows must be probability vectors".into(),
            ));
        }
        Ok(m)
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.entries[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.entries[i * self.n..(i + 1) * self.n]
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.n != other.n {
            return Err(CdlmError::Shape(format!(
                "cannot multiply {0}x{0} by {1}x{1}",
                self.n, other.n
            )));
        }
        let n = self.n;
        let mut entries = vec![T::zero(); n * n];
        for i in 0..n {
            for k in 0..n {
                let a = self.get(i, k);
                if a == T::zero() {
                    continue;
                }
                for j in 0..n {
                    entries[i * n + j] += a * other.get(k, j);
                }
            }
        }
        Ok(Self { n, entries })
    }

    pub fn is_row_stochastic(&self) -> bool {
        (0..self.n).all(|i| {
            let row = self.row(i);
            let total: T = row.iter().copied().sum();
            row.iter().all(|p| *p >= T::zero()) && (total.as_f64() - 1.0).abs() <= T::NORM_TOL
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn masked3() -> CorruptionKernel {
        CorruptionKernel::masked(3).unwrap()
    }

    #[test]
    fn vocabulary_validation() {
        assert!(Vocabulary::plain(1).is_err());
        assert!(Vocabulary::new(4, Some(4)).is_err());
        assert!(Vocabulary::masked(1).is_err());
        let v = Vocabulary::masked(3).unwrap();
        assert_eq!(v.size(), 4);
        assert_eq!(v.clean_tokens().collect::<Vec<_>>(), vec![0, 1, 2]);
        assert!(v.check_clean(3).is_err());
    }

    #[test]
    fn kernel_variant_requires_matching_vocab() {
        let masked_vocab = Vocabulary::masked(2).unwrap();
        let plain = Vocabulary::plain(3).unwrap();
        assert!(CorruptionKernel::new(KernelVariant::Uniform, masked_vocab, NoiseSchedule::Linear).is_err());
        assert!(CorruptionKernel::new(KernelVariant::Masked, plain, NoiseSchedule::Linear).is_err());
    }

    #[test]
    fn schedule_endpoints() {
        for sched in [NoiseSchedule::Linear, NoiseSchedule::Cosine] {
            assert_eq!(sched.alpha(0.0f64), 1.0);
            assert_eq!(sched.alpha(1.0f64), 0.0);
            assert!(sched.alpha_prime(0.5f64) < 0.0);
        }
        assert_eq!(NoiseSchedule::Linear.anchor_weight(0.25f64).unwrap(), 4.0);
        assert!(NoiseSchedule::Linear.anchor_weight(0.0f64).is_err());
    }

    #[test]
    fn cumulative_masked_rows() {
        let k = masked3();
        let c0 = k.cumulative_matrix(0.0f64).unwrap();
        for v in 0..4 {
            for j in 0..4 {
                assert_eq!(c0.get(v, j), if v == j { 1.0 } else { 0.0 });
            }
        }
        let c = k.cumulative_matrix(0.25f64).unwrap();
        assert_eq!(c.row(0), &[0.75, 0.0, 0.0, 0.25]);
        assert!(c.is_row_stochastic());
        assert!(k.cumulative_matrix(1.5f64).is_err());
        assert!(k.cumulative_matrix(-0.1f64).is_err());
    }

    #[test]
    fn cumulative_uniform_matches_half_interval_product() {
        let k = CorruptionKernel::uniform(2).unwrap();
        let c = k.cumulative_matrix(0.5f64).unwrap();
        assert!((c.get(0, 0) - 0.75).abs() < 1e-15);
        assert!((c.get(0, 1) - 0.25).abs() < 1e-15);
        // independent route: two explicit half-interval kernels multiplied
        let first = TransitionMatrix::<f64>::from_rows(vec![vec![0.875, 0.125], vec![0.125, 0.875]]).unwrap();
        let a: f64 = 0.5 / 0.75;
        let second =
            TransitionMatrix::from_rows(vec![vec![a + (1.0 - a) / 2.0, (1.0 - a) / 2.0], vec![(1.0 - a) / 2.0, a + (1.0 - a) / 2.0]])
                .unwrap();
        let prod = first.matmul(&second).unwrap();
        assert!((prod.get(0, 0) - 0.75).abs() < 1e-15);
        assert!((prod.get(0, 1) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn relative_kernel_composes_to_cumulative() {
        for kernel in [masked3(), CorruptionKernel::uniform(4).unwrap()] {
            for sched in [NoiseSchedule::Linear, NoiseSchedule::Cosine] {
                let kernel = kernel.with_schedule(sched);
                let cs = kernel.cumulative_matrix(0.3f64).unwrap();
                let r = kernel.relative_matrix(0.3f64, 0.8).unwrap();
                let ct = kernel.cumulative_matrix(0.8f64).unwrap();
                let prod = cs.matmul(&r).unwrap();
                assert!(r.is_row_stochastic());
                for i in 0..kernel.size() {
                    for j in 0..kernel.size() {
                        assert!((prod.get(i, j) - ct.get(i, j)).abs() < 1e-14);
                    }
                }
            }
        }
    }

    #[test]
    fn marginal_examples() {
        let k = masked3();
        let m = k.marginal(0, 1.0f64).unwrap();
        assert_eq!(m.probs(), &[0.0, 0.0, 0.0, 1.0]);
        let m = k.marginal(0, 0.4f64).unwrap();
        assert!((m.probs()[0] - 0.6).abs() < 1e-15);
        assert!((m.probs()[3] - 0.4).abs() < 1e-15);
        let u = CorruptionKernel::uniform(3).unwrap();
        let m = u.marginal(0, 1.0f64).unwrap();
        for p in m.probs() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!(matches!(k.marginal(3, 0.5f64), Err(CdlmError::InvalidCleanToken { token: 3 })));
    }

    #[test]
    fn corrupt_edge_times() {
        let k = masked3();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = vec![0, 1, 2, 1];
        assert_eq!(k.corrupt(&x0, 0.0f64, &mut rng).unwrap().0, x0);
        assert_eq!(k.corrupt(&x0, 1.0f64, &mut rng).unwrap().0, vec![3; 4]);
        let u = CorruptionKernel::uniform(3).unwrap();
        assert_eq!(u.corrupt(&[0, 1, 2], 0.0f64, &mut rng).unwrap().0, vec![0, 1, 2]);
    }

    #[test]
    fn corrupt_mask_fraction_concentrates() {
        let k = masked3();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x0 = vec![1usize; 10_000];
        let xt = k.corrupt(&x0, 0.5f64, &mut rng).unwrap();
        let frac = xt.iter().filter(|&&v| v == 3).count() as f64 / 1e4;
        assert!((frac - 0.5).abs() < 0.02, "masked fraction {frac}");
    }

    #[test]
    fn bridge_examples() {
        let k = masked3();
        let b = k.bridge(0, 3, 0.4f64, 0.8).unwrap();
        assert!((b.probs()[0] - 0.5).abs() < 1e-15);
        assert!((b.probs()[3] - 0.5).abs() < 1e-15);
        let b = k.bridge(1, 3, 0.0f64, 0.7).unwrap();
        assert_eq!(b.argmax(), 1);
        assert!((b.probs()[1] - 1.0).abs() < 1e-15);
        let b = k.bridge(2, 2, 0.3f64, 0.6).unwrap();
        assert!((b.probs()[2] - 1.0).abs() < 1e-15);
        let u = CorruptionKernel::uniform(3).unwrap();
        let b = u.bridge(1, 2, 0.0f64, 0.6).unwrap();
        assert!((b.probs()[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn bridge_errors() {
        let k = masked3();
        assert!(matches!(
            k.bridge(0, 1, 0.2f64, 0.5),
            Err(CdlmError::ImpossibleTransition { position: None, .. })
        ));
        assert!(matches!(k.bridge(0, 3, 0.5f64, 0.5), Err(CdlmError::Domain(_))));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = k.sample_bridge(&[0, 1], &[0, 2], 0.2f64, 0.5, &mut rng).unwrap_err();
        assert!(matches!(err, CdlmError::ImpossibleTransition { position: Some(1), .. }));
    }

    #[test]
    fn masked_bridge_cases() {
        let v = Vocabulary::masked(3).unwrap();
        let b = masked_bridge(&v, 0, 3, 0.3f64, 0.6).unwrap();
        assert!((b.probs()[0] - 0.5).abs() < 1e-15);
        assert!((b.probs()[3] - 0.5).abs() < 1e-15);
        let b = masked_bridge(&v, 0, 0, 0.3f64, 0.6).unwrap();
        assert_eq!(b.probs(), &[1.0, 0.0, 0.0, 0.0]);
        let b = masked_bridge(&v, 0, 3, 0.6 - 1e-9, 0.6f64).unwrap();
        assert!(b.probs()[0] < 1e-8);
        assert!(masked_bridge(&v, 0, 1, 0.3f64, 0.6).is_err());
    }

    #[test]
    fn sample_bridge_edges() {
        let k = masked3();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = vec![0, 1, 2];
        let xt = vec![3, 1, 3];
        assert_eq!(k.sample_bridge(&x0, &xt, 0.0f64, 0.9, &mut rng).unwrap().0, x0);
        assert_eq!(k.sample_bridge(&x0, &x0, 0.2f64, 0.9, &mut rng).unwrap().0, x0);
    }

    #[test]
    fn sample_bridge_reveal_fraction() {
        let k = masked3();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = vec![2usize; 10_000];
        let xt = vec![3usize; 10_000];
        let xs = k.sample_bridge(&x0, &xt, 0.5f64, 1.0, &mut rng).unwrap();
        let frac = xs.iter().filter(|&&v| v == 2).count() as f64 / 1e4;
        assert!((frac - 0.5).abs() < 0.02, "revealed fraction {frac}");
    }

    #[test]
    fn compose_bridge_examples() {
        let k = masked3();
        let c = k.compose_bridge(1, 3, 0.9f64, 0.6, 0.3).unwrap();
        let d = k.bridge(1, 3, 0.3f64, 0.9).unwrap();
        assert!(c.max_abs_diff(&d) < 1e-12);
        let c = k.compose_bridge(1, 3, 0.9f64, 0.6, 0.0).unwrap();
        assert_eq!(c.argmax(), 1);
        assert!((c.probs()[1] - 1.0).abs() < 1e-15);
        assert!(k.compose_bridge(1, 3, 0.9f64, 0.3, 0.6).is_err());
    }

    #[test]
    fn categorical_helpers() {
        assert!(CategoricalDistribution::new(vec![0.5f64, 0.6]).is_err());
        assert!(CategoricalDistribution::new(vec![-0.1f64, 1.1]).is_err());
        let d = CategoricalDistribution::new(vec![0.25f64, 0.5, 0.25]).unwrap();
        assert_eq!(d.argmax(), 1);
        let tie = CategoricalDistribution::new(vec![0.5f64, 0.5]).unwrap();
        assert_eq!(tie.argmax(), 0);
        let e = CategoricalDistribution::<f64>::uniform(4).entropy();
        assert!((e - 4f64.ln()).abs() < 1e-15);
        let a = CategoricalDistribution::<f64>::one_hot(2, 0);
        let b = CategoricalDistribution::<f64>::one_hot(2, 1);
        assert_eq!(a.tv(&b), 1.0);
    }

    #[test]
    fn f32_kernel_works() {
        let k = masked3();
        let b = k.bridge(0, 3, 0.4f32, 0.8).unwrap();
        assert!((b.probs()[0] - 0.5).abs() < 1e-6);
    }
}
