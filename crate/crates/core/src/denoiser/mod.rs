//! Time-conditional clean-token predictor `f(x_t, t)` in two
//! parameterizations (an exact lookup table and a small MLP), plus the EMA
//! target copy used on the stop-gradient side of the consistency loss.
//!
//! Parameters are stored as one flat vector regardless of architecture so
//! that optimizers, EMA and checkpoints treat both variants identically.
//!
//! Output rows obey the carry-over rule for the masked kernel: positions
//! whose input token is not the mask are copied through as one-hot rows, and
//! the mask token always receives probability zero. At `t = 0` every row is
//! the one-hot of its input token.

mod checkpoint;
mod mlp;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::chain::{CategoricalDistribution, CorruptionKernel, KernelVariant};
use crate::error::{CdlmError, Result};
use crate::scalar::Scalar;

pub use checkpoint::{Checkpoint, ParamShape, CHECKPOINT_FORMAT};
pub use mlp::MlpCache;

/// Largest tabular state space (number of noisy sequences) accepted.
pub const TABULAR_STATE_CAP: usize = 1 << 20;

/// Denoiser architecture. Serialized with a `variant` tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case", deny_unknown_fields)]
pub enum Architecture {
    /// One logit table per (noisy sequence, time bin).
    Tabular {
        #[serde(default = "default_time_bins")]
        time_bins: usize,
    },
    /// Token embeddings + sinusoidal time features, two SiLU hidden layers,
    /// one linear head producing logits for every position.
    Mlp {
        #[serde(default = "default_embed_dim")]
        embed_dim: usize,
        #[serde(default = "default_hidden")]
        hidden: usize,
        #[serde(default = "default_time_features")]
        time_features: usize,
    },
}

fn default_time_bins() -> usize {
    64
}
fn default_embed_dim() -> usize {
    32
}
fn default_hidden() -> usize {
    128
}
fn default_time_features() -> usize {
    16
}

impl Architecture {
    pub fn tabular() -> Self {
        Architecture::Tabular {
            time_bins: default_time_bins(),
        }
    }

    pub fn mlp() -> Self {
        Architecture::Mlp {
            embed_dim: default_embed_dim(),
            hidden: default_hidden(),
            time_features: default_time_features(),
        }
    }
}

/// Per-position predicted distributions over clean tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionGrid<T> {
    rows: Vec<CategoricalDistribution<T>>,
}

impl<T: Scalar> PredictionGrid<T> {
    pub fn new(rows: Vec<CategoricalDistribution<T>>) -> Self {
        Self { rows }
    }

    pub fn row(&self, i: usize) -> &CategoricalDistribution<T> {
        &self.rows[i]
    }

    pub fn rows(&self) -> &[CategoricalDistribution<T>] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn one_hot(tokens: &[usize], size: usize) -> Self {
        Self::new(
            tokens
                .iter()
                .map(|&v| CategoricalDistribution::one_hot(size, v))
                .collect(),
        )
    }

    /// Largest per-position total variation distance to `other`.
    pub fn max_tv(&self, other: &Self) -> T {
        self.rows
            .iter()
            .zip(&other.rows)
            .fold(T::zero(), |m, (a, b)| m.max(a.tv(b)))
    }
}

/// Parameters of a denoiser together with the shape information needed to
/// interpret them.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams<T> {
    arch: Architecture,
    kernel: CorruptionKernel,
    seq_len: usize,
    values: Vec<T>,
}

/// Result of a batched forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct BatchForward<T> {
    batch: usize,
    /// `batch * seq_len * vocab` output probabilities.
    probs: Vec<T>,
    /// `batch * seq_len` flags for rows fixed by carry-over or the boundary.
    forced: Vec<bool>,
    tokens: Vec<usize>,
    /// Table rows hit by each element (tabular only).
    table_rows: Vec<usize>,
    cache: Option<MlpCache<T>>,
}

impl<T: Scalar> BatchForward<T> {
    pub fn len(&self) -> usize {
        self.batch
    }

    pub fn is_empty(&self) -> bool {
        self.batch == 0
    }

    pub fn grid(&self, b: usize, seq_len: usize, vocab: usize) -> PredictionGrid<T> {
        let base = b * seq_len * vocab;
        PredictionGrid::new(
            (0..seq_len)
                .map(|i| {
                    let start = base + i * vocab;
                    CategoricalDistribution::from_probs_unchecked(self.probs[start..start + vocab].to_vec())
                })
                .collect(),
        )
    }
}

fn time_bin<T: Scalar>(t: T, bins: usize) -> usize {
    let b = (t * T::of_usize(bins)).floor().to_usize().unwrap_or(0);
    b.min(bins - 1)
}

impl<T: Scalar> DenoiserParams<T> {
    /// Parameters with every value zero (uniform logits).
    pub fn zeros(arch: Architecture, kernel: CorruptionKernel, seq_len: usize) -> Result<Self> {
        let count = Self::param_count(&arch, &kernel, seq_len)?;
        Ok(Self {
            arch,
            kernel,
            seq_len,
            values: vec![T::zero(); count],
        })
    }

    /// Zero table for the tabular variant, scaled random weights for the MLP.
    pub fn init<R: Rng + ?Sized>(
        arch: Architecture,
        kernel: CorruptionKernel,
        seq_len: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut p = Self::zeros(arch, kernel, seq_len)?;
        if let Architecture::Mlp { .. } = arch {
            mlp::init(&mut p, rng);
        }
        Ok(p)
    }

    pub fn from_values(
        arch: Architecture,
        kernel: CorruptionKernel,
        seq_len: usize,
        values: Vec<T>,
    ) -> Result<Self> {
        let count = Self::param_count(&arch, &kernel, seq_len)?;
        if values.len() != count {
            return Err(CdlmError::Shape(format!(
                "expected {count} parameters, got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CdlmError::Numeric("parameters must be finite".into()));
        }
        Ok(Self {
            arch,
            kernel,
            seq_len,
            values,
        })
    }

    fn param_count(arch: &Architecture, kernel: &CorruptionKernel, seq_len: usize) -> Result<usize> {
        if seq_len == 0 {
            return Err(CdlmError::Shape("sequence length must be positive".into()));
        }
        let n = kernel.size();
        match *arch {
            Architecture::Tabular { time_bins } => {
                if time_bins == 0 {
                    return Err(CdlmError::Config("tabular denoiser needs at least one time bin".into()));
                }
                let states = tabular_states(n, seq_len)?;
                Ok(states * time_bins * seq_len * n)
            }
            Architecture::Mlp { .. } => Ok(mlp::Layout::new(arch, n, seq_len)?.total),
        }
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn kernel(&self) -> &CorruptionKernel {
        &self.kernel
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn vocab_size(&self) -> usize {
        self.kernel.size()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.arch == other.arch
            && self.kernel == other.kernel
            && self.seq_len == other.seq_len
            && self.values.len() == other.values.len()
    }

    fn check_input(&self, xt: &[usize], t: T) -> Result<()> {
        if xt.len() != self.seq_len {
            return Err(CdlmError::Shape(format!(
                "sequence of length {} given to a denoiser for length {}",
                xt.len(),
                self.seq_len
            )));
        }
        for &v in xt {
            self.kernel.vocab().check_token(v)?;
        }
        if !(t >= T::zero() && t <= T::one()) {
            return Err(CdlmError::Domain(format!("time {t} outside [0, 1]")));
        }
        Ok(())
    }

    /// Row of the tabular logit table used for `(xt, t)`.
    pub fn table_row(&self, xt: &[usize], t: T) -> Option<usize> {
        match self.arch {
            Architecture::Tabular { time_bins } => {
                let n = self.vocab_size();
                let state = xt.iter().rev().fold(0usize, |acc, &v| acc * n + v);
                Some(state * time_bins + time_bin(t, time_bins))
            }
            Architecture::Mlp { .. } => None,
        }
    }

    /// Mutable logits (length `seq_len * vocab`) of one tabular row.
    pub fn table_logits_mut(&mut self, row: usize) -> Option<&mut [T]> {
        let width = self.seq_len * self.vocab_size();
        match self.arch {
            Architecture::Tabular { .. } => self.values.get_mut(row * width..(row + 1) * width),
            Architecture::Mlp { .. } => None,
        }
    }

    /// Raw logits, `seq_len * vocab` values.
    pub fn logits(&self, xt: &[usize], t: T) -> Result<Vec<T>> {
        self.check_input(xt, t)?;
        let fwd = self.raw_logits(&[(xt, t)])?;
        Ok(fwd.0)
    }

    fn raw_logits(&self, inputs: &[(&[usize], T)]) -> Result<(Vec<T>, Vec<usize>, Option<MlpCache<T>>)> {
        let width = self.seq_len * self.vocab_size();
        match self.arch {
            Architecture::Tabular { .. } => {
                let mut logits = Vec::with_capacity(inputs.len() * width);
                let mut rows = Vec::with_capacity(inputs.len());
                for &(xt, t) in inputs {
                    let row = self.table_row(xt, t).expect("tabular");
                    logits.extend_from_slice(&self.values[row * width..(row + 1) * width]);
                    rows.push(row);
                }
                Ok((logits, rows, None))
            }
            Architecture::Mlp { .. } => {
                let (logits, cache) = mlp::forward(self, inputs)?;
                Ok((logits, Vec::new(), Some(cache)))
            }
        }
    }

    /// Batched forward pass. `inputs` pairs each noisy sequence with its time.
    pub fn forward_batch(&self, inputs: &[(&[usize], T)]) -> Result<BatchForward<T>> {
        for &(xt, t) in inputs {
            self.check_input(xt, t)?;
        }
        let (logits, table_rows, cache) = self.raw_logits(inputs)?;
        let n = self.vocab_size();
        let l = self.seq_len;
        let mask = match self.kernel.variant() {
            KernelVariant::Masked => self.kernel.vocab().mask_index(),
            KernelVariant::Uniform => None,
        };
        let mut probs = vec![T::zero(); inputs.len() * l * n];
        let mut forced = vec![false; inputs.len() * l];
        let mut tokens = Vec::with_capacity(inputs.len() * l);
        for (b, &(xt, t)) in inputs.iter().enumerate() {
            tokens.extend_from_slice(xt);
            for (i, &v) in xt.iter().enumerate() {
                let row = b * l + i;
                let out = &mut probs[row * n..(row + 1) * n];
                let is_mask = mask == Some(v);
                if (mask.is_some() && !is_mask) || (t == T::zero() && !is_mask) {
                    out[v] = T::one();
                    forced[row] = true;
                    continue;
                }
                let z = &logits[row * n..(row + 1) * n];
                if z.iter().any(|v| !v.is_finite()) {
                    return Err(CdlmError::Numeric(format!(
                        "non-finite logits for element {b}, position {i}"
                    )));
                }
                softmax_into(z, mask, out);
            }
        }
        Ok(BatchForward {
            batch: inputs.len(),
            probs,
            forced,
            tokens,
            table_rows,
            cache,
        })
    }

    pub fn predict(&self, xt: &[usize], t: T) -> Result<PredictionGrid<T>> {
        let fwd = self.forward_batch(&[(xt, t)])?;
        Ok(fwd.grid(0, self.seq_len, self.vocab_size()))
    }

    pub fn grids(&self, fwd: &BatchForward<T>) -> Vec<PredictionGrid<T>> {
        (0..fwd.batch)
            .map(|b| fwd.grid(b, self.seq_len, self.vocab_size()))
            .collect()
    }

    /// Accumulates into `grad` the parameter gradient of a loss whose
    /// derivative with respect to the output probabilities is given in
    /// `q * dL/dq` form (`h`, laid out like the forward probabilities).
    /// Forced rows receive no gradient.
    pub fn backward_batch(&self, fwd: &BatchForward<T>, h: &[T], grad: &mut [T]) -> Result<()> {
        let n = self.vocab_size();
        let l = self.seq_len;
        if h.len() != fwd.probs.len() || grad.len() != self.values.len() {
            return Err(CdlmError::Shape("backward buffers do not match the forward pass".into()));
        }
        let mut dlogits = vec![T::zero(); h.len()];
        for row in 0..fwd.batch * l {
            if fwd.forced[row] {
                continue;
            }
            let q = &fwd.probs[row * n..(row + 1) * n];
            let hr = &h[row * n..(row + 1) * n];
            let total: T = hr.iter().copied().sum();
            for j in 0..n {
                dlogits[row * n + j] = hr[j] - q[j] * total;
            }
        }
        match self.arch {
            Architecture::Tabular { .. } => {
                let width = l * n;
                for (b, &row) in fwd.table_rows.iter().enumerate() {
                    let g = &mut grad[row * width..(row + 1) * width];
                    for (acc, d) in g.iter_mut().zip(&dlogits[b * width..(b + 1) * width]) {
                        *acc += *d;
                    }
                }
                Ok(())
            }
            Architecture::Mlp { .. } => {
                let cache = fwd
                    .cache
                    .as_ref()
                    .ok_or_else(|| CdlmError::Invariant("MLP forward pass without cache".into()))?;
                mlp::backward(self, cache, &fwd.tokens, &dlogits, grad)
            }
        }
    }
}

fn tabular_states(vocab: usize, seq_len: usize) -> Result<usize> {
    let mut states: usize = 1;
    for _ in 0..seq_len {
        states = states
            .checked_mul(vocab)
            .filter(|s| *s <= TABULAR_STATE_CAP)
            .ok_or_else(|| {
                CdlmError::Config(format!(
                    "tabular denoiser over {vocab}^{seq_len} states exceeds the cap of {TABULAR_STATE_CAP}"
                ))
            })?;
    }
    Ok(states)
}

/// Softmax of `z` with the mask column (if any) pinned to zero.
fn softmax_into<T: Scalar>(z: &[T], mask: Option<usize>, out: &mut [T]) {
    let mut max = T::neg_infinity();
    for (j, &v) in z.iter().enumerate() {
        if Some(j) != mask && v > max {
            max = v;
        }
    }
    let mut total = T::zero();
    for (j, o) in out.iter_mut().enumerate() {
        *o = if Some(j) == mask {
            T::zero()
        } else {
            (z[j] - max).exp()
        };
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Exponential moving average copy of the online parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaState<T> {
    pub target: DenoiserParams<T>,
    pub decay: T,
}

impl<T: Scalar> EmaState<T> {
    pub fn new(online: &DenoiserParams<T>, decay: T) -> Result<Self> {
        if !(decay > T::zero() && decay <= T::one()) {
            return Err(CdlmError::Config(format!("EMA decay must lie in (0, 1], got {decay}")));
        }
        Ok(Self {
            target: online.clone(),
            decay,
        })
    }

    fn check(&self, online: &DenoiserParams<T>) -> Result<()> {
        if !self.target.same_shape(online) {
            return Err(CdlmError::Shape("EMA target and online parameters differ in structure".into()));
        }
        Ok(())
    }

    /// `target <- decay * target + (1 - decay) * online`.
    pub fn ema_update(&mut self, online: &DenoiserParams<T>) -> Result<()> {
        self.check(online)?;
        self.ema_update_with(online, self.decay)
    }

    pub fn ema_update_with(&mut self, online: &DenoiserParams<T>, decay: T) -> Result<()> {
        self.check(online)?;
        let keep = T::one() - decay;
        for (p, &o) in self.target.values.iter_mut().zip(&online.values) {
            *p = decay * *p + keep * o;
        }
        Ok(())
    }

    /// `target <- online`, bit for bit.
    pub fn hard_update(&mut self, online: &DenoiserParams<T>) -> Result<()> {
        self.check(online)?;
        self.target.values.copy_from_slice(&online.values);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn masked_tab() -> DenoiserParams<f64> {
        DenoiserParams::zeros(Architecture::tabular(), CorruptionKernel::masked(3).unwrap(), 2).unwrap()
    }

    #[test]
    fn uniform_logits_give_uniform_rows() {
        let p = masked_tab();
        let g = p.predict(&[3, 3], 0.7).unwrap();
        for row in g.rows() {
            assert_eq!(row.probs()[3], 0.0);
            for v in 0..3 {
                assert!((row.probs()[v] - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn carry_over_at_unmasked_positions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let kernel = CorruptionKernel::masked(3).unwrap();
        for arch in [Architecture::tabular(), Architecture::mlp()] {
            let mut p = DenoiserParams::<f64>::init(arch, kernel, 2, &mut rng).unwrap();
            let g = p.predict(&[1, 3], 0.4).unwrap();
            assert_eq!(g.row(0).probs(), &[0.0, 1.0, 0.0, 0.0]);
            assert!((g.row(1).probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert_eq!(g.row(1).probs()[3], 0.0);
            // perturbing the logits does not move the carried position
            for v in p.values_mut() {
                *v += 0.3;
            }
            p.values_mut()[0] = 5.0;
            let g2 = p.predict(&[1, 3], 0.4).unwrap();
            assert_eq!(g2.row(0), g.row(0));
        }
    }

    #[test]
    fn boundary_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let u = CorruptionKernel::uniform(3).unwrap();
        let p = DenoiserParams::<f64>::init(Architecture::mlp(), u, 3, &mut rng).unwrap();
        let g = p.predict(&[2, 0, 1], 0.0).unwrap();
        assert_eq!(g, PredictionGrid::one_hot(&[2, 0, 1], 3));
        let g = p.predict(&[2, 0, 1], 0.3).unwrap();
        assert!(g.row(0).probs().iter().all(|v| *v > 0.0));
    }

    #[test]
    fn non_finite_logits_are_rejected() {
        let mut p = masked_tab();
        let row = p.table_row(&[3, 3], 0.5).unwrap();
        p.table_logits_mut(row).unwrap()[0] = f64::NAN;
        assert!(matches!(p.predict(&[3, 3], 0.5), Err(CdlmError::Numeric(_))));
    }

    #[test]
    fn tabular_state_cap() {
        let k = CorruptionKernel::masked(40).unwrap();
        assert!(DenoiserParams::<f64>::zeros(Architecture::tabular(), k, 4).is_err());
    }

    #[test]
    fn input_validation() {
        let p = masked_tab();
        assert!(p.predict(&[0, 1, 2], 0.5).is_err());
        assert!(p.predict(&[0, 4], 0.5).is_err());
        assert!(p.predict(&[0, 3], 1.5).is_err());
    }

    #[test]
    fn ema_examples() {
        let k = CorruptionKernel::masked(2).unwrap();
        let arch = Architecture::Tabular { time_bins: 2 };
        let zeros = DenoiserParams::<f64>::zeros(arch, k, 1).unwrap();
        let mut ones = zeros.clone();
        ones.values_mut().iter_mut().for_each(|v| *v = 1.0);
        let mut ema = EmaState::new(&zeros, 0.999).unwrap();
        ema.ema_update(&ones).unwrap();
        assert!(ema.target.values().iter().all(|v| (v - 0.001).abs() < 1e-15));

        let mut frozen = EmaState::new(&zeros, 1.0).unwrap();
        frozen.ema_update(&ones).unwrap();
        assert_eq!(frozen.target, zeros);

        let mut copy = EmaState::new(&zeros, 0.5).unwrap();
        copy.ema_update_with(&ones, 0.0).unwrap();
        assert_eq!(copy.target, ones);

        assert!(EmaState::new(&zeros, 0.0).is_err());
        let other = DenoiserParams::<f64>::zeros(Architecture::tabular(), k, 1).unwrap();
        assert!(matches!(ema.ema_update(&other), Err(CdlmError::Shape(_))));
    }

    #[test]
    fn hard_update_is_exact_and_a_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let k = CorruptionKernel::masked(3).unwrap();
        let online = DenoiserParams::<f64>::init(Architecture::mlp(), k, 2, &mut rng).unwrap();
        let start = DenoiserParams::<f64>::init(Architecture::mlp(), k, 2, &mut rng).unwrap();
        let mut ema = EmaState::new(&start, 0.999).unwrap();
        ema.hard_update(&online).unwrap();
        assert_eq!(ema.target.values(), online.values());
        assert_eq!(ema.target.predict(&[3, 0], 0.6).unwrap(), online.predict(&[3, 0], 0.6).unwrap());
        ema.ema_update(&online).unwrap();
        let max = ema
            .target
            .values()
            .iter()
            .zip(online.values())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(max <= 1e-15);
    }
}
