//! Toy datasets (quantized two moons, random Markov chains) and sample
//! quality metrics against their known distributions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{CdlmError, Result};
use crate::oracle::{decode_state, encode_state, state_count, DataDistribution};

/// Quantization window for the moons generator, `[x_lo, x_hi] x [y_lo, y_hi]`.
pub const MOONS_RANGE: [[f64; 2]; 2] = [[-1.5, 2.5], [-1.0, 1.5]];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MoonsConfig {
    pub n_points: usize,
    pub noise: f64,
    pub bins: usize,
    pub seed: u64,
}

impl Default for MoonsConfig {
    fn default() -> Self {
        Self {
            n_points: 100_000,
            noise: 0.1,
            bins: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarkovTextConfig {
    pub order: usize,
    pub vocab: usize,
    pub seq_len: usize,
    pub seed: u64,
    /// Number of training sequences drawn from the chain.
    #[serde(default = "default_markov_train")]
    pub n_train: usize,
}

fn default_markov_train() -> usize {
    100_000
}

/// Dataset recipe as written in run configs and dataset files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    Moons(MoonsConfig),
    Markov(MarkovTextConfig),
}

/// A generated dataset: training sequences plus the distribution they are scored against.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub sequences: Vec<Vec<usize>>,
    pub distribution: DataDistribution,
}

/// On-disk form of a dataset: recipe and dense probability table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetFile {
    pub spec: DatasetSpec,
    pub distribution: DataDistribution,
}

impl DatasetSpec {
    pub fn generate(&self) -> Result<Dataset> {
        match self {
            DatasetSpec::Moons(cfg) => {
                let m = generate_moons(cfg)?;
                Ok(Dataset {
                    spec: self.clone(),
                    sequences: m.tokens,
                    distribution: m.distribution,
                })
            }
            DatasetSpec::Markov(cfg) => {
                let distribution = generate_markov_text(cfg)?;
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
                let sequences = (0..cfg.n_train).map(|_| distribution.sample(&mut rng)).collect();
                Ok(Dataset {
                    spec: self.clone(),
                    sequences,
                    distribution,
                })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Moons {
    pub points: Vec<[f64; 2]>,
    pub tokens: Vec<Vec<usize>>,
    pub distribution: DataDistribution,
}

/// Bin of `v` in `[lo, hi]` split into `bins` cells; out-of-range values go to the edge bins.
pub fn quantize(v: f64, lo: f64, hi: f64, bins: usize) -> usize {
    let cell = ((v - lo) / (hi - lo) * bins as f64).floor();
    if cell.is_nan() || cell < 0.0 {
        0
    } else {
        (cell as usize).min(bins - 1)
    }
}

pub fn quantize_point(p: [f64; 2], bins: usize) -> Vec<usize> {
    vec![
        quantize(p[0], MOONS_RANGE[0][0], MOONS_RANGE[0][1], bins),
        quantize(p[1], MOONS_RANGE[1][0], MOONS_RANGE[1][1], bins),
    ]
}

/// Two interleaved half circles (outer: `(cos a, sin a)`, inner:
/// `(1 - cos a, 0.5 - sin a)`, `a` evenly spaced on `[0, pi]`) with gaussian
/// noise, quantized to token pairs.
pub fn generate_moons(cfg: &MoonsConfig) -> Result<Moons> {
    if cfg.bins < 2 {
        return Err(CdlmError::Config(format!("moons need at least 2 bins, got {}", cfg.bins)));
    }
    if cfg.n_points == 0 || !(cfg.noise >= 0.0 && cfg.noise.is_finite()) {
        return Err(CdlmError::Config("moons need points and a finite non-negative noise".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_out = cfg.n_points / 2;
    let n_in = cfg.n_points - n_out;
    let arc = |j: usize, n: usize| {
        if n > 1 {
            std::f64::consts::PI * j as f64 / (n - 1) as f64
        } else {
            0.0
        }
    };
    let mut points = Vec::with_capacity(cfg.n_points);
    for j in 0..n_out {
        let a = arc(j, n_out);
        points.push([a.cos(), a.sin()]);
    }
    for j in 0..n_in {
        let a = arc(j, n_in);
        points.push([1.0 - a.cos(), 0.5 - a.sin()]);
    }
    for p in points.iter_mut() {
        let nx: f64 = StandardNormal.sample(&mut rng);
        let ny: f64 = StandardNormal.sample(&mut rng);
        p[0] += cfg.noise * nx;
        p[1] += cfg.noise * ny;
    }
    let tokens: Vec<Vec<usize>> = points.iter().map(|&p| quantize_point(p, cfg.bins)).collect();
    let distribution = DataDistribution::empirical(cfg.bins, 2, tokens.iter().map(|t| t.as_slice()))?;
    Ok(Moons {
        points,
        tokens,
        distribution,
    })
}

fn random_row<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let gamma = Gamma::new(0.5, 1.0).expect("valid shape");
    loop {
        let row: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
        let total: f64 = row.iter().sum();
        if total > 0.0 {
            return row.into_iter().map(|v| v / total).collect();
        }
    }
}

/// Exact law of a Markov chain given its initial distribution and
/// transition table. For order 2 the table is indexed by `prev2 * V + prev1`
/// and the second token follows `first_order`.
pub fn markov_distribution(
    vocab: usize,
    seq_len: usize,
    initial: &[f64],
    first_order: &[Vec<f64>],
    second_order: Option<&[Vec<f64>]>,
) -> Result<DataDistribution> {
    let states = state_count(vocab, seq_len)?;
    let row_ok = |r: &Vec<f64>| r.len() == vocab && (r.iter().sum::<f64>() - 1.0).abs() < 1e-12 && r.iter().all(|p| *p >= 0.0);
    if initial.len() != vocab
        || first_order.len() != vocab
        || !first_order.iter().all(row_ok)
        || second_order.is_some_and(|t| t.len() != vocab * vocab || !t.iter().all(row_ok))
    {
        return Err(CdlmError::Shape("Markov tables do not match the vocabulary".into()));
    }
    let mut probs = vec![0.0; states];
    for (idx, p) in probs.iter_mut().enumerate() {
        let seq = decode_state(idx, vocab, seq_len);
        let mut v = initial[seq[0]];
        for i in 1..seq_len {
            v *= match (second_order, i) {
                (Some(t), i) if i >= 2 => t[seq[i - 2] * vocab + seq[i - 1]][seq[i]],
                _ => first_order[seq[i - 1]][seq[i]],
            };
        }
        *p = v;
    }
    let total: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= total);
    DataDistribution::new(vocab, seq_len, probs)
}

/// Random chain with sparse-ish (Dirichlet 1/2) rows drawn from the seed.
pub fn generate_markov_text(cfg: &MarkovTextConfig) -> Result<DataDistribution> {
    if !(cfg.order == 1 || cfg.order == 2) {
        return Err(CdlmError::Config(format!("Markov order must be 1 or 2, got {}", cfg.order)));
    }
    if cfg.vocab < 2 || cfg.seq_len == 0 {
        return Err(CdlmError::Config("Markov text needs at least 2 tokens and length 1".into()));
    }
    state_count(cfg.vocab, cfg.seq_len)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let initial = random_row(cfg.vocab, &mut rng);
    let first: Vec<Vec<f64>> = (0..cfg.vocab).map(|_| random_row(cfg.vocab, &mut rng)).collect();
    let second: Option<Vec<Vec<f64>>> = (cfg.order == 2)
        .then(|| (0..cfg.vocab * cfg.vocab).map(|_| random_row(cfg.vocab, &mut rng)).collect());
    markov_distribution(cfg.vocab, cfg.seq_len, &initial, &first, second.as_deref())
}

/// Sample-quality metrics of one sample set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SampleMetrics {
    pub tv: f64,
    pub kl: f64,
    pub entropy: f64,
    pub n: usize,
}

/// TV and `KL(data || smoothed empirical)` against `data`, and the entropy of
/// the empirical sequence distribution. The empirical law is mixed with the
/// uniform law at weight `1 / (10 n)` before the KL.
pub fn eval_distribution<'a, I>(samples: I, data: &DataDistribution) -> Result<SampleMetrics>
where
    I: IntoIterator<Item = &'a [usize]>,
{
    let base = data.clean_size();
    let mut counts = vec![0u64; data.probs().len()];
    let mut n = 0usize;
    for s in samples {
        if s.len() != data.seq_len() || s.iter().any(|&v| v >= base) {
            return Err(CdlmError::Shape(format!(
                "sample {s:?} is not a sequence of {} tokens below {base}",
                data.seq_len()
            )));
        }
        counts[encode_state(s, base)] += 1;
        n += 1;
    }
    if n == 0 {
        return Err(CdlmError::Config("no samples to evaluate".into()));
    }
    let nf = n as f64;
    let eps = 1.0 / (10.0 * nf);
    let uniform = 1.0 / counts.len() as f64;
    let (mut tv, mut kl, mut entropy) = (0.0, 0.0, 0.0);
    for (&c, &p) in counts.iter().zip(data.probs()) {
        let q = c as f64 / nf;
        tv += (q - p).abs();
        if p > 0.0 {
            let qs = (1.0 - eps) * q + eps * uniform;
            kl += p * (p / qs).ln();
        }
        if q > 0.0 {
            entropy -= q * q.ln();
        }
    }
    Ok(SampleMetrics {
        tv: 0.5 * tv,
        kl: kl.max(0.0),
        entropy: entropy.max(0.0),
        n,
    })
}

pub const EVAL_HEADER: &str = "run_id,K,tv,kl,entropy,n";

/// One row of `eval.csv`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRow {
    pub run_id: String,
    pub k: usize,
    pub metrics: SampleMetrics,
}

impl EvalRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{:.10e},{:.10e},{:.10e},{}",
            self.run_id, self.k, self.metrics.tv, self.metrics.kl, self.metrics.entropy, self.metrics.n
        )
    }
}
