//! Few-step ancestral generation: predict `x_0`, then step down the exact
//! bridge to the next time on the grid.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::chain::{CategoricalDistribution, CorruptionKernel, KernelVariant, TokenSequence};
use crate::error::{CdlmError, Result};
use crate::oracle::Predictor;
use crate::scalar::Scalar;

/// Descending grid `1 = t_K > ... > t_0 = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSchedule<T> {
    times: Vec<T>,
}

impl<T: Scalar> StepSchedule<T> {
    pub fn new(times: Vec<T>) -> Result<Self> {
        let ok = times.len() >= 2
            && times[0] == T::one()
            && times[times.len() - 1] == T::zero()
            && times.windows(2).all(|w| w[0] > w[1]);
        if !ok {
            return Err(CdlmError::Domain(
                "step schedule must descend strictly from 1 to 0".into(),
            ));
        }
        Ok(Self { times })
    }

    pub fn times(&self) -> &[T] {
        &self.times
    }

    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }
}

/// `t_k = k / K`.
pub fn uniform_schedule<T: Scalar>(k: usize) -> Result<StepSchedule<T>> {
    if k == 0 {
        return Err(CdlmError::Domain("need at least one sampling step".into()));
    }
    let kk = T::of_usize(k);
    StepSchedule::new((0..=k).rev().map(|j| T::of_usize(j) / kk).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    /// Draw `x_0` from each predicted row.
    #[default]
    Stochastic,
    /// Take the most probable token, ties to the lowest index.
    #[serde(rename = "greedy")]
    GreedyX0,
}

/// Stationary starting state: all masks, or i.i.d. uniform tokens.
fn initial_state<R: Rng + ?Sized>(kernel: &CorruptionKernel, seq_len: usize, rng: &mut R) -> Vec<usize> {
    match kernel.variant() {
        KernelVariant::Masked => vec![kernel.vocab().mask_index().expect("masked kernel"); seq_len],
        KernelVariant::Uniform => {
            let u = CategoricalDistribution::<f64>::uniform(kernel.size());
            (0..seq_len).map(|_| u.sample(rng)).collect()
        }
    }
}

/// Moves one sequence from `t` to `s` given its prediction grid.
fn step_down<T: Scalar, R: Rng + ?Sized>(
    kernel: &CorruptionKernel,
    x: &mut [usize],
    grid: &crate::denoiser::PredictionGrid<T>,
    s: T,
    t: T,
    mode: SampleMode,
    rng: &mut R,
) -> Result<()> {
    for (i, tok) in x.iter_mut().enumerate() {
        if kernel.variant() == KernelVariant::Masked && !kernel.vocab().is_mask(*tok) {
            continue;
        }
        let row = grid.row(i);
        let x0 = match mode {
            SampleMode::Stochastic => row.sample(rng),
            SampleMode::GreedyX0 => row.argmax(),
        };
        *tok = if s == T::zero() {
            x0
        } else {
            kernel.bridge(x0, *tok, s, t)?.sample(rng)
        };
    }
    Ok(())
}

fn check_final(kernel: &CorruptionKernel, x: &[usize]) -> Result<()> {
    if x.iter().any(|&v| kernel.vocab().is_mask(v)) {
        return Err(CdlmError::Invariant(format!("masked positions remain at t = 0: {x:?}")));
    }
    Ok(())
}

/// One ancestral sample.
pub fn ancestral_sample<T: Scalar, P: Predictor<T> + ?Sized, R: Rng + ?Sized>(
    f: &P,
    kernel: &CorruptionKernel,
    schedule: &StepSchedule<T>,
    seq_len: usize,
    rng: &mut R,
    mode: SampleMode,
) -> Result<TokenSequence> {
    let mut x = initial_state(kernel, seq_len, rng);
    for w in schedule.times.windows(2) {
        let grid = f.predict(&x, w[0])?;
        step_down(kernel, &mut x, &grid, w[1], w[0], mode, rng)?;
    }
    check_final(kernel, &x)?;
    Ok(TokenSequence(x))
}

/// Independent samples with per-sample seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    pub sequences: Vec<TokenSequence>,
    pub seeds: Vec<u64>,
    pub steps: usize,
    pub batch_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub tokens: Vec<usize>,
    pub seed: u64,
    pub steps: usize,
}

impl SampleBatch {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for (seq, &seed) in self.sequences.iter().zip(&self.seeds) {
            let rec = SampleRecord {
                tokens: seq.0.clone(),
                seed,
                steps: self.steps,
            };
            out.push_str(&serde_json::to_string(&rec)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Parses a JSON-lines sample file; blank lines are skipped.
pub fn read_jsonl(text: &str) -> Result<Vec<SampleRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| CdlmError::Config(format!("sample line {}: {e}", i + 1)))
        })
        .collect()
}

/// Seed of sample `i` within a batch seeded by `seed`.
pub fn sample_seeds(seed: u64, n: usize) -> Vec<u64> {
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| master.next_u64()).collect()
}

/// `n` samples; sample `i` is exactly `ancestral_sample` run with a
/// `ChaCha8Rng` seeded by its recorded seed. Predictions are batched per step.
pub fn generate_batch<T: Scalar, P: Predictor<T> + ?Sized>(
    f: &P,
    kernel: &CorruptionKernel,
    steps: usize,
    n: usize,
    seq_len: usize,
    seed: u64,
    mode: SampleMode,
) -> Result<SampleBatch> {
    let schedule = uniform_schedule::<T>(steps)?;
    let seeds = sample_seeds(seed, n);
    let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|&s| ChaCha8Rng::seed_from_u64(s)).collect();
    let mut xs: Vec<Vec<usize>> = rngs.iter_mut().map(|r| initial_state(kernel, seq_len, r)).collect();
    for w in schedule.times.windows(2) {
        let refs: Vec<&[usize]> = xs.iter().map(|x| x.as_slice()).collect();
        let grids = f.predict_many(&refs, w[0])?;
        for ((x, grid), rng) in xs.iter_mut().zip(&grids).zip(rngs.iter_mut()) {
            step_down(kernel, x, grid, w[1], w[0], mode, rng)?;
        }
    }
    for x in &xs {
        check_final(kernel, x)?;
    }
    Ok(SampleBatch {
        sequences: xs.into_iter().map(TokenSequence).collect(),
        seeds,
        steps,
        batch_seed: seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{Architecture, DenoiserParams};
    use crate::oracle::{tabulate_posterior, DataDistribution, ExactPosterior};

    #[test]
    fn uniform_schedules() {
        assert_eq!(uniform_schedule::<f64>(1).unwrap().times(), &[1.0, 0.0]);
        assert_eq!(uniform_schedule::<f64>(4).unwrap().times(), &[1.0, 0.75, 0.5, 0.25, 0.0]);
        let s3 = uniform_schedule::<f64>(3).unwrap();
        assert_eq!(s3.times(), &[1.0, 2.0 / 3.0, 1.0 / 3.0, 0.0]);
        assert!(uniform_schedule::<f64>(0).is_err());
        assert!(StepSchedule::new(vec![1.0, 0.5, 0.5, 0.0]).is_err());
    }

    #[test]
    fn masked_samples_contain_no_masks_and_masks_never_grow() {
        let k = CorruptionKernel::masked(3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = DenoiserParams::<f64>::init(Architecture::mlp(), k, 4, &mut rng).unwrap();
        let schedule = uniform_schedule::<f64>(5).unwrap();
        for _ in 0..50 {
            let mut x = initial_state(&k, 4, &mut rng);
            let mut masked = 4;
            for w in schedule.times().windows(2) {
                let g = p.predict(&x, w[0]).unwrap();
                step_down(&k, &mut x, &g, w[1], w[0], SampleMode::Stochastic, &mut rng).unwrap();
                let now = x.iter().filter(|&&v| v == 3).count();
                assert!(now <= masked);
                masked = now;
            }
            assert_eq!(masked, 0);
        }
    }

    #[test]
    fn batch_matches_individual_samples() {
        let k = CorruptionKernel::masked(3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = DenoiserParams::<f64>::init(Architecture::mlp(), k, 3, &mut rng).unwrap();
        for mode in [SampleMode::Stochastic, SampleMode::GreedyX0] {
            let b = generate_batch(&p, &k, 4, 20, 3, 77, mode).unwrap();
            let again = generate_batch(&p, &k, 4, 20, 3, 77, mode).unwrap();
            assert_eq!(b, again);
            let sched = uniform_schedule::<f64>(4).unwrap();
            for (seq, &seed) in b.sequences.iter().zip(&b.seeds) {
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                assert_eq!(&ancestral_sample(&p, &k, &sched, 3, &mut r, mode).unwrap(), seq);
            }
        }
        let empty = generate_batch(&p, &k, 2, 0, 3, 1, SampleMode::Stochastic).unwrap();
        assert!(empty.is_empty());
        assert_eq!(empty.to_jsonl().unwrap(), "");
    }

    #[test]
    fn jsonl_round_trip() {
        let k = CorruptionKernel::uniform(4).unwrap();
        let p = DenoiserParams::<f64>::zeros(Architecture::Tabular { time_bins: 2 }, k, 2).unwrap();
        let b = generate_batch(&p, &k, 2, 3, 2, 5, SampleMode::Stochastic).unwrap();
        let text = b.to_jsonl().unwrap();
        let recs = read_jsonl(&text).unwrap();
        assert_eq!(recs.len(), 3);
        assert!(recs.iter().all(|r| r.steps == 2 && r.tokens.len() == 2));
        assert!(read_jsonl("{\"tokens\":[1],\"seed\":1}").is_err());
    }

    #[test]
    fn greedy_single_step_takes_the_mode() {
        let d = DataDistribution::new(3, 1, vec![0.2, 0.5, 0.3]).unwrap();
        let k = CorruptionKernel::masked(3).unwrap();
        let f = ExactPosterior { data: &d, kernel: &k };
        let b = generate_batch::<f64, _>(&f, &k, 1, 10, 1, 3, SampleMode::GreedyX0).unwrap();
        assert!(b.sequences.iter().all(|s| s.0 == vec![1]));
    }

    fn four_sigma_check(freq: &[usize], probs: &[f64], n: usize) {
        for (c, &p) in freq.iter().zip(probs) {
            let phat = *c as f64 / n as f64;
            let sigma = (p * (1.0 - p) / n as f64).sqrt().max(1e-12);
            assert!((phat - p).abs() <= 4.0 * sigma, "{phat} vs {p}");
        }
    }

    #[test]
    fn oracle_sampler_reproduces_single_token_data() {
        let d = DataDistribution::new(4, 1, vec![0.1, 0.4, 0.2, 0.3]).unwrap();
        let n = 100_000;
        for k in [CorruptionKernel::masked(4).unwrap(), CorruptionKernel::uniform(4).unwrap()] {
            let f = ExactPosterior { data: &d, kernel: &k };
            for steps in [1, 2, 4, 8] {
                let b = generate_batch::<f64, _>(&f, &k, steps, n, 1, steps as u64, SampleMode::Stochastic).unwrap();
                let mut freq = vec![0usize; 4];
                for s in &b.sequences {
                    freq[s.0[0]] += 1;
                }
                four_sigma_check(&freq, d.probs(), n);
            }
        }
    }

    #[test]
    fn one_step_matches_oracle_marginals() {
        // L = 2 with correlated data: one step samples each position from its marginal
        let d = DataDistribution::new(2, 2, vec![0.5, 0.1, 0.0, 0.4]).unwrap();
        let k = CorruptionKernel::masked(2).unwrap();
        let table = tabulate_posterior::<f64>(&d, &k, 8).unwrap();
        let n = 100_000;
        let b = generate_batch(&table, &k, 1, n, 2, 9, SampleMode::Stochastic).unwrap();
        let marg = d.marginals();
        for pos in 0..2 {
            let mut freq = vec![0usize; 2];
            for s in &b.sequences {
                freq[s.0[pos]] += 1;
            }
            four_sigma_check(&freq, &marg[pos], n);
        }
    }
}
