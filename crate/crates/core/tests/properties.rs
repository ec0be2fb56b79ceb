use cdlm::chain::{masked_bridge, CategoricalDistribution, CorruptionKernel, NoiseSchedule};
use cdlm::denoiser::{Architecture, DenoiserParams, PredictionGrid};
use cdlm::objective::{
    anchor_loss, combined_loss, consistency_loss, divergence, loss_positions, sample_step_size, weight, Divergence,
    MaxStepMixer, StepSizeScheduler,
};
use cdlm::oracle::{decode_state, encode_state};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn probs(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, n).prop_filter_map("positive mass", |v| {
        let s: f64 = v.iter().sum();
        (s > 1e-6).then(|| v.iter().map(|x| x / s).collect())
    })
}

fn kernel() -> impl Strategy<Value = CorruptionKernel> {
    prop_oneof![
        (2usize..7).prop_map(|c| CorruptionKernel::masked(c).unwrap()),
        (2usize..8).prop_map(|n| CorruptionKernel::uniform(n).unwrap()),
        (2usize..7).prop_map(|c| CorruptionKernel::masked(c).unwrap().with_schedule(NoiseSchedule::Cosine)),
    ]
}

/// Three distinct times `u < s < t` in `[0, 1]`.
fn triple() -> impl Strategy<Value = (f64, f64, f64)> {
    (0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0).prop_filter_map("distinct", |(a, b, c)| {
        let mut v = [a, b, c];
        v.sort_by(|x, y| x.partial_cmp(y).unwrap());
        (v[1] - v[0] > 1e-3 && v[2] - v[1] > 1e-3 && v[2] > 0.0).then_some((v[0], v[1], v[2]))
    })
}

fn random_grid(rows: usize, n: usize, seed: u64) -> PredictionGrid<f64> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PredictionGrid::new(
        (0..rows)
            .map(|_| {
                let v: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 1e-3).collect();
                let s: f64 = v.iter().sum();
                CategoricalDistribution::new(v.into_iter().map(|x| x / s).collect()).unwrap()
            })
            .collect(),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn predictions_are_normalized(seed in 0u64..500, t in 0.0f64..=1.0, mlp in any::<bool>(), xs in prop::collection::vec(0usize..4, 3)) {
        let k = CorruptionKernel::masked(3).unwrap();
        let arch = if mlp { Architecture::mlp() } else { Architecture::Tabular { time_bins: 8 } };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = DenoiserParams::<f64>::init(arch, k, 3, &mut rng).unwrap();
        for (j, v) in p.values_mut().iter_mut().enumerate() {
            *v += ((j as f64 + seed as f64) * 0.37).sin();
        }
        let g = p.predict(&xs, t).unwrap();
        for (row, &x) in g.rows().iter().zip(&xs) {
            let s: f64 = row.probs().iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert_eq!(row.probs()[3], 0.0);
            if x != 3 {
                prop_assert_eq!(row.probs()[x], 1.0);
            }
        }
    }

    #[test]
    fn bridges_compose(k in kernel(), (u, s, t) in triple(), x0 in 0usize..8, xt in 0usize..8) {
        let x0 = x0 % k.vocab().clean_size();
        let xt = xt % k.size();
        if let Ok(direct) = k.bridge(x0, xt, u, t) {
            let composed = k.compose_bridge(x0, xt, t, s, u).unwrap();
            prop_assert!(direct.max_abs_diff(&composed) < 1e-10);
            let total: f64 = direct.probs().iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_closed_form_matches_general_bridge(c in 2usize..7, (_, s, t) in triple(), x0 in 0usize..6, masked in any::<bool>()) {
        let k = CorruptionKernel::masked(c).unwrap();
        let x0 = x0 % c;
        let xt = if masked { c } else { x0 };
        let general = k.bridge(x0, xt, s, t).unwrap();
        let closed = masked_bridge(k.vocab(), x0, xt, s, t).unwrap();
        prop_assert!(general.max_abs_diff(&closed) < 1e-14);
    }

    #[test]
    fn jsd_is_symmetric_and_bounded(p in probs(5), q in probs(5)) {
        let p = CategoricalDistribution::new(p).unwrap();
        let q = CategoricalDistribution::new(q).unwrap();
        let a = divergence(Divergence::Jsd, &p, &q).unwrap();
        let b = divergence(Divergence::Jsd, &q, &p).unwrap();
        prop_assert!((a - b).abs() < 1e-14);
        prop_assert!(a >= 0.0 && a <= std::f64::consts::LN_2 + 1e-15);
        prop_assert!(divergence(Divergence::Jsd, &p, &p).unwrap().abs() < 1e-15);
    }

    #[test]
    fn kl_is_nonnegative_and_vanishes_on_the_diagonal(p in probs(4), q in probs(4)) {
        let p = CategoricalDistribution::new(p).unwrap();
        let q = CategoricalDistribution::new(q).unwrap();
        for d in [Divergence::ForwardKl, Divergence::ReverseKl] {
            prop_assert!(divergence(d, &p, &q).unwrap() >= -1e-15);
            prop_assert!(divergence(d, &p, &p).unwrap().abs() < 1e-15);
        }
        let f = divergence(Divergence::ForwardKl, &p, &q).unwrap();
        let r = divergence(Divergence::ReverseKl, &q, &p).unwrap();
        prop_assert!((f - r).abs() < 1e-14);
    }

    #[test]
    fn max_step_consistency_is_the_anchor(seed in 0u64..1000, t in 1e-3f64..1.0, x0 in prop::collection::vec(0usize..4, 3), mask in prop::collection::vec(any::<bool>(), 3)) {
        let k = CorruptionKernel::masked(4).unwrap();
        let xt: Vec<usize> = x0.iter().zip(&mask).map(|(&v, &m)| if m { 4 } else { v }).collect();
        let mut online = random_grid(3, 5, seed);
        // carry-over rows and a zero MASK column, as the denoiser produces
        let rows = online
            .rows()
            .iter()
            .zip(&xt)
            .map(|(r, &v)| {
                if v != 4 {
                    return CategoricalDistribution::one_hot(5, v);
                }
                let mut p = r.probs().to_vec();
                p[4] = 0.0;
                let s: f64 = p.iter().sum();
                CategoricalDistribution::new(p.into_iter().map(|x| x / s).collect()).unwrap()
            })
            .collect();
        online = PredictionGrid::new(rows);
        let boundary = PredictionGrid::one_hot(&x0, 5);
        let positions = loss_positions(&k, &xt);
        let cons = consistency_loss(Divergence::ForwardKl, &online, &boundary, &positions, weight(t, t).unwrap()).unwrap();
        let anchor = anchor_loss(&online, &x0, &positions, k.schedule().anchor_weight(t).unwrap()).unwrap();
        prop_assert!((cons - anchor.value).abs() <= 1e-12 * anchor.value.abs().max(1.0));
    }

    #[test]
    fn combined_loss_is_linear_in_kappa(c in 0.0f64..10.0, a in 0.0f64..10.0, kappa in 0.0f64..=1.0) {
        let l = combined_loss(c, a, kappa).unwrap();
        prop_assert!((l.total - ((1.0 - kappa) * c + kappa * a)).abs() < 1e-12);
        prop_assert_eq!(combined_loss(c, a, 0.0).unwrap().total, c);
        prop_assert_eq!(combined_loss(c, a, 1.0).unwrap().total, a);
    }

    #[test]
    fn step_sizes_stay_in_range(seed in 0u64..1000, t in 1e-3f64..=1.0, progress in 0.0f64..=1.0, which in 0usize..4) {
        let sched = match which {
            0 => StepSizeScheduler::default(),
            1 => StepSizeScheduler::LinearIncreasing { lo: 0.125, hi: 0.375 },
            2 => StepSizeScheduler::LinearDecreasing { lo: 0.125, hi: 0.375 },
            _ => StepSizeScheduler::staged_increasing(),
        };
        let (lo, hi) = sched.range(progress);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d: f64 = sample_step_size(&sched, progress, t, &mut rng).unwrap();
        prop_assert!(d > 0.0 && d <= t);
        prop_assert!(d <= hi + 1e-15);
        prop_assert!(d >= lo.min(t) - 1e-15);
    }

    #[test]
    fn annealed_mixer_stays_between_knots(x in 0.0f64..=1.0, a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let m = MaxStepMixer::Annealed { knots: vec![[0.0, a], [1.0, b]] };
        m.validate().unwrap();
        let v = m.value(x);
        prop_assert!(v >= a.min(b) - 1e-15 && v <= a.max(b) + 1e-15);
        prop_assert!((v - (a + (b - a) * x)).abs() < 1e-12);
    }

    #[test]
    fn state_codec_is_a_bijection(base in 2usize..9, seq in prop::collection::vec(0usize..9, 1..5)) {
        let seq: Vec<usize> = seq.into_iter().map(|v| v % base).collect();
        let idx = encode_state(&seq, base);
        prop_assert!(idx < base.pow(seq.len() as u32));
        prop_assert_eq!(decode_state(idx, base, seq.len()), seq);
    }

    #[test]
    fn masked_corruption_only_masks(seed in 0u64..1000, t in 0.0f64..=1.0, x0 in prop::collection::vec(0usize..5, 1..6)) {
        let k = CorruptionKernel::masked(5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xt = k.corrupt(&x0, t, &mut rng).unwrap();
        for (&a, &b) in x0.iter().zip(&xt.0) {
            prop_assert!(b == a || b == 5);
        }
    }
}
