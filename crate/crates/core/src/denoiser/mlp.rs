//! MLP denoiser: `[emb(x_1) .. emb(x_L), time features] -> SiLU -> SiLU -> logits`.
//!
//! Flat parameter layout, row-major blocks in this order:
//! `emb (N x E)`, `W1 (L*E + F x H)`, `b1 (H)`, `W2 (H x H)`, `b2 (H)`,
//! `W3 (H x L*N)`, `b3 (L*N)`.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Architecture, DenoiserParams};
use crate::error::{CdlmError, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy)]
pub(super) struct Layout {
    n: usize,
    l: usize,
    e: usize,
    h: usize,
    f: usize,
    emb: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
    pub(super) total: usize,
}

impl Layout {
    pub(super) fn new(arch: &Architecture, n: usize, l: usize) -> Result<Self> {
        let Architecture::Mlp {
            embed_dim: e,
            hidden: h,
            time_features: f,
        } = *arch
        else {
            return Err(CdlmError::Invariant("MLP layout requested for a non-MLP architecture".into()));
        };
        if e == 0 || h == 0 {
            return Err(CdlmError::Config("MLP widths must be positive".into()));
        }
        if f % 2 != 0 {
            return Err(CdlmError::Config(format!("time_features must be even, got {f}")));
        }
        let input = l * e + f;
        let emb = 0;
        let w1 = emb + n * e;
        let b1 = w1 + input * h;
        let w2 = b1 + h;
        let b2 = w2 + h * h;
        let w3 = b2 + h;
        let b3 = w3 + h * l * n;
        let total = b3 + l * n;
        Ok(Self {
            n,
            l,
            e,
            h,
            f,
            emb,
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
            total,
        })
    }

    fn input(&self) -> usize {
        self.l * self.e + self.f
    }

    fn mat<'a, T>(&self, v: &'a [T], at: usize, rows: usize, cols: usize) -> ArrayView2<'a, T> {
        ArrayView2::from_shape((rows, cols), &v[at..at + rows * cols]).expect("layout")
    }

    fn mat_mut<'a, T>(&self, v: &'a mut [T], at: usize, rows: usize, cols: usize) -> ArrayViewMut2<'a, T> {
        ArrayViewMut2::from_shape((rows, cols), &mut v[at..at + rows * cols]).expect("layout")
    }
}

/// Activations saved by the forward pass.
#[derive(Debug, Clone)]
pub struct MlpCache<T> {
    x: Array2<T>,
    z1: Array2<T>,
    a1: Array2<T>,
    z2: Array2<T>,
    a2: Array2<T>,
}

fn silu<T: Scalar>(z: T) -> T {
    z / (T::one() + (-z).exp())
}

fn silu_grad<T: Scalar>(z: T) -> T {
    let s = T::one() / (T::one() + (-z).exp());
    s * (T::one() + z * (T::one() - s))
}

/// `sin(2^k * pi * t)` and `cos(2^k * pi * t)` for `k < f / 2`.
fn time_features<T: Scalar>(t: T, f: usize, out: &mut [T]) {
    for k in 0..f / 2 {
        let w = T::of(2f64.powi(k as i32)) * T::PI() * t;
        out[2 * k] = w.sin();
        out[2 * k + 1] = w.cos();
    }
}

pub(super) fn init<T: Scalar, R: Rng + ?Sized>(p: &mut DenoiserParams<T>, rng: &mut R) {
    let lay = Layout::new(&p.arch, p.vocab_size(), p.seq_len).expect("validated");
    let mut fill = |v: &mut [T], std: f64| {
        for x in v {
            let z: f64 = StandardNormal.sample(rng);
            *x = T::of(z * std);
        }
    };
    let v = &mut p.values;
    fill(&mut v[lay.emb..lay.w1], 1.0);
    fill(&mut v[lay.w1..lay.b1], 1.0 / (lay.input() as f64).sqrt());
    fill(&mut v[lay.w2..lay.b2], 1.0 / (lay.h as f64).sqrt());
    fill(&mut v[lay.w3..lay.b3], 0.1 / (lay.h as f64).sqrt());
}

pub(super) fn forward<T: Scalar>(
    p: &DenoiserParams<T>,
    inputs: &[(&[usize], T)],
) -> Result<(Vec<T>, MlpCache<T>)> {
    let lay = Layout::new(&p.arch, p.vocab_size(), p.seq_len)?;
    let v = &p.values;
    let b = inputs.len();
    let emb = lay.mat(v, lay.emb, lay.n, lay.e);
    let mut x = Array2::<T>::zeros((b, lay.input()));
    for (r, &(xt, t)) in inputs.iter().enumerate() {
        let mut row = x.row_mut(r);
        let row = row.as_slice_mut().expect("contiguous");
        for (i, &tok) in xt.iter().enumerate() {
            row[i * lay.e..(i + 1) * lay.e]
                .iter_mut()
                .zip(emb.row(tok))
                .for_each(|(d, s)| *d = *s);
        }
        time_features(t, lay.f, &mut row[lay.l * lay.e..]);
    }

    let layer = |input: &Array2<T>, w_at: usize, b_at: usize, rows: usize, cols: usize| {
        let w = lay.mat(v, w_at, rows, cols);
        let bias = ArrayView1::from(&v[b_at..b_at + cols]);
        let mut z = Array2::<T>::zeros((input.nrows(), cols));
        for mut r in z.rows_mut() {
            r.assign(&bias);
        }
        general_mat_mul(T::one(), input, &w, T::one(), &mut z);
        z
    };

    let z1 = layer(&x, lay.w1, lay.b1, lay.input(), lay.h);
    let a1 = z1.mapv(silu);
    let z2 = layer(&a1, lay.w2, lay.b2, lay.h, lay.h);
    let a2 = z2.mapv(silu);
    let out = layer(&a2, lay.w3, lay.b3, lay.h, lay.l * lay.n);
    let logits = out.into_raw_vec_and_offset().0;
    Ok((logits, MlpCache { x, z1, a1, z2, a2 }))
}

pub(super) fn backward<T: Scalar>(
    p: &DenoiserParams<T>,
    cache: &MlpCache<T>,
    tokens: &[usize],
    dlogits: &[T],
    grad: &mut [T],
) -> Result<()> {
    let lay = Layout::new(&p.arch, p.vocab_size(), p.seq_len)?;
    let v = &p.values;
    let b = cache.x.nrows();
    let d3 = ArrayView2::from_shape((b, lay.l * lay.n), dlogits)
        .map_err(|e| CdlmError::Shape(e.to_string()))?;

    let dense = |grad: &mut [T], input: &Array2<T>, dout: &ArrayView2<T>, w_at: usize, b_at: usize| {
        let (rows, cols) = (input.ncols(), dout.ncols());
        let mut gw = lay.mat_mut(grad, w_at, rows, cols);
        general_mat_mul(T::one(), &input.t(), dout, T::one(), &mut gw);
        let mut gb = ArrayViewMut1::from(&mut grad[b_at..b_at + cols]);
        gb += &dout.sum_axis(Axis(0));
    };

    dense(grad, &cache.a2, &d3, lay.w3, lay.b3);
    let w3 = lay.mat(v, lay.w3, lay.h, lay.l * lay.n);
    let mut d2 = Array2::<T>::zeros((b, lay.h));
    general_mat_mul(T::one(), &d3, &w3.t(), T::zero(), &mut d2);
    d2.zip_mut_with(&cache.z2, |d, &z| *d *= silu_grad(z));

    dense(grad, &cache.a1, &d2.view(), lay.w2, lay.b2);
    let w2 = lay.mat(v, lay.w2, lay.h, lay.h);
    let mut d1 = Array2::<T>::zeros((b, lay.h));
    general_mat_mul(T::one(), &d2, &w2.t(), T::zero(), &mut d1);
    d1.zip_mut_with(&cache.z1, |d, &z| *d *= silu_grad(z));

    dense(grad, &cache.x, &d1.view(), lay.w1, lay.b1);
    let w1 = lay.mat(v, lay.w1, lay.input(), lay.h);
    let mut dx = Array2::<T>::zeros((b, lay.input()));
    general_mat_mul(T::one(), &d1, &w1.t(), T::zero(), &mut dx);

    let mut gemb = lay.mat_mut(grad, lay.emb, lay.n, lay.e);
    for r in 0..b {
        for i in 0..lay.l {
            let tok = tokens[r * lay.l + i];
            let src = dx.slice(ndarray::s![r, i * lay.e..(i + 1) * lay.e]);
            let mut dst = gemb.row_mut(tok);
            dst += &src;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::CorruptionKernel;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn layout_counts() {
        let arch = Architecture::Mlp {
            embed_dim: 4,
            hidden: 8,
            time_features: 6,
        };
        let lay = Layout::new(&arch, 5, 3).unwrap();
        let expect = 5 * 4 + (3 * 4 + 6) * 8 + 8 + 8 * 8 + 8 + 8 * 15 + 15;
        assert_eq!(lay.total, expect);
        let odd = Architecture::Mlp {
            embed_dim: 4,
            hidden: 8,
            time_features: 5,
        };
        assert!(Layout::new(&odd, 5, 3).is_err());
    }

    #[test]
    fn silu_derivative_matches_difference() {
        for &z in &[-3.0f64, -0.5, 0.0, 0.7, 4.0] {
            let h = 1e-6;
            let fd = (silu(z + h) - silu(z - h)) / (2.0 * h);
            assert!((fd - silu_grad(z)).abs() < 1e-8);
        }
    }

    #[test]
    fn batched_logits_match_single() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k = CorruptionKernel::uniform(4).unwrap();
        let arch = Architecture::Mlp {
            embed_dim: 3,
            hidden: 5,
            time_features: 4,
        };
        let p = DenoiserParams::<f64>::init(arch, k, 2, &mut rng).unwrap();
        let a = [0usize, 3];
        let b = [2usize, 1];
        let (both, _) = forward(&p, &[(&a, 0.2), (&b, 0.9)]).unwrap();
        assert_eq!(&both[..8], p.logits(&a, 0.2).unwrap().as_slice());
        assert_eq!(&both[8..], p.logits(&b, 0.9).unwrap().as_slice());
    }

    #[test]
    fn logit_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let k = CorruptionKernel::uniform(3).unwrap();
        let arch = Architecture::Mlp {
            embed_dim: 2,
            hidden: 4,
            time_features: 2,
        };
        let mut p = DenoiserParams::<f64>::init(arch, k, 2, &mut rng).unwrap();
        let xa = [0usize, 2];
        let xb = [1usize, 1];
        let inputs: Vec<(&[usize], f64)> = vec![(&xa, 0.3), (&xb, 0.8)];
        let weights: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let f = |p: &DenoiserParams<f64>| -> f64 {
            let (z, _) = forward(p, &inputs).unwrap();
            z.iter().zip(&weights).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = forward(&p, &inputs).unwrap();
        let mut grad = vec![0.0; p.len()];
        backward(&p, &cache, &[0, 2, 1, 1], &weights, &mut grad).unwrap();
        for j in 0..p.len() {
            let orig = p.values()[j];
            p.values_mut()[j] = orig + 1e-6;
            let up = f(&p);
            p.values_mut()[j] = orig - 1e-6;
            let down = f(&p);
            p.values_mut()[j] = orig;
            let fd = (up - down) / 2e-6;
            assert!((fd - grad[j]).abs() < 1e-6, "coord {j}: {fd} vs {}", grad[j]);
        }
    }
}
