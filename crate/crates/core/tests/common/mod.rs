//! Test-side reference implementations. Nothing here calls the library's
//! orthogonalisation or closed form, so agreement is meaningful.
#![allow(dead_code)]

use layergrad::{Batch, FlatVector, MlpModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn fv(v: Vec<f64>) -> FlatVector {
    FlatVector::from(v)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Orthonormal basis of the span of `cols` by Householder QR with column
/// pivoting; stops when the largest remaining column norm falls below
/// `rel_tol` times the largest input norm.
pub fn householder_basis(n: usize, cols: &[Vec<f64>], rel_tol: f64) -> Vec<Vec<f64>> {
    let mut a: Vec<Vec<f64>> = cols.to_vec();
    let scale = a.iter().map(|c| norm(c)).fold(0.0, f64::max);
    let mut reflectors: Vec<Vec<f64>> = Vec::new();
    for k in 0..a.len().min(n) {
        let (p, best) = (k..a.len())
            .map(|j| (j, norm(&a[j][k..])))
            .fold((k, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
        if scale == 0.0 || best <= rel_tol * scale {
            break;
        }
        a.swap(k, p);
        let x = &a[k][k..];
        let alpha = if x[0] >= 0.0 { -best } else { best };
        let mut v = x.to_vec();
        v[0] -= alpha;
        let vn = norm(&v);
        if vn == 0.0 {
            break;
        }
        v.iter_mut().for_each(|e| *e /= vn);
        for col in a.iter_mut().skip(k) {
            let s = 2.0 * dot(&v, &col[k..]);
            for (c, vi) in col[k..].iter_mut().zip(&v) {
                *c -= s * vi;
            }
        }
        reflectors.push(v);
    }
    // Q e_i = H_0 H_1 ... H_{r-1} e_i
    (0..reflectors.len())
        .map(|i| {
            let mut q = vec![0.0; n];
            q[i] = 1.0;
            for (k, v) in reflectors.iter().enumerate().rev() {
                let s = 2.0 * dot(v, &q[k..]);
                for (c, vi) in q[k..].iter_mut().zip(v) {
                    *c -= s * vi;
                }
            }
            q
        })
        .collect()
}

/// `x` minus its component in the span of the orthonormal `basis`.
pub fn project_out(basis: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    let mut r = x.to_vec();
    for q in basis {
        let c = dot(q, x);
        r.iter_mut().zip(q).for_each(|(ri, qi)| *ri -= c * qi);
    }
    r
}

/// Task-specific columns `gᵢ − mean`, computed directly.
pub fn deviations(old: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = old[0].len();
    let m = old.len() as f64;
    let mut mean = vec![0.0; n];
    for o in old {
        mean.iter_mut().zip(o).for_each(|(a, b)| *a += b / m);
    }
    let dev = old.iter().map(|o| sub(o, &mean)).collect();
    (mean, dev)
}

/// Exact minimiser of ½‖w − g‖² subject to `Ĝᵀw = 0` and `ḡᵀw ≥ 0`.
///
/// Convex problem with one inequality: either the equality-only optimum is
/// feasible, or the inequality is active and the answer is the projection of
/// `g` onto the complement of `span(Ĝ, ḡ)`.
pub fn reference_update(g: &[f64], old: &[Vec<f64>], rel_tol: f64) -> Vec<f64> {
    let n = g.len();
    let (mean, dev) = deviations(old);
    let q = householder_basis(n, &dev, rel_tol);
    let free = project_out(&q, g);
    if dot(&mean, &free) >= 0.0 {
        return free;
    }
    let mut cols = dev;
    cols.push(mean);
    project_out(&householder_basis(n, &cols, rel_tol), g)
}

/// Random old-task gradients; about half the draws give a new gradient that
/// points against their mean.
pub fn random_problem(
    rng: &mut ChaCha8Rng,
    dim: usize,
    memories: usize,
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let old: Vec<Vec<f64>> = (0..memories).map(|_| gaussian(rng, dim)).collect();
    let mut g = gaussian(rng, dim);
    if rng.random_bool(0.5) {
        let (mean, _) = deviations(&old);
        let c = rng.random_range(1.0..4.0);
        g.iter_mut().zip(&mean).for_each(|(a, b)| *a -= c * b);
    }
    (g, old)
}

pub fn random_batch(rng: &mut ChaCha8Rng, n: usize, dim: usize, classes: usize) -> Batch {
    let inputs = gaussian(rng, n * dim);
    let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
    Batch::new(inputs, dim, labels).unwrap()
}

/// Model with every parameter jittered, so no hidden unit sits exactly on
/// the ReLU kink (zero biases plus identical inputs would put it there).
pub fn jittered_model(
    sizes: &[usize],
    seed: u64,
    granularity: layergrad::LayerGranularity,
) -> MlpModel {
    let mut m = MlpModel::new(sizes, seed, granularity).unwrap();
    let mut r = rng(seed ^ 0x5eed);
    for p in m.params_mut().iter_mut() {
        *p += 0.1 * r.sample::<f64, _>(StandardNormal);
    }
    m
}

/// Central differences of the loss, one parameter at a time.
pub fn numeric_gradient(model: &MlpModel, batch: &Batch, h: f64) -> Vec<f64> {
    let mut probe = model.clone();
    (0..model.params().len())
        .map(|i| {
            let orig = model.params()[i];
            probe.params_mut()[i] = orig + h;
            let up = probe.loss(batch, None).unwrap();
            probe.params_mut()[i] = orig - h;
            let down = probe.loss(batch, None).unwrap();
            probe.params_mut()[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}
