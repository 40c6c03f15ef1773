//! Shared helpers for unit tests: deterministic RNGs, tolerance asserts, and
//! finite-difference oracles that only ever call scalar closures.

use nalgebra::DMatrix;
use rand_chacha::ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}

/// |a - b| <= atol + rtol * max(|a|, |b|), with a readable failure message.
pub fn assert_close(a: f64, b: f64, rtol: f64, atol: f64, what: &str) {
    let tol = atol + rtol * a.abs().max(b.abs());
    assert!(
        (a - b).abs() <= tol,
        "{what}: {a} vs {b} (diff {:.3e}, tol {:.3e})",
        (a - b).abs(),
        tol
    );
}

/// Central-difference gradient with per-coordinate steps scaled by magnitude.
pub fn central_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], rel_step: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let h = rel_step * (1.0 + x[i].abs());
        probe[i] = x[i] + h;
        let hi = f(&probe);
        probe[i] = x[i] - h;
        let lo = f(&probe);
        probe[i] = x[i];
        grad[i] = (hi - lo) / (2.0 * h);
    }
    grad
}

/// Central-difference Hessian built from function values only.
pub fn central_hess(f: impl Fn(&[f64]) -> f64, x: &[f64], rel_step: f64) -> DMatrix<f64> {
    let n = x.len();
    let mut hess = DMatrix::zeros(n, n);
    let mut probe = x.to_vec();
    let f0 = f(x);
    let step = |i: usize| rel_step * (1.0 + x[i].abs());
    for i in 0..n {
        let hi = step(i);
        probe[i] = x[i] + hi;
        let fp = f(&probe);
        probe[i] = x[i] - hi;
        let fm = f(&probe);
        probe[i] = x[i];
        hess[(i, i)] = (fp - 2.0 * f0 + fm) / (hi * hi);
        for j in (i + 1)..n {
            let hj = step(j);
            probe[i] = x[i] + hi;
            probe[j] = x[j] + hj;
            let pp = f(&probe);
            probe[j] = x[j] - hj;
            let pm = f(&probe);
            probe[i] = x[i] - hi;
            let mm = f(&probe);
            probe[j] = x[j] + hj;
            let mp = f(&probe);
            probe[i] = x[i];
            probe[j] = x[j];
            let v = (pp - pm - mp + mm) / (4.0 * hi * hj);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    hess
}
