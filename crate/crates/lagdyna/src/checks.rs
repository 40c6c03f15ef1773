//! Self-contained numerical invariant checks, runnable outside the test
//! harness. Each one compares an implementation against an independent
//! oracle (central differences, a closed-form filter, an analytic
//! mechanical system) and reports pass/fail with the measured error, so a
//! binary can audit its own numerics on any machine.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::envs::PendulumParams;
use crate::error::Result;
use crate::integrate::{rk2_step, RkCoefficients};
use crate::lnn::{accel, accel_jac_weights, AnalyticLagrangian, GeneralizedState};
use crate::nn::{Activation, ForwardCache, NetworkArch, ScalarNetwork};
use crate::optim::GaussianWeightBelief;

/// Result of one named check.
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: &'static str, pass: bool, detail: String) -> Self {
        CheckOutcome { name, pass, detail }
    }
}

/// Scale-normalized worst-case disagreement between two vectors.
fn rel_err(got: &[f64], want: &[f64]) -> f64 {
    let scale = 1e-9 + want.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    got.iter()
        .zip(want)
        .fold(0.0f64, |m, (g, w)| m.max((g - w).abs()))
        / scale
}

fn fd_grad(f: &mut impl FnMut(&[f64]) -> Result<f64>, x: &[f64], h: f64) -> Result<Vec<f64>> {
    let mut g = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let step = h * (1.0 + x[i].abs());
        xp[i] = x[i] + step;
        let fp = f(&xp)?;
        xp[i] = x[i] - step;
        let fm = f(&xp)?;
        xp[i] = x[i];
        g[i] = (fp - fm) / (2.0 * step);
    }
    Ok(g)
}

fn fd_hess(f: &mut impl FnMut(&[f64]) -> Result<f64>, x: &[f64], h: f64) -> Result<DMatrix<f64>> {
    let n = x.len();
    let mut hess = DMatrix::zeros(n, n);
    let mut xp = x.to_vec();
    let eval = |xp: &mut Vec<f64>, i: usize, j: usize, si: f64, sj: f64, f: &mut dyn FnMut(&[f64]) -> Result<f64>| -> Result<f64> {
        xp[i] += si;
        xp[j] += sj;
        let v = f(xp);
        xp[i] = x[i];
        xp[j] = x[j];
        v
    };
    for i in 0..n {
        let hi = h * (1.0 + x[i].abs());
        for j in 0..n {
            let hj = h * (1.0 + x[j].abs());
            let pp = eval(&mut xp, i, j, hi, hj, f)?;
            let pm = eval(&mut xp, i, j, hi, -hj, f)?;
            let mp = eval(&mut xp, i, j, -hi, hj, f)?;
            let mm = eval(&mut xp, i, j, -hi, -hj, f)?;
            hess[(i, j)] = (pp - pm - mp + mm) / (4.0 * hi * hj);
        }
    }
    Ok(hess)
}

fn random_net(rng: &mut ChaCha8Rng, input_dim: usize) -> ScalarNetwork {
    let widths: [&[usize]; 3] = [&[8], &[6, 6], &[10, 4]];
    let hidden = widths[rng.random_range(0..widths.len())];
    let activation = if rng.random_bool(0.5) {
        Activation::Softplus
    } else {
        Activation::Tanh
    };
    let arch = NetworkArch::mlp(input_dim, hidden, activation).expect("static arch");
    ScalarNetwork::init(arch, rng)
}

/// Exact derivatives of random networks against central differences:
/// input gradient and weight gradient within 1e-5, input Hessian within
/// 1e-4, over at least `nets` random networks and inputs.
pub fn input_derivative_check(seed: u64, nets: usize) -> CheckOutcome {
    const NAME: &str = "input-derivative-oracle";
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst_grad = 0.0f64;
    let mut worst_hess = 0.0f64;
    let mut worst_wgrad = 0.0f64;
    for _ in 0..nets {
        let mut net = random_net(&mut rng, 2);
        let x: Vec<f64> = (0..2).map(|_| rng.random_range(-1.5..1.5)).collect();

        let (grad, hess) = match (net.grad_x(&x), net.hess_x(&x)) {
            (Ok(g), Ok(h)) => (g, h),
            (Err(e), _) | (_, Err(e)) => return CheckOutcome::new(NAME, false, e.to_string()),
        };
        let mut f = |x: &[f64]| net.forward(x);
        let fd_g = match fd_grad(&mut f, &x, 1e-6) {
            Ok(g) => g,
            Err(e) => return CheckOutcome::new(NAME, false, e.to_string()),
        };
        let fd_h = match fd_hess(&mut f, &x, 1e-4) {
            Ok(h) => h,
            Err(e) => return CheckOutcome::new(NAME, false, e.to_string()),
        };
        worst_grad = worst_grad.max(rel_err(&grad, &fd_g));
        worst_hess = worst_hess.max(rel_err(hess.as_slice(), fd_h.as_slice()));

        // The weight gradient drives every trainer; oracle it too.
        let mut cache = ForwardCache::new(net.arch());
        if let Err(e) = net.forward_cached(&x, &mut cache) {
            return CheckOutcome::new(NAME, false, e.to_string());
        }
        let mut wgrad = vec![0.0; net.param_count()];
        net.backprop_weights(&x, &cache, 1.0, &mut wgrad);
        let base = net.weights().to_vec();
        let mut fw = |w: &[f64]| -> Result<f64> {
            net.set_weights(w)?;
            net.forward(&x)
        };
        let fd_w = match fd_grad(&mut fw, &base, 1e-6) {
            Ok(g) => g,
            Err(e) => return CheckOutcome::new(NAME, false, e.to_string()),
        };
        net.set_weights(&base).expect("restore weights");
        worst_wgrad = worst_wgrad.max(rel_err(&wgrad, &fd_w));
    }
    let pass = worst_grad <= 1e-5 && worst_wgrad <= 1e-5 && worst_hess <= 1e-4;
    CheckOutcome::new(
        NAME,
        pass,
        format!(
            "max rel err over {nets} nets: input grad {worst_grad:.3e}, weight grad {worst_wgrad:.3e} (tol 1e-5), hess {worst_hess:.3e} (tol 1e-4)"
        ),
    )
}

/// The acceleration operator's weight Jacobian against central differences
/// through the whole damped solve, within 1e-3.
pub fn operator_jacobian_check(seed: u64, nets: usize) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..nets {
        let mut net = random_net(&mut rng, 2);
        let state = GeneralizedState::scalar(
            rng.random_range(-1.5..1.5),
            rng.random_range(-1.5..1.5),
        );
        let force = vec![rng.random_range(-1.0..1.0)];

        let jac = match accel_jac_weights(&net, &state, &force) {
            Ok((_, j)) => j,
            Err(e) => return CheckOutcome::new("operator-weight-jacobian", false, e.to_string()),
        };
        let base = net.weights().to_vec();
        let mut f = |w: &[f64]| -> Result<f64> {
            net.set_weights(w)?;
            Ok(accel(&net, &state, &force)?[0])
        };
        let fd = match fd_grad(&mut f, &base, 1e-6) {
            Ok(g) => g,
            Err(e) => return CheckOutcome::new("operator-weight-jacobian", false, e.to_string()),
        };
        net.set_weights(&base).expect("restore weights");
        let row: Vec<f64> = jac.row(0).iter().copied().collect();
        worst = worst.max(rel_err(&row, &fd));
    }
    let pass = worst <= 1e-3;
    CheckOutcome::new(
        "operator-weight-jacobian",
        pass,
        format!("max rel err over {nets} nets: {worst:.3e} (tol 1e-3)"),
    )
}

/// The operator applied to closed-form pendulum Lagrangians must reproduce
/// the textbook accelerations on a 100-point grid to 1e-6: the point-mass
/// form q'' = (a + mgl sin q) / (ml^2) and the rigid-rod form the
/// environment integrates.
pub fn analytic_pendulum_check() -> CheckOutcome {
    let params = PendulumParams::default();
    let (m, l, g) = (params.mass, params.length, params.gravity);
    let point = AnalyticLagrangian::point_pendulum(m, l, g);
    let rod = AnalyticLagrangian::rod_pendulum(m, l, g);
    let mut worst_point = 0.0f64;
    let mut worst_rod = 0.0f64;
    for i in 0..100 {
        let q = -3.0 + 6.0 * (i as f64) / 99.0;
        let qdot = 2.0 * ((i % 10) as f64) / 9.0 - 1.0;
        let a = params.torque_limit * (2.0 * ((i % 7) as f64) / 6.0 - 1.0);
        let state = GeneralizedState::scalar(q, qdot);
        let eval = |model: &AnalyticLagrangian| -> std::result::Result<f64, String> {
            accel(model, &state, &[a]).map(|v| v[0]).map_err(|e| e.to_string())
        };
        match (eval(&point), eval(&rod)) {
            (Ok(got_point), Ok(got_rod)) => {
                let want_point = (a + m * g * l * q.sin()) / (m * l * l);
                worst_point = worst_point.max((got_point - want_point).abs());
                worst_rod = worst_rod.max((got_rod - params.accel(q, a)).abs());
            }
            (Err(e), _) | (_, Err(e)) => {
                return CheckOutcome::new("analytic-pendulum-operator", false, e)
            }
        }
    }
    let worst = worst_point.max(worst_rod);
    CheckOutcome::new(
        "analytic-pendulum-operator",
        worst <= 1e-6,
        format!(
            "max abs err on 100-point grid: point-mass {worst_point:.3e}, rod {worst_rod:.3e} (tol 1e-6)"
        ),
    )
}

/// Integrator order: exact on constant acceleration (to 1e-12) and
/// empirical convergence order on a harmonic oscillator within [1.9, 2.1].
/// Handing this check first-order coefficients must make it fail.
pub fn rk_order_check(coeffs: &RkCoefficients) -> CheckOutcome {
    // Constant acceleration: one step must land on the parabola exactly.
    let mut const_acc = |_: &GeneralizedState| Ok(vec![2.0]);
    let start = GeneralizedState::scalar(1.0, -0.5);
    let dt = 0.3;
    let stepped = match rk2_step(&mut const_acc, &start, dt, coeffs) {
        Ok(s) => s,
        Err(e) => return CheckOutcome::new("rk-order", false, e.to_string()),
    };
    let exact_q = 1.0 - 0.5 * dt + 0.5 * 2.0 * dt * dt;
    let exact_v = -0.5 + 2.0 * dt;
    let const_err = (stepped.q[0] - exact_q)
        .abs()
        .max((stepped.qdot[0] - exact_v).abs());

    // Harmonic oscillator to t=1: halving the step should cut the global
    // error by ~4 for a second-order method.
    let endpoint_err = |steps: usize| -> Result<f64> {
        let mut s = GeneralizedState::scalar(1.0, 0.0);
        let h = 1.0 / steps as f64;
        let mut f = |s: &GeneralizedState| Ok(vec![-s.q[0]]);
        for _ in 0..steps {
            s = rk2_step(&mut f, &s, h, coeffs)?;
        }
        Ok((s.q[0] - 1.0f64.cos())
            .abs()
            .max((s.qdot[0] + 1.0f64.sin()).abs()))
    };
    let (e1, e2) = match (endpoint_err(64), endpoint_err(128)) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => {
            return CheckOutcome::new("rk-order", false, e.to_string())
        }
    };
    let order = (e1 / e2).log2();
    let pass = const_err <= 1e-12 && (1.9..=2.1).contains(&order);
    CheckOutcome::new(
        "rk-order",
        pass,
        format!(
            "constant-accel err {const_err:.3e} (tol 1e-12), empirical order {order:.3} (window [1.9, 2.1])"
        ),
    )
}

/// The weight-belief filter against a separately written textbook Kalman
/// filter (Joseph-form update) on a linear problem: 50 steps, agreement
/// within 1e-8 on both mean and covariance.
pub fn kalman_equivalence_check(seed: u64) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = 3;
    let q = 1e-6;
    let r = 0.05;
    let truth: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();

    let mut belief = match GaussianWeightBelief::new(&vec![0.0; dim], 0.1, q, r) {
        Ok(b) => b,
        Err(e) => return CheckOutcome::new("kalman-equivalence", false, e.to_string()),
    };
    // Reference filter state.
    let mut x = DVector::zeros(dim);
    let mut p = DMatrix::identity(dim, dim) * 0.1;

    let mut worst = 0.0f64;
    for step in 0..50 {
        let h_row: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let noise: f64 = rng.random_range(-0.1..0.1);
        let y = h_row.iter().zip(&truth).map(|(h, t)| h * t).sum::<f64>() + noise;

        // Textbook predict/update with the Joseph-form covariance.
        p += DMatrix::identity(dim, dim) * q;
        let h = DMatrix::from_row_slice(1, dim, &h_row);
        let s = (&h * &p * h.transpose())[(0, 0)] + r;
        let k = &p * h.transpose() / s;
        let innovation = y - (&h * &x)[(0, 0)];
        x += &k * innovation;
        let ikh = DMatrix::identity(dim, dim) - &k * &h;
        p = &ikh * &p * ikh.transpose() + &k * r * k.transpose();

        belief.predict();
        let resid = DVector::from_element(1, y - h_row
            .iter()
            .zip(belief.mean())
            .map(|(hi, m)| hi * m)
            .sum::<f64>());
        if let Err(e) = belief.update(&h, &resid) {
            return CheckOutcome::new(
                "kalman-equivalence",
                false,
                format!("step {step}: {e}"),
            );
        }

        for i in 0..dim {
            worst = worst.max((belief.mean()[i] - x[i]).abs());
            for j in 0..dim {
                worst = worst.max((belief.cov()[(i, j)] - p[(i, j)]).abs());
            }
        }
    }
    CheckOutcome::new(
        "kalman-equivalence",
        worst <= 1e-8,
        format!("max abs deviation over 50 steps: {worst:.3e} (tol 1e-8)"),
    )
}

/// Symmetry and positive semidefiniteness (eigenvalues above -1e-8) of a
/// covariance matrix. Asymmetric input must fail.
pub fn psd_check(m: &DMatrix<f64>) -> CheckOutcome {
    if m.nrows() != m.ncols() {
        return CheckOutcome::new("covariance-psd", false, "matrix is not square".into());
    }
    let mut asym = 0.0f64;
    for i in 0..m.nrows() {
        for j in 0..i {
            asym = asym.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    if asym > 0.0 {
        return CheckOutcome::new(
            "covariance-psd",
            false,
            format!("asymmetry {asym:.3e} (must be exactly 0)"),
        );
    }
    let min_eig = m
        .clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .fold(f64::INFINITY, |a, &b| a.min(b));
    CheckOutcome::new(
        "covariance-psd",
        min_eig >= -1e-8,
        format!("min eigenvalue {min_eig:.3e} (tol -1e-8)"),
    )
}

/// Drive the weight filter through random updates and audit its posterior.
pub fn filter_posture_check(seed: u64) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = 6;
    let mut belief = match GaussianWeightBelief::new(&vec![0.0; dim], 0.1, 1e-6, 0.05) {
        Ok(b) => b,
        Err(e) => return CheckOutcome::new("covariance-psd", false, e.to_string()),
    };
    for _ in 0..100 {
        belief.predict();
        let row: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let jac = DMatrix::from_row_slice(1, dim, &row);
        let resid = DVector::from_element(1, rng.random_range(-1.0..1.0));
        if let Err(e) = belief.update(&jac, &resid) {
            return CheckOutcome::new("covariance-psd", false, e.to_string());
        }
    }
    psd_check(belief.cov())
}

/// Run every check, including the negative controls (a first-order
/// integrator and an asymmetric covariance, both of which must be caught).
pub fn run_all(seed: u64) -> Vec<CheckOutcome> {
    let mut outcomes = vec![
        input_derivative_check(seed, 10),
        operator_jacobian_check(seed.wrapping_add(1), 10),
        analytic_pendulum_check(),
        rk_order_check(&RkCoefficients::default()),
        kalman_equivalence_check(seed.wrapping_add(2)),
        filter_posture_check(seed.wrapping_add(3)),
    ];

    let first_order = RkCoefficients {
        c: 2.0 / 3.0,
        b1: 0.5,
        b2: 0.5,
    };
    let inner = rk_order_check(&first_order);
    outcomes.push(CheckOutcome::new(
        "rk-order-negative-control",
        !inner.pass,
        format!("first-order coefficients correctly rejected ({})", inner.detail),
    ));

    let mut bad = DMatrix::identity(3, 3);
    bad[(0, 1)] = 0.5;
    let inner = psd_check(&bad);
    outcomes.push(CheckOutcome::new(
        "covariance-psd-negative-control",
        !inner.pass,
        format!("asymmetric matrix correctly rejected ({})", inner.detail),
    ));

    outcomes
}
