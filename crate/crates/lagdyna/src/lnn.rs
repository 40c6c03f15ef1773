//! The Lagrangian-to-acceleration operator.
//!
//! A model here is any twice-differentiable scalar function L(q, q-dot) of a
//! mechanical state. Forced Euler-Lagrange dynamics turn it into an
//! acceleration field:
//!
//! ```text
//! qdd = [d2L/dqd dqd]^-1 (f + dL/dq - [d2L/dqd dq] qd)
//! ```
//!
//! The velocity Hessian is damped with a small Tikhonov term before
//! inversion so that early, badly-scaled networks still produce finite
//! accelerations; one step of iterative refinement then removes the damping
//! bias (O(eps^2) instead of O(eps)) wherever the system is well conditioned.
//! Hopelessly conditioned systems are reported as errors instead.
//!
//! For network-backed models the module also differentiates the operator
//! with respect to the weights, which is what both the filter-based trainer
//! (measurement Jacobians) and gradient training (loss gradients) consume.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{DerivTrace, NetworkArch, ScalarNetwork};

/// Tikhonov damping added to the velocity Hessian before solving.
pub const VELOCITY_HESSIAN_DAMPING: f64 = 1e-6;

/// Condition-estimate ceiling beyond which dynamics count as singular.
pub const CONDITION_LIMIT: f64 = 1e12;

/// Generalized force/torque vector, one component per degree of freedom.
pub type Force = Vec<f64>;

/// Positions and velocities of an n-degree-of-freedom system.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneralizedState {
    pub q: Vec<f64>,
    pub qdot: Vec<f64>,
}

impl GeneralizedState {
    pub fn new(q: Vec<f64>, qdot: Vec<f64>) -> Self {
        assert_eq!(q.len(), qdot.len(), "position/velocity length mismatch");
        GeneralizedState { q, qdot }
    }

    /// Scalar-system convenience constructor.
    pub fn scalar(q: f64, qdot: f64) -> Self {
        GeneralizedState {
            q: vec![q],
            qdot: vec![qdot],
        }
    }

    pub fn dof(&self) -> usize {
        self.q.len()
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().chain(self.qdot.iter()).all(|v| v.is_finite())
    }

    /// Concatenated (q, qdot) vector, the input layout every model expects.
    pub fn to_input(&self) -> Vec<f64> {
        let mut x = Vec::with_capacity(2 * self.q.len());
        x.extend_from_slice(&self.q);
        x.extend_from_slice(&self.qdot);
        x
    }
}

/// A twice-differentiable scalar function of the concatenated state.
///
/// Callers guarantee `x.len() == input_dim()` with finite entries.
pub trait LagrangianModel {
    fn input_dim(&self) -> usize;
    fn value(&self, x: &[f64]) -> f64;
    fn grad_x(&self, x: &[f64]) -> Vec<f64>;
    /// Must be symmetric.
    fn hess_x(&self, x: &[f64]) -> DMatrix<f64>;

    fn dof(&self) -> usize {
        self.input_dim() / 2
    }
}

impl LagrangianModel for ScalarNetwork {
    fn input_dim(&self) -> usize {
        ScalarNetwork::input_dim(self)
    }

    fn value(&self, x: &[f64]) -> f64 {
        self.forward(x).expect("validated input")
    }

    fn grad_x(&self, x: &[f64]) -> Vec<f64> {
        ScalarNetwork::grad_x(self, x).expect("validated input")
    }

    fn hess_x(&self, x: &[f64]) -> DMatrix<f64> {
        ScalarNetwork::hess_x(self, x).expect("validated input")
    }
}

/// Closed-form Lagrangian given by closures, used as ground truth in tests
/// and self-checks.
pub struct AnalyticLagrangian {
    dof: usize,
    value: Box<dyn Fn(&[f64]) -> f64 + Send + Sync>,
    grad: Box<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>,
    hess: Box<dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync>,
}

impl AnalyticLagrangian {
    pub fn new(
        dof: usize,
        value: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        grad: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
        hess: impl Fn(&[f64]) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        AnalyticLagrangian {
            dof,
            value: Box::new(value),
            grad: Box::new(grad),
            hess: Box::new(hess),
        }
    }

    /// Point mass on a massless rod, angle measured from upright:
    /// L = 1/2 m l^2 qd^2 - m g l cos q, so qdd = (f + m g l sin q)/(m l^2).
    pub fn point_pendulum(m: f64, l: f64, g: f64) -> Self {
        let inertia = m * l * l;
        let weight = m * g * l;
        AnalyticLagrangian::new(
            1,
            move |x| 0.5 * inertia * x[1] * x[1] - weight * x[0].cos(),
            move |x| vec![weight * x[0].sin(), inertia * x[1]],
            move |x| DMatrix::from_row_slice(2, 2, &[weight * x[0].cos(), 0.0, 0.0, inertia]),
        )
    }

    /// Uniform rod pivoted at one end, angle from upright. Matches the
    /// classic swing-up task: qdd = 3g/(2l) sin q + 3/(m l^2) f.
    pub fn rod_pendulum(m: f64, l: f64, g: f64) -> Self {
        let inertia = m * l * l / 3.0;
        let weight = m * g * l / 2.0;
        AnalyticLagrangian::new(
            1,
            move |x| 0.5 * inertia * x[1] * x[1] - weight * x[0].cos(),
            move |x| vec![weight * x[0].sin(), inertia * x[1]],
            move |x| DMatrix::from_row_slice(2, 2, &[weight * x[0].cos(), 0.0, 0.0, inertia]),
        )
    }

    /// L = 1/2 m qd^2 - 1/2 k q^2, so qdd = (f - k q)/m.
    pub fn harmonic_oscillator(k: f64, m: f64) -> Self {
        AnalyticLagrangian::new(
            1,
            move |x| 0.5 * m * x[1] * x[1] - 0.5 * k * x[0] * x[0],
            move |x| vec![-k * x[0], m * x[1]],
            move |_| DMatrix::from_row_slice(2, 2, &[-k, 0.0, 0.0, m]),
        )
    }
}

impl LagrangianModel for AnalyticLagrangian {
    fn input_dim(&self) -> usize {
        2 * self.dof
    }

    fn value(&self, x: &[f64]) -> f64 {
        (self.value)(x)
    }

    fn grad_x(&self, x: &[f64]) -> Vec<f64> {
        (self.grad)(x)
    }

    fn hess_x(&self, x: &[f64]) -> DMatrix<f64> {
        (self.hess)(x)
    }
}

/// Default probe-average velocity curvature targeted by
/// [`init_calibrated_lagrangian`]; matches the inertia scale of the
/// benchmark plant (order one).
pub const CALIBRATED_CURVATURE: f64 = 1.0;

/// Uniform grid of single-DoF states covering `[-q_max, q_max] x
/// [-qdot_max, qdot_max]`, used to probe curvature over the training domain.
pub fn probe_grid(q_max: f64, qdot_max: f64, per_axis: usize) -> Vec<GeneralizedState> {
    let axis = |hi: f64, i: usize| -hi + 2.0 * hi * i as f64 / (per_axis - 1).max(1) as f64;
    let mut states = Vec::with_capacity(per_axis * per_axis);
    for i in 0..per_axis {
        for j in 0..per_axis {
            states.push(GeneralizedState::scalar(axis(q_max, i), axis(qdot_max, j)));
        }
    }
    states
}

/// Probe-average of the velocity block's mean diagonal curvature,
/// (1/|probes|) sum trace(d2L/dqd dqd)/dof.
pub fn velocity_curvature<M: LagrangianModel + ?Sized>(
    model: &M,
    probes: &[GeneralizedState],
) -> Result<f64> {
    if probes.is_empty() {
        return Err(Error::invalid("curvature probes", "need at least one state"));
    }
    let d = model.dof();
    let mut total = 0.0;
    for s in probes {
        if s.dof() != d {
            return Err(Error::ShapeMismatch {
                what: "curvature probe state",
                expected: d,
                got: s.dof(),
            });
        }
        let h = model.hess_x(&s.to_input());
        for k in 0..d {
            total += h[(d + k, d + k)];
        }
    }
    Ok(total / (probes.len() * d) as f64)
}

/// Randomly initialize a Lagrangian network whose velocity curvature starts
/// at a physically plausible scale.
///
/// The acceleration operator divides by the velocity Hessian, and a freshly
/// drawn network's probe-average curvature is small with a random sign, so
/// training would start next to a pole of the loss surface. This draws
/// `candidates` networks, keeps the one whose probe-average curvature has the
/// largest magnitude, and rescales its output layer so the average equals
/// `target` exactly (flipping the sign if needed).
pub fn init_calibrated_lagrangian<R: Rng + ?Sized>(
    arch: &NetworkArch,
    probes: &[GeneralizedState],
    target: f64,
    candidates: usize,
    rng: &mut R,
) -> Result<ScalarNetwork> {
    if candidates == 0 {
        return Err(Error::invalid("init candidates", "need at least one draw"));
    }
    if !(target.is_finite() && target > 0.0) {
        return Err(Error::invalid(
            "curvature target",
            format!("must be finite and positive, got {target}"),
        ));
    }

    let mut best: Option<(f64, ScalarNetwork)> = None;
    for _ in 0..candidates {
        let net = ScalarNetwork::init(arch.clone(), rng);
        let curv = velocity_curvature(&net, probes)?;
        if best.as_ref().is_none_or(|(c, _)| curv.abs() > c.abs()) {
            best = Some((curv, net));
        }
    }
    let (curv, mut net) = best.expect("candidates >= 1");

    // Output layer is linear, so scaling its weights and bias scales the
    // whole function and with it every derivative, curvature included.
    let scale = if curv.abs() > 1e-9 {
        (target / curv).clamp(-1e6, 1e6)
    } else {
        1.0
    };
    let widths = arch.widths();
    let tail = widths[widths.len() - 2] + 1;
    let mut weights = net.weights().to_vec();
    let start = weights.len() - tail;
    for w in &mut weights[start..] {
        *w *= scale;
    }
    net.set_weights(&weights)?;
    Ok(net)
}

/// One supervised regression sample: a state, the applied generalized force,
/// and the acceleration the system actually showed.
#[derive(Debug, Clone, PartialEq)]
pub struct AccelSample {
    pub state: GeneralizedState,
    pub force: Vec<f64>,
    pub target: Vec<f64>,
}

fn check_state_force(
    model_dim: usize,
    state: &GeneralizedState,
    force: &[f64],
) -> Result<()> {
    if model_dim % 2 != 0 {
        return Err(Error::invalid(
            "lagrangian model",
            format!("input dimension {model_dim} is not 2n"),
        ));
    }
    let n = model_dim / 2;
    if state.dof() != n {
        return Err(Error::ShapeMismatch {
            what: "state degrees of freedom",
            expected: n,
            got: state.dof(),
        });
    }
    if force.len() != n {
        return Err(Error::ShapeMismatch {
            what: "generalized force",
            expected: n,
            got: force.len(),
        });
    }
    if !state.is_finite() {
        return Err(Error::NonFinite("state"));
    }
    if !force.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("force"));
    }
    Ok(())
}

/// Factored, damped velocity Hessian plus the pieces of the solve that the
/// weight-space backward pass reuses.
struct OperatorParts {
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    z0: DVector<f64>,
    acc: DVector<f64>,
}

/// Shared core: given the model's gradient and (symmetrized) Hessian at a
/// state, run the damped-and-refined solve.
fn operator_parts(
    grad: &[f64],
    hess_sym: &DMatrix<f64>,
    state: &GeneralizedState,
    force: &[f64],
) -> Result<OperatorParts> {
    let n = state.dof();
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            m[(i, j)] = hess_sym[(n + i, n + j)];
        }
        m[(i, i)] += VELOCITY_HESSIAN_DAMPING;
    }

    let eig = m.clone().symmetric_eigen().eigenvalues;
    let max_abs = eig.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    let min_abs = eig.iter().fold(f64::INFINITY, |a, &v| a.min(v.abs()));
    let cond = if min_abs > 0.0 {
        max_abs / min_abs
    } else {
        f64::INFINITY
    };
    if !cond.is_finite() || cond > CONDITION_LIMIT {
        return Err(Error::SingularDynamics { cond });
    }

    let mut rhs = DVector::zeros(n);
    for i in 0..n {
        let mut r = force[i] + grad[i];
        for j in 0..n {
            r -= hess_sym[(n + i, j)] * state.qdot[j];
        }
        rhs[i] = r;
    }

    let lu = m.lu();
    let z0 = lu
        .solve(&rhs)
        .ok_or(Error::SingularDynamics { cond })?;
    // One refinement pass cancels the O(eps) damping bias.
    let acc = lu
        .solve(&(rhs + VELOCITY_HESSIAN_DAMPING * &z0))
        .ok_or(Error::SingularDynamics { cond })?;
    if !acc.iter().all(|v| v.is_finite()) {
        return Err(Error::SingularDynamics { cond });
    }
    Ok(OperatorParts { lu, z0, acc })
}

fn symmetrized(h: &DMatrix<f64>) -> DMatrix<f64> {
    let mut s = h.clone();
    for i in 0..h.nrows() {
        for j in 0..h.ncols() {
            s[(i, j)] = 0.5 * (h[(i, j)] + h[(j, i)]);
        }
    }
    s
}

/// Acceleration of the forced Euler-Lagrange dynamics under `model`.
pub fn accel<M: LagrangianModel + ?Sized>(
    model: &M,
    state: &GeneralizedState,
    force: &[f64],
) -> Result<Vec<f64>> {
    check_state_force(model.input_dim(), state, force)?;
    let x = state.to_input();
    let grad = model.grad_x(&x);
    let hess = symmetrized(&model.hess_x(&x));
    let parts = operator_parts(&grad, &hess, state, force)?;
    Ok(parts.acc.as_slice().to_vec())
}

/// Adjoint seeds (w.r.t. the model's input gradient and Hessian) of the
/// scalar `accbar . acc`. Shared by the Jacobian and the loss gradient.
fn accel_adjoint_seeds(
    parts: &OperatorParts,
    state: &GeneralizedState,
    accbar: &DVector<f64>,
    gbar: &mut [f64],
    hbar: &mut [f64],
) {
    let n = state.dof();
    let d = 2 * n;
    gbar.fill(0.0);
    hbar.fill(0.0);

    // acc = M^-1 (rhs + eps z0), z0 = M^-1 rhs, M symmetric.
    let lambda1 = parts.lu.solve(accbar).expect("factorized");
    let zbar = VELOCITY_HESSIAN_DAMPING * &lambda1;
    let lambda2 = parts.lu.solve(&zbar).expect("factorized");

    // rhs_i = f_i + grad_i - sum_j H[n+i, j] qdot_j
    // M_ij  = H[n+i, n+j] + eps delta_ij
    for i in 0..n {
        let rbar = lambda1[i] + lambda2[i];
        gbar[i] = rbar;
        for j in 0..n {
            hbar[(n + i) * d + j] -= rbar * state.qdot[j];
            hbar[(n + i) * d + (n + j)] -=
                lambda1[i] * parts.acc[j] + lambda2[i] * parts.z0[j];
        }
    }

    // The forward pass only reads the symmetric part of the Hessian, so
    // split each adjoint entry across the two mirrored slots.
    for r in 0..d {
        for c in (r + 1)..d {
            let v = 0.5 * (hbar[r * d + c] + hbar[c * d + r]);
            hbar[r * d + c] = v;
            hbar[c * d + r] = v;
        }
    }
}

/// Acceleration plus its Jacobian with respect to the network weights
/// (`dof` rows, one per acceleration component; `param_count` columns).
pub fn accel_jac_weights(
    net: &ScalarNetwork,
    state: &GeneralizedState,
    force: &[f64],
) -> Result<(Vec<f64>, DMatrix<f64>)> {
    check_state_force(net.input_dim(), state, force)?;
    let n = state.dof();
    let d = 2 * n;
    let x = state.to_input();
    let mut trace = DerivTrace::new(net.arch());
    net.eval_with_derivs(&x, &mut trace)?;
    let hess = symmetrized(&trace.hess_matrix());
    let parts = operator_parts(trace.grad(), &hess, state, force)?;

    let mut jac = DMatrix::zeros(n, net.param_count());
    let mut gbar = vec![0.0; d];
    let mut hbar = vec![0.0; d * d];
    let mut row = vec![0.0; net.param_count()];
    let mut accbar = DVector::zeros(n);
    for i in 0..n {
        accbar.fill(0.0);
        accbar[i] = 1.0;
        accel_adjoint_seeds(&parts, state, &accbar, &mut gbar, &mut hbar);
        row.fill(0.0);
        net.backprop_adjoints(&trace, 0.0, &gbar, &hbar, &mut row);
        for (c, &v) in row.iter().enumerate() {
            jac[(i, c)] = v;
        }
    }
    Ok((parts.acc.as_slice().to_vec(), jac))
}

/// Mean squared acceleration error of `model` over a batch.
pub fn data_loss<M: LagrangianModel + ?Sized>(model: &M, samples: &[AccelSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyBatch("data_loss"));
    }
    let mut total = 0.0;
    for sample in samples {
        let acc = accel(model, &sample.state, &sample.force)?;
        if acc.len() != sample.target.len() {
            return Err(Error::ShapeMismatch {
                what: "acceleration target",
                expected: acc.len(),
                got: sample.target.len(),
            });
        }
        for (a, t) in acc.iter().zip(&sample.target) {
            total += (a - t) * (a - t);
        }
    }
    Ok(total / samples.len() as f64)
}

/// Data loss together with its gradient in weight space.
pub fn data_loss_grad(
    net: &ScalarNetwork,
    samples: &[AccelSample],
) -> Result<(f64, Vec<f64>)> {
    if samples.is_empty() {
        return Err(Error::EmptyBatch("data_loss_grad"));
    }
    let n = net.input_dim() / 2;
    let d = net.input_dim();
    let inv_count = 1.0 / samples.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; net.param_count()];
    let mut trace = DerivTrace::new(net.arch());
    let mut gbar = vec![0.0; d];
    let mut hbar = vec![0.0; d * d];
    let mut accbar = DVector::zeros(n);
    for sample in samples {
        check_state_force(net.input_dim(), &sample.state, &sample.force)?;
        if sample.target.len() != n {
            return Err(Error::ShapeMismatch {
                what: "acceleration target",
                expected: n,
                got: sample.target.len(),
            });
        }
        let x = sample.state.to_input();
        net.eval_with_derivs(&x, &mut trace)?;
        let hess = symmetrized(&trace.hess_matrix());
        let parts = operator_parts(trace.grad(), &hess, &sample.state, &sample.force)?;
        for i in 0..n {
            let e = parts.acc[i] - sample.target[i];
            loss += e * e * inv_count;
            accbar[i] = 2.0 * e * inv_count;
        }
        accel_adjoint_seeds(&parts, &sample.state, &accbar, &mut gbar, &mut hbar);
        net.backprop_adjoints(&trace, 0.0, &gbar, &hbar, &mut grad);
    }
    Ok((loss, grad))
}

/// Squared Euler-Lagrange residual along one observed transition, with the
/// momentum time-derivative taken as a finite difference between the two
/// states:
///
/// ```text
/// || (p(s') - p(s))/dt - dL/dq(s) - f ||^2,    p = dL/dqdot
/// ```
pub fn physical_residual<M: LagrangianModel + ?Sized>(
    model: &M,
    state: &GeneralizedState,
    force: &[f64],
    next: &GeneralizedState,
    dt: f64,
) -> Result<f64> {
    check_state_force(model.input_dim(), state, force)?;
    check_state_force(model.input_dim(), next, force)?;
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::invalid("dt", format!("{dt}")));
    }
    let n = state.dof();
    let g1 = model.grad_x(&state.to_input());
    let g2 = model.grad_x(&next.to_input());
    let mut total = 0.0;
    for i in 0..n {
        let rho = (g2[n + i] - g1[n + i]) / dt - g1[i] - force[i];
        total += rho * rho;
    }
    Ok(total)
}

/// Physical residual plus its weight gradient, for regularizing training.
pub fn physical_residual_grad(
    net: &ScalarNetwork,
    state: &GeneralizedState,
    force: &[f64],
    next: &GeneralizedState,
    dt: f64,
) -> Result<(f64, Vec<f64>)> {
    check_state_force(net.input_dim(), state, force)?;
    check_state_force(net.input_dim(), next, force)?;
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::invalid("dt", format!("{dt}")));
    }
    let n = net.input_dim() / 2;
    let d = net.input_dim();
    let mut trace1 = DerivTrace::new(net.arch());
    let mut trace2 = DerivTrace::new(net.arch());
    net.eval_with_derivs(&state.to_input(), &mut trace1)?;
    net.eval_with_derivs(&next.to_input(), &mut trace2)?;

    let mut value = 0.0;
    let mut gbar1 = vec![0.0; d];
    let mut gbar2 = vec![0.0; d];
    for i in 0..n {
        let rho = (trace2.grad()[n + i] - trace1.grad()[n + i]) / dt
            - trace1.grad()[i]
            - force[i];
        value += rho * rho;
        gbar2[n + i] = 2.0 * rho / dt;
        gbar1[n + i] = -2.0 * rho / dt;
        gbar1[i] = -2.0 * rho;
    }
    let hbar = vec![0.0; d * d];
    let mut grad = vec![0.0; net.param_count()];
    net.backprop_adjoints(&trace1, 0.0, &gbar1, &hbar, &mut grad);
    net.backprop_adjoints(&trace2, 0.0, &gbar2, &hbar, &mut grad);
    Ok((value, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, NetworkArch};
    use crate::testutil::{assert_close, central_grad, seeded_rng};
    use rand::Rng;

    fn small_net(widths: &[usize], seed: u64) -> ScalarNetwork {
        let arch = NetworkArch::new(widths.to_vec(), Activation::Softplus).unwrap();
        ScalarNetwork::init(arch, &mut seeded_rng(seed))
    }

    #[test]
    fn harmonic_oscillator_acceleration() {
        let model = AnalyticLagrangian::harmonic_oscillator(1.0, 1.0);
        let acc = accel(&model, &GeneralizedState::scalar(0.5, 0.0), &[0.0]).unwrap();
        assert_close(acc[0], -0.5, 0.0, 1e-9, "restoring acceleration");
    }

    #[test]
    fn point_pendulum_matches_closed_form_on_grid() {
        let (m, l, g) = (1.0, 1.0, 10.0);
        let model = AnalyticLagrangian::point_pendulum(m, l, g);
        let mut worst = 0.0f64;
        for i in 0..100 {
            let q = -3.0 + 6.0 * (i as f64) / 99.0;
            let qd = -4.0 + 8.0 * ((i * 37 % 100) as f64) / 99.0;
            let f = -2.0 + 4.0 * ((i * 61 % 100) as f64) / 99.0;
            let acc = accel(&model, &GeneralizedState::scalar(q, qd), &[f]).unwrap();
            let truth = (f + m * g * l * q.sin()) / (m * l * l);
            worst = worst.max((acc[0] - truth).abs());
        }
        assert!(worst < 1e-6, "worst grid error {worst:.3e}");
        let acc = accel(
            &model,
            &GeneralizedState::scalar(std::f64::consts::FRAC_PI_2, 0.0),
            &[0.0],
        )
        .unwrap();
        assert_close(acc[0], 10.0, 0.0, 1e-6, "upright-adjacent pendulum");
    }

    #[test]
    fn constant_offset_leaves_acceleration_bit_identical() {
        let net = small_net(&[2, 6, 1], 5);
        let mut shifted = net.clone();
        let last = shifted.param_count() - 1;
        shifted.weights_mut()[last] += 7.0;
        let s = GeneralizedState::scalar(0.4, -1.2);
        let a = accel(&net, &s, &[0.3]).unwrap();
        let b = accel(&shifted, &s, &[0.3]).unwrap();
        assert_eq!(a[0].to_bits(), b[0].to_bits());
    }

    #[test]
    fn positive_scaling_preserves_unforced_acceleration() {
        for alpha in [0.5, 3.0] {
            let base = AnalyticLagrangian::rod_pendulum(1.0, 1.0, 10.0);
            let scaled = AnalyticLagrangian::new(
                1,
                move |x| alpha * AnalyticLagrangian::rod_pendulum(1.0, 1.0, 10.0).value(x),
                move |x| {
                    AnalyticLagrangian::rod_pendulum(1.0, 1.0, 10.0)
                        .grad_x(x)
                        .iter()
                        .map(|v| alpha * v)
                        .collect()
                },
                move |x| alpha * AnalyticLagrangian::rod_pendulum(1.0, 1.0, 10.0).hess_x(x),
            );
            let s = GeneralizedState::scalar(1.1, 0.7);
            let a = accel(&base, &s, &[0.0]).unwrap();
            let b = accel(&scaled, &s, &[0.0]).unwrap();
            assert_close(a[0], b[0], 1e-8, 1e-10, "scale invariance at zero force");
        }
    }

    #[test]
    fn degenerate_network_still_yields_finite_output() {
        // Zero output layer means zero Lagrangian: the damping floor alone
        // defines the (large but finite) acceleration.
        let arch = NetworkArch::new(vec![2, 6, 1], Activation::Softplus).unwrap();
        let net = ScalarNetwork::new(arch.clone(), vec![0.0; arch.param_count()]).unwrap();
        let s = GeneralizedState::scalar(0.2, 0.1);
        let (acc, jac) = accel_jac_weights(&net, &s, &[0.5]).unwrap();
        assert!(acc[0].is_finite());
        assert!(jac.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn exactly_cancelled_hessian_reports_singular_dynamics() {
        let model = AnalyticLagrangian::new(
            1,
            |_| 0.0,
            |_| vec![0.0, 0.0],
            |_| DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, -VELOCITY_HESSIAN_DAMPING]),
        );
        let err = accel(&model, &GeneralizedState::scalar(0.0, 0.0), &[1.0]).unwrap_err();
        assert!(matches!(err, Error::SingularDynamics { .. }), "{err}");
    }

    #[test]
    fn weight_jacobian_matches_finite_differences() {
        let mut rng = seeded_rng(17);
        for widths in [[2usize, 6, 1].as_slice(), &[2, 5, 4, 1]] {
            let net = small_net(widths, 23);
            let s = GeneralizedState::scalar(rng.random_range(-1.5..1.5), rng.random_range(-2.0..2.0));
            let f = [rng.random_range(-1.0..1.0)];
            let (_, jac) = accel_jac_weights(&net, &s, &f).unwrap();
            let w0 = net.weights().to_vec();
            let fd = central_grad(
                |w| {
                    let probe = ScalarNetwork::new(net.arch().clone(), w.to_vec()).unwrap();
                    accel(&probe, &s, &f).unwrap()[0]
                },
                &w0,
                1e-6,
            );
            for i in 0..w0.len() {
                assert_close(jac[(0, i)], fd[i], 1e-3, 1e-7, "operator jacobian vs fd");
            }
        }
    }

    #[test]
    fn weight_jacobian_is_first_order_accurate() {
        // Halving the perturbation should shrink the Taylor remainder about
        // fourfold if the Jacobian is exact.
        let net = small_net(&[2, 6, 1], 31);
        let s = GeneralizedState::scalar(0.6, -0.8);
        let f = [0.4];
        let (acc0, jac) = accel_jac_weights(&net, &s, &f).unwrap();
        let mut rng = seeded_rng(32);
        let dir: Vec<f64> = (0..net.param_count())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let predicted: f64 = dir.iter().enumerate().map(|(i, v)| jac[(0, i)] * v).sum();
        let remainder = |scale: f64| {
            let mut w = net.weights().to_vec();
            for (wi, di) in w.iter_mut().zip(&dir) {
                *wi += scale * di;
            }
            let probe = ScalarNetwork::new(net.arch().clone(), w).unwrap();
            let acc = accel(&probe, &s, &f).unwrap();
            (acc[0] - acc0[0] - scale * predicted).abs()
        };
        let r1 = remainder(1e-3);
        let r2 = remainder(5e-4);
        assert!(
            r1 / r2 > 3.0 && r1 / r2 < 5.0,
            "remainder ratio {} (r1={r1:.3e}, r2={r2:.3e})",
            r1 / r2
        );
    }

    #[test]
    fn exact_model_has_zero_data_loss() {
        let model = AnalyticLagrangian::rod_pendulum(1.0, 1.0, 10.0);
        let mut rng = seeded_rng(41);
        let samples: Vec<AccelSample> = (0..20)
            .map(|_| {
                let s = GeneralizedState::scalar(
                    rng.random_range(-3.0..3.0),
                    rng.random_range(-6.0..6.0),
                );
                let f = rng.random_range(-2.0..2.0);
                let target = accel(&model, &s, &[f]).unwrap();
                AccelSample {
                    state: s,
                    force: vec![f],
                    target,
                }
            })
            .collect();
        assert!(data_loss(&model, &samples).unwrap() < 1e-18);
    }

    #[test]
    fn single_sample_loss_is_squared_residual() {
        let model = AnalyticLagrangian::harmonic_oscillator(1.0, 1.0);
        let s = GeneralizedState::scalar(0.3, 0.0);
        let acc = accel(&model, &s, &[0.0]).unwrap();
        let sample = AccelSample {
            state: s,
            force: vec![0.0],
            target: vec![acc[0] + 0.25],
        };
        assert_close(
            data_loss(&model, &[sample]).unwrap(),
            0.0625,
            1e-12,
            1e-12,
            "squared residual",
        );
    }

    #[test]
    fn data_loss_gradient_matches_finite_differences() {
        let net = small_net(&[2, 6, 1], 47);
        let mut rng = seeded_rng(48);
        let samples: Vec<AccelSample> = (0..5)
            .map(|_| AccelSample {
                state: GeneralizedState::scalar(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ),
                force: vec![rng.random_range(-1.0..1.0)],
                target: vec![rng.random_range(-2.0..2.0)],
            })
            .collect();
        let (loss, grad) = data_loss_grad(&net, &samples).unwrap();
        assert_close(
            loss,
            data_loss(&net, &samples).unwrap(),
            1e-12,
            1e-12,
            "loss value",
        );
        let w0 = net.weights().to_vec();
        let fd = central_grad(
            |w| {
                let probe = ScalarNetwork::new(net.arch().clone(), w.to_vec()).unwrap();
                data_loss(&probe, &samples).unwrap()
            },
            &w0,
            1e-6,
        );
        for i in 0..w0.len() {
            assert_close(grad[i], fd[i], 1e-3, 1e-7, "data loss grad vs fd");
        }
    }

    #[test]
    fn constant_lagrangian_residual_is_squared_force() {
        let model = AnalyticLagrangian::new(
            1,
            |_| 3.0,
            |_| vec![0.0, 0.0],
            |_| DMatrix::zeros(2, 2),
        );
        let s = GeneralizedState::scalar(0.1, 0.2);
        let next = GeneralizedState::scalar(0.15, 0.3);
        let r = physical_residual(&model, &s, &[0.7], &next, 0.05).unwrap();
        assert_close(r, 0.49, 1e-12, 1e-12, "constant model residual");
    }

    #[test]
    fn residual_vanishes_along_exact_trajectory() {
        // q(t) = cos t solves the unit harmonic oscillator.
        let model = AnalyticLagrangian::harmonic_oscillator(1.0, 1.0);
        let dt = 1e-3;
        let mut worst = 0.0f64;
        for k in 0..50 {
            let t = 0.1 * k as f64;
            let s = GeneralizedState::scalar(t.cos(), -t.sin());
            let next = GeneralizedState::scalar((t + dt).cos(), -(t + dt).sin());
            let r = physical_residual(&model, &s, &[0.0], &next, dt).unwrap();
            worst = worst.max(r);
        }
        assert!(worst < 1e-4, "worst residual {worst:.3e}");
    }

    #[test]
    fn physical_residual_gradient_matches_finite_differences() {
        let net = small_net(&[2, 5, 1], 53);
        let s = GeneralizedState::scalar(0.3, -0.5);
        let next = GeneralizedState::scalar(0.28, -0.4);
        let f = [0.6];
        let (value, grad) = physical_residual_grad(&net, &s, &f, &next, 0.05).unwrap();
        assert_close(
            value,
            physical_residual(&net, &s, &f, &next, 0.05).unwrap(),
            1e-12,
            1e-12,
            "residual value",
        );
        let w0 = net.weights().to_vec();
        let fd = central_grad(
            |w| {
                let probe = ScalarNetwork::new(net.arch().clone(), w.to_vec()).unwrap();
                physical_residual(&probe, &s, &f, &next, 0.05).unwrap()
            },
            &w0,
            1e-6,
        );
        for i in 0..w0.len() {
            assert_close(grad[i], fd[i], 1e-3, 1e-8, "residual grad vs fd");
        }
    }

    #[test]
    fn validation_errors() {
        let model = AnalyticLagrangian::harmonic_oscillator(1.0, 1.0);
        let s = GeneralizedState::scalar(0.0, 0.0);
        assert!(matches!(
            accel(&model, &s, &[0.0, 1.0]),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(matches!(
            accel(&model, &s, &[f64::NAN]),
            Err(Error::NonFinite(_))
        ));
        assert!(matches!(
            data_loss(&model, &[]),
            Err(Error::EmptyBatch(_))
        ));
        let bad = GeneralizedState::scalar(f64::INFINITY, 0.0);
        assert!(matches!(
            accel(&model, &bad, &[0.0]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn probe_grid_covers_the_requested_box() {
        let grid = probe_grid(3.0, 8.0, 5);
        assert_eq!(grid.len(), 25);
        let qs: Vec<f64> = grid.iter().map(|s| s.q[0]).collect();
        let qds: Vec<f64> = grid.iter().map(|s| s.qdot[0]).collect();
        assert_close(qs.iter().fold(f64::MAX, |a, &b| a.min(b)), -3.0, 0.0, 1e-12, "q min");
        assert_close(qs.iter().fold(f64::MIN, |a, &b| a.max(b)), 3.0, 0.0, 1e-12, "q max");
        assert_close(qds.iter().fold(f64::MAX, |a, &b| a.min(b)), -8.0, 0.0, 1e-12, "qd min");
        assert_close(qds.iter().fold(f64::MIN, |a, &b| a.max(b)), 8.0, 0.0, 1e-12, "qd max");
        assert!(grid.contains(&GeneralizedState::scalar(0.0, 0.0)), "grid center");
    }

    #[test]
    fn velocity_curvature_recovers_analytic_inertia() {
        // For the rod pendulum, d2L/dqd dqd = m l^2 / 3 everywhere, so the
        // probe average is exactly the inertia regardless of the grid.
        let model = AnalyticLagrangian::rod_pendulum(1.0, 1.0, 10.0);
        let grid = probe_grid(std::f64::consts::PI, 8.0, 4);
        let curv = velocity_curvature(&model, &grid).unwrap();
        assert_close(curv, 1.0 / 3.0, 1e-12, 1e-12, "rod inertia");
    }

    #[test]
    fn calibrated_init_hits_the_curvature_target_exactly() {
        let arch = NetworkArch::new(vec![2, 16, 1], Activation::Softplus).unwrap();
        let grid = probe_grid(std::f64::consts::PI, 8.0, 5);
        for seed in 0..6 {
            let net = init_calibrated_lagrangian(
                &arch,
                &grid,
                CALIBRATED_CURVATURE,
                8,
                &mut seeded_rng(900 + seed),
            )
            .unwrap();
            let curv = velocity_curvature(&net, &grid).unwrap();
            // The rescale is exact linear algebra, anything beyond float
            // noise means the output layer is not scaling the curvature.
            assert_close(curv, CALIBRATED_CURVATURE, 1e-9, 1e-9, "calibrated curvature");
        }
    }

    #[test]
    fn calibrated_init_keeps_accelerations_at_physical_scale() {
        // An uncalibrated draw regularly predicts |qdd| in the thousands
        // because the operator divides by near-zero curvature; calibration
        // must keep the probe-set predictions within an order of magnitude
        // of the plant's true +-21.
        let arch = NetworkArch::new(vec![2, 32, 1], Activation::Softplus).unwrap();
        let grid = probe_grid(std::f64::consts::PI, 8.0, 5);
        for seed in 0..4 {
            let net = init_calibrated_lagrangian(
                &arch,
                &grid,
                CALIBRATED_CURVATURE,
                8,
                &mut seeded_rng(950 + seed),
            )
            .unwrap();
            let worst = grid
                .iter()
                .map(|s| accel(&net, s, &[2.0]).unwrap()[0].abs())
                .fold(0.0f64, f64::max);
            assert!(
                worst < 300.0,
                "seed {seed}: calibrated net predicts |qdd| up to {worst:.1}"
            );
        }
    }

    #[test]
    fn calibrated_init_rejects_bad_arguments() {
        let arch = NetworkArch::new(vec![2, 8, 1], Activation::Softplus).unwrap();
        let grid = probe_grid(1.0, 1.0, 3);
        let mut rng = seeded_rng(1);
        assert!(init_calibrated_lagrangian(&arch, &grid, 1.0, 0, &mut rng).is_err());
        assert!(init_calibrated_lagrangian(&arch, &grid, -1.0, 4, &mut rng).is_err());
        assert!(init_calibrated_lagrangian(&arch, &grid, f64::NAN, 4, &mut rng).is_err());
        assert!(init_calibrated_lagrangian(&arch, &[], 1.0, 4, &mut rng).is_err());
        let wrong_dof = vec![GeneralizedState::new(vec![0.0; 2], vec![0.0; 2])];
        assert!(init_calibrated_lagrangian(&arch, &wrong_dof, 1.0, 4, &mut rng).is_err());
    }
}
