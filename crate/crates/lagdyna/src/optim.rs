//! Weight-space trainers: stochastic gradients (SGD, Adam) and an extended
//! Kalman filter that treats the network weights as the hidden state of a
//! random walk observed through acceleration measurements.
//!
//! Both trainers speak the same language, passes over a fixed batch of
//! [`AccelSample`]s with a full-dataset loss recorded after each pass, so
//! convergence-per-pass comparisons are apples to apples.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::lnn::{accel_jac_weights, data_loss, data_loss_grad, AccelSample};
use crate::nn::ScalarNetwork;

/// Prior weight variance used when no explicit belief is configured.
pub const DEFAULT_PRIOR_VAR: f64 = 0.1;
/// Per-predict random-walk variance added to the weight covariance.
pub const DEFAULT_PROCESS_NOISE: f64 = 1e-6;
/// Measurement noise variance on each observed acceleration component.
pub const DEFAULT_MEAS_NOISE: f64 = 0.05;
/// Innovation condition ceiling beyond which an update is refused.
pub const UPDATE_CONDITION_LIMIT: f64 = 1e12;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment accumulators for Adam.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(dim: usize) -> Self {
        AdamState {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }
}

/// A first-order update rule applied in place to a weight vector.
#[derive(Debug, Clone)]
pub enum GradientOptimizer {
    Sgd { lr: f64 },
    Adam { params: AdamParams, state: AdamState },
}

impl GradientOptimizer {
    pub fn sgd(lr: f64) -> Self {
        GradientOptimizer::Sgd { lr }
    }

    pub fn adam(dim: usize, params: AdamParams) -> Self {
        GradientOptimizer::Adam {
            params,
            state: AdamState::new(dim),
        }
    }

    /// Descend `weights` along `grad`.
    pub fn step(&mut self, weights: &mut [f64], grad: &[f64]) -> Result<()> {
        if weights.len() != grad.len() {
            return Err(Error::ShapeMismatch {
                what: "gradient",
                expected: weights.len(),
                got: grad.len(),
            });
        }
        if !grad.iter().all(|g| g.is_finite()) {
            return Err(Error::NonFinite("gradient"));
        }
        match self {
            GradientOptimizer::Sgd { lr } => {
                for (w, g) in weights.iter_mut().zip(grad) {
                    *w -= *lr * g;
                }
            }
            GradientOptimizer::Adam { params, state } => {
                if state.m.len() != weights.len() {
                    return Err(Error::ShapeMismatch {
                        what: "adam state",
                        expected: state.m.len(),
                        got: weights.len(),
                    });
                }
                state.t += 1;
                let bc1 = 1.0 - params.beta1.powi(state.t as i32);
                let bc2 = 1.0 - params.beta2.powi(state.t as i32);
                for i in 0..weights.len() {
                    let g = grad[i];
                    state.m[i] = params.beta1 * state.m[i] + (1.0 - params.beta1) * g;
                    state.v[i] = params.beta2 * state.v[i] + (1.0 - params.beta2) * g * g;
                    let mhat = state.m[i] / bc1;
                    let vhat = state.v[i] / bc2;
                    weights[i] -= params.lr * mhat / (vhat.sqrt() + params.eps);
                }
            }
        }
        Ok(())
    }
}

/// Gaussian belief over network weights, updated by linearized measurements.
#[derive(Debug, Clone)]
pub struct GaussianWeightBelief {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    process_noise: f64,
    meas_noise: f64,
}

impl GaussianWeightBelief {
    pub fn new(
        mean: &[f64],
        prior_var: f64,
        process_noise: f64,
        meas_noise: f64,
    ) -> Result<Self> {
        if !mean.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("belief mean"));
        }
        for (name, v) in [
            ("prior variance", prior_var),
            ("process noise", process_noise),
            ("measurement noise", meas_noise),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(name, format!("{v}")));
            }
        }
        if meas_noise == 0.0 {
            return Err(Error::invalid("measurement noise", "must be positive"));
        }
        let dim = mean.len();
        Ok(GaussianWeightBelief {
            mean: DVector::from_column_slice(mean),
            cov: DMatrix::identity(dim, dim) * prior_var,
            process_noise,
            meas_noise,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        self.mean.as_slice()
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// Overwrite the mean, keeping the covariance. Needed when weights are
    /// changed outside the filter (for example by an auxiliary loss).
    pub fn set_mean(&mut self, mean: &[f64]) -> Result<()> {
        if mean.len() != self.mean.len() {
            return Err(Error::invalid(
                "belief mean",
                format!("length {} != {}", mean.len(), self.mean.len()),
            ));
        }
        if mean.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite("belief mean"));
        }
        self.mean = DVector::from_column_slice(mean);
        Ok(())
    }

    /// Random-walk time update: the mean is carried over, uncertainty grows.
    pub fn predict(&mut self) {
        for i in 0..self.cov.nrows() {
            self.cov[(i, i)] += self.process_noise;
        }
    }

    /// Measurement update with linearization `jac` (rows = measurement
    /// components, columns = weights) and innovation `residual = y - yhat`.
    pub fn update(&mut self, jac: &DMatrix<f64>, residual: &DVector<f64>) -> Result<()> {
        let dim = self.dim();
        if jac.ncols() != dim {
            return Err(Error::ShapeMismatch {
                what: "measurement jacobian columns",
                expected: dim,
                got: jac.ncols(),
            });
        }
        if residual.len() != jac.nrows() {
            return Err(Error::ShapeMismatch {
                what: "innovation",
                expected: jac.nrows(),
                got: residual.len(),
            });
        }
        if !jac.iter().all(|v| v.is_finite()) || !residual.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("measurement"));
        }

        let pht = &self.cov * jac.transpose();
        let mut s = jac * &pht;
        for i in 0..s.nrows() {
            s[(i, i)] += self.meas_noise;
        }

        let eig = s.clone().symmetric_eigen().eigenvalues;
        let max_abs = eig.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
        let min_abs = eig.iter().fold(f64::INFINITY, |a, &v| a.min(v.abs()));
        let cond = if min_abs > 0.0 {
            max_abs / min_abs
        } else {
            f64::INFINITY
        };
        if !cond.is_finite() || cond > UPDATE_CONDITION_LIMIT {
            return Err(Error::IllConditionedUpdate { cond });
        }

        // K = P H^T S^-1, computed by solving S K^T = (P H^T)^T.
        let kt = s
            .lu()
            .solve(&pht.transpose())
            .ok_or(Error::IllConditionedUpdate { cond })?;
        let gain = kt.transpose();

        self.mean += &gain * residual;
        self.cov -= &gain * pht.transpose();
        if !self.mean.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("updated belief mean"));
        }
        // The subtraction can leave tiny asymmetries that compound; keep the
        // covariance exactly symmetric.
        for r in 0..dim {
            for c in (r + 1)..dim {
                let v = 0.5 * (self.cov[(r, c)] + self.cov[(c, r)]);
                self.cov[(r, c)] = v;
                self.cov[(c, r)] = v;
            }
        }
        Ok(())
    }

    /// Smallest eigenvalue of the covariance, for positive-definiteness
    /// diagnostics.
    pub fn min_cov_eigenvalue(&self) -> f64 {
        self.cov
            .clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .fold(f64::INFINITY, |a, &v| a.min(v))
    }
}

/// Loss trace of a training run: full-dataset mean squared error after each
/// pass, plus the value before the first pass.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub losses: Vec<f64>,
}

impl TrainReport {
    pub fn initial_loss(&self) -> f64 {
        self.losses[0]
    }

    pub fn final_loss(&self) -> f64 {
        *self.losses.last().expect("non-empty by construction")
    }

    /// 1-based index of the first pass whose post-pass loss is at or below
    /// `threshold`, or `None`.
    pub fn passes_to_reach(&self, threshold: f64) -> Option<usize> {
        self.losses
            .iter()
            .skip(1)
            .position(|&l| l <= threshold)
            .map(|p| p + 1)
    }
}

fn check_training_args(samples: &[AccelSample], passes: usize) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::EmptyBatch("training set"));
    }
    if passes == 0 {
        return Err(Error::invalid("passes", "must be at least 1"));
    }
    Ok(())
}

/// Minibatch gradient training: `passes` shuffled sweeps over `samples`.
pub fn gradient_train_epochs(
    net: &mut ScalarNetwork,
    samples: &[AccelSample],
    passes: usize,
    batch: usize,
    opt: &mut GradientOptimizer,
    rng: &mut impl Rng,
) -> Result<TrainReport> {
    check_training_args(samples, passes)?;
    if batch == 0 {
        return Err(Error::invalid("batch", "must be at least 1"));
    }
    let mut losses = vec![data_loss(net, samples)?];
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut scratch: Vec<AccelSample> = Vec::with_capacity(batch);
    for _ in 0..passes {
        order.shuffle(rng);
        for chunk in order.chunks(batch) {
            scratch.clear();
            scratch.extend(chunk.iter().map(|&i| samples[i].clone()));
            let (_, grad) = data_loss_grad(net, &scratch)?;
            let mut weights = net.weights().to_vec();
            opt.step(&mut weights, &grad)?;
            net.set_weights(&weights)?;
        }
        losses.push(data_loss(net, samples)?);
    }
    Ok(TrainReport { losses })
}

/// Filter training: each pass visits every sample once in shuffled order,
/// doing a predict/update cycle per sample and keeping the network synced to
/// the belief mean.
pub fn ekf_train_epochs(
    net: &mut ScalarNetwork,
    belief: &mut GaussianWeightBelief,
    samples: &[AccelSample],
    passes: usize,
    rng: &mut impl Rng,
) -> Result<TrainReport> {
    check_training_args(samples, passes)?;
    if belief.dim() != net.param_count() {
        return Err(Error::ShapeMismatch {
            what: "belief dimension",
            expected: net.param_count(),
            got: belief.dim(),
        });
    }
    net.set_weights(belief.mean())?;
    let mut losses = vec![data_loss(net, samples)?];
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for _ in 0..passes {
        order.shuffle(rng);
        for &i in &order {
            let sample = &samples[i];
            belief.predict();
            let (acc, jac) = accel_jac_weights(net, &sample.state, &sample.force)?;
            let residual = DVector::from_iterator(
                acc.len(),
                sample.target.iter().zip(&acc).map(|(t, a)| t - a),
            );
            belief.update(&jac, &residual)?;
            net.set_weights(belief.mean())?;
        }
        losses.push(data_loss(net, samples)?);
    }
    Ok(TrainReport { losses })
}
