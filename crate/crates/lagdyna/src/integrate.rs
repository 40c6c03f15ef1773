//! Explicit two-stage Runge-Kutta stepping for learned dynamics.
//!
//! Synthetic rollouts only ever run a handful of steps, so a fixed-step
//! second-order scheme is enough; what matters is that a half-trained model
//! cannot take the whole process down. [`rollout`] therefore treats singular
//! dynamics, non-finite output, and state blowup as truncation events
//! recorded on the result, while genuine usage errors still propagate.

use crate::error::{Error, Result};
use crate::lnn::GeneralizedState;

/// States with any component beyond this magnitude abort a rollout.
pub const BLOWUP_LIMIT: f64 = 1e6;

/// Butcher tableau of an explicit two-stage method: one intermediate stage
/// at `c h`, combination weights `b1`, `b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct RkCoefficients {
    pub c: f64,
    pub b1: f64,
    pub b2: f64,
}

impl Default for RkCoefficients {
    /// Ralston's method: smallest local truncation error bound among
    /// two-stage schemes.
    fn default() -> Self {
        RkCoefficients {
            c: 2.0 / 3.0,
            b1: 0.25,
            b2: 0.75,
        }
    }
}

impl RkCoefficients {
    /// Second-order conditions: b1 + b2 = 1 and b2 c = 1/2, to 1e-12.
    pub fn validate(&self) -> Result<()> {
        let consistency = (self.b1 + self.b2 - 1.0).abs();
        let order2 = (self.b2 * self.c - 0.5).abs();
        if consistency > 1e-12 || order2 > 1e-12 {
            return Err(Error::invalid(
                "rk coefficients",
                format!(
                    "order conditions violated: |b1+b2-1|={consistency:.3e}, |b2*c-1/2|={order2:.3e}"
                ),
            ));
        }
        Ok(())
    }
}

/// One step of the two-stage method. `accel_fn` evaluates the acceleration
/// field at a trial state; the generalized force is whatever that closure
/// captures (held constant across the step).
pub fn rk2_step<A>(
    accel_fn: &mut A,
    state: &GeneralizedState,
    dt: f64,
    coeffs: &RkCoefficients,
) -> Result<GeneralizedState>
where
    A: FnMut(&GeneralizedState) -> Result<Vec<f64>>,
{
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::invalid("dt", format!("{dt}")));
    }
    if !state.is_finite() {
        return Err(Error::NonFinite("state"));
    }
    let n = state.dof();

    let a1 = accel_fn(state)?;
    if a1.len() != n {
        return Err(Error::ShapeMismatch {
            what: "acceleration",
            expected: n,
            got: a1.len(),
        });
    }
    let mut mid = GeneralizedState {
        q: vec![0.0; n],
        qdot: vec![0.0; n],
    };
    for i in 0..n {
        mid.q[i] = state.q[i] + coeffs.c * dt * state.qdot[i];
        mid.qdot[i] = state.qdot[i] + coeffs.c * dt * a1[i];
    }
    if !mid.is_finite() {
        return Err(Error::NonFinite("intermediate stage"));
    }

    let a2 = accel_fn(&mid)?;
    if a2.len() != n {
        return Err(Error::ShapeMismatch {
            what: "acceleration",
            expected: n,
            got: a2.len(),
        });
    }
    let mut next = GeneralizedState {
        q: vec![0.0; n],
        qdot: vec![0.0; n],
    };
    for i in 0..n {
        next.q[i] = state.q[i] + dt * (coeffs.b1 * state.qdot[i] + coeffs.b2 * mid.qdot[i]);
        next.qdot[i] = state.qdot[i] + dt * (coeffs.b1 * a1[i] + coeffs.b2 * a2[i]);
    }
    if !next.is_finite() {
        return Err(Error::NonFinite("integrated state"));
    }
    Ok(next)
}

/// Why a rollout stopped before its step budget.
#[derive(Debug, Clone, PartialEq)]
pub enum RolloutAbort {
    /// The dynamics produced NaN or infinity.
    NonFinite { step: usize },
    /// A state component exceeded [`BLOWUP_LIMIT`].
    Blowup { step: usize },
    /// The model's velocity Hessian was numerically singular.
    SingularDynamics { step: usize, cond: f64 },
}

/// One completed transition of a rollout.
#[derive(Debug, Clone)]
pub struct RolloutStep {
    pub state: GeneralizedState,
    pub force: Vec<f64>,
    pub next: GeneralizedState,
}

/// A (possibly truncated) trajectory under a model and a control policy.
#[derive(Debug, Clone)]
pub struct Rollout {
    pub steps: Vec<RolloutStep>,
    pub aborted: Option<RolloutAbort>,
}

/// Integrate up to `max_steps` transitions. The policy picks a force at the
/// start of each step (zero-order hold); the acceleration field sees that
/// force via its second argument.
pub fn rollout<A, P>(
    accel_fn: &mut A,
    policy: &mut P,
    start: GeneralizedState,
    dt: f64,
    max_steps: usize,
    coeffs: &RkCoefficients,
) -> Result<Rollout>
where
    A: FnMut(&GeneralizedState, &[f64]) -> Result<Vec<f64>>,
    P: FnMut(&GeneralizedState, usize) -> Vec<f64>,
{
    coeffs.validate()?;
    let mut steps = Vec::with_capacity(max_steps);
    let mut state = start;
    for k in 0..max_steps {
        if !state.is_finite() {
            return Ok(Rollout {
                steps,
                aborted: Some(RolloutAbort::NonFinite { step: k }),
            });
        }
        let magnitude = state
            .q
            .iter()
            .chain(state.qdot.iter())
            .fold(0.0f64, |m, &v| m.max(v.abs()));
        if magnitude > BLOWUP_LIMIT {
            return Ok(Rollout {
                steps,
                aborted: Some(RolloutAbort::Blowup { step: k }),
            });
        }
        let force = policy(&state, k);
        let mut bound = |s: &GeneralizedState| accel_fn(s, &force);
        match rk2_step(&mut bound, &state, dt, coeffs) {
            Ok(next) => {
                steps.push(RolloutStep {
                    state: state.clone(),
                    force,
                    next: next.clone(),
                });
                state = next;
            }
            Err(Error::SingularDynamics { cond }) => {
                return Ok(Rollout {
                    steps,
                    aborted: Some(RolloutAbort::SingularDynamics { step: k, cond }),
                });
            }
            Err(Error::NonFinite(_)) => {
                return Ok(Rollout {
                    steps,
                    aborted: Some(RolloutAbort::NonFinite { step: k }),
                });
            }
            Err(other) => return Err(other),
        }
    }
    Ok(Rollout {
        steps,
        aborted: None,
    })
}
