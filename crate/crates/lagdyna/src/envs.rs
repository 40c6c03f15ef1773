//! Ground-truth torque-limited pendulum swing-up, mirroring the classic
//! control task: a uniform rod pivoted at one end, angle zero upright,
//! reward peaked at the upright rest state, torque too weak to lift the rod
//! directly so the controller must pump energy.
//!
//! Also home to the acceleration-target extraction that turns stored
//! transitions into supervised data for model learning.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::lnn::{AccelSample, Force, GeneralizedState};

/// Physical and task parameters of the swing-up problem.
#[derive(Debug, Clone, PartialEq)]
pub struct PendulumParams {
    pub mass: f64,
    pub length: f64,
    pub gravity: f64,
    pub dt: f64,
    pub torque_limit: f64,
    pub speed_limit: f64,
    pub max_steps: usize,
}

impl Default for PendulumParams {
    fn default() -> Self {
        PendulumParams {
            mass: 1.0,
            length: 1.0,
            gravity: 10.0,
            dt: 0.05,
            torque_limit: 2.0,
            speed_limit: 8.0,
            max_steps: 200,
        }
    }
}

impl PendulumParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("mass", self.mass),
            ("length", self.length),
            ("gravity", self.gravity),
            ("dt", self.dt),
            ("torque_limit", self.torque_limit),
            ("speed_limit", self.speed_limit),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(name, format!("{v} (must be positive)")));
            }
        }
        if self.max_steps == 0 {
            return Err(Error::invalid("max_steps", "must be at least 1"));
        }
        Ok(())
    }

    /// Quadratic state-action cost, negated: zero at upright rest, negative
    /// everywhere else.
    pub fn reward(&self, q: f64, qdot: f64, action: f64) -> f64 {
        let q = wrap_angle(q);
        -(q * q + 0.1 * qdot * qdot + 0.001 * action * action)
    }

    /// Ground-truth angular acceleration of the rod under torque `action`.
    pub fn accel(&self, q: f64, action: f64) -> f64 {
        3.0 * self.gravity / (2.0 * self.length) * q.sin()
            + 3.0 / (self.mass * self.length * self.length) * action
    }

    /// Total mechanical energy (rod inertia ml^2/3, potential peak upright).
    pub fn energy(&self, q: f64, qdot: f64) -> f64 {
        let inertia = self.mass * self.length * self.length / 3.0;
        0.5 * inertia * qdot * qdot + 0.5 * self.mass * self.gravity * self.length * q.cos()
    }
}

/// Map any angle into [-pi, pi).
pub fn wrap_angle(q: f64) -> f64 {
    (q + std::f64::consts::PI).rem_euclid(2.0 * std::f64::consts::PI) - std::f64::consts::PI
}

/// Which world produced a transition: the real environment or the learned
/// model. Buffers check this tag to keep real and synthetic data separate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Env,
    Model,
}

/// One stored step: state, applied (already clamped) force, successor,
/// reward, horizon flag, and origin tag.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: GeneralizedState,
    pub action: Force,
    pub next: GeneralizedState,
    pub reward: f64,
    pub done: bool,
    pub provenance: Provenance,
}

/// The real environment: owns its state, step counter, and reset stream.
#[derive(Debug, Clone)]
pub struct PendulumEnv {
    params: PendulumParams,
    q: f64,
    qdot: f64,
    steps: usize,
    rng: ChaCha8Rng,
}

impl PendulumEnv {
    /// A freshly constructed environment is already reset.
    pub fn new(params: PendulumParams, seed: u64) -> Result<Self> {
        params.validate()?;
        let mut env = PendulumEnv {
            params,
            q: 0.0,
            qdot: 0.0,
            steps: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        env.reset();
        Ok(env)
    }

    /// Draw a fresh start: angle uniform over the circle, small velocity.
    pub fn reset(&mut self) -> GeneralizedState {
        self.q = self
            .rng
            .random_range(-std::f64::consts::PI..std::f64::consts::PI);
        self.qdot = self.rng.random_range(-1.0..1.0);
        self.steps = 0;
        self.state()
    }

    /// Force a specific start (wrapped and speed-clamped); resets the step
    /// counter.
    pub fn set_state(&mut self, q: f64, qdot: f64) {
        self.q = wrap_angle(q);
        self.qdot = qdot.clamp(-self.params.speed_limit, self.params.speed_limit);
        self.steps = 0;
    }

    pub fn state(&self) -> GeneralizedState {
        GeneralizedState::scalar(self.q, self.qdot)
    }

    pub fn steps_taken(&self) -> usize {
        self.steps
    }

    pub fn params(&self) -> &PendulumParams {
        &self.params
    }

    /// Advance one semi-implicit Euler step under the (clamped) torque.
    /// The reward is evaluated at the pre-step state.
    pub fn step(&mut self, action: f64) -> Result<Transition> {
        if !action.is_finite() {
            return Err(Error::NonFinite("action"));
        }
        let p = &self.params;
        let torque = action.clamp(-p.torque_limit, p.torque_limit);
        let state = self.state();
        let reward = p.reward(self.q, self.qdot, torque);

        let qdd = p.accel(self.q, torque);
        self.qdot = (self.qdot + qdd * p.dt).clamp(-p.speed_limit, p.speed_limit);
        self.q = wrap_angle(self.q + self.qdot * p.dt);
        self.steps += 1;

        Ok(Transition {
            state,
            action: vec![torque],
            next: self.state(),
            reward,
            done: self.steps >= p.max_steps,
            provenance: Provenance::Env,
        })
    }
}

/// Turn transitions into supervised acceleration samples via the velocity
/// difference quotient. Steps whose successor velocity sits exactly on the
/// speed clamp are dropped: there the quotient measures the clamp, not the
/// dynamics.
pub fn accel_targets(
    transitions: &[Transition],
    params: &PendulumParams,
) -> Result<Vec<AccelSample>> {
    let mut samples = Vec::with_capacity(transitions.len());
    for t in transitions {
        if t.next
            .qdot
            .iter()
            .any(|&v| v.abs() >= params.speed_limit)
        {
            continue;
        }
        let target: Vec<f64> = t
            .next
            .qdot
            .iter()
            .zip(&t.state.qdot)
            .map(|(after, before)| (after - before) / params.dt)
            .collect();
        samples.push(AccelSample {
            state: t.state.clone(),
            force: t.action.clone(),
            target,
        });
    }
    if samples.is_empty() {
        return Err(Error::InsufficientData(format!(
            "no usable acceleration targets in {} transitions (all clipped or empty)",
            transitions.len()
        )));
    }
    Ok(samples)
}

/// Dump a trajectory as CSV ("t,q,qdot,a,r,done") for external plotting.
pub fn write_trajectory_csv<W: Write>(out: &mut W, transitions: &[Transition]) -> Result<()> {
    writeln!(out, "t,q,qdot,a,r,done")?;
    for (t, tr) in transitions.iter().enumerate() {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            t,
            tr.state.q[0],
            tr.state.qdot[0],
            tr.action[0],
            tr.reward,
            tr.done as u8
        )?;
    }
    Ok(())
}
