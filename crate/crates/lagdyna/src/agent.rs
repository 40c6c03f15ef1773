//! Actor-critic learner used both with and without the learned model.
//!
//! The policy is a tanh-squashed Gaussian: a scalar network maps the state
//! to a pre-squash mean, a single learnable log-std sets exploration width,
//! and the squash keeps every emitted torque strictly inside the limits.
//! The critic is a state-action value network trained by one-step temporal
//! difference against a periodically copied target network; policy updates
//! ascend the score-function estimate of the expected critic value, with the
//! critic's value at the deterministic action subtracted as a zero-mean
//! baseline so the per-sample weights carry the action's advantage rather
//! than the (much larger) absolute return scale.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::path::Path;

use crate::envs::{PendulumEnv, PendulumParams, Transition};
use crate::error::{Error, Result};
use crate::lnn::{Force, GeneralizedState};
use crate::nn::ScalarNetwork;
use crate::optim::GradientOptimizer;

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

/// One policy decision: the squashed action, the pre-squash draw, and the
/// squash-corrected log-density of the action.
#[derive(Debug, Clone)]
pub struct ActionSample {
    pub action: Force,
    pub pre_squash: f64,
    pub logprob: f64,
}

/// ln(1 - tanh(u)^2) without catastrophic cancellation at large |u|.
fn ln_one_minus_tanh_sq(u: f64) -> f64 {
    2.0 * (std::f64::consts::LN_2 - u.abs() - (-2.0 * u.abs()).exp().ln_1p())
}

/// Agent-side observation: each angle enters as its (cos, sin) pair followed
/// by the raw velocities. Angles live on a circle; feeding them raw would put
/// the wrap seam right at the hanging state, where value and policy would
/// have to be discontinuous in the input.
pub fn observe(state: &GeneralizedState) -> Vec<f64> {
    let mut x = Vec::with_capacity(3 * state.q.len());
    for &q in &state.q {
        x.push(q.cos());
        x.push(q.sin());
    }
    x.extend_from_slice(&state.qdot);
    x
}

/// Observation width for a system with `dof` angular coordinates.
pub fn obs_dim(dof: usize) -> usize {
    3 * dof
}

/// Gaussian policy with tanh squashing onto [-torque_limit, torque_limit].
#[derive(Debug, Clone)]
pub struct PolicyNet {
    mean_net: ScalarNetwork,
    log_std: f64,
    log_std_floor: f64,
    torque_limit: f64,
}

impl PolicyNet {
    pub fn new(mean_net: ScalarNetwork, log_std: f64, torque_limit: f64) -> Result<Self> {
        if !(torque_limit.is_finite() && torque_limit > 0.0) {
            return Err(Error::invalid("torque_limit", format!("{torque_limit}")));
        }
        if !log_std.is_finite() {
            return Err(Error::NonFinite("log_std"));
        }
        Ok(PolicyNet {
            mean_net,
            log_std: log_std.clamp(LOG_STD_MIN, LOG_STD_MAX),
            log_std_floor: LOG_STD_MIN,
            torque_limit,
        })
    }

    /// Keep the exploration width at or above `floor` during updates. Once
    /// the squash saturates, the width gradient vanishes and the width can
    /// only ratchet down; a floor preserves enough action diversity to keep
    /// discovering better behaviour. Raises the current width if needed.
    pub fn set_log_std_floor(&mut self, floor: f64) -> Result<()> {
        if !(LOG_STD_MIN..=LOG_STD_MAX).contains(&floor) {
            return Err(Error::invalid(
                "log_std floor",
                format!("{floor} outside [{LOG_STD_MIN}, {LOG_STD_MAX}]"),
            ));
        }
        self.log_std_floor = floor;
        self.log_std = self.log_std.max(floor);
        Ok(())
    }

    pub fn mean_net(&self) -> &ScalarNetwork {
        &self.mean_net
    }

    pub fn log_std(&self) -> f64 {
        self.log_std
    }

    pub fn torque_limit(&self) -> f64 {
        self.torque_limit
    }

    /// Mean-net weights plus the trailing log-std coordinate.
    pub fn param_count(&self) -> usize {
        self.mean_net.param_count() + 1
    }

    pub fn pre_squash_mean(&self, state: &GeneralizedState) -> Result<f64> {
        self.mean_net.forward(&observe(state))
    }

    fn squash(&self, u: f64) -> f64 {
        self.torque_limit * u.tanh()
    }

    /// Log-density of the squashed action corresponding to pre-squash `u`
    /// under mean `mean` and the current width.
    fn logprob_at(&self, u: f64, mean: f64) -> f64 {
        let sigma = self.log_std.exp();
        let z = (u - mean) / sigma;
        let gaussian = -0.5 * (2.0 * std::f64::consts::PI).ln() - self.log_std - 0.5 * z * z;
        gaussian - (self.torque_limit.ln() + ln_one_minus_tanh_sq(u))
    }

    /// Sample (or take the mean of) the policy at `state`.
    pub fn act(
        &self,
        state: &GeneralizedState,
        stochastic: bool,
        rng: &mut impl Rng,
    ) -> Result<ActionSample> {
        if !state.is_finite() {
            return Err(Error::NonFinite("state"));
        }
        let mean = self.pre_squash_mean(state)?;
        let u = if stochastic {
            let xi: f64 = StandardNormal.sample(rng);
            mean + self.log_std.exp() * xi
        } else {
            mean
        };
        Ok(ActionSample {
            action: vec![self.squash(u)],
            pre_squash: u,
            logprob: self.logprob_at(u, mean),
        })
    }

    /// The evaluation-mode action: squashed pre-squash mean.
    pub fn deterministic_action(&self, state: &GeneralizedState) -> Result<f64> {
        Ok(self.squash(self.pre_squash_mean(state)?))
    }

    /// Persist as a standard checkpoint; the log-std rides in the role tag
    /// bit-exactly since it is not a network weight.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let role = format!("policy log_std_bits={:016x}", self.log_std.to_bits());
        self.mean_net.save_checkpoint(path, &role)
    }

    pub fn load_checkpoint(path: &Path, torque_limit: f64) -> Result<Self> {
        let (mean_net, role) = ScalarNetwork::load_checkpoint(path)?;
        let bits = role
            .strip_prefix("policy log_std_bits=")
            .and_then(|hex| u64::from_str_radix(hex, 16).ok())
            .ok_or_else(|| Error::Checkpoint(format!("unrecognized policy role {role:?}")))?;
        PolicyNet::new(mean_net, f64::from_bits(bits), torque_limit)
    }
}

/// State-action value network with a frozen bootstrap copy.
#[derive(Debug, Clone)]
pub struct CriticNet {
    q_net: ScalarNetwork,
    target_net: ScalarNetwork,
    gamma: f64,
    target_period: usize,
    updates_since_sync: usize,
}

fn critic_input(state: &GeneralizedState, action: f64) -> Vec<f64> {
    let mut x = observe(state);
    x.push(action);
    x
}

impl CriticNet {
    pub fn new(q_net: ScalarNetwork, gamma: f64, target_period: usize) -> Result<Self> {
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::invalid("gamma", format!("{gamma} (must be in [0,1))")));
        }
        if target_period == 0 {
            return Err(Error::invalid("target_period", "must be at least 1"));
        }
        Ok(CriticNet {
            target_net: q_net.clone(),
            q_net,
            gamma,
            target_period,
            updates_since_sync: 0,
        })
    }

    pub fn q_net(&self) -> &ScalarNetwork {
        &self.q_net
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn value(&self, state: &GeneralizedState, action: f64) -> Result<f64> {
        self.q_net.forward(&critic_input(state, action))
    }

    /// Copy the live weights into the bootstrap target.
    pub fn sync_target(&mut self) {
        self.target_net = self.q_net.clone();
        self.updates_since_sync = 0;
    }

    /// Bellman backup target: `r + gamma V(s', pi_det(s'))` from the frozen
    /// copy, with bootstrapping masked on terminal transitions.
    pub fn critic_target(&self, t: &Transition, policy: &PolicyNet) -> Result<f64> {
        if t.done || self.gamma == 0.0 {
            return Ok(t.reward);
        }
        let next_action = policy.deterministic_action(&t.next)?;
        let bootstrap = self.target_net.forward(&critic_input(&t.next, next_action))?;
        Ok(t.reward + self.gamma * bootstrap)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        self.q_net.save_checkpoint(path, "critic")
    }
}

/// Bellman targets for a whole batch, all from the frozen copy.
fn batch_targets(
    critic: &CriticNet,
    batch: &[Transition],
    policy: &PolicyNet,
) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch("critic batch"));
    }
    batch.iter().map(|t| critic.critic_target(t, policy)).collect()
}

/// MSE of the live critic against fixed targets, accumulating the weight
/// gradient into `grad`.
fn loss_and_grad_against(
    critic: &CriticNet,
    batch: &[Transition],
    targets: &[f64],
    grad: &mut [f64],
) -> Result<f64> {
    let inv = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut cache = crate::nn::ForwardCache::new(critic.q_net.arch());
    for (t, &target) in batch.iter().zip(targets) {
        let x = critic_input(&t.state, t.action[0]);
        let pred = critic.q_net.forward_cached(&x, &mut cache)?;
        let err = pred - target;
        loss += err * err * inv;
        critic.q_net.backprop_weights(&x, &cache, 2.0 * err * inv, grad);
    }
    Ok(loss)
}

/// Temporal-difference loss and its weight gradient on a batch, with
/// targets held fixed (computed from the frozen copy before any step).
pub fn critic_batch_grad(
    critic: &CriticNet,
    batch: &[Transition],
    policy: &PolicyNet,
) -> Result<(f64, Vec<f64>)> {
    let targets = batch_targets(critic, batch, policy)?;
    let mut grad = vec![0.0; critic.q_net.param_count()];
    let loss = loss_and_grad_against(critic, batch, &targets, &mut grad)?;
    Ok((loss, grad))
}

/// One descent step on the batch TD loss; returns the post-step loss
/// against the same (pre-step) targets. The frozen target copy refreshes
/// every `target_period` calls.
pub fn critic_update(
    critic: &mut CriticNet,
    batch: &[Transition],
    policy: &PolicyNet,
    opt: &mut GradientOptimizer,
) -> Result<f64> {
    // Targets come from the frozen copy and the (unchanged) policy, so one
    // computation serves both the gradient and the post-step loss.
    let targets = batch_targets(critic, batch, policy)?;
    let mut grad = vec![0.0; critic.q_net.param_count()];
    loss_and_grad_against(critic, batch, &targets, &mut grad)?;
    let mut weights = critic.q_net.weights().to_vec();
    opt.step(&mut weights, &grad)?;
    critic.q_net.set_weights(&weights)?;

    let mut post_loss = 0.0;
    let inv = 1.0 / batch.len() as f64;
    for (t, &target) in batch.iter().zip(&targets) {
        let pred = critic.value(&t.state, t.action[0])?;
        post_loss += (pred - target) * (pred - target) * inv;
    }
    if !post_loss.is_finite() {
        return Err(Error::TrainingDiverged(format!(
            "critic loss became {post_loss}"
        )));
    }
    critic.updates_since_sync += 1;
    if critic.updates_since_sync >= critic.target_period {
        critic.sync_target();
    }
    Ok(post_loss)
}

/// One ascent step on the score-function objective: the batch mean of
/// `grad log pi(a|s) * (Q(s, a) - Q(s, a_det))` with actions freshly
/// sampled from the current policy and `a_det` the deterministic action.
/// Subtracting the state-dependent value `Q(s, a_det)` leaves the expected
/// gradient unchanged (the score has zero mean for any quantity that does
/// not depend on the sampled action) while removing the absolute return
/// scale from the per-sample weights; without it the estimator drowns in
/// variance whenever returns are far from zero. Returns the batch-mean
/// critic value (the objective estimate). `q_fn` is usually the critic but
/// any bounded scorer works.
pub fn actor_update<Q>(
    policy: &mut PolicyNet,
    states: &[GeneralizedState],
    q_fn: Q,
    opt: &mut GradientOptimizer,
    rng: &mut impl Rng,
) -> Result<f64>
where
    Q: Fn(&GeneralizedState, f64) -> Result<f64>,
{
    if states.is_empty() {
        return Err(Error::EmptyBatch("actor batch"));
    }
    let count = policy.mean_net.param_count();
    let inv = 1.0 / states.len() as f64;
    let sigma = policy.log_std.exp();
    let mut ascent = vec![0.0; count + 1];
    let mut objective = 0.0;
    let mut cache = crate::nn::ForwardCache::new(policy.mean_net.arch());
    for s in states {
        if !s.is_finite() {
            return Err(Error::NonFinite("actor batch state"));
        }
        let x = observe(s);
        let mean = policy.mean_net.forward_cached(&x, &mut cache)?;
        let baseline = q_fn(s, policy.squash(mean))?;
        let xi: f64 = StandardNormal.sample(rng);
        let u = mean + sigma * xi;
        let action = policy.squash(u);
        let value = q_fn(s, action)?;
        objective += value * inv;
        let advantage = value - baseline;
        // d log pi / d mean = xi / sigma; d log pi / d log_std = xi^2 - 1
        // (action held fixed; the squash correction drops out).
        policy.mean_net.backprop_weights(
            &x,
            &cache,
            (xi / sigma) * advantage * inv,
            &mut ascent[..count],
        );
        ascent[count] += (xi * xi - 1.0) * advantage * inv;
    }
    if !objective.is_finite() {
        return Err(Error::TrainingDiverged(format!(
            "actor objective became {objective}"
        )));
    }

    // The optimizer descends, so feed the negated ascent direction.
    for g in ascent.iter_mut() {
        *g = -*g;
    }
    let mut params = policy.mean_net.weights().to_vec();
    params.push(policy.log_std);
    opt.step(&mut params, &ascent)?;
    policy.log_std = params.pop().unwrap().clamp(policy.log_std_floor, LOG_STD_MAX);
    policy.mean_net.set_weights(&params)?;
    Ok(objective)
}

/// Play out the environment from its current state until `done`, returning
/// the undiscounted return.
pub fn run_episode(
    policy: &PolicyNet,
    env: &mut PendulumEnv,
    stochastic: bool,
    rng: &mut impl Rng,
) -> Result<f64> {
    let mut total = 0.0;
    loop {
        let action = if stochastic {
            policy.act(&env.state(), true, rng)?.action[0]
        } else {
            policy.deterministic_action(&env.state())?
        };
        let tr = env.step(action)?;
        total += tr.reward;
        if tr.done {
            return Ok(total);
        }
    }
}

/// Mean undiscounted return of the deterministic policy over fresh
/// episodes in a dedicated seeded environment.
pub fn evaluate_policy(
    policy: &PolicyNet,
    params: &PendulumParams,
    episodes: usize,
    seed: u64,
) -> Result<f64> {
    if episodes == 0 {
        return Err(Error::invalid("episodes", "must be at least 1"));
    }
    let mut env = PendulumEnv::new(params.clone(), seed)?;
    // Deterministic rollouts never draw from this; any rng satisfies the
    // signature.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut total = 0.0;
    for _ in 0..episodes {
        env.reset();
        total += run_episode(policy, &mut env, false, &mut rng)?;
    }
    Ok(total / episodes as f64)
}
