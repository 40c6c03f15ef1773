//! The model-based training loop: collect real transitions, train the
//! dynamics model when enough data exists, roll the model out into a
//! synthetic buffer once it is trustworthy, and update the actor-critic on
//! the union of real and synthetic experience. A model-free mode runs the
//! same loop with every model stage disabled.
//!
//! Every stage gate is strict and logged, and all randomness flows from
//! per-purpose streams derived from one run seed, so a full run is exactly
//! reproducible from its config.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::agent::{actor_update, critic_update, evaluate_policy, obs_dim, CriticNet, PolicyNet};
use crate::envs::{accel_targets, wrap_angle, PendulumEnv, PendulumParams, Provenance, Transition};
use crate::error::{Error, Result};
use crate::integrate::{rollout, RkCoefficients};
use crate::lnn::{
    accel, init_calibrated_lagrangian, physical_residual_grad, probe_grid, GeneralizedState,
    LagrangianModel, CALIBRATED_CURVATURE,
};
use crate::nn::{Activation, NetworkArch, ScalarNetwork};
use crate::optim::{
    ekf_train_epochs, gradient_train_epochs, AdamParams, GaussianWeightBelief, GradientOptimizer,
};

/// Which of the three compared configurations a run executes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Learned Lagrangian model trained by Adam, plus model rollouts.
    LnnAdam,
    /// Learned Lagrangian model trained by the Kalman filter, plus rollouts.
    LnnEkf,
    /// Model-free baseline: agent trained on real transitions only.
    Mfrl,
}

impl Variant {
    pub fn label(&self) -> &'static str {
        match self {
            Variant::LnnAdam => "lnn-adam",
            Variant::LnnEkf => "lnn-ekf",
            Variant::Mfrl => "mfrl",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "lnn-adam" => Ok(Variant::LnnAdam),
            "lnn-ekf" => Ok(Variant::LnnEkf),
            "mfrl" => Ok(Variant::Mfrl),
            other => Err(Error::invalid(
                "variant",
                format!("{other:?} (expected lnn-adam, lnn-ekf, or mfrl)"),
            )),
        }
    }

    pub fn uses_model(&self) -> bool {
        !matches!(self, Variant::Mfrl)
    }
}

/// Ring buffer of transitions from exactly one source.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    provenance: Provenance,
    storage: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, provenance: Provenance) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::invalid("buffer capacity", "must be at least 1"));
        }
        Ok(ReplayBuffer {
            capacity,
            provenance,
            storage: VecDeque::with_capacity(capacity.min(4096)),
        })
    }

    pub fn len(&self) -> usize {
        self.storage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.storage.is_empty()
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    /// Append one transition, evicting the oldest at capacity. Transitions
    /// from the wrong world are a logic bug and are rejected.
    pub fn push(&mut self, t: Transition) -> Result<()> {
        if t.provenance != self.provenance {
            return Err(Error::invalid(
                "transition provenance",
                format!("{:?} pushed into a {:?} buffer", t.provenance, self.provenance),
            ));
        }
        if self.storage.len() == self.capacity {
            self.storage.pop_front();
        }
        self.storage.push_back(t);
        Ok(())
    }

    /// Uniform sample with replacement.
    pub fn sample(&self, count: usize, rng: &mut impl Rng) -> Result<Vec<Transition>> {
        if self.storage.is_empty() {
            return Err(Error::EmptyBatch("replay buffer"));
        }
        Ok((0..count)
            .map(|_| self.storage[rng.random_range(0..self.storage.len())].clone())
            .collect())
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.storage.iter()
    }
}

/// All knobs of one run. Defaults reproduce the desk-scale swing-up
/// comparison.
#[derive(Debug, Clone)]
pub struct DynaConfig {
    pub variant: Variant,
    pub seed: u64,

    /// Outer episodes (M) and real steps collected per episode (T).
    pub episodes: usize,
    pub steps_per_episode: usize,

    pub buffer_capacity: usize,
    /// Model training waits for strictly more than this many real steps.
    pub env_buffer_threshold: usize,
    /// Physical-loss updates wait for strictly more than this many model steps.
    pub model_buffer_threshold: usize,
    /// Rollouts wait for normalized model loss strictly below this.
    pub data_loss_threshold: f64,
    /// Train the model every this many episodes.
    pub model_train_cadence: usize,
    /// Transitions sampled per model-training event.
    pub model_train_batch: usize,
    /// Full passes per training event, by trainer.
    pub adam_model_passes: usize,
    pub ekf_model_passes: usize,
    /// Minibatch size inside gradient model training.
    pub model_batch_size: usize,
    pub model_lr: f64,
    pub model_hidden: Vec<usize>,
    pub ekf_prior_var: f64,
    pub ekf_process_noise: f64,
    pub ekf_meas_noise: f64,

    /// Rollout rounds per episode (L_M), starts per round (n_b), and steps
    /// per start.
    pub rollout_rounds: usize,
    pub rollout_batch: usize,
    pub rollout_horizon: usize,

    pub physical_loss_enabled: bool,
    pub physical_loss_weight: f64,
    pub physical_loss_batch: usize,

    pub agent_updates_per_episode: usize,
    pub agent_batch: usize,
    /// Agent updates start once this many real steps have been collected.
    pub warmup_steps: usize,

    /// Evaluate every this many env steps, averaging this many episodes.
    pub eval_cadence: usize,
    pub eval_episodes: usize,

    pub gamma: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub target_period: usize,
    pub policy_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub log_std_init: f64,
    pub min_log_std: f64,

    pub pendulum: PendulumParams,
}

impl Default for DynaConfig {
    fn default() -> Self {
        DynaConfig {
            variant: Variant::LnnAdam,
            seed: 0,
            episodes: 300,
            steps_per_episode: 200,
            buffer_capacity: 100_000,
            env_buffer_threshold: 1000,
            model_buffer_threshold: 1000,
            data_loss_threshold: 0.1,
            model_train_cadence: 1,
            model_train_batch: 512,
            adam_model_passes: 5,
            ekf_model_passes: 1,
            model_batch_size: 64,
            model_lr: 3e-3,
            model_hidden: vec![32],
            ekf_prior_var: 0.01,
            ekf_process_noise: 1e-6,
            ekf_meas_noise: 5.0,
            rollout_rounds: 10,
            rollout_batch: 32,
            rollout_horizon: 5,
            physical_loss_enabled: false,
            physical_loss_weight: 0.1,
            physical_loss_batch: 32,
            agent_updates_per_episode: 200,
            agent_batch: 64,
            warmup_steps: 1000,
            eval_cadence: 1000,
            eval_episodes: 5,
            gamma: 0.99,
            actor_lr: 1e-4,
            critic_lr: 1e-3,
            target_period: 200,
            policy_hidden: vec![64, 64],
            critic_hidden: vec![64, 64],
            log_std_init: -0.5,
            min_log_std: crate::agent::LOG_STD_MIN,
            pendulum: PendulumParams::default(),
        }
    }
}

impl DynaConfig {
    pub fn validate(&self) -> Result<()> {
        self.pendulum.validate()?;
        for (name, v) in [
            ("episodes", self.episodes),
            ("steps_per_episode", self.steps_per_episode),
            ("buffer_capacity", self.buffer_capacity),
            ("model_train_cadence", self.model_train_cadence),
            ("model_train_batch", self.model_train_batch),
            ("adam_model_passes", self.adam_model_passes),
            ("ekf_model_passes", self.ekf_model_passes),
            ("model_batch_size", self.model_batch_size),
            ("rollout_rounds", self.rollout_rounds),
            ("rollout_batch", self.rollout_batch),
            ("rollout_horizon", self.rollout_horizon),
            ("physical_loss_batch", self.physical_loss_batch),
            ("agent_batch", self.agent_batch),
            ("eval_cadence", self.eval_cadence),
            ("eval_episodes", self.eval_episodes),
            ("target_period", self.target_period),
        ] {
            if v == 0 {
                return Err(Error::invalid(name, "must be at least 1"));
            }
        }
        for (name, v) in [
            ("data_loss_threshold", self.data_loss_threshold),
            ("physical_loss_weight", self.physical_loss_weight),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(name, format!("{v}")));
            }
        }
        for (name, v) in [
            ("model_lr", self.model_lr),
            ("actor_lr", self.actor_lr),
            ("critic_lr", self.critic_lr),
            ("ekf_prior_var", self.ekf_prior_var),
            ("ekf_meas_noise", self.ekf_meas_noise),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(name, format!("{v} (must be positive)")));
            }
        }
        if !(self.ekf_process_noise.is_finite() && self.ekf_process_noise >= 0.0) {
            return Err(Error::invalid(
                "ekf_process_noise",
                format!("{}", self.ekf_process_noise),
            ));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::invalid("gamma", format!("{} (must be in [0,1))", self.gamma)));
        }
        if !self.log_std_init.is_finite() {
            return Err(Error::NonFinite("log_std_init"));
        }
        if !(crate::agent::LOG_STD_MIN..=crate::agent::LOG_STD_MAX)
            .contains(&self.min_log_std)
        {
            return Err(Error::invalid(
                "min_log_std",
                format!("{} outside the representable width band", self.min_log_std),
            ));
        }
        Ok(())
    }

    /// Total real environment steps the run will take.
    pub fn total_env_steps(&self) -> usize {
        self.episodes * self.steps_per_episode
    }
}

/// Derive an independent named random stream from the run seed.
fn stream(seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15)))
}

/// Weight-training state carried across episodes.
#[derive(Debug, Clone)]
pub enum ModelTrainer {
    Adam(GradientOptimizer),
    Ekf(GaussianWeightBelief),
}

/// What a model-training event produced.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelTrainOutcome {
    /// Final full-batch acceleration MSE.
    pub loss: f64,
    /// Loss divided by the batch target variance; the rollout gate reads this.
    pub normalized: f64,
    pub target_variance: f64,
}

/// Per-episode gate decisions and stage outcomes, for auditing a run.
#[derive(Debug, Clone, PartialEq)]
pub enum GateEvent {
    ModelTrainSkipped {
        episode: usize,
        buffered: usize,
        threshold: usize,
    },
    ModelTrainFailed {
        episode: usize,
        reason: String,
    },
    ModelTrained {
        episode: usize,
        loss: f64,
        normalized: f64,
    },
    RolloutsSkipped {
        episode: usize,
        normalized_loss: Option<f64>,
        threshold: f64,
    },
    RolloutsDone {
        episode: usize,
        added: usize,
        aborted: usize,
    },
    PhysicalUpdate {
        episode: usize,
        residual: f64,
    },
}

/// Everything a finished (or aborted) run hands back.
#[derive(Debug)]
pub struct RunReport {
    pub variant: Variant,
    pub seed: u64,
    /// (env_steps, mean evaluation return), evaluated every eval_cadence
    /// steps starting at 0.
    pub curve: Vec<(usize, f64)>,
    pub gates: Vec<GateEvent>,
    pub env_steps: usize,
    pub env_buffer_len: usize,
    pub model_buffer_len: usize,
    /// Normalized model loss after each training event.
    pub model_loss_trace: Vec<f64>,
    pub rollout_aborts: usize,
    pub model: Option<ScalarNetwork>,
    pub policy: PolicyNet,
    pub critic: CriticNet,
    /// Present when the run aborted early; the curve holds the prefix.
    pub error: Option<String>,
}

/// Collect exactly `steps` real transitions under the stochastic policy,
/// resetting the environment whenever an episode ends. Returns the number
/// of steps taken (always `steps`).
pub fn collect_real(
    env: &mut PendulumEnv,
    policy: &PolicyNet,
    buffer: &mut ReplayBuffer,
    steps: usize,
    rng: &mut impl Rng,
) -> Result<usize> {
    for _ in 0..steps {
        let action = policy.act(&env.state(), true, rng)?.action[0];
        let tr = env.step(action)?;
        let done = tr.done;
        buffer.push(tr)?;
        if done {
            env.reset();
        }
    }
    Ok(steps)
}

/// Train the model on a sampled batch if strictly more than the threshold
/// of real data exists; otherwise change nothing and return `None`.
pub fn maybe_train_model(
    d_env: &ReplayBuffer,
    model: &mut ScalarNetwork,
    trainer: &mut ModelTrainer,
    cfg: &DynaConfig,
    rng: &mut impl Rng,
) -> Result<Option<ModelTrainOutcome>> {
    if d_env.len() <= cfg.env_buffer_threshold {
        return Ok(None);
    }
    let batch = d_env.sample(cfg.model_train_batch, rng)?;
    let samples = accel_targets(&batch, &cfg.pendulum)?;

    let report = match trainer {
        ModelTrainer::Adam(opt) => gradient_train_epochs(
            model,
            &samples,
            cfg.adam_model_passes,
            cfg.model_batch_size,
            opt,
            rng,
        )?,
        ModelTrainer::Ekf(belief) => {
            ekf_train_epochs(model, belief, &samples, cfg.ekf_model_passes, rng)?
        }
    };

    let mean: f64 = samples
        .iter()
        .flat_map(|s| s.target.iter())
        .sum::<f64>()
        / samples.len() as f64;
    let target_variance = samples
        .iter()
        .flat_map(|s| s.target.iter())
        .map(|y| (y - mean) * (y - mean))
        .sum::<f64>()
        / samples.len() as f64;
    let loss = report.final_loss();
    let normalized = if target_variance > 1e-12 {
        loss / target_variance
    } else {
        loss
    };
    Ok(Some(ModelTrainOutcome {
        loss,
        normalized,
        target_variance,
    }))
}

fn wrapped(state: &GeneralizedState) -> GeneralizedState {
    GeneralizedState {
        q: state.q.iter().map(|&q| wrap_angle(q)).collect(),
        qdot: state.qdot.clone(),
    }
}

/// How a batch of model rollouts went.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RolloutOutcome {
    pub added: usize,
    pub aborted: usize,
}

/// Roll the learned model forward under the stochastic policy from buffered
/// start states and store the synthetic transitions. Start states are drawn
/// half from real and half from synthetic data once the latter exists.
///
/// Callers are responsible for the trust gate (normalized data loss below
/// threshold); this function assumes it already passed.
pub fn model_rollouts<M: LagrangianModel + ?Sized>(
    model: &M,
    policy: &PolicyNet,
    d_env: &ReplayBuffer,
    d_mod: &mut ReplayBuffer,
    cfg: &DynaConfig,
    rng: &mut impl Rng,
) -> Result<RolloutOutcome> {
    let coeffs = RkCoefficients::default();
    let p = &cfg.pendulum;
    let mut added = 0usize;
    let mut aborted = 0usize;
    for _ in 0..cfg.rollout_rounds {
        for b in 0..cfg.rollout_batch {
            // Alternate sources for a 1:1 mix when both buffers have data.
            let use_mod = !d_mod.is_empty() && b % 2 == 1;
            let start = if use_mod {
                d_mod.sample(1, rng)?[0].state.clone()
            } else {
                d_env.sample(1, rng)?[0].state.clone()
            };

            let mut policy_rng = ChaCha8Rng::seed_from_u64(rng.random());
            let run = rollout(
                &mut |s: &GeneralizedState, f: &[f64]| accel(model, &wrapped(s), f),
                &mut |s: &GeneralizedState, _| {
                    policy
                        .act(&wrapped(s), true, &mut policy_rng)
                        .map(|a| a.action)
                        .unwrap_or_else(|_| vec![0.0])
                },
                start,
                p.dt,
                cfg.rollout_horizon,
                &coeffs,
            )?;
            if run.aborted.is_some() {
                aborted += 1;
            }
            for step in &run.steps {
                // Leaving the speed envelope means leaving the model's
                // training range; stop trusting the trajectory there.
                if step.next.qdot.iter().any(|v| v.abs() > p.speed_limit) {
                    break;
                }
                let state = wrapped(&step.state);
                let reward = p.reward(state.q[0], state.qdot[0], step.force[0]);
                d_mod.push(Transition {
                    state,
                    action: step.force.clone(),
                    next: wrapped(&step.next),
                    reward,
                    done: false,
                    provenance: Provenance::Model,
                })?;
                added += 1;
            }
        }
    }
    Ok(RolloutOutcome { added, aborted })
}

/// One weighted gradient step on the discrete Euler-Lagrange residual over
/// a sampled batch of stored model transitions. With weight zero the model
/// is left untouched (only the residual is reported).
pub fn physical_loss_update(
    model: &mut ScalarNetwork,
    d_mod: &ReplayBuffer,
    cfg: &DynaConfig,
    opt: &mut GradientOptimizer,
    rng: &mut impl Rng,
) -> Result<f64> {
    let batch = d_mod.sample(cfg.physical_loss_batch, rng)?;
    let inv = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    let mut grad = vec![0.0; model.param_count()];
    for t in &batch {
        let (value, g) =
            physical_residual_grad(model, &t.state, &t.action, &t.next, cfg.pendulum.dt)?;
        total += value * inv;
        for (acc, gi) in grad.iter_mut().zip(&g) {
            *acc += cfg.physical_loss_weight * gi * inv;
        }
    }
    if cfg.physical_loss_weight > 0.0 {
        let mut weights = model.weights().to_vec();
        opt.step(&mut weights, &grad)?;
        model.set_weights(&weights)?;
    }
    Ok(total)
}

/// Draw a batch from the union of both buffers, 1:1 when both have data.
fn union_batch(
    d_env: &ReplayBuffer,
    d_mod: &ReplayBuffer,
    count: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Transition>> {
    if d_mod.is_empty() {
        return d_env.sample(count, rng);
    }
    if d_env.is_empty() {
        return d_mod.sample(count, rng);
    }
    let half = count / 2;
    let mut batch = d_env.sample(count - half, rng)?;
    batch.extend(d_mod.sample(half, rng)?);
    Ok(batch)
}

struct RunState {
    env: PendulumEnv,
    policy: PolicyNet,
    critic: CriticNet,
    model: Option<ScalarNetwork>,
    trainer: Option<ModelTrainer>,
    actor_opt: GradientOptimizer,
    critic_opt: GradientOptimizer,
    physical_opt: GradientOptimizer,
    d_env: ReplayBuffer,
    d_mod: ReplayBuffer,
    env_steps: usize,
    eval_count: usize,
    curve: Vec<(usize, f64)>,
    gates: Vec<GateEvent>,
    model_loss_trace: Vec<f64>,
    rollout_aborts: usize,
    collect_rng: ChaCha8Rng,
    train_rng: ChaCha8Rng,
    rollout_rng: ChaCha8Rng,
    agent_rng: ChaCha8Rng,
}

impl RunState {
    fn new(cfg: &DynaConfig) -> Result<Self> {
        let env = PendulumEnv::new(
            cfg.pendulum.clone(),
            cfg.seed.wrapping_add(0x9E37_79B9_7F4A_7C15),
        )?;

        let policy_arch = NetworkArch::mlp(obs_dim(1), &cfg.policy_hidden, Activation::Tanh)?;
        let mut policy = PolicyNet::new(
            ScalarNetwork::init(policy_arch, &mut stream(cfg.seed, 2)),
            cfg.log_std_init,
            cfg.pendulum.torque_limit,
        )?;
        policy.set_log_std_floor(cfg.min_log_std)?;

        let critic_arch = NetworkArch::mlp(obs_dim(1) + 1, &cfg.critic_hidden, Activation::Tanh)?;
        let critic = CriticNet::new(
            ScalarNetwork::init(critic_arch, &mut stream(cfg.seed, 3)),
            cfg.gamma,
            cfg.target_period,
        )?;

        let (model, trainer) = if cfg.variant.uses_model() {
            let arch = NetworkArch::mlp(2, &cfg.model_hidden, Activation::Softplus)?;
            let probes = probe_grid(std::f64::consts::PI, cfg.pendulum.speed_limit, 5);
            let net = init_calibrated_lagrangian(
                &arch,
                &probes,
                CALIBRATED_CURVATURE,
                8,
                &mut stream(cfg.seed, 4),
            )?;
            let trainer = match cfg.variant {
                Variant::LnnAdam => ModelTrainer::Adam(GradientOptimizer::adam(
                    net.param_count(),
                    AdamParams {
                        lr: cfg.model_lr,
                        ..AdamParams::default()
                    },
                )),
                Variant::LnnEkf => ModelTrainer::Ekf(GaussianWeightBelief::new(
                    net.weights(),
                    cfg.ekf_prior_var,
                    cfg.ekf_process_noise,
                    cfg.ekf_meas_noise,
                )?),
                Variant::Mfrl => unreachable!(),
            };
            (Some(net), Some(trainer))
        } else {
            (None, None)
        };

        let actor_opt = GradientOptimizer::adam(
            policy.param_count(),
            AdamParams {
                lr: cfg.actor_lr,
                ..AdamParams::default()
            },
        );
        let critic_opt = GradientOptimizer::adam(
            critic.q_net().param_count(),
            AdamParams {
                lr: cfg.critic_lr,
                ..AdamParams::default()
            },
        );
        let physical_opt = GradientOptimizer::adam(
            model.as_ref().map_or(1, |m| m.param_count()),
            AdamParams {
                lr: cfg.model_lr,
                ..AdamParams::default()
            },
        );

        Ok(RunState {
            env,
            policy,
            critic,
            model,
            trainer,
            actor_opt,
            critic_opt,
            physical_opt,
            d_env: ReplayBuffer::new(cfg.buffer_capacity, Provenance::Env)?,
            d_mod: ReplayBuffer::new(cfg.buffer_capacity, Provenance::Model)?,
            env_steps: 0,
            eval_count: 0,
            curve: Vec::new(),
            gates: Vec::new(),
            model_loss_trace: Vec::new(),
            rollout_aborts: 0,
            collect_rng: stream(cfg.seed, 5),
            train_rng: stream(cfg.seed, 6),
            rollout_rng: stream(cfg.seed, 7),
            agent_rng: stream(cfg.seed, 8),
        })
    }

    fn evaluate(&mut self, cfg: &DynaConfig) -> Result<()> {
        let eval_seed = cfg
            .seed
            .wrapping_add((9000 + self.eval_count as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let ret = evaluate_policy(&self.policy, &cfg.pendulum, cfg.eval_episodes, eval_seed)?;
        self.curve.push((self.env_steps, ret));
        self.eval_count += 1;
        Ok(())
    }

    /// Collect one episode's worth of steps, evaluating at every
    /// eval-cadence boundary crossed on the way.
    fn collect_episode(&mut self, cfg: &DynaConfig) -> Result<()> {
        let mut remaining = cfg.steps_per_episode;
        while remaining > 0 {
            let until_eval = cfg.eval_cadence - (self.env_steps % cfg.eval_cadence);
            let chunk = remaining.min(until_eval);
            collect_real(
                &mut self.env,
                &self.policy,
                &mut self.d_env,
                chunk,
                &mut self.collect_rng,
            )?;
            self.env_steps += chunk;
            remaining -= chunk;
            if self.env_steps % cfg.eval_cadence == 0 {
                self.evaluate(cfg)?;
            }
        }
        Ok(())
    }

    fn model_stages(&mut self, cfg: &DynaConfig, episode: usize) -> Result<Option<f64>> {
        let mut latest_normalized = None;
        let (Some(model), Some(trainer)) = (self.model.as_mut(), self.trainer.as_mut()) else {
            return Ok(None);
        };

        if episode % cfg.model_train_cadence == 0 {
            if self.d_env.len() <= cfg.env_buffer_threshold {
                self.gates.push(GateEvent::ModelTrainSkipped {
                    episode,
                    buffered: self.d_env.len(),
                    threshold: cfg.env_buffer_threshold,
                });
            } else {
                match maybe_train_model(&self.d_env, model, trainer, cfg, &mut self.train_rng) {
                    Ok(Some(outcome)) => {
                        self.gates.push(GateEvent::ModelTrained {
                            episode,
                            loss: outcome.loss,
                            normalized: outcome.normalized,
                        });
                        self.model_loss_trace.push(outcome.normalized);
                        latest_normalized = Some(outcome.normalized);
                    }
                    Ok(None) => unreachable!("buffer gate already checked"),
                    // A numerically degenerate batch should not kill the
                    // run; skip the episode's model work and keep going.
                    Err(
                        e @ (Error::SingularDynamics { .. }
                        | Error::IllConditionedUpdate { .. }
                        | Error::InsufficientData(_)),
                    ) => {
                        self.gates.push(GateEvent::ModelTrainFailed {
                            episode,
                            reason: e.to_string(),
                        });
                        return Ok(None);
                    }
                    Err(other) => return Err(other),
                }
            }
        }

        let gate_open = latest_normalized.is_some_and(|l| l < cfg.data_loss_threshold);
        if gate_open {
            let outcome = model_rollouts(
                &*model,
                &self.policy,
                &self.d_env,
                &mut self.d_mod,
                cfg,
                &mut self.rollout_rng,
            )?;
            self.rollout_aborts += outcome.aborted;
            self.gates.push(GateEvent::RolloutsDone {
                episode,
                added: outcome.added,
                aborted: outcome.aborted,
            });
        } else {
            self.gates.push(GateEvent::RolloutsSkipped {
                episode,
                normalized_loss: latest_normalized,
                threshold: cfg.data_loss_threshold,
            });
        }

        if cfg.physical_loss_enabled
            && self.d_env.len() > cfg.env_buffer_threshold
            && self.d_mod.len() > cfg.model_buffer_threshold
        {
            let residual = physical_loss_update(
                model,
                &self.d_mod,
                cfg,
                &mut self.physical_opt,
                &mut self.train_rng,
            )?;
            // A raw weight step bypasses the filter posterior; keep the
            // belief mean honest.
            if let ModelTrainer::Ekf(belief) = trainer {
                belief.set_mean(model.weights())?;
            }
            self.gates.push(GateEvent::PhysicalUpdate { episode, residual });
        }

        Ok(latest_normalized)
    }

    fn agent_updates(&mut self, cfg: &DynaConfig) -> Result<()> {
        if self.env_steps <= cfg.warmup_steps || self.d_env.is_empty() {
            return Ok(());
        }
        for _ in 0..cfg.agent_updates_per_episode {
            let batch = union_batch(&self.d_env, &self.d_mod, cfg.agent_batch, &mut self.agent_rng)?;
            critic_update(&mut self.critic, &batch, &self.policy, &mut self.critic_opt)?;

            let state_batch: Vec<GeneralizedState> =
                union_batch(&self.d_env, &self.d_mod, cfg.agent_batch, &mut self.agent_rng)?
                    .into_iter()
                    .map(|t| t.state)
                    .collect();
            let critic = &self.critic;
            actor_update(
                &mut self.policy,
                &state_batch,
                |s, a| critic.value(s, a),
                &mut self.actor_opt,
                &mut self.agent_rng,
            )?;
        }
        Ok(())
    }
}

/// Execute the full loop. Configuration errors fail fast; runtime errors
/// mid-run return a partial report with `error` set.
pub fn run(cfg: &DynaConfig) -> Result<RunReport> {
    cfg.validate()?;
    let mut state = RunState::new(cfg)?;

    let mut failure: Option<String> = None;
    // Baseline evaluation of the untrained policy anchors the curve at 0.
    if let Err(e) = state.evaluate(cfg) {
        failure = Some(e.to_string());
    }

    if failure.is_none() {
        for episode in 0..cfg.episodes {
            let outcome = state
                .collect_episode(cfg)
                .and_then(|()| state.model_stages(cfg, episode))
                .and_then(|_| state.agent_updates(cfg));
            if let Err(e) = outcome {
                failure = Some(format!("episode {episode}: {e}"));
                break;
            }
        }
    }

    Ok(RunReport {
        variant: cfg.variant,
        seed: cfg.seed,
        curve: state.curve,
        gates: state.gates,
        env_steps: state.env_steps,
        env_buffer_len: state.d_env.len(),
        model_buffer_len: state.d_mod.len(),
        model_loss_trace: state.model_loss_trace,
        rollout_aborts: state.rollout_aborts,
        model: state.model,
        policy: state.policy,
        critic: state.critic,
        error: failure,
    })
}
