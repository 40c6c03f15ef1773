//! Flat `key = value` experiment configuration with `[section]` headers.
//!
//! Every error carries the offending line number and the fully qualified
//! field name, because a config typo at the start of an hours-long sweep
//! should be a ten-second fix. Unknown keys and duplicate keys are errors
//! for the same reason.

use std::collections::BTreeMap;
use std::path::PathBuf;

use lagdyna::dyna::{DynaConfig, Variant};
use lagdyna::report::canonical_kv;

/// Fully resolved experiment: which variants to run, on which seeds, where
/// to write, and the loop configuration shared by every run.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub dyna: DynaConfig,
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub variant: Option<String>,
    pub seeds: Option<Vec<u64>>,
    pub out: Option<PathBuf>,
}

struct RawEntry {
    value: String,
    line: usize,
    used: bool,
}

struct ConfigMap {
    entries: BTreeMap<String, RawEntry>,
}

fn parse_raw(text: &str) -> Result<ConfigMap, String> {
    let mut entries = BTreeMap::new();
    let mut section = String::new();
    for (idx, raw_line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw_line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let Some(name) = name.strip_suffix(']') else {
                return Err(format!("line {line_no}: unterminated section header {line:?}"));
            };
            let name = name.trim();
            if name.is_empty() {
                return Err(format!("line {line_no}: empty section name"));
            }
            section = name.to_string();
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(format!(
                "line {line_no}: expected 'key = value' or '[section]', got {line:?}"
            ));
        };
        let key = key.trim();
        if key.is_empty() {
            return Err(format!("line {line_no}: empty key"));
        }
        if section.is_empty() {
            return Err(format!("line {line_no}: key {key:?} appears before any [section]"));
        }
        let full = format!("{section}.{key}");
        if let Some(prev) = entries.get(&full) {
            let prev: &RawEntry = prev;
            return Err(format!(
                "line {line_no}: duplicate key {full} (first set on line {})",
                prev.line
            ));
        }
        entries.insert(
            full,
            RawEntry {
                value: value.trim().to_string(),
                line: line_no,
                used: false,
            },
        );
    }
    Ok(ConfigMap { entries })
}

impl ConfigMap {
    fn take(&mut self, key: &str) -> Option<(String, usize)> {
        self.entries.get_mut(key).map(|e| {
            e.used = true;
            (e.value.clone(), e.line)
        })
    }

    fn parse_as<T: std::str::FromStr>(&mut self, key: &str, kind: &str) -> Result<Option<T>, String> {
        match self.take(key) {
            None => Ok(None),
            Some((value, line)) => value.parse().map(Some).map_err(|_| {
                format!("line {line}: {key}: expected {kind}, got {value:?}")
            }),
        }
    }

    fn usize_into(&mut self, key: &str, slot: &mut usize) -> Result<(), String> {
        if let Some(v) = self.parse_as::<usize>(key, "a non-negative integer")? {
            *slot = v;
        }
        Ok(())
    }

    fn f64_into(&mut self, key: &str, slot: &mut f64) -> Result<(), String> {
        if let Some(v) = self.parse_as::<f64>(key, "a number")? {
            *slot = v;
        }
        Ok(())
    }

    fn bool_into(&mut self, key: &str, slot: &mut bool) -> Result<(), String> {
        if let Some(v) = self.parse_as::<bool>(key, "true or false")? {
            *slot = v;
        }
        Ok(())
    }

    fn list_into<T: std::str::FromStr>(
        &mut self,
        key: &str,
        kind: &str,
    ) -> Result<Option<Vec<T>>, String> {
        match self.take(key) {
            None => Ok(None),
            Some((value, line)) => value
                .split(',')
                .map(|part| {
                    part.trim().parse().map_err(|_| {
                        format!("line {line}: {key}: expected {kind}, got {:?}", part.trim())
                    })
                })
                .collect::<Result<Vec<T>, String>>()
                .map(Some),
        }
    }

    fn first_unused(&self) -> Option<(&str, usize)> {
        self.entries
            .iter()
            .filter(|(_, e)| !e.used)
            .min_by_key(|(_, e)| e.line)
            .map(|(k, e)| (k.as_str(), e.line))
    }
}

/// Parse the config text and apply command-line overrides. Errors name the
/// line and field.
pub fn resolve(text: &str, overrides: &Overrides) -> Result<ExperimentConfig, String> {
    let mut map = parse_raw(text)?;
    let mut dyna = DynaConfig::default();

    let p = &mut dyna.pendulum;
    map.f64_into("env.mass", &mut p.mass)?;
    map.f64_into("env.length", &mut p.length)?;
    map.f64_into("env.gravity", &mut p.gravity)?;
    map.f64_into("env.dt", &mut p.dt)?;
    map.f64_into("env.torque_limit", &mut p.torque_limit)?;
    map.f64_into("env.speed_limit", &mut p.speed_limit)?;
    map.usize_into("env.max_steps", &mut p.max_steps)?;

    map.usize_into("loop.episodes", &mut dyna.episodes)?;
    map.usize_into("loop.steps_per_episode", &mut dyna.steps_per_episode)?;
    map.usize_into("loop.buffer_capacity", &mut dyna.buffer_capacity)?;
    map.usize_into("loop.env_buffer_threshold", &mut dyna.env_buffer_threshold)?;
    map.usize_into("loop.model_buffer_threshold", &mut dyna.model_buffer_threshold)?;
    map.f64_into("loop.data_loss_threshold", &mut dyna.data_loss_threshold)?;
    map.usize_into("loop.model_train_cadence", &mut dyna.model_train_cadence)?;
    map.usize_into("loop.model_train_batch", &mut dyna.model_train_batch)?;
    map.usize_into("loop.rollout_rounds", &mut dyna.rollout_rounds)?;
    map.usize_into("loop.rollout_batch", &mut dyna.rollout_batch)?;
    map.usize_into("loop.rollout_horizon", &mut dyna.rollout_horizon)?;
    map.bool_into("loop.physical_loss_enabled", &mut dyna.physical_loss_enabled)?;
    map.f64_into("loop.physical_loss_weight", &mut dyna.physical_loss_weight)?;
    map.usize_into("loop.physical_loss_batch", &mut dyna.physical_loss_batch)?;
    map.usize_into("loop.warmup_steps", &mut dyna.warmup_steps)?;
    map.usize_into("loop.eval_cadence", &mut dyna.eval_cadence)?;
    map.usize_into("loop.eval_episodes", &mut dyna.eval_episodes)?;

    if let Some(hidden) = map.list_into::<usize>("model.hidden", "a width list like 32,32")? {
        dyna.model_hidden = hidden;
    }
    map.usize_into("model.adam_passes", &mut dyna.adam_model_passes)?;
    map.usize_into("model.ekf_passes", &mut dyna.ekf_model_passes)?;
    map.usize_into("model.batch_size", &mut dyna.model_batch_size)?;
    map.f64_into("model.lr", &mut dyna.model_lr)?;
    map.f64_into("model.ekf_prior_var", &mut dyna.ekf_prior_var)?;
    map.f64_into("model.ekf_process_noise", &mut dyna.ekf_process_noise)?;
    map.f64_into("model.ekf_meas_noise", &mut dyna.ekf_meas_noise)?;

    map.usize_into("agent.updates_per_episode", &mut dyna.agent_updates_per_episode)?;
    map.usize_into("agent.batch", &mut dyna.agent_batch)?;
    map.f64_into("agent.gamma", &mut dyna.gamma)?;
    map.f64_into("agent.actor_lr", &mut dyna.actor_lr)?;
    map.f64_into("agent.critic_lr", &mut dyna.critic_lr)?;
    map.usize_into("agent.target_period", &mut dyna.target_period)?;
    if let Some(hidden) = map.list_into::<usize>("agent.policy_hidden", "a width list like 64,64")? {
        dyna.policy_hidden = hidden;
    }
    if let Some(hidden) = map.list_into::<usize>("agent.critic_hidden", "a width list like 64,64")? {
        dyna.critic_hidden = hidden;
    }
    map.f64_into("agent.log_std_init", &mut dyna.log_std_init)?;
    map.f64_into("agent.min_log_std", &mut dyna.min_log_std)?;

    // The [run] block is required unless supplied on the command line;
    // flags shadow file values (the file itself is never touched).
    let file_variants = map.take("run.variants");
    let file_seeds = map.list_into::<u64>("run.seeds", "a seed list like 0,1,2")?;
    let file_out = map.take("run.out");

    // Surface typos before complaining about what they left missing.
    if let Some((key, line)) = map.first_unused() {
        return Err(format!("line {line}: unknown key {key}"));
    }

    let variants: Vec<Variant> = match &overrides.variant {
        Some(v) => vec![Variant::parse(v).map_err(|e| e.to_string())?],
        None => match file_variants {
            Some((value, line)) => value
                .split(',')
                .map(|part| {
                    Variant::parse(part.trim())
                        .map_err(|_| format!("line {line}: run.variants: unknown variant {:?}", part.trim()))
                })
                .collect::<Result<_, _>>()?,
            None => return Err("missing required field run.variants (or pass --variant)".into()),
        },
    };
    let seeds: Vec<u64> = match &overrides.seeds {
        Some(s) => s.clone(),
        None => file_seeds.ok_or("missing required field run.seeds (or pass --seeds)")?,
    };
    let out: PathBuf = match &overrides.out {
        Some(o) => o.clone(),
        None => file_out
            .map(|(v, _)| PathBuf::from(v))
            .ok_or("missing required field run.out (or pass --out)")?,
    };
    if seeds.is_empty() {
        return Err("run.seeds: seed list must not be empty".into());
    }
    if variants.is_empty() {
        return Err("run.variants: variant list must not be empty".into());
    }
    {
        let mut sorted = seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != seeds.len() {
            return Err("run.seeds: duplicate seeds".into());
        }
    }

    let cfg = ExperimentConfig {
        variants,
        seeds,
        out,
        dyna,
    };
    // Seed/variant are filled per run; validate the shared parts now so a
    // bad value fails before any work starts, as a config error.
    cfg.dyna.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

fn fmt_usize_list(xs: &[usize]) -> String {
    xs.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl ExperimentConfig {
    /// Canonical `key=value` dump of every resolved value, in a fixed
    /// order. This is what gets hashed and written as metadata.
    pub fn canonical_dump(&self) -> String {
        let d = &self.dyna;
        let p = &d.pendulum;
        canonical_kv(&[
            ("run.variants", self.variants.iter().map(|v| v.label()).collect::<Vec<_>>().join(",")),
            ("run.seeds", self.seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",")),
            ("run.out", self.out.display().to_string()),
            ("env.mass", p.mass.to_string()),
            ("env.length", p.length.to_string()),
            ("env.gravity", p.gravity.to_string()),
            ("env.dt", p.dt.to_string()),
            ("env.torque_limit", p.torque_limit.to_string()),
            ("env.speed_limit", p.speed_limit.to_string()),
            ("env.max_steps", p.max_steps.to_string()),
            ("loop.episodes", d.episodes.to_string()),
            ("loop.steps_per_episode", d.steps_per_episode.to_string()),
            ("loop.buffer_capacity", d.buffer_capacity.to_string()),
            ("loop.env_buffer_threshold", d.env_buffer_threshold.to_string()),
            ("loop.model_buffer_threshold", d.model_buffer_threshold.to_string()),
            ("loop.data_loss_threshold", d.data_loss_threshold.to_string()),
            ("loop.model_train_cadence", d.model_train_cadence.to_string()),
            ("loop.model_train_batch", d.model_train_batch.to_string()),
            ("loop.rollout_rounds", d.rollout_rounds.to_string()),
            ("loop.rollout_batch", d.rollout_batch.to_string()),
            ("loop.rollout_horizon", d.rollout_horizon.to_string()),
            ("loop.physical_loss_enabled", d.physical_loss_enabled.to_string()),
            ("loop.physical_loss_weight", d.physical_loss_weight.to_string()),
            ("loop.physical_loss_batch", d.physical_loss_batch.to_string()),
            ("loop.warmup_steps", d.warmup_steps.to_string()),
            ("loop.eval_cadence", d.eval_cadence.to_string()),
            ("loop.eval_episodes", d.eval_episodes.to_string()),
            ("model.hidden", fmt_usize_list(&d.model_hidden)),
            ("model.adam_passes", d.adam_model_passes.to_string()),
            ("model.ekf_passes", d.ekf_model_passes.to_string()),
            ("model.batch_size", d.model_batch_size.to_string()),
            ("model.lr", d.model_lr.to_string()),
            ("model.ekf_prior_var", d.ekf_prior_var.to_string()),
            ("model.ekf_process_noise", d.ekf_process_noise.to_string()),
            ("model.ekf_meas_noise", d.ekf_meas_noise.to_string()),
            ("agent.updates_per_episode", d.agent_updates_per_episode.to_string()),
            ("agent.batch", d.agent_batch.to_string()),
            ("agent.gamma", d.gamma.to_string()),
            ("agent.actor_lr", d.actor_lr.to_string()),
            ("agent.critic_lr", d.critic_lr.to_string()),
            ("agent.target_period", d.target_period.to_string()),
            ("agent.policy_hidden", fmt_usize_list(&d.policy_hidden)),
            ("agent.critic_hidden", fmt_usize_list(&d.critic_hidden)),
            ("agent.log_std_init", d.log_std_init.to_string()),
            ("agent.min_log_std", d.min_log_std.to_string()),
        ])
    }
}
