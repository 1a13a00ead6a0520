//! Run configuration: named profiles, JSON overrides, validation.
//!
//! A config file is one JSON object. `profile` (default `"desk"`) and `task`
//! pick the defaults; every other key overrides a field of the resolved
//! config. Unknown keys anywhere are rejected.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use protocad_tensor::Real;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::behavior::AgentConfig;
use crate::env::{ContextLists, Task, DEFAULT_ACTION_REPEAT, DEFAULT_EPISODE_LEN};
use crate::proto::{feature_dim, Ablation, ProtoConfig};
use crate::world_model::WorldModelConfig;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    #[default]
    Desk,
    Large,
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Desk => "desk",
            Profile::Large => "large",
        })
    }
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "large" => Ok(Profile::Large),
            other => Err(Error::Config(format!("unknown profile `{other}`"))),
        }
    }
}

/// Fully resolved run configuration. Step counts are simulator steps, so one
/// decision step advances them by `action_repeat`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub task: Task,
    pub seed: u64,
    pub ablation: Ablation,
    pub total_steps: usize,
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub seed_episodes: usize,
    /// Gradient updates per collected episode.
    pub collect_interval: usize,
    pub batch_size: usize,
    /// Training window length; must be even.
    pub seq_len: usize,
    pub action_repeat: usize,
    /// Decision steps per episode.
    pub episode_len: usize,
    /// Learning rate for the world model, projector and prototypes.
    pub model_lr: Real,
    /// Range of the per-sequence amplitude factor used for the two views.
    pub augment_range: [Real; 2],
    pub world: WorldModelConfig,
    pub proto: ProtoConfig,
    pub agent: AgentConfig,
    pub contexts: ContextLists,
}

impl RunConfig {
    pub fn profile(profile: Profile, task: Task) -> Self {
        let mut cfg = Self {
            profile,
            task,
            seed: 0,
            ablation: Ablation::Full,
            total_steps: 60_000,
            eval_every: 10_000,
            eval_episodes: 5,
            seed_episodes: 2,
            collect_interval: 100,
            batch_size: 8,
            seq_len: 20,
            action_repeat: DEFAULT_ACTION_REPEAT,
            episode_len: DEFAULT_EPISODE_LEN,
            model_lr: 3e-4,
            augment_range: [0.8, 1.2],
            world: WorldModelConfig::default(),
            proto: ProtoConfig::default(),
            agent: AgentConfig {
                horizon: 10,
                ..AgentConfig::default()
            },
            contexts: ContextLists::defaults(task),
        };
        if profile == Profile::Large {
            cfg.batch_size = 16;
            cfg.seq_len = 50;
            cfg.agent.horizon = 15;
            cfg.proto.k = 100;
        }
        cfg
    }

    /// Resolve a JSON document against its profile defaults.
    pub fn from_json(text: &str) -> Result<Self> {
        let user: Value = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("invalid JSON: {e}")))?;
        let Value::Object(obj) = &user else {
            return Err(Error::Config("config must be a JSON object".into()));
        };
        let pick = |key: &str| -> Result<Option<String>> {
            match obj.get(key) {
                None => Ok(None),
                Some(Value::String(s)) => Ok(Some(s.clone())),
                Some(other) => Err(Error::Config(format!("`{key}` must be a string, got {other}"))),
            }
        };
        let profile = pick("profile")?.map(|s| s.parse()).transpose()?.unwrap_or_default();
        let task = pick("task")?
            .map(|s| s.parse())
            .transpose()?
            .unwrap_or(Task::PendulumSwingup);
        let mut merged = serde_json::to_value(Self::profile(profile, task))?;
        merge(&mut merged, &user);
        let cfg: Self = serde_json::from_value(merged).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("total_steps", self.total_steps),
            ("eval_every", self.eval_every),
            ("eval_episodes", self.eval_episodes),
            ("collect_interval", self.collect_interval),
            ("batch_size", self.batch_size),
            ("seq_len", self.seq_len),
            ("action_repeat", self.action_repeat),
            ("episode_len", self.episode_len),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("`{key}` must be positive")));
            }
        }
        if self.seq_len % 2 != 0 {
            return Err(Error::Config(format!("`seq_len` must be even, got {}", self.seq_len)));
        }
        if self.seq_len > self.episode_len {
            return Err(Error::Config(format!(
                "`seq_len` {} exceeds `episode_len` {}",
                self.seq_len, self.episode_len
            )));
        }
        let [lo, hi] = self.augment_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::Config(format!(
                "`augment_range` needs 0 < lo <= hi, got [{lo}, {hi}]"
            )));
        }
        if !(self.model_lr > 0.0) {
            return Err(Error::Config("`model_lr` must be positive".into()));
        }
        self.world.validate()?;
        self.proto.validate()?;
        self.agent.validate()?;
        self.contexts.validate(self.task)?;
        Ok(())
    }

    /// Simulator steps in one episode.
    pub fn steps_per_episode(&self) -> usize {
        self.episode_len * self.action_repeat
    }

    pub fn feature_dim(&self) -> usize {
        feature_dim(self.world.state_dim(), self.proto.d, self.ablation)
    }
}

/// Recursive object merge; non-object values in `over` replace those in `base`.
fn merge(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, o) => *b = o.clone(),
    }
}
