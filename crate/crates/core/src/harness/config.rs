//! Run configuration, policies and dotted-path overrides.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::compression::{BaselineKind, BaselinePolicy, CurriculumSchedule};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tasks::{TaskConfig, TaskKind, VocabLayout};

/// What happens to interval KV entries once an interval is encoded.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Policy {
    /// Interleave summary tokens, keep only their entries.
    Sst,
    /// Keep every content entry (upper bound).
    Full,
    /// Pool the interval's input embeddings before the transformer.
    Baseline(BaselineKind),
}

impl Policy {
    pub const ALL: [Policy; 5] = [
        Policy::Sst,
        Policy::Full,
        Policy::Baseline(BaselineKind::AvgPool),
        Policy::Baseline(BaselineKind::MaxPool),
        Policy::Baseline(BaselineKind::SimilarityMerge),
    ];

    pub fn name(self) -> &'static str {
        match self {
            Policy::Sst => "sst",
            Policy::Full => "full",
            Policy::Baseline(k) => k.name(),
        }
    }

    pub fn baseline(self, ratio: usize) -> Result<Option<BaselinePolicy>> {
        match self {
            Policy::Baseline(kind) => BaselinePolicy::new(kind, ratio).map(Some),
            _ => Ok(None),
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sst" => Ok(Policy::Sst),
            "full" | "dense" => Ok(Policy::Full),
            "avg_pool" => Ok(Policy::Baseline(BaselineKind::AvgPool)),
            "max_pool" => Ok(Policy::Baseline(BaselineKind::MaxPool)),
            "similarity_merge" => Ok(Policy::Baseline(BaselineKind::SimilarityMerge)),
            _ => Err(Error::Config(format!("unknown policy {s:?}"))),
        }
    }
}

impl Serialize for Policy {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Policy {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// `Full` runs every layer for every row. `Pruned` skips the work whose
/// result can never reach an answer logit: rows feed upper layers only as
/// far as some live query still reads their keys and values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Execution {
    Full,
    #[default]
    Pruned,
}

/// Learning-rate shape after warmup.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrDecay {
    #[default]
    Constant,
    /// Half-cosine from `lr` toward a tenth of it at the end of training.
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default = "defaults::interval_len")]
    pub interval_len: usize,
    #[serde(default)]
    pub schedule: CurriculumSchedule,
    #[serde(default = "defaults::task")]
    pub task: TaskConfig,
    #[serde(default = "defaults::policy")]
    pub policy: Policy,
    #[serde(default)]
    pub execution: Execution,
    #[serde(default = "defaults::steps")]
    pub steps: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::lr")]
    pub lr: f64,
    /// Steps of linear warmup from zero to `lr`.
    #[serde(default)]
    pub warmup_steps: usize,
    #[serde(default)]
    pub lr_decay: LrDecay,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "defaults::grad_clip")]
    pub grad_clip: Option<f64>,
    #[serde(default = "defaults::eval_every")]
    pub eval_every: usize,
    #[serde(default = "defaults::probe_size")]
    pub probe_size: usize,
    /// Ratio used for probe scoring; `None` means the schedule's final ratio.
    #[serde(default)]
    pub probe_ratio: Option<usize>,
    #[serde(default = "defaults::eval_ratios")]
    pub eval_ratios: Vec<usize>,
    #[serde(default = "defaults::eval_instances")]
    pub eval_instances: usize,
}

mod defaults {
    use super::*;

    pub fn interval_len() -> usize {
        512
    }
    pub fn task() -> TaskConfig {
        TaskConfig::new(TaskKind::NeedleRecall, 2048)
    }
    pub fn policy() -> Policy {
        Policy::Sst
    }
    pub fn steps() -> usize {
        20_000
    }
    pub fn batch_size() -> usize {
        8
    }
    pub fn lr() -> f64 {
        3e-4
    }
    pub fn grad_clip() -> Option<f64> {
        Some(1.0)
    }
    pub fn eval_every() -> usize {
        500
    }
    pub fn probe_size() -> usize {
        256
    }
    pub fn eval_ratios() -> Vec<usize> {
        vec![2, 4, 8, 16]
    }
    pub fn eval_instances() -> usize {
        256
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

/// Longest answer a task can ask for.
pub fn max_target_len(task: &TaskConfig) -> usize {
    match task.kind {
        TaskKind::NeedleRecall => task.value_digits,
        TaskKind::MarkerCount => task.max_count.to_string().len(),
        TaskKind::SegmentOrder => task.num_tags,
    }
}

impl RunConfig {
    /// Learning rate for the update at zero-based `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        match self.lr_decay {
            LrDecay::Constant => self.lr,
            LrDecay::Cosine => {
                let span = (self.steps - self.warmup_steps).max(1) as f64;
                let t = (step - self.warmup_steps) as f64 / span;
                let floor = 0.1 * self.lr;
                floor + (self.lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }

    pub fn validate(&self) -> Result<VocabLayout> {
        self.model.validate()?;
        self.schedule.validate()?;
        let vocab = self.task.validate(self.model.vocab_size)?;
        let bad = |m: String| Err(Error::Config(m));
        if self.interval_len == 0 || self.interval_len < self.schedule.max_ratio() {
            return bad(format!("interval_len {} must be at least the largest ratio {}", self.interval_len, self.schedule.max_ratio()));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.warmup_steps > self.steps {
            return bad(format!("warmup_steps {} exceeds steps {}", self.warmup_steps, self.steps));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return bad("grad_clip must be positive".into());
        }
        if self.eval_every == 0 || self.probe_size == 0 || self.eval_instances == 0 {
            return bad("eval_every, probe_size and eval_instances must be positive".into());
        }
        if self.eval_ratios.is_empty() {
            return bad("eval_ratios must not be empty".into());
        }
        let mut ratios: Vec<usize> = self.schedule.stages.iter().flat_map(|s| s.pool.iter().copied()).collect();
        ratios.push(self.schedule.max_ratio());
        ratios.extend(&self.eval_ratios);
        ratios.extend(self.probe_ratio);
        let min_ratio = ratios.iter().copied().min().unwrap_or(1);
        if min_ratio == 0 {
            return bad("ratios must be at least 1".into());
        }
        if let Policy::Baseline(kind) = self.policy {
            if min_ratio < 2 {
                return bad(format!("{} needs every ratio >= 2", kind.name()));
            }
        }
        // prompt is at most two tokens for every task
        let longest = 2 + self.task.n + self.task.n.div_ceil(min_ratio) + self.task.n.div_ceil(self.interval_len) + max_target_len(&self.task);
        if longest > self.model.max_position {
            return bad(format!("sequences reach position {longest}, beyond max_position {}", self.model.max_position));
        }
        Ok(vocab)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Applies `a.b.c=value` overrides. Every path must already exist in the
    /// resolved config; the value is parsed as JSON, falling back to a string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut root = serde_json::to_value(self)?;
        for o in overrides {
            let o = o.as_ref();
            let (path, raw) = o.split_once('=').ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut node = &mut root;
            for key in path.split('.') {
                node = match node {
                    Value::Object(map) => map.get_mut(key),
                    Value::Array(items) => key.parse::<usize>().ok().and_then(|i| items.get_mut(i)),
                    _ => None,
                }
                .ok_or_else(|| Error::Config(format!("unknown config key {path:?}")))?;
            }
            *node = value;
        }
        let cfg: RunConfig = serde_json::from_value(root).map_err(|e| Error::Config(format!("override: {e}")))?;
        Ok(cfg)
    }
}
