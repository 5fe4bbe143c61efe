//! Teacher-forced scoring of frozen models across compression ratios.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::harness::config::{Policy, RunConfig};
use crate::harness::data::{instance_set, SALT_EVAL};
use crate::harness::forward::{argmax_rows, forward_long, ForwardSpec};
use crate::model::Model;
use crate::numerics::{Scalar, Tape};
use crate::tasks::{score, Score, TaskInstance};

/// Scores each instance at a uniform `ratio`; output order follows input order.
pub fn score_instances<T: Scalar>(
    model: &Model<T>,
    run: &RunConfig,
    policy: Policy,
    ratio: usize,
    instances: &[TaskInstance],
) -> Result<Vec<Score>> {
    instances
        .par_iter()
        .map(|inst| {
            let tape = Tape::new();
            let bound = model.bind(&tape, false);
            let spec = ForwardSpec {
                policy,
                interval_len: run.interval_len,
                ratios: &[ratio],
                execution: run.execution,
                keep_blocks: false,
            };
            let out = forward_long(&bound, &spec, inst)?;
            Ok(score(inst, &argmax_rows(&out.logits)))
        })
        .collect()
}

pub fn exact_match_rate(scores: &[Score]) -> f64 {
    scores.iter().filter(|s| s.exact_match).count() as f64 / scores.len().max(1) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub task: String,
    pub policy: String,
    pub ratio: usize,
    pub instances: usize,
    pub exact_match: f64,
    pub token_accuracy: f64,
}

pub const EVAL_CSV_HEADER: &str = "task,policy,ratio,instances,exact_match,token_accuracy";

impl EvalRow {
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{:.6},{:.6}", self.task, self.policy, self.ratio, self.instances, self.exact_match, self.token_accuracy)
    }
}

pub fn eval_csv(rows: &[EvalRow]) -> String {
    let mut out = String::from(EVAL_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Held-out instances of the run's task, identical for every policy and ratio.
pub fn eval_instances(run: &RunConfig, count: usize) -> Result<Vec<TaskInstance>> {
    instance_set(&run.task, run.model.vocab_size, run.task.seed, SALT_EVAL, count)
}

/// One row per ratio in `run.eval_ratios` for `policy`.
pub fn evaluate<T: Scalar>(model: &Model<T>, run: &RunConfig, policy: Policy, num_instances: usize) -> Result<Vec<EvalRow>> {
    let instances = eval_instances(run, num_instances)?;
    run.eval_ratios
        .iter()
        .map(|&ratio| {
            let scores = score_instances(model, run, policy, ratio, &instances)?;
            Ok(EvalRow {
                task: run.task.kind.name().to_string(),
                policy: policy.name().to_string(),
                ratio,
                instances: scores.len(),
                exact_match: exact_match_rate(&scores),
                token_accuracy: scores.iter().map(|s| s.token_accuracy).sum::<f64>() / scores.len().max(1) as f64,
            })
        })
        .collect()
}
