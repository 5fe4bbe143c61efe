//! Target-only NLL training over compressed long sequences.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compression::partition;
use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::harness::data::{instance, instance_set, stream_rng, SALT_INIT, SALT_PROBE, SALT_RATIO, SALT_TRAIN};
use crate::harness::eval::{exact_match_rate, score_instances};
use crate::harness::forward::{forward_long, target_loss, ForwardSpec};
use crate::model::{Model, ModelConfig};
use crate::numerics::{checkpoint, Adam, AdamConfig, Rng, Scalar, Tape, Tensor};
use crate::tasks::TaskInstance;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub loss: f64,
    pub exact_match: f64,
}

impl MetricRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

pub fn init_model<T: Scalar>(run: &RunConfig) -> Result<Model<T>> {
    Model::init(run.model.clone(), &mut Rng::new(run.seed ^ SALT_INIT))
}

/// Loss and parameter gradients for one instance.
pub fn instance_grads<T: Scalar>(model: &Model<T>, run: &RunConfig, ratios: &[usize], inst: &TaskInstance) -> Result<(f64, Vec<Tensor<T>>)> {
    let tape = Tape::new();
    let bound = model.bind(&tape, true);
    let spec = ForwardSpec { policy: run.policy, interval_len: run.interval_len, ratios, execution: run.execution, keep_blocks: false };
    let out = forward_long(&bound, &spec, inst)?;
    let loss = target_loss(out.logits, &inst.target)?;
    tape.ensure_finite()?;
    tape.backward(loss)?;
    Ok((loss.value().item()?.as_f64(), bound.grads()))
}

fn clip(grads: &mut [Tensor<impl Scalar>], max_norm: f64) {
    let norm = grads.iter().flat_map(|g| g.data()).map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= Scalar::lit(s);
            }
        }
    }
}

fn divergence(step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { .. } => Error::Divergence { step },
        other => other,
    }
}

/// Trains from the run's seeded initialization; `on_metric` sees each record as it is logged.
pub fn train<T: Scalar>(run: &RunConfig, on_metric: &mut dyn FnMut(&MetricRecord) -> Result<()>) -> Result<Model<T>> {
    let vocab = run.validate()?;
    let mut model = init_model::<T>(run)?;
    let mut adam = Adam::new(AdamConfig { lr: run.lr, ..AdamConfig::default() }, &model.params);
    let probe = instance_set(&run.task, vocab.vocab_size, run.task.seed, SALT_PROBE, run.probe_size)?;
    let probe_ratio = run.probe_ratio.unwrap_or_else(|| run.schedule.final_ratio());
    let n_intervals = partition(run.task.n, run.interval_len)?.len();
    let mut loss_sum = 0.0;
    let mut loss_count = 0usize;
    for step in 0..run.steps {
        let mut ratio_rng = stream_rng(run.seed, SALT_RATIO, step as u64);
        let batch: Vec<(TaskInstance, Vec<usize>)> = (0..run.batch_size)
            .map(|b| {
                let inst = instance(&run.task, vocab.vocab_size, run.seed, SALT_TRAIN, (step * run.batch_size + b) as u64)?;
                let ratios = run.schedule.sample_sequence(step, run.steps, n_intervals, &mut ratio_rng);
                Ok((inst, ratios))
            })
            .collect::<Result<_>>()?;
        let results: Vec<(f64, Vec<Tensor<T>>)> = batch
            .par_iter()
            .map(|(inst, ratios)| instance_grads(&model, run, ratios, inst))
            .collect::<Result<_>>()
            .map_err(divergence(step))?;
        let mut grads: Option<Vec<Tensor<T>>> = None;
        let mut batch_loss = 0.0;
        for (loss, g) in results {
            batch_loss += loss;
            match grads.as_mut() {
                None => grads = Some(g),
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                            *x += *y;
                        }
                    }
                }
            }
        }
        let batch_loss = batch_loss / run.batch_size as f64;
        if !batch_loss.is_finite() {
            return Err(Error::Divergence { step });
        }
        let mut grads = grads.expect("batch is non-empty");
        let inv = T::lit(1.0 / run.batch_size as f64);
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= inv;
            }
        }
        if let Some(c) = run.grad_clip {
            clip(&mut grads, c);
        }
        adam.set_lr(run.lr_at(step));
        adam.step(&mut model.params, &grads)?;
        loss_sum += batch_loss;
        loss_count += 1;
        let done = step + 1;
        if done % run.eval_every == 0 || done == run.steps {
            let scores = score_instances(&model, run, run.policy, probe_ratio, &probe)?;
            on_metric(&MetricRecord { step: done, loss: loss_sum / loss_count as f64, exact_match: exact_match_rate(&scores) })?;
            loss_sum = 0.0;
            loss_count = 0;
        }
    }
    Ok(model)
}

pub fn save_checkpoint<T: Scalar>(path: &Path, model: &Model<T>, run: &RunConfig) -> Result<()> {
    let mut meta = BTreeMap::new();
    meta.insert("model_config".to_string(), serde_json::to_string(&model.cfg)?);
    meta.insert("run_config".to_string(), serde_json::to_string(run)?);
    checkpoint::save(path, &model.params, &meta)
}

/// Restores a model and, when recorded, the run config it was trained with.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(Model<T>, Option<RunConfig>)> {
    let (params, meta) = checkpoint::load::<T>(path)?;
    let cfg_text = meta.get("model_config").ok_or_else(|| Error::Checkpoint("missing model_config metadata".into()))?;
    let cfg: ModelConfig = serde_json::from_str(cfg_text)?;
    let run = meta.get("run_config").map(|t| serde_json::from_str(t)).transpose()?;
    Ok((Model::from_params(cfg, params)?, run))
}
