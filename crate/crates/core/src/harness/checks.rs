//! Self-checks: chunked versus single-pass encoding, and analytic versus
//! finite-difference gradients.

use serde::Serialize;

use crate::error::Result;
use crate::harness::config::{Execution, Policy};
use crate::harness::forward::{chunked_logits, flat_sequence, forward_long, single_pass_logits, target_loss, ForwardSpec};
use crate::model::{Model, ModelConfig, TokenId};
use crate::numerics::{Rng, Scalar, Tape, Tensor};
use crate::tasks::{TaskInstance, TaskKind};

pub const EQUIV_TOL_F32: f64 = 1e-4;
pub const EQUIV_TOL_F64: f64 = 1e-10;

/// Largest absolute difference relative to the largest reference magnitude.
pub fn relative_deviation<T: Scalar>(got: &Tensor<T>, want: &Tensor<T>) -> Result<f64> {
    let diff = got.max_abs_diff(want)?.as_f64();
    Ok(diff / want.max_abs().as_f64().max(f64::MIN_POSITIVE))
}

#[derive(Clone, Debug, Serialize)]
pub struct EquivCase {
    pub seq_len: usize,
    pub interval_len: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub dev_f32: f64,
    pub dev_f64: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct EquivReport {
    pub cases: Vec<EquivCase>,
    pub max_dev_f32: f64,
    pub max_dev_f64: f64,
    pub passed: bool,
}

fn random_case(rng: &mut Rng, max_len: usize) -> (ModelConfig, usize, TaskInstance) {
    let d_model = [8, 16, 32][rng.below(0, 3)];
    let n_heads = [1, 2, 4][rng.below(0, 3)].min(d_model / 2);
    let cfg = ModelConfig {
        vocab_size: rng.below(8, 48),
        d_model,
        n_heads,
        n_layers: rng.below(1, 3),
        d_ff: 2 * d_model,
        max_position: max_len + 16,
        rope_base: 10_000.0,
    };
    // log-uniform lengths keep the mean cost low while still reaching max_len
    let n = ((max_len as f64).ln() * rng.unit()).exp().round().clamp(1.0, max_len as f64) as usize;
    let w = [64, 512][rng.below(0, 2)];
    let tok = |rng: &mut Rng| TokenId(rng.below(2, cfg.vocab_size) as u32);
    let prompt = (0..rng.below(0, 3)).map(|_| tok(rng)).collect();
    let stream = (0..n).map(|_| tok(rng)).collect();
    let target = (0..rng.below(1, 4)).map(|_| tok(rng)).collect();
    let inst = TaskInstance { task_kind: TaskKind::NeedleRecall, seed: rng.seed(), n, prompt, stream, target };
    (cfg, w, inst)
}

/// Worst deviation for one case: interval-wise full retention versus one
/// causal pass, over every stream row and over the answer logits.
fn case_deviation<T: Scalar>(cfg: &ModelConfig, w: usize, inst: &TaskInstance, seed: u64) -> Result<f64> {
    let model = Model::<T>::init(cfg.clone(), &mut Rng::new(seed))?;
    let tape = Tape::new();
    let bound = model.bind(&tape, false);
    let seq = flat_sequence(inst);
    let reference = single_pass_logits(&bound, &seq)?.value();
    let chunked = chunked_logits(&bound, &seq, w)?.value();
    let mut dev = relative_deviation(&chunked, &reference)?;
    let l = inst.target.len();
    let tail = Tensor::new(vec![l, cfg.vocab_size], reference.data()[(seq.len() - l) * cfg.vocab_size..].to_vec())?;
    for execution in [Execution::Full, Execution::Pruned] {
        let spec = ForwardSpec { policy: Policy::Full, interval_len: w, ratios: &[1], execution, keep_blocks: false };
        let out = forward_long(&bound, &spec, inst)?;
        dev = dev.max(relative_deviation(&out.logits.value(), &tail)?);
    }
    Ok(dev)
}

pub fn equiv_check(seed: u64, count: usize, max_len: usize) -> Result<EquivReport> {
    let mut rng = Rng::new(seed);
    let mut cases = Vec::with_capacity(count);
    for i in 0..count {
        let (cfg, w, inst) = random_case(&mut rng, max_len);
        let model_seed = seed.wrapping_add(i as u64);
        cases.push(EquivCase {
            seq_len: inst.n,
            interval_len: w,
            d_model: cfg.d_model,
            n_layers: cfg.n_layers,
            dev_f32: case_deviation::<f32>(&cfg, w, &inst, model_seed)?,
            dev_f64: case_deviation::<f64>(&cfg, w, &inst, model_seed)?,
        });
    }
    let max_dev_f32 = cases.iter().map(|c| c.dev_f32).fold(0.0, f64::max);
    let max_dev_f64 = cases.iter().map(|c| c.dev_f64).fold(0.0, f64::max);
    Ok(EquivReport { cases, max_dev_f32, max_dev_f64, passed: max_dev_f32 <= EQUIV_TOL_F32 && max_dev_f64 <= EQUIV_TOL_F64 })
}

pub const GRAD_STEP: f64 = 1e-4;
pub const GRAD_REL_TOL: f64 = 1e-3;
/// Gradients smaller than this are compared at this scale; central
/// differences cannot resolve them any finer.
pub const GRAD_SCALE_FLOOR: f64 = 1e-6;
pub const GRAD_COORDS: usize = 50;

#[derive(Clone, Debug, Serialize)]
pub struct TensorGradCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradReport {
    pub tensors: Vec<TensorGradCheck>,
    pub passed: bool,
}

pub fn grad_check_config() -> ModelConfig {
    ModelConfig { vocab_size: 32, d_model: 16, n_heads: 2, n_layers: 1, d_ff: 32, max_position: 128, rope_base: 10_000.0 }
}

/// Target NLL plus next-token NLL inside every interleaved interval, so the
/// gradient reaches content rows, summary rows and the answer block.
fn composite_loss(model: &Model<f64>, inst: &TaskInstance, interval_len: usize, ratios: &[usize], want_grads: bool) -> Result<(f64, Vec<Tensor<f64>>)> {
    let tape = Tape::new();
    let bound = model.bind(&tape, want_grads);
    let spec = ForwardSpec { policy: Policy::Sst, interval_len, ratios, execution: Execution::Full, keep_blocks: true };
    let out = forward_long(&bound, &spec, inst)?;
    let mut loss = target_loss(out.logits, &inst.target)?;
    for block in &out.blocks {
        let len = block.tokens.len();
        if len < 2 {
            continue;
        }
        let logits = bound.lm_logits(block.hidden.slice_rows(0, len - 1)?)?;
        loss = loss.add(target_loss(logits, &block.tokens[1..])?)?;
    }
    let value = loss.value().item()?;
    if !want_grads {
        return Ok((value, Vec::new()));
    }
    tape.backward(loss)?;
    Ok((value, bound.grads()))
}

pub fn grad_check(seed: u64) -> Result<GradReport> {
    let cfg = grad_check_config();
    let mut rng = Rng::new(seed);
    let model = Model::<f64>::init(cfg.clone(), &mut rng)?;
    let tok = |rng: &mut Rng| TokenId(rng.below(2, cfg.vocab_size) as u32);
    // three intervals with ratios that leave partial groups
    let (interval_len, ratios) = (8, [3usize, 2, 5]);
    let inst = TaskInstance {
        task_kind: TaskKind::NeedleRecall,
        seed,
        n: 22,
        prompt: (0..2).map(|_| tok(&mut rng)).collect(),
        stream: (0..22).map(|_| tok(&mut rng)).collect(),
        target: (0..3).map(|_| tok(&mut rng)).collect(),
    };
    let (_, grads) = composite_loss(&model, &inst, interval_len, &ratios, true)?;
    let mut tensors = Vec::new();
    let names: Vec<String> = model.params.iter().map(|(n, _)| n.to_string()).collect();
    for (t, name) in names.iter().enumerate() {
        let numel = grads[t].numel();
        let coords = rng.sample_distinct(numel, GRAD_COORDS.min(numel));
        let mut max_rel_err: f64 = 0.0;
        for &c in &coords {
            let mut probe = model.clone();
            let base = probe.params.iter().nth(t).expect("tensor").1.data()[c];
            let mut eval_at = |x: f64| -> Result<f64> {
                probe.params.iter_mut().nth(t).expect("tensor").1.data_mut()[c] = x;
                Ok(composite_loss(&probe, &inst, interval_len, &ratios, false)?.0)
            };
            let numeric = (eval_at(base + GRAD_STEP)? - eval_at(base - GRAD_STEP)?) / (2.0 * GRAD_STEP);
            let analytic = grads[t].data()[c];
            let scale = analytic.abs().max(numeric.abs()).max(GRAD_SCALE_FLOOR);
            max_rel_err = max_rel_err.max((analytic - numeric).abs() / scale);
        }
        tensors.push(TensorGradCheck { name: name.clone(), checked: coords.len(), max_rel_err, passed: max_rel_err <= GRAD_REL_TOL });
    }
    let passed = tensors.iter().all(|t| t.passed);
    Ok(GradReport { tensors, passed })
}
