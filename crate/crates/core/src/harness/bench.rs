//! Cost sweeps over sequence lengths and policies.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::harness::config::{Execution, Policy};
use crate::harness::cost::{cost_model, CostQuery, CostReport};
use crate::harness::forward::{forward_long, ForwardSpec};
use crate::model::{Model, ModelConfig, TokenId};
use crate::numerics::{Rng, Tape};
use crate::tasks::TaskInstance;

pub const BENCH_CSV_HEADER: &str = "length,policy,ratio,attn_flops,linear_flops,total_flops,peak_kv";

#[derive(Clone, Debug)]
pub struct BenchSpec {
    pub lengths: Vec<usize>,
    pub policies: Vec<Policy>,
    pub ratio: usize,
    pub interval_len: usize,
    pub execution: Execution,
    /// Also time one forward pass per row (environment-dependent).
    pub measure: bool,
}

pub struct BenchRow {
    pub report: CostReport,
    pub measured_ms: Option<f64>,
}

pub fn bench_sweep(cfg: &ModelConfig, spec: &BenchSpec) -> Result<Vec<BenchRow>> {
    if spec.lengths.is_empty() || spec.lengths.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("bench lengths must be non-empty and ascending".into()));
    }
    let model = if spec.measure { Some(Model::<f32>::init(cfg.clone(), &mut Rng::new(0))?) } else { None };
    let mut rows = Vec::new();
    for &n in &spec.lengths {
        for &policy in &spec.policies {
            let query = CostQuery { execution: spec.execution, ..CostQuery::new(n, spec.interval_len, spec.ratio, policy) };
            let report = cost_model(cfg, &query)?;
            let measured_ms = match &model {
                None => None,
                Some(model) => {
                    let mut rng = Rng::new(n as u64);
                    let stream = (0..n).map(|_| TokenId(rng.below(2, cfg.vocab_size) as u32)).collect();
                    let inst = TaskInstance {
                        task_kind: crate::tasks::TaskKind::NeedleRecall,
                        seed: 0,
                        n,
                        prompt: vec![],
                        stream,
                        target: vec![TokenId(2)],
                    };
                    let tape = Tape::new();
                    let bound = model.bind(&tape, false);
                    let fs = ForwardSpec { policy, interval_len: spec.interval_len, ratios: &[spec.ratio], execution: spec.execution, keep_blocks: false };
                    let start = Instant::now();
                    forward_long(&bound, &fs, &inst)?;
                    Some(start.elapsed().as_secs_f64() * 1e3)
                }
            };
            rows.push(BenchRow { report, measured_ms });
        }
    }
    Ok(rows)
}

/// Fixed-schema CSV; a trailing `measured_ms` column is added only when timing was requested.
pub fn bench_csv(rows: &[BenchRow]) -> String {
    let measured = rows.iter().any(|r| r.measured_ms.is_some());
    let mut out = String::from(BENCH_CSV_HEADER);
    if measured {
        out.push_str(",measured_ms");
    }
    out.push('\n');
    for r in rows {
        let c = &r.report;
        out.push_str(&format!(
            "{},{},{},{},{},{},{}",
            c.seq_len, c.policy, c.ratio, c.attention_flops, c.linear_flops, c.total_flops, c.peak_kv_entries
        ));
        if measured {
            out.push_str(&format!(",{:.3}", r.measured_ms.unwrap_or(f64::NAN)));
        }
        out.push('\n');
    }
    out
}
