//! Analytic FLOP and KV-entry accounting, computed without touching tensors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::config::{Execution, Policy};
use crate::harness::forward::{row_depth, RowClass};
use crate::model::ModelConfig;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostQuery {
    pub seq_len: usize,
    pub interval_len: usize,
    pub ratio: usize,
    pub policy: Policy,
    pub prompt_len: usize,
    pub answer_len: usize,
    pub execution: Execution,
}

impl CostQuery {
    pub fn new(seq_len: usize, interval_len: usize, ratio: usize, policy: Policy) -> Self {
        CostQuery { seq_len, interval_len, ratio, policy, prompt_len: 0, answer_len: 1, execution: Execution::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub seq_len: usize,
    pub policy: String,
    pub ratio: usize,
    /// Query/key pairs scored, summed over layers.
    pub score_pairs: u64,
    pub attention_flops: u64,
    pub linear_flops: u64,
    pub total_flops: u64,
    pub peak_kv_entries: usize,
    pub retained_entries: usize,
}

/// One encoded block: `rows` rows after `cached` visible entries. Rows at
/// the summary slots of a `(ratio, span)` interleaving may run deeper than
/// the rest.
struct Block {
    cached: u64,
    rows: u64,
    depth: usize,
    slots: Option<Slots>,
}

struct Slots {
    count: u64,
    ratio: u64,
    span: u64,
    depth: usize,
}

impl Slots {
    /// Σ over slot rows of the number of keys each one sees. Slot `g` sits at
    /// row `min((g+1)·α, w) + g`; every slot but the last has `(g+1)·α < w`.
    fn context_sum(&self, cached: u64) -> u64 {
        let k = self.count;
        k * (cached + 1) + k * (k - 1) / 2 + self.ratio * (k - 1) * k / 2 + self.span
    }
}

struct Tally {
    pairs: u64,
    linear: u64,
}

fn add_block(cfg: &ModelConfig, b: &Block, t: &mut Tally) {
    let d = cfg.d_model as u64;
    let ff = cfg.d_ff as u64;
    let all_pairs = b.rows * b.cached + b.rows * (b.rows + 1) / 2;
    for l in 0..cfg.n_layers {
        let (slot_rows, slot_pairs, slot_live) = match &b.slots {
            Some(s) => (s.count, s.context_sum(b.cached), s.depth > l),
            None => (0, 0, false),
        };
        let rest_live = b.depth > l;
        let mut active = 0;
        if rest_live {
            active += b.rows - slot_rows;
            t.pairs += all_pairs - slot_pairs;
        }
        if slot_live {
            active += slot_rows;
            t.pairs += slot_pairs;
        }
        // keys and values for every row, queries/output/MLP for live rows
        t.linear += 2 * 2 * b.rows * d * d + 2 * 2 * active * d * d + 2 * 2 * active * d * ff;
    }
}

pub fn cost_model(cfg: &ModelConfig, q: &CostQuery) -> Result<CostReport> {
    if q.seq_len == 0 || q.interval_len == 0 || q.ratio == 0 || q.answer_len == 0 {
        return Err(Error::Config("cost model needs positive lengths and ratio".into()));
    }
    let depth = |class| row_depth(q.execution, cfg.n_layers, class);
    let mut t = Tally { pairs: 0, linear: 0 };
    let m = q.prompt_len as u64;
    if m > 0 {
        add_block(cfg, &Block { cached: 0, rows: m, depth: depth(RowClass::Retained), slots: None }, &mut t);
    }
    let mut visible = m;
    let mut peak = m;
    let n_intervals = q.seq_len.div_ceil(q.interval_len);
    for i in 0..n_intervals {
        let w = (q.seq_len - i * q.interval_len).min(q.interval_len) as u64;
        let a = q.ratio as u64;
        let k = w.div_ceil(a);
        match q.policy {
            Policy::Sst => {
                let slots = Slots { count: k, ratio: a, span: w, depth: depth(RowClass::Retained) };
                add_block(cfg, &Block { cached: visible, rows: w + k, depth: depth(RowClass::Evicted), slots: Some(slots) }, &mut t);
                peak = peak.max(visible + w + k);
                visible += k;
            }
            Policy::Full => {
                add_block(cfg, &Block { cached: visible, rows: w, depth: depth(RowClass::Retained), slots: None }, &mut t);
                visible += w;
                peak = peak.max(visible);
            }
            Policy::Baseline(_) => {
                add_block(cfg, &Block { cached: visible, rows: k, depth: depth(RowClass::Retained), slots: None }, &mut t);
                visible += k;
                peak = peak.max(visible);
            }
        }
    }
    let answer = q.answer_len as u64;
    add_block(cfg, &Block { cached: visible, rows: answer, depth: depth(RowClass::Target), slots: None }, &mut t);
    let head = 2 * answer * cfg.d_model as u64 * cfg.vocab_size as u64;
    let attention_flops = 4 * cfg.d_model as u64 * t.pairs;
    let linear_flops = t.linear + head;
    Ok(CostReport {
        seq_len: q.seq_len,
        policy: q.policy.name().to_string(),
        ratio: q.ratio,
        score_pairs: t.pairs,
        attention_flops,
        linear_flops,
        total_flops: attention_flops + linear_flops,
        peak_kv_entries: peak as usize,
        retained_entries: visible as usize,
    })
}
