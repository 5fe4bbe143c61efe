//! Interval-wise encoding of a task instance under a retention policy.

use crate::compression::{baseline_compress_var, interleave_sst, partition};
use crate::error::{Error, Result};
use crate::harness::config::{Execution, Policy};
use crate::kvcache::{CacheStats, EntryMeta, KvCache, Role};
use crate::model::{Bound, TokenId};
use crate::numerics::{Scalar, Var};
use crate::tasks::TaskInstance;

pub const SST: TokenId = TokenId(0);
pub const ANSWER: TokenId = TokenId(1);

/// How one instance is pushed through the model.
#[derive(Clone, Debug)]
pub struct ForwardSpec<'a> {
    pub policy: Policy,
    pub interval_len: usize,
    /// One ratio per interval, or a single ratio for all of them.
    pub ratios: &'a [usize],
    pub execution: Execution,
    /// Keep per-interval hidden states (token-level policies only).
    pub keep_blocks: bool,
}

/// Hidden states of one encoded interval and the tokens that produced them.
pub struct BlockOutput<'t, T: Scalar> {
    pub hidden: Var<'t, T>,
    pub tokens: Vec<TokenId>,
}

pub struct LongOutput<'t, T: Scalar> {
    /// Teacher-forced logits, one row per target token.
    pub logits: Var<'t, T>,
    /// Cache accounting after the last interval.
    pub stats: CacheStats,
    /// Cache entries the answer block attends to.
    pub visible_at_decode: usize,
    /// Attention score pairs computed by this pass.
    pub score_pairs: u64,
    pub blocks: Vec<BlockOutput<'t, T>>,
}

/// Layers a row takes part in. Row classes mirror the cost model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RowClass {
    /// Answer-block rows; their final hidden state is read.
    Target,
    /// Rows whose keys and values stay visible to the answer.
    Retained,
    /// Content rows evicted at the end of their interval.
    Evicted,
}

pub fn row_depth(execution: Execution, n_layers: usize, class: RowClass) -> usize {
    match (execution, class) {
        (Execution::Full, _) | (_, RowClass::Target) => n_layers,
        (Execution::Pruned, RowClass::Retained) => n_layers - 1,
        (Execution::Pruned, RowClass::Evicted) => n_layers.saturating_sub(2),
    }
}

fn ratio_for(ratios: &[usize], i: usize, n_intervals: usize) -> Result<usize> {
    match ratios.len() {
        1 => Ok(ratios[0]),
        len if len == n_intervals => Ok(ratios[i]),
        len => Err(Error::Config(format!("{len} ratios for {n_intervals} intervals"))),
    }
}

/// Prompt, then each interval encoded and (per policy) compressed, then the
/// answer block `[ANSWER, t_1 .. t_{L-1}]` decoded against what remains.
pub fn forward_long<'t, T: Scalar>(bound: &Bound<'t, T>, spec: &ForwardSpec<'_>, inst: &TaskInstance) -> Result<LongOutput<'t, T>> {
    let cfg = &bound.cfg;
    let tape = bound.tape();
    let start_pairs = tape.score_pairs();
    let depth = |class| row_depth(spec.execution, cfg.n_layers, class);
    if inst.target.is_empty() {
        return Err(Error::Empty("target"));
    }
    let mut cache = KvCache::new(cfg.n_layers, cfg.d_model);
    let mut next = 0usize;
    let mut blocks = Vec::new();

    if !inst.prompt.is_empty() {
        let positions: Vec<usize> = (0..inst.prompt.len()).collect();
        let x = bound.embed(&inst.prompt)?;
        let out = bound.encode_embedded(x, &positions, &cache, Some(&vec![depth(RowClass::Retained); positions.len()]))?;
        let meta: Vec<EntryMeta> = positions.iter().map(|&p| EntryMeta { role: Role::Prompt, position: p, interval: None }).collect();
        cache.append(&out.new_kv, &meta)?;
        next = positions.len();
    }

    let spans = partition(inst.stream.len(), spec.interval_len)?;
    for (i, span) in spans.iter().enumerate() {
        let content = &inst.stream[span.clone()];
        let ratio = ratio_for(spec.ratios, i, spans.len())?;
        match spec.policy {
            Policy::Sst => {
                let (tokens, layout) = interleave_sst(i, content.len(), ratio, SST, content)?;
                let mask = layout.slot_mask();
                let positions: Vec<usize> = (next..next + tokens.len()).collect();
                let depths: Vec<usize> =
                    mask.iter().map(|&s| depth(if s { RowClass::Retained } else { RowClass::Evicted })).collect();
                let out = bound.encode_embedded(bound.embed(&tokens)?, &positions, &cache, Some(&depths))?;
                let meta: Vec<EntryMeta> = positions
                    .iter()
                    .zip(&mask)
                    .map(|(&p, &s)| EntryMeta { role: if s { Role::Sst } else { Role::Content }, position: p, interval: Some(i) })
                    .collect();
                cache.append(&out.new_kv, &meta)?;
                cache.retain_ssts(i)?;
                next += tokens.len();
                if spec.keep_blocks {
                    blocks.push(BlockOutput { hidden: out.hidden, tokens });
                }
            }
            Policy::Full => {
                let positions: Vec<usize> = (next..next + content.len()).collect();
                let depths = vec![depth(RowClass::Retained); content.len()];
                let out = bound.encode_embedded(bound.embed(content)?, &positions, &cache, Some(&depths))?;
                let meta: Vec<EntryMeta> =
                    positions.iter().map(|&p| EntryMeta { role: Role::Content, position: p, interval: Some(i) }).collect();
                cache.append(&out.new_kv, &meta)?;
                next += content.len();
                if spec.keep_blocks {
                    blocks.push(BlockOutput { hidden: out.hidden, tokens: content.to_vec() });
                }
            }
            Policy::Baseline(_) => {
                let policy = spec.policy.baseline(ratio)?.expect("baseline policy");
                let x = bound.embed(content)?;
                let segments = policy.segments(&x.value())?;
                let pooled = baseline_compress_var(&policy, x)?;
                // each pooled row sits at the position of its segment's last token
                let positions: Vec<usize> = segments.iter().map(|&(_, e)| next + e - 1).collect();
                let depths = vec![depth(RowClass::Retained); positions.len()];
                let out = bound.encode_embedded(pooled, &positions, &cache, Some(&depths))?;
                let meta: Vec<EntryMeta> =
                    positions.iter().map(|&p| EntryMeta { role: Role::Content, position: p, interval: Some(i) }).collect();
                cache.append(&out.new_kv, &meta)?;
                next += content.len();
            }
        }
    }

    let stats = cache.stats();
    let visible_at_decode = cache.len();
    let mut answer = Vec::with_capacity(inst.target.len());
    answer.push(ANSWER);
    answer.extend_from_slice(&inst.target[..inst.target.len() - 1]);
    let positions: Vec<usize> = (next..next + answer.len()).collect();
    let out = bound.encode_embedded(bound.embed(&answer)?, &positions, &cache, Some(&vec![depth(RowClass::Target); answer.len()]))?;
    let logits = bound.lm_logits(out.hidden)?;
    Ok(LongOutput { logits, stats, visible_at_decode, score_pairs: tape.score_pairs() - start_pairs, blocks })
}

/// Prompt, stream and answer input as one flat sequence, the layout the
/// full-retention pass sees.
pub fn flat_sequence(inst: &TaskInstance) -> Vec<TokenId> {
    let mut seq = inst.prompt.clone();
    seq.extend_from_slice(&inst.stream);
    seq.push(ANSWER);
    seq.extend_from_slice(&inst.target[..inst.target.len().saturating_sub(1)]);
    seq
}

/// Logits for every row of `tokens` from a single causal pass.
pub fn single_pass_logits<'t, T: Scalar>(bound: &Bound<'t, T>, tokens: &[TokenId]) -> Result<Var<'t, T>> {
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let out = bound.encode_block(tokens, &positions, &KvCache::new(bound.cfg.n_layers, bound.cfg.d_model))?;
    bound.lm_logits(out.hidden)
}

/// Logits for every row of `tokens`, encoded `block_len` rows at a time with
/// every entry retained.
pub fn chunked_logits<'t, T: Scalar>(bound: &Bound<'t, T>, tokens: &[TokenId], block_len: usize) -> Result<Var<'t, T>> {
    let mut cache = KvCache::new(bound.cfg.n_layers, bound.cfg.d_model);
    let mut parts = Vec::new();
    for span in partition(tokens.len(), block_len)? {
        let positions: Vec<usize> = span.clone().collect();
        let out = bound.encode_block(&tokens[span], &positions, &cache)?;
        let meta: Vec<EntryMeta> = positions.iter().map(|&p| EntryMeta { role: Role::Content, position: p, interval: None }).collect();
        cache.append(&out.new_kv, &meta)?;
        parts.push(bound.lm_logits(out.hidden)?);
    }
    bound.tape().concat(&parts, 0)
}

/// Row-wise argmax (first maximum on ties).
pub fn argmax_rows<T: Scalar>(logits: &Var<'_, T>) -> Vec<TokenId> {
    let v = logits.value();
    let (rows, _) = v.dims2().expect("logits are a matrix");
    (0..rows)
        .map(|r| {
            let row = v.row(r);
            let mut best = 0;
            for (j, x) in row.iter().enumerate() {
                if *x > row[best] {
                    best = j;
                }
            }
            TokenId(best as u32)
        })
        .collect()
}

pub fn target_loss<'t, T: Scalar>(logits: Var<'t, T>, target: &[TokenId]) -> Result<Var<'t, T>> {
    let ids: Vec<usize> = target.iter().map(|t| t.index()).collect();
    logits.cross_entropy(&ids)
}
