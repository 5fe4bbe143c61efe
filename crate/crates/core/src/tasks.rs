//! Synthetic long-stream tasks with exact ground truth.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TokenId;
use crate::numerics::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    NeedleRecall,
    MarkerCount,
    SegmentOrder,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::NeedleRecall => "needle_recall",
            TaskKind::MarkerCount => "marker_count",
            TaskKind::SegmentOrder => "segment_order",
        }
    }
}

const RESERVED: u32 = 5;
const DIGITS: u32 = 10;

/// Fixed id map: summary token, answer start, three query ids, ten digits,
/// `num_markers` marker ids, then content ids up to `vocab_size`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VocabLayout {
    pub vocab_size: usize,
    pub sst: TokenId,
    pub answer: TokenId,
    pub query_needle: TokenId,
    pub query_count: TokenId,
    pub query_order: TokenId,
    pub digits: Range<u32>,
    pub markers: Range<u32>,
    pub content: Range<u32>,
}

impl VocabLayout {
    pub fn new(vocab_size: usize, num_markers: usize) -> Result<Self> {
        let markers_start = RESERVED + DIGITS;
        let content_start = markers_start + num_markers as u32;
        // at least two content ids so the stream is not constant
        let needed = content_start as usize + 2;
        if needed > vocab_size || num_markers == 0 {
            return Err(Error::VocabOverflow { needed: needed.max(markers_start as usize + 3), vocab_size });
        }
        Ok(VocabLayout {
            vocab_size,
            sst: TokenId(0),
            answer: TokenId(1),
            query_needle: TokenId(2),
            query_count: TokenId(3),
            query_order: TokenId(4),
            digits: RESERVED..markers_start,
            markers: markers_start..content_start,
            content: content_start..vocab_size as u32,
        })
    }

    pub fn digit(&self, d: u32) -> TokenId {
        TokenId(self.digits.start + d)
    }

    pub fn marker(&self, i: usize) -> TokenId {
        TokenId(self.markers.start + i as u32)
    }

    pub fn is_marker(&self, t: TokenId) -> bool {
        self.markers.contains(&t.0)
    }

    fn random_content(&self, rng: &mut Rng) -> TokenId {
        TokenId(rng.below(self.content.start as usize, self.content.end as usize) as u32)
    }

    /// Decimal digits of `v`, most significant first.
    pub fn encode_number(&self, v: usize) -> Vec<TokenId> {
        v.to_string().bytes().map(|b| self.digit((b - b'0') as u32)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub kind: TaskKind,
    /// Stream length.
    pub n: usize,
    #[serde(default = "defaults::num_markers")]
    pub num_markers: usize,
    #[serde(default = "defaults::num_pairs")]
    pub num_pairs: usize,
    #[serde(default = "defaults::value_digits")]
    pub value_digits: usize,
    #[serde(default = "defaults::max_count")]
    pub max_count: usize,
    #[serde(default = "defaults::num_tags")]
    pub num_tags: usize,
    /// Base seed for evaluation and probe instances.
    #[serde(default)]
    pub seed: u64,
}

mod defaults {
    pub fn num_markers() -> usize {
        8
    }
    pub fn num_pairs() -> usize {
        1
    }
    pub fn value_digits() -> usize {
        1
    }
    pub fn max_count() -> usize {
        5
    }
    pub fn num_tags() -> usize {
        3
    }
}

impl TaskConfig {
    pub fn new(kind: TaskKind, n: usize) -> Self {
        TaskConfig {
            kind,
            n,
            num_markers: defaults::num_markers(),
            num_pairs: defaults::num_pairs(),
            value_digits: defaults::value_digits(),
            max_count: defaults::max_count(),
            num_tags: defaults::num_tags(),
            seed: 0,
        }
    }

    pub fn validate(&self, vocab_size: usize) -> Result<VocabLayout> {
        let vocab = VocabLayout::new(vocab_size, self.num_markers)?;
        let bad = |m: String| Err(Error::Config(m));
        if self.n == 0 {
            return bad("task stream length must be positive".into());
        }
        match self.kind {
            TaskKind::NeedleRecall => {
                if self.num_pairs == 0 || self.num_pairs > self.num_markers || self.value_digits == 0 {
                    return bad(format!("needle_recall needs 1..={} pairs and at least one value digit", self.num_markers));
                }
                if self.num_pairs * 2 * (1 + self.value_digits) > self.n {
                    return bad(format!("{} pairs do not fit in a stream of {}", self.num_pairs, self.n));
                }
            }
            TaskKind::MarkerCount => {
                if self.max_count == 0 || self.max_count > self.num_markers || self.max_count > self.n {
                    return bad(format!("max_count must be in 1..={}", self.num_markers.min(self.n)));
                }
            }
            TaskKind::SegmentOrder => {
                if self.num_tags == 0 || self.num_tags > self.num_markers || self.num_tags > self.n {
                    return bad(format!("num_tags must be in 1..={}", self.num_markers.min(self.n)));
                }
            }
        }
        Ok(vocab)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub task_kind: TaskKind,
    pub seed: u64,
    pub n: usize,
    pub prompt: Vec<TokenId>,
    pub stream: Vec<TokenId>,
    pub target: Vec<TokenId>,
}

/// Draws one instance; the same generator state always yields the same instance.
pub fn generate(cfg: &TaskConfig, vocab_size: usize, rng: &mut Rng) -> Result<TaskInstance> {
    let vocab = cfg.validate(vocab_size)?;
    let seed = rng.seed();
    let mut stream: Vec<TokenId> = (0..cfg.n).map(|_| vocab.random_content(rng)).collect();
    let (prompt, target) = match cfg.kind {
        TaskKind::NeedleRecall => {
            let pair_len = 1 + cfg.value_digits;
            let chunk = 2 * pair_len;
            let chunks = rng.sample_distinct(cfg.n / chunk, cfg.num_pairs);
            let keys = rng.sample_distinct(cfg.num_markers, cfg.num_pairs);
            let mut values = Vec::with_capacity(cfg.num_pairs);
            for (&c, &k) in chunks.iter().zip(&keys) {
                let start = c * chunk + rng.below(0, pair_len + 1);
                stream[start] = vocab.marker(k);
                let value: Vec<TokenId> = (0..cfg.value_digits).map(|_| vocab.digit(rng.below(0, 10) as u32)).collect();
                stream[start + 1..start + pair_len].copy_from_slice(&value);
                values.push(value);
            }
            let q = rng.below(0, cfg.num_pairs);
            (vec![vocab.query_needle, vocab.marker(keys[q])], values.swap_remove(q))
        }
        TaskKind::MarkerCount => {
            let count = rng.below(1, cfg.max_count + 1);
            let markers = rng.sample_distinct(cfg.num_markers, count);
            let places = rng.sample_distinct(cfg.n, count);
            for (&m, &p) in markers.iter().zip(&places) {
                stream[p] = vocab.marker(m);
            }
            (vec![vocab.query_count], vocab.encode_number(count))
        }
        TaskKind::SegmentOrder => {
            let tags = rng.sample_distinct(cfg.num_markers, cfg.num_tags);
            let mut places = rng.sample_distinct(cfg.n, cfg.num_tags);
            places.sort_unstable();
            for (&t, &p) in tags.iter().zip(&places) {
                stream[p] = vocab.marker(t);
            }
            (vec![vocab.query_order], tags.iter().map(|&t| vocab.marker(t)).collect())
        }
    };
    Ok(TaskInstance { task_kind: cfg.kind, seed, n: cfg.n, prompt, stream, target })
}

/// Recomputes the answer from the prompt and stream alone.
pub fn oracle_answer(cfg: &TaskConfig, vocab: &VocabLayout, inst: &TaskInstance) -> Option<Vec<TokenId>> {
    match cfg.kind {
        TaskKind::NeedleRecall => {
            let key = *inst.prompt.get(1)?;
            let at = inst.stream.iter().position(|&t| t == key)?;
            inst.stream.get(at + 1..at + 1 + cfg.value_digits).map(<[TokenId]>::to_vec)
        }
        TaskKind::MarkerCount => {
            let mut seen: Vec<TokenId> = inst.stream.iter().copied().filter(|&t| vocab.is_marker(t)).collect();
            seen.sort_unstable();
            seen.dedup();
            Some(vocab.encode_number(seen.len()))
        }
        TaskKind::SegmentOrder => Some(inst.stream.iter().copied().filter(|&t| vocab.is_marker(t)).collect()),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Score {
    pub exact_match: bool,
    pub token_accuracy: f64,
}

/// Exact match plus the fraction of the target matched as a leading prefix.
pub fn score(instance: &TaskInstance, output: &[TokenId]) -> Score {
    let target = &instance.target;
    let prefix = target.iter().zip(output).take_while(|(a, b)| a == b).count();
    Score {
        exact_match: output == target.as_slice(),
        token_accuracy: if target.is_empty() { 1.0 } else { prefix as f64 / target.len() as f64 },
    }
}

/// One JSON object per line.
pub fn to_jsonl(instances: &[TaskInstance]) -> Result<String> {
    let mut out = String::new();
    for inst in instances {
        out.push_str(&serde_json::to_string(inst)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn from_jsonl(text: &str) -> Result<Vec<TaskInstance>> {
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const VOCAB: usize = 64;

    #[test]
    fn vocab_partitions_are_disjoint() {
        let v = VocabLayout::new(VOCAB, 8).unwrap();
        assert!(v.digits.end <= v.markers.start && v.markers.end <= v.content.start);
        assert!(!v.markers.contains(&v.sst.0) && !v.content.contains(&v.sst.0));
        assert_eq!(v.content.end as usize, VOCAB);
        assert!(matches!(VocabLayout::new(20, 8), Err(Error::VocabOverflow { .. })));
    }

    #[test]
    fn single_pair_needle() {
        let cfg = TaskConfig::new(TaskKind::NeedleRecall, 300);
        let vocab = cfg.validate(VOCAB).unwrap();
        let inst = generate(&cfg, VOCAB, &mut Rng::new(4)).unwrap();
        let key = inst.prompt[1];
        let at = inst.stream.iter().position(|&t| t == key).unwrap();
        assert_eq!(inst.target, vec![inst.stream[at + 1]]);
        assert!(vocab.digits.contains(&inst.target[0].0));
        assert_eq!(inst.stream.iter().filter(|t| vocab.is_marker(**t)).count(), 1);
    }

    #[test]
    fn marker_count_encodes_its_insertions() {
        let mut cfg = TaskConfig::new(TaskKind::MarkerCount, 500);
        cfg.max_count = 8;
        let vocab = cfg.validate(VOCAB).unwrap();
        let mut rng = Rng::new(1);
        let mut found_five = false;
        for _ in 0..200 {
            let inst = generate(&cfg, VOCAB, &mut rng).unwrap();
            let inserted = inst.stream.iter().filter(|t| vocab.is_marker(**t)).count();
            assert_eq!(inst.target, vocab.encode_number(inserted));
            if inserted == 5 {
                assert_eq!(inst.target, vec![vocab.digit(5)]);
                found_five = true;
            }
        }
        assert!(found_five);
    }

    #[test]
    fn segment_order_follows_insertion_order() {
        let cfg = TaskConfig::new(TaskKind::SegmentOrder, 100);
        let vocab = cfg.validate(VOCAB).unwrap();
        let inst = generate(&cfg, VOCAB, &mut Rng::new(8)).unwrap();
        let seen: Vec<TokenId> = inst.stream.iter().copied().filter(|t| vocab.is_marker(*t)).collect();
        assert_eq!(seen, inst.target);
        assert_eq!(inst.target.len(), 3);
    }

    #[test]
    fn generation_is_deterministic_and_in_range() {
        for kind in [TaskKind::NeedleRecall, TaskKind::MarkerCount, TaskKind::SegmentOrder] {
            let cfg = TaskConfig::new(kind, 8192);
            let a = generate(&cfg, VOCAB, &mut Rng::new(77)).unwrap();
            let b = generate(&cfg, VOCAB, &mut Rng::new(77)).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.stream.len(), 8192);
            assert!(a.prompt.iter().chain(&a.stream).chain(&a.target).all(|t| t.index() < VOCAB));
            assert!(!a.stream.contains(&TokenId(0)));
        }
    }

    #[test]
    fn oracle_reproduces_every_target() {
        let mut rng = Rng::new(2024);
        for i in 0..10_000 {
            let kind = [TaskKind::NeedleRecall, TaskKind::MarkerCount, TaskKind::SegmentOrder][i % 3];
            let mut cfg = TaskConfig::new(kind, 64 + i % 200);
            cfg.num_pairs = 1 + i % 4;
            cfg.value_digits = 1 + i % 2;
            let vocab = cfg.validate(VOCAB).unwrap();
            let inst = generate(&cfg, VOCAB, &mut rng).unwrap();
            assert_eq!(oracle_answer(&cfg, &vocab, &inst).as_ref(), Some(&inst.target), "instance {i}");
        }
    }

    #[test]
    fn marker_counts_pass_chi_square() {
        // χ² critical values at p = 0.01 for 1..=8 degrees of freedom
        const CRIT: [f64; 8] = [6.635, 9.210, 11.345, 13.277, 15.086, 16.812, 18.475, 20.090];
        let mut cfg = TaskConfig::new(TaskKind::MarkerCount, 64);
        cfg.max_count = 6;
        let vocab = cfg.validate(VOCAB).unwrap();
        let mut counts = [0usize; 6];
        let mut rng = Rng::new(99);
        let draws = 10_000;
        for _ in 0..draws {
            let inst = generate(&cfg, VOCAB, &mut rng).unwrap();
            counts[inst.stream.iter().filter(|t| vocab.is_marker(**t)).count() - 1] += 1;
        }
        let expected = draws as f64 / 6.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < CRIT[4], "chi2 = {chi2}, counts = {counts:?}");
    }

    #[test]
    fn scoring_examples() {
        let inst = TaskInstance {
            task_kind: TaskKind::NeedleRecall,
            seed: 0,
            n: 0,
            prompt: vec![],
            stream: vec![],
            target: vec![TokenId(5), TokenId(6)],
        };
        assert_eq!(score(&inst, &[TokenId(5), TokenId(6)]), Score { exact_match: true, token_accuracy: 1.0 });
        assert_eq!(score(&inst, &[]), Score { exact_match: false, token_accuracy: 0.0 });
        assert_eq!(score(&inst, &[TokenId(5), TokenId(9)]), Score { exact_match: false, token_accuracy: 0.5 });
    }

    #[test]
    fn jsonl_round_trip() {
        let cfg = TaskConfig::new(TaskKind::SegmentOrder, 32);
        let insts: Vec<_> = (0..3).map(|s| generate(&cfg, VOCAB, &mut Rng::new(s)).unwrap()).collect();
        let text = to_jsonl(&insts).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("{\"task_kind\":\"segment_order\",\"seed\":0,\"n\":32,\"prompt\":[4]"));
        assert_eq!(from_jsonl(&text).unwrap(), insts);
    }
}
