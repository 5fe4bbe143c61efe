//! Interval partitioning, summary-token interleaving, compression-ratio
//! scheduling and the embedding-level pooling baselines.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TokenId;
use crate::numerics::{Rng, Scalar, Tensor, Var};

/// Splits `[0, n)` into consecutive spans of length `w`; the last may be shorter.
pub fn partition(n: usize, w: usize) -> Result<Vec<Range<usize>>> {
    if n == 0 {
        return Err(Error::Empty("sequence"));
    }
    if w == 0 {
        return Err(Error::Config("interval length must be at least 1".into()));
    }
    Ok((0..n).step_by(w).map(|s| s..(s + w).min(n)).collect())
}

/// Where the summary tokens sit inside one interleaved interval.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SstLayout {
    pub interval_index: usize,
    pub interval_len: usize,
    pub ratio: usize,
    pub sst_count: usize,
    /// Interleaved positions holding summary tokens, ascending.
    pub slots: Vec<usize>,
}

impl SstLayout {
    pub fn new(interval_index: usize, interval_len: usize, ratio: usize) -> Result<Self> {
        if interval_len == 0 {
            return Err(Error::Empty("interval"));
        }
        if ratio == 0 {
            return Err(Error::Config("compression ratio must be at least 1".into()));
        }
        let sst_count = interval_len.div_ceil(ratio);
        let slots = (0..sst_count).map(|g| ((g + 1) * ratio).min(interval_len) + g).collect();
        Ok(SstLayout { interval_index, interval_len, ratio, sst_count, slots })
    }

    pub fn interleaved_len(&self) -> usize {
        self.interval_len + self.sst_count
    }

    /// True for every interleaved position that holds a summary token.
    pub fn slot_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.interleaved_len()];
        for &s in &self.slots {
            mask[s] = true;
        }
        mask
    }
}

/// Inserts one summary token after every `ratio` content tokens, plus one
/// after a trailing partial group.
pub fn interleave_sst(
    interval_index: usize,
    span_len: usize,
    ratio: usize,
    sst_id: TokenId,
    content: &[TokenId],
) -> Result<(Vec<TokenId>, SstLayout)> {
    if content.is_empty() {
        return Err(Error::Empty("interval content"));
    }
    if content.len() != span_len {
        return Err(Error::Config(format!("interval content has {} tokens, span is {span_len}", content.len())));
    }
    let layout = SstLayout::new(interval_index, span_len, ratio)?;
    let mut out = Vec::with_capacity(layout.interleaved_len());
    for group in content.chunks(ratio) {
        out.extend_from_slice(group);
        out.push(sst_id);
    }
    Ok((out, layout))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    /// Fraction of total steps at which this stage ends (exclusive).
    pub until: f64,
    pub pool: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleMode {
    Curriculum,
    Fixed(usize),
    /// Same behaviour as `Fixed`; kept as a separate name for the ablation that drops random sampling.
    NoRandom(usize),
}

impl fmt::Display for ScheduleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScheduleMode::Curriculum => write!(f, "curriculum"),
            ScheduleMode::Fixed(a) => write!(f, "fixed:{a}"),
            ScheduleMode::NoRandom(a) => write!(f, "no_random:{a}"),
        }
    }
}

impl FromStr for ScheduleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let ratio = |v: &str| -> Result<usize> {
            match v.parse::<usize>() {
                Ok(a) if a >= 1 => Ok(a),
                _ => Err(Error::Config(format!("bad ratio in schedule mode {s:?}"))),
            }
        };
        match s.split_once(':') {
            None if s == "curriculum" => Ok(ScheduleMode::Curriculum),
            Some(("fixed", a)) => Ok(ScheduleMode::Fixed(ratio(a)?)),
            Some(("no_random", a)) => Ok(ScheduleMode::NoRandom(ratio(a)?)),
            _ => Err(Error::Config(format!("unknown schedule mode {s:?}"))),
        }
    }
}

impl Serialize for ScheduleMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ScheduleMode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurriculumSchedule {
    pub mode: ScheduleMode,
    pub stages: Vec<Stage>,
    /// Draw a separate ratio for every interval instead of one per sequence.
    #[serde(default)]
    pub per_interval: bool,
}

impl Default for CurriculumSchedule {
    fn default() -> Self {
        CurriculumSchedule {
            mode: ScheduleMode::Curriculum,
            stages: vec![Stage { until: 0.5, pool: vec![2, 4] }, Stage { until: 1.0, pool: vec![2, 4, 8] }],
            per_interval: false,
        }
    }
}

impl CurriculumSchedule {
    pub fn fixed(ratio: usize) -> Self {
        CurriculumSchedule { mode: ScheduleMode::Fixed(ratio), ..Default::default() }
    }

    /// One stage sampling uniformly from `pool` for the whole run.
    pub fn flat(pool: Vec<usize>) -> Self {
        CurriculumSchedule { mode: ScheduleMode::Curriculum, stages: vec![Stage { until: 1.0, pool }], per_interval: false }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("schedule needs at least one stage".into()));
        }
        let mut prev = 0.0;
        for (i, s) in self.stages.iter().enumerate() {
            if s.pool.is_empty() || s.pool.contains(&0) {
                return Err(Error::Config(format!("stage {i} pool must be non-empty with ratios >= 1")));
            }
            if !(s.until > prev && s.until <= 1.0) {
                return Err(Error::Config(format!("stage {i} ends at {} which does not follow {prev}", s.until)));
            }
            prev = s.until;
        }
        if prev != 1.0 {
            return Err(Error::Config("last stage must end at 1.0".into()));
        }
        if let ScheduleMode::Fixed(0) | ScheduleMode::NoRandom(0) = self.mode {
            return Err(Error::Config("fixed ratio must be at least 1".into()));
        }
        Ok(())
    }

    /// Step ranges covered by each stage for a run of `total_steps`.
    pub fn stage_ranges(&self, total_steps: usize) -> Vec<Range<usize>> {
        let mut start = 0;
        self.stages
            .iter()
            .map(|s| {
                let end = ((s.until * total_steps as f64).round() as usize).clamp(start, total_steps);
                let r = start..end;
                start = end;
                r
            })
            .collect()
    }

    pub fn active_stage(&self, step: usize, total_steps: usize) -> &Stage {
        let ranges = self.stage_ranges(total_steps);
        let idx = ranges.iter().position(|r| r.contains(&step)).unwrap_or(self.stages.len() - 1);
        &self.stages[idx]
    }

    /// Largest ratio this schedule can emit.
    pub fn max_ratio(&self) -> usize {
        match self.mode {
            ScheduleMode::Fixed(a) | ScheduleMode::NoRandom(a) => a,
            ScheduleMode::Curriculum => self.stages.iter().flat_map(|s| s.pool.iter().copied()).max().unwrap_or(1),
        }
    }

    /// Ratio the run ends on: the fixed ratio, or the largest ratio of the final stage.
    pub fn final_ratio(&self) -> usize {
        match self.mode {
            ScheduleMode::Fixed(a) | ScheduleMode::NoRandom(a) => a,
            ScheduleMode::Curriculum => self.stages.last().and_then(|s| s.pool.iter().copied().max()).unwrap_or(1),
        }
    }

    pub fn sample_ratio(&self, step: usize, total_steps: usize, rng: &mut Rng) -> usize {
        match self.mode {
            ScheduleMode::Fixed(a) | ScheduleMode::NoRandom(a) => a,
            ScheduleMode::Curriculum => {
                let pool = &self.active_stage(step, total_steps).pool;
                pool[rng.below(0, pool.len())]
            }
        }
    }

    /// Ratios for each of `n_intervals` intervals of one training sequence.
    pub fn sample_sequence(&self, step: usize, total_steps: usize, n_intervals: usize, rng: &mut Rng) -> Vec<usize> {
        if self.per_interval {
            (0..n_intervals).map(|_| self.sample_ratio(step, total_steps, rng)).collect()
        } else {
            vec![self.sample_ratio(step, total_steps, rng); n_intervals]
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    AvgPool,
    MaxPool,
    SimilarityMerge,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 3] = [BaselineKind::AvgPool, BaselineKind::MaxPool, BaselineKind::SimilarityMerge];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::AvgPool => "avg_pool",
            BaselineKind::MaxPool => "max_pool",
            BaselineKind::SimilarityMerge => "similarity_merge",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BaselinePolicy {
    pub kind: BaselineKind,
    pub ratio: usize,
}

impl BaselinePolicy {
    pub fn new(kind: BaselineKind, ratio: usize) -> Result<Self> {
        if ratio < 2 {
            return Err(Error::Config(format!("baseline ratio must be at least 2, got {ratio}")));
        }
        Ok(BaselinePolicy { kind, ratio })
    }

    /// Row segments `[start, end)` that collapse into one output row each.
    pub fn segments<T: Scalar>(&self, rows: &Tensor<T>) -> Result<Vec<(usize, usize)>> {
        let (w, _) = rows.dims2()?;
        if w == 0 {
            return Err(Error::Empty("baseline input"));
        }
        let ratio = self.ratio.max(1);
        match self.kind {
            BaselineKind::AvgPool | BaselineKind::MaxPool => {
                Ok((0..w).step_by(ratio).map(|s| (s, (s + ratio).min(w))).collect())
            }
            BaselineKind::SimilarityMerge => Ok(similarity_segments(rows, w.div_ceil(ratio))),
        }
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        0.0
    } else {
        ab / (aa.sqrt() * bb.sqrt())
    }
}

/// Greedy adjacent merging: repeatedly fuse the neighbouring pair whose
/// means have the highest cosine similarity (lowest index on ties) until
/// `target` segments remain.
fn similarity_segments<T: Scalar>(rows: &Tensor<T>, target: usize) -> Vec<(usize, usize)> {
    let (w, d) = rows.dims2().expect("matrix");
    let mut segs: Vec<(usize, usize)> = (0..w).map(|r| (r, r + 1)).collect();
    // Segment sums; cosine of sums equals cosine of means.
    let mut sums: Vec<Vec<f64>> = (0..w).map(|r| rows.row(r).iter().map(|v| v.as_f64()).collect()).collect();
    let mut scores: Vec<f64> = (0..w.saturating_sub(1)).map(|i| cosine(&sums[i], &sums[i + 1])).collect();
    while segs.len() > target.max(1) {
        let mut best = 0;
        for (i, &s) in scores.iter().enumerate() {
            if s > scores[best] {
                best = i;
            }
        }
        let right = sums.remove(best + 1);
        for (x, y) in sums[best].iter_mut().zip(&right) {
            *x += y;
        }
        let (_, end) = segs.remove(best + 1);
        segs[best].1 = end;
        scores.remove(best);
        if best > 0 {
            scores[best - 1] = cosine(&sums[best - 1], &sums[best]);
        }
        if best < scores.len() {
            scores[best] = cosine(&sums[best], &sums[best + 1]);
        }
    }
    debug_assert!(d == 0 || segs.last().map(|s| s.1) == Some(w));
    segs
}

/// Compresses `[w × d]` embeddings to one row per segment (mean or column-wise max).
pub fn baseline_compress<T: Scalar>(policy: &BaselinePolicy, embeddings: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, d) = embeddings.dims2()?;
    let segs = policy.segments(embeddings)?;
    let mut out = Vec::with_capacity(segs.len() * d);
    for &(s, e) in &segs {
        for j in 0..d {
            let col = (s..e).map(|r| embeddings.data()[r * d + j]);
            out.push(match policy.kind {
                BaselineKind::MaxPool => col.fold(T::neg_infinity(), T::max),
                _ => col.sum::<T>() / T::lit((e - s) as f64),
            });
        }
    }
    Tensor::new(vec![segs.len(), d], out)
}

/// Differentiable version of [`baseline_compress`]; segment boundaries are
/// chosen from the current values and treated as constants.
pub fn baseline_compress_var<'t, T: Scalar>(policy: &BaselinePolicy, embeddings: Var<'t, T>) -> Result<Var<'t, T>> {
    let values = embeddings.value();
    let (w, _) = values.dims2()?;
    let segs = policy.segments(&values)?;
    match policy.kind {
        BaselineKind::MaxPool => embeddings.segment_max(&segs),
        _ => {
            let mut pool = vec![T::zero(); segs.len() * w];
            for (i, &(s, e)) in segs.iter().enumerate() {
                let inv = T::one() / T::lit((e - s) as f64);
                for r in s..e {
                    pool[i * w + r] = inv;
                }
            }
            let pool = embeddings.tape().constant(Tensor::new(vec![segs.len(), w], pool)?);
            pool.matmul(embeddings)
        }
    }
}
