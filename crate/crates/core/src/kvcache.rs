//! Per-layer key/value storage across intervals, with summary-token retention.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Prompt,
    Content,
    Sst,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EntryMeta {
    pub role: Role,
    pub position: usize,
    pub interval: Option<usize>,
}

/// Keys (post-rotation) and values for a run of entries, heads concatenated: `[len × d_model]`.
#[derive(Clone, Copy, Debug)]
pub struct LayerKv<'t, T: Scalar> {
    pub keys: Var<'t, T>,
    pub values: Var<'t, T>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub retained_entries: usize,
    pub evicted_entries: usize,
    pub peak_entries: usize,
    pub bytes_estimate: usize,
}

impl CacheStats {
    pub const CSV_HEADER: &'static str = "seq_len,interval_len,ratio,retained,evicted,peak,bytes_estimate";

    pub fn csv_row(&self, seq_len: usize, interval_len: usize, ratio: usize) -> String {
        format!(
            "{seq_len},{interval_len},{ratio},{},{},{},{}",
            self.retained_entries, self.evicted_entries, self.peak_entries, self.bytes_estimate
        )
    }
}

/// Result of one retention pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RetainDelta {
    pub evicted: usize,
    /// Summary entries of the interval that stay visible.
    pub kept: usize,
}

/// An evicted entry kept for inspection only; never attended to again.
#[derive(Clone, Debug)]
pub struct SpilledEntry<T> {
    pub meta: EntryMeta,
    pub keys: Vec<Tensor<T>>,
    pub values: Vec<Tensor<T>>,
}

pub struct KvCache<'t, T: Scalar> {
    n_layers: usize,
    d_model: usize,
    layers: Vec<Option<LayerKv<'t, T>>>,
    entries: Vec<EntryMeta>,
    appended: usize,
    evicted: usize,
    peak: usize,
    spill: Option<Vec<SpilledEntry<T>>>,
}

impl<'t, T: Scalar> KvCache<'t, T> {
    pub fn new(n_layers: usize, d_model: usize) -> Self {
        KvCache {
            n_layers,
            d_model,
            layers: vec![None; n_layers],
            entries: Vec::new(),
            appended: 0,
            evicted: 0,
            peak: 0,
            spill: None,
        }
    }

    /// Keeps copies of evicted entries in an inspection buffer.
    pub fn with_spill(mut self) -> Self {
        self.spill = Some(Vec::new());
        self
    }

    pub fn spilled(&self) -> &[SpilledEntry<T>] {
        self.spill.as_deref().unwrap_or(&[])
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[EntryMeta] {
        &self.entries
    }

    pub fn max_position(&self) -> Option<usize> {
        self.entries.last().map(|e| e.position)
    }

    pub fn count_role(&self, role: Role) -> usize {
        self.entries.iter().filter(|e| e.role == role).count()
    }

    /// Attention-visible keys and values of `layer` in position order.
    pub fn visible_entries(&self, layer: usize) -> Option<LayerKv<'t, T>> {
        self.layers.get(layer).copied().flatten()
    }

    pub fn stats(&self) -> CacheStats {
        self.stats_with_width(T::DTYPE.width())
    }

    pub fn stats_with_width(&self, dtype_width: usize) -> CacheStats {
        CacheStats {
            retained_entries: self.entries.len(),
            evicted_entries: self.evicted,
            peak_entries: self.peak,
            bytes_estimate: self.peak * self.n_layers * 2 * self.d_model * dtype_width,
        }
    }

    pub fn appended(&self) -> usize {
        self.appended
    }

    /// Adds one block of entries to every layer. Positions must be strictly
    /// increasing and beyond everything already stored.
    pub fn append(&mut self, kv: &[LayerKv<'t, T>], meta: &[EntryMeta]) -> Result<()> {
        if meta.is_empty() {
            return Ok(());
        }
        if kv.len() != self.n_layers {
            return Err(Error::Ordering(format!("{} layers supplied for a {}-layer cache", kv.len(), self.n_layers)));
        }
        let mut last = self.max_position();
        for m in meta {
            if last.is_some_and(|p| m.position <= p) {
                return Err(Error::Ordering(format!("position {} after {}", m.position, last.unwrap_or(0))));
            }
            last = Some(m.position);
        }
        for (l, layer) in kv.iter().enumerate() {
            for part in [layer.keys, layer.values] {
                if part.shape() != [meta.len(), self.d_model] {
                    return Err(Error::shape("kv append", format!("layer {l}: {:?} for {} entries", part.shape(), meta.len())));
                }
            }
        }
        for (slot, layer) in self.layers.iter_mut().zip(kv) {
            *slot = Some(match *slot {
                None => *layer,
                Some(old) => {
                    let tape = old.keys.tape();
                    LayerKv { keys: tape.concat(&[old.keys, layer.keys], 0)?, values: tape.concat(&[old.values, layer.values], 0)? }
                }
            });
        }
        self.entries.extend_from_slice(meta);
        self.appended += meta.len();
        self.peak = self.peak.max(self.entries.len());
        Ok(())
    }

    /// Evicts content entries of intervals `<= interval`; prompt and summary entries stay.
    pub fn retain_ssts(&mut self, interval: usize) -> Result<RetainDelta> {
        let last_of_interval = self.entries.iter().rev().find(|e| e.interval == Some(interval));
        match last_of_interval {
            Some(e) if e.role == Role::Sst => {}
            _ => return Err(Error::IntervalIncomplete(interval)),
        }
        let evict = |e: &EntryMeta| e.role == Role::Content && e.interval.is_some_and(|i| i <= interval);
        let keep: Vec<usize> = (0..self.entries.len()).filter(|&i| !evict(&self.entries[i])).collect();
        let evicted = self.entries.len() - keep.len();
        let kept = self.entries.iter().filter(|e| e.role == Role::Sst && e.interval == Some(interval)).count();
        if evicted == 0 {
            return Ok(RetainDelta { evicted, kept });
        }
        if let Some(spill) = self.spill.as_mut() {
            let layers: Vec<_> = self.layers.iter().flatten().map(|l| (l.keys.value(), l.values.value())).collect();
            for (i, e) in self.entries.iter().enumerate().filter(|(_, e)| evict(e)) {
                let row = |t: &Tensor<T>| Tensor::new(vec![1, self.d_model], t.row(i).to_vec()).expect("row");
                spill.push(SpilledEntry {
                    meta: *e,
                    keys: layers.iter().map(|(k, _)| row(k)).collect(),
                    values: layers.iter().map(|(_, v)| row(v)).collect(),
                });
            }
        }
        for slot in self.layers.iter_mut() {
            if let Some(layer) = slot {
                *slot = if keep.is_empty() {
                    None
                } else {
                    Some(LayerKv { keys: layer.keys.select_rows(&keep)?, values: layer.values.select_rows(&keep)? })
                };
            }
        }
        self.entries = keep.iter().map(|&i| self.entries[i]).collect();
        self.evicted += evicted;
        Ok(RetainDelta { evicted, kept })
    }
}
