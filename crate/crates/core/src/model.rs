//! Small pre-norm decoder whose attention reads an explicit external KV cache.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kvcache::{KvCache, LayerKv};
use crate::numerics::{ParamStore, Rng, Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_position: usize,
    pub rope_base: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { vocab_size: 64, d_model: 64, n_heads: 4, n_layers: 2, d_ff: 256, max_position: 32_768, rope_base: 10_000.0 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.vocab_size < 8 {
            return fail(format!("vocab_size {} < 8", self.vocab_size));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if !(self.d_model / self.n_heads).is_multiple_of(2) {
            return fail("head width must be even for rotary encoding".into());
        }
        if self.n_layers == 0 || self.d_ff == 0 || self.max_position == 0 {
            return fail("n_layers, d_ff and max_position must be positive".into());
        }
        if !(self.rope_base > 1.0) {
            return fail(format!("rope_base {} must exceed 1", self.rope_base));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Parameter tensors in checkpoint order, with their shapes.
fn param_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (d, f, v) = (cfg.d_model, cfg.d_ff, cfg.vocab_size);
    let mut out = vec![("tok_emb".to_string(), vec![v, d])];
    for l in 0..cfg.n_layers {
        for (name, shape) in [
            ("attn_norm", vec![d]),
            ("wq", vec![d, d]),
            ("wk", vec![d, d]),
            ("wv", vec![d, d]),
            ("wo", vec![d, d]),
            ("mlp_norm", vec![d]),
            ("w_in", vec![d, f]),
            ("w_out", vec![f, d]),
        ] {
            out.push((format!("layers.{l}.{name}"), shape));
        }
    }
    out.push(("final_norm".into(), vec![d]));
    out.push(("head.weight".into(), vec![d, v]));
    out.push(("head.bias".into(), vec![v]));
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub cfg: ModelConfig,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    pub fn init(cfg: ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let residual_scale = 1.0 / (2.0 * cfg.n_layers as f64).sqrt();
        let mut params = ParamStore::new();
        for (name, shape) in param_layout(&cfg) {
            let numel: usize = shape.iter().product();
            let std = if name.ends_with("norm") || name == "head.bias" {
                None
            } else if name == "tok_emb" {
                Some(1.0)
            } else if name == "head.weight" {
                Some(0.02)
            } else {
                let fan_in = shape[0] as f64;
                let out_proj = name.ends_with(".wo") || name.ends_with(".w_out");
                Some(fan_in.powf(-0.5) * if out_proj { residual_scale } else { 1.0 })
            };
            let data = match std {
                Some(s) => (0..numel).map(|_| T::lit(rng.normal() * s)).collect(),
                None if name == "head.bias" => vec![T::zero(); numel],
                None => vec![T::one(); numel],
            };
            params.insert(name, Tensor::new(shape, data)?)?;
        }
        Ok(Model { cfg, params })
    }

    pub fn from_params(cfg: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        let layout = param_layout(&cfg);
        if layout.len() != params.len() {
            return Err(Error::Checkpoint(format!("expected {} tensors, found {}", layout.len(), params.len())));
        }
        for ((want_name, want_shape), (name, t)) in layout.iter().zip(params.iter()) {
            if want_name != name || want_shape.as_slice() != t.shape() {
                return Err(Error::Checkpoint(format!("tensor {name} {:?} does not match {want_name} {want_shape:?}", t.shape())));
            }
        }
        Ok(Model { cfg, params })
    }

    /// Places every parameter on `tape`; `trainable` decides whether they collect gradients.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> Bound<'t, T> {
        let vars: Vec<Var<'t, T>> = self
            .params
            .iter()
            .map(|(_, t)| if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        let per_layer = 8;
        let layers = (0..self.cfg.n_layers)
            .map(|l| {
                let v = &vars[1 + l * per_layer..1 + (l + 1) * per_layer];
                LayerVars { attn_norm: v[0], wq: v[1], wk: v[2], wv: v[3], wo: v[4], mlp_norm: v[5], w_in: v[6], w_out: v[7] }
            })
            .collect();
        let n = vars.len();
        Bound {
            cfg: self.cfg.clone(),
            tok_emb: vars[0],
            layers,
            final_norm: vars[n - 3],
            head_w: vars[n - 2],
            head_b: vars[n - 1],
            vars,
        }
    }
}

struct LayerVars<'t, T: Scalar> {
    attn_norm: Var<'t, T>,
    wq: Var<'t, T>,
    wk: Var<'t, T>,
    wv: Var<'t, T>,
    wo: Var<'t, T>,
    mlp_norm: Var<'t, T>,
    w_in: Var<'t, T>,
    w_out: Var<'t, T>,
}

/// Model parameters placed on one tape.
pub struct Bound<'t, T: Scalar> {
    pub cfg: ModelConfig,
    tok_emb: Var<'t, T>,
    layers: Vec<LayerVars<'t, T>>,
    final_norm: Var<'t, T>,
    head_w: Var<'t, T>,
    head_b: Var<'t, T>,
    vars: Vec<Var<'t, T>>,
}

/// Output of encoding one block of tokens.
pub struct StepOutput<'t, T: Scalar> {
    /// Residual stream after the last layer, `[block × d_model]`. Rows that were
    /// pruned from upper layers hold stale values.
    pub hidden: Var<'t, T>,
    /// Per-layer keys/values of the block's tokens; not yet in the cache.
    pub new_kv: Vec<LayerKv<'t, T>>,
    pub positions: Vec<usize>,
}

impl<'t, T: Scalar> Bound<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tok_emb.tape()
    }

    /// Parameter vars in checkpoint order.
    pub fn vars(&self) -> &[Var<'t, T>] {
        &self.vars
    }

    /// Gradients aligned with parameter order; zeros where nothing flowed.
    pub fn grads(&self) -> Vec<Tensor<T>> {
        self.vars.iter().map(|v| v.grad().unwrap_or_else(|| Tensor::zeros(&v.shape()))).collect()
    }

    pub fn embed(&self, tokens: &[TokenId]) -> Result<Var<'t, T>> {
        let ids: Vec<usize> = tokens.iter().map(|t| t.index()).collect();
        self.tape().embedding(self.tok_emb, &ids)
    }

    /// Encodes `tokens` at absolute `positions` against everything in `cache`.
    pub fn encode_block(&self, tokens: &[TokenId], positions: &[usize], cache: &KvCache<'t, T>) -> Result<StepOutput<'t, T>> {
        let x = self.embed(tokens)?;
        self.encode_embedded(x, positions, cache, None)
    }

    /// Core block encoder over precomputed input rows.
    ///
    /// Row `r` of the block attends to every cache entry plus block rows
    /// `0..=r`. With `depth = Some(d)`, row `r` runs attention and MLP only in
    /// layers `< d[r]`; above that its residual is left untouched while its
    /// keys and values are still produced for every layer.
    pub fn encode_embedded(
        &self,
        x: Var<'t, T>,
        positions: &[usize],
        cache: &KvCache<'t, T>,
        depth: Option<&[usize]>,
    ) -> Result<StepOutput<'t, T>> {
        let cfg = &self.cfg;
        let rows = x.shape()[0];
        if positions.len() != rows || rows == 0 {
            return Err(Error::shape("encode_block", format!("{rows} rows with {} positions", positions.len())));
        }
        if positions.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::Ordering("block positions must be strictly increasing".into()));
        }
        if let Some(max) = cache.max_position() {
            if positions[0] <= max {
                return Err(Error::PositionCollision { position: positions[0], cached_max: max });
            }
        }
        let last = *positions.last().expect("non-empty");
        if last >= cfg.max_position {
            return Err(Error::BlockTooLong { len: rows, max: cfg.max_position });
        }
        if let Some(d) = depth {
            if d.len() != rows {
                return Err(Error::shape("encode_block", format!("{} depths for {rows} rows", d.len())));
            }
        }
        let cached = cache.len();
        let mut h = x;
        let mut new_kv = Vec::with_capacity(cfg.n_layers);
        for (l, layer) in self.layers.iter().enumerate() {
            let normed = h.rms_norm(layer.attn_norm)?;
            let k = normed.matmul(layer.wk)?.rope(positions, cfg.n_heads, cfg.rope_base)?;
            let v = normed.matmul(layer.wv)?;
            new_kv.push(LayerKv { keys: k, values: v });

            let active: Option<Vec<usize>> = depth.map(|d| (0..rows).filter(|&r| d[r] > l).collect());
            let (h_act, n_act, pos_act, lens) = match &active {
                None => (h, normed, positions.to_vec(), (0..rows).map(|r| cached + r + 1).collect::<Vec<_>>()),
                Some(a) if a.is_empty() => continue,
                Some(a) if a.len() == rows => (h, normed, positions.to_vec(), (0..rows).map(|r| cached + r + 1).collect()),
                Some(a) => (
                    h.select_rows(a)?,
                    normed.select_rows(a)?,
                    a.iter().map(|&r| positions[r]).collect(),
                    a.iter().map(|&r| cached + r + 1).collect(),
                ),
            };
            let q = n_act.matmul(layer.wq)?.rope(&pos_act, cfg.n_heads, cfg.rope_base)?;
            let (keys, values) = match cache.visible_entries(l) {
                Some(c) => (self.tape().concat(&[c.keys, k], 0)?, self.tape().concat(&[c.values, v], 0)?),
                None => (k, v),
            };
            let attn = self.tape().attention(q, keys, values, &lens, cfg.n_heads)?.matmul(layer.wo)?;
            let h2 = h_act.add(attn)?;
            let mlp = h2.rms_norm(layer.mlp_norm)?.matmul(layer.w_in)?.silu().matmul(layer.w_out)?;
            let h3 = h2.add(mlp)?;
            h = match &active {
                Some(a) if a.len() != rows => h.replace_rows(a, h3)?,
                _ => h3,
            };
        }
        self.tape().ensure_finite()?;
        Ok(StepOutput { hidden: h, new_kv, positions: positions.to_vec() })
    }

    /// Final norm and untied output head: `[steps × d_model] -> [steps × vocab]`.
    pub fn lm_logits(&self, hidden: Var<'t, T>) -> Result<Var<'t, T>> {
        hidden.rms_norm(self.final_norm)?.matmul(self.head_w)?.add_row(self.head_b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kvcache::{EntryMeta, Role};

    fn tiny() -> ModelConfig {
        ModelConfig { vocab_size: 16, d_model: 8, n_heads: 2, n_layers: 2, d_ff: 16, max_position: 64, rope_base: 10_000.0 }
    }

    fn toks(v: &[u32]) -> Vec<TokenId> {
        v.iter().map(|&i| TokenId(i)).collect()
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        assert!(ModelConfig { d_model: 30, ..ModelConfig::default() }.validate().is_err());
        assert!(ModelConfig { vocab_size: 7, ..ModelConfig::default() }.validate().is_err());
    }

    #[test]
    fn single_token_attends_only_to_itself() {
        let model = Model::<f64>::init(tiny(), &mut Rng::new(1)).unwrap();
        let tape = Tape::new();
        let b = model.bind(&tape, false);
        let cache = KvCache::new(2, 8);
        let out = b.encode_block(&toks(&[3]), &[0], &cache).unwrap();
        assert_eq!(out.hidden.shape(), vec![1, 8]);
        assert_eq!(tape.score_pairs(), 2); // one pair per layer
    }

    #[test]
    fn zero_hidden_and_zero_bias_give_uniform_distribution() {
        let model = Model::<f64>::init(tiny(), &mut Rng::new(1)).unwrap();
        let tape = Tape::new();
        let b = model.bind(&tape, false);
        let logits = b.lm_logits(tape.constant(Tensor::zeros(&[3, 8]))).unwrap();
        assert_eq!(logits.shape(), vec![3, 16]);
        let p = logits.value().softmax(1).unwrap();
        assert!(p.data().iter().all(|v| (v - 1.0 / 16.0).abs() < 1e-12));
    }

    #[test]
    fn position_collision_and_overflow() {
        let model = Model::<f32>::init(tiny(), &mut Rng::new(1)).unwrap();
        let tape = Tape::new();
        let b = model.bind(&tape, false);
        let mut cache = KvCache::new(2, 8);
        let out = b.encode_block(&toks(&[1, 2]), &[0, 1], &cache).unwrap();
        let meta: Vec<EntryMeta> = (0..2).map(|p| EntryMeta { role: Role::Prompt, position: p, interval: None }).collect();
        cache.append(&out.new_kv, &meta).unwrap();
        assert!(matches!(b.encode_block(&toks(&[3]), &[1], &cache), Err(Error::PositionCollision { .. })));
        assert!(matches!(b.encode_block(&toks(&[3]), &[64], &cache), Err(Error::BlockTooLong { .. })));
    }

    #[test]
    fn causality_exact() {
        let model = Model::<f64>::init(tiny(), &mut Rng::new(7)).unwrap();
        let run = |seq: &[u32]| {
            let tape = Tape::new();
            let b = model.bind(&tape, false);
            let pos: Vec<usize> = (0..seq.len()).collect();
            let out = b.encode_block(&toks(seq), &pos, &KvCache::new(2, 8)).unwrap();
            b.lm_logits(out.hidden).unwrap().value().as_ref().clone()
        };
        let a = run(&[1, 2, 3, 4, 5, 6]);
        let c = run(&[1, 2, 3, 9, 5, 6]);
        for r in 0..3 {
            assert_eq!(a.row(r), c.row(r));
        }
        assert_ne!(a.row(3), c.row(3));
    }

    #[test]
    fn checkpoint_layout_validated() {
        let model = Model::<f32>::init(tiny(), &mut Rng::new(1)).unwrap();
        assert!(Model::from_params(tiny(), model.params.clone()).is_ok());
        let other = ModelConfig { d_ff: 32, ..tiny() };
        assert!(Model::from_params(other, model.params).is_err());
    }
}
