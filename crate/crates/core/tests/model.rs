use sstkv::harness::checks::relative_deviation;
use sstkv::harness::forward::{chunked_logits, single_pass_logits};
use sstkv::kvcache::{EntryMeta, KvCache, Role};
use sstkv::model::{Model, ModelConfig};
use sstkv::numerics::Scalar;
use sstkv::{Rng, Tape, TokenId};

fn cfg() -> ModelConfig {
    ModelConfig { vocab_size: 24, d_model: 16, n_heads: 4, n_layers: 2, d_ff: 32, max_position: 256, rope_base: 10_000.0 }
}

fn tokens(n: usize, seed: u64) -> Vec<TokenId> {
    let mut rng = Rng::new(seed);
    (0..n).map(|_| TokenId(rng.below(0, 24) as u32)).collect()
}

fn two_block_deviation<T: Scalar>() -> f64 {
    let model = Model::<T>::init(cfg(), &mut Rng::new(4)).unwrap();
    let tape = Tape::new();
    let b = model.bind(&tape, false);
    let seq = tokens(16, 1);
    let whole = single_pass_logits(&b, &seq).unwrap().value();
    let halves = chunked_logits(&b, &seq, 8).unwrap().value();
    relative_deviation(&halves, &whole).unwrap()
}

#[test]
fn two_blocks_equal_one_pass() {
    assert!(two_block_deviation::<f32>() <= 1e-4);
    assert!(two_block_deviation::<f64>() <= 1e-10);
}

#[test]
fn perturbing_a_token_never_changes_earlier_logits() {
    let model = Model::<f64>::init(cfg(), &mut Rng::new(2)).unwrap();
    let seq = tokens(20, 3);
    let tape = Tape::new();
    let b = model.bind(&tape, false);
    let base = chunked_logits(&b, &seq, 6).unwrap().value();
    for j in [0, 5, 6, 13, 19] {
        let mut other = seq.clone();
        other[j] = TokenId((other[j].0 + 1) % 24);
        let changed = chunked_logits(&b, &other, 6).unwrap().value();
        for r in 0..j {
            assert_eq!(base.row(r), changed.row(r), "row {r} moved when token {j} changed");
        }
        assert_ne!(base.row(j), changed.row(j));
    }
}

fn sst_meta(positions: &[usize]) -> Vec<EntryMeta> {
    positions.iter().map(|&p| EntryMeta { role: Role::Sst, position: p, interval: Some(0) }).collect()
}

#[test]
fn attention_support_is_cache_plus_block_prefix() {
    let model = Model::<f64>::init(cfg(), &mut Rng::new(8)).unwrap();
    let tape = Tape::new();
    let b = model.bind(&tape, false);
    let mut cache = KvCache::new(2, 16);
    let first = b.encode_block(&tokens(3, 4), &[2, 5, 9], &cache).unwrap();
    cache.append(&first.new_kv, &sst_meta(&[2, 5, 9])).unwrap();
    let before = tape.score_pairs();
    b.encode_block(&tokens(2, 5), &[10, 11], &cache).unwrap();
    // per layer: first row sees 3 + 1 keys, second sees 3 + 2
    assert_eq!(tape.score_pairs() - before, 2 * (4 + 5));
}

#[test]
fn retained_summary_keys_are_reused_verbatim() {
    let model = Model::<f64>::init(cfg(), &mut Rng::new(8)).unwrap();
    let tape = Tape::new();
    let b = model.bind(&tape, false);
    let mut cache = KvCache::new(2, 16);
    let seq = tokens(6, 9);
    let out = b.encode_block(&seq, &[0, 1, 2, 3, 4, 5], &cache).unwrap();
    let meta: Vec<EntryMeta> = (0..6)
        .map(|p| EntryMeta { role: if p % 3 == 2 { Role::Sst } else { Role::Content }, position: p, interval: Some(0) })
        .collect();
    cache.append(&out.new_kv, &meta).unwrap();
    let keys_before = out.new_kv[1].keys.value();
    cache.retain_ssts(0).unwrap();
    let later = b.encode_block(&tokens(4, 10), &[6, 7, 8, 9], &cache).unwrap();
    let meta: Vec<EntryMeta> = (6..10).map(|p| EntryMeta { role: Role::Content, position: p, interval: Some(1) }).collect();
    cache.append(&later.new_kv, &meta).unwrap();
    let keys_after = cache.visible_entries(1).unwrap().keys.value();
    assert_eq!(keys_after.row(0), keys_before.row(2));
    assert_eq!(keys_after.row(1), keys_before.row(5));
    assert_eq!(cache.entries().iter().map(|e| e.position).collect::<Vec<_>>(), vec![2, 5, 6, 7, 8, 9]);
}
