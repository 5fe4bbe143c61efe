use proptest::prelude::*;
use sstkv::compression::interleave_sst;
use sstkv::kvcache::{EntryMeta, KvCache, LayerKv, Role};
use sstkv::{Tape, Tensor, TokenId};

/// Replays the retention schedule with plain counters.
fn counting_oracle(n: usize, w: usize, ratio: usize, prompt: usize) -> (usize, usize, usize) {
    let mut visible = prompt;
    let mut peak = prompt;
    let mut evicted = 0;
    let mut start = 0;
    while start < n {
        let span = w.min(n - start);
        let k = span.div_ceil(ratio);
        visible += span + k;
        peak = peak.max(visible);
        visible -= span;
        evicted += span;
        start += span;
    }
    (visible, evicted, peak)
}

fn run_cache(n: usize, w: usize, ratio: usize, prompt: usize) -> (usize, usize, usize, usize) {
    let tape = Tape::<f32>::new();
    let mut cache = KvCache::new(1, 2);
    let block = |rows: usize| {
        let t = Tensor::zeros(&[rows, 2]);
        vec![LayerKv { keys: tape.constant(t.clone()), values: tape.constant(t) }]
    };
    let mut pos = 0;
    if prompt > 0 {
        let meta: Vec<EntryMeta> = (0..prompt).map(|p| EntryMeta { role: Role::Prompt, position: p, interval: None }).collect();
        cache.append(&block(prompt), &meta).unwrap();
        pos = prompt;
    }
    let content = vec![TokenId(5); w];
    let mut start = 0;
    let mut i = 0;
    while start < n {
        let span = w.min(n - start);
        let (tokens, layout) = interleave_sst(i, span, ratio, TokenId(0), &content[..span]).unwrap();
        let mask = layout.slot_mask();
        let meta: Vec<EntryMeta> = mask
            .iter()
            .enumerate()
            .map(|(j, &s)| EntryMeta { role: if s { Role::Sst } else { Role::Content }, position: pos + j, interval: Some(i) })
            .collect();
        cache.append(&block(tokens.len()), &meta).unwrap();
        let delta = cache.retain_ssts(i).unwrap();
        assert_eq!(delta.evicted, span);
        assert_eq!(delta.kept, layout.sst_count);
        assert!(cache.entries().iter().all(|e| !(e.role == Role::Content && e.interval.is_some_and(|x| x <= i))));
        assert!(cache.entries().windows(2).all(|p| p[0].position < p[1].position));
        pos += tokens.len();
        start += span;
        i += 1;
    }
    let s = cache.stats();
    assert_eq!(s.retained_entries + s.evicted_entries, cache.appended());
    assert!(s.peak_entries >= s.retained_entries);
    (s.retained_entries, s.evicted_entries, s.peak_entries, cache.count_role(Role::Prompt))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cache_counts_match_oracle(n in 1usize..700, w in 1usize..80, ratio in 1usize..12, prompt in 0usize..5) {
        let ratio = ratio.min(w);
        let (r, e, p, m) = run_cache(n, w, ratio, prompt);
        prop_assert_eq!((r, e, p), counting_oracle(n, w, ratio, prompt));
        prop_assert_eq!(m, prompt);
    }
}

#[test]
fn documented_counting_cases() {
    let (r, e, p, _) = run_cache(5120, 512, 8, 0);
    assert_eq!((r, e, p), (640, 5120, 1152));
    // four intervals at 4x with a 16-token prompt
    assert_eq!(run_cache(2048, 512, 4, 16).0, 16 + 4 * 128);
    assert_eq!(run_cache(4, 4, 1, 0).0, 4);
}

#[test]
fn bytes_estimate_follows_peak() {
    let tape = Tape::<f64>::new();
    let mut cache = KvCache::new(3, 4);
    let t = Tensor::zeros(&[2, 4]);
    let kv: Vec<_> = (0..3).map(|_| LayerKv { keys: tape.constant(t.clone()), values: tape.constant(t.clone()) }).collect();
    let meta: Vec<EntryMeta> = (0..2).map(|p| EntryMeta { role: Role::Prompt, position: p, interval: None }).collect();
    cache.append(&kv, &meta).unwrap();
    assert_eq!(cache.stats().bytes_estimate, 2 * 3 * 2 * 4 * 8);
    assert_eq!(cache.stats().csv_row(2, 512, 8), "2,512,8,2,0,2,384");
}
