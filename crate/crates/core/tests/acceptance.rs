//! End-to-end acceptance checks. Each test prints one `ACCEPTANCE` line with
//! its verdict and the measured values, then asserts the verdict.

use std::sync::Mutex;
use std::time::{Duration, Instant};

use sstkv::compression::{interleave_sst, BaselineKind, CurriculumSchedule};
use sstkv::harness::checks::{equiv_check, grad_check, EQUIV_TOL_F32, EQUIV_TOL_F64};
use sstkv::harness::data::{instance, SALT_TRAIN};
use sstkv::harness::forward::{forward_long, ForwardSpec};
use sstkv::harness::train::{load_checkpoint, save_checkpoint};
use sstkv::harness::{cost_model, eval_csv, evaluate, train, CostQuery, Execution, MetricRecord, Policy, RunConfig};
use sstkv::kvcache::{EntryMeta, KvCache, LayerKv, Role};
use sstkv::model::{Model, ModelConfig};
use sstkv::tasks::{TaskConfig, TaskKind};
use sstkv::{Rng, Tape, Tensor, TokenId};

/// Heavy checks run one at a time so timings are not distorted by each other.
static SERIAL: Mutex<()> = Mutex::new(());

fn report(id: u32, name: &str, pass: bool, detail: &str) {
    println!("ACCEPTANCE {id:>2} {name}: {} | {detail}", if pass { "PASS" } else { "FAIL" });
}

#[test]
fn c01_chunked_full_equivalence() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let r = equiv_check(2024, 100, 2048).unwrap();
    let elapsed = start.elapsed();
    let pass = r.passed && r.cases.len() == 100 && elapsed < Duration::from_secs(120);
    let longest = r.cases.iter().map(|c| c.seq_len).max().unwrap_or(0);
    report(
        1,
        "chunked/full equivalence",
        pass,
        &format!(
            "100 configs (longest n={longest}), max dev f32 {:.2e} (tol {EQUIV_TOL_F32:e}), f64 {:.2e} (tol {EQUIV_TOL_F64:e}), {:.1}s",
            r.max_dev_f32,
            r.max_dev_f64,
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn c02_gradient_check() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let r = grad_check(0).unwrap();
    let cfg = sstkv::harness::checks::grad_check_config();
    assert_eq!((cfg.d_model, cfg.n_layers, cfg.vocab_size), (16, 1, 32));
    let min_checked = r.tensors.iter().map(|t| t.checked).min().unwrap_or(0);
    let worst = r.tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max);
    let pass = r.passed && min_checked > 0;
    report(
        2,
        "gradient check",
        pass,
        &format!("{} tensors, min coords {min_checked} (tensors under 50 entries checked in full), worst rel err {worst:.2e} (tol 1e-3)", r.tensors.len()),
    );
    assert!(pass);
}

/// Replays the schedule with plain counters: (retained, evicted, peak).
fn counting_oracle(n: usize, w: usize, ratio: usize, prompt: usize) -> (usize, usize, usize) {
    let (mut visible, mut peak, mut evicted, mut start) = (prompt, prompt, 0, 0);
    while start < n {
        let span = w.min(n - start);
        let groups = span.div_ceil(ratio);
        visible += span + groups;
        peak = peak.max(visible);
        visible -= span;
        evicted += span;
        start += span;
    }
    (visible, evicted, peak)
}

fn cache_run(n: usize, w: usize, ratio: usize, prompt: usize) -> (usize, usize, usize) {
    let tape = Tape::<f32>::new();
    let mut cache = KvCache::new(1, 1);
    let kv = |rows: usize| {
        let t = Tensor::zeros(&[rows, 1]);
        vec![LayerKv { keys: tape.constant(t.clone()), values: tape.constant(t) }]
    };
    if prompt > 0 {
        let meta: Vec<EntryMeta> = (0..prompt).map(|p| EntryMeta { role: Role::Prompt, position: p, interval: None }).collect();
        cache.append(&kv(prompt), &meta).unwrap();
    }
    let mut pos = prompt;
    let content = vec![TokenId(9); w];
    for (i, s) in (0..n).step_by(w).enumerate() {
        let span = w.min(n - s);
        let (tokens, layout) = interleave_sst(i, span, ratio, TokenId(0), &content[..span]).unwrap();
        let meta: Vec<EntryMeta> = layout
            .slot_mask()
            .iter()
            .enumerate()
            .map(|(j, &sst)| EntryMeta { role: if sst { Role::Sst } else { Role::Content }, position: pos + j, interval: Some(i) })
            .collect();
        cache.append(&kv(tokens.len()), &meta).unwrap();
        cache.retain_ssts(i).unwrap();
        pos += tokens.len();
    }
    let s = cache.stats();
    (s.retained_entries, s.evicted_entries, s.peak_entries)
}

#[test]
fn c03_cache_accounting() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let cfg = ModelConfig::default();
    let mut combos = 0;
    let mut mismatches = Vec::new();
    for n in [1, 5, 64, 300, 1024, 1300, 5120] {
        for w in [4, 64, 512] {
            for ratio in [1, 2, 3, 8] {
                for prompt in [0, 2, 16] {
                    combos += 1;
                    let want = counting_oracle(n, w, ratio, prompt);
                    let got = cache_run(n, w, ratio, prompt);
                    let q = CostQuery { prompt_len: prompt, ..CostQuery::new(n, w, ratio, Policy::Sst) };
                    let c = cost_model(&cfg, &q).unwrap();
                    if got != want || (c.retained_entries, c.peak_kv_entries) != (want.0, want.2) {
                        mismatches.push(format!("{n}/{w}/{ratio}/{prompt}"));
                    }
                }
            }
        }
    }
    let anchor = cache_run(5120, 512, 8, 0);
    let pass = combos >= 200 && mismatches.is_empty() && anchor.0 == 640 && anchor.2 == 1152;
    report(
        3,
        "cache accounting",
        pass,
        &format!("{combos} combos, {} mismatches, n=5120 w=512 a=8 M=0 -> retained {} peak {}", mismatches.len(), anchor.0, anchor.2),
    );
    assert!(pass, "{mismatches:?}");
}

#[test]
fn c04_cost_curve_shape() {
    let cfg = ModelConfig::default();
    let w = 512;
    let mut below_dense = true;
    let mut ratios = Vec::new();
    let mut detail = Vec::new();
    for execution in [Execution::Pruned, Execution::Full] {
        let total = |n, p| cost_model(&cfg, &CostQuery { execution, ..CostQuery::new(n, w, 8, p) }).unwrap().total_flops;
        for n in (2 * w..=16384).step_by(128) {
            below_dense &= total(n, Policy::Sst) < total(n, Policy::Full);
        }
        let r: Vec<f64> = [1024, 2048, 4096, 8192, 16384].iter().map(|&n| total(n, Policy::Sst) as f64 / total(n, Policy::Full) as f64).collect();
        detail.push(format!("{execution:?} sst/dense {}", r.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(",")));
        ratios.push(r);
    }
    let monotone = ratios.iter().all(|r| r.windows(2).all(|p| p[1] < p[0]));
    let pass = below_dense && monotone;
    report(4, "cost curve shape (a=8)", pass, &format!("sst<dense for all n in [2w,16k]: {below_dense}; {}", detail.join("; ")));
    assert!(pass);
}

#[test]
fn c05_instrumented_equals_analytic() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let mut rng = Rng::new(55);
    let mut equal = 0;
    let runs = 20;
    for i in 0..runs {
        let cfg = ModelConfig {
            vocab_size: 64,
            d_model: 16,
            n_heads: 2,
            n_layers: rng.below(1, 4),
            d_ff: 32,
            max_position: 8192,
            rope_base: 10_000.0,
        };
        let kind = [TaskKind::NeedleRecall, TaskKind::MarkerCount, TaskKind::SegmentOrder][i % 3];
        let task = TaskConfig::new(kind, rng.below(16, 700));
        let w = [16, 64, 100, 512][rng.below(0, 4)];
        let ratio = rng.below(2, 17).min(w);
        let policy = Policy::ALL[rng.below(0, Policy::ALL.len())];
        let execution = if rng.below(0, 2) == 0 { Execution::Full } else { Execution::Pruned };
        let model = Model::<f32>::init(cfg.clone(), &mut Rng::new(i as u64)).unwrap();
        let inst = instance(&task, 64, 99, SALT_TRAIN, i as u64).unwrap();
        let tape = Tape::new();
        let b = model.bind(&tape, false);
        let spec = ForwardSpec { policy, interval_len: w, ratios: &[ratio], execution, keep_blocks: false };
        forward_long(&b, &spec, &inst).unwrap();
        let q = CostQuery { seq_len: inst.n, interval_len: w, ratio, policy, prompt_len: inst.prompt.len(), answer_len: inst.target.len(), execution };
        if tape.score_pairs() == cost_model(&cfg, &q).unwrap().score_pairs {
            equal += 1;
        }
    }
    let pass = equal == runs;
    report(5, "instrumented vs analytic score count", pass, &format!("{equal}/{runs} runs exact"));
    assert!(pass);
}

fn desk_config(name: &str) -> RunConfig {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    RunConfig::load(&path).unwrap()
}

fn seeded(run: &RunConfig, seed: u64) -> RunConfig {
    let mut r = run.clone();
    r.seed = seed;
    r.task.seed = seed;
    r
}

fn held_out(run: &RunConfig, policy: Policy) -> f64 {
    let model = train::<f32>(run, &mut |_| Ok(())).unwrap();
    evaluate(&model, run, policy, run.eval_instances).unwrap()[0].exact_match
}

const SEEDS: u64 = 10;
const TRAIN_BUDGET: Duration = Duration::from_secs(2 * 3600);

#[test]
fn c06_trainability() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let run = desk_config("needle.json");
    let start = Instant::now();
    let mut last = None;
    let model = train::<f32>(&run, &mut |m: &MetricRecord| {
        last = Some(m.clone());
        Ok(())
    })
    .unwrap();
    let rows = evaluate(&model, &RunConfig { eval_ratios: vec![2, 4], ..run.clone() }, Policy::Sst, run.eval_instances).unwrap();
    let elapsed = start.elapsed();
    let worst = rows.iter().map(|r| r.exact_match).fold(1.0, f64::min);
    let pass = run.steps <= 20_000 && worst > 0.9 && elapsed < TRAIN_BUDGET;
    let per_ratio: Vec<String> = rows.iter().map(|r| format!("a={} {:.3}", r.ratio, r.exact_match)).collect();
    report(
        6,
        "needle trainability",
        pass,
        &format!(
            "n={} steps={} held-out {} (bar > 0.9), final probe {:.3}, {:.0}s (budget {}s)",
            run.task.n,
            run.steps,
            per_ratio.join(", "),
            last.map_or(f64::NAN, |m| m.exact_match),
            elapsed.as_secs_f64(),
            TRAIN_BUDGET.as_secs()
        ),
    );
    assert!(pass);
}

#[test]
fn c07_curriculum_vs_fixed() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let base = desk_config("ablation_marker.json");
    let mut wins = 0;
    let mut per_seed = Vec::new();
    for seed in 0..SEEDS {
        let curriculum = seeded(&base, seed);
        let mut fixed = curriculum.clone();
        fixed.schedule = CurriculumSchedule::fixed(8);
        let (c, f) = (held_out(&curriculum, Policy::Sst), held_out(&fixed, Policy::Sst));
        wins += usize::from(c >= f);
        per_seed.push(format!("{seed}:{c:.3}/{f:.3}"));
    }
    let pass = wins >= 7;
    report(7, "curriculum >= fixed-8 at a=8 (marker_count)", pass, &format!("{wins}/{SEEDS} seeds (need 7), curriculum/fixed {}", per_seed.join(" ")));
    assert!(pass);
}

#[test]
fn c08_sst_vs_baselines() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let base = desk_config("baselines_needle.json");
    let baselines = [BaselineKind::AvgPool, BaselineKind::MaxPool, BaselineKind::SimilarityMerge];
    let mut wins = [0usize; 3];
    let mut per_seed = Vec::new();
    for seed in 0..SEEDS {
        let run = seeded(&base, seed);
        let sst = held_out(&run, Policy::Sst);
        let mut line = format!("{seed}:{sst:.3}");
        for (i, &kind) in baselines.iter().enumerate() {
            let policy = Policy::Baseline(kind);
            let b = held_out(&RunConfig { policy, ..run.clone() }, policy);
            wins[i] += usize::from(sst >= b);
            line.push_str(&format!("/{b:.3}"));
        }
        per_seed.push(line);
    }
    let majority = SEEDS as usize / 2 + 1;
    let pass = wins.iter().all(|&w| w >= majority);
    report(
        8,
        "sst >= baselines at a=4 (needle_recall)",
        pass,
        &format!(
            "seeds won vs avg/max/sim {}/{}/{} of {SEEDS} (need {majority} each), sst/avg/max/sim {}",
            wins[0],
            wins[1],
            wins[2],
            per_seed.join(" ")
        ),
    );
    assert!(pass);
}

#[test]
fn c09_extrapolation_report() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let mut run = desk_config("ablation_marker.json");
    assert_eq!(run.schedule.stages.last().unwrap().pool, vec![2, 4, 8]);
    run.eval_ratios = vec![2, 4, 8, 16];
    let model = train::<f32>(&run, &mut |_| Ok(())).unwrap();
    let rows = evaluate(&model, &run, Policy::Sst, run.eval_instances);
    let pass = rows.as_ref().is_ok_and(|r| r.len() == 4);
    let detail = match &rows {
        Ok(r) => r.iter().map(|x| format!("a={} {:.3}", x.ratio, x.exact_match)).collect::<Vec<_>>().join(", "),
        Err(e) => e.to_string(),
    };
    report(9, "a=16 evaluation on a {2,4,8} checkpoint", pass, &format!("marker_count exact-match {detail}"));
    assert!(pass);
}

#[test]
fn c10_determinism() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let mut run = desk_config("ablation_marker.json");
    run.steps = 40;
    run.eval_every = 10;
    run.eval_ratios = vec![2, 8, 16];
    run.eval_instances = 32;
    let dir = tempfile::tempdir().unwrap();
    let outputs = |tag: &str| {
        let mut metrics = String::new();
        let model = train::<f32>(&run, &mut |m| {
            metrics.push_str(&m.to_json());
            metrics.push('\n');
            Ok(())
        })
        .unwrap();
        let mut rows = Vec::new();
        for policy in [Policy::Sst, Policy::Full, Policy::Baseline(BaselineKind::AvgPool)] {
            rows.extend(evaluate(&model, &run, policy, run.eval_instances).unwrap());
        }
        let path = dir.path().join(format!("{tag}.bin"));
        save_checkpoint(&path, &model, &run).unwrap();
        (metrics, eval_csv(&rows), std::fs::read(&path).unwrap())
    };
    let (a, b) = (outputs("a"), outputs("b"));
    let reloaded: Model<f32> = load_checkpoint(&dir.path().join("a.bin")).unwrap().0;
    let again = eval_csv(&evaluate(&reloaded, &run, Policy::Sst, run.eval_instances).unwrap());
    let pass = a == b && a.1.starts_with(&again);
    report(
        10,
        "determinism",
        pass,
        &format!("metrics {} bytes, eval csv {} bytes, checkpoint {} bytes, identical: {}", a.0.len(), a.1.len(), a.2.len(), a == b),
    );
    assert!(pass);
}
