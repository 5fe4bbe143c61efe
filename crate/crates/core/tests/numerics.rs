use proptest::prelude::*;
use sstkv::numerics::checkpoint;
use sstkv::numerics::{Adam, AdamConfig, ParamStore};
use sstkv::{Rng, Tape, Tensor, Var};

fn random_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = Rng::new(5);
    let a = random_tensor(&mut rng, &[5, 7]);
    let b = random_tensor(&mut rng, &[7, 3]);
    let c = a.matmul(&b).unwrap();
    for i in 0..5 {
        for j in 0..3 {
            let mut want = 0.0;
            for k in 0..7 {
                want += a.data()[i * 7 + k] * b.data()[k * 3 + j];
            }
            let got = c.data()[i * 3 + j];
            assert!((got - want).abs() <= 1e-6 * want.abs().max(1e-12), "({i},{j}): {got} vs {want}");
        }
    }
}

/// Central-difference gradient of `f` at `x`, one coordinate at a time. The
/// small step keeps curvature error low where a one-column RMS norm saturates.
fn numeric_grad(x: &Tensor<f64>, f: &dyn Fn(&Tensor<f64>) -> f64) -> Vec<f64> {
    let h = 1e-5;
    (0..x.numel())
        .map(|i| {
            let mut up = x.clone();
            let mut down = x.clone();
            up.data_mut()[i] += h;
            down.data_mut()[i] -= h;
            (f(&up) - f(&down)) / (2.0 * h)
        })
        .collect()
}

fn assert_close(analytic: &[f64], numeric: &[f64]) {
    for (a, n) in analytic.iter().zip(numeric) {
        let scale = a.abs().max(n.abs()).max(1e-6);
        assert!((a - n).abs() / scale <= 1e-3, "analytic {a} vs numeric {n}");
    }
}

type Leaves3<'t> = (Var<'t, f64>, Var<'t, f64>, Var<'t, f64>, Var<'t, f64>);

fn composite_loss<'t>(a: &Tensor<f64>, b: &Tensor<f64>, g: &Tensor<f64>, targets: &[usize], tape: &'t Tape<f64>) -> Leaves3<'t> {
    let (a, b, g) = (tape.leaf(a.clone()), tape.leaf(b.clone()), tape.leaf(g.clone()));
    let h = a.matmul(b).unwrap().rms_norm(g).unwrap().silu();
    let sq = h.mul(h).unwrap().sum();
    let ce = h.scale(0.5).cross_entropy(targets).unwrap();
    (sq.add(ce).unwrap(), a, b, g)
}

fn row_ops_loss<'t>(x: &Tensor<f64>, tape: &'t Tape<f64>) -> (Var<'t, f64>, Var<'t, f64>) {
    let x = tape.leaf(x.clone());
    let r = x.rope(&[0, 3, 7, 9], 2, 100.0).unwrap();
    let top = r.slice_rows(0, 2).unwrap();
    let picked = r.select_rows(&[3, 1]).unwrap();
    let both = tape.concat(&[top, picked], 1).unwrap();
    let merged = both.segment_max(&[(0, 1), (1, 2)]).unwrap();
    let t = both.transpose().unwrap();
    let mixed = t.softmax(1).unwrap().scale(3.0).mul(t).unwrap().sum();
    (merged.mul(merged).unwrap().sum().add(mixed).unwrap(), x)
}

fn attention_loss<'t>(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, tape: &'t Tape<f64>) -> Leaves3<'t> {
    let (q, k, v) = (tape.leaf(q.clone()), tape.leaf(k.clone()), tape.leaf(v.clone()));
    let o = tape.attention(q, k, v, &[3, 4, 5], 2).unwrap();
    (o.mul(o).unwrap().sum(), q, k, v)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn softmax_rows_sum_to_one(values in proptest::collection::vec(-1e3f64..1e3, 1..40), cols in 1usize..8) {
        let rows = values.len() / cols;
        prop_assume!(rows > 0);
        let t = Tensor::new(vec![rows, cols], values[..rows * cols].to_vec()).unwrap();
        let s = t.softmax(1).unwrap();
        for r in 0..rows {
            let sum: f64 = s.row(r).iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-6);
            prop_assert!(s.row(r).iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn composite_gradients_match_finite_differences(seed in 0u64..1000, m in 1usize..5, k in 1usize..5, n in 1usize..5) {
        let mut rng = Rng::new(seed);
        let a0 = random_tensor(&mut rng, &[m, k]);
        let b0 = random_tensor(&mut rng, &[k, n]);
        let g0 = random_tensor(&mut rng, &[n]);
        let targets: Vec<usize> = (0..m).map(|_| rng.below(0, n)).collect();
        let tape = Tape::new();
        let (l, a, b, g) = composite_loss(&a0, &b0, &g0, &targets, &tape);
        tape.backward(l).unwrap();
        let value = |a: &Tensor<f64>, b: &Tensor<f64>, g: &Tensor<f64>| {
            let t = Tape::new();
            let v = composite_loss(a, b, g, &targets, &t).0.value().item().unwrap();
            v
        };
        assert_close(a.grad().unwrap().data(), &numeric_grad(&a0, &|x| value(x, &b0, &g0)));
        assert_close(b.grad().unwrap().data(), &numeric_grad(&b0, &|x| value(&a0, x, &g0)));
        assert_close(g.grad().unwrap().data(), &numeric_grad(&g0, &|x| value(&a0, &b0, x)));
    }
}

#[test]
fn rope_concat_and_row_ops_gradients() {
    let mut rng = Rng::new(3);
    let x0 = random_tensor(&mut rng, &[4, 4]);
    let f = row_ops_loss;
    let tape = Tape::new();
    let (l, x) = f(&x0, &tape);
    tape.backward(l).unwrap();
    let numeric = numeric_grad(&x0, &|x| f(x, &Tape::new()).0.value().item().unwrap());
    assert_close(x.grad().unwrap().data(), &numeric);
}

#[test]
fn attention_gradients_match_finite_differences() {
    let mut rng = Rng::new(11);
    let q0 = random_tensor(&mut rng, &[3, 4]);
    let k0 = random_tensor(&mut rng, &[5, 4]);
    let v0 = random_tensor(&mut rng, &[5, 4]);
    let f = attention_loss;
    let tape = Tape::new();
    let (l, q, k, v) = f(&q0, &k0, &v0, &tape);
    tape.backward(l).unwrap();
    let val = |q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>| f(q, k, v, &Tape::new()).0.value().item().unwrap();
    assert_close(q.grad().unwrap().data(), &numeric_grad(&q0, &|x| val(x, &k0, &v0)));
    assert_close(k.grad().unwrap().data(), &numeric_grad(&k0, &|x| val(&q0, x, &v0)));
    assert_close(v.grad().unwrap().data(), &numeric_grad(&v0, &|x| val(&q0, &k0, x)));
}

fn adam_run(seed: u64, steps: usize) -> ParamStore<f32> {
    let mut rng = Rng::new(seed);
    let mut params = ParamStore::new();
    params.insert("w", random_tensor(&mut rng, &[3, 2]).cast::<f32>()).unwrap();
    let x = random_tensor(&mut rng, &[4, 3]).cast::<f32>();
    let mut adam = Adam::new(AdamConfig::default(), &params);
    for _ in 0..steps {
        let tape = Tape::new();
        let w = tape.leaf(params.get("w").unwrap().clone());
        let y = tape.constant(x.clone()).matmul(w).unwrap();
        let loss = y.mul(y).unwrap().sum();
        tape.backward(loss).unwrap();
        adam.step(&mut params, &[w.grad().unwrap()]).unwrap();
    }
    params
}

#[test]
fn optimizer_steps_are_bit_reproducible() {
    let a = adam_run(42, 25);
    let b = adam_run(42, 25);
    let bits = |p: &ParamStore<f32>| p.get("w").unwrap().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    assert_ne!(bits(&a), bits(&adam_run(43, 25)));
}

#[test]
fn checkpoint_file_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.bin");
    let params = adam_run(1, 3);
    let mut meta = std::collections::BTreeMap::new();
    meta.insert("note".to_string(), "x".to_string());
    checkpoint::save(&path, &params, &meta).unwrap();
    let (back, back_meta) = checkpoint::load::<f32>(&path).unwrap();
    assert_eq!(back_meta, meta);
    let a: Vec<u32> = params.get("w").unwrap().data().iter().map(|v| v.to_bits()).collect();
    let b: Vec<u32> = back.get("w").unwrap().data().iter().map(|v| v.to_bits()).collect();
    assert_eq!(a, b);
}

#[test]
fn same_seed_same_draws() {
    let mut a = Rng::new(9);
    let mut b = Rng::new(9);
    let xs: Vec<u64> = (0..100).map(|_| a.next_u64()).collect();
    let ys: Vec<u64> = (0..100).map(|_| b.next_u64()).collect();
    assert_eq!(xs, ys);
    let mut c = Rng::new(9).split(1);
    assert_ne!(xs[0], c.next_u64());
}
