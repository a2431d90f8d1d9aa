use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck::{grad_check, DEFAULT_EPS};
use crate::nn::random_tensor;

fn m(rows: &[&[f64]]) -> Tensor {
    Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

#[test]
fn matmul_examples() {
    let mut g = Graph::new();
    let i2 = g.constant(Tensor::identity(2)).unwrap();
    let a = g.constant(m(&[&[1.0, 2.0], &[3.0, 4.0]])).unwrap();
    let p = g.matmul(i2, a).unwrap();
    assert_eq!(g.value(p), g.value(a));

    let r = g.constant(m(&[&[1.0, 2.0]])).unwrap();
    let c = g.constant(m(&[&[3.0], &[4.0]])).unwrap();
    let p = g.matmul(r, c).unwrap();
    assert_eq!(g.value(p).data(), &[11.0]);

    let e = g.constant(Tensor::zeros(&[0, 3])).unwrap();
    let b = g.constant(Tensor::zeros(&[3, 2])).unwrap();
    let p = g.matmul(e, b).unwrap();
    assert_eq!(g.shape(p), &[0, 2]);

    assert!(matches!(g.matmul(a, b), Err(Error::Dimension(_))));
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::row(&[0.0, 0.0])).unwrap();
    let s = g.softmax(x, 1).unwrap();
    assert_eq!(g.value(s).data(), &[0.5, 0.5]);

    // exp-normalise by hand: e^0 / (e^0 + 3) and 3 / (1 + 3)
    let x = g.constant(Tensor::row(&[0.0, 3f64.ln()])).unwrap();
    let s = g.softmax(x, 1).unwrap();
    assert!((g.value(s).data()[0] - 0.25).abs() < 1e-15);
    assert!((g.value(s).data()[1] - 0.75).abs() < 1e-15);

    let x = g.constant(Tensor::row(&[1.0, 5.0])).unwrap();
    let masked = g.mask_fill(x, vec![false, true]).unwrap();
    let s = g.softmax(masked, 1).unwrap();
    assert_eq!(g.value(s).data(), &[0.0, 1.0]);

    let all = g.mask_fill(x, vec![false, false]).unwrap();
    let s = g.softmax(all, 1).unwrap();
    assert_eq!(g.value(s).data(), &[0.0, 0.0]);
}

#[test]
fn softmax_rejects_nan() {
    let mut g = Graph::new();
    assert!(g.constant(Tensor::row(&[f64::NAN])).is_err());
    // NaN can only enter through a leaf, which already refuses it.
    let x = g.constant(Tensor::row(&[1.0, 2.0])).unwrap();
    assert!(g.softmax(x, 2).is_err());
}

#[test]
fn softmax_along_first_axis() {
    let mut g = Graph::new();
    let x = g.constant(m(&[&[0.0, 1.0], &[0.0, 1.0]])).unwrap();
    let s = g.softmax(x, 0).unwrap();
    assert_eq!(g.value(s).data(), &[0.5, 0.5, 0.5, 0.5]);
}

#[test]
fn sigmoid_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::row(&[0.0, 10.0, -10.0])).unwrap();
    let s = g.sigmoid(x).unwrap();
    let v = g.value(s).data();
    assert_eq!(v[0], 0.5);
    // 1 / (1 + e^-10) = 0.999954602131297...
    assert!((v[1] - 0.999_954_602_131_297_6).abs() < 1e-15);
    assert!((v[2] - 4.539_786_870_243_439e-5).abs() < 1e-18);
    assert!((v[1] + v[2] - 1.0).abs() < 1e-15);
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::new();
    let one = g.constant(Tensor::row(&[1.0, 1.0])).unwrap();
    let zero = g.constant(Tensor::row(&[0.0, 0.0])).unwrap();

    let x = g.constant(Tensor::row(&[4.0, 4.0])).unwrap();
    let y = g.layer_norm(x, one, zero, 1e-5).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 0.0]);

    let x = g.constant(Tensor::row(&[1.0, 3.0])).unwrap();
    let y = g.layer_norm(x, one, zero, 1e-5).unwrap();
    assert!((g.value(y).data()[0] + 1.0).abs() < 1e-4);
    assert!((g.value(y).data()[1] - 1.0).abs() < 1e-4);

    let bias = g.constant(Tensor::row(&[0.5, -2.0])).unwrap();
    let y = g.layer_norm(x, zero, bias, 1e-5).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, -2.0]);
}

#[test]
fn backward_examples() {
    let mut g = Graph::new();
    let x = g.param(m(&[&[1.0, -2.0, 3.0], &[0.5, 0.0, 7.0]])).unwrap();
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[1.0; 6]);

    let mut g = Graph::new();
    let x = g.param(Tensor::row(&[1.0, 2.0])).unwrap();
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);

    let mut g = Graph::new();
    let x = g.param(Tensor::row(&[1.0, 2.0])).unwrap();
    let d = g.constant(Tensor::row(&[3.0, 4.0])).unwrap();
    let p = g.mul(x, d).unwrap();
    let s = g.sum(p).unwrap();
    g.backward(s).unwrap();
    assert!(g.grad(d).is_none());
    assert_eq!(g.grad(x).unwrap().data(), &[3.0, 4.0]);
}

#[test]
fn backward_needs_a_scalar() {
    let mut g = Graph::new();
    let x = g.param(Tensor::row(&[1.0, 2.0])).unwrap();
    assert!(matches!(g.backward(x), Err(Error::Shape(_))));
}

#[test]
fn reused_values_accumulate() {
    // f = sum(x·x + x) → df/dx = 2x + 1
    let mut g = Graph::new();
    let x = g.param(Tensor::row(&[3.0, -1.0])).unwrap();
    let sq = g.mul(x, x).unwrap();
    let y = g.add(sq, x).unwrap();
    let s = g.sum(y).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[7.0, -1.0]);
}

#[test]
fn non_finite_results_are_errors() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::row(&[1e200])).unwrap();
    let y = g.constant(Tensor::row(&[1e200])).unwrap();
    assert!(matches!(g.mul(x, y), Err(Error::Numeric(_))));
    let z = g.mask_fill(x, vec![false]).unwrap();
    assert!(matches!(g.add(z, y), Err(Error::Numeric(_))));
}

/// Scalar test objective: weighted sum of an op's output.
fn weighted(g: &mut Graph, out: Var, w: &Tensor) -> Result<Var> {
    let wv = g.constant(w.clone())?;
    let p = g.mul(out, wv)?;
    g.sum(p)
}

type OpCase = (&'static str, Vec<Vec<usize>>, Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>);

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<OpCase> {
    use rand::Rng;
    let r = rng.gen_range(1..=8);
    let c = rng.gen_range(1..=8);
    let k = rng.gen_range(1..=8);
    let keep: Vec<bool> = (0..r * c).map(|i| i % c != 0 || rng.gen_bool(0.5)).collect();
    let idx: Vec<Option<usize>> = (0..k).map(|i| if i % 3 == 2 { None } else { Some(rng.gen_range(0..r)) }).collect();
    let positive: Vec<bool> = (0..c).map(|i| i == 0 || rng.gen_bool(0.3)).collect();
    let w_rc = random_tensor(rng, &[r, c], 1.0);
    let w_rk = random_tensor(rng, &[r, k], 1.0);
    let cl = rng.gen_range(3..=8);
    let w_rcl = random_tensor(rng, &[r, cl], 1.0);
    let w_cr = random_tensor(rng, &[c, r], 1.0);
    let w_kc = random_tensor(rng, &[k, c], 1.0);
    let w_1c = random_tensor(rng, &[1, c], 1.0);
    let w_2rc = random_tensor(rng, &[2 * r, c], 1.0);
    let w_r2c = random_tensor(rng, &[r, 2 * c], 1.0);
    let split = rng.gen_range(0..=c);
    vec![
        ("matmul", vec![vec![r, c], vec![c, k]], Box::new(move |g, v| { let o = g.matmul(v[0], v[1])?; weighted(g, o, &w_rk) })),
        ("transpose", vec![vec![r, c]], Box::new({ let w = w_cr.clone(); move |g, v| { let o = g.transpose(v[0])?; weighted(g, o, &w) } })),
        ("add", vec![vec![r, c], vec![r, c]], Box::new({ let w = w_rc.clone(); move |g, v| { let o = g.add(v[0], v[1])?; weighted(g, o, &w) } })),
        ("add_row", vec![vec![r, c], vec![1, c]], Box::new({ let w = w_rc.clone(); move |g, v| { let o = g.add_row(v[0], v[1])?; weighted(g, o, &w) } })),
        ("mul", vec![vec![r, c], vec![r, c]], Box::new({ let w = w_rc.clone(); move |g, v| { let o = g.mul(v[0], v[1])?; weighted(g, o, &w) } })),
        ("mul_col", vec![vec![r, c], vec![r, 1]], Box::new({ let w = w_rc.clone(); move |g, v| { let o = g.mul_col(v[0], v[1])?; weighted(g, o, &w) } })),
        ("scale", vec![vec![r, c]], Box::new({ let w = w_rc.clone(); move |g, v| { let o = g.scale(v[0], -1.7)?; weighted(g, o, &w) } })),
        ("sigmoid", vec![vec![r, c]], Box::new({ let w = w_rc.clone(); move |g, v| { let o = g.sigmoid(v[0])?; weighted(g, o, &w) } })),
        ("softplus", vec![vec![r, c]], Box::new({ let w = w_rc.clone(); move |g, v| { let o = g.softplus(v[0])?; weighted(g, o, &w) } })),
        ("gelu", vec![vec![r, c]], Box::new({ let w = w_rc.clone(); move |g, v| { let o = g.gelu(v[0])?; weighted(g, o, &w) } })),
        ("softmax_rows", vec![vec![r, c]], Box::new({ let w = w_rc.clone(); move |g, v| { let o = g.softmax(v[0], 1)?; weighted(g, o, &w) } })),
        ("softmax_cols", vec![vec![r, c]], Box::new({ let w = w_rc.clone(); move |g, v| { let o = g.softmax(v[0], 0)?; weighted(g, o, &w) } })),
        ("masked_softmax", vec![vec![r, c]], Box::new({ let w = w_rc.clone(); move |g, v| { let mf = g.mask_fill(v[0], keep.clone())?; let o = g.softmax(mf, 1)?; weighted(g, o, &w) } })),
        // one or two columns normalise to (nearly) constant outputs
        ("layer_norm", vec![vec![r, cl], vec![1, cl], vec![1, cl]], Box::new({ let w = w_rcl.clone(); move |g, v| { let o = g.layer_norm(v[0], v[1], v[2], 1e-5)?; weighted(g, o, &w) } })),
        ("concat_cols", vec![vec![r, c], vec![r, c]], Box::new(move |g, v| { let o = g.concat_cols(&[v[0], v[1]])?; weighted(g, o, &w_r2c) })),
        ("concat_rows", vec![vec![r, c], vec![r, c]], Box::new(move |g, v| { let o = g.concat_rows(&[v[0], v[1]])?; weighted(g, o, &w_2rc) })),
        ("slice_cols", vec![vec![r, c]], Box::new({ let w = w_rc.clone(); move |g, v| { let o = g.slice_cols(v[0], split, c)?; let ws = Tensor::new(&[r, c - split], (0..r).flat_map(|i| w.row_slice(i)[split..].to_vec()).collect())?; weighted(g, o, &ws) } })),
        ("slice_rows", vec![vec![r, c]], Box::new({ let w = w_rc.clone(); move |g, v| { let o = g.slice_rows(v[0], r / 2, r)?; let ws = Tensor::new(&[r - r / 2, c], w.data()[(r / 2) * c..].to_vec())?; weighted(g, o, &ws) } })),
        ("gather_rows", vec![vec![r, c]], Box::new(move |g, v| { let o = g.gather_rows(v[0], idx.clone())?; weighted(g, o, &w_kc) })),
        ("broadcast_rows", vec![vec![1, c]], Box::new({ let w = w_rc.clone(); move |g, v| { let o = g.broadcast_rows(v[0], r)?; weighted(g, o, &w) } })),
        ("mean_rows", vec![vec![r, c]], Box::new(move |g, v| { let o = g.mean_rows(v[0])?; weighted(g, o, &w_1c) })),
        ("reshape", vec![vec![r, c]], Box::new({ let w = w_rc.clone(); move |g, v| { let o = g.reshape(v[0], &[c, r])?; let o = g.reshape(o, &[r, c])?; weighted(g, o, &w) } })),
        ("soft_ranked_ce", vec![vec![1, c]], Box::new(move |g, v| g.soft_ranked_ce(v[0], &positive))),
    ]
}

#[test]
fn every_op_passes_grad_check_over_ten_seeds() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, shapes, f) in op_cases(&mut rng) {
            let inputs: Vec<Tensor> = shapes.iter().map(|s| random_tensor(&mut rng, s, 1.5)).collect();
            let report = grad_check(|g, v| f(g, v), &inputs, DEFAULT_EPS).unwrap();
            assert!(report.max_rel_error <= 1e-6, "{name} seed {seed}: {report:?}");
        }
    }
}

#[test]
fn identical_runs_are_bitwise_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random_tensor(&mut rng, &[5, 4], 1.0);
        let b = random_tensor(&mut rng, &[4, 3], 1.0);
        let mut g = Graph::new();
        let (av, bv) = (g.param(a).unwrap(), g.param(b).unwrap());
        let p = g.matmul(av, bv).unwrap();
        let s = g.softmax(p, 1).unwrap();
        let l = g.sum(s).unwrap();
        let sq = g.mul(p, p).unwrap();
        let l2 = g.sum(sq).unwrap();
        let t = g.add(l, l2).unwrap();
        g.backward(t).unwrap();
        (g.grad(av).unwrap(), g.grad(bv).unwrap())
    };
    let (a1, b1) = run();
    let (a2, b2) = run();
    assert!(a1.bitwise_eq(&a2) && b1.bitwise_eq(&b2));
}

#[test]
fn matmul_is_associative_on_random_chains() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let ms: Vec<Tensor> = (0..4).map(|_| random_tensor(&mut rng, &[4, 4], 1.0)).collect();
        let mut g = Graph::new();
        let v: Vec<Var> = ms.into_iter().map(|t| g.constant(t).unwrap()).collect();
        let ab = g.matmul(v[0], v[1]).unwrap();
        let abc = g.matmul(ab, v[2]).unwrap();
        let left = g.matmul(abc, v[3]).unwrap();
        let cd = g.matmul(v[2], v[3]).unwrap();
        let bcd = g.matmul(v[1], cd).unwrap();
        let right = g.matmul(v[0], bcd).unwrap();
        assert!(g.value(left).max_abs_diff(g.value(right)) < 1e-10);
    }
}

proptest! {
    #[test]
    fn softmax_sums_to_one_and_ignores_shifts(
        row in proptest::collection::vec(-50.0f64..50.0, 1..12),
        shift in -1e3f64..1e3,
    ) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(&row)).unwrap();
        let s = g.softmax(x, 1).unwrap();
        let total: f64 = g.value(s).data().iter().sum();
        prop_assert!((total - 1.0).abs() <= 1e-12);
        prop_assert!(g.value(s).data().iter().all(|&p| p >= 0.0));
        let shifted: Vec<f64> = row.iter().map(|v| v + shift).collect();
        let y = g.constant(Tensor::row(&shifted)).unwrap();
        let t = g.softmax(y, 1).unwrap();
        prop_assert!(g.value(s).max_abs_diff(g.value(t)) <= 1e-12);
    }

    #[test]
    fn sigmoid_is_in_open_unit_interval_and_monotone(a in -30.0f64..30.0, d in 0.0f64..5.0) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(&[a, a + d])).unwrap();
        let s = g.sigmoid(x).unwrap();
        let v = g.value(s).data();
        prop_assert!(v[0] > 0.0 && v[0] < 1.0);
        prop_assert!(v[1] >= v[0]);
    }
}
