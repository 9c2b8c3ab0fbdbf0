use lacovl_core::tensor::gradcheck::grad_check;
use lacovl_core::tensor::params::ParamStore;
use lacovl_core::{Error, Graph, Tensor, Var};
use proptest::prelude::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn matmul_examples() {
    let mut g = Graph::new();
    let a = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let b = g.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);

    let a = g.constant(t(&[1, 2], &[1.0, 2.0]));
    let b = g.constant(t(&[2, 1], &[3.0, 4.0]));
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[1.0 * 3.0 + 2.0 * 4.0]);

    let a = g.constant(Tensor::zeros(&[2, 3, 4]));
    let b = g.constant(Tensor::zeros(&[2, 4, 5]));
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.shape(c), &[2, 3, 5]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[4, 5]));
    let err = g.matmul(a, b).unwrap_err();
    assert!(matches!(err, Error::ShapeMismatch { .. }));
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
}

#[test]
fn batched_matmul_matches_loop_oracle() {
    let a = Tensor::from_fn(&[3, 2, 4], |i| (i as f64 * 0.37).sin());
    let b = Tensor::from_fn(&[4, 5], |i| (i as f64 * 0.11).cos());
    let mut g = Graph::new();
    let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
    let c = g.matmul(av, bv).unwrap();
    for bi in 0..3 {
        for i in 0..2 {
            for j in 0..5 {
                let want: f64 = (0..4).map(|k| a.get(&[bi, i, k]) * b.get(&[k, j])).sum();
                assert!((g.value(c).get(&[bi, i, j]) - want).abs() < 1e-14);
            }
        }
    }
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[2], &[0.0, 0.0]));
    let y = g.softmax(x, -1).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);

    let x = g.constant(t(&[2], &[1f64.ln(), 3f64.ln()]));
    let y = g.softmax(x, 0).unwrap();
    assert!(close(g.value(y).data(), &[0.25, 0.75], 1e-15));

    let x = g.constant(t(&[2], &[1000.0, 0.0]));
    let y = g.softmax(x, 0).unwrap();
    let d = g.value(y).data();
    assert!(d.iter().all(|v| v.is_finite()));
    assert!((d[0] - 1.0).abs() < 1e-15 && d[1] < 1e-300);
}

#[test]
fn softmax_invalid_axis() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(g.softmax(x, 2), Err(Error::InvalidAxis { .. })));
    assert!(matches!(g.softmax(x, -3), Err(Error::InvalidAxis { .. })));
}

#[test]
fn activation_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[2], &[-2.0, 3.0]));
    let y = g.relu_squared(x);
    assert_eq!(g.value(y).data(), &[0.0, 9.0]);
    let z = g.constant(Tensor::scalar(0.0));
    let th = g.tanh(z);
    let sg = g.sigmoid(z);
    assert_eq!(g.value(th).item(), 0.0);
    assert_eq!(g.value(sg).item(), 0.5);
    let r = g.relu(x);
    assert_eq!(g.value(r).data(), &[0.0, 3.0]);
    let ge = g.gelu(z);
    assert_eq!(g.value(ge).item(), 0.0);
}

#[test]
fn normalisation_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[2], &[3.0, 4.0]));
    let y = g.l2_normalize(x).unwrap();
    assert!(close(g.value(y).data(), &[0.6, 0.8], 1e-15));

    let x = g.constant(Tensor::full(&[1, 4], 2.5));
    let gamma = g.constant(Tensor::ones(&[4]));
    let beta = g.constant(Tensor::zeros(&[4]));
    let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
    assert_eq!(g.value(y).data(), &[0.0; 4]);

    let x = g.constant(Tensor::from_fn(&[3, 4], |i| i as f64 * 0.3 - 1.0));
    let mean = [0.1, -0.2, 0.3, 0.0];
    let var = [1.0, 0.5, 2.0, 0.1];
    let y1 = g.batch_norm_eval(x, gamma, beta, &mean, &var, 1e-5).unwrap();
    let y2 = g.batch_norm_eval(x, gamma, beta, &mean, &var, 1e-5).unwrap();
    let bits = |v: Var, g: &Graph| g.value(v).data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(y1, &g), bits(y2, &g));

    let z = g.constant(Tensor::full(&[2], 1e-13));
    assert!(matches!(g.l2_normalize(z), Err(Error::DegenerateNorm { .. })));
}

#[test]
fn batch_norm_train_normalises_columns() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_fn(&[2, 3, 2], |i| (i as f64).powi(2)));
    let gamma = g.constant(Tensor::ones(&[2]));
    let beta = g.constant(Tensor::zeros(&[2]));
    let (y, stats) = g.batch_norm_train(x, gamma, beta, 1e-5).unwrap();
    assert_eq!(stats.count, 6);
    let d = g.value(y).data();
    for c in 0..2 {
        let col: Vec<f64> = (0..6).map(|r| d[r * 2 + c]).collect();
        let mean = col.iter().sum::<f64>() / 6.0;
        assert!(mean.abs() < 1e-12);
    }
}

#[test]
fn backward_examples() {
    let mut g = Graph::new();
    let x = g.leaf(t(&[3], &[0.5, -1.0, 2.0]), true);
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);

    let mut g = Graph::new();
    let x = g.leaf(t(&[2], &[1.0, 2.0]), true);
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);

    // accumulation across calls
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[4.0, 8.0]);
    g.zero_grad();
    assert!(g.grad(x).is_none());

    assert!(matches!(g.backward(sq), Err(Error::NotScalar(_))));
}

#[test]
fn non_grad_leaves_stay_empty_and_frozen_params_get_no_buffer() {
    let mut g = Graph::new();
    let x = g.leaf(t(&[2], &[1.0, 2.0]), false);
    let w = g.leaf(t(&[2], &[3.0, 4.0]), true);
    let p = g.mul(x, w).unwrap();
    let s = g.sum(p);
    g.backward(s).unwrap();
    assert!(g.grad(x).is_none());
    assert_eq!(g.grad(w).unwrap().data(), &[1.0, 2.0]);

    let mut store = ParamStore::new();
    let id = store.add("frozen", Tensor::ones(&[2]), true).unwrap();
    store.accumulate_grad(id, &[1.0, 1.0]);
    assert!(store.get(id).grad.is_none());
}

#[test]
fn grad_check_examples() {
    let x = Tensor::from_fn(&[6], |i| i as f64 * 0.7 - 2.1);
    let rep = grad_check(
        |g, x| {
            let s = g.square(x);
            Ok(g.sum(s))
        },
        &x,
        1e-5,
        1e-5,
    )
    .unwrap();
    assert!(rep.passed(), "{rep:?}");

    let x = t(&[4], &[0.3, -0.4, 1.2, -2.0]);
    let relu_sum = |g: &mut Graph, x: Var| {
        let r = g.relu(x);
        Ok(g.sum(r))
    };
    let rep = grad_check(relu_sum, &x, 1e-5, 1e-5).unwrap();
    assert!(rep.passed() && rep.skipped.is_empty());

    let x = t(&[3], &[0.3, 0.0, -1.0]);
    let rep = grad_check(relu_sum, &x, 1e-5, 1e-5).unwrap();
    assert_eq!(rep.skipped, vec![1]);
    assert!(rep.passed());
}

/// A composition exercising every differentiable op on one input.
fn kitchen_sink(g: &mut Graph, x: Var) -> lacovl_core::Result<Var> {
    // x: (2, 3, 4)
    let w = g.constant(Tensor::from_fn(&[4, 4], |i| ((i * 7 % 11) as f64 - 5.0) * 0.13));
    let h = g.matmul(x, w)?;
    let gamma = g.constant(Tensor::from_fn(&[4], |i| 1.0 + 0.1 * i as f64));
    let beta = g.constant(Tensor::from_fn(&[4], |i| 0.05 * i as f64));
    let h = g.layer_norm(h, gamma, beta, 1e-5)?;
    let (h, _) = g.batch_norm_train(h, gamma, beta, 1e-5)?;
    let a = g.gelu(h);
    let b = g.tanh(a);
    let c = g.sigmoid(x);
    let d = g.mul(b, c)?;
    let e = g.relu_squared(d);
    let sm = g.softmax(d, 1)?;
    let ls = g.log_softmax(d, -1)?;
    let f = g.add(e, sm)?;
    let f = g.sub(f, ls)?;
    let tr = g.transpose(f)?; // (2, 4, 3)
    let sl = g.slice(tr, 1, 1, 2)?; // (2, 2, 3)
    let cat = g.concat(&[sl, sl], 1)?; // (2, 4, 3)
    let mx = g.max_axis(cat, 2, true)?;
    let mn = g.min_axis(cat, 2, true)?;
    let span = g.sub(mx, mn)?;
    let shifted = g.add(cat, span)?;
    let l2 = g.l2_normalize(shifted)?;
    let dist = g.pairwise_distance(l2, l2)?; // (2, 4, 4)
    let q = g.offset(dist, 1.0);
    let denom = g_sum_keep(g, q)?;
    let q = g.div(cat, denom)?;
    let r = g.reshape(q, &[8, 3])?;
    let ce = g.cross_entropy(r, &[0, 1, 2, 0, 1, 2, 0, 1])?;
    let m = g.mean_axis(r, 0, false)?;
    let m = g.exp(m);
    let m = g.sum(m);
    let m = g.scale(m, 0.1);
    g.add(ce, m)
}

fn g_sum_keep(g: &mut Graph, x: Var) -> lacovl_core::Result<Var> {
    let s = g.sum_axis(x, -1, true)?; // (2, 4, 1)
    let s = g.sqrt(s);
    g.broadcast_to(s, &[2, 4, 3])
}

#[test]
fn composition_of_all_ops_passes_grad_check() {
    let x = Tensor::from_fn(&[2, 3, 4], |i| ((i as f64) * 1.37).sin() * 1.5);
    let rep = grad_check(kitchen_sink, &x, 1e-5, 1e-4).unwrap();
    assert!(rep.passed(), "max rel err {}", rep.max_rel_error);
    assert!(rep.checked.len() >= 20);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_slices_are_positive_distributions(
        rows in 1usize..5, cols in 1usize..7, axis in 0isize..2,
        data in proptest::collection::vec(-30.0f64..30.0, 36),
    ) {
        let x = Tensor::new(&[rows, cols], data[..rows * cols].to_vec()).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x);
        let y = g.softmax(xv, axis).unwrap();
        let s = g.sum_axis(y, axis, false).unwrap();
        prop_assert!(g.value(y).data().iter().all(|&v| v > 0.0));
        prop_assert!(g.value(s).data().iter().all(|v| (v - 1.0).abs() <= 1e-9));
    }

    #[test]
    fn backward_is_linear(
        data in proptest::collection::vec(-2.0f64..2.0, 6),
        a in -3.0f64..3.0, b in -3.0f64..3.0,
    ) {
        let x = Tensor::new(&[2, 3], data).unwrap();
        let f = |g: &mut Graph, x: Var| { let s = g.tanh(x); g.sum(s) };
        let h = |g: &mut Graph, x: Var| { let s = g.softmax(x, -1).unwrap(); let q = g.square(s); g.sum(q) };

        let grad_of = |build: &dyn Fn(&mut Graph, Var) -> Var| {
            let mut g = Graph::new();
            let xv = g.leaf(x.clone(), true);
            let y = build(&mut g, xv);
            g.backward(y).unwrap();
            g.grad(xv).unwrap()
        };
        let gf = grad_of(&f);
        let gh = grad_of(&h);
        let combo = grad_of(&|g: &mut Graph, xv: Var| {
            let fa = f(g, xv);
            let hb = h(g, xv);
            let fa = g.scale(fa, a);
            let hb = g.scale(hb, b);
            g.add(fa, hb).unwrap()
        });
        for i in 0..6 {
            let want = a * gf.data()[i] + b * gh.data()[i];
            prop_assert!((combo.data()[i] - want).abs() <= 1e-9);
        }
    }

    #[test]
    fn random_compositions_pass_grad_check(seed in 0u64..1000) {
        let mut rng = lacovl_core::rng::Rng::new(seed);
        let x = Tensor::from_fn(&[2, 3, 4], |_| rng.uniform(-2.0, 2.0));
        let rep = grad_check(kitchen_sink, &x, 1e-5, 1e-4).unwrap();
        prop_assert!(rep.passed(), "max rel err {}", rep.max_rel_error);
    }
}
