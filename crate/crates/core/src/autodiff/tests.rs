use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{check, primitive_cases, DEFAULT_STEP, DEFAULT_TOLERANCE};
use super::*;
use crate::error::Error;

fn mat(rows: usize, cols: usize, data: &[f64]) -> Tensor {
    Tensor::matrix(rows, cols, data.to_vec()).unwrap()
}

fn random(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let len = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..len).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn triple_loop(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k) = a.dims2();
    let (_, n) = b.dims2();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.data()[i * k + p] * b.data()[p * n + j];
            }
        }
    }
    out
}

#[test]
fn matmul_identity_and_dot() {
    let mut g = Graph::new();
    let eye = g.leaf(mat(2, 2, &[1.0, 0.0, 0.0, 1.0]));
    let b = g.leaf(mat(2, 2, &[5.0, 6.0, 7.0, 8.0]));
    let y = g.matmul(eye, b).unwrap();
    assert_eq!(g.value(y).data(), &[5.0, 6.0, 7.0, 8.0]);

    let row = g.leaf(mat(1, 2, &[1.0, 2.0]));
    let col = g.leaf(mat(2, 1, &[3.0, 4.0]));
    let d = g.matmul(row, col).unwrap();
    assert_eq!(g.shape(d), &[1, 1]);
    assert_eq!(g.value(d).data(), &[11.0]);
}

#[test]
fn matmul_matches_triple_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let a = random(&mut rng, &[3, 4]);
        let b = random(&mut rng, &[4, 2]);
        let expected = triple_loop(&a, &b);
        let mut g = Graph::new();
        let (na, nb) = (g.leaf(a), g.leaf(b));
        let y = g.matmul(na, nb).unwrap();
        for (got, want) in g.value(y).data().iter().zip(&expected) {
            assert!((got - want).abs() <= 1e-12);
        }
    }
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.leaf(Tensor::zeros(&[2, 3]));
    let b = g.leaf(Tensor::zeros(&[2, 3]));
    match g.matmul(a, b).unwrap_err() {
        Error::Shape { left, right, .. } => {
            assert_eq!(left, vec![2, 3]);
            assert_eq!(right, vec![2, 3]);
        }
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn elementwise_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&mut rng, &[3, 5]);
    let mut g = Graph::new();
    let nx = g.leaf(x.clone());
    let zeros = g.leaf(Tensor::zeros(&[3, 5]));
    let ones = g.leaf(Tensor::ones(&[3, 5]));
    let a = g.add(nx, zeros).unwrap();
    let m = g.mul(nx, ones).unwrap();
    let s = g.sub(nx, nx).unwrap();
    assert_eq!(g.value(a), &x);
    assert_eq!(g.value(m), &x);
    assert!(g.value(s).data().iter().all(|&v| v == 0.0));

    let bad = g.leaf(Tensor::zeros(&[5, 3]));
    assert!(matches!(g.add(nx, bad), Err(Error::Shape { .. })));
}

#[test]
fn activation_reference_points() {
    let mut g = Graph::new();
    let z = g.leaf(Tensor::scalar(0.0));
    let s = g.sigmoid(z);
    let t = g.tanh(z);
    assert_eq!(g.value(s).data(), &[0.5]);
    assert_eq!(g.value(t).data(), &[0.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&mut rng, &[50]).map(|v| 20.0 * v);
    let nx = g.leaf(x.clone());
    let neg = g.leaf(x.map(|v| -v));
    let a = g.sigmoid(nx);
    let b = g.sigmoid(neg);
    for (p, q) in g.value(a).data().iter().zip(g.value(b).data()) {
        assert!((p + q - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn l2_normalize_examples() {
    let mut g = Graph::new();
    let unit = g.leaf(Tensor::vector(vec![0.6, 0.8]));
    let y = g.l2_normalize(unit).unwrap();
    assert_eq!(g.value(y).data(), &[0.6, 0.8]);

    let v = g.leaf(Tensor::vector(vec![3.0, 4.0]));
    let y = g.l2_normalize(v).unwrap();
    for (got, want) in g.value(y).data().iter().zip([0.6, 0.8]) {
        assert!((got - want).abs() < 1e-15);
    }

    let zero = g.leaf(Tensor::vector(vec![0.0, 0.0]));
    assert!(matches!(
        g.l2_normalize(zero),
        Err(Error::DegenerateVector { .. })
    ));
    let tiny = g.leaf(Tensor::vector(vec![1e-9, 0.0]));
    assert!(matches!(
        g.l2_normalize(tiny),
        Err(Error::DegenerateVector { .. })
    ));
    // the squared norm overflows
    let huge = g.leaf(Tensor::vector(vec![1e200, 1e200]));
    assert!(
        matches!(g.l2_normalize(huge), Err(Error::DegenerateVector { norm }) if norm.is_infinite())
    );
}

#[test]
fn backward_of_sum_and_dot() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::vector(vec![1.0, -2.0, 3.5]));
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);

    let mut g = Graph::new();
    let x = g.leaf(Tensor::vector(vec![1.0, -2.0, 3.5]));
    let xx = g.mul(x, x).unwrap();
    let d = g.sum(xx);
    g.backward(d).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[2.0, -4.0, 7.0]);
}

#[test]
fn backward_rejects_non_scalar_root() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(g.backward(x), Err(Error::Contract(_))));
}

#[test]
fn backward_twice_gives_identical_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let w = store.add("w", random(&mut rng, &[4, 3]));
    let mut g = Graph::new();
    let nw = g.param(&store, w);
    let x = g.leaf(random(&mut rng, &[2, 3]));
    let y = g.matmul_nt(x, nw).unwrap();
    let t = g.tanh(y);
    let root = g.sum(t);
    g.backward(root).unwrap();
    let first = g.grad(nw).unwrap().clone();
    g.backward(root).unwrap();
    assert_eq!(g.grad(nw).unwrap(), &first);
}

#[test]
fn graph_records_parents_before_children() {
    let mut g = Graph::new();
    let a = g.leaf(Tensor::scalar(1.0));
    let b = g.leaf(Tensor::scalar(2.0));
    let c = g.add(a, b).unwrap();
    let d = g.mul(c, a).unwrap();
    assert_eq!(g.parents(d), vec![c, a]);
    assert_eq!(g.op_tag(d), "mul");
    for node in [c, d] {
        assert!(g.parents(node).iter().all(|p| p.index() < node.index()));
    }
}

#[test]
fn param_nodes_are_shared_within_a_graph() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::vector(vec![1.0, 2.0]));
    let mut g = Graph::new();
    let a = g.param(&store, w);
    let b = g.param(&store, w);
    assert_eq!(a, b);
    assert_eq!(g.param_id(a), Some(w));
    let prod = g.mul(a, b).unwrap();
    assert_eq!(g.param_id(prod), None);
    let root = g.sum(prod);
    g.backward(root).unwrap();
    store.accumulate_grads(&g);
    assert_eq!(store.get(w).grad.data(), &[2.0, 4.0]);
}

#[test]
fn every_primitive_passes_finite_differences_on_20_seeds() {
    for (name, shapes, build) in primitive_cases() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let ids: Vec<ParamId> = shapes
                .iter()
                .enumerate()
                .map(|(i, s)| store.add(format!("{name}.{i}"), random(&mut rng, s)))
                .collect();
            let report = check(
                &mut store,
                FaultInjection::default(),
                DEFAULT_STEP,
                |g, s| build(g, s, &ids),
            )
            .unwrap();
            assert!(
                report.worst() <= DEFAULT_TOLERANCE,
                "{name} seed {seed}: worst relative error {}",
                report.worst()
            );
        }
    }
}

#[test]
fn corrupted_tanh_backward_is_detected() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::new();
    let id = store.add("x", random(&mut rng, &[2, 5]));
    let faults = FaultInjection {
        tanh_backward: true,
    };
    let report = check(&mut store, faults, DEFAULT_STEP, |g, s| {
        let a = g.param(s, id);
        let y = g.tanh(a);
        Ok(g.sum(y))
    })
    .unwrap();
    assert!(report.worst() > DEFAULT_TOLERANCE);
}

proptest! {
    #[test]
    fn l2_normalize_output_has_unit_norm(
        values in prop::collection::vec(-1e3f64..1e3, 1..16)
    ) {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assume!(norm > 1e-6);
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(values));
        let y = g.l2_normalize(x).unwrap();
        let out = g.value(y).data().iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!((out - 1.0).abs() <= 1e-10);
    }

    #[test]
    fn forward_outputs_stay_finite(
        values in prop::collection::vec(-50f64..50.0, 6)
    ) {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::matrix(2, 3, values).unwrap());
        let s = g.sigmoid(x);
        let t = g.tanh(x);
        let ce = g.cross_entropy(x, &[(0, 2), (1, 0)]).unwrap();
        prop_assert!(g.value(s).all_finite());
        prop_assert!(g.value(t).all_finite());
        prop_assert!(g.value(ce).all_finite());
    }
}
