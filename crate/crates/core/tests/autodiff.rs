use hap_core::autodiff::{grad_check, Array, Primitive, Tape};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-5;
const STEP: f64 = 1e-4;

fn random(shape: &[usize], seed: u64) -> Array {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Array::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

fn check(prim: Primitive, point: Vec<Array>) {
    let err = grad_check(&prim, &point, STEP).unwrap();
    assert!(err <= TOL, "{prim:?}: relative error {err:e}");
}

#[test]
fn matmul_flat_and_batched() {
    check(Primitive::MatMul, vec![random(&[2, 3, 4], 1), random(&[4, 5], 2)]);
    check(Primitive::MatMul, vec![random(&[3, 2, 4], 3), random(&[3, 4, 2], 4)]);
}

#[test]
fn elementwise_binary() {
    for prim in [Primitive::Add, Primitive::Sub, Primitive::Mul] {
        check(prim.clone(), vec![random(&[3, 4], 5), random(&[3, 4], 6)]);
        check(prim, vec![random(&[3, 4], 7), Array::scalar(0.7)]);
    }
}

#[test]
fn normalizers() {
    check(Primitive::Softmax, vec![random(&[2, 5], 8)]);
    check(Primitive::LogSoftmax, vec![random(&[2, 5], 9)]);
    check(Primitive::LayerNorm { eps: 1e-5 }, vec![random(&[8], 10)]);
    check(Primitive::LayerNorm { eps: 1e-5 }, vec![random(&[3, 8], 11)]);
}

#[test]
fn pointwise() {
    check(Primitive::Gelu, vec![random(&[10], 12)]);
    check(Primitive::Sigmoid, vec![Array::from_vec(vec![0.3])]);
    check(Primitive::Sigmoid, vec![random(&[6], 13)]);
    check(Primitive::Exp, vec![random(&[6], 14)]);
    let positive = random(&[6], 15).map(|v| v.abs() + 0.5);
    check(Primitive::Log, vec![positive]);
    check(
        Primitive::Clip { lo: -1.0, hi: 1.0 },
        vec![Array::from_vec(vec![0.2, -0.4, 0.9])],
    );
    check(
        Primitive::Affine {
            scale: -1.7,
            shift: 0.4,
        },
        vec![random(&[4], 16)],
    );
}

#[test]
fn structural() {
    check(
        Primitive::Embedding {
            ids: vec![2, 0, 2, 1],
            batch_shape: vec![2, 2],
        },
        vec![random(&[3, 4], 17)],
    );
    check(Primitive::Transpose, vec![random(&[2, 3, 4], 18)]);
    check(Primitive::Reshape { shape: vec![4, 3] }, vec![random(&[2, 6], 19)]);
    check(Primitive::Sum, vec![random(&[2, 3], 20)]);
    check(Primitive::Select { axis: 1, index: 2 }, vec![random(&[2, 4, 3], 21)]);
    check(
        Primitive::TakeAlongLast { indices: vec![1, 0, 3] },
        vec![random(&[3, 4], 22)],
    );
    check(Primitive::Broadcast { shape: vec![2, 3, 4] }, vec![random(&[4], 23)]);
    check(Primitive::Broadcast { shape: vec![2, 3] }, vec![Array::scalar(0.3)]);
    check(
        Primitive::Gather {
            indices: vec![3, 0, 3, 2],
        },
        vec![random(&[5], 24)],
    );
    check(
        Primitive::WeightedSum,
        vec![
            random(&[3], 25),
            random(&[2, 2], 26),
            random(&[2, 2], 27),
            random(&[2, 2], 28),
        ],
    );
}

#[test]
fn identity_matmul() {
    let mut t = Tape::new();
    let a = random(&[3, 3], 30);
    let x = t.constant(a.clone()).unwrap();
    let i = t.constant(Array::eye(3)).unwrap();
    let y = t.matmul(x, i).unwrap();
    assert_eq!(t.value(y), &a);
}

#[test]
fn softmax_of_equal_inputs() {
    let mut t = Tape::new();
    let x = t.constant(Array::from_vec(vec![1.0; 3])).unwrap();
    let y = t.softmax(x).unwrap();
    assert_eq!(t.value(y).data(), &[1.0 / 3.0; 3]);
}

#[test]
fn gelu_at_zero() {
    let mut t = Tape::new();
    let x = t.constant(Array::from_vec(vec![0.0])).unwrap();
    let y = t.gelu(x).unwrap();
    assert_eq!(t.value(y).data(), &[0.0]);
}

#[test]
fn square_sum_adjoint() {
    let mut t = Tape::new();
    let x = t.param(Array::from_vec(vec![1.0, 2.0])).unwrap();
    let sq = t.mul(x, x).unwrap();
    let l = t.sum(sq).unwrap();
    let g = t.backward(l).unwrap();
    assert_eq!(g.wrt(x).data(), &[2.0, 4.0]);
}

#[test]
fn disconnected_node_has_zero_adjoint() {
    let mut t = Tape::new();
    let x = t.param(Array::from_vec(vec![1.0, 2.0])).unwrap();
    let y = t.param(Array::from_vec(vec![3.0])).unwrap();
    let l = t.sum(x).unwrap();
    let g = t.backward(l).unwrap();
    assert_eq!(g.wrt(y).data(), &[0.0]);
}

#[test]
fn non_scalar_loss_rejected() {
    let mut t = Tape::new();
    let x = t.param(Array::from_vec(vec![1.0, 2.0])).unwrap();
    assert!(t.backward(x).is_err());
}

#[test]
fn non_finite_values_rejected() {
    let mut t = Tape::new();
    assert!(t.param(Array::from_vec(vec![f64::NAN])).is_err());
    let x = t.param(Array::from_vec(vec![0.0])).unwrap();
    assert!(t.log(x).is_err());
}

#[test]
fn shape_mismatch_rejected() {
    let mut t = Tape::new();
    let a = t.param(random(&[2, 3], 1)).unwrap();
    let b = t.param(random(&[3, 2], 2)).unwrap();
    assert!(t.add(a, b).is_err());
    assert!(t.matmul(a, a).is_err());
}

#[test]
fn equivalent_graphs_agree() {
    // 2x + x*x two ways
    let v = random(&[5], 40);
    let grads = |twice_by_add: bool| {
        let mut t = Tape::new();
        let x = t.param(v.clone()).unwrap();
        let lin = if twice_by_add {
            t.add(x, x).unwrap()
        } else {
            t.affine(x, 2.0, 0.0).unwrap()
        };
        let sq = t.mul(x, x).unwrap();
        let s = t.add(lin, sq).unwrap();
        let l = t.sum(s).unwrap();
        t.backward(l).unwrap().wrt(x)
    };
    let (a, b) = (grads(true), grads(false));
    for (p, q) in a.data().iter().zip(b.data()) {
        assert!((p - q).abs() <= 1e-10);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(v in prop::collection::vec(-30.0f64..30.0, 1..12)) {
        let mut t = Tape::new();
        let x = t.constant(Array::from_vec(v)).unwrap();
        let y = t.softmax(x).unwrap();
        prop_assert!((t.value(y).sum() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn layer_norm_standardizes(v in prop::collection::vec(-10.0f64..10.0, 2..16)) {
        let spread = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - v.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assume!(spread > 0.5);
        let n = v.len() as f64;
        let mut t = Tape::new();
        let x = t.constant(Array::from_vec(v)).unwrap();
        let y = t.layer_norm(x, 1e-12).unwrap();
        let out = t.value(y).data();
        let mean = out.iter().sum::<f64>() / n;
        let var = out.iter().map(|o| (o - mean).powi(2)).sum::<f64>() / n;
        prop_assert!(mean.abs() <= 1e-10);
        prop_assert!((var - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn gelu_and_sigmoid_pass_gradient_checks(v in prop::collection::vec(-4.0f64..4.0, 1..8)) {
        for prim in [Primitive::Gelu, Primitive::Sigmoid, Primitive::Exp] {
            let err = grad_check(&prim, &[Array::from_vec(v.clone())], STEP).unwrap();
            prop_assert!(err <= TOL, "{:?} {}", prim, err);
        }
    }
}
