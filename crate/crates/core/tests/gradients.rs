mod common;

use std::time::Instant;

use common::{fixture, Term, TERMS};
use proptest::prelude::*;
use stamina_core::adapters::GumbelNoise;
use stamina_core::tensor::gradcheck::{numerical_gradient, relative_error, DEFAULT_STEP};
use stamina_core::tensor::{cross_attention, Tape, Tensor, Var};

#[test]
fn every_loss_term_matches_finite_differences() {
    let start = Instant::now();
    for seed in 0..20 {
        let mut f = fixture(seed, false);
        for term in TERMS {
            let err = f.max_relative_error(term);
            assert!(err < 1e-4, "seed {seed} {term:?}: relative error {err:e}");
        }
    }
    assert!(start.elapsed().as_secs_f64() < 10.0, "took {:?}", start.elapsed());
}

#[test]
fn forgetting_gradient_vanishes_on_untouched_positions() {
    let mut f = fixture(3, false);
    f.layer
        .restore_state(f.layer.w_init().clone(), stamina_core::adapters::Mask::zeros(8, 8), 0)
        .unwrap();
    f.layer
        .set_factors(Tensor::full(&[8, 2], 0.3), Tensor::full(&[2, 8], 0.2))
        .unwrap();
    assert_eq!(f.value(Term::Forget), 0.0);
    assert!(f.analytic(Term::Forget).iter().all(|g| g.norm() == 0.0));
}

/// With a hard mask the residual's gradient reaches the mask parameters
/// through the soft relaxation: for an objective linear in the mask it equals
/// the gradient of the purely soft layer.
#[test]
fn straight_through_matches_soft_path_for_linear_objectives() {
    for seed in 0..5 {
        let grads = |hard: bool| {
            let mut f = fixture(seed, hard);
            let weight = Tensor::randn(&[8, 8], 1.0, &mut stamina_core::rng::keyed(seed, &[9]));
            let tape = Tape::new();
            for p in f.layer.params_mut() {
                p.bind(&tape);
            }
            let t = f.layer.terms(&tape, &GumbelNoise::Fixed(f.noise.clone())).unwrap();
            let obj = tape.sum(tape.mul(t.residual, tape.constant(weight)).unwrap()).unwrap();
            let g = tape.backward(obj).unwrap();
            f.layer.params_mut().iter().map(|p| p.grad(&g)).collect::<Vec<_>>()
        };
        let (hard, soft) = (grads(true), grads(false));
        // parameters are A, B, L1, L2; only the mask parameters must agree
        for k in 2..4 {
            let err = relative_error(&hard[k], &soft[k]);
            assert!(err < 1e-12, "seed {seed} param {k}: {err:e}");
        }
    }
}

/// `‖a − n‖ / max(‖a‖, ‖n‖, 1)`: relative for large gradients, absolute
/// near zero where central differences are dominated by round-off.
fn check_op(x: &Tensor, weight: &Tensor, op: impl Fn(&Tape, Var) -> Var) -> f64 {
    let tape = Tape::new();
    let v = tape.leaf(x.clone());
    let out = op(&tape, v);
    let root = tape.sum(tape.mul(out, tape.constant(weight.clone())).unwrap()).unwrap();
    let g = tape.backward(root).unwrap();
    let analytic = g.get(v).cloned().unwrap();
    let numeric = numerical_gradient(
        |p| {
            let tape = Tape::new();
            let v = tape.leaf(p.clone());
            let out = op(&tape, v);
            tape.scalar(tape.sum(tape.mul(out, tape.constant(weight.clone())).unwrap()).unwrap())
        },
        x,
        DEFAULT_STEP,
    );
    let scale = analytic.norm().max(numeric.norm()).max(1.0);
    analytic.sub(&numeric).unwrap().norm() / scale
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-2.0f64..2.0, rows * cols).prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matmul_gradient(x in matrix(3, 4), y in matrix(4, 2), w in matrix(3, 2)) {
        prop_assert!(check_op(&x, &w, |t, v| t.matmul(v, t.constant(y.clone())).unwrap()) < 1e-7);
        prop_assert!(check_op(&y, &w, |t, v| t.matmul(t.constant(x.clone()), v).unwrap()) < 1e-7);
    }

    #[test]
    fn softmax_and_sigmoid_gradients(x in matrix(3, 5), w in matrix(3, 5)) {
        prop_assert!(check_op(&x, &w, |t, v| t.softmax(v, 1).unwrap()) < 1e-6);
        prop_assert!(check_op(&x, &w, |t, v| t.sigmoid(v).unwrap()) < 1e-6);
    }

    #[test]
    fn cross_entropy_gradient(x in matrix(4, 3), labels in prop::collection::vec(0usize..3, 4)) {
        let one = Tensor::scalar(1.0);
        prop_assert!(check_op(&x, &one, |t, v| t.cross_entropy(v, &labels).unwrap()) < 1e-6);
    }

    #[test]
    fn attention_gradient(q in matrix(2, 4), kv in matrix(3, 4), wq in matrix(4, 4), w in matrix(2, 4)) {
        let err = check_op(&q, &w, |t, v| {
            let p = t.constant(wq.clone());
            cross_attention(t, v, t.constant(kv.clone()), p, p, p, 4).unwrap()
        });
        prop_assert!(err < 1e-6, "query: {err:e}");
        let err = check_op(&kv, &Tensor::ones(&[2, 4]).mul(&w).unwrap(), |t, v| {
            let p = t.constant(wq.clone());
            cross_attention(t, t.constant(q.clone()), v, p, p, p, 4).unwrap()
        });
        prop_assert!(err < 1e-6, "context: {err:e}");
    }
}
