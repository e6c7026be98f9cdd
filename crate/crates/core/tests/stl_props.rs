mod common;

use proptest::prelude::*;

use lkae::diffcore::{Graph, MinMode, Tensor};
use lkae::stl::{compile_dag, logic_loss, robustness, satisfies, Comparison, Formula, TimedTrace};

const DIM: usize = 2;

fn predicate() -> impl Strategy<Value = Formula> {
    (0..DIM, 0..4usize, -8i32..=8).prop_map(|(signal, c, t)| {
        let cmp = [Comparison::Lt, Comparison::Le, Comparison::Gt, Comparison::Ge][c];
        Formula::pred(signal, cmp, f64::from(t) * 0.25)
    })
}

/// Formulas of depth at most 4.
fn formula() -> impl Strategy<Value = Formula> {
    predicate().prop_recursive(3, 16, 2, |inner| {
        prop_oneof![
            (inner.clone(), inner.clone()).prop_map(|(a, b)| Formula::and(a, b)),
            (0..20usize, 1..30usize, inner).prop_map(|(lo, w, c)| Formula::always(lo, lo + w, c)),
        ]
    })
}

fn value() -> impl Strategy<Value = f64> {
    prop_oneof![(-8i32..=8).prop_map(|v| f64::from(v) * 0.25), -4.0..4.0f64]
}

/// A formula with a trace of at most 300 samples covering it, and a start time.
fn formula_and_trace() -> impl Strategy<Value = (Formula, TimedTrace, i64)> {
    formula().prop_flat_map(|f| {
        let need = f.horizon() + 1;
        (Just(f), need..=300usize, -40i64..40).prop_flat_map(move |(f, len, start)| {
            let samples = prop::collection::vec(prop::collection::vec(value(), DIM), len);
            (Just(f), samples, Just(start), 0..=(len - need) as i64)
        })
    })
    .prop_map(|(f, samples, start, offset)| {
        let stamps = (0..samples.len() as i64).map(|i| start + i).collect();
        (f, TimedTrace::new(stamps, samples).unwrap(), start + offset)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn dag_matches_recursive_definition_bit_for_bit((f, tr, k) in formula_and_trace()) {
        prop_assert!(f.depth() <= 4);
        let recursive = robustness(&f, &tr, k).unwrap();
        let dag = compile_dag(&f, tr.len()).evaluate(&tr, k).unwrap();
        prop_assert_eq!(recursive.to_bits(), dag.to_bits());
    }

    #[test]
    fn sign_agrees_with_boolean_semantics((f, tr, k) in formula_and_trace()) {
        let rho = robustness(&f, &tr, k).unwrap();
        if rho != 0.0 {
            prop_assert_eq!(rho > 0.0, satisfies(&f, &tr, k).unwrap());
        }
    }

    #[test]
    fn display_then_parse_is_identity(f in formula()) {
        prop_assert_eq!(Formula::parse(&f.to_string()).unwrap(), f);
    }

    #[test]
    fn robustness_is_shift_invariant((f, tr, k) in formula_and_trace(), shift in -1000i64..1000) {
        let stamps = tr.timestamps().iter().map(|t| t + shift).collect();
        let moved = TimedTrace::new(stamps, tr.samples().to_vec()).unwrap();
        prop_assert_eq!(robustness(&f, &tr, k).unwrap(), robustness(&f, &moved, k + shift).unwrap());
    }

    #[test]
    fn logic_loss_is_relu_of_negated_robustness(values in prop::collection::vec(-3.0..3.0f64, 12..40), beta in -2.0..2.0f64) {
        let f = Formula::tracking_rule(beta, 2, 9);
        let tr = TimedTrace::from_signal(0, &values).unwrap();
        let rho = robustness(&f, &tr, 0).unwrap();
        let mut g = Graph::new();
        let col = g.constant(Tensor::column(values.clone()));
        let loss = logic_loss(&mut g, &f, col, 0, MinMode::Hard).unwrap();
        prop_assert_eq!(g.item(loss), (-rho).max(0.0));
    }
}

#[test]
fn thousand_random_pairs_agree() {
    let rep = common::stl_agreement(1000, 11);
    assert_eq!(rep.pairs, 1000);
    assert_eq!(rep.mismatches, 0);
    assert_eq!(rep.sign_violations, 0);
}

#[test]
fn tracking_rule_is_negative_distance_on_constant_traces() {
    for (beta, s, expected) in [(2.0, 2.0, 0.0), (2.0, 2.5, -0.5), (2.0, 1.25, -0.75)] {
        let tr = TimedTrace::from_signal(0, &vec![s; 252]).unwrap();
        let rho = robustness(&Formula::tracking_rule(beta, 151, 251), &tr, 0).unwrap();
        assert_eq!(rho, expected);
    }
}
