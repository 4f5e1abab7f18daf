use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use super::*;

fn pred(a: &[f64], b: f64) -> StlFormula {
    StlFormula::Predicate(LinearPredicate::new(a.to_vec(), b).unwrap())
}

fn iv(a: usize, b: usize) -> Interval {
    Interval::new(a, b).unwrap()
}

fn example_formula() -> StlFormula {
    parse_formula("G[0,9](x1 + x2 - 10 >= 0) | F[0,15](G[0,5](-x1 >= 0))", 2).unwrap()
}

/// s_t = (t - 8, 2), long enough for the example formula.
fn example_signal() -> StackedSignal {
    let states: Vec<Vec<f64>> = (0..30).map(|t| vec![t as f64 - 8.0, 2.0]).collect();
    StackedSignal::from_states(&states).unwrap()
}

#[test]
fn parses_always_of_sum() {
    let f = parse_formula("G[0,9](x1 + x2 - 10 >= 0)", 2).unwrap();
    assert_eq!(f, StlFormula::always(iv(0, 9), pred(&[1.0, 1.0], -10.0)));
}

#[test]
fn parses_nested_temporal() {
    let f = parse_formula("F[0,15](G[0,5](-x1 >= 0))", 2).unwrap();
    let expected = StlFormula::eventually(
        iv(0, 15),
        StlFormula::always(iv(0, 5), pred(&[-1.0, 0.0], 0.0)),
    );
    assert_eq!(f, expected);
}

#[test]
fn rejects_inverted_interval() {
    let err = parse_formula("G[5,2](x1 >= 0)", 1).unwrap_err();
    assert!(matches!(err, StlError::InvalidInterval { .. }), "{err:?}");
}

#[test]
fn rejects_negative_and_fractional_bounds() {
    assert!(matches!(
        parse_formula("G[-1,2](x1 >= 0)", 1).unwrap_err(),
        StlError::InvalidInterval { .. }
    ));
    assert!(matches!(
        parse_formula("F[0,2.5](x1 >= 0)", 1).unwrap_err(),
        StlError::InvalidInterval { .. }
    ));
}

#[test]
fn rejects_out_of_range_variable() {
    let err = parse_formula("x3 >= 0", 2).unwrap_err();
    assert_eq!(err, StlError::DimensionMismatch { index: 3, dim: 2 });
}

#[test]
fn syntax_error_reports_position() {
    let err = parse_formula("G[0,1](x1 >= 0)\n  & & x2 <= 1", 2).unwrap_err();
    match err {
        StlError::Syntax { line, column, .. } => {
            assert_eq!(line, 2);
            assert_eq!(column, 5);
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn normalizes_comparisons() {
    assert_eq!(parse_formula("x1 <= 3", 1).unwrap(), pred(&[-1.0], 3.0));
    assert_eq!(parse_formula("x1 > 3", 1).unwrap(), pred(&[1.0], -3.0));
    assert_eq!(
        parse_formula("2*x1 < x2 / 4", 2).unwrap(),
        pred(&[-2.0, 0.25], 0.0)
    );
    assert_eq!(
        parse_formula("x1 - (-1e9) >= 0", 1).unwrap(),
        pred(&[1.0], 1e9)
    );
    assert_eq!(
        parse_formula("(x1 + 1) * 3 >= 0", 1).unwrap(),
        pred(&[3.0], 3.0)
    );
}

#[test]
fn rejects_nonlinear_and_constant_predicates() {
    assert!(parse_formula("x1 * x2 >= 0", 2).is_err());
    assert!(parse_formula("3 >= 1", 2).is_err());
}

#[test]
fn until_and_precedence() {
    let f = parse_formula("x1 >= 0 & x2 >= 0 U[1,3] x1 <= 2 | !x2 >= 5", 2).unwrap();
    let expected = StlFormula::or(
        StlFormula::and(
            pred(&[1.0, 0.0], 0.0),
            StlFormula::until(iv(1, 3), pred(&[0.0, 1.0], 0.0), pred(&[-1.0, 0.0], 2.0)),
        ),
        StlFormula::not(pred(&[0.0, 1.0], -5.0)),
    );
    assert_eq!(f, expected);
}

#[test]
fn horizon_examples() {
    assert_eq!(horizon(&pred(&[1.0], 0.0)), 1);
    assert_eq!(horizon(&example_formula()), 21);
    assert_eq!(
        horizon(&StlFormula::always(iv(0, 9), pred(&[1.0, 1.0], -10.0))),
        10
    );
    let u = StlFormula::until(
        iv(2, 4),
        pred(&[1.0], 0.0),
        StlFormula::always(iv(0, 3), pred(&[1.0], 0.0)),
    );
    assert_eq!(horizon(&u), 4 + 4);
}

#[test]
fn robustness_matches_worked_example() {
    let s = example_signal();
    let first = StlFormula::always(iv(0, 9), pred(&[1.0, 1.0], -10.0));
    let second = StlFormula::eventually(
        iv(0, 15),
        StlFormula::always(iv(0, 5), pred(&[-1.0, 0.0], 0.0)),
    );
    assert_eq!(robustness(&first, &s, 0).unwrap(), -16.0);
    assert_eq!(robustness(&second, &s, 0).unwrap(), 3.0);
    assert_eq!(robustness(&example_formula(), &s, 0).unwrap(), 3.0);
}

#[test]
fn robustness_requires_enough_signal() {
    let states: Vec<Vec<f64>> = (0..20).map(|t| vec![t as f64, 0.0]).collect();
    let s = StackedSignal::from_states(&states).unwrap();
    assert_eq!(
        robustness(&example_formula(), &s, 0).unwrap_err(),
        StlError::SignalTooShort {
            steps: 20,
            t: 0,
            needed: 21
        }
    );
    let s = example_signal();
    assert!(robustness(&example_formula(), &s, 9).is_ok());
    assert!(robustness(&example_formula(), &s, 10).is_err());
}

#[test]
fn level_set_membership() {
    let s = example_signal();
    let f = example_formula();
    assert!(in_level_set(&s, &f, 0.0).unwrap());
    assert!(in_level_set(&s, &f, 3.0).unwrap());
    assert!(!in_level_set(&s, &f, 3.01).unwrap());
    assert!(in_level_set(&s, &f, -1e9).unwrap());
}

#[test]
fn collects_predicates_in_order_without_duplicates() {
    assert_eq!(
        collect_predicates(&example_formula()),
        vec![
            LinearPredicate::new(vec![1.0, 1.0], -10.0).unwrap(),
            LinearPredicate::new(vec![-1.0, 0.0], 0.0).unwrap(),
        ]
    );
    let p = pred(&[1.0, 2.0], 3.0);
    let f = StlFormula::and(p.clone(), StlFormula::not(p));
    assert_eq!(collect_predicates(&f).len(), 1);
}

#[test]
fn until_follows_non_strict_definition() {
    // phi1 holds on [0,2], phi2 first holds at 2: until over [0,3] is satisfied
    // with score min(phi2(2), min phi1[0..=2]).
    let f = parse_formula("x1 >= 0 U[0,3] x2 >= 0", 2).unwrap();
    let s = StackedSignal::from_states(&[
        vec![3.0, -5.0],
        vec![2.0, -4.0],
        vec![1.5, 4.0],
        vec![-1.0, 9.0],
    ])
    .unwrap();
    // tau=2: min(4, min(3,2,1.5)) = 1.5; tau=3: min(9, -1) = -1
    assert_eq!(robustness(&f, &s, 0).unwrap(), 1.5);
}

// --- random formulas and the boolean oracle -------------------------------

pub(crate) fn random_formula(
    rng: &mut impl Rng,
    dim: usize,
    depth: usize,
    max_end: usize,
) -> StlFormula {
    let leaf = depth == 0 || rng.random_bool(0.3);
    if leaf {
        let mut a: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        if a.iter().all(|c| *c == 0.0) {
            a[0] = 1.0;
        }
        return pred(&a, rng.random_range(-1.0..1.0));
    }
    let interval = |rng: &mut dyn rand::RngCore| {
        let hi = rng.random_range(0..=max_end);
        let lo = rng.random_range(0..=hi);
        iv(lo, hi)
    };
    match rng.random_range(0..6) {
        0 => StlFormula::not(random_formula(rng, dim, depth - 1, max_end)),
        1 => StlFormula::and(
            random_formula(rng, dim, depth - 1, max_end),
            random_formula(rng, dim, depth - 1, max_end),
        ),
        2 => StlFormula::or(
            random_formula(rng, dim, depth - 1, max_end),
            random_formula(rng, dim, depth - 1, max_end),
        ),
        3 => StlFormula::always(interval(rng), random_formula(rng, dim, depth - 1, max_end)),
        4 => StlFormula::eventually(interval(rng), random_formula(rng, dim, depth - 1, max_end)),
        _ => StlFormula::until(
            interval(rng),
            random_formula(rng, dim, depth - 1, max_end),
            random_formula(rng, dim, depth - 1, max_end),
        ),
    }
}

fn satisfied(phi: &StlFormula, s: &StackedSignal, t: usize) -> bool {
    match phi {
        StlFormula::Predicate(p) => p.eval(s.state(t)) >= 0.0,
        StlFormula::Not(f) => !satisfied(f, s, t),
        StlFormula::And(l, r) => satisfied(l, s, t) && satisfied(r, s, t),
        StlFormula::Or(l, r) => satisfied(l, s, t) || satisfied(r, s, t),
        StlFormula::Always(i, f) => (t + i.start()..=t + i.end()).all(|k| satisfied(f, s, k)),
        StlFormula::Eventually(i, f) => (t + i.start()..=t + i.end()).any(|k| satisfied(f, s, k)),
        StlFormula::Until(i, l, r) => (t + i.start()..=t + i.end())
            .any(|k| satisfied(r, s, k) && (t..=k).all(|j| satisfied(l, s, j))),
    }
}

fn random_signal(rng: &mut impl Rng, dim: usize, steps: usize) -> StackedSignal {
    StackedSignal::new(
        (0..dim * steps)
            .map(|_| rng.random_range(-2.0..2.0))
            .collect(),
        dim,
    )
    .unwrap()
}

#[test]
fn sign_agrees_with_boolean_semantics() {
    let mut rng = StdRng::seed_from_u64(7);
    for _ in 0..10_000 {
        let f = random_formula(&mut rng, 2, 3, 3);
        let s = random_signal(&mut rng, 2, horizon(&f));
        let rho = robustness(&f, &s, 0).unwrap();
        assert_eq!(rho >= 0.0, satisfied(&f, &s, 0), "formula {f}, rho {rho}");
    }
}

#[test]
fn negation_flips_score_exactly() {
    let mut rng = StdRng::seed_from_u64(11);
    for _ in 0..500 {
        let f = random_formula(&mut rng, 3, 3, 4);
        let s = random_signal(&mut rng, 3, horizon(&f) + 2);
        for t in 0..3 {
            let a = robustness(&f, &s, t).unwrap();
            let b = robustness(&StlFormula::not(f.clone()), &s, t).unwrap();
            assert_eq!(a, -b);
        }
    }
}

#[test]
fn horizon_is_monotone_over_the_tree() {
    fn check(phi: &StlFormula) {
        for c in phi.children() {
            assert!(horizon(phi) >= horizon(c));
            check(c);
        }
    }
    let mut rng = StdRng::seed_from_u64(3);
    for _ in 0..500 {
        check(&random_formula(&mut rng, 2, 4, 5));
    }
}

#[test]
fn score_is_piecewise_affine_along_segments() {
    // Second differences on a fine grid vanish except near finitely many kinks.
    let mut rng = StdRng::seed_from_u64(5);
    for _ in 0..100 {
        let f = random_formula(&mut rng, 2, 3, 3);
        let h = horizon(&f);
        let s0 = random_signal(&mut rng, 2, h);
        let s1 = random_signal(&mut rng, 2, h);
        let n = 2000;
        let vals: Vec<f64> = (0..=n)
            .map(|k| {
                let lam = k as f64 / n as f64;
                let mix: Vec<f64> = s0
                    .as_slice()
                    .iter()
                    .zip(s1.as_slice())
                    .map(|(a, b)| (1.0 - lam) * a + lam * b)
                    .collect();
                robustness(&f, &StackedSignal::new(mix, 2).unwrap(), 0).unwrap()
            })
            .collect();
        let kinks = vals
            .windows(3)
            .filter(|w| (w[0] - 2.0 * w[1] + w[2]).abs() > 1e-9)
            .count();
        let pieces = 2 * h * collect_predicates(&f).len() + 1;
        assert!(kinks <= 2 * pieces * pieces, "{kinks} kinks for {f}");
    }
}

fn arb_formula() -> impl Strategy<Value = StlFormula> {
    let leaf = (prop::collection::vec(-1e3f64..1e3, 3), -1e3f64..1e3).prop_map(|(mut a, b)| {
        if a.iter().all(|c| *c == 0.0) {
            a[0] = 1.0;
        }
        StlFormula::Predicate(LinearPredicate::new(a, b).unwrap())
    });
    let interval = (0usize..6, 0usize..6).prop_map(|(a, b)| iv(a.min(b), a.max(b)));
    leaf.prop_recursive(4, 24, 2, move |inner| {
        prop_oneof![
            inner.clone().prop_map(StlFormula::not),
            (inner.clone(), inner.clone()).prop_map(|(l, r)| StlFormula::and(l, r)),
            (inner.clone(), inner.clone()).prop_map(|(l, r)| StlFormula::or(l, r)),
            (interval.clone(), inner.clone()).prop_map(|(i, f)| StlFormula::always(i, f)),
            (interval.clone(), inner.clone()).prop_map(|(i, f)| StlFormula::eventually(i, f)),
            (interval.clone(), inner.clone(), inner)
                .prop_map(|(i, l, r)| StlFormula::until(i, l, r)),
        ]
    })
}

proptest! {
    #[test]
    fn pretty_print_round_trips(f in arb_formula()) {
        let text = f.to_string();
        let back = parse_formula(&text, 3).unwrap();
        prop_assert_eq!(back, f);
    }
}
