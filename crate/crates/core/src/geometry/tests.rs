use std::f64::consts::{FRAC_PI_2, PI, TAU};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use super::*;
use crate::stl::{robustness, StackedSignal, StlFormula};

fn unit_circle(center: Vec<f64>) -> Ellipse {
    Ellipse::new(center, vec![1.0, 0.0], vec![0.0, 1.0])
}

fn hs(a: &[f64], b: f64) -> Halfspace {
    Halfspace::new(a.to_vec(), b).unwrap()
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() < 1e-12
}

#[test]
fn roots_through_center() {
    let r = ellipse_halfspace_roots(&unit_circle(vec![0.0, 0.0]), &hs(&[1.0, 0.0], 0.0), 0.0);
    match r {
        EllipseRoots::Crossing(a, b) => {
            let (lo, hi) = (a.min(b), a.max(b));
            assert!(
                close(lo, FRAC_PI_2) && close(hi, 3.0 * FRAC_PI_2),
                "{lo} {hi}"
            );
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn no_roots_when_ellipse_is_inside() {
    let r = ellipse_halfspace_roots(&unit_circle(vec![2.0, 0.0]), &hs(&[1.0, 0.0], 0.0), 0.0);
    assert_eq!(r, EllipseRoots::None);
}

#[test]
fn tangency_is_a_single_root() {
    let r = ellipse_halfspace_roots(&unit_circle(vec![0.0, 0.0]), &hs(&[1.0, 0.0], -1.0), 0.0);
    assert_eq!(r, EllipseRoots::Tangent(0.0));
}

#[test]
fn flat_constraint_is_degenerate_or_empty() {
    let e = Ellipse::new(vec![0.0, 0.0], vec![1.0, 0.0], vec![1.0, 0.0]);
    assert_eq!(
        ellipse_halfspace_roots(&e, &hs(&[0.0, 1.0], 0.0), 0.0),
        EllipseRoots::Degenerate
    );
    assert_eq!(
        ellipse_halfspace_roots(&e, &hs(&[0.0, 1.0], 1.0), 0.0),
        EllipseRoots::None
    );
}

#[test]
fn zero_normal_rejected() {
    assert_eq!(
        Halfspace::new(vec![0.0, 0.0], 1.0).unwrap_err(),
        GeometryError::ZeroNormal
    );
}

#[test]
fn roots_are_zeros_and_bracket_all_sign_changes() {
    let mut rng = StdRng::seed_from_u64(1);
    for _ in 0..500 {
        let d = rng.random_range(1..6);
        let v = |rng: &mut StdRng| {
            (0..d)
                .map(|_| rng.random_range(-2.0..2.0))
                .collect::<Vec<f64>>()
        };
        let e = Ellipse::new(v(&mut rng), v(&mut rng), v(&mut rng));
        let h = Halfspace::new(v(&mut rng), rng.random_range(-1.0..1.0)).unwrap();
        let shift = rng.random_range(-0.5..0.5);
        let mut roots = Vec::new();
        ellipse_halfspace_roots(&e, &h, shift).push_into(&mut roots);
        for &r in &roots {
            assert!((h.eval(&e.point(r)) + shift).abs() < 1e-8);
        }
        let sweep = 10_000;
        let value = |k: usize| h.eval(&e.point(TAU * k as f64 / sweep as f64)) + shift;
        for k in 0..sweep {
            let (a, b) = (value(k), value(k + 1));
            if (a >= 0.0) != (b >= 0.0) {
                let (lo, hi) = (
                    TAU * k as f64 / sweep as f64,
                    TAU * (k + 1) as f64 / sweep as f64,
                );
                let bracketed = roots
                    .iter()
                    .any(|&r| r >= lo - 1e-9 && r <= hi + 1e-9 || (hi >= TAU - 1e-9 && r < 1e-9));
                assert!(
                    bracketed,
                    "sign change in [{lo}, {hi}] not bracketed by {roots:?}"
                );
            }
        }
    }
}

#[test]
fn whole_space_gives_full_circle() {
    let domain =
        UnionOfPolytopes::new(2, vec![Polytope::new(vec![hs(&[1.0, 0.0], 5.0)]).unwrap()]).unwrap();
    let arcs = active_arcs_union(&unit_circle(vec![0.0, 0.0]), &domain, 0.0).unwrap();
    assert!(arcs.is_full());
    assert!(close(arcs.measure(), TAU));
}

#[test]
fn half_plane_through_center_gives_half_circle() {
    let domain =
        UnionOfPolytopes::new(2, vec![Polytope::new(vec![hs(&[1.0, 0.0], 0.0)]).unwrap()]).unwrap();
    let arcs = active_arcs_union(&unit_circle(vec![0.0, 0.0]), &domain, 0.0).unwrap();
    assert_eq!(arcs.arcs().len(), 1);
    assert!(close(arcs.measure(), PI));
    assert!(arcs.contains(0.0));
    assert!(arcs.contains(-FRAC_PI_2 + 1e-6));
    assert!(!arcs.contains(PI));
}

#[test]
fn complementary_half_planes_cover_the_circle() {
    let domain = UnionOfPolytopes::new(
        2,
        vec![
            Polytope::new(vec![hs(&[1.0, 0.0], 0.0)]).unwrap(),
            Polytope::new(vec![hs(&[-1.0, 0.0], 0.0)]).unwrap(),
        ],
    )
    .unwrap();
    let arcs = active_arcs_union(&unit_circle(vec![0.0, 0.0]), &domain, 0.0).unwrap();
    assert!(arcs.is_full());
}

#[test]
fn empty_classification_is_an_error() {
    let domain =
        UnionOfPolytopes::new(2, vec![Polytope::new(vec![hs(&[1.0, 0.0], -5.0)]).unwrap()])
            .unwrap();
    assert_eq!(
        active_arcs_union(&unit_circle(vec![0.0, 0.0]), &domain, 0.0).unwrap_err(),
        GeometryError::EmptyActiveSet
    );
}

#[test]
fn shift_enlarges_the_domain() {
    let domain =
        UnionOfPolytopes::new(2, vec![Polytope::new(vec![hs(&[1.0, 0.0], -1.0)]).unwrap()])
            .unwrap();
    let e = unit_circle(vec![0.0, 0.0]);
    // x1 - 1 + 1 >= 0 is the right half circle
    let arcs = active_arcs_union(&e, &domain, 1.0).unwrap();
    assert!(close(arcs.measure(), PI));
}

fn random_union(rng: &mut StdRng, d: usize) -> UnionOfPolytopes {
    let members = (0..rng.random_range(1..4))
        .map(|_| {
            let faces = (0..rng.random_range(1..4))
                .map(|_| {
                    Halfspace::new(
                        (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
                        rng.random_range(-0.5..1.0),
                    )
                    .unwrap()
                })
                .collect();
            Polytope::new(faces).unwrap()
        })
        .collect();
    UnionOfPolytopes::new(d, members).unwrap()
}

#[test]
fn arc_classification_agrees_with_interior_angles_and_measure_adds_up() {
    let mut rng = StdRng::seed_from_u64(2);
    let mut checked = 0;
    while checked < 300 {
        let d = 3;
        let domain = random_union(&mut rng, d);
        let v = |rng: &mut StdRng| {
            (0..d)
                .map(|_| rng.random_range(-1.5..1.5))
                .collect::<Vec<f64>>()
        };
        let e = Ellipse::new(v(&mut rng), v(&mut rng), v(&mut rng));
        let Ok(arcs) = active_arcs_union(&e, &domain, 0.0) else {
            continue;
        };
        checked += 1;
        for &(s, len) in arcs.arcs() {
            for k in 1..=10 {
                let theta = s + len * k as f64 / 11.0;
                assert!(
                    domain.contains(&e.point(theta)),
                    "interior angle {theta} of active arc outside"
                );
            }
        }
        let mut inactive = 0.0;
        let n = 20_000;
        for k in 0..n {
            let theta = TAU * (k as f64 + 0.5) / n as f64;
            let inside = domain.contains(&e.point(theta));
            let claimed = arcs.contains(theta);
            if inside != claimed {
                // only allowed right at a boundary
                let near = arcs.arcs().iter().any(|&(s, len)| {
                    let a = (theta - s).rem_euclid(TAU);
                    a.min(TAU - a) < 1e-3
                        || ((theta - s - len).rem_euclid(TAU))
                            .min(TAU - (theta - s - len).rem_euclid(TAU))
                            < 1e-3
                });
                assert!(near, "mismatch at {theta}");
            }
            if !claimed {
                inactive += TAU / n as f64;
            }
        }
        assert!((arcs.measure() + inactive - TAU).abs() < 2e-3);
    }
}

#[test]
fn angle_at_is_uniform_over_arc_length() {
    let arcs = arcs_from_roots(vec![0.5, 1.0, 3.0, 4.0], |t| {
        (0.5..1.0).contains(&t) || (3.0..4.0).contains(&t)
    })
    .unwrap();
    assert!(close(arcs.measure(), 1.5));
    assert!(close(arcs.angle_at(0.0), 0.5));
    assert!(close(arcs.angle_at(1.0 / 3.0), 1.0) || close(arcs.angle_at(1.0 / 3.0), 3.0));
    assert!(close(arcs.angle_at(0.5), 3.25));
}

#[test]
fn wrapping_arcs_merge() {
    let arcs = arcs_from_roots(vec![1.0, 5.0], |t| !(1.0..5.0).contains(&t)).unwrap();
    assert_eq!(arcs.arcs().len(), 1);
    assert!(close(arcs.arcs()[0].0, 5.0));
    assert!(close(arcs.measure(), TAU - 4.0));
    assert!(arcs.contains(0.0));
}

#[test]
fn lifting_places_the_block() {
    let p = LinearPredicate::new(vec![1.0, 1.0], -10.0).unwrap();
    let h = lift_predicate(&p, 1, 3).unwrap();
    assert_eq!(h.normal(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
    assert_eq!(h.offset(), -10.0);
    assert_eq!(
        lift_predicate(&p, 3, 3).unwrap_err(),
        GeometryError::StepOutOfRange { t: 3, steps: 3 }
    );
}

#[test]
fn lifted_value_equals_state_value() {
    let mut rng = StdRng::seed_from_u64(9);
    let p = LinearPredicate::new(vec![0.3, -1.2, 2.0], 0.7).unwrap();
    for _ in 0..100 {
        let steps = 5;
        let x: Vec<f64> = (0..3 * steps)
            .map(|_| rng.random_range(-3.0..3.0))
            .collect();
        let t = rng.random_range(0..steps);
        let h = lift_predicate(&p, t, steps).unwrap();
        assert!((h.eval(&x) - p.eval(&x[3 * t..3 * t + 3])).abs() < 1e-12);
    }
}

#[test]
fn midpoint_constraint_layout() {
    let p = LinearPredicate::new(vec![1.0], 0.0).unwrap();
    let h = midpoint_constraint(&p, 0, 2).unwrap();
    assert_eq!(h.normal(), &[0.5, 0.5]);
    assert_eq!(h.offset(), 0.0);
    assert!(midpoint_constraint(&p, 1, 2).is_err());

    let q = LinearPredicate::new(vec![2.0, -1.0], 0.5).unwrap();
    let h = midpoint_constraint(&q, 1, 3).unwrap();
    let c = [0.4, 1.3];
    let x = [9.0, 9.0, c[0], c[1], c[0], c[1]];
    assert!((h.eval(&x) - q.eval(&c)).abs() < 1e-12);
}

#[test]
fn midpoint_catches_corner_cutting() {
    // obstacle {x1 >= 0, x2 >= 0}; endpoints just outside on two different faces
    let eps = 0.05;
    let faces = [
        LinearPredicate::new(vec![1.0, 0.0], 0.0).unwrap(),
        LinearPredicate::new(vec![0.0, 1.0], 0.0).unwrap(),
    ];
    let x = [-eps, 1.0, 1.0, -eps];
    let in_at = |t: usize| faces.iter().all(|f| f.eval(&x[2 * t..2 * t + 2]) >= 0.0);
    assert!(!in_at(0) && !in_at(1));
    let mids: Vec<f64> = faces
        .iter()
        .map(|f| midpoint_constraint(f, 0, 2).unwrap().eval(&x))
        .collect();
    assert!(
        mids.iter().all(|v| *v > 0.0),
        "midpoint should lie inside the obstacle: {mids:?}"
    );
}

fn square(cx: f64, cy: f64, half: f64) -> Polytope {
    Polytope::from_box(&[cx - half, cy - half], &[cx + half, cy + half]).unwrap()
}

#[test]
fn counts_members_by_construction() {
    let spec = ReachAvoidSpec {
        init: Some(square(0.0, 0.0, 0.5)),
        unsafe_sets: vec![square(2.0, 0.0, 0.5)],
        goals: vec![Goal {
            region: square(4.0, 0.0, 0.5),
            window: (4, 4),
        }],
        steps: 5,
        midpoints: false,
    };
    let d = build_reach_avoid_domains(&spec, DEFAULT_ENUMERATION_CAP).unwrap();
    assert_eq!(d.hit_obstacle.len(), 5);
    assert_eq!(d.miss_goal.len(), 4);
    assert_eq!(d.failure().len(), 9);
    let with_mid = build_reach_avoid_domains(
        &ReachAvoidSpec {
            midpoints: true,
            ..spec.clone()
        },
        DEFAULT_ENUMERATION_CAP,
    )
    .unwrap();
    assert_eq!(with_mid.hit_obstacle.len(), 9);
    // 4 faces at 5 steps, one reach step
    assert_eq!(
        d.satisfaction,
        SatisfactionDomain::Explicit(d.satisfaction_union().clone())
    );
    assert_eq!(d.satisfaction_union().len(), 4usize.pow(5));
}

#[test]
fn no_obstacles_means_no_type_a() {
    let spec = ReachAvoidSpec {
        init: None,
        unsafe_sets: vec![],
        goals: vec![Goal {
            region: square(4.0, 0.0, 0.5),
            window: (2, 3),
        }],
        steps: 4,
        midpoints: true,
    };
    let d = build_reach_avoid_domains(&spec, DEFAULT_ENUMERATION_CAP).unwrap();
    assert!(d.hit_obstacle.is_empty());
    assert_eq!(d.miss_goal.len(), 16);
}

#[test]
fn enumeration_cap_is_enforced() {
    let spec = ReachAvoidSpec {
        init: None,
        unsafe_sets: vec![],
        goals: vec![Goal {
            region: square(4.0, 0.0, 0.5),
            window: (0, 9),
        }],
        steps: 10,
        midpoints: false,
    };
    // 4^10 type-b members
    match build_reach_avoid_domains(&spec, DEFAULT_ENUMERATION_CAP).unwrap_err() {
        GeometryError::EnumerationCap { count, cap } => {
            assert_eq!(count, 4u128.pow(10));
            assert_eq!(cap, DEFAULT_ENUMERATION_CAP);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn satisfaction_delegates_when_too_large() {
    let spec = ReachAvoidSpec {
        init: None,
        unsafe_sets: vec![square(2.0, 0.0, 0.5)],
        goals: vec![],
        steps: 12,
        midpoints: false,
    };
    let d = build_reach_avoid_domains(&spec, DEFAULT_ENUMERATION_CAP).unwrap();
    assert_eq!(d.satisfaction, SatisfactionDomain::DelegateToStl);
}

#[test]
fn bad_window_rejected() {
    let spec = ReachAvoidSpec {
        init: None,
        unsafe_sets: vec![],
        goals: vec![Goal {
            region: square(4.0, 0.0, 0.5),
            window: (2, 5),
        }],
        steps: 5,
        midpoints: false,
    };
    assert!(matches!(
        build_reach_avoid_domains(&spec, 10).unwrap_err(),
        GeometryError::InvalidWindow { .. }
    ));
}

#[test]
fn failure_union_matches_negated_formula() {
    let spec = ReachAvoidSpec {
        init: Some(square(0.0, 0.0, 0.5)),
        unsafe_sets: vec![square(1.0, 1.0, 0.6), square(2.0, -1.0, 0.5)],
        goals: vec![
            Goal {
                region: square(3.0, 0.0, 0.7),
                window: (2, 3),
            },
            Goal {
                region: square(1.5, 0.0, 0.8),
                window: (1, 2),
            },
        ],
        steps: 4,
        midpoints: false,
    };
    let d = build_reach_avoid_domains(&spec, DEFAULT_ENUMERATION_CAP).unwrap();
    let failure = d.failure();
    let negated = StlFormula::not(spec.to_formula().unwrap());
    assert_eq!(d.satisfaction, SatisfactionDomain::DelegateToStl);
    let mut rng = StdRng::seed_from_u64(4);
    let (mut fails, mut passes) = (0, 0);
    for _ in 0..10_000 {
        let mut x = vec![rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)];
        for t in 1..4 {
            x.push(0.9 * t as f64 + rng.random_range(-1.2..1.2));
            x.push(rng.random_range(-1.5..1.5));
        }
        let rho = robustness(&negated, &StackedSignal::new(x.clone(), 2).unwrap(), 0).unwrap();
        let in_failure = failure.contains(&x);
        assert_eq!(in_failure, rho >= 0.0, "trajectory {x:?}, rho {rho}");
        if in_failure {
            fails += 1;
        } else {
            passes += 1;
        }
    }
    assert!(fails > 500 && passes > 500, "{fails} / {passes}");
}

#[test]
fn satisfaction_union_matches_formula() {
    let spec = ReachAvoidSpec {
        init: Some(square(0.0, 0.0, 0.5)),
        unsafe_sets: vec![square(1.0, 0.5, 0.6)],
        goals: vec![Goal {
            region: square(2.0, 0.0, 0.8),
            window: (1, 2),
        }],
        steps: 3,
        midpoints: false,
    };
    let d = build_reach_avoid_domains(&spec, DEFAULT_ENUMERATION_CAP).unwrap();
    let satisfied = d.satisfaction_union();
    assert_eq!(satisfied.len(), 4usize.pow(3) * 2);
    let formula = spec.to_formula().unwrap();
    let mut rng = StdRng::seed_from_u64(5);
    let (mut yes, mut no) = (0, 0);
    for _ in 0..10_000 {
        let mut x = vec![rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)];
        for t in 1..3 {
            x.push(0.9 * t as f64 + rng.random_range(-1.2..1.2));
            x.push(rng.random_range(-1.5..1.5));
        }
        let rho = robustness(&formula, &StackedSignal::new(x.clone(), 2).unwrap(), 0).unwrap();
        let inside = satisfied.contains(&x);
        assert_eq!(inside, rho >= 0.0, "trajectory {x:?}, rho {rho}");
        if inside {
            yes += 1;
        } else {
            no += 1;
        }
    }
    assert!(yes > 500 && no > 500, "{yes} / {no}");
}

impl ReachAvoidDomains {
    fn satisfaction_union(&self) -> &UnionOfPolytopes {
        match &self.satisfaction {
            SatisfactionDomain::Explicit(u) => u,
            SatisfactionDomain::DelegateToStl => panic!("delegated"),
        }
    }
}
