use nalgebra::{DMatrix, DVector};
use statrs::function::erf::erfc;

use super::*;
use crate::geometry::{Halfspace, Polytope, UnionOfPolytopes};
use crate::stl::parse_formula;

fn tail(x: f64) -> f64 {
    0.5 * erfc(x / std::f64::consts::SQRT_2)
}

fn std_normal(dim: usize) -> TrajectoryGaussian {
    TrajectoryGaussian::new(DVector::zeros(dim), DMatrix::identity(dim, dim), 1).unwrap()
}

fn beyond(dim: usize, c: f64) -> Domain {
    let a = vec![1.0 / (dim as f64).sqrt(); dim];
    let h = Halfspace::new(a, -c).unwrap();
    Domain::Polytopes(UnionOfPolytopes::new(dim, vec![Polytope::new(vec![h]).unwrap()]).unwrap())
}

fn config(n: usize, seed: u64) -> HdrConfig {
    HdrConfig {
        samples: SampleCount::Fixed(n),
        seed,
        ..HdrConfig::default()
    }
}

#[test]
fn whole_space_is_certain() {
    let r = hdr_estimate(&std_normal(3), &Domain::Everywhere, &config(64, 0)).unwrap();
    assert_eq!(r.probability, 1.0);
    assert!(r.nestings.is_empty());
}

#[test]
fn empty_union_is_impossible() {
    let r = hdr_estimate(
        &std_normal(3),
        &Domain::Polytopes(UnionOfPolytopes::empty(3)),
        &config(64, 0),
    )
    .unwrap();
    assert_eq!(r.probability, 0.0);
}

#[test]
fn degenerate_gaussian_evaluates_the_mean() {
    let g =
        TrajectoryGaussian::new(DVector::from_element(1, 5.0), DMatrix::zeros(1, 1), 1).unwrap();
    assert_eq!(
        hdr_estimate(&g, &beyond(1, 3.0), &config(64, 0))
            .unwrap()
            .probability,
        1.0
    );
    assert_eq!(
        hdr_estimate(&g, &beyond(1, 6.0), &config(64, 0))
            .unwrap()
            .probability,
        0.0
    );
}

#[test]
fn one_dimensional_tail() {
    let exact = tail(3.0);
    assert!((exact - 1.3499e-3).abs() < 1e-7);
    for seed in 0..5 {
        let r = hdr_estimate(&std_normal(1), &beyond(1, 3.0), &config(256, seed)).unwrap();
        assert!(
            (r.probability - exact).abs() <= 3.0 * r.std_dev,
            "seed {seed}: {} ± {}",
            r.probability,
            r.std_dev
        );
        let k = r.nestings.len();
        assert!((9..=11).contains(&k), "{k} nestings");
        assert_eq!(r.nestings.last().unwrap().cutoff, 0.0);
        assert!(!r.upper_bound_only);
    }
}

#[test]
fn stl_and_polytope_domains_agree_on_a_half_line() {
    let stl = Domain::stl(&parse_formula("x1 >= 3", 1).unwrap(), 1);
    let a = hdr_estimate(&std_normal(1), &stl, &config(128, 4)).unwrap();
    let b = hdr_estimate(&std_normal(1), &beyond(1, 3.0), &config(128, 4)).unwrap();
    assert!((a.probability - b.probability).abs() < 1e-12);
}

#[test]
fn fifty_dimensional_tail() {
    let exact = tail(4.0);
    assert!((exact - 3.167e-5).abs() < 1e-8);
    let r = hdr_estimate(&std_normal(50), &beyond(50, 4.0), &config(256, 1)).unwrap();
    assert!(
        (r.probability - exact).abs() <= 3.0 * r.std_dev,
        "{} ± {}",
        r.probability,
        r.std_dev
    );
}

#[test]
fn repeated_estimates_are_unbiased_and_calibrated() {
    let exact = tail(2.0);
    let runs: Vec<VerificationResult> = (0..200)
        .map(|s| hdr_estimate(&std_normal(1), &beyond(1, 2.0), &config(64, 1000 + s)).unwrap())
        .collect();
    let n = runs.len() as f64;
    let mean = runs.iter().map(|r| r.probability).sum::<f64>() / n;
    let var = runs
        .iter()
        .map(|r| (r.probability - mean).powi(2))
        .sum::<f64>()
        / (n - 1.0);
    assert!(
        (mean - exact).abs() <= 3.0 * (var / n).sqrt(),
        "{mean} vs {exact}"
    );
    let reported = runs.iter().map(|r| r.variance).sum::<f64>() / n;
    let ratio = var / reported;
    assert!(
        (0.5..=2.0).contains(&ratio),
        "empirical/reported variance {ratio}"
    );
    let balanced = runs
        .iter()
        .flat_map(|r| &r.nestings[..r.nestings.len() - 1])
        .filter(|k| (0.35..=0.65).contains(&k.conditional))
        .count();
    let total: usize = runs.iter().map(|r| r.nestings.len() - 1).sum();
    assert!(balanced as f64 >= 0.9 * total as f64);
}

#[test]
fn identical_seed_gives_identical_result() {
    let g = std_normal(4);
    let d = beyond(4, 2.5);
    let cfg = HdrConfig {
        retain_samples: true,
        ..config(64, 77)
    };
    let mut a = hdr_estimate(&g, &d, &cfg).unwrap();
    let mut b = hdr_estimate(&g, &d, &cfg).unwrap();
    a.wall_time = Duration::ZERO;
    b.wall_time = Duration::ZERO;
    assert_eq!(a, b);
    assert!(!a.samples.is_empty());
    assert!(a.samples.iter().all(|x| d.score(x) >= 0.0));
    let c = hdr_estimate(&g, &d, &config(64, 78)).unwrap();
    assert_ne!(a.probability, c.probability);
}

#[test]
fn nesting_cap_reports_an_upper_bound() {
    let cfg = HdrConfig {
        max_nestings: 6,
        ..config(64, 3)
    };
    let r = hdr_estimate(&std_normal(1), &beyond(1, 4.0), &cfg).unwrap();
    assert!(r.upper_bound_only);
    assert_eq!(r.nestings.len(), 6);
    assert!((r.probability - 0.5f64.powi(6)).abs() < 1e-12);
    assert!(r.probability > tail(4.0));
}

#[test]
fn single_factor_variance_is_binomial() {
    let rec = |p: f64, n: usize| NestingRecord {
        index: 1,
        cutoff: 0.0,
        samples: n,
        in_count: (p * n as f64) as usize,
        conditional: p,
    };
    assert!((variance_of_product(&[rec(0.25, 40)]) - 0.25 * 0.75 / 40.0).abs() < 1e-15);
    let with_one = variance_of_product(&[rec(0.5, 64), rec(1.0, 64)]);
    assert!((with_one - 0.25 / 64.0).abs() < 1e-15);
    assert_eq!(variance_of_product(&[rec(0.0, 64), rec(0.5, 64)]), 0.0);
}

#[test]
fn five_halving_levels_of_64() {
    let recs: Vec<NestingRecord> = (1..=5)
        .map(|index| NestingRecord {
            index,
            cutoff: 0.0,
            samples: 64,
            in_count: 32,
            conditional: 0.5,
        })
        .collect();
    let sd = variance_of_product(&recs).sqrt();
    // (1/256 + 1/4)^5 - (1/4)^5
    let exact = ((1.0f64 / 256.0 + 0.25).powi(5) - 0.25f64.powi(5)).sqrt();
    assert!((sd - exact).abs() < 1e-15);
    assert!((sd - 0.008_87).abs() < 1e-5);
    assert!((nominal_variance(5, 64).sqrt() - sd).abs() < 1e-15);
}

#[test]
fn sample_count_inverts_the_nominal_variance() {
    let sd64 = nominal_variance(5, 64).sqrt();
    assert_eq!(adaptive_sample_count(sd64, 5, 10_000), (64, false));
    assert_eq!(adaptive_sample_count(0.5, 12, 10_000), (MIN_SAMPLES, false));
    assert_eq!(adaptive_sample_count(1e-9, 5, 500), (500, true));
    let mut last = usize::MAX;
    for i in 0..20 {
        let target = 0.001 * 1.3f64.powi(i);
        let (n, _) = adaptive_sample_count(target, 6, 100_000);
        assert!(n <= last);
        assert!(nominal_variance(6, n).sqrt() <= target);
        if n > MIN_SAMPLES {
            assert!(nominal_variance(6, n - 1).sqrt() > target);
        }
        last = n;
    }
}

#[test]
fn nesting_count_guess() {
    assert_eq!(estimate_nestings(1.0).unwrap(), 0);
    assert_eq!(estimate_nestings(0.0743).unwrap(), 4);
    assert_eq!(estimate_nestings(2f64.powi(-24)).unwrap(), 24);
    assert!(estimate_nestings(0.0).is_err());
    assert!(estimate_nestings(1.5).is_err());
}

#[test]
fn auto_sample_count_uses_a_pilot() {
    let cfg = HdrConfig {
        samples: SampleCount::Auto {
            target_std: 2e-4,
            expected_nestings: None,
            cap: 4096,
        },
        seed: 5,
        ..HdrConfig::default()
    };
    let r = hdr_estimate(&std_normal(1), &beyond(1, 3.0), &cfg).unwrap();
    assert!(r.samples_per_nesting > MIN_SAMPLES);
    assert!((r.probability - tail(3.0)).abs() <= 3.0 * r.std_dev);
}

#[test]
fn rejects_bad_config() {
    let g = std_normal(1);
    let d = beyond(1, 1.0);
    for cfg in [
        HdrConfig {
            thinning: 0,
            ..config(64, 0)
        },
        HdrConfig {
            ci_level: 1.0,
            ..config(64, 0)
        },
        config(1, 0),
    ] {
        assert!(matches!(
            hdr_estimate(&g, &d, &cfg).unwrap_err(),
            HdrError::InvalidConfig(_)
        ));
    }
}

#[test]
fn outside_domain_probability() {
    // P(x >= -1) - P(0 < x < 0.5) for x ~ N(0, 1).
    let exact = (1.0 - tail(1.0)) - (0.5 - tail(0.5));
    let domain = Domain::Outside {
        keep: Some(Polytope::from_box(&[-1.0], &[1e9]).unwrap()),
        avoid: UnionOfPolytopes::new(1, vec![Polytope::from_box(&[0.0], &[0.5]).unwrap()]).unwrap(),
    };
    let r = hdr_estimate(&std_normal(1), &domain, &config(256, 2)).unwrap();
    assert!(
        (r.probability - exact).abs() < 3.0 * r.std_dev.max(0.01),
        "{} vs {exact}",
        r.probability
    );
}
