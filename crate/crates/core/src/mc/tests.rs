use nalgebra::{dmatrix, dvector};
use statrs::function::erf::erfc;

use super::*;
use crate::geometry::{Halfspace, Polytope, UnionOfPolytopes};
use crate::mixture::{MixtureComponent, MixtureNoiseModel, WeightSource};
use crate::system::{Feedback, GaussianNoise, InitialState, NoiseSpec};

fn scalar_loop(noise: NoiseSpec) -> LtvSystem {
    LtvSystem {
        a: dmatrix![1.0].into(),
        b: dmatrix![1.0].into(),
        c: dmatrix![1.0].into(),
        feedback: Feedback::Direct {
            gain: dmatrix![1.0].into(),
        },
        reference: dvector![0.0].into(),
        dt: 1.0,
        x0: InitialState::Fixed(dvector![1.0]),
        measurement_noise: noise,
        process_noise: GaussianNoise::zero(1).into(),
    }
}

fn second_state_at_least(c: f64) -> Domain {
    let h = Halfspace::new(vec![0.0, 1.0], -c).unwrap();
    Domain::Polytopes(UnionOfPolytopes::new(2, vec![Polytope::new(vec![h]).unwrap()]).unwrap())
}

#[test]
fn noiseless_loop_is_certain() {
    let sys = scalar_loop(GaussianNoise::zero(1).into());
    let r = srs_estimate(&sys, 2, &second_state_at_least(0.0), 1000, 0, None, true).unwrap();
    assert_eq!(r.probability, 1.0);
    assert_eq!(r.variance, 0.0);
    assert_eq!(r.satisfied.unwrap().len(), 1000);
}

#[test]
fn single_step_tail() {
    let exact = 0.5 * erfc(2.0 / std::f64::consts::SQRT_2);
    assert!((exact - 0.02275).abs() < 1e-5);
    let sys = scalar_loop(GaussianNoise::white(&[1.0]).into());
    let r = srs_estimate(
        &sys,
        2,
        &second_state_at_least(2.0),
        100_000,
        11,
        None,
        false,
    )
    .unwrap();
    assert!(
        (r.probability - exact).abs() <= 4.0 * r.std_dev,
        "{} vs {exact}",
        r.probability
    );
    assert_eq!(r.hits, (r.probability * 1e5).round() as usize);
}

#[test]
fn thread_count_does_not_change_the_result() {
    let sys = scalar_loop(GaussianNoise::white(&[1.0]).into());
    let d = second_state_at_least(1.0);
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| {
                srs_estimate(&sys, 2, &d, 3000, 5, None, true)
                    .unwrap()
                    .satisfied
            })
    };
    assert_eq!(run(1), run(4));
}

#[test]
fn mixture_noise_is_resampled_per_run() {
    let comp = |m: f64| MixtureComponent {
        mean: dvector![m],
        cov: dmatrix![0.25],
    };
    let model = MixtureNoiseModel::new(
        vec![comp(0.0), comp(-1.0)],
        WeightSource::Static(vec![0.5, 0.5]),
    )
    .unwrap();
    let sys = scalar_loop(NoiseSpec::Mixture(model));
    let phi = |x: f64| 0.5 * erfc(-x / std::f64::consts::SQRT_2);
    let exact = 0.5 * phi(-2.0) + 0.5 * phi(0.0);
    let r = srs_estimate(&sys, 2, &second_state_at_least(1.0), 50_000, 3, None, false).unwrap();
    assert!((r.probability - exact).abs() <= 4.0 * r.std_dev);
}

#[test]
fn nonlinear_measurement_replaces_the_output_map() {
    let sys = scalar_loop(GaussianNoise::zero(1).into());
    // y = 2x gives x1 = 1 - 2 = -1
    let doubled = |_t: usize, x: &nalgebra::DVector<f64>| x * 2.0;
    let r = srs_estimate(
        &sys,
        2,
        &second_state_at_least(-1.0),
        10,
        0,
        Some(&doubled),
        false,
    )
    .unwrap();
    assert_eq!(r.probability, 1.0);
    let r = srs_estimate(
        &sys,
        2,
        &second_state_at_least(-0.5),
        10,
        0,
        Some(&doubled),
        false,
    )
    .unwrap();
    assert_eq!(r.probability, 0.0);
}

#[test]
fn zero_runs_is_an_error() {
    let sys = scalar_loop(GaussianNoise::zero(1).into());
    assert!(srs_estimate(&sys, 2, &Domain::Everywhere, 0, 0, None, false).is_err());
}
