//! Gaussian-mixture noise with static, Markov-modulated or externally
//! chosen modes, and the outer estimator that conditions on sampled mode
//! sequences.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::ess::Domain;
use crate::hdr::{derive_seed, hdr_estimate, HdrConfig, HdrError, VerificationResult};
use crate::system::{
    build_trajectory_gaussian, GaussianNoise, LtvSystem, NoiseSpec, Schedule, SystemError,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MixtureError {
    #[error("mixture needs at least one component")]
    NoComponents,
    #[error("component {index} has dimension {found}, expected {expected}")]
    ComponentDimension {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("component {index} covariance is not symmetric positive semidefinite")]
    ComponentCovariance { index: usize },
    #[error("invalid weights: {0}")]
    InvalidWeights(String),
    #[error("transition row {row} sums to {sum}")]
    TransitionRow { row: usize, sum: f64 },
    #[error("mode chooser returned an invalid distribution at step {step}: {reason}")]
    InvalidChoice { step: usize, reason: String },
    #[error("mode {mode} out of range for {components} components")]
    ModeOutOfRange { mode: usize, components: usize },
    #[error("marginal mean is unavailable for externally chosen modes")]
    NoClosedFormMean,
    #[error("need at least 2 outer iterations, got {0}")]
    TooFewIterations(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureComponent {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Next-mode distribution given the modes drawn so far.
pub type ModeChooser = Arc<dyn Fn(&[usize]) -> Vec<f64> + Send + Sync>;

#[derive(Clone)]
pub enum WeightSource {
    Static(Vec<f64>),
    Markov {
        transition: DMatrix<f64>,
        initial: Vec<f64>,
    },
    BlackBox(ModeChooser),
}

impl fmt::Debug for WeightSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WeightSource::Static(w) => f.debug_tuple("Static").field(w).finish(),
            WeightSource::Markov {
                transition,
                initial,
            } => f
                .debug_struct("Markov")
                .field("transition", transition)
                .field("initial", initial)
                .finish(),
            WeightSource::BlackBox(_) => f.write_str("BlackBox(..)"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ModeSequence(Vec<usize>);

impl ModeSequence {
    pub fn new(modes: Vec<usize>) -> Self {
        Self(modes)
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct MixtureNoiseModel {
    components: Vec<MixtureComponent>,
    weights: WeightSource,
}

fn check_distribution(p: &[f64], m: usize) -> Result<(), String> {
    if p.len() != m {
        return Err(format!("{} weights for {m} components", p.len()));
    }
    if p.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err("negative or non-finite weight".into());
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(format!("weights sum to {sum}"));
    }
    Ok(())
}

fn categorical<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> usize {
    if p.len() == 1 {
        return 0;
    }
    WeightedIndex::new(p)
        .expect("validated weights")
        .sample(rng)
}

impl MixtureNoiseModel {
    pub fn new(
        components: Vec<MixtureComponent>,
        weights: WeightSource,
    ) -> Result<Self, MixtureError> {
        let Some(first) = components.first() else {
            return Err(MixtureError::NoComponents);
        };
        let dim = first.mean.len();
        for (index, c) in components.iter().enumerate() {
            if c.mean.len() != dim || c.cov.shape() != (dim, dim) {
                return Err(MixtureError::ComponentDimension {
                    index,
                    expected: dim,
                    found: c.mean.len(),
                });
            }
            let sym =
                (&c.cov - c.cov.transpose()).amax() <= 1e-9 * c.cov.amax().max(f64::MIN_POSITIVE);
            let psd =
                dim == 0 || c.cov.clone().symmetric_eigenvalues().min() >= -1e-9 * c.cov.amax();
            if !sym || !psd {
                return Err(MixtureError::ComponentCovariance { index });
            }
        }
        let m = components.len();
        match &weights {
            WeightSource::Static(w) => {
                check_distribution(w, m).map_err(MixtureError::InvalidWeights)?
            }
            WeightSource::Markov {
                transition,
                initial,
            } => {
                check_distribution(initial, m).map_err(MixtureError::InvalidWeights)?;
                if transition.shape() != (m, m) {
                    return Err(MixtureError::InvalidWeights(format!(
                        "transition matrix is {:?}, expected {m}x{m}",
                        transition.shape()
                    )));
                }
                for (row, r) in transition.row_iter().enumerate() {
                    let sum = r.sum();
                    if (sum - 1.0).abs() > 1e-12 || r.iter().any(|p| *p < 0.0) {
                        return Err(MixtureError::TransitionRow { row, sum });
                    }
                }
            }
            WeightSource::BlackBox(_) => {}
        }
        Ok(Self {
            components,
            weights,
        })
    }

    pub fn components(&self) -> &[MixtureComponent] {
        &self.components
    }

    pub fn weights(&self) -> &WeightSource {
        &self.weights
    }

    pub fn dim(&self) -> usize {
        self.components[0].mean.len()
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn sample_mode_sequence<R: Rng + ?Sized>(
        &self,
        steps: usize,
        rng: &mut R,
    ) -> Result<ModeSequence, MixtureError> {
        let m = self.components.len();
        let mut modes = Vec::with_capacity(steps);
        match &self.weights {
            WeightSource::Static(w) => {
                for _ in 0..steps {
                    modes.push(categorical(w, rng));
                }
            }
            WeightSource::Markov {
                transition,
                initial,
            } => {
                let rows: Vec<Vec<f64>> = transition
                    .row_iter()
                    .map(|r| r.iter().copied().collect())
                    .collect();
                for t in 0..steps {
                    let next = if t == 0 {
                        categorical(initial, rng)
                    } else {
                        categorical(&rows[modes[t - 1]], rng)
                    };
                    modes.push(next);
                }
            }
            WeightSource::BlackBox(choose) => {
                for step in 0..steps {
                    let p = choose(&modes);
                    check_distribution(&p, m)
                        .map_err(|reason| MixtureError::InvalidChoice { step, reason })?;
                    modes.push(categorical(&p, rng));
                }
            }
        }
        Ok(ModeSequence(modes))
    }

    /// Per-step Gaussian noise for a fixed mode sequence.
    pub fn conditional_noise_spec(
        &self,
        modes: &ModeSequence,
    ) -> Result<GaussianNoise, MixtureError> {
        let m = self.components.len();
        if let Some(&mode) = modes.0.iter().find(|&&k| k >= m) {
            return Err(MixtureError::ModeOutOfRange {
                mode,
                components: m,
            });
        }
        let pick = |k: usize| &self.components[k];
        Ok(GaussianNoise {
            mean: Schedule::Varying(modes.0.iter().map(|&k| pick(k).mean.clone()).collect()),
            cov: Schedule::Varying(modes.0.iter().map(|&k| pick(k).cov.clone()).collect()),
        })
    }

    /// Mode probabilities at step `t`.
    pub fn marginal_weights(&self, t: usize) -> Result<Vec<f64>, MixtureError> {
        match &self.weights {
            WeightSource::Static(w) => Ok(w.clone()),
            WeightSource::Markov {
                transition,
                initial,
            } => {
                let mut p = DVector::from_column_slice(initial).transpose();
                for _ in 0..t {
                    p = &p * transition;
                }
                Ok(p.iter().copied().collect())
            }
            WeightSource::BlackBox(_) => Err(MixtureError::NoClosedFormMean),
        }
    }

    pub fn marginal_mean(&self, t: usize) -> Result<DVector<f64>, MixtureError> {
        let w = self.marginal_weights(t)?;
        Ok(self
            .components
            .iter()
            .zip(&w)
            .fold(DVector::zeros(self.dim()), |acc, (c, p)| acc + &c.mean * *p))
    }
}

#[derive(Debug, Error)]
pub enum IterationError {
    #[error(transparent)]
    System(#[from] SystemError),
    #[error(transparent)]
    Hdr(#[from] HdrError),
    #[error(transparent)]
    Mixture(#[from] MixtureError),
}

#[derive(Debug, Error)]
pub enum MixtureEstimateError {
    #[error(transparent)]
    Mixture(#[from] MixtureError),
    #[error("outer iteration {index} failed ({} others completed): {source}", completed.len())]
    Iteration {
        index: usize,
        completed: Vec<MixtureIteration>,
        #[source]
        source: IterationError,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureIteration {
    pub measurement_modes: Option<ModeSequence>,
    pub process_modes: Option<ModeSequence>,
    pub result: VerificationResult,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureResult {
    pub probability: f64,
    /// `between_variance + within_variance`.
    pub variance: f64,
    pub std_dev: f64,
    /// Sample variance of the per-sequence estimates over `N`.
    pub between_variance: f64,
    /// Mean reported inner variance over `N`.
    pub within_variance: f64,
    pub ci: (f64, f64),
    pub iterations: Vec<MixtureIteration>,
}

/// The system with each mixture channel replaced by its Gaussian
/// conditional on the given modes.
pub fn condition_on_modes(
    sys: &LtvSystem,
    measurement_modes: Option<&ModeSequence>,
    process_modes: Option<&ModeSequence>,
) -> Result<LtvSystem, MixtureError> {
    let mut out = sys.clone();
    if let (NoiseSpec::Mixture(m), Some(modes)) = (&sys.measurement_noise, measurement_modes) {
        out.measurement_noise = NoiseSpec::Gaussian(m.conditional_noise_spec(modes)?);
    }
    if let (NoiseSpec::Mixture(m), Some(modes)) = (&sys.process_noise, process_modes) {
        out.process_noise = NoiseSpec::Gaussian(m.conditional_noise_spec(modes)?);
    }
    Ok(out)
}

fn one_iteration(
    sys: &LtvSystem,
    steps: usize,
    domain: &Domain,
    config: &HdrConfig,
    index: usize,
) -> Result<MixtureIteration, IterationError> {
    let seed = derive_seed(config.seed, index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let transitions = steps.saturating_sub(1);
    let draw = |spec: &NoiseSpec, rng: &mut ChaCha8Rng| match spec {
        NoiseSpec::Mixture(m) => m.sample_mode_sequence(transitions, rng).map(Some),
        NoiseSpec::Gaussian(_) => Ok(None),
    };
    let measurement_modes = draw(&sys.measurement_noise, &mut rng)?;
    let process_modes = draw(&sys.process_noise, &mut rng)?;
    let conditioned = condition_on_modes(sys, measurement_modes.as_ref(), process_modes.as_ref())?;
    let gaussian = build_trajectory_gaussian(&conditioned, steps)?;
    let inner = HdrConfig {
        seed: derive_seed(seed, 1),
        ..config.clone()
    };
    let result = hdr_estimate(&gaussian, domain, &inner)?;
    Ok(MixtureIteration {
        measurement_modes,
        process_modes,
        result,
    })
}

/// Averages single-Gaussian estimates over `outer` sampled mode sequences.
pub fn mixture_estimate(
    sys: &LtvSystem,
    steps: usize,
    domain: &Domain,
    outer: usize,
    config: &HdrConfig,
) -> Result<MixtureResult, MixtureEstimateError> {
    if outer < 2 {
        return Err(MixtureError::TooFewIterations(outer).into());
    }
    let outcomes: Vec<Result<MixtureIteration, IterationError>> = (0..outer)
        .into_par_iter()
        .map(|i| one_iteration(sys, steps, domain, config, i))
        .collect();
    if let Some(index) = outcomes.iter().position(Result::is_err) {
        let mut completed = Vec::new();
        let mut source = None;
        for (i, o) in outcomes.into_iter().enumerate() {
            match o {
                Ok(it) => completed.push(it),
                Err(e) if i == index => source = Some(e),
                Err(_) => {}
            }
        }
        return Err(MixtureEstimateError::Iteration {
            index,
            completed,
            source: source.expect("failed iteration"),
        });
    }
    let iterations: Vec<MixtureIteration> =
        outcomes.into_iter().map(|o| o.expect("checked")).collect();
    let n = outer as f64;
    let mean = iterations.iter().map(|i| i.result.probability).sum::<f64>() / n;
    let spread = iterations
        .iter()
        .map(|i| (i.result.probability - mean).powi(2))
        .sum::<f64>()
        / (n - 1.0);
    let between_variance = spread / n;
    let within_variance = iterations.iter().map(|i| i.result.variance).sum::<f64>() / n / n;
    let variance = between_variance + within_variance;
    let std_dev = variance.sqrt();
    let z = Normal::new(0.0, 1.0)
        .expect("standard normal")
        .inverse_cdf(0.5 + 0.5 * config.ci_level);
    Ok(MixtureResult {
        probability: mean,
        variance,
        std_dev,
        between_variance,
        within_variance,
        ci: ((mean - z * std_dev).max(0.0), (mean + z * std_dev).min(1.0)),
        iterations,
    })
}
