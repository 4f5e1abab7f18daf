//! Multilevel splitting over elliptical slice sampling.
//!
//! A small probability `p(score >= 0)` is written as a product of
//! conditionals `p(L_k | L_{k-1})`, each close to one half. Level cutoffs
//! are the running median of the sampled scores; the last level is the
//! target `score >= 0`.

use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::ess::{sample_chain_with, Domain, EssError};
use crate::system::TrajectoryGaussian;

pub const MIN_SAMPLES: usize = 8;
pub const DEFAULT_MAX_NESTINGS: usize = 40;
const PILOT_SAMPLES: usize = 32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HdrError {
    #[error("no samples reached cutoff {cutoff} at nesting {nesting}")]
    NoSamplesInDomain {
        nesting: usize,
        cutoff: f64,
        records: Vec<NestingRecord>,
    },
    #[error("cutoff stopped increasing at nesting {nesting} ({cutoff}); the score is flat on the sampled set")]
    Stalled {
        nesting: usize,
        cutoff: f64,
        records: Vec<NestingRecord>,
    },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("probability guess must lie in (0, 1], got {0}")]
    InvalidProbability(f64),
    #[error(transparent)]
    Ess(#[from] EssError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SampleCount {
    Fixed(usize),
    /// Choose `n_k` so the nominal standard deviation meets `target_std`.
    /// Without `expected_nestings` a short pilot run estimates it.
    Auto {
        target_std: f64,
        expected_nestings: Option<usize>,
        cap: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct HdrConfig {
    pub samples: SampleCount,
    pub max_nestings: usize,
    pub ci_level: f64,
    pub thinning: usize,
    pub seed: u64,
    pub retain_samples: bool,
}

impl Default for HdrConfig {
    fn default() -> Self {
        Self {
            samples: SampleCount::Fixed(64),
            max_nestings: DEFAULT_MAX_NESTINGS,
            ci_level: 0.95,
            thinning: 4,
            seed: 0,
            retain_samples: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NestingRecord {
    /// 1-based level index.
    pub index: usize,
    /// Score cutoff of this level; 0 on the final level.
    pub cutoff: f64,
    pub samples: usize,
    pub in_count: usize,
    pub conditional: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerificationResult {
    pub probability: f64,
    pub variance: f64,
    pub std_dev: f64,
    pub ci: (f64, f64),
    pub ci_level: f64,
    pub nestings: Vec<NestingRecord>,
    /// Final-level samples with score >= 0.
    pub samples: Vec<Vec<f64>>,
    pub wall_time: Duration,
    /// The nesting cap was hit; `probability` bounds the target from above.
    pub upper_bound_only: bool,
    /// Requested accuracy needed more samples than the cap allowed.
    pub sample_cap_hit: bool,
    pub samples_per_nesting: usize,
}

impl VerificationResult {
    fn exact(p: f64, ci_level: f64, started: Instant) -> Self {
        Self {
            probability: p,
            variance: 0.0,
            std_dev: 0.0,
            ci: (p, p),
            ci_level,
            nestings: Vec::new(),
            samples: Vec::new(),
            wall_time: started.elapsed(),
            upper_bound_only: false,
            sample_cap_hit: false,
            samples_per_nesting: 0,
        }
    }
}

/// `∏(Var p_k + p_k²) − ∏ p_k²` with `Var p_k = p_k(1 − p_k)/n_k`.
pub fn variance_of_product(records: &[NestingRecord]) -> f64 {
    let (with_var, means) = records.iter().fold((1.0, 1.0), |(a, b), r| {
        let p = r.conditional;
        let var = p * (1.0 - p) / r.samples as f64;
        (a * (var + p * p), b * p * p)
    });
    (with_var - means).max(0.0)
}

/// Nominal variance with every conditional at one half.
pub fn nominal_variance(nestings: usize, samples: usize) -> f64 {
    let k = nestings as i32;
    (0.25 / samples as f64 + 0.25).powi(k) - 0.25f64.powi(k)
}

/// Smallest `n >= MIN_SAMPLES` whose nominal standard deviation over
/// `nestings` levels is at most `target_std`. The flag is set when `cap`
/// was not enough.
pub fn adaptive_sample_count(target_std: f64, nestings: usize, cap: usize) -> (usize, bool) {
    let cap = cap.max(MIN_SAMPLES);
    let ok = |n: usize| nominal_variance(nestings, n).sqrt() <= target_std;
    if ok(MIN_SAMPLES) {
        return (MIN_SAMPLES, false);
    }
    if !ok(cap) {
        return (cap, true);
    }
    let (mut lo, mut hi) = (MIN_SAMPLES, cap);
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if ok(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    (hi, false)
}

/// `⌈−log₂ p⌉`.
pub fn estimate_nestings(p: f64) -> Result<usize, HdrError> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(HdrError::InvalidProbability(p));
    }
    Ok((-p.log2()).ceil().max(0.0) as usize)
}

fn median(scores: &[f64]) -> f64 {
    let mut s = scores.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        // midpoint so no sample sits on the cutoff
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn stream_rng(seed: u64, nesting: usize, chain: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((nesting as u64) << 32) | chain as u64);
    rng
}

/// Derives an independent seed, for callers running many estimates.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn validate(config: &HdrConfig) -> Result<(), HdrError> {
    let bad = |m: &str| Err(HdrError::InvalidConfig(m.to_string()));
    if config.thinning == 0 {
        return bad("thinning must be at least 1");
    }
    if config.max_nestings == 0 {
        return bad("nesting cap must be at least 1");
    }
    if !(config.ci_level > 0.0 && config.ci_level < 1.0) {
        return bad("confidence level must lie in (0, 1)");
    }
    match config.samples {
        SampleCount::Fixed(n) if n < 2 => bad("need at least 2 samples per nesting"),
        SampleCount::Auto { target_std, .. } if !(target_std > 0.0) => {
            bad("target standard deviation must be positive")
        }
        _ => Ok(()),
    }
}

/// Estimates `p(score(x) >= 0)` for `x ~ gaussian`.
pub fn hdr_estimate(
    gaussian: &TrajectoryGaussian,
    domain: &Domain,
    config: &HdrConfig,
) -> Result<VerificationResult, HdrError> {
    let started = Instant::now();
    validate(config)?;
    domain.check(gaussian)?;
    match domain {
        Domain::Everywhere => return Ok(VerificationResult::exact(1.0, config.ci_level, started)),
        Domain::Polytopes(u) if u.is_empty() => {
            return Ok(VerificationResult::exact(0.0, config.ci_level, started))
        }
        _ => {}
    }
    if gaussian.is_degenerate() {
        let p = if domain.score(gaussian.mean().as_slice()) >= 0.0 {
            1.0
        } else {
            0.0
        };
        return Ok(VerificationResult::exact(p, config.ci_level, started));
    }

    let (n, cap_hit) = match config.samples {
        SampleCount::Fixed(n) => (n, false),
        SampleCount::Auto {
            target_std,
            expected_nestings,
            cap,
        } => {
            let k = match expected_nestings {
                Some(k) => k,
                None => {
                    let pilot = HdrConfig {
                        samples: SampleCount::Fixed(PILOT_SAMPLES),
                        seed: derive_seed(config.seed, u64::MAX),
                        retain_samples: false,
                        ..config.clone()
                    };
                    let r = run(gaussian, domain, &pilot, PILOT_SAMPLES)?;
                    if r.probability > 0.0 {
                        estimate_nestings(r.probability)?
                    } else {
                        config.max_nestings
                    }
                }
            };
            adaptive_sample_count(target_std, k, cap)
        }
    };
    let mut result = run(gaussian, domain, config, n)?;
    result.sample_cap_hit = cap_hit;
    result.wall_time = started.elapsed();
    Ok(result)
}

fn run(
    gaussian: &TrajectoryGaussian,
    domain: &Domain,
    config: &HdrConfig,
    n: usize,
) -> Result<VerificationResult, HdrError> {
    let started = Instant::now();
    let mut rng = stream_rng(config.seed, 0, 0);
    let mut samples: Vec<Vec<f64>> = (0..n).map(|_| gaussian.sample(&mut rng)).collect();
    let mut scores: Vec<f64> = samples.iter().map(|x| domain.score(x)).collect();
    let mut records: Vec<NestingRecord> = Vec::new();
    let mut previous = f64::NEG_INFINITY;
    let mut upper_bound_only = false;

    loop {
        let index = records.len() + 1;
        let m = median(&scores);
        let cutoff = if m >= 0.0 { 0.0 } else { m };
        let in_count = scores.iter().filter(|s| **s >= cutoff).count();
        records.push(NestingRecord {
            index,
            cutoff,
            samples: n,
            in_count,
            conditional: in_count as f64 / n as f64,
        });
        if cutoff == 0.0 {
            break;
        }
        if in_count == 0 {
            return Err(HdrError::NoSamplesInDomain {
                nesting: index,
                cutoff,
                records,
            });
        }
        if !(cutoff > previous) {
            return Err(HdrError::Stalled {
                nesting: index,
                cutoff,
                records,
            });
        }
        if index == config.max_nestings {
            upper_bound_only = true;
            break;
        }
        previous = cutoff;

        let seeds: Vec<&Vec<f64>> = samples
            .iter()
            .zip(&scores)
            .filter(|(_, s)| **s >= cutoff)
            .map(|(x, _)| x)
            .collect();
        let chains = seeds.len().min(n);
        let oracle = domain.at_level(cutoff);
        let batches: Vec<Vec<Vec<f64>>> = (0..chains)
            .into_par_iter()
            .map(|c| {
                let count = n / chains + usize::from(c < n % chains);
                let mut rng = stream_rng(config.seed, index, c);
                sample_chain_with(
                    seeds[c],
                    count,
                    gaussian,
                    &oracle,
                    config.thinning,
                    &mut rng,
                )
            })
            .collect::<Result<_, _>>()?;
        samples = batches.into_iter().flatten().collect();
        scores = samples.iter().map(|x| domain.score(x)).collect();
    }

    let probability: f64 = records.iter().map(|r| r.conditional).product();
    let variance = variance_of_product(&records);
    let std_dev = variance.sqrt();
    let z = Normal::new(0.0, 1.0)
        .expect("standard normal")
        .inverse_cdf(0.5 + 0.5 * config.ci_level);
    let ci = (
        (probability - z * std_dev).max(0.0),
        (probability + z * std_dev).min(1.0),
    );
    let retained = if config.retain_samples && !upper_bound_only {
        samples
            .into_iter()
            .zip(&scores)
            .filter(|(_, s)| **s >= 0.0)
            .map(|(x, _)| x)
            .collect()
    } else {
        Vec::new()
    };
    Ok(VerificationResult {
        probability,
        variance,
        std_dev,
        ci,
        ci_level: config.ci_level,
        nestings: records,
        samples: retained,
        wall_time: started.elapsed(),
        upper_bound_only,
        sample_cap_hit: false,
        samples_per_nesting: n,
    })
}

#[cfg(test)]
mod tests;
