//! Plain Monte-Carlo baseline: simulate the loop, count satisfying runs.

use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::ess::Domain;
use crate::system::{simulate_closed_loop, LtvSystem, MeasurementFn, NoiseSampler, SystemError};

const CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct McResult {
    pub probability: f64,
    /// `p(1 - p)/n`.
    pub variance: f64,
    pub std_dev: f64,
    pub runs: usize,
    pub hits: usize,
    pub satisfied: Option<Vec<bool>>,
    pub wall_time: Duration,
}

/// Fraction of `runs` simulated trajectories with `score >= 0`.
///
/// Mixture noise channels draw a fresh mode sequence per run. With
/// `measurement`, the loop is closed on that function instead of `C_t x`.
pub fn srs_estimate(
    sys: &LtvSystem,
    steps: usize,
    domain: &Domain,
    runs: usize,
    seed: u64,
    measurement: Option<MeasurementFn<'_>>,
    retain_flags: bool,
) -> Result<McResult, SystemError> {
    let started = Instant::now();
    if runs == 0 {
        return Err(SystemError::TooFewSamples {
            found: 0,
            needed: 1,
        });
    }
    let sampler = NoiseSampler::new(sys, steps)?;
    let chunks = runs.div_ceil(CHUNK);
    let flags: Vec<Vec<bool>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c as u64);
            let count = CHUNK.min(runs - c * CHUNK);
            (0..count)
                .map(|_| {
                    let draws = sampler.draw(&mut rng)?;
                    let s = simulate_closed_loop(sys, &draws, steps, measurement)?;
                    Ok(domain.score(s.as_slice()) >= 0.0)
                })
                .collect::<Result<Vec<bool>, SystemError>>()
        })
        .collect::<Result<_, _>>()?;
    let flags: Vec<bool> = flags.into_iter().flatten().collect();
    let hits = flags.iter().filter(|f| **f).count();
    let p = hits as f64 / runs as f64;
    let variance = p * (1.0 - p) / runs as f64;
    Ok(McResult {
        probability: p,
        variance,
        std_dev: variance.sqrt(),
        runs,
        hits,
        satisfied: retain_flags.then_some(flags),
        wall_time: started.elapsed(),
    })
}

#[cfg(test)]
mod tests;
