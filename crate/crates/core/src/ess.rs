//! Elliptical slice sampling from a trajectory Gaussian restricted to a
//! polytope union or to a robustness level set.
//!
//! Each step draws an auxiliary point, intersects the ellipse through the
//! current point with the domain in closed form and picks an angle
//! uniformly over the active arc length. There is no shrinking bracket
//! and no retry.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geometry::{
    active_arcs_outside, active_arcs_union, arcs_from_roots, wrap_angle, Ellipse, EllipseArcs,
    GeometryError, Harmonic, Polytope, UnionOfPolytopes,
};
use crate::stl::{CompiledFormula, StlFormula};
use crate::system::TrajectoryGaussian;

/// Slack when re-checking that the current point lies in the domain; the
/// previous step's output can miss the boundary by rounding.
const MEMBERSHIP_SLACK: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EssError {
    #[error("current point is outside the domain (score {score}, level {level})")]
    CurrentOutside { score: f64, level: f64 },
    #[error("domain dimension {domain} does not match Gaussian dimension {gaussian}")]
    DimensionMismatch { domain: usize, gaussian: usize },
    #[error("formula horizon {horizon} exceeds the {steps} trajectory steps")]
    HorizonTooLong { horizon: usize, steps: usize },
    #[error("thinning must be at least 1")]
    ZeroThinning,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// The set being sampled, scored so that level sets nest.
#[derive(Debug, Clone)]
pub enum Domain {
    Everywhere,
    /// Score is the largest member margin, so level `-γ` shifts every face
    /// outward by `γ`.
    Polytopes(UnionOfPolytopes),
    Stl {
        formula: CompiledFormula,
        state_dim: usize,
    },
    /// Inside `keep` (when given) and outside every member of `avoid`.
    /// Score is `min(keep margin, -avoid score)`.
    Outside {
        keep: Option<Polytope>,
        avoid: UnionOfPolytopes,
    },
}

impl Domain {
    pub fn stl(formula: &StlFormula, state_dim: usize) -> Self {
        Domain::Stl {
            formula: CompiledFormula::new(formula),
            state_dim,
        }
    }

    pub fn score(&self, x: &[f64]) -> f64 {
        match self {
            Domain::Everywhere => f64::INFINITY,
            Domain::Polytopes(u) => u.score(x),
            Domain::Stl { formula, state_dim } => formula.robustness(x, *state_dim),
            Domain::Outside { keep, avoid } => {
                let k = keep.as_ref().map_or(f64::INFINITY, |p| p.margin(x));
                k.min(-avoid.score(x))
            }
        }
    }

    pub fn check(&self, gaussian: &TrajectoryGaussian) -> Result<(), EssError> {
        match self {
            Domain::Everywhere => Ok(()),
            Domain::Polytopes(u) => {
                if u.dim() == gaussian.dim() {
                    Ok(())
                } else {
                    Err(EssError::DimensionMismatch {
                        domain: u.dim(),
                        gaussian: gaussian.dim(),
                    })
                }
            }
            Domain::Stl { formula, state_dim } => {
                if *state_dim != gaussian.state_dim() {
                    return Err(EssError::DimensionMismatch {
                        domain: *state_dim,
                        gaussian: gaussian.state_dim(),
                    });
                }
                if formula.horizon() > gaussian.steps() {
                    return Err(EssError::HorizonTooLong {
                        horizon: formula.horizon(),
                        steps: gaussian.steps(),
                    });
                }
                Ok(())
            }
            Domain::Outside { keep, avoid } => {
                let found = keep.as_ref().map_or(avoid.dim(), Polytope::dim);
                if found == gaussian.dim() && avoid.dim() == gaussian.dim() {
                    Ok(())
                } else {
                    Err(EssError::DimensionMismatch {
                        domain: found,
                        gaussian: gaussian.dim(),
                    })
                }
            }
        }
    }

    pub fn at_level(&self, level: f64) -> DomainOracle<'_> {
        DomainOracle {
            domain: self,
            level,
        }
    }
}

/// `{x : score(x) >= level}`.
#[derive(Debug, Clone, Copy)]
pub struct DomainOracle<'a> {
    pub domain: &'a Domain,
    pub level: f64,
}

impl DomainOracle<'_> {
    pub fn score(&self, x: &[f64]) -> f64 {
        self.domain.score(x)
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.score(x) >= self.level
    }

    pub fn active_arcs(&self, ellipse: &Ellipse) -> Result<EllipseArcs, EssError> {
        match self.domain {
            Domain::Everywhere => Ok(EllipseArcs::full()),
            Domain::Polytopes(u) => Ok(active_arcs_union(ellipse, u, -self.level)?),
            Domain::Stl { formula, state_dim } => {
                stl_active_arcs(ellipse, formula, *state_dim, self.level)
            }
            Domain::Outside { keep, avoid } => Ok(active_arcs_outside(
                ellipse,
                keep.as_ref(),
                avoid,
                self.level,
            )?),
        }
    }
}

/// Active arcs of `{robustness >= level}` on the ellipse.
///
/// Robustness is a min/max composition of the predicate values, so it can
/// only cross `level` where some `a_i'x_t + b_i` equals `±level`. Between
/// consecutive candidates the sign of `robustness - level` is constant and
/// one probe per arc decides it.
pub fn stl_active_arcs(
    ellipse: &Ellipse,
    formula: &CompiledFormula,
    state_dim: usize,
    level: f64,
) -> Result<EllipseArcs, EssError> {
    let harmonics = predicate_harmonics(ellipse, formula, state_dim);
    let roots = candidates(&harmonics, level);
    let mut values = vec![0.0; harmonics.len()];
    Ok(arcs_from_roots(roots, |theta| {
        let (s, c) = theta.sin_cos();
        for (val, h) in values.iter_mut().zip(&harmonics) {
            *val = h.alpha * c + h.beta * s + h.c;
        }
        formula.robustness_from_values(&values) >= level
    })?)
}

/// Sorted angles in `[0, 2π)` where some predicate value equals `±level`.
pub fn stl_root_candidates(
    ellipse: &Ellipse,
    formula: &CompiledFormula,
    state_dim: usize,
    level: f64,
) -> Vec<f64> {
    let mut roots = candidates(&predicate_harmonics(ellipse, formula, state_dim), level);
    for r in roots.iter_mut() {
        *r = wrap_angle(*r);
    }
    roots.sort_by(f64::total_cmp);
    roots.dedup();
    roots
}

/// `a_i'x_t(θ) + b_i` for every `t < horizon`, row-major like the value table.
fn predicate_harmonics(
    ellipse: &Ellipse,
    formula: &CompiledFormula,
    state_dim: usize,
) -> Vec<Harmonic> {
    let np = formula.predicates().len();
    let horizon = formula.horizon();
    let mut harmonics = Vec::with_capacity(horizon * np);
    for t in 0..horizon {
        let block = t * state_dim..(t + 1) * state_dim;
        let (m, u, v) = (
            &ellipse.center[block.clone()],
            &ellipse.u[block.clone()],
            &ellipse.v[block],
        );
        for p in formula.predicates() {
            harmonics.push(Harmonic {
                alpha: dot(p.coeffs(), u),
                beta: dot(p.coeffs(), v),
                c: dot(p.coeffs(), m) + p.offset(),
            });
        }
    }
    harmonics
}

fn candidates(harmonics: &[Harmonic], level: f64) -> Vec<f64> {
    let mut roots = Vec::with_capacity(4 * harmonics.len());
    for h in harmonics {
        for shift in [-level, level] {
            Harmonic {
                c: h.c + shift,
                ..*h
            }
            .roots()
            .push_into(&mut roots);
        }
    }
    roots
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// What one step did.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepTrace {
    /// Number of angle draws; always 1.
    pub theta_draws: usize,
    pub theta: f64,
    pub active_measure: f64,
}

/// Moves along the ellipse through `current` and `nu` (both absolute
/// points) to the angle at `fraction` of the active arc length.
pub fn slice_move(
    current: &[f64],
    nu: &[f64],
    mean: &[f64],
    oracle: &DomainOracle<'_>,
    fraction: f64,
) -> Result<(Vec<f64>, StepTrace), EssError> {
    let score = oracle.score(current);
    if !(score >= oracle.level - MEMBERSHIP_SLACK * oracle.level.abs().max(1.0)) {
        return Err(EssError::CurrentOutside {
            score,
            level: oracle.level,
        });
    }
    let ellipse = Ellipse::new(
        mean.to_vec(),
        current.iter().zip(mean).map(|(x, m)| x - m).collect(),
        nu.iter().zip(mean).map(|(x, m)| x - m).collect(),
    );
    let arcs = oracle.active_arcs(&ellipse)?;
    let theta = arcs.angle_at(fraction);
    let trace = StepTrace {
        theta_draws: 1,
        theta,
        active_measure: arcs.measure(),
    };
    Ok((ellipse.point(theta), trace))
}

pub fn ess_step<R: Rng + ?Sized>(
    current: &[f64],
    gaussian: &TrajectoryGaussian,
    oracle: &DomainOracle<'_>,
    rng: &mut R,
) -> Result<(Vec<f64>, StepTrace), EssError> {
    let mut nu = gaussian.sample(rng);
    if nu == current && !gaussian.is_degenerate() {
        nu = gaussian.sample(rng);
    }
    let fraction: f64 = rng.random();
    slice_move(current, &nu, gaussian.mean().as_slice(), oracle, fraction)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChainConfig {
    pub thinning: usize,
    pub seed: u64,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            thinning: 4,
            seed: 0,
        }
    }
}

/// Runs `count * thinning` steps from `start` and keeps every
/// `thinning`-th output.
pub fn sample_chain(
    start: &[f64],
    count: usize,
    gaussian: &TrajectoryGaussian,
    oracle: &DomainOracle<'_>,
    config: &ChainConfig,
) -> Result<Vec<Vec<f64>>, EssError> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    sample_chain_with(start, count, gaussian, oracle, config.thinning, &mut rng)
}

pub fn sample_chain_with<R: Rng + ?Sized>(
    start: &[f64],
    count: usize,
    gaussian: &TrajectoryGaussian,
    oracle: &DomainOracle<'_>,
    thinning: usize,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>, EssError> {
    if thinning == 0 {
        return Err(EssError::ZeroThinning);
    }
    oracle.domain.check(gaussian)?;
    let mut out = Vec::with_capacity(count);
    let mut current = start.to_vec();
    for _ in 0..count {
        for _ in 0..thinning {
            current = ess_step(&current, gaussian, oracle, rng)?.0;
        }
        out.push(current.clone());
    }
    Ok(out)
}
