//! Turns a scenario into library objects.

use anyhow::{anyhow, bail, ensure, Context, Result};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use stl_ess::ess::Domain;
use stl_ess::geometry::{
    build_reach_avoid_domains, lift_predicate, Goal, Halfspace, Polytope, ReachAvoidSpec,
    SatisfactionDomain, UnionOfPolytopes,
};
use stl_ess::mixture::{MixtureComponent, MixtureNoiseModel, WeightSource};
use stl_ess::stl::{parse_formula, parse_formula_with, StlError, StlFormula};
use stl_ess::system::{
    build_trajectory_gaussian, lqr_gain, propagate_expected_state, Feedback, GaussianNoise,
    InitialState, LtvSystem, NoiseSpec, RangeMeasurement, Schedule, TrajectoryGaussian,
};

use crate::scenario::*;

fn matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    ensure!(rows.iter().all(|row| row.len() == c), "{what}: ragged rows");
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

fn vector(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

fn gaussian(block: &GaussianBlock, dim: usize, what: &str) -> Result<GaussianNoise> {
    let dim = block.dim.unwrap_or(dim);
    let mean = block
        .mean
        .as_deref()
        .map_or_else(|| DVector::zeros(dim), vector);
    ensure!(
        mean.len() == dim,
        "{what}: mean has {} entries, expected {dim}",
        mean.len()
    );
    let cov = match (&block.std, &block.cov) {
        (Some(_), Some(_)) => bail!("{what}: give `std` or `cov`, not both"),
        (Some(s), None) => {
            ensure!(
                s.len() == dim,
                "{what}: std has {} entries, expected {dim}",
                s.len()
            );
            DMatrix::from_diagonal(&DVector::from_iterator(dim, s.iter().map(|x| x * x)))
        }
        (None, Some(c)) => matrix(c, what)?,
        (None, None) => DMatrix::zeros(dim, dim),
    };
    Ok(GaussianNoise::constant(mean, cov))
}

fn numeric_vector(n: &Numeric, what: &str) -> Result<DVector<f64>> {
    match n {
        Numeric::Scalar(x) => Ok(DVector::from_element(1, *x)),
        Numeric::Vector(v) => Ok(vector(v)),
        Numeric::Matrix(_) => bail!("{what}: expected a number or a list"),
    }
}

fn mixture(block: &MixtureBlock) -> Result<MixtureNoiseModel> {
    let components = block
        .components
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let what = format!("mixture component {i}");
            let mean = numeric_vector(&c.mu, &what)?;
            let cov = match &c.sigma {
                Numeric::Matrix(m) => matrix(m, &what)?,
                other => {
                    let s = numeric_vector(other, &what)?;
                    DMatrix::from_diagonal(&s.map(|x| x * x))
                }
            };
            Ok(MixtureComponent { mean, cov })
        })
        .collect::<Result<Vec<_>>>()?;
    let weights = match &block.weights {
        WeightsBlock::Static(w) => WeightSource::Static(w.clone()),
        WeightsBlock::Markov { transition, init } => WeightSource::Markov {
            transition: matrix(transition, "mixture transition matrix")?,
            initial: init.clone(),
        },
    };
    Ok(MixtureNoiseModel::new(components, weights)?)
}

fn noise(block: Option<&NoiseModelBlock>, dim: usize, what: &str) -> Result<NoiseSpec> {
    Ok(match block {
        None => GaussianNoise::zero(dim).into(),
        Some(NoiseModelBlock::Gaussian(g)) => gaussian(g, dim, what)?.into(),
        Some(NoiseModelBlock::Mixture(m)) => {
            NoiseSpec::Mixture(mixture(m).with_context(|| what.to_string())?)
        }
    })
}

fn polytope(block: &PolytopeBlock, dim: usize) -> Result<Polytope> {
    match block {
        PolytopeBlock::HRep { a, b } => {
            ensure!(
                a.len() == b.len(),
                "polytope: {} rows in A but {} entries in b",
                a.len(),
                b.len()
            );
            ensure!(
                a.iter().all(|r| r.len() == dim),
                "polytope rows must have {dim} entries"
            );
            Ok(Polytope::from_rows(a, b)?)
        }
        PolytopeBlock::Box { bounds } => {
            let idx: Vec<usize> = bounds
                .indices
                .clone()
                .unwrap_or_else(|| (0..bounds.lo.len()).collect());
            ensure!(
                idx.len() == bounds.lo.len() && idx.len() == bounds.hi.len(),
                "box: indices, lo and hi must have equal length"
            );
            let mut faces = Vec::with_capacity(2 * idx.len());
            for (k, &i) in idx.iter().enumerate() {
                ensure!(
                    i < dim,
                    "box index {i} out of range for state dimension {dim}"
                );
                ensure!(bounds.lo[k] <= bounds.hi[k], "box: lo > hi on index {i}");
                let mut up = vec![0.0; dim];
                up[i] = 1.0;
                faces.push(Halfspace::new(up.clone(), -bounds.lo[k])?);
                up[i] = -1.0;
                faces.push(Halfspace::new(up, bounds.hi[k])?);
            }
            Ok(Polytope::new(faces)?)
        }
    }
}

/// `[a, b]` seconds to an inclusive step window, rounded outward.
pub fn seconds_to_steps(a: f64, b: f64, dt: f64) -> (usize, usize) {
    let eps = 1e-9;
    let lo = (a / dt + eps).floor().max(0.0) as usize;
    let hi = (b / dt - eps).ceil().max(0.0) as usize;
    (lo, hi.max(lo))
}

#[derive(Debug, Clone)]
pub enum Spec {
    Formula(StlFormula),
    ReachAvoid(ReachAvoidSpec),
}

#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum Model {
    Dynamics {
        sys: LtvSystem,
        range: Option<RangeMeasurement>,
    },
    Fitted(TrajectoryGaussian),
}

/// On-disk form of a fitted trajectory Gaussian.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FittedFile {
    pub state_dim: usize,
    pub steps: usize,
    pub samples: usize,
    pub ridge: f64,
    pub mean: Vec<f64>,
    pub cov: Matrix,
}

impl FittedFile {
    pub fn from_gaussian(g: &TrajectoryGaussian, samples: usize, ridge: f64) -> Self {
        let cov = g.cov();
        Self {
            state_dim: g.state_dim(),
            steps: g.steps(),
            samples,
            ridge,
            mean: g.mean().iter().copied().collect(),
            cov: (0..cov.nrows())
                .map(|i| cov.row(i).iter().copied().collect())
                .collect(),
        }
    }

    pub fn to_gaussian(&self) -> Result<TrajectoryGaussian> {
        let dim = self.state_dim * self.steps;
        ensure!(
            self.mean.len() == dim,
            "fitted mean has {} entries, expected {dim}",
            self.mean.len()
        );
        let cov = matrix(&self.cov, "fitted covariance")?;
        ensure!(
            cov.shape() == (dim, dim),
            "fitted covariance must be {dim}x{dim}"
        );
        Ok(TrajectoryGaussian::new(
            vector(&self.mean),
            cov,
            self.state_dim,
        )?)
    }
}

/// Everything a command needs.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub file: ScenarioFile,
    pub steps: usize,
    pub state_dim: usize,
    pub model: Model,
    pub spec: Spec,
}

impl Prepared {
    pub fn new(file: ScenarioFile) -> Result<Self> {
        let sc = &file.scenario;
        let steps = sc.steps();
        ensure!(steps >= 1, "horizon / dt rounds to zero states");
        let (model, state_dim) = build_model(&file, steps)?;
        let spec = build_spec(sc, state_dim, steps)?;
        Ok(Self {
            file,
            steps,
            state_dim,
            model,
            spec,
        })
    }

    pub fn scenario(&self) -> &Scenario {
        &self.file.scenario
    }

    pub fn dimension(&self) -> usize {
        self.state_dim * self.steps
    }

    pub fn has_mixture(&self) -> bool {
        match &self.model {
            Model::Dynamics { sys, .. } => {
                matches!(sys.measurement_noise, NoiseSpec::Mixture(_))
                    || matches!(sys.process_noise, NoiseSpec::Mixture(_))
            }
            Model::Fitted(_) => false,
        }
    }

    /// The trajectory Gaussian; fails for mixture noise.
    pub fn gaussian(&self) -> Result<TrajectoryGaussian> {
        match &self.model {
            Model::Dynamics { sys, .. } => Ok(build_trajectory_gaussian(sys, self.steps)?),
            Model::Fitted(g) => Ok(g.clone()),
        }
    }

    /// `φ` or `¬φ`. Reach-avoid specs go through their equivalent formula.
    pub fn formula(&self, negate: bool) -> Result<StlFormula> {
        let f = match &self.spec {
            Spec::Formula(f) => f.clone(),
            Spec::ReachAvoid(ra) => ra
                .to_formula()
                .ok_or_else(|| anyhow!("reach-avoid block is empty"))?,
        };
        Ok(if negate { StlFormula::not(f) } else { f })
    }

    /// Domain for `verify`.
    pub fn stl_domain(&self, negate: bool) -> Result<Domain> {
        Ok(Domain::stl(&self.formula(negate)?, self.state_dim))
    }

    /// Failure union, or with `negate` the satisfaction set.
    pub fn reach_avoid_domain(&self, negate: bool) -> Result<Domain> {
        let Spec::ReachAvoid(ra) = &self.spec else {
            bail!("scenario has no reach_avoid block");
        };
        if ra.state_dim().is_none() {
            return Ok(match negate {
                true => Domain::Everywhere,
                false => Domain::Polytopes(UnionOfPolytopes::empty(self.dimension())),
            });
        }
        let domains = build_reach_avoid_domains(ra, self.scenario().estimator.enumeration_cap)?;
        if !negate {
            return Ok(Domain::Polytopes(domains.failure()));
        }
        Ok(match domains.satisfaction {
            SatisfactionDomain::Explicit(u) => Domain::Polytopes(u),
            // The formula has no midpoint constraints.
            SatisfactionDomain::DelegateToStl if ra.midpoints => Domain::Outside {
                keep: ra
                    .init
                    .as_ref()
                    .map(|p| {
                        let faces = p
                            .predicates()
                            .iter()
                            .map(|q| lift_predicate(q, 0, self.steps))
                            .collect::<Result<Vec<_>, _>>()?;
                        Polytope::new(faces)
                    })
                    .transpose()?,
                avoid: domains.failure(),
            },
            SatisfactionDomain::DelegateToStl => self.stl_domain(false)?,
        })
    }

    /// Domain whose probability the spec's natural command reports.
    pub fn natural_domain(&self, negate: bool) -> Result<Domain> {
        match &self.spec {
            Spec::Formula(_) => self.stl_domain(negate),
            Spec::ReachAvoid(_) => self.reach_avoid_domain(negate),
        }
    }

    pub fn empty_failure_union(&self) -> bool {
        matches!(&self.spec, Spec::ReachAvoid(_))
            && matches!(self.reach_avoid_domain(false), Ok(Domain::Polytopes(ref u)) if u.is_empty())
    }
}

fn build_model(file: &ScenarioFile, steps: usize) -> Result<(Model, usize)> {
    let s = &file.scenario.system;
    if let Some(path) = &s.fitted {
        let full = file.base_dir().join(path);
        let text = std::fs::read(&full).with_context(|| format!("reading {}", full.display()))?;
        let fitted: FittedFile =
            serde_json::from_slice(&text).with_context(|| format!("parsing {}", full.display()))?;
        ensure!(
            fitted.steps == steps,
            "fitted Gaussian has {} steps, scenario horizon gives {steps}",
            fitted.steps
        );
        let g = fitted.to_gaussian()?;
        return Ok((Model::Fitted(g), fitted.state_dim));
    }
    let a = matrix(s.a.as_ref().expect("checked"), "A")?;
    let b = matrix(s.b.as_ref().expect("checked"), "B")?;
    let n = a.nrows();
    ensure!(a.ncols() == n, "A must be square");
    ensure!(b.nrows() == n, "B must have {n} rows");
    let range = match &s.measurement {
        Some(MeasurementBlock::Range { indices }) => {
            ensure!(s.c.is_none(), "give either C or a range measurement");
            ensure!(indices.iter().all(|i| *i < n), "range indices out of range");
            Some(RangeMeasurement {
                indices: indices.clone(),
                state_dim: n,
            })
        }
        None => None,
    };
    let c = match (&s.c, &range) {
        (Some(c), _) => matrix(c, "C")?,
        (None, Some(_)) => DMatrix::zeros(1, n),
        (None, None) => DMatrix::identity(n, n),
    };
    let q = c.nrows();
    let ctrl = s.controller.as_ref().expect("checked");
    let k = match (&ctrl.gain, &ctrl.lqr) {
        (Some(k), None) => matrix(k, "K")?,
        (None, Some(l)) => lqr_gain(&a, &b, &matrix(&l.q, "Q")?, &matrix(&l.r, "R")?)?,
        _ => bail!("controller needs exactly one of K and lqr"),
    };
    let x0 = match &s.x0 {
        None => InitialState::Fixed(DVector::zeros(n)),
        Some(InitialBlock::Fixed(v)) => InitialState::Fixed(vector(v)),
        Some(InitialBlock::Gaussian(g)) => {
            let g = gaussian(g, n, "x0")?;
            InitialState::Gaussian {
                mean: g.mean.at(0).clone(),
                cov: g.cov.at(0).clone(),
            }
        }
    };
    ensure!(x0.mean().len() == n, "x0 must have {n} entries");
    let feedback = match &ctrl.observer {
        None => Feedback::Direct {
            gain: k.clone().into(),
        },
        Some(o) => Feedback::Observer {
            gain: k.clone().into(),
            observer_gain: matrix(&o.gain, "L")?.into(),
            initial_estimate: vector(&o.initial_estimate),
        },
    };
    let m = b.ncols();
    let reference: Schedule<DVector<f64>> = match &s.reference {
        None => DVector::zeros(m).into(),
        Some(ReferenceBlock::Input(r)) => vector(r).into(),
        Some(ReferenceBlock::States(xs)) => {
            Schedule::Varying(xs.iter().map(|x| &k * vector(x)).collect())
        }
        Some(ReferenceBlock::FreeMotion(start)) => {
            ensure!(start.len() == n, "free_motion start must have {n} entries");
            let mut x = vector(start);
            let mut out = Vec::with_capacity(steps);
            for _ in 0..steps {
                out.push(&k * &x);
                x = &a * x;
            }
            Schedule::Varying(out)
        }
    };
    let noise_block = &file.scenario.noise;
    let mut sys = LtvSystem {
        a: a.into(),
        b: b.into(),
        c: c.into(),
        feedback,
        reference,
        dt: s.dt,
        x0,
        measurement_noise: noise(noise_block.measurement.as_ref(), q, "measurement noise")?,
        process_noise: noise(noise_block.process.as_ref(), n, "process noise")?,
    };
    if let Some(r) = &range {
        let cs = propagate_expected_state(&sys, &|t, x| r.jacobian(t, x), steps)?;
        sys.c = Schedule::Varying(cs);
    }
    sys.validate(steps)?;
    Ok((Model::Dynamics { sys, range }, n))
}

fn build_spec(sc: &Scenario, dim: usize, steps: usize) -> Result<Spec> {
    let dt = sc.system.dt;
    if let Some(text) = &sc.spec.formula {
        let f = match sc.spec.time_unit {
            TimeUnit::Steps => parse_formula(text, dim)?,
            TimeUnit::Seconds => {
                let conv = |a: f64, b: f64| -> Result<(usize, usize), StlError> {
                    if !(a >= 0.0 && b >= a && b.is_finite()) {
                        return Err(StlError::InvalidInterval {
                            start: a,
                            end: b,
                            reason: "bounds must satisfy 0 <= a <= b".into(),
                        });
                    }
                    Ok(seconds_to_steps(a, b, dt))
                };
                parse_formula_with(text, dim, &conv)?
            }
        };
        let h = stl_ess::stl::horizon(&f);
        ensure!(
            h <= steps,
            "formula needs {h} states but the horizon gives only {steps}; shorten the formula's intervals or lengthen system.horizon"
        );
        return Ok(Spec::Formula(f));
    }
    let ra = sc.spec.reach_avoid.as_ref().expect("checked");
    let goals = ra
        .goals
        .iter()
        .map(|g| {
            let (lo, hi) = seconds_to_steps(g.window[0], g.window[1], dt);
            let hi = hi.min(steps - 1);
            Ok(Goal {
                region: polytope(&g.region, dim)?,
                window: (lo.min(hi), hi),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Spec::ReachAvoid(ReachAvoidSpec {
        init: ra.init.as_ref().map(|p| polytope(p, dim)).transpose()?,
        unsafe_sets: ra
            .unsafe_sets
            .iter()
            .map(|p| polytope(p, dim))
            .collect::<Result<_>>()?,
        goals,
        steps,
        midpoints: ra.midpoints,
    }))
}
