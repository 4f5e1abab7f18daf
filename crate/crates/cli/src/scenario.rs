//! Scenario file schema.
//!
//! A scenario is one JSON document. Times are in seconds unless a field says
//! otherwise; matrices are row-major nested arrays.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

pub type Matrix = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub system: SystemBlock,
    #[serde(default)]
    pub noise: NoiseBlock,
    pub spec: SpecBlock,
    #[serde(default)]
    pub estimator: EstimatorBlock,
    #[serde(default)]
    pub outputs: OutputsBlock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemBlock {
    pub dt: f64,
    /// Seconds; the trajectory has `round(horizon / dt)` states.
    pub horizon: f64,
    #[serde(default, rename = "A")]
    pub a: Option<Matrix>,
    #[serde(default, rename = "B")]
    pub b: Option<Matrix>,
    #[serde(default, rename = "C")]
    pub c: Option<Matrix>,
    #[serde(default)]
    pub measurement: Option<MeasurementBlock>,
    #[serde(default)]
    pub controller: Option<ControllerBlock>,
    #[serde(default)]
    pub reference: Option<ReferenceBlock>,
    #[serde(default)]
    pub x0: Option<InitialBlock>,
    /// Trajectory Gaussian written by `fit`, relative to the scenario file.
    #[serde(default)]
    pub fitted: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum MeasurementBlock {
    /// `y = ||x[indices]||`, linearized along the expected trajectory.
    Range { indices: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerBlock {
    #[serde(default, rename = "K")]
    pub gain: Option<Matrix>,
    #[serde(default)]
    pub lqr: Option<LqrBlock>,
    #[serde(default)]
    pub observer: Option<ObserverBlock>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LqrBlock {
    #[serde(rename = "Q")]
    pub q: Matrix,
    #[serde(rename = "R")]
    pub r: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObserverBlock {
    #[serde(rename = "L")]
    pub gain: Matrix,
    pub initial_estimate: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ReferenceBlock {
    /// Constant `r`.
    Input(Vec<f64>),
    /// `r_t = K x_ref(t)` for the listed states.
    States(Matrix),
    /// `r_t = K x_ref(t)` with `x_ref(t+1) = A x_ref(t)` from the given start.
    FreeMotion(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialBlock {
    Fixed(Vec<f64>),
    Gaussian(GaussianBlock),
}

/// Mean defaults to zero. Give either `std` (independent components) or
/// `cov`; neither means zero covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianBlock {
    #[serde(default)]
    pub mean: Option<Vec<f64>>,
    #[serde(default)]
    pub std: Option<Vec<f64>>,
    #[serde(default)]
    pub cov: Option<Matrix>,
    #[serde(default)]
    pub dim: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseBlock {
    #[serde(default)]
    pub measurement: Option<NoiseModelBlock>,
    #[serde(default)]
    pub process: Option<NoiseModelBlock>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseModelBlock {
    Gaussian(GaussianBlock),
    Mixture(MixtureBlock),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureBlock {
    pub components: Vec<ComponentBlock>,
    pub weights: WeightsBlock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentBlock {
    pub mu: Numeric,
    /// A number or list is a standard deviation per component; a nested
    /// list is a covariance matrix.
    pub sigma: Numeric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Numeric {
    Scalar(f64),
    Vector(Vec<f64>),
    Matrix(Matrix),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum WeightsBlock {
    Static(Vec<f64>),
    Markov {
        #[serde(rename = "P")]
        transition: Matrix,
        init: Vec<f64>,
    },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeUnit {
    #[default]
    Seconds,
    Steps,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecBlock {
    #[serde(default)]
    pub formula: Option<String>,
    /// Unit of the formula's interval bounds.
    #[serde(default)]
    pub time_unit: TimeUnit,
    #[serde(default)]
    pub reach_avoid: Option<ReachAvoidBlock>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReachAvoidBlock {
    #[serde(default)]
    pub init: Option<PolytopeBlock>,
    #[serde(default, rename = "unsafe")]
    pub unsafe_sets: Vec<PolytopeBlock>,
    #[serde(default)]
    pub goals: Vec<GoalBlock>,
    #[serde(default)]
    pub midpoints: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoalBlock {
    pub region: PolytopeBlock,
    /// Seconds, inclusive.
    pub window: [f64; 2],
}

/// `A x + b >= 0` rowwise, or an axis-aligned box over some state indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PolytopeBlock {
    HRep {
        #[serde(rename = "A")]
        a: Matrix,
        b: Vec<f64>,
    },
    Box {
        #[serde(rename = "box")]
        bounds: BoxBlock,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxBlock {
    /// Defaults to the leading `lo.len()` state components.
    #[serde(default)]
    pub indices: Option<Vec<usize>>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SamplesBlock {
    Fixed(usize),
    Auto(AutoTag),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AutoTag {
    Auto,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorBlock {
    #[serde(default = "default_samples")]
    pub samples: SamplesBlock,
    #[serde(default)]
    pub target_std: Option<f64>,
    #[serde(default)]
    pub expected_nestings: Option<usize>,
    #[serde(default = "default_sample_cap")]
    pub sample_cap: usize,
    #[serde(default = "default_max_nestings")]
    pub max_nestings: usize,
    #[serde(default = "default_ci_level")]
    pub ci_level: f64,
    #[serde(default = "default_thinning")]
    pub thinning: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_outer")]
    pub outer_iterations: usize,
    #[serde(default = "default_mc_runs")]
    pub mc_runs: usize,
    #[serde(default = "default_cap")]
    pub enumeration_cap: usize,
}

fn default_samples() -> SamplesBlock {
    SamplesBlock::Fixed(64)
}
fn default_sample_cap() -> usize {
    10_000
}
fn default_max_nestings() -> usize {
    stl_ess::hdr::DEFAULT_MAX_NESTINGS
}
fn default_ci_level() -> f64 {
    0.95
}
fn default_thinning() -> usize {
    4
}
fn default_outer() -> usize {
    50
}
fn default_mc_runs() -> usize {
    2400
}
fn default_cap() -> usize {
    stl_ess::geometry::DEFAULT_ENUMERATION_CAP
}

impl Default for EstimatorBlock {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputsBlock {
    #[serde(default)]
    pub dir: Option<PathBuf>,
    /// Export the final-nesting trajectories as CSV.
    #[serde(default)]
    pub trajectories: bool,
}

/// A parsed scenario with the bytes it came from.
#[derive(Debug, Clone)]
pub struct ScenarioFile {
    pub scenario: Scenario,
    pub bytes: Vec<u8>,
    pub path: PathBuf,
}

impl ScenarioFile {
    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        let scenario =
            Self::parse(&bytes).with_context(|| format!("parsing {}", path.display()))?;
        Ok(Self {
            scenario,
            bytes,
            path: path.to_path_buf(),
        })
    }

    pub fn parse(bytes: &[u8]) -> Result<Scenario> {
        let s: Scenario = serde_json::from_slice(bytes)?;
        s.check_shape()?;
        Ok(s)
    }

    pub fn from_scenario(scenario: Scenario) -> Result<Self> {
        scenario.check_shape()?;
        let bytes = serde_json::to_vec_pretty(&scenario)?;
        Ok(Self {
            scenario,
            bytes,
            path: PathBuf::from("."),
        })
    }

    pub fn base_dir(&self) -> &Path {
        self.path.parent().unwrap_or(Path::new("."))
    }
}

impl Scenario {
    fn check_shape(&self) -> Result<()> {
        if !(self.system.dt > 0.0 && self.system.dt.is_finite()) {
            bail!("system.dt must be positive");
        }
        if !(self.system.horizon > 0.0 && self.system.horizon.is_finite()) {
            bail!("system.horizon must be positive");
        }
        match (&self.spec.formula, &self.spec.reach_avoid) {
            (Some(_), None) | (None, Some(_)) => {}
            _ => bail!("spec needs exactly one of `formula` and `reach_avoid`"),
        }
        if self.system.fitted.is_some() {
            let s = &self.system;
            if s.a.is_some()
                || s.b.is_some()
                || s.c.is_some()
                || s.controller.is_some()
                || s.x0.is_some()
            {
                bail!("a fitted system takes no dynamics fields");
            }
        } else if self.system.a.is_none()
            || self.system.b.is_none()
            || self.system.controller.is_none()
        {
            bail!("system needs A, B and a controller (or `fitted`)");
        }
        Ok(())
    }

    /// Number of trajectory states.
    pub fn steps(&self) -> usize {
        (self.system.horizon / self.system.dt).round() as usize
    }
}
