//! Closed-loop linear time-varying systems and the Gaussian they induce
//! over stacked state trajectories.
//!
//! The loop is
//!
//! ```text
//! x[t+1] = A[t] x[t] + B[t] u[t] + w[t]
//! y[t]   = C[t] x[t] + v[t]
//! ```
//!
//! closed either directly on the measurement, `u = r - K y`, or through a
//! Luenberger observer, `u = r - K x̂` with
//! `x̂[t+1] = A x̂ + B u + L (y - C x̂)`.

mod lqr;


use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::mixture::{MixtureError, MixtureNoiseModel, ModeSequence};
use crate::stl::StackedSignal;

pub use lqr::{lqr_gain, spectral_radius};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SystemError {
    #[error("{what}: expected {expected:?}, found {found:?}")]
    DimensionMismatch {
        what: &'static str,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("{what} has {len} entries but {needed} are required")]
    ScheduleTooShort {
        what: &'static str,
        len: usize,
        needed: usize,
    },
    #[error("{what} is not positive semidefinite (smallest eigenvalue {min_eigenvalue:e})")]
    NotPsd {
        what: &'static str,
        min_eigenvalue: f64,
    },
    #[error("{what} is not symmetric")]
    NotSymmetric { what: &'static str },
    #[error("time step must be positive, got {0}")]
    NonPositiveDt(f64),
    #[error("trajectory needs at least one step")]
    ZeroSteps,
    #[error("{0} noise is a mixture; condition it on a mode sequence first")]
    UnresolvedMixture(&'static str),
    #[error("Riccati iteration did not converge in {iterations} iterations")]
    NoConvergence { iterations: usize },
    #[error("closed loop is not stable (spectral radius {spectral_radius})")]
    Unstable { spectral_radius: f64 },
    #[error("LQR cost R is not positive definite")]
    SingularInputCost,
    #[error("range is {distance:e} at step {t}; the Jacobian is undefined")]
    SingularDistance { t: usize, distance: f64 },
    #[error("measurement callback failed at step {t}: {message}")]
    Callback { t: usize, message: String },
    #[error("expected-state propagation needs direct measurement feedback")]
    ObserverNotSupported,
    #[error("need at least {needed} trajectories, got {found}")]
    TooFewSamples { found: usize, needed: usize },
    #[error("trajectory {index} has {found} values, expected {expected}")]
    RaggedTrajectories {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("covariance factorization failed even after regularization")]
    Factorization,
    #[error(transparent)]
    Mixture(#[from] MixtureError),
}

/// A value that is either fixed or given per time step.
#[derive(Debug, Clone, PartialEq)]
pub enum Schedule<T> {
    Constant(T),
    Varying(Vec<T>),
}

impl<T> Schedule<T> {
    pub fn at(&self, t: usize) -> &T {
        match self {
            Schedule::Constant(v) => v,
            Schedule::Varying(v) => &v[t],
        }
    }

    pub fn covers(&self, steps: usize) -> bool {
        match self {
            Schedule::Constant(_) => true,
            Schedule::Varying(v) => v.len() >= steps,
        }
    }

    fn len_hint(&self) -> usize {
        match self {
            Schedule::Constant(_) => usize::MAX,
            Schedule::Varying(v) => v.len(),
        }
    }

    fn first(&self) -> Option<&T> {
        match self {
            Schedule::Constant(v) => Some(v),
            Schedule::Varying(v) => v.first(),
        }
    }

    fn entries(&self, steps: usize) -> impl Iterator<Item = &T> {
        (0..steps.min(self.len_hint())).map(move |t| self.at(t))
    }
}

impl<T> From<T> for Schedule<T> {
    fn from(v: T) -> Self {
        Schedule::Constant(v)
    }
}

/// Per-step Gaussian noise on one channel.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianNoise {
    pub mean: Schedule<DVector<f64>>,
    pub cov: Schedule<DMatrix<f64>>,
}

impl GaussianNoise {
    pub fn zero(dim: usize) -> Self {
        Self::constant(DVector::zeros(dim), DMatrix::zeros(dim, dim))
    }

    pub fn constant(mean: DVector<f64>, cov: DMatrix<f64>) -> Self {
        Self {
            mean: Schedule::Constant(mean),
            cov: Schedule::Constant(cov),
        }
    }

    /// Zero-mean, independent channels with the given standard deviations.
    pub fn white(std_devs: &[f64]) -> Self {
        let var = DVector::from_iterator(std_devs.len(), std_devs.iter().map(|s| s * s));
        Self::constant(DVector::zeros(std_devs.len()), DMatrix::from_diagonal(&var))
    }

    pub fn dim(&self) -> usize {
        self.mean.first().map_or(0, |m| m.len())
    }

    fn validate(&self, what: &'static str, dim: usize, steps: usize) -> Result<(), SystemError> {
        check_len(what, &self.mean, steps)?;
        check_len(what, &self.cov, steps)?;
        for m in self.mean.entries(steps) {
            check_shape(what, m.len(), 1, dim, 1)?;
        }
        for c in self.cov.entries(steps) {
            check_shape(what, c.nrows(), c.ncols(), dim, dim)?;
            check_psd(what, c)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub enum NoiseSpec {
    Gaussian(GaussianNoise),
    Mixture(MixtureNoiseModel),
}

impl NoiseSpec {
    pub fn dim(&self) -> usize {
        match self {
            NoiseSpec::Gaussian(g) => g.dim(),
            NoiseSpec::Mixture(m) => m.dim(),
        }
    }

    fn gaussian(&self, what: &'static str) -> Result<&GaussianNoise, SystemError> {
        match self {
            NoiseSpec::Gaussian(g) => Ok(g),
            NoiseSpec::Mixture(_) => Err(SystemError::UnresolvedMixture(what)),
        }
    }

    /// Mean of the noise at step `t`, marginalizing over mixture modes.
    pub fn expected(&self, t: usize) -> Result<DVector<f64>, SystemError> {
        match self {
            NoiseSpec::Gaussian(g) => Ok(g.mean.at(t).clone()),
            NoiseSpec::Mixture(m) => Ok(m.marginal_mean(t)?),
        }
    }
}

impl From<GaussianNoise> for NoiseSpec {
    fn from(g: GaussianNoise) -> Self {
        NoiseSpec::Gaussian(g)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Feedback {
    /// `u = r - K y`, with `K` of shape m×q.
    Direct { gain: Schedule<DMatrix<f64>> },
    /// `u = r - K x̂`, with `K` m×n and observer gain `L` n×q.
    Observer {
        gain: Schedule<DMatrix<f64>>,
        observer_gain: Schedule<DMatrix<f64>>,
        initial_estimate: DVector<f64>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum InitialState {
    Fixed(DVector<f64>),
    Gaussian {
        mean: DVector<f64>,
        cov: DMatrix<f64>,
    },
}

impl InitialState {
    pub fn mean(&self) -> &DVector<f64> {
        match self {
            InitialState::Fixed(x) => x,
            InitialState::Gaussian { mean, .. } => mean,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LtvSystem {
    pub a: Schedule<DMatrix<f64>>,
    pub b: Schedule<DMatrix<f64>>,
    pub c: Schedule<DMatrix<f64>>,
    pub feedback: Feedback,
    pub reference: Schedule<DVector<f64>>,
    pub dt: f64,
    pub x0: InitialState,
    pub measurement_noise: NoiseSpec,
    pub process_noise: NoiseSpec,
}

fn check_len<T>(what: &'static str, s: &Schedule<T>, needed: usize) -> Result<(), SystemError> {
    if s.covers(needed) {
        Ok(())
    } else {
        Err(SystemError::ScheduleTooShort {
            what,
            len: s.len_hint(),
            needed,
        })
    }
}

fn check_shape(
    what: &'static str,
    r: usize,
    c: usize,
    er: usize,
    ec: usize,
) -> Result<(), SystemError> {
    if (r, c) == (er, ec) {
        Ok(())
    } else {
        Err(SystemError::DimensionMismatch {
            what,
            expected: (er, ec),
            found: (r, c),
        })
    }
}

fn check_psd(what: &'static str, m: &DMatrix<f64>) -> Result<(), SystemError> {
    let scale = m.amax().max(f64::MIN_POSITIVE);
    if (m - m.transpose()).amax() > 1e-9 * scale {
        return Err(SystemError::NotSymmetric { what });
    }
    if m.nrows() == 0 {
        return Ok(());
    }
    let eig = symmetrize(m).symmetric_eigenvalues();
    let (lo, hi) = (eig.min(), eig.max());
    if lo < -1e-9 * hi.abs().max(scale) {
        return Err(SystemError::NotPsd {
            what,
            min_eigenvalue: lo,
        });
    }
    Ok(())
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

impl LtvSystem {
    /// State, input and measurement dimensions.
    pub fn dims(&self) -> (usize, usize, usize) {
        let n = self.x0.mean().len();
        let m = self.b.first().map_or(0, |b| b.ncols());
        let q = self.c.first().map_or(0, |c| c.nrows());
        (n, m, q)
    }

    pub fn state_dim(&self) -> usize {
        self.x0.mean().len()
    }

    pub fn validate(&self, steps: usize) -> Result<(), SystemError> {
        if steps == 0 {
            return Err(SystemError::ZeroSteps);
        }
        if !(self.dt > 0.0) {
            return Err(SystemError::NonPositiveDt(self.dt));
        }
        let (n, m, q) = self.dims();
        let transitions = steps - 1;
        check_len("A", &self.a, transitions)?;
        check_len("B", &self.b, transitions)?;
        check_len("C", &self.c, transitions)?;
        check_len("reference", &self.reference, transitions)?;
        for a in self.a.entries(transitions) {
            check_shape("A", a.nrows(), a.ncols(), n, n)?;
        }
        for b in self.b.entries(transitions) {
            check_shape("B", b.nrows(), b.ncols(), n, m)?;
        }
        for c in self.c.entries(transitions) {
            check_shape("C", c.nrows(), c.ncols(), q, n)?;
        }
        for r in self.reference.entries(transitions) {
            check_shape("reference", r.len(), 1, m, 1)?;
        }
        match &self.feedback {
            Feedback::Direct { gain } => {
                check_len("K", gain, transitions)?;
                for k in gain.entries(transitions) {
                    check_shape("K", k.nrows(), k.ncols(), m, q)?;
                }
            }
            Feedback::Observer {
                gain,
                observer_gain,
                initial_estimate,
            } => {
                check_len("K", gain, transitions)?;
                check_len("L", observer_gain, transitions)?;
                for k in gain.entries(transitions) {
                    check_shape("K", k.nrows(), k.ncols(), m, n)?;
                }
                for l in observer_gain.entries(transitions) {
                    check_shape("L", l.nrows(), l.ncols(), n, q)?;
                }
                check_shape("initial estimate", initial_estimate.len(), 1, n, 1)?;
            }
        }
        if let InitialState::Gaussian { cov, .. } = &self.x0 {
            check_shape("x0 covariance", cov.nrows(), cov.ncols(), n, n)?;
            check_psd("x0 covariance", cov)?;
        }
        match &self.measurement_noise {
            NoiseSpec::Gaussian(g) => g.validate("measurement noise", q, transitions)?,
            NoiseSpec::Mixture(mx) => check_shape("measurement noise", mx.dim(), 1, q, 1)?,
        }
        match &self.process_noise {
            NoiseSpec::Gaussian(g) => g.validate("process noise", n, transitions)?,
            NoiseSpec::Mixture(mx) => check_shape("process noise", mx.dim(), 1, n, 1)?,
        }
        Ok(())
    }

    /// Closed-loop transition of the (possibly augmented) state at step `t`:
    /// `z' = M z + N_v v + N_w w + d`.
    fn closed_loop(&self, t: usize) -> LoopStep {
        let (a, b, c, r) = (
            self.a.at(t),
            self.b.at(t),
            self.c.at(t),
            self.reference.at(t),
        );
        let n = a.nrows();
        let br = b * r;
        match &self.feedback {
            Feedback::Direct { gain } => {
                let bk = b * gain.at(t);
                LoopStep {
                    m: a - &bk * c,
                    nv: -bk,
                    nw: DMatrix::identity(n, n),
                    d: br,
                }
            }
            Feedback::Observer {
                gain,
                observer_gain,
                ..
            } => {
                let bk = b * gain.at(t);
                let l = observer_gain.at(t);
                let lc = l * c;
                let mut m = DMatrix::zeros(2 * n, 2 * n);
                m.view_mut((0, 0), (n, n)).copy_from(a);
                m.view_mut((0, n), (n, n)).copy_from(&(-&bk));
                m.view_mut((n, 0), (n, n)).copy_from(&lc);
                m.view_mut((n, n), (n, n)).copy_from(&(a - &bk - &lc));
                let mut nv = DMatrix::zeros(2 * n, l.ncols());
                nv.view_mut((n, 0), (n, l.ncols())).copy_from(l);
                let mut nw = DMatrix::zeros(2 * n, n);
                nw.view_mut((0, 0), (n, n)).fill_with_identity();
                let mut d = DVector::zeros(2 * n);
                d.rows_mut(0, n).copy_from(&br);
                d.rows_mut(n, n).copy_from(&br);
                LoopStep { m, nv, nw, d }
            }
        }
    }

    fn initial_augmented(&self) -> DVector<f64> {
        let x0 = self.x0.mean();
        match &self.feedback {
            Feedback::Direct { .. } => x0.clone(),
            Feedback::Observer {
                initial_estimate, ..
            } => {
                let n = x0.len();
                let mut z = DVector::zeros(2 * n);
                z.rows_mut(0, n).copy_from(x0);
                z.rows_mut(n, n).copy_from(initial_estimate);
                z
            }
        }
    }

    pub fn with_measurement_noise(&self, noise: NoiseSpec) -> Self {
        Self {
            measurement_noise: noise,
            ..self.clone()
        }
    }

    pub fn with_process_noise(&self, noise: NoiseSpec) -> Self {
        Self {
            process_noise: noise,
            ..self.clone()
        }
    }
}

struct LoopStep {
    m: DMatrix<f64>,
    nv: DMatrix<f64>,
    nw: DMatrix<f64>,
    d: DVector<f64>,
}

/// Gaussian over `[x_0', ..., x_{steps-1}']'`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryGaussian {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    factor: DMatrix<f64>,
    state_dim: usize,
    steps: usize,
}

impl TrajectoryGaussian {
    /// Symmetrizes `cov` and factors it with a small relative ridge.
    pub fn new(
        mean: DVector<f64>,
        cov: DMatrix<f64>,
        state_dim: usize,
    ) -> Result<Self, SystemError> {
        let dim = mean.len();
        if state_dim == 0 || !dim.is_multiple_of(state_dim) || dim == 0 {
            return Err(SystemError::DimensionMismatch {
                what: "trajectory mean",
                expected: (state_dim.max(1), 1),
                found: (dim, 1),
            });
        }
        check_shape("trajectory covariance", cov.nrows(), cov.ncols(), dim, dim)?;
        let cov = symmetrize(&cov);
        check_psd("trajectory covariance", &cov)?;
        let factor = regularized_cholesky(&cov)?;
        Ok(Self {
            mean,
            cov,
            factor,
            state_dim,
            steps: dim / state_dim,
        })
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// Lower-triangular `L` with `L L' ≈ cov`.
    pub fn factor(&self) -> &DMatrix<f64> {
        &self.factor
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn is_degenerate(&self) -> bool {
        self.factor.iter().all(|v| *v == 0.0)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let z = DVector::from_iterator(
            self.dim(),
            (0..self.dim()).map(|_| rng.sample::<f64, _>(StandardNormal)),
        );
        let x = &self.mean + &self.factor * z;
        x.as_slice().to_vec()
    }
}

const RIDGE: f64 = 1e-12;

fn regularized_cholesky(cov: &DMatrix<f64>) -> Result<DMatrix<f64>, SystemError> {
    let dim = cov.nrows();
    let trace = cov.trace();
    if trace <= 0.0 {
        return Ok(DMatrix::zeros(dim, dim));
    }
    let mut ridge = RIDGE * trace / dim as f64;
    // escalate only if rounding pushed an eigenvalue below the first ridge
    for _ in 0..4 {
        let mut m = cov.clone();
        for i in 0..dim {
            m[(i, i)] += ridge;
        }
        if let Some(ch) = m.cholesky() {
            return Ok(ch.l());
        }
        ridge *= 100.0;
    }
    Err(SystemError::Factorization)
}

/// Exact trajectory Gaussian of the closed loop over `steps` states.
pub fn build_trajectory_gaussian(
    sys: &LtvSystem,
    steps: usize,
) -> Result<TrajectoryGaussian, SystemError> {
    sys.validate(steps)?;
    let v_noise = sys.measurement_noise.gaussian("measurement")?;
    let w_noise = sys.process_noise.gaussian("process")?;
    let (n, _, q) = sys.dims();
    let transitions = steps - 1;

    // ξ = [x0 (if random); v_0..v_{H-2}; w_0..w_{H-2}]
    let x0_cols = match sys.x0 {
        InitialState::Gaussian { .. } => n,
        InitialState::Fixed(_) => 0,
    };
    let v_off = x0_cols;
    let w_off = v_off + q * transitions;
    let n_xi = w_off + n * transitions;

    let mut z_mean = sys.initial_augmented();
    let nz = z_mean.len();
    let mut g = DMatrix::zeros(nz, n_xi);
    if x0_cols > 0 {
        g.view_mut((0, 0), (n, n)).fill_with_identity();
    }

    let mut mean = DVector::zeros(n * steps);
    let mut stacked = DMatrix::zeros(n * steps, n_xi);
    mean.rows_mut(0, n).copy_from(&z_mean.rows(0, n));
    stacked.view_mut((0, 0), (n, n_xi)).copy_from(&g.rows(0, n));

    for t in 0..transitions {
        let step = sys.closed_loop(t);
        z_mean = &step.m * &z_mean
            + &step.d
            + &step.nv * v_noise.mean.at(t)
            + &step.nw * w_noise.mean.at(t);
        g = &step.m * &g;
        g.view_mut((0, v_off + q * t), (nz, q)).copy_from(&step.nv);
        g.view_mut((0, w_off + n * t), (nz, n)).copy_from(&step.nw);
        mean.rows_mut((t + 1) * n, n).copy_from(&z_mean.rows(0, n));
        stacked
            .view_mut(((t + 1) * n, 0), (n, n_xi))
            .copy_from(&g.rows(0, n));
    }

    // Σ_ξ is block diagonal; multiply blockwise
    let mut weighted = DMatrix::zeros(n * steps, n_xi);
    let mut apply = |off: usize, cov: &DMatrix<f64>| {
        let k = cov.nrows();
        let block = stacked.columns(off, k) * cov;
        weighted.columns_mut(off, k).copy_from(&block);
    };
    if let InitialState::Gaussian { cov, .. } = &sys.x0 {
        apply(0, cov);
    }
    for t in 0..transitions {
        apply(v_off + q * t, v_noise.cov.at(t));
        apply(w_off + n * t, w_noise.cov.at(t));
    }
    let cov = weighted * stacked.transpose();
    TrajectoryGaussian::new(mean, cov, n)
}

/// One realization of every random input of the loop.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraws {
    pub x0: DVector<f64>,
    /// Measurement noise per transition.
    pub v: Vec<DVector<f64>>,
    /// Process noise per transition.
    pub w: Vec<DVector<f64>>,
}

impl NoiseDraws {
    pub fn zero(sys: &LtvSystem, steps: usize) -> Self {
        let (n, _, q) = sys.dims();
        let k = steps.saturating_sub(1);
        Self {
            x0: sys.x0.mean().clone(),
            v: vec![DVector::zeros(q); k],
            w: vec![DVector::zeros(n); k],
        }
    }
}

/// Maps `(t, x_t)` to the noise-free measurement.
pub type MeasurementFn<'a> = &'a (dyn Fn(usize, &DVector<f64>) -> DVector<f64> + Sync);

/// Jacobian of a measurement at step `t` and state `x`.
pub type JacobianFn<'a> = &'a dyn Fn(usize, &DVector<f64>) -> Result<DMatrix<f64>, SystemError>;

/// Steps the loop forward with the given draws. With `measurement`, it
/// replaces `C_t x_t` when forming `y_t`.
pub fn simulate_closed_loop(
    sys: &LtvSystem,
    draws: &NoiseDraws,
    steps: usize,
    measurement: Option<MeasurementFn<'_>>,
) -> Result<StackedSignal, SystemError> {
    sys.validate(steps)?;
    let (n, _, q) = sys.dims();
    let transitions = steps - 1;
    check_shape("x0 draw", draws.x0.len(), 1, n, 1)?;
    for (what, list, dim) in [("v draws", &draws.v, q), ("w draws", &draws.w, n)] {
        if list.len() < transitions {
            return Err(SystemError::ScheduleTooShort {
                what,
                len: list.len(),
                needed: transitions,
            });
        }
        for d in &list[..transitions] {
            check_shape(what, d.len(), 1, dim, 1)?;
        }
    }

    let mut out = Vec::with_capacity(n * steps);
    let mut x = draws.x0.clone();
    let mut xhat = match &sys.feedback {
        Feedback::Observer {
            initial_estimate, ..
        } => Some(initial_estimate.clone()),
        Feedback::Direct { .. } => None,
    };
    out.extend_from_slice(x.as_slice());
    for t in 0..transitions {
        let (a, b, c) = (sys.a.at(t), sys.b.at(t), sys.c.at(t));
        let clean = match measurement {
            Some(h) => h(t, &x),
            None => c * &x,
        };
        check_shape("measurement", clean.len(), 1, q, 1)?;
        let y = clean + &draws.v[t];
        let r = sys.reference.at(t);
        let (u, next_hat) = match (&sys.feedback, &xhat) {
            (Feedback::Direct { gain }, _) => (r - gain.at(t) * &y, None),
            (
                Feedback::Observer {
                    gain,
                    observer_gain,
                    ..
                },
                Some(xh),
            ) => {
                let u = r - gain.at(t) * xh;
                let innovation = &y - c * xh;
                let nh = a * xh + b * &u + observer_gain.at(t) * innovation;
                (u, Some(nh))
            }
            (Feedback::Observer { .. }, None) => unreachable!("observer state initialized above"),
        };
        x = a * &x + b * u + &draws.w[t];
        xhat = next_hat;
        out.extend_from_slice(x.as_slice());
    }
    Ok(StackedSignal::new(out, n).expect("rollout has whole states"))
}

/// Square root `S` of a PSD matrix with `S S' = m`.
fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    if m.iter().all(|v| *v == 0.0) {
        return DMatrix::zeros(m.nrows(), m.ncols());
    }
    if let Some(ch) = m.clone().cholesky() {
        return ch.l();
    }
    let eig = symmetrize(m).symmetric_eigen();
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots)
}

/// Precomputed per-step factors for drawing noise realizations.
#[derive(Debug, Clone)]
pub struct NoiseSampler {
    x0: (DVector<f64>, DMatrix<f64>),
    v: ChannelSampler,
    w: ChannelSampler,
    steps: usize,
}

#[derive(Debug, Clone)]
enum ChannelSampler {
    Gaussian(Vec<(DVector<f64>, DMatrix<f64>)>),
    Mixture(MixtureNoiseModel, Vec<(DVector<f64>, DMatrix<f64>)>),
}

impl ChannelSampler {
    fn new(spec: &NoiseSpec, transitions: usize) -> Self {
        match spec {
            NoiseSpec::Gaussian(g) => ChannelSampler::Gaussian(
                (0..transitions)
                    .map(|t| (g.mean.at(t).clone(), psd_sqrt(g.cov.at(t))))
                    .collect(),
            ),
            NoiseSpec::Mixture(m) => {
                let comps = m
                    .components()
                    .iter()
                    .map(|c| (c.mean.clone(), psd_sqrt(&c.cov)))
                    .collect();
                ChannelSampler::Mixture(m.clone(), comps)
            }
        }
    }

    fn draw<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        transitions: usize,
    ) -> Result<Vec<DVector<f64>>, SystemError> {
        Ok(match self {
            ChannelSampler::Gaussian(steps) => steps
                .iter()
                .map(|(m, s)| gaussian_draw(rng, m, s))
                .collect(),
            ChannelSampler::Mixture(model, comps) => {
                let modes: ModeSequence = model.sample_mode_sequence(transitions, rng)?;
                modes
                    .as_slice()
                    .iter()
                    .map(|&k| gaussian_draw(rng, &comps[k].0, &comps[k].1))
                    .collect()
            }
        })
    }
}

fn gaussian_draw<R: Rng + ?Sized>(
    rng: &mut R,
    mean: &DVector<f64>,
    sqrt: &DMatrix<f64>,
) -> DVector<f64> {
    let z = DVector::from_iterator(
        sqrt.ncols(),
        (0..sqrt.ncols()).map(|_| rng.sample::<f64, _>(StandardNormal)),
    );
    mean + sqrt * z
}

impl NoiseSampler {
    pub fn new(sys: &LtvSystem, steps: usize) -> Result<Self, SystemError> {
        sys.validate(steps)?;
        let transitions = steps - 1;
        let x0 = match &sys.x0 {
            InitialState::Fixed(x) => (x.clone(), DMatrix::zeros(x.len(), x.len())),
            InitialState::Gaussian { mean, cov } => (mean.clone(), psd_sqrt(cov)),
        };
        Ok(Self {
            x0,
            v: ChannelSampler::new(&sys.measurement_noise, transitions),
            w: ChannelSampler::new(&sys.process_noise, transitions),
            steps,
        })
    }

    /// Mixture channels get an independent mode sequence per draw.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<NoiseDraws, SystemError> {
        let transitions = self.steps - 1;
        Ok(NoiseDraws {
            x0: gaussian_draw(rng, &self.x0.0, &self.x0.1),
            v: self.v.draw(rng, transitions)?,
            w: self.w.draw(rng, transitions)?,
        })
    }
}

/// Linearizes a nonlinear measurement along the expected-state trajectory.
///
/// Returns `C_0..C_{steps-1}` where `C_t` is the Jacobian at `E[x_t]` and
/// `E[x_{t+1}] = (A - B K C_t) E[x_t] + B r_t + E[w_t] - B K E[v_t]`.
pub fn propagate_expected_state(
    sys: &LtvSystem,
    jacobian: JacobianFn<'_>,
    steps: usize,
) -> Result<Vec<DMatrix<f64>>, SystemError> {
    let Feedback::Direct { gain } = &sys.feedback else {
        return Err(SystemError::ObserverNotSupported);
    };
    if steps == 0 {
        return Err(SystemError::ZeroSteps);
    }
    let (n, _, q) = sys.dims();
    let mut ez = sys.x0.mean().clone();
    let mut out = Vec::with_capacity(steps);
    for t in 0..steps {
        let c = jacobian(t, &ez)?;
        check_shape("measurement Jacobian", c.nrows(), c.ncols(), q, n)?;
        if t + 1 < steps {
            let bk = sys.b.at(t) * gain.at(t);
            ez = (sys.a.at(t) - &bk * &c) * &ez
                + sys.b.at(t) * sys.reference.at(t)
                + sys.process_noise.expected(t)?
                - &bk * sys.measurement_noise.expected(t)?;
        }
        out.push(c);
    }
    Ok(out)
}

/// Euclidean norm of selected state components, e.g. a relative position.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeMeasurement {
    pub indices: Vec<usize>,
    pub state_dim: usize,
}

impl RangeMeasurement {
    pub fn value(&self, x: &DVector<f64>) -> f64 {
        self.indices
            .iter()
            .map(|&i| x[i] * x[i])
            .sum::<f64>()
            .sqrt()
    }

    /// `(1/d) [x_i ...]` placed at `indices`, as a 1×n row.
    pub fn jacobian(&self, t: usize, x: &DVector<f64>) -> Result<DMatrix<f64>, SystemError> {
        let d = self.value(x);
        if d < 1e-9 {
            return Err(SystemError::SingularDistance { t, distance: d });
        }
        let mut row = DMatrix::zeros(1, self.state_dim);
        for &i in &self.indices {
            row[(0, i)] = x[i] / d;
        }
        Ok(row)
    }
}

/// Empirical Gaussian of sampled trajectories, with `ridge·I` added.
pub fn fit_gaussian(
    trajectories: &[StackedSignal],
    ridge: f64,
) -> Result<TrajectoryGaussian, SystemError> {
    let Some(first) = trajectories.first() else {
        return Err(SystemError::TooFewSamples {
            found: 0,
            needed: 2,
        });
    };
    let dim = first.as_slice().len();
    let state_dim = first.dim();
    for (index, s) in trajectories.iter().enumerate() {
        if s.as_slice().len() != dim || s.dim() != state_dim {
            return Err(SystemError::RaggedTrajectories {
                index,
                expected: dim,
                found: s.as_slice().len(),
            });
        }
    }
    let needed = 2 * dim;
    if trajectories.len() < needed {
        return Err(SystemError::TooFewSamples {
            found: trajectories.len(),
            needed,
        });
    }
    let count = trajectories.len();
    let data = DMatrix::from_fn(dim, count, |i, j| trajectories[j].as_slice()[i]);
    let mean = data.column_mean();
    let mut centered = data;
    for mut col in centered.column_iter_mut() {
        col -= &mean;
    }
    let mut cov = &centered * centered.transpose() / (count as f64 - 1.0);
    for i in 0..dim {
        cov[(i, i)] += ridge;
    }
    TrajectoryGaussian::new(mean, cov, state_dim)
}
