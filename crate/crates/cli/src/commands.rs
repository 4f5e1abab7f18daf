//! Command implementations shared by the binary and the tests.

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use stl_ess::ess::{sample_chain, ChainConfig, Domain};
use stl_ess::hdr::{derive_seed, hdr_estimate, HdrConfig, SampleCount, VerificationResult};
use stl_ess::mc::{srs_estimate, McResult};
use stl_ess::mixture::mixture_estimate;
use stl_ess::stl::StackedSignal;
use stl_ess::system::{fit_gaussian, TrajectoryGaussian};

use crate::model::{FittedFile, Model, Prepared, Spec};
use crate::report::{self, digest, Header, Mode, ResultDocument};
use crate::scenario::{SamplesBlock, ScenarioFile};

/// Error split by exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad scenario or arguments: exit code 2.
    Config(anyhow::Error),
    /// The estimator could not finish: exit code 1.
    Estimation(anyhow::Error),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Estimation(_) => 1,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(e) => write!(f, "configuration error: {e:#}"),
            Failure::Estimation(e) => write!(f, "estimation failed: {e:#}"),
        }
    }
}

pub type Outcome<T> = Result<T, Failure>;

trait Classify<T> {
    fn config(self) -> Outcome<T>;
    fn estimation(self) -> Outcome<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn config(self) -> Outcome<T> {
        self.map_err(|e| Failure::Config(e.into()))
    }
    fn estimation(self) -> Outcome<T> {
        self.map_err(|e| Failure::Estimation(e.into()))
    }
}

pub fn load(path: &Path) -> Outcome<Prepared> {
    ScenarioFile::read(path).and_then(Prepared::new).config()
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Overrides the scenario's estimator seed.
    pub seed: Option<u64>,
    pub negate: bool,
    /// Directory for JSON and CSV output; nothing is written without it.
    pub out: Option<PathBuf>,
}

impl RunOptions {
    pub fn seeded(seed: u64) -> Self {
        Self {
            seed: Some(seed),
            ..Self::default()
        }
    }
}

fn seed(p: &Prepared, opts: &RunOptions) -> u64 {
    opts.seed.unwrap_or(p.scenario().estimator.seed)
}

fn header(p: &Prepared, opts: &RunOptions, command: &str) -> Header {
    Header {
        command: command.into(),
        scenario: p.scenario().name.clone(),
        scenario_digest: digest(&p.file.bytes),
        negated: opts.negate,
        seed: seed(p, opts),
        steps: p.steps,
        dimension: p.dimension(),
    }
}

pub fn hdr_config(p: &Prepared, seed: u64, retain: bool) -> Outcome<HdrConfig> {
    let e = &p.scenario().estimator;
    let samples = match e.samples {
        SamplesBlock::Fixed(n) => SampleCount::Fixed(n),
        SamplesBlock::Auto(_) => SampleCount::Auto {
            target_std: e
                .target_std
                .ok_or_else(|| anyhow!("estimator.samples = \"auto\" needs target_std"))
                .config()?,
            expected_nestings: e.expected_nestings,
            cap: e.sample_cap,
        },
    };
    Ok(HdrConfig {
        samples,
        max_nestings: e.max_nestings,
        ci_level: e.ci_level,
        thinning: e.thinning,
        seed,
        retain_samples: retain,
    })
}

fn prepare_out(opts: &RunOptions, p: &Prepared) -> Outcome<Option<PathBuf>> {
    let dir = opts.out.clone().or_else(|| {
        p.scenario()
            .outputs
            .dir
            .as_ref()
            .map(|d| p.file.base_dir().join(d))
    });
    if let Some(d) = &dir {
        std::fs::create_dir_all(d)
            .with_context(|| format!("creating {}", d.display()))
            .config()?;
    }
    Ok(dir)
}

fn finish(
    mut doc: ResultDocument,
    dir: Option<&Path>,
    trajectories: Option<(&[Vec<f64>], usize)>,
) -> Outcome<ResultDocument> {
    let Some(dir) = dir else {
        return Ok(doc);
    };
    if !doc.nestings.is_empty() {
        let path = dir.join(format!("{}_nestings.csv", doc.command));
        report::write_nestings(&path, &doc.nestings).config()?;
        doc.outputs.insert("nestings".into(), path);
    }
    if let Some((rows, state_dim)) = trajectories {
        let path = dir.join(format!("{}_trajectories.csv", doc.command));
        report::write_trajectories(&path, state_dim, doc.steps, rows).config()?;
        doc.outputs.insert("trajectories".into(), path);
    }
    let path = dir.join(format!("{}.json", doc.command));
    doc.outputs.insert("result".into(), path.clone());
    report::write_json(&path, &doc).config()?;
    Ok(doc)
}

/// HDR (or the mixture outer loop) over `domain`.
fn estimate(
    p: &Prepared,
    domain: &Domain,
    h: &Header,
    mode: Mode,
    retain: bool,
) -> Outcome<(ResultDocument, Vec<Vec<f64>>)> {
    let cfg = hdr_config(p, h.seed, retain)?;
    if let (true, Model::Dynamics { sys, .. }) = (p.has_mixture(), &p.model) {
        let started = Instant::now();
        let outer = p.scenario().estimator.outer_iterations;
        let r = mixture_estimate(sys, p.steps, domain, outer, &cfg).map_err(|e| match e {
            stl_ess::mixture::MixtureEstimateError::Mixture(m) => Failure::Config(m.into()),
            other => Failure::Estimation(other.into()),
        })?;
        let doc =
            ResultDocument::from_mixture(h, &r, cfg.ci_level, started.elapsed().as_secs_f64());
        return Ok((doc, Vec::new()));
    }
    let g = p.gaussian().config()?;
    domain.check(&g).config()?;
    let r = hdr_estimate(&g, domain, &cfg).estimation()?;
    Ok((ResultDocument::from_hdr(h, mode, &r), r.samples))
}

fn run_estimate(
    p: &Prepared,
    opts: &RunOptions,
    command: &str,
    domain: Domain,
    mode: Mode,
) -> Outcome<ResultDocument> {
    let h = header(p, opts, command);
    let dir = prepare_out(opts, p)?;
    let retain = p.scenario().outputs.trajectories && dir.is_some();
    let (doc, samples) = estimate(p, &domain, &h, mode, retain)?;
    let traj = retain.then_some((samples.as_slice(), p.state_dim));
    finish(doc, dir.as_deref(), traj)
}

/// Probability of the formula (or its negation) by HDR.
pub fn verify(p: &Prepared, opts: &RunOptions) -> Outcome<ResultDocument> {
    let domain = p.stl_domain(opts.negate).config()?;
    run_estimate(p, opts, "verify", domain, Mode::Stl)
}

/// Reach-avoid failure probability over the polytope union; `negate`
/// gives the satisfaction probability instead.
pub fn verify_ra(p: &Prepared, opts: &RunOptions) -> Outcome<ResultDocument> {
    if !matches!(p.spec, Spec::ReachAvoid(_)) {
        return Err(Failure::Config(anyhow!(
            "verify-ra needs a reach_avoid spec"
        )));
    }
    let domain = p.reach_avoid_domain(opts.negate).config()?;
    run_estimate(p, opts, "verify-ra", domain, Mode::ReachAvoid)
}

fn mc_result(p: &Prepared, domain: &Domain, runs: usize, seed: u64) -> Outcome<McResult> {
    match &p.model {
        Model::Dynamics { sys, range } => {
            let measure = range
                .as_ref()
                .map(|r| move |_t: usize, x: &DVector<f64>| DVector::from_element(1, r.value(x)));
            let f = measure
                .as_ref()
                .map(|m| m as &(dyn Fn(usize, &DVector<f64>) -> DVector<f64> + Sync));
            srs_estimate(sys, p.steps, domain, runs, seed, f, false).config()
        }
        Model::Fitted(g) => Ok(iid_estimate(g, domain, runs, seed)),
    }
}

fn iid_estimate(g: &TrajectoryGaussian, domain: &Domain, runs: usize, seed: u64) -> McResult {
    let started = Instant::now();
    let hits: usize = (0..runs.div_ceil(256))
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c as u64);
            (0..256.min(runs - 256 * c))
                .filter(|_| domain.score(&g.sample(&mut rng)) >= 0.0)
                .count()
        })
        .sum();
    let p = hits as f64 / runs as f64;
    let variance = p * (1.0 - p) / runs as f64;
    McResult {
        probability: p,
        variance,
        std_dev: variance.sqrt(),
        runs,
        hits,
        satisfied: None,
        wall_time: started.elapsed(),
    }
}

/// Plain Monte Carlo on the same event `verify` / `verify-ra` would target.
pub fn mc(p: &Prepared, opts: &RunOptions, runs: Option<usize>) -> Outcome<ResultDocument> {
    let h = header(p, opts, "mc");
    let dir = prepare_out(opts, p)?;
    let domain = p.natural_domain(opts.negate).config()?;
    let runs = runs.unwrap_or(p.scenario().estimator.mc_runs);
    if runs == 0 {
        return Err(Failure::Config(anyhow!("mc needs at least one run")));
    }
    let r = mc_result(p, &domain, runs, h.seed)?;
    let doc = ResultDocument::from_mc(&h, &r, p.scenario().estimator.ci_level);
    finish(doc, dir.as_deref(), None)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Satisfy,
    Violate,
}

/// Domain of trajectories on `side` of the spec.
pub fn side_domain(p: &Prepared, side: Side) -> Outcome<Domain> {
    match (&p.spec, side) {
        (Spec::Formula(_), Side::Satisfy) => p.stl_domain(false),
        (Spec::Formula(_), Side::Violate) => p.stl_domain(true),
        (Spec::ReachAvoid(_), Side::Satisfy) => p.reach_avoid_domain(true),
        (Spec::ReachAvoid(_), Side::Violate) => p.reach_avoid_domain(false),
    }
    .config()
}

/// Fresh trajectories from one side of the spec: an HDR run locates the
/// set, then slice-sampling chains started from its final samples draw
/// `count` new ones.
pub fn sample(
    p: &Prepared,
    opts: &RunOptions,
    count: usize,
    side: Side,
) -> Outcome<(ResultDocument, Vec<Vec<f64>>)> {
    if p.has_mixture() {
        return Err(Failure::Config(anyhow!("sample needs Gaussian noise")));
    }
    let h = header(p, opts, "sample");
    let dir = prepare_out(opts, p)?;
    let domain = side_domain(p, side)?;
    let mut rows = Vec::new();
    let (doc, seeds) = estimate(p, &domain, &h, Mode::Stl, true)?;
    if count > 0 {
        if seeds.is_empty() {
            return Err(Failure::Estimation(anyhow!(
                "no trajectories found on the {side:?} side"
            )));
        }
        let g = p.gaussian().config()?;
        let chains = seeds.len().min(count);
        let thinning = p.scenario().estimator.thinning;
        let oracle = domain.at_level(0.0);
        let per_chain: Vec<Vec<Vec<f64>>> = (0..chains)
            .into_par_iter()
            .map(|c| {
                let n = count / chains + usize::from(c < count % chains);
                let cfg = ChainConfig {
                    thinning,
                    seed: derive_seed(h.seed, (1 << 40) + c as u64),
                };
                sample_chain(&seeds[c], n, &g, &oracle, &cfg)
            })
            .collect::<Result<_, _>>()
            .estimation()?;
        rows = per_chain.into_iter().flatten().collect();
    }
    let mut doc = doc;
    doc.command = "sample".into();
    if let Some(d) = &dir {
        let path = d.join(format!("sample_{}.csv", side_name(side)));
        report::write_trajectories(&path, p.state_dim, p.steps, &rows).config()?;
        doc.outputs.insert("trajectories".into(), path);
    }
    let doc = finish(doc, dir.as_deref(), None)?;
    Ok((doc, rows))
}

fn side_name(side: Side) -> &'static str {
    match side {
        Side::Satisfy => "satisfy",
        Side::Violate => "violate",
    }
}

/// Reads a trajectory CSV: header `x_t[i]` in time-major order.
pub fn read_trajectories(path: &Path) -> anyhow::Result<(usize, Vec<StackedSignal>)> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .with_context(|| format!("opening {}", path.display()))?;
    let header = r.headers()?.clone();
    let mut state_dim = 0;
    for (k, name) in header.iter().enumerate() {
        let (t, i) = parse_column(name)
            .ok_or_else(|| anyhow!("column {k}: expected x_<t>[<i>], found {name:?}"))?;
        if t == 0 {
            state_dim = state_dim.max(i + 1);
        }
    }
    if state_dim == 0 || header.len() % state_dim != 0 {
        bail!("header does not describe whole states");
    }
    let expected: Vec<String> = report::trajectory_header(state_dim, header.len() / state_dim);
    if header.iter().ne(expected.iter().map(String::as_str)) {
        bail!("columns must be ordered x_0[0], x_0[1], ..., time-major");
    }
    let mut out = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let data = rec
            .iter()
            .map(|v| v.trim().parse::<f64>())
            .collect::<Result<Vec<f64>, _>>()
            .with_context(|| format!("row {}", line + 2))?;
        out.push(StackedSignal::new(data, state_dim)?);
    }
    Ok((state_dim, out))
}

fn parse_column(name: &str) -> Option<(usize, usize)> {
    let rest = name.trim().strip_prefix("x_")?;
    let (t, rest) = rest.split_once('[')?;
    let i = rest.strip_suffix(']')?;
    Some((t.parse().ok()?, i.parse().ok()?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub state_dim: usize,
    pub steps: usize,
    pub samples: usize,
    pub ridge: f64,
    pub output: Option<PathBuf>,
}

/// Fits a trajectory Gaussian to simulated runs. A scenario, when given,
/// must agree on the state dimension and the number of states.
pub fn fit(
    data: &Path,
    scenario: Option<&Path>,
    ridge: f64,
    out: Option<&Path>,
) -> Outcome<(FitSummary, FittedFile)> {
    let (state_dim, rows) = read_trajectories(data).config()?;
    let steps = rows.first().map_or(0, StackedSignal::steps);
    if let Some(sc) = scenario {
        let file = ScenarioFile::read(sc).config()?;
        let want = file.scenario.steps();
        if want != steps {
            return Err(Failure::Config(anyhow!(
                "data has {steps} states per trajectory, scenario horizon gives {want}"
            )));
        }
    }
    let g = fit_gaussian(&rows, ridge).config()?;
    let fitted = FittedFile::from_gaussian(&g, rows.len(), ridge);
    let mut summary = FitSummary {
        state_dim,
        steps,
        samples: rows.len(),
        ridge,
        output: None,
    };
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).config()?;
        let path = dir.join("fitted.json");
        report::write_json(&path, &fitted).config()?;
        summary.output = Some(path);
    }
    Ok((summary, fitted))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareRow {
    pub run: usize,
    pub seed: u64,
    pub p_hdr: f64,
    pub std_hdr: f64,
    pub p_mc: f64,
    pub std_mc: f64,
    pub agree: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareSummary {
    pub scenario: String,
    pub scenario_digest: String,
    pub runs: usize,
    pub mc_runs: usize,
    pub mean_hdr: f64,
    pub mean_std_hdr: f64,
    pub mean_mc: f64,
    pub mean_std_mc: f64,
    pub agreement: f64,
    pub rows: Vec<CompareRow>,
    pub outputs: Vec<PathBuf>,
}

/// `|p_hdr - p_mc| <= 3 sqrt(var_hdr + var_mc)`.
pub fn agrees(p_hdr: f64, var_hdr: f64, p_mc: f64, var_mc: f64) -> bool {
    (p_hdr - p_mc).abs() <= 3.0 * (var_hdr + var_mc).sqrt()
}

/// Repeated paired HDR and MC runs with histogram data for plotting.
pub fn compare(p: &Prepared, opts: &RunOptions, runs: usize) -> Outcome<CompareSummary> {
    if runs == 0 {
        return Err(Failure::Config(anyhow!("compare needs at least one run")));
    }
    let base = seed(p, opts);
    let dir = prepare_out(opts, p)?;
    let domain = p.natural_domain(opts.negate).config()?;
    let mode = match p.spec {
        Spec::Formula(_) => Mode::Stl,
        Spec::ReachAvoid(_) => Mode::ReachAvoid,
    };
    let mc_runs = p.scenario().estimator.mc_runs;
    let mut rows = Vec::with_capacity(runs);
    for run in 0..runs {
        let s = derive_seed(base, run as u64);
        let h = Header {
            seed: s,
            ..header(p, opts, "compare")
        };
        let (hdr, _) = estimate(p, &domain, &h, mode, false)?;
        let mc = mc_result(p, &domain, mc_runs, derive_seed(s, 1))?;
        rows.push(CompareRow {
            run,
            seed: s,
            p_hdr: hdr.probability,
            std_hdr: hdr.std_dev,
            p_mc: mc.probability,
            std_mc: mc.std_dev,
            agree: agrees(hdr.probability, hdr.variance, mc.probability, mc.variance),
        });
    }
    let n = runs as f64;
    let mean = |f: fn(&CompareRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let mut summary = CompareSummary {
        scenario: p.scenario().name.clone(),
        scenario_digest: digest(&p.file.bytes),
        runs,
        mc_runs,
        mean_hdr: mean(|r| r.p_hdr),
        mean_std_hdr: mean(|r| r.std_hdr),
        mean_mc: mean(|r| r.p_mc),
        mean_std_mc: mean(|r| r.std_mc),
        agreement: rows.iter().filter(|r| r.agree).count() as f64 / n,
        rows,
        outputs: Vec::new(),
    };
    if let Some(d) = dir {
        let runs_path = d.join("compare_runs.csv");
        let mut w = report::csv_writer(&runs_path).config()?;
        for r in &summary.rows {
            w.serialize(r).config()?;
        }
        w.flush().config()?;
        let hist_path = d.join("compare_histogram.csv");
        write_histogram(&hist_path, &summary.rows).config()?;
        let json_path = d.join("compare.json");
        summary.outputs = vec![runs_path, hist_path, json_path.clone()];
        report::write_json(&json_path, &summary).config()?;
    }
    Ok(summary)
}

const HISTOGRAM_BINS: usize = 20;

fn write_histogram(path: &Path, rows: &[CompareRow]) -> anyhow::Result<()> {
    let values = rows.iter().flat_map(|r| [r.p_hdr, r.p_mc]);
    let lo = values.clone().fold(f64::INFINITY, f64::min);
    let hi = values.fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo {
        (hi - lo) / HISTOGRAM_BINS as f64
    } else {
        1.0
    };
    let bin = |v: f64| (((v - lo) / width) as usize).min(HISTOGRAM_BINS - 1);
    let mut counts = vec![[0usize; 2]; HISTOGRAM_BINS];
    for r in rows {
        counts[bin(r.p_hdr)][0] += 1;
        counts[bin(r.p_mc)][1] += 1;
    }
    let mut w = report::csv_writer(path)?;
    w.write_record(["bin_lo", "bin_hi", "hdr", "mc"])?;
    for (k, c) in counts.iter().enumerate() {
        let a = lo + k as f64 * width;
        w.write_record([
            a.to_string(),
            (a + width).to_string(),
            c[0].to_string(),
            c[1].to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// HDR result of one run, used by the tests and the acceptance suite.
pub fn hdr_result(p: &Prepared, domain: &Domain, seed: u64) -> Outcome<VerificationResult> {
    let cfg = hdr_config(p, seed, false)?;
    let g = p.gaussian().config()?;
    hdr_estimate(&g, domain, &cfg).estimation()
}

/// MC result of one run.
pub fn mc_only(p: &Prepared, domain: &Domain, runs: usize, seed: u64) -> Outcome<McResult> {
    mc_result(p, domain, runs, seed)
}
