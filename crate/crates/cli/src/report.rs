//! Result documents and CSV export.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{ContinuousCDF, Normal};
use stl_ess::hdr::{NestingRecord, VerificationResult};
use stl_ess::mc::McResult;
use stl_ess::mixture::MixtureResult;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Stl,
    ReachAvoid,
    Mc,
    Mixture,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NestingRow {
    pub index: usize,
    pub cutoff: f64,
    pub samples: usize,
    pub in_count: usize,
    pub conditional: f64,
}

impl From<&NestingRecord> for NestingRow {
    fn from(r: &NestingRecord) -> Self {
        Self {
            index: r.index,
            cutoff: r.cutoff,
            samples: r.samples,
            in_count: r.in_count,
            conditional: r.conditional,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IterationRow {
    pub probability: f64,
    pub std_dev: f64,
    pub nestings: usize,
    pub upper_bound_only: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSummary {
    pub outer_iterations: usize,
    pub between_variance: f64,
    pub within_variance: f64,
    pub iterations: Vec<IterationRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McSummary {
    pub runs: usize,
    pub hits: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultDocument {
    pub schema_version: u32,
    pub command: String,
    pub scenario: String,
    pub scenario_digest: String,
    pub mode: Mode,
    pub negated: bool,
    pub seed: u64,
    pub steps: usize,
    pub dimension: usize,
    pub probability: f64,
    pub std_dev: f64,
    pub variance: f64,
    pub ci: [f64; 2],
    pub ci_level: f64,
    pub upper_bound_only: bool,
    pub sample_cap_hit: bool,
    pub samples_per_nesting: Option<usize>,
    pub nestings: Vec<NestingRow>,
    pub mixture: Option<MixtureSummary>,
    pub mc: Option<McSummary>,
    pub wall_time_seconds: f64,
    pub outputs: BTreeMap<String, PathBuf>,
}

pub fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Fields every document shares.
#[derive(Debug, Clone)]
pub struct Header {
    pub command: String,
    pub scenario: String,
    pub scenario_digest: String,
    pub negated: bool,
    pub seed: u64,
    pub steps: usize,
    pub dimension: usize,
}

impl ResultDocument {
    fn blank(h: &Header, mode: Mode) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            command: h.command.clone(),
            scenario: h.scenario.clone(),
            scenario_digest: h.scenario_digest.clone(),
            mode,
            negated: h.negated,
            seed: h.seed,
            steps: h.steps,
            dimension: h.dimension,
            probability: 0.0,
            std_dev: 0.0,
            variance: 0.0,
            ci: [0.0, 0.0],
            ci_level: 0.0,
            upper_bound_only: false,
            sample_cap_hit: false,
            samples_per_nesting: None,
            nestings: Vec::new(),
            mixture: None,
            mc: None,
            wall_time_seconds: 0.0,
            outputs: BTreeMap::new(),
        }
    }

    pub fn from_hdr(h: &Header, mode: Mode, r: &VerificationResult) -> Self {
        Self {
            probability: r.probability,
            std_dev: r.std_dev,
            variance: r.variance,
            ci: [r.ci.0, r.ci.1],
            ci_level: r.ci_level,
            upper_bound_only: r.upper_bound_only,
            sample_cap_hit: r.sample_cap_hit,
            samples_per_nesting: Some(r.samples_per_nesting),
            nestings: r.nestings.iter().map(NestingRow::from).collect(),
            wall_time_seconds: r.wall_time.as_secs_f64(),
            ..Self::blank(h, mode)
        }
    }

    pub fn from_mixture(h: &Header, r: &MixtureResult, ci_level: f64, seconds: f64) -> Self {
        Self {
            probability: r.probability,
            std_dev: r.std_dev,
            variance: r.variance,
            ci: [r.ci.0, r.ci.1],
            ci_level,
            upper_bound_only: r.iterations.iter().any(|i| i.result.upper_bound_only),
            sample_cap_hit: r.iterations.iter().any(|i| i.result.sample_cap_hit),
            mixture: Some(MixtureSummary {
                outer_iterations: r.iterations.len(),
                between_variance: r.between_variance,
                within_variance: r.within_variance,
                iterations: r
                    .iterations
                    .iter()
                    .map(|i| IterationRow {
                        probability: i.result.probability,
                        std_dev: i.result.std_dev,
                        nestings: i.result.nestings.len(),
                        upper_bound_only: i.result.upper_bound_only,
                    })
                    .collect(),
            }),
            wall_time_seconds: seconds,
            ..Self::blank(h, Mode::Mixture)
        }
    }

    pub fn from_mc(h: &Header, r: &McResult, ci_level: f64) -> Self {
        let z = normal_quantile(0.5 + 0.5 * ci_level);
        Self {
            probability: r.probability,
            std_dev: r.std_dev,
            variance: r.variance,
            ci: [
                (r.probability - z * r.std_dev).max(0.0),
                (r.probability + z * r.std_dev).min(1.0),
            ],
            ci_level,
            mc: Some(McSummary {
                runs: r.runs,
                hits: r.hits,
            }),
            wall_time_seconds: r.wall_time.as_secs_f64(),
            ..Self::blank(h, Mode::Mc)
        }
    }

    /// The document with timing and output paths cleared.
    pub fn without_timing(&self) -> Self {
        Self {
            wall_time_seconds: 0.0,
            outputs: BTreeMap::new(),
            ..self.clone()
        }
    }
}

fn normal_quantile(p: f64) -> f64 {
    Normal::new(0.0, 1.0)
        .expect("standard normal")
        .inverse_cdf(p)
}

pub fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(file))
}

pub fn trajectory_header(state_dim: usize, steps: usize) -> Vec<String> {
    (0..steps)
        .flat_map(|t| (0..state_dim).map(move |i| format!("x_{t}[{i}]")))
        .collect()
}

pub fn write_trajectories(
    path: &Path,
    state_dim: usize,
    steps: usize,
    rows: &[Vec<f64>],
) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(trajectory_header(state_dim, steps))?;
    for r in rows {
        w.write_record(r.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_nestings(path: &Path, rows: &[NestingRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["index", "cutoff", "samples", "in_count", "conditional"])?;
    for r in rows {
        w.write_record([
            r.index.to_string(),
            r.cutoff.to_string(),
            r.samples.to_string(),
            r.in_count.to_string(),
            r.conditional.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
