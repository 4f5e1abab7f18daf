#![allow(dead_code)]

use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use stl_ess_cli::{Prepared, ScenarioFile};

pub fn bundled(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("scenarios")
        .join(name)
}

pub fn bundled_json(name: &str) -> Value {
    serde_json::from_slice(&std::fs::read(bundled(name)).unwrap()).unwrap()
}

pub fn prepare(v: &Value) -> Prepared {
    let scenario = serde_json::from_value(v.clone()).expect("scenario json");
    Prepared::new(ScenarioFile::from_scenario(scenario).unwrap()).unwrap()
}

pub fn write(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_vec_pretty(v).unwrap()).unwrap();
    path
}

/// One state, `x0 ~ N(0, 1)`, so the trajectory is a standard normal.
pub fn scalar(formula: &str) -> Value {
    json!({
        "name": "scalar",
        "system": {
            "dt": 1.0,
            "horizon": 1.0,
            "A": [[0.0]],
            "B": [[0.0]],
            "controller": {"K": [[0.0]]},
            "x0": {"gaussian": {"std": [1.0]}}
        },
        "spec": {"formula": formula},
        "estimator": {"samples": 64, "seed": 11}
    })
}

/// Scenario 1 dynamics with one small obstacle that only a midpoint between
/// two states can enter.
pub fn corner(midpoints: bool) -> Value {
    let mut v = bundled_json("scenario1.json");
    v["name"] = json!("corner");
    v["spec"]["reach_avoid"]["unsafe"] =
        json!([{"box": {"indices": [0, 1], "lo": [1.3, 0.05], "hi": [1.7, 0.5]}}]);
    v["spec"]["reach_avoid"]["midpoints"] = json!(midpoints);
    v["estimator"] = json!({"samples": 64, "seed": 1, "mc_runs": 2400});
    v
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn std_err(xs: &[f64]) -> f64 {
    let m = mean(xs);
    let n = xs.len() as f64;
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
}
