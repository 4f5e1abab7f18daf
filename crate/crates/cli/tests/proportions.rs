//! Failing trajectories drawn by `sample` split between the two causes of
//! failure in proportion to the causes' own probabilities.

mod common;

use common::{bundled_json, mean, prepare, std_err};
use serde_json::json;
use stl_ess::stl::CompiledFormula;
use stl_ess_cli::commands::{self, hdr_result, RunOptions, Side};

const RUNS: u64 = 100;
const DRAWS: usize = 5;
const DRAW_SIZE: usize = 1000;

#[test]
fn sampled_causes_match_per_cause_probabilities() {
    let base = bundled_json("full_stl.json");
    let text = base["spec"]["formula"].as_str().unwrap().to_string();
    let split = text.find(" & G[0,4.5]").expect("two conjuncts");
    let (avoid, goal) = (text[..split].to_string(), text[split + 3..].to_string());

    let cause = |formula: &str| {
        let mut v = base.clone();
        v["spec"]["formula"] = json!(formula);
        prepare(&v)
    };
    let (p_avoid, p_goal) = (cause(&avoid), cause(&goal));
    let per_cause = |p: &stl_ess_cli::Prepared| {
        let d = p.stl_domain(true).unwrap();
        (0..20)
            .map(|s| hdr_result(p, &d, 1000 + s).unwrap().probability)
            .collect::<Vec<f64>>()
    };
    let a = per_cause(&p_avoid);
    let b = per_cause(&p_goal);
    let (ma, mb) = (mean(&a), mean(&b));
    let ratio = ma / (ma + mb);
    let (da, db) = (mb / (ma + mb).powi(2), -ma / (ma + mb).powi(2));
    let se_ratio = ((da * std_err(&a)).powi(2) + (db * std_err(&b)).powi(2)).sqrt();

    let full = prepare(&base);
    let avoid_phi = CompiledFormula::new(&p_avoid.formula(false).unwrap());
    let mut per_run = Vec::new();
    for run in 0..RUNS {
        let (_, rows) = commands::sample(
            &full,
            &RunOptions::seeded(run),
            DRAWS * DRAW_SIZE,
            Side::Violate,
        )
        .unwrap();
        let draws: Vec<f64> = rows
            .chunks(DRAW_SIZE)
            .map(|draw| {
                let hits = draw
                    .iter()
                    .filter(|r| avoid_phi.robustness(r, 4) < 0.0)
                    .count();
                hits as f64 / draw.len() as f64
            })
            .collect();
        assert_eq!(draws.len(), DRAWS);
        per_run.push(mean(&draws));
    }
    let q = mean(&per_run);
    let se_q = std_err(&per_run);
    let tol = 3.0 * (se_q.powi(2) + se_ratio.powi(2)).sqrt();
    assert!(
        (q - ratio).abs() <= tol,
        "sampled obstacle share {q:.4} +/- {se_q:.4}, probability ratio {ratio:.4} +/- {se_ratio:.4}"
    );
}
