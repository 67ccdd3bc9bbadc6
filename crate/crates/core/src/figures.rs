//! Bundled figure recipes. Every figure except `fig5` is a scenario config
//! (see [`crate::config`]); `fig5` compares attention maps on one score
//! vector.

use std::path::{Path, PathBuf};

use rand_distr::{Distribution, StandardNormal};
use serde::Deserialize;
use toml::{Table, Value};

use crate::attention::{histogram_compare, TemperatureEffect};
use crate::config::{apply_override, parse_config, ScenarioSet};
use crate::error::{Error, Result};
use crate::gaussian::RngStream;
use crate::harness::{run_scenario_with, write_csv, ErrorReport, ReportRow};
use crate::linalg::Vector;

pub const FIGURE_IDS: [&str; 8] = ["fig1a", "fig1b", "fig1c", "fig2a", "fig2b", "fig2c", "fig4", "fig5"];

pub const HISTOGRAM_HEADER: [&str; 6] = ["tau", "map", "mean", "variance", "min", "max"];

pub fn figure_config_text(id: &str) -> Option<&'static str> {
    Some(match id {
        "fig1a" => include_str!("../configs/fig1a.toml"),
        "fig1b" => include_str!("../configs/fig1b.toml"),
        "fig1c" => include_str!("../configs/fig1c.toml"),
        "fig2a" => include_str!("../configs/fig2a.toml"),
        "fig2b" => include_str!("../configs/fig2b.toml"),
        "fig2c" => include_str!("../configs/fig2c.toml"),
        "fig4" => include_str!("../configs/fig4.toml"),
        "fig5" => include_str!("../configs/fig5.toml"),
        _ => return None,
    })
}

fn unknown(id: &str) -> Error {
    Error::InvalidArgument(format!(
        "unknown figure {id:?}; expected one of {}",
        FIGURE_IDS.join(", ")
    ))
}

/// Scenarios of a bundled figure after applying `overrides`.
pub fn figure_scenarios(id: &str, overrides: &[String]) -> Result<ScenarioSet> {
    if id == "fig5" {
        return Err(Error::InvalidArgument("fig5 is a histogram figure, not a scenario".into()));
    }
    parse_config(figure_config_text(id).ok_or_else(|| unknown(id))?, overrides)
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HistogramConfig {
    pub id: String,
    pub d: usize,
    pub l: usize,
    pub seed: u64,
    pub taus: Vec<f64>,
    pub output: Option<String>,
}

pub fn histogram_config(overrides: &[String]) -> Result<HistogramConfig> {
    let mut doc: Table = figure_config_text("fig5")
        .expect("bundled")
        .parse()
        .map_err(|e: toml::de::Error| Error::Config {
            path: "<document>".into(),
            message: e.to_string(),
        })?;
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    HistogramConfig::deserialize(Value::Table(doc)).map_err(|e| Error::Config {
        path: "<document>".into(),
        message: e.to_string(),
    })
}

/// Scores `x_i^T x_query / sqrt(d)` of one prompt of standard normal inputs.
pub fn histogram_scores(cfg: &HistogramConfig) -> Vector {
    let mut rng = RngStream::new(cfg.seed, 0).rng();
    let d = cfg.d;
    let query: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
    Vector::from_fn(cfg.l, |_, _| {
        let mut dot = 0.0;
        for q in &query {
            let x: f64 = StandardNormal.sample(&mut rng);
            dot += x * q;
        }
        dot / (d as f64).sqrt()
    })
}

pub fn run_histogram(cfg: &HistogramConfig) -> Result<Vec<TemperatureEffect>> {
    histogram_compare(&histogram_scores(cfg), &cfg.taus)
}

pub fn write_histogram_csv<W: std::io::Write>(effects: &[TemperatureEffect], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(HISTOGRAM_HEADER)?;
    for e in effects {
        for (name, s) in [("linearized", &e.linearized), ("plain", &e.plain), ("softmax", &e.softmax)] {
            w.write_record([
                e.tau.to_string(),
                name.to_string(),
                s.mean.to_string(),
                s.variance.to_string(),
                s.min.to_string(),
                s.max.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Runs every scenario of a set in order.
pub fn run_set(set: &ScenarioSet, mut on_row: impl FnMut(&ReportRow)) -> Result<Vec<ErrorReport>> {
    set.scenarios
        .iter()
        .map(|s| run_scenario_with(s, &mut on_row))
        .collect()
}

/// Runs a bundled figure and writes its CSV into `out_dir`, returning the
/// path written.
pub fn reproduce(
    id: &str,
    overrides: &[String],
    out_dir: &Path,
    on_row: impl FnMut(&ReportRow),
) -> Result<PathBuf> {
    if !FIGURE_IDS.contains(&id) {
        return Err(unknown(id));
    }
    std::fs::create_dir_all(out_dir)?;
    if id == "fig5" {
        let cfg = histogram_config(overrides)?;
        let path = out_dir.join(cfg.output.clone().unwrap_or_else(|| format!("{id}.csv")));
        let effects = run_histogram(&cfg)?;
        write_histogram_csv(&effects, std::io::BufWriter::new(std::fs::File::create(&path)?))?;
        return Ok(path);
    }
    let set = figure_scenarios(id, overrides)?;
    let reports = run_set(&set, on_row)?;
    let path = out_dir.join(set.output.clone().unwrap_or_else(|| format!("{id}.csv")));
    let refs: Vec<&ErrorReport> = reports.iter().collect();
    write_csv(&refs, std::io::BufWriter::new(std::fs::File::create(&path)?))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{PretrainMode, TauPolicy};

    #[test]
    fn every_bundled_config_parses() {
        for id in FIGURE_IDS.iter().filter(|id| **id != "fig5") {
            let set = figure_scenarios(id, &[]).unwrap();
            assert_eq!(&set.id, id);
            assert!(!set.scenarios.is_empty());
            for s in &set.scenarios {
                assert_eq!(s.pretrain, PretrainMode::Sampled);
                assert_eq!(s.n_prompts, 10_000);
            }
        }
        assert!(histogram_config(&[]).is_ok());
        assert!(figure_scenarios("fig9", &[]).is_err());
    }

    #[test]
    fn caption_parameters() {
        let a = &figure_scenarios("fig1a", &[]).unwrap().scenarios[0];
        assert_eq!((a.d(), a.m), (50, 5000));
        assert!((a.train.noise.sigma() - 0.1).abs() < 1e-15);
        assert_eq!(a.l_grid, vec![25, 50, 100, 200, 400, 800, 1600, 5000]);

        let b = &figure_scenarios("fig1b", &[]).unwrap().scenarios[0];
        assert_eq!(b.test.x_spec.covariance()[(3, 3)], 2.0);
        assert!(b.tau_policies.contains(&TauPolicy::Theorem2Optimal));

        let c = &figure_scenarios("fig1c", &[]).unwrap().scenarios[0];
        assert!((c.test.task.w_spec.mean().norm() - 1.0).abs() < 1e-12);
        assert_eq!(c.test.task.w_spec.covariance()[(0, 0)], 3.0);

        let f2c = figure_scenarios("fig2c", &[]).unwrap();
        let sig: Vec<f64> = f2c.scenarios.iter().map(|s| s.test.noise.sigma()).collect();
        assert_eq!(sig, vec![0.1, 1.0, 2.0, 5.0, 10.0]);
        assert!(f2c.scenarios.iter().all(|s| s.l_grid == vec![50]));

        let f4 = figure_scenarios("fig4", &[]).unwrap();
        assert_eq!(f4.scenarios.len(), 3);
        assert!(f4.scenarios.iter().all(|s| s.linear_attention && s.d() == 20));
    }

    #[test]
    fn histogram_rows() {
        let mut cfg = histogram_config(&[]).unwrap();
        cfg.l = 100;
        let effects = run_histogram(&cfg).unwrap();
        let mut buf = Vec::new();
        write_histogram_csv(&effects, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("tau,map,mean,variance,min,max\n"));
        assert_eq!(text.lines().count(), 1 + 3 * cfg.taus.len());
        for pair in effects.windows(2) {
            let ratio = pair[0].linearized.variance / pair[1].linearized.variance;
            let expected = (pair[1].tau / pair[0].tau).powi(2);
            assert!((ratio - expected).abs() < 1e-9 * expected);
        }
    }
}
