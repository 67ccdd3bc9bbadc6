//! TOML scenario configs.
//!
//! ```toml
//! id = "fig1b"
//! case_label = "covariance_shift"
//! d = 50
//! l_over_d = [0.5, 1, 2, 4, 8, 16, 32, 100]   # or l_grid = [25, 50, ...]
//! m = 5000
//! seed = 0
//! n_prompts = 10000
//! tau_policy = ["pretrain_default", "theorem2_optimal"]
//! pretrain = "sampled"                          # or "population"
//! linear_attention = false
//! output = "fig1b.csv"
//!
//! [train]
//! x_mean = "zeros(d)"
//! x_cov = "identity(d)"
//! w_mean = "zeros(d)"
//! w_cov = "identity(d)"
//! noise_std = 0.1
//!
//! [test]
//! x_cov = "scaled_identity(d, 2)"
//! ```
//!
//! Fields left out of `[test]` are copied from `[train]`; in `[train]`
//! means default to zero and covariances to the identity. Matrices are
//! `"identity(d)"`, `"scaled_identity(d, c)"`, `"diag([..])"`, `"zeros(d)"` or
//! an array of rows. Vectors are `"zeros(d)"`, `"constant(d, v)"`,
//! `"uniform_direction(d, r)"` (norm `r` along the all-ones direction) or an
//! array. Noise is `noise_std` or `noise_var`.
//!
//! Tau policies: `pretrain_default`, `theorem2_optimal`,
//! `appendixI_heuristic`, `fixed(t)`, `sweep(t1, t2, ...)`.
//!
//! Two optional keys expand one config into several scenarios:
//! `mean_shift_norms = [0, 1, 2]` shifts the test inputs along the
//! all-ones direction, and
//!
//! ```toml
//! [sweep]
//! param = "test.noise_std"
//! values = [0.1, 1, 5, 10]
//! ```
//!
//! sets a field to each value in turn. Overrides `path.to.field=value` are
//! applied to the document before anything else is read.

use std::path::Path;

use serde::Deserialize;
use toml::{Table, Value};

use crate::data::{DataDistribution, TaskDistribution};
use crate::error::{Error, Result};
use crate::gaussian::{GaussianSpec, NoiseSpec};
use crate::harness::{PretrainMode, ShiftScenario, TauPolicy};
use crate::linalg::{Mat, Vector};

/// The scenarios described by one config file and its output path.
#[derive(Debug, Clone)]
pub struct ScenarioSet {
    pub id: String,
    pub scenarios: Vec<ShiftScenario>,
    pub output: Option<String>,
}

fn cfg_err(path: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Config {
        path: path.into(),
        message: message.into(),
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    id: String,
    #[serde(default)]
    case_label: String,
    d: usize,
    l_grid: Option<Vec<usize>>,
    l_over_d: Option<Vec<f64>>,
    m: Option<usize>,
    seed: Option<u64>,
    n_prompts: Option<usize>,
    tau_policy: Option<OneOrMany>,
    linear_attention: Option<bool>,
    pretrain: Option<String>,
    heuristic_scale: Option<f64>,
    output: Option<String>,
    mean_shift_norms: Option<Vec<f64>>,
    train: RawDist,
    test: RawDist,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum OneOrMany {
    One(String),
    Many(Vec<String>),
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDist {
    x_mean: Option<Value>,
    x_cov: Option<Value>,
    w_mean: Option<Value>,
    w_cov: Option<Value>,
    noise_std: Option<f64>,
    noise_var: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSweep {
    param: String,
    values: Vec<Value>,
}

/// Sets `path.to.field` in `doc` to `value`, parsed as a TOML value when
/// possible and as a bare string otherwise.
pub fn apply_override(doc: &mut Table, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| cfg_err(spec, "override must look like path.to.field=value"))?;
    let path = path.trim();
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("key just written"),
        Err(_) => Value::String(raw.to_string()),
    };
    set_path(doc, path, value)
}

fn set_path(doc: &mut Table, path: &str, value: Value) -> Result<()> {
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(cfg_err(path, "empty key in override path"));
    }
    let mut table = doc;
    for k in &keys[..keys.len() - 1] {
        let entry = table
            .entry(k.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| cfg_err(path, format!("`{k}` is not a table")))?;
    }
    table.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

pub fn load_config(path: &Path, overrides: &[String]) -> Result<ScenarioSet> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| cfg_err(path.display().to_string(), e.to_string()))?;
    parse_config(&text, overrides)
}

pub fn parse_config(text: &str, overrides: &[String]) -> Result<ScenarioSet> {
    let mut doc: Table = text.parse().map_err(|e: toml::de::Error| cfg_err("<document>", e.to_string()))?;
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    for key in ["id", "d", "train", "test"] {
        if !doc.contains_key(key) {
            return Err(cfg_err(key, "required field is missing"));
        }
    }
    let sweep = match doc.remove("sweep") {
        Some(v) => Some(
            RawSweep::deserialize(v).map_err(|e| cfg_err("sweep", e.to_string()))?,
        ),
        None => None,
    };
    let docs = match &sweep {
        None => vec![(doc, None)],
        Some(sw) => {
            if sw.values.is_empty() {
                return Err(cfg_err("sweep.values", "must be nonempty"));
            }
            let leaf = sw.param.rsplit('.').next().unwrap_or(&sw.param).to_string();
            sw.values
                .iter()
                .map(|v| {
                    let mut d = doc.clone();
                    set_path(&mut d, &sw.param, v.clone())?;
                    Ok((d, Some(format!("{leaf}={}", display_value(v)))))
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    let mut id = String::new();
    let mut output = None;
    let mut scenarios = Vec::new();
    for (d, label) in docs {
        let raw = RawConfig::deserialize(Value::Table(d)).map_err(|e| cfg_err("<document>", e.to_string()))?;
        id.clone_from(&raw.id);
        output.clone_from(&raw.output);
        let mut base = build_scenario(&raw)?;
        if let Some(label) = label {
            base.case_label = if base.case_label.is_empty() {
                label
            } else {
                format!("{};{label}", base.case_label)
            };
        }
        match &raw.mean_shift_norms {
            None => scenarios.push(base),
            Some(norms) => {
                let dim = base.d();
                for &r in norms {
                    let shift = uniform_direction(dim, r);
                    let mut s = base.with_test_mean_shift(&shift)?;
                    if !base.case_label.is_empty() {
                        s.case_label = format!("{};{}", base.case_label, s.case_label);
                    }
                    scenarios.push(s);
                }
            }
        }
    }
    Ok(ScenarioSet {
        id,
        scenarios,
        output,
    })
}

fn display_value(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn build_scenario(raw: &RawConfig) -> Result<ShiftScenario> {
    let d = raw.d;
    if d == 0 {
        return Err(cfg_err("d", "must be >= 1"));
    }
    let l_grid = match (&raw.l_grid, &raw.l_over_d) {
        (Some(_), Some(_)) => return Err(cfg_err("l_grid", "give either l_grid or l_over_d, not both")),
        (Some(g), None) => g.clone(),
        (None, Some(r)) => r.iter().map(|x| (x * d as f64).round() as usize).collect(),
        (None, None) => return Err(cfg_err("l_grid", "one of l_grid or l_over_d is required")),
    };
    let train = build_dist(&raw.train, None, d, "train")?;
    let test = build_dist(&raw.test, Some(&raw.train), d, "test")?;
    let mut s = ShiftScenario::new(raw.id.clone(), train, test, vec![2])?;
    s.l_grid = l_grid;
    s.case_label.clone_from(&raw.case_label);
    if let Some(m) = raw.m {
        s.m = m;
    }
    if let Some(seed) = raw.seed {
        s.seed = seed;
    }
    if let Some(n) = raw.n_prompts {
        s.n_prompts = n;
    }
    if let Some(lin) = raw.linear_attention {
        s.linear_attention = lin;
    }
    s.heuristic_scale = raw.heuristic_scale;
    if let Some(p) = &raw.pretrain {
        s.pretrain = match p.as_str() {
            "sampled" => PretrainMode::Sampled,
            "population" => PretrainMode::Population,
            other => {
                return Err(cfg_err(
                    "pretrain",
                    format!("expected \"sampled\" or \"population\", got {other:?}"),
                ))
            }
        };
    }
    if let Some(tp) = &raw.tau_policy {
        let items: Vec<&String> = match tp {
            OneOrMany::One(s) => vec![s],
            OneOrMany::Many(v) => v.iter().collect(),
        };
        s.tau_policies = items
            .iter()
            .map(|t| parse_tau_policy(t))
            .collect::<Result<_>>()?;
    }
    s.validate().map_err(|e| cfg_err("<scenario>", e.to_string()))?;
    Ok(s)
}

pub fn parse_tau_policy(text: &str) -> Result<TauPolicy> {
    let t = text.trim();
    match t {
        "pretrain_default" => return Ok(TauPolicy::PretrainDefault),
        "theorem2_optimal" => return Ok(TauPolicy::Theorem2Optimal),
        "appendixI_heuristic" => return Ok(TauPolicy::AppendixIHeuristic),
        _ => {}
    }
    let bad = || cfg_err("tau_policy", format!("unrecognized policy {t:?}"));
    let (name, args) = split_call(t).ok_or_else(bad)?;
    let nums = args
        .iter()
        .map(|a| a.parse::<f64>().map_err(|_| cfg_err("tau_policy", format!("bad number {a:?} in {t:?}"))))
        .collect::<Result<Vec<f64>>>()?;
    match (name, nums.as_slice()) {
        ("fixed", [x]) => Ok(TauPolicy::Fixed(*x)),
        ("sweep", xs) if !xs.is_empty() => Ok(TauPolicy::Sweep(xs.to_vec())),
        _ => Err(bad()),
    }
}

/// `name(a, b, ...)` with commas inside brackets left alone.
fn split_call(s: &str) -> Option<(&str, Vec<String>)> {
    let open = s.find('(')?;
    if !s.ends_with(')') {
        return None;
    }
    let name = s[..open].trim();
    let inner = &s[open + 1..s.len() - 1];
    let mut args = Vec::new();
    let mut depth = 0i32;
    let mut cur = String::new();
    for ch in inner.chars() {
        match ch {
            '[' | '(' => depth += 1,
            ']' | ')' => depth -= 1,
            _ => {}
        }
        if ch == ',' && depth == 0 {
            args.push(cur.trim().to_string());
            cur.clear();
        } else {
            cur.push(ch);
        }
    }
    if !cur.trim().is_empty() {
        args.push(cur.trim().to_string());
    }
    Some((name, args))
}

fn check_dim_arg(arg: &str, d: usize, path: &str) -> Result<()> {
    if arg == "d" || arg.parse::<usize>().ok() == Some(d) {
        Ok(())
    } else {
        Err(cfg_err(path, format!("dimension argument {arg:?} does not match d = {d}")))
    }
}

fn parse_num(arg: &str, path: &str) -> Result<f64> {
    arg.parse::<f64>()
        .map_err(|_| cfg_err(path, format!("expected a number, got {arg:?}")))
}

fn number(v: &Value, path: &str) -> Result<f64> {
    match v {
        Value::Float(f) => Ok(*f),
        Value::Integer(i) => Ok(*i as f64),
        other => Err(cfg_err(path, format!("expected a number, got {other}"))),
    }
}

fn number_list(v: &Value, path: &str) -> Result<Vec<f64>> {
    v.as_array()
        .ok_or_else(|| cfg_err(path, "expected an array of numbers"))?
        .iter()
        .enumerate()
        .map(|(i, x)| number(x, &format!("{path}[{i}]")))
        .collect()
}

fn uniform_direction(d: usize, r: f64) -> Vector {
    Vector::from_element(d, r / (d as f64).sqrt())
}

pub(crate) fn parse_vector(v: &Value, d: usize, path: &str) -> Result<Vector> {
    let out = match v {
        Value::Array(_) => Vector::from_vec(number_list(v, path)?),
        Value::String(s) => {
            let (name, args) = split_call(s.trim())
                .ok_or_else(|| cfg_err(path, format!("unrecognized vector {s:?}")))?;
            match (name, args.as_slice()) {
                ("zeros", [n]) => {
                    check_dim_arg(n, d, path)?;
                    Vector::zeros(d)
                }
                ("constant", [n, c]) => {
                    check_dim_arg(n, d, path)?;
                    Vector::from_element(d, parse_num(c, path)?)
                }
                ("uniform_direction", [n, r]) => {
                    check_dim_arg(n, d, path)?;
                    uniform_direction(d, parse_num(r, path)?)
                }
                _ => return Err(cfg_err(path, format!("unrecognized vector {s:?}"))),
            }
        }
        other => return Err(cfg_err(path, format!("expected a vector, got {other}"))),
    };
    if out.len() != d {
        return Err(cfg_err(path, format!("expected length {d}, got {}", out.len())));
    }
    Ok(out)
}

pub(crate) fn parse_matrix(v: &Value, d: usize, path: &str) -> Result<Mat> {
    let out = match v {
        Value::Array(rows) => {
            if rows.len() != d {
                return Err(cfg_err(path, format!("expected {d} rows, got {}", rows.len())));
            }
            let mut m = Mat::zeros(d, d);
            for (i, row) in rows.iter().enumerate() {
                let vals = number_list(row, &format!("{path}[{i}]"))?;
                if vals.len() != d {
                    return Err(cfg_err(
                        format!("{path}[{i}]"),
                        format!("expected {d} entries, got {}", vals.len()),
                    ));
                }
                for (j, x) in vals.into_iter().enumerate() {
                    m[(i, j)] = x;
                }
            }
            m
        }
        Value::String(s) => {
            let (name, args) = split_call(s.trim())
                .ok_or_else(|| cfg_err(path, format!("unrecognized matrix {s:?}")))?;
            match (name, args.as_slice()) {
                ("identity", [n]) => {
                    check_dim_arg(n, d, path)?;
                    Mat::identity(d, d)
                }
                ("zeros", [n]) => {
                    check_dim_arg(n, d, path)?;
                    Mat::zeros(d, d)
                }
                ("scaled_identity", [n, c]) => {
                    check_dim_arg(n, d, path)?;
                    Mat::identity(d, d) * parse_num(c, path)?
                }
                ("diag", [list]) => {
                    let parsed: Table = format!("v = {list}")
                        .parse()
                        .map_err(|_| cfg_err(path, format!("bad diagonal {list:?}")))?;
                    let vals = number_list(&parsed["v"], path)?;
                    if vals.len() != d {
                        return Err(cfg_err(path, format!("expected {d} diagonal entries, got {}", vals.len())));
                    }
                    Mat::from_diagonal(&Vector::from_vec(vals))
                }
                _ => return Err(cfg_err(path, format!("unrecognized matrix {s:?}"))),
            }
        }
        other => return Err(cfg_err(path, format!("expected a matrix, got {other}"))),
    };
    Ok(out)
}

fn build_dist(raw: &RawDist, fallback: Option<&RawDist>, d: usize, name: &str) -> Result<DataDistribution> {
    let pick = |own: &Option<Value>, field: fn(&RawDist) -> &Option<Value>| -> Option<Value> {
        own.clone().or_else(|| fallback.and_then(|f| field(f).clone()))
    };
    let vec_field = |v: Option<Value>, key: &str| -> Result<Vector> {
        match v {
            Some(v) => parse_vector(&v, d, &format!("{name}.{key}")),
            None => Ok(Vector::zeros(d)),
        }
    };
    let mat_field = |v: Option<Value>, key: &str| -> Result<Mat> {
        match v {
            Some(v) => parse_matrix(&v, d, &format!("{name}.{key}")),
            None => Ok(Mat::identity(d, d)),
        }
    };
    let x_mean = vec_field(pick(&raw.x_mean, |r| &r.x_mean), "x_mean")?;
    let x_cov = mat_field(pick(&raw.x_cov, |r| &r.x_cov), "x_cov")?;
    let w_mean = vec_field(pick(&raw.w_mean, |r| &r.w_mean), "w_mean")?;
    let w_cov = mat_field(pick(&raw.w_cov, |r| &r.w_cov), "w_cov")?;

    let noise = match (raw.noise_std, raw.noise_var) {
        (Some(_), Some(_)) => {
            return Err(cfg_err(format!("{name}.noise_std"), "give noise_std or noise_var, not both"))
        }
        (Some(s), None) => NoiseSpec::from_std(s),
        (None, Some(v)) => NoiseSpec::new(v),
        (None, None) => match fallback {
            Some(f) => match (f.noise_std, f.noise_var) {
                (Some(s), _) => NoiseSpec::from_std(s),
                (None, Some(v)) => NoiseSpec::new(v),
                (None, None) => return Err(cfg_err("train.noise_std", "noise level is required")),
            },
            None => return Err(cfg_err(format!("{name}.noise_std"), "noise level is required")),
        },
    }
    .map_err(|e| cfg_err(format!("{name}.noise_std"), e.to_string()))?;

    let x_spec = GaussianSpec::new(x_mean, x_cov).map_err(|e| cfg_err(format!("{name}.x_cov"), e.to_string()))?;
    let w_spec = GaussianSpec::new(w_mean, w_cov).map_err(|e| cfg_err(format!("{name}.w_cov"), e.to_string()))?;
    DataDistribution::new(x_spec, TaskDistribution::new(w_spec), noise)
}
