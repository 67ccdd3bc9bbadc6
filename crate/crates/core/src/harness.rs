//! Monte Carlo evaluation of pretrained models on shifted test
//! distributions, and CSV output.
//!
//! Random streams: a scenario with seed `s` uses `RngStream::new(s, 0)` as
//! its root. Pretraining at context size `l` draws from
//! `root.substream(TAG_PRETRAIN).substream(l)`; test prompt `i` at context
//! size `l` from `root.substream(TAG_EVAL).substream(l).substream(i)`. Every
//! policy, predictor and mean shift evaluated at the same `l` sees the same
//! prompts.

use std::fmt;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::attention::AttentionParams;
use crate::bayes::{bayes_predict_from_moments, RidgePrior};
use crate::data::{sample_prompt_with, DataDistribution, Prompt, PromptMoments};
use crate::error::{Error, Result};
use crate::gaussian::RngStream;
use crate::linalg::Vector;
use crate::pretrain::{estimate_task_stats, pretrain_params, pretrain_population, PretrainCorpus};
use crate::theory::{
    default_heuristic_scale, error_curve, heuristic_temperature, optimal_temperature, Temperature,
    TestEnvironment, UndefinedReason,
};

pub const TAG_PRETRAIN: u64 = 0x7072_6574;
pub const TAG_EVAL: u64 = 0x6576_616c;

pub const CSV_HEADER: [&str; 12] = [
    "scenario_id",
    "case_label",
    "d",
    "l",
    "m",
    "tau_policy",
    "tau",
    "mode",
    "error",
    "stderr",
    "n_prompts",
    "seed",
];

#[derive(Debug, Clone, PartialEq)]
pub enum TauPolicy {
    PretrainDefault,
    Theorem2Optimal,
    AppendixIHeuristic,
    Fixed(f64),
    Sweep(Vec<f64>),
}

impl fmt::Display for TauPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TauPolicy::PretrainDefault => f.write_str("pretrain_default"),
            TauPolicy::Theorem2Optimal => f.write_str("theorem2_optimal"),
            TauPolicy::AppendixIHeuristic => f.write_str("appendixI_heuristic"),
            TauPolicy::Fixed(t) => write!(f, "fixed({t})"),
            TauPolicy::Sweep(ts) => {
                let parts: Vec<String> = ts.iter().map(|t| t.to_string()).collect();
                write!(f, "sweep({})", parts.join(","))
            }
        }
    }
}

/// How the model is pretrained on the training distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PretrainMode {
    /// Closed form on a sampled corpus of `m` prompts.
    Sampled,
    /// Closed form with exact population moments.
    Population,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShiftScenario {
    pub id: String,
    pub case_label: String,
    pub train: DataDistribution,
    pub test: DataDistribution,
    pub l_grid: Vec<usize>,
    pub m: usize,
    pub seed: u64,
    pub n_prompts: usize,
    pub tau_policies: Vec<TauPolicy>,
    pub linear_attention: bool,
    pub pretrain: PretrainMode,
    /// Overrides the default `1/d` scale of the heuristic temperature.
    pub heuristic_scale: Option<f64>,
}

impl ShiftScenario {
    /// Defaults: `m = 5000`, seed 0, `10_000` prompts, `tau = 1` only,
    /// sampled pretraining, no linear-attention rows.
    pub fn new(
        id: impl Into<String>,
        train: DataDistribution,
        test: DataDistribution,
        l_grid: Vec<usize>,
    ) -> Result<Self> {
        let s = Self {
            id: id.into(),
            case_label: String::new(),
            train,
            test,
            l_grid,
            m: 5000,
            seed: 0,
            n_prompts: 10_000,
            tau_policies: vec![TauPolicy::PretrainDefault],
            linear_attention: false,
            pretrain: PretrainMode::Sampled,
            heuristic_scale: None,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn d(&self) -> usize {
        self.train.dim()
    }

    pub fn validate(&self) -> Result<()> {
        if self.train.dim() != self.test.dim() {
            return Err(Error::DimensionMismatch {
                context: "train vs test distribution",
                expected: self.train.dim(),
                got: self.test.dim(),
            });
        }
        if self.l_grid.is_empty() {
            return Err(Error::InvalidArgument("l_grid must be nonempty".into()));
        }
        if self.l_grid[0] < 2 || self.l_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(format!(
                "l_grid must be strictly ascending with l >= 2, got {:?}",
                self.l_grid
            )));
        }
        if self.n_prompts < 2 {
            return Err(Error::InvalidArgument("n_prompts must be >= 2".into()));
        }
        if self.pretrain == PretrainMode::Sampled && self.m < 2 {
            return Err(Error::InvalidArgument("sampled pretraining needs m >= 2".into()));
        }
        if self.tau_policies.is_empty() {
            return Err(Error::InvalidArgument("at least one tau policy is required".into()));
        }
        for p in &self.tau_policies {
            let taus: &[f64] = match p {
                TauPolicy::Fixed(t) => std::slice::from_ref(t),
                TauPolicy::Sweep(ts) if ts.is_empty() => {
                    return Err(Error::InvalidArgument("empty tau sweep".into()))
                }
                TauPolicy::Sweep(ts) => ts,
                _ => &[],
            };
            if let Some(t) = taus.iter().find(|t| !(**t > 0.0 && t.is_finite())) {
                return Err(Error::InvalidArgument(format!("tau must be > 0, got {t}")));
            }
        }
        Ok(())
    }

    /// The test distribution's Bayes prior.
    pub fn test_prior(&self) -> Result<RidgePrior> {
        let w = &self.test.task.w_spec;
        RidgePrior::new(w.mean().clone(), w.covariance().clone(), self.test.noise.sigma2())
    }

    pub fn pretrain_at(&self, l: usize) -> Result<AttentionParams> {
        match self.pretrain {
            PretrainMode::Population => pretrain_population(&self.train, l),
            PretrainMode::Sampled => {
                let stream = RngStream::new(self.seed, 0)
                    .substream(TAG_PRETRAIN)
                    .substream(l as u64);
                let corpus = PretrainCorpus::sample(&self.train, self.m, l, &stream)?;
                pretrain_params(&corpus, &estimate_task_stats(&corpus)?)
            }
        }
    }

    /// Copy with every test input shifted by `mu_shift` and linear-attention
    /// rows switched on; labelled `mean_shift_norm=<|mu_shift|>`.
    pub fn with_test_mean_shift(&self, mu_shift: &Vector) -> Result<ShiftScenario> {
        let mut s = self.clone();
        let mean = s.test.x_spec.mean() + mu_shift;
        s.test.x_spec = s.test.x_spec.with_mean(mean)?;
        s.linear_attention = true;
        s.case_label = format!("mean_shift_norm={}", mu_shift.norm());
        Ok(s)
    }

    pub fn eval_stream(&self, l: usize) -> RngStream {
        RngStream::new(self.seed, 0)
            .substream(TAG_EVAL)
            .substream(l as u64)
    }
}

/// Mean squared error with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub l: usize,
    pub tau_policy: String,
    pub tau_used: f64,
    pub theory_error: f64,
    pub mc: McEstimate,
    pub bayes: McEstimate,
    pub linear_attention: Option<McEstimate>,
    pub n_prompts: usize,
}

impl ReportRow {
    pub fn summary(&self) -> String {
        let mut s = format!(
            "l={} tau={:.4} ({}): theory={:.5} mc={:.5}±{:.5} bayes={:.5}",
            self.l,
            self.tau_used,
            self.tau_policy,
            self.theory_error,
            self.mc.mean,
            self.mc.stderr,
            self.bayes.mean
        );
        if let Some(lin) = &self.linear_attention {
            s.push_str(&format!(" linear={:.5}±{:.5}", lin.mean, lin.stderr));
        }
        s
    }
}

/// A policy that produced no temperature at some `l`.
#[derive(Debug, Clone, PartialEq)]
pub struct SkippedRow {
    pub l: usize,
    pub tau_policy: String,
    pub reason: UndefinedReason,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorReport {
    pub scenario_id: String,
    pub case_label: String,
    pub d: usize,
    pub m: usize,
    pub seed: u64,
    pub rows: Vec<ReportRow>,
    pub skipped: Vec<SkippedRow>,
}

impl ErrorReport {
    pub fn empty(scenario_id: &str, case_label: &str, d: usize, m: usize, seed: u64) -> Self {
        Self {
            scenario_id: scenario_id.into(),
            case_label: case_label.into(),
            d,
            m,
            seed,
            rows: Vec::new(),
            skipped: Vec::new(),
        }
    }

    pub fn rows_at(&self, l: usize) -> impl Iterator<Item = &ReportRow> {
        self.rows.iter().filter(move |r| r.l == l)
    }

    pub fn row(&self, l: usize, policy: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.l == l && r.tau_policy == policy)
    }
}

/// Squared residuals of one prompt: the linearized model at each
/// temperature, then linear attention at each temperature, then Bayes.
fn prompt_residuals(
    p: &Prompt,
    params: &AttentionParams,
    taus: &[f64],
    linear: bool,
    prior: Option<&RidgePrior>,
) -> Result<Vec<f64>> {
    let x = p.inputs();
    let l = p.len();
    let lf = l as f64;
    let y = p.labels();
    let target = p.true_query_label();
    let query = p.query();
    let labeled = x.rows(0, l - 1);

    let sum_x = x.row_sum().transpose();
    let s_x = &sum_x / lf;
    let sum_y = y.sum();
    let s_y = sum_y / lf;
    let xv = x * &params.v21;
    let xtxv = x.tr_mul(&xv) / lf;
    let xty = labeled.tr_mul(y) / lf;
    let yy = y.norm_squared() / lf;

    let weight = |cxx_v: &Vector, cxy: &Vector, cyy: f64| -> f64 {
        let inner = cxx_v + cxy * params.v22;
        let mut w = params.m11.tr_mul(&inner);
        w.axpy(params.v21.dot(cxy) + params.v22 * cyy, &params.m21, 1.0);
        w.dot(&query)
    };

    let c_xy = &xty - &s_x * s_y;
    let u = weight(&(&xtxv - &s_x * s_x.dot(&params.v21)), &c_xy, yy - s_y * s_y);
    let bias = params.v21.dot(&s_x) + params.v22 * s_y;

    let mut out = Vec::with_capacity(2 * taus.len() + 1);
    out.extend(taus.iter().map(|t| (target - u / t - bias).powi(2)));
    if linear {
        let u_lin = weight(&xtxv, &xty, yy);
        out.extend(taus.iter().map(|t| (target - u_lin / t).powi(2)));
    }
    if let Some(prior) = prior {
        let y_hat = bayes_predict_from_moments(&PromptMoments::from_prompt(p), prior)?;
        out.push((target - y_hat).powi(2));
    }
    Ok(out)
}

fn summarize(samples: &[Vec<f64>], k: usize) -> McEstimate {
    let n = samples.len() as f64;
    let mut sum = 0.0;
    for s in samples {
        sum += s[k];
    }
    let mean = sum / n;
    let mut ss = 0.0;
    for s in samples {
        ss += (s[k] - mean).powi(2);
    }
    McEstimate {
        mean,
        stderr: (ss / (n - 1.0)).sqrt() / n.sqrt(),
    }
}

#[derive(Debug, Clone)]
struct PanelResult {
    model: Vec<McEstimate>,
    linear: Vec<McEstimate>,
    bayes: Option<McEstimate>,
}

/// Evaluates the linearized model (at several temperatures), optionally
/// linear attention and the Bayes predictor on the same `n_prompts`
/// prompts. Prompt `i` uses `stream.substream(i)`; results are collected in
/// index order and reduced sequentially.
fn evaluate_panel(
    params: &AttentionParams,
    taus: &[f64],
    linear: bool,
    prior: Option<&RidgePrior>,
    dist: &DataDistribution,
    l: usize,
    n_prompts: usize,
    stream: &RngStream,
) -> Result<PanelResult> {
    if n_prompts < 2 {
        return Err(Error::InvalidArgument("n_prompts must be >= 2".into()));
    }
    if params.dim() != dist.dim() {
        return Err(Error::DimensionMismatch {
            context: "attention params vs test distribution",
            expected: dist.dim(),
            got: params.dim(),
        });
    }
    let samples: Vec<Vec<f64>> = (0..n_prompts)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream.substream(i as u64).rng();
            let p = sample_prompt_with(dist, l, &mut rng)?;
            prompt_residuals(&p, params, taus, linear, prior)
        })
        .collect::<Result<_>>()?;
    let nt = taus.len();
    let model = (0..nt).map(|k| summarize(&samples, k)).collect();
    let (linear_est, next) = if linear {
        ((nt..2 * nt).map(|k| summarize(&samples, k)).collect(), 2 * nt)
    } else {
        (Vec::new(), nt)
    };
    let bayes = prior.map(|_| summarize(&samples, next));
    let all = PanelResult {
        model,
        linear: linear_est,
        bayes,
    };
    let finite = all
        .model
        .iter()
        .chain(&all.linear)
        .chain(&all.bayes)
        .all(|e| e.mean.is_finite() && e.stderr.is_finite());
    if !finite {
        return Err(Error::NonFinite {
            context: "Monte Carlo error estimate",
        });
    }
    Ok(all)
}

/// Mean of `(y_l - y_hat)^2` over `n_prompts` fresh prompts from `dist`,
/// each with its own task vector.
pub fn mc_generalization_error(
    params: &AttentionParams,
    dist: &DataDistribution,
    l: usize,
    n_prompts: usize,
    stream: &RngStream,
) -> Result<McEstimate> {
    let r = evaluate_panel(params, &[params.tau], false, None, dist, l, n_prompts, stream)?;
    Ok(r.model[0])
}

/// Linear-attention counterpart of [`mc_generalization_error`].
pub fn mc_linear_attention_error(
    params: &AttentionParams,
    dist: &DataDistribution,
    l: usize,
    n_prompts: usize,
    stream: &RngStream,
) -> Result<McEstimate> {
    let r = evaluate_panel(params, &[params.tau], true, None, dist, l, n_prompts, stream)?;
    Ok(r.linear[0])
}

pub fn mc_bayes_error(
    prior: &RidgePrior,
    dist: &DataDistribution,
    l: usize,
    n_prompts: usize,
    stream: &RngStream,
) -> Result<McEstimate> {
    let params = AttentionParams::zeros(dist.dim());
    let r = evaluate_panel(&params, &[], false, Some(prior), dist, l, n_prompts, stream)?;
    Ok(r.bayes.expect("prior supplied"))
}

fn resolve_policy(
    policy: &TauPolicy,
    params: &AttentionParams,
    env: &TestEnvironment,
    scenario: &ShiftScenario,
) -> Result<std::result::Result<Vec<f64>, UndefinedReason>> {
    let temp = match policy {
        TauPolicy::PretrainDefault => Temperature::Defined(params.tau),
        TauPolicy::Fixed(t) => Temperature::Defined(*t),
        TauPolicy::Sweep(ts) => return Ok(Ok(ts.clone())),
        TauPolicy::Theorem2Optimal => optimal_temperature(&error_curve(params, env)?),
        TauPolicy::AppendixIHeuristic => {
            let scale = scenario
                .heuristic_scale
                .unwrap_or_else(|| default_heuristic_scale(scenario.d()));
            heuristic_temperature(&params.m11, scenario.test.x_spec.covariance(), scale)?
        }
    };
    Ok(match temp {
        Temperature::Defined(t) => Ok(vec![t]),
        Temperature::Undefined(r) => Err(r),
    })
}

/// Pretrains on `s.train` at every `l` in the grid, resolves each tau
/// policy against `s.test`, and records theory, Monte Carlo and Bayes errors.
/// The Bayes prior is the test task distribution.
pub fn run_scenario(s: &ShiftScenario) -> Result<ErrorReport> {
    run_scenario_with(s, |_| {})
}

/// [`run_scenario`] calling `on_row` as each row completes.
pub fn run_scenario_with(s: &ShiftScenario, mut on_row: impl FnMut(&ReportRow)) -> Result<ErrorReport> {
    s.validate()?;
    let prior = s.test_prior()?;
    let mut report = ErrorReport::empty(&s.id, &s.case_label, s.d(), s.m, s.seed);
    for &l in &s.l_grid {
        let params = s.pretrain_at(l)?;
        let env = TestEnvironment::from_distribution(&s.test, l)?;
        let curve = error_curve(&params, &env)?;
        let mut jobs: Vec<(String, f64)> = Vec::new();
        for policy in &s.tau_policies {
            let label = policy.to_string();
            match resolve_policy(policy, &params, &env, s)? {
                Ok(taus) => jobs.extend(taus.into_iter().map(|t| (label.clone(), t))),
                Err(reason) => report.skipped.push(SkippedRow {
                    l,
                    tau_policy: label,
                    reason,
                }),
            }
        }
        let taus: Vec<f64> = jobs.iter().map(|(_, t)| *t).collect();
        let panel = evaluate_panel(
            &params,
            &taus,
            s.linear_attention,
            Some(&prior),
            &s.test,
            l,
            s.n_prompts,
            &s.eval_stream(l),
        )?;
        let bayes = panel.bayes.expect("prior supplied");
        for (k, (label, tau)) in jobs.into_iter().enumerate() {
            let row = ReportRow {
                l,
                tau_policy: label,
                tau_used: tau,
                theory_error: curve.eval(tau),
                mc: panel.model[k],
                bayes,
                linear_attention: panel.linear.get(k).copied(),
                n_prompts: s.n_prompts,
            };
            on_row(&row);
            report.rows.push(row);
        }
    }
    report.rows.sort_by(|a, b| {
        a.l.cmp(&b.l)
            .then(a.tau_used.total_cmp(&b.tau_used))
            .then(a.tau_policy.cmp(&b.tau_policy))
    });
    Ok(report)
}

/// Runs `base` with every test input shifted by `mu_shift`, reporting both
/// the linearized and linear-attention errors.
pub fn mean_shift_comparison(mu_shift: &Vector, base: &ShiftScenario) -> Result<ErrorReport> {
    run_scenario(&base.with_test_mean_shift(mu_shift)?)
}

fn csv_rows(report: &ErrorReport) -> Vec<[String; 12]> {
    let mut out = Vec::new();
    for r in &report.rows {
        let mut record = |mode: &str, error: f64, stderr: Option<f64>| {
            out.push([
                report.scenario_id.clone(),
                report.case_label.clone(),
                report.d.to_string(),
                r.l.to_string(),
                report.m.to_string(),
                r.tau_policy.clone(),
                r.tau_used.to_string(),
                mode.to_string(),
                error.to_string(),
                stderr.map(|s| s.to_string()).unwrap_or_default(),
                if stderr.is_some() {
                    r.n_prompts.to_string()
                } else {
                    String::new()
                },
                report.seed.to_string(),
            ]);
        };
        record("bayes", r.bayes.mean, Some(r.bayes.stderr));
        if let Some(lin) = &r.linear_attention {
            record("linear_attention", lin.mean, Some(lin.stderr));
        }
        record("mc", r.mc.mean, Some(r.mc.stderr));
        record("theory", r.theory_error, None);
    }
    out
}

/// Writes several reports under one header, in the given order.
pub fn write_csv<W: Write>(reports: &[&ErrorReport], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(CSV_HEADER)?;
    for report in reports {
        for row in csv_rows(report) {
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn to_csv_string(reports: &[&ErrorReport]) -> Result<String> {
    let mut buf = Vec::new();
    write_csv(reports, &mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Io(e.to_string()))
}

pub fn emit_csv(report: &ErrorReport, path: &Path) -> Result<()> {
    emit_csv_many(&[report], path)
}

pub fn emit_csv_many(reports: &[&ErrorReport], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_csv(reports, std::io::BufWriter::new(file))
}
