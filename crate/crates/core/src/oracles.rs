//! Self-checks that compare closed forms against brute force. Each returns an
//! [`OracleReport`] instead of panicking so callers can print and aggregate.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::attention::{linearized_softmax_map, softmax_map, AttentionParams};
use crate::data::{DataDistribution, TaskDistribution};
use crate::error::Result;
use crate::gaussian::{GaussianSpec, NoiseSpec, RngStream};
use crate::linalg::{Mat, Vector};
use crate::theory::{error_curve, moment_sandwich, optimal_temperature, TestEnvironment};

#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub name: &'static str,
    pub passed: bool,
    /// Largest observed deviation, in the units named by `detail`.
    pub max_deviation: f64,
    pub detail: String,
}

impl std::fmt::Display for OracleReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {}: {}",
            self.name,
            if self.passed { "PASS" } else { "FAIL" },
            self.detail
        )
    }
}

fn random_spd(d: usize, rng: &mut impl Rng) -> Mat {
    let a = Mat::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
    &a * a.transpose() / d as f64 + Mat::identity(d, d) * 0.3
}

/// Entrywise comparison of the sandwich moment against `trials` direct
/// draws with `d = 3`, plus the exact identity case.
pub fn moment_oracle(trials: usize, seed: u64) -> Result<OracleReport> {
    let d = 3;
    let l = 8;
    let mut rng = RngStream::new(seed, 0).rng();
    let sigma = random_spd(d, &mut rng);
    let a = Mat::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
    let chol = sigma.clone().cholesky().expect("spd by construction").l();

    let mut sum = Mat::zeros(d, d);
    let mut sum_sq = Mat::zeros(d, d);
    for _ in 0..trials {
        let mut s = Mat::zeros(d, d);
        for _ in 0..l {
            let z = Vector::from_fn(d, |_, _| rng.sample(StandardNormal));
            let x = &chol * z;
            s += &x * x.transpose();
        }
        s /= l as f64;
        let sample = &s * &a * &s;
        sum += &sample;
        sum_sq += sample.component_mul(&sample);
    }
    let tf = trials as f64;
    let mean = &sum / tf;
    let exact = moment_sandwich(l, l, &sigma, &a)?;
    let mut worst_z: f64 = 0.0;
    for i in 0..d {
        for j in 0..d {
            let var = (sum_sq[(i, j)] / tf - mean[(i, j)].powi(2)).max(0.0);
            let se = (var / tf).sqrt();
            worst_z = worst_z.max((mean[(i, j)] - exact[(i, j)]).abs() / se);
        }
    }

    let id = Mat::identity(d, d);
    let id_exact = &id * (1.0 + (1.0 + d as f64) / l as f64);
    let id_err = (moment_sandwich(l, l, &id, &id)? - id_exact).amax();

    let passed = worst_z <= 4.0 && id_err <= 1e-12;
    Ok(OracleReport {
        name: "moments",
        passed,
        max_deviation: worst_z,
        detail: format!(
            "max |mc - exact| = {worst_z:.3} stderr (limit 4) over {trials} trials; identity case error {id_err:.2e} (limit 1e-12)"
        ),
    })
}

/// `trials` random score vectors with `|z/tau|_inf <= 0.1`: the gap between
/// softmax and its linearization stays under `0.5 |z/tau|_inf^2` and the
/// linearized map sums to one.
pub fn taylor_oracle(trials: usize, seed: u64) -> Result<OracleReport> {
    let mut rng = RngStream::new(seed, 1).rng();
    let mut worst_ratio: f64 = 0.0;
    let mut worst_sum: f64 = 0.0;
    let mut passed = true;
    for _ in 0..trials {
        let l = rng.random_range(2..64);
        let tau = 10f64.powf(rng.random_range(-1.0..1.0));
        let bound = rng.random_range(0.0..0.1);
        let z = Vector::from_fn(l, |_, _| rng.random_range(-1.0..1.0) * bound * tau);
        let zinf = (&z / tau).amax();
        let lin = linearized_softmax_map(&z, tau)?;
        let gap = (softmax_map(&z, tau)? - &lin).amax();
        let limit = 0.5 * zinf * zinf + 1e-9;
        let sum_err = (lin.sum() - 1.0).abs();
        passed &= gap <= limit && sum_err <= 1e-12;
        worst_ratio = worst_ratio.max(gap / limit);
        worst_sum = worst_sum.max(sum_err);
    }
    Ok(OracleReport {
        name: "taylor",
        passed,
        max_deviation: worst_ratio,
        detail: format!(
            "max gap / bound = {worst_ratio:.4} over {trials} vectors; max |sum - 1| = {worst_sum:.2e} (limit 1e-12)"
        ),
    })
}

/// A random test environment with `d` in `2..=6` and small means.
fn random_curve_inputs(rng: &mut impl Rng) -> Result<(AttentionParams, TestEnvironment)> {
    let d = rng.random_range(2..=6);
    let df = d as f64;
    let mu_x = Vector::from_fn(d, |_, _| rng.random_range(-0.5..0.5));
    let mu_w = Vector::from_fn(d, |_, _| rng.random_range(-0.5..0.5));
    let sx = random_spd(d, rng);
    let sw = random_spd(d, rng);
    let dist = DataDistribution::new(
        GaussianSpec::new(mu_x, sx)?,
        TaskDistribution::new(GaussianSpec::new(mu_w, sw)?),
        NoiseSpec::new(rng.random_range(0.0..1.0))?,
    )?;
    let l = rng.random_range(d..20 * d);
    let params = AttentionParams::new(
        random_spd(d, rng) * df,
        Vector::zeros(d),
        Vector::from_fn(d, |_, _| rng.random_range(-1.0..1.0) / (df * 20.0)),
        rng.random_range(0.2..2.0) / df,
        1.0,
    )?;
    Ok((params, TestEnvironment::from_distribution(&dist, l)?))
}

/// `count` random curves with a defined optimum: `G(2a/b)` is no worse than
/// the best of 400 log-spaced points on `[1e-2, 1e2]`.
pub fn argmin_oracle(count: usize, seed: u64) -> Result<OracleReport> {
    let mut rng = RngStream::new(seed, 2).rng();
    let mut checked = 0;
    let mut worst: f64 = f64::NEG_INFINITY;
    let mut passed = true;
    while checked < count {
        let (params, env) = random_curve_inputs(&mut rng)?;
        let curve = error_curve(&params, &env)?;
        let Some(tau) = optimal_temperature(&curve).value() else {
            continue;
        };
        let g_opt = curve.eval(tau);
        let grid_min = (0..400)
            .map(|k| curve.eval(10f64.powf(-2.0 + 4.0 * k as f64 / 399.0)))
            .fold(f64::INFINITY, f64::min);
        let excess = g_opt - grid_min;
        passed &= excess <= 1e-9 * g_opt.abs();
        worst = worst.max(excess);
        checked += 1;
    }
    Ok(OracleReport {
        name: "argmin",
        passed,
        max_deviation: worst,
        detail: format!("max G(tau_opt) - grid min = {worst:.3e} over {count} curves"),
    })
}
