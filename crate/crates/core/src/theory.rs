//! Closed-form generalization error of the linearized model, its optimal
//! temperature, and the variance-to-mean temperature heuristic.
//!
//! For test inputs `N(mu_x, Sigma_x)`, tasks `N(mu_w, Sigma_w)` and noise
//! variance `s2`, with `A = Sigma_x + mu_x mu_x^T`, `B = Sigma_w + mu_w mu_w^T`:
//!
//! ```text
//!     Bh = v22 mu_w v21^T + v22 v21 mu_w^T + v22^2 B
//!     F1 = (Sigma_x Bh + (v22^2 s2 + Tr(Bh Sigma_x))/l I) Sigma_x
//!     F2 = (mu_w v21^T + v22 B) Sigma_x
//!     G(tau) = a/tau^2 - b/tau + c
//!     a = Tr(A M11^T F1 M11)
//!     b = Tr(A (F2 M11 + M11^T F2^T))
//!     c = Tr(A B) + s2
//! ```
//!
//! The formula is asymptotic in `l`; terms of relative order `1/l` that the
//! derivation drops are not restored.

use std::fmt;

use crate::attention::AttentionParams;
use crate::data::DataDistribution;
use crate::error::{Error, Result};
use crate::linalg::{self, Mat, Vector};

/// Test-time moments entering the closed form.
#[derive(Debug, Clone, PartialEq)]
pub struct TestEnvironment {
    a: Mat,
    b: Mat,
    sigma2: f64,
    mu_w: Vector,
    sigma_x: Mat,
    l: usize,
}

impl TestEnvironment {
    pub fn from_distribution(dist: &DataDistribution, l: usize) -> Result<Self> {
        if l < 2 {
            return Err(Error::InvalidArgument(format!(
                "context size must be >= 2, got {l}"
            )));
        }
        Ok(Self {
            a: dist.x_spec.second_moment(),
            b: dist.task.w_spec.second_moment(),
            sigma2: dist.noise.sigma2(),
            mu_w: dist.task.w_spec.mean().clone(),
            sigma_x: dist.x_spec.covariance().clone(),
            l,
        })
    }

    pub fn dim(&self) -> usize {
        self.mu_w.len()
    }

    pub fn l(&self) -> usize {
        self.l
    }

    /// `Sigma_x + mu_x mu_x^T`
    pub fn a(&self) -> &Mat {
        &self.a
    }

    /// `Sigma_w + mu_w mu_w^T`
    pub fn b(&self) -> &Mat {
        &self.b
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn mu_w(&self) -> &Vector {
        &self.mu_w
    }

    pub fn sigma_x(&self) -> &Mat {
        &self.sigma_x
    }
}

/// `G(tau) = a/tau^2 - b/tau + c`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorCurve {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl ErrorCurve {
    pub fn eval(&self, tau: f64) -> f64 {
        self.a / (tau * tau) - self.b / tau + self.c
    }

    /// `G''(2a/b) = b^4 / (8 a^3)`.
    pub fn curvature_at_optimum(&self) -> f64 {
        self.b.powi(4) / (8.0 * self.a.powi(3))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UndefinedReason {
    ANonPositive,
    BNonPositive,
    DegenerateDenominator,
}

impl fmt::Display for UndefinedReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            UndefinedReason::ANonPositive => "a ≤ 0",
            UndefinedReason::BNonPositive => "b ≤ 0",
            UndefinedReason::DegenerateDenominator => "degenerate denominator",
        })
    }
}

/// A temperature that may fail to exist.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Temperature {
    Defined(f64),
    Undefined(UndefinedReason),
}

impl Temperature {
    pub fn value(&self) -> Option<f64> {
        match *self {
            Temperature::Defined(t) => Some(t),
            Temperature::Undefined(_) => None,
        }
    }
}

/// `E[S A S]` for `S = (1/divisor) sum_{i<=n} x_i x_i^T`, `x_i ~ N(0, sigma)`
/// i.i.d.:
/// `n(n-1)/D^2 sigma A sigma + n/D^2 (sigma A sigma + sigma A^T sigma + Tr(A sigma) sigma)`.
pub fn moment_sandwich(n: usize, divisor: usize, sigma: &Mat, a: &Mat) -> Result<Mat> {
    let d = sigma.nrows();
    linalg::check_square(sigma, d, "moment_sandwich sigma")?;
    linalg::check_square(a, d, "moment_sandwich A")?;
    if n == 0 || divisor == 0 {
        return Err(Error::InvalidArgument(
            "moment_sandwich needs n >= 1 and divisor >= 1".into(),
        ));
    }
    let nf = n as f64;
    let d2 = (divisor as f64).powi(2);
    let sas = sigma * a * sigma;
    let sats = sigma * a.transpose() * sigma;
    let tr = linalg::trace_of_product(a, sigma);
    Ok(&sas * (nf * (nf - 1.0) / d2) + (&sas + sats + sigma * tr) * (nf / d2))
}

fn check_env(params: &AttentionParams, env: &TestEnvironment) -> Result<()> {
    if params.dim() != env.dim() {
        return Err(Error::DimensionMismatch {
            context: "attention params vs test environment",
            expected: env.dim(),
            got: params.dim(),
        });
    }
    Ok(())
}

pub fn error_curve(params: &AttentionParams, env: &TestEnvironment) -> Result<ErrorCurve> {
    check_env(params, env)?;
    let d = env.dim();
    let (v21, v22) = (&params.v21, params.v22);
    let mu_v = &env.mu_w * v21.transpose();
    let b_hat = (&mu_v + mu_v.transpose()) * v22 + &env.b * (v22 * v22);
    let sx = &env.sigma_x;
    let scalar = (v22 * v22 * env.sigma2 + linalg::trace_of_product(&b_hat, sx)) / env.l as f64;
    let f1 = (sx * &b_hat + Mat::identity(d, d) * scalar) * sx;
    let f2 = (mu_v + &env.b * v22) * sx;
    let m11 = &params.m11;
    let a = linalg::trace_of_product(&env.a, &(m11.transpose() * f1 * m11));
    let f2m = &f2 * m11;
    let b = linalg::trace_of_product(&env.a, &(&f2m + f2m.transpose()));
    let c = linalg::trace_of_product(&env.a, &env.b) + env.sigma2;
    Ok(ErrorCurve { a, b, c })
}

pub fn generalization_error(params: &AttentionParams, env: &TestEnvironment) -> Result<f64> {
    Ok(error_curve(params, env)?.eval(params.tau))
}

/// `2a/b`, the minimizer of `G` over `tau > 0` when `a > 0` and `b > 0`.
pub fn optimal_temperature(curve: &ErrorCurve) -> Temperature {
    if !(curve.a > 0.0) {
        Temperature::Undefined(UndefinedReason::ANonPositive)
    } else if !(curve.b > 0.0) {
        Temperature::Undefined(UndefinedReason::BNonPositive)
    } else {
        Temperature::Defined(2.0 * curve.a / curve.b)
    }
}

/// Default `scale` for [`heuristic_temperature`].
pub fn default_heuristic_scale(d: usize) -> f64 {
    1.0 / d as f64
}

/// `scale * Tr(M11 Sigma M11^T Sigma) / Tr(Sigma M11)`: the second moment
/// of off-diagonal scores over the mean of diagonal scores. Undefined when
/// the denominator falls below `1e-9 d`.
pub fn heuristic_temperature(m11: &Mat, sigma_x: &Mat, scale: f64) -> Result<Temperature> {
    let d = m11.nrows();
    linalg::check_square(m11, d, "heuristic M11")?;
    linalg::check_square(sigma_x, d, "heuristic sigma_x")?;
    if !(scale > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "heuristic scale must be > 0, got {scale}"
        )));
    }
    let den = linalg::trace_of_product(sigma_x, m11);
    if den < 1e-9 * d as f64 {
        return Ok(Temperature::Undefined(UndefinedReason::DegenerateDenominator));
    }
    let num = linalg::trace_of_product(&(m11 * sigma_x), &(m11.transpose() * sigma_x));
    Ok(Temperature::Defined(scale * num / den))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TaskDistribution;
    use crate::gaussian::{GaussianSpec, NoiseSpec, RngStream};
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn spd(d: usize, rng: &mut impl Rng) -> Mat {
        let a = Mat::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        &a * a.transpose() / d as f64 + Mat::identity(d, d) * 0.3
    }

    fn random_env(d: usize, l: usize, seed: u64) -> TestEnvironment {
        let mut rng = RngStream::new(seed, 0).rng();
        let mu_x = Vector::from_fn(d, |_, _| rng.random_range(-0.5..0.5));
        let mu_w = Vector::from_fn(d, |_, _| rng.random_range(-0.5..0.5));
        let dist = DataDistribution::new(
            GaussianSpec::new(mu_x, spd(d, &mut rng)).unwrap(),
            TaskDistribution::new(GaussianSpec::new(mu_w, spd(d, &mut rng)).unwrap()),
            NoiseSpec::new(rng.random_range(0.0..0.5)).unwrap(),
        )
        .unwrap();
        TestEnvironment::from_distribution(&dist, l).unwrap()
    }

    fn random_params(d: usize, seed: u64) -> AttentionParams {
        let mut rng = RngStream::new(seed, 1).rng();
        let df = d as f64;
        AttentionParams::new(
            spd(d, &mut rng) * df,
            Vector::zeros(d),
            Vector::from_fn(d, |_, _| rng.random_range(-1.0..1.0) / (df * 20.0)),
            rng.random_range(0.5..1.5) / df,
            rng.random_range(0.5..2.0),
        )
        .unwrap()
    }

    fn iso_params(d: usize) -> AttentionParams {
        AttentionParams::new(
            Mat::identity(d, d) * d as f64,
            Vector::zeros(d),
            Vector::zeros(d),
            1.0 / d as f64,
            1.0,
        )
        .unwrap()
    }

    fn iso_env(d: usize, l: usize, cx: f64, sigma: f64) -> TestEnvironment {
        let dist = DataDistribution::new(
            GaussianSpec::isotropic(Vector::zeros(d), cx),
            TaskDistribution::new(GaussianSpec::standard(d)),
            NoiseSpec::from_std(sigma).unwrap(),
        )
        .unwrap();
        TestEnvironment::from_distribution(&dist, l).unwrap()
    }

    #[test]
    fn sandwich_identity_case() {
        let (d, l) = (4, 10);
        let i = Mat::identity(d, d);
        let s = moment_sandwich(l, l, &i, &i).unwrap();
        let expected = &i * (1.0 + (1.0 + d as f64) / l as f64);
        assert!((s - expected).amax() < 1e-14);
    }

    #[test]
    fn sandwich_single_sample_wick() {
        let a = Mat::from_row_slice(3, 3, &[1.0, 2.0, 0.0, -1.0, 0.5, 3.0, 0.2, 0.0, -2.0]);
        let i = Mat::identity(3, 3);
        let s = moment_sandwich(1, 1, &i, &a).unwrap();
        let expected = &a + a.transpose() + &i * a.trace();
        assert!((s - expected).amax() < 1e-14);
    }

    #[test]
    fn sandwich_rejects_bad_input() {
        let i = Mat::identity(2, 2);
        assert!(moment_sandwich(0, 1, &i, &i).is_err());
        assert!(moment_sandwich(1, 1, &i, &Mat::identity(3, 3)).is_err());
    }

    #[test]
    fn sandwich_matches_monte_carlo() {
        let d = 3;
        let (n, divisor) = (3, 4);
        let mut rng = RngStream::new(21, 0).rng();
        let sigma = spd(d, &mut rng);
        let a = Mat::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        let chol = sigma.clone().cholesky().unwrap().l();
        let trials = 1_000_000;
        let mut sum = Mat::zeros(d, d);
        let mut sum_sq = Mat::zeros(d, d);
        for _ in 0..trials {
            let mut s = Mat::zeros(d, d);
            for _ in 0..n {
                let z = Vector::from_fn(d, |_, _| rng.sample(StandardNormal));
                let x = &chol * z;
                s += &x * x.transpose();
            }
            s /= divisor as f64;
            let sample = &s * &a * &s;
            sum += &sample;
            sum_sq += sample.component_mul(&sample);
        }
        let tf = trials as f64;
        let mean = &sum / tf;
        let exact = moment_sandwich(n, divisor, &sigma, &a).unwrap();
        for i in 0..d {
            for j in 0..d {
                let var = sum_sq[(i, j)] / tf - mean[(i, j)].powi(2);
                let se = (var / tf).sqrt();
                assert!(
                    (mean[(i, j)] - exact[(i, j)]).abs() <= 4.0 * se,
                    "({i},{j}) {} vs {} se {se}",
                    mean[(i, j)],
                    exact[(i, j)]
                );
            }
        }
    }

    #[test]
    fn zero_model_is_the_floor() {
        let d = 50;
        let env = iso_env(d, 100, 1.0, 0.1);
        let g = generalization_error(&AttentionParams::zeros(d), &env).unwrap();
        assert!((g - 50.01).abs() < 1e-12);
    }

    #[test]
    fn zero_value_row_is_the_floor_with_means() {
        let env = random_env(5, 40, 3);
        let mut params = random_params(5, 4);
        params.v21 = Vector::zeros(5);
        params.v22 = 0.0;
        let floor = linalg::trace_of_product(env.a(), env.b()) + env.sigma2();
        assert!((generalization_error(&params, &env).unwrap() - floor).abs() < 1e-12 * floor);
    }

    #[test]
    fn isotropic_no_shift_value() {
        let (d, l, sigma) = (50usize, 5000usize, 0.1f64);
        let g = generalization_error(&iso_params(d), &iso_env(d, l, 1.0, sigma)).unwrap();
        let df = d as f64;
        let expected = df * (sigma * sigma + df) / l as f64 + sigma * sigma;
        assert!((g - expected).abs() < 1e-12 * expected);
        assert!((g - 0.5101).abs() < 1e-9);
    }

    #[test]
    fn isotropic_shift_curve_and_optimum() {
        let (d, l, c) = (50usize, 5000usize, 2.0f64);
        let curve = error_curve(&iso_params(d), &iso_env(d, l, c, 0.0)).unwrap();
        let (df, lf) = (d as f64, l as f64);
        assert!((curve.a - c.powi(3) * df * (1.0 + df / lf)).abs() < 1e-9 * curve.a);
        assert!((curve.b - 2.0 * c * c * df).abs() < 1e-9 * curve.b);
        let tau = optimal_temperature(&curve).value().unwrap();
        assert!((tau - c * (1.0 + df / lf)).abs() < 1e-12);
        assert!((tau - 2.02).abs() < 1e-12);
        let big_l = error_curve(&iso_params(d), &iso_env(d, 10_000_000, c, 0.0)).unwrap();
        assert!((optimal_temperature(&big_l).value().unwrap() - c).abs() < 1e-4);
    }

    #[test]
    fn curve_matches_direct_evaluation() {
        let env = random_env(6, 30, 5);
        let params = random_params(6, 6);
        let curve = error_curve(&params, &env).unwrap();
        let mut rng = RngStream::new(7, 0).rng();
        for _ in 0..10 {
            let tau = rng.random_range(0.1..10.0);
            let direct = generalization_error(&params.with_tau(tau).unwrap(), &env).unwrap();
            assert!((curve.eval(tau) - direct).abs() <= 1e-10 * direct.abs());
        }
        let at_one = generalization_error(&params.with_tau(1.0).unwrap(), &env).unwrap();
        assert!((curve.a - curve.b + curve.c - at_one).abs() <= 1e-12 * at_one.abs());
    }

    #[test]
    fn negative_v22_is_undefined() {
        let d = 4;
        let mut params = iso_params(d);
        params.v22 = -params.v22;
        let curve = error_curve(&params, &iso_env(d, 50, 1.0, 0.1)).unwrap();
        assert_eq!(
            optimal_temperature(&curve),
            Temperature::Undefined(UndefinedReason::BNonPositive)
        );
        let zero = error_curve(&AttentionParams::zeros(d), &iso_env(d, 50, 1.0, 0.1)).unwrap();
        assert_eq!(
            optimal_temperature(&zero),
            Temperature::Undefined(UndefinedReason::ANonPositive)
        );
        assert_eq!(UndefinedReason::BNonPositive.to_string(), "b ≤ 0");
    }

    #[test]
    fn optimum_beats_log_grid() {
        let mut checked = 0;
        for seed in 0..40u64 {
            let d = 2 + (seed as usize % 5);
            let curve = error_curve(&random_params(d, seed), &random_env(d, 20 + seed as usize, seed + 100)).unwrap();
            let Some(tau) = optimal_temperature(&curve).value() else {
                continue;
            };
            let g_opt = curve.eval(tau);
            let grid_min = (0..400)
                .map(|k| curve.eval(10f64.powf(-2.0 + 4.0 * k as f64 / 399.0)))
                .fold(f64::INFINITY, f64::min);
            assert!(g_opt <= grid_min + 1e-9 * g_opt.abs());
            // positive second difference around the optimum
            let h = 1e-3 * tau;
            let second = curve.eval(tau + h) - 2.0 * g_opt + curve.eval(tau - h);
            assert!(second > 0.0);
            let fd = second / (h * h);
            let exact = curve.curvature_at_optimum();
            assert!((fd - exact).abs() < 1e-3 * exact, "{fd} vs {exact}");
            checked += 1;
            if checked == 20 {
                break;
            }
        }
        assert_eq!(checked, 20);
    }

    #[test]
    fn expanded_f1_agrees_with_compact_form() {
        for seed in 0..10u64 {
            let d = 5;
            let env = random_env(d, 25, seed);
            let params = random_params(d, seed + 50);
            let (v21, v22, sx, mu) = (&params.v21, params.v22, env.sigma_x(), env.mu_w());
            let lf = env.l() as f64;
            let mv = mu * v21.transpose();
            let cross = sx * &mv * sx + sx * (linalg::trace_of_product(&mv, sx) / lf);
            let expanded = sx * (v22 * v22 * env.sigma2() / lf)
                + &cross * v22
                + cross.transpose() * v22
                + (sx * env.b() * sx + sx * (linalg::trace_of_product(env.b(), sx) / lf)) * (v22 * v22);
            let m11 = &params.m11;
            let a_expanded = linalg::trace_of_product(env.a(), &(m11.transpose() * expanded * m11));
            let curve = error_curve(&params, &env).unwrap();
            assert!((a_expanded - curve.a).abs() <= 1e-12 * curve.a.abs(), "{a_expanded} {}", curve.a);
        }
    }

    #[test]
    fn heuristic_isotropic() {
        let d = 20;
        for c in [0.5, 1.0, 2.0, 3.0] {
            let sx = Mat::identity(d, d) * c;
            let m11 = Mat::identity(d, d) * d as f64;
            let raw = heuristic_temperature(&m11, &sx, 1.0).unwrap().value().unwrap();
            assert!((raw - c * d as f64).abs() < 1e-10);
            let t = heuristic_temperature(&m11, &sx, default_heuristic_scale(d)).unwrap();
            assert!((t.value().unwrap() - c).abs() < 1e-12);
        }
    }

    #[test]
    fn heuristic_degenerate() {
        let t = heuristic_temperature(&Mat::zeros(3, 3), &Mat::identity(3, 3), 1.0).unwrap();
        assert_eq!(t, Temperature::Undefined(UndefinedReason::DegenerateDenominator));
    }

    #[test]
    fn heuristic_increases_with_shift() {
        let d = 6;
        let mut rng = RngStream::new(9, 0).rng();
        let m11 = spd(d, &mut rng);
        let base = spd(d, &mut rng);
        let mut last = 0.0;
        for k in 1..30 {
            let c = 0.2 * k as f64;
            let t = heuristic_temperature(&m11, &(&base * c), 1.0).unwrap().value().unwrap();
            assert!(t > last);
            last = t;
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn sandwich_symmetric_and_linear(seed in 0u64..10_000, n in 1usize..20, div in 1usize..20, alpha in -3.0f64..3.0) {
            let d = 4;
            let mut rng = RngStream::new(seed, 2).rng();
            let sigma = spd(d, &mut rng);
            let s1 = spd(d, &mut rng);
            let s2 = spd(d, &mut rng);
            let out = moment_sandwich(n, div, &sigma, &s1).unwrap();
            prop_assert!(linalg::max_asymmetry(&out) <= 1e-12 * out.amax());
            let lhs = moment_sandwich(n, div, &sigma, &(&s1 + &s2 * alpha)).unwrap();
            let rhs = out + moment_sandwich(n, div, &sigma, &s2).unwrap() * alpha;
            prop_assert!((lhs - &rhs).amax() <= 1e-12 * rhs.amax().max(1.0));
        }

        #[test]
        fn rescaling_invariance(seed in 0u64..10_000, kappa in 0.05f64..20.0) {
            let env = random_env(4, 30, seed);
            let params = random_params(4, seed + 1);
            let scaled = AttentionParams::new(
                &params.m11 / kappa, params.m21.clone(), params.v21.clone(), params.v22, params.tau / kappa,
            ).unwrap();
            let g1 = generalization_error(&params, &env).unwrap();
            let g2 = generalization_error(&scaled, &env).unwrap();
            prop_assert!((g1 - g2).abs() <= 1e-10 * g1.abs());
        }

        #[test]
        fn quadratic_coefficient_positive(seed in 0u64..10_000, v22 in prop_oneof![-2.0f64..-0.01, 0.01f64..2.0]) {
            let env = random_env(5, 30, seed);
            let mut params = random_params(5, seed + 2);
            params.v21 = Vector::zeros(5);
            params.v22 = v22;
            prop_assert!(error_curve(&params, &env).unwrap().a > 0.0);
        }
    }
}
