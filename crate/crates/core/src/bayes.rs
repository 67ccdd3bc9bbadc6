//! Bayes-optimal ridge regression: the posterior mean of `w` under a
//! Gaussian prior and Gaussian label noise.

use crate::data::{Prompt, PromptMoments};
use crate::error::{Error, Result};
use crate::gaussian::SYMMETRY_TOL;
use crate::linalg::{self, Mat, Vector};

/// Noise variances below this are treated as this value inside the solve.
pub const NOISE_FLOOR: f64 = 1e-12;

/// Prior `w ~ N(mu0, sigma0)` and noise variance. The prior precision is
/// computed once at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct RidgePrior {
    mu0: Vector,
    sigma0: Mat,
    noise_var: f64,
    precision: Mat,
}

impl RidgePrior {
    pub fn new(mu0: Vector, sigma0: Mat, noise_var: f64) -> Result<Self> {
        let d = mu0.len();
        linalg::check_square(&sigma0, d, "RidgePrior sigma0")?;
        let tol = SYMMETRY_TOL * linalg::max_abs(&sigma0);
        let asym = linalg::max_asymmetry(&sigma0);
        if asym > tol {
            return Err(Error::NotSymmetric {
                asymmetry: asym,
                tolerance: tol,
            });
        }
        if !(noise_var >= 0.0) || !noise_var.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "noise variance must be finite and >= 0, got {noise_var}"
            )));
        }
        let precision = linalg::spd_inverse(&sigma0, "RidgePrior sigma0")?;
        Ok(Self {
            mu0,
            sigma0,
            noise_var,
            precision,
        })
    }

    pub fn dim(&self) -> usize {
        self.mu0.len()
    }

    pub fn mu0(&self) -> &Vector {
        &self.mu0
    }

    pub fn sigma0(&self) -> &Mat {
        &self.sigma0
    }

    pub fn noise_var(&self) -> f64 {
        self.noise_var
    }

    pub fn precision(&self) -> &Mat {
        &self.precision
    }
}

/// Solves `(XtX + s2 P) w = Xty + s2 P mu0` with `P` the prior precision
/// and `s2` the floored noise variance. Same solution as
/// `(XtX/s2 + P)^{-1}(Xty/s2 + P mu0)` but better conditioned as `s2 -> 0`.
pub fn posterior_mean(xtx: &Mat, xty: &Vector, prior: &RidgePrior) -> Result<Vector> {
    let d = prior.dim();
    linalg::check_square(xtx, d, "posterior_mean XtX")?;
    linalg::check_len(xty, d, "posterior_mean Xty")?;
    let s2 = prior.noise_var.max(NOISE_FLOOR);
    let lhs = xtx + &prior.precision * s2;
    let rhs = xty + &prior.precision * &prior.mu0 * s2;
    linalg::spd_solve(&lhs, &rhs, "ridge posterior")
}

struct Centered {
    xtx: Mat,
    xty: Vector,
    x_mean: Vector,
    y_mean: f64,
}

fn center(m: &PromptMoments) -> Centered {
    let n = (m.l - 1) as f64;
    let x_mean = &m.sum_x_labeled / n;
    let y_mean = m.sum_y / n;
    let mut xtx = &m.gram_all - &m.query * m.query.transpose();
    xtx -= &x_mean * x_mean.transpose() * n;
    let xtx = linalg::symmetrize(&xtx);
    let xty = &m.sum_xy - &x_mean * (n * y_mean);
    Centered {
        xtx,
        xty,
        x_mean,
        y_mean,
    }
}

fn check_prompt(p: &Prompt, prior: &RidgePrior) -> Result<()> {
    if p.dim() != prior.dim() {
        return Err(Error::DimensionMismatch {
            context: "prompt vs ridge prior",
            expected: prior.dim(),
            got: p.dim(),
        });
    }
    Ok(())
}

/// Posterior mean with the labeled pairs centered by their own means.
pub fn bayes_estimate(p: &Prompt, prior: &RidgePrior) -> Result<Vector> {
    check_prompt(p, prior)?;
    let c = center(&PromptMoments::from_prompt(p));
    posterior_mean(&c.xtx, &c.xty, prior)
}

/// `w_hat^T (x_query - x_mean) + y_mean`, means over the labeled pairs.
pub fn bayes_predict(p: &Prompt, prior: &RidgePrior) -> Result<f64> {
    check_prompt(p, prior)?;
    bayes_predict_from_moments(&PromptMoments::from_prompt(p), prior)
}

pub(crate) fn bayes_predict_from_moments(m: &PromptMoments, prior: &RidgePrior) -> Result<f64> {
    let c = center(m);
    let w = posterior_mean(&c.xtx, &c.xty, prior)?;
    Ok(w.dot(&(&m.query - &c.x_mean)) + c.y_mean)
}
