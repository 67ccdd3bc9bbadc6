//! Multivariate Gaussian specifications and deterministic sampling.
//!
//! Random streams use ChaCha8 keyed by `seed_from_u64(master_seed)` with the
//! ChaCha stream word set to `stream_id`. Standard normals come from the
//! ziggurat sampler in `rand_distr::StandardNormal`. Both are portable, so a
//! `(master_seed, stream_id)` pair yields the same draws on every platform.

use nalgebra::SymmetricEigen;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{self, Mat, Vector};

/// Relative symmetry tolerance: `max |S_ij - S_ji| <= 1e-10 * max |S|`.
pub const SYMMETRY_TOL: f64 = 1e-10;
/// Base diagonal jitter for covariance factorization, relative to `trace/d`.
pub const FACTOR_JITTER: f64 = 1e-12;
pub const FACTOR_ATTEMPTS: usize = 3;

/// Optional well-behavedness bounds on a Gaussian: `|mean| <= c1`,
/// `lambda_min >= c2`, `lambda_max <= c3`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidationBounds {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
}

impl Default for ValidationBounds {
    fn default() -> Self {
        Self {
            c1: 10.0,
            c2: 1e-3,
            c3: 1e3,
        }
    }
}

/// A lower-triangular (or diagonal) square root `L` with `L L^T = Sigma`.
#[derive(Debug, Clone, PartialEq)]
pub enum CovFactor {
    Diagonal(Vector),
    Lower(Mat),
}

impl CovFactor {
    pub fn to_dense(&self) -> Mat {
        match self {
            CovFactor::Diagonal(s) => Mat::from_diagonal(s),
            CovFactor::Lower(l) => l.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSpec {
    mean: Vector,
    covariance: Mat,
    factor: Option<CovFactor>,
}

impl GaussianSpec {
    /// Checks shapes and symmetry. The covariance is factorized eagerly; if
    /// that fails (e.g. an indefinite matrix) construction still succeeds
    /// and the failure surfaces from [`GaussianSpec::sample`].
    pub fn new(mean: Vector, covariance: Mat) -> Result<Self> {
        let d = mean.len();
        linalg::check_square(&covariance, d, "GaussianSpec covariance")?;
        let tol = SYMMETRY_TOL * linalg::max_abs(&covariance);
        let asym = linalg::max_asymmetry(&covariance);
        if asym > tol {
            return Err(Error::NotSymmetric {
                asymmetry: asym,
                tolerance: tol,
            });
        }
        let factor = factorize(&covariance);
        Ok(Self {
            mean,
            covariance,
            factor,
        })
    }

    pub fn standard(d: usize) -> Self {
        Self::isotropic(Vector::zeros(d), 1.0)
    }

    /// `N(mean, scale * I)`.
    pub fn isotropic(mean: Vector, scale: f64) -> Self {
        let d = mean.len();
        Self::new(mean, Mat::identity(d, d) * scale).expect("scaled identity is symmetric")
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &Vector {
        &self.mean
    }

    pub fn covariance(&self) -> &Mat {
        &self.covariance
    }

    pub fn factor(&self) -> Option<&CovFactor> {
        self.factor.as_ref()
    }

    /// Same covariance, different mean.
    pub fn with_mean(&self, mean: Vector) -> Result<Self> {
        linalg::check_len(&mean, self.dim(), "GaussianSpec mean")?;
        Ok(Self {
            mean,
            covariance: self.covariance.clone(),
            factor: self.factor.clone(),
        })
    }

    /// Second moment `Sigma + mu mu^T`.
    pub fn second_moment(&self) -> Mat {
        &self.covariance + &self.mean * self.mean.transpose()
    }

    /// `n` i.i.d. draws as the rows of an `n x d` matrix.
    pub fn sample(&self, n: usize, stream: &RngStream) -> Result<Mat> {
        let mut rng = stream.rng();
        self.sample_with(n, &mut rng)
    }

    /// Draws `n * d` standard normals row-major from `rng` and maps each row
    /// through `mean + L z`.
    pub fn sample_with<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Mat> {
        let factor = self.factor.as_ref().ok_or(Error::Factorization {
            attempts: FACTOR_ATTEMPTS,
        })?;
        let d = self.dim();
        let mut z = Mat::zeros(n, d);
        for i in 0..n {
            for j in 0..d {
                z[(i, j)] = rng.sample(StandardNormal);
            }
        }
        let mut x = match factor {
            CovFactor::Diagonal(s) => {
                for j in 0..d {
                    let sj = s[j];
                    z.column_mut(j).scale_mut(sj);
                }
                z
            }
            CovFactor::Lower(l) => z * l.transpose(),
        };
        for j in 0..d {
            let mu = self.mean[j];
            if mu != 0.0 {
                x.column_mut(j).add_scalar_mut(mu);
            }
        }
        Ok(x)
    }

    pub fn sample_one_with<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vector> {
        let x = self.sample_with(1, rng)?;
        Ok(x.row(0).transpose())
    }
}

fn factorize(cov: &Mat) -> Option<CovFactor> {
    let d = cov.nrows();
    let is_diagonal = (0..d).all(|i| (0..d).all(|j| i == j || cov[(i, j)] == 0.0));
    if is_diagonal {
        let diag = cov.diagonal();
        if diag.iter().any(|v| *v < 0.0 || !v.is_finite()) {
            return None;
        }
        return Some(CovFactor::Diagonal(diag.map(f64::sqrt)));
    }
    linalg::cholesky_with_jitter(cov, FACTOR_JITTER, FACTOR_ATTEMPTS)
        .ok()
        .map(|ch| CovFactor::Lower(ch.l()))
}

/// Checks a spec against [`ValidationBounds`] using the extreme eigenvalues
/// of the symmetrized covariance.
pub fn validate_spec(spec: &GaussianSpec, bounds: &ValidationBounds) -> Result<()> {
    let norm = spec.mean.norm();
    if norm > bounds.c1 {
        return Err(Error::BoundViolated {
            bound: "c1",
            detail: format!("|mean| = {norm} > {}", bounds.c1),
        });
    }
    if spec.dim() == 0 {
        return Ok(());
    }
    let eig = SymmetricEigen::new(linalg::symmetrize(&spec.covariance));
    let lmin = eig.eigenvalues.min();
    let lmax = eig.eigenvalues.max();
    if lmin < bounds.c2 {
        let psd = if lmin < 0.0 {
            " (covariance not PSD)"
        } else {
            ""
        };
        return Err(Error::BoundViolated {
            bound: "c2",
            detail: format!("lambda_min = {lmin} < {}{psd}", bounds.c2),
        });
    }
    if lmax > bounds.c3 {
        return Err(Error::BoundViolated {
            bound: "c3",
            detail: format!("lambda_max = {lmax} > {}", bounds.c3),
        });
    }
    Ok(())
}

/// Label-noise variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    sigma2: f64,
}

impl NoiseSpec {
    pub fn new(sigma2: f64) -> Result<Self> {
        if !(sigma2 >= 0.0) || !sigma2.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "noise variance must be finite and >= 0, got {sigma2}"
            )));
        }
        Ok(Self { sigma2 })
    }

    pub fn from_std(sigma: f64) -> Result<Self> {
        Self::new(sigma * sigma)
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn sigma(&self) -> f64 {
        self.sigma2.sqrt()
    }
}

/// Identifies one reproducible random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngStream {
    pub master_seed: u64,
    pub stream_id: u64,
}

impl RngStream {
    pub fn new(master_seed: u64, stream_id: u64) -> Self {
        Self {
            master_seed,
            stream_id,
        }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master_seed);
        rng.set_stream(self.stream_id);
        rng
    }

    /// Child stream for `key`; the map is `stream_id ^ splitmix64(key)`
    /// passed through one more splitmix64 round.
    pub fn substream(&self, key: u64) -> Self {
        Self {
            master_seed: self.master_seed,
            stream_id: splitmix64(self.stream_id ^ splitmix64(key)),
        }
    }
}

/// SplitMix64 finalizer (Steele, Lea, Flood constants).
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
