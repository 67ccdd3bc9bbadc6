//! Closed-form pretrained parameters.
//!
//! With pooled input covariance `S`, task statistics `(mu_w, Sigma_w)` and
//! noise variance `s2`:
//!
//! ```text
//!     M11 = d (S + (s2/l) Sigma_w^{-1})^{-1}     m21 = 0
//!     v21 = s2/(d l) S^{-1} Sigma_w^{-1} mu_w     v22 = 1/d     tau = 1
//! ```

use rayon::prelude::*;

use crate::attention::{predict_linearized, AttentionParams};
use crate::bayes::{bayes_predict, RidgePrior};
use crate::data::{sample_prompt_with, DataDistribution, Prompt};
use crate::error::{Error, Result};
use crate::gaussian::RngStream;
use crate::linalg::{self, Mat, Vector};

/// Tasks sampled per parallel work unit when building a corpus.
const CHUNK_TASKS: usize = 64;
/// Relative jitter added to the estimated task covariance.
pub const TASK_COV_JITTER: f64 = 1e-10;

/// Running mean, centered scatter and residual sums over pooled inputs.
#[derive(Debug, Clone)]
struct Accumulator {
    n: usize,
    mean: Vector,
    scatter: Mat,
    resid_ss: f64,
    resid_n: usize,
}

impl Accumulator {
    fn new(d: usize) -> Self {
        Self {
            n: 0,
            mean: Vector::zeros(d),
            scatter: Mat::zeros(d, d),
            resid_ss: 0.0,
            resid_n: 0,
        }
    }

    fn of_rows(x: &Mat) -> Self {
        let n = x.nrows();
        let d = x.ncols();
        let mean = x.row_sum().transpose() / n as f64;
        let centered = Mat::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
        Self {
            n,
            mean,
            scatter: centered.tr_mul(&centered),
            resid_ss: 0.0,
            resid_n: 0,
        }
    }

    /// Pairwise update of mean and scatter (Chan et al.).
    fn merge(&mut self, other: &Accumulator) {
        self.resid_ss += other.resid_ss;
        self.resid_n += other.resid_n;
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            self.n = other.n;
            self.mean = other.mean.clone();
            self.scatter = other.scatter.clone();
            return;
        }
        let na = self.n as f64;
        let nb = other.n as f64;
        let n = na + nb;
        let delta = &other.mean - &self.mean;
        self.scatter += &other.scatter + &delta * delta.transpose() * (na * nb / n);
        self.mean += &delta * (nb / n);
        self.n += other.n;
    }
}

/// Sufficient statistics of a pretraining corpus of `m` prompts of length
/// `l`: the pooled input mean and centered scatter `X^T X`, the observed
/// task vectors and, when labels were seen, the residual sum of squares
/// against `w^T x`.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainCorpus {
    m: usize,
    l: usize,
    input_mean: Vector,
    scatter: Mat,
    task_vectors: Option<Mat>,
    residual: Option<(f64, usize)>,
    noise_var_hint: Option<f64>,
}

impl PretrainCorpus {
    /// From an `(m l) x d` matrix of pooled inputs, centered internally.
    pub fn from_inputs(
        pooled_inputs: &Mat,
        l: usize,
        task_vectors: Option<Mat>,
        noise_var_hint: Option<f64>,
    ) -> Result<Self> {
        let rows = pooled_inputs.nrows();
        if l == 0 || rows == 0 || !rows.is_multiple_of(l) {
            return Err(Error::InvalidArgument(format!(
                "pooled input rows ({rows}) must be a positive multiple of l ({l})"
            )));
        }
        let d = pooled_inputs.ncols();
        if let Some(t) = &task_vectors {
            if t.ncols() != d {
                return Err(Error::DimensionMismatch {
                    context: "PretrainCorpus task vectors",
                    expected: d,
                    got: t.ncols(),
                });
            }
        }
        let acc = Accumulator::of_rows(pooled_inputs);
        Ok(Self {
            m: rows / l,
            l,
            input_mean: acc.mean,
            scatter: acc.scatter,
            task_vectors,
            residual: None,
            noise_var_hint,
        })
    }

    /// From fully labeled prompts; the held-out query labels count towards
    /// the noise estimate.
    pub fn from_prompts(prompts: &[Prompt]) -> Result<Self> {
        let first = prompts
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty prompt list".into()))?;
        let (l, d) = (first.len(), first.dim());
        let mut acc = Accumulator::new(d);
        let mut tasks = Mat::zeros(prompts.len(), d);
        for (k, p) in prompts.iter().enumerate() {
            if p.len() != l || p.dim() != d {
                return Err(Error::InvalidArgument(
                    "prompts in a corpus must share l and d".into(),
                ));
            }
            acc.merge(&prompt_accumulator(p));
            tasks.set_row(k, &p.task_vector().transpose());
        }
        Ok(Self::from_parts(prompts.len(), l, acc, tasks))
    }

    /// Draws `m` prompts of length `l` from `dist`; prompt `k` uses
    /// `stream.substream(k)`. Work is split into fixed chunks and reduced
    /// in index order, so the result does not depend on the thread count.
    pub fn sample(dist: &DataDistribution, m: usize, l: usize, stream: &RngStream) -> Result<Self> {
        if m == 0 {
            return Err(Error::InvalidArgument("corpus needs m >= 1 tasks".into()));
        }
        let d = dist.dim();
        let n_chunks = m.div_ceil(CHUNK_TASKS);
        let chunks: Vec<(Accumulator, Vec<Vector>)> = (0..n_chunks)
            .into_par_iter()
            .map(|c| {
                let mut acc = Accumulator::new(d);
                let mut tasks = Vec::with_capacity(CHUNK_TASKS);
                for k in (c * CHUNK_TASKS)..((c + 1) * CHUNK_TASKS).min(m) {
                    let mut rng = stream.substream(k as u64).rng();
                    let p = sample_prompt_with(dist, l, &mut rng)?;
                    acc.merge(&prompt_accumulator(&p));
                    tasks.push(p.task_vector().clone());
                }
                Ok((acc, tasks))
            })
            .collect::<Result<_>>()?;
        let mut acc = Accumulator::new(d);
        let mut tasks = Mat::zeros(m, d);
        let mut k = 0;
        for (chunk, ws) in &chunks {
            acc.merge(chunk);
            for w in ws {
                tasks.set_row(k, &w.transpose());
                k += 1;
            }
        }
        Ok(Self::from_parts(m, l, acc, tasks))
    }

    fn from_parts(m: usize, l: usize, acc: Accumulator, tasks: Mat) -> Self {
        Self {
            m,
            l,
            input_mean: acc.mean,
            scatter: acc.scatter,
            task_vectors: Some(tasks),
            residual: Some((acc.resid_ss, acc.resid_n)),
            noise_var_hint: None,
        }
    }

    pub fn with_noise_var_hint(mut self, hint: f64) -> Self {
        self.noise_var_hint = Some(hint);
        self
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn l(&self) -> usize {
        self.l
    }

    pub fn dim(&self) -> usize {
        self.input_mean.len()
    }

    pub fn input_mean(&self) -> &Vector {
        &self.input_mean
    }

    /// `X^T X` of the centered pooled inputs.
    pub fn centered_scatter(&self) -> &Mat {
        &self.scatter
    }

    /// `X^T X / (m l)`.
    pub fn pooled_covariance(&self) -> Mat {
        &self.scatter / (self.m * self.l) as f64
    }

    pub fn task_vectors(&self) -> Option<&Mat> {
        self.task_vectors.as_ref()
    }
}

fn prompt_accumulator(p: &Prompt) -> Accumulator {
    let mut acc = Accumulator::of_rows(p.inputs());
    let fit = p.inputs() * p.task_vector();
    let l = p.len();
    let mut ss = 0.0;
    for i in 0..l - 1 {
        ss += (p.labels()[i] - fit[i]).powi(2);
    }
    ss += (p.true_query_label() - fit[l - 1]).powi(2);
    acc.resid_ss = ss;
    acc.resid_n = l;
    acc
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatedTaskStats {
    pub mu_w_hat: Vector,
    pub sigma_w_hat: Mat,
    pub sigma2_hat: f64,
}

impl EstimatedTaskStats {
    /// Exact population values of a distribution.
    pub fn from_distribution(dist: &DataDistribution) -> Self {
        Self {
            mu_w_hat: dist.task.w_spec.mean().clone(),
            sigma_w_hat: dist.task.w_spec.covariance().clone(),
            sigma2_hat: dist.noise.sigma2(),
        }
    }
}

/// Sample mean and covariance (divisor `m - 1`) of the task vectors plus
/// `1e-10 * max(trace/d, 1)` on the diagonal; noise variance from the label
/// residuals, falling back to the corpus hint.
pub fn estimate_task_stats(corpus: &PretrainCorpus) -> Result<EstimatedTaskStats> {
    let tasks = corpus.task_vectors.as_ref().ok_or_else(|| {
        Error::InvalidArgument("corpus has no task vectors to estimate from".into())
    })?;
    let m = tasks.nrows();
    if m < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 task vectors, got {m}"
        )));
    }
    let d = tasks.ncols();
    let acc = Accumulator::of_rows(tasks);
    let mut sigma = acc.scatter / (m - 1) as f64;
    let jitter = TASK_COV_JITTER * (sigma.trace() / d as f64).max(1.0);
    for i in 0..d {
        sigma[(i, i)] += jitter;
    }
    let sigma2_hat = match (corpus.residual, corpus.noise_var_hint) {
        (Some((ss, n)), _) if n > 0 => ss / n as f64,
        (_, Some(h)) => h,
        _ => {
            return Err(Error::InvalidArgument(
                "corpus has neither labels nor a noise variance hint".into(),
            ))
        }
    };
    Ok(EstimatedTaskStats {
        mu_w_hat: acc.mean,
        sigma_w_hat: sigma,
        sigma2_hat,
    })
}

/// Closed-form parameters for pooled covariance `sigma_hat`.
pub fn params_from_covariance(
    sigma_hat: &Mat,
    stats: &EstimatedTaskStats,
    l: usize,
) -> Result<AttentionParams> {
    let d = sigma_hat.nrows();
    linalg::check_square(sigma_hat, d, "pooled covariance")?;
    linalg::check_square(&stats.sigma_w_hat, d, "task covariance")?;
    linalg::check_len(&stats.mu_w_hat, d, "task mean")?;
    if l == 0 {
        return Err(Error::InvalidArgument("l must be positive".into()));
    }
    let df = d as f64;
    let lf = l as f64;
    let s2 = stats.sigma2_hat;
    let w_prec = linalg::spd_inverse(&stats.sigma_w_hat, "task covariance")?;
    let inner = sigma_hat + &w_prec * (s2 / lf);
    let m11 = linalg::symmetrize(&linalg::spd_inverse(&inner, "regularized pooled covariance")?) * df;
    let v21 = if s2 == 0.0 || stats.mu_w_hat.iter().all(|v| *v == 0.0) {
        Vector::zeros(d)
    } else {
        let rhs = &w_prec * &stats.mu_w_hat;
        linalg::spd_solve(sigma_hat, &rhs, "pooled covariance")? * (s2 / (df * lf))
    };
    AttentionParams::new(m11, Vector::zeros(d), v21, 1.0 / df, 1.0)
}

pub fn pretrain_params(corpus: &PretrainCorpus, stats: &EstimatedTaskStats) -> Result<AttentionParams> {
    params_from_covariance(&corpus.pooled_covariance(), stats, corpus.l)
}

/// Parameters with every estimate replaced by its population value.
pub fn pretrain_population(dist: &DataDistribution, l: usize) -> Result<AttentionParams> {
    params_from_covariance(
        dist.x_spec.covariance(),
        &EstimatedTaskStats::from_distribution(dist),
        l,
    )
}

/// Mean `|y_linearized - y_bayes|` over prompts divided by the pooled
/// standard deviation of the context labels.
pub fn bayes_alignment_gap(params: &AttentionParams, prompts: &[Prompt], prior: &RidgePrior) -> Result<f64> {
    if prompts.is_empty() {
        return Err(Error::InvalidArgument("empty prompt list".into()));
    }
    let mut gap = 0.0;
    let (mut n, mut sum, mut sum_sq) = (0usize, 0.0, 0.0);
    for p in prompts {
        let lin = predict_linearized(p, params)?.y_hat;
        let bayes = bayes_predict(p, prior)?;
        gap += (lin - bayes).abs();
        n += p.labels().len();
        sum += p.labels().sum();
        sum_sq += p.labels().norm_squared();
    }
    let mean = sum / n as f64;
    let var = sum_sq / n as f64 - mean * mean;
    if !(var > 0.0) {
        return Err(Error::InvalidArgument("context labels have zero variance".into()));
    }
    Ok(gap / prompts.len() as f64 / var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{sample_prompt, TaskDistribution};
    use crate::gaussian::{GaussianSpec, NoiseSpec};
    use proptest::prelude::*;
    use rand::Rng;

    fn spd(d: usize, seed: u64) -> Mat {
        let mut rng = RngStream::new(seed, 0).rng();
        let a = Mat::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        &a * a.transpose() + Mat::identity(d, d) * 0.5
    }

    #[test]
    fn merge_matches_direct_scatter() {
        let mut rng = RngStream::new(1, 0).rng();
        let x = Mat::from_fn(37, 3, |_, _| rng.random_range(-2.0..5.0));
        let direct = Accumulator::of_rows(&x);
        let mut acc = Accumulator::new(3);
        for start in (0..37).step_by(10) {
            let rows = 10.min(37 - start);
            acc.merge(&Accumulator::of_rows(&x.rows(start, rows).into_owned()));
        }
        assert_eq!(acc.n, 37);
        assert!((&acc.mean - &direct.mean).amax() < 1e-12);
        assert!((&acc.scatter - &direct.scatter).amax() < 1e-10);
    }

    #[test]
    fn from_inputs_centers() {
        let x = Mat::from_fn(12, 2, |i, j| (i * (j + 1)) as f64 + 3.0);
        let c = PretrainCorpus::from_inputs(&x, 4, None, Some(0.1)).unwrap();
        assert_eq!(c.m(), 3);
        let mean = x.row_sum().transpose() / 12.0;
        let centered = Mat::from_fn(12, 2, |i, j| x[(i, j)] - mean[j]);
        assert!(centered.row_sum().amax() < 1e-10);
        assert!((c.centered_scatter() - centered.tr_mul(&centered)).amax() < 1e-9);
        assert!(PretrainCorpus::from_inputs(&x, 5, None, None).is_err());
    }

    #[test]
    fn identical_tasks_give_jitter_covariance() {
        let d = 3;
        let mu = Vector::from_vec(vec![0.5, -1.0, 2.0]);
        let tasks = Mat::from_fn(10, d, |_, j| mu[j]);
        let x = Mat::from_fn(20, d, |i, j| ((i + j) % 3) as f64);
        let c = PretrainCorpus::from_inputs(&x, 2, Some(tasks), Some(0.01)).unwrap();
        let s = estimate_task_stats(&c).unwrap();
        assert!((&s.mu_w_hat - &mu).amax() < 1e-15);
        assert!((&s.sigma_w_hat - Mat::identity(d, d) * TASK_COV_JITTER).amax() < 1e-20);
        assert_eq!(s.sigma2_hat, 0.01);
    }

    #[test]
    fn estimation_errors() {
        let x = Mat::identity(4, 2);
        let c = PretrainCorpus::from_inputs(&x, 2, None, Some(1.0)).unwrap();
        assert!(estimate_task_stats(&c).is_err());
        let one = PretrainCorpus::from_inputs(&x, 4, Some(Mat::zeros(1, 2)), Some(1.0)).unwrap();
        assert!(estimate_task_stats(&one).is_err());
        let no_noise = PretrainCorpus::from_inputs(&x, 2, Some(Mat::zeros(2, 2)), None).unwrap();
        assert!(estimate_task_stats(&no_noise).is_err());
    }

    #[test]
    fn sampled_corpus_estimates() {
        let d = 50;
        let m = 5000;
        let dist = DataDistribution::isotropic(d, 0.1).unwrap();
        let c = PretrainCorpus::sample(&dist, m, 10, &RngStream::new(5, 0)).unwrap();
        let s = estimate_task_stats(&c).unwrap();
        assert!(s.mu_w_hat.norm() <= 3.0 * (d as f64 / m as f64).sqrt());
        assert!((s.sigma2_hat - 0.01).abs() < 0.001, "{}", s.sigma2_hat);
    }

    #[test]
    fn sampling_is_deterministic_and_chunk_safe() {
        let dist = DataDistribution::isotropic(3, 0.5).unwrap();
        let stream = RngStream::new(8, 1);
        let a = PretrainCorpus::sample(&dist, 150, 4, &stream).unwrap();
        let b = PretrainCorpus::sample(&dist, 150, 4, &stream).unwrap();
        assert_eq!(a, b);
        let prompts: Vec<Prompt> = (0..150)
            .map(|k| sample_prompt(&dist, 4, &stream.substream(k)).unwrap())
            .collect();
        let c = PretrainCorpus::from_prompts(&prompts).unwrap();
        assert_eq!(a.task_vectors(), c.task_vectors());
        assert!((a.centered_scatter() - c.centered_scatter()).amax() < 1e-10);
    }

    #[test]
    fn zero_task_mean_gives_zero_v21() {
        let d = 4;
        let stats = EstimatedTaskStats {
            mu_w_hat: Vector::zeros(d),
            sigma_w_hat: spd(d, 2),
            sigma2_hat: 0.3,
        };
        let p = params_from_covariance(&spd(d, 3), &stats, 20).unwrap();
        assert_eq!(p.v21, Vector::zeros(d));
        assert_eq!(p.m21, Vector::zeros(d));
        assert_eq!(p.v22, 0.25);
        assert_eq!(p.tau, 1.0);
    }

    #[test]
    fn isotropic_noiseless_limit() {
        let d = 10;
        let dist = DataDistribution::new(
            GaussianSpec::standard(d),
            TaskDistribution::new(GaussianSpec::standard(d)),
            NoiseSpec::new(1e-12).unwrap(),
        )
        .unwrap();
        let p = pretrain_population(&dist, 100).unwrap();
        assert!((p.m11 - Mat::identity(d, d) * d as f64).amax() < 1e-9);
    }

    #[test]
    fn scale_assumptions_hold_for_sampled_corpora() {
        let d = 8;
        let l = 40;
        let mu = Vector::from_element(d, 0.3);
        let dist = DataDistribution::new(
            GaussianSpec::standard(d),
            TaskDistribution::new(GaussianSpec::isotropic(mu, 1.0)),
            NoiseSpec::from_std(0.5).unwrap(),
        )
        .unwrap();
        for seed in 0..4 {
            let c = PretrainCorpus::sample(&dist, 200, l, &RngStream::new(seed, 0)).unwrap();
            let params = pretrain_params(&c, &estimate_task_stats(&c).unwrap()).unwrap();
            // c = 2 covers lambda_min(S) ~ 1 and |mu_w| ~ 0.85
            let check = params.scale_check(2.0, l);
            assert!(check.all_ok(), "{check:?}");
            assert_eq!(check.v22_abs, 1.0 / d as f64);
        }
    }

    #[test]
    fn alignment_gap_rejects_empty() {
        let params = AttentionParams::zeros(2);
        let prior = RidgePrior::new(Vector::zeros(2), Mat::identity(2, 2), 1.0).unwrap();
        assert!(bayes_alignment_gap(&params, &[], &prior).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn two_forms_of_m11_agree(seed in 0u64..10_000, d in 1usize..6, l in 2usize..200, m in 1usize..50, s2 in 0.01f64..5.0) {
            let sigma_hat = spd(d, seed);
            let sigma_w = spd(d, seed + 1);
            let stats = EstimatedTaskStats { mu_w_hat: Vector::zeros(d), sigma_w_hat: sigma_w.clone(), sigma2_hat: s2 };
            let p = params_from_covariance(&sigma_hat, &stats, l).unwrap();
            // (d l / s2) (X^T X / (m s2) + Sigma_w^{-1})^{-1} with X^T X = m l S
            let xtx = &sigma_hat * (m * l) as f64;
            let inner = &xtx / (m as f64 * s2) + sigma_w.try_inverse().unwrap();
            let alt = inner.try_inverse().unwrap() * (d as f64 * l as f64 / s2);
            prop_assert!((&p.m11 - &alt).amax() <= 1e-8 * alt.amax());
        }

        #[test]
        fn m11_v22_product_is_scale_free(seed in 0u64..10_000, d in 1usize..8, l in 2usize..100) {
            let stats = EstimatedTaskStats { mu_w_hat: Vector::zeros(d), sigma_w_hat: spd(d, seed), sigma2_hat: 0.2 };
            let sigma_hat = spd(d, seed + 9);
            let p = params_from_covariance(&sigma_hat, &stats, l).unwrap();
            let target = (&sigma_hat + stats.sigma_w_hat.clone().try_inverse().unwrap() * (0.2 / l as f64))
                .try_inverse().unwrap();
            prop_assert!((&p.m11 * p.v22 - &target).amax() <= 1e-9 * target.amax());
        }
    }
}
