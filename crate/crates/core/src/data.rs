//! In-context linear-regression tasks, prompts, and prompt statistics.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::gaussian::{GaussianSpec, NoiseSpec, RngStream};
use crate::linalg::{Mat, Vector};

/// Distribution of task vectors `w ~ N(mu_w, Sigma_w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskDistribution {
    pub w_spec: GaussianSpec,
}

impl TaskDistribution {
    pub fn new(w_spec: GaussianSpec) -> Self {
        Self { w_spec }
    }

    pub fn dim(&self) -> usize {
        self.w_spec.dim()
    }
}

/// Inputs `x ~ N(mu_x, Sigma_x)`, labels `y = w^T x + eps`.
#[derive(Debug, Clone, PartialEq)]
pub struct DataDistribution {
    pub x_spec: GaussianSpec,
    pub task: TaskDistribution,
    pub noise: NoiseSpec,
}

impl DataDistribution {
    pub fn new(x_spec: GaussianSpec, task: TaskDistribution, noise: NoiseSpec) -> Result<Self> {
        if x_spec.dim() != task.dim() {
            return Err(Error::DimensionMismatch {
                context: "DataDistribution task dimension",
                expected: x_spec.dim(),
                got: task.dim(),
            });
        }
        Ok(Self {
            x_spec,
            task,
            noise,
        })
    }

    /// Standard normal inputs and tasks with noise std `sigma`.
    pub fn isotropic(d: usize, sigma: f64) -> Result<Self> {
        Self::new(
            GaussianSpec::standard(d),
            TaskDistribution::new(GaussianSpec::standard(d)),
            NoiseSpec::from_std(sigma)?,
        )
    }

    pub fn dim(&self) -> usize {
        self.x_spec.dim()
    }
}

/// One prompt: `l` inputs (the last is the query), `l - 1` labels, the
/// held-out query label and the task vector that generated it.
#[derive(Debug, Clone, PartialEq)]
pub struct Prompt {
    inputs: Mat,
    labels: Vector,
    true_query_label: f64,
    task_vector: Vector,
}

impl Prompt {
    pub fn new(inputs: Mat, labels: Vector, true_query_label: f64, task_vector: Vector) -> Result<Self> {
        let l = inputs.nrows();
        if l < 2 {
            return Err(Error::InvalidArgument(format!(
                "a prompt needs l >= 2 columns, got {l}"
            )));
        }
        if labels.len() != l - 1 {
            return Err(Error::DimensionMismatch {
                context: "Prompt labels",
                expected: l - 1,
                got: labels.len(),
            });
        }
        if task_vector.len() != inputs.ncols() {
            return Err(Error::DimensionMismatch {
                context: "Prompt task vector",
                expected: inputs.ncols(),
                got: task_vector.len(),
            });
        }
        Ok(Self {
            inputs,
            labels,
            true_query_label,
            task_vector,
        })
    }

    /// Context length `l` (labeled pairs plus the query).
    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn inputs(&self) -> &Mat {
        &self.inputs
    }

    pub fn labels(&self) -> &Vector {
        &self.labels
    }

    pub fn query(&self) -> Vector {
        self.inputs.row(self.len() - 1).transpose()
    }

    pub fn true_query_label(&self) -> f64 {
        self.true_query_label
    }

    pub fn task_vector(&self) -> &Vector {
        &self.task_vector
    }

    /// The `(d+1) x l` embedding: inputs stacked over labels, with a zero in
    /// the query's label slot.
    pub fn embedding(&self) -> Mat {
        let (l, d) = (self.len(), self.dim());
        let mut z = Mat::zeros(d + 1, l);
        for i in 0..l {
            for j in 0..d {
                z[(j, i)] = self.inputs[(i, j)];
            }
            if i + 1 < l {
                z[(d, i)] = self.labels[i];
            }
        }
        z
    }

    /// Copy with every input (context and query) shifted by `shift`. Labels
    /// are left as they are.
    pub fn translated(&self, shift: &Vector) -> Prompt {
        let mut inputs = self.inputs.clone();
        for mut row in inputs.row_iter_mut() {
            row += shift.transpose();
        }
        Prompt {
            inputs,
            ..self.clone()
        }
    }
}

pub fn sample_task(dist: &TaskDistribution, stream: &RngStream) -> Result<Vector> {
    dist.w_spec.sample_one_with(&mut stream.rng())
}

/// Draw order within the stream: the task vector, then the `l x d` inputs
/// row-major, then `l` noise draws.
pub fn sample_prompt(dist: &DataDistribution, l: usize, stream: &RngStream) -> Result<Prompt> {
    sample_prompt_with(dist, l, &mut stream.rng())
}

pub(crate) fn sample_prompt_with<R: Rng + ?Sized>(
    dist: &DataDistribution,
    l: usize,
    rng: &mut R,
) -> Result<Prompt> {
    if l < 2 {
        return Err(Error::InvalidArgument(format!(
            "context size must be >= 2, got {l}"
        )));
    }
    let w = dist.task.w_spec.sample_one_with(rng)?;
    let inputs = dist.x_spec.sample_with(l, rng)?;
    let sigma = dist.noise.sigma();
    let clean = &inputs * &w;
    let mut y = Vector::zeros(l);
    for i in 0..l {
        let eps: f64 = rng.sample(StandardNormal);
        y[i] = clean[i] + sigma * eps;
    }
    let true_query_label = y[l - 1];
    let labels = y.rows(0, l - 1).into_owned();
    Ok(Prompt {
        inputs,
        labels,
        true_query_label,
        task_vector: w,
    })
}

/// Centered prompt statistics with divisor `l` throughout. Input sums run
/// over all `l` inputs including the query; label-bearing sums run over the
/// `l - 1` labeled pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryStats {
    pub s_x: Vector,
    pub s_y: f64,
    pub c_xx: Mat,
    pub c_xy: Vector,
    pub c_yy: f64,
}

/// Raw (uncentered) sums of a prompt. Centered statistics, the second
/// moments used by linear attention and the labeled-pair scatter of the ridge
/// oracle are all derived from these.
#[derive(Debug, Clone)]
pub(crate) struct PromptMoments {
    pub l: usize,
    /// `sum_{i <= l} x_i x_i^T`
    pub gram_all: Mat,
    /// `sum_{i <= l} x_i`
    pub sum_x_all: Vector,
    /// `sum_{i <= l-1} x_i`
    pub sum_x_labeled: Vector,
    pub sum_y: f64,
    /// `sum_{i <= l-1} y_i x_i`
    pub sum_xy: Vector,
    pub sum_yy: f64,
    pub query: Vector,
}

impl PromptMoments {
    pub fn from_prompt(p: &Prompt) -> Self {
        let x = p.inputs();
        let l = p.len();
        let query = p.query();
        let sum_x_all = x.row_sum().transpose();
        let sum_x_labeled = &sum_x_all - &query;
        let gram_all = x.tr_mul(x);
        let labeled = x.rows(0, l - 1);
        let sum_xy = labeled.tr_mul(p.labels());
        let sum_y = p.labels().sum();
        let sum_yy = p.labels().norm_squared();
        Self {
            l,
            gram_all,
            sum_x_all,
            sum_x_labeled,
            sum_y,
            sum_xy,
            sum_yy,
            query,
        }
    }

    pub fn summary(&self) -> SummaryStats {
        let lf = self.l as f64;
        let s_x = &self.sum_x_all / lf;
        let s_y = self.sum_y / lf;
        let mut c_xx = &self.gram_all / lf - &s_x * s_x.transpose();
        // exact symmetry
        c_xx = (&c_xx + c_xx.transpose()) * 0.5;
        let c_xy = &self.sum_xy / lf - &s_x * s_y;
        let c_yy = self.sum_yy / lf - s_y * s_y;
        SummaryStats {
            s_x,
            s_y,
            c_xx,
            c_xy,
            c_yy,
        }
    }
}

pub fn summary_stats(p: &Prompt) -> SummaryStats {
    PromptMoments::from_prompt(p).summary()
}
