//! Conjugate-style few-shot updates of synthesized class distributions.
//!
//! A handful of labeled examples for a class are reduced to additive
//! sufficient statistics (count, sum, sum of squares), so the update can be
//! applied once in batch or incrementally in any order with bit-identical
//! results. The Gaussian update keeps a prior pseudo-count of exactly 1 on
//! the mean and combines precisions using the empirical variance centered
//! at the prior mean (not the sample mean).

use crate::error::{Error, Result};
use crate::expfam::{BernoulliProduct, ClassDistribution, GaussianDiag};
use ndarray::{Array1, ArrayView1, ArrayView2};

/// Additive sufficient statistics of the labeled examples seen so far for
/// one class.
#[derive(Debug, Clone, PartialEq)]
pub struct FewShotStats {
    n: usize,
    sum: Array1<f64>,
    sumsq: Array1<f64>,
}

impl FewShotStats {
    pub fn new(dim: usize) -> Self {
        Self {
            n: 0,
            sum: Array1::zeros(dim),
            sumsq: Array1::zeros(dim),
        }
    }

    pub fn from_samples(samples: ArrayView2<f64>) -> Self {
        let mut stats = Self::new(samples.ncols());
        for row in samples.rows() {
            stats
                .accumulate(row)
                .expect("rows of one matrix share a dimension");
        }
        stats
    }

    /// Rebuilds an accumulator from stored raw parts.
    pub(crate) fn from_raw(n: usize, sum: Array1<f64>, sumsq: Array1<f64>) -> Result<Self> {
        if sum.len() != sumsq.len() {
            return Err(Error::ShapeMismatch(format!(
                "sum has {} dims but sumsq has {}",
                sum.len(),
                sumsq.len()
            )));
        }
        Ok(Self { n, sum, sumsq })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.sum.len()
    }

    pub fn sum(&self) -> ArrayView1<'_, f64> {
        self.sum.view()
    }

    pub fn sumsq(&self) -> ArrayView1<'_, f64> {
        self.sumsq.view()
    }

    /// Adds one observation.
    pub fn accumulate(&mut self, x: ArrayView1<f64>) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::ShapeMismatch(format!(
                "stats track {} dims but observation has {}",
                self.dim(),
                x.len()
            )));
        }
        self.n += 1;
        self.sum += &x;
        self.sumsq += &x.mapv(|v| v * v);
        Ok(())
    }

    /// Pools another accumulator into this one.
    pub fn merge(&mut self, other: &FewShotStats) -> Result<()> {
        if other.dim() != self.dim() {
            return Err(Error::ShapeMismatch(format!(
                "stats track {} dims but merged stats track {}",
                self.dim(),
                other.dim()
            )));
        }
        self.n += other.n;
        self.sum += &other.sum;
        self.sumsq += &other.sumsq;
        Ok(())
    }
}

/// Posterior-style update of a Gaussian prior from accumulated stats:
/// mean (mu_hat + sum) / (1 + n); variance from combined precisions
/// 1/sigma_hat^2 + n/sigma^2, where sigma^2 is the empirical variance of
/// the observations centered at the prior mean, floored before its
/// reciprocal is taken. The floor is applied only there: the combined
/// precision is then finite and positive on its own, and leaving its
/// reciprocal untouched keeps precision additivity exact. With n = 0 the
/// prior is returned unchanged.
pub fn fewshot_update(
    prior: &GaussianDiag,
    stats: &FewShotStats,
    var_floor: f64,
) -> Result<GaussianDiag> {
    if stats.dim() != prior.dim() {
        return Err(Error::ShapeMismatch(format!(
            "prior has {} dims but stats track {}",
            prior.dim(),
            stats.dim()
        )));
    }
    if !(var_floor > 0.0) || !var_floor.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "variance floor must be positive and finite, got {var_floor}"
        )));
    }
    if stats.n == 0 {
        return Ok(prior.clone());
    }
    let n = stats.n as f64;
    let prior_mean = prior.mean();
    let prior_var = prior.var();
    let mut mean = Array1::<f64>::zeros(prior.dim());
    let mut log_var = Array1::<f64>::zeros(prior.dim());
    for d in 0..prior.dim() {
        mean[d] = (prior_mean[d] + stats.sum[d]) / (1.0 + n);
        // E[(x - mu_hat)^2] expanded over the stored sums.
        let emp = stats.sumsq[d] / n - 2.0 * prior_mean[d] * stats.sum[d] / n
            + prior_mean[d] * prior_mean[d];
        let emp = emp.max(var_floor);
        let precision = 1.0 / prior_var[d] + n / emp;
        log_var[d] = (1.0 / precision).ln();
    }
    GaussianDiag::new(mean, log_var)
}

/// Beta-style analogue for the Bernoulli family with the same unit prior
/// pseudo-count: posterior p = (p_prior + sum) / (1 + n). Not part of the
/// Gaussian update contract; provided for family symmetry.
pub fn fewshot_update_bernoulli(
    prior: &BernoulliProduct,
    stats: &FewShotStats,
) -> Result<BernoulliProduct> {
    if stats.dim() != prior.dim() {
        return Err(Error::ShapeMismatch(format!(
            "prior has {} dims but stats track {}",
            prior.dim(),
            stats.dim()
        )));
    }
    if stats.n == 0 {
        return Ok(prior.clone());
    }
    let n = stats.n as f64;
    let probs = prior.probs();
    let logits = Array1::from_shape_fn(prior.dim(), |d| {
        // Clamp away from {0,1} so the logit stays finite.
        let p = ((probs[d] + stats.sum[d]) / (1.0 + n)).clamp(1e-12, 1.0 - 1e-12);
        (p / (1.0 - p)).ln()
    });
    BernoulliProduct::new(logits)
}

/// Family-dispatching wrapper around the two updates above.
pub fn update_distribution(
    dist: &ClassDistribution,
    stats: &FewShotStats,
    var_floor: f64,
) -> Result<ClassDistribution> {
    match dist {
        ClassDistribution::Gaussian(g) => Ok(ClassDistribution::Gaussian(fewshot_update(
            g, stats, var_floor,
        )?)),
        ClassDistribution::Bernoulli(b) => Ok(ClassDistribution::Bernoulli(
            fewshot_update_bernoulli(b, stats)?,
        )),
    }
}
