//! Exponential-family class-conditional distributions.
//!
//! Two families are provided: diagonal-covariance Gaussians and products of
//! independent Bernoullis. Both support weighted maximum-likelihood
//! estimation (weights drive the EM M-step), log-density evaluation, and a
//! bijection onto unconstrained real vectors used as regression targets:
//! variances travel as log-variances, probabilities as logits.

use crate::error::{Error, Result};
use ndarray::{concatenate, Array1, ArrayView1, ArrayView2, Axis};

const LN_2PI: f64 = 1.8378770664093453;

/// Keeps exp(log_var) inside the normal (non-zero, non-infinite) f64 range
/// when unconstrained regression outputs are mapped back to variances.
const LOG_VAR_CLAMP: f64 = 708.0;

/// Family choice plus its estimation guard: the variance floor for
/// Gaussians, the Laplace smoothing count for Bernoullis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FamilySpec {
    GaussianDiag { var_floor: f64 },
    BernoulliProduct { smoothing: f64 },
}

impl FamilySpec {
    pub fn gaussian() -> Self {
        FamilySpec::GaussianDiag { var_floor: 1e-6 }
    }

    pub fn bernoulli() -> Self {
        FamilySpec::BernoulliProduct { smoothing: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            FamilySpec::GaussianDiag { var_floor } => {
                if !(var_floor > 0.0) || !var_floor.is_finite() {
                    return Err(Error::InvalidArgument(format!(
                        "variance floor must be positive and finite, got {var_floor}"
                    )));
                }
            }
            FamilySpec::BernoulliProduct { smoothing } => {
                if !(smoothing > 0.0) || !smoothing.is_finite() {
                    return Err(Error::InvalidArgument(format!(
                        "smoothing must be positive and finite, got {smoothing}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Length of the unconstrained parameter vector for feature dimension
    /// `dim_d`: mean and log-variance blocks for Gaussians, one logit block
    /// for Bernoullis.
    pub fn param_len(&self, dim_d: usize) -> usize {
        match self {
            FamilySpec::GaussianDiag { .. } => 2 * dim_d,
            FamilySpec::BernoulliProduct { .. } => dim_d,
        }
    }
}

/// Gaussian with diagonal covariance, stored as mean and log-variance.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianDiag {
    mean: Array1<f64>,
    log_var: Array1<f64>,
}

impl GaussianDiag {
    pub fn new(mean: Array1<f64>, log_var: Array1<f64>) -> Result<Self> {
        if mean.len() != log_var.len() {
            return Err(Error::ShapeMismatch(format!(
                "mean has {} entries but log-variance has {}",
                mean.len(),
                log_var.len()
            )));
        }
        for v in mean.iter().chain(log_var.iter()) {
            if !v.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "non-finite distribution parameter {v}"
                )));
            }
        }
        Ok(Self { mean, log_var })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> ArrayView1<'_, f64> {
        self.mean.view()
    }

    pub fn log_var(&self) -> ArrayView1<'_, f64> {
        self.log_var.view()
    }

    pub fn var(&self) -> Array1<f64> {
        self.log_var.mapv(f64::exp)
    }

    fn log_density_raw(&self, x: ArrayView1<f64>) -> f64 {
        let mut acc = 0.0;
        for d in 0..self.dim() {
            let lv = self.log_var[d];
            let diff = x[d] - self.mean[d];
            acc += diff * diff * (-lv).exp() + lv + LN_2PI;
        }
        -0.5 * acc
    }
}

/// Product of independent Bernoullis over binary feature dimensions,
/// stored as logits (the natural parameters).
#[derive(Debug, Clone, PartialEq)]
pub struct BernoulliProduct {
    logits: Array1<f64>,
}

impl BernoulliProduct {
    pub fn new(logits: Array1<f64>) -> Result<Self> {
        if let Some(v) = logits.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite logit {v}")));
        }
        Ok(Self { logits })
    }

    pub fn dim(&self) -> usize {
        self.logits.len()
    }

    pub fn logits(&self) -> ArrayView1<'_, f64> {
        self.logits.view()
    }

    /// Success probabilities sigmoid(logit) per dimension.
    pub fn probs(&self) -> Array1<f64> {
        self.logits.mapv(|t| 1.0 / (1.0 + (-t).exp()))
    }

    fn log_density_raw(&self, x: ArrayView1<f64>) -> f64 {
        let mut acc = 0.0;
        for d in 0..self.dim() {
            let t = self.logits[d];
            acc += x[d] * t - softplus(t);
        }
        acc
    }
}

/// log(1 + e^t) without overflow for large |t|.
fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

/// One class's fitted distribution, of either family.
#[derive(Debug, Clone, PartialEq)]
pub enum ClassDistribution {
    Gaussian(GaussianDiag),
    Bernoulli(BernoulliProduct),
}

impl ClassDistribution {
    pub fn dim(&self) -> usize {
        match self {
            ClassDistribution::Gaussian(g) => g.dim(),
            ClassDistribution::Bernoulli(b) => b.dim(),
        }
    }

    pub fn log_density(&self, x: ArrayView1<f64>) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::ShapeMismatch(format!(
                "distribution has dimension {} but input has {}",
                self.dim(),
                x.len()
            )));
        }
        Ok(self.log_density_raw(x))
    }

    /// Log-density without the dimension check; callers validate shapes once
    /// up front.
    pub(crate) fn log_density_raw(&self, x: ArrayView1<f64>) -> f64 {
        debug_assert_eq!(x.len(), self.dim());
        match self {
            ClassDistribution::Gaussian(g) => g.log_density_raw(x),
            ClassDistribution::Bernoulli(b) => b.log_density_raw(x),
        }
    }

    /// Flattens to the unconstrained regression-target vector:
    /// `[mean | log_var]` for Gaussians, logits for Bernoullis.
    pub fn to_unconstrained(&self) -> Array1<f64> {
        match self {
            ClassDistribution::Gaussian(g) => {
                concatenate![Axis(0), g.mean.view(), g.log_var.view()]
            }
            ClassDistribution::Bernoulli(b) => b.logits.clone(),
        }
    }

    pub fn family_matches(&self, family: FamilySpec) -> bool {
        matches!(
            (self, family),
            (ClassDistribution::Gaussian(_), FamilySpec::GaussianDiag { .. })
                | (ClassDistribution::Bernoulli(_), FamilySpec::BernoulliProduct { .. })
        )
    }
}

/// Inverse of [`ClassDistribution::to_unconstrained`]. For Gaussians the
/// log-variance block is clamped to ±708 so that reconstructed variances
/// are always positive and finite.
pub fn from_unconstrained(family: FamilySpec, v: ArrayView1<f64>) -> Result<ClassDistribution> {
    match family {
        FamilySpec::GaussianDiag { .. } => {
            if v.len() % 2 != 0 {
                return Err(Error::ShapeMismatch(format!(
                    "gaussian parameter vector must have even length (mean and \
                     log-variance blocks), got {}",
                    v.len()
                )));
            }
            let d = v.len() / 2;
            let mean = v.slice(ndarray::s![..d]).to_owned();
            let log_var = v
                .slice(ndarray::s![d..])
                .mapv(|t| t.clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP));
            Ok(ClassDistribution::Gaussian(GaussianDiag::new(mean, log_var)?))
        }
        FamilySpec::BernoulliProduct { .. } => Ok(ClassDistribution::Bernoulli(
            BernoulliProduct::new(v.to_owned())?,
        )),
    }
}

/// Weighted maximum-likelihood estimate of a class distribution.
///
/// Gaussians: weighted mean and weighted MLE variance (divide by total
/// weight, not total-1), variance floored elementwise. Bernoullis: Laplace-
/// smoothed frequencies `(Σw·x + s) / (Σw + 2s)` stored as logits; samples
/// must be exactly 0 or 1.
pub fn estimate(
    family: FamilySpec,
    samples: ArrayView2<f64>,
    weights: Option<&[f64]>,
) -> Result<ClassDistribution> {
    family.validate()?;
    let n = samples.nrows();
    let d = samples.ncols();
    if n == 0 {
        return Err(Error::InvalidArgument(
            "cannot estimate a distribution from zero samples".into(),
        ));
    }
    if let Some(w) = weights {
        if w.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "{} samples but {} weights",
                n,
                w.len()
            )));
        }
        if let Some(bad) = w.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "weights must be finite and non-negative, got {bad}"
            )));
        }
    }
    let total: f64 = match weights {
        Some(w) => w.iter().sum(),
        None => n as f64,
    };
    if !(total > 0.0) {
        return Err(Error::InvalidArgument("total sample weight is zero".into()));
    }
    match family {
        FamilySpec::GaussianDiag { var_floor } => {
            let mut mean = Array1::<f64>::zeros(d);
            for (i, row) in samples.rows().into_iter().enumerate() {
                let w = weights.map_or(1.0, |w| w[i]);
                mean.scaled_add(w, &row);
            }
            mean /= total;
            let mut var = Array1::<f64>::zeros(d);
            for (i, row) in samples.rows().into_iter().enumerate() {
                let w = weights.map_or(1.0, |w| w[i]);
                let diff = &row - &mean;
                var.scaled_add(w, &(&diff * &diff));
            }
            var /= total;
            let log_var = var.mapv(|v| v.max(var_floor).ln());
            Ok(ClassDistribution::Gaussian(GaussianDiag::new(mean, log_var)?))
        }
        FamilySpec::BernoulliProduct { smoothing } => {
            for (i, row) in samples.rows().into_iter().enumerate() {
                if let Some(v) = row.iter().find(|v| **v != 0.0 && **v != 1.0) {
                    return Err(Error::InvalidArgument(format!(
                        "bernoulli family needs binary samples, sample {i} has value {v}"
                    )));
                }
            }
            let mut sums = Array1::<f64>::zeros(d);
            for (i, row) in samples.rows().into_iter().enumerate() {
                let w = weights.map_or(1.0, |w| w[i]);
                sums.scaled_add(w, &row);
            }
            let logits = sums.mapv(|s| {
                let p = (s + smoothing) / (total + 2.0 * smoothing);
                (p / (1.0 - p)).ln()
            });
            Ok(ClassDistribution::Bernoulli(BernoulliProduct::new(logits)?))
        }
    }
}
