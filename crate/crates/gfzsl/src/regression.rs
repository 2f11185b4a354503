//! Closed-form multi-output ridge regression from class attributes to
//! unconstrained distribution-parameter blocks.
//!
//! Conventions: the attribute matrix `A` is K x S with one column per class;
//! the target matrix `M` is D_out x S with one column per class. The linear
//! fit is W = M A^T (A A^T + lambda I)^-1, the kernel fit is
//! alpha = M (G + lambda I)^-1 over the S x S gram matrix G. Both are
//! computed through symmetric positive-definite solves, never by forming an
//! explicit inverse.

use crate::error::{Error, Result};
use crate::linalg;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KernelSpec {
    Linear,
    Quadratic,
    Rbf { gamma: f64 },
}

impl KernelSpec {
    pub fn validate(&self) -> Result<()> {
        if let KernelSpec::Rbf { gamma } = self {
            if !(*gamma > 0.0) || !gamma.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "rbf gamma must be positive and finite, got {gamma}"
                )));
            }
        }
        Ok(())
    }

    /// k(a, b) for one pair of attribute vectors.
    pub fn eval(&self, a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
        match self {
            KernelSpec::Linear => a.dot(&b),
            KernelSpec::Quadratic => {
                let d = a.dot(&b) + 1.0;
                d * d
            }
            KernelSpec::Rbf { gamma } => {
                let mut sq = 0.0;
                for (x, y) in a.iter().zip(b.iter()) {
                    let d = x - y;
                    sq += d * d;
                }
                (-gamma * sq).exp()
            }
        }
    }
}

/// Weights of a fitted linear ridge map, one output dimension per row.
#[derive(Debug, Clone, PartialEq)]
pub struct RidgeSolution {
    weights: Array2<f64>,
    lambda: f64,
}

impl RidgeSolution {
    pub fn new(weights: Array2<f64>, lambda: f64) -> Self {
        Self { weights, lambda }
    }

    pub fn weights(&self) -> ArrayView2<'_, f64> {
        self.weights.view()
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn dim_out(&self) -> usize {
        self.weights.nrows()
    }

    pub fn dim_in(&self) -> usize {
        self.weights.ncols()
    }
}

/// Dual coefficients of a fitted kernel ridge map together with the seen
/// attribute columns the kernel is evaluated against.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSolution {
    coeffs: Array2<f64>,
    seen_attrs: Array2<f64>,
    kernel: KernelSpec,
    lambda: f64,
}

impl KernelSolution {
    pub fn new(
        coeffs: Array2<f64>,
        seen_attrs: Array2<f64>,
        kernel: KernelSpec,
        lambda: f64,
    ) -> Result<Self> {
        if coeffs.ncols() != seen_attrs.ncols() {
            return Err(Error::ShapeMismatch(format!(
                "{} coefficient columns but {} stored classes",
                coeffs.ncols(),
                seen_attrs.ncols()
            )));
        }
        kernel.validate()?;
        Ok(Self {
            coeffs,
            seen_attrs,
            kernel,
            lambda,
        })
    }

    /// Fits targets (D_out x S) against attribute columns (K x S).
    pub fn fit(
        targets: ArrayView2<f64>,
        seen_attrs: ArrayView2<f64>,
        kernel: KernelSpec,
        lambda: f64,
    ) -> Result<Self> {
        if targets.ncols() != seen_attrs.ncols() {
            return Err(Error::ShapeMismatch(format!(
                "targets have {} columns but attributes have {}",
                targets.ncols(),
                seen_attrs.ncols()
            )));
        }
        let g = gram(kernel, seen_attrs)?;
        let coeffs = fit_kernel(targets, g.view(), lambda)?;
        Self::new(coeffs, seen_attrs.to_owned(), kernel, lambda)
    }

    pub fn coeffs(&self) -> ArrayView2<'_, f64> {
        self.coeffs.view()
    }

    pub fn seen_attrs(&self) -> ArrayView2<'_, f64> {
        self.seen_attrs.view()
    }

    pub fn kernel(&self) -> KernelSpec {
        self.kernel
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn dim_out(&self) -> usize {
        self.coeffs.nrows()
    }

    pub fn dim_in(&self) -> usize {
        self.seen_attrs.nrows()
    }
}

/// W = M A^T (A A^T + lambda I_K)^-1 via an SPD solve of
/// (A A^T + lambda I) X = A M^T, returning W = X^T.
pub fn fit_linear(
    targets: ArrayView2<f64>,
    inputs: ArrayView2<f64>,
    lambda: f64,
) -> Result<RidgeSolution> {
    if targets.ncols() != inputs.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "targets have {} columns but inputs have {}",
            targets.ncols(),
            inputs.ncols()
        )));
    }
    check_lambda(lambda)?;
    let k = inputs.nrows();
    let mut g = inputs.dot(&inputs.t());
    for i in 0..k {
        g[(i, i)] += lambda;
    }
    let rhs = inputs.dot(&targets.t());
    let x = linalg::solve_spd(g.view(), rhs.view()).map_err(|e| match e {
        Error::Singular(detail) => Error::Singular(format!(
            "ridge system (A A^T + {lambda} I) is numerically singular: {detail}"
        )),
        other => other,
    })?;
    Ok(RidgeSolution::new(x.t().to_owned(), lambda))
}

/// W a for one attribute vector.
pub fn predict_linear(sol: &RidgeSolution, a: ArrayView1<f64>) -> Result<Array1<f64>> {
    if a.len() != sol.dim_in() {
        return Err(Error::ShapeMismatch(format!(
            "regressor expects {} inputs, got {}",
            sol.dim_in(),
            a.len()
        )));
    }
    Ok(sol.weights.dot(&a))
}

/// Pairwise kernel matrix over the columns of `attrs` (K x S). Built from
/// the upper triangle and mirrored, so the result is exactly symmetric.
pub fn gram(kernel: KernelSpec, attrs: ArrayView2<f64>) -> Result<Array2<f64>> {
    kernel.validate()?;
    let s = attrs.ncols();
    if s == 0 {
        return Err(Error::InvalidArgument(
            "gram matrix needs at least one column".into(),
        ));
    }
    let mut g = Array2::<f64>::zeros((s, s));
    for i in 0..s {
        for j in i..s {
            let v = kernel.eval(attrs.column(i), attrs.column(j));
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    Ok(g)
}

/// alpha = M (G + lambda I)^-1 via an SPD solve. If factorization of
/// G + lambda I fails, a jitter of 1e-10 * trace(G)/S is added to the
/// diagonal and the solve retried once.
pub fn fit_kernel(
    targets: ArrayView2<f64>,
    gram: ArrayView2<f64>,
    lambda: f64,
) -> Result<Array2<f64>> {
    let s = gram.nrows();
    if gram.ncols() != s {
        return Err(Error::ShapeMismatch(format!(
            "gram matrix must be square, got {}x{}",
            s,
            gram.ncols()
        )));
    }
    if targets.ncols() != s {
        return Err(Error::ShapeMismatch(format!(
            "targets have {} columns but gram has side {}",
            targets.ncols(),
            s
        )));
    }
    check_lambda(lambda)?;
    let scale = gram.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut asym = 0.0f64;
    for i in 0..s {
        for j in (i + 1)..s {
            asym = asym.max((gram[(i, j)] - gram[(j, i)]).abs());
        }
    }
    if asym > 1e-8 * (1.0 + scale) {
        return Err(Error::InvalidArgument(format!(
            "gram matrix is not symmetric (max asymmetry {asym:e})"
        )));
    }
    let mut sys = gram.to_owned();
    for i in 0..s {
        sys[(i, i)] += lambda;
    }
    let factor = match linalg::cholesky(sys.view()) {
        Ok(f) => f,
        Err(Error::Singular(_)) => {
            let trace: f64 = (0..s).map(|i| gram[(i, i)]).sum();
            let jitter = 1e-10 * trace / s as f64;
            for i in 0..s {
                sys[(i, i)] += jitter;
            }
            linalg::cholesky(sys.view()).map_err(|e| match e {
                Error::Singular(detail) => Error::Singular(format!(
                    "kernel system singular even after jitter {jitter:e}: {detail}"
                )),
                other => other,
            })?
        }
        Err(other) => return Err(other),
    };
    let x = factor.solve_mat(targets.t().to_owned().view());
    Ok(x.t().to_owned())
}

/// Similarities of one attribute vector against every stored column:
/// entry i = k(a, a_i).
pub fn kernel_vector(
    kernel: KernelSpec,
    seen_attrs: ArrayView2<f64>,
    a: ArrayView1<f64>,
) -> Result<Array1<f64>> {
    kernel.validate()?;
    if a.len() != seen_attrs.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "attribute vector has {} entries but stored attributes have {}",
            a.len(),
            seen_attrs.nrows()
        )));
    }
    Ok(Array1::from_iter(
        seen_attrs.columns().into_iter().map(|col| kernel.eval(a, col)),
    ))
}

/// coeffs * k_a for one attribute vector.
pub fn predict_kernel(sol: &KernelSolution, a: ArrayView1<f64>) -> Result<Array1<f64>> {
    let k = kernel_vector(sol.kernel, sol.seen_attrs.view(), a)?;
    Ok(sol.coeffs.dot(&k))
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "ridge lambda must be positive and finite, got {lambda}"
        )));
    }
    Ok(())
}
