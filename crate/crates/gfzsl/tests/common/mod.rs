//! Helpers shared by the integration suites: reference solvers kept
//! independent of the library's own linear algebra.

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;

/// Prints the one-line verdict for an acceptance criterion. The assert
/// that follows carries the details; this line is the summary.
pub fn verdict(criterion: usize, name: &str, ok: bool) {
    println!(
        "acceptance {criterion} {name}: {}",
        if ok { "PASS" } else { "FAIL" }
    );
}

/// Minimizes `||targets - W inputs||^2 + lambda ||W||^2` with conjugate
/// gradients on the normal equations, one output row at a time. No
/// factorization, so it cross-checks the closed-form solver.
pub fn cg_ridge(targets: ArrayView2<f64>, inputs: ArrayView2<f64>, lambda: f64) -> Array2<f64> {
    let k = inputs.nrows();
    let d = targets.nrows();
    let mut normal = inputs.dot(&inputs.t());
    for i in 0..k {
        normal[[i, i]] += lambda;
    }
    let rhs = inputs.dot(&targets.t());
    let mut weights = Array2::zeros((d, k));
    for j in 0..d {
        let x = cg_solve(&normal, &rhs.column(j).to_owned());
        weights.row_mut(j).assign(&x);
    }
    weights
}

fn cg_solve(a: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
    let n = b.len();
    let mut x = Array1::<f64>::zeros(n);
    let mut r = b.clone();
    let mut p = r.clone();
    let mut rs = r.dot(&r);
    let b_norm = rs.sqrt();
    if rs == 0.0 {
        return x;
    }
    // SPD systems of side <= 20 converge in n steps; the extra rounds mop
    // up rounding.
    for _ in 0..(4 * n + 8) {
        let ap = a.dot(&p);
        let alpha = rs / p.dot(&ap);
        x.scaled_add(alpha, &p);
        r.scaled_add(-alpha, &ap);
        let rs_next = r.dot(&r);
        if rs_next.sqrt() <= 1e-14 * (1.0 + b_norm) {
            break;
        }
        p = &r + &(&p * (rs_next / rs));
        rs = rs_next;
    }
    x
}

pub fn standard_normal_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.sample::<f64, _>(StandardNormal))
}

pub fn relative_gap(actual: ArrayView2<f64>, reference: ArrayView2<f64>) -> f64 {
    let diff = (&actual - &reference).mapv(|v| v * v).sum().sqrt();
    let denom = reference.mapv(|v| v * v).sum().sqrt();
    diff / denom.max(1e-12)
}
