use nalgebra::DMatrix;

use super::LinearMap;
use crate::error::{Error, Result};
use crate::kl::check_triangular;

/// Least-squares solution of `design * X = rhs` through Householder QR.
pub(crate) fn lstsq(design: DMatrix<f64>, rhs: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    if design.nrows() < design.ncols() {
        return Err(Error::decomposition(format!(
            "{what}: {} equations for {} unknowns",
            design.nrows(),
            design.ncols()
        )));
    }
    let qr = design.qr();
    let r = qr.r();
    check_triangular(&r, what)?;
    let mut qtb = rhs.clone();
    qr.q_tr_mul(&mut qtb);
    let top = qtb.rows(0, r.ncols()).into_owned();
    r.solve_upper_triangular(&top)
        .ok_or_else(|| Error::decomposition(format!("{what}: singular triangular factor")))
}

/// Ridge coefficient used when there are fewer samples than inputs:
/// `1e-8 * trace(Xi Xi^T) / N_xi`.
pub fn default_ridge(xi: &DMatrix<f64>) -> f64 {
    1e-8 * xi.iter().map(|v| v * v).sum::<f64>() / xi.nrows() as f64
}

/// `W = H Xi^T (Xi Xi^T + lambda I)^{-1}`, with `Xi` holding one input per
/// column and `H` the matching outputs.
pub fn fit_ols(xi: &DMatrix<f64>, h: &DMatrix<f64>, lambda: f64) -> Result<LinearMap> {
    let (n_xi, m) = xi.shape();
    if m == 0 || h.ncols() != m {
        return Err(Error::invalid(format!(
            "OLS needs matching sample counts (inputs {m}, outputs {})",
            h.ncols()
        )));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::invalid(format!("ridge coefficient must be >= 0, got {lambda}")));
    }
    let n_eta = h.nrows();
    let (design, rhs) = if lambda > 0.0 {
        let mut d = DMatrix::zeros(m + n_xi, n_xi);
        d.view_mut((0, 0), (m, n_xi)).copy_from(&xi.transpose());
        for i in 0..n_xi {
            d[(m + i, i)] = lambda.sqrt();
        }
        let mut r = DMatrix::zeros(m + n_xi, n_eta);
        r.view_mut((0, 0), (m, n_eta)).copy_from(&h.transpose());
        (d, r)
    } else {
        (xi.transpose(), h.transpose())
    };
    let wt = lstsq(design, &rhs, "OLS normal matrix (add ridge)")?;
    Ok(LinearMap::new(wt.transpose()))
}
