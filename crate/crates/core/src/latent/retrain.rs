//! Transfer of a trained network by re-solving its output layer, from
//! labeled target pairs, from PDE residuals, or from both.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::mlp::Mlp;
use super::ols::lstsq;
use crate::error::{Error, Result};
use crate::field::{Field, FieldKind, Grid};
use crate::kl::{check_triangular, KlBasis};
use crate::solver::coefficient_operator;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrainMode {
    Data,
    Physics,
    Combined,
}

/// What to do when labeled data alone cannot determine the output layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Underdetermined {
    Reject,
    /// Fit the data exactly with the smallest change to the source layer.
    MinimumChange,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrainOptions {
    pub mode: RetrainMode,
    /// Weight of the residual term in combined mode.
    pub lambda_r: f64,
    pub underdetermined: Underdetermined,
}

/// Everything needed to evaluate the target PDE residual of a latent
/// prediction.
#[derive(Clone, Copy, Debug)]
pub struct ResidualProblem<'a> {
    pub grid: &'a Grid,
    /// Target state mean (satisfies the target IBCs).
    pub mean: &'a Field,
    pub k: &'a KlBasis,
    pub state: &'a KlBasis,
}

/// `A(xi_k)` and `b(xi_k)` such that `A eta + b` is the discrete residual
/// of `h_t - (k h_x)_x` for `h = mean + Psi_h eta` and
/// `k = k_mean + Psi_k xi_k`, on the interior nodes.
pub fn assemble_nonlinear_residual(
    grid: &Grid,
    mean: &Field,
    k: &KlBasis,
    state: &KlBasis,
    xi_k: &[f64],
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    if *mean.grid() != *grid || mean.kind() != FieldKind::SpaceTime || state.grid() != grid {
        return Err(Error::invalid("state mean and basis must be space-time fields on the grid"));
    }
    if k.grid() != grid || k.kind() != FieldKind::SpaceOnly {
        return Err(Error::invalid("conductivity basis must be a space basis on the grid"));
    }
    let kf = k.forward(xi_k)?;
    let op = coefficient_operator(grid, &kf)?;
    let n_m = grid.interior_len();
    let mut a = DMatrix::zeros(n_m, state.n_terms());
    for j in 0..state.n_terms() {
        a.column_mut(j).copy_from_slice(&op.residual(state.modes().column(j).as_slice()));
    }
    let b = DVector::from_vec(op.residual(mean.values()));
    Ok((a, b))
}

/// Replaces the output layer of `mlp`; every other parameter is untouched.
///
/// `data` holds target inputs and latent labels, one per column.
/// `residual` supplies the problem and the latent draws used for the
/// physics term.
pub fn retrain_last_layer(
    mlp: &Mlp,
    opts: &RetrainOptions,
    data: Option<(&DMatrix<f64>, &DMatrix<f64>)>,
    residual: Option<(&ResidualProblem<'_>, &[Vec<f64>])>,
) -> Result<Mlp> {
    let (w0, b0) = mlp.last_layer();
    let n_out = w0.nrows();
    let n_feat = w0.ncols() + 1;
    let (w, b) = match opts.mode {
        RetrainMode::Data => {
            let (x, y) = data.ok_or_else(|| Error::invalid("data retraining needs labeled target pairs"))?;
            check_data(mlp, x, y)?;
            data_layer(mlp, x, y, opts.underdetermined)?
        }
        RetrainMode::Physics | RetrainMode::Combined => {
            let (problem, latents) =
                residual.ok_or_else(|| Error::invalid("physics retraining needs residual inputs"))?;
            if problem.state.n_terms() != n_out {
                return Err(Error::invalid("state basis size does not match the network output"));
            }
            if latents.len() < n_feat {
                return Err(Error::decomposition(format!(
                    "physics retraining needs at least {n_feat} residual realizations, got {}",
                    latents.len()
                )));
            }
            let (mut normal, mut rhs) = physics_normal(mlp, problem, latents)?;
            if opts.mode == RetrainMode::Combined {
                let (x, y) =
                    data.ok_or_else(|| Error::invalid("combined retraining needs labeled target pairs"))?;
                check_data(mlp, x, y)?;
                if !(opts.lambda_r > 0.0) {
                    return Err(Error::invalid("residual weight must be positive"));
                }
                normal *= opts.lambda_r;
                rhs *= opts.lambda_r;
                add_data_normal(mlp, x, y, &mut normal, &mut rhs);
            }
            let theta = solve_spd(normal, rhs)?;
            let wt = DMatrix::from_column_slice(n_out, n_feat, theta.as_slice());
            (wt.columns(0, n_feat - 1).into_owned(), wt.column(n_feat - 1).into_owned())
        }
    };
    debug_assert_eq!((w.shape(), b.len()), (w0.shape(), b0.len()));
    let mut out = mlp.clone();
    out.set_last_layer(w, b)?;
    Ok(out)
}

fn check_data(mlp: &Mlp, x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<()> {
    let w = mlp.widths();
    if x.ncols() == 0 || x.ncols() != y.ncols() || x.nrows() != w[0] || y.nrows() != w[w.len() - 1] {
        return Err(Error::invalid("target data does not match the network dimensions"));
    }
    Ok(())
}

/// Frozen features with a trailing row of ones.
fn augmented_features(mlp: &Mlp, x: &DMatrix<f64>) -> DMatrix<f64> {
    let f = mlp.features(x);
    let mut out = DMatrix::from_element(f.nrows() + 1, f.ncols(), 1.0);
    out.view_mut((0, 0), f.shape()).copy_from(&f);
    out
}

fn data_layer(
    mlp: &Mlp,
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    policy: Underdetermined,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let phi = augmented_features(mlp, x);
    let (n_feat, m) = phi.shape();
    let (w0, b0) = mlp.last_layer();
    let wt = if m >= n_feat {
        lstsq(phi.transpose(), &y.transpose(), "output-layer least squares")?.transpose()
    } else {
        match policy {
            Underdetermined::Reject => {
                return Err(Error::decomposition(format!(
                    "output layer has {n_feat} coefficients per output; at least {n_feat} target samples are needed, got {m}"
                )))
            }
            Underdetermined::MinimumChange => {
                let mut source = DMatrix::zeros(w0.nrows(), n_feat);
                source.view_mut((0, 0), w0.shape()).copy_from(w0);
                source.set_column(n_feat - 1, b0);
                // W = W_s + (Y - W_s Phi) (Phi^T Phi)^{-1} Phi^T with Phi = QR.
                let misfit = y - &source * &phi;
                let (q, r) = phi.qr().unpack();
                check_triangular(&r, "target feature matrix")?;
                let step = r
                    .transpose()
                    .solve_lower_triangular(&misfit.transpose())
                    .ok_or_else(|| Error::decomposition("singular target feature matrix"))?;
                source + (q * step).transpose()
            }
        }
    };
    Ok((
        wt.columns(0, n_feat - 1).into_owned(),
        wt.column(n_feat - 1).into_owned(),
    ))
}

/// Normal equations of `sum_i ||A_i (W phi_i + b) + b_i||^2` in
/// `theta = vec([W b])` (column-major).
fn physics_normal(
    mlp: &Mlp,
    problem: &ResidualProblem<'_>,
    latents: &[Vec<f64>],
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let x = super::columns(latents)?;
    let phi = augmented_features(mlp, &x);
    let n_feat = phi.nrows();
    let n_out = problem.state.n_terms();
    // Per-sample Gram blocks in parallel; summed sequentially in sample
    // order so the result does not depend on the thread count.
    let blocks: Vec<(DMatrix<f64>, DVector<f64>)> = latents
        .par_iter()
        .map(|xi| {
            let (a, b) = assemble_nonlinear_residual(problem.grid, problem.mean, problem.k, problem.state, xi)?;
            Ok((a.tr_mul(&a), a.tr_mul(&b)))
        })
        .collect::<Result<_>>()?;
    let n = n_out * n_feat;
    let mut normal = DMatrix::zeros(n, n);
    let mut rhs = DVector::zeros(n);
    for (i, (ata, atb)) in blocks.iter().enumerate() {
        let f = phi.column(i);
        for c2 in 0..n_feat {
            for c1 in 0..n_feat {
                let s = f[c1] * f[c2];
                let mut blk = normal.view_mut((c1 * n_out, c2 * n_out), (n_out, n_out));
                for (dst, src) in blk.iter_mut().zip(ata.iter()) {
                    *dst += s * src;
                }
            }
            for (dst, src) in rhs.rows_mut(c2 * n_out, n_out).iter_mut().zip(atb.iter()) {
                *dst -= f[c2] * src;
            }
        }
    }
    Ok((normal, rhs))
}

fn add_data_normal(mlp: &Mlp, x: &DMatrix<f64>, y: &DMatrix<f64>, normal: &mut DMatrix<f64>, rhs: &mut DVector<f64>) {
    let phi = augmented_features(mlp, x);
    let n_feat = phi.nrows();
    let n_out = y.nrows();
    let gram = &phi * phi.transpose();
    let cross = y * phi.transpose();
    for c2 in 0..n_feat {
        for c1 in 0..n_feat {
            let s = gram[(c1, c2)];
            for r in 0..n_out {
                normal[(c1 * n_out + r, c2 * n_out + r)] += s;
            }
        }
        for r in 0..n_out {
            rhs[c2 * n_out + r] += cross[(r, c2)];
        }
    }
}

/// Cholesky solve after symmetric diagonal equilibration, with one step of
/// iterative refinement.
fn solve_spd(normal: DMatrix<f64>, rhs: DVector<f64>) -> Result<DVector<f64>> {
    let n = normal.nrows();
    let scale: Vec<f64> = (0..n)
        .map(|i| {
            let d = normal[(i, i)];
            if d > 0.0 {
                1.0 / d.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    if scale.iter().any(|&s| s == 0.0) {
        return Err(Error::decomposition("residual normal matrix has a zero diagonal (unused coefficient)"));
    }
    let scaled = DMatrix::from_fn(n, n, |i, j| normal[(i, j)] * scale[i] * scale[j]);
    let chol = scaled
        .clone()
        .cholesky()
        .ok_or_else(|| Error::decomposition("residual normal matrix is not positive definite"))?;
    let b = DVector::from_fn(n, |i, _| rhs[i] * scale[i]);
    let mut z = chol.solve(&b);
    let r = &b - &scaled * &z;
    z += chol.solve(&r);
    Ok(DVector::from_fn(n, |i, _| z[i] * scale[i]))
}
