//! Residual least squares: state latents that minimize the discretized PDE
//! residual (plus initial/boundary mismatch) for given control latents.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::ols::lstsq;
use super::LinearMap;
use crate::error::{Error, Result};
use crate::field::{Field, FieldKind, Grid};
use crate::kl::KlBasis;
use crate::solver::{assemble_fd_operator, coefficient_operator, source_node};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RlsWeights {
    pub residual: f64,
    pub initial: f64,
    pub boundary: f64,
}

impl Default for RlsWeights {
    fn default() -> Self {
        Self {
            residual: 1.0,
            initial: 1.0,
            boundary: 1.0,
        }
    }
}

/// `min_eta ||A_tilde eta - M xi_tilde||`, where the right-hand side is a
/// fixed linear function of the extended control latent.
#[derive(Clone, Debug)]
pub struct ResidualSystem {
    matrix: DMatrix<f64>,
    rhs_operator: DMatrix<f64>,
}

impl ResidualSystem {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn rhs_operator(&self) -> &DMatrix<f64> {
        &self.rhs_operator
    }

    pub fn n_rows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn rhs(&self, xi: &[f64]) -> Result<DVector<f64>> {
        if xi.len() != self.rhs_operator.ncols() {
            return Err(Error::invalid(format!(
                "residual system expects {} control latents, got {}",
                self.rhs_operator.ncols(),
                xi.len()
            )));
        }
        Ok(&self.rhs_operator * DVector::from_column_slice(xi))
    }

    /// `W` with `eta* = W xi` for every `xi`.
    pub fn transfer_matrix(&self) -> Result<LinearMap> {
        let w = lstsq(self.matrix.clone(), &self.rhs_operator, "RLS system")?;
        Ok(LinearMap::new(w))
    }
}

/// Minimizer of the residual system for one control latent.
pub fn solve_rls(system: &ResidualSystem, xi: &[f64]) -> Result<Vec<f64>> {
    let b = system.rhs(xi)?;
    let rhs = DMatrix::from_column_slice(b.len(), 1, b.as_slice());
    let eta = lstsq(system.matrix.clone(), &rhs, "RLS system")?;
    Ok(eta.as_slice().to_vec())
}

fn check_basis(basis: &KlBasis, grid: &Grid, kind: FieldKind, name: &str) -> Result<()> {
    if basis.grid() != grid || basis.kind() != kind {
        return Err(Error::invalid(format!("{name} basis does not live on the expected grid axis")));
    }
    Ok(())
}

/// Residual system for the linear source problem. The extended control
/// latent is ordered `[xi_f, xi_q, h0', hr', hl']`.
///
/// Rows: `sqrt(w_r)` times the interior PDE residual, `sqrt(w_0)` times the
/// initial interior values, then the left and right boundary columns (every
/// time level) weighted by `sqrt(w_b)`.
pub fn assemble_rls_linear(
    grid: &Grid,
    k: &Field,
    state: &KlBasis,
    f: &KlBasis,
    q: &KlBasis,
    x_star: f64,
    weights: RlsWeights,
) -> Result<ResidualSystem> {
    check_basis(state, grid, FieldKind::SpaceTime, "state")?;
    check_basis(f, grid, FieldKind::SpaceTime, "distributed source")?;
    check_basis(q, grid, FieldKind::TimeOnly, "point source")?;
    let op = assemble_fd_operator(grid, k)?;
    let (nx, nt) = (grid.n_x(), grid.n_t());
    let n_m = grid.interior_len();
    let rows = n_m + nx + 2 * (nt + 1);
    let n_eta = state.n_terms();
    let (nf, nq) = (f.n_terms(), q.n_terms());
    let n_xi = nf + nq + 3;
    let (sr, s0, sb) = (weights.residual.sqrt(), weights.initial.sqrt(), weights.boundary.sqrt());

    let mut a = DMatrix::zeros(rows, n_eta);
    for j in 0..n_eta {
        let col = state.modes().column(j);
        let r = op.residual(col.as_slice());
        let mut out = a.column_mut(j);
        for (i, v) in r.iter().enumerate() {
            out[i] = sr * v;
        }
        for x in 1..=nx {
            out[n_m + x - 1] = s0 * col[grid.index(x, 0)];
        }
        for t in 0..=nt {
            out[n_m + nx + t] = sb * col[grid.index(0, t)];
            out[n_m + nx + nt + 1 + t] = sb * col[grid.index(nx + 1, t)];
        }
    }

    let mut m = DMatrix::zeros(rows, n_xi);
    for j in 0..nf {
        let col = f.modes().column(j);
        for t in 1..=nt {
            for x in 1..=nx {
                m[(grid.interior_index(x, t), j)] = sr * col[grid.index(x, t)];
            }
        }
    }
    let s = source_node(grid, x_star);
    for j in 0..nq {
        let col = q.modes().column(j);
        for t in 1..=nt {
            m[(grid.interior_index(s, t), nf + j)] = sr * col[t] / grid.dx();
        }
    }
    let (c0, cr, cl) = (nf + nq, nf + nq + 1, nf + nq + 2);
    for x in 1..=nx {
        m[(n_m + x - 1, c0)] = s0;
    }
    for t in 0..=nt {
        m[(n_m + nx + t, cl)] = sb;
        m[(n_m + nx + nt + 1 + t, cr)] = sb;
    }
    Ok(ResidualSystem {
        matrix: a,
        rhs_operator: m,
    })
}

/// Residual system of the simplified (first-order) fluctuation equation
/// `h'_t = (k_mean h'_x)_x + (k' h_mean_x)_x` with homogeneous data:
/// `A eta = B xi_k`, `B_j = (psi_k,j h_mean_x)_x` on interior nodes.
pub fn assemble_rls_fluctuation(grid: &Grid, mean: &Field, k: &KlBasis, state: &KlBasis) -> Result<ResidualSystem> {
    check_basis(state, grid, FieldKind::SpaceTime, "state")?;
    check_basis(k, grid, FieldKind::SpaceOnly, "conductivity")?;
    if *mean.grid() != *grid || mean.kind() != FieldKind::SpaceTime {
        return Err(Error::invalid("state mean must be a space-time field on the grid"));
    }
    let op = assemble_fd_operator(grid, &k.mean_field())?;
    let n_m = grid.interior_len();
    let mut a = DMatrix::zeros(n_m, state.n_terms());
    for j in 0..state.n_terms() {
        let r = op.residual(state.modes().column(j).as_slice());
        a.column_mut(j).copy_from_slice(&r);
    }
    let mut b = DMatrix::zeros(n_m, k.n_terms());
    for j in 0..k.n_terms() {
        let psi = Field::new(*grid, FieldKind::SpaceOnly, k.modes().column(j).as_slice().to_vec())?;
        let d = coefficient_operator(grid, &psi)?.neg_divergence(mean.values());
        for (i, v) in d.iter().enumerate() {
            b[(i, j)] = -v;
        }
    }
    Ok(ResidualSystem {
        matrix: a,
        rhs_operator: b,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{kernel_basis, Axis, RngStream, SeKernel};
    use crate::kl::empirical_basis;
    use crate::solver::{solve_diffusion, Ibc, SourceSpec};

    struct Fixture {
        grid: Grid,
        k: Field,
        f: KlBasis,
        q: KlBasis,
        state: KlBasis,
    }

    // Solutions are affine in the 13 extended controls, so 13 empirical
    // modes about the mean-control solution span every fluctuation.
    fn fixture() -> Fixture {
        let grid = Grid::new(8, 24, 1.0, 0.03).unwrap();
        let k = Field::space_fn(grid, |x| 1.0 + 0.5 * x);
        let f = kernel_basis(&SeKernel::space_time(1.0, 0.5, 0.015), &grid, Axis::SpaceTime, 6).unwrap();
        let q = kernel_basis(&SeKernel::time(1.0, 0.003), &grid, Axis::Time, 4).unwrap();
        let sols: Vec<Field> = (0..30).map(|i| solve_with(&grid, &k, &f, &q, &xi(100 + i))).collect();
        let mean = solve_with(&grid, &k, &f, &q, &[0.0; 13]);
        let state = empirical_basis(&sols, 13).unwrap().with_mean(&mean).unwrap();
        Fixture { grid, k, f, q, state }
    }

    fn system(fx: &Fixture) -> ResidualSystem {
        assemble_rls_linear(&fx.grid, &fx.k, &fx.state, &fx.f, &fx.q, 0.25, RlsWeights::default()).unwrap()
    }

    fn xi(seed: u64) -> Vec<f64> {
        crate::field::standard_normals(&mut RngStream::new(seed, 0).rng(), 6 + 4 + 3)
    }

    #[test]
    fn zero_controls_give_zero_latents() {
        let fx = fixture();
        let eta = solve_rls(&system(&fx), &vec![0.0; 13]).unwrap();
        assert!(eta.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn row_count_and_full_column_rank() {
        let fx = fixture();
        let s = system(&fx);
        assert_eq!(s.n_rows(), fx.grid.interior_len() + 8 + 2 * 25);
        let sv = s.matrix().clone().svd(false, false).singular_values;
        let (mx, mn) = sv.iter().fold((0.0f64, f64::MAX), |(a, b), &v| (a.max(v), b.min(v)));
        assert!(mn > 1e-10 * mx);
    }

    #[test]
    fn solution_is_stationary() {
        let fx = fixture();
        let s = system(&fx);
        let x = xi(1);
        let eta = DVector::from_vec(solve_rls(&s, &x).unwrap());
        let b = s.rhs(&x).unwrap();
        let grad = s.matrix().transpose() * (s.matrix() * &eta - &b);
        let scale = s.matrix().norm() * b.norm();
        assert!(grad.norm() <= 1e-8 * scale, "gradient {:e}", grad.norm() / scale);
    }

    #[test]
    fn latents_are_linear_in_controls() {
        let fx = fixture();
        let s = system(&fx);
        let (x1, x2) = (xi(2), xi(3));
        let combo: Vec<f64> = x1.iter().zip(&x2).map(|(a, b)| 2.0 * a - 0.5 * b).collect();
        let (e1, e2) = (solve_rls(&s, &x1).unwrap(), solve_rls(&s, &x2).unwrap());
        let ec = solve_rls(&s, &combo).unwrap();
        for i in 0..ec.len() {
            assert!((ec[i] - (2.0 * e1[i] - 0.5 * e2[i])).abs() <= 1e-10 * (1.0 + ec[i].abs()));
        }
        let w = s.transfer_matrix().unwrap();
        let ew = w.apply(&x1);
        for (a, b) in ew.iter().zip(&e1) {
            assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn reproduces_solutions_the_state_basis_spans() {
        let fx = fixture();
        let x = xi(7);
        let h = solve(&fx, &x);
        let eta = solve_rls(&system(&fx), &x).unwrap();
        let pred = fx.state.forward(&eta).unwrap();
        let err = crate::field::l2_distance(pred.values(), h.values()) / h.norm();
        assert!(err < 1e-9, "relative error {err:e}");
    }

    /// FD solution for extended control latent `[xi_f, xi_q, h0', hr', hl']`
    /// about zero source means and unit IBCs.
    fn solve(fx: &Fixture, x: &[f64]) -> Field {
        solve_with(&fx.grid, &fx.k, &fx.f, &fx.q, x)
    }

    fn solve_with(grid: &Grid, k: &Field, f: &KlBasis, q: &KlBasis, x: &[f64]) -> Field {
        let src = SourceSpec {
            f: Some(f.forward(&x[..6]).unwrap()),
            q: Some(q.forward(&x[6..10]).unwrap()),
            x_star: 0.25,
        };
        let ibc = Ibc::constant(1.0 + x[10], 1.0 + x[12], 1.0 + x[11]);
        solve_diffusion(grid, k, &src, &ibc).unwrap()
    }

    #[test]
    fn fluctuation_system_has_one_row_per_interior_node() {
        let grid = Grid::new(6, 10, 1.0, 0.03).unwrap();
        let ks: Vec<Field> = (0..12)
            .map(|i| Field::space_fn(grid, move |x| 1.0 + 0.1 * ((i as f64 + 1.0) * x).sin()))
            .collect();
        let kb = empirical_basis(&ks, 4).unwrap();
        let ibc = Ibc::constant(1.05, 1.05, 0.95);
        let sols: Vec<Field> = ks
            .iter()
            .map(|k| solve_diffusion(&grid, k, &SourceSpec::none(), &ibc).unwrap())
            .collect();
        let state = empirical_basis(&sols, 6).unwrap();
        let s = assemble_rls_fluctuation(&grid, &state.mean_field(), &kb, &state).unwrap();
        assert_eq!(s.n_rows(), grid.interior_len());
        assert_eq!(s.rhs_operator().ncols(), 4);
        assert!(solve_rls(&s, &[0.0; 4]).unwrap().iter().all(|v| v.abs() < 1e-12));
    }
}
