//! Backward-Euler finite-difference solver for
//! `h_t = (k(x) h_x)_x + f(x, t) + q(t) delta(x - x*)` with Dirichlet data,
//! and the discrete operators shared with residual assembly.

use std::cell::Cell;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Field, FieldKind, Grid};

thread_local! {
    static SOLVES: Cell<u64> = const { Cell::new(0) };
}

/// Number of [`solve_diffusion`] calls made on the current thread.
pub fn solve_count() -> u64 {
    SOLVES.with(|c| c.get())
}

/// Initial or boundary data: a constant or a node profile.
#[derive(Clone, Debug, PartialEq)]
pub enum Profile {
    Constant(f64),
    Nodes(Field),
}

impl Profile {
    fn value(&self, i: usize) -> f64 {
        match self {
            Profile::Constant(v) => *v,
            Profile::Nodes(f) => f.values()[i],
        }
    }

    fn check(&self, grid: &Grid, kind: FieldKind, name: &str) -> Result<()> {
        match self {
            Profile::Constant(v) if !v.is_finite() => {
                Err(Error::invalid(format!("{name} is not finite")))
            }
            Profile::Nodes(f) if *f.grid() != *grid || f.kind() != kind => Err(Error::invalid(
                format!("{name} profile must be a {kind:?} field on the solve grid"),
            )),
            _ => Ok(()),
        }
    }
}

impl From<f64> for Profile {
    fn from(v: f64) -> Self {
        Profile::Constant(v)
    }
}

/// Initial and boundary conditions.
#[derive(Clone, Debug, PartialEq)]
pub struct Ibc {
    /// Initial value on the interior nodes (space profile).
    pub h0: Profile,
    /// Left boundary value over time.
    pub hl: Profile,
    /// Right boundary value over time.
    pub hr: Profile,
}

impl Ibc {
    pub fn constant(h0: f64, hl: f64, hr: f64) -> Self {
        Self {
            h0: h0.into(),
            hl: hl.into(),
            hr: hr.into(),
        }
    }

    fn check(&self, grid: &Grid) -> Result<()> {
        self.h0.check(grid, FieldKind::SpaceOnly, "h0")?;
        self.hl.check(grid, FieldKind::TimeOnly, "hl")?;
        self.hr.check(grid, FieldKind::TimeOnly, "hr")
    }

    /// Writes the boundary and initial values into a space-time array.
    pub fn impose(&self, grid: &Grid, values: &mut [f64]) {
        let last = grid.n_x() + 1;
        for x in 1..=grid.n_x() {
            values[grid.index(x, 0)] = self.h0.value(x);
        }
        for t in 0..grid.time_nodes() {
            values[grid.index(0, t)] = self.hl.value(t);
            values[grid.index(last, t)] = self.hr.value(t);
        }
    }
}

/// Distributed and point sources.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SourceSpec {
    pub f: Option<Field>,
    pub q: Option<Field>,
    pub x_star: f64,
}

impl SourceSpec {
    pub fn none() -> Self {
        Self::default()
    }

    fn check(&self, grid: &Grid) -> Result<()> {
        if let Some(f) = &self.f {
            if *f.grid() != *grid || f.kind() != FieldKind::SpaceTime {
                return Err(Error::invalid("distributed source must be a space-time field on the solve grid"));
            }
        }
        if let Some(q) = &self.q {
            if *q.grid() != *grid || q.kind() != FieldKind::TimeOnly {
                return Err(Error::invalid("point source rate must be a time field on the solve grid"));
            }
            if !(self.x_star > 0.0 && self.x_star < grid.length()) {
                return Err(Error::invalid(format!(
                    "point source location {} is outside (0, L)",
                    self.x_star
                )));
            }
        }
        Ok(())
    }
}

/// Interior node carrying a point source at `x_star`.
pub fn source_node(grid: &Grid, x_star: f64) -> usize {
    ((x_star / grid.dx()).round() as usize).clamp(1, grid.n_x())
}

/// Discrete `u -> (k u_x)_x` on the interior nodes of one time level, with
/// arithmetic-mean interface conductivities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FdOperator {
    grid: Grid,
    /// `k_{i-1/2} / dx^2` for interior node `i` (index `i - 1`).
    west: Vec<f64>,
    /// `k_{i+1/2} / dx^2`.
    east: Vec<f64>,
}

impl FdOperator {
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    /// `(west, diagonal, east)` coefficients of interior row `i` in `1..=n_x`.
    pub fn stencil(&self, i: usize) -> (f64, f64, f64) {
        let (w, e) = (self.west[i - 1], self.east[i - 1]);
        (w, -(w + e), e)
    }

    /// Applies the operator to one time level (`n_x + 2` values), returning
    /// `n_x` interior values.
    pub fn apply(&self, level: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.grid.n_x()];
        self.apply_into(level, &mut out);
        out
    }

    pub(crate) fn apply_into(&self, level: &[f64], out: &mut [f64]) {
        for i in 1..=self.grid.n_x() {
            let (w, e) = (self.west[i - 1], self.east[i - 1]);
            out[i - 1] = w * (level[i - 1] - level[i]) + e * (level[i + 1] - level[i]);
        }
    }

    /// Space-time residual `u_t - (k u_x)_x` (backward difference in time)
    /// on every interior node, in interior-row order.
    pub fn residual(&self, values: &[f64]) -> Vec<f64> {
        let g = self.grid;
        let (nx, ns) = (g.n_x(), g.space_nodes());
        let inv_dt = 1.0 / g.dt();
        let mut out = vec![0.0; g.interior_len()];
        for t in 1..g.time_nodes() {
            let cur = &values[t * ns..(t + 1) * ns];
            let prev = &values[(t - 1) * ns..t * ns];
            let row = &mut out[(t - 1) * nx..t * nx];
            self.apply_into(cur, row);
            for i in 1..=nx {
                row[i - 1] = (cur[i] - prev[i]) * inv_dt - row[i - 1];
            }
        }
        out
    }

    /// Divergence part only: `-(k u_x)_x` on every interior node.
    pub fn neg_divergence(&self, values: &[f64]) -> Vec<f64> {
        let g = self.grid;
        let (nx, ns) = (g.n_x(), g.space_nodes());
        let mut out = vec![0.0; g.interior_len()];
        for t in 1..g.time_nodes() {
            let row = &mut out[(t - 1) * nx..t * nx];
            self.apply_into(&values[t * ns..(t + 1) * ns], row);
            row.iter_mut().for_each(|v| *v = -*v);
        }
        out
    }
}

/// Builds the diffusion operator for a strictly positive conductivity.
pub fn assemble_fd_operator(grid: &Grid, k: &Field) -> Result<FdOperator> {
    if let Some(i) = k.values().iter().position(|&v| !(v > 0.0)) {
        return Err(Error::invalid(format!(
            "conductivity must be positive, k = {} at node {i}",
            k.values().get(i).copied().unwrap_or(f64::NAN)
        )));
    }
    coefficient_operator(grid, k)
}

/// Same stencil for an arbitrary-sign coefficient (fluctuation terms).
pub(crate) fn coefficient_operator(grid: &Grid, k: &Field) -> Result<FdOperator> {
    if *k.grid() != *grid || k.kind() != FieldKind::SpaceOnly {
        return Err(Error::invalid("conductivity must be a space field on the operator grid"));
    }
    let inv = 1.0 / (grid.dx() * grid.dx());
    let kv = k.values();
    let nx = grid.n_x();
    let west = (1..=nx).map(|i| 0.5 * (kv[i - 1] + kv[i]) * inv).collect();
    let east = (1..=nx).map(|i| 0.5 * (kv[i] + kv[i + 1]) * inv).collect();
    Ok(FdOperator {
        grid: *grid,
        west,
        east,
    })
}

/// Solves the diffusion problem on all nodes. Boundary and initial nodes
/// carry the IBC values exactly.
pub fn solve_diffusion(grid: &Grid, k: &Field, src: &SourceSpec, ibc: &Ibc) -> Result<Field> {
    SOLVES.with(|c| c.set(c.get() + 1));
    let op = assemble_fd_operator(grid, k)?;
    src.check(grid)?;
    ibc.check(grid)?;

    let (nx, ns) = (grid.n_x(), grid.space_nodes());
    let dt = grid.dt();
    let mut h = vec![0.0; grid.len()];
    ibc.impose(grid, &mut h);
    let star = src.q.as_ref().map(|_| source_node(grid, src.x_star));
    let inv_dx = 1.0 / grid.dx();

    // (I - dt D) u^n = u^{n-1} + dt (f^n + q^n delta); the matrix is the
    // same for every step, so factor it once (Thomas elimination).
    let mut lower = vec![0.0; nx];
    let mut diag = vec![0.0; nx];
    let mut upper = vec![0.0; nx];
    for i in 1..=nx {
        let (w, d, e) = op.stencil(i);
        lower[i - 1] = -dt * w;
        diag[i - 1] = 1.0 - dt * d;
        upper[i - 1] = -dt * e;
    }
    let mut c_prime = vec![0.0; nx];
    let mut denom = vec![0.0; nx];
    for i in 0..nx {
        let d = diag[i] - if i > 0 { lower[i] * c_prime[i - 1] } else { 0.0 };
        if !(d.abs() > 0.0) || !d.is_finite() {
            return Err(Error::decomposition("singular implicit diffusion matrix"));
        }
        denom[i] = d;
        c_prime[i] = upper[i] / d;
    }

    let mut rhs = vec![0.0; nx];
    for t in 1..grid.time_nodes() {
        let base = t * ns;
        for i in 1..=nx {
            let mut r = h[base - ns + i];
            if let Some(f) = &src.f {
                r += dt * f.values()[base + i];
            }
            rhs[i - 1] = r;
        }
        if let (Some(q), Some(s)) = (&src.q, star) {
            rhs[s - 1] += dt * q.values()[t] * inv_dx;
        }
        rhs[0] -= lower[0] * h[base];
        rhs[nx - 1] -= upper[nx - 1] * h[base + nx + 1];
        // Forward sweep then back substitution.
        rhs[0] /= denom[0];
        for i in 1..nx {
            rhs[i] = (rhs[i] - lower[i] * rhs[i - 1]) / denom[i];
        }
        for i in (0..nx - 1).rev() {
            rhs[i] -= c_prime[i] * rhs[i + 1];
        }
        h[base + 1..base + 1 + nx].copy_from_slice(&rhs);
    }
    Field::new(*grid, FieldKind::SpaceTime, h)
        .map_err(|e| Error::decomposition(format!("solver produced invalid values: {e}")))
}
