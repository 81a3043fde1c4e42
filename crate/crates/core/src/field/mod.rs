//! Space-time grids, sampled fields, squared-exponential kernels and
//! seeded Gaussian random-field sampling.
//!
//! Nodes are numbered time-major: `g(x_idx, t_idx) = t_idx * (n_x + 2) + x_idx`,
//! with `x_idx` in `0..=n_x + 1` (0 and `n_x + 1` are the Dirichlet boundaries)
//! and `t_idx` in `0..=n_t` (0 is the initial time level).

mod kernel;
mod rng;

pub use kernel::{kernel_basis, Axis, SeKernel};
pub use rng::{sample_gaussian_field, sample_gaussian_field_with, RngStream};
pub(crate) use rng::standard_normals;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform space-time mesh on `[0, L] x [0, T]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    n_x: usize,
    n_t: usize,
    length: f64,
    horizon: f64,
}

impl Grid {
    pub fn new(n_x: usize, n_t: usize, length: f64, horizon: f64) -> Result<Self> {
        if n_x == 0 || n_t == 0 {
            return Err(Error::invalid(format!(
                "grid needs at least one interior node and one time step (n_x = {n_x}, n_t = {n_t})"
            )));
        }
        if !(length > 0.0 && length.is_finite()) || !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::invalid(format!(
                "grid extents must be positive (L = {length}, T = {horizon})"
            )));
        }
        Ok(Self {
            n_x,
            n_t,
            length,
            horizon,
        })
    }

    /// Interior space nodes.
    pub fn n_x(&self) -> usize {
        self.n_x
    }

    /// Time steps.
    pub fn n_t(&self) -> usize {
        self.n_t
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn dx(&self) -> f64 {
        self.length / (self.n_x + 1) as f64
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_t as f64
    }

    /// Space nodes including both boundaries.
    pub fn space_nodes(&self) -> usize {
        self.n_x + 2
    }

    /// Time levels including the initial one.
    pub fn time_nodes(&self) -> usize {
        self.n_t + 1
    }

    /// Total node count `N = (n_x + 2)(n_t + 1)`.
    pub fn len(&self) -> usize {
        self.space_nodes() * self.time_nodes()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Interior node count `N_m = n_x * n_t`.
    pub fn interior_len(&self) -> usize {
        self.n_x * self.n_t
    }

    #[inline]
    pub fn index(&self, x_idx: usize, t_idx: usize) -> usize {
        debug_assert!(x_idx < self.space_nodes() && t_idx < self.time_nodes());
        t_idx * self.space_nodes() + x_idx
    }

    /// Inverse of [`Grid::index`].
    #[inline]
    pub fn coords(&self, g: usize) -> (usize, usize) {
        (g % self.space_nodes(), g / self.space_nodes())
    }

    /// Row of an interior node `(x_idx in 1..=n_x, t_idx in 1..=n_t)` in the
    /// residual ordering, which follows the global ordering restricted to the
    /// interior.
    #[inline]
    pub fn interior_index(&self, x_idx: usize, t_idx: usize) -> usize {
        debug_assert!((1..=self.n_x).contains(&x_idx) && (1..=self.n_t).contains(&t_idx));
        (t_idx - 1) * self.n_x + (x_idx - 1)
    }

    pub fn x(&self, x_idx: usize) -> f64 {
        x_idx as f64 * self.dx()
    }

    pub fn t(&self, t_idx: usize) -> f64 {
        t_idx as f64 * self.dt()
    }

    /// Node count along one field kind.
    pub fn len_of(&self, kind: FieldKind) -> usize {
        match kind {
            FieldKind::SpaceTime => self.len(),
            FieldKind::SpaceOnly => self.space_nodes(),
            FieldKind::TimeOnly => self.time_nodes(),
        }
    }

    /// Boundary and initial nodes (everything that is not interior).
    pub fn is_constrained(&self, g: usize) -> bool {
        let (x, t) = self.coords(g);
        t == 0 || x == 0 || x == self.n_x + 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    SpaceTime,
    SpaceOnly,
    TimeOnly,
}

/// Real values sampled on every node of one grid axis (or the full mesh).
#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    grid: Grid,
    kind: FieldKind,
    values: Vec<f64>,
}

impl Field {
    pub fn new(grid: Grid, kind: FieldKind, values: Vec<f64>) -> Result<Self> {
        let expected = grid.len_of(kind);
        if values.len() != expected {
            return Err(Error::invalid(format!(
                "{kind:?} field needs {expected} values, got {}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite field value at node {i}")));
        }
        Ok(Self { grid, kind, values })
    }

    pub fn zeros(grid: Grid, kind: FieldKind) -> Self {
        Self {
            grid,
            kind,
            values: vec![0.0; grid.len_of(kind)],
        }
    }

    pub fn constant(grid: Grid, kind: FieldKind, value: f64) -> Self {
        Self {
            grid,
            kind,
            values: vec![value; grid.len_of(kind)],
        }
    }

    /// Samples `f(x, t)` on every node of the mesh.
    pub fn space_time_fn(grid: Grid, f: impl Fn(f64, f64) -> f64) -> Self {
        let mut values = Vec::with_capacity(grid.len());
        for t in 0..grid.time_nodes() {
            for x in 0..grid.space_nodes() {
                values.push(f(grid.x(x), grid.t(t)));
            }
        }
        Self {
            grid,
            kind: FieldKind::SpaceTime,
            values,
        }
    }

    pub fn space_fn(grid: Grid, f: impl Fn(f64) -> f64) -> Self {
        let values = (0..grid.space_nodes()).map(|i| f(grid.x(i))).collect();
        Self {
            grid,
            kind: FieldKind::SpaceOnly,
            values,
        }
    }

    pub fn time_fn(grid: Grid, f: impl Fn(f64) -> f64) -> Self {
        let values = (0..grid.time_nodes()).map(|j| f(grid.t(j))).collect();
        Self {
            grid,
            kind: FieldKind::TimeOnly,
            values,
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn kind(&self) -> FieldKind {
        self.kind
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Value at `(x_idx, t_idx)` of a space-time field.
    pub fn at(&self, x_idx: usize, t_idx: usize) -> f64 {
        debug_assert_eq!(self.kind, FieldKind::SpaceTime);
        self.values[self.grid.index(x_idx, t_idx)]
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.values)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(self.grid, self.kind, self.values.iter().map(|&v| f(v)).collect())
    }

    /// Checks that `other` lives on the same grid axis.
    pub fn ensure_compatible(&self, other: &Field) -> Result<()> {
        if self.grid != other.grid || self.kind != other.kind {
            return Err(Error::invalid(format!(
                "field mismatch: {:?} on {:?} vs {:?} on {:?}",
                self.kind, self.grid, other.kind, other.grid
            )));
        }
        Ok(())
    }

    /// Values of a space-time field at one time level.
    pub fn time_slice(&self, t_idx: usize) -> &[f64] {
        debug_assert_eq!(self.kind, FieldKind::SpaceTime);
        let n = self.grid.space_nodes();
        &self.values[t_idx * n..(t_idx + 1) * n]
    }
}

pub(crate) fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `||a - b||_2`.
pub(crate) fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_mesh_spacing() {
        let g = Grid::new(30, 250, 1.0, 0.03).unwrap();
        assert_eq!(g.dx(), 1.0 / 31.0);
        assert_eq!(g.dt(), 0.03 / 250.0);
        assert_eq!(g.len(), 32 * 251);
        assert_eq!(g.interior_len(), 7500);
    }

    #[test]
    fn smallest_grid() {
        let g = Grid::new(1, 1, 1.0, 1.0).unwrap();
        assert_eq!(g.len(), 6);
        assert_eq!(g.interior_len(), 1);
    }

    #[test]
    fn index_arithmetic() {
        let g = Grid::new(3, 2, 2.0, 1.0).unwrap();
        assert_eq!(g.index(2, 1), 7);
        assert_eq!(g.coords(7), (2, 1));
    }

    #[test]
    fn index_is_a_bijection() {
        let g = Grid::new(4, 3, 1.0, 1.0).unwrap();
        let mut seen = vec![false; g.len()];
        for t in 0..g.time_nodes() {
            for x in 0..g.space_nodes() {
                let i = g.index(x, t);
                assert!(!seen[i]);
                seen[i] = true;
                assert_eq!(g.coords(i), (x, t));
            }
        }
        assert!(seen.into_iter().all(|s| s));
    }

    #[test]
    fn rejects_degenerate_grids() {
        assert!(matches!(Grid::new(0, 5, 1.0, 1.0), Err(Error::InvalidArgument(_))));
        assert!(matches!(Grid::new(5, 0, 1.0, 1.0), Err(Error::InvalidArgument(_))));
        assert!(matches!(Grid::new(5, 5, 0.0, 1.0), Err(Error::InvalidArgument(_))));
        assert!(matches!(Grid::new(5, 5, 1.0, -1.0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn field_validates_length_and_finiteness() {
        let g = Grid::new(2, 2, 1.0, 1.0).unwrap();
        assert!(Field::new(g, FieldKind::SpaceOnly, vec![0.0; 4]).is_ok());
        assert!(Field::new(g, FieldKind::SpaceOnly, vec![0.0; 5]).is_err());
        assert!(Field::new(g, FieldKind::TimeOnly, vec![0.0, f64::NAN, 1.0]).is_err());
    }
}
