use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::{FieldKind, Grid};
use crate::error::{Error, Result};
use crate::kl::KlBasis;

/// Squared-exponential covariance
/// `C = variance * exp(-(x - x')^2 / l^2 - (t - t')^2 / tau^2)`.
///
/// Either correlation scale may be absent, in which case the kernel is
/// constant along that axis and can only be used for the other one.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeKernel {
    pub variance: f64,
    #[serde(default)]
    pub length: Option<f64>,
    #[serde(default)]
    pub time: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Space,
    Time,
    SpaceTime,
}

impl SeKernel {
    pub fn space(variance: f64, length: f64) -> Self {
        Self {
            variance,
            length: Some(length),
            time: None,
        }
    }

    pub fn time(variance: f64, time: f64) -> Self {
        Self {
            variance,
            length: None,
            time: Some(time),
        }
    }

    pub fn space_time(variance: f64, length: f64, time: f64) -> Self {
        Self {
            variance,
            length: Some(length),
            time: Some(time),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.variance > 0.0 && self.variance.is_finite()) {
            return Err(Error::invalid(format!(
                "kernel variance must be positive, got {}",
                self.variance
            )));
        }
        for (name, v) in [("length", self.length), ("time", self.time)] {
            if let Some(v) = v {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(Error::invalid(format!(
                        "kernel correlation {name} must be positive, got {v}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Kernel value for a pair of space-time points.
    pub fn eval(&self, x: f64, t: f64, x2: f64, t2: f64) -> f64 {
        let mut e = 0.0;
        if let Some(l) = self.length {
            e += (x - x2).powi(2) / (l * l);
        }
        if let Some(tau) = self.time {
            e += (t - t2).powi(2) / (tau * tau);
        }
        self.variance * (-e).exp()
    }

    /// Returns the kernel with correlation scales multiplied by `alpha` and
    /// variance multiplied by `beta`.
    pub fn scaled(&self, alpha: f64, beta: f64) -> Self {
        Self {
            variance: self.variance * beta,
            length: self.length.map(|l| l * alpha),
            time: self.time.map(|t| t * alpha),
        }
    }
}

/// Unit-variance 1D eigenpairs of the correlation matrix on `coords`, sorted
/// by descending eigenvalue. Eigenvectors are orthonormal in the plain
/// Euclidean (unit node weight) inner product.
struct AxisEigen {
    values: Vec<f64>,
    vectors: DMatrix<f64>,
}

fn axis_eigen(coords: &[f64], scale: f64) -> Result<AxisEigen> {
    let n = coords.len();
    let gram = DMatrix::from_fn(n, n, |i, j| {
        let d = (coords[i] - coords[j]) / scale;
        (-d * d).exp()
    });
    let eig = SymmetricEigen::new(gram);
    let top = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    let low = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    // Smooth kernels are numerically singular; tiny negative values are
    // round-off, anything larger means the matrix is not a covariance.
    if !(top > 0.0) || low < -1e-8 * top {
        return Err(Error::decomposition(format!(
            "kernel matrix is not positive semi-definite (eigenvalue range [{low:e}, {top:e}])"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let values = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let vectors = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    Ok(AxisEigen { values, vectors })
}

/// Truncated KL basis of a squared-exponential kernel, discretized by
/// collocation on the grid nodes of `axis`.
///
/// For [`Axis::SpaceTime`] the separable kernel is factorized exactly into
/// the tensor product of the two 1D decompositions; the retained terms are
/// the `n_terms` largest products.
pub fn kernel_basis(kernel: &SeKernel, grid: &Grid, axis: Axis, n_terms: usize) -> Result<KlBasis> {
    kernel.validate()?;
    let xs: Vec<f64> = (0..grid.space_nodes()).map(|i| grid.x(i)).collect();
    let ts: Vec<f64> = (0..grid.time_nodes()).map(|j| grid.t(j)).collect();

    let (kind, n_nodes) = match axis {
        Axis::Space => (FieldKind::SpaceOnly, xs.len()),
        Axis::Time => (FieldKind::TimeOnly, ts.len()),
        Axis::SpaceTime => (FieldKind::SpaceTime, grid.len()),
    };
    if n_terms == 0 || n_terms > n_nodes {
        return Err(Error::invalid(format!(
            "requested {n_terms} KL terms on an axis with {n_nodes} nodes"
        )));
    }

    let require = |scale: Option<f64>, name: &str| {
        scale.ok_or_else(|| Error::invalid(format!("{axis:?} basis needs a correlation {name}")))
    };

    let (eigenvalues, modes, tail) = match axis {
        Axis::Space | Axis::Time => {
            let (coords, scale) = if axis == Axis::Space {
                (&xs, require(kernel.length, "length")?)
            } else {
                (&ts, require(kernel.time, "time")?)
            };
            let e = axis_eigen(coords, scale)?;
            let lambdas: Vec<f64> = e.values.iter().map(|v| kernel.variance * v).collect();
            let modes = DMatrix::from_fn(n_nodes, n_terms, |r, c| {
                lambdas[c].sqrt() * e.vectors[(r, c)]
            });
            let tail: f64 = lambdas[n_terms..].iter().sum();
            (lambdas[..n_terms].to_vec(), modes, tail)
        }
        Axis::SpaceTime => {
            let ex = axis_eigen(&xs, require(kernel.length, "length")?)?;
            let et = axis_eigen(&ts, require(kernel.time, "time")?)?;
            // Product spectrum; ties keep the (space, time) enumeration order.
            let mut products: Vec<(f64, usize, usize)> = Vec::with_capacity(n_nodes);
            for (a, &mx) in ex.values.iter().enumerate() {
                for (b, &mt) in et.values.iter().enumerate() {
                    products.push((kernel.variance * mx * mt, a, b));
                }
            }
            products.sort_by(|p, q| q.0.partial_cmp(&p.0).unwrap_or(std::cmp::Ordering::Equal));
            let nx = xs.len();
            let mut modes = DMatrix::zeros(n_nodes, n_terms);
            for (c, &(lambda, a, b)) in products[..n_terms].iter().enumerate() {
                let s = lambda.sqrt();
                for t in 0..ts.len() {
                    let vt = et.vectors[(t, b)];
                    for x in 0..nx {
                        modes[(t * nx + x, c)] = s * ex.vectors[(x, a)] * vt;
                    }
                }
            }
            let tail: f64 = products[n_terms..].iter().map(|p| p.0).sum();
            let lambdas = products[..n_terms].iter().map(|p| p.0).collect();
            (lambdas, modes, tail)
        }
    };

    let total: f64 = eigenvalues.iter().sum::<f64>() + tail;
    let rtol = if total > 0.0 { tail / total } else { 0.0 };
    KlBasis::from_parts(*grid, kind, vec![0.0; n_nodes], eigenvalues, modes, rtol)
}
