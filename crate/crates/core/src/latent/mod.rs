//! Maps from control latents `xi` to state latents `eta`.

pub mod mlp;
pub mod ols;
pub mod retrain;
pub mod rls;

pub use mlp::{Mlp, TrainOptions, TrainReport};
pub use ols::{default_ridge, fit_ols};
pub use retrain::{assemble_nonlinear_residual, retrain_last_layer, RetrainMode, RetrainOptions, Underdetermined};
pub use rls::{assemble_rls_fluctuation, assemble_rls_linear, solve_rls, ResidualSystem, RlsWeights};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::field::l2_distance;

/// `eta = W xi + bias`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearMap {
    pub w: DMatrix<f64>,
    pub bias: Option<DVector<f64>>,
}

impl LinearMap {
    pub fn new(w: DMatrix<f64>) -> Self {
        Self { w, bias: None }
    }

    pub fn input_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn apply(&self, xi: &[f64]) -> Vec<f64> {
        let mut out = &self.w * DVector::from_column_slice(xi);
        if let Some(b) = &self.bias {
            out += b;
        }
        out.as_slice().to_vec()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LatentMap {
    Linear(LinearMap),
    Mlp(Mlp),
}

impl LatentMap {
    pub fn input_dim(&self) -> usize {
        match self {
            LatentMap::Linear(m) => m.input_dim(),
            LatentMap::Mlp(m) => m.widths()[0],
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            LatentMap::Linear(m) => m.output_dim(),
            LatentMap::Mlp(m) => *m.widths().last().expect("nonempty widths"),
        }
    }

    pub fn apply(&self, xi: &[f64]) -> Result<Vec<f64>> {
        if xi.len() != self.input_dim() {
            return Err(Error::invalid(format!(
                "map expects {} inputs, got {}",
                self.input_dim(),
                xi.len()
            )));
        }
        Ok(match self {
            LatentMap::Linear(m) => m.apply(xi),
            LatentMap::Mlp(m) => m.forward(xi),
        })
    }

    /// `d eta / d xi` at `xi`.
    pub fn jacobian(&self, xi: &[f64]) -> Result<DMatrix<f64>> {
        if xi.len() != self.input_dim() {
            return Err(Error::invalid("jacobian input has the wrong length"));
        }
        Ok(match self {
            LatentMap::Linear(m) => m.w.clone(),
            LatentMap::Mlp(m) => m.input_jacobian(xi),
        })
    }
}

/// Relative mapping error `||eta_true - eta_pred|| / ||eta_true||`.
pub fn mapping_error(eta_true: &[f64], eta_pred: &[f64]) -> Result<f64> {
    if eta_true.len() != eta_pred.len() {
        return Err(Error::invalid("latent vectors differ in length"));
    }
    let norm = eta_true.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 0.0) {
        return Err(Error::invalid("mapping error against a zero latent vector"));
    }
    Ok(l2_distance(eta_true, eta_pred) / norm)
}

/// Columns of `samples` stacked into an `n x M` matrix.
pub(crate) fn columns(samples: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = samples
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::invalid("empty latent dataset"))?;
    if samples.iter().any(|s| s.len() != n) {
        return Err(Error::invalid("latent vectors differ in length"));
    }
    Ok(DMatrix::from_fn(n, samples.len(), |r, c| samples[c][r]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mapping_error_cases() {
        let t = [1.0, -2.0, 0.5];
        assert_eq!(mapping_error(&t, &t).unwrap(), 0.0);
        assert!((mapping_error(&t, &[0.0; 3]).unwrap() - 1.0).abs() < 1e-15);
        let twice: Vec<f64> = t.iter().map(|v| 2.0 * v).collect();
        assert!((mapping_error(&t, &twice).unwrap() - 1.0).abs() < 1e-15);
        assert!(mapping_error(&[0.0; 2], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn linear_map_jacobian_is_w() {
        let w = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let m = LatentMap::Linear(LinearMap::new(w.clone()));
        assert_eq!(m.apply(&[1.0, 0.0, -1.0]).unwrap(), vec![-2.0, -2.0]);
        assert_eq!(m.jacobian(&[0.0; 3]).unwrap(), w);
        assert!(m.apply(&[1.0]).is_err());
    }
}
