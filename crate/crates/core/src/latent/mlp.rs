//! Fully connected tanh network with an identity output layer, trained by
//! full-batch Adam on the mean squared latent error.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    widths: Vec<usize>,
    weights: Vec<DMatrix<f64>>,
    biases: Vec<DVector<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    pub learning_rate: f64,
    /// Learning rate reached at `max_epochs` by exponential decay; equal to
    /// `learning_rate` for a constant step.
    pub final_learning_rate: f64,
    pub max_epochs: usize,
    /// Stop when the best loss improved by less than `min_improvement`
    /// over this many epochs.
    pub patience: usize,
    pub min_improvement: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            final_learning_rate: 1e-3,
            max_epochs: 20_000,
            patience: 500,
            min_improvement: 1e-10,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Gradient of the loss with respect to every layer.
#[derive(Clone, Debug)]
pub struct Gradient {
    pub loss: f64,
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

impl Mlp {
    /// Random network; weights and biases drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn new(widths: &[usize], seed: u64) -> Result<Self> {
        check_widths(widths)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in widths.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            weights.push(DMatrix::from_fn(w[1], w[0], |_, _| rng.random_range(-bound..bound)));
            biases.push(DVector::from_fn(w[1], |_, _| rng.random_range(-bound..bound)));
        }
        Ok(Self {
            widths: widths.to_vec(),
            weights,
            biases,
        })
    }

    pub fn zeros(widths: &[usize]) -> Result<Self> {
        check_widths(widths)?;
        Ok(Self {
            widths: widths.to_vec(),
            weights: widths.windows(2).map(|w| DMatrix::zeros(w[1], w[0])).collect(),
            biases: widths.windows(2).map(|w| DVector::zeros(w[1])).collect(),
        })
    }

    pub fn from_parts(weights: Vec<DMatrix<f64>>, biases: Vec<DVector<f64>>) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(Error::invalid("network needs one bias per weight matrix"));
        }
        let mut widths = vec![weights[0].ncols()];
        for (w, b) in weights.iter().zip(&biases) {
            if w.ncols() != *widths.last().unwrap() || b.len() != w.nrows() {
                return Err(Error::invalid("inconsistent layer shapes"));
            }
            widths.push(w.nrows());
        }
        Ok(Self {
            widths,
            weights,
            biases,
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn weights(&self) -> &[DMatrix<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[DVector<f64>] {
        &self.biases
    }

    pub fn n_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>() + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    /// Output layer `(W_{N+1}, b_{N+1})`.
    pub fn last_layer(&self) -> (&DMatrix<f64>, &DVector<f64>) {
        (self.weights.last().unwrap(), self.biases.last().unwrap())
    }

    pub fn set_last_layer(&mut self, w: DMatrix<f64>, b: DVector<f64>) -> Result<()> {
        let (w0, b0) = self.last_layer();
        if w.shape() != w0.shape() || b.len() != b0.len() {
            return Err(Error::invalid("replacement output layer has the wrong shape"));
        }
        *self.weights.last_mut().unwrap() = w;
        *self.biases.last_mut().unwrap() = b;
        Ok(())
    }

    pub fn forward(&self, xi: &[f64]) -> Vec<f64> {
        let x = DMatrix::from_column_slice(xi.len(), 1, xi);
        self.forward_batch(&x).as_slice().to_vec()
    }

    /// Outputs for a batch with one input per column.
    pub fn forward_batch(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let (w, b) = self.last_layer();
        affine(w, b, &self.features(x))
    }

    /// Activations of the last hidden layer (the input itself when there
    /// is no hidden layer).
    pub fn features(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut a = x.clone();
        for (w, b) in self.weights.iter().zip(&self.biases).take(self.weights.len() - 1) {
            a = affine(w, b, &a);
            a.apply(|v| *v = v.tanh());
        }
        a
    }

    /// `d NN / d xi` at one input.
    pub fn input_jacobian(&self, xi: &[f64]) -> DMatrix<f64> {
        let mut a = DVector::from_column_slice(xi);
        let mut jac = DMatrix::identity(xi.len(), xi.len());
        let last = self.weights.len() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let z = w * &a + b;
            jac = w * jac;
            if l < last {
                a = z.map(f64::tanh);
                for (mut row, &ai) in jac.row_iter_mut().zip(a.iter()) {
                    row *= 1.0 - ai * ai;
                }
            } else {
                a = z;
            }
        }
        jac
    }

    /// Mean over samples of the squared output error.
    pub fn loss(&self, x: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
        let pred = self.forward_batch(x);
        (pred - y).norm_squared() / x.ncols() as f64
    }

    pub fn gradient(&self, x: &DMatrix<f64>, y: &DMatrix<f64>) -> Gradient {
        let m = x.ncols() as f64;
        let n = self.weights.len();
        let mut acts = Vec::with_capacity(n + 1);
        acts.push(x.clone());
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = affine(w, b, &acts[l]);
            if l + 1 < n {
                z.apply(|v| *v = v.tanh());
            }
            acts.push(z);
        }
        let resid = &acts[n] - y;
        let loss = resid.norm_squared() / m;
        let mut delta = resid * (2.0 / m);
        let mut gw = vec![DMatrix::zeros(0, 0); n];
        let mut gb = vec![DVector::zeros(0); n];
        for l in (0..n).rev() {
            gw[l] = &delta * acts[l].transpose();
            gb[l] = row_sums(&delta);
            if l > 0 {
                let mut back = self.weights[l].tr_mul(&delta);
                back.zip_apply(&acts[l], |d, a| *d *= 1.0 - a * a);
                delta = back;
            }
        }
        Gradient {
            loss,
            weights: gw,
            biases: gb,
        }
    }

    /// Full-batch Adam. The parameters with the lowest loss seen are kept,
    /// so the final loss never exceeds the initial one.
    pub fn train(&mut self, x: &DMatrix<f64>, y: &DMatrix<f64>, opts: &TrainOptions) -> Result<TrainReport> {
        if x.ncols() == 0 || x.ncols() != y.ncols() {
            return Err(Error::invalid("training set must be nonempty with matching columns"));
        }
        if x.nrows() != self.widths[0] || y.nrows() != *self.widths.last().unwrap() {
            return Err(Error::invalid("training set dimensions do not match the network"));
        }
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        let mut mw: Vec<DMatrix<f64>> = self.weights.iter().map(|w| w.map(|_| 0.0)).collect();
        let mut vw = mw.clone();
        let mut mb: Vec<DVector<f64>> = self.biases.iter().map(|b| b.map(|_| 0.0)).collect();
        let mut vb = mb.clone();
        let initial_loss = self.loss(x, y);
        let mut best = (initial_loss, self.clone());
        let mut window_start = initial_loss;
        let decay = if opts.max_epochs > 0 && opts.final_learning_rate > 0.0 {
            (opts.final_learning_rate / opts.learning_rate).ln() / opts.max_epochs as f64
        } else {
            0.0
        };
        let mut epochs = 0;
        for epoch in 1..=opts.max_epochs {
            epochs = epoch;
            let g = self.gradient(x, y);
            if !g.loss.is_finite() {
                return Err(Error::Training(format!(
                    "loss diverged at epoch {epoch} (best loss {:e})",
                    best.0
                )));
            }
            if g.loss < best.0 {
                best = (g.loss, self.clone());
            }
            if epoch % opts.patience.max(1) == 0 {
                if window_start - best.0 < opts.min_improvement {
                    break;
                }
                window_start = best.0;
            }
            let lr = opts.learning_rate * (decay * epoch as f64).exp();
            let c1 = 1.0 - b1_pow(b1, epoch);
            let c2 = 1.0 - b1_pow(b2, epoch);
            let step = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
                for i in 0..p.len() {
                    m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                    v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                    p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                }
            };
            for l in 0..self.weights.len() {
                step(self.weights[l].as_mut_slice(), g.weights[l].as_slice(), mw[l].as_mut_slice(), vw[l].as_mut_slice());
                step(self.biases[l].as_mut_slice(), g.biases[l].as_slice(), mb[l].as_mut_slice(), vb[l].as_mut_slice());
            }
        }
        let final_here = self.loss(x, y);
        if final_here < best.0 {
            best = (final_here, self.clone());
        }
        *self = best.1;
        Ok(TrainReport {
            epochs,
            initial_loss,
            final_loss: best.0,
        })
    }

    /// All parameters, layer by layer (weights column-major, then biases).
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b.as_slice());
        }
        out
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.n_params() {
            return Err(Error::invalid("parameter vector has the wrong length"));
        }
        let mut at = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            let n = w.len();
            w.as_mut_slice().copy_from_slice(&p[at..at + n]);
            at += n;
            let n = b.len();
            b.as_mut_slice().copy_from_slice(&p[at..at + n]);
            at += n;
        }
        Ok(())
    }
}

impl Gradient {
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b.as_slice());
        }
        out
    }
}

fn b1_pow(b: f64, n: usize) -> f64 {
    b.powi(n.min(i32::MAX as usize) as i32)
}

fn check_widths(widths: &[usize]) -> Result<()> {
    if widths.len() < 2 || widths.contains(&0) {
        return Err(Error::invalid(format!("invalid layer widths {widths:?}")));
    }
    Ok(())
}

fn affine(w: &DMatrix<f64>, b: &DVector<f64>, a: &DMatrix<f64>) -> DMatrix<f64> {
    let mut z = w * a;
    for mut col in z.column_iter_mut() {
        col += b;
    }
    z
}

fn row_sums(m: &DMatrix<f64>) -> DVector<f64> {
    let mut s = DVector::zeros(m.nrows());
    for col in m.column_iter() {
        s += col;
    }
    s
}
