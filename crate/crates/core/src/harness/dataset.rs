//! Monte Carlo datasets: sampled controls and their reference solutions.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::{kernel_basis, sample_gaussian_field_with, Axis, Field, RngStream};
use crate::solver::{solve_diffusion, Ibc, SourceSpec};
use crate::transfer::{ConditionSpec, ProblemSetup};

/// Concrete control inputs of one PDE instance.
#[derive(Clone, Debug, PartialEq)]
pub enum Controls {
    Linear { f: Field, q: Field, h0: f64, hl: f64, hr: f64 },
    Nonlinear { k: Field },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub controls: Controls,
    /// Standard-normal coefficients used to draw the random fields.
    pub latent: Vec<f64>,
    pub solution: Field,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub setup: ProblemSetup,
    pub condition: ConditionSpec,
    pub seed: u64,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// The first `n` samples.
    pub fn head(&self, n: usize) -> Dataset {
        Dataset {
            setup: self.setup.clone(),
            condition: self.condition.clone(),
            seed: self.seed,
            samples: self.samples[..n.min(self.len())].to_vec(),
        }
    }

    pub fn solutions(&self) -> Vec<Field> {
        self.samples.iter().map(|s| s.solution.clone()).collect()
    }
}

/// Draws `n_samples` control realizations and solves each one. Sample `i`
/// uses stream `i` of `seed`, so the result does not depend on the number
/// of worker threads.
pub fn generate_dataset(setup: &ProblemSetup, condition: &ConditionSpec, n_samples: usize, seed: u64) -> Result<Dataset> {
    condition.validate()?;
    let grid = *setup.grid();
    let samples = match (setup, condition) {
        (ProblemSetup::Linear(p), ConditionSpec::Linear(c)) => {
            let (fb, qb) = c.sampling_bases(&grid)?;
            (0..n_samples)
                .into_par_iter()
                .map(|i| {
                    let mut rng = RngStream::new(seed, i as u64).rng();
                    let (f, mut latent) = sample_gaussian_field_with(&fb, &mut rng);
                    let (q, xq) = sample_gaussian_field_with(&qb, &mut rng);
                    latent.extend(xq);
                    let h0 = c.h0.sample(&mut rng);
                    let hl = c.hl.sample(&mut rng);
                    let hr = c.hr.sample(&mut rng);
                    let src = SourceSpec {
                        f: Some(f.clone()),
                        q: Some(q.clone()),
                        x_star: p.x_star,
                    };
                    let solution = solve_diffusion(&grid, &p.k, &src, &Ibc::constant(h0, hl, hr))
                        .map_err(|e| Error::decomposition(format!("sample {i}: {e}")))?;
                    Ok(Sample {
                        controls: Controls::Linear { f, q, h0, hl, hr },
                        latent,
                        solution,
                    })
                })
                .collect::<Result<Vec<_>>>()?
        }
        (ProblemSetup::Nonlinear { .. }, ConditionSpec::Nonlinear(c)) => {
            let yb = kernel_basis(&c.y_kernel, &grid, Axis::Space, c.y_terms)?;
            let ibc = c.ibc();
            (0..n_samples)
                .into_par_iter()
                .map(|i| {
                    let mut rng = RngStream::new(seed, i as u64).rng();
                    let (y, latent) = sample_gaussian_field_with(&yb, &mut rng);
                    let k = y.map(f64::exp)?;
                    let solution = solve_diffusion(&grid, &k, &SourceSpec::none(), &ibc)
                        .map_err(|e| Error::decomposition(format!("sample {i}: {e}")))?;
                    Ok(Sample {
                        controls: Controls::Nonlinear { k },
                        latent,
                        solution,
                    })
                })
                .collect::<Result<Vec<_>>>()?
        }
        _ => return Err(Error::invalid("problem setup and condition disagree on the problem")),
    };
    Ok(Dataset {
        setup: setup.clone(),
        condition: condition.clone(),
        seed,
        samples,
    })
}
