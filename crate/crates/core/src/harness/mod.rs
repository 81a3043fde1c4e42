//! Dataset generation, error metrics, experiment configuration,
//! persistence and reports.

pub mod artifact;
pub mod config;
pub mod dataset;
pub mod experiment;
pub mod report;

pub use artifact::{load_artifact, save_artifact, Artifact};
pub use config::{ExperimentConfig, Method};
pub use dataset::{generate_dataset, Controls, Dataset, Sample};
pub use experiment::{evaluate, run, run_experiment, ExperimentRun};
pub use report::{ErrorReport, ReportFormat, ReportRow};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{l2_distance, Field};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorMode {
    Total,
    Mapping,
    Representation,
}

/// Relative l2 error `||reference - prediction|| / ||reference||`. The
/// mode names which pair of quantities is being compared; the functional
/// is the same.
pub fn compute_error(reference: &Field, prediction: &Field, _mode: ErrorMode) -> Result<f64> {
    reference.ensure_compatible(prediction)?;
    let norm = reference.norm();
    if !(norm > 0.0) {
        return Err(Error::invalid("relative error against a zero-norm reference"));
    }
    Ok(l2_distance(reference.values(), prediction.values()) / norm)
}
