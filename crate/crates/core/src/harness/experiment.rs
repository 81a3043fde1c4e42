//! End-to-end experiments: generate, train, transfer, evaluate, report.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;

use super::artifact::{save_artifact, Artifact};
use super::config::{CaseConfig, ExperimentConfig, ProblemConfig, RunConfig};
use super::dataset::{generate_dataset, Dataset};
use super::report::{mean_std, ErrorReport, ReportFormat, ReportRow};
use super::{compute_error, ErrorMode};
use crate::error::{Error, Result};
use crate::field::RngStream;
use crate::transfer::{
    predict, train_source, transfer_linear, transfer_nonlinear, ConditionSpec, MapKind, ProblemSetup, SurrogateModel,
    TransferOptions,
};

/// Relative errors of a model on every sample of a test set, in sample
/// order.
pub fn evaluate(model: &SurrogateModel, test: &Dataset) -> Result<Vec<f64>> {
    let predictor = model.predictor()?;
    test.samples
        .par_iter()
        .map(|s| compute_error(&s.solution, &predictor.predict(&s.controls)?, ErrorMode::Total))
        .collect()
}

/// Everything an experiment produced, kept in memory.
#[derive(Clone, Debug)]
pub struct ExperimentRun {
    pub report: ErrorReport,
    /// Source models per case, keyed by map kind name.
    pub sources: Vec<BTreeMap<String, SurrogateModel>>,
    pub source_data: Vec<Dataset>,
}

fn map_name(kind: MapKind) -> &'static str {
    match kind {
        MapKind::Ols => "ols",
        MapKind::Rls => "rls",
        MapKind::Mlp => "mlp",
    }
}

fn seed_for(master: u64, what: &str) -> u64 {
    RngStream::derive_seed(master, what)
}

struct RowMeta {
    sigma2_y: Option<f64>,
    alpha: Option<f64>,
    beta: Option<f64>,
}

fn row_meta(c: &ConditionSpec) -> RowMeta {
    match c {
        ConditionSpec::Linear(l) => RowMeta {
            sigma2_y: None,
            alpha: Some(l.alpha),
            beta: Some(l.beta),
        },
        ConditionSpec::Nonlinear(n) => RowMeta {
            sigma2_y: Some(n.y_kernel.variance),
            alpha: None,
            beta: None,
        },
    }
}

/// Runs every case of `config`. Stage failures are reported with the stage
/// and condition they came from.
pub fn run(config: &ExperimentConfig) -> Result<ExperimentRun> {
    config.validate()?;
    let mut out = ExperimentRun {
        report: ErrorReport::default(),
        sources: Vec::new(),
        source_data: Vec::new(),
    };
    if config.n_test == 0 {
        log::warn!("experiment `{}` has n_test = 0; nothing to evaluate", config.id);
        return Ok(out);
    }
    let setup = config.setup()?;
    for (ci, case) in config.cases.iter().enumerate() {
        run_case(config, &setup, ci, case, &mut out)?;
    }
    Ok(out)
}

fn run_case(
    config: &ExperimentConfig,
    setup: &ProblemSetup,
    ci: usize,
    case: &CaseConfig,
    out: &mut ExperimentRun,
) -> Result<()> {
    let label = case.source.label().to_string();
    log::info!("case {ci}: generating {} source samples", config.n_train);
    let (train, test, test_seed) = source_datasets(config, setup, ci)?;

    let mut kinds: Vec<MapKind> = case.methods.iter().map(|m| m.map_kind()).collect();
    for t in &case.targets {
        kinds.extend(t.runs.iter().map(|r| r.method.map_kind()));
    }
    let mut models: BTreeMap<String, SurrogateModel> = BTreeMap::new();
    for kind in kinds {
        let name = map_name(kind);
        if models.contains_key(name) {
            continue;
        }
        log::info!("case {ci}: training {name} source map");
        let m = train_source(&train, kind, &config.bases).map_err(|e| e.in_stage("train", &label))?;
        models.insert(name.to_string(), m);
    }

    let meta = row_meta(&case.source);
    for method in &case.methods {
        let model = &models[map_name(method.map_kind())];
        let eps = evaluate(model, &test).map_err(|e| e.in_stage("evaluate", &label))?;
        let (mean, std) = mean_std(&eps);
        out.report.push(ReportRow {
            experiment: config.id.clone(),
            condition: label.clone(),
            method: method.name().into(),
            sigma2_y: meta.sigma2_y,
            alpha: meta.alpha,
            beta: meta.beta,
            gamma: matches!(config.problem, ProblemConfig::Linear { .. }).then_some(0.0),
            n_train: config.n_train,
            mean_eps: mean,
            std_eps: std,
            n_samples: eps.len(),
            seed: test_seed,
        })?;
    }

    for (ti, target) in case.targets.iter().enumerate() {
        let tlabel = target.condition.label().to_string();
        let (ttest, labeled, test_seed) = target_datasets(config, setup, ci, ti)?;
        let meta = row_meta(&target.condition);
        for run in &target.runs {
            let source = &models[map_name(run.method.map_kind())];
            let model = transfer_run(source, &target.condition, run, labeled.as_ref())
                .map_err(|e| e.in_stage("transfer", &tlabel))?;
            let eps = evaluate(&model, &ttest).map_err(|e| e.in_stage("evaluate", &tlabel))?;
            let (mean, std) = mean_std(&eps);
            out.report.push(ReportRow {
                experiment: config.id.clone(),
                condition: tlabel.clone(),
                method: run.method.name().into(),
                sigma2_y: meta.sigma2_y,
                alpha: meta.alpha,
                beta: meta.beta,
                gamma: matches!(target.condition, ConditionSpec::Linear(_)).then_some(run.gamma),
                n_train: run.n_train,
                mean_eps: mean,
                std_eps: std,
                n_samples: eps.len(),
                seed: test_seed,
            })?;
        }
    }
    out.sources.push(models);
    out.source_data.push(train);
    Ok(())
}

/// Source training and test sets of case `ci`, and the test seed.
pub fn source_datasets(config: &ExperimentConfig, setup: &ProblemSetup, ci: usize) -> Result<(Dataset, Dataset, u64)> {
    let case = config
        .cases
        .get(ci)
        .ok_or_else(|| Error::Config(format!("no case {ci} in `{}`", config.id)))?;
    let label = case.source.label();
    let train = generate_dataset(setup, &case.source, config.n_train, seed_for(config.seed, &format!("case{ci}/train")))
        .map_err(|e| e.in_stage("generate", label))?;
    let test_seed = seed_for(config.seed, &format!("case{ci}/test"));
    let test =
        generate_dataset(setup, &case.source, config.n_test, test_seed).map_err(|e| e.in_stage("generate", label))?;
    Ok((train, test, test_seed))
}

/// Target test set, labeled target samples (as many as the largest run
/// needs) and the test seed for target `ti` of case `ci`.
pub fn target_datasets(
    config: &ExperimentConfig,
    setup: &ProblemSetup,
    ci: usize,
    ti: usize,
) -> Result<(Dataset, Option<Dataset>, u64)> {
    let target = config
        .cases
        .get(ci)
        .and_then(|c| c.targets.get(ti))
        .ok_or_else(|| Error::Config(format!("no target {ti} in case {ci} of `{}`", config.id)))?;
    let label = target.condition.label();
    let test_seed = seed_for(config.seed, &format!("case{ci}/target{ti}/test"));
    let test = generate_dataset(setup, &target.condition, config.n_test, test_seed)
        .map_err(|e| e.in_stage("generate", label))?;
    let n_labeled = target.runs.iter().map(|r| r.n_train).max().unwrap_or(0);
    let labeled = if n_labeled > 0 {
        let s = seed_for(config.seed, &format!("case{ci}/target{ti}/train"));
        Some(generate_dataset(setup, &target.condition, n_labeled, s).map_err(|e| e.in_stage("generate", label))?)
    } else {
        None
    };
    Ok((test, labeled, test_seed))
}

/// Applies one configured transfer to a source model.
pub fn transfer_run(
    source: &SurrogateModel,
    condition: &ConditionSpec,
    run: &RunConfig,
    labeled: Option<&Dataset>,
) -> Result<SurrogateModel> {
    match condition {
        ConditionSpec::Linear(c) => transfer_linear(source, c, run.gamma),
        ConditionSpec::Nonlinear(c) => {
            let mut opts = TransferOptions::default();
            if let Some(n) = run.n_r {
                opts.n_r = n;
            }
            if let Some(l) = run.lambda_r {
                opts.lambda_r = l;
            }
            if let Some(r) = run.residual_latents {
                opts.residual_latents = r;
            }
            let data = labeled.map(|d| d.head(run.n_train)).filter(|d| !d.is_empty());
            transfer_nonlinear(source, c, run.method.nonlinear(), &opts, data.as_ref())
        }
    }
}

/// Runs an experiment and writes the report, source models and (optionally)
/// the source datasets under `out`.
pub fn run_experiment(config: &ExperimentConfig, out: &Path, format: ReportFormat) -> Result<ErrorReport> {
    let result = run(config)?;
    std::fs::create_dir_all(out)?;
    result.report.write(out, format)?;
    for (ci, models) in result.sources.iter().enumerate() {
        for (name, m) in models {
            save_artifact(&out.join(format!("case{ci}-{name}.kltw")), &Artifact::Model(m.clone()))?;
        }
    }
    if config.save_datasets {
        for (ci, d) in result.source_data.iter().enumerate() {
            save_artifact(&out.join(format!("case{ci}-train.kltw")), &Artifact::Dataset(d.clone()))?;
        }
    }
    let manifest = serde_json::json!({ "config": config, "rows": result.report.rows.len() });
    std::fs::write(
        out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).map_err(|e| Error::invalid(e.to_string()))?,
    )?;
    Ok(result.report)
}

/// Prediction for every sample of a dataset, in order.
pub fn predict_all(model: &SurrogateModel, data: &Dataset) -> Result<Vec<crate::field::Field>> {
    data.samples.par_iter().map(|s| predict(model, &s.controls)).collect()
}
