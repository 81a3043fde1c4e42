//! Source training, transfer to new operating conditions, and prediction.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{kernel_basis, sample_gaussian_field, Axis, Field, FieldKind, Grid, RngStream, SeKernel};
use crate::harness::dataset::{Controls, Dataset};
use crate::kl::{empirical_basis, ensemble_mean, KlBasis, Projector};
use crate::latent::mlp::{Mlp, TrainOptions};
use crate::latent::retrain::{ResidualProblem, RetrainMode, RetrainOptions, Underdetermined};
use crate::latent::{
    assemble_rls_fluctuation, assemble_rls_linear, default_ridge, fit_ols, retrain_last_layer, LatentMap,
    RlsWeights,
};
use crate::solver::{solve_diffusion, Ibc, SourceSpec};

/// Deterministic mean functions of the linear-problem controls.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MeanFn {
    Constant { value: f64 },
    /// `a sin(2 pi x cos(10 pi t))`.
    SinChirp { amplitude: f64 },
    /// `a (exp(x) + t^3 - t x)`.
    ExpPoly { amplitude: f64 },
    /// `a sin(2 pi t / T)`.
    SinPeriod { amplitude: f64 },
    /// `a cos(2 pi t / T)`.
    CosPeriod { amplitude: f64 },
}

impl MeanFn {
    pub fn eval(&self, x: f64, t: f64, horizon: f64) -> f64 {
        use std::f64::consts::PI;
        match *self {
            MeanFn::Constant { value } => value,
            MeanFn::SinChirp { amplitude } => amplitude * (2.0 * PI * x * (10.0 * PI * t).cos()).sin(),
            MeanFn::ExpPoly { amplitude } => amplitude * (x.exp() + t.powi(3) - t * x),
            MeanFn::SinPeriod { amplitude } => amplitude * (2.0 * PI * t / horizon).sin(),
            MeanFn::CosPeriod { amplitude } => amplitude * (2.0 * PI * t / horizon).cos(),
        }
    }

    pub fn space_time(&self, grid: &Grid) -> Field {
        let h = grid.horizon();
        Field::space_time_fn(*grid, |x, t| self.eval(x, t, h))
    }

    pub fn time(&self, grid: &Grid) -> Field {
        let h = grid.horizon();
        Field::time_fn(*grid, |t| self.eval(0.0, t, h))
    }
}

/// Closed interval for a uniformly distributed scalar.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl Range {
    pub fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    pub fn fixed(v: f64) -> Self {
        Self { min: v, max: v }
    }

    pub fn mean(&self) -> f64 {
        0.5 * (self.min + self.max)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        self.min + u * (self.max - self.min)
    }

    fn validate(&self, name: &str) -> Result<()> {
        if !(self.min <= self.max) || !self.min.is_finite() || !self.max.is_finite() {
            return Err(Error::invalid(format!("{name} range [{}, {}] is not ordered", self.min, self.max)));
        }
        Ok(())
    }
}

/// Control distribution of the linear problem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearCondition {
    pub label: String,
    pub f_mean: MeanFn,
    pub q_mean: MeanFn,
    pub f_kernel: SeKernel,
    pub q_kernel: SeKernel,
    /// Terms of the sampling expansions (the model bases are sized
    /// separately).
    pub f_terms: usize,
    pub q_terms: usize,
    pub h0: Range,
    pub hl: Range,
    pub hr: Range,
    #[serde(default = "one")]
    pub alpha: f64,
    #[serde(default = "one")]
    pub beta: f64,
}

/// Conductivity distribution and deterministic IBCs of the nonlinear problem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NonlinearCondition {
    pub label: String,
    /// Kernel of `y = ln k`.
    pub y_kernel: SeKernel,
    pub y_terms: usize,
    pub h0: f64,
    pub hl: f64,
    pub hr: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "problem", rename_all = "snake_case")]
pub enum ConditionSpec {
    Linear(LinearCondition),
    Nonlinear(NonlinearCondition),
}

impl ConditionSpec {
    pub fn label(&self) -> &str {
        match self {
            ConditionSpec::Linear(c) => &c.label,
            ConditionSpec::Nonlinear(c) => &c.label,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ConditionSpec::Linear(c) => {
                c.f_kernel.validate()?;
                c.q_kernel.validate()?;
                c.h0.validate("h0")?;
                c.hl.validate("hl")?;
                c.hr.validate("hr")?;
                if !(c.alpha > 0.0) || !(c.beta > 0.0) {
                    return Err(Error::invalid("scaling factors must be positive"));
                }
                if c.f_terms == 0 || c.q_terms == 0 {
                    return Err(Error::invalid("sampling expansions need at least one term"));
                }
                Ok(())
            }
            ConditionSpec::Nonlinear(c) => {
                c.y_kernel.validate()?;
                if c.y_terms == 0 {
                    return Err(Error::invalid("sampling expansion needs at least one term"));
                }
                for v in [c.h0, c.hl, c.hr] {
                    if !v.is_finite() {
                        return Err(Error::invalid("IBC values must be finite"));
                    }
                }
                Ok(())
            }
        }
    }
}

impl LinearCondition {
    /// Sampling bases `(f, q)` with the condition means.
    pub fn sampling_bases(&self, grid: &Grid) -> Result<(KlBasis, KlBasis)> {
        let f = kernel_basis(&self.f_kernel, grid, Axis::SpaceTime, self.f_terms)?
            .with_mean(&self.f_mean.space_time(grid))?;
        let q = kernel_basis(&self.q_kernel, grid, Axis::Time, self.q_terms)?.with_mean(&self.q_mean.time(grid))?;
        Ok((f, q))
    }

    pub fn ibc_mean(&self) -> Ibc {
        Ibc::constant(self.h0.mean(), self.hl.mean(), self.hr.mean())
    }
}

impl NonlinearCondition {
    pub fn ibc(&self) -> Ibc {
        Ibc::constant(self.h0, self.hl, self.hr)
    }
}

/// Fixed physics of the linear problem: conductivity and point-source location.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProblem {
    pub grid: Grid,
    pub k: Field,
    pub x_star: f64,
}

impl LinearProblem {
    /// Conductivity `k = exp(y)` for one seeded realization of `y`.
    pub fn with_log_normal_k(grid: Grid, y_kernel: &SeKernel, y_terms: usize, seed: u64, x_star: f64) -> Result<Self> {
        let y = kernel_basis(y_kernel, &grid, Axis::Space, y_terms)?;
        let (yf, _) = sample_gaussian_field(&y, &RngStream::new(seed, 0));
        Ok(Self {
            grid,
            k: yf.map(f64::exp)?,
            x_star,
        })
    }
}

/// Problem physics shared by source and target conditions.
#[derive(Clone, Debug, PartialEq)]
pub enum ProblemSetup {
    Linear(LinearProblem),
    Nonlinear { grid: Grid },
}

impl ProblemSetup {
    pub fn grid(&self) -> &Grid {
        match self {
            ProblemSetup::Linear(p) => &p.grid,
            ProblemSetup::Nonlinear { grid } => grid,
        }
    }
}

/// Control bases of a surrogate, with the means the model currently serves.
#[derive(Clone, Debug, PartialEq)]
pub enum ControlBases {
    Linear {
        f: KlBasis,
        q: KlBasis,
        /// `(h0, hl, hr)` means.
        ibc_mean: [f64; 3],
        k: Field,
        x_star: f64,
    },
    Nonlinear {
        k: KlBasis,
        ibc: [f64; 3],
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SurrogateModel {
    pub grid: Grid,
    pub state: KlBasis,
    pub controls: ControlBases,
    pub map: LatentMap,
    /// Regularization of the inverse control transforms.
    pub gamma: f64,
    pub condition: ConditionSpec,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapKind {
    Ols,
    Rls,
    Mlp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SourceOptions {
    pub n_eta: usize,
    pub n_xi_f: usize,
    pub n_xi_q: usize,
    pub n_xi_k: usize,
    /// OLS ridge; `None` selects [`default_ridge`] when there are fewer
    /// samples than inputs and zero otherwise.
    pub ridge: Option<f64>,
    pub rls_weights: RlsWeights,
    pub hidden: Vec<usize>,
    pub mlp_seed: u64,
    pub train: TrainOptions,
}

impl Default for SourceOptions {
    fn default() -> Self {
        Self {
            n_eta: 40,
            n_xi_f: 200,
            n_xi_q: 40,
            n_xi_k: 20,
            ridge: None,
            rls_weights: RlsWeights::default(),
            hidden: vec![50, 50, 50],
            mlp_seed: 0,
            train: TrainOptions::default(),
        }
    }
}

pub(crate) fn ridge_for(xi: &DMatrix<f64>, ridge: Option<f64>) -> f64 {
    ridge.unwrap_or_else(|| if xi.ncols() < xi.nrows() { default_ridge(xi) } else { 0.0 })
}

/// Fits a source surrogate on a generated dataset.
pub fn train_source(dataset: &Dataset, kind: MapKind, opts: &SourceOptions) -> Result<SurrogateModel> {
    let grid = *dataset.setup.grid();
    let solutions: Vec<Field> = dataset.samples.iter().map(|s| s.solution.clone()).collect();
    let state = empirical_basis(&solutions, opts.n_eta)?;
    let controls = match (&dataset.setup, &dataset.condition) {
        (ProblemSetup::Linear(p), ConditionSpec::Linear(c)) => {
            // Control latents are centred on the training ensemble, like the
            // state latents, so the fitted map needs no intercept.
            let mut fs = Vec::with_capacity(dataset.len());
            let mut qs = Vec::with_capacity(dataset.len());
            let mut ibc_mean = [0.0; 3];
            for s in &dataset.samples {
                let Controls::Linear { f, q, h0, hl, hr } = &s.controls else {
                    return Err(Error::invalid("linear dataset holds nonlinear controls"));
                };
                fs.push(f.clone());
                qs.push(q.clone());
                for (m, v) in ibc_mean.iter_mut().zip([h0, hl, hr]) {
                    *m += v / dataset.len() as f64;
                }
            }
            let f = kernel_basis(&c.f_kernel, &grid, Axis::SpaceTime, opts.n_xi_f)?.with_mean(&ensemble_mean(&fs)?)?;
            let q = kernel_basis(&c.q_kernel, &grid, Axis::Time, opts.n_xi_q)?.with_mean(&ensemble_mean(&qs)?)?;
            ControlBases::Linear {
                f,
                q,
                ibc_mean,
                k: p.k.clone(),
                x_star: p.x_star,
            }
        }
        (ProblemSetup::Nonlinear { .. }, ConditionSpec::Nonlinear(c)) => {
            let ks: Vec<Field> = dataset
                .samples
                .iter()
                .map(|s| match &s.controls {
                    Controls::Nonlinear { k } => Ok(k.clone()),
                    _ => Err(Error::invalid("nonlinear dataset holds linear controls")),
                })
                .collect::<Result<_>>()?;
            ControlBases::Nonlinear {
                k: empirical_basis(&ks, opts.n_xi_k)?,
                ibc: [c.h0, c.hl, c.hr],
            }
        }
        _ => return Err(Error::invalid("dataset setup and condition disagree on the problem")),
    };
    let mut model = SurrogateModel {
        grid,
        state,
        controls,
        map: LatentMap::Linear(crate::latent::LinearMap::new(DMatrix::zeros(0, 0))),
        gamma: 0.0,
        condition: dataset.condition.clone(),
    };
    model.map = match kind {
        MapKind::Rls => rls_map(&model, &model.state.mean_field(), opts.rls_weights)?,
        MapKind::Ols | MapKind::Mlp => {
            let (xi, eta) = model.latent_pairs(dataset)?;
            if kind == MapKind::Ols {
                LatentMap::Linear(fit_ols(&xi, &eta, ridge_for(&xi, opts.ridge))?)
            } else {
                let mut widths = vec![xi.nrows()];
                widths.extend_from_slice(&opts.hidden);
                widths.push(eta.nrows());
                let mut net = Mlp::new(&widths, opts.mlp_seed)?;
                let report = net.train(&xi, &eta, &opts.train)?;
                log::info!(
                    "trained {:?} for {} epochs: loss {:.3e} -> {:.3e}",
                    widths,
                    report.epochs,
                    report.initial_loss,
                    report.final_loss
                );
                LatentMap::Mlp(net)
            }
        }
    };
    Ok(model)
}

fn rls_map(model: &SurrogateModel, mean: &Field, weights: RlsWeights) -> Result<LatentMap> {
    let system = match &model.controls {
        ControlBases::Linear { f, q, k, x_star, .. } => {
            assemble_rls_linear(&model.grid, k, &model.state, f, q, *x_star, weights)?
        }
        ControlBases::Nonlinear { k, .. } => assemble_rls_fluctuation(&model.grid, mean, k, &model.state)?,
    };
    Ok(LatentMap::Linear(system.transfer_matrix()?))
}

impl SurrogateModel {
    pub fn is_linear(&self) -> bool {
        matches!(self.controls, ControlBases::Linear { .. })
    }

    pub fn predictor(&self) -> Result<Predictor<'_>> {
        let projectors = match &self.controls {
            ControlBases::Linear { f, q, .. } => vec![f.projector(self.gamma)?, q.projector(self.gamma)?],
            ControlBases::Nonlinear { k, .. } => vec![k.projector(self.gamma)?],
        };
        Ok(Predictor {
            model: self,
            projectors,
            state: self.state.projector(0.0)?,
        })
    }

    /// Control latents (one column per sample) and state latents of a
    /// dataset under this model's means and bases.
    pub fn latent_pairs(&self, dataset: &Dataset) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let p = self.predictor()?;
        latent_pairs_with(&p, dataset)
    }
}

fn latent_pairs_with(p: &Predictor<'_>, dataset: &Dataset) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    use rayon::prelude::*;
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = dataset
        .samples
        .par_iter()
        .map(|s| Ok((p.control_latents(&s.controls)?, p.state.project(&s.solution)?)))
        .collect::<Result<_>>()?;
    let xi: Vec<Vec<f64>> = pairs.iter().map(|p| p.0.clone()).collect();
    let eta: Vec<Vec<f64>> = pairs.into_iter().map(|p| p.1).collect();
    Ok((crate::latent::columns(&xi)?, crate::latent::columns(&eta)?))
}

/// A model with its inverse transforms factored once.
pub struct Predictor<'a> {
    model: &'a SurrogateModel,
    projectors: Vec<Projector>,
    state: Projector,
}

impl Predictor<'_> {
    pub fn control_latents(&self, controls: &Controls) -> Result<Vec<f64>> {
        match (&self.model.controls, controls) {
            (ControlBases::Linear { ibc_mean, .. }, Controls::Linear { f, q, h0, hl, hr }) => {
                let mut xi = self.projectors[0].project(f)?;
                xi.extend(self.projectors[1].project(q)?);
                xi.extend([h0 - ibc_mean[0], hr - ibc_mean[2], hl - ibc_mean[1]]);
                Ok(xi)
            }
            (ControlBases::Nonlinear { .. }, Controls::Nonlinear { k }) => self.projectors[0].project(k),
            _ => Err(Error::invalid("controls do not match the model's problem")),
        }
    }

    pub fn predict_latent(&self, xi: &[f64]) -> Result<Field> {
        let eta = self.model.map.apply(xi)?;
        self.model.state.forward(&eta)
    }

    pub fn predict(&self, controls: &Controls) -> Result<Field> {
        self.predict_latent(&self.control_latents(controls)?)
    }

    /// State latents of a reference solution (orthogonal projection).
    pub fn state_latents(&self, h: &Field) -> Result<Vec<f64>> {
        self.state.project(h)
    }
}

/// Evaluates the surrogate for concrete controls.
pub fn predict(model: &SurrogateModel, controls: &Controls) -> Result<Field> {
    model.predictor()?.predict(controls)
}

/// One-shot transfer of a linear-problem surrogate: one mean-field solve
/// under the target means; bases and map are reused.
pub fn transfer_linear(source: &SurrogateModel, target: &LinearCondition, gamma: f64) -> Result<SurrogateModel> {
    let ControlBases::Linear { f, q, k, x_star, .. } = &source.controls else {
        return Err(Error::invalid("linear transfer needs a linear-problem model"));
    };
    ConditionSpec::Linear(target.clone()).validate()?;
    if !(gamma >= 0.0) {
        return Err(Error::invalid(format!("gamma must be >= 0, got {gamma}")));
    }
    let grid = source.grid;
    let f_mean = target.f_mean.space_time(&grid);
    let q_mean = target.q_mean.time(&grid);
    let src = SourceSpec {
        f: Some(f_mean.clone()),
        q: Some(q_mean.clone()),
        x_star: *x_star,
    };
    let h_mean = solve_diffusion(&grid, k, &src, &target.ibc_mean())?;
    Ok(SurrogateModel {
        grid,
        state: source.state.with_mean(&h_mean)?,
        controls: ControlBases::Linear {
            f: f.with_mean(&f_mean)?,
            q: q.with_mean(&q_mean)?,
            ibc_mean: [target.h0.mean(), target.hl.mean(), target.hr.mean()],
            k: k.clone(),
            x_star: *x_star,
        },
        map: source.map.clone(),
        gamma,
        condition: ConditionSpec::Linear(target.clone()),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NonlinearMethod {
    Rls,
    Ols,
    KlDnn,
    /// Residual-only retraining, or residual plus data when target samples
    /// are supplied.
    PiKlDnn,
    Combined,
}

/// Source of the conductivity latents used in the residual term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualLatents {
    /// i.i.d. standard normal draws.
    StandardNormal,
    /// Latents of fresh `y -> k` realizations from the condition's kernel.
    Realizations,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransferOptions {
    pub n_r: usize,
    pub lambda_r: f64,
    pub residual_seed: u64,
    pub residual_latents: ResidualLatents,
    pub underdetermined: Underdetermined,
    pub ridge: Option<f64>,
}

impl Default for TransferOptions {
    fn default() -> Self {
        Self {
            n_r: 250,
            lambda_r: 1e-4,
            residual_seed: 0,
            residual_latents: ResidualLatents::StandardNormal,
            underdetermined: Underdetermined::MinimumChange,
            ridge: None,
        }
    }
}

/// Transfer of a nonlinear-problem surrogate to new IBCs. The state mean
/// comes from one mean-field solve with the source conductivity mean; the
/// state eigenfunctions are reused and the map is refitted per `method`.
pub fn transfer_nonlinear(
    source: &SurrogateModel,
    target: &NonlinearCondition,
    method: NonlinearMethod,
    opts: &TransferOptions,
    target_data: Option<&Dataset>,
) -> Result<SurrogateModel> {
    let ControlBases::Nonlinear { k, .. } = &source.controls else {
        return Err(Error::invalid("nonlinear transfer needs a nonlinear-problem model"));
    };
    ConditionSpec::Nonlinear(target.clone()).validate()?;
    let grid = source.grid;
    let needs_data = matches!(method, NonlinearMethod::Ols | NonlinearMethod::KlDnn | NonlinearMethod::Combined);
    let data = target_data.filter(|d| !d.samples.is_empty());
    if needs_data && data.is_none() {
        return Err(Error::invalid(format!("{method:?} transfer needs labeled target samples")));
    }
    if matches!(method, NonlinearMethod::KlDnn | NonlinearMethod::PiKlDnn | NonlinearMethod::Combined)
        && !matches!(source.map, LatentMap::Mlp(_))
    {
        return Err(Error::invalid(format!("{method:?} transfer needs a network-based source model")));
    }

    let h_mean = solve_diffusion(&grid, &k.mean_field(), &SourceSpec::none(), &target.ibc())?;
    let mut model = SurrogateModel {
        grid,
        state: source.state.with_mean(&h_mean)?,
        controls: ControlBases::Nonlinear {
            k: k.clone(),
            ibc: [target.h0, target.hl, target.hr],
        },
        map: source.map.clone(),
        gamma: source.gamma,
        condition: ConditionSpec::Nonlinear(target.clone()),
    };
    let labeled = match data {
        Some(d) => {
            if let Some(n) = threshold_violation(&model, method, d, opts) {
                return Err(Error::invalid(format!(
                    "{method:?} transfer needs at least {n} target samples for a unique solution, got {}",
                    d.samples.len()
                )));
            }
            Some(model.latent_pairs(d)?)
        }
        None => None,
    };

    model.map = match method {
        NonlinearMethod::Rls => rls_map(&model, &h_mean, RlsWeights::default())?,
        NonlinearMethod::Ols => {
            let (xi, eta) = labeled.as_ref().expect("checked above");
            LatentMap::Linear(fit_ols(xi, eta, ridge_for(xi, opts.ridge))?)
        }
        NonlinearMethod::KlDnn | NonlinearMethod::PiKlDnn | NonlinearMethod::Combined => {
            let LatentMap::Mlp(net) = &source.map else { unreachable!() };
            let mode = match (method, &labeled) {
                (NonlinearMethod::KlDnn, _) => RetrainMode::Data,
                (NonlinearMethod::PiKlDnn, None) => RetrainMode::Physics,
                _ => RetrainMode::Combined,
            };
            let ropts = RetrainOptions {
                mode,
                lambda_r: opts.lambda_r,
                underdetermined: opts.underdetermined,
            };
            let data = labeled.as_ref().map(|(x, y)| (x, y));
            let net = if mode == RetrainMode::Data {
                retrain_last_layer(net, &ropts, data, None)?
            } else {
                let latents = residual_latents(&model, target, opts)?;
                let problem = ResidualProblem {
                    grid: &grid,
                    mean: &h_mean,
                    k,
                    state: &model.state,
                };
                retrain_last_layer(net, &ropts, data, Some((&problem, &latents)))?
            };
            LatentMap::Mlp(net)
        }
    };
    Ok(model)
}

fn threshold_violation(model: &SurrogateModel, method: NonlinearMethod, d: &Dataset, opts: &TransferOptions) -> Option<usize> {
    if opts.underdetermined != Underdetermined::Reject {
        return None;
    }
    let needed = match (method, &model.map) {
        (NonlinearMethod::KlDnn, LatentMap::Mlp(net)) => net.last_layer().0.ncols() + 1,
        (NonlinearMethod::Ols, _) if opts.ridge == Some(0.0) => model.controls_dim(),
        _ => return None,
    };
    (d.samples.len() < needed).then_some(needed)
}

impl SurrogateModel {
    fn controls_dim(&self) -> usize {
        match &self.controls {
            ControlBases::Linear { f, q, .. } => f.n_terms() + q.n_terms() + 3,
            ControlBases::Nonlinear { k, .. } => k.n_terms(),
        }
    }
}

fn residual_latents(model: &SurrogateModel, target: &NonlinearCondition, opts: &TransferOptions) -> Result<Vec<Vec<f64>>> {
    let ControlBases::Nonlinear { k, .. } = &model.controls else { unreachable!() };
    let seed = RngStream::derive_seed(opts.residual_seed, "residual-latents");
    match opts.residual_latents {
        ResidualLatents::StandardNormal => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Ok((0..opts.n_r)
                .map(|_| crate::field::standard_normals(&mut rng, k.n_terms()))
                .collect())
        }
        ResidualLatents::Realizations => {
            let y = kernel_basis(&target.y_kernel, &model.grid, Axis::Space, target.y_terms)?;
            let proj = k.projector(model.gamma)?;
            (0..opts.n_r)
                .map(|i| {
                    let (yf, _) = sample_gaussian_field(&y, &RngStream::new(seed, i as u64));
                    let kf = Field::new(model.grid, FieldKind::SpaceOnly, yf.values().iter().map(|v| v.exp()).collect())?;
                    proj.project(&kf)
                })
                .collect()
        }
    }
}
