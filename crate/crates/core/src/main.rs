use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use kltwin::harness::artifact::{load_dataset, load_model, save_artifact, Artifact};
use kltwin::harness::experiment::{evaluate, run_experiment, source_datasets, target_datasets, transfer_run};
use kltwin::harness::report::{mean_std, ErrorReport, ReportFormat, ReportRow};
use kltwin::harness::ExperimentConfig;
use kltwin::transfer::train_source;
use kltwin::{Error, Result};

#[derive(Parser)]
#[command(name = "kltwin", version, about = "KL-NN surrogate models with transfer learning for diffusion problems")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Experiment configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configuration's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    format: Format,
    /// Worker threads (default: KLTWIN_THREADS, else all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

impl From<Format> for ReportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Csv => ReportFormat::Csv,
            Format::Json => ReportFormat::Json,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the source training and test datasets of a case.
    Generate {
        #[arg(long, default_value_t = 0)]
        case: usize,
    },
    /// Train a source model of a case from a dataset (generated if absent).
    Train {
        #[arg(long, default_value_t = 0)]
        case: usize,
        #[arg(long, value_enum, default_value_t = MapArg::Ols)]
        map: MapArg,
        /// Training dataset written by `generate`.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Transfer a trained model to one configured target run.
    Transfer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 0)]
        case: usize,
        #[arg(long, default_value_t = 0)]
        target: usize,
        #[arg(long, default_value_t = 0)]
        run: usize,
    },
    /// Evaluate a model on a dataset.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Run a bundled experiment end to end.
    Reproduce {
        #[arg(value_enum)]
        table: Table,
    },
    /// Run the experiment given by --config end to end.
    Run,
}

#[derive(Clone, Copy, ValueEnum)]
enum MapArg {
    Ols,
    Rls,
    Mlp,
}

#[derive(Clone, Copy, ValueEnum)]
enum Table {
    Table1,
    Table2,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn init_threads(threads: Option<usize>) -> Result<()> {
    let n = match threads {
        Some(n) => Some(n),
        None => match std::env::var("KLTWIN_THREADS") {
            Ok(v) => Some(
                v.parse::<usize>()
                    .map_err(|_| Error::Config(format!("KLTWIN_THREADS = `{v}` is not a thread count")))?,
            ),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        if n == 0 {
            return Err(Error::Config("thread count must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    Ok(())
}

fn load_config(g: &Global) -> Result<ExperimentConfig> {
    let path = g.config.as_ref().ok_or_else(|| Error::Config("--config is required".into()))?;
    with_seed(ExperimentConfig::load(path)?, g.seed)
}

fn with_seed(mut cfg: ExperimentConfig, seed: Option<u64>) -> Result<ExperimentConfig> {
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<()> {
    let g = &cli.global;
    init_threads(g.threads)?;
    match cli.command {
        Command::Generate { case } => {
            let cfg = load_config(g)?;
            let (train, test, _) = source_datasets(&cfg, &cfg.setup()?, case)?;
            save(&g.out.join(format!("case{case}-train.kltw")), Artifact::Dataset(train))?;
            save(&g.out.join(format!("case{case}-test.kltw")), Artifact::Dataset(test))
        }
        Command::Train { case, map, data } => {
            let cfg = load_config(g)?;
            let train = match data {
                Some(p) => load_dataset(&p)?,
                None => source_datasets(&cfg, &cfg.setup()?, case)?.0,
            };
            let (kind, name) = match map {
                MapArg::Ols => (kltwin::transfer::MapKind::Ols, "ols"),
                MapArg::Rls => (kltwin::transfer::MapKind::Rls, "rls"),
                MapArg::Mlp => (kltwin::transfer::MapKind::Mlp, "mlp"),
            };
            let model = train_source(&train, kind, &cfg.bases)?;
            save(&g.out.join(format!("case{case}-{name}.kltw")), Artifact::Model(model))
        }
        Command::Transfer {
            model,
            case,
            target,
            run,
        } => {
            let cfg = load_config(g)?;
            let source = load_model(&model)?;
            let t = cfg
                .cases
                .get(case)
                .and_then(|c| c.targets.get(target))
                .ok_or_else(|| Error::Config(format!("no target {target} in case {case}")))?;
            let r = t
                .runs
                .get(run)
                .ok_or_else(|| Error::Config(format!("no run {run} for target {target}")))?;
            let labeled = if r.n_train > 0 {
                target_datasets(&cfg, &cfg.setup()?, case, target)?.1
            } else {
                None
            };
            let out = transfer_run(&source, &t.condition, r, labeled.as_ref())?;
            save(
                &g.out.join(format!("case{case}-target{target}-run{run}.kltw")),
                Artifact::Model(out),
            )
        }
        Command::Evaluate { model, data } => {
            let model = load_model(&model)?;
            let data = load_dataset(&data)?;
            let eps = evaluate(&model, &data)?;
            let (mean, std) = mean_std(&eps);
            let mut report = ErrorReport::default();
            report.push(ReportRow {
                experiment: "evaluate".into(),
                condition: data.condition.label().to_string(),
                method: model.condition.label().to_string(),
                sigma2_y: None,
                alpha: None,
                beta: None,
                gamma: Some(model.gamma),
                n_train: 0,
                mean_eps: mean,
                std_eps: std,
                n_samples: eps.len(),
                seed: data.seed,
            })?;
            report.write(&g.out, g.format.into())?;
            print_report(&report, g.format)
        }
        Command::Reproduce { table } => {
            let name = match table {
                Table::Table1 => "table1",
                Table::Table2 => "table2",
            };
            let cfg = with_seed(ExperimentConfig::bundled(name)?, g.seed)?;
            let report = run_experiment(&cfg, &g.out.join(name), g.format.into())?;
            print_report(&report, g.format)
        }
        Command::Run => {
            let cfg = load_config(g)?;
            let report = run_experiment(&cfg, &g.out, g.format.into())?;
            if report.rows.is_empty() {
                log::warn!("report is empty");
            }
            print_report(&report, g.format)
        }
    }
}

fn save(path: &Path, a: Artifact) -> Result<()> {
    save_artifact(path, &a)?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn print_report(report: &ErrorReport, format: Format) -> Result<()> {
    match format {
        Format::Csv => report.to_csv(std::io::stdout()),
        Format::Json => {
            println!("{}", report.to_json()?);
            Ok(())
        }
    }
}
