use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use tpa_core::dataset::{generate_training_set, sample_initial_conditions, split_dataset, PLDataset};
use tpa_core::field::FieldSynthesizer;
use tpa_core::lindblad::{Drive, TimeGrid};
use tpa_core::pl::{control_surface, ForwardModel, PLTrace};
use tpa_core::simplex::{ensemble_stats, FitProblem, FitReport};
use tpa_nn::sweep::{bias_variance_sweep, hyperparameter_grid, write_sweep_csv};
use tpa_nn::{evaluate, predict_params, train, TrainedModel};

use crate::output::{read_text, write_csv, write_json};
use crate::{CliError, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "tpa", version, about = "Shaped-pulse two-photon PL simulation, fitting and regression")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration; missing keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one configuration value, e.g. `--set molecular.gamma2=0.02`.
    #[arg(long = "set", value_name = "PATH=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Seed for every randomized step (sampling, splits, starts, training).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Density-matrix trajectory for the configured pulse.
    Simulate {
        #[arg(long)]
        out: PathBuf,
        /// Also dump the sampled field.
        #[arg(long)]
        field: Option<PathBuf>,
    },
    /// PL versus chirp at `grids.trace_tau`.
    Trace {
        #[arg(long)]
        out: PathBuf,
    },
    /// ρ11 on the chirp × delay grid.
    Surface {
        #[arg(long)]
        out: PathBuf,
    },
    /// Synthetic training set of `dataset.n` rows.
    GenDataset {
        #[arg(long)]
        out: PathBuf,
    },
    /// Multi-start simplex fit of an observed trace.
    Fit {
        #[arg(long)]
        trace: PathBuf,
        /// JSON report with every start and the ensemble summary.
        #[arg(long)]
        out: PathBuf,
        /// Histogram CSV of the converged starts.
        #[arg(long)]
        histogram: Option<PathBuf>,
        /// Mean best loss per iteration.
        #[arg(long)]
        iterations: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        bins: usize,
    },
    /// Train the regressor on the training split of a dataset.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch loss CSV.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Metrics on the test split of a dataset.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Parameters for one PL trace.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        trace: PathBuf,
        /// JSON output; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Bagged bias–variance sweep over architecture ids.
    SweepArch {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Best MSEs over batch size × learning rate.
    HyperGrid {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Simulate { .. } => "simulate",
            Command::Trace { .. } => "trace",
            Command::Surface { .. } => "surface",
            Command::GenDataset { .. } => "gen-dataset",
            Command::Fit { .. } => "fit",
            Command::Train { .. } => "train",
            Command::Evaluate { .. } => "evaluate",
            Command::Predict { .. } => "predict",
            Command::SweepArch { .. } => "sweep-arch",
            Command::HyperGrid { .. } => "hyper-grid",
        }
    }
}

pub fn load_config(common: &Common) -> Result<RunConfig, CliError> {
    let text = common.config.as_deref().map(read_text).transpose()?;
    let mut overrides = common.overrides.clone();
    if let Some(s) = common.seed {
        for key in ["seed", "train.seed", "network.seed", "sweep.train.seed"] {
            overrides.push(format!("{key}={s}"));
        }
    }
    RunConfig::parse(text.as_deref(), &overrides)
}

fn read_dataset(path: &std::path::Path) -> Result<PLDataset, CliError> {
    Ok(PLDataset::read_csv(read_text(path)?.as_bytes())?)
}

fn read_trace(path: &std::path::Path, cfg: &RunConfig) -> Result<PLTrace, CliError> {
    Ok(PLTrace::read_csv(read_text(path)?.as_bytes(), cfg.grids.trace_tau)?)
}

fn beta_model(cfg: &RunConfig, betas: &[f64]) -> Result<ForwardModel, CliError> {
    let synth = FieldSynthesizer::with_default_grid(&cfg.pulse)?;
    Ok(ForwardModel::for_betas(&synth, betas, cfg.grids.trace_tau, &cfg.solver)?)
}

/// Runs one subcommand; artifacts are written only on success.
pub fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.common.workers {
        if n == 0 {
            return Err(CliError::Usage("--workers must be at least 1".into()));
        }
        // A second call in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let cfg = load_config(&cli.common)?;
    let name = cli.command.name();
    match cli.command {
        Command::Simulate { out, field } => {
            let synth = FieldSynthesizer::with_default_grid(&cfg.pulse)?;
            let table = synth.synthesize(cfg.pulse.beta, cfg.pulse.tau)?;
            let grid = TimeGrid::for_field(&table, &cfg.solver)?;
            let drive = Drive::new(&table, grid, cfg.solver.frame, cfg.pulse.center_omega())?;
            let traj = drive.evolve(&cfg.molecular)?;
            write_csv(&out, &cfg, name, |w| Ok(traj.write_csv(w)?))?;
            if let Some(path) = field {
                write_csv(&path, &cfg, name, |w| Ok(table.write_csv(w, grid.t_start, grid.t_pulse_end)?))?;
            }
        }
        Command::Trace { out } => {
            let betas = cfg.grids.beta.values()?;
            let trace = beta_model(&cfg, &betas)?.beta_trace(&cfg.molecular, &cfg.scaling)?;
            write_csv(&out, &cfg, name, |w| Ok(trace.write_csv(w)?))?;
        }
        Command::Surface { out } => {
            let betas = cfg.grids.beta.values()?;
            let taus = cfg.grids.tau.values()?;
            let surface = control_surface(&cfg.molecular, &betas, &taus, &cfg.pulse, &cfg.solver)?;
            write_csv(&out, &cfg, name, |w| Ok(surface.write_csv(w)?))?;
        }
        Command::GenDataset { out } => {
            let betas = cfg.grids.beta.values()?;
            let model = beta_model(&cfg, &betas)?;
            let ds = generate_training_set(cfg.dataset.n, &cfg.ranges, &model, &cfg.scaling, cfg.seed)?;
            write_csv(&out, &cfg, name, |w| Ok(ds.write_csv(w)?))?;
        }
        Command::Fit {
            trace,
            out,
            histogram,
            iterations,
            bins,
        } => {
            let observed = read_trace(&trace, &cfg)?;
            let model = beta_model(&cfg, &observed.betas)?;
            let problem = FitProblem::new(&observed, &model, cfg.scaling, cfg.ranges, cfg.fit)?;
            let starts = sample_initial_conditions(cfg.fit.n_starts, &cfg.ranges, cfg.fit.free_e2, cfg.seed)?;
            let results = problem.multi_start(&starts)?;
            let summary = ensemble_stats(&results, bins.max(1))?;
            let report = FitReport {
                settings: cfg.fit,
                ranges: cfg.ranges,
                results,
                summary,
            };
            if let Some(path) = histogram {
                write_csv(&path, &cfg, name, |w| Ok(report.summary.converged.write_histogram_csv(w)?))?;
            }
            if let Some(path) = iterations {
                write_csv(&path, &cfg, name, |w| Ok(report.summary.write_iteration_csv(w)?))?;
            }
            write_json(&out, &cfg, name, serde_json::to_value(&report)?)?;
        }
        Command::Train { dataset, out, history } => {
            let ds = read_dataset(&dataset)?;
            let (tr, va, _) = split_dataset(&ds, cfg.seed)?;
            let model = train(&tr, &va, &cfg.network, &cfg.train, cfg.scaler)?;
            if let Some(path) = history {
                write_csv(&path, &cfg, name, |w| Ok(model.history.write_csv(w)?))?;
            }
            write_json(&out, &cfg, name, serde_json::from_str(&model.to_json()?)?)?;
        }
        Command::Evaluate { model, dataset, out } => {
            let model = TrainedModel::from_json(&read_text(&model)?)?;
            let ds = read_dataset(&dataset)?;
            let (_, _, test) = split_dataset(&ds, cfg.seed)?;
            let eval = evaluate(&model, &test)?;
            write_csv(&out, &cfg, name, |w| Ok(eval.write_csv(w)?))?;
        }
        Command::Predict { model, trace, out } => {
            let model = TrainedModel::from_json(&read_text(&model)?)?;
            let observed = read_trace(&trace, &cfg)?;
            let q = predict_params(&model, &observed.values)?;
            let doc = json!({ "omega2p_cm1": q[0], "gamma2_fs1": q[1], "gamma12_fs1": q[2] });
            match out {
                Some(path) => write_json(&path, &cfg, name, doc)?,
                None => println!("{doc}"),
            }
        }
        Command::SweepArch { dataset, out } => {
            let ds = read_dataset(&dataset)?;
            let (tr, va, _) = split_dataset(&ds, cfg.seed)?;
            let rows = bias_variance_sweep(&cfg.sweep.arch_ids, cfg.sweep.bags, &tr, &va, cfg.scaler, &cfg.sweep.train)?;
            for r in rows.iter().filter(|r| !r.failures.is_empty()) {
                eprintln!("architecture {}: {} bag(s) failed", r.arch_id, r.failures.len());
            }
            write_csv(&out, &cfg, name, |w| Ok(write_sweep_csv(&rows, w)?))?;
        }
        Command::HyperGrid { dataset, out } => {
            let ds = read_dataset(&dataset)?;
            let (tr, va, _) = split_dataset(&ds, cfg.seed)?;
            let g = &cfg.hyper_grid;
            let grid = hyperparameter_grid(
                &g.batch_sizes,
                &g.learning_rates,
                &tr,
                &va,
                &cfg.network,
                cfg.scaler,
                g.epochs,
                g.patience,
                cfg.train.seed,
            )?;
            write_csv(&out, &cfg, name, |w| Ok(grid.write_csv(w)?))?;
        }
    }
    Ok(())
}
