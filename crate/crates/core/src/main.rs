use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{error, info};

use polyspline::check;
use polyspline::experiment::{self, CellCount, ExperimentSpec};
use polyspline::training::LsgdMode;
use polyspline::Error;

#[derive(Debug, Parser)]
#[command(name = "polyspline", version, about = "Polynomial-spline network experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train every (B, N_splines, N_cells) combination and write results.csv and hp_matrix.json.
    Sweep(SpecArgs),
    /// Train one variational model and write model.json, trace.csv, samples.csv and summary.json.
    Solve(SpecArgs),
    /// Evaluate the baseline fits of a spec and write oracle.csv.
    Oracle(SpecArgs),
    /// Run the invariant suite.
    Check {
        #[arg(long, default_value_t = 2024)]
        seed: u64,
    },
}

#[derive(Debug, Args)]
struct SpecArgs {
    /// TOML experiment spec; its keys override the flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// p1-sine, p2-kinks, p3-poisson1d or p4-slit.
    #[arg(long)]
    problem: Option<String>,
    #[arg(long, value_delimiter = ',')]
    degree: Vec<usize>,
    /// Knot intervals per axis.
    #[arg(long, value_delimiter = ',')]
    splines: Vec<usize>,
    /// Cell counts, or the rules splines, splines+1, pow2.
    #[arg(long, value_delimiter = ',')]
    cells: Vec<String>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Constant learning rate replacing the schedule.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    penalty: Option<f64>,
    #[arg(long = "ls-reg")]
    ls_reg: Option<f64>,
    /// layer or callback.
    #[arg(long = "lsgd-mode")]
    lsgd_mode: Option<LsgdMode>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    oracle: Option<String>,
    #[arg(long)]
    workers: Option<usize>,
}

impl SpecArgs {
    fn build(&self) -> polyspline::Result<ExperimentSpec> {
        let config = self.config.as_ref().map(fs::read_to_string).transpose()?;
        let from_config = match &config {
            Some(text) => {
                let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::InvalidSpec(e.to_string()))?;
                table.get("problem").and_then(|v| v.as_str()).map(str::to_string)
            }
            None => None,
        };
        let problem = from_config
            .or_else(|| self.problem.clone())
            .ok_or_else(|| Error::InvalidSpec("no problem given (use --problem or --config)".into()))?;
        let mut spec = ExperimentSpec::defaults_for(&problem);
        if !self.degree.is_empty() {
            spec.degrees = self.degree.clone();
        }
        if !self.splines.is_empty() {
            spec.splines = self.splines.clone();
        }
        if !self.cells.is_empty() {
            spec.cells = self
                .cells
                .iter()
                .map(|c| c.parse().map(CellCount::Fixed).unwrap_or_else(|_| CellCount::Rule(c.clone())))
                .collect();
        }
        let t = &mut spec.train;
        t.epochs = self.epochs.or(t.epochs);
        t.lr = self.lr.or(t.lr);
        t.penalty = self.penalty.or(t.penalty);
        t.ls_regularizer = self.ls_reg.or(t.ls_regularizer);
        t.mode = self.lsgd_mode.or(t.mode);
        if let Some(s) = self.seed {
            spec.seed = s;
        }
        if let Some(o) = &self.out {
            spec.out = o.clone();
        }
        if self.oracle.is_some() {
            spec.oracle = self.oracle.clone();
        }
        if self.workers.is_some() {
            spec.workers = self.workers;
        }
        if let Some(text) = &config {
            spec = spec.overlay_toml(text)?;
        }
        spec.validate()?;
        Ok(spec)
    }
}

fn failure_code(e: &Error) -> ExitCode {
    match e {
        Error::InvalidSpec(_) | Error::InvalidInput(_) | Error::Io(_) => ExitCode::from(1),
        _ => ExitCode::from(2),
    }
}

fn sweep(spec: &ExperimentSpec) -> polyspline::Result<ExitCode> {
    let outcome = experiment::run_sweep(spec)?;
    experiment::write_sweep(spec, &outcome)?;
    let failed = outcome.failed();
    info!("{} runs, {} failed, results in {}", outcome.rows.len(), failed, spec.out.display());
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::from(2) })
}

fn solve(spec: &ExperimentSpec) -> polyspline::Result<ExitCode> {
    let summary = experiment::run_variational(spec)?;
    for a in &summary.axes {
        info!("axis: {} knots, {} intervals", a.n_knots, a.n_intervals);
    }
    info!("L2 error {:.4e}", summary.l2_error);
    for (name, l2) in &summary.oracle_l2 {
        info!("{name} L2 error {l2:.4e}");
    }
    println!("{}", serde_json::to_string(&summary)?);
    Ok(ExitCode::SUCCESS)
}

fn oracle(spec: &ExperimentSpec) -> polyspline::Result<ExitCode> {
    let rows = experiment::run_oracles(spec)?;
    experiment::write_oracles(spec, &rows)?;
    info!("{} oracle rows in {}", rows.len(), spec.out.display());
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Check { seed } => {
            let results = check::run_all(*seed);
            for r in &results {
                println!("{r}");
            }
            return if results.iter().all(|r| r.passed) { ExitCode::SUCCESS } else { ExitCode::from(2) };
        }
        Command::Sweep(args) => args.build().and_then(|s| sweep(&s)),
        Command::Solve(args) => args.build().and_then(|s| solve(&s)),
        Command::Oracle(args) => args.build().and_then(|s| oracle(&s)),
    };
    result.unwrap_or_else(|e| {
        error!("{e}");
        failure_code(&e)
    })
}
