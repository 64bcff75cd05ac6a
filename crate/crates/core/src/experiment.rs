//! Experiment specs and runners behind the command-line tool.
//!
//! A sweep trains one model per `(degree, splines, cells)` combination and
//! writes `results.csv` plus an `hp_matrix.json` summary. A solve trains a
//! single variational model and writes its checkpoint, training trace,
//! pointwise error samples and a JSON summary.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::basis::PolyKind;
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::gating::GatingInit;
use crate::geometry::Points;
use crate::model::{ModelConfig, PolySplineModel};
use crate::oracles::{
    best_poly_fit, fem_l2_error, fem_p1_1d, fem_slit, mse, piecewise_poly_fit, uniform_spline_fit, Boundary,
};
use crate::problems::{
    kink_locations, l2_error, linspace, mse_against, random_square_points, Problem, RegressionProblem,
    VariationalKind, VariationalProblem, DATA_SEED, PROBLEM_NAMES,
};
use crate::training::{dataset_mse, train, AdamConfigPatch, LsgdMode, TrainConfig};

/// Largest polynomial degree accepted in a spec.
pub const MAX_DEGREE: usize = 12;
/// Number of random evaluation points for the 2D problem.
pub const SLIT_SAMPLES: usize = 1600;
/// Number of evaluation points for the 1D variational problem.
pub const POISSON_SAMPLES: usize = 1000;

/// A cell count, either fixed or derived from the number of knot intervals.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CellCount {
    Fixed(usize),
    /// `"splines"` (`N_cells = N_splines`), `"splines+1"`, or `"pow2"`
    /// (`1, 2, 4, ..., N_splines`).
    Rule(String),
}

impl CellCount {
    fn resolve(&self, splines: usize) -> Result<Vec<usize>> {
        match self {
            CellCount::Fixed(n) => Ok(vec![*n]),
            CellCount::Rule(r) => match r.as_str() {
                "splines" => Ok(vec![splines]),
                "splines+1" => Ok(vec![splines + 1]),
                "pow2" => Ok(std::iter::successors(Some(1usize), |n| Some(n * 2)).take_while(|&n| n <= splines).collect()),
                other => Err(Error::InvalidSpec(format!("unknown cell rule '{other}'"))),
            },
        }
    }
}

/// Optional overrides of the per-problem training settings.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOverrides {
    pub epochs: Option<usize>,
    /// Constant learning rate (replaces the schedule).
    pub lr: Option<f64>,
    pub schedule: Option<Vec<(usize, f64)>>,
    pub ls_regularizer: Option<f64>,
    pub penalty: Option<f64>,
    pub mode: Option<LsgdMode>,
    pub reset_every: Option<usize>,
    pub batch_size: Option<usize>,
    pub log_every: Option<usize>,
    pub adam: Option<AdamConfigPatch>,
}

/// Optional overrides of the model initialization.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelOverrides {
    pub basis: Option<PolyKind>,
    pub gating_init: Option<GatingInit>,
    pub knot_noise: Option<f64>,
}

/// A sweep or solve described in TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub problem: String,
    #[serde(default)]
    pub description: Option<String>,
    pub degrees: Vec<usize>,
    pub splines: Vec<usize>,
    pub cells: Vec<CellCount>,
    /// Combinations with fewer cells are skipped.
    #[serde(default)]
    pub min_cells: Option<usize>,
    /// Master seed for model initialization; each run derives its own.
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Seed of the regression datasets.
    #[serde(default = "default_seed")]
    pub data_seed: u64,
    pub out: PathBuf,
    /// Baseline reported in the `oracle_mse` column: `poly`,
    /// `uniform-spline`, `piecewise-uniform`, `piecewise-kinks`, `fem`
    /// (1D, on the learned knots) or `fem-u<n>` (2D, uniform `n x n`).
    #[serde(default)]
    pub oracle: Option<String>,
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default)]
    pub train: TrainOverrides,
    #[serde(default)]
    pub model: ModelOverrides,
}

fn default_seed() -> u64 {
    DATA_SEED
}

impl ExperimentSpec {
    /// Single-run spec with the benchmark's usual shape.
    pub fn defaults_for(problem: &str) -> Self {
        let (b, n, c) = match problem {
            "p3-poisson1d" => (1, 5, 3),
            "p4-slit" => (1, 9, 16),
            _ => (1, 8, 8),
        };
        Self {
            problem: problem.to_string(),
            description: None,
            degrees: vec![b],
            splines: vec![n],
            cells: vec![CellCount::Fixed(c)],
            min_cells: None,
            seed: DATA_SEED,
            data_seed: DATA_SEED,
            out: PathBuf::from("out"),
            oracle: None,
            workers: None,
            train: TrainOverrides::default(),
            model: ModelOverrides::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidSpec(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    /// Overlay the keys present in `text` onto this spec; nested tables are
    /// merged key by key.
    pub fn overlay_toml(&self, text: &str) -> Result<Self> {
        let mut base = toml::Table::try_from(self).map_err(|e| Error::InvalidSpec(e.to_string()))?;
        let top: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::InvalidSpec(e.to_string()))?;
        merge(&mut base, top);
        toml::Value::Table(base).try_into().map_err(|e: toml::de::Error| Error::InvalidSpec(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if !PROBLEM_NAMES.contains(&self.problem.as_str()) {
            return Err(Error::InvalidSpec(format!("unknown problem '{}'", self.problem)));
        }
        if self.degrees.is_empty() || self.splines.is_empty() || self.cells.is_empty() {
            return Err(Error::InvalidSpec("degrees, splines and cells must be nonempty".into()));
        }
        if let Some(&b) = self.degrees.iter().find(|&&b| b > MAX_DEGREE) {
            return Err(Error::InvalidSpec(format!("degree {b} exceeds {MAX_DEGREE}")));
        }
        if self.splines.contains(&0) || self.cells.contains(&CellCount::Fixed(0)) {
            return Err(Error::InvalidSpec("spline and cell counts must be positive".into()));
        }
        if let Some(o) = &self.oracle {
            let ok = match o.as_str() {
                "poly" | "uniform-spline" | "piecewise-uniform" => self.regression(),
                "piecewise-kinks" => self.problem == "p2-kinks",
                "fem" => self.problem == "p3-poisson1d",
                s => self.problem == "p4-slit" && fem_mesh(s).is_some(),
            };
            if !ok {
                return Err(Error::InvalidSpec(format!("oracle '{o}' does not apply to {}", self.problem)));
            }
        }
        if self.workers == Some(0) {
            return Err(Error::InvalidSpec("workers must be positive".into()));
        }
        if self.runs()?.is_empty() {
            return Err(Error::InvalidSpec("no combination has N_cells within the spline basis size".into()));
        }
        self.train_config(0, 0)?.validate()
    }

    fn regression(&self) -> bool {
        matches!(self.problem.as_str(), "p1-sine" | "p2-kinks")
    }

    fn dim(&self) -> usize {
        if self.problem == "p4-slit" {
            2
        } else {
            1
        }
    }

    /// Runnable `(degree, splines, cells)` combinations in sweep order.
    /// Cell counts above the number of spline basis functions, `(N + 1)^d`,
    /// are skipped.
    pub fn runs(&self) -> Result<Vec<(usize, usize, usize)>> {
        let dim = self.dim() as u32;
        let mut out = Vec::new();
        for &b in &self.degrees {
            for &n in &self.splines {
                let mut seen = BTreeSet::new();
                for c in &self.cells {
                    for cells in c.resolve(n)? {
                        if cells > (n + 1).pow(dim) || self.min_cells.is_some_and(|m| cells < m) || !seen.insert(cells) {
                            continue;
                        }
                        out.push((b, n, cells));
                    }
                }
            }
        }
        Ok(out)
    }

    /// Training settings of one run.
    pub fn train_config(&self, degree: usize, seed: u64) -> Result<TrainConfig> {
        let t = &self.train;
        let mut cfg = TrainConfig::for_problem(&self.problem, degree)?;
        if let Some(mode) = t.mode {
            cfg = cfg.with_mode(&self.problem, mode);
        }
        if let Some(e) = t.epochs {
            cfg.epochs = e;
        }
        if let Some(s) = &t.schedule {
            cfg.schedule = s.clone();
        }
        if let Some(lr) = t.lr {
            cfg = cfg.with_rate(lr);
        }
        if let Some(l) = t.ls_regularizer {
            cfg.ls_regularizer = l;
        }
        if let Some(p) = t.penalty {
            cfg.penalty = p;
        }
        if t.reset_every.is_some() {
            cfg.reset_every = t.reset_every;
        }
        if t.batch_size.is_some() {
            cfg.batch_size = t.batch_size;
        }
        if let Some(l) = t.log_every {
            cfg.log_every = l;
        }
        if let Some(a) = &t.adam {
            cfg.adam = a.apply(cfg.adam);
        }
        cfg.seed = seed;
        Ok(cfg)
    }

    /// Model shape and initialization of one run.
    pub fn model_config(&self, degree: usize, splines: usize, cells: usize) -> ModelConfig {
        let mut cfg = ModelConfig::new(self.dim(), splines, cells, degree);
        if let Some(b) = self.model.basis {
            cfg.basis = b;
        }
        if let Some(g) = self.model.gating_init {
            cfg.gating_init = g;
        }
        if let Some(k) = self.model.knot_noise {
            cfg.knot_noise = k;
        }
        cfg
    }
}

fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn fem_mesh(name: &str) -> Option<usize> {
    name.strip_prefix("fem-u")?.parse().ok().filter(|&n| n > 0)
}

/// SplitMix64 finalizer, used to derive independent per-run seeds.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of run `index` of a sweep with master seed `master`.
pub fn run_seed(master: u64, index: usize) -> u64 {
    splitmix64(master ^ splitmix64(index as u64))
}

/// One row of `results.csv`. For variational problems `train_mse` is empty,
/// `val_mse` is the mean squared error against the exact solution at the
/// evaluation points and `oracle_mse` the same quantity for the baseline.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub problem: String,
    #[serde(rename = "B")]
    pub degree: usize,
    #[serde(rename = "N_splines")]
    pub splines: usize,
    #[serde(rename = "N_cells")]
    pub cells: usize,
    pub seed: u64,
    pub train_mse: Option<f64>,
    pub val_mse: Option<f64>,
    pub oracle_mse: Option<f64>,
    pub epochs: usize,
    pub wall_time: f64,
    pub status: String,
    pub l2_error: Option<f64>,
}

impl SweepRow {
    pub fn ok(&self) -> bool {
        self.status == "ok"
    }
}

/// A trained run and its metrics.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub model: PolySplineModel,
    pub trace: crate::training::Trace,
    pub warnings: Vec<String>,
    pub row: SweepRow,
}

/// Evaluation points used for variational error samples.
pub fn evaluation_points(kind: VariationalKind, seed: u64) -> Points {
    match kind {
        VariationalKind::Poisson1d => linspace(POISSON_SAMPLES),
        VariationalKind::Slit => random_square_points(SLIT_SAMPLES, seed),
    }
}

fn regression_oracle(
    name: &str,
    p: &RegressionProblem,
    degree: usize,
    splines: usize,
    cells: usize,
) -> Result<f64> {
    let xs = p.train.points.coords();
    let ys = &p.train.targets;
    let vx = p.validation.points.coords();
    let vy = &p.validation.targets;
    let uniform = |n: usize| (0..=n).map(|i| i as f64 / n as f64).collect::<Vec<_>>();
    Ok(match name {
        "poly" => {
            let f = best_poly_fit(xs, ys, degree)?;
            mse(|x| f.eval(x), vx, vy)
        }
        "uniform-spline" => {
            let f = uniform_spline_fit(xs, ys, splines)?;
            mse(|x| f.eval(x), vx, vy)
        }
        "piecewise-uniform" => {
            let f = piecewise_poly_fit(xs, ys, &uniform(cells), degree)?;
            mse(|x| f.eval(x), vx, vy)
        }
        "piecewise-kinks" => {
            let mut b = vec![0.0];
            b.extend(kink_locations());
            b.push(1.0);
            let f = piecewise_poly_fit(xs, ys, &b, degree)?;
            mse(|x| f.eval(x), vx, vy)
        }
        other => return Err(Error::InvalidSpec(format!("oracle '{other}' does not apply"))),
    })
}

fn variational_oracle(name: &str, model: &PolySplineModel, p: &VariationalProblem, pts: &Points) -> Result<f64> {
    let exact = |x: &[f64]| p.exact(x);
    match (p.kind, name) {
        (VariationalKind::Poisson1d, "fem") => {
            let fem = fem_p1_1d(&model.knot_vectors()[0], |_| 2.0, Boundary::Penalty(p.beta))?;
            Ok(mse(|x| fem.eval(x), pts.coords(), &pts.coords().iter().map(|&x| exact(&[x])).collect::<Vec<_>>()))
        }
        (VariationalKind::Slit, s) if fem_mesh(s).is_some() => {
            let fem = fem_slit(fem_mesh(s).unwrap_or(3))?;
            let n = pts.len().max(1) as f64;
            Ok((0..pts.len()).map(|i| (fem.eval(pts.get(i)) - exact(pts.get(i))).powi(2)).sum::<f64>() / n)
        }
        _ => Err(Error::InvalidSpec(format!("oracle '{name}' does not apply to {}", p.name()))),
    }
}

/// Train one combination of a spec.
pub fn run_one(spec: &ExperimentSpec, degree: usize, splines: usize, cells: usize, seed: u64) -> Result<RunResult> {
    let start = Instant::now();
    let tcfg = spec.train_config(degree, seed)?;
    let problem = Problem::by_name(&spec.problem, spec.data_seed, tcfg.penalty)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = PolySplineModel::new(&spec.model_config(degree, splines, cells), &mut rng)?;
    let outcome = train(&mut model, &problem, &tcfg)?;
    let mut row = SweepRow {
        problem: spec.problem.clone(),
        degree,
        splines,
        cells,
        seed,
        train_mse: None,
        val_mse: None,
        oracle_mse: None,
        epochs: tcfg.epochs,
        wall_time: 0.0,
        status: "ok".into(),
        l2_error: None,
    };
    match &problem {
        Problem::Regression(p) => {
            row.train_mse = Some(dataset_mse(&model, &p.train)?);
            row.val_mse = Some(dataset_mse(&model, &p.validation)?);
            if let Some(o) = &spec.oracle {
                row.oracle_mse = Some(regression_oracle(o, p, degree, splines, cells)?);
            }
        }
        Problem::Variational(p) => {
            let p = VariationalProblem { beta: tcfg.penalty, ..p.clone() };
            let pts = evaluation_points(p.kind, spec.seed);
            row.val_mse = Some(mse_against(&model, &|x| p.exact(x), &pts)?);
            row.l2_error = Some(l2_error(&model, &|x| p.exact(x), p.q_extra)?);
            if let Some(o) = &spec.oracle {
                row.oracle_mse = Some(variational_oracle(o, &model, &p, &pts)?);
            }
        }
    }
    row.wall_time = start.elapsed().as_secs_f64();
    Ok(RunResult { model, trace: outcome.trace, warnings: outcome.warnings, row })
}

/// Results of a sweep, in spec order.
#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
}

impl SweepOutcome {
    pub fn failed(&self) -> usize {
        self.rows.iter().filter(|r| !r.ok()).count()
    }
}

/// Heatmap-ready summary: `matrix[b][i][j]` is the validation MSE for
/// `degrees[b]`, `splines[i]` and `cells[j]` (null where not run).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HpMatrix {
    pub problem: String,
    pub metric: String,
    pub degrees: Vec<usize>,
    pub splines: Vec<usize>,
    pub cells: Vec<usize>,
    pub matrix: Vec<Vec<Vec<Option<f64>>>>,
    pub best: Option<HpBest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HpBest {
    #[serde(rename = "B")]
    pub degree: usize,
    #[serde(rename = "N_splines")]
    pub splines: usize,
    #[serde(rename = "N_cells")]
    pub cells: usize,
    pub value: f64,
}

pub fn hp_matrix(spec: &ExperimentSpec, rows: &[SweepRow]) -> HpMatrix {
    let cells: Vec<usize> = rows.iter().map(|r| r.cells).collect::<BTreeSet<_>>().into_iter().collect();
    let mut matrix = vec![vec![vec![None; cells.len()]; spec.splines.len()]; spec.degrees.len()];
    let mut best: Option<HpBest> = None;
    for r in rows.iter().filter(|r| r.ok()) {
        let (Some(b), Some(i), Some(j)) = (
            spec.degrees.iter().position(|&d| d == r.degree),
            spec.splines.iter().position(|&n| n == r.splines),
            cells.iter().position(|&c| c == r.cells),
        ) else {
            continue;
        };
        matrix[b][i][j] = r.val_mse;
        if let Some(v) = r.val_mse {
            if best.as_ref().is_none_or(|h| v < h.value) {
                best = Some(HpBest { degree: r.degree, splines: r.splines, cells: r.cells, value: v });
            }
        }
    }
    HpMatrix {
        problem: spec.problem.clone(),
        metric: "val_mse".into(),
        degrees: spec.degrees.clone(),
        splines: spec.splines.clone(),
        cells,
        matrix,
        best,
    }
}

/// Train every combination of the spec. Failures are recorded in the
/// `status` column and do not stop the sweep.
pub fn run_sweep(spec: &ExperimentSpec) -> Result<SweepOutcome> {
    spec.validate()?;
    let runs = spec.runs()?;
    let workers = spec
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
        .min(runs.len())
        .max(1);
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<SweepRow>>> = Mutex::new(vec![None; runs.len()]);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(b, n, c)) = runs.get(i) else { break };
                let seed = run_seed(spec.seed, i);
                let start = Instant::now();
                let row = match run_one(spec, b, n, c, seed) {
                    Ok(r) => r.row,
                    Err(e) => {
                        log::warn!("run B={b} N_splines={n} N_cells={c} failed: {e}");
                        SweepRow {
                            problem: spec.problem.clone(),
                            degree: b,
                            splines: n,
                            cells: c,
                            seed,
                            train_mse: None,
                            val_mse: None,
                            oracle_mse: None,
                            epochs: 0,
                            wall_time: start.elapsed().as_secs_f64(),
                            status: format!("failed: {e}"),
                            l2_error: None,
                        }
                    }
                };
                let mse = row.val_mse.map_or("-".to_string(), |v| format!("{v:.3e}"));
                log::info!("B={b} N_splines={n} N_cells={c}: {} val_mse={mse}", row.status);
                slots.lock().expect("no worker panicked")[i] = Some(row);
            });
        }
    });
    let rows = slots.into_inner().expect("no worker panicked").into_iter().flatten().collect();
    Ok(SweepOutcome { rows })
}

/// Write `results.csv` and `hp_matrix.json` into the spec's output
/// directory.
pub fn write_sweep(spec: &ExperimentSpec, outcome: &SweepOutcome) -> Result<()> {
    fs::create_dir_all(&spec.out)?;
    let mut w = csv::Writer::from_path(spec.out.join("results.csv"))?;
    for r in &outcome.rows {
        w.serialize(r)?;
    }
    w.flush()?;
    fs::write(spec.out.join("hp_matrix.json"), serde_json::to_string_pretty(&hp_matrix(spec, &outcome.rows))?)?;
    Ok(())
}

/// Knot and interval counts of one axis. Both are reported because the
/// two counting conventions in use differ by one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisSummary {
    pub knots: Vec<f64>,
    pub n_knots: usize,
    pub n_intervals: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveSummary {
    pub problem: String,
    #[serde(rename = "B")]
    pub degree: usize,
    #[serde(rename = "N_splines")]
    pub splines: usize,
    #[serde(rename = "N_cells")]
    pub cells: usize,
    pub seed: u64,
    pub epochs: usize,
    pub energy: f64,
    pub l2_error: f64,
    pub sample_mse: f64,
    pub axes: Vec<AxisSummary>,
    /// Baseline name to L2 error against the exact solution.
    pub oracle_l2: Vec<(String, f64)>,
    /// L2 distance between the model and the P1 solution on its own knots
    /// (1D only).
    pub model_vs_fem_l2: Option<f64>,
    pub wall_time: f64,
    pub warnings: Vec<String>,
}

/// Train the first combination of a variational spec and write
/// `model.json`, `trace.csv`, `samples.csv` and `summary.json`.
pub fn run_variational(spec: &ExperimentSpec) -> Result<SolveSummary> {
    spec.validate()?;
    if spec.regression() {
        return Err(Error::InvalidSpec(format!("{} is not a variational problem", spec.problem)));
    }
    let (b, n, c) = spec.runs()?[0];
    let seed = spec.seed;
    let run = run_one(spec, b, n, c, seed)?;
    let tcfg = spec.train_config(b, seed)?;
    let p = match Problem::by_name(&spec.problem, spec.data_seed, tcfg.penalty)? {
        Problem::Variational(p) => p,
        Problem::Regression(_) => unreachable!("checked above"),
    };
    let model = &run.model;
    fs::create_dir_all(&spec.out)?;
    checkpoint::save(model, &spec.out.join("model.json"))?;
    run.trace.write_csv(&spec.out.join("trace.csv"))?;

    let pts = evaluation_points(p.kind, seed);
    let eval = model.eval(&pts)?;
    let (y, g) = eval.forward(&model.coeffs);
    let mut w = csv::Writer::from_path(spec.out.join("samples.csv"))?;
    match p.kind {
        VariationalKind::Poisson1d => w.write_record(["x", "model", "exact", "error", "model_dx"])?,
        VariationalKind::Slit => w.write_record(["x", "y", "model", "exact", "error"])?,
    }
    for i in 0..pts.len() {
        let x = pts.get(i);
        let e = p.exact(x);
        let mut rec: Vec<String> = x.iter().map(|v| v.to_string()).collect();
        rec.extend([y[i].to_string(), e.to_string(), (y[i] - e).to_string()]);
        if p.kind == VariationalKind::Poisson1d {
            rec.push(g[i][0].to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;

    let (oracle_l2, model_vs_fem_l2) = match p.kind {
        VariationalKind::Poisson1d => {
            let fem = fem_p1_1d(&model.knot_vectors()[0], |_| 2.0, Boundary::Penalty(p.beta))?;
            let err = fem_error_1d(&fem, p.q_extra)?;
            let diff = l2_error(model, &|x| fem.eval(x[0]), p.q_extra)?;
            (vec![("fem_learned_knots".to_string(), err)], Some(diff))
        }
        VariationalKind::Slit => {
            let mut v = Vec::new();
            for m in [3, 6] {
                v.push((format!("fem_u{m}"), fem_l2_error(&fem_slit(m)?, crate::problems::slit_exact, p.q_extra)?));
            }
            (v, None)
        }
    };
    let summary = SolveSummary {
        problem: spec.problem.clone(),
        degree: b,
        splines: n,
        cells: c,
        seed,
        epochs: tcfg.epochs,
        energy: run.trace.last().map(|r| r.loss).unwrap_or(f64::NAN),
        l2_error: run.row.l2_error.unwrap_or(f64::NAN),
        sample_mse: run.row.val_mse.unwrap_or(f64::NAN),
        axes: model
            .knot_vectors()
            .into_iter()
            .map(|k| AxisSummary { n_knots: k.len(), n_intervals: k.len() - 1, knots: k })
            .collect(),
        oracle_l2,
        model_vs_fem_l2,
        wall_time: run.row.wall_time,
        warnings: run.warnings,
    };
    fs::write(spec.out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

/// L2 error of a 1D P1 solution against `x (1 - x)`, integrated exactly per
/// mesh interval.
fn fem_error_1d(fem: &crate::oracles::LinearSpline, q_extra: usize) -> Result<f64> {
    let (gx, gw) = crate::quadrature::gauss_legendre_unit(3 + q_extra);
    let mut total = 0.0;
    for k in 0..fem.knots.len() - 1 {
        let (a, h) = (fem.knots[k], fem.knots[k + 1] - fem.knots[k]);
        for (s, w) in gx.iter().zip(&gw) {
            let x = a + s * h;
            total += w * h * (fem.eval(x) - crate::problems::poisson_exact(x)).powi(2);
        }
    }
    Ok(total.sqrt())
}

/// One row of an oracle table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleRow {
    pub problem: String,
    pub oracle: String,
    #[serde(rename = "B")]
    pub degree: usize,
    pub pieces: usize,
    pub val_mse: Option<f64>,
    pub l2_error: Option<f64>,
}

/// Baseline errors for every degree and piece count of the spec, without
/// any training. For regression `pieces` runs over the spline counts
/// (`uniform-spline`) or cell counts (other fits); for the 2D problem it is
/// the mesh size.
pub fn run_oracles(spec: &ExperimentSpec) -> Result<Vec<OracleRow>> {
    spec.validate()?;
    let name = spec.oracle.clone().ok_or_else(|| Error::InvalidSpec("no oracle selected".into()))?;
    let mut rows = Vec::new();
    let problem = Problem::by_name(&spec.problem, spec.data_seed, spec.train_config(0, 0)?.penalty)?;
    match &problem {
        Problem::Regression(p) => {
            let mut seen = BTreeSet::new();
            for (b, n, c) in spec.runs()? {
                let pieces = if name == "uniform-spline" { n } else { c };
                let key = if name == "uniform-spline" || name == "poly" { (0, pieces) } else { (b, pieces) };
                if !seen.insert((b, key)) {
                    continue;
                }
                rows.push(OracleRow {
                    problem: spec.problem.clone(),
                    oracle: name.clone(),
                    degree: b,
                    pieces,
                    val_mse: Some(regression_oracle(&name, p, b, n, c)?),
                    l2_error: None,
                });
            }
        }
        Problem::Variational(p) => {
            for &n in &spec.splines {
                let l2 = match p.kind {
                    VariationalKind::Poisson1d => {
                        let knots: Vec<f64> = (0..=n).map(|i| i as f64 / n as f64).collect();
                        fem_error_1d(&fem_p1_1d(&knots, |_| 2.0, Boundary::Penalty(p.beta))?, p.q_extra)?
                    }
                    VariationalKind::Slit => fem_l2_error(&fem_slit(n)?, crate::problems::slit_exact, p.q_extra)?,
                };
                rows.push(OracleRow {
                    problem: spec.problem.clone(),
                    oracle: format!("fem-u{n}"),
                    degree: 1,
                    pieces: n,
                    val_mse: None,
                    l2_error: Some(l2),
                });
            }
        }
    }
    Ok(rows)
}

pub fn write_oracles(spec: &ExperimentSpec, rows: &[OracleRow]) -> Result<()> {
    fs::create_dir_all(&spec.out)?;
    let mut w = csv::Writer::from_path(spec.out.join("oracle.csv"))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::AdamConfig;

    fn spec(text: &str) -> ExperimentSpec {
        ExperimentSpec::from_toml(text).unwrap()
    }

    #[test]
    fn cell_rules_resolve() {
        let s = spec(
            r#"
            problem = "p1-sine"
            degrees = [0, 1]
            splines = [4, 8]
            cells = ["pow2", 9, 20]
            out = "x"
            "#,
        );
        let runs = s.runs().unwrap();
        // pow2 gives 1,2,4 and 1,2,4,8; 9 fits only N=8; 20 never fits
        assert_eq!(runs.len(), 2 * (3 + 5));
        assert!(runs.iter().all(|&(_, n, c)| c <= n + 1));
        assert!(runs.contains(&(1, 8, 9)));
    }

    #[test]
    fn cell_bound_counts_tensor_basis_in_2d() {
        let s = spec(
            r#"
            problem = "p4-slit"
            degrees = [1]
            splines = [2, 9]
            cells = [9, 16]
            out = "x"
            "#,
        );
        assert_eq!(s.runs().unwrap(), vec![(1, 2, 9), (1, 9, 9), (1, 9, 16)]);
    }

    #[test]
    fn overlay_overrides_only_present_keys() {
        let mut base = ExperimentSpec::defaults_for("p1-sine");
        base.train.epochs = Some(7);
        base.train.lr = Some(0.1);
        let merged = base.overlay_toml("degrees = [3]\n[train]\nepochs = 9\n").unwrap();
        assert_eq!(merged.degrees, vec![3]);
        assert_eq!(merged.train.epochs, Some(9));
        assert_eq!(merged.train.lr, Some(0.1));
        assert_eq!(merged.splines, base.splines);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = ExperimentSpec::defaults_for("p1-sine");
        s.problem = "nope".into();
        assert!(matches!(s.validate(), Err(Error::InvalidSpec(_))));
        let mut s = ExperimentSpec::defaults_for("p1-sine");
        s.cells = vec![CellCount::Fixed(50)];
        assert!(matches!(s.validate(), Err(Error::InvalidSpec(_))));
        let mut s = ExperimentSpec::defaults_for("p1-sine");
        s.oracle = Some("fem".into());
        assert!(matches!(s.validate(), Err(Error::InvalidSpec(_))));
        assert!(ExperimentSpec::from_toml("problem = 1").is_err());
        assert!(ExperimentSpec::from_toml("problem='p1-sine'\ndegrees=[1]\nsplines=[1]\ncells=[1]\nout='x'\nbogus=1").is_err());
    }

    #[test]
    fn train_overrides_apply_in_order() {
        let mut s = ExperimentSpec::defaults_for("p1-sine");
        s.train.mode = Some(LsgdMode::Callback);
        let c = s.train_config(2, 9).unwrap();
        assert_eq!(c.ls_regularizer, crate::training::CALLBACK_REGULARIZER);
        assert_eq!(c.seed, 9);
        s.train.ls_regularizer = Some(1e-6);
        s.train.lr = Some(0.02);
        let c = s.train_config(2, 9).unwrap();
        assert_eq!(c.ls_regularizer, 1e-6);
        assert_eq!(c.rate_at(100), 0.02);
    }

    #[test]
    fn run_seeds_differ() {
        let seeds: BTreeSet<u64> = (0..100).map(|i| run_seed(1234, i)).collect();
        assert_eq!(seeds.len(), 100);
        assert_eq!(run_seed(1, 3), run_seed(1, 3));
    }

    #[test]
    fn hp_matrix_places_values() {
        let s = spec(
            r#"
            problem = "p1-sine"
            degrees = [0, 2]
            splines = [4]
            cells = [1, 4]
            out = "x"
            "#,
        );
        let row = |b, c, v| SweepRow {
            problem: "p1-sine".into(),
            degree: b,
            splines: 4,
            cells: c,
            seed: 0,
            train_mse: None,
            val_mse: Some(v),
            oracle_mse: None,
            epochs: 1,
            wall_time: 0.0,
            status: "ok".into(),
            l2_error: None,
        };
        let m = hp_matrix(&s, &[row(0, 1, 0.5), row(2, 4, 1e-3), row(2, 1, 0.1)]);
        assert_eq!(m.cells, vec![1, 4]);
        assert_eq!(m.matrix[1][0][1], Some(1e-3));
        assert_eq!(m.matrix[0][0][1], None);
        assert_eq!(m.best.unwrap().value, 1e-3);
    }

    #[test]
    fn adam_defaults_survive_partial_patch() {
        let p = AdamConfigPatch { beta1: Some(0.5), ..Default::default() };
        let a = p.apply(AdamConfig::default());
        assert_eq!(a.beta1, 0.5);
        assert_eq!(a.beta2, 0.999);
    }
}
