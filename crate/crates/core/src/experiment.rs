//! Config-driven runs: walk ensembles, gain and depth sweeps, single training
//! runs and gradient checks. Every run writes `manifest.toml`, the fully
//! resolved config, which reproduces the run's CSV outputs byte for byte.
//!
//! Relative data paths in a config are taken relative to the working
//! directory.

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{load_mnist, mnist_sample, synthetic_classification, Dataset};
use crate::error::{Error, Result};
use crate::net::{gradient_check, init_network, GradCheckConfig, NetworkParams, Nonlinearity, Objective, OutputActivation};
use crate::numeric::{derive_seed, fnv1a, Rng};
use crate::theory::{closed_form_gain, closed_form_stats, estimate_optimal_g, monte_carlo_stats, GainSearch};
use crate::trainer::{build_schedule, size_layers, train, SizingFamily, TrainConfig, TrainHistory};
use crate::walk::{mean_log_ratio_vs_g, simulate_walk, variance_fit, write_trace_csv, WalkConfig, WalkMode, DEFAULT_TRACE_BUDGET};

pub const SCHEMA_VERSION: u32 = 1;
pub const ARTIFACT_NAME: &str = env!("CARGO_PKG_NAME");
pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MANIFEST_FILE: &str = "manifest.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Walk,
    GSweep,
    DepthSweep,
    TrainOnce,
    GradientCheck,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 5] = [
        ExperimentKind::Walk,
        ExperimentKind::GSweep,
        ExperimentKind::DepthSweep,
        ExperimentKind::TrainOnce,
        ExperimentKind::GradientCheck,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Walk => "walk",
            ExperimentKind::GSweep => "g-sweep",
            ExperimentKind::DepthSweep => "depth-sweep",
            ExperimentKind::TrainOnce => "train-once",
            ExperimentKind::GradientCheck => "gradient-check",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown experiment kind '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Artifact {
    pub name: String,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub kind: ExperimentKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// Worker threads for sweeps and ensembles; does not affect results.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub artifact: Option<Artifact>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub walk: Option<WalkSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<DataSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub network: Option<NetworkSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gradient_check: Option<GradientCheckSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WalkSection {
    pub n: usize,
    pub d: usize,
    /// Omitted: the closed-form recommendation for `n` (linear and ReLU).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub g: Option<f64>,
    pub nonlinearity: Nonlinearity,
    pub samples: usize,
    pub mode: WalkMode,
    pub trace_budget: usize,
    /// Draws used for the measured per-step `ln z` statistics in the
    /// summary; 0 skips them.
    pub step_samples: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub g_curve: Option<GCurveSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub optimal_g: Option<OptimalGSection>,
}

impl Default for WalkSection {
    fn default() -> Self {
        WalkSection {
            n: 100,
            d: 500,
            g: None,
            nonlinearity: Nonlinearity::Linear,
            samples: 500,
            mode: WalkMode::Abstract,
            trace_budget: DEFAULT_TRACE_BUDGET,
            step_samples: 20_000,
            g_curve: None,
            optimal_g: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GCurveSection {
    pub grid: Vec<f64>,
    pub samples: usize,
}

impl Default for GCurveSection {
    fn default() -> Self {
        GCurveSection { grid: (0..=20).map(|i| 1.0 + 0.05 * i as f64).collect(), samples: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimalGSection {
    pub trials: usize,
    pub grid: Vec<f64>,
    pub tolerance: f64,
}

impl Default for OptimalGSection {
    fn default() -> Self {
        let s = GainSearch::default();
        OptimalGSection { trials: 200, grid: s.grid, tolerance: s.tolerance }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    /// The bundled 1000-digit MNIST sample.
    MnistSample,
    /// IDX files given by `images` and `labels`.
    Mnist,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub source: DataSource,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub images: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    /// Keep only the first `limit` examples.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
    /// Reconstruct the inputs instead of classifying them.
    pub autoencoder: bool,
    pub synthetic: SyntheticSection,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            source: DataSource::MnistSample,
            images: None,
            labels: None,
            limit: None,
            autoencoder: false,
            synthetic: SyntheticSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSection {
    pub examples: usize,
    pub dims: usize,
    pub classes: usize,
    pub separation: f64,
    pub seed: u64,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        SyntheticSection { examples: 500, dims: 20, classes: 4, separation: 4.0, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSection {
    pub nonlinearity: Nonlinearity,
    /// Gain for train-once; sweeps take theirs from the grid.
    pub g: f64,
    /// Number of weight layers for train-once.
    pub depth: usize,
    /// Hidden width, unless `p_lim` is set.
    pub width: usize,
    /// Parameter budget; when set, hidden widths come from layer sizing.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_lim: Option<u64>,
}

impl Default for NetworkSection {
    fn default() -> Self {
        NetworkSection { nonlinearity: Nonlinearity::Tanh, g: 1.2, depth: 16, width: 90, p_lim: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub minibatch: usize,
    pub epochs: usize,
    pub epoch_decay: f64,
    pub clip: bool,
    pub clip_threshold: f64,
    pub bias_rate_multiplier: f64,
    pub probe_size: usize,
    pub lambda_in: f64,
    pub lambda_out: f64,
    /// Depth anchoring the rate schedule; defaults to the deepest network
    /// in the run.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_max: Option<usize>,
    /// Error-rate level for the epochs-to-threshold metric.
    pub error_threshold: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            minibatch: 20,
            epochs: 100,
            epoch_decay: 0.995,
            clip: true,
            clip_threshold: 100.0,
            bias_rate_multiplier: 1.0,
            probe_size: 100,
            lambda_in: 1e-2,
            lambda_out: 1e-2,
            d_max: None,
            error_threshold: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub g_values: Vec<f64>,
    pub depths: Vec<usize>,
    pub lambda_in: Vec<f64>,
    pub lambda_out: Vec<f64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        let lambdas = vec![1e-4, 1e-3, 1e-2, 1e-1];
        SweepSection {
            g_values: vec![1.0, 1.1, 1.2, 1.3, 1.4, 1.5],
            depths: vec![4, 16],
            lambda_in: lambdas.clone(),
            lambda_out: lambdas,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradientCheckSection {
    pub widths: Vec<usize>,
    pub seeds: usize,
    pub tolerance: f64,
    pub step: f64,
    pub floor: f64,
}

impl Default for GradientCheckSection {
    fn default() -> Self {
        let c = GradCheckConfig::default();
        GradientCheckSection { widths: vec![5, 4, 3], seeds: 20, tolerance: 1e-6, step: c.step, floor: c.floor }
    }
}

impl ExperimentConfig {
    /// A config of the given kind with every section at its defaults.
    pub fn new(kind: ExperimentKind) -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            kind,
            seed: 0,
            output_dir: None,
            workers: None,
            artifact: None,
            walk: None,
            data: None,
            network: None,
            train: None,
            sweep: None,
            gradient_check: None,
        }
        .resolve()
        .expect("defaults are valid")
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Fills in the sections the kind needs, replaces implicit choices with
    /// explicit values and validates the result.
    pub fn resolve(mut self) -> Result<Self> {
        use ExperimentKind::*;
        let needs = |kinds: &[ExperimentKind]| kinds.contains(&self.kind);
        if needs(&[Walk]) {
            let w = self.walk.get_or_insert_with(WalkSection::default);
            if w.g.is_none() {
                w.g = Some(closed_form_gain(w.nonlinearity, w.n).map_err(|_| {
                    Error::Config(format!("a {} walk needs an explicit g", w.nonlinearity))
                })?.g);
            }
        }
        if needs(&[GSweep, DepthSweep, TrainOnce]) {
            self.data.get_or_insert_with(DataSection::default);
            self.network.get_or_insert_with(NetworkSection::default);
            let deepest = match self.kind {
                TrainOnce => self.network.as_ref().unwrap().depth,
                _ => *self.sweep.get_or_insert_with(SweepSection::default).depths.iter().max().unwrap_or(&0),
            };
            let t = self.train.get_or_insert_with(TrainSection::default);
            t.d_max.get_or_insert(deepest);
        }
        if needs(&[GradientCheck]) {
            self.gradient_check.get_or_insert_with(GradientCheckSection::default);
        }
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.workers == Some(0) {
            return bad("workers must be at least 1".into());
        }
        if let Some(w) = &self.walk {
            let wc = walk_config(w, self.seed)?;
            wc.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        if let Some(s) = &self.sweep {
            if s.g_values.is_empty() || s.depths.is_empty() || s.lambda_in.is_empty() || s.lambda_out.is_empty() {
                return bad("every sweep axis needs at least one value".into());
            }
            if s.depths.contains(&0) {
                return bad("sweep depths must be positive".into());
            }
        }
        if let (Some(t), Some(n)) = (&self.train, &self.network) {
            let deepest = match self.kind {
                ExperimentKind::TrainOnce => n.depth,
                _ => self.sweep.as_ref().map_or(n.depth, |s| *s.depths.iter().max().unwrap()),
            };
            if t.d_max.is_some_and(|d| d < deepest) {
                return bad(format!("train.d_max must be at least the deepest network ({deepest})"));
            }
            train_config(t, Objective::CrossEntropy, 0).validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        if let Some(d) = &self.data {
            if d.source == DataSource::Mnist && (d.images.is_none() || d.labels.is_none()) {
                return bad("data.source = \"mnist\" needs data.images and data.labels".into());
            }
        }
        Ok(())
    }

    fn with_artifact(&self) -> Self {
        ExperimentConfig {
            artifact: Some(Artifact { name: ARTIFACT_NAME.into(), version: ARTIFACT_VERSION.into() }),
            ..self.clone()
        }
    }
}

fn walk_config(w: &WalkSection, seed: u64) -> Result<WalkConfig> {
    let g = w.g.ok_or_else(|| Error::Config("walk.g is unresolved".into()))?;
    Ok(WalkConfig { trace_budget: w.trace_budget, ..WalkConfig::new(w.n, w.d, g, w.nonlinearity, w.samples, seed, w.mode) })
}

fn train_config(t: &TrainSection, objective: Objective, seed: u64) -> TrainConfig {
    TrainConfig {
        minibatch: t.minibatch,
        epochs: t.epochs,
        epoch_decay: t.epoch_decay,
        clip_threshold: t.clip.then_some(t.clip_threshold),
        objective,
        seed,
        bias_rate_multiplier: t.bias_rate_multiplier,
        probe_size: t.probe_size,
    }
}

/// What a run produced.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunReport {
    pub files: Vec<PathBuf>,
    pub cells: usize,
    /// `(cell index, reason)` for every cell that did not complete.
    pub failed: Vec<(usize, String)>,
}

impl RunReport {
    pub fn all_ok(&self) -> bool {
        self.failed.is_empty()
    }
}

/// Writes through a temporary sibling file and renames it into place.
fn write_atomic(path: &Path, body: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    let file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let mut w = BufWriter::new(file);
    body(&mut w)?;
    w.flush().map_err(|e| Error::io(&tmp, e))?;
    drop(w);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    write_atomic(path, |w| {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(header).map_err(Error::csv)?;
        for r in rows {
            out.write_record(r).map_err(Error::csv)?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    })
}

fn opt<T: ToString>(x: Option<T>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn with_pool<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

fn prepare(cfg: &ExperimentConfig, kind: ExperimentKind, out: &Path) -> Result<ExperimentConfig> {
    if cfg.kind != kind {
        return Err(Error::Config(format!("config is for '{}', not '{kind}'", cfg.kind)));
    }
    let mut cfg = cfg.clone().resolve()?;
    cfg.output_dir = Some(out.to_path_buf());
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let manifest = out.join(MANIFEST_FILE);
    let text = cfg.with_artifact().to_toml_string()?;
    write_atomic(&manifest, |w| w.write_all(text.as_bytes()).map_err(|e| Error::io(&manifest, e)))?;
    Ok(cfg)
}

/// Runs whatever `cfg.kind` names.
pub fn run(cfg: &ExperimentConfig, out: &Path) -> Result<RunReport> {
    match cfg.kind {
        ExperimentKind::Walk => run_walk_experiment(cfg, out),
        ExperimentKind::GSweep => run_g_sweep(cfg, out),
        ExperimentKind::DepthSweep => run_depth_sweep(cfg, out),
        ExperimentKind::TrainOnce => train_once(cfg, out),
        ExperimentKind::GradientCheck => run_gradient_check(cfg, out),
    }
}

/// `trace.csv` and `summary.csv`, plus `g_curve.csv` and `optimal_g.csv`
/// when those sections are present.
pub fn run_walk_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<RunReport> {
    let cfg = prepare(cfg, ExperimentKind::Walk, out)?;
    let w = cfg.walk.as_ref().unwrap();
    let wc = walk_config(w, cfg.seed)?;
    let mut files = vec![out.join(MANIFEST_FILE)];
    let root = Rng::new(cfg.seed);

    with_pool(cfg.workers, || -> Result<()> {
        let trace = simulate_walk(&wc)?;
        let path = out.join("trace.csv");
        write_atomic(&path, |f| write_trace_csv(&trace, f))?;
        files.push(path);

        let closed = closed_form_stats(w.nonlinearity, w.n).ok();
        let d = w.d as f64;
        let ln_g2 = (wc.g * wc.g).ln();
        let fit = variance_fit(&trace).ok();
        let mut rows = vec![
            vec![
                "final_mean_lnZ".into(),
                trace.final_mean().to_string(),
                trace.final_std_error().to_string(),
                opt(closed.as_ref().map(|c| d * (ln_g2 + c.mean))),
            ],
            vec![
                "final_var_lnZ".into(),
                trace.final_variance().to_string(),
                String::new(),
                opt(closed.as_ref().map(|c| d * c.variance)),
            ],
            vec![
                "variance_slope".into(),
                fit.map_or("undefined".into(), |f| f.slope.to_string()),
                String::new(),
                opt(closed.as_ref().map(|c| c.variance)),
            ],
            vec!["variance_r2".into(), fit.map_or("undefined".into(), |f| f.r_squared.to_string()), String::new(), String::new()],
        ];
        if w.step_samples >= 2 {
            let mc = monte_carlo_stats(w.nonlinearity, w.n, wc.g, w.step_samples, root.child_named("steps").seed())?;
            let (mean_se, var_se) = match mc.source {
                crate::theory::StatsSource::MonteCarlo { mean_std_error, variance_std_error, .. } => (mean_std_error, variance_std_error),
                crate::theory::StatsSource::ClosedForm => (f64::NAN, f64::NAN),
            };
            rows.push(vec!["step_mean_ln_z".into(), mc.mean.to_string(), mean_se.to_string(), opt(closed.as_ref().map(|c| c.mean))]);
            rows.push(vec!["step_var_ln_z".into(), mc.variance.to_string(), var_se.to_string(), opt(closed.as_ref().map(|c| c.variance))]);
        }
        rows.push(vec!["discarded".into(), trace.discarded.to_string(), String::new(), String::new()]);
        let path = out.join("summary.csv");
        write_csv(&path, &["quantity", "measured", "std_error", "predicted"], &rows)?;
        files.push(path);

        if let Some(c) = &w.g_curve {
            let curve = mean_log_ratio_vs_g(w.n, w.d, &c.grid, w.nonlinearity, c.samples, root.child_named("g-curve").seed())?;
            let rows: Vec<Vec<String>> = curve
                .iter()
                .map(|r| vec![r.g.to_string(), r.mean.to_string(), r.std_error.to_string(), r.trials.to_string(), r.discarded.to_string()])
                .collect();
            let path = out.join("g_curve.csv");
            write_csv(&path, &["g", "mean_ln_ratio", "std_error", "trials", "discarded"], &rows)?;
            files.push(path);
        }
        if let Some(o) = &w.optimal_g {
            let search = GainSearch { grid: o.grid.clone(), tolerance: o.tolerance };
            let est = estimate_optimal_g(w.nonlinearity, w.n, w.d, o.trials, root.child_named("optimal-g").seed(), &search)?;
            let closed_g = closed_form_gain(w.nonlinearity, w.n).ok().map(|r| r.g);
            let path = out.join("optimal_g.csv");
            write_csv(
                &path,
                &["nonlinearity", "n", "d", "g_estimate", "g_closed_form", "evaluations", "discarded"],
                &[vec![
                    w.nonlinearity.to_string(),
                    w.n.to_string(),
                    w.d.to_string(),
                    est.recommendation.g.to_string(),
                    opt(closed_g),
                    est.evaluations.len().to_string(),
                    est.discarded.to_string(),
                ]],
            )?;
            files.push(path);
        }
        Ok(())
    })??;
    Ok(RunReport { files, cells: 1, failed: Vec::new() })
}

/// One grid point of a training sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub g: f64,
    pub depth: usize,
    pub lambda_in: f64,
    pub lambda_out: f64,
}

impl Cell {
    /// Seed derived from the run seed and the cell's coordinates only, so a
    /// cell trains identically whichever grid it belongs to.
    pub fn seed(&self, run_seed: u64) -> u64 {
        let key = format!("g={:e};depth={};lambda_in={:e};lambda_out={:e}", self.g, self.depth, self.lambda_in, self.lambda_out);
        derive_seed(run_seed, fnv1a(key.as_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellMetrics {
    pub examples: usize,
    pub widths: Vec<usize>,
    pub min_training_errors: Option<usize>,
    pub min_error_rate: Option<f64>,
    pub epochs_to_threshold: Option<usize>,
    pub min_objective: f64,
    pub final_objective: f64,
    pub initial_mean_ln_z: f64,
    pub initial_grad_ratio: f64,
}

impl CellMetrics {
    /// Lower is better: error rate for classifiers, objective otherwise.
    pub fn score(&self) -> f64 {
        self.min_error_rate.unwrap_or(self.min_objective)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub index: usize,
    pub cell: Cell,
    pub seed: u64,
    pub outcome: std::result::Result<CellMetrics, String>,
}

/// Every cell of a sweep in grid order (g, then depth, then `λ_in`, then
/// `λ_out`).
#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub g_values: Vec<f64>,
    pub depths: Vec<usize>,
    pub lambda_in: Vec<f64>,
    pub lambda_out: Vec<f64>,
    pub cells: Vec<CellResult>,
}

impl SweepResult {
    pub fn failed(&self) -> Vec<(usize, String)> {
        self.cells.iter().filter_map(|c| c.outcome.as_ref().err().map(|e| (c.index, e.clone()))).collect()
    }

    fn ok_cells(&self) -> impl Iterator<Item = (&Cell, &CellMetrics)> {
        self.cells.iter().filter_map(|c| c.outcome.as_ref().ok().map(|m| (&c.cell, m)))
    }

    /// Best cell over the learning-rate grid for a `(g, depth)` pair.
    pub fn best_over_lambdas(&self, g: f64, depth: usize) -> Option<(&Cell, &CellMetrics)> {
        self.ok_cells()
            .filter(|(c, _)| c.g == g && c.depth == depth)
            .min_by(|a, b| a.1.score().total_cmp(&b.1.score()))
    }

    /// The gain whose best cell scores lowest at `depth`; ties go to the
    /// smaller gain.
    pub fn argmin_g(&self, depth: usize) -> Option<f64> {
        self.g_values
            .iter()
            .filter_map(|&g| self.best_over_lambdas(g, depth).map(|(_, m)| (g, m.score())))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(g, _)| g)
    }

    /// Mean score over gains for each `(depth, λ_in, λ_out)`, with the
    /// number of completed cells behind it.
    pub fn lambda_table(&self) -> Vec<(usize, f64, f64, Option<f64>, usize)> {
        let mut rows = Vec::new();
        for &d in &self.depths {
            for &li in &self.lambda_in {
                for &lo in &self.lambda_out {
                    let scores: Vec<f64> = self
                        .ok_cells()
                        .filter(|(c, _)| c.depth == d && c.lambda_in == li && c.lambda_out == lo)
                        .map(|(_, m)| m.score())
                        .collect();
                    let mean = (!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64);
                    rows.push((d, li, lo, mean, scores.len()));
                }
            }
        }
        rows
    }
}

pub(crate) fn load_dataset(d: &DataSection) -> Result<Dataset> {
    let raw = match d.source {
        DataSource::MnistSample => mnist_sample(d.limit, d.autoencoder)?,
        DataSource::Mnist => {
            let (Some(images), Some(labels)) = (&d.images, &d.labels) else {
                return Err(Error::Config("mnist data needs images and labels paths".into()));
            };
            load_mnist(images, labels, d.limit, d.autoencoder)?
        }
        DataSource::Synthetic => {
            if d.autoencoder {
                return Err(Error::Config("synthetic data is classification only".into()));
            }
            let s = &d.synthetic;
            let set = synthetic_classification(s.examples, s.dims, s.classes, s.separation, s.seed)?;
            match d.limit {
                Some(n) => set.truncate(n)?,
                None => set,
            }
        }
    };
    raw.normalize()
}

fn network_widths(net: &NetworkSection, depth: usize, data: &Dataset, autoencoder: bool) -> Result<Vec<usize>> {
    match net.p_lim {
        Some(p) => {
            let family = if autoencoder { SizingFamily::Autoencoder } else { SizingFamily::Constant };
            Ok(size_layers(p, depth, data.input_dim(), data.target_dim(), family)?.widths)
        }
        None => {
            let mut w = vec![net.width; depth + 1];
            w[0] = data.input_dim();
            w[depth] = data.target_dim();
            Ok(w)
        }
    }
}

struct TrainContext<'a> {
    data: &'a Dataset,
    autoencoder: bool,
    net: &'a NetworkSection,
    train: &'a TrainSection,
    run_seed: u64,
    cells_dir: &'a Path,
}

impl TrainContext<'_> {
    fn run_cell(&self, index: usize, cell: Cell) -> Result<CellResult> {
        let seed = cell.seed(self.run_seed);
        let outcome = self.train_cell(cell, seed).map(|(metrics, history)| {
            let path = self.cells_dir.join(format!("cell-{index:04}.csv"));
            (metrics, history, path)
        });
        let outcome = match outcome {
            Ok((metrics, history, path)) => {
                write_atomic(&path, |w| history.write_csv(w))?;
                Ok(metrics)
            }
            Err(e) => Err(e.to_string()),
        };
        Ok(CellResult { index, cell, seed, outcome })
    }

    fn train_cell(&self, cell: Cell, seed: u64) -> Result<(CellMetrics, TrainHistory)> {
        let widths = network_widths(self.net, cell.depth, self.data, self.autoencoder)?;
        let root = Rng::new(seed);
        let output = if self.autoencoder { OutputActivation::Linear } else { OutputActivation::Softmax };
        let mut params: NetworkParams =
            init_network(&widths, cell.g, self.net.nonlinearity, output, root.child_named("init").seed())?;
        let d_max = self.train.d_max.unwrap_or(cell.depth).max(cell.depth);
        let schedule = build_schedule(cell.depth, d_max, cell.lambda_in, cell.lambda_out)?;
        let tc = train_config(self.train, self.data.objective(), root.child_named("train").seed());
        let history = train(&mut params, self.data, &schedule, &tc)?;
        let n = self.data.len();
        let min_errors = history.min_training_errors();
        let threshold = (self.train.error_threshold * n as f64).floor() as usize;
        let metrics = CellMetrics {
            examples: n,
            widths,
            min_training_errors: min_errors,
            min_error_rate: min_errors.map(|e| e as f64 / n as f64),
            epochs_to_threshold: history.epochs_to_errors(threshold),
            min_objective: history.records.iter().map(|r| r.objective).fold(f64::INFINITY, f64::min),
            final_objective: history.last().objective,
            initial_mean_ln_z: history.initial().mean_ln_z,
            initial_grad_ratio: history.initial().grad_ratio,
        };
        Ok((metrics, history))
    }
}

const CELL_HEADER: [&str; 16] = [
    "index",
    "g",
    "depth",
    "lambda_in",
    "lambda_out",
    "seed",
    "status",
    "reason",
    "width",
    "min_training_errors",
    "min_error_rate",
    "epochs_to_threshold",
    "min_objective",
    "final_objective",
    "initial_mean_ln_z",
    "initial_grad_ratio",
];

fn cell_row(c: &CellResult) -> Vec<String> {
    let mut row = vec![
        c.index.to_string(),
        c.cell.g.to_string(),
        c.cell.depth.to_string(),
        c.cell.lambda_in.to_string(),
        c.cell.lambda_out.to_string(),
        c.seed.to_string(),
    ];
    match &c.outcome {
        Ok(m) => row.extend([
            "ok".into(),
            String::new(),
            opt(m.widths.get(1)),
            opt(m.min_training_errors),
            opt(m.min_error_rate),
            opt(m.epochs_to_threshold),
            m.min_objective.to_string(),
            m.final_objective.to_string(),
            m.initial_mean_ln_z.to_string(),
            m.initial_grad_ratio.to_string(),
        ]),
        Err(reason) => {
            row.extend(["failed".into(), reason.clone()]);
            row.extend(std::iter::repeat_n(String::new(), 8));
        }
    }
    row
}

fn run_cells(cfg: &ExperimentConfig, out: &Path, grid: &[Cell]) -> Result<Vec<CellResult>> {
    let data = load_dataset(cfg.data.as_ref().unwrap())?;
    let cells_dir = out.join("cells");
    fs::create_dir_all(&cells_dir).map_err(|e| Error::io(&cells_dir, e))?;
    let ctx = TrainContext {
        data: &data,
        autoencoder: cfg.data.as_ref().unwrap().autoencoder,
        net: cfg.network.as_ref().unwrap(),
        train: cfg.train.as_ref().unwrap(),
        run_seed: cfg.seed,
        cells_dir: &cells_dir,
    };
    let results = with_pool(cfg.workers, || {
        grid.par_iter()
            .enumerate()
            .map(|(i, &c)| ctx.run_cell(i, c))
            .collect::<Result<Vec<_>>>()
    })??;
    let rows: Vec<Vec<String>> = results.iter().map(cell_row).collect();
    write_csv(&out.join("cells.csv"), &CELL_HEADER, &rows)?;
    Ok(results)
}

fn sweep_grid(s: &SweepSection) -> Vec<Cell> {
    let mut grid = Vec::new();
    for &g in &s.g_values {
        for &depth in &s.depths {
            for &lambda_in in &s.lambda_in {
                for &lambda_out in &s.lambda_out {
                    grid.push(Cell { g, depth, lambda_in, lambda_out });
                }
            }
        }
    }
    grid
}

fn run_sweep(cfg: &ExperimentConfig, out: &Path) -> Result<SweepResult> {
    let s = cfg.sweep.as_ref().unwrap();
    let cells = run_cells(cfg, out, &sweep_grid(s))?;
    Ok(SweepResult {
        g_values: s.g_values.clone(),
        depths: s.depths.clone(),
        lambda_in: s.lambda_in.clone(),
        lambda_out: s.lambda_out.clone(),
        cells,
    })
}

fn report(out: &Path, names: &[&str], sweep: &SweepResult) -> RunReport {
    RunReport {
        files: names.iter().map(|n| out.join(n)).collect(),
        cells: sweep.cells.len(),
        failed: sweep.failed(),
    }
}

/// Trains every `(g, depth, λ_in, λ_out)` cell. Writes `cells.csv`, one
/// history per cell under `cells/`, `g_depth.csv` (best over the rate grid
/// for each gain and depth) and `best_g.csv` (the winning gain per depth).
pub fn run_g_sweep(cfg: &ExperimentConfig, out: &Path) -> Result<RunReport> {
    let cfg = prepare(cfg, ExperimentKind::GSweep, out)?;
    let sweep = run_sweep(&cfg, out)?;
    write_g_tables(out, &sweep)?;
    Ok(report(out, &[MANIFEST_FILE, "cells.csv", "g_depth.csv", "best_g.csv"], &sweep))
}

pub fn sweep_results(cfg: &ExperimentConfig, out: &Path) -> Result<SweepResult> {
    let kind = cfg.kind;
    if kind != ExperimentKind::GSweep && kind != ExperimentKind::DepthSweep {
        return Err(Error::Config(format!("'{kind}' is not a sweep")));
    }
    let cfg = prepare(cfg, kind, out)?;
    let sweep = run_sweep(&cfg, out)?;
    match kind {
        ExperimentKind::GSweep => write_g_tables(out, &sweep)?,
        _ => write_depth_tables(out, &sweep)?,
    }
    Ok(sweep)
}

fn write_g_tables(out: &Path, sweep: &SweepResult) -> Result<()> {
    let mut rows = Vec::new();
    for &g in &sweep.g_values {
        for &d in &sweep.depths {
            let best = sweep.best_over_lambdas(g, d);
            rows.push(vec![
                g.to_string(),
                d.to_string(),
                opt(best.and_then(|(_, m)| m.min_training_errors)),
                opt(best.map(|(_, m)| m.score())),
                opt(best.map(|(c, _)| c.lambda_in)),
                opt(best.map(|(c, _)| c.lambda_out)),
            ]);
        }
    }
    write_csv(
        &out.join("g_depth.csv"),
        &["g", "depth", "min_training_errors", "best_score", "lambda_in", "lambda_out"],
        &rows,
    )?;
    let rows: Vec<Vec<String>> = sweep
        .depths
        .iter()
        .map(|&d| {
            let g = sweep.argmin_g(d);
            let m = g.and_then(|g| sweep.best_over_lambdas(g, d)).map(|(_, m)| m.score());
            vec![d.to_string(), opt(g), opt(m)]
        })
        .collect();
    write_csv(&out.join("best_g.csv"), &["depth", "g", "best_score"], &rows)
}

/// Same grid as the gain sweep, summarized per depth: `depth_lambda.csv`
/// holds the score averaged over gains for each rate pair and
/// `depth_best.csv` the best pair per depth.
pub fn run_depth_sweep(cfg: &ExperimentConfig, out: &Path) -> Result<RunReport> {
    let cfg = prepare(cfg, ExperimentKind::DepthSweep, out)?;
    let sweep = run_sweep(&cfg, out)?;
    write_depth_tables(out, &sweep)?;
    Ok(report(out, &[MANIFEST_FILE, "cells.csv", "depth_lambda.csv", "depth_best.csv"], &sweep))
}

fn write_depth_tables(out: &Path, sweep: &SweepResult) -> Result<()> {
    let table = sweep.lambda_table();
    let rows: Vec<Vec<String>> = table
        .iter()
        .map(|(d, li, lo, mean, n)| vec![d.to_string(), li.to_string(), lo.to_string(), opt(*mean), n.to_string()])
        .collect();
    write_csv(&out.join("depth_lambda.csv"), &["depth", "lambda_in", "lambda_out", "mean_score", "completed_cells"], &rows)?;
    let rows: Vec<Vec<String>> = sweep
        .depths
        .iter()
        .map(|&d| {
            let best = table
                .iter()
                .filter(|r| r.0 == d)
                .filter_map(|r| r.3.map(|m| (r.1, r.2, m)))
                .min_by(|a, b| a.2.total_cmp(&b.2));
            vec![d.to_string(), opt(best.map(|b| b.0)), opt(best.map(|b| b.1)), opt(best.map(|b| b.2))]
        })
        .collect();
    write_csv(&out.join("depth_best.csv"), &["depth", "lambda_in", "lambda_out", "mean_score"], &rows)
}

/// A single cell at the network section's gain and depth and the train
/// section's rate pair. Writes `cells.csv` and `cells/cell-0000.csv`.
pub fn train_once(cfg: &ExperimentConfig, out: &Path) -> Result<RunReport> {
    let cfg = prepare(cfg, ExperimentKind::TrainOnce, out)?;
    let (n, t) = (cfg.network.as_ref().unwrap(), cfg.train.as_ref().unwrap());
    let cell = Cell { g: n.g, depth: n.depth, lambda_in: t.lambda_in, lambda_out: t.lambda_out };
    let results = run_cells(&cfg, out, &[cell])?;
    let failed = results.iter().filter_map(|c| c.outcome.as_ref().err().map(|e| (c.index, e.clone()))).collect();
    Ok(RunReport {
        files: vec![out.join(MANIFEST_FILE), out.join("cells.csv"), out.join("cells").join("cell-0000.csv")],
        cells: 1,
        failed,
    })
}

/// Finite-difference checks for every nonlinearity and objective over
/// `seeds` random networks. Cells above the tolerance count as failed.
pub fn run_gradient_check(cfg: &ExperimentConfig, out: &Path) -> Result<RunReport> {
    let cfg = prepare(cfg, ExperimentKind::GradientCheck, out)?;
    let gc = cfg.gradient_check.as_ref().unwrap();
    if gc.widths.len() < 2 {
        return Err(Error::Config("gradient_check.widths needs at least two entries".into()));
    }
    let check = GradCheckConfig { step: gc.step, floor: gc.floor };
    let mut rows = Vec::new();
    let mut failed = Vec::new();
    let root = Rng::new(cfg.seed);
    for nl in Nonlinearity::ALL {
        for objective in [Objective::CrossEntropy, Objective::MeanSquaredError] {
            for s in 0..gc.seeds {
                let index = rows.len();
                let seed = root.child_named(&format!("{nl}/{}", objective.name())).child(s as u64).seed();
                let r = gradient_check_case(&gc.widths, nl, objective, seed, check);
                let (status, reason, err, checked, skipped) = match r {
                    Ok(rep) if rep.max_rel_error < gc.tolerance => ("ok", String::new(), rep.max_rel_error.to_string(), rep.checked, rep.skipped_kinks),
                    Ok(rep) => {
                        let reason = format!("max relative error {} exceeds {}", rep.max_rel_error, gc.tolerance);
                        failed.push((index, reason.clone()));
                        ("failed", reason, rep.max_rel_error.to_string(), rep.checked, rep.skipped_kinks)
                    }
                    Err(e) => {
                        failed.push((index, e.to_string()));
                        ("failed", e.to_string(), String::new(), 0, 0)
                    }
                };
                rows.push(vec![
                    nl.to_string(),
                    objective.name().into(),
                    seed.to_string(),
                    status.into(),
                    reason,
                    err,
                    checked.to_string(),
                    skipped.to_string(),
                ]);
            }
        }
    }
    let path = out.join("gradient_check.csv");
    write_csv(&path, &["nonlinearity", "objective", "seed", "status", "reason", "max_rel_error", "checked", "skipped_kinks"], &rows)?;
    Ok(RunReport { files: vec![out.join(MANIFEST_FILE), path], cells: rows.len(), failed })
}

/// One random network, input and target. The gain is drawn from
/// `[0.8, 1.6)`; cross-entropy uses a softmax output and a random class,
/// squared error an output of the hidden nonlinearity and a Gaussian target.
pub fn gradient_check_case(
    widths: &[usize],
    nl: Nonlinearity,
    objective: Objective,
    seed: u64,
    check: GradCheckConfig,
) -> Result<crate::net::GradCheckReport> {
    let root = Rng::new(seed);
    let mut r = root.child_named("case");
    let g = 0.8 + 0.8 * r.uniform();
    let out_w = *widths.last().unwrap();
    let (output, target) = match objective {
        Objective::CrossEntropy => {
            let k = r.below(out_w);
            (OutputActivation::Softmax, (0..out_w).map(|i| if i == k { 1.0 } else { 0.0 }).collect::<Vec<_>>())
        }
        Objective::MeanSquaredError => (OutputActivation::from(nl), r.normal_vec(out_w)),
    };
    let params = init_network(widths, g, nl, output, root.child_named("network").seed())?;
    let input = root.child_named("input").normal_vec(widths[0]);
    gradient_check(&params, &input, &target, objective, check)
}
