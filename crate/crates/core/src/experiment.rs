//! Experiment configuration, seeded runs, parameter sweeps and metrics files.
//!
//! A config file is flat UTF-8 `key = value` lines with `#` comments. Every
//! key is optional; unknown keys are rejected with their line number. The
//! defaults are the desk profile: 8 Gaussian classes in 16 dimensions,
//! 500 training samples per class, a softmax-linear model, 32 vehicles over
//! 4 edges, `tau_l = 6`, `tau_e = 10` and 60 cloud epochs.
//!
//! One run directory holds:
//!
//! * `resolved_config.txt`: every key with its effective value; re-running it reproduces the run.
//! * `metrics.csv`: one row per logged event for every seed.
//! * `membership_seed<S>.csv`: vehicle→edge assignment after every edge epoch.
//! * `checkpoints_seed<S>.json`: cloud and virtual centralized models at cloud boundaries.
//! * `bounds_seed<S>.json`: the bound report, when enabled.
//! * `ERROR`: present only when the run failed; holds the error message.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bounds::{bound_report, FactorCase, ReportSettings};
use crate::data::{
    generate_synthetic_split, partition_edge_niid, partition_iid, partition_local_niid, LabeledDataset,
    PartitionPlan,
};
use crate::engine::{
    run_mob_hierfavg, BatchSize, Checkpoint, EmptyEdgePolicy, Event, HflConfig, LogLevel, RoundRecord, Scenario,
};
use crate::error::{Error, Result};
use crate::mobility::{
    empirical_transition, lambda_star, load_trace, ring_transition, RingParams, SojournMap, TrajectoryTrace,
    TransitionMatrix,
};
use crate::model::{ModelSpec, ParamVector};
use crate::rng::{stream, Domain};

pub const METRICS_HEADER: [&str; 11] = [
    "seed",
    "cloud_epoch",
    "edge_round",
    "tau",
    "event",
    "test_acc",
    "train_loss",
    "cf_diff",
    "avg_prob_diff",
    "theta_min",
    "theta_max",
];

#[derive(Debug, Clone, PartialEq)]
pub enum TaskKind {
    Softmax,
    Mlp { hidden: Vec<usize> },
    Quadratic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartitionCase {
    Iid,
    LocalNiid,
    EdgeNiid,
}

impl PartitionCase {
    pub fn factor_case(self) -> FactorCase {
        match self {
            PartitionCase::Iid => FactorCase::Iid,
            PartitionCase::LocalNiid => FactorCase::EdgeIid,
            PartitionCase::EdgeNiid => FactorCase::EdgeNiid,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MobilityKind {
    Static,
    Ring,
    Matrix,
    Trace,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: TaskKind,
    pub classes: usize,
    pub dim: usize,
    pub per_class: usize,
    pub test_per_class: usize,
    pub separation: f64,
    pub train_file: Option<PathBuf>,
    pub test_file: Option<PathBuf>,
    pub quad_dim: usize,
    pub quad_samples: usize,
    pub quad_spread: f64,
    pub quad_jitter: f64,

    pub partition: PartitionCase,
    pub l: usize,

    pub vehicles: usize,
    pub edges: usize,
    pub tau_l: usize,
    pub tau_e: usize,
    pub cloud_epochs: usize,
    pub eta: f64,
    pub batch: BatchSize,
    pub seeds: Vec<u64>,
    pub workers: usize,
    pub empty_edge: EmptyEdgePolicy,
    pub log_events: LogLevel,
    pub track_cf: bool,

    pub mobility: MobilityKind,
    pub p_s: f64,
    pub speed_mps: Option<f64>,
    pub side_length_m: f64,
    pub interval_s: f64,
    pub sojourn_intercept: f64,
    pub sojourn_slope: f64,
    pub matrix_file: Option<PathBuf>,
    pub trace_file: Option<PathBuf>,

    pub output_dir: PathBuf,
    pub bounds: bool,
    pub bound_probes: usize,
    pub epsilon_min: f64,
    pub epsilon_max: f64,
    pub epsilon_points: usize,
    pub edge_gap_rel_tol: f64,
    /// Evaluate the ring mobility factor with the power form.
    pub ring_factor_power: bool,
    pub accuracy_targets: Vec<f64>,
    /// When nonzero, a `tau_l`/`tau_e` sweep sets the other period so the product stays fixed.
    pub period_product: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let hfl = HflConfig::default();
        Self {
            model: TaskKind::Softmax,
            classes: 8,
            dim: 16,
            per_class: 500,
            test_per_class: 100,
            separation: 1.0,
            train_file: None,
            test_file: None,
            quad_dim: 4,
            quad_samples: 4,
            quad_spread: 1.0,
            quad_jitter: 0.1,
            partition: PartitionCase::Iid,
            l: 1,
            vehicles: hfl.vehicles,
            edges: hfl.edges,
            tau_l: hfl.tau_l,
            tau_e: hfl.tau_e,
            cloud_epochs: 60,
            eta: hfl.eta,
            batch: hfl.batch,
            seeds: vec![0],
            workers: 1,
            empty_edge: hfl.empty_edge,
            log_events: LogLevel::Edge,
            track_cf: true,
            mobility: MobilityKind::Static,
            p_s: 1.0,
            speed_mps: None,
            side_length_m: 1000.0,
            interval_s: 1.0,
            sojourn_intercept: 1.0,
            sojourn_slope: 1.0,
            matrix_file: None,
            trace_file: None,
            output_dir: PathBuf::from("out"),
            bounds: true,
            bound_probes: 8,
            epsilon_min: 1e-4,
            epsilon_max: 1.0,
            epsilon_points: 9,
            edge_gap_rel_tol: 0.05,
            ring_factor_power: false,
            accuracy_targets: vec![],
            period_product: 0,
        }
    }
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn path_or_empty(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl ExperimentConfig {
    /// Every key with its effective value, in a fixed order.
    pub fn resolved_entries(&self) -> Vec<(&'static str, String)> {
        let model = match &self.model {
            TaskKind::Softmax => "softmax",
            TaskKind::Mlp { .. } => "mlp",
            TaskKind::Quadratic => "quadratic",
        };
        let hidden = match &self.model {
            TaskKind::Mlp { hidden } => join(hidden),
            _ => String::new(),
        };
        let partition = match self.partition {
            PartitionCase::Iid => "iid",
            PartitionCase::LocalNiid => "local_niid",
            PartitionCase::EdgeNiid => "edge_niid",
        };
        let mobility = match self.mobility {
            MobilityKind::Static => "static",
            MobilityKind::Ring => "ring",
            MobilityKind::Matrix => "matrix",
            MobilityKind::Trace => "trace",
        };
        let batch = match self.batch {
            BatchSize::Full => "full".to_string(),
            BatchSize::Samples(n) => n.to_string(),
        };
        let empty = match self.empty_edge {
            EmptyEdgePolicy::CarryForward => "carry_forward",
            EmptyEdgePolicy::Fail => "fail",
        };
        let log = match self.log_events {
            LogLevel::Cloud => "cloud",
            LogLevel::Edge => "edge",
            LogLevel::All => "all",
        };
        vec![
            ("model", model.into()),
            ("hidden", hidden),
            ("classes", self.classes.to_string()),
            ("dim", self.dim.to_string()),
            ("per_class", self.per_class.to_string()),
            ("test_per_class", self.test_per_class.to_string()),
            ("separation", self.separation.to_string()),
            ("train_file", path_or_empty(&self.train_file)),
            ("test_file", path_or_empty(&self.test_file)),
            ("quad_dim", self.quad_dim.to_string()),
            ("quad_samples", self.quad_samples.to_string()),
            ("quad_spread", self.quad_spread.to_string()),
            ("quad_jitter", self.quad_jitter.to_string()),
            ("partition", partition.into()),
            ("l", self.l.to_string()),
            ("vehicles", self.vehicles.to_string()),
            ("edges", self.edges.to_string()),
            ("tau_l", self.tau_l.to_string()),
            ("tau_e", self.tau_e.to_string()),
            ("cloud_epochs", self.cloud_epochs.to_string()),
            ("eta", self.eta.to_string()),
            ("batch_size", batch),
            ("seeds", join(&self.seeds)),
            ("workers", self.workers.to_string()),
            ("empty_edge", empty.into()),
            ("log_events", log.into()),
            ("track_cf", self.track_cf.to_string()),
            ("mobility", mobility.into()),
            ("p_s", self.p_s.to_string()),
            ("speed_mps", self.speed_mps.map(|v| v.to_string()).unwrap_or_default()),
            ("side_length_m", self.side_length_m.to_string()),
            ("interval_s", self.interval_s.to_string()),
            ("sojourn_intercept", self.sojourn_intercept.to_string()),
            ("sojourn_slope", self.sojourn_slope.to_string()),
            ("matrix_file", path_or_empty(&self.matrix_file)),
            ("trace_file", path_or_empty(&self.trace_file)),
            ("output_dir", self.output_dir.display().to_string()),
            ("bounds", self.bounds.to_string()),
            ("bound_probes", self.bound_probes.to_string()),
            ("epsilon_min", self.epsilon_min.to_string()),
            ("epsilon_max", self.epsilon_max.to_string()),
            ("epsilon_points", self.epsilon_points.to_string()),
            ("edge_gap_rel_tol", self.edge_gap_rel_tol.to_string()),
            ("ring_factor_form", if self.ring_factor_power { "power" } else { "general" }.into()),
            ("accuracy_targets", join(&self.accuracy_targets)),
            ("period_product", self.period_product.to_string()),
        ]
    }

    /// The resolved config as file text; parsing it yields an equal config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (key, value) in self.resolved_entries() {
            let _ = writeln!(out, "{key} = {value}");
        }
        out
    }

    /// Check cross-field constraints and derive `p_s` from the speed when given.
    pub fn resolve(&mut self) -> Result<()> {
        if let Some(speed) = self.speed_mps {
            let map = SojournMap {
                intercept: self.sojourn_intercept,
                slope: self.sojourn_slope,
            };
            self.p_s = map
                .sojourn(speed, self.side_length_m, self.interval_s)
                .map_err(|e| Error::config("speed_mps", e.to_string()))?;
            if self.mobility == MobilityKind::Static {
                self.mobility = MobilityKind::Ring;
            }
        }
        self.hfl_config(0, Scenario::Static).validate()?;
        if !(0.0..=1.0).contains(&self.p_s) {
            return Err(Error::config("p_s", "must lie in [0, 1]"));
        }
        if self.mobility == MobilityKind::Ring && self.edges < 2 {
            return Err(Error::config("edges", "ring mobility needs at least 2 edges"));
        }
        if self.mobility == MobilityKind::Matrix && self.matrix_file.is_none() {
            return Err(Error::config("matrix_file", "required for mobility = matrix"));
        }
        if self.mobility == MobilityKind::Trace && self.trace_file.is_none() {
            return Err(Error::config("trace_file", "required for mobility = trace"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed required"));
        }
        if self.l == 0 {
            return Err(Error::config("l", "must be at least 1"));
        }
        if !(self.separation > 0.0) {
            return Err(Error::config("separation", "must be positive"));
        }
        if self.model == TaskKind::Quadratic && (self.quad_dim == 0 || self.quad_samples == 0) {
            return Err(Error::config("quad_dim", "quadratic task needs quad_dim, quad_samples >= 1"));
        }
        if self.bounds && (self.epsilon_points == 0 || !(self.epsilon_min > 0.0) || self.epsilon_max < self.epsilon_min) {
            return Err(Error::config("epsilon_min", "need 0 < epsilon_min <= epsilon_max and epsilon_points >= 1"));
        }
        Ok(())
    }

    pub fn hfl_config(&self, seed: u64, scenario: Scenario) -> HflConfig {
        HflConfig {
            vehicles: self.vehicles,
            edges: self.edges,
            tau_l: self.tau_l,
            tau_e: self.tau_e,
            cloud_epochs: self.cloud_epochs,
            eta: self.eta,
            batch: self.batch,
            scenario,
            seed,
            workers: self.workers,
            empty_edge: self.empty_edge,
            track_virtual: self.track_cf,
            log: self.log_events,
        }
    }

    /// Logarithmic grid of `epsilon_points` values from `epsilon_min` to `epsilon_max`.
    pub fn epsilon_grid(&self) -> Vec<f64> {
        if self.epsilon_points == 1 {
            return vec![self.epsilon_min];
        }
        let (lo, hi) = (self.epsilon_min.ln(), self.epsilon_max.ln());
        (0..self.epsilon_points)
            .map(|i| (lo + (hi - lo) * i as f64 / (self.epsilon_points - 1) as f64).exp())
            .collect()
    }
}

fn bad(key: &str, line: usize, message: impl Into<String>) -> Error {
    Error::Config {
        key: key.into(),
        line: Some(line),
        message: message.into(),
    }
}

fn num<T: std::str::FromStr>(key: &str, line: usize, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| bad(key, line, format!("cannot parse {value:?}")))
}

fn list<T: std::str::FromStr>(key: &str, line: usize, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| num(key, line, s))
        .collect()
}

fn optional_path(value: &str, base: &Path) -> Option<PathBuf> {
    (!value.is_empty()).then(|| base.join(value))
}

/// Parse config text. Relative file paths are taken relative to `base`.
pub fn parse_config_str(text: &str, base: &Path) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    let mut seen = BTreeMap::new();
    let mut p_s_line = None;
    let mut hidden = None;
    let mut model = None;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| Error::Parse {
                line,
                message: format!("expected `key = value`, got {content:?}"),
            })?;
        let (key, value) = (key.trim(), value.trim());
        if let Some(first) = seen.insert(key.to_string(), line) {
            return Err(bad(key, line, format!("duplicate key (first set on line {first})")));
        }
        match key {
            "model" => model = Some((value.to_string(), line)),
            "hidden" => hidden = Some(list::<usize>(key, line, value)?),
            "classes" => cfg.classes = num(key, line, value)?,
            "dim" => cfg.dim = num(key, line, value)?,
            "per_class" => cfg.per_class = num(key, line, value)?,
            "test_per_class" => cfg.test_per_class = num(key, line, value)?,
            "separation" => cfg.separation = num(key, line, value)?,
            "train_file" => cfg.train_file = optional_path(value, base),
            "test_file" => cfg.test_file = optional_path(value, base),
            "quad_dim" => cfg.quad_dim = num(key, line, value)?,
            "quad_samples" => cfg.quad_samples = num(key, line, value)?,
            "quad_spread" => cfg.quad_spread = num(key, line, value)?,
            "quad_jitter" => cfg.quad_jitter = num(key, line, value)?,
            "partition" => {
                cfg.partition = match value {
                    "iid" => PartitionCase::Iid,
                    "local_niid" => PartitionCase::LocalNiid,
                    "edge_niid" => PartitionCase::EdgeNiid,
                    _ => return Err(bad(key, line, "expected iid, local_niid or edge_niid")),
                }
            }
            "l" => cfg.l = num(key, line, value)?,
            "vehicles" => cfg.vehicles = num(key, line, value)?,
            "edges" => cfg.edges = num(key, line, value)?,
            "tau_l" => cfg.tau_l = num(key, line, value)?,
            "tau_e" => cfg.tau_e = num(key, line, value)?,
            "cloud_epochs" => cfg.cloud_epochs = num(key, line, value)?,
            "eta" => cfg.eta = num(key, line, value)?,
            "batch_size" => {
                cfg.batch = if value == "full" {
                    BatchSize::Full
                } else {
                    BatchSize::Samples(num(key, line, value)?)
                }
            }
            "seeds" => cfg.seeds = list(key, line, value)?,
            "workers" => cfg.workers = num(key, line, value)?,
            "empty_edge" => {
                cfg.empty_edge = match value {
                    "carry_forward" => EmptyEdgePolicy::CarryForward,
                    "fail" => EmptyEdgePolicy::Fail,
                    _ => return Err(bad(key, line, "expected carry_forward or fail")),
                }
            }
            "log_events" => {
                cfg.log_events = match value {
                    "cloud" => LogLevel::Cloud,
                    "edge" => LogLevel::Edge,
                    "all" => LogLevel::All,
                    _ => return Err(bad(key, line, "expected cloud, edge or all")),
                }
            }
            "track_cf" => cfg.track_cf = num(key, line, value)?,
            "mobility" => {
                cfg.mobility = match value {
                    "static" => MobilityKind::Static,
                    "ring" => MobilityKind::Ring,
                    "matrix" => MobilityKind::Matrix,
                    "trace" => MobilityKind::Trace,
                    _ => return Err(bad(key, line, "expected static, ring, matrix or trace")),
                }
            }
            "p_s" => {
                cfg.p_s = num(key, line, value)?;
                p_s_line = Some(line);
            }
            "speed_mps" => cfg.speed_mps = (!value.is_empty()).then(|| num(key, line, value)).transpose()?,
            "side_length_m" => cfg.side_length_m = num(key, line, value)?,
            "interval_s" => cfg.interval_s = num(key, line, value)?,
            "sojourn_intercept" => cfg.sojourn_intercept = num(key, line, value)?,
            "sojourn_slope" => cfg.sojourn_slope = num(key, line, value)?,
            "matrix_file" => cfg.matrix_file = optional_path(value, base),
            "trace_file" => cfg.trace_file = optional_path(value, base),
            "output_dir" => cfg.output_dir = base.join(value),
            "bounds" => cfg.bounds = num(key, line, value)?,
            "bound_probes" => cfg.bound_probes = num(key, line, value)?,
            "epsilon_min" => cfg.epsilon_min = num(key, line, value)?,
            "epsilon_max" => cfg.epsilon_max = num(key, line, value)?,
            "epsilon_points" => cfg.epsilon_points = num(key, line, value)?,
            "edge_gap_rel_tol" => cfg.edge_gap_rel_tol = num(key, line, value)?,
            "ring_factor_form" => {
                cfg.ring_factor_power = match value {
                    "general" => false,
                    "power" => true,
                    _ => return Err(bad(key, line, "expected general or power")),
                }
            }
            "accuracy_targets" => cfg.accuracy_targets = list(key, line, value)?,
            "period_product" => cfg.period_product = num(key, line, value)?,
            _ => return Err(bad(key, line, "unknown key")),
        }
    }
    if let Some((value, line)) = model {
        cfg.model = match value.as_str() {
            "softmax" => TaskKind::Softmax,
            "mlp" => TaskKind::Mlp {
                hidden: hidden.clone().unwrap_or_else(|| vec![32]),
            },
            "quadratic" => TaskKind::Quadratic,
            _ => return Err(bad("model", line, "expected softmax, mlp or quadratic")),
        };
    }
    if hidden.is_some_and(|h| !h.is_empty()) && !matches!(cfg.model, TaskKind::Mlp { .. }) {
        return Err(bad("hidden", seen["hidden"], "only valid with model = mlp"));
    }
    if let (Some(speed), Some(line)) = (cfg.speed_mps, p_s_line) {
        let given = cfg.p_s;
        let mut derived = cfg.clone();
        derived.resolve()?;
        if derived.p_s != given {
            return Err(bad(
                "p_s",
                line,
                format!("conflicts with speed_mps = {speed}, which gives p_s = {}", derived.p_s),
            ));
        }
    }
    let mobility_explicit = seen.contains_key("mobility");
    if p_s_line.is_some() && !mobility_explicit {
        cfg.mobility = MobilityKind::Ring;
    }
    cfg.resolve().map_err(|e| match e {
        Error::Config { key, line: None, message } => {
            let line = seen.get(&key).copied();
            Error::Config { key, line, message }
        }
        other => other,
    })?;
    Ok(cfg)
}

/// Read and validate a config file.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)?;
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty());
    let base = std::path::absolute(parent.unwrap_or(Path::new(".")))?;
    parse_config_str(&text, &base)
}

/// Training/test data, model, and partition for one seed.
#[derive(Debug, Clone)]
pub struct Task {
    pub spec: ModelSpec,
    pub train: LabeledDataset,
    pub test: Option<LabeledDataset>,
    pub plan: PartitionPlan,
}

fn read_dataset(path: &Path, classes: Option<usize>) -> Result<LabeledDataset> {
    LabeledDataset::read_csv(fs::File::open(path)?, classes)
}

/// Build the dataset, model and partition for `seed`.
pub fn build_task(cfg: &ExperimentConfig, seed: u64) -> Result<Task> {
    if cfg.model == TaskKind::Quadratic {
        return Ok(quadratic_task(cfg, seed));
    }
    let train = match &cfg.train_file {
        Some(p) => read_dataset(p, None)?,
        None => generate_synthetic_split(cfg.classes, cfg.dim, cfg.per_class, cfg.separation, seed, 0)?,
    };
    let test = match &cfg.test_file {
        Some(p) => read_dataset(p, Some(train.num_classes()))?,
        None => generate_synthetic_split(cfg.classes, cfg.dim, cfg.test_per_class, cfg.separation, seed, 1)?,
    };
    let plan = match cfg.partition {
        PartitionCase::Iid => partition_iid(&train, cfg.vehicles, seed)?,
        PartitionCase::LocalNiid => partition_local_niid(&train, cfg.vehicles, cfg.l, seed)?,
        PartitionCase::EdgeNiid => partition_edge_niid(&train, cfg.edges, cfg.vehicles, cfg.l, seed)?,
    };
    // Evaluate only on classes some vehicle actually holds.
    let mut present: Vec<usize> = plan.shards.iter().flatten().map(|&i| train.labels()[i]).collect();
    present.sort_unstable();
    present.dedup();
    let test = test.restrict_to_classes(&present);
    let spec = match &cfg.model {
        TaskKind::Softmax => ModelSpec::SoftmaxLinear {
            input_dim: train.input_dim(),
            num_classes: train.num_classes(),
        },
        TaskKind::Mlp { hidden } => ModelSpec::Mlp {
            input_dim: train.input_dim(),
            hidden: hidden.clone(),
            num_classes: train.num_classes(),
        },
        TaskKind::Quadratic => unreachable!(),
    };
    Ok(Task {
        spec,
        train,
        test: Some(test),
        plan,
    })
}

/// One target per vehicle; `quad_samples` copies of its index form its shard.
/// Vehicles start on edge `m·N/M`. With `edge_niid` targets cluster around a
/// random centre per edge; with `local_niid` every target is independent;
/// with `iid` all targets coincide.
fn quadratic_task(cfg: &ExperimentConfig, seed: u64) -> Task {
    let (m, n, d) = (cfg.vehicles, cfg.edges, cfg.quad_dim);
    let mut rng = stream(seed, Domain::Dataset, 2, 0);
    let mut gaussian = |scale: f64| -> Vec<f64> {
        (0..d)
            .map(|_| scale * Distribution::<f64>::sample(&StandardNormal, &mut rng))
            .collect()
    };
    let assignment: Vec<usize> = (0..m).map(|v| v * n / m).collect();
    let targets: Vec<ParamVector> = match cfg.partition {
        PartitionCase::Iid => vec![ParamVector::from_vec(gaussian(cfg.quad_spread)); m],
        PartitionCase::LocalNiid => (0..m).map(|_| ParamVector::from_vec(gaussian(cfg.quad_spread))).collect(),
        PartitionCase::EdgeNiid => {
            let centres: Vec<Vec<f64>> = (0..n).map(|_| gaussian(cfg.quad_spread)).collect();
            assignment
                .iter()
                .map(|&e| {
                    let jitter = gaussian(cfg.quad_jitter);
                    ParamVector::from_vec(centres[e].iter().zip(jitter).map(|(c, j)| c + j).collect())
                })
                .collect()
        }
    };
    let s = cfg.quad_samples;
    let labels: Vec<usize> = (0..m).flat_map(|t| std::iter::repeat_n(t, s)).collect();
    let train = LabeledDataset::new(vec![], labels, 0, m).expect("labels index targets");
    Task {
        spec: ModelSpec::MeanQuadratic { targets },
        train,
        test: None,
        plan: PartitionPlan {
            shards: (0..m).map(|v| (v * s..(v + 1) * s).collect()).collect(),
            edge_assignment: Some(assignment),
            unassigned_classes: vec![],
        },
    }
}

/// Movement model for a run and its mixing rate (`None` when it never mixes).
pub fn build_scenario(cfg: &ExperimentConfig) -> Result<(Scenario, Option<f64>)> {
    let mixing = |q: &TransitionMatrix| lambda_star(q).ok();
    Ok(match cfg.mobility {
        MobilityKind::Static => (Scenario::Static, None),
        MobilityKind::Ring => {
            let q = ring_transition(RingParams::new(cfg.edges, cfg.p_s)?)?;
            let lam = mixing(&q);
            (Scenario::Markov(q), lam)
        }
        MobilityKind::Matrix => {
            let path = cfg.matrix_file.as_ref().expect("validated");
            let q = TransitionMatrix::parse(&fs::read_to_string(path)?)?;
            let lam = mixing(&q);
            (Scenario::Markov(q), lam)
        }
        MobilityKind::Trace => {
            let trace = load_trace(cfg.trace_file.as_ref().expect("validated"), cfg.edges)?;
            let lam = empirical_transition(&trace).ok().as_ref().and_then(mixing);
            (Scenario::Trace(trace), lam)
        }
    })
}

/// One metrics CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub seed: u64,
    pub cloud_epoch: usize,
    pub edge_round: usize,
    pub tau: usize,
    pub event: String,
    pub test_acc: Option<f64>,
    pub train_loss: f64,
    pub cf_diff: f64,
    pub avg_prob_diff: f64,
    pub theta_min: f64,
    pub theta_max: f64,
}

impl MetricsRow {
    pub fn from_record(seed: u64, r: &RoundRecord) -> Self {
        Self {
            seed,
            cloud_epoch: r.cloud_epoch,
            edge_round: r.edge_round,
            tau: r.tau,
            event: r.event.as_str().into(),
            test_acc: r.test_accuracy,
            train_loss: r.train_loss,
            cf_diff: r.cf_difference,
            avg_prob_diff: r.avg_prob_difference,
            theta_min: r.theta.iter().copied().fold(f64::INFINITY, f64::min),
            theta_max: r.theta.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

/// Write rows with the fixed header.
pub fn emit_metrics<W: std::io::Write>(rows: &[MetricsRow], writer: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    w.write_record(METRICS_HEADER)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(String::from).collect();
    if header != METRICS_HEADER {
        return Err(Error::Parse {
            line: 1,
            message: format!("unexpected metrics header {header:?}"),
        });
    }
    Ok(reader.deserialize().collect::<std::result::Result<Vec<MetricsRow>, _>>()?)
}

/// First cloud epoch whose test accuracy reaches each target, or `-1`.
///
/// This is the first crossing: a later dip below the target does not undo it.
pub fn epochs_to_accuracy(rows: &[MetricsRow], targets: &[f64]) -> Vec<i64> {
    targets
        .iter()
        .map(|&t| {
            rows.iter()
                .filter(|r| r.event == Event::CloudAgg.as_str())
                .find(|r| r.test_acc.is_some_and(|a| a >= t))
                .map_or(-1, |r| r.cloud_epoch as i64)
        })
        .collect()
}

/// Test accuracy at the last cloud aggregation.
pub fn final_accuracy(rows: &[MetricsRow]) -> Option<f64> {
    rows.iter()
        .rev()
        .find(|r| r.event == Event::CloudAgg.as_str())
        .and_then(|r| r.test_acc)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StoredCheckpoint {
    cloud_epoch: usize,
    cloud_model: Vec<f64>,
    v_tilde: Vec<f64>,
}

fn write_checkpoints(path: &Path, checkpoints: &[Checkpoint]) -> Result<()> {
    let stored: Vec<StoredCheckpoint> = checkpoints
        .iter()
        .map(|c| StoredCheckpoint {
            cloud_epoch: c.cloud_epoch,
            cloud_model: c.cloud_model.as_slice().to_vec(),
            v_tilde: c.v_tilde.as_slice().to_vec(),
        })
        .collect();
    fs::write(path, serde_json::to_string(&stored)?)?;
    Ok(())
}

pub fn read_checkpoints(path: &Path) -> Result<Vec<Checkpoint>> {
    let stored: Vec<StoredCheckpoint> = serde_json::from_str(&fs::read_to_string(path)?)?;
    Ok(stored
        .into_iter()
        .map(|c| Checkpoint {
            cloud_epoch: c.cloud_epoch,
            cloud_model: ParamVector::from_vec(c.cloud_model),
            v_tilde: ParamVector::from_vec(c.v_tilde),
        })
        .collect())
}

fn report_settings(cfg: &ExperimentConfig, lambda: Option<f64>) -> ReportSettings {
    ReportSettings {
        case: cfg.partition.factor_case(),
        eta: cfg.eta,
        tau_l: cfg.tau_l,
        tau_e: cfg.tau_e,
        lambda_star: lambda,
        probes: cfg.bound_probes,
        epsilon_grid: cfg.epsilon_grid(),
        edge_gap_rel_tol: cfg.edge_gap_rel_tol,
        ring_sojourn: (cfg.mobility == MobilityKind::Ring).then_some(cfg.p_s),
        ring_factor_power: cfg.ring_factor_power,
    }
}

pub fn membership_path(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("membership_seed{seed}.csv"))
}

pub fn checkpoints_path(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("checkpoints_seed{seed}.json"))
}

pub fn bounds_path(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("bounds_seed{seed}.json"))
}

/// Evaluate and write the bound report for one seed from files in `dir`.
pub fn write_bound_report(cfg: &ExperimentConfig, dir: &Path, seed: u64, rows: &[MetricsRow]) -> Result<PathBuf> {
    let task = build_task(cfg, seed)?;
    let (_, lambda) = build_scenario(cfg)?;
    let membership = TrajectoryTrace::parse(fs::File::open(membership_path(dir, seed))?, cfg.edges)?;
    let checkpoints = read_checkpoints(&checkpoints_path(dir, seed))?;
    let cf: Vec<f64> = rows
        .iter()
        .filter(|r| r.seed == seed && r.event == Event::CloudAgg.as_str())
        .map(|r| r.cf_diff)
        .collect();
    let report = bound_report(
        &task.spec,
        &task.train,
        &task.plan,
        &membership,
        &checkpoints,
        cfg.track_cf.then_some(cf.as_slice()),
        &report_settings(cfg, lambda),
    )?;
    let path = bounds_path(dir, seed);
    fs::write(&path, report.to_json()?)?;
    Ok(path)
}

/// Outcome of one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedSummary {
    pub seed: u64,
    pub final_accuracy: Option<f64>,
    pub final_loss: f64,
    pub epochs_to_target: Vec<i64>,
}

/// Run every seed of `cfg` and write the run directory.
///
/// On failure the metrics logged so far are flushed, an `ERROR` file is
/// written, and the error is returned.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<SeedSummary>> {
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir)?;
    let marker = dir.join("ERROR");
    if marker.exists() {
        fs::remove_file(&marker)?;
    }
    fs::write(dir.join("resolved_config.txt"), cfg.to_text())?;
    let mut writer = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(dir.join("metrics.csv"))?;
    writer.write_record(METRICS_HEADER)?;

    let mut summaries = Vec::new();
    let mut all_rows = Vec::new();
    let mut outcome = Ok(());
    for &seed in &cfg.seeds {
        info!("seed {seed}: starting");
        match run_seed(cfg, seed, &mut writer, &mut all_rows) {
            Ok(summary) => summaries.push(summary),
            Err(e) => {
                outcome = Err(e);
                break;
            }
        }
    }
    writer.flush()?;
    drop(writer);
    if let Err(e) = outcome {
        fs::write(&marker, format!("{e}\n"))?;
        return Err(e);
    }
    if cfg.bounds {
        for &seed in &cfg.seeds {
            if let Err(e) = write_bound_report(cfg, dir, seed, &all_rows) {
                warn!("seed {seed}: bound report failed: {e}");
                fs::write(dir.join(format!("bounds_seed{seed}.error")), format!("{e}\n"))?;
            }
        }
    }
    Ok(summaries)
}

fn run_seed(
    cfg: &ExperimentConfig,
    seed: u64,
    writer: &mut csv::Writer<fs::File>,
    all_rows: &mut Vec<MetricsRow>,
) -> Result<SeedSummary> {
    let task = build_task(cfg, seed)?;
    let (scenario, _) = build_scenario(cfg)?;
    let hfl = cfg.hfl_config(seed, scenario);
    let start = all_rows.len();
    let mut sink = |record: &RoundRecord| -> Result<()> {
        let row = MetricsRow::from_record(seed, record);
        writer.serialize(&row)?;
        if record.event == Event::CloudAgg {
            writer.flush()?;
        }
        all_rows.push(row);
        Ok(())
    };
    let output = run_mob_hierfavg(&hfl, &task.plan, &task.spec, &task.train, task.test.as_ref(), &mut sink)?;

    let dir = &cfg.output_dir;
    let mut trace = Vec::new();
    output.membership.write(&mut trace)?;
    fs::write(membership_path(dir, seed), trace)?;
    write_checkpoints(&checkpoints_path(dir, seed), &output.checkpoints)?;

    let rows = &all_rows[start..];
    Ok(SeedSummary {
        seed,
        final_accuracy: final_accuracy(rows),
        final_loss: rows.last().map_or(f64::NAN, |r| r.train_loss),
        epochs_to_target: epochs_to_accuracy(rows, &cfg.accuracy_targets),
    })
}

/// Re-evaluate bound reports for every seed of a finished run directory.
pub fn rebound(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut cfg = parse_config(&dir.join("resolved_config.txt"))?;
    cfg.output_dir = dir.to_path_buf();
    let rows = read_metrics(&dir.join("metrics.csv"))?;
    cfg.seeds
        .iter()
        .map(|&seed| write_bound_report(&cfg, dir, seed, &rows))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Speed,
    TauE,
    TauL,
    Edges,
    Vehicles,
    Sojourn,
}

impl SweepAxis {
    pub fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "speed" => SweepAxis::Speed,
            "tau_e" => SweepAxis::TauE,
            "tau_l" => SweepAxis::TauL,
            "N" => SweepAxis::Edges,
            "M" => SweepAxis::Vehicles,
            "p_s" => SweepAxis::Sojourn,
            _ => {
                return Err(Error::config(
                    "axis",
                    format!("unknown axis {name:?}; expected speed, tau_e, tau_l, N, M or p_s"),
                ))
            }
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Speed => "speed",
            SweepAxis::TauE => "tau_e",
            SweepAxis::TauL => "tau_l",
            SweepAxis::Edges => "N",
            SweepAxis::Vehicles => "M",
            SweepAxis::Sojourn => "p_s",
        }
    }
}

fn whole(axis: SweepAxis, value: f64) -> Result<usize> {
    if value < 1.0 || value.fract() != 0.0 {
        return Err(Error::config(axis.name(), format!("{value} is not a positive integer")));
    }
    Ok(value as usize)
}

fn complement(product: usize, axis: SweepAxis, value: usize) -> Result<usize> {
    if !product.is_multiple_of(value) {
        return Err(Error::config(axis.name(), format!("{value} does not divide period_product = {product}")));
    }
    Ok(product / value)
}

/// `cfg` with one axis set to `value`.
pub fn apply_axis(cfg: &ExperimentConfig, axis: SweepAxis, value: f64) -> Result<ExperimentConfig> {
    let mut out = cfg.clone();
    match axis {
        SweepAxis::Speed => {
            out.speed_mps = Some(value);
            out.mobility = MobilityKind::Ring;
        }
        SweepAxis::Sojourn => {
            out.speed_mps = None;
            out.p_s = value;
            out.mobility = MobilityKind::Ring;
        }
        SweepAxis::TauL => {
            out.tau_l = whole(axis, value)?;
            if cfg.period_product > 0 {
                out.tau_e = complement(cfg.period_product, axis, out.tau_l)?;
            }
        }
        SweepAxis::TauE => {
            out.tau_e = whole(axis, value)?;
            if cfg.period_product > 0 {
                out.tau_l = complement(cfg.period_product, axis, out.tau_e)?;
            }
        }
        SweepAxis::Edges => out.edges = whole(axis, value)?,
        SweepAxis::Vehicles => out.vehicles = whole(axis, value)?,
    }
    out.resolve()?;
    Ok(out)
}

/// One summary line of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub status: String,
    pub runs: usize,
    pub mean_final_acc: Option<f64>,
    pub std_final_acc: Option<f64>,
    /// Per target, the epochs-to-target of each seed.
    pub epochs_to_target: Vec<Vec<i64>>,
}

/// Summarize one run directory from its metrics file alone.
pub fn summarize_metrics(path: &Path, targets: &[f64]) -> Result<SweepRow> {
    let rows = read_metrics(path)?;
    let mut seeds: Vec<u64> = rows.iter().map(|r| r.seed).collect();
    seeds.dedup();
    let per_seed: Vec<Vec<MetricsRow>> = seeds
        .iter()
        .map(|s| rows.iter().filter(|r| r.seed == *s).cloned().collect())
        .collect();
    let finals: Vec<f64> = per_seed.iter().filter_map(|r| final_accuracy(r)).collect();
    let (mean, std) = if finals.is_empty() {
        (None, None)
    } else {
        let n = finals.len() as f64;
        let mean = finals.iter().sum::<f64>() / n;
        let var = if finals.len() > 1 {
            finals.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        (Some(mean), Some(var.sqrt()))
    };
    let epochs = targets
        .iter()
        .map(|&t| per_seed.iter().map(|r| epochs_to_accuracy(r, &[t])[0]).collect())
        .collect();
    Ok(SweepRow {
        value: f64::NAN,
        status: "ok".into(),
        runs: per_seed.len(),
        mean_final_acc: mean,
        std_final_acc: std,
        epochs_to_target: epochs,
    })
}

fn value_label(value: f64) -> String {
    value.to_string()
}

/// Run every axis value into its own subdirectory of `cfg.output_dir` and
/// write `sweep_<axis>.csv` there. A failing point is recorded in its row
/// and the sweep moves on.
pub fn sweep(cfg: &ExperimentConfig, axis: SweepAxis, values: &[f64]) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::config("values", "at least one value required"));
    }
    let base = &cfg.output_dir;
    fs::create_dir_all(base)?;
    let mut rows = Vec::with_capacity(values.len());
    for &value in values {
        let dir = base.join(format!("{}_{}", axis.name(), value_label(value)));
        let point = apply_axis(cfg, axis, value).and_then(|mut point| {
            point.output_dir = dir.clone();
            run_experiment(&point)
        });
        let row = match point {
            Ok(_) => SweepRow {
                value,
                ..summarize_metrics(&dir.join("metrics.csv"), &cfg.accuracy_targets)?
            },
            Err(e) => {
                warn!("sweep point {} = {value} failed: {e}", axis.name());
                SweepRow {
                    value,
                    status: format!("error: {e}").replace(['\n', ','], " "),
                    runs: 0,
                    mean_final_acc: None,
                    std_final_acc: None,
                    epochs_to_target: vec![vec![]; cfg.accuracy_targets.len()],
                }
            }
        };
        rows.push(row);
    }
    write_sweep_summary(&base.join(format!("sweep_{}.csv", axis.name())), axis, &cfg.accuracy_targets, &rows)?;
    Ok(rows)
}

pub fn write_sweep_summary(path: &Path, axis: SweepAxis, targets: &[f64], rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec![
        "axis".to_string(),
        "value".into(),
        "status".into(),
        "runs".into(),
        "mean_final_acc".into(),
        "std_final_acc".into(),
    ];
    header.extend(targets.iter().map(|t| format!("epochs_to_{t}")));
    w.write_record(&header)?;
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    for row in rows {
        let mut record = vec![
            axis.name().to_string(),
            value_label(row.value),
            row.status.clone(),
            row.runs.to_string(),
            opt(row.mean_final_acc),
            opt(row.std_final_acc),
        ];
        record.extend(
            row.epochs_to_target
                .iter()
                .map(|e| e.iter().map(i64::to_string).collect::<Vec<_>>().join(";")),
        );
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<ExperimentConfig> {
        parse_config_str(text, Path::new(""))
    }

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = parse("").unwrap();
        assert_eq!((cfg.tau_l, cfg.tau_e, cfg.vehicles, cfg.edges), (6, 10, 32, 4));
        assert_eq!(cfg.eta, 0.1);
        assert_eq!((cfg.classes, cfg.dim, cfg.per_class, cfg.cloud_epochs), (8, 16, 500, 60));
        assert_eq!(cfg.model, TaskKind::Softmax);
        assert_eq!(cfg.mobility, MobilityKind::Static);
    }

    #[test]
    fn constraint_errors_name_key_and_line() {
        match parse("# periods\ntau_l = 0\n") {
            Err(Error::Config { key, line, .. }) => {
                assert_eq!(key, "tau_l");
                assert_eq!(line, Some(2));
            }
            other => panic!("{other:?}"),
        }
        match parse("eta = 0.1\nwarp = 9\n") {
            Err(Error::Config { key, line, message }) => {
                assert_eq!((key.as_str(), line), ("warp", Some(2)));
                assert!(message.contains("unknown"));
            }
            other => panic!("{other:?}"),
        }
        match parse("eta = fast\n") {
            Err(Error::Config { key, line, .. }) => assert_eq!((key.as_str(), line), ("eta", Some(1))),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse("just words\n"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse("eta = 0.1\neta = 0.2\n"), Err(Error::Config { line: Some(2), .. })));
    }

    #[test]
    fn speed_sets_sojourn() {
        let cfg = parse("speed_mps = 30\n").unwrap();
        assert!((cfg.p_s - 0.97).abs() < 1e-15);
        assert_eq!(cfg.mobility, MobilityKind::Ring);
        assert!(cfg.to_text().contains("p_s = 0.97"));
        assert!(parse("speed_mps = 30\np_s = 0.5\n").is_err());
    }

    #[test]
    fn resolved_text_round_trips() {
        let cfg = parse(
            "model = mlp\nhidden = 8,4\npartition = edge_niid\nl = 2\nspeed_mps = 6\nseeds = 3,4\nbatch_size = full\naccuracy_targets = 0.5,0.7\n",
        )
        .unwrap();
        let again = parse(&cfg.to_text()).unwrap();
        assert_eq!(cfg, again);
        let defaults = parse("").unwrap();
        assert_eq!(parse(&defaults.to_text()).unwrap(), defaults);
    }

    #[test]
    fn epsilon_grid_is_logarithmic() {
        let cfg = parse("epsilon_min = 0.01\nepsilon_max = 1\nepsilon_points = 3\n").unwrap();
        let grid = cfg.epsilon_grid();
        assert_eq!(grid.len(), 3);
        assert!((grid[1] - 0.1).abs() < 1e-12);
    }

    fn row(epoch: usize, acc: f64) -> MetricsRow {
        MetricsRow {
            seed: 0,
            cloud_epoch: epoch,
            edge_round: 10,
            tau: epoch * 60,
            event: "cloud_agg".into(),
            test_acc: Some(acc),
            train_loss: 1.0,
            cf_diff: 0.0,
            avg_prob_diff: 0.0,
            theta_min: 0.25,
            theta_max: 0.25,
        }
    }

    #[test]
    fn epochs_to_accuracy_examples() {
        let monotone: Vec<MetricsRow> = (1..=10).map(|k| row(k, k as f64 * 0.07)).collect();
        assert_eq!(epochs_to_accuracy(&monotone, &[0.5]), vec![8]);
        let crossing: Vec<MetricsRow> = (1..=10).map(|k| row(k, if k >= 7 { 0.6 } else { 0.3 })).collect();
        assert_eq!(epochs_to_accuracy(&crossing, &[0.5, 0.9]), vec![7, -1]);
        let noisy = vec![row(1, 0.2), row(2, 0.55), row(3, 0.4), row(4, 0.6)];
        assert_eq!(epochs_to_accuracy(&noisy, &[0.5]), vec![2]);
    }

    #[test]
    fn sweep_axes_apply() {
        let cfg = parse("period_product = 30\n").unwrap();
        let p = apply_axis(&cfg, SweepAxis::TauL, 5.0).unwrap();
        assert_eq!((p.tau_l, p.tau_e), (5, 6));
        assert!(apply_axis(&cfg, SweepAxis::TauL, 7.0).is_err());
        let p = apply_axis(&cfg, SweepAxis::Speed, 15.0).unwrap();
        assert!((p.p_s - 0.985).abs() < 1e-12);
        assert!(SweepAxis::parse("colour").is_err());
    }

    #[test]
    fn quadratic_task_layout() {
        let cfg = parse("model = quadratic\npartition = edge_niid\nvehicles = 8\nedges = 4\nquad_jitter = 0\n").unwrap();
        let task = build_task(&cfg, 1).unwrap();
        let ModelSpec::MeanQuadratic { targets } = &task.spec else {
            panic!()
        };
        assert_eq!(targets.len(), 8);
        assert_eq!(targets[0], targets[1]);
        assert_ne!(targets[1], targets[2]);
        assert_eq!(task.plan.edge_assignment, Some(vec![0, 0, 1, 1, 2, 2, 3, 3]));
    }
}
