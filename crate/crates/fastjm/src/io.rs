//! Data ingestion, validation, and run configuration.
//!
//! Two CSV files describe a dataset: a longitudinal file with one row per
//! measurement (`id,time,y,<covariates...>`) and a survival file with one
//! row per subject (`id,obs_time,cause,<covariates...>`). A JSON run
//! configuration names which columns feed the fixed, random, and survival
//! designs. Ingestion is a single streaming pass per file; rows that violate
//! the schema are reported with their file and line context.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::bench::BenchPlan;
use crate::em::{ConvergenceMetric, EmConfig, KernelBackend, QuadMode};
use crate::error::{Error, Result};
use crate::model::{Dataset, LongitudinalObs, Subject};
use crate::simulate::SimConfig;

/// Column lists for the three design matrices. `time` refers to the
/// longitudinal file's time column; every other name must be a covariate
/// column of the respective file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub fixed: Vec<String>,
    #[serde(default = "default_true")]
    pub fixed_intercept: bool,
    pub random: Vec<String>,
    #[serde(default = "default_true")]
    pub random_intercept: bool,
    pub survival: Vec<String>,
    pub n_causes: usize,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmBlock {
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_metric")]
    pub metric: ConvergenceMetric,
    #[serde(default = "default_backend")]
    pub backend: KernelBackend,
}

fn default_tol() -> f64 {
    1e-4
}

fn default_max_iter() -> usize {
    300
}

fn default_metric() -> ConvergenceMetric {
    ConvergenceMetric::RelativeParamChange
}

fn default_backend() -> KernelBackend {
    KernelBackend::Scan
}

impl Default for EmBlock {
    fn default() -> Self {
        EmBlock {
            tol: default_tol(),
            max_iter: default_max_iter(),
            metric: default_metric(),
            backend: default_backend(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuadratureBlock {
    #[serde(default = "default_mode")]
    pub mode: QuadMode,
    /// Defaults to 6 in pseudo-adaptive mode and 20 in standard mode.
    #[serde(default)]
    pub n_q: Option<usize>,
}

fn default_mode() -> QuadMode {
    QuadMode::PseudoAdaptive
}

impl Default for QuadratureBlock {
    fn default() -> Self {
        QuadratureBlock {
            mode: default_mode(),
            n_q: None,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SeBlock {
    #[serde(default = "default_true")]
    pub enabled: bool,
}

/// The full run configuration; unused blocks may be omitted.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub em: EmBlock,
    #[serde(default)]
    pub quadrature: QuadratureBlock,
    #[serde(default)]
    pub se: Option<SeBlock>,
    #[serde(default)]
    pub sim: Option<SimConfig>,
    #[serde(default)]
    pub bench: Option<BenchPlan>,
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            context: format!("cannot read config {}: {e}", path.display()),
        })?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::Validation {
            context: format!("invalid config {}: {e}", path.display()),
        })?;
        Ok(cfg)
    }

    pub fn em_config(&self) -> EmConfig {
        let mode = self.quadrature.mode;
        let n_q = self.quadrature.n_q.unwrap_or(match mode {
            QuadMode::PseudoAdaptive => 6,
            QuadMode::Standard => 20,
        });
        EmConfig {
            quad_mode: mode,
            n_q,
            tol: self.em.tol,
            max_iter: self.em.max_iter,
            metric: self.em.metric,
            backend: self.em.backend,
        }
    }

    pub fn se_enabled(&self) -> bool {
        self.se.as_ref().map_or(true, |s| s.enabled)
    }

    pub fn require_model(&self) -> Result<&ModelConfig> {
        self.model
            .as_ref()
            .ok_or_else(|| Error::validation("config is missing the `model` block"))
    }

    pub fn require_sim(&self) -> Result<&SimConfig> {
        self.sim
            .as_ref()
            .ok_or_else(|| Error::validation("config is missing the `sim` block"))
    }
}

struct CsvTable {
    /// Column name -> index.
    columns: HashMap<String, usize>,
    rows: Vec<(u64, Vec<String>)>,
}

fn read_csv(path: &Path, required: &[&str]) -> Result<CsvTable> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Io {
            context: format!("cannot open {}: {e}", path.display()),
        })?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Io {
            context: format!("{}: {e}", path.display()),
        })?
        .clone();
    let columns: HashMap<String, usize> = headers
        .iter()
        .enumerate()
        .map(|(i, h)| (h.to_string(), i))
        .collect();
    for name in required {
        if !columns.contains_key(*name) {
            return Err(Error::validation(format!(
                "{}: missing required column `{name}`",
                path.display()
            )));
        }
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Io {
            context: format!("{}: {e}", path.display()),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        rows.push((line, record.iter().map(|s| s.to_string()).collect()));
    }
    Ok(CsvTable { columns, rows })
}

fn parse_field(table: &CsvTable, row: &(u64, Vec<String>), col: usize, what: &str, path: &Path) -> Result<f64> {
    let _ = table;
    row.1[col].parse::<f64>().map_err(|_| {
        Error::validation(format!(
            "{} line {}: non-numeric {what} `{}`",
            path.display(),
            row.0,
            row.1[col]
        ))
    })
}

fn design_columns(
    table: &CsvTable,
    names: &[String],
    path: &Path,
) -> Result<Vec<usize>> {
    names
        .iter()
        .map(|n| {
            table.columns.get(n).copied().ok_or_else(|| {
                Error::validation(format!(
                    "{}: design references missing column `{n}`",
                    path.display()
                ))
            })
        })
        .collect()
}

/// Assembles a validated dataset from the two CSV files.
///
/// Longitudinal rows with `time > obs_time` are an error unless
/// `drop_post_event` opts into silently dropping them.
pub fn ingest(
    longitudinal: &Path,
    survival: &Path,
    config: &RunConfig,
    drop_post_event: bool,
) -> Result<Dataset> {
    let model = config.require_model()?;
    if model.n_causes < 1 {
        return Err(Error::validation("model.n_causes must be >= 1"));
    }
    let long = read_csv(longitudinal, &["id", "time", "y"])?;
    let surv = read_csv(survival, &["id", "obs_time", "cause"])?;

    let fixed_cols = design_columns(&long, &model.fixed, longitudinal)?;
    let random_cols = design_columns(&long, &model.random, longitudinal)?;
    let surv_cols = design_columns(&surv, &model.survival, survival)?;

    // Survival file defines the subjects and their order.
    let id_col = surv.columns["id"];
    let time_col = surv.columns["obs_time"];
    let cause_col = surv.columns["cause"];
    let mut order: Vec<String> = Vec::new();
    let mut subjects: HashMap<String, (f64, usize, DVector<f64>)> = HashMap::new();
    for row in &surv.rows {
        let id = row.1[id_col].clone();
        if subjects.contains_key(&id) {
            return Err(Error::validation(format!(
                "{} line {}: duplicate subject id `{id}`",
                survival.display(),
                row.0
            )));
        }
        let obs_time = parse_field(&surv, row, time_col, "obs_time", survival)?;
        let cause_raw = parse_field(&surv, row, cause_col, "cause", survival)?;
        let cause = cause_raw as usize;
        if cause_raw.fract() != 0.0 || cause > model.n_causes {
            return Err(Error::validation(format!(
                "{} line {}: cause `{}` out of range 0..={}",
                survival.display(),
                row.0,
                row.1[cause_col],
                model.n_causes
            )));
        }
        let covs = surv_cols
            .iter()
            .map(|&c| parse_field(&surv, row, c, "covariate", survival))
            .collect::<Result<Vec<f64>>>()?;
        order.push(id.clone());
        subjects.insert(id, (obs_time, cause, DVector::from_vec(covs)));
    }

    // Longitudinal rows grouped per subject, duplicate (id, time) rejected.
    let lid_col = long.columns["id"];
    let ltime_col = long.columns["time"];
    let y_col = long.columns["y"];
    let mut obs_map: HashMap<String, Vec<(f64, LongitudinalObs, u64)>> = HashMap::new();
    let mut seen_times: HashMap<(String, u64), u64> = HashMap::new();
    let mut post_event: Vec<String> = Vec::new();
    for row in &long.rows {
        let id = row.1[lid_col].clone();
        let Some(&(obs_time, _, _)) = subjects.get(&id).map(|v| v) else {
            return Err(Error::validation(format!(
                "{} line {}: subject `{id}` does not appear in the survival file",
                longitudinal.display(),
                row.0
            )));
        };
        let time = parse_field(&long, row, ltime_col, "time", longitudinal)?;
        if !(time.is_finite() && time >= 0.0) {
            return Err(Error::validation(format!(
                "{} line {}: time must be finite and nonnegative",
                longitudinal.display(),
                row.0
            )));
        }
        let key = (id.clone(), time.to_bits());
        if let Some(first) = seen_times.get(&key) {
            return Err(Error::validation(format!(
                "{} line {}: duplicate (id, time) pair `{id}`, {time} (first seen at line {first})",
                longitudinal.display(),
                row.0
            )));
        }
        seen_times.insert(key, row.0);
        if time > obs_time {
            if drop_post_event {
                continue;
            }
            post_event.push(format!("line {} (id `{id}`, time {time})", row.0));
            continue;
        }
        let y = parse_field(&long, row, y_col, "response", longitudinal)?;
        let mut fixed = Vec::with_capacity(fixed_cols.len() + 1);
        if model.fixed_intercept {
            fixed.push(1.0);
        }
        for &c in &fixed_cols {
            fixed.push(parse_field(&long, row, c, "covariate", longitudinal)?);
        }
        let mut random = Vec::with_capacity(random_cols.len() + 1);
        if model.random_intercept {
            random.push(1.0);
        }
        for &c in &random_cols {
            random.push(parse_field(&long, row, c, "covariate", longitudinal)?);
        }
        let obs = LongitudinalObs::new(
            time,
            y,
            DVector::from_vec(fixed),
            DVector::from_vec(random),
        )?;
        obs_map.entry(id).or_default().push((time, obs, row.0));
    }
    if !post_event.is_empty() {
        return Err(Error::validation(format!(
            "{}: {} longitudinal rows have time > obs_time (pass --drop-post-event to drop them): {}",
            longitudinal.display(),
            post_event.len(),
            post_event.join("; ")
        )));
    }

    let p = fixed_cols.len() + usize::from(model.fixed_intercept);
    let q = random_cols.len() + usize::from(model.random_intercept);
    let p2 = surv_cols.len();
    let built: Vec<Subject> = order
        .iter()
        .map(|id| {
            let (obs_time, cause, covs) = subjects.remove(id).unwrap();
            let mut obs = obs_map.remove(id).unwrap_or_default();
            obs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            Subject {
                id: id.clone(),
                obs: obs.into_iter().map(|(_, o, _)| o).collect(),
                surv_covariates: covs,
                obs_time,
                cause,
            }
        })
        .collect();

    let mut ds = Dataset::new(built, model.n_causes, p, q, p2)?;
    let mut fixed_names = Vec::new();
    if model.fixed_intercept {
        fixed_names.push("intercept".to_string());
    }
    fixed_names.extend(model.fixed.iter().cloned());
    let mut random_names = Vec::new();
    if model.random_intercept {
        random_names.push("intercept".to_string());
    }
    random_names.extend(model.random.iter().cloned());
    ds.fixed_names = fixed_names;
    ds.random_names = random_names;
    ds.surv_names = model.survival.clone();
    Ok(ds)
}

/// Writes the two CSV files for a dataset generated by the simulator.
/// Floats are written in shortest round-trip form, so ingesting the files
/// reproduces the in-memory dataset exactly.
pub fn write_dataset_csv(dataset: &Dataset, long_path: &Path, surv_path: &Path) -> Result<()> {
    let mut long = std::io::BufWriter::new(std::fs::File::create(long_path)?);
    writeln!(long, "id,time,y,x2")?;
    for s in dataset.subjects() {
        let x2 = s.surv_covariates[1];
        for o in &s.obs {
            writeln!(long, "{},{},{},{}", s.id, o.time, o.response, x2)?;
        }
    }
    long.flush()?;
    let mut surv = std::io::BufWriter::new(std::fs::File::create(surv_path)?);
    writeln!(surv, "id,obs_time,cause,x1,x2")?;
    for s in dataset.subjects() {
        writeln!(
            surv,
            "{},{},{},{},{}",
            s.id, s.obs_time, s.cause, s.surv_covariates[0], s.surv_covariates[1]
        )?;
    }
    surv.flush()?;
    Ok(())
}

/// The model block matching the simulator's output files.
pub fn sim_model_config(n_causes: usize) -> ModelConfig {
    ModelConfig {
        fixed: vec!["time".into(), "x2".into()],
        fixed_intercept: true,
        random: vec!["time".into()],
        random_intercept: true,
        survival: vec!["x1".into(), "x2".into()],
        n_causes,
    }
}
