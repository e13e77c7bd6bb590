//! Run configuration.
//!
//! Values are layered, later layers winning key by key:
//!
//! 1. built-in defaults
//! 2. files listed under `include` in the config file, in order (each may
//!    include further files; paths are relative to the including file)
//! 3. the config file itself
//! 4. command-line flags, including `--set key.path=value`
//!
//! Tables merge recursively; any other value, arrays included, is replaced
//! whole. Paths inside the configuration are relative to the working
//! directory.

use std::path::{Path, PathBuf};

use dexrefine::codebook::{ArchConfig, TrainConfig};
use dexrefine::energy::{ContactKernelParams, ContactPenalty};
use dexrefine::pointcloud::DEFAULT_K_NEIGHBORS;
use dexrefine::refiner::{PriorWeightSpec, RefinementConfig, NOISE_STUDY_MAX_ITERS};
use dexrefine::solver::LmSettings;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Worker threads; 0 lets the runtime decide.
    pub threads: usize,
    pub refine: RefineSection,
    pub retarget: RetargetSection,
    pub vq: VqSection,
    pub metrics: MetricsSection,
    pub noise_study: NoiseStudySection,
    pub normals: NormalsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("out"),
            threads: 0,
            refine: RefineSection::default(),
            retarget: RetargetSection::default(),
            vq: VqSection::default(),
            metrics: MetricsSection::default(),
            noise_study: NoiseStudySection::default(),
            normals: NormalsSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefineSection {
    pub model: Option<PathBuf>,
    pub trajectory: Option<PathBuf>,
    pub cloud: Option<PathBuf>,
    pub poses: Option<PathBuf>,
    /// Neighborhood size when the cloud has no normals.
    pub k_neighbors: usize,
    pub kernel: ContactKernelParams,
    pub penalty: ContactPenalty,
    pub weights: PriorWeightSpec,
    pub solver: LmSettings,
}

impl Default for RefineSection {
    fn default() -> Self {
        Self {
            model: None,
            trajectory: None,
            cloud: None,
            poses: None,
            k_neighbors: DEFAULT_K_NEIGHBORS,
            kernel: ContactKernelParams::default(),
            penalty: ContactPenalty::default(),
            weights: PriorWeightSpec::default(),
            solver: LmSettings::default(),
        }
    }
}

impl RefineSection {
    pub fn refinement(&self) -> RefinementConfig {
        RefinementConfig {
            kernel: self.kernel,
            penalty: self.penalty,
            weights: self.weights.clone(),
            solver: self.solver.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetargetSection {
    pub model: Option<PathBuf>,
    pub keypoints: Option<PathBuf>,
    /// Correspondence file (TOML).
    pub spec: Option<PathBuf>,
    /// First-frame seed; defaults to zeros clamped to the joint limits.
    pub q_init: Option<PathBuf>,
    /// Replaces the spec file's value when set.
    pub lambda_smooth: Option<f64>,
    pub solver: LmSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VqSection {
    pub window: usize,
    pub stride: usize,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    /// Training sequences for `train-ref`.
    pub dataset: Option<PathBuf>,
    /// Morphology written by `train-ref` / `train-new`.
    pub name: String,
    /// Existing morphology that `train-new` distills from.
    pub reference: String,
    pub archive: Option<PathBuf>,
    /// Paired sequences for `train-new`, new hand and reference hand.
    pub paired_new: Option<PathBuf>,
    pub paired_ref: Option<PathBuf>,
    /// `translate` input and morphologies.
    pub input: Option<PathBuf>,
    pub from: Option<String>,
    pub to: Option<String>,
    /// Loss history read by `refresh-stats`.
    pub history: Option<PathBuf>,
}

impl Default for VqSection {
    fn default() -> Self {
        Self {
            window: 8,
            stride: 4,
            arch: ArchConfig::default(),
            train: TrainConfig::default(),
            dataset: None,
            name: "reference".into(),
            reference: "reference".into(),
            archive: None,
            paired_new: None,
            paired_ref: None,
            input: None,
            from: None,
            to: None,
            history: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsSection {
    pub pred: Option<PathBuf>,
    pub gt: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub pred_roots: Option<PathBuf>,
    pub gt_roots: Option<PathBuf>,
    /// Enables FID and diversity.
    pub archive: Option<PathBuf>,
    pub morphology: String,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self {
            pred: None,
            gt: None,
            model: None,
            pred_roots: None,
            gt_roots: None,
            archive: None,
            morphology: "reference".into(),
        }
    }
}

/// The study refines the first frame of `trajectory` against `poses`'s
/// first pose, using the kernel, weights and solver of `[refine]` with
/// `max_inner_iters` replaced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseStudySection {
    pub model: Option<PathBuf>,
    pub cloud: Option<PathBuf>,
    pub trajectory: Option<PathBuf>,
    pub poses: Option<PathBuf>,
    pub sigma: Vec<f64>,
    pub seeds: usize,
    pub max_inner_iters: usize,
}

impl Default for NoiseStudySection {
    fn default() -> Self {
        Self {
            model: None,
            cloud: None,
            trajectory: None,
            poses: None,
            sigma: vec![0.0, 0.001, 0.002],
            seeds: 20,
            max_inner_iters: NOISE_STUDY_MAX_ITERS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NormalsSection {
    pub input: Option<PathBuf>,
    pub k_neighbors: usize,
}

impl Default for NormalsSection {
    fn default() -> Self {
        Self {
            input: None,
            k_neighbors: DEFAULT_K_NEIGHBORS,
        }
    }
}

/// Returns the path or a config error naming `key`.
pub fn required<'a>(value: &'a Option<PathBuf>, key: &str) -> Result<&'a Path, CliError> {
    value
        .as_deref()
        .ok_or_else(|| CliError::Config(format!("{key}: required but not set")))
}

fn read_table(path: &Path) -> Result<Table, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    text.parse::<Table>()
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Recursively merges `top` over `base`.
pub fn merge(base: &mut Table, top: Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn load_layered(path: &Path, stack: &mut Vec<PathBuf>) -> Result<Table, CliError> {
    let canonical = path
        .canonicalize()
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    if stack.contains(&canonical) {
        return Err(CliError::Config(format!("include cycle through {}", path.display())));
    }
    stack.push(canonical);
    let mut own = read_table(path)?;
    let includes = match own.remove("include") {
        None => Vec::new(),
        Some(Value::String(s)) => vec![s],
        Some(Value::Array(items)) => items
            .into_iter()
            .map(|v| match v {
                Value::String(s) => Ok(s),
                other => Err(CliError::Config(format!(
                    "{}: include: expected a path string, got {}",
                    path.display(),
                    other.type_str()
                ))),
            })
            .collect::<Result<_, _>>()?,
        Some(other) => {
            return Err(CliError::Config(format!(
                "{}: include: expected a string or an array of strings, got {}",
                path.display(),
                other.type_str()
            )))
        }
    };
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut merged = Table::new();
    for inc in includes {
        merge(&mut merged, load_layered(&dir.join(inc), stack)?);
    }
    merge(&mut merged, own);
    stack.pop();
    Ok(merged)
}

/// Parses a `--set` value as a TOML literal, falling back to a plain string.
pub fn parse_literal(text: &str) -> Value {
    format!("v = {text}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(text.to_string()))
}

/// Writes `value` at the dotted `key`, creating tables along the way.
pub fn set_path(table: &mut Table, key: &str, value: Value) -> Result<(), CliError> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Usage(format!("malformed key `{key}`")));
    }
    let mut cur = table;
    for (i, part) in parts[..parts.len() - 1].iter().enumerate() {
        let entry = cur.entry(part.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => {
                return Err(CliError::Config(format!(
                    "{}: is not a table",
                    parts[..=i].join(".")
                )))
            }
        };
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Builds the run configuration from an optional file plus overrides.
pub fn load(file: Option<&Path>, overrides: Vec<(String, Value)>) -> Result<RunConfig, CliError> {
    let mut table = match file {
        Some(p) => load_layered(p, &mut Vec::new())?,
        None => Table::new(),
    };
    for (k, v) in overrides {
        set_path(&mut table, &k, v)?;
    }
    if table
        .get("vq")
        .and_then(|v| v.get("train"))
        .and_then(|t| t.get("seed"))
        .is_some()
    {
        return Err(CliError::Config(
            "vq.train.seed: not configurable here, set the top-level `seed`".into(),
        ));
    }
    let mut config: RunConfig = serde_path_to_error::deserialize(Value::Table(table)).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner().to_string();
        CliError::Config(format!("{path}: {}", inner.lines().next().unwrap_or_default()))
    })?;
    config.vq.train.seed = config.seed;
    config.validate()?;
    Ok(config)
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        let wrap = |section: &str, r: dexrefine::Result<()>| {
            r.map_err(|e| CliError::Config(format!("{section}: {e}")))
        };
        wrap("refine", self.refine.refinement().validate())?;
        wrap("retarget.solver", self.retarget.solver.validate())?;
        wrap("vq.arch", self.vq.arch.validate())?;
        wrap("vq.train", self.vq.train.validate())?;
        if self.vq.window == 0 || self.vq.stride == 0 {
            return Err(CliError::Config("vq.window, vq.stride: must be ≥ 1".into()));
        }
        if let Some(l) = self.retarget.lambda_smooth {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(CliError::Config(format!("retarget.lambda_smooth: must be finite and ≥ 0, got {l}")));
            }
        }
        if self.noise_study.seeds == 0 {
            return Err(CliError::Config("noise_study.seeds: must be ≥ 1".into()));
        }
        if self.noise_study.max_inner_iters == 0 {
            return Err(CliError::Config("noise_study.max_inner_iters: must be ≥ 1".into()));
        }
        if let Some(s) = self.noise_study.sigma.iter().find(|s| !(**s >= 0.0 && s.is_finite())) {
            return Err(CliError::Config(format!("noise_study.sigma: levels must be finite and ≥ 0, got {s}")));
        }
        Ok(())
    }

    /// The effective configuration, suitable for re-running.
    pub fn to_toml(&self) -> String {
        let mut table = Table::try_from(self).expect("run config serializes");
        if let Some(Value::Table(train)) = table.get_mut("vq").and_then(|v| v.get_mut("train")) {
            train.remove("seed");
        }
        toml::to_string(&table).expect("table serializes")
    }
}
