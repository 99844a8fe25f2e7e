//! Run configuration: TOML with an explicit schema version, matrices in external CSV files.

use crate::error::CliError;
use mde_core::{
    CMat, DensityOptions, ModelSpec, RMat, SelfEnergy, SolverOptions, StabilityOptions, SymmetryClass, C64,
};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub model: ModelConfig,
    #[serde(default)]
    pub solver: SolverOptions,
    #[serde(default)]
    pub density: DensityOptions,
    #[serde(default)]
    pub stability: StabilityOptions,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub ensemble: EnsembleConfig,
    #[serde(default)]
    pub run: RunParams,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<ManifestInfo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_label")]
    pub label: String,
    pub n: usize,
    pub class: SymmetryClass,
    #[serde(default)]
    pub a: MatrixSource,
    pub self_energy: SelfEnergyConfig,
}

fn default_label() -> String {
    "model".into()
}

/// Source of the expectation matrix `A`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MatrixSource {
    #[default]
    Zero,
    /// `diag(a,…,a,−a,…,−a)` with the first `⌈N/2⌉` entries `+a`.
    TwoBand { value: f64 },
    Diagonal { values: Vec<f64> },
    /// Real matrix with `N` columns, or complex with `2N` columns of `(re, im)` pairs.
    Csv { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SelfEnergyConfig {
    Flat {
        #[serde(default = "one")]
        scale: f64,
    },
    VarianceProfile {
        profile: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        second_moments: Option<PathBuf>,
    },
    Kronecker {
        structure: Vec<PathBuf>,
        coefficients: PathBuf,
    },
    /// `N² × N²` cumulant `κ(ab, cd)` at row `aN + b`, column `cN + d`.
    Dense { cumulant: PathBuf },
}

fn one() -> f64 {
    1.0
}

/// Scan range for density grids; unset ends follow the model's spectral bounds.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lo: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hi: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleConfig {
    pub trials: usize,
    pub seed: u64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig { trials: 100, seed: 0 }
    }
}

/// Command parameters, recorded so that a manifest replays the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunParams {
    pub tau: f64,
    pub eta: f64,
    /// Flow time.
    pub t: f64,
    pub edge_index: usize,
    pub k: usize,
    pub steps: usize,
    pub vectors: usize,
    pub margin: f64,
    pub delta: f64,
    pub ks_threshold: f64,
    /// Spectral parameters for the rigidity profile; empty means band centers.
    pub taus: Vec<f64>,
    pub rigidity_constant: f64,
}

impl Default for RunParams {
    fn default() -> Self {
        RunParams {
            tau: 0.0,
            eta: 1e-3,
            t: 0.5,
            edge_index: 0,
            k: 2,
            steps: 11,
            vectors: 32,
            margin: 0.2,
            delta: 0.01,
            ks_threshold: 0.08,
            taus: Vec::new(),
            rigidity_constant: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestInfo {
    pub artifact_version: String,
    pub command: String,
    pub master_seed: u64,
    pub threads: usize,
}

/// Reads and validates a config; relative paths are resolved against its directory.
pub fn parse_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("cannot read config {}: {e}", path.display())))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_config_str(&text, &base)
}

pub fn parse_config_str(text: &str, base: &Path) -> Result<RunConfig, CliError> {
    let mut cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Validation(format!("config: {e}")))?;
    if cfg.schema_version != SCHEMA_VERSION {
        return Err(CliError::Validation(format!(
            "unsupported schema_version {} (supported: {SCHEMA_VERSION})",
            cfg.schema_version
        )));
    }
    cfg.resolve_paths(base);
    cfg.build_model()?;
    Ok(cfg)
}

pub fn emit_config(cfg: &RunConfig) -> Result<String, CliError> {
    toml::to_string(cfg).map_err(|e| CliError::Io(format!("cannot serialize config: {e}")))
}

fn absolute(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        let joined = base.join(&*p);
        *p = std::path::absolute(&joined).unwrap_or(joined);
    }
}

impl RunConfig {
    /// A flat or two-band config with every default materialized.
    pub fn builtin(label: &str, n: usize, class: SymmetryClass, a: MatrixSource, scale: f64) -> Self {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            model: ModelConfig {
                label: label.into(),
                n,
                class,
                a,
                self_energy: SelfEnergyConfig::Flat { scale },
            },
            solver: SolverOptions::default(),
            density: DensityOptions::default(),
            stability: StabilityOptions::default(),
            grid: GridConfig::default(),
            ensemble: EnsembleConfig::default(),
            run: RunParams::default(),
            output: OutputConfig::default(),
            manifest: None,
        }
    }

    fn resolve_paths(&mut self, base: &Path) {
        if let MatrixSource::Csv { path } = &mut self.model.a {
            absolute(base, path);
        }
        match &mut self.model.self_energy {
            SelfEnergyConfig::Flat { .. } => {}
            SelfEnergyConfig::VarianceProfile { profile, second_moments } => {
                absolute(base, profile);
                if let Some(t) = second_moments {
                    absolute(base, t);
                }
            }
            SelfEnergyConfig::Kronecker { structure, coefficients } => {
                for p in structure.iter_mut() {
                    absolute(base, p);
                }
                absolute(base, coefficients);
            }
            SelfEnergyConfig::Dense { cumulant } => absolute(base, cumulant),
        }
    }

    /// Changes the dimension; only generated sources can be resized.
    pub fn set_dimension(&mut self, n: usize) -> Result<(), CliError> {
        if n == self.model.n {
            return Ok(());
        }
        let from_files = matches!(self.model.a, MatrixSource::Csv { .. } | MatrixSource::Diagonal { .. })
            || !matches!(self.model.self_energy, SelfEnergyConfig::Flat { .. });
        if from_files {
            return Err(CliError::Validation(format!(
                "cannot change N from {} to {n}: the model reads fixed-size matrices",
                self.model.n
            )));
        }
        self.model.n = n;
        Ok(())
    }

    pub fn build_model(&self) -> Result<ModelSpec, CliError> {
        let m = &self.model;
        let n = m.n;
        if n == 0 {
            return Err(CliError::Validation("model.n must be positive".into()));
        }
        let complex = !m.class.is_real();
        let a = match &m.a {
            MatrixSource::Zero => CMat::zeros(n, n),
            MatrixSource::TwoBand { value } => ModelSpec::two_band(n, m.class, *value).a,
            MatrixSource::Diagonal { values } => {
                if values.len() != n {
                    return Err(CliError::Validation(format!(
                        "diagonal A has {} entries but model.n = {n}",
                        values.len()
                    )));
                }
                CMat::from_fn(n, n, |i, j| C64::new(if i == j { values[i] } else { 0.0 }, 0.0))
            }
            MatrixSource::Csv { path } => read_matrix(path, n, complex, "A")?,
        };
        let s = match &m.self_energy {
            SelfEnergyConfig::Flat { scale } => SelfEnergy::flat(n, m.class, *scale),
            SelfEnergyConfig::VarianceProfile { profile, second_moments } => {
                let p = read_real(profile, n, "variance profile")?;
                let t = match second_moments {
                    Some(t) => Some(read_real(t, n, "second-moment profile")?),
                    None => None,
                };
                SelfEnergy::variance_profile(m.class, p, t)?
            }
            SelfEnergyConfig::Kronecker { structure, coefficients } => {
                let mats = structure
                    .iter()
                    .enumerate()
                    .map(|(k, p)| read_matrix(p, n, complex, &format!("structure matrix {k}")))
                    .collect::<Result<Vec<_>, _>>()?;
                let c = read_real(coefficients, structure.len(), "coefficient matrix")?;
                SelfEnergy::kronecker(m.class, mats, c)?
            }
            SelfEnergyConfig::Dense { cumulant } => {
                let k = read_matrix(cumulant, n * n, true, "cumulant")?;
                SelfEnergy::dense(m.class, k, mde_core::superop::DEFAULT_CAP)?
            }
        };
        Ok(ModelSpec::new(m.label.clone(), m.class, a, s)?)
    }
}

fn read_rows(path: &Path) -> Result<Vec<Vec<f64>>, CliError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::Io(format!("cannot read {}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        let row = rec
            .iter()
            .map(|v| {
                v.parse::<f64>().map_err(|_| {
                    CliError::Validation(format!("{}: row {} has non-numeric entry {v:?}", path.display(), i + 1))
                })
            })
            .collect::<Result<Vec<f64>, _>>()?;
        rows.push(row);
    }
    Ok(rows)
}

fn read_real(path: &Path, n: usize, what: &str) -> Result<RMat, CliError> {
    let rows = read_rows(path)?;
    check_shape(&rows, n, n, what, path)?;
    Ok(RMat::from_fn(n, n, |i, j| rows[i][j]))
}

/// Real (`n` columns) or complex (`2n` columns of `re, im` pairs) square matrix.
fn read_matrix(path: &Path, n: usize, complex: bool, what: &str) -> Result<CMat, CliError> {
    let rows = read_rows(path)?;
    let cols = rows.first().map_or(0, Vec::len);
    if complex && cols == 2 * n {
        check_shape(&rows, n, 2 * n, what, path)?;
        return Ok(CMat::from_fn(n, n, |i, j| C64::new(rows[i][2 * j], rows[i][2 * j + 1])));
    }
    check_shape(&rows, n, n, what, path)?;
    Ok(CMat::from_fn(n, n, |i, j| C64::new(rows[i][j], 0.0)))
}

fn check_shape(rows: &[Vec<f64>], nr: usize, nc: usize, what: &str, path: &Path) -> Result<(), CliError> {
    if rows.len() != nr {
        return Err(CliError::Validation(format!(
            "{what} in {} has {} rows, expected {nr} (model dimension)",
            path.display(),
            rows.len()
        )));
    }
    if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != nc) {
        return Err(CliError::Validation(format!(
            "{what} in {}: row {} has {} columns, expected {nc}",
            path.display(),
            i + 1,
            r.len()
        )));
    }
    Ok(())
}
