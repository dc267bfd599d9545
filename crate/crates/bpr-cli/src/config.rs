//! Configuration files, artifact schemas and provenance stamping.

use std::path::Path;

use anyhow::{Context, Result};
use bpr::mcmc::McmcConfig;
use bpr::model::ModelConfig;
use bpr::posterior::ClusterSummary;
use bpr::sim::SimulationSpec;
use bpr::svi::{FitTrace, SviConfig};
use bpr::VariationalState;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Column roles of a cohort CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileSchema {
    /// Binary mixture covariate columns.
    pub mixture: Vec<String>,
    /// Response covariate columns (continuous or binary).
    pub response: Vec<String>,
    /// Binary outcome column.
    pub outcome: String,
    /// Optional stratification column for per-stratum fits.
    #[serde(default)]
    pub strata: Option<String>,
}

fn default_posterior_draws() -> usize {
    1000
}

fn default_nonempty_threshold() -> f64 {
    1.0
}

/// Configuration for `fit`: schema plus model/SVI settings and reporting
/// options. Unknown keys are rejected.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema: FileSchema,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub svi: SviConfig,
    #[serde(default = "default_posterior_draws")]
    pub posterior_draws: usize,
    /// Response covariate vectors at which per-cluster outcome
    /// probabilities are reported.
    #[serde(default)]
    pub reference_profiles: Vec<Vec<f64>>,
    /// Expected-membership count below which a cluster counts as empty.
    #[serde(default = "default_nonempty_threshold")]
    pub nonempty_threshold: f64,
}

/// Configuration for `simulate`: required scale parameters plus optional
/// overrides of the generator defaults.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub n: usize,
    #[serde(default = "default_m")]
    pub m: usize,
    pub k_true: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub d_m: Option<usize>,
    #[serde(default)]
    pub d_r: Option<usize>,
    #[serde(default)]
    pub cluster_weights: Option<Vec<f64>>,
    #[serde(default)]
    pub phi_true: Option<Vec<f64>>,
    #[serde(default)]
    pub beta_true: Option<Vec<f64>>,
    #[serde(default)]
    pub intercepts_true: Option<Vec<f64>>,
    #[serde(default)]
    pub age_mean: Option<f64>,
    #[serde(default)]
    pub age_var: Option<f64>,
}

fn default_m() -> usize {
    1
}

impl SimulateConfig {
    /// Expand into a full spec: defaults are regenerated whenever the
    /// dimensions they depend on are overridden.
    pub fn build(&self) -> Result<SimulationSpec> {
        let mut spec = SimulationSpec::with_defaults(self.n, self.m, self.k_true, self.seed);
        if let Some(d_m) = self.d_m {
            spec.d_m = d_m;
            spec.phi_true = bpr::sim::default_phi(self.k_true, d_m, 0.8, 0.02);
        }
        if let Some(d_r) = self.d_r {
            spec.d_r = d_r;
            spec.beta_true = bpr::sim::default_beta(d_r);
        }
        if let Some(w) = &self.cluster_weights {
            spec.cluster_weights = w.clone();
        }
        if let Some(p) = &self.phi_true {
            spec.phi_true = p.clone();
        }
        if let Some(b) = &self.beta_true {
            spec.beta_true = b.clone();
        }
        if let Some(i) = &self.intercepts_true {
            spec.intercepts_true = i.clone();
        }
        if let Some(v) = self.age_mean {
            spec.age_mean = v;
        }
        if let Some(v) = self.age_var {
            spec.age_var = v;
        }
        spec.validate()?;
        Ok(spec)
    }
}

/// Configuration for `study`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub spec: SimulateConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub svi: SviConfig,
    #[serde(default)]
    pub mcmc: McmcConfig,
    #[serde(default = "default_posterior_draws")]
    pub posterior_draws: usize,
}

/// Stamp embedded in every output file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Provenance {
    pub tool_version: String,
    pub config_sha256: String,
    pub seed: u64,
}

impl Provenance {
    pub fn new(config_bytes: &[u8], seed: u64) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(config_bytes);
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_sha256: format!("{:x}", hasher.finalize()),
            seed,
        }
    }

    /// `# key=value` comment lines prepended to CSV outputs.
    pub fn csv_comments(&self) -> String {
        format!(
            "# tool_version={}\n# config_sha256={}\n# seed={}\n",
            self.tool_version, self.config_sha256, self.seed
        )
    }
}

/// Everything needed to reuse a fit without refitting: the unconstrained
/// variational state, the trace, and the reporting summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitArtifact {
    pub provenance: Provenance,
    pub schema: FileSchema,
    pub model: ModelConfig,
    pub svi: SviConfig,
    pub posterior_draws: usize,
    pub n: usize,
    pub converged: bool,
    pub state: VariationalState,
    pub trace: FitTrace,
    /// Absent when posterior summarisation failed after an aborted fit.
    pub summary: Option<ClusterSummary>,
    pub nonempty_clusters: Option<usize>,
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<(T, Vec<u8>)> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let value =
        serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))?;
    Ok((value, bytes))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T, force: bool) -> Result<()> {
    refuse_overwrite(path, force)?;
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn refuse_overwrite(path: &Path, force: bool) -> Result<()> {
    if !force && path.exists() {
        anyhow::bail!(
            "refusing to overwrite {} (pass --force to allow)",
            path.display()
        );
    }
    Ok(())
}
