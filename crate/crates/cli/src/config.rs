//! JSON run configurations, one per subcommand.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use spanel::montecarlo::{example_model_spec, McConfig, McWeighting};
use spanel::{
    EstimatorConfig, InstrumentSource, InstrumentSpec, ModelSpec, MomentSpec, NetworkParams, QuadKind, Thresholds,
    Variable,
};

pub const SCHEMA_VERSION: u32 = 1;

/// A problem with the command line or a configuration file.
#[derive(Debug)]
pub struct UsageError {
    pub message: String,
    /// Example configuration shown with the message.
    pub schema: Option<String>,
}

impl UsageError {
    pub fn new(message: impl Into<String>) -> Self {
        Self {
            message: message.into(),
            schema: None,
        }
    }
}

pub trait RunConfig: Serialize + DeserializeOwned + Default {
    fn example() -> String {
        serde_json::to_string_pretty(&Self::default()).expect("configs serialize")
    }
}

/// Reads `path`, or returns the defaults when no file is given.
pub fn load<T: RunConfig>(path: Option<&Path>) -> Result<T, UsageError> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let with_schema = |message: String| UsageError {
        message,
        schema: Some(T::example()),
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| UsageError::new(format!("cannot read config {}: {e}", path.display())))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| with_schema(format!("config {} is not valid JSON: {e}", path.display())))?;
    match value.get("schema_version").and_then(|v| v.as_u64()) {
        Some(v) if v == SCHEMA_VERSION as u64 => {}
        Some(v) => return Err(with_schema(format!("unsupported schema_version {v}; expected {SCHEMA_VERSION}"))),
        None => return Err(with_schema("config is missing the integer field `schema_version`".into())),
    }
    serde_json::from_value(value).map_err(|e| with_schema(format!("invalid config {}: {e}", path.display())))
}

fn default_moments() -> MomentSpec {
    MomentSpec {
        instruments: InstrumentSpec {
            variables: vec![Variable::Z(0)],
            max_order: 2,
            source: InstrumentSource::Current,
            weight: 0,
        },
        quadratic: vec![QuadKind::Sym, QuadKind::Gram],
        quadratic_weight: 0,
    }
}

/// One draw from the network-formation design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub schema_version: u32,
    pub n: usize,
    pub periods: usize,
    pub lambda0: f64,
    pub beta1: f64,
    pub delta: f64,
    pub zeta_width: f64,
    #[serde(default)]
    pub network: NetworkParams,
    pub seed: u64,
    /// Replication index within the seed's streams.
    #[serde(default)]
    pub replication: u64,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            n: 100,
            periods: 2,
            lambda0: 0.5,
            beta1: 1.0,
            delta: 0.3,
            zeta_width: 2.0,
            network: NetworkParams::default(),
            seed: 1,
            replication: 0,
        }
    }
}

impl RunConfig for SimulateConfig {}

/// A linear restriction block `R theta = r`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WaldSpec {
    pub name: String,
    /// Rows of `R`.
    pub r: Vec<Vec<f64>>,
    /// Right-hand side; zeros when absent.
    #[serde(default)]
    pub value: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateConfig {
    pub schema_version: u32,
    pub model: ModelSpec,
    pub moments: MomentSpec,
    #[serde(default)]
    pub estimator: EstimatorConfig,
    pub weighting: McWeighting,
    /// Treat weight values as 0/1 adjacency and row-normalize them.
    #[serde(default)]
    pub row_normalize: bool,
    /// Factor loadings over periods (last entry 1); all ones when absent.
    #[serde(default)]
    pub factor: Option<Vec<f64>>,
    /// Time variance components (last entry 1); all ones when absent.
    #[serde(default)]
    pub sigma2: Option<Vec<f64>>,
    /// Restriction blocks; one zero test per parameter when empty.
    #[serde(default)]
    pub wald: Vec<WaldSpec>,
}

impl Default for EstimateConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            model: example_model_spec(),
            moments: default_moments(),
            estimator: EstimatorConfig::default(),
            weighting: McWeighting::TwoStep,
            row_normalize: false,
            factor: None,
            sigma2: None,
            wald: Vec::new(),
        }
    }
}

impl RunConfig for EstimateConfig {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdentifyConfig {
    pub schema_version: u32,
    pub model: ModelSpec,
    pub moments: MomentSpec,
    #[serde(default)]
    pub thresholds: Thresholds,
    #[serde(default)]
    pub row_normalize: bool,
    #[serde(default)]
    pub factor: Option<Vec<f64>>,
    #[serde(default)]
    pub sigma2: Option<Vec<f64>>,
    /// Error-lag coefficients at which the system is filtered; zeros when absent.
    #[serde(default)]
    pub rho: Option<Vec<f64>>,
}

impl Default for IdentifyConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            model: example_model_spec(),
            moments: default_moments(),
            thresholds: Thresholds::default(),
            row_normalize: false,
            factor: None,
            sigma2: None,
            rho: None,
        }
    }
}

impl RunConfig for IdentifyConfig {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoverageSpec {
    pub lambda0: f64,
    pub delta: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonteCarloConfig {
    pub schema_version: u32,
    pub n: usize,
    pub lambdas: Vec<f64>,
    pub deltas: Vec<f64>,
    pub replications: usize,
    pub seed: u64,
    #[serde(default)]
    pub settings: McConfig,
    /// Optional Wald coverage experiment for `H0: lambda = lambda0`.
    #[serde(default)]
    pub coverage: Option<CoverageSpec>,
}

impl Default for MonteCarloConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            n: 100,
            lambdas: vec![0.1, 0.5, 0.7],
            deltas: vec![0.5, 0.3, 0.1],
            replications: 1000,
            seed: 1,
            settings: McConfig::default(),
            coverage: None,
        }
    }
}

impl RunConfig for MonteCarloConfig {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyConfig {
    pub schema_version: u32,
    pub configs: usize,
    pub n: usize,
    pub draws: usize,
    pub seed: u64,
    /// Number of Monte Carlo standard errors allowed per check.
    pub tolerance_se: f64,
    /// Also run the zero-trace, non-zero-diagonal example.
    pub trace_zero: bool,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            configs: 20,
            n: 20,
            draws: 100_000,
            seed: 1,
            tolerance_se: 3.0,
            trace_zero: true,
        }
    }
}

impl RunConfig for VerifyConfig {}
