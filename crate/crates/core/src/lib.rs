//! Linear-quadratic GMM estimation for dynamic spatial panels with endogenous
//! networks and interactive fixed effects.

pub mod error;
pub mod estimator;
pub mod identification;
pub mod io;
pub mod linalg;
pub mod montecarlo;
pub mod moments;
pub mod netsim;
pub mod panel;
pub mod rng;
pub mod sparse;
pub mod transform;
pub mod vclq;

pub use error::{Error, Result};
pub use moments::{
    build_instruments, build_quadratic_weights, evaluate_moments, moment_jacobian, weight_matrix, InstrumentSource,
    InstrumentSpec, ModelData, ModelSpec, MomentBlock, MomentSet, MomentSpec, MomentValue, QuadKind, WeightMatrix,
};
pub use panel::{
    build_design, row_normalize, DesignSpec, IsolatedPolicy, PanelData, ParamVector, Regressor, SpatialWeightMatrix,
    Variable,
};
pub use sparse::CsrMatrix;
pub use transform::{cochrane_orcutt, forward_difference, helmert_weights, multi_factor_weights, HelmertTransform};
pub use estimator::{efficient_gmm, first_step_gmm, gmm_estimate, wald_test, EstimatorConfig, GmmResult, GmmWeights, WaldOutcome};
pub use identification::{diagnose, IdentificationReport, Thresholds, Verdict};
pub use io::{read_panel, read_weights, write_panel, write_weights, PanelTable, WeightKind, WeightSet};
pub use montecarlo::{McConfig, McEstimator, McSummary, McWeighting};
pub use netsim::{McDesign, NetworkParams};

/// Library version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
