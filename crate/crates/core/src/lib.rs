//! State-space, age-structured stock assessment with thirteen interchangeable
//! observational likelihoods.
//!
//! The latent process (log fishing mortality random walk, numbers-at-age
//! survival with a plus group, recruitment) is shared by every model; only the
//! density linking predicted catches and survey indices to the data changes.
//! Parameters are estimated by maximizing the Laplace approximation of the
//! marginal likelihood, and families are compared through AIC intervals.

pub mod ad;
pub mod banded;
pub mod bridge;
pub mod comparison;
pub mod data;
pub mod densities_mv;
pub mod densities_uv;
pub mod estimator;
pub mod laplace;
pub mod model;
pub mod model_space;
pub mod optim;
pub mod process;
pub mod sim;
pub mod special;

pub use ad::Real;
pub use comparison::{aic_interval, clearly_superior, comparison_rows, filter_families, AicInterval, ComparisonRow, FamilyRanking};
pub use data::{BiologyInputs, Dataset, YearAgeGrid};
pub use estimator::{
    delta_se, fit, smooth_states, working_bounds, Convergence, Derived, FitOptions, FitResult, FitStatus, Functional,
    IdentityFunctional, NaturalFunctional, ObsCvFunctional,
};
pub use model::{CatchabilitySharing, LatentStates, ModelSpec, RecruitmentKind, StockModel};
pub use model_space::{
    build_sharing_map, count_obs_params, family_class, Family, FamilyClass, FleetKind, FleetSpec,
    ObsParams, ObsRole, ParamSharing, ShareMode, Transform,
};
pub use sim::{simulate, SimDesign, SimOutput};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("{family}: observation {value} outside the density's domain{context}")]
    Domain { family: String, value: f64, context: String },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("inner optimization did not converge after {iterations} iterations (max |gradient| {gradient:.3e})")]
    InnerNotConverged { iterations: usize, gradient: f64 },
    #[error("latent Hessian is not positive definite at {block}")]
    NotPositiveDefinite { block: String },
    #[error("parameter covariance unavailable: {0}")]
    CovarianceUnavailable(String),
    #[error("simulation: {0}")]
    Simulation(String),
    #[error("non-finite objective: {0}")]
    NonFinite(String),
}

impl Error {
    /// Adds fleet/year/age context to a domain error.
    pub fn with_context(self, ctx: &str) -> Self {
        match self {
            Error::Domain { family, value, context } => Error::Domain {
                family,
                value,
                context: format!("{context} ({ctx})"),
            },
            other => other,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
