use serde::{Deserialize, Serialize};

/// Where and why a global trim gave up.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrimFailure {
    /// Centre of the failing subcube.
    pub cube_center: Vec<f64>,
    /// Inradius of the failing subcube.
    pub cube_inradius: f64,
    pub reason: String,
    /// Winding number of the failing cube's boundary loop around a probe of the
    /// target, when the target admits a global chart.
    pub probe_degree: Option<i64>,
    pub probe: Option<Vec<f64>>,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("reflection padding is not a whole number of cells: {0}")]
    PaddingMisaligned(String),
    #[error("sample outside the grid domain: {0}")]
    DomainExceeded(String),
    #[error("point outside the tubular neighborhood: {0}")]
    OutsideTubularNeighborhood(String),
    #[error("point is not on the manifold (residual {0:e})")]
    NotOnManifold(f64),
    #[error("no uniform chart: {0}")]
    NoUniformChart(String),
    #[error("parameter out of range: {0}")]
    ParameterOutOfRange(String),
    #[error("cube inradius misaligned with the grid: {0}")]
    EtaMisaligned(String),
    #[error("input map is not manifold-valued: {0}")]
    InputNotManifoldValued(String),
    #[error("transition field infeasible: {0}")]
    TransitionInfeasible(String),
    #[error("face traces disagree: {0}")]
    TraceIncompatible(String),
    #[error("homogenization ill-posed for p = {p} on {i}-dimensional faces")]
    HomogenizationIllposed { p: f64, i: usize },
    #[error("input is not continuous: {0}")]
    DiscontinuousInput(String),
    #[error("boundary energy {energy:.6e} exceeds the small-energy threshold {alpha:.6e}")]
    NotSmallEnergy { energy: f64, alpha: f64 },
    #[error("trimming failed: {}", .0.reason)]
    TrimmingFailed(Box<TrimFailure>),
    #[error("degree probe too close to the boundary image: {0}")]
    ProbeUnstable(String),
    #[error("obstruction certificate failed: {0}")]
    CertificateFailed(String),
    #[error("claim {claim} violated: {detail}")]
    ClaimViolation { claim: u8, detail: String },
    #[error("calibrated constants unstable: {0}")]
    UnstableConstants(String),
    #[error("{stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Stable machine-readable name of the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "InvalidInput",
            Error::PaddingMisaligned(_) => "PaddingMisaligned",
            Error::DomainExceeded(_) => "DomainExceeded",
            Error::OutsideTubularNeighborhood(_) => "OutsideTubularNeighborhood",
            Error::NotOnManifold(_) => "NotOnManifold",
            Error::NoUniformChart(_) => "NoUniformChart",
            Error::ParameterOutOfRange(_) => "ParameterOutOfRange",
            Error::EtaMisaligned(_) => "EtaMisaligned",
            Error::InputNotManifoldValued(_) => "InputNotManifoldValued",
            Error::TransitionInfeasible(_) => "TransitionInfeasible",
            Error::TraceIncompatible(_) => "TraceIncompatible",
            Error::HomogenizationIllposed { .. } => "HomogenizationIllposed",
            Error::DiscontinuousInput(_) => "DiscontinuousInput",
            Error::NotSmallEnergy { .. } => "NotSmallEnergy",
            Error::TrimmingFailed(_) => "TrimmingFailed",
            Error::ProbeUnstable(_) => "ProbeUnstable",
            Error::CertificateFailed(_) => "CertificateFailed",
            Error::ClaimViolation { .. } => "ClaimViolation",
            Error::UnstableConstants(_) => "UnstableConstants",
            Error::Stage { source, .. } => source.kind(),
            Error::Io(_) => "Io",
            Error::Json(_) => "Json",
            Error::Csv(_) => "Csv",
        }
    }

    /// Process exit code used by the command-line front end:
    /// 2 for rejected input, 4 for trimming failure, 3 for any other numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidInput(_)
            | Error::ParameterOutOfRange(_)
            | Error::PaddingMisaligned(_)
            | Error::EtaMisaligned(_)
            | Error::Io(_)
            | Error::Json(_) => 2,
            Error::TrimmingFailed(_) => 4,
            Error::Stage { source, .. } => source.exit_code(),
            _ => 3,
        }
    }

    /// Innermost error, looking through stage tags.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            e => e,
        }
    }

    pub fn in_stage(self, stage: &str) -> Error {
        Error::Stage { stage: stage.to_string(), source: Box::new(self) }
    }
}

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidInput(msg.into()))
}
