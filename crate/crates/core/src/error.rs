use thiserror::Error;

use crate::cvx::CvxError;
use crate::model::Violation;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),

    #[error("degenerate geometry: UAV {uav} coincides with UE {ue}")]
    DegenerateGeometry { uav: usize, ue: usize },

    #[error("infeasible scenario: {}", format_violations(.0))]
    InfeasibleScenario(Vec<Violation>),

    #[error("UE {ue} is not associated with UAV {uav}")]
    Association { ue: usize, uav: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("QoS infeasible for UEs {ues:?}")]
    QosInfeasible { ues: Vec<usize> },

    #[error("convex solver: {0}")]
    Solver(#[from] CvxError),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn format_violations(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

impl Error {
    /// True for errors caused by the problem instance rather than the code.
    pub fn is_infeasibility(&self) -> bool {
        matches!(
            self,
            Error::InfeasibleScenario(_) | Error::QosInfeasible { .. }
        )
    }
}
