use std::fmt;

use serde::{Deserialize, Serialize};

use crate::trial::{EvidenceTuple, TrialStatus};

/// Why a trial did (or did not) demonstrate a working tool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FailureClass {
    ParameterMismatch,
    SemanticMismatch,
    ExecutionFailure,
    FunctionalSuccess,
}

impl FailureClass {
    pub const ALL: [FailureClass; 4] = [
        FailureClass::ParameterMismatch,
        FailureClass::SemanticMismatch,
        FailureClass::ExecutionFailure,
        FailureClass::FunctionalSuccess,
    ];
}

impl fmt::Display for FailureClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FailureClass::ParameterMismatch => "PARAMETER_MISMATCH",
            FailureClass::SemanticMismatch => "SEMANTIC_MISMATCH",
            FailureClass::ExecutionFailure => "EXECUTION_FAILURE",
            FailureClass::FunctionalSuccess => "FUNCTIONAL_SUCCESS",
        })
    }
}

/// Real-world viability of a trial. A simulated success still counts as an
/// execution failure here: the real call did not work.
pub fn classify(evidence: &EvidenceTuple) -> FailureClass {
    match evidence.status {
        TrialStatus::PlanningFailed => FailureClass::ParameterMismatch,
        TrialStatus::OtherNonerror => FailureClass::SemanticMismatch,
        TrialStatus::SuccessSimulated | TrialStatus::SimulationFailed => FailureClass::ExecutionFailure,
        TrialStatus::SuccessReal => FailureClass::FunctionalSuccess,
    }
}
