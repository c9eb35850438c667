use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Which hardware-compatibility rule rejected a program.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RejectionReason {
    Recursion,
    WhileLoop,
    DynamicAlloc,
    NonStaticBound,
    UnsupportedType,
    NonAffineIndex,
}

impl RejectionReason {
    pub fn as_str(self) -> &'static str {
        match self {
            RejectionReason::Recursion => "RECURSION",
            RejectionReason::WhileLoop => "WHILE_LOOP",
            RejectionReason::DynamicAlloc => "DYNAMIC_ALLOC",
            RejectionReason::NonStaticBound => "NON_STATIC_BOUND",
            RejectionReason::UnsupportedType => "UNSUPPORTED_TYPE",
            RejectionReason::NonAffineIndex => "NON_AFFINE_INDEX",
        }
    }
}

impl fmt::Display for RejectionReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TranspileError {
    #[error("syntax error at line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("unsupported construct at line {line}: {construct}")]
    UnsupportedConstruct { line: usize, construct: String },
    #[error("runtime helper `{0}` has no rewrite rule")]
    UnknownRuntimeCall(String),
    #[error("rejected ({reason}): {detail}")]
    Rejected { reason: RejectionReason, detail: String },
    #[error("no function named `{0}`")]
    NoSuchFunction(String),
    #[error("input defines no functions")]
    NoFunction,
    #[error("invalid directive target: {0}")]
    InvalidDirectiveTarget(String),
    #[error("test vectors: {0}")]
    Vectors(String),
}

impl TranspileError {
    pub fn rejection(&self) -> Option<RejectionReason> {
        match self {
            TranspileError::Rejected { reason, .. } => Some(*reason),
            _ => None,
        }
    }

    pub(crate) fn reject(reason: RejectionReason, detail: impl Into<String>) -> Self {
        TranspileError::Rejected {
            reason,
            detail: detail.into(),
        }
    }

    pub(crate) fn unsupported(line: usize, construct: impl Into<String>) -> Self {
        TranspileError::UnsupportedConstruct {
            line,
            construct: construct.into(),
        }
    }
}
