use alloc::boxed::Box;
use alloc::string::String;
use core::fmt;

use crate::inn::DiffeoParams;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// An input that must be finite was NaN or infinite.
    NonFinite(&'static str),
    /// A caller-supplied argument violates the operation's contract.
    InvalidArgument(String),
    /// A coupling block produced a non-finite intermediate.
    BlockOverflow { block: usize },
    /// Ray or plane configuration without a valid answer.
    Geometry(String),
    /// Operands of a tape primitive have incompatible shapes.
    Shape { op: &'static str, detail: String },
    /// Backward pass produced a non-finite adjoint.
    NonFiniteGradient { node: usize, op: &'static str },
    /// Integration left the finite range.
    IntegrationDiverged { step: usize },
    /// Loss became non-finite; carries the last parameters with a finite loss.
    TrainingDiverged { epoch: usize, last_finite: Box<DiffeoParams> },
    /// A rollout never touched the surface, so no tracking distance exists.
    NoContact,
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::BlockOverflow { .. }
                | Error::NonFiniteGradient { .. }
                | Error::IntegrationDiverged { .. }
                | Error::TrainingDiverged { .. }
                | Error::NoContact
        )
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::NonFinite(what) => write!(f, "non-finite {what}"),
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::BlockOverflow { block } => {
                write!(f, "coupling block {block} produced a non-finite value")
            }
            Error::Geometry(msg) => write!(f, "geometry error: {msg}"),
            Error::Shape { op, detail } => write!(f, "shape mismatch in {op}: {detail}"),
            Error::NonFiniteGradient { node, op } => {
                write!(f, "non-finite gradient at tape node {node} ({op})")
            }
            Error::IntegrationDiverged { step } => {
                write!(f, "integration produced a non-finite state at step {step}")
            }
            Error::TrainingDiverged { epoch, .. } => {
                write!(f, "loss became non-finite at epoch {epoch}")
            }
            Error::NoContact => write!(f, "trajectory never reached the surface"),
        }
    }
}

impl core::error::Error for Error {}
