use thiserror::Error;

use crate::types::ServiceId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("no granted consent for purpose `{0}`")]
    MissingConsent(String),
    #[error("region `{0}` is not allowed by the region policy")]
    RegionNotAllowed(String),
    #[error("an identity with the same `{0}` is already registered")]
    DuplicateIdentity(String),
    #[error("role `{0}` is not authorized for this operation")]
    Unauthorized(String),
    #[error("unknown pseudonym")]
    UnknownPseudonym,
    #[error("data is restricted")]
    RestrictedData,
    #[error("change set is empty")]
    EmptyChangeSet,

    #[error("purpose `{0}` is not in the purpose registry")]
    UnknownPurpose(String),
    #[error("consent for a minor must be given by the guardian")]
    MinorRequiresGuardian,
    #[error("an active consent already exists for this purpose")]
    AlreadyActive,
    #[error("no active consent for this purpose")]
    NoActiveConsent,
    #[error("canceller is neither the subject nor the recorded guardian")]
    UnauthorizedCanceller,

    #[error("an active restriction already covers this scope")]
    DuplicateScope,
    #[error("restriction is not active")]
    NotActive,
    #[error("unknown restriction")]
    UnknownRestriction,

    #[error("malformed request payload: {0}")]
    MalformedPayload(String),
    #[error("invalid transition from {from} to {to}")]
    InvalidTransition { from: String, to: String },
    #[error("request is blocked by an active restriction")]
    BlockedByRestriction,
    #[error(
        "propagation of {correlation} failed (missing acks: {missing:?}, refused: {refused:?})"
    )]
    PropagationFailed {
        /// Request id, or the command id for broadcasts outside a request.
        correlation: String,
        missing: Vec<ServiceId>,
        refused: Vec<ServiceId>,
    },
    #[error("unknown request")]
    UnknownRequest,

    #[error("service id `{0}` is already registered")]
    DuplicateServiceId(String),
    #[error("unknown service `{0}`")]
    UnknownService(String),
    #[error("unknown command")]
    UnknownCommand,

    #[error("audit event rejected: {0}")]
    HygieneViolation(String),
    #[error("unknown audit action `{0}`")]
    UnknownAction(String),

    #[error("unknown snapshot `{0}`")]
    UnknownSnapshot(String),
    #[error("storage already holds data")]
    StorageNotEmpty,
    #[error("storage unavailable: {0}")]
    StorageUnavailable(String),
    #[error("corrupt journal record at line {line}: {reason}")]
    CorruptJournal { line: usize, reason: String },

    #[error("invalid pseudonym token")]
    InvalidPseudonym(String),
    #[error("invalid region code `{0}`")]
    InvalidRegion(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable variant name, used as the machine-readable error code.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::MissingConsent(_) => "MissingConsent",
            Error::RegionNotAllowed(_) => "RegionNotAllowed",
            Error::DuplicateIdentity(_) => "DuplicateIdentity",
            Error::Unauthorized(_) => "Unauthorized",
            Error::UnknownPseudonym => "UnknownPseudonym",
            Error::RestrictedData => "RestrictedData",
            Error::EmptyChangeSet => "EmptyChangeSet",
            Error::UnknownPurpose(_) => "UnknownPurpose",
            Error::MinorRequiresGuardian => "MinorRequiresGuardian",
            Error::AlreadyActive => "AlreadyActive",
            Error::NoActiveConsent => "NoActiveConsent",
            Error::UnauthorizedCanceller => "UnauthorizedCanceller",
            Error::DuplicateScope => "DuplicateScope",
            Error::NotActive => "NotActive",
            Error::UnknownRestriction => "UnknownRestriction",
            Error::MalformedPayload(_) => "MalformedPayload",
            Error::InvalidTransition { .. } => "InvalidTransition",
            Error::BlockedByRestriction => "BlockedByRestriction",
            Error::PropagationFailed { .. } => "PropagationFailed",
            Error::UnknownRequest => "UnknownRequest",
            Error::DuplicateServiceId(_) => "DuplicateServiceId",
            Error::UnknownService(_) => "UnknownService",
            Error::UnknownCommand => "UnknownCommand",
            Error::HygieneViolation(_) => "HygieneViolation",
            Error::UnknownAction(_) => "UnknownAction",
            Error::UnknownSnapshot(_) => "UnknownSnapshot",
            Error::StorageNotEmpty => "StorageNotEmpty",
            Error::StorageUnavailable(_) => "StorageUnavailable",
            Error::CorruptJournal { .. } => "CorruptJournal",
            Error::InvalidPseudonym(_) => "InvalidPseudonym",
            Error::InvalidRegion(_) => "InvalidRegion",
            Error::Io(_) => "Io",
            Error::Json(_) => "Json",
        }
    }

    pub(crate) fn transition(from: impl std::fmt::Debug, to: impl std::fmt::Debug) -> Self {
        Error::InvalidTransition {
            from: format!("{from:?}"),
            to: format!("{to:?}"),
        }
    }
}
