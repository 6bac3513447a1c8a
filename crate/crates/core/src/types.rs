//! Shared domain vocabulary: pseudonyms, regions, purposes, roles and ids.

use std::collections::BTreeMap;
use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Timestamp = DateTime<Utc>;

/// Field name to value map of directly identifying data (name, email, national id, ...).
pub type IdentifierMap = BTreeMap<String, String>;

/// Opaque, stable subject reference. The only handle on a data subject that
/// may leave the identity vault.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Pseudonym(String);

impl Pseudonym {
    pub const MIN_LEN: usize = 22;
    pub const MAX_LEN: usize = 32;

    pub fn parse(value: impl Into<String>) -> Result<Self> {
        let value = value.into();
        let len_ok = (Self::MIN_LEN..=Self::MAX_LEN).contains(&value.len());
        let alphabet_ok = value
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_');
        if len_ok && alphabet_ok {
            Ok(Self(value))
        } else {
            Err(Error::InvalidPseudonym(value))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for Pseudonym {
    type Error = Error;

    fn try_from(value: String) -> Result<Self> {
        Self::parse(value)
    }
}

impl From<Pseudonym> for String {
    fn from(p: Pseudonym) -> Self {
        p.0
    }
}

impl fmt::Display for Pseudonym {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// ISO-3166-1 alpha-2 region code, stored upper-case.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct RegionCode(String);

impl RegionCode {
    pub fn parse(value: impl AsRef<str>) -> Result<Self> {
        let v = value.as_ref();
        if v.len() == 2 && v.bytes().all(|b| b.is_ascii_alphabetic()) {
            Ok(Self(v.to_ascii_uppercase()))
        } else {
            Err(Error::InvalidRegion(v.to_string()))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for RegionCode {
    type Error = Error;

    fn try_from(value: String) -> Result<Self> {
        Self::parse(value)
    }
}

impl From<RegionCode> for String {
    fn from(r: RegionCode) -> Self {
        r.0
    }
}

impl fmt::Display for RegionCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Processing purpose from the configured purpose registry ("newsletter", "billing", ...).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PurposeId(String);

impl PurposeId {
    pub fn new(value: impl Into<String>) -> Self {
        Self(value.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl From<&str> for PurposeId {
    fn from(s: &str) -> Self {
        Self::new(s)
    }
}

impl fmt::Display for PurposeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

macro_rules! token_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(String);

        impl $name {
            pub fn new(value: impl Into<String>) -> Self {
                Self(value.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }
    };
}

token_id!(
    /// Identifier of a GDPR request.
    RequestId
);
token_id!(ConsentId);
token_id!(RestrictionId);
token_id!(
    /// Dedup key of a broadcast command.
    CommandId
);
token_id!(
    /// Registered business logic service.
    ServiceId
);
token_id!(SnapshotId);

/// Caller role. Every API call carries exactly one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    User,
    Admin,
    Support,
    Developer,
}

impl Role {
    pub const ALL: [Role; 4] = [Role::User, Role::Admin, Role::Support, Role::Developer];
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Role::User => "user",
            Role::Admin => "admin",
            Role::Support => "support",
            Role::Developer => "developer",
        };
        f.write_str(s)
    }
}

/// An authenticated caller: role plus a stable label used in `decided_by`
/// and, for users, the pseudonym they act as.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Actor {
    pub role: Role,
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pseudonym: Option<Pseudonym>,
}

impl Actor {
    pub fn new(role: Role, id: impl Into<String>) -> Self {
        Self {
            role,
            id: id.into(),
            pseudonym: None,
        }
    }

    pub fn admin(id: impl Into<String>) -> Self {
        Self::new(Role::Admin, id)
    }

    pub fn user(pseudonym: Pseudonym) -> Self {
        Self {
            role: Role::User,
            id: format!("user:{pseudonym}"),
            pseudonym: Some(pseudonym),
        }
    }
}

/// How sensitive a stored value is, by where it is allowed to live.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensitivityClass {
    /// Directly identifying; identity vault only.
    Direct,
    /// Pseudonymous records in request, consent and restriction stores.
    Limited,
    /// Pseudonym-keyed business data in service stores.
    Indirect,
    None,
}
