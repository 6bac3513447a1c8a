//! Portable, machine-readable subject documents.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::consent::ConsentExport;
use crate::restriction::{Restriction, Scope};
use crate::types::{IdentifierMap, Pseudonym, ServiceId, Timestamp};

/// One row of service-held data, as returned in an export fragment.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ServiceRecord {
    pub purpose: crate::types::PurposeId,
    pub fields: BTreeMap<String, String>,
    pub recorded_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RestrictionExport {
    pub scope: Scope,
    pub reason: String,
    pub placed_at: Timestamp,
    pub lifted_at: Option<Timestamp>,
}

impl From<&Restriction> for RestrictionExport {
    fn from(r: &Restriction) -> Self {
        Self {
            scope: r.scope.clone(),
            reason: r.reason.clone(),
            placed_at: r.placed_at,
            lifted_at: r.lifted_at,
        }
    }
}

/// A subject's data as a JSON document. The vault's slice is
/// `pseudonym`/`fields`/`version`/`exported_at`; aggregated exports add the
/// consent, restriction and per-service sections.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PortableDocument {
    pub pseudonym: Pseudonym,
    pub fields: IdentifierMap,
    pub version: u64,
    pub exported_at: Timestamp,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub consents: Option<Vec<ConsentExport>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub restrictions: Option<Vec<RestrictionExport>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub services: Option<BTreeMap<ServiceId, Vec<ServiceRecord>>>,
}

impl PortableDocument {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("document serializes")
    }
}
