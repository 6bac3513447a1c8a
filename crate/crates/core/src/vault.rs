//! The identity vault: the only store allowed to hold directly identifying
//! data. Everything outside it refers to subjects by [`Pseudonym`].

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::consent::SubjectProfile;
use crate::error::{Error, Result};
use crate::export::PortableDocument;
use crate::hygiene::IdentifierIndex;
use crate::restriction::{RestrictionCenter, Scope};
use crate::types::{IdentifierMap, Pseudonym, RegionCode, RequestId, Role, Timestamp};

pub const DEFAULT_KEY_FIELD: &str = "email";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdentityRecord {
    pub pseudonym: Pseudonym,
    pub direct_identifiers: IdentifierMap,
    pub region: RegionCode,
    pub created_at: Timestamp,
    pub version: u64,
    #[serde(default)]
    pub profile: SubjectProfile,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionPolicy {
    allowed_regions: BTreeSet<RegionCode>,
    default_region: RegionCode,
}

impl RegionPolicy {
    pub fn new(
        allowed: impl IntoIterator<Item = RegionCode>,
        default_region: RegionCode,
    ) -> Result<Self> {
        let allowed_regions: BTreeSet<_> = allowed.into_iter().collect();
        if !allowed_regions.contains(&default_region) {
            return Err(Error::RegionNotAllowed(default_region.to_string()));
        }
        Ok(Self {
            allowed_regions,
            default_region,
        })
    }

    pub fn allows(&self, region: &RegionCode) -> bool {
        self.allowed_regions.contains(region)
    }

    pub fn default_region(&self) -> &RegionCode {
        &self.default_region
    }

    pub fn allowed(&self) -> impl Iterator<Item = &RegionCode> {
        self.allowed_regions.iter()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferDecision {
    /// `out_of_policy` is set when the target lies outside the region policy
    /// and the transfer went through on an explicit override.
    Allow {
        out_of_policy: bool,
    },
    Deny,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErasureReceipt {
    pub pseudonym: Pseudonym,
    pub erased_at: Timestamp,
    pub fields_removed: usize,
}

/// Identity changes waiting for their rectification request to execute. Kept
/// here so the request store itself never holds identifying values.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagedRectification {
    pub pseudonym: Pseudonym,
    pub changes: IdentifierMap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityVault {
    key_field: String,
    records: BTreeMap<Pseudonym, IdentityRecord>,
    staged: BTreeMap<RequestId, StagedRectification>,
    /// Completed access exports, held under vault custody until fetched.
    exports: BTreeMap<RequestId, PortableDocument>,
    #[serde(skip)]
    keys: BTreeMap<String, Pseudonym>,
    #[serde(skip)]
    identifiers: IdentifierIndex,
}

impl Default for IdentityVault {
    fn default() -> Self {
        Self::new(DEFAULT_KEY_FIELD)
    }
}

impl IdentityVault {
    pub fn new(key_field: impl Into<String>) -> Self {
        Self {
            key_field: key_field.into(),
            records: BTreeMap::new(),
            staged: BTreeMap::new(),
            exports: BTreeMap::new(),
            keys: BTreeMap::new(),
            identifiers: IdentifierIndex::default(),
        }
    }

    pub fn key_field(&self) -> &str {
        &self.key_field
    }

    /// Validates a registration. The caller supplies the fresh pseudonym and
    /// is responsible for the consent precondition.
    pub fn prepare_register(
        &self,
        pseudonym: Pseudonym,
        identifiers: IdentifierMap,
        region: RegionCode,
        profile: SubjectProfile,
        policy: &RegionPolicy,
        now: Timestamp,
    ) -> Result<IdentityRecord> {
        if identifiers.is_empty() || identifiers.values().any(|v| v.is_empty()) {
            return Err(Error::MalformedPayload(
                "identifier map must hold non-empty values".into(),
            ));
        }
        if !policy.allows(&region) {
            return Err(Error::RegionNotAllowed(region.to_string()));
        }
        if let Some(key) = identifiers.get(&self.key_field) {
            if self.keys.contains_key(key) {
                return Err(Error::DuplicateIdentity(self.key_field.clone()));
            }
        }
        if self.records.contains_key(&pseudonym) {
            return Err(Error::DuplicateIdentity("pseudonym".into()));
        }
        Ok(IdentityRecord {
            pseudonym,
            direct_identifiers: identifiers,
            region,
            created_at: now,
            version: 1,
            profile,
        })
    }

    pub fn contains(&self, pseudonym: &Pseudonym) -> bool {
        self.records.contains_key(pseudonym)
    }

    /// Role-gated lookup; only admins and support staff may see identities.
    pub fn resolve(&self, pseudonym: &Pseudonym, actor: Role) -> Result<&IdentityRecord> {
        if !matches!(actor, Role::Admin | Role::Support) {
            return Err(Error::Unauthorized(actor.to_string()));
        }
        self.get(pseudonym)
    }

    pub fn get(&self, pseudonym: &Pseudonym) -> Result<&IdentityRecord> {
        self.records.get(pseudonym).ok_or(Error::UnknownPseudonym)
    }

    /// Validates a rectification and returns the version it would produce.
    pub fn prepare_rectify(
        &self,
        pseudonym: &Pseudonym,
        changes: &IdentifierMap,
        restrictions: &RestrictionCenter,
        now: Timestamp,
    ) -> Result<u64> {
        let record = self.get(pseudonym)?;
        if changes.is_empty() {
            return Err(Error::EmptyChangeSet);
        }
        if changes.values().any(|v| v.is_empty()) {
            return Err(Error::MalformedPayload("empty identifier value".into()));
        }
        if restrictions.is_restricted(pseudonym, &Scope::Identity, now) {
            return Err(Error::RestrictedData);
        }
        if let Some(new_key) = changes.get(&self.key_field) {
            if self
                .keys
                .get(new_key)
                .is_some_and(|owner| owner != pseudonym)
            {
                return Err(Error::DuplicateIdentity(self.key_field.clone()));
            }
        }
        Ok(record.version + 1)
    }

    pub fn prepare_erase(
        &self,
        pseudonym: &Pseudonym,
        restrictions: &RestrictionCenter,
        now: Timestamp,
    ) -> Result<ErasureReceipt> {
        let record = self.get(pseudonym)?;
        if restrictions.is_restricted(pseudonym, &Scope::Identity, now) {
            return Err(Error::RestrictedData);
        }
        Ok(ErasureReceipt {
            pseudonym: pseudonym.clone(),
            erased_at: now,
            fields_removed: record.direct_identifiers.len(),
        })
    }

    /// The vault's slice of a subject's portable document.
    pub fn export(&self, pseudonym: &Pseudonym, now: Timestamp) -> Result<PortableDocument> {
        let record = self.get(pseudonym)?;
        Ok(PortableDocument {
            pseudonym: pseudonym.clone(),
            fields: record.direct_identifiers.clone(),
            version: record.version,
            exported_at: now,
            consents: None,
            restrictions: None,
            services: None,
        })
    }

    pub fn authorize_transfer(
        &self,
        pseudonym: &Pseudonym,
        target: &RegionCode,
        policy: &RegionPolicy,
        override_granted: bool,
    ) -> Result<TransferDecision> {
        self.get(pseudonym)?;
        Ok(if policy.allows(target) {
            TransferDecision::Allow {
                out_of_policy: false,
            }
        } else if override_granted {
            TransferDecision::Allow {
                out_of_policy: true,
            }
        } else {
            TransferDecision::Deny
        })
    }

    pub fn staged(&self, request: &RequestId) -> Option<&StagedRectification> {
        self.staged.get(request)
    }

    pub fn stored_export(&self, request: &RequestId) -> Option<&PortableDocument> {
        self.exports.get(request)
    }

    pub fn records(&self) -> impl Iterator<Item = &IdentityRecord> {
        self.records.values()
    }

    pub fn staged_rectifications(
        &self,
    ) -> impl Iterator<Item = (&RequestId, &StagedRectification)> {
        self.staged.iter()
    }

    pub fn stored_exports(&self) -> impl Iterator<Item = (&RequestId, &PortableDocument)> {
        self.exports.iter()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Every identifying value currently held, staged changes and held
    /// exports included.
    pub fn identifiers(&self) -> &IdentifierIndex {
        &self.identifiers
    }

    // Mutations below are applied only after validation, and again verbatim
    // during journal replay.

    pub(crate) fn insert(&mut self, record: IdentityRecord) {
        if let Some(old) = self.records.remove(&record.pseudonym) {
            self.unindex_record(&old);
        }
        self.index_record(&record);
        self.records.insert(record.pseudonym.clone(), record);
    }

    pub(crate) fn apply_rectify(
        &mut self,
        pseudonym: &Pseudonym,
        changes: &IdentifierMap,
        version: u64,
    ) -> bool {
        let Some(mut record) = self.records.remove(pseudonym) else {
            return false;
        };
        self.unindex_record(&record);
        for (k, v) in changes {
            record.direct_identifiers.insert(k.clone(), v.clone());
        }
        record.version = version;
        self.index_record(&record);
        self.records.insert(pseudonym.clone(), record);
        true
    }

    pub(crate) fn apply_erase(&mut self, pseudonym: &Pseudonym) {
        if let Some(record) = self.records.remove(pseudonym) {
            self.unindex_record(&record);
        }
        let staged: Vec<_> = self
            .staged
            .iter()
            .filter(|(_, s)| &s.pseudonym == pseudonym)
            .map(|(id, _)| id.clone())
            .collect();
        for id in staged {
            self.drop_staged(&id);
        }
        let exports: Vec<_> = self
            .exports
            .iter()
            .filter(|(_, d)| &d.pseudonym == pseudonym)
            .map(|(id, _)| id.clone())
            .collect();
        for id in exports {
            self.drop_export(&id);
        }
    }

    pub(crate) fn stage(&mut self, request: RequestId, staged: StagedRectification) {
        for v in staged.changes.values() {
            self.identifiers.insert(v);
        }
        self.staged.insert(request, staged);
    }

    pub(crate) fn drop_staged(&mut self, request: &RequestId) -> Option<StagedRectification> {
        let staged = self.staged.remove(request)?;
        for v in staged.changes.values() {
            self.identifiers.remove(v);
        }
        Some(staged)
    }

    pub(crate) fn store_export(&mut self, request: RequestId, doc: PortableDocument) {
        for v in doc.fields.values() {
            self.identifiers.insert(v);
        }
        if let Some(old) = self.exports.insert(request, doc) {
            for v in old.fields.values() {
                self.identifiers.remove(v);
            }
        }
    }

    fn drop_export(&mut self, request: &RequestId) {
        if let Some(doc) = self.exports.remove(request) {
            for v in doc.fields.values() {
                self.identifiers.remove(v);
            }
        }
    }

    fn index_record(&mut self, record: &IdentityRecord) {
        if let Some(key) = record.direct_identifiers.get(&self.key_field) {
            self.keys.insert(key.clone(), record.pseudonym.clone());
        }
        for v in record.direct_identifiers.values() {
            self.identifiers.insert(v);
        }
    }

    fn unindex_record(&mut self, record: &IdentityRecord) {
        if let Some(key) = record.direct_identifiers.get(&self.key_field) {
            if self.keys.get(key) == Some(&record.pseudonym) {
                self.keys.remove(key);
            }
        }
        for v in record.direct_identifiers.values() {
            self.identifiers.remove(v);
        }
    }

    /// Rebuilds derived indexes after deserialization.
    pub(crate) fn reindex(&mut self) {
        self.keys.clear();
        self.identifiers = IdentifierIndex::default();
        let records: Vec<_> = self.records.values().cloned().collect();
        for r in &records {
            self.index_record(r);
        }
        let staged: Vec<_> = self
            .staged
            .values()
            .flat_map(|s| s.changes.values().cloned())
            .collect();
        for v in staged {
            self.identifiers.insert(&v);
        }
        let exported: Vec<_> = self
            .exports
            .values()
            .flat_map(|d| d.fields.values().cloned())
            .collect();
        for v in exported {
            self.identifiers.insert(&v);
        }
    }
}
