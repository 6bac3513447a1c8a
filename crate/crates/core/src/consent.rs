//! Consent center: timestamped, purpose-bound permissions including guardian
//! consent for minors, and periodic retention scanning.
//!
//! The center exposes only grant / cancel / check / retention_scan, which is
//! the full contract an external consent operator would have to implement.

use std::collections::BTreeMap;

use chrono::Duration;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{ConsentId, Pseudonym, PurposeId, Timestamp};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grantor {
    /// The data subject themself.
    #[serde(rename = "self")]
    Subject,
    Guardian(Pseudonym),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Consent {
    pub id: ConsentId,
    pub pseudonym: Pseudonym,
    pub purpose: PurposeId,
    pub grantor: Grantor,
    pub granted_at: Timestamp,
    pub cancelled_at: Option<Timestamp>,
    /// Opaque signature blob, stored as given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signature: Option<String>,
}

impl Consent {
    pub fn active_at(&self, at: Timestamp) -> bool {
        self.granted_at <= at && self.cancelled_at.is_none_or(|c| at < c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsentStatus {
    Consented,
    NotConsented,
}

/// What the retention scan does with a consent older than the maximum age.
/// Both actions end the consent; `RenewalRequested` additionally queues a
/// renewal notice for the subject.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetentionAction {
    #[default]
    RenewalRequested,
    Expired,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PurposePolicy {
    #[serde(default)]
    pub retention: RetentionAction,
    /// Optional standardized icon reference shown next to the purpose.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub icon: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PurposeRegistry {
    purposes: BTreeMap<PurposeId, PurposePolicy>,
}

impl PurposeRegistry {
    pub fn new<I, P>(purposes: I) -> Self
    where
        I: IntoIterator<Item = P>,
        P: Into<PurposeId>,
    {
        Self {
            purposes: purposes
                .into_iter()
                .map(|p| (p.into(), PurposePolicy::default()))
                .collect(),
        }
    }

    pub fn with_policy(mut self, purpose: impl Into<PurposeId>, policy: PurposePolicy) -> Self {
        self.purposes.insert(purpose.into(), policy);
        self
    }

    pub fn contains(&self, purpose: &PurposeId) -> bool {
        self.purposes.contains_key(purpose)
    }

    pub fn policy(&self, purpose: &PurposeId) -> Option<&PurposePolicy> {
        self.purposes.get(purpose)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&PurposeId, &PurposePolicy)> {
        self.purposes.iter()
    }
}

/// Subject profile facts the consent rules depend on.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectProfile {
    #[serde(default)]
    pub minor: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guardian: Option<Pseudonym>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenewalNotice {
    pub pseudonym: Pseudonym,
    pub purpose: PurposeId,
    pub consent_id: ConsentId,
    pub requested_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetentionOutcome {
    pub consent: Consent,
    pub action: RetentionAction,
}

/// Portable-export view of a consent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsentExport {
    pub purpose: PurposeId,
    pub granted_at: Timestamp,
    pub cancelled_at: Option<Timestamp>,
    pub grantor: Grantor,
}

impl From<&Consent> for ConsentExport {
    fn from(c: &Consent) -> Self {
        Self {
            purpose: c.purpose.clone(),
            granted_at: c.granted_at,
            cancelled_at: c.cancelled_at,
            grantor: c.grantor.clone(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConsentCenter {
    registry: PurposeRegistry,
    consents: BTreeMap<ConsentId, Consent>,
    notices: Vec<RenewalNotice>,
}

impl ConsentCenter {
    pub fn new(registry: PurposeRegistry) -> Self {
        Self {
            registry,
            ..Self::default()
        }
    }

    pub fn registry(&self) -> &PurposeRegistry {
        &self.registry
    }

    #[allow(clippy::too_many_arguments)]
    pub fn grant(
        &mut self,
        id: ConsentId,
        pseudonym: &Pseudonym,
        purpose: &PurposeId,
        grantor: Grantor,
        signature: Option<String>,
        profile: &SubjectProfile,
        now: Timestamp,
    ) -> Result<Consent> {
        let consent =
            self.prepare_grant(id, pseudonym, purpose, grantor, signature, profile, now)?;
        self.insert(consent.clone());
        Ok(consent)
    }

    /// Validates a grant without storing it.
    #[allow(clippy::too_many_arguments)]
    pub fn prepare_grant(
        &self,
        id: ConsentId,
        pseudonym: &Pseudonym,
        purpose: &PurposeId,
        grantor: Grantor,
        signature: Option<String>,
        profile: &SubjectProfile,
        now: Timestamp,
    ) -> Result<Consent> {
        if !self.registry.contains(purpose) {
            return Err(Error::UnknownPurpose(purpose.to_string()));
        }
        match &grantor {
            Grantor::Subject if profile.minor => return Err(Error::MinorRequiresGuardian),
            Grantor::Guardian(g) if profile.guardian.as_ref().is_some_and(|rec| rec != g) => {
                return Err(Error::Unauthorized("guardian".into()));
            }
            _ => {}
        }
        self.ensure_ordered(pseudonym, purpose, now)?;
        if self.active(pseudonym, purpose, now).is_some() {
            return Err(Error::AlreadyActive);
        }
        Ok(Consent {
            id,
            pseudonym: pseudonym.clone(),
            purpose: purpose.clone(),
            grantor,
            granted_at: now,
            cancelled_at: None,
            signature,
        })
    }

    pub fn cancel(
        &mut self,
        pseudonym: &Pseudonym,
        purpose: &PurposeId,
        canceller: &Grantor,
        now: Timestamp,
    ) -> Result<Consent> {
        let id = self.prepare_cancel(pseudonym, purpose, canceller, now)?;
        self.set_cancelled(&id, now);
        Ok(self.consents[&id].clone())
    }

    pub fn prepare_cancel(
        &self,
        pseudonym: &Pseudonym,
        purpose: &PurposeId,
        canceller: &Grantor,
        now: Timestamp,
    ) -> Result<ConsentId> {
        self.ensure_ordered(pseudonym, purpose, now)?;
        let consent = self
            .active(pseudonym, purpose, now)
            .ok_or(Error::NoActiveConsent)?;
        let allowed = match canceller {
            Grantor::Subject => true,
            Grantor::Guardian(g) => consent.grantor == Grantor::Guardian(g.clone()),
        };
        if !allowed {
            return Err(Error::UnauthorizedCanceller);
        }
        Ok(consent.id.clone())
    }

    /// Pure query: `Consented` iff a consent for the pair is active at `now`.
    pub fn check(
        &self,
        pseudonym: &Pseudonym,
        purpose: &PurposeId,
        now: Timestamp,
    ) -> ConsentStatus {
        if self.active(pseudonym, purpose, now).is_some() {
            ConsentStatus::Consented
        } else {
            ConsentStatus::NotConsented
        }
    }

    /// Lists every consent active at `now` whose age strictly exceeds
    /// `max_age`, and ends it according to its purpose policy.
    pub fn retention_scan(
        &mut self,
        now: Timestamp,
        max_age: Duration,
    ) -> Result<Vec<RetentionOutcome>> {
        let due = self.retention_due(now, max_age)?;
        for outcome in &due {
            self.apply_retention(outcome, now);
        }
        Ok(due)
    }

    /// The consents a scan at `now` would end, with the consent shown as it
    /// will be after the scan.
    pub fn retention_due(
        &self,
        now: Timestamp,
        max_age: Duration,
    ) -> Result<Vec<RetentionOutcome>> {
        if max_age <= Duration::zero() {
            return Err(Error::MalformedPayload("max_age must be positive".into()));
        }
        Ok(self
            .consents
            .values()
            .filter(|c| c.active_at(now) && now - c.granted_at > max_age)
            .map(|c| {
                let action = self
                    .registry
                    .policy(&c.purpose)
                    .map(|p| p.retention)
                    .unwrap_or_default();
                let mut consent = c.clone();
                consent.cancelled_at = Some(now);
                RetentionOutcome { consent, action }
            })
            .collect())
    }

    pub(crate) fn apply_retention(&mut self, outcome: &RetentionOutcome, now: Timestamp) {
        self.set_cancelled(&outcome.consent.id, now);
        if outcome.action == RetentionAction::RenewalRequested {
            self.notices.push(RenewalNotice {
                pseudonym: outcome.consent.pseudonym.clone(),
                purpose: outcome.consent.purpose.clone(),
                consent_id: outcome.consent.id.clone(),
                requested_at: now,
            });
        }
    }

    pub fn renewal_notices(&self) -> &[RenewalNotice] {
        &self.notices
    }

    pub fn get(&self, id: &ConsentId) -> Option<&Consent> {
        self.consents.get(id)
    }

    pub fn for_subject<'a>(
        &'a self,
        pseudonym: &'a Pseudonym,
    ) -> impl Iterator<Item = &'a Consent> + 'a {
        self.consents
            .values()
            .filter(move |c| &c.pseudonym == pseudonym)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Consent> {
        self.consents.values()
    }

    pub fn len(&self) -> usize {
        self.consents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.consents.is_empty()
    }

    fn active(
        &self,
        pseudonym: &Pseudonym,
        purpose: &PurposeId,
        now: Timestamp,
    ) -> Option<&Consent> {
        self.consents
            .values()
            .find(|c| &c.pseudonym == pseudonym && &c.purpose == purpose && c.active_at(now))
    }

    /// Events on one (subject, purpose) pair must arrive in time order.
    fn ensure_ordered(
        &self,
        pseudonym: &Pseudonym,
        purpose: &PurposeId,
        now: Timestamp,
    ) -> Result<()> {
        let latest = self
            .consents
            .values()
            .filter(|c| &c.pseudonym == pseudonym && &c.purpose == purpose)
            .flat_map(|c| [Some(c.granted_at), c.cancelled_at])
            .flatten()
            .max();
        match latest {
            Some(l) if now < l => Err(Error::MalformedPayload(
                "timestamp precedes earlier consent event".into(),
            )),
            _ => Ok(()),
        }
    }

    pub(crate) fn insert(&mut self, consent: Consent) {
        self.consents.insert(consent.id.clone(), consent);
    }

    pub(crate) fn set_cancelled(&mut self, id: &ConsentId, at: Timestamp) {
        if let Some(c) = self.consents.get_mut(id) {
            c.cancelled_at = Some(at);
        }
    }

    pub(crate) fn remove_subject(&mut self, pseudonym: &Pseudonym) {
        self.consents.retain(|_, c| &c.pseudonym != pseudonym);
        self.notices.retain(|n| &n.pseudonym != pseudonym);
    }
}
