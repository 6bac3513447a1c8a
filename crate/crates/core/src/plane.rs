//! The personal data plane: every store behind one serialized writer.
//!
//! Each mutation is validated against current state, appended to the
//! journal, then applied by the same code path that replays the journal on
//! open. Audit events are written after the journal entry they describe.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use chrono::Duration;
use serde::{Deserialize, Serialize};

use crate::audit::{
    AuditDraft, AuditEvent, AuditFilter, AuditLog, Classifier, DEFAULT_DISCLOSURE_ACTION,
};
use crate::bls::{Behavior, SimulatedBls};
use crate::bus::{
    Ack, AckResult, Action, BroadcastCommand, PlanStatus, ServiceBus, ServiceRegistration,
    ServiceStatus, RETRY_BUDGET,
};
use crate::consent::{
    Consent, ConsentCenter, ConsentExport, ConsentStatus, Grantor, PurposeRegistry,
    RetentionAction, RetentionOutcome, SubjectProfile,
};
use crate::error::{Error, Result};
use crate::export::{PortableDocument, RestrictionExport};
use crate::hygiene::{DenylistPattern, Detector, DEFAULT_MIN_IDENTIFIER_LEN};
use crate::ids::IdGenerator;
use crate::journal::{Event, Journal};
use crate::minimization::{self, MinimizationReport};
use crate::request::{
    GdprRequest, RequestKind, RequestPayload, RequestState, RequestStore, Verdict, DEFAULT_SLA_DAYS,
};
use crate::restriction::{Gate, Restriction, RestrictionCenter, Scope};
use crate::staging::{self, StagingSnapshot};
use crate::types::{
    Actor, CommandId, ConsentId, IdentifierMap, Pseudonym, PurposeId, RegionCode, RequestId,
    RestrictionId, Role, ServiceId, SnapshotId, Timestamp,
};
use crate::vault::{
    IdentityRecord, IdentityVault, RegionPolicy, StagedRectification, TransferDecision,
    DEFAULT_KEY_FIELD,
};

pub const DEFAULT_MAX_CONSENT_AGE_DAYS: i64 = 365;
pub const JOURNAL_FILE: &str = "journal.ndjson";
pub const AUDIT_DIR: &str = "audit";
pub const SNAPSHOT_DIR: &str = "snapshots";
pub const STAGING_FILE: &str = "staging.ndjson";

/// EU and EEA member states.
pub const EEA_REGIONS: [&str; 30] = [
    "AT", "BE", "BG", "CY", "CZ", "DE", "DK", "EE", "ES", "FI", "FR", "GR", "HR", "HU", "IE", "IS",
    "IT", "LI", "LT", "LU", "LV", "MT", "NL", "NO", "PL", "PT", "RO", "SE", "SI", "SK",
];

#[derive(Debug, Clone)]
pub struct PlaneConfig {
    pub sla_days: i64,
    pub max_consent_age_days: i64,
    pub regions: RegionPolicy,
    pub purposes: PurposeRegistry,
    pub auto_approve_access: bool,
    pub denylist: Vec<DenylistPattern>,
    pub disclosure_actions: Vec<String>,
    pub key_field: String,
    pub min_identifier_len: usize,
}

impl Default for PlaneConfig {
    fn default() -> Self {
        let regions = RegionPolicy::new(
            EEA_REGIONS
                .iter()
                .map(|r| RegionCode::parse(r).expect("static code")),
            RegionCode::parse("FI").expect("static code"),
        )
        .expect("default region is allowed");
        Self {
            sla_days: DEFAULT_SLA_DAYS,
            max_consent_age_days: DEFAULT_MAX_CONSENT_AGE_DAYS,
            regions,
            purposes: PurposeRegistry::new(["billing", "newsletter", "analytics", "ads"]),
            auto_approve_access: false,
            denylist: DenylistPattern::defaults(),
            disclosure_actions: vec![DEFAULT_DISCLOSURE_ACTION.to_string()],
            key_field: DEFAULT_KEY_FIELD.to_string(),
            min_identifier_len: DEFAULT_MIN_IDENTIFIER_LEN,
        }
    }
}

/// Consent supplied together with a registration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsentGrant {
    #[serde(default = "self_grantor")]
    pub grantor: Grantor,
    #[serde(default)]
    pub signature: Option<String>,
}

fn self_grantor() -> Grantor {
    Grantor::Subject
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Registration {
    pub identifiers: IdentifierMap,
    pub region: RegionCode,
    pub purpose: PurposeId,
    #[serde(default)]
    pub consent: Option<ConsentGrant>,
    #[serde(default)]
    pub profile: SubjectProfile,
}

/// Point-in-time copy of the stores holding personal data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub id: SnapshotId,
    /// Journal position the copy reflects.
    pub seq: u64,
    pub taken_at: Timestamp,
    pub vault: IdentityVault,
    pub services: BTreeMap<ServiceId, SimulatedBls>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProcessingGate {
    pub consent: ConsentStatus,
    pub restriction: Gate,
}

impl ProcessingGate {
    pub fn allowed(&self) -> bool {
        self.consent == ConsentStatus::Consented && self.restriction == Gate::Clear
    }
}

pub struct DataPlane {
    config: PlaneConfig,
    ids: IdGenerator,
    vault: IdentityVault,
    consents: ConsentCenter,
    restrictions: RestrictionCenter,
    requests: RequestStore,
    bus: ServiceBus,
    services: BTreeMap<ServiceId, SimulatedBls>,
    snapshots: BTreeMap<SnapshotId, Snapshot>,
    staging: Option<StagingSnapshot>,
    journal: Journal,
    audit: AuditLog,
    storage: Option<PathBuf>,
}

impl DataPlane {
    pub fn in_memory(config: PlaneConfig, ids: IdGenerator) -> Result<Self> {
        Self::open(config, None, ids, chrono::DateTime::UNIX_EPOCH)
    }

    /// Opens `storage` (or runs in memory), replays the journal and fails
    /// any request that was interrupted mid-execution, stamping the
    /// recovery with `now`.
    pub fn open(
        config: PlaneConfig,
        storage: Option<&Path>,
        ids: IdGenerator,
        now: Timestamp,
    ) -> Result<Self> {
        let detector = Detector::new(&config.denylist, config.min_identifier_len)?;
        let classifier = Classifier::new(config.disclosure_actions.iter().cloned());
        let (journal, audit) = match storage {
            Some(dir) => {
                let unavailable = |e: std::io::Error| {
                    Error::StorageUnavailable(format!("{}: {e}", dir.display()))
                };
                fs::create_dir_all(dir.join(SNAPSHOT_DIR)).map_err(unavailable)?;
                let journal_path = dir.join(JOURNAL_FILE);
                fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&journal_path)
                    .map_err(unavailable)?;
                (
                    Journal::open(&journal_path)?,
                    AuditLog::open(&dir.join(AUDIT_DIR), detector, classifier)?,
                )
            }
            None => (
                Journal::in_memory(),
                AuditLog::in_memory(detector, classifier),
            ),
        };
        let entries = journal.entries().to_vec();
        let mut plane = Self {
            vault: IdentityVault::new(config.key_field.clone()),
            consents: ConsentCenter::new(config.purposes.clone()),
            restrictions: RestrictionCenter::default(),
            requests: RequestStore::new(config.sla_days),
            bus: ServiceBus::default(),
            services: BTreeMap::new(),
            snapshots: BTreeMap::new(),
            staging: None,
            journal,
            audit,
            storage: storage.map(Path::to_path_buf),
            config,
            ids,
        };
        for entry in &entries {
            plane.apply(&entry.event, entry.seq)?;
        }
        plane.recover(now)?;
        Ok(plane)
    }

    fn recover(&mut self, now: Timestamp) -> Result<()> {
        let interrupted: Vec<_> = self
            .requests
            .iter()
            .filter(|r| r.state == RequestState::InProgress)
            .map(|r| r.id.clone())
            .collect();
        for id in interrupted {
            self.transition(
                &id,
                RequestState::Failed("interrupted".into()),
                now,
                None,
                "request.recover",
                true,
            )?;
        }
        Ok(())
    }

    // ---- read access ---------------------------------------------------

    pub fn config(&self) -> &PlaneConfig {
        &self.config
    }

    pub fn vault(&self) -> &IdentityVault {
        &self.vault
    }

    pub fn consents(&self) -> &ConsentCenter {
        &self.consents
    }

    pub fn restrictions(&self) -> &RestrictionCenter {
        &self.restrictions
    }

    pub fn requests(&self) -> &RequestStore {
        &self.requests
    }

    pub fn bus(&self) -> &ServiceBus {
        &self.bus
    }

    pub fn services(&self) -> &BTreeMap<ServiceId, SimulatedBls> {
        &self.services
    }

    pub fn service(&self, id: &ServiceId) -> Result<&SimulatedBls> {
        self.services
            .get(id)
            .ok_or_else(|| Error::UnknownService(id.to_string()))
    }

    pub fn snapshots(&self) -> &BTreeMap<SnapshotId, Snapshot> {
        &self.snapshots
    }

    pub fn staging(&self) -> Option<&StagingSnapshot> {
        self.staging.as_ref()
    }

    pub fn journal(&self) -> &Journal {
        &self.journal
    }

    pub fn audit_log(&self) -> &AuditLog {
        &self.audit
    }

    pub fn storage(&self) -> Option<&Path> {
        self.storage.as_deref()
    }

    pub fn detector(&self) -> &Detector {
        self.audit.detector()
    }

    pub fn query_audit(&self, filter: &AuditFilter, role: Role) -> Result<Vec<AuditEvent>> {
        self.audit.query(filter, role)
    }

    pub fn overdue(&self, now: Timestamp) -> Vec<&GdprRequest> {
        self.requests.overdue(now)
    }

    pub fn processing_gate(
        &self,
        p: &Pseudonym,
        purpose: &PurposeId,
        now: Timestamp,
    ) -> ProcessingGate {
        ProcessingGate {
            consent: self.consents.check(p, purpose, now),
            restriction: self
                .restrictions
                .check(p, &Scope::Purpose(purpose.clone()), now),
        }
    }

    pub fn minimization_report(&self) -> MinimizationReport {
        minimization::report(self)
    }

    // ---- identity vault --------------------------------------------------

    pub fn register_subject(&mut self, reg: Registration, now: Timestamp) -> Result<Pseudonym> {
        if !self.config.purposes.contains(&reg.purpose) {
            return Err(Error::UnknownPurpose(reg.purpose.to_string()));
        }
        let grant = reg
            .consent
            .ok_or_else(|| Error::MissingConsent(reg.purpose.to_string()))?;
        if let Some(g) = &reg.profile.guardian {
            self.vault.get(g)?;
        }
        if let Grantor::Guardian(g) = &grant.grantor {
            self.vault.get(g)?;
        }
        self.check_signature(grant.signature.as_deref())?;
        let pseudonym = loop {
            let p = self
                .ids
                .pseudonym_avoiding(reg.identifiers.values().map(String::as_str));
            if !self.vault.contains(&p) {
                break p;
            }
        };
        let record = self.vault.prepare_register(
            pseudonym.clone(),
            reg.identifiers,
            reg.region,
            reg.profile.clone(),
            &self.config.regions,
            now,
        )?;
        let consent_id = self.fresh_consent_id();
        let consent = self.consents.prepare_grant(
            consent_id,
            &pseudonym,
            &reg.purpose,
            grant.grantor,
            grant.signature,
            &reg.profile,
            now,
        )?;
        let region = record.region.clone();
        self.commit(Event::SubjectRegistered { record })?;
        self.commit(Event::ConsentGranted {
            consent: consent.clone(),
        })?;
        self.audit(
            AuditDraft::new("cpdm", "cpdm.register", now)
                .subject(&pseudonym)
                .detail(format!("region={region}")),
        )?;
        self.audit_consent_grant(&consent, now)?;
        Ok(pseudonym)
    }

    pub fn resolve(&mut self, p: &Pseudonym, role: Role, now: Timestamp) -> Result<IdentityRecord> {
        let record = self.vault.resolve(p, role)?.clone();
        self.audit(
            AuditDraft::new("cpdm", "cpdm.resolve", now)
                .subject(p)
                .detail(format!("role={role}")),
        )?;
        Ok(record)
    }

    /// Direct identity correction outside the request workflow.
    pub fn rectify_identity(
        &mut self,
        p: &Pseudonym,
        changes: IdentifierMap,
        now: Timestamp,
    ) -> Result<u64> {
        let version = self
            .vault
            .prepare_rectify(p, &changes, &self.restrictions, now)?;
        let fields = field_list(changes.keys());
        self.commit(Event::IdentityRectified {
            pseudonym: p.clone(),
            changes,
            version,
        })?;
        self.audit(
            AuditDraft::new("cpdm", "cpdm.rectify", now)
                .subject(p)
                .detail(format!("fields={fields} version={version}")),
        )?;
        Ok(version)
    }

    /// The vault's slice of the subject's data.
    pub fn export_identity(&mut self, p: &Pseudonym, now: Timestamp) -> Result<PortableDocument> {
        let doc = self.vault.export(p, now)?;
        self.audit(
            AuditDraft::new("cpdm", "cpdm.export", now)
                .subject(p)
                .detail("slice=cpdm"),
        )?;
        Ok(doc)
    }

    /// Everything held about the subject, read directly from each store.
    pub fn subject_document(&mut self, p: &Pseudonym, now: Timestamp) -> Result<PortableDocument> {
        let mut doc = self.vault.export(p, now)?;
        doc.consents = Some(
            self.consents
                .for_subject(p)
                .map(ConsentExport::from)
                .collect(),
        );
        doc.restrictions = Some(
            self.restrictions
                .for_subject(p)
                .map(RestrictionExport::from)
                .collect(),
        );
        doc.services = Some(
            self.services
                .iter()
                .map(|(id, b)| (id.clone(), b.fragment(p)))
                .filter(|(_, rows)| !rows.is_empty())
                .collect(),
        );
        self.audit(
            AuditDraft::new("cpdm", "cpdm.export", now)
                .subject(p)
                .detail("slice=all"),
        )?;
        Ok(doc)
    }

    pub fn authorize_transfer(
        &mut self,
        p: &Pseudonym,
        target: &RegionCode,
        override_granted: bool,
        now: Timestamp,
    ) -> Result<TransferDecision> {
        let decision =
            self.vault
                .authorize_transfer(p, target, &self.config.regions, override_granted)?;
        let action = match decision {
            TransferDecision::Allow {
                out_of_policy: false,
            } => "transfer.allowed",
            TransferDecision::Allow {
                out_of_policy: true,
            } => "transfer.allowed-override",
            TransferDecision::Deny => "transfer-denied",
        };
        self.audit(
            AuditDraft::new("cpdm", action, now)
                .subject(p)
                .detail(format!("target={target}")),
        )?;
        Ok(decision)
    }

    /// Records a disclosure of the subject's data to a third party.
    pub fn record_disclosure(
        &mut self,
        p: &Pseudonym,
        recipient: &str,
        now: Timestamp,
    ) -> Result<AuditEvent> {
        self.vault.get(p)?;
        if !is_token(recipient) {
            return Err(Error::MalformedPayload(
                "recipient must be a plain token".into(),
            ));
        }
        let action = self
            .config
            .disclosure_actions
            .first()
            .cloned()
            .unwrap_or_else(|| DEFAULT_DISCLOSURE_ACTION.to_string());
        self.audit(
            AuditDraft::new("cpdm", &action, now)
                .subject(p)
                .detail(format!("recipient={recipient}")),
        )
    }

    // ---- consent center --------------------------------------------------

    pub fn grant_consent(
        &mut self,
        p: &Pseudonym,
        purpose: &PurposeId,
        grantor: Grantor,
        signature: Option<String>,
        now: Timestamp,
    ) -> Result<Consent> {
        let profile = self.vault.get(p)?.profile.clone();
        if let Grantor::Guardian(g) = &grantor {
            self.vault.get(g)?;
        }
        self.check_signature(signature.as_deref())?;
        let id = self.fresh_consent_id();
        let consent = self
            .consents
            .prepare_grant(id, p, purpose, grantor, signature, &profile, now)?;
        self.commit(Event::ConsentGranted {
            consent: consent.clone(),
        })?;
        self.audit_consent_grant(&consent, now)?;
        Ok(consent)
    }

    pub fn cancel_consent(
        &mut self,
        p: &Pseudonym,
        purpose: &PurposeId,
        canceller: &Grantor,
        now: Timestamp,
    ) -> Result<Consent> {
        let id = self.consents.prepare_cancel(p, purpose, canceller, now)?;
        self.commit(Event::ConsentCancelled {
            id: id.clone(),
            at: now,
        })?;
        self.audit(
            AuditDraft::new("consents", "consent.cancel", now)
                .subject(p)
                .correlate(&id)
                .detail(format!("purpose={purpose} by={}", grantor_name(canceller))),
        )?;
        Ok(self.consents.get(&id).expect("just cancelled").clone())
    }

    /// Ends every active consent older than `max_age` (the configured
    /// maximum when `None`).
    pub fn retention_scan(
        &mut self,
        now: Timestamp,
        max_age: Option<Duration>,
    ) -> Result<Vec<RetentionOutcome>> {
        let max_age = max_age.unwrap_or_else(|| Duration::days(self.config.max_consent_age_days));
        let due = self.consents.retention_due(now, max_age)?;
        for outcome in &due {
            self.commit(Event::RetentionApplied {
                outcome: outcome.clone(),
                at: now,
            })?;
            let action = match outcome.action {
                RetentionAction::RenewalRequested => "consent.renewal-requested",
                RetentionAction::Expired => "consent.expire",
            };
            self.audit(
                AuditDraft::new("consents", action, now)
                    .subject(&outcome.consent.pseudonym)
                    .correlate(&outcome.consent.id)
                    .detail(format!("purpose={}", outcome.consent.purpose))
                    .automated(true),
            )?;
        }
        self.audit(
            AuditDraft::new("consents", "retention.scan", now)
                .detail(format!(
                    "listed={} max_age_days={}",
                    due.len(),
                    max_age.num_days()
                ))
                .automated(true),
        )?;
        Ok(due)
    }

    // ---- restriction center ----------------------------------------------

    /// Places a restriction directly (the caller is the approving admin).
    /// Services are frozen first; the restriction is recorded once every
    /// service in the plan acked.
    pub fn place_restriction(
        &mut self,
        p: &Pseudonym,
        scope: Scope,
        reason: &str,
        now: Timestamp,
    ) -> Result<Restriction> {
        self.vault.get(p)?;
        self.check_scope(&scope)?;
        self.check_free_text(reason, "restriction reason")?;
        if self.restrictions.active_on_scope(p, &scope, now).is_some() {
            return Err(Error::DuplicateScope);
        }
        let (command, status) = self.propagate(
            None,
            p,
            Action::Freeze {
                scope: scope.clone(),
            },
            now,
        )?;
        if let Some(err) = propagation_error(command.as_str(), &status) {
            return Err(err);
        }
        self.record_restriction(p, scope, reason.to_string(), None, now)
    }

    /// Lifts a restriction, unfreezes services and re-examines requests that
    /// were waiting on it.
    pub fn lift_restriction(&mut self, id: &RestrictionId, now: Timestamp) -> Result<Restriction> {
        let r = self
            .restrictions
            .get(id)
            .ok_or(Error::UnknownRestriction)?
            .clone();
        if r.lifted_at.is_some() {
            return Err(Error::NotActive);
        }
        if now < r.placed_at {
            return Err(Error::MalformedPayload("lift precedes placement".into()));
        }
        let (command, status) = self.propagate(
            None,
            &r.pseudonym,
            Action::Unfreeze {
                scope: r.scope.clone(),
            },
            now,
        )?;
        self.commit(Event::RestrictionLifted {
            id: id.clone(),
            at: now,
        })?;
        let unfreeze = if status == PlanStatus::Complete {
            "complete"
        } else {
            "incomplete"
        };
        self.audit(
            AuditDraft::new("restrictions", "restriction.lift", now)
                .subject(&r.pseudonym)
                .correlate(id)
                .detail(format!(
                    "scope={} command={command} unfreeze={unfreeze}",
                    r.scope
                )),
        )?;
        let lifted = self.restrictions.get(id).expect("just lifted").clone();
        // A resumed erasure removes the subject's restrictions.
        self.resume_blocked(&r.pseudonym, now);
        Ok(lifted)
    }

    fn resume_blocked(&mut self, p: &Pseudonym, now: Timestamp) {
        let waiting: Vec<_> = self
            .requests
            .for_subject(p)
            .filter(|r| {
                r.blocked && matches!(r.state, RequestState::Approved | RequestState::Failed(_))
            })
            .map(|r| r.id.clone())
            .collect();
        for id in waiting {
            // Outcomes are visible in the request store and the audit log.
            let _ = self.execute(&id, now);
        }
    }

    fn record_restriction(
        &mut self,
        p: &Pseudonym,
        scope: Scope,
        reason: String,
        request: Option<&RequestId>,
        now: Timestamp,
    ) -> Result<Restriction> {
        if self.restrictions.active_on_scope(p, &scope, now).is_some() {
            return Err(Error::DuplicateScope);
        }
        let id = loop {
            let id = self.ids.restriction_id();
            if self.restrictions.get(&id).is_none() {
                break id;
            }
        };
        let restriction = Restriction {
            id: id.clone(),
            pseudonym: p.clone(),
            scope,
            reason,
            placed_at: now,
            lifted_at: None,
        };
        self.commit(Event::RestrictionPlaced {
            restriction: restriction.clone(),
        })?;
        let mut draft = AuditDraft::new("restrictions", "restriction.place", now)
            .subject(p)
            .detail(format!("restriction={id} scope={}", restriction.scope));
        if let Some(r) = request {
            draft = draft.correlate(r);
        }
        self.audit(draft)?;
        Ok(restriction)
    }

    // ---- requests ----------------------------------------------------------

    pub fn submit_request(
        &mut self,
        p: &Pseudonym,
        payload: RequestPayload,
        now: Timestamp,
    ) -> Result<GdprRequest> {
        self.vault.get(p)?;
        let (kind, staged) = self.validate_payload(payload)?;
        let id = loop {
            let id = self.ids.request_id();
            if self.requests.get(&id).is_err() {
                break id;
            }
        };
        let request = self.requests.new_request(id.clone(), p.clone(), kind, now);
        let kind_name = request.kind.name();
        self.commit(Event::RequestSubmitted { request })?;
        if let Some(changes) = staged {
            self.commit(Event::RectificationStaged {
                request: id.clone(),
                staged: StagedRectification {
                    pseudonym: p.clone(),
                    changes,
                },
            })?;
        }
        self.audit(
            AuditDraft::new("requests", "request.submit", now)
                .subject(p)
                .correlate(&id)
                .detail(format!("kind={kind_name}")),
        )?;
        if self.config.auto_approve_access && kind_name == "access" {
            let t = self.requests.prepare_transition(
                &id,
                RequestState::Approved,
                now,
                Some("auto".into()),
            )?;
            self.commit(Event::RequestTransition { transition: t })?;
            self.audit(
                AuditDraft::new("requests", "request.decide", now)
                    .subject(p)
                    .correlate(&id)
                    .detail("verdict=approve by=auto")
                    .automated(true),
            )?;
        }
        Ok(self.requests.get(&id)?.clone())
    }

    fn validate_payload(
        &self,
        payload: RequestPayload,
    ) -> Result<(RequestKind, Option<IdentifierMap>)> {
        Ok(match payload {
            RequestPayload::Access => (RequestKind::Access, None),
            RequestPayload::Erasure => (RequestKind::Erasure, None),
            RequestPayload::Rectification { changes, indirect } => {
                if changes.is_empty() && indirect.is_empty() {
                    return Err(Error::MalformedPayload("empty change set".into()));
                }
                if changes.values().any(String::is_empty) {
                    return Err(Error::MalformedPayload("empty identifier value".into()));
                }
                for key in changes.keys() {
                    self.check_free_text(key, "field name")?;
                }
                for (k, v) in &indirect {
                    self.check_free_text(k, "field name")?;
                    self.check_free_text(v, "indirect change")?;
                }
                let fields: BTreeSet<_> = changes.keys().cloned().collect();
                let staged = (!changes.is_empty()).then_some(changes);
                (RequestKind::Rectification { fields, indirect }, staged)
            }
            RequestPayload::Restriction { scope, reason } => {
                self.check_scope(&scope)?;
                self.check_free_text(&reason, "restriction reason")?;
                (RequestKind::Restriction { scope, reason }, None)
            }
            RequestPayload::Objection { purpose } => {
                self.check_scope(&Scope::Purpose(purpose.clone()))?;
                (RequestKind::Objection { purpose }, None)
            }
        })
    }

    pub fn decide(
        &mut self,
        id: &RequestId,
        actor: &Actor,
        verdict: Verdict,
        now: Timestamp,
    ) -> Result<GdprRequest> {
        if actor.role != Role::Admin {
            return Err(Error::Unauthorized(actor.role.to_string()));
        }
        if !is_token(&actor.id) {
            return Err(Error::MalformedPayload(
                "admin id must be a plain token".into(),
            ));
        }
        let to = match &verdict {
            Verdict::Approve => RequestState::Approved,
            Verdict::Decline(reason) => {
                self.check_free_text(reason, "decline reason")?;
                RequestState::Declined(reason.clone())
            }
        };
        let t = self
            .requests
            .prepare_transition(id, to, now, Some(actor.id.clone()))?;
        let p = self.requests.get(id)?.pseudonym.clone();
        self.commit(Event::RequestTransition { transition: t })?;
        if matches!(verdict, Verdict::Decline(_)) && self.vault.staged(id).is_some() {
            self.commit(Event::StagedDropped {
                request: id.clone(),
            })?;
        }
        let word = match verdict {
            Verdict::Approve => "approve",
            Verdict::Decline(_) => "decline",
        };
        self.audit(
            AuditDraft::new("requests", "request.decide", now)
                .subject(&p)
                .correlate(id)
                .detail(format!("verdict={word} by={}", actor.id)),
        )?;
        Ok(self.requests.get(id)?.clone())
    }

    /// Runs an Approved (or retries a Failed) request: broadcast, collect
    /// acks within the retry budget, then perform the vault-local action.
    pub fn execute(&mut self, id: &RequestId, now: Timestamp) -> Result<GdprRequest> {
        let req = self.requests.get(id)?.clone();
        if !matches!(req.state, RequestState::Approved | RequestState::Failed(_)) {
            return Err(Error::transition(&req.state, &RequestState::InProgress));
        }
        let p = req.pseudonym.clone();
        self.vault.get(&p)?;
        if self.blocked(&req, now) {
            if !req.blocked {
                self.commit(Event::RequestBlocked {
                    id: id.clone(),
                    at: now,
                })?;
            }
            self.audit(
                AuditDraft::new("requests", "request.blocked", now)
                    .subject(&p)
                    .correlate(id)
                    .detail(format!("kind={}", req.kind.name())),
            )?;
            return Err(Error::BlockedByRestriction);
        }
        let action = match &req.kind {
            RequestKind::Access => Action::Export,
            RequestKind::Erasure => Action::Erase,
            RequestKind::Rectification { indirect, .. } => Action::Rectify {
                changes: indirect.clone(),
            },
            RequestKind::Restriction { scope, .. } => Action::Freeze {
                scope: scope.clone(),
            },
            RequestKind::Objection { purpose } => Action::Freeze {
                scope: Scope::Purpose(purpose.clone()),
            },
        };
        if let Action::Freeze { scope } = &action {
            if self.restrictions.active_on_scope(&p, scope, now).is_some() {
                return Err(Error::DuplicateScope);
            }
        }
        self.transition(
            id,
            RequestState::InProgress,
            now,
            None,
            "request.execute",
            false,
        )?;
        let (command, status) = self.propagate(Some(id), &p, action, now)?;
        if let Some(err) = propagation_error(id.as_str(), &status) {
            self.transition(
                id,
                RequestState::Failed("propagation failed".into()),
                now,
                None,
                "request.fail",
                false,
            )?;
            return Err(err);
        }
        match self.finish_local(&req, &command, now) {
            Ok(()) => {
                self.transition(
                    id,
                    RequestState::Completed,
                    now,
                    None,
                    "request.complete",
                    false,
                )?;
                Ok(self.requests.get(id)?.clone())
            }
            Err(e) => {
                self.transition(
                    id,
                    RequestState::Failed(e.to_string()),
                    now,
                    None,
                    "request.fail",
                    false,
                )?;
                Err(e)
            }
        }
    }

    fn blocked(&self, req: &GdprRequest, now: Timestamp) -> bool {
        let p = &req.pseudonym;
        let any_active = || self.restrictions.for_subject(p).any(|r| r.active_at(now));
        match &req.kind {
            RequestKind::Erasure => any_active(),
            RequestKind::Rectification { fields, indirect } => {
                (!fields.is_empty() && self.restrictions.is_restricted(p, &Scope::Identity, now))
                    || (!indirect.is_empty()
                        && self
                            .restrictions
                            .for_subject(p)
                            .any(|r| r.active_at(now) && r.scope != Scope::Identity))
            }
            _ => false,
        }
    }

    fn finish_local(
        &mut self,
        req: &GdprRequest,
        command: &CommandId,
        now: Timestamp,
    ) -> Result<()> {
        let p = &req.pseudonym;
        match &req.kind {
            RequestKind::Access => {
                let doc = self.assemble_export(p, command, now)?;
                let services = doc.services.as_ref().map_or(0, BTreeMap::len);
                self.commit(Event::ExportStored {
                    request: req.id.clone(),
                    document: doc,
                })?;
                self.audit(
                    AuditDraft::new("cpdm", "cpdm.export", now)
                        .subject(p)
                        .correlate(&req.id)
                        .detail(format!("slice=aggregate services={services}")),
                )?;
            }
            RequestKind::Erasure => {
                let receipt = self.vault.prepare_erase(p, &self.restrictions, now)?;
                self.commit(Event::IdentityErased {
                    pseudonym: p.clone(),
                    at: now,
                })?;
                self.audit(
                    AuditDraft::new("cpdm", "cpdm.erase", now)
                        .subject(p)
                        .correlate(&req.id)
                        .detail(format!("fields_removed={}", receipt.fields_removed)),
                )?;
            }
            RequestKind::Rectification { fields, .. } => {
                if !fields.is_empty() {
                    let staged = self
                        .vault
                        .staged(&req.id)
                        .ok_or_else(|| Error::MalformedPayload("staged changes missing".into()))?
                        .changes
                        .clone();
                    let version =
                        self.vault
                            .prepare_rectify(p, &staged, &self.restrictions, now)?;
                    self.commit(Event::IdentityRectified {
                        pseudonym: p.clone(),
                        changes: staged,
                        version,
                    })?;
                    self.commit(Event::StagedDropped {
                        request: req.id.clone(),
                    })?;
                    self.audit(
                        AuditDraft::new("cpdm", "cpdm.rectify", now)
                            .subject(p)
                            .correlate(&req.id)
                            .detail(format!(
                                "fields={} version={version}",
                                field_list(fields.iter())
                            )),
                    )?;
                }
            }
            RequestKind::Restriction { scope, reason } => {
                self.record_restriction(p, scope.clone(), reason.clone(), Some(&req.id), now)?;
            }
            RequestKind::Objection { purpose } => {
                self.record_restriction(
                    p,
                    Scope::Purpose(purpose.clone()),
                    "objection".into(),
                    Some(&req.id),
                    now,
                )?;
            }
        }
        Ok(())
    }

    /// Vault slice, consent and restriction history, and the fragments
    /// returned by services that acked the export command.
    fn assemble_export(
        &self,
        p: &Pseudonym,
        command: &CommandId,
        now: Timestamp,
    ) -> Result<PortableDocument> {
        let mut doc = self.vault.export(p, now)?;
        doc.consents = Some(
            self.consents
                .for_subject(p)
                .map(ConsentExport::from)
                .collect(),
        );
        doc.restrictions = Some(
            self.restrictions
                .for_subject(p)
                .map(RestrictionExport::from)
                .collect(),
        );
        let mut services = BTreeMap::new();
        if let Some(plan) = self.bus.plan(command) {
            for (service, ack) in &plan.acks {
                if let AckResult::Done {
                    payload: Some(rows),
                } = &ack.result
                {
                    if !rows.is_empty() {
                        services.insert(service.clone(), rows.clone());
                    }
                }
            }
        }
        doc.services = Some(services);
        Ok(doc)
    }

    pub fn stored_export(&self, id: &RequestId) -> Option<&PortableDocument> {
        self.vault.stored_export(id)
    }

    // ---- service bus ---------------------------------------------------------

    /// Registers a simulated business logic service on the bus.
    pub fn spawn_service(
        &mut self,
        registration: ServiceRegistration,
        behavior: Behavior,
        now: Timestamp,
    ) -> Result<ServiceRegistration> {
        if !is_token(registration.service_id.as_str()) {
            return Err(Error::MalformedPayload(
                "service id must be a plain token".into(),
            ));
        }
        if self.bus.registration(&registration.service_id).is_some() {
            return Err(Error::DuplicateServiceId(
                registration.service_id.to_string(),
            ));
        }
        let categories = field_list(registration.data_categories.iter().map(PurposeId::as_str));
        let detail = format!(
            "service={} region={} categories={categories}",
            registration.service_id, registration.region
        );
        self.commit(Event::ServiceRegistered {
            registration: registration.clone(),
            behavior,
        })?;
        self.audit(AuditDraft::new("bus", "service.register", now).detail(detail))?;
        Ok(registration)
    }

    pub fn set_service_status(
        &mut self,
        service: &ServiceId,
        status: ServiceStatus,
        now: Timestamp,
    ) -> Result<()> {
        self.service(service)?;
        self.commit(Event::ServiceStatusChanged {
            service: service.clone(),
            status,
        })?;
        let word = match status {
            ServiceStatus::Active => "active",
            ServiceStatus::Suspended => "suspended",
        };
        self.audit(
            AuditDraft::new("bus", "service.status", now)
                .detail(format!("service={service} status={word}")),
        )?;
        Ok(())
    }

    pub fn set_behavior(
        &mut self,
        service: &ServiceId,
        behavior: Behavior,
        now: Timestamp,
    ) -> Result<()> {
        self.service(service)?;
        self.commit(Event::BehaviorChanged {
            service: service.clone(),
            behavior,
        })?;
        self.audit(
            AuditDraft::new("bus", "service.status", now)
                .detail(format!("service={service} behavior={}", behavior.name())),
        )?;
        Ok(())
    }

    /// Business processing at a service, gated by consent and restrictions.
    /// Rows must hold pseudonymous data only.
    pub fn process(
        &mut self,
        service: &ServiceId,
        p: &Pseudonym,
        purpose: &PurposeId,
        fields: BTreeMap<String, String>,
        now: Timestamp,
    ) -> Result<()> {
        let registration = self
            .bus
            .registration(service)
            .ok_or_else(|| Error::UnknownService(service.to_string()))?;
        if !registration.data_categories.contains(purpose) {
            return Err(Error::UnknownPurpose(purpose.to_string()));
        }
        self.vault.get(p)?;
        for (k, v) in &fields {
            self.check_free_text(k, "field name")?;
            self.check_free_text(v, "service field")?;
        }
        let gate = self.processing_gate(p, purpose, now);
        let refusal = if gate.consent != ConsentStatus::Consented {
            Some(Error::MissingConsent(purpose.to_string()))
        } else if gate.restriction == Gate::Restricted
            || self.service(service)?.frozen_for(p, purpose)
        {
            Some(Error::RestrictedData)
        } else {
            None
        };
        if let Some(err) = refusal {
            let why = if matches!(err, Error::MissingConsent(_)) {
                "no-consent"
            } else {
                "restricted"
            };
            self.audit(
                AuditDraft::new(service.as_str(), "bls.process-refused", now)
                    .subject(p)
                    .detail(format!("purpose={purpose} reason={why}")),
            )?;
            return Err(err);
        }
        self.commit(Event::ServiceRecordWritten {
            service: service.clone(),
            pseudonym: p.clone(),
            purpose: purpose.clone(),
            fields,
            at: now,
        })?;
        self.audit(
            AuditDraft::new(service.as_str(), "bls.process", now)
                .subject(p)
                .detail(format!("purpose={purpose}")),
        )?;
        Ok(())
    }

    /// Delivers an already-published command to one service again, as the
    /// at-least-once transport may. Duplicate acks do not change accounting.
    pub fn redeliver(
        &mut self,
        command: &CommandId,
        service: &ServiceId,
        now: Timestamp,
    ) -> Result<Option<Ack>> {
        let plan = self.bus.plan(command).ok_or(Error::UnknownCommand)?;
        if !plan.targets.contains(service) {
            return Err(Error::UnknownService(service.to_string()));
        }
        self.commit(Event::Delivered {
            command: command.clone(),
            service: service.clone(),
            at: now,
        })
    }

    /// Publishes `action` and drives delivery until every target acked or
    /// ran out of retries. Redeliveries are spaced one simulated second
    /// apart.
    fn propagate(
        &mut self,
        request: Option<&RequestId>,
        p: &Pseudonym,
        action: Action,
        now: Timestamp,
    ) -> Result<(CommandId, PlanStatus)> {
        let command_id = loop {
            let id = self.ids.command_id();
            if self.bus.plan(&id).is_none() {
                break id;
            }
        };
        let targets: Vec<ServiceId> = self
            .bus
            .services()
            .filter(|r| r.status == ServiceStatus::Active)
            .map(|r| r.service_id.clone())
            .collect();
        let action_name = action.name();
        self.commit(Event::CommandPublished {
            request: request.cloned(),
            command: BroadcastCommand {
                command_id: command_id.clone(),
                pseudonym: p.clone(),
                action,
                issued_at: now,
            },
            targets: targets.clone(),
        })?;
        let correlation = request.map_or_else(|| command_id.to_string(), RequestId::to_string);
        self.audit(
            AuditDraft::new("bus", "request.broadcast", now)
                .subject(p)
                .correlate(&correlation)
                .detail(format!(
                    "command={command_id} action={action_name} targets={}",
                    targets.len()
                )),
        )?;
        for round in 0..=RETRY_BUDGET {
            let outstanding = self.bus.plan(&command_id).expect("published").outstanding();
            if outstanding.is_empty() {
                break;
            }
            let at = now + Duration::seconds(i64::from(round));
            for service in outstanding {
                let ack = self.commit(Event::Delivered {
                    command: command_id.clone(),
                    service: service.clone(),
                    at,
                })?;
                if let Some(ack) = ack {
                    let result = if ack.result.is_done() {
                        "done"
                    } else {
                        "refused"
                    };
                    self.audit(
                        AuditDraft::new("bus", "request.ack", at)
                            .subject(p)
                            .correlate(&correlation)
                            .detail(format!(
                                "command={command_id} service={service} result={result}"
                            )),
                    )?;
                }
            }
        }
        let silent = self.bus.plan(&command_id).expect("published").outstanding();
        for service in silent {
            self.commit(Event::Exhausted {
                command: command_id.clone(),
                service: service.clone(),
            })?;
            self.audit(
                AuditDraft::new(
                    "bus",
                    "request.ack",
                    now + Duration::seconds(i64::from(RETRY_BUDGET)),
                )
                .subject(p)
                .correlate(&correlation)
                .detail(format!(
                    "command={command_id} service={service} result=missing"
                )),
            )?;
        }
        let status = self.bus.status(&command_id)?;
        Ok((command_id, status))
    }

    // ---- backup and staging ------------------------------------------------

    pub fn backup(&mut self, now: Timestamp) -> Result<SnapshotId> {
        let seq = self.journal.last_seq();
        let id = SnapshotId::new(format!("snap-{:06}", seq + 1));
        let snapshot = Snapshot {
            id: id.clone(),
            seq,
            taken_at: now,
            vault: self.vault.clone(),
            services: self.services.clone(),
        };
        if let Some(dir) = &self.storage {
            let path = dir.join(SNAPSHOT_DIR).join(format!("{id}.json"));
            let tmp = path.with_extension("tmp");
            fs::write(&tmp, serde_json::to_vec(&snapshot)?)?;
            fs::rename(&tmp, &path)?;
        }
        self.snapshots.insert(id.clone(), snapshot);
        self.commit(Event::BackupTaken {
            snapshot: id.clone(),
            position: seq,
            at: now,
        })?;
        self.audit(
            AuditDraft::new("storage", "backup.create", now)
                .detail(format!("snapshot={id} seq={seq}")),
        )?;
        Ok(id)
    }

    /// Loads a snapshot, then replays the reconciliation journal written
    /// since it was taken so later rectifications and erasures survive.
    pub fn restore(&mut self, id: &SnapshotId, now: Timestamp) -> Result<()> {
        let snapshot_seq = self
            .snapshots
            .get(id)
            .ok_or_else(|| Error::UnknownSnapshot(id.to_string()))?
            .seq;
        let replayed = self.journal.last_seq() - snapshot_seq;
        self.commit(Event::Restored {
            snapshot: id.clone(),
            at: now,
        })?;
        self.audit(
            AuditDraft::new("storage", "backup.restore", now)
                .detail(format!("snapshot={id} replayed_entries={replayed}")),
        )?;
        Ok(())
    }

    /// What `restore(id)` would produce right now, without applying it.
    pub fn preview_restore(
        &self,
        id: &SnapshotId,
    ) -> Result<(IdentityVault, BTreeMap<ServiceId, SimulatedBls>)> {
        let snapshot = self
            .snapshots
            .get(id)
            .ok_or_else(|| Error::UnknownSnapshot(id.to_string()))?;
        Ok(self.reconciled(snapshot, self.journal.last_seq() + 1))
    }

    fn reconciled(
        &self,
        snapshot: &Snapshot,
        upto: u64,
    ) -> (IdentityVault, BTreeMap<ServiceId, SimulatedBls>) {
        let mut vault = snapshot.vault.clone();
        vault.reindex();
        let mut services = self.services.clone();
        for (id, saved) in &snapshot.services {
            if let Some(current) = services.get_mut(id) {
                let behavior = current.behavior();
                *current = saved.clone();
                current.set_behavior(behavior);
            }
        }
        let tail = self
            .journal
            .entries()
            .iter()
            .filter(|e| e.seq > snapshot.seq && e.seq < upto);
        for entry in tail {
            match &entry.event {
                Event::IdentityRectified {
                    pseudonym,
                    changes,
                    version,
                } => {
                    vault.apply_rectify(pseudonym, changes, *version);
                }
                Event::IdentityErased { pseudonym, .. } => {
                    vault.apply_erase(pseudonym);
                    for b in services.values_mut() {
                        b.purge(pseudonym);
                    }
                }
                Event::RectificationStaged { request, staged } => {
                    vault.stage(request.clone(), staged.clone())
                }
                Event::StagedDropped { request } => {
                    vault.drop_staged(request);
                }
                Event::ExportStored { request, document } => {
                    vault.store_export(request.clone(), document.clone())
                }
                Event::Delivered {
                    command, service, ..
                } => {
                    let Some(plan) = self.bus.plan(command) else {
                        continue;
                    };
                    let acked = plan.acks.get(service).is_some_and(|a| a.result.is_done());
                    let mutates = !matches!(plan.command.action, Action::Export);
                    if acked && mutates {
                        if let Some(b) = services.get_mut(service) {
                            b.reconcile(&plan.command);
                        }
                    }
                }
                _ => {}
            }
        }
        (vault, services)
    }

    pub fn generate_staging(&mut self, seed: u64, now: Timestamp) -> Result<StagingSnapshot> {
        let snapshot = staging::generate(self, seed, now);
        if let Some(dir) = &self.storage {
            fs::write(dir.join(STAGING_FILE), snapshot.to_ndjson())?;
        }
        self.audit(
            AuditDraft::new("cpdm", "staging.generate", now)
                .detail(format!("subjects={} seed={seed}", snapshot.len()))
                .automated(true),
        )?;
        self.staging = Some(snapshot.clone());
        Ok(snapshot)
    }

    /// Writes a row straight into a service store, bypassing every gate and
    /// the journal. Exists only to plant faults for the minimization report.
    #[doc(hidden)]
    pub fn plant_service_row(
        &mut self,
        service: &ServiceId,
        p: &Pseudonym,
        purpose: &PurposeId,
        fields: BTreeMap<String, String>,
        now: Timestamp,
    ) -> Result<()> {
        self.services
            .get_mut(service)
            .ok_or_else(|| Error::UnknownService(service.to_string()))?
            .write(p, purpose, fields, now)
    }

    // ---- internals ---------------------------------------------------------

    fn transition(
        &mut self,
        id: &RequestId,
        to: RequestState,
        now: Timestamp,
        by: Option<String>,
        action: &str,
        automated: bool,
    ) -> Result<()> {
        let t = self.requests.prepare_transition(id, to, now, by)?;
        let p = self.requests.get(id)?.pseudonym.clone();
        let detail = format!("from={} to={}", t.from.name(), t.to.name());
        self.commit(Event::RequestTransition { transition: t })?;
        self.audit(
            AuditDraft::new("requests", action, now)
                .subject(&p)
                .correlate(id)
                .detail(detail)
                .automated(automated),
        )?;
        Ok(())
    }

    fn audit(&mut self, draft: AuditDraft) -> Result<AuditEvent> {
        self.audit.append(draft, self.vault.identifiers())
    }

    fn audit_consent_grant(&mut self, consent: &Consent, now: Timestamp) -> Result<AuditEvent> {
        self.audit(
            AuditDraft::new("consents", "consent.grant", now)
                .subject(&consent.pseudonym)
                .correlate(&consent.id)
                .detail(format!(
                    "purpose={} by={}",
                    consent.purpose,
                    grantor_name(&consent.grantor)
                )),
        )
    }

    fn fresh_consent_id(&mut self) -> ConsentId {
        loop {
            let id = self.ids.consent_id();
            if self.consents.get(&id).is_none() {
                return id;
            }
        }
    }

    fn check_scope(&self, scope: &Scope) -> Result<()> {
        match scope {
            Scope::Purpose(p) if !self.config.purposes.contains(p) => {
                Err(Error::MalformedPayload(format!("unknown purpose `{p}`")))
            }
            _ => Ok(()),
        }
    }

    /// Free text stored outside the vault must not carry identifying values.
    fn check_free_text(&self, text: &str, what: &str) -> Result<()> {
        if text.len() > 1024 {
            return Err(Error::MalformedPayload(format!("{what} is too long")));
        }
        match self.detector().scan(text, self.vault.identifiers()) {
            Some(finding) => Err(Error::MalformedPayload(format!(
                "{what} contains a {finding}"
            ))),
            None => Ok(()),
        }
    }

    fn check_signature(&self, signature: Option<&str>) -> Result<()> {
        signature.map_or(Ok(()), |s| self.check_free_text(s, "signature"))
    }

    fn commit(&mut self, event: Event) -> Result<Option<Ack>> {
        let seq = self.journal.append(event.clone())?.seq;
        self.apply(&event, seq)
    }

    fn apply(&mut self, event: &Event, seq: u64) -> Result<Option<Ack>> {
        match event {
            Event::SubjectRegistered { record } => self.vault.insert(record.clone()),
            Event::IdentityRectified {
                pseudonym,
                changes,
                version,
            } => {
                self.vault.apply_rectify(pseudonym, changes, *version);
            }
            Event::IdentityErased { pseudonym, .. } => {
                self.vault.apply_erase(pseudonym);
                self.consents.remove_subject(pseudonym);
                self.restrictions.remove_subject(pseudonym);
                self.journal.redact(pseudonym)?;
            }
            Event::ConsentGranted { consent } => self.consents.insert(consent.clone()),
            Event::ConsentCancelled { id, at } => self.consents.set_cancelled(id, *at),
            Event::RetentionApplied { outcome, at } => self.consents.apply_retention(outcome, *at),
            Event::RestrictionPlaced { restriction } => {
                self.restrictions.insert(restriction.clone())
            }
            Event::RestrictionLifted { id, at } => self.restrictions.set_lifted(id, *at),
            Event::RequestSubmitted { request } => self.requests.insert(request.clone()),
            Event::RequestTransition { transition } => self.requests.apply(transition),
            Event::RequestBlocked { id, .. } => {
                if let Some(r) = self.requests.get_mut(id) {
                    r.blocked = true;
                }
            }
            Event::RectificationStaged { request, staged } => {
                self.vault.stage(request.clone(), staged.clone())
            }
            Event::StagedDropped { request } => {
                self.vault.drop_staged(request);
            }
            Event::ExportStored { request, document } => {
                self.vault.store_export(request.clone(), document.clone());
                if let Some(r) = self.requests.get_mut(request) {
                    r.has_export = true;
                }
            }
            Event::ServiceRegistered {
                registration,
                behavior,
            } => {
                self.bus.register_service(registration.clone())?;
                self.services.insert(
                    registration.service_id.clone(),
                    SimulatedBls::new(registration.service_id.clone(), *behavior),
                );
            }
            Event::ServiceStatusChanged { service, status } => {
                self.bus.set_status(service, *status)?
            }
            Event::BehaviorChanged { service, behavior } => {
                if let Some(b) = self.services.get_mut(service) {
                    b.set_behavior(*behavior);
                }
            }
            Event::ServiceRecordWritten {
                service,
                pseudonym,
                purpose,
                fields,
                at,
            } => {
                if let Some(b) = self.services.get_mut(service) {
                    // A refused write was checked before journaling; on
                    // replay the same state refuses it the same way.
                    let _ = b.write(pseudonym, purpose, fields.clone(), *at);
                }
            }
            Event::CommandPublished {
                request,
                command,
                targets,
            } => {
                self.bus
                    .insert_plan(command.clone(), targets.iter().cloned().collect());
                if let Some(r) = request.as_ref().and_then(|id| self.requests.get_mut(id)) {
                    r.commands.push(command.command_id.clone());
                }
            }
            Event::Delivered {
                command,
                service,
                at,
            } => {
                self.bus.record_attempt(command, service)?;
                let cmd = self
                    .bus
                    .plan(command)
                    .ok_or(Error::UnknownCommand)?
                    .command
                    .clone();
                let bls = self
                    .services
                    .get_mut(service)
                    .ok_or_else(|| Error::UnknownService(service.to_string()))?;
                let ack = bls.deliver(&cmd, *at);
                if let Some(a) = &ack {
                    self.bus.acknowledge(a.clone())?;
                }
                return Ok(ack);
            }
            Event::Exhausted { command, service } => self.bus.mark_exhausted(command, service)?,
            Event::BackupTaken { snapshot, .. } => {
                if !self.snapshots.contains_key(snapshot) {
                    let loaded = self.load_snapshot(snapshot)?;
                    self.snapshots.insert(snapshot.clone(), loaded);
                }
            }
            Event::Restored { snapshot, .. } => {
                let snap = self
                    .snapshots
                    .get(snapshot)
                    .ok_or_else(|| Error::UnknownSnapshot(snapshot.to_string()))?;
                let (vault, services) = self.reconciled(snap, seq);
                self.vault = vault;
                self.services = services;
            }
        }
        Ok(None)
    }

    fn load_snapshot(&self, id: &SnapshotId) -> Result<Snapshot> {
        let dir = self
            .storage
            .as_ref()
            .ok_or_else(|| Error::UnknownSnapshot(id.to_string()))?;
        let path = dir.join(SNAPSHOT_DIR).join(format!("{id}.json"));
        let bytes = fs::read(&path)
            .map_err(|e| Error::StorageUnavailable(format!("snapshot {}: {e}", path.display())))?;
        let mut snapshot: Snapshot = serde_json::from_slice(&bytes)?;
        snapshot.vault.reindex();
        Ok(snapshot)
    }
}

fn propagation_error(correlation: &str, status: &PlanStatus) -> Option<Error> {
    match status {
        PlanStatus::Complete => None,
        PlanStatus::CompleteWithFailure { refused, missing } => Some(Error::PropagationFailed {
            correlation: correlation.to_string(),
            missing: missing.iter().cloned().collect(),
            refused: refused.iter().cloned().collect(),
        }),
        PlanStatus::Pending { outstanding } => Some(Error::PropagationFailed {
            correlation: correlation.to_string(),
            missing: outstanding.iter().cloned().collect(),
            refused: Vec::new(),
        }),
    }
}

fn grantor_name(g: &Grantor) -> &'static str {
    match g {
        Grantor::Subject => "self",
        Grantor::Guardian(_) => "guardian",
    }
}

fn field_list<'a>(names: impl Iterator<Item = impl AsRef<str> + 'a>) -> String {
    names
        .map(|n| n.as_ref().to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn is_token(s: &str) -> bool {
    !s.is_empty()
        && s.len() <= 128
        && s.bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'.' | b'_' | b'-' | b':'))
}
