//! GDPR request records and their lifecycle state machine.
//!
//! ```text
//! Pending -> Approved -> InProgress -> Completed
//!    |                      |  ^
//!    v                      v  |
//! Declined               Failed
//! ```
//!
//! The store holds pseudonymous data only: a rectification request records
//! which identity fields change, while the new values wait in the vault.

use std::collections::{BTreeMap, BTreeSet};

use chrono::Duration;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::restriction::Scope;
use crate::types::{CommandId, IdentifierMap, Pseudonym, PurposeId, RequestId, Timestamp};

pub const DEFAULT_SLA_DAYS: i64 = 30;

/// What a subject submits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RequestPayload {
    Access,
    Rectification {
        /// New identity values; held by the vault, never by the request store.
        #[serde(default)]
        changes: IdentifierMap,
        /// Pseudonymous business-field changes forwarded to services.
        #[serde(default)]
        indirect: BTreeMap<String, String>,
    },
    Erasure,
    Restriction {
        scope: Scope,
        reason: String,
    },
    Objection {
        purpose: PurposeId,
    },
}

/// What the request store keeps.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RequestKind {
    Access,
    Rectification {
        fields: BTreeSet<String>,
        indirect: BTreeMap<String, String>,
    },
    Erasure,
    Restriction {
        scope: Scope,
        reason: String,
    },
    Objection {
        purpose: PurposeId,
    },
}

impl RequestKind {
    pub fn name(&self) -> &'static str {
        match self {
            RequestKind::Access => "access",
            RequestKind::Rectification { .. } => "rectification",
            RequestKind::Erasure => "erasure",
            RequestKind::Restriction { .. } => "restriction",
            RequestKind::Objection { .. } => "objection",
        }
    }

    /// Kinds that mutate identity data and therefore wait on the identity gate.
    pub fn touches_identity(&self) -> bool {
        match self {
            RequestKind::Erasure => true,
            RequestKind::Rectification { fields, .. } => !fields.is_empty(),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", content = "reason", rename_all = "snake_case")]
pub enum RequestState {
    Pending,
    Approved,
    Declined(String),
    InProgress,
    Completed,
    Failed(String),
}

impl RequestState {
    pub fn name(&self) -> &'static str {
        match self {
            RequestState::Pending => "pending",
            RequestState::Approved => "approved",
            RequestState::Declined(_) => "declined",
            RequestState::InProgress => "in_progress",
            RequestState::Completed => "completed",
            RequestState::Failed(_) => "failed",
        }
    }

    pub fn parse_name(s: &str) -> Option<&'static str> {
        [
            "pending",
            "approved",
            "declined",
            "in_progress",
            "completed",
            "failed",
        ]
        .into_iter()
        .find(|n| *n == s)
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self, RequestState::Declined(_) | RequestState::Completed)
    }

    pub fn can_transition_to(&self, to: &RequestState) -> bool {
        use RequestState::*;
        matches!(
            (self, to),
            (Pending, Approved)
                | (Pending, Declined(_))
                | (Approved, InProgress)
                | (InProgress, Completed)
                | (InProgress, Failed(_))
                | (Failed(_), InProgress)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GdprRequest {
    pub id: RequestId,
    pub pseudonym: Pseudonym,
    pub kind: RequestKind,
    pub state: RequestState,
    pub submitted_at: Timestamp,
    pub decided_at: Option<Timestamp>,
    pub completed_at: Option<Timestamp>,
    pub decided_by: Option<String>,
    pub deadline: Timestamp,
    /// Set while an approved request waits for a restriction to be lifted.
    #[serde(default)]
    pub blocked: bool,
    /// One broadcast per execution attempt.
    #[serde(default)]
    pub commands: Vec<CommandId>,
    /// Set once a completed access request has an export held in the vault.
    #[serde(default)]
    pub has_export: bool,
}

/// One persisted state change.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transition {
    pub id: RequestId,
    pub from: RequestState,
    pub to: RequestState,
    pub at: Timestamp,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decided_by: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", content = "reason", rename_all = "snake_case")]
pub enum Verdict {
    Approve,
    Decline(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestStore {
    sla: i64,
    requests: BTreeMap<RequestId, GdprRequest>,
}

impl Default for RequestStore {
    fn default() -> Self {
        Self::new(DEFAULT_SLA_DAYS)
    }
}

impl RequestStore {
    pub fn new(sla_days: i64) -> Self {
        Self {
            sla: sla_days,
            requests: BTreeMap::new(),
        }
    }

    pub fn sla(&self) -> Duration {
        Duration::days(self.sla)
    }

    pub fn new_request(
        &self,
        id: RequestId,
        pseudonym: Pseudonym,
        kind: RequestKind,
        now: Timestamp,
    ) -> GdprRequest {
        GdprRequest {
            id,
            pseudonym,
            kind,
            state: RequestState::Pending,
            submitted_at: now,
            decided_at: None,
            completed_at: None,
            decided_by: None,
            deadline: now + self.sla(),
            blocked: false,
            commands: Vec::new(),
            has_export: false,
        }
    }

    pub fn get(&self, id: &RequestId) -> Result<&GdprRequest> {
        self.requests.get(id).ok_or(Error::UnknownRequest)
    }

    /// Validates a transition and returns the record to persist.
    pub fn prepare_transition(
        &self,
        id: &RequestId,
        to: RequestState,
        at: Timestamp,
        decided_by: Option<String>,
    ) -> Result<Transition> {
        let req = self.get(id)?;
        if !req.state.can_transition_to(&to) {
            return Err(Error::transition(&req.state, &to));
        }
        Ok(Transition {
            id: id.clone(),
            from: req.state.clone(),
            to,
            at,
            decided_by,
        })
    }

    pub fn list(&self, state: Option<&str>) -> Vec<&GdprRequest> {
        self.requests
            .values()
            .filter(|r| state.is_none_or(|s| r.state.name() == s))
            .collect()
    }

    pub fn for_subject<'a>(
        &'a self,
        p: &'a Pseudonym,
    ) -> impl Iterator<Item = &'a GdprRequest> + 'a {
        self.requests.values().filter(move |r| &r.pseudonym == p)
    }

    /// Non-terminal requests past their deadline, earliest deadline first.
    pub fn overdue(&self, now: Timestamp) -> Vec<&GdprRequest> {
        let mut out: Vec<_> = self
            .requests
            .values()
            .filter(|r| !r.state.is_terminal() && r.deadline < now)
            .collect();
        out.sort_by(|a, b| a.deadline.cmp(&b.deadline).then_with(|| a.id.cmp(&b.id)));
        out
    }

    pub fn iter(&self) -> impl Iterator<Item = &GdprRequest> {
        self.requests.values()
    }

    pub fn len(&self) -> usize {
        self.requests.len()
    }

    pub fn is_empty(&self) -> bool {
        self.requests.is_empty()
    }

    pub(crate) fn insert(&mut self, r: GdprRequest) {
        self.requests.insert(r.id.clone(), r);
    }

    pub(crate) fn get_mut(&mut self, id: &RequestId) -> Option<&mut GdprRequest> {
        self.requests.get_mut(id)
    }

    pub(crate) fn apply(&mut self, t: &Transition) {
        let Some(r) = self.requests.get_mut(&t.id) else {
            return;
        };
        match &t.to {
            RequestState::Approved | RequestState::Declined(_) => {
                r.decided_at = Some(t.at);
                r.decided_by = t.decided_by.clone();
            }
            RequestState::Completed => r.completed_at = Some(t.at),
            RequestState::InProgress => r.blocked = false,
            _ => {}
        }
        r.state = t.to.clone();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::{TimeZone, Utc};

    fn t(d: i64) -> Timestamp {
        Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap() + Duration::days(d)
    }

    fn p() -> Pseudonym {
        Pseudonym::parse("R".repeat(22)).unwrap()
    }

    fn store_with(id: &str, at: i64) -> RequestStore {
        let mut s = RequestStore::default();
        let r = s.new_request(RequestId::new(id), p(), RequestKind::Erasure, t(at));
        s.insert(r);
        s
    }

    fn step(s: &mut RequestStore, id: &str, to: RequestState, at: i64) -> Result<()> {
        let tr = s.prepare_transition(&RequestId::new(id), to, t(at), None)?;
        s.apply(&tr);
        Ok(())
    }

    #[test]
    fn deadline_is_submission_plus_sla() {
        let s = store_with("r1", 0);
        assert_eq!(s.get(&RequestId::new("r1")).unwrap().deadline, t(30));
    }

    #[test]
    fn legal_transitions_only() {
        use RequestState::*;
        let all = [
            Pending,
            Approved,
            Declined("x".into()),
            InProgress,
            Completed,
            Failed("x".into()),
        ];
        let legal = [
            ("pending", "approved"),
            ("pending", "declined"),
            ("approved", "in_progress"),
            ("in_progress", "completed"),
            ("in_progress", "failed"),
            ("failed", "in_progress"),
        ];
        for from in &all {
            for to in &all {
                let expected = legal.contains(&(from.name(), to.name()));
                assert_eq!(from.can_transition_to(to), expected, "{from:?} -> {to:?}");
            }
        }
    }

    #[test]
    fn decide_twice_is_invalid() {
        let mut s = store_with("r1", 0);
        step(&mut s, "r1", RequestState::Approved, 1).unwrap();
        assert!(matches!(
            step(&mut s, "r1", RequestState::Declined("late".into()), 2),
            Err(Error::InvalidTransition { .. })
        ));
    }

    #[test]
    fn overdue_excludes_terminal_and_sorts() {
        let mut s = store_with("r1", 5);
        let r2 = s.new_request(RequestId::new("r2"), p(), RequestKind::Access, t(0));
        s.insert(r2);
        let r3 = s.new_request(RequestId::new("r3"), p(), RequestKind::Access, t(1));
        s.insert(r3);
        step(&mut s, "r3", RequestState::Approved, 2).unwrap();
        step(&mut s, "r3", RequestState::InProgress, 2).unwrap();
        step(&mut s, "r3", RequestState::Completed, 2).unwrap();
        let ids: Vec<_> = s.overdue(t(100)).iter().map(|r| r.id.to_string()).collect();
        assert_eq!(ids, ["r2", "r1"]);
        assert!(s.overdue(t(30)).is_empty());
        // deadline == now is not yet overdue
        assert_eq!(s.overdue(t(31)).len(), 1);
    }

    #[test]
    fn decision_fields_are_set() {
        let mut s = store_with("r1", 0);
        let tr = s
            .prepare_transition(
                &RequestId::new("r1"),
                RequestState::Approved,
                t(1),
                Some("admin".into()),
            )
            .unwrap();
        s.apply(&tr);
        let r = s.get(&RequestId::new("r1")).unwrap();
        assert_eq!(r.decided_at, Some(t(1)));
        assert_eq!(r.decided_by.as_deref(), Some("admin"));
    }
}
