//! Simulated business logic service: a pseudonym-keyed store that consumes
//! bus commands idempotently, with injectable faults.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::bus::{Ack, AckResult, Action, BroadcastCommand};
use crate::error::{Error, Result};
use crate::export::ServiceRecord;
use crate::restriction::Scope;
use crate::types::{CommandId, Pseudonym, PurposeId, ServiceId, Timestamp};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Behavior {
    #[default]
    Healthy,
    /// Loses every delivery before it is applied; never acks.
    DropMessages,
    /// Acks every command with a refusal.
    RefuseAction,
}

impl Behavior {
    pub fn name(&self) -> &'static str {
        match self {
            Behavior::Healthy => "healthy",
            Behavior::DropMessages => "drop_messages",
            Behavior::RefuseAction => "refuse_action",
        }
    }
}

/// Result of the first delivery of a command, remembered for dedup. Export
/// payloads are not cached; a redelivered export re-reads the store.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Applied {
    Done,
    Refused(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatedBls {
    service_id: ServiceId,
    behavior: Behavior,
    rows: BTreeMap<Pseudonym, Vec<ServiceRecord>>,
    frozen: BTreeMap<Pseudonym, BTreeSet<Scope>>,
    applied: BTreeMap<CommandId, Applied>,
}

impl SimulatedBls {
    pub fn new(service_id: ServiceId, behavior: Behavior) -> Self {
        Self {
            service_id,
            behavior,
            rows: BTreeMap::new(),
            frozen: BTreeMap::new(),
            applied: BTreeMap::new(),
        }
    }

    pub fn service_id(&self) -> &ServiceId {
        &self.service_id
    }

    pub fn behavior(&self) -> Behavior {
        self.behavior
    }

    pub fn set_behavior(&mut self, behavior: Behavior) {
        self.behavior = behavior;
    }

    /// Whether a freeze held by this service blocks processing for `purpose`.
    pub fn frozen_for(&self, pseudonym: &Pseudonym, purpose: &PurposeId) -> bool {
        let target = Scope::Purpose(purpose.clone());
        self.frozen
            .get(pseudonym)
            .is_some_and(|scopes| scopes.iter().any(|s| s.covers(&target)))
    }

    /// Business processing: stores a row for the subject.
    pub fn write(
        &mut self,
        pseudonym: &Pseudonym,
        purpose: &PurposeId,
        fields: BTreeMap<String, String>,
        now: Timestamp,
    ) -> Result<()> {
        if self.frozen_for(pseudonym, purpose) {
            return Err(Error::RestrictedData);
        }
        self.rows
            .entry(pseudonym.clone())
            .or_default()
            .push(ServiceRecord {
                purpose: purpose.clone(),
                fields,
                recorded_at: now,
            });
        Ok(())
    }

    /// Handles one delivery. `None` means the message was lost.
    pub fn deliver(&mut self, command: &BroadcastCommand, now: Timestamp) -> Option<Ack> {
        if self.behavior == Behavior::DropMessages {
            return None;
        }
        let result = match self.applied.get(&command.command_id) {
            Some(Applied::Refused(reason)) => AckResult::Refused {
                reason: reason.clone(),
            },
            Some(Applied::Done) => AckResult::Done {
                payload: self.payload_for(command),
            },
            None => {
                let outcome = if self.behavior == Behavior::RefuseAction {
                    Applied::Refused("refused by service".into())
                } else {
                    self.apply(command)
                };
                self.applied
                    .insert(command.command_id.clone(), outcome.clone());
                match outcome {
                    Applied::Done => AckResult::Done {
                        payload: self.payload_for(command),
                    },
                    Applied::Refused(reason) => AckResult::Refused { reason },
                }
            }
        };
        Some(Ack {
            command_id: command.command_id.clone(),
            service_id: self.service_id.clone(),
            result,
            acked_at: now,
        })
    }

    fn payload_for(&self, command: &BroadcastCommand) -> Option<Vec<ServiceRecord>> {
        match command.action {
            Action::Export => Some(self.fragment(&command.pseudonym)),
            _ => None,
        }
    }

    fn apply(&mut self, command: &BroadcastCommand) -> Applied {
        let p = &command.pseudonym;
        match &command.action {
            Action::Export => Applied::Done,
            Action::Erase => {
                let blocked = self
                    .rows
                    .get(p)
                    .is_some_and(|rows| rows.iter().any(|r| self.frozen_for(p, &r.purpose)));
                if blocked {
                    return Applied::Refused("restricted".into());
                }
                self.rows.remove(p);
                self.frozen.remove(p);
                Applied::Done
            }
            Action::Rectify { changes } => {
                let touched = |r: &ServiceRecord| changes.keys().any(|k| r.fields.contains_key(k));
                let blocked = self.frozen.get(p).is_some_and(|s| s.contains(&Scope::All))
                    || self.rows.get(p).is_some_and(|rows| {
                        rows.iter()
                            .any(|r| touched(r) && self.frozen_for(p, &r.purpose))
                    });
                if blocked {
                    return Applied::Refused("restricted".into());
                }
                if let Some(rows) = self.rows.get_mut(p) {
                    for row in rows.iter_mut() {
                        for (k, v) in changes {
                            if let Some(slot) = row.fields.get_mut(k) {
                                *slot = v.clone();
                            }
                        }
                    }
                }
                Applied::Done
            }
            Action::Freeze { scope } => {
                self.frozen
                    .entry(p.clone())
                    .or_default()
                    .insert(scope.clone());
                Applied::Done
            }
            Action::Unfreeze { scope } => {
                if let Some(scopes) = self.frozen.get_mut(p) {
                    scopes.remove(scope);
                    if scopes.is_empty() {
                        self.frozen.remove(p);
                    }
                }
                Applied::Done
            }
        }
    }

    /// The subject's rows, in a stable order.
    pub fn fragment(&self, pseudonym: &Pseudonym) -> Vec<ServiceRecord> {
        let mut rows = self.rows.get(pseudonym).cloned().unwrap_or_default();
        rows.sort();
        rows
    }

    pub fn rows(&self) -> impl Iterator<Item = (&Pseudonym, &ServiceRecord)> {
        self.rows
            .iter()
            .flat_map(|(p, rows)| rows.iter().map(move |r| (p, r)))
    }

    pub fn subjects(&self) -> impl Iterator<Item = &Pseudonym> {
        self.rows.keys()
    }

    pub fn is_frozen(&self, pseudonym: &Pseudonym, scope: &Scope) -> bool {
        self.frozen
            .get(pseudonym)
            .is_some_and(|s| s.contains(scope))
    }

    pub fn has_applied(&self, command: &CommandId) -> bool {
        self.applied.contains_key(command)
    }

    /// Applies a command that was acked Done before a restore rolled this
    /// store back. Ignores fault injection; still deduplicated.
    pub(crate) fn reconcile(&mut self, command: &BroadcastCommand) {
        if !self.applied.contains_key(&command.command_id) {
            let outcome = self.apply(command);
            self.applied.insert(command.command_id.clone(), outcome);
        }
    }

    /// Drops everything held about a subject regardless of freezes. Used
    /// when replaying erasure tombstones over a restored backup.
    pub(crate) fn purge(&mut self, pseudonym: &Pseudonym) {
        self.rows.remove(pseudonym);
        self.frozen.remove(pseudonym);
    }
}
