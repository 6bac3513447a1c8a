//! In-process service bus: service registration, at-least-once broadcast of
//! data-subject commands and per-command acknowledgement accounting.
//!
//! A broadcast freezes its delivery plan (the Active services at that moment).
//! Only acks from that plan count towards completion, and only the first ack
//! per (command, service) is effective.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::export::ServiceRecord;
use crate::restriction::Scope;
use crate::types::{CommandId, Pseudonym, PurposeId, RegionCode, ServiceId, Timestamp};

/// Redeliveries after the first attempt before a silent service is given up on.
pub const RETRY_BUDGET: u32 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServiceStatus {
    Active,
    Suspended,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceRegistration {
    pub service_id: ServiceId,
    pub data_categories: BTreeSet<PurposeId>,
    pub region: RegionCode,
    pub status: ServiceStatus,
}

impl ServiceRegistration {
    pub fn new(
        service_id: impl Into<String>,
        categories: impl IntoIterator<Item = PurposeId>,
        region: RegionCode,
    ) -> Self {
        Self {
            service_id: ServiceId::new(service_id),
            data_categories: categories.into_iter().collect(),
            region,
            status: ServiceStatus::Active,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Action {
    Export,
    Erase,
    /// Changes to pseudonymous business fields. Never identifying values.
    Rectify {
        changes: BTreeMap<String, String>,
    },
    Freeze {
        scope: Scope,
    },
    Unfreeze {
        scope: Scope,
    },
}

impl Action {
    pub fn name(&self) -> &'static str {
        match self {
            Action::Export => "export",
            Action::Erase => "erase",
            Action::Rectify { .. } => "rectify",
            Action::Freeze { .. } => "freeze",
            Action::Unfreeze { .. } => "unfreeze",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BroadcastCommand {
    pub command_id: CommandId,
    pub pseudonym: Pseudonym,
    pub action: Action,
    pub issued_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum AckResult {
    Done {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        payload: Option<Vec<ServiceRecord>>,
    },
    Refused {
        reason: String,
    },
}

impl AckResult {
    pub fn is_done(&self) -> bool {
        matches!(self, AckResult::Done { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ack {
    pub command_id: CommandId,
    pub service_id: ServiceId,
    pub result: AckResult,
    pub acked_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeliveryPlan {
    pub command_id: CommandId,
    pub targets: BTreeSet<ServiceId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum PlanStatus {
    /// Some targets have neither acked nor exhausted their retries.
    Pending {
        outstanding: BTreeSet<ServiceId>,
    },
    Complete,
    /// Every target is accounted for, but some refused or never answered.
    CompleteWithFailure {
        refused: BTreeSet<ServiceId>,
        missing: BTreeSet<ServiceId>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub command: BroadcastCommand,
    pub targets: BTreeSet<ServiceId>,
    pub acks: BTreeMap<ServiceId, Ack>,
    pub attempts: BTreeMap<ServiceId, u32>,
    pub exhausted: BTreeSet<ServiceId>,
}

impl PlanEntry {
    pub fn status(&self) -> PlanStatus {
        let outstanding: BTreeSet<_> = self
            .targets
            .iter()
            .filter(|s| !self.acks.contains_key(*s) && !self.exhausted.contains(*s))
            .cloned()
            .collect();
        if !outstanding.is_empty() {
            return PlanStatus::Pending { outstanding };
        }
        let refused: BTreeSet<_> = self
            .acks
            .iter()
            .filter(|(_, a)| !a.result.is_done())
            .map(|(s, _)| s.clone())
            .collect();
        let missing = self.exhausted.clone();
        if refused.is_empty() && missing.is_empty() {
            PlanStatus::Complete
        } else {
            PlanStatus::CompleteWithFailure { refused, missing }
        }
    }

    /// Targets still owed a delivery.
    pub fn outstanding(&self) -> Vec<ServiceId> {
        match self.status() {
            PlanStatus::Pending { outstanding } => outstanding.into_iter().collect(),
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ServiceBus {
    registry: BTreeMap<ServiceId, ServiceRegistration>,
    plans: BTreeMap<CommandId, PlanEntry>,
}

impl ServiceBus {
    pub fn register_service(
        &mut self,
        registration: ServiceRegistration,
    ) -> Result<ServiceRegistration> {
        if self.registry.contains_key(&registration.service_id) {
            return Err(Error::DuplicateServiceId(
                registration.service_id.to_string(),
            ));
        }
        self.registry
            .insert(registration.service_id.clone(), registration.clone());
        Ok(registration)
    }

    pub fn set_status(&mut self, service: &ServiceId, status: ServiceStatus) -> Result<()> {
        let reg = self
            .registry
            .get_mut(service)
            .ok_or_else(|| Error::UnknownService(service.to_string()))?;
        reg.status = status;
        Ok(())
    }

    pub fn registration(&self, service: &ServiceId) -> Option<&ServiceRegistration> {
        self.registry.get(service)
    }

    pub fn services(&self) -> impl Iterator<Item = &ServiceRegistration> {
        self.registry.values()
    }

    /// Enqueues `command` for every Active service and freezes that target set.
    pub fn broadcast(&mut self, command: BroadcastCommand) -> DeliveryPlan {
        let targets: BTreeSet<_> = self
            .registry
            .values()
            .filter(|r| r.status == ServiceStatus::Active)
            .map(|r| r.service_id.clone())
            .collect();
        self.insert_plan(command.clone(), targets.clone());
        DeliveryPlan {
            command_id: command.command_id,
            targets,
        }
    }

    pub(crate) fn insert_plan(&mut self, command: BroadcastCommand, targets: BTreeSet<ServiceId>) {
        self.plans.insert(
            command.command_id.clone(),
            PlanEntry {
                command,
                targets,
                acks: BTreeMap::new(),
                attempts: BTreeMap::new(),
                exhausted: BTreeSet::new(),
            },
        );
    }

    /// Records the first ack per (command, service); duplicates and acks from
    /// services outside the plan leave the accounting unchanged.
    pub fn acknowledge(&mut self, ack: Ack) -> Result<PlanStatus> {
        let plan = self
            .plans
            .get_mut(&ack.command_id)
            .ok_or(Error::UnknownCommand)?;
        if plan.targets.contains(&ack.service_id) && !plan.acks.contains_key(&ack.service_id) {
            plan.exhausted.remove(&ack.service_id);
            plan.acks.insert(ack.service_id.clone(), ack);
        }
        Ok(plan.status())
    }

    /// Counts a delivery attempt and returns the running total for the
    /// service. The first delivery plus [`RETRY_BUDGET`] redeliveries is the
    /// most the propagation loop makes.
    pub fn record_attempt(&mut self, command: &CommandId, service: &ServiceId) -> Result<u32> {
        let plan = self.plans.get_mut(command).ok_or(Error::UnknownCommand)?;
        let n = plan.attempts.entry(service.clone()).or_default();
        *n += 1;
        Ok(*n)
    }

    pub fn mark_exhausted(&mut self, command: &CommandId, service: &ServiceId) -> Result<()> {
        let plan = self.plans.get_mut(command).ok_or(Error::UnknownCommand)?;
        if !plan.acks.contains_key(service) {
            plan.exhausted.insert(service.clone());
        }
        Ok(())
    }

    pub fn plan(&self, command: &CommandId) -> Option<&PlanEntry> {
        self.plans.get(command)
    }

    pub fn status(&self, command: &CommandId) -> Result<PlanStatus> {
        self.plans
            .get(command)
            .map(PlanEntry::status)
            .ok_or(Error::UnknownCommand)
    }

    pub fn plans(&self) -> impl Iterator<Item = &PlanEntry> {
        self.plans.values()
    }
}
