//! Processing restrictions: a freeze on processing, modification or deletion
//! of one subject's data within a scope.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Pseudonym, PurposeId, RestrictionId, Timestamp};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "type", content = "purpose", rename_all = "snake_case")]
pub enum Scope {
    /// Mutations of the subject's identifying data in the vault.
    Identity,
    Purpose(PurposeId),
    All,
}

impl Scope {
    /// Whether an active restriction on `self` blocks an operation in `target`.
    pub fn covers(&self, target: &Scope) -> bool {
        matches!(self, Scope::All) || self == target
    }
}

impl std::fmt::Display for Scope {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Scope::Identity => f.write_str("identity"),
            Scope::Purpose(p) => write!(f, "purpose:{p}"),
            Scope::All => f.write_str("all"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Restriction {
    pub id: RestrictionId,
    pub pseudonym: Pseudonym,
    pub scope: Scope,
    pub reason: String,
    pub placed_at: Timestamp,
    pub lifted_at: Option<Timestamp>,
}

impl Restriction {
    pub fn active_at(&self, at: Timestamp) -> bool {
        self.placed_at <= at && self.lifted_at.is_none_or(|l| at < l)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gate {
    Restricted,
    Clear,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RestrictionCenter {
    restrictions: BTreeMap<RestrictionId, Restriction>,
}

impl RestrictionCenter {
    pub fn place(
        &mut self,
        id: RestrictionId,
        pseudonym: &Pseudonym,
        scope: Scope,
        reason: impl Into<String>,
        now: Timestamp,
    ) -> Result<Restriction> {
        if self.active_on_scope(pseudonym, &scope, now).is_some() {
            return Err(Error::DuplicateScope);
        }
        let r = Restriction {
            id,
            pseudonym: pseudonym.clone(),
            scope,
            reason: reason.into(),
            placed_at: now,
            lifted_at: None,
        };
        self.insert(r.clone());
        Ok(r)
    }

    pub fn lift(&mut self, id: &RestrictionId, now: Timestamp) -> Result<Restriction> {
        let r = self
            .restrictions
            .get_mut(id)
            .ok_or(Error::UnknownRestriction)?;
        if r.lifted_at.is_some() {
            return Err(Error::NotActive);
        }
        if now < r.placed_at {
            return Err(Error::MalformedPayload("lift precedes placement".into()));
        }
        r.lifted_at = Some(now);
        Ok(r.clone())
    }

    /// Pure query. `Restricted` iff an active restriction covers `scope` at `now`.
    pub fn check(&self, pseudonym: &Pseudonym, scope: &Scope, now: Timestamp) -> Gate {
        let blocked = self
            .restrictions
            .values()
            .any(|r| &r.pseudonym == pseudonym && r.active_at(now) && r.scope.covers(scope));
        if blocked {
            Gate::Restricted
        } else {
            Gate::Clear
        }
    }

    pub fn is_restricted(&self, pseudonym: &Pseudonym, scope: &Scope, now: Timestamp) -> bool {
        self.check(pseudonym, scope, now) == Gate::Restricted
    }

    pub fn active_on_scope(
        &self,
        pseudonym: &Pseudonym,
        scope: &Scope,
        now: Timestamp,
    ) -> Option<&Restriction> {
        self.restrictions
            .values()
            .find(|r| &r.pseudonym == pseudonym && &r.scope == scope && r.active_at(now))
    }

    pub fn get(&self, id: &RestrictionId) -> Option<&Restriction> {
        self.restrictions.get(id)
    }

    pub fn for_subject<'a>(
        &'a self,
        pseudonym: &'a Pseudonym,
    ) -> impl Iterator<Item = &'a Restriction> + 'a {
        self.restrictions
            .values()
            .filter(move |r| &r.pseudonym == pseudonym)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Restriction> {
        self.restrictions.values()
    }

    pub fn len(&self) -> usize {
        self.restrictions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.restrictions.is_empty()
    }

    pub(crate) fn insert(&mut self, r: Restriction) {
        self.restrictions.insert(r.id.clone(), r);
    }

    pub(crate) fn set_lifted(&mut self, id: &RestrictionId, at: Timestamp) {
        if let Some(r) = self.restrictions.get_mut(id) {
            r.lifted_at = Some(at);
        }
    }

    pub(crate) fn remove_subject(&mut self, pseudonym: &Pseudonym) {
        self.restrictions.retain(|_, r| &r.pseudonym != pseudonym);
    }
}
