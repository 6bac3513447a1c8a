//! Brute-force oracles shared by the property tests and the acceptance
//! runner. Each one recomputes an answer from raw history or raw store
//! dumps without going through the code under test.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use chrono::{Duration, TimeZone, Utc};
use pdp_core::consent::{ConsentCenter, ConsentStatus, Grantor, PurposeRegistry, SubjectProfile};
use pdp_core::export::{PortableDocument, ServiceRecord};
use pdp_core::plane::DataPlane;
use pdp_core::restriction::{Gate, RestrictionCenter, Scope};
use pdp_core::{ConsentId, Pseudonym, PurposeId, RestrictionId, ServiceId, Timestamp};
use rand::Rng;

pub fn base() -> Timestamp {
    Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap()
}

pub fn pseudonym(n: usize) -> Pseudonym {
    Pseudonym::parse(format!("{:A>22}", format!("P{n}"))).unwrap()
}

// ---- consent / restriction gate ---------------------------------------

pub const GATE_PURPOSES: [&str; 3] = ["billing", "newsletter", "ads"];

#[derive(Debug, Clone)]
pub enum GateOp {
    Grant { p: usize, purpose: usize },
    Cancel { p: usize, purpose: usize },
    Place { p: usize, scope: usize },
    Lift { p: usize, nth: usize },
}

pub fn gate_scope(i: usize) -> Scope {
    match i % 5 {
        0 => Scope::All,
        1 => Scope::Identity,
        k => Scope::Purpose(GATE_PURPOSES[k - 2].into()),
    }
}

/// An event the centers accepted, with its time.
#[derive(Debug, Clone)]
pub enum Accepted {
    Granted(Pseudonym, PurposeId),
    Cancelled(Pseudonym, PurposeId),
    Placed(RestrictionId, Pseudonym, Scope),
    Lifted(RestrictionId),
}

pub struct GateHistory {
    pub consents: ConsentCenter,
    pub restrictions: RestrictionCenter,
    pub accepted: Vec<(Timestamp, Accepted)>,
    pub end: Timestamp,
}

/// Drives both centers with `ops` at non-decreasing times (step 0 to 3
/// minutes, so equal timestamps occur) and records what they accepted.
pub fn run_gate_history(ops: &[(GateOp, i64)]) -> GateHistory {
    let registry = PurposeRegistry::new(GATE_PURPOSES);
    let mut consents = ConsentCenter::new(registry);
    let mut restrictions = RestrictionCenter::default();
    let mut accepted = Vec::new();
    let mut now = base();
    let mut placed: BTreeMap<usize, Vec<RestrictionId>> = BTreeMap::new();
    for (i, (op, step)) in ops.iter().enumerate() {
        now += Duration::minutes(*step);
        match op {
            GateOp::Grant { p, purpose } => {
                let (pp, pu) = (pseudonym(*p), PurposeId::from(GATE_PURPOSES[*purpose]));
                let id = ConsentId::new(format!("c{i}"));
                let profile = SubjectProfile::default();
                if consents
                    .grant(id, &pp, &pu, Grantor::Subject, None, &profile, now)
                    .is_ok()
                {
                    accepted.push((now, Accepted::Granted(pp, pu)));
                }
            }
            GateOp::Cancel { p, purpose } => {
                let (pp, pu) = (pseudonym(*p), PurposeId::from(GATE_PURPOSES[*purpose]));
                if consents.cancel(&pp, &pu, &Grantor::Subject, now).is_ok() {
                    accepted.push((now, Accepted::Cancelled(pp, pu)));
                }
            }
            GateOp::Place { p, scope } => {
                let id = RestrictionId::new(format!("r{i}"));
                if restrictions
                    .place(id.clone(), &pseudonym(*p), gate_scope(*scope), "r", now)
                    .is_ok()
                {
                    placed.entry(*p).or_default().push(id.clone());
                    accepted.push((now, Accepted::Placed(id, pseudonym(*p), gate_scope(*scope))));
                }
            }
            GateOp::Lift { p, nth } => {
                if let Some(ids) = placed.get(p).filter(|v| !v.is_empty()) {
                    let id = ids[nth % ids.len()].clone();
                    if restrictions.lift(&id, now).is_ok() {
                        accepted.push((now, Accepted::Lifted(id)));
                    }
                }
            }
        }
    }
    GateHistory {
        consents,
        restrictions,
        accepted,
        end: now,
    }
}

pub fn random_gate_ops(rng: &mut impl Rng, n: usize, subjects: usize) -> Vec<(GateOp, i64)> {
    (0..n)
        .map(|_| {
            let p = rng.gen_range(0..subjects);
            let op = match rng.gen_range(0..4) {
                0 => GateOp::Grant {
                    p,
                    purpose: rng.gen_range(0..GATE_PURPOSES.len()),
                },
                1 => GateOp::Cancel {
                    p,
                    purpose: rng.gen_range(0..GATE_PURPOSES.len()),
                },
                2 => GateOp::Place {
                    p,
                    scope: rng.gen_range(0..5),
                },
                _ => GateOp::Lift {
                    p,
                    nth: rng.gen_range(0..4),
                },
            };
            (op, rng.gen_range(0..4))
        })
        .collect()
}

/// Consent status by folding the accepted history up to `at`.
pub fn consent_oracle(
    h: &GateHistory,
    p: &Pseudonym,
    purpose: &PurposeId,
    at: Timestamp,
) -> ConsentStatus {
    let mut granted = false;
    for (when, e) in &h.accepted {
        if *when > at {
            break;
        }
        match e {
            Accepted::Granted(q, u) if q == p && u == purpose => granted = true,
            Accepted::Cancelled(q, u) if q == p && u == purpose => granted = false,
            _ => {}
        }
    }
    if granted {
        ConsentStatus::Consented
    } else {
        ConsentStatus::NotConsented
    }
}

/// Restriction gate by folding the accepted history up to `at`.
pub fn restriction_oracle(h: &GateHistory, p: &Pseudonym, target: &Scope, at: Timestamp) -> Gate {
    let mut active: BTreeMap<RestrictionId, (Pseudonym, Scope)> = BTreeMap::new();
    for (when, e) in &h.accepted {
        if *when > at {
            break;
        }
        match e {
            Accepted::Placed(id, q, s) => {
                active.insert(id.clone(), (q.clone(), s.clone()));
            }
            Accepted::Lifted(id) => {
                active.remove(id);
            }
            _ => {}
        }
    }
    let hit = active
        .values()
        .any(|(q, s)| q == p && (*s == Scope::All || s == target));
    if hit {
        Gate::Restricted
    } else {
        Gate::Clear
    }
}

/// Checks `points` sampled (pseudonym, purpose-or-scope, time) triples.
/// Returns (points checked, mismatches).
pub fn check_gate_points(
    h: &GateHistory,
    rng: &mut impl Rng,
    points: usize,
    subjects: usize,
) -> (usize, usize) {
    let span = (h.end - base()).num_minutes() + 2;
    let mut mismatches = 0;
    for _ in 0..points {
        let at = if !h.accepted.is_empty() && rng.gen_bool(0.3) {
            h.accepted[rng.gen_range(0..h.accepted.len())].0
        } else {
            base()
                + Duration::minutes(rng.gen_range(-1..span))
                + Duration::seconds(rng.gen_range(0..60))
        };
        let p = pseudonym(rng.gen_range(0..subjects));
        let purpose = PurposeId::from(GATE_PURPOSES[rng.gen_range(0..GATE_PURPOSES.len())]);
        if h.consents.check(&p, &purpose, at) != consent_oracle(h, &p, &purpose, at) {
            mismatches += 1;
        }
        let scope = gate_scope(rng.gen_range(0..5));
        if h.restrictions.check(&p, &scope, at) != restriction_oracle(h, &p, &scope, at) {
            mismatches += 1;
        }
    }
    (points, mismatches)
}

// ---- full-store scans ----------------------------------------------------

/// Every store dumped as JSON text, labeled. Backups appear as the state a
/// restore would produce right now.
pub fn store_dumps(plane: &DataPlane) -> Vec<(String, String)> {
    let mut out = vec![
        (
            "cpdm".to_string(),
            serde_json::to_string(plane.vault()).unwrap(),
        ),
        (
            "cpdm-staged".to_string(),
            serde_json::to_string(&plane.vault().staged_rectifications().collect::<Vec<_>>())
                .unwrap(),
        ),
        (
            "cpdm-exports".to_string(),
            serde_json::to_string(&plane.vault().stored_exports().collect::<Vec<_>>()).unwrap(),
        ),
        (
            "consents".to_string(),
            serde_json::to_string(&plane.consents().iter().collect::<Vec<_>>()).unwrap(),
        ),
        (
            "restrictions".to_string(),
            serde_json::to_string(&plane.restrictions().iter().collect::<Vec<_>>()).unwrap(),
        ),
        (
            "requests".to_string(),
            serde_json::to_string(plane.requests()).unwrap(),
        ),
        (
            "bus".to_string(),
            serde_json::to_string(&plane.bus().plans().collect::<Vec<_>>()).unwrap(),
        ),
        (
            "journal".to_string(),
            serde_json::to_string(plane.journal().entries()).unwrap(),
        ),
        (
            "audit".to_string(),
            serde_json::to_string(plane.audit_log().events()).unwrap(),
        ),
    ];
    for (id, bls) in plane.services() {
        out.push((format!("bls:{id}"), serde_json::to_string(bls).unwrap()));
    }
    for id in plane.snapshots().keys() {
        let (vault, services) = plane.preview_restore(id).unwrap();
        out.push((
            format!("backup:{id}:cpdm"),
            serde_json::to_string(&vault).unwrap(),
        ));
        out.push((
            format!("backup:{id}:bls"),
            serde_json::to_string(&services).unwrap(),
        ));
    }
    out
}

/// Stores in which any of `values` occurs as a substring.
pub fn stores_containing(plane: &DataPlane, values: &[String]) -> Vec<String> {
    store_dumps(plane)
        .into_iter()
        .filter(|(_, text)| values.iter().any(|v| text.contains(&json_escaped(v))))
        .map(|(name, _)| name)
        .collect()
}

fn json_escaped(v: &str) -> String {
    let s = serde_json::to_string(v).unwrap();
    s[1..s.len() - 1].to_string()
}

// ---- export ----------------------------------------------------------------

/// The subject's data read straight out of each store.
pub struct ExportOracle {
    pub fields: BTreeMap<String, String>,
    pub consent_ids: BTreeSet<(PurposeId, Timestamp)>,
    pub restriction_scopes: BTreeSet<(Scope, Timestamp)>,
    pub services: BTreeMap<ServiceId, Vec<ServiceRecord>>,
}

pub fn export_oracle(plane: &DataPlane, p: &Pseudonym) -> ExportOracle {
    let record = plane.vault().records().find(|r| &r.pseudonym == p).unwrap();
    let mut services = BTreeMap::new();
    for (id, bls) in plane.services() {
        let mut rows: Vec<_> = bls
            .rows()
            .filter(|(q, _)| *q == p)
            .map(|(_, r)| r.clone())
            .collect();
        rows.sort();
        if !rows.is_empty() {
            services.insert(id.clone(), rows);
        }
    }
    ExportOracle {
        fields: record.direct_identifiers.clone(),
        consent_ids: plane
            .consents()
            .iter()
            .filter(|c| &c.pseudonym == p)
            .map(|c| (c.purpose.clone(), c.granted_at))
            .collect(),
        restriction_scopes: plane
            .restrictions()
            .iter()
            .filter(|r| &r.pseudonym == p)
            .map(|r| (r.scope.clone(), r.placed_at))
            .collect(),
        services,
    }
}

/// Differences between an aggregated export and the oracle, empty when equal.
pub fn export_mismatches(doc: &PortableDocument, oracle: &ExportOracle) -> Vec<String> {
    let mut out = Vec::new();
    if doc.fields != oracle.fields {
        out.push("fields".into());
    }
    let consents: BTreeSet<_> = doc
        .consents
        .iter()
        .flatten()
        .map(|c| (c.purpose.clone(), c.granted_at))
        .collect();
    if consents != oracle.consent_ids {
        out.push("consents".into());
    }
    let restrictions: BTreeSet<_> = doc
        .restrictions
        .iter()
        .flatten()
        .map(|r| (r.scope.clone(), r.placed_at))
        .collect();
    if restrictions != oracle.restriction_scopes {
        out.push("restrictions".into());
    }
    let mut services = doc.services.clone().unwrap_or_default();
    for rows in services.values_mut() {
        rows.sort();
    }
    if services != oracle.services {
        out.push("services".into());
    }
    out
}
