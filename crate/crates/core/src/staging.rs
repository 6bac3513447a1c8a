//! Synthetic staging data shaped like production.
//!
//! Every subject gets a fresh pseudonym unrelated to its production one and
//! synthetic identifier values of the same field names. Service fragments
//! are carried over with production pseudonyms rewritten.

use std::collections::BTreeMap;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::export::ServiceRecord;
use crate::ids::IdGenerator;
use crate::plane::DataPlane;
use crate::types::{IdentifierMap, Pseudonym, RegionCode, ServiceId, Timestamp};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagingSubject {
    pub pseudonym: Pseudonym,
    pub region: RegionCode,
    pub fields: IdentifierMap,
    pub services: BTreeMap<ServiceId, Vec<ServiceRecord>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagingSnapshot {
    pub seed: u64,
    pub as_of: Timestamp,
    pub subjects: Vec<StagingSubject>,
}

impl StagingSnapshot {
    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    /// One subject per line.
    pub fn to_ndjson(&self) -> String {
        let mut out = String::new();
        for s in &self.subjects {
            out.push_str(&serde_json::to_string(s).expect("subject serializes"));
            out.push('\n');
        }
        out
    }
}

/// Same plane state, seed and `as_of` give the same snapshot.
pub(crate) fn generate(plane: &DataPlane, seed: u64, as_of: Timestamp) -> StagingSnapshot {
    let mut ids = IdGenerator::seeded(seed);
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x5eed_5eed);
    let records: Vec<_> = plane
        .vault()
        .records()
        .filter(|r| r.created_at <= as_of)
        .collect();
    let production: Vec<&str> = plane
        .vault()
        .records()
        .map(|r| r.pseudonym.as_str())
        .collect();

    let mut mapping = BTreeMap::new();
    for r in &records {
        let fresh = loop {
            let p = ids.pseudonym_avoiding(production.iter().copied());
            if !mapping.values().any(|v: &Pseudonym| v == &p) {
                break p;
            }
        };
        mapping.insert(r.pseudonym.clone(), fresh);
    }

    let subjects = records
        .iter()
        .map(|r| {
            let fields = r
                .direct_identifiers
                .keys()
                .map(|k| {
                    (
                        k.clone(),
                        format!("synthetic-{k}-{:06x}", rng.next_u32() & 0xff_ffff),
                    )
                })
                .collect();
            let services = plane
                .services()
                .iter()
                .map(|(id, bls)| {
                    let rows: Vec<_> = bls
                        .fragment(&r.pseudonym)
                        .into_iter()
                        .filter(|row| row.recorded_at <= as_of)
                        .map(|row| rewrite(row, &mapping))
                        .collect();
                    (id.clone(), rows)
                })
                .filter(|(_, rows)| !rows.is_empty())
                .collect();
            StagingSubject {
                pseudonym: mapping[&r.pseudonym].clone(),
                region: r.region.clone(),
                fields,
                services,
            }
        })
        .collect();
    StagingSnapshot {
        seed,
        as_of,
        subjects,
    }
}

/// Replaces production pseudonyms inside row values with their staging
/// counterparts so rows cannot be joined back to production.
fn rewrite(mut row: ServiceRecord, mapping: &BTreeMap<Pseudonym, Pseudonym>) -> ServiceRecord {
    for v in row.fields.values_mut() {
        for (from, to) in mapping {
            if v.contains(from.as_str()) {
                *v = v.replace(from.as_str(), to.as_str());
            }
        }
    }
    row
}
