//! Data minimization report: what every store holds, by sensitivity class,
//! and any identifying value found outside the identity vault.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::hygiene::Finding;
use crate::plane::DataPlane;
use crate::types::SensitivityClass;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreSummary {
    pub store: String,
    pub class: SensitivityClass,
    pub records: usize,
}

/// An identifying value where none may be. Carries the location only.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub store: String,
    pub path: String,
    pub finding: Finding,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinimizationReport {
    pub stores: Vec<StoreSummary>,
    pub violations: Vec<Violation>,
}

impl MinimizationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

pub(crate) fn report(plane: &DataPlane) -> MinimizationReport {
    let mut r = Builder::new(plane);
    let vault = plane.vault();
    r.custody(
        "cpdm",
        vault.len() + vault.staged_rectifications().count() + vault.stored_exports().count(),
    );

    let requests: Vec<_> = plane.requests().iter().collect();
    r.scan(
        "requests",
        SensitivityClass::Limited,
        requests.len(),
        json(&requests),
    );
    let consents: Vec<_> = plane.consents().iter().collect();
    r.scan(
        "consents",
        SensitivityClass::Limited,
        consents.len(),
        json(&consents),
    );
    let restrictions: Vec<_> = plane.restrictions().iter().collect();
    r.scan(
        "restrictions",
        SensitivityClass::Limited,
        restrictions.len(),
        json(&restrictions),
    );
    let plans: Vec<_> = plane.bus().plans().collect();
    r.scan("bus", SensitivityClass::Limited, plans.len(), json(&plans));

    for (id, bls) in plane.services() {
        let rows: Vec<_> = bls.rows().collect();
        r.scan(
            &format!("bls:{id}"),
            SensitivityClass::Indirect,
            rows.len(),
            json(&rows),
        );
    }
    for (id, snap) in plane.snapshots() {
        r.custody(&format!("backup:{id}:cpdm"), snap.vault.len());
        for (sid, bls) in &snap.services {
            let rows: Vec<_> = bls.rows().collect();
            r.scan(
                &format!("backup:{id}:bls:{sid}"),
                SensitivityClass::Indirect,
                rows.len(),
                json(&rows),
            );
        }
    }
    if let Some(staging) = plane.staging() {
        r.scan(
            "staging",
            SensitivityClass::None,
            staging.len(),
            json(&staging.subjects),
        );
    }
    let events = plane.audit_log().events();
    r.scan(
        "audit",
        SensitivityClass::Limited,
        events.len(),
        json(&events),
    );
    r.finish()
}

fn json<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("store serializes")
}

struct Builder<'a> {
    plane: &'a DataPlane,
    report: MinimizationReport,
}

impl<'a> Builder<'a> {
    fn new(plane: &'a DataPlane) -> Self {
        Self {
            plane,
            report: MinimizationReport {
                stores: Vec::new(),
                violations: Vec::new(),
            },
        }
    }

    /// Stores permitted to hold direct identifiers are counted, not scanned.
    fn custody(&mut self, store: &str, records: usize) {
        self.report.stores.push(StoreSummary {
            store: store.to_string(),
            class: SensitivityClass::Direct,
            records,
        });
    }

    fn scan(&mut self, store: &str, class: SensitivityClass, records: usize, value: Value) {
        let live = self.plane.vault().identifiers();
        for (path, finding) in self.plane.detector().scan_json(&value, live) {
            self.report.violations.push(Violation {
                store: store.to_string(),
                path,
                finding,
            });
        }
        self.report.stores.push(StoreSummary {
            store: store.to_string(),
            class,
            records,
        });
    }

    fn finish(self) -> MinimizationReport {
        self.report
    }
}
