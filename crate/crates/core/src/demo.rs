//! Scripted end-to-end run used by `pdp demo`, the acceptance suite and the
//! console fixtures. Same seed, same transcript.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use chrono::{Duration, TimeZone, Utc};
use serde::{Deserialize, Serialize};

use crate::bls::Behavior;
use crate::bus::ServiceRegistration;
use crate::consent::{ConsentStatus, Grantor, SubjectProfile};
use crate::error::{Error, Result};
use crate::ids::IdGenerator;
use crate::journal::Event;
use crate::plane::{ConsentGrant, DataPlane, PlaneConfig, Registration};
use crate::request::{RequestPayload, Verdict};
use crate::restriction::Scope;
use crate::types::{Actor, Pseudonym, PurposeId, RegionCode, RequestId, ServiceId, Timestamp};

pub const BILLING: &str = "billing-svc";
pub const NEWSLETTER: &str = "newsletter-svc";
pub const DEMO_ADMIN: &str = "admin-1";

/// First instant of the scripted run. Each step advances one hour.
pub fn demo_epoch() -> Timestamp {
    Utc.with_ymd_and_hms(2024, 3, 1, 9, 0, 0).unwrap()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptStep {
    pub n: usize,
    pub at: Timestamp,
    pub action: String,
    pub outcome: String,
    /// `from->to` per request transition journaled by the step.
    pub transitions: Vec<String>,
    /// Inclusive audit sequence range written by the step, if any.
    pub audit: Option<(u64, u64)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    pub seed: u64,
    pub steps: Vec<TranscriptStep>,
}

impl Transcript {
    pub fn render(&self) -> String {
        let mut out = format!("demo seed={}\n", self.seed);
        for s in &self.steps {
            let audit = s
                .audit
                .map_or_else(|| "-".to_string(), |(a, b)| format!("{a}..{b}"));
            let _ = writeln!(
                out,
                "{:02} {} {} -> {} audit={audit}",
                s.n,
                s.at.to_rfc3339(),
                s.action,
                s.outcome
            );
            for t in &s.transitions {
                let _ = writeln!(out, "     {t}");
            }
        }
        out
    }
}

/// Handles into the scripted state, keyed by the script's labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Demo {
    pub transcript: Transcript,
    pub subjects: BTreeMap<&'static str, Pseudonym>,
    pub requests: BTreeMap<&'static str, RequestId>,
}

/// An in-memory plane seeded for the scripted run.
pub fn fresh_plane(seed: u64) -> Result<DataPlane> {
    DataPlane::in_memory(PlaneConfig::default(), IdGenerator::seeded(seed))
}

struct Script<'a> {
    plane: &'a mut DataPlane,
    now: Timestamp,
    steps: Vec<TranscriptStep>,
}

impl Script<'_> {
    fn step<T>(
        &mut self,
        action: String,
        f: impl FnOnce(&mut DataPlane, Timestamp) -> Result<T>,
    ) -> Result<T> {
        self.now += Duration::hours(1);
        let journal_from = self.plane.journal().last_seq();
        let audit_from = self.plane.audit_log().last_seq();
        let result = f(self.plane, self.now);
        let outcome = match &result {
            Ok(_) => "ok".to_string(),
            Err(e) => format!("error {}", e.kind()),
        };
        let transitions = self
            .plane
            .journal()
            .entries()
            .iter()
            .filter(|e| e.seq > journal_from)
            .filter_map(|e| match &e.event {
                Event::RequestTransition { transition: t } => {
                    Some(format!("{} {}->{}", t.id, t.from.name(), t.to.name()))
                }
                _ => None,
            })
            .collect();
        let audit_to = self.plane.audit_log().last_seq();
        self.steps.push(TranscriptStep {
            n: self.steps.len() + 1,
            at: self.now,
            action,
            outcome,
            transitions,
            audit: (audit_to > audit_from).then_some((audit_from + 1, audit_to)),
        });
        result
    }
}

fn fields(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
    pairs
        .iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

fn register(
    plane: &mut DataPlane,
    now: Timestamp,
    ids: &[(&str, String)],
    region: &str,
    purpose: &str,
    grantor: Grantor,
    profile: SubjectProfile,
) -> Result<Pseudonym> {
    plane.register_subject(
        Registration {
            identifiers: ids
                .iter()
                .map(|(k, v)| (k.to_string(), v.clone()))
                .collect(),
            region: RegionCode::parse(region)?,
            purpose: purpose.into(),
            consent: Some(ConsentGrant {
                grantor,
                signature: None,
            }),
            profile,
        },
        now,
    )
}

/// Runs the script against an empty plane.
pub fn run_demo_scenario(plane: &mut DataPlane, seed: u64) -> Result<Demo> {
    if !plane.journal().is_empty() {
        return Err(Error::StorageNotEmpty);
    }
    let admin = Actor::admin(DEMO_ADMIN);
    let mut s = Script {
        plane,
        now: demo_epoch(),
        steps: Vec::new(),
    };
    let mut subjects = BTreeMap::new();
    let mut requests = BTreeMap::new();
    let billing = ServiceId::new(BILLING);
    let newsletter = ServiceId::new(NEWSLETTER);

    s.step(format!("register service {BILLING}"), |p, now| {
        p.spawn_service(
            ServiceRegistration::new(
                BILLING,
                ["billing".into(), "analytics".into()],
                RegionCode::parse("FI")?,
            ),
            Behavior::Healthy,
            now,
        )
    })?;
    s.step(format!("register service {NEWSLETTER}"), |p, now| {
        p.spawn_service(
            ServiceRegistration::new(
                NEWSLETTER,
                ["newsletter".into(), "ads".into()],
                RegionCode::parse("SE")?,
            ),
            Behavior::Healthy,
            now,
        )
    })?;

    let people: [(&'static str, &str, &str, &str); 3] = [
        ("s1", "Aino Virtanen", "FI", "billing"),
        ("s2", "Bruno Lindqvist", "SE", "billing"),
        ("s3", "Carla Nieminen", "FI", "newsletter"),
    ];
    for (i, (label, name, region, purpose)) in people.into_iter().enumerate() {
        let email = format!("user{}.{seed}@example.org", i + 1);
        let phone = format!(
            "+35840{:07}",
            (seed.wrapping_mul(7919) + i as u64 * 104_729) % 10_000_000
        );
        let ids = [
            ("email", email),
            ("name", name.to_string()),
            ("phone", phone),
        ];
        let p = s.step(
            format!("register subject {label} purpose={purpose}"),
            |p, now| {
                register(
                    p,
                    now,
                    &ids,
                    region,
                    purpose,
                    Grantor::Subject,
                    SubjectProfile::default(),
                )
            },
        )?;
        subjects.insert(label, p);
    }
    let guardian = subjects["s3"].clone();
    let child_email = format!("child.{seed}@example.org");
    let child = s.step(
        "register minor s4 with guardian s3 purpose=newsletter".into(),
        |p, now| {
            register(
                p,
                now,
                &[("email", child_email), ("name", "Daniel Nieminen".into())],
                "FI",
                "newsletter",
                Grantor::Guardian(guardian.clone()),
                SubjectProfile {
                    minor: true,
                    guardian: Some(guardian.clone()),
                },
            )
        },
    )?;
    subjects.insert("s4", child.clone());

    let s1 = subjects["s1"].clone();
    let s2 = subjects["s2"].clone();
    s.step("grant s1 newsletter".into(), |p, now| {
        p.grant_consent(&s1, &"newsletter".into(), Grantor::Subject, None, now)
    })?;
    s.step("grant s2 analytics".into(), |p, now| {
        p.grant_consent(&s2, &"analytics".into(), Grantor::Subject, None, now)
    })?;

    let rows: [(&ServiceId, &Pseudonym, &str, &[(&str, &str)]); 5] = [
        (
            &billing,
            &s1,
            "billing",
            &[("plan", "pro"), ("invoices", "3")],
        ),
        (&newsletter, &s1, "newsletter", &[("topic", "cycling")]),
        (
            &billing,
            &s2,
            "billing",
            &[("plan", "basic"), ("invoices", "1")],
        ),
        (&billing, &s2, "analytics", &[("segment", "commuter")]),
        (&newsletter, &child, "newsletter", &[("topic", "games")]),
    ];
    for (svc, subject, purpose, row) in rows {
        let label = label_of(&subjects, subject);
        s.step(format!("process {svc} {label} {purpose}"), |p, now| {
            p.process(svc, subject, &PurposeId::from(purpose), fields(row), now)
        })?;
    }

    let newsletter_purpose = PurposeId::from("newsletter");
    let gate_before = s
        .plane
        .processing_gate(&child, &newsletter_purpose, s.now)
        .consent;
    s.step("guardian s3 cancels s4 newsletter".into(), |p, now| {
        p.cancel_consent(
            &child,
            &newsletter_purpose,
            &Grantor::Guardian(guardian.clone()),
            now,
        )
    })?;
    let gate_after = s
        .plane
        .processing_gate(&child, &newsletter_purpose, s.now)
        .consent;
    s.step(
        format!(
            "gate s4 newsletter {}->{}",
            gate_name(gate_before),
            gate_name(gate_after)
        ),
        |p, now| match p.process(
            &newsletter,
            &child,
            &newsletter_purpose,
            fields(&[("topic", "music")]),
            now,
        ) {
            Err(Error::MissingConsent(_)) => Ok(()),
            Ok(()) => Err(Error::MalformedPayload(
                "processing continued after cancel".into(),
            )),
            Err(e) => Err(e),
        },
    )?;

    let script: [(&'static str, &Pseudonym, RequestPayload); 6] = [
        ("access", &s1, RequestPayload::Access),
        (
            "rectification",
            &s2,
            RequestPayload::Rectification {
                changes: [("email".to_string(), format!("user2.{seed}@example.net"))].into(),
                indirect: fields(&[("plan", "premium")]),
            },
        ),
        (
            "restriction",
            &s1,
            RequestPayload::Restriction {
                scope: Scope::Purpose("analytics".into()),
                reason: "accuracy contested".into(),
            },
        ),
        (
            "objection",
            &s2,
            RequestPayload::Objection {
                purpose: "ads".into(),
            },
        ),
        ("declined", &guardian, RequestPayload::Access),
        ("erasure", &s2, RequestPayload::Erasure),
    ];
    for (label, subject, payload) in script {
        let who = label_of(&subjects, subject);
        let kind = payload_name(&payload);
        let req = s.step(format!("submit {kind} for {who}"), |p, now| {
            p.submit_request(subject, payload, now)
        })?;
        let id = req.id.clone();
        requests.insert(label, id.clone());
        if label == "declined" {
            s.step(format!("decline {label}"), |p, now| {
                p.decide(
                    &id,
                    &admin,
                    Verdict::Decline("duplicate of an earlier request".into()),
                    now,
                )
            })?;
            continue;
        }
        s.step(format!("approve {label}"), |p, now| {
            p.decide(&id, &admin, Verdict::Approve, now)
        })?;
        let executed = s.step(format!("execute {label}"), |p, now| p.execute(&id, now));
        match (label, executed) {
            (_, Ok(_)) => {}
            // The objection placed earlier freezes s2; withdrawing it lets
            // the waiting erasure run.
            ("erasure", Err(Error::BlockedByRestriction)) => {
                let objection = s
                    .plane
                    .restrictions()
                    .for_subject(subject)
                    .find(|r| r.lifted_at.is_none())
                    .map(|r| r.id.clone())
                    .ok_or(Error::UnknownRestriction)?;
                s.step(format!("lift objection of {who}"), |p, now| {
                    p.lift_restriction(&objection, now)
                })?;
            }
            (_, Err(e)) => return Err(e),
        }
    }

    s.step("backup".into(), |p, now| p.backup(now))?;
    s.step("retention scan".into(), |p, now| {
        p.retention_scan(now, None)
    })?;
    let report = s.plane.minimization_report();
    s.step(
        format!("minimization report violations={}", report.violations.len()),
        |_, _| Ok(()),
    )?;

    Ok(Demo {
        transcript: Transcript {
            seed,
            steps: s.steps,
        },
        subjects,
        requests,
    })
}

fn label_of(subjects: &BTreeMap<&'static str, Pseudonym>, p: &Pseudonym) -> &'static str {
    subjects
        .iter()
        .find(|(_, v)| *v == p)
        .map_or("?", |(k, _)| k)
}

fn gate_name(s: ConsentStatus) -> &'static str {
    match s {
        ConsentStatus::Consented => "consented",
        ConsentStatus::NotConsented => "not_consented",
    }
}

fn payload_name(p: &RequestPayload) -> &'static str {
    match p {
        RequestPayload::Access => "access",
        RequestPayload::Rectification { .. } => "rectification",
        RequestPayload::Erasure => "erasure",
        RequestPayload::Restriction { .. } => "restriction",
        RequestPayload::Objection { .. } => "objection",
    }
}
