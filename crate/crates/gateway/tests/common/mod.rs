#![allow(dead_code)]

use std::path::Path;
use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::Arc;

use chrono::{Duration, TimeZone, Utc};
use pdp_core::bls::Behavior;
use pdp_core::bus::ServiceRegistration;
use pdp_core::consent::{Grantor, SubjectProfile};
use pdp_core::ids::IdGenerator;
use pdp_core::plane::{ConsentGrant, DataPlane, Registration};
use pdp_core::{Pseudonym, RegionCode, Role, Timestamp};
use pdp_gateway::config::TokenEntry;
use pdp_gateway::{serve, Clock, Config, ServerHandle};
use reqwest::{Method, StatusCode};
use serde_json::Value;

pub const ADMIN: &str = "tok-admin";
pub const SUPPORT: &str = "tok-support";
pub const DEVELOPER: &str = "tok-dev";
pub const ALICE: &str = "tok-alice";
pub const BOB: &str = "tok-bob";
pub const CHILD: &str = "tok-child";

pub const ALICE_EMAIL: &str = "alice@example.test";
pub const BOB_EMAIL: &str = "bob@example.test";
pub const CHILD_EMAIL: &str = "kid@example.test";

pub fn epoch() -> Timestamp {
    Utc.with_ymd_and_hms(2024, 5, 1, 8, 0, 0).unwrap()
}

/// Clock the test advances explicitly; every read moves one second forward.
#[derive(Clone, Default)]
pub struct TestClock(Arc<AtomicI64>);

impl TestClock {
    pub fn clock(&self) -> Clock {
        let secs = self.0.clone();
        Arc::new(move || epoch() + Duration::seconds(secs.fetch_add(1, Ordering::SeqCst)))
    }

    pub fn advance(&self, d: Duration) {
        self.0.fetch_add(d.num_seconds(), Ordering::SeqCst);
    }
}

pub struct Subjects {
    pub alice: Pseudonym,
    pub bob: Pseudonym,
    /// Minor whose guardian is Bob.
    pub child: Pseudonym,
}

fn registration(email: &str, profile: SubjectProfile, grantor: Grantor) -> Registration {
    Registration {
        identifiers: [("email".to_string(), email.to_string())].into(),
        region: RegionCode::parse("FI").unwrap(),
        purpose: "billing".into(),
        consent: Some(ConsentGrant {
            grantor,
            signature: None,
        }),
        profile,
    }
}

/// Seeds storage offline so user tokens can name real pseudonyms.
pub fn seed_storage(dir: &Path) -> Subjects {
    let mut plane = DataPlane::open(
        Config::default().plane_config().unwrap(),
        Some(dir),
        IdGenerator::seeded(7),
        epoch(),
    )
    .unwrap();
    let at = epoch() - Duration::hours(1);
    for (id, purposes) in [
        ("crm", vec!["billing", "newsletter"]),
        ("mailer", vec!["newsletter"]),
    ] {
        plane
            .spawn_service(
                ServiceRegistration::new(
                    id,
                    purposes.into_iter().map(Into::into),
                    RegionCode::parse("FI").unwrap(),
                ),
                Behavior::Healthy,
                at,
            )
            .unwrap();
    }
    let alice = plane
        .register_subject(
            registration(ALICE_EMAIL, SubjectProfile::default(), Grantor::Subject),
            at,
        )
        .unwrap();
    let bob = plane
        .register_subject(
            registration(BOB_EMAIL, SubjectProfile::default(), Grantor::Subject),
            at,
        )
        .unwrap();
    let child = plane
        .register_subject(
            registration(
                CHILD_EMAIL,
                SubjectProfile {
                    minor: true,
                    guardian: Some(bob.clone()),
                },
                Grantor::Guardian(bob.clone()),
            ),
            at,
        )
        .unwrap();
    let fields = [("plan".to_string(), "basic".to_string())].into();
    plane
        .process(
            &pdp_core::ServiceId::new("crm"),
            &alice,
            &"billing".into(),
            fields,
            at,
        )
        .unwrap();
    Subjects { alice, bob, child }
}

pub fn config(dir: &Path, s: &Subjects) -> Config {
    let mut c = Config {
        storage_dir: dir.to_path_buf(),
        listen_address: "127.0.0.1:0".into(),
        ..Config::default()
    };
    let entry = |role, id: &str, p: Option<&Pseudonym>| TokenEntry {
        role,
        id: id.into(),
        pseudonym: p.cloned(),
    };
    c.tokens
        .insert(ADMIN.into(), entry(Role::Admin, "admin-1", None));
    c.tokens
        .insert(SUPPORT.into(), entry(Role::Support, "support-1", None));
    c.tokens
        .insert(DEVELOPER.into(), entry(Role::Developer, "dev-1", None));
    c.tokens
        .insert(ALICE.into(), entry(Role::User, "alice", Some(&s.alice)));
    c.tokens
        .insert(BOB.into(), entry(Role::User, "bob", Some(&s.bob)));
    c.tokens
        .insert(CHILD.into(), entry(Role::User, "child", Some(&s.child)));
    c
}

pub struct Harness {
    pub dir: tempfile::TempDir,
    pub subjects: Subjects,
    pub clock: TestClock,
    pub server: ServerHandle,
    pub http: reqwest::Client,
}

impl Harness {
    pub async fn start() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let subjects = seed_storage(dir.path());
        let clock = TestClock::default();
        let server = serve(config(dir.path(), &subjects), clock.clock())
            .await
            .unwrap();
        Self {
            dir,
            subjects,
            clock,
            server,
            http: reqwest::Client::new(),
        }
    }

    pub async fn restart(self) -> Self {
        let Harness {
            dir,
            subjects,
            clock,
            server,
            http,
        } = self;
        server.shutdown().await.unwrap();
        let server = serve(config(dir.path(), &subjects), clock.clock())
            .await
            .unwrap();
        Self {
            dir,
            subjects,
            clock,
            server,
            http,
        }
    }

    pub fn url(&self, path: &str) -> String {
        format!("http://{}{}", self.server.addr, path)
    }

    pub async fn call(
        &self,
        method: Method,
        path: &str,
        token: Option<&str>,
        body: Option<Value>,
    ) -> (StatusCode, Value) {
        let mut req = self.http.request(method, self.url(path));
        if let Some(t) = token {
            req = req.bearer_auth(t);
        }
        if let Some(b) = body {
            req = req.json(&b);
        }
        let resp = req.send().await.unwrap();
        let status = resp.status();
        let text = resp.text().await.unwrap();
        (
            status,
            serde_json::from_str(&text).unwrap_or(Value::String(text)),
        )
    }

    pub async fn get(&self, path: &str, token: &str) -> (StatusCode, Value) {
        self.call(Method::GET, path, Some(token), None).await
    }

    pub async fn post(&self, path: &str, token: &str, body: Value) -> (StatusCode, Value) {
        self.call(Method::POST, path, Some(token), Some(body)).await
    }
}
