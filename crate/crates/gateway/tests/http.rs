mod common;

use chrono::Duration;
use common::*;
use pdp_gateway::{serve, Config, GatewayError};
use reqwest::{Method, StatusCode};
use serde_json::{json, Value};

async fn approve_and_execute(h: &Harness, id: &str) -> (StatusCode, Value) {
    let (st, body) = h
        .post(
            &format!("/requests/{id}/decision"),
            ADMIN,
            json!({ "verdict": "approve" }),
        )
        .await;
    assert_eq!(st, StatusCode::OK, "{body}");
    h.call(
        Method::POST,
        &format!("/requests/{id}/execute"),
        Some(ADMIN),
        None,
    )
    .await
}

#[tokio::test]
async fn empty_storage_serves_healthy_with_zero_subjects() {
    let dir = tempfile::tempdir().unwrap();
    let config = Config {
        storage_dir: dir.path().to_path_buf(),
        listen_address: "127.0.0.1:0".into(),
        ..Config::default()
    };
    let server = serve(config, TestClock::default().clock()).await.unwrap();
    let body: Value = reqwest::get(format!("http://{}/health", server.addr))
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(body["status"], "ok");
    assert_eq!(body["subjects"], 0);
    server.shutdown().await.unwrap();
}

#[tokio::test]
async fn second_serve_on_same_address_is_address_in_use() {
    let h = Harness::start().await;
    let other = tempfile::tempdir().unwrap();
    let config = Config {
        storage_dir: other.path().to_path_buf(),
        listen_address: h.server.addr.to_string(),
        ..Config::default()
    };
    let err = serve(config, TestClock::default().clock())
        .await
        .err()
        .unwrap();
    assert!(matches!(err, GatewayError::AddressInUse(_)), "{err}");
    assert!(
        std::fs::read_dir(other.path()).unwrap().next().is_none(),
        "storage untouched"
    );
}

#[tokio::test]
async fn unwritable_storage_is_storage_unavailable() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("file");
    std::fs::write(&file, "x").unwrap();
    let config = Config {
        storage_dir: file,
        listen_address: "127.0.0.1:0".into(),
        ..Config::default()
    };
    let err = serve(config, TestClock::default().clock())
        .await
        .err()
        .unwrap();
    assert!(
        matches!(
            err,
            GatewayError::Core(pdp_core::Error::StorageUnavailable(_))
        ),
        "{err}"
    );
}

#[tokio::test]
async fn access_request_round_trip_delivers_export_to_owner_only() {
    let h = Harness::start().await;
    let (st, req) = h
        .post("/requests", ALICE, json!({ "kind": "access" }))
        .await;
    assert_eq!(st, StatusCode::CREATED);
    let id = req["id"].as_str().unwrap();
    let (_, pending) = h.get("/requests?state=pending", ADMIN).await;
    assert_eq!(pending.as_array().unwrap().len(), 1);

    let (st, view) = approve_and_execute(&h, id).await;
    assert_eq!(st, StatusCode::OK, "{view}");
    assert_eq!(view["request"]["state"]["state"], "completed");
    let acks = &view["propagation"][0];
    assert_eq!(acks["action"], "export");
    assert_eq!(acks["status"], "complete");
    for svc in acks["services"].as_array().unwrap() {
        assert_eq!(svc["state"], "done");
    }

    let (st, doc) = h.get(&format!("/requests/{id}/export"), ALICE).await;
    assert_eq!(st, StatusCode::OK);
    let text = doc.to_string();
    assert!(text.contains(ALICE_EMAIL));
    assert!(text.contains("basic"), "service fragment included: {text}");
    assert!(!text.contains(BOB_EMAIL));
    let (st, _) = h.get(&format!("/requests/{id}/export"), BOB).await;
    assert_eq!(st, StatusCode::FORBIDDEN);
    let (st, _) = h.get(&format!("/requests/{id}/export"), ADMIN).await;
    assert_eq!(st, StatusCode::FORBIDDEN);
}

#[tokio::test]
async fn invalid_transitions_and_unknown_ids_map_to_409_and_404() {
    let h = Harness::start().await;
    let (_, req) = h
        .post("/requests", ALICE, json!({ "kind": "access" }))
        .await;
    let id = req["id"].as_str().unwrap();
    let (st, _) = h
        .post(
            &format!("/requests/{id}/decision"),
            ADMIN,
            json!({ "verdict": "decline", "reason": "duplicate" }),
        )
        .await;
    assert_eq!(st, StatusCode::OK);
    let (st, body) = h
        .post(
            &format!("/requests/{id}/decision"),
            ADMIN,
            json!({ "verdict": "approve" }),
        )
        .await;
    assert_eq!(st, StatusCode::CONFLICT);
    assert_eq!(body["error"], "InvalidTransition");
    let (st, body) = h
        .call(
            Method::POST,
            &format!("/requests/{id}/execute"),
            Some(ADMIN),
            None,
        )
        .await;
    assert_eq!(st, StatusCode::CONFLICT, "{body}");
    let (st, body) = h.get("/requests/req_missing", ADMIN).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    assert_eq!(body["error"], "UnknownRequest");
    let (st, body) = h
        .post("/requests", ALICE, json!({ "kind": "teleport" }))
        .await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    assert_eq!(body["error"], "MalformedPayload");
}

#[tokio::test]
async fn silent_service_fails_erasure_with_502_and_missing_acks() {
    let h = Harness::start().await;
    let (st, _) = h
        .post(
            "/services/mailer/behavior",
            ADMIN,
            json!({ "behavior": "drop_messages" }),
        )
        .await;
    assert_eq!(st, StatusCode::OK);
    let (_, req) = h.post("/requests", BOB, json!({ "kind": "erasure" })).await;
    let id = req["id"].as_str().unwrap();
    let (st, body) = approve_and_execute(&h, id).await;
    assert_eq!(st, StatusCode::BAD_GATEWAY, "{body}");
    assert_eq!(body["error"], "PropagationFailed");
    assert_eq!(body["detail"]["missing"], json!(["mailer"]));

    let (_, view) = h.get(&format!("/requests/{id}"), ADMIN).await;
    assert_eq!(view["request"]["state"]["state"], "failed");
    let services = view["propagation"][0]["services"].as_array().unwrap();
    let mailer = services.iter().find(|s| s["service"] == "mailer").unwrap();
    assert_eq!(mailer["state"], "missing");
    assert_eq!(mailer["attempts"], 6);

    // Recovery: the service comes back and the failed request is retried.
    h.post(
        "/services/mailer/behavior",
        ADMIN,
        json!({ "behavior": "healthy" }),
    )
    .await;
    let (st, view) = h
        .call(
            Method::POST,
            &format!("/requests/{id}/execute"),
            Some(ADMIN),
            None,
        )
        .await;
    assert_eq!(st, StatusCode::OK, "{view}");
    assert_eq!(view["request"]["state"]["state"], "completed");
    assert_eq!(view["propagation"].as_array().unwrap().len(), 2);
    let (st, _) = h
        .get(&format!("/subjects/{}", h.subjects.bob), SUPPORT)
        .await;
    assert_eq!(st, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn guardian_cancels_child_consent_and_gate_flips() {
    let h = Harness::start().await;
    let child = h.subjects.child.to_string();
    let gate = format!("/subjects/{child}/gate?purpose=billing");
    let (_, g) = h.get(&gate, ADMIN).await;
    assert_eq!(g["consent"], "consented");
    let body = json!({ "pseudonym": child, "purpose": "billing" });
    let (st, _) = h
        .call(Method::DELETE, "/consents", Some(ALICE), Some(body.clone()))
        .await;
    assert_eq!(st, StatusCode::FORBIDDEN);
    let (st, c) = h
        .call(Method::DELETE, "/consents", Some(BOB), Some(body.clone()))
        .await;
    assert_eq!(st, StatusCode::OK, "{c}");
    let (_, g) = h.get(&gate, ADMIN).await;
    assert_eq!(g["consent"], "not_consented");
    assert_eq!(g["allowed"], false);
    let (st, e) = h.post("/consents", CHILD, body.clone()).await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(e["error"], "MinorRequiresGuardian");
    let (st, c) = h.post("/consents", BOB, body).await;
    assert_eq!(st, StatusCode::CREATED, "{c}");
    assert_eq!(c["grantor"]["guardian"], h.subjects.bob.to_string());
}

#[tokio::test]
async fn audit_query_filters_by_category_and_correlation() {
    let h = Harness::start().await;
    let (_, req) = h
        .post("/requests", ALICE, json!({ "kind": "access" }))
        .await;
    let id = req["id"].as_str().unwrap();
    approve_and_execute(&h, id).await;
    let (st, chain) = h
        .get(
            &format!("/audit?category=request&correlation_id={id}"),
            SUPPORT,
        )
        .await;
    assert_eq!(st, StatusCode::OK);
    let chain = chain.as_array().unwrap();
    assert!(chain.len() >= 3, "{chain:?}");
    let seqs: Vec<u64> = chain.iter().map(|e| e["seq"].as_u64().unwrap()).collect();
    assert!(seqs.windows(2).all(|w| w[0] < w[1]));
    for e in chain {
        assert_eq!(e["category"], "request");
        assert_eq!(e["correlation_id"], id);
    }
    let (_, all) = h.get("/audit", ADMIN).await;
    let text = all.to_string();
    assert!(!text.contains(ALICE_EMAIL) && !text.contains(BOB_EMAIL));
    let (st, body) = h.get("/audit?category=gossip", ADMIN).await;
    assert_eq!(st, StatusCode::BAD_REQUEST, "{body}");
}

#[tokio::test]
async fn overdue_requests_surface_after_the_sla() {
    let h = Harness::start().await;
    h.post("/requests", ALICE, json!({ "kind": "access" }))
        .await;
    let (_, overdue) = h.get("/requests/overdue", ADMIN).await;
    assert!(overdue.as_array().unwrap().is_empty());
    h.clock.advance(Duration::days(31));
    let (_, overdue) = h.get("/requests/overdue", ADMIN).await;
    assert_eq!(overdue.as_array().unwrap().len(), 1);
}

#[tokio::test]
async fn restart_replays_journal_to_the_same_state() {
    let h = Harness::start().await;
    let (_, a) = h
        .post("/requests", ALICE, json!({ "kind": "access" }))
        .await;
    approve_and_execute(&h, a["id"].as_str().unwrap()).await;
    let (_, b) = h.post("/requests", BOB, json!({ "kind": "erasure" })).await;
    h.post(
        &format!("/requests/{}/decision", b["id"].as_str().unwrap()),
        ADMIN,
        json!({ "verdict": "approve" }),
    )
    .await;
    let (_, before) = h.get("/requests", ADMIN).await;
    let (_, audit_before) = h.get("/audit", ADMIN).await;
    let h = h.restart().await;
    let (_, after) = h.get("/requests", ADMIN).await;
    assert_eq!(before, after);
    let (_, audit_after) = h.get("/audit", ADMIN).await;
    assert_eq!(audit_before, audit_after);
}

#[tokio::test]
async fn restriction_blocks_erasure_until_lifted() {
    let h = Harness::start().await;
    let alice = h.subjects.alice.to_string();
    let (st, r) = h
        .post(
            "/restrictions",
            ADMIN,
            json!({ "pseudonym": alice, "scope": { "type": "identity" }, "reason": "dispute" }),
        )
        .await;
    assert_eq!(st, StatusCode::CREATED, "{r}");
    let (_, req) = h
        .post("/requests", ALICE, json!({ "kind": "erasure" }))
        .await;
    let id = req["id"].as_str().unwrap();
    let (st, body) = approve_and_execute(&h, id).await;
    assert_eq!(st, StatusCode::CONFLICT);
    assert_eq!(body["error"], "BlockedByRestriction");
    let (st, _) = h
        .call(
            Method::DELETE,
            &format!("/restrictions/{}", r["id"].as_str().unwrap()),
            Some(ADMIN),
            None,
        )
        .await;
    assert_eq!(st, StatusCode::OK);
    let (_, view) = h.get(&format!("/requests/{id}"), ADMIN).await;
    assert_eq!(view["request"]["state"]["state"], "completed");
}

#[tokio::test]
async fn admin_reports_backup_and_staging() {
    let h = Harness::start().await;
    let (st, report) = h.get("/admin/minimization-report", ADMIN).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(report["clean"], true, "{report}");
    let (st, snap) = h
        .call(Method::POST, "/admin/backup", Some(ADMIN), None)
        .await;
    assert_eq!(st, StatusCode::CREATED);
    let snap = snap["snapshot"].as_str().unwrap().to_string();
    let (st, _) = h
        .post("/admin/restore", ADMIN, json!({ "snapshot": snap }))
        .await;
    assert_eq!(st, StatusCode::OK);
    let (st, _) = h
        .post(
            "/admin/restore",
            ADMIN,
            json!({ "snapshot": "snap-999999" }),
        )
        .await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    let (st, staging) = h
        .post("/admin/staging-snapshot", ADMIN, json!({ "seed": 4 }))
        .await;
    assert_eq!(st, StatusCode::CREATED);
    let text = staging.to_string();
    assert_eq!(staging["subjects"].as_array().unwrap().len(), 3);
    for email in [ALICE_EMAIL, BOB_EMAIL, CHILD_EMAIL] {
        assert!(!text.contains(email));
    }
    for p in [&h.subjects.alice, &h.subjects.bob, &h.subjects.child] {
        assert!(!text.contains(p.as_str()));
    }
    let (st, scan) = h
        .post("/admin/retention-scan", ADMIN, json!({ "max_age_days": 1 }))
        .await;
    assert_eq!(st, StatusCode::OK);
    assert!(
        scan.as_array().unwrap().is_empty(),
        "consents are an hour old"
    );
}

#[tokio::test]
async fn transfers_outside_policy_need_override() {
    let h = Harness::start().await;
    let alice = h.subjects.alice.to_string();
    let (st, d) = h
        .post(
            "/transfers",
            ADMIN,
            json!({ "pseudonym": alice, "target": "US" }),
        )
        .await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(d, json!("deny"));
    let (_, d) = h
        .post(
            "/transfers",
            ADMIN,
            json!({ "pseudonym": alice, "target": "US", "override_granted": true }),
        )
        .await;
    assert_eq!(d["allow"]["out_of_policy"], true);
    // Only the override leaves the region policy; the denial is ordinary processing.
    let (_, events) = h.get("/audit?category=extra_eu_transfer", ADMIN).await;
    assert_eq!(events.as_array().unwrap().len(), 1);
}

#[tokio::test]
async fn console_assets_are_served_without_traversal() {
    let dir = tempfile::tempdir().unwrap();
    let console = tempfile::tempdir().unwrap();
    std::fs::write(console.path().join("index.html"), "<title>console</title>").unwrap();
    std::fs::write(dir.path().join("secret.txt"), "x").unwrap();
    let config = Config {
        storage_dir: dir.path().join("data"),
        listen_address: "127.0.0.1:0".into(),
        console_dir: Some(console.path().to_path_buf()),
        ..Config::default()
    };
    let server = serve(config, TestClock::default().clock()).await.unwrap();
    let base = format!("http://{}", server.addr);
    let resp = reqwest::get(format!("{base}/console")).await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    assert!(resp.headers()["content-type"]
        .to_str()
        .unwrap()
        .starts_with("text/html"));
    let resp = reqwest::get(format!("{base}/console/..%2F..%2Fsecret.txt"))
        .await
        .unwrap();
    assert_eq!(resp.status(), StatusCode::NOT_FOUND);
    let resp = reqwest::get(format!("{base}/console/missing.js"))
        .await
        .unwrap();
    assert_eq!(resp.status(), StatusCode::NOT_FOUND);
}
