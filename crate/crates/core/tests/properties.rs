mod common;

use std::collections::BTreeMap;

use chrono::Duration;
use common::*;
use pdp_core::bls::Behavior;
use pdp_core::journal::Event;
use pdp_core::request::{RequestPayload, RequestState, Verdict};
use pdp_core::sim::{random_state, SimParams};
use pdp_core::{Actor, Error, IdentifierMap};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// The legal edges, written out independently of the implementation.
const LEGAL: [(&str, &str); 6] = [
    ("pending", "approved"),
    ("pending", "declined"),
    ("approved", "in_progress"),
    ("in_progress", "completed"),
    ("in_progress", "failed"),
    ("failed", "in_progress"),
];

fn small() -> SimParams {
    SimParams {
        max_subjects: 6,
        max_services: 3,
        restrictions: true,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn gate_check_equals_history_fold(seed in any::<u64>(), n in 1usize..120) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ops = random_gate_ops(&mut rng, n, 3);
        let h = run_gate_history(&ops);
        let (_, mismatches) = check_gate_points(&h, &mut rng, 200, 3);
        prop_assert_eq!(mismatches, 0);
    }

    #[test]
    fn journaled_transitions_are_legal(seed in any::<u64>(), steps in 1usize..150) {
        let mut s = random_state(seed, small()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let admin = Actor::admin("admin-1");
        let mut ids = Vec::new();
        for _ in 0..steps {
            let now = s.tick();
            match rng.gen_range(0..6) {
                0 => {
                    let live: Vec<_> = s.subjects.iter().filter(|p| s.plane.vault().contains(p)).cloned().collect();
                    if let Some(p) = live.get(rng.gen_range(0..live.len().max(1))) {
                        let payload = if rng.gen_bool(0.5) { RequestPayload::Access } else { RequestPayload::Erasure };
                        ids.push(s.plane.submit_request(p, payload, now).unwrap().id);
                    }
                }
                1 | 2 if !ids.is_empty() => {
                    let id = ids[rng.gen_range(0..ids.len())].clone();
                    let before = s.plane.journal().last_seq();
                    let verdict = if rng.gen_bool(0.8) { Verdict::Approve } else { Verdict::Decline("no".into()) };
                    if let Err(Error::InvalidTransition { .. }) = s.plane.decide(&id, &admin, verdict, now) {
                        prop_assert_eq!(s.plane.journal().last_seq(), before);
                    }
                }
                3 | 4 if !ids.is_empty() => {
                    let id = ids[rng.gen_range(0..ids.len())].clone();
                    let _ = s.plane.execute(&id, now);
                }
                _ => {
                    let svc = s.services[rng.gen_range(0..s.services.len())].clone();
                    let b = if rng.gen_bool(0.5) { Behavior::DropMessages } else { Behavior::Healthy };
                    s.plane.set_behavior(&svc, b, now).unwrap();
                }
            }
        }
        for e in s.plane.journal().entries() {
            if let Event::RequestTransition { transition: t } = &e.event {
                prop_assert!(LEGAL.contains(&(t.from.name(), t.to.name())), "{:?}", t);
            }
        }
        for r in s.plane.requests().iter() {
            prop_assert!(r.state != RequestState::InProgress);
        }
    }

    #[test]
    fn redelivery_leaves_services_unchanged(seed in any::<u64>(), n in 1usize..6) {
        let mut s = random_state(seed, small()).unwrap();
        let p = s.subjects[0].clone();
        let now = s.tick();
        let payload = RequestPayload::Rectification {
            changes: IdentifierMap::new(),
            indirect: BTreeMap::from([("item".to_string(), "item-x".to_string())]),
        };
        let id = s.plane.submit_request(&p, payload, now).unwrap().id;
        s.plane.decide(&id, &Actor::admin("admin-1"), Verdict::Approve, now).unwrap();
        // Rectification with indirect changes is blocked by non-identity restrictions.
        prop_assume!(s.plane.execute(&id, now).is_ok());
        let once = s.plane.services().clone();
        let cmd = s.plane.requests().get(&id).unwrap().commands[0].clone();
        for _ in 1..n {
            for svc in s.services.clone() {
                s.plane.redeliver(&cmd, &svc, now + Duration::seconds(1)).unwrap();
            }
        }
        prop_assert_eq!(s.plane.services(), &once);
    }

    #[test]
    fn rectification_versions_increase_and_replay_over_backup(seed in any::<u64>(), k in 1usize..6) {
        let mut s = random_state(seed, SimParams { restrictions: false, ..small() }).unwrap();
        let p = s.subjects[0].clone();
        let now = s.tick();
        let snap = s.plane.backup(now).unwrap();
        let mut last = s.plane.vault().get(&p).unwrap().version;
        for i in 0..k {
            let now = s.tick();
            let changes: IdentifierMap = [("email".to_string(), format!("v{i}.{seed}@new.test"))].into();
            let v = s.plane.rectify_identity(&p, changes, now).unwrap();
            prop_assert!(v > last);
            last = v;
        }
        let (vault, _) = s.plane.preview_restore(&snap).unwrap();
        prop_assert_eq!(vault.get(&p).unwrap(), s.plane.vault().get(&p).unwrap());
    }

    #[test]
    fn audit_never_holds_identifiers(seed in any::<u64>()) {
        let s = random_state(seed, small()).unwrap();
        let audit = serde_json::to_string(s.plane.audit_log().events()).unwrap();
        for ids in s.identifiers.values() {
            for v in ids.values() {
                prop_assert!(!audit.contains(v.as_str()));
            }
        }
        s.plane.audit_log().verify().unwrap();
    }
}

#[test]
fn backup_event_survives_reopen() {
    let dir = tempfile::tempdir().unwrap();
    let open = || {
        pdp_core::plane::DataPlane::open(
            pdp_core::plane::PlaneConfig::default(),
            Some(dir.path()),
            pdp_core::ids::IdGenerator::seeded(1),
            base(),
        )
        .unwrap()
    };
    let snap = open().backup(base()).unwrap();
    assert!(open().snapshots().contains_key(&snap));
}
