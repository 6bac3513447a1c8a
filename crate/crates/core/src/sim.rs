//! Seeded random workloads: a populated plane with services, subjects,
//! consents, service rows and restrictions.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::{Duration, TimeZone, Utc};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bls::Behavior;
use crate::bus::ServiceRegistration;
use crate::consent::{Grantor, SubjectProfile};
use crate::error::Result;
use crate::ids::IdGenerator;
use crate::plane::{ConsentGrant, DataPlane, PlaneConfig, Registration};
use crate::restriction::Scope;
use crate::types::{IdentifierMap, Pseudonym, PurposeId, RegionCode, ServiceId, Timestamp};

pub const PURPOSES: [&str; 4] = ["billing", "newsletter", "analytics", "ads"];
const SYLLABLES: [&str; 12] = [
    "ka", "lo", "mi", "ne", "ru", "sa", "te", "vi", "jo", "ha", "pe", "du",
];

#[derive(Debug, Clone, Copy)]
pub struct SimParams {
    pub max_subjects: usize,
    pub max_services: usize,
    pub restrictions: bool,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            max_subjects: 20,
            max_services: 5,
            restrictions: true,
        }
    }
}

/// A populated plane plus what was put in it.
pub struct SimState {
    pub plane: DataPlane,
    pub rng: ChaCha8Rng,
    pub now: Timestamp,
    pub subjects: Vec<Pseudonym>,
    pub identifiers: BTreeMap<Pseudonym, IdentifierMap>,
    pub services: Vec<ServiceId>,
}

impl SimState {
    /// Advances the clock by up to an hour and returns the new instant.
    pub fn tick(&mut self) -> Timestamp {
        self.now += Duration::seconds(self.rng.gen_range(1..3600));
        self.now
    }
}

pub fn sim_epoch() -> Timestamp {
    Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap()
}

fn word(rng: &mut impl Rng, syllables: usize) -> String {
    let mut w: String = (0..syllables)
        .map(|_| *SYLLABLES.choose(rng).unwrap())
        .collect();
    w[..1].make_ascii_uppercase();
    w
}

/// Distinct identifying values for subject number `i`.
pub fn random_identifiers(rng: &mut impl Rng, i: usize) -> IdentifierMap {
    let mut ids = IdentifierMap::new();
    ids.insert(
        "email".into(),
        format!(
            "{}.{i}.{:04x}@mail.test",
            word(rng, 2).to_lowercase(),
            rng.gen::<u16>()
        ),
    );
    ids.insert(
        "name".into(),
        format!("{} {}{i}", word(rng, 2), word(rng, 3)),
    );
    ids.insert(
        "phone".into(),
        format!("+3584{:02}{:07}", i, rng.gen_range(0..10_000_000)),
    );
    ids
}

pub fn random_state(seed: u64, params: SimParams) -> Result<SimState> {
    random_state_in(seed, params, None)
}

/// Like [`random_state`], journaling into `storage` when given.
pub fn random_state_in(seed: u64, params: SimParams, storage: Option<&Path>) -> Result<SimState> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plane = DataPlane::open(
        PlaneConfig::default(),
        storage,
        IdGenerator::seeded(seed),
        sim_epoch(),
    )?;
    let mut s = SimState {
        plane,
        rng: ChaCha8Rng::seed_from_u64(seed.wrapping_add(1)),
        now: sim_epoch(),
        subjects: Vec::new(),
        identifiers: BTreeMap::new(),
        services: Vec::new(),
    };
    let fi = RegionCode::parse("FI")?;

    let n_services = rng.gen_range(1..=params.max_services.max(1));
    for k in 0..n_services {
        let mut cats: Vec<PurposeId> = PURPOSES
            .iter()
            .filter(|_| rng.gen_bool(0.5))
            .map(|p| PurposeId::from(*p))
            .collect();
        if cats.is_empty() {
            cats.push(PURPOSES[k % PURPOSES.len()].into());
        }
        let now = s.tick();
        let reg = ServiceRegistration::new(format!("svc-{k}"), cats, fi.clone());
        s.services.push(reg.service_id.clone());
        s.plane.spawn_service(reg, Behavior::Healthy, now)?;
    }

    let n_subjects = rng.gen_range(1..=params.max_subjects.max(1));
    for i in 0..n_subjects {
        let identifiers = random_identifiers(&mut rng, i);
        let purpose = PURPOSES.choose(&mut rng).unwrap();
        let now = s.tick();
        let p = s.plane.register_subject(
            Registration {
                identifiers: identifiers.clone(),
                region: fi.clone(),
                purpose: (*purpose).into(),
                consent: Some(ConsentGrant {
                    grantor: Grantor::Subject,
                    signature: None,
                }),
                profile: SubjectProfile::default(),
            },
            now,
        )?;
        s.identifiers.insert(p.clone(), identifiers);
        s.subjects.push(p);
    }

    for p in s.subjects.clone() {
        for purpose in PURPOSES {
            let purpose = PurposeId::from(purpose);
            if rng.gen_bool(0.4) {
                let now = s.tick();
                let _ = s
                    .plane
                    .grant_consent(&p, &purpose, Grantor::Subject, None, now);
            }
            for svc in s.services.clone() {
                if rng.gen_bool(0.5) {
                    let row = BTreeMap::from([
                        (
                            "item".to_string(),
                            format!("item-{}", rng.gen_range(0..1000)),
                        ),
                        ("score".to_string(), rng.gen_range(0..100).to_string()),
                    ]);
                    let now = s.tick();
                    // Refused when consent or category is missing.
                    let _ = s.plane.process(&svc, &p, &purpose, row, now);
                }
            }
            if rng.gen_bool(0.15) {
                let now = s.tick();
                let _ = s.plane.cancel_consent(&p, &purpose, &Grantor::Subject, now);
            }
        }
        if params.restrictions && rng.gen_bool(0.2) {
            let scope = match rng.gen_range(0..3) {
                0 => Scope::Identity,
                1 => Scope::Purpose((*PURPOSES.choose(&mut rng).unwrap()).into()),
                _ => Scope::All,
            };
            let now = s.tick();
            if let Ok(r) = s.plane.place_restriction(&p, scope, "contested", now) {
                if rng.gen_bool(0.5) {
                    let now = s.tick();
                    s.plane.lift_restriction(&r.id, now)?;
                }
            }
        }
    }
    Ok(s)
}
