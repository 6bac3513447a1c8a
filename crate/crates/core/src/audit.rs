//! Append-only audit log.
//!
//! Events fall into exactly four traceability categories. Every draft passes
//! a hygiene gate before it gets a sequence number: drafts carrying anything
//! that looks like a direct identifier are rejected and replaced by a
//! redacted meta-event. Each event is chained to its predecessor with a
//! SHA-256 checksum, and persisted as one JSON line in `audit-YYYY-MM-DD.log`.

use std::collections::BTreeSet;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::hygiene::{Detector, Finding, IdentifierIndex};
use crate::types::{Pseudonym, Role, Timestamp};

pub const GENESIS_CHECKSUM: &str =
    "0000000000000000000000000000000000000000000000000000000000000000";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Processing,
    Request,
    ThirdPartyDisclosure,
    ExtraEuTransfer,
}

impl Category {
    pub const ALL: [Category; 4] = [
        Category::Processing,
        Category::Request,
        Category::ThirdPartyDisclosure,
        Category::ExtraEuTransfer,
    ];
}

/// Known actions and their categories.
const ACTIONS: &[(&str, Category)] = &[
    ("cpdm.register", Category::Processing),
    ("cpdm.resolve", Category::Processing),
    ("cpdm.rectify", Category::Processing),
    ("cpdm.erase", Category::Processing),
    ("cpdm.export", Category::Processing),
    ("consent.grant", Category::Processing),
    ("consent.cancel", Category::Processing),
    ("consent.expire", Category::Processing),
    ("consent.renewal-requested", Category::Processing),
    ("bls.process", Category::Processing),
    ("bls.process-refused", Category::Processing),
    ("bls.apply", Category::Processing),
    ("service.register", Category::Processing),
    ("service.status", Category::Processing),
    ("transfer.allowed", Category::Processing),
    ("transfer-denied", Category::Processing),
    ("backup.create", Category::Processing),
    ("backup.restore", Category::Processing),
    ("staging.generate", Category::Processing),
    ("retention.scan", Category::Processing),
    ("audit.hygiene-violation", Category::Processing),
    ("request.submit", Category::Request),
    ("request.decide", Category::Request),
    ("request.execute", Category::Request),
    ("request.blocked", Category::Request),
    ("request.broadcast", Category::Request),
    ("request.ack", Category::Request),
    ("request.complete", Category::Request),
    ("request.fail", Category::Request),
    ("request.recover", Category::Request),
    ("restriction.place", Category::Request),
    ("restriction.lift", Category::Request),
    ("transfer.allowed-override", Category::ExtraEuTransfer),
];

pub const DEFAULT_DISCLOSURE_ACTION: &str = "disclosure.third-party";

#[derive(Debug, Clone)]
pub struct Classifier {
    disclosure_actions: BTreeSet<String>,
}

impl Default for Classifier {
    fn default() -> Self {
        Self::new([DEFAULT_DISCLOSURE_ACTION])
    }
}

impl Classifier {
    pub fn new<I: IntoIterator<Item = S>, S: Into<String>>(disclosure_actions: I) -> Self {
        Self {
            disclosure_actions: disclosure_actions.into_iter().map(Into::into).collect(),
        }
    }

    pub fn classify(&self, action: &str) -> Result<Category> {
        if self.disclosure_actions.contains(action) {
            return Ok(Category::ThirdPartyDisclosure);
        }
        ACTIONS
            .iter()
            .find(|(a, _)| *a == action)
            .map(|(_, c)| *c)
            .ok_or_else(|| Error::UnknownAction(action.to_string()))
    }
}

/// Caller-supplied part of an event. The category is derived from `action`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuditDraft {
    pub pseudonym: Option<Pseudonym>,
    pub service: String,
    pub action: String,
    pub correlation_id: Option<String>,
    pub at: Timestamp,
    pub detail: String,
    pub automated: bool,
}

impl AuditDraft {
    pub fn new(service: &str, action: &str, at: Timestamp) -> Self {
        Self {
            pseudonym: None,
            service: service.to_string(),
            action: action.to_string(),
            correlation_id: None,
            at,
            detail: String::new(),
            automated: false,
        }
    }

    pub fn subject(mut self, p: &Pseudonym) -> Self {
        self.pseudonym = Some(p.clone());
        self
    }

    pub fn correlate(mut self, id: impl ToString) -> Self {
        self.correlation_id = Some(id.to_string());
        self
    }

    pub fn detail(mut self, detail: impl Into<String>) -> Self {
        self.detail = detail.into();
        self
    }

    pub fn automated(mut self, automated: bool) -> Self {
        self.automated = automated;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditEvent {
    pub seq: u64,
    pub category: Category,
    pub pseudonym: Option<Pseudonym>,
    pub service: String,
    pub action: String,
    pub correlation_id: Option<String>,
    pub at: Timestamp,
    pub detail: String,
    pub automated: bool,
    pub checksum: String,
}

impl AuditEvent {
    fn digest(&self, prev: &str) -> String {
        let mut unsealed = self.clone();
        unsealed.checksum = String::new();
        let body = serde_json::to_string(&unsealed).expect("event serializes");
        let mut h = Sha256::new();
        h.update(prev.as_bytes());
        h.update(body.as_bytes());
        hex::encode(h.finalize())
    }

    pub fn file_name(&self) -> String {
        format!("audit-{}.log", self.at.format("%Y-%m-%d"))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditFilter {
    #[serde(default)]
    pub category: Option<Category>,
    #[serde(default)]
    pub pseudonym: Option<Pseudonym>,
    #[serde(default)]
    pub correlation_id: Option<String>,
    /// Inclusive lower bound.
    #[serde(default)]
    pub from: Option<Timestamp>,
    /// Exclusive upper bound.
    #[serde(default)]
    pub to: Option<Timestamp>,
}

impl AuditFilter {
    pub fn matches(&self, e: &AuditEvent) -> bool {
        self.category.is_none_or(|c| c == e.category)
            && self
                .pseudonym
                .as_ref()
                .is_none_or(|p| e.pseudonym.as_ref() == Some(p))
            && self
                .correlation_id
                .as_ref()
                .is_none_or(|c| e.correlation_id.as_ref() == Some(c))
            && self.from.is_none_or(|f| e.at >= f)
            && self.to.is_none_or(|t| e.at < t)
    }
}

fn is_token(s: &str) -> bool {
    !s.is_empty()
        && s.len() <= 128
        && s.bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'.' | b'_' | b'-' | b':'))
}

pub struct AuditLog {
    events: Vec<AuditEvent>,
    detector: Detector,
    classifier: Classifier,
    dir: Option<PathBuf>,
}

impl std::fmt::Debug for AuditLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AuditLog")
            .field("events", &self.events.len())
            .field("dir", &self.dir)
            .finish()
    }
}

impl AuditLog {
    pub fn in_memory(detector: Detector, classifier: Classifier) -> Self {
        Self {
            events: Vec::new(),
            detector,
            classifier,
            dir: None,
        }
    }

    /// Opens (or creates) the daily files under `dir`. A torn trailing line
    /// left by a crash is cut off; anything else that fails to verify is an
    /// error.
    pub fn open(dir: &Path, detector: Detector, classifier: Classifier) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let mut files: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("audit-") && n.ends_with(".log"))
            })
            .collect();
        files.sort();
        let mut events = Vec::new();
        for path in &files {
            events.extend(read_events(path)?);
        }
        events.sort_by_key(|e| e.seq);
        let log = Self {
            events,
            detector,
            classifier,
            dir: Some(dir.to_path_buf()),
        };
        log.verify()?;
        Ok(log)
    }

    pub fn classifier(&self) -> &Classifier {
        &self.classifier
    }

    pub fn detector(&self) -> &Detector {
        &self.detector
    }

    /// Checks gap-free sequence numbers starting at 1 and the checksum chain.
    pub fn verify(&self) -> Result<()> {
        verify_chain(&self.events)
    }

    pub fn append(&mut self, draft: AuditDraft, live: &IdentifierIndex) -> Result<AuditEvent> {
        let category = self.classifier.classify(&draft.action)?;
        if let Some(reason) = self.violation(&draft, live) {
            let meta = AuditDraft {
                pseudonym: draft.pseudonym.clone(),
                service: "audit".into(),
                action: "audit.hygiene-violation".into(),
                correlation_id: None,
                at: draft.at,
                detail: format!("event rejected: {reason}"),
                automated: true,
            };
            self.seal(Category::Processing, meta)?;
            return Err(Error::HygieneViolation(reason));
        }
        self.seal(category, draft)
    }

    fn violation(&self, d: &AuditDraft, live: &IdentifierIndex) -> Option<String> {
        if !is_token(&d.service) {
            return Some("service is not a plain token".into());
        }
        if !is_token(&d.action) {
            return Some("action is not a plain token".into());
        }
        if d.correlation_id.as_deref().is_some_and(|c| !is_token(c)) {
            return Some("correlation id is not a plain token".into());
        }
        let fields: [(&str, &str); 4] = [
            ("service", &d.service),
            ("action", &d.action),
            ("correlation_id", d.correlation_id.as_deref().unwrap_or("")),
            ("detail", &d.detail),
        ];
        fields.iter().find_map(|(name, text)| {
            self.detector
                .scan(text, live)
                .map(|f: Finding| format!("{name} contains a {f}"))
        })
    }

    fn seal(&mut self, category: Category, d: AuditDraft) -> Result<AuditEvent> {
        let prev = self
            .events
            .last()
            .map(|e| e.checksum.clone())
            .unwrap_or_else(|| GENESIS_CHECKSUM.to_string());
        let mut event = AuditEvent {
            seq: self.events.len() as u64 + 1,
            category,
            pseudonym: d.pseudonym,
            service: d.service,
            action: d.action,
            correlation_id: d.correlation_id,
            at: d.at,
            detail: d.detail,
            automated: d.automated,
            checksum: String::new(),
        };
        event.checksum = event.digest(&prev);
        if let Some(dir) = &self.dir {
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(dir.join(event.file_name()))?;
            let mut line = serde_json::to_string(&event)?;
            line.push('\n');
            f.write_all(line.as_bytes())?;
        }
        self.events.push(event.clone());
        Ok(event)
    }

    pub fn query(&self, filter: &AuditFilter, role: Role) -> Result<Vec<AuditEvent>> {
        if !matches!(role, Role::Admin | Role::Support) {
            return Err(Error::Unauthorized(role.to_string()));
        }
        Ok(self
            .events
            .iter()
            .filter(|e| filter.matches(e))
            .cloned()
            .collect())
    }

    pub fn events(&self) -> &[AuditEvent] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn last_seq(&self) -> u64 {
        self.events.last().map_or(0, |e| e.seq)
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }
}

pub fn verify_chain(events: &[AuditEvent]) -> Result<()> {
    let mut prev = GENESIS_CHECKSUM.to_string();
    for (i, e) in events.iter().enumerate() {
        let expected_seq = i as u64 + 1;
        if e.seq != expected_seq {
            return Err(Error::CorruptJournal {
                line: i + 1,
                reason: format!(
                    "audit sequence gap: expected {expected_seq}, found {}",
                    e.seq
                ),
            });
        }
        if e.digest(&prev) != e.checksum {
            return Err(Error::CorruptJournal {
                line: i + 1,
                reason: format!("audit checksum mismatch at seq {}", e.seq),
            });
        }
        prev = e.checksum.clone();
    }
    Ok(())
}

/// Reads one daily file, cutting off a torn final line.
fn read_events(path: &Path) -> Result<Vec<AuditEvent>> {
    let bytes = fs::read(path)?;
    let complete = match bytes.iter().rposition(|b| *b == b'\n') {
        Some(i) => i + 1,
        None => 0,
    };
    if complete < bytes.len() {
        let f = OpenOptions::new().write(true).open(path)?;
        f.set_len(complete as u64)?;
    }
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let event: AuditEvent = serde_json::from_str(&line).map_err(|e| Error::CorruptJournal {
            line: i + 1,
            reason: format!("{}: {e}", path.display()),
        })?;
        out.push(event);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::{TimeZone, Utc};

    fn t(h: u32) -> Timestamp {
        Utc.with_ymd_and_hms(2024, 3, 1, h, 0, 0).unwrap()
    }

    fn log() -> AuditLog {
        AuditLog::in_memory(Detector::default(), Classifier::default())
    }

    fn p() -> Pseudonym {
        Pseudonym::parse("Ab3dEFghIJklMNopQRstUv").unwrap()
    }

    #[test]
    fn classification_table() {
        let c = Classifier::default();
        assert_eq!(c.classify("cpdm.rectify").unwrap(), Category::Processing);
        assert_eq!(c.classify("request.decide").unwrap(), Category::Request);
        assert_eq!(
            c.classify("transfer.allowed-override").unwrap(),
            Category::ExtraEuTransfer
        );
        assert_eq!(
            c.classify("disclosure.third-party").unwrap(),
            Category::ThirdPartyDisclosure
        );
        assert!(matches!(
            c.classify("cpdm.teleport"),
            Err(Error::UnknownAction(_))
        ));
    }

    #[test]
    fn appends_clean_draft() {
        let mut l = log();
        let e = l
            .append(
                AuditDraft::new("cpdm", "cpdm.erase", t(1))
                    .subject(&p())
                    .detail(format!("erase p={}", p())),
                &IdentifierIndex::default(),
            )
            .unwrap();
        assert_eq!(e.seq, 1);
        assert_eq!(e.category, Category::Processing);
        l.verify().unwrap();
    }

    #[test]
    fn registered_identifier_is_rejected_and_meta_logged() {
        let mut l = log();
        let mut live = IdentifierIndex::default();
        live.insert("a@x.eu");
        let err = l
            .append(
                AuditDraft::new("cpdm", "cpdm.rectify", t(1)).detail("changed to a@x.eu"),
                &live,
            )
            .unwrap_err();
        assert!(matches!(err, Error::HygieneViolation(_)));
        assert_eq!(l.len(), 1);
        let meta = &l.events()[0];
        assert_eq!(meta.action, "audit.hygiene-violation");
        assert!(!meta.detail.contains("a@x.eu"));
    }

    #[test]
    fn free_text_service_names_are_rejected() {
        let mut l = log();
        let err = l
            .append(
                AuditDraft::new("Aino Virtanen", "cpdm.export", t(1)),
                &IdentifierIndex::default(),
            )
            .unwrap_err();
        assert!(matches!(err, Error::HygieneViolation(_)));
    }

    #[test]
    fn query_filters_and_role_gate() {
        let mut l = log();
        let live = IdentifierIndex::default();
        l.append(
            AuditDraft::new("requests", "request.submit", t(1)).correlate("req_1"),
            &live,
        )
        .unwrap();
        l.append(
            AuditDraft::new("requests", "request.decide", t(2)).correlate("req_1"),
            &live,
        )
        .unwrap();
        l.append(
            AuditDraft::new("requests", "request.submit", t(3)).correlate("req_2"),
            &live,
        )
        .unwrap();
        l.append(AuditDraft::new("cpdm", "cpdm.export", t(4)), &live)
            .unwrap();

        let by_corr = AuditFilter {
            correlation_id: Some("req_1".into()),
            ..Default::default()
        };
        assert_eq!(l.query(&by_corr, Role::Admin).unwrap().len(), 2);
        let req = AuditFilter {
            category: Some(Category::Request),
            ..Default::default()
        };
        assert_eq!(l.query(&req, Role::Support).unwrap().len(), 3);
        let window = AuditFilter {
            from: Some(t(2)),
            to: Some(t(4)),
            ..Default::default()
        };
        let seqs: Vec<_> = l
            .query(&window, Role::Admin)
            .unwrap()
            .iter()
            .map(|e| e.seq)
            .collect();
        assert_eq!(seqs, [2, 3]);
        assert!(matches!(
            l.query(&req, Role::User),
            Err(Error::Unauthorized(_))
        ));
        assert!(matches!(
            l.query(&req, Role::Developer),
            Err(Error::Unauthorized(_))
        ));
    }

    #[test]
    fn empty_log_query_is_empty() {
        let l = log();
        assert!(l
            .query(&AuditFilter::default(), Role::Admin)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn tampering_breaks_the_chain() {
        let mut l = log();
        let live = IdentifierIndex::default();
        for h in 0..3 {
            l.append(AuditDraft::new("cpdm", "cpdm.export", t(h)), &live)
                .unwrap();
        }
        let mut events = l.events().to_vec();
        events[1].detail = "edited".into();
        assert!(verify_chain(&events).is_err());
        let mut events = l.events().to_vec();
        events.remove(1);
        assert!(verify_chain(&events).is_err());
    }

    #[test]
    fn files_roundtrip_and_torn_tail_is_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let live = IdentifierIndex::default();
        {
            let mut l =
                AuditLog::open(dir.path(), Detector::default(), Classifier::default()).unwrap();
            l.append(AuditDraft::new("cpdm", "cpdm.export", t(1)), &live)
                .unwrap();
            l.append(AuditDraft::new("cpdm", "cpdm.export", t(2)), &live)
                .unwrap();
        }
        let file = dir.path().join("audit-2024-03-01.log");
        let mut bytes = fs::read(&file).unwrap();
        let cut = bytes.len() - 10;
        bytes.truncate(cut);
        fs::write(&file, &bytes).unwrap();

        let mut l = AuditLog::open(dir.path(), Detector::default(), Classifier::default()).unwrap();
        assert_eq!(l.len(), 1);
        let e = l
            .append(AuditDraft::new("cpdm", "cpdm.export", t(3)), &live)
            .unwrap();
        assert_eq!(e.seq, 2);
        drop(l);
        let l = AuditLog::open(dir.path(), Detector::default(), Classifier::default()).unwrap();
        assert_eq!(l.len(), 2);
    }
}
