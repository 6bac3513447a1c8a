//! Append-only event journal: the persistent source of truth for every store
//! except the audit log, which keeps its own files.
//!
//! One JSON object per line. A line without its trailing newline is a torn
//! write from a crash and is cut off on open; any other unreadable line is
//! corruption.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bls::Behavior;
use crate::bus::{BroadcastCommand, ServiceRegistration, ServiceStatus};
use crate::consent::{Consent, RetentionOutcome};
use crate::error::{Error, Result};
use crate::export::PortableDocument;
use crate::request::{GdprRequest, Transition};
use crate::restriction::Restriction;
use crate::types::{
    CommandId, ConsentId, IdentifierMap, Pseudonym, PurposeId, RequestId, RestrictionId, ServiceId,
    SnapshotId, Timestamp,
};
use crate::vault::{IdentityRecord, StagedRectification};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    SubjectRegistered {
        record: IdentityRecord,
    },
    IdentityRectified {
        pseudonym: Pseudonym,
        changes: IdentifierMap,
        version: u64,
    },
    /// Erasure tombstone.
    IdentityErased {
        pseudonym: Pseudonym,
        at: Timestamp,
    },
    ConsentGranted {
        consent: Consent,
    },
    ConsentCancelled {
        id: ConsentId,
        at: Timestamp,
    },
    RetentionApplied {
        outcome: RetentionOutcome,
        at: Timestamp,
    },
    RestrictionPlaced {
        restriction: Restriction,
    },
    RestrictionLifted {
        id: RestrictionId,
        at: Timestamp,
    },
    RequestSubmitted {
        request: GdprRequest,
    },
    RequestTransition {
        transition: Transition,
    },
    RequestBlocked {
        id: RequestId,
        at: Timestamp,
    },
    RectificationStaged {
        request: RequestId,
        staged: StagedRectification,
    },
    StagedDropped {
        request: RequestId,
    },
    ExportStored {
        request: RequestId,
        document: PortableDocument,
    },
    ServiceRegistered {
        registration: ServiceRegistration,
        behavior: Behavior,
    },
    ServiceStatusChanged {
        service: ServiceId,
        status: ServiceStatus,
    },
    BehaviorChanged {
        service: ServiceId,
        behavior: Behavior,
    },
    ServiceRecordWritten {
        service: ServiceId,
        pseudonym: Pseudonym,
        purpose: PurposeId,
        fields: BTreeMap<String, String>,
        at: Timestamp,
    },
    CommandPublished {
        request: Option<RequestId>,
        command: BroadcastCommand,
        targets: Vec<ServiceId>,
    },
    /// One delivery attempt; replay re-delivers, which reproduces the ack.
    Delivered {
        command: CommandId,
        service: ServiceId,
        at: Timestamp,
    },
    Exhausted {
        command: CommandId,
        service: ServiceId,
    },
    BackupTaken {
        snapshot: SnapshotId,
        /// Journal position the snapshot reflects.
        position: u64,
        at: Timestamp,
    },
    Restored {
        snapshot: SnapshotId,
        at: Timestamp,
    },
}

impl Event {
    pub fn name(&self) -> &'static str {
        match self {
            Event::SubjectRegistered { .. } => "subject_registered",
            Event::IdentityRectified { .. } => "identity_rectified",
            Event::IdentityErased { .. } => "identity_erased",
            Event::ConsentGranted { .. } => "consent_granted",
            Event::ConsentCancelled { .. } => "consent_cancelled",
            Event::RetentionApplied { .. } => "retention_applied",
            Event::RestrictionPlaced { .. } => "restriction_placed",
            Event::RestrictionLifted { .. } => "restriction_lifted",
            Event::RequestSubmitted { .. } => "request_submitted",
            Event::RequestTransition { .. } => "request_transition",
            Event::RequestBlocked { .. } => "request_blocked",
            Event::RectificationStaged { .. } => "rectification_staged",
            Event::StagedDropped { .. } => "staged_dropped",
            Event::ExportStored { .. } => "export_stored",
            Event::ServiceRegistered { .. } => "service_registered",
            Event::ServiceStatusChanged { .. } => "service_status_changed",
            Event::BehaviorChanged { .. } => "behavior_changed",
            Event::ServiceRecordWritten { .. } => "service_record_written",
            Event::CommandPublished { .. } => "command_published",
            Event::Delivered { .. } => "delivered",
            Event::Exhausted { .. } => "exhausted",
            Event::BackupTaken { .. } => "backup_taken",
            Event::Restored { .. } => "restored",
        }
    }

    /// Blanks identifying values of `p`. Returns whether anything changed.
    fn redact(&mut self, p: &Pseudonym) -> bool {
        match self {
            Event::SubjectRegistered { record } if &record.pseudonym == p => {
                clear_values(&mut record.direct_identifiers)
            }
            Event::IdentityRectified {
                pseudonym, changes, ..
            } if pseudonym == p => clear_values(changes),
            Event::RectificationStaged { staged, .. } if &staged.pseudonym == p => {
                clear_values(&mut staged.changes)
            }
            Event::ExportStored { document, .. } if &document.pseudonym == p => {
                clear_values(&mut document.fields)
            }
            _ => false,
        }
    }
}

fn clear_values(map: &mut IdentifierMap) -> bool {
    let mut changed = false;
    for v in map.values_mut() {
        if !v.is_empty() {
            v.clear();
            changed = true;
        }
    }
    changed
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub seq: u64,
    #[serde(flatten)]
    pub event: Event,
}

#[derive(Debug, Default)]
pub struct Journal {
    path: Option<PathBuf>,
    entries: Vec<Entry>,
    /// Bytes cut from a torn tail when the journal was opened.
    truncated: u64,
}

impl Journal {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn open(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        match File::open(path) {
            Ok(mut f) => {
                f.read_to_end(&mut bytes)?;
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
            Err(e) => return Err(e.into()),
        }
        let complete = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
        let truncated = (bytes.len() - complete) as u64;
        let mut entries = Vec::new();
        for (i, line) in bytes[..complete].split(|&b| b == b'\n').enumerate() {
            if line.is_empty() {
                continue;
            }
            let entry: Entry = serde_json::from_slice(line).map_err(|e| Error::CorruptJournal {
                line: i + 1,
                reason: e.to_string(),
            })?;
            let expected = entries.len() as u64 + 1;
            if entry.seq != expected {
                return Err(Error::CorruptJournal {
                    line: i + 1,
                    reason: format!("expected seq {expected}, found {}", entry.seq),
                });
            }
            entries.push(entry);
        }
        if truncated > 0 {
            let f = OpenOptions::new().write(true).open(path)?;
            f.set_len(complete as u64)?;
            f.sync_all()?;
        }
        Ok(Self {
            path: Some(path.to_path_buf()),
            entries,
            truncated,
        })
    }

    pub fn append(&mut self, event: Event) -> Result<&Entry> {
        let entry = Entry {
            seq: self.entries.len() as u64 + 1,
            event,
        };
        if let Some(path) = &self.path {
            let mut line = serde_json::to_vec(&entry)?;
            line.push(b'\n');
            let mut f = OpenOptions::new().create(true).append(true).open(path)?;
            f.write_all(&line)?;
        }
        self.entries.push(entry);
        Ok(self.entries.last().expect("just pushed"))
    }

    /// Blanks `p`'s identifying values throughout and rewrites the file.
    pub fn redact(&mut self, p: &Pseudonym) -> Result<()> {
        let mut changed = false;
        for e in &mut self.entries {
            changed |= e.event.redact(p);
        }
        if changed {
            self.rewrite()?;
        }
        Ok(())
    }

    fn rewrite(&self) -> Result<()> {
        let Some(path) = &self.path else {
            return Ok(());
        };
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            for e in &self.entries {
                serde_json::to_writer(&mut w, e)?;
                w.write_all(b"\n")?;
            }
            w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn last_seq(&self) -> u64 {
        self.entries.len() as u64
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn truncated_bytes(&self) -> u64 {
        self.truncated
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }
}
