//! Data map scanner: finds `@PersonalData` and `@PersonalDataHandler`
//! markers in a source tree and diffs the resulting maps.
//!
//! A marker is the literal token, optionally followed directly by a
//! parenthesized, comma-separated list of `key=value` pairs. It may appear
//! anywhere in a line, so it works inside any comment syntax.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use globset::{Glob, GlobSet, GlobSetBuilder};
use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

/// Bytes inspected for a null byte before a file is treated as binary.
pub const SNIFF_LEN: usize = 8 * 1024;

#[derive(Debug, thiserror::Error)]
pub enum ScanError {
    #[error("root `{0}` does not exist or is not a directory")]
    RootNotFound(PathBuf),
    #[error("invalid glob `{glob}`: {reason}")]
    InvalidGlob { glob: String, reason: String },
    #[error("cannot read map `{path}`: {reason}")]
    InvalidMap { path: PathBuf, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Marker {
    PersonalData,
    PersonalDataHandler,
}

impl Marker {
    pub fn token(self) -> &'static str {
        match self {
            Marker::PersonalData => "@PersonalData",
            Marker::PersonalDataHandler => "@PersonalDataHandler",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DataMapEntry {
    /// Relative to the scan root, `/`-separated.
    pub path: String,
    /// 1-based.
    pub line: usize,
    pub marker: Marker,
    pub attributes: BTreeMap<String, String>,
    pub context: String,
}

pub type DataMap = Vec<DataMapEntry>;

/// A file the scan could not read. The scan continues past it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Unreadable {
    pub path: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ScanReport {
    pub map: DataMap,
    pub unreadable: Vec<Unreadable>,
    pub binary_skipped: usize,
    pub files_scanned: usize,
}

#[derive(Debug, Clone, Default)]
pub struct ScanOptions {
    pub include: Vec<String>,
    pub exclude: Vec<String>,
}

fn marker_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"@PersonalData(Handler)?\b(?:\(([^)]*)\))?").expect("static regex")
    })
}

/// Markers on one line, first occurrence of each marker kind only.
pub fn parse_line(line: &str) -> Vec<(Marker, BTreeMap<String, String>)> {
    let mut out: Vec<(Marker, BTreeMap<String, String>)> = Vec::new();
    for cap in marker_regex().captures_iter(line) {
        let marker = if cap.get(1).is_some() {
            Marker::PersonalDataHandler
        } else {
            Marker::PersonalData
        };
        if out.iter().any(|(m, _)| *m == marker) {
            continue;
        }
        let attributes = cap
            .get(2)
            .map(|m| parse_attributes(m.as_str()))
            .unwrap_or_default();
        out.push((marker, attributes));
    }
    out
}

/// `key=value` pairs separated by commas. A pair without `=` is kept as a
/// key with an empty value.
pub fn parse_attributes(s: &str) -> BTreeMap<String, String> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|pair| match pair.split_once('=') {
            Some((k, v)) => (k.trim().to_string(), v.trim().to_string()),
            None => (pair.to_string(), String::new()),
        })
        .collect()
}

fn globset(globs: &[String]) -> Result<Option<GlobSet>, ScanError> {
    if globs.is_empty() {
        return Ok(None);
    }
    let mut b = GlobSetBuilder::new();
    for g in globs {
        b.add(Glob::new(g).map_err(|e| ScanError::InvalidGlob {
            glob: g.clone(),
            reason: e.to_string(),
        })?);
    }
    b.build().map(Some).map_err(|e| ScanError::InvalidGlob {
        glob: globs.join(","),
        reason: e.to_string(),
    })
}

enum FileScan {
    Entries(Vec<DataMapEntry>),
    Binary,
    Unreadable(String),
}

fn scan_file(path: &Path, rel: &str) -> FileScan {
    let mut bytes = Vec::new();
    if let Err(e) = fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)) {
        return FileScan::Unreadable(e.to_string());
    }
    if bytes[..bytes.len().min(SNIFF_LEN)].contains(&0) {
        return FileScan::Binary;
    }
    let text = String::from_utf8_lossy(&bytes);
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if !line.contains("@PersonalData") {
            continue;
        }
        for (marker, attributes) in parse_line(line) {
            entries.push(DataMapEntry {
                path: rel.to_string(),
                line: i + 1,
                marker,
                attributes,
                context: line.trim().to_string(),
            });
        }
    }
    FileScan::Entries(entries)
}

fn relative(root: &Path, path: &Path) -> String {
    let rel = path.strip_prefix(root).unwrap_or(path);
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

/// Scans every regular file under `root` that matches an include glob (all
/// files when none are given) and no exclude glob. Globs match the path
/// relative to `root`.
pub fn scan(root: &Path, opts: &ScanOptions) -> Result<ScanReport, ScanError> {
    if !root.is_dir() {
        return Err(ScanError::RootNotFound(root.to_path_buf()));
    }
    let include = globset(&opts.include)?;
    let exclude = globset(&opts.exclude)?;
    let mut unreadable = Vec::new();
    let mut files = Vec::new();
    for item in WalkDir::new(root).follow_links(false) {
        match item {
            Ok(e) if e.file_type().is_file() => {
                let rel = relative(root, e.path());
                let included = include.as_ref().is_none_or(|g| g.is_match(&rel));
                let excluded = exclude.as_ref().is_some_and(|g| g.is_match(&rel));
                if included && !excluded {
                    files.push((e.into_path(), rel));
                }
            }
            Ok(_) => {}
            Err(e) => unreadable.push(Unreadable {
                path: e.path().map(|p| relative(root, p)).unwrap_or_default(),
                reason: e.to_string(),
            }),
        }
    }
    let results: Vec<_> = files
        .par_iter()
        .map(|(path, rel)| (rel.clone(), scan_file(path, rel)))
        .collect();
    let mut report = ScanReport {
        files_scanned: files.len(),
        ..ScanReport::default()
    };
    for (rel, result) in results {
        match result {
            FileScan::Entries(e) => report.map.extend(e),
            FileScan::Binary => report.binary_skipped += 1,
            FileScan::Unreadable(reason) => unreadable.push(Unreadable { path: rel, reason }),
        }
    }
    report
        .map
        .sort_by(|a, b| (&a.path, a.line, a.marker).cmp(&(&b.path, b.line, b.marker)));
    unreadable.sort_by(|a, b| a.path.cmp(&b.path));
    report.unreadable = unreadable;
    Ok(report)
}

/// Canonical serialization: pretty JSON array plus trailing newline.
pub fn to_json(map: &DataMap) -> String {
    let mut s = serde_json::to_string_pretty(map).expect("map serializes");
    s.push('\n');
    s
}

pub fn read_map(path: &Path) -> Result<DataMap, ScanError> {
    let invalid = |reason: String| ScanError::InvalidMap {
        path: path.to_path_buf(),
        reason,
    };
    let text = fs::read_to_string(path).map_err(|e| invalid(e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| invalid(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Moved {
    pub from_line: usize,
    pub entry: DataMapEntry,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MapDiff {
    pub added: Vec<DataMapEntry>,
    pub removed: Vec<DataMapEntry>,
    pub moved: Vec<Moved>,
}

impl MapDiff {
    pub fn is_empty(&self) -> bool {
        self.added.is_empty() && self.removed.is_empty() && self.moved.is_empty()
    }
}

type Identity<'a> = (&'a str, Marker, &'a BTreeMap<String, String>);

fn identity(e: &DataMapEntry) -> Identity<'_> {
    (&e.path, e.marker, &e.attributes)
}

/// Compares on (path, marker, attributes). Entries with the same identity
/// at the same line are unchanged; leftover old and new entries of one
/// identity are paired in line order as moves; the surplus is added or
/// removed.
pub fn diff(old: &DataMap, new: &DataMap) -> MapDiff {
    let mut groups: BTreeMap<Identity<'_>, (Vec<&DataMapEntry>, Vec<&DataMapEntry>)> =
        BTreeMap::new();
    for e in old {
        groups.entry(identity(e)).or_default().0.push(e);
    }
    for e in new {
        groups.entry(identity(e)).or_default().1.push(e);
    }
    let mut out = MapDiff::default();
    for (_, (mut olds, mut news)) in groups {
        olds.sort_by_key(|e| e.line);
        news.sort_by_key(|e| e.line);
        let same: Vec<usize> = olds
            .iter()
            .map(|e| e.line)
            .filter(|l| news.iter().any(|n| n.line == *l))
            .collect();
        olds.retain(|e| !same.contains(&e.line));
        news.retain(|e| !same.contains(&e.line));
        let paired = olds.len().min(news.len());
        for (o, n) in olds.iter().zip(&news) {
            out.moved.push(Moved {
                from_line: o.line,
                entry: (*n).clone(),
            });
        }
        out.removed
            .extend(olds[paired..].iter().map(|e| (*e).clone()));
        out.added
            .extend(news[paired..].iter().map(|e| (*e).clone()));
    }
    let key = |e: &DataMapEntry| (e.path.clone(), e.line, e.marker);
    out.added.sort_by_key(key);
    out.removed.sort_by_key(key);
    out.moved.sort_by_key(|m| key(&m.entry));
    out
}
