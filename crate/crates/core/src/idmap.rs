//! User-namespace ID maps.
//!
//! An [`IdMap`] is the list of `ns_start host_start count` triples the kernel
//! accepts in `/proc/<pid>/uid_map` and `gid_map`. Host IDs are what access
//! control uses; namespace IDs are aliases. This module plans the two kinds
//! of maps (privileged, via subordinate ID ranges; unprivileged, a single ID)
//! and lints `/etc/subuid`-style configurations for ranges that would hand
//! one user another user's IDs.

use std::collections::BTreeSet;
use std::fmt;

use thiserror::Error;

pub type Id = u32;

/// ID shown for anything unmapped (`nobody` / `nogroup`).
pub const OVERFLOW_ID: Id = 65534;

const ID_SPACE: u64 = 1 << 32;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IdMapError {
    #[error("map entry {index} has zero count")]
    ZeroCount { index: usize },
    #[error("map entry {index} overflows the 32-bit ID space")]
    OutOfRange { index: usize },
    #[error("namespace ranges of entries {a} and {b} overlap")]
    NsOverlap { a: usize, b: usize },
    #[error("host ranges of entries {a} and {b} overlap")]
    HostOverlap { a: usize, b: usize },
    #[error("subordinate range {start}+{count} contains invoking ID {invoker}")]
    RangeContainsInvoker { invoker: Id, start: Id, count: u32 },
    #[error("malformed map line {0:?}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SubidEntry {
    pub user: String,
    pub start: Id,
    pub count: u32,
}

impl SubidEntry {
    /// Exclusive end of the host range.
    pub fn end(&self) -> u64 {
        self.start as u64 + self.count as u64
    }

    pub fn contains(&self, id: Id) -> bool {
        (self.start as u64..self.end()).contains(&(id as u64))
    }
}

impl fmt::Display for SubidEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.user, self.start, self.count)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MapRange {
    pub ns_start: Id,
    pub host_start: Id,
    pub count: u32,
}

impl MapRange {
    pub fn new(ns_start: Id, host_start: Id, count: u32) -> Self {
        MapRange {
            ns_start,
            host_start,
            count,
        }
    }
}

/// A validated one-to-one ID map.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct IdMap {
    ranges: Vec<MapRange>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    NsToHost,
    HostToNs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Translated {
    Mapped(Id),
    Unmapped,
}

impl Translated {
    /// The ID a namespace would display, i.e. the overflow ID when unmapped.
    pub fn display_id(self) -> Id {
        match self {
            Translated::Mapped(id) => id,
            Translated::Unmapped => OVERFLOW_ID,
        }
    }
}

fn overlaps(a_start: Id, a_count: u32, b_start: Id, b_count: u32) -> bool {
    let (a0, a1) = (a_start as u64, a_start as u64 + a_count as u64);
    let (b0, b1) = (b_start as u64, b_start as u64 + b_count as u64);
    a0 < b1 && b0 < a1
}

impl IdMap {
    pub fn new(ranges: Vec<MapRange>) -> Result<Self, IdMapError> {
        for (i, r) in ranges.iter().enumerate() {
            if r.count == 0 {
                return Err(IdMapError::ZeroCount { index: i });
            }
            if r.ns_start as u64 + r.count as u64 > ID_SPACE
                || r.host_start as u64 + r.count as u64 > ID_SPACE
            {
                return Err(IdMapError::OutOfRange { index: i });
            }
        }
        for a in 0..ranges.len() {
            for b in a + 1..ranges.len() {
                let (x, y) = (&ranges[a], &ranges[b]);
                if overlaps(x.ns_start, x.count, y.ns_start, y.count) {
                    return Err(IdMapError::NsOverlap { a, b });
                }
                if overlaps(x.host_start, x.count, y.host_start, y.count) {
                    return Err(IdMapError::HostOverlap { a, b });
                }
            }
        }
        Ok(IdMap { ranges })
    }

    /// Single ID map: `ns_id` inside is `host_id` outside.
    pub fn single(ns_id: Id, host_id: Id) -> Self {
        IdMap {
            ranges: vec![MapRange::new(ns_id, host_id, 1)],
        }
    }

    pub fn ranges(&self) -> &[MapRange] {
        &self.ranges
    }

    pub fn translate(&self, id: Id, direction: Direction) -> Translated {
        for r in &self.ranges {
            let (from, to) = match direction {
                Direction::NsToHost => (r.ns_start, r.host_start),
                Direction::HostToNs => (r.host_start, r.ns_start),
            };
            if id >= from && ((id - from) as u64) < r.count as u64 {
                return Translated::Mapped(to + (id - from));
            }
        }
        Translated::Unmapped
    }

    /// Text for writing to `/proc/<pid>/uid_map`.
    pub fn to_proc_text(&self) -> String {
        self.ranges
            .iter()
            .map(|r| format!("{} {} {}\n", r.ns_start, r.host_start, r.count))
            .collect()
    }

    /// Parse either the written form or the padded form the kernel reads back.
    pub fn parse_proc(text: &str) -> Result<Self, IdMapError> {
        let mut ranges = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let nums: Vec<u32> = line
                .split_whitespace()
                .map(str::parse)
                .collect::<Result<_, _>>()
                .map_err(|_| IdMapError::Malformed(line.to_string()))?;
            match nums.as_slice() {
                [ns, host, count] => ranges.push(MapRange::new(*ns, *host, *count)),
                _ => return Err(IdMapError::Malformed(line.to_string())),
            }
        }
        IdMap::new(ranges)
    }
}

impl fmt::Display for IdMap {
    /// Same layout as reading `/proc/self/uid_map`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.ranges {
            writeln!(f, "{:>10} {:>10} {:>10}", r.ns_start, r.host_start, r.count)?;
        }
        Ok(())
    }
}

/// Root in the namespace is the invoker; IDs 1..=count come from the
/// subordinate range.
pub fn plan_privileged_map(invoking_id: Id, entry: &SubidEntry) -> Result<IdMap, IdMapError> {
    if entry.contains(invoking_id) {
        return Err(IdMapError::RangeContainsInvoker {
            invoker: invoking_id,
            start: entry.start,
            count: entry.count,
        });
    }
    IdMap::new(vec![
        MapRange::new(0, invoking_id, 1),
        MapRange::new(1, entry.start, entry.count),
    ])
}

pub fn plan_unprivileged_map(host_id: Id, ns_id: Id) -> IdMap {
    IdMap::single(ns_id, host_id)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MapCase {
    InUseMapped,
    UnusedMapped,
    InUseUnmapped,
    UnusedUnmapped,
}

impl MapCase {
    pub fn semantics(self) -> &'static str {
        match self {
            MapCase::InUseMapped => {
                "in use on the host and mapped: namespace processes act with that host ID's access"
            }
            MapCase::UnusedMapped => {
                "unused on the host but mapped: available in the namespace, files can be owned by these IDs"
            }
            MapCase::InUseUnmapped => {
                "in use on the host but unmapped: valid inside the namespace, but no way to refer to them (shown as the overflow ID)"
            }
            MapCase::UnusedUnmapped => {
                "unused and unmapped: not available inside the namespace"
            }
        }
    }
}

pub fn classify_pair(host_in_use: bool, mapped: bool) -> (MapCase, &'static str) {
    let case = match (host_in_use, mapped) {
        (true, true) => MapCase::InUseMapped,
        (false, true) => MapCase::UnusedMapped,
        (true, false) => MapCase::InUseUnmapped,
        (false, false) => MapCase::UnusedUnmapped,
    };
    (case, case.semantics())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ContainerType {
    /// No user namespace; root inside is root on the host.
    TypeI,
    /// User namespace set up with privileged helpers.
    TypeII,
    /// User namespace set up unprivileged; one UID and one GID.
    TypeIII,
}

pub fn classify_runtime(has_user_ns: bool, privileged_setup: bool) -> ContainerType {
    match (has_user_ns, privileged_setup) {
        (false, _) => ContainerType::TypeI,
        (true, true) => ContainerType::TypeII,
        (true, false) => ContainerType::TypeIII,
    }
}

impl fmt::Display for ContainerType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ContainerType::TypeI => "Type I",
            ContainerType::TypeII => "Type II",
            ContainerType::TypeIII => "Type III",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Severity {
    Error,
    Warning,
}

// Declaration order is the report sort order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FindingKind {
    MalformedEntry,
    RangeOverlapUsers,
    RangeCoversLiveId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LintFinding {
    pub severity: Severity,
    pub kind: FindingKind,
    /// Source line (1-based) of the first entry named, when known.
    pub line: Option<usize>,
    pub detail: String,
}

impl fmt::Display for LintFinding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sev = match self.severity {
            Severity::Error => "error",
            Severity::Warning => "warning",
        };
        let kind = match self.kind {
            FindingKind::MalformedEntry => "malformed-entry",
            FindingKind::RangeOverlapUsers => "range-overlap-users",
            FindingKind::RangeCoversLiveId => "range-covers-live-id",
        };
        match self.line {
            Some(l) => write!(f, "{sev}: {kind}: line {l}: {}", self.detail),
            None => write!(f, "{sev}: {kind}: {}", self.detail),
        }
    }
}

/// Result of reading a subuid/subgid file: good entries plus one finding per
/// bad line.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SubidFile {
    pub entries: Vec<SubidEntry>,
    pub findings: Vec<LintFinding>,
}

pub fn parse_subid(text: &str) -> SubidFile {
    let mut out = SubidFile::default();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        match parse_subid_line(line) {
            Ok(e) => out.entries.push(e),
            Err(why) => out.findings.push(LintFinding {
                severity: Severity::Error,
                kind: FindingKind::MalformedEntry,
                line: Some(idx + 1),
                detail: format!("{line:?}: {why}"),
            }),
        }
    }
    out
}

fn parse_subid_line(line: &str) -> Result<SubidEntry, &'static str> {
    let fields: Vec<&str> = line.split(':').collect();
    let [user, start, count] = fields.as_slice() else {
        return Err("expected user:start:count");
    };
    if user.is_empty() {
        return Err("empty user");
    }
    let start: u64 = start.trim().parse().map_err(|_| "bad start")?;
    let count: u64 = count.trim().parse().map_err(|_| "bad count")?;
    if count == 0 {
        return Err("count must be positive");
    }
    if start + count > ID_SPACE {
        return Err("range exceeds 32-bit ID space");
    }
    Ok(SubidEntry {
        user: user.to_string(),
        start: start as Id,
        count: count as u32,
    })
}

/// IDs in the third field of passwd(5) or group(5) lines. Lines that do not
/// parse are ignored.
pub fn account_ids(text: &str) -> BTreeSet<Id> {
    text.lines()
        .filter(|l| !l.trim_start().starts_with('#'))
        .filter_map(|l| l.split(':').nth(2)?.trim().parse().ok())
        .collect()
}

/// Flag subordinate ranges that overlap each other or cover IDs in use.
///
/// `live_ids` is whatever the caller considers in use (passwd/group entries,
/// file owners it knows of). IDs that exist only on unmounted filesystems
/// cannot be seen here; the result is only as good as that set.
pub fn lint_config(entries: &[SubidEntry], live_ids: &BTreeSet<Id>) -> Vec<LintFinding> {
    let mut found: Vec<(FindingKind, usize, LintFinding)> = Vec::new();
    for a in 0..entries.len() {
        for b in a + 1..entries.len() {
            let (x, y) = (&entries[a], &entries[b]);
            if overlaps(x.start, x.count, y.start, y.count) {
                let lo = x.start.max(y.start);
                let hi = x.end().min(y.end()) - 1;
                found.push((
                    FindingKind::RangeOverlapUsers,
                    a,
                    LintFinding {
                        severity: Severity::Error,
                        kind: FindingKind::RangeOverlapUsers,
                        line: None,
                        detail: format!(
                            "{x} and {y} share host IDs {lo}-{hi}; each user could access the other's files"
                        ),
                    },
                ));
            }
        }
    }
    for (i, e) in entries.iter().enumerate() {
        let covered: Vec<Id> = live_ids
            .range(e.start..)
            .take_while(|&&id| (id as u64) < e.end())
            .copied()
            .collect();
        if !covered.is_empty() {
            let list: Vec<String> = covered.iter().map(|id| id.to_string()).collect();
            found.push((
                FindingKind::RangeCoversLiveId,
                i,
                LintFinding {
                    severity: Severity::Error,
                    kind: FindingKind::RangeCoversLiveId,
                    line: None,
                    detail: format!(
                        "{} ({}) covers live host ID(s) {}",
                        e.user,
                        e,
                        list.join(", ")
                    ),
                },
            ));
        }
    }
    found.sort_by_key(|(kind, idx, _)| (*kind, *idx));
    found.into_iter().map(|(_, _, f)| f).collect()
}
