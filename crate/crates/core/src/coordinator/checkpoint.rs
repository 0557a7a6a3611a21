//! Durable server state in one directory:
//!
//! - `results.log`: one completed record per line, `crc32hex<TAB>json`,
//!   appended and synced before the client is acknowledged.
//! - `snapshot.<seq>`: CRC header line followed by the job table as JSON.
//! - `failed.log`: jobs that exhausted their attempts, for manual retry.
//! - `manifest`: the latest snapshot sequence number and the run parameters.
//!
//! Snapshots and the manifest are written to a temporary file and renamed
//! into place. A torn or corrupt log tail is truncated on load.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::state::{Effect, Job, ServerSnapshot, ServerState};
use super::CoordinatorError;
use crate::optimizer::CandidateRecord;

pub const RESULTS_LOG: &str = "results.log";
pub const FAILED_LOG: &str = "failed.log";
pub const MANIFEST: &str = "manifest";
pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
/// Older snapshots kept as fallbacks.
const KEEP_SNAPSHOTS: usize = 3;

/// Places where an injected fault stops the server, for crash testing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum KillPoint {
    BeforeLogAppend,
    /// Half of the record line is written, then the process dies.
    TornLogAppend,
    AfterLogAppend,
    AfterAck,
    BeforeSnapshot,
    /// The temporary snapshot exists but was never renamed.
    TornSnapshot,
    AfterSnapshotRename,
    AfterManifest,
    BeforeProposalSent,
    AfterProposalSent,
}

impl KillPoint {
    pub const ALL: [KillPoint; 10] = [
        KillPoint::BeforeLogAppend,
        KillPoint::TornLogAppend,
        KillPoint::AfterLogAppend,
        KillPoint::AfterAck,
        KillPoint::BeforeSnapshot,
        KillPoint::TornSnapshot,
        KillPoint::AfterSnapshotRename,
        KillPoint::AfterManifest,
        KillPoint::BeforeProposalSent,
        KillPoint::AfterProposalSent,
    ];
}

/// Crash at the `countdown`-th time `point` is reached.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FaultPlan {
    pub point: KillPoint,
    pub countdown: usize,
}

#[derive(Debug, Default)]
pub struct Faults {
    plan: Option<FaultPlan>,
    seen: usize,
}

impl Faults {
    pub fn new(plan: Option<FaultPlan>) -> Self {
        Self { plan, seen: 0 }
    }

    pub fn check(&mut self, point: KillPoint) -> Result<(), CoordinatorError> {
        match self.plan {
            Some(p) if p.point == point => {
                self.seen += 1;
                if self.seen >= p.countdown {
                    self.plan = None;
                    return Err(CoordinatorError::InjectedCrash(format!("{point:?}")));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub latest_snapshot: Option<u64>,
    pub bucket_lower_ms: f64,
    /// `None` for an unbounded bucket.
    pub bucket_upper_ms: Option<f64>,
    pub budget: usize,
    pub seed: u64,
}

fn crc_hex(bytes: &[u8]) -> String {
    format!("{:08x}", crc32fast::hash(bytes))
}

fn io_err(path: &Path, e: std::io::Error) -> CoordinatorError {
    CoordinatorError::Checkpoint(format!("{}: {e}", path.display()))
}

/// Writes `contents` to `path` via a synced temporary file and a rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), CoordinatorError> {
    let tmp = path.with_extension("tmp");
    let mut f = File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
    f.write_all(contents).map_err(|e| io_err(&tmp, e))?;
    f.sync_all().map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

/// Encodes one results-log line, including the trailing newline.
pub fn encode_record(record: &CandidateRecord) -> String {
    let json = serde_json::to_string(record).expect("records always serialize");
    format!("{}\t{json}\n", crc_hex(json.as_bytes()))
}

pub struct LogScan {
    pub records: Vec<CandidateRecord>,
    /// Byte length of the valid prefix.
    pub valid_len: u64,
    /// True when bytes after the valid prefix were dropped.
    pub truncated: bool,
}

/// Reads a results log, stopping at the first torn or corrupt line.
pub fn scan_results_log(path: &Path) -> Result<LogScan, CoordinatorError> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(io_err(path, e)),
    };
    let mut records = Vec::new();
    let mut offset = 0usize;
    while offset < bytes.len() {
        let Some(end) = bytes[offset..].iter().position(|&b| b == b'\n') else { break };
        let line = &bytes[offset..offset + end];
        let parsed = std::str::from_utf8(line).ok().and_then(|l| {
            let (crc, json) = l.split_once('\t')?;
            if crc != crc_hex(json.as_bytes()) {
                return None;
            }
            serde_json::from_str::<CandidateRecord>(json).ok()
        });
        match parsed {
            Some(r) => records.push(r),
            None => break,
        }
        offset += end + 1;
    }
    Ok(LogScan {
        records,
        valid_len: offset as u64,
        truncated: offset < bytes.len(),
    })
}

pub fn parse_snapshot(text: &str) -> Result<ServerSnapshot, CoordinatorError> {
    let corrupt = |m: &str| CoordinatorError::CorruptSnapshot(m.into());
    let (crc, body) = text.split_once('\n').ok_or_else(|| corrupt("missing header"))?;
    if crc.trim() != crc_hex(body.as_bytes()) {
        return Err(corrupt("checksum mismatch"));
    }
    serde_json::from_str(body).map_err(|e| corrupt(&e.to_string()))
}

pub fn render_snapshot(snapshot: &ServerSnapshot) -> String {
    let body = serde_json::to_string(snapshot).expect("snapshots always serialize");
    format!("{}\n{body}", crc_hex(body.as_bytes()))
}

/// What a checkpoint directory held when it was opened.
pub struct Recovered {
    pub snapshot: Option<ServerSnapshot>,
    pub results: Vec<CandidateRecord>,
    pub truncated_log: bool,
}

pub struct CheckpointStore {
    dir: PathBuf,
    log: File,
    manifest: Manifest,
    pub faults: Faults,
}

impl CheckpointStore {
    /// Opens (creating if needed) a checkpoint directory and recovers its
    /// contents. A corrupt log tail is cut off; an unwritable directory is an
    /// error.
    pub fn open(dir: &Path, manifest: Manifest) -> Result<(Self, Recovered), CoordinatorError> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let probe = dir.join(".write-probe");
        fs::write(&probe, b"ok").map_err(|e| io_err(&probe, e))?;
        fs::remove_file(&probe).map_err(|e| io_err(&probe, e))?;

        let log_path = dir.join(RESULTS_LOG);
        let scan = scan_results_log(&log_path)?;
        if scan.truncated {
            log::warn!(
                "{}: dropping corrupt tail after {} valid records",
                log_path.display(),
                scan.records.len()
            );
        }
        let log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(|e| io_err(&log_path, e))?;
        log.set_len(scan.valid_len).map_err(|e| io_err(&log_path, e))?;

        let snapshot = latest_snapshot(dir);
        let mut manifest = manifest;
        if let Ok(text) = fs::read_to_string(dir.join(MANIFEST)) {
            if let Ok(old) = serde_json::from_str::<Manifest>(&text) {
                // The budget may grow between runs; the bucket and seed may not.
                if (old.bucket_lower_ms, old.bucket_upper_ms, old.seed)
                    != (manifest.bucket_lower_ms, manifest.bucket_upper_ms, manifest.seed)
                {
                    return Err(CoordinatorError::Config(format!(
                        "{} holds a search of bucket {}:{} with seed {}",
                        dir.display(),
                        old.bucket_lower_ms,
                        old.bucket_upper_ms.map_or("inf".into(), |u| u.to_string()),
                        old.seed
                    )));
                }
                manifest.latest_snapshot = old.latest_snapshot;
            }
        }
        let store = Self {
            dir: dir.to_path_buf(),
            log,
            manifest,
            faults: Faults::default(),
        };
        store.write_manifest()?;
        Ok((
            store,
            Recovered {
                snapshot,
                results: scan.records,
                truncated_log: scan.truncated,
            },
        ))
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn write_manifest(&self) -> Result<(), CoordinatorError> {
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes") + "\n";
        write_atomic(&self.dir.join(MANIFEST), text.as_bytes())
    }

    pub fn append_result(&mut self, record: &CandidateRecord) -> Result<(), CoordinatorError> {
        let path = self.dir.join(RESULTS_LOG);
        self.faults.check(KillPoint::BeforeLogAppend)?;
        let line = encode_record(record);
        if let Err(crash) = self.faults.check(KillPoint::TornLogAppend) {
            let half = &line.as_bytes()[..line.len() / 2];
            self.log.write_all(half).map_err(|e| io_err(&path, e))?;
            let _ = self.log.sync_data();
            return Err(crash);
        }
        self.log.write_all(line.as_bytes()).map_err(|e| io_err(&path, e))?;
        self.log.sync_data().map_err(|e| io_err(&path, e))?;
        self.faults.check(KillPoint::AfterLogAppend)
    }

    pub fn record_failure(&mut self, job: &Job) -> Result<(), CoordinatorError> {
        let path = self.dir.join(FAILED_LOG);
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| io_err(&path, e))?;
        let line = serde_json::to_string(job).expect("jobs serialize") + "\n";
        f.write_all(line.as_bytes()).map_err(|e| io_err(&path, e))?;
        f.sync_data().map_err(|e| io_err(&path, e))
    }

    pub fn write_snapshot(&mut self, snapshot: &ServerSnapshot) -> Result<(), CoordinatorError> {
        self.faults.check(KillPoint::BeforeSnapshot)?;
        let path = self.dir.join(format!("snapshot.{}", snapshot.seq));
        let text = render_snapshot(snapshot);
        if let Err(crash) = self.faults.check(KillPoint::TornSnapshot) {
            let tmp = path.with_extension("tmp");
            fs::write(&tmp, &text.as_bytes()[..text.len() / 2]).map_err(|e| io_err(&tmp, e))?;
            return Err(crash);
        }
        write_atomic(&path, text.as_bytes())?;
        self.faults.check(KillPoint::AfterSnapshotRename)?;
        self.manifest.latest_snapshot = Some(snapshot.seq);
        self.write_manifest()?;
        self.faults.check(KillPoint::AfterManifest)?;
        self.prune(snapshot.seq);
        Ok(())
    }

    /// Persists the effects of one state transition, in order.
    pub fn apply(&mut self, state: &mut ServerState, effects: &[Effect]) -> Result<(), CoordinatorError> {
        for effect in effects {
            match effect {
                Effect::AppendResult(r) => self.append_result(r)?,
                Effect::RecordFailure(job) => self.record_failure(job)?,
                Effect::Snapshot => {
                    state.next_seq();
                    self.write_snapshot(&state.snapshot())?;
                }
            }
        }
        Ok(())
    }

    fn prune(&self, latest: u64) {
        let mut seqs = snapshot_seqs(&self.dir);
        seqs.retain(|&s| s <= latest);
        if seqs.len() > KEEP_SNAPSHOTS {
            for s in &seqs[..seqs.len() - KEEP_SNAPSHOTS] {
                let _ = fs::remove_file(self.dir.join(format!("snapshot.{s}")));
            }
        }
    }
}

fn snapshot_seqs(dir: &Path) -> Vec<u64> {
    let mut seqs: Vec<u64> = fs::read_dir(dir)
        .into_iter()
        .flatten()
        .flatten()
        .filter_map(|e| e.file_name().to_str()?.strip_prefix("snapshot.")?.parse().ok())
        .collect();
    seqs.sort_unstable();
    seqs
}

/// Newest snapshot that parses and passes its checksum. Snapshots are tried
/// newest first, so a corrupt one falls back to its predecessor.
fn latest_snapshot(dir: &Path) -> Option<ServerSnapshot> {
    for seq in snapshot_seqs(dir).into_iter().rev() {
        let path = dir.join(format!("snapshot.{seq}"));
        match fs::read_to_string(&path).map_err(|e| io_err(&path, e)).and_then(|t| parse_snapshot(&t)) {
            Ok(s) => return Some(s),
            Err(e) => log::warn!("{}: {e}; trying an older snapshot", path.display()),
        }
    }
    None
}

/// Reads the manifest of a checkpoint directory.
pub fn read_manifest(dir: &Path) -> Result<Manifest, CoordinatorError> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    serde_json::from_str(&text).map_err(|e| CoordinatorError::Checkpoint(format!("{}: {e}", path.display())))
}

/// All valid records of a results log, in order. Lines after a corrupt one
/// are ignored.
pub fn read_results(path: &Path) -> Result<Vec<CandidateRecord>, CoordinatorError> {
    Ok(scan_results_log(path)?.records)
}
