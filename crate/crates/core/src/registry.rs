//! Job registry behind the scheduler services.
//!
//! Jobs move `new -> ckpt* -> finished` or `new -> finished`; `finished` is
//! terminal and `ckpt_sequence` never decreases. An interrupted job keeps its
//! status: only its claim is released, so a checkpointed job stays `ckpt`
//! and resumes from its image.
//!
//! Every accepted transition is appended to a journal (one JSON object per
//! line) and fsynced before the call returns; [`Registry::open`] replays it.
//! Rejected requests never touch the journal.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::cmi::{decode_cmi, unix_now, RestartManifest};
use crate::store::{BlobKey, BlobStore};

pub const DEFAULT_LEASE: Duration = Duration::from_secs(30);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    New,
    Ckpt,
    Finished,
}

impl JobStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            JobStatus::New => "new",
            JobStatus::Ckpt => "ckpt",
            JobStatus::Finished => "finished",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "new" => Some(JobStatus::New),
            "ckpt" => Some(JobStatus::Ckpt),
            "finished" => Some(JobStatus::Finished),
            _ => None,
        }
    }
}

impl fmt::Display for JobStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JobRecord {
    pub job_id: String,
    pub status: JobStatus,
    pub app_name: String,
    pub input_keys: Vec<BlobKey>,
    pub cmi_manifest_key: Option<BlobKey>,
    pub product_keys: Vec<BlobKey>,
    pub ckpt_sequence: u64,
    pub claimed_by: Option<String>,
    pub updated_at: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RegistryError {
    #[error("job {0} not found")]
    NotFound(String),
    #[error("job {0} already exists")]
    AlreadyExists(String),
    #[error("invalid status {0:?}")]
    InvalidStatus(String),
    #[error("invalid transition {from} -> {to}")]
    InvalidTransition { from: JobStatus, to: JobStatus },
    #[error("stale sequence {given} (current {current})")]
    StaleSequence { given: u64, current: u64 },
    #[error("missing or invalid blob {0}")]
    MissingBlob(String),
    #[error("job claimed by {0}")]
    ClaimConflict(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("journal: {0}")]
    Journal(String),
}

impl RegistryError {
    /// Error kind as reported over the wire.
    pub fn kind(&self) -> &'static str {
        match self {
            RegistryError::NotFound(_) => "NotFound",
            RegistryError::AlreadyExists(_) => "AlreadyExists",
            RegistryError::InvalidStatus(_) => "InvalidStatus",
            RegistryError::InvalidTransition { .. } => "InvalidTransition",
            RegistryError::StaleSequence { .. } => "StaleSequence",
            RegistryError::MissingBlob(_) => "MissingBlob",
            RegistryError::ClaimConflict(_) => "ClaimConflict",
            RegistryError::InvalidArgument(_) => "BadRequest",
            RegistryError::Journal(_) => "Internal",
        }
    }
}

impl From<io::Error> for RegistryError {
    fn from(e: io::Error) -> Self {
        RegistryError::Journal(e.to_string())
    }
}

/// What a referenced blob is expected to be.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlobRole {
    /// A restart manifest that must reference a digest-valid image of `sequence`.
    Manifest { sequence: u64 },
    Product,
}

/// Verifies blobs referenced by a publish. Returns a reason on failure.
pub type BlobCheck<'a> = &'a dyn Fn(&BlobKey, BlobRole) -> Result<(), String>;

pub fn no_blob_check(_: &BlobKey, _: BlobRole) -> Result<(), String> {
    Ok(())
}

/// Checks a published blob against a store: products must exist; a manifest
/// must decode and reference a digest-valid image of the published sequence.
pub fn verify_blob(store: &dyn BlobStore, key: &BlobKey, role: BlobRole) -> Result<(), String> {
    let raw = store.get(key).map_err(|e| e.to_string())?;
    let BlobRole::Manifest { sequence } = role else {
        return Ok(());
    };
    let manifest = RestartManifest::decode(&raw).map_err(|e| e.to_string())?;
    if manifest.sequence != sequence {
        return Err(format!("manifest is at sequence {}", manifest.sequence));
    }
    let cmi_key = BlobKey::parse(&manifest.cmi_blob_key).map_err(|e| e.to_string())?;
    let image = decode_cmi(&store.get(&cmi_key).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    manifest.check_against(&image).map_err(|e| e.to_string())
}

/// Orders job ids so that digit runs compare numerically: "2" < "10" < "a1" < "a10".
pub fn natural_cmp(a: &str, b: &str) -> Ordering {
    fn runs(s: &str) -> Vec<(bool, &str)> {
        let mut out = Vec::new();
        let mut start = 0;
        let bytes = s.as_bytes();
        for i in 1..=bytes.len() {
            if i == bytes.len() || bytes[i].is_ascii_digit() != bytes[start].is_ascii_digit() {
                out.push((bytes[start].is_ascii_digit(), &s[start..i]));
                start = i;
            }
        }
        out
    }
    let (ra, rb) = (runs(a), runs(b));
    for ((da, sa), (db, sb)) in ra.iter().zip(rb.iter()) {
        let ord = match (da, db) {
            (true, true) => {
                let ta = sa.trim_start_matches('0');
                let tb = sb.trim_start_matches('0');
                ta.len()
                    .cmp(&tb.len())
                    .then_with(|| ta.cmp(tb))
                    .then_with(|| sa.len().cmp(&sb.len()))
            }
            _ => sa.cmp(sb),
        };
        if ord != Ordering::Equal {
            return ord;
        }
    }
    ra.len().cmp(&rb.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum JournalOp {
    Submit {
        job_id: String,
        app_name: String,
        input_keys: Vec<String>,
        at: i64,
    },
    Claim {
        job_id: String,
        node: String,
        at: i64,
    },
    Release {
        job_id: String,
        at: i64,
    },
    Ckpt {
        job_id: String,
        manifest_key: String,
        sequence: u64,
        at: i64,
    },
    Finished {
        job_id: String,
        product_keys: Vec<String>,
        at: i64,
    },
}

struct Journal {
    path: PathBuf,
    file: File,
}

impl Journal {
    fn append(&mut self, op: &JournalOp) -> Result<(), RegistryError> {
        let mut line = serde_json::to_string(op).map_err(|e| RegistryError::Journal(e.to_string()))?;
        line.push('\n');
        self.file.write_all(line.as_bytes())?;
        self.file.sync_data()?;
        Ok(())
    }
}

type Clock = Box<dyn Fn() -> Instant + Send + Sync>;

pub struct Registry {
    jobs: HashMap<String, JobRecord>,
    journal: Option<Journal>,
    lease: Duration,
    started: Instant,
    last_seen: HashMap<String, Instant>,
    nodes: BTreeMap<String, String>,
    clock: Clock,
}

impl fmt::Debug for Registry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Registry")
            .field("jobs", &self.jobs.len())
            .field("journal", &self.journal.as_ref().map(|j| &j.path))
            .field("lease", &self.lease)
            .finish_non_exhaustive()
    }
}

fn parse_keys(keys: &[String]) -> Result<Vec<BlobKey>, RegistryError> {
    keys.iter()
        .map(|k| BlobKey::parse(k).map_err(|_| RegistryError::InvalidArgument(format!("bad blob key {k:?}"))))
        .collect()
}

fn key_strings(keys: &[BlobKey]) -> Vec<String> {
    keys.iter().map(ToString::to_string).collect()
}

impl Registry {
    /// Volatile registry without a journal.
    pub fn in_memory(lease: Duration) -> Self {
        Self {
            jobs: HashMap::new(),
            journal: None,
            lease,
            started: Instant::now(),
            last_seen: HashMap::new(),
            nodes: BTreeMap::new(),
            clock: Box::new(Instant::now),
        }
    }

    /// Opens (or creates) a journaled registry and replays its history. A
    /// torn final line left by a crash mid-append is cut off.
    pub fn open(path: impl AsRef<Path>, lease: Duration) -> Result<Self, RegistryError> {
        let path = path.as_ref().to_path_buf();
        let mut reg = Self::in_memory(lease);
        let text = match fs::read(&path) {
            Ok(bytes) => bytes,
            Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(e.into()),
        };
        let complete = match text.iter().rposition(|&b| b == b'\n') {
            Some(i) => i + 1,
            None => 0,
        };
        for (lineno, line) in text[..complete].split(|&b| b == b'\n').enumerate() {
            if line.is_empty() {
                continue;
            }
            let op: JournalOp = serde_json::from_slice(line)
                .map_err(|e| RegistryError::Journal(format!("line {}: {e}", lineno + 1)))?;
            reg.apply(&op)?;
        }
        if complete < text.len() {
            tracing::warn!(path = %path.display(), dropped = text.len() - complete, "dropping torn journal tail");
            let f = OpenOptions::new().write(true).open(&path)?;
            f.set_len(complete as u64)?;
            f.sync_all()?;
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        reg.journal = Some(Journal { path, file });
        Ok(reg)
    }

    pub fn with_clock(mut self, clock: impl Fn() -> Instant + Send + Sync + 'static) -> Self {
        self.started = clock();
        self.clock = Box::new(clock);
        self
    }

    pub fn lease(&self) -> Duration {
        self.lease
    }

    fn apply(&mut self, op: &JournalOp) -> Result<(), RegistryError> {
        match op {
            JournalOp::Submit {
                job_id,
                app_name,
                input_keys,
                at,
            } => {
                self.jobs.insert(
                    job_id.clone(),
                    JobRecord {
                        job_id: job_id.clone(),
                        status: JobStatus::New,
                        app_name: app_name.clone(),
                        input_keys: parse_keys(input_keys)?,
                        cmi_manifest_key: None,
                        product_keys: Vec::new(),
                        ckpt_sequence: 0,
                        claimed_by: None,
                        updated_at: *at,
                    },
                );
            }
            JournalOp::Claim { job_id, node, at } => {
                let rec = self.record_mut(job_id)?;
                rec.claimed_by = Some(node.clone());
                rec.updated_at = *at;
            }
            JournalOp::Release { job_id, at } => {
                let rec = self.record_mut(job_id)?;
                rec.claimed_by = None;
                rec.updated_at = *at;
            }
            JournalOp::Ckpt {
                job_id,
                manifest_key,
                sequence,
                at,
            } => {
                let key = BlobKey::parse(manifest_key)
                    .map_err(|_| RegistryError::Journal(format!("bad manifest key {manifest_key:?}")))?;
                let rec = self.record_mut(job_id)?;
                rec.status = JobStatus::Ckpt;
                rec.cmi_manifest_key = Some(key);
                rec.ckpt_sequence = *sequence;
                rec.updated_at = *at;
            }
            JournalOp::Finished {
                job_id,
                product_keys,
                at,
            } => {
                let keys = parse_keys(product_keys)?;
                let rec = self.record_mut(job_id)?;
                rec.status = JobStatus::Finished;
                rec.product_keys = keys;
                rec.claimed_by = None;
                rec.updated_at = *at;
            }
        }
        Ok(())
    }

    fn commit(&mut self, op: JournalOp) -> Result<(), RegistryError> {
        if let Some(j) = self.journal.as_mut() {
            j.append(&op)?;
        }
        self.apply(&op)
    }

    fn record_mut(&mut self, job_id: &str) -> Result<&mut JobRecord, RegistryError> {
        self.jobs
            .get_mut(job_id)
            .ok_or_else(|| RegistryError::NotFound(job_id.to_string()))
    }

    fn sorted_ids(&self) -> Vec<&String> {
        let mut ids: Vec<_> = self.jobs.keys().collect();
        ids.sort_by(|a, b| natural_cmp(a, b));
        ids
    }

    fn claim_live(&self, rec: &JobRecord) -> bool {
        match &rec.claimed_by {
            None => false,
            Some(node) => {
                let seen = self.last_seen.get(node).copied().unwrap_or(self.started);
                (self.clock)().saturating_duration_since(seen) <= self.lease
            }
        }
    }

    pub fn submit(&mut self, job_id: &str, app_name: &str, input_keys: &[BlobKey]) -> Result<JobRecord, RegistryError> {
        if job_id.is_empty() || app_name.is_empty() {
            return Err(RegistryError::InvalidArgument("job_id and app_name are required".into()));
        }
        if BlobKey::new(format!("job-{job_id}"), "x").is_err() {
            return Err(RegistryError::InvalidArgument(format!("job id {job_id:?} is not usable as a blob namespace")));
        }
        if self.jobs.contains_key(job_id) {
            return Err(RegistryError::AlreadyExists(job_id.to_string()));
        }
        self.commit(JournalOp::Submit {
            job_id: job_id.to_string(),
            app_name: app_name.to_string(),
            input_keys: key_strings(input_keys),
            at: unix_now(),
        })?;
        Ok(self.jobs[job_id].clone())
    }

    /// All jobs with their statuses, in job id order.
    pub fn list_jobs(&self) -> Vec<(String, JobStatus)> {
        self.sorted_ids()
            .into_iter()
            .map(|id| (id.clone(), self.jobs[id].status))
            .collect()
    }

    pub fn records(&self) -> Vec<JobRecord> {
        self.sorted_ids().into_iter().map(|id| self.jobs[id].clone()).collect()
    }

    pub fn get_job(&self, job_id: &str) -> Result<JobRecord, RegistryError> {
        self.jobs
            .get(job_id)
            .cloned()
            .ok_or_else(|| RegistryError::NotFound(job_id.to_string()))
    }

    /// Claims the lowest unfinished job that no live node holds.
    pub fn next_job(&mut self, node: &str) -> Result<Option<JobRecord>, RegistryError> {
        self.touch(node);
        let candidate = self
            .sorted_ids()
            .into_iter()
            .map(|id| &self.jobs[id])
            .find(|rec| rec.status != JobStatus::Finished && !self.claim_live(rec))
            .map(|rec| rec.job_id.clone());
        let Some(job_id) = candidate else {
            return Ok(None);
        };
        self.commit(JournalOp::Claim {
            job_id: job_id.clone(),
            node: node.to_string(),
            at: unix_now(),
        })?;
        Ok(Some(self.jobs[&job_id].clone()))
    }

    /// Moves a claim to `node`. Allowed when the job is unclaimed, already
    /// held by `node` or by `from`, or held by a node whose lease lapsed.
    pub fn claim(&mut self, job_id: &str, node: &str, from: Option<&str>) -> Result<JobRecord, RegistryError> {
        self.touch(node);
        let rec = self.get_job(job_id)?;
        if rec.status == JobStatus::Finished {
            return Err(RegistryError::InvalidTransition {
                from: JobStatus::Finished,
                to: JobStatus::Finished,
            });
        }
        if let Some(holder) = &rec.claimed_by {
            if holder == node {
                return Ok(rec);
            }
            let handed_over = from.is_some_and(|f| f == holder);
            if !handed_over && self.claim_live(&rec) {
                return Err(RegistryError::ClaimConflict(holder.clone()));
            }
        }
        self.commit(JournalOp::Claim {
            job_id: job_id.to_string(),
            node: node.to_string(),
            at: unix_now(),
        })?;
        Ok(self.jobs[job_id].clone())
    }

    /// Drops `node`'s claim on the job, if it holds one.
    pub fn release(&mut self, job_id: &str, node: &str) -> Result<(), RegistryError> {
        let rec = self.get_job(job_id)?;
        if rec.claimed_by.as_deref() == Some(node) {
            self.commit(JournalOp::Release {
                job_id: job_id.to_string(),
                at: unix_now(),
            })?;
        }
        Ok(())
    }

    pub fn publish_job(
        &mut self,
        job_id: &str,
        status: &str,
        keys: &[BlobKey],
        sequence: u64,
        check: BlobCheck<'_>,
    ) -> Result<JobRecord, RegistryError> {
        let target = match JobStatus::parse(status) {
            Some(s @ (JobStatus::Ckpt | JobStatus::Finished)) => s,
            _ => return Err(RegistryError::InvalidStatus(status.to_string())),
        };
        let rec = self.get_job(job_id)?;
        if rec.status == JobStatus::Finished {
            return Err(RegistryError::InvalidTransition {
                from: rec.status,
                to: target,
            });
        }
        match target {
            JobStatus::Ckpt => {
                let [manifest] = keys else {
                    return Err(RegistryError::InvalidArgument(
                        "ckpt publish takes exactly one manifest key".into(),
                    ));
                };
                if sequence <= rec.ckpt_sequence {
                    return Err(RegistryError::StaleSequence {
                        given: sequence,
                        current: rec.ckpt_sequence,
                    });
                }
                check(manifest, BlobRole::Manifest { sequence })
                    .map_err(|why| RegistryError::MissingBlob(format!("{manifest}: {why}")))?;
                self.commit(JournalOp::Ckpt {
                    job_id: job_id.to_string(),
                    manifest_key: manifest.to_string(),
                    sequence,
                    at: unix_now(),
                })?;
            }
            _ => {
                if keys.is_empty() {
                    return Err(RegistryError::InvalidArgument("finished publish needs product keys".into()));
                }
                for k in keys {
                    check(k, BlobRole::Product).map_err(|why| RegistryError::MissingBlob(format!("{k}: {why}")))?;
                }
                self.commit(JournalOp::Finished {
                    job_id: job_id.to_string(),
                    product_keys: key_strings(keys),
                    at: unix_now(),
                })?;
            }
        }
        Ok(self.jobs[job_id].clone())
    }

    /// Releases every claim held by a dead node and forgets the node.
    pub fn requeue_dead(&mut self, node: &str) -> Result<Vec<String>, RegistryError> {
        let held: Vec<String> = self
            .sorted_ids()
            .into_iter()
            .filter(|id| self.jobs[*id].claimed_by.as_deref() == Some(node))
            .cloned()
            .collect();
        for id in &held {
            self.commit(JournalOp::Release {
                job_id: id.clone(),
                at: unix_now(),
            })?;
        }
        self.nodes.remove(node);
        self.last_seen.remove(node);
        Ok(held)
    }

    fn touch(&mut self, node: &str) {
        let now = (self.clock)();
        self.last_seen.insert(node.to_string(), now);
    }

    /// Records a liveness signal and the node's service address.
    pub fn heartbeat(&mut self, node: &str, addr: &str) {
        self.touch(node);
        if !addr.is_empty() {
            self.nodes.insert(node.to_string(), addr.to_string());
        }
    }

    pub fn lookup_node(&self, node: &str) -> Option<&str> {
        self.nodes.get(node).map(String::as_str)
    }

    pub fn nodes(&self) -> &BTreeMap<String, String> {
        &self.nodes
    }
}

/// Renders a job list the way `svc/list_jobs` reports it: `[["1","new"],...]`.
pub fn format_job_list(jobs: &[(String, JobStatus)]) -> String {
    let items: Vec<_> = jobs
        .iter()
        .map(|(id, st)| serde_json::json!([id, st.as_str()]))
        .collect();
    serde_json::Value::Array(items).to_string()
}

pub fn parse_job_list(text: &str) -> Result<Vec<(String, JobStatus)>, String> {
    let raw: Vec<(String, String)> = serde_json::from_str(text).map_err(|e| e.to_string())?;
    raw.into_iter()
        .map(|(id, st)| {
            JobStatus::parse(&st)
                .map(|s| (id, s))
                .ok_or_else(|| format!("unknown status {st:?}"))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::{Arc, Mutex};

    fn k(s: &str) -> BlobKey {
        BlobKey::parse(s).unwrap()
    }

    fn fig5(reg: &mut Registry) {
        for id in ["1", "2", "3"] {
            reg.submit(id, "colocation", &[k(&format!("job-{id}/input/fine.txt"))]).unwrap();
        }
        reg.publish_job("2", "ckpt", &[k("job-2/current.manifest")], 1, &no_blob_check).unwrap();
        reg.publish_job("3", "finished", &[k("job-3/product/match.txt")], 0, &no_blob_check).unwrap();
    }

    #[test]
    fn natural_order() {
        let mut ids = vec!["10", "2", "1", "a10", "a2", "b", "02"];
        ids.sort_by(|a, b| natural_cmp(a, b));
        assert_eq!(ids, ["1", "2", "02", "10", "a2", "a10", "b"]);
    }

    #[test]
    fn reproduces_sample_job_list() {
        let mut reg = Registry::in_memory(DEFAULT_LEASE);
        assert_eq!(format_job_list(&reg.list_jobs()), "[]");
        fig5(&mut reg);
        assert_eq!(
            format_job_list(&reg.list_jobs()),
            r#"[["1","new"],["2","ckpt"],["3","finished"]]"#
        );
        assert_eq!(reg.get_job("2").unwrap().status, JobStatus::Ckpt);
        let next = reg.next_job("A").unwrap().unwrap();
        assert_eq!(next.job_id, "1");
        assert_eq!(next.status, JobStatus::New);
        assert_eq!(next.claimed_by.as_deref(), Some("A"));
    }

    #[test]
    fn next_job_skips_live_claims_and_finished() {
        let mut reg = Registry::in_memory(DEFAULT_LEASE);
        fig5(&mut reg);
        assert_eq!(reg.next_job("A").unwrap().unwrap().job_id, "1");
        assert_eq!(reg.next_job("B").unwrap().unwrap().job_id, "2");
        assert!(reg.next_job("C").unwrap().is_none());
        // A already holds 1; it is not handed out again
        assert!(reg.next_job("A").unwrap().is_none());
    }

    #[test]
    fn all_finished_yields_none() {
        let mut reg = Registry::in_memory(DEFAULT_LEASE);
        reg.submit("1", "app", &[]).unwrap();
        reg.publish_job("1", "finished", &[k("job-1/product/p")], 0, &no_blob_check).unwrap();
        assert!(reg.next_job("A").unwrap().is_none());
    }

    #[test]
    fn publish_rules() {
        let mut reg = Registry::in_memory(DEFAULT_LEASE);
        fig5(&mut reg);
        let m = [k("job-1/current.manifest")];
        assert_eq!(
            reg.publish_job("1", "running", &m, 1, &no_blob_check),
            Err(RegistryError::InvalidStatus("running".into()))
        );
        assert!(matches!(reg.publish_job("9", "ckpt", &m, 1, &no_blob_check), Err(RegistryError::NotFound(_))));
        let rec = reg.publish_job("1", "ckpt", &m, 1, &no_blob_check).unwrap();
        assert_eq!((rec.status, rec.ckpt_sequence), (JobStatus::Ckpt, 1));
        assert_eq!(
            reg.publish_job("1", "ckpt", &m, 1, &no_blob_check),
            Err(RegistryError::StaleSequence { given: 1, current: 1 })
        );
        assert!(matches!(
            reg.publish_job("3", "ckpt", &[k("job-3/current.manifest")], 5, &no_blob_check),
            Err(RegistryError::InvalidTransition { .. })
        ));
        let missing = |_: &BlobKey, _: BlobRole| Err("absent".to_string());
        assert!(matches!(
            reg.publish_job("1", "ckpt", &m, 2, &missing),
            Err(RegistryError::MissingBlob(_))
        ));
        assert_eq!(reg.get_job("1").unwrap().ckpt_sequence, 1);
    }

    #[test]
    fn finished_releases_claim() {
        let mut reg = Registry::in_memory(DEFAULT_LEASE);
        reg.submit("1", "app", &[]).unwrap();
        reg.next_job("A").unwrap();
        let rec = reg.publish_job("1", "finished", &[k("job-1/product/p")], 0, &no_blob_check).unwrap();
        assert_eq!(rec.claimed_by, None);
        assert!(!rec.product_keys.is_empty());
    }

    #[test]
    fn claim_transfer_and_conflict() {
        let mut reg = Registry::in_memory(DEFAULT_LEASE);
        reg.submit("1", "app", &[]).unwrap();
        reg.next_job("A").unwrap();
        assert_eq!(reg.claim("1", "B", None), Err(RegistryError::ClaimConflict("A".into())));
        assert_eq!(reg.claim("1", "B", Some("A")).unwrap().claimed_by.as_deref(), Some("B"));
        assert_eq!(reg.claim("1", "B", None).unwrap().claimed_by.as_deref(), Some("B"));
    }

    #[test]
    fn requeue_releases_without_status_change() {
        let mut reg = Registry::in_memory(DEFAULT_LEASE);
        fig5(&mut reg);
        reg.next_job("A").unwrap();
        reg.next_job("A").unwrap();
        assert_eq!(reg.requeue_dead("B").unwrap(), Vec::<String>::new());
        assert_eq!(reg.requeue_dead("A").unwrap(), ["1", "2"]);
        assert_eq!(reg.get_job("1").unwrap().status, JobStatus::New);
        assert_eq!(reg.get_job("2").unwrap().status, JobStatus::Ckpt);
        assert_eq!(reg.next_job("C").unwrap().unwrap().job_id, "1");
    }

    #[test]
    fn claims_lapse_after_lease() {
        let now = Arc::new(Mutex::new(Instant::now()));
        let clock = now.clone();
        let mut reg = Registry::in_memory(Duration::from_secs(30)).with_clock(move || *clock.lock().unwrap());
        reg.submit("1", "app", &[]).unwrap();
        reg.next_job("A").unwrap();
        *now.lock().unwrap() += Duration::from_secs(20);
        assert!(reg.next_job("B").unwrap().is_none());
        reg.heartbeat("A", "");
        *now.lock().unwrap() += Duration::from_secs(25);
        assert!(reg.next_job("B").unwrap().is_none());
        *now.lock().unwrap() += Duration::from_secs(31);
        assert_eq!(reg.next_job("B").unwrap().unwrap().job_id, "1");
    }

    #[test]
    fn journal_replay_restores_state() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("jobs.journal");
        let before = {
            let mut reg = Registry::open(&path, DEFAULT_LEASE).unwrap();
            fig5(&mut reg);
            reg.next_job("A").unwrap();
            reg.records()
        };
        let reg = Registry::open(&path, DEFAULT_LEASE).unwrap();
        assert_eq!(reg.records(), before);
    }

    #[test]
    fn torn_journal_tail_is_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("jobs.journal");
        {
            let mut reg = Registry::open(&path, DEFAULT_LEASE).unwrap();
            reg.submit("1", "app", &[]).unwrap();
        }
        let good = fs::read(&path).unwrap();
        let mut torn = good.clone();
        torn.extend_from_slice(br#"{"op":"finished","job_id":"1","prod"#);
        fs::write(&path, &torn).unwrap();
        let mut reg = Registry::open(&path, DEFAULT_LEASE).unwrap();
        assert_eq!(reg.get_job("1").unwrap().status, JobStatus::New);
        assert_eq!(fs::read(&path).unwrap(), good);
        reg.submit("2", "app", &[]).unwrap();
        let reopened = Registry::open(&path, DEFAULT_LEASE).unwrap();
        assert_eq!(reopened.list_jobs().len(), 2);
    }

    #[test]
    fn job_list_parses_back() {
        let list = vec![("1".to_string(), JobStatus::New), ("2".to_string(), JobStatus::Finished)];
        assert_eq!(parse_job_list(&format_job_list(&list)).unwrap(), list);
    }
}
