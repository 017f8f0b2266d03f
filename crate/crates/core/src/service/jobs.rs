use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobStatus::Done | JobStatus::Failed)
    }

    fn can_become(self, next: JobStatus) -> bool {
        matches!(
            (self, next),
            (JobStatus::Queued, JobStatus::Running)
                | (JobStatus::Running, JobStatus::Done)
                | (JobStatus::Running, JobStatus::Failed)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditJob {
    pub id: String,
    /// Store-relative path of the uploaded original.
    pub original: String,
    pub instruction: String,
    pub styles: Vec<String>,
    pub exemplar_ids: Vec<String>,
    pub alphas: Vec<f32>,
    pub s_image: f64,
    pub s_text: f64,
    pub seed: u64,
    pub status: JobStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub idempotency_key: Option<String>,
    /// Set when a job was picked up again after a restart.
    #[serde(default)]
    pub recovered: bool,
    pub created_ms: u128,
    pub updated_ms: u128,
}

pub(crate) fn now_ms() -> u128 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

/// Jobs persisted one JSON file each under `<root>/jobs`.
#[derive(Debug)]
pub struct JobStore {
    root: PathBuf,
    jobs: Mutex<HashMap<String, EditJob>>,
}

impl JobStore {
    /// Opens `root`, returning the store and the ids of jobs that were
    /// queued or running when the previous process stopped, oldest first.
    pub fn open(root: &Path) -> Result<(Self, Vec<String>)> {
        for sub in ["jobs", "uploads", "results", "exemplars"] {
            let d = root.join(sub);
            std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        let mut jobs = HashMap::new();
        let dir = root.join("jobs");
        for entry in std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("json") {
                continue;
            }
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let job: EditJob = serde_json::from_slice(&bytes)?;
            jobs.insert(job.id.clone(), job);
        }
        let mut pending: Vec<&EditJob> = jobs.values().filter(|j| !j.status.is_terminal()).collect();
        pending.sort_by(|a, b| a.created_ms.cmp(&b.created_ms).then_with(|| a.id.cmp(&b.id)));
        let pending: Vec<String> = pending.into_iter().map(|j| j.id.clone()).collect();
        let store = Self {
            root: root.to_path_buf(),
            jobs: Mutex::new(jobs),
        };
        for id in &pending {
            store.update(id, |j| {
                j.recovered = true;
                Ok(())
            })?;
        }
        Ok((store, pending))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn write(&self, job: &EditJob) -> Result<()> {
        let path = self.root.join("jobs").join(format!("{}.json", job.id));
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, serde_json::to_vec_pretty(job)?).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }

    pub fn get(&self, id: &str) -> Option<EditJob> {
        self.jobs.lock().expect("job store").get(id).cloned()
    }

    pub fn by_idempotency_key(&self, key: &str) -> Option<EditJob> {
        self.jobs
            .lock()
            .expect("job store")
            .values()
            .find(|j| j.idempotency_key.as_deref() == Some(key))
            .cloned()
    }

    /// Inserts a new job unless its idempotency key is already taken, in
    /// which case the existing job is returned with `false`.
    pub fn insert(&self, job: EditJob) -> Result<(EditJob, bool)> {
        let mut jobs = self.jobs.lock().expect("job store");
        if let Some(key) = &job.idempotency_key {
            if let Some(existing) = jobs.values().find(|j| j.idempotency_key.as_ref() == Some(key)) {
                return Ok((existing.clone(), false));
            }
        }
        self.write(&job)?;
        jobs.insert(job.id.clone(), job.clone());
        Ok((job, true))
    }

    fn update(&self, id: &str, f: impl FnOnce(&mut EditJob) -> Result<()>) -> Result<EditJob> {
        let mut jobs = self.jobs.lock().expect("job store");
        let job = jobs
            .get_mut(id)
            .ok_or_else(|| Error::NotFound(format!("job `{id}`")))?;
        let mut next = job.clone();
        f(&mut next)?;
        next.updated_ms = now_ms();
        self.write(&next)?;
        *job = next.clone();
        Ok(next)
    }

    /// Moves a job forward; only QUEUED→RUNNING→{DONE, FAILED} is allowed.
    /// A recovered RUNNING job may be started again.
    pub fn transition(&self, id: &str, next: JobStatus, result: Option<String>, error: Option<String>) -> Result<EditJob> {
        self.update(id, |j| {
            let restart = j.recovered && j.status == JobStatus::Running && next == JobStatus::Running;
            if !(j.status.can_become(next) || restart) {
                return Err(Error::Validation(format!(
                    "job `{id}` cannot move from {:?} to {next:?}",
                    j.status
                )));
            }
            if next == JobStatus::Done && result.is_none() {
                return Err(Error::Validation(format!("job `{id}` is done without a result")));
            }
            j.status = next;
            j.result = result;
            j.error = error;
            Ok(())
        })
    }

    pub fn list(&self) -> Vec<EditJob> {
        let mut v: Vec<EditJob> = self.jobs.lock().expect("job store").values().cloned().collect();
        v.sort_by(|a, b| a.created_ms.cmp(&b.created_ms).then_with(|| a.id.cmp(&b.id)));
        v
    }
}
