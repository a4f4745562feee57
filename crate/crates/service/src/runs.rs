//! Append-only JSON-lines log of served predictions.

use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::api::{CheckpointHashes, GuidedPredictRequest, PredictResponse, SCHEMA_VERSION};
use crate::error::ServiceError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema_version: String,
    /// Milliseconds since the Unix epoch.
    pub timestamp_ms: u64,
    pub endpoint: String,
    /// The request as served, with the seed filled in.
    pub request: GuidedPredictRequest,
    pub response: PredictResponse,
    pub checkpoints: CheckpointHashes,
}

impl RunRecord {
    pub fn new(endpoint: &str, request: GuidedPredictRequest, response: PredictResponse) -> Self {
        let timestamp_ms = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0);
        Self {
            schema_version: SCHEMA_VERSION.into(),
            timestamp_ms,
            endpoint: endpoint.into(),
            checkpoints: response.checkpoints.clone(),
            request,
            response,
        }
    }
}

pub struct RunLog {
    path: PathBuf,
    lock: Mutex<()>,
}

impl RunLog {
    pub const FILE_NAME: &'static str = "runs.jsonl";

    pub fn open(dir: &Path) -> Result<Self, ServiceError> {
        std::fs::create_dir_all(dir).map_err(|e| ServiceError::RunLog(format!("{}: {e}", dir.display())))?;
        Ok(Self {
            path: dir.join(Self::FILE_NAME),
            lock: Mutex::new(()),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Appends one record as a single line. On a failed write the file is cut
    /// back to its previous length so earlier records stay intact.
    pub fn append(&self, record: &RunRecord) -> Result<(), ServiceError> {
        let mut line = serde_json::to_vec(record).map_err(|e| ServiceError::RunLog(e.to_string()))?;
        line.push(b'\n');
        let _guard = self.lock.lock().unwrap_or_else(|p| p.into_inner());
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| ServiceError::RunLog(format!("{}: {e}", self.path.display())))?;
        let before = f.metadata().map(|m| m.len()).unwrap_or(0);
        if let Err(e) = f.write_all(&line).and_then(|_| f.flush()) {
            let _ = f.set_len(before);
            return Err(ServiceError::RunLog(format!("{}: {e}", self.path.display())));
        }
        Ok(())
    }
}

/// Reads every record; a malformed line is an error naming its line number.
pub fn read_runs(path: &Path) -> Result<Vec<RunRecord>, ServiceError> {
    let f = std::fs::File::open(path).map_err(|e| ServiceError::RunLog(format!("{}: {e}", path.display())))?;
    BufReader::new(f)
        .lines()
        .enumerate()
        .map(|(n, line)| {
            let line = line.map_err(|e| ServiceError::RunLog(e.to_string()))?;
            serde_json::from_str(&line).map_err(|e| ServiceError::RunLog(format!("line {}: {e}", n + 1)))
        })
        .collect()
}
