//! On-disk record of calibration sessions for continuous calibration.
//!
//! A store directory holds `sessions.jsonl`, one session per line in commit
//! order, and `current.json`, the fused state after the last commit. Commits
//! take an exclusive lock on `store.lock`, so concurrent writers serialize;
//! `current.json` is replaced atomically, so readers always see a complete
//! state.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::io::{load_json, save_json};
use crate::pipeline::{update_continuous, CalibrationSession};

/// Environment variable naming the default store directory.
pub const STORE_DIR_ENV: &str = "TRAJCAL_STORE_DIR";

const HISTORY: &str = "sessions.jsonl";
const CURRENT: &str = "current.json";
const LOCK: &str = "store.lock";

#[derive(Clone, Debug)]
pub struct SessionStore {
    dir: PathBuf,
}

impl SessionStore {
    /// Opens `dir`, creating it when missing.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(SessionStore { dir })
    }

    /// `$TRAJCAL_STORE_DIR`, or `trajcal-store` in the working directory.
    pub fn default_dir() -> PathBuf {
        std::env::var_os(STORE_DIR_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("trajcal-store"))
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// The fused state, if any session has been committed.
    pub fn current(&self) -> Result<Option<CalibrationSession>> {
        let path = self.dir.join(CURRENT);
        if !path.exists() {
            return Ok(None);
        }
        load_json(path).map(Some)
    }

    /// Every committed session, oldest first.
    pub fn history(&self) -> Result<Vec<CalibrationSession>> {
        let path = self.dir.join(HISTORY);
        if !path.exists() {
            return Ok(Vec::new());
        }
        let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut out = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })?);
        }
        Ok(out)
    }

    /// Appends `session` to the history and fuses it into the current state.
    /// Returns the new fused state.
    pub fn commit(&self, session: &CalibrationSession) -> Result<CalibrationSession> {
        let lock_path = self.dir.join(LOCK);
        let lock = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&lock_path)
            .map_err(|e| Error::io(&lock_path, e))?;
        lock.lock().map_err(|e| Error::io(&lock_path, e))?;

        let history = self.dir.join(HISTORY);
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&history)
            .map_err(|e| Error::io(&history, e))?;
        let mut line = serde_json::to_string(session)?;
        line.push('\n');
        f.write_all(line.as_bytes()).map_err(|e| Error::io(&history, e))?;
        f.sync_all().map_err(|e| Error::io(&history, e))?;

        let fused = match self.current()? {
            None => session.clone(),
            Some(prev) => match update_continuous(&prev, session) {
                Ok(f) => f,
                Err(Error::BothZeroScore) => prev,
                Err(e) => return Err(e),
            },
        };
        let tmp = self.dir.join(format!("{CURRENT}.tmp"));
        save_json(&fused, &tmp)?;
        let current = self.dir.join(CURRENT);
        std::fs::rename(&tmp, &current).map_err(|e| Error::io(&current, e))?;
        lock.unlock().map_err(|e| Error::io(&lock_path, e))?;
        Ok(fused)
    }
}
