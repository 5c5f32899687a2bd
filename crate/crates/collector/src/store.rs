//! Durable storage: an append-only JSONL event log plus an optional
//! snapshot of the folded state.
//!
//! Every event is written and synced before the request that produced it is
//! acknowledged. The snapshot records how many log events it covers; replay
//! loads it and applies the remaining tail. A torn final line (a crash
//! mid-append, never acknowledged) is discarded on open; a malformed line
//! anywhere else is corruption and refuses to open.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CollectorError, Result};

pub const LOG_FILE: &str = "events.jsonl";
pub const SNAPSHOT_FILE: &str = "snapshot.json";

pub struct EventLog {
    path: PathBuf,
    file: File,
}

#[derive(Serialize, Deserialize)]
pub struct Snapshot<S> {
    pub events: u64,
    pub state: S,
}

impl EventLog {
    /// Opens (creating if needed) the log in `dir` and returns every intact
    /// event in order.
    pub fn open<E: DeserializeOwned>(dir: &Path) -> Result<(EventLog, Vec<E>)> {
        std::fs::create_dir_all(dir).map_err(CollectorError::storage)?;
        let path = dir.join(LOG_FILE);
        let mut events = Vec::new();
        if path.exists() {
            let raw = std::fs::read(&path).map_err(CollectorError::storage)?;
            let mut good_len = 0usize;
            let mut offset = 0usize;
            let mut reader = BufReader::new(&raw[..]);
            let mut line = Vec::new();
            let mut lineno = 0usize;
            loop {
                line.clear();
                let n = reader.read_until(b'\n', &mut line).map_err(CollectorError::storage)?;
                if n == 0 {
                    break;
                }
                lineno += 1;
                offset += n;
                let complete = line.last() == Some(&b'\n');
                match serde_json::from_slice::<E>(&line) {
                    Ok(e) if complete => {
                        events.push(e);
                        good_len = offset;
                    }
                    // only the final line can lack its newline
                    _ if !complete => break,
                    Err(e) => {
                        return Err(CollectorError::Storage(format!(
                            "{} line {lineno} is corrupt: {e}",
                            path.display()
                        )))
                    }
                    Ok(_) => unreachable!(),
                }
            }
            if good_len < raw.len() {
                let f = OpenOptions::new().write(true).open(&path).map_err(CollectorError::storage)?;
                f.set_len(good_len as u64).map_err(CollectorError::storage)?;
                f.sync_all().map_err(CollectorError::storage)?;
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(&path).map_err(CollectorError::storage)?;
        Ok((EventLog { path, file }, events))
    }

    pub fn append<E: Serialize>(&mut self, event: &E) -> Result<()> {
        let mut line = serde_json::to_vec(event).map_err(CollectorError::storage)?;
        line.push(b'\n');
        self.file.write_all(&line).map_err(CollectorError::storage)?;
        self.file.sync_data().map_err(CollectorError::storage)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

pub fn read_snapshot<S: DeserializeOwned>(dir: &Path) -> Result<Option<Snapshot<S>>> {
    let path = dir.join(SNAPSHOT_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let raw = std::fs::read(&path).map_err(CollectorError::storage)?;
    serde_json::from_slice(&raw)
        .map(Some)
        .map_err(|e| CollectorError::Storage(format!("{}: {e}", path.display())))
}

/// Writes the snapshot atomically via a temporary file and rename.
pub fn write_snapshot<S: Serialize>(dir: &Path, snapshot: &Snapshot<S>) -> Result<()> {
    let tmp = dir.join(format!("{SNAPSHOT_FILE}.tmp"));
    let bytes = serde_json::to_vec(snapshot).map_err(CollectorError::storage)?;
    let mut f = File::create(&tmp).map_err(CollectorError::storage)?;
    f.write_all(&bytes).map_err(CollectorError::storage)?;
    f.sync_all().map_err(CollectorError::storage)?;
    std::fs::rename(&tmp, dir.join(SNAPSHOT_FILE)).map_err(CollectorError::storage)
}
