//! Append-only JSON-lines record log with a version header.
//!
//! The first line of every journal is `{"journal": <name>, "version": <n>}`;
//! each following line is one serialized record. Replay stops at the first
//! torn (unparseable) trailing line, which is what a crash mid-append leaves.

use std::fs::{File, OpenOptions};
use std::io::{BufReader, Read, Write};
use std::marker::PhantomData;
use std::path::{Path, PathBuf};

use parking_lot::Mutex;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum JournalError {
    #[error("journal io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("journal {path} has header {found:?}, expected {expected:?}")]
    Header {
        path: PathBuf,
        found: String,
        expected: String,
    },
    #[error("journal record encoding failed: {0}")]
    Encode(#[from] serde_json::Error),
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct Header {
    journal: String,
    version: u32,
}

pub struct Journal<R> {
    path: PathBuf,
    file: Mutex<File>,
    _record: PhantomData<fn(R)>,
}

impl<R: Serialize + DeserializeOwned> Journal<R> {
    /// Opens (or creates) the journal and returns it with every record
    /// already persisted, in append order.
    pub fn open(path: impl AsRef<Path>, name: &str, version: u32) -> Result<(Self, Vec<R>), JournalError> {
        let path = path.as_ref().to_path_buf();
        let io = |source| JournalError::Io {
            path: path.clone(),
            source,
        };
        let expected = Header {
            journal: name.to_owned(),
            version,
        };
        let mut records = Vec::new();
        let exists = path.exists() && std::fs::metadata(&path).map_err(io)?.len() > 0;
        let mut file = OpenOptions::new()
            .create(true)
            .read(true)
            .append(true)
            .open(&path)
            .map_err(io)?;
        if exists {
            let mut text = String::new();
            BufReader::new(&file).read_to_string(&mut text).map_err(io)?;
            let mut lines = text.split_inclusive('\n');
            let first = lines.next().unwrap_or_default();
            match serde_json::from_str::<Header>(first.trim_end()) {
                Ok(h) if h == expected => {}
                _ => {
                    return Err(JournalError::Header {
                        path,
                        found: first.trim_end().to_owned(),
                        expected: serde_json::to_string(&expected)?,
                    })
                }
            }
            let mut valid_len = first.len();
            for line in lines {
                if !line.ends_with('\n') {
                    break;
                }
                match serde_json::from_str(line.trim_end()) {
                    Ok(record) => records.push(record),
                    Err(_) => break,
                }
                valid_len += line.len();
            }
            if valid_len < text.len() {
                file.set_len(valid_len as u64).map_err(io)?;
            }
        } else {
            let mut line = serde_json::to_vec(&expected)?;
            line.push(b'\n');
            file.write_all(&line).map_err(io)?;
            file.sync_data().map_err(io)?;
        }
        Ok((
            Self {
                path,
                file: Mutex::new(file),
                _record: PhantomData,
            },
            records,
        ))
    }

    pub fn append(&self, record: &R) -> Result<(), JournalError> {
        let mut line = serde_json::to_vec(record)?;
        line.push(b'\n');
        let mut file = self.file.lock();
        file.write_all(&line)
            .and_then(|_| file.sync_data())
            .map_err(|source| JournalError::Io {
                path: self.path.clone(),
                source,
            })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}
