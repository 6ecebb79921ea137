//! ZIP reading and writing with path-safety and size guards.

use std::collections::BTreeMap;
use std::io::{Cursor, Read, Write};

use thiserror::Error;
use zip::write::SimpleFileOptions;

/// Largest member accepted from any archive.
pub const MAX_MEMBER_BYTES: u64 = 2 * 1024 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("not a readable zip archive: {0}")]
    NotZip(String),
    #[error("unsafe member path {0:?}")]
    UnsafePath(String),
    #[error("member {name:?} exceeds {limit} bytes")]
    TooLarge { name: String, limit: u64 },
    #[error("duplicate member {0:?}")]
    Duplicate(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Member {
    pub data: Vec<u8>,
    pub executable: bool,
}

pub type Members = BTreeMap<String, Member>;

/// Rejects absolute paths, drive prefixes, backslashes and `..` components.
pub fn check_member_path(name: &str) -> Result<(), ArchiveError> {
    let unsafe_path = name.is_empty()
        || name.starts_with('/')
        || name.contains('\\')
        || name.contains('\0')
        || name.as_bytes().get(1) == Some(&b':')
        || name.split('/').any(|part| part == "..");
    if unsafe_path {
        Err(ArchiveError::UnsafePath(name.to_owned()))
    } else {
        Ok(())
    }
}

/// Normalizes `./a//b` to `a/b`. Assumes [`check_member_path`] passed.
pub fn normalize_member_path(name: &str) -> String {
    name.split('/')
        .filter(|p| !p.is_empty() && *p != ".")
        .collect::<Vec<_>>()
        .join("/")
}

/// Reads every file member. `limit_for` gives the byte ceiling per member name.
pub fn read_zip(bytes: &[u8], limit_for: impl Fn(&str) -> u64) -> Result<Members, ArchiveError> {
    let mut archive =
        zip::ZipArchive::new(Cursor::new(bytes)).map_err(|e| ArchiveError::NotZip(e.to_string()))?;
    let mut members = Members::new();
    for i in 0..archive.len() {
        let mut entry = archive
            .by_index(i)
            .map_err(|e| ArchiveError::NotZip(e.to_string()))?;
        let raw = entry.name().to_owned();
        check_member_path(&raw)?;
        if entry.is_dir() {
            continue;
        }
        let name = normalize_member_path(&raw);
        if name.is_empty() {
            return Err(ArchiveError::UnsafePath(raw));
        }
        let limit = limit_for(&name);
        if entry.size() > limit {
            return Err(ArchiveError::TooLarge { name, limit });
        }
        let executable = entry.unix_mode().is_some_and(|m| m & 0o111 != 0);
        let mut data = Vec::with_capacity(entry.size().min(1 << 20) as usize);
        (&mut entry)
            .take(limit.saturating_add(1))
            .read_to_end(&mut data)
            .map_err(|e| ArchiveError::NotZip(e.to_string()))?;
        if data.len() as u64 > limit {
            return Err(ArchiveError::TooLarge { name, limit });
        }
        if members.insert(name.clone(), Member { data, executable }).is_some() {
            return Err(ArchiveError::Duplicate(name));
        }
    }
    Ok(members)
}

/// Writes members in name order with fixed timestamps, so equal inputs give
/// byte-identical archives.
pub fn write_zip<'a>(members: impl IntoIterator<Item = (&'a str, &'a Member)>) -> Vec<u8> {
    let mut sorted: Vec<_> = members.into_iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(b.0));
    let mut writer = zip::ZipWriter::new(Cursor::new(Vec::new()));
    for (name, member) in sorted {
        let mode = if member.executable { 0o755 } else { 0o644 };
        let options = SimpleFileOptions::default()
            .compression_method(zip::CompressionMethod::Deflated)
            .last_modified_time(zip::DateTime::default())
            .unix_permissions(mode);
        writer
            .start_file(name, options)
            .and_then(|_| writer.write_all(&member.data).map_err(Into::into))
            .expect("writing to an in-memory zip cannot fail");
    }
    writer
        .finish()
        .expect("finishing an in-memory zip cannot fail")
        .into_inner()
}

/// Convenience for building archives from `(path, bytes, executable)` triples.
pub fn zip_files<'a>(files: impl IntoIterator<Item = (&'a str, &'a [u8], bool)>) -> Vec<u8> {
    let members: Vec<(String, Member)> = files
        .into_iter()
        .map(|(name, data, executable)| {
            (
                name.to_owned(),
                Member {
                    data: data.to_vec(),
                    executable,
                },
            )
        })
        .collect();
    write_zip(members.iter().map(|(n, m)| (n.as_str(), m)))
}
