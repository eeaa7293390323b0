//! File-system capability confined to a station's `fs_root`.
//!
//! Paths are interpreted relative to the root. Absolute paths and `..`
//! escapes are rejected lexically; symlinks are resolved and the result must
//! still lie under the canonical root.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::{Component, Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FsError {
    #[error("path {0:?} escapes the sandbox")]
    SandboxViolation(String),
    #[error("{0:?} not found")]
    NotFound(String),
    #[error("{0}")]
    Io(String),
}

impl FsError {
    pub fn code(&self) -> &'static str {
        match self {
            FsError::SandboxViolation(_) => "SANDBOX_VIOLATION",
            FsError::NotFound(_) => "NOT_FOUND",
            FsError::Io(_) => "IO_ERROR",
        }
    }

    fn io(path: &str, e: io::Error) -> Self {
        if e.kind() == io::ErrorKind::NotFound {
            FsError::NotFound(path.to_string())
        } else {
            FsError::Io(format!("{path}: {e}"))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntryKind {
    File,
    Dir,
    Other,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, serde::Deserialize)]
pub struct EntryInfo {
    pub name: String,
    pub kind: EntryKind,
    pub size: u64,
}

#[derive(Debug, Clone)]
pub struct Sandbox {
    root: PathBuf,
}

impl Sandbox {
    pub fn new(root: impl AsRef<Path>) -> io::Result<Self> {
        let root = fs::canonicalize(root)?;
        if !root.is_dir() {
            return Err(io::Error::new(io::ErrorKind::InvalidInput, "fs_root is not a directory"));
        }
        Ok(Sandbox { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Maps a client path onto the host, refusing anything outside the root.
    /// The target itself need not exist, but its parent must.
    pub fn resolve(&self, rel: &str) -> Result<PathBuf, FsError> {
        let violation = || FsError::SandboxViolation(rel.to_string());
        let mut parts: Vec<&std::ffi::OsStr> = Vec::new();
        for comp in Path::new(rel).components() {
            match comp {
                Component::Normal(p) => parts.push(p),
                Component::CurDir => {}
                Component::ParentDir => {
                    parts.pop().ok_or_else(violation)?;
                }
                Component::RootDir | Component::Prefix(_) => return Err(violation()),
            }
        }
        let lexical: PathBuf = parts.iter().fold(self.root.clone(), |acc, p| acc.join(p));

        let resolved = match fs::canonicalize(&lexical) {
            Ok(p) => p,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                // A dangling symlink must not be created through.
                if fs::symlink_metadata(&lexical).is_ok() {
                    return Err(violation());
                }
                let name = lexical.file_name().ok_or_else(violation)?;
                let parent = lexical.parent().ok_or_else(violation)?;
                let parent = fs::canonicalize(parent).map_err(|e| FsError::io(rel, e))?;
                parent.join(name)
            }
            Err(e) => return Err(FsError::io(rel, e)),
        };
        if !resolved.starts_with(&self.root) {
            return Err(violation());
        }
        Ok(resolved)
    }

    /// Root-relative display form of a resolved path, `/`-separated.
    pub fn relative(&self, abs: &Path) -> Option<String> {
        let rel = abs.strip_prefix(&self.root).ok()?;
        let parts: Vec<String> = rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect();
        Some(parts.join("/"))
    }

    pub fn list(&self, rel: &str) -> Result<Vec<EntryInfo>, FsError> {
        let dir = self.resolve(rel)?;
        let mut out = Vec::new();
        for entry in fs::read_dir(&dir).map_err(|e| FsError::io(rel, e))? {
            let entry = entry.map_err(|e| FsError::io(rel, e))?;
            let meta = entry.metadata().map_err(|e| FsError::io(rel, e))?;
            let kind = if meta.is_file() {
                EntryKind::File
            } else if meta.is_dir() {
                EntryKind::Dir
            } else {
                EntryKind::Other
            };
            out.push(EntryInfo { name: entry.file_name().to_string_lossy().into_owned(), kind, size: meta.len() });
        }
        out.sort_by(|a, b| a.name.cmp(&b.name));
        Ok(out)
    }

    pub fn stat(&self, rel: &str) -> Result<EntryInfo, FsError> {
        let path = self.resolve(rel)?;
        let meta = fs::metadata(&path).map_err(|e| FsError::io(rel, e))?;
        let kind = if meta.is_file() {
            EntryKind::File
        } else if meta.is_dir() {
            EntryKind::Dir
        } else {
            EntryKind::Other
        };
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        Ok(EntryInfo { name, kind, size: meta.len() })
    }

    /// Reads up to `len` bytes at `offset`; returns the bytes and file size.
    pub fn read_range(&self, rel: &str, offset: u64, len: usize) -> Result<(Vec<u8>, u64), FsError> {
        let path = self.resolve(rel)?;
        let mut file = File::open(&path).map_err(|e| FsError::io(rel, e))?;
        let size = file.metadata().map_err(|e| FsError::io(rel, e))?.len();
        if !file.metadata().map(|m| m.is_file()).unwrap_or(false) {
            return Err(FsError::Io(format!("{rel}: not a regular file")));
        }
        file.seek(SeekFrom::Start(offset)).map_err(|e| FsError::io(rel, e))?;
        let mut buf = Vec::with_capacity(len.min(size.saturating_sub(offset) as usize));
        file.take(len as u64).read_to_end(&mut buf).map_err(|e| FsError::io(rel, e))?;
        Ok((buf, size))
    }

    /// Writes `data` at `offset`. Offset 0 creates or truncates; any other
    /// offset must equal the current size (chunks are appended in order).
    pub fn write_at(&self, rel: &str, offset: u64, data: &[u8]) -> Result<u64, FsError> {
        let path = self.resolve(rel)?;
        let mut file = if offset == 0 {
            File::create(&path).map_err(|e| FsError::io(rel, e))?
        } else {
            let f = OpenOptions::new().append(true).open(&path).map_err(|e| FsError::io(rel, e))?;
            let size = f.metadata().map_err(|e| FsError::io(rel, e))?.len();
            if size != offset {
                return Err(FsError::Io(format!("{rel}: write offset {offset} but file has {size} bytes")));
            }
            f
        };
        file.write_all(data).map_err(|e| FsError::io(rel, e))?;
        Ok(offset + data.len() as u64)
    }

    /// Regular files under `rel`, recursively, as (root-relative path, host
    /// path). Symlinks are not followed.
    pub fn walk_files(&self, rel: &str) -> Result<Vec<(String, PathBuf)>, FsError> {
        let start = self.resolve(rel)?;
        let mut out = Vec::new();
        for entry in walkdir::WalkDir::new(&start).follow_links(false).sort_by_file_name() {
            let Ok(entry) = entry else { continue };
            if !entry.file_type().is_file() {
                continue;
            }
            if let Some(name) = self.relative(entry.path()) {
                out.push((name, entry.path().to_path_buf()));
            }
        }
        Ok(out)
    }
}
