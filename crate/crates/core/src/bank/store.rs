use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Where slice files live. Names are flat file names such as `n000012.pqkv`.
pub trait SliceStore: Send + Sync {
    fn name(&self) -> &str;
    fn put(&mut self, file: &str, bytes: &[u8]) -> Result<()>;
    fn get(&self, file: &str) -> Result<Vec<u8>>;
    fn remove(&mut self, file: &str) -> Result<()>;
    fn files(&self) -> Result<Vec<String>>;
}

#[derive(Debug, Default, Clone)]
pub struct MemoryStore {
    files: BTreeMap<String, Vec<u8>>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }
}

impl SliceStore for MemoryStore {
    fn name(&self) -> &str {
        "memory"
    }

    fn put(&mut self, file: &str, bytes: &[u8]) -> Result<()> {
        self.files.insert(file.to_string(), bytes.to_vec());
        Ok(())
    }

    fn get(&self, file: &str) -> Result<Vec<u8>> {
        self.files.get(file).cloned().ok_or_else(|| Error::CorruptSlice {
            name: file.to_string(),
            reason: "missing".into(),
        })
    }

    fn remove(&mut self, file: &str) -> Result<()> {
        self.files.remove(file);
        Ok(())
    }

    fn files(&self) -> Result<Vec<String>> {
        Ok(self.files.keys().cloned().collect())
    }
}

/// One file per slice under a directory.
#[derive(Debug, Clone)]
pub struct DirStore {
    dir: PathBuf,
}

impl DirStore {
    pub fn open(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(DirStore { dir: dir.to_path_buf() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
}

impl SliceStore for DirStore {
    fn name(&self) -> &str {
        "dir"
    }

    fn put(&mut self, file: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(file);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
    }

    fn get(&self, file: &str) -> Result<Vec<u8>> {
        let path = self.dir.join(file);
        fs::read(&path).map_err(|e| Error::io(&path, e))
    }

    fn remove(&mut self, file: &str) -> Result<()> {
        let path = self.dir.join(file);
        match fs::remove_file(&path) {
            Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(Error::io(&path, e)),
            _ => Ok(()),
        }
    }

    fn files(&self) -> Result<Vec<String>> {
        let mut out = Vec::new();
        for entry in fs::read_dir(&self.dir).map_err(|e| Error::io(&self.dir, e))? {
            let entry = entry.map_err(|e| Error::io(&self.dir, e))?;
            if let Some(name) = entry.file_name().to_str() {
                out.push(name.to_string());
            }
        }
        out.sort();
        Ok(out)
    }
}
