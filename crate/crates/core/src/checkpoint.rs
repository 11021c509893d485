//! Checkpoint container: a text manifest followed by named binary sections,
//! each holding one or more serialized tensors.

use std::collections::BTreeMap;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

pub const MAGIC: &[u8; 8] = b"DCKPT001";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint has no {0:?}")]
    Missing(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub manifest: BTreeMap<String, String>,
    pub sections: BTreeMap<String, Vec<u8>>,
}

fn read_err(e: io::Error) -> CheckpointError {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        CheckpointError::Truncated
    } else {
        CheckpointError::Malformed(e.to_string())
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0; 4];
    r.read_exact(&mut b).map_err(read_err)?;
    Ok(u32::from_le_bytes(b))
}

fn read_string<R: Read>(r: &mut R, len: usize) -> Result<String> {
    let mut b = vec![0; len];
    r.read_exact(&mut b).map_err(read_err)?;
    String::from_utf8(b).map_err(|e| CheckpointError::Malformed(e.to_string()))
}

impl Checkpoint {
    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.manifest.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.manifest
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| CheckpointError::Missing(key.to_string()))
    }

    pub fn put_tensor(&mut self, name: &str, tensor: &Tensor) {
        self.sections.insert(name.to_string(), tensor.to_bytes());
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        let bytes = self.section(name)?;
        Tensor::read_from(bytes).map_err(|e| match e {
            TensorError::Io(ref io) if io.kind() == io::ErrorKind::UnexpectedEof => CheckpointError::Truncated,
            e => CheckpointError::Tensor(e),
        })
    }

    pub fn section(&self, name: &str) -> Result<&[u8]> {
        self.sections
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| CheckpointError::Missing(name.to_string()))
    }

    /// All tensor sections whose names start with `prefix`, keyed by the
    /// remainder of the name.
    pub fn tensors_with_prefix(&self, prefix: &str) -> Result<BTreeMap<String, Tensor>> {
        self.sections
            .keys()
            .filter_map(|k| k.strip_prefix(prefix).map(|rest| (k, rest)))
            .map(|(k, rest)| Ok((rest.to_string(), self.tensor(k)?)))
            .collect()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> io::Result<()> {
        let manifest: String = self.manifest.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
        w.write_all(MAGIC)?;
        w.write_all(&(manifest.len() as u32).to_le_bytes())?;
        w.write_all(manifest.as_bytes())?;
        w.write_all(&(self.sections.len() as u32).to_le_bytes())?;
        for (name, bytes) in &self.sections {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(bytes.len() as u64).to_le_bytes())?;
            w.write_all(bytes)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Checkpoint> {
        let mut magic = [0; 8];
        r.read_exact(&mut magic).map_err(read_err)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let len = read_u32(&mut r)? as usize;
        let text = read_string(&mut r, len)?;
        let mut manifest = BTreeMap::new();
        for line in text.lines() {
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| CheckpointError::Malformed(format!("manifest line {line:?}")))?;
            manifest.insert(k.to_string(), v.to_string());
        }
        let count = read_u32(&mut r)?;
        let mut sections = BTreeMap::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let name = read_string(&mut r, name_len)?;
            let mut b = [0; 8];
            r.read_exact(&mut b).map_err(read_err)?;
            let len = u64::from_le_bytes(b) as usize;
            let mut bytes = Vec::new();
            r.by_ref().take(len as u64).read_to_end(&mut bytes).map_err(read_err)?;
            if bytes.len() != len {
                return Err(CheckpointError::Truncated);
            }
            sections.insert(name, bytes);
        }
        Ok(Checkpoint { manifest, sections })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let io_err = |source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut w = io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
        self.write_to(&mut w).map_err(io_err)?;
        w.flush().map_err(io_err)
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let file = std::fs::File::open(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Checkpoint::read_from(io::BufReader::new(file))
    }
}
