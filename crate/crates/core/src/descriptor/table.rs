use std::fs;
use std::path::Path;

use super::GlobalDescriptor;
use crate::codec::{ByteReader, ByteWriter};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SEDDESC1";

/// Named global descriptors of one fixed dimension.
///
/// Lets descriptors computed by an external backend be fed to clustering and
/// gating. File layout (little-endian): magic `SEDDESC1`, u64 count, u64 dim,
/// then per entry a u32-length-prefixed UTF-8 key and `dim` f64 values.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct DescriptorTable {
    pub keys: Vec<String>,
    pub descriptors: Vec<GlobalDescriptor>,
}

impl DescriptorTable {
    pub fn push(&mut self, key: impl Into<String>, d: GlobalDescriptor) -> Result<()> {
        if let Some(first) = self.descriptors.first() {
            if first.dim() != d.dim() {
                return Err(Error::dims(first.dim(), d.dim()));
            }
        }
        self.keys.push(key.into());
        self.descriptors.push(d);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.descriptors.first().map_or(0, GlobalDescriptor::dim)
    }

    pub fn get(&self, key: &str) -> Option<&GlobalDescriptor> {
        self.keys.iter().position(|k| k == key).map(|i| &self.descriptors[i])
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(MAGIC);
        w.u64(self.keys.len() as u64);
        w.u64(self.dim() as u64);
        for (k, d) in self.keys.iter().zip(&self.descriptors) {
            w.str(k);
            for &v in &d.0 {
                w.f64(v);
            }
        }
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "descriptor table");
        if r.take(8)? != MAGIC {
            return Err(Error::Container("not a descriptor table".into()));
        }
        let n = r.u64()? as usize;
        let dim = r.u64()? as usize;
        let mut t = DescriptorTable::default();
        for _ in 0..n {
            let k = r.str()?;
            let v = (0..dim).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            t.push(k, GlobalDescriptor(v))?;
        }
        r.finish()?;
        Ok(t)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.is_file() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}
