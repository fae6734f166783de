//! Deterministic named-array container.
//!
//! Layout: magic `NTF1`, u32 metadata length, metadata JSON (UTF-8), u32
//! entry count, then per entry: u32 name length, name bytes, u64 element
//! count, little-endian f64 data. Entries are sorted by name before writing,
//! so equal state always produces byte-identical files.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"NTF1";

#[derive(Debug, Clone, Default)]
pub struct TensorFile {
    pub metadata: serde_json::Value,
    pub arrays: BTreeMap<String, Vec<f64>>,
}

impl TensorFile {
    pub fn new(metadata: serde_json::Value) -> Self {
        TensorFile {
            metadata,
            arrays: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, data: Vec<f64>) {
        self.arrays.insert(name.into(), data);
    }

    pub fn get(&self, name: &str, path_for_err: &str) -> Result<&Vec<f64>> {
        self.arrays.get(name).ok_or_else(|| Error::FileFormat {
            path: path_for_err.to_string(),
            detail: format!("missing array {name:?}"),
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.metadata)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, data) in &self.arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(data.len() as u64).to_le_bytes());
            for &v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8], path_for_err: &str) -> Result<Self> {
        fn fail(path: &str, detail: &str) -> Error {
            Error::FileFormat {
                path: path.to_string(),
                detail: detail.to_string(),
            }
        }
        fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize, path: &str) -> Result<&'a [u8]> {
            if *pos + n > bytes.len() {
                return Err(fail(path, "truncated file"));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        }
        let p = path_for_err;
        let mut pos = 0usize;
        if take(bytes, &mut pos, 4, p)? != MAGIC {
            return Err(fail(p, "bad magic"));
        }
        let meta_len = u32::from_le_bytes(take(bytes, &mut pos, 4, p)?.try_into().unwrap()) as usize;
        let metadata: serde_json::Value = serde_json::from_slice(take(bytes, &mut pos, meta_len, p)?)?;
        let n_entries = u32::from_le_bytes(take(bytes, &mut pos, 4, p)?.try_into().unwrap()) as usize;
        let mut arrays = BTreeMap::new();
        for _ in 0..n_entries {
            let name_len =
                u32::from_le_bytes(take(bytes, &mut pos, 4, p)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(take(bytes, &mut pos, name_len, p)?)
                .map_err(|_| fail(p, "non-utf8 array name"))?
                .to_string();
            let count =
                u64::from_le_bytes(take(bytes, &mut pos, 8, p)?.try_into().unwrap()) as usize;
            let raw = take(bytes, &mut pos, count * 8, p)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            arrays.insert(name, data);
        }
        Ok(TensorFile { metadata, arrays })
    }

    pub fn read_from(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_byte_determinism() {
        let mut tf = TensorFile::new(serde_json::json!({"rank": 8, "alpha": 16.0}));
        tf.insert("layer.1.attn_q.B", vec![0.0; 6]);
        tf.insert("layer.0.attn_q.A", vec![1.5, -2.25, 3.0e-7]);
        let a = tf.to_bytes().unwrap();
        let b = tf.to_bytes().unwrap();
        assert_eq!(a, b);

        let back = TensorFile::from_bytes(&a, "mem").unwrap();
        assert_eq!(back.metadata, tf.metadata);
        assert_eq!(back.arrays, tf.arrays);

        // Insertion order must not leak into the bytes.
        let mut tf2 = TensorFile::new(serde_json::json!({"rank": 8, "alpha": 16.0}));
        tf2.insert("layer.0.attn_q.A", vec![1.5, -2.25, 3.0e-7]);
        tf2.insert("layer.1.attn_q.B", vec![0.0; 6]);
        assert_eq!(tf2.to_bytes().unwrap(), a);
    }

    #[test]
    fn rejects_garbage() {
        assert!(TensorFile::from_bytes(b"nope", "mem").is_err());
        assert!(TensorFile::from_bytes(b"NTF1\xff\xff\xff\xff", "mem").is_err());
    }
}
