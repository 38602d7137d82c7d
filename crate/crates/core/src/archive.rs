//! Flat binary container for named `f64` arrays, used for checkpoints and for
//! importing pretrained encoder weights.
//!
//! Layout: the 8 magic bytes `MUSTANW1`, a little-endian `u64` header length,
//! the UTF-8 JSON header, then every array's elements as little-endian `f64`
//! in header order. Each header record gives the array's element offset into
//! that data block.

use std::fs;
use std::io::Write;
use std::path::Path;

use mustan_autograd::{ParamKind, Tensor};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"MUSTANW1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArrayKind {
    Trainable,
    Buffer,
}

impl From<ParamKind> for ArrayKind {
    fn from(k: ParamKind) -> Self {
        match k {
            ParamKind::Trainable => ArrayKind::Trainable,
            ParamKind::Buffer => ArrayKind::Buffer,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayRecord {
    pub name: String,
    pub kind: ArrayKind,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchiveHeader {
    pub format: String,
    pub format_version: u32,
    pub meta: serde_json::Value,
    pub arrays: Vec<ArrayRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Archive {
    pub header: ArchiveHeader,
    pub tensors: Vec<Tensor>,
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Writes the archive to a sibling temporary file, then renames it over
/// `path`, so a failed write never leaves a truncated archive behind.
pub fn write_archive(
    path: &Path,
    format: &str,
    format_version: u32,
    meta: serde_json::Value,
    arrays: &[(&str, ArrayKind, &Tensor)],
) -> Result<()> {
    let mut records = Vec::with_capacity(arrays.len());
    let mut offset = 0;
    for (name, kind, t) in arrays {
        records.push(ArrayRecord {
            name: name.to_string(),
            kind: kind.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.len();
    }
    let header = ArchiveHeader {
        format: format.to_string(),
        format_version,
        meta,
        arrays: records,
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(16 + json.len() + 8 * offset);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, _, t) in arrays {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let tmp = path.with_extension("partial");
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub fn read_archive(path: &Path) -> Result<Archive> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(corrupt(path, "not a weight archive (bad magic)"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let data_start = 16usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| corrupt(path, "truncated header"))?;
    let header: ArchiveHeader =
        serde_json::from_slice(&bytes[16..data_start]).map_err(|e| corrupt(path, format!("bad header: {e}")))?;
    let data = &bytes[data_start..];
    if data.len() % 8 != 0 {
        return Err(corrupt(path, "data block is not a whole number of f64 values"));
    }
    let n_values = data.len() / 8;
    let mut tensors = Vec::with_capacity(header.arrays.len());
    let mut expected_offset = 0;
    for rec in &header.arrays {
        let len: usize = rec.shape.iter().product();
        if rec.offset != expected_offset {
            return Err(corrupt(path, format!("array {} has offset {}, expected {expected_offset}", rec.name, rec.offset)));
        }
        let end = rec.offset + len;
        if end > n_values {
            return Err(corrupt(path, format!("truncated: array {} ends past the data block", rec.name)));
        }
        let values = data[8 * rec.offset..8 * end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push(Tensor::from_vec(&rec.shape, values)?);
        expected_offset = end;
    }
    if expected_offset != n_values {
        return Err(corrupt(path, format!("{} trailing values after the last array", n_values - expected_offset)));
    }
    Ok(Archive { header, tensors })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(dir: &Path) -> std::path::PathBuf {
        let path = dir.join("a.bin");
        let a = Tensor::from_vec(&[2, 2], vec![1.0, -2.5, f64::MIN_POSITIVE, 1e300]).unwrap();
        let b = Tensor::from_vec(&[3], vec![0.1, 0.2, 0.3]).unwrap();
        write_archive(
            &path,
            "test",
            1,
            serde_json::json!({"k": 1}),
            &[("a", ArrayKind::Trainable, &a), ("b", ArrayKind::Buffer, &b)],
        )
        .unwrap();
        path
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let arch = read_archive(&sample(dir.path())).unwrap();
        assert_eq!(arch.header.format, "test");
        assert_eq!(arch.header.meta["k"], 1);
        assert_eq!(arch.tensors[0].data()[3].to_bits(), 1e300f64.to_bits());
        assert_eq!(arch.tensors[1].data(), &[0.1, 0.2, 0.3]);
        assert_eq!(arch.header.arrays[1].kind, ArrayKind::Buffer);
    }

    #[test]
    fn truncation_and_garbage_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = sample(dir.path());
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(read_archive(&path), Err(Error::Checkpoint { .. })));
        fs::write(&path, &bytes[..20]).unwrap();
        assert!(matches!(read_archive(&path), Err(Error::Checkpoint { .. })));
        fs::write(&path, b"not an archive at all").unwrap();
        assert!(matches!(read_archive(&path), Err(Error::Checkpoint { .. })));
        let mut extra = bytes.clone();
        extra.extend_from_slice(&[0; 8]);
        fs::write(&path, extra).unwrap();
        assert!(matches!(read_archive(&path), Err(Error::Checkpoint { .. })));
    }
}
