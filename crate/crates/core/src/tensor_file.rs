//! Binary containers shared by every stage.
//!
//! Single tensor file:
//!
//! ```text
//! b"CHTF" | u32 LE header length | JSON header | f32 LE payload (row-major)
//! ```
//!
//! Archive (named tensors, used for checkpoints):
//!
//! ```text
//! b"CHTA" | u32 LE header length | JSON header | f32 LE payload
//! ```
//!
//! where the archive header lists every tensor with its shape and element offset.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TENSOR_SCHEMA_VERSION: u32 = 1;
const TENSOR_MAGIC: &[u8; 4] = b"CHTF";
const ARCHIVE_MAGIC: &[u8; 4] = b"CHTA";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Motion,
    Keypoints,
    Music,
    Text,
    Trajectory,
    Features,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorHeader {
    pub schema_version: u32,
    pub shape: Vec<usize>,
    pub dtype: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub fps: Option<f64>,
    pub modality: Modality,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub header: TensorHeader,
    pub data: Vec<f32>,
}

impl TensorFile {
    pub fn new(modality: Modality, shape: Vec<usize>, fps: Option<f64>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::InvalidConfig(format!(
                "shape {shape:?} holds {expected} values but {} were given",
                data.len()
            )));
        }
        Ok(TensorFile {
            header: TensorHeader {
                schema_version: TENSOR_SCHEMA_VERSION,
                shape,
                dtype: "f32".into(),
                fps,
                modality,
            },
            data,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(8 + header.len() + 4 * self.data.len());
        write_frame(&mut out, TENSOR_MAGIC, &header, &self.data);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let (header, payload) = read_frame(bytes, TENSOR_MAGIC, path)?;
        let header: TensorHeader = serde_json::from_slice(header)
            .map_err(|e| Error::format(path, format!("bad header: {e}")))?;
        if header.schema_version != TENSOR_SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                found: header.schema_version,
                expected: TENSOR_SCHEMA_VERSION,
            });
        }
        if header.dtype != "f32" {
            return Err(Error::format(path, format!("unsupported dtype {}", header.dtype)));
        }
        let data = decode_f32(payload, path)?;
        let expected: usize = header.shape.iter().product();
        if data.len() != expected {
            return Err(Error::format(
                path,
                format!("payload has {} values, header shape {:?} needs {expected}", data.len(), header.shape),
            ));
        }
        Ok(TensorFile { header, data })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Reads a file and checks its modality and trailing (per-frame) width.
    pub fn read_expecting(path: &Path, modality: Modality, width: Option<usize>) -> Result<Self> {
        let f = Self::read(path)?;
        if f.header.modality != modality {
            return Err(Error::format(
                path,
                format!("expected {modality:?} data, found {:?}", f.header.modality),
            ));
        }
        if let Some(w) = width {
            if f.header.shape.last() != Some(&w) {
                return Err(Error::format(path, format!("expected width {w}, shape is {:?}", f.header.shape)));
            }
        }
        Ok(f)
    }

    pub fn rows(&self) -> usize {
        self.header.shape.first().copied().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchiveEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArchiveHeader {
    schema_version: u32,
    meta: serde_json::Value,
    tensors: Vec<ArchiveEntry>,
}

/// Named flat f32 arrays plus a free-form JSON metadata block.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TensorArchive {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
}

impl TensorArchive {
    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.push((name.into(), shape, data));
    }

    pub fn get(&self, name: &str) -> Option<(&[usize], &[f32])> {
        self.tensors
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, s, d)| (s.as_slice(), d.as_slice()))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, shape, data) in &self.tensors {
            entries.push(ArchiveEntry {
                name: name.clone(),
                shape: shape.clone(),
                offset,
            });
            offset += data.len();
        }
        let header = serde_json::to_vec(&ArchiveHeader {
            schema_version: TENSOR_SCHEMA_VERSION,
            meta: self.meta.clone(),
            tensors: entries,
        })?;
        let payload: Vec<f32> = self.tensors.iter().flat_map(|(_, _, d)| d.iter().copied()).collect();
        let mut out = Vec::with_capacity(8 + header.len() + 4 * payload.len());
        write_frame(&mut out, ARCHIVE_MAGIC, &header, &payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let (header, payload) = read_frame(bytes, ARCHIVE_MAGIC, path)?;
        let header: ArchiveHeader = serde_json::from_slice(header)
            .map_err(|e| Error::format(path, format!("bad archive header: {e}")))?;
        if header.schema_version != TENSOR_SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                found: header.schema_version,
                expected: TENSOR_SCHEMA_VERSION,
            });
        }
        let data = decode_f32(payload, path)?;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let len: usize = e.shape.iter().product();
            let slice = data
                .get(e.offset..e.offset + len)
                .ok_or_else(|| Error::format(path, format!("tensor {} runs past the payload", e.name)))?;
            tensors.push((e.name, e.shape, slice.to_vec()));
        }
        Ok(TensorArchive {
            meta: header.meta,
            tensors,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn write_frame(out: &mut Vec<u8>, magic: &[u8; 4], header: &[u8], payload: &[f32]) {
    out.extend_from_slice(magic);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header);
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_frame<'a>(bytes: &'a [u8], magic: &[u8; 4], path: &Path) -> Result<(&'a [u8], &'a [u8])> {
    if bytes.len() < 8 || &bytes[..4] != magic {
        return Err(Error::format(path, "missing container magic"));
    }
    let len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let header = bytes
        .get(8..8 + len)
        .ok_or_else(|| Error::format(path, "truncated header"))?;
    Ok((header, &bytes[8 + len..]))
}

fn decode_f32(payload: &[u8], path: &Path) -> Result<Vec<f32>> {
    if payload.len() % 4 != 0 {
        return Err(Error::format(path, "payload is not a whole number of f32 values"));
    }
    Ok(payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads a whole file, mapping failures to [`Error::Io`].
pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_round_trip_and_layout() {
        let f = TensorFile::new(Modality::Motion, vec![2, 3], Some(10.0), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.5]).unwrap();
        let bytes = f.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"CHTF");
        let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[8..8 + hlen]).unwrap();
        assert_eq!(header["dtype"], "f32");
        assert_eq!(header["modality"], "motion");
        assert_eq!(header["schema_version"], 1);
        assert_eq!(&bytes[8 + hlen..8 + hlen + 4], &1.0f32.to_le_bytes());
        assert_eq!(TensorFile::from_bytes(&bytes, Path::new("x")).unwrap(), f);
    }

    #[test]
    fn wrong_schema_version_rejected() {
        let mut f = TensorFile::new(Modality::Music, vec![1, 1], None, vec![0.0]).unwrap();
        f.header.schema_version = 2;
        let bytes = f.to_bytes().unwrap();
        assert!(matches!(
            TensorFile::from_bytes(&bytes, Path::new("x")),
            Err(Error::SchemaVersion { found: 2, expected: 1 })
        ));
    }

    #[test]
    fn truncated_payload_rejected() {
        let f = TensorFile::new(Modality::Music, vec![2, 2], None, vec![0.0; 4]).unwrap();
        let bytes = f.to_bytes().unwrap();
        assert!(TensorFile::from_bytes(&bytes[..bytes.len() - 4], Path::new("x")).is_err());
        assert!(TensorFile::from_bytes(b"nope", Path::new("x")).is_err());
        assert!(TensorFile::new(Modality::Music, vec![2, 2], None, vec![0.0; 3]).is_err());
    }

    #[test]
    fn archive_round_trip() {
        let mut a = TensorArchive {
            meta: serde_json::json!({"kind": "test", "step": 3}),
            ..Default::default()
        };
        a.push("w", vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        a.push("b", vec![3], vec![-1.0, 0.5, 9.0]);
        let back = TensorArchive::from_bytes(&a.to_bytes().unwrap(), Path::new("x")).unwrap();
        assert_eq!(back, a);
        assert_eq!(back.get("b").unwrap().1, &[-1.0, 0.5, 9.0]);
    }
}
