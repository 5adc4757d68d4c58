//! Portable single-file checkpoint container.
//!
//! ```text
//! VARDIM3D-CKPT\n
//! {json header: format version, fingerprint, tensor manifest, blob length}\n
//! <blob: little-endian f32 tensors, row-major, in manifest order>
//! ```
//!
//! Convolution weights are `(out, in, kd, kh, kw)` for volumetric layouts and
//! `(out, in, kh, kw)` for planar ones; volumes are `(C, D, H, W)`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::backbone::config::{Family, Stem};
use crate::error::{Error, Result};
use crate::tensor::{fmt_shape, numel, Tensor};

const MAGIC: &[u8] = b"VARDIM3D-CKPT\n";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    /// Planar network, weights `(out, in, kh, kw)`, activations `(C, H, W)`.
    Chw,
    /// Volumetric network, weights `(out, in, kd, kh, kw)`, activations `(C, D, H, W)`.
    Cdhw,
    /// Axial/coronal/sagittal split convolutions.
    Acs,
    /// Not a network: a materialized dataset.
    Dataset,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub family: Family,
    pub stem: Stem,
    pub layout: Layout,
    pub depth_preserve: bool,
    pub version: u32,
    /// Free-form provenance: serialized config, head description, config hash.
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

impl Fingerprint {
    pub fn new(family: Family, stem: Stem, layout: Layout, depth_preserve: bool) -> Self {
        Self {
            family,
            stem,
            layout,
            depth_preserve,
            version: FORMAT_VERSION,
            meta: BTreeMap::new(),
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl Into<String>) -> Self {
        self.meta.insert(key.to_string(), value.into());
        self
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    fingerprint: Fingerprint,
    tensors: Vec<ManifestRecord>,
    blob_len: usize,
}

/// Ordered named-tensor store with an architecture fingerprint.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    fingerprint: Fingerprint,
    tensors: IndexMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(fingerprint: Fingerprint) -> Self {
        Self {
            fingerprint,
            tensors: IndexMap::new(),
        }
    }

    pub fn fingerprint(&self) -> &Fingerprint {
        &self.fingerprint
    }

    pub fn fingerprint_mut(&mut self) -> &mut Fingerprint {
        &mut self.fingerprint
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::InvalidInput(format!("duplicate tensor name `{name}`")));
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn total_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn manifest(&self) -> Vec<ManifestRecord> {
        let mut offset = 0;
        self.tensors
            .iter()
            .map(|(name, t)| {
                let rec = ManifestRecord {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    dtype: "f32".into(),
                    offset,
                };
                offset += t.numel() * 4;
                rec
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let tensors = self.manifest();
        let blob_len = self.total_scalars() * 4;
        let header = Header {
            format_version: FORMAT_VERSION,
            fingerprint: self.fingerprint.clone(),
            tensors,
            blob_len,
        };
        let json = serde_json::to_string(&header).expect("header serializes");
        let mut out = Vec::with_capacity(MAGIC.len() + json.len() + 1 + blob_len);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(json.as_bytes());
        out.push(b'\n');
        for t in self.tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let rest = bytes
            .strip_prefix(MAGIC)
            .ok_or_else(|| Error::Integrity("missing checkpoint magic".into()))?;
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Integrity("unterminated manifest".into()))?;
        let header: Header = serde_json::from_slice(&rest[..nl])?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Integrity(format!(
                "unsupported format version {}",
                header.format_version
            )));
        }
        let blob = &rest[nl + 1..];
        if blob.len() != header.blob_len {
            return Err(Error::Integrity(format!(
                "blob length mismatch: expected {} bytes, found {}",
                header.blob_len,
                blob.len()
            )));
        }
        let mut ckpt = Checkpoint::new(header.fingerprint);
        let mut cursor = 0;
        for rec in header.tensors {
            if rec.dtype != "f32" {
                return Err(Error::Integrity(format!("{}: unsupported dtype {}", rec.name, rec.dtype)));
            }
            if rec.offset != cursor {
                return Err(Error::Integrity(format!(
                    "{}: offset {} is not the next free byte {cursor}",
                    rec.name, rec.offset
                )));
            }
            let nbytes = numel(&rec.shape) * 4;
            let end = cursor + nbytes;
            if end > blob.len() {
                return Err(Error::Integrity(format!(
                    "{} {} runs past the blob end ({} > {})",
                    rec.name,
                    fmt_shape(&rec.shape),
                    end,
                    blob.len()
                )));
            }
            let data = blob[cursor..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            ckpt.insert(rec.name.clone(), Tensor::from_vec(&rec.shape, data)?)
                .map_err(|_| Error::Integrity(format!("duplicate tensor name `{}`", rec.name)))?;
            cursor = end;
        }
        if cursor != header.blob_len {
            return Err(Error::Integrity(format!(
                "manifest covers {cursor} bytes but blob holds {}",
                header.blob_len
            )));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    ckpt.save(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::load(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fp() -> Fingerprint {
        Fingerprint::new(Family::Resnet18, Stem::K7, Layout::Cdhw, true).with_meta("note", "x")
    }

    #[test]
    fn empty_round_trip() {
        let c = Checkpoint::new(fp());
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
        assert!(back.is_empty());
    }

    #[test]
    fn truncated_blob_names_lengths() {
        let mut c = Checkpoint::new(fp());
        c.insert("a", Tensor::full(&[2, 3], 1.5)).unwrap();
        let bytes = c.to_bytes();
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 5]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("expected 24") && msg.contains("found 19"), "{msg}");
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut c = Checkpoint::new(fp());
        c.insert("a", Tensor::zeros(&[1])).unwrap();
        assert!(c.insert("a", Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn file_round_trip_and_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut c = Checkpoint::new(fp());
        c.insert("w", Tensor::from_vec(&[2], vec![1.0, -0.0]).unwrap()).unwrap();
        save_checkpoint(&c, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), c);
        let err = save_checkpoint(&c, dir.path().join("missing/dir/m.ckpt")).unwrap_err();
        assert!(err.to_string().contains("missing"));
    }

    proptest! {
        #[test]
        fn round_trip_is_bitwise(
            tensors in proptest::collection::vec(
                (proptest::collection::vec(1usize..4, 0..4), any::<u32>()), 0..6)
        ) {
            let mut c = Checkpoint::new(fp());
            for (i, (shape, seed)) in tensors.iter().enumerate() {
                let n: usize = shape.iter().product();
                let data = (0..n).map(|j| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(j as u32) & 0x7f7f_ffff)).collect();
                c.insert(format!("t{i}"), Tensor::from_vec(shape, data).unwrap()).unwrap();
            }
            let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
            prop_assert_eq!(back.manifest(), c.manifest());
            for ((_, a), (_, b)) in back.iter().zip(c.iter()) {
                let ab: Vec<u32> = a.data().iter().map(|v| v.to_bits()).collect();
                let bb: Vec<u32> = b.data().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(ab, bb);
            }
        }
    }
}
