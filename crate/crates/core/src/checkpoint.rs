//! Single-file checkpoint container.
//!
//! Layout (little endian):
//!
//! ```text
//! b"KDCK" | u32 version | u32 meta_len | meta (JSON) | u32 n_tensors
//! repeated n_tensors times:
//!     u32 name_len | name (utf-8) | u32 ndim | u64 dims[ndim] | f64 data[prod(dims)]
//! [u8; 32] SHA-256 of every preceding byte
//! ```
//!
//! Tensors are written in name order, so saving the same bundle twice yields
//! identical bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use kd_autograd::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};

const MAGIC: &[u8; 4] = b"KDCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model_kind: String,
    pub step: u64,
    pub config_hash: String,
    /// Free-form string attributes (model configuration, flags).
    #[serde(default)]
    pub attrs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CheckpointBundle {
    pub tensors: BTreeMap<String, Tensor>,
    pub meta: CheckpointMeta,
}

impl CheckpointBundle {
    pub fn from_store(store: &ParamStore, meta: CheckpointMeta) -> Self {
        Self {
            tensors: store
                .iter()
                .map(|p| (p.name.clone(), p.value.clone()))
                .collect(),
            meta,
        }
    }

    /// All tensors as a store, every parameter trainable.
    pub fn to_store(&self) -> Result<ParamStore> {
        let mut s = ParamStore::new();
        for (name, t) in &self.tensors {
            s.insert(name.clone(), t.clone(), true)?;
        }
        Ok(s)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta).expect("metadata serialises");
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 32 + 16 {
            return Err(CoreError::Integrity(format!(
                "file too short ({} bytes)",
                bytes.len()
            )));
        }
        let (body, sum) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != sum {
            return Err(CoreError::Integrity("checksum mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(CoreError::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CoreError::Format(format!("unsupported version {version}")));
        }
        let meta_len = r.u32()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| CoreError::Format(format!("metadata: {e}")))?;
        let n = r.u32()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..n {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|e| CoreError::Format(format!("tensor name: {e}")))?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let count: usize = shape.iter().product();
            let raw = r.take(count * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(shape, data)?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(CoreError::Format(format!("duplicate tensor {name}")));
            }
        }
        if r.pos != body.len() {
            return Err(CoreError::Format("trailing bytes".into()));
        }
        Ok(Self { tensors, meta })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(CoreError::Format("unexpected end of data".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn save_checkpoint(bundle: &CheckpointBundle, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| CoreError::io(parent, e))?;
        }
    }
    fs::write(path, bundle.to_bytes()).map_err(|e| CoreError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<CheckpointBundle> {
    let bytes = fs::read(path).map_err(|e| CoreError::io(path, e))?;
    CheckpointBundle::from_bytes(&bytes)
}

/// Outcome of [`load_pretrained_partial`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PartialLoadReport {
    pub loaded: Vec<String>,
    /// Names present in both but with different shapes: (name, checkpoint shape, target shape).
    pub skipped: Vec<(String, Vec<usize>, Vec<usize>)>,
    /// Names in the checkpoint that the target does not have.
    pub unknown: Vec<String>,
}

/// Copies every checkpoint tensor whose name and shape both match a target
/// parameter. Shape mismatches (for instance positional embeddings trained
/// at another input size) are skipped whole and reported.
pub fn load_pretrained_partial(
    target: &mut ParamStore,
    bundle: &CheckpointBundle,
) -> PartialLoadReport {
    let mut report = PartialLoadReport::default();
    for (name, t) in &bundle.tensors {
        match target.id(name) {
            None => report.unknown.push(name.clone()),
            Some(id) => {
                let current = target.value(id).shape().to_vec();
                if current == t.shape() {
                    *target.value_mut(id) = t.clone();
                    report.loaded.push(name.clone());
                } else {
                    report
                        .skipped
                        .push((name.clone(), t.shape().to_vec(), current));
                }
            }
        }
    }
    report
}

/// Hex SHA-256 of a serialisable value's JSON form.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serialises");
    hex::encode(&Sha256::digest(&json)[..8])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bundle() -> CheckpointBundle {
        let mut tensors = BTreeMap::new();
        tensors.insert(
            "a".to_string(),
            Tensor::new(vec![3, 3], (0..9).map(|i| i as f64 * 0.1 - 0.3).collect()).unwrap(),
        );
        tensors.insert(
            "b".to_string(),
            Tensor::new(
                vec![7],
                vec![f64::MIN_POSITIVE, -0.0, 1e300, 2.5, -7.0, 0.1, 3.0],
            )
            .unwrap(),
        );
        CheckpointBundle {
            tensors,
            meta: CheckpointMeta {
                model_kind: "student".into(),
                step: 12,
                config_hash: "abc".into(),
                attrs: BTreeMap::new(),
            },
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let b = bundle();
        let back = CheckpointBundle::from_bytes(&b.to_bytes()).unwrap();
        for (k, t) in &b.tensors {
            let u = &back.tensors[k];
            assert_eq!(t.shape(), u.shape());
            for (x, y) in t.data().iter().zip(u.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        assert_eq!(back.meta, b.meta);
        assert_eq!(b.to_bytes(), back.to_bytes());
    }

    #[test]
    fn empty_bundle_roundtrips() {
        let b = CheckpointBundle::default();
        let back = CheckpointBundle::from_bytes(&b.to_bytes()).unwrap();
        assert!(back.tensors.is_empty());
    }

    #[test]
    fn corruption_detected() {
        let mut bytes = bundle().to_bytes();
        bytes[20] ^= 1;
        assert!(matches!(
            CheckpointBundle::from_bytes(&bytes),
            Err(CoreError::Integrity(_))
        ));
    }

    #[test]
    fn partial_load_rules() {
        let mut target = ParamStore::new();
        target.insert("pos", Tensor::zeros(&[16, 4]), true).unwrap();
        target.insert("w", Tensor::zeros(&[4, 4]), true).unwrap();
        let mut b = CheckpointBundle::default();
        b.tensors.insert("pos".into(), Tensor::full(&[64, 4], 1.0));
        b.tensors.insert("w".into(), Tensor::full(&[4, 4], 2.0));
        b.tensors.insert("extra".into(), Tensor::zeros(&[1]));
        let r = load_pretrained_partial(&mut target, &b);
        assert_eq!(r.loaded, vec!["w".to_string()]);
        assert_eq!(r.skipped.len(), 1);
        assert_eq!(r.skipped[0].0, "pos");
        assert_eq!(r.unknown, vec!["extra".to_string()]);
        assert_eq!(target.get("pos").unwrap(), &Tensor::zeros(&[16, 4]));
        assert_eq!(target.get("w").unwrap().data()[0], 2.0);
    }
}
