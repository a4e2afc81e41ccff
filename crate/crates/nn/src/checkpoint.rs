//! Binary parameter container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "VSTRCKPT"
//! version      u32
//! kind         u32 length + UTF-8
//! spec         u32 length + JSON (network spec)
//! meta         u32 length + JSON (free-form metadata)
//! n_params     u32
//! per param:   u32 name length + UTF-8 name
//!              u32 ndim, ndim x u64 dims
//!              numel x f64
//! checksum     32 bytes, SHA-256 of everything above
//! ```
//!
//! Parameters appear in declaration order.

use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{NnError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"VSTRCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub spec: serde_json::Value,
    pub meta: serde_json::Value,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn new(
        kind: impl Into<String>,
        spec: &impl Serialize,
        meta: serde_json::Value,
        params: ParamStore,
    ) -> Result<Self> {
        Ok(Self {
            kind: kind.into(),
            spec: serde_json::to_value(spec)?,
            meta,
            params,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_str(&mut out, &self.kind);
        put_str(&mut out, &serde_json::to_string(&self.spec)?);
        put_str(&mut out, &serde_json::to_string(&self.meta)?);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for d in t.shape() {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(r.corrupt_at(0, "bad magic"));
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(NnError::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let kind = r.string("kind")?;
        let spec_at = r.pos;
        let spec = serde_json::from_str(&r.string("spec")?)
            .map_err(|e| r.corrupt_at(spec_at, &format!("spec json: {e}")))?;
        let meta_at = r.pos;
        let meta = serde_json::from_str(&r.string("meta")?)
            .map_err(|e| r.corrupt_at(meta_at, &format!("meta json: {e}")))?;
        let count = r.u32("parameter count")?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name = r.string("parameter name")?;
            let ndim = r.u32("ndim")? as usize;
            if ndim > 8 {
                return Err(r.corrupt_at(r.pos - 4, "implausible tensor rank"));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64("dimension")? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, d| acc.checked_mul(*d))
                .filter(|n| n.saturating_mul(8) <= bytes.len())
                .ok_or_else(|| r.corrupt_at(r.pos, "implausible tensor size"))?;
            let raw = r.take(numel * 8, "parameter data")?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            params.add(name, Tensor::new(shape, data)?);
        }
        let body_end = r.pos;
        let stored = r.take(32, "checksum")?;
        if Sha256::digest(&bytes[..body_end]).as_slice() != stored {
            return Err(r.corrupt_at(body_end, "checksum mismatch"));
        }
        if r.pos != bytes.len() {
            return Err(r.corrupt_at(r.pos, "trailing bytes"));
        }
        Ok(Self {
            kind,
            spec,
            meta,
            params,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Hex SHA-256 of the serialized container.
    pub fn digest(&self) -> Result<String> {
        Ok(hex_digest(&self.to_bytes()?))
    }

    /// Errors unless this checkpoint holds `kind` built from exactly `spec`.
    pub fn expect(&self, kind: &str, spec: &impl Serialize) -> Result<()> {
        if self.kind != kind {
            return Err(NnError::SpecMismatch(format!(
                "expected kind `{kind}`, found `{}`",
                self.kind
            )));
        }
        let want = serde_json::to_value(spec)?;
        if want != self.spec {
            return Err(NnError::SpecMismatch(format!(
                "expected spec {want}, found {}",
                self.spec
            )));
        }
        Ok(())
    }

    /// Copies stored parameters into `target`, which must have identical names
    /// and shapes in the same order.
    pub fn load_params_into(&self, target: &mut ParamStore) -> Result<()> {
        if target.len() != self.params.len() {
            return Err(NnError::SpecMismatch(format!(
                "expected {} parameters, found {}",
                target.len(),
                self.params.len()
            )));
        }
        for ((want_name, want), (name, t)) in target.iter().zip(self.params.iter()) {
            if want_name != name || want.shape() != t.shape() {
                return Err(NnError::SpecMismatch(format!(
                    "parameter `{name}` {:?} does not match `{want_name}` {:?}",
                    t.shape(),
                    want.shape()
                )));
            }
        }
        *target = self.params.clone();
        Ok(())
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn corrupt_at(&self, offset: usize, reason: &str) -> NnError {
        NnError::Corrupt {
            offset,
            reason: reason.to_string(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.corrupt_at(self.pos, &format!("truncated while reading {what}"))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)? as usize;
        let at = self.pos;
        let raw = self.take(len, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.corrupt_at(at, "invalid utf-8"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{LayerSpec, Mlp, MlpSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> (MlpSpec, Checkpoint) {
        let spec = MlpSpec {
            input_dim: 4,
            layers: vec![LayerSpec::norm_relu(6), LayerSpec::linear(1)],
            dropout: 0.5,
        };
        let mut store = ParamStore::new();
        Mlp::new(spec.clone(), "net", &mut store, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let ck = Checkpoint::new("mlp", &spec, serde_json::json!({"note": "x"}), store).unwrap();
        (spec, ck)
    }

    #[test]
    fn save_load_is_bit_identical() {
        let (spec, ck) = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        back.expect("mlp", &spec).unwrap();
        for ((_, a), (_, b)) in back.params.iter().zip(ck.params.iter()) {
            let ab: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
    }

    #[test]
    fn mismatched_spec_rejected() {
        let (mut spec, ck) = sample();
        spec.layers[0].width = 7;
        assert!(matches!(ck.expect("mlp", &spec), Err(NnError::SpecMismatch(_))));
        assert!(ck.expect("other", &spec).is_err());
    }

    #[test]
    fn corruption_reports_offset() {
        let (_, ck) = sample();
        let bytes = ck.to_bytes().unwrap();

        let truncated = &bytes[..bytes.len() - 40];
        match Checkpoint::from_bytes(truncated) {
            Err(NnError::Corrupt { offset, .. }) => assert!(offset <= truncated.len()),
            other => panic!("unexpected {other:?}"),
        }

        let mut flipped = bytes.clone();
        let k = bytes.len() - 36; // inside the last f64
        flipped[k] ^= 0x10;
        match Checkpoint::from_bytes(&flipped) {
            Err(NnError::Corrupt { offset, reason }) => {
                assert_eq!(offset, bytes.len() - 32);
                assert!(reason.contains("checksum"));
            }
            other => panic!("unexpected {other:?}"),
        }

        let mut bad_version = bytes.clone();
        bad_version[8] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&bad_version),
            Err(NnError::Version { found: 9, .. })
        ));
    }
}
