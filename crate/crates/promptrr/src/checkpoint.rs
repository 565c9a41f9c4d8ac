//! Checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "PRRK1"
//! u32 header length, header as UTF-8 `key=value` lines
//! u32 tensor count
//! per tensor: u32 name length, name, u32 rank, u32 dims[rank], f32 values
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use promptrr_core::pipeline::{Weights, STORE_NAMES};
use promptrr_core::Tensor;

pub const MAGIC: &[u8; 5] = b"PRRK1";
/// Magic prefix shared by every format version.
const FAMILY: &[u8; 4] = b"PRRK";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file")]
    Magic,
    #[error("unsupported checkpoint version {0:?}")]
    Version(String),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint does not match the model: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn text(&mut self, n: usize) -> Result<&'a str, CheckpointError> {
        std::str::from_utf8(self.take(n)?).map_err(|_| CheckpointError::Malformed("text is not UTF-8".into()))
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("size fits in u32").to_le_bytes());
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        let mut header = String::new();
        for (k, v) in &self.meta {
            assert!(!k.contains(['=', '\n']) && !v.contains('\n'), "metadata must be single-line key=value");
            header.push_str(&format!("{k}={v}\n"));
        }
        put_u32(&mut out, header.len());
        out.extend_from_slice(header.as_bytes());
        put_u32(&mut out, self.tensors.len());
        for (name, t) in &self.tensors {
            put_u32(&mut out, name.len());
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.rank());
            for &d in t.shape() {
                put_u32(&mut out, d);
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < MAGIC.len() || &bytes[..4] != FAMILY {
            return Err(CheckpointError::Magic);
        }
        if &bytes[..5] != MAGIC {
            return Err(CheckpointError::Version(String::from_utf8_lossy(&bytes[4..5]).into_owned()));
        }
        let mut r = Reader { bytes, pos: 5 };
        let n = r.u32()?;
        let mut meta = BTreeMap::new();
        for line in r.text(n)?.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CheckpointError::Malformed(format!("header line {line:?}")))?;
            meta.insert(k.to_string(), v.to_string());
        }
        let count = r.u32()?;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let n = r.u32()?;
            let name = r.text(n)?.to_string();
            let rank = r.u32()?;
            let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
            let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or(CheckpointError::Truncated)?;
            let raw = r.take(len.checked_mul(4).ok_or(CheckpointError::Truncated)?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            let t = Tensor::new(&shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Malformed("trailing bytes".into()));
        }
        Ok(Checkpoint { meta, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Every parameter as `store.param`.
    pub fn from_weights(weights: &Weights<f32>, meta: BTreeMap<String, String>) -> Self {
        let tensors = STORE_NAMES
            .iter()
            .zip(weights.stores())
            .flat_map(|(s, store)| store.iter().map(move |(n, t)| (format!("{s}.{n}"), t.clone())))
            .collect();
        Checkpoint { meta, tensors }
    }

    /// Copy the tensors into `weights`; names and shapes must match exactly.
    pub fn load_into(&self, weights: &mut Weights<f32>) -> Result<(), CheckpointError> {
        let expected: usize = weights.stores().iter().map(|s| s.len()).sum();
        if self.tensors.len() != expected {
            return Err(CheckpointError::Mismatch(format!(
                "{} tensors in file, model has {}",
                self.tensors.len(),
                expected
            )));
        }
        let mut it = self.tensors.iter();
        for (s, store) in STORE_NAMES.iter().zip(weights.stores_mut()) {
            let names: Vec<String> = store.iter().map(|(n, _)| format!("{s}.{n}")).collect();
            for (want, dst) in names.iter().zip(store.tensors_mut()) {
                let (name, t) = it.next().expect("count checked");
                if name != want || t.shape() != dst.shape() {
                    return Err(CheckpointError::Mismatch(format!(
                        "expected {want} {:?}, found {name} {:?}",
                        dst.shape(),
                        t.shape()
                    )));
                }
                dst.clone_from(t);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut meta = BTreeMap::new();
        meta.insert("preset".into(), "desk".into());
        meta.insert("stage".into(), "joint".into());
        Checkpoint {
            meta,
            tensors: vec![
                ("a.w".into(), Tensor::new(&[2, 3], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5e-42, f32::MAX, 0.1]).unwrap()),
                ("b".into(), Tensor::scalar(7.0)),
                ("row".into(), Tensor::zeros(&[1, 4])),
            ],
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back.meta, c.meta);
        for ((n1, t1), (n2, t2)) in c.tensors.iter().zip(&back.tensors) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(t1), bits(t2));
        }
    }

    #[test]
    fn rejects_bad_files() {
        let mut bytes = sample().to_bytes();
        assert!(matches!(Checkpoint::from_bytes(b"PNG.."), Err(CheckpointError::Magic)));
        bytes[4] = b'2';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(CheckpointError::Version(v)) if v == "2"));
        bytes[4] = b'1';
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]), Err(CheckpointError::Truncated)));
        bytes.push(0);
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(CheckpointError::Malformed(_))));
    }
}
