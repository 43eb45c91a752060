//! Checkpoint files: the run config, every named parameter tensor, and
//! optionally the optimizer state needed for bit-exact resumption.
//!
//! ```text
//! magic    b"LIWT"
//! version  u32 LE
//! config   u64 LE byte length, then the rendered config text
//! tensors  u64 LE count, then per tensor:
//!          u64 LE name length, name bytes, tensor snapshot
//! opt flag u8 (0 or 1), and when 1:
//!          u64 LE step count, then per tensor (same order as above)
//!          one snapshot for the first moment and one for the second
//! ```
//!
//! Every length is validated before the bytes it promises are touched,
//! so truncated and hostile inputs fail with an error instead of a
//! panic or an oversized allocation.

use std::path::Path;

use thiserror::Error;

use crate::config::{Config, ConfigError};
use crate::model::StateError;
use crate::tensor::{read_snapshot_prefix, write_snapshot, Scalar, SnapshotError, Tensor};

const MAGIC: [u8; 4] = *b"LIWT";
const VERSION: u32 = 1;
/// Upper bound on embedded strings; a real config or tensor name is far
/// smaller, and anything larger means a corrupt or forged length field.
const MAX_STRING: u64 = 1 << 20;
const MAX_TENSORS: u64 = 1 << 16;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("not a checkpoint: bad magic")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint config: {0}")]
    Config(#[from] ConfigError),
    #[error("tensor `{name}`: {source}")]
    Tensor { name: String, source: SnapshotError },
    #[error(transparent)]
    State(#[from] StateError),
}

/// Optimizer state carried alongside the parameters, in parameter order.
pub struct OptState<T: Scalar> {
    pub step: u64,
    pub first: Vec<Vec<T>>,
    pub second: Vec<Vec<T>>,
}

pub struct Checkpoint<T: Scalar> {
    pub config: Config,
    pub tensors: Vec<(String, Tensor<T>)>,
    pub opt: Option<OptState<T>>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let cfg = self.config.render();
        out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
        out.extend_from_slice(cfg.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u64).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            write_snapshot(t, &mut out);
        }
        match &self.opt {
            None => out.push(0),
            Some(opt) => {
                out.push(1);
                out.extend_from_slice(&opt.step.to_le_bytes());
                for (first, second) in opt.first.iter().zip(&opt.second) {
                    write_snapshot(&Tensor::from_vec(&[first.len()], first.clone()), &mut out);
                    write_snapshot(&Tensor::from_vec(&[second.len()], second.clone()), &mut out);
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let config_text = r.string("config")?;
        let config = Config::parse(&config_text)?;

        let count = r.u64()?;
        if count > MAX_TENSORS {
            return Err(CheckpointError::Corrupt(format!("tensor count {count}")));
        }
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name = r.string("tensor name")?;
            let t = r.snapshot(&name)?;
            tensors.push((name, t));
        }

        let opt = match r.take(1)?[0] {
            0 => None,
            1 => {
                let step = r.u64()?;
                let mut first = Vec::with_capacity(tensors.len());
                let mut second = Vec::with_capacity(tensors.len());
                for (name, t) in &tensors {
                    let m = r.snapshot(&format!("{name} first moment"))?;
                    let v = r.snapshot(&format!("{name} second moment"))?;
                    for (label, buf) in [("first", &m), ("second", &v)] {
                        if buf.len() != t.len() {
                            return Err(CheckpointError::Corrupt(format!(
                                "{label} moment of `{name}` has {} elements, parameter has {}",
                                buf.len(),
                                t.len()
                            )));
                        }
                    }
                    first.push(m.data().to_vec());
                    second.push(v.data().to_vec());
                }
                Some(OptState { step, first, second })
            }
            other => {
                return Err(CheckpointError::Corrupt(format!(
                    "optimizer flag must be 0 or 1, got {other}"
                )))
            }
        };
        if r.pos != bytes.len() {
            return Err(CheckpointError::Corrupt(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint { config, tensors, opt })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.bytes.len() - self.pos < n {
            return Err(CheckpointError::Corrupt(format!(
                "wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String, CheckpointError> {
        let len = self.u64()?;
        if len > MAX_STRING {
            return Err(CheckpointError::Corrupt(format!("{what} length {len}")));
        }
        let bytes = self.take(len as usize)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| CheckpointError::Corrupt(format!("{what} is not UTF-8")))
    }

    fn snapshot<T: Scalar>(&mut self, name: &str) -> Result<Tensor<T>, CheckpointError> {
        let (t, used) =
            read_snapshot_prefix(&self.bytes[self.pos..]).map_err(|source| CheckpointError::Tensor {
                name: name.to_string(),
                source,
            })?;
        self.pos += used;
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t1: Vec<f32> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let t2: Vec<f32> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        Checkpoint {
            config: Config::default(),
            tensors: vec![
                ("a.w".into(), Tensor::from_vec(&[3, 4], t1)),
                ("a.b".into(), Tensor::from_vec(&[5], t2)),
            ],
            opt: Some(OptState {
                step: 42,
                first: vec![vec![0.1; 12], vec![0.2; 5]],
                second: vec![vec![0.3; 12], vec![0.4; 5]],
            }),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(back.config, ck.config);
        assert_eq!(back.tensors.len(), 2);
        for ((n1, t1), (n2, t2)) in back.tensors.iter().zip(&ck.tensors) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(t1), bits(t2));
        }
        let opt = back.opt.as_ref().unwrap();
        assert_eq!(opt.step, 42);
        assert_eq!(opt.first[1], vec![0.2; 5]);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn round_trip_without_optimizer() {
        let mut ck = sample();
        ck.opt = None;
        let back = Checkpoint::<f32>::from_bytes(&ck.to_bytes()).unwrap();
        assert!(back.opt.is_none());
    }

    #[test]
    fn bad_magic_is_rejected() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        let err = Checkpoint::<f32>::from_bytes(&bytes).err().unwrap();
        assert!(matches!(err, CheckpointError::BadMagic));
    }

    #[test]
    fn unknown_version_is_rejected() {
        let mut bytes = sample().to_bytes();
        bytes[4] = 9;
        let err = Checkpoint::<f32>::from_bytes(&bytes).err().unwrap();
        assert!(matches!(err, CheckpointError::Version(9)));
    }

    #[test]
    fn every_truncation_point_errors() {
        let bytes = sample().to_bytes();
        for cut in [0, 3, 4, 7, 8, 15, 20, 100, bytes.len() - 1] {
            assert!(
                Checkpoint::<f32>::from_bytes(&bytes[..cut]).is_err(),
                "cut at {cut} did not error"
            );
        }
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let mut bytes = sample().to_bytes();
        bytes.push(0);
        let err = Checkpoint::<f32>::from_bytes(&bytes).err().unwrap();
        assert!(err.to_string().contains("trailing"), "{err}");
    }

    #[test]
    fn forged_string_length_is_rejected_without_allocating() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"LIWT");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&u64::MAX.to_le_bytes());
        let err = Checkpoint::<f32>::from_bytes(&bytes).err().unwrap();
        assert!(err.to_string().contains("length"), "{err}");
    }

    #[test]
    fn moment_size_mismatch_is_reported() {
        let mut ck = sample();
        ck.opt.as_mut().unwrap().first[0] = vec![0.0; 3];
        let err = Checkpoint::<f32>::from_bytes(&ck.to_bytes()).err().unwrap();
        assert!(err.to_string().contains("a.w"), "{err}");
    }

    #[test]
    fn config_text_is_validated() {
        let ck = sample();
        let bytes = ck.to_bytes();
        // corrupt one byte inside the config text region
        let mut broken = bytes.clone();
        let cfg_start = 16;
        broken[cfg_start] = b'!';
        assert!(Checkpoint::<f32>::from_bytes(&broken).is_err());
    }
}
