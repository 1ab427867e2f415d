//! Binary checkpoints.
//!
//! Layout (all integers little-endian `u64` unless noted):
//!
//! ```text
//! "ABNCKPT1"                         8 magic bytes
//! baseline kind                      u8: 0 = CIFAR ResNet, 1 = small VGG
//! baseline size                      depth, or convs per stage
//! in_channels, base_width, K, T, split_point
//! mechanism                          u8: 0 = none, 1 = dot, 2 = residual
//! tensor count
//! per tensor:
//!   name length, name bytes (UTF-8)
//!   rank, dims[rank]
//!   values                           product(dims) f64 little-endian
//! ```
//!
//! Tensors appear in parameter-store order. Loading rebuilds the network from
//! the spec and overwrites every tensor by name, so the stored name set must
//! match the architecture exactly.

use std::fs;
use std::path::Path;

use crate::abn::{AbnModel, Baseline, Mechanism, NetworkSpec};
use crate::error::{AbnError, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"ABNCKPT1";

/// Spec plus named tensors, independent of any built network.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: NetworkSpec,
    pub tensors: Vec<(String, Tensor)>,
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn mechanism_code(m: Mechanism) -> u8 {
    match m {
        Mechanism::None => 0,
        Mechanism::Dot => 1,
        Mechanism::Residual => 2,
    }
}

impl Checkpoint {
    pub fn from_model(model: &AbnModel) -> Self {
        Self {
            spec: model.spec,
            tensors: model
                .params
                .entries()
                .iter()
                .map(|e| (e.name.clone(), e.value.clone()))
                .collect(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let s = &self.spec;
        let (kind, size) = match s.baseline {
            Baseline::ResNetCifar { depth } => (0u8, depth),
            Baseline::SmallVgg { convs_per_stage } => (1u8, convs_per_stage),
        };
        out.push(kind);
        for v in [
            size,
            s.in_channels,
            s.base_width,
            s.num_classes,
            s.task_count,
            s.split_point,
        ] {
            put_u64(&mut out, v as u64);
        }
        out.push(mechanism_code(s.mechanism));
        put_u64(&mut out, self.tensors.len() as u64);
        for (name, t) in &self.tensors {
            put_u64(&mut out, name.len() as u64);
            out.extend_from_slice(name.as_bytes());
            put_u64(&mut out, t.rank() as u64);
            for &d in t.shape() {
                put_u64(&mut out, d as u64);
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(MAGIC.len(), "magic")?;
        if magic != MAGIC {
            return Err(AbnError::Format {
                offset: 0,
                message: format!("bad magic {:?}, expected {:?}", String::from_utf8_lossy(magic), "ABNCKPT1"),
            });
        }
        let header = "spec header";
        let kind = r.u8(header)?;
        let size = r.usize(header)?;
        let in_channels = r.usize(header)?;
        let base_width = r.usize(header)?;
        let num_classes = r.usize(header)?;
        let task_count = r.usize(header)?;
        let split_point = r.usize(header)?;
        let mech_at = r.pos;
        let mechanism = match r.u8(header)? {
            0 => Mechanism::None,
            1 => Mechanism::Dot,
            2 => Mechanism::Residual,
            m => return r.fail_at(mech_at, format!("unknown mechanism code {m}")),
        };
        let baseline = match kind {
            0 => Baseline::ResNetCifar { depth: size },
            1 => Baseline::SmallVgg {
                convs_per_stage: size,
            },
            k => return r.fail_at(MAGIC.len(), format!("unknown baseline kind {k}")),
        };
        let spec = NetworkSpec {
            baseline,
            in_channels,
            base_width,
            num_classes,
            task_count,
            split_point,
            mechanism,
        };
        let count = r.usize("tensor count")?;
        let mut tensors = Vec::new();
        for i in 0..count {
            let what = format!("name of tensor #{i}");
            let len = r.usize(&what)?;
            let start = r.pos;
            let name = String::from_utf8(r.take(len, &what)?.to_vec())
                .or_else(|_| r.fail_at(start, format!("{what} is not UTF-8")))?;
            let what = format!("tensor '{name}'");
            let rank = r.usize(&what)?;
            if rank == 0 || rank > 8 {
                return r.fail_at(r.pos - 8, format!("{what} has implausible rank {rank}"));
            }
            let dims = (0..rank).map(|_| r.usize(&what)).collect::<Result<Vec<_>>>()?;
            let len = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&l| l > 0 && l <= (r.bytes.len() - r.pos) / 8);
            let Some(len) = len else {
                return r.truncated(&what);
            };
            let raw = r.take(len * 8, &what)?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((name, Tensor::new(dims, values)?));
        }
        if r.pos != bytes.len() {
            return r.fail_at(r.pos, format!("{} unexpected trailing bytes", bytes.len() - r.pos));
        }
        Ok(Self { spec, tensors })
    }

    /// Builds the network described by the spec and installs the tensors.
    pub fn into_model(self) -> Result<AbnModel> {
        let mut model = AbnModel::build(self.spec, 0)?;
        if self.tensors.len() != model.params.len() {
            return Err(AbnError::InvalidArgument(format!(
                "checkpoint holds {} tensors, the network has {}",
                self.tensors.len(),
                model.params.len()
            )));
        }
        for (name, t) in self.tensors {
            let id = model.params.find(&name).ok_or_else(|| {
                AbnError::InvalidArgument(format!("checkpoint tensor '{name}' is not part of the network"))
            })?;
            model.params.set(id, t)?;
        }
        Ok(model)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail_at<T>(&self, offset: usize, message: String) -> Result<T> {
        Err(AbnError::Format {
            offset: offset as u64,
            message,
        })
    }

    fn truncated<T>(&self, what: &str) -> Result<T> {
        self.fail_at(self.pos, format!("file truncated while reading {what}"))
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return self.truncated(what);
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn usize(&mut self, what: &str) -> Result<usize> {
        let raw = self.take(8, what)?;
        let v = u64::from_le_bytes(raw.try_into().expect("8 bytes"));
        usize::try_from(v).or_else(|_| self.fail_at(self.pos - 8, format!("{what}: value {v} too large")))
    }
}

pub fn save_checkpoint(model: &AbnModel, path: &Path) -> Result<()> {
    fs::write(path, Checkpoint::from_model(model).encode())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<AbnModel> {
    Checkpoint::decode(&fs::read(path)?)?.into_model()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncation_names_the_tensor() {
        let model = AbnModel::build(NetworkSpec::resnet_cifar(8, 2), 1).unwrap();
        let bytes = Checkpoint::from_model(&model).encode();
        let err = Checkpoint::decode(&bytes[..bytes.len() - 3]).unwrap_err();
        let last = &model.params.entries().last().unwrap().name;
        assert!(err.to_string().contains(last.as_str()), "{err}");
    }

    #[test]
    fn bad_magic() {
        let err = Checkpoint::decode(b"ABNCKPT2rest").unwrap_err();
        assert!(matches!(err, AbnError::Format { offset: 0, .. }), "{err}");
    }
}
