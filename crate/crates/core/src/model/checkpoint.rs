//! "IDFC" checkpoint files.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic    b"IDFC"
//! version  u32
//! records  repeated until EOF:
//!            name_len u32, name (UTF-8), rank u32, extents u32 × rank,
//!            payload f32 × product(extents)
//! ```
//!
//! Records are written in name order, so equal checkpoints serialize to
//! equal bytes.

use std::collections::BTreeMap;
use std::path::Path;

use super::{HeadConfig, MhfaConfig, Model, ModelConfig, ModelParams, DOMAIN, SPOOF};
use crate::autodiff::BatchNormState;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"IDFC";
pub const CHECKPOINT_VERSION: u32 = 1;

const RUNNING_MEAN: &str = "bn.running_mean";
const RUNNING_VAR: &str = "bn.running_var";
const DROPOUT: &str = "dropout";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Format {
                offset: 0,
                detail: format!("bad magic {magic:?}, expected \"IDFC\""),
            });
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format {
                offset: 4,
                detail: format!("unsupported version {version}"),
            });
        }
        let mut tensors = BTreeMap::new();
        while r.pos < bytes.len() {
            let start = r.pos;
            let len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| Error::Format {
                    offset: start + 4,
                    detail: "record name is not UTF-8".into(),
                })?
                .to_owned();
            let rank = r.u32("rank")? as usize;
            let shape = (0..rank)
                .map(|_| r.u32("extent").map(|e| e as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let payload = r.take(n * 4, "payload")?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::Format {
                offset: start,
                detail: format!("record {name}: {e}"),
            })?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(Error::Format {
                    offset: start,
                    detail: format!("duplicate record {name}"),
                });
            }
        }
        Ok(Checkpoint { tensors })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.bytes.len(),
                detail: format!(
                    "truncated {what}: need {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn write_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

/// The f64 with the same shortest decimal form, so a rate stored as 0.2f32
/// reads back as 0.2.
fn shortest_f64(v: f32) -> f64 {
    v.to_string().parse().unwrap_or(v as f64)
}

fn shape_of(ckpt: &Checkpoint, name: &str) -> Result<Vec<usize>> {
    ckpt.tensors
        .get(name)
        .map(|t| t.shape().to_vec())
        .ok_or_else(|| Error::Format {
            offset: 0,
            detail: format!("checkpoint lacks {name}"),
        })
}

fn dim(shape: &[usize], i: usize, name: &str) -> Result<usize> {
    shape.get(i).copied().ok_or_else(|| Error::Format {
        offset: 0,
        detail: format!("{name} has rank {}", shape.len()),
    })
}

impl<T: Real> Model<T> {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors: BTreeMap<String, Tensor<f32>> = self
            .params
            .tensors
            .iter()
            .map(|(k, v)| (k.clone(), v.cast()))
            .collect();
        for (prefix, state) in &self.params.batch_norm {
            let vec = |v: &[T]| {
                Tensor::new(vec![v.len()], v.iter().map(|x| x.f64() as f32).collect()).expect("non-empty")
            };
            tensors.insert(format!("{prefix}.{RUNNING_MEAN}"), vec(&state.running_mean));
            tensors.insert(format!("{prefix}.{RUNNING_VAR}"), vec(&state.running_var));
        }
        let heads = std::iter::once((SPOOF, &self.config.spoof_head))
            .chain(self.config.domain_head.as_ref().map(|h| (DOMAIN, h)));
        for (prefix, h) in heads {
            tensors.insert(format!("{prefix}.{DROPOUT}"), Tensor::scalar(h.dropout as f32));
        }
        Checkpoint { tensors }
    }

    /// Rebuilds a model from a checkpoint, inferring the architecture from
    /// tensor shapes and rejecting any record that does not fit it.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let key = shape_of(ckpt, "mhfa.key_proj")?;
        let value = shape_of(ckpt, "mhfa.value_proj")?;
        let out = shape_of(ckpt, "mhfa.out_proj")?;
        let layers = shape_of(ckpt, "mhfa.layer_key")?;
        let mhfa = MhfaConfig {
            num_layers: dim(&layers, 0, "mhfa.layer_key")?,
            frame_dim: dim(&key, 0, "mhfa.key_proj")?,
            num_heads: dim(&key, 1, "mhfa.key_proj")?,
            value_dim: dim(&value, 1, "mhfa.value_proj")?,
            embedding_dim: dim(&out, 1, "mhfa.out_proj")?,
        };
        let head_cfg = |prefix: &str| -> Result<HeadConfig> {
            let fc1 = shape_of(ckpt, &format!("{prefix}.fc1.weight"))?;
            let fc2 = shape_of(ckpt, &format!("{prefix}.fc2.weight"))?;
            let dropout = ckpt
                .tensors
                .get(&format!("{prefix}.{DROPOUT}"))
                .map_or(0.0, |t| shortest_f64(t.data()[0]));
            Ok(HeadConfig {
                hidden_dim: dim(&fc1, 1, "fc1.weight")?,
                dropout,
                num_outputs: dim(&fc2, 1, "fc2.weight")?,
            })
        };
        let config = ModelConfig {
            mhfa,
            encoder: ckpt.tensors.contains_key("encoder.weight"),
            spoof_head: head_cfg(SPOOF)?,
            domain_head: if ckpt.tensors.contains_key("domain.fc1.weight") {
                Some(head_cfg(DOMAIN)?)
            } else {
                None
            },
        };
        config.validate()?;

        let template = Model::<T>::init(config.clone(), 0)?;
        let mut tensors = BTreeMap::new();
        let mut batch_norm = BTreeMap::new();
        let mut expected = 0;
        for (name, t) in &template.params.tensors {
            let got = ckpt.tensors.get(name).ok_or_else(|| Error::Format {
                offset: 0,
                detail: format!("checkpoint lacks {name}"),
            })?;
            if got.shape() != t.shape() {
                return Err(Error::dim(
                    "checkpoint",
                    format!("{name}: expected {:?}, found {:?}", t.shape(), got.shape()),
                ));
            }
            tensors.insert(name.clone(), got.cast());
            expected += 1;
        }
        for (prefix, state) in &template.params.batch_norm {
            let mut load = |suffix: &str| -> Result<Vec<T>> {
                let name = format!("{prefix}.{suffix}");
                let t = ckpt.tensors.get(&name).ok_or_else(|| Error::Format {
                    offset: 0,
                    detail: format!("checkpoint lacks {name}"),
                })?;
                if t.len() != state.running_mean.len() {
                    return Err(Error::dim("checkpoint", format!("{name} has {} values", t.len())));
                }
                expected += 1;
                Ok(t.data().iter().map(|&v| T::of(v as f64)).collect())
            };
            let running_mean = load(RUNNING_MEAN)?;
            let running_var = load(RUNNING_VAR)?;
            batch_norm.insert(
                prefix.clone(),
                BatchNormState {
                    running_mean,
                    running_var,
                },
            );
        }
        let meta = ckpt.tensors.keys().filter(|k| k.ends_with(DROPOUT)).count();
        if ckpt.tensors.len() != expected + meta {
            let unknown: Vec<_> = ckpt
                .tensors
                .keys()
                .filter(|k| !template.params.tensors.contains_key(*k) && !k.contains(".bn.running_") && !k.ends_with(DROPOUT))
                .cloned()
                .collect();
            return Err(Error::Format {
                offset: 0,
                detail: format!("unexpected records {unknown:?}"),
            });
        }
        Ok(Model {
            config,
            params: ModelParams { tensors, batch_norm },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_then_records() {
        let mut ckpt = Checkpoint::default();
        ckpt.tensors.insert("w".into(), Tensor::new(vec![1, 2], vec![1.0, -2.0]).unwrap());
        let bytes = ckpt.to_bytes();
        // magic 4 + version 4 + name_len 4 + name 1 + rank 4 + extents 8 + payload 8
        assert_eq!(bytes.len(), 33);
        assert_eq!(&bytes[..4], b"IDFC");
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ckpt);
    }

    #[test]
    fn truncation_and_bad_magic_are_format_errors() {
        let mut ckpt = Checkpoint::default();
        ckpt.tensors.insert("w".into(), Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let bytes = ckpt.to_bytes();
        let cut = &bytes[..bytes.len() - 2];
        match Checkpoint::from_bytes(cut) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, cut.len()),
            other => panic!("{other:?}"),
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn model_round_trip_through_checkpoint() {
        let model = Model::<f32>::init(ModelConfig::desk(2, 6, 3), 4).unwrap();
        let back = Model::<f32>::from_checkpoint(&model.to_checkpoint()).unwrap();
        assert_eq!(back, model);
    }

    #[test]
    fn unknown_records_are_rejected() {
        let model = Model::<f32>::init(ModelConfig::desk(2, 6, 2), 4).unwrap();
        let mut ckpt = model.to_checkpoint();
        ckpt.tensors.insert("stray".into(), Tensor::scalar(1.0));
        assert!(Model::<f32>::from_checkpoint(&ckpt).is_err());
    }
}
