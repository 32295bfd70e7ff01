//! Network checkpoints.
//!
//! Layout: 8-byte magic, u32 LE version, u64 LE metadata length, UTF-8 JSON
//! metadata, u64 LE value count, then that many LE f64 values. Per ACL the
//! values are each kernel's AKPs, the bias, then the aspect of every Gabor
//! kernel; per linear layer the weights then the bias.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{read_file, write_atomic, DataError};
use crate::acl::AclLayer;
use crate::arrangement::Arrangement;
use crate::conv::ConvHyper;
use crate::kernels::{KernelFamily, KernelSize, KernelSpec};
use crate::nn::{Linear, Network, Node};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ANACONV\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize, Debug)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum LayerMeta {
    Acl { pattern: String, kernel: [usize; 2], stride: usize, padding: usize, dilation: usize },
    Maxpool { kernel: usize, stride: usize },
    Relu,
    Flatten,
    Linear { in_features: usize, out_features: usize },
}

#[derive(Serialize, Deserialize, Debug)]
struct Meta {
    input_dims: [usize; 3],
    layers: Vec<LayerMeta>,
    #[serde(default)]
    training: serde_json::Value,
}

/// A restored network and the free-form training metadata stored with it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub network: Network,
    pub training: serde_json::Value,
}

pub fn encode_checkpoint(net: &Network, training: &serde_json::Value) -> Vec<u8> {
    let mut layers = Vec::new();
    let mut values: Vec<f64> = Vec::new();
    for node in net.nodes() {
        layers.push(match node {
            Node::Acl(l) => {
                for s in l.specs() {
                    values.extend_from_slice(&s.akps);
                }
                values.extend_from_slice(l.bias());
                values.extend(l.specs().iter().filter(|s| s.family == KernelFamily::Gabor).map(|s| s.aspect));
                let h = l.hyper();
                LayerMeta::Acl {
                    pattern: l.arrangement().serialize(),
                    kernel: [l.kernel_size().h, l.kernel_size().w],
                    stride: h.stride,
                    padding: h.padding,
                    dilation: h.dilation,
                }
            }
            Node::MaxPool { kernel, stride } => LayerMeta::Maxpool { kernel: *kernel, stride: *stride },
            Node::Relu => LayerMeta::Relu,
            Node::Flatten => LayerMeta::Flatten,
            Node::Linear(l) => {
                values.extend_from_slice(&l.weight);
                values.extend_from_slice(&l.bias);
                LayerMeta::Linear { in_features: l.in_features, out_features: l.out_features }
            }
        });
    }
    let meta = Meta { input_dims: net.input_dims(), layers, training: training.clone() };
    let meta = serde_json::to_vec(&meta).expect("metadata serializes");

    let mut out = Vec::with_capacity(28 + meta.len() + 8 * values.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], DataError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| DataError::Corrupt(format!("truncated {what} at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64, DataError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

struct Values<'a> {
    data: &'a [f64],
    pos: usize,
}

impl Values<'_> {
    fn take(&mut self, n: usize) -> Result<Vec<f64>, DataError> {
        let s = self
            .data
            .get(self.pos..self.pos + n)
            .ok_or_else(|| DataError::Corrupt("value block shorter than the layers require".into()))?;
        self.pos += n;
        Ok(s.to_vec())
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, DataError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "header")? != CHECKPOINT_MAGIC {
        return Err(DataError::Corrupt("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(r.take(4, "header")?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(DataError::Version { found: version, expected: CHECKPOINT_VERSION });
    }
    let meta_len = r.u64("header")? as usize;
    let meta: Meta = serde_json::from_slice(r.take(meta_len, "metadata")?)
        .map_err(|e| DataError::Corrupt(format!("metadata: {e}")))?;
    let count = r.u64("value count")? as usize;
    let raw =
        r.take(count.checked_mul(8).ok_or_else(|| DataError::Corrupt("value count overflow".into()))?, "values")?;
    if r.pos != bytes.len() {
        return Err(DataError::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let data: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    let mut vals = Values { data: &data, pos: 0 };

    let mut nodes = Vec::with_capacity(meta.layers.len());
    for (index, layer) in meta.layers.into_iter().enumerate() {
        let corrupt = |e: String| DataError::Corrupt(format!("layer {index}: {e}"));
        nodes.push(match layer {
            LayerMeta::Acl { pattern, kernel, stride, padding, dilation } => {
                let arrangement: Arrangement = pattern.parse().map_err(|e| corrupt(format!("{e}")))?;
                let size = KernelSize::new(kernel[0], kernel[1]);
                let mut specs = Vec::new();
                for family in arrangement.flattened() {
                    let akps = vals.take(family.akp_count(size))?;
                    specs.push(KernelSpec::new(family, akps, size).map_err(|e| corrupt(e.to_string()))?);
                }
                let bias = vals.take(arrangement.out_channels)?;
                for s in specs.iter_mut().filter(|s| s.family == KernelFamily::Gabor) {
                    s.aspect = vals.take(1)?[0];
                }
                let hyper = ConvHyper { stride, padding, dilation };
                Node::Acl(
                    AclLayer::from_parts(arrangement, size, specs, bias, hyper).map_err(|e| corrupt(e.to_string()))?,
                )
            }
            LayerMeta::Maxpool { kernel, stride } => Node::MaxPool { kernel, stride },
            LayerMeta::Relu => Node::Relu,
            LayerMeta::Flatten => Node::Flatten,
            LayerMeta::Linear { in_features, out_features } => Node::Linear(Linear {
                in_features,
                out_features,
                weight: vals.take(in_features * out_features)?,
                bias: vals.take(out_features)?,
            }),
        });
    }
    if vals.pos != data.len() {
        return Err(DataError::Corrupt(format!("{} unused values", data.len() - vals.pos)));
    }
    let network = Network::new(meta.input_dims, nodes).map_err(|e| DataError::Corrupt(e.to_string()))?;
    Ok(Checkpoint { network, training: meta.training })
}

pub fn save_checkpoint(net: &Network, training: &serde_json::Value, path: &Path) -> Result<(), DataError> {
    write_atomic(path, &encode_checkpoint(net, training))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, DataError> {
    decode_checkpoint(&read_file(path)?)
}
