//! Versioned network checkpoints.
//!
//! Layout: 8-byte magic, `u32` version, `u64` manifest length, JSON
//! manifest, then every array as little-endian `f64` in manifest order.
//! All integers are little-endian.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{
    Activation, LayerKind, NetworkError, NetworkGraph, NormKind, PrunableConvLayer, RunningStats, Source, UnetSpec,
};
use crate::optim::Param;
use crate::scalar::Scalar;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"FMPCKPT\0";
const HEADER_LEN: usize = 8 + 4 + 8;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },
    #[error("checkpoint truncated: needed {needed} bytes, found {found}")]
    Truncated { needed: usize, found: usize },
    #[error("checkpoint has {0} trailing bytes")]
    Trailing(usize),
    #[error("checkpoint manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("checkpoint inconsistent: {0}")]
    Inconsistent(String),
    #[error("checkpoint describes an invalid network: {0}")]
    Network(#[from] NetworkError),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    spec: UnetSpec,
    layers: Vec<LayerEntry>,
    /// Total number of `f64` values in the payload.
    payload_len: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerEntry {
    name: String,
    kind: LayerKind,
    kernel: usize,
    stride: usize,
    padding: usize,
    in_channels: usize,
    out_channels: usize,
    norm: NormKind,
    activation: Activation,
    prunable: bool,
    inputs: Vec<Source>,
    channel_ids: Vec<usize>,
    /// Payload order: weight, bias, then gamma and beta when normalized,
    /// then running mean and variance when present.
    has_running: bool,
}

impl LayerEntry {
    fn payload_len(&self) -> usize {
        let o = self.out_channels;
        let mut n = o * self.in_channels * self.kernel * self.kernel + o;
        if self.norm != NormKind::None {
            n += 2 * o;
        }
        if self.has_running {
            n += 2 * o;
        }
        n
    }
}

pub fn save_checkpoint<T: Scalar>(net: &NetworkGraph<T>, path: &Path) -> Result<(), CheckpointError> {
    net.audit()?;
    let mut payload: Vec<f64> = Vec::new();
    let mut entries = Vec::with_capacity(net.layers().len());
    for l in net.layers() {
        let mut push = |xs: &[T]| payload.extend(xs.iter().map(|v| v.as_f64()));
        push(l.weight.value().data());
        push(l.bias.value().data());
        if let Some((g, b)) = &l.affine {
            push(g.value().data());
            push(b.value().data());
        }
        if let Some(r) = &l.running {
            push(&r.mean);
            push(&r.var);
        }
        entries.push(LayerEntry {
            name: l.name.clone(),
            kind: l.kind,
            kernel: l.kernel,
            stride: l.stride,
            padding: l.padding,
            in_channels: l.in_channels(),
            out_channels: l.out_channels(),
            norm: l.norm,
            activation: l.activation,
            prunable: l.prunable,
            inputs: l.inputs.clone(),
            channel_ids: l.channel_ids.clone(),
            has_running: l.running.is_some(),
        });
    }
    let manifest =
        serde_json::to_vec_pretty(&Manifest { version: CHECKPOINT_VERSION, spec: net.spec, layers: entries, payload_len: payload.len() })?;
    let mut bytes = Vec::with_capacity(HEADER_LEN + manifest.len() + 8 * payload.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&manifest);
    for v in payload {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    // write-then-rename so a crash never leaves a half-written checkpoint
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, n: usize) -> Result<&'a [u8], CheckpointError> {
    let end = at.checked_add(n).filter(|&e| e <= bytes.len()).ok_or(CheckpointError::Truncated {
        needed: at.saturating_add(n),
        found: bytes.len(),
    })?;
    let s = &bytes[*at..end];
    *at = end;
    Ok(s)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<NetworkGraph<T>, CheckpointError> {
    decode(&fs::read(path)?)
}

fn decode<T: Scalar>(bytes: &[u8]) -> Result<NetworkGraph<T>, CheckpointError> {
    let mut at = 0;
    if take(bytes, &mut at, 8)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u32::from_le_bytes(take(bytes, &mut at, 4)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::UnsupportedVersion { found: version, expected: CHECKPOINT_VERSION });
    }
    let mlen = u64::from_le_bytes(take(bytes, &mut at, 8)?.try_into().unwrap());
    let mlen = usize::try_from(mlen).map_err(|_| CheckpointError::Inconsistent("manifest length overflows".into()))?;
    let manifest: Manifest = serde_json::from_slice(take(bytes, &mut at, mlen)?)?;
    if manifest.version != version {
        return Err(CheckpointError::Inconsistent(format!(
            "header version {version} but manifest version {}",
            manifest.version
        )));
    }
    let declared: usize = manifest.layers.iter().map(LayerEntry::payload_len).sum();
    if declared != manifest.payload_len {
        return Err(CheckpointError::Inconsistent(format!(
            "layer shapes need {declared} values, manifest declares {}",
            manifest.payload_len
        )));
    }
    let raw = take(bytes, &mut at, 8 * manifest.payload_len)?;
    if at != bytes.len() {
        return Err(CheckpointError::Trailing(bytes.len() - at));
    }
    let mut values = raw.chunks_exact(8).map(|c| T::from_f64_lossy(f64::from_le_bytes(c.try_into().unwrap())));
    let mut next = |n: usize| -> Vec<T> { values.by_ref().take(n).collect() };

    let mut layers = Vec::with_capacity(manifest.layers.len());
    for e in manifest.layers {
        let (o, c, k) = (e.out_channels, e.in_channels, e.kernel);
        if e.channel_ids.len() != o {
            return Err(CheckpointError::Inconsistent(format!("{}: {} channel ids for {o} filters", e.name, e.channel_ids.len())));
        }
        let weight = Param::new(next(o * c * k * k), [o, c, k, k]).map_err(NetworkError::from)?;
        let bias = Param::new(next(o), [o]).map_err(NetworkError::from)?;
        let affine = if e.norm == NormKind::None {
            None
        } else {
            let g = Param::new(next(o), [o]).map_err(NetworkError::from)?;
            let b = Param::new(next(o), [o]).map_err(NetworkError::from)?;
            Some((g, b))
        };
        let running = e.has_running.then(|| RunningStats { mean: next(o), var: next(o) });
        layers.push(PrunableConvLayer {
            name: e.name,
            kind: e.kind,
            kernel: k,
            stride: e.stride,
            padding: e.padding,
            weight,
            bias,
            norm: e.norm,
            affine,
            running,
            activation: e.activation,
            prunable: e.prunable,
            inputs: e.inputs,
            channel_ids: e.channel_ids,
        });
    }
    Ok(NetworkGraph::from_layers(manifest.spec, layers)?)
}
