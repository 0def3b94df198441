//! Binary feature-map dumps.
//!
//! Layout (little-endian): `b"FMAP"`, `u32` version, `u32` name length,
//! UTF-8 layer name, then `u64` epoch, channels, samples and per-sample
//! vector length, then `f64` values ordered `[channel][sample][element]`.

use std::fs;
use std::path::Path;

use super::{ChannelDistances, ClusterError};
use crate::losses::{pooled_view, DeltaNormMode};
use crate::scalar::Scalar;
use crate::segnet::FeatureMapRecord;

pub const DUMP_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"FMAP";

/// Pooled, normalized channel vectors of one layer at one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMapDump {
    pub layer: String,
    pub epoch: usize,
    pub channels: usize,
    pub samples: usize,
    pub vector_len: usize,
    /// `[channel][sample][element]`.
    pub data: Vec<f64>,
}

impl FeatureMapDump {
    pub fn from_record<T: Scalar>(record: &FeatureMapRecord<T>, omega: usize, mode: DeltaNormMode) -> Result<Self, ClusterError> {
        let view = pooled_view(&record.output.detach(), omega, mode)?;
        let [b, c, h, w] = view.dims4("feature_map_dump")?;
        let n = h * w;
        let src = view.data();
        let mut data = Vec::with_capacity(src.len());
        for ch in 0..c {
            for s in 0..b {
                data.extend(src[(s * c + ch) * n..(s * c + ch + 1) * n].iter().map(|v| v.as_f64()));
            }
        }
        Ok(FeatureMapDump { layer: record.layer.clone(), epoch: record.epoch, channels: c, samples: b, vector_len: n, data })
    }

    pub fn distances(&self) -> ChannelDistances {
        ChannelDistances::from_vectors(self.channels, self.samples, self.vector_len, &self.data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let name = self.layer.as_bytes();
        let mut out = Vec::with_capacity(4 + 4 + 4 + name.len() + 32 + 8 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&DUMP_VERSION.to_le_bytes());
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        for v in [self.epoch, self.channels, self.samples, self.vector_len] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ClusterError> {
        let mut at = 0usize;
        let mut take = |n: usize| -> Result<&[u8], ClusterError> {
            let end = at.checked_add(n).filter(|&e| e <= bytes.len()).ok_or(ClusterError::Dump("truncated".into()))?;
            let s = &bytes[at..end];
            at = end;
            Ok(s)
        };
        if take(4)? != MAGIC {
            return Err(ClusterError::Dump("bad magic".into()));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if version != DUMP_VERSION {
            return Err(ClusterError::Dump(format!("unsupported version {version}")));
        }
        let name_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let layer = String::from_utf8(take(name_len)?.to_vec()).map_err(|_| ClusterError::Dump("layer name is not UTF-8".into()))?;
        let mut next = || -> Result<usize, ClusterError> {
            usize::try_from(u64::from_le_bytes(take(8)?.try_into().unwrap()))
                .map_err(|_| ClusterError::Dump("header field overflows".into()))
        };
        let (epoch, channels, samples, vector_len) = (next()?, next()?, next()?, next()?);
        let count = channels
            .checked_mul(samples)
            .and_then(|v| v.checked_mul(vector_len))
            .ok_or(ClusterError::Dump("header sizes overflow".into()))?;
        let raw = take(count.checked_mul(8).ok_or(ClusterError::Dump("header sizes overflow".into()))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        if at != bytes.len() {
            return Err(ClusterError::Dump(format!("{} trailing bytes", bytes.len() - at)));
        }
        Ok(FeatureMapDump { layer, epoch, channels, samples, vector_len, data })
    }

    pub fn write(&self, path: &Path) -> Result<(), ClusterError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, ClusterError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn bytes_round_trip_and_layout() {
        let output = Tensor::<f64>::from_f64(&(0..16).map(f64::from).collect::<Vec<_>>(), [2, 2, 2, 2]).unwrap();
        let rec = FeatureMapRecord { layer: "enc_conv_1".into(), layer_index: 0, epoch: 3, output };
        let d = FeatureMapDump::from_record(&rec, 1, DeltaNormMode::None).unwrap();
        // channel 0: sample 0 then sample 1
        assert_eq!(&d.data[..8], &[0., 1., 2., 3., 8., 9., 10., 11.]);
        let back = FeatureMapDump::from_bytes(&d.to_bytes()).unwrap();
        assert_eq!(back, d);
        let bytes = d.to_bytes();
        assert!(FeatureMapDump::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
