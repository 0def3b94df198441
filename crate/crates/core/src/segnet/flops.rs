use serde::{Deserialize, Serialize};

use super::{LayerKind, NetworkError, NetworkGraph, Result, Source};
use crate::scalar::Scalar;

/// Cost inputs of one convolution: `H·W·C_in·C_out·K²`, times `D·K` in 3-D.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub h: usize,
    pub w: usize,
    pub d: Option<usize>,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
}

impl LayerCost {
    /// All counts must be positive.
    pub fn new(h: usize, w: usize, d: Option<usize>, c_in: usize, c_out: usize, k: usize) -> Result<Self> {
        if [h, w, c_in, c_out, k, d.unwrap_or(1)].contains(&0) {
            return Err(NetworkError::Architecture(format!(
                "FLOPs terms must be positive: h={h} w={w} d={d:?} c_in={c_in} c_out={c_out} k={k}"
            )));
        }
        Ok(LayerCost { h, w, d, c_in, c_out, k })
    }

    pub fn flops(&self) -> u64 {
        let mut f = [self.h, self.w, self.c_in, self.c_out, self.k, self.k]
            .iter()
            .fold(1u64, |acc, &v| acc.saturating_mul(v as u64));
        if let Some(d) = self.d {
            f = f.saturating_mul(d as u64).saturating_mul(self.k as u64);
        }
        f
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub total: u64,
    /// `(layer name, cost terms, flops)` in network order.
    pub per_layer: Vec<(String, LayerCost, u64)>,
}

/// Counts convolution FLOPs for an `h x w` input.
///
/// Convolutions use their output size. Transposed convolutions use their
/// input size, which is the number of multiply-accumulates they perform.
pub fn count_flops<T: Scalar>(net: &NetworkGraph<T>, h: usize, w: usize) -> Result<FlopsReport> {
    net.check_input(&[1, net.spec.in_channels, h, w])?;
    let mut sizes: Vec<(usize, usize)> = Vec::with_capacity(net.layers().len());
    let mut per_layer = Vec::with_capacity(net.layers().len());
    let mut total = 0u64;
    for layer in net.layers() {
        let (hi, wi) = match layer.inputs[0] {
            Source::Input => (h, w),
            Source::Layer(j) => sizes[j],
        };
        let (ho, wo) = layer
            .output_size(hi, wi)
            .ok_or_else(|| NetworkError::Architecture(format!("{}: input {hi}x{wi} too small", layer.name)))?;
        let (ch, cw) = match layer.kind {
            LayerKind::Conv => (ho, wo),
            LayerKind::ConvTranspose => (hi, wi),
        };
        let cost = LayerCost::new(ch, cw, None, layer.in_channels(), layer.out_channels(), layer.kernel)?;
        let f = cost.flops();
        total = total.saturating_add(f);
        per_layer.push((layer.name.clone(), cost, f));
        sizes.push((ho, wo));
    }
    Ok(FlopsReport { total, per_layer })
}

/// Percentage decrease `100·(1 − after/before)`.
pub fn flops_reduction(before: u64, after: u64) -> Result<f64> {
    if before == 0 {
        return Err(NetworkError::ZeroFlops);
    }
    if after > before {
        return Err(NetworkError::FlopsIncreased { before, after });
    }
    Ok(100.0 * (1.0 - after as f64 / before as f64))
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;
    use crate::segnet::{NormKind, UnetSpec};

    #[test]
    fn formula_examples() {
        assert_eq!(LayerCost::new(4, 4, None, 2, 3, 3).unwrap().flops(), 864);
        assert_eq!(LayerCost::new(4, 4, None, 2, 6, 3).unwrap().flops(), 1728);
        assert_eq!(LayerCost::new(4, 4, Some(4), 2, 3, 3).unwrap().flops(), 864 * 12);
        assert!(LayerCost::new(4, 0, None, 2, 3, 3).is_err());
    }

    #[test]
    fn reduction_examples() {
        assert_eq!(flops_reduction(1000, 100).unwrap(), 90.0);
        assert_eq!(flops_reduction(1000, 1000).unwrap(), 0.0);
        assert!(matches!(flops_reduction(10, 11), Err(NetworkError::FlopsIncreased { .. })));
        assert!(matches!(flops_reduction(0, 0), Err(NetworkError::ZeroFlops)));
    }

    #[test]
    #[allow(clippy::identity_op)]
    fn two_level_count_by_hand() {
        let spec = UnetSpec { levels: 2, init_filters: 2, in_channels: 1, num_classes: 2, norm: NormKind::Instance };
        let net = NetworkGraph::<f64>::build_unet(spec, 0).unwrap();
        let r = count_flops(&net, 8, 8).unwrap();
        let want = [
            64 * 1 * 2 * 9,  // enc_conv_1
            64 * 2 * 2 * 9,  // enc_conv_2
            16 * 2 * 4 * 9,  // enc_conv_3 (stride 2)
            16 * 4 * 4 * 9,  // enc_conv_4
            16 * 4 * 2 * 4,  // dec_trans_1 at its 4x4 input
            64 * 4 * 2 * 9,  // dec_conv_1 on [up, skip]
            64 * 2 * 2 * 9,  // dec_conv_2
            64 * 2 * 2,      // out_conv
        ];
        let got: Vec<u64> = r.per_layer.iter().map(|(_, _, f)| *f).collect();
        assert_eq!(got, want);
        assert_eq!(r.total, want.iter().sum::<u64>());
    }

    #[test]
    fn any_removal_strictly_lowers_flops() {
        let spec = UnetSpec { levels: 3, init_filters: 4, in_channels: 1, num_classes: 2, norm: NormKind::Instance };
        let mut net = NetworkGraph::<f64>::build_unet(spec, 0).unwrap();
        let mut last = count_flops(&net, 16, 16).unwrap().total;
        for li in net.prunable_indices() {
            net.remove_filters_at(li, &BTreeSet::from([0])).unwrap();
            let now = count_flops(&net, 16, 16).unwrap().total;
            assert!(now < last);
            last = now;
        }
    }
}
