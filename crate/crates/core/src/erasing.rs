//! Attentive erasing of the most activated raw-stage cells ahead of the raw global classifier.

use candle_core::Tensor;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::backbone::FeatureMap;
use crate::bas::{aggregate_channels, BinaryMask};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EraseConfig {
    pub gamma: f64,
    pub enabled_in_training: bool,
}

impl Default for EraseConfig {
    fn default() -> Self {
        Self {
            gamma: 0.85,
            enabled_in_training: true,
        }
    }
}

impl EraseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("erase.gamma must lie in (0, 1], got {}", self.gamma)));
        }
        Ok(())
    }
}

/// Cells whose channel-summed activation strictly exceeds `gamma · max`.
pub fn erase_mask(f: &FeatureMap, gamma: f64) -> Result<BinaryMask> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::Config(format!("gamma must lie in (0, 1], got {gamma}")));
    }
    let att = aggregate_channels(f)?;
    Ok(erase_mask_from_activation(&att.0, gamma))
}

pub(crate) fn erase_mask_from_activation(att: &Array2<f64>, gamma: f64) -> BinaryMask {
    let max = att.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let threshold = gamma * max;
    BinaryMask::from_fn(att.dim(), |i, j| att[[i, j]] > threshold)
}

/// `F · (1 − M)` broadcast over channels.
pub fn apply_erase(f: &FeatureMap, m: &BinaryMask) -> Result<FeatureMap> {
    let (_, h, w) = f.dims();
    let keep = keep_tensor(m, (h, w), f.tensor())?;
    FeatureMap::new(f.tensor().broadcast_mul(&keep)?)
}

fn keep_tensor(m: &BinaryMask, hw: (usize, usize), like: &Tensor) -> Result<Tensor> {
    if m.dim() != hw {
        return Err(Error::Shape(format!(
            "erase mask is {:?}, feature grid is {hw:?}",
            m.dim()
        )));
    }
    let keep: Vec<f64> = m.values().iter().map(|&v| 1.0 - v as f64).collect();
    Ok(Tensor::from_vec(keep, (1, hw.0, hw.1), like.device())?.to_dtype(like.dtype())?)
}

/// Keep-multipliers `(B, 1, h, w)` for a batch of detached features `(B, c, h, w)`.
///
/// The result is a constant: gradients flow through the kept cells only.
pub fn keep_multipliers(features: &Tensor, gamma: f64) -> Result<Tensor> {
    let (b, _, h, w) = features.dims4()?;
    let summed: Vec<Vec<Vec<f64>>> = features
        .detach()
        .to_dtype(candle_core::DType::F64)?
        .sum(1)?
        .to_vec3()?;
    let mut keep = Vec::with_capacity(b * h * w);
    for map in summed {
        let att = Array2::from_shape_fn((h, w), |(i, j)| map[i][j]);
        let m = erase_mask_from_activation(&att, gamma);
        keep.extend(m.values().iter().map(|&v| 1.0 - v as f64));
    }
    Ok(Tensor::from_vec(keep, (b, 1, h, w), features.device())?.to_dtype(features.dtype())?)
}
