//! Shared feature extractor and the two global classifier heads.
//!
//! The extractor parameters serve both the raw and the refined stage; the heads are the
//! only stage-specific parameters. Inputs are batches shaped `(B, 3, H, W)` and outputs
//! `(B, c, h, w)`, non-negative by construction.

mod arch;
mod checkpoint;
pub mod layers;
mod variance;

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::data::Image;
use crate::{Error, Result};
use arch::Extractor;
use layers::{ParamKind, ParamStore};

pub use checkpoint::CheckpointMeta;
pub use variance::VarianceExtractor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Architecture {
    #[serde(rename = "conv64")]
    Conv64,
    #[serde(rename = "resnet12")]
    ResNet12,
    #[serde(rename = "resnet18-like")]
    ResNet18Like,
    #[serde(rename = "tiny-test")]
    TinyTest,
}

impl Architecture {
    pub const ALL: [Architecture; 4] = [
        Architecture::Conv64,
        Architecture::ResNet12,
        Architecture::ResNet18Like,
        Architecture::TinyTest,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Architecture::Conv64 => "conv64",
            Architecture::ResNet12 => "resnet12",
            Architecture::ResNet18Like => "resnet18-like",
            Architecture::TinyTest => "tiny-test",
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Architecture::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown architecture `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub architecture: Architecture,
    pub input_size: usize,
    pub drop_last_pool: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::ResNet12,
            input_size: 84,
            drop_last_pool: true,
        }
    }
}

impl BackboneConfig {
    pub fn new(architecture: Architecture) -> Self {
        Self {
            architecture,
            ..Self::default()
        }
    }

    pub fn output_channels(&self) -> usize {
        match self.architecture {
            Architecture::Conv64 => 64,
            Architecture::ResNet12 | Architecture::ResNet18Like => 512,
            Architecture::TinyTest => 8,
        }
    }

    /// Spatial size of the output grid for a square `input_size` input.
    pub fn output_spatial(&self) -> (usize, usize) {
        let s = self.input_size;
        let ceil_half = |s: usize| s.div_ceil(2);
        let out = match self.architecture {
            Architecture::Conv64 => {
                let s = s / 2 / 2 / 2;
                if self.drop_last_pool {
                    s
                } else {
                    s / 2
                }
            }
            Architecture::ResNet12 => {
                let s = ceil_half(ceil_half(ceil_half(s)));
                if self.drop_last_pool {
                    s
                } else {
                    ceil_half(s)
                }
            }
            Architecture::ResNet18Like => {
                let s = ceil_half(ceil_half(ceil_half(s)));
                if self.drop_last_pool {
                    s
                } else {
                    ceil_half(s)
                }
            }
            Architecture::TinyTest => {
                let s = s / 4 / 2;
                if self.drop_last_pool {
                    s
                } else {
                    s / 2
                }
            }
        };
        (out, out)
    }

    pub fn output_shape(&self) -> (usize, usize, usize) {
        let (h, w) = self.output_spatial();
        (self.output_channels(), h, w)
    }
}

/// A single `c×h×w` feature map.
#[derive(Clone, Debug)]
pub struct FeatureMap(Tensor);

impl FeatureMap {
    pub fn new(tensor: Tensor) -> Result<Self> {
        let dims = tensor.dims();
        if dims.len() != 3 || dims.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!(
                "feature map must be a non-empty c×h×w tensor, got {dims:?}"
            )));
        }
        Ok(Self(tensor))
    }

    pub fn from_vec(data: Vec<f64>, shape: (usize, usize, usize)) -> Result<Self> {
        let (c, h, w) = shape;
        if data.len() != c * h * w {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {c}×{h}×{w} feature map",
                data.len()
            )));
        }
        Self::new(Tensor::from_vec(data, shape, &Device::Cpu)?)
    }

    pub fn from_array(a: &Array3<f64>) -> Result<Self> {
        Self::from_vec(a.iter().copied().collect(), a.dim())
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let d = self.0.dims();
        (d[0], d[1], d[2])
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn to_array(&self) -> Result<Array3<f64>> {
        let data: Vec<f64> = self.0.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        Array3::from_shape_vec(self.dims(), data).map_err(|e| Error::Shape(e.to_string()))
    }

    pub fn is_finite(&self) -> Result<bool> {
        Ok(self.to_array()?.iter().all(|v| v.is_finite()))
    }
}

/// Global average pooling of a single feature map.
pub fn gap(f: &FeatureMap) -> Result<Vec<f64>> {
    let pooled = gap_batch(&f.tensor().unsqueeze(0)?)?;
    Ok(pooled.squeeze(0)?.to_dtype(DType::F64)?.to_vec1()?)
}

/// `(B, c, h, w) -> (B, c)` spatial means.
pub fn gap_batch(features: &Tensor) -> Result<Tensor> {
    Ok(features.flatten_from(2)?.mean(2)?)
}

/// Bias-free linear classifier over the base-category space.
pub struct ClassifierHead {
    weight: candle_core::Var,
}

impl ClassifierHead {
    fn new(store: &mut ParamStore, name: &str, num_classes: usize, channels: usize) -> Result<Self> {
        let weight = store.normal(&format!("{name}.weight"), &[num_classes, channels], (channels as f64).recip().sqrt())?;
        Ok(Self { weight })
    }

    /// Wraps an explicit `G×c` weight matrix.
    pub fn from_weights(weights: Tensor) -> Result<Self> {
        if weights.rank() != 2 {
            return Err(Error::Shape(format!("head weights must be G×c, got {:?}", weights.dims())));
        }
        Ok(Self {
            weight: candle_core::Var::from_tensor(&weights)?,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn weights(&self) -> &Tensor {
        self.weight.as_tensor()
    }

    /// `(B, c) -> (B, G)` logits.
    pub fn logits(&self, pooled: &Tensor) -> Result<Tensor> {
        let c = pooled.dim(1)?;
        if c != self.in_channels() {
            return Err(Error::Shape(format!(
                "classifier expects {} channels, got {c}",
                self.in_channels()
            )));
        }
        Ok(pooled.matmul(&self.weight.as_tensor().t()?)?)
    }
}

/// Logits of one feature map under a head; softmax is left to the loss.
pub fn classify_global(f: &FeatureMap, head: &ClassifierHead) -> Result<Vec<f64>> {
    let (c, _, _) = f.dims();
    if c != head.in_channels() {
        return Err(Error::Shape(format!(
            "head expects {} channels, feature map has {c}",
            head.in_channels()
        )));
    }
    let pooled = gap_batch(&f.tensor().unsqueeze(0)?)?.to_dtype(head.weights().dtype())?;
    let logits = head.logits(&pooled)?;
    Ok(logits.squeeze(0)?.to_dtype(DType::F64)?.to_vec1()?)
}

/// Anything that maps an image to a feature map.
pub trait FeatureExtractor {
    fn extract(&self, image: &Image) -> Result<FeatureMap>;
}

/// Extractor plus the raw-stage and refined-stage heads.
pub struct Model {
    config: BackboneConfig,
    params: ParamStore,
    extractor: Extractor,
    head_raw: ClassifierHead,
    head_refined: ClassifierHead,
}

impl Model {
    pub fn new(config: BackboneConfig, num_base_classes: usize, dtype: DType, seed: u64) -> Result<Self> {
        if config.input_size == 0 {
            return Err(Error::Config("input_size must be positive".into()));
        }
        let (h, w) = config.output_spatial();
        if h == 0 || w == 0 {
            return Err(Error::Config(format!(
                "input size {} is too small for {}",
                config.input_size, config.architecture
            )));
        }
        if num_base_classes == 0 {
            return Err(Error::Config("at least one base class is required".into()));
        }
        let mut params = ParamStore::new(dtype, seed);
        let extractor = Extractor::build(&config, &mut params)?;
        let c = config.output_channels();
        let head_raw = ClassifierHead::new(&mut params, "head_raw", num_base_classes, c)?;
        let head_refined = ClassifierHead::new(&mut params, "head_refined", num_base_classes, c)?;
        Ok(Self {
            config,
            params,
            extractor,
            head_raw,
            head_refined,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn num_classes(&self) -> usize {
        self.head_raw.num_classes()
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn head_raw(&self) -> &ClassifierHead {
        &self.head_raw
    }

    pub fn head_refined(&self) -> &ClassifierHead {
        &self.head_refined
    }

    /// `(B, 3, H, W) -> (B, c, h, w)`.
    pub fn forward(&self, images: &Tensor, train: bool) -> Result<Tensor> {
        let (_, ch, h, w) = images.dims4()?;
        let s = self.config.input_size;
        if ch != 3 || h != s || w != s {
            return Err(Error::Config(format!(
                "{} expects 3×{s}×{s} inputs, got {ch}×{h}×{w}",
                self.config.architecture
            )));
        }
        self.extractor.forward(&images.to_dtype(self.dtype())?, train)
    }

    /// Runs the extractor over a list of images in inference mode.
    pub fn extract_batch(&self, images: &[&Image]) -> Result<Vec<FeatureMap>> {
        let x = images_to_tensor(images, self.dtype())?;
        let f = self.forward(&x, false)?.detach();
        (0..images.len()).map(|i| FeatureMap::new(f.get(i)?)).collect()
    }

    /// Extractor parameters only (excludes the heads).
    pub fn extractor_params(&self) -> impl Iterator<Item = (&str, &candle_core::Var, ParamKind)> {
        self.params.iter().filter(|(name, _, _)| name.starts_with("extractor."))
    }
}

impl FeatureExtractor for Model {
    fn extract(&self, image: &Image) -> Result<FeatureMap> {
        let mut maps = self.extract_batch(&[image])?;
        Ok(maps.remove(0))
    }
}

/// Stacks HWC images into a `(B, 3, H, W)` tensor.
pub fn images_to_tensor(images: &[&Image], dtype: DType) -> Result<Tensor> {
    let mut items = Vec::with_capacity(images.len());
    for img in images {
        let (h, w, _) = img.pixels.dim();
        let data: Vec<f32> = img.pixels.iter().copied().collect();
        items.push(Tensor::from_vec(data, (h, w, 3), &Device::Cpu)?.permute((2, 0, 1))?);
    }
    Ok(Tensor::stack(&items, 0)?.to_dtype(dtype)?)
}
