//! Minimal layer set on top of candle tensors.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted names so that checkpoints and the
//! optimizer see one flat, deterministically ordered namespace. Initialisation draws from a
//! seeded ChaCha stream; candle's own CPU initialisers cannot be seeded.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// Running statistics; written by the forward pass, never by the optimizer.
    Buffer,
}

pub struct ParamStore {
    vars: BTreeMap<String, (Var, ParamKind)>,
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(&mut self, name: &str, tensor: Tensor, kind: ParamKind) -> Result<Var> {
        let var = Var::from_tensor(&tensor)?;
        self.vars.insert(name.to_string(), (var.clone(), kind));
        Ok(var)
    }

    /// Zero-mean Gaussian parameter.
    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("finite std");
        let data: Vec<f64> = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        self.insert(name, t, ParamKind::Trainable)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64, kind: ParamKind) -> Result<Var> {
        let t = (Tensor::ones(shape, self.dtype, &self.device)? * value)?;
        self.insert(name, t, kind)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name).map(|(v, _)| v)
    }

    /// All parameters in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var, ParamKind)> {
        self.vars.iter().map(|(k, (v, kind))| (k.as_str(), v, *kind))
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.iter()
            .filter(|(_, _, kind)| *kind == ParamKind::Trainable)
            .map(|(k, v, _)| (k, v))
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }
}

pub struct Conv2d {
    weight: Var,
    bias: Option<Var>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    /// Kaiming-normal (fan-out) initialised square convolution.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Result<Self> {
        let fan_out = (out_channels * kernel * kernel) as f64;
        let weight = store.normal(
            &format!("{name}.weight"),
            &[out_channels, in_channels, kernel, kernel],
            (2.0 / fan_out).sqrt(),
        )?;
        let bias = if bias {
            Some(store.constant(&format!("{name}.bias"), &[out_channels], 0.0, ParamKind::Trainable)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(self.weight.as_tensor(), self.padding, self.stride, 1, 1)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(&b.as_tensor().reshape((1, (), 1, 1))?)?,
            None => y,
        })
    }
}

/// Spatial batch normalisation with running statistics.
pub struct BatchNorm2d {
    gamma: Var,
    beta: Var,
    running_mean: Var,
    running_var: Var,
    momentum: f64,
    eps: f64,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.constant(&format!("{name}.weight"), &[channels], 1.0, ParamKind::Trainable)?,
            beta: store.constant(&format!("{name}.bias"), &[channels], 0.0, ParamKind::Trainable)?,
            running_mean: store.constant(&format!("{name}.running_mean"), &[channels], 0.0, ParamKind::Buffer)?,
            running_var: store.constant(&format!("{name}.running_var"), &[channels], 1.0, ParamKind::Buffer)?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let (mean, var) = if train {
            let flat = x.transpose(0, 1)?.reshape((c, b * h * w))?;
            let mean = flat.mean(D::Minus1)?;
            let centered = flat.broadcast_sub(&mean.unsqueeze(1)?)?;
            let var = centered.sqr()?.mean(D::Minus1)?;
            let n = (b * h * w) as f64;
            let unbiased = if n > 1.0 { (var.detach() * (n / (n - 1.0)))? } else { var.detach() };
            let m = self.momentum;
            self.running_mean
                .set(&((self.running_mean.as_tensor() * (1.0 - m))? + (mean.detach() * m)?)?)?;
            self.running_var
                .set(&((self.running_var.as_tensor() * (1.0 - m))? + (unbiased * m)?)?)?;
            (mean, var)
        } else {
            (
                self.running_mean.as_detached_tensor(),
                self.running_var.as_detached_tensor(),
            )
        };
        let shape = (1, c, 1, 1);
        let inv_std = (var + self.eps)?.sqrt()?.recip()?;
        let scale = (self.gamma.as_tensor() * inv_std)?.reshape(shape)?;
        let y = x.broadcast_sub(&mean.reshape(shape)?)?.broadcast_mul(&scale)?;
        Ok(y.broadcast_add(&self.beta.as_tensor().reshape(shape)?)?)
    }
}

/// 2×2 max pooling that keeps the trailing odd row/column (ceil mode).
///
/// Inputs are post-ReLU, so zero padding cannot win a max over real activations.
pub fn max_pool2_ceil(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let mut x = x.clone();
    if h % 2 == 1 {
        x = x.pad_with_zeros(2, 0, 1)?;
    }
    if w % 2 == 1 {
        x = x.pad_with_zeros(3, 0, 1)?;
    }
    Ok(x.max_pool2d(2)?)
}
