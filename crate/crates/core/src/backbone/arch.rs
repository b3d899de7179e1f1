use candle_core::Tensor;

use super::layers::{max_pool2_ceil, BatchNorm2d, Conv2d, ParamStore};
use super::{Architecture, BackboneConfig};
use crate::Result;

/// Concrete extractor networks. Every variant ends in a ReLU so feature maps are non-negative.
pub(crate) enum Extractor {
    Conv64 {
        layers: Vec<(Conv2d, BatchNorm2d)>,
        drop_last_pool: bool,
    },
    ResNet12 {
        blocks: Vec<ResBlock12>,
        drop_last_pool: bool,
    },
    ResNet18 {
        stem: (Conv2d, BatchNorm2d),
        blocks: Vec<BasicBlock>,
    },
    Tiny {
        conv1: Conv2d,
        bn1: BatchNorm2d,
        conv2: Conv2d,
        bn2: BatchNorm2d,
        drop_last_pool: bool,
    },
}

pub(crate) struct ResBlock12 {
    convs: [(Conv2d, BatchNorm2d); 3],
    shortcut: (Conv2d, BatchNorm2d),
}

impl ResBlock12 {
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize) -> Result<Self> {
        let mk = |store: &mut ParamStore, i: usize, cin: usize| -> Result<(Conv2d, BatchNorm2d)> {
            Ok((
                Conv2d::new(store, &format!("{name}.conv{i}"), cin, cout, 3, 1, 1, false)?,
                BatchNorm2d::new(store, &format!("{name}.bn{i}"), cout)?,
            ))
        };
        let convs = [mk(store, 1, cin)?, mk(store, 2, cout)?, mk(store, 3, cout)?];
        let shortcut = (
            Conv2d::new(store, &format!("{name}.down.conv"), cin, cout, 1, 1, 0, false)?,
            BatchNorm2d::new(store, &format!("{name}.down.bn"), cout)?,
        );
        Ok(Self { convs, shortcut })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, (conv, bn)) in self.convs.iter().enumerate() {
            h = bn.forward(&conv.forward(&h)?, train)?;
            if i < 2 {
                h = h.relu()?;
            }
        }
        let skip = self.shortcut.1.forward(&self.shortcut.0.forward(x)?, train)?;
        Ok((h + skip)?.relu()?)
    }
}

pub(crate) struct BasicBlock {
    conv1: (Conv2d, BatchNorm2d),
    conv2: (Conv2d, BatchNorm2d),
    shortcut: Option<(Conv2d, BatchNorm2d)>,
}

impl BasicBlock {
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, stride: usize) -> Result<Self> {
        let conv1 = (
            Conv2d::new(store, &format!("{name}.conv1"), cin, cout, 3, stride, 1, false)?,
            BatchNorm2d::new(store, &format!("{name}.bn1"), cout)?,
        );
        let conv2 = (
            Conv2d::new(store, &format!("{name}.conv2"), cout, cout, 3, 1, 1, false)?,
            BatchNorm2d::new(store, &format!("{name}.bn2"), cout)?,
        );
        let shortcut = if stride != 1 || cin != cout {
            Some((
                Conv2d::new(store, &format!("{name}.down.conv"), cin, cout, 1, stride, 0, false)?,
                BatchNorm2d::new(store, &format!("{name}.down.bn"), cout)?,
            ))
        } else {
            None
        };
        Ok(Self { conv1, conv2, shortcut })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let h = self.conv1.1.forward(&self.conv1.0.forward(x)?, train)?.relu()?;
        let h = self.conv2.1.forward(&self.conv2.0.forward(&h)?, train)?;
        let skip = match &self.shortcut {
            Some((conv, bn)) => bn.forward(&conv.forward(x)?, train)?,
            None => x.clone(),
        };
        Ok((h + skip)?.relu()?)
    }
}

impl Extractor {
    pub(crate) fn build(config: &BackboneConfig, store: &mut ParamStore) -> Result<Self> {
        let drop_last_pool = config.drop_last_pool;
        Ok(match config.architecture {
            Architecture::Conv64 => {
                let mut layers = Vec::with_capacity(4);
                for i in 0..4 {
                    let cin = if i == 0 { 3 } else { 64 };
                    layers.push((
                        Conv2d::new(store, &format!("extractor.layer{i}.conv"), cin, 64, 3, 1, 1, false)?,
                        BatchNorm2d::new(store, &format!("extractor.layer{i}.bn"), 64)?,
                    ));
                }
                Extractor::Conv64 { layers, drop_last_pool }
            }
            Architecture::ResNet12 => {
                let widths = [64, 128, 256, 512];
                let mut blocks = Vec::with_capacity(4);
                let mut cin = 3;
                for (i, &w) in widths.iter().enumerate() {
                    blocks.push(ResBlock12::new(store, &format!("extractor.block{i}"), cin, w)?);
                    cin = w;
                }
                Extractor::ResNet12 { blocks, drop_last_pool }
            }
            Architecture::ResNet18Like => {
                let stem = (
                    Conv2d::new(store, "extractor.stem.conv", 3, 64, 3, 2, 1, false)?,
                    BatchNorm2d::new(store, "extractor.stem.bn", 64)?,
                );
                let last_stride = if drop_last_pool { 1 } else { 2 };
                let stages = [(64, 1), (128, 2), (256, 2), (512, last_stride)];
                let mut blocks = Vec::with_capacity(8);
                let mut cin = 64;
                for (s, &(w, stride)) in stages.iter().enumerate() {
                    blocks.push(BasicBlock::new(store, &format!("extractor.stage{s}.0"), cin, w, stride)?);
                    blocks.push(BasicBlock::new(store, &format!("extractor.stage{s}.1"), w, w, 1)?);
                    cin = w;
                }
                Extractor::ResNet18 { stem, blocks }
            }
            Architecture::TinyTest => Extractor::Tiny {
                conv1: Conv2d::new(store, "extractor.conv1", 3, 8, 3, 1, 1, false)?,
                bn1: BatchNorm2d::new(store, "extractor.bn1", 8)?,
                conv2: Conv2d::new(store, "extractor.conv2", 8, 8, 3, 1, 1, false)?,
                bn2: BatchNorm2d::new(store, "extractor.bn2", 8)?,
                drop_last_pool,
            },
        })
    }

    pub(crate) fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        match self {
            Extractor::Conv64 { layers, drop_last_pool } => {
                let mut h = x.clone();
                for (i, (conv, bn)) in layers.iter().enumerate() {
                    h = bn.forward(&conv.forward(&h)?, train)?.relu()?;
                    if i < 3 || !drop_last_pool {
                        h = h.max_pool2d(2)?;
                    }
                }
                Ok(h)
            }
            Extractor::ResNet12 { blocks, drop_last_pool } => {
                let mut h = x.clone();
                for (i, block) in blocks.iter().enumerate() {
                    h = block.forward(&h, train)?;
                    if i < 3 || !drop_last_pool {
                        h = max_pool2_ceil(&h)?;
                    }
                }
                Ok(h)
            }
            Extractor::ResNet18 { stem, blocks } => {
                let mut h = stem.1.forward(&stem.0.forward(x)?, train)?.relu()?;
                for block in blocks {
                    h = block.forward(&h, train)?;
                }
                Ok(h)
            }
            Extractor::Tiny {
                conv1,
                bn1,
                conv2,
                bn2,
                drop_last_pool,
            } => {
                let h = bn1.forward(&conv1.forward(x)?, train)?.relu()?.max_pool2d(4)?;
                let mut h = bn2.forward(&conv2.forward(&h)?, train)?.relu()?.max_pool2d(2)?;
                if !drop_last_pool {
                    h = h.max_pool2d(2)?;
                }
                Ok(h)
            }
        }
    }
}
