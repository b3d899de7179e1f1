//! Images, preprocessing, dataset pools and the synthetic generators.

mod dataset;
pub mod synthetic;

use std::path::Path;

use ndarray::{s, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bas::{crop_and_zoom, ImageBox};
use crate::{Error, Result};

pub use dataset::{
    load_dataset, read_boxes, resolve_split, ClassPool, DatasetPools, Pool, Sample, Source, SplitPreset,
    SplitSpec,
};

/// RGB image, `H×W×3` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub pixels: Array3<f32>,
    pub global_label: Option<usize>,
    pub gt_box: Option<ImageBox>,
}

impl Image {
    pub fn new(pixels: Array3<f32>, global_label: Option<usize>, gt_box: Option<ImageBox>) -> Result<Self> {
        let (h, w, c) = pixels.dim();
        if h == 0 || w == 0 || c != 3 {
            return Err(Error::Shape(format!("image must be H×W×3 and non-empty, got {h}×{w}×{c}")));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Data(format!("pixel value {v} outside [0, 1]")));
        }
        let gt_box = match gt_box {
            Some(b) => Some(
                b.clamp_to(h, w)
                    .ok_or_else(|| Error::Data(format!("ground-truth box {b:?} lies outside a {h}×{w} image")))?,
            ),
            None => None,
        };
        Ok(Self {
            pixels,
            global_label,
            gt_box,
        })
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn from_rgb8(rgb: &image::RgbImage) -> Self {
        let (w, h) = rgb.dimensions();
        let pixels = Array3::from_shape_fn((h as usize, w as usize, 3), |(r, c, k)| {
            rgb.get_pixel(c as u32, r as u32)[k] as f32 / 255.0
        });
        Self {
            pixels,
            global_label: None,
            gt_box: None,
        }
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let (h, w, _) = self.pixels.dim();
        image::RgbImage::from_fn(w as u32, h as u32, |c, r| {
            let px = |k| (self.pixels[[r as usize, c as usize, k]] * 255.0).round().clamp(0.0, 255.0) as u8;
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| Error::Decode {
                path: path.to_path_buf(),
                source,
            })
    }
}

/// Decodes any supported file into an RGB image without labels.
pub fn decode_image(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let decoded = image::load_from_memory(&bytes).map_err(|source| Error::Decode {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(Image::from_rgb8(&decoded.to_rgb8()))
}

/// Mirrors left-right, carrying the box along.
pub fn flip_horizontal(x: &Image) -> Image {
    let w = x.width();
    Image {
        pixels: x.pixels.slice(s![.., ..;-1, ..]).to_owned(),
        global_label: x.global_label,
        gt_box: x.gt_box.map(|b| ImageBox {
            row_min: b.row_min,
            row_max: b.row_max,
            col_min: w - 1 - b.col_max,
            col_max: w - 1 - b.col_min,
        }),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Augment {
    pub random_crop: bool,
    pub horizontal_flip: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub target_size: usize,
    pub augment: Augment,
    pub use_gt_box: bool,
    /// Area fraction range of the random crop.
    pub crop_scale: (f64, f64),
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            target_size: 84,
            augment: Augment {
                random_crop: true,
                horizontal_flip: true,
            },
            use_gt_box: false,
            crop_scale: (0.7, 1.0),
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.target_size == 0 {
            return Err(Error::Config("target_size must be positive".into()));
        }
        let (lo, hi) = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!("crop scale ({lo}, {hi}) must satisfy 0 < lo ≤ hi ≤ 1")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Ground-truth crop (optional), then a random resized crop and flip in training or a plain
/// resize in evaluation. Every path resamples once.
pub fn preprocess(x: &Image, cfg: &PreprocessConfig, mode: Mode, rng: &mut impl Rng) -> Result<Image> {
    cfg.validate()?;
    let (h, w) = (x.height(), x.width());
    let mut region = ImageBox::full(h, w);
    if cfg.use_gt_box {
        if let Some(b) = x.gt_box {
            region = b;
        }
    }
    if mode == Mode::Train && cfg.augment.random_crop {
        let area = rng.random_range(cfg.crop_scale.0..=cfg.crop_scale.1);
        let side = area.sqrt();
        let ch = ((region.height() as f64 * side).round() as usize).clamp(1, region.height());
        let cw = ((region.width() as f64 * side).round() as usize).clamp(1, region.width());
        let r0 = region.row_min + rng.random_range(0..=region.height() - ch);
        let c0 = region.col_min + rng.random_range(0..=region.width() - cw);
        region = ImageBox {
            row_min: r0,
            col_min: c0,
            row_max: r0 + ch - 1,
            col_max: c0 + cw - 1,
        };
    }
    let mut out = crop_and_zoom(x, region, (cfg.target_size, cfg.target_size));
    if mode == Mode::Train && cfg.augment.horizontal_flip && rng.random_bool(0.5) {
        out = flip_horizontal(&out);
    }
    Ok(out)
}
