use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::FeatureExtractor;
use crate::bas::{aggregate_channels, estimate_foreground, refine, BinaryMask, ForegroundEstimate, ImageBox};
use crate::data::{decode_image, preprocess, Augment, Image, Mode, PreprocessConfig};
use crate::{Error, Result};

/// File suffixes emitted per input, in order.
pub const SUFFIXES: [&str; 6] = ["raw_box", "activation", "mask", "component", "refined", "refined_activation"];

pub struct VisualOutput {
    pub files: Vec<PathBuf>,
    pub estimate: ForegroundEstimate,
    pub refined: Image,
}

fn jet(t: f64) -> [f32; 3] {
    let ch = |c: f64| (1.5 - (4.0 * t - c).abs()).clamp(0.0, 1.0) as f32;
    [ch(3.0), ch(2.0), ch(1.0)]
}

fn upsample(h: usize, w: usize, out: (usize, usize), value: impl Fn(usize, usize) -> [f32; 3]) -> Image {
    let pixels = Array3::from_shape_fn((out.0, out.1, 3), |(r, c, k)| value(r * h / out.0, c * w / out.1)[k]);
    Image {
        pixels,
        global_label: None,
        gt_box: None,
    }
}

/// Min-max normalised activation, nearest-upsampled with a blue-to-red colour map.
pub fn heat_map(a: &Array2<f64>, out: (usize, usize)) -> Image {
    let (h, w) = a.dim();
    let lo = a.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    upsample(h, w, out, |i, j| jet((a[[i, j]] - lo) / span))
}

pub fn mask_image(m: &BinaryMask, out: (usize, usize)) -> Image {
    let (h, w) = m.dim();
    upsample(h, w, out, |i, j| if m.get(i, j) { [1.0; 3] } else { [0.0; 3] })
}

/// Copy of `x` with a 1-pixel red rectangle along `b`.
pub fn draw_box(x: &Image, b: ImageBox) -> Image {
    let mut out = x.clone();
    let mut paint = |r: usize, c: usize| {
        for (k, v) in [1.0, 0.0, 0.0].into_iter().enumerate() {
            out.pixels[[r, c, k]] = v;
        }
    };
    for c in b.col_min..=b.col_max {
        paint(b.row_min, c);
        paint(b.row_max, c);
    }
    for r in b.row_min..=b.row_max {
        paint(r, b.col_min);
        paint(r, b.col_max);
    }
    out
}

/// Writes the six panels for `image` (already at the extractor's input size) as
/// `{stem}_{suffix}.png`.
pub fn visualize_image(extractor: &dyn FeatureExtractor, image: &Image, stem: &str, out_dir: &Path) -> Result<VisualOutput> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let size = (image.height(), image.width());
    let f = extractor.extract(image)?;
    let estimate = estimate_foreground(&f, size)?;
    let (refined, _) = refine(image, &f)?;
    let refined_act = aggregate_channels(&extractor.extract(&refined)?)?;
    let panels = [
        draw_box(image, estimate.image_box),
        heat_map(&estimate.activation.0, size),
        mask_image(&estimate.mask, size),
        mask_image(&estimate.component_mask, size),
        refined.clone(),
        heat_map(&refined_act.0, size),
    ];
    let mut files = Vec::with_capacity(SUFFIXES.len());
    for (panel, suffix) in panels.iter().zip(SUFFIXES) {
        let path = out_dir.join(format!("{stem}_{suffix}.png"));
        panel.save_png(&path)?;
        files.push(path);
    }
    Ok(VisualOutput {
        files,
        estimate,
        refined,
    })
}

/// Decodes, resizes to `input_size` and visualises each file. Stems repeat-proof by suffixing
/// an index on collisions.
pub fn visualize_files(extractor: &dyn FeatureExtractor, inputs: &[PathBuf], input_size: usize, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let cfg = PreprocessConfig {
        target_size: input_size,
        augment: Augment {
            random_crop: false,
            horizontal_flip: false,
        },
        ..Default::default()
    };
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut files = Vec::new();
    for path in inputs {
        let img = preprocess(&decode_image(path)?, &cfg, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0))?;
        let base = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "image".into());
        let n = seen.entry(base.clone()).or_insert(0);
        let stem = if *n == 0 { base.clone() } else { format!("{base}_{n}") };
        *n += 1;
        files.extend(visualize_image(extractor, &img, &stem, out_dir)?.files);
    }
    Ok(files)
}
