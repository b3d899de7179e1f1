//! Procedural datasets.
//!
//! Species are bird-like figures (body, head, part motif) rendered on cluttered, desaturated
//! backgrounds at random position and scale. Each image records the tight box of the figure.
//! The blob generator produces a single textured disc on a flat field for localisation checks.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Image, SplitPreset, SplitSpec};
use crate::bas::ImageBox;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub images_per_class: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            classes: 20,
            images_per_class: 60,
            image_size: 84,
            seed: 7,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Motif {
    Stripes,
    Dots,
    WingPatch,
    Collar,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Species {
    pub body: [f32; 3],
    pub head: [f32; 3],
    pub motif: Motif,
    pub motif_color: [f32; 3],
}

fn hsv(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

pub fn class_name(i: usize) -> String {
    format!("species_{i:02}")
}

/// Appearance of class `i`; hues are spread by the golden ratio.
pub fn species(i: usize, seed: u64) -> Species {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9e37_79b9 * (i as u64 + 1)));
    let hue = (i as f32 * 0.618_034 + rng.random_range(0.0..0.05)).fract();
    let motif = [Motif::Stripes, Motif::Dots, Motif::WingPatch, Motif::Collar][i % 4];
    Species {
        body: hsv(hue, 0.75, 0.85),
        head: hsv(hue + rng.random_range(0.25..0.75), 0.6, 0.7),
        motif,
        motif_color: hsv(hue + 0.5, 0.9, rng.random_range(0.25..0.95)),
    }
}

fn jitter(c: [f32; 3], rng: &mut impl Rng, amount: f32) -> [f32; 3] {
    c.map(|v| (v + rng.random_range(-amount..amount)).clamp(0.0, 1.0))
}

/// Renders one image of `sp` with its figure box.
pub fn render(sp: &Species, size: usize, rng: &mut impl Rng) -> Image {
    let n = size as f32;
    let mut px = Array3::<f32>::zeros((size, size, 3));
    let bg = hsv(rng.random(), rng.random_range(0.05..0.25), rng.random_range(0.3..0.7));
    for r in 0..size {
        for c in 0..size {
            for k in 0..3 {
                px[[r, c, k]] = bg[k];
            }
        }
    }
    for _ in 0..rng.random_range(8..15) {
        let col = hsv(rng.random(), rng.random_range(0.0..0.3), rng.random_range(0.2..0.8));
        let (h, w) = (rng.random_range(3..size / 6), rng.random_range(3..size / 6));
        let (r0, c0) = (rng.random_range(0..size - h), rng.random_range(0..size - w));
        for r in r0..r0 + h {
            for c in c0..c0 + w {
                for k in 0..3 {
                    px[[r, c, k]] = col[k];
                }
            }
        }
    }

    let scale = rng.random_range(0.75..1.25f32);
    let (rx, ry) = (0.2 * n * scale, 0.13 * n * scale);
    let hr = 0.08 * n * scale;
    let facing = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let margin_x = rx + hr;
    let margin_y = ry + hr;
    let cx = rng.random_range(margin_x..n - margin_x);
    let cy = rng.random_range(margin_y + 0.5 * hr..n - ry);
    let (hx, hy) = (cx + facing * rx * 0.85, cy - ry * 0.7);

    let body = jitter(sp.body, rng, 0.05);
    let head = jitter(sp.head, rng, 0.05);
    let motif = jitter(sp.motif_color, rng, 0.05);
    let (mut r_lo, mut r_hi, mut c_lo, mut c_hi) = (usize::MAX, 0, usize::MAX, 0);
    for r in 0..size {
        for c in 0..size {
            let (y, x) = (r as f32 + 0.5, c as f32 + 0.5);
            let (dx, dy) = ((x - cx) / rx, (y - cy) / ry);
            let in_body = dx * dx + dy * dy <= 1.0;
            let in_head = (x - hx).powi(2) + (y - hy).powi(2) <= hr * hr;
            if !(in_body || in_head) {
                continue;
            }
            r_lo = r_lo.min(r);
            r_hi = r_hi.max(r);
            c_lo = c_lo.min(c);
            c_hi = c_hi.max(c);
            let mut col = if in_head { head } else { body };
            if in_body && !in_head {
                let on_motif = match sp.motif {
                    Motif::Stripes => ((x - cx) / (0.12 * n * scale / 2.0)).floor() as i32 % 2 == 0,
                    Motif::Dots => {
                        let p = 0.07 * n * scale;
                        let (u, v) = ((x - cx).rem_euclid(p) - p / 2.0, (y - cy).rem_euclid(p) - p / 2.0);
                        u * u + v * v < (p * 0.3).powi(2)
                    }
                    Motif::WingPatch => {
                        let (u, v) = ((x - cx + facing * rx * 0.2) / (rx * 0.55), (y - cy - ry * 0.1) / (ry * 0.45));
                        u * u + v * v <= 1.0
                    }
                    Motif::Collar => (x - (cx + facing * rx * 0.55)).abs() < 0.12 * rx,
                };
                if on_motif {
                    col = motif;
                }
            }
            for k in 0..3 {
                px[[r, c, k]] = col[k];
            }
        }
    }
    px.mapv_inplace(|v| (v + rng.random_range(-0.03..0.03f32)).clamp(0.0, 1.0));
    let gt_box = ImageBox {
        row_min: r_lo,
        col_min: c_lo,
        row_max: r_hi,
        col_max: c_hi,
    };
    Image {
        pixels: px,
        global_label: None,
        gt_box: Some(gt_box),
    }
}

/// All classes in order, each with its images.
pub fn generate(cfg: &SyntheticConfig) -> Vec<(String, Vec<Image>)> {
    (0..cfg.classes)
        .map(|i| {
            let sp = species(i, cfg.seed);
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(1_000_003).wrapping_add(i as u64));
            let images = (0..cfg.images_per_class).map(|_| render(&sp, cfg.image_size, &mut rng)).collect();
            (class_name(i), images)
        })
        .collect()
}

/// Split used for a generated set: the synthetic preset for 20 classes, else 50/25/25.
pub fn synthetic_split(classes: usize) -> Result<SplitSpec> {
    let names: Vec<String> = (0..classes).map(class_name).collect();
    if classes == SplitPreset::Synthetic.total() {
        return SplitSpec::from_preset(SplitPreset::Synthetic, &names);
    }
    if classes < 3 {
        return Err(Error::Config(format!("a synthetic dataset needs at least 3 classes, got {classes}")));
    }
    let val = (classes / 4).max(1);
    let base = classes - 2 * val;
    Ok(SplitSpec {
        dataset_id: "synthetic".into(),
        base: names[..base].to_vec(),
        val: names[base..base + val].to_vec(),
        novel: names[base + val..].to_vec(),
    })
}

/// Writes class folders, `boxes.txt` sidecars and split files under `root`.
pub fn write_dataset(root: &Path, cfg: &SyntheticConfig) -> Result<SplitSpec> {
    let split = synthetic_split(cfg.classes)?;
    for (name, images) in generate(cfg) {
        let dir = root.join(&name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let box_path = dir.join("boxes.txt");
        let mut boxes = fs::File::create(&box_path).map_err(|e| Error::io(&box_path, e))?;
        for (i, img) in images.iter().enumerate() {
            let file = format!("{i:03}.png");
            img.save_png(&dir.join(&file))?;
            if let Some(b) = img.gt_box {
                writeln!(boxes, "{file} {} {} {} {}", b.col_min, b.row_min, b.width(), b.height())
                    .map_err(|e| Error::io(&box_path, e))?;
            }
        }
    }
    split.write_files(root)?;
    Ok(split)
}

/// A textured disc on a flat grey field; returns the image and the disc's pixel centroid
/// `(row, col)` in continuous coordinates.
pub fn blob_image(size: usize, rng: &mut impl Rng) -> (Image, (f64, f64)) {
    let grey: f32 = rng.random_range(0.2..0.8);
    let mut px = Array3::from_elem((size, size, 3), grey);
    let radius = rng.random_range(0.08..0.17) * size as f64;
    let lo = radius + 1.0;
    let cy = rng.random_range(lo..size as f64 - lo);
    let cx = rng.random_range(lo..size as f64 - lo);
    let (mut sum_r, mut sum_c, mut count) = (0.0, 0.0, 0.0);
    for r in 0..size {
        for c in 0..size {
            let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
            if (y - cy).powi(2) + (x - cx).powi(2) <= radius * radius {
                for k in 0..3 {
                    px[[r, c, k]] = rng.random();
                }
                sum_r += y;
                sum_c += x;
                count += 1.0;
            }
        }
    }
    let img = Image {
        pixels: px,
        global_label: None,
        gt_box: None,
    };
    (img, (sum_r / count, sum_c / count))
}
