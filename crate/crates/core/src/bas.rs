//! Background activation suppression.
//!
//! Sum a feature map over channels, keep cells strictly above the spatial mean, take the
//! largest 8-connected component, box it, map the box to pixels and zoom that crop back to
//! the input size. Everything here is parameter-free and non-differentiable; crop
//! coordinates are constants with respect to any loss.

use std::collections::VecDeque;

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::backbone::FeatureMap;
use crate::data::Image;
use crate::{Error, Result};

/// Channel-summed activation, `h×w`.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationMap(pub Array2<f64>);

impl ActivationMap {
    pub fn dim(&self) -> (usize, usize) {
        self.0.dim()
    }
}

/// Strictly binary `h×w` mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask(Array2<u8>);

impl BinaryMask {
    pub fn new(values: Array2<u8>) -> Result<Self> {
        if values.iter().any(|&v| v > 1) {
            return Err(Error::Shape("binary mask entries must be 0 or 1".into()));
        }
        Ok(Self(values))
    }

    pub fn from_fn(dim: (usize, usize), f: impl Fn(usize, usize) -> bool) -> Self {
        Self(Array2::from_shape_fn(dim, |(i, j)| u8::from(f(i, j))))
    }

    pub fn zeros(dim: (usize, usize)) -> Self {
        Self(Array2::zeros(dim))
    }

    pub fn dim(&self) -> (usize, usize) {
        self.0.dim()
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.0[[i, j]] == 1
    }

    pub fn values(&self) -> &Array2<u8> {
        &self.0
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&v| v == 1).count()
    }

    /// `self ⊆ other` elementwise.
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.dim() == other.dim() && self.0.iter().zip(other.0.iter()).all(|(&a, &b)| a <= b)
    }
}

/// Inclusive box on the feature grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub row_min: usize,
    pub col_min: usize,
    pub row_max: usize,
    pub col_max: usize,
}

impl BBox {
    pub fn full(h: usize, w: usize) -> Self {
        Self {
            row_min: 0,
            col_min: 0,
            row_max: h - 1,
            col_max: w - 1,
        }
    }
}

/// Inclusive box in pixel coordinates (origin top-left).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageBox {
    pub row_min: usize,
    pub col_min: usize,
    pub row_max: usize,
    pub col_max: usize,
}

impl ImageBox {
    pub fn full(height: usize, width: usize) -> Self {
        Self {
            row_min: 0,
            col_min: 0,
            row_max: height - 1,
            col_max: width - 1,
        }
    }

    /// From an `x y w h` rectangle, clamped to the image. `None` if nothing remains.
    pub fn from_xywh(x: usize, y: usize, w: usize, h: usize, height: usize, width: usize) -> Option<Self> {
        if w == 0 || h == 0 || x >= width || y >= height {
            return None;
        }
        Some(Self {
            row_min: y,
            col_min: x,
            row_max: (y + h - 1).min(height - 1),
            col_max: (x + w - 1).min(width - 1),
        })
    }

    pub fn height(&self) -> usize {
        self.row_max - self.row_min + 1
    }

    pub fn width(&self) -> usize {
        self.col_max - self.col_min + 1
    }

    /// Whether a continuous pixel-coordinate point falls inside the box's pixel area.
    pub fn contains_point(&self, row: f64, col: f64) -> bool {
        row >= self.row_min as f64
            && row < (self.row_max + 1) as f64
            && col >= self.col_min as f64
            && col < (self.col_max + 1) as f64
    }

    /// Clamp to an image; `None` when the box lies entirely outside it or is inverted.
    pub fn clamp_to(&self, height: usize, width: usize) -> Option<Self> {
        if self.row_min > self.row_max || self.col_min > self.col_max || self.row_min >= height || self.col_min >= width {
            return None;
        }
        Some(Self {
            row_min: self.row_min,
            col_min: self.col_min,
            row_max: self.row_max.min(height - 1),
            col_max: self.col_max.min(width - 1),
        })
    }

    /// Where this box lands after `crop` is zoomed to `target`. `None` when disjoint.
    pub fn through_crop(&self, crop: &ImageBox, target: (usize, usize)) -> Option<Self> {
        let r0 = self.row_min.max(crop.row_min);
        let r1 = self.row_max.min(crop.row_max);
        let c0 = self.col_min.max(crop.col_min);
        let c1 = self.col_max.min(crop.col_max);
        if r0 > r1 || c0 > c1 {
            return None;
        }
        let sy = target.0 as f64 / crop.height() as f64;
        let sx = target.1 as f64 / crop.width() as f64;
        let map = |v0: usize, v1: usize, origin: usize, s: f64, limit: usize| {
            let lo = (((v0 - origin) as f64) * s).floor() as usize;
            let hi = ((((v1 - origin + 1) as f64) * s).ceil() as usize).saturating_sub(1);
            (lo.min(limit - 1), hi.clamp(lo.min(limit - 1), limit - 1))
        };
        let (row_min, row_max) = map(r0, r1, crop.row_min, sy, target.0);
        let (col_min, col_max) = map(c0, c1, crop.col_min, sx, target.1);
        Some(Self {
            row_min,
            col_min,
            row_max,
            col_max,
        })
    }
}

/// Every intermediate of one refinement.
#[derive(Clone, Debug)]
pub struct ForegroundEstimate {
    pub activation: ActivationMap,
    pub threshold: f64,
    pub mask: BinaryMask,
    pub component_mask: BinaryMask,
    pub feature_box: BBox,
    pub image_box: ImageBox,
}

pub fn aggregate_channels(f: &FeatureMap) -> Result<ActivationMap> {
    Ok(ActivationMap(f.to_array()?.sum_axis(Axis(0))))
}

/// Spatial mean of the activation map.
pub fn adaptive_threshold(a: &ActivationMap) -> f64 {
    let (h, w) = a.dim();
    a.0.sum() / (h * w) as f64
}

pub fn foreground_mask(a: &ActivationMap, threshold: f64) -> BinaryMask {
    BinaryMask(a.0.mapv(|v| u8::from(v > threshold)))
}

struct Component {
    cells: Vec<(usize, usize)>,
    row_min: usize,
    col_min: usize,
}

/// 8-connected components in raster order of their first cell.
fn components(m: &BinaryMask) -> Vec<Component> {
    let (h, w) = m.dim();
    let mut seen = Array2::<bool>::from_elem((h, w), false);
    let mut out = Vec::new();
    for i in 0..h {
        for j in 0..w {
            if !m.get(i, j) || seen[[i, j]] {
                continue;
            }
            let mut comp = Component {
                cells: Vec::new(),
                row_min: i,
                col_min: j,
            };
            let mut queue = VecDeque::from([(i, j)]);
            seen[[i, j]] = true;
            while let Some((r, c)) = queue.pop_front() {
                comp.cells.push((r, c));
                comp.row_min = comp.row_min.min(r);
                comp.col_min = comp.col_min.min(c);
                for dr in -1isize..=1 {
                    for dc in -1isize..=1 {
                        let (nr, nc) = (r as isize + dr, c as isize + dc);
                        if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                            continue;
                        }
                        let (nr, nc) = (nr as usize, nc as usize);
                        if m.get(nr, nc) && !seen[[nr, nc]] {
                            seen[[nr, nc]] = true;
                            queue.push_back((nr, nc));
                        }
                    }
                }
            }
            out.push(comp);
        }
    }
    out
}

/// Keeps only the largest 8-connected component of 1s.
///
/// Equal sizes go to the component whose bounding box has the smallest
/// `(row_min, col_min)`; a remaining tie goes to the one reached first in raster order.
pub fn largest_connected_component(m: &BinaryMask) -> BinaryMask {
    let mut best: Option<Component> = None;
    for comp in components(m) {
        let better = match &best {
            None => true,
            Some(b) => {
                comp.cells.len() > b.cells.len()
                    || (comp.cells.len() == b.cells.len() && (comp.row_min, comp.col_min) < (b.row_min, b.col_min))
            }
        };
        if better {
            best = Some(comp);
        }
    }
    let mut out = BinaryMask::zeros(m.dim());
    if let Some(b) = best {
        for (r, c) in b.cells {
            out.0[[r, c]] = 1;
        }
    }
    out
}

/// Tight inclusive box around the 1s; an empty mask yields the full grid.
pub fn tight_bbox(m: &BinaryMask) -> BBox {
    let (h, w) = m.dim();
    let mut b: Option<BBox> = None;
    for ((i, j), &v) in m.0.indexed_iter() {
        if v == 0 {
            continue;
        }
        b = Some(match b {
            None => BBox {
                row_min: i,
                col_min: j,
                row_max: i,
                col_max: j,
            },
            Some(b) => BBox {
                row_min: b.row_min.min(i),
                col_min: b.col_min.min(j),
                row_max: b.row_max.max(i),
                col_max: b.col_max.max(j),
            },
        });
    }
    b.unwrap_or_else(|| BBox::full(h, w))
}

/// Half-open pixel span `[⌊i·L/n⌋, ⌈(i+1)·L/n⌉)` of grid cell `i` out of `n` along an axis of
/// length `L`, clamped to the axis.
pub fn cell_span(i: usize, n: usize, len: usize) -> (usize, usize) {
    let start = i * len / n;
    let end = ((i + 1) * len).div_ceil(n);
    (start.min(len), end.min(len))
}

pub fn to_image_box(b: BBox, feature_hw: (usize, usize), image_hw: (usize, usize)) -> ImageBox {
    let (h, w) = feature_hw;
    let (height, width) = image_hw;
    let (row_min, _) = cell_span(b.row_min, h, height);
    let (_, row_end) = cell_span(b.row_max, h, height);
    let (col_min, _) = cell_span(b.col_min, w, width);
    let (_, col_end) = cell_span(b.col_max, w, width);
    ImageBox {
        row_min,
        col_min,
        row_max: row_end.max(row_min + 1) - 1,
        col_max: col_end.max(col_min + 1) - 1,
    }
}

/// Bilinear resample of the `crop` region of `src` (HWC) to `out_h×out_w`.
///
/// Pixel centres are aligned (`src = (dst + 0.5)·scale − 0.5`) and samples are clamped to
/// the crop, so the result depends only on the cropped pixels.
pub fn resize_region(src: &Array3<f32>, crop: &ImageBox, out_h: usize, out_w: usize) -> Array3<f32> {
    let channels = src.dim().2;
    let (bh, bw) = (crop.height(), crop.width());
    let sy = bh as f64 / out_h as f64;
    let sx = bw as f64 / out_w as f64;
    let axis = |dst: usize, scale: f64, len: usize| {
        let s = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(len - 1);
        (lo, hi, s - lo as f64)
    };
    let cols: Vec<_> = (0..out_w).map(|j| axis(j, sx, bw)).collect();
    let mut out = Array3::<f32>::zeros((out_h, out_w, channels));
    for i in 0..out_h {
        let (y0, y1, wy) = axis(i, sy, bh);
        let (r0, r1) = (crop.row_min + y0, crop.row_min + y1);
        for (j, &(x0, x1, wx)) in cols.iter().enumerate() {
            let (c0, c1) = (crop.col_min + x0, crop.col_min + x1);
            for k in 0..channels {
                let top = src[[r0, c0, k]] as f64 * (1.0 - wx) + src[[r0, c1, k]] as f64 * wx;
                let bottom = src[[r1, c0, k]] as f64 * (1.0 - wx) + src[[r1, c1, k]] as f64 * wx;
                out[[i, j, k]] = (top * (1.0 - wy) + bottom * wy).clamp(0.0, 1.0) as f32;
            }
        }
    }
    out
}

/// Crops `b` out of `x` and zooms it to `target` (height, width).
///
/// A box that is empty after clamping falls back to the whole image.
pub fn crop_and_zoom(x: &Image, b: ImageBox, target: (usize, usize)) -> Image {
    let (height, width, _) = x.pixels.dim();
    let crop = b.clamp_to(height, width).unwrap_or(ImageBox::full(height, width));
    let pixels = resize_region(&x.pixels, &crop, target.0, target.1);
    let gt_box = x.gt_box.and_then(|g| g.through_crop(&crop, target));
    Image {
        pixels,
        global_label: x.global_label,
        gt_box,
    }
}

/// Estimates the foreground of `f` without touching pixels.
pub fn estimate_foreground(f: &FeatureMap, image_hw: (usize, usize)) -> Result<ForegroundEstimate> {
    let activation = aggregate_channels(f)?;
    let threshold = adaptive_threshold(&activation);
    let mask = foreground_mask(&activation, threshold);
    let component_mask = largest_connected_component(&mask);
    let feature_box = tight_bbox(&component_mask);
    let image_box = to_image_box(feature_box, activation.dim(), image_hw);
    Ok(ForegroundEstimate {
        activation,
        threshold,
        mask,
        component_mask,
        feature_box,
        image_box,
    })
}

/// Full suppression step: the refined image (same size as `x`) and every intermediate.
pub fn refine(x: &Image, f: &FeatureMap) -> Result<(Image, ForegroundEstimate)> {
    let (height, width, _) = x.pixels.dim();
    let est = estimate_foreground(f, (height, width))?;
    let refined = crop_and_zoom(x, est.image_box, (height, width));
    Ok((refined, est))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn amap(rows: &[&[f64]]) -> ActivationMap {
        let h = rows.len();
        let w = rows[0].len();
        ActivationMap(Array2::from_shape_fn((h, w), |(i, j)| rows[i][j]))
    }

    fn mask(rows: &[&[u8]]) -> BinaryMask {
        let h = rows.len();
        let w = rows[0].len();
        BinaryMask::new(Array2::from_shape_fn((h, w), |(i, j)| rows[i][j])).unwrap()
    }

    fn image_from_fn(h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f32) -> Image {
        Image::new(Array3::from_shape_fn((h, w, 3), |(r, c, k)| f(r, c, k)), None, None).unwrap()
    }

    #[test]
    fn aggregate_sums_channels() {
        let f = FeatureMap::from_vec(vec![1.0, 2.0], (2, 1, 1)).unwrap();
        assert_eq!(aggregate_channels(&f).unwrap().0[[0, 0]], 3.0);
        let z = FeatureMap::from_vec(vec![0.0; 18], (2, 3, 3)).unwrap();
        assert!(aggregate_channels(&z).unwrap().0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn aggregate_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<f64> = (0..36).map(|_| rng.random()).collect();
        let f = FeatureMap::from_vec(data.clone(), (4, 3, 3)).unwrap();
        let a = aggregate_channels(&f).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let mut s = 0.0;
                for k in 0..4 {
                    s += data[k * 9 + i * 3 + j];
                }
                assert!((a.0[[i, j]] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn threshold_is_the_mean() {
        assert_eq!(adaptive_threshold(&amap(&[&[4.0, 0.0], &[0.0, 0.0]])), 1.0);
        assert_eq!(adaptive_threshold(&amap(&[&[2.5, 2.5], &[2.5, 2.5]])), 2.5);
        assert_eq!(adaptive_threshold(&amap(&[&[0.0, 0.0], &[0.0, 4.0]])), 1.0);
    }

    #[test]
    fn mask_uses_strict_comparison() {
        let m = foreground_mask(&amap(&[&[4.0, 0.0], &[0.0, 0.0]]), 1.0);
        assert_eq!(m, mask(&[&[1, 0], &[0, 0]]));
        let constant = amap(&[&[3.0, 3.0], &[3.0, 3.0]]);
        assert_eq!(foreground_mask(&constant, adaptive_threshold(&constant)).count(), 0);
    }

    #[test]
    fn lcc_cases() {
        let single = mask(&[&[1, 0], &[0, 0]]);
        assert_eq!(largest_connected_component(&single), single);

        let diagonal = mask(&[&[1, 0], &[0, 1]]);
        assert_eq!(largest_connected_component(&diagonal), diagonal);

        let two = mask(&[
            &[1, 1, 1, 0, 0, 0],
            &[0, 0, 0, 0, 0, 0],
            &[0, 0, 0, 1, 1, 1],
            &[0, 0, 0, 0, 1, 1],
        ]);
        let expect = mask(&[
            &[0, 0, 0, 0, 0, 0],
            &[0, 0, 0, 0, 0, 0],
            &[0, 0, 0, 1, 1, 1],
            &[0, 0, 0, 0, 1, 1],
        ]);
        assert_eq!(largest_connected_component(&two), expect);

        assert_eq!(largest_connected_component(&BinaryMask::zeros((3, 3))).count(), 0);
    }

    #[test]
    fn lcc_tie_goes_to_top_left() {
        let m = mask(&[&[0, 0, 0, 1], &[0, 0, 0, 0], &[1, 0, 0, 0]]);
        let out = largest_connected_component(&m);
        assert_eq!(out, mask(&[&[0, 0, 0, 1], &[0, 0, 0, 0], &[0, 0, 0, 0]]));
        let m = mask(&[&[0, 1, 0, 0], &[0, 0, 0, 0], &[1, 0, 0, 0]]);
        // (0,1) beats (2,0): smaller row_min wins
        assert!(largest_connected_component(&m).get(0, 1));
    }

    #[test]
    fn bbox_cases() {
        let mut m = BinaryMask::zeros((11, 11));
        m.0[[2, 3]] = 1;
        assert_eq!(
            tight_bbox(&m),
            BBox {
                row_min: 2,
                col_min: 3,
                row_max: 2,
                col_max: 3
            }
        );
        assert_eq!(tight_bbox(&BinaryMask::zeros((11, 11))), BBox::full(11, 11));
    }

    #[test]
    fn image_box_span_arithmetic() {
        assert_eq!(
            to_image_box(BBox::full(11, 11), (11, 11), (84, 84)),
            ImageBox::full(84, 84)
        );
        let b = BBox {
            row_min: 0,
            col_min: 0,
            row_max: 0,
            col_max: 0,
        };
        assert_eq!(
            to_image_box(b, (2, 2), (84, 84)),
            ImageBox {
                row_min: 0,
                col_min: 0,
                row_max: 41,
                col_max: 41
            }
        );
        let b = BBox {
            row_min: 5,
            col_min: 5,
            row_max: 5,
            col_max: 5,
        };
        // floor(420/11) = 38, ceil(504/11) - 1 = 45
        assert_eq!(
            to_image_box(b, (11, 11), (84, 84)),
            ImageBox {
                row_min: 38,
                col_min: 38,
                row_max: 45,
                col_max: 45
            }
        );
    }

    #[test]
    fn zoom_identity_and_constant() {
        let img = image_from_fn(7, 7, |r, c, k| ((r * 13 + c * 7 + k * 3) % 10) as f32 / 9.0);
        let same = crop_and_zoom(&img, ImageBox::full(7, 7), (7, 7));
        assert_eq!(same.pixels, img.pixels);

        let flat = image_from_fn(20, 20, |_, _, k| [0.2, 0.5, 0.9][k]);
        let b = ImageBox {
            row_min: 3,
            col_min: 5,
            row_max: 9,
            col_max: 17,
        };
        let out = crop_and_zoom(&flat, b, (13, 9));
        assert_eq!(out.pixels.dim(), (13, 9, 3));
        for ((_, _, k), &v) in out.pixels.indexed_iter() {
            assert!((v - [0.2, 0.5, 0.9][k]).abs() < 1e-6);
        }
    }

    #[test]
    fn checkerboard_upsample_matches_hand_bilinear() {
        let img = image_from_fn(2, 2, |r, c, _| if (r + c) % 2 == 1 { 1.0 } else { 0.0 });
        let out = crop_and_zoom(&img, ImageBox::full(2, 2), (4, 4));
        // sample positions per axis: -0.25→0, 0.25, 0.75, 1.25→1 ; value = y(1-x) + x(1-y)
        let expect = [
            [0.0, 0.25, 0.75, 1.0],
            [0.25, 0.375, 0.625, 0.75],
            [0.75, 0.625, 0.375, 0.25],
            [1.0, 0.75, 0.25, 0.0],
        ];
        for i in 0..4 {
            for j in 0..4 {
                assert!((out.pixels[[i, j, 0]] - expect[i][j]).abs() < 1e-6, "({i},{j})");
            }
        }
    }

    #[test]
    fn degenerate_box_falls_back_to_full_image() {
        let img = image_from_fn(6, 6, |r, c, _| (r * 6 + c) as f32 / 36.0);
        let outside = ImageBox {
            row_min: 10,
            col_min: 10,
            row_max: 12,
            col_max: 12,
        };
        assert_eq!(crop_and_zoom(&img, outside, (6, 6)).pixels, img.pixels);
    }

    #[test]
    fn refine_single_dominant_cell() {
        let mut data = vec![0.1; 2 * 4];
        data[1] = 5.0; // channel 0, cell (0,1) on a 2x2 grid
        let f = FeatureMap::from_vec(data, (2, 2, 2)).unwrap();
        let img = image_from_fn(8, 8, |r, c, _| (r * 8 + c) as f32 / 64.0);
        let (refined, est) = refine(&img, &f).unwrap();
        assert_eq!(
            est.image_box,
            ImageBox {
                row_min: 0,
                col_min: 4,
                row_max: 3,
                col_max: 7
            }
        );
        let oracle = crop_and_zoom(&img, est.image_box, (8, 8));
        assert_eq!(refined.pixels, oracle.pixels);
        assert_eq!(refined.pixels.dim(), img.pixels.dim());
    }

    #[test]
    fn refine_constant_map_uses_full_image() {
        let f = FeatureMap::from_vec(vec![1.0; 3 * 9], (3, 3, 3)).unwrap();
        let img = image_from_fn(9, 9, |r, c, k| ((r + 2 * c + k) % 5) as f32 / 4.0);
        let (refined, est) = refine(&img, &f).unwrap();
        assert_eq!(est.mask.count(), 0);
        assert_eq!(est.image_box, ImageBox::full(9, 9));
        assert_eq!(refined.pixels, img.pixels);
    }

    #[test]
    fn gt_box_follows_the_crop() {
        let mut img = image_from_fn(10, 10, |_, _, _| 0.5);
        img.gt_box = Some(ImageBox {
            row_min: 2,
            col_min: 2,
            row_max: 5,
            col_max: 5,
        });
        let crop = ImageBox {
            row_min: 2,
            col_min: 2,
            row_max: 6,
            col_max: 6,
        };
        let out = crop_and_zoom(&img, crop, (10, 10));
        assert_eq!(
            out.gt_box,
            Some(ImageBox {
                row_min: 0,
                col_min: 0,
                row_max: 7,
                col_max: 7
            })
        );
    }
}
