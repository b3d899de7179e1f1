use super::{FeatureExtractor, FeatureMap};
use crate::bas::cell_span;
use crate::data::Image;
use crate::Result;

/// Parameter-free stand-in extractor: each output cell holds the per-colour-channel
/// pixel variance over that cell's pixel span.
///
/// Flat regions map to zero and textured regions to large values, which makes it a
/// ground-truth-free probe of the suppression/cropping pipeline.
#[derive(Clone, Copy, Debug)]
pub struct VarianceExtractor {
    pub grid: usize,
}

impl Default for VarianceExtractor {
    fn default() -> Self {
        Self { grid: 11 }
    }
}

impl FeatureExtractor for VarianceExtractor {
    fn extract(&self, image: &Image) -> Result<FeatureMap> {
        let (height, width, _) = image.pixels.dim();
        let g = self.grid;
        let mut out = vec![0.0; 3 * g * g];
        for i in 0..g {
            let (r0, r1) = cell_span(i, g, height);
            for j in 0..g {
                let (c0, c1) = cell_span(j, g, width);
                let n = ((r1 - r0) * (c1 - c0)) as f64;
                if n == 0.0 {
                    continue;
                }
                for ch in 0..3 {
                    let mut sum = 0.0;
                    let mut sq = 0.0;
                    for r in r0..r1 {
                        for c in c0..c1 {
                            let v = image.pixels[[r, c, ch]] as f64;
                            sum += v;
                            sq += v * v;
                        }
                    }
                    let mean = sum / n;
                    out[ch * g * g + i * g + j] = (sq / n - mean * mean).max(0.0);
                }
            }
        }
        FeatureMap::from_vec(out, (3, g, g))
    }
}
