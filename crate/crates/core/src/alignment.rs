//! Foreground object alignment and the local-to-local similarity.
//!
//! A support map is re-expressed, cell by cell, as a convex combination of its own
//! descriptors weighted by a row-softmaxed cosine correlation with the query. The aligned
//! support is then compared to the query position by position.
//!
//! Two layers of API: typed single-pair functions over [`FeatureMap`]s, and batched tensor
//! functions (`*_batch`, [`pairwise_scores`]) that accept leading broadcast dimensions and are
//! differentiable end to end. The query side is never transformed.

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::backbone::{gap_batch, FeatureMap};
use crate::{Error, Result};

/// Lower bound on descriptor norms; all-zero descriptors get zero similarity.
pub const NORM_EPS: f64 = 1e-8;

/// How a query is compared with a prototype.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    /// Cosine between globally pooled vectors.
    GlobalCosine,
    /// Position-wise cosine without alignment.
    Local,
    /// Prototype aligned to the query first, then position-wise cosine.
    AlignedLocal,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::GlobalCosine => "global-cosine",
            Metric::Local => "local",
            Metric::AlignedLocal => "aligned-local",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [Metric::GlobalCosine, Metric::Local, Metric::AlignedLocal]
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown metric `{s}`")))
    }
}

/// `(h·w)×c` local descriptors; row `i·w + j` is cell `(i, j)`.
#[derive(Clone, Debug)]
pub struct DescriptorSet(Tensor);

/// `(h·w)×(h·w)` query-by-support correlation, raw cosine or row-normalised.
#[derive(Clone, Debug)]
pub struct CorrelationMatrix(Tensor);

/// Support descriptors re-indexed by query position, `(h·w)×c`.
#[derive(Clone, Debug)]
pub struct AlignedFeature(Tensor);

macro_rules! tensor_newtype {
    ($t:ty) => {
        impl $t {
            pub fn tensor(&self) -> &Tensor {
                &self.0
            }

            pub fn to_vec2(&self) -> Result<Vec<Vec<f64>>> {
                Ok(self.0.to_dtype(DType::F64)?.to_vec2()?)
            }
        }
    };
}
tensor_newtype!(DescriptorSet);
tensor_newtype!(CorrelationMatrix);
tensor_newtype!(AlignedFeature);

impl DescriptorSet {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.rank() != 2 {
            return Err(Error::Shape(format!("descriptor set must be (h·w)×c, got {:?}", t.dims())));
        }
        Ok(Self(t))
    }

    /// Inverse of [`to_descriptors`].
    pub fn to_feature_map(&self, h: usize, w: usize) -> Result<FeatureMap> {
        let (n, c) = self.0.dims2()?;
        if n != h * w {
            return Err(Error::Shape(format!("{n} descriptors cannot fill a {h}×{w} grid")));
        }
        FeatureMap::new(self.0.t()?.reshape((c, h, w))?)
    }
}

impl CorrelationMatrix {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.rank() != 2 {
            return Err(Error::Shape(format!("correlation must be 2-D, got {:?}", t.dims())));
        }
        Ok(Self(t))
    }
}

impl AlignedFeature {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.rank() != 2 {
            return Err(Error::Shape(format!("aligned feature must be (h·w)×c, got {:?}", t.dims())));
        }
        Ok(Self(t))
    }
}

/// `(..., c, h, w) -> (..., h·w, c)`.
pub fn descriptors_batch(f: &Tensor) -> Result<Tensor> {
    let rank = f.rank();
    if rank < 3 {
        return Err(Error::Shape(format!("expected (..., c, h, w), got {:?}", f.dims())));
    }
    let flat = f.flatten_from(rank - 2)?;
    Ok(flat.transpose(rank - 3, rank - 2)?.contiguous()?)
}

/// Rows divided by `max(‖row‖, NORM_EPS)`.
pub fn normalize_rows(d: &Tensor) -> Result<Tensor> {
    // sqrt(max(s, eps²)) == max(sqrt(s), eps) with a finite derivative at s = 0
    let sq = d.sqr()?.sum_keepdim(D::Minus1)?;
    let norm = sq.maximum(NORM_EPS * NORM_EPS)?.sqrt()?;
    Ok(d.broadcast_div(&norm)?)
}

/// Cosine between every query row and every support row: `(..., n_q, n_s)`.
pub fn correlation_batch(support: &Tensor, query: &Tensor) -> Result<Tensor> {
    let s = normalize_rows(support)?;
    let q = normalize_rows(query)?;
    Ok(q.broadcast_matmul(&s.transpose(D::Minus2, D::Minus1)?)?)
}

/// Max-shifted softmax along the last axis.
pub fn row_softmax_batch(a: &Tensor) -> Result<Tensor> {
    let shifted = a.broadcast_sub(&a.max_keepdim(D::Minus1)?.detach())?;
    let e = shifted.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// `softmax(corr(S, Q)) · S`, one row per query position.
pub fn align_batch(support: &Tensor, query: &Tensor) -> Result<Tensor> {
    let weights = row_softmax_batch(&correlation_batch(support, query)?)?;
    Ok(weights.broadcast_matmul(support)?)
}

/// Sum over positions of the row-wise cosine, reducing the last two axes.
pub fn l2l_batch(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let cos = normalize_rows(a)?.broadcast_mul(&normalize_rows(b)?)?.sum(D::Minus1)?;
    Ok(cos.sum(D::Minus1)?)
}

/// Temperature-scaled similarity of every query `(Q, c, h, w)` to every prototype
/// `(N, c, h, w)`, returned as `(Q, N)`.
///
/// Local metrics are divided by `h·w`, so every score lies in `[−tau, tau]`.
pub fn pairwise_scores(queries: &Tensor, prototypes: &Tensor, metric: Metric, tau: f64) -> Result<Tensor> {
    let (_, c, h, w) = queries.dims4()?;
    let (_, pc, ph, pw) = prototypes.dims4()?;
    if (c, h, w) != (pc, ph, pw) {
        return Err(Error::Shape(format!(
            "query maps are {c}×{h}×{w}, prototypes are {pc}×{ph}×{pw}"
        )));
    }
    let scores = match metric {
        Metric::GlobalCosine => {
            let q = normalize_rows(&gap_batch(queries)?)?;
            let p = normalize_rows(&gap_batch(prototypes)?)?;
            q.matmul(&p.t()?)?
        }
        Metric::Local | Metric::AlignedLocal => {
            let q = descriptors_batch(queries)?.unsqueeze(1)?; // (Q, 1, hw, c)
            let p = descriptors_batch(prototypes)?.unsqueeze(0)?; // (1, N, hw, c)
            let support = if metric == Metric::AlignedLocal {
                align_batch(&p, &q)?
            } else {
                p
            };
            (l2l_batch(&support, &q)? / (h * w) as f64)?
        }
    };
    Ok((scores * tau)?)
}

pub fn to_descriptors(f: &FeatureMap) -> Result<DescriptorSet> {
    DescriptorSet::new(descriptors_batch(f.tensor())?)
}

pub fn correlation(support: &DescriptorSet, query: &DescriptorSet) -> Result<CorrelationMatrix> {
    let (_, cs) = support.0.dims2()?;
    let (_, cq) = query.0.dims2()?;
    if cs != cq {
        return Err(Error::Shape(format!("descriptor dimensions differ: {cs} vs {cq}")));
    }
    CorrelationMatrix::new(correlation_batch(&support.0, &query.0)?)
}

pub fn row_softmax(a: &CorrelationMatrix) -> Result<CorrelationMatrix> {
    CorrelationMatrix::new(row_softmax_batch(&a.0)?)
}

/// Aligns `support` toward `query`.
pub fn align(support: &FeatureMap, query: &FeatureMap) -> Result<AlignedFeature> {
    if support.dims() != query.dims() {
        return Err(Error::Shape(format!(
            "cannot align {:?} to {:?}",
            support.dims(),
            query.dims()
        )));
    }
    let s = descriptors_batch(support.tensor())?;
    let q = descriptors_batch(query.tensor())?;
    Ok(AlignedFeature(align_batch(&s, &q)?))
}

pub fn l2l(aligned: &AlignedFeature, query: &DescriptorSet) -> Result<f64> {
    if aligned.0.dims() != query.0.dims() {
        return Err(Error::Shape(format!(
            "aligned {:?} vs query {:?}",
            aligned.0.dims(),
            query.0.dims()
        )));
    }
    Ok(l2l_batch(&aligned.0, &query.0)?.to_dtype(DType::F64)?.to_scalar()?)
}

/// Normalised, temperature-scaled aligned similarity of one query to one prototype.
pub fn score(query: &FeatureMap, prototype: &FeatureMap, tau: f64) -> Result<f64> {
    if query.dims() != prototype.dims() {
        return Err(Error::Shape(format!(
            "query {:?} vs prototype {:?}",
            query.dims(),
            prototype.dims()
        )));
    }
    let s = pairwise_scores(
        &query.tensor().unsqueeze(0)?,
        &prototype.tensor().unsqueeze(0)?,
        Metric::AlignedLocal,
        tau,
    )?;
    Ok(s.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn desc(rows: Vec<Vec<f64>>) -> DescriptorSet {
        let (n, c) = (rows.len(), rows[0].len());
        DescriptorSet::new(Tensor::from_vec(rows.concat(), (n, c), &Device::Cpu).unwrap()).unwrap()
    }

    fn cos(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_EPS);
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_EPS);
        dot / (na * nb)
    }

    fn softmax(row: &[f64]) -> Vec<f64> {
        let m = row.iter().copied().fold(f64::MIN, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|v| v / s).collect()
    }

    /// rows[i·w+j][k] = F[k,i,j]
    fn rows_of(data: &[f64], c: usize, h: usize, w: usize) -> Vec<Vec<f64>> {
        (0..h * w)
            .map(|r| (0..c).map(|k| data[k * h * w + r]).collect())
            .collect()
    }

    #[test]
    fn descriptor_reshape() {
        let f = FeatureMap::from_vec(vec![1.0, 2.0], (2, 1, 1)).unwrap();
        assert_eq!(to_descriptors(&f).unwrap().to_vec2().unwrap(), vec![vec![1.0, 2.0]]);

        let data = rand_vec(1, 12);
        let f = FeatureMap::from_vec(data.clone(), (3, 2, 2)).unwrap();
        let d = to_descriptors(&f).unwrap();
        assert_eq!(d.to_vec2().unwrap(), rows_of(&data, 3, 2, 2));
        let back = d.to_feature_map(2, 2).unwrap().to_array().unwrap();
        assert_eq!(back.iter().copied().collect::<Vec<_>>(), data);
    }

    #[test]
    fn correlation_trivial() {
        let v = desc(vec![vec![0.3, -1.2, 2.0]]);
        let c = correlation(&v, &v).unwrap().to_vec2().unwrap();
        assert!((c[0][0] - 1.0).abs() < 1e-12);
        let a = desc(vec![vec![1.0, 0.0]]);
        let b = desc(vec![vec![0.0, 1.0]]);
        assert_eq!(correlation(&a, &b).unwrap().to_vec2().unwrap(), vec![vec![0.0]]);
    }

    #[test]
    fn correlation_matches_loop() {
        let s: Vec<Vec<f64>> = (0..4).map(|i| rand_vec(10 + i, 5)).collect();
        let q: Vec<Vec<f64>> = (0..4).map(|i| rand_vec(20 + i, 5)).collect();
        let got = correlation(&desc(s.clone()), &desc(q.clone())).unwrap().to_vec2().unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert!((got[i][j] - cos(&q[i], &s[j])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_descriptor_has_zero_similarity() {
        let a = desc(vec![vec![0.0, 0.0]]);
        let b = desc(vec![vec![1.0, 2.0]]);
        assert_eq!(correlation(&a, &b).unwrap().to_vec2().unwrap(), vec![vec![0.0]]);
    }

    #[test]
    fn softmax_rows() {
        let one = CorrelationMatrix::new(Tensor::from_vec(vec![0.3, -0.9, 0.1], (3, 1), &Device::Cpu).unwrap()).unwrap();
        for r in row_softmax(&one).unwrap().to_vec2().unwrap() {
            assert_eq!(r, vec![1.0]);
        }
        let eq = CorrelationMatrix::new(Tensor::from_vec(vec![0.5; 8], (2, 4), &Device::Cpu).unwrap()).unwrap();
        for r in row_softmax(&eq).unwrap().to_vec2().unwrap() {
            for v in r {
                assert!((v - 0.25).abs() < 1e-15);
            }
        }
        let m = CorrelationMatrix::new(Tensor::from_vec(vec![1.0, 2.0, 3.0], (1, 3), &Device::Cpu).unwrap()).unwrap();
        let got = &row_softmax(&m).unwrap().to_vec2().unwrap()[0];
        let den = 1f64.exp() + 2f64.exp() + 3f64.exp();
        for (k, v) in got.iter().enumerate() {
            assert!((v - ((k + 1) as f64).exp() / den).abs() < 1e-12);
        }
    }

    #[test]
    fn align_single_cell_is_identity() {
        let s = FeatureMap::from_vec(vec![0.4, 1.5, -0.2], (3, 1, 1)).unwrap();
        let q = FeatureMap::from_vec(vec![2.0, -1.0, 0.7], (3, 1, 1)).unwrap();
        let a = align(&s, &q).unwrap().to_vec2().unwrap();
        assert_eq!(a, vec![vec![0.4, 1.5, -0.2]]);
    }

    #[test]
    fn align_identical_support_rows() {
        let v = [0.5, -0.25, 2.0];
        let mut data = vec![0.0; 3 * 4];
        for k in 0..3 {
            for cell in 0..4 {
                data[k * 4 + cell] = v[k];
            }
        }
        let s = FeatureMap::from_vec(data, (3, 2, 2)).unwrap();
        let q = FeatureMap::from_vec(rand_vec(3, 12), (3, 2, 2)).unwrap();
        for row in align(&s, &q).unwrap().to_vec2().unwrap() {
            for k in 0..3 {
                assert!((row[k] - v[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn align_matches_softmax_matmul_oracle() {
        let sd = rand_vec(5, 8);
        let qd = rand_vec(6, 8);
        let s = FeatureMap::from_vec(sd.clone(), (2, 2, 2)).unwrap();
        let q = FeatureMap::from_vec(qd.clone(), (2, 2, 2)).unwrap();
        let got = align(&s, &q).unwrap().to_vec2().unwrap();
        let sr = rows_of(&sd, 2, 2, 2);
        let qr = rows_of(&qd, 2, 2, 2);
        for i in 0..4 {
            let weights = softmax(&(0..4).map(|j| cos(&qr[i], &sr[j])).collect::<Vec<_>>());
            for k in 0..2 {
                let expect: f64 = (0..4).map(|j| weights[j] * sr[j][k]).sum();
                assert!((got[i][k] - expect).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn l2l_cases() {
        let data = rand_vec(7, 12);
        let f = FeatureMap::from_vec(data, (3, 2, 2)).unwrap();
        let d = to_descriptors(&f).unwrap();
        let as_aligned = AlignedFeature(d.tensor().clone());
        assert!((l2l(&as_aligned, &d).unwrap() - 4.0).abs() < 1e-12);

        let a = AlignedFeature(Tensor::from_vec(vec![1.0, 0.0, 0.0, 1.0], (2, 2), &Device::Cpu).unwrap());
        let b = desc(vec![vec![0.0, 3.0], vec![-2.0, 0.0]]);
        assert_eq!(l2l(&a, &b).unwrap(), 0.0);

        let ar: Vec<Vec<f64>> = (0..5).map(|i| rand_vec(30 + i, 4)).collect();
        let br: Vec<Vec<f64>> = (0..5).map(|i| rand_vec(40 + i, 4)).collect();
        let expect: f64 = (0..5).map(|k| cos(&ar[k], &br[k])).sum();
        let a = AlignedFeature(desc(ar).tensor().clone());
        assert!((l2l(&a, &desc(br)).unwrap() - expect).abs() < 1e-10);
        assert!(l2l(&a, &desc(vec![vec![1.0; 4]])).is_err());
    }

    #[test]
    fn score_cases() {
        // self-alignment only reproduces the query when every descriptor shares one direction
        let v = [0.3, 1.1, 0.6];
        let a = rand_vec(8, 9);
        let data: Vec<f64> = (0..27).map(|n| v[n / 9] * (a[n % 9].abs() + 0.1)).collect();
        let f = FeatureMap::from_vec(data, (3, 3, 3)).unwrap();
        assert!((score(&f, &f, 1.0).unwrap() - 1.0).abs() < 1e-12);
        let single = FeatureMap::from_vec(vec![0.2, -0.7], (2, 1, 1)).unwrap();
        assert!((score(&single, &single, 1.0).unwrap() - 1.0).abs() < 1e-12);
        let g = FeatureMap::from_vec(rand_vec(11, 27), (3, 3, 3)).unwrap();
        let unaligned = pairwise_scores(
            &g.tensor().unsqueeze(0).unwrap(),
            &g.tensor().unsqueeze(0).unwrap(),
            Metric::Local,
            1.0,
        )
        .unwrap();
        let unaligned: Vec<Vec<f64>> = unaligned.to_vec2().unwrap();
        assert!((unaligned[0][0] - 1.0).abs() < 1e-12);

        let qd = rand_vec(9, 8);
        let pd = rand_vec(10, 8);
        let q = FeatureMap::from_vec(qd.clone(), (2, 2, 2)).unwrap();
        let p = FeatureMap::from_vec(pd.clone(), (2, 2, 2)).unwrap();
        let got = score(&q, &p, 10.0).unwrap();
        assert!(got.abs() <= 10.0);
        // composed oracle: align with the softmax/matmul loop, then per-row cosines
        let sr = rows_of(&pd, 2, 2, 2);
        let qr = rows_of(&qd, 2, 2, 2);
        let mut total = 0.0;
        for i in 0..4 {
            let weights = softmax(&(0..4).map(|j| cos(&qr[i], &sr[j])).collect::<Vec<_>>());
            let aligned: Vec<f64> = (0..2).map(|k| (0..4).map(|j| weights[j] * sr[j][k]).sum()).collect();
            total += cos(&aligned, &qr[i]);
        }
        assert!((got - 10.0 * total / 4.0).abs() < 1e-10);
    }

    #[test]
    fn pairwise_global_cosine() {
        let q = Tensor::from_vec(vec![1.0, 1.0, 0.0, 0.0], (1, 2, 1, 2), &Device::Cpu).unwrap();
        let p = Tensor::from_vec(vec![1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0], (2, 2, 1, 2), &Device::Cpu).unwrap();
        let s: Vec<Vec<f64>> = pairwise_scores(&q, &p, Metric::GlobalCosine, 2.0).unwrap().to_vec2().unwrap();
        assert!((s[0][0] - 2.0).abs() < 1e-12);
        assert!(s[0][1].abs() < 1e-12);
    }

    #[test]
    fn pairwise_shape_mismatch() {
        let q = Tensor::zeros((1, 2, 2, 2), DType::F64, &Device::Cpu).unwrap();
        let p = Tensor::zeros((1, 3, 2, 2), DType::F64, &Device::Cpu).unwrap();
        assert!(pairwise_scores(&q, &p, Metric::Local, 1.0).is_err());
    }
}
