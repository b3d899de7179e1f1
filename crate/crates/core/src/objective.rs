//! Training losses: per-stage global classification, per-stage local few-shot terms and
//! their weighted totals.

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::alignment::{pairwise_scores, Metric};
use crate::backbone::{gap_batch, Architecture, ClassifierHead, FeatureMap};
use crate::episodic::{prototype_tensor, PipelineFlags};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SoftmaxSign {
    /// Softmax over `+score`: higher similarity, higher probability.
    PositiveSimilarity,
    /// Softmax over `−score`, the literal typeset form.
    NegativeSimilarity,
}

impl SoftmaxSign {
    pub fn factor(self) -> f64 {
        match self {
            SoftmaxSign::PositiveSimilarity => 1.0,
            SoftmaxSign::NegativeSimilarity => -1.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SoftmaxSign::PositiveSimilarity => "positive_similarity",
            SoftmaxSign::NegativeSimilarity => "negative_similarity",
        }
    }
}

impl fmt::Display for SoftmaxSign {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SoftmaxSign {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "positive_similarity" | "positive" => Ok(SoftmaxSign::PositiveSimilarity),
            "negative_similarity" | "negative" => Ok(SoftmaxSign::NegativeSimilarity),
            _ => Err(Error::Config(format!("unknown softmax sign `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub tau: f64,
    pub softmax_sign: SoftmaxSign,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.5,
            lambda: 0.1,
            tau: 10.0,
            softmax_sign: SoftmaxSign::PositiveSimilarity,
        }
    }
}

impl LossWeights {
    /// Defaults with λ = 0.4 for the shallow backbones and 0.1 for the deep ones.
    pub fn for_architecture(arch: Architecture) -> Self {
        let lambda = match arch {
            Architecture::Conv64 | Architecture::TinyTest => 0.4,
            Architecture::ResNet12 | Architecture::ResNet18Like => 0.1,
        };
        Self {
            lambda,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("lambda", self.lambda)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss.{name} must be finite and ≥ 0, got {v}")));
            }
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("loss.tau must be positive, got {}", self.tau)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub global_raw: f64,
    pub global_refined: f64,
    pub local_raw: f64,
    pub local_refined: f64,
    pub global_total: f64,
    pub local_total: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [
            self.global_raw,
            self.global_refined,
            self.local_raw,
            self.local_refined,
            self.global_total,
            self.local_total,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Weighted totals from the four stage terms.
pub fn combine(global_raw: f64, global_refined: f64, local_raw: f64, local_refined: f64, w: &LossWeights) -> LossBreakdown {
    let global_total = w.alpha * global_raw + w.beta * global_refined;
    let local_total = w.alpha * local_raw + w.beta * local_refined;
    LossBreakdown {
        global_raw,
        global_refined,
        local_raw,
        local_refined,
        global_total,
        local_total,
        total: global_total + w.lambda * local_total,
    }
}

fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    match labels.iter().find(|&&y| y >= classes) {
        Some(&label) => Err(Error::LabelOutOfRange { label, classes }),
        None => Ok(()),
    }
}

/// Mean cross-entropy of `(B, K)` logits against `labels`.
pub fn cross_entropy_batch(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (b, k) = logits.dims2()?;
    if b != labels.len() {
        return Err(Error::Shape(format!("{b} logit rows for {} labels", labels.len())));
    }
    check_labels(labels, k)?;
    let max = logits.max_keepdim(D::Minus1)?.detach();
    let shifted = logits.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    let idx: Vec<u32> = labels.iter().map(|&y| y as u32).collect();
    let idx = Tensor::from_vec(idx, (b, 1), logits.device())?;
    let picked = shifted.gather(&idx, 1)?;
    Ok((lse - picked)?.mean_all()?)
}

/// Cross-entropy of a single logit vector.
pub fn global_ce(logits: &[f64], y: usize) -> Result<f64> {
    if logits.is_empty() {
        return Err(Error::Shape("empty logit vector".into()));
    }
    let t = Tensor::from_slice(logits, (1, logits.len()), &candle_core::Device::Cpu)?;
    scalar(&cross_entropy_batch(&t, &[y])?)
}

/// Global loss of a feature batch under `head`, averaged over members.
pub fn global_ce_batch(features: &Tensor, head: &ClassifierHead, labels: &[usize]) -> Result<Tensor> {
    cross_entropy_batch(&head.logits(&gap_batch(features)?)?, labels)
}

/// Few-shot cross-entropy from `(Q, N)` similarity scores, averaged over queries.
pub fn fewshot_ce_from_scores(scores: &Tensor, labels: &[usize], sign: SoftmaxSign) -> Result<Tensor> {
    cross_entropy_batch(&(scores * sign.factor())?, labels)
}

/// Local few-shot loss of `queries (Q,c,h,w)` against `prototypes (N,c,h,w)`.
pub fn local_loss_batch(
    queries: &Tensor,
    prototypes: &Tensor,
    labels: &[usize],
    metric: Metric,
    w: &LossWeights,
) -> Result<Tensor> {
    let scores = pairwise_scores(queries, prototypes, metric, w.tau)?;
    fewshot_ce_from_scores(&scores, labels, w.softmax_sign)
}

/// Aligned local few-shot loss over feature-map lists.
pub fn local_fewshot_loss(
    queries: &[FeatureMap],
    prototypes: &[FeatureMap],
    labels: &[usize],
    w: &LossWeights,
) -> Result<f64> {
    if queries.is_empty() || prototypes.is_empty() {
        return Err(Error::Shape("local loss needs at least one query and one prototype".into()));
    }
    let dims = prototypes[0].dims();
    if let Some(bad) = queries.iter().chain(prototypes).find(|f| f.dims() != dims) {
        return Err(Error::Shape(format!("feature maps {:?} and {dims:?} differ", bad.dims())));
    }
    let stack = |fs: &[FeatureMap]| Tensor::stack(&fs.iter().map(|f| f.tensor()).collect::<Vec<_>>(), 0);
    let loss = local_loss_batch(&stack(queries)?, &stack(prototypes)?, labels, Metric::AlignedLocal, w)?;
    scalar(&loss)
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar()?)
}

/// Feature tensors of one episode. Rows are the support set, class-major
/// (`class·K + shot`), followed by the queries.
pub struct EpisodeFeatures<'a> {
    pub raw: &'a Tensor,
    pub refined: Option<&'a Tensor>,
    pub n_way: usize,
    pub k_shot: usize,
    pub query_labels: &'a [usize],
    pub global_labels: &'a [usize],
    /// Constant `(rows, 1, h, w)` keep-multipliers applied before the raw classifier.
    pub erase_keep: Option<&'a Tensor>,
}

pub struct EpisodeLoss {
    /// Differentiable total.
    pub total: Tensor,
    pub breakdown: LossBreakdown,
}

/// All four terms and their weighted total. Disabled stages contribute zero terms; the raw
/// global term is always present.
pub fn episode_loss(
    f: &EpisodeFeatures<'_>,
    head_raw: &ClassifierHead,
    head_refined: &ClassifierHead,
    flags: &PipelineFlags,
    w: &LossWeights,
) -> Result<EpisodeLoss> {
    w.validate()?;
    let rows = f.raw.dim(0)?;
    let n_support = f.n_way * f.k_shot;
    if rows != n_support + f.query_labels.len() || f.global_labels.len() != rows {
        return Err(Error::Shape(format!(
            "{rows} feature rows for {n_support} support, {} queries and {} global labels",
            f.query_labels.len(),
            f.global_labels.len()
        )));
    }
    let zero = || Tensor::zeros((), f.raw.dtype(), f.raw.device());
    let metric = flags.metric();

    let erased = match f.erase_keep {
        Some(keep) => f.raw.broadcast_mul(keep)?,
        None => f.raw.clone(),
    };
    let global_raw = global_ce_batch(&erased, head_raw, f.global_labels)?;

    let local_of = |feats: &Tensor| -> Result<Tensor> {
        let protos = prototype_tensor(&feats.narrow(0, 0, n_support)?, f.n_way, f.k_shot)?;
        let queries = feats.narrow(0, n_support, rows - n_support)?;
        local_loss_batch(&queries, &protos, f.query_labels, metric, w)
    };
    let local_raw = if flags.raw_stage { local_of(f.raw)? } else { zero()? };

    let (global_refined, local_refined) = if flags.refined_stage {
        let refined = f
            .refined
            .ok_or_else(|| Error::Config("refined stage enabled but no refined features given".into()))?;
        if refined.dims() != f.raw.dims() {
            return Err(Error::Shape(format!(
                "refined features {:?} vs raw {:?}",
                refined.dims(),
                f.raw.dims()
            )));
        }
        (global_ce_batch(refined, head_refined, f.global_labels)?, local_of(refined)?)
    } else {
        (zero()?, zero()?)
    };

    let global_total = ((&global_raw * w.alpha)? + (&global_refined * w.beta)?)?;
    let local_total = ((&local_raw * w.alpha)? + (&local_refined * w.beta)?)?;
    let total = (global_total + (local_total * w.lambda)?)?;
    let breakdown = combine(
        scalar(&global_raw)?,
        scalar(&global_refined)?,
        scalar(&local_raw)?,
        scalar(&local_refined)?,
        w,
    );
    Ok(EpisodeLoss { total, breakdown })
}
