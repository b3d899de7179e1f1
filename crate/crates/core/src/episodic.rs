//! Episodes, prototypes, two-stage scoring and evaluation.

use candle_core::{DType, Tensor};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{pairwise_scores, Metric};
use crate::backbone::{images_to_tensor, FeatureMap, Model};
use crate::bas::{refine, ForegroundEstimate};
use crate::data::{preprocess, Image, Mode, Pool, PreprocessConfig, Sample};
use crate::objective::LossWeights;
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct EpisodeItem {
    pub sample: Sample,
    pub class_name: String,
    pub episode_label: usize,
    pub global_label: Option<usize>,
}

/// Support and query sets are both class-major: item `j·K + k` is shot `k` of class `j`.
#[derive(Clone, Debug)]
pub struct Episode {
    pub n_way: usize,
    pub k_shot: usize,
    pub queries_per_class: usize,
    pub seed: u64,
    /// Pool indices of the sampled classes, by episode label.
    pub classes: Vec<usize>,
    pub support: Vec<EpisodeItem>,
    pub query: Vec<EpisodeItem>,
}

impl Episode {
    pub fn query_labels(&self) -> Vec<usize> {
        self.query.iter().map(|q| q.episode_label).collect()
    }

    /// Global labels of support then query items; `None` if any item lacks one.
    pub fn global_labels(&self) -> Option<Vec<usize>> {
        self.support.iter().chain(&self.query).map(|i| i.global_label).collect()
    }
}

/// Draws `n_way` classes and `k_shot + q_per_class` distinct images from each.
pub fn sample_episode(pool: &Pool, n_way: usize, k_shot: usize, q_per_class: usize, seed: u64) -> Result<Episode> {
    if n_way == 0 || k_shot == 0 {
        return Err(Error::Config(format!("episodes need n_way ≥ 1 and k_shot ≥ 1, got {n_way}-way {k_shot}-shot")));
    }
    if pool.len() < n_way {
        return Err(Error::InsufficientClasses {
            available: pool.len(),
            required: n_way,
        });
    }
    let required = k_shot + q_per_class;
    if let Some(c) = pool.classes.iter().find(|c| c.samples.len() < required) {
        return Err(Error::InsufficientClass {
            class: c.name.clone(),
            available: c.samples.len(),
            required,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = sample_indices(&mut rng, pool.len(), n_way).into_vec();
    let mut support = Vec::with_capacity(n_way * k_shot);
    let mut query = Vec::with_capacity(n_way * q_per_class);
    for (label, &ci) in classes.iter().enumerate() {
        let class = &pool.classes[ci];
        let picks = sample_indices(&mut rng, class.samples.len(), required).into_vec();
        let item = |i: usize| EpisodeItem {
            sample: class.samples[i].clone(),
            class_name: class.name.clone(),
            episode_label: label,
            global_label: class.global_label,
        };
        support.extend(picks[..k_shot].iter().map(|&i| item(i)));
        query.extend(picks[k_shot..].iter().map(|&i| item(i)));
    }
    Ok(Episode {
        n_way,
        k_shot,
        queries_per_class: q_per_class,
        seed,
        classes,
        support,
        query,
    })
}

/// Errors if any class of `pool` is among `train_classes`.
pub fn check_disjoint(pool: &Pool, train_classes: &[String]) -> Result<()> {
    match pool.classes.iter().find(|c| train_classes.contains(&c.name)) {
        Some(c) => Err(Error::Data(format!(
            "evaluation class `{}` was seen during training",
            c.name
        ))),
        None => Ok(()),
    }
}

/// Loads and preprocesses the support then query images of an episode.
pub fn load_episode_images(
    episode: &Episode,
    cfg: &PreprocessConfig,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<Vec<Image>> {
    episode
        .support
        .iter()
        .chain(&episode.query)
        .map(|item| preprocess(&item.sample.load(item.global_label)?, cfg, mode, rng))
        .collect()
}

#[derive(Clone, Debug)]
pub struct PrototypeSet {
    pub raw: Vec<FeatureMap>,
    pub refined: Option<Vec<FeatureMap>>,
}

/// `(N·K, c, h, w)` class-major support features to `(N, c, h, w)` means.
pub fn prototype_tensor(support: &Tensor, n_way: usize, k_shot: usize) -> Result<Tensor> {
    let (rows, c, h, w) = support.dims4()?;
    if rows != n_way * k_shot || k_shot == 0 {
        return Err(Error::Shape(format!("{rows} support maps for {n_way}-way {k_shot}-shot")));
    }
    Ok(support.reshape((n_way, k_shot, c, h, w))?.mean(1)?)
}

fn stack(maps: &[FeatureMap]) -> Result<Tensor> {
    Ok(Tensor::stack(&maps.iter().map(|f| f.tensor()).collect::<Vec<_>>(), 0)?)
}

fn unstack(t: &Tensor) -> Result<Vec<FeatureMap>> {
    (0..t.dim(0)?).map(|i| FeatureMap::new(t.get(i)?)).collect()
}

/// Per-class means over class-major support maps, independently per stage.
pub fn build_prototypes(
    raw: &[FeatureMap],
    refined: Option<&[FeatureMap]>,
    n_way: usize,
    k_shot: usize,
) -> Result<PrototypeSet> {
    let mean = |maps: &[FeatureMap]| -> Result<Vec<FeatureMap>> {
        if maps.is_empty() {
            return Err(Error::Shape("no support maps".into()));
        }
        unstack(&prototype_tensor(&stack(maps)?, n_way, k_shot)?)
    };
    Ok(PrototypeSet {
        raw: mean(raw)?,
        refined: refined.map(mean).transpose()?,
    })
}

/// Which parts of the pipeline are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PipelineFlags {
    pub raw_stage: bool,
    /// Second stage on BAS-refined images.
    pub refined_stage: bool,
    /// Position-wise metric instead of pooled cosine.
    pub local_metric: bool,
    /// Align prototypes to queries before the position-wise metric.
    pub alignment: bool,
    /// Attentive erasing ahead of the raw classifier during training.
    pub erasing: bool,
    /// Consecutive BAS crops producing the refined image.
    pub bas_passes: usize,
}

impl Default for PipelineFlags {
    fn default() -> Self {
        Self {
            raw_stage: true,
            refined_stage: true,
            local_metric: true,
            alignment: true,
            erasing: true,
            bas_passes: 1,
        }
    }
}

impl PipelineFlags {
    pub fn metric(&self) -> Metric {
        match (self.local_metric, self.alignment) {
            (false, _) => Metric::GlobalCosine,
            (true, false) => Metric::Local,
            (true, true) => Metric::AlignedLocal,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.raw_stage && !self.refined_stage {
            return Err(Error::Config("at least one of the raw and refined stages must be enabled".into()));
        }
        if self.alignment && !self.local_metric {
            return Err(Error::Config("alignment requires the local metric".into()));
        }
        if self.refined_stage && self.bas_passes == 0 {
            return Err(Error::Config("the refined stage needs at least one BAS pass".into()));
        }
        Ok(())
    }
}

/// Features of a batch under both stages.
pub struct StageOutput {
    /// `(B, c, h, w)`.
    pub raw: Tensor,
    pub refined: Option<Tensor>,
    pub refined_images: Vec<Image>,
    /// Estimates of the final BAS pass, one per image.
    pub estimates: Vec<ForegroundEstimate>,
}

fn refine_all(images: &[Image], features: &Tensor) -> Result<(Vec<Image>, Vec<ForegroundEstimate>)> {
    let features = features.detach();
    let mut out = Vec::with_capacity(images.len());
    let mut est = Vec::with_capacity(images.len());
    for (i, img) in images.iter().enumerate() {
        let (r, e) = refine(img, &FeatureMap::new(features.get(i)?)?)?;
        out.push(r);
        est.push(e);
    }
    Ok((out, est))
}

/// Raw forward, BAS crops from the (detached) raw features, refined forward.
pub fn two_stage_forward(model: &Model, images: &[Image], flags: &PipelineFlags, train: bool) -> Result<StageOutput> {
    let refs: Vec<&Image> = images.iter().collect();
    let raw = model.forward(&images_to_tensor(&refs, model.dtype())?, train)?;
    if !flags.refined_stage {
        return Ok(StageOutput {
            raw,
            refined: None,
            refined_images: Vec::new(),
            estimates: Vec::new(),
        });
    }
    let (mut current, mut estimates) = refine_all(images, &raw)?;
    for _ in 1..flags.bas_passes {
        let refs: Vec<&Image> = current.iter().collect();
        let f = model.forward(&images_to_tensor(&refs, model.dtype())?, false)?;
        (current, estimates) = refine_all(&current, &f)?;
    }
    let refs: Vec<&Image> = current.iter().collect();
    let refined = model.forward(&images_to_tensor(&refs, model.dtype())?, train)?;
    Ok(StageOutput {
        raw,
        refined: Some(refined),
        refined_images: current,
        estimates,
    })
}

/// `(Q, N)` fused scores: `α·raw + β·refined` over the enabled stages.
pub fn fused_scores_batch(
    query_raw: &Tensor,
    query_refined: Option<&Tensor>,
    protos_raw: &Tensor,
    protos_refined: Option<&Tensor>,
    flags: &PipelineFlags,
    w: &LossWeights,
) -> Result<Tensor> {
    let metric = flags.metric();
    let q = query_raw.dim(0)?;
    let n = protos_raw.dim(0)?;
    let mut fused = Tensor::zeros((q, n), query_raw.dtype(), query_raw.device())?;
    if flags.raw_stage {
        fused = (fused + (pairwise_scores(query_raw, protos_raw, metric, w.tau)? * w.alpha)?)?;
    }
    if flags.refined_stage {
        let (qr, pr) = query_refined
            .zip(protos_refined)
            .ok_or_else(|| Error::Config("refined stage enabled but refined features missing".into()))?;
        fused = (fused + (pairwise_scores(qr, pr, metric, w.tau)? * w.beta)?)?;
    }
    Ok(fused)
}

/// Index of the largest value; the first one wins ties.
pub fn argmax_first(v: &[f64]) -> usize {
    let mut best = 0;
    for (j, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = j;
        }
    }
    best
}

/// Prediction and fused scores of one query.
pub fn predict(
    query_raw: &FeatureMap,
    query_refined: Option<&FeatureMap>,
    protos: &PrototypeSet,
    flags: &PipelineFlags,
    w: &LossWeights,
) -> Result<(usize, Vec<f64>)> {
    let qr = query_raw.tensor().unsqueeze(0)?;
    let qf = query_refined.map(|f| f.tensor().unsqueeze(0)).transpose()?;
    let pr = stack(&protos.raw)?;
    let pf = protos.refined.as_deref().map(stack).transpose()?;
    let fused = fused_scores_batch(&qr, qf.as_ref(), &pr, pf.as_ref(), flags, w)?;
    let scores: Vec<f64> = fused.squeeze(0)?.to_dtype(DType::F64)?.to_vec1()?;
    Ok((argmax_first(&scores), scores))
}

/// Predicts every query of an episode.
pub trait EpisodePredictor {
    fn predict_episode(&self, episode: &Episode) -> Result<Vec<usize>>;
}

/// Trained model plus pipeline settings, in inference mode.
pub struct Pipeline<'a> {
    pub model: &'a Model,
    pub flags: PipelineFlags,
    pub weights: LossWeights,
    pub preprocess: PreprocessConfig,
}

impl Pipeline<'_> {
    /// `(Q, N)` fused scores for an episode.
    pub fn episode_scores(&self, episode: &Episode) -> Result<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(episode.seed);
        let images = load_episode_images(episode, &self.preprocess, Mode::Eval, &mut rng)?;
        let out = two_stage_forward(self.model, &images, &self.flags, false)?;
        let ns = episode.n_way * episode.k_shot;
        let nq = episode.query.len();
        let split = |t: &Tensor| -> Result<(Tensor, Tensor)> {
            let t = t.detach();
            Ok((
                prototype_tensor(&t.narrow(0, 0, ns)?, episode.n_way, episode.k_shot)?,
                t.narrow(0, ns, nq)?,
            ))
        };
        let (pr, qr) = split(&out.raw)?;
        let refined = out.refined.as_ref().map(split).transpose()?;
        fused_scores_batch(
            &qr,
            refined.as_ref().map(|r| &r.1),
            &pr,
            refined.as_ref().map(|r| &r.0),
            &self.flags,
            &self.weights,
        )
    }
}

impl EpisodePredictor for Pipeline<'_> {
    fn predict_episode(&self, episode: &Episode) -> Result<Vec<usize>> {
        let scores: Vec<Vec<f64>> = self.episode_scores(episode)?.to_dtype(DType::F64)?.to_vec2()?;
        Ok(scores.iter().map(|s| argmax_first(s)).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub n_episodes: usize,
    pub n_way: usize,
    pub k_shot: usize,
    pub queries_per_class: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_episodes: 2000,
            n_way: 5,
            k_shot: 1,
            queries_per_class: 15,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_episodes: usize,
    pub n_way: usize,
    pub k_shot: usize,
    pub queries_per_class: usize,
    pub mean_accuracy: f64,
    pub ci95_halfwidth: f64,
    pub seed: u64,
    pub config_digest: String,
    pub episode_accuracies: Vec<f64>,
}

/// `1.96 · s / √n` with the sample standard deviation; 0 for fewer than two values.
pub fn ci95_halfwidth(acc: &[f64]) -> f64 {
    let n = acc.len();
    if n < 2 {
        return 0.0;
    }
    let mean = acc.iter().sum::<f64>() / n as f64;
    let var = acc.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    1.96 * var.sqrt() / (n as f64).sqrt()
}

impl EvalReport {
    pub fn from_accuracies(episode_accuracies: Vec<f64>, cfg: &EvalConfig, config_digest: String) -> Self {
        let n = episode_accuracies.len();
        let mean_accuracy = if n == 0 {
            0.0
        } else {
            episode_accuracies.iter().sum::<f64>() / n as f64
        };
        Self {
            n_episodes: n,
            n_way: cfg.n_way,
            k_shot: cfg.k_shot,
            queries_per_class: cfg.queries_per_class,
            mean_accuracy,
            ci95_halfwidth: ci95_halfwidth(&episode_accuracies),
            seed: cfg.seed,
            config_digest,
            episode_accuracies,
        }
    }
}

/// Seed of evaluation episode `i` under `seed`.
pub fn episode_seeds(seed: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.next_u64()).collect()
}

/// Mean per-episode accuracy over `cfg.n_episodes` sampled episodes.
pub fn evaluate(predictor: &dyn EpisodePredictor, pool: &Pool, cfg: &EvalConfig, config_digest: &str) -> Result<EvalReport> {
    let mut accuracies = Vec::with_capacity(cfg.n_episodes);
    for s in episode_seeds(cfg.seed, cfg.n_episodes) {
        let episode = sample_episode(pool, cfg.n_way, cfg.k_shot, cfg.queries_per_class, s)?;
        let preds = predictor.predict_episode(&episode)?;
        let labels = episode.query_labels();
        if preds.len() != labels.len() {
            return Err(Error::Shape(format!("{} predictions for {} queries", preds.len(), labels.len())));
        }
        let correct = preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
        accuracies.push(correct as f64 / labels.len().max(1) as f64);
    }
    Ok(EvalReport::from_accuracies(accuracies, cfg, config_digest.to_string()))
}
