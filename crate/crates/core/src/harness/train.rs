use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::Config;
use super::optim::Sgd;
use crate::backbone::{CheckpointMeta, Model};
use crate::data::{DatasetPools, Mode, Pool};
use crate::episodic::{
    argmax_first, check_disjoint, evaluate, fused_scores_batch, load_episode_images, prototype_tensor, sample_episode,
    two_stage_forward, Episode, EvalReport, Pipeline,
};
use crate::erasing::keep_multipliers;
use crate::objective::{episode_loss, EpisodeFeatures, LossBreakdown};
use crate::{Error, Result};

/// Files produced by one run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunArtifacts {
    pub run_dir: PathBuf,
    pub config_snapshot: PathBuf,
    pub metrics_log: PathBuf,
    /// Latest checkpoint, rewritten every epoch.
    pub checkpoint: PathBuf,
    /// Checkpoint with the best validation accuracy, when validation ran.
    pub best_checkpoint: Option<PathBuf>,
    pub eval_reports: Vec<PathBuf>,
    pub visualization_dir: PathBuf,
}

impl RunArtifacts {
    pub fn new(run_dir: &Path) -> Self {
        Self {
            run_dir: run_dir.to_path_buf(),
            config_snapshot: run_dir.join("config.txt"),
            metrics_log: run_dir.join("metrics.jsonl"),
            checkpoint: run_dir.join("checkpoint.safetensors"),
            best_checkpoint: None,
            eval_reports: Vec::new(),
            visualization_dir: run_dir.join("visualizations"),
        }
    }
}

/// One metrics-log record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub episode_seed: u64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    /// Query accuracy of the training episode under the fused scores.
    pub train_accuracy: f64,
}

pub enum TrainProgress<'a> {
    Step(&'a StepRecord),
    Epoch {
        epoch: usize,
        mean_loss: f64,
        mean_accuracy: f64,
        val_accuracy: Option<f64>,
    },
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of training episode `step` under run seed `seed`.
pub fn training_episode_seed(seed: u64, step: usize) -> u64 {
    splitmix(seed ^ splitmix(step as u64))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn scalar_accuracy(scores: &Tensor, labels: &[usize]) -> Result<f64> {
    let rows: Vec<Vec<f64>> = scores.to_dtype(DType::F64)?.to_vec2()?;
    let correct = rows.iter().zip(labels).filter(|(r, &l)| argmax_first(r) == l).count();
    Ok(correct as f64 / labels.len().max(1) as f64)
}

/// Forward, losses and one optimizer update on `episode`.
pub fn train_step(model: &Model, opt: &mut Sgd, episode: &Episode, cfg: &Config, lr: f64, step: usize, epoch: usize) -> Result<StepRecord> {
    let flags = cfg.flags();
    let mut rng = ChaCha8Rng::seed_from_u64(episode.seed);
    let images = load_episode_images(episode, &cfg.preprocess_config(), Mode::Train, &mut rng)?;
    let out = two_stage_forward(model, &images, &flags, true)?;
    let keep = if flags.erasing {
        Some(keep_multipliers(&out.raw.detach(), cfg.erase.gamma)?)
    } else {
        None
    };
    let global_labels = episode
        .global_labels()
        .ok_or_else(|| Error::Data("training episodes need base-class labels".into()))?;
    let query_labels = episode.query_labels();
    let loss = episode_loss(
        &EpisodeFeatures {
            raw: &out.raw,
            refined: out.refined.as_ref(),
            n_way: episode.n_way,
            k_shot: episode.k_shot,
            query_labels: &query_labels,
            global_labels: &global_labels,
            erase_keep: keep.as_ref(),
        },
        model.head_raw(),
        model.head_refined(),
        &flags,
        &cfg.loss,
    )?;
    if !loss.breakdown.is_finite() {
        return Err(Error::NonFiniteLoss {
            step,
            episode_seed: episode.seed,
            detail: serde_json::to_string(&loss.breakdown).unwrap_or_default(),
        });
    }
    let grads = loss.total.backward()?;
    opt.step(&grads, model.params().trainable(), lr)?;

    let ns = episode.n_way * episode.k_shot;
    let nq = query_labels.len();
    let split = |t: &Tensor| -> Result<(Tensor, Tensor)> {
        let t = t.detach();
        Ok((prototype_tensor(&t.narrow(0, 0, ns)?, episode.n_way, episode.k_shot)?, t.narrow(0, ns, nq)?))
    };
    let (pr, qr) = split(&out.raw)?;
    let refined = out.refined.as_ref().map(split).transpose()?;
    let scores = fused_scores_batch(&qr, refined.as_ref().map(|r| &r.1), &pr, refined.as_ref().map(|r| &r.0), &flags, &cfg.loss)?;
    Ok(StepRecord {
        step,
        epoch,
        lr,
        episode_seed: episode.seed,
        loss: loss.breakdown,
        train_accuracy: scalar_accuracy(&scores, &query_labels)?,
    })
}

/// Evaluates on `pool`; writes `eval_report.json` into `out_dir` when given.
pub fn evaluate_model(model: &Model, cfg: &Config, pool: &Pool, train_classes: &[String], out_dir: Option<&Path>) -> Result<EvalReport> {
    check_disjoint(pool, train_classes)?;
    let pipeline = Pipeline {
        model,
        flags: cfg.flags(),
        weights: cfg.loss.clone(),
        preprocess: cfg.preprocess_config(),
    };
    let report = evaluate(&pipeline, pool, &cfg.eval_config(cfg.eval_episodes, cfg.seed), &cfg.digest())?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_json(&dir.join("eval_report.json"), &report)?;
    }
    Ok(report)
}

fn checkpoint_meta(cfg: &Config, pools: &DatasetPools, epoch: usize, val: Option<f64>) -> CheckpointMeta {
    let mut extra = HashMap::from([
        ("variant".to_string(), cfg.variant.to_string()),
        ("epoch".to_string(), epoch.to_string()),
        ("config_digest".to_string(), cfg.digest()),
    ]);
    if let Some(v) = val {
        extra.insert("val_accuracy".to_string(), v.to_string());
    }
    let mut base_classes = pools.base.class_names().into_iter().map(String::from).collect::<Vec<_>>();
    base_classes.sort();
    CheckpointMeta {
        backbone: cfg.backbone.clone(),
        base_classes,
        extra,
    }
}

/// Episodic training on the base pool. Returns the selected model: the best validation
/// checkpoint when validation ran, otherwise the final weights.
pub fn train(cfg: &Config, pools: &DatasetPools, run_dir: &Path, progress: &mut dyn FnMut(TrainProgress<'_>)) -> Result<(Model, RunArtifacts)> {
    cfg.validate()?;
    fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let mut artifacts = RunArtifacts::new(run_dir);
    fs::write(&artifacts.config_snapshot, cfg.to_text()).map_err(|e| Error::io(&artifacts.config_snapshot, e))?;

    let model = Model::new(cfg.backbone.clone(), pools.base.len(), cfg.train.dtype, cfg.seed)?;
    let mut opt = Sgd::new(cfg.train.momentum, cfg.train.weight_decay);
    let log_file = File::create(&artifacts.metrics_log).map_err(|e| Error::io(&artifacts.metrics_log, e))?;
    let mut log = BufWriter::new(log_file);
    let validate = cfg.train.val_episodes > 0 && pools.val.len() >= cfg.episode.n_way;
    let mut best: Option<f64> = None;
    let best_path = run_dir.join("best.safetensors");

    let mut step = 0;
    for epoch in 0..cfg.train.epochs {
        let lr = cfg.train.schedule.lr(epoch);
        let (mut loss_sum, mut acc_sum) = (0.0, 0.0);
        for _ in 0..cfg.train.episodes_per_epoch {
            let seed = training_episode_seed(cfg.seed, step);
            let ep = sample_episode(&pools.base, cfg.episode.n_way, cfg.episode.k_shot, cfg.episode.queries_per_class, seed)?;
            let record = match train_step(&model, &mut opt, &ep, cfg, lr, step, epoch) {
                Err(e @ Error::NonFiniteLoss { .. }) => {
                    let dump = serde_json::json!({
                        "step": step,
                        "epoch": epoch,
                        "episode_seed": seed,
                        "classes": ep.classes.iter().map(|&c| pools.base.classes[c].name.clone()).collect::<Vec<_>>(),
                        "error": e.to_string(),
                    });
                    write_json(&run_dir.join("nonfinite_episode.json"), &dump)?;
                    return Err(e);
                }
                other => other?,
            };
            let line = serde_json::to_string(&record).map_err(|e| Error::Data(e.to_string()))?;
            writeln!(log, "{line}").map_err(|e| Error::io(&artifacts.metrics_log, e))?;
            loss_sum += record.loss.total;
            acc_sum += record.train_accuracy;
            progress(TrainProgress::Step(&record));
            step += 1;
        }
        log.flush().map_err(|e| Error::io(&artifacts.metrics_log, e))?;

        let val_accuracy = if validate {
            let mut vcfg = cfg.clone();
            vcfg.eval_episodes = cfg.train.val_episodes;
            Some(evaluate_model(&model, &vcfg, &pools.val, &pools.split.base, None)?.mean_accuracy)
        } else {
            None
        };
        model.save(&artifacts.checkpoint, &checkpoint_meta(cfg, pools, epoch, val_accuracy))?;
        if let Some(v) = val_accuracy {
            if best.is_none_or(|b| v > b) {
                best = Some(v);
                model.save(&best_path, &checkpoint_meta(cfg, pools, epoch, val_accuracy))?;
                artifacts.best_checkpoint = Some(best_path.clone());
            }
        }
        let n = cfg.train.episodes_per_epoch.max(1) as f64;
        progress(TrainProgress::Epoch {
            epoch,
            mean_loss: loss_sum / n,
            mean_accuracy: acc_sum / n,
            val_accuracy,
        });
    }
    if cfg.train.epochs == 0 {
        model.save(&artifacts.checkpoint, &checkpoint_meta(cfg, pools, 0, None))?;
    }
    let model = match &artifacts.best_checkpoint {
        Some(p) => Model::load(p, cfg.train.dtype)?.0,
        None => model,
    };
    Ok((model, artifacts))
}

/// Reads a metrics log back.
pub fn read_metrics(path: &Path) -> Result<Vec<StepRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Data(format!("{}: {e}", path.display()))))
        .collect()
}
