//! Acceptance suite. Each test prints one `PASS`/`FAIL` line and then asserts.

use std::collections::VecDeque;
use std::io::Write;

use candle_core::{DType, Device, Tensor, Var};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use bsfa::alignment::{align, correlation, l2l, row_softmax, to_descriptors, AlignedFeature};
use bsfa::backbone::{ClassifierHead, FeatureExtractor, FeatureMap, Model, VarianceExtractor};
use bsfa::bas::{
    aggregate_channels, adaptive_threshold, estimate_foreground, foreground_mask, largest_connected_component,
    tight_bbox, BBox, BinaryMask,
};
use bsfa::data::synthetic::{blob_image, generate, write_dataset, SyntheticConfig};
use bsfa::data::{load_dataset, resolve_split, Pool, SplitPreset};
use bsfa::episodic::{ci95_halfwidth, sample_episode, EpisodePredictor, Pipeline, PipelineFlags};
use bsfa::erasing::{erase_mask, keep_multipliers};
use bsfa::harness::ablation::format_table;
use bsfa::harness::{run_ablation, Config, LrSchedule, Variant};
use bsfa::objective::{episode_loss, global_ce_batch, EpisodeFeatures, LossWeights};

/// Bypasses libtest capture so the verdicts land in the plain test log.
fn verdict(id: usize, name: &str, ok: bool, detail: &str) {
    let word = if ok { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    writeln!(out, "\n{word} [{id}] {name}: {detail}").unwrap();
    out.flush().unwrap();
}

fn random_map(rng: &mut impl Rng, c: usize, h: usize, w: usize, lo: f64, hi: f64) -> FeatureMap {
    let data = (0..c * h * w).map(|_| rng.random_range(lo..hi)).collect();
    FeatureMap::from_vec(data, (c, h, w)).unwrap()
}

fn random_mask(rng: &mut impl Rng, n: usize, density: f64) -> BinaryMask {
    BinaryMask::new(Array2::from_shape_fn((n, n), |_| u8::from(rng.random_bool(density)))).unwrap()
}

fn is_binary(m: &BinaryMask) -> bool {
    m.values().iter().all(|&v| v <= 1)
}

#[test]
fn invariants() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut failures = Vec::new();

    for _ in 0..200 {
        let f = random_map(&mut rng, 6, 11, 11, 0.0, 3.0);
        let a = aggregate_channels(&f).unwrap();
        let fg = foreground_mask(&a, adaptive_threshold(&a));
        let lcc = largest_connected_component(&fg);
        let erase = erase_mask(&f, rng.random_range(0.1..1.0)).unwrap();
        if ![&fg, &lcc, &erase].into_iter().all(is_binary) {
            failures.push("non-binary mask".to_string());
        }
    }

    let mut worst_row = 0f64;
    for _ in 0..200 {
        let s = random_map(&mut rng, 8, 5, 5, -1.0, 1.0);
        let q = random_map(&mut rng, 8, 5, 5, -1.0, 1.0);
        let a = row_softmax(&correlation(&to_descriptors(&s).unwrap(), &to_descriptors(&q).unwrap()).unwrap()).unwrap();
        for row in a.to_vec2().unwrap() {
            worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
            if row.iter().any(|&v| v <= 0.0 || v >= 1.0) {
                failures.push("softmax entry outside (0,1)".into());
            }
        }
    }
    if worst_row > 1e-6 {
        failures.push(format!("row sum off by {worst_row:e}"));
    }

    let mut worst_self = 0f64;
    for _ in 0..100 {
        let f = random_map(&mut rng, 8, 6, 5, -1.0, 1.0);
        let d = to_descriptors(&f).unwrap();
        let v = l2l(&AlignedFeature::new(d.tensor().clone()).unwrap(), &d).unwrap();
        worst_self = worst_self.max((v - 30.0).abs());
    }
    if worst_self > 1e-5 {
        failures.push(format!("l2l(F,F) off by {worst_self:e}"));
    }

    let mut bound_violations = 0;
    for _ in 0..1000 {
        let s = random_map(&mut rng, 4, 4, 4, -1.0, 1.0);
        let q = random_map(&mut rng, 4, 4, 4, -1.0, 1.0);
        let v = l2l(&align(&s, &q).unwrap(), &to_descriptors(&q).unwrap()).unwrap();
        if v.abs() > 16.0 + 1e-9 {
            bound_violations += 1;
        }
    }
    if bound_violations > 0 {
        failures.push(format!("{bound_violations} pairs exceed |l2l| ≤ hw"));
    }

    let mut worst_scale = 0f64;
    for _ in 0..100 {
        let s = random_map(&mut rng, 5, 4, 4, -1.0, 1.0);
        let q = random_map(&mut rng, 5, 4, 4, -1.0, 1.0);
        let lambda = rng.random_range(0.01..100.0);
        let scaled = FeatureMap::new((s.tensor() * lambda).unwrap()).unwrap();
        let a = correlation(&to_descriptors(&s).unwrap(), &to_descriptors(&q).unwrap()).unwrap().to_vec2().unwrap();
        let b = correlation(&to_descriptors(&scaled).unwrap(), &to_descriptors(&q).unwrap()).unwrap().to_vec2().unwrap();
        for (ra, rb) in a.iter().zip(&b) {
            for (x, y) in ra.iter().zip(rb) {
                worst_scale = worst_scale.max((x - y).abs());
            }
        }
    }
    if worst_scale > 1e-10 {
        failures.push(format!("correlation not scale invariant: {worst_scale:e}"));
    }

    let gammas: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
    for _ in 0..100 {
        let f = random_map(&mut rng, 4, 11, 11, 0.0, 2.0);
        let masks: Vec<BinaryMask> = gammas.iter().map(|&g| erase_mask(&f, g).unwrap()).collect();
        if masks.windows(2).any(|p| !p[1].is_subset_of(&p[0])) {
            failures.push("erase mask grows with gamma".into());
            break;
        }
    }

    let ok = failures.is_empty();
    let detail = if ok {
        format!("row sums ±{worst_row:.1e}, l2l(F,F) ±{worst_self:.1e}, scale ±{worst_scale:.1e}")
    } else {
        failures.join("; ")
    };
    verdict(1, "invariants", ok, &detail);
    assert!(ok, "{detail}");
}

/// Breadth-first labelling with an explicit 8-neighbourhood, independent of the library.
fn oracle_lcc(m: &Array2<u8>) -> Array2<u8> {
    let (h, w) = m.dim();
    let mut label = Array2::<usize>::zeros((h, w));
    let mut comps: Vec<Vec<(usize, usize)>> = Vec::new();
    for i in 0..h {
        for j in 0..w {
            if m[[i, j]] == 0 || label[[i, j]] != 0 {
                continue;
            }
            comps.push(Vec::new());
            let id = comps.len();
            label[[i, j]] = id;
            let mut queue = VecDeque::from([(i, j)]);
            while let Some((r, c)) = queue.pop_front() {
                comps[id - 1].push((r, c));
                for (dr, dc) in [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)] {
                    let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                    if nr < 0 || nc < 0 || nr >= h as i64 || nc >= w as i64 {
                        continue;
                    }
                    let (nr, nc) = (nr as usize, nc as usize);
                    if m[[nr, nc]] == 1 && label[[nr, nc]] == 0 {
                        label[[nr, nc]] = id;
                        queue.push_back((nr, nc));
                    }
                }
            }
        }
    }
    let key = |cells: &Vec<(usize, usize)>| {
        let rmin = cells.iter().map(|p| p.0).min().unwrap();
        let cmin = cells.iter().map(|p| p.1).min().unwrap();
        (std::cmp::Reverse(cells.len()), rmin, cmin)
    };
    let mut out = Array2::zeros((h, w));
    if let Some(best) = comps.iter().min_by_key(|c| key(c)) {
        for &(r, c) in best {
            out[[r, c]] = 1;
        }
    }
    out
}

fn oracle_bbox(m: &Array2<u8>) -> Option<(usize, usize, usize, usize)> {
    let cells: Vec<(usize, usize)> = m.indexed_iter().filter(|(_, &v)| v == 1).map(|(p, _)| p).collect();
    if cells.is_empty() {
        return None;
    }
    Some((
        cells.iter().map(|p| p.0).min().unwrap(),
        cells.iter().map(|p| p.1).min().unwrap(),
        cells.iter().map(|p| p.0).max().unwrap(),
        cells.iter().map(|p| p.1).max().unwrap(),
    ))
}

#[test]
fn oracle_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let (mut lcc_bad, mut box_bad) = (0, 0);
    for t in 0..500 {
        let density = 0.1 + 0.8 * (t as f64 / 499.0);
        let m = random_mask(&mut rng, 11, density);
        let lcc = largest_connected_component(&m);
        let expect = oracle_lcc(m.values());
        if lcc.values() != &expect {
            lcc_bad += 1;
        }
        let b = tight_bbox(&lcc);
        let want = match oracle_bbox(&expect) {
            Some((r0, c0, r1, c1)) => BBox { row_min: r0, col_min: c0, row_max: r1, col_max: c1 },
            None => BBox::full(11, 11),
        };
        if b != want {
            box_bad += 1;
        }
    }

    let mut ci_worst = 0f64;
    for n in [2usize, 5, 50, 600] {
        let acc: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let mean = acc.iter().sum::<f64>() / n as f64;
        let ss: f64 = acc.iter().map(|a| (a - mean) * (a - mean)).sum();
        let expect = 1.96 * (ss / (n as f64 - 1.0)).sqrt() / (n as f64).sqrt();
        ci_worst = ci_worst.max((ci95_halfwidth(&acc) - expect).abs());
    }
    let ci_ok = ci_worst <= 1e-9 && ci95_halfwidth(&[0.7]) == 0.0;

    let ok = lcc_bad == 0 && box_bad == 0 && ci_ok;
    let detail = format!("500 masks: {lcc_bad} component and {box_bad} box mismatches; CI error {ci_worst:.1e}");
    verdict(2, "oracle equivalence", ok, &detail);
    assert!(ok, "{detail}");
}

const C: usize = 4;
const H: usize = 3;
const N_WAY: usize = 2;
const K_SHOT: usize = 1;
const G: usize = 3;
const Q_PER: usize = 2;

struct GradCase {
    raw: Vec<f64>,
    refined: Vec<f64>,
    head_raw: Vec<f64>,
    head_refined: Vec<f64>,
    keep: Vec<f64>,
}

fn rows() -> usize {
    N_WAY * K_SHOT + N_WAY * Q_PER
}

fn query_labels() -> Vec<usize> {
    (0..N_WAY).flat_map(|j| std::iter::repeat_n(j, Q_PER)).collect()
}

fn global_labels() -> Vec<usize> {
    vec![0, 2, 0, 0, 2, 2]
}

fn total_loss(raw: &Tensor, refined: &Tensor, case: &GradCase, flags: &PipelineFlags, w: &LossWeights) -> Tensor {
    let dev = Device::Cpu;
    let hr = ClassifierHead::from_weights(Tensor::from_slice(&case.head_raw, (G, C), &dev).unwrap()).unwrap();
    let hf = ClassifierHead::from_weights(Tensor::from_slice(&case.head_refined, (G, C), &dev).unwrap()).unwrap();
    let keep = Tensor::from_slice(&case.keep, (rows(), 1, H, H), &dev).unwrap();
    let ql = query_labels();
    let gl = global_labels();
    let f = EpisodeFeatures {
        raw,
        refined: Some(refined),
        n_way: N_WAY,
        k_shot: K_SHOT,
        query_labels: &ql,
        global_labels: &gl,
        erase_keep: flags.erasing.then_some(&keep),
    };
    episode_loss(&f, &hr, &hf, flags, w).unwrap().total
}

fn loss_value(raw: &[f64], refined: &[f64], case: &GradCase, flags: &PipelineFlags, w: &LossWeights) -> f64 {
    let shape = (rows(), C, H, H);
    let r = Tensor::from_slice(raw, shape, &Device::Cpu).unwrap();
    let f = Tensor::from_slice(refined, shape, &Device::Cpu).unwrap();
    total_loss(&r, &f, case, flags, w).to_scalar::<f64>().unwrap()
}

fn grad_case(seed: u64) -> GradCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rows() * C * H * H;
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..2.0)).collect();
    let refined = (0..n).map(|_| rng.random_range(0.05..2.0)).collect();
    let head_raw = (0..G * C).map(|_| rng.random_range(-1.0..1.0)).collect();
    let head_refined = (0..G * C).map(|_| rng.random_range(-1.0..1.0)).collect();
    let t = Tensor::from_slice(&raw, (rows(), C, H, H), &Device::Cpu).unwrap();
    let keep = keep_multipliers(&t, 0.85).unwrap().flatten_all().unwrap().to_vec1().unwrap();
    GradCase {
        raw,
        refined,
        head_raw,
        head_refined,
        keep,
    }
}

#[test]
fn gradient_check() {
    let w = LossWeights {
        lambda: 0.4,
        ..LossWeights::default()
    };
    let variants = [Variant::C3, Variant::C1, Variant::B0, Variant::B2];
    let eps = 1e-6;
    let mut worst = 0f64;
    let mut checked = 0;
    for (s, v) in variants.iter().enumerate() {
        let flags = v.flags();
        let case = grad_case(100 + s as u64);
        let shape = (rows(), C, H, H);
        let raw = Var::from_slice(&case.raw, shape, &Device::Cpu).unwrap();
        let refined = Var::from_slice(&case.refined, shape, &Device::Cpu).unwrap();
        let grads = total_loss(raw.as_tensor(), refined.as_tensor(), &case, &flags, &w).backward().unwrap();
        let g_raw: Vec<f64> = grads.get(raw.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let g_ref: Vec<f64> = match grads.get(refined.as_tensor()) {
            Some(g) => g.flatten_all().unwrap().to_vec1().unwrap(),
            None => vec![0.0; case.refined.len()],
        };
        for which in 0..2 {
            let analytic = if which == 0 { &g_raw } else { &g_ref };
            for i in 0..analytic.len() {
                let (mut p, mut m) = (case.raw.clone(), case.raw.clone());
                let (mut pf, mut mf) = (case.refined.clone(), case.refined.clone());
                if which == 0 {
                    p[i] += eps;
                    m[i] -= eps;
                } else {
                    pf[i] += eps;
                    mf[i] -= eps;
                }
                let numeric = (loss_value(&p, &pf, &case, &flags, &w) - loss_value(&m, &mf, &case, &flags, &w)) / (2.0 * eps);
                let err = (analytic[i] - numeric).abs() / (analytic[i].abs() + numeric.abs()).max(1e-6);
                worst = worst.max(err);
                checked += 1;
            }
        }
    }
    let ok = worst < 1e-4;
    let detail = format!("{checked} entries over 4 variants, max relative error {worst:.2e}");
    verdict(3, "gradient check", ok, &detail);
    assert!(ok, "{detail}");
}

#[test]
fn bas_localization() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let extractor = VarianceExtractor::default();
    let mut hits = 0;
    for _ in 0..100 {
        let (img, (row, col)) = blob_image(84, &mut rng);
        let f = extractor.extract(&img).unwrap();
        let est = estimate_foreground(&f, (84, 84)).unwrap();
        if est.image_box.contains_point(row, col) {
            hits += 1;
        }
    }
    let ok = hits >= 95;
    let detail = format!("{hits}/100 boxes contain the blob centroid");
    verdict(4, "BAS localization", ok, &detail);
    assert!(ok, "{detail}");
}

/// Desk-scale settings for the synthetic run; see the README for the rationale.
const END_TO_END_CONFIG: &str = "\
backbone.arch=tiny-test
train.epochs=5
train.episodes_per_epoch=30
train.lr_initial=0.3
train.lr_milestone=100
train.val_episodes=0
episode.queries_per_class=5
eval.episodes=200
seed=0
";

#[test]
fn end_to_end_learning() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &SyntheticConfig::default()).unwrap();
    let split = resolve_split(dir.path(), Some(SplitPreset::Synthetic)).unwrap();
    let pools = load_dataset(dir.path(), &split).unwrap();
    assert_eq!((pools.base.len(), pools.novel.len()), (10, 5));
    let cfg = Config::from_text(END_TO_END_CONFIG).unwrap();
    let out = dir.path().join("ablation");
    let rows = run_ablation(&cfg, &pools, &Variant::TABLE, &out, &mut |_| {}).unwrap();

    let table = format_table(&rows);
    let mut stdout = std::io::stdout().lock();
    write!(stdout, "{table}").unwrap();
    drop(stdout);

    let acc = |v: Variant| rows.iter().find(|r| r.variant == v).map(|r| r.report.mean_accuracy).unwrap();
    let full = acc(Variant::C3);
    let b0 = acc(Variant::B0);
    let emitted = out.join("ablation.tsv").is_file() && rows.len() == Variant::TABLE.len();
    let n = rows.iter().map(|r| r.report.n_episodes).min().unwrap();
    let ok = full >= 0.40 && b0 > 0.20 && emitted && n == 200;
    let detail = format!("full {full:.4}, B0 {b0:.4} over {n} novel 5-way 1-shot episodes; table rows {}", rows.len());
    verdict(5, "end-to-end learning", ok, &detail);
    assert!(ok, "{detail}");
}

#[test]
fn ablation_switches() {
    let mut failures = Vec::new();

    let syn = SyntheticConfig {
        classes: 3,
        images_per_class: 8,
        ..SyntheticConfig::default()
    };
    let pool = Pool::from_images(generate(&syn), false);
    let cfg = Config::from_text("backbone.arch=tiny-test\n").unwrap();
    let model = Model::new(cfg.backbone.clone(), 3, DType::F64, 9).unwrap();
    let beta_zero = LossWeights {
        beta: 0.0,
        ..cfg.loss.clone()
    };
    let full = Pipeline {
        model: &model,
        flags: Variant::Full.flags(),
        weights: beta_zero.clone(),
        preprocess: cfg.preprocess_config(),
    };
    let raw_only = Pipeline {
        model: &model,
        flags: PipelineFlags {
            refined_stage: false,
            ..Variant::Full.flags()
        },
        weights: beta_zero,
        preprocess: cfg.preprocess_config(),
    };
    let mut compared = 0;
    for seed in 0..10 {
        let ep = sample_episode(&pool, 2, 1, 3, seed).unwrap();
        let a = full.episode_scores(&ep).unwrap().to_vec2::<f64>().unwrap();
        let b = raw_only.episode_scores(&ep).unwrap().to_vec2::<f64>().unwrap();
        if a != b || full.predict_episode(&ep).unwrap() != raw_only.predict_episode(&ep).unwrap() {
            failures.push(format!("beta=0 differs from refined-off on episode {seed}"));
        }
        compared += ep.query.len();
    }

    let case = grad_case(77);
    let shape = (rows(), C, H, H);
    let no_local = LossWeights {
        lambda: 0.0,
        ..LossWeights::default()
    };
    for v in [Variant::C3, Variant::C0, Variant::B2] {
        let flags = v.flags();
        let raw = Var::from_slice(&case.raw, shape, &Device::Cpu).unwrap();
        let refined = Var::from_slice(&case.refined, shape, &Device::Cpu).unwrap();
        let g = total_loss(raw.as_tensor(), refined.as_tensor(), &case, &flags, &no_local).backward().unwrap();

        let raw2 = Var::from_slice(&case.raw, shape, &Device::Cpu).unwrap();
        let refined2 = Var::from_slice(&case.refined, shape, &Device::Cpu).unwrap();
        let hr = ClassifierHead::from_weights(Tensor::from_slice(&case.head_raw, (G, C), &Device::Cpu).unwrap()).unwrap();
        let hf = ClassifierHead::from_weights(Tensor::from_slice(&case.head_refined, (G, C), &Device::Cpu).unwrap()).unwrap();
        let keep = Tensor::from_slice(&case.keep, (rows(), 1, H, H), &Device::Cpu).unwrap();
        let erased = if flags.erasing {
            raw2.as_tensor().broadcast_mul(&keep).unwrap()
        } else {
            raw2.as_tensor().clone()
        };
        let mut global = (global_ce_batch(&erased, &hr, &global_labels()).unwrap() * no_local.alpha).unwrap();
        if flags.refined_stage {
            let gf = (global_ce_batch(refined2.as_tensor(), &hf, &global_labels()).unwrap() * no_local.beta).unwrap();
            global = (global + gf).unwrap();
        }
        let g2 = global.backward().unwrap();

        let flat = |g: Option<&Tensor>| -> Vec<f64> {
            g.map(|t| t.flatten_all().unwrap().to_vec1().unwrap()).unwrap_or_else(|| vec![0.0; case.raw.len()])
        };
        let max_diff = |a: Vec<f64>, b: Vec<f64>| a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        let d_raw = max_diff(flat(g.get(raw.as_tensor())), flat(g2.get(raw2.as_tensor())));
        let d_ref = max_diff(flat(g.get(refined.as_tensor())), flat(g2.get(refined2.as_tensor())));
        if d_raw != 0.0 || d_ref != 0.0 {
            failures.push(format!("{v}: lambda=0 gradients differ from global-only by {:e}", d_raw.max(d_ref)));
        }
    }

    let ok = failures.is_empty();
    let detail = if ok {
        format!("beta=0 matches refined-off on {compared} queries; lambda=0 gradients equal global-only on 3 variants")
    } else {
        failures.join("; ")
    };
    verdict(6, "ablation switches", ok, &detail);
    assert!(ok, "{detail}");
}

#[test]
fn schedule_probe() {
    let s = LrSchedule::default();
    let probe = [(0, 0.1), (59, 0.1), (60, 0.06), (69, 0.06), (70, 0.012), (80, 0.0024)];
    let got: Vec<f64> = probe.iter().map(|&(e, _)| s.lr(e)).collect();
    let ok = probe.iter().zip(&got).all(|(&(_, want), &g)| g == want);
    let detail = format!("epochs 0/59/60/69/70/80 → {got:?}");
    verdict(7, "schedule probe", ok, &detail);
    assert!(ok, "{detail}");
}
