//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails. `ACCEPTANCE_ONLY=2,5` runs a subset.

use std::collections::HashSet;
use std::panic::{self, AssertUnwindSafe};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use clipdg::analysis::{cosine, rank_by_similarity, FeatureRecord};
use clipdg::clip::{fuse, stub_encoder, ClipEncoder, ClipFeature, FusionConfig};
use clipdg::data::{synth_dataset, synth_sample, Dataset, GtHeatmap, StyleParams};
use clipdg::losses::{
    batch_objective, contrastive_loss, contrastive_with_grad, l1_distance, select_negative, BatchContext, BatchLoss,
    ClampMode, LossConfig, SampleOutputs,
};
use clipdg::model::{ArchConfig, HandPoseNet, OutputGrads, PoseModel, TrainTrace};
use clipdg::prompt::sample_prompt;
use clipdg::train::eval::{report_from_errors, sample_errors};
use clipdg::train::{evaluate_model, read_log, Checkpoint, TrainConfig, Trainer, LOG_FILE};
use clipdg::types::{Image, Pose3D, CLIP_DIM, HEATMAP_LEN, NUM_JOINTS};

type Check = fn() -> Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_clipdg")
}

fn tiny_config() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.arch = ArchConfig::tiny();
    cfg.batch_size = 4;
    cfg.learning_rate = 1e-3;
    cfg
}

fn c1_prompt_count() -> Result<String, String> {
    let t = Instant::now();
    let out = Command::new(bin()).args(["gen-prompts", "--all"]).output().map_err(|e| e.to_string())?;
    let elapsed = t.elapsed();
    ensure(out.status.success(), "gen-prompts exited with an error")?;
    let text = String::from_utf8(out.stdout).map_err(|e| e.to_string())?;
    let lines: Vec<&str> = text.lines().collect();
    let unique: HashSet<&str> = lines.iter().copied().collect();
    let detail = format!("{} lines, {} unique, {:.0} ms", lines.len(), unique.len(), elapsed.as_secs_f64() * 1e3);
    ensure(lines.len() == 3920 && unique.len() == 3920, detail.clone())?;
    ensure(elapsed < Duration::from_secs(1), detail.clone())?;
    Ok(detail)
}

fn c2_contrastive_analytics() -> Result<String, String> {
    let d = 128;
    let a: Vec<f64> = (0..d).map(|i| (i as f64 * 0.37).sin()).collect();
    let mut n = a.clone();
    n[5] += 0.5;
    let v1 = contrastive_loss(&a, &a, &n, 0.5).map_err(|e| e.to_string())?;
    ensure((v1 + 0.5).abs() <= 1e-10, format!("anchor=positive, negative at margin gave {v1}"))?;

    let mut p = a.clone();
    p[0] += 1.5;
    p[1] -= 0.5;
    let mut n = a.clone();
    n[2] += 2.0;
    n[3] -= 1.0;
    ensure((l1_distance(&a, &p) - 2.0).abs() < 1e-12 && (l1_distance(&a, &n) - 3.0).abs() < 1e-12, "bad fixture")?;
    let v2 = contrastive_loss(&a, &p, &n, 0.5).map_err(|e| e.to_string())?;
    ensure((v2 + 1.0).abs() <= 1e-10, format!("distances (2, 3) gave {v2}"))?;

    let mut n = a.clone();
    n[7] += 0.2;
    let g = contrastive_with_grad(&a, &p, &n, 0.5, ClampMode::Max).map_err(|e| e.to_string())?;
    let gmax = g.negative.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    ensure(gmax == 0.0, format!("margin-floor gradient wrt negative has max {gmax}"))?;
    ensure((g.loss - (2.0 - 0.5)).abs() <= 1e-10, format!("margin-floor loss {}", g.loss))?;
    Ok(format!("-0.5 -> {v1:.3e}, -1.0 -> {v2:.3e}, floor grad max {gmax}"))
}

fn brute_negative(batch: &BatchContext, anchor: usize) -> usize {
    let dist = |j: usize| {
        batch.predicted_heatmaps[anchor]
            .iter()
            .zip(&batch.gt_heatmaps[j])
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    };
    let others: Vec<usize> = (0..batch.len()).filter(|&j| j != anchor).collect();
    let best = others.iter().map(|&j| dist(j)).fold(f64::NEG_INFINITY, f64::max);
    *others.iter().find(|&&j| dist(j) == best).unwrap()
}

fn c3_mining_oracle() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut checked = 0;
    let mut ties = 0;
    for trial in 0..1000 {
        let b = rng.gen_range(2..=16);
        let full = trial % 10 == 0;
        let dim = if full { HEATMAP_LEN } else { 6 };
        let gen = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            if full {
                (0..dim).map(|_| rng.gen::<f64>()).collect()
            } else {
                (0..dim).map(|_| rng.gen_range(0..3) as f64).collect()
            }
        };
        let mut batch = BatchContext::default();
        for _ in 0..b {
            batch.predicted_heatmaps.push(gen(&mut rng));
            batch.gt_heatmaps.push(gen(&mut rng));
        }
        if !full && b > 2 && rng.gen_bool(0.5) {
            let src = rng.gen_range(0..b);
            let dst = rng.gen_range(0..b);
            batch.gt_heatmaps[dst] = batch.gt_heatmaps[src].clone();
        }
        for anchor in 0..b {
            let got = select_negative(&batch, anchor).map_err(|e| e.to_string())?;
            let want = brute_negative(&batch, anchor);
            ensure(got == want, format!("batch {trial} anchor {anchor}: got {got}, brute force {want}"))?;
            let d = |j: usize| l1_distance(&batch.gt_heatmaps[j], &batch.gt_heatmaps[want]);
            if (0..b).any(|j| j != anchor && j != want && d(j) == 0.0) {
                ties += 1;
            }
            checked += 1;
        }
    }
    Ok(format!("1000 batches, {checked} anchors agree ({ties} with duplicated candidates)"))
}

struct GradFixture {
    net: HandPoseNet,
    images: Vec<Image>,
    gts: Vec<GtHeatmap>,
    gt_poses: Vec<Vec<f64>>,
    clip: Vec<ClipFeature>,
    loss: LossConfig,
}

impl GradFixture {
    fn forward(&self, params: &[f64]) -> (BatchLoss, Vec<TrainTrace>) {
        let traces: Vec<TrainTrace> = self
            .images
            .iter()
            .zip(&self.clip)
            .map(|(img, c)| self.net.forward_train(params, img, Some(c)).unwrap())
            .collect();
        let outputs: Vec<SampleOutputs> = traces
            .iter()
            .enumerate()
            .map(|(i, t)| SampleOutputs {
                heatmap: t.heatmap(),
                gt_heatmap: self.gts[i].heatmap.values(),
                visible: &self.gts[i].visible,
                pose: &t.pose,
                gt_pose: &self.gt_poses[i],
                encodings: t.encodings.as_ref().map(|(a, b)| (a.as_slice(), b.as_slice())),
            })
            .collect();
        let loss = batch_objective(&outputs, &self.loss).unwrap();
        (loss, traces)
    }

    fn gradient(&self, params: &[f64]) -> Vec<f64> {
        let (loss, traces) = self.forward(params);
        let mut g = vec![0.0; params.len()];
        for (k, t) in traces.iter().enumerate() {
            let d = OutputGrads {
                heatmap: loss.heatmap_grads[k].clone(),
                pose: loss.pose_grads[k].clone(),
                plain: Some(loss.plain_grads[k].clone()),
                fused: Some(loss.fused_grads[k].clone()),
            };
            self.net.backward_train(params, t, &d, &mut g);
        }
        g
    }

    /// Every discrete choice the objective depends on.
    fn signature(&self, params: &[f64]) -> (Vec<u64>, Vec<usize>, Vec<Vec<i8>>) {
        let (loss, traces) = self.forward(params);
        let sign = |x: f64| {
            if x > 0.0 {
                1
            } else if x < 0.0 {
                -1
            } else {
                0
            }
        };
        let mut signs = Vec::new();
        for (i, t) in traces.iter().enumerate() {
            let (a, p) = t.encodings.as_ref().unwrap();
            let (n, _) = traces[loss.negatives[i]].encodings.as_ref().unwrap();
            let mut s: Vec<i8> = a.iter().zip(p).map(|(x, y)| sign(x - y)).collect();
            s.extend(a.iter().zip(n).map(|(x, y)| sign(x - y)));
            s.push((l1_distance(a, n) > self.loss.margin) as i8);
            signs.push(s);
        }
        (traces.iter().map(|t| t.kink_signature()).collect(), loss.negatives, signs)
    }
}

fn c4_gradient_check() -> Result<String, String> {
    let t = Instant::now();
    let arch = ArchConfig::tiny();
    let model = PoseModel::new(arch, 4).map_err(|e| e.to_string())?;
    let enc = stub_encoder(0);
    let ds = synth_dataset(3, 4);
    let mut fx = GradFixture {
        net: model.net.clone(),
        images: Vec::new(),
        gts: Vec::new(),
        gt_poses: Vec::new(),
        clip: Vec::new(),
        loss: LossConfig::default(),
    };
    ensure(
        (fx.loss.lambda1, fx.loss.lambda2, fx.loss.lambda3) == (1.0, 1.0, 0.1),
        "default loss weights are not (1, 1, 0.1)",
    )?;
    for i in 0..3 {
        let s = ds.get(i).map_err(|e| e.to_string())?;
        let img = enc.encode_image(&s.image).unwrap();
        let txt = enc.encode_text(&sample_prompt(i as u64).text).unwrap();
        fx.clip.push(fuse(&img, &txt, FusionConfig::default()).unwrap());
        fx.gts.push(s.gt_heatmap(1.5).unwrap());
        fx.gt_poses.push(s.joints3d.flat());
        fx.images.push(s.image);
    }
    let params = model.params.clone();
    let analytic = fx.gradient(&params);
    let base = fx.signature(&params);
    let specs = model.net.layout().specs().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let h = 1e-5;
    let (mut slices, mut points, mut kinks) = (0, 0, 0);
    let mut worst: f64 = 0.0;
    let stride = (specs.len() / 16).max(1);
    for spec in specs.iter().step_by(stride) {
        let mut hits = 0;
        for _ in 0..8 {
            if hits == 2 {
                break;
            }
            let idx = spec.offset + rng.gen_range(0..spec.len);
            let mut plus = params.clone();
            plus[idx] += h;
            let mut minus = params.clone();
            minus[idx] -= h;
            if fx.signature(&plus) != base || fx.signature(&minus) != base {
                kinks += 1;
                continue;
            }
            let numeric = (fx.forward(&plus).0.total - fx.forward(&minus).0.total) / (2.0 * h);
            let a = analytic[idx];
            let scale = a.abs().max(numeric.abs());
            if scale < 1e-8 {
                continue;
            }
            let rel = (a - numeric).abs() / scale;
            ensure(
                rel <= 1e-3,
                format!("{}[{}]: analytic {a:e}, numeric {numeric:e}, rel {rel:e}", spec.name, idx - spec.offset),
            )?;
            worst = worst.max(rel);
            hits += 1;
            points += 1;
        }
        if hits > 0 {
            slices += 1;
        }
    }
    let elapsed = t.elapsed();
    let detail = format!(
        "{slices} tensors, {points} coordinates, worst rel err {worst:.2e}, {kinks} kink-adjacent skipped, {:.1} s",
        elapsed.as_secs_f64()
    );
    ensure(slices >= 10, detail.clone())?;
    ensure(elapsed < Duration::from_secs(120), detail.clone())?;
    Ok(detail)
}

fn zero_branch2(model: &mut PoseModel) -> usize {
    let specs = model.net.layout().specs().to_vec();
    let mut n = 0;
    for spec in specs.iter().filter(|s| HandPoseNet::is_branch2_param(&s.name)) {
        model.params[spec.offset..spec.offset + spec.len].iter_mut().for_each(|v| *v = 0.0);
        n += spec.len;
    }
    n
}

fn c5_branch_isolation() -> Result<String, String> {
    let ds = synth_dataset(6, 5);
    let mut cfg = TrainConfig::default();
    cfg.batch_size = 3;
    cfg.max_steps = Some(2);
    let mut trainer = Trainer::new(cfg.clone(), false).map_err(|e| e.to_string())?;
    trainer.run_epoch(&ds).map_err(|e| e.to_string())?;
    let with_clip = trainer.model().clone();
    let mut without_clip = PoseModel::new(cfg.arch.clone(), cfg.seed).map_err(|e| e.to_string())?;
    without_clip.params = with_clip.params.clone();
    let mut zeroed = with_clip.clone();
    let n = zero_branch2(&mut zeroed);
    ensure(n > 0, "no Branch2/projection-head parameters found")?;
    for i in 0..ds.len() {
        let img = ds.get(i).map_err(|e| e.to_string())?.image;
        let a = with_clip.predict(&img).map_err(|e| e.to_string())?;
        let b = without_clip.predict(&img).map_err(|e| e.to_string())?;
        let c = zeroed.predict(&img).map_err(|e| e.to_string())?;
        let bits = |p: &Pose3D| p.flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        ensure(bits(&a) == bits(&b), format!("sample {i}: prediction depends on the clip backend"))?;
        ensure(bits(&a) == bits(&c), format!("sample {i}: prediction depends on Branch2 parameters"))?;
    }
    Ok(format!("{} samples bit-identical after 2 training steps, {n} Branch2 parameters zeroed", ds.len()))
}

fn c6_frozen_encoder() -> Result<String, String> {
    let mut ds = synth_dataset(8, 6);
    ds.materialize().map_err(|e| e.to_string())?;
    let mut cfg = tiny_config();
    cfg.batch_size = 2;
    cfg.epochs = 1000;
    cfg.max_steps = Some(100);
    let mut trainer = Trainer::new(cfg, false).map_err(|e| e.to_string())?;
    let probe = ds.get(0).map_err(|e| e.to_string())?.image;
    let before = trainer.encoder().checksum();
    let f_before = trainer.encoder().encode_image(&probe).map_err(|e| e.to_string())?;
    while trainer.step_count() < 100 {
        trainer.run_epoch(&ds).map_err(|e| e.to_string())?;
    }
    let after = trainer.encoder().checksum();
    let f_after = trainer.encoder().encode_image(&probe).map_err(|e| e.to_string())?;
    ensure(trainer.step_count() == 100, format!("ran {} steps", trainer.step_count()))?;
    ensure(before == after, format!("checksum changed: {before} -> {after}"))?;
    ensure(f_before == f_after, "image feature changed")?;
    Ok(format!("checksum {}... unchanged after 100 steps", &before[..12.min(before.len())]))
}

fn c7_desk_training() -> Result<String, String> {
    let t = Instant::now();
    let mut all = synth_dataset(500, 0);
    all.materialize().map_err(|e| e.to_string())?;
    let train = all.subset(&(0..400).collect::<Vec<_>>()).map_err(|e| e.to_string())?;
    let val = all.subset(&(400..500).collect::<Vec<_>>()).map_err(|e| e.to_string())?;
    let mut cfg = TrainConfig::default();
    cfg.epochs = 30;
    let trainer = Trainer::new(cfg, false).map_err(|e| e.to_string())?;
    let initial = evaluate_model(trainer.model(), &val).map_err(|e| e.to_string())?.epe_mm;
    let out = trainer.run(&train, None).map_err(|e| e.to_string())?;
    let fin = evaluate_model(&out.model, &val).map_err(|e| e.to_string())?.epe_mm;
    let elapsed = t.elapsed();
    let reduction = 1.0 - fin / initial;
    let detail = format!(
        "held-out EPE {initial:.2} -> {fin:.2} mm ({:.1}% reduction) over {} steps in {:.1} min on {} cores",
        reduction * 100.0,
        out.log.len(),
        elapsed.as_secs_f64() / 60.0,
        std::thread::available_parallelism().map_or(1, |n| n.get())
    );
    ensure(reduction >= 0.5, detail.clone())?;
    ensure(elapsed <= Duration::from_secs(15 * 60), detail.clone())?;
    Ok(detail)
}

fn c8_two_sample_overfit() -> Result<String, String> {
    let mut ds = synth_dataset(2, 8);
    ds.materialize().map_err(|e| e.to_string())?;
    let mut cfg = tiny_config();
    cfg.batch_size = 2;
    cfg.epochs = 500;
    let out = Trainer::new(cfg, false).map_err(|e| e.to_string())?.run(&ds, None).map_err(|e| e.to_string())?;
    let initial = out.log[0].total;
    let hit = out.log.iter().find(|r| r.total < 1e-3 * initial);
    let last = out.log.last().unwrap();
    let supervised = |r: &clipdg::train::LossRecord| r.heat + r.pose;
    let detail = match hit {
        Some(r) => format!(
            "initial total {initial:.4}, below 1e-3 x initial at step {} (total {:.3e}; heatmap+pose {:.4} -> {:.4} at step {})",
            r.step,
            r.total,
            supervised(&out.log[0]),
            supervised(last),
            last.step
        ),
        None => format!("initial total {initial:.4}, final {:.4} after {} steps", last.total, last.step),
    };
    ensure(out.log.len() == 500 && hit.is_some(), detail.clone())?;
    Ok(detail)
}

fn c9_fusion_arithmetic() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let a: Vec<f64> = (0..CLIP_DIM).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let b: Vec<f64> = (0..CLIP_DIM).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let fa = ClipFeature::new(a.clone()).unwrap();
        let fb = ClipFeature::new(b.clone()).unwrap();
        let mut na = 0.0;
        let mut nb = 0.0;
        for i in 0..CLIP_DIM {
            na += a[i] * a[i];
            nb += b[i] * b[i];
        }
        let (na, nb) = (na.sqrt(), nb.sqrt());
        for ratio in [0.6, 0.9] {
            for normalize in [true, false] {
                let got = fuse(&fa, &fb, FusionConfig { image_ratio: ratio, normalize_inputs: normalize }).unwrap();
                for i in 0..CLIP_DIM {
                    let (x, y) = if normalize { (a[i] / na, b[i] / nb) } else { (a[i], b[i]) };
                    let want = ratio * x + (1.0 - ratio) * y;
                    worst = worst.max((got.values()[i] - want).abs());
                }
            }
        }
        let exact = fuse(&fa, &fb, FusionConfig { image_ratio: 1.0, normalize_inputs: false }).unwrap();
        ensure(exact.values() == a.as_slice(), "ratio 1.0 does not return the image feature")?;
    }
    ensure(worst <= 1e-7, format!("max deviation {worst:e}"))?;
    Ok(format!("ratios 0.6/0.9 max deviation {worst:.2e}, ratio 1.0 exact"))
}

fn c10_ranking() -> Result<String, String> {
    let enc = stub_encoder(0);
    let mut gallery = Vec::new();
    let mut images = Vec::new();
    for i in 0..50u64 {
        let p = sample_prompt(1000 + i);
        let s = synth_sample(i, &StyleParams::from_prompt(&p.config)).map_err(|e| e.to_string())?;
        let f = enc.encode_image(&s.image).map_err(|e| e.to_string())?;
        gallery.push(FeatureRecord::new(format!("g{i:02}"), f.values().to_vec(), "gallery").unwrap());
        images.push(s.image);
    }
    let brute = |q: &[f64]| {
        let mut v: Vec<(String, f64)> = gallery
            .iter()
            .map(|r| {
                let dot: f64 = q.iter().zip(&r.feature).map(|(x, y)| x * y).sum();
                let nq = q.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nr = r.feature.iter().map(|x| x * x).sum::<f64>().sqrt();
                (r.sample_id.clone(), dot / (nq * nr))
            })
            .collect();
        v.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
        v
    };
    for k in 0..50 {
        let q = enc.encode_image(&images[k]).unwrap();
        let ranked = rank_by_similarity(&q, &gallery).map_err(|e| e.to_string())?;
        let want = brute(q.values());
        ensure(ranked.len() == 50, "ranking dropped entries")?;
        for (r, (id, score)) in ranked.iter().zip(&want) {
            ensure(&r.sample_id == id, format!("query {k}: order differs at {id}"))?;
            ensure((r.score - score).abs() <= 1e-12, format!("query {k}: score differs at {id}"))?;
        }
        ensure(ranked[0].sample_id == format!("g{k:02}"), format!("query {k}: self not first"))?;
        ensure((ranked[0].score - 1.0).abs() <= 1e-12, format!("query {k}: self score {}", ranked[0].score))?;
    }
    let q = fuse(
        &enc.encode_image(&images[0]).unwrap(),
        &enc.encode_text(&sample_prompt(7).text).unwrap(),
        FusionConfig { image_ratio: 0.5, normalize_inputs: false },
    )
    .unwrap();
    let ranked = rank_by_similarity(&q, &gallery).map_err(|e| e.to_string())?;
    let want = brute(q.values());
    ensure(ranked.iter().map(|r| &r.sample_id).eq(want.iter().map(|w| &w.0)), "image+prompt query order differs")?;
    ensure(cosine(q.values(), q.values()) > 1.0 - 1e-12, "cosine self-similarity")?;
    Ok("50 self-queries and 1 image+prompt query match brute force; self ranks first at 1.0".into())
}

fn c11_epe_fixture() -> Result<String, String> {
    let model = PoseModel::new(ArchConfig::tiny(), 11).map_err(|e| e.to_string())?;
    let src = synth_dataset(3, 11);
    let mut samples = Vec::new();
    for i in 0..3 {
        let mut s = src.get(i).map_err(|e| e.to_string())?;
        let pred = model.predict(&s.image).map_err(|e| e.to_string())?;
        let mut coords = pred.coords;
        match i {
            0 => {}
            // 5 mm on every joint.
            1 => coords.iter_mut().for_each(|c| {
                c[0] += 0.3;
                c[1] -= 0.4;
            }),
            // 12 mm on joint 4 only.
            _ => coords[4][2] += 1.2,
        }
        s.joints3d = Pose3D::new(coords, 10.0);
        samples.push(s);
    }
    let ds = Dataset::from_samples("fixture", samples);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let ck_path = dir.path().join("fixture.ckpt");
    Checkpoint::from_model(&model, clipdg::train::checkpoint::meta_for(&model), None)
        .save(&ck_path)
        .map_err(|e| e.to_string())?;
    let ck = Checkpoint::load(&ck_path).map_err(|e| e.to_string())?;
    let report = clipdg::train::evaluate_epe(&ck, &ds).map_err(|e| e.to_string())?;
    let want = (21.0 * 5.0 + 12.0) / 63.0;
    ensure((report.epe_mm - want).abs() <= 1e-6, format!("EPE {} vs hand-computed {want}", report.epe_mm))?;
    for j in 0..NUM_JOINTS {
        let wj = if j == 4 { 17.0 / 3.0 } else { 5.0 / 3.0 };
        ensure(
            (report.per_joint_epe[j] - wj).abs() <= 1e-6,
            format!("joint {j}: {} vs {wj}", report.per_joint_epe[j]),
        )?;
    }

    let gt = Pose3D::new(std::array::from_fn(|j| [j as f64 * 0.25, -(j as f64) * 0.5, 1.0]), 40.0);
    let mut shifted = gt.coords;
    shifted.iter_mut().for_each(|c| c[1] += 0.125);
    let errs = sample_errors(&Pose3D::new(shifted, 1.0), &gt).map_err(|e| e.to_string())?;
    let r = report_from_errors(&[errs, errs, errs]).map_err(|e| e.to_string())?;
    ensure(r.epe_mm == 5.0, format!("constant 5 mm offset gave {}", r.epe_mm))?;
    Ok(format!("fixture EPE {:.9} mm (hand-computed {want:.9}), constant offset {} mm", report.epe_mm, r.epe_mm))
}

fn c12_determinism() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg_path = dir.path().join("det.toml");
    std::fs::write(
        &cfg_path,
        "seed = 12\nepochs = 2\nbatch_size = 4\nlearning_rate = 1e-3\n\n[arch]\nstem_channels = 4\nfeature_channels = 6\n\
         refine_channels = 4\nrefine_stages = 2\nprior_channels = 4\nprior_hidden = 16\nbranch2_channels = 4\n\n\
         [data]\nsynth_count = 20\nval_count = 4\n",
    )
    .map_err(|e| e.to_string())?;
    let run = |name: &str| -> Result<Vec<u8>, String> {
        let out_dir = dir.path().join(name);
        let st = Command::new(bin())
            .arg("train")
            .arg("--config")
            .arg(&cfg_path)
            .arg("--out")
            .arg(&out_dir)
            .env("RUST_LOG", "warn")
            .stdout(Stdio::null())
            .status()
            .map_err(|e| e.to_string())?;
        ensure(st.success(), format!("train run {name} failed"))?;
        std::fs::read(out_dir.join(LOG_FILE)).map_err(|e| e.to_string())
    };
    let a = run("a")?;
    let b = run("b")?;
    let rows = read_log(&dir.path().join("a").join(LOG_FILE)).map_err(|e| e.to_string())?;
    ensure(!rows.is_empty(), "empty loss log")?;
    ensure(a == b, "loss CSVs differ")?;
    Ok(format!("two runs wrote identical {}-row loss CSVs ({} bytes)", rows.len(), a.len()))
}

fn main() {
    let checks: [(u32, &str, Check); 12] = [
        (1, "prompt-space cardinality", c1_prompt_count),
        (2, "contrastive-loss analytics", c2_contrastive_analytics),
        (3, "negative-mining oracle", c3_mining_oracle),
        (4, "gradient correctness", c4_gradient_check),
        (5, "branch isolation", c5_branch_isolation),
        (6, "frozen encoder", c6_frozen_encoder),
        (7, "desk-scale training efficacy", c7_desk_training),
        (8, "two-sample overfit", c8_two_sample_overfit),
        (9, "fusion arithmetic", c9_fusion_arithmetic),
        (10, "similarity ranking", c10_ranking),
        (11, "EPE metric fixture", c11_epe_fixture),
        (12, "training determinism", c12_determinism),
    ];
    let only: Option<HashSet<u32>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    // Cargo's `--list` probe expects no work to be done.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (id, name, check) in checks {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let t = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = t.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {id:>2} PASS  {name} [{secs:.1}s]: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {id:>2} FAIL  {name} [{secs:.1}s]: {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
