//! Acceptance criteria 1 to 8. Runs as a plain binary so that every
//! criterion reports a PASS/FAIL line even when earlier ones fail.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use crowdage::checkpoint::Checkpoint;
use crowdage::commands::{cmd_train, METRICS_FILE};
use crowdage::config::{DatasetRef, RunConfig};
use crowdage::dataset::save_dataset;
use crowdage_core::age_estimator::{softmax, AgeDistribution, Gender, NUM_AGES};
use crowdage_core::detector::{detection_loss, encode_boxes, heatmap_logit_grad, DetectorOutput};
use crowdage_core::geometry::{expand_with_margins, iou, roi_affine_sample};
use crowdage_core::losses::{
    age_single_loss, age_single_loss_logits, masked_age_loss, masked_gender_loss,
    BatchAgeSupervision, ImageSupervision, LossWeights, SlotPrediction,
};
use crowdage_core::model::{Model, ModelConfig, Preset};
use crowdage_core::nn::{ParamGroup, Tape};
use crowdage_core::pipeline::{
    evaluate, objective_with_regions, EvalConfig, LrSchedule, ObjectiveTerms, TrainConfig,
    TrainData, TrainMode, Trainer,
};
use crowdage_core::synth::{
    generate_dataset, generate_scene, DatasetManifest, FaceAnnotation, SceneParams,
};
use crowdage_core::{BBox, Detection, Tensor3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

const SCENE_SIDE: usize = 192;
const SINGLE_SCALE: (f32, f32) = (0.35, 0.6);
const MULTI_SCALE: (f32, f32) = (0.18, 0.3);
const LR: f64 = 1e-3;
const BATCH: usize = 8;

/// Relative error with a floor on the denominator for near-zero gradients.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-5)
}

fn bx(x1: f32, y1: f32, x2: f32, y2: f32) -> BBox {
    BBox::new(x1, y1, x2, y2).unwrap()
}

// ---------------------------------------------------------------- criterion 1

fn ref_iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x2.min(b.x2) as f64 - a.x1.max(b.x1) as f64).max(0.0);
    let iy = (a.y2.min(b.y2) as f64 - a.y1.max(b.y1) as f64).max(0.0);
    let area = |r: &BBox| (r.x2 - r.x1) as f64 * (r.y2 - r.y1) as f64;
    ix * iy / (area(a) + area(b) - ix * iy)
}

fn ref_probs(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn ref_age_single(z: &[f64], y: u8, w: &LossWeights) -> f64 {
    let p = ref_probs(z);
    let m: f64 = (0..NUM_AGES).map(|i| i as f64 * p[i]).sum();
    let var: f64 = (0..NUM_AGES).map(|i| p[i] * (i as f64 - m).powi(2)).sum();
    w.lambda_mean * (m - y as f64).powi(2) / 2.0 + w.lambda_var * var
        - w.lambda_ce * p[y as usize].max(1e-12).ln()
}

fn ref_bce(z: &[f64], g: Gender) -> f64 {
    let p_male = ref_probs(z)[1];
    match g {
        Gender::Male => -p_male.max(1e-12).ln(),
        Gender::Female => -(1.0 - p_male).max(1e-12).ln(),
    }
}

fn reference_losses(sup: &BatchAgeSupervision<f64>, w: &LossWeights) -> (f64, f64) {
    let (mut sa, mut na, mut sg, mut ng) = (0.0, 0, 0.0, 0);
    for img in &sup.images {
        for slot in &img.slots {
            let mut best: Option<(usize, f64)> = None;
            for (j, f) in img.faces.iter().enumerate() {
                let v = ref_iou(&slot.detection.bbox, &f.bbox);
                if best.is_none() || v > best.unwrap().1 {
                    best = Some((j, v));
                }
            }
            let Some((j, v)) = best else { continue };
            let b_iou = v > w.th_iou;
            if let (true, Some(a)) = (b_iou, img.faces[j].age) {
                sa += ref_age_single(&slot.age_logits, a, w);
                na += 1;
            }
            if let (true, Some(g)) = (b_iou, img.faces[j].gender) {
                sg += ref_bce(&slot.gender_logits, g);
                ng += 1;
            }
        }
    }
    let la = if na == 0 { 0.0 } else { sa / na as f64 };
    let lg = if ng == 0 {
        0.0
    } else {
        w.lambda_gen * sg / ng as f64
    };
    (la, lg)
}

fn random_box<R: Rng>(rng: &mut R) -> BBox {
    let (x, y) = (
        rng.random_range(0..60) as f32,
        rng.random_range(0..60) as f32,
    );
    let (w, h) = (
        rng.random_range(4..30) as f32,
        rng.random_range(4..30) as f32,
    );
    bx(x, y, x + w, y + h)
}

fn random_batch<R: Rng>(rng: &mut R, box_only: bool) -> BatchAgeSupervision<f64> {
    let b = rng.random_range(1..=2);
    let images = (0..b)
        .map(|_| {
            let faces: Vec<FaceAnnotation> = (0..rng.random_range(0..=3))
                .map(|_| FaceAnnotation {
                    bbox: random_box(rng),
                    age: (!box_only && rng.random_bool(0.7)).then(|| rng.random_range(0..=100)),
                    gender: (!box_only && rng.random_bool(0.7)).then(|| {
                        if rng.random_bool(0.5) {
                            Gender::Male
                        } else {
                            Gender::Female
                        }
                    }),
                })
                .collect();
            let slots = (0..rng.random_range(1..=3))
                .map(|_| {
                    // Mostly jittered ground truth so that the IOU boolean takes both values.
                    let bbox = match faces.get(rng.random_range(0..faces.len() + 1)) {
                        Some(f) => {
                            let d = |r: &mut R| r.random_range(-3.0f32..3.0);
                            let (a, b, c, e) = (d(rng), d(rng), d(rng), d(rng));
                            let (x1, y1) = (f.bbox.x1 + a, f.bbox.y1 + b);
                            bx(
                                x1,
                                y1,
                                (f.bbox.x2 + c).max(x1 + 1.0),
                                (f.bbox.y2 + e).max(y1 + 1.0),
                            )
                        }
                        None => random_box(rng),
                    };
                    SlotPrediction {
                        detection: Detection {
                            bbox,
                            confidence: 0.5,
                        },
                        age_logits: (0..NUM_AGES).map(|_| rng.random_range(-4.0..4.0)).collect(),
                        gender_logits: (0..2).map(|_| rng.random_range(-4.0..4.0)).collect(),
                    }
                })
                .collect();
            ImageSupervision { faces, slots }
        })
        .collect();
    BatchAgeSupervision { images }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let w = LossWeights::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    let (mut all_masked, mut det_only) = (0, 0);
    for i in 0..100 {
        let sup = random_batch(&mut rng, i % 10 == 0);
        let (ra, rg) = reference_losses(&sup, &w);
        let a = masked_age_loss(&sup, &w);
        let g = masked_gender_loss(&sup, &w);
        worst = worst.max((a.value - ra).abs()).max((g.value - rg).abs());
        if a.count == 0 && g.count == 0 {
            all_masked += 1;
        }
        if i % 10 == 0 {
            det_only += 1;
        }
    }
    let elapsed = start.elapsed();
    ensure!(worst <= 1e-6, "max deviation {worst:e} > 1e-6");
    ensure!(
        all_masked > 0 && det_only > 0,
        "no all-masked batch was generated"
    );
    ensure!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    Ok(format!(
        "100 batches, max |batched - reference| = {worst:.1e} (<= 1e-6), {all_masked} all-masked, {det_only} detection-only"
    ))
}

// ---------------------------------------------------------------- criterion 2

fn check_age_single() -> Result<f64, String> {
    let w = LossWeights::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for y in [0u8, 17, 50, 100] {
        let z: Vec<f64> = (0..NUM_AGES).map(|_| rng.random_range(-2.0..2.0)).collect();
        let (_, g) = age_single_loss_logits(&z, y, &w);
        let f = |z: &[f64]| age_single_loss(&AgeDistribution::from_logits(z), y, &w);
        for i in 0..NUM_AGES {
            let h = 1e-6;
            let (mut zp, mut zm) = (z.clone(), z.clone());
            zp[i] += h;
            zm[i] -= h;
            worst = worst.max(rel_err((f(&zp) - f(&zm)) / (2.0 * h), g[i]));
        }
    }
    Ok(worst)
}

fn check_detection_loss() -> Result<f64, String> {
    let w = LossWeights::default();
    let targets = encode_boxes(&[bx(1.0, 2.0, 11.0, 13.0)], 16, 16);
    ensure!(
        (targets.grid_h, targets.grid_w) == (4, 4),
        "toy map is not 4x4"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let logits: Vec<f64> = (0..16).map(|_| rng.random_range(-3.0..1.0)).collect();
    let size: Vec<f64> = (0..32).map(|_| rng.random_range(0.0..15.0)).collect();
    let offset: Vec<f64> = (0..32).map(|_| rng.random_range(0.0..1.0)).collect();
    let loss = |l: &[f64], s: &[f64], o: &[f64]| {
        detection_loss(
            &DetectorOutput::from_logits(4, 4, l, s.to_vec(), o.to_vec()),
            &targets,
            &w,
        )
    };
    let base = loss(&logits, &size, &offset);
    let out = DetectorOutput::from_logits(4, 4, &logits, size.clone(), offset.clone());
    let d_logits = heatmap_logit_grad(&out.heatmap, &base.d_heatmap);
    let h = 1e-6;
    let mut worst = 0.0f64;
    for i in 0..16 {
        let (mut p, mut m) = (logits.clone(), logits.clone());
        p[i] += h;
        m[i] -= h;
        let num = (loss(&p, &size, &offset).total - loss(&m, &size, &offset).total) / (2.0 * h);
        worst = worst.max(rel_err(num, d_logits[i]));
    }
    for i in 0..32 {
        let (mut p, mut m) = (size.clone(), size.clone());
        p[i] += h;
        m[i] -= h;
        let num = (loss(&logits, &p, &offset).total - loss(&logits, &m, &offset).total) / (2.0 * h);
        worst = worst.max(rel_err(num, base.d_size[i]));
        let (mut p, mut m) = (offset.clone(), offset.clone());
        p[i] += h;
        m[i] -= h;
        let num = (loss(&logits, &size, &p).total - loss(&logits, &size, &m).total) / (2.0 * h);
        worst = worst.max(rel_err(num, base.d_offset[i]));
    }
    Ok(worst)
}

/// Full `L` on the desk model. Regions are held at their decoded values
/// since gradients are stopped at region coordinates.
fn check_full_objective() -> Result<(f64, usize), String> {
    let model: Model<f64> =
        Model::build(&ModelConfig::preset(Preset::Desk, true), 11).map_err(|e| e.to_string())?;
    let scenes = vec![
        generate_scene(5, 2, 96, (0.3, 0.4)).unwrap(),
        generate_scene(6, 1, 128, (0.35, 0.5)).unwrap(),
    ];
    let w = LossWeights::default();
    let terms = ObjectiveTerms {
        det: true,
        age: true,
        gender: true,
    };
    let run = |m: &Model<f64>, regions: Option<&[Vec<Detection>]>| {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        objective_with_regions(m, &scenes, regions, 3, None, terms, &w, &mut rng).unwrap()
    };
    // Regions near each face plus one that matches nothing.
    let regions: Vec<Vec<Detection>> = scenes
        .iter()
        .map(|s| {
            let mut r: Vec<Detection> = s
                .faces
                .iter()
                .map(|f| Detection {
                    bbox: f.bbox.transform(1.0, 1.0, 1.5, -1.0),
                    confidence: 0.5,
                })
                .collect();
            r.push(Detection {
                bbox: bx(0.0, 0.0, 8.0, 8.0),
                confidence: 0.1,
            });
            r
        })
        .collect();
    let base = run(&model, Some(&regions));
    ensure!(
        base.losses.n_age == 3 && base.losses.n_gender == 3,
        "unexpected supervised slot count"
    );
    let h = 1e-6;
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut groups = [false; 2];
    for id in model.store.ids() {
        let n = model.store.get(id).data.len();
        let mut idx = vec![0, n / 2, n - 1];
        idx.dedup();
        for i in idx {
            let a = base.grads.get(id)[i];
            let mut plus = model.clone();
            plus.store.get_mut(id).data[i] += h;
            let mut minus = model.clone();
            minus.store.get_mut(id).data[i] -= h;
            let fp = run(&plus, Some(&regions)).losses.objective;
            let fm = run(&minus, Some(&regions)).losses.objective;
            let num = (fp - fm) / (2.0 * h);
            let e = rel_err(num, a);
            if e > 1e-3 {
                return Err(format!(
                    "{}[{i}]: analytic {a:e} vs numeric {num:e}",
                    model.store.get(id).name
                ));
            }
            worst = worst.max(e);
            checked += 1;
            if a != 0.0 {
                groups[(model.store.get(id).group == ParamGroup::Age) as usize] = true;
            }
        }
    }
    ensure!(
        groups == [true, true],
        "no nonzero gradient in one parameter group"
    );
    Ok((worst, checked))
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let a = check_age_single()?;
    let d = check_detection_loss()?;
    let (l, n) = check_full_objective()?;
    let elapsed = start.elapsed();
    ensure!(a < 1e-3, "age_single_loss relative error {a:e}");
    ensure!(d < 1e-3, "detection_loss relative error {d:e}");
    ensure!(l < 1e-3, "full L relative error {l:e}");
    ensure!(elapsed < Duration::from_secs(300), "took {elapsed:?}");
    Ok(format!(
        "max relative error: age_single {a:.1e}, detection {d:.1e}, full L {l:.1e} over {n} parameters (< 1e-3), {:.1}s",
        elapsed.as_secs_f64()
    ))
}

// ---------------------------------------------------------------- criterion 3

fn outside_gradients(connection: bool) -> Result<(usize, usize), String> {
    let side = SCENE_SIDE;
    let scene = generate_scene(21, 1, side, SINGLE_SCALE).unwrap();
    let model: Model<f64> = Model::build(&ModelConfig::preset(Preset::Desk, connection), 5)
        .map_err(|e| e.to_string())?;
    let img: Tensor3<f64> = scene.image.cast();
    let mut tape = Tape::new(&model.store, false, None);
    let pass = model
        .detect(&mut tape, &img, true)
        .map_err(|e| e.to_string())?;
    let bbox = scene.faces[0].bbox;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let vars = model
        .estimate(&mut tape, pass.image, pass.vars.branch, &bbox, &mut rng)
        .map_err(|e| e.to_string())?;
    let p = softmax(&tape.value(vars.age_logits).data);
    let m: f64 = p.iter().enumerate().map(|(i, v)| i as f64 * v).sum();
    let seed: Vec<f64> = p
        .iter()
        .enumerate()
        .map(|(i, v)| v * (i as f64 - m))
        .collect();
    let mut grads = model.store.zeros_like();
    let leaves = tape.backward(&[(vars.age_logits, &seed)], &mut grads);
    let g = leaves.get(pass.image).ok_or("no image gradient")?;
    let (x0, y0, x1, y1) = model
        .crop_region(&bbox, side, side)
        .pixel_span(side, side)
        .unwrap();
    let (mut outside, mut nonzero) = (0, 0);
    for c in 0..3 {
        for y in 0..side {
            for x in 0..side {
                if x >= x0 && x < x1 && y >= y0 && y < y1 {
                    continue;
                }
                outside += 1;
                if g[(c * side + y) * side + x] != 0.0 {
                    nonzero += 1;
                }
            }
        }
    }
    Ok((outside, nonzero))
}

fn criterion_3() -> Outcome {
    let (outside, off) = outside_gradients(false)?;
    let (_, on) = outside_gradients(true)?;
    ensure!(
        off == 0,
        "connection disabled: {off} outside pixels have nonzero gradient"
    );
    ensure!(
        on > 0,
        "connection enabled: every outside pixel has zero gradient"
    );
    Ok(format!(
        "disabled: 0 of {outside} outside-crop gradients nonzero; enabled: {on} nonzero"
    ))
}

// ---------------------------------------------------------------- criterion 4

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..1000 {
        let mut r = || {
            let (x, y) = (rng.random_range(0..20i32), rng.random_range(0..20i32));
            (
                x,
                y,
                x + rng.random_range(1..12),
                y + rng.random_range(1..12),
            )
        };
        let (a, b) = (r(), r());
        let mut inter = 0;
        let mut union = 0;
        for y in 0..40 {
            for x in 0..40 {
                let ia = x >= a.0 && x < a.2 && y >= a.1 && y < a.3;
                let ib = x >= b.0 && x < b.2 && y >= b.1 && y < b.3;
                inter += (ia && ib) as i32;
                union += (ia || ib) as i32;
            }
        }
        let want = (inter as f64 / union as f64) as f32;
        let to = |t: (i32, i32, i32, i32)| bx(t.0 as f32, t.1 as f32, t.2 as f32, t.3 as f32);
        let got = iou(&to(a), &to(b));
        ensure!(got == want, "iou {a:?} {b:?}: {got} vs cell count {want}");
    }
    let m = expand_with_margins(&bx(100.0, 100.0, 200.0, 200.0), 0.2, 0.1, 1000.0, 1000.0);
    ensure!(
        m == bx(90.0, 80.0, 210.0, 210.0),
        "margin example gave {m:?}"
    );

    // f(x, y) = a + b x + c y + d x y is reproduced exactly by bilinear
    // interpolation, so samples must equal f at the sample centers.
    let (fh, fw) = (24usize, 30usize);
    let f = |x: f64, y: f64| 0.3 + 0.7 * x - 0.2 * y + 0.05 * x * y;
    let mut feat = Tensor3::<f64>::zeros(1, fh, fw);
    for y in 0..fh {
        for x in 0..fw {
            feat.set(0, y, x, f(x as f64, y as f64));
        }
    }
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let x1 = rng.random_range(1.0f32..12.0);
        let y1 = rng.random_range(1.0f32..8.0);
        let region = bx(
            x1,
            y1,
            x1 + rng.random_range(4.0f32..15.0),
            y1 + rng.random_range(4.0f32..14.0),
        );
        for (oh, ow) in [(14, 10), (5, 4)] {
            let out = roi_affine_sample(&feat, &region, oh, ow);
            let sx = (region.x2 as f64 - region.x1 as f64) / ow as f64;
            let sy = (region.y2 as f64 - region.y1 as f64) / oh as f64;
            for j in 0..oh {
                for i in 0..ow {
                    let u = region.x1 as f64 + (i as f64 + 0.5) * sx - 0.5;
                    let v = region.y1 as f64 + (j as f64 + 0.5) * sy - 0.5;
                    worst = worst.max((out.get(0, j, i) - f(u, v)).abs());
                }
            }
        }
    }
    ensure!(worst <= 1e-6, "ROI sample deviates by {worst:e}");
    Ok(format!(
        "1000 IOU pairs exact, margin (90,80,210,210) exact, ROI max deviation {worst:.1e} (<= 1e-6)"
    ))
}

// ---------------------------------------------------------------- criteria 5, 6

struct OverfitRun {
    model: Model<f32>,
    train: DatasetManifest,
    mae: f64,
}

fn single_face_set(name: &str, seed: u64, n: usize) -> DatasetManifest {
    let p = SceneParams {
        n_faces: 1,
        image_side: SCENE_SIDE,
        face_scale: SINGLE_SCALE,
    };
    generate_dataset(name, seed, n, &p).unwrap()
}

fn four_face_set(seed: u64, n: usize) -> DatasetManifest {
    let p = SceneParams {
        n_faces: 4,
        image_side: SCENE_SIDE,
        face_scale: MULTI_SCALE,
    };
    generate_dataset("four", seed, n, &p).unwrap()
}

fn train_config(mode: TrainMode, epochs: usize, tiling: bool) -> TrainConfig {
    TrainConfig {
        mode,
        epochs,
        tiling,
        batch_size: BATCH,
        lr: LrSchedule {
            initial: LR,
            milestones: vec![epochs * 3 / 4],
            gamma: 0.1,
        },
        ..Default::default()
    }
}

fn train(model: Model<f32>, cfg: TrainConfig, data: TrainData<'_>) -> Result<Model<f32>, String> {
    let mut t = Trainer::new(model, cfg).map_err(|e| e.to_string())?;
    while !t.is_finished() {
        t.train_epoch(&data).map_err(|e| e.to_string())?;
    }
    Ok(t.model)
}

/// Detector weights trained on box-only single-face scenes, disjoint from
/// the overfit set.
fn pretrained_detector() -> Result<Model<f32>, String> {
    let pool = single_face_set("pretrain", 10_000, 256);
    let pool = DatasetManifest::new(
        "pretrain",
        pool.scenes
            .into_iter()
            .map(|s| s.without_labels())
            .collect(),
    );
    let model =
        Model::build(&ModelConfig::preset(Preset::Desk, true), 1).map_err(|e| e.to_string())?;
    let mut cfg = train_config(TrainMode::EndToEnd, 20, false);
    cfg.lr.milestones.clear();
    train(
        model,
        cfg,
        TrainData {
            labelled: &[pool],
            detection_only: None,
        },
    )
}

const OVERFIT_EPOCHS: usize = 100;

fn criterion_5(ctx: &mut Context) -> Outcome {
    let start = Instant::now();
    let detector = pretrained_detector()?;
    let train_set = single_face_set("single", 1, 64);
    let model = train(
        detector,
        train_config(TrainMode::FrozenDetector, OVERFIT_EPOCHS, false),
        TrainData {
            labelled: std::slice::from_ref(&train_set),
            detection_only: None,
        },
    )?;
    let report = evaluate(
        &model,
        &train_set.scenes,
        &EvalConfig {
            single_face: true,
            ..Default::default()
        },
    )
    .map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let mae = report.mae;
    let recall = report.detection.recall;
    ctx.overfit = Some(OverfitRun {
        model,
        train: train_set,
        mae,
    });
    ensure!(OVERFIT_EPOCHS <= 200, "epoch budget exceeded");
    ensure!(mae < 3.0, "training MAE {mae:.3} >= 3.0");
    ensure!(recall >= 0.9, "recall {recall:.3} < 0.9");
    ensure!(elapsed < Duration::from_secs(1800), "took {elapsed:?}");
    Ok(format!(
        "64 scenes, {OVERFIT_EPOCHS} frozen epochs: MAE {mae:.3} (< 3.0), recall {recall:.3} (>= 0.9), {:.0}s",
        elapsed.as_secs_f64()
    ))
}

const TRANSFER_EPOCHS: usize = 40;

fn criterion_6(ctx: &Context) -> Outcome {
    let start = Instant::now();
    let base = ctx.overfit.as_ref().ok_or("needs the criterion 5 model")?;
    let multi: Vec<_> = (0..128u64)
        .map(|i| {
            generate_scene(20_000 + i, 2 + (i % 3) as usize, SCENE_SIDE, MULTI_SCALE)
                .unwrap()
                .without_labels()
        })
        .collect();
    let multi = DatasetManifest::new("multi", multi);
    let held_out = four_face_set(5000, 32);
    let labelled = std::slice::from_ref(&base.train);
    let mut results = Vec::new();
    for tiling in [false, true] {
        let data = TrainData {
            labelled,
            detection_only: tiling.then_some(&multi),
        };
        let model = train(
            base.model.clone(),
            train_config(TrainMode::EndToEnd, TRANSFER_EPOCHS, tiling),
            data,
        )?;
        let r = evaluate(&model, &held_out.scenes, &EvalConfig::default())
            .map_err(|e| e.to_string())?;
        results.push(r);
    }
    let (plain, tiled) = (&results[0], &results[1]);
    let gap = tiled.detection.recall - plain.detection.recall;
    let summary = format!(
        "tiling: recall {:.3}, MAE {:.3} (single-face {:.3}); no tiling: recall {:.3}; gap {:.1} pp, {:.0}s",
        tiled.detection.recall,
        tiled.mae,
        base.mae,
        plain.detection.recall,
        100.0 * gap,
        start.elapsed().as_secs_f64()
    );
    ensure!(tiled.detection.recall >= 0.9, "{summary}: recall below 0.9");
    ensure!(
        tiled.mae <= base.mae + 2.0,
        "{summary}: MAE more than 2 years above single-face"
    );
    ensure!(gap >= 0.05, "{summary}: recall gap below 5 pp");
    Ok(summary)
}

// ---------------------------------------------------------------- criterion 7

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let w = LossWeights::default();

    // Frozen-mode epoch.
    let model =
        Model::build(&ModelConfig::preset(Preset::Desk, true), 3).map_err(|e| e.to_string())?;
    let before = model.store.clone();
    let set = single_face_set("frozen", 300, 16);
    let mut cfg = train_config(TrainMode::FrozenDetector, 1, false);
    cfg.lr.initial = 1e-2;
    cfg.batch_size = 4;
    cfg.weights.th_iou = 0.0;
    let after = train(
        model,
        cfg,
        TrainData {
            labelled: std::slice::from_ref(&set),
            detection_only: None,
        },
    )?;
    let mut age_changed = false;
    for (a, b) in before.iter().zip(after.store.iter()) {
        let same = a
            .data
            .iter()
            .zip(&b.data)
            .all(|(x, y)| x.to_bits() == y.to_bits());
        if a.group == ParamGroup::Detector {
            ensure!(same, "detector parameter {} changed in frozen mode", a.name);
        } else {
            age_changed |= !same;
        }
    }
    ensure!(age_changed, "frozen epoch did not train the age network");

    // Masked slots: no gradient entry, and moving their logits changes nothing.
    let mut masked_seen = 0;
    for _ in 0..50 {
        let sup = random_batch(&mut rng, false);
        let loss = masked_age_loss(&sup, &w);
        let mut moved = sup.clone();
        for (img, g) in moved.images.iter_mut().zip(&loss.slot_grads) {
            for (slot, sg) in img.slots.iter_mut().zip(g) {
                if sg.is_none() {
                    masked_seen += 1;
                    slot.age_logits.iter_mut().for_each(|v| *v = -*v + 1.0);
                }
            }
        }
        ensure!(
            masked_age_loss(&moved, &w).value == loss.value,
            "a masked slot influenced L_age"
        );
    }
    // Box-only scenes through the full model: every age parameter gradient is zero.
    let model64: Model<f64> =
        Model::build(&ModelConfig::preset(Preset::Desk, true), 3).map_err(|e| e.to_string())?;
    let box_only: Vec<_> = (0..2)
        .map(|s| {
            generate_scene(40 + s, 2, 96, (0.3, 0.4))
                .unwrap()
                .without_labels()
        })
        .collect();
    let terms = ObjectiveTerms {
        det: false,
        age: true,
        gender: true,
    };
    let out = objective_with_regions(&model64, &box_only, None, 3, None, terms, &w, &mut rng)
        .map_err(|e| e.to_string())?;
    ensure!(
        out.grads.data.iter().all(|g| g.iter().all(|&v| v == 0.0)),
        "masked slots produced a parameter gradient"
    );

    // K padding.
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let sup = random_batch(&mut rng, false);
        let base = masked_age_loss(&sup, &w).value;
        let mut padded = sup.clone();
        for img in padded.images.iter_mut() {
            for _ in 0..2 {
                img.slots.push(SlotPrediction {
                    detection: Detection {
                        bbox: bx(300.0, 300.0, 320.0, 320.0),
                        confidence: 0.01,
                    },
                    age_logits: (0..NUM_AGES).map(|_| rng.random_range(-4.0..4.0)).collect(),
                    gender_logits: vec![0.0, 0.0],
                });
            }
        }
        worst = worst.max((masked_age_loss(&padded, &w).value - base).abs());
    }
    ensure!(worst <= 1e-7, "K padding changed L_age by {worst:e}");
    Ok(format!(
        "frozen detector bit-identical; {masked_seen} masked slots inert; K-padding max change {worst:.1e} (<= 1e-7)"
    ))
}

// ---------------------------------------------------------------- criterion 8

fn small_run_config(root: &Path) -> RunConfig {
    let labelled = single_face_set("det-single", 900, 12);
    let multi = four_face_set(901, 6);
    let mut det_only = four_face_set(902, 6);
    det_only
        .scenes
        .iter_mut()
        .for_each(|s| *s = s.clone().without_labels());
    save_dataset(&labelled, &root.join("single")).unwrap();
    save_dataset(&det_only, &root.join("multi")).unwrap();
    save_dataset(&multi, &root.join("val")).unwrap();
    let mut train = train_config(TrainMode::EndToEnd, 2, true);
    train.batch_size = 3;
    train.steps_per_epoch = Some(2);
    train.augment = crowdage_core::augment::AugmentToggles::all();
    train.seed = 99;
    RunConfig {
        preset: Preset::Desk,
        output_dir: None,
        datasets: vec![DatasetRef {
            path: root.join("single"),
            weight: None,
        }],
        detection_only: Some(root.join("multi")),
        validation: Some(root.join("val")),
        validation_single_face: false,
        init_checkpoint: None,
        checkpoint_every: 1,
        train,
    }
}

fn criterion_8(ctx: &Context) -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = small_run_config(dir.path());
    let a = cmd_train(&cfg, &dir.path().join("run-a"), false, None).map_err(|e| e.to_string())?;
    let b = cmd_train(&cfg, &dir.path().join("run-b"), false, None).map_err(|e| e.to_string())?;
    let log_a =
        std::fs::read(dir.path().join("run-a").join(METRICS_FILE)).map_err(|e| e.to_string())?;
    let log_b =
        std::fs::read(dir.path().join("run-b").join(METRICS_FILE)).map_err(|e| e.to_string())?;
    ensure!(!log_a.is_empty() && log_a == log_b, "metric logs differ");
    let ck_a = std::fs::read(&a.last_checkpoint).map_err(|e| e.to_string())?;
    let ck_b = std::fs::read(&b.last_checkpoint).map_err(|e| e.to_string())?;
    ensure!(ck_a == ck_b, "final checkpoints differ");

    let model = match &ctx.overfit {
        Some(run) => run.model.clone(),
        None => {
            Model::build(&ModelConfig::preset(Preset::Desk, true), 8).map_err(|e| e.to_string())?
        }
    };
    let path = dir.path().join("model.ckpt");
    Checkpoint::new(model.clone())
        .save(&path)
        .map_err(|e| e.to_string())?;
    let loaded = Checkpoint::load(&path).map_err(|e| e.to_string())?.model;
    let scenes = four_face_set(5000, 8).scenes;
    let cfg = EvalConfig::default();
    let (r1, r2) = (
        evaluate(&model, &scenes, &cfg).map_err(|e| e.to_string())?,
        evaluate(&loaded, &scenes, &cfg).map_err(|e| e.to_string())?,
    );
    ensure!(r1 == r2, "evaluation after reload differs");
    for s in &scenes {
        let p1 = model.predict_topk(&s.image, 20).unwrap();
        let p2 = loaded.predict_topk(&s.image, 20).unwrap();
        let bits = |p: &[crowdage_core::model::FacePrediction]| -> Vec<u32> {
            p.iter()
                .flat_map(|f| {
                    [
                        f.bbox.x1,
                        f.bbox.y1,
                        f.bbox.x2,
                        f.bbox.y2,
                        f.confidence,
                        f.age,
                        f.gender_confidence,
                    ]
                })
                .map(f32::to_bits)
                .collect()
        };
        ensure!(bits(&p1) == bits(&p2), "predictions after reload differ");
    }
    Ok(format!(
        "two runs: identical {}-byte metric logs and checkpoints; reload: bit-identical predictions and report",
        log_a.len()
    ))
}

// ---------------------------------------------------------------- harness

#[derive(Default)]
struct Context {
    overfit: Option<OverfitRun>,
}

fn run(n: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let secs = start.elapsed().as_secs_f64();
    match outcome {
        Ok(detail) => {
            println!("criterion {n} [{name}]: PASS ({secs:.1}s) {detail}");
            true
        }
        Err(detail) => {
            println!("criterion {n} [{name}]: FAIL ({secs:.1}s) {detail}");
            false
        }
    }
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return ExitCode::SUCCESS;
    }
    // Positional arguments act as name filters, as with the default harness.
    let filters: Vec<&String> = args.iter().filter(|a| !a.starts_with('-')).collect();
    if !filters.is_empty() && !filters.iter().any(|f| "acceptance".contains(f.as_str())) {
        return ExitCode::SUCCESS;
    }
    let mut ctx = Context::default();
    let mut ok = true;
    ok &= run(1, "loss oracle equivalence", criterion_1);
    ok &= run(2, "gradient checks", criterion_2);
    ok &= run(3, "surroundings sensitivity", criterion_3);
    ok &= run(4, "geometry oracles", criterion_4);
    ok &= run(5, "synthetic overfit", || criterion_5(&mut ctx));
    ok &= run(6, "multi-person transfer", || criterion_6(&ctx));
    ok &= run(7, "masking and freezing", criterion_7);
    ok &= run(8, "determinism and persistence", || criterion_8(&ctx));
    if ok {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: FAILED");
        ExitCode::FAILURE
    }
}
