//! Training regimes, the learning-rate schedule and the evaluation
//! protocol.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::age_estimator::{to_age_group, AgeGroup, NUM_AGES};
use crate::augment::{
    default_augment, draw_detection_only, sample_tiled_scene, AugmentToggles, TilingConfig,
};
use crate::detector::{detection_loss, encode_targets, heatmap_logit_grad};
use crate::error::{Error, Result};
use crate::geometry::{iou, match_predictions, BBox, Detection};
use crate::losses::{
    masked_age_loss, masked_gender_loss, BatchAgeSupervision, ImageSupervision, LossWeights,
    SlotPrediction,
};
use crate::model::{FacePrediction, Model};
use crate::nn::{Adam, AdamState, Grads, ParamGroup, Tape, Var};
use crate::synth::{DatasetManifest, Scene, WeightedSampler};
use crate::tensor::{Real, Tensor3};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Detector parameters fixed; the objective is `L_age + L_gen`.
    FrozenDetector,
    /// Every parameter trained under `L_det + L_age + L_gen`.
    EndToEnd,
}

impl TrainMode {
    pub fn frozen_group(self) -> Option<ParamGroup> {
        match self {
            Self::FrozenDetector => Some(ParamGroup::Detector),
            Self::EndToEnd => None,
        }
    }
}

/// Step decay: `initial * gamma^(number of milestones <= epoch)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrSchedule {
    pub initial: f64,
    pub milestones: Vec<usize>,
    pub gamma: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            initial: 1e-4,
            milestones: vec![30, 40],
            gamma: 0.1,
        }
    }
}

impl LrSchedule {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| m <= epoch).count();
        self.initial * libm::pow(self.gamma, passed as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    /// Regions cropped per training image; 9 with tiling, else 1, when
    /// unset.
    pub k_train: Option<usize>,
    pub k_eval: usize,
    pub conf_threshold: f32,
    pub batch_size: usize,
    pub epochs: usize,
    /// Defaults to the biggest dataset's size divided by the batch size.
    pub steps_per_epoch: Option<usize>,
    pub lr: LrSchedule,
    pub tiling: bool,
    pub tiling_config: TilingConfig,
    pub intermediate_connection: bool,
    pub augment: AugmentToggles,
    pub weights: LossWeights,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::EndToEnd,
            k_train: None,
            k_eval: 20,
            conf_threshold: 0.2,
            batch_size: 8,
            epochs: 50,
            steps_per_epoch: None,
            lr: LrSchedule::default(),
            tiling: false,
            tiling_config: TilingConfig::default(),
            intermediate_connection: true,
            augment: AugmentToggles::default(),
            weights: LossWeights::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn k_train(&self) -> usize {
        self.k_train.unwrap_or(if self.tiling { 9 } else { 1 })
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.k_train() == 0 || self.k_eval == 0 {
            return err("k_train and k_eval must be at least 1".into());
        }
        if !(self.conf_threshold > 0.0 && self.conf_threshold < 1.0) {
            return err(format!(
                "conf_threshold {} must lie in (0, 1)",
                self.conf_threshold
            ));
        }
        if self.batch_size == 0 {
            return err("batch_size must be at least 1".into());
        }
        if self.steps_per_epoch == Some(0) {
            return err("steps_per_epoch must be at least 1".into());
        }
        if !(self.lr.initial.is_finite() && self.lr.initial > 0.0 && self.lr.gamma > 0.0) {
            return err("learning rate and decay must be positive".into());
        }
        self.tiling_config.validate()?;
        self.weights.validate()
    }

    pub fn eval_config(&self, single_face: bool) -> EvalConfig {
        EvalConfig {
            k: self.k_eval,
            conf_threshold: self.conf_threshold,
            single_face,
            ..EvalConfig::default()
        }
    }
}

/// Loss values of one batch. `objective` is what the gradients are taken
/// of: it excludes `l_det` in frozen mode.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub l_det: f64,
    pub l_age: f64,
    pub l_gen: f64,
    pub objective: f64,
    pub n_age: usize,
    pub n_gender: usize,
}

/// Which terms contribute gradients.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveTerms {
    pub det: bool,
    pub age: bool,
    pub gender: bool,
}

impl ObjectiveTerms {
    pub fn for_mode(mode: TrainMode) -> Self {
        Self {
            det: mode == TrainMode::EndToEnd,
            age: true,
            gender: true,
        }
    }
}

/// Per-image intermediate state of one objective evaluation.
struct ImagePass<F> {
    heat: Var,
    size: Var,
    offset: Var,
    d_heat: Vec<F>,
    d_size: Vec<F>,
    d_offset: Vec<F>,
    slot_vars: Vec<Option<(Var, Var)>>,
}

/// Evaluates `L = mean_b L_det + L_age + L_gen` over a batch and its
/// gradient with respect to every trainable parameter. Age forwards are
/// run only for slots that can be unmasked; the others carry zero logits,
/// which the masks ignore.
pub fn objective<F: Real, R: Rng>(
    model: &Model<F>,
    scenes: &[Scene],
    k: usize,
    frozen: Option<ParamGroup>,
    terms: ObjectiveTerms,
    weights: &LossWeights,
    rng: &mut R,
) -> Result<(StepLosses, Grads<F>)> {
    objective_with_regions(model, scenes, None, k, frozen, terms, weights, rng)
        .map(|o| (o.losses, o.grads))
}

pub struct ObjectiveOutput<F> {
    pub losses: StepLosses,
    pub grads: Grads<F>,
    /// The regions the age network saw, per image.
    pub regions: Vec<Vec<Detection>>,
}

/// [`objective`] with the decoded regions optionally replaced by `regions`.
/// Gradients never flow through region coordinates, so holding them fixed
/// gives the function whose derivative the returned gradients are.
#[allow(clippy::too_many_arguments)]
pub fn objective_with_regions<F: Real, R: Rng>(
    model: &Model<F>,
    scenes: &[Scene],
    regions: Option<&[Vec<Detection>]>,
    k: usize,
    frozen: Option<ParamGroup>,
    terms: ObjectiveTerms,
    weights: &LossWeights,
    rng: &mut R,
) -> Result<ObjectiveOutput<F>> {
    if regions.is_some_and(|r| r.len() != scenes.len()) {
        return Err(Error::Config(
            "one region list per scene is required".into(),
        ));
    }
    let dc = &model.config.detector;
    let mut used = Vec::with_capacity(scenes.len());
    let mut tapes = Vec::with_capacity(scenes.len());
    let mut passes = Vec::with_capacity(scenes.len());
    let mut sup = BatchAgeSupervision::default();
    let mut l_det = F::zero();
    for (si, scene) in scenes.iter().enumerate() {
        let mut tape = Tape::new(&model.store, true, frozen);
        let image: Tensor3<F> = scene.image.cast();
        let pass = model.detect(&mut tape, &image, false)?;
        let targets = encode_targets(scene, dc.input_w, dc.input_h);
        let dl = detection_loss(&pass.output, &targets, weights);
        l_det += dl.total;
        let dets = match regions {
            Some(r) => r[si].clone(),
            None => model.detections(&pass, k),
        };
        let gts: Vec<BBox> = scene.faces.iter().map(|f| f.bbox).collect();
        let matches = match_predictions(&dets, &gts, weights.th_iou as f32);
        let mut slots = Vec::with_capacity(dets.len());
        let mut slot_vars = Vec::with_capacity(dets.len());
        for (d, m) in dets.iter().zip(&matches) {
            let face = m
                .matched_gt_index
                .filter(|_| m.included)
                .map(|i| &scene.faces[i]);
            let needed = face.is_some_and(|f| {
                (terms.age && f.age.is_some()) || (terms.gender && f.gender.is_some())
            });
            let (age_logits, gender_logits, vars) = if needed {
                let v = model.estimate(&mut tape, pass.image, pass.vars.branch, &d.bbox, rng)?;
                (
                    tape.value(v.age_logits).data.clone(),
                    tape.value(v.gender_logits).data.clone(),
                    Some((v.age_logits, v.gender_logits)),
                )
            } else {
                (vec![F::zero(); NUM_AGES], vec![F::zero(); 2], None)
            };
            slots.push(SlotPrediction {
                detection: *d,
                age_logits,
                gender_logits,
            });
            slot_vars.push(vars);
        }
        sup.images.push(ImageSupervision {
            faces: scene.faces.clone(),
            slots,
        });
        passes.push(ImagePass {
            heat: pass.vars.heat_logits,
            size: pass.vars.size,
            offset: pass.vars.offset,
            d_heat: heatmap_logit_grad(&pass.output.heatmap, &dl.d_heatmap),
            d_size: dl.d_size,
            d_offset: dl.d_offset,
            slot_vars,
        });
        tapes.push(tape);
        used.push(dets);
    }
    let b = F::lit(scenes.len().max(1) as f64);
    l_det = l_det / b;
    let age = masked_age_loss(&sup, weights);
    let gen = masked_gender_loss(&sup, weights);
    let mut total = F::zero();
    if terms.det {
        total += l_det;
    }
    if terms.age {
        total += age.value;
    }
    if terms.gender {
        total += gen.value;
    }
    let losses = StepLosses {
        l_det: l_det.as_f64(),
        l_age: age.value.as_f64(),
        l_gen: gen.value.as_f64(),
        objective: total.as_f64(),
        n_age: age.count,
        n_gender: gen.count,
    };
    let mut grads = model.store.zeros_like();
    let inv_b = F::one() / b;
    for (bi, (tape, pass)) in tapes.iter().zip(&passes).enumerate() {
        let mut seeds: Vec<(Var, Vec<F>)> = Vec::new();
        if terms.det && frozen != Some(ParamGroup::Detector) {
            let scaled = |g: &[F]| g.iter().map(|&v| v * inv_b).collect::<Vec<F>>();
            seeds.push((pass.heat, scaled(&pass.d_heat)));
            seeds.push((pass.size, scaled(&pass.d_size)));
            seeds.push((pass.offset, scaled(&pass.d_offset)));
        }
        for (k, vars) in pass.slot_vars.iter().enumerate() {
            let Some((age_var, gen_var)) = vars else {
                continue;
            };
            if terms.age {
                if let Some(g) = &age.slot_grads[bi][k] {
                    seeds.push((*age_var, g.clone()));
                }
            }
            if terms.gender {
                if let Some(g) = &gen.slot_grads[bi][k] {
                    seeds.push((*gen_var, g.clone()));
                }
            }
        }
        if seeds.is_empty() {
            continue;
        }
        let refs: Vec<(Var, &[F])> = seeds.iter().map(|(v, g)| (*v, g.as_slice())).collect();
        tape.backward(&refs, &mut grads);
    }
    Ok(ObjectiveOutput {
        losses,
        grads,
        regions: used,
    })
}

/// The labelled datasets sampled by weight, and an optional pool of
/// box-only multi-face scenes mixed into tiled batches.
#[derive(Clone, Copy, Debug)]
pub struct TrainData<'a> {
    pub labelled: &'a [DatasetManifest],
    pub detection_only: Option<&'a DatasetManifest>,
}

/// Serializable state of a ChaCha stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Everything besides parameters that a resumed run needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub epoch: usize,
    pub step: u64,
    pub rng: RngState,
    pub adam: AdamState<f32>,
}

/// One metric-log record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    #[serde(rename = "L_det")]
    pub l_det: f64,
    #[serde(rename = "L_age")]
    pub l_age: f64,
    #[serde(rename = "L_gen")]
    pub l_gen: f64,
    /// The optimized objective; excludes `L_det` in frozen mode.
    #[serde(rename = "L")]
    pub l: f64,
    pub steps: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val: Option<EvalSummary>,
}

pub struct Trainer {
    pub model: Model<f32>,
    pub config: TrainConfig,
    adam: Adam<f32>,
    rng: ChaCha8Rng,
    epoch: usize,
    step: u64,
}

impl Trainer {
    pub fn new(model: Model<f32>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if model.intermediate_connection() != config.intermediate_connection {
            return Err(Error::Config(
                "intermediate_connection differs between the model and the training config".into(),
            ));
        }
        let adam = Adam::new(&model.store);
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self {
            model,
            config,
            adam,
            rng,
            epoch: 0,
            step: 0,
        })
    }

    pub fn resume(model: Model<f32>, config: TrainConfig, state: TrainerState) -> Result<Self> {
        let mut t = Self::new(model, config)?;
        if state.adam.m.len() != t.model.store.len() {
            return Err(Error::Config(
                "optimizer state does not match the model".into(),
            ));
        }
        t.adam.set_state(state.adam);
        t.rng = state.rng.restore();
        t.epoch = state.epoch;
        t.step = state.step;
        Ok(t)
    }

    pub fn state(&self) -> TrainerState {
        TrainerState {
            epoch: self.epoch,
            step: self.step,
            rng: RngState::capture(&self.rng),
            adam: self.adam.state().clone(),
        }
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn lr(&self) -> f64 {
        self.config.lr.lr_at(self.epoch)
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    fn draw_scene(
        &self,
        data: &TrainData<'_>,
        sampler: &WeightedSampler,
        rng: &mut ChaCha8Rng,
    ) -> Result<Scene> {
        let scene = if self.config.tiling {
            let mixed = data.detection_only.and_then(|pool| {
                draw_detection_only(pool, self.config.tiling_config.detection_only_mix, rng)
            });
            match mixed {
                Some(s) => s,
                None => {
                    let first = &data.labelled[0].scenes[0];
                    let canvas = first.width().max(first.height());
                    sample_tiled_scene(&self.config.tiling_config, canvas, rng, |r| {
                        let (d, i) = sampler.sample_with(r);
                        &data.labelled[d].scenes[i]
                    })?
                }
            }
        } else {
            let (d, i) = sampler.sample_with(rng);
            data.labelled[d].scenes[i].clone()
        };
        Ok(default_augment(&scene, rng, &self.config.augment))
    }

    /// One optimizer step on the given scenes.
    pub fn train_step(&mut self, scenes: &[Scene], batch_seed: u64) -> Result<StepLosses> {
        let mode = self.config.mode;
        let frozen = mode.frozen_group();
        let mut rng = ChaCha8Rng::seed_from_u64(batch_seed);
        let (losses, grads) = objective(
            &self.model,
            scenes,
            self.config.k_train(),
            frozen,
            ObjectiveTerms::for_mode(mode),
            &self.config.weights,
            &mut rng,
        )?;
        if !(losses.objective.is_finite() && losses.l_det.is_finite() && grads.is_finite()) {
            return Err(Error::NonFiniteLoss {
                epoch: self.epoch,
                step: self.step as usize,
                batch_seed,
            });
        }
        let lr = self.lr();
        self.adam.step(&mut self.model.store, &grads, lr, frozen);
        self.step += 1;
        Ok(losses)
    }

    pub fn steps_per_epoch(&self, data: &TrainData<'_>) -> usize {
        self.config.steps_per_epoch.unwrap_or_else(|| {
            let biggest = data.labelled.iter().map(|m| m.len()).max().unwrap_or(0);
            biggest.div_ceil(self.config.batch_size).max(1)
        })
    }

    pub fn train_epoch(&mut self, data: &TrainData<'_>) -> Result<EpochLog> {
        let refs: Vec<&DatasetManifest> = data.labelled.iter().collect();
        let sampler = WeightedSampler::new(&refs, 0)?;
        let steps = self.steps_per_epoch(data);
        let lr = self.lr();
        let mut sum = StepLosses::default();
        for _ in 0..steps {
            let batch_seed: u64 = self.rng.random();
            let mut rng = ChaCha8Rng::seed_from_u64(batch_seed);
            let scenes = (0..self.config.batch_size)
                .map(|_| self.draw_scene(data, &sampler, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let l = self.train_step(&scenes, rng.random())?;
            sum.l_det += l.l_det;
            sum.l_age += l.l_age;
            sum.l_gen += l.l_gen;
            sum.objective += l.objective;
        }
        let n = steps as f64;
        let log = EpochLog {
            epoch: self.epoch,
            lr,
            l_det: sum.l_det / n,
            l_age: sum.l_age / n,
            l_gen: sum.l_gen / n,
            l: sum.objective / n,
            steps,
            val: None,
        };
        self.epoch += 1;
        Ok(log)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub k: usize,
    pub conf_threshold: f32,
    /// IOU needed for a detection to count as a face.
    pub match_iou: f32,
    /// Evaluate only the largest detection of each single-face scene.
    pub single_face: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k: 20,
            conf_threshold: 0.2,
            match_iou: 0.5,
            single_face: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub group: String,
    pub faces: usize,
    pub age_accuracy: f64,
    pub one_off_accuracy: f64,
    pub gender_faces: usize,
    pub gender_accuracy: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionStats {
    pub ground_truth: usize,
    pub predictions: usize,
    pub true_positives: usize,
    pub recall: f64,
    pub precision: f64,
}

/// Headline numbers of a report, as logged per epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub mae: f64,
    pub group_accuracy: f64,
    pub one_off_accuracy: f64,
    pub gender_accuracy: f64,
    pub recall: f64,
    pub precision: f64,
}

/// Percentages are in `[0, 100]`; `mae` is in years.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scenes: usize,
    pub age_faces: usize,
    pub mae: f64,
    pub group_accuracy: f64,
    pub one_off_accuracy: f64,
    pub gender_faces: usize,
    pub gender_accuracy: f64,
    pub per_group: Vec<GroupStats>,
    pub detection: DetectionStats,
}

impl EvalReport {
    pub fn summary(&self) -> EvalSummary {
        EvalSummary {
            mae: self.mae,
            group_accuracy: self.group_accuracy,
            one_off_accuracy: self.one_off_accuracy,
            gender_accuracy: self.gender_accuracy,
            recall: self.detection.recall,
            precision: self.detection.precision,
        }
    }
}

/// Greedy confidence-ordered matching: each detection (most confident
/// first) takes the unmatched ground truth with the highest IOU, if that IOU
/// is at least `th`. Returns `(detection, ground truth)` index pairs.
pub fn greedy_match(dets: &[Detection], gts: &[BBox], th: f32) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .confidence
            .total_cmp(&dets[a].confidence)
            .then(a.cmp(&b))
    });
    let mut taken = vec![false; gts.len()];
    let mut pairs = Vec::new();
    for d in order {
        let mut best: Option<(usize, f32)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] {
                continue;
            }
            let v = iou(&dets[d].bbox, gt);
            if v >= th && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
            pairs.push((d, g));
        }
    }
    pairs
}

#[derive(Default)]
struct Tally {
    faces: usize,
    abs_err: f64,
    exact: usize,
    one_off: usize,
    gender_faces: usize,
    gender_ok: usize,
}

fn pct(n: usize, d: usize) -> f64 {
    if d == 0 {
        0.0
    } else {
        100.0 * n as f64 / d as f64
    }
}

/// Scores precomputed predictions. `predictions[i]` are the top-k faces of
/// `scenes[i]`, most confident first.
pub fn evaluate_predictions(
    scenes: &[Scene],
    predictions: &[Vec<FacePrediction>],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if scenes.is_empty() {
        return Err(Error::EmptyDataset("evaluation set".into()));
    }
    if scenes.len() != predictions.len() {
        return Err(Error::Config(
            "one prediction list per scene is required".into(),
        ));
    }
    let mut total = Tally::default();
    let mut groups: Vec<Tally> = (0..AgeGroup::COUNT).map(|_| Tally::default()).collect();
    let mut det = DetectionStats::default();
    for (scene, preds) in scenes.iter().zip(predictions) {
        let above: Vec<&FacePrediction> = preds
            .iter()
            .filter(|p| p.confidence > cfg.conf_threshold)
            .collect();
        let dets: Vec<Detection> = above
            .iter()
            .map(|p| Detection {
                bbox: p.bbox,
                confidence: p.confidence,
            })
            .collect();
        let gts: Vec<BBox> = scene.faces.iter().map(|f| f.bbox).collect();
        let pairs = greedy_match(&dets, &gts, cfg.match_iou);
        det.ground_truth += gts.len();
        det.predictions += dets.len();
        det.true_positives += pairs.len();

        let scored: Vec<(&FacePrediction, usize)> = if cfg.single_face && scene.faces.len() == 1 {
            let largest = above
                .iter()
                .copied()
                .max_by(|a, b| a.bbox.area().total_cmp(&b.bbox.area()))
                .or_else(|| preds.first());
            largest.map(|p| (p, 0)).into_iter().collect()
        } else {
            pairs.iter().map(|&(d, g)| (above[d], g)).collect()
        };
        for (p, g) in scored {
            let face = &scene.faces[g];
            if let Some(age) = face.age {
                let truth = to_age_group(age as f64);
                let pred = to_age_group(p.age as f64);
                let diff = (truth.index() as i64 - pred.index() as i64).unsigned_abs();
                for t in [&mut total, &mut groups[truth.index()]] {
                    t.faces += 1;
                    t.abs_err += (p.age as f64 - age as f64).abs();
                    t.exact += (diff == 0) as usize;
                    t.one_off += (diff <= 1) as usize;
                }
            }
            if let Some(gender) = face.gender {
                total.gender_faces += 1;
                let ok = (p.gender == gender) as usize;
                total.gender_ok += ok;
                if let Some(age) = face.age {
                    let g = &mut groups[to_age_group(age as f64).index()];
                    g.gender_faces += 1;
                    g.gender_ok += ok;
                }
            }
        }
    }
    det.recall = if det.ground_truth == 0 {
        0.0
    } else {
        det.true_positives as f64 / det.ground_truth as f64
    };
    det.precision = if det.predictions == 0 {
        0.0
    } else {
        det.true_positives as f64 / det.predictions as f64
    };
    let per_group = groups
        .iter()
        .enumerate()
        .map(|(i, t)| GroupStats {
            group: AgeGroup(i as u8).label().into(),
            faces: t.faces,
            age_accuracy: pct(t.exact, t.faces),
            one_off_accuracy: pct(t.one_off, t.faces),
            gender_faces: t.gender_faces,
            gender_accuracy: pct(t.gender_ok, t.gender_faces),
        })
        .collect();
    Ok(EvalReport {
        scenes: scenes.len(),
        age_faces: total.faces,
        mae: if total.faces == 0 {
            0.0
        } else {
            total.abs_err / total.faces as f64
        },
        group_accuracy: pct(total.exact, total.faces),
        one_off_accuracy: pct(total.one_off, total.faces),
        gender_faces: total.gender_faces,
        gender_accuracy: pct(total.gender_ok, total.gender_faces),
        per_group,
        detection: det,
    })
}

/// Runs the model on every scene and scores it.
pub fn evaluate<F: Real>(
    model: &Model<F>,
    scenes: &[Scene],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if scenes.is_empty() {
        return Err(Error::EmptyDataset("evaluation set".into()));
    }
    let preds = scenes
        .iter()
        .map(|s| model.predict_topk(&s.image, cfg.k))
        .collect::<Result<Vec<_>>>()?;
    evaluate_predictions(scenes, &preds, cfg)
}
