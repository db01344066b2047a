//! The combined network: detector, facial cropping connection,
//! intermediate feature connection and age/gender network.

use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::age_estimator::{
    AgeDistribution, AgeNet, AgeNetConfig, AgeVars, Gender, GenderDistribution,
};
use crate::detector::{
    decode_topk, DetectorConfig, DetectorNet, DetectorOutput, DetectorVars, STRIDE,
};
use crate::error::{Error, Result};
use crate::geometry::{expand_with_margins, BBox, Detection, SampleGrid};
use crate::nn::{ParamStore, Tape, Var};
use crate::tensor::{Image, Real, Tensor3};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Desk,
    Paper,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub detector: DetectorConfig,
    pub age: AgeNetConfig,
    /// Crop margin above the face, as a fraction of its height.
    pub top_margin: f32,
    /// Crop margin on the other three sides.
    pub side_margin: f32,
}

impl ModelConfig {
    pub fn preset(preset: Preset, intermediate_connection: bool) -> Self {
        let (detector, age) = match preset {
            Preset::Desk => (
                DetectorConfig::desk(),
                AgeNetConfig::desk(intermediate_connection),
            ),
            Preset::Paper => (
                DetectorConfig::paper(),
                AgeNetConfig::paper(intermediate_connection),
            ),
        };
        Self {
            detector,
            age,
            top_margin: 0.2,
            side_margin: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.detector.validate()?;
        self.age.validate()?;
        if self.age.intermediate_connection && self.age.roi_channels != self.detector.branch_width {
            return Err(Error::Config(format!(
                "ROI channels {} differ from the detector branch width {}",
                self.age.roi_channels, self.detector.branch_width
            )));
        }
        if !(self.top_margin >= 0.0 && self.side_margin >= 0.0) {
            return Err(Error::Config("crop margins must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<F> {
    pub config: ModelConfig,
    pub store: ParamStore<F>,
    pub detector: DetectorNet,
    pub age: AgeNet,
}

/// Detector pass over one scene.
#[derive(Clone, Debug)]
pub struct DetectorPass<F> {
    /// The scene image as a tape leaf.
    pub image: Var,
    pub vars: DetectorVars,
    pub output: DetectorOutput<F>,
    pub scene_w: usize,
    pub scene_h: usize,
}

impl<F> DetectorPass<F> {
    /// Scene pixels per detector-input pixel, per axis.
    pub fn scale(&self, config: &DetectorConfig) -> (f32, f32) {
        (
            self.scene_w as f32 / config.input_w as f32,
            self.scene_h as f32 / config.input_h as f32,
        )
    }
}

/// One face as reported by [`Model::predict`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FacePrediction {
    pub bbox: BBox,
    pub confidence: f32,
    pub age: f32,
    pub gender: Gender,
    pub gender_confidence: f32,
}

impl<F: Real> Model<F> {
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let detector = DetectorNet::build(&config.detector, &mut store, &mut rng)?;
        let age = AgeNet::build(&config.age, &mut store, &mut rng)?;
        Ok(Self {
            config: config.clone(),
            store,
            detector,
            age,
        })
    }

    /// Rebuilds the network for `config` around existing parameters, which
    /// must match it by name and shape.
    pub fn from_store(config: &ModelConfig, store: ParamStore<F>) -> Result<Self> {
        let mut model = Self::build(config, 0)?;
        if model.store.len() != store.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, found {}",
                model.store.len(),
                store.len()
            )));
        }
        for (a, b) in model.store.iter().zip(store.iter()) {
            if a.name != b.name || a.shape != b.shape || a.group != b.group {
                return Err(Error::Config(format!(
                    "parameter {} {:?} does not match {} {:?}",
                    b.name, b.shape, a.name, a.shape
                )));
            }
        }
        model.store = store;
        Ok(model)
    }

    pub fn cast<G: Real>(&self) -> Model<G> {
        Model {
            config: self.config.clone(),
            store: self.store.cast(),
            detector: self.detector.clone(),
            age: self.age.clone(),
        }
    }

    pub fn intermediate_connection(&self) -> bool {
        self.config.age.intermediate_connection
    }

    /// Puts `image` on the tape and runs the detector on its resized copy.
    pub fn detect(
        &self,
        tape: &mut Tape<'_, F>,
        image: &Tensor3<F>,
        image_requires_grad: bool,
    ) -> Result<DetectorPass<F>> {
        if image.channels != 3 || image.height == 0 || image.width == 0 {
            return Err(Error::Shape {
                expected: "non-empty 3-channel image".into(),
                actual: format!("{}x{}x{}", image.channels, image.height, image.width),
            });
        }
        let dc = &self.config.detector;
        let leaf = tape.leaf(image.clone(), image_requires_grad);
        let input = if (image.height, image.width) == (dc.input_h, dc.input_w) {
            leaf
        } else {
            tape.gather(
                leaf,
                SampleGrid::resize(image.height, image.width, dc.input_h, dc.input_w),
            )
        };
        let vars = self.detector.forward(tape, input)?;
        let output = self.detector.output(tape, &vars);
        Ok(DetectorPass {
            image: leaf,
            vars,
            output,
            scene_w: image.width,
            scene_h: image.height,
        })
    }

    /// The `k` most probable regions, in scene pixels.
    pub fn detections(&self, pass: &DetectorPass<F>, k: usize) -> Vec<Detection> {
        let dc = &self.config.detector;
        let (sx, sy) = pass.scale(dc);
        let (w, h) = (pass.scene_w as f32, pass.scene_h as f32);
        decode_topk(&pass.output, k, dc.input_w, dc.input_h)
            .into_iter()
            .map(|d| Detection {
                bbox: d
                    .bbox
                    .transform(sx, sy, 0.0, 0.0)
                    .clip(w, h)
                    .unwrap_or(d.bbox),
                confidence: d.confidence,
            })
            .collect()
    }

    /// Margin-expanded region used by both connections, in scene pixels.
    pub fn crop_region(&self, bbox: &BBox, scene_w: usize, scene_h: usize) -> BBox {
        expand_with_margins(
            bbox,
            self.config.top_margin,
            self.config.side_margin,
            scene_w as f32,
            scene_h as f32,
        )
    }

    /// Age network on one detected face. `image` is the scene leaf and
    /// `branch` the detector's stride-4 feature of that scene.
    #[allow(clippy::too_many_arguments)]
    pub fn estimate<R: Rng>(
        &self,
        tape: &mut Tape<'_, F>,
        image: Var,
        branch: Var,
        bbox: &BBox,
        rng: &mut R,
    ) -> Result<AgeVars> {
        let (scene_h, scene_w) = {
            let v = tape.value(image);
            (v.height, v.width)
        };
        let region = self.crop_region(bbox, scene_w, scene_h);
        let ac = &self.config.age;
        let grid = SampleGrid::crop(scene_h, scene_w, &region, ac.crop_h, ac.crop_w).ok_or(
            Error::InvalidBox {
                x1: region.x1,
                y1: region.y1,
                x2: region.x2,
                y2: region.y2,
            },
        )?;
        let crop = tape.gather(image, grid);
        let roi = if ac.intermediate_connection {
            let dc = &self.config.detector;
            let (gh, gw) = dc.grid();
            // Scene pixels per feature cell.
            let fx = scene_w as f32 / dc.input_w as f32 * STRIDE as f32;
            let fy = scene_h as f32 / dc.input_h as f32 * STRIDE as f32;
            let feat_region = region.transform(1.0 / fx, 1.0 / fy, 0.0, 0.0);
            let (c, oh, ow) = self.age.roi_shape();
            Some(match SampleGrid::roi(gh, gw, &feat_region, oh, ow) {
                Some(g) => tape.gather(branch, g),
                None => tape.leaf(Tensor3::zeros(c, oh, ow), false),
            })
        } else {
            None
        };
        self.age.forward(tape, crop, roi, rng)
    }

    /// Inference: the `k` most probable faces with age and gender, most
    /// confident first.
    pub fn predict_topk(&self, image: &Image, k: usize) -> Result<Vec<FacePrediction>> {
        let img: Tensor3<F> = image.cast();
        let mut tape = Tape::new(&self.store, false, None);
        let pass = self.detect(&mut tape, &img, false)?;
        let dets = self.detections(&pass, k);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        dets.into_iter()
            .map(|d| {
                let vars =
                    self.estimate(&mut tape, pass.image, pass.vars.branch, &d.bbox, &mut rng)?;
                let age = AgeDistribution::from_logits(&tape.value(vars.age_logits).data);
                let gender = GenderDistribution::from_logits(&tape.value(vars.gender_logits).data);
                let g = gender.argmax();
                Ok(FacePrediction {
                    bbox: d.bbox,
                    confidence: d.confidence,
                    age: age.expected_age().as_f64() as f32,
                    gender: g,
                    gender_confidence: gender.probs[g.index()].as_f64() as f32,
                })
            })
            .collect()
    }

    /// Faces above `conf_threshold` among the top `k`.
    pub fn predict(
        &self,
        image: &Image,
        k: usize,
        conf_threshold: f32,
    ) -> Result<Vec<FacePrediction>> {
        let mut out = self.predict_topk(image, k)?;
        out.retain(|p| p.confidence > conf_threshold);
        Ok(out)
    }
}
