//! Procedural stand-in for the face datasets.
//!
//! Backgrounds are strictly gray (equal channels) with noise, gradients and
//! gray distractor shapes. Faces are filled ellipses whose channels carry the
//! labels: red encodes gender, green rises linearly with age, and blue holds
//! concentric rings whose frequency also rises with age. Age is therefore
//! independent of face size.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::age_estimator::{Gender, MAX_AGE};
use crate::error::{Error, Result};
use crate::geometry::{BBox, Detection};
use crate::tensor::Image;

/// Face width relative to its height.
pub const FACE_ASPECT: f32 = 0.8;
pub const MIN_SIDE: usize = 64;
const PLACEMENT_ATTEMPTS: usize = 500;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaceAnnotation {
    pub bbox: BBox,
    pub age: Option<u8>,
    pub gender: Option<Gender>,
}

impl FaceAnnotation {
    pub fn box_only(bbox: BBox) -> Self {
        Self {
            bbox,
            age: None,
            gender: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image: Image,
    pub faces: Vec<FaceAnnotation>,
    pub source: String,
}

impl Scene {
    pub fn width(&self) -> usize {
        self.image.width
    }

    pub fn height(&self) -> usize {
        self.image.height
    }

    /// The same scene with every age and gender label removed.
    pub fn without_labels(mut self) -> Self {
        for f in &mut self.faces {
            f.age = None;
            f.gender = None;
        }
        self
    }
}

/// Green level of a face of the given age.
pub fn age_level(age: u8) -> f32 {
    0.1 + 0.8 * age as f32 / MAX_AGE as f32
}

/// Ring frequency, in cycles per face radius.
pub fn ring_frequency(age: u8) -> f32 {
    1.0 + 0.02 * age as f32
}

pub fn gender_level(gender: Gender) -> f32 {
    match gender {
        Gender::Female => 0.2,
        Gender::Male => 0.85,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub n_faces: usize,
    pub image_side: usize,
    /// Face height as a fraction of the image side, sampled uniformly.
    pub face_scale: (f32, f32),
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.face_scale;
        if self.image_side < MIN_SIDE {
            return Err(Error::Config(alloc::format!(
                "image side {} below {MIN_SIDE}",
                self.image_side
            )));
        }
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(alloc::format!(
                "face scale range ({lo}, {hi}) must lie in (0, 1]"
            )));
        }
        Ok(())
    }
}

fn gray(image: &mut Image, x: usize, y: usize, v: f32) {
    for c in 0..3 {
        image.set(c, y, x, v);
    }
}

fn render_background<R: Rng>(side: usize, rng: &mut R) -> Image {
    let mut image = Image::zeros(3, side, side);
    let base: f32 = rng.random_range(0.3..0.7);
    let (gx, gy): (f32, f32) = (rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15));
    for y in 0..side {
        for x in 0..side {
            let t = (x as f32 / side as f32 - 0.5) * gx + (y as f32 / side as f32 - 0.5) * gy;
            let noise: f32 = rng.random_range(-0.03..0.03);
            gray(&mut image, x, y, (base + t + noise).clamp(0.0, 1.0));
        }
    }
    let n_shapes = rng.random_range(2..6);
    for _ in 0..n_shapes {
        let w = rng.random_range(side / 10..side / 3);
        let h = rng.random_range(side / 10..side / 3);
        let x0 = rng.random_range(0..side - w);
        let y0 = rng.random_range(0..side - h);
        let level: f32 = rng.random_range(0.05..0.95);
        let ellipse = rng.random_bool(0.5);
        let (cx, cy) = (x0 as f32 + w as f32 / 2.0, y0 as f32 + h as f32 / 2.0);
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                if ellipse {
                    let dx = (x as f32 + 0.5 - cx) / (w as f32 / 2.0);
                    let dy = (y as f32 + 0.5 - cy) / (h as f32 / 2.0);
                    if dx * dx + dy * dy > 1.0 {
                        continue;
                    }
                }
                gray(&mut image, x, y, level);
            }
        }
    }
    image
}

/// Paints one face filling the ellipse inscribed in `bbox`, which must have
/// integer edges inside the image.
pub fn render_face(image: &mut Image, bbox: &BBox, age: u8, gender: Gender) {
    let (cx, cy) = bbox.center();
    let (a, b) = (bbox.width() / 2.0, bbox.height() / 2.0);
    let red = gender_level(gender);
    let green = age_level(age);
    let freq = ring_frequency(age);
    let (x0, y0) = (bbox.x1 as usize, bbox.y1 as usize);
    let (x1, y1) = (bbox.x2 as usize, bbox.y2 as usize);
    for y in y0..y1.min(image.height) {
        for x in x0..x1.min(image.width) {
            let dx = (x as f32 + 0.5 - cx) / a;
            let dy = (y as f32 + 0.5 - cy) / b;
            let rho = dx * dx + dy * dy;
            if rho > 1.0 {
                continue;
            }
            let r = libm::sqrtf(rho);
            let blue = 0.5 + 0.1 * libm::cosf(2.0 * core::f32::consts::PI * freq * r);
            image.set(0, y, x, red);
            image.set(1, y, x, green);
            image.set(2, y, x, blue);
        }
    }
}

/// Renders a scene with `n_faces` labelled, pairwise disjoint faces.
/// Identical arguments give a bit-identical scene.
pub fn generate_scene(
    seed: u64,
    n_faces: usize,
    image_side: usize,
    face_scale: (f32, f32),
) -> Result<Scene> {
    let params = SceneParams {
        n_faces,
        image_side,
        face_scale,
    };
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut image = render_background(image_side, &mut rng);
    let side = image_side as f32;
    let mut faces: Vec<FaceAnnotation> = Vec::with_capacity(n_faces);
    let mut attempts = 0;
    while faces.len() < n_faces {
        attempts += 1;
        if attempts > PLACEMENT_ATTEMPTS {
            return Err(Error::Placement {
                requested: n_faces,
                attempts: PLACEMENT_ATTEMPTS,
            });
        }
        let scale: f32 = if face_scale.0 < face_scale.1 {
            rng.random_range(face_scale.0..=face_scale.1)
        } else {
            face_scale.0
        };
        let h = libm::roundf(scale * side).clamp(4.0, side);
        let w = libm::roundf(h * FACE_ASPECT).max(3.0);
        let x1 = rng.random_range(0..=(image_side - w as usize)) as f32;
        let y1 = rng.random_range(0..=(image_side - h as usize)) as f32;
        let bbox = BBox::new(x1, y1, x1 + w, y1 + h)?;
        // Keep a gap so faces never touch.
        let halo = bbox.transform(1.0, 1.0, 0.0, 0.0);
        let halo = BBox {
            x1: halo.x1 - 2.0,
            y1: halo.y1 - 2.0,
            x2: halo.x2 + 2.0,
            y2: halo.y2 + 2.0,
        };
        if faces.iter().any(|f| f.bbox.intersects(&halo)) {
            continue;
        }
        let age = rng.random_range(0..=MAX_AGE);
        let gender = if rng.random_bool(0.5) {
            Gender::Male
        } else {
            Gender::Female
        };
        render_face(&mut image, &bbox, age, gender);
        faces.push(FaceAnnotation {
            bbox,
            age: Some(age),
            gender: Some(gender),
        });
    }
    Ok(Scene {
        image,
        faces,
        source: "synthetic".to_string(),
    })
}

/// An in-memory dataset with its sampling weight.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub name: String,
    pub scenes: Vec<Scene>,
    /// Overrides the default weight (the scene count).
    pub weight: Option<f64>,
}

impl DatasetManifest {
    pub fn new(name: impl Into<String>, scenes: Vec<Scene>) -> Self {
        Self {
            name: name.into(),
            scenes,
            weight: None,
        }
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    pub fn weight(&self) -> f64 {
        self.weight.unwrap_or(self.scenes.len() as f64)
    }
}

/// Corpus of `count` scenes with seeds `base_seed + i`.
pub fn generate_dataset(
    name: &str,
    base_seed: u64,
    count: usize,
    params: &SceneParams,
) -> Result<DatasetManifest> {
    let scenes = (0..count as u64)
        .map(|i| {
            let mut s = generate_scene(
                base_seed.wrapping_add(i),
                params.n_faces,
                params.image_side,
                params.face_scale,
            )?;
            s.source = name.to_string();
            Ok(s)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DatasetManifest::new(name, scenes))
}

/// Keeps only scenes on which `detect` finds exactly one face above
/// `conf_th`, replacing the annotated box with the detected one. The labels
/// of the original face (when there was exactly one) are carried over.
pub fn clean_single_face(
    manifest: &DatasetManifest,
    mut detect: impl FnMut(&Scene) -> Vec<Detection>,
    conf_th: f32,
) -> DatasetManifest {
    let scenes = manifest
        .scenes
        .iter()
        .filter_map(|scene| {
            let confident: Vec<Detection> = detect(scene)
                .into_iter()
                .filter(|d| d.confidence > conf_th)
                .collect();
            if confident.len() != 1 {
                return None;
            }
            let (age, gender) = match scene.faces.as_slice() {
                [f] => (f.age, f.gender),
                _ => (None, None),
            };
            Some(Scene {
                image: scene.image.clone(),
                faces: alloc::vec![FaceAnnotation {
                    bbox: confident[0].bbox,
                    age,
                    gender,
                }],
                source: scene.source.clone(),
            })
        })
        .collect();
    DatasetManifest {
        name: manifest.name.clone(),
        scenes,
        weight: manifest.weight,
    }
}

/// Draws `(dataset, scene)` index pairs: a dataset with probability
/// proportional to its weight, then a scene uniformly.
#[derive(Clone, Debug)]
pub struct WeightedSampler {
    cumulative: Vec<f64>,
    sizes: Vec<usize>,
    rng: ChaCha8Rng,
}

impl WeightedSampler {
    pub fn new(manifests: &[&DatasetManifest], seed: u64) -> Result<Self> {
        if manifests.is_empty() {
            return Err(Error::EmptyDataset("no datasets to sample from".into()));
        }
        let mut cumulative = Vec::with_capacity(manifests.len());
        let mut total = 0.0;
        for m in manifests {
            if m.is_empty() {
                return Err(Error::EmptyDataset(m.name.clone()));
            }
            let w = m.weight();
            if !(w.is_finite() && w > 0.0) {
                return Err(Error::Config(alloc::format!(
                    "dataset {} has weight {w}",
                    m.name
                )));
            }
            total += w;
            cumulative.push(total);
        }
        Ok(Self {
            cumulative,
            sizes: manifests.iter().map(|m| m.len()).collect(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Images per epoch: the size of the biggest dataset.
    pub fn epoch_len(&self) -> usize {
        self.sizes.iter().copied().max().unwrap_or(0)
    }

    pub fn next_index(&mut self) -> (usize, usize) {
        let mut rng = self.rng.clone();
        let out = self.sample_with(&mut rng);
        self.rng = rng;
        out
    }

    /// One draw using an external generator; the sampler's own stream is
    /// untouched.
    pub fn sample_with<R: Rng>(&self, rng: &mut R) -> (usize, usize) {
        let total = *self.cumulative.last().expect("non-empty");
        let u: f64 = rng.random::<f64>() * total;
        let d = self
            .cumulative
            .iter()
            .position(|&c| u < c)
            .unwrap_or(self.cumulative.len() - 1);
        let s = rng.random_range(0..self.sizes[d]);
        (d, s)
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

impl Iterator for WeightedSampler {
    type Item = (usize, usize);

    fn next(&mut self) -> Option<Self::Item> {
        Some(self.next_index())
    }
}

/// One face of an [`AnnotationRecord`]; absent fields mean absent labels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaceRecord {
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub age: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gender: Option<Gender>,
}

/// One line of an annotation file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub image_path: String,
    pub width: usize,
    pub height: usize,
    pub faces: Vec<FaceRecord>,
}

impl AnnotationRecord {
    pub fn from_scene(scene: &Scene, image_path: impl Into<String>) -> Self {
        Self {
            image_path: image_path.into(),
            width: scene.width(),
            height: scene.height(),
            faces: scene
                .faces
                .iter()
                .map(|f| FaceRecord {
                    x1: f.bbox.x1,
                    y1: f.bbox.y1,
                    x2: f.bbox.x2,
                    y2: f.bbox.y2,
                    age: f.age,
                    gender: f.gender,
                })
                .collect(),
        }
    }

    /// Validated faces. Boxes must be well formed and intersect the image;
    /// ages must be at most 100.
    pub fn faces(&self) -> Result<Vec<FaceAnnotation>> {
        let extent = BBox {
            x1: 0.0,
            y1: 0.0,
            x2: self.width as f32,
            y2: self.height as f32,
        };
        self.faces
            .iter()
            .map(|f| {
                let bbox = BBox::new(f.x1, f.y1, f.x2, f.y2)?;
                if !bbox.intersects(&extent) {
                    return Err(Error::InvalidBox {
                        x1: f.x1,
                        y1: f.y1,
                        x2: f.x2,
                        y2: f.y2,
                    });
                }
                if let Some(a) = f.age {
                    if a > MAX_AGE {
                        return Err(Error::Config(alloc::format!(
                            "age {a} in {} out of range",
                            self.image_path
                        )));
                    }
                }
                Ok(FaceAnnotation {
                    bbox,
                    age: f.age,
                    gender: f.gender,
                })
            })
            .collect()
    }
}
