//! Tiling augmentation and the default photometric/geometric stack.

use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, SampleGrid};
use crate::synth::{DatasetManifest, FaceAnnotation, Scene};
use crate::tensor::Image;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TilingConfig {
    pub allowed_tile_counts: Vec<usize>,
    pub max_distinct_sources: usize,
    /// Probability of substituting a seamless detection-only scene for a
    /// tiled one.
    pub detection_only_mix: f64,
}

impl Default for TilingConfig {
    fn default() -> Self {
        Self {
            allowed_tile_counts: alloc::vec![1, 4, 9],
            max_distinct_sources: 4,
            detection_only_mix: 0.25,
        }
    }
}

/// Integer square root when `n` is a positive perfect square.
fn grid_side(n: usize) -> Option<usize> {
    let r = libm::round(libm::sqrt(n as f64)) as usize;
    (n > 0 && r * r == n).then_some(r)
}

impl TilingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.allowed_tile_counts.is_empty() {
            return Err(Error::Config("no allowed tile counts".into()));
        }
        if let Some(&n) = self
            .allowed_tile_counts
            .iter()
            .find(|&&n| grid_side(n).is_none())
        {
            return Err(Error::TileCount(n));
        }
        if self.max_distinct_sources == 0 {
            return Err(Error::Config(
                "max_distinct_sources must be at least 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.detection_only_mix) {
            return Err(Error::Config(
                "detection_only_mix must be a probability".into(),
            ));
        }
        Ok(())
    }

    /// Largest allowed tile count, i.e. the faces a tiled scene can hold.
    pub fn max_tiles(&self) -> usize {
        self.allowed_tile_counts.iter().copied().max().unwrap_or(1)
    }
}

/// Resamples a whole image to `out_h x out_w`.
pub fn resize_image(image: &Image, out_h: usize, out_w: usize) -> Image {
    if (image.height, image.width) == (out_h, out_w) {
        return image.clone();
    }
    SampleGrid::resize(image.height, image.width, out_h, out_w).apply(image)
}

/// Grid-tiles single-face scenes onto a square canvas. Cell `i` (row-major)
/// holds `sources[assignment[i]]` stretched to the cell.
pub fn tile_with_assignment(
    sources: &[&Scene],
    assignment: &[usize],
    canvas_side: usize,
) -> Result<Scene> {
    let n = assignment.len();
    let side = grid_side(n).ok_or(Error::TileCount(n))?;
    if sources.is_empty() {
        return Err(Error::EmptyDataset("no tiling sources".into()));
    }
    if canvas_side < side {
        return Err(Error::Config(alloc::format!(
            "canvas {canvas_side} too small for {n} tiles"
        )));
    }
    let mut canvas = Image::zeros(3, canvas_side, canvas_side);
    let mut faces = Vec::new();
    let edge = |i: usize| i * canvas_side / side;
    for (cell, &src) in assignment.iter().enumerate() {
        let s = sources
            .get(src)
            .ok_or_else(|| Error::Config("tile assignment out of range".into()))?;
        let (row, col) = (cell / side, cell % side);
        let (x0, x1, y0, y1) = (edge(col), edge(col + 1), edge(row), edge(row + 1));
        let (cw, ch) = (x1 - x0, y1 - y0);
        let tile = resize_image(&s.image, ch, cw);
        for c in 0..3 {
            for y in 0..ch {
                let src_row = &tile.plane(c)[y * cw..(y + 1) * cw];
                let start = canvas.index(c, y0 + y, x0);
                canvas.data[start..start + cw].copy_from_slice(src_row);
            }
        }
        let sx = cw as f32 / s.width() as f32;
        let sy = ch as f32 / s.height() as f32;
        for f in &s.faces {
            faces.push(FaceAnnotation {
                bbox: f.bbox.transform(sx, sy, x0 as f32, y0 as f32),
                ..*f
            });
        }
    }
    Ok(Scene {
        image: canvas,
        faces,
        source: "tiled".into(),
    })
}

/// Tiles `n_tiles` cells, each drawn uniformly with replacement from
/// `sources`.
pub fn tile_scenes<R: Rng>(
    config: &TilingConfig,
    sources: &[&Scene],
    n_tiles: usize,
    canvas_side: usize,
    rng: &mut R,
) -> Result<Scene> {
    if !config.allowed_tile_counts.contains(&n_tiles) || grid_side(n_tiles).is_none() {
        return Err(Error::TileCount(n_tiles));
    }
    if sources.is_empty() || sources.len() > config.max_distinct_sources {
        return Err(Error::Config(alloc::format!(
            "tiling needs 1..={} sources, got {}",
            config.max_distinct_sources,
            sources.len()
        )));
    }
    let assignment: Vec<usize> = (0..n_tiles)
        .map(|_| rng.random_range(0..sources.len()))
        .collect();
    tile_with_assignment(sources, &assignment, canvas_side)
}

/// A random labelled-face scene or a tiled composite, per the tiling
/// configuration. `draw` yields a source scene per call.
pub fn sample_tiled_scene<'a, R: Rng>(
    config: &TilingConfig,
    canvas_side: usize,
    rng: &mut R,
    mut draw: impl FnMut(&mut R) -> &'a Scene,
) -> Result<Scene> {
    let n_tiles = config.allowed_tile_counts[rng.random_range(0..config.allowed_tile_counts.len())];
    let distinct = n_tiles.min(config.max_distinct_sources);
    let sources: Vec<&Scene> = (0..distinct).map(|_| draw(rng)).collect();
    tile_scenes(config, &sources, n_tiles, canvas_side, rng)
}

/// With probability `p`, a uniformly drawn scene of `pool` with every label
/// removed.
pub fn draw_detection_only<R: Rng>(pool: &DatasetManifest, p: f64, rng: &mut R) -> Option<Scene> {
    if pool.is_empty() || !rng.random_bool(p.clamp(0.0, 1.0)) {
        return None;
    }
    let i = rng.random_range(0..pool.len());
    Some(pool.scenes[i].clone().without_labels())
}

/// Stream adapter that substitutes detection-only scenes with probability
/// `p`.
pub struct DetectionOnlyMix<'a, I, R> {
    inner: I,
    pool: &'a DatasetManifest,
    p: f64,
    rng: R,
}

pub fn mix_detection_only<I: Iterator<Item = Scene>, R: Rng>(
    stream: I,
    pool: &DatasetManifest,
    p: f64,
    rng: R,
) -> DetectionOnlyMix<'_, I, R> {
    DetectionOnlyMix {
        inner: stream,
        pool,
        p,
        rng,
    }
}

impl<I: Iterator<Item = Scene>, R: Rng> Iterator for DetectionOnlyMix<'_, I, R> {
    type Item = Scene;

    fn next(&mut self) -> Option<Scene> {
        let next = self.inner.next()?;
        Some(draw_detection_only(self.pool, self.p, &mut self.rng).unwrap_or(next))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentToggles {
    pub flip: bool,
    pub scale: bool,
    pub crop: bool,
    pub rotation: bool,
    pub color_jitter: bool,
    pub blur: bool,
}

impl AugmentToggles {
    pub fn all() -> Self {
        Self {
            flip: true,
            scale: true,
            crop: true,
            rotation: true,
            color_jitter: true,
            blur: true,
        }
    }

    pub fn any(&self) -> bool {
        self.flip || self.scale || self.crop || self.rotation || self.color_jitter || self.blur
    }
}

/// 2x3 affine map `p' = A p + t` in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine {
    pub m: [f32; 6],
}

impl Affine {
    pub fn identity() -> Self {
        Self {
            m: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
        }
    }

    pub fn apply(&self, x: f32, y: f32) -> (f32, f32) {
        let m = &self.m;
        (m[0] * x + m[1] * y + m[2], m[3] * x + m[4] * y + m[5])
    }

    pub fn inverse(&self) -> Option<Self> {
        let m = &self.m;
        let det = m[0] * m[4] - m[1] * m[3];
        if det.abs() < 1e-12 {
            return None;
        }
        let (a, b, c, d) = (m[4] / det, -m[1] / det, -m[3] / det, m[0] / det);
        Some(Self {
            m: [a, b, -(a * m[2] + b * m[5]), c, d, -(c * m[2] + d * m[5])],
        })
    }

    /// Scale `s` and rotation `theta` about `(cx, cy)`, then shift by
    /// `(tx, ty)`.
    pub fn about(cx: f32, cy: f32, s: f32, theta: f32, tx: f32, ty: f32) -> Self {
        let (sin, cos) = (libm::sinf(theta), libm::cosf(theta));
        let (a, b, c, d) = (s * cos, -s * sin, s * sin, s * cos);
        Self {
            m: [
                a,
                b,
                cx + tx - a * cx - b * cy,
                c,
                d,
                cy + ty - c * cx - d * cy,
            ],
        }
    }

    /// Axis-aligned hull of the mapped box.
    pub fn map_box(&self, b: &BBox) -> BBox {
        let corners =
            [(b.x1, b.y1), (b.x2, b.y1), (b.x1, b.y2), (b.x2, b.y2)].map(|(x, y)| self.apply(x, y));
        let xs = corners.map(|c| c.0);
        let ys = corners.map(|c| c.1);
        BBox {
            x1: xs.iter().copied().fold(f32::INFINITY, f32::min),
            y1: ys.iter().copied().fold(f32::INFINITY, f32::min),
            x2: xs.iter().copied().fold(f32::NEG_INFINITY, f32::max),
            y2: ys.iter().copied().fold(f32::NEG_INFINITY, f32::max),
        }
    }
}

/// Warps `image` by `forward` (source to output pixel coordinates) with
/// bilinear sampling; uncovered pixels take `fill`.
pub fn warp_affine(image: &Image, forward: &Affine, fill: f32) -> Image {
    let inv = forward.inverse().unwrap_or_else(Affine::identity);
    let (h, w) = (image.height, image.width);
    let mut out = Image::filled(image.channels, h, w, fill);
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = inv.apply(x as f32 + 0.5, y as f32 + 0.5);
            let (fx, fy) = (sx - 0.5, sy - 0.5);
            if fx < -0.5 || fy < -0.5 || fx > w as f32 - 0.5 || fy > h as f32 - 0.5 {
                continue;
            }
            let fx = fx.clamp(0.0, (w - 1) as f32);
            let fy = fy.clamp(0.0, (h - 1) as f32);
            let (x0, y0) = (fx as usize, fy as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (ax, ay) = (fx - x0 as f32, fy - y0 as f32);
            for c in 0..image.channels {
                let top = image.get(c, y0, x0) + ax * (image.get(c, y0, x1) - image.get(c, y0, x0));
                let bot = image.get(c, y1, x0) + ax * (image.get(c, y1, x1) - image.get(c, y1, x0));
                out.set(c, y, x, top + ay * (bot - top));
            }
        }
    }
    out
}

/// Horizontal mirror of a box in an image of width `width`.
pub fn flip_box(b: &BBox, width: f32) -> BBox {
    BBox {
        x1: width - b.x2,
        y1: b.y1,
        x2: width - b.x1,
        y2: b.y2,
    }
}

fn flip_image(image: &Image) -> Image {
    let mut out = image.clone();
    let w = image.width;
    for c in 0..image.channels {
        for y in 0..image.height {
            for x in 0..w {
                out.set(c, y, x, image.get(c, y, w - 1 - x));
            }
        }
    }
    out
}

fn box_blur(image: &Image) -> Image {
    let (h, w) = (image.height, image.width);
    let mut out = image.clone();
    for c in 0..image.channels {
        for y in 0..h {
            for x in 0..w {
                let mut sum = 0.0;
                let mut n = 0.0;
                for yy in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                    for xx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                        sum += image.get(c, yy, xx);
                        n += 1.0;
                    }
                }
                out.set(c, y, x, sum / n);
            }
        }
    }
    out
}

/// Applies each enabled transform, keeping boxes consistent with pixels.
/// Faces pushed entirely out of the image are dropped.
pub fn default_augment<R: Rng>(scene: &Scene, rng: &mut R, toggles: &AugmentToggles) -> Scene {
    if !toggles.any() {
        return scene.clone();
    }
    let mut image = scene.image.clone();
    let mut faces = scene.faces.clone();
    let (w, h) = (image.width as f32, image.height as f32);

    if toggles.flip && rng.random_bool(0.5) {
        image = flip_image(&image);
        for f in &mut faces {
            f.bbox = flip_box(&f.bbox, w);
        }
    }

    let s = if toggles.scale {
        rng.random_range(0.8f32..1.2)
    } else {
        1.0
    };
    let theta = if toggles.rotation {
        rng.random_range(-10.0f32..10.0).to_radians()
    } else {
        0.0
    };
    let (tx, ty) = if toggles.crop {
        (
            rng.random_range(-0.1 * w..0.1 * w),
            rng.random_range(-0.1 * h..0.1 * h),
        )
    } else {
        (0.0, 0.0)
    };
    if s != 1.0 || theta != 0.0 || tx != 0.0 || ty != 0.0 {
        let affine = Affine::about(w / 2.0, h / 2.0, s, theta, tx, ty);
        let fill = image.data.iter().sum::<f32>() / image.data.len() as f32;
        image = warp_affine(&image, &affine, fill);
        faces = faces
            .into_iter()
            .filter_map(|f| {
                affine
                    .map_box(&f.bbox)
                    .clip(w, h)
                    .map(|bbox| FaceAnnotation { bbox, ..f })
            })
            .collect();
    }

    if toggles.color_jitter {
        let brightness = rng.random_range(-0.1f32..0.1);
        let contrast = rng.random_range(0.9f32..1.1);
        let gains: [f32; 3] = core::array::from_fn(|_| rng.random_range(0.95f32..1.05));
        let plane = image.plane_len();
        for (i, v) in image.data.iter_mut().enumerate() {
            let c = i / plane;
            *v = (((*v - 0.5) * contrast + 0.5) * gains[c] + brightness).clamp(0.0, 1.0);
        }
    }

    if toggles.blur && rng.random_bool(0.5) {
        image = box_blur(&image);
    }

    Scene {
        image,
        faces,
        source: scene.source.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::generate_scene;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bx(x1: f32, y1: f32, x2: f32, y2: f32) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn blank_with_face(side: usize, b: BBox) -> Scene {
        Scene {
            image: Image::filled(3, side, side, 0.5),
            faces: alloc::vec![FaceAnnotation {
                bbox: b,
                age: Some(40),
                gender: None
            }],
            source: "t".into(),
        }
    }

    #[test]
    fn one_tile_is_a_resize() {
        let s = blank_with_face(96, bx(10.0, 20.0, 40.0, 60.0));
        let cfg = TilingConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = tile_scenes(&cfg, &[&s], 1, 192, &mut rng).unwrap();
        assert_eq!(t.faces[0].bbox, bx(20.0, 40.0, 80.0, 120.0));
        assert_eq!((t.image.height, t.image.width), (192, 192));
    }

    #[test]
    fn four_tiles_top_left_box() {
        let s = blank_with_face(480, bx(100.0, 100.0, 200.0, 200.0));
        let t = tile_with_assignment(&[&s], &[0, 0, 0, 0], 480).unwrap();
        assert_eq!(t.faces.len(), 4);
        assert_eq!(t.faces[0].bbox, bx(50.0, 50.0, 100.0, 100.0));
        assert_eq!(t.faces[3].bbox, bx(290.0, 290.0, 340.0, 340.0));
        assert!(t.faces.iter().all(|f| f.age == Some(40)));
    }

    #[test]
    fn nine_tiles_use_at_most_four_sources() {
        let scenes: Vec<Scene> = (0..4)
            .map(|i| generate_scene(i, 1, 96, (0.4, 0.5)).unwrap())
            .collect();
        let refs: Vec<&Scene> = scenes.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = tile_scenes(&TilingConfig::default(), &refs, 9, 192, &mut rng).unwrap();
        assert_eq!(t.faces.len(), 9);
        let mut ages: Vec<_> = t.faces.iter().map(|f| (f.age, f.gender)).collect();
        ages.sort_by_key(|a| a.0);
        ages.dedup();
        assert!(ages.len() <= 4);
        for a in &ages {
            assert!(scenes
                .iter()
                .any(|s| (s.faces[0].age, s.faces[0].gender) == *a));
        }
        let five: Vec<&Scene> = (0..5).map(|i| &scenes[i % 4]).collect();
        assert!(tile_scenes(&TilingConfig::default(), &five, 9, 192, &mut rng).is_err());
    }

    #[test]
    fn non_square_counts_rejected() {
        let s = blank_with_face(96, bx(10.0, 20.0, 40.0, 60.0));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = TilingConfig {
            allowed_tile_counts: alloc::vec![1, 3, 4],
            ..Default::default()
        };
        assert_eq!(cfg.validate(), Err(Error::TileCount(3)));
        assert_eq!(
            tile_scenes(&cfg, &[&s], 3, 96, &mut rng),
            Err(Error::TileCount(3))
        );
        assert_eq!(
            tile_with_assignment(&[&s], &[0, 0], 96),
            Err(Error::TileCount(2))
        );
    }

    #[test]
    fn detection_only_mix_rates() {
        let pool = DatasetManifest::new(
            "det",
            alloc::vec![generate_scene(1, 3, 96, (0.2, 0.25)).unwrap()],
        );
        let labelled =
            || (0..1000u64).map(|i| blank_with_face(64, bx(1.0, 1.0, 10.0, 10.0 + (i % 5) as f32)));

        let none: Vec<Scene> =
            mix_detection_only(labelled(), &pool, 0.0, ChaCha8Rng::seed_from_u64(1)).collect();
        assert!(none.iter().zip(labelled()).all(|(a, b)| *a == b));

        let all: Vec<Scene> =
            mix_detection_only(labelled(), &pool, 1.0, ChaCha8Rng::seed_from_u64(1)).collect();
        assert!(all.iter().all(|s| s.faces.len() == 3
            && s.faces
                .iter()
                .all(|f| f.age.is_none() && f.gender.is_none())));

        let half = mix_detection_only(labelled(), &pool, 0.5, ChaCha8Rng::seed_from_u64(9))
            .filter(|s| s.faces.len() == 3)
            .count() as f64;
        let sigma = libm::sqrt(1000.0 * 0.25);
        assert!((half - 500.0).abs() < 3.0 * sigma, "{half}");
    }

    #[test]
    fn augment_identity_and_flip() {
        let s = generate_scene(2, 2, 96, (0.2, 0.3)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(default_augment(&s, &mut rng, &AugmentToggles::default()), s);
        assert_eq!(
            flip_box(&bx(10.0, 0.0, 20.0, 10.0), 100.0),
            bx(80.0, 0.0, 90.0, 10.0)
        );
        let rot0 = Affine::about(48.0, 48.0, 1.0, 0.0, 0.0, 0.0);
        let warped = warp_affine(&s.image, &rot0, 0.0);
        assert!(warped
            .data
            .iter()
            .zip(&s.image.data)
            .all(|(a, b)| (a - b).abs() < 1e-5));
        assert_eq!(rot0.map_box(&s.faces[0].bbox), s.faces[0].bbox);
    }

    #[test]
    fn augment_is_deterministic_and_drops_lost_faces() {
        let s = generate_scene(5, 3, 96, (0.2, 0.3)).unwrap();
        let t = AugmentToggles::all();
        let a = default_augment(&s, &mut ChaCha8Rng::seed_from_u64(4), &t);
        let b = default_augment(&s, &mut ChaCha8Rng::seed_from_u64(4), &t);
        assert_eq!(a, b);
        for f in &a.faces {
            assert!(f.bbox.is_valid() && f.bbox.x1 >= 0.0 && f.bbox.x2 <= 96.0);
        }
        let shift = Affine::about(0.0, 0.0, 1.0, 0.0, 200.0, 0.0);
        assert!(shift.map_box(&s.faces[0].bbox).clip(96.0, 96.0).is_none());
    }

    #[test]
    fn affine_inverse_round_trip() {
        let a = Affine::about(30.0, 40.0, 1.1, 0.2, 3.0, -2.0);
        let inv = a.inverse().unwrap();
        let (x, y) = a.apply(12.0, 7.0);
        let (u, v) = inv.apply(x, y);
        assert!((u - 12.0).abs() < 1e-4 && (v - 7.0).abs() < 1e-4);
    }
}
