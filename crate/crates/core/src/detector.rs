//! Keypoint-heatmap face detector.
//!
//! Faces are encoded as Gaussian peaks on a stride-4 heatmap, with box size
//! and sub-cell center offset regressed at each peak. Decoding keeps local
//! maxima under 3x3 suppression and always returns exactly K regions.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, Detection};
use crate::losses::LossWeights;
use crate::nn::{Conv2d, ParamGroup, ParamStore, Tape, Var};
use crate::synth::Scene;
use crate::tensor::Real;

/// Output stride of every detector map.
pub const STRIDE: usize = 4;
/// Heatmap probabilities are clamped to `[HEAT_EPS, 1 - HEAT_EPS]` in the
/// focal loss.
pub const HEAT_EPS: f64 = 1e-4;
const FOCAL_ALPHA: i32 = 2;
const FOCAL_BETA: i32 = 4;
const MIN_OVERLAP: f64 = 0.7;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    pub input_h: usize,
    pub input_w: usize,
    pub stem_width: usize,
    pub mid_width: usize,
    /// Width of the stride-4 feature handed to the age network.
    pub branch_width: usize,
    pub deep_width: usize,
    pub head_width: usize,
}

impl DetectorConfig {
    pub fn desk() -> Self {
        Self {
            input_h: 96,
            input_w: 96,
            stem_width: 16,
            mid_width: 32,
            branch_width: 48,
            deep_width: 64,
            head_width: 32,
        }
    }

    pub fn paper() -> Self {
        Self {
            input_h: 480,
            input_w: 480,
            stem_width: 32,
            mid_width: 64,
            branch_width: 48,
            deep_width: 128,
            head_width: 64,
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.input_h / STRIDE, self.input_w / STRIDE)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.input_h.is_multiple_of(2 * STRIDE) || !self.input_w.is_multiple_of(2 * STRIDE) || self.input_h == 0
        {
            return Err(Error::Config(format!(
                "detector input {}x{} must be a positive multiple of {}",
                self.input_h,
                self.input_w,
                2 * STRIDE
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorNet {
    config: DetectorConfig,
    stem: Conv2d,
    down: Conv2d,
    branch: Conv2d,
    deep_down: Conv2d,
    deep: Conv2d,
    lateral: Conv2d,
    head: Conv2d,
    heat: Conv2d,
    size: Conv2d,
    offset: Conv2d,
}

/// Tape handles of one detector pass. `branch` is the stride-4 feature
/// taken before the upsampled skip is added.
#[derive(Clone, Copy, Debug)]
pub struct DetectorVars {
    pub heat_logits: Var,
    pub size: Var,
    pub offset: Var,
    pub branch: Var,
}

impl DetectorNet {
    pub fn build<F: Real, R: Rng>(
        config: &DetectorConfig,
        store: &mut ParamStore<F>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let g = ParamGroup::Detector;
        let c = config;
        Ok(Self {
            config: c.clone(),
            stem: Conv2d::new(store, "det.stem", g, 3, c.stem_width, 3, 2, rng),
            down: Conv2d::new(store, "det.down", g, c.stem_width, c.mid_width, 3, 2, rng),
            branch: Conv2d::new(
                store,
                "det.branch",
                g,
                c.mid_width,
                c.branch_width,
                3,
                1,
                rng,
            ),
            deep_down: Conv2d::new(
                store,
                "det.deep_down",
                g,
                c.branch_width,
                c.deep_width,
                3,
                2,
                rng,
            ),
            deep: Conv2d::new(store, "det.deep", g, c.deep_width, c.deep_width, 3, 1, rng),
            lateral: Conv2d::with_gain(
                store,
                "det.lateral",
                g,
                c.deep_width,
                c.branch_width,
                1,
                1,
                0.5,
                0.0,
                rng,
            ),
            head: Conv2d::new(
                store,
                "det.head",
                g,
                c.branch_width,
                c.head_width,
                3,
                1,
                rng,
            ),
            // Prior of 0.1 on every cell keeps the initial focal loss small.
            heat: Conv2d::with_gain(store, "det.heat", g, c.head_width, 1, 1, 1, 0.1, -2.19, rng),
            // Sizes are predicted in cells and scaled to pixels; start near
            // six cells.
            size: Conv2d::with_gain(store, "det.size", g, c.head_width, 2, 1, 1, 0.1, 6.0, rng),
            offset: Conv2d::with_gain(store, "det.offset", g, c.head_width, 2, 1, 1, 0.1, 0.5, rng),
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    /// `input` is the resized image, `3 x input_h x input_w`.
    pub fn forward<F: Real>(&self, tape: &mut Tape<'_, F>, input: Var) -> Result<DetectorVars> {
        let v = tape.value(input);
        if (v.channels, v.height, v.width) != (3, self.config.input_h, self.config.input_w) {
            return Err(Error::Shape {
                expected: format!(
                    "3x{}x{} detector input",
                    self.config.input_h, self.config.input_w
                ),
                actual: format!("{}x{}x{}", v.channels, v.height, v.width),
            });
        }
        let conv_relu = |tape: &mut Tape<'_, F>, x: Var, c: &Conv2d| {
            let y = tape.conv2d(x, c);
            tape.relu(y)
        };
        let x = conv_relu(tape, input, &self.stem);
        let x = conv_relu(tape, x, &self.down);
        let branch = conv_relu(tape, x, &self.branch);
        let d = conv_relu(tape, branch, &self.deep_down);
        let d = conv_relu(tape, d, &self.deep);
        let lat = tape.conv2d(d, &self.lateral);
        let up = tape.upsample2(lat);
        let fused = tape.add(branch, up);
        let fused = tape.relu(fused);
        let h = conv_relu(tape, fused, &self.head);
        let heat_logits = tape.conv2d(h, &self.heat);
        let size_cells = tape.conv2d(h, &self.size);
        let size = tape.scale(size_cells, STRIDE as f64);
        let offset = tape.conv2d(h, &self.offset);
        Ok(DetectorVars {
            heat_logits,
            size,
            offset,
            branch,
        })
    }

    pub fn output<F: Real>(&self, tape: &Tape<'_, F>, vars: &DetectorVars) -> DetectorOutput<F> {
        let (gh, gw) = self.config.grid();
        DetectorOutput::from_logits(
            gh,
            gw,
            &tape.value(vars.heat_logits).data,
            tape.value(vars.size).data.clone(),
            tape.value(vars.offset).data.clone(),
        )
    }
}

fn sigmoid<F: Real>(z: F) -> F {
    F::one() / (F::one() + (-z).exp())
}

/// Detector predictions on the stride-4 grid. `size_map` holds width then
/// height planes in input pixels; `offset_map` holds x then y sub-cell
/// offsets.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectorOutput<F> {
    pub grid_h: usize,
    pub grid_w: usize,
    pub heatmap: Vec<F>,
    pub size_map: Vec<F>,
    pub offset_map: Vec<F>,
}

impl<F: Real> DetectorOutput<F> {
    pub fn from_logits(
        grid_h: usize,
        grid_w: usize,
        logits: &[F],
        size_map: Vec<F>,
        offset_map: Vec<F>,
    ) -> Self {
        let n = grid_h * grid_w;
        assert_eq!(logits.len(), n, "heatmap size");
        assert_eq!(size_map.len(), 2 * n, "size map size");
        assert_eq!(offset_map.len(), 2 * n, "offset map size");
        Self {
            grid_h,
            grid_w,
            heatmap: logits.iter().map(|&z| sigmoid(z)).collect(),
            size_map,
            offset_map,
        }
    }
}

/// Supervision for one face, recorded at its center cell.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CenterTarget {
    pub cell: usize,
    /// Box width and height in input pixels.
    pub size: [f32; 2],
    /// Sub-cell center offset in `[0, 1)`.
    pub offset: [f32; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct KeypointTargets {
    pub grid_h: usize,
    pub grid_w: usize,
    pub heatmap: Vec<f32>,
    pub size_map: Vec<f32>,
    pub offset_map: Vec<f32>,
    pub center_mask: Vec<bool>,
    pub centers: Vec<CenterTarget>,
}

/// Gaussian radius (in cells) such that a box shifted by it still overlaps
/// the original with IOU at least 0.7.
pub fn gaussian_radius(height: f64, width: f64, min_overlap: f64) -> f64 {
    let (h, w, o) = (height, width, min_overlap);
    let b1 = h + w;
    let c1 = w * h * (1.0 - o) / (1.0 + o);
    let r1 = (b1 + libm::sqrt(b1 * b1 - 4.0 * c1)) / 2.0;
    let b2 = 2.0 * (h + w);
    let c2 = (1.0 - o) * w * h;
    let r2 = (b2 + libm::sqrt(b2 * b2 - 16.0 * c2)) / 2.0;
    let a3 = 4.0 * o;
    let b3 = -2.0 * o * (h + w);
    let c3 = (o - 1.0) * w * h;
    let r3 = (b3 + libm::sqrt(b3 * b3 - 4.0 * a3 * c3)) / 2.0;
    r1.min(r2).min(r3)
}

fn draw_gaussian(
    heatmap: &mut [f32],
    grid_h: usize,
    grid_w: usize,
    cx: usize,
    cy: usize,
    radius: usize,
) {
    let sigma = (2 * radius + 1) as f64 / 6.0;
    let r = radius as isize;
    for dy in -r..=r {
        for dx in -r..=r {
            let (x, y) = (cx as isize + dx, cy as isize + dy);
            if x < 0 || y < 0 || x >= grid_w as isize || y >= grid_h as isize {
                continue;
            }
            let g = libm::exp(-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)) as f32;
            let cell = &mut heatmap[y as usize * grid_w + x as usize];
            *cell = cell.max(g);
        }
    }
}

/// Encodes boxes already expressed in detector-input pixels.
pub fn encode_boxes(boxes: &[BBox], input_w: usize, input_h: usize) -> KeypointTargets {
    let (gh, gw) = (input_h / STRIDE, input_w / STRIDE);
    let n = gh * gw;
    let mut t = KeypointTargets {
        grid_h: gh,
        grid_w: gw,
        heatmap: vec![0.0; n],
        size_map: vec![0.0; 2 * n],
        offset_map: vec![0.0; 2 * n],
        center_mask: vec![false; n],
        centers: Vec::with_capacity(boxes.len()),
    };
    let s = STRIDE as f32;
    for b in boxes {
        let (cx, cy) = b.center();
        let (ux, uy) = (cx / s, cy / s);
        let ix = (libm::floorf(ux).max(0.0) as usize).min(gw - 1);
        let iy = (libm::floorf(uy).max(0.0) as usize).min(gh - 1);
        let offset = [
            (ux - ix as f32).clamp(0.0, 0.999_999),
            (uy - iy as f32).clamp(0.0, 0.999_999),
        ];
        let size = [b.width(), b.height()];
        let radius =
            gaussian_radius((b.height() / s) as f64, (b.width() / s) as f64, MIN_OVERLAP).max(0.0);
        draw_gaussian(&mut t.heatmap, gh, gw, ix, iy, radius as usize);
        let cell = iy * gw + ix;
        // The center cell is exactly 1 even if a neighbour's tail is wider.
        t.heatmap[cell] = 1.0;
        t.center_mask[cell] = true;
        t.size_map[cell] = size[0];
        t.size_map[n + cell] = size[1];
        t.offset_map[cell] = offset[0];
        t.offset_map[n + cell] = offset[1];
        t.centers.push(CenterTarget { cell, size, offset });
    }
    t
}

/// Encodes a scene's faces for a detector that sees the scene resized to
/// `input_w x input_h`.
pub fn encode_targets(scene: &Scene, input_w: usize, input_h: usize) -> KeypointTargets {
    let sx = input_w as f32 / scene.image.width as f32;
    let sy = input_h as f32 / scene.image.height as f32;
    let boxes: Vec<BBox> = scene
        .faces
        .iter()
        .map(|f| f.bbox.transform(sx, sy, 0.0, 0.0))
        .collect();
    encode_boxes(&boxes, input_w, input_h)
}

/// The `k` most probable face regions, in input pixels, by non-increasing
/// confidence. Cells that are not 3x3 local maxima score zero, so when
/// there are fewer than `k` peaks the tail is filled with zero-confidence
/// regions.
pub fn decode_topk<F: Real>(
    out: &DetectorOutput<F>,
    k: usize,
    input_w: usize,
    input_h: usize,
) -> Vec<Detection> {
    let (gh, gw) = (out.grid_h, out.grid_w);
    let n = gh * gw;
    let heat = &out.heatmap;
    let mut scored: Vec<(f32, usize)> = (0..n)
        .map(|i| {
            let (y, x) = (i / gw, i % gw);
            let v = heat[i];
            let mut peak = true;
            'outer: for ny in y.saturating_sub(1)..=(y + 1).min(gh - 1) {
                for nx in x.saturating_sub(1)..=(x + 1).min(gw - 1) {
                    if heat[ny * gw + nx] > v {
                        peak = false;
                        break 'outer;
                    }
                }
            }
            let score = if peak { v.as_f64() as f32 } else { 0.0 };
            (score, i)
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let s = STRIDE as f32;
    let (iw, ih) = (input_w as f32, input_h as f32);
    scored
        .into_iter()
        .take(k)
        .map(|(score, i)| {
            let (y, x) = ((i / gw) as f32, (i % gw) as f32);
            let cx = (x + out.offset_map[i].as_f64() as f32) * s;
            let cy = (y + out.offset_map[n + i].as_f64() as f32) * s;
            let w = (out.size_map[i].as_f64() as f32).max(1.0);
            let h = (out.size_map[n + i].as_f64() as f32).max(1.0);
            let raw = BBox {
                x1: cx - w / 2.0,
                y1: cy - h / 2.0,
                x2: cx + w / 2.0,
                y2: cy + h / 2.0,
            };
            let bbox = raw.clip(iw, ih).unwrap_or_else(|| {
                // Center pushed off the image by the offset head: fall back
                // to a one-pixel box at the clamped center.
                let px = cx.clamp(0.0, iw - 1.0);
                let py = cy.clamp(0.0, ih - 1.0);
                BBox {
                    x1: px,
                    y1: py,
                    x2: px + 1.0,
                    y2: py + 1.0,
                }
            });
            Detection {
                bbox,
                confidence: score.clamp(0.0, 1.0),
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectionLoss<F> {
    pub total: F,
    pub reg: F,
    pub size: F,
    pub offset: F,
    /// Gradients of `total` with respect to the post-sigmoid heatmap and
    /// the raw size and offset maps.
    pub d_heatmap: Vec<F>,
    pub d_size: Vec<F>,
    pub d_offset: Vec<F>,
}

/// `L_det = L_reg + lambda_size * L_size + lambda_off * L_off`.
pub fn combine_detection_loss<F: Real>(reg: F, size: F, offset: F, w: &LossWeights) -> F {
    reg + F::lit(w.lambda_size) * size + F::lit(w.lambda_off) * offset
}

fn signum<F: Real>(v: F) -> F {
    if v > F::zero() {
        F::one()
    } else if v < F::zero() {
        -F::one()
    } else {
        F::zero()
    }
}

/// Penalty-reduced focal loss on the heatmap plus L1 size and offset losses
/// at the face centers, each normalized by the face count.
pub fn detection_loss<F: Real>(
    pred: &DetectorOutput<F>,
    gt: &KeypointTargets,
    w: &LossWeights,
) -> DetectionLoss<F> {
    assert_eq!(
        (pred.grid_h, pred.grid_w),
        (gt.grid_h, gt.grid_w),
        "detector map shapes"
    );
    let n = gt.grid_h * gt.grid_w;
    let faces = gt.centers.len();
    let norm = F::one() / F::lit(faces.max(1) as f64);
    let (lo, hi) = (F::lit(HEAT_EPS), F::lit(1.0 - HEAT_EPS));
    let mut reg = F::zero();
    let mut d_heatmap = vec![F::zero(); n];
    for i in 0..n {
        let raw = pred.heatmap[i];
        let p = raw.max(lo).min(hi);
        let inside = raw > lo && raw < hi;
        let y = gt.heatmap[i];
        let (l, d) = if y == 1.0 {
            let q = F::one() - p;
            let l = -q.powi(FOCAL_ALPHA) * p.ln();
            let d = F::lit(2.0) * q * p.ln() - q * q / p;
            (l, d)
        } else {
            let wneg = F::lit(libm::pow(1.0 - y as f64, FOCAL_BETA as f64));
            let q = F::one() - p;
            let l = -wneg * p.powi(FOCAL_ALPHA) * q.ln();
            let d = -wneg * (F::lit(2.0) * p * q.ln() - p * p / q);
            (l, d)
        };
        reg += l;
        if inside {
            d_heatmap[i] = d * norm;
        }
    }
    reg *= norm;

    let mut size = F::zero();
    let mut offset = F::zero();
    let mut d_size = vec![F::zero(); 2 * n];
    let mut d_offset = vec![F::zero(); 2 * n];
    let (ls, lo_w) = (F::lit(w.lambda_size), F::lit(w.lambda_off));
    for c in &gt.centers {
        for axis in 0..2 {
            let j = axis * n + c.cell;
            let ds = pred.size_map[j] - F::lit(c.size[axis] as f64);
            size += ds.abs();
            d_size[j] += ls * norm * signum(ds);
            let doff = pred.offset_map[j] - F::lit(c.offset[axis] as f64);
            offset += doff.abs();
            d_offset[j] += lo_w * norm * signum(doff);
        }
    }
    size *= norm;
    offset *= norm;
    DetectionLoss {
        total: combine_detection_loss(reg, size, offset, w),
        reg,
        size,
        offset,
        d_heatmap,
        d_size,
        d_offset,
    }
}

/// Chains a post-sigmoid heatmap gradient back to the logits.
pub fn heatmap_logit_grad<F: Real>(heatmap: &[F], d_heatmap: &[F]) -> Vec<F> {
    heatmap
        .iter()
        .zip(d_heatmap)
        .map(|(&p, &g)| g * p * (F::one() - p))
        .collect()
}
