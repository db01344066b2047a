//! Box arithmetic, IOU matching and the bilinear sampling grids behind both
//! the facial cropping connection and the intermediate feature connection.
//!
//! Boxes use pixel coordinates with x to the right and y down. The high
//! edges are exclusive, so pixel `(i, j)` covers `[i, i + 1) x [j, j + 1)`
//! and its center sits at `(i + 0.5, j + 0.5)`.

use alloc::vec::Vec;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor3};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
}

impl BBox {
    pub fn new(x1: f32, y1: f32, x2: f32, y2: f32) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(Error::InvalidBox { x1, y1, x2, y2 })
        }
    }

    pub fn is_valid(&self) -> bool {
        self.x1.is_finite()
            && self.y1.is_finite()
            && self.x2.is_finite()
            && self.y2.is_finite()
            && self.x1 < self.x2
            && self.y1 < self.y2
    }

    #[inline]
    pub fn width(&self) -> f32 {
        self.x2 - self.x1
    }

    #[inline]
    pub fn height(&self) -> f32 {
        self.y2 - self.y1
    }

    #[inline]
    pub fn area(&self) -> f32 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f32, f32) {
        ((self.x1 + self.x2) * 0.5, (self.y1 + self.y2) * 0.5)
    }

    /// Maps the box through `p -> p * scale + offset` per axis.
    pub fn transform(&self, sx: f32, sy: f32, dx: f32, dy: f32) -> Self {
        Self {
            x1: self.x1 * sx + dx,
            y1: self.y1 * sy + dy,
            x2: self.x2 * sx + dx,
            y2: self.y2 * sy + dy,
        }
    }

    /// Intersection with `[0, width] x [0, height]`, or `None` when empty.
    pub fn clip(&self, width: f32, height: f32) -> Option<Self> {
        let b = Self {
            x1: self.x1.max(0.0),
            y1: self.y1.max(0.0),
            x2: self.x2.min(width),
            y2: self.y2.min(height),
        };
        b.is_valid().then_some(b)
    }

    pub fn contains(&self, other: &BBox) -> bool {
        self.x1 <= other.x1 && self.y1 <= other.y1 && self.x2 >= other.x2 && self.y2 >= other.y2
    }

    pub fn intersects(&self, other: &BBox) -> bool {
        self.x1 < other.x2 && other.x1 < self.x2 && self.y1 < other.y2 && other.y1 < self.y2
    }

    /// Integer pixel span `(x0, y0, x1, y1)` (exclusive high edges) obtained by
    /// rounding each edge to the nearest pixel boundary and clamping into the
    /// image. Always at least one pixel wide and tall for boxes that
    /// intersect the image.
    pub fn pixel_span(
        &self,
        image_w: usize,
        image_h: usize,
    ) -> Option<(usize, usize, usize, usize)> {
        let round_axis = |lo: f32, hi: f32, size: usize| -> Option<(usize, usize)> {
            if size == 0 {
                return None;
            }
            let mut a = Float::round(lo).max(0.0) as i64;
            let mut b = Float::round(hi).min(size as f32) as i64;
            a = a.min(size as i64 - 1);
            if b <= a {
                b = a + 1;
            }
            if b > size as i64 {
                return None;
            }
            Some((a as usize, b as usize))
        };
        if self.x2 <= 0.0
            || self.y2 <= 0.0
            || self.x1 >= image_w as f32
            || self.y1 >= image_h as f32
        {
            return None;
        }
        let (x0, x1) = round_axis(self.x1, self.x2, image_w)?;
        let (y0, y1) = round_axis(self.y1, self.y2, image_h)?;
        Some((x0, y0, x1, y1))
    }
}

/// A predicted face box with its detector confidence.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub confidence: f32,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub pred_index: usize,
    /// Best-overlapping ground-truth box; lowest index wins ties.
    pub matched_gt_index: Option<usize>,
    pub max_iou: f32,
    /// `max_iou > th_iou`.
    pub included: bool,
}

pub fn iou(a: &BBox, b: &BBox) -> f32 {
    let iw = (a.x2.min(b.x2) as f64 - a.x1.max(b.x1) as f64).max(0.0);
    let ih = (a.y2.min(b.y2) as f64 - a.y1.max(b.y1) as f64).max(0.0);
    let inter = iw * ih;
    let area_a = (a.x2 as f64 - a.x1 as f64) * (a.y2 as f64 - a.y1 as f64);
    let area_b = (b.x2 as f64 - b.x1 as f64) * (b.y2 as f64 - b.y1 as f64);
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        return 0.0;
    }
    ((inter / union) as f32).clamp(0.0, 1.0)
}

/// Grows the box by `top_frac * height` upwards and `other_frac` of the
/// width/height on the remaining three sides, then clips to the image.
pub fn expand_with_margins(
    bbox: &BBox,
    top_frac: f32,
    other_frac: f32,
    image_w: f32,
    image_h: f32,
) -> BBox {
    let w = bbox.width();
    let h = bbox.height();
    let grown = BBox {
        x1: bbox.x1 - other_frac * w,
        y1: bbox.y1 - top_frac * h,
        x2: bbox.x2 + other_frac * w,
        y2: bbox.y2 + other_frac * h,
    };
    // The source box intersects the image, so the clipped result is non-empty.
    grown.clip(image_w, image_h).unwrap_or(grown)
}

pub fn match_predictions(preds: &[Detection], gts: &[BBox], th_iou: f32) -> Vec<MatchResult> {
    preds
        .iter()
        .enumerate()
        .map(|(pred_index, pred)| {
            let mut best: Option<(usize, f32)> = None;
            for (gi, gt) in gts.iter().enumerate() {
                let v = iou(&pred.bbox, gt);
                if best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((gi, v));
                }
            }
            let max_iou = best.map_or(0.0, |(_, v)| v);
            MatchResult {
                pred_index,
                matched_gt_index: best.map(|(i, _)| i),
                max_iou,
                included: best.is_some() && max_iou > th_iou,
            }
        })
        .collect()
}

/// Side length of the receptive field of `n_layers` stacked stride-1 3x3
/// convolutions.
pub fn receptive_field(n_layers: usize) -> usize {
    2 * n_layers + 1
}

/// Four-tap bilinear stencil for one output location: source indices in
/// `[top-left, top-right, bottom-left, bottom-right]` order and the
/// fractional position between them.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tap {
    pub idx: [u32; 4],
    pub fx: f64,
    pub fy: f64,
}

impl Tap {
    pub fn weights(&self) -> [f64; 4] {
        let (fx, fy) = (self.fx, self.fy);
        [
            (1.0 - fy) * (1.0 - fx),
            (1.0 - fy) * fx,
            fy * (1.0 - fx),
            fy * fx,
        ]
    }
}

/// A fixed linear resampling map from a `src_h x src_w` plane to an
/// `out_h x out_w` plane, shared by every channel. Being linear in the
/// source values, it is differentiable with respect to them; the sample
/// positions themselves carry no gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleGrid {
    pub src_h: usize,
    pub src_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub taps: Vec<Tap>,
}

#[derive(Clone, Copy)]
struct AxisTap {
    i0: usize,
    i1: usize,
    frac: f64,
}

/// Samples `out` points spread evenly over the continuous span `[lo, hi)`,
/// each at the center of its sub-interval, with source indices clamped to
/// `[min_idx, max_idx]`.
fn axis_taps(lo: f64, hi: f64, out: usize, min_idx: usize, max_idx: usize) -> Vec<AxisTap> {
    let step = (hi - lo) / out as f64;
    (0..out)
        .map(|j| {
            let s = (lo + (j as f64 + 0.5) * step - 0.5).clamp(min_idx as f64, max_idx as f64);
            let i0 = Float::floor(s) as usize;
            let frac = s - i0 as f64;
            let i1 = (i0 + 1).min(max_idx);
            AxisTap { i0, i1, frac }
        })
        .collect()
}

impl SampleGrid {
    fn from_axes(src_h: usize, src_w: usize, ys: &[AxisTap], xs: &[AxisTap]) -> Self {
        let mut taps = Vec::with_capacity(ys.len() * xs.len());
        for y in ys {
            for x in xs {
                let r0 = y.i0 * src_w;
                let r1 = y.i1 * src_w;
                taps.push(Tap {
                    idx: [
                        (r0 + x.i0) as u32,
                        (r0 + x.i1) as u32,
                        (r1 + x.i0) as u32,
                        (r1 + x.i1) as u32,
                    ],
                    fx: x.frac,
                    fy: y.frac,
                });
            }
        }
        Self {
            src_h,
            src_w,
            out_h: ys.len(),
            out_w: xs.len(),
            taps,
        }
    }

    /// Crop grid: `region` is rounded to whole pixels and clamped into the
    /// image, and interpolation never reads pixels outside the rounded region.
    pub fn crop(
        src_h: usize,
        src_w: usize,
        region: &BBox,
        out_h: usize,
        out_w: usize,
    ) -> Option<Self> {
        let (x0, y0, x1, y1) = region.pixel_span(src_w, src_h)?;
        let xs = axis_taps(x0 as f64, x1 as f64, out_w, x0, x1 - 1);
        let ys = axis_taps(y0 as f64, y1 as f64, out_h, y0, y1 - 1);
        Some(Self::from_axes(src_h, src_w, &ys, &xs))
    }

    /// Whole-plane resize.
    pub fn resize(src_h: usize, src_w: usize, out_h: usize, out_w: usize) -> Self {
        let xs = axis_taps(0.0, src_w as f64, out_w, 0, src_w - 1);
        let ys = axis_taps(0.0, src_h as f64, out_h, 0, src_h - 1);
        Self::from_axes(src_h, src_w, &ys, &xs)
    }

    /// ROI grid over a feature map: `region` is in continuous feature
    /// coordinates and is not rounded; taps outside the map clamp to the
    /// border. `None` when the region misses the map entirely.
    pub fn roi(
        feat_h: usize,
        feat_w: usize,
        region: &BBox,
        out_h: usize,
        out_w: usize,
    ) -> Option<Self> {
        let extent = BBox {
            x1: 0.0,
            y1: 0.0,
            x2: feat_w as f32,
            y2: feat_h as f32,
        };
        if feat_h == 0 || feat_w == 0 || !region.is_valid() || !region.intersects(&extent) {
            return None;
        }
        let xs = axis_taps(region.x1 as f64, region.x2 as f64, out_w, 0, feat_w - 1);
        let ys = axis_taps(region.y1 as f64, region.y2 as f64, out_h, 0, feat_h - 1);
        Some(Self::from_axes(feat_h, feat_w, &ys, &xs))
    }

    pub fn apply<F: Real>(&self, src: &Tensor3<F>) -> Tensor3<F> {
        assert_eq!(
            (src.height, src.width),
            (self.src_h, self.src_w),
            "sample grid source shape"
        );
        let fracs: Vec<(F, F)> = self
            .taps
            .iter()
            .map(|t| (F::lit(t.fx), F::lit(t.fy)))
            .collect();
        let mut out = Tensor3::zeros(src.channels, self.out_h, self.out_w);
        let out_plane = self.out_h * self.out_w;
        for c in 0..src.channels {
            let s = src.plane(c);
            let o = &mut out.data[c * out_plane..(c + 1) * out_plane];
            // Lerp form keeps constant inputs exactly constant.
            for ((dst, tap), &(fx, fy)) in o.iter_mut().zip(&self.taps).zip(&fracs) {
                let v = tap.idx.map(|i| s[i as usize]);
                let top = v[0] + fx * (v[1] - v[0]);
                let bottom = v[2] + fx * (v[3] - v[2]);
                *dst = top + fy * (bottom - top);
            }
        }
        out
    }

    /// Adjoint of [`apply`](Self::apply): accumulates `grad_out` back onto
    /// the source planes.
    pub fn scatter_add<F: Real>(&self, channels: usize, grad_out: &[F], grad_src: &mut [F]) {
        let out_plane = self.out_h * self.out_w;
        let src_plane = self.src_h * self.src_w;
        for c in 0..channels {
            let go = &grad_out[c * out_plane..(c + 1) * out_plane];
            let gs = &mut grad_src[c * src_plane..(c + 1) * src_plane];
            for (g, tap) in go.iter().zip(&self.taps) {
                if *g == F::zero() {
                    continue;
                }
                let w = tap.weights();
                for q in 0..4 {
                    gs[tap.idx[q] as usize] += F::lit(w[q]) * *g;
                }
            }
        }
    }

    /// Source pixels read with non-zero weight.
    pub fn support(&self) -> Vec<bool> {
        let mut used = alloc::vec![false; self.src_h * self.src_w];
        for t in &self.taps {
            let w = t.weights();
            for q in 0..4 {
                if w[q] != 0.0 {
                    used[t.idx[q] as usize] = true;
                }
            }
        }
        used
    }
}

/// Bilinear crop of `region` (rounded to whole pixels) resized to
/// `out_h x out_w`.
pub fn crop_and_resize<F: Real>(
    image: &Tensor3<F>,
    region: &BBox,
    out_h: usize,
    out_w: usize,
) -> Option<Tensor3<F>> {
    SampleGrid::crop(image.height, image.width, region, out_h, out_w).map(|g| g.apply(image))
}

/// Affine ROI transform of a feature map onto an `out_h x out_w` grid.
/// A region that misses the map yields zeros.
pub fn roi_affine_sample<F: Real>(
    feature: &Tensor3<F>,
    region: &BBox,
    out_h: usize,
    out_w: usize,
) -> Tensor3<F> {
    match SampleGrid::roi(feature.height, feature.width, region, out_h, out_w) {
        Some(g) => g.apply(feature),
        None => Tensor3::zeros(feature.channels, out_h, out_w),
    }
}
