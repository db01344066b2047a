//! Training objective: mean-variance plus cross-entropy age loss, binary
//! cross-entropy gender loss, IOU/annotation masking and the total loss.
//!
//! Every loss that feeds the optimizer is paired with its analytic gradient
//! with respect to the pre-softmax logits.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::age_estimator::{
    softmax, AgeDistribution, Gender, GenderDistribution, MAX_AGE, NUM_AGES,
};
use crate::error::{Error, Result};
use crate::geometry::{match_predictions, BBox, Detection};
use crate::synth::FaceAnnotation;
use crate::tensor::Real;

/// Clamp applied to probabilities inside logarithms.
pub const PROB_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_size: f64,
    pub lambda_off: f64,
    pub lambda_mean: f64,
    pub lambda_var: f64,
    pub lambda_ce: f64,
    pub lambda_gen: f64,
    pub th_iou: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_size: 0.1,
            lambda_off: 1.0,
            lambda_mean: 0.01,
            lambda_var: 0.0025,
            lambda_ce: 0.05,
            lambda_gen: 0.1,
            th_iou: 0.3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let l = [
            self.lambda_size,
            self.lambda_off,
            self.lambda_mean,
            self.lambda_var,
            self.lambda_ce,
            self.lambda_gen,
        ];
        if l.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config(
                "loss weights must be finite and non-negative".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.th_iou) {
            return Err(Error::Config("th_iou must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// `(L_mean, L_var)` with `m = sum i p_i`, `L_mean = (m - y)^2 / 2` and
/// `L_var = sum p_i (i - m)^2`.
pub fn mean_variance_loss<F: Real>(p: &AgeDistribution<F>, y: u8) -> (F, F) {
    let m = p.expected_age();
    let d = m - F::lit(y as f64);
    let mean = d * d / F::lit(2.0);
    let var = p.probs.iter().enumerate().fold(F::zero(), |acc, (i, &pi)| {
        let e = F::lit(i as f64) - m;
        acc + pi * e * e
    });
    (mean, var)
}

fn clamped_neg_log<F: Real>(p: F) -> F {
    -(p.max(F::lit(PROB_EPS))).ln()
}

/// `lambda_mean * L_mean + lambda_var * L_var + lambda_ce * L_ce` with
/// `L_ce = -ln(max(p_y, eps))`.
pub fn age_single_loss<F: Real>(p: &AgeDistribution<F>, y: u8, w: &LossWeights) -> F {
    let (mean, var) = mean_variance_loss(p, y);
    let ce = clamped_neg_log(p.probs[y as usize]);
    F::lit(w.lambda_mean) * mean + F::lit(w.lambda_var) * var + F::lit(w.lambda_ce) * ce
}

/// [`age_single_loss`] of `softmax(logits)` and its gradient with respect
/// to `logits`.
pub fn age_single_loss_logits<F: Real>(logits: &[F], y: u8, w: &LossWeights) -> (F, Vec<F>) {
    assert_eq!(logits.len(), NUM_AGES, "age logits");
    assert!(y <= MAX_AGE, "age label out of range");
    let p = AgeDistribution {
        probs: softmax(logits),
    };
    let loss = age_single_loss(&p, y, w);
    let m = p.expected_age();
    let yf = F::lit(y as f64);
    let (lm, lv, lc) = (
        F::lit(w.lambda_mean),
        F::lit(w.lambda_var),
        F::lit(w.lambda_ce),
    );
    // dL/dp_i; the variance term uses L_var = sum p_i i^2 - m^2.
    let dl_dp: Vec<F> = (0..NUM_AGES)
        .map(|i| {
            let fi = F::lit(i as f64);
            let mut g = lm * (m - yf) * fi + lv * (fi * fi - F::lit(2.0) * m * fi);
            if i == y as usize && p.probs[i] > F::lit(PROB_EPS) {
                g -= lc / p.probs[i];
            }
            g
        })
        .collect();
    (loss, softmax_backward(&p.probs, &dl_dp))
}

/// Chain rule through softmax: `dz_j = p_j (g_j - sum_i p_i g_i)`.
fn softmax_backward<F: Real>(p: &[F], dl_dp: &[F]) -> Vec<F> {
    let dot = p
        .iter()
        .zip(dl_dp)
        .fold(F::zero(), |a, (&pi, &gi)| a + pi * gi);
    p.iter()
        .zip(dl_dp)
        .map(|(&pi, &gi)| pi * (gi - dot))
        .collect()
}

/// Binary cross-entropy on the male-class probability, equivalently the
/// two-class cross-entropy `-ln(max(p_truth, eps))`.
pub fn gender_bce<F: Real>(g: &GenderDistribution<F>, truth: Gender) -> F {
    clamped_neg_log(g.probs[truth.index()])
}

pub fn gender_bce_logits<F: Real>(logits: &[F], truth: Gender) -> (F, Vec<F>) {
    let p = softmax(logits);
    let t = truth.index();
    let loss = clamped_neg_log(p[t]);
    let mut dl_dp = vec![F::zero(); 2];
    if p[t] > F::lit(PROB_EPS) {
        dl_dp[t] = -F::one() / p[t];
    }
    (loss, softmax_backward(&p, &dl_dp))
}

/// Network outputs for one of the K cropped regions of an image.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotPrediction<F> {
    pub detection: Detection,
    pub age_logits: Vec<F>,
    pub gender_logits: Vec<F>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageSupervision<F> {
    pub faces: Vec<FaceAnnotation>,
    pub slots: Vec<SlotPrediction<F>>,
}

/// A batch of `B` images with up to `K` prediction slots each.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct BatchAgeSupervision<F> {
    pub images: Vec<ImageSupervision<F>>,
}

/// A normalized masked loss, the number of unmasked terms, and per-slot
/// logit gradients (`None` for masked slots).
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedLoss<F> {
    pub value: F,
    pub count: usize,
    pub slot_grads: Vec<Vec<Option<Vec<F>>>>,
}

impl<F: Real> MaskedLoss<F> {
    fn empty(sup: &BatchAgeSupervision<F>) -> Self {
        Self {
            value: F::zero(),
            count: 0,
            slot_grads: sup
                .images
                .iter()
                .map(|im| vec![None; im.slots.len()])
                .collect(),
        }
    }
}

/// For each slot, the ground-truth face it counts against, or `None` when
/// its best IOU does not exceed `th_iou`.
fn matched_faces<F: Real>(img: &ImageSupervision<F>, th_iou: f64) -> Vec<Option<usize>> {
    let dets: Vec<Detection> = img.slots.iter().map(|s| s.detection).collect();
    let gts: Vec<BBox> = img.faces.iter().map(|f| f.bbox).collect();
    match_predictions(&dets, &gts, th_iou as f32)
        .into_iter()
        .map(|m| if m.included { m.matched_gt_index } else { None })
        .collect()
}

fn masked_loss<F: Real>(
    sup: &BatchAgeSupervision<F>,
    w: &LossWeights,
    scale: F,
    term: impl Fn(&SlotPrediction<F>, &FaceAnnotation) -> Option<(F, Vec<F>)>,
) -> MaskedLoss<F> {
    let mut out = MaskedLoss::empty(sup);
    let mut sum = F::zero();
    for (bi, img) in sup.images.iter().enumerate() {
        for (k, face) in matched_faces(img, w.th_iou).into_iter().enumerate() {
            let Some(face) = face else { continue };
            if let Some((l, g)) = term(&img.slots[k], &img.faces[face]) {
                sum += l;
                out.count += 1;
                out.slot_grads[bi][k] = Some(g);
            }
        }
    }
    if out.count == 0 {
        return out;
    }
    let norm = scale / F::lit(out.count as f64);
    out.value = sum * norm;
    for g in out.slot_grads.iter_mut().flatten().flatten() {
        for v in g.iter_mut() {
            *v *= norm;
        }
    }
    out
}

/// `L_age = (1 / N_a) sum_b sum_k b_iou b_age L_age_single`. Zero when every
/// term is masked.
pub fn masked_age_loss<F: Real>(sup: &BatchAgeSupervision<F>, w: &LossWeights) -> MaskedLoss<F> {
    masked_loss(sup, w, F::one(), |slot, face| {
        face.age
            .map(|a| age_single_loss_logits(&slot.age_logits, a, w))
    })
}

/// `L_gen = (lambda_gen / N_g) sum_b sum_k b_iou b_gen L_bce`.
pub fn masked_gender_loss<F: Real>(sup: &BatchAgeSupervision<F>, w: &LossWeights) -> MaskedLoss<F> {
    masked_loss(sup, w, F::lit(w.lambda_gen), |slot, face| {
        face.gender
            .map(|g| gender_bce_logits(&slot.gender_logits, g))
    })
}

pub fn total_loss<F: Real>(l_det: F, l_age: F, l_gen: F) -> F {
    l_det + l_age + l_gen
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn two_point(a: usize, b: usize) -> AgeDistribution<f64> {
        let mut p = vec![0.0; NUM_AGES];
        p[a] = 0.5;
        p[b] = 0.5;
        AgeDistribution::new(p).unwrap()
    }

    #[test]
    fn mean_variance_examples() {
        assert_eq!(
            mean_variance_loss(&AgeDistribution::<f64>::one_hot(42), 42),
            (0.0, 0.0)
        );
        assert_eq!(mean_variance_loss(&two_point(20, 30), 25), (0.0, 25.0));
        assert_eq!(
            mean_variance_loss(&AgeDistribution::<f64>::one_hot(20), 30),
            (50.0, 0.0)
        );
    }

    #[test]
    fn age_single_examples() {
        let w = LossWeights::default();
        assert!(age_single_loss(&AgeDistribution::<f64>::one_hot(61), 61, &w).abs() < 1e-12);
        let expect = 0.0025 * 25.0 + 0.05 * (1.0 / PROB_EPS).ln();
        assert!((age_single_loss(&two_point(20, 30), 25, &w) - expect).abs() < 1e-9);
        // Variance of the uniform distribution over 0..=100 is 850.
        let expect = 0.0025 * 850.0 + 0.05 * (101.0f64).ln();
        let got = age_single_loss(&AgeDistribution::<f64>::uniform(), 50, &w);
        assert!((got - expect).abs() < 1e-9);
        assert!((got - 2.355756).abs() < 1e-6);
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights {
            th_iou: 1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(LossWeights {
            lambda_ce: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn total_loss_sums() {
        assert_eq!(total_loss(0.0, 0.0, 0.0), 0.0);
        assert!((total_loss(1.7, 0.5, 0.07) - 2.27f64).abs() < 1e-12);
    }

    #[test]
    fn variance_is_nonnegative_and_zero_only_for_one_hot() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let logits: Vec<f64> = (0..NUM_AGES).map(|_| rng.random::<f64>() * 10.0).collect();
            let (_, v) = mean_variance_loss(&AgeDistribution::from_logits(&logits), 0);
            assert!(v > 0.0);
        }
        for a in [0u8, 17, 100] {
            assert_eq!(
                mean_variance_loss(&AgeDistribution::<f64>::one_hot(a), 3).1,
                0.0
            );
        }
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn age_single_logit_gradient_matches_finite_differences() {
        let w = LossWeights::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..5 {
            let logits: Vec<f64> = (0..NUM_AGES)
                .map(|_| rng.random::<f64>() * 3.0 - 1.5)
                .collect();
            let y = (trial * 23) as u8;
            let (_, g) = age_single_loss_logits(&logits, y, &w);
            for j in 0..NUM_AGES {
                let f = |d: f64| {
                    let mut l = logits.clone();
                    l[j] += d;
                    age_single_loss_logits(&l, y, &w).0
                };
                let fd = (f(1e-6) - f(-1e-6)) / 2e-6;
                assert!(
                    rel_err(fd, g[j]) < 1e-3 || (fd - g[j]).abs() < 1e-9,
                    "logit {j}: {fd} vs {}",
                    g[j]
                );
            }
        }
    }

    #[test]
    fn gender_examples_and_gradient() {
        let half = GenderDistribution {
            probs: [0.5f64, 0.5],
        };
        assert!((gender_bce(&half, Gender::Male) - 2f64.ln()).abs() < 1e-12);
        let sure = GenderDistribution {
            probs: [0.0f64, 1.0],
        };
        assert_eq!(gender_bce(&sure, Gender::Male), 0.0);
        let logits = [0.3f64, -1.1];
        let (_, g) = gender_bce_logits(&logits, Gender::Female);
        let p = softmax(&logits);
        assert!((g[0] - (p[0] - 1.0)).abs() < 1e-12);
        assert!((g[1] - p[1]).abs() < 1e-12);
    }

    fn bx(x1: f32, y1: f32, x2: f32, y2: f32) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn slot(bbox: BBox, seed: u64) -> SlotPrediction<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SlotPrediction {
            detection: Detection {
                bbox,
                confidence: 0.5,
            },
            age_logits: (0..NUM_AGES).map(|_| rng.random::<f64>() * 2.0).collect(),
            gender_logits: vec![rng.random::<f64>(), rng.random::<f64>()],
        }
    }

    #[test]
    fn masked_age_single_included_prediction() {
        let w = LossWeights::default();
        let gt = bx(0.0, 0.0, 10.0, 10.0);
        // Slot 0 has IOU 0.5 with the ground truth, slot 1 has IOU 0.1.
        let s0 = slot(bx(0.0, 0.0, 10.0, 5.0), 1);
        let s1 = slot(bx(0.0, 0.0, 10.0, 1.0), 2);
        let sup = BatchAgeSupervision {
            images: vec![ImageSupervision {
                faces: vec![FaceAnnotation {
                    bbox: gt,
                    age: Some(33),
                    gender: None,
                }],
                slots: vec![s0.clone(), s1],
            }],
        };
        let l = masked_age_loss(&sup, &w);
        assert_eq!(l.count, 1);
        let single = age_single_loss(&AgeDistribution::from_logits(&s0.age_logits), 33, &w);
        assert!((l.value - single).abs() < 1e-12);
        assert!(l.slot_grads[0][1].is_none());
        let g = masked_gender_loss(&sup, &w);
        assert_eq!((g.value, g.count), (0.0, 0));
    }

    #[test]
    fn box_only_and_unmatched_batches_give_zero() {
        let w = LossWeights::default();
        let gt = bx(0.0, 0.0, 10.0, 10.0);
        let box_only = BatchAgeSupervision {
            images: vec![ImageSupervision {
                faces: vec![FaceAnnotation {
                    bbox: gt,
                    age: None,
                    gender: None,
                }],
                slots: vec![slot(gt, 1)],
            }],
        };
        let l = masked_age_loss(&box_only, &w);
        assert_eq!((l.value, l.count), (0.0, 0));
        assert!(l.slot_grads[0][0].is_none());

        let far = BatchAgeSupervision {
            images: vec![ImageSupervision {
                faces: vec![FaceAnnotation {
                    bbox: gt,
                    age: Some(4),
                    gender: Some(Gender::Male),
                }],
                slots: vec![slot(bx(50.0, 50.0, 60.0, 60.0), 1)],
            }],
        };
        assert_eq!(masked_age_loss(&far, &w).value, 0.0);
        assert_eq!(masked_gender_loss(&far, &w).value, 0.0);
    }

    #[test]
    fn single_half_confident_gender_face() {
        let w = LossWeights::default();
        let gt = bx(0.0, 0.0, 10.0, 10.0);
        let mut s = slot(gt, 1);
        s.gender_logits = vec![0.7, 0.7];
        let sup = BatchAgeSupervision {
            images: vec![ImageSupervision {
                faces: vec![
                    FaceAnnotation {
                        bbox: gt,
                        age: None,
                        gender: Some(Gender::Female),
                    },
                    FaceAnnotation {
                        bbox: bx(30.0, 30.0, 40.0, 40.0),
                        age: None,
                        gender: None,
                    },
                ],
                slots: vec![s],
            }],
        };
        let l = masked_gender_loss(&sup, &w);
        assert_eq!(l.count, 1);
        assert!((l.value - 0.1 * 2f64.ln()).abs() < 1e-12);
        assert!((l.value - 0.0693).abs() < 1e-4);
    }
}
