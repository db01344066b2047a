//! Age/gender sub-network and its output decoding.
//!
//! The network takes a margin-expanded face crop. When the intermediate
//! feature connection is enabled, the detector's branch feature sampled
//! over the same region is concatenated after the first stage whose output
//! reaches 1/16 of the crop resolution. That stage is narrowed by the
//! concatenated width so the parameter count does not grow.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Linear, ParamGroup, ParamStore, Tape, Var};
use crate::tensor::Real;

pub const NUM_AGES: usize = 101;
pub const MAX_AGE: u8 = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Female,
    Male,
}

impl Gender {
    /// Class index in [`GenderDistribution::probs`].
    pub fn index(self) -> usize {
        match self {
            Gender::Female => 0,
            Gender::Male => 1,
        }
    }

    pub fn from_index(i: usize) -> Self {
        if i == 0 {
            Gender::Female
        } else {
            Gender::Male
        }
    }
}

/// Numerically stable softmax.
pub fn softmax<F: Real>(logits: &[F]) -> Vec<F> {
    let max = logits.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
    let exps: Vec<F> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum = exps.iter().fold(F::zero(), |a, &b| a + b);
    exps.into_iter().map(|e| e / sum).collect()
}

/// Probability of each integer age `0..=100`.
#[derive(Clone, Debug, PartialEq)]
pub struct AgeDistribution<F> {
    pub probs: Vec<F>,
}

impl<F: Real> AgeDistribution<F> {
    pub fn new(probs: Vec<F>) -> Result<Self> {
        if probs.len() != NUM_AGES {
            return Err(Error::Shape {
                expected: format!("{NUM_AGES} age classes"),
                actual: format!("{}", probs.len()),
            });
        }
        let d = Self { probs };
        if !d.is_normalized() {
            return Err(Error::Config(String::from(
                "age distribution is not normalized",
            )));
        }
        Ok(d)
    }

    pub fn from_logits(logits: &[F]) -> Self {
        assert_eq!(logits.len(), NUM_AGES, "age logits");
        Self {
            probs: softmax(logits),
        }
    }

    pub fn one_hot(age: u8) -> Self {
        let mut probs = alloc::vec![F::zero(); NUM_AGES];
        probs[age as usize] = F::one();
        Self { probs }
    }

    pub fn uniform() -> Self {
        Self {
            probs: alloc::vec![F::one() / F::lit(NUM_AGES as f64); NUM_AGES],
        }
    }

    pub fn is_normalized(&self) -> bool {
        let sum = self.probs.iter().fold(0.0, |a, p| a + p.as_f64());
        self.probs.iter().all(|&p| p >= F::zero()) && (sum - 1.0).abs() <= 1e-6
    }

    /// Probability-weighted mean age.
    pub fn expected_age(&self) -> F {
        expected_age(self)
    }
}

pub fn expected_age<F: Real>(p: &AgeDistribution<F>) -> F {
    p.probs
        .iter()
        .enumerate()
        .fold(F::zero(), |acc, (i, &pi)| acc + F::lit(i as f64) * pi)
}

/// `[female, male]` probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct GenderDistribution<F> {
    pub probs: [F; 2],
}

impl<F: Real> GenderDistribution<F> {
    pub fn from_logits(logits: &[F]) -> Self {
        assert_eq!(logits.len(), 2, "gender logits");
        let p = softmax(logits);
        Self {
            probs: [p[0], p[1]],
        }
    }

    pub fn argmax(&self) -> Gender {
        if self.probs[1] > self.probs[0] {
            Gender::Male
        } else {
            Gender::Female
        }
    }
}

/// One of the seven evaluation age groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AgeGroup(pub u8);

impl AgeGroup {
    pub const COUNT: usize = 7;
    /// Inclusive lower bound of each group.
    pub const LOWER_BOUNDS: [u32; 7] = [0, 3, 8, 13, 20, 37, 66];
    pub const LABELS: [&'static str; 7] = ["0-2", "3-7", "8-12", "13-19", "20-36", "37-65", "66+"];

    pub fn label(self) -> &'static str {
        Self::LABELS[self.0 as usize]
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Group containing `age`; fractional ages are floored first.
pub fn to_age_group(age: f64) -> AgeGroup {
    let a = libm::floor(age.max(0.0)) as u32;
    let g = AgeGroup::LOWER_BOUNDS
        .iter()
        .rposition(|&lo| a >= lo)
        .unwrap_or(0);
    AgeGroup(g as u8)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub width: usize,
    /// Residual blocks after the (possibly strided) entry convolution.
    pub blocks: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgeNetConfig {
    pub crop_h: usize,
    pub crop_w: usize,
    pub stem_width: usize,
    pub stages: Vec<StageConfig>,
    pub head_width: usize,
    /// Channels of the concatenated ROI feature.
    pub roi_channels: usize,
    pub intermediate_connection: bool,
    /// Narrow the fusion stage by `roi_channels` when the connection is on.
    pub fusion_width_reduction: bool,
    /// Dropout rate before each fully connected head.
    pub dropout: f64,
}

impl AgeNetConfig {
    /// Small network for CPU-scale experiments: 80x64 crops, fusion at 5x4.
    pub fn desk(intermediate_connection: bool) -> Self {
        Self {
            crop_h: 80,
            crop_w: 64,
            stem_width: 16,
            stages: alloc::vec![
                StageConfig {
                    width: 24,
                    blocks: 1,
                    stride: 2
                },
                StageConfig {
                    width: 48,
                    blocks: 1,
                    stride: 2
                },
                StageConfig {
                    width: 64,
                    blocks: 1,
                    stride: 2
                },
                StageConfig {
                    width: 64,
                    blocks: 1,
                    stride: 1
                },
            ],
            head_width: 64,
            roi_channels: 48,
            intermediate_connection,
            fusion_width_reduction: true,
            dropout: 0.2,
        }
    }

    /// 224x160 crops fused at 14x10, with TResNet-S stage depths (3, 3, 7, 3)
    /// and TResNet-M widths scaled by 0.9. Plain residual blocks stand in for
    /// the TResNet internals.
    pub fn paper(intermediate_connection: bool) -> Self {
        let w = |c: f64| libm::round(c * 0.9) as usize;
        Self {
            crop_h: 224,
            crop_w: 160,
            stem_width: w(64.0),
            stages: alloc::vec![
                StageConfig {
                    width: w(64.0),
                    blocks: 3,
                    stride: 2
                },
                StageConfig {
                    width: w(128.0),
                    blocks: 3,
                    stride: 2
                },
                StageConfig {
                    width: w(256.0),
                    blocks: 7,
                    stride: 2
                },
                StageConfig {
                    width: w(512.0),
                    blocks: 3,
                    stride: 2
                },
            ],
            head_width: w(512.0),
            roi_channels: 48,
            intermediate_connection,
            fusion_width_reduction: true,
            dropout: 0.2,
        }
    }

    /// Spatial size after the stem and each stage.
    pub fn spatial_sizes(&self) -> Vec<(usize, usize)> {
        let down = |v: usize, s: usize| v.div_ceil(s);
        let mut hw = (down(self.crop_h, 2), down(self.crop_w, 2));
        let mut out = alloc::vec![hw];
        for s in &self.stages {
            hw = (down(hw.0, s.stride), down(hw.1, s.stride));
            out.push(hw);
        }
        out
    }

    /// Fusion grid `(h, w)`: 1/16 of the crop.
    pub fn fusion_size(&self) -> (usize, usize) {
        (self.crop_h.div_ceil(16), self.crop_w.div_ceil(16))
    }

    /// Index of the first stage whose output is at 1/16 resolution.
    pub fn fusion_stage(&self) -> Result<usize> {
        let target = self.fusion_size();
        self.spatial_sizes()[1..]
            .iter()
            .position(|&hw| hw == target)
            .ok_or_else(|| {
                Error::Config(format!(
                    "no stage reaches the {}x{} fusion grid",
                    target.0, target.1
                ))
            })
    }

    fn stage_out_width(&self, i: usize, fusion: usize) -> usize {
        let w = self.stages[i].width;
        if i == fusion && self.intermediate_connection && self.fusion_width_reduction {
            w - self.roi_channels
        } else {
            w
        }
    }

    fn stage_in_width(&self, i: usize, fusion: usize) -> usize {
        if i == 0 {
            self.stem_width
        } else if i - 1 == fusion && self.intermediate_connection && !self.fusion_width_reduction {
            self.stages[i - 1].width + self.roi_channels
        } else {
            self.stages[i - 1].width
        }
    }

    fn final_width(&self, fusion: usize) -> usize {
        self.stage_in_width(self.stages.len(), fusion)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("age network needs at least one stage".into()));
        }
        let fusion = self.fusion_stage()?;
        if self.intermediate_connection
            && self.fusion_width_reduction
            && self.stages[fusion].width <= self.roi_channels
        {
            return Err(Error::Config(format!(
                "fusion stage width {} cannot be reduced by {}",
                self.stages[fusion].width, self.roi_channels
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must be in [0, 1)".into()));
        }
        Ok(())
    }

    /// Parameter count computed from the configuration alone.
    pub fn param_count(&self) -> Result<usize> {
        self.validate()?;
        let fusion = self.fusion_stage()?;
        let mut n = Conv2d::param_count(3, self.stem_width, 3);
        for i in 0..self.stages.len() {
            let (cin, cout) = (
                self.stage_in_width(i, fusion),
                self.stage_out_width(i, fusion),
            );
            n += Conv2d::param_count(cin, cout, 3);
            n += self.stages[i].blocks * 2 * Conv2d::param_count(cout, cout, 3);
        }
        let fin = self.final_width(fusion);
        for classes in [NUM_AGES, 2] {
            n += Conv2d::param_count(fin, self.head_width, 1)
                + Linear::param_count(self.head_width, classes);
        }
        Ok(n)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Stage {
    entry: Conv2d,
    blocks: Vec<(Conv2d, Conv2d)>,
}

#[derive(Clone, Debug, PartialEq)]
struct Head {
    conv: Conv2d,
    fc: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgeNet {
    config: AgeNetConfig,
    fusion: usize,
    stem: Conv2d,
    stages: Vec<Stage>,
    age_head: Head,
    gender_head: Head,
}

#[derive(Clone, Copy, Debug)]
pub struct AgeVars {
    pub age_logits: Var,
    pub gender_logits: Var,
}

impl AgeNet {
    pub fn build<F: Real, R: Rng>(
        config: &AgeNetConfig,
        store: &mut ParamStore<F>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let g = ParamGroup::Age;
        let fusion = config.fusion_stage()?;
        let stem = Conv2d::new(store, "age.stem", g, 3, config.stem_width, 3, 2, rng);
        let mut stages = Vec::with_capacity(config.stages.len());
        for (i, sc) in config.stages.iter().enumerate() {
            let (cin, cout) = (
                config.stage_in_width(i, fusion),
                config.stage_out_width(i, fusion),
            );
            let entry = Conv2d::new(
                store,
                &format!("age.stage{i}.entry"),
                g,
                cin,
                cout,
                3,
                sc.stride,
                rng,
            );
            let blocks = (0..sc.blocks)
                .map(|b| {
                    let a = Conv2d::new(
                        store,
                        &format!("age.stage{i}.block{b}.conv1"),
                        g,
                        cout,
                        cout,
                        3,
                        1,
                        rng,
                    );
                    let c = Conv2d::with_gain(
                        store,
                        &format!("age.stage{i}.block{b}.conv2"),
                        g,
                        cout,
                        cout,
                        3,
                        1,
                        0.5,
                        0.0,
                        rng,
                    );
                    (a, c)
                })
                .collect();
            stages.push(Stage { entry, blocks });
        }
        let fin = config.final_width(fusion);
        let mut head = |name: &str, classes: usize| Head {
            conv: Conv2d::new(
                store,
                &format!("age.{name}.conv"),
                g,
                fin,
                config.head_width,
                1,
                1,
                rng,
            ),
            fc: Linear::new(
                store,
                &format!("age.{name}.fc"),
                g,
                config.head_width,
                classes,
                rng,
            ),
        };
        let age_head = head("age_head", NUM_AGES);
        let gender_head = head("gender_head", 2);
        Ok(Self {
            config: config.clone(),
            fusion,
            stem,
            stages,
            age_head,
            gender_head,
        })
    }

    pub fn config(&self) -> &AgeNetConfig {
        &self.config
    }

    /// Expected `(channels, h, w)` of the ROI feature.
    pub fn roi_shape(&self) -> (usize, usize, usize) {
        let (h, w) = self.config.fusion_size();
        (self.config.roi_channels, h, w)
    }

    /// Runs the age network on one crop. `roi` must be present exactly when
    /// the intermediate feature connection is enabled.
    pub fn forward<F: Real, R: Rng>(
        &self,
        tape: &mut Tape<'_, F>,
        crop: Var,
        roi: Option<Var>,
        rng: &mut R,
    ) -> Result<AgeVars> {
        let c = tape.value(crop);
        if (c.channels, c.height, c.width) != (3, self.config.crop_h, self.config.crop_w) {
            return Err(Error::Shape {
                expected: format!("3x{}x{} crop", self.config.crop_h, self.config.crop_w),
                actual: format!("{}x{}x{}", c.channels, c.height, c.width),
            });
        }
        let roi = match (self.config.intermediate_connection, roi) {
            (true, Some(r)) => {
                let v = tape.value(r);
                if (v.channels, v.height, v.width) != self.roi_shape() {
                    let (ec, eh, ew) = self.roi_shape();
                    return Err(Error::Shape {
                        expected: format!("{ec}x{eh}x{ew} ROI feature"),
                        actual: format!("{}x{}x{}", v.channels, v.height, v.width),
                    });
                }
                Some(r)
            }
            (false, None) => None,
            (true, None) => {
                return Err(Error::Config(
                    "intermediate feature connection needs a ROI feature".into(),
                ))
            }
            (false, Some(_)) => {
                return Err(Error::Config(
                    "ROI feature given but the connection is disabled".into(),
                ));
            }
        };
        let mut x = tape.conv2d(crop, &self.stem);
        x = tape.relu(x);
        for (i, stage) in self.stages.iter().enumerate() {
            x = tape.conv2d(x, &stage.entry);
            x = tape.relu(x);
            for (a, b) in &stage.blocks {
                let mut h = tape.conv2d(x, a);
                h = tape.relu(h);
                h = tape.conv2d(h, b);
                let s = tape.add(x, h);
                x = tape.relu(s);
            }
            if i == self.fusion {
                if let Some(r) = roi {
                    x = tape.concat(x, r);
                }
            }
        }
        let rate = self.config.dropout;
        let mut run_head = |tape: &mut Tape<'_, F>, head: &Head| {
            let h = tape.conv2d(x, &head.conv);
            let h = tape.relu(h);
            let p = tape.global_avg_pool(h);
            let d = tape.dropout(p, rate, rng);
            tape.linear(d, &head.fc)
        };
        let age_logits = run_head(tape, &self.age_head);
        let gender_logits = run_head(tape, &self.gender_head);
        Ok(AgeVars {
            age_logits,
            gender_logits,
        })
    }
}
