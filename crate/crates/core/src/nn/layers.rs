use alloc::format;
use alloc::vec;

use rand::Rng;

use super::params::{ParamGroup, ParamId, ParamStore};
use crate::tensor::Real;

/// Square-kernel 2-D convolution with bias and `kernel / 2` zero padding.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Real, R: Rng>(
        store: &mut ParamStore<F>,
        name: &str,
        group: ParamGroup,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        Self::with_gain(
            store, name, group, in_ch, out_ch, kernel, stride, 1.0, 0.0, rng,
        )
    }

    /// Like [`new`](Self::new) with a scaled He initialization and a
    /// constant bias.
    #[allow(clippy::too_many_arguments)]
    pub fn with_gain<F: Real, R: Rng>(
        store: &mut ParamStore<F>,
        name: &str,
        group: ParamGroup,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        gain: f64,
        bias: f64,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let weight = store.add_he(
            format!("{name}.weight"),
            group,
            vec![out_ch, in_ch, kernel, kernel],
            fan_in,
            gain,
            rng,
        );
        let bias = store.add_const(format!("{name}.bias"), group, vec![out_ch], bias);
        Self {
            weight,
            bias,
            in_ch,
            out_ch,
            kernel,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    pub fn param_count(in_ch: usize, out_ch: usize, kernel: usize) -> usize {
        out_ch * in_ch * kernel * kernel + out_ch
    }
}

/// Fully connected layer on a flattened input.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<F: Real, R: Rng>(
        store: &mut ParamStore<F>,
        name: &str,
        group: ParamGroup,
        in_features: usize,
        out_features: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_he(
            format!("{name}.weight"),
            group,
            vec![out_features, in_features],
            in_features,
            0.5,
            rng,
        );
        let bias = store.add_const(format!("{name}.bias"), group, vec![out_features], 0.0);
        Self {
            weight,
            bias,
            in_features,
            out_features,
        }
    }

    pub fn param_count(in_features: usize, out_features: usize) -> usize {
        in_features * out_features + out_features
    }
}
