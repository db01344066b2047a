//! Reverse-mode differentiation over single-image activations.
//!
//! A [`Tape`] borrows the parameter store, records every operation applied
//! to one sample, and replays them backwards. Parameters of a frozen group
//! are read but never receive gradients, and nodes that depend on neither
//! a trainable parameter nor a gradient-requiring leaf are skipped entirely
//! during the backward pass.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::layers::{Conv2d, Linear};
use super::params::{Grads, ParamGroup, ParamStore};
use crate::geometry::SampleGrid;
use crate::tensor::{Real, Tensor3};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<F> {
    Leaf,
    Conv { x: usize, conv: Conv2d, col: Vec<F> },
    Linear { x: usize, lin: Linear },
    Relu(usize),
    Add(usize, usize),
    Concat(usize, usize),
    GlobalAvgPool(usize),
    Dropout { x: usize, mask: Vec<F> },
    Gather { x: usize, grid: SampleGrid },
    Upsample2(usize),
    Scale(usize, F),
}

struct Node<F> {
    value: Tensor3<F>,
    op: Op<F>,
    requires_grad: bool,
}

pub struct Tape<'p, F: Real> {
    params: &'p ParamStore<F>,
    frozen: Option<ParamGroup>,
    training: bool,
    nodes: Vec<Node<F>>,
}

/// Result of a backward pass: parameter gradients are accumulated into the
/// caller's buffer; gradients of leaves created with `requires_grad` are
/// returned here.
pub struct LeafGrads<F> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Real> LeafGrads<F> {
    pub fn get(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

impl<'p, F: Real> Tape<'p, F> {
    pub fn new(params: &'p ParamStore<F>, training: bool, frozen: Option<ParamGroup>) -> Self {
        Self {
            params,
            frozen,
            training,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore<F> {
        self.params
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    fn trainable(&self, group: ParamGroup) -> bool {
        self.frozen != Some(group)
    }

    fn push(&mut self, value: Tensor3<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: usize) -> bool {
        self.nodes[v].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor3<F>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor3<F> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn conv2d(&mut self, x: Var, conv: &Conv2d) -> Var {
        let input = &self.nodes[x.0].value;
        assert_eq!(input.channels, conv.in_ch, "conv input channels");
        let (oh, ow) = conv.output_size(input.height, input.width);
        let hw = oh * ow;
        let ckk = conv.in_ch * conv.kernel * conv.kernel;
        let pointwise = conv.kernel == 1 && conv.stride == 1 && conv.pad == 0;
        let col = if pointwise {
            Vec::new()
        } else {
            im2col(input, conv.kernel, conv.stride, conv.pad, oh, ow)
        };
        let cols: &[F] = if pointwise { &input.data } else { &col };
        let w = self.params.data(conv.weight);
        let b = self.params.data(conv.bias);
        let mut out = Tensor3::zeros(conv.out_ch, oh, ow);
        for (o, row) in out.data.chunks_exact_mut(hw).enumerate() {
            row.fill(b[o]);
        }
        F::gemm(
            conv.out_ch,
            ckk,
            hw,
            F::one(),
            w,
            ckk as isize,
            1,
            cols,
            hw as isize,
            1,
            F::one(),
            &mut out.data,
            hw as isize,
            1,
        );
        let rg = self.rg(x.0) || self.trainable(self.params.get(conv.weight).group);
        self.push(
            out,
            Op::Conv {
                x: x.0,
                conv: *conv,
                col,
            },
            rg,
        )
    }

    pub fn linear(&mut self, x: Var, lin: &Linear) -> Var {
        let input = &self.nodes[x.0].value;
        assert_eq!(input.data.len(), lin.in_features, "linear input size");
        let w = self.params.data(lin.weight);
        let b = self.params.data(lin.bias);
        let mut out = Tensor3::from_vec(lin.out_features, 1, 1, b.to_vec());
        F::gemm(
            lin.out_features,
            lin.in_features,
            1,
            F::one(),
            w,
            lin.in_features as isize,
            1,
            &input.data,
            1,
            1,
            F::one(),
            &mut out.data,
            1,
            1,
        );
        let rg = self.rg(x.0) || self.trainable(self.params.get(lin.weight).group);
        self.push(out, Op::Linear { x: x.0, lin: *lin }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.nodes[x.0]
            .value
            .map(|v| if v > F::zero() { v } else { F::zero() });
        let rg = self.rg(x.0);
        self.push(out, Op::Relu(x.0), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert!(va.same_shape(vb), "add shape mismatch");
        let mut out = va.clone();
        for (o, v) in out.data.iter_mut().zip(&vb.data) {
            *o += *v;
        }
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push(out, Op::Add(a.0, b.0), rg)
    }

    /// Channel concatenation `[a; b]`.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(
            (va.height, va.width),
            (vb.height, vb.width),
            "concat spatial mismatch"
        );
        let mut data = Vec::with_capacity(va.data.len() + vb.data.len());
        data.extend_from_slice(&va.data);
        data.extend_from_slice(&vb.data);
        let out = Tensor3::from_vec(va.channels + vb.channels, va.height, va.width, data);
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push(out, Op::Concat(a.0, b.0), rg)
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let n = F::lit(v.plane_len() as f64);
        let data = (0..v.channels)
            .map(|c| v.plane(c).iter().fold(F::zero(), |a, &b| a + b) / n)
            .collect();
        let out = Tensor3::from_vec(v.channels, 1, 1, data);
        let rg = self.rg(x.0);
        self.push(out, Op::GlobalAvgPool(x.0), rg)
    }

    /// Inverted dropout; the identity outside training mode.
    pub fn dropout<R: Rng>(&mut self, x: Var, rate: f64, rng: &mut R) -> Var {
        if !self.training || rate <= 0.0 {
            return x;
        }
        let keep = F::lit(1.0 / (1.0 - rate));
        let v = &self.nodes[x.0].value;
        let mask: Vec<F> = (0..v.data.len())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    F::zero()
                } else {
                    keep
                }
            })
            .collect();
        let mut out = v.clone();
        for (o, m) in out.data.iter_mut().zip(&mask) {
            *o *= *m;
        }
        let rg = self.rg(x.0);
        self.push(out, Op::Dropout { x: x.0, mask }, rg)
    }

    /// Applies a fixed bilinear resampling map to every channel.
    pub fn gather(&mut self, x: Var, grid: SampleGrid) -> Var {
        let out = grid.apply(&self.nodes[x.0].value);
        let rg = self.rg(x.0);
        self.push(out, Op::Gather { x: x.0, grid }, rg)
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let mut out = Tensor3::zeros(v.channels, v.height * 2, v.width * 2);
        for c in 0..v.channels {
            for y in 0..out.height {
                for xx in 0..out.width {
                    out.set(c, y, xx, v.get(c, y / 2, xx / 2));
                }
            }
        }
        let rg = self.rg(x.0);
        self.push(out, Op::Upsample2(x.0), rg)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let f = F::lit(factor);
        let out = self.nodes[x.0].value.map(|v| v * f);
        let rg = self.rg(x.0);
        self.push(out, Op::Scale(x.0, f), rg)
    }

    /// Backpropagates the given output gradients. Parameter gradients are
    /// added into `param_grads`.
    pub fn backward(&self, seeds: &[(Var, &[F])], param_grads: &mut Grads<F>) -> LeafGrads<F> {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<F>>> = (0..n).map(|_| None).collect();
        let mut leaves: Vec<Option<Vec<F>>> = (0..n).map(|_| None).collect();
        for (v, g) in seeds {
            assert_eq!(
                g.len(),
                self.nodes[v.0].value.data.len(),
                "seed gradient length"
            );
            accumulate(&mut grads[v.0], g);
        }
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => leaves[i] = Some(g),
                Op::Conv { x, conv, col } => {
                    self.conv_backward(*x, conv, col, &g, &mut grads, param_grads);
                }
                Op::Linear { x, lin } => {
                    let input = &self.nodes[*x].value.data;
                    if self.trainable(self.params.get(lin.weight).group) {
                        let gw = param_grads.get_mut(lin.weight);
                        for (o, &go) in g.iter().enumerate() {
                            if go == F::zero() {
                                continue;
                            }
                            let row = &mut gw[o * lin.in_features..(o + 1) * lin.in_features];
                            for (w, &xi) in row.iter_mut().zip(input) {
                                *w += go * xi;
                            }
                        }
                        for (b, &go) in param_grads.get_mut(lin.bias).iter_mut().zip(&g) {
                            *b += go;
                        }
                    }
                    if self.rg(*x) {
                        let w = self.params.data(lin.weight);
                        let mut gx = vec![F::zero(); lin.in_features];
                        F::gemm(
                            lin.in_features,
                            lin.out_features,
                            1,
                            F::one(),
                            w,
                            1,
                            lin.in_features as isize,
                            &g,
                            1,
                            1,
                            F::zero(),
                            &mut gx,
                            1,
                            1,
                        );
                        accumulate(&mut grads[*x], &gx);
                    }
                }
                Op::Relu(x) => {
                    if self.rg(*x) {
                        let out = &node.value.data;
                        let gx: Vec<F> = g
                            .iter()
                            .zip(out)
                            .map(|(&gi, &o)| if o > F::zero() { gi } else { F::zero() })
                            .collect();
                        accumulate(&mut grads[*x], &gx);
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads[*a], &g);
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads[*b], &g);
                    }
                }
                Op::Concat(a, b) => {
                    let split = self.nodes[*a].value.data.len();
                    if self.rg(*a) {
                        accumulate(&mut grads[*a], &g[..split]);
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads[*b], &g[split..]);
                    }
                }
                Op::GlobalAvgPool(x) => {
                    if self.rg(*x) {
                        let v = &self.nodes[*x].value;
                        let inv = F::one() / F::lit(v.plane_len() as f64);
                        let mut gx = vec![F::zero(); v.data.len()];
                        for (c, plane) in gx.chunks_exact_mut(v.plane_len()).enumerate() {
                            plane.fill(g[c] * inv);
                        }
                        accumulate(&mut grads[*x], &gx);
                    }
                }
                Op::Dropout { x, mask } => {
                    if self.rg(*x) {
                        let gx: Vec<F> = g.iter().zip(mask).map(|(&a, &m)| a * m).collect();
                        accumulate(&mut grads[*x], &gx);
                    }
                }
                Op::Gather { x, grid } => {
                    if self.rg(*x) {
                        let v = &self.nodes[*x].value;
                        let slot = grads[*x].get_or_insert_with(|| vec![F::zero(); v.data.len()]);
                        grid.scatter_add(v.channels, &g, slot);
                    }
                }
                Op::Scale(x, f) => {
                    if self.rg(*x) {
                        let gx: Vec<F> = g.iter().map(|&v| v * *f).collect();
                        accumulate(&mut grads[*x], &gx);
                    }
                }
                Op::Upsample2(x) => {
                    if self.rg(*x) {
                        let v = &self.nodes[*x].value;
                        let (oh, ow) = (v.height * 2, v.width * 2);
                        let mut gx = vec![F::zero(); v.data.len()];
                        for c in 0..v.channels {
                            for y in 0..oh {
                                for xx in 0..ow {
                                    gx[v.index(c, y / 2, xx / 2)] += g[(c * oh + y) * ow + xx];
                                }
                            }
                        }
                        accumulate(&mut grads[*x], &gx);
                    }
                }
            }
        }
        LeafGrads { grads: leaves }
    }

    fn conv_backward(
        &self,
        x: usize,
        conv: &Conv2d,
        col: &[F],
        g: &[F],
        grads: &mut [Option<Vec<F>>],
        param_grads: &mut Grads<F>,
    ) {
        let input = &self.nodes[x].value;
        let (oh, ow) = conv.output_size(input.height, input.width);
        let hw = oh * ow;
        let ckk = conv.in_ch * conv.kernel * conv.kernel;
        let pointwise = col.is_empty();
        let cols: &[F] = if pointwise { &input.data } else { col };
        if self.trainable(self.params.get(conv.weight).group) {
            F::gemm(
                conv.out_ch,
                hw,
                ckk,
                F::one(),
                g,
                hw as isize,
                1,
                cols,
                1,
                hw as isize,
                F::one(),
                param_grads.get_mut(conv.weight),
                ckk as isize,
                1,
            );
            let gb = param_grads.get_mut(conv.bias);
            for (o, row) in g.chunks_exact(hw).enumerate() {
                gb[o] += row.iter().fold(F::zero(), |a, &b| a + b);
            }
        }
        if self.rg(x) {
            let w = self.params.data(conv.weight);
            let mut dcol = vec![F::zero(); ckk * hw];
            F::gemm(
                ckk,
                conv.out_ch,
                hw,
                F::one(),
                w,
                1,
                ckk as isize,
                g,
                hw as isize,
                1,
                F::zero(),
                &mut dcol,
                hw as isize,
                1,
            );
            if pointwise {
                accumulate(&mut grads[x], &dcol);
            } else {
                let slot = grads[x].get_or_insert_with(|| vec![F::zero(); input.data.len()]);
                col2im_add(
                    &dcol,
                    input,
                    conv.kernel,
                    conv.stride,
                    conv.pad,
                    oh,
                    ow,
                    slot,
                );
            }
        }
    }
}

fn accumulate<F: Real>(slot: &mut Option<Vec<F>>, g: &[F]) {
    match slot {
        Some(acc) => {
            for (a, &b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        None => *slot = Some(g.to_vec()),
    }
}

fn im2col<F: Real>(
    input: &Tensor3<F>,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<F> {
    let (h, w) = (input.height as isize, input.width as isize);
    let hw = oh * ow;
    let mut col = vec![F::zero(); input.channels * k * k * hw];
    for c in 0..input.channels {
        let plane = input.plane(c);
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * hw;
                let dst = &mut col[row..row + hw];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let src = &plane[iy as usize * w as usize..(iy as usize + 1) * w as usize];
                    let out = &mut dst[oy * ow..(oy + 1) * ow];
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w {
                            *o = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

#[allow(clippy::too_many_arguments)]
fn col2im_add<F: Real>(
    dcol: &[F],
    input: &Tensor3<F>,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    out: &mut [F],
) {
    let (h, w) = (input.height as isize, input.width as isize);
    let hw = oh * ow;
    let plane_len = input.plane_len();
    for c in 0..input.channels {
        let plane = &mut out[c * plane_len..(c + 1) * plane_len];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * hw;
                let src = &dcol[row..row + hw];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let base = iy as usize * w as usize;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w {
                            plane[base + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}
