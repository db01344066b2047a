use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Real;

/// Which sub-network a parameter belongs to. Freezing works per group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    Detector,
    Age,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<F> {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

/// Flat registry of every trainable tensor in a model, in creation order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<F> {
    params: Vec<Param<F>>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(
        &mut self,
        name: String,
        group: ParamGroup,
        shape: Vec<usize>,
        data: Vec<F>,
    ) -> ParamId {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "param {name} shape"
        );
        self.params.push(Param {
            name,
            group,
            shape,
            data,
        });
        ParamId(self.params.len() - 1)
    }

    /// He-normal initialization with the given fan-in.
    pub fn add_he<R: Rng>(
        &mut self,
        name: String,
        group: ParamGroup,
        shape: Vec<usize>,
        fan_in: usize,
        gain: f64,
        rng: &mut R,
    ) -> ParamId {
        let n = shape.iter().product();
        let std = gain * libm::sqrt(2.0 / fan_in as f64);
        let data = (0..n).map(|_| F::lit(std * standard_normal(rng))).collect();
        self.add(name, group, shape, data)
    }

    pub fn add_const(
        &mut self,
        name: String,
        group: ParamGroup,
        shape: Vec<usize>,
        value: f64,
    ) -> ParamId {
        let n = shape.iter().product();
        self.add(name, group, shape, vec![F::lit(value); n])
    }

    pub fn get(&self, id: ParamId) -> &Param<F> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<F> {
        &mut self.params[id.0]
    }

    pub fn data(&self, id: ParamId) -> &[F] {
        &self.params[id.0].data
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<F>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<F>> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Number of scalar parameters, optionally restricted to one group.
    pub fn count(&self, group: Option<ParamGroup>) -> usize {
        self.params
            .iter()
            .filter(|p| group.is_none_or(|g| p.group == g))
            .map(|p| p.data.len())
            .sum()
    }

    pub fn zeros_like(&self) -> Grads<F> {
        Grads {
            data: self
                .params
                .iter()
                .map(|p| vec![F::zero(); p.data.len()])
                .collect(),
        }
    }

    /// Converts every parameter to another scalar type.
    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    group: p.group,
                    shape: p.shape.clone(),
                    data: p.data.iter().map(|v| G::lit(v.as_f64())).collect(),
                })
                .collect(),
        }
    }
}

/// Gradient buffers laid out like a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grads<F> {
    pub data: Vec<Vec<F>>,
}

impl<F: Real> Grads<F> {
    pub fn get(&self, id: ParamId) -> &[F] {
        &self.data[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [F] {
        &mut self.data[id.0]
    }

    pub fn add_assign(&mut self, other: &Grads<F>) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }

    pub fn scale(&mut self, s: F) {
        for v in self.data.iter_mut().flatten() {
            *v *= s;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().flatten().all(|v| v.is_finite())
    }
}

/// Box-Muller draw from N(0, 1).
pub(crate) fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random();
    libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(2.0 * core::f64::consts::PI * u2)
}
