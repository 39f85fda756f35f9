use rand_distr::{Distribution, Normal};

use super::graph::{Graph, ParamId, ParamStore, Var};
use super::tensor::Tensor;
use crate::error::Result;
use crate::seed::Rng;

/// Weight initialisation scheme.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Normal(f64),
    He,
    Zeros,
}

fn init_tensor(shape: &[usize], fan_in: usize, init: Init, rng: &mut Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let std = match init {
        Init::Normal(s) => s,
        Init::He => (2.0 / fan_in as f64).sqrt(),
        Init::Zeros => return Tensor::zeros(shape),
    };
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor::from_vec(shape, (0..n).map(|_| dist.sample(rng)).collect()).expect("shape")
}

/// Fetches a parameter either as a trainable node or as a constant.
pub fn param(g: &mut Graph, store: &ParamStore, id: ParamId, frozen: bool) -> Var {
    if frozen {
        g.frozen_param(store, id)
    } else {
        g.param(store, id)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        init: Init,
        rng: &mut Rng,
    ) -> Self {
        let w = init_tensor(&[out_c, in_c, kernel, kernel], in_c * kernel * kernel, init, rng);
        let weight = store.add(format!("{name}.weight"), w);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[out_c])));
        Conv2d {
            weight,
            bias,
            stride,
            pad,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, frozen: bool) -> Result<Var> {
        let w = param(g, store, self.weight, frozen);
        let b = self.bias.map(|b| param(g, store, b, frozen));
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, init: Init, rng: &mut Rng) -> Self {
        let w = init_tensor(&[out_dim, in_dim], in_dim, init, rng);
        Linear {
            weight: store.add(format!("{name}.weight"), w),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim])),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, frozen: bool) -> Result<Var> {
        let w = param(g, store, self.weight, frozen);
        let b = param(g, store, self.bias, frozen);
        g.linear(x, w, b)
    }
}
