//! Parameter bookkeeping shared by all model modules: named leaves for
//! training/checkpointing, plus the two ubiquitous layer primitives.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Collects (name, leaf var) pairs while a model binds itself to a graph,
/// so the trainer can read gradients by parameter name afterwards.
#[derive(Default)]
pub struct ParamBindings {
    pub entries: Vec<(String, Var)>,
}

impl ParamBindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn leaf(&mut self, g: &Graph, name: String, t: &Tensor) -> Var {
        let v = g.leaf(t.clone());
        self.entries.push((name, v.clone()));
        v
    }
}

/// Fully connected layer, weight [out, in], bias [out].
#[derive(Clone)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    pub fn init(dim_in: usize, dim_out: usize, rng: &mut Rng) -> Linear {
        Linear {
            w: Tensor::randn_scaled(&[dim_out, dim_in], 1.0 / (dim_in as f32).sqrt(), rng),
            b: Tensor::zeros(&[dim_out]),
        }
    }

    /// Same shape, bias filled with `bias`; used by style-affine maps that
    /// must degenerate to identity-strength modulation at zero input.
    pub fn init_bias(dim_in: usize, dim_out: usize, bias: f32, rng: &mut Rng) -> Linear {
        Linear {
            w: Tensor::randn_scaled(&[dim_out, dim_in], 1.0 / (dim_in as f32).sqrt(), rng),
            b: Tensor::full(&[dim_out], bias),
        }
    }

    pub fn for_each_param(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.w"), &mut self.w);
        f(format!("{prefix}.b"), &mut self.b);
    }

    pub fn bind(&self, g: &Graph, prefix: &str, reg: &mut ParamBindings) -> LinearVars {
        LinearVars {
            w: reg.leaf(g, format!("{prefix}.w"), &self.w),
            b: reg.leaf(g, format!("{prefix}.b"), &self.b),
        }
    }

    /// Plain (non-differentiable) application to rows of x [M, in].
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.w.transpose2d()?)?.add(&self.b)
    }
}

#[derive(Clone)]
pub struct LinearVars {
    pub w: Var,
    pub b: Var,
}

impl LinearVars {
    pub fn apply(&self, x: &Var) -> Result<Var> {
        x.matmul(&self.w.transpose2d()?)?.add(&self.b)
    }
}

/// 2-D convolution layer with bias.
#[derive(Clone)]
pub struct Conv2d {
    pub w: Tensor,
    pub b: Tensor,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn init(c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize, rng: &mut Rng) -> Conv2d {
        let fan_in = (c_in * k * k) as f32;
        Conv2d {
            w: Tensor::randn_scaled(&[c_out, c_in, k, k], 1.0 / fan_in.sqrt(), rng),
            b: Tensor::zeros(&[c_out]),
            stride,
            pad,
        }
    }

    pub fn for_each_param(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.w"), &mut self.w);
        f(format!("{prefix}.b"), &mut self.b);
    }

    pub fn bind(&self, g: &Graph, prefix: &str, reg: &mut ParamBindings) -> Conv2dVars {
        Conv2dVars {
            w: reg.leaf(g, format!("{prefix}.w"), &self.w),
            b: reg.leaf(g, format!("{prefix}.b"), &self.b),
            stride: self.stride,
            pad: self.pad,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.w.shape()[0]
    }
}

#[derive(Clone)]
pub struct Conv2dVars {
    pub w: Var,
    pub b: Var,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dVars {
    pub fn apply(&self, x: &Var) -> Result<Var> {
        let y = x.conv2d(&self.w, self.stride, self.pad)?;
        let c = self.b.shape()[0];
        y.add(&self.b.reshape(&[c, 1, 1])?)
    }
}
