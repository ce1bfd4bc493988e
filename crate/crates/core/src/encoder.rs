//! Multi-scale encoder E: residual CNN backbone (three feature scales),
//! patch embedding with positional table added at the middle scale, a
//! state-space refinement block per scale, and pooled projection heads
//! producing the latent code w' alongside the deepest refined map Ĥ3.

use crate::error::{Error, Result};
use crate::graph::{concat0, layer_norm_ch, Graph, Var};
use crate::params::{Conv2d, Conv2dVars, Linear, LinearVars, ParamBindings};
use crate::rng::Rng;
use crate::ssm::ZohMode;
use crate::tensor::Tensor;
use crate::vssm::{mix_block, MixBlockParams, MixBlockVars, LN_EPS};

const LRELU_SLOPE: f32 = 0.2;

#[derive(Clone)]
pub struct ResBlock {
    pub c1: Conv2d,
    pub c2: Conv2d,
}

impl ResBlock {
    fn init(c: usize, rng: &mut Rng) -> ResBlock {
        ResBlock {
            c1: Conv2d::init(c, c, 3, 1, 1, rng),
            c2: Conv2d::init(c, c, 3, 1, 1, rng),
        }
    }

    fn for_each_param(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.c1.for_each_param(&format!("{prefix}.c1"), f);
        self.c2.for_each_param(&format!("{prefix}.c2"), f);
    }

    fn bind(&self, g: &Graph, prefix: &str, reg: &mut ParamBindings) -> ResBlockVars {
        ResBlockVars {
            c1: self.c1.bind(g, &format!("{prefix}.c1"), reg),
            c2: self.c2.bind(g, &format!("{prefix}.c2"), reg),
        }
    }
}

#[derive(Clone)]
pub struct ResBlockVars {
    pub c1: Conv2dVars,
    pub c2: Conv2dVars,
}

impl ResBlockVars {
    fn apply(&self, x: &Var) -> Result<Var> {
        let b = self.c2.apply(&self.c1.apply(x)?.leaky_relu(LRELU_SLOPE))?;
        Ok(x.add(&b)?.leaky_relu(LRELU_SLOPE))
    }
}

#[derive(Clone)]
pub struct Stage {
    pub down: Conv2d, // stride-2 channel change
    pub blocks: Vec<ResBlock>,
}

impl Stage {
    fn init(c_in: usize, c_out: usize, rng: &mut Rng) -> Stage {
        Stage {
            down: Conv2d::init(c_in, c_out, 4, 2, 1, rng),
            blocks: (0..2).map(|_| ResBlock::init(c_out, rng)).collect(),
        }
    }

    fn for_each_param(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.down.for_each_param(&format!("{prefix}.down"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.for_each_param(&format!("{prefix}.b{i}"), f);
        }
    }

    fn bind(&self, g: &Graph, prefix: &str, reg: &mut ParamBindings) -> StageVars {
        StageVars {
            down: self.down.bind(g, &format!("{prefix}.down"), reg),
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| b.bind(g, &format!("{prefix}.b{i}"), reg))
                .collect(),
        }
    }
}

#[derive(Clone)]
pub struct StageVars {
    pub down: Conv2dVars,
    pub blocks: Vec<ResBlockVars>,
}

impl StageVars {
    fn apply(&self, x: &Var) -> Result<Var> {
        let mut y = self.down.apply(x)?.leaky_relu(LRELU_SLOPE);
        for b in &self.blocks {
            y = b.apply(&y)?;
        }
        Ok(y)
    }
}

/// Pooled projection head: channel norm, spatial mean, linear to
/// `rows · d_w` style entries.
#[derive(Clone)]
pub struct Head {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub lin: Linear,
    pub rows: usize,
}

impl Head {
    fn init(c: usize, rows: usize, d_w: usize, rng: &mut Rng) -> Head {
        Head {
            gamma: Tensor::full(&[c], 1.0),
            beta: Tensor::zeros(&[c]),
            lin: Linear::init(c, rows * d_w, rng),
            rows,
        }
    }

    fn for_each_param(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.gamma"), &mut self.gamma);
        f(format!("{prefix}.beta"), &mut self.beta);
        self.lin.for_each_param(&format!("{prefix}.lin"), f);
    }

    fn bind(&self, g: &Graph, prefix: &str, reg: &mut ParamBindings) -> HeadVars {
        HeadVars {
            gamma: reg.leaf(g, format!("{prefix}.gamma"), &self.gamma),
            beta: reg.leaf(g, format!("{prefix}.beta"), &self.beta),
            lin: self.lin.bind(g, &format!("{prefix}.lin"), reg),
            rows: self.rows,
        }
    }
}

#[derive(Clone)]
pub struct HeadVars {
    pub gamma: Var,
    pub beta: Var,
    pub lin: LinearVars,
    pub rows: usize,
}

impl HeadVars {
    fn apply(&self, f: &Var, d_w: usize) -> Result<Var> {
        let normed = layer_norm_ch(f, &self.gamma, &self.beta, LN_EPS)?;
        let s = normed.shape();
        let (c, hw) = (s[0], s[1] * s[2]);
        let pooled = normed
            .reshape(&[c, hw])?
            .sum_trailing(1)?
            .scale(1.0 / hw as f32)
            .reshape(&[1, c])?;
        self.lin.apply(&pooled)?.reshape(&[self.rows, d_w])
    }
}

#[derive(Clone)]
pub struct EncoderParams {
    pub stem: Conv2d, // 3 -> c1, stride 2
    pub stages: Vec<Stage>,
    pub patch_lin: Linear,    // 3·P² -> c2
    pub patch_pos: Tensor,    // [c2, R/P, R/P]
    pub refine: Vec<MixBlockParams>,
    pub heads: Vec<Head>,
    pub r: usize,
    pub d_w: usize,
    pub l_g: usize,
    pub patch: usize,
}

/// Row counts per head for a generator depth: coarse/middle/fine thirds,
/// remainder going to the fine head.
pub fn head_rows(l_g: usize) -> [usize; 3] {
    let base = l_g / 3;
    [base, base, l_g - 2 * base]
}

impl EncoderParams {
    pub fn init(
        r: usize,
        d_w: usize,
        l_g: usize,
        channels: [usize; 3],
        n_state: usize,
        patch: usize,
        vit_blocks: bool,
        shared_routes: bool,
        rng: &mut Rng,
    ) -> Result<EncoderParams> {
        if r < 16 || r % 16 != 0 {
            return Err(Error::config(format!(
                "image size {r} must be a positive multiple of 16 (stride-16 backbone)"
            )));
        }
        if patch == 0 || r % patch != 0 {
            return Err(Error::config(format!("patch size {patch} must divide {r}")));
        }
        if r / patch != r / 8 {
            return Err(Error::config(format!(
                "patch grid {}x{} must equal the middle feature grid {}x{}",
                r / patch,
                r / patch,
                r / 8,
                r / 8
            )));
        }
        let [c1, c2, c3] = channels;
        if !(c1 < c2 && c2 < c3) {
            return Err(Error::config(format!(
                "backbone channels must increase, got {channels:?}"
            )));
        }
        let rows = head_rows(l_g);
        Ok(EncoderParams {
            stem: Conv2d::init(3, c1, 4, 2, 1, rng),
            stages: vec![
                Stage::init(c1, c1, rng),
                Stage::init(c1, c2, rng),
                Stage::init(c2, c3, rng),
            ],
            patch_lin: Linear::init(3 * patch * patch, c2, rng),
            patch_pos: Tensor::randn_scaled(&[c2, r / patch, r / patch], 0.02, rng),
            refine: channels
                .iter()
                .map(|&c| MixBlockParams::init(c, n_state, shared_routes, vit_blocks, rng))
                .collect(),
            heads: (0..3)
                .map(|i| Head::init(channels[i], rows[i], d_w, rng))
                .collect(),
            r,
            d_w,
            l_g,
            patch,
        })
    }

    pub fn set_disable_ss2d(&mut self, disable: bool) {
        for b in &mut self.refine {
            b.set_disable_ss2d(disable);
        }
    }

    pub fn for_each_param(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.stem.for_each_param(&format!("{prefix}.stem"), f);
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.for_each_param(&format!("{prefix}.s{i}"), f);
        }
        self.patch_lin.for_each_param(&format!("{prefix}.patch"), f);
        f(format!("{prefix}.patch_pos"), &mut self.patch_pos);
        for (i, b) in self.refine.iter_mut().enumerate() {
            b.for_each_param(&format!("{prefix}.refine{i}"), f);
        }
        for (i, h) in self.heads.iter_mut().enumerate() {
            h.for_each_param(&format!("{prefix}.head{i}"), f);
        }
    }

    pub fn bind(&self, g: &Graph, prefix: &str, reg: &mut ParamBindings) -> EncoderVars {
        EncoderVars {
            stem: self.stem.bind(g, &format!("{prefix}.stem"), reg),
            stages: self
                .stages
                .iter()
                .enumerate()
                .map(|(i, s)| s.bind(g, &format!("{prefix}.s{i}"), reg))
                .collect(),
            patch_w: reg.leaf(g, format!("{prefix}.patch.w"), &self.patch_lin.w),
            patch_b: reg.leaf(g, format!("{prefix}.patch.b"), &self.patch_lin.b),
            patch_pos: reg.leaf(g, format!("{prefix}.patch_pos"), &self.patch_pos),
            refine: self
                .refine
                .iter()
                .enumerate()
                .map(|(i, b)| b.bind(g, &format!("{prefix}.refine{i}"), reg))
                .collect(),
            heads: self
                .heads
                .iter()
                .enumerate()
                .map(|(i, h)| h.bind(g, &format!("{prefix}.head{i}"), reg))
                .collect(),
            r: self.r,
            d_w: self.d_w,
            l_g: self.l_g,
            patch: self.patch,
        }
    }
}

#[derive(Clone)]
pub struct EncoderVars {
    pub stem: Conv2dVars,
    pub stages: Vec<StageVars>,
    pub patch_w: Var,
    pub patch_b: Var,
    pub patch_pos: Var,
    pub refine: Vec<MixBlockVars>,
    pub heads: Vec<HeadVars>,
    pub r: usize,
    pub d_w: usize,
    pub l_g: usize,
    pub patch: usize,
}

impl EncoderVars {
    fn check_input(&self, x: &Var) -> Result<()> {
        if x.shape() != [3, self.r, self.r] {
            return Err(Error::shape(format!(
                "encoder wants [3, {0}, {0}], got {1:?}",
                self.r,
                x.shape()
            )));
        }
        Ok(())
    }

    /// Backbone features at strides 4/8/16.
    pub fn backbone(&self, x: &Var) -> Result<(Var, Var, Var)> {
        self.check_input(x)?;
        let s = self.stem.apply(x)?.leaky_relu(LRELU_SLOPE);
        let h1 = self.stages[0].apply(&s)?;
        let h2 = self.stages[1].apply(&h1)?;
        let h3 = self.stages[2].apply(&h2)?;
        Ok((h1, h2, h3))
    }

    /// Patch embedding as a stride-P convolution (patch flatten + linear
    /// are the same operation), plus the positional table.
    pub fn patch_embed(&self, x: &Var) -> Result<Var> {
        self.check_input(x)?;
        let c2 = self.patch_w.shape()[0];
        let p = self.patch;
        let kernel = self.patch_w.reshape(&[c2, 3, p, p])?;
        let emb = x
            .conv2d(&kernel, p, 0)?
            .add(&self.patch_b.reshape(&[c2, 1, 1])?)?;
        emb.add(&self.patch_pos)
    }

    /// Full encoder pass: (w' [L_g, d_w], Ĥ3).
    pub fn encode(&self, x: &Var, mode: ZohMode) -> Result<(Var, Var)> {
        let (h1, h2, h3) = self.backbone(x)?;
        let h2 = h2.add(&self.patch_embed(x)?)?;
        let h1_hat = mix_block(&h1, &self.refine[0], mode)?;
        let h2_hat = mix_block(&h2, &self.refine[1], mode)?;
        let h3_hat = mix_block(&h3, &self.refine[2], mode)?;
        let parts: Vec<Var> = [&h1_hat, &h2_hat, &h3_hat]
            .iter()
            .zip(&self.heads)
            .map(|(h, head)| head.apply(h, self.d_w))
            .collect::<Result<_>>()?;
        let w_prime = concat0(&parts)?;
        debug_assert_eq!(w_prime.shape(), vec![self.l_g, self.d_w]);
        Ok((w_prime, h3_hat))
    }
}

/// Plain-tensor encode for inference paths.
pub fn encode(
    params: &EncoderParams,
    x: &Tensor,
    mode: ZohMode,
) -> Result<(Tensor, Tensor)> {
    let g = Graph::new();
    let mut reg = ParamBindings::new();
    let ev = params.bind(&g, "enc", &mut reg);
    let xv = g.leaf(x.clone());
    let (w, h3) = ev.encode(&xv, mode)?;
    Ok((w.value(), h3.value()))
}
