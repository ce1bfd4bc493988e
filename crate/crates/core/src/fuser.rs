//! Fuser U: merges the deepest encoder feature Ĥ3 with an edit direction
//! d into the skip feature F̂_k injected into the generator. The direction
//! runs through 1D convs and a single 1D selective scan (plain S6, no
//! SS2D), is reshaped onto Ĥ3's grid, and after concatenation the joint
//! feature is refined and upsampled by direction-modulated convolutions.

use crate::error::{Error, Result};
use crate::graph::{concat0, Graph, Var};
use crate::params::{Conv2d, Conv2dVars, Linear, LinearVars, ParamBindings};
use crate::rng::Rng;
use crate::ssm::{s6_forward_var, SsmParams, SsmVars, ZohMode};
use crate::stylegen::mod_conv;
use crate::tensor::Tensor;
use crate::vssm::{mix_block, MixBlockParams, MixBlockVars};

const LRELU_SLOPE: f32 = 0.2;

/// Direction-modulated conv stage: style from the flattened direction,
/// bias init 1 so d = 0 modulates with s ≈ 1 (plain conv, the
/// fidelity-preserving inversion path).
#[derive(Clone)]
pub struct ModBlock {
    pub affine: Linear, // l_g·d_w -> c, bias 1
    pub kernel: Tensor, // [c, c, 3, 3]
    pub bias: Tensor,   // [c]
    pub upsample: bool,
}

impl ModBlock {
    fn init(d_flat: usize, c: usize, upsample: bool, rng: &mut Rng) -> ModBlock {
        ModBlock {
            affine: Linear::init_bias(d_flat, c, 1.0, rng),
            kernel: Tensor::randn_scaled(&[c, c, 3, 3], 1.0 / ((c * 9) as f32).sqrt(), rng),
            bias: Tensor::zeros(&[c]),
            upsample,
        }
    }

    fn for_each_param(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.affine.for_each_param(&format!("{prefix}.affine"), f);
        f(format!("{prefix}.kernel"), &mut self.kernel);
        f(format!("{prefix}.bias"), &mut self.bias);
    }

    fn bind(&self, g: &Graph, prefix: &str, reg: &mut ParamBindings) -> ModBlockVars {
        ModBlockVars {
            affine: self.affine.bind(g, &format!("{prefix}.affine"), reg),
            kernel: reg.leaf(g, format!("{prefix}.kernel"), &self.kernel),
            bias: reg.leaf(g, format!("{prefix}.bias"), &self.bias),
            upsample: self.upsample,
        }
    }
}

#[derive(Clone)]
pub struct ModBlockVars {
    pub affine: LinearVars,
    pub kernel: Var,
    pub bias: Var,
    pub upsample: bool,
}

impl ModBlockVars {
    fn apply(&self, x: &Var, d_flat: &Var) -> Result<Var> {
        let x = if self.upsample { x.upsample2x()? } else { x.clone() };
        let s_row = self.affine.apply(d_flat)?; // [1, c]
        let c = s_row.shape()[1];
        let s = s_row.reshape(&[c])?;
        let y = mod_conv(&x, &s, &self.kernel, true, 1)?;
        y.add(&self.bias.reshape(&[c, 1, 1])?)
    }
}

#[derive(Clone)]
pub struct FuserParams {
    // direction branch
    pub dconv1: Conv2d, // 1D convs realized on a height-1 map: l_g -> c1d
    pub dconv2: Conv2d, // c1d -> c1d
    pub dssm: SsmParams, // 1D scan over the d_w positions, channels c1d
    pub dconv2d: Conv2d, // c_reshaped -> c3 after gridding
    pub dvssm: MixBlockParams,
    // feature branch
    pub fconv1: Conv2d, // c3 -> c3
    pub fconv2: Conv2d,
    // post-concat
    pub merge: Conv2d, // 2·c3 -> c_g
    pub mvssm: MixBlockParams,
    pub mods: Vec<ModBlock>,
    // shape contract
    pub l_g: usize,
    pub d_w: usize,
    pub c3: usize,
    pub h3: usize,
    pub c_g: usize,
    pub k_res: usize,
}

impl FuserParams {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        l_g: usize,
        d_w: usize,
        c3: usize,
        h3: usize,
        c_g: usize,
        k_res: usize,
        c1d: usize,
        n_state: usize,
        vit_blocks: bool,
        shared_routes: bool,
        rng: &mut Rng,
    ) -> Result<FuserParams> {
        let grid = h3 * h3;
        if (c1d * d_w) % grid != 0 {
            return Err(Error::config(format!(
                "direction-branch width {c1d}·{d_w} not divisible by Ĥ3 grid {grid}"
            )));
        }
        if k_res < h3 || k_res % h3 != 0 || !(k_res / h3).is_power_of_two() {
            return Err(Error::config(format!(
                "injection size {k_res} must be a power-of-two multiple of Ĥ3 size {h3}"
            )));
        }
        let c_reshaped = c1d * d_w / grid;
        let n_up = (k_res / h3).trailing_zeros() as usize;
        let d_flat = l_g * d_w;
        // at least two modulated stages even when no upsampling is needed
        let n_mod = n_up.max(2);
        let mods = (0..n_mod)
            .map(|i| ModBlock::init(d_flat, c_g, i < n_up, rng))
            .collect();
        Ok(FuserParams {
            dconv1: Conv2d::init(l_g, c1d, 3, 1, 1, rng),
            dconv2: Conv2d::init(c1d, c1d, 3, 1, 1, rng),
            dssm: SsmParams::init(c1d, n_state, rng),
            dconv2d: Conv2d::init(c_reshaped, c3, 3, 1, 1, rng),
            dvssm: MixBlockParams::init(c3, n_state, shared_routes, vit_blocks, rng),
            fconv1: Conv2d::init(c3, c3, 3, 1, 1, rng),
            fconv2: Conv2d::init(c3, c3, 3, 1, 1, rng),
            merge: Conv2d::init(2 * c3, c_g, 3, 1, 1, rng),
            mvssm: MixBlockParams::init(c_g, n_state, shared_routes, vit_blocks, rng),
            mods,
            l_g,
            d_w,
            c3,
            h3,
            c_g,
            k_res,
        })
    }

    pub fn set_disable_ss2d(&mut self, disable: bool) {
        self.dvssm.set_disable_ss2d(disable);
        self.mvssm.set_disable_ss2d(disable);
    }

    pub fn for_each_param(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.dconv1.for_each_param(&format!("{prefix}.dconv1"), f);
        self.dconv2.for_each_param(&format!("{prefix}.dconv2"), f);
        self.dssm.for_each_param(&format!("{prefix}.dssm"), f);
        self.dconv2d.for_each_param(&format!("{prefix}.dconv2d"), f);
        self.dvssm.for_each_param(&format!("{prefix}.dvssm"), f);
        self.fconv1.for_each_param(&format!("{prefix}.fconv1"), f);
        self.fconv2.for_each_param(&format!("{prefix}.fconv2"), f);
        self.merge.for_each_param(&format!("{prefix}.merge"), f);
        self.mvssm.for_each_param(&format!("{prefix}.mvssm"), f);
        for (i, m) in self.mods.iter_mut().enumerate() {
            m.for_each_param(&format!("{prefix}.mod{i}"), f);
        }
    }

    pub fn bind(&self, g: &Graph, prefix: &str, reg: &mut ParamBindings) -> FuserVars {
        FuserVars {
            dconv1: self.dconv1.bind(g, &format!("{prefix}.dconv1"), reg),
            dconv2: self.dconv2.bind(g, &format!("{prefix}.dconv2"), reg),
            dssm: self.dssm.bind(g, &format!("{prefix}.dssm"), reg),
            dconv2d: self.dconv2d.bind(g, &format!("{prefix}.dconv2d"), reg),
            dvssm: self.dvssm.bind(g, &format!("{prefix}.dvssm"), reg),
            fconv1: self.fconv1.bind(g, &format!("{prefix}.fconv1"), reg),
            fconv2: self.fconv2.bind(g, &format!("{prefix}.fconv2"), reg),
            merge: self.merge.bind(g, &format!("{prefix}.merge"), reg),
            mvssm: self.mvssm.bind(g, &format!("{prefix}.mvssm"), reg),
            mods: self
                .mods
                .iter()
                .enumerate()
                .map(|(i, m)| m.bind(g, &format!("{prefix}.mod{i}"), reg))
                .collect(),
            l_g: self.l_g,
            d_w: self.d_w,
            c3: self.c3,
            h3: self.h3,
            c_g: self.c_g,
            k_res: self.k_res,
        }
    }
}

#[derive(Clone)]
pub struct FuserVars {
    pub dconv1: Conv2dVars,
    pub dconv2: Conv2dVars,
    pub dssm: SsmVars,
    pub dconv2d: Conv2dVars,
    pub dvssm: MixBlockVars,
    pub fconv1: Conv2dVars,
    pub fconv2: Conv2dVars,
    pub merge: Conv2dVars,
    pub mvssm: MixBlockVars,
    pub mods: Vec<ModBlockVars>,
    pub l_g: usize,
    pub d_w: usize,
    pub c3: usize,
    pub h3: usize,
    pub c_g: usize,
    pub k_res: usize,
}

impl FuserVars {
    /// Direction branch: 1D convs over the d_w positions (l_g channels),
    /// one plain S6 scan, row-major reshape onto Ĥ3's grid, conv, VSSM.
    pub fn direction_branch(&self, d: &Var, mode: ZohMode) -> Result<Var> {
        if d.shape() != [self.l_g, self.d_w] {
            return Err(Error::shape(format!(
                "direction wants [{}, {}], got {:?}",
                self.l_g,
                self.d_w,
                d.shape()
            )));
        }
        let seq = d.reshape(&[self.l_g, 1, self.d_w])?; // height-1 map
        let seq = self.dconv1.apply(&seq)?.leaky_relu(LRELU_SLOPE);
        let seq = self.dconv2.apply(&seq)?.leaky_relu(LRELU_SLOPE);
        let c1d = seq.shape()[0];
        // [c1d, d_w] -> tokens [d_w, c1d] for the 1D scan
        let tokens = seq.reshape(&[c1d, self.d_w])?.transpose2d()?;
        let y = s6_forward_var(&tokens, &self.dssm, mode)?; // [d_w, c1d]
        let grid = self.h3 * self.h3;
        let c_reshaped = c1d * self.d_w / grid;
        let gridded = y.reshape(&[c_reshaped, self.h3, self.h3])?;
        let gridded = self.dconv2d.apply(&gridded)?.leaky_relu(LRELU_SLOPE);
        mix_block(&gridded, &self.dvssm, mode)
    }

    /// Full fusion: Ĥ_m from the feature branch, concat(Ĥ_d, Ĥ_m),
    /// merge conv + VSSM, then direction-modulated (upsampling) stages.
    pub fn fuse(&self, h3_hat: &Var, d: &Var, mode: ZohMode) -> Result<Var> {
        if h3_hat.shape() != [self.c3, self.h3, self.h3] {
            return Err(Error::shape(format!(
                "fuser wants Ĥ3 [{}, {}, {}], got {:?}",
                self.c3,
                self.h3,
                self.h3,
                h3_hat.shape()
            )));
        }
        let h_d = self.direction_branch(d, mode)?;
        let h_m = self
            .fconv2
            .apply(&self.fconv1.apply(h3_hat)?.leaky_relu(LRELU_SLOPE))?
            .leaky_relu(LRELU_SLOPE);
        let cat = concat0(&[h_d, h_m])?; // [2·c3, h3, h3]
        let merged = self.merge.apply(&cat)?.leaky_relu(LRELU_SLOPE);
        let mut x = mix_block(&merged, &self.mvssm, mode)?;
        let d_flat = d.reshape(&[1, self.l_g * self.d_w])?;
        let last = self.mods.len() - 1;
        for (i, m) in self.mods.iter().enumerate() {
            x = m.apply(&x, &d_flat)?;
            if i < last {
                x = x.leaky_relu(LRELU_SLOPE);
            }
        }
        debug_assert_eq!(x.shape(), vec![self.c_g, self.k_res, self.k_res]);
        Ok(x)
    }
}
