//! 2D selective scan (SS2D) and the VSSM residual block, plus the
//! transformer block used by the `vit_blocks` ablation.

use crate::error::{Error, Result};
use crate::graph::{layer_norm_ch, Graph, Var};
use crate::params::{Linear, LinearVars, ParamBindings};
use crate::rng::Rng;
use crate::ssm::{s6_forward, s6_forward_var, SsmParams, SsmVars, ZohMode};
use crate::tensor::Tensor;

pub const LN_EPS: f32 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RouteTag {
    LR,
    RL,
    TB,
    BT,
}

/// One scan route: a bijective ordering of the H*W spatial positions.
#[derive(Clone)]
pub struct ScanRoute {
    pub tag: RouteTag,
    pub perm: Vec<usize>,
}

impl ScanRoute {
    /// The four routes in their fixed merge order: LR, RL, TB, BT.
    pub fn all(h: usize, w: usize) -> [ScanRoute; 4] {
        let l = h * w;
        let lr: Vec<usize> = (0..l).collect();
        let rl: Vec<usize> = lr.iter().rev().cloned().collect();
        let tb: Vec<usize> = (0..l).map(|t| (t % h) * w + t / h).collect();
        let bt: Vec<usize> = tb.iter().rev().cloned().collect();
        [
            ScanRoute { tag: RouteTag::LR, perm: lr },
            ScanRoute { tag: RouteTag::RL, perm: rl },
            ScanRoute { tag: RouteTag::TB, perm: tb },
            ScanRoute { tag: RouteTag::BT, perm: bt },
        ]
    }

    pub fn inverse(&self) -> Vec<usize> {
        let mut inv = vec![0usize; self.perm.len()];
        for (t, &p) in self.perm.iter().enumerate() {
            inv[p] = t;
        }
        inv
    }
}

/// Expand a [C,H,W] map into the four route sequences, each [H*W, C].
pub fn ss2d_expand(f: &Tensor) -> Result<[Tensor; 4]> {
    let (c, h, w) = crate::graph::dims3(f)?;
    let l = h * w;
    let fd = f.data();
    let routes = ScanRoute::all(h, w);
    let mut out: Vec<Tensor> = Vec::with_capacity(4);
    for route in &routes {
        let mut seq = vec![0.0f32; l * c];
        for (t, &p) in route.perm.iter().enumerate() {
            for ch in 0..c {
                seq[t * c + ch] = fd[ch * l + p];
            }
        }
        out.push(Tensor::new(vec![l, c], seq)?);
    }
    Ok([
        out[0].clone(),
        out[1].clone(),
        out[2].clone(),
        out[3].clone(),
    ])
}

pub(crate) fn map_to_tokens(f: &Var) -> Result<Var> {
    let s = f.shape();
    let (c, l) = (s[0], s[1] * s[2]);
    f.reshape(&[c, l])?.transpose2d()
}

pub(crate) fn tokens_to_map(t: &Var, c: usize, h: usize, w: usize) -> Result<Var> {
    t.transpose2d()?.reshape(&[c, h, w])
}

/// SS2D over a bound graph: scan the map along each route with S6,
/// restore the spatial layout and sum the four results (LR+RL+TB+BT).
pub fn ss2d_var(f: &Var, ssm: &[SsmVars], mode: ZohMode) -> Result<Var> {
    let s = f.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    if ssm.len() != 1 && ssm.len() != 4 {
        return Err(Error::contract("ss2d wants 1 (shared) or 4 SSMs".to_string()));
    }
    let routes = ScanRoute::all(h, w);
    let tokens = map_to_tokens(f)?; // [L, C] row-major spatial
    let mut acc: Option<Var> = None;
    for (i, route) in routes.iter().enumerate() {
        let p = &ssm[i % ssm.len()];
        let seq = tokens.gather_rows(&route.perm)?;
        let y = s6_forward_var(&seq, p, mode)?;
        let back = y.gather_rows(&route.inverse())?;
        acc = Some(match acc {
            None => back,
            Some(a) => a.add(&back)?,
        });
    }
    tokens_to_map(&acc.unwrap(), c, h, w)
}

/// Plain-tensor SS2D, used as the composition oracle and by cost probes.
pub fn ss2d(f: &Tensor, ssm: &[SsmParams], mode: ZohMode) -> Result<Tensor> {
    let (c, h, w) = crate::graph::dims3(f)?;
    let l = h * w;
    let routes = ScanRoute::all(h, w);
    let seqs = ss2d_expand(f)?;
    let mut acc = Tensor::zeros(&[l, c]);
    for (i, route) in routes.iter().enumerate() {
        let p = &ssm[i % ssm.len()];
        let y = s6_forward(&seqs[i], p, mode)?;
        // inverse-permute back to row-major order
        let yd = y.data();
        let inv = route.inverse();
        let mut back = vec![0.0f32; l * c];
        for (t, &dst) in inv.iter().enumerate() {
            back[t * c..(t + 1) * c].copy_from_slice(&yd[dst * c..(dst + 1) * c]);
        }
        acc = acc.add(&Tensor::new(vec![l, c], back)?)?;
    }
    acc.transpose2d()?.reshape(&[c, h, w])
}

/// Residual VSSM block parameters (VMamba-style wiring).
#[derive(Clone)]
pub struct VssmBlockParams {
    pub norm_gamma: Tensor,
    pub norm_beta: Tensor,
    pub in_lin: Linear,
    pub dw_kernel: Tensor,
    pub ssm: Vec<SsmParams>,
    pub norm2_gamma: Tensor,
    pub norm2_beta: Tensor,
    pub gate: Linear,
    pub out: Linear,
    pub disable_ss2d: bool,
}

impl VssmBlockParams {
    pub fn init(c: usize, n_state: usize, shared_routes: bool, rng: &mut Rng) -> VssmBlockParams {
        let n_ssm = if shared_routes { 1 } else { 4 };
        VssmBlockParams {
            norm_gamma: Tensor::full(&[c], 1.0),
            norm_beta: Tensor::zeros(&[c]),
            in_lin: Linear::init(c, c, rng),
            dw_kernel: Tensor::randn_scaled(&[c, 3, 3], 1.0 / 3.0, rng),
            ssm: (0..n_ssm).map(|_| SsmParams::init(c, n_state, rng)).collect(),
            norm2_gamma: Tensor::full(&[c], 1.0),
            norm2_beta: Tensor::zeros(&[c]),
            gate: Linear::init(c, c, rng),
            out: Linear::init(c, c, rng),
            disable_ss2d: false,
        }
    }

    pub fn for_each_param(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.norm_gamma"), &mut self.norm_gamma);
        f(format!("{prefix}.norm_beta"), &mut self.norm_beta);
        self.in_lin.for_each_param(&format!("{prefix}.in_lin"), f);
        f(format!("{prefix}.dw_kernel"), &mut self.dw_kernel);
        for (i, s) in self.ssm.iter_mut().enumerate() {
            s.for_each_param(&format!("{prefix}.ssm{i}"), f);
        }
        f(format!("{prefix}.norm2_gamma"), &mut self.norm2_gamma);
        f(format!("{prefix}.norm2_beta"), &mut self.norm2_beta);
        self.gate.for_each_param(&format!("{prefix}.gate"), f);
        self.out.for_each_param(&format!("{prefix}.out"), f);
    }

    pub fn bind(&self, g: &Graph, prefix: &str, reg: &mut ParamBindings) -> VssmBlockVars {
        VssmBlockVars {
            norm_gamma: reg.leaf(g, format!("{prefix}.norm_gamma"), &self.norm_gamma),
            norm_beta: reg.leaf(g, format!("{prefix}.norm_beta"), &self.norm_beta),
            in_lin: self.in_lin.bind(g, &format!("{prefix}.in_lin"), reg),
            dw_kernel: reg.leaf(g, format!("{prefix}.dw_kernel"), &self.dw_kernel),
            ssm: self
                .ssm
                .iter()
                .enumerate()
                .map(|(i, s)| s.bind(g, &format!("{prefix}.ssm{i}"), reg))
                .collect(),
            norm2_gamma: reg.leaf(g, format!("{prefix}.norm2_gamma"), &self.norm2_gamma),
            norm2_beta: reg.leaf(g, format!("{prefix}.norm2_beta"), &self.norm2_beta),
            gate: self.gate.bind(g, &format!("{prefix}.gate"), reg),
            out: self.out.bind(g, &format!("{prefix}.out"), reg),
            disable_ss2d: self.disable_ss2d,
        }
    }
}

#[derive(Clone)]
pub struct VssmBlockVars {
    pub norm_gamma: Var,
    pub norm_beta: Var,
    pub in_lin: LinearVars,
    pub dw_kernel: Var,
    pub ssm: Vec<SsmVars>,
    pub norm2_gamma: Var,
    pub norm2_beta: Var,
    pub gate: LinearVars,
    pub out: LinearVars,
    pub disable_ss2d: bool,
}

/// f + OutLin( Norm2(SS2D(SiLU(DWConv(InLin(Norm(f)))))) * SiLU(GateLin(Norm(f))) )
pub fn vssm_block(f: &Var, p: &VssmBlockVars, mode: ZohMode) -> Result<Var> {
    let s = f.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let n1 = layer_norm_ch(f, &p.norm_gamma, &p.norm_beta, LN_EPS)?;
    let n1_tokens = map_to_tokens(&n1)?;

    let branch = p.in_lin.apply(&n1_tokens)?;
    let branch = tokens_to_map(&branch, c, h, w)?;
    let branch = branch.dwconv2d(&p.dw_kernel, 1)?.silu();
    let branch = if p.disable_ss2d {
        branch
    } else {
        ss2d_var(&branch, &p.ssm, mode)?
    };
    let branch = layer_norm_ch(&branch, &p.norm2_gamma, &p.norm2_beta, LN_EPS)?;

    let gate = p.gate.apply(&n1_tokens)?.silu();
    let gate = tokens_to_map(&gate, c, h, w)?;

    let gated_tokens = map_to_tokens(&branch.mul(&gate)?)?;
    let out = tokens_to_map(&p.out.apply(&gated_tokens)?, c, h, w)?;
    f.add(&out)
}

/// Minimal single-head transformer block over spatial tokens; stands in
/// for the VSSM block in the `vit_blocks` ablation.
#[derive(Clone)]
pub struct VitBlockParams {
    pub norm_gamma: Tensor,
    pub norm_beta: Tensor,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    pub norm2_gamma: Tensor,
    pub norm2_beta: Tensor,
    pub mlp1: Linear,
    pub mlp2: Linear,
}

impl VitBlockParams {
    pub fn init(c: usize, rng: &mut Rng) -> VitBlockParams {
        VitBlockParams {
            norm_gamma: Tensor::full(&[c], 1.0),
            norm_beta: Tensor::zeros(&[c]),
            q: Linear::init(c, c, rng),
            k: Linear::init(c, c, rng),
            v: Linear::init(c, c, rng),
            proj: Linear::init(c, c, rng),
            norm2_gamma: Tensor::full(&[c], 1.0),
            norm2_beta: Tensor::zeros(&[c]),
            mlp1: Linear::init(c, 2 * c, rng),
            mlp2: Linear::init(2 * c, c, rng),
        }
    }

    pub fn for_each_param(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.norm_gamma"), &mut self.norm_gamma);
        f(format!("{prefix}.norm_beta"), &mut self.norm_beta);
        self.q.for_each_param(&format!("{prefix}.q"), f);
        self.k.for_each_param(&format!("{prefix}.k"), f);
        self.v.for_each_param(&format!("{prefix}.v"), f);
        self.proj.for_each_param(&format!("{prefix}.proj"), f);
        f(format!("{prefix}.norm2_gamma"), &mut self.norm2_gamma);
        f(format!("{prefix}.norm2_beta"), &mut self.norm2_beta);
        self.mlp1.for_each_param(&format!("{prefix}.mlp1"), f);
        self.mlp2.for_each_param(&format!("{prefix}.mlp2"), f);
    }

    pub fn bind(&self, g: &Graph, prefix: &str, reg: &mut ParamBindings) -> VitBlockVars {
        VitBlockVars {
            norm_gamma: reg.leaf(g, format!("{prefix}.norm_gamma"), &self.norm_gamma),
            norm_beta: reg.leaf(g, format!("{prefix}.norm_beta"), &self.norm_beta),
            q: self.q.bind(g, &format!("{prefix}.q"), reg),
            k: self.k.bind(g, &format!("{prefix}.k"), reg),
            v: self.v.bind(g, &format!("{prefix}.v"), reg),
            proj: self.proj.bind(g, &format!("{prefix}.proj"), reg),
            norm2_gamma: reg.leaf(g, format!("{prefix}.norm2_gamma"), &self.norm2_gamma),
            norm2_beta: reg.leaf(g, format!("{prefix}.norm2_beta"), &self.norm2_beta),
            mlp1: self.mlp1.bind(g, &format!("{prefix}.mlp1"), reg),
            mlp2: self.mlp2.bind(g, &format!("{prefix}.mlp2"), reg),
        }
    }
}

#[derive(Clone)]
pub struct VitBlockVars {
    pub norm_gamma: Var,
    pub norm_beta: Var,
    pub q: LinearVars,
    pub k: LinearVars,
    pub v: LinearVars,
    pub proj: LinearVars,
    pub norm2_gamma: Var,
    pub norm2_beta: Var,
    pub mlp1: LinearVars,
    pub mlp2: LinearVars,
}

pub fn vit_block(f: &Var, p: &VitBlockVars) -> Result<Var> {
    let s = f.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let n1 = layer_norm_ch(f, &p.norm_gamma, &p.norm_beta, LN_EPS)?;
    let t = map_to_tokens(&n1)?;
    let q = p.q.apply(&t)?;
    let k = p.k.apply(&t)?;
    let v = p.v.apply(&t)?;
    let attn = q
        .matmul(&k.transpose2d()?)?
        .scale(1.0 / (c as f32).sqrt())
        .softmax_rows()?;
    let mixed = p.proj.apply(&attn.matmul(&v)?)?;
    let f = f.add(&tokens_to_map(&mixed, c, h, w)?)?;
    let n2 = layer_norm_ch(&f, &p.norm2_gamma, &p.norm2_beta, LN_EPS)?;
    let t2 = map_to_tokens(&n2)?;
    let m = p.mlp2.apply(&p.mlp1.apply(&t2)?.silu())?;
    f.add(&tokens_to_map(&m, c, h, w)?)
}

/// Feature-mixing block: VSSM by default, transformer under the ablation.
#[derive(Clone)]
pub enum MixBlockParams {
    Vssm(VssmBlockParams),
    Vit(VitBlockParams),
}

impl MixBlockParams {
    pub fn init(
        c: usize,
        n_state: usize,
        shared_routes: bool,
        vit: bool,
        rng: &mut Rng,
    ) -> MixBlockParams {
        if vit {
            MixBlockParams::Vit(VitBlockParams::init(c, rng))
        } else {
            MixBlockParams::Vssm(VssmBlockParams::init(c, n_state, shared_routes, rng))
        }
    }

    pub fn set_disable_ss2d(&mut self, disable: bool) {
        if let MixBlockParams::Vssm(p) = self {
            p.disable_ss2d = disable;
        }
    }

    pub fn for_each_param(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        match self {
            MixBlockParams::Vssm(p) => p.for_each_param(prefix, f),
            MixBlockParams::Vit(p) => p.for_each_param(prefix, f),
        }
    }

    pub fn bind(&self, g: &Graph, prefix: &str, reg: &mut ParamBindings) -> MixBlockVars {
        match self {
            MixBlockParams::Vssm(p) => MixBlockVars::Vssm(p.bind(g, prefix, reg)),
            MixBlockParams::Vit(p) => MixBlockVars::Vit(p.bind(g, prefix, reg)),
        }
    }
}

#[derive(Clone)]
pub enum MixBlockVars {
    Vssm(VssmBlockVars),
    Vit(VitBlockVars),
}

pub fn mix_block(f: &Var, p: &MixBlockVars, mode: ZohMode) -> Result<Var> {
    match p {
        MixBlockVars::Vssm(p) => vssm_block(f, p, mode),
        MixBlockVars::Vit(p) => vit_block(f, p),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients_with;

    fn rng(label: &str) -> Rng {
        Rng::new(77).stream(label)
    }

    #[test]
    fn expand_2x2_routes() {
        let f = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let seqs = ss2d_expand(&f).unwrap();
        assert_eq!(seqs[0].to_vec(), vec![1.0, 2.0, 3.0, 4.0]); // LR
        assert_eq!(seqs[1].to_vec(), vec![4.0, 3.0, 2.0, 1.0]); // RL
        assert_eq!(seqs[2].to_vec(), vec![1.0, 3.0, 2.0, 4.0]); // TB
        assert_eq!(seqs[3].to_vec(), vec![4.0, 2.0, 3.0, 1.0]); // BT
    }

    #[test]
    fn expand_singleton() {
        let f = Tensor::new(vec![1, 1, 1], vec![5.5]).unwrap();
        for s in ss2d_expand(&f).unwrap() {
            assert_eq!(s.to_vec(), vec![5.5]);
        }
    }

    #[test]
    fn expand_preserves_multiset() {
        let mut r = rng("multiset");
        let f = Tensor::randn(&[3, 4, 5], &mut r);
        let mut want: Vec<u32> = f.data().iter().map(|v| v.to_bits()).collect();
        want.sort_unstable();
        for s in ss2d_expand(&f).unwrap() {
            let mut got: Vec<u32> = s.data().iter().map(|v| v.to_bits()).collect();
            got.sort_unstable();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn routes_are_bijections_and_reverses() {
        let routes = ScanRoute::all(3, 4);
        for r in &routes {
            let mut seen = vec![false; 12];
            for &p in &r.perm {
                assert!(!seen[p]);
                seen[p] = true;
            }
        }
        let rl: Vec<usize> = routes[0].perm.iter().rev().cloned().collect();
        assert_eq!(routes[1].perm, rl);
        let bt: Vec<usize> = routes[2].perm.iter().rev().cloned().collect();
        assert_eq!(routes[3].perm, bt);
    }

    #[test]
    fn expand_then_inverse_is_identity_bitwise() {
        let mut r = rng("inv");
        let f = Tensor::randn(&[2, 3, 4], &mut r);
        let seqs = ss2d_expand(&f).unwrap();
        let routes = ScanRoute::all(3, 4);
        for (seq, route) in seqs.iter().zip(&routes) {
            let inv = route.inverse();
            let c = 2;
            let l = 12;
            let sd = seq.data();
            let mut back = vec![0.0f32; l * c];
            for (t, &src) in inv.iter().enumerate() {
                back[t * c..(t + 1) * c].copy_from_slice(&sd[src * c..(src + 1) * c]);
            }
            let restored = Tensor::new(vec![l, c], back)
                .unwrap()
                .transpose2d()
                .unwrap()
                .reshape(&[2, 3, 4])
                .unwrap();
            assert!(restored.bitwise_eq(&f));
        }
    }

    fn zeroed_skip_ssm(c: usize, n: usize, r: &mut Rng) -> SsmParams {
        let mut p = SsmParams::init(c, n, r);
        p.b_proj = Tensor::zeros(&[n, c]);
        p.c_proj = Tensor::zeros(&[n, c]);
        p.d_skip = Tensor::full(&[c], 1.0);
        p
    }

    #[test]
    fn ss2d_skip_only_quadruples_input() {
        let mut r = rng("skip4");
        let f = Tensor::randn(&[2, 3, 3], &mut r);
        let ssm: Vec<SsmParams> = (0..4).map(|_| zeroed_skip_ssm(2, 2, &mut r)).collect();
        let y = ss2d(&f, &ssm, ZohMode::Simplified).unwrap();
        for (a, b) in y.data().iter().zip(f.data()) {
            assert!((a - 4.0 * b).abs() < 1e-5);
        }
    }

    #[test]
    fn ss2d_singleton_spatial_is_four_single_steps() {
        let mut r = rng("single");
        let f = Tensor::randn(&[3, 1, 1], &mut r);
        let p = SsmParams::init(3, 2, &mut r);
        let ssm = vec![p.clone(); 4];
        let y = ss2d(&f, &ssm, ZohMode::Simplified).unwrap();
        let x = f.reshape(&[1, 3]).unwrap();
        let single = s6_forward(&x, &p, ZohMode::Simplified).unwrap();
        for (a, b) in y.data().iter().zip(single.data()) {
            assert!((a - 4.0 * b).abs() < 1e-5, "{a} vs {}", 4.0 * b);
        }
    }

    #[test]
    fn ss2d_var_matches_plain_composition_oracle() {
        let mut r = rng("oracle");
        let f = Tensor::randn(&[3, 2, 4], &mut r);
        let ssm: Vec<SsmParams> = (0..4).map(|_| SsmParams::init(3, 2, &mut r)).collect();
        let want = ss2d(&f, &ssm, ZohMode::Simplified).unwrap();
        let g = Graph::new();
        let mut reg = ParamBindings::new();
        let vars: Vec<SsmVars> = ssm
            .iter()
            .enumerate()
            .map(|(i, s)| s.bind(&g, &format!("r{i}"), &mut reg))
            .collect();
        let fv = g.leaf(f);
        let got = ss2d_var(&fv, &vars, ZohMode::Simplified).unwrap().value();
        let gap = want
            .data()
            .iter()
            .zip(got.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(gap < 1e-5, "gap {gap}");
    }

    #[test]
    fn ss2d_transpose_consistency() {
        let mut r = rng("transpose");
        let (h, w) = (3, 4);
        let f = Tensor::randn(&[2, h, w], &mut r);
        let ssm: Vec<SsmParams> = (0..4).map(|_| SsmParams::init(2, 2, &mut r)).collect();
        let y = ss2d(&f, &ssm, ZohMode::Simplified).unwrap();
        // transpose spatial dims of f
        let fd = f.data();
        let mut ft = vec![0.0f32; 2 * h * w];
        for c in 0..2 {
            for i in 0..h {
                for j in 0..w {
                    ft[c * h * w + j * h + i] = fd[c * h * w + i * w + j];
                }
            }
        }
        let ft = Tensor::new(vec![2, w, h], ft).unwrap();
        // swapped route roles: LR<->TB, RL<->BT
        let swapped = vec![ssm[2].clone(), ssm[3].clone(), ssm[0].clone(), ssm[1].clone()];
        let yt = ss2d(&ft, &swapped, ZohMode::Simplified).unwrap();
        for c in 0..2 {
            for i in 0..h {
                for j in 0..w {
                    let a = y.data()[c * h * w + i * w + j];
                    let b = yt.data()[c * h * w + j * h + i];
                    assert!((a - b).abs() < 1e-6, "({c},{i},{j}): {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn vssm_block_zero_branch_is_identity_bitwise() {
        let mut r = rng("resid");
        let mut p = VssmBlockParams::init(3, 2, false, &mut r);
        p.out.w = Tensor::zeros(&[3, 3]);
        p.out.b = Tensor::zeros(&[3]);
        let f = Tensor::randn(&[3, 4, 4], &mut r);
        let g = Graph::new();
        let mut reg = ParamBindings::new();
        let pv = p.bind(&g, "blk", &mut reg);
        let fv = g.leaf(f.clone());
        let y = vssm_block(&fv, &pv, ZohMode::Simplified).unwrap().value();
        assert!(y.bitwise_eq(&f));
    }

    #[test]
    fn vssm_block_zero_input_zero_biases_gives_zero() {
        let mut r = rng("zero");
        let p = VssmBlockParams::init(2, 2, true, &mut r);
        let f = Tensor::zeros(&[2, 3, 3]);
        let g = Graph::new();
        let mut reg = ParamBindings::new();
        let pv = p.bind(&g, "blk", &mut reg);
        let fv = g.leaf(f);
        let y = vssm_block(&fv, &pv, ZohMode::Simplified).unwrap().value();
        // norm of a constant-zero map is zero, biases are zero at init
        assert!(y.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn vssm_block_preserves_shape() {
        let mut r = rng("shape");
        for (c, h, w) in [(2usize, 3usize, 5usize), (4, 1, 1), (3, 2, 2)] {
            let p = VssmBlockParams::init(c, 2, true, &mut r);
            let g = Graph::new();
            let mut reg = ParamBindings::new();
            let pv = p.bind(&g, "blk", &mut reg);
            let fv = g.leaf(Tensor::randn(&[c, h, w], &mut r));
            let y = vssm_block(&fv, &pv, ZohMode::Simplified).unwrap();
            assert_eq!(y.shape(), vec![c, h, w]);
        }
    }

    #[test]
    fn vssm_block_gradients() {
        let mut r = rng("grad");
        let p = VssmBlockParams::init(2, 2, true, &mut r);
        let f = Tensor::randn(&[2, 2, 2], &mut r);
        check_gradients_with(
            &[f],
            |g, vars| {
                let mut reg = ParamBindings::new();
                let pv = p.bind(g, "blk", &mut reg);
                Ok(vssm_block(&vars[0], &pv, ZohMode::Simplified)?.mean_all())
            },
            1e-3,
            1e-3,
            &mut r,
        )
        .unwrap();
    }

    #[test]
    fn vit_block_gradients_and_shape() {
        let mut r = rng("vit");
        let p = VitBlockParams::init(2, &mut r);
        let f = Tensor::randn(&[2, 2, 2], &mut r);
        check_gradients_with(
            &[f],
            |g, vars| {
                let mut reg = ParamBindings::new();
                let pv = p.bind(g, "vit", &mut reg);
                let y = vit_block(&vars[0], &pv)?;
                assert_eq!(y.shape(), vec![2, 2, 2]);
                Ok(y.mean_all())
            },
            1e-3,
            1e-3,
            &mut r,
        )
        .unwrap();
    }
}
