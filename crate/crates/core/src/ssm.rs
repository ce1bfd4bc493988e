//! State-space machinery: ZOH discretization, sequential and associative
//! parallel scans, and the input-selective S6 layer.
//!
//! The state matrix is diagonal per channel, parameterized as
//! `A = -exp(a_log)` so it stays strictly negative and the discrete
//! recurrence `|exp(delta * A)| < 1` is stable for any positive step.

use crate::error::{Error, Result};
use crate::graph::{dims3, selective_scan, Graph, Var};
use crate::params::ParamBindings;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ZohMode {
    /// B_bar = (delta A)^-1 (exp(delta A) - 1) delta B, elementwise.
    Exact,
    /// B_bar = delta B (the common S6 simplification).
    Simplified,
}

/// Parameters of one S6 layer over `d_ch` channels with state size `n`.
#[derive(Clone)]
pub struct SsmParams {
    /// [D, N]; A = -exp(a_log)
    pub a_log: Tensor,
    /// [N, D]; B_t = b_proj . x_t
    pub b_proj: Tensor,
    /// [N, D]; C_t = c_proj . x_t
    pub c_proj: Tensor,
    /// [1, D]; scalar step logit per timestep
    pub delta_proj: Tensor,
    /// [D]; per-channel step bias
    pub delta_bias: Tensor,
    /// [D]; skip path
    pub d_skip: Tensor,
}

impl SsmParams {
    pub fn init(d_ch: usize, n: usize, rng: &mut Rng) -> SsmParams {
        // a_log: log of linspace(1, N) per channel
        let mut a_log = Vec::with_capacity(d_ch * n);
        for _ in 0..d_ch {
            for i in 0..n {
                a_log.push(((i + 1) as f32).ln());
            }
        }
        let scale = 1.0 / (d_ch as f32).sqrt();
        // delta bias: inverse softplus of a step in [1e-3, 1e-1]
        let mut delta_bias = Vec::with_capacity(d_ch);
        for _ in 0..d_ch {
            let dt = (10f32).powf(rng.uniform_range(-3.0, -1.0));
            delta_bias.push((dt.exp() - 1.0).ln());
        }
        SsmParams {
            a_log: Tensor::new(vec![d_ch, n], a_log).unwrap(),
            b_proj: Tensor::randn_scaled(&[n, d_ch], scale, rng),
            c_proj: Tensor::randn_scaled(&[n, d_ch], scale, rng),
            delta_proj: Tensor::randn_scaled(&[1, d_ch], scale, rng),
            delta_bias: Tensor::new(vec![d_ch], delta_bias).unwrap(),
            d_skip: Tensor::full(&[d_ch], 1.0),
        }
    }

    pub fn d_ch(&self) -> usize {
        self.a_log.shape()[0]
    }

    pub fn state_size(&self) -> usize {
        self.a_log.shape()[1]
    }

    pub fn for_each_param(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(String, &mut Tensor),
    ) {
        f(format!("{prefix}.a_log"), &mut self.a_log);
        f(format!("{prefix}.b_proj"), &mut self.b_proj);
        f(format!("{prefix}.c_proj"), &mut self.c_proj);
        f(format!("{prefix}.delta_proj"), &mut self.delta_proj);
        f(format!("{prefix}.delta_bias"), &mut self.delta_bias);
        f(format!("{prefix}.d_skip"), &mut self.d_skip);
    }

    pub fn bind(&self, g: &Graph, prefix: &str, reg: &mut ParamBindings) -> SsmVars {
        SsmVars {
            a_log: reg.leaf(g, format!("{prefix}.a_log"), &self.a_log),
            b_proj: reg.leaf(g, format!("{prefix}.b_proj"), &self.b_proj),
            c_proj: reg.leaf(g, format!("{prefix}.c_proj"), &self.c_proj),
            delta_proj: reg.leaf(g, format!("{prefix}.delta_proj"), &self.delta_proj),
            delta_bias: reg.leaf(g, format!("{prefix}.delta_bias"), &self.delta_bias),
            d_skip: reg.leaf(g, format!("{prefix}.d_skip"), &self.d_skip),
        }
    }
}

/// Graph-bound view of `SsmParams`.
#[derive(Clone)]
pub struct SsmVars {
    pub a_log: Var,
    pub b_proj: Var,
    pub c_proj: Var,
    pub delta_proj: Var,
    pub delta_bias: Var,
    pub d_skip: Var,
}

/// Discretized per-step system: carries `A_bar`, `B_bar x` and the output
/// map `C_t`.
pub struct DiscreteStep {
    /// [L, D, N]
    pub a_bar: Tensor,
    /// [L, D, N]; B_bar_t * x_t premultiplied
    pub b_bar_x: Tensor,
    /// [L, N]
    pub c: Tensor,
}

/// ZOH discretization of a diagonal system.
///
/// `a_diag` [D,N] (strictly negative), `b` [L,N] per-step input maps,
/// `delta` [L,D] nonnegative steps. Returns (`a_bar` [L,D,N], `b_bar`
/// [L,D,N]).
pub fn zoh_discretize(
    a_diag: &Tensor,
    b: &Tensor,
    delta: &Tensor,
    mode: ZohMode,
) -> Result<(Tensor, Tensor)> {
    let (d, n) = match a_diag.shape()[..] {
        [d, n] => (d, n),
        _ => return Err(Error::shape("a_diag must be [D,N]".to_string())),
    };
    let l = match delta.shape()[..] {
        [l, dd] if dd == d => l,
        _ => {
            return Err(Error::shape(format!(
                "delta shape {:?}, want [L, {d}]",
                delta.shape()
            )))
        }
    };
    if b.shape() != [l, n] {
        return Err(Error::shape(format!(
            "b shape {:?}, want [{l}, {n}]",
            b.shape()
        )));
    }
    if a_diag.data().iter().any(|&a| a >= 0.0) {
        return Err(Error::domain("a_diag must be strictly negative".to_string()));
    }
    if delta.data().iter().any(|&dt| dt < 0.0) {
        return Err(Error::domain("delta must be nonnegative".to_string()));
    }
    let ad = a_diag.data();
    let bd = b.data();
    let dd = delta.data();
    let mut a_bar = vec![0.0f32; l * d * n];
    let mut b_bar = vec![0.0f32; l * d * n];
    for t in 0..l {
        for di in 0..d {
            let dt = dd[t * d + di] as f64;
            for ni in 0..n {
                let a = ad[di * n + ni] as f64;
                let ab = (dt * a).exp();
                a_bar[t * d * n + di * n + ni] = ab as f32;
                b_bar[t * d * n + di * n + ni] = match mode {
                    ZohMode::Simplified => (dt * bd[t * n + ni] as f64) as f32,
                    // (delta A)^-1 (exp(delta A)-1) delta B == expm1(dt a)/a * B,
                    // f64 + expm1 keeps the A -> 0 limit exact
                    ZohMode::Exact => ((dt * a).exp_m1() / a * bd[t * n + ni] as f64) as f32,
                };
            }
        }
    }
    Ok((
        Tensor::new(vec![l, d, n], a_bar)?,
        Tensor::new(vec![l, d, n], b_bar)?,
    ))
}

fn check_scan_shapes(steps: &DiscreteStep, x: &Tensor, d_skip: &Tensor) -> Result<(usize, usize, usize)> {
    let (l, d, n) = dims3(&steps.a_bar)?;
    if steps.b_bar_x.shape() != [l, d, n] {
        return Err(Error::shape("b_bar_x shape mismatch".to_string()));
    }
    if steps.c.shape() != [l, n] {
        return Err(Error::shape("c shape mismatch".to_string()));
    }
    if x.shape() != [l, d] {
        return Err(Error::shape(format!(
            "x shape {:?}, want [{l}, {d}]",
            x.shape()
        )));
    }
    if d_skip.shape() != [d] {
        return Err(Error::shape(format!(
            "d_skip shape {:?}, want [{d}]",
            d_skip.shape()
        )));
    }
    Ok((l, d, n))
}

/// Left-to-right recurrence, O(L N D) work, h0 = 0.
pub fn scan_sequential(steps: &DiscreteStep, x: &Tensor, d_skip: &Tensor) -> Result<Tensor> {
    let (l, d, n) = check_scan_shapes(steps, x, d_skip)?;
    let ad = steps.a_bar.data();
    let ud = steps.b_bar_x.data();
    let cd = steps.c.data();
    let xd = x.data();
    let dd = d_skip.data();
    let mut h = vec![0.0f32; d * n];
    let mut y = vec![0.0f32; l * d];
    for t in 0..l {
        for di in 0..d {
            let base = t * d * n + di * n;
            let mut acc = 0.0f64;
            for ni in 0..n {
                let hv = ad[base + ni] * h[di * n + ni] + ud[base + ni];
                h[di * n + ni] = hv;
                acc += (hv * cd[t * n + ni]) as f64;
            }
            y[t * d + di] = acc as f32 + dd[di] * xd[t * d + di];
        }
    }
    Tensor::new(vec![l, d], y)
}

/// Associative combine on (A, Bx) pairs:
/// (a1,b1) then (a2,b2) composes to (a1*a2, a2*b1 + b2).
#[inline]
pub fn combine(a1: &[f32], b1: &[f32], a2: &[f32], b2: &[f32], ao: &mut [f32], bo: &mut [f32]) {
    for i in 0..a1.len() {
        ao[i] = a1[i] * a2[i];
        bo[i] = a2[i] * b1[i] + b2[i];
    }
}

/// Same contract as `scan_sequential`, evaluated by a balanced
/// combine tree (O(L) work, O(log L) depth, fixed tree shape).
pub fn scan_parallel(steps: &DiscreteStep, x: &Tensor, d_skip: &Tensor) -> Result<Tensor> {
    let (l, d, n) = check_scan_shapes(steps, x, d_skip)?;
    let m = d * n;
    let ad = steps.a_bar.data();
    let ud = steps.b_bar_x.data();
    let mut a: Vec<Vec<f32>> = (0..l).map(|t| ad[t * m..(t + 1) * m].to_vec()).collect();
    let mut b: Vec<Vec<f32>> = (0..l).map(|t| ud[t * m..(t + 1) * m].to_vec()).collect();
    prefix_scan(&mut a, &mut b, m);
    // b[t] now holds h_t
    let cd = steps.c.data();
    let xd = x.data();
    let dd = d_skip.data();
    let mut y = vec![0.0f32; l * d];
    for t in 0..l {
        for di in 0..d {
            let mut acc = 0.0f64;
            for ni in 0..n {
                acc += (b[t][di * n + ni] * cd[t * n + ni]) as f64;
            }
            y[t * d + di] = acc as f32 + dd[di] * xd[t * d + di];
        }
    }
    Tensor::new(vec![l, d], y)
}

/// In-place inclusive prefix under `combine`, recursive pairing.
fn prefix_scan(a: &mut [Vec<f32>], b: &mut [Vec<f32>], m: usize) {
    let l = a.len();
    if l <= 1 {
        return;
    }
    let half = l / 2;
    let mut ca: Vec<Vec<f32>> = Vec::with_capacity(half);
    let mut cb: Vec<Vec<f32>> = Vec::with_capacity(half);
    for i in 0..half {
        let mut ao = vec![0.0f32; m];
        let mut bo = vec![0.0f32; m];
        combine(&a[2 * i], &b[2 * i], &a[2 * i + 1], &b[2 * i + 1], &mut ao, &mut bo);
        ca.push(ao);
        cb.push(bo);
    }
    prefix_scan(&mut ca, &mut cb, m);
    // expand: odd positions take the combined prefix directly, even
    // positions compose the previous combined prefix with their element.
    for i in (0..l).rev() {
        if i % 2 == 1 {
            a[i] = ca[i / 2].clone();
            b[i] = cb[i / 2].clone();
        } else if i > 0 {
            let mut ao = vec![0.0f32; m];
            let mut bo = vec![0.0f32; m];
            combine(&ca[i / 2 - 1], &cb[i / 2 - 1], &a[i], &b[i], &mut ao, &mut bo);
            a[i] = ao;
            b[i] = bo;
        }
    }
}

/// Input-dependent selection (plain tensors): B, C from linear maps of x,
/// step from softplus of a linear map, then discretize and scan.
pub fn s6_forward(x: &Tensor, p: &SsmParams, mode: ZohMode) -> Result<Tensor> {
    x.check_finite("s6 input")?;
    let d = p.d_ch();
    let l = match x.shape()[..] {
        [l, dd] if dd == d => l,
        _ => {
            return Err(Error::shape(format!(
                "s6 input {:?}, want [L, {d}]",
                x.shape()
            )))
        }
    };
    let b = x.matmul(&p.b_proj.transpose2d()?)?; // [L,N]
    let c = x.matmul(&p.c_proj.transpose2d()?)?; // [L,N]
    let s = x.matmul(&p.delta_proj.transpose2d()?)?; // [L,1]
    let logits = s.add(&p.delta_bias)?; // [L,D]
    let delta = logits.map(crate::graph::softplus);
    debug_assert_eq!(delta.shape(), &[l, d]);
    let a_diag = p.a_log.map(|v| -v.exp());
    let (a_bar, b_bar) = zoh_discretize(&a_diag, &b, &delta, mode)?;
    // premultiply by x
    let bx = b_bar.mul(&x.reshape(&[l, d, 1])?)?;
    let steps = DiscreteStep {
        a_bar,
        b_bar_x: bx,
        c,
    };
    scan_sequential(&steps, x, &p.d_skip)
}

/// Differentiable S6 built from graph primitives plus the scan op.
pub fn s6_forward_var(x: &Var, p: &SsmVars, mode: ZohMode) -> Result<Var> {
    let shape = x.shape();
    let (l, d) = (shape[0], shape[1]);
    let n = p.a_log.shape()[1];
    let b = x.matmul(&p.b_proj.transpose2d()?)?.reshape(&[l, 1, n])?;
    let c = x.matmul(&p.c_proj.transpose2d()?)?; // [L,N]
    let s = x.matmul(&p.delta_proj.transpose2d()?)?; // [L,1]
    let delta = s.add(&p.delta_bias)?.softplus(); // [L,D]
    let a_diag = p.a_log.exp().scale(-1.0); // [D,N]
    let delta3 = delta.reshape(&[l, d, 1])?;
    let a_bar = delta3.mul(&a_diag)?.exp(); // [L,D,N]
    let b_bar = match mode {
        ZohMode::Simplified => delta3.mul(&b)?,
        ZohMode::Exact => {
            // (1 - a_bar) * exp(-a_log) * B  ==  (exp(dA)-1)/A * B
            let inv_a_mag = p.a_log.scale(-1.0).exp(); // exp(-a_log) = -1/A
            a_bar.scale(-1.0).add_scalar(1.0).mul(&inv_a_mag)?.mul(&b)?
        }
    };
    let u = b_bar.mul(&x.reshape(&[l, d, 1])?)?;
    let y0 = selective_scan(&a_bar, &u, &c)?;
    y0.add(&x.mul(&p.d_skip.reshape(&[1, d])?)?)
}
