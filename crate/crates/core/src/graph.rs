//! Reverse-mode differentiation over a fixed op vocabulary.
//!
//! Values are computed eagerly; the tape records parents and a backward
//! closure per node. `backward` runs one fresh reverse pass and *adds* the
//! result into each node's persistent gradient, so calling it twice without
//! zeroing accumulates exactly twice the gradient.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::cell::RefCell;
use std::rc::Rc;

type BackFn = Box<dyn Fn(&Tensor) -> Vec<Tensor>>;

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    parents: Vec<usize>,
    backfn: Option<BackFn>,
}

#[derive(Default)]
struct Tape {
    nodes: Vec<Node>,
}

/// Handle to one computation graph. Clone is shallow.
#[derive(Clone, Default)]
pub struct Graph {
    tape: Rc<RefCell<Tape>>,
}

#[derive(Clone)]
pub struct Var {
    tape: Rc<RefCell<Tape>>,
    id: usize,
}

impl Graph {
    pub fn new() -> Graph {
        Graph::default()
    }

    pub fn leaf(&self, value: Tensor) -> Var {
        let mut tape = self.tape.borrow_mut();
        tape.nodes.push(Node {
            value,
            grad: None,
            parents: vec![],
            backfn: None,
        });
        Var {
            tape: self.tape.clone(),
            id: tape.nodes.len() - 1,
        }
    }

    pub fn zero_grads(&self) {
        let mut tape = self.tape.borrow_mut();
        for n in tape.nodes.iter_mut() {
            n.grad = None;
        }
    }

    pub fn len(&self) -> usize {
        self.tape.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn acc(slot: &mut Option<Tensor>, t: Tensor) {
    *slot = Some(match slot.take() {
        None => t,
        Some(g) => g.add(&t).expect("gradient shape drift"),
    });
}

impl Var {
    fn push(&self, value: Tensor, parents: Vec<usize>, backfn: BackFn) -> Var {
        let mut tape = self.tape.borrow_mut();
        tape.nodes.push(Node {
            value,
            grad: None,
            parents,
            backfn: Some(backfn),
        });
        Var {
            tape: self.tape.clone(),
            id: tape.nodes.len() - 1,
        }
    }

    pub fn value(&self) -> Tensor {
        self.tape.borrow().nodes[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.borrow().nodes[self.id].value.shape().to_vec()
    }

    /// Accumulated gradient; zeros if backward never reached this node.
    pub fn grad(&self) -> Tensor {
        let tape = self.tape.borrow();
        let n = &tape.nodes[self.id];
        n.grad
            .clone()
            .unwrap_or_else(|| Tensor::zeros(n.value.shape()))
    }

    /// Reverse pass from a scalar root. Each call adds one full gradient
    /// contribution into the persistent per-node grads.
    pub fn backward(&self) -> Result<()> {
        let mut tape = self.tape.borrow_mut();
        if tape.nodes[self.id].value.len() != 1 {
            return Err(Error::contract(format!(
                "backward root must be scalar, got shape {:?}",
                tape.nodes[self.id].value.shape()
            )));
        }
        let mut pass: Vec<Option<Tensor>> = vec![None; self.id + 1];
        pass[self.id] = Some(Tensor::scalar(1.0));
        for id in (0..=self.id).rev() {
            let g = match pass[id].take() {
                Some(g) => g,
                None => continue,
            };
            {
                let node = &tape.nodes[id];
                if let Some(backfn) = node.backfn.as_ref() {
                    let pgrads = backfn(&g);
                    debug_assert_eq!(pgrads.len(), node.parents.len());
                    let parents = node.parents.clone();
                    for (pid, pg) in parents.into_iter().zip(pgrads) {
                        acc(&mut pass[pid], pg);
                    }
                }
            }
            acc(&mut tape.nodes[id].grad, g);
        }
        Ok(())
    }

    fn same_tape(&self, other: &Var) {
        debug_assert!(
            Rc::ptr_eq(&self.tape, &other.tape),
            "vars belong to different graphs"
        );
    }

    // ---- elementwise binary ------------------------------------------

    fn binary(
        &self,
        other: &Var,
        f: impl Fn(f32, f32) -> f32,
        back: impl Fn(&Tensor, &Tensor, &Tensor, &Tensor) -> (Tensor, Tensor) + 'static,
    ) -> Result<Var> {
        self.same_tape(other);
        let a = self.value();
        let b = other.value();
        let y = a.zip(&b, f)?;
        let (av, bv, yv) = (a.clone(), b.clone(), y.clone());
        Ok(self.push(
            y,
            vec![self.id, other.id],
            Box::new(move |g| {
                let (da, db) = back(g, &av, &bv, &yv);
                vec![da, db]
            }),
        ))
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        self.binary(
            other,
            |a, b| a + b,
            |g, a, b, _| {
                (
                    g.reduce_to(a.shape()).unwrap(),
                    g.reduce_to(b.shape()).unwrap(),
                )
            },
        )
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        self.binary(
            other,
            |a, b| a - b,
            |g, a, b, _| {
                (
                    g.reduce_to(a.shape()).unwrap(),
                    g.scale(-1.0).reduce_to(b.shape()).unwrap(),
                )
            },
        )
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        self.binary(
            other,
            |a, b| a * b,
            |g, a, b, _| {
                (
                    g.zip(b, |x, y| x * y).unwrap().reduce_to(a.shape()).unwrap(),
                    g.zip(a, |x, y| x * y).unwrap().reduce_to(b.shape()).unwrap(),
                )
            },
        )
    }

    // ---- elementwise unary -------------------------------------------

    fn unary(
        &self,
        f: impl Fn(f32) -> f32,
        dfun: impl Fn(f32, f32) -> f32 + 'static, // (x, y) -> dy/dx
    ) -> Var {
        let x = self.value();
        let y = x.map(f);
        let (xv, yv) = (x.clone(), y.clone());
        self.push(
            y,
            vec![self.id],
            Box::new(move |g| {
                let d: Vec<f32> = xv
                    .data()
                    .iter()
                    .zip(yv.data())
                    .zip(g.data())
                    .map(|((&x, &y), &gv)| gv * dfun(x, y))
                    .collect();
                vec![Tensor::new(xv.shape().to_vec(), d).unwrap()]
            }),
        )
    }

    pub fn exp(&self) -> Var {
        self.unary(|x| x.exp(), |_, y| y)
    }

    pub fn softplus(&self) -> Var {
        self.unary(softplus, |x, _| sigmoid(x))
    }

    pub fn silu(&self) -> Var {
        self.unary(
            |x| x * sigmoid(x),
            |x, _| {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            },
        )
    }

    pub fn relu(&self) -> Var {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn leaky_relu(&self, alpha: f32) -> Var {
        self.unary(
            move |x| if x >= 0.0 { x } else { alpha * x },
            move |x, _| if x >= 0.0 { 1.0 } else { alpha },
        )
    }

    pub fn abs(&self) -> Var {
        self.unary(|x| x.abs(), |x, _| x.signum() * if x == 0.0 { 0.0 } else { 1.0 })
    }

    pub fn scale(&self, c: f32) -> Var {
        self.unary(move |x| x * c, move |_, _| c)
    }

    pub fn add_scalar(&self, c: f32) -> Var {
        self.unary(move |x| x + c, |_, _| 1.0)
    }

    /// (x + eps)^(-1/2); eps guards the demodulation divide.
    pub fn rsqrt_eps(&self, eps: f32) -> Var {
        self.unary(
            move |x| 1.0 / (x + eps).sqrt(),
            move |x, _| -0.5 / (x + eps).powf(1.5),
        )
    }

    pub fn tanh(&self) -> Var {
        self.unary(|x| x.tanh(), |_, y| 1.0 - y * y)
    }

    // ---- shape ops -----------------------------------------------------

    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        let y = self.value().reshape(shape)?;
        let orig = self.shape();
        Ok(self.push(
            y,
            vec![self.id],
            Box::new(move |g| vec![g.reshape(&orig).unwrap()]),
        ))
    }

    pub fn transpose2d(&self) -> Result<Var> {
        let y = self.value().transpose2d()?;
        Ok(self.push(
            y,
            vec![self.id],
            Box::new(move |g| vec![g.transpose2d().unwrap()]),
        ))
    }

    /// Select leading-axis rows: y[t] = x[idx[t]]. Duplicates are allowed;
    /// the backward pass scatter-adds, so repeated rows accumulate.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Var> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let l = shape[0];
        if let Some(&bad) = idx.iter().find(|&&i| i >= l) {
            return Err(Error::shape(format!(
                "row index {bad} out of range for leading dim {l}"
            )));
        }
        let m: usize = shape[1..].iter().product();
        let xd = x.data();
        let mut out = vec![0.0f32; idx.len() * m];
        for (t, &src) in idx.iter().enumerate() {
            out[t * m..(t + 1) * m].copy_from_slice(&xd[src * m..(src + 1) * m]);
        }
        let mut out_shape = shape.clone();
        out_shape[0] = idx.len();
        let y = Tensor::new(out_shape, out)?;
        let idx: Vec<usize> = idx.to_vec();
        Ok(self.push(
            y,
            vec![self.id],
            Box::new(move |g| {
                let gd = g.data();
                let mut dx = vec![0.0f32; l * m];
                for (t, &src) in idx.iter().enumerate() {
                    for j in 0..m {
                        dx[src * m + j] += gd[t * m + j];
                    }
                }
                let mut dx_shape = g.shape().to_vec();
                dx_shape[0] = l;
                vec![Tensor::new(dx_shape, dx).unwrap()]
            }),
        ))
    }

    // ---- reductions ----------------------------------------------------

    pub fn sum_all(&self) -> Var {
        let x = self.value();
        let s = x.sum() as f32;
        let shape = x.shape().to_vec();
        self.push(
            Tensor::scalar(s),
            vec![self.id],
            Box::new(move |g| vec![Tensor::full(&shape, g.item())]),
        )
    }

    pub fn mean_all(&self) -> Var {
        let n = self.value().len() as f32;
        self.sum_all().scale(1.0 / n)
    }

    /// Sum over all trailing axes, keeping the first `keep` dims.
    pub fn sum_trailing(&self, keep: usize) -> Result<Var> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if keep == 0 || keep > shape.len() {
            return Err(Error::shape(format!(
                "sum_trailing keep={} on rank {}",
                keep,
                shape.len()
            )));
        }
        let lead: usize = shape[..keep].iter().product();
        let rest: usize = shape[keep..].iter().product();
        let xd = x.data();
        let mut out = vec![0.0f32; lead];
        for i in 0..lead {
            let mut a = 0.0f64;
            for j in 0..rest {
                a += xd[i * rest + j] as f64;
            }
            out[i] = a as f32;
        }
        let y = Tensor::new(shape[..keep].to_vec(), out)?;
        Ok(self.push(
            y,
            vec![self.id],
            Box::new(move |g| {
                let gd = g.data();
                let mut dx = vec![0.0f32; lead * rest];
                for i in 0..lead {
                    let gv = gd[i];
                    for j in 0..rest {
                        dx[i * rest + j] = gv;
                    }
                }
                vec![Tensor::new(shape.clone(), dx).unwrap()]
            }),
        ))
    }

    // ---- linear algebra --------------------------------------------------

    pub fn matmul(&self, other: &Var) -> Result<Var> {
        self.same_tape(other);
        let a = self.value();
        let b = other.value();
        let y = a.matmul(&b)?;
        let (av, bv) = (a.clone(), b.clone());
        Ok(self.push(
            y,
            vec![self.id, other.id],
            Box::new(move |g| {
                let da = g.matmul(&bv.transpose2d().unwrap()).unwrap();
                let db = av.transpose2d().unwrap().matmul(g).unwrap();
                vec![da, db]
            }),
        ))
    }

    /// Cross-correlation of `x` [C,H,W] with kernels [O,C,K,K].
    pub fn conv2d(&self, w: &Var, stride: usize, pad: usize) -> Result<Var> {
        self.same_tape(w);
        let x = self.value();
        let wt = w.value();
        let y = conv2d_forward(&x, &wt, stride, pad)?;
        let (xv, wv) = (x.clone(), wt.clone());
        Ok(self.push(
            y,
            vec![self.id, w.id],
            Box::new(move |g| {
                let (dx, dw) = conv2d_backward(&xv, &wv, g, stride, pad);
                vec![dx, dw]
            }),
        ))
    }

    /// Depthwise K x K convolution, stride 1, same channel count.
    pub fn dwconv2d(&self, w: &Var, pad: usize) -> Result<Var> {
        self.same_tape(w);
        let x = self.value();
        let wt = w.value();
        let y = dwconv2d_forward(&x, &wt, pad)?;
        let (xv, wv) = (x.clone(), wt.clone());
        Ok(self.push(
            y,
            vec![self.id, w.id],
            Box::new(move |g| {
                let (dx, dw) = dwconv2d_backward(&xv, &wv, g, pad);
                vec![dx, dw]
            }),
        ))
    }

    /// Nearest-neighbour 2x upsampling of [C,H,W].
    pub fn upsample2x(&self) -> Result<Var> {
        let x = self.value();
        let (c, h, w) = dims3(&x)?;
        let xd = x.data();
        let mut out = vec![0.0f32; c * 4 * h * w];
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let v = xd[ch * h * w + i * w + j];
                    let base = ch * 4 * h * w;
                    for di in 0..2 {
                        for dj in 0..2 {
                            out[base + (2 * i + di) * 2 * w + 2 * j + dj] = v;
                        }
                    }
                }
            }
        }
        let y = Tensor::new(vec![c, 2 * h, 2 * w], out)?;
        Ok(self.push(
            y,
            vec![self.id],
            Box::new(move |g| {
                let gd = g.data();
                let mut dx = vec![0.0f32; c * h * w];
                for ch in 0..c {
                    for i in 0..h {
                        for j in 0..w {
                            let base = ch * 4 * h * w;
                            let mut a = 0.0f32;
                            for di in 0..2 {
                                for dj in 0..2 {
                                    a += gd[base + (2 * i + di) * 2 * w + 2 * j + dj];
                                }
                            }
                            dx[ch * h * w + i * w + j] = a;
                        }
                    }
                }
                vec![Tensor::new(vec![c, h, w], dx).unwrap()]
            }),
        ))
    }

    /// Row-wise softmax of a 2-D tensor.
    pub fn softmax_rows(&self) -> Result<Var> {
        let x = self.value();
        let (m, n) = dims2(&x)?;
        let xd = x.data();
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            let row = &xd[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut z = 0.0f64;
            for j in 0..n {
                let e = (row[j] - mx).exp();
                out[i * n + j] = e;
                z += e as f64;
            }
            for j in 0..n {
                out[i * n + j] /= z as f32;
            }
        }
        let y = Tensor::new(vec![m, n], out)?;
        let yv = y.clone();
        Ok(self.push(
            y,
            vec![self.id],
            Box::new(move |g| {
                let gd = g.data();
                let yd = yv.data();
                let mut dx = vec![0.0f32; m * n];
                for i in 0..m {
                    let mut dot = 0.0f64;
                    for j in 0..n {
                        dot += (gd[i * n + j] * yd[i * n + j]) as f64;
                    }
                    for j in 0..n {
                        dx[i * n + j] = yd[i * n + j] * (gd[i * n + j] - dot as f32);
                    }
                }
                vec![Tensor::new(vec![m, n], dx).unwrap()]
            }),
        ))
    }
}

/// Concatenate along the leading axis. All inputs must share trailing dims.
pub fn concat0(vars: &[Var]) -> Result<Var> {
    if vars.is_empty() {
        return Err(Error::shape("concat0 of zero tensors".to_string()));
    }
    let first = vars[0].value();
    let rest_dims = first.shape()[1..].to_vec();
    let m: usize = rest_dims.iter().product();
    let mut total = 0usize;
    let mut values = Vec::with_capacity(vars.len());
    for v in vars {
        let t = v.value();
        if t.shape()[1..] != rest_dims[..] {
            return Err(Error::shape(format!(
                "concat0 trailing dims differ: {:?} vs {:?}",
                &t.shape()[1..],
                rest_dims
            )));
        }
        total += t.shape()[0];
        values.push(t);
    }
    let mut data = Vec::with_capacity(total * m);
    for t in &values {
        data.extend_from_slice(t.data());
    }
    let mut shape = vec![total];
    shape.extend_from_slice(&rest_dims);
    let y = Tensor::new(shape, data)?;
    let lens: Vec<usize> = values.iter().map(|t| t.shape()[0] * m).collect();
    let shapes: Vec<Vec<usize>> = values.iter().map(|t| t.shape().to_vec()).collect();
    let parents: Vec<usize> = vars.iter().map(|v| v.id).collect();
    Ok(vars[0].push(
        y,
        parents,
        Box::new(move |g| {
            let gd = g.data();
            let mut out = Vec::with_capacity(lens.len());
            let mut off = 0;
            for (len, shape) in lens.iter().zip(&shapes) {
                out.push(Tensor::new(shape.clone(), gd[off..off + len].to_vec()).unwrap());
                off += len;
            }
            out
        }),
    ))
}

/// LayerNorm over the channel axis of [C,H,W], one normalization per
/// spatial site, with learnable per-channel gamma/beta.
pub fn layer_norm_ch(x: &Var, gamma: &Var, beta: &Var, eps: f32) -> Result<Var> {
    let xv = x.value();
    let gv = gamma.value();
    let bv = beta.value();
    let (c, h, w) = dims3(&xv)?;
    if gv.shape() != [c] || bv.shape() != [c] {
        return Err(Error::shape(format!(
            "layer_norm params must be [{c}], got {:?}/{:?}",
            gv.shape(),
            bv.shape()
        )));
    }
    let hw = h * w;
    let xd = xv.data();
    let mut xhat = vec![0.0f32; c * hw];
    let mut inv_std = vec![0.0f32; hw];
    let mut y = vec![0.0f32; c * hw];
    for p in 0..hw {
        let mut mu = 0.0f64;
        for ch in 0..c {
            mu += xd[ch * hw + p] as f64;
        }
        mu /= c as f64;
        let mut var = 0.0f64;
        for ch in 0..c {
            let d = xd[ch * hw + p] as f64 - mu;
            var += d * d;
        }
        var /= c as f64;
        let istd = 1.0 / (var + eps as f64).sqrt();
        inv_std[p] = istd as f32;
        for ch in 0..c {
            let xh = ((xd[ch * hw + p] as f64 - mu) * istd) as f32;
            xhat[ch * hw + p] = xh;
            y[ch * hw + p] = gv.data()[ch] * xh + bv.data()[ch];
        }
    }
    let yt = Tensor::new(vec![c, h, w], y)?;
    let gamma_v = gv.clone();
    Ok(x.push(
        yt,
        vec![x.id, gamma.id, beta.id],
        Box::new(move |g| {
            let gd = g.data();
            let mut dgamma = vec![0.0f32; c];
            let mut dbeta = vec![0.0f32; c];
            let mut dx = vec![0.0f32; c * hw];
            for p in 0..hw {
                let mut sum_gg = 0.0f64; // mean of gamma*g over channels
                let mut sum_ggx = 0.0f64; // mean of gamma*g*xhat
                for ch in 0..c {
                    let gg = (gamma_v.data()[ch] * gd[ch * hw + p]) as f64;
                    sum_gg += gg;
                    sum_ggx += gg * xhat[ch * hw + p] as f64;
                    dgamma[ch] += gd[ch * hw + p] * xhat[ch * hw + p];
                    dbeta[ch] += gd[ch * hw + p];
                }
                let mean_gg = sum_gg / c as f64;
                let mean_ggx = sum_ggx / c as f64;
                for ch in 0..c {
                    let gg = (gamma_v.data()[ch] * gd[ch * hw + p]) as f64;
                    dx[ch * hw + p] = (inv_std[p] as f64
                        * (gg - mean_gg - xhat[ch * hw + p] as f64 * mean_ggx))
                        as f32;
                }
            }
            vec![
                Tensor::new(vec![c, hw / w, w], dx).unwrap(),
                Tensor::new(vec![c], dgamma).unwrap(),
                Tensor::new(vec![c], dbeta).unwrap(),
            ]
        }),
    ))
}

/// Differentiable first-order linear recurrence contraction:
/// h[t] = a[t] * h[t-1] + u[t] (elementwise over [D,N], h[-1] = 0),
/// y[t,d] = sum_n h[t,d,n] * c[t,n].
pub fn selective_scan(a: &Var, u: &Var, c: &Var) -> Result<Var> {
    let av = a.value();
    let uv = u.value();
    let cv = c.value();
    let (l, d, n) = dims3(&av)?;
    if uv.shape() != [l, d, n] {
        return Err(Error::shape(format!(
            "scan u shape {:?} vs a {:?}",
            uv.shape(),
            av.shape()
        )));
    }
    if cv.shape() != [l, n] {
        return Err(Error::shape(format!(
            "scan c shape {:?}, want [{l}, {n}]",
            cv.shape()
        )));
    }
    let ad = av.data();
    let ud = uv.data();
    let cd = cv.data();
    let mut hs = vec![0.0f32; l * d * n];
    let mut y = vec![0.0f32; l * d];
    for t in 0..l {
        for di in 0..d {
            let base = t * d * n + di * n;
            let prev = if t == 0 { 0 } else { base - d * n };
            let mut acc = 0.0f64;
            for ni in 0..n {
                let hprev = if t == 0 { 0.0 } else { hs[prev + ni] };
                let h = ad[base + ni] * hprev + ud[base + ni];
                hs[base + ni] = h;
                acc += (h * cd[t * n + ni]) as f64;
            }
            y[t * d + di] = acc as f32;
        }
    }
    let yt = Tensor::new(vec![l, d], y)?;
    let (av2, cv2) = (av.clone(), cv.clone());
    Ok(a.push(
        yt,
        vec![a.id, u.id, c.id],
        Box::new(move |g| {
            let gd = g.data();
            let ad = av2.data();
            let cd = cv2.data();
            let mut da = vec![0.0f32; l * d * n];
            let mut du = vec![0.0f32; l * d * n];
            let mut dc = vec![0.0f32; l * n];
            let mut dh = vec![0.0f32; d * n]; // running adjoint of h[t]
            for t in (0..l).rev() {
                for di in 0..d {
                    let base = t * d * n + di * n;
                    let gy = gd[t * d + di];
                    for ni in 0..n {
                        dh[di * n + ni] += gy * cd[t * n + ni];
                        dc[t * n + ni] += gy * hs[base + ni];
                    }
                }
                for di in 0..d {
                    let base = t * d * n + di * n;
                    for ni in 0..n {
                        let hprev = if t == 0 {
                            0.0
                        } else {
                            hs[base - d * n + ni]
                        };
                        let dv = dh[di * n + ni];
                        du[base + ni] = dv;
                        da[base + ni] = dv * hprev;
                        dh[di * n + ni] = dv * ad[base + ni];
                    }
                }
            }
            vec![
                Tensor::new(vec![l, d, n], da).unwrap(),
                Tensor::new(vec![l, d, n], du).unwrap(),
                Tensor::new(vec![l, n], dc).unwrap(),
            ]
        }),
    ))
}

// ---- op-tag dispatch (the fixed public vocabulary) -----------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpTag {
    Add,
    Sub,
    Mul,
    Exp,
    Softplus,
    Silu,
    Relu,
    Scale,
}

/// Uniform entry point over the elementwise vocabulary. Binary tags take
/// `b`; `Scale` reads the factor from a scalar `b`.
pub fn elementwise(tag: OpTag, a: &Var, b: Option<&Var>) -> Result<Var> {
    let need_b = |b: Option<&Var>| -> Result<Var> {
        b.cloned()
            .ok_or_else(|| Error::contract(format!("{tag:?} needs a second operand")))
    };
    match tag {
        OpTag::Add => a.add(&need_b(b)?),
        OpTag::Sub => a.sub(&need_b(b)?),
        OpTag::Mul => a.mul(&need_b(b)?),
        OpTag::Exp => Ok(a.exp()),
        OpTag::Softplus => Ok(a.softplus()),
        OpTag::Silu => Ok(a.silu()),
        OpTag::Relu => Ok(a.relu()),
        OpTag::Scale => {
            let s = need_b(b)?;
            if s.value().len() != 1 {
                return Err(Error::shape("Scale factor must be scalar".to_string()));
            }
            Ok(a.scale(s.value().item()))
        }
    }
}

// ---- plain conv kernels (shared by forward and backward) ------------------

pub(crate) fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn softplus(x: f32) -> f32 {
    // numerically stable ln(1 + e^x)
    x.max(0.0) + (-(x.abs())).exp().ln_1p()
}

fn dims2(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape()[..] {
        [a, b] => Ok((a, b)),
        _ => Err(Error::shape(format!("expected 2-D, got {:?}", t.shape()))),
    }
}

pub(crate) fn dims3(t: &Tensor) -> Result<(usize, usize, usize)> {
    match t.shape()[..] {
        [a, b, c] => Ok((a, b, c)),
        _ => Err(Error::shape(format!("expected 3-D, got {:?}", t.shape()))),
    }
}

fn conv_out_dim(input: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let span = input + 2 * pad;
    if span < k || (span - k) % stride != 0 {
        return Err(Error::shape(format!(
            "conv output size not integral: input {input}, k {k}, stride {stride}, pad {pad}"
        )));
    }
    Ok((span - k) / stride + 1)
}

fn im2col(x: &Tensor, k: usize, stride: usize, pad: usize, ho: usize, wo: usize) -> Tensor {
    let (c, h, w) = dims3(x).unwrap();
    let xd = x.data();
    let mut cols = vec![0.0f32; c * k * k * ho * wo];
    let cols_w = ho * wo;
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k * k + ki * k + kj) * cols_w;
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let src = ch * h * w + ii as usize * w;
                    for oj in 0..wo {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        cols[row + oi * wo + oj] = xd[src + jj as usize];
                    }
                }
            }
        }
    }
    Tensor::new(vec![c * k * k, cols_w], cols).unwrap()
}

fn col2im(
    cols: &Tensor,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Tensor {
    let cd = cols.data();
    let cols_w = ho * wo;
    let mut x = vec![0.0f32; c * h * w];
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k * k + ki * k + kj) * cols_w;
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let dst = ch * h * w + ii as usize * w;
                    for oj in 0..wo {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        x[dst + jj as usize] += cd[row + oi * wo + oj];
                    }
                }
            }
        }
    }
    Tensor::new(vec![c, h, w], x).unwrap()
}

pub fn conv2d_forward(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (c, h, wd) = dims3(x)?;
    let ws = w.shape();
    if ws.len() != 4 || ws[1] != c {
        return Err(Error::shape(format!(
            "kernel {:?} does not match input channels {c}",
            ws
        )));
    }
    let (o, k) = (ws[0], ws[2]);
    if ws[3] != k {
        return Err(Error::shape(format!("kernel must be square, got {ws:?}")));
    }
    let ho = conv_out_dim(h, k, stride, pad)?;
    let wo = conv_out_dim(wd, k, stride, pad)?;
    let cols = im2col(x, k, stride, pad, ho, wo);
    let wmat = w.reshape(&[o, c * k * k])?;
    let y = wmat.matmul(&cols)?;
    y.reshape(&[o, ho, wo])
}

fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    g: &Tensor,
    stride: usize,
    pad: usize,
) -> (Tensor, Tensor) {
    let (c, h, wd) = dims3(x).unwrap();
    let ws = w.shape().to_vec();
    let (o, k) = (ws[0], ws[2]);
    let (go, ho, wo) = dims3(g).unwrap();
    debug_assert_eq!(go, o);
    let cols = im2col(x, k, stride, pad, ho, wo);
    let gmat = g.reshape(&[o, ho * wo]).unwrap();
    let dw = gmat
        .matmul(&cols.transpose2d().unwrap())
        .unwrap()
        .reshape(&ws)
        .unwrap();
    let wmat = w.reshape(&[o, c * k * k]).unwrap();
    let dcols = wmat.transpose2d().unwrap().matmul(&gmat).unwrap();
    let dx = col2im(&dcols, c, h, wd, k, stride, pad, ho, wo);
    (dx, dw)
}

pub fn dwconv2d_forward(x: &Tensor, w: &Tensor, pad: usize) -> Result<Tensor> {
    let (c, h, wd) = dims3(x)?;
    let ws = w.shape();
    if ws.len() != 3 || ws[0] != c || ws[1] != ws[2] || ws[1] % 2 == 0 {
        return Err(Error::shape(format!(
            "depthwise kernel must be [C,K,K] odd with C={c}, got {ws:?}"
        )));
    }
    let k = ws[1];
    let ho = conv_out_dim(h, k, 1, pad)?;
    let wo = conv_out_dim(wd, k, 1, pad)?;
    let xd = x.data();
    let kd = w.data();
    let mut y = vec![0.0f32; c * ho * wo];
    for ch in 0..c {
        for oi in 0..ho {
            for oj in 0..wo {
                let mut a = 0.0f32;
                for ki in 0..k {
                    let ii = (oi + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for kj in 0..k {
                        let jj = (oj + kj) as isize - pad as isize;
                        if jj < 0 || jj >= wd as isize {
                            continue;
                        }
                        a += xd[ch * h * wd + ii as usize * wd + jj as usize]
                            * kd[ch * k * k + ki * k + kj];
                    }
                }
                y[ch * ho * wo + oi * wo + oj] = a;
            }
        }
    }
    Tensor::new(vec![c, ho, wo], y)
}

fn dwconv2d_backward(x: &Tensor, w: &Tensor, g: &Tensor, pad: usize) -> (Tensor, Tensor) {
    let (c, h, wd) = dims3(x).unwrap();
    let k = w.shape()[1];
    let (_, ho, wo) = dims3(g).unwrap();
    let xd = x.data();
    let kd = w.data();
    let gd = g.data();
    let mut dx = vec![0.0f32; c * h * wd];
    let mut dw = vec![0.0f32; c * k * k];
    for ch in 0..c {
        for oi in 0..ho {
            for oj in 0..wo {
                let gv = gd[ch * ho * wo + oi * wo + oj];
                if gv == 0.0 {
                    continue;
                }
                for ki in 0..k {
                    let ii = (oi + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for kj in 0..k {
                        let jj = (oj + kj) as isize - pad as isize;
                        if jj < 0 || jj >= wd as isize {
                            continue;
                        }
                        let xi = ch * h * wd + ii as usize * wd + jj as usize;
                        dx[xi] += gv * kd[ch * k * k + ki * k + kj];
                        dw[ch * k * k + ki * k + kj] += gv * xd[xi];
                    }
                }
            }
        }
    }
    (
        Tensor::new(vec![c, h, wd], dx).unwrap(),
        Tensor::new(vec![c, k, k], dw).unwrap(),
    )
}
