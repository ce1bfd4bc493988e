//! Single-stage training on synthetic pairs sampled from the frozen
//! generator: loss assembly (reconstruction, perceptual proxy, latent
//! edit consistency), Adam, and the deterministic step loop.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamBindings;
use crate::pipeline::Pipeline;
use crate::rng::Rng;
use crate::stylegen::{synthesize, synthesize_var, LatentCode};
use crate::tensor::Tensor;
use std::time::Instant;

#[derive(Clone, Copy, Debug)]
pub struct LossWeights {
    pub rec: f32,
    pub perc: f32,
    pub id: f32,
    pub strct: f32,
    pub edit: f32,
}

impl LossWeights {
    pub fn from_config(cfg: &crate::config::PipelineConfig) -> LossWeights {
        LossWeights {
            rec: cfg.lambda_rec,
            perc: cfg.lambda_perc,
            id: cfg.lambda_id,
            strct: cfg.lambda_struct,
            edit: if cfg.disable_loss_edit { 0.0 } else { cfg.lambda_edit },
        }
    }
}

#[derive(Clone)]
pub struct Sample {
    pub z: Tensor,   // [d_z]
    pub d: Tensor,   // [L_g, d_w]
    pub x: Tensor,   // [3, R, R]
    pub x_e: Tensor, // [3, R, R]
    pub w: Tensor,   // [L_g, d_w]
    pub w_e: Tensor, // [L_g, d_w]
}

#[derive(Clone)]
pub struct TrainBatch {
    pub samples: Vec<Sample>,
}

/// Draw a batch of (X, X_e) pairs from the frozen generator. With
/// probability `p_inv` the direction is zeroed so the sample trains
/// inversion; otherwise a bank direction with a random sign is used.
pub fn synth_pair(p: &Pipeline, rng: &mut Rng, batch: usize) -> Result<TrainBatch> {
    let mut samples = Vec::with_capacity(batch);
    for _ in 0..batch {
        let z = Tensor::new(vec![p.cfg.d_z], rng.normal_vec(p.cfg.d_z))?;
        let w = p.gen.mapping(&z)?;
        let d = if rng.uniform() < p.cfg.p_inv {
            p.zero_direction()
        } else {
            let pick = rng.gen_range_usize(p.directions.len());
            let sign = if rng.uniform() < 0.5 { 1.0 } else { -1.0 };
            p.directions[pick].d.scale(sign)
        };
        let w_e = LatentCode::new(w.w_plus.add(&d)?)?;
        let x = synthesize(&p.gen, &w, None)?;
        let x_e = if d.max_abs() == 0.0 {
            x.clone()
        } else {
            synthesize(&p.gen, &w_e, None)?
        };
        samples.push(Sample {
            z,
            d,
            x,
            x_e,
            w: w.w_plus,
            w_e: w_e.w_plus,
        });
    }
    Ok(TrainBatch { samples })
}

/// Mean absolute error of ((ŵ_e − ŵ) − d).
pub fn loss_edit(w_hat_e: &Var, w_hat: &Var, d: &Var) -> Result<Var> {
    if w_hat_e.shape() != w_hat.shape() || w_hat.shape() != d.shape() {
        return Err(Error::shape(format!(
            "loss_edit shapes disagree: {:?} / {:?} / {:?}",
            w_hat_e.shape(),
            w_hat.shape(),
            d.shape()
        )));
    }
    Ok(w_hat_e.sub(w_hat)?.sub(d)?.abs().mean_all())
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: f32,
    pub rec: f32,
    pub perc: f32,
    pub edit: f32,
}

/// Assemble the differentiable batch loss on an existing graph.
/// Editing samples run the encoder on both X and X_e; the edit term
/// penalizes the encoder for not moving linearly with d.
pub fn batch_loss(
    p: &Pipeline,
    g: &Graph,
    reg: &mut ParamBindings,
    batch: &TrainBatch,
    w: &LossWeights,
) -> Result<(Var, LossTerms)> {
    if w.id != 0.0 || w.strct != 0.0 {
        return Err(Error::config(
            "identity/structure losses need proxy models that are not configured".to_string(),
        ));
    }
    let pv = p.bind(g, reg);
    let mode = p.mode();
    let n = batch.samples.len() as f32;
    let mut rec_sum: Option<Var> = None;
    let mut perc_sum: Option<Var> = None;
    let mut edit_sum: Option<Var> = None;
    let acc = |slot: &mut Option<Var>, v: Var| {
        *slot = Some(match slot.take() {
            None => v,
            Some(a) => a.add(&v).expect("scalar add"),
        });
    };
    for s in &batch.samples {
        let xv = g.leaf(s.x.clone());
        let (w_prime, h3) = pv.enc.encode(&xv, mode)?;
        let dv = g.leaf(s.d.clone());
        let f_k = match &pv.fus {
            Some(f) => Some(f.fuse(&h3, &dv, mode)?),
            None => None,
        };
        let w_hat = w_prime.add(&dv)?;
        let out = synthesize_var(&pv.gen, &w_hat, f_k.as_ref())?;
        let target = g.leaf(s.x_e.clone());
        let diff = out.image.sub(&target)?;
        acc(&mut rec_sum, diff.mul(&diff)?.mean_all());
        if w.perc != 0.0 {
            let fa = p.features.features_var(g, &out.image)?;
            let fb = p.features.features_var(g, &target)?;
            let fd = fa.sub(&fb)?;
            acc(&mut perc_sum, fd.mul(&fd)?.mean_all());
        }
        if w.edit != 0.0 && s.d.max_abs() != 0.0 {
            let xev = g.leaf(s.x_e.clone());
            let (w_prime_e, _) = pv.enc.encode(&xev, mode)?;
            acc(&mut edit_sum, loss_edit(&w_prime_e, &w_prime, &dv)?);
        }
    }
    let zero = || g.leaf(Tensor::scalar(0.0));
    let rec = rec_sum.map(|v| v.scale(1.0 / n)).unwrap_or_else(zero);
    let perc = perc_sum.map(|v| v.scale(1.0 / n)).unwrap_or_else(zero);
    let edit = edit_sum.map(|v| v.scale(1.0 / n)).unwrap_or_else(zero);
    let total = rec
        .scale(w.rec)
        .add(&perc.scale(w.perc))?
        .add(&edit.scale(w.edit))?;
    let terms = LossTerms {
        total: total.value().item(),
        rec: rec.value().item(),
        perc: perc.value().item(),
        edit: edit.value().item(),
    };
    for (name, v) in [
        ("rec", terms.rec),
        ("perc", terms.perc),
        ("edit", terms.edit),
        ("total", terms.total),
    ] {
        if !v.is_finite() {
            return Err(Error::numerical(format!("loss term {name} is not finite")));
        }
    }
    Ok((total, terms))
}

pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub t: u64,
    state: Vec<(String, Tensor, Tensor)>, // name, m, v
}

impl Adam {
    pub fn new(lr: f32, beta1: f32, beta2: f32) -> Adam {
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            state: Vec::new(),
        }
    }

    fn slot(&mut self, name: &str, shape: &[usize]) -> usize {
        if let Some(i) = self.state.iter().position(|(n, _, _)| n == name) {
            return i;
        }
        self.state
            .push((name.to_string(), Tensor::zeros(shape), Tensor::zeros(shape)));
        self.state.len() - 1
    }

    /// One Adam update for a single named tensor; caller bumps `t` once
    /// per optimizer step via `begin_step`.
    pub fn update(&mut self, name: &str, param: &Tensor, grad: &Tensor) -> Tensor {
        let i = self.slot(name, param.shape());
        let (_, m, v) = &mut self.state[i];
        let b1 = self.beta1;
        let b2 = self.beta2;
        let t = self.t as i32;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let mut pd = param.to_vec();
        let mut md = m.to_vec();
        let mut vd = v.to_vec();
        let gd = grad.data();
        for j in 0..pd.len() {
            md[j] = b1 * md[j] + (1.0 - b1) * gd[j];
            vd[j] = b2 * vd[j] + (1.0 - b2) * gd[j] * gd[j];
            let mhat = md[j] / bc1;
            let vhat = vd[j] / bc2;
            pd[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
        *m = Tensor::new(m.shape().to_vec(), md).unwrap();
        *v = Tensor::new(v.shape().to_vec(), vd).unwrap();
        Tensor::new(param.shape().to_vec(), pd).unwrap()
    }

    pub fn begin_step(&mut self) {
        self.t += 1;
    }
}

/// One optimizer step. On a numerical error the parameters are left
/// untouched. Only encoder/Fuser parameters are updated; the generator
/// (and mapping network) stay frozen.
pub fn train_step(
    p: &mut Pipeline,
    batch: &TrainBatch,
    w: &LossWeights,
    adam: &mut Adam,
) -> Result<LossTerms> {
    let g = Graph::new();
    let mut reg = ParamBindings::new();
    let (total, terms) = batch_loss(p, &g, &mut reg, batch, w)?;
    total.backward()?;
    let mut grads: Vec<(String, Tensor)> = Vec::new();
    for (name, var) in &reg.entries {
        if Pipeline::trainable(name) {
            grads.push((name.clone(), var.grad()));
        }
    }
    let clip = p.cfg.grad_clip;
    if clip > 0.0 {
        let norm = grads
            .iter()
            .flat_map(|(_, g)| g.data().iter())
            .map(|v| (*v as f64) * (*v as f64))
            .sum::<f64>()
            .sqrt() as f32;
        if norm > clip {
            let s = clip / norm;
            for (_, g) in &mut grads {
                *g = g.scale(s);
            }
        }
    }
    adam.begin_step();
    p.for_each_param(&mut |name, t| {
        if let Some((_, grad)) = grads.iter().find(|(n, _)| *n == name) {
            *t = adam.update(&name, t, grad);
        }
    });
    Ok(terms)
}

#[derive(Clone, Copy, Debug)]
pub struct LogRecord {
    pub step: usize,
    pub total: f32,
    pub rec: f32,
    pub perc: f32,
    pub edit: f32,
    pub ms: f64,
}

impl LogRecord {
    pub fn line(&self) -> String {
        format!(
            "step={} total={:.6} rec={:.6} perc={:.6} edit={:.6} ms={:.1}",
            self.step, self.total, self.rec, self.perc, self.edit, self.ms
        )
    }
}

/// Deterministic training loop; `on_log` fires every `log_every` steps
/// with a newline-ready record.
pub fn train(
    p: &mut Pipeline,
    steps: usize,
    log_every: usize,
    mut on_log: impl FnMut(&LogRecord),
) -> Result<Vec<LogRecord>> {
    let w = LossWeights::from_config(&p.cfg);
    let mut adam = Adam::new(p.cfg.lr, p.cfg.beta1, p.cfg.beta2);
    let mut rng = Rng::new(p.cfg.seed).stream("train");
    let mut records = Vec::new();
    for step in 0..steps {
        let t0 = Instant::now();
        let batch = synth_pair(p, &mut rng, p.cfg.batch)?;
        let terms = train_step(p, &batch, &w, &mut adam)?;
        let rec = LogRecord {
            step,
            total: terms.total,
            rec: terms.rec,
            perc: terms.perc,
            edit: terms.edit,
            ms: t0.elapsed().as_secs_f64() * 1e3,
        };
        if log_every > 0 && step % log_every == 0 {
            on_log(&rec);
        }
        records.push(rec);
    }
    Ok(records)
}
