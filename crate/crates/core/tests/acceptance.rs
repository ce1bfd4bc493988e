//! Acceptance suite: one test per release criterion, each printing a
//! single PASS/FAIL line (run with `--nocapture` to see them live).
//!
//! Criteria 7 and 8 share one training budget; the full-model overfit
//! run executes once and its outcome is reused by the ablation check.

use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use styleinv::config::PipelineConfig;
use styleinv::gradcheck::check_gradients_with;
use styleinv::graph::{layer_norm_ch, Graph, Var};
use styleinv::metrics::{conv_macs, frechet_distance, l2, ms_ssim, scan_latency_ms, FeatureStats};
use styleinv::params::ParamBindings;
use styleinv::pipeline::Pipeline;
use styleinv::rng::Rng;
use styleinv::ssm::{
    scan_parallel, scan_sequential, s6_forward_var, zoh_discretize, DiscreteStep, SsmParams,
    ZohMode,
};
use styleinv::stylegen::{mod_conv, synthesize_var, EditDirection, GeneratorParams};
use styleinv::tensor::Tensor;
use styleinv::train::{
    loss_edit, synth_pair, train, train_step, Adam, LossWeights, Sample, TrainBatch,
};
use styleinv::vssm::{ss2d, ss2d_expand, vit_block, vssm_block, ScanRoute, VitBlockParams, VssmBlockParams};

type CRes = Result<String, String>;

fn report(num: u32, name: &str, res: CRes) {
    match res {
        Ok(detail) => {
            println!("acceptance {num:02} {name}: PASS ({detail})");
        }
        Err(msg) => {
            println!("acceptance {num:02} {name}: FAIL ({msg})");
            panic!("acceptance criterion {num} ({name}) failed: {msg}");
        }
    }
}

fn e<T>(r: styleinv::Result<T>) -> Result<T, String> {
    r.map_err(|err| err.to_string())
}

// ---- 1: parallel scan equals sequential scan -----------------------------

#[test]
fn c01_scan_equivalence() {
    report(1, "parallel vs sequential scan", (|| {
        let mut rng = Rng::new(11).stream("acc1");
        let t0 = Instant::now();
        let mut worst = 0.0f32;
        for i in 0..200 {
            let l = 1 + rng.gen_range_usize(64);
            let n = [1usize, 4, 16][rng.gen_range_usize(3)];
            let d = 1 + rng.gen_range_usize(6);
            let mode = if i % 2 == 0 { ZohMode::Exact } else { ZohMode::Simplified };
            let a = Tensor::new(
                vec![d, n],
                (0..d * n).map(|_| -(0.05 + rng.normal().abs())).collect(),
            )
            .unwrap();
            let b = Tensor::randn(&[l, n], &mut rng);
            let delta = Tensor::new(
                vec![l, d],
                (0..l * d).map(|_| rng.uniform_range(0.0, 0.2)).collect(),
            )
            .unwrap();
            let x = Tensor::randn(&[l, d], &mut rng);
            let d_skip = Tensor::randn(&[d], &mut rng);
            let (a_bar, b_bar) = e(zoh_discretize(&a, &b, &delta, mode))?;
            // premultiply B_bar with the input
            let xd = x.data();
            let bd = b_bar.data();
            let mut ux = vec![0.0f32; l * d * n];
            for t in 0..l {
                for di in 0..d {
                    for ni in 0..n {
                        ux[t * d * n + di * n + ni] = bd[t * d * n + di * n + ni] * xd[t * d + di];
                    }
                }
            }
            let steps = DiscreteStep {
                a_bar,
                b_bar_x: Tensor::new(vec![l, d, n], ux).unwrap(),
                c: Tensor::randn(&[l, n], &mut rng),
            };
            let ys = e(scan_sequential(&steps, &x, &d_skip))?;
            let yp = e(scan_parallel(&steps, &x, &d_skip))?;
            let diff = ys
                .data()
                .iter()
                .zip(yp.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max);
            worst = worst.max(diff);
            if diff > 1e-5 {
                return Err(format!(
                    "instance {i} (L={l}, N={n}, D={d}): max |parallel - sequential| = {diff:.3e}"
                ));
            }
        }
        let secs = t0.elapsed().as_secs_f64();
        if secs >= 10.0 {
            return Err(format!("200 instances took {secs:.1}s (budget 10s)"));
        }
        Ok(format!("200 instances, worst diff {worst:.2e}, {secs:.2}s"))
    })());
}

// ---- 2: exact discretization matches an ODE integrator -------------------

#[test]
fn c02_zoh_vs_rk4() {
    report(2, "exact ZOH vs RK4 integration", (|| {
        let mut rng = Rng::new(23).stream("acc2");
        let l = 50;
        let mut worst = 0.0f64;
        for sys in 0..20 {
            let a = rng.uniform_range(-2.0, -0.1);
            let a_t = Tensor::new(vec![1, 1], vec![a]).unwrap();
            let b = Tensor::randn(&[l, 1], &mut rng);
            let c = Tensor::randn(&[l, 1], &mut rng);
            let delta = Tensor::new(
                vec![l, 1],
                (0..l).map(|_| rng.uniform_range(0.02, 0.1)).collect(),
            )
            .unwrap();
            let x = Tensor::randn(&[l, 1], &mut rng);
            let d_skip = Tensor::randn(&[1], &mut rng);
            let (a_bar, b_bar) = e(zoh_discretize(&a_t, &b, &delta, ZohMode::Exact))?;
            let bx: Vec<f32> = b_bar
                .data()
                .iter()
                .zip(x.data())
                .map(|(bb, xx)| bb * xx)
                .collect();
            let steps = DiscreteStep {
                a_bar,
                b_bar_x: Tensor::new(vec![l, 1, 1], bx).unwrap(),
                c: c.clone(),
            };
            let y = e(scan_sequential(&steps, &x, &d_skip))?;

            // RK4 on h' = a h + b_t x_t with the input held constant over
            // each interval, 100 substeps per interval
            let mut h = 0.0f64;
            for t in 0..l {
                let dt = delta.data()[t] as f64;
                let u = (b.data()[t] * x.data()[t]) as f64;
                let sub = dt / 100.0;
                let f = |hv: f64| a as f64 * hv + u;
                for _ in 0..100 {
                    let k1 = f(h);
                    let k2 = f(h + 0.5 * sub * k1);
                    let k3 = f(h + 0.5 * sub * k2);
                    let k4 = f(h + sub * k3);
                    h += sub / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
                }
                let y_ref = c.data()[t] as f64 * h + (d_skip.data()[0] * x.data()[t]) as f64;
                let err = (y_ref - y.data()[t] as f64).abs();
                worst = worst.max(err);
                if err > 1e-4 {
                    return Err(format!(
                        "system {sys}, step {t}: |rk4 - recurrence| = {err:.3e}"
                    ));
                }
            }
        }
        Ok(format!("20 systems x 50 steps, worst error {worst:.2e}"))
    })());
}

// ---- 3: finite-difference gradient suite ---------------------------------

fn op_checks(seed: u64) -> Result<f64, String> {
    let mut rng = Rng::new(seed).stream("acc3-ops");
    let mut worst = 0.0f64;
    let mut run = |inputs: &[Tensor],
                   f: &dyn Fn(&Graph, &[Var]) -> styleinv::Result<Var>,
                   h: f64,
                   what: &str|
     -> Result<(), String> {
        let mut r = Rng::new(seed).stream("acc3-coords");
        let w = check_gradients_with(inputs, f, 1e-4, h, &mut r)
            .map_err(|e| format!("{what}: {e}"))?;
        worst = worst.max(w);
        Ok(())
    };
    let h = 1e-2;

    // arithmetic chain: add, sub, mul, scale, add_scalar, mean
    let a = Tensor::randn(&[3, 4], &mut rng);
    let b = Tensor::randn(&[3, 4], &mut rng);
    run(&[a.clone(), b.clone()], &|_, v| {
        Ok(v[0].add(&v[1])?.mul(&v[0].sub(&v[1])?)?.scale(0.7).add_scalar(0.3).mean_all())
    }, h, "arithmetic")?;

    // matmul
    let m1 = Tensor::randn(&[4, 5], &mut rng);
    let m2 = Tensor::randn(&[5, 3], &mut rng);
    run(&[m1, m2], &|_, v| Ok(v[0].matmul(&v[1])?.mean_all()), h, "matmul")?;

    // dense and depthwise convolution, upsampling
    let x = Tensor::randn(&[2, 6, 6], &mut rng);
    let w = Tensor::randn_scaled(&[3, 2, 3, 3], 0.4, &mut rng);
    run(&[x.clone(), w], &|_, v| {
        Ok(v[0].conv2d(&v[1], 1, 1)?.mean_all())
    }, h, "conv2d")?;
    let ws = Tensor::randn_scaled(&[3, 2, 4, 4], 0.4, &mut rng);
    run(&[x.clone(), ws], &|_, v| {
        Ok(v[0].conv2d(&v[1], 2, 1)?.mean_all())
    }, h, "strided conv2d")?;
    let dw = Tensor::randn_scaled(&[2, 3, 3], 0.4, &mut rng);
    run(&[x.clone(), dw], &|_, v| {
        Ok(v[0].dwconv2d(&v[1], 1)?.mean_all())
    }, h, "dwconv2d")?;
    run(&[x.clone()], &|_, v| Ok(v[0].upsample2x()?.mean_all()), h, "upsample2x")?;

    // smooth activations
    run(&[a.clone()], &|_, v| Ok(v[0].silu().mean_all()), h, "silu")?;
    run(&[a.clone()], &|_, v| Ok(v[0].tanh().mean_all()), h, "tanh")?;
    run(&[a.clone()], &|_, v| Ok(v[0].scale(0.3).exp().mean_all()), h, "exp")?;
    run(&[a.clone()], &|_, v| Ok(v[0].softplus().mean_all()), h, "softplus")?;
    run(&[a.clone()], &|_, v| {
        Ok(v[0].mul(&v[0])?.rsqrt_eps(1e-2).mean_all())
    }, 2.5e-3, "rsqrt_eps")?;

    // kinked activations: keep the probes away from the kink
    let off = a.map(|v| v.signum() * (v.abs() + 0.2));
    run(&[off.clone()], &|_, v| Ok(v[0].relu().mean_all()), h, "relu")?;
    run(&[off.clone()], &|_, v| Ok(v[0].leaky_relu(0.2).mean_all()), h, "leaky_relu")?;
    run(&[off.clone()], &|_, v| Ok(v[0].abs().mean_all()), h, "abs")?;

    // softmax + weighted sum
    let logits = Tensor::randn(&[3, 5], &mut rng);
    let weights = Tensor::randn(&[3, 5], &mut rng);
    run(&[logits, weights], &|_, v| {
        Ok(v[0].softmax_rows()?.mul(&v[1])?.mean_all())
    }, h, "softmax_rows")?;

    // shape plumbing: reshape, transpose, gather, trailing sum
    let g1 = Tensor::randn(&[4, 6], &mut rng);
    run(&[g1], &|_, v| {
        let t = v[0].transpose2d()?.reshape(&[4, 6])?;
        let picked = t.gather_rows(&[3, 1, 1, 0])?;
        Ok(picked.mul(&picked)?.sum_trailing(1)?.mean_all())
    }, h, "reshape/transpose/gather/sum_trailing")?;

    // channel layer norm (large third derivative: smaller step)
    let f = Tensor::randn(&[3, 4, 4], &mut rng);
    let gamma = Tensor::randn(&[3], &mut rng);
    let beta = Tensor::randn(&[3], &mut rng);
    run(&[f.clone(), gamma, beta], &|_, v| {
        let n = layer_norm_ch(&v[0], &v[1], &v[2], 1e-5)?;
        Ok(n.mul(&n)?.mean_all())
    }, 2.5e-3, "layer_norm_ch")?;

    // modulated convolution with demodulation
    let mx = Tensor::randn(&[2, 5, 5], &mut rng);
    let ms = Tensor::randn(&[2], &mut rng).map(|v| v + 2.0);
    let mk = Tensor::randn_scaled(&[3, 2, 3, 3], 0.5, &mut rng);
    run(&[mx, ms, mk], &|_, v| {
        Ok(mod_conv(&v[0], &v[1], &v[2], true, 1)?.mean_all())
    }, 2.5e-3, "mod_conv")?;

    // selective scan, both discretizations
    for mode in [ZohMode::Exact, ZohMode::Simplified] {
        let p = SsmParams::init(3, 4, &mut rng);
        let sx = Tensor::randn(&[7, 3], &mut rng);
        run(&[sx], &|g, v| {
            let mut reg = ParamBindings::new();
            let pv = p.bind(g, "s", &mut reg);
            let y = s6_forward_var(&v[0], &pv, mode)?;
            Ok(y.mul(&y)?.mean_all())
        }, h, "s6_forward")?;
    }

    // four-route 2-D scan and the residual mixing blocks
    let ssm: Vec<SsmParams> = (0..4).map(|_| SsmParams::init(3, 4, &mut rng)).collect();
    let fmap = Tensor::randn(&[3, 4, 4], &mut rng);
    run(&[fmap.clone()], &|g, v| {
        let mut reg = ParamBindings::new();
        let pv: Vec<_> = ssm
            .iter()
            .enumerate()
            .map(|(i, s)| s.bind(g, &format!("r{i}"), &mut reg))
            .collect();
        let y = styleinv::vssm::ss2d_var(&v[0], &pv, ZohMode::Exact)?;
        Ok(y.mul(&y)?.mean_all())
    }, h, "ss2d")?;

    let blk = VssmBlockParams::init(3, 4, false, &mut rng);
    run(&[fmap.clone()], &|g, v| {
        let mut reg = ParamBindings::new();
        let bv = blk.bind(g, "blk", &mut reg);
        let y = vssm_block(&v[0], &bv, ZohMode::Exact)?;
        Ok(y.mul(&y)?.mean_all())
    }, 2.5e-3, "vssm_block")?;

    let vit = VitBlockParams::init(3, &mut rng);
    run(&[fmap], &|g, v| {
        let mut reg = ParamBindings::new();
        let bv = vit.bind(g, "vit", &mut reg);
        let y = vit_block(&v[0], &bv)?;
        Ok(y.mul(&y)?.mean_all())
    }, 2.5e-3, "vit_block")?;

    // generator synthesis from a latent code
    let gen = GeneratorParams::init(8, 8, 6, 4, 3, &mut Rng::new(seed).stream("acc3-gen"))
        .map_err(|e| e.to_string())?;
    let wp = Tensor::randn(&[6, 8], &mut rng);
    run(&[wp], &|g, v| {
        let mut reg = ParamBindings::new();
        let gv = gen.bind(g, "gen", &mut reg);
        let out = synthesize_var(&gv, &v[0], None)?;
        Ok(out.image.mul(&out.image)?.mean_all())
    }, 2.5e-3, "synthesize")?;

    Ok(worst)
}

/// The edit penalty is a mean of absolute values; its kinks sit closer
/// together than any usable f32 finite-difference step, so it is checked
/// against the closed-form subgradient sign(r)/len instead.
fn edit_adjoint_check(seed: u64) -> Result<(), String> {
    let mut rng = Rng::new(seed).stream("acc3-edit");
    let g = Graph::new();
    let a = g.leaf(Tensor::randn(&[6, 8], &mut rng));
    let b = g.leaf(Tensor::randn(&[6, 8], &mut rng));
    let d = g.leaf(Tensor::randn(&[6, 8], &mut rng));
    let loss = e(loss_edit(&a, &b, &d))?;
    e(loss.backward())?;
    let (av, bv, dv) = (a.value(), b.value(), d.value());
    let (ga, gb) = (a.grad(), b.grad());
    let n = av.len() as f32;
    for i in 0..av.len() {
        let r = av.data()[i] - bv.data()[i] - dv.data()[i];
        let want = r.signum() / n;
        if ga.data()[i] != want || gb.data()[i] != -want {
            return Err(format!(
                "edit adjoint at coord {i}: got ({}, {}), want ({want}, {})",
                ga.data()[i],
                gb.data()[i],
                -want
            ));
        }
    }
    Ok(())
}

fn end_to_end_check(seed: u64) -> Result<f64, String> {
    let mut cfg = PipelineConfig::tiny();
    cfg.seed = seed;
    let p = e(Pipeline::new(cfg.clone()))?;
    let mut rng = Rng::new(seed).stream("acc3-e2e");
    let x = Tensor::randn_scaled(&[3, 16, 16], 0.5, &mut rng);
    let d = Tensor::randn_scaled(&[cfg.l_g, cfg.d_w], 0.3, &mut rng);
    let target = Tensor::randn_scaled(&[3, 16, 16], 0.5, &mut rng);
    let mut coords = Rng::new(seed).stream("acc3-e2e-coords");
    // encode -> fuse -> dispatch -> synthesize -> reconstruction +
    // perceptual loss; the non-smooth edit term is covered by its
    // closed-form adjoint check instead (kinks sit below the FD floor)
    check_gradients_with(
        &[x, d, target],
        |g, v| {
            let mut reg = ParamBindings::new();
            let pv = p.bind(g, &mut reg);
            let (w_prime, h3) = pv.enc.encode(&v[0], p.mode())?;
            let f_k = match &pv.fus {
                Some(f) => Some(f.fuse(&h3, &v[1], p.mode())?),
                None => None,
            };
            let w_hat = w_prime.add(&v[1])?;
            let out = synthesize_var(&pv.gen, &w_hat, f_k.as_ref())?;
            let diff = out.image.sub(&v[2])?;
            let rec = diff.mul(&diff)?.mean_all();
            let fa = p.features.features_var(g, &out.image)?;
            let fb = p.features.features_var(g, &v[2])?;
            let fd = fa.sub(&fb)?;
            rec.add(&fd.mul(&fd)?.mean_all().scale(0.8))
        },
        1e-3,
        2.5e-3,
        &mut coords,
    )
    .map_err(|e| format!("end-to-end: {e}"))
}

#[test]
fn c03_gradient_suite() {
    report(3, "finite-difference gradient suite", (|| {
        for seed in [101u64, 202, 303] {
            op_checks(seed)?;
            edit_adjoint_check(seed)?;
            end_to_end_check(seed)?;
        }
        // every probe satisfies |fd - analytic| <= rounding floor +
        // rtol * magnitude, rtol 1e-4 for ops and 1e-3 end-to-end; the
        // floor term covers coordinates whose gradient sits below what a
        // central difference on an f32 forward pass can resolve
        Ok("3 seeds; ops within floor + 1e-4, end-to-end within floor + 1e-3".to_string())
    })());
}

// ---- 4: SS2D structure ----------------------------------------------------

#[test]
fn c04_ss2d_structure() {
    report(4, "SS2D route structure", (|| {
        let mut rng = Rng::new(31).stream("acc4");
        let (c, h, w) = (3usize, 5usize, 7usize);
        let f = Tensor::randn(&[c, h, w], &mut rng);

        // expansion followed by the inverse permutation is the identity
        let seqs = e(ss2d_expand(&f))?;
        let routes = ScanRoute::all(h, w);
        let fd = f.data();
        for (seq, route) in seqs.iter().zip(&routes) {
            let inv = route.inverse();
            for p in 0..h * w {
                for ch in 0..c {
                    let got = seq.data()[inv[p] * c + ch];
                    let want = fd[ch * h * w + p];
                    if got.to_bits() != want.to_bits() {
                        return Err(format!(
                            "route {:?}: restored value differs at position {p}, channel {ch}",
                            route.tag
                        ));
                    }
                }
            }
        }

        // transposing the input and swapping route roles (LR<->TB,
        // RL<->BT) transposes the output
        let ssm: Vec<SsmParams> = (0..4).map(|_| SsmParams::init(c, 4, &mut rng)).collect();
        let y = e(ss2d(&f, &ssm, ZohMode::Exact))?;
        let mut ft = vec![0.0f32; c * h * w];
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    ft[ch * h * w + j * h + i] = fd[ch * h * w + i * w + j];
                }
            }
        }
        let ftt = Tensor::new(vec![c, w, h], ft).unwrap();
        let swapped = vec![ssm[2].clone(), ssm[3].clone(), ssm[0].clone(), ssm[1].clone()];
        let yt = e(ss2d(&ftt, &swapped, ZohMode::Exact))?;
        let (yd, ytd) = (y.data(), yt.data());
        let mut worst = 0.0f32;
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let diff = (yd[ch * h * w + i * w + j] - ytd[ch * h * w + j * h + i]).abs();
                    worst = worst.max(diff);
                }
            }
        }
        if worst > 1e-6 {
            return Err(format!("transpose consistency violated by {worst:.3e}"));
        }

        // zeroing the output projection reduces the block to its residual
        let mut blk = VssmBlockParams::init(c, 4, false, &mut rng);
        blk.for_each_param("blk", &mut |name, t| {
            if name.starts_with("blk.out") {
                *t = Tensor::zeros(t.shape());
            }
        });
        let g = Graph::new();
        let mut reg = ParamBindings::new();
        let bv = blk.bind(&g, "blk", &mut reg);
        let fv = g.leaf(f.clone());
        let out = e(vssm_block(&fv, &bv, ZohMode::Exact))?.value();
        if !out.bitwise_eq(&f) {
            return Err("zero-branch block output is not bitwise the input".to_string());
        }
        Ok(format!("routes bitwise, transpose diff {worst:.1e}, residual bitwise"))
    })());
}

// ---- 5: edit --scale 0 equals invert through the CLI ----------------------

const TINY_FLAGS: &[&str] = &[
    "--set", "r=16", "--set", "d_z=8", "--set", "d_w=8", "--set", "l_g=6",
    "--set", "c_g=4", "--set", "k_inject=3", "--set", "enc_c1=4", "--set",
    "enc_c2=6", "--set", "enc_c3=8", "--set", "n_state=4", "--set",
    "fuser_c1d=4", "--set", "batch=2",
];

fn cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_styleinv"))
        .args(args)
        .output()
        .map_err(|e| format!("spawn failed: {e}"))?;
    if !out.status.success() {
        return Err(format!(
            "CLI {:?} failed: {}",
            args.first().unwrap_or(&""),
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(())
}

fn read_bytes(p: &Path) -> Result<Vec<u8>, String> {
    std::fs::read(p).map_err(|e| format!("read {}: {e}", p.display()))
}

#[test]
fn c05_edit_scale_zero_is_invert() {
    report(5, "edit --scale 0 bitwise equals invert", (|| {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let root = dir.path();
        let data = root.join("data");
        let run = root.join("run");
        let mut gen_args = vec!["gen-data", "--out", data.to_str().unwrap(), "--count", "10"];
        gen_args.extend_from_slice(TINY_FLAGS);
        cli(&gen_args)?;
        let mut train_args = vec![
            "train", "--out", run.to_str().unwrap(), "--steps", "3", "--log-every", "0",
        ];
        train_args.extend_from_slice(TINY_FLAGS);
        cli(&train_args)?;
        let model = run.join("model.ckpt");
        let direction = data.join("0001_d.blob");
        for i in 0..10 {
            let input = data.join(format!("{i:04}_x.blob"));
            let inv = root.join(format!("inv{i}"));
            let ed = root.join(format!("ed{i}"));
            cli(&[
                "invert", "--model", model.to_str().unwrap(), "--input",
                input.to_str().unwrap(), "--out", inv.to_str().unwrap(),
            ])?;
            cli(&[
                "edit", "--model", model.to_str().unwrap(), "--input",
                input.to_str().unwrap(), "--direction", direction.to_str().unwrap(),
                "--scale", "0", "--out", ed.to_str().unwrap(),
            ])?;
            for ext in ["blob", "png"] {
                let a = read_bytes(&inv.with_extension(ext))?;
                let b = read_bytes(&ed.with_extension(ext))?;
                if a != b {
                    return Err(format!("input {i}: .{ext} outputs differ"));
                }
            }
        }
        Ok("10 inputs, .blob and .png byte-identical".to_string())
    })());
}

// ---- 6: demodulation output statistics ------------------------------------

#[test]
fn c06_demodulation_statistic() {
    report(6, "demodulated conv output std", (|| {
        let mut rng = Rng::new(41).stream("acc6");
        let (c, o, side) = (8usize, 8usize, 6usize);
        let kernel = Tensor::randn(&[o, c, 3, 3], &mut rng);
        let out_side = side - 2; // pad 0: every output has full support
        let mut count = vec![0f64; o];
        let mut mean = vec![0f64; o];
        let mut m2 = vec![0f64; o];
        for _ in 0..10_000 {
            let x = Tensor::randn(&[c, side, side], &mut rng);
            let s = Tensor::randn(&[c], &mut rng);
            let g = Graph::new();
            let y = e(mod_conv(
                &g.leaf(x),
                &g.leaf(s),
                &g.leaf(kernel.clone()),
                true,
                0,
            ))?
            .value();
            let yd = y.data();
            for ch in 0..o {
                for p in 0..out_side * out_side {
                    let v = yd[ch * out_side * out_side + p] as f64;
                    count[ch] += 1.0;
                    let d = v - mean[ch];
                    mean[ch] += d / count[ch];
                    m2[ch] += d * (v - mean[ch]);
                }
            }
        }
        let mut lo = f64::INFINITY;
        let mut hi = 0.0f64;
        for ch in 0..o {
            let std = (m2[ch] / count[ch]).sqrt();
            lo = lo.min(std);
            hi = hi.max(std);
            if !(0.7..=1.3).contains(&std) {
                return Err(format!("channel {ch} std {std:.3} outside [0.7, 1.3]"));
            }
        }
        Ok(format!("10k samples, per-channel std in [{lo:.3}, {hi:.3}]"))
    })());
}

// ---- 7 & 8: desk-scale overfit and the Fuser ablation ---------------------

struct OverfitOutcome {
    cfg: PipelineConfig,
    steps_used: usize,
    metrics: OverfitMetrics,
    minutes: f64,
}

fn overfit_config() -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.seed = 7;
    cfg.c_g = 16;
    cfg.d_z = 32;
    cfg.d_w = 32;
    cfg.enc_c1 = 16;
    cfg.enc_c2 = 32;
    cfg.enc_c3 = 64;
    cfg.fuser_c1d = 8;
    cfg
}

fn overfit_data(p: &Pipeline) -> Result<Vec<Sample>, String> {
    let mut rng = Rng::new(p.cfg.seed).stream("acc7-data");
    let batch = e(synth_pair(p, &mut rng, 64))?;
    let inv = batch.samples.iter().filter(|s| s.d.max_abs() == 0.0).count();
    if inv < 8 || batch.samples.len() - inv < 8 {
        return Err(format!("degenerate split: {inv} inversion samples of 64"));
    }
    Ok(batch.samples)
}

struct OverfitMetrics {
    /// Pixel MSE of reconstructions over the inversion samples.
    mse_inv: f64,
    /// MS-SSIM of reconstructions over the inversion samples.
    msssim: f64,
    /// Mean |(w'_e - w') - d| over the editing samples.
    edit_resid: f64,
    /// Pixel MSE over the whole train set: inversions reconstruct X,
    /// editing samples reconstruct X_e from (X, d) at scale 1.
    mse_all: f64,
}

fn eval_overfit(p: &Pipeline, data: &[Sample]) -> Result<OverfitMetrics, String> {
    let (mut mse, mut ssim, mut edit, mut mse_all) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let (mut n_inv, mut n_edit) = (0usize, 0usize);
    for s in data {
        if s.d.max_abs() == 0.0 {
            let out = e(p.invert(&s.x))?;
            let m = l2(&out.image, &s.x).map_err(|e| e.to_string())?;
            mse += m;
            mse_all += m;
            ssim += ms_ssim(&out.image, &s.x).map_err(|e| e.to_string())?;
            n_inv += 1;
        } else {
            let dir = EditDirection::new(s.d.clone()).map_err(|e| e.to_string())?;
            let edited = e(p.edit(&s.x, &dir, 1.0))?;
            mse_all += l2(&edited.image, &s.x_e).map_err(|e| e.to_string())?;
            let w0 = edited.w_prime;
            let we = e(p.invert(&s.x_e))?.w_prime;
            let dd = s.d.data();
            let resid: f64 = w0
                .data()
                .iter()
                .zip(we.data())
                .zip(dd)
                .map(|((a, b), d)| ((b - a - d).abs()) as f64)
                .sum::<f64>()
                / dd.len() as f64;
            edit += resid;
            n_edit += 1;
        }
    }
    Ok(OverfitMetrics {
        mse_inv: mse / n_inv as f64,
        msssim: ssim / n_inv as f64,
        edit_resid: edit / n_edit as f64,
        mse_all: mse_all / data.len() as f64,
    })
}

fn train_on(data: &[Sample], cfg: &PipelineConfig, max_steps: usize, eval_every: usize)
    -> Result<(Pipeline, usize), String>
{
    let mut p = e(Pipeline::new(cfg.clone()))?;
    let w = LossWeights::from_config(cfg);
    let mut adam = Adam::new(cfg.lr, cfg.beta1, cfg.beta2);
    let bs = cfg.batch;
    let mut used = max_steps;
    for step in 0..max_steps {
        let start = (step * bs) % data.len();
        let samples: Vec<Sample> = (0..bs)
            .map(|i| data[(start + i) % data.len()].clone())
            .collect();
        e(train_step(&mut p, &TrainBatch { samples }, &w, &mut adam))?;
        if eval_every > 0 && (step + 1) % eval_every == 0 && step + 1 < max_steps {
            let m = eval_overfit(&p, data)?;
            if m.mse_inv < 5e-3 && m.msssim > 0.95 && m.edit_resid < 0.05 {
                used = step + 1;
                break;
            }
        }
    }
    Ok((p, used))
}

static OVERFIT: OnceLock<Result<OverfitOutcome, String>> = OnceLock::new();

fn overfit_outcome() -> &'static Result<OverfitOutcome, String> {
    OVERFIT.get_or_init(|| {
        let cfg = overfit_config();
        let probe = e(Pipeline::new(cfg.clone()))?;
        let data = overfit_data(&probe)?;
        drop(probe);
        let t0 = Instant::now();
        let (p, steps_used) = train_on(&data, &cfg, 5000, 150)?;
        let minutes = t0.elapsed().as_secs_f64() / 60.0;
        let metrics = eval_overfit(&p, &data)?;
        Ok(OverfitOutcome { cfg, steps_used, metrics, minutes })
    })
}

#[test]
fn c07_desk_scale_overfit() {
    report(7, "desk-scale overfit (64 pairs, R=64)", (|| {
        let o = overfit_outcome().as_ref().map_err(|e| e.clone())?;
        let m = &o.metrics;
        if m.mse_inv >= 5e-3 {
            return Err(format!("train MSE {:.4e} >= 5e-3 after {} steps", m.mse_inv, o.steps_used));
        }
        if m.msssim <= 0.95 {
            return Err(format!("MS-SSIM {:.4} <= 0.95 after {} steps", m.msssim, o.steps_used));
        }
        if m.edit_resid >= 0.05 {
            return Err(format!("mean edit residual {:.4} >= 0.05", m.edit_resid));
        }
        if o.minutes >= 30.0 {
            return Err(format!("training took {:.1} min (budget 30)", o.minutes));
        }
        Ok(format!(
            "{} steps, MSE {:.2e}, MS-SSIM {:.4}, edit {:.4}, {:.1} min",
            o.steps_used, m.mse_inv, m.msssim, m.edit_resid, o.minutes
        ))
    })());
}

#[test]
fn c08_fuser_ablation_direction() {
    report(8, "Fuser ablation degrades reconstruction", (|| {
        let o = overfit_outcome().as_ref().map_err(|e| e.clone())?;
        let mut cfg = o.cfg.clone();
        cfg.disable_fuser = true;
        // identical budget and identical training pairs (the frozen
        // generator does not depend on the fuser flag)
        let probe = e(Pipeline::new(cfg.clone()))?;
        let data = overfit_data(&probe)?;
        drop(probe);
        let (p, _) = train_on(&data, &cfg, o.steps_used, 0)?;
        // whole-train-set MSE: inversions plus edited reconstructions,
        // where the Fuser's injection actually participates
        let mse = eval_overfit(&p, &data)?.mse_all;
        let full = o.metrics.mse_all;
        let ratio = mse / full;
        if ratio < 1.5 {
            return Err(format!(
                "ablated train-set MSE {mse:.3e} is only {ratio:.2}x the full model's {full:.3e}"
            ));
        }
        Ok(format!(
            "{} steps each: full train-set MSE {full:.2e}, no-fuser {mse:.2e} ({ratio:.1}x)",
            o.steps_used
        ))
    })());
}

// ---- 9: near-linear scan latency ------------------------------------------

#[test]
fn c09_scan_scaling() {
    report(9, "scan latency scales near-linearly", (|| {
        let t256 = scan_latency_ms(256, 32, 16, 2, 9);
        let t1024 = scan_latency_ms(1024, 32, 16, 2, 9);
        let t4096 = scan_latency_ms(4096, 32, 16, 2, 9);
        let r1 = t1024 / t256;
        let r2 = t4096 / t1024;
        if r1 >= 6.0 || r2 >= 6.0 {
            return Err(format!(
                "t(1024)/t(256) = {r1:.2}, t(4096)/t(1024) = {r2:.2} (budget < 6)"
            ));
        }
        Ok(format!(
            "t(256) {t256:.2} ms, ratios {r1:.2} and {r2:.2}"
        ))
    })());
}

// ---- 10: metric sanity -----------------------------------------------------

#[test]
fn c10_metric_sanity() {
    report(10, "metric sanity", (|| {
        let mut rng = Rng::new(53).stream("acc10");
        let x = Tensor::randn(&[3, 32, 32], &mut rng).map(|v| v.tanh());
        let s = ms_ssim(&x, &x).map_err(|e| e.to_string())?;
        if s != 1.0 {
            return Err(format!("ms_ssim(X, X) = {s} != 1.0"));
        }

        let feats: Vec<Vec<f32>> = (0..40)
            .map(|_| (0..6).map(|_| rng.normal()).collect())
            .collect();
        let st = FeatureStats::from_features(&feats).map_err(|e| e.to_string())?;
        let d0 = frechet_distance(&st, &st).map_err(|e| e.to_string())?;
        if d0.abs() > 1e-8 {
            return Err(format!("identical-stats distance {d0:.3e} > 1e-8"));
        }

        let shift: Vec<f32> = (0..6).map(|_| rng.normal()).collect();
        let shifted = FeatureStats {
            mean: Tensor::new(
                vec![6],
                st.mean.data().iter().zip(&shift).map(|(m, s)| m + s).collect(),
            )
            .unwrap(),
            covariance: st.covariance.clone(),
            count: st.count,
        };
        let d1 = frechet_distance(&st, &shifted).map_err(|e| e.to_string())?;
        let want: f64 = shift.iter().map(|&v| (v as f64) * (v as f64)).sum();
        if (d1 - want).abs() > 1e-6 {
            return Err(format!(
                "equal-covariance distance {d1:.8} vs |delta mu|^2 {want:.8}"
            ));
        }

        let macs = conv_macs(3, 16, 3, 32);
        if macs != 442_368 {
            return Err(format!("conv MACs {macs} != 442368"));
        }
        Ok(format!(
            "self-similarity 1.0, FD {d0:.1e}/{:.1e}, conv MACs {macs}",
            (d1 - want).abs()
        ))
    })());
}

// ---- 11: persistence and determinism ---------------------------------------

#[test]
fn c11_persistence() {
    report(11, "checkpoint persistence and determinism", (|| {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let cfg = PipelineConfig::tiny();

        // round-trip: save, load, save again, byte-identical
        let mut p = e(Pipeline::new(cfg.clone()))?;
        let a = dir.path().join("a.ckpt");
        let b = dir.path().join("b.ckpt");
        e(p.save(&a))?;
        let mut p2 = e(Pipeline::load(&a))?;
        e(p2.save(&b))?;
        if read_bytes(&a)? != read_bytes(&b)? {
            return Err("checkpoint round-trip is not byte-identical".to_string());
        }

        // two seeded runs produce identical final checkpoints
        let (c, d) = (dir.path().join("c.ckpt"), dir.path().join("d.ckpt"));
        for path in [&c, &d] {
            let mut p = e(Pipeline::new(cfg.clone()))?;
            e(train(&mut p, 25, 0, |_| {}))?;
            e(p.save(path))?;
        }
        let (cb, db) = (read_bytes(&c)?, read_bytes(&d)?);
        if cb != db {
            return Err("two seeded training runs diverged".to_string());
        }
        Ok(format!(
            "round-trip bitwise; 25-step reruns identical ({} bytes)",
            cb.len()
        ))
    })());
}
