//! Evaluation metrics (L2, MS-SSIM, Fréchet distance under the frozen
//! feature extractor), the editing-quality protocol, and the
//! computational-cost accounting (params, MACs, latency) behind the
//! benchmark reports.

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::pipeline::Pipeline;
use crate::stylegen::{resolution_for_depth, EditDirection};
use crate::tensor::Tensor;
use std::time::Instant;

// ---- MS-SSIM ---------------------------------------------------------------

/// Standard five-scale MS-SSIM weights; truncated and renormalized when
/// the image only supports fewer scales.
pub const MSSSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;
/// Dynamic range of images in [-1, 1].
const RANGE: f64 = 2.0;

fn gaussian_window(size: usize) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let mut w: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SIGMA * SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    for v in &mut w {
        *v /= s;
    }
    w
}

/// Per-scale SSIM statistics: returns (mean ssim, mean contrast-structure)
/// over all valid window positions and channels.
fn ssim_scale(x: &[f64], y: &[f64], c: usize, h: usize, w: usize) -> (f64, f64) {
    let win = WINDOW.min(h).min(w);
    let g = gaussian_window(win);
    let c1 = (0.01 * RANGE).powi(2);
    let c2 = (0.03 * RANGE).powi(2);
    let oh = h - win + 1;
    let ow = w - win + 1;
    let mut ssim_sum = 0.0;
    let mut cs_sum = 0.0;
    let mut count = 0usize;
    // separable Gaussian filtering of the five moment maps
    let filt = |src: &[f64]| -> Vec<f64> {
        // horizontal then vertical, valid region
        let mut tmp = vec![0.0; h * ow];
        for i in 0..h {
            for j in 0..ow {
                let mut acc = 0.0;
                for (k, &gk) in g.iter().enumerate() {
                    acc += gk * src[i * w + j + k];
                }
                tmp[i * ow + j] = acc;
            }
        }
        let mut out = vec![0.0; oh * ow];
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = 0.0;
                for (k, &gk) in g.iter().enumerate() {
                    acc += gk * tmp[(i + k) * ow + j];
                }
                out[i * ow + j] = acc;
            }
        }
        out
    };
    for ch in 0..c {
        let xs = &x[ch * h * w..(ch + 1) * h * w];
        let ys = &y[ch * h * w..(ch + 1) * h * w];
        let xx: Vec<f64> = xs.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = ys.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = xs.iter().zip(ys).map(|(a, b)| a * b).collect();
        let mx = filt(xs);
        let my = filt(ys);
        let mxx = filt(&xx);
        let myy = filt(&yy);
        let mxy = filt(&xy);
        for i in 0..oh * ow {
            let mu_x = mx[i];
            let mu_y = my[i];
            let var_x = mxx[i] - mu_x * mu_x;
            let var_y = myy[i] - mu_y * mu_y;
            let cov = mxy[i] - mu_x * mu_y;
            let l = (2.0 * mu_x * mu_y + c1) / (mu_x * mu_x + mu_y * mu_y + c1);
            let cs = (2.0 * cov + c2) / (var_x + var_y + c2);
            ssim_sum += l * cs;
            cs_sum += cs;
            count += 1;
        }
    }
    (ssim_sum / count as f64, cs_sum / count as f64)
}

fn downsample2(x: &[f64], c: usize, h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let oh = h / 2;
    let ow = w / 2;
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let base = ch * h * w + 2 * i * w + 2 * j;
                out[ch * oh * ow + i * ow + j] =
                    0.25 * (x[base] + x[base + 1] + x[base + w] + x[base + w + 1]);
            }
        }
    }
    (out, oh, ow)
}

/// Number of MS-SSIM scales supported by a min(H, W) of `side`: each
/// scale halves the image and needs at least an 8-pixel side.
fn scale_count(side: usize) -> usize {
    let mut n = 0;
    let mut s = side;
    while s >= 8 && n < MSSSIM_WEIGHTS.len() {
        n += 1;
        s /= 2;
    }
    n
}

/// Multi-scale structural similarity on [C, H, W] images in [-1, 1].
/// 11x11 Gaussian window (sigma 1.5, shrunk for small scales); the
/// scale count adapts to the image size and the standard weights are
/// renormalized over the scales used.
pub fn ms_ssim(x: &Tensor, y: &Tensor) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(Error::shape(format!(
            "ms_ssim shapes differ: {:?} vs {:?}",
            x.shape(),
            y.shape()
        )));
    }
    let s = x.shape().to_vec();
    let (c, h, w) = match s[..] {
        [c, h, w] => (c, h, w),
        _ => return Err(Error::shape(format!("ms_ssim wants [C,H,W], got {s:?}"))),
    };
    let scales = scale_count(h.min(w));
    if scales == 0 {
        return Err(Error::config(format!(
            "image {h}x{w} too small for MS-SSIM (needs at least 8x8)"
        )));
    }
    let wsum: f64 = MSSSIM_WEIGHTS[..scales].iter().sum();
    let mut xb: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
    let mut yb: Vec<f64> = y.data().iter().map(|&v| v as f64).collect();
    let (mut ch_h, mut ch_w) = (h, w);
    let mut result = 1.0f64;
    for scale in 0..scales {
        let (ssim, cs) = ssim_scale(&xb, &yb, c, ch_h, ch_w);
        let weight = MSSSIM_WEIGHTS[scale] / wsum;
        let factor = if scale + 1 == scales { ssim } else { cs };
        // negative factors only arise in pathological noise; clamp keeps
        // the result in [0, 1] as the metric contract requires
        result *= factor.clamp(0.0, 1.0).powf(weight);
        if scale + 1 < scales {
            let (nx, nh, nw) = downsample2(&xb, c, ch_h, ch_w);
            let (ny, _, _) = downsample2(&yb, c, ch_h, ch_w);
            xb = nx;
            yb = ny;
            ch_h = nh;
            ch_w = nw;
        }
    }
    Ok(result)
}

/// Mean squared error over all elements.
pub fn l2(x: &Tensor, y: &Tensor) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(Error::shape(format!(
            "l2 shapes differ: {:?} vs {:?}",
            x.shape(),
            y.shape()
        )));
    }
    let n = x.data().len().max(1);
    Ok(x.data()
        .iter()
        .zip(y.data())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum::<f64>()
        / n as f64)
}

// ---- Fréchet distance ------------------------------------------------------

/// Gaussian feature statistics (mean and covariance) accumulated from
/// pooled feature vectors.
#[derive(Clone, Debug)]
pub struct FeatureStats {
    pub mean: Tensor,       // [F]
    pub covariance: Tensor, // [F, F]
    pub count: usize,
}

impl FeatureStats {
    /// Streaming accumulation: sums and outer-product sums in f64, then
    /// population covariance E[xx^T] - mu mu^T, explicitly symmetrized.
    pub fn from_features(feats: &[Vec<f32>]) -> Result<FeatureStats> {
        if feats.is_empty() {
            return Err(Error::config("feature stats need at least one sample".to_string()));
        }
        let f = feats[0].len();
        let mut sum = vec![0.0f64; f];
        let mut outer = vec![0.0f64; f * f];
        for v in feats {
            if v.len() != f {
                return Err(Error::shape(format!(
                    "feature dim mismatch: {} vs {f}",
                    v.len()
                )));
            }
            for i in 0..f {
                sum[i] += v[i] as f64;
                for j in 0..f {
                    outer[i * f + j] += v[i] as f64 * v[j] as f64;
                }
            }
        }
        let n = feats.len() as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let mut cov = vec![0.0f64; f * f];
        for i in 0..f {
            for j in 0..f {
                cov[i * f + j] = outer[i * f + j] / n - mean[i] * mean[j];
            }
        }
        for i in 0..f {
            for j in (i + 1)..f {
                let s = 0.5 * (cov[i * f + j] + cov[j * f + i]);
                cov[i * f + j] = s;
                cov[j * f + i] = s;
            }
        }
        Ok(FeatureStats {
            mean: Tensor::new(vec![f], mean.iter().map(|&v| v as f32).collect())?,
            covariance: Tensor::new(vec![f, f], cov.iter().map(|&v| v as f32).collect())?,
            count: feats.len(),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.shape()[0]
    }
}

fn mat_mul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    out
}

fn frob(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Square root of a symmetric PSD matrix by the Newton-Schulz iteration
/// (f64, with a verification residual). Returns NumericalError when the
/// input is too asymmetric or not PSD enough for the iteration to
/// converge.
fn sqrtm_psd(a: &[f64], n: usize) -> Result<Vec<f64>> {
    let norm = frob(a);
    for i in 0..n {
        for j in 0..n {
            if (a[i * n + j] - a[j * n + i]).abs() > 1e-6 * norm.max(1.0) {
                return Err(Error::numerical(format!(
                    "matrix square root input not symmetric at ({i},{j})"
                )));
            }
        }
    }
    if norm == 0.0 {
        return Ok(vec![0.0; n * n]);
    }
    // small diagonal jitter keeps singular PSD inputs inside the
    // Newton-Schulz convergence region
    let mut a_j = a.to_vec();
    let jitter = 1e-10 * norm;
    for i in 0..n {
        a_j[i * n + i] += jitter;
    }
    let norm = frob(&a_j);
    let mut y: Vec<f64> = a_j.iter().map(|v| v / norm).collect();
    let mut z = vec![0.0; n * n];
    for i in 0..n {
        z[i * n + i] = 1.0;
    }
    // Track the best iterate: on rank-deficient inputs the iteration
    // converges and then slowly loses ground to rounding, and on
    // non-PSD inputs it diverges outright.
    let scale = norm.sqrt();
    let residual_of = |y: &[f64]| -> f64 {
        let s: Vec<f64> = y.iter().map(|v| v * scale).collect();
        let ss = mat_mul(&s, &s, n);
        ss.iter()
            .zip(a_j.iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    };
    let mut best = y.clone();
    let mut best_resid = residual_of(&y);
    for _ in 0..60 {
        let zy = mat_mul(&z, &y, n);
        let mut t = zy;
        for v in t.iter_mut() {
            *v = -0.5 * *v;
        }
        for i in 0..n {
            t[i * n + i] += 1.5;
        }
        y = mat_mul(&y, &t, n);
        z = mat_mul(&t, &z, n);
        let resid = residual_of(&y);
        if !resid.is_finite() || resid > 10.0 * best_resid {
            break; // diverging
        }
        if resid < best_resid {
            best_resid = resid;
            best.copy_from_slice(&y);
            if resid <= 1e-10 * norm.max(1.0) {
                break;
            }
        }
    }
    if !(best_resid <= 1e-6 * frob(&a_j).max(1.0)) {
        return Err(Error::numerical(format!(
            "matrix square root did not converge (residual {best_resid:.3e}); input not PSD?"
        )));
    }
    Ok(best.iter().map(|v| v * scale).collect())
}

/// Fréchet distance between two Gaussian feature statistics:
/// |mu1-mu2|^2 + Tr(S1 + S2 - 2 (S1 S2)^{1/2}). The cross term is
/// computed as Tr sqrtm(sqrtm(S1) S2 sqrtm(S1)), which is symmetric PSD.
pub fn frechet_distance(s1: &FeatureStats, s2: &FeatureStats) -> Result<f64> {
    let f = s1.dim();
    if f != s2.dim() {
        return Err(Error::shape(format!(
            "feature dims differ: {f} vs {}",
            s2.dim()
        )));
    }
    let mu1 = s1.mean.data();
    let mu2 = s2.mean.data();
    let mean_gap: f64 = mu1
        .iter()
        .zip(mu2.iter())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    let c1: Vec<f64> = s1.covariance.data().iter().map(|&v| v as f64).collect();
    let c2: Vec<f64> = s2.covariance.data().iter().map(|&v| v as f64).collect();
    let tr1: f64 = (0..f).map(|i| c1[i * f + i]).sum();
    let tr2: f64 = (0..f).map(|i| c2[i * f + i]).sum();
    let s1h = sqrtm_psd(&c1, f)?;
    let mut m = mat_mul(&s1h, &mat_mul(&c2, &s1h, f), f);
    // symmetrize against rounding before the second square root
    for i in 0..f {
        for j in (i + 1)..f {
            let s = 0.5 * (m[i * f + j] + m[j * f + i]);
            m[i * f + j] = s;
            m[j * f + i] = s;
        }
    }
    let sm = sqrtm_psd(&m, f)?;
    let tr_cross: f64 = (0..f).map(|i| sm[i * f + i]).sum();
    let d = mean_gap + tr1 + tr2 - 2.0 * tr_cross;
    // rounding can leave a tiny negative residue on identical stats
    Ok(d.max(0.0))
}

// ---- editing-quality protocol ----------------------------------------------

/// Split latent codes into (A, B) index sets by the sign of the
/// projection of w+ onto the attribute direction: positive projections
/// "have" the synthetic attribute (set A), the rest form set B.
pub fn split_by_attribute(ws: &[Tensor], d_attr: &Tensor) -> (Vec<usize>, Vec<usize>) {
    let mut a = Vec::new();
    let mut b = Vec::new();
    for (i, w) in ws.iter().enumerate() {
        let proj: f64 = w
            .data()
            .iter()
            .zip(d_attr.data())
            .map(|(&x, &y)| x as f64 * y as f64)
            .sum();
        if proj > 0.0 {
            a.push(i);
        } else {
            b.push(i);
        }
    }
    (a, b)
}

/// Editing-quality score: edit every image in B with `d_attr` at
/// `scale` to get B-hat, then return the Fréchet distance between the
/// feature statistics of B and B-hat (or of A and B-hat when
/// `against_a` is set) under the pipeline's frozen feature extractor.
pub fn editing_quality(
    p: &Pipeline,
    set_a: &[Tensor],
    set_b: &[Tensor],
    d_attr: &EditDirection,
    scale: f32,
    against_a: bool,
) -> Result<f64> {
    if set_b.is_empty() || (against_a && set_a.is_empty()) {
        return Err(Error::config("editing_quality needs non-empty image sets".to_string()));
    }
    let mut edited = Vec::with_capacity(set_b.len());
    for x in set_b {
        edited.push(p.edit(x, d_attr, scale)?.image);
    }
    let feats = |imgs: &[Tensor]| -> Result<Vec<Vec<f32>>> {
        imgs.iter().map(|x| p.features.feature_vec(x)).collect()
    };
    let stats_hat = FeatureStats::from_features(&feats(&edited)?)?;
    let reference = if against_a { set_a } else { set_b };
    let stats_ref = FeatureStats::from_features(&feats(reference)?)?;
    frechet_distance(&stats_ref, &stats_hat)
}

// ---- cost accounting ---------------------------------------------------

/// Multiply-accumulates charged per (token, channel, state) element of a
/// selective scan: discretization (2), input injection (1), state
/// recurrence (2), and output readout (1). Elementwise gates and skips
/// are excluded, matching the conv/linear conventions.
pub const C_SCAN: u64 = 6;

#[derive(Clone, Copy, Debug)]
pub struct CostReport {
    pub param_count: u64,
    pub macs: u64,
    /// Median latency over timed trials; 0 until measured.
    pub latency_ms: f64,
}

impl CostReport {
    pub fn gmacs(&self) -> f64 {
        self.macs as f64 / 1e9
    }
}

/// MACs of a dense 2-D convolution producing a `side`x`side` map.
pub fn conv_macs(c_in: u64, c_out: u64, k: u64, side: u64) -> u64 {
    c_in * c_out * k * k * side * side
}

pub fn linear_macs(inputs: u64, outputs: u64) -> u64 {
    inputs * outputs
}

/// MACs of one selective-scan application over `l` tokens with `d_ch`
/// channels and state size `n`: input-dependent B/C/Delta projections
/// plus the scan itself at C_SCAN MACs per (token, channel, state).
pub fn scan_macs(l: u64, d_ch: u64, n: u64) -> u64 {
    l * (2 * n * d_ch + d_ch) + C_SCAN * l * n * d_ch
}

/// MACs of one VSSM mixing block on an `side`x`side` map of `c`
/// channels (three token-wise linears, a depthwise 3x3, and the
/// four-route SS2D scan).
fn vssm_macs(c: u64, side: u64, n: u64, disable_ss2d: bool) -> u64 {
    let l = side * side;
    let mut m = 3 * l * c * c + 9 * c * l;
    if !disable_ss2d {
        m += 4 * scan_macs(l, c, n);
    }
    m
}

/// MACs of the single-head attention block used by the vit_blocks
/// ablation (QKVO linears, attention matmuls, 2x-expansion MLP).
fn vit_macs(c: u64, side: u64) -> u64 {
    let l = side * side;
    8 * l * c * c + 2 * l * l * c
}

fn mix_macs(cfg: &PipelineConfig, c: u64, side: u64) -> u64 {
    if cfg.vit_blocks {
        vit_macs(c, side)
    } else {
        vssm_macs(c, side, cfg.n_state as u64, cfg.disable_ss2d)
    }
}

/// Exact parameter count (equal to the checkpoint element count,
/// direction bank included) and inference MACs for one image, summed
/// over encoder, fuser, and generator. Conventions: one multiply-add =
/// one MAC; elementwise ops (bias, activation, norm, gating, noise,
/// demodulation) are excluded.
pub fn count_params_macs(cfg: &PipelineConfig) -> Result<CostReport> {
    cfg.validate()?;
    let mut p = Pipeline::new(cfg.clone())?;
    let param_count = p.to_checkpoint().total_elements() as u64;

    let r = cfg.r as u64;
    let (c1, c2, c3) = (cfg.enc_c1 as u64, cfg.enc_c2 as u64, cfg.enc_c3 as u64);
    let (d_z, d_w, l_g, c_g) = (
        cfg.d_z as u64,
        cfg.d_w as u64,
        cfg.l_g as u64,
        cfg.c_g as u64,
    );
    let n = cfg.n_state as u64;
    let patch = cfg.patch as u64;

    // encoder: stem + three stages of (down + 2 residual blocks)
    let mut macs = conv_macs(3, c1, 4, r / 2);
    let stage = |cin: u64, cout: u64, side: u64| {
        conv_macs(cin, cout, 4, side) + 2 * 2 * conv_macs(cout, cout, 3, side)
    };
    macs += stage(c1, c1, r / 4) + stage(c1, c2, r / 8) + stage(c2, c3, r / 16);
    // patch embedding: one linear per patch cell
    macs += linear_macs(3 * patch * patch, c2) * (r / patch) * (r / patch);
    // refinement mixing blocks at strides 4/8/16
    macs += mix_macs(cfg, c1, r / 4) + mix_macs(cfg, c2, r / 8) + mix_macs(cfg, c3, r / 16);
    // pooled projection heads
    let rows = crate::encoder::head_rows(cfg.l_g);
    for (c, rws) in [c1, c2, c3].iter().zip(rows) {
        macs += linear_macs(*c, rws as u64 * d_w);
    }

    // fuser (skipped entirely by the disable_fuser ablation)
    if !cfg.disable_fuser {
        let h3 = cfg.h3_side() as u64;
        let k_side = cfg.k_side() as u64;
        let c1d = cfg.fuser_c1d as u64;
        let c_reshaped = c1d * d_w / (h3 * h3);
        // direction branch: two 1-D convs over d_w positions, a 1-D
        // scan, then a 2-D conv + mixing block on the h3 grid
        macs += l_g * c1d * 9 * d_w; // 3x3 conv on the height-1 [l_g, 1, d_w] map
        macs += c1d * c1d * 9 * d_w;
        macs += scan_macs(d_w, c1d, n);
        macs += conv_macs(c_reshaped, c3, 3, h3);
        macs += mix_macs(cfg, c3, h3);
        // feature branch
        macs += 2 * conv_macs(c3, c3, 3, h3);
        // merge + mixing + modulated upsampling stages
        macs += conv_macs(2 * c3, c_g, 3, h3);
        macs += mix_macs(cfg, c_g, h3);
        let n_up = (k_side / h3).trailing_zeros() as u64;
        let n_mod = n_up.max(2);
        let mut side = h3;
        for i in 0..n_mod {
            if i < n_up {
                side *= 2;
            }
            macs += linear_macs(l_g * d_w, c_g) + conv_macs(c_g, c_g, 3, side);
        }
    }

    // generator: mapping (once per image), per-layer affine + 3x3 conv,
    // final 1x1 toRGB
    macs += linear_macs(d_z, d_w) + 3 * linear_macs(d_w, d_w);
    for layer in 1..=cfg.l_g {
        let res = resolution_for_depth(layer) as u64;
        macs += linear_macs(d_w, c_g) + conv_macs(c_g, c_g, 3, res);
    }
    macs += conv_macs(c_g, 3, 1, r);

    Ok(CostReport {
        param_count,
        macs,
        latency_ms: 0.0,
    })
}

// ---- latency harness ---------------------------------------------------

/// Median wall-clock milliseconds of `f` over `trials` timed runs after
/// `warmups` untimed ones.
pub fn median_latency_ms(warmups: usize, trials: usize, mut f: impl FnMut()) -> f64 {
    for _ in 0..warmups {
        f();
    }
    let mut times: Vec<f64> = (0..trials)
        .map(|_| {
            let t0 = Instant::now();
            f();
            t0.elapsed().as_secs_f64() * 1e3
        })
        .collect();
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = times.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        times[n / 2]
    } else {
        0.5 * (times[n / 2 - 1] + times[n / 2])
    }
}

/// Median latency of a single s6_forward over a length-`l` sequence.
pub fn scan_latency_ms(l: usize, d_ch: usize, n: usize, warmups: usize, trials: usize) -> f64 {
    use crate::rng::Rng;
    use crate::ssm::{s6_forward, SsmParams, ZohMode};
    let mut rng = Rng::new(77).stream("bench");
    let p = SsmParams::init(d_ch, n, &mut rng);
    let x = Tensor::randn(&[l, d_ch], &mut rng);
    median_latency_ms(warmups, trials, || {
        let y = s6_forward(&x, &p, ZohMode::Simplified).unwrap();
        std::hint::black_box(y.data()[0]);
    })
}

// ---- report tables -------------------------------------------------------

/// Small tabular report emitted as CSV or aligned text.
#[derive(Clone, Debug)]
pub struct ReportTable {
    pub title: String,
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl ReportTable {
    pub fn new(title: &str, headers: &[&str]) -> ReportTable {
        ReportTable {
            title: title.to_string(),
            headers: headers.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn row(&mut self, cells: &[String]) {
        assert_eq!(cells.len(), self.headers.len(), "report row width");
        self.rows.push(cells.to_vec());
    }

    pub fn to_csv(&self) -> String {
        let esc = |s: &str| {
            if s.contains(',') || s.contains('"') {
                format!("\"{}\"", s.replace('"', "\"\""))
            } else {
                s.to_string()
            }
        };
        let mut out = String::new();
        out.push_str(&self.headers.iter().map(|h| esc(h)).collect::<Vec<_>>().join(","));
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.iter().map(|c| esc(c)).collect::<Vec<_>>().join(","));
            out.push('\n');
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut widths: Vec<usize> = self.headers.iter().map(|h| h.len()).collect();
        for r in &self.rows {
            for (i, c) in r.iter().enumerate() {
                widths[i] = widths[i].max(c.len());
            }
        }
        let fmt_row = |cells: &[String]| {
            cells
                .iter()
                .enumerate()
                .map(|(i, c)| format!("{:width$}", c, width = widths[i]))
                .collect::<Vec<_>>()
                .join("  ")
        };
        let mut out = format!("{}\n", self.title);
        out.push_str(&fmt_row(&self.headers));
        out.push('\n');
        out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
        out.push('\n');
        for r in &self.rows {
            out.push_str(&fmt_row(r));
            out.push('\n');
        }
        out
    }
}
