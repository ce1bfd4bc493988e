//! Toy StyleGAN2-style generator: mapping MLP, modulated convolutions,
//! skip-feature injection at a configurable layer, and the inversion /
//! editing dispatch `ŵ = w' + d`.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Linear, LinearVars, ParamBindings};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const MOD_EPS: f32 = 1e-8;
const LRELU_SLOPE: f32 = 0.2;
/// He-style gain sqrt(2 / (1 + slope^2)) applied after every leaky ReLU:
/// the activation shrinks variance by (1 + slope^2) / 2 per layer, which
/// over a deep synthesis stack would collapse the output to near-gray.
const LRELU_GAIN: f32 = 1.386_750_5;

/// One style row per generator layer (the W+ convention).
#[derive(Clone)]
pub struct LatentCode {
    pub w_plus: Tensor, // [L_g, d_w]
}

impl LatentCode {
    pub fn new(w_plus: Tensor) -> Result<LatentCode> {
        if w_plus.shape().len() != 2 {
            return Err(Error::shape(format!(
                "latent code wants [layers, d_w], got {:?}",
                w_plus.shape()
            )));
        }
        if !w_plus.data().iter().all(|v| v.is_finite()) {
            return Err(Error::numerical("non-finite latent code".to_string()));
        }
        Ok(LatentCode { w_plus })
    }

    pub fn layers(&self) -> usize {
        self.w_plus.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.w_plus.shape()[1]
    }
}

/// Additive latent-space edit; the zero tensor is the inversion sentinel.
#[derive(Clone)]
pub struct EditDirection {
    pub d: Tensor, // [L_g, d_w]
}

impl EditDirection {
    pub fn new(d: Tensor) -> Result<EditDirection> {
        let c = LatentCode::new(d)?;
        Ok(EditDirection { d: c.w_plus })
    }

    pub fn zeros(layers: usize, d_w: usize) -> EditDirection {
        EditDirection {
            d: Tensor::zeros(&[layers, d_w]),
        }
    }

    pub fn scale(&self, s: f32) -> EditDirection {
        EditDirection {
            d: self.d.scale(s),
        }
    }
}

#[derive(Clone)]
pub struct GenLayer {
    pub affine: Linear,      // d_w -> c_in, bias init 1
    pub kernel: Tensor,      // [c_out, c_in, 3, 3]
    pub bias: Tensor,        // [c_out]
    pub noise_scale: Tensor, // [1], zero-init; per-pixel noise disabled by default
    pub upsample: bool,
}

#[derive(Clone)]
pub struct GeneratorParams {
    pub mapping: Vec<Linear>, // 4 layers, d_z -> d_w -> ... -> d_w
    pub const_input: Tensor,  // [c_g, 4, 4]
    pub layers: Vec<GenLayer>,
    pub to_rgb_w: Tensor, // [3, c_g, 1, 1]
    pub to_rgb_b: Tensor, // [3]
    pub k_inject: usize,
    pub d_z: usize,
    pub d_w: usize,
}

/// Output resolution for a generator depth: 4x4 base, doubling every
/// two layers.
pub fn resolution_for_depth(l_g: usize) -> usize {
    4 * (1usize << ((l_g - 1) / 2))
}

impl GeneratorParams {
    pub fn init(
        d_z: usize,
        d_w: usize,
        l_g: usize,
        c_g: usize,
        k_inject: usize,
        rng: &mut Rng,
    ) -> Result<GeneratorParams> {
        if l_g < 2 {
            return Err(Error::config("generator wants at least 2 layers".to_string()));
        }
        if k_inject < 1 || k_inject >= l_g {
            return Err(Error::config(format!(
                "injection layer {k_inject} out of range for depth {l_g}"
            )));
        }
        let mut mapping = Vec::with_capacity(4);
        mapping.push(Linear::init(d_z, d_w, rng));
        for _ in 1..4 {
            mapping.push(Linear::init(d_w, d_w, rng));
        }
        let layers = (0..l_g)
            .map(|i| GenLayer {
                affine: Linear::init_bias(d_w, c_g, 1.0, rng),
                kernel: Tensor::randn_scaled(&[c_g, c_g, 3, 3], 1.0 / ((c_g * 9) as f32).sqrt(), rng),
                bias: Tensor::zeros(&[c_g]),
                noise_scale: Tensor::zeros(&[1]),
                upsample: i >= 2 && i % 2 == 0,
            })
            .collect();
        Ok(GeneratorParams {
            mapping,
            const_input: Tensor::randn(&[c_g, 4, 4], rng),
            layers,
            to_rgb_w: Tensor::randn_scaled(&[3, c_g, 1, 1], 1.0 / (c_g as f32).sqrt(), rng),
            to_rgb_b: Tensor::zeros(&[3]),
            k_inject,
            d_z,
            d_w,
        })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn channels(&self) -> usize {
        self.const_input.shape()[0]
    }

    pub fn resolution(&self) -> usize {
        resolution_for_depth(self.depth())
    }

    /// Spatial side length of the layer-k activation (the injection site).
    pub fn inject_resolution(&self) -> usize {
        4 * (1usize << (self.k_inject / 2))
    }

    pub fn for_each_param(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (i, m) in self.mapping.iter_mut().enumerate() {
            m.for_each_param(&format!("{prefix}.map{i}"), f);
        }
        f(format!("{prefix}.const"), &mut self.const_input);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.affine.for_each_param(&format!("{prefix}.l{i}.affine"), f);
            f(format!("{prefix}.l{i}.kernel"), &mut l.kernel);
            f(format!("{prefix}.l{i}.bias"), &mut l.bias);
            f(format!("{prefix}.l{i}.noise"), &mut l.noise_scale);
        }
        f(format!("{prefix}.rgb_w"), &mut self.to_rgb_w);
        f(format!("{prefix}.rgb_b"), &mut self.to_rgb_b);
    }

    pub fn bind(&self, g: &Graph, prefix: &str, reg: &mut ParamBindings) -> GeneratorVars {
        GeneratorVars {
            mapping: self
                .mapping
                .iter()
                .enumerate()
                .map(|(i, m)| m.bind(g, &format!("{prefix}.map{i}"), reg))
                .collect(),
            const_input: reg.leaf(g, format!("{prefix}.const"), &self.const_input),
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| GenLayerVars {
                    affine: l.affine.bind(g, &format!("{prefix}.l{i}.affine"), reg),
                    kernel: reg.leaf(g, format!("{prefix}.l{i}.kernel"), &l.kernel),
                    bias: reg.leaf(g, format!("{prefix}.l{i}.bias"), &l.bias),
                    noise_scale: reg.leaf(g, format!("{prefix}.l{i}.noise"), &l.noise_scale),
                    upsample: l.upsample,
                })
                .collect(),
            to_rgb_w: reg.leaf(g, format!("{prefix}.rgb_w"), &self.to_rgb_w),
            to_rgb_b: reg.leaf(g, format!("{prefix}.rgb_b"), &self.to_rgb_b),
            k_inject: self.k_inject,
        }
    }

    /// Mapping network on plain tensors: z -> one w row broadcast to all
    /// L_g rows of the latent code.
    pub fn mapping(&self, z: &Tensor) -> Result<LatentCode> {
        if z.shape() != [self.d_z] {
            return Err(Error::shape(format!(
                "mapping wants z[{}], got {:?}",
                self.d_z,
                z.shape()
            )));
        }
        if !z.data().iter().all(|v| v.is_finite()) {
            return Err(Error::numerical("non-finite z".to_string()));
        }
        let mut x = z.reshape(&[1, self.d_z])?;
        for (i, m) in self.mapping.iter().enumerate() {
            x = m.apply(&x)?;
            if i + 1 < self.mapping.len() {
                x = x.map(|v| LRELU_GAIN * if v >= 0.0 { v } else { LRELU_SLOPE * v });
            }
        }
        let row = x.to_vec();
        let l_g = self.depth();
        let mut data = Vec::with_capacity(l_g * self.d_w);
        for _ in 0..l_g {
            data.extend_from_slice(&row);
        }
        LatentCode::new(Tensor::new(vec![l_g, self.d_w], data)?)
    }
}

#[derive(Clone)]
pub struct GenLayerVars {
    pub affine: LinearVars,
    pub kernel: Var,
    pub bias: Var,
    pub noise_scale: Var,
    pub upsample: bool,
}

#[derive(Clone)]
pub struct GeneratorVars {
    pub mapping: Vec<LinearVars>,
    pub const_input: Var,
    pub layers: Vec<GenLayerVars>,
    pub to_rgb_w: Var,
    pub to_rgb_b: Var,
    pub k_inject: usize,
}

/// Style-modulated 3x3 convolution: scale the kernel's input channels by
/// `s`, optionally demodulate each output filter to unit norm, convolve.
pub fn mod_conv(x: &Var, s: &Var, kernel: &Var, demodulate: bool, pad: usize) -> Result<Var> {
    let ks = kernel.shape();
    if ks.len() != 4 {
        return Err(Error::shape(format!("mod_conv kernel wants 4 dims, got {ks:?}")));
    }
    let (o, c) = (ks[0], ks[1]);
    if s.shape() != [c] {
        return Err(Error::shape(format!(
            "mod_conv style wants [{c}], got {:?}",
            s.shape()
        )));
    }
    let w_mod = kernel.mul(&s.reshape(&[c, 1, 1])?)?;
    let w_final = if demodulate {
        let sumsq = w_mod.mul(&w_mod)?.sum_trailing(1)?; // [O]
        let inv = sumsq.rsqrt_eps(MOD_EPS).reshape(&[o, 1, 1, 1])?;
        w_mod.mul(&inv)?
    } else {
        w_mod
    };
    let y = x.conv2d(&w_final, 1, pad)?;
    if !y.value().data().iter().all(|v| v.is_finite()) {
        return Err(Error::numerical("mod_conv produced non-finite output".to_string()));
    }
    Ok(y)
}

pub struct SynthOut {
    pub image: Var, // [3, R, R]
    /// Layer-k activation after conv+bias, before injection; the
    /// capture-and-replay oracle feeds this back in as `f_inject`.
    pub pre_inject: Var,
}

/// Run the synthesis stack on a bound latent code, optionally adding
/// `f_inject` to the layer-k activation right after its convolution.
pub fn synthesize_var(
    gen: &GeneratorVars,
    w_plus: &Var,
    f_inject: Option<&Var>,
) -> Result<SynthOut> {
    synthesize_var_noisy(gen, w_plus, f_inject, None)
}

/// As `synthesize_var`, with optional per-layer noise maps scaled by the
/// (zero-initialized) per-layer noise parameters.
pub fn synthesize_var_noisy(
    gen: &GeneratorVars,
    w_plus: &Var,
    f_inject: Option<&Var>,
    noise: Option<&[Var]>,
) -> Result<SynthOut> {
    let ws = w_plus.shape();
    if ws.len() != 2 || ws[0] != gen.layers.len() {
        return Err(Error::shape(format!(
            "latent wants [{}, d_w], got {ws:?}",
            gen.layers.len()
        )));
    }
    let mut x = gen.const_input.clone();
    let mut pre_inject = None;
    for (i, layer) in gen.layers.iter().enumerate() {
        if layer.upsample {
            x = x.upsample2x()?;
        }
        let row = w_plus.gather_rows(&[i])?; // [1, d_w]
        let s_row = layer.affine.apply(&row)?; // [1, c]
        let c = s_row.shape()[1];
        let s = s_row.reshape(&[c])?;
        x = mod_conv(&x, &s, &layer.kernel, true, 1)?;
        if let Some(maps) = noise {
            if maps.len() != gen.layers.len() {
                return Err(Error::shape(format!(
                    "expected {} noise maps, got {}",
                    gen.layers.len(),
                    maps.len()
                )));
            }
            x = x.add(&maps[i].mul(&layer.noise_scale)?)?;
        }
        let cb = layer.bias.shape()[0];
        x = x.add(&layer.bias.reshape(&[cb, 1, 1])?)?;
        if i == gen.k_inject {
            pre_inject = Some(x.clone());
            if let Some(f) = f_inject {
                if f.shape() != x.shape() {
                    return Err(Error::shape(format!(
                        "injection shape {:?} vs activation {:?}",
                        f.shape(),
                        x.shape()
                    )));
                }
                x = x.add(f)?;
            }
        }
        x = x.leaky_relu(LRELU_SLOPE).scale(LRELU_GAIN);
    }
    let rgb = x.conv2d(&gen.to_rgb_w, 1, 0)?;
    // Linear image head; outputs are clamped to [-1, 1] only at PNG export
    // so the loss path never saturates.
    let image = rgb.add(&gen.to_rgb_b.reshape(&[3, 1, 1])?)?;
    Ok(SynthOut {
        image,
        pre_inject: pre_inject.expect("k_inject validated at construction"),
    })
}

/// Eq.-style dispatch: form the edited latent `ŵ = w' + d` and synthesize
/// with the fused skip feature. `d = 0` reduces exactly to inversion.
pub fn dispatch(
    gen: &GeneratorVars,
    w_prime: &Var,
    f_k: Option<&Var>,
    d: &Var,
) -> Result<(Var, Var)> {
    if w_prime.shape() != d.shape() {
        return Err(Error::shape(format!(
            "direction shape {:?} vs latent {:?}",
            d.shape(),
            w_prime.shape()
        )));
    }
    let w_hat = w_prime.add(d)?;
    let out = synthesize_var(gen, &w_hat, f_k)?;
    Ok((out.image, w_hat))
}

/// Plain-tensor synthesis for inference paths: binds a throwaway graph.
pub fn synthesize(
    params: &GeneratorParams,
    w: &LatentCode,
    f_inject: Option<&Tensor>,
) -> Result<Tensor> {
    let g = Graph::new();
    let mut reg = ParamBindings::new();
    let gv = params.bind(&g, "gen", &mut reg);
    let wv = g.leaf(w.w_plus.clone());
    let fv = f_inject.map(|f| g.leaf(f.clone()));
    Ok(synthesize_var(&gv, &wv, fv.as_ref())?.image.value())
}

/// Fixed bank of orthonormal random directions scaled to a target norm,
/// broadcast across all style rows.
pub fn direction_bank(
    count: usize,
    layers: usize,
    d_w: usize,
    norm: f32,
    rng: &mut Rng,
) -> Result<Vec<EditDirection>> {
    if count > d_w {
        return Err(Error::config(format!(
            "at most {d_w} orthonormal directions available, asked for {count}"
        )));
    }
    // Gram-Schmidt on random rows
    let mut basis: Vec<Vec<f32>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v = rng.normal_vec(d_w);
        for b in &basis {
            let dot: f32 = v.iter().zip(b).map(|(a, c)| a * c).sum();
            for (vi, bi) in v.iter_mut().zip(b) {
                *vi -= dot * bi;
            }
        }
        let n: f32 = v.iter().map(|a| a * a).sum::<f32>().sqrt();
        if n < 1e-3 {
            continue;
        }
        for vi in v.iter_mut() {
            *vi /= n;
        }
        basis.push(v);
    }
    let row_scale = norm / (layers as f32).sqrt();
    basis
        .into_iter()
        .map(|v| {
            let mut data = Vec::with_capacity(layers * d_w);
            for _ in 0..layers {
                data.extend(v.iter().map(|a| a * row_scale));
            }
            EditDirection::new(Tensor::new(vec![layers, d_w], data)?)
        })
        .collect()
}
