//! Pipeline assembly: generator, encoder, Fuser, direction bank and the
//! frozen feature extractor built from one validated config, plus the
//! inversion/editing entry points and checkpoint persistence.

use crate::checkpoint::Checkpoint;
use crate::config::PipelineConfig;
use crate::encoder::{EncoderParams, EncoderVars};
use crate::error::{Error, Result};
use crate::features::FeatureExtractor;
use crate::fuser::{FuserParams, FuserVars};
use crate::graph::{Graph, Var};
use crate::params::ParamBindings;
use crate::rng::Rng;
use crate::ssm::ZohMode;
use crate::stylegen::{
    dispatch, direction_bank, synthesize_var_noisy, EditDirection, GeneratorParams, GeneratorVars,
    LatentCode,
};
use crate::tensor::Tensor;
use std::path::Path;

pub struct Pipeline {
    pub cfg: PipelineConfig,
    pub gen: GeneratorParams,
    pub enc: EncoderParams,
    pub fus: Option<FuserParams>,
    pub directions: Vec<EditDirection>,
    pub features: FeatureExtractor,
}

pub struct PipelineVars {
    pub gen: GeneratorVars,
    pub enc: EncoderVars,
    pub fus: Option<FuserVars>,
}

pub struct InvertOut {
    pub image: Tensor,
    pub w_prime: Tensor,
    pub h3: Tensor,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Result<Pipeline> {
        cfg.validate()?;
        let mut gen_rng = Rng::new(cfg.seed).stream("gen");
        let mut enc_rng = Rng::new(cfg.seed).stream("enc");
        let mut fus_rng = Rng::new(cfg.seed).stream("fus");
        let mut dir_rng = Rng::new(cfg.seed).stream("dirs");

        let gen = GeneratorParams::init(cfg.d_z, cfg.d_w, cfg.l_g, cfg.c_g, cfg.k_inject, &mut gen_rng)?;
        let mut enc = EncoderParams::init(
            cfg.r,
            cfg.d_w,
            cfg.l_g,
            [cfg.enc_c1, cfg.enc_c2, cfg.enc_c3],
            cfg.n_state,
            cfg.patch,
            cfg.vit_blocks,
            cfg.shared_routes,
            &mut enc_rng,
        )?;
        enc.set_disable_ss2d(cfg.disable_ss2d);
        let fus = if cfg.disable_fuser {
            None
        } else {
            let mut f = FuserParams::init(
                cfg.l_g,
                cfg.d_w,
                cfg.enc_c3,
                cfg.h3_side(),
                cfg.c_g,
                cfg.k_side(),
                cfg.fuser_c1d,
                cfg.n_state,
                cfg.vit_blocks,
                cfg.shared_routes,
                &mut fus_rng,
            )?;
            f.set_disable_ss2d(cfg.disable_ss2d);
            Some(f)
        };
        let directions = direction_bank(
            cfg.direction_count,
            cfg.l_g,
            cfg.d_w,
            cfg.direction_norm,
            &mut dir_rng,
        )?;
        let features = FeatureExtractor::init(cfg.seed);
        Ok(Pipeline {
            features,
            directions,
            fus,
            enc,
            gen,
            cfg,
        })
    }

    pub fn mode(&self) -> ZohMode {
        self.cfg.zoh_mode.to_mode()
    }

    pub fn bind(&self, g: &Graph, reg: &mut ParamBindings) -> PipelineVars {
        PipelineVars {
            gen: self.gen.bind(g, "gen", reg),
            enc: self.enc.bind(g, "enc", reg),
            fus: self.fus.as_ref().map(|f| f.bind(g, "fus", reg)),
        }
    }

    /// Only encoder and Fuser parameters train; the generator is frozen.
    pub fn trainable(name: &str) -> bool {
        name.starts_with("enc.") || name.starts_with("fus.")
    }

    fn noise_vars(&self, g: &Graph) -> Option<Vec<Var>> {
        if !self.cfg.noise_inputs {
            return None;
        }
        let mut rng = Rng::new(self.cfg.seed).stream("noise");
        let c = self.cfg.c_g;
        let mut maps = Vec::with_capacity(self.cfg.l_g);
        for i in 0..self.cfg.l_g {
            let side = 4 * (1usize << (i / 2));
            maps.push(g.leaf(Tensor::randn(&[c, side, side], &mut rng)));
        }
        Some(maps)
    }

    /// Shared inversion/editing path; `invert` and `edit --scale 0` are
    /// byte-identical because they are literally the same call.
    fn run(&self, x: &Tensor, d: &Tensor) -> Result<InvertOut> {
        let g = Graph::new();
        let mut reg = ParamBindings::new();
        let pv = self.bind(&g, &mut reg);
        let xv = g.leaf(x.clone());
        let (w_prime, h3) = pv.enc.encode(&xv, self.mode())?;
        let dv = g.leaf(d.clone());
        let f_k = match &pv.fus {
            Some(f) => Some(f.fuse(&h3, &dv, self.mode())?),
            None => None,
        };
        let w_hat = w_prime.add(&dv)?;
        let noise = self.noise_vars(&g);
        let out = synthesize_var_noisy(&pv.gen, &w_hat, f_k.as_ref(), noise.as_deref())?;
        Ok(InvertOut {
            image: out.image.value(),
            w_prime: w_prime.value(),
            h3: h3.value(),
        })
    }

    pub fn zero_direction(&self) -> Tensor {
        Tensor::zeros(&[self.cfg.l_g, self.cfg.d_w])
    }

    pub fn invert(&self, x: &Tensor) -> Result<InvertOut> {
        self.run(x, &self.zero_direction())
    }

    pub fn edit(&self, x: &Tensor, d: &EditDirection, scale: f32) -> Result<InvertOut> {
        if d.d.shape() != [self.cfg.l_g, self.cfg.d_w] {
            return Err(Error::shape(format!(
                "direction shape {:?}, pipeline wants [{}, {}]",
                d.d.shape(),
                self.cfg.l_g,
                self.cfg.d_w
            )));
        }
        let d_eff = if scale == 0.0 {
            self.zero_direction()
        } else {
            d.d.scale(scale)
        };
        self.run(x, &d_eff)
    }

    /// Sample an image from the frozen generator (the synthetic data
    /// source for training and evaluation).
    pub fn sample_image(&self, rng: &mut Rng) -> Result<(Tensor, LatentCode)> {
        let z = Tensor::new(vec![self.cfg.d_z], rng.normal_vec(self.cfg.d_z))?;
        let w = self.gen.mapping(&z)?;
        let img = crate::stylegen::synthesize(&self.gen, &w, None)?;
        Ok((img, w))
    }

    /// Synthesize from an explicit latent, optionally with a skip feature.
    pub fn generate(&self, w: &LatentCode, f_k: Option<&Tensor>) -> Result<Tensor> {
        crate::stylegen::synthesize(&self.gen, w, f_k)
    }

    pub fn dispatch_latent(&self, w: &LatentCode, f_k: Option<&Tensor>, d: &EditDirection) -> Result<Tensor> {
        let g = Graph::new();
        let mut reg = ParamBindings::new();
        let gv = self.gen.bind(&g, "gen", &mut reg);
        let wv = g.leaf(w.w_plus.clone());
        let fv = f_k.map(|f| g.leaf(f.clone()));
        let dv = g.leaf(d.d.clone());
        let (img, _) = dispatch(&gv, &wv, fv.as_ref(), &dv)?;
        Ok(img.value())
    }

    pub fn for_each_param(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.gen.for_each_param("gen", f);
        self.enc.for_each_param("enc", f);
        if let Some(fu) = &mut self.fus {
            fu.for_each_param("fus", f);
        }
    }

    pub fn named_params(&mut self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.for_each_param(&mut |name, t| out.push((name, t.clone())));
        out
    }

    pub fn param_count(&mut self) -> usize {
        let mut n = 0usize;
        self.for_each_param(&mut |_, t| n += t.len());
        n
    }

    pub fn to_checkpoint(&mut self) -> Checkpoint {
        let mut ck = Checkpoint::new(self.cfg.to_text());
        for (name, t) in self.named_params() {
            ck.push(name, t);
        }
        for (i, d) in self.directions.iter().enumerate() {
            ck.push(format!("dir{i}"), d.d.clone());
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Pipeline> {
        let cfg = PipelineConfig::parse(&ck.config_text)?;
        let mut p = Pipeline::new(cfg)?;
        let mut missing = Vec::new();
        p.for_each_param(&mut |name, t| match ck.get(&name) {
            Some(saved) if saved.shape() == t.shape() => *t = saved.clone(),
            Some(saved) => missing.push(format!(
                "{name}: shape {:?} vs expected {:?}",
                saved.shape(),
                t.shape()
            )),
            None => missing.push(format!("{name}: missing")),
        });
        if !missing.is_empty() {
            return Err(Error::corruption(format!(
                "checkpoint does not match config: {}",
                missing.join("; ")
            )));
        }
        for (i, d) in p.directions.iter_mut().enumerate() {
            if let Some(saved) = ck.get(&format!("dir{i}")) {
                if saved.shape() != d.d.shape() {
                    return Err(Error::corruption(format!("dir{i}: bad shape")));
                }
                d.d = saved.clone();
            }
        }
        Ok(p)
    }

    pub fn save(&mut self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Pipeline> {
        Pipeline::from_checkpoint(&Checkpoint::load(path)?)
    }
}
