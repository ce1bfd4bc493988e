//! Flat key=value pipeline configuration with strict unknown-key
//! rejection and cross-module shape validation.

use crate::error::{Error, Result};
use crate::stylegen::resolution_for_depth;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ZohKind {
    Simplified,
    Exact,
}

impl ZohKind {
    pub fn to_mode(self) -> crate::ssm::ZohMode {
        match self {
            ZohKind::Simplified => crate::ssm::ZohMode::Simplified,
            ZohKind::Exact => crate::ssm::ZohMode::Exact,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    // generator
    pub r: usize,
    pub d_z: usize,
    pub d_w: usize,
    pub l_g: usize,
    pub c_g: usize,
    pub k_inject: usize,
    pub noise_inputs: bool,
    // encoder
    pub enc_c1: usize,
    pub enc_c2: usize,
    pub enc_c3: usize,
    pub patch: usize,
    pub n_state: usize,
    // fuser
    pub fuser_c1d: usize,
    // ssm
    pub zoh_mode: ZohKind,
    // training
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub batch: usize,
    pub p_inv: f32,
    pub steps: usize,
    /// Global-norm gradient clip; 0 disables clipping.
    pub grad_clip: f32,
    pub lambda_rec: f32,
    pub lambda_perc: f32,
    pub lambda_id: f32,
    pub lambda_struct: f32,
    pub lambda_edit: f32,
    // direction bank
    pub direction_count: usize,
    pub direction_norm: f32,
    // ablations
    pub disable_fuser: bool,
    pub disable_ss2d: bool,
    pub disable_loss_edit: bool,
    pub vit_blocks: bool,
    pub shared_routes: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            r: 64,
            d_z: 64,
            d_w: 64,
            l_g: 10,
            c_g: 32,
            k_inject: 7,
            noise_inputs: false,
            enc_c1: 32,
            enc_c2: 64,
            enc_c3: 128,
            patch: 8,
            n_state: 8,
            fuser_c1d: 16,
            zoh_mode: ZohKind::Simplified,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            batch: 4,
            p_inv: 0.5,
            steps: 2000,
            grad_clip: 0.0,
            lambda_rec: 1.0,
            lambda_perc: 0.8,
            lambda_id: 0.0,
            lambda_struct: 0.0,
            lambda_edit: 1.0,
            direction_count: 4,
            direction_norm: 1.0,
            disable_fuser: false,
            disable_ss2d: false,
            disable_loss_edit: false,
            vit_blocks: false,
            shared_routes: false,
        }
    }
}

impl PipelineConfig {
    /// Small configuration for fast tests and gradient checks.
    pub fn tiny() -> Self {
        PipelineConfig {
            r: 16,
            d_z: 8,
            d_w: 8,
            l_g: 6,
            c_g: 4,
            k_inject: 3,
            enc_c1: 4,
            enc_c2: 6,
            enc_c3: 8,
            n_state: 4,
            fuser_c1d: 4,
            batch: 2,
            ..PipelineConfig::default()
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::config(format!("bad value {v:?} for key {key}")))
        }
        match key {
            "seed" => self.seed = p(key, value)?,
            "r" => self.r = p(key, value)?,
            "d_z" => self.d_z = p(key, value)?,
            "d_w" => self.d_w = p(key, value)?,
            "l_g" => self.l_g = p(key, value)?,
            "c_g" => self.c_g = p(key, value)?,
            "k_inject" => self.k_inject = p(key, value)?,
            "noise_inputs" => self.noise_inputs = p(key, value)?,
            "enc_c1" => self.enc_c1 = p(key, value)?,
            "enc_c2" => self.enc_c2 = p(key, value)?,
            "enc_c3" => self.enc_c3 = p(key, value)?,
            "patch" => self.patch = p(key, value)?,
            "n_state" => self.n_state = p(key, value)?,
            "fuser_c1d" => self.fuser_c1d = p(key, value)?,
            "zoh_mode" => {
                self.zoh_mode = match value {
                    "simplified" => ZohKind::Simplified,
                    "exact" => ZohKind::Exact,
                    _ => {
                        return Err(Error::config(format!(
                            "zoh_mode must be simplified|exact, got {value:?}"
                        )))
                    }
                }
            }
            "lr" => self.lr = p(key, value)?,
            "beta1" => self.beta1 = p(key, value)?,
            "beta2" => self.beta2 = p(key, value)?,
            "batch" => self.batch = p(key, value)?,
            "p_inv" => self.p_inv = p(key, value)?,
            "steps" => self.steps = p(key, value)?,
            "grad_clip" => self.grad_clip = p(key, value)?,
            "lambda_rec" => self.lambda_rec = p(key, value)?,
            "lambda_perc" => self.lambda_perc = p(key, value)?,
            "lambda_id" => self.lambda_id = p(key, value)?,
            "lambda_struct" => self.lambda_struct = p(key, value)?,
            "lambda_edit" => self.lambda_edit = p(key, value)?,
            "direction_count" => self.direction_count = p(key, value)?,
            "direction_norm" => self.direction_norm = p(key, value)?,
            "disable_fuser" => self.disable_fuser = p(key, value)?,
            "disable_ss2d" => self.disable_ss2d = p(key, value)?,
            "disable_loss_edit" => self.disable_loss_edit = p(key, value)?,
            "vit_blocks" => self.vit_blocks = p(key, value)?,
            "shared_routes" => self.shared_routes = p(key, value)?,
            _ => return Err(Error::config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<PipelineConfig> {
        let mut cfg = PipelineConfig::default();
        cfg.apply(text)?;
        Ok(cfg)
    }

    /// Apply key=value lines on top of the current values.
    pub fn apply(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}: expected key=value, got {line:?}", lineno + 1))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let z = match self.zoh_mode {
            ZohKind::Simplified => "simplified",
            ZohKind::Exact => "exact",
        };
        format!(
            "seed = {}\nr = {}\nd_z = {}\nd_w = {}\nl_g = {}\nc_g = {}\nk_inject = {}\n\
             noise_inputs = {}\nenc_c1 = {}\nenc_c2 = {}\nenc_c3 = {}\npatch = {}\n\
             n_state = {}\nfuser_c1d = {}\nzoh_mode = {}\nlr = {}\nbeta1 = {}\nbeta2 = {}\n\
             batch = {}\np_inv = {}\nsteps = {}\ngrad_clip = {}\nlambda_rec = {}\nlambda_perc = {}\n\
             lambda_id = {}\nlambda_struct = {}\nlambda_edit = {}\ndirection_count = {}\n\
             direction_norm = {}\ndisable_fuser = {}\ndisable_ss2d = {}\n\
             disable_loss_edit = {}\nvit_blocks = {}\nshared_routes = {}\n",
            self.seed,
            self.r,
            self.d_z,
            self.d_w,
            self.l_g,
            self.c_g,
            self.k_inject,
            self.noise_inputs,
            self.enc_c1,
            self.enc_c2,
            self.enc_c3,
            self.patch,
            self.n_state,
            self.fuser_c1d,
            z,
            self.lr,
            self.beta1,
            self.beta2,
            self.batch,
            self.p_inv,
            self.steps,
            self.grad_clip,
            self.lambda_rec,
            self.lambda_perc,
            self.lambda_id,
            self.lambda_struct,
            self.lambda_edit,
            self.direction_count,
            self.direction_norm,
            self.disable_fuser,
            self.disable_ss2d,
            self.disable_loss_edit,
            self.vit_blocks,
            self.shared_routes,
        )
    }

    /// Spatial side of the deepest encoder feature Ĥ3.
    pub fn h3_side(&self) -> usize {
        self.r / 16
    }

    /// Spatial side of the generator's layer-k activation.
    pub fn k_side(&self) -> usize {
        4 * (1usize << (self.k_inject / 2))
    }

    /// Cross-module shape contracts; module constructors re-check their
    /// own slices of this, but config load fails fast with one message.
    pub fn validate(&self) -> Result<()> {
        if resolution_for_depth(self.l_g) != self.r {
            return Err(Error::config(format!(
                "generator depth {} produces {}x{} images but r = {}",
                self.l_g,
                resolution_for_depth(self.l_g),
                resolution_for_depth(self.l_g),
                self.r
            )));
        }
        if self.r < 16 || self.r % 16 != 0 {
            return Err(Error::config(format!(
                "r = {} must be a positive multiple of 16",
                self.r
            )));
        }
        if self.k_inject < 1 || self.k_inject >= self.l_g {
            return Err(Error::config(format!(
                "k_inject = {} out of range for depth {}",
                self.k_inject, self.l_g
            )));
        }
        if self.patch == 0 || self.r % self.patch != 0 || self.r / self.patch != self.r / 8 {
            return Err(Error::config(format!(
                "patch = {} incompatible with r = {}",
                self.patch, self.r
            )));
        }
        if !(self.enc_c1 < self.enc_c2 && self.enc_c2 < self.enc_c3) {
            return Err(Error::config(format!(
                "encoder channels must increase: {} {} {}",
                self.enc_c1, self.enc_c2, self.enc_c3
            )));
        }
        let grid = self.h3_side() * self.h3_side();
        if (self.fuser_c1d * self.d_w) % grid != 0 {
            return Err(Error::config(format!(
                "fuser_c1d·d_w = {} not divisible by Ĥ3 grid {grid}",
                self.fuser_c1d * self.d_w
            )));
        }
        let ratio = self.k_side() / self.h3_side();
        if self.k_side() < self.h3_side()
            || self.k_side() % self.h3_side() != 0
            || !ratio.is_power_of_two()
        {
            return Err(Error::config(format!(
                "injection side {} must be a power-of-two multiple of Ĥ3 side {}",
                self.k_side(),
                self.h3_side()
            )));
        }
        for (name, v) in [
            ("lambda_rec", self.lambda_rec),
            ("lambda_perc", self.lambda_perc),
            ("lambda_id", self.lambda_id),
            ("lambda_struct", self.lambda_struct),
            ("lambda_edit", self.lambda_edit),
            ("grad_clip", self.grad_clip),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("{name} must be nonnegative, got {v}")));
            }
        }
        if self.lambda_id != 0.0 || self.lambda_struct != 0.0 {
            return Err(Error::config(
                "lambda_id/lambda_struct need proxy models that are not configured".to_string(),
            ));
        }
        if !(0.0..=1.0).contains(&self.p_inv) {
            return Err(Error::config(format!("p_inv must be in [0,1], got {}", self.p_inv)));
        }
        if self.direction_count == 0 || self.direction_count > self.d_w {
            return Err(Error::config(format!(
                "direction_count must be in 1..={}, got {}",
                self.d_w, self.direction_count
            )));
        }
        if !(0.5..=2.0).contains(&self.direction_norm) {
            return Err(Error::config(format!(
                "direction_norm must be in [0.5, 2.0], got {}",
                self.direction_norm
            )));
        }
        if self.batch == 0 {
            return Err(Error::config("batch must be positive".to_string()));
        }
        Ok(())
    }
}
