//! Command-line surface: synthetic data generation, training,
//! inversion/editing inference, evaluation, benchmarking, and the
//! ablation comparison table.

use clap::{Args, Parser, Subcommand};
use std::fs;
use std::path::{Path, PathBuf};
use styleinv::config::PipelineConfig;
use styleinv::error::{Error, Result};
use styleinv::metrics::{
    count_params_macs, editing_quality, frechet_distance, l2, median_latency_ms, ms_ssim,
    scan_latency_ms, split_by_attribute, FeatureStats, ReportTable,
};
use styleinv::pipeline::Pipeline;
use styleinv::rng::Rng;
use styleinv::stylegen::EditDirection;
use styleinv::tensor::Tensor;
use styleinv::train::{synth_pair, train};

#[derive(Parser)]
#[command(name = "styleinv", version, about = "State-space GAN inversion and editing")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Path to a key=value config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Inline config overrides, e.g. --set r=32 --set steps=100
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Seed override (applied after --config and --set)
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; everything here is single-threaded and fully
    /// deterministic, so only 1 is accepted
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

impl ConfigArgs {
    fn build(&self) -> Result<PipelineConfig> {
        if self.threads != 1 {
            return Err(Error::config(format!(
                "only --threads 1 is supported (got {})",
                self.threads
            )));
        }
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::parse(&fs::read_to_string(p).map_err(io_err)?)?,
            None => PipelineConfig::default(),
        };
        for s in &self.sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::config(format!("--set wants KEY=VALUE, got {s:?}")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Sample (X, X_e, w+, d) pairs from the frozen generator to disk
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
        /// Number of pairs
        #[arg(long, default_value_t = 16)]
        count: usize,
        /// Also write human-viewable PNGs
        #[arg(long)]
        png: bool,
    },
    /// Train the encoder and fuser against the frozen generator
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory (checkpoint + training log)
        #[arg(long)]
        out: PathBuf,
        /// Steps override (defaults to the config's `steps`)
        #[arg(long)]
        steps: Option<usize>,
        /// Log every N steps
        #[arg(long, default_value_t = 10)]
        log_every: usize,
    },
    /// Invert an image through a trained model
    Invert {
        /// Checkpoint path
        #[arg(long)]
        model: PathBuf,
        /// Input image (.blob or .png)
        #[arg(long)]
        input: PathBuf,
        /// Output basename; writes OUT.blob, OUT.png, OUT_w.blob
        #[arg(long)]
        out: PathBuf,
    },
    /// Edit an image along a direction through a trained model
    Edit {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Direction tensor blob of shape [L_g, d_w]
        #[arg(long)]
        direction: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        scale: f32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Metrics report over a gen-data directory
    Eval {
        #[arg(long)]
        model: PathBuf,
        /// Directory produced by gen-data
        #[arg(long)]
        data: PathBuf,
        /// Report basename; writes OUT.csv and OUT.txt
        #[arg(long)]
        out: PathBuf,
        /// Editing-quality variant: compare B-hat against set A instead of B
        #[arg(long)]
        against_a: bool,
    },
    /// Cost report (params, GMACs, latency) and scan-scaling table
    Bench {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Timed trials for the pipeline latency median
        #[arg(long, default_value_t = 30)]
        trials: usize,
    },
    /// Train the ablation variants under one budget and compare
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Training steps per variant
        #[arg(long, default_value_t = 200)]
        steps: usize,
        /// Evaluation pairs
        #[arg(long, default_value_t = 16)]
        pairs: usize,
    },
}

fn io_err(e: std::io::Error) -> Error {
    Error::config(format!("io error: {e}"))
}

// ---- image I/O -------------------------------------------------------------

/// Clamp [-1, 1] to 8-bit and write a PNG.
fn write_png(path: &Path, img: &Tensor) -> Result<()> {
    let s = img.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape(format!("png wants [3,H,W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let d = img.data();
    let mut buf = vec![0u8; h * w * 3];
    for i in 0..h * w {
        for c in 0..3 {
            let v = d[c * h * w + i].clamp(-1.0, 1.0);
            buf[i * 3 + c] = ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8;
        }
    }
    image::save_buffer(
        path,
        &buf,
        w as u32,
        h as u32,
        image::ColorType::Rgb8,
    )
    .map_err(|e| Error::config(format!("png write failed: {e}")))
}

/// Read an input image: raw tensor blob, or PNG mapped to [-1, 1].
fn read_image(path: &Path) -> Result<Tensor> {
    if path.extension().and_then(|e| e.to_str()) == Some("png") {
        let img = image::open(path)
            .map_err(|e| Error::config(format!("png read failed: {e}")))?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0.0f32; 3 * h * w];
        for (i, px) in img.pixels().enumerate() {
            for c in 0..3 {
                data[c * h * w + i] = px.0[c] as f32 / 127.5 - 1.0;
            }
        }
        Tensor::new(vec![3, h, w], data)
    } else {
        Tensor::load(path)
    }
}

// ---- subcommands -----------------------------------------------------------

fn gen_data(cfg: PipelineConfig, out: &Path, count: usize, png: bool) -> Result<()> {
    fs::create_dir_all(out).map_err(io_err)?;
    let p = Pipeline::new(cfg.clone())?;
    let mut rng = Rng::new(cfg.seed).stream("gen-data");
    let batch = synth_pair(&p, &mut rng, count)?;
    for (i, s) in batch.samples.iter().enumerate() {
        s.x.save(&out.join(format!("{i:04}_x.blob")))?;
        s.x_e.save(&out.join(format!("{i:04}_xe.blob")))?;
        s.w.save(&out.join(format!("{i:04}_w.blob")))?;
        s.d.save(&out.join(format!("{i:04}_d.blob")))?;
        if png {
            write_png(&out.join(format!("{i:04}_x.png")), &s.x)?;
            write_png(&out.join(format!("{i:04}_xe.png")), &s.x_e)?;
        }
    }
    fs::write(out.join("config.txt"), cfg.to_text()).map_err(io_err)?;
    println!("wrote {count} pairs to {}", out.display());
    Ok(())
}

fn train_cmd(cfg: PipelineConfig, out: &Path, steps: Option<usize>, log_every: usize) -> Result<()> {
    fs::create_dir_all(out).map_err(io_err)?;
    let steps = steps.unwrap_or(cfg.steps);
    let mut p = Pipeline::new(cfg.clone())?;
    let mut log = String::new();
    let records = train(&mut p, steps, log_every, |r| {
        println!("{}", r.line());
    })?;
    for r in &records {
        log.push_str(&r.line());
        log.push('\n');
    }
    fs::write(out.join("train.log"), log).map_err(io_err)?;
    fs::write(out.join("config.txt"), cfg.to_text()).map_err(io_err)?;
    p.save(&out.join("model.ckpt"))?;
    println!("saved {}", out.join("model.ckpt").display());
    Ok(())
}

fn invert_cmd(model: &Path, input: &Path, out: &Path) -> Result<()> {
    let p = Pipeline::load(model)?;
    let x = read_image(input)?;
    let r = p.invert(&x)?;
    write_outputs(out, &r.image, &r.w_prime)
}

fn edit_cmd(model: &Path, input: &Path, direction: &Path, scale: f32, out: &Path) -> Result<()> {
    let p = Pipeline::load(model)?;
    let x = read_image(input)?;
    let d = EditDirection::new(Tensor::load(direction)?)?;
    let r = p.edit(&x, &d, scale)?;
    write_outputs(out, &r.image, &r.w_prime)
}

fn write_outputs(out: &Path, image: &Tensor, w: &Tensor) -> Result<()> {
    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(io_err)?;
        }
    }
    image.save(&out.with_extension("blob"))?;
    write_png(&out.with_extension("png"), image)?;
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    let wpath = out.with_file_name(format!("{stem}_w.blob"));
    w.save(&wpath)?;
    println!("wrote {}", out.with_extension("png").display());
    Ok(())
}

fn eval_cmd(model: &Path, data: &Path, out: &Path, against_a: bool) -> Result<()> {
    let p = Pipeline::load(model)?;
    // always read blobs: PNG quantization would pollute L2
    let mut xs = Vec::new();
    let mut i = 0usize;
    loop {
        let path = data.join(format!("{i:04}_x.blob"));
        if !path.exists() {
            break;
        }
        xs.push(Tensor::load(&path)?);
        i += 1;
    }
    if xs.is_empty() {
        return Err(Error::config(format!(
            "no NNNN_x.blob files under {}",
            data.display()
        )));
    }

    let mut l2_sum = 0.0;
    let mut ssim_sum = 0.0;
    let mut perc_sum = 0.0;
    let mut recon = Vec::with_capacity(xs.len());
    let mut ws = Vec::with_capacity(xs.len());
    for x in &xs {
        let r = p.invert(x)?;
        l2_sum += l2(x, &r.image)?;
        ssim_sum += ms_ssim(x, &r.image)?;
        let fa = p.features.feature_vec(x)?;
        let fb = p.features.feature_vec(&r.image)?;
        perc_sum += fa
            .iter()
            .zip(&fb)
            .map(|(&a, &b)| ((a - b) as f64).powi(2))
            .sum::<f64>()
            / fa.len() as f64;
        recon.push(r.image);
        ws.push(r.w_prime);
    }
    let n = xs.len() as f64;
    let feats = |imgs: &[Tensor]| -> Result<Vec<Vec<f32>>> {
        imgs.iter().map(|x| p.features.feature_vec(x)).collect()
    };
    let fd_proxy = frechet_distance(
        &FeatureStats::from_features(&feats(&xs)?)?,
        &FeatureStats::from_features(&feats(&recon)?)?,
    )?;

    // editing quality under the model's first bank direction, splitting
    // by the synthetic attribute sign
    let d_attr = p.directions[0].clone();
    let (a_idx, b_idx) = split_by_attribute(&ws, &d_attr.d);
    let set_a: Vec<Tensor> = a_idx.iter().map(|&i| xs[i].clone()).collect();
    let set_b: Vec<Tensor> = b_idx.iter().map(|&i| xs[i].clone()).collect();
    let eq = if set_b.is_empty() || (against_a && set_a.is_empty()) {
        f64::NAN
    } else {
        editing_quality(&p, &set_a, &set_b, &d_attr, 1.0, against_a)?
    };

    let cost = count_params_macs(&p.cfg)?;
    let mut table = ReportTable::new(
        "inversion / editing / cost",
        &[
            "L2",
            "LPIPS-proxy",
            "MS-SSIM",
            "FID-proxy",
            "EQ-FD",
            "params",
            "GMACs",
        ],
    );
    table.row(&[
        format!("{:.6}", l2_sum / n),
        format!("{:.6}", perc_sum / n),
        format!("{:.6}", ssim_sum / n),
        format!("{fd_proxy:.6}"),
        format!("{eq:.6}"),
        format!("{}", cost.param_count),
        format!("{:.6}", cost.gmacs()),
    ]);
    write_report(out, &table)
}

fn bench_cmd(cfg: PipelineConfig, out: &Path, trials: usize) -> Result<()> {
    let mut cost = count_params_macs(&cfg)?;
    let p = Pipeline::new(cfg.clone())?;
    let mut rng = Rng::new(cfg.seed).stream("bench");
    let (x, _) = p.sample_image(&mut rng)?;
    cost.latency_ms = median_latency_ms(5, trials.max(30), || {
        let r = p.invert(&x).unwrap();
        std::hint::black_box(r.image.data()[0]);
    });
    let mut table = ReportTable::new(
        "cost report",
        &["params", "GMACs", "invert-median-ms"],
    );
    table.row(&[
        format!("{}", cost.param_count),
        format!("{:.6}", cost.gmacs()),
        format!("{:.3}", cost.latency_ms),
    ]);

    let mut scaling = ReportTable::new(
        "scan scaling (D_ch=32, N=16)",
        &["L", "median-ms", "ratio-vs-quarter"],
    );
    let ls = [256usize, 1024, 4096];
    let mut prev: Option<f64> = None;
    for &l in &ls {
        let t = scan_latency_ms(l, 32, 16, 5, trials.max(30));
        let ratio = prev.map(|p| format!("{:.2}", t / p)).unwrap_or_else(|| "-".into());
        scaling.row(&[format!("{l}"), format!("{t:.3}"), ratio]);
        prev = Some(t);
    }

    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(io_err)?;
        }
    }
    let txt = format!("{}\n{}", table.to_text(), scaling.to_text());
    let csv = format!("{}\n{}", table.to_csv(), scaling.to_csv());
    fs::write(out.with_extension("txt"), &txt).map_err(io_err)?;
    fs::write(out.with_extension("csv"), &csv).map_err(io_err)?;
    print!("{txt}");
    Ok(())
}

fn ablate_cmd(cfg: PipelineConfig, out: &Path, steps: usize, pairs: usize) -> Result<()> {
    let variants: [(&str, fn(&mut PipelineConfig)); 5] = [
        ("full", |_| {}),
        ("no-fuser", |c| c.disable_fuser = true),
        ("no-ss2d", |c| c.disable_ss2d = true),
        ("no-edit-loss", |c| c.disable_loss_edit = true),
        ("vit-blocks", |c| c.vit_blocks = true),
    ];
    // one fixed evaluation set shared by every variant
    let eval_pairs = {
        let p = Pipeline::new(cfg.clone())?;
        let mut rng = Rng::new(cfg.seed).stream("ablate-eval");
        synth_pair(&p, &mut rng, pairs)?
    };
    let mut table = ReportTable::new(
        "ablations (shared budget)",
        &["variant", "train-MSE", "MS-SSIM", "final-total-loss"],
    );
    for (name, tweak) in variants {
        let mut vc = cfg.clone();
        tweak(&mut vc);
        let mut p = Pipeline::new(vc)?;
        let records = train(&mut p, steps, 0, |_| {})?;
        let final_loss = records.last().map(|r| r.total).unwrap_or(f32::NAN);
        let mut mse = 0.0;
        let mut ssim = 0.0;
        for s in &eval_pairs.samples {
            let r = p.invert(&s.x)?;
            mse += l2(&s.x, &r.image)?;
            ssim += ms_ssim(&s.x, &r.image)?;
        }
        let n = eval_pairs.samples.len() as f64;
        table.row(&[
            name.to_string(),
            format!("{:.6}", mse / n),
            format!("{:.6}", ssim / n),
            format!("{final_loss:.6}"),
        ]);
        println!("{name}: MSE {:.6}", mse / n);
    }
    write_report(out, &table)
}

fn write_report(out: &Path, table: &ReportTable) -> Result<()> {
    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(io_err)?;
        }
    }
    fs::write(out.with_extension("csv"), table.to_csv()).map_err(io_err)?;
    fs::write(out.with_extension("txt"), table.to_text()).map_err(io_err)?;
    print!("{}", table.to_text());
    Ok(())
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::GenData { cfg, out, count, png } => gen_data(cfg.build()?, &out, count, png),
        Cmd::Train { cfg, out, steps, log_every } => train_cmd(cfg.build()?, &out, steps, log_every),
        Cmd::Invert { model, input, out } => invert_cmd(&model, &input, &out),
        Cmd::Edit { model, input, direction, scale, out } => {
            edit_cmd(&model, &input, &direction, scale, &out)
        }
        Cmd::Eval { model, data, out, against_a } => eval_cmd(&model, &data, &out, against_a),
        Cmd::Bench { cfg, out, trials } => bench_cmd(cfg.build()?, &out, trials),
        Cmd::Ablate { cfg, out, steps, pairs } => ablate_cmd(cfg.build()?, &out, steps, pairs),
    }
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
