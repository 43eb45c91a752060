//! Command-line front end: training, super-resolving, evaluating,
//! wavelet band inspection, and gradient checking.
//!
//! Exit codes: 0 success, 1 internal failure, 2 usage or config error,
//! 3 unreadable or incompatible checkpoint.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use liwt::checkpoint::{Checkpoint, CheckpointError};
use liwt::config::{Config, ConfigError, ModelConfig};
use liwt::data::{self, DataError};
use liwt::model::{finite_difference_check, LiwtModel, ModelError};
use liwt::train::TrainError;
use liwt::{coords, metrics, nn, tensor, train, wavelet};
use liwt::Tensor;

const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "liwt", version, about = "Arbitrary-scale image super-resolution")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and write checkpoints into a run directory
    Train {
        /// Config file; omit when resuming, the checkpoint carries its own
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint to continue from
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Override the configured epoch count
        #[arg(long)]
        epochs: Option<usize>,
        /// Override the configured seed
        #[arg(long)]
        seed: Option<u64>,
        /// Run directory for checkpoints, manifest, and loss history
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Worker threads; 1 forces the serial kernels
        #[arg(long, default_value_t = 0)]
        threads: usize,
    },
    /// Super-resolve one image with a trained checkpoint
    Sr {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Magnification: uniform like "2.2" or height x width like "2x3"
        #[arg(long)]
        scale: String,
        /// Input PNG
        image: PathBuf,
        /// Output PNG; defaults to the input name with an -sr suffix
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        threads: usize,
    },
    /// Score a checkpoint against ground-truth images, next to the
    /// bilinear and bicubic baselines
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory of ground-truth PNGs; low-res inputs are synthesized
        /// from them bicubically
        #[arg(long)]
        hr_dir: PathBuf,
        /// Comma-separated magnifications
        #[arg(long, default_value = "2,3,4")]
        scales: String,
        /// Also write the report as tab-separated rows
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        threads: usize,
    },
    /// Decompose an image into its four wavelet bands: one normalized
    /// grayscale PNG per band plus an energy-share table
    DwtInspect {
        image: PathBuf,
        /// Directory for the band images
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Compare analytic gradients against finite differences on a tiny
    /// model; exits nonzero when any parameter group drifts
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

enum Failure {
    Usage(String),
    Checkpoint(String),
    Internal(String),
}

impl Failure {
    fn exit(&self) -> ExitCode {
        match self {
            Failure::Internal(_) => ExitCode::from(1),
            Failure::Usage(_) => ExitCode::from(2),
            Failure::Checkpoint(_) => ExitCode::from(3),
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Checkpoint(m) | Failure::Internal(m) => m,
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        Failure::Checkpoint(e.to_string())
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        Failure::Internal(e.to_string())
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Data(d) => d.into(),
            TrainError::Checkpoint(c) => c.into(),
            other => Failure::Internal(other.to_string()),
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            f.exit()
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.cmd {
        Cmd::Train {
            config,
            resume,
            epochs,
            seed,
            out,
            threads,
        } => cmd_train(config, resume, epochs, seed, &out, threads),
        Cmd::Sr {
            checkpoint,
            scale,
            image,
            out,
            threads,
        } => cmd_sr(&checkpoint, &scale, &image, out, threads),
        Cmd::Eval {
            checkpoint,
            hr_dir,
            scales,
            out,
            threads,
        } => cmd_eval(&checkpoint, &hr_dir, &scales, out, threads),
        Cmd::DwtInspect { image, out } => cmd_dwt_inspect(&image, &out),
        Cmd::GradCheck { seed } => cmd_grad_check(seed),
    }
}

fn apply_threads(n: usize) {
    tensor::set_parallel(n != 1);
    if n > 1 {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().ok();
    }
}

fn cmd_train(
    config: Option<PathBuf>,
    resume: Option<PathBuf>,
    epochs: Option<usize>,
    seed: Option<u64>,
    out: &Path,
    threads: usize,
) -> Result<(), Failure> {
    apply_threads(threads);
    let mut resume_ck = None;
    let mut cfg = match (&config, &resume) {
        (_, Some(path)) => {
            // the checkpoint's own config is authoritative on resume
            let ck = Checkpoint::<f32>::load(path)?;
            let cfg = ck.config.clone();
            resume_ck = Some(ck);
            cfg
        }
        (Some(path), None) => Config::load(path)?,
        (None, None) => {
            return Err(Failure::Usage("either --config or --resume is required".into()))
        }
    };
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    if let Some(s) = seed {
        cfg.train.seed = s;
    }

    let set = data::load_images::<f32>(Path::new(&cfg.data.image_dir), data::min_image_side(&cfg.data))?;
    for reason in &set.skipped {
        eprintln!("skipping {reason}");
    }
    let report = train::fit(&cfg, &set, out, resume_ck)?;
    for (i, loss) in report.loss_history.iter().enumerate() {
        println!("epoch {i}: loss {loss}");
    }
    println!("wrote {}", report.final_checkpoint.display());
    Ok(())
}

fn parse_scale(text: &str) -> Result<(f64, f64), Failure> {
    liwt::config::parse_scale(text).map_err(Failure::from)
}

fn model_from(ck: &Checkpoint<f32>) -> Result<LiwtModel<f32>, Failure> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = LiwtModel::new(&ck.config.model, &mut rng);
    model
        .load_state(&ck.tensors)
        .map_err(|e| Failure::Checkpoint(e.to_string()))?;
    Ok(model)
}

/// Pads an odd extent by reflecting the second-to-last row or column.
fn reflect_pad_even(img: &Tensor<f32>) -> Tensor<f32> {
    let shape = img.shape().to_vec();
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let (ph, pw) = (h + h % 2, w + w % 2);
    if (ph, pw) == (h, w) {
        return img.clone();
    }
    let data = img.data();
    let mut out = Vec::with_capacity(ph * pw * c);
    for i in 0..ph {
        let si = if i < h { i } else { h.saturating_sub(2) };
        for j in 0..pw {
            let sj = if j < w { j } else { w.saturating_sub(2) };
            out.extend_from_slice(&data[(si * w + sj) * c..(si * w + sj + 1) * c]);
        }
    }
    Tensor::from_vec(&[ph, pw, c], out)
}

/// Decodes RGB for a query batch in fixed-size chunks so memory stays
/// bounded at large magnifications.
fn predict(
    model: &LiwtModel<f32>,
    lr: &Tensor<f32>,
    queries: &[(f64, f64)],
    cell_scaled: (f64, f64),
) -> Result<Vec<f32>, Failure> {
    let feats = model.features(lr)?;
    let mut out = Vec::with_capacity(queries.len() * 3);
    tensor::no_grad(|| {
        for chunk in queries.chunks(4096) {
            let rgb = model.query_rgb(&feats, lr, chunk, cell_scaled);
            out.extend_from_slice(rgb.data());
        }
    });
    Ok(out)
}

fn cmd_sr(
    checkpoint: &Path,
    scale: &str,
    image: &Path,
    out: Option<PathBuf>,
    threads: usize,
) -> Result<(), Failure> {
    apply_threads(threads);
    let (s_h, s_w) = parse_scale(scale)?;
    let ck = Checkpoint::<f32>::load(checkpoint)?;
    let model = model_from(&ck)?;
    let img = data::load_png::<f32>(image)?;
    let shape = img.shape().to_vec();
    let (h, w) = (shape[0], shape[1]);

    let padded = reflect_pad_even(&img);
    let (ph, pw) = (padded.shape()[0], padded.shape()[1]);
    if (ph, pw) != (h, w) {
        eprintln!("input {h}x{w} reflect-padded to {ph}x{pw}; output cropped back");
    }
    let (oh, ow, queries) = coords::hr_query_coords(ph, pw, s_h, s_w);
    let rgb = predict(&model, &padded, &queries, coords::cell_scaled(s_h, s_w))?;

    // crop away whatever the padding added
    let th = (s_h * h as f64).floor() as usize;
    let tw = (s_w * w as f64).floor() as usize;
    let mut cropped = Vec::with_capacity(th * tw * 3);
    for i in 0..th {
        cropped.extend_from_slice(&rgb[i * ow * 3..(i * ow + tw) * 3]);
    }
    let _ = oh;
    let result = Tensor::from_vec(&[th, tw, 3], cropped);

    let out_path = out.unwrap_or_else(|| {
        let stem = image.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
        image.with_file_name(format!("{stem}-sr.png"))
    });
    data::save_png(&result, &out_path)?;
    println!("wrote {} ({th}x{tw})", out_path.display());
    Ok(())
}

struct EvalRow {
    scale: f64,
    method: &'static str,
    psnr: f64,
    ssim: f64,
}

fn parse_scales(text: &str) -> Result<Vec<f64>, Failure> {
    text.split(',').map(parse_scale).map(|r| r.map(|(s, _)| s)).collect()
}

fn crop_top_left(t: &Tensor<f32>, h: usize, w: usize) -> Tensor<f32> {
    let shape = t.shape().to_vec();
    let (w0, c) = (shape[1], shape[2]);
    let data = t.data();
    let mut out = Vec::with_capacity(h * w * c);
    for i in 0..h {
        out.extend_from_slice(&data[i * w0 * c..(i * w0 + w) * c]);
    }
    Tensor::from_vec(&[h, w, c], out)
}

fn cmd_eval(
    checkpoint: &Path,
    hr_dir: &Path,
    scales: &str,
    out: Option<PathBuf>,
    threads: usize,
) -> Result<(), Failure> {
    apply_threads(threads);
    let scales = parse_scales(scales)?;
    let ck = Checkpoint::<f32>::load(checkpoint)?;
    let model = model_from(&ck)?;
    let set = data::load_images::<f32>(hr_dir, 1)?;
    for reason in &set.skipped {
        eprintln!("skipping {reason}");
    }

    let mut rows = Vec::new();
    for &s in &scales {
        let border = s.ceil() as usize;
        // psnr, ssim sums for model / bilinear / bicubic
        let mut sums = [[0.0f64; 2]; 3];
        for (img, path) in set.images.iter().zip(&set.paths) {
            let shape = img.shape().to_vec();
            let even_floor = |n: usize| {
                let k = (n as f64 / s).floor() as usize;
                k - k % 2
            };
            let (lr_h, lr_w) = (even_floor(shape[0]), even_floor(shape[1]));
            if lr_h < 2 || lr_w < 2 {
                return Err(Failure::Usage(format!(
                    "{} is too small to evaluate at scale {s}",
                    path.display()
                )));
            }
            let hr_h = (lr_h as f64 * s).floor() as usize;
            let hr_w = (lr_w as f64 * s).floor() as usize;
            if hr_h <= 2 * border + 10 || hr_w <= 2 * border + 10 {
                return Err(Failure::Usage(format!(
                    "{} leaves no room for the similarity window at scale {s}",
                    path.display()
                )));
            }
            let hr = crop_top_left(img, hr_h, hr_w);
            let lr = nn::resample(&hr.detach(), lr_h, lr_w, nn::Resample::Bicubic);

            let space = coords::CoordSpace::new(hr_h, hr_w);
            let mut queries = Vec::with_capacity(hr_h * hr_w);
            for i in 0..hr_h {
                for j in 0..hr_w {
                    queries.push(space.center(i, j));
                }
            }
            let (eff_h, eff_w) = (hr_h as f64 / lr_h as f64, hr_w as f64 / lr_w as f64);
            let pred = predict(&model, &lr, &queries, coords::cell_scaled(eff_h, eff_w))?;
            let outputs = [
                Tensor::from_vec(&[hr_h, hr_w, 3], pred),
                Tensor::from_vec(&[hr_h, hr_w, 3], nn::sample_bilinear_values(&lr, &queries)),
                nn::resample(&lr, hr_h, hr_w, nn::Resample::Bicubic).detach(),
            ];
            for (k, o) in outputs.iter().enumerate() {
                sums[k][0] += metrics::psnr(o, &hr, border);
                sums[k][1] += metrics::ssim(&metrics::crop_border(o, border), &metrics::crop_border(&hr, border));
            }
        }
        let n = set.images.len() as f64;
        for (k, method) in ["model", "bilinear", "bicubic"].into_iter().enumerate() {
            rows.push(EvalRow {
                scale: s,
                method,
                psnr: sums[k][0] / n,
                ssim: sums[k][1] / n,
            });
        }
    }

    println!("{:<8} {:<9} {:>10} {:>9}", "scale", "method", "psnr", "ssim");
    for r in &rows {
        println!(
            "{:<8} {:<9} {:>10.6} {:>9.6}",
            r.scale, r.method, r.psnr, r.ssim
        );
    }
    if let Some(path) = out {
        let mut text = String::from("scale\tmethod\tpsnr\tssim\n");
        for r in &rows {
            text.push_str(&format!("{}\t{}\t{:.6}\t{:.6}\n", r.scale, r.method, r.psnr, r.ssim));
        }
        std::fs::write(&path, text)
            .map_err(|e| Failure::Internal(format!("cannot write {}: {e}", path.display())))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

/// Channel-mean of a band, min-max normalized to an 8-bit grayscale image.
fn band_png(band: &Tensor<f32>, path: &Path) -> Result<(), Failure> {
    let shape = band.shape().to_vec();
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let data = band.data();
    let mean: Vec<f64> = (0..h * w)
        .map(|p| (0..c).map(|k| data[p * c + k] as f64).sum::<f64>() / c as f64)
        .collect();
    let lo = mean.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = mean.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let v = mean[y as usize * w + x as usize];
        let norm = if hi > lo { (v - lo) / (hi - lo) } else { 0.0 };
        image::Luma([(norm * 255.0).round() as u8])
    });
    img.save(path)
        .map_err(|e| Failure::Internal(format!("cannot write {}: {e}", path.display())))
}

fn cmd_dwt_inspect(image_path: &Path, out: &Path) -> Result<(), Failure> {
    let img = data::load_png::<f32>(image_path)?;
    let shape = img.shape().to_vec();
    let padded = reflect_pad_even(&img);
    if padded.shape() != &shape[..] {
        eprintln!(
            "input {}x{} reflect-padded to {}x{} for the transform",
            shape[0],
            shape[1],
            padded.shape()[0],
            padded.shape()[1]
        );
    }
    let bands = wavelet::dwt(&padded);
    std::fs::create_dir_all(out)
        .map_err(|e| Failure::Internal(format!("cannot create {}: {e}", out.display())))?;
    let named = [
        ("ll", &bands.ll),
        ("lh", &bands.lh),
        ("hl", &bands.hl),
        ("hh", &bands.hh),
    ];
    for (name, band) in named {
        band_png(band, &out.join(format!("band-{name}.png")))?;
    }
    let shares = wavelet::energy_shares(&bands);
    println!("{:<6} {:>10}", "band", "share");
    for (i, (name, _)) in named.iter().enumerate() {
        println!("{:<6} {:>10.6}", name, shares[i]);
    }
    println!("{:<6} {:>10.6}", "sum", shares.iter().sum::<f64>());
    Ok(())
}

fn cmd_grad_check(seed: u64) -> Result<(), Failure> {
    // deliberately tiny: wide enough to exercise every head and band,
    // small enough that probing stays well under a minute
    let cfg = ModelConfig {
        feature_width: 8,
        encoder_blocks: 1,
        werb_count: 1,
        attention_heads: 2,
        encoding_depth: 4,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let pixels = (0..8 * 8 * 3).map(|_| rng.random_range(0.0..1.0)).collect();
    let img = Tensor::<f64>::from_vec(&[8, 8, 3], pixels);
    let (_, _, all) = coords::hr_query_coords(8, 8, 2.0, 2.0);
    let queries: Vec<(f64, f64)> = all.into_iter().step_by(31).collect();
    let reports = finite_difference_check(&cfg, &img, &queries, coords::cell_scaled(2.0, 2.0), 2, seed);

    println!("{:<12} {:>6} {:>13}  worst", "group", "probes", "max_rel_err");
    let mut failed = Vec::new();
    for r in &reports {
        println!(
            "{:<12} {:>6} {:>13.3e}  {}",
            r.group, r.probes, r.max_rel_err, r.worst_param
        );
        if !(r.max_rel_err < GRAD_TOLERANCE) {
            failed.push(format!("{} ({})", r.group, r.worst_param));
        }
    }
    if failed.is_empty() {
        println!("all parameter groups within {GRAD_TOLERANCE:e}");
        Ok(())
    } else {
        Err(Failure::Internal(format!(
            "gradient check failed for {}",
            failed.join(", ")
        )))
    }
}
