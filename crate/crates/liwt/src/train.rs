//! L1-loss training with Adam, a step-decay learning rate, periodic
//! checkpoints, and plain-text run records.
//!
//! Determinism contract: with a fixed seed and single-threaded kernels,
//! two runs produce byte-identical loss histories and checkpoints, and a
//! resumed run continues exactly as the uninterrupted one. Each epoch
//! draws its data from its own RNG stream, so epoch e sees the same
//! samples no matter how training was segmented.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError, OptState};
use crate::config::Config;
use crate::data::{self, DataError, ImageSet, TrainItem};
use crate::model::{LiwtModel, ModelError};
use crate::tensor::{Scalar, Tensor};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("loss became non-finite at epoch {epoch} step {step}; last finite loss {last:?}")]
    NonFinite {
        epoch: usize,
        step: usize,
        last: Option<f64>,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Adam with bias correction. Moments live outside the parameter tensors
/// and are matched to them by position, so the parameter enumeration
/// order is part of the checkpoint contract.
pub struct Adam<T: Scalar> {
    pub step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new() -> Self {
        Adam {
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn from_state(s: OptState<T>) -> Self {
        Adam {
            step: s.step,
            first: s.first,
            second: s.second,
        }
    }

    pub fn state(&self) -> OptState<T> {
        OptState {
            step: self.step,
            first: self.first.clone(),
            second: self.second.clone(),
        }
    }

    /// One update over a parameter list. Tensors are replaced, not
    /// mutated, so values already captured by a graph stay intact. A
    /// parameter without a gradient is treated as having gradient zero.
    pub fn update(&mut self, params: &mut [(String, &mut Tensor<T>)], lr: f64) {
        if self.first.is_empty() {
            self.first = params.iter().map(|(_, t)| vec![T::ZERO; t.len()]).collect();
            self.second = self.first.clone();
        }
        assert_eq!(
            self.first.len(),
            params.len(),
            "optimizer state tracks {} tensors, model has {}",
            self.first.len(),
            params.len()
        );
        self.step += 1;
        let t = self.step as i32;
        let corr1 = 1.0 - BETA1.powi(t);
        let corr2 = 1.0 - BETA2.powi(t);
        for (k, (_, slot)) in params.iter_mut().enumerate() {
            let grad = slot.grad();
            let old = slot.data();
            let mut next = Vec::with_capacity(old.len());
            for i in 0..old.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[i].to_f64());
                let m = BETA1 * self.first[k][i].to_f64() + (1.0 - BETA1) * g;
                let v = BETA2 * self.second[k][i].to_f64() + (1.0 - BETA2) * g * g;
                self.first[k][i] = T::from_f64(m);
                self.second[k][i] = T::from_f64(v);
                let step = lr * (m / corr1) / ((v / corr2).sqrt() + EPS);
                next.push(T::from_f64(old[i].to_f64() - step));
            }
            let shape = slot.shape().to_vec();
            **slot = Tensor::param(&shape, next);
        }
    }
}

impl<T: Scalar> Default for Adam<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Learning rate at an epoch: the initial rate halved (by the configured
/// factor) every `lr_decay_every` epochs.
pub fn lr_at(cfg: &Config, epoch: usize) -> f64 {
    let t = &cfg.train;
    t.lr_init * t.lr_decay_factor.powi((epoch / t.lr_decay_every) as i32)
}

/// One optimization step over a batch: a single L1 loss over every
/// sampled pixel of every item, one backward pass, one Adam update.
pub fn train_step<T: Scalar>(
    model: &mut LiwtModel<T>,
    batch: &[TrainItem<T>],
    opt: &mut Adam<T>,
    lr: f64,
) -> Result<f64, ModelError> {
    let mut preds = Vec::with_capacity(batch.len());
    let mut gts: Vec<&Tensor<T>> = Vec::with_capacity(batch.len());
    for item in batch {
        preds.push(model.forward(&item.lr, &item.queries, item.cell_scaled)?);
        gts.push(&item.gt);
    }
    let pred_refs: Vec<&Tensor<T>> = preds.iter().collect();
    let loss = Tensor::concat(&pred_refs, 0).l1(&Tensor::concat(&gts, 0));
    let value = loss.item().to_f64();

    for (_, p) in model.params_mut() {
        p.zero_grad();
    }
    loss.backward();
    opt.update(&mut model.params_mut(), lr);
    Ok(value)
}

pub struct FitReport {
    pub loss_history: Vec<f64>,
    pub checkpoints: Vec<PathBuf>,
    pub final_checkpoint: PathBuf,
}

fn write_file(path: &Path, text: &str) -> Result<(), TrainError> {
    std::fs::write(path, text).map_err(|source| TrainError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn append_line(path: &Path, line: &str) -> Result<(), TrainError> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|source| TrainError::Io {
            path: path.display().to_string(),
            source,
        })?;
    writeln!(f, "{line}").map_err(|source| TrainError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Runs the training loop, writing into `out_dir`:
///
/// * `manifest.txt`: the config echo plus one line per checkpoint,
/// * `loss_history.txt`: tab-separated epoch and mean loss,
/// * `epoch-NNNN.ckpt` at the configured cadence and `final.ckpt` always.
///
/// With `resume`, parameters and optimizer state come from the given
/// checkpoint and the loop continues at the epoch its step count
/// implies; the caller is responsible for passing that checkpoint's own
/// config. Nothing written here contains timestamps or absolute paths,
/// so identically seeded runs are byte-identical.
pub fn fit<T: Scalar>(
    cfg: &Config,
    set: &ImageSet<T>,
    out_dir: &Path,
    resume: Option<Checkpoint<T>>,
) -> Result<FitReport, TrainError> {
    std::fs::create_dir_all(out_dir).map_err(|source| TrainError::Io {
        path: out_dir.display().to_string(),
        source,
    })?;
    let manifest = out_dir.join("manifest.txt");
    let loss_file = out_dir.join("loss_history.txt");
    write_file(&manifest, &cfg.render())?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let mut model = LiwtModel::<T>::new(&cfg.model, &mut rng);
    let mut opt = Adam::new();
    let mut start_epoch = 0usize;
    if let Some(ck) = resume {
        model.load_state(&ck.tensors).map_err(CheckpointError::from)?;
        if let Some(state) = ck.opt {
            start_epoch = (state.step / cfg.train.steps_per_epoch as u64) as usize;
            opt = Adam::from_state(state);
        }
    }

    let save = |model: &mut LiwtModel<T>, opt: &Adam<T>, name: &str| -> Result<PathBuf, TrainError> {
        let path = out_dir.join(name);
        let ck = Checkpoint {
            config: cfg.clone(),
            tensors: model.state(),
            // before the first step the moments do not exist yet
            opt: (opt.step > 0).then(|| opt.state()),
        };
        ck.save(&path)?;
        // a comment so the manifest stays loadable as a config
        append_line(&manifest, &format!("# checkpoint {name}"))?;
        Ok(path)
    };

    let mut report = FitReport {
        loss_history: Vec::new(),
        checkpoints: Vec::new(),
        final_checkpoint: PathBuf::new(),
    };
    let mut last_finite = None;
    for epoch in start_epoch..cfg.train.epochs {
        // stream 0 belongs to parameter init; epochs use their own streams
        let mut epoch_rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        epoch_rng.set_stream(epoch as u64 + 1);
        let lr = lr_at(cfg, epoch);
        let mut sum = 0.0;
        for step in 0..cfg.train.steps_per_epoch {
            let batch = data::make_batch(set, &cfg.data, epoch, cfg.train.epochs, &mut epoch_rng)?;
            let loss = train_step(&mut model, &batch, &mut opt, lr)?;
            if !loss.is_finite() {
                return Err(TrainError::NonFinite {
                    epoch,
                    step,
                    last: last_finite,
                });
            }
            last_finite = Some(loss);
            sum += loss;
        }
        let mean = sum / cfg.train.steps_per_epoch as f64;
        report.loss_history.push(mean);
        append_line(&loss_file, &format!("{epoch}\t{mean}"))?;

        let k = cfg.train.checkpoint_every;
        if k > 0 && (epoch + 1) % k == 0 {
            report
                .checkpoints
                .push(save(&mut model, &opt, &format!("epoch-{:04}.ckpt", epoch + 1))?);
        }
    }
    report.final_checkpoint = save(&mut model, &opt, "final.ckpt")?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use tempfile::TempDir;

    fn toy_param(v: f64) -> Tensor<f64> {
        Tensor::param(&[1], vec![v])
    }

    fn small_config(dir: &Path) -> Config {
        let mut cfg = Config::default();
        cfg.model = ModelConfig {
            feature_width: 8,
            encoder_blocks: 1,
            werb_count: 1,
            attention_heads: 2,
            encoding_depth: 4,
        };
        cfg.data.image_dir = dir.display().to_string();
        cfg.data.patch = 8;
        cfg.data.batch = 2;
        cfg.data.fixed_scale = Some(2.0);
        cfg.train.epochs = 2;
        cfg.train.steps_per_epoch = 2;
        cfg.train.checkpoint_every = 1;
        cfg.train.seed = 5;
        cfg
    }

    fn image_dir() -> TempDir {
        let dir = TempDir::new().unwrap();
        let img = image::RgbImage::from_fn(24, 24, |x, y| {
            image::Rgb([(x * 10) as u8, (y * 10) as u8, ((x + y) * 5) as u8])
        });
        img.save(dir.path().join("train.png")).unwrap();
        dir
    }

    fn load_set(dir: &TempDir, cfg: &Config) -> ImageSet<f32> {
        data::load_images(dir.path(), data::min_image_side(&cfg.data)).unwrap()
    }

    #[test]
    fn lr_schedule_matches_the_decay_rule() {
        let cfg = Config::default();
        assert_eq!(lr_at(&cfg, 0), 1e-4);
        assert_eq!(lr_at(&cfg, 199), 1e-4);
        assert_eq!(lr_at(&cfg, 200), 5e-5);
        assert_eq!(lr_at(&cfg, 999), 1e-4 * 0.5f64.powi(4));
    }

    #[test]
    fn first_adam_step_has_learning_rate_magnitude() {
        let mut x = toy_param(3.0);
        let loss = x.mul(&x).sum_all();
        loss.backward();
        let mut opt = Adam::<f64>::new();
        let lr = 1e-2;
        opt.update(&mut [("x".into(), &mut x)], lr);
        // bias-corrected first step is lr * g / (|g| + eps) = lr * sign(g)
        let moved = 3.0 - x.data()[0];
        assert!((moved - lr).abs() < 1e-6, "step {moved}");
    }

    #[test]
    fn zero_gradient_leaves_parameters_untouched() {
        let mut x = toy_param(1.25);
        // no backward pass ran, so the parameter has no gradient
        let before = x.data().to_vec();
        let mut opt = Adam::<f64>::new();
        opt.update(&mut [("x".into(), &mut x)], 0.1);
        assert_eq!(x.data(), &before[..]);
    }

    #[test]
    fn adam_solves_a_quadratic_within_200_steps() {
        let target = 2.5;
        let mut x = toy_param(0.0);
        let mut opt = Adam::<f64>::new();
        for _ in 0..200 {
            x.zero_grad();
            let diff = x.sub(&Tensor::from_vec(&[1], vec![target]));
            diff.mul(&diff).sum_all().backward();
            opt.update(&mut [("x".into(), &mut x)], 0.1);
        }
        assert!((x.data()[0] - target).abs() < 0.01, "ended at {}", x.data()[0]);
    }

    #[test]
    fn perfect_prediction_gives_zero_loss_and_no_update() {
        let dir = image_dir();
        let cfg = small_config(dir.path());
        let set = load_set(&dir, &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut model = LiwtModel::<f32>::new(&cfg.model, &mut rng);
        let mut item = data::make_item(&set, &cfg.data, 0, 2, &mut rng).unwrap();
        // ground truth manufactured to equal the model's own prediction
        let out = model.forward(&item.lr, &item.queries, item.cell_scaled).unwrap();
        item.gt = out.detach();
        let before: Vec<Vec<u32>> = model
            .params_mut()
            .iter()
            .map(|(_, t)| t.data().iter().map(|v| v.to_bits()).collect())
            .collect();
        let mut opt = Adam::new();
        let loss = train_step(&mut model, &[item], &mut opt, 1e-3).unwrap();
        assert_eq!(loss, 0.0);
        let after: Vec<Vec<u32>> = model
            .params_mut()
            .iter()
            .map(|(_, t)| t.data().iter().map(|v| v.to_bits()).collect())
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn training_reduces_loss_on_a_fixed_batch() {
        let dir = image_dir();
        let cfg = small_config(dir.path());
        let set = load_set(&dir, &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut model = LiwtModel::<f32>::new(&cfg.model, &mut rng);
        let batch = data::make_batch(&set, &cfg.data, 0, 2, &mut rng).unwrap();
        let mut opt = Adam::new();
        let first = train_step(&mut model, &batch, &mut opt, 2e-3).unwrap();
        let mut last = first;
        for _ in 0..29 {
            last = train_step(&mut model, &batch, &mut opt, 2e-3).unwrap();
        }
        assert!(last < first, "loss went {first} -> {last}");
    }

    #[test]
    fn non_finite_loss_aborts_the_run() {
        let dir = image_dir();
        let cfg = small_config(dir.path());
        let set = load_set(&dir, &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut model = LiwtModel::<f32>::new(&cfg.model, &mut rng);
        // an infinite output bias makes every prediction, and so the
        // loss, infinite; poisoning an early layer would not, because
        // the relus in the decoder flush NaN to zero
        {
            let mut params = model.params_mut();
            let (_, slot) = params.last_mut().unwrap();
            let shape = slot.shape().to_vec();
            **slot = Tensor::param(&shape, vec![f32::INFINITY; slot.len()]);
        }
        let batch = data::make_batch(&set, &cfg.data, 0, 2, &mut rng).unwrap();
        let mut opt = Adam::new();
        let loss = train_step(&mut model, &batch, &mut opt, 1e-3).unwrap();
        assert!(!loss.is_finite());

        // the same poison arriving through a resume checkpoint must
        // abort the whole run with the non-finite error
        let out = TempDir::new().unwrap();
        let mut zero = cfg.clone();
        zero.train.epochs = 0;
        let seed_report = fit(&zero, &set, out.path(), None).unwrap();
        let mut ck = Checkpoint::<f32>::load(&seed_report.final_checkpoint).unwrap();
        for (name, t) in ck.tensors.iter_mut() {
            if name == "decoder.fc4.b" {
                *t = Tensor::from_vec(&t.shape().to_vec(), vec![f32::INFINITY; t.len()]);
            }
        }
        let out2 = TempDir::new().unwrap();
        match fit(&cfg, &set, out2.path(), Some(ck)) {
            Err(TrainError::NonFinite { epoch: 0, step: 0, .. }) => {}
            other => panic!("expected a non-finite abort, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn fit_writes_history_manifest_and_checkpoints() {
        let dir = image_dir();
        let cfg = small_config(dir.path());
        let set = load_set(&dir, &cfg);
        let out = TempDir::new().unwrap();
        let report = fit(&cfg, &set, out.path(), None).unwrap();
        assert_eq!(report.loss_history.len(), 2);
        assert!(out.path().join("manifest.txt").exists());
        assert!(out.path().join("epoch-0001.ckpt").exists());
        assert!(out.path().join("epoch-0002.ckpt").exists());
        assert!(out.path().join("final.ckpt").exists());
        let history = std::fs::read_to_string(out.path().join("loss_history.txt")).unwrap();
        let lines: Vec<&str> = history.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].starts_with("0\t"));
        assert!(lines[1].starts_with("1\t"));
        let manifest = std::fs::read_to_string(out.path().join("manifest.txt")).unwrap();
        assert!(manifest.contains("# checkpoint final.ckpt"));
        // the manifest doubles as a config and reproduces the model shape
        let parsed = Config::parse(&manifest).unwrap();
        assert_eq!(parsed.model, cfg.model);
    }

    #[test]
    fn zero_epochs_yields_only_the_initial_checkpoint() {
        let dir = image_dir();
        let mut cfg = small_config(dir.path());
        cfg.train.epochs = 0;
        let set = load_set(&dir, &cfg);
        let out = TempDir::new().unwrap();
        let report = fit(&cfg, &set, out.path(), None).unwrap();
        assert!(report.loss_history.is_empty());
        assert!(report.checkpoints.is_empty());
        let ck = Checkpoint::<f32>::load(&report.final_checkpoint).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        let mut fresh = LiwtModel::<f32>::new(&cfg.model, &mut rng);
        for ((name, t), (n2, t2)) in ck.tensors.iter().zip(fresh.state()) {
            assert_eq!(*name, n2);
            assert_eq!(t.data(), t2.data(), "{name} differs from init");
        }
    }

    #[test]
    fn identical_seeds_give_identical_runs() {
        let dir = image_dir();
        let cfg = small_config(dir.path());
        let set = load_set(&dir, &cfg);
        let out1 = TempDir::new().unwrap();
        let out2 = TempDir::new().unwrap();
        fit(&cfg, &set, out1.path(), None).unwrap();
        fit(&cfg, &set, out2.path(), None).unwrap();
        for name in ["loss_history.txt", "manifest.txt", "final.ckpt"] {
            let a = std::fs::read(out1.path().join(name)).unwrap();
            let b = std::fs::read(out2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between identical runs");
        }
    }

    #[test]
    fn resume_continues_bit_exactly() {
        let dir = image_dir();
        let mut cfg = small_config(dir.path());
        cfg.train.epochs = 4;
        cfg.train.checkpoint_every = 2;
        let set = load_set(&dir, &cfg);

        let full = TempDir::new().unwrap();
        let report = fit(&cfg, &set, full.path(), None).unwrap();
        assert_eq!(report.loss_history.len(), 4);

        // restart from the midpoint checkpoint and run the back half
        let resumed = TempDir::new().unwrap();
        let mid = Checkpoint::<f32>::load(&full.path().join("epoch-0002.ckpt")).unwrap();
        let report2 = fit(&cfg, &set, resumed.path(), Some(mid)).unwrap();
        assert_eq!(report2.loss_history.len(), 2);
        assert_eq!(&report.loss_history[2..], &report2.loss_history[..]);

        let a = std::fs::read(full.path().join("final.ckpt")).unwrap();
        let b = std::fs::read(resumed.path().join("final.ckpt")).unwrap();
        assert_eq!(a, b, "resumed final checkpoint differs");
    }
}
