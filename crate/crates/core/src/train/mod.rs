//! Toy-scale training and the evaluation protocol.

mod augment;
mod bicubic;
mod ensemble;
mod metrics;
mod optim;

pub use augment::{augment, dihedral, inverse_code};
pub use bicubic::{bicubic_downscale, bicubic_weights, cubic};
pub use ensemble::{ensemble_candidates, self_ensemble};
pub use metrics::{
    gaussian_window, psnr_from_mse, psnr_y, rgb_to_y, shave, ssim_y, PSNR_IDENTICAL, SSIM_K1, SSIM_K2,
    SSIM_SIGMA, SSIM_WINDOW,
};
pub use optim::{lr_at, Adam, TrainConfig};

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{ActError, Result};
use crate::image_io::load_rgb;
use crate::model::{crop, ActModel};
use crate::tensor::{backward, Tensor, Var};

/// Mean absolute error; the subgradient at exact ties is 0.
pub fn l1_loss(pred: &Var, target: &Tensor) -> Result<Var> {
    pred.l1_to(target)
}

/// A low-resolution input and its high-resolution target.
#[derive(Clone, Debug)]
pub struct TrainingPair {
    pub lr: Tensor,
    pub hr: Tensor,
}

impl TrainingPair {
    /// Builds the pair by bicubic degradation of `hr`.
    pub fn from_hr(hr: Tensor, scale: usize) -> Result<Self> {
        Ok(TrainingPair { lr: bicubic_downscale(&hr, scale)?, hr })
    }
}

/// Mean L1 over `batch` and its gradient for every parameter, in registration
/// order. Samples run in parallel; their gradients are summed in batch order
/// so the result does not depend on scheduling.
pub fn batch_gradients(model: &ActModel, batch: &[TrainingPair]) -> Result<(f64, Vec<Vec<f64>>)> {
    if batch.is_empty() {
        return Err(ActError::Training("empty batch".into()));
    }
    let per_sample: Vec<(f64, Vec<Vec<f64>>)> = batch
        .par_iter()
        .map(|pair| {
            let p = model.params().bind(true);
            let pred = model.forward_var(&p, &Var::constant(pair.lr.clone()))?;
            let loss = l1_loss(&pred, &pair.hr)?;
            let mut grads = backward(&loss)?.into_params();
            let all = model
                .params()
                .iter()
                .enumerate()
                .map(|(i, prm)| grads.remove(&i).unwrap_or_else(|| vec![0.0; prm.tensor.numel()]))
                .collect();
            Ok((loss.data()[0], all))
        })
        .collect::<Result<_>>()?;
    let inv = 1.0 / batch.len() as f64;
    let mut iter = per_sample.into_iter();
    let (mut loss, mut total) = iter.next().expect("non-empty batch");
    for (l, g) in iter {
        loss += l;
        for (acc, gi) in total.iter_mut().zip(g) {
            acc.iter_mut().zip(gi).for_each(|(a, b)| *a += b);
        }
    }
    total.iter_mut().flatten().for_each(|v| *v *= inv);
    let loss = loss * inv;
    if !loss.is_finite() {
        return Err(ActError::Training(format!("non-finite loss {loss}")));
    }
    Ok((loss, total))
}

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    /// 1-based step index.
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
}

pub const LOG_HEADER: &str = "step,lr,loss,psnr,ssim";

impl StepRecord {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(String::new, |v| format!("{v:.17e}"));
        format!("{},{:.17e},{:.17e},{},{}", self.step, self.lr, self.loss, opt(self.psnr), opt(self.ssim))
    }
}

/// Optimizer state plus the model being trained.
pub struct Trainer<'a> {
    pub model: &'a mut ActModel,
    pub adam: Adam,
    pub cfg: TrainConfig,
    step: u64,
}

impl<'a> Trainer<'a> {
    pub fn new(model: &'a mut ActModel, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let adam = Adam::from_config(&cfg, model.params());
        Ok(Trainer { model, adam, cfg, step: 0 })
    }

    /// One optimizer step on `batch`; returns the loss before the update.
    pub fn step(&mut self, batch: &[TrainingPair]) -> Result<StepRecord> {
        let lr = lr_at(self.step, &self.cfg);
        let (loss, grads) = batch_gradients(self.model, batch)?;
        self.adam.step(self.model.params_mut(), &grads, lr)?;
        self.step += 1;
        Ok(StepRecord { step: self.step, lr, loss, psnr: None, ssim: None })
    }
}

fn write_row(log: &mut Option<&mut dyn Write>, record: &StepRecord) -> Result<()> {
    if let Some(w) = log.as_mut() {
        writeln!(w, "{}", record.csv_row()).map_err(|e| ActError::io("<metrics log>", e))?;
    }
    Ok(())
}

/// Trains on a fixed set of pairs, using all of them as the batch at every
/// step. Rows go to `log` (with header) as they are produced.
pub fn train_on_pairs(
    model: &mut ActModel,
    pairs: &[TrainingPair],
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<Vec<StepRecord>> {
    if pairs.is_empty() {
        return Err(ActError::Training("no training pairs".into()));
    }
    if let Some(w) = log.as_mut() {
        writeln!(w, "{LOG_HEADER}").map_err(|e| ActError::io("<metrics log>", e))?;
    }
    let mut trainer = Trainer::new(model, cfg.clone())?;
    let mut records = Vec::with_capacity(cfg.steps as usize);
    for _ in 0..cfg.steps {
        let record = trainer.step(pairs)?;
        write_row(&mut log, &record)?;
        records.push(record);
    }
    Ok(records)
}

/// PNG files of a corpus directory, sorted by file name.
pub fn list_corpus(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| ActError::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| ActError::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            files.push(path);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(ActError::Training(format!("no PNG images in {}", dir.display())));
    }
    Ok(files)
}

/// Deterministic 90/10 split by the SHA-256 of each file name: a file is
/// held out when the first digest byte is below 10% of 256. When that would
/// leave no training images, or the corpus has a single image, nothing is
/// held out.
pub fn split_corpus(files: &[PathBuf]) -> (Vec<PathBuf>, Vec<PathBuf>) {
    let (held, train): (Vec<_>, Vec<_>) = files.iter().cloned().partition(|p| {
        let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        Sha256::digest(name.as_bytes())[0] < 26
    });
    if train.is_empty() || files.len() < 2 {
        (files.to_vec(), Vec::new())
    } else {
        (train, held)
    }
}

/// Crops `hr` to multiples of `scale`, degrades, super-resolves and scores
/// with a border of `scale` pixels removed.
pub fn evaluate_image<F>(sr: F, hr: &Tensor, scale: usize) -> Result<(f64, f64)>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let (h, w) = (hr.shape()[1] / scale * scale, hr.shape()[2] / scale * scale);
    let hr = crop(hr, h, w);
    let lr = bicubic_downscale(&hr, scale)?;
    let out = sr(&lr)?;
    let (a, b) = if scale > 0 && 2 * scale < h.min(w) {
        (shave(&out, scale)?, shave(&hr, scale)?)
    } else {
        (out, hr)
    };
    Ok((psnr_y(&a, &b)?, ssim_y(&a, &b)?))
}

/// Result of [`train_toy`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub records: Vec<StepRecord>,
    pub train_files: Vec<PathBuf>,
    pub held_out: Vec<PathBuf>,
}

/// Trains on random augmented crops of a PNG corpus. Batches are drawn from
/// a ChaCha8 stream seeded with `cfg.seed`; every `eval_every` steps (and at
/// the last step) the held-out images are scored.
pub fn train_toy(
    model: &mut ActModel,
    corpus: &Path,
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let scale = model.config().output_scale();
    if cfg.patch_size % scale != 0 {
        return Err(ActError::Config(format!(
            "patch size {} not divisible by scale {scale}",
            cfg.patch_size
        )));
    }
    let files = list_corpus(corpus)?;
    let (train_files, held_out) = split_corpus(&files);
    let images = train_files.iter().map(|p| load_rgb(p)).collect::<Result<Vec<_>>>()?;
    let held = held_out.iter().map(|p| load_rgb(p)).collect::<Result<Vec<_>>>()?;
    let ps = cfg.patch_size;
    for (img, path) in images.iter().zip(&train_files) {
        if img.shape()[1] < ps || img.shape()[2] < ps {
            return Err(ActError::Training(format!(
                "{} is smaller than the {ps}x{ps} patch",
                path.display()
            )));
        }
    }

    if let Some(w) = log.as_mut() {
        writeln!(w, "{LOG_HEADER}").map_err(|e| ActError::io("<metrics log>", e))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trainer = Trainer::new(model, cfg.clone())?;
    let mut records = Vec::with_capacity(cfg.steps as usize);
    for step in 1..=cfg.steps {
        let batch = (0..cfg.batch_size)
            .map(|_| {
                let img = &images[rng.random_range(0..images.len())];
                let y = rng.random_range(0..=(img.shape()[1] - ps) / scale) * scale;
                let x = rng.random_range(0..=(img.shape()[2] - ps) / scale) * scale;
                let code = if cfg.augment { rng.random_range(0..8u8) } else { 0 };
                let patch = crop_at(img, y, x, ps, ps);
                TrainingPair::from_hr(augment(&patch, code)?, scale)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut record = trainer.step(&batch)?;
        let due = cfg.eval_every > 0 && (step % cfg.eval_every == 0 || step == cfg.steps);
        if due && !held.is_empty() {
            let model = &*trainer.model;
            let scores = held
                .par_iter()
                .map(|hr| evaluate_image(|lr| model.forward(lr), hr, scale))
                .collect::<Result<Vec<_>>>()?;
            let n = scores.len() as f64;
            record.psnr = Some(scores.iter().map(|s| s.0).sum::<f64>() / n);
            record.ssim = Some(scores.iter().map(|s| s.1).sum::<f64>() / n);
        }
        write_row(&mut log, &record)?;
        records.push(record);
    }
    Ok(TrainOutcome { records, train_files, held_out })
}

/// `[c, height, width]` window of a `[c, h, w]` tensor starting at `(y, x)`.
pub fn crop_at(img: &Tensor, y: usize, x: usize, height: usize, width: usize) -> Tensor {
    let [c, h, w] = *img.shape() else { panic!("crop_at expects [c, h, w]") };
    assert!(y + height <= h && x + width <= w, "crop window out of bounds");
    let d = img.data();
    let mut out = Vec::with_capacity(c * height * width);
    for ch in 0..c {
        for row in y..y + height {
            let start = (ch * h + row) * w + x;
            out.extend_from_slice(&d[start..start + width]);
        }
    }
    Tensor::new(vec![c, height, width], out).expect("non-empty crop")
}
