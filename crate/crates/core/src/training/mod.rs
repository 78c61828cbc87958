//! Losses, optimizer, checkpoints and the training loop.

mod adam;
mod loss;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use adam::{Adam, AdamConfig};
pub use loss::{bce_loss, soft_iou_loss, LossKind, SOFT_IOU_EPS};

use crate::autodiff::Tape;
use crate::checkpoint::{self, NamedTensor};
use crate::data::{crop_or_pad, random_crop, DatasetSplit, Sample};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricsConfig, MetricsReport};
use crate::network::{predict_mask, MpaNet};
use crate::params::{Ctx, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub adam: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Validate every this many epochs (and always after the last one).
    pub eval_every: usize,
    /// Where `best.ckpt`, `last.ckpt` and `epochs.csv` go, if anywhere.
    pub out_dir: Option<PathBuf>,
    pub random_crop: bool,
    pub hflip: bool,
    pub metrics: MetricsConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::SoftIou,
            adam: AdamConfig::default(),
            epochs: 20,
            batch_size: 4,
            seed: 0,
            eval_every: 1,
            out_dir: None,
            random_crop: false,
            hflip: false,
            metrics: MetricsConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.adam.lr >= 0.0 && self.adam.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} is invalid",
                self.adam.lr
            )));
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config(
                "batch size and eval interval must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Model parameters plus the optimizer and bookkeeping state needed to resume.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: Vec<NamedTensor>,
    /// `adam.m.<name>` / `adam.v.<name>` moment tensors.
    pub moments: Vec<NamedTensor>,
    pub adam_step: u64,
    /// Completed epochs.
    pub epoch: usize,
    pub best_val_niou: f32,
}

const META_EPOCH: &str = "meta.epoch";
const META_STEP: &str = "meta.adam_step";
const META_BEST: &str = "meta.best_val_niou";

impl Checkpoint {
    pub fn capture(
        store: &ParamStore<f32>,
        adam: &Adam<f32>,
        epoch: usize,
        best_val_niou: f32,
    ) -> Self {
        let mut moments = Vec::new();
        for (i, slot) in adam.moments.iter().enumerate() {
            if let Some((m, v)) = slot {
                let name = &store.entries()[i].name;
                moments.push((format!("adam.m.{name}"), m.clone()));
                moments.push((format!("adam.v.{name}"), v.clone()));
            }
        }
        Self {
            params: store.to_named(),
            moments,
            adam_step: adam.step,
            epoch,
            best_val_niou,
        }
    }

    pub fn to_tensors(&self) -> Vec<NamedTensor> {
        let mut out = self.params.clone();
        out.extend(self.moments.iter().cloned());
        out.push((META_EPOCH.into(), Tensor::scalar(self.epoch as f32)));
        out.push((META_STEP.into(), Tensor::scalar(self.adam_step as f32)));
        out.push((META_BEST.into(), Tensor::scalar(self.best_val_niou)));
        out
    }

    pub fn from_tensors(tensors: Vec<NamedTensor>) -> Result<Self> {
        let (mut params, mut moments) = (Vec::new(), Vec::new());
        let (mut epoch, mut step, mut best) = (None, None, None);
        for (name, t) in tensors {
            match name.as_str() {
                META_EPOCH => epoch = Some(t.item()),
                META_STEP => step = Some(t.item()),
                META_BEST => best = Some(t.item()),
                n if n.starts_with("adam.") => moments.push((name, t)),
                _ => params.push((name, t)),
            }
        }
        let missing = |what: &str| Error::Config(format!("checkpoint lacks {what}"));
        Ok(Self {
            params,
            moments,
            epoch: epoch.ok_or_else(|| missing(META_EPOCH))? as usize,
            adam_step: step.ok_or_else(|| missing(META_STEP))? as u64,
            best_val_niou: best.ok_or_else(|| missing(META_BEST))?,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        checkpoint::save(path, &self.to_tensors())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_tensors(checkpoint::load(path)?)
    }

    /// Copies parameters into `store` and, if given, optimizer state into `adam`.
    pub fn restore(&self, store: &mut ParamStore<f32>, adam: Option<&mut Adam<f32>>) -> Result<()> {
        store.load_named(&self.params)?;
        if let Some(adam) = adam {
            adam.step = self.adam_step;
            adam.moments = vec![None; store.len()];
            for pair in self.moments.chunks(2) {
                let [(m_name, m), (_, v)] = pair else {
                    return Err(Error::Config(
                        "unpaired optimizer moment in checkpoint".into(),
                    ));
                };
                let name = m_name.strip_prefix("adam.m.").unwrap_or(m_name);
                let id = store
                    .id(name)
                    .ok_or_else(|| Error::Config(format!("moment for unknown parameter {name}")))?;
                adam.moments[id.index()] = Some((m.clone(), v.clone()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: u64,
    pub loss: f64,
    pub val_iou: f64,
    pub val_niou: f64,
    pub val_pd: f64,
    pub val_fa: f64,
}

pub fn epoch_log_csv(rows: &[EpochLog]) -> String {
    let mut out = String::from("epoch,step,loss,val_iou,val_niou,val_pd,val_fa\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.epoch, r.step, r.loss, r.val_iou, r.val_niou, r.val_pd, r.val_fa
        );
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub log: Vec<EpochLog>,
}

/// Stacks samples into `N×1×H×W` image and mask tensors.
pub fn batch_tensors(samples: &[Sample]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Contract("empty batch".into()))?;
    let (h, w) = first.image.dims();
    let mut images = Vec::with_capacity(samples.len() * h * w);
    let mut masks = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if s.image.dims() != (h, w) {
            return Err(Error::dim(
                "batch",
                format!("sample {} is {:?}, batch is {h}×{w}", s.id, s.image.dims()),
            ));
        }
        images.extend_from_slice(s.image.pixels());
        masks.extend(s.mask.pixels().iter().map(|&m| if m { 1.0 } else { 0.0 }));
    }
    Ok((
        Tensor::new([samples.len(), 1, h, w], images)?,
        Tensor::new([samples.len(), 1, h, w], masks)?,
    ))
}

/// Scores the model on `samples` after fitting them to the model input size.
pub fn evaluate_model(
    model: &MpaNet,
    store: &ParamStore<f32>,
    samples: &[Sample],
    metrics: &MetricsConfig,
    batch_size: usize,
) -> Result<MetricsReport> {
    let size = model.config.input_size;
    let mut items = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let fitted: Vec<Sample> = chunk.iter().map(|s| crop_or_pad(s, size)).collect();
        let (images, _) = batch_tensors(&fitted)?;
        let heatmap = model.predict(store, images)?;
        for (s, pred) in fitted
            .into_iter()
            .zip(predict_mask(&heatmap, model.config.threshold)?)
        {
            items.push((s.id, pred, s.mask));
        }
    }
    evaluate(&items, metrics)
}

/// One optimizer step on a batch; returns the loss before the update.
pub fn train_step(
    model: &MpaNet,
    store: &mut ParamStore<f32>,
    adam: &mut Adam<f32>,
    loss: LossKind,
    batch: &[Sample],
) -> Result<f64> {
    let (images, masks) = batch_tensors(batch)?;
    let tape = Tape::new();
    let (value, grads, updates) = {
        let ctx = Ctx::train(&tape, store);
        let heatmap = model.forward(&ctx, ctx.input(images))?;
        let l = loss.apply(heatmap, ctx.input(masks))?;
        let value = l.value().item() as f64;
        if !value.is_finite() {
            return Ok(value);
        }
        let grads = tape.backward(l)?;
        (value, ctx.param_grads(&grads), ctx.take_running_updates())
    };
    adam.update(store, &grads);
    for (id, t) in updates {
        store.set(id, t)?;
    }
    Ok(value)
}

/// Trains with validation-driven model selection. With `resume`, training continues after
/// the checkpoint's last completed epoch with its optimizer state.
pub fn train(
    model: &MpaNet,
    store: &mut ParamStore<f32>,
    splits: &DatasetSplit,
    cfg: &TrainConfig,
    resume: Option<&Checkpoint>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if splits.train.is_empty() || splits.val.is_empty() {
        return Err(Error::Config(
            "training needs non-empty train and validation splits".into(),
        ));
    }
    let size = model.config.input_size;
    let mut adam = Adam::new(cfg.adam)?;
    let (mut start, mut best_niou) = (0, f32::NEG_INFINITY);
    let mut best = None;
    if let Some(ck) = resume {
        ck.restore(store, Some(&mut adam))?;
        start = ck.epoch;
        best_niou = ck.best_val_niou;
    }
    if let Some(dir) = &cfg.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let val: Vec<Sample> = splits.val.iter().map(|s| crop_or_pad(s, size)).collect();
    let mut log = Vec::new();
    let mut last = Checkpoint::capture(store, &adam, start, best_niou);
    for epoch in start..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64 + 1);
        let mut order: Vec<usize> = (0..splits.train.len()).collect();
        order.shuffle(&mut rng);
        let (mut total, mut batches) = (0.0, 0usize);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<Sample> = chunk
                .iter()
                .map(|&i| {
                    let s = &splits.train[i];
                    let s = if cfg.random_crop {
                        random_crop(s, size, &mut rng)
                    } else {
                        crop_or_pad(s, size)
                    };
                    if cfg.hflip && rng.random_bool(0.5) {
                        s.hflip()
                    } else {
                        s
                    }
                })
                .collect();
            let loss = train_step(model, store, &mut adam, cfg.loss, &batch)?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step: b,
                    loss,
                });
            }
            total += loss;
            batches += 1;
        }
        let done = epoch + 1;
        let mut row = EpochLog {
            epoch,
            step: adam.step,
            loss: total / batches as f64,
            val_iou: f64::NAN,
            val_niou: f64::NAN,
            val_pd: f64::NAN,
            val_fa: f64::NAN,
        };
        if done % cfg.eval_every == 0 || done == cfg.epochs {
            let report = evaluate_model(model, store, &val, &cfg.metrics, cfg.batch_size)?;
            row.val_iou = report.iou;
            row.val_niou = report.niou;
            row.val_pd = report.pd;
            row.val_fa = report.fa;
            if report.niou as f32 > best_niou {
                best_niou = report.niou as f32;
                let ck = Checkpoint::capture(store, &adam, done, best_niou);
                if let Some(dir) = &cfg.out_dir {
                    ck.save(dir.join("best.ckpt"))?;
                }
                best = Some(ck);
            }
        }
        log.push(row);
        last = Checkpoint::capture(store, &adam, done, best_niou);
        if let Some(dir) = &cfg.out_dir {
            last.save(dir.join("last.ckpt"))?;
            let path = dir.join("epochs.csv");
            std::fs::write(&path, epoch_log_csv(&log)).map_err(|e| Error::io(&path, e))?;
        }
    }
    let best = match best {
        Some(b) => b,
        None => match cfg
            .out_dir
            .as_ref()
            .map(|d| d.join("best.ckpt"))
            .filter(|p| p.exists())
        {
            Some(p) => Checkpoint::load(p)?,
            None => last.clone(),
        },
    };
    Ok(TrainOutcome { best, last, log })
}
