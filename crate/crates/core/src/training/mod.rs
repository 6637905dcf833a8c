//! SGD training loop with cosine schedule, mosaic and flip augmentation.

pub mod augment;
pub mod targets;

use std::collections::HashMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::sync::mpsc::sync_channel;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, StatUpdate};
use crate::checkpoint::save_checkpoint;
use crate::data::AnnotatedImage;
use crate::detector::{decode_predictions, Annotation, Detection, Model};
use crate::error::{Error, Result};
use crate::metrics::{map_at, map_range};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tensor::{Float, Tensor};

pub use self::augment::{hflip, mosaic};
pub use self::targets::{assign_targets, detection_loss, TargetAssignment};

/// Running-statistic update rate of batch norm.
pub const BN_MOMENTUM: f64 = 0.1;
/// Validation decoding during training.
pub const VAL_CONF: f64 = 0.001;
pub const VAL_NMS_IOU: f64 = 0.6;

pub const METRICS_CSV: &str = "metrics.csv";
pub const BEST_CKPT: &str = "best.safetensors";
pub const LAST_CKPT: &str = "last.safetensors";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub mosaic: bool,
    /// Chance that a sample is replaced by a mosaic while mosaic is active.
    pub mosaic_prob: f64,
    pub hflip_prob: f64,
    /// Fraction of final epochs trained without mosaic.
    pub close_mosaic: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            mosaic: true,
            mosaic_prob: 0.5,
            hflip_prob: 0.5,
            close_mosaic: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub augment: AugmentConfig,
    /// Build the next batch on a helper thread.
    pub prefetch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            batch_size: 16,
            lr0: 0.001,
            momentum: 0.937,
            epochs: 100,
            lr_min: 0.0,
            weight_decay: 5e-4,
            seed: 0,
            augment: AugmentConfig::default(),
            prefetch: false,
        }
    }

    pub fn paper() -> Self {
        Self {
            batch_size: 64,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr0 > 0.0) {
            return bad(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(0.0..=self.lr0).contains(&self.lr_min) {
            return bad(format!("lr_min must lie in [0, lr0], got {}", self.lr_min));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            ));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            ));
        }
        if !(0.0..=1.0).contains(&self.augment.hflip_prob) {
            return bad(format!(
                "hflip_prob must lie in [0, 1], got {}",
                self.augment.hflip_prob
            ));
        }
        if !(0.0..=1.0).contains(&self.augment.mosaic_prob) {
            return bad(format!(
                "mosaic_prob must lie in [0, 1], got {}",
                self.augment.mosaic_prob
            ));
        }
        if !(0.0..=1.0).contains(&self.augment.close_mosaic) {
            return bad(format!(
                "close_mosaic must lie in [0, 1], got {}",
                self.augment.close_mosaic
            ));
        }
        Ok(())
    }

    /// Epochs (0-based) before which mosaic is active.
    pub fn mosaic_epochs(&self) -> usize {
        if !self.augment.mosaic {
            return 0;
        }
        self.epochs - (self.augment.close_mosaic * self.epochs as f64).round() as usize
    }
}

/// Cosine-annealed learning rate at the start of `epoch` (0-based).
pub fn cosine_lr(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch > cfg.epochs {
        return Err(Error::Argument(format!(
            "epoch {epoch} outside 0..={}",
            cfg.epochs
        )));
    }
    let t = epoch as f64 / cfg.epochs as f64;
    Ok(cfg.lr_min + 0.5 * (cfg.lr0 - cfg.lr_min) * (1.0 + (PI * t).cos()))
}

/// SGD with heavy-ball momentum and decoupled-from-norm weight decay.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Option<Vec<T>>>,
}

impl<T: Float> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// `v ← μv + g + λp` (λ only on weights), `p ← p − lr·v`, then bounds.
    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &HashMap<ParamId, Tensor<T>>,
        lr: f64,
    ) {
        if self.velocity.len() < store.len() {
            self.velocity.resize(store.len(), None);
        }
        let (mu, lr) = (T::of(self.momentum), T::of(lr));
        let mut ids: Vec<_> = grads.keys().copied().collect();
        ids.sort();
        for id in ids {
            let entry = store.entry_mut(id);
            if !entry.kind.trainable() {
                continue;
            }
            let wd = T::of(if entry.kind == ParamKind::Weight {
                self.weight_decay
            } else {
                0.0
            });
            let g = grads[&id].data();
            let v = self.velocity[id.index()].get_or_insert_with(|| vec![T::zero(); g.len()]);
            for ((p, vi), &gi) in entry.value.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
                *vi = mu * *vi + gi + wd * *p;
                *p -= lr * *vi;
            }
        }
        store.apply_bounds();
    }
}

/// Blends batch statistics into the running buffers.
pub fn apply_stat_updates<T: Float>(store: &mut ParamStore<T>, updates: &[StatUpdate<T>]) {
    let m = T::of(BN_MOMENTUM);
    for u in updates {
        for (id, batch) in [
            (u.running_mean, &u.batch_mean),
            (u.running_var, &u.batch_var),
        ] {
            for (r, &b) in store.get_mut(id).data_mut().iter_mut().zip(batch) {
                *r = (T::one() - m) * *r + m * b;
            }
        }
    }
}

/// Stacks `[3, S, S]` images into `[B, 3, S, S]`.
pub fn stack_images<T: Float>(samples: &[AnnotatedImage]) -> Result<Tensor<T>> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Argument("cannot stack zero images".into()))?;
    let shape = first.image.shape().to_vec();
    let mut data = Vec::with_capacity(samples.len() * first.image.numel());
    for s in samples {
        if s.image.shape() != shape.as_slice() {
            return Err(Error::Shape(format!(
                "image {} is {:?}, expected {shape:?}",
                s.source_id,
                s.image.shape()
            )));
        }
        data.extend(s.image.data().iter().map(|&v| T::of(v as f64)));
    }
    Tensor::new(&[samples.len(), shape[0], shape[1], shape[2]], data)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLoss {
    pub total: f64,
    pub cls: f64,
    pub bbox: f64,
}

/// Loss of the model on one batch in training mode, with the parameter
/// gradients of `grad_scale · total`.
pub fn loss_and_grads<T: Float>(
    model: &Model,
    store: &ParamStore<T>,
    images: Tensor<T>,
    targets: &[TargetAssignment],
    grad_scale: f64,
) -> Result<(StepLoss, HashMap<ParamId, Tensor<T>>, Vec<StatUpdate<T>>)> {
    let mut g = Graph::new(store, true);
    let x = g.input(images);
    let out = model.forward(&mut g, x)?;
    let raw: Vec<Tensor<T>> = out.iter().map(|&v| g.value(v).clone()).collect();
    let l = detection_loss(&raw, targets, &model.cfg)?;
    let loss = StepLoss {
        total: l.total,
        cls: l.cls,
        bbox: l.bbox,
    };
    if !l.total.is_finite() {
        return Ok((loss, Default::default(), Vec::new()));
    }
    let scaled = l.grads.into_iter().map(|t| t.scale(T::of(grad_scale)));
    let node = g.external_scalar(
        T::of(l.total * grad_scale),
        out.iter().copied().zip(scaled).collect(),
    )?;
    let grads = g.backward(node)?.into_param_grads();
    let stats = g.take_stat_updates();
    Ok((loss, grads, stats))
}

/// Deterministic generator for one batch of one epoch.
fn batch_rng(seed: u64, epoch: usize, batch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) | batch as u64);
    rng
}

/// Augmented samples for one batch.
fn build_batch(
    data: &[AnnotatedImage],
    idx: &[usize],
    use_mosaic: bool,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<AnnotatedImage>> {
    idx.iter()
        .map(|&i| {
            let mut s = if use_mosaic && rng.random_bool(cfg.augment.mosaic_prob) {
                let others: [usize; 3] = std::array::from_fn(|_| rng.random_range(0..data.len()));
                mosaic(
                    [
                        &data[i],
                        &data[others[0]],
                        &data[others[1]],
                        &data[others[2]],
                    ],
                    rng,
                )?
            } else {
                data[i].clone()
            };
            if rng.random_bool(cfg.augment.hflip_prob) {
                s = hflip(&s);
            }
            Ok(s)
        })
        .collect()
}

/// Resizes every sample to the model input size.
pub fn prepare_samples(samples: &[AnnotatedImage], size: usize) -> Vec<AnnotatedImage> {
    samples.iter().map(|s| s.resized(size)).collect()
}

/// Eval-mode detections for each sample, processed in chunks of `batch`.
pub fn detect_samples(
    model: &Model,
    store: &ParamStore<f32>,
    samples: &[AnnotatedImage],
    conf: f64,
    nms_iou: f64,
    batch: usize,
) -> Result<Vec<Vec<Detection>>> {
    let size = model.cfg.input_size;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let chunk = prepare_samples(chunk, size);
        let raw = model.predict(store, stack_images::<f32>(&chunk)?)?;
        out.extend(decode_predictions(&raw, &model.cfg, conf, nms_iou)?);
    }
    Ok(out)
}

/// `(mAP@50, mAP@50–95)`; zero when the set holds no objects.
pub fn quick_map(
    dets: &[Vec<Detection>],
    gts: &[Vec<Annotation>],
    num_classes: usize,
) -> Result<(f64, f64)> {
    if gts.iter().all(|g| g.is_empty()) {
        return Ok((0.0, 0.0));
    }
    Ok((
        map_at(dets, gts, 0.5, num_classes)?,
        map_range(dets, gts, num_classes)?,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_cls: f64,
    pub loss_box: f64,
    pub val_map50: f64,
    pub val_map5095: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<EpochRecord>,
}

impl MetricsLog {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let csv_err = |e: csv::Error| Error::io(path, std::io::Error::other(e));
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        if self.rows.is_empty() {
            w.write_record([
                "epoch",
                "lr",
                "loss_total",
                "loss_cls",
                "loss_box",
                "val_map50",
                "val_map5095",
            ])
            .map_err(csv_err)?;
        }
        for r in &self.rows {
            w.serialize(r).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let csv_err = |e: csv::Error| Error::io(path, std::io::Error::other(e));
        let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
        let rows = r
            .deserialize()
            .collect::<std::result::Result<Vec<EpochRecord>, _>>()
            .map_err(csv_err)?;
        Ok(Self { rows })
    }

    pub fn best(&self) -> Option<&EpochRecord> {
        self.rows
            .iter()
            .fold(None, |best: Option<&EpochRecord>, r| match best {
                Some(b) if b.val_map50 >= r.val_map50 => Some(b),
                _ => Some(r),
            })
    }
}

pub struct TrainOutcome {
    pub log: MetricsLog,
    /// Parameters after the final epoch.
    pub store: ParamStore<f32>,
    /// Parameters of the epoch with the highest validation mAP@50.
    pub best_store: ParamStore<f32>,
    pub best_epoch: usize,
    /// Files written under the output directory.
    pub files: Vec<PathBuf>,
}

/// Runs exactly `cfg.epochs` epochs.
///
/// Each epoch shuffles the training set, takes SGD steps at the epoch's
/// cosine learning rate, then scores the validation set. With `out_dir`,
/// the metrics CSV is rewritten after every epoch and the best and last
/// checkpoints are saved.
pub fn train(
    model: &Model,
    mut store: ParamStore<f32>,
    train_set: &[AnnotatedImage],
    val_set: &[AnnotatedImage],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Dataset("training split is empty".into()));
    }
    let size = model.cfg.input_size;
    let train_set = prepare_samples(train_set, size);
    let val_set = prepare_samples(val_set, size);
    let val_gts: Vec<Vec<Annotation>> = val_set.iter().map(|s| s.boxes.clone()).collect();
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut sgd = Sgd::<f32>::new(cfg.momentum, cfg.weight_decay);
    let mut log = MetricsLog::default();
    let mut best: Option<(f64, usize, ParamStore<f32>)> = None;
    let mosaic_until = cfg.mosaic_epochs();

    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg)?;
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut batch_rng(cfg.seed, epoch, usize::MAX >> 32));
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        let use_mosaic = epoch < mosaic_until;
        let make = |b: usize| {
            build_batch(
                &train_set,
                batches[b],
                use_mosaic,
                cfg,
                &mut batch_rng(cfg.seed, epoch, b),
            )
        };

        let mut sums = StepLoss::default();
        let mut step = |b: usize, samples: Vec<AnnotatedImage>| -> Result<()> {
            let targets: Vec<TargetAssignment> = samples
                .iter()
                .map(|s| assign_targets(&s.boxes, &model.cfg))
                .collect();
            let images = stack_images::<f32>(&samples)?;
            let at = format!("epoch {}, batch {}", epoch + 1, b + 1);
            // Steps follow the batch-summed loss, so the step size grows with the batch.
            let (loss, grads, stats) =
                loss_and_grads(model, &store, images, &targets, samples.len() as f64).map_err(
                    |e| match e {
                        Error::Numeric(m) => Error::Numeric(format!("{m} at {at}")),
                        e => e,
                    },
                )?;
            if !loss.total.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss at {at}")));
            }
            sgd.step(&mut store, &grads, lr);
            apply_stat_updates(&mut store, &stats);
            let n = samples.len() as f64;
            sums.total += loss.total * n;
            sums.cls += loss.cls * n;
            sums.bbox += loss.bbox * n;
            Ok(())
        };
        if cfg.prefetch {
            std::thread::scope(|scope| -> Result<()> {
                let (tx, rx) = sync_channel::<Result<Vec<AnnotatedImage>>>(2);
                let make = &make;
                let n = batches.len();
                scope.spawn(move || {
                    for b in 0..n {
                        if tx.send(make(b)).is_err() {
                            break;
                        }
                    }
                });
                for (b, samples) in rx.iter().enumerate() {
                    step(b, samples?)?;
                }
                Ok(())
            })?;
        } else {
            for b in 0..batches.len() {
                step(b, make(b)?)?;
            }
        }

        let n = train_set.len() as f64;
        let dets = detect_samples(
            model,
            &store,
            &val_set,
            VAL_CONF,
            VAL_NMS_IOU,
            cfg.batch_size,
        )?;
        let (val_map50, val_map5095) = quick_map(&dets, &val_gts, model.cfg.num_classes)?;
        let rec = EpochRecord {
            epoch: epoch + 1,
            lr,
            loss_total: sums.total / n,
            loss_cls: sums.cls / n,
            loss_box: sums.bbox / n,
            val_map50,
            val_map5095,
        };
        log::info!(
            "epoch {:>3}/{} lr {:.6} loss {:.4} (cls {:.4} box {:.4}) val mAP50 {:.4} mAP50-95 {:.4}",
            rec.epoch,
            cfg.epochs,
            rec.lr,
            rec.loss_total,
            rec.loss_cls,
            rec.loss_box,
            rec.val_map50,
            rec.val_map5095
        );
        if best.as_ref().is_none_or(|(m, _, _)| val_map50 > *m) {
            best = Some((val_map50, epoch + 1, store.clone()));
            if let Some(dir) = out_dir {
                save_checkpoint(&dir.join(BEST_CKPT), &model.cfg, &store)?;
            }
        }
        log.rows.push(rec);
        if let Some(dir) = out_dir {
            log.write_csv(&dir.join(METRICS_CSV))?;
        }
    }

    let mut files = Vec::new();
    if let Some(dir) = out_dir {
        save_checkpoint(&dir.join(LAST_CKPT), &model.cfg, &store)?;
        files = vec![
            dir.join(METRICS_CSV),
            dir.join(BEST_CKPT),
            dir.join(LAST_CKPT),
        ];
    }
    let (_, best_epoch, best_store) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        log,
        store,
        best_store,
        best_epoch,
        files,
    })
}
