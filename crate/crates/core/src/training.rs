//! Training: stratified splits, label-smoothed cross-entropy, cosine
//! schedule with linear warm-up, early stopping on validation macro F1, and
//! the patch, MIL and thumbnail loops.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::{softmax, MilHead};
use crate::backbone::{flip, images_to_tensor, DropRates, Normalization, PatchModel, TrainingStage};
use crate::error::{Error, IoContext, Result};
use crate::evaluation::macro_f1;
use crate::features::{sample_indices, Budget, FeatureBag};
use crate::image::RgbImage;
use crate::manifest::Manifest;
use crate::nn::{self, device, Ctx, ParamStore};
use crate::taxonomy::{argmax, StainClass};
use crate::thumbnail_classifier::ThumbnailModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub seed: u64,
    pub holdout_frac: f64,
    /// Held-out slide ids per fine class id.
    pub holdout: BTreeMap<String, Vec<String>>,
    /// Cross-validation folds over the remaining ids.
    pub folds: Vec<Vec<String>>,
}

impl SplitPlan {
    pub fn holdout_ids(&self) -> BTreeSet<String> {
        self.holdout.values().flatten().cloned().collect()
    }

    pub fn training_ids(&self) -> BTreeSet<String> {
        self.folds.iter().flatten().cloned().collect()
    }

    pub fn fold(&self, f: usize) -> Result<&[String]> {
        self.folds
            .get(f)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::Argument(format!("fold {f} out of range (have {})", self.folds.len())))
    }

    /// Training ids outside fold `val`.
    pub fn train_ids(&self, val: usize) -> Result<Vec<String>> {
        self.fold(val)?;
        Ok(self
            .folds
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != val)
            .flat_map(|(_, f)| f.iter().cloned())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(p) = path.parent() {
            std::fs::create_dir_all(p).at(p)?;
        }
        std::fs::write(path, serde_json::to_vec_pretty(self)?).at(path)
    }

    pub fn load(path: &Path) -> Result<SplitPlan> {
        Ok(serde_json::from_slice(&std::fs::read(path).at(path)?)?)
    }
}

/// Per class: shuffle, hold out `round(frac * n)` slides, deal the rest into
/// `n_folds` folds. Each class continues dealing where the previous one
/// stopped so overall fold sizes stay balanced too.
pub fn make_splits(manifest: &Manifest, seed: u64, holdout_frac: f64, n_folds: usize) -> Result<SplitPlan> {
    if n_folds == 0 || !(0.0..1.0).contains(&holdout_frac) {
        return Err(Error::Argument("need at least one fold and a holdout fraction in [0, 1)".into()));
    }
    let mut by_class: BTreeMap<StainClass, Vec<String>> = BTreeMap::new();
    for e in &manifest.entries {
        by_class.entry(e.fine_label).or_default().push(e.slide_id.clone());
    }
    let mut holdout = BTreeMap::new();
    let mut folds = vec![Vec::new(); n_folds];
    let mut offset = 0;
    for (class, mut ids) in by_class {
        if ids.len() < 5 {
            log::warn!("class {class} has only {} slides; some folds get none", ids.len());
        }
        ids.sort();
        ids.shuffle(&mut crate::seed::rng(seed, &[0x5b117, class.index() as u64]));
        // Every class with two or more slides keeps at least one for testing.
        let mut n_hold = (holdout_frac * ids.len() as f64).round() as usize;
        if holdout_frac > 0.0 && ids.len() >= 2 {
            n_hold = n_hold.max(1);
        }
        let mut held: Vec<String> = ids[..n_hold].to_vec();
        held.sort();
        holdout.insert(class.id().to_string(), held);
        for id in &ids[n_hold..] {
            folds[offset % n_folds].push(id.clone());
            offset += 1;
        }
    }
    for f in &mut folds {
        f.sort();
    }
    Ok(SplitPlan {
        seed,
        holdout_frac,
        holdout,
        folds,
    })
}

/// Mean label-smoothed cross-entropy of `[B, C]` logits; targets are
/// `(1 - s) * one_hot + s / C`.
pub fn smoothed_ce(logits: &Tensor, labels: &[usize], smoothing: f64) -> Result<Tensor> {
    let (b, c) = logits.dims2()?;
    if labels.len() != b {
        return Err(Error::Shape(format!("{} labels for {b} rows", labels.len())));
    }
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::Argument(format!("smoothing {smoothing} outside [0, 1)")));
    }
    let mut q = vec![smoothing / c as f64; b * c];
    for (i, &l) in labels.iter().enumerate() {
        if l >= c {
            return Err(Error::InvalidLabel(format!("index {l} for {c} classes")));
        }
        q[i * c + l] += 1.0 - smoothing;
    }
    let q = Tensor::from_vec(q, (b, c), &device())?.to_dtype(logits.dtype())?;
    let logp = nn::log_softmax_last(logits)?;
    Ok((q.mul(&logp)?.sum_all()? / (-(b as f64)))?)
}

/// Scalar reference of [`smoothed_ce`] for one example.
pub fn smoothed_ce_scalar(logits: &[f64], label: usize, smoothing: f64) -> Result<f64> {
    let c = logits.len();
    if label >= c {
        return Err(Error::InvalidLabel(format!("index {label} for {c} classes")));
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    Ok(-(0..c)
        .map(|k| {
            let q = smoothing / c as f64 + if k == label { 1.0 - smoothing } else { 0.0 };
            q * (logits[k] - lse)
        })
        .sum::<f64>())
}

/// Linear warm-up over `warmup` steps, then a half cosine that reaches zero
/// on the last step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSchedule {
    pub peak: f64,
    pub warmup: usize,
    pub total: usize,
}

impl CosineSchedule {
    pub fn new(peak: f64, total: usize, warmup_frac: f64) -> Self {
        let warmup = ((warmup_frac * total as f64).ceil() as usize).min(total.saturating_sub(1));
        CosineSchedule { peak, warmup, total }
    }

    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.peak * (step + 1) as f64 / (self.warmup + 1) as f64;
        }
        let span = self.total.saturating_sub(self.warmup + 1);
        if span == 0 {
            return self.peak;
        }
        let t = ((step - self.warmup) as f64 / span as f64).min(1.0);
        self.peak * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EarlyStopConfig {
    pub enabled: bool,
    pub patience: usize,
    pub min_delta: f64,
}

impl Default for EarlyStopConfig {
    fn default() -> Self {
        EarlyStopConfig {
            enabled: true,
            patience: 5,
            min_delta: 0.001,
        }
    }
}

/// Tracks the best validation metric; an epoch counts as an improvement only
/// when it beats the best by more than `min_delta`.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    cfg: EarlyStopConfig,
    pub best: Option<f64>,
    pub best_epoch: Option<usize>,
    bad_epochs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopper {
    pub fn new(cfg: EarlyStopConfig) -> Self {
        EarlyStopper {
            cfg,
            best: None,
            best_epoch: None,
            bad_epochs: 0,
        }
    }

    pub fn update(&mut self, epoch: usize, metric: f64) -> StopDecision {
        let improved = match self.best {
            None => true,
            Some(b) => metric > b + self.cfg.min_delta,
        };
        if improved {
            self.best = Some(metric);
            self.best_epoch = Some(epoch);
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
        }
        StopDecision {
            improved,
            stop: self.cfg.enabled && self.bad_epochs >= self.cfg.patience,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerPrecision {
    /// 32-bit optimizer state; the only implemented option.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainRecipe {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub label_smoothing: f64,
    /// Fraction of all optimisation steps spent warming up.
    pub warmup_frac: f64,
    pub early_stop: EarlyStopConfig,
    pub drop_rates: DropRates,
    /// Random horizontal/vertical flips of training images.
    pub augment_flips: bool,
    pub optimizer_precision: OptimizerPrecision,
}

impl Default for TrainRecipe {
    fn default() -> Self {
        TrainRecipe::patch()
    }
}

impl TrainRecipe {
    pub fn patch() -> Self {
        TrainRecipe {
            lr: 5e-5,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 256,
            max_epochs: 15,
            label_smoothing: 0.05,
            warmup_frac: 0.05,
            early_stop: EarlyStopConfig::default(),
            drop_rates: DropRates::uniform(0.5),
            augment_flips: true,
            optimizer_precision: OptimizerPrecision::Full,
        }
    }

    pub fn mil() -> Self {
        TrainRecipe {
            lr: 1e-5,
            weight_decay: 5e-2,
            drop_rates: DropRates::ZERO,
            augment_flips: false,
            ..TrainRecipe::patch()
        }
    }

    pub fn thumbnail() -> Self {
        TrainRecipe {
            lr: 1e-5,
            weight_decay: 5e-2,
            batch_size: 128,
            max_epochs: 20,
            drop_rates: DropRates::uniform(0.3),
            augment_flips: false,
            ..TrainRecipe::patch()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.lr > 0.0) || !(0.0..1.0).contains(&self.label_smoothing) || !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(Error::Config("recipe needs batch_size > 0, lr > 0, smoothing and warmup in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_macro_f1: Option<f64>,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopOutcome {
    pub history: Vec<EpochMetrics>,
    /// Learning rate used at every optimisation step.
    pub lr_trace: Vec<f64>,
    pub best_epoch: Option<usize>,
    pub best_metric: Option<f64>,
    pub stopped_early: bool,
}

/// Callbacks driving [`run_loop`].
pub trait LoopTask {
    /// Mean loss over the items `batch`.
    fn step(&mut self, epoch: usize, batch: &[usize], ctx: &Ctx, rng: &mut ChaCha8Rng) -> Result<Tensor>;
    /// Validation macro F1, or `None` without a validation set.
    fn validate(&mut self) -> Result<Option<f64>>;
    /// Called whenever the weights become the best seen so far.
    fn snapshot(&mut self) -> Result<()>;
}

/// Mini-batch AdamW with the cosine schedule and early stopping. With no
/// validation metric every epoch counts as best, so the final weights win.
pub fn run_loop(recipe: &TrainRecipe, vars: Vec<Var>, n_items: usize, seed: u64, task: &mut dyn LoopTask, log: Option<&Path>) -> Result<LoopOutcome> {
    recipe.validate()?;
    let steps_per_epoch = n_items.div_ceil(recipe.batch_size);
    let schedule = CosineSchedule::new(recipe.lr, steps_per_epoch * recipe.max_epochs, recipe.warmup_frac);
    let mut opt = AdamW::new(
        vars,
        ParamsAdamW {
            lr: recipe.lr,
            beta1: recipe.beta1,
            beta2: recipe.beta2,
            eps: recipe.eps,
            weight_decay: recipe.weight_decay,
        },
    )?;
    let mut log_file = match log {
        Some(p) => {
            if let Some(d) = p.parent() {
                std::fs::create_dir_all(d).at(d)?;
            }
            Some((std::fs::File::create(p).at(p)?, p.to_path_buf()))
        }
        None => None,
    };
    let mut stopper = EarlyStopper::new(recipe.early_stop);
    let mut out = LoopOutcome {
        history: Vec::new(),
        lr_trace: Vec::new(),
        best_epoch: None,
        best_metric: None,
        stopped_early: false,
    };
    let mut step = 0;
    for epoch in 0..recipe.max_epochs {
        let mut order: Vec<usize> = (0..n_items).collect();
        order.shuffle(&mut crate::seed::rng(seed, &[0xe90c, epoch as u64]));
        let mut loss_sum = 0.0;
        let mut seen = 0;
        for (b, batch) in order.chunks(recipe.batch_size).enumerate() {
            let lr = schedule.lr(step);
            opt.set_learning_rate(lr);
            out.lr_trace.push(lr);
            let ctx = Ctx::train(crate::seed::rng(seed, &[0xd50, epoch as u64, b as u64]));
            let mut rng = crate::seed::rng(seed, &[0xa06, epoch as u64, b as u64]);
            let loss = task.step(epoch, batch, &ctx, &mut rng)?;
            let l = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !l.is_finite() {
                return Err(Error::Stage(format!("training diverged: loss {l} at epoch {epoch}")));
            }
            opt.backward_step(&loss)?;
            loss_sum += l * batch.len() as f64;
            seen += batch.len();
            step += 1;
        }
        let metric = task.validate()?;
        let m = EpochMetrics {
            epoch,
            train_loss: if seen > 0 { loss_sum / seen as f64 } else { 0.0 },
            val_macro_f1: metric,
            lr: out.lr_trace.last().copied().unwrap_or(recipe.lr),
        };
        log::info!(
            "epoch {epoch}: loss {:.4} val macro F1 {} lr {:.2e}",
            m.train_loss,
            metric.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
            m.lr
        );
        if let Some((f, p)) = log_file.as_mut() {
            serde_json::to_writer(&mut *f, &m)?;
            f.write_all(b"\n").at(p.as_path())?;
        }
        out.history.push(m);
        match metric {
            Some(v) => {
                let d = stopper.update(epoch, v);
                if d.improved {
                    task.snapshot()?;
                }
                if d.stop {
                    out.stopped_early = true;
                    break;
                }
            }
            None => task.snapshot()?,
        }
    }
    out.best_epoch = stopper.best_epoch;
    out.best_metric = stopper.best;
    Ok(out)
}

fn restore(store: &ParamStore, snap: &Option<ParamStore>) -> Result<()> {
    if let Some(s) = snap {
        store.load_matching(s, &[])?;
    }
    Ok(())
}

fn augment(img: &RgbImage, rng: &mut ChaCha8Rng) -> RgbImage {
    let h = rng.random::<bool>();
    let v = rng.random::<bool>();
    if h || v {
        flip(img, h, v)
    } else {
        img.clone()
    }
}

fn image_batch(images: &[&RgbImage], flips: bool, rng: &mut ChaCha8Rng, norm: &Normalization, dtype: DType) -> Result<Tensor> {
    if flips {
        let owned: Vec<RgbImage> = images.iter().map(|i| augment(i, rng)).collect();
        images_to_tensor(&owned.iter().collect::<Vec<_>>(), norm, dtype)
    } else {
        images_to_tensor(images, norm, dtype)
    }
}

/// One training patch with the label of its slide.
#[derive(Debug, Clone)]
pub struct PatchSample {
    pub image: RgbImage,
    pub label: usize,
    /// Index of the source slide, for slide-level validation.
    pub slide: usize,
}

/// Slide-level macro F1 of mean patch probabilities.
fn patch_validation(model: &PatchModel, val: &[PatchSample], norm: &Normalization, n_classes: usize) -> Result<Option<f64>> {
    if val.is_empty() {
        return Ok(None);
    }
    let ctx = Ctx::eval();
    let mut per_slide: BTreeMap<usize, (usize, Vec<f64>, usize)> = BTreeMap::new();
    for chunk in val.chunks(128) {
        let x = images_to_tensor(&chunk.iter().map(|s| &s.image).collect::<Vec<_>>(), norm, model.store.dtype())?;
        let logits = nn::to_rows(&model.logits(&x, &ctx)?)?;
        for (s, l) in chunk.iter().zip(logits) {
            let p = softmax(&l);
            let e = per_slide.entry(s.slide).or_insert((s.label, vec![0.0; n_classes], 0));
            for (a, b) in e.1.iter_mut().zip(&p) {
                *a += b;
            }
            e.2 += 1;
        }
    }
    let truth: Vec<usize> = per_slide.values().map(|e| e.0).collect();
    let pred: Vec<usize> = per_slide.values().map(|e| argmax(&e.1)).collect();
    Ok(Some(macro_f1(&truth, &pred, n_classes)))
}

struct PatchTask<'a> {
    model: &'a PatchModel,
    train: &'a [PatchSample],
    val: &'a [PatchSample],
    recipe: &'a TrainRecipe,
    norm: &'a Normalization,
    best: Option<ParamStore>,
}

impl LoopTask for PatchTask<'_> {
    fn step(&mut self, _epoch: usize, batch: &[usize], ctx: &Ctx, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let imgs: Vec<&RgbImage> = batch.iter().map(|&i| &self.train[i].image).collect();
        let labels: Vec<usize> = batch.iter().map(|&i| self.train[i].label).collect();
        let x = image_batch(&imgs, self.recipe.augment_flips, rng, self.norm, self.model.store.dtype())?;
        smoothed_ce(&self.model.logits(&x, ctx)?, &labels, self.recipe.label_smoothing)
    }

    fn validate(&mut self) -> Result<Option<f64>> {
        patch_validation(self.model, self.val, self.norm, self.model.class_set.len())
    }

    fn snapshot(&mut self) -> Result<()> {
        self.best = Some(self.model.store.deep_clone()?);
        Ok(())
    }
}

/// Fine-tunes encoder and linear head end to end on patches that inherit
/// their slide's label; keeps the best validation epoch.
pub fn train_patch_model(
    model: &mut PatchModel,
    train: &[PatchSample],
    val: &[PatchSample],
    recipe: &TrainRecipe,
    seed: u64,
    norm: &Normalization,
    log: Option<&Path>,
) -> Result<LoopOutcome> {
    model.encoder.spec.drop_rates = recipe.drop_rates;
    let vars = model.store.trainable(&[]);
    let mut task = PatchTask {
        model,
        train,
        val,
        recipe,
        norm,
        best: None,
    };
    let out = run_loop(recipe, vars, train.len(), seed, &mut task, log)?;
    let best = task.best.take();
    restore(&model.store, &best)?;
    model.stage = TrainingStage::PatchFinetuned;
    Ok(out)
}

/// A bag cached as a tensor, with its label.
pub struct BagSample {
    pub bag: FeatureBag,
    pub label: usize,
    tensor: Tensor,
}

impl BagSample {
    pub fn new(bag: FeatureBag, label: usize, dtype: DType) -> Result<BagSample> {
        let tensor = bag.to_tensor(dtype)?;
        Ok(BagSample { bag, label, tensor })
    }

    fn rows(&self, idx: &[usize]) -> Result<Tensor> {
        if idx.len() == self.bag.len() {
            return Ok(self.tensor.clone());
        }
        let ids = Tensor::from_vec(idx.iter().map(|&i| i as u32).collect::<Vec<_>>(), idx.len(), &device())?;
        Ok(self.tensor.index_select(&ids, 0)?)
    }
}

/// Options for MIL training.
#[derive(Debug, Clone, Copy)]
pub struct MilOptions {
    pub budget: Budget,
    /// Keep one k-subset per slide for all epochs instead of re-sampling.
    pub freeze_k: bool,
}

struct MilTask<'a> {
    head: &'a MilHead,
    train: &'a [BagSample],
    val: &'a [BagSample],
    recipe: &'a TrainRecipe,
    opts: MilOptions,
    seed: u64,
    best: Option<ParamStore>,
}

impl MilTask<'_> {
    fn indices(&self, bag: &FeatureBag, parts: &[u64]) -> Vec<usize> {
        match self.opts.budget {
            Budget::All => (0..bag.len()).collect(),
            Budget::K(k) => sample_indices(bag.len(), k, crate::seed::derive(self.seed, parts)),
        }
    }
}

impl LoopTask for MilTask<'_> {
    fn step(&mut self, epoch: usize, batch: &[usize], _ctx: &Ctx, _rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let mut logits = Vec::with_capacity(batch.len());
        let mut labels = Vec::with_capacity(batch.len());
        for &i in batch {
            let s = &self.train[i];
            let parts: Vec<u64> = if self.opts.freeze_k {
                vec![0xf0e2, i as u64]
            } else {
                vec![0xe90c, epoch as u64, i as u64]
            };
            let idx = self.indices(&s.bag, &parts);
            let (l, _) = self.head.forward(&s.rows(&idx)?)?;
            logits.push(l.unsqueeze(0)?);
            labels.push(s.label);
        }
        smoothed_ce(&Tensor::cat(&logits, 0)?, &labels, self.recipe.label_smoothing)
    }

    fn validate(&mut self) -> Result<Option<f64>> {
        if self.val.is_empty() {
            return Ok(None);
        }
        let mut truth = Vec::new();
        let mut pred = Vec::new();
        for (i, s) in self.val.iter().enumerate() {
            let idx = self.indices(&s.bag, &[0x7a1, i as u64]);
            let (l, _) = self.head.forward(&s.rows(&idx)?)?;
            pred.push(argmax(&l.to_dtype(DType::F64)?.to_vec1::<f64>()?));
            truth.push(s.label);
        }
        Ok(Some(macro_f1(&truth, &pred, self.head.class_set.len())))
    }

    fn snapshot(&mut self) -> Result<()> {
        self.best = Some(self.head.store.deep_clone()?);
        Ok(())
    }
}

/// Trains only the MIL head; features come from a frozen encoder.
pub fn train_mil_head(
    head: &mut MilHead,
    train: &[BagSample],
    val: &[BagSample],
    recipe: &TrainRecipe,
    opts: MilOptions,
    seed: u64,
    log: Option<&Path>,
) -> Result<LoopOutcome> {
    if let Some(s) = train.iter().chain(val).find(|s| s.bag.is_empty()) {
        return Err(Error::EmptyBag(s.bag.slide_id.clone()));
    }
    let vars = head.store.trainable(&["mil."]);
    let mut task = MilTask {
        head,
        train,
        val,
        recipe,
        opts,
        seed,
        best: None,
    };
    let out = run_loop(recipe, vars, train.len(), seed, &mut task, log)?;
    let best = task.best.take();
    restore(&head.store, &best)?;
    head.stage = TrainingStage::MilHead;
    Ok(out)
}

struct ThumbTask<'a> {
    model: &'a ThumbnailModel,
    train: &'a [(RgbImage, usize)],
    val: &'a [(RgbImage, usize)],
    recipe: &'a TrainRecipe,
    norm: &'a Normalization,
    best: Option<ParamStore>,
}

impl LoopTask for ThumbTask<'_> {
    fn step(&mut self, _epoch: usize, batch: &[usize], ctx: &Ctx, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let imgs: Vec<&RgbImage> = batch.iter().map(|&i| &self.train[i].0).collect();
        let labels: Vec<usize> = batch.iter().map(|&i| self.train[i].1).collect();
        let x = image_batch(&imgs, self.recipe.augment_flips, rng, self.norm, self.model.store.dtype())?;
        smoothed_ce(&self.model.logits(&x, ctx)?, &labels, self.recipe.label_smoothing)
    }

    fn validate(&mut self) -> Result<Option<f64>> {
        if self.val.is_empty() {
            return Ok(None);
        }
        let ctx = Ctx::eval();
        let mut pred = Vec::new();
        for chunk in self.val.chunks(32) {
            let x = images_to_tensor(&chunk.iter().map(|v| &v.0).collect::<Vec<_>>(), self.norm, self.model.store.dtype())?;
            pred.extend(nn::to_rows(&self.model.logits(&x, &ctx)?)?.iter().map(|r| argmax(r)));
        }
        let truth: Vec<usize> = self.val.iter().map(|v| v.1).collect();
        Ok(Some(macro_f1(&truth, &pred, self.model.class_set.len())))
    }

    fn snapshot(&mut self) -> Result<()> {
        self.best = Some(self.model.store.deep_clone()?);
        Ok(())
    }
}

/// Fine-tunes a thumbnail model fully unfrozen on whole thumbnails.
pub fn train_thumbnail_model(
    model: &mut ThumbnailModel,
    train: &[(RgbImage, usize)],
    val: &[(RgbImage, usize)],
    recipe: &TrainRecipe,
    seed: u64,
    norm: &Normalization,
    log: Option<&Path>,
) -> Result<LoopOutcome> {
    for (img, _) in train.iter().chain(val) {
        if (img.width, img.height) != (model.resolution.width, model.resolution.height) {
            return Err(Error::Shape(format!(
                "training thumbnail is {}x{}, model is configured for {}",
                img.width, img.height, model.resolution
            )));
        }
    }
    model.encoder.spec.drop_rates = recipe.drop_rates;
    let vars = model.store.trainable(&[]);
    let mut task = ThumbTask {
        model,
        train,
        val,
        recipe,
        norm,
        best: None,
    };
    let out = run_loop(recipe, vars, train.len(), seed, &mut task, log)?;
    let best = task.best.take();
    restore(&model.store, &best)?;
    model.stage = TrainingStage::ThumbnailFinetuned;
    Ok(out)
}
