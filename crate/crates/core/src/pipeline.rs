//! Stage orchestration over an on-disk artifact tree. Every stage reads the
//! run config, skips work whose outputs already exist unless forced, and
//! fails with an actionable message when a prerequisite is missing.
//!
//! ```text
//! data/<dataset>/manifest.csv, slides/, gt_masks/     (synth)
//! data/main/splits.json
//! cache/<dataset>/thumbs/<id>.{png,json}              (thumbs)
//! cache/<dataset>/masks/<id>.{png,json}               (segment)
//! cache/<dataset>/grids/<px>px_<mpp>/<id>.json        (patch)
//! bags/<dataset>/patch_finetuned_<mpp>mpp/<id>.*      (features)
//! checkpoints/*.safetensors                           (train-*)
//! reports/predictions/<dataset>/<name>.jsonl          (predict)
//! reports/{eval,train,ablation,maps,bench,config}/
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::aggregation::{
    mil_predict, mil_predict_rounds, read_predictions, softmax, vote_predict, write_predictions, Method, MilHead, PredictionRecord,
    SlidePrediction,
};
use crate::backbone::{PatchModel, TrainingStage};
use crate::benchmark::{time_pipeline, write_reports, BenchMethod, BenchSetup, ThroughputReport};
use crate::config::RunConfig;
use crate::error::{Error, IoContext, Result};
use crate::evaluation::{compare_fold_scores, evaluate, evaluate_external, mean_std, upsert_summary, EvalReport, FoldComparison, SummaryRow};
use crate::features::{extract_features, load_patch, round_indices, sample_indices, Budget, ExtractOptions, FeatureBag};
use crate::image::RgbImage;
use crate::interpretability::{attention_overlay, gradcam_thumbnail, vote_map};
use crate::manifest::Manifest;
use crate::nn;
use crate::parallel;
use crate::seed::{derive, hash_str};
use crate::segmentation::{apply_override, segment_tissue, TissueMask};
use crate::slide_io::{extract_thumbnail, open_slide, tessellate, PatchGrid, Resolution, Thumbnail};
use crate::synthdata::{generate_corpus_with_workers, make_benchmark_slide, CorpusConfig};
use crate::taxonomy::{ClassSet, StainClass};
use crate::thumbnail_classifier::{thumbnail_predict, ThumbnailModel};
use crate::training::{
    make_splits, train_mil_head, train_patch_model, train_thumbnail_model, BagSample, LoopOutcome, MilOptions, PatchSample, SplitPlan,
    TrainRecipe,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dataset {
    /// The labelled corpus with holdout and folds.
    Main,
    /// H&E-only slides from another source, used for testing only.
    External,
}

impl Dataset {
    pub fn as_str(self) -> &'static str {
        match self {
            Dataset::Main => "main",
            Dataset::External => "external",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "main" => Ok(Dataset::Main),
            "external" => Ok(Dataset::External),
            _ => Err(Error::Argument(format!("unknown dataset `{s}` (main, external)"))),
        }
    }
}

/// Which model produces slide predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictMethod {
    Thumbnail,
    Mil(Budget),
    Voting(Budget),
    FixationThumbnail,
    FixationMil,
}

impl PredictMethod {
    pub fn name(self) -> String {
        match self {
            PredictMethod::Thumbnail => "thumbnail".into(),
            PredictMethod::Mil(b) => format!("mil_{}", b.tag()),
            PredictMethod::Voting(b) => format!("voting_{}", b.tag()),
            PredictMethod::FixationThumbnail => "fixation_thumbnail".into(),
            PredictMethod::FixationMil => "fixation_mil".into(),
        }
    }

    /// `thumbnail`, `mil`, `voting`, `fixation-thumbnail`, `fixation-mil`.
    pub fn parse(method: &str, budget: Budget) -> Result<Self> {
        Ok(match method {
            "thumbnail" => PredictMethod::Thumbnail,
            "mil" => PredictMethod::Mil(budget),
            "voting" => PredictMethod::Voting(budget),
            "fixation-thumbnail" | "fixation_thumbnail" => PredictMethod::FixationThumbnail,
            "fixation-mil" | "fixation_mil" => PredictMethod::FixationMil,
            _ => {
                return Err(Error::Argument(format!(
                    "unknown method `{method}` (thumbnail, mil, voting, fixation-thumbnail, fixation-mil)"
                )))
            }
        })
    }

    fn is_fixation(self) -> bool {
        matches!(self, PredictMethod::FixationThumbnail | PredictMethod::FixationMil)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalSet {
    Fine,
    Coarse,
    External,
    Fixation,
}

impl EvalSet {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "fine" => EvalSet::Fine,
            "coarse" => EvalSet::Coarse,
            "external" => EvalSet::External,
            "fixation" => EvalSet::Fixation,
            _ => return Err(Error::Argument(format!("unknown evaluation set `{s}` (fine, coarse, external, fixation)"))),
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EvalSet::Fine => "fine",
            EvalSet::Coarse => "coarse",
            EvalSet::External => "external",
            EvalSet::Fixation => "fixation",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FixationMethod {
    Thumbnail,
    Mil,
}

/// Magnification and thumbnail size a model or prediction belongs to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Variant {
    pub mpp: f64,
    pub resolution: Resolution,
}

/// Result of an evaluation: the report plus per-round spread when the
/// predictions average sampled rounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub report: EvalReport,
    pub round_macro_f1: Option<Vec<f64>>,
}

impl EvalOutcome {
    pub fn round_stats(&self) -> Option<(f64, f64)> {
        self.round_macro_f1.as_ref().map(|v| mean_std(v))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldScores {
    pub fold: usize,
    pub method: String,
    pub macro_f1: f64,
    /// Std over sampling rounds for k budgets.
    pub round_std: Option<f64>,
    pub n_slides: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetAblation {
    pub folds: Vec<FoldScores>,
    /// Mean and std over folds, per method.
    pub summary: BTreeMap<String, (f64, f64)>,
    pub mil_minus_voting_all: FoldComparison,
    pub mil_minus_voting_k: FoldComparison,
    pub mil_all_minus_k: FoldComparison,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: String,
    pub macro_f1: f64,
    pub weighted_f1: f64,
    pub coarse_macro_f1: f64,
    pub n_slides: usize,
}

pub struct Pipeline {
    pub cfg: RunConfig,
    pub force: bool,
}

fn mpp_tag(mpp: f64) -> String {
    format!("{mpp:.2}mpp")
}

fn stage_missing(what: &str, path: &Path, run: &str) -> Error {
    Error::Stage(format!("{what} missing at {}; run `stainqc {run}` first", path.display()))
}

impl Pipeline {
    pub fn new(cfg: RunConfig, force: bool) -> Result<Self> {
        cfg.validate()?;
        Ok(Pipeline { cfg, force })
    }

    fn workers(&self) -> usize {
        self.cfg.workers()
    }

    pub fn default_variant(&self) -> Variant {
        Variant {
            mpp: self.cfg.patch.mpp,
            resolution: self.cfg.thumbnail.resolution,
        }
    }

    pub fn data_dir(&self, d: Dataset) -> PathBuf {
        self.cfg.paths.data.join(d.as_str())
    }

    pub fn manifest_path(&self, d: Dataset) -> PathBuf {
        self.data_dir(d).join("manifest.csv")
    }

    pub fn manifest(&self, d: Dataset) -> Result<Manifest> {
        let p = self.manifest_path(d);
        if !p.exists() {
            return Err(stage_missing("slide manifest", &p, "synth"));
        }
        Manifest::load(&p)
    }

    pub fn splits_path(&self) -> PathBuf {
        self.data_dir(Dataset::Main).join("splits.json")
    }

    fn cache(&self, d: Dataset) -> PathBuf {
        self.cfg.paths.cache.join(d.as_str())
    }

    pub fn thumb_stem(&self, d: Dataset, id: &str) -> PathBuf {
        self.cache(d).join("thumbs").join(id)
    }

    pub fn mask_stem(&self, d: Dataset, id: &str) -> PathBuf {
        self.cache(d).join("masks").join(id)
    }

    pub fn grid_dir(&self, d: Dataset, mpp: f64) -> PathBuf {
        self.cache(d).join("grids").join(format!("{}px_{}", self.cfg.patch.size_px, mpp_tag(mpp)))
    }

    pub fn bag_dir(&self, d: Dataset, mpp: f64) -> PathBuf {
        self.cfg.paths.bags.join(d.as_str()).join(format!("patch_finetuned_{}", mpp_tag(mpp)))
    }

    pub fn patch_ckpt(&self, mpp: f64) -> PathBuf {
        self.cfg.paths.checkpoints.join(format!("patch_finetuned_{}.safetensors", mpp_tag(mpp)))
    }

    pub fn mil_ckpt(&self, budget: Budget, mpp: f64) -> PathBuf {
        self.cfg.paths.checkpoints.join(format!("mil_{}_{}.safetensors", budget.tag(), mpp_tag(mpp)))
    }

    pub fn thumb_ckpt(&self, res: Resolution) -> PathBuf {
        self.cfg.paths.checkpoints.join(format!("thumbnail_finetuned_{res}.safetensors"))
    }

    pub fn fixation_ckpt(&self, m: FixationMethod) -> PathBuf {
        let name = match m {
            FixationMethod::Thumbnail => "fixation_thumbnail",
            FixationMethod::Mil => "fixation_mil",
        };
        self.cfg.paths.checkpoints.join(format!("{name}.safetensors"))
    }

    pub fn predictions_path(&self, d: Dataset, name: &str) -> PathBuf {
        self.cfg.paths.reports.join("predictions").join(d.as_str()).join(format!("{name}.jsonl"))
    }

    fn train_log(&self, ckpt: &Path) -> PathBuf {
        let stem = ckpt.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        self.cfg.paths.reports.join("train").join(format!("{stem}.jsonl"))
    }

    /// Writes the resolved config used by `command`.
    pub fn snapshot(&self, command: &str) -> Result<PathBuf> {
        let p = self.cfg.paths.reports.join("config").join(format!("{command}.toml"));
        self.cfg.save(&p)?;
        Ok(p)
    }

    // ---- data preparation ----

    /// Generates the main corpus and the external H&E set.
    pub fn synth(&self) -> Result<(Manifest, Manifest)> {
        let c = &self.cfg.corpus;
        let classes = c.class_list()?;
        let base = CorpusConfig {
            seed: c.seed,
            base_mpp: c.base_mpp,
            long_side: c.long_side,
            aspect: c.aspect,
            portrait_frac: c.portrait_frac,
            ..CorpusConfig::uniform(&classes, c.per_class, c.seed)
        };
        let ext_classes: Vec<StainClass> = classes.iter().copied().filter(|c| matches!(c, StainClass::HeFfpe | StainClass::HeFs)).collect();
        let external = CorpusConfig {
            n_per_class: ext_classes.iter().map(|k| (*k, c.external_per_class)).collect(),
            seed: c.external_seed,
            ..base.clone()
        };
        let mut out = Vec::new();
        for (d, cc) in [(Dataset::Main, base), (Dataset::External, external)] {
            let mp = self.manifest_path(d);
            if mp.exists() && !self.force {
                log::info!("{} exists; skipping generation", mp.display());
                out.push(Manifest::load(&mp)?);
                continue;
            }
            let m = generate_corpus_with_workers(&cc, &self.data_dir(d), self.force, self.workers())?;
            log::info!("generated {} {} slides", m.len(), d.as_str());
            out.push(m);
        }
        let ext = out.pop().expect("two datasets");
        Ok((out.pop().expect("two datasets"), ext))
    }

    /// Loads the split plan, creating it on first use.
    pub fn splits(&self) -> Result<SplitPlan> {
        let p = self.splits_path();
        if p.exists() && !self.force {
            return SplitPlan::load(&p);
        }
        let m = self.manifest(Dataset::Main)?;
        let plan = make_splits(&m, self.cfg.seed, self.cfg.splits.holdout_frac, self.cfg.splits.folds)?;
        plan.save(&p)?;
        Ok(plan)
    }

    fn ids(m: &Manifest) -> Vec<String> {
        m.entries.iter().map(|e| e.slide_id.clone()).collect()
    }

    /// Caches a thumbnail at the cache resolution for every slide.
    pub fn thumbs(&self, d: Dataset) -> Result<usize> {
        let m = self.manifest(d)?;
        let target = self.cfg.thumbnail.cache;
        let done = parallel::map(&m.entries, self.workers(), |e| {
            let stem = self.thumb_stem(d, &e.slide_id);
            if stem.with_extension("json").exists() && !self.force {
                return Ok(0);
            }
            let slide = open_slide(&m.slide_path(e))?;
            extract_thumbnail(&slide, target)?.save(&stem)?;
            Ok(1)
        })?;
        Ok(done.iter().sum())
    }

    pub fn load_thumb(&self, d: Dataset, id: &str) -> Result<Thumbnail> {
        let stem = self.thumb_stem(d, id);
        if !stem.with_extension("json").exists() {
            return Err(stage_missing("cached thumbnail", &stem.with_extension("png"), "thumbs"));
        }
        Thumbnail::load(&stem)
    }

    /// Segments tissue on the cached thumbnails. A reviewed mask at
    /// `data/<dataset>/mask_overrides/<id>.png` replaces the automatic one.
    pub fn segment(&self, d: Dataset) -> Result<usize> {
        let m = self.manifest(d)?;
        let overrides = self.data_dir(d).join("mask_overrides");
        let done = parallel::map(&m.entries, self.workers(), |e| {
            let stem = self.mask_stem(d, &e.slide_id);
            if stem.with_extension("json").exists() && !self.force {
                return Ok(0);
            }
            let thumb = self.load_thumb(d, &e.slide_id)?;
            let mut mask = segment_tissue(&thumb, &self.cfg.segmentation);
            let ov = overrides.join(format!("{}.png", e.slide_id));
            if ov.exists() {
                mask = apply_override(&mask, &ov)?;
            }
            mask.to_slide(&thumb).save(&stem)?;
            Ok(1)
        })?;
        Ok(done.iter().sum())
    }

    /// Tessellates tissue into patch grids at `mpp`.
    pub fn patch(&self, d: Dataset, mpp: f64) -> Result<usize> {
        let m = self.manifest(d)?;
        let dir = self.grid_dir(d, mpp);
        let done = parallel::map(&m.entries, self.workers(), |e| {
            let p = dir.join(format!("{}.json", e.slide_id));
            if p.exists() && !self.force {
                return Ok(0);
            }
            let stem = self.mask_stem(d, &e.slide_id);
            if !stem.with_extension("json").exists() {
                return Err(stage_missing("tissue mask", &stem.with_extension("png"), "segment"));
            }
            let mask = TissueMask::load(&stem)?;
            let slide = open_slide(&m.slide_path(e))?;
            let grid = tessellate(&slide, &mask, self.cfg.patch.size_px, mpp, self.cfg.patch.coverage)?;
            if grid.blank {
                log::warn!("{}: no tissue patches at {}", e.slide_id, mpp_tag(mpp));
            }
            grid.save(&p)?;
            Ok(1)
        })?;
        Ok(done.iter().sum())
    }

    pub fn load_grid(&self, d: Dataset, id: &str, mpp: f64) -> Result<PatchGrid> {
        let p = self.grid_dir(d, mpp).join(format!("{id}.json"));
        if !p.exists() {
            return Err(stage_missing("patch grid", &p, &format!("patch --mpp {mpp}")));
        }
        PatchGrid::load(&p)
    }

    fn load_patch_model(&self, mpp: f64) -> Result<PatchModel> {
        let p = self.patch_ckpt(mpp);
        if !p.exists() {
            return Err(stage_missing("patch-level checkpoint", &p, &format!("train-patch --mpp {mpp}")));
        }
        PatchModel::load(&p, DType::F32)
    }

    /// Encodes every tissue patch with the fine-tuned patch encoder.
    pub fn features(&self, d: Dataset, mpp: f64) -> Result<usize> {
        let m = self.manifest(d)?;
        let model = self.load_patch_model(mpp)?;
        let dir = self.bag_dir(d, mpp);
        let opts = ExtractOptions {
            budget: Budget::All,
            seed: self.cfg.seed,
            batch_size: self.cfg.patch.encode_batch,
            norm: self.cfg.normalization,
            class_set: ClassSet::fine(),
        };
        let mut n = 0;
        for e in &m.entries {
            if crate::features::bag_paths(&dir, &e.slide_id).1.exists() && !self.force {
                continue;
            }
            let grid = self.load_grid(d, &e.slide_id, mpp)?;
            let slide = open_slide(&m.slide_path(e))?;
            extract_features(&e.slide_id, &slide, &grid, &model, &opts)?.save(&dir)?;
            n += 1;
        }
        Ok(n)
    }

    pub fn load_bag(&self, d: Dataset, id: &str, mpp: f64) -> Result<FeatureBag> {
        let dir = self.bag_dir(d, mpp);
        if !crate::features::bag_paths(&dir, id).1.exists() {
            return Err(stage_missing("feature bag", &dir.join(id), &format!("features --mpp {mpp}")));
        }
        FeatureBag::load(&dir, id)
    }

    // ---- training ----

    fn label_index(m: &Manifest, set: &ClassSet, id: &str) -> Result<usize> {
        set.project_index(m.label(id)?)
    }

    fn patch_pool(&self, m: &Manifest, ids: &[String], mpp: f64, set: &ClassSet) -> Result<Vec<PatchSample>> {
        let per = self.cfg.patch.patches_per_slide;
        let input = self.cfg.patch.input_px;
        let slides: Vec<(usize, &String)> = ids.iter().enumerate().collect();
        let parts = parallel::map(&slides, self.workers(), |(si, id)| {
            let grid = self.load_grid(Dataset::Main, id, mpp)?;
            if grid.is_empty() {
                return Ok(Vec::new());
            }
            let label = Self::label_index(m, set, id)?;
            let e = m.get(id).ok_or_else(|| Error::Manifest(format!("unknown slide `{id}`")))?;
            let slide = open_slide(&m.slide_path(e))?;
            let idx = if per == 0 {
                (0..grid.len()).collect()
            } else {
                sample_indices(grid.len(), per, derive(self.cfg.seed, &[0x9a7c, hash_str(id)]))
            };
            idx.iter()
                .map(|&i| {
                    Ok(PatchSample {
                        image: load_patch(&slide, &grid, grid.coords[i], input)?,
                        label,
                        slide: *si,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })?;
        Ok(parts.into_iter().flatten().collect())
    }

    fn train_val_ids(&self, plan: &SplitPlan, keep: impl Fn(&str) -> bool) -> Result<(Vec<String>, Vec<String>)> {
        let train = plan.train_ids(self.cfg.splits.val_fold)?.into_iter().filter(|i| keep(i)).collect();
        let val = plan.fold(self.cfg.splits.val_fold)?.iter().filter(|i| keep(i)).cloned().collect();
        Ok((train, val))
    }

    /// Fine-tunes backbone and linear head on patches at `mpp`.
    pub fn train_patch(&self, mpp: f64) -> Result<Option<LoopOutcome>> {
        let ckpt = self.patch_ckpt(mpp);
        if ckpt.exists() && !self.force {
            log::info!("{} exists; skipping", ckpt.display());
            return Ok(None);
        }
        let m = self.manifest(Dataset::Main)?;
        let plan = self.splits()?;
        let set = ClassSet::fine();
        let (train_ids, val_ids) = self.train_val_ids(&plan, |_| true)?;
        let train = self.patch_pool(&m, &train_ids, mpp, &set)?;
        let val = self.patch_pool(&m, &val_ids, mpp, &set)?;
        if train.is_empty() {
            return Err(Error::Stage(format!("no training patches at {}", mpp_tag(mpp))));
        }
        log::info!("patch training at {}: {} train / {} val patches", mpp_tag(mpp), train.len(), val.len());
        let mut model = PatchModel::new(self.cfg.backbone, self.cfg.patch.input_px, mpp, set, DType::F32, derive(self.cfg.seed, &[0x9a7]))?;
        let out = train_patch_model(&mut model, &train, &val, &self.cfg.train.patch, derive(self.cfg.seed, &[0x9a8]), &self.cfg.normalization, Some(&self.train_log(&ckpt)))?;
        model.save(&ckpt)?;
        Ok(Some(out))
    }

    fn bag_samples(&self, d: Dataset, m: &Manifest, ids: &[String], mpp: f64, set: &ClassSet) -> Result<Vec<BagSample>> {
        let mut out = Vec::new();
        for id in ids {
            let bag = self.load_bag(d, id, mpp)?;
            if bag.is_empty() {
                log::warn!("{id}: empty bag left out of MIL training");
                continue;
            }
            out.push(BagSample::new(bag, Self::label_index(m, set, id)?, DType::F32)?);
        }
        Ok(out)
    }

    fn new_mil_head(&self, mpp: f64, set: ClassSet, seed_tag: u64) -> Result<MilHead> {
        let pm = self.load_patch_model(mpp)?;
        let d_in = pm.encoder.spec.feature_dim(crate::backbone::EncodeMode::PatchFeatures);
        MilHead::new(d_in, self.cfg.mil, set, pm.encoder.spec, pm.encoder.grid, DType::F32, derive(self.cfg.seed, &[0x411, seed_tag]))
    }

    fn mil_opts(&self, budget: Budget) -> MilOptions {
        MilOptions {
            budget,
            freeze_k: self.cfg.budget.freeze_k,
        }
    }

    /// Trains the gated-attention head on frozen features.
    pub fn train_mil(&self, budget: Budget, mpp: f64) -> Result<Option<LoopOutcome>> {
        let ckpt = self.mil_ckpt(budget, mpp);
        if ckpt.exists() && !self.force {
            log::info!("{} exists; skipping", ckpt.display());
            return Ok(None);
        }
        let m = self.manifest(Dataset::Main)?;
        let plan = self.splits()?;
        let set = ClassSet::fine();
        let (train_ids, val_ids) = self.train_val_ids(&plan, |_| true)?;
        let train = self.bag_samples(Dataset::Main, &m, &train_ids, mpp, &set)?;
        let val = self.bag_samples(Dataset::Main, &m, &val_ids, mpp, &set)?;
        let mut head = self.new_mil_head(mpp, set, 0)?;
        let out = train_mil_head(&mut head, &train, &val, &self.cfg.train.mil, self.mil_opts(budget), derive(self.cfg.seed, &[0x412]), Some(&self.train_log(&ckpt)))?;
        head.save(&ckpt)?;
        Ok(Some(out))
    }

    fn thumb_images(&self, ids: &[String], res: Resolution, m: &Manifest, set: &ClassSet) -> Result<Vec<(RgbImage, usize)>> {
        parallel::map(ids, self.workers(), |id| {
            let t = self.load_thumb(Dataset::Main, id)?.resize_to(res)?;
            Ok((t.pixels, Self::label_index(m, set, id)?))
        })
    }

    /// Two-step thumbnail training: starts from the patch-level checkpoint
    /// at the configured initial magnification.
    pub fn train_thumb(&self, res: Resolution) -> Result<Option<LoopOutcome>> {
        let ckpt = self.thumb_ckpt(res);
        if ckpt.exists() && !self.force {
            log::info!("{} exists; skipping", ckpt.display());
            return Ok(None);
        }
        let init_mpp = self.cfg.thumbnail.init_patch_mpp;
        let patch = self.load_patch_model(init_mpp)?;
        if patch.stage != TrainingStage::PatchFinetuned {
            return Err(Error::Stage(format!("{} is not a fine-tuned patch model", self.patch_ckpt(init_mpp).display())));
        }
        let m = self.manifest(Dataset::Main)?;
        let plan = self.splits()?;
        let set = ClassSet::fine();
        let (train_ids, val_ids) = self.train_val_ids(&plan, |_| true)?;
        let train = self.thumb_images(&train_ids, res, &m, &set)?;
        let val = self.thumb_images(&val_ids, res, &m, &set)?;
        let mut model = ThumbnailModel::from_patch_model(&patch, self.cfg.backbone, res, set, self.cfg.thumbnail.head_dropout, derive(self.cfg.seed, &[0x7b0]))?;
        let out = train_thumbnail_model(&mut model, &train, &val, &self.cfg.train.thumbnail, derive(self.cfg.seed, &[0x7b1]), &self.cfg.normalization, Some(&self.train_log(&ckpt)))?;
        model.save(&ckpt)?;
        Ok(Some(out))
    }

    fn is_he(m: &Manifest, id: &str) -> bool {
        matches!(m.label(id), Ok(StainClass::HeFfpe | StainClass::HeFs))
    }

    /// Binary FFPE vs frozen-section training on the H&E slides. The
    /// thumbnail variant starts from a freshly initialised backbone; the
    /// MIL variant reuses the patch-level bags.
    pub fn train_fixation(&self, method: FixationMethod) -> Result<Option<LoopOutcome>> {
        let ckpt = self.fixation_ckpt(method);
        if ckpt.exists() && !self.force {
            log::info!("{} exists; skipping", ckpt.display());
            return Ok(None);
        }
        let m = self.manifest(Dataset::Main)?;
        let plan = self.splits()?;
        let set = ClassSet::fixation_binary();
        let (train_ids, val_ids) = self.train_val_ids(&plan, |id| Self::is_he(&m, id))?;
        if train_ids.is_empty() {
            return Err(Error::Stage("no H&E slides in the training folds".into()));
        }
        let out = match method {
            FixationMethod::Thumbnail => {
                let res = self.cfg.thumbnail.resolution;
                let train = self.thumb_images(&train_ids, res, &m, &set)?;
                let val = self.thumb_images(&val_ids, res, &m, &set)?;
                let mut model = ThumbnailModel::new(self.cfg.backbone, res, set, self.cfg.thumbnail.head_dropout, DType::F32, derive(self.cfg.seed, &[0xf1c0]))?;
                let out = train_thumbnail_model(&mut model, &train, &val, &self.cfg.train.thumbnail, derive(self.cfg.seed, &[0xf1c1]), &self.cfg.normalization, Some(&self.train_log(&ckpt)))?;
                model.stage = TrainingStage::BinaryFixation;
                model.save(&ckpt)?;
                out
            }
            FixationMethod::Mil => {
                let mpp = self.cfg.patch.mpp;
                let train = self.bag_samples(Dataset::Main, &m, &train_ids, mpp, &set)?;
                let val = self.bag_samples(Dataset::Main, &m, &val_ids, mpp, &set)?;
                let mut head = self.new_mil_head(mpp, set, 0xf1)?;
                let out = train_mil_head(&mut head, &train, &val, &self.cfg.train.mil, self.mil_opts(Budget::All), derive(self.cfg.seed, &[0xf1c2]), Some(&self.train_log(&ckpt)))?;
                head.stage = TrainingStage::BinaryFixation;
                head.save(&ckpt)?;
                out
            }
        };
        Ok(Some(out))
    }

    // ---- inference ----

    /// Slides a method is scored on: the holdout of the main corpus, or all
    /// of the external set. Fixation methods only see H&E slides.
    pub fn target_ids(&self, d: Dataset, method: PredictMethod) -> Result<Vec<String>> {
        let m = self.manifest(d)?;
        let mut ids: Vec<String> = match d {
            Dataset::Main => self.splits()?.holdout_ids().into_iter().collect(),
            Dataset::External => Self::ids(&m),
        };
        if method.is_fixation() {
            ids.retain(|id| Self::is_he(&m, id));
        }
        ids.sort();
        Ok(ids)
    }

    fn slide_seed(&self, id: &str) -> u64 {
        derive(self.cfg.seed, &[0x9e0d, hash_str(id)])
    }

    fn patch_probs(model: &PatchModel, bag: &FeatureBag) -> Result<Vec<Vec<f64>>> {
        let logits = model.logits_from_features(&bag.to_tensor(model.store.dtype())?)?;
        Ok(nn::to_rows(&logits)?.iter().map(|r| softmax(r)).collect())
    }

    fn round_bags(&self, bag: &FeatureBag, k: usize) -> Result<Vec<FeatureBag>> {
        let subsets = round_indices(bag.len(), k, self.cfg.budget.rounds, self.slide_seed(&bag.slide_id))?;
        Ok(subsets.iter().map(|s| bag.subset(s, Budget::K(k))).collect())
    }

    fn predict_bag(&self, method: PredictMethod, bag: &FeatureBag, head: Option<&MilHead>, patch: Option<&PatchModel>) -> Result<SlidePrediction> {
        match method {
            PredictMethod::Mil(Budget::All) | PredictMethod::FixationMil => mil_predict(bag, head.expect("MIL head loaded")),
            PredictMethod::Mil(Budget::K(k)) => mil_predict_rounds(&self.round_bags(bag, k)?, head.expect("MIL head loaded")),
            PredictMethod::Voting(b) => {
                let model = patch.expect("patch model loaded");
                let probs = Self::patch_probs(model, bag)?;
                let rounds = match b {
                    Budget::All => None,
                    Budget::K(k) => Some(round_indices(bag.len(), k, self.cfg.budget.rounds, self.slide_seed(&bag.slide_id))?),
                };
                vote_predict(&bag.slide_id, &probs, rounds.as_deref(), &model.class_set)
            }
            _ => unreachable!("bag methods only"),
        }
    }

    /// Predicts `ids` with models of `variant`; bag-based methods abstain
    /// on slides without tissue patches.
    pub fn predict_ids(&self, method: PredictMethod, d: Dataset, ids: &[String], variant: Variant, head_override: Option<&MilHead>) -> Result<Vec<PredictionRecord>> {
        let mut records = Vec::with_capacity(ids.len());
        match method {
            PredictMethod::Thumbnail | PredictMethod::FixationThumbnail => {
                let ckpt = match method {
                    PredictMethod::Thumbnail => self.thumb_ckpt(variant.resolution),
                    _ => self.fixation_ckpt(FixationMethod::Thumbnail),
                };
                if !ckpt.exists() {
                    let run = if method == PredictMethod::Thumbnail { "train-thumb" } else { "train-fixation --method thumbnail" };
                    return Err(stage_missing("thumbnail checkpoint", &ckpt, run));
                }
                let model = ThumbnailModel::load(&ckpt, DType::F32)?;
                for id in ids {
                    let t = self.load_thumb(d, id)?.resize_to(model.resolution)?;
                    let mut p = thumbnail_predict(id, &t, &model, &self.cfg.normalization)?;
                    p.method = Method::Thumbnail;
                    records.push(PredictionRecord::from_prediction(&p, &model.class_set));
                }
            }
            _ => {
                let loaded_head;
                let head = match (method, head_override) {
                    (PredictMethod::Voting(_), _) => None,
                    (_, Some(h)) => Some(h),
                    (PredictMethod::FixationMil, None) => {
                        let p = self.fixation_ckpt(FixationMethod::Mil);
                        if !p.exists() {
                            return Err(stage_missing("fixation MIL checkpoint", &p, "train-fixation --method mil"));
                        }
                        loaded_head = MilHead::load(&p, DType::F32)?;
                        Some(&loaded_head)
                    }
                    (_, None) => {
                        let p = self.mil_ckpt(Budget::All, variant.mpp);
                        let p = match method {
                            PredictMethod::Mil(b) if self.mil_ckpt(b, variant.mpp).exists() => self.mil_ckpt(b, variant.mpp),
                            _ => p,
                        };
                        if !p.exists() {
                            return Err(stage_missing("MIL checkpoint", &p, "train-mil"));
                        }
                        loaded_head = MilHead::load(&p, DType::F32)?;
                        Some(&loaded_head)
                    }
                };
                let patch = match method {
                    PredictMethod::Voting(_) => Some(self.load_patch_model(variant.mpp)?),
                    _ => None,
                };
                let set = head.map(|h| h.class_set.clone()).or_else(|| patch.as_ref().map(|p| p.class_set.clone())).expect("a model");
                let m_name = match method {
                    PredictMethod::Voting(_) => Method::Voting,
                    _ => Method::Mil,
                };
                for id in ids {
                    let bag = self.load_bag(d, id, variant.mpp)?;
                    if bag.is_empty() {
                        records.push(PredictionRecord::abstain(id, m_name, set.name(), "no tissue patches"));
                        continue;
                    }
                    let p = self.predict_bag(method, &bag, head, patch.as_ref())?;
                    records.push(PredictionRecord::from_prediction(&p, &set));
                }
            }
        }
        Ok(records)
    }

    /// Writes `predictions/<dataset>/<name>.jsonl` for the configured models.
    pub fn predict(&self, method: PredictMethod, d: Dataset) -> Result<PathBuf> {
        let path = self.predictions_path(d, &method.name());
        if path.exists() && !self.force {
            log::info!("{} exists; skipping", path.display());
            return Ok(path);
        }
        let ids = self.target_ids(d, method)?;
        let records = self.predict_ids(method, d, &ids, self.default_variant(), None)?;
        write_predictions(&path, &records)?;
        Ok(path)
    }

    fn score(records: &[PredictionRecord], m: &Manifest, set: EvalSet) -> Result<EvalReport> {
        match set {
            EvalSet::Fine => evaluate(records, m, &ClassSet::fine()),
            EvalSet::Coarse => evaluate(records, m, &ClassSet::coarse()),
            EvalSet::External => evaluate_external(records, m),
            EvalSet::Fixation => evaluate(records, m, &ClassSet::fixation_binary()),
        }
    }

    /// Scores records, plus one score per sampling round when present.
    pub fn score_records(records: &[PredictionRecord], m: &Manifest, set: EvalSet) -> Result<EvalOutcome> {
        let report = Self::score(records, m, set)?;
        let rounds = records.iter().filter_map(|r| r.round_probs.as_ref().map(|v| v.len())).min();
        let round_macro_f1 = match rounds {
            Some(n) if n > 0 => Some(
                (0..n)
                    .map(|i| {
                        let per: Vec<PredictionRecord> = records
                            .iter()
                            .map(|r| {
                                let mut c = r.clone();
                                if let Some(rp) = &r.round_probs {
                                    c.probs = Some(rp[i].clone());
                                }
                                c.round_probs = None;
                                c
                            })
                            .collect();
                        Ok(Self::score(&per, m, set)?.macro_f1)
                    })
                    .collect::<Result<Vec<f64>>>()?,
            ),
            _ => None,
        };
        Ok(EvalOutcome { report, round_macro_f1 })
    }

    /// Evaluates a predictions file and updates the summary table.
    pub fn evaluate(&self, set: EvalSet, name: &str, d: Dataset) -> Result<EvalOutcome> {
        let p = self.predictions_path(d, name);
        if !p.exists() {
            return Err(stage_missing("predictions", &p, "predict"));
        }
        let records = read_predictions(&p)?;
        let m = self.manifest(d)?;
        let out = Self::score_records(&records, &m, set)?;
        let dir = self.cfg.paths.reports.join("eval");
        let stem = format!("{}_{}_{}", d.as_str(), name, set.as_str());
        out.report.save_json(&dir.join(format!("{stem}.json")))?;
        if let Some(r) = &out.round_macro_f1 {
            let (mean, std) = mean_std(r);
            let rp = dir.join(format!("{stem}_rounds.json"));
            std::fs::write(&rp, serde_json::to_vec_pretty(&serde_json::json!({"round_macro_f1": r, "mean": mean, "std": std}))?).at(&rp)?;
        }
        out.report.render_confusion(24).save_png(&dir.join(format!("{stem}_confusion.png")))?;
        let method = match d {
            Dataset::Main => name.to_string(),
            Dataset::External => format!("external/{name}"),
        };
        upsert_summary(
            &dir.join("summary.csv"),
            SummaryRow {
                method,
                class_set: out.report.class_set.as_str().into(),
                f1: out.report.macro_f1,
                weighted_f1: out.report.weighted_f1,
                auroc: out.report.auroc,
                f1_round_std: out.round_stats().map(|s| s.1),
                n_slides: out.report.n_slides,
            },
        )?;
        Ok(out)
    }

    // ---- ablations ----

    fn write_ablation(&self, name: &str, rows: &[AblationRow]) -> Result<PathBuf> {
        let dir = self.cfg.paths.reports.join("ablation");
        std::fs::create_dir_all(&dir).at(&dir)?;
        let p = dir.join(format!("{name}.csv"));
        let mut w = csv::Writer::from_path(&p).map_err(|e| Error::Io {
            path: p.clone(),
            source: e.into(),
        })?;
        for r in rows {
            w.serialize(r).map_err(|e| Error::Io {
                path: p.clone(),
                source: e.into(),
            })?;
        }
        w.flush().at(&p)?;
        let labels: Vec<String> = rows.iter().map(|r| r.setting.clone()).collect();
        crate::plot::line_chart(
            &dir.join(format!("{name}.png")),
            &labels,
            &[rows.iter().map(|r| r.macro_f1).collect(), rows.iter().map(|r| r.coarse_macro_f1).collect()],
        )?;
        Ok(p)
    }

    fn ablation_row(&self, setting: String, records: &[PredictionRecord]) -> Result<AblationRow> {
        let m = self.manifest(Dataset::Main)?;
        let fine = Self::score(records, &m, EvalSet::Fine)?;
        let coarse = Self::score(records, &m, EvalSet::Coarse)?;
        Ok(AblationRow {
            setting,
            macro_f1: fine.macro_f1,
            weighted_f1: fine.weighted_f1,
            coarse_macro_f1: coarse.macro_f1,
            n_slides: fine.n_slides,
        })
    }

    /// MIL (k = all) macro F1 on the holdout for each patch magnification.
    pub fn ablate_magnification(&self) -> Result<Vec<AblationRow>> {
        let mut rows = Vec::new();
        let res = self.cfg.thumbnail.resolution;
        for &mpp in &self.cfg.ablation.magnifications {
            log::info!("magnification ablation at {}", mpp_tag(mpp));
            self.patch(Dataset::Main, mpp)?;
            self.train_patch(mpp)?;
            self.features(Dataset::Main, mpp)?;
            self.train_mil(Budget::All, mpp)?;
            let method = PredictMethod::Mil(Budget::All);
            let ids = self.target_ids(Dataset::Main, method)?;
            let recs = self.predict_ids(method, Dataset::Main, &ids, Variant { mpp, resolution: res }, None)?;
            write_predictions(&self.predictions_path(Dataset::Main, &format!("mil_all_{}", mpp_tag(mpp))), &recs)?;
            rows.push(self.ablation_row(format!("{mpp:.2}"), &recs)?);
        }
        self.write_ablation("magnification", &rows)?;
        Ok(rows)
    }

    /// Thumbnail-model macro F1 on the holdout for each input resolution.
    pub fn ablate_resolution(&self) -> Result<Vec<AblationRow>> {
        let mut rows = Vec::new();
        let mpp = self.cfg.patch.mpp;
        for &res in &self.cfg.ablation.resolutions {
            log::info!("resolution ablation at {res}");
            self.train_thumb(res)?;
            let ids = self.target_ids(Dataset::Main, PredictMethod::Thumbnail)?;
            let recs = self.predict_ids(PredictMethod::Thumbnail, Dataset::Main, &ids, Variant { mpp, resolution: res }, None)?;
            write_predictions(&self.predictions_path(Dataset::Main, &format!("thumbnail_{res}")), &recs)?;
            rows.push(self.ablation_row(format!("{}x{}", res.height, res.width), &recs)?);
        }
        self.write_ablation("resolution", &rows)?;
        Ok(rows)
    }

    /// Five-fold comparison of MIL and voting at k = all and k-budget. The
    /// patch encoder is the shared final one; MIL heads are retrained per
    /// fold on the other folds without early stopping.
    pub fn ablate_budget(&self) -> Result<BudgetAblation> {
        let m = self.manifest(Dataset::Main)?;
        let plan = self.splits()?;
        let mpp = self.cfg.patch.mpp;
        let set = ClassSet::fine();
        let k = Budget::K(self.cfg.budget.k);
        let variant = self.default_variant();
        let mut recipe: TrainRecipe = self.cfg.train.mil;
        recipe.early_stop.enabled = false;
        let mut folds = Vec::new();
        for f in 0..plan.folds.len() {
            let test_ids = plan.fold(f)?.to_vec();
            let train_ids = plan.train_ids(f)?;
            let train = self.bag_samples(Dataset::Main, &m, &train_ids, mpp, &set)?;
            for budget in [Budget::All, k] {
                let ckpt = self.cfg.paths.checkpoints.join("cv").join(format!("mil_{}_fold{f}.safetensors", budget.tag()));
                let head = if ckpt.exists() && !self.force {
                    MilHead::load(&ckpt, DType::F32)?
                } else {
                    let mut head = self.new_mil_head(mpp, set.clone(), 0xc0 + f as u64)?;
                    train_mil_head(&mut head, &train, &[], &recipe, self.mil_opts(budget), derive(self.cfg.seed, &[0xc1, f as u64]), Some(&self.train_log(&ckpt)))?;
                    head.save(&ckpt)?;
                    head
                };
                for method in [PredictMethod::Mil(budget), PredictMethod::Voting(budget)] {
                    let head = matches!(method, PredictMethod::Mil(_)).then_some(&head);
                    let recs = self.predict_ids(method, Dataset::Main, &test_ids, variant, head)?;
                    let out = Self::score_records(&recs, &m, EvalSet::Fine)?;
                    let (f1, std) = match out.round_stats() {
                        Some((mean, std)) => (mean, Some(std)),
                        None => (out.report.macro_f1, None),
                    };
                    folds.push(FoldScores {
                        fold: f,
                        method: method.name(),
                        macro_f1: f1,
                        round_std: std,
                        n_slides: out.report.n_slides,
                    });
                }
            }
        }
        let per = |name: &str| -> Vec<f64> { folds.iter().filter(|s| s.method == name).map(|s| s.macro_f1).collect() };
        let names = [PredictMethod::Mil(Budget::All), PredictMethod::Mil(k), PredictMethod::Voting(Budget::All), PredictMethod::Voting(k)].map(|m| m.name());
        let summary = names.iter().map(|n| (n.clone(), mean_std(&per(n)))).collect();
        let out = BudgetAblation {
            mil_minus_voting_all: compare_fold_scores(&per(&names[0]), &per(&names[2]))?,
            mil_minus_voting_k: compare_fold_scores(&per(&names[1]), &per(&names[3]))?,
            mil_all_minus_k: compare_fold_scores(&per(&names[0]), &per(&names[1]))?,
            folds,
            summary,
        };
        let dir = self.cfg.paths.reports.join("ablation");
        std::fs::create_dir_all(&dir).at(&dir)?;
        let p = dir.join("budget.json");
        std::fs::write(&p, serde_json::to_vec_pretty(&out)?).at(&p)?;
        let p = dir.join("budget.csv");
        let mut w = csv::Writer::from_path(&p).map_err(|e| Error::Io {
            path: p.clone(),
            source: e.into(),
        })?;
        for s in &out.folds {
            w.serialize(s).map_err(|e| Error::Io {
                path: p.clone(),
                source: e.into(),
            })?;
        }
        w.flush().at(&p)?;
        Ok(out)
    }

    // ---- maps and benchmark ----

    /// Grad-CAM, attention and vote maps for one slide under `maps/<id>/`.
    pub fn maps(&self, d: Dataset, id: &str) -> Result<PathBuf> {
        let dir = self.cfg.paths.reports.join("maps").join(id);
        let alpha = self.cfg.maps.alpha;
        let thumb = self.load_thumb(d, id)?;
        let res = self.cfg.thumbnail.resolution;
        let tp = self.thumb_ckpt(res);
        if !tp.exists() {
            return Err(stage_missing("thumbnail checkpoint", &tp, "train-thumb"));
        }
        let tm = ThumbnailModel::load(&tp, DType::F32)?;
        gradcam_thumbnail(&tm, &thumb.resize_to(res)?, None, &self.cfg.normalization)?.write(&dir, alpha)?;
        let mpp = self.cfg.patch.mpp;
        let bag = self.load_bag(d, id, mpp)?;
        if bag.is_empty() {
            log::warn!("{id}: no tissue patches; attention and vote maps skipped");
            return Ok(dir);
        }
        let hp = self.mil_ckpt(Budget::All, mpp);
        if !hp.exists() {
            return Err(stage_missing("MIL checkpoint", &hp, "train-mil --budget all"));
        }
        let head = MilHead::load(&hp, DType::F32)?;
        let pred = mil_predict(&bag, &head)?;
        attention_overlay(&bag, &pred, &thumb, &head.class_set)?.write(&dir, alpha)?;
        let pm = self.load_patch_model(mpp)?;
        let votes = Self::patch_probs(&pm, &bag)?;
        vote_map(&votes, &bag, &thumb, &pm.class_set)?.write(&dir, alpha)?;
        Ok(dir)
    }

    /// Builds (once) the benchmark slide for the configured patch geometry.
    pub fn bench_slide(&self) -> Result<PathBuf> {
        let b = &self.cfg.bench;
        let p = self.cfg.paths.cache.join("bench").join(format!("bench_{}_{}px.tiff", b.target_patches, self.cfg.patch.size_px));
        if p.exists() && !self.force {
            return Ok(p);
        }
        make_benchmark_slide(b.target_patches, self.cfg.patch.size_px, self.cfg.patch.mpp, &p, self.cfg.seed)
    }

    /// Times the requested methods with the trained checkpoints.
    pub fn bench(&self, methods: &[BenchMethod], repetitions: usize) -> Result<Vec<ThroughputReport>> {
        let slide = self.bench_slide()?;
        let needs_mil = methods.iter().any(|m| *m != BenchMethod::Thumbnail);
        let thumb = if methods.contains(&BenchMethod::Thumbnail) {
            let p = self.thumb_ckpt(self.cfg.thumbnail.resolution);
            if !p.exists() {
                return Err(stage_missing("thumbnail checkpoint", &p, "train-thumb"));
            }
            Some(ThumbnailModel::load(&p, DType::F32)?)
        } else {
            None
        };
        let (patch, head) = if needs_mil {
            let hp = self.mil_ckpt(Budget::All, self.cfg.patch.mpp);
            if !hp.exists() {
                return Err(stage_missing("MIL checkpoint", &hp, "train-mil --budget all"));
            }
            (Some(self.load_patch_model(self.cfg.patch.mpp)?), Some(MilHead::load(&hp, DType::F32)?))
        } else {
            (None, None)
        };
        let setup = BenchSetup {
            thumbnail: thumb.as_ref(),
            patch: patch.as_ref(),
            mil: head.as_ref(),
            mask_resolution: self.cfg.bench.mask_resolution,
            segment: self.cfg.segmentation,
            patch_size_px: self.cfg.patch.size_px,
            target_mpp: self.cfg.patch.mpp,
            coverage: self.cfg.patch.coverage,
            batch_size: self.cfg.patch.encode_batch,
            k: self.cfg.budget.k,
            seed: self.cfg.seed,
            norm: self.cfg.normalization,
        };
        let reports = methods.iter().map(|m| time_pipeline(*m, &slide, &setup, repetitions)).collect::<Result<Vec<_>>>()?;
        write_reports(&self.cfg.paths.reports.join("bench"), &reports)?;
        Ok(reports)
    }

    /// Evaluations run by `evaluate` without a name: everything predicted.
    pub fn available_predictions(&self, d: Dataset) -> Result<Vec<String>> {
        let dir = self.cfg.paths.reports.join("predictions").join(d.as_str());
        let mut out = Vec::new();
        if let Ok(rd) = std::fs::read_dir(&dir) {
            for e in rd.flatten() {
                let p = e.path();
                if p.extension().is_some_and(|x| x == "jsonl") {
                    if let Some(s) = p.file_stem() {
                        out.push(s.to_string_lossy().into_owned());
                    }
                }
            }
        }
        out.sort();
        Ok(out)
    }
}
