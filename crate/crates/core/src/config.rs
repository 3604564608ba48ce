//! Run configuration: one TOML file shared by every stage. `Default` holds
//! the full-scale settings; [`RunConfig::desk`] shrinks sizes so the whole
//! pipeline runs on a laptop CPU.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::aggregation::MilDims;
use crate::backbone::{BackboneSpec, DropRates, Normalization};
use crate::error::{Error, IoContext, Result};
use crate::segmentation::SegmentParams;
use crate::slide_io::{Resolution, DEFAULT_COVERAGE};
use crate::taxonomy::StainClass;
use crate::training::{EarlyStopConfig, TrainRecipe};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub data: PathBuf,
    pub cache: PathBuf,
    pub bags: PathBuf,
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            data: "data".into(),
            cache: "cache".into(),
            bags: "bags".into(),
            checkpoints: "checkpoints".into(),
            reports: "reports".into(),
        }
    }
}

impl Paths {
    /// All paths rooted at `dir`.
    pub fn under(dir: &Path) -> Self {
        let d = Paths::default();
        Paths {
            data: dir.join(d.data),
            cache: dir.join(d.cache),
            bags: dir.join(d.bags),
            checkpoints: dir.join(d.checkpoints),
            reports: dir.join(d.reports),
        }
    }

    /// Resolves relative entries against `base`.
    pub fn resolved(&self, base: &Path) -> Self {
        let r = |p: &PathBuf| if p.is_absolute() { p.clone() } else { base.join(p) };
        Paths {
            data: r(&self.data),
            cache: r(&self.cache),
            bags: r(&self.bags),
            checkpoints: r(&self.checkpoints),
            reports: r(&self.reports),
        }
    }
}

/// Synthetic corpus settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSection {
    pub per_class: usize,
    /// Fine class ids to generate; empty means all sixteen.
    pub classes: Vec<String>,
    pub seed: u64,
    pub base_mpp: f64,
    pub long_side: (u32, u32),
    pub aspect: (f64, f64),
    pub portrait_frac: f64,
    /// H&E slides per fixation type in the external set.
    pub external_per_class: usize,
    pub external_seed: u64,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection {
            per_class: 60,
            classes: Vec::new(),
            seed: 7,
            base_mpp: 0.59,
            long_side: (896, 1152),
            aspect: (1.6, 2.2),
            portrait_frac: 0.25,
            external_per_class: 10,
            external_seed: 1007,
        }
    }
}

impl CorpusSection {
    pub fn class_list(&self) -> Result<Vec<StainClass>> {
        if self.classes.is_empty() {
            return Ok(StainClass::ALL.to_vec());
        }
        self.classes.iter().map(|c| StainClass::from_id(c)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatchSection {
    pub size_px: u32,
    pub mpp: f64,
    /// Encoder input side; patches are area-resized to it.
    pub input_px: usize,
    pub coverage: f64,
    /// Patches drawn per slide for patch-level training; 0 uses all.
    pub patches_per_slide: usize,
    pub encode_batch: usize,
}

impl Default for PatchSection {
    fn default() -> Self {
        PatchSection {
            size_px: 512,
            mpp: 0.59,
            input_px: 224,
            coverage: DEFAULT_COVERAGE,
            patches_per_slide: 0,
            encode_batch: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ThumbnailSection {
    pub resolution: Resolution,
    /// Size of the cached thumbnails everything else is resized from.
    pub cache: Resolution,
    /// Patch magnification of the checkpoint that initialises the model.
    pub init_patch_mpp: f64,
    pub head_dropout: f64,
}

impl Default for ThumbnailSection {
    fn default() -> Self {
        ThumbnailSection {
            resolution: Resolution::new(1792, 896),
            cache: Resolution::new(3584, 1792),
            init_patch_mpp: 4.57,
            head_dropout: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BudgetSection {
    pub k: usize,
    pub rounds: usize,
    /// Keep one k-subset per slide during MIL training.
    pub freeze_k: bool,
}

impl Default for BudgetSection {
    fn default() -> Self {
        BudgetSection {
            k: 20,
            rounds: 200,
            freeze_k: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSection {
    pub holdout_frac: f64,
    pub folds: usize,
    /// Fold used for validation when training final models.
    pub val_fold: usize,
}

impl Default for SplitSection {
    fn default() -> Self {
        SplitSection {
            holdout_frac: 0.2,
            folds: 5,
            val_fold: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub patch: TrainRecipe,
    pub mil: TrainRecipe,
    pub thumbnail: TrainRecipe,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            patch: TrainRecipe::patch(),
            mil: TrainRecipe::mil(),
            thumbnail: TrainRecipe::thumbnail(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationSection {
    pub magnifications: Vec<f64>,
    pub resolutions: Vec<Resolution>,
}

impl Default for AblationSection {
    fn default() -> Self {
        AblationSection {
            magnifications: vec![4.57, 2.28, 1.19, 0.59],
            resolutions: vec![
                Resolution::new(224, 224),
                Resolution::new(448, 224),
                Resolution::new(896, 448),
                Resolution::new(1792, 896),
                Resolution::new(2688, 1344),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MapsSection {
    pub alpha: f64,
}

impl Default for MapsSection {
    fn default() -> Self {
        MapsSection { alpha: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchSection {
    pub repetitions: usize,
    pub target_patches: u64,
    /// Thumbnail size used for tissue segmentation inside the MIL timing.
    pub mask_resolution: Resolution,
}

impl Default for BenchSection {
    fn default() -> Self {
        BenchSection {
            repetitions: 25,
            target_patches: 8246,
            mask_resolution: Resolution::new(3584, 1792),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads for per-slide stages; 0 uses every core.
    pub workers: usize,
    pub paths: Paths,
    pub corpus: CorpusSection,
    pub backbone: BackboneSpec,
    pub normalization: Normalization,
    pub patch: PatchSection,
    pub thumbnail: ThumbnailSection,
    pub mil: MilDims,
    pub budget: BudgetSection,
    pub splits: SplitSection,
    pub segmentation: SegmentParams,
    pub train: TrainSection,
    pub ablation: AblationSection,
    pub maps: MapsSection,
    pub bench: BenchSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            workers: 0,
            paths: Paths::default(),
            corpus: CorpusSection::default(),
            backbone: BackboneSpec::default(),
            normalization: Normalization::default(),
            patch: PatchSection::default(),
            thumbnail: ThumbnailSection::default(),
            mil: MilDims::default(),
            budget: BudgetSection::default(),
            splits: SplitSection::default(),
            segmentation: SegmentParams::default(),
            train: TrainSection::default(),
            ablation: AblationSection::default(),
            maps: MapsSection::default(),
            bench: BenchSection::default(),
        }
    }
}

impl RunConfig {
    /// Small sizes for CPU runs: 56 px patches, a 224x112 thumbnail and
    /// a sampled patch pool per slide. Learning rates are raised to match
    /// the randomly initialised backbone.
    pub fn desk() -> Self {
        let mut c = RunConfig::default();
        c.corpus.per_class = 30;
        c.corpus.external_per_class = 8;
        c.backbone = BackboneSpec {
            embed_dim: 64,
            depth: 2,
            heads: 4,
            ..BackboneSpec::default()
        };
        c.patch = PatchSection {
            size_px: 56,
            mpp: 0.59,
            input_px: 56,
            coverage: DEFAULT_COVERAGE,
            patches_per_slide: 24,
            encode_batch: 64,
        };
        c.thumbnail = ThumbnailSection {
            resolution: Resolution::new(224, 112),
            cache: Resolution::new(896, 448),
            init_patch_mpp: 2.36,
            head_dropout: 0.3,
        };
        c.mil = MilDims {
            d_emb: 64,
            attn_dim: 32,
            hidden: 32,
        };
        c.budget.rounds = 50;
        let drop = DropRates::uniform(0.1);
        c.train.patch = TrainRecipe {
            lr: 1e-3,
            batch_size: 64,
            max_epochs: 8,
            drop_rates: drop,
            // Flips swap the phase of the fine pixel pattern that separates
            // merged pairs in synthetic slides; the small backbone then
            // stalls near 0.85 slide F1.
            augment_flips: false,
            ..TrainRecipe::patch()
        };
        c.train.mil = TrainRecipe {
            lr: 1e-3,
            batch_size: 16,
            max_epochs: 20,
            ..TrainRecipe::mil()
        };
        // A few hundred slides: small batches, flips and a patient stop.
        c.train.thumbnail = TrainRecipe {
            lr: 2e-3,
            batch_size: 8,
            max_epochs: 40,
            drop_rates: drop,
            augment_flips: true,
            early_stop: EarlyStopConfig {
                patience: 10,
                ..EarlyStopConfig::default()
            },
            ..TrainRecipe::thumbnail()
        };
        c.ablation = AblationSection {
            magnifications: vec![2.36, 1.77, 1.18, 0.59],
            resolutions: vec![
                Resolution::new(56, 56),
                Resolution::new(112, 56),
                Resolution::new(168, 84),
                Resolution::new(224, 112),
            ],
        };
        c.bench.mask_resolution = Resolution::new(896, 448);
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        let p = self.backbone.token_patch_size;
        let r = self.thumbnail.resolution;
        if r.width as usize % p != 0 || r.height as usize % p != 0 || self.patch.input_px % p != 0 {
            return Err(Error::Config(format!(
                "thumbnail {r} and patch input {} must be multiples of the token patch size {p}",
                self.patch.input_px
            )));
        }
        for res in &self.ablation.resolutions {
            if res.width as usize % p != 0 || res.height as usize % p != 0 {
                return Err(Error::Config(format!("ablation resolution {res} is not a multiple of {p}")));
            }
        }
        if self.splits.val_fold >= self.splits.folds {
            return Err(Error::Config(format!("val_fold {} with {} folds", self.splits.val_fold, self.splits.folds)));
        }
        if self.budget.k == 0 || self.budget.rounds == 0 {
            return Err(Error::Config("budget k and rounds must be positive".into()));
        }
        self.corpus.class_list()?;
        for r in [&self.train.patch, &self.train.mil, &self.train.thumbnail] {
            r.validate()?;
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Loads a config file; relative paths inside resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        let mut c = Self::from_toml(&text)?;
        c.paths = c.paths.resolved(path.parent().unwrap_or(Path::new(".")));
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(p) = path.parent() {
            std::fs::create_dir_all(p).at(p)?;
        }
        std::fs::write(path, self.to_toml()?).at(path)
    }

    pub fn workers(&self) -> usize {
        if self.workers == 0 {
            crate::parallel::default_workers()
        } else {
            self.workers
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        for c in [RunConfig::default(), RunConfig::desk()] {
            c.validate().unwrap();
            let text = c.to_toml().unwrap();
            let back = RunConfig::from_toml(&text).unwrap();
            assert_eq!(back, c);
            assert_eq!(back.to_toml().unwrap(), text);
        }
    }

    #[test]
    fn full_scale_defaults() {
        let c = RunConfig::default();
        assert_eq!((c.patch.size_px, c.patch.mpp), (512, 0.59));
        assert_eq!(c.thumbnail.resolution, Resolution::new(1792, 896));
        assert_eq!((c.budget.k, c.budget.rounds), (20, 200));
        assert_eq!(c.train.patch.lr, 5e-5);
        assert_eq!(c.train.thumbnail.batch_size, 128);
        assert_eq!(c.train.mil.weight_decay, 5e-2);
        assert_eq!(c.train.patch.label_smoothing, 0.05);
        assert_eq!(c.train.patch.early_stop.patience, 5);
        let grid = c.backbone.grid_for(896, 1792).unwrap();
        assert_eq!(grid, (64, 128));
    }

    #[test]
    fn partial_file_and_bad_values() {
        let c = RunConfig::from_toml("seed = 3\n[patch]\nsize_px = 256\n").unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.patch.size_px, 256);
        assert_eq!(c.patch.mpp, 0.59);
        assert!(matches!(RunConfig::from_toml("[thumbnail]\nresolution = { width = 100, height = 56 }\n"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("bogus = [1"), Err(Error::Config(_))));
        assert!(RunConfig::from_toml("[corpus]\nclasses = [\"nope\"]\n").is_err());
    }
}
