//! Per-slide feature bags from the patch-level encoder.
//!
//! A bag stores one `2 x embed_dim` row per patch together with the patch's
//! level-0 corner. Bags persist as `<slide_id>.bin` (little-endian f32
//! features followed by i32 coordinate pairs) plus a `<slide_id>.json`
//! header.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::backbone::{images_to_tensor, Normalization, PatchModel, TrainingStage};
use crate::error::{Error, IoContext, Result};
use crate::image::RgbImage;
use crate::nn::Ctx;
use crate::slide_io::{read_patch, PatchGrid, SlidePyramid};
use crate::taxonomy::ClassSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Budget {
    All,
    K(usize),
}

impl Budget {
    /// `all` or a positive integer.
    pub fn parse(s: &str) -> Result<Budget> {
        if s == "all" {
            return Ok(Budget::All);
        }
        match s.parse::<usize>() {
            Ok(k) if k > 0 => Ok(Budget::K(k)),
            _ => Err(Error::Argument(format!("budget must be `all` or a positive integer, got `{s}`"))),
        }
    }

    pub fn tag(&self) -> String {
        match self {
            Budget::All => "all".into(),
            Budget::K(k) => format!("k{k}"),
        }
    }
}

impl std::fmt::Display for Budget {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Budget::All => f.write_str("all"),
            Budget::K(k) => write!(f, "{k}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BagHeader {
    pub slide_id: String,
    pub n: usize,
    pub dim: usize,
    pub target_mpp: f64,
    pub patch_size_px: u32,
    pub backbone_stage: String,
    pub budget: Budget,
    pub blank: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBag {
    pub slide_id: String,
    /// Row-major `n x dim`.
    pub features: Vec<f32>,
    pub dim: usize,
    pub coords: Vec<(u32, u32)>,
    pub target_mpp: f64,
    pub patch_size_px: u32,
    pub backbone_stage: String,
    pub budget: Budget,
    pub blank: bool,
}

impl FeatureBag {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn to_tensor(&self, dtype: candle_core::DType) -> Result<Tensor> {
        if self.is_empty() {
            return Err(Error::EmptyBag(self.slide_id.clone()));
        }
        Ok(Tensor::from_slice(&self.features, (self.len(), self.dim), &crate::nn::device())?.to_dtype(dtype)?)
    }

    /// Rows `indices` in the given order, as a bag with budget `budget`.
    pub fn subset(&self, indices: &[usize], budget: Budget) -> FeatureBag {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            features.extend_from_slice(self.row(i));
        }
        FeatureBag {
            slide_id: self.slide_id.clone(),
            features,
            dim: self.dim,
            coords: indices.iter().map(|&i| self.coords[i]).collect(),
            target_mpp: self.target_mpp,
            patch_size_px: self.patch_size_px,
            backbone_stage: self.backbone_stage.clone(),
            budget,
            blank: self.blank,
        }
    }

    pub fn header(&self) -> BagHeader {
        BagHeader {
            slide_id: self.slide_id.clone(),
            n: self.len(),
            dim: self.dim,
            target_mpp: self.target_mpp,
            patch_size_px: self.patch_size_px,
            backbone_stage: self.backbone_stage.clone(),
            budget: self.budget,
            blank: self.blank,
        }
    }

    /// Writes `<dir>/<slide_id>.bin` and `.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).at(dir)?;
        let mut bytes = Vec::with_capacity(self.features.len() * 4 + self.coords.len() * 8);
        for v in &self.features {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        for &(x, y) in &self.coords {
            bytes.extend_from_slice(&(x as i32).to_le_bytes());
            bytes.extend_from_slice(&(y as i32).to_le_bytes());
        }
        let (bin, json) = bag_paths(dir, &self.slide_id);
        std::fs::write(&bin, bytes).at(&bin)?;
        std::fs::write(&json, serde_json::to_vec_pretty(&self.header())?).at(&json)
    }

    pub fn load(dir: &Path, slide_id: &str) -> Result<FeatureBag> {
        let (bin, json) = bag_paths(dir, slide_id);
        let h: BagHeader = serde_json::from_slice(&std::fs::read(&json).at(&json)?)?;
        let bytes = std::fs::read(&bin).at(&bin)?;
        let nf = h.n * h.dim;
        if bytes.len() != nf * 4 + h.n * 8 {
            return Err(Error::Shape(format!(
                "{}: {} bytes, header promises {} rows of {}",
                bin.display(),
                bytes.len(),
                h.n,
                h.dim
            )));
        }
        let word = |i: usize| [bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]];
        let features = (0..nf).map(|i| f32::from_le_bytes(word(4 * i))).collect();
        let coords = (0..h.n)
            .map(|i| {
                let o = nf * 4 + i * 8;
                (i32::from_le_bytes(word(o)) as u32, i32::from_le_bytes(word(o + 4)) as u32)
            })
            .collect();
        Ok(FeatureBag {
            slide_id: h.slide_id,
            features,
            dim: h.dim,
            coords,
            target_mpp: h.target_mpp,
            patch_size_px: h.patch_size_px,
            backbone_stage: h.backbone_stage,
            budget: h.budget,
            blank: h.blank,
        })
    }
}

pub fn bag_paths(dir: &Path, slide_id: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{slide_id}.bin")), dir.join(format!("{slide_id}.json")))
}

/// Uniform sample of `k` of `n` indices without replacement, returned in
/// ascending order; all indices when `n <= k`.
pub fn sample_indices(n: usize, k: usize, seed: u64) -> Vec<usize> {
    if n <= k {
        return (0..n).collect();
    }
    let mut rng = crate::seed::rng(seed, &[0x5a3b1e]);
    let mut v = index::sample(&mut rng, n, k).into_vec();
    v.sort_unstable();
    v
}

/// Per-round seed for round `r`.
pub fn round_seed(seed: u64, round: usize) -> u64 {
    crate::seed::derive(seed, &[round as u64])
}

/// How patches are turned into encoder inputs.
#[derive(Debug, Clone)]
pub struct ExtractOptions {
    pub budget: Budget,
    pub seed: u64,
    pub batch_size: usize,
    pub norm: Normalization,
    /// The run's class set; the encoder must have been trained on it.
    pub class_set: ClassSet,
}

/// Reads the patch at `coord` and brings it to the encoder input size.
pub fn load_patch(slide: &SlidePyramid, grid: &PatchGrid, coord: (u32, u32), input_px: usize) -> Result<RgbImage> {
    let img = read_patch(slide, coord, grid.patch_size_px, grid.target_mpp)?;
    Ok(if img.width as usize == input_px {
        img
    } else {
        img.resize_area(input_px as u32, input_px as u32)
    })
}

/// Encoder features for the patches at `coords`, in order.
pub fn encode_coords(
    slide: &SlidePyramid,
    grid: &PatchGrid,
    model: &PatchModel,
    coords: &[(u32, u32)],
    batch_size: usize,
    norm: &Normalization,
) -> Result<Vec<f32>> {
    let mut out = Vec::with_capacity(coords.len() * model.encoder.spec.feature_dim(crate::backbone::EncodeMode::PatchFeatures));
    let ctx = Ctx::eval();
    for chunk in coords.chunks(batch_size.max(1)) {
        let imgs = chunk
            .iter()
            .map(|&c| load_patch(slide, grid, c, model.input_px))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&RgbImage> = imgs.iter().collect();
        let x = images_to_tensor(&refs, norm, model.store.dtype())?;
        let f = model.features(&x, &ctx)?.to_dtype(candle_core::DType::F32)?;
        out.extend(f.flatten_all()?.to_vec1::<f32>()?);
    }
    Ok(out)
}

fn check_model(model: &PatchModel, opts: &ExtractOptions) -> Result<()> {
    if model.stage != TrainingStage::PatchFinetuned {
        return Err(Error::Stage(format!(
            "feature extraction needs a patch_finetuned encoder, got {}",
            model.stage
        )));
    }
    if model.class_set != opts.class_set {
        return Err(Error::Config(format!(
            "encoder was trained on class set `{}` but the run uses `{}`",
            model.class_set.name(),
            opts.class_set.name()
        )));
    }
    Ok(())
}

pub fn extract_features(
    slide_id: &str,
    slide: &SlidePyramid,
    grid: &PatchGrid,
    model: &PatchModel,
    opts: &ExtractOptions,
) -> Result<FeatureBag> {
    check_model(model, opts)?;
    let idx: Vec<usize> = match opts.budget {
        Budget::All => (0..grid.len()).collect(),
        Budget::K(k) => sample_indices(grid.len(), k, opts.seed),
    };
    let coords: Vec<(u32, u32)> = idx.iter().map(|&i| grid.coords[i]).collect();
    let features = encode_coords(slide, grid, model, &coords, opts.batch_size, &opts.norm)?;
    Ok(FeatureBag {
        slide_id: slide_id.to_string(),
        dim: model.encoder.spec.feature_dim(crate::backbone::EncodeMode::PatchFeatures),
        features,
        coords,
        target_mpp: grid.target_mpp,
        patch_size_px: grid.patch_size_px,
        backbone_stage: model.stage.to_string(),
        budget: opts.budget,
        blank: grid.blank,
    })
}

/// Index subsets for `rounds` independent k-samples of an `n`-patch grid.
pub fn round_indices(n: usize, k: usize, rounds: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if rounds == 0 {
        return Err(Error::Argument("rounds must be at least 1".into()));
    }
    Ok((0..rounds).map(|r| sample_indices(n, k, round_seed(seed, r))).collect())
}

/// `rounds` k-sample bags; each distinct patch is encoded once.
pub fn resample_rounds(
    slide_id: &str,
    slide: &SlidePyramid,
    grid: &PatchGrid,
    model: &PatchModel,
    k: usize,
    rounds: usize,
    opts: &ExtractOptions,
) -> Result<Vec<FeatureBag>> {
    check_model(model, opts)?;
    let subsets = round_indices(grid.len(), k, rounds, opts.seed)?;
    let union: Vec<usize> = subsets.iter().flatten().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let coords: Vec<(u32, u32)> = union.iter().map(|&i| grid.coords[i]).collect();
    let features = encode_coords(slide, grid, model, &coords, opts.batch_size, &opts.norm)?;
    let pool = FeatureBag {
        slide_id: slide_id.to_string(),
        dim: model.encoder.spec.feature_dim(crate::backbone::EncodeMode::PatchFeatures),
        features,
        coords,
        target_mpp: grid.target_mpp,
        patch_size_px: grid.patch_size_px,
        backbone_stage: model.stage.to_string(),
        budget: Budget::All,
        blank: grid.blank,
    };
    let pos: std::collections::HashMap<usize, usize> = union.iter().enumerate().map(|(p, &i)| (i, p)).collect();
    Ok(subsets
        .iter()
        .map(|s| pool.subset(&s.iter().map(|i| pos[i]).collect::<Vec<_>>(), Budget::K(k)))
        .collect())
}
