//! Per-slide wall-clock throughput of the two pipelines, from opening the
//! slide to the slide-level prediction. Model construction stays outside the
//! timed region.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::aggregation::{mil_predict, MilHead, SlidePrediction};
use crate::backbone::{EncodeMode, Normalization, PatchModel};
use crate::error::{Error, IoContext, Result};
use crate::features::{encode_coords, sample_indices, Budget, FeatureBag};
use crate::segmentation::{segment_tissue, SegmentParams};
use crate::slide_io::{extract_thumbnail, open_slide, tessellate, Resolution};
use crate::thumbnail_classifier::{thumbnail_predict, ThumbnailModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchMethod {
    Thumbnail,
    MilK20,
    MilAll,
}

impl BenchMethod {
    pub const ALL: [BenchMethod; 3] = [BenchMethod::Thumbnail, BenchMethod::MilK20, BenchMethod::MilAll];

    pub fn as_str(self) -> &'static str {
        match self {
            BenchMethod::Thumbnail => "thumbnail",
            BenchMethod::MilK20 => "mil_k20",
            BenchMethod::MilAll => "mil_all",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Argument(format!("unknown benchmark method `{s}` (thumbnail, mil_k20, mil_all)")))
    }

    pub fn included_stages(self) -> Vec<String> {
        let s: &[&str] = match self {
            BenchMethod::Thumbnail => &["slide_open", "thumbnail_extraction", "preprocess", "forward"],
            _ => &["slide_open", "tissue_segmentation", "coordinate_extraction", "patch_encoding", "aggregation"],
        };
        s.iter().map(|v| v.to_string()).collect()
    }

    pub fn excluded_stages(self) -> Vec<String> {
        ["model_construction", "checkpoint_loading", "visualization"].iter().map(|v| v.to_string()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputReport {
    pub method: BenchMethod,
    pub repetitions: usize,
    pub per_rep_seconds: Vec<f64>,
    pub mean_slides_per_second: f64,
    pub included_stages: Vec<String>,
    pub excluded: Vec<String>,
    /// Patches encoded per repetition, for the MIL methods.
    pub patches_encoded: Option<usize>,
    pub environment: BTreeMap<String, serde_json::Value>,
}

impl ThroughputReport {
    pub fn from_samples(method: BenchMethod, per_rep_seconds: Vec<f64>, patches_encoded: Option<usize>) -> Self {
        let total: f64 = per_rep_seconds.iter().sum();
        let n = per_rep_seconds.len();
        ThroughputReport {
            method,
            repetitions: n,
            mean_slides_per_second: if total > 0.0 { n as f64 / total } else { f64::INFINITY },
            per_rep_seconds,
            included_stages: method.included_stages(),
            excluded: method.excluded_stages(),
            patches_encoded,
            environment: environment(),
        }
    }

    pub fn mean_seconds(&self) -> f64 {
        self.per_rep_seconds.iter().sum::<f64>() / self.repetitions.max(1) as f64
    }
}

fn environment() -> BTreeMap<String, serde_json::Value> {
    let mut env = BTreeMap::new();
    env.insert("os".into(), std::env::consts::OS.into());
    env.insert("arch".into(), std::env::consts::ARCH.into());
    let cpus = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    env.insert("available_parallelism".into(), cpus.into());
    env.insert("device".into(), "cpu".into());
    env.insert("mode".into(), "single_stream".into());
    env
}

/// Pre-loaded models and preprocessing settings for [`time_pipeline`].
pub struct BenchSetup<'a> {
    pub thumbnail: Option<&'a ThumbnailModel>,
    pub patch: Option<&'a PatchModel>,
    pub mil: Option<&'a MilHead>,
    /// Thumbnail size used for tissue segmentation.
    pub mask_resolution: Resolution,
    pub segment: SegmentParams,
    pub patch_size_px: u32,
    pub target_mpp: f64,
    pub coverage: f64,
    pub batch_size: usize,
    pub k: usize,
    pub seed: u64,
    pub norm: Normalization,
}

fn mil_models<'a>(setup: &BenchSetup<'a>) -> Result<(&'a PatchModel, &'a MilHead)> {
    let (Some(p), Some(m)) = (setup.patch, setup.mil) else {
        return Err(Error::Stage("MIL timing needs a patch encoder and a MIL head".into()));
    };
    let d = p.encoder.spec.feature_dim(EncodeMode::PatchFeatures);
    if m.d_in != d {
        return Err(Error::Stage(format!("MIL head expects {}-d features, patch encoder gives {d}", m.d_in)));
    }
    Ok((p, m))
}

/// One end-to-end prediction; returns the patch count for MIL methods.
pub fn run_once(method: BenchMethod, slide_path: &Path, setup: &BenchSetup) -> Result<(SlidePrediction, Option<usize>)> {
    match method {
        BenchMethod::Thumbnail => {
            let model = setup
                .thumbnail
                .ok_or_else(|| Error::Stage("thumbnail timing needs a thumbnail model".into()))?;
            let slide = open_slide(slide_path)?;
            let thumb = extract_thumbnail(&slide, model.resolution)?;
            Ok((thumbnail_predict("bench", &thumb, model, &setup.norm)?, None))
        }
        BenchMethod::MilK20 | BenchMethod::MilAll => {
            let (patch, head) = mil_models(setup)?;
            let slide = open_slide(slide_path)?;
            let thumb = extract_thumbnail(&slide, setup.mask_resolution)?;
            let mask = segment_tissue(&thumb, &setup.segment).to_slide(&thumb);
            let grid = tessellate(&slide, &mask, setup.patch_size_px, setup.target_mpp, setup.coverage)?;
            if grid.is_empty() {
                return Err(Error::EmptyBag(format!("benchmark slide {} has no tissue patches", slide_path.display())));
            }
            let (idx, budget) = match method {
                BenchMethod::MilK20 => (sample_indices(grid.len(), setup.k, setup.seed), Budget::K(setup.k)),
                _ => ((0..grid.len()).collect(), Budget::All),
            };
            let coords: Vec<(u32, u32)> = idx.iter().map(|&i| grid.coords[i]).collect();
            let features = encode_coords(&slide, &grid, patch, &coords, setup.batch_size, &setup.norm)?;
            let n = coords.len();
            let bag = FeatureBag {
                slide_id: "bench".into(),
                dim: features.len() / n,
                features,
                coords,
                target_mpp: grid.target_mpp,
                patch_size_px: grid.patch_size_px,
                backbone_stage: patch.stage.as_str().into(),
                budget,
                blank: false,
            };
            Ok((mil_predict(&bag, head)?, Some(n)))
        }
    }
}

/// Times `repetitions` end-to-end runs on one slide, single stream.
pub fn time_pipeline(method: BenchMethod, slide_path: &Path, setup: &BenchSetup, repetitions: usize) -> Result<ThroughputReport> {
    if repetitions == 0 {
        return Err(Error::Argument("repetitions must be positive".into()));
    }
    let mut secs = Vec::with_capacity(repetitions);
    let mut patches = None;
    for rep in 0..repetitions {
        let t0 = Instant::now();
        let (_, n) = run_once(method, slide_path, setup)?;
        secs.push(t0.elapsed().as_secs_f64());
        patches = n;
        log::info!("{} rep {}/{}: {:.3} s", method.as_str(), rep + 1, repetitions, secs[rep]);
    }
    Ok(ThroughputReport::from_samples(method, secs, patches))
}

/// Writes each report as `<dir>/<method>.json` and a `throughput.csv` table.
pub fn write_reports(dir: &Path, reports: &[ThroughputReport]) -> Result<()> {
    std::fs::create_dir_all(dir).at(dir)?;
    for r in reports {
        let p = dir.join(format!("{}.json", r.method.as_str()));
        std::fs::write(&p, serde_json::to_vec_pretty(r)?).at(&p)?;
    }
    let p = dir.join("throughput.csv");
    let mut w = csv::Writer::from_path(&p).map_err(|e| Error::Io {
        path: p.clone(),
        source: e.into(),
    })?;
    let io = |e: csv::Error| Error::Io {
        path: p.clone(),
        source: e.into(),
    };
    w.write_record(["method", "repetitions", "mean_seconds", "mean_slides_per_second", "patches_encoded"]).map_err(io)?;
    for r in reports {
        w.write_record([
            r.method.as_str().to_string(),
            r.repetitions.to_string(),
            format!("{:.6}", r.mean_seconds()),
            format!("{:.6}", r.mean_slides_per_second),
            r.patches_encoded.map(|n| n.to_string()).unwrap_or_default(),
        ])
        .map_err(io)?;
    }
    w.flush().at(&p)
}
