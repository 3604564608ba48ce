//! Slide-level explanation maps drawn over the thumbnail: Grad-CAM of the
//! thumbnail model, MIL attention, and per-patch vote classes.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, IndexOp, Var};
use serde::{Deserialize, Serialize};

use crate::aggregation::SlidePrediction;
use crate::backbone::{images_to_tensor, Normalization};
use crate::error::{Error, IoContext, Result};
use crate::features::FeatureBag;
use crate::image::{bilinear_resize, RgbImage};
use crate::nn::Ctx;
use crate::slide_io::Thumbnail;
use crate::taxonomy::{argmax, ClassSet};
use crate::thumbnail_classifier::ThumbnailModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapKind {
    Gradcam,
    Attention,
    Votes,
}

impl MapKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MapKind::Gradcam => "gradcam",
            MapKind::Attention => "attention",
            MapKind::Votes => "votes",
        }
    }
}

/// A scalar field over the thumbnail, max-normalised to [0, 1].
#[derive(Debug, Clone)]
pub struct HeatmapOverlay {
    pub kind: MapKind,
    pub base: RgbImage,
    /// Row-major, `base.width * base.height` values.
    pub heat: Vec<f32>,
    /// Grid the field was computed on before upsampling, as (rows, cols).
    pub source_grid: Option<(usize, usize)>,
    pub target_class: Option<String>,
    /// Fraction of patches per argmax class (vote maps).
    pub proportions: Option<BTreeMap<String, f64>>,
    /// Per-pixel class index into `classes`, vote maps only.
    pub pixel_classes: Option<Vec<Option<u8>>>,
    pub classes: Vec<String>,
    /// Sum of the field before max-normalisation.
    pub raw_mass: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct MapSidecar {
    kind: MapKind,
    target_class: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    proportions: Option<BTreeMap<String, f64>>,
    width: u32,
    height: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    source_grid: Option<(usize, usize)>,
    raw_mass: f64,
    alpha: f64,
}

/// Divides by the maximum; an all-zero field stays zero.
pub fn max_normalize(v: &mut [f32]) {
    let m = v.iter().cloned().fold(0f32, f32::max);
    if m > 0.0 {
        for x in v.iter_mut() {
            *x /= m;
        }
    }
}

/// Grad-CAM on the thumbnail model. The activations are the patch tokens
/// entering the last encoder block: the CLS output depends on them, unlike
/// the tokens leaving the final block. Channel weights are token-averaged
/// gradients of the target logit.
pub fn gradcam_thumbnail(model: &ThumbnailModel, thumb: &Thumbnail, target: Option<usize>, norm: &Normalization) -> Result<HeatmapOverlay> {
    model.check_input(thumb)?;
    if let Some(t) = target {
        if t >= model.class_set.len() {
            return Err(Error::InvalidLabel(format!("target {t} for {} classes", model.class_set.len())));
        }
    }
    let ctx = Ctx::eval();
    let enc = &model.encoder;
    let store = &model.store;
    let x = images_to_tensor(&[&thumb.pixels], norm, store.dtype())?;
    let (seq, grid) = enc.embed(store, &x, &ctx)?;
    let depth = enc.spec.depth;
    let seq = enc.run_blocks(store, seq, 0..depth.saturating_sub(1), &ctx)?;
    let act = Var::from_tensor(&seq.detach())?;
    let out = enc.run_blocks(store, act.as_tensor().clone(), depth.saturating_sub(1)..depth, &ctx)?;
    let out = enc.finish(store, &out, grid)?;
    let logits = model.head(&out.cls, &ctx)?;
    let probs: Vec<f64> = logits.i(0)?.to_dtype(DType::F64)?.to_vec1()?;
    let t = target.unwrap_or_else(|| argmax(&probs));
    let grads = logits.i((0, t))?.backward()?;
    let n = grid.0 * grid.1;
    let a = act.as_tensor().i(0)?.narrow(0, 1, n)?.to_dtype(DType::F64)?;
    let g = match grads.get(act.as_tensor()) {
        Some(g) => g.i(0)?.narrow(0, 1, n)?.to_dtype(DType::F64)?,
        None => a.zeros_like()?,
    };
    let w = g.mean_keepdim(0)?;
    let cam: Vec<f64> = a.broadcast_mul(&w)?.sum(1)?.relu()?.to_vec1()?;
    let cam: Vec<f32> = cam.iter().map(|&v| v as f32).collect();
    let (tw, th) = (thumb.pixels.width as usize, thumb.pixels.height as usize);
    let mut heat = bilinear_resize(&cam, grid.1, grid.0, tw, th);
    for v in heat.iter_mut() {
        *v = v.max(0.0);
    }
    let raw_mass = heat.iter().map(|&v| v as f64).sum();
    max_normalize(&mut heat);
    Ok(HeatmapOverlay {
        kind: MapKind::Gradcam,
        base: thumb.pixels.clone(),
        heat,
        source_grid: Some(grid),
        target_class: Some(model.class_set.classes()[t].clone()),
        proportions: None,
        pixel_classes: None,
        classes: model.class_set.classes().to_vec(),
        raw_mass,
    })
}

/// Thumbnail-space rectangle `(x0, y0, x1, y1)` of a level-0 patch.
pub fn patch_rect(thumb: &Thumbnail, coord: (u32, u32), footprint: f64) -> (f64, f64, f64, f64) {
    let (sw, sh) = (thumb.slide_dims.0 as f64, thumb.slide_dims.1 as f64);
    let pb = thumb.pad_box;
    let (x0, y0) = (coord.0 as f64, coord.1 as f64);
    let (x1, y1) = (x0 + footprint, y0 + footprint);
    // rotate90 sends (x, y) to (H - y, x).
    let (rx0, ry0, rx1, ry1, rw, rh) = if thumb.rotated {
        (sh - y1, x0, sh - y0, x1, sh, sw)
    } else {
        (x0, y0, x1, y1, sw, sh)
    };
    let sx = pb.width() as f64 / rw;
    let sy = pb.height() as f64 / rh;
    (
        pb.x0 as f64 + rx0 * sx,
        pb.y0 as f64 + ry0 * sy,
        pb.x0 as f64 + rx1 * sx,
        pb.y0 as f64 + ry1 * sy,
    )
}

/// Adds `value` spread over the rectangle by pixel overlap area, so the
/// rectangle contributes `value` in total when it lies inside the image.
fn splat(heat: &mut [f32], w: u32, h: u32, r: (f64, f64, f64, f64), value: f64) {
    let area = (r.2 - r.0) * (r.3 - r.1);
    if area <= 0.0 {
        return;
    }
    let xa = r.0.max(0.0).floor() as u32;
    let ya = r.1.max(0.0).floor() as u32;
    let xb = (r.2.ceil().max(0.0) as u32).min(w);
    let yb = (r.3.ceil().max(0.0) as u32).min(h);
    for y in ya..yb {
        let oy = (r.3.min(y as f64 + 1.0) - r.1.max(y as f64)).max(0.0);
        for x in xa..xb {
            let ox = (r.2.min(x as f64 + 1.0) - r.0.max(x as f64)).max(0.0);
            heat[(y * w + x) as usize] += (value * ox * oy / area) as f32;
        }
    }
}

fn footprint_in_level0(bag: &FeatureBag, thumb: &Thumbnail) -> f64 {
    // Thumbnail pixels per level-0 pixel, along the slide's x axis.
    let pb = thumb.pad_box;
    let along = if thumb.rotated { pb.height() } else { pb.width() } as f64;
    let scale = along / thumb.slide_dims.0 as f64;
    bag.patch_size_px as f64 * bag.target_mpp / thumb.effective_mpp / scale
}

/// Splats each patch's attention weight over its footprint in thumbnail
/// space. Before normalisation the field sums to the total attention.
pub fn attention_overlay(bag: &FeatureBag, prediction: &SlidePrediction, thumb: &Thumbnail, class_set: &ClassSet) -> Result<HeatmapOverlay> {
    let attn = prediction
        .attention
        .as_ref()
        .ok_or_else(|| Error::Argument(format!("prediction for {} carries no attention", prediction.slide_id)))?;
    if attn.len() != bag.len() {
        return Err(Error::Shape(format!("{} attention weights for {} patches", attn.len(), bag.len())));
    }
    let (w, h) = (thumb.pixels.width, thumb.pixels.height);
    let fp = footprint_in_level0(bag, thumb);
    let mut heat = vec![0f32; (w * h) as usize];
    for (c, a) in bag.coords.iter().zip(attn) {
        splat(&mut heat, w, h, patch_rect(thumb, *c, fp), *a);
    }
    let raw_mass = heat.iter().map(|&v| v as f64).sum();
    max_normalize(&mut heat);
    let target = class_set.argmax(&prediction.probs);
    Ok(HeatmapOverlay {
        kind: MapKind::Attention,
        base: thumb.pixels.clone(),
        heat,
        source_grid: None,
        target_class: Some(class_set.classes()[target].clone()),
        proportions: None,
        pixel_classes: None,
        classes: class_set.classes().to_vec(),
        raw_mass,
    })
}

/// Argmax class proportions over patches; classes with no patch are omitted.
pub fn vote_proportions(votes: &[Vec<f64>], class_set: &ClassSet) -> BTreeMap<String, f64> {
    let counts = crate::aggregation::argmax_counts(votes, class_set.len());
    counts
        .iter()
        .enumerate()
        .filter(|(_, &n)| n > 0)
        .map(|(i, &n)| (class_set.classes()[i].clone(), n as f64 / votes.len() as f64))
        .collect()
}

/// Colours each patch footprint by its argmax class.
pub fn vote_map(votes: &[Vec<f64>], bag: &FeatureBag, thumb: &Thumbnail, class_set: &ClassSet) -> Result<HeatmapOverlay> {
    if votes.len() != bag.len() {
        return Err(Error::Shape(format!("{} vote rows for {} patches", votes.len(), bag.len())));
    }
    if votes.iter().any(|v| v.len() != class_set.len()) {
        return Err(Error::Shape(format!("vote rows must have {} columns", class_set.len())));
    }
    let (w, h) = (thumb.pixels.width, thumb.pixels.height);
    let fp = footprint_in_level0(bag, thumb);
    let mut heat = vec![0f32; (w * h) as usize];
    let mut classes = vec![None; (w * h) as usize];
    for (c, v) in bag.coords.iter().zip(votes) {
        let r = patch_rect(thumb, *c, fp);
        let k = argmax(v) as u8;
        let xa = r.0.max(0.0).round() as u32;
        let ya = r.1.max(0.0).round() as u32;
        let xb = (r.2.max(0.0).round() as u32).min(w);
        let yb = (r.3.max(0.0).round() as u32).min(h);
        for y in ya..yb {
            for x in xa..xb {
                let i = (y * w + x) as usize;
                heat[i] = 1.0;
                classes[i] = Some(k);
            }
        }
    }
    let raw_mass = heat.iter().map(|&v| v as f64).sum();
    let proportions = vote_proportions(votes, class_set);
    let top = proportions
        .iter()
        .fold(None::<(&String, f64)>, |best, (k, &p)| match best {
            Some((_, bp)) if bp >= p => best,
            _ => Some((k, p)),
        })
        .map(|(k, _)| k.clone());
    Ok(HeatmapOverlay {
        kind: MapKind::Votes,
        base: thumb.pixels.clone(),
        heat,
        source_grid: None,
        target_class: top,
        proportions: Some(proportions),
        pixel_classes: Some(classes),
        classes: class_set.classes().to_vec(),
        raw_mass,
    })
}

const HEAT_STOPS: [(f32, [f32; 3]); 5] = [
    (0.0, [0.0, 0.0, 4.0]),
    (0.25, [87.0, 16.0, 110.0]),
    (0.5, [188.0, 55.0, 84.0]),
    (0.75, [249.0, 142.0, 9.0]),
    (1.0, [252.0, 255.0, 164.0]),
];

/// Dark-purple to pale-yellow ramp.
pub fn heat_color(v: f32) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0);
    for w in HEAT_STOPS.windows(2) {
        let ((a, ca), (b, cb)) = (w[0], w[1]);
        if v <= b {
            let t = (v - a) / (b - a);
            return [0, 1, 2].map(|i| (ca[i] + t * (cb[i] - ca[i])).round() as u8);
        }
    }
    [252, 255, 164]
}

const CLASS_COLORS: [[u8; 3]; 16] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [220, 190, 255],
    [170, 110, 40],
    [128, 0, 0],
    [128, 128, 0],
    [0, 0, 128],
];

pub fn class_color(i: usize) -> [u8; 3] {
    CLASS_COLORS[i % CLASS_COLORS.len()]
}

impl HeatmapOverlay {
    /// Blends the map over the thumbnail; pixels with zero heat keep the
    /// base colour, except for Grad-CAM which is drawn everywhere.
    pub fn render(&self, alpha: f64) -> RgbImage {
        let mut out = self.base.clone();
        let w = self.base.width;
        for y in 0..self.base.height {
            for x in 0..w {
                let i = (y * w + x) as usize;
                let h = self.heat[i];
                let color = match (&self.pixel_classes, self.kind) {
                    (Some(pc), _) => match pc[i] {
                        Some(k) => class_color(k as usize),
                        None => continue,
                    },
                    (None, MapKind::Gradcam) => heat_color(h),
                    (None, _) if h > 0.0 => heat_color(h),
                    _ => continue,
                };
                let b = self.base.get(x, y);
                let mix = [0, 1, 2].map(|c| ((1.0 - alpha) * b[c] as f64 + alpha * color[c] as f64).round() as u8);
                out.put(x, y, mix);
            }
        }
        out
    }

    /// Writes `<dir>/<kind>.png` and `<dir>/<kind>.json`.
    pub fn write(&self, dir: &Path, alpha: f64) -> Result<()> {
        std::fs::create_dir_all(dir).at(dir)?;
        self.render(alpha).save_png(&dir.join(format!("{}.png", self.kind.as_str())))?;
        let side = MapSidecar {
            kind: self.kind,
            target_class: self.target_class.clone(),
            proportions: self.proportions.clone(),
            width: self.base.width,
            height: self.base.height,
            source_grid: self.source_grid,
            raw_mass: self.raw_mass,
            alpha,
        };
        let p = dir.join(format!("{}.json", self.kind.as_str()));
        std::fs::write(&p, serde_json::to_vec_pretty(&side)?).at(&p)
    }

    /// Share of heat mass on pixels where `inside` holds.
    pub fn mass_fraction(&self, inside: impl Fn(u32, u32) -> bool) -> f64 {
        let total: f64 = self.heat.iter().map(|&v| v as f64).sum();
        if total == 0.0 {
            return 0.0;
        }
        let w = self.base.width;
        let mut acc = 0.0;
        for (i, &v) in self.heat.iter().enumerate() {
            if inside(i as u32 % w, i as u32 / w) {
                acc += v as f64;
            }
        }
        acc / total
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregation::Method;
    use crate::backbone::{BackboneSpec, DropRates};
    use crate::features::Budget;
    use crate::slide_io::{PadBox, Resolution};
    use proptest::prelude::*;

    fn thumb(w: u32, h: u32, rotated: bool, slide_dims: (u32, u32)) -> Thumbnail {
        Thumbnail {
            pixels: RgbImage::filled(w, h, [255, 255, 255]),
            effective_mpp: 1.0,
            rotated,
            pad_box: PadBox { x0: 0, y0: 0, x1: w, y1: h },
            slide_dims,
        }
    }

    fn bag(coords: Vec<(u32, u32)>, patch: u32) -> FeatureBag {
        let n = coords.len();
        FeatureBag {
            slide_id: "s".into(),
            features: vec![0.0; n * 2],
            dim: 2,
            coords,
            target_mpp: 1.0,
            patch_size_px: patch,
            backbone_stage: "patch_finetuned".into(),
            budget: Budget::All,
            blank: false,
        }
    }

    fn pred(attn: Vec<f64>) -> SlidePrediction {
        SlidePrediction {
            slide_id: "s".into(),
            method: Method::Mil,
            class_set: ClassSet::fixation_binary().name(),
            probs: vec![0.3, 0.7],
            attention: Some(attn),
            patch_votes: None,
            round_probs: None,
        }
    }

    fn spec() -> BackboneSpec {
        BackboneSpec {
            token_patch_size: 4,
            embed_dim: 8,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
            drop_rates: DropRates::ZERO,
        }
    }

    #[test]
    fn gradcam_on_white_is_finite_and_normalised() {
        let m = ThumbnailModel::new(spec(), Resolution::new(16, 8), ClassSet::fine(), 0.0, DType::F32, 3).unwrap();
        let t = thumb(16, 8, false, (16, 8));
        let o = gradcam_thumbnail(&m, &t, None, &Normalization::default()).unwrap();
        assert_eq!(o.source_grid, Some((2, 4)));
        assert_eq!(o.heat.len(), 16 * 8);
        assert!(o.heat.iter().all(|v| v.is_finite() && *v >= 0.0 && *v <= 1.0));
        let m = o.heat.iter().cloned().fold(0f32, f32::max);
        assert!(m == 0.0 || (m - 1.0).abs() < 1e-6);
    }

    #[test]
    fn gradcam_textured_input_has_unit_max() {
        let m = ThumbnailModel::new(spec(), Resolution::new(16, 8), ClassSet::fine(), 0.0, DType::F32, 3).unwrap();
        let mut t = thumb(16, 8, false, (16, 8));
        for y in 0..8 {
            for x in 0..16 {
                t.pixels.put(x, y, [(x * 15) as u8, (y * 30) as u8, ((x * y) % 255) as u8]);
            }
        }
        let o = gradcam_thumbnail(&m, &t, Some(3), &Normalization::default()).unwrap();
        assert_eq!(o.target_class.as_deref(), Some(ClassSet::fine().classes()[3].as_str()));
        let mx = o.heat.iter().cloned().fold(0f32, f32::max);
        assert!((mx - 1.0).abs() < 1e-6);
        assert!(gradcam_thumbnail(&m, &t, Some(99), &Normalization::default()).is_err());
    }

    #[test]
    fn singleton_bag_heats_one_footprint() {
        let mut t = thumb(20, 10, false, (40, 20));
        t.effective_mpp = 2.0;
        let b = bag(vec![(8, 4)], 4);
        let o = attention_overlay(&b, &pred(vec![1.0]), &t, &ClassSet::fixation_binary()).unwrap();
        assert!((o.raw_mass - 1.0).abs() < 1e-5);
        // Level-0 (8, 4) with side 4 at half scale is thumbnail pixels [4, 6) x [2, 4).
        for y in 0..10 {
            for x in 0..20 {
                let hot = (4..6).contains(&x) && (2..4).contains(&y);
                let v = o.heat[(y * 20 + x) as usize];
                assert_eq!(v > 0.0, hot, "({x},{y})");
                if hot {
                    assert!((v - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn rotated_rect_mapping() {
        // Portrait 20x40 slide shown as a 40x20 landscape thumbnail.
        let t = thumb(40, 20, true, (20, 40));
        let r = patch_rect(&t, (0, 0), 4.0);
        assert_eq!(r, (36.0, 0.0, 40.0, 4.0));
    }

    #[test]
    fn uniform_attention_is_flat_over_tissue() {
        let t = thumb(16, 16, false, (16, 16));
        let coords = vec![(0, 0), (4, 0), (8, 8), (12, 12)];
        let b = bag(coords, 4);
        let o = attention_overlay(&b, &pred(vec![0.25; 4]), &t, &ClassSet::fixation_binary()).unwrap();
        assert!((o.raw_mass - 1.0).abs() < 1e-5);
        let hot: Vec<f32> = o.heat.iter().cloned().filter(|v| *v > 0.0).collect();
        assert_eq!(hot.len(), 64);
        assert!(hot.iter().all(|v| (v - 1.0).abs() < 1e-6));
    }

    #[test]
    fn vote_counting() {
        let set = ClassSet::fine();
        let one_hot = |k: usize| {
            let mut v = vec![0.0; set.len()];
            v[k] = 1.0;
            v
        };
        let votes = vec![one_hot(0), one_hot(0), one_hot(1), one_hot(2)];
        let p = vote_proportions(&votes, &set);
        assert_eq!(p.len(), 3);
        assert_eq!(p[&set.classes()[0]], 0.5);
        assert_eq!(p[&set.classes()[1]], 0.25);
        assert_eq!(p[&set.classes()[2]], 0.25);
        let p = vote_proportions(&[one_hot(5), one_hot(5)], &set);
        assert_eq!(p.into_iter().collect::<Vec<_>>(), vec![(set.classes()[5].clone(), 1.0)]);

        let t = thumb(16, 16, false, (16, 16));
        let b = bag(vec![(0, 0), (4, 0), (8, 8), (12, 12)], 4);
        let o = vote_map(&votes, &b, &t, &set).unwrap();
        let pc = o.pixel_classes.as_ref().unwrap();
        assert_eq!(pc[0], Some(0));
        assert_eq!(pc[(9 * 16 + 9) as usize], Some(1));
        assert_eq!(pc[(5 * 16 + 5) as usize], None);
        assert_eq!(o.target_class.as_deref(), Some(set.classes()[0].as_str()));
    }

    #[test]
    fn write_png_and_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let t = thumb(8, 8, false, (8, 8));
        let b = bag(vec![(0, 0)], 4);
        let o = attention_overlay(&b, &pred(vec![1.0]), &t, &ClassSet::fixation_binary()).unwrap();
        o.write(dir.path(), 0.5).unwrap();
        let img = RgbImage::load_png(&dir.path().join("attention.png")).unwrap();
        assert_ne!(img.get(0, 0), [255, 255, 255]);
        assert_eq!(img.get(7, 7), [255, 255, 255]);
        let side: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("attention.json")).unwrap()).unwrap();
        assert_eq!(side["kind"], "attention");
        assert_eq!(side["target_class"], ClassSet::fixation_binary().classes()[1].as_str());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn splat_mass_equals_attention(raw in proptest::collection::vec(0.01f64..1.0, 1..12), rotated in any::<bool>()) {
            // 12x6 cells of side 5 on a 60x30 slide, thumbnail at 0.5x.
            let n = raw.len();
            let s: f64 = raw.iter().sum();
            let attn: Vec<f64> = raw.iter().map(|v| v / s).collect();
            let coords: Vec<(u32, u32)> = (0..n as u32).map(|i| ((i % 12) * 5, (i / 12) * 5)).collect();
            let t = if rotated { thumb(15, 30, true, (60, 30)) } else { thumb(30, 15, false, (60, 30)) };
            let mut b = bag(coords, 5);
            b.target_mpp = 2.0;
            b.patch_size_px = 5;
            let mut t = t;
            t.effective_mpp = 2.0 * 2.0;
            let o = attention_overlay(&b, &pred(attn), &t, &ClassSet::fixation_binary()).unwrap();
            prop_assert!((o.raw_mass - 1.0).abs() < 1e-4, "mass {}", o.raw_mass);
            prop_assert!(o.heat.iter().all(|v| *v >= 0.0 && *v <= 1.0 + 1e-6));
        }

        #[test]
        fn proportions_sum_to_one(votes in proptest::collection::vec(proptest::collection::vec(0.0f64..1.0, 5), 1..40)) {
            let set = ClassSet::coarse();
            let p = vote_proportions(&votes, &set);
            let s: f64 = p.values().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
            let counts = crate::aggregation::argmax_counts(&votes, 5);
            for (k, v) in &p {
                let i = set.index_of(k).unwrap();
                prop_assert!((v - counts[i] as f64 / votes.len() as f64).abs() < 1e-12);
            }
        }
    }
}
