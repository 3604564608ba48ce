//! Tissue/background segmentation on thumbnails.
//!
//! Saturation is thresholded with Otsu's method, cleaned with a morphological
//! close then open, and components below a minimum area are dropped. Reviewed
//! masks can replace the automatic result through [`apply_override`].

use std::collections::VecDeque;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::image::{Bitmap, RgbImage};
use crate::slide_io::Thumbnail;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSource {
    Auto,
    ManualOverride,
}

/// Boolean tissue raster at a stated resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct TissueMask {
    pub bitmap: Bitmap,
    pub mask_mpp: f64,
    pub source: MaskSource,
    /// No tissue found.
    pub blank: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentParams {
    pub close_radius: u32,
    pub open_radius: u32,
    /// Minimum component area as a fraction of the image.
    pub min_area_frac: f64,
    /// Saturation threshold floor, in [0, 1].
    pub min_threshold: f64,
}

impl Default for SegmentParams {
    fn default() -> Self {
        SegmentParams {
            close_radius: 3,
            open_radius: 2,
            min_area_frac: 0.0005,
            min_threshold: 0.05,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct MaskSidecar {
    mask_mpp: f64,
    source: MaskSource,
    #[serde(default)]
    blank: bool,
}

impl TissueMask {
    /// Registers a thumbnail-space mask to slide orientation: the padding is
    /// cropped off and any rotation undone. Resolution is unchanged.
    pub fn to_slide(&self, thumb: &Thumbnail) -> TissueMask {
        let pb = thumb.pad_box;
        let mut bm = self.bitmap.crop(pb.x0, pb.y0, pb.width(), pb.height());
        if thumb.rotated {
            bm = bm.rotate270();
        }
        TissueMask {
            bitmap: bm,
            ..self.clone()
        }
    }

    /// Inverse of [`TissueMask::to_slide`].
    pub fn to_thumbnail(&self, thumb: &Thumbnail) -> TissueMask {
        let bm = if thumb.rotated {
            self.bitmap.rotate90()
        } else {
            self.bitmap.clone()
        };
        let mut out = Bitmap::new(thumb.pixels.width, thumb.pixels.height, false);
        let pb = thumb.pad_box;
        for y in 0..bm.height.min(pb.height()) {
            for x in 0..bm.width.min(pb.width()) {
                out.set(pb.x0 + x, pb.y0 + y, bm.get(x, y));
            }
        }
        TissueMask {
            bitmap: out,
            ..self.clone()
        }
    }

    /// Writes `<stem>.png` (1-bit) and `<stem>.json`.
    pub fn save(&self, stem: &Path) -> Result<()> {
        self.bitmap.save_png(&stem.with_extension("png"))?;
        let json = stem.with_extension("json");
        let side = MaskSidecar {
            mask_mpp: self.mask_mpp,
            source: self.source,
            blank: self.blank,
        };
        std::fs::write(&json, serde_json::to_vec_pretty(&side)?).at(&json)
    }

    pub fn load(stem: &Path) -> Result<TissueMask> {
        let bitmap = Bitmap::load_png(&stem.with_extension("png"))?;
        let json = stem.with_extension("json");
        let side: MaskSidecar = serde_json::from_slice(&std::fs::read(&json).at(&json)?)?;
        Ok(TissueMask {
            blank: bitmap.is_empty(),
            bitmap,
            mask_mpp: side.mask_mpp,
            source: side.source,
        })
    }
}

/// HSV saturation scaled to 0..=255.
pub fn saturation(img: &RgbImage) -> Vec<u8> {
    img.data
        .chunks_exact(3)
        .map(|p| {
            let max = p[0].max(p[1]).max(p[2]) as u32;
            let min = p[0].min(p[1]).min(p[2]) as u32;
            if max == 0 {
                0
            } else {
                (((max - min) * 255 + max / 2) / max) as u8
            }
        })
        .collect()
}

/// Otsu threshold over a 256-bin histogram; pixels strictly above the
/// returned level are foreground. `None` when the histogram has one value.
pub fn otsu_threshold(values: &[u8]) -> Option<u8> {
    let mut hist = [0u64; 256];
    for v in values {
        hist[*v as usize] += 1;
    }
    if hist.iter().filter(|c| **c > 0).count() < 2 {
        return None;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, c)| i as f64 * *c as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let (mut best, mut best_t) = (-1.0, 0u8);
    for t in 0..255 {
        w0 += hist[t] as f64;
        sum0 += t as f64 * hist[t] as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if between > best {
            best = between;
            best_t = t as u8;
        }
    }
    Some(best_t)
}

fn disc(radius: u32) -> Vec<(i32, i32)> {
    let r = radius as i32;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                out.push((dx, dy));
            }
        }
    }
    out
}

/// Dilation (`any`) or erosion (`all`) with a disc; out-of-image pixels are
/// ignored rather than treated as background.
fn morph(bm: &Bitmap, radius: u32, dilate: bool) -> Bitmap {
    if radius == 0 {
        return bm.clone();
    }
    let k = disc(radius);
    let (w, h) = (bm.width as i32, bm.height as i32);
    let mut out = Bitmap::new(bm.width, bm.height, false);
    for y in 0..h {
        for x in 0..w {
            let mut acc = !dilate;
            for &(dx, dy) in &k {
                let (sx, sy) = (x + dx, y + dy);
                if sx < 0 || sy < 0 || sx >= w || sy >= h {
                    continue;
                }
                let v = bm.get(sx as u32, sy as u32);
                if dilate && v {
                    acc = true;
                    break;
                }
                if !dilate && !v {
                    acc = false;
                    break;
                }
            }
            out.set(x as u32, y as u32, acc);
        }
    }
    out
}

pub fn close(bm: &Bitmap, radius: u32) -> Bitmap {
    morph(&morph(bm, radius, true), radius, false)
}

pub fn open(bm: &Bitmap, radius: u32) -> Bitmap {
    morph(&morph(bm, radius, false), radius, true)
}

/// Drops 8-connected foreground components smaller than `min_area` pixels.
pub fn remove_small_components(bm: &Bitmap, min_area: usize) -> Bitmap {
    let (w, h) = (bm.width as usize, bm.height as usize);
    let mut out = bm.clone();
    let mut seen = vec![false; w * h];
    let mut queue = VecDeque::new();
    let mut comp = Vec::new();
    for start in 0..w * h {
        if !bm.data[start] || seen[start] {
            continue;
        }
        comp.clear();
        seen[start] = true;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            comp.push(i);
            let (x, y) = ((i % w) as i64, (i / w) as i64);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if bm.data[j] && !seen[j] {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
        }
        if comp.len() < min_area {
            for &i in &comp {
                out.data[i] = false;
            }
        }
    }
    out
}

/// Segments an RGB image on its own pixel grid.
pub fn segment_image(img: &RgbImage, params: &SegmentParams) -> Bitmap {
    let sat = saturation(img);
    let floor = (params.min_threshold.clamp(0.0, 1.0) * 255.0).round() as u8;
    let t = otsu_threshold(&sat).map_or(floor, |t| t.max(floor));
    let raw = Bitmap {
        width: img.width,
        height: img.height,
        data: sat.iter().map(|s| *s > t).collect(),
    };
    let cleaned = open(&close(&raw, params.close_radius), params.open_radius);
    let min_area = (params.min_area_frac * img.width as f64 * img.height as f64).ceil() as usize;
    remove_small_components(&cleaned, min_area)
}

/// Tissue mask on the thumbnail grid (thumbnail orientation, padding
/// included). Use [`TissueMask::to_slide`] before tessellating.
pub fn segment_tissue(thumb: &Thumbnail, params: &SegmentParams) -> TissueMask {
    let bitmap = segment_image(&thumb.pixels, params);
    let blank = bitmap.is_empty();
    if blank {
        log::warn!("segmentation found no tissue; slide flagged blank");
    }
    TissueMask {
        bitmap,
        mask_mpp: thumb.effective_mpp,
        source: MaskSource::Auto,
        blank,
    }
}

/// Replaces an automatic mask with a reviewed PNG on the same grid.
pub fn apply_override(auto: &TissueMask, override_path: &Path) -> Result<TissueMask> {
    let bm = Bitmap::load_png(override_path)?;
    if (bm.width, bm.height) != (auto.bitmap.width, auto.bitmap.height) {
        return Err(Error::OverrideShape {
            path: override_path.to_path_buf(),
            expected: (auto.bitmap.width, auto.bitmap.height),
            found: (bm.width, bm.height),
        });
    }
    let blank = bm.is_empty();
    if blank {
        log::warn!("override {} is empty; slide flagged blank", override_path.display());
    }
    Ok(TissueMask {
        bitmap: bm,
        mask_mpp: auto.mask_mpp,
        source: MaskSource::ManualOverride,
        blank,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::WHITE;
    use crate::slide_io::PadBox;
    use proptest::prelude::*;

    fn thumb(img: RgbImage) -> Thumbnail {
        let (w, h) = (img.width, img.height);
        Thumbnail {
            pixels: img,
            effective_mpp: 8.0,
            rotated: false,
            pad_box: PadBox { x0: 0, y0: 0, x1: w, y1: h },
            slide_dims: (w * 8, h * 8),
        }
    }

    fn discs(w: u32, h: u32, circles: &[(f64, f64, f64)]) -> (RgbImage, Bitmap) {
        let mut img = RgbImage::filled(w, h, WHITE);
        let mut gt = Bitmap::new(w, h, false);
        for y in 0..h {
            for x in 0..w {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                if circles.iter().any(|(cx, cy, r)| (px - cx).powi(2) + (py - cy).powi(2) <= r * r) {
                    img.put(x, y, [170, 60, 140]);
                    gt.set(x, y, true);
                }
            }
        }
        (img, gt)
    }

    #[test]
    fn discs_recovered() {
        let (img, gt) = discs(200, 100, &[(50.0, 50.0, 30.0), (140.0, 45.0, 22.0)]);
        let m = segment_tissue(&thumb(img), &SegmentParams::default());
        assert!(m.bitmap.iou(&gt) >= 0.98, "iou {}", m.bitmap.iou(&gt));
        assert!(!m.blank);
    }

    #[test]
    fn white_is_blank_and_saturated_is_full() {
        let m = segment_tissue(&thumb(RgbImage::filled(64, 32, WHITE)), &SegmentParams::default());
        assert!(m.blank && m.bitmap.is_empty());
        let m = segment_tissue(&thumb(RgbImage::filled(64, 32, [255, 0, 0])), &SegmentParams::default());
        assert_eq!(m.bitmap.count(), 64 * 32);
    }

    #[test]
    fn small_specks_removed() {
        let (mut img, _) = discs(200, 100, &[(60.0, 50.0, 25.0)]);
        img.put(180, 10, [200, 20, 20]);
        let m = segment_tissue(&thumb(img), &SegmentParams::default());
        assert!(!m.bitmap.get(180, 10));
    }

    #[test]
    fn otsu_splits_bimodal() {
        let mut v = vec![10u8; 100];
        v.extend(vec![200u8; 50]);
        let t = otsu_threshold(&v).unwrap();
        assert!((10..200).contains(&t));
        assert_eq!(otsu_threshold(&[7, 7, 7]), None);
    }

    #[test]
    fn override_rules() {
        let dir = tempfile::tempdir().unwrap();
        let (img, _) = discs(80, 40, &[(30.0, 20.0, 12.0)]);
        let auto = segment_tissue(&thumb(img), &SegmentParams::default());
        let same = dir.path().join("same.png");
        auto.bitmap.save_png(&same).unwrap();
        let o = apply_override(&auto, &same).unwrap();
        assert_eq!(o.bitmap, auto.bitmap);
        assert_eq!(o.source, MaskSource::ManualOverride);

        let empty = dir.path().join("empty.png");
        Bitmap::new(80, 40, false).save_png(&empty).unwrap();
        let o = apply_override(&auto, &empty).unwrap();
        assert!(o.blank && o.bitmap.is_empty());

        let off = dir.path().join("off.png");
        Bitmap::new(81, 40, false).save_png(&off).unwrap();
        assert!(matches!(apply_override(&auto, &off), Err(Error::OverrideShape { .. })));
    }

    #[test]
    fn registration_round_trip() {
        let (img, _) = discs(60, 30, &[(20.0, 15.0, 8.0)]);
        let mut padded = RgbImage::filled(80, 40, WHITE);
        padded.paste(&img, 0, 0);
        let t = Thumbnail {
            pixels: padded,
            effective_mpp: 4.0,
            rotated: true,
            pad_box: PadBox { x0: 0, y0: 0, x1: 60, y1: 30 },
            slide_dims: (120, 240),
        };
        let m = segment_tissue(&t, &SegmentParams::default());
        let s = m.to_slide(&t);
        assert_eq!((s.bitmap.width, s.bitmap.height), (30, 60));
        assert_eq!(s.to_thumbnail(&t).bitmap, m.bitmap);
    }

    #[test]
    fn persistence() {
        let dir = tempfile::tempdir().unwrap();
        let (img, _) = discs(50, 30, &[(20.0, 15.0, 9.0)]);
        let m = segment_tissue(&thumb(img), &SegmentParams::default());
        let stem = dir.path().join("m");
        m.save(&stem).unwrap();
        assert_eq!(TissueMask::load(&stem).unwrap(), m);
    }

    fn arb_image() -> impl Strategy<Value = RgbImage> {
        (4u32..24, 4u32..24, any::<u64>()).prop_map(|(w, h, seed)| {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data = (0..w * h * 3).map(|_| rng.random::<u8>()).collect();
            RgbImage::from_raw(w, h, data).unwrap()
        })
    }

    proptest! {
        #[test]
        fn deterministic(img in arb_image()) {
            let p = SegmentParams::default();
            prop_assert_eq!(segment_image(&img, &p), segment_image(&img, &p));
        }

        #[test]
        fn rotation_equivariant(img in arb_image()) {
            let p = SegmentParams::default();
            let a = segment_image(&img.rotate90(), &p);
            let b = segment_image(&img, &p).rotate90();
            prop_assert_eq!(a, b);
        }
    }
}
