//! Synthetic stain corpus.
//!
//! Every class has a colour palette and a procedural texture. The merged
//! pairs (alcian_blue / alcian_blue_pas and pas / pas_d) share both; the
//! second member of each pair adds a period-two pixel checker in tissue. A
//! 2x2 box average cancels that checker exactly, so from the first pyramid
//! level upward the pair members are indistinguishable while full-resolution
//! patches still separate them.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::image::{downsample2, Bitmap, RgbImage, WHITE};
use crate::manifest::{Manifest, ManifestEntry};
use crate::seed;
use crate::slide_io::{write_pyramid, PyramidLayout, TileSource};
use crate::taxonomy::StainClass;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextureKind {
    Speckle,
    Fiber,
    Ring,
    Blob,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    pub kind: TextureKind,
    /// Feature radius in level-0 pixels.
    pub scale_px: f64,
    /// Probability that a texture cell holds a feature.
    pub density: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StainSignature {
    pub class: StainClass,
    /// Tissue ground colour, then texture colour.
    pub palette: Vec<[u8; 3]>,
    pub texture: Texture,
    /// Alternative ground colour used on half of the slides.
    pub counterstain: Option<[u8; 3]>,
    /// Amplitude of the period-two checker (0 = none).
    pub checker: u8,
}

const CHECKER: u8 = 24;
const PRUSSIAN_PINK: [u8; 3] = [240, 190, 170];

fn tex(kind: TextureKind, scale_px: f64, density: f64) -> Texture {
    Texture { kind, scale_px, density }
}

pub fn signature(class: StainClass) -> StainSignature {
    use StainClass::*;
    use TextureKind::*;
    let (ground, ink, texture) = match class {
        AlcianBlue | AlcianBluePas => ([120, 195, 215], [40, 110, 175], tex(Blob, 6.0, 0.55)),
        PrussianBlue => (PRUSSIAN_PINK, [40, 70, 172], tex(Speckle, 2.5, 0.6)),
        Giemsa => ([175, 135, 215], [80, 50, 150], tex(Speckle, 3.0, 0.6)),
        Gms => ([150, 205, 140], [60, 50, 40], tex(Fiber, 4.0, 0.55)),
        CongoRed => ([240, 140, 110], [190, 50, 60], tex(Ring, 6.0, 0.6)),
        VonKossa => ([210, 95, 95], [20, 20, 22], tex(Blob, 8.0, 0.45)),
        Rhodanine => ([235, 200, 120], [180, 90, 40], tex(Speckle, 3.0, 0.6)),
        Pas | PasD => ([215, 95, 165], [150, 30, 120], tex(Blob, 6.0, 0.55)),
        Reticulin => ([200, 190, 165], [50, 40, 35], tex(Fiber, 3.5, 0.6)),
        VanGieson => ([225, 220, 90], [205, 60, 55], tex(Fiber, 5.0, 0.55)),
        WarthinStarry => ([190, 140, 70], [60, 40, 30], tex(Speckle, 2.0, 0.6)),
        ZiehlNeelsen => ([160, 170, 225], [215, 45, 90], tex(Fiber, 2.0, 0.5)),
        HeFfpe => ([240, 165, 210], [120, 60, 170], tex(Blob, 4.0, 0.55)),
        HeFs => ([200, 110, 200], [90, 40, 150], tex(Ring, 5.0, 0.6)),
    };
    StainSignature {
        class,
        palette: vec![ground, ink],
        texture,
        counterstain: (class == VonKossa).then_some(PRUSSIAN_PINK),
        checker: if matches!(class, AlcianBluePas | PasD) { CHECKER } else { 0 },
    }
}

pub fn signatures() -> Vec<StainSignature> {
    StainClass::ALL.iter().map(|c| signature(*c)).collect()
}

/// Filled ellipse in level-0 pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
    /// Rotation in radians.
    pub angle: f64,
}

impl Ellipse {
    #[inline]
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (dx * c + dy * s) / self.rx;
        let v = (-dx * s + dy * c) / self.ry;
        u * u + v * v <= 1.0
    }

    fn half_extents(&self) -> (f64, f64) {
        let (s, c) = self.angle.sin_cos();
        (
            ((self.rx * c).powi(2) + (self.ry * s).powi(2)).sqrt(),
            ((self.rx * s).powi(2) + (self.ry * c).powi(2)).sqrt(),
        )
    }
}

/// Tissue layout. `Full` covers the whole slide.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tissue {
    Shapes(Vec<Ellipse>),
    Full,
}

impl Tissue {
    #[inline]
    pub fn contains(&self, x: f64, y: f64) -> bool {
        match self {
            Tissue::Full => true,
            Tissue::Shapes(s) => s.iter().any(|e| e.contains(x, y)),
        }
    }
}

/// Everything needed to re-render one synthetic slide.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideSpec {
    pub slide_id: String,
    pub label: StainClass,
    pub width: u32,
    pub height: u32,
    pub base_mpp: f64,
    pub tissue: Tissue,
    pub seed: u64,
    pub alt_counterstain: bool,
    /// Per-channel colour gain.
    pub gain: [f64; 3],
}

/// Renders a slide from its spec, pixel by pixel.
pub struct SlideRenderer {
    spec: SlideSpec,
    ground: [f64; 3],
    ink: [f64; 3],
    texture: Texture,
    checker: f64,
}

impl SlideRenderer {
    pub fn new(spec: SlideSpec) -> Self {
        let sig = signature(spec.label);
        let ground = match (spec.alt_counterstain, sig.counterstain) {
            (true, Some(c)) => c,
            _ => sig.palette[0],
        };
        let adjust = |c: [u8; 3]| -> [f64; 3] {
            let mut out = [0.0; 3];
            for k in 0..3 {
                out[k] = (c[k] as f64 * spec.gain[k]).clamp(32.0, 223.0);
            }
            out
        };
        SlideRenderer {
            ground: adjust(ground),
            ink: adjust(sig.palette[1]),
            texture: sig.texture,
            checker: sig.checker as f64,
            spec,
        }
    }

    pub fn spec(&self) -> &SlideSpec {
        &self.spec
    }

    fn in_tissue(&self, x: u32, y: u32) -> bool {
        self.spec.tissue.contains(x as f64 + 0.5, y as f64 + 0.5)
    }

    fn textured(&self, x: f64, y: f64) -> bool {
        let t = self.texture;
        let cell = t.scale_px * 2.5;
        let (cx, cy) = ((x / cell).floor() as i64, (y / cell).floor() as i64);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (gx, gy) = (cx + dx, cy + dy);
                let h = seed::derive(self.spec.seed, &[gx as u64, gy as u64]);
                if seed::unit(h) >= t.density {
                    continue;
                }
                let h2 = seed::splitmix64(h);
                let h3 = seed::splitmix64(h2);
                let h4 = seed::splitmix64(h3);
                let px = (gx as f64 + seed::unit(h2)) * cell;
                let py = (gy as f64 + seed::unit(h3)) * cell;
                let r = t.scale_px * (0.7 + 0.6 * seed::unit(h4));
                let (ddx, ddy) = (x - px, y - py);
                let hit = match t.kind {
                    TextureKind::Speckle | TextureKind::Blob => ddx * ddx + ddy * ddy <= r * r,
                    TextureKind::Ring => ((ddx * ddx + ddy * ddy).sqrt() - r).abs() <= 0.9,
                    TextureKind::Fiber => {
                        let a = seed::unit(seed::splitmix64(h4)) * std::f64::consts::PI;
                        let (s, c) = a.sin_cos();
                        let along = ddx * c + ddy * s;
                        let across = -ddx * s + ddy * c;
                        along.abs() <= 2.0 * r && across.abs() <= 0.8
                    }
                };
                if hit {
                    return true;
                }
            }
        }
        false
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        if !self.in_tissue(x, y) {
            return WHITE;
        }
        let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
        let base = if self.textured(fx, fy) { self.ink } else { self.ground };
        let noise = (seed::unit(seed::derive(self.spec.seed ^ 0x5eed, &[x as u64, y as u64])) - 0.5) * 6.0;
        let mut check = 0.0;
        if self.checker > 0.0 {
            let (bx, by) = (x & !1, y & !1);
            let whole = bx + 1 < self.spec.width
                && by + 1 < self.spec.height
                && self.in_tissue(bx, by)
                && self.in_tissue(bx + 1, by)
                && self.in_tissue(bx, by + 1)
                && self.in_tissue(bx + 1, by + 1);
            if whole {
                check = if (x + y) % 2 == 0 { self.checker } else { -self.checker };
            }
        }
        let mut out = [0u8; 3];
        for k in 0..3 {
            let v = (base[k] + noise).round() + check;
            out[k] = v.clamp(0.0, 255.0) as u8;
        }
        out
    }

    /// Renders the `w x h` window at `(x0, y0)`; pixels past the slide are white.
    pub fn render_region(&self, x0: u32, y0: u32, w: u32, h: u32) -> RgbImage {
        let mut img = RgbImage::filled(w, h, WHITE);
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = (x0 + x, y0 + y);
                if sx < self.spec.width && sy < self.spec.height {
                    img.put(x, y, self.pixel(sx, sy));
                }
            }
        }
        img
    }
}

impl TileSource for SlideRenderer {
    fn tile_key(&self, tx: u32, ty: u32) -> u64 {
        ((ty as u64) << 32) | tx as u64
    }

    fn render(&self, tx: u32, ty: u32, tile: u32) -> Vec<u8> {
        self.render_region(tx * tile, ty * tile, tile, tile).data
    }
}

/// Number of pyramid levels so the smallest level's longer side is at most
/// `min_side` (and at least one level).
pub fn pyramid_levels(width: u32, height: u32, min_side: u32) -> usize {
    let mut side = width.max(height);
    let mut n = 1;
    while side > min_side {
        side = side.div_ceil(2);
        n += 1;
    }
    n
}

pub fn write_slide(spec: &SlideSpec, path: &Path, tile: u32) -> Result<()> {
    let layout = PyramidLayout {
        width: spec.width,
        height: spec.height,
        tile,
        levels: pyramid_levels(spec.width, spec.height, 64),
        base_mpp: spec.base_mpp,
    };
    write_pyramid(path, &layout, &SlideRenderer::new(spec.clone()))
}

/// Rasterizes tissue on a grid of `mask_mpp`; a mask pixel is set when its
/// centre lies in tissue.
pub fn rasterize(tissue: &Tissue, width: u32, height: u32, base_mpp: f64, mask_mpp: f64) -> Bitmap {
    let f = mask_mpp / base_mpp;
    let mw = ((width as f64 / f).round() as u32).max(1);
    let mh = ((height as f64 / f).round() as u32).max(1);
    rasterize_grid(tissue, f, mw, mh)
}

/// Rasterizes onto an explicit `mw x mh` grid whose pixels span `f` level-0 pixels.
pub fn rasterize_grid(tissue: &Tissue, f: f64, mw: u32, mh: u32) -> Bitmap {
    let mut bm = Bitmap::new(mw, mh, false);
    for j in 0..mh {
        for i in 0..mw {
            if tissue.contains((i as f64 + 0.5) * f, (j as f64 + 0.5) * f) {
                bm.set(i, j, true);
            }
        }
    }
    bm
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    /// Slides per class; classes absent from the map get none.
    pub n_per_class: BTreeMap<StainClass, usize>,
    pub seed: u64,
    pub base_mpp: f64,
    /// Inclusive range of the longer slide side in pixels.
    pub long_side: (u32, u32),
    /// Range of longer/shorter side ratio.
    pub aspect: (f64, f64),
    pub portrait_frac: f64,
    pub gt_mask_mpp: f64,
    pub tile: u32,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_per_class: StainClass::ALL.iter().map(|c| (*c, 20)).collect(),
            seed: 7,
            base_mpp: 0.59,
            long_side: (896, 1152),
            aspect: (1.6, 2.2),
            portrait_frac: 0.25,
            gt_mask_mpp: 4.72,
            tile: 256,
        }
    }
}

impl CorpusConfig {
    pub fn uniform(classes: &[StainClass], n: usize, seed: u64) -> Self {
        CorpusConfig {
            n_per_class: classes.iter().map(|c| (*c, n)).collect(),
            seed,
            ..Default::default()
        }
    }
}

/// Samples the [`SlideSpec`] of the `index`-th slide (a pure function of the config).
pub fn sample_slide(cfg: &CorpusConfig, index: usize, label: StainClass) -> SlideSpec {
    let mut rng = seed::rng(cfg.seed, &[index as u64, label.index() as u64]);
    let long = rng.random_range(cfg.long_side.0..=cfg.long_side.1.max(cfg.long_side.0)) / 16 * 16;
    let aspect = rng.random_range(cfg.aspect.0..=cfg.aspect.1.max(cfg.aspect.0));
    let short = ((long as f64 / aspect) as u32 / 16 * 16).max(16);
    let portrait = rng.random::<f64>() < cfg.portrait_frac;
    let (w, h) = if portrait { (short, long) } else { (long, short) };
    let n_shapes = rng.random_range(1..=3usize);
    let mut shapes = Vec::with_capacity(n_shapes);
    for i in 0..n_shapes {
        let scale = if i == 0 { 1.0 } else { 0.6 };
        let rx = rng.random_range(0.22..0.34) * w as f64 * scale;
        let ry = rng.random_range(0.28..0.42) * h as f64 * scale;
        let angle = rng.random_range(-0.5..0.5);
        let mut e = Ellipse { cx: 0.0, cy: 0.0, rx, ry, angle };
        let (ex, ey) = e.half_extents();
        let m = 0.03 * w.min(h) as f64;
        let lo_x = ex + m;
        let hi_x = (w as f64 - ex - m).max(lo_x);
        let lo_y = ey + m;
        let hi_y = (h as f64 - ey - m).max(lo_y);
        e.cx = if hi_x > lo_x { rng.random_range(lo_x..hi_x) } else { w as f64 / 2.0 };
        e.cy = if hi_y > lo_y { rng.random_range(lo_y..hi_y) } else { h as f64 / 2.0 };
        shapes.push(e);
    }
    let alt_counterstain = rng.random::<f64>() < 0.5;
    let gain = [
        rng.random_range(0.96..1.04),
        rng.random_range(0.96..1.04),
        rng.random_range(0.96..1.04),
    ];
    SlideSpec {
        slide_id: format!("syn{index:04}"),
        label,
        width: w,
        height: h,
        base_mpp: cfg.base_mpp,
        tissue: Tissue::Shapes(shapes),
        seed: seed::derive(cfg.seed, &[0x511de, index as u64]),
        alt_counterstain,
        gain,
    }
}

/// Ground-truth record stored next to each generated slide's mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub mask_mpp: f64,
    pub spec: SlideSpec,
}

pub fn gt_dir(corpus_dir: &Path) -> PathBuf {
    corpus_dir.join("gt_masks")
}

pub fn load_ground_truth(corpus_dir: &Path, slide_id: &str) -> Result<GroundTruth> {
    let p = gt_dir(corpus_dir).join(format!("{slide_id}.json"));
    Ok(serde_json::from_slice(&std::fs::read(&p).at(&p)?)?)
}

fn dir_is_nonempty(dir: &Path) -> bool {
    std::fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false)
}

/// Writes slides, ground-truth masks and `manifest.csv` under `out_dir`.
///
/// Slide ids are assigned class by class in taxonomy order. Refuses to touch a
/// non-empty directory unless `force` is set.
pub fn generate_corpus(cfg: &CorpusConfig, out_dir: &Path, force: bool) -> Result<Manifest> {
    generate_corpus_with_workers(cfg, out_dir, force, 1)
}

pub fn generate_corpus_with_workers(
    cfg: &CorpusConfig,
    out_dir: &Path,
    force: bool,
    workers: usize,
) -> Result<Manifest> {
    if dir_is_nonempty(out_dir) {
        if !force {
            return Err(Error::Refused(out_dir.to_path_buf()));
        }
        for sub in ["slides", "gt_masks"] {
            let p = out_dir.join(sub);
            if p.exists() {
                std::fs::remove_dir_all(&p).at(&p)?;
            }
        }
    }
    let slides = out_dir.join("slides");
    let gts = gt_dir(out_dir);
    std::fs::create_dir_all(&slides).at(&slides)?;
    std::fs::create_dir_all(&gts).at(&gts)?;

    let mut specs = Vec::new();
    for class in StainClass::ALL {
        let n = cfg.n_per_class.get(&class).copied().unwrap_or(0);
        for _ in 0..n {
            specs.push(sample_slide(cfg, specs.len(), class));
        }
    }
    let write_one = |spec: &SlideSpec| -> Result<()> {
        write_slide(spec, &slides.join(format!("{}.tiff", spec.slide_id)), cfg.tile)?;
        let gt = GroundTruth {
            mask_mpp: cfg.gt_mask_mpp,
            spec: spec.clone(),
        };
        rasterize(&spec.tissue, spec.width, spec.height, spec.base_mpp, cfg.gt_mask_mpp)
            .save_png(&gts.join(format!("{}.png", spec.slide_id)))?;
        let jp = gts.join(format!("{}.json", spec.slide_id));
        std::fs::write(&jp, serde_json::to_vec_pretty(&gt)?).at(&jp)
    };
    crate::parallel::for_each(&specs, workers, |s| write_one(s))?;

    let manifest = Manifest {
        root: out_dir.to_path_buf(),
        entries: specs
            .iter()
            .map(|s| ManifestEntry {
                slide_id: s.slide_id.clone(),
                path: PathBuf::from("slides").join(format!("{}.tiff", s.slide_id)),
                fine_label: s.label,
                split_hint: None,
            })
            .collect(),
    };
    manifest.save(&out_dir.join("manifest.csv"))?;
    Ok(manifest)
}

struct BenchSource {
    tissue_tiles: u64,
    cols: u32,
    tissue_tile: Vec<u8>,
}

impl BenchSource {
    fn is_tissue(&self, tx: u32, ty: u32) -> bool {
        if tx == 0 || ty == 0 || tx > self.cols {
            return false;
        }
        let idx = (ty - 1) as u64 * self.cols as u64 + (tx - 1) as u64;
        idx < self.tissue_tiles
    }
}

impl TileSource for BenchSource {
    fn tile_key(&self, tx: u32, ty: u32) -> u64 {
        self.is_tissue(tx, ty) as u64
    }

    fn render(&self, tx: u32, ty: u32, tile: u32) -> Vec<u8> {
        if self.is_tissue(tx, ty) {
            self.tissue_tile.clone()
        } else {
            WHITE.repeat((tile * tile) as usize)
        }
    }
}

/// Builds a slide whose tissue is exactly `target_patches` whole
/// `patch_px`-pixel patches at `mpp`, laid out as a near-rectangle with a
/// one-tile white margin. TIFF tiles must be multiples of 16 pixels, so an
/// unaligned patch size gets the next aligned tile and a proportionally
/// finer base resolution: one tile is still exactly one patch.
pub fn make_benchmark_slide(target_patches: u64, patch_px: u32, mpp: f64, path: &Path, seed: u64) -> Result<PathBuf> {
    if patch_px == 0 {
        return Err(Error::Argument("benchmark patch size must be positive".into()));
    }
    let tile = patch_px.next_multiple_of(16);
    let base_mpp = mpp * patch_px as f64 / tile as f64;
    let (cols, rows) = if target_patches == 0 {
        (2, 2)
    } else {
        let root = (target_patches as f64).sqrt();
        let divisor = (1..=target_patches)
            .take_while(|d| d * d <= target_patches)
            .filter(|d| target_patches % d == 0)
            .last()
            .unwrap_or(1);
        let other = target_patches / divisor;
        if other as f64 / divisor as f64 <= 2.5 {
            (other as u32, divisor as u32)
        } else {
            let c = root.ceil() as u64;
            (c as u32, target_patches.div_ceil(c) as u32)
        }
    };
    let spec = SlideSpec {
        slide_id: "bench".into(),
        label: StainClass::HeFfpe,
        width: tile,
        height: tile,
        base_mpp,
        tissue: Tissue::Full,
        seed,
        alt_counterstain: false,
        gain: [1.0; 3],
    };
    let tissue_tile = SlideRenderer::new(spec).render_region(0, 0, tile, tile).data;
    let source = BenchSource {
        tissue_tiles: target_patches,
        cols,
        tissue_tile,
    };
    let (w, h) = ((cols + 2) * tile, (rows + 2) * tile);
    let layout = PyramidLayout {
        width: w,
        height: h,
        tile,
        levels: pyramid_levels(w, h, 128),
        base_mpp,
    };
    if let Some(p) = path.parent() {
        std::fs::create_dir_all(p).at(p)?;
    }
    write_pyramid(path, &layout, &source)?;
    Ok(path.to_path_buf())
}

/// CIELAB (D65) from 8-bit sRGB.
pub fn srgb_to_lab(c: [u8; 3]) -> [f64; 3] {
    let lin = |v: u8| {
        let v = v as f64 / 255.0;
        if v <= 0.04045 {
            v / 12.92
        } else {
            ((v + 0.055) / 1.055).powf(2.4)
        }
    };
    let (r, g, b) = (lin(c[0]), lin(c[1]), lin(c[2]));
    let x = (0.412_456_4 * r + 0.357_576_1 * g + 0.180_437_5 * b) / 0.95047;
    let y = 0.212_672_9 * r + 0.715_152_2 * g + 0.072_175_0 * b;
    let z = (0.019_333_9 * r + 0.119_192_0 * g + 0.950_304_1 * b) / 1.08883;
    let f = |t: f64| {
        if t > 216.0 / 24389.0 {
            t.cbrt()
        } else {
            (24389.0 / 27.0 * t + 16.0) / 116.0
        }
    };
    let (fx, fy, fz) = (f(x), f(y), f(z));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// CIE76 colour difference.
pub fn delta_e(a: [u8; 3], b: [u8; 3]) -> f64 {
    let (la, lb) = (srgb_to_lab(a), srgb_to_lab(b));
    la.iter().zip(&lb).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt()
}

/// Mean ΔE between corresponding palette anchors.
pub fn palette_distance(a: &StainSignature, b: &StainSignature) -> f64 {
    let n = a.palette.len().min(b.palette.len());
    (0..n).map(|i| delta_e(a.palette[i], b.palette[i])).sum::<f64>() / n as f64
}

/// Amplitude of the (π, π) frequency of the luminance, i.e. how strongly the
/// image carries a one-pixel checker.
pub fn nyquist_amplitude(img: &RgbImage) -> f64 {
    let mut acc = 0.0;
    for y in 0..img.height {
        for x in 0..img.width {
            let p = img.get(x, y);
            let lum = (p[0] as f64 + p[1] as f64 + p[2] as f64) / 3.0;
            acc += if (x + y) % 2 == 0 { lum } else { -lum };
        }
    }
    (acc / (img.width as f64 * img.height as f64)).abs()
}

/// A full-tissue sample of a class, rendered at level 0.
pub fn sample_patch(class: StainClass, size: u32, seed: u64) -> RgbImage {
    let spec = SlideSpec {
        slide_id: "sample".into(),
        label: class,
        width: size,
        height: size,
        base_mpp: 0.59,
        tissue: Tissue::Full,
        seed,
        alt_counterstain: false,
        gain: [1.0; 3],
    };
    SlideRenderer::new(spec).render_region(0, 0, size, size)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairCheck {
    pub a: StainClass,
    pub b: StainClass,
    pub palette_delta_e: f64,
    /// Checker amplitude difference on full-resolution patches.
    pub patch_texture_distance: f64,
    /// The same after one 2x2 box downsample.
    pub thumbnail_texture_distance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairReport {
    pub palette_threshold: f64,
    pub texture_threshold: f64,
    pub pairs: Vec<PairCheck>,
    pub passed: bool,
}

pub const PALETTE_THRESHOLD: f64 = 10.0;
pub const TEXTURE_THRESHOLD: f64 = 4.0;

/// Checks that each merged pair present in `classes` is palette-confusable
/// but texture-separable at full resolution and not after downsampling.
pub fn confusable_pair_check(classes: &[StainClass]) -> PairReport {
    use StainClass::*;
    let mut pairs = Vec::new();
    for (a, b) in [(AlcianBlue, AlcianBluePas), (Pas, PasD)] {
        if !(classes.contains(&a) && classes.contains(&b)) {
            continue;
        }
        let (sa, sb) = (signature(a), signature(b));
        let (pa, pb) = (sample_patch(a, 128, 1), sample_patch(b, 128, 1));
        let patch = (nyquist_amplitude(&pa) - nyquist_amplitude(&pb)).abs();
        let thumb = (nyquist_amplitude(&downsample2(&pa)) - nyquist_amplitude(&downsample2(&pb))).abs();
        let de = palette_distance(&sa, &sb);
        pairs.push(PairCheck {
            a,
            b,
            palette_delta_e: de,
            patch_texture_distance: patch,
            thumbnail_texture_distance: thumb,
            passed: de < PALETTE_THRESHOLD && patch > TEXTURE_THRESHOLD && thumb < TEXTURE_THRESHOLD,
        });
    }
    PairReport {
        palette_threshold: PALETTE_THRESHOLD,
        texture_threshold: TEXTURE_THRESHOLD,
        passed: pairs.iter().all(|p| p.passed),
        pairs,
    }
}
