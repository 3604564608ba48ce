//! Pyramidal slide access: metadata, region reads, thumbnails and patch grids.
//!
//! Slides are tiled multi-resolution TIFFs with a resolution tag on level 0.
//! A [`SlidePyramid`] is a single-reader handle (not `Sync`); workers open
//! their own.

mod writer;

use std::cell::RefCell;
use std::collections::HashMap;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::rc::Rc;

use serde::{Deserialize, Serialize};
use tiff::decoder::{ChunkType, Decoder, DecodingResult, Limits};
use tiff::tags::Tag;

use crate::error::{Error, IoContext, Result};
use crate::image::{resample_region, RgbImage, WHITE};
use crate::segmentation::TissueMask;

pub use writer::{write_pyramid, ImageSource, PyramidLayout, TileSource};

/// Decoded tiles kept per handle before the cache is flushed.
const TILE_CACHE_BYTES: usize = 96 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PyramidLevel {
    pub width: u32,
    pub height: u32,
    pub downsample: f64,
}

/// Output size as `width x height`; thumbnails are always landscape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Resolution {
    pub width: u32,
    pub height: u32,
}

impl Resolution {
    pub const fn new(width: u32, height: u32) -> Self {
        Resolution { width, height }
    }
}

impl std::fmt::Display for Resolution {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.width, self.height)
    }
}

struct LevelReader {
    decoder: Decoder<BufReader<File>>,
}

struct ReaderState {
    decoders: HashMap<usize, LevelReader>,
    cache: HashMap<(u64, u32, u32), Rc<Vec<u8>>>,
    cached_bytes: usize,
}

/// Handle on one pyramidal slide. Pixel data is read lazily.
pub struct SlidePyramid {
    path: PathBuf,
    levels: Vec<PyramidLevel>,
    base_mpp: f64,
    tiles: Vec<(u32, u32)>,
    tile_offsets: Vec<Vec<u64>>,
    state: RefCell<ReaderState>,
}

impl std::fmt::Debug for SlidePyramid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SlidePyramid")
            .field("path", &self.path)
            .field("levels", &self.levels)
            .field("base_mpp", &self.base_mpp)
            .finish()
    }
}

fn tiff_err(path: &Path, e: tiff::TiffError) -> Error {
    match e {
        tiff::TiffError::IoError(source) => Error::io(path, source),
        other => Error::Tiff {
            path: path.to_path_buf(),
            msg: other.to_string(),
        },
    }
}

fn open_decoder(path: &Path) -> Result<Decoder<BufReader<File>>> {
    let file = File::open(path).at(path)?;
    let dec = Decoder::new(BufReader::new(file)).map_err(|e| tiff_err(path, e))?;
    Ok(dec.with_limits(Limits::unlimited()))
}

/// Opens a slide and reads its pyramid metadata.
pub fn open_slide(path: &Path) -> Result<SlidePyramid> {
    let mut dec = open_decoder(path)?;
    let mut levels = Vec::new();
    let mut tiles = Vec::new();
    let mut tile_offsets = Vec::new();
    let mut base_mpp = None;
    loop {
        let (w, h) = dec.dimensions().map_err(|e| tiff_err(path, e))?;
        if levels.is_empty() {
            base_mpp = Some(read_mpp(&mut dec, path)?);
        }
        let (tw, th, offsets) = match dec.get_chunk_type() {
            ChunkType::Tile => {
                let offs = dec
                    .get_tag_u64_vec(Tag::TileOffsets)
                    .map_err(|e| tiff_err(path, e))?;
                let (tw, th) = dec.chunk_dimensions();
                (tw, th, offs)
            }
            ChunkType::Strip => {
                let offs = dec
                    .get_tag_u64_vec(Tag::StripOffsets)
                    .map_err(|e| tiff_err(path, e))?;
                let (cw, ch) = dec.chunk_dimensions();
                (cw, ch, offs)
            }
        };
        let (w0, _) = levels.first().map(|l: &PyramidLevel| (l.width, l.height)).unwrap_or((w, h));
        levels.push(PyramidLevel {
            width: w,
            height: h,
            downsample: w0 as f64 / w as f64,
        });
        tiles.push((tw, th));
        tile_offsets.push(offsets);
        if !dec.more_images() {
            break;
        }
        dec.next_image().map_err(|e| tiff_err(path, e))?;
    }
    for pair in levels.windows(2) {
        if !(pair[1].downsample > pair[0].downsample) {
            return Err(Error::Metadata {
                path: path.to_path_buf(),
                msg: "pyramid levels are not strictly decreasing in size".into(),
            });
        }
    }
    let mut decoders = HashMap::new();
    decoders.insert(0, LevelReader { decoder: open_decoder(path)? });
    Ok(SlidePyramid {
        path: path.to_path_buf(),
        levels,
        base_mpp: base_mpp.expect("level 0 read"),
        tiles,
        tile_offsets,
        state: RefCell::new(ReaderState {
            decoders,
            cache: HashMap::new(),
            cached_bytes: 0,
        }),
    })
}

fn read_mpp(dec: &mut Decoder<BufReader<File>>, path: &Path) -> Result<f64> {
    let missing = |msg: &str| Error::Metadata {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    let xres = dec
        .find_tag(Tag::XResolution)
        .map_err(|e| tiff_err(path, e))?
        .ok_or_else(|| missing("no XResolution tag; microns-per-pixel unknown"))?;
    let px_per_unit = match xres {
        tiff::decoder::ifd::Value::Rational(n, d) if d != 0 => n as f64 / d as f64,
        tiff::decoder::ifd::Value::Double(v) => v,
        tiff::decoder::ifd::Value::Float(v) => v as f64,
        _ => return Err(missing("XResolution is not a positive rational")),
    };
    let unit: u16 = dec
        .find_tag_unsigned(Tag::ResolutionUnit)
        .map_err(|e| tiff_err(path, e))?
        .unwrap_or(2);
    let microns_per_unit = match unit {
        2 => 25_400.0,
        3 => 10_000.0,
        _ => return Err(missing("ResolutionUnit has no physical unit; microns-per-pixel unknown")),
    };
    if !(px_per_unit > 0.0) {
        return Err(missing("XResolution must be positive"));
    }
    Ok(microns_per_unit / px_per_unit)
}

impl SlidePyramid {
    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn levels(&self) -> &[PyramidLevel] {
        &self.levels
    }

    pub fn base_mpp(&self) -> f64 {
        self.base_mpp
    }

    pub fn dimensions(&self) -> (u32, u32) {
        (self.levels[0].width, self.levels[0].height)
    }

    pub fn level_mpp(&self, level: usize) -> f64 {
        self.base_mpp * self.levels[level].downsample
    }

    /// Deepest level whose resolution is at least as fine as `target_mpp`.
    pub fn level_for_mpp(&self, target_mpp: f64) -> usize {
        let mut best = 0;
        for l in 0..self.levels.len() {
            if self.level_mpp(l) <= target_mpp * (1.0 + 1e-9) {
                best = l;
            }
        }
        best
    }

    fn tile(&self, level: usize, index: u32) -> Result<Rc<Vec<u8>>> {
        let mut st = self.state.borrow_mut();
        let offset = self.tile_offsets[level][index as usize];
        let (tw, th) = self.tiles[level];
        let (tiles_x, _) = self.tile_grid(level);
        let lv = self.levels[level];
        let cw = tw.min(lv.width - (index % tiles_x) * tw);
        let ch = th.min(lv.height - (index / tiles_x) * th);
        let key = (offset, cw, ch);
        if let Some(t) = st.cache.get(&key) {
            return Ok(t.clone());
        }
        if !st.decoders.contains_key(&level) {
            let mut decoder = open_decoder(&self.path)?;
            decoder.seek_to_image(level).map_err(|e| tiff_err(&self.path, e))?;
            st.decoders.insert(level, LevelReader { decoder });
        }
        let reader = st.decoders.get_mut(&level).expect("inserted above");
        let data = match reader
            .decoder
            .read_chunk(index)
            .map_err(|e| tiff_err(&self.path, e))?
        {
            DecodingResult::U8(v) => v,
            _ => {
                return Err(Error::Tiff {
                    path: self.path.clone(),
                    msg: "only 8-bit RGB slides are supported".into(),
                })
            }
        };
        if data.len() != (cw * ch * 3) as usize {
            return Err(Error::Tiff {
                path: self.path.clone(),
                msg: format!("tile {index} on level {level} decoded to {} bytes", data.len()),
            });
        }
        let data = Rc::new(data);
        if st.cached_bytes + data.len() > TILE_CACHE_BYTES {
            st.cache.clear();
            st.cached_bytes = 0;
        }
        st.cached_bytes += data.len();
        st.cache.insert(key, data.clone());
        Ok(data)
    }

    fn tile_grid(&self, level: usize) -> (u32, u32) {
        let (tw, th) = self.tiles[level];
        let lv = self.levels[level];
        (lv.width.div_ceil(tw), lv.height.div_ceil(th))
    }

    /// Reads a region in the coordinates of `level`.
    pub fn read_region(&self, level: usize, x: u32, y: u32, w: u32, h: u32) -> Result<RgbImage> {
        let lv = self.levels[level];
        if x as u64 + w as u64 > lv.width as u64 || y as u64 + h as u64 > lv.height as u64 {
            return Err(Error::Bounds {
                x,
                y,
                extent: w.max(h) as f64,
                width: lv.width,
                height: lv.height,
            });
        }
        let (tw, th) = self.tiles[level];
        let (tiles_x, _) = self.tile_grid(level);
        let mut out = RgbImage::filled(w, h, WHITE);
        if w == 0 || h == 0 {
            return Ok(out);
        }
        for ty in y / th..=(y + h - 1) / th {
            for tx in x / tw..=(x + w - 1) / tw {
                let data = self.tile(level, ty * tiles_x + tx)?;
                let cw = tw.min(lv.width - tx * tw);
                let (ox, oy) = (tx * tw, ty * th);
                let x_lo = x.max(ox);
                let x_hi = (x + w).min(ox + cw);
                let ch = th.min(lv.height - ty * th);
                let y_lo = y.max(oy);
                let y_hi = (y + h).min(oy + ch);
                let n = (x_hi - x_lo) as usize * 3;
                for row in y_lo..y_hi {
                    let src = (((row - oy) * cw + (x_lo - ox)) * 3) as usize;
                    let dst = (((row - y) * w + (x_lo - x)) * 3) as usize;
                    out.data[dst..dst + n].copy_from_slice(&data[src..src + n]);
                }
            }
        }
        Ok(out)
    }

    pub fn read_level(&self, level: usize) -> Result<RgbImage> {
        let lv = self.levels[level];
        self.read_region(level, 0, 0, lv.width, lv.height)
    }
}

/// Content rectangle of a padded thumbnail, `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PadBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl PadBox {
    pub fn width(&self) -> u32 {
        self.x1 - self.x0
    }
    pub fn height(&self) -> u32 {
        self.y1 - self.y0
    }
}

/// Landscape whole-slide view, fitted into the target size and padded white.
#[derive(Debug, Clone, PartialEq)]
pub struct Thumbnail {
    pub pixels: RgbImage,
    pub effective_mpp: f64,
    pub rotated: bool,
    pub pad_box: PadBox,
    /// Level-0 size of the source slide, in slide orientation.
    pub slide_dims: (u32, u32),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ThumbnailSidecar {
    effective_mpp: f64,
    rotated: bool,
    pad_box: PadBox,
    slide_dims: (u32, u32),
}

impl Thumbnail {
    pub fn resolution(&self) -> Resolution {
        Resolution::new(self.pixels.width, self.pixels.height)
    }

    /// Writes `<stem>.png` and `<stem>.json`.
    pub fn save(&self, stem: &Path) -> Result<()> {
        self.pixels.save_png(&stem.with_extension("png"))?;
        let side = ThumbnailSidecar {
            effective_mpp: self.effective_mpp,
            rotated: self.rotated,
            pad_box: self.pad_box,
            slide_dims: self.slide_dims,
        };
        let json = stem.with_extension("json");
        std::fs::write(&json, serde_json::to_vec_pretty(&side)?).at(&json)
    }

    pub fn load(stem: &Path) -> Result<Thumbnail> {
        let pixels = RgbImage::load_png(&stem.with_extension("png"))?;
        let json = stem.with_extension("json");
        let side: ThumbnailSidecar = serde_json::from_slice(&std::fs::read(&json).at(&json)?)?;
        Ok(Thumbnail {
            pixels,
            effective_mpp: side.effective_mpp,
            rotated: side.rotated,
            pad_box: side.pad_box,
            slide_dims: side.slide_dims,
        })
    }

    /// Refits the content into a smaller landscape target (used to derive
    /// evaluation resolutions from a cached large thumbnail).
    pub fn resize_to(&self, target: Resolution) -> Result<Thumbnail> {
        check_target(target)?;
        let (cw, ch) = (self.pad_box.width(), self.pad_box.height());
        let (fw, fh) = fit(cw, ch, target);
        if fw > cw || fh > ch {
            return Err(Error::UpsampleRefused {
                requested: (target.width, target.height),
                available: (self.pixels.width, self.pixels.height),
            });
        }
        let content = resample_region(
            &self.pixels,
            self.pad_box.x0 as f64,
            self.pad_box.y0 as f64,
            cw as f64,
            ch as f64,
            fw,
            fh,
        );
        let mut pixels = RgbImage::filled(target.width, target.height, WHITE);
        pixels.paste(&content, 0, 0);
        Ok(Thumbnail {
            pixels,
            effective_mpp: self.effective_mpp * cw.max(ch) as f64 / fw.max(fh) as f64,
            rotated: self.rotated,
            pad_box: PadBox { x0: 0, y0: 0, x1: fw, y1: fh },
            slide_dims: self.slide_dims,
        })
    }
}

fn check_target(target: Resolution) -> Result<()> {
    if target.width == 0 || target.height == 0 || target.width < target.height {
        return Err(Error::Argument(format!(
            "thumbnail target {target} must be landscape and non-empty"
        )));
    }
    Ok(())
}

/// Largest size with the aspect of `w x h` that fits inside `target`.
fn fit(w: u32, h: u32, target: Resolution) -> (u32, u32) {
    let scale = (target.width as f64 / w as f64).min(target.height as f64 / h as f64);
    let fw = ((w as f64 * scale).round() as u32).clamp(1, target.width);
    let fh = ((h as f64 * scale).round() as u32).clamp(1, target.height);
    (fw, fh)
}

/// Extracts a landscape thumbnail fitted into `target` and padded with white.
///
/// Portrait slides are rotated a quarter turn clockwise before downscaling.
/// The source is the smallest pyramid level that still covers the fitted
/// size; downscaling is area averaging.
pub fn extract_thumbnail(slide: &SlidePyramid, target: Resolution) -> Result<Thumbnail> {
    check_target(target)?;
    let (w0, h0) = slide.dimensions();
    let rotated = h0 > w0;
    let (ow, oh) = if rotated { (h0, w0) } else { (w0, h0) };
    let (fw, fh) = fit(ow, oh, target);
    if fw > ow || fh > oh {
        return Err(Error::UpsampleRefused {
            requested: (target.width, target.height),
            available: (ow, oh),
        });
    }
    let mut level = 0;
    for (i, lv) in slide.levels().iter().enumerate() {
        let (lw, lh) = if rotated { (lv.height, lv.width) } else { (lv.width, lv.height) };
        if lw >= fw && lh >= fh {
            level = i;
        }
    }
    let mut img = slide.read_level(level)?;
    if rotated {
        img = img.rotate90();
    }
    let content = img.resize_area(fw, fh);
    let mut pixels = RgbImage::filled(target.width, target.height, WHITE);
    pixels.paste(&content, 0, 0);
    Ok(Thumbnail {
        pixels,
        effective_mpp: slide.base_mpp() * ow as f64 / fw as f64,
        rotated,
        pad_box: PadBox { x0: 0, y0: 0, x1: fw, y1: fh },
        slide_dims: (w0, h0),
    })
}

/// Regular non-overlapping patch grid restricted to tissue.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub patch_size_px: u32,
    pub target_mpp: f64,
    /// Top-left corners in level-0 pixels.
    pub coords: Vec<(u32, u32)>,
    pub level_used: usize,
    /// Patch footprint in level-0 pixels.
    pub footprint: f64,
    pub coverage_threshold: f64,
    /// Set when no patch passes the coverage threshold.
    pub blank: bool,
    /// Total grid cells considered (tissue or not).
    pub cells: (u32, u32),
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(p) = path.parent() {
            std::fs::create_dir_all(p).at(p)?;
        }
        std::fs::write(path, serde_json::to_vec(self)?).at(path)
    }

    pub fn load(path: &Path) -> Result<PatchGrid> {
        Ok(serde_json::from_slice(&std::fs::read(path).at(path)?)?)
    }
}

pub const DEFAULT_COVERAGE: f64 = 0.25;

/// Fraction of the level-0 rectangle `[x0, x1) x [y0, y1)` covered by mask
/// pixels, weighting partial pixel overlaps by area.
pub fn mask_coverage(mask: &TissueMask, base_mpp: f64, x0: f64, y0: f64, x1: f64, y1: f64) -> f64 {
    let f = mask.mask_mpp / base_mpp;
    let (ax, bx, ay, by) = (x0 / f, x1 / f, y0 / f, y1 / f);
    let bm = &mask.bitmap;
    let span = |a: f64, b: f64, n: u32| -> Vec<(u32, f64)> {
        let lo = a.floor().max(0.0) as u32;
        let hi = (b.ceil() as u32).min(n);
        (lo..hi)
            .map(|i| (i, (b.min(i as f64 + 1.0) - a.max(i as f64)).max(0.0)))
            .collect()
    };
    let xs = span(ax, bx, bm.width);
    let ys = span(ay, by, bm.height);
    let mut covered = 0.0;
    for &(my, wy) in &ys {
        for &(mx, wx) in &xs {
            if bm.get(mx, my) {
                covered += wx * wy;
            }
        }
    }
    covered / ((bx - ax) * (by - ay))
}

/// Tessellates tissue into `patch_size_px` patches at `target_mpp`.
///
/// `mask` must be registered to slide orientation (see
/// [`TissueMask::to_slide`]). A mask with no tissue gives an empty grid with
/// `blank` set.
pub fn tessellate(
    slide: &SlidePyramid,
    mask: &TissueMask,
    patch_size_px: u32,
    target_mpp: f64,
    coverage_threshold: f64,
) -> Result<PatchGrid> {
    if target_mpp < slide.base_mpp() * (1.0 - 1e-9) {
        return Err(Error::UpsampleRefused {
            requested: (patch_size_px, patch_size_px),
            available: slide.dimensions(),
        });
    }
    if patch_size_px == 0 {
        return Err(Error::Argument("patch size must be positive".into()));
    }
    let (w0, h0) = slide.dimensions();
    let footprint = patch_size_px as f64 * target_mpp / slide.base_mpp();
    let nx = (w0 as f64 / footprint + 1e-9).floor() as u32;
    let ny = (h0 as f64 / footprint + 1e-9).floor() as u32;
    let mut coords = Vec::new();
    for j in 0..ny {
        for i in 0..nx {
            let x0 = i as f64 * footprint;
            let y0 = j as f64 * footprint;
            let cov = mask_coverage(mask, slide.base_mpp(), x0, y0, x0 + footprint, y0 + footprint);
            if cov >= coverage_threshold {
                coords.push((x0.floor() as u32, y0.floor() as u32));
            }
        }
    }
    if coords.is_empty() {
        log::warn!("{}: no tissue patches; flagged blank", slide.path().display());
    }
    Ok(PatchGrid {
        patch_size_px,
        target_mpp,
        blank: coords.is_empty(),
        coords,
        level_used: slide.level_for_mpp(target_mpp),
        footprint,
        coverage_threshold,
        cells: (nx, ny),
    })
}

/// Reads one `patch_size_px` square patch at `target_mpp`, top-left corner
/// given in level-0 pixels.
pub fn read_patch(
    slide: &SlidePyramid,
    coord: (u32, u32),
    patch_size_px: u32,
    target_mpp: f64,
) -> Result<RgbImage> {
    let (w0, h0) = slide.dimensions();
    let footprint = patch_size_px as f64 * target_mpp / slide.base_mpp();
    let (x, y) = coord;
    if x as f64 + footprint > w0 as f64 + 1e-6 || y as f64 + footprint > h0 as f64 + 1e-6 {
        return Err(Error::Bounds {
            x,
            y,
            extent: footprint,
            width: w0,
            height: h0,
        });
    }
    let level = slide.level_for_mpp(target_mpp);
    let lv = slide.levels()[level];
    let ds = lv.downsample;
    let lx = x as f64 / ds;
    let ly = y as f64 / ds;
    let ext = footprint / ds;
    let rx0 = lx.floor() as u32;
    let ry0 = ly.floor() as u32;
    let rx1 = ((lx + ext).ceil() as u32).min(lv.width);
    let ry1 = ((ly + ext).ceil() as u32).min(lv.height);
    let region = slide.read_region(level, rx0, ry0, rx1 - rx0, ry1 - ry0)?;
    Ok(resample_region(
        &region,
        lx - rx0 as f64,
        ly - ry0 as f64,
        ext,
        ext,
        patch_size_px,
        patch_size_px,
    ))
}
