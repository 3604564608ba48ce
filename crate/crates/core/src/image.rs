//! Plain 8-bit RGB buffers, boolean bitmaps, area resampling and PNG I/O.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, IoContext, Result};

pub const WHITE: [u8; 3] = [255, 255, 255];

/// Row-major interleaved RGB image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: u32, height: u32) -> Self {
        Self::filled(width, height, [0, 0, 0])
    }

    pub fn filled(width: u32, height: u32, color: [u8; 3]) -> Self {
        let n = width as usize * height as usize;
        let mut data = Vec::with_capacity(n * 3);
        for _ in 0..n {
            data.extend_from_slice(&color);
        }
        RgbImage { width, height, data }
    }

    pub fn from_raw(width: u32, height: u32, data: Vec<u8>) -> Result<Self> {
        if data.len() != width as usize * height as usize * 3 {
            return Err(Error::Shape(format!(
                "buffer of {} bytes does not hold a {width}x{height} RGB image",
                data.len()
            )));
        }
        Ok(RgbImage { width, height, data })
    }

    #[inline]
    fn offset(&self, x: u32, y: u32) -> usize {
        (y as usize * self.width as usize + x as usize) * 3
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> [u8; 3] {
        let o = self.offset(x, y);
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    #[inline]
    pub fn put(&mut self, x: u32, y: u32, c: [u8; 3]) {
        let o = self.offset(x, y);
        self.data[o..o + 3].copy_from_slice(&c);
    }

    pub fn crop(&self, x: u32, y: u32, w: u32, h: u32) -> RgbImage {
        let mut out = Vec::with_capacity(w as usize * h as usize * 3);
        for row in y..y + h {
            let o = self.offset(x, row);
            out.extend_from_slice(&self.data[o..o + w as usize * 3]);
        }
        RgbImage { width: w, height: h, data: out }
    }

    /// Copies `src` into `self` with its top-left corner at `(x, y)`.
    pub fn paste(&mut self, src: &RgbImage, x: u32, y: u32) {
        for row in 0..src.height {
            let s = src.offset(0, row);
            let d = self.offset(x, y + row);
            self.data[d..d + src.width as usize * 3]
                .copy_from_slice(&src.data[s..s + src.width as usize * 3]);
        }
    }

    /// Quarter turn clockwise: `(x, y)` moves to `(h - 1 - y, x)`.
    pub fn rotate90(&self) -> RgbImage {
        let (w, h) = (self.width, self.height);
        let mut out = RgbImage::new(h, w);
        for y in 0..h {
            for x in 0..w {
                out.put(h - 1 - y, x, self.get(x, y));
            }
        }
        out
    }

    /// Inverse of [`rotate90`](Self::rotate90).
    pub fn rotate270(&self) -> RgbImage {
        let (w, h) = (self.width, self.height);
        let mut out = RgbImage::new(h, w);
        for y in 0..h {
            for x in 0..w {
                out.put(y, w - 1 - x, self.get(x, y));
            }
        }
        out
    }

    pub fn resize_area(&self, width: u32, height: u32) -> RgbImage {
        resample_region(
            self,
            0.0,
            0.0,
            self.width as f64,
            self.height as f64,
            width,
            height,
        )
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        write_png(path, self.width, self.height, png::ColorType::Rgb, png::BitDepth::Eight, &self.data)
    }

    pub fn load_png(path: &Path) -> Result<RgbImage> {
        let (w, h, color, data) = read_png(path)?;
        let data = match color {
            png::ColorType::Rgb => data,
            png::ColorType::Rgba => data.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
            png::ColorType::Grayscale => data.iter().flat_map(|&v| [v, v, v]).collect(),
            png::ColorType::GrayscaleAlpha => {
                data.chunks_exact(2).flat_map(|p| [p[0], p[0], p[0]]).collect()
            }
            png::ColorType::Indexed => {
                return Err(Error::Png(format!("{}: unexpanded palette image", path.display())))
            }
        };
        RgbImage::from_raw(w, h, data)
    }
}

/// Boolean raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitmap {
    pub width: u32,
    pub height: u32,
    pub data: Vec<bool>,
}

impl Bitmap {
    pub fn new(width: u32, height: u32, value: bool) -> Self {
        Bitmap {
            width,
            height,
            data: vec![value; width as usize * height as usize],
        }
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> bool {
        self.data[y as usize * self.width as usize + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, v: bool) {
        let w = self.width as usize;
        self.data[y as usize * w + x as usize] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|v| *v)
    }

    pub fn crop(&self, x: u32, y: u32, w: u32, h: u32) -> Bitmap {
        let mut out = Bitmap::new(w, h, false);
        for row in 0..h {
            for col in 0..w {
                out.set(col, row, self.get(x + col, y + row));
            }
        }
        out
    }

    pub fn rotate90(&self) -> Bitmap {
        let (w, h) = (self.width, self.height);
        let mut out = Bitmap::new(h, w, false);
        for y in 0..h {
            for x in 0..w {
                out.set(h - 1 - y, x, self.get(x, y));
            }
        }
        out
    }

    pub fn rotate270(&self) -> Bitmap {
        let (w, h) = (self.width, self.height);
        let mut out = Bitmap::new(h, w, false);
        for y in 0..h {
            for x in 0..w {
                out.set(y, w - 1 - x, self.get(x, y));
            }
        }
        out
    }

    pub fn iou(&self, other: &Bitmap) -> f64 {
        assert_eq!((self.width, self.height), (other.width, other.height));
        let (mut inter, mut union) = (0usize, 0usize);
        for (a, b) in self.data.iter().zip(&other.data) {
            inter += (*a && *b) as usize;
            union += (*a || *b) as usize;
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// 1-bit grayscale PNG, white = true.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let stride = (self.width as usize).div_ceil(8);
        let mut packed = vec![0u8; stride * self.height as usize];
        for y in 0..self.height as usize {
            for x in 0..self.width as usize {
                if self.data[y * self.width as usize + x] {
                    packed[y * stride + x / 8] |= 0x80 >> (x % 8);
                }
            }
        }
        write_png(path, self.width, self.height, png::ColorType::Grayscale, png::BitDepth::One, &packed)
    }

    /// Any grayscale or colour PNG; nonzero luminance counts as set.
    pub fn load_png(path: &Path) -> Result<Bitmap> {
        let img = RgbImage::load_png(path)?;
        let data = img
            .data
            .chunks_exact(3)
            .map(|p| p[0] as u32 + p[1] as u32 + p[2] as u32 > 0)
            .collect();
        Ok(Bitmap {
            width: img.width,
            height: img.height,
            data,
        })
    }
}

fn write_png(
    path: &Path,
    width: u32,
    height: u32,
    color: png::ColorType,
    depth: png::BitDepth,
    data: &[u8],
) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).at(parent)?;
    }
    let file = File::create(path).at(path)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width, height);
    enc.set_color(color);
    enc.set_depth(depth);
    let mut writer = enc
        .write_header()
        .map_err(|e| Error::Png(format!("{}: {e}", path.display())))?;
    writer
        .write_image_data(data)
        .map_err(|e| Error::Png(format!("{}: {e}", path.display())))?;
    writer
        .finish()
        .map_err(|e| Error::Png(format!("{}: {e}", path.display())))
}

fn read_png(path: &Path) -> Result<(u32, u32, png::ColorType, Vec<u8>)> {
    let file = File::open(path).at(path)?;
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec
        .read_info()
        .map_err(|e| Error::Png(format!("{}: {e}", path.display())))?;
    let mut buf = vec![
        0;
        reader
            .output_buffer_size()
            .ok_or_else(|| Error::Png(format!("{}: image too large", path.display())))?
    ];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Png(format!("{}: {e}", path.display())))?;
    buf.truncate(info.buffer_size());
    Ok((info.width, info.height, info.color_type, buf))
}

/// Source taps for one output sample of a box filter: first index and the
/// fractional overlap of each consecutive source sample.
struct Taps {
    start: usize,
    weights: Vec<f32>,
}

fn area_taps(origin: f64, extent: f64, out_len: u32, src_len: u32) -> Vec<Taps> {
    let scale = extent / out_len as f64;
    (0..out_len)
        .map(|i| {
            let a = origin + i as f64 * scale;
            let b = a + scale;
            let first = a.floor().max(0.0) as usize;
            let last = (b.ceil() as usize).min(src_len as usize).max(first + 1);
            let mut weights = Vec::with_capacity(last - first);
            for s in first..last {
                let lo = a.max(s as f64);
                let hi = b.min(s as f64 + 1.0);
                weights.push(((hi - lo).max(0.0) / scale) as f32);
            }
            Taps { start: first, weights }
        })
        .collect()
}

/// Area-averaging resample of the source rectangle
/// `[x0, x0 + w) x [y0, y0 + h)` (fractional source pixels) onto an
/// `out_w x out_h` grid. At scale one on integer offsets this is an exact copy.
pub fn resample_region(
    src: &RgbImage,
    x0: f64,
    y0: f64,
    w: f64,
    h: f64,
    out_w: u32,
    out_h: u32,
) -> RgbImage {
    let exact = out_w as f64 == w
        && out_h as f64 == h
        && x0.fract() == 0.0
        && y0.fract() == 0.0
        && x0 >= 0.0
        && y0 >= 0.0;
    if exact {
        return src.crop(x0 as u32, y0 as u32, out_w, out_h);
    }
    let xt = area_taps(x0, w, out_w, src.width);
    let yt = area_taps(y0, h, out_h, src.height);
    let row_lo = yt.first().map(|t| t.start).unwrap_or(0);
    let row_hi = yt
        .last()
        .map(|t| t.start + t.weights.len())
        .unwrap_or(0);
    // Horizontal pass over the rows actually needed.
    let ow = out_w as usize;
    let mut tmp = vec![0f32; (row_hi - row_lo) * ow * 3];
    for (r, sy) in (row_lo..row_hi).enumerate() {
        let row = &src.data[sy * src.width as usize * 3..(sy + 1) * src.width as usize * 3];
        let dst = &mut tmp[r * ow * 3..(r + 1) * ow * 3];
        for (ox, t) in xt.iter().enumerate() {
            let (mut a, mut b, mut c) = (0f32, 0f32, 0f32);
            for (k, wgt) in t.weights.iter().enumerate() {
                let p = (t.start + k) * 3;
                a += row[p] as f32 * wgt;
                b += row[p + 1] as f32 * wgt;
                c += row[p + 2] as f32 * wgt;
            }
            dst[ox * 3] = a;
            dst[ox * 3 + 1] = b;
            dst[ox * 3 + 2] = c;
        }
    }
    let mut out = Vec::with_capacity(ow * out_h as usize * 3);
    let mut acc = vec![0f32; ow * 3];
    for t in &yt {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for (k, wgt) in t.weights.iter().enumerate() {
            let r = t.start + k - row_lo;
            let line = &tmp[r * ow * 3..(r + 1) * ow * 3];
            for (a, v) in acc.iter_mut().zip(line) {
                *a += v * wgt;
            }
        }
        out.extend(acc.iter().map(|v| (v + 0.5).floor().clamp(0.0, 255.0) as u8));
    }
    RgbImage {
        width: out_w,
        height: out_h,
        data: out,
    }
}

/// Halves both dimensions (rounding up) with 2x2 box averaging; pixels past
/// the source edge read as white.
pub fn downsample2(src: &RgbImage) -> RgbImage {
    let w = src.width.div_ceil(2);
    let h = src.height.div_ceil(2);
    let mut out = RgbImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0u32; 3];
            for dy in 0..2 {
                for dx in 0..2 {
                    let (sx, sy) = (2 * x + dx, 2 * y + dy);
                    let p = if sx < src.width && sy < src.height { src.get(sx, sy) } else { WHITE };
                    for c in 0..3 {
                        acc[c] += p[c] as u32;
                    }
                }
            }
            out.put(x, y, [((acc[0] + 2) / 4) as u8, ((acc[1] + 2) / 4) as u8, ((acc[2] + 2) / 4) as u8]);
        }
    }
    out
}

/// Bilinear upsampling of a scalar grid with half-pixel centers.
pub fn bilinear_resize(src: &[f32], sw: usize, sh: usize, dw: usize, dh: usize) -> Vec<f32> {
    let mut out = vec![0f32; dw * dh];
    let sx = sw as f64 / dw as f64;
    let sy = sh as f64 / dh as f64;
    for y in 0..dh {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (sh - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let ty = (fy - y0 as f64) as f32;
        for x in 0..dw {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (sw - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(sw - 1);
            let tx = (fx - x0 as f64) as f32;
            let top = src[y0 * sw + x0] * (1.0 - tx) + src[y0 * sw + x1] * tx;
            let bot = src[y1 * sw + x0] * (1.0 - tx) + src[y1 * sw + x1] * tx;
            out[y * dw + x] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient(w: u32, h: u32) -> RgbImage {
        let mut img = RgbImage::new(w, h);
        for y in 0..h {
            for x in 0..w {
                img.put(x, y, [(x * 7 % 256) as u8, (y * 13 % 256) as u8, ((x + y) % 256) as u8]);
            }
        }
        img
    }

    #[test]
    fn identity_resample_is_exact_copy() {
        let img = gradient(37, 21);
        assert_eq!(img.resize_area(37, 21), img);
    }

    #[test]
    fn integer_box_downscale_matches_mean() {
        let img = gradient(8, 4);
        let out = img.resize_area(2, 1);
        for ox in 0..2 {
            let mut s = [0f64; 3];
            for y in 0..4 {
                for x in ox * 4..ox * 4 + 4 {
                    let p = img.get(x, y);
                    for c in 0..3 {
                        s[c] += p[c] as f64;
                    }
                }
            }
            let p = out.get(ox, 0);
            for c in 0..3 {
                assert_eq!(p[c], (s[c] / 16.0 + 0.5).floor() as u8);
            }
        }
    }

    #[test]
    fn rotations_invert() {
        let img = gradient(5, 3);
        let r = img.rotate90();
        assert_eq!((r.width, r.height), (3, 5));
        assert_eq!(r.rotate270(), img);
        // top-left pixel goes to the top-right corner
        assert_eq!(r.get(2, 0), img.get(0, 0));
    }

    #[test]
    fn constant_image_stays_constant() {
        let img = RgbImage::filled(33, 17, [10, 200, 90]);
        let out = img.resize_area(10, 7);
        assert!(out.data.chunks(3).all(|p| p == [10, 200, 90]));
    }

    #[test]
    fn checker_vanishes_under_downsample2() {
        let mut img = RgbImage::new(16, 16);
        for y in 0..16 {
            for x in 0..16 {
                let v = if (x + y) % 2 == 0 { 140 } else { 100 };
                img.put(x, y, [v, v, v]);
            }
        }
        let d = downsample2(&img);
        assert!(d.data.iter().all(|v| *v == 120));
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = gradient(9, 5);
        let p = dir.path().join("a.png");
        img.save_png(&p).unwrap();
        assert_eq!(RgbImage::load_png(&p).unwrap(), img);
        let mut m = Bitmap::new(11, 3, false);
        m.set(0, 0, true);
        m.set(10, 2, true);
        m.set(8, 1, true);
        let q = dir.path().join("m.png");
        m.save_png(&q).unwrap();
        assert_eq!(Bitmap::load_png(&q).unwrap(), m);
    }
}
