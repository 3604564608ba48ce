//! Tiled multi-resolution TIFF writer.
//!
//! Level 0 comes from a [`TileSource`]; each further level is the 2x2 box
//! average of the one above. Tiles with identical content are stored once and
//! referenced from several offsets, so large slides built from a handful of
//! repeated tiles stay small on disk.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Seek, SeekFrom, Write};
use std::path::Path;
use std::sync::Arc;

use flate2::write::ZlibEncoder;
use flate2::Compression;

use crate::error::{Error, IoContext, Result};
use crate::image::{RgbImage, WHITE};

/// Supplies level-0 tiles. Tiles that return equal keys must have equal
/// content; the writer renders each key once.
pub trait TileSource {
    fn tile_key(&self, tx: u32, ty: u32) -> u64;
    /// `tile x tile` RGB pixels for the tile at `(tx, ty)`, padded with white
    /// past the image edge.
    fn render(&self, tx: u32, ty: u32, tile: u32) -> Vec<u8>;
}

/// Wraps an in-memory level-0 image; every tile is distinct.
pub struct ImageSource<'a>(pub &'a RgbImage);

impl TileSource for ImageSource<'_> {
    fn tile_key(&self, tx: u32, ty: u32) -> u64 {
        ((ty as u64) << 32) | tx as u64
    }

    fn render(&self, tx: u32, ty: u32, tile: u32) -> Vec<u8> {
        let img = self.0;
        let mut buf = Vec::with_capacity(tile as usize * tile as usize * 3);
        for row in 0..tile {
            let y = ty * tile + row;
            for col in 0..tile {
                let x = tx * tile + col;
                if x < img.width && y < img.height {
                    buf.extend_from_slice(&img.get(x, y));
                } else {
                    buf.extend_from_slice(&WHITE);
                }
            }
        }
        buf
    }
}

#[derive(Debug, Clone)]
pub struct PyramidLayout {
    pub width: u32,
    pub height: u32,
    pub tile: u32,
    pub levels: usize,
    pub base_mpp: f64,
}

struct Level {
    width: u32,
    height: u32,
    tiles_x: u32,
    tiles_y: u32,
    ids: Vec<u32>,
}

struct Blob {
    offset: u32,
    len: u32,
}

/// Writes the pyramid described by `layout` to `path`.
pub fn write_pyramid(path: &Path, layout: &PyramidLayout, source: &dyn TileSource) -> Result<()> {
    let t = layout.tile;
    if t == 0 || t % 16 != 0 {
        return Err(Error::Argument(format!("tile size {t} must be a positive multiple of 16")));
    }
    if layout.width == 0 || layout.height == 0 || layout.levels == 0 {
        return Err(Error::Argument("empty pyramid".into()));
    }
    if !(layout.base_mpp > 0.0) {
        return Err(Error::Argument(format!("base mpp {} must be positive", layout.base_mpp)));
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).at(parent)?;
    }
    let file = File::create(path).at(path)?;
    let mut out = BufWriter::new(file);
    // Classic little-endian header; first IFD offset patched at the end.
    out.write_all(b"II*\0\0\0\0\0").at(path)?;
    let mut pos: u64 = 8;

    let mut blobs: Vec<Blob> = Vec::new();
    let mut emit = |out: &mut BufWriter<File>, pos: &mut u64, raw: &[u8]| -> Result<u32> {
        let mut enc = ZlibEncoder::new(Vec::new(), Compression::fast());
        enc.write_all(raw).at(path)?;
        let bytes = enc.finish().at(path)?;
        let offset = u32::try_from(*pos)
            .map_err(|_| Error::Argument("pyramid exceeds 4 GiB classic TIFF limit".into()))?;
        out.write_all(&bytes).at(path)?;
        *pos += bytes.len() as u64;
        if *pos % 2 == 1 {
            out.write_all(&[0]).at(path)?;
            *pos += 1;
        }
        blobs.push(Blob {
            offset,
            len: bytes.len() as u32,
        });
        Ok((blobs.len() - 1) as u32)
    };

    // Level 0.
    let tiles_x = layout.width.div_ceil(t);
    let tiles_y = layout.height.div_ceil(t);
    let mut by_key: HashMap<u64, u32> = HashMap::new();
    let mut raw: HashMap<u32, Arc<Vec<u8>>> = HashMap::new();
    let mut ids = Vec::with_capacity((tiles_x * tiles_y) as usize);
    for ty in 0..tiles_y {
        for tx in 0..tiles_x {
            let key = source.tile_key(tx, ty);
            let id = match by_key.get(&key) {
                Some(&id) => id,
                None => {
                    let pixels = source.render(tx, ty, t);
                    debug_assert_eq!(pixels.len(), (t * t * 3) as usize);
                    let id = emit(&mut out, &mut pos, &pixels)?;
                    by_key.insert(key, id);
                    raw.insert(id, Arc::new(pixels));
                    id
                }
            };
            ids.push(id);
        }
    }
    let mut levels = vec![Level {
        width: layout.width,
        height: layout.height,
        tiles_x,
        tiles_y,
        ids,
    }];

    let white: Arc<Vec<u8>> = Arc::new(WHITE.repeat((t * t) as usize));
    for _ in 1..layout.levels {
        let prev = levels.last().expect("level 0 exists");
        if prev.width == 1 && prev.height == 1 {
            break;
        }
        let width = prev.width.div_ceil(2);
        let height = prev.height.div_ceil(2);
        let tiles_x = width.div_ceil(t);
        let tiles_y = height.div_ceil(t);
        let mut memo: HashMap<[Option<u32>; 4], u32> = HashMap::new();
        let mut next_raw: HashMap<u32, Arc<Vec<u8>>> = HashMap::new();
        let mut ids = Vec::with_capacity((tiles_x * tiles_y) as usize);
        for ty in 0..tiles_y {
            for tx in 0..tiles_x {
                let child = |dx: u32, dy: u32| -> Option<u32> {
                    let (cx, cy) = (2 * tx + dx, 2 * ty + dy);
                    (cx < prev.tiles_x && cy < prev.tiles_y)
                        .then(|| prev.ids[(cy * prev.tiles_x + cx) as usize])
                };
                let key = [child(0, 0), child(1, 0), child(0, 1), child(1, 1)];
                let id = match memo.get(&key) {
                    Some(&id) => id,
                    None => {
                        let get = |k: Option<u32>| k.map(|i| raw[&i].clone()).unwrap_or_else(|| white.clone());
                        let pixels = downsample_quad(
                            [&get(key[0]), &get(key[1]), &get(key[2]), &get(key[3])],
                            t,
                        );
                        let id = emit(&mut out, &mut pos, &pixels)?;
                        memo.insert(key, id);
                        next_raw.insert(id, Arc::new(pixels));
                        id
                    }
                };
                ids.push(id);
            }
        }
        raw = next_raw;
        levels.push(Level {
            width,
            height,
            tiles_x,
            tiles_y,
            ids,
        });
    }

    // IFDs, chained.
    let mut ifd_offsets = Vec::with_capacity(levels.len());
    let mut next_ptr_positions = Vec::with_capacity(levels.len());
    for (li, level) in levels.iter().enumerate() {
        let mpp = layout.base_mpp * layout.width as f64 / level.width as f64;
        let (ifd_at, next_at) = write_ifd(&mut out, &mut pos, li, level, t, mpp, &blobs, path)?;
        ifd_offsets.push(ifd_at);
        next_ptr_positions.push(next_at);
    }
    out.flush().at(path)?;
    let mut file = out.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    file.seek(SeekFrom::Start(4)).at(path)?;
    file.write_all(&ifd_offsets[0].to_le_bytes()).at(path)?;
    for i in 0..levels.len() - 1 {
        file.seek(SeekFrom::Start(next_ptr_positions[i])).at(path)?;
        file.write_all(&ifd_offsets[i + 1].to_le_bytes()).at(path)?;
    }
    file.sync_all().ok();
    Ok(())
}

fn downsample_quad(children: [&[u8]; 4], t: u32) -> Vec<u8> {
    let t = t as usize;
    let half = t / 2;
    let mut out = vec![0u8; t * t * 3];
    for (q, child) in children.iter().enumerate() {
        let ox = (q % 2) * half;
        let oy = (q / 2) * half;
        for y in 0..half {
            for x in 0..half {
                for c in 0..3 {
                    let at = |xx: usize, yy: usize| child[(yy * t + xx) * 3 + c] as u32;
                    let s = at(2 * x, 2 * y) + at(2 * x + 1, 2 * y) + at(2 * x, 2 * y + 1) + at(2 * x + 1, 2 * y + 1);
                    out[((oy + y) * t + ox + x) * 3 + c] = ((s + 2) / 4) as u8;
                }
            }
        }
    }
    out
}

enum Val {
    Short(Vec<u16>),
    Long(Vec<u32>),
    Rational(u32, u32),
}

#[allow(clippy::too_many_arguments)]
fn write_ifd(
    out: &mut BufWriter<File>,
    pos: &mut u64,
    level_index: usize,
    level: &Level,
    tile: u32,
    mpp: f64,
    blobs: &[Blob],
    path: &Path,
) -> Result<(u32, u64)> {
    // Pixels per centimetre as a rational with a fixed denominator so the
    // reader recovers mpp to about nine significant digits.
    let den: u32 = 1000;
    let px_per_cm = (10_000.0 / mpp * den as f64).round();
    if px_per_cm > u32::MAX as f64 || px_per_cm < 1.0 {
        return Err(Error::Argument(format!("mpp {mpp} not representable")));
    }
    let res = Val::Rational(px_per_cm as u32, den);
    let offsets: Vec<u32> = level.ids.iter().map(|&i| blobs[i as usize].offset).collect();
    let counts: Vec<u32> = level.ids.iter().map(|&i| blobs[i as usize].len).collect();
    let entries: Vec<(u16, Val)> = vec![
        (254, Val::Long(vec![if level_index == 0 { 0 } else { 1 }])),
        (256, Val::Long(vec![level.width])),
        (257, Val::Long(vec![level.height])),
        (258, Val::Short(vec![8, 8, 8])),
        (259, Val::Short(vec![8])),
        (262, Val::Short(vec![2])),
        (277, Val::Short(vec![3])),
        (282, res),
        (283, Val::Rational(px_per_cm as u32, den)),
        (284, Val::Short(vec![1])),
        (296, Val::Short(vec![3])),
        (322, Val::Long(vec![tile])),
        (323, Val::Long(vec![tile])),
        (324, Val::Long(offsets)),
        (325, Val::Long(counts)),
    ];
    debug_assert_eq!(level.ids.len(), (level.tiles_x * level.tiles_y) as usize);

    // Out-of-line values first, then the directory itself.
    let mut inline: Vec<(u16, u16, u32, [u8; 4])> = Vec::new();
    for (tag, val) in &entries {
        let (typ, count, bytes): (u16, u32, Vec<u8>) = match val {
            Val::Short(v) => (3, v.len() as u32, v.iter().flat_map(|x| x.to_le_bytes()).collect()),
            Val::Long(v) => (4, v.len() as u32, v.iter().flat_map(|x| x.to_le_bytes()).collect()),
            Val::Rational(n, d) => (5, 1, [n.to_le_bytes(), d.to_le_bytes()].concat()),
        };
        let mut field = [0u8; 4];
        if bytes.len() <= 4 {
            field[..bytes.len()].copy_from_slice(&bytes);
        } else {
            let at = u32::try_from(*pos).map_err(|_| Error::Argument("file too large".into()))?;
            out.write_all(&bytes).at(path)?;
            *pos += bytes.len() as u64;
            if *pos % 2 == 1 {
                out.write_all(&[0]).at(path)?;
                *pos += 1;
            }
            field = at.to_le_bytes();
        }
        inline.push((*tag, typ, count, field));
    }
    let ifd_at = u32::try_from(*pos).map_err(|_| Error::Argument("file too large".into()))?;
    out.write_all(&(inline.len() as u16).to_le_bytes()).at(path)?;
    for (tag, typ, count, field) in &inline {
        out.write_all(&tag.to_le_bytes()).at(path)?;
        out.write_all(&typ.to_le_bytes()).at(path)?;
        out.write_all(&count.to_le_bytes()).at(path)?;
        out.write_all(field).at(path)?;
    }
    let next_at = *pos + 2 + 12 * inline.len() as u64;
    out.write_all(&0u32.to_le_bytes()).at(path)?;
    *pos = next_at + 4;
    Ok((ifd_at, next_at))
}
