//! Minimal PNG line charts for the ablation sweeps. Tick labels use a 3x5
//! bitmap font covering digits, `.`, `x`, `-` and `k`.

use std::path::Path;

use crate::error::Result;
use crate::image::RgbImage;

const W: u32 = 480;
const H: u32 = 320;
const LEFT: u32 = 44;
const RIGHT: u32 = 16;
const TOP: u32 = 16;
const BOTTOM: u32 = 36;
const SCALE: u32 = 2;

fn glyph(c: char) -> Option<[u8; 5]> {
    // Rows top to bottom, 3 bits each, MSB left.
    Some(match c {
        '0' => [7, 5, 5, 5, 7],
        '1' => [2, 6, 2, 2, 7],
        '2' => [7, 1, 7, 4, 7],
        '3' => [7, 1, 7, 1, 7],
        '4' => [5, 5, 7, 1, 1],
        '5' => [7, 4, 7, 1, 7],
        '6' => [7, 4, 7, 5, 7],
        '7' => [7, 1, 1, 2, 2],
        '8' => [7, 5, 7, 5, 7],
        '9' => [7, 5, 7, 1, 7],
        '.' => [0, 0, 0, 0, 2],
        '-' => [0, 0, 7, 0, 0],
        'x' => [0, 5, 2, 5, 0],
        'k' => [4, 5, 6, 5, 5],
        _ => return None,
    })
}

fn text_width(s: &str) -> u32 {
    s.chars().count() as u32 * 4 * SCALE
}

fn draw_text(img: &mut RgbImage, s: &str, x: u32, y: u32, color: [u8; 3]) {
    let mut cx = x;
    for c in s.chars() {
        if let Some(g) = glyph(c) {
            for (r, bits) in g.iter().enumerate() {
                for b in 0..3 {
                    if bits & (4 >> b) != 0 {
                        for dy in 0..SCALE {
                            for dx in 0..SCALE {
                                let px = cx + b * SCALE + dx;
                                let py = y + r as u32 * SCALE + dy;
                                if px < img.width && py < img.height {
                                    img.put(px, py, color);
                                }
                            }
                        }
                    }
                }
            }
        }
        cx += 4 * SCALE;
    }
}

fn line(img: &mut RgbImage, (x0, y0): (f64, f64), (x1, y1): (f64, f64), color: [u8; 3]) {
    let n = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    for i in 0..=n {
        let t = i as f64 / n as f64;
        let (x, y) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
        for (dx, dy) in [(0, 0), (1, 0), (0, 1)] {
            let (px, py) = (x.round() as i64 + dx, y.round() as i64 + dy);
            if px >= 0 && py >= 0 && (px as u32) < img.width && (py as u32) < img.height {
                img.put(px as u32, py as u32, color);
            }
        }
    }
}

pub const SERIES_COLORS: [[u8; 3]; 4] = [[31, 119, 180], [214, 39, 40], [44, 160, 44], [255, 127, 14]];

/// Line chart of one or more series over shared categorical x positions,
/// y fixed to [0, 1] with gridlines every 0.2. `NaN` values leave gaps.
pub fn line_chart(path: &Path, x_labels: &[String], series: &[Vec<f64>]) -> Result<()> {
    let mut img = RgbImage::filled(W, H, [255, 255, 255]);
    let (pw, ph) = ((W - LEFT - RIGHT) as f64, (H - TOP - BOTTOM) as f64);
    let n = x_labels.len().max(1);
    let xpos = |i: usize| LEFT as f64 + if n == 1 { pw / 2.0 } else { pw * i as f64 / (n - 1) as f64 };
    let ypos = |v: f64| TOP as f64 + ph * (1.0 - v.clamp(0.0, 1.0));
    for k in 0..=5 {
        let v = k as f64 * 0.2;
        let y = ypos(v);
        line(&mut img, (LEFT as f64, y), (LEFT as f64 + pw, y), [225, 225, 225]);
        let label = format!("{v:.1}");
        draw_text(&mut img, &label, LEFT - 6 - text_width(&label), y as u32 - 5, [60, 60, 60]);
    }
    line(&mut img, (LEFT as f64, TOP as f64), (LEFT as f64, TOP as f64 + ph), [0, 0, 0]);
    line(&mut img, (LEFT as f64, TOP as f64 + ph), (LEFT as f64 + pw, TOP as f64 + ph), [0, 0, 0]);
    for (i, l) in x_labels.iter().enumerate() {
        let x = xpos(i);
        line(&mut img, (x, TOP as f64 + ph), (x, TOP as f64 + ph + 4.0), [0, 0, 0]);
        let tw = text_width(l) as f64;
        let tx = (x - tw / 2.0).clamp(0.0, (W as f64 - tw).max(0.0));
        draw_text(&mut img, l, tx as u32, H - BOTTOM + 12, [60, 60, 60]);
    }
    for (s, values) in series.iter().enumerate() {
        let color = SERIES_COLORS[s % SERIES_COLORS.len()];
        let pts: Vec<Option<(f64, f64)>> = values
            .iter()
            .enumerate()
            .map(|(i, v)| v.is_finite().then(|| (xpos(i), ypos(*v))))
            .collect();
        for w in pts.windows(2) {
            if let (Some(a), Some(b)) = (w[0], w[1]) {
                line(&mut img, a, b, color);
            }
        }
        for p in pts.iter().flatten() {
            for dy in -3i64..=3 {
                for dx in -3i64..=3 {
                    let (px, py) = (p.0.round() as i64 + dx, p.1.round() as i64 + dy);
                    if px >= 0 && py >= 0 && (px as u32) < W && (py as u32) < H {
                        img.put(px as u32, py as u32, color);
                    }
                }
            }
        }
    }
    img.save_png(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_points_and_gaps() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.png");
        let labels: Vec<String> = ["0.59", "1.18", "224x112"].iter().map(|s| s.to_string()).collect();
        line_chart(&p, &labels, &[vec![0.5, f64::NAN, 1.0], vec![0.0, 0.25, 0.75]]).unwrap();
        let img = RgbImage::load_png(&p).unwrap();
        assert_eq!((img.width, img.height), (W, H));
        // First series point at x index 0, y = 0.5.
        let (x, y) = (LEFT, TOP + (H - TOP - BOTTOM) / 2);
        assert_eq!(img.get(x, y), SERIES_COLORS[0]);
        assert!(glyph('x').is_some() && glyph('?').is_none());
    }
}
