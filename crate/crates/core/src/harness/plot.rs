//! Minimal raster line plots written as PNG.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

const W: usize = 480;
const H: usize = 320;
const MARGIN: usize = 40;

struct Canvas {
    px: Vec<[u8; 3]>,
}

impl Canvas {
    fn new() -> Self {
        Self { px: vec![[255, 255, 255]; W * H] }
    }

    fn set(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < W && (y as usize) < H {
            self.px[y as usize * W + x as usize] = c;
        }
    }

    fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: [u8; 3]) {
        let steps = (x1 - x0).abs().max((y1 - y0).abs()).max(1);
        for i in 0..=steps {
            let x = x0 + (x1 - x0) * i / steps;
            let y = y0 + (y1 - y0) * i / steps;
            self.set(x, y, c);
        }
    }

    fn dot(&mut self, (x, y): (i64, i64), c: [u8; 3]) {
        for dy in -2..=2 {
            for dx in -2..=2 {
                self.set(x + dx, y + dy, c);
            }
        }
    }
}

/// One polyline with markers.
pub struct Series<'a> {
    pub points: &'a [(f64, f64)],
    pub color: [u8; 3],
}

/// Plots series on shared axes spanning their data range; an optional
/// vertical marker (e.g. a knee) is drawn in grey.
pub fn line_plot(path: &Path, series: &[Series], marker: Option<f64>) -> std::io::Result<()> {
    let all: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).collect();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in &all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if all.is_empty() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y1 = y0 + 1.0;
    }
    let map = |x: f64, y: f64| -> (i64, i64) {
        let px = MARGIN as f64 + (x - x0) / (x1 - x0) * (W - 2 * MARGIN) as f64;
        let py = (H - MARGIN) as f64 - (y - y0) / (y1 - y0) * (H - 2 * MARGIN) as f64;
        (px.round() as i64, py.round() as i64)
    };
    let mut c = Canvas::new();
    let axis = [0, 0, 0];
    c.line((MARGIN as i64, (H - MARGIN) as i64), ((W - MARGIN) as i64, (H - MARGIN) as i64), axis);
    c.line((MARGIN as i64, MARGIN as i64), (MARGIN as i64, (H - MARGIN) as i64), axis);
    if let Some(k) = marker {
        let (kx, _) = map(k, y0);
        c.line((kx, MARGIN as i64), (kx, (H - MARGIN) as i64), [160, 160, 160]);
    }
    for s in series {
        for w in s.points.windows(2) {
            c.line(map(w[0].0, w[0].1), map(w[1].0, w[1].1), s.color);
        }
        for &(x, y) in s.points {
            c.dot(map(x, y), s.color);
        }
    }
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, W as u32, H as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(std::io::Error::other)?;
    let data: Vec<u8> = c.px.iter().flatten().copied().collect();
    writer.write_image_data(&data).map_err(std::io::Error::other)?;
    Ok(())
}
