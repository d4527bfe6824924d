//! Bare-bones raster charts written as PNG. No text: series colors follow
//! [`PALETTE`] in the order the series appear in the matching CSV.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use adaptive_depth::Error;

pub const PALETTE: [[u8; 3]; 8] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
];

const WIDTH: usize = 640;
const HEIGHT: usize = 400;
const MARGIN: usize = 40;

pub struct Series<'a> {
    pub points: &'a [(f64, f64)],
}

struct Canvas {
    w: usize,
    h: usize,
    px: Vec<u8>,
}

impl Canvas {
    fn new(w: usize, h: usize) -> Self {
        Self { w, h, px: vec![255; w * h * 3] }
    }

    fn set(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.w && (y as usize) < self.h {
            let i = (y as usize * self.w + x as usize) * 3;
            self.px[i..i + 3].copy_from_slice(&c);
        }
    }

    fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: [u8; 3]) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.set(x, y, c);
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    fn fill(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, c: [u8; 3]) {
        for y in y0.min(y1)..=y0.max(y1) {
            for x in x0.min(x1)..=x0.max(x1) {
                self.set(x, y, c);
            }
        }
    }

    /// Axes with five ticks on each.
    fn axes(&mut self) {
        let black = [0, 0, 0];
        let (l, b) = (MARGIN as i64, (self.h - MARGIN) as i64);
        let (r, t) = ((self.w - MARGIN / 2) as i64, (MARGIN / 2) as i64);
        self.line((l, b), (r, b), black);
        self.line((l, b), (l, t), black);
        for i in 0..=5 {
            let x = l + (r - l) * i / 5;
            let y = b - (b - t) * i / 5;
            self.line((x, b), (x, b + 4), black);
            self.line((l - 4, y), (l, y), black);
        }
    }

    /// Legend swatches in the top-right corner.
    fn legend(&mut self, n: usize) {
        for i in 0..n {
            let x = (self.w - MARGIN / 2 - 14) as i64;
            let y = (MARGIN / 2 + 4 + i * 12) as i64;
            self.fill(x, y, x + 9, y + 7, PALETTE[i % PALETTE.len()]);
        }
    }

    fn save(&self, path: &Path) -> Result<(), Error> {
        let io = |e: std::io::Error| Error::Io {
            path: path.to_path_buf(),
            source: e,
        };
        let file = File::create(path).map_err(io)?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.w as u32, self.h as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let fmt = |e: png::EncodingError| Error::Format(format!("{}: {e}", path.display()));
        let mut writer = enc.write_header().map_err(fmt)?;
        writer.write_image_data(&self.px).map_err(fmt)?;
        writer.finish().map_err(fmt)
    }
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// One polyline per series. The y axis starts at zero.
pub fn line_chart(path: &Path, series: &[Series]) -> Result<(), Error> {
    let mut c = Canvas::new(WIDTH, HEIGHT);
    c.axes();
    let (x_lo, x_hi) = bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let (_, y_hi) = bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)).chain([0.0]));
    let (l, b) = (MARGIN as f64, (HEIGHT - MARGIN) as f64);
    let (r, t) = ((WIDTH - MARGIN / 2) as f64, (MARGIN / 2) as f64);
    let map = |(x, y): (f64, f64)| {
        let px = l + (x - x_lo) / (x_hi - x_lo) * (r - l);
        let py = b - y / y_hi * (b - t) * 0.9;
        (px.round() as i64, py.round() as i64)
    };
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        for w in s.points.windows(2) {
            c.line(map(w[0]), map(w[1]), color);
        }
        for &p in s.points {
            let (x, y) = map(p);
            c.fill(x - 1, y - 1, x + 1, y + 1, color);
        }
    }
    c.legend(series.len());
    c.save(path)
}

/// Grouped bars: `groups[g][i]` is the height of series `g` in bin `i`.
pub fn bar_chart(path: &Path, groups: &[Vec<f64>]) -> Result<(), Error> {
    let mut c = Canvas::new(WIDTH, HEIGHT);
    c.axes();
    let bins = groups.iter().map(Vec::len).max().unwrap_or(0);
    if bins > 0 && !groups.is_empty() {
        let (_, y_hi) = bounds(groups.iter().flatten().copied().chain([0.0]));
        let (l, b) = (MARGIN as f64, (HEIGHT - MARGIN) as f64);
        let (r, t) = ((WIDTH - MARGIN / 2) as f64, (MARGIN / 2) as f64);
        let slot = (r - l) / bins as f64;
        let bar = (slot / groups.len() as f64).max(1.0);
        for (g, heights) in groups.iter().enumerate() {
            for (i, &v) in heights.iter().enumerate() {
                let x0 = l + i as f64 * slot + g as f64 * bar;
                let top = b - v / y_hi * (b - t) * 0.9;
                c.fill(
                    x0.round() as i64 + 1,
                    top.round() as i64,
                    (x0 + bar).round() as i64 - 1,
                    b as i64 - 1,
                    PALETTE[g % PALETTE.len()],
                );
            }
        }
    }
    c.legend(groups.len());
    c.save(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charts_are_valid_pngs() {
        let dir = tempfile::tempdir().unwrap();
        let pts = [(0.0, 1.0), (1.0, 2.0), (2.0, 1.5)];
        let flat = [(0.0, 3.0), (5.0, 3.0)];
        line_chart(&dir.path().join("l.png"), &[Series { points: &pts }, Series { points: &flat }]).unwrap();
        bar_chart(&dir.path().join("b.png"), &[vec![0.2, 0.8], vec![0.5, 0.5]]).unwrap();
        for name in ["l.png", "b.png"] {
            let dec = png::Decoder::new(std::io::BufReader::new(File::open(dir.path().join(name)).unwrap()));
            let reader = dec.read_info().unwrap();
            assert_eq!(reader.info().width as usize, WIDTH);
            assert_eq!(reader.info().height as usize, HEIGHT);
        }
    }

    #[test]
    fn empty_inputs_still_render() {
        let dir = tempfile::tempdir().unwrap();
        line_chart(&dir.path().join("l.png"), &[]).unwrap();
        bar_chart(&dir.path().join("b.png"), &[]).unwrap();
    }
}
