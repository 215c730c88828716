//! Small raster figures: image contact sheets, metric-vs-steps line plots and
//! temporal cross-section strips. Figures carry no text; the accompanying CSV
//! holds the numbers.

use crate::error::{Error, Result};
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

/// An 8-bit RGB canvas.
#[derive(Clone, Debug)]
pub struct Canvas {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[u8; 3]>,
}

impl Canvas {
    pub fn new(width: usize, height: usize, fill: [u8; 3]) -> Self {
        Self { width, height, pixels: vec![fill; width * height] }
    }

    pub fn set(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            self.pixels[y as usize * self.width + x as usize] = c;
        }
    }

    /// Pastes a grayscale image in [0, 1] with its top-left corner at (x, y).
    pub fn blit_gray(&mut self, img: &[f32], h: usize, w: usize, x: usize, y: usize) {
        for r in 0..h {
            for c in 0..w {
                let v = (img[r * w + c].clamp(0.0, 1.0) * 255.0).round() as u8;
                self.set((x + c) as i64, (y + r) as i64, [v; 3]);
            }
        }
    }

    /// Bresenham line.
    pub fn line(&mut self, (mut x0, mut y0): (i64, i64), (x1, y1): (i64, i64), c: [u8; 3]) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let mut err = dx + dy;
        loop {
            self.set(x0, y0, c);
            if x0 == x1 && y0 == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x0 += sx;
            }
            if e2 <= dx {
                err += dx;
                y0 += sy;
            }
        }
    }

    fn square(&mut self, x: i64, y: i64, r: i64, c: [u8; 3]) {
        for dy in -r..=r {
            for dx in -r..=r {
                self.set(x + dx, y + dy, c);
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let bytes: Vec<u8> = self.pixels.iter().flatten().copied().collect();
        enc.write_header()
            .and_then(|mut w| w.write_image_data(&bytes))
            .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))
    }
}

/// Tiles equally sized grayscale images row by row with a 2-pixel gutter.
pub fn contact_sheet(images: &[&[f32]], h: usize, w: usize, columns: usize) -> Result<Canvas> {
    if images.is_empty() || columns == 0 {
        return Err(Error::invalid("contact sheet needs at least one image and one column"));
    }
    if let Some(bad) = images.iter().find(|i| i.len() != h * w) {
        return Err(Error::invalid(format!("image of {} values on a {h}x{w} sheet", bad.len())));
    }
    const GAP: usize = 2;
    let cols = columns.min(images.len());
    let rows = images.len().div_ceil(cols);
    let mut canvas = Canvas::new(cols * (w + GAP) + GAP, rows * (h + GAP) + GAP, [40, 40, 40]);
    for (i, img) in images.iter().enumerate() {
        let (r, c) = (i / cols, i % cols);
        canvas.blit_gray(img, h, w, GAP + c * (w + GAP), GAP + r * (h + GAP));
    }
    Ok(canvas)
}

const PALETTE: [[u8; 3]; 6] = [[31, 119, 180], [255, 127, 14], [44, 160, 44], [214, 39, 40], [148, 103, 189], [140, 86, 75]];

/// One line per series over a log2 x axis (DDIM step counts). Points are
/// marked; axes are drawn at the data extents.
pub fn steps_plot(series: &[(String, Vec<(usize, f64)>)], width: usize, height: usize) -> Result<Canvas> {
    let points: Vec<(f64, f64)> = series
        .iter()
        .flat_map(|(_, s)| s.iter().map(|&(k, v)| ((k.max(1) as f64).log2(), v)))
        .filter(|p| p.1.is_finite())
        .collect();
    if points.is_empty() {
        return Err(Error::invalid("nothing to plot"));
    }
    let (xmin, xmax) = points.iter().fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p.0), b.max(p.0)));
    let (ymin, ymax) = points.iter().fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p.1), b.max(p.1)));
    let pad = 24.0;
    let (pw, ph) = (width as f64 - 2.0 * pad, height as f64 - 2.0 * pad);
    let span = |lo: f64, hi: f64| if hi > lo { hi - lo } else { 1.0 };
    let to_px = |x: f64, y: f64| {
        (
            (pad + (x - xmin) / span(xmin, xmax) * pw).round() as i64,
            (pad + ph - (y - ymin) / span(ymin, ymax) * ph).round() as i64,
        )
    };
    let mut canvas = Canvas::new(width, height, [255; 3]);
    let (x0, y0) = to_px(xmin, ymin);
    let (x1, y1) = to_px(xmax, ymax);
    canvas.line((x0, y0), (x1, y0), [0; 3]);
    canvas.line((x0, y0), (x0, y1), [0; 3]);
    for (i, (_, s)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let px: Vec<(i64, i64)> = s
            .iter()
            .filter(|p| p.1.is_finite())
            .map(|&(k, v)| to_px((k.max(1) as f64).log2(), v))
            .collect();
        for w in px.windows(2) {
            canvas.line(w[0], w[1], color);
        }
        for &(x, y) in &px {
            canvas.square(x, y, 2, color);
        }
    }
    Ok(canvas)
}

/// Stacks row `row` of every frame of a `[T, H, W]` sequence: the result is
/// a `[T, W]` image with time running downwards.
pub fn temporal_strip(seq: &[f32], frames: usize, h: usize, w: usize, row: usize) -> Result<Vec<f32>> {
    if seq.len() != frames * h * w || row >= h {
        return Err(Error::invalid(format!("cannot cut row {row} from {} values as [{frames}, {h}, {w}]", seq.len())));
    }
    Ok((0..frames).flat_map(|t| seq[t * h * w + row * w..t * h * w + (row + 1) * w].iter().copied()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sheet_layout_and_png_round_trip() {
        let a = vec![0.0f32; 12];
        let b = vec![1.0f32; 12];
        let sheet = contact_sheet(&[&a, &b, &a], 3, 4, 2).unwrap();
        assert_eq!((sheet.width, sheet.height), (2 * 6 + 2, 2 * 5 + 2));
        assert_eq!(sheet.pixels[2 * sheet.width + 8], [255; 3]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.png");
        sheet.save(&p).unwrap();
        let decoder = png::Decoder::new(std::io::BufReader::new(File::open(&p).unwrap()));
        let info = decoder.read_info().unwrap().info().clone();
        assert_eq!((info.width, info.height), (14, 12));
        assert!(contact_sheet(&[&a[..5]], 3, 4, 1).is_err());
    }

    #[test]
    fn strip_picks_rows() {
        let seq: Vec<f32> = (0..2 * 3 * 2).map(|v| v as f32).collect();
        assert_eq!(temporal_strip(&seq, 2, 3, 2, 1).unwrap(), vec![2.0, 3.0, 8.0, 9.0]);
        assert!(temporal_strip(&seq, 2, 3, 2, 3).is_err());
    }

    #[test]
    fn plot_draws_series() {
        let s = vec![("a".to_owned(), vec![(2, 1.0), (8, 3.0), (128, 2.0)])];
        let c = steps_plot(&s, 120, 80).unwrap();
        assert!(c.pixels.iter().any(|&p| p == PALETTE[0]));
        assert!(steps_plot(&[], 10, 10).is_err());
    }
}
