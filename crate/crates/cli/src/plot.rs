//! Minimal line plots rendered straight into RGB buffers. There is no text
//! rendering; `report` writes axis ranges and the colour legend to its
//! summary file instead.

use image::{Rgb, RgbImage};

pub const PALETTE: [(&str, [u8; 3]); 8] = [
    ("blue", [31, 119, 180]),
    ("orange", [255, 127, 14]),
    ("green", [44, 160, 44]),
    ("red", [214, 39, 40]),
    ("purple", [148, 103, 189]),
    ("brown", [140, 86, 75]),
    ("pink", [227, 119, 194]),
    ("grey", [127, 127, 127]),
];

const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([0, 0, 0]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);
const MARGIN: u32 = 12;
const TICKS: u32 = 5;

pub fn colour(i: usize) -> (&'static str, Rgb<u8>) {
    let (name, c) = PALETTE[i % PALETTE.len()];
    (name, Rgb(c))
}

#[derive(Clone, Debug)]
pub struct Series {
    pub points: Vec<(f64, f64)>,
    pub colour: Rgb<u8>,
}

/// Data bounds of a panel, widened when degenerate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bounds {
    pub x: (f64, f64),
    pub y: (f64, f64),
}

impl Bounds {
    pub fn of(series: &[Series]) -> Self {
        let finite = series.iter().flat_map(|s| &s.points).filter(|(x, y)| x.is_finite() && y.is_finite());
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for &(x, y) in finite {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        if x0 > x1 {
            return Self { x: (0.0, 1.0), y: (0.0, 1.0) };
        }
        let widen = |lo: f64, hi: f64| if hi - lo < 1e-12 { (lo - 0.5, hi + 0.5) } else { (lo, hi) };
        Self {
            x: widen(x0, x1),
            y: widen(y0, y1),
        }
    }
}

/// Draw `series` into the `w×h` rectangle at `(ox, oy)` of `img`.
pub fn draw_panel(img: &mut RgbImage, ox: u32, oy: u32, w: u32, h: u32, series: &[Series], bounds: Bounds) {
    let (left, top) = (ox + MARGIN, oy + MARGIN);
    let (pw, ph) = (w.saturating_sub(2 * MARGIN).max(2), h.saturating_sub(2 * MARGIN).max(2));
    for t in 0..=TICKS {
        let gx = left + t * (pw - 1) / TICKS;
        let gy = top + t * (ph - 1) / TICKS;
        segment(img, (gx as i64, top as i64), (gx as i64, (top + ph - 1) as i64), GRID);
        segment(img, (left as i64, gy as i64), ((left + pw - 1) as i64, gy as i64), GRID);
        // tick marks outside the frame
        let bottom = (top + ph) as i64;
        segment(img, (gx as i64, bottom), (gx as i64, bottom + 3), AXIS);
        segment(img, (left as i64 - 4, gy as i64), (left as i64 - 1, gy as i64), AXIS);
    }
    let frame = [
        ((left, top), (left + pw - 1, top)),
        ((left, top + ph - 1), (left + pw - 1, top + ph - 1)),
        ((left, top), (left, top + ph - 1)),
        ((left + pw - 1, top), (left + pw - 1, top + ph - 1)),
    ];
    for ((a, b), (c, d)) in frame {
        segment(img, (a as i64, b as i64), (c as i64, d as i64), AXIS);
    }
    let map = |(x, y): (f64, f64)| -> (i64, i64) {
        let fx = (x - bounds.x.0) / (bounds.x.1 - bounds.x.0);
        let fy = (y - bounds.y.0) / (bounds.y.1 - bounds.y.0);
        (
            left as i64 + (fx * (pw - 1) as f64).round() as i64,
            (top + ph - 1) as i64 - (fy * (ph - 1) as f64).round() as i64,
        )
    };
    for s in series {
        let pts: Vec<(i64, i64)> = s
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&p| map(p))
            .collect();
        if pts.len() == 1 {
            dot(img, pts[0], s.colour);
        }
        for pair in pts.windows(2) {
            segment(img, pair[0], pair[1], s.colour);
            // second pass one pixel down thickens the stroke
            segment(img, (pair[0].0, pair[0].1 + 1), (pair[1].0, pair[1].1 + 1), s.colour);
        }
    }
}

/// A single-panel plot.
pub fn line_plot(w: u32, h: u32, series: &[Series], bounds: Bounds) -> RgbImage {
    let mut img = RgbImage::from_pixel(w, h, BACKGROUND);
    draw_panel(&mut img, 0, 0, w, h, series, bounds);
    img
}

/// One panel per entry of `panels`, laid out row-major in `cols` columns.
pub fn panel_grid(panel_w: u32, panel_h: u32, cols: u32, panels: &[Vec<Series>]) -> RgbImage {
    let cols = cols.max(1);
    let rows = (panels.len() as u32).div_ceil(cols).max(1);
    let mut img = RgbImage::from_pixel(panel_w * cols, panel_h * rows, BACKGROUND);
    for (i, series) in panels.iter().enumerate() {
        let (c, r) = (i as u32 % cols, i as u32 / cols);
        draw_panel(&mut img, c * panel_w, r * panel_h, panel_w, panel_h, series, Bounds::of(series));
    }
    img
}

fn put(img: &mut RgbImage, (x, y): (i64, i64), c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn dot(img: &mut RgbImage, (x, y): (i64, i64), c: Rgb<u8>) {
    for dy in -1..=1 {
        for dx in -1..=1 {
            put(img, (x + dx, y + dy), c);
        }
    }
}

/// Bresenham segment, clipped to the image.
fn segment(img: &mut RgbImage, (mut x0, mut y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let mut err = dx + dy;
    loop {
        put(img, (x0, y0), c);
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

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segment_hits_both_endpoints() {
        let mut img = RgbImage::from_pixel(10, 10, BACKGROUND);
        let red = Rgb([255, 0, 0]);
        segment(&mut img, (1, 8), (7, 2), red);
        assert_eq!(*img.get_pixel(1, 8), red);
        assert_eq!(*img.get_pixel(7, 2), red);
        let painted = img.pixels().filter(|p| **p == red).count();
        assert_eq!(painted, 7);
    }

    #[test]
    fn flat_series_gets_nondegenerate_bounds() {
        let s = Series {
            points: vec![(0.0, 2.0), (1.0, 2.0)],
            colour: colour(0).1,
        };
        let b = Bounds::of(&[s]);
        assert!(b.y.1 > b.y.0);
    }

    #[test]
    fn plotted_series_colours_pixels() {
        let (_, c) = colour(3);
        let s = Series {
            points: vec![(0.0, 0.0), (1.0, 1.0), (2.0, 0.5)],
            colour: c,
        };
        let img = line_plot(120, 80, std::slice::from_ref(&s), Bounds::of(std::slice::from_ref(&s)));
        assert!(img.pixels().filter(|p| **p == c).count() > 50);
    }
}
