//! Small raster helpers for plots, heat grids and tiled figures.

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

pub const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
pub const BLACK: Rgb<u8> = Rgb([0, 0, 0]);

/// 3×5 glyphs for digits and a few symbols, row-major, top row first.
fn glyph(c: char) -> Option<[u8; 5]> {
    Some(match c {
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b111, 0b001, 0b111, 0b100, 0b111],
        '3' => [0b111, 0b001, 0b111, 0b001, 0b111],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b111, 0b001, 0b111],
        '6' => [0b111, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b010, 0b010, 0b010],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b111],
        '.' => [0b000, 0b000, 0b000, 0b000, 0b010],
        '-' => [0b000, 0b000, 0b111, 0b000, 0b000],
        'x' | 'X' => [0b000, 0b101, 0b010, 0b101, 0b000],
        ' ' => [0; 5],
        _ => return None,
    })
}

/// Draws digits at integer `scale`; unknown characters are skipped.
pub fn draw_text(img: &mut RgbImage, x0: i64, y0: i64, text: &str, scale: u32, color: Rgb<u8>) {
    let s = i64::from(scale.max(1));
    let mut x = x0;
    for c in text.chars() {
        if let Some(g) = glyph(c) {
            for (row, bits) in g.iter().enumerate() {
                for col in 0..3 {
                    if bits & (0b100 >> col) != 0 {
                        fill_rect(img, x + col * s, y0 + row as i64 * s, s as u32, s as u32, color);
                    }
                }
            }
        }
        x += 4 * s;
    }
}

pub fn text_width(text: &str, scale: u32) -> u32 {
    (text.chars().count() as u32 * 4).saturating_sub(1) * scale.max(1)
}

pub fn fill_rect(img: &mut RgbImage, x: i64, y: i64, w: u32, h: u32, color: Rgb<u8>) {
    for yy in y.max(0)..(y + i64::from(h)).min(i64::from(img.height())) {
        for xx in x.max(0)..(x + i64::from(w)).min(i64::from(img.width())) {
            img.put_pixel(xx as u32, yy as u32, color);
        }
    }
}

pub fn draw_line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && x < i64::from(img.width()) && y < i64::from(img.height()) {
            img.put_pixel(x as u32, y as u32, color);
        }
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

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Colormap {
    #[default]
    Jet,
    Inferno,
    Gray,
}

impl std::str::FromStr for Colormap {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "jet" => Ok(Colormap::Jet),
            "inferno" => Ok(Colormap::Inferno),
            "gray" | "grey" => Ok(Colormap::Gray),
            other => Err(format!("unknown colormap `{other}`")),
        }
    }
}

fn lerp_stops(stops: &[[f64; 3]], v: f64) -> [f64; 3] {
    let t = v.clamp(0.0, 1.0) * (stops.len() - 1) as f64;
    let i = (t.floor() as usize).min(stops.len() - 2);
    let f = t - i as f64;
    std::array::from_fn(|k| stops[i][k] + (stops[i + 1][k] - stops[i][k]) * f)
}

impl Colormap {
    /// RGB in `[0, 1]` for `v` in `[0, 1]`.
    pub fn rgb(self, v: f64) -> [f64; 3] {
        let v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
        match self {
            Colormap::Jet => [
                (1.5 - (4.0 * v - 3.0).abs()).clamp(0.0, 1.0),
                (1.5 - (4.0 * v - 2.0).abs()).clamp(0.0, 1.0),
                (1.5 - (4.0 * v - 1.0).abs()).clamp(0.0, 1.0),
            ],
            Colormap::Inferno => lerp_stops(
                &[
                    [0.0, 0.0, 0.016],
                    [0.341, 0.063, 0.431],
                    [0.733, 0.216, 0.329],
                    [0.976, 0.557, 0.035],
                    [0.988, 1.0, 0.643],
                ],
                v,
            ),
            Colormap::Gray => [v; 3],
        }
    }

    pub fn pixel(self, v: f64) -> Rgb<u8> {
        Rgb(self.rgb(v).map(|c| (c * 255.0).round() as u8))
    }
}

/// Distinct series colours.
pub fn palette(i: usize) -> Rgb<u8> {
    const P: [[u8; 3]; 6] = [[31, 119, 180], [214, 39, 40], [44, 160, 44], [255, 127, 14], [148, 103, 189], [23, 190, 207]];
    Rgb(P[i % P.len()])
}

/// Line chart of several series sharing one y-range, with min and max
/// printed on the axis.
pub fn line_plot(series: &[Vec<f64>], width: u32, height: u32) -> RgbImage {
    let mut img = RgbImage::from_pixel(width, height, WHITE);
    let (left, right, top, bottom) = (40i64, 8i64, 8i64, 16i64);
    let (pw, ph) = (i64::from(width) - left - right, i64::from(height) - top - bottom);
    draw_line(&mut img, (left, top), (left, top + ph), BLACK);
    draw_line(&mut img, (left, top + ph), (left + pw, top + ph), BLACK);
    let finite = series.iter().flatten().copied().filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() || pw < 2 || ph < 2 {
        return img;
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    draw_text(&mut img, 2, top, &format!("{hi:.3}"), 1, BLACK);
    draw_text(&mut img, 2, top + ph - 5, &format!("{lo:.3}"), 1, BLACK);
    for (si, s) in series.iter().enumerate() {
        let n = s.len();
        let pt = |i: usize, v: f64| {
            let x = left + if n > 1 { (i as i64 * pw) / (n as i64 - 1) } else { pw / 2 };
            let y = top + ph - (((v - lo) / span) * ph as f64).round() as i64;
            (x, y)
        };
        let mut prev = None;
        for (i, &v) in s.iter().enumerate() {
            if !v.is_finite() {
                prev = None;
                continue;
            }
            let p = pt(i, v);
            if let Some(q) = prev {
                draw_line(&mut img, q, p, palette(si));
            } else {
                fill_rect(&mut img, p.0 - 1, p.1 - 1, 3, 3, palette(si));
            }
            prev = Some(p);
        }
    }
    img
}

/// Vertical bars, one per value, scaled to the largest.
pub fn bar_chart(values: &[f64], width: u32, height: u32) -> RgbImage {
    let mut img = RgbImage::from_pixel(width, height, WHITE);
    let n = values.len().max(1) as u32;
    let max = values.iter().copied().filter(|v| v.is_finite()).fold(0.0f64, f64::max).max(1e-12);
    let slot = width / n;
    for (i, v) in values.iter().enumerate() {
        let h = ((v.max(0.0) / max) * f64::from(height.saturating_sub(14))).round() as u32;
        let x = i as i64 * i64::from(slot) + i64::from(slot / 6);
        fill_rect(&mut img, x, i64::from(height - h), (slot * 2 / 3).max(1), h, palette(i));
        draw_text(&mut img, x, i64::from(height.saturating_sub(h + 7)), &format!("{v:.3}"), 1, BLACK);
    }
    img
}

/// Lays equal-size tiles out row-major with a white gutter.
pub fn tile_grid(tiles: &[RgbImage], cols: usize, gutter: u32) -> RgbImage {
    if tiles.is_empty() || cols == 0 {
        return RgbImage::from_pixel(1, 1, WHITE);
    }
    let (tw, th) = tiles.iter().fold((0, 0), |(w, h), t| (w.max(t.width()), h.max(t.height())));
    let rows = tiles.len().div_ceil(cols) as u32;
    let cols = cols.min(tiles.len()) as u32;
    let mut out = RgbImage::from_pixel(cols * tw + (cols + 1) * gutter, rows * th + (rows + 1) * gutter, WHITE);
    for (i, t) in tiles.iter().enumerate() {
        let (r, c) = (i as u32 / cols, i as u32 % cols);
        image::imageops::overlay(
            &mut out,
            t,
            i64::from(gutter + c * (tw + gutter)),
            i64::from(gutter + r * (th + gutter)),
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn colormap_endpoints() {
        assert_eq!(Colormap::Gray.pixel(1.0), WHITE);
        assert_eq!(Colormap::Gray.pixel(0.0), BLACK);
        let lo = Colormap::Jet.rgb(0.0);
        assert!(lo[2] > lo[0]);
        let hi = Colormap::Jet.rgb(1.0);
        assert!(hi[0] > hi[2]);
    }

    #[test]
    fn grid_dimensions() {
        let t = RgbImage::new(10, 6);
        let g = tile_grid(&[t.clone(), t.clone(), t], 2, 2);
        assert_eq!((g.width(), g.height()), (2 * 10 + 3 * 2, 2 * 6 + 3 * 2));
    }

    #[test]
    fn text_draws_pixels() {
        let mut img = RgbImage::from_pixel(20, 10, WHITE);
        draw_text(&mut img, 0, 0, "10", 1, BLACK);
        assert!(img.pixels().any(|p| *p == BLACK));
        assert_eq!(text_width("10", 1), 7);
    }
}
