//! Drawing wrapped text onto a blank page with built-in 8x8 bitmap faces.

use font8x8::UnicodeFonts;
use image::{GrayImage, Luma};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::synthetic::BACKGROUND;
use crate::corpus::BoundingBox;
use crate::error::{Error, Result};
use crate::rng::rng_from;

pub const GLYPH_INK: u8 = 20;
const CELL: u32 = 8;

/// Built-in font faces.
pub const FONT_FACES: [&str; 3] = ["mono", "bold", "wide"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderSpec {
    /// (height, width) in pixels.
    pub page_size: (u32, u32),
    pub fonts: Vec<String>,
    /// Inclusive glyph height range in pixels; rounded down to a multiple of 8.
    pub font_size: (u32, u32),
    /// Base margin in pixels.
    pub margin: u32,
    /// Extra left / top offset drawn uniformly from `0..=margin_jitter`.
    pub margin_jitter: u32,
    pub line_spacing: f64,
    pub seed: u64,
}

impl Default for RenderSpec {
    fn default() -> Self {
        Self {
            page_size: (1000, 800),
            fonts: FONT_FACES.iter().map(|s| s.to_string()).collect(),
            font_size: (8, 16),
            margin: 40,
            margin_jitter: 40,
            line_spacing: 1.5,
            seed: 0,
        }
    }
}

impl RenderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.fonts.is_empty() {
            return Err(Error::Config("render spec has an empty font pool".into()));
        }
        for f in &self.fonts {
            if !FONT_FACES.contains(&f.as_str()) {
                return Err(Error::Config(format!(
                    "font {f:?} is not available (built-in faces: {})",
                    FONT_FACES.join(", ")
                )));
            }
        }
        let (lo, hi) = self.font_size;
        if lo < CELL || lo > hi {
            return Err(Error::Config(format!(
                "font size range {lo}..{hi} must start at 8 or more"
            )));
        }
        if self.line_spacing < 1.0 {
            return Err(Error::Config("line spacing must be at least 1".into()));
        }
        let (h, w) = self.page_size;
        let need = 2 * self.margin + self.margin_jitter + hi;
        if h < need || w < need {
            return Err(Error::Config(format!(
                "page {h}x{w} cannot hold one {hi}px glyph inside the margins"
            )));
        }
        Ok(())
    }
}

/// A rendered page with the box of every line that was drawn.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedPage {
    pub image: GrayImage,
    pub lines: Vec<(String, BoundingBox)>,
    /// Lines (or line tails) dropped because they did not fit.
    pub truncated: bool,
}

fn glyph(ch: char) -> [u8; 8] {
    font8x8::BASIC_FONTS
        .get(ch)
        .or_else(|| font8x8::BASIC_FONTS.get('?'))
        .unwrap_or([0; 8])
}

/// Cell width of a face before scaling.
fn cell_width(face: &str) -> u32 {
    if face == "wide" {
        2 * CELL
    } else {
        CELL
    }
}

/// Is pixel (x, y) of the glyph cell inked for this face?
fn inked(face: &str, rows: &[u8; 8], x: u32, y: u32) -> bool {
    let bit = |xx: u32| rows[y as usize] >> xx & 1 == 1;
    match face {
        "bold" => bit(x) || (x > 0 && bit(x - 1)),
        "wide" => bit(x / 2),
        _ => bit(x),
    }
}

/// Render lines; lines that do not fit are truncated with a warning.
pub fn render_text_page(lines: &[String], spec: &RenderSpec) -> Result<RenderedPage> {
    spec.validate()?;
    let (h, w) = spec.page_size;
    let mut image = GrayImage::from_pixel(w, h, Luma([BACKGROUND]));
    let mut rng = rng_from(spec.seed, &[0x52454e44]);
    let face = spec.fonts[rng.random_range(0..spec.fonts.len())].as_str();
    let size = rng.random_range(spec.font_size.0..=spec.font_size.1);
    let scale = (size / CELL).max(1);
    let left = spec.margin + rng.random_range(0..=spec.margin_jitter);
    let top = spec.margin + rng.random_range(0..=spec.margin_jitter);
    let cell_w = cell_width(face);
    let char_w = cell_w * scale;
    let glyph_h = CELL * scale;
    let advance = ((glyph_h as f64) * spec.line_spacing).round() as u32;
    let right_limit = w - spec.margin;
    let bottom_limit = h - spec.margin;
    let max_chars = ((right_limit - left) / char_w) as usize;

    let mut drawn = Vec::new();
    let mut truncated = false;
    for (i, line) in lines.iter().enumerate() {
        let y0 = top + advance * i as u32;
        if y0 + glyph_h > bottom_limit {
            truncated = true;
            break;
        }
        let chars: Vec<char> = line.chars().collect();
        if chars.len() > max_chars {
            truncated = true;
        }
        let shown: String = chars.iter().take(max_chars).collect();
        for (k, ch) in shown.chars().enumerate() {
            let rows = glyph(ch);
            let x0 = left + char_w * k as u32;
            for gy in 0..CELL {
                for gx in 0..cell_w {
                    if !inked(face, &rows, gx, gy) {
                        continue;
                    }
                    for sy in 0..scale {
                        for sx in 0..scale {
                            image.put_pixel(x0 + gx * scale + sx, y0 + gy * scale + sy, Luma([GLYPH_INK]));
                        }
                    }
                }
            }
        }
        if !shown.is_empty() {
            let width = (char_w * shown.chars().count() as u32) as f64 / w as f64;
            drawn.push((
                shown,
                BoundingBox {
                    left: left as f64 / w as f64,
                    top: y0 as f64 / h as f64,
                    width,
                    height: glyph_h as f64 / h as f64,
                },
            ));
        }
    }
    if truncated {
        log::warn!("render: text did not fit a {h}x{w} page and was truncated");
    }
    Ok(RenderedPage {
        image,
        lines: drawn,
        truncated,
    })
}

/// Image only; see [`render_text_page`].
pub fn render_text_image(lines: &[String], spec: &RenderSpec) -> Result<GrayImage> {
    Ok(render_text_page(lines, spec)?.image)
}
