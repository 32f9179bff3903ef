//! Color-coded previews of composed label maps.
//!
//! Per pixel, in priority order:
//! - two or more foreground instances: the overlap accent;
//! - one foreground instance on the edge of its category's region: the
//!   category color (1-px outline);
//! - one foreground instance inside its region: the category color blended
//!   over the background fill with `alpha / 255` opacity;
//! - no foreground: the color of the first background channel set, or
//!   `void` when none is.

use std::collections::BTreeMap;
use std::io::Cursor;
use std::path::Path;

use bachkit_core::fusion::ComposedLabelMap;
use bachkit_core::layout::{CategoryId, Taxonomy};
use bachkit_core::tensor::Tensor;
use image::{ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Rgb = [u8; 3];

pub const DEFAULT_VOID: Rgb = [0, 0, 0];
pub const DEFAULT_ACCENT: Rgb = [255, 0, 255];
pub const DEFAULT_ALPHA: u8 = 128;

#[derive(Debug, Error)]
pub enum PreviewError {
    #[error("palette has no color for category {id} ({name})")]
    Gap { id: CategoryId, name: String },
    #[error("palette color key {0:?} is not a category id")]
    BadKey(String),
    #[error("palette color for {0}, which is not in the taxonomy")]
    Unknown(CategoryId),
    #[error("palette covers {palette_b} background and {palette_o} foreground channels, map has {map_b} and {map_o}")]
    Channels {
        palette_b: usize,
        palette_o: usize,
        map_b: usize,
        map_o: usize,
    },
    #[error("png: {0}")]
    Png(String),
}

/// Palette as written in the config file. Without `colors` every category
/// gets a generated color; with `colors` every category must be listed.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PaletteSpec {
    #[serde(default)]
    pub void: Option<Rgb>,
    #[serde(default)]
    pub accent: Option<Rgb>,
    #[serde(default)]
    pub alpha: Option<u8>,
    #[serde(default)]
    pub outlines: Option<bool>,
    /// Keyed by category id.
    #[serde(default)]
    pub colors: BTreeMap<String, Rgb>,
}

/// Colors by composed channel: `background[i]` for background channel `i`,
/// `foreground[j]` for foreground channel `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Palette {
    pub void: Rgb,
    pub accent: Rgb,
    pub alpha: u8,
    pub outlines: bool,
    pub background: Vec<Rgb>,
    pub foreground: Vec<Rgb>,
}

fn hsv(h: f64, s: f64, v: f64) -> Rgb {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    let (r, g, b) = match i as i64 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [r, g, b].map(|x| (x * 255.0).round() as u8)
}

const GOLDEN: f64 = 0.618_033_988_749_895;

impl Palette {
    /// Golden-ratio hues: muted for background, saturated for foreground.
    pub fn generated(taxonomy: &Taxonomy) -> Self {
        let hue = |i: usize, offset: f64| (offset + i as f64 * GOLDEN).fract();
        Self {
            void: DEFAULT_VOID,
            accent: DEFAULT_ACCENT,
            alpha: DEFAULT_ALPHA,
            outlines: true,
            background: (0..taxonomy.c_b()).map(|i| hsv(hue(i, 0.1), 0.35, 0.6)).collect(),
            foreground: (0..taxonomy.c_o()).map(|i| hsv(hue(i, 0.6), 0.85, 0.95)).collect(),
        }
    }

    pub fn from_spec(spec: &PaletteSpec, taxonomy: &Taxonomy) -> Result<Self, PreviewError> {
        let mut p = Self::generated(taxonomy);
        p.void = spec.void.unwrap_or(p.void);
        p.accent = spec.accent.unwrap_or(p.accent);
        p.alpha = spec.alpha.unwrap_or(p.alpha);
        p.outlines = spec.outlines.unwrap_or(p.outlines);
        if spec.colors.is_empty() {
            return Ok(p);
        }
        let mut by_id = BTreeMap::new();
        for (key, &rgb) in &spec.colors {
            let id = key
                .trim()
                .parse::<u8>()
                .map(CategoryId)
                .map_err(|_| PreviewError::BadKey(key.clone()))?;
            if taxonomy.slot(id).is_none() {
                return Err(PreviewError::Unknown(id));
            }
            by_id.insert(id, rgb);
        }
        let pick = |c: &bachkit_core::layout::Category| {
            by_id.get(&c.id).copied().ok_or_else(|| PreviewError::Gap {
                id: c.id,
                name: c.name.clone(),
            })
        };
        p.background = taxonomy.background().iter().map(pick).collect::<Result<_, _>>()?;
        p.foreground = taxonomy.foreground().iter().map(pick).collect::<Result<_, _>>()?;
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreviewImage {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB.
    pub rgb: Vec<u8>,
}

impl PreviewImage {
    pub fn pixel(&self, row: usize, col: usize) -> Rgb {
        let i = (row * self.width + col) * 3;
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    pub fn to_png(&self) -> Result<Vec<u8>, PreviewError> {
        let img = RgbImage::from_raw(self.width as u32, self.height as u32, self.rgb.clone())
            .ok_or_else(|| PreviewError::Png("buffer size".into()))?;
        let mut out = Cursor::new(Vec::new());
        img.write_to(&mut out, ImageFormat::Png)
            .map_err(|e| PreviewError::Png(e.to_string()))?;
        Ok(out.into_inner())
    }

    pub fn save(&self, path: &Path) -> Result<(), PreviewError> {
        let bytes = self.to_png()?;
        std::fs::write(path, bytes).map_err(|e| PreviewError::Png(format!("{}: {e}", path.display())))
    }
}

/// A `[h, w, 3]` tensor with values in `[-1, 1]` as an 8-bit image;
/// `-1 -> 0`, `1 -> 255`, values outside the range are clamped.
pub fn image_from_tensor(t: &Tensor) -> Result<PreviewImage, PreviewError> {
    let (h, w, c) = t.hwc().map_err(|e| PreviewError::Png(e.to_string()))?;
    if c != 3 {
        return Err(PreviewError::Png(format!("expected 3 channels, got {c}")));
    }
    let rgb = t
        .data()
        .iter()
        .map(|v| ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8)
        .collect();
    Ok(PreviewImage { width: w, height: h, rgb })
}

fn blend(base: Rgb, over: Rgb, alpha: u8) -> Rgb {
    let a = alpha as u32;
    std::array::from_fn(|i| ((base[i] as u32 * (255 - a) + over[i] as u32 * a + 127) / 255) as u8)
}

pub fn render_preview(map: &ComposedLabelMap, palette: &Palette) -> Result<PreviewImage, PreviewError> {
    let (c_b, c_o) = (map.c_b(), map.c_o());
    if palette.background.len() != c_b || palette.foreground.len() != c_o {
        return Err(PreviewError::Channels {
            palette_b: palette.background.len(),
            palette_o: palette.foreground.len(),
            map_b: c_b,
            map_o: c_o,
        });
    }
    let canvas = map.canvas();
    let (h, w) = (canvas.height, canvas.width);
    let m = map.map();
    let fg = |r: usize, c: usize, j: usize| m.get(r, c, c_b + j);
    let mut rgb = Vec::with_capacity(h * w * 3);
    for r in 0..h {
        for c in 0..w {
            let px = m.pixel(r, c);
            let base = px[..c_b]
                .iter()
                .position(|&v| v > 0)
                .map_or(palette.void, |i| palette.background[i]);
            let total: u32 = px[c_b..].iter().map(|&v| v as u32).sum();
            let color = match total {
                0 => base,
                1 => {
                    let j = px[c_b..].iter().position(|&v| v > 0).expect("one instance");
                    let edge = r == 0
                        || c == 0
                        || r + 1 == h
                        || c + 1 == w
                        || fg(r - 1, c, j) == 0
                        || fg(r + 1, c, j) == 0
                        || fg(r, c - 1, j) == 0
                        || fg(r, c + 1, j) == 0;
                    if palette.outlines && edge {
                        palette.foreground[j]
                    } else {
                        blend(base, palette.foreground[j], palette.alpha)
                    }
                }
                _ => palette.accent,
            };
            rgb.extend_from_slice(&color);
        }
    }
    Ok(PreviewImage { width: w, height: h, rgb })
}
