//! Bounding-box layouts, label maps and the conversions between them.
//!
//! Coordinates: `x` is the column and `y` the row, origin top-left. A box
//! covers rows `y..y + h` and columns `x..x + w` (half-open).

mod bitmap;
mod components;
mod labelmap;
mod raster;
mod taxonomy;

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bitmap::{BitmapBuilder, CategoryBitmap, Run};
pub use components::{boxes_from_segmap, boxes_from_segmap_min_area, DEFAULT_MIN_COMPONENT_AREA};
pub use labelmap::{ChannelSpace, LabelMap, SegMap};
pub use raster::{extract_bbox, rasterize_layout, validate_layout, CategoryUnion};
pub use taxonomy::{Category, CategoryId, Slot, Taxonomy};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LayoutError {
    #[error("unknown category {0}")]
    UnknownCategory(CategoryId),
    #[error("category {0} is not a foreground category")]
    NotForeground(CategoryId),
    #[error("invalid layout: {}", join(.0))]
    Invalid(Vec<Violation>),
    #[error("empty pixel set for category {0}")]
    EmptyInstance(CategoryId),
    #[error("taxonomy: {0}")]
    Taxonomy(String),
    #[error("extent mismatch: expected {expected}, got {actual}")]
    Extent { expected: Canvas, actual: Canvas },
    #[error("channel mismatch: expected {expected}, got {actual}")]
    Channels { expected: usize, actual: usize },
    #[error("io: {0}")]
    Io(String),
    #[error("parse: {0}")]
    Parse(String),
}

fn join(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

/// Canvas extents. Serialized as `[height, width]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct Canvas {
    pub height: usize,
    pub width: usize,
}

impl Canvas {
    pub const fn new(height: usize, width: usize) -> Self {
        Self { height, width }
    }

    pub const fn pixels(&self) -> usize {
        self.height * self.width
    }
}

/// 512 wide, 256 high.
impl Default for Canvas {
    fn default() -> Self {
        Self::new(256, 512)
    }
}

impl From<[usize; 2]> for Canvas {
    fn from([height, width]: [usize; 2]) -> Self {
        Self { height, width }
    }
}

impl From<Canvas> for [usize; 2] {
    fn from(c: Canvas) -> Self {
        [c.height, c.width]
    }
}

impl fmt::Display for Canvas {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.height, self.width)
    }
}

/// A category-tagged box: top-left `(x, y)` plus height and width in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub category: CategoryId,
    pub x: i32,
    pub y: i32,
    pub h: i32,
    pub w: i32,
}

/// Half-open pixel rectangle inside a canvas.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelRect {
    pub row0: usize,
    pub col0: usize,
    pub row1: usize,
    pub col1: usize,
}

impl BoundingBox {
    pub fn new(category: CategoryId, x: i32, y: i32, h: i32, w: i32) -> Self {
        Self { category, x, y, h, w }
    }

    /// The part of the box inside `canvas`, or `None` when nothing remains.
    pub fn clip(&self, canvas: Canvas) -> Option<PixelRect> {
        if self.h < 1 || self.w < 1 {
            return None;
        }
        let clamp = |v: i64, hi: usize| v.clamp(0, hi as i64) as usize;
        let row0 = clamp(self.y as i64, canvas.height);
        let row1 = clamp(self.y as i64 + self.h as i64, canvas.height);
        let col0 = clamp(self.x as i64, canvas.width);
        let col1 = clamp(self.x as i64 + self.w as i64, canvas.width);
        (row1 > row0 && col1 > col0).then_some(PixelRect { row0, col0, row1, col1 })
    }

    pub fn clipped(&self, canvas: Canvas) -> Option<Self> {
        self.clip(canvas).map(|r| Self {
            category: self.category,
            x: r.col0 as i32,
            y: r.row0 as i32,
            h: (r.row1 - r.row0) as i32,
            w: (r.col1 - r.col0) as i32,
        })
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        let (r, c) = (row as i64, col as i64);
        r >= self.y as i64 && r < self.y as i64 + self.h as i64 && c >= self.x as i64 && c < self.x as i64 + self.w as i64
    }
}

/// The user-provided input: foreground boxes on a canvas.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SalientLayout {
    pub canvas: Canvas,
    pub taxonomy: String,
    pub boxes: Vec<BoundingBox>,
}

impl SalientLayout {
    pub fn new(canvas: Canvas, taxonomy: impl Into<String>, boxes: Vec<BoundingBox>) -> Self {
        Self {
            canvas,
            taxonomy: taxonomy.into(),
            boxes,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, LayoutError> {
        serde_json::from_str(text).map_err(|e| LayoutError::Parse(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("layout serializes")
    }

    pub fn load(path: &Path) -> Result<Self, LayoutError> {
        let text = std::fs::read_to_string(path).map_err(|e| LayoutError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| LayoutError::Parse(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<(), LayoutError> {
        std::fs::write(path, self.to_json()).map_err(|e| LayoutError::Io(format!("{}: {e}", path.display())))
    }
}

/// One problem found by [`validate_layout`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    EmptyLayout,
    EmptyCanvas,
    TaxonomyMismatch { layout: String, taxonomy: String },
    NonPositiveExtent { index: usize },
    OutOfCanvas { index: usize },
    UnknownCategory { index: usize, category: CategoryId },
    NotForeground { index: usize, category: CategoryId },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::EmptyLayout => write!(f, "empty layout"),
            Self::EmptyCanvas => write!(f, "empty canvas"),
            Self::TaxonomyMismatch { layout, taxonomy } => {
                write!(f, "taxonomy mismatch: layout uses {layout:?}, expected {taxonomy:?}")
            }
            Self::NonPositiveExtent { index } => write!(f, "box {index}: non-positive extent"),
            Self::OutOfCanvas { index } => write!(f, "box {index}: out of canvas"),
            Self::UnknownCategory { index, category } => {
                write!(f, "box {index}: unknown category {category}")
            }
            Self::NotForeground { index, category } => {
                write!(f, "box {index}: category {category} is not a foreground category")
            }
        }
    }
}
