use std::path::Path;

use image::GrayImage;

use super::{BitmapBuilder, Canvas, CategoryBitmap, CategoryId, LayoutError, Taxonomy};
use crate::tensor::Tensor;

/// Which taxonomy block the channels of a [`LabelMap`] index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelSpace {
    /// `C_o` channels in foreground declaration order.
    Foreground,
    /// `C_b` channels in background declaration order.
    Background,
    /// `C_b + C_o` channels, background block first.
    Composed,
}

/// `H x W x C` occupancy counts, channels innermost.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    canvas: Canvas,
    channels: usize,
    space: ChannelSpace,
    data: Vec<u16>,
}

impl LabelMap {
    pub fn zeros(canvas: Canvas, channels: usize, space: ChannelSpace) -> Self {
        Self {
            canvas,
            channels,
            space,
            data: vec![0; canvas.pixels() * channels],
        }
    }

    pub fn from_raw(canvas: Canvas, channels: usize, space: ChannelSpace, data: Vec<u16>) -> Result<Self, LayoutError> {
        if data.len() != canvas.pixels() * channels {
            return Err(LayoutError::Channels {
                expected: canvas.pixels() * channels,
                actual: data.len(),
            });
        }
        Ok(Self {
            canvas,
            channels,
            space,
            data,
        })
    }

    pub fn canvas(&self) -> Canvas {
        self.canvas
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn space(&self) -> ChannelSpace {
        self.space
    }

    pub fn data(&self) -> &[u16] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize, channel: usize) -> u16 {
        self.data[(row * self.canvas.width + col) * self.channels + channel]
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[u16] {
        let i = (row * self.canvas.width + col) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub(crate) fn pixel_mut(&mut self, row: usize, col: usize) -> &mut [u16] {
        let i = (row * self.canvas.width + col) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    /// Sum over channels at one pixel.
    pub fn pixel_sum(&self, row: usize, col: usize) -> u32 {
        self.pixel(row, col).iter().map(|&v| v as u32).sum()
    }

    pub fn to_tensor(&self) -> Tensor {
        let data = self.data.iter().map(|&v| v as f64).collect();
        Tensor::new(&[self.canvas.height, self.canvas.width, self.channels], data).expect("label map extents are consistent")
    }

    /// Pixels where `channel` is at least 1.
    pub(crate) fn channel_bitmap(&self, channel: usize, category: CategoryId) -> CategoryBitmap {
        let mut b = BitmapBuilder::new(category, self.canvas);
        for (p, px) in self.data.chunks(self.channels).enumerate() {
            if px[channel] > 0 {
                b.push(p as u32, 1);
            }
        }
        b.finish()
    }
}

/// Indexed segmentation map: one category id per pixel, which is the
/// one-hot encoding over the full taxonomy.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegMap {
    canvas: Canvas,
    data: Vec<u8>,
}

impl SegMap {
    pub fn new(canvas: Canvas, data: Vec<u8>) -> Result<Self, LayoutError> {
        if data.len() != canvas.pixels() {
            return Err(LayoutError::Channels {
                expected: canvas.pixels(),
                actual: data.len(),
            });
        }
        Ok(Self { canvas, data })
    }

    pub fn filled(canvas: Canvas, id: CategoryId) -> Self {
        Self {
            canvas,
            data: vec![id.0; canvas.pixels()],
        }
    }

    pub fn canvas(&self) -> Canvas {
        self.canvas
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> CategoryId {
        CategoryId(self.data[row * self.canvas.width + col])
    }

    pub fn set(&mut self, row: usize, col: usize, id: CategoryId) {
        self.data[row * self.canvas.width + col] = id.0;
    }

    /// Fills the half-open rectangle, clipped to the canvas.
    pub fn fill_rect(&mut self, row0: usize, col0: usize, row1: usize, col1: usize, id: CategoryId) {
        let (row1, col1) = (row1.min(self.canvas.height), col1.min(self.canvas.width));
        for r in row0..row1 {
            let base = r * self.canvas.width;
            self.data[base + col0.min(col1)..base + col1].fill(id.0);
        }
    }

    /// First pixel whose id is not part of `taxonomy`.
    pub fn find_unknown(&self, taxonomy: &Taxonomy) -> Option<(usize, usize, CategoryId)> {
        self.data
            .iter()
            .position(|&v| taxonomy.slot(CategoryId(v)).is_none())
            .map(|i| (i / self.canvas.width, i % self.canvas.width, CategoryId(self.data[i])))
    }

    /// One-hot foreground label map (`C_o` channels); background pixels are all zero.
    pub fn foreground_map(&self, taxonomy: &Taxonomy) -> LabelMap {
        let mut m = LabelMap::zeros(self.canvas, taxonomy.c_o(), ChannelSpace::Foreground);
        for (p, &v) in self.data.iter().enumerate() {
            if let Some(i) = taxonomy.foreground_index(CategoryId(v)) {
                m.data[p * m.channels + i] = 1;
            }
        }
        m
    }

    /// Bitmaps of every foreground category present, in foreground order.
    pub fn foreground_bitmaps(&self, taxonomy: &Taxonomy) -> Vec<CategoryBitmap> {
        let mut builders: Vec<BitmapBuilder> = taxonomy
            .foreground()
            .iter()
            .map(|c| BitmapBuilder::new(c.id, self.canvas))
            .collect();
        let mut i = 0;
        while i < self.data.len() {
            let v = self.data[i];
            let start = i;
            while i < self.data.len() && self.data[i] == v {
                i += 1;
            }
            if let Some(k) = taxonomy.foreground_index(CategoryId(v)) {
                builders[k].push(start as u32, (i - start) as u32);
            }
        }
        builders.into_iter().map(BitmapBuilder::finish).filter(|b| !b.is_empty()).collect()
    }

    pub fn load_png(path: &Path) -> Result<Self, LayoutError> {
        let bytes = std::fs::read(path).map_err(|e| LayoutError::Io(format!("{}: {e}", path.display())))?;
        Self::decode_png(&bytes).map_err(|e| match e {
            LayoutError::Parse(m) => LayoutError::Parse(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Decodes an 8-bit single-channel PNG.
    pub fn decode_png(bytes: &[u8]) -> Result<Self, LayoutError> {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png).map_err(|e| LayoutError::Parse(e.to_string()))?;
        let image::DynamicImage::ImageLuma8(gray) = img else {
            return Err(LayoutError::Parse(format!(
                "expected an 8-bit single-channel image, found {:?}",
                img.color()
            )));
        };
        let canvas = Canvas::new(gray.height() as usize, gray.width() as usize);
        Self::new(canvas, gray.into_raw())
    }

    pub fn save_png(&self, path: &Path) -> Result<(), LayoutError> {
        let img = GrayImage::from_raw(self.canvas.width as u32, self.canvas.height as u32, self.data.clone())
            .expect("segmap extents are consistent");
        img.save(path).map_err(|e| LayoutError::Io(format!("{}: {e}", path.display())))
    }
}
