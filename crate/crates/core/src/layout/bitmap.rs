//! Run-length encoded pixel sets.
//!
//! Pixels are addressed by their row-major offset `row * width + col`. Runs
//! are kept sorted, non-overlapping and non-adjacent, so two bitmaps of the
//! same pixel set always have identical runs.

use std::cmp::Ordering;
use std::io::{self, Read, Write};

use super::{Canvas, CategoryId};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Run {
    pub start: u32,
    pub len: u32,
}

impl Run {
    fn end(&self) -> u32 {
        self.start + self.len
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CategoryBitmap {
    category: CategoryId,
    canvas: Canvas,
    runs: Vec<Run>,
    count: u64,
}

/// Appends runs in increasing offset order, merging touching runs.
#[derive(Debug)]
pub struct BitmapBuilder {
    category: CategoryId,
    canvas: Canvas,
    runs: Vec<Run>,
}

impl BitmapBuilder {
    pub fn new(category: CategoryId, canvas: Canvas) -> Self {
        Self {
            category,
            canvas,
            runs: Vec::new(),
        }
    }

    /// Adds `[start, start + len)`. `start` must not precede the end of the
    /// previously pushed run.
    pub fn push(&mut self, start: u32, len: u32) {
        if len == 0 {
            return;
        }
        if let Some(last) = self.runs.last_mut() {
            debug_assert!(start >= last.end(), "runs pushed out of order");
            if start == last.end() {
                last.len += len;
                return;
            }
        }
        self.runs.push(Run { start, len });
    }

    pub fn finish(self) -> CategoryBitmap {
        let count = self.runs.iter().map(|r| r.len as u64).sum();
        CategoryBitmap {
            category: self.category,
            canvas: self.canvas,
            runs: self.runs,
            count,
        }
    }
}

impl CategoryBitmap {
    pub fn empty(category: CategoryId, canvas: Canvas) -> Self {
        BitmapBuilder::new(category, canvas).finish()
    }

    /// Builds from arbitrary runs (any order, overlaps allowed).
    pub fn from_runs(category: CategoryId, canvas: Canvas, mut runs: Vec<Run>) -> Self {
        runs.retain(|r| r.len > 0);
        runs.sort_by_key(|r| r.start);
        let mut merged: Vec<Run> = Vec::with_capacity(runs.len());
        for r in runs {
            match merged.last_mut() {
                Some(last) if r.start <= last.end() => {
                    let end = last.end().max(r.end());
                    last.len = end - last.start;
                }
                _ => merged.push(r),
            }
        }
        let mut b = BitmapBuilder::new(category, canvas);
        b.runs = merged;
        b.finish()
    }

    pub fn from_dense(category: CategoryId, canvas: Canvas, mask: &[bool]) -> Self {
        assert_eq!(mask.len(), canvas.pixels(), "mask size");
        let mut b = BitmapBuilder::new(category, canvas);
        let mut i = 0;
        while i < mask.len() {
            if mask[i] {
                let start = i;
                while i < mask.len() && mask[i] {
                    i += 1;
                }
                b.push(start as u32, (i - start) as u32);
            } else {
                i += 1;
            }
        }
        b.finish()
    }

    /// Builds from `(row, col)` pixel coordinates in any order.
    pub fn from_pixels(category: CategoryId, canvas: Canvas, pixels: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let runs = pixels
            .into_iter()
            .map(|(r, c)| Run {
                start: (r * canvas.width + c) as u32,
                len: 1,
            })
            .collect();
        Self::from_runs(category, canvas, runs)
    }

    pub fn to_dense(&self) -> Vec<bool> {
        let mut mask = vec![false; self.canvas.pixels()];
        for r in &self.runs {
            mask[r.start as usize..r.end() as usize].fill(true);
        }
        mask
    }

    pub fn category(&self) -> CategoryId {
        self.category
    }

    pub fn canvas(&self) -> Canvas {
        self.canvas
    }

    pub fn runs(&self) -> &[Run] {
        &self.runs
    }

    pub fn cardinality(&self) -> u64 {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        let p = (row * self.canvas.width + col) as u32;
        self.runs
            .binary_search_by(|r| {
                if r.end() <= p {
                    Ordering::Less
                } else if r.start > p {
                    Ordering::Greater
                } else {
                    Ordering::Equal
                }
            })
            .is_ok()
    }

    /// Pixel coordinates `(row, col)` in raster order.
    pub fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.canvas.width;
        self.runs
            .iter()
            .flat_map(move |r| (r.start..r.end()).map(move |p| (p as usize / w, p as usize % w)))
    }

    /// `|self ∩ other|` by a linear merge over both run lists.
    pub fn intersection_count(&self, other: &Self) -> u64 {
        let (a, b) = (&self.runs, &other.runs);
        let (mut i, mut j) = (0, 0);
        let mut total = 0u64;
        while i < a.len() && j < b.len() {
            let lo = a[i].start.max(b[j].start);
            let hi = a[i].end().min(b[j].end());
            if hi > lo {
                total += (hi - lo) as u64;
            }
            if a[i].end() < b[j].end() {
                i += 1;
            } else {
                j += 1;
            }
        }
        total
    }

    pub fn union_count(&self, other: &Self) -> u64 {
        self.count + other.count - self.intersection_count(other)
    }

    pub fn union(&self, other: &Self) -> Self {
        let mut runs = self.runs.clone();
        runs.extend_from_slice(&other.runs);
        Self::from_runs(self.category, self.canvas, runs)
    }

    pub fn write_to<W: Write>(&self, out: &mut W) -> io::Result<()> {
        out.write_all(&[self.category.0])?;
        out.write_all(&(self.runs.len() as u32).to_le_bytes())?;
        for r in &self.runs {
            out.write_all(&r.start.to_le_bytes())?;
            out.write_all(&r.len.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(input: &mut R, canvas: Canvas) -> io::Result<Self> {
        let mut one = [0u8; 1];
        input.read_exact(&mut one)?;
        let mut word = [0u8; 4];
        input.read_exact(&mut word)?;
        let n = u32::from_le_bytes(word) as usize;
        let limit = canvas.pixels() as u64;
        let mut b = BitmapBuilder::new(CategoryId(one[0]), canvas);
        let mut prev_end = 0u64;
        for _ in 0..n {
            input.read_exact(&mut word)?;
            let start = u32::from_le_bytes(word);
            input.read_exact(&mut word)?;
            let len = u32::from_le_bytes(word);
            let end = start as u64 + len as u64;
            if (start as u64) < prev_end || end > limit || len == 0 {
                return Err(io::Error::new(io::ErrorKind::InvalidData, "malformed run list"));
            }
            prev_end = end;
            b.push(start, len);
        }
        Ok(b.finish())
    }
}
