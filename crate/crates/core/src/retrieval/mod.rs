//! Layout-similarity retrieval over a [`MemoryBank`](crate::bank::MemoryBank).
//!
//! Scores are exact rationals of pixel counts, so ranking never depends on
//! floating point rounding.

mod bench;
mod score;
mod topm;

use std::time::Duration;

use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bank::BankEntry;
use crate::layout::{validate_layout, Canvas, CategoryBitmap, CategoryUnion, LayoutError, SalientLayout, Taxonomy, Violation};

pub use bench::{bench_retrieval, BenchOptions, BenchReport, LatencySummary, ScanPass};
pub use score::Score;
pub use topm::{retrieve_profile, retrieve_top_m, Hit, RetrievalResult, RetrieveOptions, ScanCounters};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RetrievalError {
    #[error("memory bank is empty")]
    EmptyBank,
    #[error("invalid query layout: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    InvalidQuery(Vec<Violation>),
    #[error("comparison mismatch: {0}")]
    Mismatch(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error(transparent)]
    Layout(#[from] LayoutError),
}

/// Per-category pixel unions of one side of the comparison.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryProfile {
    canvas: Canvas,
    channels: Vec<usize>,
    bitmaps: Vec<CategoryBitmap>,
    counts: Vec<u64>,
}

impl QueryProfile {
    /// Validates the layout and takes the union of its boxes per category.
    pub fn from_layout(layout: &SalientLayout, taxonomy: &Taxonomy) -> Result<Self, RetrievalError> {
        validate_layout(layout, taxonomy).map_err(RetrievalError::InvalidQuery)?;
        let mut bitmaps = Vec::new();
        for c in taxonomy.foreground() {
            if layout.boxes.iter().any(|b| b.category == c.id) {
                bitmaps.push(layout.category_union(taxonomy, c.id)?);
            }
        }
        Ok(Self::from_bitmaps(layout.canvas, bitmaps, taxonomy))
    }

    /// Empty bitmaps and non-foreground categories are dropped.
    pub fn from_bitmaps(canvas: Canvas, bitmaps: Vec<CategoryBitmap>, taxonomy: &Taxonomy) -> Self {
        let mut tagged: Vec<(usize, CategoryBitmap)> = bitmaps
            .into_iter()
            .filter(|b| !b.is_empty())
            .filter_map(|b| taxonomy.foreground_index(b.category()).map(|ch| (ch, b)))
            .collect();
        tagged.sort_by_key(|(ch, _)| *ch);
        let mut counts = vec![0; taxonomy.c_o()];
        for (ch, b) in &tagged {
            counts[*ch] = b.cardinality();
        }
        let (channels, bitmaps) = tagged.into_iter().unzip();
        Self {
            canvas,
            channels,
            bitmaps,
            counts,
        }
    }

    pub fn from_entry(entry: &BankEntry) -> Self {
        Self {
            canvas: entry.canvas(),
            channels: entry.channels().to_vec(),
            bitmaps: entry.bitmaps().to_vec(),
            counts: entry.counts().to_vec(),
        }
    }

    pub fn canvas(&self) -> Canvas {
        self.canvas
    }

    pub fn bitmaps(&self) -> &[CategoryBitmap] {
        &self.bitmaps
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// SHA-256 over the canvas and every category's runs.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.canvas.height as u64).to_le_bytes());
        h.update((self.canvas.width as u64).to_le_bytes());
        for b in &self.bitmaps {
            let mut bytes = Vec::new();
            b.write_to(&mut bytes).expect("writing to a vec");
            h.update(bytes);
        }
        crate::bank::hex(&h.finalize())
    }
}

fn pooled(
    a_channels: &[usize],
    a: &[CategoryBitmap],
    a_counts: &[u64],
    b_channels: &[usize],
    b: &[CategoryBitmap],
    b_counts: &[u64],
) -> Score {
    let (mut i, mut j) = (0, 0);
    let mut inter = 0u64;
    while i < a_channels.len() && j < b_channels.len() {
        match a_channels[i].cmp(&b_channels[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += a[i].intersection_count(&b[j]);
                i += 1;
                j += 1;
            }
        }
    }
    let total: u64 = a_counts.iter().sum::<u64>() + b_counts.iter().sum::<u64>();
    Score::new(inter, total - inter)
}

fn check(query: &QueryProfile, canvas: Canvas, counts: &[u64]) -> Result<(), RetrievalError> {
    if query.canvas != canvas {
        return Err(RetrievalError::Mismatch(format!("canvas {} vs {}", query.canvas, canvas)));
    }
    if query.counts.len() != counts.len() {
        return Err(RetrievalError::Mismatch(format!(
            "{} vs {} foreground categories",
            query.counts.len(),
            counts.len()
        )));
    }
    Ok(())
}

/// `Σ_j |S^j ∩ L^j| / Σ_j |S^j ∪ L^j|` over the foreground categories, 0 when
/// both sides are empty.
pub fn iou_r(query: &QueryProfile, entry: &BankEntry) -> Result<Score, RetrievalError> {
    check(query, entry.canvas(), entry.counts())?;
    Ok(score_entry(query, entry))
}

pub(crate) fn score_entry(query: &QueryProfile, entry: &BankEntry) -> Score {
    pooled(
        &query.channels,
        &query.bitmaps,
        &query.counts,
        entry.channels(),
        entry.bitmaps(),
        entry.counts(),
    )
}

/// [`iou_r`] between two profiles; symmetric in its arguments.
pub fn iou_profiles(a: &QueryProfile, b: &QueryProfile) -> Result<Score, RetrievalError> {
    check(a, b.canvas, &b.counts)?;
    Ok(pooled(&a.channels, &a.bitmaps, &a.counts, &b.channels, &b.bitmaps, &b.counts))
}

/// `Σ_j min(|S^j|, |L^j|) / Σ_j max(|S^j|, |L^j|)`, never below the true score.
pub fn score_bound(query_counts: &[u64], entry_counts: &[u64]) -> Score {
    let (mut lo, mut hi) = (0u64, 0u64);
    for (&q, &e) in query_counts.iter().zip(entry_counts) {
        lo += q.min(e);
        hi += q.max(e);
    }
    Score::new(lo, hi)
}

/// Wall-clock split of one retrieval.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Timing {
    #[serde(with = "secs")]
    pub profile: Duration,
    #[serde(with = "secs")]
    pub scan: Duration,
    #[serde(with = "secs")]
    pub merge: Duration,
}

impl Timing {
    pub fn total(&self) -> Duration {
        self.profile + self.scan + self.merge
    }
}

mod secs {
    use serde::Serializer;
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }
}
