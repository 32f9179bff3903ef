//! The memory bank of segmentation maps searched at inference time.

mod background;
mod cache;
mod ingest;
pub mod synth;

use std::path::PathBuf;
use std::sync::{Arc, OnceLock};

use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::layout::{Canvas, CategoryBitmap, CategoryId, LabelMap, LayoutError, SegMap, Taxonomy};

pub use background::{fill_background, split_background};
pub use ingest::{IngestOptions, Manifest, ManifestEntry, CACHE_DIR};

#[derive(Debug, Error)]
pub enum BankError {
    #[error("{}: {message}", path.display())]
    Io { path: PathBuf, message: String },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("entry {id:?}: {reason}")]
    Entry { id: String, reason: String },
    #[error("duplicate entry id {0:?}")]
    DuplicateId(String),
    #[error("entry {0:?} has no background pixels")]
    DegenerateBackground(String),
    #[error("no entry at index {0}")]
    NoSuchEntry(usize),
    #[error(transparent)]
    Layout(#[from] LayoutError),
}

/// Where an entry's full segmentation map can be recovered from.
#[derive(Debug, Clone)]
pub enum SegmapRef {
    Memory(Arc<SegMap>),
    File(PathBuf),
    /// Regenerated from [`synth::synth_segmap`] with this seed.
    Synthetic {
        seed: u64,
    },
}

#[derive(Debug)]
pub struct BankEntry {
    id: String,
    canvas: Canvas,
    source: SegmapRef,
    image_ref: Option<PathBuf>,
    channels: Vec<usize>,
    bitmaps: Vec<CategoryBitmap>,
    counts: Vec<u64>,
    background: OnceLock<Arc<SegMap>>,
}

impl BankEntry {
    /// `segmap` must already be validated against `taxonomy`.
    pub(crate) fn from_segmap(id: String, source: SegmapRef, image_ref: Option<PathBuf>, segmap: &SegMap, taxonomy: &Taxonomy) -> Self {
        let bitmaps = segmap.foreground_bitmaps(taxonomy);
        Self::from_bitmaps(id, segmap.canvas(), source, image_ref, bitmaps, taxonomy)
    }

    pub(crate) fn from_bitmaps(
        id: String,
        canvas: Canvas,
        source: SegmapRef,
        image_ref: Option<PathBuf>,
        bitmaps: Vec<CategoryBitmap>,
        taxonomy: &Taxonomy,
    ) -> Self {
        let mut counts = vec![0u64; taxonomy.c_o()];
        let channels = bitmaps
            .iter()
            .map(|b| {
                let ch = taxonomy.foreground_index(b.category()).expect("foreground bitmap");
                counts[ch] = b.cardinality();
                ch
            })
            .collect();
        Self {
            id,
            canvas,
            source,
            image_ref,
            channels,
            bitmaps,
            counts,
            background: OnceLock::new(),
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn canvas(&self) -> Canvas {
        self.canvas
    }

    pub fn source(&self) -> &SegmapRef {
        &self.source
    }

    pub fn image_ref(&self) -> Option<&PathBuf> {
        self.image_ref.as_ref()
    }

    /// Bitmaps of the foreground categories present, in channel order.
    pub fn bitmaps(&self) -> &[CategoryBitmap] {
        &self.bitmaps
    }

    /// Foreground channel index of each entry of [`Self::bitmaps`].
    pub fn channels(&self) -> &[usize] {
        &self.channels
    }

    /// Pixel count per foreground channel (`C_o` values, zero when absent).
    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn bitmap(&self, category: CategoryId) -> Option<&CategoryBitmap> {
        self.bitmaps.iter().find(|b| b.category() == category)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheStatus {
    /// Built in memory, no sidecar involved.
    InMemory,
    Disabled,
    Hit,
    Rebuilt,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CategoryStats {
    pub id: CategoryId,
    pub name: String,
    /// Entries containing the category.
    pub frequency: usize,
    /// Mean pixel count over the entries containing it.
    pub mean_area: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BankStats {
    pub entries: usize,
    pub canvas: Canvas,
    pub taxonomy: String,
    pub checksum: String,
    pub cache: CacheStatus,
    pub categories: Vec<CategoryStats>,
}

/// Immutable once built.
#[derive(Debug)]
pub struct MemoryBank {
    taxonomy: Arc<Taxonomy>,
    canvas: Canvas,
    entries: Vec<BankEntry>,
    checksum: String,
    cache: CacheStatus,
}

impl MemoryBank {
    pub fn from_segmaps(
        taxonomy: Taxonomy,
        canvas: Canvas,
        segmaps: impl IntoIterator<Item = (String, SegMap)>,
    ) -> Result<Self, BankError> {
        let segmaps: Vec<(String, SegMap)> = segmaps.into_iter().collect();
        check_unique(segmaps.iter().map(|(id, _)| id.as_str()))?;
        let mut hash = Sha256::new();
        hash.update(b"bachkit-bank-memory\0");
        hash.update(taxonomy.to_json());
        hash.update(canvas.to_string());
        for (id, s) in &segmaps {
            validate_segmap(id, s, canvas, &taxonomy)?;
            hash.update((id.len() as u64).to_le_bytes());
            hash.update(id);
            hash.update(s.data());
        }
        let entries = segmaps
            .into_par_iter()
            .map(|(id, s)| {
                let s = Arc::new(s);
                BankEntry::from_segmap(id, SegmapRef::Memory(s.clone()), None, &s, &taxonomy)
            })
            .collect();
        Ok(Self {
            taxonomy: Arc::new(taxonomy),
            canvas,
            entries,
            checksum: hex(&hash.finalize()),
            cache: CacheStatus::InMemory,
        })
    }

    /// `n` entries regenerated on demand from per-entry seeds; only bitmaps are held.
    pub fn synthetic(taxonomy: Taxonomy, canvas: Canvas, n: usize, seed: u64) -> Self {
        let seeds = synth::entry_seeds(seed, n);
        let entries = seeds
            .par_iter()
            .enumerate()
            .map(|(i, &s)| {
                let map = synth::synth_segmap(&taxonomy, canvas, s);
                BankEntry::from_segmap(synth::entry_id(i), SegmapRef::Synthetic { seed: s }, None, &map, &taxonomy)
            })
            .collect();
        let mut hash = Sha256::new();
        hash.update(b"bachkit-bank-synthetic\0");
        hash.update(taxonomy.to_json());
        hash.update(canvas.to_string());
        hash.update((n as u64).to_le_bytes());
        hash.update(seed.to_le_bytes());
        Self {
            taxonomy: Arc::new(taxonomy),
            canvas,
            entries,
            checksum: hex(&hash.finalize()),
            cache: CacheStatus::InMemory,
        }
    }

    pub fn taxonomy(&self) -> &Taxonomy {
        &self.taxonomy
    }

    pub fn taxonomy_arc(&self) -> Arc<Taxonomy> {
        self.taxonomy.clone()
    }

    pub fn canvas(&self) -> Canvas {
        self.canvas
    }

    pub fn entries(&self) -> &[BankEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn checksum(&self) -> &str {
        &self.checksum
    }

    pub fn cache_status(&self) -> CacheStatus {
        self.cache
    }

    pub fn entry(&self, index: usize) -> Result<&BankEntry, BankError> {
        self.entries.get(index).ok_or(BankError::NoSuchEntry(index))
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.id == id)
    }

    /// The full segmentation map of an entry.
    pub fn segmap(&self, index: usize) -> Result<Arc<SegMap>, BankError> {
        let e = self.entry(index)?;
        match &e.source {
            SegmapRef::Memory(s) => Ok(s.clone()),
            SegmapRef::Synthetic { seed } => Ok(Arc::new(synth::synth_segmap(&self.taxonomy, self.canvas, *seed))),
            SegmapRef::File(path) => {
                let s = SegMap::load_png(path)?;
                validate_segmap(&e.id, &s, self.canvas, &self.taxonomy)?;
                Ok(Arc::new(s))
            }
        }
    }

    /// Segmentation map with every foreground pixel reassigned to a
    /// background category; computed once per entry.
    pub fn filled_background(&self, index: usize) -> Result<Arc<SegMap>, BankError> {
        let e = self.entry(index)?;
        if let Some(m) = e.background.get() {
            return Ok(m.clone());
        }
        let filled = fill_background(&*self.segmap(index)?, &self.taxonomy).map_err(|err| match err {
            BankError::DegenerateBackground(_) => BankError::DegenerateBackground(e.id.clone()),
            other => other,
        })?;
        Ok(e.background.get_or_init(|| Arc::new(filled)).clone())
    }

    /// `M_b` of an entry: `C_b` channels, exactly one set per pixel.
    pub fn background_map(&self, index: usize) -> Result<LabelMap, BankError> {
        Ok(background::one_hot_background(&*self.filled_background(index)?, &self.taxonomy))
    }

    pub fn stats(&self) -> BankStats {
        let c_o = self.taxonomy.c_o();
        let mut freq = vec![0usize; c_o];
        let mut area = vec![0u64; c_o];
        for e in &self.entries {
            for (&ch, b) in e.channels.iter().zip(&e.bitmaps) {
                freq[ch] += 1;
                area[ch] += b.cardinality();
            }
        }
        let categories = self
            .taxonomy
            .foreground()
            .iter()
            .enumerate()
            .map(|(i, c)| CategoryStats {
                id: c.id,
                name: c.name.clone(),
                frequency: freq[i],
                mean_area: if freq[i] == 0 { 0.0 } else { area[i] as f64 / freq[i] as f64 },
            })
            .collect();
        BankStats {
            entries: self.entries.len(),
            canvas: self.canvas,
            taxonomy: self.taxonomy.name().to_string(),
            checksum: self.checksum.clone(),
            cache: self.cache,
            categories,
        }
    }
}

fn check_unique<'a>(ids: impl Iterator<Item = &'a str>) -> Result<(), BankError> {
    let mut seen = std::collections::HashSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(BankError::DuplicateId(id.to_string()));
        }
    }
    Ok(())
}

fn validate_segmap(id: &str, s: &SegMap, canvas: Canvas, taxonomy: &Taxonomy) -> Result<(), BankError> {
    if s.canvas() != canvas {
        return Err(BankError::Entry {
            id: id.to_string(),
            reason: format!("extent {} differs from bank canvas {canvas}", s.canvas()),
        });
    }
    if let Some((row, col, v)) = s.find_unknown(taxonomy) {
        return Err(BankError::Entry {
            id: id.to_string(),
            reason: format!("pixel ({row}, {col}) has id {v}, which is not in taxonomy {:?}", taxonomy.name()),
        });
    }
    Ok(())
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
