use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{cache, check_unique, hex, validate_segmap, BankEntry, BankError, CacheStatus, MemoryBank, SegmapRef};
use crate::layout::{Canvas, SegMap, Taxonomy};

/// Sidecar directory created next to the manifest.
pub const CACHE_DIR: &str = ".bachkit-cache";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub segmap_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_path: Option<PathBuf>,
}

/// Paths are relative to the manifest's directory unless absolute.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub taxonomy_path: PathBuf,
    pub canvas: Canvas,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}

#[derive(Debug, Clone, Copy)]
pub struct IngestOptions {
    pub use_cache: bool,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self { use_cache: true }
    }
}

fn read(path: &Path) -> Result<Vec<u8>, BankError> {
    std::fs::read(path).map_err(|e| BankError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

impl MemoryBank {
    pub fn ingest(manifest_path: &Path) -> Result<Self, BankError> {
        Self::ingest_with(manifest_path, IngestOptions::default())
    }

    pub fn ingest_with(manifest_path: &Path, options: IngestOptions) -> Result<Self, BankError> {
        let manifest_bytes = read(manifest_path)?;
        let manifest: Manifest =
            serde_json::from_slice(&manifest_bytes).map_err(|e| BankError::Manifest(format!("{}: {e}", manifest_path.display())))?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        let taxonomy_bytes = read(&base.join(&manifest.taxonomy_path))?;
        let taxonomy: Taxonomy = serde_json::from_slice(&taxonomy_bytes)
            .map_err(|e| BankError::Manifest(format!("taxonomy {}: {e}", manifest.taxonomy_path.display())))?;
        check_unique(manifest.entries.iter().map(|e| e.id.as_str()))?;

        let files: Vec<(PathBuf, Vec<u8>)> = manifest
            .entries
            .par_iter()
            .map(|e| {
                let path = base.join(&e.segmap_path);
                read(&path).map(|bytes| (path, bytes)).map_err(|err| BankError::Entry {
                    id: e.id.clone(),
                    reason: err.to_string(),
                })
            })
            .collect::<Result<_, _>>()?;

        let mut hash = Sha256::new();
        hash.update(b"bachkit-bank-manifest\0");
        for part in std::iter::once(&manifest_bytes)
            .chain(std::iter::once(&taxonomy_bytes))
            .chain(files.iter().map(|(_, b)| b))
        {
            hash.update((part.len() as u64).to_le_bytes());
            hash.update(part);
        }
        let checksum = hex(&hash.finalize());

        let cache_path = cache_path(manifest_path);
        if options.use_cache {
            match cache::load(&cache_path, &checksum, manifest.canvas, &taxonomy) {
                Ok(Some(cached)) if cached.len() == manifest.entries.len() => {
                    let entries = manifest
                        .entries
                        .iter()
                        .zip(cached)
                        .zip(files)
                        .map(|((m, bitmaps), (path, _))| {
                            let source = SegmapRef::File(path);
                            let image = m.image_path.as_ref().map(|p| base.join(p));
                            BankEntry::from_bitmaps(m.id.clone(), manifest.canvas, source, image, bitmaps, &taxonomy)
                        })
                        .collect();
                    log::debug!("bank cache hit: {}", cache_path.display());
                    return Ok(Self {
                        taxonomy: Arc::new(taxonomy),
                        canvas: manifest.canvas,
                        entries,
                        checksum,
                        cache: CacheStatus::Hit,
                    });
                }
                Ok(_) => log::debug!("bank cache stale or absent: {}", cache_path.display()),
                Err(e) => log::warn!("ignoring unreadable bank cache {}: {e}", cache_path.display()),
            }
        }

        let entries: Vec<BankEntry> = manifest
            .entries
            .par_iter()
            .zip(files)
            .map(|(m, (path, bytes))| {
                let segmap = SegMap::decode_png(&bytes).map_err(|e| BankError::Entry {
                    id: m.id.clone(),
                    reason: format!("{}: {e}", path.display()),
                })?;
                validate_segmap(&m.id, &segmap, manifest.canvas, &taxonomy)?;
                let image = m.image_path.as_ref().map(|p| base.join(p));
                Ok(BankEntry::from_segmap(
                    m.id.clone(),
                    SegmapRef::File(path),
                    image,
                    &segmap,
                    &taxonomy,
                ))
            })
            .collect::<Result<_, BankError>>()?;

        let status = if options.use_cache {
            if let Err(e) = cache::store(&cache_path, &checksum, manifest.canvas, &entries) {
                log::warn!("could not write bank cache {}: {e}", cache_path.display());
            }
            CacheStatus::Rebuilt
        } else {
            CacheStatus::Disabled
        };
        Ok(Self {
            taxonomy: Arc::new(taxonomy),
            canvas: manifest.canvas,
            entries,
            checksum,
            cache: status,
        })
    }
}

fn cache_path(manifest_path: &Path) -> PathBuf {
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let stem = manifest_path
        .file_name()
        .map_or("manifest".into(), |s| s.to_string_lossy().into_owned());
    base.join(CACHE_DIR).join(format!("{stem}.bank"))
}
