//! Seeded street-scene-like segmentation maps and query layouts.
//!
//! Maps are horizontal background bands (sky, building, sidewalk, road when
//! the taxonomy has them) with a few foreground rectangles standing on the
//! lower half. Everything is a pure function of `(taxonomy, canvas, seed)`.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{BankError, Manifest, ManifestEntry};
use crate::layout::{BoundingBox, Canvas, Category, CategoryId, SalientLayout, SegMap, Taxonomy};

const BAND_NAMES: [&str; 4] = ["sky", "building", "sidewalk", "road"];

pub fn entry_id(index: usize) -> String {
    format!("syn-{index:05}")
}

pub fn entry_seeds(seed: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random()).collect()
}

fn band_ids(taxonomy: &Taxonomy) -> Vec<CategoryId> {
    let named: Vec<CategoryId> = BAND_NAMES
        .iter()
        .filter_map(|n| taxonomy.background().iter().find(|c| c.name == *n).map(|c| c.id))
        .collect();
    if named.len() == BAND_NAMES.len() {
        named
    } else {
        taxonomy.background().iter().take(4).map(|c| c.id).collect()
    }
}

fn sample_boxes(rng: &mut ChaCha8Rng, taxonomy: &Taxonomy, canvas: Canvas, horizon: usize, count: usize) -> Vec<BoundingBox> {
    let (h, w) = (canvas.height as f64, canvas.width as f64);
    let fg = taxonomy.foreground();
    (0..count)
        .map(|_| {
            let category = fg[rng.random_range(0..fg.len())].id;
            let bottom = rng.random_range(horizon as f64..=h);
            // boxes lower in the frame are larger
            let depth = ((bottom - horizon as f64) / (h - horizon as f64).max(1.0)).clamp(0.0, 1.0);
            let bh = (h * (0.1 + 0.3 * depth) * rng.random_range(0.7..1.3)).max(2.0);
            let bw = (bh * rng.random_range(0.5..2.0)).clamp(2.0, w);
            let x = rng.random_range(0.0..(w - bw).max(1.0));
            BoundingBox::new(
                category,
                x as i32,
                (bottom - bh).max(0.0) as i32,
                bh.round() as i32,
                bw.round() as i32,
            )
        })
        .collect()
}

pub fn synth_segmap(taxonomy: &Taxonomy, canvas: Canvas, seed: u64) -> SegMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bands = band_ids(taxonomy);
    let h = canvas.height;
    let fallback = taxonomy.foreground().first().map_or(CategoryId(0), |c| c.id);
    let mut map = SegMap::filled(canvas, bands.first().copied().unwrap_or(fallback));
    let cuts = [
        (h as f64 * rng.random_range(0.1..0.3)) as usize,
        (h as f64 * rng.random_range(0.4..0.55)) as usize,
        (h as f64 * rng.random_range(0.55..0.65)) as usize,
    ];
    for (i, &id) in bands.iter().enumerate().skip(1) {
        let row0 = cuts[(i - 1).min(2)];
        map.fill_rect(row0, 0, h, canvas.width, id);
    }
    let horizon = cuts[1];
    let count = rng.random_range(1..=5);
    if !taxonomy.foreground().is_empty() {
        for b in sample_boxes(&mut rng, taxonomy, canvas, horizon, count) {
            if let Some(r) = b.clip(canvas) {
                map.fill_rect(r.row0, r.col0, r.row1, r.col1, b.category);
            }
        }
    }
    map
}

/// A query layout of 1 to 4 boxes.
pub fn synth_layout(taxonomy: &Taxonomy, canvas: Canvas, seed: u64) -> SalientLayout {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let horizon = (canvas.height as f64 * rng.random_range(0.4..0.55)) as usize;
    let count = rng.random_range(1..=4);
    let boxes = sample_boxes(&mut rng, taxonomy, canvas, horizon, count)
        .into_iter()
        .filter_map(|b| b.clipped(canvas))
        .collect();
    SalientLayout::new(canvas, taxonomy.name(), boxes)
}

/// Writes `taxonomy.json`, `segmaps/*.png` and `manifest.json` under `dir`
/// and returns the manifest path.
pub fn write_synthetic_bank(dir: &Path, taxonomy: &Taxonomy, canvas: Canvas, n: usize, seed: u64) -> Result<PathBuf, BankError> {
    let io = |path: &Path, e: std::io::Error| BankError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let seg_dir = dir.join("segmaps");
    std::fs::create_dir_all(&seg_dir).map_err(|e| io(&seg_dir, e))?;
    let tax_path = dir.join("taxonomy.json");
    std::fs::write(&tax_path, taxonomy.to_json()).map_err(|e| io(&tax_path, e))?;
    let mut entries = Vec::with_capacity(n);
    for (i, s) in entry_seeds(seed, n).into_iter().enumerate() {
        let id = entry_id(i);
        let rel = PathBuf::from("segmaps").join(format!("{id}.png"));
        synth_segmap(taxonomy, canvas, s).save_png(&dir.join(&rel))?;
        entries.push(ManifestEntry {
            id,
            segmap_path: rel,
            image_path: None,
        });
    }
    let manifest = Manifest {
        taxonomy_path: PathBuf::from("taxonomy.json"),
        canvas,
        entries,
    };
    let path = dir.join("manifest.json");
    std::fs::write(&path, manifest.to_json()).map_err(|e| io(&path, e))?;
    Ok(path)
}

/// Taxonomy `toy` with foreground ids `101..` and background ids `1..`.
pub fn toy_taxonomy(c_o: usize, c_b: usize) -> Taxonomy {
    let cat = |id: usize, kind: &str| Category {
        id: CategoryId(id as u8),
        name: format!("{kind}{id}"),
    };
    let fg = (0..c_o).map(|i| cat(101 + i, "object")).collect();
    let bg = (0..c_b).map(|i| cat(1 + i, "stuff")).collect();
    Taxonomy::new("toy", fg, bg).expect("toy ids are unique")
}

/// Random background blocks overlaid with up to `max_rects` foreground rectangles.
pub fn random_segmap(taxonomy: &Taxonomy, canvas: Canvas, seed: u64, max_rects: usize) -> SegMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bg = taxonomy.background();
    let fg = taxonomy.foreground();
    let mut map = SegMap::filled(canvas, bg[rng.random_range(0..bg.len())].id);
    for _ in 0..rng.random_range(0..4) {
        let r = random_rect(&mut rng, canvas);
        map.fill_rect(r.0, r.1, r.2, r.3, bg[rng.random_range(0..bg.len())].id);
    }
    for _ in 0..rng.random_range(0..=max_rects) {
        let r = random_rect(&mut rng, canvas);
        map.fill_rect(r.0, r.1, r.2, r.3, fg[rng.random_range(0..fg.len())].id);
    }
    map
}

/// A valid layout of 1 to `max_boxes` boxes, some of which may poke out of the canvas.
pub fn random_layout(taxonomy: &Taxonomy, canvas: Canvas, seed: u64, max_boxes: usize) -> SalientLayout {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fg = taxonomy.foreground();
    let (h, w) = (canvas.height as i32, canvas.width as i32);
    let boxes = (0..rng.random_range(1..=max_boxes.max(1)))
        .map(|_| {
            let x = rng.random_range(-w / 4..w);
            let y = rng.random_range(-h / 4..h);
            let bw = rng.random_range(1..=w / 2 + 1).max(1 - x.min(0) + 1);
            let bh = rng.random_range(1..=h / 2 + 1).max(1 - y.min(0) + 1);
            BoundingBox::new(fg[rng.random_range(0..fg.len())].id, x, y, bh, bw)
        })
        .collect();
    SalientLayout::new(canvas, taxonomy.name(), boxes)
}

fn random_rect(rng: &mut ChaCha8Rng, canvas: Canvas) -> (usize, usize, usize, usize) {
    let r0 = rng.random_range(0..canvas.height);
    let c0 = rng.random_range(0..canvas.width);
    let r1 = rng.random_range(r0 + 1..=canvas.height.min(r0 + canvas.height / 2 + 1));
    let c1 = rng.random_range(c0 + 1..=canvas.width.min(c0 + canvas.width / 2 + 1));
    (r0, c0, r1, c1)
}
