//! Request handling independent of the transport. The HTTP service and the
//! CLI both go through these functions, so their JSON is identical.

use std::path::Path;
use std::sync::Arc;

use bachkit_core::bank::MemoryBank;
use bachkit_core::fusion::{compose_label_map, fuse_background, pad_query, ComposedLabelMap, FusionParams, DEFAULT_STEPS};
use bachkit_core::layout::{rasterize_layout, validate_layout, CategoryId, SalientLayout, Violation};
use bachkit_core::params::load_params;
use bachkit_core::retrieval::{iou_r, retrieve_top_m, QueryProfile, RetrievalError, RetrievalResult, RetrieveOptions, Score};
use bachkit_core::tensor::Tensor;
use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::ServiceConfig;
use crate::preview::{render_preview, Palette, PreviewError};

/// Seed of the fusion weights used when no parameter fixture is configured.
pub const DEFAULT_FUSION_SEED: u64 = 0;
/// Digits after the point in `score_decimal`.
pub const SCORE_DIGITS: u32 = 6;

#[derive(Debug, Error)]
pub enum ApiError {
    #[error("{message}")]
    BadRequest { message: String, violations: Vec<Violation> },
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    Internal(String),
}

impl ApiError {
    pub fn bad(message: impl Into<String>) -> Self {
        Self::BadRequest {
            message: message.into(),
            violations: Vec::new(),
        }
    }

    pub fn status(&self) -> u16 {
        match self {
            Self::BadRequest { .. } => 400,
            Self::NotFound(_) => 404,
            Self::Conflict(_) => 409,
            Self::Internal(_) => 500,
        }
    }

    pub fn body(&self) -> ErrorBody {
        ErrorBody {
            error: self.to_string(),
            violations: match self {
                Self::BadRequest { violations, .. } => violations.clone(),
                _ => Vec::new(),
            },
        }
    }
}

impl From<RetrievalError> for ApiError {
    fn from(e: RetrievalError) -> Self {
        match e {
            RetrievalError::EmptyBank => Self::Conflict(e.to_string()),
            RetrievalError::InvalidQuery(violations) => Self::BadRequest {
                message: "invalid layout".into(),
                violations,
            },
            RetrievalError::Mismatch(_) | RetrievalError::Argument(_) | RetrievalError::Layout(_) => Self::bad(e.to_string()),
        }
    }
}

impl From<PreviewError> for ApiError {
    fn from(e: PreviewError) -> Self {
        Self::Internal(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorBody {
    pub error: String,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub violations: Vec<Violation>,
}

/// Everything a request may read. Shared immutably across requests.
#[derive(Debug)]
pub struct Context {
    pub bank: Arc<MemoryBank>,
    pub palette: Palette,
    pub fusion: FusionParams,
    pub m: usize,
    pub workers: usize,
}

impl Context {
    pub fn new(bank: MemoryBank, palette: Palette, fusion: FusionParams, m: usize, workers: usize) -> anyhow::Result<Self> {
        let t = bank.taxonomy();
        let k = t.c_o() + t.c_b();
        anyhow::ensure!(
            fusion.channels() == k,
            "fusion weights have {} channels, taxonomy {:?} needs {k}",
            fusion.channels(),
            t.name()
        );
        anyhow::ensure!(
            palette.background.len() == t.c_b() && palette.foreground.len() == t.c_o(),
            "palette does not match the taxonomy"
        );
        anyhow::ensure!(m >= 1 && workers >= 1, "m and workers must be at least 1");
        Ok(Self {
            bank: Arc::new(bank),
            palette,
            fusion,
            m,
            workers,
        })
    }

    /// Ingests the bank and loads palette and fusion weights.
    pub fn from_config(config: &ServiceConfig) -> anyhow::Result<Self> {
        config.validate()?;
        let bank = MemoryBank::ingest(config.bank_path()?)?;
        if let Some(path) = &config.taxonomy {
            let t = bachkit_core::layout::Taxonomy::load(path)?;
            anyhow::ensure!(
                &t == bank.taxonomy(),
                "taxonomy {} differs from the bank's taxonomy {:?}",
                path.display(),
                bank.taxonomy().name()
            );
        }
        let palette = match &config.palette {
            Some(spec) => Palette::from_spec(spec, bank.taxonomy())?,
            None => Palette::generated(bank.taxonomy()),
        };
        let k = bank.taxonomy().c_o() + bank.taxonomy().c_b();
        let fusion = match &config.params {
            Some(dir) => load_fusion(dir)?,
            None => FusionParams::seeded(k, DEFAULT_STEPS, DEFAULT_FUSION_SEED),
        };
        Self::new(bank, palette, fusion, config.m, config.workers)
    }
}

pub fn load_fusion(dir: &Path) -> anyhow::Result<FusionParams> {
    let groups = load_params(dir)?;
    let g = groups
        .get("fusion")
        .ok_or_else(|| anyhow::anyhow!("{}: no fusion parameter group", dir.display()))?;
    Ok(FusionParams::from_group(g)?)
}

/// `n/d` rounded half up to [`SCORE_DIGITS`] places with integer arithmetic.
pub fn score_decimal(score: Score) -> String {
    let (n, d) = score.reduced();
    let scale = 10u128.pow(SCORE_DIGITS);
    let scaled = (2 * n as u128 * scale + d as u128) / (2 * d as u128);
    format!("{}.{:0width$}", scaled / scale, scaled % scale, width = SCORE_DIGITS as usize)
}

fn png_base64(map: &ComposedLabelMap, palette: &Palette) -> Result<String, ApiError> {
    let png = render_preview(map, palette)?.to_png()?;
    Ok(base64::engine::general_purpose::STANDARD.encode(png))
}

fn check_m(m: Option<usize>, default: usize) -> Result<usize, ApiError> {
    match m.unwrap_or(default) {
        0 => Err(ApiError::bad("m must be at least 1")),
        m => Ok(m),
    }
}

fn validated(ctx: &Context, layout: &SalientLayout) -> Result<QueryProfile, ApiError> {
    validate_layout(layout, ctx.bank.taxonomy()).map_err(|violations| ApiError::BadRequest {
        message: "invalid layout".into(),
        violations,
    })?;
    if layout.canvas != ctx.bank.canvas() {
        return Err(ApiError::bad(format!(
            "layout canvas {} differs from the bank canvas {}",
            layout.canvas,
            ctx.bank.canvas()
        )));
    }
    Ok(QueryProfile::from_layout(layout, ctx.bank.taxonomy())?)
}

// ---------------------------------------------------------------- retrieve

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrieveRequest {
    pub layout: SalientLayout,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RankedEntry {
    pub id: String,
    /// Reduced fraction, e.g. `3/7`.
    pub score: String,
    pub score_decimal: String,
    pub thumbnail_ref: String,
}

impl RankedEntry {
    fn new(id: &str, score: Score) -> Self {
        Self {
            id: id.to_string(),
            score: score.to_string(),
            score_decimal: score_decimal(score),
            thumbnail_ref: format!("/preview/{id}"),
        }
    }
}

/// Deterministic: no timings or scan counters, which travel separately.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RetrieveResponse {
    pub bank_checksum: String,
    pub query_fingerprint: String,
    pub m: usize,
    pub results: Vec<RankedEntry>,
}

pub fn retrieve(ctx: &Context, request: &RetrieveRequest) -> Result<(RetrieveResponse, RetrievalResult), ApiError> {
    let m = check_m(request.m, ctx.m)?;
    validated(ctx, &request.layout)?;
    let options = RetrieveOptions {
        m,
        workers: ctx.workers,
        prune: true,
    };
    let result = retrieve_top_m(&ctx.bank, &request.layout, options)?;
    let response = RetrieveResponse {
        bank_checksum: ctx.bank.checksum().to_string(),
        query_fingerprint: result.fingerprint.clone(),
        m,
        results: result.hits.iter().map(|h| RankedEntry::new(&h.id, h.score)).collect(),
    };
    Ok((response, result))
}

// ---------------------------------------------------------------- fuse-preview

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusePreviewRequest {
    pub layout: SalientLayout,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    /// Overrides retrieval when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entry_ids: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PreviewEntry {
    pub id: String,
    pub score: String,
    pub score_decimal: String,
    /// Base64 PNG of the entry's background composed with the query.
    pub preview_png: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChannelSummary {
    pub category: CategoryId,
    pub name: String,
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeatureSummary {
    /// `[height, width, channels]`.
    pub shape: [usize; 3],
    /// Background categories first, as in the composed map.
    pub channels: Vec<ChannelSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FusePreviewResponse {
    pub bank_checksum: String,
    pub query_fingerprint: String,
    /// Backgrounds fused.
    pub m: usize,
    pub entries: Vec<PreviewEntry>,
    /// Base64 PNG of the query alone (empty background block).
    pub query_preview_png: String,
    pub feature: FeatureSummary,
}

#[derive(Debug, Clone)]
pub struct FusePreview {
    pub response: FusePreviewResponse,
    pub query: ComposedLabelMap,
    pub composed: Vec<ComposedLabelMap>,
    pub feature: Tensor,
}

pub fn summarize_feature(ctx: &Context, feature: &Tensor) -> Result<FeatureSummary, ApiError> {
    let (h, w, k) = feature.hwc().map_err(|e| ApiError::Internal(e.to_string()))?;
    let t = ctx.bank.taxonomy();
    let mut channels = Vec::with_capacity(k);
    for (ch, id) in t.composed_order().enumerate() {
        let (mut lo, mut hi, mut sum) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
        for v in feature.data().iter().skip(ch).step_by(k) {
            lo = lo.min(*v);
            hi = hi.max(*v);
            sum += v;
        }
        channels.push(ChannelSummary {
            category: id,
            name: t.category(id).map(|c| c.name.clone()).unwrap_or_default(),
            min: lo,
            mean: sum / (h * w) as f64,
            max: hi,
        });
    }
    Ok(FeatureSummary {
        shape: [h, w, k],
        channels,
    })
}

pub fn fuse_preview(ctx: &Context, request: &FusePreviewRequest) -> Result<FusePreview, ApiError> {
    let profile = validated(ctx, &request.layout)?;
    let bank = &ctx.bank;
    let selected: Vec<(usize, Score)> = match &request.entry_ids {
        Some(ids) => {
            if ids.is_empty() {
                return Err(ApiError::bad("entry_ids is empty"));
            }
            let mut v = Vec::with_capacity(ids.len());
            for id in ids {
                let i = bank
                    .position(id)
                    .ok_or_else(|| ApiError::NotFound(format!("no bank entry {id:?}")))?;
                v.push((i, iou_r(&profile, &bank.entries()[i])?));
            }
            v
        }
        None => {
            let (_, result) = retrieve(
                ctx,
                &RetrieveRequest {
                    layout: request.layout.clone(),
                    m: request.m,
                },
            )?;
            result.hits.iter().map(|h| (h.index, h.score)).collect()
        }
    };
    let t = bank.taxonomy();
    let fg = rasterize_layout(&request.layout, t).map_err(|e| ApiError::bad(e.to_string()))?;
    let query = pad_query(&fg, t.c_b()).map_err(|e| ApiError::Internal(e.to_string()))?;
    let mut composed = Vec::with_capacity(selected.len());
    let mut entries = Vec::with_capacity(selected.len());
    for &(i, score) in &selected {
        let bg = bank.background_map(i).map_err(|e| ApiError::Internal(e.to_string()))?;
        let map = compose_label_map(&bg, &fg).map_err(|e| ApiError::bad(e.to_string()))?;
        let id = bank.entries()[i].id();
        entries.push(PreviewEntry {
            id: id.to_string(),
            score: score.to_string(),
            score_decimal: score_decimal(score),
            preview_png: png_base64(&map, &ctx.palette)?,
        });
        composed.push(map);
    }
    let feature = fuse_background(&query, &composed, &ctx.fusion).map_err(|e| ApiError::Internal(e.to_string()))?;
    let response = FusePreviewResponse {
        bank_checksum: bank.checksum().to_string(),
        query_fingerprint: profile.fingerprint(),
        m: composed.len(),
        entries,
        query_preview_png: png_base64(&query, &ctx.palette)?,
        feature: summarize_feature(ctx, &feature)?,
    };
    Ok(FusePreview {
        response,
        query,
        composed,
        feature,
    })
}

// ---------------------------------------------------------------- small endpoints

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ValidateResponse {
    pub valid: bool,
    pub violations: Vec<Violation>,
}

pub fn validate(ctx: &Context, layout: &SalientLayout) -> ValidateResponse {
    let violations = validate_layout(layout, ctx.bank.taxonomy()).err().unwrap_or_default();
    ValidateResponse {
        valid: violations.is_empty(),
        violations,
    }
}

/// The entry's segmentation map, foreground composed over its filled
/// background.
pub fn entry_map(ctx: &Context, index: usize) -> Result<ComposedLabelMap, ApiError> {
    let bank = &ctx.bank;
    let internal = |e: &dyn std::fmt::Display| ApiError::Internal(e.to_string());
    let bg = bank.background_map(index).map_err(|e| internal(&e))?;
    let fg = bank.segmap(index).map_err(|e| internal(&e))?.foreground_map(bank.taxonomy());
    compose_label_map(&bg, &fg).map_err(|e| internal(&e))
}

/// The entry's own image when it has one on disk, else a rendered preview.
/// Returns the content type and the bytes.
pub fn entry_preview(ctx: &Context, id: &str) -> Result<(&'static str, Vec<u8>), ApiError> {
    let bank = &ctx.bank;
    let index = bank
        .position(id)
        .ok_or_else(|| ApiError::NotFound(format!("no bank entry {id:?}")))?;
    if let Some(path) = bank.entries()[index].image_ref() {
        let kind = match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
            Some("png") => Some("image/png"),
            Some("jpg" | "jpeg") => Some("image/jpeg"),
            _ => None,
        };
        if let (Some(kind), Ok(bytes)) = (kind, std::fs::read(path)) {
            return Ok((kind, bytes));
        }
    }
    let png = render_preview(&entry_map(ctx, index)?, &ctx.palette)?.to_png()?;
    Ok(("image/png", png))
}
