//! The `bachkit` command line.

use std::collections::BTreeMap;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context as _};
use bachkit_core::bank::synth::{synth_layout, write_synthetic_bank};
use bachkit_core::bank::MemoryBank;
use bachkit_core::fusion::{pad_query, FusionParams, DEFAULT_STEPS};
use bachkit_core::generator::{generate, toy_train, GeneratorConfig, GeneratorWeights, TrainConfig, TrainMode};
use bachkit_core::layout::{rasterize_layout, Canvas, SalientLayout, Taxonomy};
use bachkit_core::params::{load_params, save_params};
use bachkit_core::retrieval::{bench_retrieval, BenchOptions};
use bachkit_core::tensor::{read_tensor, write_tensor, Tensor};
use bachkit_core::verify::{verify_components, TOLERANCE};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::api::{self, Context, FusePreviewRequest, RetrieveRequest};
use crate::config::ServiceConfig;
use crate::preview::{image_from_tensor, render_preview, Palette};

#[derive(Debug, Parser)]
#[command(
    name = "bachkit",
    version,
    about = "Layout-conditioned background retrieval, fusion and generation"
)]
pub struct Cli {
    /// TOML service configuration; command-line flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

/// Overrides for the configured bank and defaults.
#[derive(Debug, Clone, Default, Args)]
pub struct BankArgs {
    /// Bank manifest.
    #[arg(long)]
    pub bank: Option<PathBuf>,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub workers: Option<usize>,
    /// Parameter fixture directory.
    #[arg(long)]
    pub params: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Rasterize a layout into a foreground label map.
    Rasterize {
        #[arg(long)]
        layout: PathBuf,
        /// Taxonomy file or preset name; defaults to the layout's taxonomy preset.
        #[arg(long)]
        taxonomy: Option<String>,
        /// Preview PNG.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Tensor dump of the label map.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Rank bank entries by layout similarity.
    Retrieve {
        #[arg(long)]
        layout: PathBuf,
        #[command(flatten)]
        bank: BankArgs,
    },
    /// Time retrieval over a bank.
    Bench {
        /// Bank manifest; a synthetic bank is generated when absent.
        #[arg(long)]
        bank: Option<PathBuf>,
        #[arg(long, default_value_t = 5000)]
        synthetic: usize,
        #[arg(long, default_value = "256x512", value_parser = parse_canvas)]
        canvas: Canvas,
        #[arg(long, default_value = "cityscapes")]
        taxonomy: String,
        #[arg(long, default_value_t = 10)]
        queries: usize,
        #[arg(long, default_value_t = 4)]
        workers: usize,
        #[arg(long, default_value_t = 3)]
        m: usize,
        #[arg(long)]
        prune: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Retrieve (or take the given entries), compose and fuse backgrounds.
    Fuse {
        #[arg(long)]
        layout: PathBuf,
        #[command(flatten)]
        bank: BankArgs,
        /// Comma-separated entry ids; skips retrieval.
        #[arg(long, value_delimiter = ',')]
        entries: Option<Vec<String>>,
        /// Tensor dump of the fused feature map.
        #[arg(long)]
        out: PathBuf,
        /// Directory for composed-map previews.
        #[arg(long)]
        previews: Option<PathBuf>,
    },
    /// Run the generator on a fused feature map.
    Generate {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        feature: PathBuf,
        /// Output PNG.
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every differentiable component.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train fusion and generator on one synthetic pair.
    TrainToy {
        #[arg(long, default_value = "recon")]
        mode: TrainMode,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        lr: Option<f64>,
        /// Report, weights and images are written here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve the HTTP API.
    Serve {
        #[command(flatten)]
        bank: BankArgs,
        #[arg(long)]
        listen: Option<SocketAddr>,
    },
    /// Write a synthetic bank (segmentation PNGs plus manifest).
    SynthBank {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        n: usize,
        #[arg(long, default_value = "cityscapes")]
        taxonomy: String,
        #[arg(long, default_value = "64x128", value_parser = parse_canvas)]
        canvas: Canvas,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a random street-scene layout.
    SynthLayout {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "cityscapes")]
        taxonomy: String,
        #[arg(long, default_value = "64x128", value_parser = parse_canvas)]
        canvas: Canvas,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write seeded fusion and generator weights for a taxonomy.
    InitParams {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "cityscapes")]
        taxonomy: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 16)]
        channels: usize,
        #[arg(long, default_value_t = 2)]
        blocks: usize,
        #[arg(long, default_value_t = 1)]
        upsamples: usize,
    },
}

/// `HxW`, e.g. `256x512`.
pub fn parse_canvas(s: &str) -> Result<Canvas, String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let dim = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    let c = Canvas::new(dim(h)?, dim(w)?);
    if c.pixels() == 0 {
        return Err("canvas must be non-empty".into());
    }
    Ok(c)
}

/// A taxonomy file path or a preset name.
pub fn resolve_taxonomy(spec: &str) -> anyhow::Result<Taxonomy> {
    let path = Path::new(spec);
    if path.exists() {
        return Ok(Taxonomy::load(path)?);
    }
    Taxonomy::preset(spec).ok_or_else(|| anyhow::anyhow!("{spec:?} is neither a taxonomy file nor a preset (cityscapes, ade20k)"))
}

fn print_json<T: Serialize>(value: &T) -> anyhow::Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| path.display().to_string())
}

fn base_config(path: Option<&Path>) -> anyhow::Result<ServiceConfig> {
    match path {
        Some(p) => Ok(ServiceConfig::load(p)?),
        None => Ok(ServiceConfig::default()),
    }
}

fn merged(config: &ServiceConfig, args: &BankArgs) -> anyhow::Result<ServiceConfig> {
    let mut c = config.clone();
    if let Some(b) = &args.bank {
        c.bank = Some(b.clone());
    }
    if let Some(m) = args.m {
        c.m = m;
    }
    if let Some(w) = args.workers {
        c.workers = w;
    }
    if let Some(p) = &args.params {
        c.params = Some(p.clone());
    }
    c.validate()?;
    Ok(c)
}

fn load_generator(dir: &Path) -> anyhow::Result<GeneratorWeights> {
    let groups = load_params(dir)?;
    let g = groups
        .get("generator")
        .ok_or_else(|| anyhow::anyhow!("{}: no generator parameter group", dir.display()))?;
    Ok(GeneratorWeights::from_group(g)?)
}

/// A feature dump as an `H x W x K` tensor; dumps are stored with a leading unit extent.
pub fn read_feature(path: &Path) -> anyhow::Result<Tensor> {
    let t = read_tensor(path)?;
    match *t.shape() {
        [1, h, w, k] => Ok(t.reshape(&[h, w, k])?),
        ref s => anyhow::bail!("{}: expected a 1 x H x W x K dump, got {s:?}", path.display()),
    }
}

fn api_error(e: api::ApiError) -> anyhow::Error {
    let body = e.body();
    let mut msg = body.error;
    for v in body.violations {
        msg.push_str(&format!("\n  - {v}"));
    }
    anyhow::anyhow!(msg)
}

#[derive(Serialize)]
struct RasterSummary {
    canvas: Canvas,
    channels: usize,
    /// Pixels per foreground category with any coverage.
    coverage: BTreeMap<String, u64>,
    max_overlap: u32,
}

#[derive(Serialize)]
struct FuseSummary<'a> {
    m: usize,
    entries: Vec<(&'a str, &'a str, &'a str)>,
    feature: &'a api::FeatureSummary,
    out: &'a Path,
}

pub fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let config = base_config(cli.config.as_deref())?;
    match cli.command {
        Command::Rasterize {
            layout,
            taxonomy,
            out,
            dump,
        } => {
            let layout = SalientLayout::load(&layout)?;
            let t = match (&taxonomy, &config.taxonomy) {
                (Some(s), _) => resolve_taxonomy(s)?,
                (None, Some(p)) => Taxonomy::load(p)?,
                (None, None) => resolve_taxonomy(&layout.taxonomy)?,
            };
            let map = rasterize_layout(&layout, &t)?;
            let mut coverage = BTreeMap::new();
            for (j, c) in t.foreground().iter().enumerate() {
                let n = map.data().iter().skip(j).step_by(t.c_o()).filter(|&&v| v > 0).count() as u64;
                if n > 0 {
                    coverage.insert(c.name.clone(), n);
                }
            }
            let canvas = map.canvas();
            let max_overlap = (0..canvas.height)
                .flat_map(|r| (0..canvas.width).map(move |c| (r, c)))
                .map(|(r, c)| map.pixel_sum(r, c))
                .max()
                .unwrap_or(0);
            if let Some(path) = &dump {
                write_tensor(&map.to_tensor(), path)?;
            }
            if let Some(path) = &out {
                let palette = match &config.palette {
                    Some(spec) => Palette::from_spec(spec, &t)?,
                    None => Palette::generated(&t),
                };
                render_preview(&pad_query(&map, t.c_b())?, &palette)?.save(path)?;
            }
            print_json(&RasterSummary {
                canvas,
                channels: map.channels(),
                coverage,
                max_overlap,
            })?;
        }
        Command::Retrieve { layout, bank } => {
            let ctx = Context::from_config(&merged(&config, &bank)?)?;
            let request = RetrieveRequest {
                layout: SalientLayout::load(&layout)?,
                m: None,
            };
            let (response, result) = api::retrieve(&ctx, &request).map_err(api_error)?;
            log::info!(
                "scanned {} entries ({} pruned) in {:.3} ms",
                result.counters.scored + result.counters.pruned,
                result.counters.pruned,
                result.timing.total().as_secs_f64() * 1e3
            );
            print_json(&response)?;
        }
        Command::Bench {
            bank,
            synthetic,
            canvas,
            taxonomy,
            queries,
            workers,
            m,
            prune,
            seed,
        } => {
            let bank = match bank.or(config.bank.clone()) {
                Some(path) => MemoryBank::ingest(&path)?,
                None => MemoryBank::synthetic(resolve_taxonomy(&taxonomy)?, canvas, synthetic, seed),
            };
            let layouts: Vec<SalientLayout> = (0..queries as u64)
                .map(|i| synth_layout(bank.taxonomy(), bank.canvas(), seed.wrapping_add(1000 + i)))
                .collect();
            let report = bench_retrieval(&bank, &layouts, BenchOptions { workers, m, prune })?;
            print_json(&report)?;
        }
        Command::Fuse {
            layout,
            bank,
            entries,
            out,
            previews,
        } => {
            let ctx = Context::from_config(&merged(&config, &bank)?)?;
            let request = FusePreviewRequest {
                layout: SalientLayout::load(&layout)?,
                m: None,
                entry_ids: entries,
            };
            let fused = api::fuse_preview(&ctx, &request).map_err(api_error)?;
            write_tensor(&fused.feature, &out)?;
            if let Some(dir) = &previews {
                std::fs::create_dir_all(dir)?;
                render_preview(&fused.query, &ctx.palette)?.save(&dir.join("query.png"))?;
                for (e, map) in fused.response.entries.iter().zip(&fused.composed) {
                    render_preview(map, &ctx.palette)?.save(&dir.join(format!("{}.png", e.id)))?;
                }
            }
            let r = &fused.response;
            print_json(&FuseSummary {
                m: r.m,
                entries: r
                    .entries
                    .iter()
                    .map(|e| (e.id.as_str(), e.score.as_str(), e.score_decimal.as_str()))
                    .collect(),
                feature: &r.feature,
                out: &out,
            })?;
        }
        Command::Generate { params, feature, out } => {
            let weights = load_generator(&params)?;
            let feature = read_feature(&feature)?;
            let image = generate(&feature, &weights)?;
            image_from_tensor(&image)?.save(&out)?;
            let (h, w, _) = image.hwc()?;
            print_json(&serde_json::json!({ "height": h, "width": w, "out": out }))?;
        }
        Command::Gradcheck { seed } => {
            let checks = verify_components(seed)?;
            let mut ok = true;
            for c in &checks {
                ok &= c.passed();
                println!(
                    "{:<18} {:>6} coords  max rel err {:.3e}  {}",
                    c.component,
                    c.coordinates,
                    c.max_relative_error,
                    if c.passed() { "ok" } else { "FAIL" }
                );
            }
            println!("tolerance {TOLERANCE:e}");
            return Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE });
        }
        Command::TrainToy {
            mode,
            steps,
            seed,
            lr,
            out,
        } => {
            let mut tc = TrainConfig::new(mode, steps, seed);
            if let Some(lr) = lr {
                tc.lr = lr;
            }
            let outcome = toy_train(&tc)?;
            let r = &outcome.report;
            eprintln!(
                "{mode}: loss {:.5} -> {:.5} ({:.1}% reduction) over {steps} steps",
                r.initial_loss,
                r.final_loss,
                r.reduction * 100.0
            );
            if let Some(dir) = &out {
                std::fs::create_dir_all(dir)?;
                write_json(&dir.join("report.json"), r)?;
                let mut groups = BTreeMap::new();
                groups.insert("fusion".to_string(), outcome.fusion.to_group());
                groups.insert("generator".to_string(), outcome.generator.to_group());
                if let Some(d) = &outcome.discriminator {
                    groups.insert("discriminator".to_string(), d.to_group());
                }
                save_params(&dir.join("params"), &groups)?;
                image_from_tensor(&outcome.output)?.save(&dir.join("output.png"))?;
                image_from_tensor(&outcome.pair.target)?.save(&dir.join("target.png"))?;
            }
            print_json(&serde_json::json!({
                "mode": r.mode,
                "steps": r.steps,
                "initial_loss": r.initial_loss,
                "final_loss": r.final_loss,
                "reduction": r.reduction,
                "grad_check": r.grad_check,
            }))?;
        }
        Command::Serve { bank, listen } => {
            let mut c = merged(&config, &bank)?;
            if let Some(l) = listen {
                c.listen = l;
            }
            let ctx = Arc::new(Context::from_config(&c)?);
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(crate::service::serve(ctx, c.listen))?;
        }
        Command::SynthBank {
            out,
            n,
            taxonomy,
            canvas,
            seed,
        } => {
            let t = resolve_taxonomy(&taxonomy)?;
            let manifest = write_synthetic_bank(&out, &t, canvas, n, seed)?;
            println!("{}", manifest.display());
        }
        Command::SynthLayout {
            out,
            taxonomy,
            canvas,
            seed,
        } => {
            let t = resolve_taxonomy(&taxonomy)?;
            synth_layout(&t, canvas, seed).save(&out)?;
            println!("{}", out.display());
        }
        Command::InitParams {
            out,
            taxonomy,
            seed,
            channels,
            blocks,
            upsamples,
        } => {
            let t = resolve_taxonomy(&taxonomy)?;
            let k = t.c_o() + t.c_b();
            if k == 0 {
                bail!("taxonomy {:?} has no categories", t.name());
            }
            let gc = GeneratorConfig {
                channels,
                blocks,
                upsamples,
                ..GeneratorConfig::new(k)
            };
            let mut groups = BTreeMap::new();
            groups.insert("fusion".to_string(), FusionParams::seeded(k, DEFAULT_STEPS, seed).to_group());
            groups.insert(
                "generator".to_string(),
                GeneratorWeights::seeded(gc, seed.wrapping_add(1))?.to_group(),
            );
            save_params(&out, &groups)?;
            println!("{}", out.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

pub fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
