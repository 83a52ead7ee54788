use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use zerostyle::checkpoint::save_scene;
use zerostyle::eval::{LONG_GAP, SHORT_GAP};
use zerostyle::imageio::{read_png, write_png};
use zerostyle::model::{DualBranchModel, Reconstruction};
use zerostyle::train::{provider_for, run, TrainConfig};
use zerostyle_cli::pipeline::{
    eval_consistency, load_inputs, make_data, read_cameras, reconstruct, render_views, write_json, DataOptions,
    StyleRequest, StyleSlot,
};
use zerostyle_cli::server::{serve, ServerConfig, CACHE_DIR_ENV};

#[derive(Parser)]
#[command(name = "zerostyle", version, about = "Feed-forward splat reconstruction and stylization")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the frozen branch on a set of views and cache the result.
    Reconstruct {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Scene directory (with images/ and cameras.json) or a folder of PNGs.
        #[arg(long)]
        input: PathBuf,
        /// Camera list (JSON) overriding any found next to the images.
        #[arg(long)]
        cameras: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stylize a cached reconstruction and write one PNG per view.
    Stylize(StylizeArgs),
    /// Train from a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Depth-warp consistency of a scene rendered along a camera path.
    EvalConsistency {
        /// Scene checkpoint directory.
        #[arg(long)]
        scene: PathBuf,
        /// Camera path (JSON list of cameras).
        #[arg(long)]
        path: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = SHORT_GAP)]
        short_gap: usize,
        #[arg(long, default_value_t = LONG_GAP)]
        long_gap: usize,
    },
    /// Start the HTTP service.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        styles_dir: Option<PathBuf>,
        #[arg(long, env = CACHE_DIR_ENV)]
        cache_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        queue: usize,
    },
    /// Write synthetic scenes, a style library, a camera path and a config.
    MakeData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        scenes: usize,
        #[arg(long, default_value_t = 4)]
        views: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 8)]
        styles: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct StylizeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory written by `reconstruct`.
    #[arg(long)]
    cache: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    style_text: Option<String>,
    #[arg(long)]
    style_image: Option<PathBuf>,
    /// Blend weight toward the second style.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    style_b_text: Option<String>,
    #[arg(long)]
    style_b_image: Option<PathBuf>,
    /// Camera list (JSON) to render instead of the input views.
    #[arg(long)]
    views: Option<PathBuf>,
}

fn slot(text: &Option<String>, image: &Option<PathBuf>) -> Result<StyleSlot> {
    let image = match image {
        Some(p) => Some(read_png(p).with_context(|| format!("reading style image {}", p.display()))?),
        None => None,
    };
    Ok(StyleSlot { text: text.clone(), image })
}

fn describe(text: &Option<String>, image: &Option<PathBuf>) -> serde_json::Value {
    json!({ "text": text, "image": image })
}

fn cmd_stylize(a: &StylizeArgs) -> Result<()> {
    let request = StyleRequest::resolve(slot(&a.style_text, &a.style_image)?, slot(&a.style_b_text, &a.style_b_image)?, a.alpha)?;
    let model = DualBranchModel::load(&a.checkpoint)?;
    let rec = Reconstruction::load(&a.cache).with_context(|| format!("loading cache {}", a.cache.display()))?;
    let cams = match &a.views {
        Some(p) => read_cameras(p)?,
        None => rec.cameras.clone(),
    };
    let t = Instant::now();
    let z = request.embedding(&provider_for(&model.cfg))?;
    let scene = model.stylize(&rec, &z)?;
    let stylize_ms = t.elapsed().as_secs_f64() * 1e3;
    let t = Instant::now();
    let images = render_views(&scene, &cams)?;
    let render_ms = t.elapsed().as_secs_f64() * 1e3;

    fs::create_dir_all(&a.out)?;
    let mut files = Vec::new();
    for (i, im) in images.iter().enumerate() {
        let name = format!("view_{i:03}.png");
        write_png(&a.out.join(&name), im)?;
        files.push(name);
    }
    save_scene(&scene, &a.out.join("scene"))?;
    let manifest = json!({
        "checkpoint": a.checkpoint,
        "cache": a.cache,
        "frozen_digest": model.frozen_digest(),
        "style": describe(&a.style_text, &a.style_image),
        "style_b": describe(&a.style_b_text, &a.style_b_image),
        "alpha": a.alpha,
        "views": a.views,
        "files": files,
        "scene": "scene",
        "timings": { "stylize_ms": stylize_ms, "render_ms": render_ms },
    });
    write_json(&a.out.join("manifest.json"), &manifest)?;
    println!("wrote {} views to {}", files.len(), a.out.display());
    Ok(())
}

fn cmd_reconstruct(checkpoint: &Path, input: &Path, cameras: Option<&Path>, out: &Path) -> Result<()> {
    let model = DualBranchModel::load(checkpoint)?;
    let (images, cams) = load_inputs(input, cameras)?;
    let t = Instant::now();
    let rec = reconstruct(&model, &images, cams.as_deref())?;
    let secs = t.elapsed().as_secs_f64();
    rec.save(out)?;
    save_scene(&rec.scene, &out.join("frozen_scene"))?;
    println!("reconstructed {} views into {} Gaussians in {secs:.2} s -> {}", images.len(), rec.scene.len(), out.display());
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Command::Reconstruct { checkpoint, input, cameras, out } => {
            cmd_reconstruct(&checkpoint, &input, cameras.as_deref(), &out)
        }
        Command::Stylize(a) => cmd_stylize(&a),
        Command::Train { config } => {
            let cfg = TrainConfig::load(&config)?;
            let summary = run(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
            Ok(())
        }
        Command::EvalConsistency { scene, path, out, short_gap, long_gap } => {
            let report = eval_consistency(&scene, &path, short_gap, long_gap)?;
            write_json(&out, &report)?;
            let r = |m: Option<f64>| m.map_or("n/a".to_string(), |v| format!("{v:.5}"));
            println!(
                "short-range rmse {} long-range rmse {}",
                r(report.short_range.mean_rmse),
                r(report.long_range.as_ref().and_then(|l| l.mean_rmse))
            );
            Ok(())
        }
        Command::Serve { port, checkpoint, styles_dir, cache_dir, queue } => {
            if queue == 0 {
                bail!("--queue must be positive");
            }
            let cfg = ServerConfig { checkpoint, styles_dir, cache_dir, queue_capacity: queue, ..Default::default() };
            tokio::runtime::Runtime::new()?.block_on(serve(cfg, port))
        }
        Command::MakeData { out, scenes, views, size, styles, seed } => {
            let s = make_data(&out, &DataOptions { scenes, views, size, styles, seed })?;
            println!("{}", serde_json::to_string_pretty(&s)?);
            Ok(())
        }
    }
}
