mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use x0t_core::archive::ArrayArchive;
use x0t_core::backend::{self, Backend};
use x0t_core::cache::TrajectoryCache;
use x0t_core::evaluation::{evaluate_directory, MockEmbedder};
use x0t_core::inversion::replay_reconstruction;
use x0t_core::matching::{build_correlation_map, cosine_similarity_field};
use x0t_core::pipeline::{self, invert_source, load_image_for, RunConfig, StageError};
use x0t_core::schedule::{Schedule, Timestep};
use x0t_core::Error;

use crate::config::{RunArgs, CACHE_ENV};

/// Appearance transfer between images in the predicted-x0 space of a
/// latent diffusion model.
#[derive(Debug, Parser)]
#[command(name = "x0t", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Null-text invert the source image and write its reconstruction.
    Invert(RunArgs),
    /// Transfer the target's appearance onto the source object.
    Transfer(RunArgs),
    /// Report the feature correspondence between the two clean images.
    MatchDebug(RunArgs),
    /// Score outputs listed in a pairs manifest.
    Evaluate {
        /// JSON list of {output, source_prompt, source_image}.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "eval")]
        out_dir: PathBuf,
        /// Write only the CSV report.
        #[arg(long)]
        csv_only: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Inspect or clear the trajectory cache.
    Cache {
        #[command(subcommand)]
        action: CacheAction,
        #[arg(long, global = true)]
        cache_dir: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
enum CacheAction {
    List,
    Clear,
}

enum Failure {
    Core(Error),
    Staged(StageError),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl From<StageError> for Failure {
    fn from(e: StageError) -> Self {
        Failure::Staged(e)
    }
}

impl Failure {
    fn report(&self) -> ExitCode {
        let (msg, config) = match self {
            Failure::Core(e) => (e.to_string(), e.is_config_error()),
            Failure::Staged(e) => (e.to_string(), e.is_config_error()),
        };
        eprintln!("error: {msg}");
        ExitCode::from(if config { 2 } else { 1 })
    }
}

type CmdResult = Result<(), Failure>;

fn env_cache() -> Option<PathBuf> {
    std::env::var_os(CACHE_ENV).filter(|v| !v.is_empty()).map(PathBuf::from)
}

fn open_backend(cfg: &RunConfig) -> Result<Box<dyn Backend>, Failure> {
    backend::open(&cfg.effective_backend()).map_err(|error| {
        Failure::Staged(StageError {
            stage: pipeline::Stage::Backend,
            error,
        })
    })
}

fn require(value: &str, what: &str) -> Result<(), Error> {
    if value.trim().is_empty() {
        return Err(Error::Config(format!("{what} is required")));
    }
    Ok(())
}

fn require_path(path: &Path, what: &str) -> Result<(), Error> {
    if path.as_os_str().is_empty() {
        return Err(Error::Config(format!("{what} is required")));
    }
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    Ok(())
}

fn cmd_invert(args: &RunArgs) -> CmdResult {
    let cfg = args.resolve(env_cache())?;
    require_path(&cfg.source, "--source")?;
    require(&cfg.source_prompt, "--source-prompt")?;
    cfg.backend.validate()?;
    cfg.null_text.validate()?;
    let s = Schedule::new(&cfg.schedule)?;
    let b = open_backend(&cfg)?;
    let image = load_image_for(&cfg.source, b.as_ref())?;
    let cache = cfg.use_cache.then(|| cfg.cache_dir.as_ref().map(TrajectoryCache::new)).flatten();
    let inv = invert_source(
        &image,
        &cfg.source_prompt,
        &s,
        b.as_ref(),
        cfg.backend.guidance_scale,
        &cfg.null_text,
        &cfg.inversion,
        cache.as_ref(),
    )?;
    println!(
        "cache {} ({})",
        if inv.cache_hit { "hit" } else { "miss" },
        inv.key
    );
    println!("{:>5} {:>9} {:>12}", "step", "timestep", "residual");
    for (i, e) in inv.trajectory.entries.iter().enumerate() {
        let r = e.residual.map_or("-".to_string(), |r| format!("{r:.3e}"));
        println!("{i:>5} {:>9} {r:>12}", e.timestep.0);
    }
    let rec = replay_reconstruction(&inv.trajectory, &s, b.as_ref())?;
    let img = b.decode_latent(&rec)?;
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::Config(format!("{}: {e}", cfg.out_dir.display())))?;
    let path = cfg.out_dir.join("reconstruction.png");
    img.save_png(&path)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_transfer(args: &RunArgs) -> CmdResult {
    let cfg = args.resolve(env_cache())?;
    let (result, files) = pipeline::run_transfer(&cfg)?;
    let t = &result.timings;
    println!(
        "deviated {} steps; mask coverage {:.3}",
        result.manifest.steps.len(),
        result.mask.coverage()
    );
    println!(
        "source inversion {:.2}s ({}), target inversion {:.2}s ({}), denoise {:.2}s, total {:.2}s",
        t.source_inversion_s,
        if t.source_cache_hit { "cached" } else { "computed" },
        t.target_inversion_s,
        if t.target_cache_hit { "cached" } else { "computed" },
        t.denoise_s,
        t.total_s
    );
    println!("wrote {}", files.output.display());
    println!("wrote {}", files.manifest.display());
    if let Some(m) = &files.mask {
        println!("wrote {}", m.display());
    }
    if let Some(d) = &files.diagnostics {
        println!("wrote {}", d.display());
    }
    Ok(())
}

fn cmd_match_debug(args: &RunArgs) -> CmdResult {
    let cfg = args.resolve(env_cache())?;
    require_path(&cfg.source, "--source")?;
    require_path(&cfg.target, "--target")?;
    cfg.backend.validate()?;
    let b = open_backend(&cfg)?;
    let src = b.encode_image(&load_image_for(&cfg.source, b.as_ref())?)?;
    let tar = b.encode_image(&load_image_for(&cfg.target, b.as_ref())?)?;
    let t = Timestep(cfg.backend.dift_timestep);
    let fs = b.extract_dift_features(&src, t, &cfg.backend.dift_layer)?;
    let ft = b.extract_dift_features(&tar, t, &cfg.backend.dift_layer)?;
    let field = cosine_similarity_field(&fs, &ft)?;
    let c = build_correlation_map(&fs, &ft)?;
    let (h, w) = c.grid;
    let fixed = (0..h * w).filter(|&k| c.mapping[k] == (k / w, k % w)).count();
    println!("layer {} at timestep {t}: {h}x{w} grid", cfg.backend.dift_layer);
    println!("mean match score {:.4}", c.mean_score());
    println!("identity matches {fixed}/{}", h * w);
    if cfg.dump_diagnostics {
        let dir = cfg.out_dir.join("match_debug");
        std::fs::create_dir_all(&dir).map_err(|e| Error::Config(format!("{}: {e}", dir.display())))?;
        ArrayArchive::new("similarity", Some(t), field.into_dyn()).save(&dir.join("similarity.x0ta"))?;
        let mapping = ndarray::Array3::from_shape_fn((h, w, 2), |(i, j, k)| {
            let (ti, tj) = c.mapping[i * w + j];
            if k == 0 { ti as f32 } else { tj as f32 }
        });
        ArrayArchive::new("mapping", Some(t), mapping.into_dyn()).save(&dir.join("mapping.x0ta"))?;
        ArrayArchive::new("score", Some(t), c.score.clone().into_dyn()).save(&dir.join("score.x0ta"))?;
        println!("wrote {}", dir.display());
    }
    Ok(())
}

fn cmd_evaluate(manifest: &Path, out_dir: &Path, csv_only: bool, seed: u64) -> CmdResult {
    let embedder = MockEmbedder::new(seed, 64);
    let report = evaluate_directory(manifest, &embedder)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::Config(format!("{}: {e}", out_dir.display())))?;
    report.write_csv(&out_dir.join("report.csv"))?;
    if !csv_only {
        report.write_json(&out_dir.join("report.json"))?;
    }
    println!(
        "{} pairs ({} missing): CLIP-T2I {:.4}, CLIP-I2I {:.4}",
        report.count,
        report.missing.len(),
        report.mean_clip_t2i,
        report.mean_clip_i2i
    );
    println!("wrote reports to {}", out_dir.display());
    Ok(())
}

fn cmd_cache(action: &CacheAction, dir: Option<PathBuf>) -> CmdResult {
    let args = RunArgs {
        cache_dir: dir,
        ..RunArgs::default()
    };
    let cfg = args.resolve(env_cache())?;
    let root = cfg.cache_dir.expect("resolve always sets a cache directory");
    let cache = TrajectoryCache::new(&root);
    match action {
        CacheAction::List => {
            let entries = cache.list()?;
            for e in &entries {
                let worst = e.residuals().into_iter().flatten().fold(0.0f32, f32::max);
                println!(
                    "{}  {:?}  steps={}  max_residual={worst:.3e}  prompt={:?}",
                    e.key,
                    e.kind,
                    e.residuals().len(),
                    e.prompt
                );
            }
            println!("{} entries in {}", entries.len(), root.display());
        }
        CacheAction::Clear => {
            let n = cache.clear()?;
            println!("removed {n} entries from {}", root.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Invert(a) => cmd_invert(a),
        Command::Transfer(a) => cmd_transfer(a),
        Command::MatchDebug(a) => cmd_match_debug(a),
        Command::Evaluate {
            manifest,
            out_dir,
            csv_only,
            seed,
        } => cmd_evaluate(manifest, out_dir, *csv_only, *seed),
        Command::Cache { action, cache_dir } => cmd_cache(action, cache_dir.clone()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => f.report(),
    }
}
