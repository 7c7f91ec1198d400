//! Command-line surface: training, single-window generation, cascaded
//! generation, large-canvas tiling, evaluation and corpus augmentation.
//!
//! Every command reads one TOML config plus flag overrides and writes its
//! outputs (with JSON sidecars) into a fresh run directory named by
//! timestamp and config digest. Exit codes: 0 success, 1 usage/config
//! error, 2 runtime failure.

use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};
use terradiff::config::AppConfig;
use terradiff::dataset::{build_manifest, DatasetManifest};
use terradiff::degradation::bicubic_downscale;
use terradiff::error::Error;
use terradiff::eval::{extract_features, fid, seam_gradient, EvalReport, FeatureExtractor, HermeticExtractor};
use terradiff::imgio;
use terradiff::nd::Tensor;
use terradiff::schedule::SamplerConfig;
use terradiff::tiler::{generate_window, plan_tiles, run_cascade, run_stage, StageSpec};
use terradiff::train::{load_checkpoint, save_checkpoint, train, Model};

#[derive(Parser)]
#[command(name = "terradiff", about = "Resolution-conditioned cascaded diffusion for unbounded image generation", version)]
struct Cli {
    /// Path to a TOML configuration file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ModelSource {
    /// Load the model from a checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a directory of images.
    Train {
        /// Corpus directory ({lat}_{lng}_{res}.png or JSON sidecars).
        #[arg(long)]
        data: PathBuf,
        /// Root directory for run outputs.
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        /// Resume from a checkpoint instead of fresh initialization.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Generate a single window conditioned on one low-res block.
    Generate {
        #[command(flatten)]
        model: ModelSource,
        /// Low-resolution condition image (window/N on each side).
        #[arg(long)]
        input: PathBuf,
        /// Spatial resolution of the condition image, m/pixel.
        #[arg(long)]
        s_in: f64,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Run a multi-stage cascade from a seed image.
    Cascade {
        #[command(flatten)]
        model: ModelSource,
        #[arg(long)]
        seed_image: PathBuf,
        /// Spatial resolution of the seed image, m/pixel.
        #[arg(long)]
        s0: f64,
        /// Number of xN stages to run.
        #[arg(long)]
        stages: usize,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Upscale one large canvas by a single xN stage.
    Tile {
        #[command(flatten)]
        model: ModelSource,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        s_in: f64,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// FID (and optionally seam metrics) between two image directories.
    Evaluate {
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        fake: PathBuf,
        /// Measure seam gradients on the fake set for this window size.
        #[arg(long)]
        seam_window: Option<usize>,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Downsample-then-regenerate augmentation over a corpus.
    Augment {
        #[command(flatten)]
        model: ModelSource,
        #[arg(long)]
        input: PathBuf,
        /// Augmented variants per source image.
        #[arg(long, default_value_t = 1)]
        times: usize,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // help/version are successful exits
            if e.use_stderr() {
                eprintln!("{e}");
                std::process::exit(1);
            }
            print!("{e}");
            std::process::exit(0);
        }
    };
    let code = match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::InvalidConfig(_) => 1,
                _ => 2,
            }
        }
    };
    std::process::exit(code);
}

fn load_config(path: &Option<PathBuf>) -> Result<AppConfig, Error> {
    let cfg = match path {
        Some(p) => AppConfig::load(p)?,
        None => AppConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Create a fresh run directory named by timestamp and config digest.
/// Existing directories are never reused or overwritten.
fn make_run_dir(root: &Path, cfg: &AppConfig) -> Result<PathBuf, Error> {
    let stamp = SystemTime::now().duration_since(UNIX_EPOCH).expect("clock after epoch").as_secs();
    let digest = cfg.digest()?;
    for k in 0.. {
        let name = if k == 0 {
            format!("{stamp}-{digest}")
        } else {
            format!("{stamp}-{digest}-{k}")
        };
        let dir = root.join(name);
        match std::fs::create_dir_all(root).and_then(|_| std::fs::create_dir(&dir)) {
            Ok(()) => {
                cfg.save(&dir.join("config.toml"))?;
                return Ok(dir);
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e.into()),
        }
    }
    unreachable!("run-directory counter exhausted")
}

fn load_model(source: &Option<PathBuf>, cfg: &AppConfig) -> Result<Model, Error> {
    match source {
        Some(p) => Ok(load_checkpoint(p)?.0),
        None => Model::new(cfg.model.clone()),
    }
}

fn sampler_for(model: &Model, cfg: &AppConfig) -> Result<SamplerConfig, Error> {
    SamplerConfig::uniform(&model.sched, cfg.sampler.steps.min(model.sched.t_max), cfg.sampler.eta)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), Error> {
    serde_json::to_writer_pretty(std::fs::File::create(path)?, value)?;
    Ok(())
}

fn load_dir_images(dir: &Path) -> Result<Vec<image::RgbImage>, Error> {
    let mut paths: Vec<PathBuf> = walkdir::WalkDir::new(dir)
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file())
        .map(|e| e.into_path())
        .filter(|p| matches!(p.extension().and_then(|x| x.to_str()), Some("png" | "jpg" | "jpeg")))
        .collect();
    paths.sort();
    paths.iter().map(|p| imgio::load_rgb(p)).collect()
}

fn run(cli: Cli) -> Result<(), Error> {
    let cfg = load_config(&cli.config)?;
    match cli.command {
        Command::Train { data, out, checkpoint } => {
            let run_dir = make_run_dir(&out, &cfg)?;
            let report = build_manifest(&data, &cfg.data.resolution_levels)?;
            write_json(&run_dir.join("manifest_errors.json"), &report.errors)?;
            report.manifest.save(&run_dir.join("manifest.jsonl"))?;
            let mut model = match checkpoint {
                Some(p) => load_checkpoint(&p)?.0,
                None => Model::new(cfg.model.clone())?,
            };
            let losses = train(&mut model, &report.manifest, &cfg.train, Some(&run_dir))?;
            write_json(&run_dir.join("losses.json"), &losses)?;
            save_checkpoint(&run_dir.join("final.ckpt"), &model, losses.len() as u64)?;
            println!("run dir: {}", run_dir.display());
            println!("steps: {}  final loss: {:.6}", losses.len(), losses.last().copied().unwrap_or(f64::NAN));
            Ok(())
        }
        Command::Generate { model, input, s_in, out } => {
            let run_dir = make_run_dir(&out, &cfg)?;
            let m = load_model(&model.checkpoint, &cfg)?;
            let sampler = sampler_for(&m, &cfg)?;
            let block = imgio::load_rgb(&input)?;
            let n = m.cfg.upscale;
            let win_h = block.height() as usize * n;
            let win_w = block.width() as usize * n;
            let mut rng = <rand_chacha::ChaCha12Rng as rand::SeedableRng>::seed_from_u64(cfg.generation.seed);
            let noise = Tensor::randn(&[1, 3, win_h, win_w], &mut rng);
            let img = generate_window(&block, s_in, &noise, &m, &m.sched, &sampler)?;
            let out_img = imgio::from_model(&img);
            imgio::save_png(&out_img, &run_dir.join("window.png"))?;
            write_json(
                &run_dir.join("window.json"),
                &serde_json::json!({
                    "s_in": s_in,
                    "s_out": s_in / n as f64,
                    "width": win_w,
                    "height": win_h,
                    "seed": cfg.generation.seed,
                }),
            )?;
            println!("run dir: {}", run_dir.display());
            Ok(())
        }
        Command::Cascade { model, seed_image, s0, stages, out } => {
            let run_dir = make_run_dir(&out, &cfg)?;
            let m = load_model(&model.checkpoint, &cfg)?;
            let sampler = sampler_for(&m, &cfg)?;
            let seed_img = imgio::load_rgb(&seed_image)?;
            let n = m.cfg.upscale;
            let mut specs = Vec::new();
            let mut s = s0;
            for k in 0..stages {
                specs.push(StageSpec::new(k, s, n, cfg.generation.window)?);
                s /= n as f64;
            }
            let outs = run_cascade(
                &seed_img,
                s0,
                &specs,
                cfg.generation.noise_mode,
                cfg.generation.seed,
                &m,
                &m.sched,
                &sampler,
            )?;
            for (i, (img, s_out, sidecar)) in outs.iter().enumerate() {
                let name = format!("stage{i:02}_{s_out}mpp");
                imgio::save_png(img, &run_dir.join(format!("{name}.png")))?;
                if let Some(sc) = sidecar {
                    write_json(&run_dir.join(format!("{name}.json")), sc)?;
                }
            }
            println!("run dir: {}", run_dir.display());
            Ok(())
        }
        Command::Tile { model, input, s_in, out } => {
            let run_dir = make_run_dir(&out, &cfg)?;
            let m = load_model(&model.checkpoint, &cfg)?;
            let sampler = sampler_for(&m, &cfg)?;
            let canvas = imgio::load_rgb(&input)?;
            let stage = StageSpec::new(0, s_in, m.cfg.upscale, cfg.generation.window)?;
            let (img, sidecar) = run_stage(
                &canvas,
                &stage,
                cfg.generation.noise_mode,
                cfg.generation.seed,
                &m,
                &m.sched,
                &sampler,
            )?;
            imgio::save_png(&img, &run_dir.join("canvas.png"))?;
            write_json(&run_dir.join("canvas.json"), &sidecar)?;
            println!("run dir: {}", run_dir.display());
            Ok(())
        }
        Command::Evaluate { real, fake, seam_window, out } => {
            let run_dir = make_run_dir(&out, &cfg)?;
            let extractor = HermeticExtractor::new(0);
            let real_imgs = load_dir_images(&real)?;
            let fake_imgs = load_dir_images(&fake)?;
            let stats_r = extract_features(&real_imgs, &extractor)?;
            let stats_f = extract_features(&fake_imgs, &extractor)?;
            let fid_value = fid(&stats_r, &stats_f)?;
            let mut seam = None;
            if let Some(win) = seam_window {
                let mut h = 0.0;
                let mut v = 0.0;
                for img in &fake_imgs {
                    let grid = plan_tiles(img.height() as usize, img.width() as usize, win)?;
                    let m = seam_gradient(img, &grid)?;
                    h += m.horizontal;
                    v += m.vertical;
                }
                let count = fake_imgs.len() as f64;
                seam = Some((h / count, v / count, 0.5 * (h + v) / count));
            }
            let report = EvalReport {
                fid: fid_value,
                seam_horizontal: seam.map(|s| s.0),
                seam_vertical: seam.map(|s| s.1),
                seam_average: seam.map(|s| s.2),
                n_real: real_imgs.len(),
                n_generated: fake_imgs.len(),
                extractor_id: extractor.id(),
            };
            write_json(&run_dir.join("report.json"), &report)?;
            println!("run dir: {}", run_dir.display());
            println!("fid: {fid_value:.6}");
            Ok(())
        }
        Command::Augment { model, input, times, out } => {
            let run_dir = make_run_dir(&out, &cfg)?;
            let m = load_model(&model.checkpoint, &cfg)?;
            let sampler = sampler_for(&m, &cfg)?;
            let report = build_manifest(&input, &cfg.data.resolution_levels)?;
            let n = m.cfg.upscale;
            let mut manifest = DatasetManifest::default();
            for entry in &report.manifest.entries {
                let img = imgio::load_rgb(&entry.path)?;
                let small = bicubic_downscale(&img, n)?;
                for k in 0..times {
                    let stage = StageSpec::new(0, entry.resolution * n as f64, n, cfg.generation.window)?;
                    let seed = cfg.generation.seed
                        .wrapping_add(terradiff::degradation::seed_for_path(&entry.path))
                        .wrapping_add(k as u64);
                    let (regen, sidecar) =
                        run_stage(&small, &stage, cfg.generation.noise_mode, seed, &m, &m.sched, &sampler)?;
                    let stem = entry.path.file_stem().and_then(|s| s.to_str()).unwrap_or("img");
                    let out_path = run_dir.join(format!("{stem}_aug{k}.png"));
                    imgio::save_png(&regen, &out_path)?;
                    write_json(
                        &out_path.with_extension("json"),
                        &serde_json::json!({
                            "source": entry.path,
                            "variant": k,
                            "seed": seed,
                            "stage": sidecar,
                            "lat": entry.lat,
                            "lng": entry.lng,
                            "resolution": entry.resolution,
                            "split": entry.split,
                        }),
                    )?;
                    manifest.entries.push(terradiff::dataset::ManifestEntry {
                        path: out_path,
                        lat: entry.lat,
                        lng: entry.lng,
                        resolution: entry.resolution,
                        split: entry.split,
                    });
                }
            }
            manifest.save(&run_dir.join("manifest.jsonl"))?;
            println!("run dir: {}", run_dir.display());
            println!("augmented images: {}", manifest.entries.len());
            Ok(())
        }
    }
}
