//! lanescope: monocular lane-relative vehicle localization.
//!
//! Subcommands: `run` (process a frame directory into per-frame JSON records
//! and overlays), `gen-corpus` (render a synthetic corpus with ground truth),
//! `bench` (score the pipeline against a corpus and print the benchmark
//! table).
//!
//! Exit codes: 0 on success, 2 on environment/config errors. Per-frame
//! algorithmic failures never abort a run; they are recorded in each record's
//! diagnostics field.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use lanescope_core::detect::DetectorModel;
use lanescope_core::imgcore::{read_image, write_ppm, ImageF};
use lanescope_core::ipm::CameraRig;
use lanescope_core::motion::GpsLog;
use lanescope_core::pipeline::{Pipeline, PipelineConfig};
use lanescope_core::roadseg::load_seed_stats;
use lanescope_core::synthbench::{evaluate, gen_corpus, load_corpus, SceneSpec};

#[derive(Parser)]
#[command(
    name = "lanescope",
    version,
    about = "Monocular lane-relative vehicle localization"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Process a directory of numbered frames into per-frame JSON records
    /// and overlay images.
    Run {
        /// Directory of input frames (*.ppm / *.png, processed in name order).
        #[arg(long)]
        frames: PathBuf,
        /// Camera rig config (key=value).
        #[arg(long)]
        camera: PathBuf,
        /// GMM seed statistics file.
        #[arg(long)]
        gmm: PathBuf,
        /// Detector model file.
        #[arg(long)]
        model: PathBuf,
        /// Optional GPS log CSV (timestamp_s,lat_deg,lon_deg,fix_quality).
        #[arg(long)]
        gps: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Seed for the per-frame RANSAC streams.
        #[arg(long)]
        seed: Option<u64>,
        /// Pipeline parameter overrides (key=value file, strict keys).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Detection score threshold override.
        #[arg(long)]
        det_threshold: Option<f32>,
        /// Skip overlay rendering.
        #[arg(long)]
        no_overlays: bool,
    },
    /// Render a synthetic corpus (frames + ground truth + configs).
    GenCorpus {
        /// Scene spec JSON.
        #[arg(long)]
        spec: PathBuf,
        /// Number of frames.
        #[arg(long)]
        n: usize,
        /// Output corpus directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the lane pipeline over a corpus and print the benchmark table.
    Bench {
        /// Corpus directory produced by gen-corpus.
        #[arg(long)]
        corpus: PathBuf,
        /// Camera rig config (key=value).
        #[arg(long)]
        camera: PathBuf,
        /// GMM seed statistics (default: <corpus>/gmm_seed.txt).
        #[arg(long)]
        gmm: Option<PathBuf>,
        /// Optional detector model; lane metrics do not need one.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Report JSON path (default: <corpus>/report.json).
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Ok(threads) = std::env::var("LANESCOPE_THREADS") {
        match threads.parse::<usize>() {
            Ok(n) if n >= 1 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!("error: LANESCOPE_THREADS must be a positive integer, got {threads:?}");
                return ExitCode::from(2);
            }
        }
    }
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            frames,
            camera,
            gmm,
            model,
            gps,
            out,
            seed,
            config,
            det_threshold,
            no_overlays,
        } => run(
            &frames,
            &camera,
            &gmm,
            &model,
            gps.as_deref(),
            &out,
            seed,
            config.as_deref(),
            det_threshold,
            no_overlays,
        ),
        Command::GenCorpus { spec, n, out } => {
            let scene = SceneSpec::from_json_file(&spec)
                .with_context(|| format!("loading scene spec {}", spec.display()))?;
            if n == 0 {
                bail!("--n must be at least 1");
            }
            gen_corpus(&scene, n, &out)
                .with_context(|| format!("generating corpus in {}", out.display()))?;
            println!("wrote {n} frames to {}", out.display());
            Ok(())
        }
        Command::Bench {
            corpus,
            camera,
            gmm,
            model,
            seed,
            config,
            report,
        } => bench(
            &corpus,
            &camera,
            gmm.as_deref(),
            model.as_deref(),
            seed,
            config.as_deref(),
            report.as_deref(),
        ),
    }
}

fn build_config(
    ipm_range_m: f64,
    seed: Option<u64>,
    config: Option<&Path>,
    det_threshold: Option<f32>,
) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig {
        ipm_range_m,
        ..Default::default()
    };
    if let Some(path) = config {
        cfg.apply_config_file(path)
            .map_err(|e| anyhow::anyhow!("config {}: {e}", path.display()))?;
    }
    if let Some(seed) = seed {
        cfg.ransac_seed = seed;
    }
    if det_threshold.is_some() {
        cfg.det_threshold = det_threshold;
    }
    Ok(cfg)
}

fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut frames: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading frame directory {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()),
                Some(ref e) if e == "ppm" || e == "png"
            )
        })
        .collect();
    frames.sort();
    if frames.is_empty() {
        bail!("no .ppm or .png frames in {}", dir.display());
    }
    Ok(frames)
}

/// Pre-fit the sequence GMM from the first few readable frames.
fn prefit_gmm(pipeline: &mut Pipeline, frames: &[PathBuf]) {
    let n = pipeline.config().em_sample_frames;
    let sample: Vec<ImageF> = frames
        .iter()
        .take(n)
        .filter_map(|p| read_image(p).ok())
        .collect();
    if !sample.is_empty() {
        pipeline.fit_gmm(&sample);
    }
}

#[allow(clippy::too_many_arguments)]
fn run(
    frames_dir: &Path,
    camera: &Path,
    gmm: &Path,
    model: &Path,
    gps: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
    config: Option<&Path>,
    det_threshold: Option<f32>,
    no_overlays: bool,
) -> Result<()> {
    let (rig, ipm_range) = CameraRig::from_config_file(camera)?;
    let seed_stats = load_seed_stats(gmm)?;
    let detector = DetectorModel::load(model)
        .with_context(|| format!("loading detector model {}", model.display()))?;
    let gps_log = match gps {
        Some(path) => Some(GpsLog::from_csv(path)?),
        None => None,
    };
    let cfg = build_config(ipm_range, seed, config, det_threshold)?;
    let frame_dt = cfg.frame_dt_s;

    let frames = list_frames(frames_dir)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let overlay_dir = out.join("overlays");
    if !no_overlays {
        fs::create_dir_all(&overlay_dir)
            .with_context(|| format!("creating {}", overlay_dir.display()))?;
    }

    let mut pipeline = Pipeline::new(rig, cfg, seed_stats, Some(detector));
    pipeline.render_overlays = !no_overlays;
    prefit_gmm(&mut pipeline, &frames);

    let jsonl_path = out.join("positions.jsonl");
    let mut jsonl = std::io::BufWriter::new(
        fs::File::create(&jsonl_path)
            .with_context(|| format!("creating {}", jsonl_path.display()))?,
    );

    let mut processed = 0usize;
    for (idx, path) in frames.iter().enumerate() {
        let frame_id = idx as u64;
        let timestamp = frame_id as f64 * frame_dt;
        let sample = gps_log.as_ref().and_then(|log| log.nearest(timestamp));
        let position = match read_image(path) {
            Err(e) => {
                log::warn!("skipping unreadable frame {}: {e}", path.display());
                lanescope_core::motion::FramePosition {
                    frame_id,
                    timestamp_s: timestamp,
                    lanes: None,
                    boundary: None,
                    detections: Vec::new(),
                    gps: None,
                    fused: None,
                    diagnostics: vec![format!("unreadable frame {}: {e}", path.display())],
                }
            }
            Ok(img) => {
                let result = pipeline.process_frame(frame_id, &img, sample);
                if let Some(overlay) = &result.overlay {
                    let name = path
                        .file_stem()
                        .and_then(|s| s.to_str())
                        .map(|s| format!("{s}.ppm"))
                        .unwrap_or_else(|| format!("{frame_id:04}.ppm"));
                    write_ppm(overlay, &overlay_dir.join(name))?;
                }
                processed += 1;
                result.position
            }
        };
        serde_json::to_writer(&mut jsonl, &position)?;
        jsonl.write_all(b"\n")?;
    }
    jsonl.flush()?;
    println!(
        "processed {processed}/{} frames -> {}",
        frames.len(),
        jsonl_path.display()
    );
    Ok(())
}

fn bench(
    corpus: &Path,
    camera: &Path,
    gmm: Option<&Path>,
    model: Option<&Path>,
    seed: Option<u64>,
    config: Option<&Path>,
    report_path: Option<&Path>,
) -> Result<()> {
    let (rig, ipm_range) = CameraRig::from_config_file(camera)?;
    let default_gmm = corpus.join("gmm_seed.txt");
    let seed_stats = load_seed_stats(gmm.unwrap_or(&default_gmm))?;
    let detector = match model {
        Some(path) => Some(
            DetectorModel::load(path)
                .with_context(|| format!("loading detector model {}", path.display()))?,
        ),
        None => None,
    };
    let cfg = build_config(ipm_range, seed, config, None)?;

    let entries = load_corpus(corpus)?;
    let mut pipeline = Pipeline::new(rig, cfg, seed_stats, detector);
    pipeline.render_overlays = false;
    let frame_paths: Vec<PathBuf> = entries.iter().map(|(p, _)| p.clone()).collect();
    prefit_gmm(&mut pipeline, &frame_paths);

    let mut outputs = Vec::with_capacity(entries.len());
    let mut truths = Vec::with_capacity(entries.len());
    for (idx, (path, truth)) in entries.iter().enumerate() {
        let img = read_image(path)
            .with_context(|| format!("reading corpus frame {}", path.display()))?;
        let result = pipeline.process_frame(idx as u64, &img, None);
        outputs.push(result.output);
        truths.push(truth.clone());
    }

    let database = corpus
        .file_name()
        .and_then(|s| s.to_str())
        .unwrap_or("corpus");
    let report = evaluate(&truths, &outputs, database)?;
    println!("# {}", report.definitions);
    print!("{}", report.table());

    let out = report_path
        .map(PathBuf::from)
        .unwrap_or_else(|| corpus.join("report.json"));
    fs::write(&out, serde_json::to_string_pretty(&report)?)
        .with_context(|| format!("writing {}", out.display()))?;
    println!("report written to {}", out.display());
    Ok(())
}
