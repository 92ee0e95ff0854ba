use std::collections::HashMap;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};

use mitokit::augment::{apply_pipeline, AugPatch};
use mitokit::config::PipelineConfig;
use mitokit::error::Error;
use mitokit::eval::{
    evaluate, render_report_table, threshold_sweep, EvalOptions,
};
use mitokit::geometry::{MppScale, Rect};
use mitokit::manifest::{
    dataset_stats, import_point_annotations, load_manifest, save_manifest, LabelTarget,
};
use mitokit::merge::{
    lift_to_slide, load_slide_detections, radius_suppress, save_slide_detections,
};
use mitokit::geometry::microns_to_pixels;
use mitokit::orchestrator::{
    load_patch_detections, oracle_detector, run_detector_pool, save_patch_detections,
    OracleParams, PoolConfig,
};
use mitokit::patchset::{
    load_patch_index, mine_hard_negative_patches, plan_negative_patches, plan_positive_patches,
    plan_tile_grid, render_patchset, save_patch_index, PatchSpec,
};
use mitokit::split::{stratified_split, verify_no_leakage, Split, SplitAssignment, SplitRatios};
use mitokit::synthetic::synthetic_manifest;

#[derive(Parser)]
#[command(name = "mitokit", about = "Mitotic figure detection pipeline toolkit", version)]
struct Cli {
    /// Pipeline config file (JSON); flags override config values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DetectorKind {
    Worker,
    Oracle,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum NoiseKind {
    None,
    Default,
}

#[derive(Subcommand)]
enum Command {
    /// Import a COCO-like annotation file into a canonical manifest.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        dataset_id: String,
        /// Category mapping, repeatable: e.g. --map 1=mitotic_figure --map 2=ignore
        #[arg(long = "map")]
        maps: Vec<String>,
        /// Fallback microns-per-pixel when the source carries none.
        #[arg(long, default_value_t = 0.25)]
        mpp: f64,
        #[arg(long)]
        output: PathBuf,
    },
    /// Print dataset summary counts.
    Stats {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Deterministic domain-stratified case split.
    Split {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated train,valid,test ratios.
        #[arg(long)]
        ratios: Option<String>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Plan (and optionally render) positive training patches.
    Patch {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        size: Option<u32>,
        #[arg(long)]
        jitter: Option<u32>,
        #[arg(long)]
        seed: Option<u64>,
        /// Crop patch PNGs from the slide images.
        #[arg(long)]
        render: bool,
    },
    /// Plan random-negative and hard-negative (necrosis center-crop) patches.
    MineNegatives {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        hard_n: Option<usize>,
        #[arg(long)]
        hard_size: Option<u32>,
        #[arg(long, default_value_t = 0)]
        random_n: usize,
        #[arg(long)]
        random_size: Option<u32>,
        #[arg(long)]
        min_distance: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        render: bool,
    },
    /// Apply the seeded augmentation pipeline to a rendered patch set.
    Augment {
        #[arg(long)]
        in_dir: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Augmented samples per source patch.
        #[arg(long, default_value_t = 1)]
        samples: u64,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a detector (external worker pool or built-in oracle) over a patch set.
    Infer {
        #[arg(long)]
        patch_dir: PathBuf,
        #[arg(long, value_enum, default_value_t = DetectorKind::Worker)]
        detector: DetectorKind,
        #[arg(long)]
        worker_command: Option<String>,
        #[arg(long)]
        parallelism: Option<usize>,
        #[arg(long)]
        retry_limit: Option<usize>,
        #[arg(long, default_value_t = 0.0)]
        oracle_sigma: f64,
        #[arg(long, default_value_t = 0.0)]
        oracle_drop: f64,
        #[arg(long, default_value_t = 0.0)]
        oracle_fp: f64,
        #[arg(long, default_value_t = 0)]
        oracle_seed: u64,
        #[arg(long)]
        output: PathBuf,
    },
    /// Lift patch detections to the slide frame and radius-suppress duplicates.
    Merge {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        patch_dir: PathBuf,
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        radius_microns: Option<f64>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Point-matched evaluation with per-domain report.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        radius_microns: Option<f64>,
        #[arg(long)]
        assignment: Option<PathBuf>,
        #[arg(long)]
        split: Option<String>,
        /// Also compute AP at IoU 0.5 over derived boxes.
        #[arg(long)]
        ap: bool,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// F1 across a threshold grid.
    Sweep {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        detections: PathBuf,
        /// Comma-separated thresholds; defaults to the config grid.
        #[arg(long)]
        grid: Option<String>,
        #[arg(long)]
        radius_microns: Option<f64>,
    },
    /// Synthetic end-to-end run: patch -> infer (oracle or worker) -> merge -> eval.
    RunE2e {
        #[arg(long, value_enum, default_value_t = DetectorKind::Oracle)]
        detector: DetectorKind,
        #[arg(long, value_enum, default_value_t = NoiseKind::None)]
        noise: NoiseKind,
        #[arg(long)]
        worker_command: Option<String>,
        #[arg(long, default_value_t = 4000)]
        slide_size: u32,
        #[arg(long, default_value_t = 200)]
        annotations: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for intermediate artifacts (temp dir when omitted).
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

fn parse_label_target(s: &str) -> Result<LabelTarget, Error> {
    match s {
        "mitotic_figure" => Ok(LabelTarget::MitoticFigure),
        "imposter" => Ok(LabelTarget::Imposter),
        "ignore" => Ok(LabelTarget::Ignore),
        other => Err(Error::Config(format!(
            "unknown label target {other:?} (expected mitotic_figure, imposter, or ignore)"
        ))),
    }
}

fn parse_maps(maps: &[String]) -> Result<HashMap<i64, LabelTarget>, Error> {
    let mut out = HashMap::new();
    for m in maps {
        let (id, target) = m
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("bad --map value {m:?}, expected ID=TARGET")))?;
        let id: i64 = id
            .parse()
            .map_err(|_| Error::Config(format!("bad category id in --map value {m:?}")))?;
        out.insert(id, parse_label_target(target)?);
    }
    Ok(out)
}

fn parse_ratios(s: &str) -> Result<SplitRatios, Error> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| Error::Config(format!("bad --ratios value {s:?}")))?;
    if parts.len() != 3 {
        return Err(Error::Config("--ratios expects three comma-separated values".into()));
    }
    SplitRatios::new(parts[0], parts[1], parts[2])
}

fn parse_split(s: &str) -> Result<Split, Error> {
    match s {
        "train" => Ok(Split::Train),
        "valid" => Ok(Split::Valid),
        "test" => Ok(Split::Test),
        other => Err(Error::Config(format!("unknown split {other:?}"))),
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let config = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    config.validate()?;

    match cli.command {
        Command::Ingest { input, dataset_id, maps, mpp, output } => {
            let label_map = parse_maps(&maps)?;
            let (manifest, summary) =
                import_point_annotations(&input, &dataset_id, &label_map, MppScale::new(mpp)?)?;
            save_manifest(&manifest, &output)?;
            println!(
                "imported {} annotations ({} ignored, {} out of bounds) across {} slides",
                summary.imported,
                summary.ignored,
                summary.skipped_out_of_bounds,
                manifest.slides.len()
            );
        }
        Command::Stats { manifest } => {
            let m = load_manifest(&manifest)?;
            let stats = dataset_stats(&m);
            println!("slides:      {}", stats.n_slides);
            println!("cases:       {}", stats.n_cases);
            println!("annotations: {}", stats.n_annotations);
            println!("regions:     {}", stats.n_regions);
            for (label, n) in &stats.per_label {
                println!("  label {label}: {n}");
            }
            for (domain, n) in &stats.per_domain {
                println!("  domain {domain}: {n}");
            }
            for (dataset, n) in &stats.per_dataset {
                println!("  dataset {dataset}: {n}");
            }
        }
        Command::Split { manifest, seed, ratios, output } => {
            let m = load_manifest(&manifest)?;
            let ratios = match ratios {
                Some(s) => parse_ratios(&s)?,
                None => config.split.ratios,
            };
            let seed = seed.unwrap_or(config.split.seed);
            let assignment = stratified_split(&m, ratios, seed)?;
            let report = verify_no_leakage(&assignment, &m)?;
            assignment.save(&output)?;
            println!("assigned {} cases across {} domains", report.n_cases, report.per_domain.len());
        }
        Command::Patch { manifest, out_dir, size, jitter, seed, render } => {
            let m = load_manifest(&manifest)?;
            let size = size.unwrap_or(config.patch.train_size);
            let jitter = jitter.unwrap_or(config.patch.jitter_max);
            let seed = seed.unwrap_or(config.patch.seed);
            let report = plan_positive_patches(&m, size, jitter, seed)?;
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            if render {
                render_patchset(&m, &report.patches, &out_dir)?;
            } else {
                save_patch_index(&report.patches, &out_dir)?;
            }
            println!("planned {} positive patches", report.patches.len());
        }
        Command::MineNegatives {
            manifest,
            out_dir,
            hard_n,
            hard_size,
            random_n,
            random_size,
            min_distance,
            seed,
            render,
        } => {
            let m = load_manifest(&manifest)?;
            let seed = seed.unwrap_or(config.patch.seed);
            let hard = mine_hard_negative_patches(
                &m,
                hard_n.unwrap_or(config.patch.hard_negative_count),
                hard_size.unwrap_or(config.patch.hard_negative_size),
                seed,
            )?;
            let random = plan_negative_patches(
                &m,
                random_size.unwrap_or(config.patch.train_size),
                random_n,
                min_distance.unwrap_or(config.patch.negative_min_distance),
                seed,
            )?;
            for w in hard.warnings.iter().chain(&random.warnings) {
                eprintln!("warning: {w}");
            }
            let mut patches = hard.patches;
            patches.extend(random.patches);
            if render {
                render_patchset(&m, &patches, &out_dir)?;
            } else {
                save_patch_index(&patches, &out_dir)?;
            }
            println!("planned {} negative patches", patches.len());
        }
        Command::Augment { in_dir, out_dir, samples, seed } => {
            let specs = load_patch_index(&in_dir)?;
            let mut aug_config = config.augment.clone();
            if let Some(seed) = seed {
                aug_config.seed = seed;
            }
            std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
            let mut out_specs = Vec::new();
            for (i, spec) in specs.iter().enumerate() {
                let src = in_dir.join(format!("{}.png", spec.patch_id));
                let image = image::open(&src)
                    .map_err(|e| Error::Image(format!("{}: {e}", src.display())))?
                    .to_rgb8();
                let patch = AugPatch { image, annotations: spec.local_annotations.clone() };
                for s in 0..samples {
                    let sample_index = i as u64 * samples + s;
                    let (aug, _) = apply_pipeline(&patch, &aug_config, sample_index)?;
                    let mut out_spec = spec.clone();
                    out_spec.patch_id = format!("{}_aug{sample_index}", spec.patch_id);
                    out_spec.width = aug_config.crop_size;
                    out_spec.height = aug_config.crop_size;
                    out_spec.local_annotations = aug.annotations.clone();
                    let dst = out_dir.join(format!("{}.png", out_spec.patch_id));
                    aug.image
                        .save(&dst)
                        .map_err(|e| Error::Image(format!("{}: {e}", dst.display())))?;
                    out_specs.push(out_spec);
                }
            }
            save_patch_index(&out_specs, &out_dir)?;
            println!("wrote {} augmented patches", out_specs.len());
        }
        Command::Infer {
            patch_dir,
            detector,
            worker_command,
            parallelism,
            retry_limit,
            oracle_sigma,
            oracle_drop,
            oracle_fp,
            oracle_seed,
            output,
        } => {
            let specs = load_patch_index(&patch_dir)?;
            let detections = match detector {
                DetectorKind::Oracle => {
                    let params = OracleParams {
                        jitter_sigma: oracle_sigma,
                        drop_rate: oracle_drop,
                        fp_rate: oracle_fp,
                        seed: oracle_seed,
                    };
                    oracle_detector(&specs, &params)?
                }
                DetectorKind::Worker => {
                    let command = worker_command
                        .or(config.detector.worker_command.clone())
                        .ok_or_else(|| Error::Config("no worker command configured".into()))?;
                    let pool = PoolConfig {
                        worker_command: command,
                        parallelism: parallelism.unwrap_or(config.detector.effective_parallelism()),
                        retry_limit: retry_limit.unwrap_or(config.detector.retry_limit),
                        job_timeout: Duration::from_secs(config.detector.timeout_secs),
                    };
                    run_detector_pool(&specs, &patch_dir, &pool)?
                }
            };
            save_patch_detections(&detections, &output)?;
            println!("wrote {} detections", detections.len());
        }
        Command::Merge { manifest, patch_dir, detections, radius_microns, output } => {
            let m = load_manifest(&manifest)?;
            let specs = load_patch_index(&patch_dir)?;
            let patch_dets = load_patch_detections(&detections)?;
            let lifted = lift_to_slide(&patch_dets, &specs)?;
            let radius_microns = radius_microns.unwrap_or(config.eval.radius_microns);
            // suppression radius = eval matching radius in pixels, per slide
            let mut kept = Vec::new();
            for slide in &m.slides {
                let radius = microns_to_pixels(radius_microns, slide.scale)?;
                let slide_dets: Vec<_> = lifted
                    .iter()
                    .filter(|d| d.slide_id == slide.slide_id)
                    .cloned()
                    .collect();
                kept.extend(radius_suppress(&slide_dets, radius)?);
            }
            save_slide_detections(&kept, &output)?;
            println!("kept {} of {} detections", kept.len(), lifted.len());
        }
        Command::Eval {
            manifest,
            detections,
            threshold,
            radius_microns,
            assignment,
            split,
            ap,
            output,
        } => {
            let m = load_manifest(&manifest)?;
            let dets = load_slide_detections(&detections)?;
            let assignment = assignment.map(|p| SplitAssignment::load(&p)).transpose()?;
            let options = EvalOptions {
                radius_microns: radius_microns.unwrap_or(config.eval.radius_microns),
                threshold: threshold.unwrap_or(config.eval.threshold),
                split: split.as_deref().map(parse_split).transpose()?,
                ignore_labels: Vec::new(),
                ap_box_half_size: ap.then_some(config.eval.box_half_size),
            };
            let report = evaluate(&dets, &m, assignment.as_ref(), &options)?;
            print!("{}", render_report_table(&report));
            if let Some(path) = output {
                report.save(&path)?;
            }
        }
        Command::Sweep { manifest, detections, grid, radius_microns } => {
            let m = load_manifest(&manifest)?;
            let dets = load_slide_detections(&detections)?;
            let grid = match grid {
                Some(s) => s
                    .split(',')
                    .map(|p| p.trim().parse::<f64>())
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|_| Error::Config(format!("bad --grid value {s:?}")))?,
                None => config.eval.thresholds.clone(),
            };
            let radius = radius_microns.unwrap_or(config.eval.radius_microns);
            let sweep = threshold_sweep(&dets, &m, radius, &grid)?;
            println!("{:>10} {:>10} {:>10} {:>10}", "threshold", "precision", "recall", "f1");
            for p in &sweep.points {
                println!(
                    "{:>10.3} {:>10.4} {:>10.4} {:>10.4}",
                    p.threshold, p.metrics.precision, p.metrics.recall, p.metrics.f1
                );
            }
            println!("best threshold: {:.3}", sweep.best_threshold);
        }
        Command::RunE2e {
            detector,
            noise,
            worker_command,
            slide_size,
            annotations,
            seed,
            out_dir,
        } => {
            let m = synthetic_manifest(slide_size, slide_size, annotations, 80.0, 0.25, seed)?;
            let slide = &m.slides[0];
            let roi = Rect::new(0.0, 0.0, slide.width as f64, slide.height as f64)?;
            let mut plan =
                plan_tile_grid(&slide.slide_id, roi, config.patch.tile_size, config.patch.overlap)?;
            for tile in &mut plan.tiles {
                tile.attach_annotations(&m.annotations);
            }
            let patch_dets = match detector {
                DetectorKind::Oracle => {
                    let params = match noise {
                        NoiseKind::None => OracleParams::noiseless(seed),
                        NoiseKind::Default => OracleParams {
                            jitter_sigma: 2.0,
                            drop_rate: 0.2,
                            fp_rate: 2.0,
                            seed,
                        },
                    };
                    oracle_detector(&plan.tiles, &params)?
                }
                DetectorKind::Worker => {
                    let command = worker_command
                        .or(config.detector.worker_command.clone())
                        .ok_or_else(|| Error::Config("no worker command configured".into()))?;
                    let dir = out_dir
                        .clone()
                        .unwrap_or_else(|| std::env::temp_dir().join("mitokit-e2e"));
                    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                    let blank = image::RgbImage::new(slide.width, slide.height);
                    for tile in &plan.tiles {
                        let (crop, _) = mitokit::patchset::render_patch(&blank, tile, &m.annotations)?;
                        mitokit::patchset::save_patch_image(&crop, tile, &dir)?;
                    }
                    save_patch_index(&plan.tiles, &dir)?;
                    let pool = PoolConfig {
                        worker_command: command,
                        parallelism: config.detector.effective_parallelism(),
                        retry_limit: config.detector.retry_limit,
                        job_timeout: Duration::from_secs(config.detector.timeout_secs),
                    };
                    run_detector_pool(&plan.tiles, &dir, &pool)?
                }
            };
            let lifted = lift_to_slide(&patch_dets, &plan.tiles)?;
            let radius = microns_to_pixels(config.eval.radius_microns, slide.scale)?;
            let kept = radius_suppress(&lifted, radius)?;
            let report = evaluate(&kept, &m, None, &EvalOptions::default())?;
            print!("{}", render_report_table(&report));
            if let Some(dir) = out_dir {
                std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                save_manifest(&m, &dir.join("manifest.json"))?;
                save_slide_detections(&kept, &dir.join("detections.ndjson"))?;
                report.save(&dir.join("report.json"))?;
            }
        }
    }
    Ok(())
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::InvalidValue(_) | Error::Parse(_) | Error::Integrity(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

// PatchSpec is used in type position by subcommand bodies above.
#[allow(unused)]
fn _assert_types(_: PatchSpec) {}
