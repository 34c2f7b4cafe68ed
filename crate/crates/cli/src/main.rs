//! Command-line driver: synthesize datasets, train the two stages,
//! reconstruct HDR video and evaluate mu-law PSNR.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use hdrvid_core::datagen::export::export_dataset;
use hdrvid_core::datagen::io::{read_hdr_exr, write_hdr_exr, write_ldr_png, PngDepth};
use hdrvid_core::datagen::manifest::{resolve, DatasetManifest};
use hdrvid_core::datagen::{ExposureSchedule, LdrSequence};
use hdrvid_core::frame::{ExposureRole, LdrFrame, RadianceFrame};
use hdrvid_core::harness::{
    evaluate, reconstruct_video, train_stage, Checkpoint, ReconstructOptions, Stage, TrainConfig,
};
use hdrvid_core::radiometry::display_tonemap;
use hdrvid_core::Error as CoreError;

#[derive(Parser)]
#[command(
    name = "hdrvid",
    version,
    about = "HDR video reconstruction from alternating-exposure LDR sequences"
)]
struct Cli {
    /// Configuration file (used by `train`; optional elsewhere).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed for all randomized steps.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Output directory.
    #[arg(long, global = true)]
    output: Option<PathBuf>,

    /// Compute device. Only `cpu` (optionally `cpu:<threads>`, threads
    /// ignored by this single-threaded build) is supported.
    #[arg(long, global = true, default_value = "cpu")]
    device: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render HDR sources into an alternating-exposure LDR dataset.
    Synth(SynthArgs),
    /// Train a stage (coarse, refine or finetune) from a config file.
    Train(TrainArgs),
    /// Reconstruct HDR frames for the sequences of a dataset manifest.
    Reconstruct(ReconstructArgs),
    /// Compare reconstructed frames against ground truth.
    Eval(EvalArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Directory of HDR sources: either EXR frames directly (one clip) or
    /// one subdirectory of EXR frames per clip.
    #[arg(long)]
    hdr_dir: PathBuf,

    /// Schedule kind: `2exp` or `3exp`.
    #[arg(long, default_value = "2exp")]
    schedule: String,

    /// Comma-separated EV stops, e.g. `-2,2` or `-2,0,2`.
    #[arg(long, allow_hyphen_values = true)]
    ev: Option<String>,

    /// Scale each clip so its peak radiance is 1.
    #[arg(long, default_value_t = true)]
    normalize: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Stage shortcut when no config file is given.
    #[arg(long)]
    stage: Option<String>,

    /// Dataset manifest (when building a config from defaults).
    #[arg(long)]
    manifest: Option<PathBuf>,

    /// Prerequisite checkpoint for refine/finetune defaults.
    #[arg(long)]
    init_from: Option<PathBuf>,
}

#[derive(Args)]
struct ReconstructArgs {
    /// Checkpoint produced by training.
    #[arg(long)]
    checkpoint: PathBuf,

    /// Dataset manifest describing the input sequences.
    #[arg(long)]
    manifest: PathBuf,

    /// Only process this sequence id (default: all).
    #[arg(long)]
    sequence: Option<String>,

    /// Apply global similarity alignment before the coarse stage.
    #[arg(long, default_value_t = false)]
    align: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of predicted HDR frames (EXR, sorted by name).
    #[arg(long)]
    pred: PathBuf,

    /// Directory of ground-truth HDR frames (EXR, sorted by name).
    #[arg(long)]
    gt: PathBuf,

    /// Comma-separated schedule exposures used to derive per-frame roles,
    /// e.g. `1,4` or `0.25,1,4`.
    #[arg(long)]
    exposures: String,

    /// Reconstruction time per frame to record in the report (ms).
    #[arg(long, default_value_t = 0.0)]
    runtime_ms_per_frame: f64,
}

enum CliError {
    Usage(String),
    Core(CoreError),
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        CliError::Core(e)
    }
}

fn exit_code(err: &CliError) -> i32 {
    match err {
        CliError::Usage(_) => 1,
        CliError::Core(CoreError::Numerical(_)) => 3,
        CliError::Core(_) => 2,
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are not errors.
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                std::process::exit(0);
            }
            eprint!("{e}");
            std::process::exit(1);
        }
    };

    match run(cli) {
        Ok(()) => {}
        Err(err) => {
            match &err {
                CliError::Usage(msg) => eprintln!("usage error: {msg}"),
                CliError::Core(e) => eprintln!("error: {e}"),
            }
            std::process::exit(exit_code(&err));
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    validate_device(&cli.device)?;
    match &cli.command {
        Command::Synth(args) => synth(&cli, args),
        Command::Train(args) => train(&cli, args),
        Command::Reconstruct(args) => reconstruct(&cli, args),
        Command::Eval(args) => eval(&cli, args),
    }
}

fn validate_device(device: &str) -> Result<(), CliError> {
    let ok = device == "cpu"
        || device
            .strip_prefix("cpu:")
            .is_some_and(|n| n.parse::<usize>().is_ok());
    if ok {
        Ok(())
    } else {
        Err(CliError::Usage(format!(
            "unsupported device `{device}`; this build runs on `cpu`"
        )))
    }
}

fn required_output(cli: &Cli) -> Result<&Path, CliError> {
    cli.output
        .as_deref()
        .ok_or_else(|| CliError::Usage("--output DIR is required".to_string()))
}

fn parse_ev_list(s: &str) -> Result<Vec<f64>, CliError> {
    s.split(',')
        .map(|part| {
            part.trim()
                .parse::<f64>()
                .map_err(|_| CliError::Usage(format!("bad EV value `{part}`")))
        })
        .collect()
}

fn synth(cli: &Cli, args: &SynthArgs) -> Result<(), CliError> {
    let out_dir = required_output(cli)?;
    let expected_period = match args.schedule.as_str() {
        "2exp" => 2,
        "3exp" => 3,
        other => {
            return Err(CliError::Usage(format!(
                "unknown schedule `{other}` (expected 2exp or 3exp)"
            )))
        }
    };
    let stops = match &args.ev {
        Some(list) => parse_ev_list(list)?,
        None => {
            if expected_period == 2 {
                vec![-2.0, 2.0]
            } else {
                vec![-2.0, 0.0, 2.0]
            }
        }
    };
    if stops.len() != expected_period {
        return Err(CliError::Usage(format!(
            "schedule {} needs {expected_period} EV stops, got {}",
            args.schedule,
            stops.len()
        )));
    }
    let schedule = ExposureSchedule::from_ev_stops(&stops)?;

    let clips = load_hdr_clips(&args.hdr_dir)?;
    if clips.is_empty() {
        return Err(CliError::Core(CoreError::data(format!(
            "no EXR sources found under {}",
            args.hdr_dir.display()
        ))));
    }
    let total_frames: usize = clips.iter().map(|(_, f)| f.len()).sum();
    let manifest_path = export_dataset(&clips, &schedule, out_dir, args.normalize)?;
    println!(
        "wrote {} clips ({} frames) with exposures {:?} to {}",
        clips.len(),
        total_frames,
        schedule.exposures(),
        manifest_path.display()
    );
    Ok(())
}

fn load_hdr_clips(dir: &Path) -> Result<Vec<(String, Vec<RadianceFrame>)>, CliError> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| CoreError::io(dir, e.to_string()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();

    let read_clip = |paths: &[PathBuf]| -> Result<Vec<RadianceFrame>, CliError> {
        paths
            .iter()
            .map(|p| {
                let img = read_hdr_exr(p)?;
                Ok(RadianceFrame::new(img.map(|v| v.max(0.0)))?)
            })
            .collect()
    };

    // Flat directory of EXR files is a single clip; otherwise every
    // subdirectory with EXR files becomes one clip.
    let flat: Vec<PathBuf> = entries
        .iter()
        .filter(|p| p.extension().is_some_and(|e| e == "exr"))
        .cloned()
        .collect();
    if !flat.is_empty() {
        return Ok(vec![("clip0".to_string(), read_clip(&flat)?)]);
    }

    let mut clips = Vec::new();
    for sub in entries.iter().filter(|p| p.is_dir()) {
        let mut frames: Vec<PathBuf> = std::fs::read_dir(sub)
            .map_err(|e| CoreError::io(sub, e.to_string()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "exr"))
            .collect();
        frames.sort();
        if frames.is_empty() {
            continue;
        }
        let name = sub
            .file_name()
            .map(|n| n.to_string_lossy().to_string())
            .unwrap_or_else(|| format!("clip{}", clips.len()));
        clips.push((name, read_clip(&frames)?));
    }
    Ok(clips)
}

fn train(cli: &Cli, args: &TrainArgs) -> Result<(), CliError> {
    let out_dir = required_output(cli)?;
    let config = match &cli.config {
        Some(path) => TrainConfig::load(path)?,
        None => {
            let stage = Stage::parse(
                args.stage
                    .as_deref()
                    .ok_or_else(|| CliError::Usage("--stage or --config required".to_string()))?,
            )?;
            let manifest = args.manifest.clone().ok_or_else(|| {
                CliError::Usage("--manifest required without --config".to_string())
            })?;
            let mut config = TrainConfig::defaults_for(stage, manifest);
            config.seed = cli.seed;
            config.init_from = args.init_from.clone();
            config.validate()?;
            config
        }
    };
    let outcome = train_stage(&config, out_dir)?;
    println!(
        "stage {} finished after {} steps: loss {:.6} -> {:.6}",
        config.stage.as_str(),
        outcome.steps,
        outcome.initial_loss,
        outcome.final_loss
    );
    println!("checkpoint: {}", outcome.checkpoint_path.display());
    println!("training curve: {}", outcome.log_path.display());
    Ok(())
}

fn reconstruct(cli: &Cli, args: &ReconstructArgs) -> Result<(), CliError> {
    let out_dir = required_output(cli)?;
    let checkpoint = Checkpoint::load(&args.checkpoint)?;
    let coarse = checkpoint.build_coarse()?;
    let refine = if checkpoint.header.refine_config.is_some() {
        Some(checkpoint.build_refine()?)
    } else {
        None
    };

    let manifest = DatasetManifest::load(&args.manifest)?;
    let opts = ReconstructOptions {
        align: args.align,
        align_seed: cli.seed,
    };

    let mut processed = 0;
    for seq_entry in &manifest.sequences {
        if let Some(only) = &args.sequence {
            if &seq_entry.id != only {
                continue;
            }
        }
        let schedule = ExposureSchedule::new(seq_entry.exposures[..seq_entry.period].to_vec())?;
        let frames = seq_entry
            .frames
            .iter()
            .zip(&seq_entry.exposures)
            .map(|(rel, &t)| {
                let img = hdrvid_core::datagen::io::read_ldr_png(&resolve(&args.manifest, rel))?;
                LdrFrame::with_default_gamma(img, t)
            })
            .collect::<hdrvid_core::Result<Vec<_>>>()?;
        let sequence = LdrSequence::new(frames, schedule)?;

        let (outputs, ms_per_frame) =
            reconstruct_video(&coarse, refine.as_ref(), &sequence, &opts)?;

        let seq_dir = out_dir.join(&seq_entry.id);
        std::fs::create_dir_all(&seq_dir).map_err(|e| CoreError::io(&seq_dir, e.to_string()))?;
        let mut meta = Vec::new();
        for frame in &outputs {
            let hdr_path = seq_dir.join(format!("hdr_{:04}.exr", frame.index));
            write_hdr_exr(&hdr_path, frame.radiance.pixels())?;
            let preview = display_tonemap(&frame.radiance)?;
            let preview_path = seq_dir.join(format!("preview_{:04}.png", frame.index));
            write_ldr_png(&preview_path, preview.pixels(), PngDepth::Eight)?;
            meta.push(serde_json::json!({
                "index": frame.index,
                "refined": frame.refined,
                "role": frame.role.as_str(),
            }));
        }
        let meta_doc = serde_json::json!({
            "sequence": seq_entry.id,
            "runtime_ms_per_frame": ms_per_frame,
            "frames": meta,
        });
        let meta_path = seq_dir.join("recon_meta.json");
        std::fs::write(
            &meta_path,
            serde_json::to_string_pretty(&meta_doc).expect("valid json"),
        )
        .map_err(|e| CoreError::io(&meta_path, e.to_string()))?;
        println!(
            "sequence {}: {} frames at {:.1} ms/frame -> {}",
            seq_entry.id,
            outputs.len(),
            ms_per_frame,
            seq_dir.display()
        );
        processed += 1;
    }

    if processed == 0 {
        return Err(CliError::Core(CoreError::data(
            "no matching sequences in the manifest".to_string(),
        )));
    }
    Ok(())
}

fn sorted_exrs(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| CoreError::io(dir, e.to_string()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "exr"))
        .collect();
    files.sort();
    Ok(files)
}

fn eval(cli: &Cli, args: &EvalArgs) -> Result<(), CliError> {
    let exposures: Vec<f64> = args
        .exposures
        .split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| CliError::Usage(format!("bad exposure `{p}`")))
        })
        .collect::<Result<_, _>>()?;
    let schedule = ExposureSchedule::new(exposures)?;

    let pred_files = sorted_exrs(&args.pred)?;
    let gt_files = sorted_exrs(&args.gt)?;
    if pred_files.is_empty() {
        return Err(CliError::Core(CoreError::data(format!(
            "no EXR predictions under {}",
            args.pred.display()
        ))));
    }
    if pred_files.len() != gt_files.len() {
        return Err(CliError::Core(CoreError::data(format!(
            "{} predictions vs {} references",
            pred_files.len(),
            gt_files.len()
        ))));
    }

    let load = |paths: &[PathBuf]| -> Result<Vec<RadianceFrame>, CliError> {
        paths
            .iter()
            .map(|p| Ok(RadianceFrame::new(read_hdr_exr(p)?.map(|v| v.max(0.0)))?))
            .collect()
    };
    let preds = load(&pred_files)?;
    let gts = load(&gt_files)?;
    let roles: Vec<ExposureRole> = (0..preds.len()).map(|i| schedule.role_for(i)).collect();

    let report = evaluate(&preds, &gts, &roles, args.runtime_ms_per_frame)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    match &cli.output {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e.to_string()))?;
            let path = dir.join("eval_report.json");
            std::fs::write(&path, &json).map_err(|e| CoreError::io(&path, e.to_string()))?;
            println!("report: {}", path.display());
        }
        None => println!("{json}"),
    }
    println!(
        "mu-law PSNR: all {:.2} dB over {} frames",
        report.aggregates.all,
        report.frames.len()
    );
    Ok(())
}
