//! `dualtl`: synthesize traces, build MSTmaps, train, evaluate and verify.
//!
//! Exit status is 0 on success, 1 on a runtime failure and 2 on a usage
//! error.

mod manifest;
mod selfcheck;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use dualtl::baselines::{self, Method};
use dualtl::hrdsp::{estimate_hr, HrReport, VideoHr};
use dualtl::io::{read_trace, signal_to_csv, write_atomic, write_mstmap, write_trace};
use dualtl::model::{dual_forward, read_checkpoint, write_checkpoint, ModelConfig, PathMode};
use dualtl::mstmap::{build_mstmap_window, enumerate_roi_combinations, minmax_normalize, segment_trace, ColorSpace};
use dualtl::synth::{generate_corpus, SynthConfig};
use dualtl::trainer::{decode_state, encode_state, evaluate, history_csv, train_from, TrainConfig, TrainState};
use serde::{Deserialize, Serialize};

use manifest::{
    ensure_dir, load_samples, read_json, stem, trace_files, write_json, SegmentEntry, SegmentManifest, SynthEntry,
    SynthManifest, SEGMENT_MANIFEST, SYNTH_MANIFEST,
};

#[derive(Parser)]
#[command(name = "dualtl", version, about = "Dual-path token Transformer rPPG pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic trace corpus.
    Synth(SynthArgs),
    /// Segment traces into normalized MSTmaps.
    Mstmap(MstmapArgs),
    /// Train a model on MSTmaps with ground truth from their traces.
    Train(TrainArgs),
    /// Write predicted waveforms for every map segment.
    Infer(InferArgs),
    /// Score a checkpoint and write an HR report.
    Eval(EvalArgs),
    /// Run the classical extractors on traces.
    Baseline(BaselineArgs),
    /// Run numerical self-checks.
    Selfcheck(SelfcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    n_videos: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON template for every video; per-video seed and HR are drawn.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    duration_s: Option<f64>,
    #[arg(long)]
    n_rois: Option<usize>,
    /// Disable noise, drift, motion and occlusion.
    #[arg(long)]
    clean: bool,
}

#[derive(Args)]
struct MstmapArgs {
    /// Trace CSV or directory of traces.
    #[arg(long)]
    traces: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "yuv")]
    color_space: ColorSpace,
    /// Frames per segment.
    #[arg(long, default_value_t = 300)]
    seg_len: usize,
    #[arg(long, default_value_t = 0.5)]
    stride_s: f64,
}

#[derive(Args)]
struct ModelFlags {
    /// Which token paths feed the head.
    #[arg(long = "path")]
    path_mode: Option<PathMode>,
    #[arg(long)]
    no_spatial_token: bool,
    #[arg(long)]
    no_temporal_token: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    maps: PathBuf,
    #[arg(long)]
    traces: PathBuf,
    /// JSON with optional `model` and `train` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Training state to continue from.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    model: ModelFlags,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    maps: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    maps: PathBuf,
    #[arg(long)]
    traces: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Green,
    Chrom,
    Pos,
    All,
}

#[derive(Args)]
struct BaselineArgs {
    #[arg(long)]
    traces: PathBuf,
    #[arg(long, value_enum, default_value = "all")]
    method: MethodArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SelfcheckArgs {
    /// Checkpoint to load and run.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    model: ModelConfig,
    train: TrainConfig,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Mstmap(a) => cmd_mstmap(a),
        Command::Train(a) => cmd_train(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Baseline(a) => cmd_baseline(a),
        Command::Selfcheck(a) => selfcheck::run(a.checkpoint.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let mut template: SynthConfig = match &args.config {
        Some(path) => read_json(path)?,
        None => SynthConfig::default(),
    };
    if args.clean {
        template.noise = SynthConfig::clean().noise;
    }
    if let Some(d) = args.duration_s {
        template.duration_s = d;
    }
    if let Some(n) = args.n_rois {
        template.n_rois = n;
    }
    template.validate()?;
    log::info!("synth template: {}", serde_json::to_string(&template)?);
    ensure_dir(&args.out)?;
    let corpus = generate_corpus(args.n_videos, &template, args.seed)?;
    let mut videos = Vec::with_capacity(corpus.len());
    for video in &corpus {
        let csv = format!("{}.csv", video.id);
        write_trace(&args.out.join(&csv), &video.trace)?;
        videos.push(SynthEntry {
            id: video.id.clone(),
            trace: csv,
            sidecar: format!("{}.json", video.id),
            seed: video.config.seed,
            hr_bpm: video.config.hr_bpm,
            hr_end_bpm: video.config.hr_end_bpm,
            gt_hr_bpm: video.config.mean_hr_bpm(),
        });
    }
    write_json(&args.out.join(SYNTH_MANIFEST), &SynthManifest { seed: args.seed, template, videos })?;
    log::info!("wrote {} traces to {}", corpus.len(), args.out.display());
    Ok(())
}

fn cmd_mstmap(args: MstmapArgs) -> Result<()> {
    let files = trace_files(&args.traces)?;
    ensure_dir(&args.out)?;
    let mut segments = Vec::new();
    for file in &files {
        let trace = read_trace(file)?;
        let combos = enumerate_roi_combinations(trace.base_roi_count)?;
        let name = stem(file);
        let ranges = segment_trace(&trace, args.seg_len, args.stride_s)?;
        if ranges.is_empty() {
            log::warn!("{}: shorter than one {}-frame segment", file.display(), args.seg_len);
        }
        for range in ranges {
            let map = minmax_normalize(&build_mstmap_window(&trace, &combos, args.color_space, range.clone())?)?;
            let out_name = format!("{name}_{}.mstm", range.start);
            write_mstmap(&args.out.join(&out_name), &map)?;
            segments.push(SegmentEntry {
                file: out_name,
                video: name.clone(),
                trace: file.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default(),
                start_frame: range.start,
                frames: range.len(),
                fps: trace.fps,
                degraded: map.degraded,
            });
        }
    }
    log::info!("wrote {} maps to {}", segments.len(), args.out.display());
    write_json(
        &args.out.join(SEGMENT_MANIFEST),
        &SegmentManifest {
            color_space: args.color_space,
            seg_len: args.seg_len,
            stride_s: args.stride_s,
            normalized: true,
            segments,
        },
    )
}

fn apply_flags(model: &mut ModelConfig, flags: &ModelFlags) {
    if let Some(mode) = flags.path_mode {
        model.path_mode = mode;
    }
    if flags.no_spatial_token {
        model.use_spatial_token = false;
    }
    if flags.no_temporal_token {
        model.use_temporal_token = false;
    }
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut run: RunConfig = match &args.config {
        Some(path) => read_json(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        run.train.seed = seed;
    }
    apply_flags(&mut run.model, &args.model);
    let (_, samples) = load_samples(&args.maps, Some(&args.traces))?;
    let (n, c, t) = samples[0].map.shape();
    if (run.model.combinations, run.model.channels, run.model.frames) != (n, c, t) {
        log::info!("model (N, C, T) taken from data: ({n}, {c}, {t})");
    }
    run.model.combinations = n;
    run.model.channels = c;
    run.model.frames = t;
    run.model.validate()?;
    run.train.validate()?;
    log::info!("effective config: {}", serde_json::to_string(&run)?);
    ensure_dir(&args.out)?;
    write_json(&args.out.join("config.json"), &run)?;

    let state = match &args.resume {
        Some(path) => {
            let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
            let state = decode_state(&bytes, &run.model).with_context(|| format!("resuming from {}", path.display()))?;
            log::info!("resuming at epoch {} step {}", state.epochs_done, state.adam.step);
            state
        }
        None => TrainState::new(&run.model, run.train.seed)?,
    };
    let out = args.out.clone();
    let every = run.train.checkpoint_every;
    let model_cfg = run.model.clone();
    let state = train_from(state, &samples, &run.model, &run.train, |s| {
        if every > 0 && s.epochs_done % every == 0 {
            write_checkpoint(&out.join(format!("checkpoint_epoch_{:04}.dtlc", s.epochs_done)), &model_cfg, &s.params)?;
            write_atomic(&out.join("state.dtls"), &encode_state(s))?;
        }
        Ok(())
    })?;
    write_checkpoint(&args.out.join("checkpoint.dtlc"), &run.model, &state.params)?;
    write_atomic(&args.out.join("state.dtls"), &encode_state(&state))?;
    write_atomic(&args.out.join("train_log.csv"), &history_csv(&state.history))?;
    if let Some(last) = state.history.last() {
        log::info!("finished at epoch {} step {} loss {:.6}", last.epoch, last.step, last.mean_loss);
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<(ModelConfig, dualtl::model::ModelParams)> {
    read_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn cmd_infer(args: InferArgs) -> Result<()> {
    let (cfg, params) = load_model(&args.checkpoint)?;
    let (manifest, samples) = load_samples(&args.maps, None)?;
    ensure_dir(&args.out)?;
    for (seg, sample) in manifest.segments.iter().zip(&samples) {
        let signal = dual_forward(&sample.map, &params, &cfg).with_context(|| format!("segment {}", seg.file))?;
        let name = format!("{}.csv", Path::new(&seg.file).file_stem().unwrap_or_default().to_string_lossy());
        write_atomic(&args.out.join(name), &signal_to_csv(&signal))?;
    }
    log::info!("wrote {} signals to {}", samples.len(), args.out.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let (cfg, params) = load_model(&args.checkpoint)?;
    let (_, samples) = load_samples(&args.maps, Some(&args.traces))?;
    let report = evaluate(&samples, &params, &cfg)?;
    ensure_dir(&args.out)?;
    write_json(&args.out.join("report.json"), &report)?;
    println!("MAE {:.3} RMSE {:.3} MER {:.3}% over {} videos", report.mae, report.rmse, report.mer, report.videos.len());
    Ok(())
}

fn cmd_baseline(args: BaselineArgs) -> Result<()> {
    let methods: Vec<Method> = match args.method {
        MethodArg::Green => vec![Method::Green],
        MethodArg::Chrom => vec![Method::Chrom],
        MethodArg::Pos => vec![Method::Pos],
        MethodArg::All => Method::ALL.to_vec(),
    };
    let files = trace_files(&args.traces)?;
    let traces = files
        .iter()
        .map(|f| Ok((stem(f), read_trace(f)?)))
        .collect::<Result<Vec<_>>>()?;
    for method in methods {
        let dir = args.out.join(method.name());
        ensure_dir(&dir)?;
        let mut videos = Vec::new();
        let mut excluded = 0;
        for (id, trace) in &traces {
            let signal = baselines::run(method, trace)?.signal;
            write_atomic(&dir.join(format!("{id}.csv")), &signal_to_csv(&signal))?;
            let reference = match (trace.gt_hr_bpm, &trace.gt_ppg) {
                (Some(hr), _) => Some(hr),
                (None, Some(gt)) => estimate_hr(gt, trace.fps).ok().map(|e| e.hr_bpm),
                (None, None) => None,
            };
            match (estimate_hr(&signal, trace.fps), reference) {
                (Ok(est), Some(hr_gt)) => videos.push(VideoHr {
                    id: id.clone(),
                    hr_pred: est.hr_bpm,
                    hr_gt,
                    segments: 1,
                    segment_r: None,
                }),
                (Err(e), _) => {
                    log::warn!("{}: {id} excluded: {e}", method.name());
                    excluded += 1;
                }
                (_, None) => {
                    log::warn!("{}: {id} has no ground truth", method.name());
                    excluded += 1;
                }
            }
        }
        if videos.is_empty() {
            bail!("{}: no video produced a scored heart rate", method.name());
        }
        let report = HrReport::from_videos(videos, excluded)?;
        write_json(&dir.join("report.json"), &report)?;
        println!("{} MAE {:.3} RMSE {:.3} over {} videos", method.name(), report.mae, report.rmse, report.videos.len());
    }
    Ok(())
}
