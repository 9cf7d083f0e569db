//! Command-line surface: `prepare`, `thresholds`, `train`, `denoise`,
//! `evaluate`.
//!
//! Every command echoes its fully resolved configuration (flags over
//! config file over defaults) as a `[config]` block on stderr, so a run
//! can be reproduced from its log alone. Exit codes: 0 success, 1 usage
//! error, 2 data error, 3 divergence.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::data::{self, Manifest, Split};
use crate::net::{self, TrainingConfig};
use crate::{Error, Result, FFT_SIZE, FREQ_BINS, HOP, SAMPLE_RATE};

#[derive(Parser, Debug)]
#[command(
    name = "psydenoise",
    version,
    about = "Speech denoising workbench with psychoacoustically weighted training",
    disable_help_subcommand = true
)]
struct Cli {
    /// Seed for training randomness (init, shuffling, dropout). Mixing
    /// seeds come from the manifest, not from this flag.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker pool size for per-utterance fan-out; 0 picks the CPU count.
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    /// key=value config file consulted between built-in defaults and flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the feature cache (|X|, mask, weights) for a manifest.
    Prepare(PrepareArgs),
    /// Export per-bin threshold curves for one frame of a WAV file.
    Thresholds(ThresholdsArgs),
    /// Train a mask-estimation network on a prepared cache.
    Train(TrainArgs),
    /// Denoise a WAV file with a trained checkpoint.
    Denoise(DenoiseArgs),
    /// Denoise and score every test utterance of a manifest.
    Evaluate(EvaluateArgs),
}

#[derive(Args, Debug)]
struct PrepareArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct ThresholdsArgs {
    #[arg(long)]
    wav: PathBuf,
    /// Frame index to export.
    #[arg(long)]
    frame: usize,
    /// Output CSV path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Cache directory produced by `prepare`.
    #[arg(long)]
    cache_dir: PathBuf,
    /// Where the checkpoint goes.
    #[arg(long)]
    out: PathBuf,
    /// Loss log CSV; defaults to the checkpoint path with a `loss.csv`
    /// extension.
    #[arg(long)]
    loss_log: Option<PathBuf>,
    /// Use the perceptually weighted cost: on or off.
    #[arg(long)]
    perceptual: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Full layer-width list, e.g. 513,128,513.
    #[arg(long)]
    topology: Option<String>,
    /// Input context frames: 1 or 3.
    #[arg(long)]
    context: Option<usize>,
}

#[derive(Args, Debug)]
struct DenoiseArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

/// Entry point used by the binary; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let file_config = cli.config.as_deref().map(load_config_file).transpose()?;
    let ctx = CommandContext {
        seed: cli.seed,
        jobs: cli.jobs,
        config_path: cli.config.clone(),
        file_config: file_config.unwrap_or_default(),
    };
    match cli.command {
        Command::Prepare(args) => cmd_prepare(&ctx, args),
        Command::Thresholds(args) => cmd_thresholds(&ctx, args),
        Command::Train(args) => cmd_train(&ctx, args),
        Command::Denoise(args) => cmd_denoise(&ctx, args),
        Command::Evaluate(args) => cmd_evaluate(&ctx, args),
    }
}

struct CommandContext {
    seed: u64,
    jobs: usize,
    config_path: Option<PathBuf>,
    file_config: BTreeMap<String, String>,
}

impl CommandContext {
    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.jobs)
            .build()
            .map_err(|e| Error::Data(format!("worker pool: {e}")))
    }

    /// Resolves one key with flag > config file > default precedence.
    fn resolve<V, F>(&self, flag: Option<V>, key: &str, default: V, parse: F) -> Result<V>
    where
        F: FnOnce(&str) -> Result<V>,
    {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.file_config.get(key) {
            Some(raw) => parse(raw),
            None => Ok(default),
        }
    }
}

const CONFIG_KEYS: &[&str] = &[
    "topology",
    "learning_rate",
    "epochs",
    "batch_size",
    "perceptual",
    "context",
    "seed",
    "keep_probs",
];

fn load_config_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
    let mut map = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::InvalidArg(format!(
                "{}:{}: expected key=value",
                path.display(),
                lineno + 1
            )));
        };
        let key = key.trim();
        if !CONFIG_KEYS.contains(&key) {
            return Err(Error::InvalidArg(format!(
                "{}:{}: unknown config key '{key}'",
                path.display(),
                lineno + 1
            )));
        }
        map.insert(key.to_string(), value.trim().to_string());
    }
    Ok(map)
}

fn parse_on_off(raw: &str) -> Result<bool> {
    match raw {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        other => Err(Error::InvalidArg(format!("expected on/off, got '{other}'"))),
    }
}

fn parse_usize_list(raw: &str) -> Result<Vec<usize>> {
    raw.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::InvalidArg(format!("bad number '{s}'")))
        })
        .collect()
}

/// The reproducibility block: every resolved setting, printed to stderr.
fn echo_config(command: &str, entries: &[(&str, String)]) {
    let mut block = String::from("[config]\n");
    let _ = writeln!(block, "command={command}");
    for (k, v) in entries {
        let _ = writeln!(block, "{k}={v}");
    }
    eprint!("{block}");
}

// ---------------------------------------------------------------------
// prepare
// ---------------------------------------------------------------------

fn cmd_prepare(ctx: &CommandContext, args: PrepareArgs) -> Result<()> {
    let manifest = Manifest::load(&args.manifest)?;
    manifest.check_noise_disjoint()?;
    std::fs::create_dir_all(&args.out_dir).map_err(Error::io(&args.out_dir))?;

    echo_config(
        "prepare",
        &[
            ("manifest", args.manifest.display().to_string()),
            ("out_dir", args.out_dir.display().to_string()),
            ("records", manifest.records.len().to_string()),
            ("jobs", ctx.jobs.to_string()),
            ("seed", ctx.seed.to_string()),
        ],
    );

    let pool = ctx.pool()?;
    let results: Vec<Result<(f64, usize)>> = pool.install(|| {
        manifest
            .records
            .par_iter()
            .map(|record| {
                let feat = data::compute_features(record)?;
                let frames = feat.frames();
                data::save_features(&args.out_dir, record, &feat)?;
                Ok((feat.achieved_snr_db, frames))
            })
            .collect()
    });

    let report_path = args.out_dir.join("prepare_report.csv");
    let mut report = String::from("utterance_id,snr_achieved_db,frames,status\n");
    let mut failures = 0usize;
    for (record, outcome) in manifest.records.iter().zip(&results) {
        match outcome {
            Ok((snr, frames)) => {
                let _ = writeln!(report, "{},{},{},ok", record.id(), snr, frames);
            }
            Err(e) => {
                failures += 1;
                let _ = writeln!(report, "{},nan,0,error: {}", record.id(), e);
            }
        }
    }
    std::fs::write(&report_path, report).map_err(Error::io(&report_path))?;
    println!(
        "prepared {} of {} utterances -> {}",
        manifest.records.len() - failures,
        manifest.records.len(),
        args.out_dir.display()
    );
    if failures > 0 {
        return Err(Error::Data(format!(
            "{failures} utterance(s) failed; see {}",
            report_path.display()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------
// thresholds
// ---------------------------------------------------------------------

fn cmd_thresholds(ctx: &CommandContext, args: ThresholdsArgs) -> Result<()> {
    let signal = crate::audio::read_wav(&args.wav)?;
    if signal.sample_rate != SAMPLE_RATE {
        return Err(Error::Data(format!(
            "{}: sample rate {} (expected {SAMPLE_RATE})",
            args.wav.display(),
            signal.sample_rate
        )));
    }
    let spec = crate::dsp::stft(&signal, FFT_SIZE, HOP)?;
    if args.frame >= spec.frames() {
        return Err(Error::Data(format!(
            "frame {} out of range (0..{})",
            args.frame,
            spec.frames()
        )));
    }
    let psd = crate::dsp::power_spectral_density(&spec);
    let scale = crate::psycho::BarkScale::new(FFT_SIZE, SAMPLE_RATE);
    let ath = scale.ath_db();
    let frame: Vec<f64> = psd.values.column(args.frame).to_vec();
    let maskers = crate::psycho::find_tonal_maskers(&frame, &scale);
    let g = crate::psycho::threshold_from_maskers(&maskers, &ath, &scale);
    let h: Vec<f64> = frame
        .iter()
        .zip(g.iter())
        .map(|(&p, &gv)| (10f64.powf(0.1 * (p - gv)) + 1.0).log10())
        .collect();

    let mut csv = String::from("bin_hz,psd_db,ath_db,global_threshold_db,weight\n");
    for f in 0..FREQ_BINS {
        let _ = writeln!(
            csv,
            "{},{},{},{},{}",
            scale.bin_to_hz[f],
            frame[f],
            ath[f].min(crate::psycho::ATH_EXPORT_CAP_DB),
            g[f],
            h[f]
        );
    }
    match &args.out {
        Some(path) => std::fs::write(path, csv).map_err(Error::io(path))?,
        None => print!("{csv}"),
    }

    echo_config(
        "thresholds",
        &[
            ("wav", args.wav.display().to_string()),
            ("frame", args.frame.to_string()),
            (
                "out",
                args.out
                    .as_ref()
                    .map(|p| p.display().to_string())
                    .unwrap_or_else(|| "-".into()),
            ),
            ("seed", ctx.seed.to_string()),
        ],
    );
    let bins: Vec<String> = maskers.iter().map(|m| m.bin.to_string()).collect();
    eprintln!("tonal_maskers={}", maskers.len());
    eprintln!("tonal_masker_bins={}", bins.join(" "));
    Ok(())
}

// ---------------------------------------------------------------------
// train
// ---------------------------------------------------------------------

fn resolve_training_config(ctx: &CommandContext, args: &TrainArgs) -> Result<TrainingConfig> {
    let context = ctx.resolve(args.context, "context", 1, |s| {
        s.parse()
            .map_err(|_| Error::InvalidArg(format!("bad context '{s}'")))
    })?;
    let default_topology = vec![FREQ_BINS * context, 128, FREQ_BINS];
    let topology = ctx.resolve(
        args.topology.as_deref().map(parse_usize_list).transpose()?,
        "topology",
        default_topology,
        parse_usize_list,
    )?;
    let mut config = TrainingConfig::new(topology, context);
    config.learning_rate = ctx.resolve(args.learning_rate, "learning_rate", 1e-3, |s| {
        s.parse()
            .map_err(|_| Error::InvalidArg(format!("bad learning_rate '{s}'")))
    })?;
    config.epochs = ctx.resolve(args.epochs, "epochs", 200, |s| {
        s.parse()
            .map_err(|_| Error::InvalidArg(format!("bad epochs '{s}'")))
    })?;
    config.batch_size = ctx.resolve(args.batch_size, "batch_size", 256, |s| {
        s.parse()
            .map_err(|_| Error::InvalidArg(format!("bad batch_size '{s}'")))
    })?;
    config.use_perceptual_weights = ctx.resolve(
        args.perceptual.as_deref().map(parse_on_off).transpose()?,
        "perceptual",
        false,
        parse_on_off,
    )?;
    if let Some(raw) = ctx.file_config.get("keep_probs") {
        config.keep_probs = raw
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| Error::InvalidArg(format!("bad keep prob '{s}'")))
            })
            .collect::<Result<Vec<f64>>>()?;
    }
    // The CLI --seed flag wins over a config-file seed.
    config.rng_seed = if ctx.seed != 0 {
        ctx.seed
    } else {
        ctx.resolve(None, "seed", 0, |s| {
            s.parse()
                .map_err(|_| Error::InvalidArg(format!("bad seed '{s}'")))
        })?
    };
    config.validate()?;
    if config.topology[0] != FREQ_BINS * context {
        return Err(Error::InvalidArg(format!(
            "topology input {} does not match context {} x {FREQ_BINS}",
            config.topology[0], context
        )));
    }
    if *config.topology.last().unwrap() != FREQ_BINS {
        return Err(Error::InvalidArg(format!(
            "topology output {} must be {FREQ_BINS}",
            config.topology.last().unwrap()
        )));
    }
    Ok(config)
}

fn load_split_features(
    manifest: &Manifest,
    cache_dir: &Path,
    split: Split,
) -> Result<Vec<data::UtteranceFeatures>> {
    manifest
        .split(split)
        .into_iter()
        .map(|r| data::load_features(cache_dir, r))
        .collect()
}

fn cmd_train(ctx: &CommandContext, args: TrainArgs) -> Result<()> {
    let config = resolve_training_config(ctx, &args)?;
    let manifest = Manifest::load(&args.manifest)?;
    let loss_log_path = args
        .loss_log
        .clone()
        .unwrap_or_else(|| args.out.with_extension("loss.csv"));

    echo_config(
        "train",
        &[
            ("manifest", args.manifest.display().to_string()),
            ("cache_dir", args.cache_dir.display().to_string()),
            ("out", args.out.display().to_string()),
            ("loss_log", loss_log_path.display().to_string()),
            (
                "config_file",
                ctx.config_path
                    .as_ref()
                    .map(|p| p.display().to_string())
                    .unwrap_or_else(|| "-".into()),
            ),
            (
                "topology",
                config
                    .topology
                    .iter()
                    .map(|d| d.to_string())
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            ("learning_rate", config.learning_rate.to_string()),
            ("epochs", config.epochs.to_string()),
            ("batch_size", config.batch_size.to_string()),
            (
                "perceptual",
                if config.use_perceptual_weights { "on" } else { "off" }.to_string(),
            ),
            ("context", config.context_frames.to_string()),
            (
                "keep_probs",
                config
                    .keep_probs
                    .iter()
                    .map(|p| p.to_string())
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            ("seed", config.rng_seed.to_string()),
        ],
    );

    let train_feats = load_split_features(&manifest, &args.cache_dir, Split::Train)?;
    if train_feats.is_empty() {
        return Err(Error::Data("manifest has no train records".into()));
    }
    let val_feats = load_split_features(&manifest, &args.cache_dir, Split::Val)?;
    let train_set = data::assemble_dataset(&train_feats, config.context_frames)?;
    let val_set = data::assemble_dataset(&val_feats, config.context_frames)?;

    let (params, log) = net::train(&config, &train_set, Some(&val_set))?;
    net::save_checkpoint(&args.out, &params, &config)?;
    net::write_loss_log(&loss_log_path, &log)?;
    if let (Some(first), Some(last)) = (log.first(), log.last()) {
        println!(
            "trained {} epochs: train {} -> {}, best val {}",
            log.len(),
            first.train_loss,
            last.train_loss,
            log.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min)
        );
    } else {
        println!("epochs=0: wrote initialized checkpoint");
    }
    println!("checkpoint: {}", args.out.display());
    Ok(())
}

// ---------------------------------------------------------------------
// denoise
// ---------------------------------------------------------------------

fn cmd_denoise(ctx: &CommandContext, args: DenoiseArgs) -> Result<()> {
    let (params, config) = net::load_checkpoint(&args.checkpoint)?;
    let input = crate::audio::read_wav(&args.input)?;
    if input.sample_rate != SAMPLE_RATE {
        return Err(Error::Data(format!(
            "{}: sample rate {} (expected {SAMPLE_RATE})",
            args.input.display(),
            input.sample_rate
        )));
    }
    echo_config(
        "denoise",
        &[
            ("checkpoint", args.checkpoint.display().to_string()),
            ("input", args.input.display().to_string()),
            ("output", args.output.display().to_string()),
            ("context", config.context_frames.to_string()),
            ("seed", ctx.seed.to_string()),
        ],
    );
    let enhanced = net::denoise_signal(&params, config.context_frames, &input)?;
    crate::audio::write_wav(&args.output, &enhanced)?;
    println!(
        "denoised {} samples -> {}",
        enhanced.len(),
        args.output.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------

fn cmd_evaluate(ctx: &CommandContext, args: EvaluateArgs) -> Result<()> {
    let (params, config) = net::load_checkpoint(&args.checkpoint)?;
    let manifest = Manifest::load(&args.manifest)?;
    let records: Vec<_> = manifest.split(Split::Test).into_iter().cloned().collect();
    if records.is_empty() {
        return Err(Error::Data("manifest has no test records".into()));
    }
    echo_config(
        "evaluate",
        &[
            ("checkpoint", args.checkpoint.display().to_string()),
            ("manifest", args.manifest.display().to_string()),
            ("out", args.out.display().to_string()),
            ("records", records.len().to_string()),
            ("jobs", ctx.jobs.to_string()),
            ("seed", ctx.seed.to_string()),
        ],
    );
    let report = crate::eval::evaluate_corpus(&params, &config, &records, ctx.jobs)?;
    std::fs::write(&args.out, report.to_csv()).map_err(Error::io(&args.out))?;
    if let Some(a) = report.aggregates() {
        println!(
            "aggregate: sdr {} sir {} sar {} si_sdr {} stoi {}",
            crate::eval::fmt_sig6(a.sdr_db),
            crate::eval::fmt_sig6(a.sir_db),
            crate::eval::fmt_sig6(a.sar_db),
            crate::eval::fmt_sig6(a.si_sdr_db),
            crate::eval::fmt_sig6(a.stoi)
        );
    }
    println!("report: {}", args.out.display());
    if report.has_failures() {
        for (id, err) in report.failed_rows() {
            eprintln!("failed: {id}: {err}");
        }
        return Err(Error::Data("some utterances failed evaluation".into()));
    }
    Ok(())
}
