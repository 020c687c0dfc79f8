//! Command-line front end.
//!
//! Exit codes: 0 ok, 1 usage or configuration error, 2 I/O error,
//! 3 run dominated by numerical failures (more than half the adaptive
//! updates skipped). Outputs are still written in the last case.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::awpe::{awpe_stream, AwpeConfig};
use crate::error::{Error, Result};
use crate::kv::{parse_value, KeyValues};
use crate::mag_mint::MintScheme;
use crate::metrics::{improvement_report, GainAlignment, ImprovementReport};
use crate::pipeline::{process_stream, EngineConfig, IdentMode, RunReport, StageTiming};
use crate::simulator::{generate_scene, load_scene, ScenarioSpec};
use crate::wav::{read_wav_at, write_wav};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "smif",
    version,
    about = "Online multichannel dereverberation by STFT-magnitude inverse filtering"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Worker threads for per-bin processing; does not change results.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Dereverberate a multichannel WAV file.
    Dereverb(DereverbArgs),
    /// Generate a synthetic scene with ground truth.
    Simulate(SimulateArgs),
    /// Score an enhanced signal against a scene's ground truth.
    Evaluate(EvaluateArgs),
    /// Time a method on a scene.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Smif,
    Awpe,
}

#[derive(Debug, Clone, Args)]
pub struct MethodArgs {
    #[arg(long, value_enum, default_value = "smif")]
    pub method: Method,
    /// Inverse filtering scheme: mc (multichannel) or pw (pairwise).
    #[arg(long, value_parser = parse_scheme)]
    pub scheme: Option<MintScheme>,
    /// Identification mode: online or batch-ident.
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<IdentMode>,
    /// key = value file with engine settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Use only the first N input channels.
    #[arg(long)]
    pub channels: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct DereverbArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[command(flatten)]
    pub method: MethodArgs,
    /// Where to write the JSON run report.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Include wall-clock fields in the report.
    #[arg(long)]
    pub timing: bool,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub enhanced: PathBuf,
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Frames excluded from the scores at the start.
    #[arg(long, default_value_t = 0)]
    pub skip_frames: usize,
    #[arg(long, value_enum, default_value = "per-bin")]
    pub align: AlignArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AlignArg {
    None,
    PerBin,
}

impl From<AlignArg> for GainAlignment {
    fn from(a: AlignArg) -> Self {
        match a {
            AlignArg::None => GainAlignment::None,
            AlignArg::PerBin => GainAlignment::PerBin,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[command(flatten)]
    pub method: MethodArgs,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

fn parse_scheme(s: &str) -> std::result::Result<MintScheme, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_mode(s: &str) -> std::result::Result<IdentMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

const ENGINE_KEYS: &[&str] = &[
    "frame_len",
    "hop",
    "sample_rate",
    "window",
    "ctf_len",
    "inverse_filter_len",
    "forgetting",
    "step_size",
    "g_min_db",
    "scheme",
    "pair_policy",
    "mode",
    "reference_channel",
    "init_scale",
];

fn optional<T: std::str::FromStr>(key: &str, v: &str) -> Result<Option<T>> {
    match v {
        "auto" | "none" => Ok(None),
        _ => parse_value(key, v).map(Some),
    }
}

/// Applies a key = value file on top of `base`; keys are the field names.
pub fn engine_config_from_kv(base: EngineConfig, kv: &KeyValues) -> Result<EngineConfig> {
    kv.check_keys(ENGINE_KEYS)?;
    let mut c = base;
    for (k, v) in kv.iter() {
        match k {
            "frame_len" => c.frame_len = parse_value(k, v)?,
            "hop" => c.hop = parse_value(k, v)?,
            "sample_rate" => c.sample_rate = parse_value(k, v)?,
            "window" => c.window = v.parse()?,
            "ctf_len" => c.ctf_len = parse_value(k, v)?,
            "inverse_filter_len" => c.inverse_filter_len = optional(k, v)?,
            "forgetting" => c.forgetting = optional(k, v)?,
            "step_size" => c.step_size = parse_value(k, v)?,
            "g_min_db" => c.g_min_db = parse_value(k, v)?,
            "scheme" => c.scheme = v.parse()?,
            "pair_policy" => c.pair_policy = v.parse()?,
            "mode" => c.mode = v.parse()?,
            "reference_channel" => c.reference_channel = parse_value(k, v)?,
            "init_scale" => c.init_scale = parse_value(k, v)?,
            _ => unreachable!("keys checked above"),
        }
    }
    c.validate()?;
    Ok(c)
}

/// Built-in defaults, then the config file, then flags.
pub fn resolve_engine_config(args: &MethodArgs) -> Result<EngineConfig> {
    let mut cfg = EngineConfig::default();
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path)?;
        cfg = engine_config_from_kv(cfg, &KeyValues::parse(&text)?)?;
    }
    if let Some(s) = args.scheme {
        cfg.scheme = s;
    }
    if let Some(m) = args.mode {
        cfg.mode = m;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn check_method_flags(args: &MethodArgs) -> Result<()> {
    if args.method == Method::Awpe
        && (args.scheme.is_some() || args.mode.is_some() || args.config.is_some())
    {
        return Err(Error::Config(
            "--scheme, --mode and --config only apply to --method smif".into(),
        ));
    }
    Ok(())
}

fn select_channels(mut x: Vec<Vec<f64>>, count: Option<usize>) -> Result<Vec<Vec<f64>>> {
    if let Some(n) = count {
        if n > x.len() {
            return Err(Error::Config(format!(
                "--channels {n} but the input has {}",
                x.len()
            )));
        }
        x.truncate(n);
    }
    if x.len() < 2 {
        return Err(Error::TooFewChannels {
            required: 2,
            got: x.len(),
        });
    }
    Ok(x)
}

fn with_threads<T: Send>(
    threads: Option<usize>,
    f: impl FnOnce() -> Result<T> + Send,
) -> Result<T> {
    match threads {
        None => f(),
        Some(0) => Err(Error::Config("--threads must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(f),
    }
}

/// Runs the selected method over time-domain input.
pub fn run_method(args: &MethodArgs, mics: &[Vec<f64>]) -> Result<(Vec<f64>, RunReport)> {
    check_method_flags(args)?;
    match args.method {
        Method::Smif => process_stream(&resolve_engine_config(args)?, mics),
        Method::Awpe => awpe_stream(&AwpeConfig::default(), mics),
    }
}

fn method_rate(args: &MethodArgs) -> Result<u32> {
    Ok(match args.method {
        Method::Smif => resolve_engine_config(args)?.sample_rate,
        Method::Awpe => AwpeConfig::default().sample_rate,
    })
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

fn numerical_status(report: &RunReport) -> i32 {
    let f = report.skip_counts.skipped_fraction();
    if f > 0.5 {
        warn!("{:.1}% of adaptive updates were skipped", 100.0 * f);
        EXIT_NUMERICAL
    } else {
        EXIT_OK
    }
}

pub fn dereverb(args: &DereverbArgs, threads: Option<usize>) -> Result<i32> {
    check_method_flags(&args.method)?;
    let rate = method_rate(&args.method)?;
    let input = read_wav_at(&args.input, rate)?;
    let mics = select_channels(input.channels, args.method.channels)?;
    info!("{} channels, {} samples", mics.len(), mics[0].len());
    let (out, mut report) = with_threads(threads, || run_method(&args.method, &mics))?;
    if !args.timing {
        report = report.without_timing();
    }
    write_wav(&args.output, std::slice::from_ref(&out), rate)?;
    if let Some(path) = &args.report {
        write_json(path, &report)?;
    }
    Ok(numerical_status(&report))
}

pub fn simulate(args: &SimulateArgs, threads: Option<usize>) -> Result<i32> {
    let spec = ScenarioSpec::parse(&fs::read_to_string(&args.spec)?)?;
    let scene = with_threads(threads, || {
        generate_scene(&spec, &EngineConfig::default().stft(), args.seed)
    })?;
    scene.export(&args.out_dir)?;
    Ok(EXIT_OK)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub scene: String,
    pub enhanced: String,
    pub seed: u64,
    pub frames: usize,
    pub lsd_unprocessed_mean_db: f64,
    pub lsd_enhanced_mean_db: f64,
    pub median_improvement_db: f64,
    pub mean_improvement_db: f64,
    pub details: ImprovementReport,
}

pub fn evaluate(args: &EvaluateArgs) -> Result<(EvaluationReport, i32)> {
    let scene = load_scene(&args.scene)?;
    let enhanced = read_wav_at(&args.enhanced, scene.sidecar.stft.sample_rate)?;
    let Some(first) = enhanced.channels.into_iter().next() else {
        return Err(Error::Config("enhanced file has no channels".into()));
    };
    let details = improvement_report(
        &scene.sidecar.stft,
        &scene.reference,
        &scene.mics[0],
        &first,
        args.skip_frames,
        args.align.into(),
    )?;
    let report = EvaluationReport {
        scene: args.scene.display().to_string(),
        enhanced: args.enhanced.display().to_string(),
        seed: scene.sidecar.seed,
        frames: details.per_frame_improvement_db.len(),
        lsd_unprocessed_mean_db: details.lsd_unprocessed.mean_db,
        lsd_enhanced_mean_db: details.lsd_enhanced.mean_db,
        median_improvement_db: details.median_improvement_db,
        mean_improvement_db: details.mean_improvement_db,
        details,
    };
    if let Some(path) = &args.report {
        write_json(path, &report)?;
    }
    Ok((report, EXIT_OK))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub method: Method,
    pub channels: usize,
    pub duration_seconds: f64,
    pub realtime_factor: f64,
    pub stage_seconds: StageTiming,
    pub run: RunReport,
}

pub fn bench(args: &BenchArgs, threads: Option<usize>) -> Result<(BenchReport, i32)> {
    check_method_flags(&args.method)?;
    let scene = load_scene(&args.scene)?;
    let rate = method_rate(&args.method)?;
    if rate != scene.sidecar.stft.sample_rate {
        return Err(Error::Config(format!(
            "scene is at {} Hz, method runs at {rate} Hz",
            scene.sidecar.stft.sample_rate
        )));
    }
    let mics = select_channels(scene.mics, args.method.channels)?;
    let duration = mics[0].len() as f64 / rate as f64;
    let (_, run) = with_threads(threads, || run_method(&args.method, &mics))?;
    let report = BenchReport {
        method: args.method.method,
        channels: mics.len(),
        duration_seconds: duration,
        realtime_factor: run.realtime_factor.unwrap_or(0.0),
        stage_seconds: run.stage_seconds.unwrap_or_default(),
        run,
    };
    if let Some(path) = &args.report {
        write_json(path, &report)?;
    } else {
        println!("{}", serde_json::to_string_pretty(&report)?);
    }
    let code = numerical_status(&report.run);
    Ok((report, code))
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io(_) | Error::Wav(_) | Error::Json(_) => EXIT_IO,
        Error::Scenario(m) if m.contains("sidecar") => EXIT_IO,
        Error::Numerical(_) => EXIT_NUMERICAL,
        _ => EXIT_USAGE,
    }
}

/// Parses arguments, runs the subcommand and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::Dereverb(a) => dereverb(a, cli.threads),
        Command::Simulate(a) => simulate(a, cli.threads),
        Command::Evaluate(a) => evaluate(a).map(|(r, c)| {
            if a.report.is_none() {
                println!(
                    "{}",
                    serde_json::to_string_pretty(&r).expect("report serializes")
                );
            }
            c
        }),
        Command::Bench(a) => bench(a, cli.threads).map(|(_, c)| c),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_file_keys_match_fields() {
        let kv = KeyValues::parse(
            "ctf_len = 20\nscheme = pairwise\nforgetting = 0.9\ninverse_filter_len = auto",
        )
        .unwrap();
        let c = engine_config_from_kv(EngineConfig::default(), &kv).unwrap();
        assert_eq!(c.ctf_len, 20);
        assert_eq!(c.scheme, MintScheme::Pairwise);
        assert_eq!(c.forgetting, Some(0.9));
        assert_eq!(c.inverse_filter_len, None);
        let bad = KeyValues::parse("ctf_length = 20").unwrap();
        assert!(engine_config_from_kv(EngineConfig::default(), &bad).is_err());
        let json = serde_json::to_value(EngineConfig::default()).unwrap();
        let mut fields: Vec<&str> = json
            .as_object()
            .unwrap()
            .keys()
            .map(String::as_str)
            .collect();
        fields.sort_unstable();
        let mut keys = ENGINE_KEYS.to_vec();
        keys.sort_unstable();
        assert_eq!(fields, keys);
    }

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.txt");
        fs::write(&path, "scheme = pairwise\nmode = batch-ident\n").unwrap();
        let args = MethodArgs {
            method: Method::Smif,
            scheme: Some(MintScheme::Multichannel),
            mode: None,
            config: Some(path),
            channels: None,
        };
        let c = resolve_engine_config(&args).unwrap();
        assert_eq!(c.scheme, MintScheme::Multichannel);
        assert_eq!(c.mode, IdentMode::BatchIdent);
    }

    #[test]
    fn awpe_rejects_smif_only_flags() {
        let args = MethodArgs {
            method: Method::Awpe,
            scheme: Some(MintScheme::Pairwise),
            mode: None,
            config: None,
            channels: None,
        };
        assert!(check_method_flags(&args).is_err());
    }

    #[test]
    fn usage_errors_exit_with_one() {
        assert_eq!(run(["smif"]), EXIT_USAGE);
        assert_eq!(run(["smif", "dereverb", "--input", "x.wav"]), EXIT_USAGE);
        assert_eq!(run(["smif", "--help"]), EXIT_OK);
    }
}
