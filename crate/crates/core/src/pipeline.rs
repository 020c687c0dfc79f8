//! Frame-synchronous dereverberation engine.
//!
//! Every frame, each frequency bin independently:
//! pushes the new coefficients, updates the recursive CTF identification,
//! takes `ā = |ă|`, advances its MINT filters one step, filters the
//! microphone magnitudes, floors the result and reattaches the reference
//! phase. Bins run in parallel; all reductions are sequential in bin order,
//! so output bits do not depend on the thread count.

use std::time::Instant;

use log::warn;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ctf_ident::{
    BatchAccumulator, CtfEstimate, IdentConfig, PairPolicy, RecursiveIdentifier, DEFAULT_INIT_SCALE,
};
use crate::error::{Error, Result};
use crate::history::FrameHistory;
use crate::mag_mint::{MintScheme, MintState};
use crate::postproc::{apply_floor, reattach_phase, FloorConfig};
use crate::stft::{Frame, Spectrogram, Stft, StftConfig, WindowKind};

/// Frames of effective memory per critically sampled tap, before the
/// oversampling factor is applied.
const MEMORY_PER_TAP: f64 = 2.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum IdentMode {
    /// Recursive identification, frame by frame.
    #[default]
    Online,
    /// One batch identification over the whole signal, then adaptive MINT.
    BatchIdent,
}

impl std::str::FromStr for IdentMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "online" => Ok(IdentMode::Online),
            "batch-ident" | "batch" => Ok(IdentMode::BatchIdent),
            other => Err(Error::Config(format!("unknown mode '{other}'"))),
        }
    }
}

/// Engine parameters. Defaults are the published operating point:
/// 16 kHz, Hamming N=768, L=192, Q=16, μ=0.025, G_min=-15 dB.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub frame_len: usize,
    pub hop: usize,
    pub sample_rate: u32,
    pub window: WindowKind,
    /// Oversampled CTF length `Q` in frames.
    pub ctf_len: usize,
    /// Inverse filter length `Õ`; defaults to the critically sampled CTF length.
    pub inverse_filter_len: Option<usize>,
    /// RLS forgetting factor; derived from the CTF length when unset.
    pub forgetting: Option<f64>,
    pub step_size: f64,
    pub g_min_db: f64,
    pub scheme: MintScheme,
    pub pair_policy: PairPolicy,
    pub mode: IdentMode,
    pub reference_channel: usize,
    pub init_scale: f64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        let stft = StftConfig::default();
        Self {
            frame_len: stft.frame_len,
            hop: stft.hop,
            sample_rate: stft.sample_rate,
            window: stft.window,
            ctf_len: 16,
            inverse_filter_len: None,
            forgetting: None,
            step_size: 0.025,
            g_min_db: -15.0,
            scheme: MintScheme::Multichannel,
            pair_policy: PairPolicy::FirstMic,
            mode: IdentMode::Online,
            reference_channel: 0,
            init_scale: DEFAULT_INIT_SCALE,
        }
    }
}

impl EngineConfig {
    pub fn stft(&self) -> StftConfig {
        StftConfig {
            frame_len: self.frame_len,
            hop: self.hop,
            sample_rate: self.sample_rate,
            window: self.window,
        }
    }

    pub fn decimation(&self) -> usize {
        self.frame_len / self.hop.max(1)
    }

    /// Critically sampled CTF length `Q̃ = ceil(Q / D)`.
    pub fn ctf_taps(&self) -> usize {
        self.ctf_len.div_ceil(self.decimation().max(1))
    }

    pub fn inverse_len(&self) -> usize {
        self.inverse_filter_len.unwrap_or_else(|| self.ctf_taps())
    }

    /// `λ = (P̃ - 1) / (P̃ + 1)` with `P̃ = 2.5 · D · Q̃` unless overridden.
    pub fn lambda(&self) -> f64 {
        self.forgetting.unwrap_or_else(|| {
            let memory = MEMORY_PER_TAP * self.decimation() as f64 * self.ctf_taps() as f64;
            crate::ctf_ident::forgetting_for_memory(memory)
        })
    }

    pub fn floor(&self) -> FloorConfig {
        FloorConfig {
            g_min_db: self.g_min_db,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.stft().validate()?;
        if self.ctf_len == 0 {
            return Err(Error::Config("ctf_len must be >= 1".into()));
        }
        if self.inverse_len() == 0 {
            return Err(Error::Config("inverse_filter_len must be >= 1".into()));
        }
        let lambda = self.lambda();
        if !(lambda > 0.0 && lambda <= 1.0) {
            return Err(Error::Config(format!(
                "forgetting factor {lambda} outside (0, 1]"
            )));
        }
        if !(self.step_size > 0.0 && self.step_size <= 1.0) {
            return Err(Error::Config(format!(
                "step_size {} outside (0, 1]",
                self.step_size
            )));
        }
        if !self.g_min_db.is_finite() {
            return Err(Error::Config("g_min_db must be finite".into()));
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return Err(Error::Config("init_scale must be positive".into()));
        }
        Ok(())
    }

    /// Fully resolved parameters, as recorded in run reports.
    pub fn resolved(&self, channels: usize) -> ResolvedConfig {
        ResolvedConfig {
            channels,
            frame_len: self.frame_len,
            hop: self.hop,
            sample_rate: self.sample_rate,
            window: self.window,
            decimation: self.decimation(),
            ctf_len: self.ctf_len,
            ctf_taps: self.ctf_taps(),
            inverse_filter_len: self.inverse_len(),
            forgetting: self.lambda(),
            step_size: self.step_size,
            g_min_db: self.g_min_db,
            scheme: self.scheme,
            pair_policy: self.pair_policy,
            mode: self.mode,
            reference_channel: self.reference_channel,
            init_scale: self.init_scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedConfig {
    pub channels: usize,
    pub frame_len: usize,
    pub hop: usize,
    pub sample_rate: u32,
    pub window: WindowKind,
    pub decimation: usize,
    pub ctf_len: usize,
    pub ctf_taps: usize,
    pub inverse_filter_len: usize,
    pub forgetting: f64,
    pub step_size: f64,
    pub g_min_db: f64,
    pub scheme: MintScheme,
    pub pair_policy: PairPolicy,
    pub mode: IdentMode,
    pub reference_channel: usize,
    pub init_scale: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipCounts {
    /// Frames whose covariance update hit a vanishing denominator.
    pub identification_breakdowns: u64,
    /// Solves with a vanishing constraint normalizer.
    pub degenerate_solves: u64,
    /// Batch covariances that needed diagonal loading.
    pub batch_regularized: u64,
    /// MINT steps skipped on empty bins.
    pub mint_skipped: u64,
    /// Baseline RLS updates dropped on breakdown.
    pub baseline_breakdowns: u64,
    /// Total adaptive updates attempted.
    pub total_updates: u64,
}

impl SkipCounts {
    pub fn skipped(&self) -> u64 {
        self.identification_breakdowns
            + self.degenerate_solves
            + self.batch_regularized
            + self.mint_skipped
            + self.baseline_breakdowns
    }

    pub fn skipped_fraction(&self) -> f64 {
        if self.total_updates == 0 {
            0.0
        } else {
            self.skipped() as f64 / self.total_updates as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

/// Summed per-bin processing time of each stage, in seconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub analysis: f64,
    pub identification: f64,
    pub inverse_filtering: f64,
    pub synthesis: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: String,
    pub config: serde_json::Value,
    pub frames_processed: usize,
    pub floored_bin_fraction: f64,
    pub skip_counts: SkipCounts,
    pub filter_energy_stats: Option<EnergyStats>,
    pub realtime_factor: Option<f64>,
    pub stage_seconds: Option<StageTiming>,
    pub metrics: Option<serde_json::Value>,
}

impl RunReport {
    /// Drops wall-clock fields so the report is a pure function of the input.
    pub fn without_timing(mut self) -> Self {
        self.realtime_factor = None;
        self.stage_seconds = None;
        self
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Running totals gathered across frames.
#[derive(Debug, Clone, Default)]
struct Tally {
    frames: usize,
    bins_total: u64,
    bins_floored: u64,
    energy_min: f64,
    energy_max: f64,
    energy_sum: f64,
    energy_count: u64,
    skips: SkipCounts,
    ident_secs: f64,
    mint_secs: f64,
}

impl Tally {
    fn new() -> Self {
        Self {
            energy_min: f64::INFINITY,
            energy_max: f64::NEG_INFINITY,
            ..Self::default()
        }
    }
}

enum CtfSource {
    Recursive(Box<RecursiveIdentifier>),
    Fixed(CtfEstimate),
}

/// Per-bin state: tap history, identification, MINT filters.
pub struct BinState {
    history: FrameHistory,
    ctf: CtfSource,
    mint: MintState,
}

struct BinOutput {
    value: Complex64,
    magnitude: f64,
    floored: bool,
    energy: f64,
    ident_breakdown: bool,
    degenerate: bool,
    mint_skipped: u32,
    ident_secs: f64,
    mint_secs: f64,
}

impl BinState {
    fn step(&mut self, coeffs: &[Complex64], p: &StepParams) -> BinOutput {
        self.history.push(coeffs.iter().copied());
        let t0 = Instant::now();
        let mut ident_breakdown = false;
        let mut degenerate = false;
        let estimate = match &mut self.ctf {
            CtfSource::Recursive(ident) => {
                let taps: Vec<Vec<Complex64>> = (0..p.channels)
                    .map(|c| self.history.taps(c, p.ctf_taps, p.decimation))
                    .collect();
                let before = ident.counters();
                ident.update(&taps);
                let after = ident.counters();
                ident_breakdown = after.breakdowns > before.breakdowns;
                degenerate = after.degenerate_solves > before.degenerate_solves;
                ident.estimate()
            }
            CtfSource::Fixed(est) => &*est,
        };
        let a_bar = estimate.magnitudes();
        let t1 = Instant::now();

        let mags: Vec<Vec<f64>> = (0..p.channels)
            .map(|c| self.history.magnitude_taps(c, p.inverse_len, p.decimation))
            .collect();
        let out = self.mint.step(&a_bar, &mags);
        let current: Vec<f64> = coeffs.iter().map(|c| c.norm()).collect();
        let floored = apply_floor(out.estimate, &current, p.g_min_linear);
        let value = reattach_phase(floored.magnitude, coeffs[p.reference_channel]);
        let t2 = Instant::now();

        BinOutput {
            value,
            magnitude: floored.magnitude,
            floored: floored.floored,
            energy: out.filter_energy,
            ident_breakdown,
            degenerate,
            mint_skipped: out.skipped,
            ident_secs: (t1 - t0).as_secs_f64(),
            mint_secs: (t2 - t1).as_secs_f64(),
        }
    }
}

struct StepParams {
    channels: usize,
    ctf_taps: usize,
    inverse_len: usize,
    decimation: usize,
    g_min_linear: f64,
    reference_channel: usize,
    recursive: bool,
    mint_groups: u64,
}

/// Streaming engine for one multichannel input.
pub struct Engine {
    cfg: EngineConfig,
    channels: usize,
    num_bins: usize,
    params: StepParams,
    bins: Vec<BinState>,
    tally: Tally,
    last_magnitudes: Vec<f64>,
}

impl Engine {
    /// Online engine with recursive identification in every bin.
    pub fn new(cfg: EngineConfig, channels: usize) -> Result<Self> {
        Self::build(cfg, channels, None)
    }

    /// Engine whose CTFs are fixed per bin (batch identification).
    pub fn with_fixed_ctfs(
        cfg: EngineConfig,
        channels: usize,
        ctfs: Vec<CtfEstimate>,
    ) -> Result<Self> {
        Self::build(cfg, channels, Some(ctfs))
    }

    fn build(cfg: EngineConfig, channels: usize, fixed: Option<Vec<CtfEstimate>>) -> Result<Self> {
        cfg.validate()?;
        if channels < 2 {
            return Err(Error::TooFewChannels {
                required: 2,
                got: channels,
            });
        }
        if cfg.reference_channel >= channels {
            return Err(Error::Config(format!(
                "reference channel {} out of range for {channels} channels",
                cfg.reference_channel
            )));
        }
        let num_bins = cfg.stft().num_bins();
        let ctf_taps = cfg.ctf_taps();
        let inverse_len = cfg.inverse_len();
        let decimation = cfg.decimation();
        if let Some(f) = &fixed {
            if f.len() != num_bins {
                return Err(Error::BinCountMismatch {
                    got: f.len(),
                    expected: num_bins,
                });
            }
            if f.iter()
                .any(|e| e.channels != channels || e.taps != ctf_taps)
            {
                return Err(Error::Dimension(
                    "fixed CTF shape does not match config".into(),
                ));
            }
        }
        let ident_cfg = IdentConfig {
            channels,
            taps: ctf_taps,
            lambda: cfg.lambda(),
            init_scale: cfg.init_scale,
            pair_policy: cfg.pair_policy,
        };
        let mut fixed = fixed.map(Vec::into_iter);
        let bins = (0..num_bins)
            .map(|_| {
                let ctf = match fixed.as_mut() {
                    Some(it) => CtfSource::Fixed(it.next().expect("length checked")),
                    None => CtfSource::Recursive(Box::new(RecursiveIdentifier::new(ident_cfg))),
                };
                BinState {
                    history: FrameHistory::for_taps(
                        channels,
                        ctf_taps.max(inverse_len),
                        decimation,
                    ),
                    ctf,
                    mint: MintState::new(cfg.scheme, channels, inverse_len, cfg.step_size),
                }
            })
            .collect::<Vec<_>>();
        let mint_groups = bins.first().map_or(1, |b| b.mint.groups().len() as u64);
        let params = StepParams {
            channels,
            ctf_taps,
            inverse_len,
            decimation,
            g_min_linear: cfg.floor().linear(),
            reference_channel: cfg.reference_channel,
            recursive: matches!(bins.first().map(|b| &b.ctf), Some(CtfSource::Recursive(_))),
            mint_groups,
        };
        Ok(Self {
            cfg,
            channels,
            num_bins,
            params,
            bins,
            tally: Tally::new(),
            last_magnitudes: Vec::new(),
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn frames_processed(&self) -> usize {
        self.tally.frames
    }

    /// Current CTF estimate of every bin.
    pub fn ctf_estimates(&self) -> Vec<CtfEstimate> {
        self.bins
            .iter()
            .map(|b| match &b.ctf {
                CtfSource::Recursive(r) => r.estimate().clone(),
                CtfSource::Fixed(e) => e.clone(),
            })
            .collect()
    }

    /// Floored output magnitudes of the last frame, before the phase is
    /// reattached.
    pub fn last_magnitudes(&self) -> &[f64] {
        &self.last_magnitudes
    }

    /// Processes one frame, `frame[channel][bin]`, and returns the output frame.
    pub fn process_frame(&mut self, frame: &[Frame]) -> Result<Frame> {
        if frame.len() != self.channels {
            return Err(Error::Dimension(format!(
                "frame has {} channels, engine expects {}",
                frame.len(),
                self.channels
            )));
        }
        for ch in frame {
            if ch.len() != self.num_bins {
                return Err(Error::BinCountMismatch {
                    got: ch.len(),
                    expected: self.num_bins,
                });
            }
        }
        let params = &self.params;
        let outputs: Vec<BinOutput> = self
            .bins
            .par_iter_mut()
            .enumerate()
            .map(|(k, bin)| {
                let coeffs: Vec<Complex64> = frame.iter().map(|ch| ch[k]).collect();
                bin.step(&coeffs, params)
            })
            .collect();

        let t = &mut self.tally;
        t.frames += 1;
        let mut out = Vec::with_capacity(outputs.len());
        self.last_magnitudes.clear();
        for o in outputs {
            self.last_magnitudes.push(o.magnitude);
            t.bins_total += 1;
            t.bins_floored += o.floored as u64;
            t.energy_min = t.energy_min.min(o.energy);
            t.energy_max = t.energy_max.max(o.energy);
            t.energy_sum += o.energy;
            t.energy_count += 1;
            t.skips.identification_breakdowns += o.ident_breakdown as u64;
            t.skips.degenerate_solves += o.degenerate as u64;
            t.skips.mint_skipped += o.mint_skipped as u64;
            t.skips.total_updates += params.mint_groups + params.recursive as u64;
            t.ident_secs += o.ident_secs;
            t.mint_secs += o.mint_secs;
            out.push(o.value);
        }
        Ok(out)
    }

    /// Report for everything processed so far (timing fields left empty).
    pub fn report(&self) -> RunReport {
        let t = &self.tally;
        if t.bins_total > 0 {
            let frac = t.bins_floored as f64 / t.bins_total as f64;
            if !(0.05..=0.5).contains(&frac) {
                warn!("floored-bin fraction {frac:.3} outside the usual 5%-50% range");
            }
        }
        RunReport {
            method: "smif".into(),
            config: serde_json::to_value(self.cfg.resolved(self.channels))
                .expect("config serializes"),
            frames_processed: t.frames,
            floored_bin_fraction: if t.bins_total == 0 {
                0.0
            } else {
                t.bins_floored as f64 / t.bins_total as f64
            },
            skip_counts: t.skips,
            filter_energy_stats: (t.energy_count > 0).then(|| EnergyStats {
                min: t.energy_min,
                max: t.energy_max,
                mean: t.energy_sum / t.energy_count as f64,
            }),
            realtime_factor: None,
            stage_seconds: Some(StageTiming {
                identification: t.ident_secs,
                inverse_filtering: t.mint_secs,
                ..StageTiming::default()
            }),
            metrics: None,
        }
    }
}

/// Runs the online engine over precomputed spectra.
pub fn process_spectra(cfg: &EngineConfig, spec: &Spectrogram) -> Result<(Vec<Frame>, RunReport)> {
    let mut engine = Engine::new(cfg.clone(), spec.num_channels())?;
    let frames = (0..spec.num_frames())
        .map(|p| engine.process_frame(&spec.frame(p)))
        .collect::<Result<Vec<_>>>()?;
    Ok((frames, engine.report()))
}

/// Batch identification of every bin over all frames of `spec`.
///
/// The accumulated covariance carries the same `I / init_scale` prior the
/// recursion starts from, so the result equals the recursion with `λ = 1`.
/// Bins whose solve fails fall back to the prior solution `g / I`.
pub fn batch_identify_bins(
    cfg: &EngineConfig,
    spec: &Spectrogram,
) -> Result<(Vec<CtfEstimate>, SkipCounts)> {
    let channels = spec.num_channels();
    let taps = cfg.ctf_taps();
    let decimation = cfg.decimation();
    let results: Vec<Result<(CtfEstimate, bool, bool)>> = (0..spec.num_bins)
        .into_par_iter()
        .map(|k| {
            let mut hist = FrameHistory::for_taps(channels, taps, decimation);
            let mut acc =
                BatchAccumulator::new(channels, taps, cfg.pair_policy, 1.0 / cfg.init_scale);
            for p in 0..spec.num_frames() {
                hist.push(spec.channels.iter().map(|c| c[p][k]));
                let t: Vec<Vec<Complex64>> = (0..channels)
                    .map(|c| hist.taps(c, taps, decimation))
                    .collect();
                acc.push(&t)?;
            }
            Ok(match acc.solve() {
                Ok(sol) => (sol.estimate, sol.regularized, false),
                Err(_) => {
                    let g = crate::ctf_ident::constraint_vector(channels, taps);
                    let est = CtfEstimate {
                        coeffs: g
                            .iter()
                            .map(|&v| Complex64::new(v / channels as f64, 0.0))
                            .collect(),
                        channels,
                        taps,
                    };
                    (est, false, true)
                }
            })
        })
        .collect();
    let mut skips = SkipCounts::default();
    let mut ctfs = Vec::with_capacity(results.len());
    for r in results {
        let (est, regularized, failed) = r?;
        skips.batch_regularized += regularized as u64;
        skips.degenerate_solves += failed as u64;
        skips.total_updates += 1;
        ctfs.push(est);
    }
    Ok((ctfs, skips))
}

/// Batch-identification variant over precomputed spectra.
pub fn process_spectra_batch_ident(
    cfg: &EngineConfig,
    spec: &Spectrogram,
) -> Result<(Vec<Frame>, RunReport)> {
    let t0 = Instant::now();
    let (ctfs, batch_skips) = batch_identify_bins(cfg, spec)?;
    let ident_secs = t0.elapsed().as_secs_f64();
    let mut engine = Engine::with_fixed_ctfs(cfg.clone(), spec.num_channels(), ctfs)?;
    let frames = (0..spec.num_frames())
        .map(|p| engine.process_frame(&spec.frame(p)))
        .collect::<Result<Vec<_>>>()?;
    let mut report = engine.report();
    let s = &mut report.skip_counts;
    s.batch_regularized += batch_skips.batch_regularized;
    s.degenerate_solves += batch_skips.degenerate_solves;
    s.total_updates += batch_skips.total_updates;
    if let Some(st) = report.stage_seconds.as_mut() {
        st.identification += ident_secs;
    }
    Ok((frames, report))
}

fn check_channels(samples: &[Vec<f64>]) -> Result<()> {
    if samples.len() < 2 {
        return Err(Error::TooFewChannels {
            required: 2,
            got: samples.len(),
        });
    }
    Ok(())
}

/// Analysis, per-frame processing and synthesis of a whole signal.
///
/// Dispatches on `cfg.mode`. The output has the input's length.
pub fn process_stream(cfg: &EngineConfig, samples: &[Vec<f64>]) -> Result<(Vec<f64>, RunReport)> {
    match cfg.mode {
        IdentMode::Online => run_time_domain(cfg, samples, process_spectra),
        IdentMode::BatchIdent => process_batch_ident(cfg, samples),
    }
}

/// Batch CTF identification followed by adaptive inverse filtering.
pub fn process_batch_ident(
    cfg: &EngineConfig,
    samples: &[Vec<f64>],
) -> Result<(Vec<f64>, RunReport)> {
    run_time_domain(cfg, samples, process_spectra_batch_ident)
}

fn run_time_domain(
    cfg: &EngineConfig,
    samples: &[Vec<f64>],
    body: impl FnOnce(&EngineConfig, &Spectrogram) -> Result<(Vec<Frame>, RunReport)>,
) -> Result<(Vec<f64>, RunReport)> {
    check_channels(samples)?;
    cfg.validate()?;
    let start = Instant::now();
    let stft = Stft::new(cfg.stft())?;
    let spec = stft.analyze(samples)?;
    let t_analysis = start.elapsed().as_secs_f64();
    let (frames, mut report) = body(cfg, &spec)?;
    let t1 = Instant::now();
    let mut out = stft.synthesize(&frames)?;
    out.truncate(samples[0].len());
    let t_synth = t1.elapsed().as_secs_f64();
    let elapsed = start.elapsed().as_secs_f64();
    let duration = samples[0].len() as f64 / cfg.sample_rate as f64;
    if let Some(st) = report.stage_seconds.as_mut() {
        st.analysis = t_analysis;
        st.synthesis = t_synth;
    }
    report.realtime_factor = (duration > 0.0).then(|| elapsed.max(f64::MIN_POSITIVE) / duration);
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_operating_point() {
        let c = EngineConfig::default();
        assert_eq!(c.decimation(), 4);
        assert_eq!(c.ctf_taps(), 4);
        assert_eq!(c.inverse_len(), 4);
        assert!((c.lambda() - 39.0 / 41.0).abs() < 1e-15);
        assert!((c.lambda() - 0.9512).abs() < 1e-4);
        assert_eq!(c.step_size, 0.025);
        assert_eq!(c.g_min_db, -15.0);
        c.validate().unwrap();
    }

    #[test]
    fn rejects_bad_parameters() {
        let bad = [
            EngineConfig {
                step_size: 0.0,
                ..EngineConfig::default()
            },
            EngineConfig {
                forgetting: Some(1.5),
                ..EngineConfig::default()
            },
            EngineConfig {
                ctf_len: 0,
                ..EngineConfig::default()
            },
            EngineConfig {
                hop: 100,
                ..EngineConfig::default()
            },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
        assert!(matches!(
            Engine::new(EngineConfig::default(), 1),
            Err(Error::TooFewChannels { .. })
        ));
        assert!(process_stream(&EngineConfig::default(), &[vec![0.0; 100]]).is_err());
    }

    #[test]
    fn silence_gives_silence() {
        let cfg = EngineConfig::default();
        let mut e = Engine::new(cfg, 2).unwrap();
        let frame = vec![vec![Complex64::default(); 385]; 2];
        for _ in 0..20 {
            let out = e.process_frame(&frame).unwrap();
            assert!(out.iter().all(|c| *c == Complex64::default()));
        }
        let r = e.report();
        assert_eq!(r.frames_processed, 20);
        assert_eq!(r.skip_counts.skipped(), 0);
    }

    #[test]
    fn ctf_taps_round_up() {
        let c = EngineConfig {
            ctf_len: 13,
            ..EngineConfig::default()
        };
        assert_eq!(c.ctf_taps(), 4);
        let c = EngineConfig {
            ctf_len: 17,
            ..EngineConfig::default()
        };
        assert_eq!(c.ctf_taps(), 5);
    }
}
