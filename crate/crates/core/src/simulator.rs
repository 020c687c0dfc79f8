//! Synthetic scenes with known ground truth.
//!
//! Three worlds are available. `ctf-exact` scenes filter the source STFT with
//! sparse critically sampled CTFs, so the cross-relation holds exactly.
//! `magnitude-exact` scenes convolve source magnitudes with nonnegative
//! filters, the world the magnitude inverse filter assumes. `time-domain`
//! scenes convolve a waveform with exponentially decaying noise RIRs and
//! satisfy neither model.

use std::fs;
use std::path::Path;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv::{parse_value, KeyValues};
use crate::stft::{Frame, Spectrogram, Stft, StftConfig};

/// Per-channel taps of one bin: `[channel][tap]`.
pub type CtfStack = Vec<Vec<Complex64>>;
/// One stack per frequency bin.
pub type BinCtfs = Vec<CtfStack>;

/// Direct-path level relative to the reverberant tail energy.
pub const DEFAULT_DRR_DB: f64 = 0.0;
/// Propagation delay of channel 0 and the extra delay per further channel, in samples.
const BASE_DELAY: usize = 16;
const DELAY_STEP: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SceneMode {
    CtfExact,
    MagnitudeExact,
    TimeDomain,
}

impl std::str::FromStr for SceneMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ctf-exact" => Ok(SceneMode::CtfExact),
            "magnitude-exact" => Ok(SceneMode::MagnitudeExact),
            "time-domain" => Ok(SceneMode::TimeDomain),
            other => Err(Error::Scenario(format!("unknown scene mode '{other}'"))),
        }
    }
}

impl std::fmt::Display for SceneMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SceneMode::CtfExact => "ctf-exact",
            SceneMode::MagnitudeExact => "magnitude-exact",
            SceneMode::TimeDomain => "time-domain",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Trajectory {
    Static,
    /// Filters move linearly from a start set to an end set between two frames.
    Linear {
        start_frame: usize,
        end_frame: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub channels: usize,
    pub mode: SceneMode,
    /// Critically sampled CTF length for the CTF-domain modes.
    pub ctf_taps: usize,
    /// Envelope time constant in critically sampled taps. The default 2.1
    /// matches a 0.7 s reverberation time at 48 ms per tap.
    pub decay: f64,
    /// Reverberation time in seconds, time-domain mode.
    pub t60: f64,
    pub duration: f64,
    pub trajectory: Trajectory,
    pub snr_db: Option<f64>,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            channels: 2,
            mode: SceneMode::CtfExact,
            ctf_taps: 4,
            decay: 2.1,
            t60: 0.7,
            duration: 10.0,
            trajectory: Trajectory::Static,
            snr_db: None,
        }
    }
}

const SPEC_KEYS: &[&str] = &[
    "channels",
    "mode",
    "ctf_taps",
    "decay",
    "t60",
    "duration",
    "trajectory",
    "move_start",
    "move_end",
    "snr_db",
];

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        if self.channels < 2 {
            return Err(Error::Scenario(format!(
                "need at least 2 channels, got {}",
                self.channels
            )));
        }
        if self.ctf_taps == 0 {
            return Err(Error::Scenario("ctf_taps must be at least 1".into()));
        }
        if !(self.decay > 0.0 && self.decay.is_finite()) {
            return Err(Error::Scenario(format!(
                "decay must be positive, got {}",
                self.decay
            )));
        }
        if !(self.t60 > 0.0 && self.t60.is_finite()) {
            return Err(Error::Scenario(format!(
                "t60 must be positive, got {}",
                self.t60
            )));
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(Error::Scenario(format!(
                "duration must be positive, got {}",
                self.duration
            )));
        }
        if let Some(snr) = self.snr_db {
            if snr.is_nan() {
                return Err(Error::Scenario("snr_db is NaN".into()));
            }
        }
        if let Trajectory::Linear {
            start_frame,
            end_frame,
        } = self.trajectory
        {
            if start_frame >= end_frame {
                return Err(Error::Scenario(format!(
                    "move_start ({start_frame}) must precede move_end ({end_frame})"
                )));
            }
            if self.mode == SceneMode::TimeDomain {
                return Err(Error::Scenario(
                    "moving sources are only simulated in the CTF-domain modes".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        kv.check_keys(SPEC_KEYS)?;
        let mut s = Self::default();
        if let Some(v) = kv.get("channels") {
            s.channels = parse_value("channels", v)?;
        }
        if let Some(v) = kv.get("mode") {
            s.mode = v.parse()?;
        }
        if let Some(v) = kv.get("ctf_taps") {
            s.ctf_taps = parse_value("ctf_taps", v)?;
        }
        if let Some(v) = kv.get("decay") {
            s.decay = parse_value("decay", v)?;
        }
        if let Some(v) = kv.get("t60") {
            s.t60 = parse_value("t60", v)?;
        }
        if let Some(v) = kv.get("duration") {
            s.duration = parse_value("duration", v)?;
        }
        if let Some(v) = kv.get("snr_db") {
            s.snr_db = match v {
                "inf" | "none" => None,
                _ => Some(parse_value("snr_db", v)?),
            };
        }
        s.trajectory = match kv.get("trajectory").unwrap_or("static") {
            "static" => Trajectory::Static,
            "linear" => {
                let start = kv
                    .get("move_start")
                    .ok_or_else(|| Error::Scenario("linear trajectory needs move_start".into()))?;
                let end = kv
                    .get("move_end")
                    .ok_or_else(|| Error::Scenario("linear trajectory needs move_end".into()))?;
                Trajectory::Linear {
                    start_frame: parse_value("move_start", start)?,
                    end_frame: parse_value("move_end", end)?,
                }
            }
            other => return Err(Error::Scenario(format!("unknown trajectory '{other}'"))),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_kv(&KeyValues::parse(text)?)
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.insert("channels", self.channels);
        kv.insert("mode", self.mode);
        kv.insert("ctf_taps", self.ctf_taps);
        kv.insert("decay", self.decay);
        kv.insert("t60", self.t60);
        kv.insert("duration", self.duration);
        match self.trajectory {
            Trajectory::Static => kv.insert("trajectory", "static"),
            Trajectory::Linear {
                start_frame,
                end_frame,
            } => {
                kv.insert("trajectory", "linear");
                kv.insert("move_start", start_frame);
                kv.insert("move_end", end_frame);
            }
        }
        if let Some(snr) = self.snr_db {
            kv.insert("snr_db", snr);
        }
        kv
    }

    pub fn to_text(&self) -> String {
        self.to_kv().to_text()
    }
}

/// Independent seed for a named sub-stream of one scene seed.
fn subseed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn circular_normal(rng: &mut ChaCha8Rng) -> Complex64 {
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

/// Random CTF stacks for `num_bins` bins: tap `q` is unit-variance circular
/// Gaussian scaled by `e^{-q/decay}`.
pub fn gen_ctf(channels: usize, taps: usize, decay: f64, num_bins: usize, seed: u64) -> BinCtfs {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..num_bins)
        .map(|_| {
            (0..channels)
                .map(|_| {
                    (0..taps)
                        .map(|q| circular_normal(&mut rng) * (-(q as f64) / decay).exp())
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// `x_{i,p} = Σ_q s_{p-Dq} a_{i,q}` for every bin and channel.
pub fn synth_ctf_exact(source: &[Frame], ctfs: &BinCtfs, decimation: usize) -> Result<Spectrogram> {
    let (channels, taps) = stack_shape(ctfs);
    synth_ctf_with(
        source,
        decimation,
        ctfs.len(),
        channels,
        taps,
        |_, k, i, q| ctfs[k][i][q],
    )
}

/// Same as [`synth_ctf_exact`] with filters that follow a schedule.
pub fn synth_ctf_schedule(
    source: &[Frame],
    schedule: &CtfSchedule,
    decimation: usize,
) -> Result<Spectrogram> {
    let (channels, taps) = stack_shape(&schedule.start);
    synth_ctf_with(
        source,
        decimation,
        schedule.start.len(),
        channels,
        taps,
        |p, k, i, q| schedule.tap(p, k, i, q),
    )
}

fn stack_shape(ctfs: &BinCtfs) -> (usize, usize) {
    let channels = ctfs.first().map_or(0, |c| c.len());
    let taps = ctfs.first().and_then(|c| c.first()).map_or(0, |t| t.len());
    (channels, taps)
}

fn synth_ctf_with(
    source: &[Frame],
    decimation: usize,
    num_bins: usize,
    channels: usize,
    taps: usize,
    tap: impl Fn(usize, usize, usize, usize) -> Complex64,
) -> Result<Spectrogram> {
    if let Some(f) = source.iter().find(|f| f.len() != num_bins) {
        return Err(Error::BinCountMismatch {
            got: f.len(),
            expected: num_bins,
        });
    }
    if decimation == 0 {
        return Err(Error::Config("decimation must be positive".into()));
    }
    let out = (0..channels)
        .map(|i| {
            (0..source.len())
                .map(|p| {
                    (0..num_bins)
                        .map(|k| {
                            let mut acc = Complex64::default();
                            for q in 0..taps {
                                let Some(lag) = p.checked_sub(decimation * q) else {
                                    break;
                                };
                                acc += source[lag][k] * tap(p, k, i, q);
                            }
                            acc
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    Ok(Spectrogram {
        channels: out,
        num_bins,
    })
}

/// `|x_{i,p}| = Σ_q |s_{p-Dq}| ā_{i,q}`. `source` is `[frame][bin]`,
/// `ctf_mags` is `[bin][channel][tap]`; the result is `[channel][frame][bin]`.
pub fn synth_magnitude_exact(
    source: &[Vec<f64>],
    ctf_mags: &[Vec<Vec<f64>>],
    decimation: usize,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let num_bins = ctf_mags.len();
    if let Some(f) = source.iter().find(|f| f.len() != num_bins) {
        return Err(Error::BinCountMismatch {
            got: f.len(),
            expected: num_bins,
        });
    }
    let channels = ctf_mags.first().map_or(0, |c| c.len());
    Ok((0..channels)
        .map(|i| {
            (0..source.len())
                .map(|p| {
                    (0..num_bins)
                        .map(|k| {
                            ctf_mags[k][i]
                                .iter()
                                .enumerate()
                                .map_while(|(q, a)| {
                                    p.checked_sub(decimation * q).map(|lag| source[lag][k] * a)
                                })
                                .sum()
                        })
                        .collect()
                })
                .collect()
        })
        .collect())
}

/// Per-frame filters moving linearly from `start` to `end`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CtfSchedule {
    pub start: BinCtfs,
    pub end: BinCtfs,
    pub p_start: usize,
    pub p_end: usize,
}

pub fn make_moving(
    start: BinCtfs,
    end: BinCtfs,
    p_start: usize,
    p_end: usize,
) -> Result<CtfSchedule> {
    if p_start >= p_end {
        return Err(Error::Scenario(format!(
            "move start {p_start} must precede end {p_end}"
        )));
    }
    let shape = |c: &BinCtfs| {
        c.iter()
            .map(|s| s.iter().map(Vec::len).collect::<Vec<_>>())
            .collect::<Vec<_>>()
    };
    if shape(&start) != shape(&end) {
        return Err(Error::Dimension(
            "start and end filters differ in shape".into(),
        ));
    }
    Ok(CtfSchedule {
        start,
        end,
        p_start,
        p_end,
    })
}

impl CtfSchedule {
    /// A schedule that never moves.
    pub fn fixed(ctfs: BinCtfs) -> Self {
        Self {
            end: ctfs.clone(),
            start: ctfs,
            p_start: usize::MAX - 1,
            p_end: usize::MAX,
        }
    }

    /// Interpolation weight of the end filters at frame `p`.
    pub fn alpha(&self, p: usize) -> f64 {
        if p <= self.p_start {
            0.0
        } else if p >= self.p_end {
            1.0
        } else {
            (p - self.p_start) as f64 / (self.p_end - self.p_start) as f64
        }
    }

    pub fn tap(&self, p: usize, k: usize, i: usize, q: usize) -> Complex64 {
        let a = self.alpha(p);
        let s = self.start[k][i][q];
        if a == 0.0 {
            s
        } else if a == 1.0 {
            self.end[k][i][q]
        } else {
            s + (self.end[k][i][q] - s) * a
        }
    }

    pub fn at(&self, p: usize) -> BinCtfs {
        (0..self.start.len())
            .map(|k| {
                (0..self.start[k].len())
                    .map(|i| {
                        (0..self.start[k][i].len())
                            .map(|q| self.tap(p, k, i, q))
                            .collect()
                    })
                    .collect()
            })
            .collect()
    }

    /// Stacked true CTF of bin `k` at frame `p`, in estimator layout.
    pub fn stacked(&self, p: usize, k: usize) -> Vec<Complex64> {
        (0..self.start[k].len())
            .flat_map(|i| (0..self.start[k][i].len()).map(move |q| (i, q)))
            .map(|(i, q)| self.tap(p, k, i, q))
            .collect()
    }
}

/// Exponentially decaying white-noise RIR.
///
/// Unit direct path at `direct_delay`, tail amplitude decaying by 60 dB over
/// `t60` seconds, tail energy set by [`DEFAULT_DRR_DB`].
pub fn gen_rir(
    t60: f64,
    fs: u32,
    length: usize,
    direct_delay: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if !(t60 > 0.0 && t60.is_finite()) {
        return Err(Error::Scenario(format!("t60 must be positive, got {t60}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rate = 3.0 * std::f64::consts::LN_10 / (t60 * fs as f64);
    // Σ_m e^{-2 rate m} for the infinite tail.
    let tail_energy = 1.0 / (1.0 - (-2.0 * rate).exp());
    let level = (10f64.powf(-DEFAULT_DRR_DB / 10.0) / tail_energy).sqrt();
    let mut h = vec![0.0; length];
    if direct_delay < length {
        h[direct_delay] = 1.0;
    }
    for (m, v) in h.iter_mut().skip(direct_delay + 1).enumerate() {
        let n: f64 = StandardNormal.sample(&mut rng);
        *v = level * n * (-rate * (m + 1) as f64).exp();
    }
    Ok(h)
}

/// Full linear convolution, length `signal + rir - 1`.
pub fn time_domain_convolve(signal: &[f64], rir: &[f64]) -> Vec<f64> {
    if signal.is_empty() || rir.is_empty() {
        return Vec::new();
    }
    let out_len = signal.len() + rir.len() - 1;
    if signal.len().min(rir.len()) <= 64 {
        let mut out = vec![0.0; out_len];
        for (i, &s) in signal.iter().enumerate() {
            for (j, &h) in rir.iter().enumerate() {
                out[i + j] += s * h;
            }
        }
        return out;
    }
    let n = out_len.next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let lift = |x: &[f64]| {
        let mut b = vec![Complex64::default(); n];
        for (d, &v) in b.iter_mut().zip(x) {
            d.re = v;
        }
        b
    };
    let mut a = lift(signal);
    let mut b = lift(rir);
    fwd.process(&mut a);
    fwd.process(&mut b);
    for (x, y) in a.iter_mut().zip(&b) {
        *x *= y;
    }
    inv.process(&mut a);
    a[..out_len].iter().map(|c| c.re / n as f64).collect()
}

/// Active region: first to last nonzero sample.
fn active_range(x: &[f64]) -> std::ops::Range<usize> {
    match (
        x.iter().position(|&v| v != 0.0),
        x.iter().rposition(|&v| v != 0.0),
    ) {
        (Some(a), Some(b)) => a..b + 1,
        _ => 0..0,
    }
}

/// Adds white Gaussian noise to every channel, scaled per channel so that
/// the realized SNR over the channel's active region is exactly `snr_db`.
/// `+inf` passes the signals through.
pub fn add_noise(signals: &mut [Vec<f64>], snr_db: f64, seed: u64) -> Result<()> {
    if snr_db.is_nan() || snr_db == f64::NEG_INFINITY {
        return Err(Error::Scenario(format!("invalid SNR {snr_db}")));
    }
    if snr_db == f64::INFINITY {
        return Ok(());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (c, x) in signals.iter_mut().enumerate() {
        let r = active_range(x);
        if r.is_empty() {
            return Err(Error::Scenario(format!("channel {c} has zero power")));
        }
        let sig = x[r.clone()].iter().map(|v| v * v).sum::<f64>() / r.len() as f64;
        let noise: Vec<f64> = (0..r.len())
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let np = noise.iter().map(|v| v * v).sum::<f64>() / r.len() as f64;
        let g = (sig / np / 10f64.powf(snr_db / 10.0)).sqrt();
        for (v, n) in x[r].iter_mut().zip(noise) {
            *v += g * n;
        }
    }
    Ok(())
}

/// Spectral counterpart of [`add_noise`]: circular Gaussian noise per channel
/// with the realized SNR over all frames and bins set exactly.
pub fn add_spectral_noise(spec: &mut Spectrogram, snr_db: f64, seed: u64) -> Result<()> {
    if snr_db.is_nan() || snr_db == f64::NEG_INFINITY {
        return Err(Error::Scenario(format!("invalid SNR {snr_db}")));
    }
    if snr_db == f64::INFINITY {
        return Ok(());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (c, ch) in spec.channels.iter_mut().enumerate() {
        let sig: f64 = ch.iter().flatten().map(|v| v.norm_sqr()).sum();
        if sig == 0.0 {
            return Err(Error::Scenario(format!("channel {c} has zero power")));
        }
        let noise: Vec<Complex64> = ch
            .iter()
            .flatten()
            .map(|_| circular_normal(&mut rng))
            .collect();
        let np: f64 = noise.iter().map(|v| v.norm_sqr()).sum();
        let g = (sig / np / 10f64.powf(snr_db / 10.0)).sqrt();
        for (v, n) in ch.iter_mut().flatten().zip(noise) {
            *v += n * g;
        }
    }
    Ok(())
}

/// Amplitude-modulated, mildly low-passed Gaussian noise with syllable-rate
/// (4 Hz) energy bursts of random height.
pub fn speech_like_source(len: usize, fs: u32, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let syllable = (fs as f64 / 4.0).max(1.0);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut prev = 0.0;
    let mut amp = 0.0;
    let mut out = Vec::with_capacity(len);
    for n in 0..len {
        let phase = n as f64 / syllable;
        if n == 0 || phase.floor() != ((n - 1) as f64 / syllable).floor() {
            amp = rng.random_range(0.3..1.0);
        }
        let env = 0.02 + amp * (std::f64::consts::PI * phase.fract()).sin().powi(2);
        let w: f64 = normal.sample(&mut rng);
        out.push(0.1 * env * (w + 0.6 * prev));
        prev = w;
    }
    out
}

/// True filters behind a CTF-domain scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CtfTruth {
    pub schedule: CtfSchedule,
    /// Magnitude-exact scenes use `|a|` of these taps.
    pub magnitude_only: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub source_spectra: Vec<Frame>,
    /// Source filtered by the first tap of channel 0 (or the direct part of
    /// its RIR in time-domain scenes).
    pub reference_spectra: Vec<Frame>,
    pub reference: Vec<f64>,
    pub ctfs: Option<CtfTruth>,
    pub rirs: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub spec: ScenarioSpec,
    pub seed: u64,
    pub stft: StftConfig,
    pub source: Vec<f64>,
    /// Microphone waveforms.
    pub mics: Vec<Vec<f64>>,
    /// Microphone spectra in the model domain. For CTF-domain scenes these
    /// satisfy the model exactly, unlike a re-analysis of `mics`.
    pub mic_spectra: Spectrogram,
    pub truth: GroundTruth,
}

pub fn generate_scene(spec: &ScenarioSpec, stft_cfg: &StftConfig, seed: u64) -> Result<Scene> {
    spec.validate()?;
    stft_cfg.validate()?;
    let stft = Stft::new(*stft_cfg)?;
    let fs = stft_cfg.sample_rate;
    let len = (spec.duration * fs as f64).round() as usize;
    let source = speech_like_source(len, fs, subseed(seed, 1));
    let source_spectra = stft.analyze_channel(&source);
    let num_bins = stft_cfg.num_bins();
    let d = stft_cfg.decimation();

    let synth = |spectra: &[Frame]| -> Result<Vec<f64>> {
        let mut y = stft.synthesize(spectra)?;
        y.truncate(len);
        Ok(y)
    };

    match spec.mode {
        SceneMode::CtfExact | SceneMode::MagnitudeExact => {
            let start = gen_ctf(
                spec.channels,
                spec.ctf_taps,
                spec.decay,
                num_bins,
                subseed(seed, 2),
            );
            let schedule = match spec.trajectory {
                Trajectory::Static => CtfSchedule::fixed(start),
                Trajectory::Linear {
                    start_frame,
                    end_frame,
                } => {
                    let end = gen_ctf(
                        spec.channels,
                        spec.ctf_taps,
                        spec.decay,
                        num_bins,
                        subseed(seed, 3),
                    );
                    make_moving(start, end, start_frame, end_frame)?
                }
            };
            let magnitude_only = spec.mode == SceneMode::MagnitudeExact;
            let (mic_spectra, reference_spectra) = if magnitude_only {
                let mags: Vec<Vec<f64>> = source_spectra
                    .iter()
                    .map(|f| f.iter().map(|v| v.norm()).collect())
                    .collect();
                let mut mic = synth_magnitude_schedule(&mags, &schedule, d);
                if let Some(snr) = spec.snr_db {
                    add_spectral_noise(&mut mic, snr, subseed(seed, 4))?;
                    for v in mic.channels.iter_mut().flatten().flatten() {
                        *v = Complex64::new(v.norm(), 0.0);
                    }
                }
                let reference: Vec<Frame> = mags
                    .iter()
                    .enumerate()
                    .map(|(p, f)| {
                        f.iter()
                            .enumerate()
                            .map(|(k, m)| Complex64::new(m * schedule.tap(p, k, 0, 0).norm(), 0.0))
                            .collect()
                    })
                    .collect();
                (mic, reference)
            } else {
                let mut mic = synth_ctf_schedule(&source_spectra, &schedule, d)?;
                if let Some(snr) = spec.snr_db {
                    add_spectral_noise(&mut mic, snr, subseed(seed, 4))?;
                }
                let reference: Vec<Frame> = source_spectra
                    .iter()
                    .enumerate()
                    .map(|(p, f)| {
                        f.iter()
                            .enumerate()
                            .map(|(k, s)| s * schedule.tap(p, k, 0, 0))
                            .collect()
                    })
                    .collect();
                (mic, reference)
            };
            let mics = mic_spectra
                .channels
                .iter()
                .map(|c| synth(c))
                .collect::<Result<Vec<_>>>()?;
            let reference = synth(&reference_spectra)?;
            Ok(Scene {
                spec: spec.clone(),
                seed,
                stft: *stft_cfg,
                source,
                mics,
                mic_spectra,
                truth: GroundTruth {
                    source_spectra,
                    reference_spectra,
                    reference,
                    ctfs: Some(CtfTruth {
                        schedule,
                        magnitude_only,
                    }),
                    rirs: None,
                },
            })
        }
        SceneMode::TimeDomain => {
            let rir_len =
                (spec.t60 * fs as f64).ceil() as usize + BASE_DELAY + DELAY_STEP * spec.channels;
            let rirs = (0..spec.channels)
                .map(|i| {
                    gen_rir(
                        spec.t60,
                        fs,
                        rir_len,
                        BASE_DELAY + DELAY_STEP * i,
                        subseed(seed, 10 + i as u64),
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let mut mics: Vec<Vec<f64>> = rirs
                .iter()
                .map(|h| {
                    let mut y = time_domain_convolve(&source, h);
                    y.truncate(len);
                    y
                })
                .collect();
            if let Some(snr) = spec.snr_db {
                add_noise(&mut mics, snr, subseed(seed, 4))?;
            }
            // The first critically sampled tap spans one frame past the direct path.
            let early_end = (BASE_DELAY + stft_cfg.frame_len).min(rirs[0].len());
            let mut reference = time_domain_convolve(&source, &rirs[0][..early_end]);
            reference.truncate(len);
            let mic_spectra = stft.analyze(&mics)?;
            let reference_spectra = stft.analyze_channel(&reference);
            Ok(Scene {
                spec: spec.clone(),
                seed,
                stft: *stft_cfg,
                source,
                mics,
                mic_spectra,
                truth: GroundTruth {
                    source_spectra,
                    reference_spectra,
                    reference,
                    ctfs: None,
                    rirs: Some(rirs),
                },
            })
        }
    }
}

/// Magnitude-exact synthesis with taps `|a(p)|` of a complex schedule.
fn synth_magnitude_schedule(mags: &[Vec<f64>], schedule: &CtfSchedule, d: usize) -> Spectrogram {
    let (channels, taps) = stack_shape(&schedule.start);
    let num_bins = schedule.start.len();
    let out = (0..channels)
        .map(|i| {
            (0..mags.len())
                .map(|p| {
                    (0..num_bins)
                        .map(|k| {
                            let mut acc = 0.0;
                            for q in 0..taps {
                                let Some(lag) = p.checked_sub(d * q) else {
                                    break;
                                };
                                acc += mags[lag][k] * schedule.tap(p, k, i, q).norm();
                            }
                            Complex64::new(acc, 0.0)
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    Spectrogram {
        channels: out,
        num_bins,
    }
}

pub const MICS_WAV: &str = "mics.wav";
pub const SOURCE_WAV: &str = "source.wav";
pub const REFERENCE_WAV: &str = "reference.wav";
pub const TRUTH_JSON: &str = "truth.json";
pub const SPEC_TXT: &str = "scenario.txt";

/// Ground-truth sidecar written next to the scene audio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub seed: u64,
    pub spec: ScenarioSpec,
    pub stft: StftConfig,
    pub mics: String,
    pub source: String,
    pub reference: String,
    pub ctfs: Option<CtfTruth>,
}

/// A scene read back from disk.
#[derive(Debug, Clone)]
pub struct LoadedScene {
    pub sidecar: Sidecar,
    pub mics: Vec<Vec<f64>>,
    pub source: Vec<f64>,
    pub reference: Vec<f64>,
}

impl Scene {
    pub fn sidecar(&self) -> Sidecar {
        Sidecar {
            seed: self.seed,
            spec: self.spec.clone(),
            stft: self.stft,
            mics: MICS_WAV.into(),
            source: SOURCE_WAV.into(),
            reference: REFERENCE_WAV.into(),
            ctfs: self.truth.ctfs.clone(),
        }
    }

    /// Writes the microphone, source and reference WAVs, the sidecar and the spec.
    pub fn export(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let fs_ = self.stft.sample_rate;
        crate::wav::write_wav(dir.join(MICS_WAV), &self.mics, fs_)?;
        crate::wav::write_wav(
            dir.join(SOURCE_WAV),
            std::slice::from_ref(&self.source),
            fs_,
        )?;
        crate::wav::write_wav(
            dir.join(REFERENCE_WAV),
            std::slice::from_ref(&self.truth.reference),
            fs_,
        )?;
        fs::write(
            dir.join(TRUTH_JSON),
            serde_json::to_string(&self.sidecar())?,
        )?;
        fs::write(dir.join(SPEC_TXT), self.spec.to_text())?;
        Ok(())
    }
}

pub fn load_scene(dir: impl AsRef<Path>) -> Result<LoadedScene> {
    let dir = dir.as_ref();
    let truth = dir.join(TRUTH_JSON);
    if !truth.is_file() {
        return Err(Error::Scenario(format!(
            "no ground-truth sidecar {} in {}",
            TRUTH_JSON,
            dir.display()
        )));
    }
    let sidecar: Sidecar = serde_json::from_str(&fs::read_to_string(&truth)?)?;
    let rate = sidecar.stft.sample_rate;
    let mono = |name: &str| -> Result<Vec<f64>> {
        let mut a = crate::wav::read_wav_at(dir.join(name), rate)?;
        if a.channels.len() != 1 {
            return Err(Error::Scenario(format!("{name} should be mono")));
        }
        Ok(a.channels.remove(0))
    };
    let mics = crate::wav::read_wav_at(dir.join(&sidecar.mics), rate)?.channels;
    let source = mono(&sidecar.source)?;
    let reference = mono(&sidecar.reference)?;
    Ok(LoadedScene {
        sidecar,
        mics,
        source,
        reference,
    })
}
