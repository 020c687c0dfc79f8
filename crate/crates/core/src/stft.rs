//! Oversampled STFT analysis and least-squares overlap-add synthesis.
//!
//! Frame `p` covers samples `[pL - (N - L), pL + L)` of the input, i.e. the
//! signal is preceded by `N - L` zeros of history so that the first frame
//! already ends one hop into the signal. A signal of `len` samples yields
//! `ceil(len / L)` frames of `N/2 + 1` bins.
//!
//! Synthesis divides the windowed overlap-add by the per-sample sum of
//! squared analysis taps, which is the least-squares inverse of the analysis
//! operator. It reconstructs exactly for any hop at which the squared window
//! sum stays positive, Hamming at 75% overlap included.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One STFT frame: `N/2 + 1` complex bins.
pub type Frame = Vec<Complex64>;

/// Lowest synthesis normalizer, relative to the fully overlapped minimum.
const EDGE_NORM_FLOOR: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowKind {
    Hamming,
    Hann,
    Sine,
}

impl WindowKind {
    /// Periodic window taps of length `n`.
    pub fn taps(self, n: usize) -> Vec<f64> {
        let nf = n as f64;
        (0..n)
            .map(|i| {
                let x = i as f64;
                match self {
                    WindowKind::Hamming => 0.54 - 0.46 * (2.0 * PI * x / nf).cos(),
                    WindowKind::Hann => 0.5 - 0.5 * (2.0 * PI * x / nf).cos(),
                    WindowKind::Sine => (PI * (x + 0.5) / nf).sin(),
                }
            })
            .collect()
    }
}

impl std::str::FromStr for WindowKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hamming" => Ok(WindowKind::Hamming),
            "hann" | "hanning" => Ok(WindowKind::Hann),
            "sine" => Ok(WindowKind::Sine),
            other => Err(Error::Config(format!("unknown window '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StftConfig {
    pub frame_len: usize,
    pub hop: usize,
    pub sample_rate: u32,
    pub window: WindowKind,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            frame_len: 768,
            hop: 192,
            sample_rate: 16_000,
            window: WindowKind::Hamming,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frame_len < 2 || self.frame_len % 2 != 0 {
            return Err(Error::Config(format!(
                "frame length must be even and >= 2, got {}",
                self.frame_len
            )));
        }
        if self.hop == 0 || self.frame_len % self.hop != 0 {
            return Err(Error::Config(format!(
                "frame length {} is not divisible by hop {}",
                self.frame_len, self.hop
            )));
        }
        if self.sample_rate == 0 {
            return Err(Error::Config("sample rate must be positive".into()));
        }
        Ok(())
    }

    /// Oversampling factor `D = N / L`, the tap spacing (in frames) of
    /// critically sampled filters.
    pub fn decimation(&self) -> usize {
        self.frame_len / self.hop
    }

    pub fn num_bins(&self) -> usize {
        self.frame_len / 2 + 1
    }

    pub fn num_frames(&self, len: usize) -> usize {
        len.div_ceil(self.hop)
    }
}

/// Multichannel STFT coefficients, indexed `[channel][frame][bin]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub channels: Vec<Vec<Frame>>,
    pub num_bins: usize,
}

impl Spectrogram {
    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn num_frames(&self) -> usize {
        self.channels.first().map_or(0, Vec::len)
    }

    /// All channels' coefficients at frame `p`, `[channel][bin]`.
    pub fn frame(&self, p: usize) -> Vec<Frame> {
        self.channels.iter().map(|c| c[p].clone()).collect()
    }
}

/// Planned STFT for one configuration.
#[derive(Clone)]
pub struct Stft {
    cfg: StftConfig,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Stft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Stft").field("cfg", &self.cfg).finish()
    }
}

impl Stft {
    pub fn new(cfg: StftConfig) -> Result<Self> {
        cfg.validate()?;
        let mut planner = FftPlanner::new();
        Ok(Self {
            window: cfg.window.taps(cfg.frame_len),
            forward: planner.plan_fft_forward(cfg.frame_len),
            inverse: planner.plan_fft_inverse(cfg.frame_len),
            cfg,
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.cfg
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    /// Analyzes every channel; all channels must have equal length.
    pub fn analyze(&self, signal: &[Vec<f64>]) -> Result<Spectrogram> {
        let expected = signal.first().map_or(0, Vec::len);
        for (channel, x) in signal.iter().enumerate() {
            if x.len() != expected {
                return Err(Error::ChannelLengthMismatch {
                    channel,
                    len: x.len(),
                    expected,
                });
            }
        }
        let channels = signal.par_iter().map(|x| self.analyze_channel(x)).collect();
        Ok(Spectrogram {
            channels,
            num_bins: self.cfg.num_bins(),
        })
    }

    pub fn analyze_channel(&self, x: &[f64]) -> Vec<Frame> {
        let n = self.cfg.frame_len;
        let hop = self.cfg.hop;
        let lead = n - hop;
        let bins = self.cfg.num_bins();
        let frames = self.cfg.num_frames(x.len());

        let mut buf = vec![Complex64::default(); n];
        let mut scratch = vec![Complex64::default(); self.forward.get_inplace_scratch_len()];
        let mut out = Vec::with_capacity(frames);
        for p in 0..frames {
            for (k, slot) in buf.iter_mut().enumerate() {
                // Signal index of tap k; negative means zero history.
                let t = (p * hop + k) as isize - lead as isize;
                let v = if t >= 0 && (t as usize) < x.len() {
                    x[t as usize] * self.window[k]
                } else {
                    0.0
                };
                *slot = Complex64::new(v, 0.0);
            }
            self.forward.process_with_scratch(&mut buf, &mut scratch);
            let mut frame: Frame = buf[..bins].to_vec();
            frame[0].im = 0.0;
            frame[bins - 1].im = 0.0;
            out.push(frame);
        }
        out
    }

    /// Least-squares overlap-add inverse of [`Stft::analyze_channel`].
    ///
    /// Returns `frames.len() * L` samples; samples only partially covered by
    /// frames at the very start and end are not exact and are attenuated
    /// where the window overlap is weak.
    pub fn synthesize(&self, frames: &[Frame]) -> Result<Vec<f64>> {
        let n = self.cfg.frame_len;
        let hop = self.cfg.hop;
        let lead = n - hop;
        let bins = self.cfg.num_bins();
        for f in frames {
            if f.len() != bins {
                return Err(Error::BinCountMismatch {
                    got: f.len(),
                    expected: bins,
                });
            }
        }
        if frames.is_empty() {
            return Ok(Vec::new());
        }

        let padded_len = (frames.len() - 1) * hop + n;
        let mut acc = vec![0.0; padded_len];
        let mut norm = vec![0.0; padded_len];
        let mut buf = vec![Complex64::default(); n];
        let mut scratch = vec![Complex64::default(); self.inverse.get_inplace_scratch_len()];
        let scale = 1.0 / n as f64;

        for (p, frame) in frames.iter().enumerate() {
            buf[0] = Complex64::new(frame[0].re, 0.0);
            buf[n / 2] = Complex64::new(frame[bins - 1].re, 0.0);
            for k in 1..n / 2 {
                buf[k] = frame[k];
                buf[n - k] = frame[k].conj();
            }
            self.inverse.process_with_scratch(&mut buf, &mut scratch);
            let base = p * hop;
            for (k, v) in buf.iter().enumerate() {
                let w = self.window[k];
                acc[base + k] += w * v.re * scale;
                norm[base + k] += w * w;
            }
        }

        // Edge samples covered only by window tails get a floored normalizer,
        // so inconsistent spectra fade out there instead of being amplified.
        let steady = (0..hop)
            .map(|r| {
                self.window[r..]
                    .iter()
                    .step_by(hop)
                    .map(|w| w * w)
                    .sum::<f64>()
            })
            .fold(f64::INFINITY, f64::min);
        let floor = EDGE_NORM_FLOOR * steady;
        Ok(acc[lead..]
            .iter()
            .zip(&norm[lead..])
            .take(frames.len() * hop)
            .map(|(&a, &w)| if w > 0.0 { a / w.max(floor) } else { 0.0 })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn stft() -> Stft {
        Stft::new(StftConfig::default()).unwrap()
    }

    #[test]
    fn dc_signal_concentrates_in_bin_zero() {
        let s = stft();
        let x = vec![vec![1.0; 16_000]];
        let spec = s.analyze(&x).unwrap();
        let wsum: f64 = s.window().iter().sum();
        // Frames fully inside the signal.
        for frame in &spec.channels[0][4..80] {
            assert!((frame[0].re - wsum).abs() < 1e-9 * wsum);
            // Periodic Hamming is a two-term cosine: leakage only reaches bin 1.
            for c in &frame[2..] {
                assert!(c.norm() < 1e-9 * wsum);
            }
        }
    }

    #[test]
    fn frame_and_bin_counts() {
        let s = stft();
        let spec = s.analyze(&[vec![0.0; 16_000]]).unwrap();
        assert_eq!(spec.num_frames(), 16_000usize.div_ceil(192));
        assert_eq!(spec.num_frames(), 84);
        assert_eq!(spec.num_bins, 385);
        assert_eq!(spec.channels[0][0].len(), 385);
    }

    #[test]
    fn impulse_lights_up_exactly_d_frames() {
        let s = stft();
        let mut x = vec![0.0; 4000];
        x[384] = 1.0;
        let spec = s.analyze(&[x]).unwrap();
        let active: Vec<usize> = spec.channels[0]
            .iter()
            .enumerate()
            .filter(|(_, f)| f.iter().map(|c| c.norm_sqr()).sum::<f64>() > 0.0)
            .map(|(p, _)| p)
            .collect();
        assert_eq!(active, vec![2, 3, 4, 5]);
    }

    #[test]
    fn rejects_bad_config_and_ragged_channels() {
        let cfg = StftConfig {
            hop: 100,
            ..StftConfig::default()
        };
        assert!(matches!(Stft::new(cfg), Err(Error::Config(_))));
        let s = stft();
        let err = s.analyze(&[vec![0.0; 10], vec![0.0; 11]]).unwrap_err();
        assert!(matches!(
            err,
            Error::ChannelLengthMismatch { channel: 1, .. }
        ));
        let err = s.synthesize(&[vec![Complex64::default(); 10]]).unwrap_err();
        assert!(matches!(err, Error::BinCountMismatch { .. }));
    }

    #[test]
    fn zero_spectra_give_zero_samples() {
        let s = stft();
        let frames = vec![vec![Complex64::default(); 385]; 20];
        let y = s.synthesize(&frames).unwrap();
        assert_eq!(y.len(), 20 * 192);
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn round_trip_is_exact_away_from_edges() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..8000).map(|_| rng.random_range(-1.0..1.0)).collect();
        for window in [WindowKind::Hamming, WindowKind::Hann, WindowKind::Sine] {
            let s = Stft::new(StftConfig {
                window,
                ..StftConfig::default()
            })
            .unwrap();
            let spec = s.analyze(&[x.clone()]).unwrap();
            let y = s.synthesize(&spec.channels[0]).unwrap();
            for t in 768..x.len() - 768 {
                assert!((x[t] - y[t]).abs() < 1e-10, "{window:?} t={t}");
            }
        }
    }

    #[test]
    fn inconsistent_spectra_stay_bounded_at_edges() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for window in [WindowKind::Hamming, WindowKind::Hann, WindowKind::Sine] {
            let s = Stft::new(StftConfig {
                window,
                ..StftConfig::default()
            })
            .unwrap();
            let frames: Vec<Frame> = (0..30)
                .map(|_| {
                    (0..385)
                        .map(|_| {
                            Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
                        })
                        .collect()
                })
                .collect();
            let y = s.synthesize(&frames).unwrap();
            let interior = y[768..y.len() - 768]
                .iter()
                .fold(0.0f64, |m, v| m.max(v.abs()));
            let edges = y[..768]
                .iter()
                .chain(&y[y.len() - 768..])
                .fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(
                edges < 10.0 * interior,
                "{window:?}: edge {edges} interior {interior}"
            );
        }
    }

    #[test]
    fn modified_frame_changes_only_its_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..8000).map(|_| rng.random_range(-1.0..1.0)).collect();
        let s = stft();
        let mut frames = s.analyze_channel(&x);
        let base = s.synthesize(&frames).unwrap();
        let p = 20;
        for c in frames[p].iter_mut() {
            *c *= 3.0;
        }
        let changed = s.synthesize(&frames).unwrap();
        let support = (p * 192 - 576)..(p * 192 + 192);
        for t in 0..x.len() {
            if !support.contains(&t) {
                assert_eq!(base[t], changed[t], "t={t}");
            }
        }
        assert!(support.clone().any(|t| (base[t] - changed[t]).abs() > 1e-6));
    }
}
