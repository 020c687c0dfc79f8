//! Adaptive weighted prediction error (AWPE) dereverberation, the comparison
//! baseline.
//!
//! Per bin, a delayed multichannel linear predictor estimates the late
//! reverberation of the target channel from frames `p-Δ .. p-Δ-K+1` and
//! subtracts it. The predictor is tracked by RLS on variance-normalized data,
//! with the variance approximated by the instantaneous target power.

use std::time::Instant;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ctf_ident::DEFAULT_INIT_SCALE;
use crate::error::{Error, Result};
use crate::history::FrameHistory;
use crate::pipeline::{EnergyStats, RunReport, SkipCounts, StageTiming};
use crate::stft::{Frame, Spectrogram, Stft, StftConfig, WindowKind};

const RESYMMETRIZE_EVERY: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AwpeConfig {
    pub frame_len: usize,
    pub hop: usize,
    pub sample_rate: u32,
    pub window: WindowKind,
    /// Prediction taps per channel; 16 up to four channels, 8 above when unset.
    pub filter_len: Option<usize>,
    pub prediction_delay: usize,
    /// 0.97 up to four channels, 0.985 above when unset.
    pub forgetting: Option<f64>,
    pub target_channel: usize,
    /// Variance floor relative to the bin's running mean target power.
    pub variance_floor: f64,
    pub init_scale: f64,
}

impl Default for AwpeConfig {
    fn default() -> Self {
        Self {
            frame_len: 512,
            hop: 128,
            sample_rate: 16_000,
            window: WindowKind::Hann,
            filter_len: None,
            prediction_delay: 6,
            forgetting: None,
            target_channel: 0,
            variance_floor: 1e-10,
            init_scale: DEFAULT_INIT_SCALE,
        }
    }
}

/// Filter length and forgetting factor after channel-count defaults.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AwpeResolved {
    pub channels: usize,
    pub filter_len: usize,
    pub forgetting: f64,
}

impl AwpeConfig {
    pub fn stft(&self) -> StftConfig {
        StftConfig {
            frame_len: self.frame_len,
            hop: self.hop,
            sample_rate: self.sample_rate,
            window: self.window,
        }
    }

    pub fn resolve(&self, channels: usize) -> AwpeResolved {
        let many = channels > 4;
        AwpeResolved {
            channels,
            filter_len: self.filter_len.unwrap_or(if many { 8 } else { 16 }),
            forgetting: self.forgetting.unwrap_or(if many { 0.985 } else { 0.97 }),
        }
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        self.stft().validate()?;
        if self.prediction_delay == 0 {
            return Err(Error::Config("prediction_delay must be at least 1".into()));
        }
        let r = self.resolve(channels);
        if !(r.forgetting > 0.0 && r.forgetting <= 1.0) {
            return Err(Error::Config(format!(
                "forgetting must be in (0, 1], got {}",
                r.forgetting
            )));
        }
        if self.target_channel >= channels {
            return Err(Error::Config(format!(
                "target channel {} out of range for {channels} channels",
                self.target_channel
            )));
        }
        if !(self.variance_floor >= 0.0 && self.variance_floor.is_finite()) {
            return Err(Error::Config(
                "variance_floor must be finite and nonnegative".into(),
            ));
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return Err(Error::Config("init_scale must be positive".into()));
        }
        Ok(())
    }
}

/// RLS state of one bin.
#[derive(Debug, Clone)]
pub struct AwpeBinState {
    history: FrameHistory,
    /// Prediction filter, stacked channel-major.
    pub w: Vec<Complex64>,
    /// Inverse weighted correlation, row-major.
    p: Vec<Complex64>,
    dim: usize,
    power_sum: f64,
    frames: usize,
    breakdowns: u64,
}

impl AwpeBinState {
    pub fn new(channels: usize, filter_len: usize, delay: usize, init_scale: f64) -> Self {
        let dim = channels * filter_len;
        let mut p = vec![Complex64::default(); dim * dim];
        for d in 0..dim {
            p[d * dim + d] = Complex64::new(init_scale, 0.0);
        }
        Self {
            history: FrameHistory::for_taps(channels, delay + filter_len.max(1), 1),
            w: vec![Complex64::default(); dim],
            p,
            dim,
            power_sum: 0.0,
            frames: 0,
            breakdowns: 0,
        }
    }

    pub fn breakdowns(&self) -> u64 {
        self.breakdowns
    }

    /// One frame: predicts with the current filter, then updates it.
    fn step(&mut self, x: &[Complex64], cfg: &AwpeConfig, res: &AwpeResolved) -> Complex64 {
        let target = x[cfg.target_channel];
        self.history.push(x.iter().copied());
        self.frames += 1;
        if self.dim == 0 {
            return target;
        }
        let k_len = res.filter_len;
        let stack: Vec<Complex64> = (0..res.channels)
            .flat_map(|c| (0..k_len).map(move |l| (c, l)))
            .map(|(c, l)| self.history.get(c, cfg.prediction_delay + l))
            .collect();
        let predicted: Complex64 = self.w.iter().zip(&stack).map(|(w, v)| w.conj() * v).sum();
        let e = target - predicted;

        let power = target.norm_sqr();
        self.power_sum += power;
        if stack.iter().all(|v| *v == Complex64::default()) {
            return e;
        }
        let floor = cfg.variance_floor * self.power_sum / self.frames as f64;
        let sigma2 = power.max(floor).max(f64::MIN_POSITIVE);
        let lambda = res.forgetting;
        let n = self.dim;
        let px: Vec<Complex64> = (0..n)
            .map(|r| (0..n).map(|c| self.p[r * n + c] * stack[c]).sum())
            .collect();
        let quad: Complex64 = stack.iter().zip(&px).map(|(v, q)| v.conj() * q).sum();
        let den = lambda * sigma2 + quad.re;
        let gain: Vec<Complex64> = px.iter().map(|v| v / den).collect();
        let new_w: Vec<Complex64> = self
            .w
            .iter()
            .zip(&gain)
            .map(|(w, g)| w + g * e.conj())
            .collect();
        if !(den.is_finite() && den > 0.0) || new_w.iter().any(|v| !v.is_finite()) {
            self.breakdowns += 1;
            return e;
        }
        let mut new_p = self.p.clone();
        for r in 0..n {
            for c in 0..n {
                new_p[r * n + c] = (self.p[r * n + c] - gain[r] * px[c].conj()) / lambda;
            }
        }
        if new_p.iter().any(|v| !v.is_finite()) {
            self.breakdowns += 1;
            return e;
        }
        self.w = new_w;
        self.p = new_p;
        if self.frames % RESYMMETRIZE_EVERY == 0 {
            for r in 0..n {
                for c in r..n {
                    let avg = (self.p[r * n + c] + self.p[c * n + r].conj()) * 0.5;
                    self.p[r * n + c] = avg;
                    self.p[c * n + r] = avg.conj();
                }
            }
        }
        e
    }
}

/// All-bin AWPE processor.
#[derive(Debug, Clone)]
pub struct Awpe {
    cfg: AwpeConfig,
    resolved: AwpeResolved,
    bins: Vec<AwpeBinState>,
    frames: usize,
    updates: u64,
}

impl Awpe {
    pub fn new(cfg: AwpeConfig, channels: usize) -> Result<Self> {
        if channels < 2 {
            return Err(Error::TooFewChannels {
                required: 2,
                got: channels,
            });
        }
        cfg.validate(channels)?;
        let resolved = cfg.resolve(channels);
        let bins = (0..cfg.stft().num_bins())
            .map(|_| {
                AwpeBinState::new(
                    channels,
                    resolved.filter_len,
                    cfg.prediction_delay,
                    cfg.init_scale,
                )
            })
            .collect();
        Ok(Self {
            cfg,
            resolved,
            bins,
            frames: 0,
            updates: 0,
        })
    }

    pub fn resolved(&self) -> AwpeResolved {
        self.resolved
    }

    pub fn bins(&self) -> &[AwpeBinState] {
        &self.bins
    }

    /// Dereverberated target-channel frame for one multichannel frame.
    pub fn process_frame(&mut self, frame: &[Frame]) -> Result<Frame> {
        if frame.len() != self.resolved.channels {
            return Err(Error::Dimension(format!(
                "frame has {} channels, expected {}",
                frame.len(),
                self.resolved.channels
            )));
        }
        let nb = self.bins.len();
        if let Some(f) = frame.iter().find(|f| f.len() != nb) {
            return Err(Error::BinCountMismatch {
                got: f.len(),
                expected: nb,
            });
        }
        let (cfg, res) = (&self.cfg, &self.resolved);
        let out: Frame = self
            .bins
            .par_iter_mut()
            .enumerate()
            .map(|(k, st)| {
                let x: Vec<Complex64> = frame.iter().map(|c| c[k]).collect();
                st.step(&x, cfg, res)
            })
            .collect();
        self.frames += 1;
        self.updates += nb as u64;
        Ok(out)
    }

    pub fn report(&self) -> RunReport {
        let energies: Vec<f64> = self
            .bins
            .iter()
            .map(|b| b.w.iter().map(|v| v.norm_sqr()).sum())
            .collect();
        let config = serde_json::json!({ "awpe": self.cfg, "resolved": self.resolved });
        RunReport {
            method: "awpe".into(),
            config,
            frames_processed: self.frames,
            floored_bin_fraction: 0.0,
            skip_counts: SkipCounts {
                baseline_breakdowns: self.bins.iter().map(|b| b.breakdowns).sum(),
                total_updates: self.updates,
                ..SkipCounts::default()
            },
            filter_energy_stats: (!energies.is_empty()).then(|| EnergyStats {
                min: energies.iter().cloned().fold(f64::INFINITY, f64::min),
                max: energies.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                mean: energies.iter().sum::<f64>() / energies.len() as f64,
            }),
            realtime_factor: None,
            stage_seconds: None,
            metrics: None,
        }
    }
}

/// Runs AWPE over precomputed spectra in the baseline's own STFT domain.
pub fn awpe_spectra(cfg: &AwpeConfig, spec: &Spectrogram) -> Result<(Vec<Frame>, RunReport)> {
    let mut a = Awpe::new(cfg.clone(), spec.num_channels())?;
    let frames = (0..spec.num_frames())
        .map(|p| a.process_frame(&spec.frame(p)))
        .collect::<Result<Vec<_>>>()?;
    Ok((frames, a.report()))
}

/// Whole-signal AWPE; the output has the input's length.
pub fn awpe_stream(cfg: &AwpeConfig, samples: &[Vec<f64>]) -> Result<(Vec<f64>, RunReport)> {
    if samples.len() < 2 {
        return Err(Error::TooFewChannels {
            required: 2,
            got: samples.len(),
        });
    }
    cfg.validate(samples.len())?;
    let start = Instant::now();
    let stft = Stft::new(cfg.stft())?;
    let spec = stft.analyze(samples)?;
    let t_analysis = start.elapsed().as_secs_f64();
    let t1 = Instant::now();
    let (frames, mut report) = awpe_spectra(cfg, &spec)?;
    let t_pred = t1.elapsed().as_secs_f64();
    let t2 = Instant::now();
    let mut out = stft.synthesize(&frames)?;
    out.truncate(samples[0].len());
    let t_synth = t2.elapsed().as_secs_f64();
    let duration = samples[0].len() as f64 / cfg.sample_rate as f64;
    report.stage_seconds = Some(StageTiming {
        analysis: t_analysis,
        identification: t_pred,
        inverse_filtering: 0.0,
        synthesis: t_synth,
    });
    let elapsed = start.elapsed().as_secs_f64();
    report.realtime_factor = (duration > 0.0).then(|| elapsed.max(f64::MIN_POSITIVE) / duration);
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{improvement_report, GainAlignment};
    use crate::simulator::{generate_scene, speech_like_source, ScenarioSpec, SceneMode};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn rls_matches_direct_weighted_least_squares() {
        use nalgebra::{DMatrix, DVector};
        let cfg = AwpeConfig {
            filter_len: Some(3),
            prediction_delay: 2,
            forgetting: Some(0.93),
            ..AwpeConfig::default()
        };
        let res = cfg.resolve(2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut cn = || {
            let re: f64 = StandardNormal.sample(&mut rng);
            let im: f64 = StandardNormal.sample(&mut rng);
            Complex64::new(re, im)
        };
        let frames: Vec<[Complex64; 2]> = (0..60).map(|_| [cn(), cn()]).collect();
        let mut st = AwpeBinState::new(2, 3, 2, cfg.init_scale);
        for f in &frames {
            st.step(f, &cfg, &res);
        }
        let n = frames.len();
        let lam = res.forgetting;
        let mut r = DMatrix::<Complex64>::identity(6, 6)
            * Complex64::new(lam.powi(n as i32) / cfg.init_scale, 0.0);
        let mut c = DVector::<Complex64>::zeros(6);
        let mut mean_power = 0.0;
        for p in 0..n {
            mean_power += frames[p][0].norm_sqr();
            let stack: Vec<Complex64> = (0..2)
                .flat_map(|ch| (0..3).map(move |l| (ch, l)))
                .map(|(ch, l)| {
                    let lag = 2 + l;
                    if p >= lag {
                        frames[p - lag][ch]
                    } else {
                        Complex64::default()
                    }
                })
                .collect();
            if stack.iter().all(|v| *v == Complex64::default()) {
                continue;
            }
            let floor = cfg.variance_floor * mean_power / (p + 1) as f64;
            let sigma2 = frames[p][0].norm_sqr().max(floor);
            let wgt = lam.powi((n - 1 - p) as i32) / sigma2;
            let v = DVector::from_vec(stack);
            r += &v * v.adjoint() * Complex64::new(wgt, 0.0);
            c += &v * (frames[p][0].conj() * wgt);
        }
        let w = r.lu().solve(&c).unwrap();
        for (a, b) in st.w.iter().zip(w.iter()) {
            assert!((a - b).norm() < 1e-8 * (1.0 + b.norm()), "{a} vs {b}");
        }
    }

    #[test]
    fn defaults_follow_channel_count() {
        let c = AwpeConfig::default();
        assert_eq!(c.resolve(2).filter_len, 16);
        assert_eq!(c.resolve(2).forgetting, 0.97);
        assert_eq!(c.resolve(8).filter_len, 8);
        assert_eq!(c.resolve(8).forgetting, 0.985);
        assert_eq!(c.prediction_delay, 6);
        assert!(AwpeConfig {
            prediction_delay: 0,
            ..c.clone()
        }
        .validate(2)
        .is_err());
        assert!(AwpeConfig {
            target_channel: 2,
            ..c
        }
        .validate(2)
        .is_err());
    }

    #[test]
    fn zero_input_passes_through() {
        let x = vec![vec![0.0; 4000]; 2];
        let (y, r) = awpe_stream(&AwpeConfig::default(), &x).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
        assert_eq!(r.skip_counts.baseline_breakdowns, 0);
        assert_eq!(r.filter_energy_stats.unwrap().max, 0.0);
    }

    #[test]
    fn zero_filter_length_is_identity() {
        let cfg = AwpeConfig {
            filter_len: Some(0),
            ..AwpeConfig::default()
        };
        let stft = Stft::new(cfg.stft()).unwrap();
        let x: Vec<Vec<f64>> = (0..2)
            .map(|s| speech_like_source(8000, 16_000, s))
            .collect();
        let spec = stft.analyze(&x).unwrap();
        let (frames, _) = awpe_spectra(&cfg, &spec).unwrap();
        assert_eq!(frames, spec.channels[0]);
    }

    #[test]
    fn output_is_causal() {
        let cfg = AwpeConfig::default();
        let stft = Stft::new(cfg.stft()).unwrap();
        let x: Vec<Vec<f64>> = (0..2)
            .map(|s| speech_like_source(16_000, 16_000, s))
            .collect();
        let spec = stft.analyze(&x).unwrap();
        let mut changed = spec.clone();
        let cut = 60;
        for ch in changed.channels.iter_mut() {
            for f in ch.iter_mut().skip(cut) {
                for v in f.iter_mut() {
                    *v = *v * 3.0 + Complex64::new(0.1, -0.2);
                }
            }
        }
        let (a, _) = awpe_spectra(&cfg, &spec).unwrap();
        let (b, _) = awpe_spectra(&cfg, &changed).unwrap();
        assert_eq!(a[..cut], b[..cut]);
        assert_ne!(a[cut], b[cut]);
    }

    #[test]
    fn deterministic_and_length_preserving() {
        let x: Vec<Vec<f64>> = (0..2)
            .map(|s| speech_like_source(12_345, 16_000, s))
            .collect();
        let (a, ra) = awpe_stream(&AwpeConfig::default(), &x).unwrap();
        let (b, rb) = awpe_stream(&AwpeConfig::default(), &x).unwrap();
        assert_eq!(a.len(), 12_345);
        assert_eq!(a, b);
        assert_eq!(ra.clone().without_timing(), rb.without_timing());
        assert!(ra.realtime_factor.unwrap() > 0.0);
    }

    fn anechoic_relative_change(cfg: &AwpeConfig) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 16_000 * 10;
        let x: Vec<Vec<f64>> = (0..2)
            .map(|_| (0..n).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let (y, _) = awpe_stream(cfg, &x).unwrap();
        let half = n / 2;
        let change: f64 = y[half..]
            .iter()
            .zip(&x[0][half..])
            .map(|(a, b)| (a - b).powi(2))
            .sum();
        let energy: f64 = x[0][half..].iter().map(|v| v * v).sum();
        change / energy
    }

    // With λ = 0.97 the RLS sees about 33 effective frames for 32 unknowns,
    // and the a-priori misadjustment alone changes about 16% of the energy.
    #[test]
    #[ignore = "known failure at the default forgetting factor (measured change about 16%)"]
    fn anechoic_white_input_is_nearly_unchanged() {
        let r = anechoic_relative_change(&AwpeConfig::default());
        assert!(r < 0.05, "relative change {r}");
    }

    #[test]
    fn anechoic_white_input_is_nearly_unchanged_with_long_memory() {
        let cfg = AwpeConfig {
            forgetting: Some(0.999),
            ..AwpeConfig::default()
        };
        let r = anechoic_relative_change(&cfg);
        assert!(r < 0.05, "relative change {r}");
    }

    #[test]
    fn reduces_reverberation_on_time_domain_scene() {
        let spec = ScenarioSpec {
            mode: SceneMode::TimeDomain,
            duration: 6.0,
            ..ScenarioSpec::default()
        };
        let scene = generate_scene(&spec, &StftConfig::default(), 11).unwrap();
        let (y, _) = awpe_stream(&AwpeConfig::default(), &scene.mics).unwrap();
        let rep = improvement_report(
            &StftConfig::default(),
            &scene.truth.reference,
            &scene.mics[0],
            &y,
            2 * 16_000 / 192,
            GainAlignment::None,
        )
        .unwrap();
        assert!(
            rep.median_improvement_db > 0.0,
            "{}",
            rep.median_improvement_db
        );
    }
}
