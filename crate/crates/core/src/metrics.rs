//! Identification accuracy (NPM) and log-spectral distance.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::ctf_ident::CtfEstimate;
use crate::error::{Error, Result};
use crate::stft::{Frame, Stft, StftConfig};

/// Reported in place of `-inf` for an exact match.
pub const NPM_FLOOR_DB: f64 = -300.0;
/// LSD magnitude floor relative to the larger of the two peaks.
pub const DEFAULT_LSD_FLOOR_DB: f64 = -80.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NpmResult {
    pub per_bin_db: Vec<f64>,
    pub median_db: f64,
    pub mean_db: f64,
}

/// Normalized projection misalignment of `estimate` against `truth`, in dB.
pub fn npm_db(estimate: &[Complex64], truth: &[Complex64]) -> Result<f64> {
    if estimate.len() != truth.len() {
        return Err(Error::Dimension(format!(
            "estimate has {} coefficients, truth {}",
            estimate.len(),
            truth.len()
        )));
    }
    let ta: f64 = truth.iter().map(|v| v.norm_sqr()).sum();
    if ta == 0.0 {
        return Err(Error::Numerical("truth vector is zero".into()));
    }
    let ee: f64 = estimate.iter().map(|v| v.norm_sqr()).sum();
    let scale = if ee > 0.0 {
        estimate
            .iter()
            .zip(truth)
            .map(|(e, a)| e.conj() * a)
            .sum::<Complex64>()
            / ee
    } else {
        Complex64::default()
    };
    let err: f64 = estimate
        .iter()
        .zip(truth)
        .map(|(e, a)| (a - e * scale).norm_sqr())
        .sum();
    let db = 10.0 * (err / ta).log10();
    Ok(if db.is_finite() {
        db.max(NPM_FLOOR_DB)
    } else {
        NPM_FLOOR_DB
    }
    .min(0.0))
}

/// Per-bin NPM of stacked estimates against stacked truths.
pub fn npm(estimates: &[CtfEstimate], truth: &[Vec<Complex64>]) -> Result<NpmResult> {
    if estimates.len() != truth.len() {
        return Err(Error::BinCountMismatch {
            got: estimates.len(),
            expected: truth.len(),
        });
    }
    let per_bin_db = estimates
        .iter()
        .zip(truth)
        .map(|(e, t)| npm_db(&e.coeffs, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(NpmResult {
        median_db: median(&per_bin_db),
        mean_db: mean(&per_bin_db),
        per_bin_db,
    })
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        f64::NAN
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// How the test magnitudes are scaled before comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GainAlignment {
    /// Raw magnitudes.
    #[default]
    None,
    /// Each bin's log-ratio has its mean over frames removed, so a fixed
    /// per-bin coloration costs nothing and only temporal smearing counts.
    PerBin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LsdResult {
    pub per_frame_db: Vec<f64>,
    pub mean_db: f64,
    pub median_db: f64,
}

/// Magnitudes of a spectrogram channel, `[frame][bin]`.
pub fn magnitudes(frames: &[Frame]) -> Vec<Vec<f64>> {
    frames
        .iter()
        .map(|f| f.iter().map(|v| v.norm()).collect())
        .collect()
}

/// RMS over bins of `20 log10` of floored magnitude ratios, per frame.
///
/// Both inputs are floored at `floor_db` below the larger of their two peaks.
pub fn log_spectral_distance(
    reference: &[Vec<f64>],
    test: &[Vec<f64>],
    floor_db: f64,
    align: GainAlignment,
) -> Result<LsdResult> {
    if reference.len() != test.len() {
        return Err(Error::Dimension(format!(
            "reference has {} frames, test {}",
            reference.len(),
            test.len()
        )));
    }
    let bins = reference.first().map_or(0, |f| f.len());
    if let Some(f) = reference.iter().chain(test).find(|f| f.len() != bins) {
        return Err(Error::BinCountMismatch {
            got: f.len(),
            expected: bins,
        });
    }
    let peak = reference
        .iter()
        .chain(test)
        .flatten()
        .fold(0.0f64, |m, &v| m.max(v));
    let floor = peak * 10f64.powf(floor_db / 20.0);
    let floored = |v: f64| v.max(floor).max(f64::MIN_POSITIVE);
    let mut ratios: Vec<Vec<f64>> = reference
        .iter()
        .zip(test)
        .map(|(r, t)| {
            r.iter()
                .zip(t)
                .map(|(&a, &b)| 20.0 * (floored(b) / floored(a)).log10())
                .collect()
        })
        .collect();
    if align == GainAlignment::PerBin && !ratios.is_empty() {
        for k in 0..bins {
            let offset = ratios.iter().map(|f| f[k]).sum::<f64>() / ratios.len() as f64;
            for f in ratios.iter_mut() {
                f[k] -= offset;
            }
        }
    }
    let per_frame_db: Vec<f64> = ratios
        .iter()
        .map(|f| {
            if f.is_empty() {
                0.0
            } else {
                (f.iter().map(|v| v * v).sum::<f64>() / f.len() as f64).sqrt()
            }
        })
        .collect();
    Ok(LsdResult {
        mean_db: mean(&per_frame_db),
        median_db: median(&per_frame_db),
        per_frame_db,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImprovementReport {
    pub alignment: GainAlignment,
    pub skip_frames: usize,
    pub lsd_unprocessed: LsdResult,
    pub lsd_enhanced: LsdResult,
    /// `LSD(unprocessed) - LSD(enhanced)` per frame.
    pub per_frame_improvement_db: Vec<f64>,
    pub median_improvement_db: f64,
    pub mean_improvement_db: f64,
}

/// Compares unprocessed and enhanced magnitudes with a reference, ignoring
/// the first `skip_frames` frames.
pub fn improvement_from_magnitudes(
    reference: &[Vec<f64>],
    unprocessed: &[Vec<f64>],
    enhanced: &[Vec<f64>],
    skip_frames: usize,
    align: GainAlignment,
) -> Result<ImprovementReport> {
    if reference.len() != unprocessed.len() || reference.len() != enhanced.len() {
        return Err(Error::Dimension(format!(
            "frame counts differ: reference {}, unprocessed {}, enhanced {}",
            reference.len(),
            unprocessed.len(),
            enhanced.len()
        )));
    }
    let s = skip_frames.min(reference.len());
    let u = log_spectral_distance(
        &reference[s..],
        &unprocessed[s..],
        DEFAULT_LSD_FLOOR_DB,
        align,
    )?;
    let e = log_spectral_distance(&reference[s..], &enhanced[s..], DEFAULT_LSD_FLOOR_DB, align)?;
    let per: Vec<f64> = u
        .per_frame_db
        .iter()
        .zip(&e.per_frame_db)
        .map(|(a, b)| a - b)
        .collect();
    Ok(ImprovementReport {
        alignment: align,
        skip_frames: s,
        median_improvement_db: median(&per),
        mean_improvement_db: mean(&per),
        per_frame_improvement_db: per,
        lsd_unprocessed: u,
        lsd_enhanced: e,
    })
}

/// Time-domain front end of [`improvement_from_magnitudes`], analyzed with `stft`.
pub fn improvement_report(
    stft: &StftConfig,
    reference: &[f64],
    unprocessed: &[f64],
    enhanced: &[f64],
    skip_frames: usize,
    align: GainAlignment,
) -> Result<ImprovementReport> {
    if reference.len() != unprocessed.len() || reference.len() != enhanced.len() {
        return Err(Error::Dimension(format!(
            "signal lengths differ: reference {}, unprocessed {}, enhanced {}",
            reference.len(),
            unprocessed.len(),
            enhanced.len()
        )));
    }
    let stft = Stft::new(*stft)?;
    let mag = |x: &[f64]| magnitudes(&stft.analyze_channel(x));
    improvement_from_magnitudes(
        &mag(reference),
        &mag(unprocessed),
        &mag(enhanced),
        skip_frames,
        align,
    )
}
