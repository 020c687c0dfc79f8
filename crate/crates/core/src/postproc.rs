//! Magnitude floor and phase reattachment.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FloorConfig {
    pub g_min_db: f64,
}

impl Default for FloorConfig {
    fn default() -> Self {
        Self { g_min_db: -15.0 }
    }
}

impl FloorConfig {
    pub fn linear(&self) -> f64 {
        10f64.powf(self.g_min_db / 20.0)
    }
}

/// Floored magnitude and whether the floor was active.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Floored {
    pub magnitude: f64,
    pub floored: bool,
}

/// `max(s̄, G_min · mean_i |x_i|)`.
pub fn apply_floor(estimate: f64, mic_mags: &[f64], g_min_linear: f64) -> Floored {
    let mean = if mic_mags.is_empty() {
        0.0
    } else {
        mic_mags.iter().sum::<f64>() / mic_mags.len() as f64
    };
    let floor = g_min_linear * mean;
    // NaN estimates fall to the floor as well.
    if estimate >= floor {
        Floored {
            magnitude: estimate,
            floored: false,
        }
    } else {
        Floored {
            magnitude: floor,
            floored: true,
        }
    }
}

/// `š · e^{j arg(reference)}`; a zero reference contributes phase 0.
pub fn reattach_phase(magnitude: f64, reference: Complex64) -> Complex64 {
    let r = reference.norm();
    if r == 0.0 || !r.is_finite() {
        Complex64::new(magnitude, 0.0)
    } else {
        reference * (magnitude / r)
    }
}
