//! Adaptive magnitude-domain MINT inverse filtering.
//!
//! Per bin, the CTF magnitudes `ā_i` define a stacked Toeplitz convolution
//! matrix `Ā = [Ā_1 .. Ā_I]` of size `(Q + O - 1) x I·O`. The inverse filters
//! `h` are driven towards `Ā h = d`, `d = [1, 0, .., 0]`, by normalized
//! gradient descent:
//!
//! ```text
//! h <- h - mu / tr(ĀᵀĀ) · 2 Āᵀ(Ā h - d)
//! ```
//!
//! `Ā` is never formed at runtime: `Ā h` is a sum of per-channel linear
//! convolutions and `Āᵀ y` a sum of correlations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Traces below this mean an empty bin; the update is skipped.
pub const MIN_TRACE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MintScheme {
    /// One joint filter stack over all channels.
    #[default]
    Multichannel,
    /// One two-channel stack per microphone pair; outputs are averaged.
    Pairwise,
}

impl std::str::FromStr for MintScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multichannel" | "mc" => Ok(MintScheme::Multichannel),
            "pairwise" | "pw" => Ok(MintScheme::Pairwise),
            other => Err(Error::Config(format!("unknown MINT scheme '{other}'"))),
        }
    }
}

/// Explicit `Ā`, column-major per channel block. Test and diagnostic use only.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvolutionMatrix {
    pub rows: usize,
    pub cols_per_channel: usize,
    /// `blocks[i][r][c]`
    pub blocks: Vec<Vec<Vec<f64>>>,
}

impl ConvolutionMatrix {
    pub fn entry(&self, r: usize, col: usize) -> f64 {
        let i = col / self.cols_per_channel;
        let c = col % self.cols_per_channel;
        self.blocks[i][r][c]
    }

    pub fn cols(&self) -> usize {
        self.blocks.len() * self.cols_per_channel
    }

    pub fn mul(&self, h: &[f64]) -> Vec<f64> {
        (0..self.rows)
            .map(|r| (0..self.cols()).map(|c| self.entry(r, c) * h[c]).sum())
            .collect()
    }
}

/// Builds the per-channel `(Q + O - 1) x O` Toeplitz blocks whose column `c`
/// holds `ā_i` shifted down by `c`.
pub fn build_conv_matrix(a_bar: &[Vec<f64>], filter_len: usize) -> ConvolutionMatrix {
    let q = a_bar.first().map_or(0, Vec::len);
    let rows = q + filter_len - 1;
    let blocks = a_bar
        .iter()
        .map(|a| {
            (0..rows)
                .map(|r| {
                    (0..filter_len)
                        .map(|c| if r >= c && r - c < q { a[r - c] } else { 0.0 })
                        .collect()
                })
                .collect()
        })
        .collect();
    ConvolutionMatrix {
        rows,
        cols_per_channel: filter_len,
        blocks,
    }
}

/// `Ā h = sum_i ā_i * h_i` (full linear convolution).
pub fn forward(a_bar: &[Vec<f64>], h: &[Vec<f64>]) -> Vec<f64> {
    let q = a_bar.first().map_or(0, Vec::len);
    let o = h.first().map_or(0, Vec::len);
    let mut y = vec![0.0; q + o - 1];
    for (a, hi) in a_bar.iter().zip(h) {
        for (c, &hc) in hi.iter().enumerate() {
            if hc == 0.0 {
                continue;
            }
            for (k, &ak) in a.iter().enumerate() {
                y[c + k] += ak * hc;
            }
        }
    }
    y
}

/// `Āᵀ y`, one length-`O` block per channel.
pub fn adjoint(a_bar: &[Vec<f64>], y: &[f64], filter_len: usize) -> Vec<Vec<f64>> {
    a_bar
        .iter()
        .map(|a| {
            (0..filter_len)
                .map(|c| a.iter().enumerate().map(|(k, &ak)| ak * y[c + k]).sum())
                .collect()
        })
        .collect()
}

/// `Ā h - d`.
pub fn residual(a_bar: &[Vec<f64>], h: &[Vec<f64>]) -> Vec<f64> {
    let mut r = forward(a_bar, h);
    r[0] -= 1.0;
    r
}

/// `J = ||Ā h - d||²`.
pub fn cost(a_bar: &[Vec<f64>], h: &[Vec<f64>]) -> f64 {
    residual(a_bar, h).iter().map(|v| v * v).sum()
}

/// `∇J = 2 Āᵀ(Ā h - d)`.
pub fn gradient(a_bar: &[Vec<f64>], h: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let o = h.first().map_or(0, Vec::len);
    let r = residual(a_bar, h);
    let mut g = adjoint(a_bar, &r, o);
    g.iter_mut().flatten().for_each(|v| *v *= 2.0);
    g
}

/// Exact `tr(ĀᵀĀ) = O · sum_i ||ā_i||²`.
pub fn trace(a_bar: &[Vec<f64>], filter_len: usize) -> f64 {
    filter_len as f64 * a_bar.iter().flatten().map(|v| v * v).sum::<f64>()
}

/// Nonnegative inverse-filter coefficients for a set of channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InverseFilterStack {
    /// `filters[i]` has `O` taps at frame spacing `D`.
    pub filters: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Updated,
    /// Empty bin (vanishing trace): filters held.
    Skipped,
}

impl InverseFilterStack {
    /// All-zero initialization.
    pub fn zeros(channels: usize, filter_len: usize) -> Self {
        Self {
            filters: vec![vec![0.0; filter_len]; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.filters.len()
    }

    pub fn filter_len(&self) -> usize {
        self.filters.first().map_or(0, Vec::len)
    }

    /// `||h||²`.
    pub fn energy(&self) -> f64 {
        self.filters.iter().flatten().map(|v| v * v).sum()
    }

    /// One normalized gradient step towards `Ā h = d`.
    pub fn update(&mut self, a_bar: &[Vec<f64>], mu: f64) -> StepOutcome {
        let tr = trace(a_bar, self.filter_len());
        if !(tr >= MIN_TRACE) || !tr.is_finite() {
            return StepOutcome::Skipped;
        }
        let step = mu / tr;
        let g = gradient(a_bar, &self.filters);
        for (h, gi) in self.filters.iter_mut().zip(&g) {
            for (hv, gv) in h.iter_mut().zip(gi) {
                *hv -= step * gv;
            }
        }
        StepOutcome::Updated
    }

    /// `s̄ = sum_i h_iᵀ x̄_i` with `mags[i] = [|x_{i,p}|, |x_{i,p-D}|, ...]`.
    pub fn apply(&self, mags: &[Vec<f64>]) -> f64 {
        self.filters
            .iter()
            .zip(mags)
            .map(|(h, x)| h.iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
            .sum()
    }
}

/// Per-bin MINT state for either scheme.
#[derive(Debug, Clone)]
pub struct MintState {
    scheme: MintScheme,
    /// Channel subsets, one per stack: all channels, or each pair.
    groups: Vec<Vec<usize>>,
    stacks: Vec<InverseFilterStack>,
    mu: f64,
    skipped: u64,
    steps: u64,
}

/// Per-frame MINT result.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MintOutput {
    pub estimate: f64,
    pub filter_energy: f64,
    pub skipped: u32,
}

impl MintState {
    pub fn new(scheme: MintScheme, channels: usize, filter_len: usize, mu: f64) -> Self {
        let groups: Vec<Vec<usize>> = match scheme {
            MintScheme::Multichannel => vec![(0..channels).collect()],
            MintScheme::Pairwise => (0..channels)
                .flat_map(|i| (i + 1..channels).map(move |j| vec![i, j]))
                .collect(),
        };
        let stacks = groups
            .iter()
            .map(|g| InverseFilterStack::zeros(g.len(), filter_len))
            .collect();
        Self {
            scheme,
            groups,
            stacks,
            mu,
            skipped: 0,
            steps: 0,
        }
    }

    pub fn scheme(&self) -> MintScheme {
        self.scheme
    }

    pub fn stacks(&self) -> &[InverseFilterStack] {
        &self.stacks
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn skipped(&self) -> u64 {
        self.skipped
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Updates every stack with the current CTF magnitudes, then filters the
    /// microphone magnitude taps. Pairwise outputs are averaged in pair order.
    pub fn step(&mut self, a_bar: &[Vec<f64>], mags: &[Vec<f64>]) -> MintOutput {
        let mut sum = 0.0;
        let mut energy = 0.0;
        let mut skipped = 0;
        for (group, stack) in self.groups.iter().zip(self.stacks.iter_mut()) {
            let a: Vec<Vec<f64>> = group.iter().map(|&i| a_bar[i].clone()).collect();
            let x: Vec<Vec<f64>> = group.iter().map(|&i| mags[i].clone()).collect();
            self.steps += 1;
            if stack.update(&a, self.mu) == StepOutcome::Skipped {
                self.skipped += 1;
                skipped += 1;
            }
            sum += stack.apply(&x);
            energy += stack.energy();
        }
        let n = self.groups.len() as f64;
        MintOutput {
            estimate: sum / n,
            filter_energy: energy / n,
            skipped,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vecs(rng: &mut ChaCha8Rng, n: usize, len: usize, lo: f64) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..len).map(|_| rng.random_range(lo..1.0)).collect())
            .collect()
    }

    #[test]
    fn impulse_ctf_gives_shifted_identity() {
        let m = build_conv_matrix(&[vec![1.0, 0.0]], 2);
        assert_eq!(
            m.blocks[0],
            vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 0.0]]
        );
    }

    #[test]
    fn toeplitz_layout() {
        let a = vec![1.0, 2.0, 3.0, 4.0];
        let m = build_conv_matrix(&[a.clone()], 4);
        assert_eq!(m.rows, 7);
        for c in 0..4 {
            for r in 0..7 {
                let expect = if r >= c && r - c < 4 { a[r - c] } else { 0.0 };
                assert_eq!(m.blocks[0][r][c], expect);
            }
        }
    }

    #[test]
    fn matrix_product_matches_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_vecs(&mut rng, 3, 4, 0.0);
        let h = random_vecs(&mut rng, 3, 5, -1.0);
        let m = build_conv_matrix(&a, 5);
        let flat: Vec<f64> = h.iter().flatten().copied().collect();
        let y = m.mul(&flat);
        // Direct convolution, written independently.
        let mut direct = vec![0.0; 8];
        for i in 0..3 {
            for n in 0..8 {
                for k in 0..4 {
                    if n >= k && n - k < 5 {
                        direct[n] += a[i][k] * h[i][n - k];
                    }
                }
            }
        }
        for (u, v) in y.iter().zip(&direct) {
            assert!((u - v).abs() < 1e-12);
        }
        for (u, v) in forward(&a, &h).iter().zip(&direct) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_at_zero_filters() {
        let a = vec![vec![1.0, 0.0], vec![1.0, 0.0]];
        let h = vec![vec![0.0; 2]; 2];
        assert_eq!(gradient(&a, &h), vec![vec![-2.0, 0.0], vec![-2.0, 0.0]]);
    }

    #[test]
    fn gradient_vanishes_at_exact_solution() {
        let a = vec![vec![1.0, 0.0], vec![1.0, 0.0]];
        let h = vec![vec![0.5, 0.0], vec![0.5, 0.0]];
        assert!(gradient(&a, &h).iter().flatten().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn first_update_step() {
        let a = vec![vec![1.0, 0.0], vec![1.0, 0.0]];
        let mut h = InverseFilterStack::zeros(2, 2);
        assert_eq!(trace(&a, 2), 4.0);
        assert_eq!(h.update(&a, 0.025), StepOutcome::Updated);
        let expect = [0.0125, 0.0, 0.0125, 0.0];
        for (v, e) in h.filters.iter().flatten().zip(expect) {
            assert!((v - e).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_step_and_silent_bins_hold_filters() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_vecs(&mut rng, 2, 4, 0.0);
        let mut h = InverseFilterStack {
            filters: random_vecs(&mut rng, 2, 4, -1.0),
        };
        let before = h.clone();
        h.update(&a, 0.0);
        assert_eq!(h, before);
        assert_eq!(
            h.update(&[vec![0.0; 4], vec![0.0; 4]], 0.025),
            StepOutcome::Skipped
        );
        assert_eq!(h, before);
    }

    #[test]
    fn pass_through_and_zero_filters() {
        let mut h = InverseFilterStack::zeros(3, 4);
        let mags = vec![vec![2.5, 1.0, 1.0, 1.0], vec![7.0; 4], vec![9.0; 4]];
        assert_eq!(h.apply(&mags), 0.0);
        h.filters[0][0] = 1.0;
        assert_eq!(h.apply(&mags), 2.5);
    }

    #[test]
    fn pairwise_with_two_channels_matches_multichannel() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut mc = MintState::new(MintScheme::Multichannel, 2, 4, 0.025);
        let mut pw = MintState::new(MintScheme::Pairwise, 2, 4, 0.025);
        for _ in 0..50 {
            let a = random_vecs(&mut rng, 2, 4, 0.0);
            let x = random_vecs(&mut rng, 2, 4, 0.0);
            assert_eq!(mc.step(&a, &x), pw.step(&a, &x));
        }
    }

    #[test]
    fn pairwise_identical_channels_equal_single_pair() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut pw = MintState::new(MintScheme::Pairwise, 4, 4, 0.025);
        let mut single = MintState::new(MintScheme::Multichannel, 2, 4, 0.025);
        for _ in 0..50 {
            let a = random_vecs(&mut rng, 1, 4, 0.0).remove(0);
            let x = random_vecs(&mut rng, 1, 4, 0.0).remove(0);
            let out = pw.step(&vec![a.clone(); 4], &vec![x.clone(); 4]);
            let one = single.step(&vec![a; 2], &vec![x; 2]);
            assert!((out.estimate - one.estimate).abs() < 1e-12);
        }
        assert_eq!(pw.groups().len(), 6);
    }
}
