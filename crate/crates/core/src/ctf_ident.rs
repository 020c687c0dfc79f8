//! Blind per-bin identification of critically sampled multichannel CTFs.
//!
//! For every microphone pair `(i, j)`, `j > i`, the cross-relation
//! `x_i * a_j = x_j * a_i` is linear in the stacked CTF vector. The estimate
//! minimizes the (exponentially weighted) sum of squared cross-relation
//! residuals subject to `g^T a = 1`, where `g` selects the first tap of every
//! channel:
//!
//! ```text
//! a = R^{-1} g / (g^T R^{-1} g),   R = sum_p lambda^(P-p) sum_m x_m* x_m^T
//! ```
//!
//! The recursive form tracks `R^{-1}` directly with one Sherman-Morrison
//! downdate per pair and frame.

use log::debug;
use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Denominators and constraint normalizers below this are treated as breakdown.
pub const BREAKDOWN_EPS: f64 = 1e-12;
/// Initial inverse covariance is this times identity.
pub const DEFAULT_INIT_SCALE: f64 = 1000.0;
pub const DEFAULT_RESYMMETRIZE_EVERY: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PairPolicy {
    /// The `I - 1` pairs containing the first microphone.
    #[default]
    FirstMic,
    /// All `I (I - 1) / 2` pairs.
    AllPairs,
}

impl std::str::FromStr for PairPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "first-mic" => Ok(PairPolicy::FirstMic),
            "all-pairs" => Ok(PairPolicy::AllPairs),
            other => Err(Error::Config(format!("unknown pair policy '{other}'"))),
        }
    }
}

/// Microphone pairs `(i, j)` with `j > i`, in lexicographic order.
pub fn microphone_pairs(channels: usize, policy: PairPolicy) -> Vec<(usize, usize)> {
    match policy {
        PairPolicy::FirstMic => (1..channels).map(|j| (0, j)).collect(),
        PairPolicy::AllPairs => (0..channels)
            .flat_map(|i| (i + 1..channels).map(move |j| (i, j)))
            .collect(),
    }
}

/// `g = [1, 0, .., 0, 1, 0, .., 0, ...]`: picks the first tap of each channel.
pub fn constraint_vector(channels: usize, taps: usize) -> Vec<f64> {
    let mut g = vec![0.0; channels * taps];
    for i in 0..channels {
        g[i * taps] = 1.0;
    }
    g
}

/// Stacked cross-relation vector of one microphone pair at one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossRelationVector(pub Vec<Complex64>);

impl CrossRelationVector {
    pub fn as_slice(&self) -> &[Complex64] {
        &self.0
    }

    /// `x^T a` (no conjugation).
    pub fn dot(&self, a: &[Complex64]) -> Complex64 {
        self.0.iter().zip(a).map(|(x, a)| x * a).sum()
    }
}

/// Builds the pair vector from per-channel tap buffers
/// `taps[c] = [x_{c,p}, x_{c,p-D}, ...]` of equal length `Q`.
///
/// Block `i` holds channel `j`'s taps and block `j` the negated channel-`i`
/// taps, so that `x_ij^T a = x_j^T a_i - x_i^T a_j`.
pub fn build_pair_vector(
    taps: &[Vec<Complex64>],
    pair: (usize, usize),
) -> Result<CrossRelationVector> {
    let (i, j) = pair;
    let channels = taps.len();
    if i >= j || j >= channels {
        return Err(Error::OutOfRange(format!(
            "pair ({i}, {j}) invalid for {channels} channels"
        )));
    }
    let q = taps[0].len();
    if taps.iter().any(|t| t.len() != q) {
        return Err(Error::Dimension("tap buffers differ in length".into()));
    }
    let mut v = vec![Complex64::default(); channels * q];
    v[i * q..(i + 1) * q].copy_from_slice(&taps[j]);
    for (dst, src) in v[j * q..(j + 1) * q].iter_mut().zip(&taps[i]) {
        *dst = -src;
    }
    Ok(CrossRelationVector(v))
}

/// Stacked CTF estimate, channel-major blocks of `taps` coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CtfEstimate {
    pub coeffs: Vec<Complex64>,
    pub channels: usize,
    pub taps: usize,
}

impl CtfEstimate {
    pub fn channel(&self, i: usize) -> &[Complex64] {
        &self.coeffs[i * self.taps..(i + 1) * self.taps]
    }

    /// `|a_i|` elementwise, per channel.
    pub fn magnitudes(&self) -> Vec<Vec<f64>> {
        (0..self.channels)
            .map(|i| self.channel(i).iter().map(|c| c.norm()).collect())
            .collect()
    }

    /// `g^T a`.
    pub fn constraint_value(&self) -> Complex64 {
        (0..self.channels).map(|i| self.coeffs[i * self.taps]).sum()
    }
}

/// Recursively maintained `(R^(p))^{-1}`, dense row-major.
#[derive(Debug, Clone)]
pub struct InverseCovariance {
    dim: usize,
    data: Vec<Complex64>,
    lambda: f64,
    resymmetrize_every: usize,
    frames: usize,
}

/// What happened during one frame's covariance update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateOutcome {
    Applied,
    /// A denominator vanished or the result was not finite; `P` was restored.
    Breakdown,
}

impl InverseCovariance {
    pub fn new(dim: usize, lambda: f64, init_scale: f64) -> Self {
        let mut data = vec![Complex64::default(); dim * dim];
        for r in 0..dim {
            data[r * dim + r] = Complex64::new(init_scale, 0.0);
        }
        Self {
            dim,
            data,
            lambda,
            resymmetrize_every: DEFAULT_RESYMMETRIZE_EVERY,
            frames: 0,
        }
    }

    pub fn with_resymmetrize_every(mut self, frames: usize) -> Self {
        self.resymmetrize_every = frames;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn get(&self, r: usize, c: usize) -> Complex64 {
        self.data[r * self.dim + c]
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.data
    }

    /// One frame of the recursion: `P <- P / lambda`, then a Sherman-Morrison
    /// downdate per vector. On breakdown the frame is dropped entirely.
    pub fn update(&mut self, vectors: &[CrossRelationVector]) -> UpdateOutcome {
        let n = self.dim;
        let saved = self.data.clone();
        let inv_lambda = 1.0 / self.lambda;
        for v in self.data.iter_mut() {
            *v *= inv_lambda;
        }

        let mut u = vec![Complex64::default(); n];
        let mut w = vec![Complex64::default(); n];
        for x in vectors {
            let x = x.as_slice();
            debug_assert_eq!(x.len(), n);
            // u = P x*, w = x^T P
            for r in 0..n {
                let row = &self.data[r * n..(r + 1) * n];
                u[r] = row.iter().zip(x).map(|(p, xc)| p * xc.conj()).sum();
            }
            w.iter_mut().for_each(|v| *v = Complex64::default());
            for (r, xr) in x.iter().enumerate() {
                if *xr == Complex64::default() {
                    continue;
                }
                let row = &self.data[r * n..(r + 1) * n];
                for (wc, p) in w.iter_mut().zip(row) {
                    *wc += xr * p;
                }
            }
            let den =
                Complex64::new(1.0, 0.0) + x.iter().zip(&u).map(|(a, b)| a * b).sum::<Complex64>();
            if !(den.norm() >= BREAKDOWN_EPS) {
                self.data = saved;
                return UpdateOutcome::Breakdown;
            }
            let inv_den = den.inv();
            for r in 0..n {
                let ur = u[r] * inv_den;
                let row = &mut self.data[r * n..(r + 1) * n];
                for (p, wc) in row.iter_mut().zip(&w) {
                    *p -= ur * wc;
                }
            }
        }

        if !self
            .data
            .iter()
            .all(|c| c.re.is_finite() && c.im.is_finite())
        {
            self.data = saved;
            return UpdateOutcome::Breakdown;
        }
        self.frames += 1;
        if self.resymmetrize_every > 0 && self.frames % self.resymmetrize_every == 0 {
            self.resymmetrize();
        }
        UpdateOutcome::Applied
    }

    /// `P <- (P + P^H) / 2`.
    pub fn resymmetrize(&mut self) {
        let n = self.dim;
        for r in 0..n {
            let d = &mut self.data[r * n + r];
            d.im = 0.0;
            for c in r + 1..n {
                let avg = (self.data[r * n + c] + self.data[c * n + r].conj()) * 0.5;
                self.data[r * n + c] = avg;
                self.data[c * n + r] = avg.conj();
            }
        }
    }

    /// Maximum relative deviation from Hermitian symmetry.
    pub fn hermitian_defect(&self) -> f64 {
        let n = self.dim;
        let mut worst = 0.0f64;
        let mut scale = 0.0f64;
        for r in 0..n {
            for c in 0..n {
                let a = self.data[r * n + c];
                scale = scale.max(a.norm());
                worst = worst.max((a - self.data[c * n + r].conj()).norm());
            }
        }
        if scale == 0.0 {
            0.0
        } else {
            worst / scale
        }
    }
}

/// `a = P g / (g^T P g)`.
///
/// `g^T P g` is real for Hermitian `P`; the division uses the full complex
/// value so the constraint holds exactly, and a noticeable imaginary residual
/// is logged.
pub fn solve_ctf(p: &InverseCovariance, channels: usize, taps: usize) -> Result<CtfEstimate> {
    let n = p.dim();
    if n != channels * taps {
        return Err(Error::Dimension(format!(
            "covariance of dim {n} does not match {channels}x{taps}"
        )));
    }
    let pg: Vec<Complex64> = (0..n)
        .map(|r| (0..channels).map(|i| p.get(r, i * taps)).sum())
        .collect();
    let gpg: Complex64 = (0..channels).map(|i| pg[i * taps]).sum();
    finish_solve(pg, gpg, channels, taps)
}

fn finish_solve(
    pg: Vec<Complex64>,
    gpg: Complex64,
    channels: usize,
    taps: usize,
) -> Result<CtfEstimate> {
    if !(gpg.norm() >= BREAKDOWN_EPS) || !gpg.re.is_finite() {
        return Err(Error::Numerical(format!(
            "degenerate constraint normalizer g^T P g = {gpg}"
        )));
    }
    if gpg.im.abs() > 1e-6 * gpg.norm() {
        debug!("g^T P g has imaginary residual {:.3e}", gpg.im / gpg.norm());
    }
    let inv = gpg.inv();
    let coeffs: Vec<Complex64> = pg.into_iter().map(|v| v * inv).collect();
    if !coeffs.iter().all(|c| c.re.is_finite() && c.im.is_finite()) {
        return Err(Error::Numerical("non-finite CTF estimate".into()));
    }
    Ok(CtfEstimate {
        coeffs,
        channels,
        taps,
    })
}

/// Settings for one per-bin identifier.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdentConfig {
    pub channels: usize,
    pub taps: usize,
    pub lambda: f64,
    pub init_scale: f64,
    pub pair_policy: PairPolicy,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct IdentCounters {
    pub frames: u64,
    pub breakdowns: u64,
    pub degenerate_solves: u64,
}

/// Recursive identifier for one frequency bin.
#[derive(Debug, Clone)]
pub struct RecursiveIdentifier {
    cfg: IdentConfig,
    pairs: Vec<(usize, usize)>,
    cov: InverseCovariance,
    estimate: CtfEstimate,
    counters: IdentCounters,
}

impl RecursiveIdentifier {
    pub fn new(cfg: IdentConfig) -> Self {
        let cov = InverseCovariance::new(cfg.channels * cfg.taps, cfg.lambda, cfg.init_scale);
        let estimate = solve_ctf(&cov, cfg.channels, cfg.taps)
            .expect("scaled identity always yields a valid solve");
        Self {
            pairs: microphone_pairs(cfg.channels, cfg.pair_policy),
            cfg,
            cov,
            estimate,
            counters: IdentCounters::default(),
        }
    }

    pub fn config(&self) -> &IdentConfig {
        &self.cfg
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn estimate(&self) -> &CtfEstimate {
        &self.estimate
    }

    pub fn covariance(&self) -> &InverseCovariance {
        &self.cov
    }

    pub fn counters(&self) -> IdentCounters {
        self.counters
    }

    /// Feeds one frame of per-channel taps and re-solves. On breakdown or a
    /// degenerate solve the previous estimate is held.
    pub fn update(&mut self, taps: &[Vec<Complex64>]) -> &CtfEstimate {
        self.counters.frames += 1;
        let vectors: Vec<CrossRelationVector> = self
            .pairs
            .iter()
            .map(|&pair| build_pair_vector(taps, pair).expect("pairs are valid by construction"))
            .collect();
        match self.cov.update(&vectors) {
            UpdateOutcome::Applied => {
                match solve_ctf(&self.cov, self.cfg.channels, self.cfg.taps) {
                    Ok(est) => self.estimate = est,
                    Err(_) => self.counters.degenerate_solves += 1,
                }
            }
            UpdateOutcome::Breakdown => self.counters.breakdowns += 1,
        }
        &self.estimate
    }
}

/// Accumulates `R = prior * I + sum_p sum_m x_m* x_m^T` for the batch solve.
#[derive(Debug, Clone)]
pub struct BatchAccumulator {
    channels: usize,
    taps: usize,
    pairs: Vec<(usize, usize)>,
    r: DMatrix<Complex64>,
    frames: usize,
}

/// Result of [`BatchAccumulator::solve`].
#[derive(Debug, Clone)]
pub struct BatchSolution {
    pub estimate: CtfEstimate,
    /// True when the covariance was singular and had to be diagonally loaded.
    pub regularized: bool,
}

impl BatchAccumulator {
    /// `prior` is the diagonal loading, i.e. the inverse of the recursion's
    /// initial `P` scale; 0 gives the plain least-squares solution.
    pub fn new(channels: usize, taps: usize, pair_policy: PairPolicy, prior: f64) -> Self {
        let n = channels * taps;
        Self {
            channels,
            taps,
            pairs: microphone_pairs(channels, pair_policy),
            r: DMatrix::from_diagonal_element(n, n, Complex64::new(prior, 0.0)),
            frames: 0,
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn push(&mut self, taps: &[Vec<Complex64>]) -> Result<()> {
        let n = self.channels * self.taps;
        for &pair in &self.pairs {
            let x = build_pair_vector(taps, pair)?;
            let x = x.as_slice();
            for r in 0..n {
                let xr = x[r].conj();
                if xr == Complex64::default() {
                    continue;
                }
                for c in 0..n {
                    self.r[(r, c)] += xr * x[c];
                }
            }
        }
        self.frames += 1;
        Ok(())
    }

    pub fn covariance(&self) -> &DMatrix<Complex64> {
        &self.r
    }

    pub fn solve(&self) -> Result<BatchSolution> {
        if self.frames < self.taps {
            return Err(Error::Numerical(format!(
                "batch identification needs at least {} frames, got {}",
                self.taps, self.frames
            )));
        }
        let n = self.channels * self.taps;
        let g = DMatrix::from_fn(n, 1, |r, _| {
            if r % self.taps == 0 {
                Complex64::new(1.0, 0.0)
            } else {
                Complex64::default()
            }
        });
        let attempt = |m: &DMatrix<Complex64>| -> Option<CtfEstimate> {
            let y = m.clone().lu().solve(&g)?;
            let gy: Complex64 = (0..self.channels).map(|i| y[i * self.taps]).sum();
            finish_solve(y.iter().copied().collect(), gy, self.channels, self.taps).ok()
        };
        if let Some(estimate) = attempt(&self.r) {
            return Ok(BatchSolution {
                estimate,
                regularized: false,
            });
        }
        let trace: f64 = (0..n).map(|i| self.r[(i, i)].re).sum();
        let load = 1e-10 * (trace / n as f64).max(f64::MIN_POSITIVE);
        let loaded = &self.r + DMatrix::from_diagonal_element(n, n, Complex64::new(load, 0.0));
        attempt(&loaded)
            .map(|estimate| BatchSolution {
                estimate,
                regularized: true,
            })
            .ok_or_else(|| Error::Numerical("batch covariance is singular".into()))
    }
}

/// Batch identification over a whole sequence of per-frame tap buffers.
pub fn batch_identify<'a>(
    frames: impl IntoIterator<Item = &'a [Vec<Complex64>]>,
    channels: usize,
    taps: usize,
    pair_policy: PairPolicy,
    prior: f64,
) -> Result<BatchSolution> {
    let mut acc = BatchAccumulator::new(channels, taps, pair_policy, prior);
    for f in frames {
        acc.push(f)?;
    }
    acc.solve()
}

/// `lambda = (P - 1) / (P + 1)` for an effective memory of `P` frames.
pub fn forgetting_for_memory(frames: f64) -> f64 {
    (frames - 1.0) / (frames + 1.0)
}
