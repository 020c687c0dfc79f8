//! Per-bin rolling history of multichannel STFT coefficients.

use num_complex::Complex64;

/// Ring buffer holding the most recent `depth` frames of one frequency bin
/// for every channel. Entries before the stream start read as zero.
#[derive(Debug, Clone)]
pub struct FrameHistory {
    channels: usize,
    depth: usize,
    // [slot * channels + channel]
    data: Vec<Complex64>,
    head: usize,
    pushed: usize,
}

impl FrameHistory {
    /// History deep enough for `max_taps` taps at frame spacing `spacing`.
    pub fn for_taps(channels: usize, max_taps: usize, spacing: usize) -> Self {
        let depth = spacing * max_taps.saturating_sub(1) + 1;
        Self {
            channels,
            depth,
            data: vec![Complex64::default(); depth * channels],
            head: 0,
            pushed: 0,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    /// Number of frames pushed so far.
    pub fn len(&self) -> usize {
        self.pushed
    }

    pub fn is_empty(&self) -> bool {
        self.pushed == 0
    }

    /// Appends the current frame's coefficient for each channel.
    pub fn push(&mut self, values: impl IntoIterator<Item = Complex64>) {
        self.head = (self.head + 1) % self.depth;
        let base = self.head * self.channels;
        let mut n = 0;
        for (slot, v) in self.data[base..base + self.channels].iter_mut().zip(values) {
            *slot = v;
            n += 1;
        }
        debug_assert_eq!(n, self.channels);
        self.pushed += 1;
    }

    /// Coefficient of `channel` at `lag` frames before the newest one.
    pub fn get(&self, channel: usize, lag: usize) -> Complex64 {
        if lag >= self.pushed || lag >= self.depth {
            return Complex64::default();
        }
        let slot = (self.head + self.depth - lag) % self.depth;
        self.data[slot * self.channels + channel]
    }

    /// `[x_p, x_{p-D}, ..., x_{p-D(count-1)}]` for one channel.
    pub fn taps(&self, channel: usize, count: usize, spacing: usize) -> Vec<Complex64> {
        (0..count).map(|q| self.get(channel, q * spacing)).collect()
    }

    /// Same as [`FrameHistory::taps`] but with magnitudes.
    pub fn magnitude_taps(&self, channel: usize, count: usize, spacing: usize) -> Vec<f64> {
        (0..count)
            .map(|q| self.get(channel, q * spacing).norm())
            .collect()
    }
}
