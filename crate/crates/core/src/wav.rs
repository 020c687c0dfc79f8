//! Multichannel WAV I/O: 16-bit integer or 32-bit float PCM in, float out.

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Audio {
    /// Deinterleaved samples, one vector per channel.
    pub channels: Vec<Vec<f64>>,
    pub sample_rate: u32,
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<Audio> {
    let mut reader = WavReader::open(path.as_ref())?;
    let spec = reader.spec();
    let n = spec.channels as usize;
    if n == 0 {
        return Err(Error::Config("WAV file declares zero channels".into()));
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()?,
        (SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| f64::from(v) / 32768.0))
            .collect::<std::result::Result<_, _>>()?,
        (fmt, bits) => {
            return Err(Error::Config(format!(
                "unsupported WAV sample format {fmt:?} with {bits} bits"
            )))
        }
    };
    let frames = interleaved.len() / n;
    let channels = (0..n)
        .map(|c| (0..frames).map(|t| interleaved[t * n + c]).collect())
        .collect();
    Ok(Audio {
        channels,
        sample_rate: spec.sample_rate,
    })
}

/// Reads a file and insists on `sample_rate`; nothing is resampled.
pub fn read_wav_at(path: impl AsRef<Path>, sample_rate: u32) -> Result<Audio> {
    let audio = read_wav(path)?;
    if audio.sample_rate != sample_rate {
        return Err(Error::Config(format!(
            "sample rate {} Hz not supported, expected {sample_rate} Hz",
            audio.sample_rate
        )));
    }
    Ok(audio)
}

/// Writes 32-bit float PCM.
pub fn write_wav(path: impl AsRef<Path>, channels: &[Vec<f64>], sample_rate: u32) -> Result<()> {
    let n = channels.len();
    if n == 0 || n > u16::MAX as usize {
        return Err(Error::Config(format!("cannot write {n} channels")));
    }
    let len = channels[0].len();
    for (c, ch) in channels.iter().enumerate() {
        if ch.len() != len {
            return Err(Error::ChannelLengthMismatch {
                channel: c,
                len: ch.len(),
                expected: len,
            });
        }
    }
    let spec = WavSpec {
        channels: n as u16,
        sample_rate,
        bits_per_sample: 32,
        sample_format: SampleFormat::Float,
    };
    let mut w = WavWriter::create(path.as_ref(), spec)?;
    for t in 0..len {
        for ch in channels {
            w.write_sample(ch[t] as f32)?;
        }
    }
    w.finalize()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_round_trip_and_rate_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let x = vec![vec![0.5, -0.25, 0.125], vec![0.0, 1.0, -1.0]];
        write_wav(&path, &x, 16_000).unwrap();
        let a = read_wav_at(&path, 16_000).unwrap();
        assert_eq!(a.channels, x);
        assert!(read_wav_at(&path, 8_000).is_err());
    }

    #[test]
    fn reads_16_bit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.wav");
        let spec = WavSpec {
            channels: 2,
            sample_rate: 16_000,
            bits_per_sample: 16,
            sample_format: SampleFormat::Int,
        };
        let mut w = WavWriter::create(&path, spec).unwrap();
        for v in [16384i16, -32768, 0, 8192] {
            w.write_sample(v).unwrap();
        }
        w.finalize().unwrap();
        let a = read_wav(&path).unwrap();
        assert_eq!(a.channels, vec![vec![0.5, 0.0], vec![-1.0, 0.25]]);
    }

    #[test]
    fn rejects_ragged_channels() {
        let dir = tempfile::tempdir().unwrap();
        assert!(write_wav(
            dir.path().join("c.wav"),
            &[vec![0.0; 3], vec![0.0; 2]],
            16_000
        )
        .is_err());
    }
}
