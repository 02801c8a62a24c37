use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::error::{Error, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 8000;

/// Time-domain multichannel signal, one `Vec` per microphone.
#[derive(Clone, Debug, PartialEq)]
pub struct MultichannelWave {
    channels: Vec<Vec<f64>>,
    sample_rate: u32,
}

impl MultichannelWave {
    pub fn new(channels: Vec<Vec<f64>>, sample_rate: u32) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::invalid("wave needs at least one channel"));
        }
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        let len = channels[0].len();
        if channels.iter().any(|c| c.len() != len) {
            return Err(Error::shape("all channels must have equal length"));
        }
        Ok(Self { channels, sample_rate })
    }

    pub fn mono(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        Self::new(vec![samples], sample_rate)
    }

    pub fn zeros(n_channels: usize, len: usize, sample_rate: u32) -> Self {
        Self { channels: vec![vec![0.0; len]; n_channels], sample_rate }
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn channel(&self, m: usize) -> &[f64] {
        &self.channels[m]
    }

    pub fn channel_mut(&mut self, m: usize) -> &mut [f64] {
        &mut self.channels[m]
    }

    pub fn channels(&self) -> &[Vec<f64>] {
        &self.channels
    }

    pub fn into_channels(self) -> Vec<Vec<f64>> {
        self.channels
    }

    /// Total energy over all channels.
    pub fn energy(&self) -> f64 {
        self.channels.iter().flatten().map(|x| x * x).sum()
    }

    pub fn truncated(&self, len: usize) -> Self {
        Self {
            channels: self.channels.iter().map(|c| c[..len.min(c.len())].to_vec()).collect(),
            sample_rate: self.sample_rate,
        }
    }
}

/// On-disk sample encoding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum WavFormat {
    Pcm16,
    #[default]
    Float32,
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<MultichannelWave> {
    let mut reader = WavReader::open(path.as_ref())?;
    let spec = reader.spec();
    let n_ch = spec.channels as usize;
    let interleaved: Vec<f64> = match spec.sample_format {
        SampleFormat::Float => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()?,
        SampleFormat::Int => {
            let full = (1i64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 / full))
                .collect::<std::result::Result<_, _>>()?
        }
    };
    let len = interleaved.len() / n_ch.max(1);
    let mut channels = vec![Vec::with_capacity(len); n_ch];
    for frame in interleaved.chunks_exact(n_ch) {
        for (c, &s) in channels.iter_mut().zip(frame) {
            c.push(s);
        }
    }
    MultichannelWave::new(channels, spec.sample_rate)
}

pub fn write_wav(path: impl AsRef<Path>, wave: &MultichannelWave, format: WavFormat) -> Result<()> {
    let spec = WavSpec {
        channels: wave.n_channels() as u16,
        sample_rate: wave.sample_rate(),
        bits_per_sample: match format {
            WavFormat::Pcm16 => 16,
            WavFormat::Float32 => 32,
        },
        sample_format: match format {
            WavFormat::Pcm16 => SampleFormat::Int,
            WavFormat::Float32 => SampleFormat::Float,
        },
    };
    let mut writer = WavWriter::create(path.as_ref(), spec)?;
    for t in 0..wave.len() {
        for c in wave.channels() {
            match format {
                WavFormat::Pcm16 => {
                    let v = (c[t] * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                    writer.write_sample(v)?;
                }
                WavFormat::Float32 => writer.write_sample(c[t] as f32)?,
            }
        }
    }
    writer.finalize()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_ragged_channels() {
        assert!(MultichannelWave::new(vec![vec![0.0; 3], vec![0.0; 4]], 8000).is_err());
        assert!(MultichannelWave::new(vec![vec![0.0; 3]], 0).is_err());
    }

    #[test]
    fn float_wav_round_trip_is_exact_for_f32_values() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let ch0: Vec<f64> = (0..100).map(|i| ((i as f32) * 0.01).sin() as f64).collect();
        let ch1: Vec<f64> = ch0.iter().map(|x| -x * 0.5).collect();
        let w = MultichannelWave::new(vec![ch0, ch1], 8000).unwrap();
        write_wav(&p, &w, WavFormat::Float32).unwrap();
        let r = read_wav(&p).unwrap();
        assert_eq!(r, w);
    }

    #[test]
    fn pcm16_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.wav");
        let ch0: Vec<f64> = (0..64).map(|i| (i as f64 * 0.3).cos() * 0.7).collect();
        let w = MultichannelWave::mono(ch0.clone(), 16000).unwrap();
        write_wav(&p, &w, WavFormat::Pcm16).unwrap();
        let r = read_wav(&p).unwrap();
        assert_eq!(r.sample_rate(), 16000);
        for (a, b) in r.channel(0).iter().zip(&ch0) {
            assert!((a - b).abs() <= 1.0 / 32768.0);
        }
    }
}
