use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::signal::read_wav;

use super::sub_rng;

fn resonance(f: f64, centre: f64, bandwidth: f64) -> f64 {
    let x = (f - centre) / bandwidth;
    1.0 / (1.0 + x * x)
}

/// Seeded speech-like signal: voiced syllables (amplitude-modulated harmonic
/// series with two formant resonances and a pitch glide), occasional noise
/// bursts, and pauses. Scaled to an RMS of 0.1.
pub fn speech_like(len: usize, sample_rate: u32, seed: u64) -> Vec<f64> {
    let fs = sample_rate as f64;
    let mut rng = sub_rng(seed, 1);
    let base_f0: f64 = rng.gen_range(90.0..220.0);
    let mut out = vec![0.0; len];
    let mut t = (rng.gen_range(0.0..0.15) * fs) as usize;
    while t < len {
        let dur = ((rng.gen_range(0.10..0.35) * fs) as usize).max(8);
        let end = (t + dur).min(len);
        let voiced = rng.gen_bool(0.8);
        if voiced {
            let f0_start: f64 = base_f0 * rng.gen_range(0.9..1.1);
            let f0_end = f0_start * rng.gen_range(0.85..1.15);
            let f1 = rng.gen_range(300.0..900.0);
            let f2 = rng.gen_range(900.0..2500.0);
            let n_harm = ((0.45 * fs / f0_start.max(f0_end)) as usize).max(1);
            let amps: Vec<f64> = (1..=n_harm)
                .map(|h| {
                    let f = h as f64 * f0_start;
                    (resonance(f, f1, 120.0) + 0.6 * resonance(f, f2, 180.0) + 0.02) / (h as f64).sqrt()
                })
                .collect();
            let mut phases: Vec<f64> = (0..n_harm).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
            for (n, s) in out[t..end].iter_mut().enumerate() {
                let u = n as f64 / dur as f64;
                let f0 = f0_start + (f0_end - f0_start) * u;
                let env = (PI * u).sin().powf(1.5);
                let mut acc = 0.0;
                for (h, (a, ph)) in amps.iter().zip(phases.iter_mut()).enumerate() {
                    *ph += 2.0 * PI * (h + 1) as f64 * f0 / fs;
                    acc += a * ph.sin();
                }
                *s += env * acc;
            }
            for ph in &mut phases {
                *ph %= 2.0 * PI;
            }
        } else {
            let level = rng.gen_range(0.1..0.3);
            let mut prev = 0.0;
            for (n, s) in out[t..end].iter_mut().enumerate() {
                let u = n as f64 / dur as f64;
                let w: f64 = rng.sample(StandardNormal);
                // first difference tilts the burst towards high frequencies
                *s += level * (PI * u).sin() * (w - 0.9 * prev);
                prev = w;
            }
        }
        t = end + (rng.gen_range(0.05..0.25) * fs) as usize;
    }
    let rms = (out.iter().map(|x| x * x).sum::<f64>() / len.max(1) as f64).sqrt();
    if rms > 0.0 {
        out.iter_mut().for_each(|x| *x *= 0.1 / rms);
    }
    out
}

/// Mono signals from every `.wav` file in `dir`, sorted by file name.
/// Multichannel files contribute their first channel.
pub fn load_corpus(dir: impl AsRef<Path>) -> Result<Vec<(String, Vec<f64>, u32)>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir.as_ref())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::EmptyDataset(format!("no wav files in {}", dir.as_ref().display())));
    }
    paths
        .into_iter()
        .map(|p| {
            let w = read_wav(&p)?;
            let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            Ok((name, w.channel(0).to_vec(), w.sample_rate()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_normalised() {
        let a = speech_like(16000, 8000, 3);
        assert_eq!(a, speech_like(16000, 8000, 3));
        assert_ne!(a, speech_like(16000, 8000, 4));
        let rms = (a.iter().map(|x| x * x).sum::<f64>() / a.len() as f64).sqrt();
        assert!((rms - 0.1).abs() < 1e-12);
    }

    #[test]
    fn has_pauses_and_activity() {
        let a = speech_like(16000, 8000, 9);
        let frames: Vec<f64> = a.chunks(160).map(|c| c.iter().map(|x| x * x).sum::<f64>()).collect();
        let max = frames.iter().cloned().fold(0.0, f64::max);
        assert!(frames.iter().any(|&e| e < 1e-3 * max));
        assert!(frames.iter().filter(|&&e| e > 0.1 * max).count() > 10);
    }

    #[test]
    fn corpus_loader_reads_sorted_wavs() {
        use crate::signal::{write_wav, MultichannelWave, WavFormat};
        let dir = tempfile::tempdir().unwrap();
        for (name, v) in [("b", 0.25), ("a", 0.5)] {
            let w = MultichannelWave::mono(vec![v; 10], 8000).unwrap();
            write_wav(dir.path().join(format!("{name}.wav")), &w, WavFormat::Float32).unwrap();
        }
        let c = load_corpus(dir.path()).unwrap();
        assert_eq!(c[0].0, "a");
        assert_eq!(c[1].1[0], 0.25);
        assert!(load_corpus(tempfile::tempdir().unwrap().path()).is_err());
    }
}
