use std::f64::consts::PI;

use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::wave::MultichannelWave;
use crate::error::{Error, Result};
use crate::linalg::{CVec, C64};

pub const DEFAULT_FRAME: usize = 256;
pub const DEFAULT_HOP: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpecKind {
    Mixture,
    Dereverberated,
    SourceImage,
}

/// Multichannel STFT, stored `[mic][frame][freq]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    bins: Vec<C64>,
    n_mics: usize,
    n_frames: usize,
    n_freqs: usize,
    pub frame_size: usize,
    pub hop: usize,
    pub sample_rate: u32,
    /// Length of the analysed waveform; synthesis pads back to it.
    pub signal_len: usize,
    pub kind: SpecKind,
}

impl Spectrogram {
    /// Spectrogram with explicit contents. `frame_size` may be any even value
    /// consistent with `n_freqs`; synthesis additionally requires COLA.
    pub fn from_bins(
        bins: Vec<C64>,
        n_mics: usize,
        n_frames: usize,
        n_freqs: usize,
        frame_size: usize,
        hop: usize,
    ) -> Result<Self> {
        if bins.len() != n_mics * n_frames * n_freqs {
            return Err(Error::shape(format!(
                "{} bins for {n_mics}x{n_frames}x{n_freqs}",
                bins.len()
            )));
        }
        if n_mics == 0 {
            return Err(Error::shape("spectrogram needs at least one channel"));
        }
        if frame_size / 2 + 1 != n_freqs {
            return Err(Error::shape(format!("K={n_freqs} inconsistent with frame size {frame_size}")));
        }
        let signal_len = if n_frames == 0 { 0 } else { (n_frames - 1) * hop + frame_size };
        Ok(Self {
            bins,
            n_mics,
            n_frames,
            n_freqs,
            frame_size,
            hop,
            sample_rate: super::DEFAULT_SAMPLE_RATE,
            signal_len,
            kind: SpecKind::Mixture,
        })
    }

    pub fn zeros(n_mics: usize, n_frames: usize, n_freqs: usize) -> Self {
        let frame_size = 2 * (n_freqs - 1);
        Self::from_bins(
            vec![C64::new(0.0, 0.0); n_mics * n_frames * n_freqs],
            n_mics,
            n_frames,
            n_freqs,
            frame_size,
            (frame_size / 4).max(1),
        )
        .expect("consistent shape")
    }

    /// Same metadata, new contents.
    pub fn with_bins(&self, bins: Vec<C64>, kind: SpecKind) -> Self {
        assert_eq!(bins.len(), self.bins.len());
        Self { bins, kind, ..self.clone() }
    }

    #[inline]
    pub fn n_mics(&self) -> usize {
        self.n_mics
    }
    #[inline]
    pub fn n_frames(&self) -> usize {
        self.n_frames
    }
    #[inline]
    pub fn n_freqs(&self) -> usize {
        self.n_freqs
    }

    #[inline]
    fn offset(&self, m: usize, l: usize, k: usize) -> usize {
        (m * self.n_frames + l) * self.n_freqs + k
    }

    #[inline]
    pub fn get(&self, m: usize, l: usize, k: usize) -> C64 {
        self.bins[self.offset(m, l, k)]
    }

    #[inline]
    pub fn set(&mut self, m: usize, l: usize, k: usize, z: C64) {
        let o = self.offset(m, l, k);
        self.bins[o] = z;
    }

    /// Microphone vector `x_{l,k}`.
    #[inline]
    pub fn vector(&self, l: usize, k: usize) -> CVec {
        let mut v = CVec::zeros(self.n_mics);
        for m in 0..self.n_mics {
            v[m] = self.get(m, l, k);
        }
        v
    }

    pub fn set_vector(&mut self, l: usize, k: usize, x: &CVec) {
        for m in 0..self.n_mics {
            self.set(m, l, k, x[m]);
        }
    }

    pub fn bins(&self) -> &[C64] {
        &self.bins
    }

    pub fn bins_mut(&mut self) -> &mut [C64] {
        &mut self.bins
    }

    pub fn is_finite(&self) -> bool {
        self.bins.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    /// Frames `[start, start + len)`.
    pub fn slice_frames(&self, start: usize, len: usize) -> Self {
        assert!(start + len <= self.n_frames);
        let mut bins = Vec::with_capacity(self.n_mics * len * self.n_freqs);
        for m in 0..self.n_mics {
            let a = self.offset(m, start, 0);
            bins.extend_from_slice(&self.bins[a..a + len * self.n_freqs]);
        }
        Self {
            bins,
            n_frames: len,
            signal_len: if len == 0 { 0 } else { (len - 1) * self.hop + self.frame_size },
            ..self.clone()
        }
    }

    /// Mean of `|x|²` over frames and channels, per frequency.
    pub fn mean_power_per_freq(&self) -> Vec<f64> {
        let mut p = vec![0.0; self.n_freqs];
        for m in 0..self.n_mics {
            for l in 0..self.n_frames {
                for (k, pk) in p.iter_mut().enumerate() {
                    *pk += self.get(m, l, k).norm_sqr();
                }
            }
        }
        let n = (self.n_mics * self.n_frames).max(1) as f64;
        p.iter_mut().for_each(|x| *x /= n);
        p
    }

    pub fn mean_power(&self) -> f64 {
        self.bins.iter().map(|z| z.norm_sqr()).sum::<f64>() / self.bins.len().max(1) as f64
    }
}

/// Periodic square-root Hann window.
pub fn sqrt_hann(n: usize) -> Vec<f64> {
    (0..n).map(|i| (PI * i as f64 / n as f64).sin().abs()).collect()
}

/// Overlap-add normalisation `Σ_m w²(t + m·hop)`, verified constant.
fn cola_gain(window: &[f64], hop: usize) -> Result<f64> {
    let n = window.len();
    let sums: Vec<f64> = (0..hop)
        .map(|t| (t..n).step_by(hop).map(|i| window[i] * window[i]).sum())
        .collect();
    let g = sums[0];
    if g <= 0.0 || sums.iter().any(|s| (s - g).abs() > 1e-9 * g) {
        return Err(Error::invalid(format!("window is not COLA for frame {n}, hop {hop}")));
    }
    Ok(g)
}

fn check_framing(frame_size: usize, hop: usize) -> Result<()> {
    if frame_size < 2 || !frame_size.is_power_of_two() {
        return Err(Error::invalid(format!("frame size {frame_size} must be a power of two")));
    }
    if hop == 0 || frame_size % hop != 0 {
        return Err(Error::invalid(format!("hop {hop} must divide frame size {frame_size}")));
    }
    Ok(())
}

/// Short-time Fourier transform with a square-root Hann analysis window.
/// Frames start at sample 0 and no padding is applied; trailing samples that
/// do not fill a frame are dropped from the analysis.
pub fn stft(wave: &MultichannelWave, frame_size: usize, hop: usize) -> Result<Spectrogram> {
    check_framing(frame_size, hop)?;
    let len = wave.len();
    if len < frame_size {
        return Err(Error::InputTooShort { len, need: frame_size });
    }
    let n_frames = (len - frame_size) / hop + 1;
    let n_freqs = frame_size / 2 + 1;
    let n_mics = wave.n_channels();
    let window = sqrt_hann(frame_size);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(frame_size);
    let mut bins = vec![C64::new(0.0, 0.0); n_mics * n_frames * n_freqs];
    let mut buf = vec![C64::new(0.0, 0.0); frame_size];
    let mut scratch = vec![C64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    for m in 0..n_mics {
        let x = wave.channel(m);
        for l in 0..n_frames {
            let start = l * hop;
            for (i, b) in buf.iter_mut().enumerate() {
                *b = C64::new(x[start + i] * window[i], 0.0);
            }
            fft.process_with_scratch(&mut buf, &mut scratch);
            let o = (m * n_frames + l) * n_freqs;
            bins[o..o + n_freqs].copy_from_slice(&buf[..n_freqs]);
        }
    }
    let mut spec = Spectrogram::from_bins(bins, n_mics, n_frames, n_freqs, frame_size, hop)?;
    spec.sample_rate = wave.sample_rate();
    spec.signal_len = len;
    Ok(spec)
}

/// Weighted overlap-add synthesis. The synthesis window is the analysis
/// window divided by the COLA gain, so `istft(stft(x))` reproduces every
/// sample covered by `frame_size / hop` frames. Output is zero-padded to
/// `signal_len`.
pub fn istft(spec: &Spectrogram) -> Result<MultichannelWave> {
    let (n, hop) = (spec.frame_size, spec.hop);
    check_framing(n, hop)?;
    if spec.n_freqs != n / 2 + 1 {
        return Err(Error::shape("frequency count inconsistent with frame size"));
    }
    let covered = if spec.n_frames == 0 { 0 } else { (spec.n_frames - 1) * hop + n };
    if spec.signal_len < covered {
        return Err(Error::shape(format!(
            "signal length {} shorter than framed span {covered}",
            spec.signal_len
        )));
    }
    let window = sqrt_hann(n);
    let gain = cola_gain(&window, hop)?;
    let synth: Vec<f64> = window.iter().map(|w| w / gain).collect();
    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(n);
    let mut buf = vec![C64::new(0.0, 0.0); n];
    let mut scratch = vec![C64::new(0.0, 0.0); ifft.get_inplace_scratch_len()];
    let k_max = spec.n_freqs;
    let mut channels = Vec::with_capacity(spec.n_mics);
    for m in 0..spec.n_mics {
        let mut y = vec![0.0; spec.signal_len];
        for l in 0..spec.n_frames {
            for k in 0..k_max {
                buf[k] = spec.get(m, l, k);
            }
            // real signal: DC and Nyquist bins carry no imaginary part
            buf[0].im = 0.0;
            buf[k_max - 1].im = 0.0;
            for k in k_max..n {
                buf[k] = buf[n - k].conj();
            }
            ifft.process_with_scratch(&mut buf, &mut scratch);
            let start = l * hop;
            for i in 0..n {
                y[start + i] += buf[i].re / n as f64 * synth[i];
            }
        }
        channels.push(y);
    }
    MultichannelWave::new(channels, spec.sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(len: usize, ch: usize, seed: u64) -> MultichannelWave {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let chans = (0..ch).map(|_| (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        MultichannelWave::new(chans, 8000).unwrap()
    }

    fn snr_db(reference: &[f64], est: &[f64]) -> f64 {
        let s: f64 = reference.iter().map(|x| x * x).sum();
        let e: f64 = reference.iter().zip(est).map(|(a, b)| (a - b).powi(2)).sum();
        10.0 * (s / e.max(1e-300)).log10()
    }

    #[test]
    fn default_framing_gives_129_bins() {
        let s = stft(&noise(1024, 1, 0), DEFAULT_FRAME, DEFAULT_HOP).unwrap();
        assert_eq!(s.n_freqs(), 129);
        assert_eq!(s.n_frames(), (1024 - 256) / 64 + 1);
    }

    #[test]
    fn zero_wave_gives_zero_spectrogram() {
        let s = stft(&MultichannelWave::zeros(2, 600, 8000), 256, 64).unwrap();
        assert!(s.bins().iter().all(|z| z.norm() == 0.0));
        let w = istft(&s).unwrap();
        assert!(w.channels().iter().flatten().all(|&x| x == 0.0));
    }

    #[test]
    fn too_short_input_is_rejected() {
        let err = stft(&MultichannelWave::zeros(1, 100, 8000), 256, 64).unwrap_err();
        assert!(matches!(err, Error::InputTooShort { .. }));
        assert!(err.to_string().contains("input too short"));
    }

    #[test]
    fn bad_framing_is_rejected() {
        let w = noise(1000, 1, 1);
        assert!(stft(&w, 200, 50).is_err());
        assert!(stft(&w, 256, 60).is_err());
    }

    #[test]
    fn round_trip_interior_exceeds_100_db() {
        let w = noise(8000, 2, 7);
        let s = stft(&w, 256, 64).unwrap();
        let y = istft(&s).unwrap();
        let end = s.n_frames() * 64;
        for m in 0..2 {
            let snr = snr_db(&w.channel(m)[192..end], &y.channel(m)[192..end]);
            assert!(snr >= 100.0, "snr {snr}");
        }
    }

    #[test]
    fn single_frame_is_windowed_inverse_dft() {
        let n = 16;
        let mut bins = vec![C64::new(0.0, 0.0); n / 2 + 1];
        bins[2] = C64::new(1.0, 0.5);
        let spec = Spectrogram::from_bins(bins.clone(), 1, 1, n / 2 + 1, n, 4).unwrap();
        let y = istft(&spec).unwrap();
        let w = sqrt_hann(n);
        let gain: f64 = (0..n).step_by(4).map(|i| w[i] * w[i]).sum();
        for t in 0..n {
            // real inverse DFT of a Hermitian-extended spectrum
            let mut acc = 0.0;
            for (k, z) in bins.iter().enumerate() {
                let ang = 2.0 * PI * (k * t) as f64 / n as f64;
                let term = z * C64::new(ang.cos(), ang.sin());
                let mult = if k == 0 || k == n / 2 { 1.0 } else { 2.0 };
                acc += mult * term.re;
            }
            let expect = acc / n as f64 * w[t] / gain;
            assert!((y.channel(0)[t] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn stft_is_linear() {
        let a = noise(2000, 2, 1);
        let b = noise(2000, 2, 2);
        let (alpha, beta) = (0.7, -1.3);
        let mix: Vec<Vec<f64>> = (0..2)
            .map(|m| a.channel(m).iter().zip(b.channel(m)).map(|(x, y)| alpha * x + beta * y).collect())
            .collect();
        let sa = stft(&a, 256, 64).unwrap();
        let sb = stft(&b, 256, 64).unwrap();
        let sm = stft(&MultichannelWave::new(mix, 8000).unwrap(), 256, 64).unwrap();
        for i in 0..sm.bins().len() {
            let expect = sa.bins()[i] * alpha + sb.bins()[i] * beta;
            assert!((sm.bins()[i] - expect).norm() < 1e-12);
        }
    }

    #[test]
    fn istft_rejects_inconsistent_metadata() {
        let mut s = stft(&noise(1000, 1, 3), 256, 64).unwrap();
        s.signal_len = 10;
        assert!(istft(&s).is_err());
    }
}
