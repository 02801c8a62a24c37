use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::signal::sqrt_hann;

const FRAME: usize = 256;
const HOP: usize = 128;
const LPC_ORDER: usize = 10;
/// Frames more than this far below the loudest reference frame are skipped.
const ACTIVE_RANGE_DB: f64 = 40.0;
const CD_MAX_DB: f64 = 10.0;
const FW_BANDS: usize = 25;
const FW_GAMMA: f64 = 0.2;
const FW_MIN_DB: f64 = -10.0;
const FW_MAX_DB: f64 = 35.0;

fn hann() -> Vec<f64> {
    sqrt_hann(FRAME).iter().map(|w| w * w).collect()
}

fn frames(x: &[f64]) -> impl Iterator<Item = &[f64]> {
    let n = if x.len() >= FRAME { (x.len() - FRAME) / HOP + 1 } else { 0 };
    (0..n).map(move |f| &x[f * HOP..f * HOP + FRAME])
}

fn check_pair(est: &[f64], reference: &[f64]) -> Result<()> {
    if est.len() != reference.len() {
        return Err(Error::shape("estimate and reference must have equal length"));
    }
    if reference.len() < FRAME {
        return Err(Error::InputTooShort { len: reference.len(), need: FRAME });
    }
    if est.iter().chain(reference).any(|x| !x.is_finite()) {
        return Err(Error::non_finite("metric input"));
    }
    if reference.iter().all(|&x| x == 0.0) {
        return Err(Error::Degenerate("reference signal is silent".into()));
    }
    Ok(())
}

fn active_mask(reference: &[f64]) -> Vec<bool> {
    let e: Vec<f64> = frames(reference).map(|f| f.iter().map(|x| x * x).sum()).collect();
    let max = e.iter().cloned().fold(0.0, f64::max);
    let thr = max * 10f64.powf(-ACTIVE_RANGE_DB / 10.0);
    e.iter().map(|&v| v > 0.0 && v >= thr).collect()
}

/// Predictor coefficients `a_1..a_p` of `A(z) = 1 + Σ a_k z⁻ᵏ` by Levinson–Durbin.
fn lpc(frame: &[f64], window: &[f64], order: usize) -> Vec<f64> {
    let x: Vec<f64> = frame.iter().zip(window).map(|(a, w)| a * w).collect();
    let mut r: Vec<f64> = (0..=order).map(|lag| x.iter().zip(&x[lag..]).map(|(a, b)| a * b).sum()).collect();
    if r[0] <= 0.0 {
        return vec![0.0; order];
    }
    r[0] *= 1.0 + 1e-9;
    let mut a = vec![0.0; order + 1];
    a[0] = 1.0;
    let mut err = r[0];
    for i in 1..=order {
        let acc: f64 = (1..i).map(|j| a[j] * r[i - j]).sum::<f64>() + r[i];
        let k = -acc / err;
        let prev = a.clone();
        for j in 1..i {
            a[j] = prev[j] + k * prev[i - j];
        }
        a[i] = k;
        err *= 1.0 - k * k;
        if err <= 0.0 {
            break;
        }
    }
    a[1..].to_vec()
}

/// Cepstrum `c_1..c_n` of the all-pole model `1/A(z)`.
fn lpc_cepstrum(a: &[f64], n: usize) -> Vec<f64> {
    let p = a.len();
    let mut c = vec![0.0; n + 1];
    for m in 1..=n {
        let mut v = if m <= p { -a[m - 1] } else { 0.0 };
        for k in 1..m {
            if m - k <= p {
                v -= (k as f64 / m as f64) * c[k] * a[m - k - 1];
            }
        }
        c[m] = v;
    }
    c[1..].to_vec()
}

/// Frame-averaged LPC cepstral distance over speech-active frames, in dB.
pub fn cepstral_distance(est: &[f64], reference: &[f64]) -> Result<f64> {
    check_pair(est, reference)?;
    let w = hann();
    let active = active_mask(reference);
    let k = 10.0 / std::f64::consts::LN_10;
    let mut sum = 0.0;
    let mut count = 0usize;
    for ((fe, fr), &on) in frames(est).zip(frames(reference)).zip(&active) {
        if !on {
            continue;
        }
        let ce = lpc_cepstrum(&lpc(fe, &w, LPC_ORDER), LPC_ORDER);
        let cr = lpc_cepstrum(&lpc(fr, &w, LPC_ORDER), LPC_ORDER);
        let d2: f64 = ce.iter().zip(&cr).map(|(a, b)| (a - b) * (a - b)).sum();
        sum += (k * (2.0 * d2).sqrt()).clamp(0.0, CD_MAX_DB);
        count += 1;
    }
    Ok(sum / count.max(1) as f64)
}

fn mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn inv_mel(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Bin ranges of mel-spaced bands covering `[0, fs/2]`; empty bands are dropped.
fn mel_bands(sample_rate: u32) -> Vec<std::ops::Range<usize>> {
    let n_bins = FRAME / 2 + 1;
    let top = mel(sample_rate as f64 / 2.0);
    let edge = |b: usize| {
        let f = inv_mel(top * b as f64 / FW_BANDS as f64);
        ((f / (sample_rate as f64 / 2.0) * (n_bins - 1) as f64).round() as usize).min(n_bins)
    };
    let mut out = Vec::new();
    for b in 0..FW_BANDS {
        let (lo, hi) = (edge(b), if b + 1 == FW_BANDS { n_bins } else { edge(b + 1) });
        if hi > lo {
            out.push(lo..hi);
        }
    }
    out
}

/// Frequency-weighted segmental SNR in dB.
///
/// Band noise is the energy of the complex spectral difference, so phase
/// errors count; band weights are the reference band magnitude to the 0.2.
pub fn fwseg_snr(est: &[f64], reference: &[f64], sample_rate: u32) -> Result<f64> {
    check_pair(est, reference)?;
    let w = hann();
    let bands = mel_bands(sample_rate);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(FRAME);
    let spectrum = |f: &[f64]| {
        let mut v: Vec<Complex64> = f.iter().zip(&w).map(|(x, w)| Complex64::new(x * w, 0.0)).collect();
        fft.process(&mut v);
        v.truncate(FRAME / 2 + 1);
        v
    };
    let active = active_mask(reference);
    let mut sum = 0.0;
    let mut count = 0usize;
    for ((fe, fr), &on) in frames(est).zip(frames(reference)).zip(&active) {
        if !on {
            continue;
        }
        let se = spectrum(fe);
        let sr = spectrum(fr);
        let (mut num, mut den) = (0.0, 0.0);
        for band in &bands {
            let sig: f64 = sr[band.clone()].iter().map(|z| z.norm_sqr()).sum();
            let err: f64 = band.clone().map(|b| (sr[b] - se[b]).norm_sqr()).sum();
            let weight = sig.sqrt().powf(FW_GAMMA);
            let snr = if err > 0.0 { 10.0 * (sig / err).log10() } else { FW_MAX_DB };
            num += weight * snr.clamp(FW_MIN_DB, FW_MAX_DB);
            den += weight;
        }
        if den > 0.0 {
            sum += num / den;
            count += 1;
        }
    }
    Ok(sum / count.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::speech_like;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn white(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    #[test]
    fn cepstrum_of_single_pole() {
        // 1/(1 − ρz⁻¹) has c_n = ρⁿ/n
        let rho: f64 = 0.7;
        let c = lpc_cepstrum(&[-rho], 5);
        for (n, v) in c.iter().enumerate() {
            let m = (n + 1) as f64;
            assert!((v - rho.powf(m) / m).abs() < 1e-12);
        }
    }

    #[test]
    fn levinson_recovers_ar2() {
        let mut x = white(20000, 3);
        for t in 2..x.len() {
            x[t] += 1.2 * x[t - 1] - 0.5 * x[t - 2];
        }
        let a = lpc(&x, &vec![1.0; x.len()], 2);
        assert!((a[0] + 1.2).abs() < 0.02 && (a[1] - 0.5).abs() < 0.02, "{a:?}");
    }

    #[test]
    fn cd_identity_and_gain() {
        let r = speech_like(8000, 8000, 1);
        assert_eq!(cepstral_distance(&r, &r).unwrap(), 0.0);
        let half: Vec<f64> = r.iter().map(|x| 0.5 * x).collect();
        assert!(cepstral_distance(&half, &r).unwrap() < 1e-6);
    }

    #[test]
    fn cd_noise_against_speech() {
        let r = speech_like(8000, 8000, 2);
        assert!(cepstral_distance(&white(8000, 1), &r).unwrap() > 2.0);
    }

    #[test]
    fn cd_silent_reference_is_error() {
        assert!(cepstral_distance(&[1.0; 1000], &[0.0; 1000]).is_err());
    }

    #[test]
    fn fw_identity_hits_ceiling() {
        let r = speech_like(8000, 8000, 3);
        assert_eq!(fwseg_snr(&r, &r, 8000).unwrap(), 35.0);
    }

    #[test]
    fn fw_ten_db_noise() {
        let r = white(16000, 4);
        let n = white(16000, 5);
        let est: Vec<f64> = r.iter().zip(&n).map(|(a, b)| a + b * 10f64.powf(-0.5)).collect();
        let v = fwseg_snr(&est, &r, 8000).unwrap();
        assert!((v - 10.0).abs() <= 2.0, "{v}");
    }

    #[test]
    fn fw_anti_phase_is_non_positive() {
        let r = speech_like(8000, 8000, 6);
        let est: Vec<f64> = r.iter().map(|x| -x).collect();
        assert!(fwseg_snr(&est, &r, 8000).unwrap() <= 0.0);
    }

    #[test]
    fn mel_bands_tile_spectrum() {
        let b = mel_bands(8000);
        assert_eq!(b[0].start, 0);
        assert_eq!(b.last().unwrap().end, FRAME / 2 + 1);
        for w in b.windows(2) {
            assert_eq!(w[0].end, w[1].start);
        }
    }
}
