use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::sub_rng;

/// Speed of sound in m/s.
pub const SPEED_OF_SOUND: f64 = 343.0;

/// Half width of the windowed-sinc direct-path kernel, in samples.
const SINC_HALF: isize = 16;

/// Distance over which the late tail decorrelates between microphones.
const TAIL_DECORRELATION_M: f64 = 0.2;

/// Stochastic room impulse response description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RirSpec {
    pub rt60: f64,
    /// Direct-path delay for each microphone, in (fractional) samples.
    pub direct_delays: Vec<f64>,
    pub taps: usize,
    pub sample_rate: u32,
    /// Direct-to-reverberant energy ratio of the generated response.
    pub drr_db: f64,
    /// Inter-microphone spacing in metres; sets the tail correlation.
    pub mic_spacing: f64,
}

impl RirSpec {
    /// Far-field source at `azimuth_deg` seen by a uniform linear array.
    pub fn far_field(
        n_mics: usize,
        mic_spacing: f64,
        azimuth_deg: f64,
        distance_m: f64,
        rt60: f64,
        drr_db: f64,
        sample_rate: u32,
    ) -> Self {
        let fs = sample_rate as f64;
        let base = distance_m / SPEED_OF_SOUND * fs;
        let c = azimuth_deg.to_radians().cos();
        let mid = (n_mics as f64 - 1.0) / 2.0;
        let direct_delays =
            (0..n_mics).map(|m| base + (m as f64 - mid) * mic_spacing * c / SPEED_OF_SOUND * fs).collect();
        let taps = (rt60 * fs * 1.1).ceil() as usize + base.ceil() as usize + SINC_HALF as usize + 1;
        Self { rt60, direct_delays, taps, sample_rate, drr_db, mic_spacing }
    }

    pub fn n_mics(&self) -> usize {
        self.direct_delays.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rt60 > 0.0 && self.rt60.is_finite()) {
            return Err(Error::invalid("rt60 must be positive"));
        }
        if self.direct_delays.is_empty() {
            return Err(Error::invalid("RIR needs at least one microphone"));
        }
        if self.direct_delays.iter().any(|&d| !(d >= 0.0) || d.ceil() as usize >= self.taps) {
            return Err(Error::invalid("direct delay must be non-negative and inside the response"));
        }
        if self.sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        Ok(())
    }

    /// Amplitude envelope `exp(−3 ln10 · t / rt60)`; energy falls 60 dB at `rt60`.
    pub fn envelope(&self, t_seconds: f64) -> f64 {
        (-3.0 * std::f64::consts::LN_10 * t_seconds / self.rt60).exp()
    }
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Windowed-sinc fractional delay added into `out`.
fn add_fractional_impulse(out: &mut [f64], delay: f64) {
    let centre = delay.round() as isize;
    for n in (centre - SINC_HALF)..=(centre + SINC_HALF) {
        if n < 0 || n as usize >= out.len() {
            continue;
        }
        let x = n as f64 - delay;
        let w = 0.5 + 0.5 * (std::f64::consts::PI * x / (SINC_HALF as f64 + 1.0)).cos();
        out[n as usize] += sinc(x) * w;
    }
}

/// Impulse responses `[m][t]`: a unit direct path at each microphone's delay
/// plus an exponentially decaying Gaussian tail.
pub fn synth_rir(spec: &RirSpec, seed: u64) -> Result<Vec<Vec<f64>>> {
    spec.validate()?;
    let fs = spec.sample_rate as f64;
    let nm = spec.n_mics();
    let mut rng = sub_rng(seed, 0);
    let rho = (1.0 - spec.mic_spacing / TAIL_DECORRELATION_M).clamp(0.0, 1.0);
    let indep = (1.0 - rho * rho).sqrt();

    let first_tail = |m: usize| spec.direct_delays[m].floor() as usize + 1;
    let unit_tail_energy: f64 = (0..nm)
        .map(|m| (first_tail(m)..spec.taps).map(|t| spec.envelope(t as f64 / fs).powi(2)).sum::<f64>())
        .sum::<f64>()
        / nm as f64;
    // direct path carries unit energy
    let gain = if unit_tail_energy > 0.0 {
        (10f64.powf(-spec.drr_db / 10.0) / unit_tail_energy).sqrt()
    } else {
        0.0
    };

    let common: Vec<f64> = (0..spec.taps).map(|_| rng.sample(StandardNormal)).collect();
    let mut out = vec![vec![0.0; spec.taps]; nm];
    for (m, h) in out.iter_mut().enumerate() {
        add_fractional_impulse(h, spec.direct_delays[m]);
        for t in first_tail(m)..spec.taps {
            let own: f64 = rng.sample(StandardNormal);
            let noise = rho * common[t] + indep * own;
            h[t] += gain * spec.envelope(t as f64 / fs) * noise;
        }
    }
    Ok(out)
}
