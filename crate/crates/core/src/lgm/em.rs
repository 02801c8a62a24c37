use rayon::prelude::*;

use crate::linalg::{loaded_inverse, CMat, CVec};
use crate::signal::Spectrogram;

use super::params::{Component, FreqParams, ScmParams};
use super::posterior::{check_dims, freq_vectors, wiener_moments};
use super::{cov_floor, v_floor, LOAD_ABS, LOAD_REL};
use crate::error::{Error, Result};

/// E-step sufficient statistics at one frequency.
///
/// Second moments `Ĉ = V + μμᴴ` for every component, indexed `speech[i][l]`,
/// `reverb[i][d−1][l]` (zero for `l < d`) and `noise[l]`.
#[derive(Clone, Debug)]
pub struct ComponentMoments {
    pub n_frames: usize,
    pub reverb_taps: usize,
    pub speech: Vec<CMat>,
    pub reverb: Vec<CMat>,
    pub noise: Vec<CMat>,
}

impl ComponentMoments {
    pub fn speech(&self, i: usize, l: usize) -> &CMat {
        &self.speech[i * self.n_frames + l]
    }

    pub fn reverb(&self, i: usize, d: usize, l: usize) -> &CMat {
        &self.reverb[(i * self.reverb_taps + d - 1) * self.n_frames + l]
    }
}

pub fn e_step(xs: &[CVec], fp: &FreqParams) -> ComponentMoments {
    let (ns, nl, nd) = (fp.n_sources, fp.n_frames, fp.reverb_taps);
    let nm = fp.rn.dim();
    let mut out = ComponentMoments {
        n_frames: nl,
        reverb_taps: nd,
        speech: vec![CMat::zeros(nm); ns * nl],
        reverb: vec![CMat::zeros(nm); ns * nd * nl],
        noise: vec![CMat::zeros(nm); nl],
    };
    let second = |sigma: &CMat, inv: &CMat, x: &CVec| {
        let (mu, v) = wiener_moments(sigma, inv, x);
        v + CMat::outer(&mu)
    };
    for (l, x) in xs.iter().enumerate() {
        let (inv, _) = loaded_inverse(&fp.assemble(l), LOAD_REL, LOAD_ABS);
        for c in fp.components() {
            let Some(sigma) = fp.component_cov(c, l) else { continue };
            let m = second(&sigma, &inv, x);
            match c {
                Component::Speech(i) => out.speech[i * nl + l] = m,
                Component::Reverb(i, d) => out.reverb[(i * nd + d - 1) * nl + l] = m,
                Component::Noise => out.noise[l] = m,
            }
        }
    }
    out
}

/// M-step from the moments: variances first (against the current SCMs),
/// then SCMs against the new variances.
pub fn m_step(mom: &ComponentMoments, fp: &FreqParams, power: f64) -> FreqParams {
    let (ns, nl, nd) = (fp.n_sources, fp.n_frames, fp.reverb_taps);
    let nm = fp.rn.dim();
    let floor = v_floor(power);
    let mut out = fp.clone();
    for i in 0..ns {
        let (r_inv, _) = loaded_inverse(&fp.r[i], LOAD_REL, LOAD_ABS);
        for l in 0..nl {
            let c = mom.speech(i, l);
            out.v[i * nl + l] = ((&r_inv * c).re_trace() / nm as f64).max(floor);
        }
    }
    for i in 0..ns {
        let mut acc = CMat::zeros(nm);
        for l in 0..nl {
            acc.axpy(1.0 / out.v(i, l), mom.speech(i, l));
        }
        out.r[i] = cov_floor(&acc.scale(1.0 / nl as f64));
        for d in 1..=nd {
            if nl <= d {
                continue;
            }
            let mut acc = CMat::zeros(nm);
            for l in d..nl {
                acc.axpy(1.0 / out.v(i, l - d), mom.reverb(i, d, l));
            }
            out.h[i * nd + d - 1] = cov_floor(&acc.scale(1.0 / (nl - d) as f64));
        }
    }
    let mut acc = CMat::zeros(nm);
    for c in &mom.noise {
        acc += *c;
    }
    out.rn = cov_floor(&acc.scale(1.0 / nl.max(1) as f64));
    out
}

/// One EM iteration over all frequencies, in parallel over `k`.
pub fn em_iterate(spec: &Spectrogram, params: &ScmParams) -> Result<ScmParams> {
    check_dims(spec, params)?;
    let power = spec.mean_power_per_freq();
    let freqs: Vec<FreqParams> = (0..params.n_freqs)
        .into_par_iter()
        .map(|k| {
            let fp = params.freq(k);
            let xs = freq_vectors(spec, k);
            m_step(&e_step(&xs, &fp), &fp, power[k])
        })
        .collect();
    let out = ScmParams::from_freqs(params, &freqs);
    if out.v.iter().any(|x| !x.is_finite()) || out.r.iter().chain(&out.h).chain(&out.rn).any(|m| !m.is_finite()) {
        return Err(Error::non_finite("EM update"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lgm::log_likelihood;
    use crate::lgm::tests_support::{mixture_spec, random_spec};
    use crate::linalg::C64;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn scalar_fixed_point_is_observed_power() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let nl = 30;
        let bins: Vec<C64> = (0..nl).map(|_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
        let spec = Spectrogram::from_bins(bins.clone(), 1, nl, 1, 0, 1).unwrap();
        let mut p = ScmParams::zeros(1, nl, 1, 1, 0);
        for l in 0..nl {
            p.v[l] = bins[l].norm_sqr();
        }
        p.r[0] = CMat::identity(1);
        p.rn[0] = CMat::scaled_identity(1, 1e-14);
        let q = em_iterate(&spec, &p).unwrap();
        for l in 0..nl {
            assert!((q.v[l] - p.v[l]).abs() <= 1e-10 * p.v[l], "{} vs {}", q.v[l], p.v[l]);
        }
        assert!((q.r[0][(0, 0)].re - 1.0).abs() < 1e-10);
    }

    #[test]
    fn speech_noise_likelihood_is_monotone() {
        for seed in 0..4 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let spec = mixture_spec(2, 60, 6, 2, &mut rng);
            let mut p = ScmParams::init(&spec, 2, 0, &mut rng).unwrap();
            let mut ll = log_likelihood(&spec, &p);
            for _ in 0..20 {
                p = em_iterate(&spec, &p).unwrap();
                p.validate().unwrap();
                let next = log_likelihood(&spec, &p);
                assert!(next >= ll - 1e-8 * ll.abs(), "seed {seed}: {ll} -> {next}");
                ll = next;
            }
        }
    }

    #[test]
    fn full_model_likelihood_improves() {
        for seed in 0..4 {
            let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
            let spec = mixture_spec(2, 60, 6, 2, &mut rng);
            let mut p = ScmParams::init(&spec, 2, 2, &mut rng).unwrap();
            let ll0 = log_likelihood(&spec, &p);
            for _ in 0..20 {
                p = em_iterate(&spec, &p).unwrap();
            }
            assert!(log_likelihood(&spec, &p) >= ll0);
        }
    }

    #[test]
    fn silence_stays_finite() {
        let spec = Spectrogram::zeros(2, 12, 5);
        let mut p = ScmParams::init(&spec, 2, 1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for _ in 0..3 {
            p = em_iterate(&spec, &p).unwrap();
        }
        p.validate().unwrap();
    }

    #[test]
    fn frequency_bins_are_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let spec = random_spec(2, 15, 4, &mut rng);
        let p = ScmParams::init(&spec, 2, 1, &mut rng).unwrap();
        let full = em_iterate(&spec, &p).unwrap();
        let power = spec.mean_power_per_freq();
        for k in 0..4 {
            let fp = p.freq(k);
            let xs = freq_vectors(&spec, k);
            assert_eq!(m_step(&e_step(&xs, &fp), &fp, power[k]), full.freq(k));
        }
    }
}
