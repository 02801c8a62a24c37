use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{loaded_inverse, CMat, CVec, C64};
use crate::signal::{SpecKind, Spectrogram};

use super::params::{Component, FreqParams, ScmParams};
use super::{LOAD_ABS, LOAD_REL};

/// Per-source Gaussian posterior field.
///
/// `mu` is `[i][l][k][m]` and `cov` is `[i][l][k][m][m']`, both flat.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPosterior {
    pub n_sources: usize,
    pub n_frames: usize,
    pub n_freqs: usize,
    pub n_mics: usize,
    pub mu: Vec<C64>,
    pub cov: Vec<C64>,
}

impl GaussianPosterior {
    pub fn zeros(n_sources: usize, n_frames: usize, n_freqs: usize, n_mics: usize) -> Self {
        let cells = n_sources * n_frames * n_freqs;
        Self {
            n_sources,
            n_frames,
            n_freqs,
            n_mics,
            mu: vec![C64::new(0.0, 0.0); cells * n_mics],
            cov: vec![C64::new(0.0, 0.0); cells * n_mics * n_mics],
        }
    }

    #[inline]
    fn cell(&self, i: usize, l: usize, k: usize) -> usize {
        (i * self.n_frames + l) * self.n_freqs + k
    }

    pub fn mu(&self, i: usize, l: usize, k: usize) -> CVec {
        let m = self.n_mics;
        let c = self.cell(i, l, k) * m;
        CVec::from_slice(&self.mu[c..c + m])
    }

    pub fn cov(&self, i: usize, l: usize, k: usize) -> CMat {
        let m = self.n_mics;
        let c = self.cell(i, l, k) * m * m;
        CMat::from_packed(m, &self.cov[c..c + m * m])
    }

    pub fn set(&mut self, i: usize, l: usize, k: usize, mu: &CVec, cov: &CMat) {
        let m = self.n_mics;
        let c = self.cell(i, l, k);
        self.mu[c * m..(c + 1) * m].copy_from_slice(mu.as_slice());
        cov.write_packed(&mut self.cov[c * m * m..(c + 1) * m * m]);
    }

    pub fn is_finite(&self) -> bool {
        self.mu.iter().chain(&self.cov).all(|z| z.re.is_finite() && z.im.is_finite())
    }

    /// Posterior mean of source `i` as a multichannel spectrogram with the
    /// STFT metadata of `like`.
    pub fn source_image(&self, i: usize, like: &Spectrogram) -> Spectrogram {
        let mut out = like.with_bins(vec![C64::new(0.0, 0.0); like.bins().len()], SpecKind::SourceImage);
        for l in 0..self.n_frames {
            for k in 0..self.n_freqs {
                out.set_vector(l, k, &self.mu(i, l, k));
            }
        }
        out
    }

    /// Restrict to a frame range.
    pub fn slice_frames(&self, start: usize, len: usize) -> Self {
        let mut out = Self::zeros(self.n_sources, len, self.n_freqs, self.n_mics);
        for i in 0..self.n_sources {
            for l in 0..len {
                for k in 0..self.n_freqs {
                    out.set(i, l, k, &self.mu(i, start + l, k), &self.cov(i, start + l, k));
                }
            }
        }
        out
    }
}

/// Posterior mean and covariance of one component given its covariance
/// `sigma` and the inverse observation covariance.
#[inline]
pub(crate) fn wiener_moments(sigma: &CMat, rx_inv: &CMat, x: &CVec) -> (CVec, CMat) {
    let w = sigma * rx_inv;
    let mu = w.mul_vec(x);
    let cov = (*sigma - &w * sigma).hermitize();
    (mu, cov)
}

/// Multichannel Wiener posterior of speech source `i` at bin `(l, k)`.
///
/// `W = v R (R_x̃ + δI)⁻¹`, `μ = W x̃`, `V = (I − W) v R`. Loading is added
/// only when `R_x̃` is numerically singular.
pub fn mwf_posterior(x: &CVec, params: &ScmParams, i: usize, l: usize, k: usize) -> Result<(CVec, CMat)> {
    if !x.is_finite() {
        return Err(Error::non_finite("mixture bin"));
    }
    let rx = super::assemble_scm(params, l, k);
    if !rx.is_finite() {
        return Err(Error::non_finite("observation covariance"));
    }
    let (inv, _) = loaded_inverse(&rx, LOAD_REL, LOAD_ABS);
    let sigma = params.r_at(i, k).scale(params.v_at(i, l, k));
    Ok(wiener_moments(&sigma, &inv, x))
}

/// Wiener filters of every component at frame `l`, in [`FreqParams::components`] order.
///
/// Components that do not exist at this frame contribute a zero filter.
pub fn wiener_filters(fp: &FreqParams, l: usize) -> (Vec<CMat>, bool) {
    let (inv, loading) = loaded_inverse(&fp.assemble(l), LOAD_REL, LOAD_ABS);
    let n = inv.dim();
    let filters = fp
        .components()
        .into_iter()
        .map(|c| fp.component_cov(c, l).map(|s| &s * &inv).unwrap_or_else(|| CMat::zeros(n)))
        .collect();
    (filters, loading.is_some())
}

pub(crate) fn freq_vectors(spec: &Spectrogram, k: usize) -> Vec<CVec> {
    (0..spec.n_frames()).map(|l| spec.vector(l, k)).collect()
}

pub(crate) fn check_dims(spec: &Spectrogram, params: &ScmParams) -> Result<()> {
    if spec.n_frames() != params.n_frames || spec.n_freqs() != params.n_freqs || spec.n_mics() != params.n_mics {
        return Err(Error::shape(format!(
            "spectrogram {}x{}x{} does not match parameters {}x{}x{}",
            spec.n_mics(),
            spec.n_frames(),
            spec.n_freqs(),
            params.n_mics,
            params.n_frames,
            params.n_freqs
        )));
    }
    Ok(())
}

/// Speech posteriors for every source and bin, in parallel over frequency.
pub fn posterior_field(spec: &Spectrogram, params: &ScmParams) -> Result<GaussianPosterior> {
    check_dims(spec, params)?;
    if !spec.is_finite() {
        return Err(Error::non_finite("mixture spectrogram"));
    }
    let (ns, nl, nk, nm) = (params.n_sources, params.n_frames, params.n_freqs, params.n_mics);
    let per_freq: Vec<Vec<(CVec, CMat)>> = (0..nk)
        .into_par_iter()
        .map(|k| {
            let fp = params.freq(k);
            let xs = freq_vectors(spec, k);
            let mut out = vec![(CVec::zeros(nm), CMat::zeros(nm)); ns * nl];
            for (l, x) in xs.iter().enumerate() {
                let (inv, _) = loaded_inverse(&fp.assemble(l), LOAD_REL, LOAD_ABS);
                for i in 0..ns {
                    let sigma = fp.component_cov(Component::Speech(i), l).expect("speech always present");
                    out[i * nl + l] = wiener_moments(&sigma, &inv, x);
                }
            }
            out
        })
        .collect();
    let mut post = GaussianPosterior::zeros(ns, nl, nk, nm);
    for (k, cells) in per_freq.iter().enumerate() {
        for i in 0..ns {
            for l in 0..nl {
                let (mu, cov) = &cells[i * nl + l];
                post.set(i, l, k, mu, cov);
            }
        }
    }
    if !post.is_finite() {
        return Err(Error::non_finite("posterior"));
    }
    Ok(post)
}

/// Gaussian log-likelihood `Σ_{l,k} log N(x̃ | 0, R_x̃)` with the unloaded covariance.
pub fn log_likelihood(spec: &Spectrogram, params: &ScmParams) -> f64 {
    let nm = params.n_mics as f64;
    (0..params.n_freqs)
        .into_par_iter()
        .map(|k| {
            let fp = params.freq(k);
            let mut s = 0.0;
            for l in 0..params.n_frames {
                let rx = fp.assemble(l);
                let x = spec.vector(l, k);
                let Some(inv) = rx.inverse() else { return f64::NEG_INFINITY };
                let det = rx.det().re;
                if det <= 0.0 {
                    return f64::NEG_INFINITY;
                }
                s -= nm * std::f64::consts::PI.ln() + det.ln() + inv.quad_form(&x);
            }
            s
        })
        .sum()
}
