use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{CMat, C64};
use crate::signal::Spectrogram;

use super::{cov_floor, v_floor};

/// Parameters of the time-varying spatial covariance model.
///
/// `v` is indexed `[i][l][k]`, `r` is `[i][k]`, `h` is `[i][d−1][k]` and
/// `rn` is `[k]`. Both the PCSG estimate and the network-derived SCMs are
/// instances of this type.
#[derive(Clone, Debug, PartialEq)]
pub struct ScmParams {
    pub n_sources: usize,
    pub n_frames: usize,
    pub n_freqs: usize,
    pub n_mics: usize,
    pub reverb_taps: usize,
    pub v: Vec<f64>,
    pub r: Vec<CMat>,
    pub h: Vec<CMat>,
    pub rn: Vec<CMat>,
}

/// The slice of [`ScmParams`] belonging to one frequency bin.
///
/// `v` is `[i][l]`, `h` is `[i][d−1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FreqParams {
    pub n_sources: usize,
    pub n_frames: usize,
    pub reverb_taps: usize,
    pub v: Vec<f64>,
    pub r: Vec<CMat>,
    pub h: Vec<CMat>,
    pub rn: CMat,
}

/// One additive term of the observation covariance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Component {
    Speech(usize),
    /// Source index and tap `d ≥ 1`.
    Reverb(usize, usize),
    Noise,
}

impl FreqParams {
    #[inline]
    pub fn v(&self, i: usize, l: usize) -> f64 {
        self.v[i * self.n_frames + l]
    }

    #[inline]
    pub fn h(&self, i: usize, d: usize) -> &CMat {
        &self.h[i * self.reverb_taps + d - 1]
    }

    /// All components in a fixed order: speech, then reverb by (i, d), then noise.
    pub fn components(&self) -> Vec<Component> {
        let mut out: Vec<Component> = (0..self.n_sources).map(Component::Speech).collect();
        for i in 0..self.n_sources {
            for d in 1..=self.reverb_taps {
                out.push(Component::Reverb(i, d));
            }
        }
        out.push(Component::Noise);
        out
    }

    /// Covariance of one component at frame `l`; `None` for reverb taps reaching before frame 0.
    pub fn component_cov(&self, c: Component, l: usize) -> Option<CMat> {
        match c {
            Component::Speech(i) => Some(self.r[i].scale(self.v(i, l))),
            Component::Reverb(i, d) => (l >= d).then(|| self.h(i, d).scale(self.v(i, l - d))),
            Component::Noise => Some(self.rn),
        }
    }

    pub fn assemble(&self, l: usize) -> CMat {
        let mut rx = self.rn;
        for i in 0..self.n_sources {
            rx.axpy(self.v(i, l), &self.r[i]);
            for d in 1..=self.reverb_taps.min(l) {
                rx.axpy(self.v(i, l - d), self.h(i, d));
            }
        }
        rx.hermitize()
    }
}

impl ScmParams {
    pub fn zeros(n_sources: usize, n_frames: usize, n_freqs: usize, n_mics: usize, reverb_taps: usize) -> Self {
        Self {
            n_sources,
            n_frames,
            n_freqs,
            n_mics,
            reverb_taps,
            v: vec![0.0; n_sources * n_frames * n_freqs],
            r: vec![CMat::zeros(n_mics); n_sources * n_freqs],
            h: vec![CMat::zeros(n_mics); n_sources * reverb_taps * n_freqs],
            rn: vec![CMat::zeros(n_mics); n_freqs],
        }
    }

    /// Default starting point for EM.
    ///
    /// Variances split the observed power evenly, source SCMs are a random
    /// Hermitian perturbation of the identity, reverb SCMs start at `0.05·I`
    /// and the noise SCM at 1% of the per-frequency mean power.
    pub fn init(spec: &Spectrogram, n_sources: usize, reverb_taps: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if n_sources == 0 {
            return Err(Error::invalid("need at least one source"));
        }
        let (nm, nl, nk) = (spec.n_mics(), spec.n_frames(), spec.n_freqs());
        if nm > crate::linalg::MAX_DIM {
            return Err(Error::invalid(format!("at most {} microphones supported", crate::linalg::MAX_DIM)));
        }
        let power = spec.mean_power_per_freq();
        let mut p = Self::zeros(n_sources, nl, nk, nm, reverb_taps);
        for l in 0..nl {
            for k in 0..nk {
                let x = spec.vector(l, k).norm_sqr() / (nm * n_sources) as f64;
                for i in 0..n_sources {
                    let at = p.v_index(i, l, k);
                    p.v[at] = x.max(v_floor(power[k]));
                }
            }
        }
        for k in 0..nk {
            for i in 0..n_sources {
                let a = CMat::from_fn(nm, |_, _| {
                    let re: f64 = rng.sample(StandardNormal);
                    let im: f64 = rng.sample(StandardNormal);
                    C64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
                });
                let r = CMat::identity(nm) + (a + a.adjoint()).scale(0.1);
                p.r[i * nk + k] = cov_floor(&r);
            }
            for i in 0..n_sources {
                for d in 1..=reverb_taps {
                    let at = p.h_index(i, d, k);
                    p.h[at] = CMat::scaled_identity(nm, 0.05);
                }
            }
            p.rn[k] = cov_floor(&CMat::scaled_identity(nm, 0.01 * power[k]));
        }
        Ok(p)
    }

    #[inline]
    pub fn v_index(&self, i: usize, l: usize, k: usize) -> usize {
        (i * self.n_frames + l) * self.n_freqs + k
    }

    #[inline]
    pub fn h_index(&self, i: usize, d: usize, k: usize) -> usize {
        (i * self.reverb_taps + d - 1) * self.n_freqs + k
    }

    pub fn v_at(&self, i: usize, l: usize, k: usize) -> f64 {
        self.v[self.v_index(i, l, k)]
    }

    pub fn r_at(&self, i: usize, k: usize) -> &CMat {
        &self.r[i * self.n_freqs + k]
    }

    pub fn h_at(&self, i: usize, d: usize, k: usize) -> &CMat {
        &self.h[self.h_index(i, d, k)]
    }

    pub fn freq(&self, k: usize) -> FreqParams {
        let (ns, nl) = (self.n_sources, self.n_frames);
        let mut v = Vec::with_capacity(ns * nl);
        for i in 0..ns {
            for l in 0..nl {
                v.push(self.v_at(i, l, k));
            }
        }
        let r = (0..ns).map(|i| *self.r_at(i, k)).collect();
        let mut h = Vec::with_capacity(ns * self.reverb_taps);
        for i in 0..ns {
            for d in 1..=self.reverb_taps {
                h.push(*self.h_at(i, d, k));
            }
        }
        FreqParams { n_sources: ns, n_frames: nl, reverb_taps: self.reverb_taps, v, r, h, rn: self.rn[k] }
    }

    pub fn set_freq(&mut self, k: usize, fp: &FreqParams) {
        for i in 0..self.n_sources {
            for l in 0..self.n_frames {
                let at = self.v_index(i, l, k);
                self.v[at] = fp.v(i, l);
            }
            self.r[i * self.n_freqs + k] = fp.r[i];
            for d in 1..=self.reverb_taps {
                let at = self.h_index(i, d, k);
                self.h[at] = *fp.h(i, d);
            }
        }
        self.rn[k] = fp.rn;
    }

    pub fn from_freqs(template: &ScmParams, freqs: &[FreqParams]) -> Self {
        let mut out = template.clone();
        for (k, fp) in freqs.iter().enumerate() {
            out.set_freq(k, fp);
        }
        out
    }

    /// Checks shapes, finiteness, Hermitian symmetry and positive semidefiniteness.
    pub fn validate(&self) -> Result<()> {
        let (ns, nl, nk, nm) = (self.n_sources, self.n_frames, self.n_freqs, self.n_mics);
        if self.v.len() != ns * nl * nk
            || self.r.len() != ns * nk
            || self.h.len() != ns * self.reverb_taps * nk
            || self.rn.len() != nk
        {
            return Err(Error::shape("SCM parameter arrays do not match declared dimensions"));
        }
        if self.v.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::non_finite("source variances"));
        }
        for m in self.r.iter().chain(&self.h).chain(&self.rn) {
            if m.dim() != nm || !m.is_finite() {
                return Err(Error::non_finite("spatial covariance"));
            }
            let tol = 1e-10 * m.norm_fro().max(f64::MIN_POSITIVE);
            if (*m - m.adjoint()).norm_fro() > tol * 2.0 {
                return Err(Error::Degenerate("spatial covariance is not Hermitian".into()));
            }
            if m.min_eig_herm() < -1e-10 * m.re_trace().abs() {
                return Err(Error::Degenerate("spatial covariance is not PSD".into()));
            }
        }
        Ok(())
    }

    /// Relabels sources so that the returned source `i` is `perm[i]` of `self`, at every frequency.
    pub fn relabeled(&self, perm: &[usize]) -> Self {
        let mut out = self.clone();
        for k in 0..self.n_freqs {
            let fp = self.freq(k);
            out.set_freq(k, &fp.relabeled(perm));
        }
        out
    }
}

impl FreqParams {
    /// Returned source `i` is `perm[i]` of `self`.
    pub fn relabeled(&self, perm: &[usize]) -> Self {
        let (nl, nd) = (self.n_frames, self.reverb_taps);
        let mut out = self.clone();
        for (i, &src) in perm.iter().enumerate() {
            out.v[i * nl..(i + 1) * nl].copy_from_slice(&self.v[src * nl..(src + 1) * nl]);
            out.r[i] = self.r[src];
            out.h[i * nd..(i + 1) * nd].copy_from_slice(&self.h[src * nd..(src + 1) * nd]);
        }
        out
    }
}

/// Observation covariance `Σ_i v R_i + Σ_{i,d} v_{l−d} H_{i,d} + R_n` at one bin, hermitized.
pub fn assemble_scm(params: &ScmParams, l: usize, k: usize) -> CMat {
    let mut rx = params.rn[k];
    for i in 0..params.n_sources {
        rx.axpy(params.v_at(i, l, k), params.r_at(i, k));
        for d in 1..=params.reverb_taps.min(l) {
            rx.axpy(params.v_at(i, l - d, k), params.h_at(i, d, k));
        }
    }
    rx.hermitize()
}

/// Serializable dimensions, used by checkpoint manifests.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScmShape {
    pub n_sources: usize,
    pub n_frames: usize,
    pub n_freqs: usize,
    pub n_mics: usize,
    pub reverb_taps: usize,
}

impl ScmParams {
    pub fn shape(&self) -> ScmShape {
        ScmShape {
            n_sources: self.n_sources,
            n_frames: self.n_frames,
            n_freqs: self.n_freqs,
            n_mics: self.n_mics,
            reverb_taps: self.reverb_taps,
        }
    }
}
