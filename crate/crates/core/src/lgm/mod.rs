//! Time-varying spatial covariance model fitted by EM.
//!
//! Each bin of the dereverberated mixture is modeled as a zero-mean complex
//! Gaussian whose covariance sums speech (`v R`), residual reverberation
//! (past variances times `H`) and stationary noise (`R_n`). The posterior of
//! each speech component is the multichannel Wiener filter output.

mod em;
mod params;
mod permutation;
mod posterior;
mod spatial;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::CMat;
use crate::signal::Spectrogram;

pub use em::{e_step, em_iterate, m_step, ComponentMoments};
pub use params::{assemble_scm, Component, FreqParams, ScmParams, ScmShape};
pub use permutation::{apply_permutation, permutations, solve_permutation, solve_permutation_refined, PermutationMap};
pub use posterior::{log_likelihood, mwf_posterior, posterior_field, wiener_filters, GaussianPosterior};
pub use spatial::{estimate_delays, solve_permutation_spatial, steer_scms, MAX_DELAY, STEER_LOADING};

/// Relative diagonal loading used when an observation covariance is near singular.
pub const LOAD_REL: f64 = 1e-6;
pub(crate) const LOAD_ABS: f64 = 1e-300;
/// Source-variance floor relative to the per-frequency mean power.
pub const V_FLOOR_REL: f64 = 1e-8;
pub(crate) const V_FLOOR_ABS: f64 = 1e-30;
/// Eigenvalue floor relative to `trace / N_m`.
pub const EIG_FLOOR_REL: f64 = 1e-7;
pub(crate) const EIG_FLOOR_ABS: f64 = 1e-30;

pub(crate) fn v_floor(power: f64) -> f64 {
    (V_FLOOR_REL * power).max(V_FLOOR_ABS)
}

pub(crate) fn cov_floor(m: &CMat) -> CMat {
    let h = m.hermitize();
    let n = h.dim().max(1) as f64;
    let floor = EIG_FLOOR_REL * h.re_trace().max(0.0) / n + EIG_FLOOR_ABS;
    if h.min_eig_herm() >= floor {
        h
    } else {
        h.floor_eigenvalues(floor)
    }
}

/// How source SCMs are initialized, which also selects the permutation solver.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LgmInit {
    /// Random perturbation of the identity; sources are aligned afterwards by
    /// variance-envelope correlation.
    Random,
    /// Steering vectors from GCC-PHAT delay estimates; sources are aligned
    /// afterwards by matching SCM phases to those delays. Falls back to
    /// `Random` for single-channel input.
    #[default]
    Spatial,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LgmConfig {
    pub n_sources: usize,
    pub reverb_taps: usize,
    pub n_em: usize,
    /// Extra centroid sweeps after the greedy envelope permutation pass.
    pub perm_refine: usize,
    #[serde(default)]
    pub init: LgmInit,
    pub seed: u64,
}

impl Default for LgmConfig {
    fn default() -> Self {
        Self { n_sources: 2, reverb_taps: 1, n_em: 20, perm_refine: 2, init: LgmInit::Spatial, seed: 0 }
    }
}

impl LgmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_sources == 0 {
            return Err(Error::invalid("n_sources must be at least 1"));
        }
        if self.n_sources > 6 {
            return Err(Error::invalid("permutation search supports at most 6 sources"));
        }
        Ok(())
    }
}

/// Full pseudo-clean signal generator: init, EM, permutation alignment and Wiener posteriors.
///
/// With spatial init, delays estimated from the mixture seed the source SCMs
/// and later anchor the permutation solver; otherwise envelopes are used.
pub fn pcsg_separate(spec: &Spectrogram, cfg: &LgmConfig) -> Result<(GaussianPosterior, ScmParams)> {
    cfg.validate()?;
    if !spec.is_finite() {
        return Err(Error::non_finite("mixture spectrogram"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ScmParams::init(spec, cfg.n_sources, cfg.reverb_taps, &mut rng)?;
    let taus = match cfg.init {
        LgmInit::Spatial => estimate_delays(spec, cfg.n_sources).filter(|t| t.len() == cfg.n_sources),
        LgmInit::Random => None,
    };
    if let Some(t) = &taus {
        steer_scms(&mut params, t);
    }
    for _ in 0..cfg.n_em {
        params = em_iterate(spec, &params)?;
    }
    let map = match &taus {
        Some(t) => solve_permutation_spatial(&params, t),
        None => solve_permutation_refined(&params, cfg.perm_refine),
    };
    let params = apply_permutation(&params, &map);
    let post = posterior_field(spec, &params)?;
    Ok((post, params))
}
