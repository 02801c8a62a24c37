use log::warn;

use crate::error::{Error, Result};
use crate::lgm::{em_iterate, posterior_field, GaussianPosterior, ScmParams};
use crate::linalg::CMat;
use crate::signal::{extract_features, istft, MultichannelWave, Spectrogram};

use super::net::{net_forward, power_scale, MaskNetConfig, MaskNetParams, MaskSet};

/// Spatial parameters built from masks, with the number of matrices whose
/// mask summed to zero and fell back to uniform weights.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskScm {
    pub params: ScmParams,
    pub fallbacks: usize,
}

/// `Σ_l w_l x x̃ᴴ / Σ_l w_l`, or the plain mean when the weights sum to zero.
fn weighted_scm(outer: &[CMat], w: impl Fn(usize) -> f64, n: usize) -> (CMat, bool) {
    let total: f64 = (0..outer.len()).map(&w).sum();
    let mut r = CMat::zeros(n);
    if total > 0.0 {
        for (l, x) in outer.iter().enumerate() {
            r.axpy(w(l) / total, x);
        }
        (r.hermitize(), false)
    } else {
        for x in outer {
            r.axpy(1.0 / outer.len().max(1) as f64, x);
        }
        (r.hermitize(), true)
    }
}

fn outer_products(spec: &Spectrogram, k: usize) -> Vec<CMat> {
    (0..spec.n_frames()).map(|l| CMat::outer(&spec.vector(l, k))).collect()
}

fn check_shapes(spec: &Spectrogram, masks: &MaskSet, v_q: &[f64]) -> Result<()> {
    if masks.n_frames != spec.n_frames() || masks.n_freqs != spec.n_freqs() {
        return Err(Error::shape("masks do not match the spectrogram"));
    }
    if v_q.len() != masks.n_sources * masks.n_frames * masks.n_freqs {
        return Err(Error::shape("variance field does not match the masks"));
    }
    Ok(())
}

/// Mask-weighted averages of the per-frame outer products: one SCM per
/// speech source, per (source, reverb tap), and for noise. Variances are `v_q`.
pub fn masks_to_scm(spec: &Spectrogram, masks: &MaskSet, v_q: &[f64]) -> Result<MaskScm> {
    check_shapes(spec, masks, v_q)?;
    let (ns, lr, nl, nk, nm) = (masks.n_sources, masks.reverb_taps, spec.n_frames(), spec.n_freqs(), spec.n_mics());
    let mut p = ScmParams::zeros(ns, nl, nk, nm, lr);
    p.v.copy_from_slice(v_q);
    let mut fallbacks = 0;
    for k in 0..nk {
        let outer = outer_products(spec, k);
        for i in 0..ns {
            let (r, fb) = weighted_scm(&outer, |l| masks.speech_at(i, l, k), nm);
            p.r[i * nk + k] = r;
            fallbacks += fb as usize;
            for d in 1..=lr {
                let (h, fb) = weighted_scm(&outer, |l| masks.reverb_at(i, d, l, k), nm);
                let at = p.h_index(i, d, k);
                p.h[at] = h;
                fallbacks += fb as usize;
            }
        }
        let (rn, fb) = weighted_scm(&outer, |l| masks.noise_at(l, k), nm);
        p.rn[k] = rn;
        fallbacks += fb as usize;
    }
    if fallbacks > 0 {
        warn!("{fallbacks} mask columns summed to zero; used uniform weights");
    }
    Ok(MaskScm { params: p, fallbacks })
}

/// Gradient of the masks given gradients of every SCM produced by [`masks_to_scm`].
///
/// `d_params` carries `∂L/∂R`, `∂L/∂H` and `∂L/∂R_n` in its matrix fields;
/// its `v` field is ignored.
pub(crate) fn masks_to_scm_backward(spec: &Spectrogram, masks: &MaskSet, phi: &ScmParams, d_params: &ScmParams) -> MaskSet {
    let (ns, lr, nl, nk) = (masks.n_sources, masks.reverb_taps, masks.n_frames, masks.n_freqs);
    let mut g = MaskSet::uniform(ns, lr, nl, nk);
    g.speech.iter_mut().chain(&mut g.reverb).chain(&mut g.noise).for_each(|x| *x = 0.0);
    for k in 0..nk {
        let outer = outer_products(spec, k);
        // d/dm_l of Σ m X / Σ m is (X_l − R)/Σ m
        let grad = |r: &CMat, dr: &CMat, w: &dyn Fn(usize) -> f64, out: &mut dyn FnMut(usize, f64)| {
            let total: f64 = (0..nl).map(w).sum();
            if total <= 0.0 {
                return;
            }
            let base = dr.inner(r);
            for (l, x) in outer.iter().enumerate() {
                out(l, (dr.inner(x) - base) / total);
            }
        };
        for i in 0..ns {
            let at = |l: usize| (i * nl + l) * nk + k;
            grad(phi.r_at(i, k), d_params.r_at(i, k), &|l| masks.speech_at(i, l, k), &mut |l, v| g.speech[at(l)] = v);
            for d in 1..=lr {
                let at = |l: usize| ((i * lr + d - 1) * nl + l) * nk + k;
                grad(phi.h_at(i, d, k), d_params.h_at(i, d, k), &|l| masks.reverb_at(i, d, l, k), &mut |l, v| {
                    g.reverb[at(l)] = v
                });
            }
        }
        grad(&phi.rn[k], &d_params.rn[k], &|l| masks.noise_at(l, k), &mut |l, v| g.noise[l * nk + k] = v);
    }
    g
}

/// Speech posteriors under network-derived parameters.
pub fn dnn_posterior(spec: &Spectrogram, phi: &ScmParams) -> Result<GaussianPosterior> {
    posterior_field(spec, phi)
}

/// Runs the network, builds the SCMs, applies `n_refine` EM iterations
/// starting from them and resynthesizes every source image.
pub fn infer_and_refine(
    spec: &Spectrogram,
    params: &MaskNetParams,
    cfg: &MaskNetConfig,
    n_refine: usize,
) -> Result<(GaussianPosterior, Vec<MultichannelWave>)> {
    let scale = power_scale(&spec.mean_power_per_freq());
    let (masks, v_q) = net_forward(&extract_features(spec), &scale, params, cfg)?;
    let mut phi = masks_to_scm(spec, &masks, &v_q)?.params;
    for _ in 0..n_refine {
        phi = em_iterate(spec, &phi)?;
    }
    let post = dnn_posterior(spec, &phi)?;
    let waves = (0..post.n_sources).map(|i| istft(&post.source_image(i, spec))).collect::<Result<Vec<_>>>()?;
    Ok((post, waves))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::C64;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spec(seed: u64, nm: usize, nl: usize, nk: usize) -> Spectrogram {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bins = (0..nm * nl * nk).map(|_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
        let frame = if nk > 1 { 2 * (nk - 1) } else { 0 };
        Spectrogram::from_bins(bins, nm, nl, nk, frame, (frame / 4).max(1)).unwrap()
    }

    fn random_masks(seed: u64, ns: usize, lr: usize, nl: usize, nk: usize) -> MaskSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = MaskSet::uniform(ns, lr, nl, nk);
        m.speech.iter_mut().chain(&mut m.reverb).chain(&mut m.noise).for_each(|x| *x = rng.gen_range(0.0..1.0));
        m
    }

    #[test]
    fn single_frame_full_mask_is_outer_product() {
        let sp = spec(0, 2, 1, 3);
        let mut m = MaskSet::uniform(1, 1, 1, 3);
        m.speech.fill(1.0);
        let out = masks_to_scm(&sp, &m, &[1.0; 3]).unwrap();
        for k in 0..3 {
            let want = CMat::outer(&sp.vector(0, k));
            assert!((*out.params.r_at(0, k) - want).norm_fro() < 1e-15);
        }
    }

    #[test]
    fn binary_masks_pick_frames() {
        let sp = spec(1, 2, 2, 3);
        let mut m = MaskSet::uniform(1, 1, 2, 3);
        for k in 0..3 {
            m.speech[k] = 1.0;
            m.speech[3 + k] = 0.0;
        }
        let out = masks_to_scm(&sp, &m, &[1.0; 6]).unwrap();
        assert!((*out.params.r_at(0, 1) - CMat::outer(&sp.vector(0, 1))).norm_fro() < 1e-15);
    }

    #[test]
    fn scalar_weighted_mean() {
        let bins = vec![C64::new(1.0, 0.0), C64::new(3f64.sqrt(), 0.0)];
        let sp = Spectrogram::from_bins(bins, 1, 2, 1, 0, 1).unwrap();
        let mut m = MaskSet::uniform(1, 1, 2, 1);
        m.speech.fill(0.5);
        let out = masks_to_scm(&sp, &m, &[1.0, 1.0]).unwrap();
        assert!((out.params.r_at(0, 0)[(0, 0)].re - 2.0).abs() < 1e-12);
    }

    #[test]
    fn zero_mask_falls_back_to_uniform() {
        let sp = spec(2, 2, 4, 2);
        let mut m = MaskSet::uniform(1, 1, 4, 2);
        m.noise.fill(0.0);
        let out = masks_to_scm(&sp, &m, &[1.0; 8]).unwrap();
        assert_eq!(out.fallbacks, 2);
        let mut mean = CMat::zeros(2);
        for l in 0..4 {
            mean.axpy(0.25, &CMat::outer(&sp.vector(l, 0)));
        }
        assert!((out.params.rn[0] - mean).norm_fro() < 1e-14);
    }

    #[test]
    fn outputs_are_psd() {
        for seed in 0..20 {
            let sp = spec(seed, 3, 6, 4);
            let m = random_masks(seed, 2, 2, 6, 4);
            let out = masks_to_scm(&sp, &m, &[1.0; 48]).unwrap().params;
            for c in out.r.iter().chain(&out.h).chain(&out.rn) {
                assert!(c.min_eig_herm() >= -1e-10 * c.re_trace());
                assert!((*c - c.adjoint()).norm_fro() == 0.0);
            }
        }
    }

    #[test]
    fn frame_permutation_invariant() {
        let (nl, nk) = (5, 3);
        let sp = spec(4, 2, nl, nk);
        let m = random_masks(4, 2, 1, nl, nk);
        let order = [3, 0, 4, 1, 2];
        let mut sp2 = sp.clone();
        let mut m2 = m.clone();
        for (dst, &src) in order.iter().enumerate() {
            for k in 0..nk {
                sp2.set_vector(dst, k, &sp.vector(src, k));
                for i in 0..2 {
                    m2.speech[(i * nl + dst) * nk + k] = m.speech_at(i, src, k);
                    m2.reverb[(i * nl + dst) * nk + k] = m.reverb_at(i, 1, src, k);
                }
                m2.noise[dst * nk + k] = m.noise_at(src, k);
            }
        }
        let v = vec![1.0; 2 * nl * nk];
        let a = masks_to_scm(&sp, &m, &v).unwrap().params;
        let b = masks_to_scm(&sp2, &m2, &v).unwrap().params;
        for (x, y) in a.r.iter().chain(&a.h).chain(&a.rn).zip(b.r.iter().chain(&b.h).chain(&b.rn)) {
            assert!((*x - *y).norm_fro() < 1e-13);
        }
    }

    #[test]
    fn silence_gives_zero_waves() {
        let cfg = MaskNetConfig { hidden: vec![4], ..MaskNetConfig::new(2, 5, 2, 1) };
        let sp = Spectrogram::from_bins(vec![C64::new(0.0, 0.0); 2 * 6 * 5], 2, 6, 5, 8, 2).unwrap();
        let p = MaskNetParams::init(&cfg, 0);
        for n_refine in [0, 3] {
            let (post, waves) = infer_and_refine(&sp, &p, &cfg, n_refine).unwrap();
            assert!(post.mu.iter().all(|z| z.norm() == 0.0));
            assert!(waves.iter().all(|w| w.energy() == 0.0));
        }
    }
}
