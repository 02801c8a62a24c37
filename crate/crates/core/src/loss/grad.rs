use ndarray::Array2;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::lgm::{FreqParams, GaussianPosterior, ScmParams, LOAD_ABS, LOAD_REL};
use crate::linalg::{loaded_inverse, CMat, CVec};
use crate::mask::{
    head_backward, masks_to_scm, masks_to_scm_backward, net_backward, net_forward_trace, power_scale, MaskNetConfig,
    MaskNetParams, MaskSet, NetTrace,
};
use crate::signal::{extract_features, Spectrogram};

use super::kld::{kld_backward, kld_floor, kld_floored, Floored};
use super::{LossBreakdown, LossKind};

/// Gradients of the loss total.
#[derive(Clone, Debug)]
pub struct GradientBundle {
    /// `[L × C·K]`, category-major columns like the mask head output.
    pub d_mask_logits: Array2<f64>,
    /// `[L × N_s·K]`, source-major columns like the variance head output.
    pub d_var_logits: Array2<f64>,
    pub params: MaskNetParams,
}

/// Network-side posterior at one bin, with what the backward pass needs.
struct BinQ {
    /// Hermitized inverse of the (possibly loaded) observation covariance.
    inv: CMat,
    loaded: bool,
    /// `v_j R_j` per source.
    sigma: Vec<CMat>,
    mu: Vec<CVec>,
    cov: Vec<CMat>,
}

fn bin_forward(fp: &FreqParams, x: &CVec, l: usize) -> BinQ {
    let (inv, loading) = loaded_inverse(&fp.assemble(l), LOAD_REL, LOAD_ABS);
    let sigma: Vec<CMat> = (0..fp.n_sources).map(|j| fp.r[j].scale(fp.v(j, l))).collect();
    let mut mu = Vec::with_capacity(sigma.len());
    let mut cov = Vec::with_capacity(sigma.len());
    for s in &sigma {
        let w = s * &inv;
        mu.push(w.mul_vec(x));
        cov.push((*s - &w * s).hermitize());
    }
    BinQ { inv, loaded: loading.is_some(), sigma, mu, cov }
}

struct Forward {
    trace: NetTrace,
    phi: ScmParams,
    floors: Vec<f64>,
}

fn check_target(spec: &Spectrogram, target: &GaussianPosterior, cfg: &MaskNetConfig) -> Result<()> {
    if target.n_frames != spec.n_frames()
        || target.n_freqs != spec.n_freqs()
        || target.n_mics != spec.n_mics()
        || target.n_sources != cfg.n_sources
    {
        return Err(Error::shape("target posterior does not match the spectrogram and config"));
    }
    if !target.is_finite() {
        return Err(Error::non_finite("target posterior"));
    }
    Ok(())
}

fn forward(spec: &Spectrogram, target: &GaussianPosterior, params: &MaskNetParams, cfg: &MaskNetConfig) -> Result<Forward> {
    check_target(spec, target, cfg)?;
    if !spec.is_finite() {
        return Err(Error::non_finite("mixture spectrogram"));
    }
    let power = spec.mean_power_per_freq();
    let trace = net_forward_trace(&extract_features(spec), &power_scale(&power), params, cfg)?;
    let phi = masks_to_scm(spec, &trace.masks, &trace.v_q)?.params;
    let floors = power.iter().map(|&p| kld_floor(p)).collect();
    Ok(Forward { trace, phi, floors })
}

/// Floored target covariances `[i][l]` at one frequency.
fn target_bins(target: &GaussianPosterior, k: usize, floor: f64, kind: LossKind) -> Result<Vec<Option<Floored>>> {
    let (ns, nl) = (target.n_sources, target.n_frames);
    (0..ns * nl)
        .map(|c| match kind {
            LossKind::Kld => Floored::new(&target.cov(c / nl, c % nl, k), floor).map(Some),
            LossKind::L2 => Ok(None),
        })
        .collect()
}

fn divergence(
    kind: LossKind,
    mu_p: &CVec,
    p: Option<&Floored>,
    mu_q: &CVec,
    q: Option<&Floored>,
) -> f64 {
    match (kind, p, q) {
        (LossKind::Kld, Some(p), Some(q)) => kld_floored(mu_p, p, mu_q, q),
        _ => (*mu_q - *mu_p).norm_sqr(),
    }
}

fn pairwise(spec: &Spectrogram, target: &GaussianPosterior, fw: &Forward, kind: LossKind) -> Result<Vec<Vec<f64>>> {
    let (ns, nl, nk) = (target.n_sources, target.n_frames, target.n_freqs);
    let per_freq: Vec<Vec<f64>> = (0..nk)
        .into_par_iter()
        .map(|k| -> Result<Vec<f64>> {
            let fp = fw.phi.freq(k);
            let tb = target_bins(target, k, fw.floors[k], kind)?;
            let mut acc = vec![0.0; ns * ns];
            for l in 0..nl {
                let b = bin_forward(&fp, &spec.vector(l, k), l);
                let qf: Vec<Option<Floored>> = match kind {
                    LossKind::Kld => b.cov.iter().map(|c| Floored::new(c, fw.floors[k]).map(Some)).collect::<Result<_>>()?,
                    LossKind::L2 => vec![None; ns],
                };
                for i in 0..ns {
                    let mu_p = target.mu(i, l, k);
                    for j in 0..ns {
                        acc[i * ns + j] += divergence(kind, &mu_p, tb[i * nl + l].as_ref(), &b.mu[j], qf[j].as_ref());
                    }
                }
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    // fixed-order reduction keeps results independent of the thread count
    let mut total = vec![vec![0.0; ns]; ns];
    for acc in &per_freq {
        for i in 0..ns {
            for j in 0..ns {
                total[i][j] += acc[i * ns + j];
            }
        }
    }
    if total.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::non_finite("loss"));
    }
    Ok(total)
}

/// Loss of the network on one spectrogram against fixed target posteriors.
pub fn loss_value(
    spec: &Spectrogram,
    target: &GaussianPosterior,
    params: &MaskNetParams,
    cfg: &MaskNetConfig,
    kind: LossKind,
) -> Result<LossBreakdown> {
    let fw = forward(spec, target, params, cfg)?;
    Ok(LossBreakdown::from_pairwise(pairwise(spec, target, &fw, kind)?))
}

/// Gradients of the loss at one frequency with respect to the SCM parameters.
struct FreqGrad {
    d_r: Vec<CMat>,
    /// `[i][d−1]`
    d_h: Vec<CMat>,
    d_rn: CMat,
    /// `[i][l]`
    d_v: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn freq_backward(
    spec: &Spectrogram,
    target: &GaussianPosterior,
    fp: &FreqParams,
    k: usize,
    floor: f64,
    perm: &[usize],
    kind: LossKind,
) -> Result<FreqGrad> {
    let (ns, nl, lr) = (fp.n_sources, fp.n_frames, fp.reverb_taps);
    let nm = spec.n_mics();
    let tb = target_bins(target, k, floor, kind)?;
    let mut g = FreqGrad {
        d_r: vec![CMat::zeros(nm); ns],
        d_h: vec![CMat::zeros(nm); ns * lr],
        d_rn: CMat::zeros(nm),
        d_v: vec![0.0; ns * nl],
    };
    for l in 0..nl {
        let x = spec.vector(l, k);
        let b = bin_forward(fp, &x, l);
        let mx = b.inv.mul_vec(&x);
        let mut d_sigma = vec![CMat::zeros(nm); ns];
        let mut d_inv = CMat::zeros(nm);
        for (i, &j) in perm.iter().enumerate() {
            let mu_p = target.mu(i, l, k);
            let (d_mu, d_cov) = match kind {
                LossKind::Kld => {
                    let q = Floored::new(&b.cov[j], floor)?;
                    let p = tb[i * nl + l].as_ref().expect("kld targets are floored");
                    kld_backward(&mu_p, p, &b.mu[j], &q)
                }
                LossKind::L2 => ((b.mu[j] - mu_p).scale(2.0.into()), CMat::zeros(nm)),
            };
            let s = &b.sigma[j];
            // μ = S M x
            d_sigma[j] += CMat::outer2(&d_mu, &mx);
            d_inv += &s.adjoint() * &CMat::outer2(&d_mu, &x);
            // V = herm(S − S M S)
            if kind == LossKind::Kld {
                let gv = d_cov.hermitize();
                let ms = &b.inv * s;
                let sm = s * &b.inv;
                d_sigma[j] += gv - &gv * &ms.adjoint() - &sm.adjoint() * &gv;
                d_inv -= &(&s.adjoint() * &gv) * &s.adjoint();
            }
        }
        // M = herm((herm(R_x) + δI)⁻¹)
        let d_inv = d_inv.hermitize();
        let d_a = -(&(&b.inv * &d_inv) * &b.inv);
        let mut d_rx = d_a.hermitize();
        if b.loaded {
            let rx = fp.assemble(l);
            if rx.re_trace() > 0.0 {
                let s = LOAD_REL / nm as f64 * d_a.re_trace();
                d_rx = d_rx.add_diag(s);
            }
        }
        for i in 0..ns {
            let total = d_sigma[i] + d_rx;
            g.d_v[i * nl + l] += total.inner(&fp.r[i]);
            g.d_r[i].axpy(fp.v(i, l), &total);
            for d in 1..=lr.min(l) {
                g.d_h[i * lr + d - 1].axpy(fp.v(i, l - d), &d_rx);
                g.d_v[i * nl + l - d] += d_rx.inner(fp.h(i, d));
            }
        }
        g.d_rn += d_rx;
    }
    Ok(g)
}

/// Loss and its exact gradient with respect to every network weight.
///
/// The chain is features → network → masks and variances → SCMs → Wiener
/// posterior → divergence → PIT. The targets are constants, and the PIT
/// assignment is held at its minimizer.
pub fn loss_and_grad(
    spec: &Spectrogram,
    target: &GaussianPosterior,
    params: &MaskNetParams,
    cfg: &MaskNetConfig,
    kind: LossKind,
) -> Result<(LossBreakdown, GradientBundle)> {
    let fw = forward(spec, target, params, cfg)?;
    let breakdown = LossBreakdown::from_pairwise(pairwise(spec, target, &fw, kind)?);
    let (ns, nl, nk) = (cfg.n_sources, spec.n_frames(), spec.n_freqs());
    let grads: Vec<FreqGrad> = (0..nk)
        .into_par_iter()
        .map(|k| freq_backward(spec, target, &fw.phi.freq(k), k, fw.floors[k], &breakdown.chosen_perm, kind))
        .collect::<Result<_>>()?;

    let mut d_phi = ScmParams::zeros(ns, nl, nk, spec.n_mics(), cfg.reverb_taps);
    let mut d_v = vec![0.0; ns * nl * nk];
    for (k, g) in grads.iter().enumerate() {
        for i in 0..ns {
            d_phi.r[i * nk + k] = g.d_r[i];
            for d in 1..=cfg.reverb_taps {
                let at = d_phi.h_index(i, d, k);
                d_phi.h[at] = g.d_h[i * cfg.reverb_taps + d - 1];
            }
            for l in 0..nl {
                d_v[(i * nl + l) * nk + k] = g.d_v[i * nl + l];
            }
        }
        d_phi.rn[k] = g.d_rn;
    }
    let d_masks: MaskSet = masks_to_scm_backward(spec, &fw.trace.masks, &fw.phi, &d_phi);
    let (d_mask_logits, d_var_logits) = head_backward(&fw.trace, cfg, &d_masks, &d_v);
    if d_mask_logits.iter().chain(d_var_logits.iter()).any(|x| !x.is_finite()) {
        return Err(Error::non_finite("gradient at the network heads"));
    }
    let grad = net_backward(&fw.trace, params, cfg, &d_mask_logits, &d_var_logits);
    if !grad.is_finite() {
        return Err(Error::non_finite("gradient of the network weights"));
    }
    Ok((breakdown, GradientBundle { d_mask_logits, d_var_logits, params: grad }))
}
