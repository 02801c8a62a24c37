use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::lgm::{pcsg_separate, GaussianPosterior, LgmConfig, LgmInit};
use crate::linalg::C64;
use crate::mask::{MaskNetConfig, MaskNetParams};
use crate::signal::Spectrogram;

use super::{loss_and_grad, loss_value, LossKind};

/// Relative step of the central differences.
const FD_STEP_REL: f64 = 1e-4;
/// Denominator floor of the relative error, as a fraction of the largest
/// gradient entry. Keeps near-zero entries from dominating the report.
const DENOM_FLOOR_REL: f64 = 1e-3;

/// A tiny end-to-end problem: mixture, pseudo-clean target, network and weights.
pub struct GradcheckInstance {
    pub spec: Spectrogram,
    pub target: GaussianPosterior,
    pub cfg: MaskNetConfig,
    pub params: MaskNetParams,
}

/// Two microphones, two sources, 10 frames and 5 bins, with targets from a
/// short PCSG run and weights jittered away from the near-uniform init.
pub fn gradcheck_instance(seed: u64, reverb_taps: usize) -> Result<GradcheckInstance> {
    let (nm, nl, nk, ns) = (2, 10, 5, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let steer: Vec<Vec<C64>> = (0..ns * nk)
        .map(|_| (0..nm).map(|_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect())
        .collect();
    let mut spec = Spectrogram::zeros(nm, nl, nk);
    for l in 0..nl {
        for k in 0..nk {
            for m in 0..nm {
                let mut x = C64::new(rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05));
                for i in 0..ns {
                    let amp = if (l / 3 + i) % 2 == 0 { 1.0 } else { 0.2 };
                    let s = C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)) * amp;
                    x += steer[i * nk + k][m] * s;
                }
                spec.set(m, l, k, x);
            }
        }
    }
    let lgm = LgmConfig { n_sources: ns, reverb_taps, n_em: 5, perm_refine: 1, init: LgmInit::Random, seed };
    let (target, _) = pcsg_separate(&spec, &lgm)?;
    let mut cfg = MaskNetConfig::new(nm, nk, ns, reverb_taps);
    cfg.hidden = vec![6, 5];
    let mut params = MaskNetParams::init(&cfg, seed);
    for s in params.slices_mut() {
        for w in s.iter_mut() {
            *w += rng.gen_range(-0.3..0.3);
        }
    }
    Ok(GradcheckInstance { spec, target, cfg, params })
}

/// Worst relative error within one parameter tensor.
#[derive(Clone, Debug, Serialize)]
pub struct BlockError {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_index: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub kind: LossKind,
    pub reverb_taps: usize,
    pub n_params: usize,
    pub loss: f64,
    pub max_rel_err: f64,
    pub blocks: Vec<BlockError>,
}

/// Compares the analytic gradient of the loss with central differences on
/// every network weight.
///
/// The error of entry `n` is `|g_n − ĝ_n| / max(|g_n|, |ĝ_n|, 1e-3·max|g|)`.
pub fn gradcheck(seed: u64, reverb_taps: usize, kind: LossKind) -> Result<GradcheckReport> {
    check_gradient(&gradcheck_instance(seed, reverb_taps)?, kind)
}

/// [`gradcheck`] on a caller-built instance.
pub fn check_gradient(inst: &GradcheckInstance, kind: LossKind) -> Result<GradcheckReport> {
    let (breakdown, bundle) = loss_and_grad(&inst.spec, &inst.target, &inst.params, &inst.cfg, kind)?;
    let analytic: Vec<(String, Vec<f64>)> =
        bundle.params.named().into_iter().map(|(n, _, a)| (n, a.to_vec())).collect();
    let scale = analytic.iter().flat_map(|(_, a)| a.iter()).fold(0.0f64, |m, g| m.max(g.abs()));
    let floor = (DENOM_FLOOR_REL * scale).max(f64::MIN_POSITIVE);

    let mut work = inst.params.clone();
    let mut blocks = Vec::with_capacity(analytic.len());
    for (b, (name, grad)) in analytic.iter().enumerate() {
        let mut worst = BlockError { name: name.clone(), max_rel_err: 0.0, worst_index: 0 };
        for (n, &g) in grad.iter().enumerate() {
            let theta = work.slices_mut()[b][n];
            let h = FD_STEP_REL * theta.abs().max(1.0);
            work.slices_mut()[b][n] = theta + h;
            let up = loss_value(&inst.spec, &inst.target, &work, &inst.cfg, kind)?.total;
            work.slices_mut()[b][n] = theta - h;
            let down = loss_value(&inst.spec, &inst.target, &work, &inst.cfg, kind)?.total;
            work.slices_mut()[b][n] = theta;
            let num = (up - down) / (2.0 * h);
            let err = (num - g).abs() / num.abs().max(g.abs()).max(floor);
            if err > worst.max_rel_err {
                worst.max_rel_err = err;
                worst.worst_index = n;
            }
        }
        blocks.push(worst);
    }
    let max_rel_err = blocks.iter().fold(0.0f64, |m, b| m.max(b.max_rel_err));
    Ok(GradcheckReport {
        kind,
        reverb_taps: inst.cfg.reverb_taps,
        n_params: inst.params.n_params(),
        loss: breakdown.total,
        max_rel_err,
        blocks,
    })
}
