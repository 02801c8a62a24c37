//! Weighted prediction error (WPE) dereverberation.
//!
//! Each frequency is handled independently: the late tail is predicted from
//! delayed past frames by a MIMO linear filter and subtracted,
//! `x̃_l = x_l − W X_l` with `X_l = [x_{l−D}; …; x_{l−L_d+1}]`. The filter is
//! fitted by alternating a per-frame variance estimate with a
//! variance-weighted least-squares solve.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{CVec, C64};
use crate::signal::{SpecKind, Spectrogram};

/// Fitting parameters; defaults are delay 2, 16 taps, 3 iterations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WpeConfig {
    pub delay: usize,
    pub taps: usize,
    pub iterations: usize,
}

impl Default for WpeConfig {
    fn default() -> Self {
        Self { delay: 2, taps: 16, iterations: 3 }
    }
}

impl WpeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.delay < 1 {
            return Err(Error::invalid("WPE delay must be at least 1"));
        }
        if self.taps <= self.delay {
            return Err(Error::invalid("WPE tap length must exceed the delay"));
        }
        Ok(())
    }

    /// Number of delayed frames in the regressor.
    pub fn lags(&self) -> usize {
        self.taps - self.delay
    }
}

/// Per-frequency prediction filters.
#[derive(Clone, Debug, PartialEq)]
pub struct WpeFilter {
    pub n_mics: usize,
    pub delay: usize,
    pub taps: usize,
    /// `weights[k]` is `N_m × N_m·(L_d − D)`, row-major.
    pub weights: Vec<Vec<C64>>,
}

impl WpeFilter {
    pub fn zeros(n_mics: usize, n_freqs: usize, cfg: WpeConfig) -> Self {
        let p = n_mics * cfg.lags();
        Self { n_mics, delay: cfg.delay, taps: cfg.taps, weights: vec![vec![C64::new(0.0, 0.0); n_mics * p]; n_freqs] }
    }

    pub fn regressor_dim(&self) -> usize {
        self.n_mics * (self.taps - self.delay)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.weights.iter().flatten().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }
}

/// Stacked delayed frames at frequency `k`; frames before the start are zero.
fn regressor(spec: &Spectrogram, delay: usize, taps: usize, l: usize, k: usize, out: &mut [C64]) {
    let n_m = spec.n_mics();
    for (j, lag) in (delay..taps).enumerate() {
        for m in 0..n_m {
            out[j * n_m + m] = if l >= lag { spec.get(m, l - lag, k) } else { C64::new(0.0, 0.0) };
        }
    }
}

fn predict(w: &[C64], n_m: usize, reg: &[C64], x: &CVec) -> CVec {
    let p = reg.len();
    let mut y = *x;
    for r in 0..n_m {
        let row = &w[r * p..(r + 1) * p];
        let s: C64 = row.iter().zip(reg).map(|(a, b)| a * b).sum();
        y[r] -= s;
    }
    y
}

struct FreqFit {
    weights: Vec<C64>,
    objective: Vec<f64>,
}

fn fit_one(spec: &Spectrogram, k: usize, cfg: WpeConfig) -> FreqFit {
    let n_m = spec.n_mics();
    let n_l = spec.n_frames();
    let p = n_m * cfg.lags();
    let regs: Vec<Vec<C64>> = (0..n_l)
        .map(|l| {
            let mut r = vec![C64::new(0.0, 0.0); p];
            regressor(spec, cfg.delay, cfg.taps, l, k, &mut r);
            r
        })
        .collect();
    let xs: Vec<CVec> = (0..n_l).map(|l| spec.vector(l, k)).collect();
    let mean_power = xs.iter().map(|x| x.norm_sqr() / n_m as f64).sum::<f64>() / n_l as f64;
    let lambda_floor = (1e-8 * mean_power).max(1e-300);

    let mut weights = vec![C64::new(0.0, 0.0); n_m * p];
    let mut out: Vec<CVec> = xs.clone();
    let mut objective = Vec::with_capacity(cfg.iterations + 1);
    let lambda_of = |y: &CVec| (y.norm_sqr() / n_m as f64).max(lambda_floor);
    let objective_of = |out: &[CVec], lambda: &[f64]| -> f64 {
        out.iter().zip(lambda).map(|(y, &lam)| y.norm_sqr() / lam + n_m as f64 * lam.ln()).sum()
    };
    let mut lambda: Vec<f64> = out.iter().map(lambda_of).collect();
    objective.push(objective_of(&out, &lambda));

    for _ in 0..cfg.iterations {
        let mut gram = DMatrix::<C64>::zeros(p, p);
        let mut cross = DMatrix::<C64>::zeros(p, n_m);
        for l in 0..n_l {
            let inv = 1.0 / lambda[l];
            let r = &regs[l];
            for a in 0..p {
                let ra = r[a] * inv;
                if ra.re == 0.0 && ra.im == 0.0 {
                    continue;
                }
                for b in 0..p {
                    gram[(a, b)] += ra * r[b].conj();
                }
                for m in 0..n_m {
                    cross[(a, m)] += ra * xs[l][m].conj();
                }
            }
        }
        let coef = match gram.clone().cholesky() {
            Some(ch) => ch.solve(&cross),
            None => {
                let trace: f64 = (0..p).map(|i| gram[(i, i)].re).sum();
                let mut load = (1e-6 * trace / p as f64).max(1e-300);
                loop {
                    let mut g = gram.clone();
                    for i in 0..p {
                        g[(i, i)] += C64::new(load, 0.0);
                    }
                    if let Some(ch) = g.cholesky() {
                        break ch.solve(&cross);
                    }
                    load *= 10.0;
                }
            }
        };
        // W = Cᴴ
        for r in 0..n_m {
            for a in 0..p {
                weights[r * p + a] = coef[(a, r)].conj();
            }
        }
        for l in 0..n_l {
            out[l] = predict(&weights, n_m, &regs[l], &xs[l]);
        }
        lambda = out.iter().map(lambda_of).collect();
        objective.push(objective_of(&out, &lambda));
    }
    FreqFit { weights, objective }
}

/// Fit result with the weighted prediction-error objective summed over
/// frequencies, recorded before the first and after every iteration.
#[derive(Clone, Debug)]
pub struct WpeFit {
    pub filter: WpeFilter,
    pub objective: Vec<f64>,
}

pub fn wpe_fit_traced(spec: &Spectrogram, cfg: WpeConfig) -> Result<WpeFit> {
    cfg.validate()?;
    if spec.n_frames() < cfg.taps + 8 {
        return Err(Error::InputTooShort { len: spec.n_frames(), need: cfg.taps + 8 });
    }
    if !spec.is_finite() {
        return Err(Error::non_finite("WPE input"));
    }
    let fits: Vec<FreqFit> = (0..spec.n_freqs()).into_par_iter().map(|k| fit_one(spec, k, cfg)).collect();
    let mut objective = vec![0.0; cfg.iterations + 1];
    for f in &fits {
        for (o, v) in objective.iter_mut().zip(&f.objective) {
            *o += v;
        }
    }
    let filter = WpeFilter {
        n_mics: spec.n_mics(),
        delay: cfg.delay,
        taps: cfg.taps,
        weights: fits.into_iter().map(|f| f.weights).collect(),
    };
    Ok(WpeFit { filter, objective })
}

pub fn wpe_fit(spec: &Spectrogram, cfg: WpeConfig) -> Result<WpeFilter> {
    wpe_fit_traced(spec, cfg).map(|f| f.filter)
}

/// `x̃_{l,k} = x_{l,k} − W_k X_{l,k}`.
pub fn wpe_apply(spec: &Spectrogram, filter: &WpeFilter) -> Result<Spectrogram> {
    if spec.n_mics() != filter.n_mics || spec.n_freqs() != filter.weights.len() {
        return Err(Error::shape(format!(
            "filter for {} mics x {} freqs applied to {} x {}",
            filter.n_mics,
            filter.weights.len(),
            spec.n_mics(),
            spec.n_freqs()
        )));
    }
    let p = filter.regressor_dim();
    if filter.weights.iter().any(|w| w.len() != filter.n_mics * p) {
        return Err(Error::shape("filter weight length inconsistent with taps"));
    }
    let n_m = spec.n_mics();
    let per_k: Vec<Vec<CVec>> = (0..spec.n_freqs())
        .into_par_iter()
        .map(|k| {
            let mut reg = vec![C64::new(0.0, 0.0); p];
            (0..spec.n_frames())
                .map(|l| {
                    regressor(spec, filter.delay, filter.taps, l, k, &mut reg);
                    predict(&filter.weights[k], n_m, &reg, &spec.vector(l, k))
                })
                .collect()
        })
        .collect();
    let mut out = spec.with_bins(spec.bins().to_vec(), SpecKind::Dereverberated);
    for (k, frames) in per_k.iter().enumerate() {
        for (l, y) in frames.iter().enumerate() {
            out.set_vector(l, k, y);
        }
    }
    Ok(out)
}

/// Fit and apply in one go.
pub fn dereverberate(spec: &Spectrogram, cfg: WpeConfig) -> Result<Spectrogram> {
    let filter = wpe_fit(spec, cfg)?;
    wpe_apply(spec, &filter)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn cgauss(rng: &mut ChaCha8Rng) -> C64 {
        let re: f64 = StandardNormal.sample(rng);
        let im: f64 = StandardNormal.sample(rng);
        C64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
    }

    fn spec_from(f: impl Fn(usize, usize, usize) -> C64, m: usize, l: usize, k: usize) -> Spectrogram {
        let mut s = Spectrogram::zeros(m, l, k);
        for mm in 0..m {
            for ll in 0..l {
                for kk in 0..k {
                    s.set(mm, ll, kk, f(mm, ll, kk));
                }
            }
        }
        s
    }

    #[test]
    fn zero_filter_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let vals: Vec<C64> = (0..2 * 30 * 5).map(|_| cgauss(&mut rng)).collect();
        let s = spec_from(|m, l, k| vals[(m * 30 + l) * 5 + k], 2, 30, 5);
        let f = WpeFilter::zeros(2, 5, WpeConfig::default());
        let y = wpe_apply(&s, &f).unwrap();
        assert_eq!(y.bins(), s.bins());
        assert_eq!(y.kind, SpecKind::Dereverberated);
    }

    #[test]
    fn single_frame_has_empty_history() {
        let s = spec_from(|m, _, k| C64::new(1.0 + m as f64, k as f64), 2, 1, 5);
        let mut f = WpeFilter::zeros(2, 5, WpeConfig::default());
        for w in &mut f.weights {
            w.iter_mut().for_each(|z| *z = C64::new(0.3, -0.1));
        }
        let y = wpe_apply(&s, &f).unwrap();
        assert_eq!(y.bins(), s.bins());
    }

    #[test]
    fn hand_computed_scalar_case() {
        // one mic, delay 2, one tap: x̃_l = x_l − w·x_{l−2}
        let xs = [C64::new(1.0, 0.0), C64::new(2.0, 1.0), C64::new(-1.0, 3.0)];
        let s = spec_from(|_, l, _| xs[l], 1, 3, 2);
        let w = C64::new(0.5, 0.25);
        let f = WpeFilter { n_mics: 1, delay: 2, taps: 3, weights: vec![vec![w]; 2] };
        let y = wpe_apply(&s, &f).unwrap();
        assert_eq!(y.get(0, 0, 0), xs[0]);
        assert_eq!(y.get(0, 1, 0), xs[1]);
        assert_eq!(y.get(0, 2, 0), xs[2] - w * xs[0]);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let s = Spectrogram::zeros(2, 40, 5);
        let f = WpeFilter::zeros(3, 5, WpeConfig::default());
        assert!(wpe_apply(&s, &f).is_err());
    }

    #[test]
    fn too_few_frames_rejected() {
        let s = Spectrogram::zeros(2, 20, 5);
        assert!(wpe_fit(&s, WpeConfig::default()).is_err());
    }

    #[test]
    fn white_input_is_left_nearly_unchanged() {
        let s = white(2, 2, 6000, 3);
        let f = wpe_fit(&s, WpeConfig::default()).unwrap();
        let y = wpe_apply(&s, &f).unwrap();
        let change: f64 = y.bins().iter().zip(s.bins()).map(|(a, b)| (a - b).norm_sqr()).sum();
        let energy: f64 = s.bins().iter().map(|z| z.norm_sqr()).sum();
        assert!(change / energy < 0.01, "relative change {}", change / energy);
    }

    fn white(seed: u64, m: usize, l: usize, k: usize) -> Spectrogram {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vals: Vec<C64> = (0..m * l * k).map(|_| cgauss(&mut rng)).collect();
        spec_from(|mm, ll, kk| vals[(mm * l + ll) * k + kk], m, l, k)
    }

    /// Moving-average tail `x_l = s_l + 0.8 s_{l−2}`.
    pub(crate) fn echo_case(seed: u64, m: usize, l: usize, k: usize) -> (Spectrogram, Spectrogram) {
        let s = white(seed, m, l, k);
        let x = spec_from(
            |mm, ll, kk| {
                let tail = if ll >= 2 { s.get(mm, ll - 2, kk) * 0.8 } else { C64::new(0.0, 0.0) };
                s.get(mm, ll, kk) + tail
            },
            m,
            l,
            k,
        );
        (s, x)
    }

    fn tail_reduction_db(s: &Spectrogram, x: &Spectrogram, y: &Spectrogram) -> f64 {
        let before: f64 = x.bins().iter().zip(s.bins()).map(|(a, b)| (a - b).norm_sqr()).sum();
        let after: f64 = y.bins().iter().zip(s.bins()).map(|(a, b)| (a - b).norm_sqr()).sum();
        10.0 * (before / after).log10()
    }

    #[test]
    fn recursive_tail_is_removed() {
        // x_l = s_l + 0.8 x_{l−2}: a single lag-2 tap predicts the tail exactly
        let nm = 3;
        let s = white(3, nm, 4000, 3);
        let mut x = s.clone();
        for m in 0..nm {
            for l in 2..4000 {
                for k in 0..3 {
                    let z = s.get(m, l, k) + x.get(m, l - 2, k) * 0.8;
                    x.set(m, l, k, z);
                }
            }
        }
        let y = dereverberate(&x, WpeConfig::default()).unwrap();
        let db = tail_reduction_db(&s, &x, &y);
        assert!(db >= 20.0, "tail reduction {db} dB");
    }

    #[test]
    fn moving_average_tail_is_attenuated() {
        // 7 even lags truncate the inverse of (1 + 0.8 z²); the least-squares
        // floor is about 17.9 dB, so only a substantial reduction is checked
        let (s, x) = echo_case(3, 2, 3000, 3);
        let y = dereverberate(&x, WpeConfig::default()).unwrap();
        let db = tail_reduction_db(&s, &x, &y);
        assert!(db >= 10.0, "tail reduction {db} dB");
    }

    #[test]
    fn objective_is_non_increasing() {
        let (_, x) = echo_case(4, 2, 200, 6);
        let fit = wpe_fit_traced(&x, WpeConfig { iterations: 6, ..Default::default() }).unwrap();
        for w in fit.objective.windows(2) {
            assert!(w[1] <= w[0] + 1e-8 * w[0].abs(), "{:?}", fit.objective);
        }
    }

    #[test]
    fn frequency_permutation_commutes_with_fit() {
        let (_, x) = echo_case(5, 2, 80, 5);
        let perm = [3usize, 0, 4, 1, 2];
        let xp = spec_from(|m, l, k| x.get(m, l, perm[k]), 2, 80, 5);
        let y = dereverberate(&x, WpeConfig::default()).unwrap();
        let yp = dereverberate(&xp, WpeConfig::default()).unwrap();
        for m in 0..2 {
            for l in 0..80 {
                for k in 0..5 {
                    assert_eq!(yp.get(m, l, k), y.get(m, l, perm[k]));
                }
            }
        }
    }

    #[test]
    fn apply_is_linear() {
        let (_, a) = echo_case(6, 2, 60, 3);
        let (_, b) = echo_case(7, 2, 60, 3);
        let f = wpe_fit(&a, WpeConfig::default()).unwrap();
        let c = C64::new(0.3, -2.0);
        let sum = a.with_bins(a.bins().iter().zip(b.bins()).map(|(x, y)| x + y * c).collect(), SpecKind::Mixture);
        let ya = wpe_apply(&a, &f).unwrap();
        let yb = wpe_apply(&b, &f).unwrap();
        let ys = wpe_apply(&sum, &f).unwrap();
        for i in 0..ys.bins().len() {
            assert!((ys.bins()[i] - (ya.bins()[i] + yb.bins()[i] * c)).norm() < 1e-10);
        }
    }
}
