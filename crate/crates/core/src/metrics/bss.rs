use nalgebra::{DMatrix, DVector};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::lgm::permutations;

/// Length of the time-invariant distortion filters allowed on each reference.
pub const DISTORTION_TAPS: usize = 512;

/// Ratios above this are reported as the cap.
pub const SDR_CAP_DB: f64 = 100.0;

#[derive(Clone, Debug, PartialEq)]
pub struct BssEval {
    /// Per reference `i`, in dB.
    pub sdr: Vec<f64>,
    pub sir: Vec<f64>,
    pub sar: Vec<f64>,
    /// `perm[i]` is the estimate scored against reference `i`.
    pub perm: Vec<usize>,
}

impl BssEval {
    pub fn mean_sdr(&self) -> f64 {
        self.sdr.iter().sum::<f64>() / self.sdr.len().max(1) as f64
    }

    pub fn mean_sir(&self) -> f64 {
        self.sir.iter().sum::<f64>() / self.sir.len().max(1) as f64
    }
}

struct Spectra {
    n: usize,
    planner: FftPlanner<f64>,
}

impl Spectra {
    fn new(len: usize) -> Self {
        Self { n: len.next_power_of_two(), planner: FftPlanner::new() }
    }

    fn forward(&mut self, x: &[f64]) -> Vec<Complex64> {
        let mut v: Vec<Complex64> = x.iter().map(|&r| Complex64::new(r, 0.0)).collect();
        v.resize(self.n, Complex64::new(0.0, 0.0));
        self.planner.plan_fft_forward(self.n).process(&mut v);
        v
    }

    fn inverse(&mut self, mut v: Vec<Complex64>) -> Vec<f64> {
        self.planner.plan_fft_inverse(self.n).process(&mut v);
        let s = 1.0 / self.n as f64;
        v.iter().map(|z| z.re * s).collect()
    }

    /// `xc[d] = Σ_u a[u] b[u + d]` for `d = 0..taps`, plus negative lags in `neg[d] = xc[−d]`.
    fn xcorr(&mut self, fa: &[Complex64], fb: &[Complex64], taps: usize) -> (Vec<f64>, Vec<f64>) {
        let prod: Vec<Complex64> = fa.iter().zip(fb).map(|(a, b)| a.conj() * b).collect();
        let r = self.inverse(prod);
        let pos = r[..taps].to_vec();
        let neg = (0..taps).map(|d| if d == 0 { r[0] } else { r[self.n - d] }).collect();
        (pos, neg)
    }
}

fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

fn ratio_db(num: f64, den: f64) -> f64 {
    if den <= 0.0 {
        return SDR_CAP_DB;
    }
    (10.0 * (num / den).log10()).min(SDR_CAP_DB)
}

fn solve_spd(g: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    if let Some(ch) = g.clone().cholesky() {
        return ch.solve(b);
    }
    let n = g.nrows();
    let tr = g.trace() / n as f64;
    let mut ridge = 1e-10 * tr.max(f64::MIN_POSITIVE);
    loop {
        let mut gl = g.clone();
        for i in 0..n {
            gl[(i, i)] += ridge;
        }
        if let Some(ch) = gl.cholesky() {
            return ch.solve(b);
        }
        ridge *= 10.0;
    }
}

/// Decomposition of every estimate against every reference.
///
/// Follows the classic projection scheme: the target is the projection onto
/// delayed copies of the matched reference, interference is the remaining
/// part of the projection onto all references, and artifacts are the rest.
pub fn bss_eval(estimates: &[Vec<f64>], references: &[Vec<f64>]) -> Result<BssEval> {
    let ns = references.len();
    if ns == 0 || estimates.len() != ns {
        return Err(Error::invalid("need as many estimates as references"));
    }
    if ns > 4 {
        return Err(Error::invalid("at most 4 sources supported"));
    }
    let t = references[0].len();
    if references.iter().chain(estimates).any(|x| x.len() != t) {
        return Err(Error::shape("estimates and references must have equal length"));
    }
    if references.iter().any(|r| energy(r) == 0.0) {
        return Err(Error::Degenerate("reference signal is all zero".into()));
    }
    if references.iter().chain(estimates).flatten().any(|x| !x.is_finite()) {
        return Err(Error::non_finite("metric input"));
    }
    let taps = DISTORTION_TAPS.min(t);
    let out_len = t + taps - 1;
    let mut sp = Spectra::new(t + out_len);
    let fr: Vec<_> = references.iter().map(|r| sp.forward(r)).collect();
    let fe: Vec<_> = estimates.iter().map(|e| sp.forward(e)).collect();

    // Gram of all delayed references: G[(i,τ),(j,σ)] = R_ij(τ − σ)
    let mut big = DMatrix::<f64>::zeros(ns * taps, ns * taps);
    for i in 0..ns {
        for j in 0..ns {
            let (pos, neg) = sp.xcorr(&fr[j], &fr[i], taps);
            // R_ij(d) = Σ_u r_i[u] r_j[u + d]; with a = r_j, b = r_i this is xc at −d
            for tau in 0..taps {
                for sigma in 0..taps {
                    let d = tau as isize - sigma as isize;
                    big[(i * taps + tau, j * taps + sigma)] = if d >= 0 { neg[d as usize] } else { pos[(-d) as usize] };
                }
            }
        }
    }

    // cross terms b[(i,τ)] = Σ_u r_i[u] e[u + τ]
    let cross: Vec<Vec<Vec<f64>>> =
        fe.iter().map(|e| fr.iter().map(|r| sp.xcorr(r, e, taps).0).collect()).collect();

    let filter = |sp: &mut Spectra, fref: &[Complex64], coef: &[f64]| -> Vec<f64> {
        let fc = sp.forward(coef);
        let prod: Vec<Complex64> = fref.iter().zip(&fc).map(|(a, b)| a * b).collect();
        let mut y = sp.inverse(prod);
        y.truncate(out_len);
        y
    };

    // target projections for every (estimate, reference) pair
    let mut target = vec![vec![Vec::new(); ns]; ns];
    for i in 0..ns {
        let gi = big.view((i * taps, i * taps), (taps, taps)).clone_owned();
        let chol = gi.clone().cholesky();
        for (j, cr) in cross.iter().enumerate() {
            let b = DVector::from_column_slice(&cr[i]);
            let c = match &chol {
                Some(ch) => ch.solve(&b),
                None => solve_spd(&gi, &b),
            };
            target[j][i] = filter(&mut sp, &fr[i], c.as_slice());
        }
    }

    // projection onto all references, per estimate
    let big_chol = big.clone().cholesky();
    let mut full = Vec::with_capacity(ns);
    for cr in &cross {
        let b = DVector::from_iterator(ns * taps, cr.iter().flatten().copied());
        let c = match &big_chol {
            Some(ch) => ch.solve(&b),
            None => solve_spd(&big, &b),
        };
        let mut p = vec![0.0; out_len];
        for i in 0..ns {
            let y = filter(&mut sp, &fr[i], &c.as_slice()[i * taps..(i + 1) * taps]);
            p.iter_mut().zip(&y).for_each(|(a, b)| *a += b);
        }
        full.push(p);
    }

    let mut sdr = vec![vec![0.0; ns]; ns];
    let mut sir = vec![vec![0.0; ns]; ns];
    let mut sar = vec![vec![0.0; ns]; ns];
    for j in 0..ns {
        let mut est = estimates[j].clone();
        est.resize(out_len, 0.0);
        for i in 0..ns {
            let s = &target[j][i];
            let e_interf: Vec<f64> = full[j].iter().zip(s).map(|(p, s)| p - s).collect();
            let e_artif: Vec<f64> = est.iter().zip(&full[j]).map(|(e, p)| e - p).collect();
            let e_total: Vec<f64> = e_interf.iter().zip(&e_artif).map(|(a, b)| a + b).collect();
            let es = energy(s);
            sdr[j][i] = ratio_db(es, energy(&e_total));
            sir[j][i] = ratio_db(es, energy(&e_interf));
            sar[j][i] = ratio_db(energy(&full[j]), energy(&e_artif));
        }
    }

    let mut best: Option<(f64, Vec<usize>)> = None;
    for p in permutations(ns) {
        let score: f64 = (0..ns).map(|i| sdr[p[i]][i]).sum();
        if best.as_ref().is_none_or(|(b, _)| score > *b) {
            best = Some((score, p));
        }
    }
    let perm = best.expect("at least one permutation").1;
    Ok(BssEval {
        sdr: (0..ns).map(|i| sdr[perm[i]][i]).collect(),
        sir: (0..ns).map(|i| sir[perm[i]][i]).collect(),
        sar: (0..ns).map(|i| sar[perm[i]][i]).collect(),
        perm,
    })
}
