use std::f64::consts::PI;

use crate::linalg::{CMat, C64};
use crate::signal::Spectrogram;

use super::params::ScmParams;
use super::permutation::{permutations, PermutationMap};

/// Delay search range in samples, on either side of zero.
pub const MAX_DELAY: f64 = 16.0;
const DELAY_STEP: f64 = 0.1;
/// Sources closer than this (in samples, reference pair) are not both picked.
const MIN_DELAY_GAP: f64 = 0.5;
/// Frames more than 30 dB below the loudest frame do not vote.
const ACTIVE_FRAME_REL: f64 = 1e-3;
/// Diagonal added to the rank-one steering SCM at initialization.
pub const STEER_LOADING: f64 = 0.5;

fn omega(k: usize, n_freqs: usize) -> f64 {
    if n_freqs > 1 {
        PI * k as f64 / (n_freqs - 1) as f64
    } else {
        0.0
    }
}

fn grid() -> Vec<f64> {
    let n = (2.0 * MAX_DELAY / DELAY_STEP).round() as usize;
    (0..=n).map(|g| -MAX_DELAY + DELAY_STEP * g as f64).collect()
}

/// GCC-PHAT delay of microphone `m` against microphone 0 in every frame,
/// as grid indices, or `None` for inactive frames.
fn frame_delays(spec: &Spectrogram, m: usize, grid: &[f64]) -> Vec<Option<usize>> {
    let (nl, nk) = (spec.n_frames(), spec.n_freqs());
    let energy: Vec<f64> = (0..nl).map(|l| (0..nk).map(|k| spec.vector(l, k).norm_sqr()).sum()).collect();
    let top = energy.iter().cloned().fold(0.0, f64::max);
    // e^{-jωτ} for every (grid point, bin)
    let rot: Vec<C64> = grid
        .iter()
        .flat_map(|&t| (0..nk).map(move |k| C64::from_polar(1.0, -omega(k, nk) * t)))
        .collect();
    (0..nl)
        .map(|l| {
            if top <= 0.0 || energy[l] < ACTIVE_FRAME_REL * top {
                return None;
            }
            let phat: Vec<C64> = (0..nk)
                .map(|k| {
                    let c = spec.get(m, l, k) * spec.get(0, l, k).conj();
                    let r = c.norm();
                    if r > 0.0 {
                        c / r
                    } else {
                        C64::new(0.0, 0.0)
                    }
                })
                .collect();
            let mut best = (f64::NEG_INFINITY, 0);
            for g in 0..grid.len() {
                let row = &rot[g * nk..(g + 1) * nk];
                let score: f64 = phat.iter().zip(row).map(|(a, b)| (a * b).re).sum();
                if score > best.0 {
                    best = (score, g);
                }
            }
            Some(best.1)
        })
        .collect()
}

fn smoothed_histogram(votes: impl Iterator<Item = usize>, n: usize) -> Vec<f64> {
    let mut hist = vec![0.0; n];
    for g in votes {
        hist[g] += 1.0;
    }
    // triangular kernel, half-width 4 grid steps
    (0..n)
        .map(|g| {
            (g.saturating_sub(3)..(g + 4).min(n)).map(|h| hist[h] * (4.0 - (g as f64 - h as f64).abs())).sum()
        })
        .collect()
}

/// Per-source delays `τ[i][m−1]` of every microphone relative to microphone 0,
/// in samples, from a histogram of per-frame GCC-PHAT peaks.
///
/// Peaks of the reference pair (0, 1) define the sources; frames are assigned
/// to the nearest peak and the other pairs take the histogram mode over the
/// frames of each source. Returns `None` for single-channel input or when no
/// frame is active.
pub fn estimate_delays(spec: &Spectrogram, n_sources: usize) -> Option<Vec<Vec<f64>>> {
    let nm = spec.n_mics();
    if nm < 2 || n_sources == 0 || spec.n_freqs() < 2 {
        return None;
    }
    let grid = grid();
    let ref_votes = frame_delays(spec, 1, &grid);
    if ref_votes.iter().all(Option::is_none) {
        return None;
    }
    let hist = smoothed_histogram(ref_votes.iter().flatten().copied(), grid.len());
    let n = grid.len();
    let is_peak = |g: usize| (g == 0 || hist[g] > hist[g - 1]) && (g + 1 == n || hist[g] >= hist[g + 1]);
    // local maxima first, then any remaining bin if too few sources stand out
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| is_peak(b).cmp(&is_peak(a)).then(hist[b].total_cmp(&hist[a])).then(a.cmp(&b)));
    let mut peaks: Vec<usize> = Vec::new();
    for g in order {
        if peaks.iter().all(|&p| (grid[p] - grid[g]).abs() >= MIN_DELAY_GAP) {
            peaks.push(g);
            if peaks.len() == n_sources {
                break;
            }
        }
    }
    let owner: Vec<Option<usize>> = ref_votes
        .iter()
        .map(|v| {
            v.map(|g| {
                (0..peaks.len())
                    .min_by(|&a, &b| (grid[peaks[a]] - grid[g]).abs().total_cmp(&(grid[peaks[b]] - grid[g]).abs()))
                    .expect("at least one peak")
            })
        })
        .collect();
    let mut taus = vec![vec![0.0; nm - 1]; peaks.len()];
    for (i, &p) in peaks.iter().enumerate() {
        taus[i][0] = grid[p];
    }
    for m in 2..nm {
        let votes = frame_delays(spec, m, &grid);
        for (i, tau) in taus.iter_mut().enumerate() {
            let mine = votes.iter().zip(&owner).filter(|(_, o)| **o == Some(i)).filter_map(|(v, _)| *v);
            let h = smoothed_histogram(mine, grid.len());
            let best = (0..grid.len()).max_by(|&a, &b| h[a].total_cmp(&h[b]).then(b.cmp(&a))).expect("non-empty grid");
            tau[m - 1] = grid[best];
        }
    }
    Some(taus)
}

/// Unit-modulus far-field steering vector `[1, e^{jωτ_1}, …]`.
fn steering(taus: &[f64], w: f64) -> Vec<C64> {
    std::iter::once(C64::new(1.0, 0.0)).chain(taus.iter().map(|&t| C64::from_polar(1.0, w * t))).collect()
}

/// Replaces every source SCM by `a aᴴ + STEER_LOADING·I` built from the delays.
/// Sources without a delay estimate keep their current SCM.
pub fn steer_scms(params: &mut ScmParams, taus: &[Vec<f64>]) {
    let (nk, nm) = (params.n_freqs, params.n_mics);
    for (i, t) in taus.iter().enumerate().take(params.n_sources) {
        for k in 0..nk {
            let a = steering(t, omega(k, nk));
            params.r[i * nk + k] = CMat::from_fn(nm, |r, c| {
                a[r] * a[c].conj() + if r == c { C64::new(STEER_LOADING, 0.0) } else { C64::new(0.0, 0.0) }
            });
        }
    }
}

/// Aligns sources across frequencies by matching the principal eigenvector
/// phases of each SCM to the given per-source delays.
///
/// Each SCM votes with weight `(λ₁ − λ₂)/tr`, so nearly isotropic SCMs
/// barely count. Ties keep the lowest permutation in lexicographic order.
pub fn solve_permutation_spatial(params: &ScmParams, taus: &[Vec<f64>]) -> PermutationMap {
    let (ns, nk, nm) = (params.n_sources, params.n_freqs, params.n_mics);
    if ns < 2 || nm < 2 || taus.len() < ns {
        return PermutationMap::identity(nk, ns);
    }
    let cands = permutations(ns);
    let mut map = PermutationMap::identity(nk, ns);
    for k in 0..nk {
        let w = omega(k, nk);
        // (weight, principal eigenvector) per source at this bin
        let cues: Vec<(f64, Vec<C64>)> = (0..ns)
            .map(|j| {
                let e = params.r_at(j, k).eigh();
                let tr: f64 = e.values[..nm].iter().sum();
                let weight = if tr > 0.0 { (e.values[nm - 1] - e.values[nm - 2]) / tr } else { 0.0 };
                (weight, (0..nm).map(|m| e.vectors[(m, nm - 1)]).collect())
            })
            .collect();
        let fit = |i: usize, j: usize| -> f64 {
            let (weight, u) = &cues[j];
            (1..nm).map(|m| weight * ((u[m] * u[0].conj()).arg() - w * taus[i][m - 1]).cos()).sum()
        };
        let mut best = (f64::NEG_INFINITY, 0);
        for (c, p) in cands.iter().enumerate() {
            let score: f64 = p.iter().enumerate().map(|(i, &j)| fit(i, j)).sum();
            if score > best.0 {
                best = (score, c);
            }
        }
        map.perms[k] = cands[best.1].clone();
    }
    map
}
