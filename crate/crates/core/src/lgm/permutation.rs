use super::params::ScmParams;

/// Per-frequency source relabeling.
///
/// `perms[k][i]` is the source index at frequency `k` that becomes global
/// source `i`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PermutationMap {
    pub perms: Vec<Vec<usize>>,
}

impl PermutationMap {
    pub fn identity(n_freqs: usize, n_sources: usize) -> Self {
        Self { perms: vec![(0..n_sources).collect(); n_freqs] }
    }

    pub fn is_identity(&self) -> bool {
        self.perms.iter().all(|p| p.iter().enumerate().all(|(i, &j)| i == j))
    }
}

/// All permutations of `0..n` in lexicographic order.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur: Vec<usize> = (0..n).collect();
    loop {
        out.push(cur.clone());
        // next lexicographic permutation
        let Some(i) = (1..n).rev().find(|&i| cur[i - 1] < cur[i]) else { break };
        let j = (i..n).rev().find(|&j| cur[j] > cur[i - 1]).unwrap();
        cur.swap(i - 1, j);
        cur[i..].reverse();
    }
    out
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

/// Normalized variance envelopes `[k][i][l]`.
fn envelopes(params: &ScmParams) -> Vec<Vec<Vec<f64>>> {
    (0..params.n_freqs)
        .map(|k| {
            (0..params.n_sources)
                .map(|i| {
                    let e: Vec<f64> = (0..params.n_frames).map(|l| params.v_at(i, l, k)).collect();
                    let s: f64 = e.iter().sum();
                    if s > 0.0 {
                        e.iter().map(|x| x / s).collect()
                    } else {
                        e
                    }
                })
                .collect()
        })
        .collect()
}

fn best_perm(centroid: &[Vec<f64>], env: &[Vec<f64>], cands: &[Vec<usize>]) -> Vec<usize> {
    let mut best = &cands[0];
    let mut best_score = f64::NEG_INFINITY;
    for p in cands {
        let score: f64 = p.iter().enumerate().map(|(i, &j)| pearson(&centroid[i], &env[j])).sum();
        if score > best_score {
            best_score = score;
            best = p;
        }
    }
    best.clone()
}

/// Aligns sources across frequencies by envelope correlation.
///
/// Frequencies are visited in descending order of total source power. Each
/// is matched against the running sum of already aligned envelopes. Each of
/// the `refine_passes` sweeps then re-matches every frequency against the
/// centroid of all others.
pub fn solve_permutation_refined(params: &ScmParams, refine_passes: usize) -> PermutationMap {
    let (ns, nk, nl) = (params.n_sources, params.n_freqs, params.n_frames);
    if ns < 2 || nk == 0 || nl == 0 {
        return PermutationMap::identity(nk, ns);
    }
    let env = envelopes(params);
    let power: Vec<f64> = (0..nk)
        .map(|k| {
            (0..ns)
                .map(|i| params.r_at(i, k).re_trace() * (0..nl).map(|l| params.v_at(i, l, k)).sum::<f64>())
                .sum()
        })
        .collect();
    let mut order: Vec<usize> = (0..nk).collect();
    order.sort_by(|&a, &b| power[b].total_cmp(&power[a]).then(a.cmp(&b)));

    let cands = permutations(ns);
    let mut map = PermutationMap::identity(nk, ns);
    let mut centroid = vec![vec![0.0; nl]; ns];
    let add = |centroid: &mut Vec<Vec<f64>>, e: &[Vec<f64>], p: &[usize], sign: f64| {
        for (i, &j) in p.iter().enumerate() {
            for (c, x) in centroid[i].iter_mut().zip(&e[j]) {
                *c += sign * x;
            }
        }
    };
    for (n, &k) in order.iter().enumerate() {
        if n > 0 {
            map.perms[k] = best_perm(&centroid, &env[k], &cands);
        }
        add(&mut centroid, &env[k], &map.perms[k], 1.0);
    }
    for _ in 0..refine_passes {
        let mut changed = false;
        for &k in &order {
            let old = map.perms[k].clone();
            add(&mut centroid, &env[k], &old, -1.0);
            let new = best_perm(&centroid, &env[k], &cands);
            add(&mut centroid, &env[k], &new, 1.0);
            changed |= new != old;
            map.perms[k] = new;
        }
        if !changed {
            break;
        }
    }
    map
}

/// Greedy alignment without refinement sweeps.
pub fn solve_permutation(params: &ScmParams) -> PermutationMap {
    solve_permutation_refined(params, 0)
}

pub fn apply_permutation(params: &ScmParams, map: &PermutationMap) -> ScmParams {
    let mut out = params.clone();
    for (k, p) in map.perms.iter().enumerate() {
        out.set_freq(k, &params.freq(k).relabeled(p));
    }
    out
}
