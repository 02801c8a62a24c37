use ndarray::{s, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{FeatureFrameSeq, FeatureLayout};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

/// Shape of the feed-forward mask estimator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskNetConfig {
    pub n_mics: usize,
    pub n_freqs: usize,
    pub n_sources: usize,
    pub reverb_taps: usize,
    pub hidden: Vec<usize>,
    /// Frames of context on each side.
    pub context: usize,
    pub activation: Activation,
}

impl MaskNetConfig {
    pub fn new(n_mics: usize, n_freqs: usize, n_sources: usize, reverb_taps: usize) -> Self {
        Self { n_mics, n_freqs, n_sources, reverb_taps, hidden: vec![256, 256], context: 2, activation: Activation::Tanh }
    }

    pub fn layout(&self) -> FeatureLayout {
        FeatureLayout::for_mics(self.n_freqs, self.n_mics)
    }

    pub fn input_dim(&self) -> usize {
        (2 * self.context + 1) * self.layout().dim()
    }

    /// Mask categories per bin: speech, reverb taps, noise.
    pub fn n_categories(&self) -> usize {
        self.n_sources + self.n_sources * self.reverb_taps + 1
    }

    pub fn mask_outputs(&self) -> usize {
        self.n_categories() * self.n_freqs
    }

    pub fn var_outputs(&self) -> usize {
        self.n_sources * self.n_freqs
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_mics == 0 || self.n_freqs == 0 || self.n_sources == 0 {
            return Err(Error::invalid("mask net sizes must be positive"));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::invalid("need at least one non-empty hidden layer"));
        }
        Ok(())
    }
}

/// Affine layer `y = x W + b` with `W` stored `[in × out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Dense {
    fn zeros(n_in: usize, n_out: usize) -> Self {
        Self { w: Array2::zeros((n_in, n_out)), b: Array1::zeros(n_out) }
    }

    fn glorot(n_in: usize, n_out: usize, gain: f64, rng: &mut ChaCha8Rng) -> Self {
        let lim = gain * (6.0 / (n_in + n_out) as f64).sqrt();
        let w = Array2::from_shape_simple_fn((n_in, n_out), || rng.gen_range(-lim..lim));
        Self { w, b: Array1::zeros(n_out) }
    }

    fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w) + &self.b
    }
}

/// Trainable weights: hidden layers, then the mask and variance heads.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskNetParams {
    pub hidden: Vec<Dense>,
    pub mask: Dense,
    pub var: Dense,
}

impl MaskNetParams {
    pub fn zeros(cfg: &MaskNetConfig) -> Self {
        let mut n_in = cfg.input_dim();
        let mut hidden = Vec::new();
        for &h in &cfg.hidden {
            hidden.push(Dense::zeros(n_in, h));
            n_in = h;
        }
        Self { hidden, mask: Dense::zeros(n_in, cfg.mask_outputs()), var: Dense::zeros(n_in, cfg.var_outputs()) }
    }

    /// Glorot-uniform weights; the heads start ten times smaller so initial
    /// masks are close to uniform.
    pub fn init(cfg: &MaskNetConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut n_in = cfg.input_dim();
        let mut hidden = Vec::new();
        for &h in &cfg.hidden {
            hidden.push(Dense::glorot(n_in, h, 1.0, &mut rng));
            n_in = h;
        }
        let mask = Dense::glorot(n_in, cfg.mask_outputs(), 0.1, &mut rng);
        let var = Dense::glorot(n_in, cfg.var_outputs(), 0.1, &mut rng);
        Self { hidden, mask, var }
    }

    /// Named arrays in a fixed order; names are used in checkpoints.
    pub fn named(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut layers: Vec<(String, &Dense)> =
            self.hidden.iter().enumerate().map(|(j, d)| (format!("hidden{j}"), d)).collect();
        layers.push(("mask".into(), &self.mask));
        layers.push(("var".into(), &self.var));
        let mut out = Vec::new();
        for (name, d) in layers {
            out.push((format!("{name}.w"), d.w.shape().to_vec(), d.w.as_slice().expect("standard layout")));
            out.push((format!("{name}.b"), d.b.shape().to_vec(), d.b.as_slice().expect("standard layout")));
        }
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for d in self.hidden.iter_mut().chain([&mut self.mask, &mut self.var]) {
            out.push(d.w.as_slice_mut().expect("standard layout"));
            out.push(d.b.as_slice_mut().expect("standard layout"));
        }
        out
    }

    pub fn n_params(&self) -> usize {
        self.named().iter().map(|(_, _, a)| a.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, _, a)| a.iter().all(|x| x.is_finite()))
    }

    /// Euclidean norm over every array.
    pub fn norm(&self) -> f64 {
        self.named().iter().flat_map(|(_, _, a)| a.iter()).map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for a in self.slices_mut() {
            a.iter_mut().for_each(|x| *x *= s);
        }
    }

    /// Rebuilds parameters from named arrays, checking names and shapes against `cfg`.
    pub fn from_named(cfg: &MaskNetConfig, arrays: &[(String, Vec<usize>, Vec<f64>)]) -> Result<Self> {
        let mut p = Self::zeros(cfg);
        let expect: Vec<(String, Vec<usize>)> = p.named().into_iter().map(|(n, s, _)| (n, s)).collect();
        if expect.len() != arrays.len() {
            return Err(Error::Checkpoint(format!("expected {} arrays, found {}", expect.len(), arrays.len())));
        }
        for ((dst, (name, shape)), (n, s, data)) in p.slices_mut().into_iter().zip(&expect).zip(arrays) {
            if n != name || s != shape || data.len() != dst.len() {
                return Err(Error::Checkpoint(format!("array {n} {s:?} does not match {name} {shape:?}")));
            }
            dst.copy_from_slice(data);
        }
        Ok(p)
    }
}

/// Masks per bin; values lie on the simplex across all categories.
///
/// `speech` is `[i][l][k]`, `reverb` is `[i][d−1][l][k]`, `noise` is `[l][k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSet {
    pub n_sources: usize,
    pub reverb_taps: usize,
    pub n_frames: usize,
    pub n_freqs: usize,
    pub speech: Vec<f64>,
    pub reverb: Vec<f64>,
    pub noise: Vec<f64>,
}

impl MaskSet {
    pub fn uniform(n_sources: usize, reverb_taps: usize, n_frames: usize, n_freqs: usize) -> Self {
        let u = 1.0 / (n_sources + n_sources * reverb_taps + 1) as f64;
        let lk = n_frames * n_freqs;
        Self {
            n_sources,
            reverb_taps,
            n_frames,
            n_freqs,
            speech: vec![u; n_sources * lk],
            reverb: vec![u; n_sources * reverb_taps * lk],
            noise: vec![u; lk],
        }
    }

    #[inline]
    pub fn speech_at(&self, i: usize, l: usize, k: usize) -> f64 {
        self.speech[(i * self.n_frames + l) * self.n_freqs + k]
    }

    #[inline]
    pub fn reverb_at(&self, i: usize, d: usize, l: usize, k: usize) -> f64 {
        self.reverb[((i * self.reverb_taps + d - 1) * self.n_frames + l) * self.n_freqs + k]
    }

    #[inline]
    pub fn noise_at(&self, l: usize, k: usize) -> f64 {
        self.noise[l * self.n_freqs + k]
    }

    /// Mask of category `c` (speech, reverb by `(i, d)`, noise) at `(l, k)`.
    fn category_index(&self, c: usize, l: usize, k: usize) -> (usize, usize) {
        let (ns, lk) = (self.n_sources, self.n_frames * self.n_freqs);
        let at = l * self.n_freqs + k;
        if c < ns {
            (0, c * lk + at)
        } else if c < ns + ns * self.reverb_taps {
            (1, (c - ns) * lk + at)
        } else {
            (2, at)
        }
    }

    fn set_category(&mut self, c: usize, l: usize, k: usize, v: f64) {
        match self.category_index(c, l, k) {
            (0, j) => self.speech[j] = v,
            (1, j) => self.reverb[j] = v,
            (_, j) => self.noise[j] = v,
        }
    }

    pub(crate) fn category(&self, c: usize, l: usize, k: usize) -> f64 {
        match self.category_index(c, l, k) {
            (0, j) => self.speech[j],
            (1, j) => self.reverb[j],
            (_, j) => self.noise[j],
        }
    }

    /// Largest deviation of a per-bin category sum from one.
    pub fn simplex_error(&self) -> f64 {
        let nc = self.n_sources + self.n_sources * self.reverb_taps + 1;
        let mut worst: f64 = 0.0;
        for l in 0..self.n_frames {
            for k in 0..self.n_freqs {
                let s: f64 = (0..nc).map(|c| self.category(c, l, k)).sum();
                worst = worst.max((s - 1.0).abs());
            }
        }
        worst
    }
}

/// Per-frequency variance scale: mean power relative to its average over frequency.
///
/// Keeping the scale dimensionless means `v R` and `R_n` both scale with the
/// input power, so the model is invariant to the overall gain.
pub fn power_scale(power_per_freq: &[f64]) -> Vec<f64> {
    let mean = power_per_freq.iter().sum::<f64>() / power_per_freq.len().max(1) as f64;
    if mean > 0.0 && mean.is_finite() {
        power_per_freq.iter().map(|p| (p / mean).max(1e-12)).collect()
    } else {
        vec![1.0; power_per_freq.len()]
    }
}

/// Activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct NetTrace {
    pub input: Array2<f64>,
    /// Post-activation output of every hidden layer.
    pub hidden: Vec<Array2<f64>>,
    pub masks: MaskSet,
    /// `[i][l][k]`
    pub v_q: Vec<f64>,
}

/// Stacks `±context` frames of mean-normalized features into one row per frame.
/// Frames outside the sequence are zero.
fn context_input(features: &FeatureFrameSeq, cfg: &MaskNetConfig) -> Array2<f64> {
    let f = features.dim();
    let nl = features.n_frames;
    let k = cfg.n_freqs;
    let count = (nl * k).max(1) as f64;
    let mean_log = (0..nl).map(|l| features.row(l)[..k].iter().sum::<f64>()).sum::<f64>() / count;
    let width = 2 * cfg.context + 1;
    let mut x = Array2::zeros((nl, width * f));
    for l in 0..nl {
        for w in 0..width {
            let src = l as isize + w as isize - cfg.context as isize;
            if src < 0 || src >= nl as isize {
                continue;
            }
            let row = features.row(src as usize);
            let mut dst = x.slice_mut(s![l, w * f..(w + 1) * f]);
            for (j, d) in dst.iter_mut().enumerate() {
                *d = if j < k { row[j] - mean_log } else { row[j] };
            }
        }
    }
    x
}

fn activate(a: Activation, x: &mut Array2<f64>) {
    match a {
        Activation::Tanh => x.mapv_inplace(f64::tanh),
        Activation::Relu => x.mapv_inplace(|v| v.max(0.0)),
    }
}

fn check_finite(x: &Array2<f64>, layer: &str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::non_finite(format!("mask net layer {layer}")))
    }
}

/// Forward pass keeping intermediate activations.
pub fn net_forward_trace(
    features: &FeatureFrameSeq,
    scale: &[f64],
    params: &MaskNetParams,
    cfg: &MaskNetConfig,
) -> Result<NetTrace> {
    cfg.validate()?;
    if features.layout != cfg.layout() {
        return Err(Error::shape("feature layout does not match the mask net config"));
    }
    if scale.len() != cfg.n_freqs {
        return Err(Error::shape("power scale length must equal the number of frequencies"));
    }
    if params.hidden.len() != cfg.hidden.len() || params.mask.w.nrows() != *cfg.hidden.last().expect("validated") {
        return Err(Error::shape("parameters do not match the mask net config"));
    }
    let input = context_input(features, cfg);
    if params.hidden[0].w.nrows() != input.ncols() {
        return Err(Error::shape("first layer width does not match the feature context"));
    }
    let mut hidden = Vec::with_capacity(params.hidden.len());
    let mut h = input.clone();
    for (j, layer) in params.hidden.iter().enumerate() {
        let mut a = layer.apply(&h);
        activate(cfg.activation, &mut a);
        check_finite(&a, &j.to_string())?;
        hidden.push(a.clone());
        h = a;
    }
    let z = params.mask.apply(&h);
    check_finite(&z, "mask")?;
    let sv = params.var.apply(&h);
    check_finite(&sv, "var")?;

    let (nl, nk, ns) = (features.n_frames, cfg.n_freqs, cfg.n_sources);
    let nc = cfg.n_categories();
    let mut masks = MaskSet::uniform(ns, cfg.reverb_taps, nl, nk);
    let mut buf = vec![0.0; nc];
    for l in 0..nl {
        for k in 0..nk {
            let mut top = f64::NEG_INFINITY;
            for (c, b) in buf.iter_mut().enumerate() {
                *b = z[(l, c * nk + k)];
                top = top.max(*b);
            }
            let mut sum = 0.0;
            for b in buf.iter_mut() {
                *b = (*b - top).exp();
                sum += *b;
            }
            for (c, b) in buf.iter().enumerate() {
                masks.set_category(c, l, k, b / sum);
            }
        }
    }
    let mut v_q = vec![0.0; ns * nl * nk];
    for i in 0..ns {
        for l in 0..nl {
            for k in 0..nk {
                v_q[(i * nl + l) * nk + k] = sv[(l, i * nk + k)].exp() * scale[k];
            }
        }
    }
    if v_q.iter().any(|v| !v.is_finite()) {
        return Err(Error::non_finite("mask net layer var (exp)"));
    }
    Ok(NetTrace { input, hidden, masks, v_q })
}

/// Masks and source variances `v_q` (`[i][l][k]`) for one feature sequence.
pub fn net_forward(
    features: &FeatureFrameSeq,
    scale: &[f64],
    params: &MaskNetParams,
    cfg: &MaskNetConfig,
) -> Result<(MaskSet, Vec<f64>)> {
    let t = net_forward_trace(features, scale, params, cfg)?;
    Ok((t.masks, t.v_q))
}

/// Back-propagates gradients of the mask logits (`[L × C·K]`, category-major
/// columns) and variance logits (`[L × N_s·K]`) to every weight.
pub fn net_backward(
    trace: &NetTrace,
    params: &MaskNetParams,
    cfg: &MaskNetConfig,
    d_mask_logits: &Array2<f64>,
    d_var_logits: &Array2<f64>,
) -> MaskNetParams {
    let mut g = MaskNetParams::zeros(cfg);
    let top = trace.hidden.last().expect("at least one hidden layer");
    g.mask.w = top.t().dot(d_mask_logits);
    g.mask.b = d_mask_logits.sum_axis(Axis(0));
    g.var.w = top.t().dot(d_var_logits);
    g.var.b = d_var_logits.sum_axis(Axis(0));
    let mut dh = d_mask_logits.dot(&params.mask.w.t()) + d_var_logits.dot(&params.var.w.t());
    for j in (0..params.hidden.len()).rev() {
        let out = &trace.hidden[j];
        match cfg.activation {
            Activation::Tanh => dh.zip_mut_with(out, |d, &y| *d *= 1.0 - y * y),
            Activation::Relu => dh.zip_mut_with(out, |d, &y| *d = if y > 0.0 { *d } else { 0.0 }),
        }
        let below = if j == 0 { &trace.input } else { &trace.hidden[j - 1] };
        g.hidden[j].w = below.t().dot(&dh);
        g.hidden[j].b = dh.sum_axis(Axis(0));
        if j > 0 {
            dh = dh.dot(&params.hidden[j].w.t());
        }
    }
    g
}

/// Gradient of the softmax masks and `v_q` back to the head logits.
pub(crate) fn head_backward(
    trace: &NetTrace,
    cfg: &MaskNetConfig,
    d_masks: &MaskSet,
    d_v: &[f64],
) -> (Array2<f64>, Array2<f64>) {
    let m = &trace.masks;
    let (nl, nk, ns, nc) = (m.n_frames, m.n_freqs, cfg.n_sources, cfg.n_categories());
    let mut dz = Array2::zeros((nl, nc * nk));
    for l in 0..nl {
        for k in 0..nk {
            let dot: f64 = (0..nc).map(|c| m.category(c, l, k) * d_masks.category(c, l, k)).sum();
            for c in 0..nc {
                dz[(l, c * nk + k)] = m.category(c, l, k) * (d_masks.category(c, l, k) - dot);
            }
        }
    }
    let mut ds = Array2::zeros((nl, ns * nk));
    for i in 0..ns {
        for l in 0..nl {
            for k in 0..nk {
                let at = (i * nl + l) * nk + k;
                ds[(l, i * nk + k)] = d_v[at] * trace.v_q[at];
            }
        }
    }
    (dz, ds)
}
