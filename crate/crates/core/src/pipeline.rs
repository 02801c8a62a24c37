//! End-to-end paths from a multichannel waveform to separated source images,
//! plus container encodings of the intermediate products.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lgm::{pcsg_separate, GaussianPosterior, LgmConfig, ScmParams};
use crate::linalg::{CMat, C64};
use crate::mask::{infer_and_refine, MaskNetConfig, MaskNetParams};
use crate::signal::{istft, stft, MultichannelWave, SpecKind, Spectrogram, DEFAULT_FRAME, DEFAULT_HOP};
use crate::train::Container;
use crate::wpe::{dereverberate, WpeConfig};

/// STFT, dereverberation and PCSG settings shared by every path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub frame_size: usize,
    pub hop: usize,
    pub wpe: WpeConfig,
    pub lgm: LgmConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self { frame_size: DEFAULT_FRAME, hop: DEFAULT_HOP, wpe: WpeConfig::default(), lgm: LgmConfig::default() }
    }
}

/// Separated output of one utterance.
#[derive(Clone, Debug)]
pub struct Separation {
    /// The dereverberated mixture the model was fitted to.
    pub spec: Spectrogram,
    pub posterior: GaussianPosterior,
    /// Multichannel image estimate of every source.
    pub images: Vec<MultichannelWave>,
}

/// Zeros placed before the waveform so that its first sample is covered by
/// as many frames as an interior one.
fn lead(cfg: &PipelineConfig) -> usize {
    cfg.frame_size.saturating_sub(cfg.hop)
}

/// Pads `lead` zeros in front and enough at the end to fill the last frame
/// and cover the final sample fully.
fn pad_for_framing(wave: &MultichannelWave, cfg: &PipelineConfig) -> Result<MultichannelWave> {
    let pre = lead(cfg);
    let mut total = wave.len() + 2 * pre;
    if cfg.hop > 0 && total > cfg.frame_size {
        total += (cfg.hop - (total - cfg.frame_size) % cfg.hop) % cfg.hop;
    }
    let channels = wave
        .channels()
        .iter()
        .map(|c| {
            let mut x = vec![0.0; total];
            x[pre..pre + c.len()].copy_from_slice(c);
            x
        })
        .collect();
    MultichannelWave::new(channels, wave.sample_rate())
}

/// Undoes [`pad_for_framing`] on a resynthesized waveform.
fn crop(wave: &MultichannelWave, cfg: &PipelineConfig, len: usize) -> Result<MultichannelWave> {
    let pre = lead(cfg);
    let channels = wave.channels().iter().map(|c| c[pre..pre + len].to_vec()).collect();
    MultichannelWave::new(channels, wave.sample_rate())
}

/// STFT followed by WPE. The waveform is zero-padded at both ends so that
/// every input sample is fully reconstructed by overlap-add.
pub fn front_end(wave: &MultichannelWave, cfg: &PipelineConfig) -> Result<Spectrogram> {
    if wave.n_channels() < 2 && cfg.lgm.n_sources >= 2 {
        return Err(Error::NeedMultichannel);
    }
    if wave.len() < cfg.frame_size {
        return Err(Error::InputTooShort { len: wave.len(), need: cfg.frame_size });
    }
    dereverberate(&stft(&pad_for_framing(wave, cfg)?, cfg.frame_size, cfg.hop)?, cfg.wpe)
}

fn images(post: &GaussianPosterior, spec: &Spectrogram, cfg: &PipelineConfig, len: usize) -> Result<Vec<MultichannelWave>> {
    (0..post.n_sources).map(|i| crop(&istft(&post.source_image(i, spec))?, cfg, len)).collect()
}

/// WPE, LGM fitted by EM, and Wiener posteriors.
pub fn separate_pcsg(wave: &MultichannelWave, cfg: &PipelineConfig) -> Result<(Separation, ScmParams)> {
    let spec = front_end(wave, cfg)?;
    let (posterior, params) = pcsg_separate(&spec, &cfg.lgm)?;
    let images = images(&posterior, &spec, cfg, wave.len())?;
    Ok((Separation { spec, posterior, images }, params))
}

/// WPE, network-derived SCMs and `n_refine` EM iterations.
pub fn separate_dnn(
    wave: &MultichannelWave,
    cfg: &PipelineConfig,
    params: &MaskNetParams,
    net: &MaskNetConfig,
    n_refine: usize,
) -> Result<Separation> {
    let spec = front_end(wave, cfg)?;
    if spec.n_mics() != net.n_mics || spec.n_freqs() != net.n_freqs {
        return Err(Error::shape(format!(
            "network expects {} mics and {} bins, input has {} and {}",
            net.n_mics,
            net.n_freqs,
            spec.n_mics(),
            spec.n_freqs()
        )));
    }
    let (posterior, padded) = infer_and_refine(&spec, params, net, n_refine)?;
    let images = padded.iter().map(|w| crop(w, cfg, wave.len())).collect::<Result<_>>()?;
    Ok(Separation { spec, posterior, images })
}

fn complex_to_f64(z: &[C64]) -> Vec<f64> {
    z.iter().flat_map(|c| [c.re, c.im]).collect()
}

fn f64_to_complex(x: &[f64]) -> Vec<C64> {
    x.chunks_exact(2).map(|c| C64::new(c[0], c[1])).collect()
}

fn mats_to_f64(ms: &[CMat]) -> Vec<f64> {
    ms.iter().flat_map(|m| complex_to_f64(&m.to_packed())).collect()
}

fn f64_to_mats(x: &[f64], n: usize) -> Vec<CMat> {
    f64_to_complex(x).chunks_exact(n * n).map(|c| CMat::from_packed(n, c)).collect()
}

/// Spectrogram metadata stored next to the `spec` array.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpecMeta {
    pub frame_size: usize,
    pub hop: usize,
    pub sample_rate: u32,
    pub signal_len: usize,
    pub kind: SpecKind,
}

/// Adds `{prefix}` as `[M, L, K, 2]` and returns its metadata.
pub fn put_spectrogram(c: &mut Container, prefix: &str, s: &Spectrogram) -> SpecMeta {
    c.push(prefix, vec![s.n_mics(), s.n_frames(), s.n_freqs(), 2], complex_to_f64(s.bins()));
    SpecMeta { frame_size: s.frame_size, hop: s.hop, sample_rate: s.sample_rate, signal_len: s.signal_len, kind: s.kind }
}

pub fn get_spectrogram(c: &Container, prefix: &str, meta: &SpecMeta) -> Result<Spectrogram> {
    let a = c.get(prefix)?;
    let [m, l, k, two] = a.shape[..] else {
        return Err(Error::Checkpoint(format!("array {prefix:?} is not [M, L, K, 2]")));
    };
    if two != 2 {
        return Err(Error::Checkpoint(format!("array {prefix:?} is not complex")));
    }
    let mut s = Spectrogram::from_bins(f64_to_complex(&a.data), m, l, k, meta.frame_size, meta.hop)?;
    s.sample_rate = meta.sample_rate;
    s.signal_len = meta.signal_len;
    s.kind = meta.kind;
    Ok(s)
}

/// Adds `{prefix}.mu` `[N_s, L, K, M, 2]` and `{prefix}.cov` `[N_s, L, K, M, M, 2]`.
pub fn put_posterior(c: &mut Container, prefix: &str, p: &GaussianPosterior) {
    let (ns, nl, nk, nm) = (p.n_sources, p.n_frames, p.n_freqs, p.n_mics);
    c.push(format!("{prefix}.mu"), vec![ns, nl, nk, nm, 2], complex_to_f64(&p.mu));
    c.push(format!("{prefix}.cov"), vec![ns, nl, nk, nm, nm, 2], complex_to_f64(&p.cov));
}

pub fn get_posterior(c: &Container, prefix: &str) -> Result<GaussianPosterior> {
    let mu = c.get(&format!("{prefix}.mu"))?;
    let [ns, nl, nk, nm, _] = mu.shape[..] else {
        return Err(Error::Checkpoint(format!("array {prefix}.mu is not [N_s, L, K, M, 2]")));
    };
    let mut p = GaussianPosterior::zeros(ns, nl, nk, nm);
    p.mu = f64_to_complex(c.take(&format!("{prefix}.mu"), &[ns, nl, nk, nm, 2])?);
    p.cov = f64_to_complex(c.take(&format!("{prefix}.cov"), &[ns, nl, nk, nm, nm, 2])?);
    Ok(p)
}

/// Shape of an [`ScmParams`] as stored in container metadata.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScmDims {
    pub n_sources: usize,
    pub n_frames: usize,
    pub n_freqs: usize,
    pub n_mics: usize,
    pub reverb_taps: usize,
}

/// Adds `{prefix}.v`, `.r`, `.h` and `.rn`; matrices are stored `[…, M, M, 2]`.
pub fn put_scm_params(c: &mut Container, prefix: &str, p: &ScmParams) -> ScmDims {
    let (ns, nl, nk, nm, lr) = (p.n_sources, p.n_frames, p.n_freqs, p.n_mics, p.reverb_taps);
    c.push(format!("{prefix}.v"), vec![ns, nl, nk], p.v.clone());
    c.push(format!("{prefix}.r"), vec![ns, nk, nm, nm, 2], mats_to_f64(&p.r));
    c.push(format!("{prefix}.h"), vec![ns, lr, nk, nm, nm, 2], mats_to_f64(&p.h));
    c.push(format!("{prefix}.rn"), vec![nk, nm, nm, 2], mats_to_f64(&p.rn));
    ScmDims { n_sources: ns, n_frames: nl, n_freqs: nk, n_mics: nm, reverb_taps: lr }
}

pub fn get_scm_params(c: &Container, prefix: &str, d: &ScmDims) -> Result<ScmParams> {
    let (ns, nl, nk, nm, lr) = (d.n_sources, d.n_frames, d.n_freqs, d.n_mics, d.reverb_taps);
    let mut p = ScmParams::zeros(ns, nl, nk, nm, lr);
    p.v = c.take(&format!("{prefix}.v"), &[ns, nl, nk])?.to_vec();
    p.r = f64_to_mats(c.take(&format!("{prefix}.r"), &[ns, nk, nm, nm, 2])?, nm);
    p.h = f64_to_mats(c.take(&format!("{prefix}.h"), &[ns, lr, nk, nm, nm, 2])?, nm);
    p.rn = f64_to_mats(c.take(&format!("{prefix}.rn"), &[nk, nm, nm, 2])?, nm);
    Ok(p)
}
