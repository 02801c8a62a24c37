//! Synthetic reverberant multichannel scenes with ground-truth source images.

mod rir;
mod speech;

use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{read_wav, write_wav, MultichannelWave, WavFormat};

pub use rir::{synth_rir, RirSpec, SPEED_OF_SOUND};
pub use speech::{load_corpus, speech_like};

/// Independent generator for one purpose within a seeded scene.
pub(crate) fn sub_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Linear convolution truncated to `out_len` samples.
pub fn fft_convolve(a: &[f64], b: &[f64], out_len: usize) -> Vec<f64> {
    if a.is_empty() || b.is_empty() {
        return vec![0.0; out_len];
    }
    let n = (a.len() + b.len() - 1).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let pad = |x: &[f64]| {
        let mut v: Vec<Complex64> = x.iter().map(|&r| Complex64::new(r, 0.0)).collect();
        v.resize(n, Complex64::new(0.0, 0.0));
        v
    };
    let mut fa = pad(a);
    let mut fb = pad(b);
    fwd.process(&mut fa);
    fwd.process(&mut fb);
    for (x, y) in fa.iter_mut().zip(&fb) {
        *x *= y;
    }
    inv.process(&mut fa);
    let scale = 1.0 / n as f64;
    (0..out_len).map(|t| if t < n { fa[t].re * scale } else { 0.0 }).collect()
}

fn power(w: &MultichannelWave) -> f64 {
    w.energy() / (w.len() * w.n_channels()).max(1) as f64
}

/// Recorded settings of a generated scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub seed: u64,
    pub rt60: f64,
    pub snr_db: f64,
    pub sir_db: f64,
    pub mic_spacing: f64,
    pub azimuths_deg: Vec<f64>,
    pub n_sources: usize,
    pub n_mics: usize,
    pub sample_rate: u32,
}

/// Mixture `x = Σ_i c_i + w` with its reverberant source images `c_i` and noise `w`.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureScene {
    pub sources: Vec<Vec<f64>>,
    pub rirs: Vec<Vec<Vec<f64>>>,
    pub images: Vec<MultichannelWave>,
    pub noise: MultichannelWave,
    pub mixture: MultichannelWave,
    pub meta: SceneMeta,
}

/// Convolves each source with its RIRs, sets every interferer to `sir_db`
/// below source 0, and adds white Gaussian noise `snr_db` below the summed
/// images. `snr_db = +∞` disables the noise.
pub fn make_scene(sources: &[Vec<f64>], rirspecs: &[RirSpec], sir_db: f64, snr_db: f64, seed: u64) -> Result<MixtureScene> {
    if sources.is_empty() || sources.len() != rirspecs.len() {
        return Err(Error::invalid("need one RIR spec per source"));
    }
    let len = sources[0].len();
    if sources.iter().any(|s| s.len() != len) {
        return Err(Error::shape("sources must have equal length"));
    }
    let nm = rirspecs[0].n_mics();
    let fs = rirspecs[0].sample_rate;
    if rirspecs.iter().any(|r| r.n_mics() != nm || r.sample_rate != fs) {
        return Err(Error::invalid("RIR specs must share microphone count and sample rate"));
    }
    if sir_db.is_nan() || snr_db.is_nan() {
        return Err(Error::invalid("SIR and SNR must be numbers"));
    }
    for (i, s) in sources.iter().enumerate() {
        if s.iter().all(|&x| x == 0.0) || s.iter().any(|x| !x.is_finite()) {
            return Err(Error::Degenerate(format!("source {i} is silent or non-finite")));
        }
    }

    let mut rirs = Vec::with_capacity(sources.len());
    let mut images = Vec::with_capacity(sources.len());
    for (i, (src, spec)) in sources.iter().zip(rirspecs).enumerate() {
        let h = synth_rir(spec, seed.wrapping_add(1 + i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))?;
        let chans = h.iter().map(|hm| fft_convolve(src, hm, len)).collect();
        images.push(MultichannelWave::new(chans, fs)?);
        rirs.push(h);
    }
    let p0 = power(&images[0]);
    if p0 == 0.0 {
        return Err(Error::Degenerate("source 0 image is silent".into()));
    }
    for img in images.iter_mut().skip(1) {
        let p = power(img);
        if p == 0.0 {
            return Err(Error::Degenerate("source image is silent".into()));
        }
        let g = (p0 / 10f64.powf(sir_db / 10.0) / p).sqrt();
        for m in 0..nm {
            img.channel_mut(m).iter_mut().for_each(|x| *x *= g);
        }
    }

    let mut sum = MultichannelWave::zeros(nm, len, fs);
    for img in &images {
        for m in 0..nm {
            for (a, b) in sum.channel_mut(m).iter_mut().zip(img.channel(m)) {
                *a += b;
            }
        }
    }
    let mut noise = MultichannelWave::zeros(nm, len, fs);
    if snr_db.is_finite() {
        let mut rng = sub_rng(seed, 7);
        for m in 0..nm {
            noise.channel_mut(m).iter_mut().for_each(|x| *x = rng.sample(StandardNormal));
        }
        let g = (power(&sum) / 10f64.powf(snr_db / 10.0) / power(&noise)).sqrt();
        for m in 0..nm {
            noise.channel_mut(m).iter_mut().for_each(|x| *x *= g);
        }
    } else if snr_db < 0.0 {
        return Err(Error::invalid("SNR of −∞ is not meaningful"));
    }

    let mut mixture = MultichannelWave::zeros(nm, len, fs);
    for m in 0..nm {
        for t in 0..len {
            let mut x = 0.0;
            for img in &images {
                x += img.channel(m)[t];
            }
            mixture.channel_mut(m)[t] = x + noise.channel(m)[t];
        }
    }
    let meta = SceneMeta {
        seed,
        rt60: rirspecs[0].rt60,
        snr_db,
        sir_db,
        mic_spacing: rirspecs[0].mic_spacing,
        azimuths_deg: Vec::new(),
        n_sources: sources.len(),
        n_mics: nm,
        sample_rate: fs,
    };
    Ok(MixtureScene { sources: sources.to_vec(), rirs, images, noise, mixture, meta })
}

/// Distribution of randomly drawn scenes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub n_mics: usize,
    pub n_sources: usize,
    pub sample_rate: u32,
    pub duration_s: f64,
    pub rt60_choices: Vec<f64>,
    pub sir_range_db: (f64, f64),
    pub snr_range_db: (f64, f64),
    pub mic_spacing: f64,
    pub distance_m: f64,
    pub drr_db: f64,
    pub min_separation_deg: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            n_mics: 2,
            n_sources: 2,
            sample_rate: 8000,
            duration_s: 2.0,
            rt60_choices: vec![0.36, 0.61],
            sir_range_db: (-5.0, 5.0),
            snr_range_db: (20.0, 30.0),
            mic_spacing: 0.08,
            distance_m: 1.0,
            drr_db: 3.0,
            min_separation_deg: 30.0,
        }
    }
}

fn draw(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Scene with speech-like sources at random, well separated azimuths.
pub fn random_scene(cfg: &SceneConfig, seed: u64) -> Result<MixtureScene> {
    if cfg.n_sources == 0 || cfg.n_mics == 0 || cfg.rt60_choices.is_empty() {
        return Err(Error::invalid("scene needs sources, microphones and an rt60"));
    }
    if cfg.min_separation_deg * (cfg.n_sources as f64 - 1.0) > 180.0 {
        return Err(Error::invalid("azimuth separation cannot be satisfied"));
    }
    let mut rng = sub_rng(seed, 3);
    let rt60 = cfg.rt60_choices[rng.gen_range(0..cfg.rt60_choices.len())];
    let sir = draw(&mut rng, cfg.sir_range_db);
    let snr = draw(&mut rng, cfg.snr_range_db);
    let mut az: Vec<f64> = Vec::new();
    while az.len() < cfg.n_sources {
        let a = rng.gen_range(0.0..180.0);
        if az.iter().all(|b| (a - b).abs() >= cfg.min_separation_deg) {
            az.push(a);
        }
    }
    let len = (cfg.duration_s * cfg.sample_rate as f64).round() as usize;
    let sources: Vec<Vec<f64>> =
        (0..cfg.n_sources).map(|i| speech_like(len, cfg.sample_rate, seed.wrapping_mul(31).wrapping_add(i as u64))).collect();
    let specs: Vec<RirSpec> = az
        .iter()
        .map(|&a| RirSpec::far_field(cfg.n_mics, cfg.mic_spacing, a, cfg.distance_m, rt60, cfg.drr_db, cfg.sample_rate))
        .collect();
    let mut scene = make_scene(&sources, &specs, sir, snr, seed)?;
    scene.meta.azimuths_deg = az;
    Ok(scene)
}

/// A scene as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneFiles {
    pub mixture: MultichannelWave,
    pub images: Vec<MultichannelWave>,
    pub noise: MultichannelWave,
    pub meta: SceneMeta,
}

/// Writes `mixture.wav`, `source_<i>_image.wav`, `noise.wav` and `scene.json`.
pub fn write_scene_dir(dir: impl AsRef<Path>, scene: &MixtureScene) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    write_wav(dir.join("mixture.wav"), &scene.mixture, WavFormat::Float32)?;
    for (i, img) in scene.images.iter().enumerate() {
        write_wav(dir.join(format!("source_{i}_image.wav")), img, WavFormat::Float32)?;
    }
    write_wav(dir.join("noise.wav"), &scene.noise, WavFormat::Float32)?;
    std::fs::write(dir.join("scene.json"), serde_json::to_string_pretty(&scene.meta)?)?;
    Ok(())
}

pub fn read_scene_dir(dir: impl AsRef<Path>) -> Result<SceneFiles> {
    let dir = dir.as_ref();
    let meta: SceneMeta = serde_json::from_str(&std::fs::read_to_string(dir.join("scene.json"))?)?;
    let mixture = read_wav(dir.join("mixture.wav"))?;
    let images = (0..meta.n_sources)
        .map(|i| read_wav(dir.join(format!("source_{i}_image.wav"))))
        .collect::<Result<Vec<_>>>()?;
    let noise = read_wav(dir.join("noise.wav"))?;
    Ok(SceneFiles { mixture, images, noise, meta })
}
