//! End-to-end acceptance run. Each criterion prints one `criterion N: PASS`
//! or `criterion N: FAIL` line with the measured value next to its pinned
//! threshold. The test itself only fails on errors or on the correctness
//! criteria (1 to 4), since the scaled trend checks are reported as measured.
//!
//! Training criteria run at a reduced scale by default. Set
//! `LGMSEP_FULL_ACCEPTANCE=1` for the full 2000-step, batch-128 protocol.

use std::io::Write;
use std::time::{Duration, Instant};

use nalgebra::{Complex, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use lgmsep::lgm::{em_iterate, mwf_posterior, GaussianPosterior, LgmConfig, ScmParams};
use lgmsep::linalg::{CMat, CVec, C64};
use lgmsep::loss::{gradcheck, kld_gaussian, loss_value, LossKind};
use lgmsep::mask::{MaskNetConfig, MaskNetParams};
use lgmsep::metrics::bss_eval;
use lgmsep::pipeline::{separate_dnn, separate_pcsg, PipelineConfig};
use lgmsep::signal::{istft, stft, MultichannelWave, Spectrogram};
use lgmsep::sim::{random_scene, MixtureScene, SceneConfig};
use lgmsep::train::{prepare_target, train, TargetRecord, TrainConfig, TrainOptions};
use lgmsep::wpe::{dereverberate, WpeConfig};

const ORACLE_REL_TOL: f64 = 1e-10;
const ORACLE_INSTANCES: usize = 500;
const ORACLE_TIME: Duration = Duration::from_secs(10);

const GRADCHECK_SEEDS: u64 = 20;
const GRADCHECK_TOL: f64 = 1e-4;
const GRADCHECK_TIME: Duration = Duration::from_secs(300);

const EM_SEEDS: u64 = 50;
const EM_ITERS: usize = 20;
const EM_MONO_REL: f64 = 1e-8;
const EM_TIME: Duration = Duration::from_secs(120);

const KLD_PAIRS: usize = 1000;
const KLD_NEG_TOL: f64 = 1e-9;
const KLD_SELF_TOL: f64 = 1e-9;
const PIT_CASES: u64 = 20;

const STFT_MIN_SNR_DB: f64 = 100.0;
const WPE_MIN_REDUCTION_DB: f64 = 20.0;
const IDENTITY_SCENES: u64 = 5;

const TREND_SCENES: u64 = 20;
const TREND_MIN_GAIN_DB: f64 = 3.0;
const TREND_TIME: Duration = Duration::from_secs(1800);

const TRAIN_UTTERANCES: u64 = 100;
const TRAIN_MIN_VAL_DROP: f64 = 0.20;
const TRAIN_MAX_SDR_GAP_DB: f64 = 1.0;
const TRAIN_REFINE: usize = 10;
const TRAIN_TIME: Duration = Duration::from_secs(7200);
const LOSS_ORDER_SLACK_DB: f64 = 0.5;

type Z = Complex<f64>;

/// Writes past the test harness's output capture, so the lines show up in a
/// plain `cargo test` run.
fn emit(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

fn report(n: usize, pass: bool, what: &str) -> bool {
    emit(&format!("criterion {n}: {} {what}", if pass { "PASS" } else { "FAIL" }));
    pass
}

fn cgauss(rng: &mut ChaCha8Rng) -> C64 {
    C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
}

fn random_psd(rng: &mut ChaCha8Rng, n: usize) -> CMat {
    let a = CMat::from_fn(n, |_, _| cgauss(rng));
    (&a * &a.adjoint()).add_diag(0.05)
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> CVec {
    CVec::from_slice(&(0..n).map(|_| cgauss(rng)).collect::<Vec<_>>())
}

fn to_na(m: &CMat) -> DMatrix<Z> {
    let n = m.dim();
    DMatrix::from_fn(n, n, |i, j| m[(i, j)])
}

fn vec_na(x: &CVec) -> DVector<Z> {
    DVector::from_iterator(x.dim(), x.as_slice().iter().copied())
}

fn rel_mat(a: &CMat, b: &DMatrix<Z>) -> f64 {
    (&to_na(a) - b).norm() / b.norm().max(1e-300)
}

fn rel_vec(a: &CVec, b: &DVector<Z>) -> f64 {
    (&vec_na(a) - b).norm() / b.norm().max(1e-300)
}

/// Observation covariance summed term by term from the raw parameter fields.
fn oracle_rx(p: &ScmParams, l: usize, k: usize) -> DMatrix<Z> {
    let mut rx = to_na(&p.rn[k]);
    for i in 0..p.n_sources {
        rx += to_na(p.r_at(i, k)) * Z::from(p.v_at(i, l, k));
        for d in 1..=p.reverb_taps.min(l) {
            rx += to_na(p.h_at(i, d, k)) * Z::from(p.v_at(i, l - d, k));
        }
    }
    rx
}

fn criterion_1() -> bool {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst_mwf, mut worst_kld) = (0.0f64, 0.0f64);
    for nm in [2, 3] {
        for _ in 0..ORACLE_INSTANCES {
            let (ns, nl, lr) = (2, 3, 2);
            let mut p = ScmParams::zeros(ns, nl, 1, nm, lr);
            p.v.iter_mut().for_each(|v| *v = rng.gen_range(0.1..2.0));
            p.r.iter_mut().for_each(|r| *r = random_psd(&mut rng, nm));
            p.h.iter_mut().for_each(|h| *h = random_psd(&mut rng, nm).scale(0.3));
            p.rn[0] = random_psd(&mut rng, nm).scale(0.1);
            let x = random_vec(&mut rng, nm);
            let (i, l) = (rng.gen_range(0..ns), rng.gen_range(0..nl));
            let (mu, cov) = mwf_posterior(&x, &p, i, l, 0).unwrap();

            let rx_inv = oracle_rx(&p, l, 0).try_inverse().unwrap();
            let sigma = to_na(p.r_at(i, 0)) * Z::from(p.v_at(i, l, 0));
            let w = &sigma * &rx_inv;
            let mu_o = &w * vec_na(&x);
            let cov_o = &sigma - &w * &sigma;
            worst_mwf = worst_mwf.max(rel_vec(&mu, &mu_o)).max(rel_mat(&cov, &cov_o));

            let (mp, vp) = (random_vec(&mut rng, nm), random_psd(&mut rng, nm));
            let (mq, vq) = (random_vec(&mut rng, nm), random_psd(&mut rng, nm));
            let got = kld_gaussian(&mp, &vp, &mq, &vq).unwrap();
            let want = oracle_kld(&mp, &vp, &mq, &vq);
            worst_kld = worst_kld.max((got - want).abs() / want.abs().max(1e-300));
        }
    }
    let el = t.elapsed();
    let pass = worst_mwf <= ORACLE_REL_TOL && worst_kld <= ORACLE_REL_TOL && el < ORACLE_TIME;
    report(
        1,
        pass,
        &format!(
            "oracle equivalence: mwf rel err {worst_mwf:.2e}, kld rel err {worst_kld:.2e} (tol {ORACLE_REL_TOL:.0e}), {:.2} s (limit {} s)",
            el.as_secs_f64(),
            ORACLE_TIME.as_secs()
        ),
    )
}

/// Complex Gaussian KL divergence through the eigendecomposition of `V_q`.
fn oracle_kld(mp: &CVec, vp: &CMat, mq: &CVec, vq: &CMat) -> f64 {
    let eq = to_na(vq).symmetric_eigen();
    let u = &eq.eigenvectors;
    let inv_diag = DMatrix::from_diagonal(&eq.eigenvalues.map(|e| Z::from(1.0 / e)));
    let vq_inv = u * inv_diag * u.adjoint();
    let d = vec_na(mq) - vec_na(mp);
    let logdet_q: f64 = eq.eigenvalues.iter().map(|e| e.ln()).sum();
    let logdet_p: f64 = to_na(vp).symmetric_eigen().eigenvalues.iter().map(|e| e.ln()).sum();
    let tr = (&vq_inv * to_na(vp)).trace().re;
    let quad = (d.adjoint() * &vq_inv * &d)[(0, 0)].re;
    tr + quad - mp.dim() as f64 + logdet_q - logdet_p
}

fn criterion_2() -> bool {
    let t = Instant::now();
    let cases: Vec<(u64, usize, LossKind)> = (0..GRADCHECK_SEEDS)
        .flat_map(|s| [1, 4, 8].into_iter().flat_map(move |lr| [LossKind::Kld, LossKind::L2].map(|k| (s, lr, k))))
        .collect();
    let worst = cases
        .par_iter()
        .map(|&(s, lr, k)| gradcheck(s, lr, k).unwrap().max_rel_err)
        .reduce(|| 0.0, f64::max);
    let el = t.elapsed();
    report(
        2,
        worst <= GRADCHECK_TOL && el < GRADCHECK_TIME,
        &format!(
            "gradient check: {} cases, max rel err {worst:.2e} (tol {GRADCHECK_TOL:.0e}), {:.1} s (limit {} s)",
            cases.len(),
            el.as_secs_f64(),
            GRADCHECK_TIME.as_secs()
        ),
    )
}

/// Two sources with on/off activity and fixed steering, plus white noise.
fn em_spec(seed: u64) -> Spectrogram {
    let (nm, nl, nk) = (2, 60, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let steer: Vec<Vec<CVec>> = (0..2)
        .map(|_| {
            (0..nk)
                .map(|_| CVec::from_slice(&(0..nm).map(|_| C64::from_polar(1.0, rng.gen_range(0.0..6.283))).collect::<Vec<_>>()))
                .collect()
        })
        .collect();
    let mut bins = vec![C64::new(0.0, 0.0); nm * nl * nk];
    for l in 0..nl {
        let gains: Vec<f64> = (0..2).map(|i| if (l / 7 + i) % 2 == 0 { 3.0 } else { 0.2 }).collect();
        for k in 0..nk {
            for (i, g) in gains.iter().enumerate() {
                let s = cgauss(&mut rng) * *g;
                for m in 0..nm {
                    bins[(m * nl + l) * nk + k] += steer[i][k][m] * s;
                }
            }
            for m in 0..nm {
                bins[(m * nl + l) * nk + k] += cgauss(&mut rng) * 0.05;
            }
        }
    }
    Spectrogram::from_bins(bins, nm, nl, nk, 16, 4).unwrap()
}

/// `Σ_{l,k} log N_c(x; 0, R_x)` from an explicit inverse and determinant.
fn oracle_loglik(spec: &Spectrogram, p: &ScmParams) -> f64 {
    let mut ll = 0.0;
    for l in 0..spec.n_frames() {
        for k in 0..spec.n_freqs() {
            let rx = oracle_rx(p, l, k);
            let x = vec_na(&spec.vector(l, k));
            let quad = (x.adjoint() * rx.clone().try_inverse().unwrap() * &x)[(0, 0)].re;
            ll -= spec.n_mics() as f64 * std::f64::consts::PI.ln() + rx.determinant().re.ln() + quad;
        }
    }
    ll
}

fn em_trace(spec: &Spectrogram, reverb_taps: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ScmParams::init(spec, 2, reverb_taps, &mut rng).unwrap();
    let mut trace = vec![oracle_loglik(spec, &p)];
    for _ in 0..EM_ITERS {
        p = em_iterate(spec, &p).unwrap();
        trace.push(oracle_loglik(spec, &p));
    }
    trace
}

fn criterion_3() -> bool {
    let t = Instant::now();
    let mut worst_drop = 0.0f64;
    let mut full_bad = 0;
    for seed in 0..EM_SEEDS {
        let spec = em_spec(seed);
        let sn = em_trace(&spec, 0, seed);
        for w in sn.windows(2) {
            worst_drop = worst_drop.max((w[0] - w[1]) / w[0].abs());
        }
        let full = em_trace(&spec, 2, seed);
        if full[EM_ITERS] < full[0] {
            full_bad += 1;
        }
    }
    let el = t.elapsed();
    report(
        3,
        worst_drop <= EM_MONO_REL && full_bad == 0 && el < EM_TIME,
        &format!(
            "EM monotonicity: worst relative drop {worst_drop:.2e} (tol {EM_MONO_REL:.0e}), full model final < initial on {full_bad}/{EM_SEEDS} seeds, {:.1} s (limit {} s)",
            el.as_secs_f64(),
            EM_TIME.as_secs()
        ),
    )
}

fn random_posterior(rng: &mut ChaCha8Rng, ns: usize, nl: usize, nk: usize, nm: usize) -> GaussianPosterior {
    let mut p = GaussianPosterior::zeros(ns, nl, nk, nm);
    for i in 0..ns {
        for l in 0..nl {
            for k in 0..nk {
                p.set(i, l, k, &random_vec(rng, nm), &random_psd(rng, nm));
            }
        }
    }
    p
}

fn relabeled(p: &GaussianPosterior, perm: &[usize]) -> GaussianPosterior {
    let mut out = GaussianPosterior::zeros(p.n_sources, p.n_frames, p.n_freqs, p.n_mics);
    for (i, &src) in perm.iter().enumerate() {
        for l in 0..p.n_frames {
            for k in 0..p.n_freqs {
                out.set(i, l, k, &p.mu(src, l, k), &p.cov(src, l, k));
            }
        }
    }
    out
}

fn criterion_4() -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut min_d, mut max_self) = (f64::INFINITY, 0.0f64);
    for n in 0..KLD_PAIRS {
        let nm = 2 + n % 2;
        let (mp, vp) = (random_vec(&mut rng, nm), random_psd(&mut rng, nm));
        let (mq, vq) = (random_vec(&mut rng, nm), random_psd(&mut rng, nm));
        min_d = min_d.min(kld_gaussian(&mp, &vp, &mq, &vq).unwrap());
        max_self = max_self.max(kld_gaussian(&mp, &vp, &mp, &vp).unwrap().abs());
    }

    let (nm, nl, nk, ns) = (2, 10, 5, 3);
    let perms = [[0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let mut mismatches = 0;
    for case in 0..PIT_CASES {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + case);
        let bins = (0..nm * nl * nk).map(|_| cgauss(&mut rng)).collect();
        let spec = Spectrogram::from_bins(bins, nm, nl, nk, 8, 2).unwrap();
        let target = random_posterior(&mut rng, ns, nl, nk, nm);
        let cfg = MaskNetConfig { hidden: vec![16], ..MaskNetConfig::new(nm, nk, ns, 1 + case as usize % 3) };
        let params = MaskNetParams::init(&cfg, case);
        for kind in [LossKind::Kld, LossKind::L2] {
            let base = loss_value(&spec, &target, &params, &cfg, kind).unwrap().total;
            for perm in &perms {
                let moved = loss_value(&spec, &relabeled(&target, perm), &params, &cfg, kind).unwrap().total;
                if moved.to_bits() != base.to_bits() {
                    mismatches += 1;
                }
            }
        }
    }
    report(
        4,
        min_d >= -KLD_NEG_TOL && max_self <= KLD_SELF_TOL && mismatches == 0,
        &format!(
            "KLD properties: min D {min_d:.3e} (tol -{KLD_NEG_TOL:.0e}), max |D(p,p)| {max_self:.2e} (tol {KLD_SELF_TOL:.0e}), PIT relabel mismatches {mismatches}/{}",
            PIT_CASES as usize * 2 * perms.len()
        ),
    )
}

fn snr_db(reference: &[f64], estimate: &[f64]) -> f64 {
    let sig: f64 = reference.iter().map(|x| x * x).sum();
    let err: f64 = reference.iter().zip(estimate).map(|(a, b)| (a - b) * (a - b)).sum();
    10.0 * (sig / err.max(1e-300)).log10()
}

fn criterion_5() -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let len = 8000;
    let chans: Vec<Vec<f64>> = (0..2).map(|_| (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let wave = MultichannelWave::new(chans, 8000).unwrap();
    let back = istft(&stft(&wave, 256, 64).unwrap()).unwrap();
    let (a, b) = (256, len - 256);
    let stft_snr = (0..2)
        .map(|m| snr_db(&wave.channel(m)[a..b], &back.channel(m)[a..b]))
        .fold(f64::INFINITY, f64::min);

    // x = s + 0.8 s_{l−2} on frame-independent complex Gaussian s
    let (nm, nl, nk) = (2, 3000, 3);
    let s: Vec<C64> = (0..nm * nl * nk).map(|_| cgauss(&mut rng)).collect();
    let x: Vec<C64> = (0..nm * nl * nk)
        .map(|n| {
            let l = (n / nk) % nl;
            if l >= 2 { s[n] + s[n - 2 * nk] * 0.8 } else { s[n] }
        })
        .collect();
    let xs = Spectrogram::from_bins(x.clone(), nm, nl, nk, 4, 1).unwrap();
    let y = dereverberate(&xs, WpeConfig { delay: 2, taps: 16, iterations: 3 }).unwrap();
    let before: f64 = x.iter().zip(&s).map(|(a, b)| (a - b).norm_sqr()).sum();
    let after: f64 = y.bins().iter().zip(&s).map(|(a, b)| (a - b).norm_sqr()).sum();
    let wpe_db = 10.0 * (before / after).log10();

    let cfg = SceneConfig { duration_s: 0.5, ..Default::default() };
    let mut inexact = 0;
    for seed in 0..IDENTITY_SCENES {
        let sc = random_scene(&cfg, 500 + seed).unwrap();
        for m in 0..sc.mixture.n_channels() {
            for t in 0..sc.mixture.len() {
                let mut v = 0.0;
                for img in &sc.images {
                    v += img.channel(m)[t];
                }
                if (v + sc.noise.channel(m)[t]).to_bits() != sc.mixture.channel(m)[t].to_bits() {
                    inexact += 1;
                }
            }
        }
    }
    report(
        5,
        stft_snr >= STFT_MIN_SNR_DB && wpe_db >= WPE_MIN_REDUCTION_DB && inexact == 0,
        &format!(
            "signal chain: STFT round trip {stft_snr:.1} dB (min {STFT_MIN_SNR_DB}), WPE tail reduction {wpe_db:.1} dB (min {WPE_MIN_REDUCTION_DB}), mixture identity mismatches {inexact}"
        ),
    )
}

fn channel0(waves: &[MultichannelWave], len: usize) -> Vec<Vec<f64>> {
    waves.iter().map(|w| w.channel(0)[..len].to_vec()).collect()
}

fn mean_sdr(estimates: &[MultichannelWave], scene: &MixtureScene) -> f64 {
    let len = scene.mixture.len();
    bss_eval(&channel0(estimates, len), &channel0(&scene.images, len)).unwrap().mean_sdr()
}

fn mixture_sdr(scene: &MixtureScene) -> f64 {
    let mix = vec![scene.mixture.clone(); scene.images.len()];
    mean_sdr(&mix, scene)
}

fn trend_scenes() -> SceneConfig {
    SceneConfig { rt60_choices: vec![0.36], ..Default::default() }
}

fn criterion_6() -> bool {
    let t = Instant::now();
    let cfg = PipelineConfig::default();
    let gains: Vec<(f64, f64)> = (0..TREND_SCENES)
        .into_par_iter()
        .map(|s| {
            let sc = random_scene(&trend_scenes(), 6000 + s).unwrap();
            let (sep, _) = separate_pcsg(&sc.mixture, &cfg).unwrap();
            (mixture_sdr(&sc), mean_sdr(&sep.images, &sc))
        })
        .collect();
    let n = gains.len() as f64;
    let mix = gains.iter().map(|g| g.0).sum::<f64>() / n;
    let sep = gains.iter().map(|g| g.1).sum::<f64>() / n;
    let el = t.elapsed();
    report(
        6,
        sep - mix >= TREND_MIN_GAIN_DB && el < TREND_TIME,
        &format!(
            "separation trend: mixture {mix:.2} dB, PCSG L_r=1 {sep:.2} dB, gain {:.2} dB (min {TREND_MIN_GAIN_DB}), {:.0} s",
            sep - mix,
            el.as_secs_f64()
        ),
    )
}

struct Scale {
    batch: usize,
    steps: usize,
    full: bool,
}

fn scale() -> Scale {
    if std::env::var("LGMSEP_FULL_ACCEPTANCE").is_ok_and(|v| v == "1") {
        Scale { batch: 128, steps: 2000, full: true }
    } else {
        Scale { batch: 8, steps: 300, full: false }
    }
}

struct Corpus {
    scenes: Vec<MixtureScene>,
    records: Vec<TargetRecord>,
    pipeline: PipelineConfig,
}

fn corpus(reverb_taps: usize) -> Corpus {
    let pipeline = PipelineConfig { lgm: LgmConfig { reverb_taps, ..Default::default() }, ..Default::default() };
    let scenes: Vec<MixtureScene> =
        (0..TRAIN_UTTERANCES).into_par_iter().map(|s| random_scene(&trend_scenes(), 7000 + s).unwrap()).collect();
    let records = scenes
        .par_iter()
        .enumerate()
        .map(|(n, sc)| prepare_target(&format!("utt{n:03}"), &sc.mixture, &pipeline).unwrap())
        .collect();
    Corpus { scenes, records, pipeline }
}

struct Trained {
    val_drop: f64,
    dnn_sdr: f64,
    pcsg_sdr: f64,
    mix_sdr: f64,
}

fn train_and_score(c: &Corpus, kind: LossKind, sc: &Scale) -> Trained {
    let cfg = TrainConfig {
        batch_size: sc.batch,
        steps: sc.steps,
        loss_kind: kind,
        reverb_taps: c.pipeline.lgm.reverb_taps,
        val_every: (sc.steps / 4).max(1),
        checkpoint_every: sc.steps.max(1),
        ..Default::default()
    };
    let out = train(&cfg, &c.records, TrainOptions::default()).unwrap();
    let curve = out.val_curve();
    let val_drop = 1.0 - curve.last().unwrap().1 / curve[0].1;
    let ck = &out.checkpoint;
    let scores: Vec<(f64, f64, f64)> = out
        .val_utterances
        .par_iter()
        .map(|&u| {
            let scene = &c.scenes[u];
            let dnn = separate_dnn(&scene.mixture, &c.pipeline, &ck.params, &ck.net, TRAIN_REFINE).unwrap();
            let (pcsg, _) = separate_pcsg(&scene.mixture, &c.pipeline).unwrap();
            (mean_sdr(&dnn.images, scene), mean_sdr(&pcsg.images, scene), mixture_sdr(scene))
        })
        .collect();
    let n = scores.len() as f64;
    Trained {
        val_drop,
        dnn_sdr: scores.iter().map(|s| s.0).sum::<f64>() / n,
        pcsg_sdr: scores.iter().map(|s| s.1).sum::<f64>() / n,
        mix_sdr: scores.iter().map(|s| s.2).sum::<f64>() / n,
    }
}

fn scale_note(sc: &Scale) -> String {
    let tag = if sc.full { "full" } else { "reduced" };
    format!("{tag} scale: {} utterances, batch {}, {} steps", TRAIN_UTTERANCES, sc.batch, sc.steps)
}

fn criterion_7(sc: &Scale) -> bool {
    let t = Instant::now();
    let c = corpus(1);
    let r = train_and_score(&c, LossKind::Kld, sc);
    let el = t.elapsed();
    report(
        7,
        r.val_drop >= TRAIN_MIN_VAL_DROP && r.dnn_sdr >= r.pcsg_sdr - TRAIN_MAX_SDR_GAP_DB && el < TRAIN_TIME,
        &format!(
            "training efficacy ({}): val PIT-KLD drop {:.1}% (min {:.0}%), held-out SDR DNN+{TRAIN_REFINE} EM {:.2} dB vs PCSG {:.2} dB (max gap {TRAIN_MAX_SDR_GAP_DB} dB), mixture {:.2} dB, {:.0} s",
            scale_note(sc),
            100.0 * r.val_drop,
            100.0 * TRAIN_MIN_VAL_DROP,
            r.dnn_sdr,
            r.pcsg_sdr,
            r.mix_sdr,
            el.as_secs_f64()
        ),
    )
}

fn criterion_8(sc: &Scale) -> bool {
    let t = Instant::now();
    let c = corpus(8);
    let kld = train_and_score(&c, LossKind::Kld, sc);
    let l2 = train_and_score(&c, LossKind::L2, sc);
    report(
        8,
        kld.dnn_sdr >= l2.dnn_sdr - LOSS_ORDER_SLACK_DB,
        &format!(
            "loss ordering at L_r=8 ({}): KLD {:.2} dB vs l2 {:.2} dB (slack {LOSS_ORDER_SLACK_DB} dB), PCSG {:.2} dB, {:.0} s",
            scale_note(sc),
            kld.dnn_sdr,
            l2.dnn_sdr,
            kld.pcsg_sdr,
            t.elapsed().as_secs_f64()
        ),
    )
}

#[test]
fn acceptance() {
    let sc = scale();
    let exact = [criterion_1(), criterion_2(), criterion_3(), criterion_4()];
    let trends = [criterion_5(), criterion_6(), criterion_7(&sc), criterion_8(&sc)];
    let passed = exact.iter().chain(&trends).filter(|p| **p).count();
    emit(&format!("acceptance: {passed}/8 criteria pass"));
    assert!(exact.iter().all(|p| *p), "a correctness criterion failed");
}
