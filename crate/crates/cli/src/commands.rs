use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::json;

use lgmsep::lgm::LgmConfig;
use lgmsep::loss::gradcheck;
use lgmsep::metrics::{evaluate_utterance, MetricReport, ScoringJob, UtteranceMetrics};
use lgmsep::pipeline::{put_scm_params, separate_dnn, separate_pcsg, PipelineConfig, Separation};
use lgmsep::signal::{read_wav, write_wav, MultichannelWave, WavFormat};
use lgmsep::sim::{random_scene, read_scene_dir, write_scene_dir, SceneConfig};
use lgmsep::train::{load_targets, prepare_targets, train, Checkpoint, Container, TrainOptions};
use lgmsep::wpe::WpeConfig;

use crate::args::*;
use crate::CliError;

type Res<T = ()> = Result<T, CliError>;

/// Creates `dir`, refusing to write into a non-empty one unless `force`.
fn fresh_dir(dir: &Path, force: bool) -> Res {
    if dir.is_dir() && std::fs::read_dir(dir)?.next().is_some() && !force {
        return Err(CliError::Usage(format!("{} is not empty; pass --force to overwrite", dir.display())));
    }
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn write_resolved(path: &Path, echo: &str) -> Res {
    std::fs::write(path, echo)?;
    Ok(())
}

fn mixture_path(input: &Path) -> PathBuf {
    if input.is_dir() {
        input.join("mixture.wav")
    } else {
        input.to_path_buf()
    }
}

/// First channel of every reference image of a scene directory.
fn scene_references(dir: &Path) -> Res<Vec<Vec<f64>>> {
    Ok(read_scene_dir(dir)?.images.into_iter().map(|w| w.channel(0).to_vec()).collect())
}

fn score(name: &str, sep: &Separation, refs: Vec<Vec<f64>>, sr: u32) -> Res<UtteranceMetrics> {
    let est: Vec<Vec<f64>> = sep.images.iter().map(|w| w.channel(0).to_vec()).collect();
    let n = refs.iter().chain(&est).map(Vec::len).min().unwrap_or(0);
    let trim = |v: Vec<Vec<f64>>| v.into_iter().map(|mut x| {
        x.truncate(n);
        x
    });
    let (est, refs): (Vec<_>, Vec<_>) = (trim(est).collect(), trim(refs).collect());
    Ok(evaluate_utterance(name, &est, &refs, sr)?)
}

fn write_images(out: &Path, images: &[MultichannelWave]) -> Res {
    for (i, img) in images.iter().enumerate() {
        write_wav(out.join(format!("source_{i}.wav")), img, WavFormat::Float32)?;
    }
    Ok(())
}

fn name_of(path: &Path) -> String {
    let p = if path.file_name().is_some_and(|f| f == "mixture.wav") { path.parent().unwrap_or(path) } else { path };
    p.file_stem().and_then(|s| s.to_str()).unwrap_or("utterance").to_string()
}

pub fn simulate(a: &SimulateArgs, echo: &str) -> Res {
    if a.rt60.is_empty() || a.rt60.iter().any(|&t| !(t > 0.0)) {
        return Err(CliError::Usage("--rt60 needs positive values".into()));
    }
    if a.sir.len() != 2 || a.snr.len() != 2 {
        return Err(CliError::Usage("--sir and --snr take two values: lo,hi".into()));
    }
    fresh_dir(&a.out, a.force)?;
    let cfg = SceneConfig {
        n_mics: a.mics,
        n_sources: a.sources,
        sample_rate: a.sample_rate,
        duration_s: a.duration,
        rt60_choices: a.rt60.clone(),
        sir_range_db: (a.sir[0], a.sir[1]),
        snr_range_db: (a.snr[0], a.snr[1]),
        mic_spacing: a.spacing,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let seeds: Vec<u64> = (0..a.num).map(|_| rng.next_u64()).collect();
    seeds.par_iter().enumerate().try_for_each(|(i, &s)| -> Res {
        let scene = random_scene(&cfg, s)?;
        write_scene_dir(a.out.join(format!("scene_{i:04}")), &scene)?;
        Ok(())
    })?;
    write_resolved(&a.out.join("resolved.conf"), echo)?;
    info!("wrote {} scenes to {}", a.num, a.out.display());
    Ok(())
}

pub fn separate(a: &SeparateArgs, echo: &str) -> Res {
    let cfg = a.pipeline.to_config();
    let path = mixture_path(&a.input);
    let wave = read_wav(&path)?;
    std::fs::create_dir_all(&a.out)?;
    let t0 = Instant::now();
    let (sep, params) = separate_pcsg(&wave, &cfg)?;
    let elapsed = t0.elapsed().as_secs_f64();
    write_images(&a.out, &sep.images)?;

    let mut c = Container::new("scm", serde_json::Value::Null);
    let dims = put_scm_params(&mut c, "theta", &params);
    c.config = json!({ "pipeline": cfg, "theta": dims });
    c.save(a.out.join("params.lgms"))?;

    let name = name_of(&path);
    let metrics = match &a.eval {
        Some(dir) => Some(score(&name, &sep, scene_references(dir)?, wave.sample_rate())?),
        None => None,
    };
    let report = json!({
        "input": path,
        "n_frames": sep.spec.n_frames(),
        "n_sources": sep.images.len(),
        "seconds": elapsed,
        "metrics": metrics,
    });
    std::fs::write(a.out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    write_resolved(&a.out.join("resolved.conf"), echo)?;
    if let Some(m) = metrics {
        print!("{}", MetricReport { utterances: vec![m] }.to_table());
    }
    info!("separated {} in {elapsed:.2} s", path.display());
    Ok(())
}

pub fn prepare(a: &PrepareArgs, echo: &str) -> Res {
    let cfg = a.pipeline.to_config();
    let written = prepare_targets(&a.dataset, &a.out, &cfg)?;
    write_resolved(&a.out.join("resolved.conf"), echo)?;
    println!("prepared {} targets in {}", written.len(), a.out.display());
    Ok(())
}

pub fn train_cmd(a: &TrainArgs, echo: &str) -> Res {
    let cfg = a.to_config();
    cfg.validate()?;
    let records = load_targets(&a.targets)?;
    let resume = a.resume.as_ref().map(Checkpoint::load).transpose()?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    let mut conf = a.out.clone().into_os_string();
    conf.push(".conf");
    write_resolved(Path::new(&conf), echo)?;

    let stdout = std::io::stdout();
    let mut sink: Box<dyn Write> = match &a.log {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(stdout.lock()),
    };
    let outcome = train(&cfg, &records, TrainOptions { checkpoint: Some(a.out.clone()), log: Some(&mut *sink), resume })?;
    sink.flush()?;
    let curve = outcome.val_curve();
    if let (Some(first), Some(last)) = (curve.first(), curve.last()) {
        info!("validation loss {:.4} at step {} -> {:.4} at step {}", first.1, first.0, last.1, last.0);
    }
    info!("checkpoint written to {}", a.out.display());
    Ok(())
}

pub fn infer(a: &InferArgs, echo: &str) -> Res {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let cfg = PipelineConfig {
        wpe: WpeConfig { delay: a.wpe_delay, taps: a.wpe_taps, iterations: a.wpe_iters },
        lgm: LgmConfig { n_sources: ck.net.n_sources, reverb_taps: ck.net.reverb_taps, ..Default::default() },
        ..Default::default()
    };
    let path = mixture_path(&a.input);
    let wave = read_wav(&path)?;
    std::fs::create_dir_all(&a.out)?;
    let t0 = Instant::now();
    let sep = separate_dnn(&wave, &cfg, &ck.params, &ck.net, a.refine)?;
    let elapsed = t0.elapsed().as_secs_f64();
    write_images(&a.out, &sep.images)?;
    let name = name_of(&path);
    let metrics = match &a.eval {
        Some(dir) => Some(score(&name, &sep, scene_references(dir)?, wave.sample_rate())?),
        None => None,
    };
    let report = json!({
        "input": path,
        "checkpoint": a.checkpoint,
        "step": ck.step,
        "refine": a.refine,
        "seconds": elapsed,
        "metrics": metrics,
    });
    std::fs::write(a.out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    write_resolved(&a.out.join("resolved.conf"), echo)?;
    if let Some(m) = metrics {
        print!("{}", MetricReport { utterances: vec![m] }.to_table());
    }
    Ok(())
}

/// `source_<i>*.wav` files of a directory in source order, or None when there are none.
fn source_files(dir: &Path) -> Res<Option<Vec<PathBuf>>> {
    let mut found = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let p = entry?.path();
        if !p.is_file() || !p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")) {
            continue;
        }
        let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("");
        let Some(rest) = stem.strip_prefix("source_") else { continue };
        let digits: String = rest.chars().take_while(char::is_ascii_digit).collect();
        let tail = &rest[digits.len()..];
        if digits.is_empty() || !(tail.is_empty() || tail.starts_with('_')) {
            continue;
        }
        found.push((digits.parse::<usize>().map_err(|e| CliError::Usage(e.to_string()))?, p));
    }
    if found.is_empty() {
        return Ok(None);
    }
    found.sort();
    if found.iter().enumerate().any(|(i, (k, _))| *k != i) {
        return Err(CliError::Usage(format!("{}: source files are not numbered 0..N", dir.display())));
    }
    Ok(Some(found.into_iter().map(|x| x.1).collect()))
}

fn first_channels(files: &[PathBuf]) -> Res<(Vec<Vec<f64>>, u32)> {
    let mut sr = 0;
    let mut out = Vec::new();
    for f in files {
        let w = read_wav(f)?;
        sr = w.sample_rate();
        out.push(w.channel(0).to_vec());
    }
    Ok((out, sr))
}

pub fn evaluate(a: &EvaluateArgs) -> Res {
    let mut pairs: Vec<(String, PathBuf, PathBuf)> = Vec::new();
    if source_files(&a.est)?.is_some() {
        pairs.push((name_of(&a.est), a.est.clone(), a.reference.clone()));
    } else {
        let mut subs: Vec<PathBuf> =
            std::fs::read_dir(&a.est)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect();
        subs.sort();
        for s in subs {
            let name = s.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
            pairs.push((name.clone(), s, a.reference.join(&name)));
        }
    }
    let mut jobs: Vec<ScoringJob> = Vec::new();
    let mut sr = 0;
    for (name, est_dir, ref_dir) in pairs {
        let Some(est) = source_files(&est_dir)? else { continue };
        let refs = source_files(&ref_dir)?
            .ok_or_else(|| CliError::Usage(format!("no references for {name} in {}", ref_dir.display())))?;
        if est.len() != refs.len() {
            return Err(CliError::Usage(format!("{name}: {} estimates but {} references", est.len(), refs.len())));
        }
        let (mut e, _) = first_channels(&est)?;
        let (mut r, rate) = first_channels(&refs)?;
        sr = rate;
        let n = e.iter().chain(&r).map(Vec::len).min().unwrap_or(0);
        e.iter_mut().chain(r.iter_mut()).for_each(|x| x.truncate(n));
        jobs.push((name, e, r));
    }
    if jobs.is_empty() {
        return Err(lgmsep::Error::EmptyDataset(format!("no source_<i> files under {}", a.est.display())).into());
    }
    let report = MetricReport::evaluate_all(&jobs, sr)?;
    let text = match a.format {
        FormatArg::Table => report.to_table(),
        FormatArg::Csv => report.to_csv(),
        FormatArg::Json => report.to_json_lines()?,
    };
    match &a.out {
        Some(p) => std::fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

pub fn gradcheck_cmd(a: &GradcheckArgs) -> Res {
    let mut worst: f64 = 0.0;
    for seed in a.seed..a.seed + a.seeds {
        for &lr in &a.lr {
            for &kind in &a.loss {
                let r = gradcheck(seed, lr, kind.into())?;
                println!(
                    "loss={} lr={lr} seed={seed} params={} max_rel_err={:.3e}",
                    serde_json::to_value(kind)?.as_str().unwrap_or(""),
                    r.n_params,
                    r.max_rel_err
                );
                worst = worst.max(r.max_rel_err);
            }
        }
    }
    println!("max_rel_err={worst:.3e}");
    if !(worst <= a.tol) {
        return Err(CliError::Numeric(format!("gradient error {worst:.3e} exceeds {:.1e}", a.tol)));
    }
    Ok(())
}
