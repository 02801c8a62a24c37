//! Unsupervised training: PCSG posteriors are the targets, the mask network
//! is fitted to them with Adam on the PIT loss over fixed-length segments.

mod container;
mod targets;

use std::io::Write;
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{loss_and_grad, loss_value, LossKind};
use crate::mask::{Activation, MaskNetConfig, MaskNetParams};

pub use container::{CheckpointMeta, Container, ManifestEntry, NamedArray, RngState, MAGIC, VERSION};
pub use targets::{list_mixtures, load_targets, prepare_target, prepare_targets, TargetRecord, TARGET_EXT};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
/// Stream of the utterance split; epochs use streams `1, 2, …`.
const SPLIT_STREAM: u64 = u64::MAX;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Frames per training segment; shorter utterance tails are dropped.
    pub segment_len: usize,
    pub steps: usize,
    pub learning_rate: f64,
    /// Global gradient norm threshold.
    pub clip_norm: f64,
    pub loss_kind: LossKind,
    pub reverb_taps: usize,
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub context: usize,
    pub activation: Activation,
    /// Share of utterances held out for validation.
    pub val_fraction: f64,
    /// Validation loss is evaluated every this many steps and after the last.
    pub val_every: usize,
    /// Checkpoint interval in steps; the final state is always saved.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            segment_len: 100,
            steps: 2000,
            learning_rate: 1e-3,
            clip_norm: 5.0,
            loss_kind: LossKind::Kld,
            reverb_taps: 1,
            seed: 0,
            hidden: vec![256, 256],
            context: 2,
            activation: Activation::Tanh,
            val_fraction: 0.1,
            val_every: 100,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(m.to_string()));
        if self.batch_size == 0 || self.segment_len == 0 || self.val_every == 0 || self.checkpoint_every == 0 {
            return bad("batch_size, segment_len, val_every and checkpoint_every must be positive");
        }
        if self.segment_len < self.reverb_taps + 1 {
            return bad("segment_len must be at least reverb_taps + 1");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction must lie in [0, 1)");
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden layer sizes must be positive");
        }
        Ok(())
    }

    /// Network shape for data with the given dimensions.
    pub fn net_config(&self, n_mics: usize, n_freqs: usize, n_sources: usize) -> MaskNetConfig {
        MaskNetConfig {
            hidden: self.hidden.clone(),
            context: self.context,
            activation: self.activation,
            ..MaskNetConfig::new(n_mics, n_freqs, n_sources, self.reverb_taps)
        }
    }
}

/// First moment, second moment and update count.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub m: MaskNetParams,
    pub v: MaskNetParams,
    pub t: u64,
}

impl Adam {
    pub fn new(cfg: &MaskNetConfig) -> Self {
        Self { m: MaskNetParams::zeros(cfg), v: MaskNetParams::zeros(cfg), t: 0 }
    }

    pub fn update(&mut self, params: &mut MaskNetParams, grad: &MaskNetParams, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        let grads: Vec<&[f64]> = grad.named().into_iter().map(|(_, _, a)| a).collect();
        let layers = params.slices_mut().into_iter().zip(self.m.slices_mut()).zip(self.v.slices_mut()).zip(grads);
        for (((p, m), v), g) in layers {
            for n in 0..p.len() {
                m[n] = ADAM_BETA1 * m[n] + (1.0 - ADAM_BETA1) * g[n];
                v[n] = ADAM_BETA2 * v[n] + (1.0 - ADAM_BETA2) * g[n] * g[n];
                p[n] -= lr * (m[n] / c1) / ((v[n] / c2).sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Scales `grad` so its global norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_global_norm(grad: &mut MaskNetParams, max_norm: f64) -> f64 {
    let norm = grad.norm();
    if norm > max_norm {
        grad.scale(max_norm / norm);
    }
    norm
}

/// A window of frames from one utterance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub utterance: usize,
    pub start: usize,
}

/// Non-overlapping windows of `len` frames, utterance by utterance.
pub fn segments(records: &[TargetRecord], utterances: &[usize], len: usize) -> Vec<Segment> {
    utterances
        .iter()
        .flat_map(|&u| {
            let n = records[u].spec.n_frames() / len;
            (0..n).map(move |s| Segment { utterance: u, start: s * len })
        })
        .collect()
}

/// Training and validation utterance indices, each sorted.
pub fn split_utterances(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let n_val = if n < 2 || val_fraction <= 0.0 { 0 } else { ((n as f64 * val_fraction).round() as usize).clamp(1, n - 1) };
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SPLIT_STREAM);
    order.shuffle(&mut rng);
    let mut val = order[..n_val].to_vec();
    let mut train = order[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

fn epoch_rng(seed: u64, epoch: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch + 1);
    rng
}

fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut epoch_rng(seed, epoch));
    order
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    /// Mean batch loss per bin before the update; absent on the initial line.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub loss: Option<f64>,
    /// Gradient norm before clipping.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub grad_norm: Option<f64>,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_loss: Option<f64>,
}

/// Everything needed to continue or reuse a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub train: TrainConfig,
    pub net: MaskNetConfig,
    pub step: u64,
    /// Epoch of the next segment draw; its shuffle comes from stream `epoch + 1`.
    pub epoch: u64,
    pub params: MaskNetParams,
    pub adam: Adam,
}

#[derive(Serialize, Deserialize)]
struct CheckpointConfig {
    train: TrainConfig,
    net: MaskNetConfig,
}

impl Checkpoint {
    pub fn to_container(&self) -> Result<Container> {
        let cfg = CheckpointConfig { train: self.train.clone(), net: self.net.clone() };
        let mut c = Container::new("checkpoint", serde_json::to_value(cfg)?);
        c.step = self.step;
        c.rng = Some(RngState { seed: self.train.seed, stream: self.epoch + 1, word_pos: "0".into() });
        for (prefix, p) in [("", &self.params), ("adam.m.", &self.adam.m), ("adam.v.", &self.adam.v)] {
            for (name, shape, data) in p.named() {
                c.push(format!("{prefix}{name}"), shape, data.to_vec());
            }
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind != "checkpoint" {
            return Err(Error::Checkpoint(format!("expected a checkpoint, found {:?}", c.kind)));
        }
        let cfg: CheckpointConfig = serde_json::from_value(c.config.clone())?;
        let load = |prefix: &str| -> Result<MaskNetParams> {
            let names: Vec<(String, Vec<usize>, Vec<f64>)> = MaskNetParams::zeros(&cfg.net)
                .named()
                .into_iter()
                .map(|(n, s, _)| {
                    let a = c.take(&format!("{prefix}{n}"), &s)?;
                    Ok((n, s, a.to_vec()))
                })
                .collect::<Result<_>>()?;
            MaskNetParams::from_named(&cfg.net, &names)
        };
        let params = load("")?;
        if !params.is_finite() {
            return Err(Error::non_finite("checkpoint parameters"));
        }
        let adam = Adam { m: load("adam.m.")?, v: load("adam.v.")?, t: c.step };
        let epoch = c.rng.as_ref().map_or(0, |r| r.stream.saturating_sub(1));
        Ok(Self { train: cfg.train, net: cfg.net, step: c.step, epoch, params, adam })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

/// Where to write while training, and an optional state to resume from.
#[derive(Default)]
pub struct TrainOptions<'a> {
    pub checkpoint: Option<PathBuf>,
    pub log: Option<&'a mut dyn Write>,
    pub resume: Option<Checkpoint>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<LogRecord>,
    pub train_utterances: Vec<usize>,
    pub val_utterances: Vec<usize>,
}

impl TrainOutcome {
    /// `(step, validation loss)` pairs, including the initial evaluation.
    pub fn val_curve(&self) -> Vec<(usize, f64)> {
        self.history.iter().filter_map(|r| r.val_loss.map(|v| (r.step, v))).collect()
    }
}

fn data_dims(records: &[TargetRecord]) -> Result<(usize, usize, usize)> {
    let first = records.first().ok_or_else(|| Error::EmptyDataset("no target records".into()))?;
    let dims = (first.spec.n_mics(), first.spec.n_freqs(), first.posterior.n_sources);
    for r in records {
        if (r.spec.n_mics(), r.spec.n_freqs(), r.posterior.n_sources) != dims
            || r.posterior.n_frames != r.spec.n_frames()
            || r.posterior.n_mics != r.spec.n_mics()
        {
            return Err(Error::shape(format!("target {:?} does not match the other records", r.name)));
        }
    }
    Ok(dims)
}

fn segment_loss_and_grad(
    records: &[TargetRecord],
    seg: Segment,
    len: usize,
    params: &MaskNetParams,
    net: &MaskNetConfig,
    kind: LossKind,
) -> Result<(f64, MaskNetParams)> {
    let r = &records[seg.utterance];
    let spec = r.spec.slice_frames(seg.start, len);
    let target = r.posterior.slice_frames(seg.start, len);
    let (b, g) = loss_and_grad(&spec, &target, params, net, kind)?;
    Ok((b.total, g.params))
}

/// Mean per-bin loss over `segs`, or `None` without segments.
pub fn mean_segment_loss(
    records: &[TargetRecord],
    segs: &[Segment],
    len: usize,
    params: &MaskNetParams,
    net: &MaskNetConfig,
    kind: LossKind,
) -> Result<Option<f64>> {
    if segs.is_empty() {
        return Ok(None);
    }
    let per: Vec<f64> = segs
        .par_iter()
        .map(|s| {
            let r = &records[s.utterance];
            let spec = r.spec.slice_frames(s.start, len);
            loss_value(&spec, &r.posterior.slice_frames(s.start, len), params, net, kind).map(|b| b.total)
        })
        .collect::<Result<_>>()?;
    let bins = (len * net.n_freqs) as f64;
    let mean = per.iter().sum::<f64>() / (per.len() as f64 * bins);
    if !mean.is_finite() {
        return Err(Error::non_finite("validation loss"));
    }
    Ok(Some(mean))
}

fn emit(log: &mut Option<&mut dyn Write>, rec: &LogRecord) -> Result<()> {
    if let Some(w) = log.as_mut() {
        serde_json::to_writer(&mut **w, rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Trains the mask network on prepared targets.
///
/// Each step draws `batch_size` segments (or all of them, if fewer) from an
/// epoch-wise shuffle of the training segments, sums `loss_and_grad` over
/// them, divides by segments times bins, clips the global norm and applies
/// Adam. Batch members are evaluated in parallel but reduced in a fixed
/// order, so results do not depend on the thread count.
///
/// A non-finite loss or update aborts with an error; the last checkpoint on
/// disk is left untouched.
pub fn train(cfg: &TrainConfig, records: &[TargetRecord], opts: TrainOptions<'_>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (nm, nk, ns) = data_dims(records)?;
    let net = cfg.net_config(nm, nk, ns);
    net.validate()?;
    let TrainOptions { checkpoint: ck_path, mut log, resume } = opts;

    let (train_utts, val_utts) = split_utterances(records.len(), cfg.val_fraction, cfg.seed);
    let train_segs = segments(records, &train_utts, cfg.segment_len);
    let val_segs = segments(records, &val_utts, cfg.segment_len);
    if train_segs.is_empty() {
        return Err(Error::EmptyDataset(format!("no training utterance has {} frames", cfg.segment_len)));
    }
    info!("{} training segments, {} validation segments", train_segs.len(), val_segs.len());

    let mut state = match resume {
        Some(ck) => {
            if ck.net != net {
                return Err(Error::Checkpoint("checkpoint network does not match the configuration".into()));
            }
            Checkpoint { train: cfg.clone(), ..ck }
        }
        None => {
            let params = MaskNetParams::init(&net, cfg.seed);
            Checkpoint { train: cfg.clone(), net: net.clone(), step: 0, epoch: 0, params, adam: Adam::new(&net) }
        }
    };
    let save = |state: &Checkpoint| -> Result<()> {
        match &ck_path {
            Some(p) => state.save(p),
            None => Ok(()),
        }
    };

    let mut history = Vec::new();
    let start = state.step as usize;
    let val0 = mean_segment_loss(records, &val_segs, cfg.segment_len, &state.params, &net, cfg.loss_kind)?;
    let first = LogRecord { step: start, loss: None, grad_norm: None, lr: cfg.learning_rate, val_loss: val0 };
    emit(&mut log, &first)?;
    history.push(first);

    let n = train_segs.len();
    let batch = cfg.batch_size.min(n);
    let norm = 1.0 / (batch * cfg.segment_len * nk) as f64;
    let mut cached: Option<(u64, Vec<usize>)> = None;
    for step in start + 1..=cfg.steps {
        let picks: Vec<Segment> = (0..batch)
            .map(|b| {
                let pos = (step - 1) * batch + b;
                let epoch = (pos / n) as u64;
                if cached.as_ref().map(|c| c.0) != Some(epoch) {
                    cached = Some((epoch, epoch_order(cfg.seed, epoch, n)));
                }
                train_segs[cached.as_ref().expect("filled above").1[pos % n]]
            })
            .collect();
        let results: Vec<(f64, MaskNetParams)> = picks
            .par_iter()
            .map(|&s| segment_loss_and_grad(records, s, cfg.segment_len, &state.params, &net, cfg.loss_kind))
            .collect::<Result<_>>()?;
        let mut grad = MaskNetParams::zeros(&net);
        let mut loss = 0.0;
        for (l, g) in &results {
            loss += l;
            for (dst, (_, _, src)) in grad.slices_mut().into_iter().zip(g.named()) {
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
            }
        }
        loss *= norm;
        grad.scale(norm);
        if !loss.is_finite() || !grad.is_finite() {
            return Err(Error::non_finite(format!("training step {step}")));
        }
        let grad_norm = clip_global_norm(&mut grad, cfg.clip_norm);
        state.adam.update(&mut state.params, &grad, cfg.learning_rate);
        if !state.params.is_finite() {
            return Err(Error::non_finite(format!("parameters after step {step}")));
        }
        state.step = step as u64;
        state.epoch = (step * batch / n) as u64;

        let val_loss = if step % cfg.val_every == 0 || step == cfg.steps {
            mean_segment_loss(records, &val_segs, cfg.segment_len, &state.params, &net, cfg.loss_kind)?
        } else {
            None
        };
        let rec = LogRecord { step, loss: Some(loss), grad_norm: Some(grad_norm), lr: cfg.learning_rate, val_loss };
        emit(&mut log, &rec)?;
        history.push(rec);
        if step % cfg.checkpoint_every == 0 && step != cfg.steps {
            save(&state)?;
        }
    }
    save(&state)?;
    Ok(TrainOutcome { checkpoint: state, history, train_utterances: train_utts, val_utterances: val_utts })
}
