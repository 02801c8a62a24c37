use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use lgmsep::lgm::{LgmConfig, LgmInit};
use lgmsep::loss::LossKind;
use lgmsep::mask::Activation;
use lgmsep::pipeline::PipelineConfig;
use lgmsep::train::TrainConfig;
use lgmsep::wpe::WpeConfig;

#[derive(Parser, Debug)]
#[command(name = "lgmsep", version, about = "Unsupervised multichannel speech separation")]
#[command(args_override_self = true)]
pub struct Cli {
    /// Worker threads; 1 gives bit-exact reruns.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Flat key=value file merged under the command-line flags.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(untagged)]
pub enum Command {
    /// Generate synthetic reverberant mixtures with their source images.
    Simulate(SimulateArgs),
    /// Separate one mixture with the pseudo-clean signal generator.
    Separate(SeparateArgs),
    /// Compute training targets for a dataset of mixtures.
    Prepare(PrepareArgs),
    /// Train the mask network against prepared targets.
    Train(TrainArgs),
    /// Separate one mixture with a trained network and EM refinement.
    Infer(InferArgs),
    /// Score estimated source images against references.
    Evaluate(EvaluateArgs),
    /// Compare analytic loss gradients with finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum InitArg {
    Spatial,
    Random,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LossArg {
    Kld,
    L2,
}

impl From<LossArg> for LossKind {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::Kld => LossKind::Kld,
            LossArg::L2 => LossKind::L2,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationArg {
    Tanh,
    Relu,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum FormatArg {
    Table,
    Csv,
    Json,
}

/// STFT, WPE and LGM settings.
#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct PipelineArgs {
    /// Number of speech sources N_s.
    #[arg(long, default_value_t = 2)]
    pub sources: usize,
    /// Residual reverberation taps L_r.
    #[arg(long, default_value_t = 1)]
    pub lr: usize,
    /// EM iterations of the pseudo-clean signal generator.
    #[arg(long, default_value_t = 20)]
    pub em_iters: usize,
    /// SCM initialization and matching permutation solver.
    #[arg(long, value_enum, default_value_t = InitArg::Spatial)]
    pub init: InitArg,
    /// Centroid sweeps of the envelope permutation solver (random init only).
    #[arg(long, default_value_t = 2)]
    pub perm_refine: usize,
    /// WPE prediction delay D.
    #[arg(long, default_value_t = 2)]
    pub wpe_delay: usize,
    /// WPE filter length L_d.
    #[arg(long, default_value_t = 16)]
    pub wpe_taps: usize,
    #[arg(long, default_value_t = 3)]
    pub wpe_iters: usize,
    #[arg(long, default_value_t = 256)]
    pub frame_size: usize,
    #[arg(long, default_value_t = 64)]
    pub hop: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl PipelineArgs {
    pub fn to_config(&self) -> PipelineConfig {
        PipelineConfig {
            frame_size: self.frame_size,
            hop: self.hop,
            wpe: WpeConfig { delay: self.wpe_delay, taps: self.wpe_taps, iterations: self.wpe_iters },
            lgm: LgmConfig {
                n_sources: self.sources,
                reverb_taps: self.lr,
                n_em: self.em_iters,
                perm_refine: self.perm_refine,
                init: match self.init {
                    InitArg::Spatial => LgmInit::Spatial,
                    InitArg::Random => LgmInit::Random,
                },
                seed: self.seed,
            },
        }
    }
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct SimulateArgs {
    /// Output directory; one subdirectory per scene.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub num: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// RT60 values in seconds to draw from.
    #[arg(long, value_delimiter = ',', default_values_t = [0.36, 0.61])]
    pub rt60: Vec<f64>,
    #[arg(long, default_value_t = 2.0)]
    pub duration: f64,
    #[arg(long, default_value_t = 2)]
    pub mics: usize,
    #[arg(long, default_value_t = 2)]
    pub sources: usize,
    /// Interferer level range relative to source 0, dB (lo,hi).
    #[arg(long, value_delimiter = ',', default_values_t = [-5.0, 5.0], allow_negative_numbers = true)]
    pub sir: Vec<f64>,
    /// Noise level range below the summed images, dB (lo,hi).
    #[arg(long, value_delimiter = ',', default_values_t = [20.0, 30.0], allow_negative_numbers = true)]
    pub snr: Vec<f64>,
    /// Microphone spacing in metres.
    #[arg(long, default_value_t = 0.08)]
    pub spacing: f64,
    #[arg(long, default_value_t = 8000)]
    pub sample_rate: u32,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct SeparateArgs {
    /// Mixture WAV, or a scene directory holding `mixture.wav`.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Scene directory with `source_<i>_image.wav` references to score against.
    #[arg(long)]
    pub eval: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub pipeline: PipelineArgs,
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct PrepareArgs {
    /// Directory of mixture WAVs or scene directories.
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub pipeline: PipelineArgs,
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct TrainArgs {
    /// Directory of prepared target records.
    #[arg(long)]
    pub targets: PathBuf,
    /// Checkpoint file to write.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON-lines training log; stdout when absent.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Checkpoint to continue from.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long, default_value_t = 128)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 100)]
    pub segment_len: usize,
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 5.0)]
    pub clip_norm: f64,
    #[arg(long, value_enum, default_value_t = LossArg::Kld)]
    pub loss: LossArg,
    /// Residual reverberation taps L_r of the mask head.
    #[arg(long, default_value_t = 1)]
    pub lr: usize,
    #[arg(long, value_delimiter = ',', default_values_t = [256, 256])]
    pub hidden: Vec<usize>,
    /// Context frames on each side of the current one.
    #[arg(long, default_value_t = 2)]
    pub context: usize,
    #[arg(long, value_enum, default_value_t = ActivationArg::Tanh)]
    pub activation: ActivationArg,
    #[arg(long, default_value_t = 0.1)]
    pub val_fraction: f64,
    #[arg(long, default_value_t = 100)]
    pub val_every: usize,
    #[arg(long, default_value_t = 500)]
    pub checkpoint_every: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl TrainArgs {
    pub fn to_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            segment_len: self.segment_len,
            steps: self.steps,
            learning_rate: self.learning_rate,
            clip_norm: self.clip_norm,
            loss_kind: self.loss.into(),
            reverb_taps: self.lr,
            seed: self.seed,
            hidden: self.hidden.clone(),
            context: self.context,
            activation: match self.activation {
                ActivationArg::Tanh => Activation::Tanh,
                ActivationArg::Relu => Activation::Relu,
            },
            val_fraction: self.val_fraction,
            val_every: self.val_every,
            checkpoint_every: self.checkpoint_every,
        }
    }
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Mixture WAV, or a scene directory holding `mixture.wav`.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// EM iterations started from the network's SCMs.
    #[arg(long, default_value_t = 10)]
    pub refine: usize,
    /// Scene directory with references to score against.
    #[arg(long)]
    pub eval: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    pub wpe_delay: usize,
    #[arg(long, default_value_t = 16)]
    pub wpe_taps: usize,
    #[arg(long, default_value_t = 3)]
    pub wpe_iters: usize,
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct EvaluateArgs {
    /// Estimates: one subdirectory per utterance with `source_<i>*.wav`, or a single such directory.
    #[arg(long)]
    pub est: PathBuf,
    /// References laid out like `--est`.
    #[arg(long)]
    pub reference: PathBuf,
    #[arg(long, value_enum, default_value_t = FormatArg::Table)]
    pub format: FormatArg,
    /// Report file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct GradcheckArgs {
    /// First seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of consecutive seeds.
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    #[arg(long, value_delimiter = ',', default_values_t = [1, 4, 8])]
    pub lr: Vec<usize>,
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [LossArg::Kld, LossArg::L2])]
    pub loss: Vec<LossArg>,
    /// Largest acceptable relative error.
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Simulate(_) => "simulate",
            Command::Separate(_) => "separate",
            Command::Prepare(_) => "prepare",
            Command::Train(_) => "train",
            Command::Infer(_) => "infer",
            Command::Evaluate(_) => "evaluate",
            Command::Gradcheck(_) => "gradcheck",
        }
    }
}

/// Reads a flat `key=value` file into `--key=value` arguments. Blank lines
/// and lines starting with `#` are ignored; `key=true` becomes a bare flag.
pub fn config_args(text: &str) -> Result<Vec<String>, String> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| format!("config line {}: expected key=value", n + 1))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || k.starts_with('-') {
            return Err(format!("config line {}: bad key {k:?}", n + 1));
        }
        match v {
            "true" => out.push(format!("--{k}")),
            "false" => {}
            _ => out.push(format!("--{k}={v}")),
        }
    }
    Ok(out)
}

/// Resolved arguments of a subcommand as `key=value` lines, readable by [`config_args`].
pub fn echo(cmd: &Command) -> String {
    let value = serde_json::to_value(cmd).expect("arguments serialize");
    let mut s = String::new();
    if let serde_json::Value::Object(map) = value {
        for (k, v) in map {
            let text = match v {
                serde_json::Value::Null => continue,
                serde_json::Value::Bool(b) => b.to_string(),
                serde_json::Value::String(x) => x,
                serde_json::Value::Array(xs) => xs
                    .iter()
                    .map(|x| x.as_str().map(str::to_string).unwrap_or_else(|| x.to_string()))
                    .collect::<Vec<_>>()
                    .join(","),
                other => other.to_string(),
            };
            s.push_str(&format!("{k}={text}\n"));
        }
    }
    s
}
