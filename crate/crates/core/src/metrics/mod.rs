//! Separation scoring: BSS-eval SDR/SIR, cepstral distance and
//! frequency-weighted segmental SNR against reference-microphone images.

mod bss;
mod quality;

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use bss::{bss_eval, BssEval, DISTORTION_TAPS, SDR_CAP_DB};
pub use quality::{cepstral_distance, fwseg_snr};

/// Scores of one utterance; per-source vectors are ordered by reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceMetrics {
    pub utterance: String,
    pub sdr: Vec<f64>,
    pub sir: Vec<f64>,
    pub cd: Vec<f64>,
    pub fwsegsnr: Vec<f64>,
    /// `perm[i]` is the estimate matched to reference `i`.
    pub perm: Vec<usize>,
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len().max(1) as f64
}

impl UtteranceMetrics {
    pub fn mean_sdr(&self) -> f64 {
        mean(&self.sdr)
    }
    pub fn mean_sir(&self) -> f64 {
        mean(&self.sir)
    }
    pub fn mean_cd(&self) -> f64 {
        mean(&self.cd)
    }
    pub fn mean_fwsegsnr(&self) -> f64 {
        mean(&self.fwsegsnr)
    }
}

/// Scores single-channel estimates against single-channel references.
pub fn evaluate_utterance(
    name: &str,
    estimates: &[Vec<f64>],
    references: &[Vec<f64>],
    sample_rate: u32,
) -> Result<UtteranceMetrics> {
    let bss = bss_eval(estimates, references)?;
    let mut cd = Vec::with_capacity(references.len());
    let mut fw = Vec::with_capacity(references.len());
    for (i, r) in references.iter().enumerate() {
        let e = &estimates[bss.perm[i]];
        cd.push(cepstral_distance(e, r)?);
        fw.push(fwseg_snr(e, r, sample_rate)?);
    }
    Ok(UtteranceMetrics { utterance: name.to_string(), sdr: bss.sdr, sir: bss.sir, cd, fwsegsnr: fw, perm: bss.perm })
}

/// Per-utterance scores and their means.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub utterances: Vec<UtteranceMetrics>,
}

/// Input to [`MetricReport::evaluate_all`]: name, estimates, references.
pub type ScoringJob = (String, Vec<Vec<f64>>, Vec<Vec<f64>>);

impl MetricReport {
    /// Scores utterances in parallel; order follows `jobs`.
    pub fn evaluate_all(jobs: &[ScoringJob], sample_rate: u32) -> Result<Self> {
        if jobs.is_empty() {
            return Err(Error::EmptyDataset("nothing to evaluate".into()));
        }
        let utterances = jobs
            .par_iter()
            .map(|(name, est, refs)| evaluate_utterance(name, est, refs, sample_rate))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { utterances })
    }

    fn mean_of(&self, f: impl Fn(&UtteranceMetrics) -> f64) -> f64 {
        mean(&self.utterances.iter().map(f).collect::<Vec<_>>())
    }

    pub fn mean_sdr(&self) -> f64 {
        self.mean_of(UtteranceMetrics::mean_sdr)
    }
    pub fn mean_sir(&self) -> f64 {
        self.mean_of(UtteranceMetrics::mean_sir)
    }
    pub fn mean_cd(&self) -> f64 {
        self.mean_of(UtteranceMetrics::mean_cd)
    }
    pub fn mean_fwsegsnr(&self) -> f64 {
        self.mean_of(UtteranceMetrics::mean_fwsegsnr)
    }

    /// One JSON object per utterance.
    pub fn to_json_lines(&self) -> Result<String> {
        let mut s = String::new();
        for u in &self.utterances {
            s.push_str(&serde_json::to_string(u)?);
            s.push('\n');
        }
        Ok(s)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("utterance,sdr,sir,cd,fwsegsnr\n");
        for u in &self.utterances {
            let _ = writeln!(s, "{},{:.4},{:.4},{:.4},{:.4}", u.utterance, u.mean_sdr(), u.mean_sir(), u.mean_cd(), u.mean_fwsegsnr());
        }
        let _ = writeln!(s, "mean,{:.4},{:.4},{:.4},{:.4}", self.mean_sdr(), self.mean_sir(), self.mean_cd(), self.mean_fwsegsnr());
        s
    }

    pub fn to_table(&self) -> String {
        let w = self.utterances.iter().map(|u| u.utterance.len()).max().unwrap_or(4).max(9);
        let mut s = format!("{:<w$} {:>8} {:>8} {:>8} {:>9}\n", "utterance", "SDR", "SIR", "CD", "FWSegSNR");
        let mut row = |name: &str, a: f64, b: f64, c: f64, d: f64| {
            let _ = writeln!(s, "{name:<w$} {a:>8.2} {b:>8.2} {c:>8.2} {d:>9.2}");
        };
        for u in &self.utterances {
            row(&u.utterance, u.mean_sdr(), u.mean_sir(), u.mean_cd(), u.mean_fwsegsnr());
        }
        row("mean", self.mean_sdr(), self.mean_sir(), self.mean_cd(), self.mean_fwsegsnr());
        s
    }
}
