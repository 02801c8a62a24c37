use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lgm::{pcsg_separate, GaussianPosterior, ScmParams};
use crate::pipeline::{
    front_end, get_posterior, get_scm_params, get_spectrogram, put_posterior, put_scm_params, put_spectrogram,
    PipelineConfig, ScmDims, SpecMeta,
};
use crate::signal::{read_wav, MultichannelWave, Spectrogram};

use super::container::Container;

pub const TARGET_EXT: &str = "lgms";

/// Pseudo-clean training target of one utterance: the dereverberated
/// mixture the network sees, the PCSG posteriors and the fitted parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetRecord {
    pub name: String,
    pub spec: Spectrogram,
    pub posterior: GaussianPosterior,
    pub params: ScmParams,
}

#[derive(Serialize, Deserialize)]
struct TargetMeta {
    name: String,
    pipeline: PipelineConfig,
    spec: SpecMeta,
    theta: ScmDims,
}

impl TargetRecord {
    pub fn to_container(&self, cfg: &PipelineConfig) -> Result<Container> {
        let mut c = Container::new("target", serde_json::Value::Null);
        let spec = put_spectrogram(&mut c, "spec", &self.spec);
        put_posterior(&mut c, "posterior", &self.posterior);
        let theta = put_scm_params(&mut c, "theta", &self.params);
        c.config = serde_json::to_value(TargetMeta { name: self.name.clone(), pipeline: cfg.clone(), spec, theta })?;
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<(Self, PipelineConfig)> {
        if c.kind != "target" {
            return Err(Error::Checkpoint(format!("expected a target record, found {:?}", c.kind)));
        }
        let meta: TargetMeta = serde_json::from_value(c.config.clone())?;
        let rec = Self {
            name: meta.name,
            spec: get_spectrogram(c, "spec", &meta.spec)?,
            posterior: get_posterior(c, "posterior")?,
            params: get_scm_params(c, "theta", &meta.theta)?,
        };
        Ok((rec, meta.pipeline))
    }
}

/// WPE then PCSG on one mixture.
pub fn prepare_target(name: &str, wave: &MultichannelWave, cfg: &PipelineConfig) -> Result<TargetRecord> {
    let spec = front_end(wave, cfg)?;
    let (posterior, params) = pcsg_separate(&spec, &cfg.lgm)?;
    Ok(TargetRecord { name: name.to_string(), spec, posterior, params })
}

/// Mixtures of a dataset directory, sorted by name: `*.wav` files directly
/// inside it, and `<scene>/mixture.wav` for scene subdirectories.
pub fn list_mixtures(dir: impl AsRef<Path>) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir.as_ref())? {
        let path = entry?.path();
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()).map(str::to_string) else { continue };
        if path.is_dir() {
            let mix = path.join("mixture.wav");
            if mix.is_file() {
                out.push((path.file_name().and_then(|s| s.to_str()).unwrap_or(&stem).to_string(), mix));
            }
        } else if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")) {
            out.push((stem, path));
        }
    }
    out.sort();
    Ok(out)
}

/// Writes one `<name>.lgms` target record per readable mixture of `dataset`.
///
/// Unreadable or unusable files are skipped with a warning. Results depend
/// only on the files and `cfg`, not on the thread count.
pub fn prepare_targets(dataset: impl AsRef<Path>, out_dir: impl AsRef<Path>, cfg: &PipelineConfig) -> Result<Vec<PathBuf>> {
    let list = list_mixtures(&dataset)?;
    if list.is_empty() {
        return Err(Error::EmptyDataset(format!("no mixtures under {}", dataset.as_ref().display())));
    }
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)?;
    let written: Vec<Option<PathBuf>> = list
        .par_iter()
        .map(|(name, path)| -> Result<Option<PathBuf>> {
            let rec = match read_wav(path).and_then(|w| prepare_target(name, &w, cfg)) {
                Ok(r) => r,
                Err(Error::Io(e)) if e.kind() != std::io::ErrorKind::NotFound => return Err(Error::Io(e)),
                Err(e) => {
                    warn!("skipping {}: {e}", path.display());
                    return Ok(None);
                }
            };
            let dest = out_dir.join(format!("{name}.{TARGET_EXT}"));
            rec.to_container(cfg)?.save(&dest)?;
            Ok(Some(dest))
        })
        .collect::<Result<_>>()?;
    let written: Vec<PathBuf> = written.into_iter().flatten().collect();
    if written.is_empty() {
        return Err(Error::EmptyDataset(format!("no usable mixtures under {}", dataset.as_ref().display())));
    }
    info!("prepared {} of {} targets", written.len(), list.len());
    Ok(written)
}

/// Every target record of a directory, sorted by file name.
pub fn load_targets(dir: impl AsRef<Path>) -> Result<Vec<TargetRecord>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir.as_ref())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == TARGET_EXT))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::EmptyDataset(format!("no target records under {}", dir.as_ref().display())));
    }
    paths.iter().map(|p| Ok(TargetRecord::from_container(&Container::load(p)?)?.0)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lgm::LgmConfig;
    use crate::signal::{write_wav, WavFormat};
    use crate::sim::{random_scene, write_scene_dir, SceneConfig};

    fn quick() -> PipelineConfig {
        PipelineConfig { lgm: LgmConfig { n_em: 3, ..Default::default() }, ..Default::default() }
    }

    #[test]
    fn one_utterance_dataset() {
        let data = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        let scene = random_scene(&SceneConfig { duration_s: 0.5, ..Default::default() }, 4).unwrap();
        write_scene_dir(data.path().join("scene_0000"), &scene).unwrap();
        std::fs::write(data.path().join("broken.wav"), b"not a wav").unwrap();

        let paths = prepare_targets(data.path(), out.path(), &quick()).unwrap();
        assert_eq!(paths.len(), 1);
        let recs = load_targets(out.path()).unwrap();
        let p = &recs[0].posterior;
        assert_eq!((p.n_sources, p.n_freqs, p.n_mics), (2, 129, 2));
        assert_eq!(p.n_frames, recs[0].spec.n_frames());
        assert_eq!(recs[0].name, "scene_0000");

        let first = std::fs::read(&paths[0]).unwrap();
        prepare_targets(data.path(), out.path(), &quick()).unwrap();
        assert_eq!(std::fs::read(&paths[0]).unwrap(), first);
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let data = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        assert!(matches!(prepare_targets(data.path(), out.path(), &quick()), Err(Error::EmptyDataset(_))));
        std::fs::write(data.path().join("broken.wav"), b"xx").unwrap();
        assert!(matches!(prepare_targets(data.path(), out.path(), &quick()), Err(Error::EmptyDataset(_))));
    }

    #[test]
    fn lists_flat_wavs_and_scene_dirs() {
        let data = tempfile::tempdir().unwrap();
        let w = MultichannelWave::zeros(2, 100, 8000);
        write_wav(data.path().join("b.wav"), &w, WavFormat::Pcm16).unwrap();
        std::fs::create_dir(data.path().join("a")).unwrap();
        write_wav(data.path().join("a/mixture.wav"), &w, WavFormat::Pcm16).unwrap();
        std::fs::create_dir(data.path().join("empty")).unwrap();
        let names: Vec<String> = list_mixtures(data.path()).unwrap().into_iter().map(|x| x.0).collect();
        assert_eq!(names, ["a", "b"]);
    }
}
