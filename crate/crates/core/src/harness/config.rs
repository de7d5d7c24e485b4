use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audio::{FrontEnd, NoiseKind, STANDARD_SAMPLE_RATE};
use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::synth::{CorpusSpec, CORPUS_MANIFEST};

pub const SCHEMA_VERSION: u32 = 1;

/// Everything one experiment needs. Relative paths resolve against the
/// working directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    /// Master seed; every random stream is derived from it.
    pub seed: u64,
    #[serde(default)]
    pub corpus: CorpusConfig,
    #[serde(default)]
    pub frontend: FrontEnd,
    pub model: BackboneConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub trials: TrialConfig,
    #[serde(default)]
    pub noise: NoiseGrid,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub n_speakers: usize,
    pub utts_per_speaker: usize,
    pub test_per_speaker: usize,
    pub duration_s: f64,
    /// Load a corpus written by `synth-corpus` instead of synthesizing one.
    pub dir: Option<PathBuf>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        let d = CorpusSpec::default();
        CorpusConfig {
            n_speakers: d.n_speakers,
            utts_per_speaker: d.utts_per_speaker,
            test_per_speaker: d.test_per_speaker,
            duration_s: d.duration_s,
            dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub lr: f64,
    /// Multiplier on `lr` for the attention kernels.
    pub fefa_lr_scale: f64,
    pub batch_size: usize,
    pub epochs: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            lr: 1e-4,
            fefa_lr_scale: 100.0,
            batch_size: 8,
            epochs: 30,
        }
    }
}

/// Trials over the test split. Missing counts mean every available pair.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrialConfig {
    pub n_target: Option<usize>,
    pub n_nontarget: Option<usize>,
    /// Read trials from a `label utt_a utt_b` file instead of sampling.
    pub list: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseGrid {
    pub distributions: Vec<NoiseKind>,
    pub snr_db: Vec<f64>,
}

impl Default for NoiseGrid {
    fn default() -> Self {
        NoiseGrid {
            distributions: NoiseKind::ALL.to_vec(),
            snr_db: vec![20.0, 50.0, 100.0],
        }
    }
}

impl ExperimentConfig {
    pub fn new(seed: u64, model: BackboneConfig) -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            seed,
            corpus: CorpusConfig::default(),
            frontend: FrontEnd::default(),
            model,
            training: TrainingConfig::default(),
            trials: TrialConfig::default(),
            noise: NoiseGrid::default(),
            output_dir: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        self.model.validate()?;
        self.frontend.frame.validate(STANDARD_SAMPLE_RATE)?;
        if self.model.input_bins != self.frontend.bins() {
            return bad(format!(
                "model.input_bins {} does not match the {} bins of the front end",
                self.model.input_bins,
                self.frontend.bins()
            ));
        }
        let t = &self.training;
        if !(t.lr >= 0.0 && t.lr.is_finite()) || t.batch_size == 0 {
            return bad("training needs lr >= 0 and batch_size > 0".into());
        }
        if !(t.fefa_lr_scale >= 0.0 && t.fefa_lr_scale.is_finite()) {
            return bad(format!("fefa_lr_scale must be finite and >= 0, got {}", t.fefa_lr_scale));
        }
        if self.noise.snr_db.iter().any(|s| !s.is_finite()) {
            return bad("noise.snr_db entries must be finite".into());
        }
        if let Some(dir) = &self.corpus.dir {
            let m = dir.join(CORPUS_MANIFEST);
            if !m.is_file() {
                return bad(format!("corpus.dir: {} not found", m.display()));
            }
        }
        if let Some(list) = &self.trials.list {
            if !list.is_file() {
                return bad(format!("trials.list: {} not found", list.display()));
            }
        }
        Ok(())
    }

    pub fn corpus_spec(&self) -> CorpusSpec {
        CorpusSpec {
            n_speakers: self.corpus.n_speakers,
            utts_per_speaker: self.corpus.utts_per_speaker,
            test_per_speaker: self.corpus.test_per_speaker,
            duration_s: self.corpus.duration_s,
            master_seed: derive_seed(self.seed, "corpus", 0),
        }
    }

    /// Settings that must agree between a checkpoint and a run resuming it.
    /// Only the epoch count may differ.
    pub(crate) fn resume_key(&self) -> serde_json::Value {
        let mut c = self.clone();
        c.training.epochs = 0;
        c.trials = TrialConfig::default();
        c.noise = NoiseGrid::default();
        c.output_dir = None;
        serde_json::to_value(c).expect("config serializes")
    }
}
