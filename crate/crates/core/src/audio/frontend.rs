use serde::{Deserialize, Serialize};

use super::stft::{normalize_spectrogram, spectrogram, FrameConfig, Spectrogram};
use super::Waveform;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Compression {
    Linear,
    /// `ln(|X| + log_floor)`.
    Log,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Each frequency row standardized across time.
    PerBin,
    /// One mean and variance over the whole matrix.
    PerUtterance,
}

/// Waveform to network-input pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrontEnd {
    pub frame: FrameConfig,
    pub compression: Compression,
    pub log_floor: f64,
    pub normalization: Normalization,
}

impl Default for FrontEnd {
    fn default() -> Self {
        FrontEnd {
            frame: FrameConfig::default(),
            compression: Compression::Log,
            log_floor: 1e-3,
            normalization: Normalization::PerUtterance,
        }
    }
}

impl FrontEnd {
    pub fn bins(&self) -> usize {
        self.frame.bins()
    }

    /// Normalized `[F, T]` features together with the raw magnitude
    /// spectrogram they came from.
    pub fn analyze(&self, w: &Waveform) -> Result<(Tensor, Spectrogram)> {
        if self.compression == Compression::Log && !(self.log_floor > 0.0) {
            return Err(Error::Config("log_floor must be positive".into()));
        }
        let mut spec = spectrogram(w, &self.frame)?;
        if spec.frames < 2 {
            return Err(Error::UtteranceTooShort {
                samples: w.len(),
                needed: self.frame.win_samples(w.sample_rate) + self.frame.hop_samples(w.sample_rate),
            });
        }
        let raw = spec.clone();
        if self.compression == Compression::Log {
            spec.values.iter_mut().for_each(|v| *v = (*v + self.log_floor).ln());
        }
        let features = match self.normalization {
            Normalization::PerBin => normalize_spectrogram(&spec),
            Normalization::PerUtterance => normalize_global(&spec),
        };
        Ok((features, raw))
    }

    pub fn features(&self, w: &Waveform) -> Result<Tensor> {
        self.analyze(w).map(|(f, _)| f)
    }
}

fn normalize_global(s: &Spectrogram) -> Tensor {
    let n = s.values.len() as f64;
    let mean = s.values.iter().sum::<f64>() / n;
    let var = s.values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / var.max(super::NORM_VARIANCE_FLOOR).sqrt();
    let data = s.values.iter().map(|v| (v - mean) * inv).collect();
    Tensor::from_parts(vec![s.bins, s.frames], data)
}
