use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::Waveform;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Variance floor used by [`normalize_spectrogram`].
pub const NORM_VARIANCE_FLOOR: f64 = 1e-8;

/// Framing and transform parameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameConfig {
    pub frame_len_ms: f64,
    /// Window advance between consecutive frames.
    pub hop_ms: f64,
    pub nfft: usize,
}

impl Default for FrameConfig {
    fn default() -> Self {
        FrameConfig {
            frame_len_ms: 25.0,
            hop_ms: 10.0,
            nfft: 512,
        }
    }
}

impl FrameConfig {
    pub fn win_samples(&self, sample_rate: u32) -> usize {
        (self.frame_len_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn hop_samples(&self, sample_rate: u32) -> usize {
        (self.hop_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn bins(&self) -> usize {
        self.nfft / 2 + 1
    }

    /// Number of full frames in a signal of `n` samples, `None` when shorter
    /// than one window.
    pub fn frame_count(&self, n: usize, sample_rate: u32) -> Option<usize> {
        let win = self.win_samples(sample_rate);
        let hop = self.hop_samples(sample_rate);
        (n >= win && win > 0 && hop > 0).then(|| (n - win) / hop + 1)
    }

    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        if !(self.frame_len_ms > 0.0) {
            return Err(Error::InvalidArgument("frame length must be positive".into()));
        }
        if !(self.hop_ms > 0.0 && self.hop_ms <= self.frame_len_ms) {
            return Err(Error::InvalidArgument(
                "hop must be positive and no longer than the frame".into(),
            ));
        }
        if self.hop_samples(sample_rate) == 0 {
            return Err(Error::InvalidArgument("hop rounds to zero samples".into()));
        }
        Ok(())
    }
}

/// F×T magnitude matrix, row-major with frequency rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub values: Vec<f64>,
    pub bins: usize,
    pub frames: usize,
    pub sample_rate: u32,
    pub config: FrameConfig,
}

impl Spectrogram {
    pub fn get(&self, bin: usize, frame: usize) -> f64 {
        self.values[bin * self.frames + frame]
    }

    pub fn row(&self, bin: usize) -> &[f64] {
        &self.values[bin * self.frames..(bin + 1) * self.frames]
    }

    pub fn bin_center_hz(&self, bin: usize) -> f64 {
        bin as f64 * self.sample_rate as f64 / self.config.nfft as f64
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![self.bins, self.frames], self.values.clone())
    }
}

/// Splits `w` into overlapping frames; frame `k` starts at `k * hop`. A
/// trailing partial frame is dropped.
pub fn frame_signal(w: &Waveform, frame_len_ms: f64, hop_ms: f64) -> Result<Vec<Vec<f64>>> {
    let cfg = FrameConfig {
        frame_len_ms,
        hop_ms,
        nfft: 0,
    };
    cfg.validate(w.sample_rate)?;
    let win = cfg.win_samples(w.sample_rate);
    let hop = cfg.hop_samples(w.sample_rate);
    let count = cfg
        .frame_count(w.len(), w.sample_rate)
        .ok_or(Error::UtteranceTooShort {
            samples: w.len(),
            needed: win,
        })?;
    Ok((0..count)
        .map(|k| w.samples[k * hop..k * hop + win].to_vec())
        .collect())
}

/// Symmetric Hamming window.
pub fn hamming(len: usize) -> Vec<f64> {
    if len == 1 {
        return vec![1.0];
    }
    let denom = (len - 1) as f64;
    (0..len)
        .map(|n| 0.54 - 0.46 * (2.0 * PI * n as f64 / denom).cos())
        .collect()
}

/// Full-length DFT of one frame after windowing and zero-padding to `nfft`.
pub fn full_spectrum(frame: &[f64], nfft: usize) -> Vec<Complex<f64>> {
    let window = hamming(frame.len());
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(nfft);
    let mut buf = vec![Complex::new(0.0, 0.0); nfft];
    for (b, (s, w)) in buf.iter_mut().zip(frame.iter().zip(&window)) {
        b.re = s * w;
    }
    fft.process(&mut buf);
    buf
}

/// Hamming-windowed, zero-padded magnitude spectrogram with `nfft / 2 + 1`
/// rows.
pub fn spectrogram(w: &Waveform, cfg: &FrameConfig) -> Result<Spectrogram> {
    cfg.validate(w.sample_rate)?;
    let win = cfg.win_samples(w.sample_rate);
    if cfg.nfft < win {
        return Err(Error::InvalidArgument(format!(
            "nfft {} shorter than window {win}",
            cfg.nfft
        )));
    }
    let frames = frame_signal(w, cfg.frame_len_ms, cfg.hop_ms)?;
    let bins = cfg.bins();
    let t_count = frames.len();
    let window = hamming(win);
    let fft = FftPlanner::new().plan_fft_forward(cfg.nfft);
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.nfft];
    let mut values = vec![0.0; bins * t_count];
    for (t, frame) in frames.iter().enumerate() {
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for (b, (s, wv)) in buf.iter_mut().zip(frame.iter().zip(&window)) {
            b.re = s * wv;
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for (i, c) in buf.iter().take(bins).enumerate() {
            values[i * t_count + t] = c.norm();
        }
    }
    Ok(Spectrogram {
        values,
        bins,
        frames: t_count,
        sample_rate: w.sample_rate,
        config: *cfg,
    })
}

/// Per-frequency-row standardization across time: zero mean, unit variance,
/// with the variance floored at [`NORM_VARIANCE_FLOOR`].
pub fn normalize_spectrogram(s: &Spectrogram) -> Tensor {
    let t = s.frames as f64;
    let mut out = Vec::with_capacity(s.values.len());
    for i in 0..s.bins {
        let row = s.row(i);
        let mean = row.iter().sum::<f64>() / t;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / t;
        let inv = 1.0 / var.max(NORM_VARIANCE_FLOOR).sqrt();
        out.extend(row.iter().map(|v| (v - mean) * inv));
    }
    Tensor::from_parts(vec![s.bins, s.frames], out)
}

/// Writes a 2-D tensor as CSV, one row per line, 9 significant digits.
pub fn write_matrix_csv(path: impl AsRef<Path>, m: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let [rows, cols] = m.shape() else {
        return Err(Error::InvalidArgument(format!(
            "matrix CSV needs a 2-D tensor, got {:?}",
            m.shape()
        )));
    };
    let mut out = String::with_capacity(rows * cols * 16);
    for r in 0..*rows {
        for (c, v) in m.data()[r * cols..(r + 1) * cols].iter().enumerate() {
            if c > 0 {
                out.push(',');
            }
            write!(out, "{v:.8e}").unwrap();
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_matrix_csv(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut data = Vec::new();
    let mut rows = 0;
    let mut cols = None;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let before = data.len();
        for field in line.split(',') {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::InvalidArgument(format!("{}: bad number {field:?}", path.display()))
            })?;
            data.push(v);
        }
        let n = data.len() - before;
        if *cols.get_or_insert(n) != n {
            return Err(Error::InvalidArgument(format!(
                "{}: ragged row {rows}",
                path.display()
            )));
        }
        rows += 1;
    }
    Tensor::new(vec![rows, cols.unwrap_or(0)], data)
}
