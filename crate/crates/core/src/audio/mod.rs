//! Waveform front-end: WAV I/O, framing, magnitude spectrograms and
//! SNR-controlled synthetic noise.

mod frontend;
mod noise;
mod stft;
mod wav;

pub use frontend::{Compression, FrontEnd, Normalization};
pub use noise::{add_noise, add_noise_components, measured_snr_db, NoiseKind, NoiseSpec};
pub use stft::{
    frame_signal, full_spectrum, hamming, normalize_spectrogram, read_matrix_csv, spectrogram,
    write_matrix_csv, FrameConfig, Spectrogram, NORM_VARIANCE_FLOOR,
};
pub use wav::{read_wav, write_wav};

/// Mono PCM samples at a fixed rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

pub const STANDARD_SAMPLE_RATE: u32 = 16_000;

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Waveform {
            samples,
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Mean squared amplitude.
    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|s| s * s).sum::<f64>() / self.samples.len() as f64
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}
