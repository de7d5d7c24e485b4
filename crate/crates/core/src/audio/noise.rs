use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use super::Waveform;
use crate::error::{Error, Result};
use crate::rng::substream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    Gaussian,
    Uniform,
}

impl NoiseKind {
    pub const ALL: [NoiseKind; 2] = [NoiseKind::Gaussian, NoiseKind::Uniform];

    pub fn as_str(self) -> &'static str {
        match self {
            NoiseKind::Gaussian => "gaussian",
            NoiseKind::Uniform => "uniform",
        }
    }
}

impl std::str::FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(NoiseKind::Gaussian),
            "uniform" => Ok(NoiseKind::Uniform),
            other => Err(Error::InvalidArgument(format!(
                "unknown noise distribution {other:?} (expected gaussian or uniform)"
            ))),
        }
    }
}

impl std::fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub distribution: NoiseKind,
    pub snr_db: f64,
}

impl NoiseSpec {
    pub fn new(distribution: NoiseKind, snr_db: f64) -> Self {
        NoiseSpec {
            distribution,
            snr_db,
        }
    }
}

fn draw(kind: NoiseKind, n: usize, rng: &mut impl Rng) -> Vec<f64> {
    match kind {
        NoiseKind::Gaussian => (0..n).map(|_| StandardNormal.sample(rng)).collect(),
        NoiseKind::Uniform => {
            let u = Uniform::new_inclusive(-1.0, 1.0).expect("valid bounds");
            (0..n).map(|_| u.sample(rng)).collect()
        }
    }
}

/// Returns `(noisy, scaled_noise)` where `noisy = w + scaled_noise` and the
/// scale is fitted against the realized noise power, so that the SNR of the
/// two components equals `spec.snr_db` up to rounding.
pub fn add_noise_components(
    w: &Waveform,
    spec: &NoiseSpec,
    seed: u64,
) -> Result<(Waveform, Vec<f64>)> {
    if !spec.snr_db.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "snr_db must be finite, got {}",
            spec.snr_db
        )));
    }
    let signal_power = w.power();
    if !(signal_power > 0.0) {
        return Err(Error::SilentSignal);
    }
    let mut rng = substream(seed, "noise", 0);
    let mut noise = draw(spec.distribution, w.len(), &mut rng);
    let noise_power = noise.iter().map(|v| v * v).sum::<f64>() / noise.len() as f64;
    let target = signal_power / 10f64.powf(spec.snr_db / 10.0);
    let alpha = (target / noise_power).sqrt();
    noise.iter_mut().for_each(|v| *v *= alpha);
    let samples = w.samples.iter().zip(&noise).map(|(s, n)| s + n).collect();
    Ok((Waveform::new(samples, w.sample_rate), noise))
}

pub fn add_noise(w: &Waveform, spec: &NoiseSpec, seed: u64) -> Result<Waveform> {
    add_noise_components(w, spec, seed).map(|(noisy, _)| noisy)
}

/// `10 log10(P_signal / P_noise)`.
pub fn measured_snr_db(clean: &[f64], noise: &[f64]) -> f64 {
    let p = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    10.0 * (p(clean) / p(noise)).log10()
}
