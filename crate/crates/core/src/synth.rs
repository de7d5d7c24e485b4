//! Harmonic-plus-formant synthetic speakers.
//!
//! Speaker identity lives in the fundamental, the formant resonances and the
//! harmonic rolloff; per-utterance variation comes from seeded pitch drift,
//! phases and amplitude modulation.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{read_wav, write_wav, Waveform, STANDARD_SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, substream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Formant {
    pub center_hz: f64,
    pub bandwidth_hz: f64,
    pub gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerProfile {
    pub f0: f64,
    pub formants: Vec<Formant>,
    /// Attenuation of successive harmonics, dB per octave.
    pub harmonic_rolloff: f64,
    /// Peak relative pitch excursion.
    pub jitter: f64,
}

const FORMANT_FLOOR: f64 = 0.05;

impl SpeakerProfile {
    /// Resonator magnitude at `hz`: a floor plus one Lorentzian per formant.
    pub fn formant_gain(&self, hz: f64) -> f64 {
        FORMANT_FLOOR
            + self
                .formants
                .iter()
                .map(|f| {
                    let d = (hz - f.center_hz) / (0.5 * f.bandwidth_hz);
                    f.gain / (1.0 + d * d)
                })
                .sum::<f64>()
    }

    /// Relative amplitude of harmonic `h` (1-based) at fundamental `f0`.
    pub fn harmonic_amplitude(&self, h: usize, f0: f64) -> f64 {
        let tilt = 10f64.powf(-self.harmonic_rolloff * (h as f64).log2() / 20.0);
        tilt * self.formant_gain(h as f64 * f0)
    }

    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        let nyquist = sample_rate as f64 / 2.0;
        let ok = (60.0..=400.0).contains(&self.f0)
            && (0.0..=0.1).contains(&self.jitter)
            && self.formants.iter().all(|f| f.center_hz < nyquist && f.bandwidth_hz > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("speaker profile out of range: {self:?}")))
        }
    }
}

pub fn sample_profile(speaker_seed: u64) -> SpeakerProfile {
    let mut rng = substream(speaker_seed, "speaker", 0);
    let f0 = rng.random_range(80.0..300.0);
    let mut centers: Vec<f64> = (0..3).map(|_| rng.random_range(300.0..3500.0)).collect();
    centers.sort_by(f64::total_cmp);
    let formants = centers
        .into_iter()
        .map(|center_hz| Formant {
            center_hz,
            bandwidth_hz: rng.random_range(80.0..250.0),
            gain: rng.random_range(0.5..1.5),
        })
        .collect();
    SpeakerProfile {
        f0,
        formants,
        harmonic_rolloff: rng.random_range(3.0..9.0),
        jitter: rng.random_range(0.005..0.03),
    }
}

/// Renders one utterance, peak-normalized to 0.5.
pub fn synth_utterance(profile: &SpeakerProfile, duration_s: f64, utt_seed: u64) -> Result<Waveform> {
    synth_utterance_at(profile, duration_s, utt_seed, STANDARD_SAMPLE_RATE)
}

pub fn synth_utterance_at(
    profile: &SpeakerProfile,
    duration_s: f64,
    utt_seed: u64,
    sample_rate: u32,
) -> Result<Waveform> {
    if !(duration_s >= 0.5) {
        return Err(Error::InvalidArgument(format!(
            "utterance duration must be at least 0.5 s, got {duration_s}"
        )));
    }
    profile.validate(sample_rate)?;
    let mut rng = substream(utt_seed, "utterance", 0);
    let sr = sample_rate as f64;
    let n = (duration_s * sr).round() as usize;
    let nyquist = sr / 2.0;

    let drift_rates = [rng.random_range(0.5..2.0), rng.random_range(2.0..5.0)];
    let drift_phases = [rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI)];
    let am_rate = rng.random_range(2.0..6.0);
    let am_depth = rng.random_range(0.1..0.3);
    let am_phase = rng.random_range(0.0..2.0 * PI);

    let max_f0 = profile.f0 * (1.0 + profile.jitter);
    let n_harm = ((0.95 * nyquist) / max_f0).floor() as usize;
    let amps: Vec<f64> = (1..=n_harm)
        .map(|h| profile.harmonic_amplitude(h, profile.f0))
        .collect();
    let phases: Vec<f64> = (0..n_harm).map(|_| rng.random_range(0.0..2.0 * PI)).collect();

    let mut samples = Vec::with_capacity(n);
    let mut phase = 0.0;
    for k in 0..n {
        let t = k as f64 / sr;
        let drift = 0.6 * (2.0 * PI * drift_rates[0] * t + drift_phases[0]).sin()
            + 0.4 * (2.0 * PI * drift_rates[1] * t + drift_phases[1]).sin();
        let f0 = profile.f0 * (1.0 + profile.jitter * drift);
        let am = 1.0 + am_depth * (2.0 * PI * am_rate * t + am_phase).sin();
        let v: f64 = amps
            .iter()
            .zip(&phases)
            .enumerate()
            .map(|(i, (a, p))| a * ((i + 1) as f64 * phase + p).sin())
            .sum();
        samples.push(am * v);
        phase = (phase + 2.0 * PI * f0 / sr) % (2.0 * PI);
    }
    let peak = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        samples.iter_mut().for_each(|v| *v *= 0.5 / peak);
    }
    Ok(Waveform::new(samples, sample_rate))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub n_speakers: usize,
    pub utts_per_speaker: usize,
    /// Utterances per speaker held out for verification trials.
    pub test_per_speaker: usize,
    pub duration_s: f64,
    pub master_seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            n_speakers: 20,
            utts_per_speaker: 10,
            test_per_speaker: 2,
            duration_s: 1.0,
            master_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub speaker: usize,
    pub split: Split,
    pub wave: Waveform,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub profiles: Vec<SpeakerProfile>,
    pub utterances: Vec<Utterance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub speaker: usize,
    pub utt: String,
    pub path: PathBuf,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub spec: CorpusSpec,
    pub sample_rate: u32,
    pub entries: Vec<ManifestEntry>,
}

pub const CORPUS_MANIFEST: &str = "manifest.json";

pub fn speaker_id(s: usize) -> String {
    format!("spk{s:03}")
}

impl Corpus {
    pub fn build(spec: &CorpusSpec) -> Result<Corpus> {
        if spec.n_speakers < 2 {
            return Err(Error::InvalidArgument("corpus needs at least 2 speakers".into()));
        }
        if spec.test_per_speaker >= spec.utts_per_speaker {
            return Err(Error::InvalidArgument(
                "test_per_speaker must leave at least one training utterance".into(),
            ));
        }
        let profiles: Vec<SpeakerProfile> = (0..spec.n_speakers)
            .map(|s| sample_profile(derive_seed(spec.master_seed, "speaker", s as u64)))
            .collect();
        let n_train = spec.utts_per_speaker - spec.test_per_speaker;
        let mut utterances = Vec::with_capacity(spec.n_speakers * spec.utts_per_speaker);
        for (s, profile) in profiles.iter().enumerate() {
            for u in 0..spec.utts_per_speaker {
                let seed = derive_seed(
                    spec.master_seed,
                    "utterance",
                    (s * spec.utts_per_speaker + u) as u64,
                );
                utterances.push(Utterance {
                    id: format!("{}-u{u:03}", speaker_id(s)),
                    speaker: s,
                    split: if u < n_train { Split::Train } else { Split::Test },
                    wave: synth_utterance(profile, spec.duration_s, seed)?,
                });
            }
        }
        Ok(Corpus {
            spec: spec.clone(),
            profiles,
            utterances,
        })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Utterance> {
        self.utterances.iter().filter(move |u| u.split == split)
    }

    /// Utterance ids of `split`, grouped by speaker.
    pub fn groups(&self, split: Split) -> Vec<Vec<String>> {
        let mut g = vec![Vec::new(); self.spec.n_speakers];
        for u in self.split(split) {
            g[u.speaker].push(u.id.clone());
        }
        g
    }

    /// Writes `wav/<id>.wav` files and the JSON manifest under `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<CorpusManifest> {
        let dir = dir.as_ref();
        let wav_dir = dir.join("wav");
        std::fs::create_dir_all(&wav_dir).map_err(|e| Error::io(&wav_dir, e))?;
        let mut entries = Vec::with_capacity(self.utterances.len());
        for u in &self.utterances {
            let rel = PathBuf::from("wav").join(format!("{}.wav", u.id));
            write_wav(dir.join(&rel), &u.wave)?;
            entries.push(ManifestEntry {
                speaker: u.speaker,
                utt: u.id.clone(),
                path: rel,
                split: u.split,
            });
        }
        let manifest = CorpusManifest {
            spec: self.spec.clone(),
            sample_rate: STANDARD_SAMPLE_RATE,
            entries,
        };
        let path = dir.join(CORPUS_MANIFEST);
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)
            .map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }

    /// Loads a corpus written by [`Corpus::write`]. Samples come back
    /// PCM16-quantized and profiles are re-derived from the seed.
    pub fn load(dir: impl AsRef<Path>) -> Result<Corpus> {
        let dir = dir.as_ref();
        let path = dir.join(CORPUS_MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: CorpusManifest = serde_json::from_str(&text)?;
        let profiles = (0..manifest.spec.n_speakers)
            .map(|s| sample_profile(derive_seed(manifest.spec.master_seed, "speaker", s as u64)))
            .collect();
        let utterances = manifest
            .entries
            .iter()
            .map(|e| {
                Ok(Utterance {
                    id: e.utt.clone(),
                    speaker: e.speaker,
                    split: e.split,
                    wave: read_wav(dir.join(&e.path))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Corpus {
            spec: manifest.spec,
            profiles,
            utterances,
        })
    }
}
