//! Experiment pipelines: training with resumable checkpoints, verification
//! scoring under injected noise, the baseline-vs-attention robustness sweep,
//! and attention-map export. The `fefa` binary is a thin layer over these.

mod commands;
mod config;

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{pool_time, AttentionMap};
use crate::audio::{add_noise, FrontEnd, NoiseKind, NoiseSpec, Waveform};
use crate::backbone::{train_epoch, BackboneConfig, Example, FefaMode, SpeakerModel};
use crate::error::{Error, Result};
use crate::metrics::{compute_eer, cosine_score, make_trials, read_trials, Trial, TrialScores};
use crate::rng::derive_seed;
use crate::synth::{Corpus, Split, Utterance};
use crate::tensor::{Adam, Tensor};

pub use commands::{
    cmd_evaluate, cmd_export_attention, cmd_robustness, cmd_synth_corpus, cmd_train,
    read_robustness_csv, write_robustness_csv, ATTENTION_CSV, DEGRADATION_CSV, EVAL_SUMMARY,
    ROBUSTNESS_CSV, SPECTROGRAM_CSV, TRIALS_FILE,
};
pub use config::{
    CorpusConfig, ExperimentConfig, NoiseGrid, TrainingConfig, TrialConfig, SCHEMA_VERSION,
};

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const TRAIN_LOG: &str = "train_log.jsonl";

/// Utterances per forward pass during embedding extraction. Fixed so that
/// results do not depend on the number of worker threads.
const EMBED_BATCH: usize = 16;

pub fn load_corpus(cfg: &ExperimentConfig) -> Result<Corpus> {
    match &cfg.corpus.dir {
        Some(dir) => Corpus::load(dir),
        None => Corpus::build(&cfg.corpus_spec()),
    }
}

pub fn training_examples(corpus: &Corpus, frontend: &FrontEnd) -> Result<Vec<Example>> {
    corpus
        .split(Split::Train)
        .map(|u| {
            Ok(Example {
                features: frontend.features(&u.wave)?,
                label: u.speaker,
            })
        })
        .collect()
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u64,
    pub loss: f64,
    pub train_accuracy: f64,
}

pub struct TrainOutcome {
    pub model: SpeakerModel,
    pub adam: Adam,
    pub log: Vec<EpochRecord>,
}

fn checkpoint_meta(cfg: &ExperimentConfig, epoch: u64, log: &[EpochRecord]) -> serde_json::Value {
    serde_json::json!({
        "epoch": epoch,
        "seed": cfg.seed,
        "frontend": cfg.frontend,
        "experiment": cfg.resume_key(),
        "log": log,
    })
}

/// Trains `cfg.model` on the training split for `cfg.training.epochs`
/// epochs. With `out`, the checkpoint and JSON-lines log under it are
/// rewritten after every epoch. With `resume`, training continues from that
/// checkpoint and ends in the same state as an uninterrupted run.
fn optimizer(cfg: &ExperimentConfig, model: &SpeakerModel) -> Adam {
    let mut adam = Adam::new(&model.store, cfg.training.lr);
    for name in model.fefa_param_names() {
        if let Some(id) = model.store.find(&name) {
            adam.set_lr_scale(id, cfg.training.fefa_lr_scale);
        }
    }
    adam
}

pub fn train(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    out: Option<&Path>,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    let n_speakers = corpus.spec.n_speakers;
    let (mut model, mut adam, mut log, start) = match resume {
        Some(dir) => {
            let (model, state, meta) = SpeakerModel::load(dir)?;
            let key = cfg.resume_key();
            if meta.get("experiment") != Some(&key) {
                return Err(Error::Config(format!(
                    "checkpoint {} was trained with different settings: checkpoint {} vs config {}",
                    dir.display(),
                    meta.get("experiment").unwrap_or(&serde_json::Value::Null),
                    key
                )));
            }
            let state = state.ok_or_else(|| {
                Error::Checkpoint(format!("{} has no optimizer state", dir.display()))
            })?;
            let mut adam = optimizer(cfg, &model);
            adam.state = state;
            let log: Vec<EpochRecord> = serde_json::from_value(meta["log"].clone())?;
            let start = meta["epoch"]
                .as_u64()
                .ok_or_else(|| Error::Checkpoint("missing epoch in metadata".into()))?;
            (model, adam, log, start)
        }
        None => {
            let model = SpeakerModel::build(&cfg.model, n_speakers, derive_seed(cfg.seed, "init", 0))?;
            let adam = optimizer(cfg, &model);
            (model, adam, Vec::new(), 0)
        }
    };
    if model.n_speakers != n_speakers {
        return Err(Error::Config(format!(
            "checkpoint classifies {} speakers but the corpus has {n_speakers}",
            model.n_speakers
        )));
    }
    if start > cfg.training.epochs {
        return Err(Error::Config(format!(
            "checkpoint is at epoch {start}, beyond the configured {} epochs",
            cfg.training.epochs
        )));
    }
    let data = training_examples(corpus, &cfg.frontend)?;
    let batch_seed = derive_seed(cfg.seed, "batching", 0);
    let save = |model: &SpeakerModel, adam: &Adam, log: &[EpochRecord], epoch: u64| -> Result<()> {
        let Some(out) = out else { return Ok(()) };
        model.save(out.join(CHECKPOINT_DIR), Some(adam), checkpoint_meta(cfg, epoch, log))?;
        let mut text = String::new();
        for r in log {
            text.push_str(&serde_json::to_string(r)?);
            text.push('\n');
        }
        let path = out.join(TRAIN_LOG);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    };
    if let Some(out) = out {
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    }
    if start == cfg.training.epochs {
        save(&model, &adam, &log, start)?;
    }
    for epoch in start..cfg.training.epochs {
        let stats = train_epoch(&mut model, &mut adam, &data, cfg.training.batch_size, batch_seed, epoch)?;
        log.push(EpochRecord {
            epoch,
            loss: stats.loss,
            train_accuracy: stats.accuracy,
        });
        save(&model, &adam, &log, epoch + 1)?;
    }
    Ok(TrainOutcome { model, adam, log })
}

/// Loads a checkpoint and checks it against the experiment's architecture
/// and front end.
pub fn load_for_config(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<SpeakerModel> {
    let (model, _, meta) = SpeakerModel::load(checkpoint)?;
    check_architecture(&model.config, &cfg.model)?;
    if let Some(fe) = meta.get("frontend") {
        let fe: FrontEnd = serde_json::from_value(fe.clone())?;
        if fe != cfg.frontend {
            return Err(Error::Config(format!(
                "checkpoint front end {} does not match config front end {}",
                serde_json::to_string(&fe)?,
                serde_json::to_string(&cfg.frontend)?
            )));
        }
    }
    Ok(model)
}

pub fn check_architecture(checkpoint: &BackboneConfig, config: &BackboneConfig) -> Result<()> {
    if checkpoint == config {
        return Ok(());
    }
    Err(Error::Config(format!(
        "architecture mismatch: checkpoint {} vs config {}",
        serde_json::to_string(checkpoint)?,
        serde_json::to_string(config)?
    )))
}

/// Counts of every target and nontarget pair available from `groups`.
fn pair_counts(groups: &[Vec<String>]) -> (usize, usize) {
    let sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
    let total: usize = sizes.iter().sum();
    let targets = sizes.iter().map(|n| n * n.saturating_sub(1) / 2).sum();
    let all = total * total.saturating_sub(1) / 2;
    (targets, all - targets)
}

/// The configured trial list over the test split.
pub fn trial_list(cfg: &ExperimentConfig, corpus: &Corpus) -> Result<Vec<Trial>> {
    if let Some(path) = &cfg.trials.list {
        return read_trials(path);
    }
    let groups = corpus.groups(Split::Test);
    let (all_t, all_n) = pair_counts(&groups);
    make_trials(
        &groups,
        cfg.trials.n_target.unwrap_or(all_t),
        cfg.trials.n_nontarget.unwrap_or(all_n),
        derive_seed(cfg.seed, "trials", 0),
    )
}

/// Embeddings of `utts`, each given with its index in the corpus. Noise is
/// added to the waveform before feature extraction, seeded per utterance
/// index from `noise_seed`. Batches fan out over worker threads.
pub fn embed(
    model: &SpeakerModel,
    frontend: &FrontEnd,
    utts: &[(usize, &Utterance)],
    noise: Option<&NoiseSpec>,
    noise_seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let chunks: Vec<&[(usize, &Utterance)]> = utts.chunks(EMBED_BATCH).collect();
    let workers = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(chunks.len())
        .max(1);
    let run_chunk = |chunk: &[(usize, &Utterance)]| -> Result<Vec<Vec<f64>>> {
        let xs = chunk
            .iter()
            .map(|&(idx, u)| match noise {
                Some(spec) => frontend.features(&add_noise(&u.wave, spec, derive_seed(noise_seed, "noise", idx as u64))?),
                None => frontend.features(&u.wave),
            })
            .collect::<Result<Vec<Tensor>>>()?;
        let refs: Vec<&Tensor> = xs.iter().collect();
        Ok(model.infer(&refs)?.embeddings)
    };
    let results: Vec<Result<Vec<Vec<f64>>>> = if workers == 1 {
        chunks.iter().map(|c| run_chunk(c)).collect()
    } else {
        let mut slots: Vec<Option<Result<Vec<Vec<f64>>>>> = (0..chunks.len()).map(|_| None).collect();
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let chunks = &chunks;
                    let run_chunk = &run_chunk;
                    s.spawn(move || {
                        (w..chunks.len())
                            .step_by(workers)
                            .map(|i| (i, run_chunk(chunks[i])))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                for (i, r) in h.join().expect("embedding worker panicked") {
                    slots[i] = Some(r);
                }
            }
        });
        slots.into_iter().map(|r| r.expect("every chunk ran")).collect()
    };
    let mut out = Vec::with_capacity(utts.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

/// Verification result under one test condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    /// `None` for clean audio.
    pub noise: Option<NoiseSpec>,
    pub eer: f64,
    pub threshold: f64,
    pub n_target: usize,
    pub n_nontarget: usize,
}

/// Short condition label such as `clean` or `gaussian_20db`.
pub fn condition_label(noise: Option<&NoiseSpec>) -> String {
    match noise {
        None => "clean".into(),
        Some(n) => format!("{}_{}db", n.distribution, n.snr_db),
    }
}

/// Embeds every utterance the trials mention and scores them by cosine
/// similarity.
pub fn evaluate(
    cfg: &ExperimentConfig,
    model: &SpeakerModel,
    corpus: &Corpus,
    trials: &[Trial],
    noise: Option<&NoiseSpec>,
) -> Result<(TrialScores, EvalSummary)> {
    let index: HashMap<&str, usize> = corpus
        .utterances
        .iter()
        .enumerate()
        .map(|(i, u)| (u.id.as_str(), i))
        .collect();
    let mut needed: Vec<usize> = Vec::new();
    for t in trials {
        for id in [&t.utt_a, &t.utt_b] {
            let i = *index
                .get(id.as_str())
                .ok_or_else(|| Error::InvalidArgument(format!("trial utterance {id} not in corpus")))?;
            needed.push(i);
        }
    }
    needed.sort_unstable();
    needed.dedup();
    let utts: Vec<(usize, &Utterance)> = needed.iter().map(|&i| (i, &corpus.utterances[i])).collect();
    let embs = embed(model, &cfg.frontend, &utts, noise, cfg.seed)?;
    let by_index: HashMap<usize, &Vec<f64>> = needed.iter().copied().zip(&embs).collect();
    let entries = trials
        .iter()
        .map(|t| {
            let a = by_index[&index[t.utt_a.as_str()]];
            let b = by_index[&index[t.utt_b.as_str()]];
            Ok((t.label, cosine_score(a, b)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let scores = TrialScores::new(entries);
    let (eer, threshold) = compute_eer(&scores)?;
    let n_target = trials.iter().filter(|t| t.label.is_target()).count();
    Ok((
        scores,
        EvalSummary {
            noise: noise.copied(),
            eer,
            threshold,
            n_target,
            n_nontarget: trials.len() - n_target,
        },
    ))
}

/// Clean first, then every distribution at every SNR of the grid.
pub fn sweep_conditions(grid: &NoiseGrid) -> Vec<Option<NoiseSpec>> {
    let mut c = vec![None];
    for &d in &grid.distributions {
        for &s in &grid.snr_db {
            c.push(Some(NoiseSpec::new(d, s)));
        }
    }
    c
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobustnessRow {
    pub model: String,
    /// `None` for the clean condition.
    pub noise: Option<NoiseSpec>,
    pub eer: f64,
}

/// EER change from clean to 20 dB for one model and distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Degradation {
    pub model: String,
    pub distribution: NoiseKind,
    pub clean_eer: f64,
    pub noisy_eer: f64,
    pub delta: f64,
}

pub const DEGRADATION_SNR_DB: f64 = 20.0;

/// Plot label for a model: `baseline` without attention, `fefa-single` or
/// `fefa-multi` otherwise.
pub fn model_label(cfg: &BackboneConfig) -> &'static str {
    match cfg.fefa_mode {
        FefaMode::None => "baseline",
        FefaMode::Single => "fefa-single",
        FefaMode::Multi => "fefa-multi",
    }
}

/// Every model under every condition of the noise grid, plus the clean to
/// 20 dB degradation. Models must differ only in their attention settings.
pub fn robustness(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    trials: &[Trial],
    models: &[(String, &SpeakerModel)],
) -> Result<(Vec<RobustnessRow>, Vec<Degradation>)> {
    if let Some((_, first)) = models.first() {
        let strip = |c: &BackboneConfig| BackboneConfig {
            fefa_bias: true,
            fefa_input_dependent: true,
            ..c.with_fefa(FefaMode::None)
        };
        for (name, m) in &models[1..] {
            if strip(&m.config) != strip(&first.config) {
                return Err(Error::Config(format!(
                    "{name} is not a twin of {}: {} vs {}",
                    models[0].0,
                    serde_json::to_string(&m.config)?,
                    serde_json::to_string(&first.config)?
                )));
            }
        }
    }
    let conditions = sweep_conditions(&cfg.noise);
    let mut rows = Vec::new();
    let mut degradation = Vec::new();
    for (name, model) in models {
        let mut clean = None;
        for noise in &conditions {
            let (_, s) = evaluate(cfg, model, corpus, trials, noise.as_ref())?;
            match noise {
                None => clean = Some(s.eer),
                Some(n) if n.snr_db == DEGRADATION_SNR_DB => {
                    let c = clean.expect("clean runs first");
                    degradation.push(Degradation {
                        model: name.clone(),
                        distribution: n.distribution,
                        clean_eer: c,
                        noisy_eer: s.eer,
                        delta: s.eer - c,
                    });
                }
                Some(_) => {}
            }
            rows.push(RobustnessRow {
                model: name.clone(),
                noise: *noise,
                eer: s.eer,
            });
        }
    }
    Ok((rows, degradation))
}

/// Input-layer attention of one utterance plus what is needed to overlay it.
/// A checkpoint together with the front end it was trained with; older
/// checkpoints without one get the default.
pub fn load_with_frontend(checkpoint: &Path) -> Result<(SpeakerModel, FrontEnd)> {
    let (model, _, meta) = SpeakerModel::load(checkpoint)?;
    let frontend = match meta.get("frontend") {
        Some(v) => serde_json::from_value(v.clone())?,
        None => FrontEnd::default(),
    };
    Ok((model, frontend))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionExport {
    pub map: AttentionMap,
    /// Normalized `[F, T]` network input.
    pub features: Tensor,
    pub bin_hz: Vec<f64>,
}

pub fn export_attention(
    model: &SpeakerModel,
    frontend: &FrontEnd,
    wave: &Waveform,
    noise: Option<(&NoiseSpec, u64)>,
) -> Result<AttentionExport> {
    if model.fefa_layer_count() == 0 {
        return Err(Error::InvalidArgument("checkpoint has no FEFA layer".into()));
    }
    let noisy;
    let wave = match noise {
        Some((spec, seed)) => {
            noisy = add_noise(wave, spec, seed)?;
            &noisy
        }
        None => wave,
    };
    let (features, spec) = frontend.analyze(wave)?;
    let inf = model.infer(&[&features])?;
    let p = inf
        .input_attention
        .and_then(|mut v| v.pop())
        .expect("models with attention have an input layer");
    let pooled = pool_time(&features)?;
    let m = p.iter().zip(&pooled).map(|(p, x)| p * x).collect();
    Ok(AttentionExport {
        map: AttentionMap { p, m },
        bin_hz: (0..spec.bins).map(|i| spec.bin_center_hz(i)).collect(),
        features,
    })
}
