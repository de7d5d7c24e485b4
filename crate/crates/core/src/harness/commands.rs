//! File-producing wrappers used by the command line.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{
    condition_label, evaluate, export_attention, load_corpus, load_for_config, load_with_frontend,
    model_label,
    robustness, train, trial_list, AttentionExport, Degradation, EvalSummary, ExperimentConfig,
    RobustnessRow, TrainOutcome,
};
use crate::attention::write_attention_csv;
use crate::audio::{read_wav, write_matrix_csv, NoiseKind, NoiseSpec};
use crate::backbone::{BackboneConfig, SpeakerModel};
use crate::error::{Error, Result};
use crate::metrics::{write_scores_csv, write_trials};
use crate::synth::{Corpus, CorpusManifest};

pub const TRIALS_FILE: &str = "trials.txt";
pub const EVAL_SUMMARY: &str = "eval_summary.json";
pub const ROBUSTNESS_CSV: &str = "robustness.csv";
pub const DEGRADATION_CSV: &str = "degradation.csv";
pub const ATTENTION_CSV: &str = "attention.csv";
pub const SPECTROGRAM_CSV: &str = "spectrogram.csv";
const CONFIG_COPY: &str = "config.json";

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: PathBuf, text: &str) -> Result<()> {
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Synthesizes the configured corpus into `out` with its trial list.
pub fn cmd_synth_corpus(cfg: &ExperimentConfig, out: &Path) -> Result<CorpusManifest> {
    let corpus = Corpus::build(&cfg.corpus_spec())?;
    let manifest = corpus.write(out)?;
    write_trials(out.join(TRIALS_FILE), &trial_list(cfg, &corpus)?)?;
    Ok(manifest)
}

/// Trains into `out/checkpoint` and `out/train_log.jsonl`.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path, resume: Option<&Path>) -> Result<TrainOutcome> {
    ensure_dir(out)?;
    write_text(out.join(CONFIG_COPY), &cfg.to_json())?;
    let corpus = load_corpus(cfg)?;
    train(cfg, &corpus, Some(out), resume)
}

/// Scores the trial list under each condition. Writes
/// `scores_<condition>.csv` per condition, the trial list, and a JSON array
/// of [`EvalSummary`].
pub fn cmd_evaluate(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    conditions: &[Option<NoiseSpec>],
    out: &Path,
) -> Result<Vec<EvalSummary>> {
    let model = load_for_config(cfg, checkpoint)?;
    let corpus = load_corpus(cfg)?;
    let trials = trial_list(cfg, &corpus)?;
    ensure_dir(out)?;
    write_trials(out.join(TRIALS_FILE), &trials)?;
    let mut summaries = Vec::new();
    for noise in conditions {
        let (scores, summary) = evaluate(cfg, &model, &corpus, &trials, noise.as_ref())?;
        write_scores_csv(out.join(format!("scores_{}.csv", condition_label(noise.as_ref()))), &scores)?;
        summaries.push(summary);
    }
    write_text(out.join(EVAL_SUMMARY), &serde_json::to_string_pretty(&summaries)?)?;
    Ok(summaries)
}

/// Runs [`robustness`] over checkpoints and writes the EER table and the
/// degradation table.
pub fn cmd_robustness(
    cfg: &ExperimentConfig,
    checkpoints: &[PathBuf],
    out: &Path,
) -> Result<(Vec<RobustnessRow>, Vec<Degradation>)> {
    if checkpoints.len() < 2 {
        return Err(Error::InvalidArgument(
            "robustness needs a baseline and a FEFA checkpoint".into(),
        ));
    }
    let mut models: Vec<SpeakerModel> = Vec::new();
    for c in checkpoints {
        let (m, _, _) = SpeakerModel::load(c)?;
        let expected = cfg.model.with_fefa(m.config.fefa_mode);
        super::check_architecture(&m.config, &BackboneConfig {
            fefa_bias: m.config.fefa_bias,
            fefa_input_dependent: m.config.fefa_input_dependent,
            ..expected
        })?;
        models.push(m);
    }
    let mut named: Vec<(String, &SpeakerModel)> = Vec::new();
    for m in &models {
        let base = model_label(&m.config).to_string();
        let n = named.iter().filter(|(l, _)| l.starts_with(&base)).count();
        let label = if n == 0 { base } else { format!("{base}-{}", n + 1) };
        named.push((label, m));
    }
    let corpus = load_corpus(cfg)?;
    let trials = trial_list(cfg, &corpus)?;
    let (rows, degradation) = robustness(cfg, &corpus, &trials, &named)?;
    ensure_dir(out)?;
    write_robustness_csv(out.join(ROBUSTNESS_CSV), &rows)?;
    let mut text = String::from("model,distribution,clean_eer,noisy_eer,delta\n");
    for d in &degradation {
        writeln!(text, "{},{},{:e},{:e},{:e}", d.model, d.distribution, d.clean_eer, d.noisy_eer, d.delta).unwrap();
    }
    write_text(out.join(DEGRADATION_CSV), &text)?;
    Ok((rows, degradation))
}

/// `model,distribution,snr_db,eer`; the clean condition is written as
/// distribution `none`, SNR `clean`.
pub fn write_robustness_csv(path: impl AsRef<Path>, rows: &[RobustnessRow]) -> Result<()> {
    let mut text = String::from("model,distribution,snr_db,eer\n");
    for r in rows {
        match &r.noise {
            None => writeln!(text, "{},none,clean,{:e}", r.model, r.eer),
            Some(n) => writeln!(text, "{},{},{},{:e}", r.model, n.distribution, n.snr_db, r.eer),
        }
        .unwrap();
    }
    write_text(path.as_ref().to_path_buf(), &text)
}

pub fn read_robustness_csv(path: impl AsRef<Path>) -> Result<Vec<RobustnessRow>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some("model,distribution,snr_db,eer") {
        return Err(Error::InvalidArgument(format!("{}: missing header", path.display())));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let bad = || Error::InvalidArgument(format!("{}: bad row {line:?}", path.display()));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(bad());
            }
            let noise = match (f[1], f[2]) {
                ("none", "clean") => None,
                (d, s) => Some(NoiseSpec::new(
                    d.parse::<NoiseKind>().map_err(|_| bad())?,
                    s.parse().map_err(|_| bad())?,
                )),
            };
            Ok(RobustnessRow {
                model: f[0].to_string(),
                noise,
                eer: f[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Writes the input-layer attention CSV and the normalized spectrogram CSV
/// for one WAV file. The front end comes from the checkpoint.
pub fn cmd_export_attention(
    checkpoint: &Path,
    wav: &Path,
    noise: Option<&NoiseSpec>,
    seed: u64,
    out: &Path,
) -> Result<AttentionExport> {
    let (model, frontend) = load_with_frontend(checkpoint)?;
    let wave = read_wav(wav)?;
    let export = export_attention(&model, &frontend, &wave, noise.map(|n| (n, seed)))?;
    ensure_dir(out)?;
    let hz = &export.bin_hz;
    write_attention_csv(out.join(ATTENTION_CSV), &export.map, |i| hz[i])?;
    write_matrix_csv(out.join(SPECTROGRAM_CSV), &export.features)?;
    Ok(export)
}
