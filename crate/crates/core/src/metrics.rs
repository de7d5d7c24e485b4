//! Verification scoring: cosine similarity, EER and DET points, trial lists.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::substream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TrialLabel {
    Target,
    NonTarget,
}

impl TrialLabel {
    pub fn is_target(self) -> bool {
        self == TrialLabel::Target
    }

    fn as_digit(self) -> u8 {
        match self {
            TrialLabel::Target => 1,
            TrialLabel::NonTarget => 0,
        }
    }

    fn from_digit(s: &str) -> Option<Self> {
        match s {
            "1" => Some(TrialLabel::Target),
            "0" => Some(TrialLabel::NonTarget),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trial {
    pub label: TrialLabel,
    pub utt_a: String,
    pub utt_b: String,
}

/// Labelled similarity scores.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrialScores {
    pub entries: Vec<(TrialLabel, f64)>,
}

impl TrialScores {
    pub fn new(entries: Vec<(TrialLabel, f64)>) -> Self {
        TrialScores { entries }
    }

    pub fn from_split(targets: &[f64], nontargets: &[f64]) -> Self {
        let entries = targets
            .iter()
            .map(|&s| (TrialLabel::Target, s))
            .chain(nontargets.iter().map(|&s| (TrialLabel::NonTarget, s)))
            .collect();
        TrialScores { entries }
    }

    fn counts(&self) -> (usize, usize) {
        let t = self.entries.iter().filter(|(l, _)| l.is_target()).count();
        (t, self.entries.len() - t)
    }
}

pub fn cosine_score(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine_score", &[a.len()], &[b.len()]));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::InvalidArgument("cosine of a zero vector".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// One operating point. Scores `>= threshold` are accepted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetPoint {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

/// Operating points at every distinct score, followed by the
/// `threshold = +inf` point `(FAR 0, FRR 1)`. FAR is non-increasing and FRR
/// non-decreasing along the list.
pub fn det_points(scores: &TrialScores) -> Result<Vec<DetPoint>> {
    let (n_t, n_n) = scores.counts();
    if n_t == 0 || n_n == 0 {
        return Err(Error::EerUndefined("need both target and nontarget trials"));
    }
    if scores.entries.iter().any(|(_, s)| !s.is_finite()) {
        return Err(Error::InvalidArgument("non-finite score".into()));
    }
    let mut sorted: Vec<(f64, bool)> = scores
        .entries
        .iter()
        .map(|(l, s)| (*s, l.is_target()))
        .collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut points = Vec::new();
    // Everything at or above the current threshold is accepted.
    let (mut rejected_t, mut rejected_n) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let threshold = sorted[i].0;
        points.push(DetPoint {
            threshold,
            far: (n_n - rejected_n) as f64 / n_n as f64,
            frr: rejected_t as f64 / n_t as f64,
        });
        while i < sorted.len() && sorted[i].0 == threshold {
            if sorted[i].1 {
                rejected_t += 1;
            } else {
                rejected_n += 1;
            }
            i += 1;
        }
    }
    points.push(DetPoint {
        threshold: f64::INFINITY,
        far: 0.0,
        frr: 1.0,
    });
    Ok(points)
}

/// Equal error rate and the threshold where it occurs, by linear
/// interpolation between the adjacent operating points where `FAR - FRR`
/// changes sign.
pub fn compute_eer(scores: &TrialScores) -> Result<(f64, f64)> {
    let points = det_points(scores)?;
    let diff = |p: &DetPoint| p.far - p.frr;
    // The first point always has FAR = 1, FRR = 0 and the last FAR = 0, FRR = 1.
    let k = points
        .iter()
        .position(|p| diff(p) <= 0.0)
        .expect("last point has FAR - FRR = -1");
    let cur = points[k];
    if diff(&cur) == 0.0 {
        return Ok((cur.far, cur.threshold));
    }
    let prev = points[k - 1];
    let alpha = diff(&prev) / (diff(&prev) - diff(&cur));
    let eer = prev.far + alpha * (cur.far - prev.far);
    let threshold = if cur.threshold.is_finite() {
        prev.threshold + alpha * (cur.threshold - prev.threshold)
    } else {
        prev.threshold
    };
    Ok((eer, threshold))
}

/// Samples target and nontarget pairs without replacement. `groups[s]` lists
/// the utterance ids of speaker `s`.
pub fn make_trials(
    groups: &[Vec<String>],
    n_target: usize,
    n_nontarget: usize,
    seed: u64,
) -> Result<Vec<Trial>> {
    if groups.len() < 2 || groups.iter().any(|g| g.len() < 2) {
        return Err(Error::InvalidArgument(
            "trials need at least 2 speakers with at least 2 utterances each".into(),
        ));
    }
    let mut targets = Vec::new();
    let mut nontargets = Vec::new();
    for (s, g) in groups.iter().enumerate() {
        for i in 0..g.len() {
            for j in i + 1..g.len() {
                targets.push((s, i, s, j));
            }
            for (s2, g2) in groups.iter().enumerate().skip(s + 1) {
                for j in 0..g2.len() {
                    nontargets.push((s, i, s2, j));
                }
            }
        }
    }
    if n_target > targets.len() || n_nontarget > nontargets.len() {
        return Err(Error::InvalidArgument(format!(
            "requested {n_target} target / {n_nontarget} nontarget trials but only {} / {} pairs exist",
            targets.len(),
            nontargets.len()
        )));
    }
    let mut rng = substream(seed, "trials", 0);
    targets.shuffle(&mut rng);
    nontargets.shuffle(&mut rng);
    let mk = |label, &(s, i, s2, j): &(usize, usize, usize, usize)| Trial {
        label,
        utt_a: groups[s][i].clone(),
        utt_b: groups[s2][j].clone(),
    };
    Ok(targets[..n_target]
        .iter()
        .map(|p| mk(TrialLabel::Target, p))
        .chain(nontargets[..n_nontarget].iter().map(|p| mk(TrialLabel::NonTarget, p)))
        .collect())
}

/// One trial per line: `label utt_a utt_b`, label 1 for target and 0 otherwise.
pub fn write_trials(path: impl AsRef<Path>, trials: &[Trial]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for t in trials {
        writeln!(out, "{} {} {}", t.label.as_digit(), t.utt_a, t.utt_b).unwrap();
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_trials(path: impl AsRef<Path>) -> Result<Vec<Trial>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(n, line)| {
            let f: Vec<&str> = line.split_whitespace().collect();
            match f[..] {
                [l, a, b] => TrialLabel::from_digit(l).map(|label| Trial {
                    label,
                    utt_a: a.to_string(),
                    utt_b: b.to_string(),
                }),
                _ => None,
            }
            .ok_or_else(|| {
                Error::InvalidArgument(format!("{}:{}: bad trial line {line:?}", path.display(), n + 1))
            })
        })
        .collect()
}

/// `label,score` CSV with a header row.
pub fn write_scores_csv(path: impl AsRef<Path>, scores: &TrialScores) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("label,score\n");
    for (l, s) in &scores.entries {
        writeln!(out, "{},{s:e}", l.as_digit()).unwrap();
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_scores_csv(path: impl AsRef<Path>) -> Result<TrialScores> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some("label,score") {
        return Err(Error::InvalidArgument(format!("{}: missing header", path.display())));
    }
    let entries = lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let (l, s) = line.split_once(',').unwrap_or((line, ""));
            match (TrialLabel::from_digit(l), s.parse::<f64>()) {
                (Some(l), Ok(s)) => Ok((l, s)),
                _ => Err(Error::InvalidArgument(format!(
                    "{}: bad score row {line:?}",
                    path.display()
                ))),
            }
        })
        .collect::<Result<_>>()?;
    Ok(TrialScores { entries })
}
