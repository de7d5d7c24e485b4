use rand::seq::SliceRandom;

use super::model::{stack_inputs, SpeakerModel};
use crate::error::{Error, Result};
use crate::rng::substream;
use crate::tensor::{Adam, Graph, Tensor};

/// A normalized `[F, T]` feature matrix and its speaker index.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub features: Tensor,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    /// Mean cross-entropy over all samples seen this epoch.
    pub loss: f64,
    /// Fraction of samples whose training-mode logits ranked the label first.
    pub accuracy: f64,
}

/// Index of the largest value, first one on ties.
pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

pub fn accuracy(logits: &[Vec<f64>], labels: &[usize]) -> f64 {
    let hits = logits.iter().zip(labels).filter(|(l, &y)| argmax(l) == y).count();
    hits as f64 / labels.len().max(1) as f64
}

/// One pass over `data` in a seeded shuffled order, one Adam step per batch.
/// The order depends only on `(seed, epoch)`, so a resumed run reproduces an
/// uninterrupted one.
pub fn train_epoch(
    model: &mut SpeakerModel,
    adam: &mut Adam,
    data: &[Example],
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<EpochStats> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be positive".into()));
    }
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    if let Some(bad) = data.iter().find(|e| e.label >= model.n_speakers) {
        return Err(Error::InvalidArgument(format!(
            "label {} out of range for {} speakers",
            bad.label, model.n_speakers
        )));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut substream(seed, "batching", epoch));

    let (mut loss_sum, mut hits) = (0.0, 0usize);
    for batch in order.chunks(batch_size) {
        let xs: Vec<&Tensor> = batch.iter().map(|&i| &data[i].features).collect();
        let labels: Vec<usize> = batch.iter().map(|&i| data[i].label).collect();
        let mut g = Graph::new();
        let x = g.input(stack_inputs(&xs)?);
        let out = model.forward(&mut g, x, true)?;
        let loss = g.softmax_cross_entropy(out.logits, &labels)?;
        loss_sum += g.value(loss).item() * batch.len() as f64;
        let k = model.n_speakers;
        hits += g
            .value(out.logits)
            .data()
            .chunks(k)
            .zip(&labels)
            .filter(|(row, &y)| argmax(row) == y)
            .count();
        model.store.zero_grad();
        g.backward(loss, &mut model.store)?;
        adam.step(&mut model.store);
        model.apply_bn_updates(out);
    }
    Ok(EpochStats {
        loss: loss_sum / data.len() as f64,
        accuracy: hits as f64 / data.len() as f64,
    })
}
