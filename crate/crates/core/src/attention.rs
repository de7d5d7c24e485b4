//! Fine-grained per-frequency-bin attention.
//!
//! The spectral input is averaged over time, each pooled bin value is passed
//! through its own private weight (a locally connected single-layer kernel
//! with no cross-bin connections), and a softmax over bins turns the logits
//! into probabilities `p`. Every row of the input is then scaled by its bin's
//! probability:
//!
//! ```text
//! pooled_i = mean_t X[i, t]
//! logit_i  = W_i * pooled_i + b_i        (input-dependent kernel, default)
//! logit_i  = W_i + b_i                   (index-only kernel)
//! p_i      = exp(logit_i) / sum_j exp(logit_j)
//! X'[i, t] = p_i * X[i, t]
//! ```
//!
//! Probabilities are used raw. With `W = 0, b = 0` the layer reduces to an
//! exact uniform rescale `X' = X / F`, so a freshly initialized layer is a
//! rescaled identity.
//!
//! On hidden maps `[C, F', T']` the pooled vector averages over channels and
//! time, and `p` multiplies every channel at a given frequency index.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// The learnable kernel of one attention layer plus the probabilities from
/// its most recent forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct FefaLayer {
    pub weight: Vec<f64>,
    pub bias: Option<Vec<f64>>,
    /// `false` selects the index-only kernel `logit_i = W_i + b_i`.
    pub input_dependent: bool,
    last_p: Option<Vec<f64>>,
}

/// Per-bin probabilities and the attention map `m_i = p_i * pooled_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub p: Vec<f64>,
    pub m: Vec<f64>,
}

impl FefaLayer {
    /// Zero-initialized layer over `bins` frequency bins.
    pub fn new(bins: usize, bias: bool, input_dependent: bool) -> Self {
        FefaLayer {
            weight: vec![0.0; bins],
            bias: bias.then(|| vec![0.0; bins]),
            input_dependent,
            last_p: None,
        }
    }

    pub fn from_params(weight: Vec<f64>, bias: Option<Vec<f64>>, input_dependent: bool) -> Self {
        FefaLayer {
            weight,
            bias,
            input_dependent,
            last_p: None,
        }
    }

    pub fn bins(&self) -> usize {
        self.weight.len()
    }

    pub fn parameter_count(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, Vec::len)
    }

    /// Probabilities computed by the last [`FefaLayer::forward`] or
    /// [`FefaLayer::forward_hidden`] call.
    pub fn last_p(&self) -> Option<&[f64]> {
        self.last_p.as_deref()
    }

    /// Attends an `[F, T]` spectrogram and records `p`.
    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let (y, map) = self.attend(x)?;
        self.last_p = Some(map.p);
        Ok(y)
    }

    /// Like [`FefaLayer::forward`] but returns the map instead of storing it,
    /// so a shared layer can be used from several threads.
    pub fn attend(&self, x: &Tensor) -> Result<(Tensor, AttentionMap)> {
        let [f, t] = *x.shape() else {
            return Err(Error::InvalidArgument(format!(
                "attention expects an [F, T] matrix, got {:?}",
                x.shape()
            )));
        };
        self.attend_dims(x, (1, f, t))
    }

    /// Attends a hidden `[C, F', T']` map and records `p`.
    pub fn forward_hidden(&mut self, h: &Tensor) -> Result<Tensor> {
        let (y, map) = self.attend_hidden(h)?;
        self.last_p = Some(map.p);
        Ok(y)
    }

    pub fn attend_hidden(&self, h: &Tensor) -> Result<(Tensor, AttentionMap)> {
        let [c, f, t] = *h.shape() else {
            return Err(Error::InvalidArgument(format!(
                "hidden attention expects a [C, F, T] map, got {:?}",
                h.shape()
            )));
        };
        self.attend_dims(h, (c, f, t))
    }

    fn attend_dims(&self, x: &Tensor, dims: (usize, usize, usize)) -> Result<(Tensor, AttentionMap)> {
        let (c, f, t) = dims;
        if c == 0 || t == 0 || f == 0 {
            return Err(Error::InvalidArgument("attention on an empty map".into()));
        }
        if f != self.bins() {
            return Err(Error::shape("attention bins", &[f], &[self.bins()]));
        }
        let (y, pooled, p) = attend_sample(
            x.data(),
            dims,
            &self.weight,
            self.bias.as_deref(),
            self.input_dependent,
        );
        let m = p.iter().zip(&pooled).map(|(p, x)| p * x).collect();
        Ok((Tensor::from_parts(x.shape().to_vec(), y), AttentionMap { p, m }))
    }
}

/// Mean over time of an `[F, T]` matrix.
pub fn pool_time(x: &Tensor) -> Result<Vec<f64>> {
    match *x.shape() {
        [f, t] if f > 0 && t > 0 => Ok(x
            .data()
            .chunks(t)
            .map(|row| row.iter().sum::<f64>() / t as f64)
            .collect()),
        _ => Err(Error::InvalidArgument(format!(
            "cannot pool an empty or non-2-D matrix {:?}",
            x.shape()
        ))),
    }
}

/// Kernel logits for a pooled vector.
pub fn bin_logits(pooled: &[f64], layer: &FefaLayer) -> Result<Vec<f64>> {
    if pooled.len() != layer.bins() {
        return Err(Error::shape("bin_logits", &[pooled.len()], &[layer.bins()]));
    }
    Ok(logits(
        pooled,
        &layer.weight,
        layer.bias.as_deref(),
        layer.input_dependent,
    ))
}

/// Max-subtracted softmax.
pub fn softmax_bins(logits: &[f64]) -> Vec<f64> {
    let (e, z) = exp_shifted(logits);
    e.iter().map(|v| v / z).collect()
}

fn logits(pooled: &[f64], w: &[f64], b: Option<&[f64]>, input_dependent: bool) -> Vec<f64> {
    pooled
        .iter()
        .zip(w)
        .enumerate()
        .map(|(i, (x, w))| {
            let base = if input_dependent { w * x } else { *w };
            base + b.map_or(0.0, |b| b[i])
        })
        .collect()
}

fn exp_shifted(logits: &[f64]) -> (Vec<f64>, f64) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let z = e.iter().sum();
    (e, z)
}

/// Forward for one `[C, F, T]` sample. Returns `(y, pooled, p)`.
///
/// `y` is formed as `x * e_i / Z` rather than `x * p_i` so that the uniform
/// case divides by exactly `F`.
pub(crate) fn attend_sample(
    x: &[f64],
    (c, f, t): (usize, usize, usize),
    w: &[f64],
    b: Option<&[f64]>,
    input_dependent: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let norm = (c * t) as f64;
    let mut pooled = vec![0.0; f];
    for ch in 0..c {
        for (i, acc) in pooled.iter_mut().enumerate() {
            let off = (ch * f + i) * t;
            *acc += x[off..off + t].iter().sum::<f64>();
        }
    }
    pooled.iter_mut().for_each(|v| *v /= norm);
    let (e, z) = exp_shifted(&logits(&pooled, w, b, input_dependent));
    let p: Vec<f64> = e.iter().map(|v| v / z).collect();
    let mut y = Vec::with_capacity(x.len());
    for ch in 0..c {
        for i in 0..f {
            let off = (ch * f + i) * t;
            y.extend(x[off..off + t].iter().map(|v| v * e[i] / z));
        }
    }
    (y, pooled, p)
}

/// Backward for one sample given upstream gradient `g`. Returns
/// `(dx, dW, dlogits)`; the bias gradient equals `dlogits`.
pub(crate) fn attend_sample_backward(
    x: &[f64],
    g: &[f64],
    (c, f, t): (usize, usize, usize),
    w: &[f64],
    pooled: &[f64],
    p: &[f64],
    input_dependent: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    // dL/dp_i = sum over channels and time of g * x
    let mut gp = vec![0.0; f];
    for ch in 0..c {
        for (i, acc) in gp.iter_mut().enumerate() {
            let off = (ch * f + i) * t;
            *acc += x[off..off + t]
                .iter()
                .zip(&g[off..off + t])
                .map(|(a, b)| a * b)
                .sum::<f64>();
        }
    }
    let mix: f64 = p.iter().zip(&gp).map(|(a, b)| a * b).sum();
    let dz: Vec<f64> = p.iter().zip(&gp).map(|(p, gp)| p * (gp - mix)).collect();
    let dw: Vec<f64> = if input_dependent {
        dz.iter().zip(pooled).map(|(d, x)| d * x).collect()
    } else {
        dz.clone()
    };
    let norm = (c * t) as f64;
    let mut dx = Vec::with_capacity(x.len());
    for ch in 0..c {
        for i in 0..f {
            let off = (ch * f + i) * t;
            let through_pool = if input_dependent { dz[i] * w[i] / norm } else { 0.0 };
            dx.extend(g[off..off + t].iter().map(|gv| gv * p[i] + through_pool));
        }
    }
    (dx, dw, dz)
}

/// Writes `bin_index,center_frequency_hz,p,m` rows. Values use the shortest
/// representation that round-trips exactly.
pub fn write_attention_csv(
    path: impl AsRef<Path>,
    map: &AttentionMap,
    bin_hz: impl Fn(usize) -> f64,
) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("bin_index,center_frequency_hz,p,m\n");
    for (i, (p, m)) in map.p.iter().zip(&map.m).enumerate() {
        writeln!(out, "{i},{},{p:e},{m:e}", bin_hz(i)).unwrap();
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a file produced by [`write_attention_csv`], returning the map and
/// the center frequencies.
pub fn read_attention_csv(path: impl AsRef<Path>) -> Result<(AttentionMap, Vec<f64>)> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some("bin_index,center_frequency_hz,p,m") {
        return Err(Error::InvalidArgument(format!(
            "{}: missing attention CSV header",
            path.display()
        )));
    }
    let (mut p, mut m, mut hz) = (Vec::new(), Vec::new(), Vec::new());
    for (row, line) in lines.filter(|l| !l.is_empty()).enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        let bad = || Error::InvalidArgument(format!("{}: bad row {line:?}", path.display()));
        if fields.len() != 4 || fields[0].parse::<usize>().ok() != Some(row) {
            return Err(bad());
        }
        hz.push(fields[1].parse().map_err(|_| bad())?);
        p.push(fields[2].parse().map_err(|_| bad())?);
        m.push(fields[3].parse().map_err(|_| bad())?);
    }
    Ok((AttentionMap { p, m }, hz))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(f: usize, t: usize, data: Vec<f64>) -> Tensor {
        Tensor::new(vec![f, t], data).unwrap()
    }

    #[test]
    fn pool_time_examples() {
        assert_eq!(pool_time(&mat(2, 2, vec![1.0, 3.0, 2.0, 2.0])).unwrap(), vec![2.0, 2.0]);
        assert_eq!(pool_time(&mat(3, 1, vec![4.0, 5.0, 6.0])).unwrap(), vec![4.0, 5.0, 6.0]);
        assert!(pool_time(&Tensor::zeros(&[0, 3])).is_err());
        assert!(pool_time(&Tensor::zeros(&[3, 0])).is_err());
    }

    #[test]
    fn logits_examples() {
        let mut layer = FefaLayer::new(2, true, true);
        assert_eq!(bin_logits(&[1.0, 2.0], &layer).unwrap(), vec![0.0, 0.0]);
        layer.weight = vec![3.0, 0.5];
        assert_eq!(bin_logits(&[1.0, 2.0], &layer).unwrap(), vec![3.0, 1.0]);
        assert!(bin_logits(&[1.0], &layer).is_err());

        let mut literal = FefaLayer::new(2, true, false);
        literal.weight = vec![3.0, 0.5];
        literal.bias = Some(vec![1.0, 1.0]);
        assert_eq!(bin_logits(&[100.0, -7.0], &literal).unwrap(), vec![4.0, 1.5]);
    }

    #[test]
    fn softmax_examples() {
        let p = softmax_bins(&[0.0, 2f64.ln()]);
        assert!((p[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((p[1] - 2.0 / 3.0).abs() < 1e-15);
        let u = softmax_bins(&[0.7; 257]);
        assert!(u.iter().all(|&v| v == 1.0 / 257.0));
        let big = softmax_bins(&[1e6, 1e6 - 1.0]);
        assert!(big.iter().all(|v| v.is_finite()));
        assert!((big[1] / big[0] - (-1f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn zero_kernel_is_exact_uniform_rescale() {
        let x = mat(3, 2, vec![1.0, -2.0, 0.3, 7.0, 1e-3, 5.5]);
        let mut layer = FefaLayer::new(3, true, true);
        let y = layer.forward(&x).unwrap();
        let expected: Vec<f64> = x.data().iter().map(|v| v / 3.0).collect();
        assert_eq!(y.data(), &expected[..]);
        assert_eq!(layer.last_p().unwrap(), &[1.0 / 3.0; 3]);
    }

    #[test]
    fn hidden_single_channel_matches_matrix_path() {
        let data: Vec<f64> = (0..12).map(|i| (i as f64 * 0.7).sin()).collect();
        let mut layer = FefaLayer::new(4, true, true);
        layer.weight = vec![0.3, -1.0, 2.0, 0.1];
        layer.bias = Some(vec![0.0, 0.5, -0.5, 0.2]);
        let (a, ma) = layer.attend(&mat(4, 3, data.clone())).unwrap();
        let (b, mb) = layer
            .attend_hidden(&Tensor::new(vec![1, 4, 3], data).unwrap())
            .unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(ma, mb);
    }

    #[test]
    fn wrong_bin_count_errors() {
        let layer = FefaLayer::new(5, false, true);
        assert!(layer.attend(&Tensor::zeros(&[4, 3])).is_err());
        assert!(layer.attend_hidden(&Tensor::zeros(&[2, 4, 3])).is_err());
        assert_eq!(layer.parameter_count(), 5);
        assert_eq!(FefaLayer::new(257, true, true).parameter_count(), 514);
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("att.csv");
        let map = AttentionMap {
            p: softmax_bins(&[0.1, 0.5, -0.3]),
            m: vec![0.01, -0.2, 1.0 / 7.0],
        };
        write_attention_csv(&path, &map, |i| i as f64 * 31.25).unwrap();
        let (back, hz) = read_attention_csv(&path).unwrap();
        assert_eq!(back, map);
        assert_eq!(hz, vec![0.0, 31.25, 62.5]);
    }
}
