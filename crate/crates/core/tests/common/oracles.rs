//! Slow, obviously-correct reference implementations.

use std::f64::consts::PI;

use fefa::metrics::TrialScores;

/// Magnitudes of bins `0..=nfft/2` of a zero-padded frame by direct
/// summation.
pub fn dft_magnitudes(frame: &[f64], nfft: usize) -> Vec<f64> {
    (0..=nfft / 2)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (n, &x) in frame.iter().enumerate() {
                let a = -2.0 * PI * (k * n % nfft) as f64 / nfft as f64;
                re += x * a.cos();
                im += x * a.sin();
            }
            re.hypot(im)
        })
        .collect()
}

/// Symmetric Hamming window, written out independently.
pub fn hamming(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// Direct magnitude spectrogram `[bins][frames]` by enumeration of frame
/// starts.
pub fn spectrogram(samples: &[f64], win: usize, hop: usize, nfft: usize) -> Vec<Vec<f64>> {
    let w = hamming(win);
    let mut cols = Vec::new();
    let mut start = 0;
    while start + win <= samples.len() {
        let frame: Vec<f64> = samples[start..start + win].iter().zip(&w).map(|(a, b)| a * b).collect();
        cols.push(dft_magnitudes(&frame, nfft));
        start += hop;
    }
    (0..=nfft / 2).map(|k| cols.iter().map(|c| c[k]).collect()).collect()
}

pub struct ConvShape {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

/// Six nested loops (plus batch), zero padding.
pub fn conv2d(x: &[f64], wt: &[f64], s: &ConvShape) -> Vec<f64> {
    let oh = (s.h + 2 * s.pad - s.kh) / s.stride + 1;
    let ow = (s.w + 2 * s.pad - s.kw) / s.stride + 1;
    let mut out = vec![0.0; s.n * s.c_out * oh * ow];
    for b in 0..s.n {
        for co in 0..s.c_out {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..s.c_in {
                        for di in 0..s.kh {
                            for dj in 0..s.kw {
                                let y = (i * s.stride + di) as isize - s.pad as isize;
                                let xx = (j * s.stride + dj) as isize - s.pad as isize;
                                if y < 0 || xx < 0 || y >= s.h as isize || xx >= s.w as isize {
                                    continue;
                                }
                                let xi = ((b * s.c_in + ci) * s.h + y as usize) * s.w + xx as usize;
                                let wi = ((co * s.c_in + ci) * s.kh + di) * s.kw + dj;
                                acc += x[xi] * wt[wi];
                            }
                        }
                    }
                    out[((b * s.c_out + co) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    out
}

/// EER from a sweep of `steps` evenly spaced thresholds spanning the scores:
/// at the threshold minimizing `|FAR - FRR|`, returns `(FAR + FRR) / 2`.
pub fn dense_sweep_eer(scores: &TrialScores, steps: usize) -> f64 {
    let mut tgt: Vec<f64> = Vec::new();
    let mut non: Vec<f64> = Vec::new();
    for (l, s) in &scores.entries {
        if l.is_target() { tgt.push(*s) } else { non.push(*s) }
    }
    tgt.sort_by(f64::total_cmp);
    non.sort_by(f64::total_cmp);
    let lo = tgt[0].min(non[0]);
    let hi = tgt[tgt.len() - 1].max(non[non.len() - 1]);
    let pad = (hi - lo).max(1e-12) * 1e-6;
    let (lo, hi) = (lo - pad, hi + pad);
    let mut best = (f64::INFINITY, 0.0);
    for k in 0..=steps {
        let th = lo + (hi - lo) * k as f64 / steps as f64;
        // accept when score >= th
        let far = (non.len() - non.partition_point(|&s| s < th)) as f64 / non.len() as f64;
        let frr = tgt.partition_point(|&s| s < th) as f64 / tgt.len() as f64;
        let gap = (far - frr).abs();
        if gap < best.0 {
            best = (gap, (far + frr) / 2.0);
        }
    }
    best.1
}
