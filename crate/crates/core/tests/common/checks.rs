//! Whole-criterion checks. Each returns `Ok(summary)` or `Err(detail)`.

use fefa::attention::{bin_logits, softmax_bins, FefaLayer};
use fefa::audio::{
    add_noise_components, measured_snr_db, spectrogram, FrameConfig, NoiseKind, NoiseSpec, Waveform,
};
use fefa::backbone::{BackboneConfig, Family, FefaMode, SpeakerModel};
use fefa::metrics::{compute_eer, TrialLabel, TrialScores};
use fefa::synth::{sample_profile, synth_utterance};
use fefa::tensor::{Graph, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::oracles;

pub type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond { Ok(()) } else { Err(msg()) }
}

fn normal_tensor(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect::<Vec<f64>>();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn normal_vec(n: usize, scale: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Normalization, positivity, shift invariance, permutation equivariance and
/// the zero-kernel identity on `n` random inputs.
pub fn attention_invariants(n: usize, seed: u64) -> Check {
    attention_invariants_at(n, seed, None)
}

/// As [`attention_invariants`], with every input at `bins` rows when given.
pub fn attention_invariants_at(n: usize, seed: u64, bins: Option<usize>) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst_sum = 0.0f64;
    let mut worst_shift = 0.0f64;
    let mut worst_perm = 0.0f64;
    for case in 0..n {
        let f = bins.unwrap_or_else(|| if case % 4 == 0 { 257 } else { rng.random_range(2..300) });
        let t = rng.random_range(1..60);
        let x = normal_tensor(&[f, t], rng.random_range(0.1..5.0), &mut rng);
        let input_dependent = case % 3 != 0;
        let layer = FefaLayer::from_params(
            normal_vec(f, 2.0, &mut rng),
            (case % 5 != 0).then(|| normal_vec(f, 2.0, &mut rng)),
            input_dependent,
        );
        let (y, map) = layer.attend(&x).map_err(|e| e.to_string())?;
        let sum: f64 = map.p.iter().sum();
        worst_sum = worst_sum.max((sum - 1.0).abs());
        ensure((sum - 1.0).abs() <= 1e-9, || format!("case {case}: sum p = {sum}"))?;
        ensure(map.p.iter().all(|&p| p > 0.0), || format!("case {case}: non-positive p"))?;

        let pooled = fefa::attention::pool_time(&x).unwrap();
        let logits = bin_logits(&pooled, &layer).unwrap();
        let c: f64 = rng.random_range(-100.0..100.0);
        let shifted = softmax_bins(&logits.iter().map(|l| l + c).collect::<Vec<_>>());
        let d = shifted.iter().zip(&map.p).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst_shift = worst_shift.max(d);
        ensure(d < 1e-12, || format!("case {case}: shift changed p by {d:e}"))?;

        let mut perm: Vec<usize> = (0..f).collect();
        perm.shuffle(&mut rng);
        let px = Tensor::new(
            vec![f, t],
            perm.iter().flat_map(|&i| x.data()[i * t..(i + 1) * t].to_vec()).collect(),
        )
        .unwrap();
        let pl = FefaLayer::from_params(
            perm.iter().map(|&i| layer.weight[i]).collect(),
            layer.bias.as_ref().map(|b| perm.iter().map(|&i| b[i]).collect()),
            input_dependent,
        );
        let (py, _) = pl.attend(&px).unwrap();
        let scale = y.data().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
        for (k, &i) in perm.iter().enumerate() {
            for j in 0..t {
                let d = (py.data()[k * t + j] - y.data()[i * t + j]).abs() / scale;
                worst_perm = worst_perm.max(d);
            }
        }
        ensure(worst_perm < 1e-12, || format!("case {case}: permutation mismatch {worst_perm:e}"))?;

        let zero = FefaLayer::new(f, true, input_dependent);
        let (z, _) = zero.attend(&x).unwrap();
        let fl = f as f64;
        ensure(z.data().iter().zip(x.data()).all(|(a, b)| *a == b / fl), || {
            format!("case {case}: W = 0 output is not exactly X / F")
        })?;
    }
    Ok(format!(
        "{n} inputs; max |sum p - 1| {worst_sum:.1e}, shift {worst_shift:.1e}, permutation {worst_perm:.1e}"
    ))
}

/// Parameter deltas of the input attention layer and the uniform-attention
/// twin equivalence for every family, in eval and train mode.
pub fn structural_fidelity() -> Check {
    let base = BackboneConfig::new(Family::Resnet, FefaMode::None);
    let none = SpeakerModel::build(&base, 10, 0).unwrap().parameter_count();
    let single = SpeakerModel::build(&base.with_fefa(FefaMode::Single), 10, 0)
        .unwrap()
        .parameter_count();
    let no_bias = SpeakerModel::build(
        &BackboneConfig {
            fefa_bias: false,
            ..base.with_fefa(FefaMode::Single)
        },
        10,
        0,
    )
    .unwrap()
    .parameter_count();
    ensure(single - none == 514, || format!("delta with bias {}", single - none))?;
    ensure(no_bias - none == 257, || format!("delta without bias {}", no_bias - none))?;

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for family in [Family::Vgg, Family::Resnet, Family::Seresnet] {
        let mut cfg = BackboneConfig::new(family, FefaMode::Single);
        cfg.channel_widths = vec![4, 8, 8];
        cfg.embedding_dim = 16;
        let with = SpeakerModel::build(&cfg, 5, 7).unwrap();
        let without = SpeakerModel::build(&cfg.with_fefa(FefaMode::None), 5, 7).unwrap();
        let x = normal_tensor(&[3, 1, 257, 20], 1.0, &mut rng);
        let xf = x.map(|v| v / 257.0);
        for train in [false, true] {
            let mut g = Graph::new();
            let a_in = g.input(x.clone());
            let a = with.forward(&mut g, a_in, train).unwrap();
            let b_in = g.input(xf.clone());
            let b = without.forward(&mut g, b_in, train).unwrap();
            ensure(g.value(a.logits) == g.value(b.logits), || {
                format!("{family:?} train={train}: logits differ")
            })?;
            ensure(g.value(a.embedding) == g.value(b.embedding), || {
                format!("{family:?} train={train}: embeddings differ")
            })?;
        }
    }
    Ok("delta 514 / 257; twins bit-identical for vgg, resnet, seresnet".into())
}

pub fn random_scores(rng: &mut ChaCha8Rng, n_total: usize) -> TrialScores {
    let n_t = rng.random_range(n_total / 4..3 * n_total / 4);
    let shift: f64 = rng.random_range(0.0..3.0);
    let spread: f64 = rng.random_range(0.5..2.0);
    let tgt = Normal::new(shift, spread).unwrap();
    let non = Normal::new(0.0, 1.0).unwrap();
    let mut e: Vec<(TrialLabel, f64)> = (0..n_t).map(|_| (TrialLabel::Target, tgt.sample(rng))).collect();
    e.extend((n_t..n_total).map(|_| (TrialLabel::NonTarget, non.sample(rng))));
    // a few exact ties
    for k in 0..n_total / 50 {
        let v = e[k].1;
        e[n_total - 1 - k].1 = v;
    }
    TrialScores::new(e)
}

pub fn eer_oracle(sets: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for k in 0..sets {
        // classes of at least 1000 keep FAR/FRR steps under 1e-3
        let scores = random_scores(&mut rng, 4000);
        let (eer, _) = compute_eer(&scores).map_err(|e| e.to_string())?;
        let oracle = oracles::dense_sweep_eer(&scores, 100_000);
        let d = (eer - oracle).abs();
        worst = worst.max(d);
        ensure(d <= 1e-3, || format!("set {k}: eer {eer} vs oracle {oracle}"))?;
    }
    Ok(format!("{sets} score sets, max |diff| {worst:.1e}"))
}

pub fn conv_oracle(shapes: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for k in 0..shapes {
        let kh = rng.random_range(1..=4);
        let kw = rng.random_range(1..=4);
        let pad = rng.random_range(0..=2);
        let s = oracles::ConvShape {
            n: rng.random_range(1..=3),
            c_in: rng.random_range(1..=4),
            h: rng.random_range(kh.max(1)..=11),
            w: rng.random_range(kw.max(1)..=11),
            c_out: rng.random_range(1..=5),
            kh,
            kw,
            stride: rng.random_range(1..=3),
            pad,
        };
        let x = normal_tensor(&[s.n, s.c_in, s.h, s.w], 1.0, &mut rng);
        let w = normal_tensor(&[s.c_out, s.c_in, s.kh, s.kw], 1.0, &mut rng);
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let wv = g.input(w.clone());
        let y = g.conv2d(xv, wv, s.stride, s.pad).map_err(|e| e.to_string())?;
        let expected = oracles::conv2d(x.data(), w.data(), &s);
        let got = g.value(y).data();
        ensure(got.len() == expected.len(), || format!("shape {k}: length mismatch"))?;
        let d = got.iter().zip(&expected).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst = worst.max(d);
        ensure(d <= 1e-10, || format!("shape {k}: max diff {d:e}"))?;
    }
    Ok(format!("{shapes} shapes, max |diff| {worst:.1e}"))
}

/// Elementwise relative error of the FFT spectrogram against direct DFT
/// sums, with the denominator floored at `1e-9` of the largest magnitude.
pub fn spectrogram_oracle(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let speech = synth_utterance(&sample_profile(seed), 0.5, seed).map_err(|e| e.to_string())?;
    let noise = Waveform::new(normal_vec(4000, 0.3, &mut rng), 16_000);
    let mut worst = 0.0f64;
    for (name, w) in [("speech", speech), ("noise", noise)] {
        let cfg = FrameConfig::default();
        let s = spectrogram(&w, &cfg).map_err(|e| e.to_string())?;
        let oracle = oracles::spectrogram(&w.samples, 400, 160, 512);
        ensure(oracle[0].len() == s.frames, || format!("{name}: frame count"))?;
        let top = oracle.iter().flatten().fold(0.0f64, |m, v| m.max(*v));
        for (k, row) in oracle.iter().enumerate() {
            for (t, &o) in row.iter().enumerate() {
                let d = (s.get(k, t) - o).abs() / o.max(1e-9 * top);
                worst = worst.max(d);
            }
        }
        ensure(worst <= 1e-6, || format!("{name}: relative error {worst:e}"))?;
    }
    Ok(format!("max relative error {worst:.1e}"))
}

pub fn noise_accuracy() -> Check {
    let clean = synth_utterance(&sample_profile(5), 1.0, 5).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for kind in NoiseKind::ALL {
        for snr in [20.0, 50.0, 100.0] {
            for seed in 0..3 {
                let (noisy, n) = add_noise_components(&clean, &NoiseSpec::new(kind, snr), seed)
                    .map_err(|e| e.to_string())?;
                let got = measured_snr_db(&clean.samples, &n);
                let d = (got - snr).abs();
                worst = worst.max(d);
                ensure(d <= 1e-9, || format!("{kind} {snr} dB: measured {got}"))?;
                let sum_ok = noisy
                    .samples
                    .iter()
                    .zip(clean.samples.iter().zip(&n))
                    .all(|(y, (x, e))| *y == x + e);
                ensure(sum_ok, || format!("{kind} {snr} dB: noisy != clean + noise"))?;
            }
        }
    }
    Ok(format!("gaussian/uniform x 20/50/100 dB, max |error| {worst:.1e} dB"))
}

/// Configuration small enough to train in seconds.
pub fn tiny_experiment(seed: u64, mode: FefaMode) -> fefa::harness::ExperimentConfig {
    let mut model = BackboneConfig::new(Family::Resnet, mode);
    model.channel_widths = vec![4, 8];
    model.block_counts = vec![1, 1];
    model.embedding_dim = 16;
    let mut cfg = fefa::harness::ExperimentConfig::new(seed, model);
    cfg.corpus.n_speakers = 4;
    cfg.corpus.utts_per_speaker = 5;
    cfg.corpus.test_per_speaker = 2;
    cfg.corpus.duration_s = 0.5;
    cfg.training.epochs = 2;
    cfg.training.batch_size = 4;
    cfg.training.lr = 1e-3;
    cfg.noise.snr_db = vec![20.0];
    cfg
}

pub fn run_cli(bin: &str, args: &[&str]) -> Result<String, String> {
    let out = std::process::Command::new(bin).args(args).output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn files_under(root: &std::path::Path) -> Vec<(std::path::PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let bytes = std::fs::read(&path).unwrap();
                out.push((path.strip_prefix(root).unwrap().to_path_buf(), bytes));
            }
        }
    }
    out.sort();
    out
}

/// Runs every subcommand twice in separate directories and compares every
/// file written, byte for byte.
pub fn cli_reproducibility(bin: &str) -> Check {
    let mut runs = Vec::new();
    let mut dirs = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let root = dir.path();
        let write_cfg = |name: &str, mode: FefaMode| {
            let p = root.join(name);
            std::fs::write(&p, tiny_experiment(3, mode).to_json()).unwrap();
            p.to_str().unwrap().to_string()
        };
        let base_cfg = write_cfg("base.json", FefaMode::None);
        let fefa_cfg = write_cfg("fefa.json", FefaMode::Single);
        let o = |sub: &str| root.join("out").join(sub).to_str().unwrap().to_string();
        run_cli(bin, &["synth-corpus", "--config", &fefa_cfg, "--out", &o("corpus")])?;
        run_cli(bin, &["train", "--config", &base_cfg, "--out", &o("base")])?;
        run_cli(bin, &["train", "--config", &fefa_cfg, "--out", &o("fefa")])?;
        let ckpt = |m: &str| root.join("out").join(m).join("checkpoint").to_str().unwrap().to_string();
        run_cli(bin, &["evaluate", "--config", &fefa_cfg, "--checkpoint", &ckpt("fefa"), "--grid", "--out", &o("eval")])?;
        run_cli(
            bin,
            &["robustness", "--config", &base_cfg, "--checkpoint", &ckpt("base"), "--checkpoint", &ckpt("fefa"), "--out", &o("robust")],
        )?;
        let wav = root.join("out/corpus/wav/spk000-u004.wav");
        run_cli(
            bin,
            &["export-attention", "--checkpoint", &ckpt("fefa"), "--wav", wav.to_str().unwrap(), "--noise", "gaussian", "--snr-db", "20", "--seed", "4", "--out", &o("attention")],
        )?;
        runs.push(files_under(&root.join("out")));
        dirs.push(dir);
    }
    let (a, b) = (&runs[0], &runs[1]);
    ensure(a.len() == b.len(), || format!("{} vs {} files", a.len(), b.len()))?;
    for ((pa, ba), (pb, bb)) in a.iter().zip(b) {
        ensure(pa == pb, || format!("file sets differ at {pa:?} / {pb:?}"))?;
        ensure(ba == bb, || format!("{pa:?} differs between runs"))?;
    }
    Ok(format!("{} files identical across two runs of all five commands", a.len()))
}

/// Expected attention sizes of a multi-depth model, from the conv and pool
/// arithmetic: input, then each stage whose input frequency size differs
/// from its output, skipping a stage fed directly by the input.
pub fn expected_multi_bins(cfg: &BackboneConfig) -> Vec<usize> {
    let mut out = vec![cfg.input_bins];
    let mut f = cfg.input_bins;
    match cfg.family {
        Family::Vgg => {
            for s in 0..cfg.channel_widths.len() {
                let next = f / 2;
                if s > 0 && next != f {
                    out.push(f);
                }
                f = next;
            }
        }
        Family::Resnet | Family::Seresnet => {
            f /= 2;
            for _ in &cfg.channel_widths {
                let next = (f + 2 - 3) / 2 + 1;
                if next != f {
                    out.push(f);
                }
                f = next;
            }
        }
    }
    out
}

/// One attention layer per frequency-size change, each passing the gradient
/// and invariant checks at its own size; a single-channel hidden map matches
/// the input form exactly.
pub fn multi_consistency() -> Check {
    let mut sizes_seen = Vec::new();
    for family in [Family::Vgg, Family::Resnet, Family::Seresnet] {
        let mut cfg = BackboneConfig::new(family, FefaMode::Multi);
        cfg.channel_widths = vec![4, 4, 4];
        cfg.block_counts = vec![1, 1, 1];
        cfg.embedding_dim = 8;
        let model = SpeakerModel::build(&cfg, 3, 1).map_err(|e| e.to_string())?;
        let want = expected_multi_bins(&cfg);
        ensure(model.fefa_layer_count() == want.len(), || {
            format!("{family:?}: {} layers, expected {}", model.fefa_layer_count(), want.len())
        })?;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::new();
        let x = g.input(normal_tensor(&[2, 1, 257, 12], 1.0, &mut rng));
        let out = model.forward(&mut g, x, false).map_err(|e| e.to_string())?;
        let got: Vec<usize> = out.attention.iter().map(|&v| g.shape(v)[2]).collect();
        ensure(got == want, || format!("{family:?}: attention sizes {got:?}, expected {want:?}"))?;
        for &v in &out.attention {
            let p = g.attention_probs(v).ok_or("missing attention probabilities")?;
            ensure(p.iter().all(|&q| q > 0.0), || format!("{family:?}: p <= 0"))?;
        }
        sizes_seen.extend(want);
    }
    sizes_seen.sort_unstable();
    sizes_seen.dedup();
    for &f in &sizes_seen {
        attention_invariants_at(100, f as u64, Some(f)).map_err(|e| format!("F' = {f}: {e}"))?;
        let r = super::grad::fefa_hidden_case(f, f as u64);
        ensure(r.passed(), || format!("F' = {f}: gradient check {r:?}"))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for &f in &sizes_seen {
        let x = normal_tensor(&[f, 9], 1.0, &mut rng);
        let layer = FefaLayer::from_params(normal_vec(f, 1.0, &mut rng), Some(normal_vec(f, 1.0, &mut rng)), true);
        let (a, ma) = layer.attend(&x).unwrap();
        let (b, mb) = layer.attend_hidden(&x.clone().reshape(vec![1, f, 9]).unwrap()).unwrap();
        ensure(a.data() == b.data() && ma == mb, || format!("F' = {f}: hidden C=1 differs from input form"))?;
    }
    Ok(format!("attention sizes {sizes_seen:?} checked; hidden C=1 identical"))
}
