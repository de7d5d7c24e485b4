use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{BackboneConfig, Family};
use crate::attention::FefaLayer;
use crate::error::{Error, Result};
use crate::rng::substream;
use crate::tensor::{
    he_uniform, load_checkpoint, save_checkpoint, Adam, AdamState, BatchStats, Graph, ParamId,
    ParamStore, Tensor, Var,
};

#[derive(Debug, Clone)]
struct ConvBn {
    conv: ParamId,
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
    stride: usize,
    pad: usize,
}

#[derive(Debug, Clone)]
struct SeParams {
    fc1_w: ParamId,
    fc1_b: ParamId,
    fc2_w: ParamId,
    fc2_b: ParamId,
}

#[derive(Debug, Clone)]
struct Block {
    conv1: ConvBn,
    conv2: ConvBn,
    shortcut: Option<ConvBn>,
    se: Option<SeParams>,
}

#[derive(Debug, Clone)]
struct FefaParams {
    weight: ParamId,
    bias: Option<ParamId>,
}

#[derive(Debug, Clone)]
enum Body {
    Vgg(Vec<Vec<ConvBn>>),
    Res { stem: ConvBn, stages: Vec<Vec<Block>> },
}

/// A backbone, its attention layers and the speaker classifier head.
#[derive(Debug, Clone)]
pub struct SpeakerModel {
    pub config: BackboneConfig,
    pub n_speakers: usize,
    pub store: ParamStore,
    body: Body,
    input_fefa: Option<FefaParams>,
    stage_fefa: Vec<Option<FefaParams>>,
    embed: (ParamId, ParamId),
    classifier: (ParamId, ParamId),
}

/// Graph handles produced by [`SpeakerModel::forward`].
#[derive(Debug)]
pub struct ForwardOutput {
    pub embedding: Var,
    pub logits: Var,
    /// Attention nodes in network order, input layer first.
    pub attention: Vec<Var>,
    bn_updates: Vec<(ParamId, ParamId, BatchStats)>,
}

/// Eval-mode outputs for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub embeddings: Vec<Vec<f64>>,
    pub logits: Vec<Vec<f64>>,
    /// Input-layer attention probabilities per sample, when present.
    pub input_attention: Option<Vec<Vec<f64>>>,
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Builder<'_> {
    fn conv_bn(&mut self, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize) -> ConvBn {
        let w = he_uniform(&[c_out, c_in, k, k], c_in * k * k, &mut self.rng);
        ConvBn {
            conv: self.store.add(&format!("{name}.conv.weight"), w),
            gamma: self.store.add(&format!("{name}.bn.gamma"), Tensor::full(&[c_out], 1.0)),
            beta: self.store.add(&format!("{name}.bn.beta"), Tensor::zeros(&[c_out])),
            running_mean: self
                .store
                .add_buffer(&format!("{name}.bn.running_mean"), Tensor::zeros(&[c_out])),
            running_var: self
                .store
                .add_buffer(&format!("{name}.bn.running_var"), Tensor::full(&[c_out], 1.0)),
            stride,
            pad: k / 2,
        }
    }

    fn linear(&mut self, name: &str, d_in: usize, d_out: usize) -> (ParamId, ParamId) {
        let w = he_uniform(&[d_in, d_out], d_in, &mut self.rng);
        (
            self.store.add(&format!("{name}.weight"), w),
            self.store.add(&format!("{name}.bias"), Tensor::zeros(&[d_out])),
        )
    }

    fn fefa(&mut self, name: &str, bins: usize, bias: bool) -> FefaParams {
        FefaParams {
            weight: self.store.add(&format!("{name}.weight"), Tensor::zeros(&[bins])),
            bias: bias.then(|| self.store.add(&format!("{name}.bias"), Tensor::zeros(&[bins]))),
        }
    }
}

/// `s = sigmoid(fc2(relu(fc1(gap(u)))))`, output `s_c * u[c]`.
pub fn se_block(
    g: &mut Graph,
    u: Var,
    fc1: (Var, Var),
    fc2: (Var, Var),
) -> Result<Var> {
    let squeezed = g.global_avg_pool(u)?;
    let hidden = g.linear(squeezed, fc1.0, Some(fc1.1))?;
    let hidden = g.relu(hidden);
    let gate = g.linear(hidden, fc2.0, Some(fc2.1))?;
    let gate = g.sigmoid(gate);
    g.channel_scale(u, gate)
}

/// Stacks `[F, T]` matrices into a `[N, 1, F, T]` batch.
pub fn stack_inputs(xs: &[&Tensor]) -> Result<Tensor> {
    let first = xs
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let [f, t] = *first.shape() else {
        return Err(Error::InvalidArgument(format!(
            "inputs must be [F, T] matrices, got {:?}",
            first.shape()
        )));
    };
    let mut data = Vec::with_capacity(xs.len() * f * t);
    for x in xs {
        if x.shape() != first.shape() {
            return Err(Error::shape("stack_inputs", first.shape(), x.shape()));
        }
        data.extend_from_slice(x.data());
    }
    Tensor::new(vec![xs.len(), 1, f, t], data)
}

impl SpeakerModel {
    /// Deterministic construction from `seed`. Attention layers start at zero
    /// and consume no randomness, so models differing only in attention mode
    /// share every other initial value.
    pub fn build(config: &BackboneConfig, n_speakers: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if n_speakers == 0 {
            return Err(Error::Config("n_speakers must be positive".into()));
        }
        let mut store = ParamStore::new();
        let mut b = Builder {
            store: &mut store,
            rng: substream(seed, "init", 0),
        };
        let (input_bins, stage_points) = config.fefa_points();
        let input_fefa = input_bins.map(|f| b.fefa("fefa.input", f, config.fefa_bias));
        let mut stage_fefa = vec![None; config.channel_widths.len()];
        for &(s, f) in &stage_points {
            stage_fefa[s] = Some(b.fefa(&format!("fefa.stage{s}"), f, config.fefa_bias));
        }

        let body = match config.family {
            Family::Vgg => {
                let mut c_in = 1;
                let stages = config
                    .channel_widths
                    .iter()
                    .zip(&config.block_counts)
                    .enumerate()
                    .map(|(s, (&w, &n))| {
                        (0..n)
                            .map(|l| {
                                let layer = b.conv_bn(&format!("stage{s}.conv{l}"), c_in, w, 3, 1);
                                c_in = w;
                                layer
                            })
                            .collect()
                    })
                    .collect();
                Body::Vgg(stages)
            }
            Family::Resnet | Family::Seresnet => {
                let w0 = config.channel_widths[0];
                let stem = b.conv_bn("stem", 1, w0, 3, 1);
                let mut c_in = w0;
                let mut stages = Vec::new();
                for (s, (&w, &n)) in config.channel_widths.iter().zip(&config.block_counts).enumerate() {
                    let mut blocks = Vec::new();
                    for k in 0..n {
                        let name = format!("stage{s}.block{k}");
                        let stride = if k == 0 { 2 } else { 1 };
                        let conv1 = b.conv_bn(&format!("{name}.conv1"), c_in, w, 3, stride);
                        let conv2 = b.conv_bn(&format!("{name}.conv2"), w, w, 3, 1);
                        let shortcut = (stride != 1 || c_in != w)
                            .then(|| b.conv_bn(&format!("{name}.shortcut"), c_in, w, 1, stride));
                        let se = (config.family == Family::Seresnet).then(|| {
                            let r = w / config.se_reduction;
                            let (fc1_w, fc1_b) = b.linear(&format!("{name}.se.fc1"), w, r);
                            let (fc2_w, fc2_b) = b.linear(&format!("{name}.se.fc2"), r, w);
                            SeParams {
                                fc1_w,
                                fc1_b,
                                fc2_w,
                                fc2_b,
                            }
                        });
                        blocks.push(Block {
                            conv1,
                            conv2,
                            shortcut,
                            se,
                        });
                        c_in = w;
                    }
                    stages.push(blocks);
                }
                Body::Res { stem, stages }
            }
        };
        let last_w = *config.channel_widths.last().expect("validated");
        let last_f = *config.stage_bins().last().expect("validated");
        let embed = b.linear("embed", last_w * last_f, config.embedding_dim);
        let classifier = b.linear("classifier", config.embedding_dim, n_speakers);
        Ok(SpeakerModel {
            config: config.clone(),
            n_speakers,
            store,
            body,
            input_fefa,
            stage_fefa,
            embed,
            classifier,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.store.parameter_count()
    }

    /// Number of attention layers.
    pub fn fefa_layer_count(&self) -> usize {
        self.input_fefa.iter().count() + self.stage_fefa.iter().flatten().count()
    }

    /// Copies of the attention layers, input layer first.
    pub fn fefa_layers(&self) -> Vec<FefaLayer> {
        self.input_fefa
            .iter()
            .chain(self.stage_fefa.iter().flatten())
            .map(|fp| {
                FefaLayer::from_params(
                    self.store.value(fp.weight).data().to_vec(),
                    fp.bias.map(|b| self.store.value(b).data().to_vec()),
                    self.config.fefa_input_dependent,
                )
            })
            .collect()
    }

    /// Names of the parameters that belong to attention layers.
    pub fn fefa_param_names(&self) -> Vec<String> {
        self.store
            .iter()
            .filter(|(_, p)| p.name.starts_with("fefa."))
            .map(|(_, p)| p.name.clone())
            .collect()
    }

    /// Copies every entry of `other` whose name and shape match an entry here.
    /// Returns how many were copied.
    pub fn copy_matching_from(&mut self, other: &SpeakerModel) -> usize {
        let mut copied = 0;
        let ids: Vec<ParamId> = self.store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let name = self.store.get(id).name.clone();
            if let Some(src) = other.store.find(&name) {
                let v = other.store.value(src);
                if v.shape() == self.store.value(id).shape() {
                    *self.store.value_mut(id) = v.clone();
                    copied += 1;
                }
            }
        }
        copied
    }

    fn conv_bn(&self, g: &mut Graph, x: Var, l: &ConvBn, train: bool, upd: &mut Vec<(ParamId, ParamId, BatchStats)>) -> Result<Var> {
        let w = g.param(&self.store, l.conv);
        let y = g.conv2d(x, w, l.stride, l.pad)?;
        let gamma = g.param(&self.store, l.gamma);
        let beta = g.param(&self.store, l.beta);
        let running = (!train).then(|| {
            (
                self.store.value(l.running_mean).data(),
                self.store.value(l.running_var).data(),
            )
        });
        let (y, stats) = g.batch_norm2d(y, gamma, beta, running, self.config.bn_eps)?;
        if let Some(stats) = stats {
            upd.push((l.running_mean, l.running_var, stats));
        }
        Ok(y)
    }

    fn fefa(&self, g: &mut Graph, x: Var, fp: &FefaParams) -> Result<Var> {
        let w = g.param(&self.store, fp.weight);
        let b = fp.bias.map(|b| g.param(&self.store, b));
        g.freq_attention(x, w, b, self.config.fefa_input_dependent)
    }

    /// Records the network on `g` for an input batch `[N, 1, F, T]`. In
    /// training mode batch statistics are used and the running averages are
    /// returned for [`SpeakerModel::apply_bn_updates`].
    pub fn forward(&self, g: &mut Graph, x: Var, train: bool) -> Result<ForwardOutput> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != 1 || shape[2] != self.config.input_bins {
            return Err(Error::InvalidArgument(format!(
                "model expects input [N, 1, {}, T], got {shape:?}",
                self.config.input_bins
            )));
        }
        let mut upd = Vec::new();
        let mut attention = Vec::new();
        let mut h = x;
        if let Some(fp) = &self.input_fefa {
            h = self.fefa(g, h, fp)?;
            attention.push(h);
        }
        match &self.body {
            Body::Vgg(stages) => {
                for (s, layers) in stages.iter().enumerate() {
                    if let Some(fp) = &self.stage_fefa[s] {
                        h = self.fefa(g, h, fp)?;
                        attention.push(h);
                    }
                    for l in layers {
                        h = self.conv_bn(g, h, l, train, &mut upd)?;
                        h = g.relu(h);
                    }
                    h = g.max_pool2d(h, 2)?;
                }
            }
            Body::Res { stem, stages } => {
                h = self.conv_bn(g, h, stem, train, &mut upd)?;
                h = g.relu(h);
                h = g.max_pool2d(h, 2)?;
                for (s, blocks) in stages.iter().enumerate() {
                    if let Some(fp) = &self.stage_fefa[s] {
                        h = self.fefa(g, h, fp)?;
                        attention.push(h);
                    }
                    for blk in blocks {
                        h = self.block(g, h, blk, train, &mut upd)?;
                    }
                }
            }
        }
        let pooled = g.time_avg_pool(h)?;
        let (ew, eb) = (g.param(&self.store, self.embed.0), g.param(&self.store, self.embed.1));
        let embedding = g.linear(pooled, ew, Some(eb))?;
        let (cw, cb) = (
            g.param(&self.store, self.classifier.0),
            g.param(&self.store, self.classifier.1),
        );
        let logits = g.linear(embedding, cw, Some(cb))?;
        Ok(ForwardOutput {
            embedding,
            logits,
            attention,
            bn_updates: upd,
        })
    }

    fn block(&self, g: &mut Graph, x: Var, blk: &Block, train: bool, upd: &mut Vec<(ParamId, ParamId, BatchStats)>) -> Result<Var> {
        let y = self.conv_bn(g, x, &blk.conv1, train, upd)?;
        let y = g.relu(y);
        let mut y = self.conv_bn(g, y, &blk.conv2, train, upd)?;
        if let Some(se) = &blk.se {
            let fc1 = (g.param(&self.store, se.fc1_w), g.param(&self.store, se.fc1_b));
            let fc2 = (g.param(&self.store, se.fc2_w), g.param(&self.store, se.fc2_b));
            y = se_block(g, y, fc1, fc2)?;
        }
        let skip = match &blk.shortcut {
            Some(sc) => self.conv_bn(g, x, sc, train, upd)?,
            None => x,
        };
        let sum = g.add(y, skip)?;
        Ok(g.relu(sum))
    }

    /// Folds batch statistics into the running averages.
    pub fn apply_bn_updates(&mut self, out: ForwardOutput) {
        let m = self.config.bn_momentum;
        for (mean_id, var_id, stats) in out.bn_updates {
            for (r, b) in self.store.value_mut(mean_id).data_mut().iter_mut().zip(&stats.mean) {
                *r = m * *r + (1.0 - m) * b;
            }
            for (r, b) in self.store.value_mut(var_id).data_mut().iter_mut().zip(&stats.var) {
                *r = m * *r + (1.0 - m) * b;
            }
        }
    }

    /// Eval-mode forward for a batch of `[F, T]` matrices.
    pub fn infer(&self, xs: &[&Tensor]) -> Result<Inference> {
        let mut g = Graph::new();
        let x = g.input(stack_inputs(xs)?);
        let out = self.forward(&mut g, x, false)?;
        let rows = |v: Var, width: usize| -> Vec<Vec<f64>> {
            g.value(v).data().chunks(width).map(<[f64]>::to_vec).collect()
        };
        let input_attention = self.input_fefa.as_ref().map(|fp| {
            let bins = self.store.value(fp.weight).numel();
            g.attention_probs(out.attention[0])
                .expect("attention node")
                .chunks(bins)
                .map(<[f64]>::to_vec)
                .collect()
        });
        Ok(Inference {
            embeddings: rows(out.embedding, self.config.embedding_dim),
            logits: rows(out.logits, self.n_speakers),
            input_attention,
        })
    }

    /// Saves parameters, buffers and optional optimizer state, plus
    /// `model.json` describing the architecture.
    pub fn save(&self, dir: impl AsRef<Path>, adam: Option<&Adam>, mut meta: serde_json::Value) -> Result<()> {
        let dir = dir.as_ref();
        let mut tensors: Vec<(String, Tensor)> = Vec::new();
        for (_, p) in self.store.iter() {
            tensors.push((p.name.clone(), p.value.clone()));
        }
        if let Some(adam) = adam {
            for (id, p) in self.store.iter() {
                let shape = p.value.shape().to_vec();
                tensors.push((format!("adam.m.{}", p.name), Tensor::from_parts(shape.clone(), adam.state.m[id.0].clone())));
                tensors.push((format!("adam.v.{}", p.name), Tensor::from_parts(shape, adam.state.v[id.0].clone())));
            }
            meta["adam_step"] = adam.state.step.into();
            meta["lr"] = adam.lr.into();
        }
        let refs: Vec<(String, &Tensor)> = tensors.iter().map(|(n, t)| (n.clone(), t)).collect();
        save_checkpoint(dir, &refs, meta)?;
        let desc = ModelDescription {
            config: self.config.clone(),
            n_speakers: self.n_speakers,
        };
        let path = dir.join(MODEL_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(&desc)?).map_err(|e| Error::io(&path, e))
    }

    /// Loads a checkpoint written by [`SpeakerModel::save`]. Returns the
    /// model, the optimizer state if stored, and the metadata.
    pub fn load(dir: impl AsRef<Path>) -> Result<(SpeakerModel, Option<AdamState>, serde_json::Value)> {
        let dir = dir.as_ref();
        let desc = ModelDescription::read(dir)?;
        let (manifest, tensors) = load_checkpoint(dir)?;
        let mut model = SpeakerModel::build(&desc.config, desc.n_speakers, 0)?;
        let lookup: std::collections::HashMap<&str, &Tensor> =
            tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let ids: Vec<ParamId> = model.store.iter().map(|(id, _)| id).collect();
        for &id in &ids {
            let name = model.store.get(id).name.clone();
            let t = lookup
                .get(name.as_str())
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if t.shape() != model.store.value(id).shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: checkpoint shape {:?} does not match model shape {:?}",
                    t.shape(),
                    model.store.value(id).shape()
                )));
            }
            *model.store.value_mut(id) = (*t).clone();
        }
        let adam = match manifest.meta.get("adam_step").and_then(|v| v.as_u64()) {
            Some(step) => {
                let mut m = Vec::with_capacity(ids.len());
                let mut v = Vec::with_capacity(ids.len());
                for &id in &ids {
                    let name = &model.store.get(id).name;
                    let get = |prefix: &str| {
                        lookup
                            .get(format!("{prefix}.{name}").as_str())
                            .map(|t| t.data().to_vec())
                            .ok_or_else(|| Error::Checkpoint(format!("missing {prefix}.{name}")))
                    };
                    m.push(get("adam.m")?);
                    v.push(get("adam.v")?);
                }
                Some(AdamState { step, m, v })
            }
            None => None,
        };
        Ok((model, adam, manifest.meta))
    }
}

pub const MODEL_FILE: &str = "model.json";

/// Architecture stored next to a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDescription {
    pub config: BackboneConfig,
    pub n_speakers: usize,
}

impl ModelDescription {
    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join(MODEL_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
