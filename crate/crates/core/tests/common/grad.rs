//! Central finite-difference gradient checking.

use fefa::backbone::{BackboneConfig, Family, FefaMode, SpeakerModel};
use fefa::tensor::{Graph, ParamStore, Tensor, Var};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
pub const KINK_TOL: f64 = 1e-2;
/// Denominator floor of the relative error, so that vanishing gradients are
/// compared absolutely.
pub const FLOOR: f64 = 1e-6;

pub trait HasStore {
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
}

impl HasStore for ParamStore {
    fn store(&self) -> &ParamStore {
        self
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        self
    }
}

impl HasStore for SpeakerModel {
    fn store(&self) -> &ParamStore {
        &self.store
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub name: String,
    pub checked: usize,
    /// Coordinates whose perturbation switched a ReLU or max-pool branch.
    pub kinks: usize,
    pub max_rel: f64,
    pub max_rel_kink: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel < TOL && self.max_rel_kink < KINK_TOL
    }
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

struct Eval {
    loss: f64,
    pattern: Vec<usize>,
}

/// Checks `d/dθ sum(r * build(inputs, θ))` for a fixed random `r`, over the
/// graph inputs and every trainable parameter. At most `max_coords`
/// coordinates per tensor are sampled. A coordinate whose `±H` evaluations
/// land on different ReLU/max-pool branches than the unperturbed point is
/// re-differenced one-sidedly on the side that matches and held to
/// [`KINK_TOL`].
pub fn gradcheck<S: HasStore>(
    name: &str,
    inputs: &[Tensor],
    state: &mut S,
    build: impl Fn(&mut Graph, &[Var], &S) -> Var,
    max_coords: usize,
    seed: u64,
) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = build(&mut g, &vars, state);
        Tensor::random_uniform(g.shape(out), -1.0, 1.0, &mut rng)
    };
    let eval = |inputs: &[Tensor], state: &S| -> Eval {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = build(&mut g, &vars, state);
        let rv = g.input(r.clone());
        let prod = g.mul(out, rv).unwrap();
        let loss = g.sum(prod);
        Eval {
            loss: g.value(loss).item(),
            pattern: g.branch_pattern(),
        }
    };

    // analytic
    let (input_grads, param_grads) = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input_with_grad(t.clone())).collect();
        let out = build(&mut g, &vars, state);
        let rv = g.input(r.clone());
        let prod = g.mul(out, rv).unwrap();
        let loss = g.sum(prod);
        state.store_mut().zero_grad();
        let grads = g.backward(loss, state.store_mut()).unwrap();
        let ig: Vec<Vec<f64>> = vars
            .iter()
            .zip(inputs)
            .map(|(v, t)| grads.get(*v).map_or(vec![0.0; t.numel()], <[f64]>::to_vec))
            .collect();
        let pg: Vec<(fefa::tensor::ParamId, Vec<f64>)> = state
            .store()
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(id, p)| (id, p.grad.clone()))
            .collect();
        (ig, pg)
    };
    let base = eval(inputs, state);

    let mut report = GradReport {
        name: name.to_string(),
        checked: 0,
        kinks: 0,
        max_rel: 0.0,
        max_rel_kink: 0.0,
    };
    let record = |analytic: f64, plus: Eval, minus: Eval, report: &mut GradReport| {
        report.checked += 1;
        let smooth_plus = plus.pattern == base.pattern;
        let smooth_minus = minus.pattern == base.pattern;
        if smooth_plus && smooth_minus {
            let n = (plus.loss - minus.loss) / (2.0 * H);
            report.max_rel = report.max_rel.max(rel_err(analytic, n));
        } else {
            report.kinks += 1;
            let n = if smooth_plus {
                (plus.loss - base.loss) / H
            } else if smooth_minus {
                (base.loss - minus.loss) / H
            } else {
                (plus.loss - minus.loss) / (2.0 * H)
            };
            report.max_rel_kink = report.max_rel_kink.max(rel_err(analytic, n));
        }
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    for k in 0..inputs.len() {
        let n = inputs[k].numel();
        for i in pick(n, max_coords, &mut rng) {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + H;
            let plus = eval(&work, state);
            work[k].data_mut()[i] = orig - H;
            let minus = eval(&work, state);
            work[k].data_mut()[i] = orig;
            record(input_grads[k][i], plus, minus, &mut report);
        }
    }
    for (id, grad) in &param_grads {
        let n = grad.len();
        for i in pick(n, max_coords, &mut rng) {
            let orig = state.store().value(*id).data()[i];
            state.store_mut().value_mut(*id).data_mut()[i] = orig + H;
            let plus = eval(&work, state);
            state.store_mut().value_mut(*id).data_mut()[i] = orig - H;
            let minus = eval(&work, state);
            state.store_mut().value_mut(*id).data_mut()[i] = orig;
            record(grad[i], plus, minus, &mut report);
        }
    }
    report
}

fn pick(n: usize, max: usize, rng: &mut impl Rng) -> Vec<usize> {
    if n <= max {
        (0..n).collect()
    } else {
        sample(rng, n, max).into_vec()
    }
}

fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::random_uniform(shape, -1.0, 1.0, rng)
}

fn store_with(params: &[(&str, Tensor)]) -> ParamStore {
    let mut s = ParamStore::new();
    for (n, t) in params {
        s.add(n, t.clone());
    }
    s
}

fn id(s: &ParamStore, name: &str) -> fefa::tensor::ParamId {
    s.find(name).unwrap()
}

/// Tiny end-to-end model config for gradient checks: 16 bins, two stages.
pub fn tiny_config(family: Family, mode: FefaMode) -> BackboneConfig {
    let mut c = BackboneConfig::new(family, mode);
    c.channel_widths = vec![4, 4];
    c.block_counts = vec![1, 1];
    c.embedding_dim = 6;
    c.se_reduction = 2;
    c.input_bins = 16;
    c
}

type Case = (&'static str, fn() -> GradReport);

/// Every layer, the attention paths, the SE block and one tiny model per
/// backbone family.
pub fn cases() -> Vec<Case> {
    vec![
        ("add", || {
            let mut r = ChaCha8Rng::seed_from_u64(1);
            let xs = [rand_t(&[3, 4], &mut r), rand_t(&[3, 4], &mut r)];
            gradcheck("add", &xs, &mut ParamStore::new(), |g, v, _| g.add(v[0], v[1]).unwrap(), 64, 1)
        }),
        ("mul", || {
            let mut r = ChaCha8Rng::seed_from_u64(2);
            let xs = [rand_t(&[3, 4], &mut r), rand_t(&[3, 4], &mut r)];
            gradcheck("mul", &xs, &mut ParamStore::new(), |g, v, _| g.mul(v[0], v[1]).unwrap(), 64, 2)
        }),
        ("scale+sum", || {
            let mut r = ChaCha8Rng::seed_from_u64(3);
            let xs = [rand_t(&[5], &mut r)];
            gradcheck("scale+sum", &xs, &mut ParamStore::new(), |g, v, _| {
                let s = g.scale(v[0], -2.5);
                g.sum(s)
            }, 64, 3)
        }),
        ("relu", || {
            let mut r = ChaCha8Rng::seed_from_u64(4);
            let xs = [rand_t(&[4, 5], &mut r)];
            gradcheck("relu", &xs, &mut ParamStore::new(), |g, v, _| g.relu(v[0]), 64, 4)
        }),
        ("sigmoid", || {
            let mut r = ChaCha8Rng::seed_from_u64(5);
            let xs = [rand_t(&[4, 5], &mut r).scale(3.0)];
            gradcheck("sigmoid", &xs, &mut ParamStore::new(), |g, v, _| g.sigmoid(v[0]), 64, 5)
        }),
        ("conv2d", || {
            let mut r = ChaCha8Rng::seed_from_u64(6);
            let mut s = store_with(&[("w", rand_t(&[3, 2, 3, 3], &mut r))]);
            let xs = [rand_t(&[2, 2, 6, 5], &mut r)];
            gradcheck("conv2d", &xs, &mut s, |g, v, s| {
                let w = g.param(s, id(s, "w"));
                g.conv2d(v[0], w, 1, 1).unwrap()
            }, 80, 6)
        }),
        ("conv2d stride 2", || {
            let mut r = ChaCha8Rng::seed_from_u64(7);
            let mut s = store_with(&[("w", rand_t(&[2, 3, 3, 2], &mut r))]);
            let xs = [rand_t(&[3, 7, 6], &mut r)];
            gradcheck("conv2d stride 2", &xs, &mut s, |g, v, s| {
                let w = g.param(s, id(s, "w"));
                g.conv2d(v[0], w, 2, 1).unwrap()
            }, 80, 7)
        }),
        ("max_pool2d", || {
            let mut r = ChaCha8Rng::seed_from_u64(8);
            let xs = [rand_t(&[2, 2, 5, 4], &mut r)];
            gradcheck("max_pool2d", &xs, &mut ParamStore::new(), |g, v, _| g.max_pool2d(v[0], 2).unwrap(), 80, 8)
        }),
        ("global_avg_pool", || {
            let mut r = ChaCha8Rng::seed_from_u64(9);
            let xs = [rand_t(&[2, 3, 3, 4], &mut r)];
            gradcheck("global_avg_pool", &xs, &mut ParamStore::new(), |g, v, _| g.global_avg_pool(v[0]).unwrap(), 80, 9)
        }),
        ("time_avg_pool", || {
            let mut r = ChaCha8Rng::seed_from_u64(10);
            let xs = [rand_t(&[2, 2, 3, 4], &mut r)];
            gradcheck("time_avg_pool", &xs, &mut ParamStore::new(), |g, v, _| g.time_avg_pool(v[0]).unwrap(), 80, 10)
        }),
        ("linear", || {
            let mut r = ChaCha8Rng::seed_from_u64(11);
            let mut s = store_with(&[("w", rand_t(&[5, 3], &mut r)), ("b", rand_t(&[3], &mut r))]);
            let xs = [rand_t(&[4, 5], &mut r)];
            gradcheck("linear", &xs, &mut s, |g, v, s| {
                let w = g.param(s, id(s, "w"));
                let b = g.param(s, id(s, "b"));
                g.linear(v[0], w, Some(b)).unwrap()
            }, 64, 11)
        }),
        ("linear unbatched", || {
            let mut r = ChaCha8Rng::seed_from_u64(12);
            let mut s = store_with(&[("w", rand_t(&[5, 3], &mut r))]);
            let xs = [rand_t(&[5], &mut r)];
            gradcheck("linear unbatched", &xs, &mut s, |g, v, s| {
                let w = g.param(s, id(s, "w"));
                g.linear(v[0], w, None).unwrap()
            }, 64, 12)
        }),
        ("batch_norm2d train", || {
            let mut r = ChaCha8Rng::seed_from_u64(13);
            let mut s = store_with(&[
                ("gamma", rand_t(&[3], &mut r).map(|v| 1.0 + 0.5 * v)),
                ("beta", rand_t(&[3], &mut r)),
            ]);
            let xs = [rand_t(&[2, 3, 3, 4], &mut r)];
            gradcheck("batch_norm2d train", &xs, &mut s, |g, v, s| {
                let gm = g.param(s, id(s, "gamma"));
                let bt = g.param(s, id(s, "beta"));
                g.batch_norm2d(v[0], gm, bt, None, 1e-5).unwrap().0
            }, 80, 13)
        }),
        ("batch_norm2d eval", || {
            let mut r = ChaCha8Rng::seed_from_u64(14);
            let mut s = store_with(&[
                ("gamma", rand_t(&[3], &mut r)),
                ("beta", rand_t(&[3], &mut r)),
            ]);
            let xs = [rand_t(&[2, 3, 2, 2], &mut r)];
            gradcheck("batch_norm2d eval", &xs, &mut s, |g, v, s| {
                let gm = g.param(s, id(s, "gamma"));
                let bt = g.param(s, id(s, "beta"));
                g.batch_norm2d(v[0], gm, bt, Some((&[0.1, -0.2, 0.3], &[0.5, 1.5, 2.0])), 1e-5)
                    .unwrap()
                    .0
            }, 80, 14)
        }),
        ("channel_scale", || {
            let mut r = ChaCha8Rng::seed_from_u64(15);
            let xs = [rand_t(&[2, 3, 2, 3], &mut r), rand_t(&[2, 3], &mut r)];
            gradcheck("channel_scale", &xs, &mut ParamStore::new(), |g, v, _| g.channel_scale(v[0], v[1]).unwrap(), 80, 15)
        }),
        ("softmax_cross_entropy", || {
            let mut r = ChaCha8Rng::seed_from_u64(16);
            let xs = [rand_t(&[3, 5], &mut r).scale(2.0)];
            gradcheck("softmax_cross_entropy", &xs, &mut ParamStore::new(), |g, v, _| {
                g.softmax_cross_entropy(v[0], &[4, 0, 2]).unwrap()
            }, 64, 16)
        }),
        ("fefa input-dependent X/W/b", || {
            let mut r = ChaCha8Rng::seed_from_u64(17);
            let mut s = store_with(&[("w", rand_t(&[6], &mut r)), ("b", rand_t(&[6], &mut r))]);
            let xs = [rand_t(&[2, 1, 6, 5], &mut r).scale(2.0)];
            gradcheck("fefa input-dependent X/W/b", &xs, &mut s, |g, v, s| {
                let w = g.param(s, id(s, "w"));
                let b = g.param(s, id(s, "b"));
                g.freq_attention(v[0], w, Some(b), true).unwrap()
            }, 80, 17)
        }),
        ("fefa index-only X/W/b", || {
            let mut r = ChaCha8Rng::seed_from_u64(18);
            let mut s = store_with(&[("w", rand_t(&[6], &mut r)), ("b", rand_t(&[6], &mut r))]);
            let xs = [rand_t(&[2, 1, 6, 5], &mut r)];
            gradcheck("fefa index-only X/W/b", &xs, &mut s, |g, v, s| {
                let w = g.param(s, id(s, "w"));
                let b = g.param(s, id(s, "b"));
                g.freq_attention(v[0], w, Some(b), false).unwrap()
            }, 80, 18)
        }),
        ("fefa hidden bias-free", || {
            let mut r = ChaCha8Rng::seed_from_u64(19);
            let mut s = store_with(&[("w", rand_t(&[4], &mut r))]);
            let xs = [rand_t(&[2, 3, 4, 3], &mut r)];
            gradcheck("fefa hidden bias-free", &xs, &mut s, |g, v, s| {
                let w = g.param(s, id(s, "w"));
                g.freq_attention(v[0], w, None, true).unwrap()
            }, 80, 19)
        }),
        ("se block", || {
            let mut r = ChaCha8Rng::seed_from_u64(20);
            let mut s = store_with(&[
                ("fc1.w", rand_t(&[4, 2], &mut r)),
                ("fc1.b", rand_t(&[2], &mut r)),
                ("fc2.w", rand_t(&[2, 4], &mut r)),
                ("fc2.b", rand_t(&[4], &mut r)),
            ]);
            let xs = [rand_t(&[2, 4, 3, 3], &mut r)];
            gradcheck("se block", &xs, &mut s, |g, v, s| {
                let p = |g: &mut Graph, n: &str| g.param(s, id(s, n));
                let fc1 = (p(g, "fc1.w"), p(g, "fc1.b"));
                let fc2 = (p(g, "fc2.w"), p(g, "fc2.b"));
                fefa::backbone::se_block(g, v[0], fc1, fc2).unwrap()
            }, 80, 20)
        }),
        ("model vgg + fefa multi", || model_case(Family::Vgg, FefaMode::Multi, 21)),
        ("model resnet + fefa single", || model_case(Family::Resnet, FefaMode::Single, 22)),
        ("model seresnet + fefa multi", || model_case(Family::Seresnet, FefaMode::Multi, 23)),
    ]
}

/// Training-mode forward of a tiny model; the attention weights are drawn
/// away from zero so the attention paths carry real gradients.
fn model_case(family: Family, mode: FefaMode, seed: u64) -> GradReport {
    let cfg = tiny_config(family, mode);
    let mut model = SpeakerModel::build(&cfg, 3, seed).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    for name in model.fefa_param_names() {
        let id = model.store.find(&name).unwrap();
        let shape = model.store.value(id).shape().to_vec();
        *model.store.value_mut(id) = rand_t(&shape, &mut r);
    }
    let xs = [rand_t(&[2, 1, 16, 8], &mut r)];
    let name = format!("model {family:?} {mode:?}");
    gradcheck(&name, &xs, &mut model, |g, v, m| m.forward(g, v[0], true).unwrap().logits, 24, seed)
}

/// Gradient check of hidden-map attention over `f` bins, with bias.
pub fn fefa_hidden_case(f: usize, seed: u64) -> GradReport {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut s = store_with(&[("w", rand_t(&[f], &mut r)), ("b", rand_t(&[f], &mut r))]);
    let xs = [rand_t(&[2, 3, f, 4], &mut r)];
    gradcheck(&format!("fefa hidden F'={f}"), &xs, &mut s, |g, v, s| {
        let w = g.param(s, id(s, "w"));
        let b = g.param(s, id(s, "b"));
        g.freq_attention(v[0], w, Some(b), true).unwrap()
    }, 120, seed)
}
