//! Finite-difference checks of every differentiable operation and of the
//! full network under each training loss.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::losses::{classification, combined_student_loss, ClassifierKind, NORM_EPS};
use crate::nn::{build, embed_on_graph, ModelConfig, ParamVars, ParameterSet};
use crate::tensor::{grad_check, Graph, Mode, Tensor, Var};

pub const STEP: f64 = 1e-5;
pub const SAMPLES: usize = 200;
pub const TOLERANCE: f64 = 1e-4;

/// Pre-activations closer to the ReLU kink than this are re-drawn, so a
/// finite-difference step never crosses it.
const KINK_MARGIN: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: String,
    pub max_rel_error: f64,
    pub coordinates: usize,
    /// Smallest tensor size checked; every tensor with at least
    /// [`SAMPLES`] entries gets exactly [`SAMPLES`] coordinates.
    pub min_tensor_len: usize,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= TOLERANCE
    }
}

fn named(items: Vec<(&str, Tensor)>) -> Vec<(String, Tensor)> {
    items.into_iter().map(|(n, t)| (n.to_string(), t)).collect()
}

fn away_from_zero(shape: &[usize], gap: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::uniform(shape, gap, 1.0 + gap, rng);
    for v in t.data_mut() {
        if rng.gen_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

fn entry<F>(name: &str, program: F, point: Vec<(String, Tensor)>, seed: u64) -> Result<SuiteEntry>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let min_tensor_len = point.iter().map(|(_, t)| t.len()).min().unwrap_or(0);
    let r = grad_check(program, &point, STEP, SAMPLES, seed)?;
    Ok(SuiteEntry { name: name.to_string(), max_rel_error: r.max_rel_error, coordinates: r.coordinates, min_tensor_len })
}

/// Runs every check; deterministic in `seed`.
pub fn run_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let proj = Tensor::randn(&[2, 4, 6, 6], 1.0, &mut rng);
    out.push(entry(
        "conv2d",
        move |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
            g.weighted_sum(y, &proj)
        },
        named(vec![
            ("input", Tensor::randn(&[2, 3, 6, 6], 1.0, &mut rng)),
            ("kernel", Tensor::randn(&[4, 3, 3, 3], 0.5, &mut rng)),
            ("bias", Tensor::randn(&[4], 0.5, &mut rng)),
        ]),
        seed,
    )?);

    let proj = Tensor::randn(&[2, 4, 4, 4], 1.0, &mut rng);
    out.push(entry(
        "conv2d_stride2",
        move |g, v| {
            let y = g.conv2d(v[0], v[1], None, 2, 1)?;
            g.weighted_sum(y, &proj)
        },
        named(vec![
            ("input", Tensor::randn(&[2, 3, 8, 8], 1.0, &mut rng)),
            ("kernel", Tensor::randn(&[4, 3, 3, 3], 0.5, &mut rng)),
        ]),
        seed,
    )?);

    let proj = Tensor::randn(&[4, 60], 1.0, &mut rng);
    out.push(entry(
        "relu",
        move |g, v| {
            let y = g.relu(v[0])?;
            g.weighted_sum(y, &proj)
        },
        named(vec![("input", away_from_zero(&[4, 60], 0.01, &mut rng))]),
        seed,
    )?);

    for mode in [Mode::Train, Mode::Eval] {
        let proj = Tensor::randn(&[4, 3, 5, 5], 1.0, &mut rng);
        let mean = Tensor::randn(&[3], 0.3, &mut rng);
        let var = Tensor::uniform(&[3], 0.5, 1.5, &mut rng);
        out.push(entry(
            if mode == Mode::Train { "batch_norm_train" } else { "batch_norm_eval" },
            move |g, v| {
                let (y, _) = g.batch_norm2d(v[0], v[1], v[2], &mean, &var, mode, 0.9, 1e-5)?;
                g.weighted_sum(y, &proj)
            },
            named(vec![
                ("input", Tensor::randn(&[4, 3, 5, 5], 1.0, &mut rng)),
                ("scale", Tensor::uniform(&[3], 0.5, 1.5, &mut rng)),
                ("shift", Tensor::randn(&[3], 0.5, &mut rng)),
            ]),
            seed,
        )?);
    }

    let proj = Tensor::randn(&[2, 4], 1.0, &mut rng);
    out.push(entry(
        "global_avg_pool",
        move |g, v| {
            let y = g.global_avg_pool(v[0])?;
            g.weighted_sum(y, &proj)
        },
        named(vec![("input", Tensor::randn(&[2, 4, 5, 5], 1.0, &mut rng))]),
        seed,
    )?);

    let proj = Tensor::randn(&[8, 10], 1.0, &mut rng);
    out.push(entry(
        "linear",
        move |g, v| {
            let y = g.linear(v[0], v[1], Some(v[2]))?;
            g.weighted_sum(y, &proj)
        },
        named(vec![
            ("input", Tensor::randn(&[8, 30], 1.0, &mut rng)),
            ("weight", Tensor::randn(&[10, 30], 0.3, &mut rng)),
            ("bias", Tensor::randn(&[10], 0.3, &mut rng)),
        ]),
        seed,
    )?);

    let proj = Tensor::randn(&[8, 30], 1.0, &mut rng);
    out.push(entry(
        "l2_normalize",
        move |g, v| {
            let y = g.l2_normalize(v[0], NORM_EPS)?;
            g.weighted_sum(y, &proj)
        },
        named(vec![("input", Tensor::randn(&[8, 30], 1.0, &mut rng))]),
        seed,
    )?);

    out.push(entry(
        "squared_distance_mean",
        |g, v| g.squared_distance_mean(v[0], v[1]),
        named(vec![
            ("student", Tensor::randn(&[8, 30], 1.0, &mut rng)),
            ("teacher", Tensor::randn(&[8, 30], 1.0, &mut rng)),
        ]),
        seed,
    )?);

    let labels: Vec<usize> = (0..20).map(|_| rng.gen_range(0..12)).collect();
    out.push(entry(
        "softmax_cross_entropy",
        move |g, v| g.softmax_cross_entropy(v[0], &labels),
        named(vec![("logits", Tensor::randn(&[20, 12], 2.0, &mut rng))]),
        seed,
    )?);

    let labels: Vec<usize> = (0..12).map(|_| rng.gen_range(0..10)).collect();
    let (emb, weight) = arcface_point(&labels, &mut rng);
    out.push(entry(
        "arcface",
        move |g, v| crate::losses::arcface(g, v[0], v[1], &labels, 16.0, 0.3),
        named(vec![("embeddings", emb), ("weight", weight)]),
        seed,
    )?);

    let proj = Tensor::randn(&[10, 20], 1.0, &mut rng);
    out.push(entry(
        "add_scale_sum",
        move |g, v| {
            let s = g.scale(v[1], -0.7)?;
            let y = g.add(v[0], s)?;
            let w = g.weighted_sum(y, &proj)?;
            let t = g.sum(v[0])?;
            g.add(w, t)
        },
        named(vec![
            ("a", Tensor::randn(&[10, 20], 1.0, &mut rng)),
            ("b", Tensor::randn(&[10, 20], 1.0, &mut rng)),
        ]),
        seed,
    )?);

    for (name, kind, alpha) in [
        ("network_softmax", ClassifierKind::Softmax, 0.0),
        ("network_arcface", ClassifierKind::arcface_default(), 0.0),
        ("network_combined_alpha_0.1", ClassifierKind::arcface_default(), 0.1),
    ] {
        out.push(network_entry(name, kind, alpha, &mut rng, seed)?);
    }
    Ok(out)
}

/// Embeddings and class weights whose target angles stay at least 1e-3
/// away from the clamp limits for margin 0.3.
fn arcface_point(labels: &[usize], rng: &mut ChaCha8Rng) -> (Tensor, Tensor) {
    loop {
        let emb = Tensor::randn(&[labels.len(), 20], 1.0, rng);
        let w = Tensor::randn(&[10, 20], 1.0, rng);
        let ok = labels.iter().enumerate().all(|(i, &y)| {
            let e = emb.row(i);
            let c = w.row(y);
            let dot: f64 = e.iter().zip(c).map(|(a, b)| a * b).sum();
            let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let theta = (dot / (norm(e) * norm(c))).clamp(-1.0, 1.0).acos();
            theta > 1e-3 && theta + 0.3 < std::f64::consts::PI - 1e-3
        });
        if ok {
            return (emb, w);
        }
    }
}

fn network_entry(name: &str, kind: ClassifierKind, alpha: f64, rng: &mut ChaCha8Rng, seed: u64) -> Result<SuiteEntry> {
    let model = ModelConfig::uniform(1, &[4, 8], 3, 2, 1, 6);
    let num_classes = 5;
    for _attempt in 0..100 {
        let params = build(&model, num_classes, rng.gen())?;
        let images = Tensor::randn(&[4, 1, 8, 8], 1.0, rng);
        let labels: Vec<usize> = (0..4).map(|_| rng.gen_range(0..num_classes)).collect();
        let teacher = {
            let raw = Tensor::randn(&[4, model.embed_dim], 1.0, rng);
            let d = model.embed_dim;
            let rows: Vec<f64> = raw.data().chunks(d).flat_map(crate::eval::normalize).collect();
            Tensor::new(vec![4, d], rows)?
        };
        if min_pre_activation(&model, &params, &images)? < KINK_MARGIN {
            continue;
        }
        let names = params.trainable_names();
        let point: Vec<(String, Tensor)> =
            names.iter().map(|n| (n.clone(), params.get(n).expect("named tensor").clone())).collect();
        let program = |g: &mut Graph, v: &[Var]| -> Result<Var> {
            let vars = ParamVars::from_map(names.iter().cloned().zip(v.iter().copied()).collect::<BTreeMap<_, _>>());
            let x = g.constant(images.clone());
            let out = embed_on_graph(g, &model, &params, &vars, x, Mode::Train)?;
            if alpha == 0.0 {
                classification(g, out.embedding, vars.classifier(), &labels, kind)
            } else {
                let feat = g.l2_normalize(out.embedding, NORM_EPS)?;
                let loss = combined_student_loss(g, out.embedding, vars.classifier(), &labels, feat, Some(&teacher), alpha, kind)?;
                Ok(loss.total)
            }
        };
        return entry(name, program, point, seed);
    }
    Err(Error::invalid(format!("{name}: no base point clear of ReLU kinks")))
}

fn min_pre_activation(model: &ModelConfig, params: &ParameterSet, images: &Tensor) -> Result<f64> {
    let mut g = Graph::inference();
    let vars = ParamVars::register(&mut g, params, false);
    let x = g.constant(images.clone());
    let out = embed_on_graph(&mut g, model, params, &vars, x, Mode::Train)?;
    Ok(out
        .pre_activations
        .iter()
        .flat_map(|&v| g.value(v).data().iter().map(|z| z.abs()).collect::<Vec<_>>())
        .fold(f64::INFINITY, f64::min))
}
