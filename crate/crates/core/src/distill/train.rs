use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, ResolutionPair};
use crate::error::{Error, Result};
use crate::eval::EXTRACT_BATCH;
use crate::losses::{combined_student_loss, ClassifierKind, LossBreakdown, NORM_EPS};
use crate::nn::{build, copy_parameters, embed_on_graph, forward_features, ModelConfig, ParamVars, ParameterSet};
use crate::tensor::{Graph, Mode, Tensor};

use super::regime::{FeaturePoint, RegimeConfig, StudentInit, TrainConfig};
use super::sgd::{learning_rate_at, Sgd};

pub const TRAIN_LOG_HEADER: &str = "epoch,L_CS,L_feat,total,acc,seconds";

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Batch means of the loss terms.
    pub loss: LossBreakdown,
    pub accuracy: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{TRAIN_LOG_HEADER}\n");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{:.3}",
                r.epoch, r.loss.classification, r.loss.feature_match, r.loss.total, r.accuracy, r.seconds
            );
        }
        out
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.records.last().map(|r| r.accuracy)
    }
}

/// Sample order for one epoch; depends only on `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Predicted class per row, matching the classifier's decision rule.
fn predictions(embedding: &Tensor, classifier: &Tensor, kind: ClassifierKind) -> Vec<usize> {
    let d = classifier.shape()[1];
    let rows: Vec<Vec<f64>> = classifier
        .data()
        .chunks(d)
        .map(|w| match kind {
            ClassifierKind::Softmax => w.to_vec(),
            ClassifierKind::ArcFace { .. } => {
                let n = w.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                w.iter().map(|x| x / n).collect()
            }
        })
        .collect();
    embedding
        .data()
        .chunks(d)
        .map(|e| {
            let mut best = (0, f64::NEG_INFINITY);
            for (k, w) in rows.iter().enumerate() {
                let s: f64 = w.iter().zip(e).map(|(a, b)| a * b).sum();
                if s > best.1 {
                    best = (k, s);
                }
            }
            best.0
        })
        .collect()
}

fn diverged(epoch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(_) => Error::Diverged { epoch },
        other => other,
    }
}

/// Minibatch SGD on `L_cls + α·L_feat`. `teacher_features` holds one row per
/// image and is only read when `alpha > 0`. Batches of fewer than two images
/// are skipped because batch norm needs them.
fn fit(
    model: &ModelConfig,
    mut params: ParameterSet,
    images: &[Tensor],
    labels: &[usize],
    teacher_features: Option<&Tensor>,
    alpha: f64,
    cfg: &TrainConfig,
) -> Result<(ParameterSet, TrainLog)> {
    if images.len() != labels.len() {
        return Err(Error::invalid("image and label counts differ"));
    }
    if images.len() < 2 {
        return Err(Error::invalid("training needs at least two images"));
    }
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let lr = learning_rate_at(cfg.learning_rate, epoch, cfg.epochs);
        let order = epoch_order(images.len(), cfg.seed, epoch);
        let (mut sum, mut batches, mut correct, mut seen) = (LossBreakdown { alpha, ..Default::default() }, 0usize, 0usize, 0usize);
        for idx in order.chunks(cfg.batch_size).filter(|c| c.len() >= 2) {
            let batch = Tensor::stack(&idx.iter().map(|&i| &images[i]).collect::<Vec<_>>())?;
            let batch_labels: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let target = match (alpha > 0.0, teacher_features) {
                (false, _) => None,
                (true, Some(t)) => {
                    let d = t.shape()[1];
                    let rows: Vec<f64> = idx.iter().flat_map(|&i| t.row(i).iter().copied()).collect();
                    Some(Tensor::new(vec![idx.len(), d], rows)?)
                }
                (true, None) => return Err(Error::invalid("alpha > 0 requires teacher features")),
            };

            let mut g = Graph::new();
            let vars = ParamVars::register(&mut g, &params, true);
            let x = g.constant(batch);
            let out = embed_on_graph(&mut g, model, &params, &vars, x, Mode::Train).map_err(diverged(epoch))?;
            let student_feat = match cfg.feature_point {
                FeaturePoint::Embedding => out.embedding,
                FeaturePoint::NormalizedEmbedding => g.l2_normalize(out.embedding, NORM_EPS).map_err(diverged(epoch))?,
                FeaturePoint::Pooled => out.pooled,
            };
            let loss = combined_student_loss(
                &mut g,
                out.embedding,
                vars.classifier(),
                &batch_labels,
                student_feat,
                target.as_ref(),
                alpha,
                cfg.cls_kind,
            )
            .map_err(diverged(epoch))?;
            if !loss.breakdown.total.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            let preds = predictions(g.value(out.embedding), params.classifier(), cfg.cls_kind);
            correct += preds.iter().zip(&batch_labels).filter(|(p, l)| p == l).count();
            seen += idx.len();
            sum.classification += loss.breakdown.classification;
            sum.feature_match += loss.breakdown.feature_match;
            sum.total += loss.breakdown.total;
            batches += 1;

            let grads = g.backward(loss.total).map_err(diverged(epoch))?;
            let named: Vec<(String, Tensor)> =
                vars.iter().map(|(n, v)| (n.to_string(), grads.get_or_zeros(&g, v))).collect();
            opt.step(&mut params, &named, lr)?;
            for (name, value) in out.running {
                *params.get_mut(&name).expect("running statistic exists") = value;
            }
        }
        if batches == 0 {
            return Err(Error::invalid("batch_size leaves no batch of at least two images"));
        }
        let b = batches as f64;
        log.records.push(EpochRecord {
            epoch,
            loss: LossBreakdown {
                classification: sum.classification / b,
                feature_match: sum.feature_match / b,
                alpha,
                total: sum.total / b,
            },
            accuracy: correct as f64 / seen as f64,
            seconds: start.elapsed().as_secs_f64(),
        });
        log::debug!("epoch {epoch}: loss {:.4} acc {:.3}", sum.total / b, correct as f64 / seen as f64);
    }
    Ok((params, log))
}

/// Trains a fresh network (seeded by `cfg.seed`) at the teacher resolution
/// with the classification loss alone.
pub fn train_teacher(model: &ModelConfig, dataset: &Dataset, cfg: &TrainConfig) -> Result<(ParameterSet, TrainLog)> {
    cfg.validate(model)?;
    dataset.manifest.validate()?;
    let images = dataset.at_resolution(cfg.teacher_resolution)?;
    let params = build(model, dataset.manifest.num_identities(), cfg.seed)?;
    fit(model, params, &images, &dataset.labels(), None, 0.0, cfg)
}

/// A copy of the teacher (KT regimes) or a fresh network built from `seed`.
pub fn init_student(
    regime: &RegimeConfig,
    model: &ModelConfig,
    teacher: &ParameterSet,
    seed: u64,
) -> Result<ParameterSet> {
    teacher.check_config(model)?;
    match regime.student_init() {
        StudentInit::FromTeacher => Ok(copy_parameters(teacher)),
        StudentInit::Random => build(model, teacher.num_classes(), seed),
    }
}

/// Eval-mode teacher features of `images` at `point`, one row each.
/// Rows do not depend on how images are batched.
pub fn teacher_features(
    model: &ModelConfig,
    teacher: &ParameterSet,
    images: &[Tensor],
    point: FeaturePoint,
) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut d = 0;
    for chunk in images.chunks(EXTRACT_BATCH) {
        let f = forward_features(model, teacher, &Tensor::stack(&chunk.iter().collect::<Vec<_>>())?, Mode::Eval)?;
        let t = match point {
            FeaturePoint::Pooled => f.pooled,
            _ => f.embedding,
        };
        d = t.shape()[1];
        match point {
            FeaturePoint::NormalizedEmbedding => {
                for row in t.data().chunks(d) {
                    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
                    data.extend(row.iter().map(|v| v / norm));
                }
            }
            _ => data.extend_from_slice(t.data()),
        }
    }
    Tensor::new(vec![images.len(), d], data)
}

fn check_pairs(pairs: &[ResolutionPair], cfg: &TrainConfig) -> Result<()> {
    for (i, p) in pairs.iter().enumerate() {
        if p.x_t.shape().last() != Some(&cfg.teacher_resolution) || p.x_s.shape().last() != Some(&cfg.student_resolution) {
            return Err(Error::invalid(format!(
                "pair {i} has resolutions {:?}/{:?}; the training config expects {}/{}",
                p.x_t.shape(),
                p.x_s.shape(),
                cfg.teacher_resolution,
                cfg.student_resolution
            )));
        }
    }
    Ok(())
}

/// Student training loop with an explicit feature-matching weight. With
/// `alpha == 0` the teacher is never evaluated and may be `None`.
pub fn distill_loop(
    model: &ModelConfig,
    teacher: Option<&ParameterSet>,
    student: ParameterSet,
    pairs: &[ResolutionPair],
    alpha: f64,
    cfg: &TrainConfig,
) -> Result<(ParameterSet, TrainLog)> {
    cfg.validate(model)?;
    check_pairs(pairs, cfg)?;
    student.check_config(model)?;
    let cache = if alpha > 0.0 {
        let teacher = teacher.ok_or_else(|| Error::invalid("alpha > 0 requires a teacher"))?;
        teacher.check_config(model)?;
        let x_t: Vec<Tensor> = pairs.iter().map(|p| p.x_t.clone()).collect();
        Some(teacher_features(model, teacher, &x_t, cfg.feature_point)?)
    } else {
        None
    };
    let images: Vec<Tensor> = pairs.iter().map(|p| p.x_s.clone()).collect();
    let labels: Vec<usize> = pairs.iter().map(|p| p.label).collect();
    fit(model, student, &images, &labels, cache.as_ref(), alpha, cfg)
}

/// Trains `student` on the low-resolution side of `pairs` under `regime`.
/// The teacher is only read.
pub fn train_student(
    model: &ModelConfig,
    regime: &RegimeConfig,
    teacher: &ParameterSet,
    student: ParameterSet,
    pairs: &[ResolutionPair],
    cfg: &TrainConfig,
) -> Result<(ParameterSet, TrainLog)> {
    distill_loop(model, Some(teacher), student, pairs, regime.alpha(), cfg)
}
