//! Training objectives: softmax classification, additive angular margin
//! (ArcFace) classification, Euclidean feature matching and the combined
//! student loss `L_s = L_cls + α·L_feat`.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Norm floor used when normalising embeddings and class weights.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ClassifierKind {
    Softmax,
    ArcFace { scale: f64, margin: f64 },
}

impl ClassifierKind {
    /// ArcFace with the desk-scale defaults s = 16, m = 0.3.
    pub fn arcface_default() -> Self {
        ClassifierKind::ArcFace { scale: 16.0, margin: 0.3 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub classification: f64,
    pub feature_match: f64,
    pub alpha: f64,
    pub total: f64,
}

pub fn softmax_cross_entropy(graph: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    graph.softmax_cross_entropy(logits, labels)
}

/// Cosine logits between L2-normalised embeddings and class weights.
pub fn cosine_logits(graph: &mut Graph, embeddings: Var, weight: Var) -> Result<Var> {
    let e = graph.l2_normalize(embeddings, NORM_EPS)?;
    let w = graph.l2_normalize(weight, NORM_EPS)?;
    graph.linear(e, w, None)
}

/// Additive angular margin loss over `[N, D]` embeddings and `[K, D]` class weights.
pub fn arcface(
    graph: &mut Graph,
    embeddings: Var,
    weight: Var,
    labels: &[usize],
    scale: f64,
    margin: f64,
) -> Result<Var> {
    if scale <= 0.0 {
        return Err(Error::invalid(format!("arcface scale must be positive, got {scale}")));
    }
    if !(0.0..std::f64::consts::FRAC_PI_2).contains(&margin) {
        return Err(Error::invalid(format!("arcface margin must lie in [0, π/2), got {margin}")));
    }
    let [_, d] = graph.value(embeddings).dims2("arcface")?;
    for (i, row) in graph.value(embeddings).data().chunks(d).enumerate() {
        if row.iter().map(|v| v * v).sum::<f64>().sqrt() < NORM_EPS {
            return Err(Error::invalid(format!("arcface: embedding row {i} has zero norm")));
        }
    }
    let cos = cosine_logits(graph, embeddings, weight)?;
    let logits = graph.angular_margin(cos, labels, scale, margin)?;
    graph.softmax_cross_entropy(logits, labels)
}

/// Mean squared Euclidean distance between student and teacher features.
///
/// The teacher side is detached: if `teacher` carries a gradient it is
/// re-recorded as a constant first.
pub fn feature_match(graph: &mut Graph, student: Var, teacher: Var) -> Result<Var> {
    let teacher = if graph.requires_grad(teacher) {
        let value = graph.value(teacher).clone();
        graph.constant(value)
    } else {
        teacher
    };
    graph.squared_distance_mean(student, teacher)
}

/// Classification loss from embeddings and the classifier matrix.
pub fn classification(
    graph: &mut Graph,
    embedding: Var,
    classifier: Var,
    labels: &[usize],
    kind: ClassifierKind,
) -> Result<Var> {
    match kind {
        ClassifierKind::Softmax => {
            let logits = graph.linear(embedding, classifier, None)?;
            graph.softmax_cross_entropy(logits, labels)
        }
        ClassifierKind::ArcFace { scale, margin } => arcface(graph, embedding, classifier, labels, scale, margin),
    }
}

pub struct CombinedLoss {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// `L_s = L_cls + α·L_feat`. With `alpha == 0` the feature branch is not
/// built and `teacher_features` may be `None`.
#[allow(clippy::too_many_arguments)]
pub fn combined_student_loss(
    graph: &mut Graph,
    embedding: Var,
    classifier: Var,
    labels: &[usize],
    student_features: Var,
    teacher_features: Option<&Tensor>,
    alpha: f64,
    kind: ClassifierKind,
) -> Result<CombinedLoss> {
    if !(alpha >= 0.0) {
        return Err(Error::invalid(format!("alpha must be non-negative, got {alpha}")));
    }
    let cls = classification(graph, embedding, classifier, labels, kind)?;
    let classification = graph.value(cls).item();
    if alpha == 0.0 {
        return Ok(CombinedLoss {
            total: cls,
            breakdown: LossBreakdown { classification, feature_match: 0.0, alpha, total: classification },
        });
    }
    let teacher = teacher_features
        .ok_or_else(|| Error::invalid("alpha > 0 requires teacher features"))?
        .clone();
    let t = graph.constant(teacher);
    let feat = feature_match(graph, student_features, t)?;
    let feature_match = graph.value(feat).item();
    let weighted = graph.scale(feat, alpha)?;
    let total = graph.add(cls, weighted)?;
    Ok(CombinedLoss {
        total,
        breakdown: LossBreakdown { classification, feature_match, alpha, total: graph.value(total).item() },
    })
}
