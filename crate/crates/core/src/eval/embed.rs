use rayon::prelude::*;

use crate::data::horizontal_flip;
use crate::error::{Error, Result};
use crate::nn::{forward_embed, ModelConfig, ParameterSet};
use crate::tensor::{Mode, Tensor};

/// Images per forward pass during extraction. Fixed so results never depend
/// on how work is scheduled.
pub const EXTRACT_BATCH: usize = 64;

const NORM_FLOOR: f64 = 1e-12;

pub fn normalize(v: &[f64]) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_FLOOR);
    v.iter().map(|x| x / norm).collect()
}

/// L2-normalised eval-mode embeddings, one row per image. With `flip`, each
/// row is the normalised mean of the image's and its mirror's embeddings.
pub fn extract_embeddings(
    config: &ModelConfig,
    params: &ParameterSet,
    images: &[Tensor],
    flip: bool,
) -> Result<Tensor> {
    if images.is_empty() {
        return Err(Error::invalid("no images to embed"));
    }
    let chunks: Vec<&[Tensor]> = images.chunks(EXTRACT_BATCH).collect();
    let rows: Vec<Vec<Vec<f64>>> = chunks
        .par_iter()
        .map(|chunk| {
            let batch = Tensor::stack(&chunk.iter().collect::<Vec<_>>())?;
            let e = forward_embed(config, params, &batch, Mode::Eval)?;
            let d = e.shape()[1];
            let raw: Vec<Vec<f64>> = if flip {
                let mirrored: Vec<Tensor> = chunk.iter().map(horizontal_flip).collect();
                let f = forward_embed(config, params, &Tensor::stack(&mirrored.iter().collect::<Vec<_>>())?, Mode::Eval)?;
                e.data()
                    .chunks(d)
                    .zip(f.data().chunks(d))
                    .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x + y) / 2.0).collect())
                    .collect()
            } else {
                e.data().chunks(d).map(<[f64]>::to_vec).collect()
            };
            Ok(raw.iter().map(|r| normalize(r)).collect())
        })
        .collect::<Result<_>>()?;
    let rows: Vec<Vec<f64>> = rows.into_iter().flatten().collect();
    let d = rows[0].len();
    Tensor::new(vec![rows.len(), d], rows.into_iter().flatten().collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fusion {
    Average,
    DetectorScore,
}

impl Fusion {
    pub fn as_str(self) -> &'static str {
        match self {
            Fusion::Average => "average",
            Fusion::DetectorScore => "detector_score",
        }
    }
}

impl std::str::FromStr for Fusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "average" => Ok(Fusion::Average),
            "detector_score" => Ok(Fusion::DetectorScore),
            _ => Err(Error::invalid(format!("unknown fusion `{s}`; expected average or detector_score"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Template {
    pub subject_id: usize,
    /// Unit-norm fused embedding.
    pub vector: Vec<f64>,
    pub source_count: usize,
}

impl Template {
    /// A template from one embedding.
    pub fn single(subject_id: usize, embedding: &[f64]) -> Self {
        Template { subject_id, vector: normalize(embedding), source_count: 1 }
    }
}

/// Fuses embeddings first within each media group (plain mean), then across
/// media: uniform mean, or weighted by each media's mean detector score.
/// Media are taken in order of first appearance.
pub fn build_template(
    subject_id: usize,
    embeddings: &[&[f64]],
    media_ids: &[u64],
    detector_scores: &[f64],
    fusion: Fusion,
) -> Result<Template> {
    let n = embeddings.len();
    if n == 0 {
        return Err(Error::invalid("a template needs at least one embedding"));
    }
    if media_ids.len() != n || detector_scores.len() != n {
        return Err(Error::invalid(format!(
            "template inputs disagree: {n} embeddings, {} media ids, {} detector scores",
            media_ids.len(),
            detector_scores.len()
        )));
    }
    let d = embeddings[0].len();
    if embeddings.iter().any(|e| e.len() != d) {
        return Err(Error::invalid("template embeddings differ in dimension"));
    }
    let mut order: Vec<u64> = Vec::new();
    for &m in media_ids {
        if !order.contains(&m) {
            order.push(m);
        }
    }
    let mut media_vectors = Vec::with_capacity(order.len());
    let mut media_scores = Vec::with_capacity(order.len());
    for &m in &order {
        let members: Vec<usize> = (0..n).filter(|&i| media_ids[i] == m).collect();
        let k = members.len() as f64;
        let mut v = vec![0.0; d];
        for &i in &members {
            for (acc, x) in v.iter_mut().zip(embeddings[i]) {
                *acc += x;
            }
        }
        media_vectors.push(v.into_iter().map(|x| x / k).collect::<Vec<_>>());
        media_scores.push(members.iter().map(|&i| detector_scores[i]).sum::<f64>() / k);
    }
    let weights: Vec<f64> = match fusion {
        Fusion::Average => vec![1.0 / order.len() as f64; order.len()],
        Fusion::DetectorScore => {
            let total: f64 = media_scores.iter().sum();
            if total <= 0.0 {
                return Err(Error::invalid(format!(
                    "subject {subject_id}: all detector scores are zero; detector_score fusion is undefined"
                )));
            }
            media_scores.iter().map(|s| s / total).collect()
        }
    };
    let mut fused = vec![0.0; d];
    for (v, w) in media_vectors.iter().zip(&weights) {
        for (acc, x) in fused.iter_mut().zip(v) {
            *acc += w * x;
        }
    }
    Ok(Template { subject_id, vector: normalize(&fused), source_count: n })
}

pub fn cosine_similarity(a: &Template, b: &Template) -> f64 {
    a.vector.iter().zip(&b.vector).map(|(x, y)| x * y).sum()
}
