//! The evaluation protocol applied to one trained network at one resolution.

use crate::data::{split_open_set_enrolled, Dataset};
use crate::error::{Error, Result};
use crate::nn::{ModelConfig, ParameterSet};

use super::embed::{extract_embeddings, Template};
use super::metrics::{
    det_curve, open_set_curve, open_set_from_outcomes, probe_outcomes, tar_at_far, verification_scores,
    OperatingPoint,
};
use super::report::MetricRow;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub far_targets: Vec<f64>,
    pub fpir_targets: Vec<f64>,
    pub ranks: Vec<usize>,
    pub flip: bool,
    pub unknown_fraction: f64,
    pub split_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            far_targets: vec![0.001, 0.01, 0.1],
            fpir_targets: vec![0.01, 0.1],
            ranks: vec![1, 5, 10],
            flip: false,
            unknown_fraction: 1.0,
            split_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    /// 1:1 TAR at each FAR target over all image pairs.
    pub verification: Vec<OperatingPoint>,
    /// Open-set DIR at each FAR target.
    pub dir: Vec<OperatingPoint>,
    /// Open-set TPIR at each FPIR target.
    pub tpir: Vec<OperatingPoint>,
    pub cmc: Vec<(usize, f64)>,
    pub det_curve: Vec<(f64, f64)>,
    pub open_set_curve: Vec<(f64, f64)>,
    /// CMC at every rank up to the gallery size.
    pub cmc_curve: Vec<(usize, f64)>,
}

impl EvalResult {
    pub fn rows(&self, resolution: usize, regime: &str) -> Vec<MetricRow> {
        let point_rows = |protocol: &str, pts: &[OperatingPoint]| -> Vec<MetricRow> {
            pts.iter()
                .map(|p| MetricRow::new(protocol, resolution, regime, p.target_rate, Some(p.threshold), p.achieved_metric))
                .collect()
        };
        let mut rows = point_rows("dir_far", &self.dir);
        rows.extend(point_rows("tpir_fpir", &self.tpir));
        rows.extend(point_rows("tar_far", &self.verification));
        rows.extend(self.cmc.iter().map(|&(k, r)| MetricRow::new("cmc", resolution, regime, k as f64, None, r)));
        rows
    }

    /// DIR at the given FAR target, if it was evaluated.
    pub fn dir_at(&self, far: f64) -> Option<f64> {
        self.dir.iter().find(|p| p.target_rate == far).map(|p| p.achieved_metric)
    }
}

/// Embeds the evaluation images at `resolution` and runs verification over
/// all image pairs and open-set identification against one gallery image per
/// enrolled identity. Every image is its own template.
pub fn evaluate_model(
    config: &ModelConfig,
    params: &ParameterSet,
    eval_data: &Dataset,
    enrolled: &[usize],
    resolution: usize,
    eval: &EvalConfig,
) -> Result<EvalResult> {
    let images = eval_data.at_resolution(resolution)?;
    let emb = extract_embeddings(config, params, &images, eval.flip)?;
    let templates: Vec<Template> = eval_data
        .manifest
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| Template { subject_id: r.identity, vector: emb.row(i).to_vec(), source_count: 1 })
        .collect();

    let scores = verification_scores(&templates);
    let verification = tar_at_far(&scores, &eval.far_targets)?;
    let det = det_curve(&scores)?;

    let split = split_open_set_enrolled(&eval_data.manifest, enrolled, eval.unknown_fraction, eval.split_seed)?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| templates[i].clone()).collect::<Vec<_>>();
    let gallery = pick(&split.gallery);
    let known = probe_outcomes(&gallery, &pick(&split.known_probes), true)?;
    let unknown = probe_outcomes(&gallery, &pick(&split.unknown_probes), false)?;
    if unknown.is_empty() && !(eval.far_targets.is_empty() && eval.fpir_targets.is_empty()) {
        return Err(Error::NoUnknownProbes);
    }
    let dir = open_set_from_outcomes(&known, &unknown, &eval.far_targets, &eval.ranks)?;
    let tpir = open_set_from_outcomes(&known, &unknown, &eval.fpir_targets, &[])?;
    let all_ranks: Vec<usize> = (1..=gallery.len()).collect();
    let cmc_curve = open_set_from_outcomes(&known, &[], &[], &all_ranks)?.cmc;
    Ok(EvalResult {
        verification,
        dir: dir.points,
        tpir: tpir.points,
        cmc: dir.cmc,
        det_curve: det,
        open_set_curve: open_set_curve(&known, &unknown)?,
        cmc_curve,
    })
}
