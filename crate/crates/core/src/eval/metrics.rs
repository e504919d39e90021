//! Threshold-based verification and identification rates.
//!
//! For a target false rate `f` over `n` negative scores, the threshold τ is
//! the smallest candidate score for which `#(negatives ≥ τ) / n ≤ f`, where
//! the candidates are every observed score (positive or negative) plus +∞.
//! A score is accepted when it is `≥ τ`.

use crate::error::{Error, Result};

use super::embed::{cosine_similarity, Template};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreSet {
    pub genuine: Vec<f64>,
    pub imposter: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OperatingPoint {
    pub target_rate: f64,
    pub threshold: f64,
    /// TAR, DIR or TPIR at `threshold`.
    pub achieved_metric: f64,
    /// Empirical FAR or FPIR at `threshold`.
    pub false_rate: f64,
    /// False when the target is below one negative in `n`.
    pub achievable: bool,
}

fn check_scores(name: &str, scores: &[f64]) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::invalid(format!("{name} score list is empty")));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("{name} scores contain a non-finite value")));
    }
    Ok(())
}

fn check_target(f: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&f) {
        return Err(Error::invalid(format!("rate target {f} is outside [0, 1]")));
    }
    Ok(())
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// Number of entries `≥ t` in an ascending slice.
fn count_at_least(sorted: &[f64], t: f64) -> usize {
    sorted.len() - sorted.partition_point(|&s| s < t)
}

/// Sorted distinct candidate thresholds, always ending in +∞.
fn candidates(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut c: Vec<f64> = a.iter().chain(b).copied().collect();
    c.sort_by(f64::total_cmp);
    c.dedup();
    c.push(f64::INFINITY);
    c
}

/// Largest negative count `k` with `k / n ≤ f`.
fn max_false_count(f: f64, n: usize) -> usize {
    let ok = |k: usize| (k as f64) / (n as f64) <= f;
    let mut k = ((f * n as f64).floor() as usize).min(n);
    while k < n && ok(k + 1) {
        k += 1;
    }
    while k > 0 && !ok(k) {
        k -= 1;
    }
    k
}

/// Smallest candidate whose negative count is within `f`.
fn select_threshold(candidates: &[f64], negatives_sorted: &[f64], f: f64) -> f64 {
    let n = negatives_sorted.len();
    let k = max_false_count(f, n);
    if k == n {
        return candidates[0];
    }
    // count(neg ≥ c) ≤ k  ⇔  c exceeds the (k+1)-th largest negative
    let pivot = negatives_sorted[n - k - 1];
    candidates[candidates.partition_point(|&c| c <= pivot)]
}

/// TAR at each FAR target.
pub fn tar_at_far(scores: &ScoreSet, far_targets: &[f64]) -> Result<Vec<OperatingPoint>> {
    check_scores("genuine", &scores.genuine)?;
    check_scores("imposter", &scores.imposter)?;
    let gen = sorted(&scores.genuine);
    let imp = sorted(&scores.imposter);
    let cands = candidates(&gen, &imp);
    let n = imp.len() as f64;
    far_targets
        .iter()
        .map(|&f| {
            check_target(f)?;
            let t = select_threshold(&cands, &imp, f);
            Ok(OperatingPoint {
                target_rate: f,
                threshold: t,
                achieved_metric: count_at_least(&gen, t) as f64 / gen.len() as f64,
                false_rate: count_at_least(&imp, t) as f64 / n,
                achievable: f * n >= 1.0,
            })
        })
        .collect()
}

/// The full DET curve: `(far, tar)` at every candidate threshold, FAR ascending.
pub fn det_curve(scores: &ScoreSet) -> Result<Vec<(f64, f64)>> {
    check_scores("genuine", &scores.genuine)?;
    check_scores("imposter", &scores.imposter)?;
    let gen = sorted(&scores.genuine);
    let imp = sorted(&scores.imposter);
    let mut pts: Vec<(f64, f64)> = candidates(&gen, &imp)
        .iter()
        .rev()
        .map(|&t| {
            (
                count_at_least(&imp, t) as f64 / imp.len() as f64,
                count_at_least(&gen, t) as f64 / gen.len() as f64,
            )
        })
        .collect();
    pts.dedup();
    Ok(pts)
}

/// Genuine and imposter scores over all unordered pairs of templates.
pub fn verification_scores(templates: &[Template]) -> ScoreSet {
    let mut s = ScoreSet::default();
    for i in 0..templates.len() {
        for j in i + 1..templates.len() {
            let score = cosine_similarity(&templates[i], &templates[j]);
            if templates[i].subject_id == templates[j].subject_id {
                s.genuine.push(score);
            } else {
                s.imposter.push(score);
            }
        }
    }
    s
}

/// A probe's result against the gallery.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeOutcome {
    /// Argmax gallery index, ties to the lowest index.
    pub best_index: usize,
    pub best_score: f64,
    /// 1-based rank of the correct gallery entry; `None` for unknown probes.
    pub correct_rank: Option<usize>,
}

/// Ranks one probe's gallery scores. `correct` is the gallery index of the
/// probe's identity, if enrolled.
pub fn rank_probe(scores: &[f64], correct: Option<usize>) -> Result<ProbeOutcome> {
    check_scores("gallery", scores)?;
    let mut best_index = 0;
    for (j, &s) in scores.iter().enumerate() {
        if s > scores[best_index] {
            best_index = j;
        }
    }
    let correct_rank = match correct {
        None => None,
        Some(c) if c >= scores.len() => {
            return Err(Error::invalid(format!("correct gallery index {c} out of range {}", scores.len())));
        }
        Some(c) => {
            let sc = scores[c];
            let ahead = scores.iter().enumerate().filter(|&(j, &s)| s > sc || (s == sc && j < c)).count();
            Some(ahead + 1)
        }
    };
    Ok(ProbeOutcome { best_index, best_score: scores[best_index], correct_rank })
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpenSetResult {
    /// One point per false-rate target (DIR@FAR or TPIR@FPIR).
    pub points: Vec<OperatingPoint>,
    /// `(k, rate)` for each requested rank.
    pub cmc: Vec<(usize, f64)>,
}

/// Open-set rates from probe outcomes. A known probe counts as detected and
/// identified at τ when its correct identity is rank 1 and its best score is `≥ τ`.
pub fn open_set_from_outcomes(
    known: &[ProbeOutcome],
    unknown: &[ProbeOutcome],
    targets: &[f64],
    ranks: &[usize],
) -> Result<OpenSetResult> {
    if known.is_empty() {
        return Err(Error::invalid("open-set evaluation needs at least one known probe"));
    }
    if known.iter().any(|p| p.correct_rank.is_none()) {
        return Err(Error::invalid("every known probe needs a correct gallery rank"));
    }
    let cmc = ranks
        .iter()
        .map(|&k| {
            if k == 0 {
                return Err(Error::invalid("CMC ranks start at 1"));
            }
            let hits = known.iter().filter(|p| p.correct_rank.is_some_and(|r| r <= k)).count();
            Ok((k, hits as f64 / known.len() as f64))
        })
        .collect::<Result<Vec<_>>>()?;
    if targets.is_empty() {
        return Ok(OpenSetResult { points: Vec::new(), cmc });
    }
    if unknown.is_empty() {
        return Err(Error::NoUnknownProbes);
    }
    let known_scores: Vec<f64> = known.iter().map(|p| p.best_score).collect();
    let unknown_scores = sorted(&unknown.iter().map(|p| p.best_score).collect::<Vec<_>>());
    check_scores("known probe", &known_scores)?;
    check_scores("unknown probe", &unknown_scores)?;
    let hit_scores = sorted(
        &known.iter().filter(|p| p.correct_rank == Some(1)).map(|p| p.best_score).collect::<Vec<_>>(),
    );
    let cands = candidates(&known_scores, &unknown_scores);
    let n = unknown_scores.len() as f64;
    let points = targets
        .iter()
        .map(|&f| {
            check_target(f)?;
            let t = select_threshold(&cands, &unknown_scores, f);
            Ok(OperatingPoint {
                target_rate: f,
                threshold: t,
                achieved_metric: count_at_least(&hit_scores, t) as f64 / known.len() as f64,
                false_rate: count_at_least(&unknown_scores, t) as f64 / n,
                achievable: f * n >= 1.0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(OpenSetResult { points, cmc })
}

/// Scores every probe against every gallery template.
pub fn probe_outcomes(gallery: &[Template], probes: &[Template], known: bool) -> Result<Vec<ProbeOutcome>> {
    if gallery.is_empty() {
        return Err(Error::invalid("gallery is empty"));
    }
    probes
        .iter()
        .map(|p| {
            let scores: Vec<f64> = gallery.iter().map(|g| cosine_similarity(g, p)).collect();
            let correct = gallery.iter().position(|g| g.subject_id == p.subject_id);
            if known && correct.is_none() {
                return Err(Error::invalid(format!("known probe of subject {} has no gallery entry", p.subject_id)));
            }
            if !known && correct.is_some() {
                return Err(Error::invalid(format!("unknown probe of subject {} is enrolled", p.subject_id)));
            }
            rank_probe(&scores, correct)
        })
        .collect()
}

/// Open-set identification of known and unknown probes against a gallery.
pub fn open_set_identify(
    gallery: &[Template],
    known_probes: &[Template],
    unknown_probes: &[Template],
    targets: &[f64],
    ranks: &[usize],
) -> Result<OpenSetResult> {
    let known = probe_outcomes(gallery, known_probes, true)?;
    let unknown = probe_outcomes(gallery, unknown_probes, false)?;
    open_set_from_outcomes(&known, &unknown, targets, ranks)
}

/// `(false rate, identification rate)` at every candidate threshold, false rate ascending.
pub fn open_set_curve(known: &[ProbeOutcome], unknown: &[ProbeOutcome]) -> Result<Vec<(f64, f64)>> {
    if unknown.is_empty() {
        return Err(Error::NoUnknownProbes);
    }
    let known_scores: Vec<f64> = known.iter().map(|p| p.best_score).collect();
    let unknown_scores = sorted(&unknown.iter().map(|p| p.best_score).collect::<Vec<_>>());
    let hits = sorted(
        &known.iter().filter(|p| p.correct_rank == Some(1)).map(|p| p.best_score).collect::<Vec<_>>(),
    );
    let mut pts: Vec<(f64, f64)> = candidates(&known_scores, &unknown_scores)
        .iter()
        .rev()
        .map(|&t| {
            (
                count_at_least(&unknown_scores, t) as f64 / unknown_scores.len() as f64,
                count_at_least(&hits, t) as f64 / known.len().max(1) as f64,
            )
        })
        .collect();
    pts.dedup();
    Ok(pts)
}
