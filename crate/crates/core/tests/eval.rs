use proptest::prelude::*;
use resdistill::eval::{
    build_template, det_curve, metrics_csv, open_set_from_outcomes, parse_metrics_csv, percent, rank_probe,
    sort_rows, tar_at_far, verification_scores, Fusion, MetricRow, ProbeOutcome, ScoreSet, Template,
};

/// Straight scan over candidate thresholds in ascending order.
fn oracle_threshold(all: &[f64], negatives: &[f64], f: f64) -> f64 {
    let mut c: Vec<f64> = all.to_vec();
    c.sort_by(f64::total_cmp);
    c.dedup();
    c.push(f64::INFINITY);
    let n = negatives.len() as f64;
    for t in c {
        let k = negatives.iter().filter(|&&s| s >= t).count() as f64;
        if k / n <= f {
            return t;
        }
    }
    unreachable!("+inf always qualifies")
}

fn frac_at_least(v: &[f64], t: f64) -> f64 {
    v.iter().filter(|&&s| s >= t).count() as f64 / v.len() as f64
}

fn oracle_tar(gen: &[f64], imp: &[f64], f: f64) -> (f64, f64) {
    let all: Vec<f64> = gen.iter().chain(imp).copied().collect();
    let t = oracle_threshold(&all, imp, f);
    (t, frac_at_least(gen, t))
}

/// Rank 1 means no other entry beats the correct one, ties going to the lower index.
fn oracle_rank1(scores: &[f64], c: usize) -> bool {
    scores.iter().enumerate().all(|(j, &s)| s < scores[c] || (s == scores[c] && j >= c))
}

fn max_of(v: &[f64]) -> f64 {
    v.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
}

fn oracle_dir(known: &[(Vec<f64>, usize)], unknown: &[Vec<f64>], f: f64) -> f64 {
    let kmax: Vec<f64> = known.iter().map(|(s, _)| max_of(s)).collect();
    let umax: Vec<f64> = unknown.iter().map(|s| max_of(s)).collect();
    let all: Vec<f64> = kmax.iter().chain(&umax).copied().collect();
    let t = oracle_threshold(&all, &umax, f);
    known.iter().filter(|(s, c)| oracle_rank1(s, *c) && max_of(s) >= t).count() as f64 / known.len() as f64
}

fn outcomes(known: &[(Vec<f64>, usize)], unknown: &[Vec<f64>]) -> (Vec<ProbeOutcome>, Vec<ProbeOutcome>) {
    (
        known.iter().map(|(s, c)| rank_probe(s, Some(*c)).unwrap()).collect(),
        unknown.iter().map(|s| rank_probe(s, None).unwrap()).collect(),
    )
}

/// Scores on a 1/64 grid so that ties occur and affine maps stay exact.
fn grid_scores(len: impl Into<prop::collection::SizeRange>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((-64i32..=64).prop_map(|k| k as f64 / 64.0), len)
}

fn open_set_case() -> impl Strategy<Value = (Vec<(Vec<f64>, usize)>, Vec<Vec<f64>>)> {
    (2usize..6).prop_flat_map(|g| {
        (
            prop::collection::vec((grid_scores(g), 0..g), 1..15),
            prop::collection::vec(grid_scores(g), 1..15),
        )
    })
}

#[test]
fn tar_small_example() {
    let s = ScoreSet { genuine: vec![0.9, 0.8, 0.4, 0.2], imposter: vec![0.1, 0.3, 0.5, 0.7] };
    let pts = tar_at_far(&s, &[0.0, 0.25, 0.5, 1.0]).unwrap();
    let got: Vec<(f64, f64)> = pts.iter().map(|p| (p.threshold, p.achieved_metric)).collect();
    assert_eq!(got, vec![(0.8, 0.5), (0.7, 0.5), (0.4, 0.75), (0.1, 1.0)]);
    assert_eq!(pts[1].false_rate, 0.25);
    assert!(!pts[0].achievable && pts[1].achievable);
}

#[test]
fn tar_rejects_bad_inputs() {
    let ok = ScoreSet { genuine: vec![0.5], imposter: vec![0.1] };
    assert!(tar_at_far(&ok, &[1.5]).is_err());
    assert!(tar_at_far(&ScoreSet { genuine: vec![], imposter: vec![0.1] }, &[0.1]).is_err());
    assert!(tar_at_far(&ScoreSet { genuine: vec![f64::NAN], imposter: vec![0.1] }, &[0.1]).is_err());
}

#[test]
fn open_set_small_example() {
    let known = vec![(vec![0.9, 0.1], 0), (vec![0.2, 0.6], 1), (vec![0.7, 0.3], 1)];
    let unknown = vec![vec![0.5, 0.4], vec![0.1, 0.8]];
    let (k, u) = outcomes(&known, &unknown);
    let r = open_set_from_outcomes(&k, &u, &[0.0, 0.5, 1.0], &[1, 2]).unwrap();
    let dir: Vec<f64> = r.points.iter().map(|p| p.achieved_metric).collect();
    assert_eq!(dir, vec![1.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0]);
    assert_eq!(r.cmc, vec![(1, 2.0 / 3.0), (2, 1.0)]);
    assert!(open_set_from_outcomes(&k, &[], &[0.1], &[1]).is_err());
    assert!(open_set_from_outcomes(&k, &[], &[], &[1]).is_ok());
}

#[test]
fn verification_scores_count_pairs() {
    let ts: Vec<Template> =
        [(0, [1.0, 0.0]), (0, [0.8, 0.6]), (1, [0.0, 1.0])].iter().map(|(s, v)| Template::single(*s, v)).collect();
    let s = verification_scores(&ts);
    assert_eq!(s.genuine, vec![0.8]);
    assert_eq!(s.imposter, vec![0.0, 0.6]);
}

#[test]
fn fusion_weights_media_then_subjects() {
    let e: [&[f64]; 3] = [&[1.0, 0.0], &[0.0, 1.0], &[1.0, 0.0]];
    let avg = build_template(7, &e, &[0, 0, 1], &[1.0, 1.0, 3.0], Fusion::Average).unwrap();
    let n = (0.75f64.powi(2) + 0.25f64.powi(2)).sqrt();
    assert!((avg.vector[0] - 0.75 / n).abs() < 1e-15 && (avg.vector[1] - 0.25 / n).abs() < 1e-15);
    assert_eq!((avg.subject_id, avg.source_count), (7, 3));

    let det = build_template(7, &e, &[0, 0, 1], &[1.0, 1.0, 3.0], Fusion::DetectorScore).unwrap();
    let n = (0.875f64.powi(2) + 0.125f64.powi(2)).sqrt();
    assert!((det.vector[0] - 0.875 / n).abs() < 1e-15 && (det.vector[1] - 0.125 / n).abs() < 1e-15);

    assert!(build_template(0, &e, &[0, 0, 1], &[0.0; 3], Fusion::DetectorScore).is_err());
    assert!(build_template(0, &[], &[], &[], Fusion::Average).is_err());
    assert!("detector_score".parse::<Fusion>().unwrap() == Fusion::DetectorScore);
}

#[test]
fn metric_rows_round_trip() {
    let mut rows = vec![
        MetricRow::new("cmc", 32, "kd", 5.0, None, 0.98765),
        MetricRow::new("dir_far", 64, "teacher", 0.01, Some(0.123456789), 0.5),
        MetricRow::new("tar_far", 32, "scratch", 0.001, Some(-0.25), 1.0 / 3.0),
    ];
    let text = metrics_csv(&rows).unwrap();
    let back = parse_metrics_csv(&text).unwrap();
    sort_rows(&mut rows);
    assert_eq!(back, rows);
    assert_eq!(back[0].regime, "teacher");
    assert_eq!(percent(1.0 / 3.0), 33.33);
    assert!(parse_metrics_csv("bad header\n").is_err());
    assert!(metrics_csv(&[MetricRow::new("a,b", 1, "x", 0.1, None, 0.1)]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn tar_matches_exhaustive_scan(gen in grid_scores(1..25), imp in grid_scores(1..25), f in 0.0f64..=1.0) {
        let p = tar_at_far(&ScoreSet { genuine: gen.clone(), imposter: imp.clone() }, &[f]).unwrap()[0];
        let (t, tar) = oracle_tar(&gen, &imp, f);
        prop_assert_eq!(p.threshold, t);
        prop_assert_eq!(p.achieved_metric, tar);
        prop_assert!(p.false_rate <= f);
    }

    #[test]
    fn tar_is_monotone_in_target(gen in grid_scores(1..25), imp in grid_scores(1..25), a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let pts = tar_at_far(&ScoreSet { genuine: gen, imposter: imp }, &[lo, hi]).unwrap();
        prop_assert!(pts[0].achieved_metric <= pts[1].achieved_metric);
        prop_assert!(pts[0].threshold >= pts[1].threshold);
    }

    #[test]
    fn rates_survive_increasing_affine_maps(
        gen in grid_scores(1..20), imp in grid_scores(1..20), scale_exp in -2i32..3, shift in -3i32..3, f in 0.0f64..=1.0,
    ) {
        let map = |v: &[f64]| v.iter().map(|x| x * 2f64.powi(scale_exp) + shift as f64).collect::<Vec<_>>();
        let a = tar_at_far(&ScoreSet { genuine: gen.clone(), imposter: imp.clone() }, &[f]).unwrap()[0];
        let b = tar_at_far(&ScoreSet { genuine: map(&gen), imposter: map(&imp) }, &[f]).unwrap()[0];
        prop_assert_eq!(a.achieved_metric, b.achieved_metric);
        prop_assert_eq!(a.false_rate, b.false_rate);
        let da: Vec<(f64, f64)> = det_curve(&ScoreSet { genuine: gen.clone(), imposter: imp.clone() }).unwrap();
        let db = det_curve(&ScoreSet { genuine: map(&gen), imposter: map(&imp) }).unwrap();
        prop_assert_eq!(da, db);
    }

    #[test]
    fn det_curve_is_monotone(gen in grid_scores(1..25), imp in grid_scores(1..25)) {
        let c = det_curve(&ScoreSet { genuine: gen, imposter: imp }).unwrap();
        prop_assert_eq!(c[0], (0.0, 0.0));
        prop_assert_eq!(*c.last().unwrap(), (1.0, 1.0));
        prop_assert!(c.windows(2).all(|w| w[0].0 <= w[1].0 && w[0].1 <= w[1].1));
    }

    #[test]
    fn dir_matches_exhaustive_scan((known, unknown) in open_set_case(), f in 0.0f64..=1.0) {
        let (k, u) = outcomes(&known, &unknown);
        let r = open_set_from_outcomes(&k, &u, &[f], &[1]).unwrap();
        prop_assert_eq!(r.points[0].achieved_metric, oracle_dir(&known, &unknown, f));
        let rank1 = known.iter().filter(|(s, c)| oracle_rank1(s, *c)).count() as f64 / known.len() as f64;
        prop_assert_eq!(r.cmc[0].1, rank1);
        prop_assert!(r.points[0].achieved_metric <= rank1);
    }

    #[test]
    fn cmc_rises_to_one((known, unknown) in open_set_case()) {
        let (k, u) = outcomes(&known, &unknown);
        let g = known[0].0.len();
        let ranks: Vec<usize> = (1..=g).collect();
        let r = open_set_from_outcomes(&k, &u, &[], &ranks).unwrap();
        prop_assert!(r.cmc.windows(2).all(|w| w[0].1 <= w[1].1));
        prop_assert_eq!(r.cmc[g - 1].1, 1.0);
        for (rank, rate) in &r.cmc {
            let oracle = known
                .iter()
                .filter(|(s, c)| s.iter().enumerate().filter(|&(j, &x)| x > s[*c] || (x == s[*c] && j < *c)).count() < *rank)
                .count() as f64 / known.len() as f64;
            prop_assert_eq!(*rate, oracle);
        }
    }
}
