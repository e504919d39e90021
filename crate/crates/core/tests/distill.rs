use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use resdistill::data::{
    generate_synthetic, make_pairs, make_protocol, Dataset, DatasetManifest, ManifestRecord, ResolutionPair,
    SyntheticConfig,
};
use resdistill::distill::{
    distill_loop, init_student, run_ladder, teacher_features, train_student, train_teacher, FeaturePoint, LadderPlan,
    RegimeConfig, RegimeKind, StudentInit, TrainConfig, TEACHER_LABEL,
};
use resdistill::eval::EvalConfig;
use resdistill::losses::ClassifierKind;
use resdistill::nn::{build, forward_embed, forward_features, ModelConfig, ParameterSet};
use resdistill::tensor::{Mode, Tensor};

const T_RES: usize = 16;
const S_RES: usize = 8;

fn model() -> ModelConfig {
    ModelConfig::uniform(1, &[4, 8], 3, 2, 1, 8)
}

fn dataset() -> Dataset {
    generate_synthetic(&SyntheticConfig { num_ids: 6, per_id: 5, base_res: 32, channels: 1, seed: 11 }).unwrap()
}

fn cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 8,
        teacher_resolution: T_RES,
        student_resolution: S_RES,
        ..TrainConfig::default()
    }
}

fn teacher(ds: &Dataset) -> ParameterSet {
    let c = TrainConfig { student_resolution: T_RES, ..cfg(2) };
    train_teacher(&model(), ds, &c).unwrap().0
}

fn pairs(ds: &Dataset) -> Vec<ResolutionPair> {
    make_pairs(ds, T_RES, S_RES).unwrap()
}

fn is_running(name: &str) -> bool {
    name.contains("running")
}

#[test]
fn regime_rules() {
    use RegimeKind::*;
    use StudentInit::*;
    for (kind, alpha, init) in [(Scratch, 0.0, Random), (Kd, 0.1, Random), (Kt, 0.0, FromTeacher), (KdKt, 0.1, FromTeacher)] {
        assert!(RegimeConfig::new(kind, alpha, init).is_ok(), "{kind}");
    }
    for (kind, alpha, init) in [(Scratch, 0.1, Random), (Kd, 0.0, Random), (Kt, 0.0, Random), (KdKt, 0.1, Random)] {
        assert!(RegimeConfig::new(kind, alpha, init).is_err(), "{kind} {alpha} {init:?}");
    }
    assert!(RegimeConfig::new(Kd, -1.0, Random).is_err());
    assert!(RegimeConfig::new(Kd, f64::NAN, Random).is_err());
    assert_eq!(RegimeConfig::standard(Kt, 0.5).unwrap().alpha(), 0.0);
    assert_eq!(RegimeConfig::standard(KdKt, 0.5).unwrap().alpha(), 0.5);
    assert_eq!("kd_kt".parse::<RegimeKind>().unwrap(), KdKt);
}

#[test]
fn teacher_training_is_deterministic() {
    let ds = dataset();
    let c = TrainConfig { student_resolution: T_RES, ..cfg(2) };
    let (a, la) = train_teacher(&model(), &ds, &c).unwrap();
    let (b, lb) = train_teacher(&model(), &ds, &c).unwrap();
    assert_eq!(a.digest(), b.digest());
    let losses = |l: &resdistill::distill::TrainLog| l.records.iter().map(|r| r.loss.total).collect::<Vec<_>>();
    assert_eq!(losses(&la), losses(&lb));
    let (c2, _) = train_teacher(&model(), &ds, &TrainConfig { seed: 1, ..c }).unwrap();
    assert_ne!(a.digest(), c2.digest());
}

#[test]
fn zero_learning_rate_only_moves_running_statistics() {
    let ds = dataset();
    let m = model();
    let start = build(&m, 6, 3).unwrap();
    let c = TrainConfig { learning_rate: 0.0, ..cfg(2) };
    let (after, _) = distill_loop(&m, None, start.clone(), &pairs(&ds), 0.0, &c).unwrap();
    let mut running_moved = false;
    for ((name, a), (_, b)) in start.iter().zip(after.iter()) {
        if is_running(name) {
            running_moved |= a != b;
        } else {
            assert_eq!(a, b, "{name} changed");
        }
    }
    assert!(running_moved);
}

#[test]
fn students_never_modify_the_teacher() {
    let ds = dataset();
    let m = model();
    let t = teacher(&ds);
    let digest = t.digest();
    for kind in RegimeKind::ALL {
        let regime = RegimeConfig::standard(kind, 0.1).unwrap();
        let init = init_student(&regime, &m, &t, 9).unwrap();
        let (s, _) = train_student(&m, &regime, &t, init, &pairs(&ds), &cfg(1)).unwrap();
        assert_eq!(t.digest(), digest);
        assert_ne!(s.digest(), digest);
    }
}

#[test]
fn transferred_student_reproduces_teacher_only_at_teacher_resolution() {
    let ds = dataset();
    let m = model();
    let t = teacher(&ds);
    let regime = RegimeConfig::standard(RegimeKind::Kt, 0.0).unwrap();
    let s = init_student(&regime, &m, &t, 0).unwrap();
    let p = pairs(&ds);
    let x_t = Tensor::stack(&p.iter().map(|q| &q.x_t).collect::<Vec<_>>()).unwrap();
    let x_s = Tensor::stack(&p.iter().map(|q| &q.x_s).collect::<Vec<_>>()).unwrap();
    let teacher_emb = forward_embed(&m, &t, &x_t, Mode::Eval).unwrap();
    assert_eq!(forward_embed(&m, &s, &x_t, Mode::Eval).unwrap(), teacher_emb);
    let low = forward_embed(&m, &s, &x_s, Mode::Eval).unwrap();
    assert!(low.max_abs_diff(&teacher_emb) > 1e-3);
}

#[test]
fn alpha_zero_ignores_the_teacher() {
    let ds = dataset();
    let m = model();
    let p = pairs(&ds);
    let init = build(&m, 6, 5).unwrap();
    let t = teacher(&ds);
    let mut scrambled = t.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let noise = Normal::new(0.0, 5.0).unwrap();
    for name in scrambled.trainable_names() {
        for v in scrambled.get_mut(&name).unwrap().data_mut() {
            *v = noise.sample(&mut rng);
        }
    }
    let (none, _) = distill_loop(&m, None, init.clone(), &p, 0.0, &cfg(2)).unwrap();
    let (real, _) = distill_loop(&m, Some(&t), init.clone(), &p, 0.0, &cfg(2)).unwrap();
    let (junk, _) = distill_loop(&m, Some(&scrambled), init.clone(), &p, 0.0, &cfg(2)).unwrap();
    assert_eq!(none.digest(), real.digest());
    assert_eq!(none.digest(), junk.digest());

    // scratch is KD with alpha = 0
    let scratch = RegimeConfig::standard(RegimeKind::Scratch, 0.0).unwrap();
    let (via_regime, _) = train_student(&m, &scratch, &t, init, &p, &cfg(2)).unwrap();
    assert_eq!(via_regime.digest(), none.digest());

    assert!(distill_loop(&m, None, build(&m, 6, 5).unwrap(), &p, 0.1, &cfg(1)).is_err());
}

#[test]
fn cached_teacher_features_match_single_image_passes() {
    let ds = dataset();
    let m = model();
    let t = teacher(&ds);
    let images: Vec<Tensor> = pairs(&ds).into_iter().map(|p| p.x_t).collect();
    for point in FeaturePoint::ALL {
        let cache = teacher_features(&m, &t, &images, point).unwrap();
        assert_eq!(cache.shape()[0], images.len());
        for (i, img) in images.iter().enumerate() {
            let f = forward_features(&m, &t, &Tensor::stack(&[img]).unwrap(), Mode::Eval).unwrap();
            let row: Vec<f64> = match point {
                FeaturePoint::Pooled => f.pooled.row(0).to_vec(),
                FeaturePoint::Embedding => f.embedding.row(0).to_vec(),
                FeaturePoint::NormalizedEmbedding => {
                    let e = f.embedding.row(0);
                    let n = e.iter().map(|v| v * v).sum::<f64>().sqrt();
                    e.iter().map(|v| v / n).collect()
                }
            };
            for (a, b) in cache.row(i).iter().zip(&row) {
                assert_eq!(a, b, "{point:?} row {i}");
            }
        }
    }
}

#[test]
fn initialisation_follows_the_regime() {
    let ds = dataset();
    let m = model();
    let t = teacher(&ds);
    for kind in [RegimeKind::Scratch, RegimeKind::Kd] {
        let s = init_student(&RegimeConfig::standard(kind, 0.1).unwrap(), &m, &t, 17).unwrap();
        assert_eq!(s, build(&m, 6, 17).unwrap());
        assert_ne!(s.digest(), t.digest());
    }
    for kind in [RegimeKind::Kt, RegimeKind::KdKt] {
        let s = init_student(&RegimeConfig::standard(kind, 0.1).unwrap(), &m, &t, 17).unwrap();
        assert_eq!(s.digest(), t.digest());
    }
}

#[test]
fn ladder_cells_follow_the_plan() {
    let ds = dataset();
    let m = model();
    let protocol = make_protocol(&ds, 4, 2, 0).unwrap();
    let regimes = [RegimeKind::Scratch, RegimeKind::Kt]
        .iter()
        .map(|&k| (RegimeConfig::standard(k, 0.1).unwrap(), 1))
        .collect::<Vec<_>>();
    let eval = EvalConfig { far_targets: vec![0.1], fpir_targets: vec![0.1], ranks: vec![1], ..EvalConfig::default() };
    let plan = LadderPlan { resolutions: vec![T_RES, S_RES], regimes: regimes.clone(), student_learning_rate: 0.02 };
    let r = run_ladder(&m, &protocol, &plan, &cfg(1), &eval).unwrap();
    let labels: Vec<(String, usize)> = r.cells.iter().map(|c| (c.regime.clone(), c.resolution)).collect();
    assert_eq!(
        labels,
        vec![(TEACHER_LABEL.into(), T_RES), ("scratch".into(), S_RES), ("kt".into(), S_RES)]
    );
    assert_eq!(r.cost.len(), 2);
    assert_eq!(r.rows().len(), 3 * 4);
    let again = run_ladder(&m, &protocol, &plan, &cfg(1), &eval).unwrap();
    assert_eq!(again.rows(), r.rows());

    let single = LadderPlan { resolutions: vec![T_RES], regimes, student_learning_rate: 0.02 };
    let r = run_ladder(&m, &protocol, &single, &cfg(1), &eval).unwrap();
    assert_eq!(r.cells.len(), 1);
    assert_eq!(r.cells[0].regime, TEACHER_LABEL);

    let bad = LadderPlan { resolutions: vec![S_RES, T_RES], ..plan };
    assert!(run_ladder(&m, &protocol, &bad, &cfg(1), &eval).is_err());
}

/// Two identities: a bright left half or a bright right half, plus noise.
fn halves(per_id: usize) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let noise = Normal::new(0.0, 0.1).unwrap();
    let (mut images, mut records) = (Vec::new(), Vec::new());
    for i in 0..2 * per_id {
        let id = i % 2;
        let data = (0..T_RES * T_RES)
            .map(|p| {
                let left = p % T_RES < T_RES / 2;
                let base = if left == (id == 0) { 1.0 } else { 0.0 };
                base + noise.sample(&mut rng)
            })
            .collect();
        images.push(Tensor::new(vec![1, T_RES, T_RES], data).unwrap());
        records.push(ManifestRecord {
            image_path: PathBuf::from(format!("{i}.pgm")),
            identity: id,
            media_id: i as u64,
            detector_score: 1.0,
        });
    }
    Dataset { images, manifest: DatasetManifest { records } }
}

#[test]
fn separable_pair_is_learned() {
    let ds = halves(10);
    let c = TrainConfig {
        epochs: 30,
        cls_kind: ClassifierKind::Softmax,
        student_resolution: T_RES,
        ..cfg(30)
    };
    let (_, log) = train_teacher(&model(), &ds, &c).unwrap();
    let reached = log.records.iter().position(|r| r.accuracy == 1.0);
    assert!(reached.is_some(), "final accuracy {:?}", log.final_accuracy());
    assert!(log.records.last().unwrap().loss.total < log.records[0].loss.total);
}
