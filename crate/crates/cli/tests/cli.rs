use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = "\
model.widths = 4,8
model.strides = 2,2
model.embed_dim = 8
data.num_ids = 8
data.per_id = 6
data.base_res = 32
data.train_ids = 5
data.eval_per_id = 2
train.epochs = 1
train.batch_size = 8
train.teacher_resolution = 32
train.student_resolution = 16
train.student_epochs = 1
cost.resolutions = 32,16
ladder.resolutions = 32,16
";

fn bin(args: &[&str], config: Option<&Path>, output: &Path) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_resdistill"));
    if let Some(c) = config {
        cmd.arg("--config").arg(c);
    }
    cmd.arg("--output").arg(output).args(args).env("RD_LOG", "quiet").output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.conf");
    std::fs::write(&p, TINY).unwrap();
    p
}

#[test]
fn occupied_output_needs_force() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("cost");
    assert!(bin(&["cost"], None, &out).status.success());
    let second = bin(&["cost"], None, &out);
    assert_eq!(second.status.code(), Some(1));
    let msg = stderr(&second);
    assert!(msg.starts_with("error: ") && msg.contains("--force"), "{msg}");
    assert_eq!(msg.trim_end().lines().count(), 1);
    assert!(bin(&["cost", "--force"], None, &out).status.success());
    let csv = std::fs::read_to_string(out.join("cost.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);
    assert!(out.join("config.resolved").exists());
}

#[test]
fn config_errors_name_file_line_and_key() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("bad.conf");
    std::fs::write(&conf, "train.epochs = 3\ntrain.epoch = 4\n").unwrap();
    let o = bin(&["cost"], Some(&conf), &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(1));
    let msg = stderr(&o);
    assert!(msg.contains("bad.conf:2") && msg.contains("train.epoch"), "{msg}");
    assert!(!dir.path().join("out").exists());
}

#[test]
fn teacher_student_evaluate_extract_report() {
    let dir = tempfile::tempdir().unwrap();
    let conf = tiny(dir.path());
    let t_out = dir.path().join("teacher");
    let o = bin(&["train-teacher"], Some(&conf), &t_out);
    assert!(o.status.success(), "{}", stderr(&o));
    let ckpt = t_out.join("teacher.rdt");
    for f in ["teacher.rdt", "logs/teacher.csv", "metrics.csv", "det.csv", "open_set.csv", "cmc.csv"] {
        assert!(t_out.join(f).exists(), "missing {f}");
    }

    let s_out = dir.path().join("student");
    let o = bin(&["train-student", "--teacher", ckpt.to_str().unwrap(), "--regime", "kd_kt"], Some(&conf), &s_out);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(s_out.join("kd_kt_16.rdt").exists());
    let metrics = std::fs::read_to_string(s_out.join("metrics.csv")).unwrap();
    assert!(metrics.lines().skip(1).all(|l| l.contains(",16,kd_kt,")), "{metrics}");

    let evals: Vec<String> = ["e1", "e2"]
        .iter()
        .map(|name| {
            let out = dir.path().join(name);
            let o = bin(&["evaluate", "--checkpoint", ckpt.to_str().unwrap(), "--label", "teacher"], Some(&conf), &out);
            assert!(o.status.success(), "{}", stderr(&o));
            assert!(out.join("det.svg").exists());
            std::fs::read_to_string(out.join("metrics.csv")).unwrap()
        })
        .collect();
    assert_eq!(evals[0], evals[1]);
    assert_eq!(evals[0], std::fs::read_to_string(t_out.join("metrics.csv")).unwrap());

    let x_out = dir.path().join("extract");
    let o = bin(&["extract", "--checkpoint", ckpt.to_str().unwrap(), "--resolution", "16"], Some(&conf), &x_out);
    assert!(o.status.success(), "{}", stderr(&o));
    let emb = std::fs::read_to_string(x_out.join("embeddings.csv")).unwrap();
    assert_eq!(emb.lines().count(), 1 + 8 * 6);
    assert_eq!(emb.lines().next().unwrap().split(',').count(), 4 + 8);
    let templates = std::fs::read_to_string(x_out.join("templates.csv")).unwrap();
    assert_eq!(templates.lines().count(), 1 + 8);

    let r_out = dir.path().join("report");
    let o = bin(&["report", "--input", t_out.to_str().unwrap()], Some(&conf), &r_out);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(std::fs::read_to_string(r_out.join("report.md")).unwrap().contains("teacher"));
    assert_eq!(std::fs::read_to_string(r_out.join("metrics.csv")).unwrap(), evals[0]);
}

#[test]
fn student_rejects_mismatched_teacher() {
    let dir = tempfile::tempdir().unwrap();
    let conf = tiny(dir.path());
    let wrong = dir.path().join("wrong.rdt");
    std::fs::write(&wrong, b"RDT1 truncated").unwrap();
    let o = bin(&["train-student", "--teacher", wrong.to_str().unwrap(), "--regime", "kt"], Some(&conf), &dir.path().join("s"));
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("wrong.rdt"), "{}", stderr(&o));
    let missing = bin(&["evaluate", "--checkpoint", "/nonexistent.rdt"], Some(&conf), &dir.path().join("e"));
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn gradcheck_passes_and_records_every_check() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("g");
    let o = bin(&["gradcheck"], None, &out);
    assert!(o.status.success(), "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    let csv = std::fs::read_to_string(out.join("gradcheck.csv")).unwrap();
    assert_eq!(csv.lines().count() - 1, stdout.lines().count());
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",true")), "{csv}");
}
