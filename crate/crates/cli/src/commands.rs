//! One function per subcommand. Each reads only its inputs and writes only
//! under the claimed output directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use resdistill::cost::{cost_csv, cost_table};
use resdistill::data::{generate_synthetic, load_manifest, make_pairs, make_protocol, Dataset, Protocol, SyntheticConfig};
use resdistill::distill::{init_student, run_ladder, train_student, train_teacher, LadderPlan, RegimeKind, TEACHER_LABEL};
use resdistill::eval::{
    build_template, curve_csv, evaluate_model, extract_embeddings, metrics_csv, parse_metrics_csv, sort_rows,
    svg_plot, EvalResult, MetricRow, PlotSpec, Series,
};
use resdistill::gradsuite;
use resdistill::nn::{build, ParameterSet};

use crate::config::{DataSource, ExperimentConfig};
use crate::output::OutputDir;

pub const RESOLVED_CONFIG: &str = "config.resolved";
pub const TEACHER_CHECKPOINT: &str = "teacher.rdt";

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let d = &cfg.data;
    let ds = match &d.source {
        DataSource::Synthetic => generate_synthetic(&SyntheticConfig {
            num_ids: d.num_ids,
            per_id: d.per_id,
            base_res: d.base_res,
            channels: d.channels,
            seed: d.seed,
        })?,
        DataSource::Manifest(path) => {
            let manifest = load_manifest(path)?;
            Dataset::from_manifest(manifest).with_context(|| format!("loading images listed in {}", path.display()))?
        }
    };
    if ds.channels() != cfg.model.in_channels {
        bail!("images have {} channels but model.in_channels is {}", ds.channels(), cfg.model.in_channels);
    }
    Ok(ds)
}

pub fn load_protocol(cfg: &ExperimentConfig) -> Result<Protocol> {
    let ds = load_dataset(cfg)?;
    Ok(make_protocol(&ds, cfg.data.train_ids, cfg.data.eval_per_id, cfg.data.split_seed)?)
}

fn begin(cfg: &ExperimentConfig, command: &str, force: bool) -> Result<OutputDir> {
    let out = OutputDir::claim(&cfg.output_dir, command, force)?;
    out.write_str(RESOLVED_CONFIG, &cfg.dump())?;
    Ok(out)
}

fn load_checkpoint(cfg: &ExperimentConfig, path: &Path) -> Result<ParameterSet> {
    if !path.exists() {
        bail!("checkpoint {} does not exist", path.display());
    }
    ParameterSet::load_for_config(path, &cfg.model).with_context(|| format!("checkpoint {} does not fit the model config", path.display()))
}

fn write_eval(out: &OutputDir, prefix: &str, label: &str, resolution: usize, eval: &EvalResult) -> Result<()> {
    write_eval_curves(out, prefix, eval)?;
    let mut rows = eval.rows(resolution, label);
    sort_rows(&mut rows);
    out.write_str(&format!("{prefix}metrics.csv"), &metrics_csv(&rows)?)?;
    Ok(())
}

struct Curves<'a> {
    label: String,
    eval: &'a EvalResult,
}

fn write_plots(out: &OutputDir, curves: &[Curves]) -> Result<()> {
    let series = |f: &dyn Fn(&EvalResult) -> Vec<(f64, f64)>| -> Vec<Series> {
        curves.iter().map(|c| Series { label: c.label.clone(), points: f(c.eval) }).collect()
    };
    let det = PlotSpec { title: "Verification", x_label: "FAR", y_label: "TAR", log_x: true };
    out.write_str("det.svg", &svg_plot(&det, &series(&|e| e.det_curve.clone())))?;
    let open = PlotSpec { title: "Open-set identification", x_label: "FPIR", y_label: "TPIR", log_x: true };
    out.write_str("open_set.svg", &svg_plot(&open, &series(&|e| e.open_set_curve.clone())))?;
    let cmc = PlotSpec { title: "CMC", x_label: "rank", y_label: "identification rate", log_x: false };
    out.write_str(
        "cmc.svg",
        &svg_plot(&cmc, &series(&|e| e.cmc_curve.iter().map(|&(k, r)| (k as f64, r)).collect())),
    )?;
    Ok(())
}

pub fn train_teacher_cmd(cfg: &ExperimentConfig, force: bool) -> Result<()> {
    let protocol = load_protocol(cfg)?;
    let out = begin(cfg, "train-teacher", force)?;
    let res = cfg.train.teacher_resolution;
    let tcfg = resdistill::distill::TrainConfig { student_resolution: res, ..cfg.train.clone() };
    log::info!("training teacher at {res}px for {} epochs", tcfg.epochs);
    let (teacher, log) = train_teacher(&cfg.model, &protocol.train, &tcfg)?;
    out.save_checkpoint(TEACHER_CHECKPOINT, &teacher)?;
    out.write_str("logs/teacher.csv", &log.to_csv())?;
    let eval = evaluate_model(&cfg.model, &teacher, &protocol.eval, &protocol.enrolled, res, &cfg.eval)?;
    write_eval(&out, "", TEACHER_LABEL, res, &eval)?;
    Ok(())
}

pub fn train_student_cmd(cfg: &ExperimentConfig, teacher_path: &Path, kind: RegimeKind, force: bool) -> Result<()> {
    let teacher = load_checkpoint(cfg, teacher_path)?;
    let protocol = load_protocol(cfg)?;
    if teacher.num_classes() != cfg.data.train_ids {
        bail!(
            "teacher {} has {} classes but the protocol enrols {} identities",
            teacher_path.display(),
            teacher.num_classes(),
            cfg.data.train_ids
        );
    }
    let out = begin(cfg, "train-student", force)?;
    let regime = cfg.regime(kind)?;
    let res = cfg.train.student_resolution;
    let scfg = cfg.student_train(kind, res);
    let pairs = make_pairs(&protocol.train, scfg.teacher_resolution, res)?;
    let init = init_student(&regime, &cfg.model, &teacher, cfg.train.seed.wrapping_add(1))?;
    log::info!("training {kind} student at {res}px for {} epochs", scfg.epochs);
    let (student, log) = train_student(&cfg.model, &regime, &teacher, init, &pairs, &scfg)?;
    let name = format!("{kind}_{res}");
    out.save_checkpoint(&format!("{name}.rdt"), &student)?;
    out.write_str(&format!("logs/{name}.csv"), &log.to_csv())?;
    let eval = evaluate_model(&cfg.model, &student, &protocol.eval, &protocol.enrolled, res, &cfg.eval)?;
    write_eval(&out, "", kind.as_str(), res, &eval)?;
    Ok(())
}

/// Median of percentages, kept at two decimals.
fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        ((values[n / 2 - 1] + values[n / 2]) / 2.0 * 100.0).round() / 100.0
    }
}

/// One row per (protocol, resolution, regime, target) with the median value
/// over seeds. Thresholds are kept only for a single seed.
pub fn median_rows(per_seed: &[Vec<MetricRow>]) -> Vec<MetricRow> {
    let mut groups: BTreeMap<(String, usize, String, u64), (MetricRow, Vec<f64>)> = BTreeMap::new();
    for rows in per_seed {
        for r in rows {
            let key = (r.protocol.clone(), r.resolution, r.regime.clone(), r.target.to_bits());
            groups.entry(key).or_insert_with(|| (r.clone(), Vec::new())).1.push(r.value);
        }
    }
    let single = per_seed.len() == 1;
    let mut rows: Vec<MetricRow> = groups
        .into_values()
        .map(|(mut row, mut values)| {
            row.value = median(&mut values);
            if !single {
                row.threshold = None;
            }
            row
        })
        .collect();
    sort_rows(&mut rows);
    rows
}

fn select(rows: &[MetricRow], protocols: &[&str]) -> Vec<MetricRow> {
    rows.iter().filter(|r| protocols.contains(&r.protocol.as_str())).cloned().collect()
}

/// Table of DIR@FAR per resolution and regime.
pub const TABLE_DIR: &str = "table1.csv";
/// Table of TPIR@FPIR and CMC per resolution and regime.
pub const TABLE_IDENT: &str = "table7.csv";

fn write_tables(out: &OutputDir, rows: &[MetricRow]) -> Result<()> {
    out.write_str("metrics.csv", &metrics_csv(rows)?)?;
    out.write_str(TABLE_DIR, &metrics_csv(&select(rows, &["dir_far"]))?)?;
    out.write_str(TABLE_IDENT, &metrics_csv(&select(rows, &["tpir_fpir", "cmc"]))?)?;
    Ok(())
}

pub fn ladder_cmd(cfg: &ExperimentConfig, force: bool) -> Result<()> {
    let protocol = load_protocol(cfg)?;
    let out = begin(cfg, "ladder", force)?;
    let plan = LadderPlan {
        resolutions: cfg.ladder.resolutions.clone(),
        regimes: cfg
            .ladder
            .regimes
            .iter()
            .map(|&k| Ok((cfg.regime(k)?, cfg.ladder.epochs_for(k))))
            .collect::<Result<_>>()?,
        student_learning_rate: cfg.student.learning_rate,
    };
    let mut per_seed = Vec::new();
    let mut first = None;
    for &seed in &cfg.ladder.seeds {
        log::info!("ladder seed {seed}");
        let train = resdistill::distill::TrainConfig { seed, ..cfg.train.clone() };
        let result = run_ladder(&cfg.model, &protocol, &plan, &train, &cfg.eval)?;
        let dir = format!("seed_{seed}");
        for cell in &result.cells {
            out.save_checkpoint(&format!("{dir}/{}", cell.checkpoint_name()), &cell.params)?;
            out.write_str(&format!("logs/{dir}/{}_{}.csv", cell.regime, cell.resolution), &cell.log.to_csv())?;
        }
        let mut rows = result.rows();
        sort_rows(&mut rows);
        out.write_str(&format!("{dir}/metrics.csv"), &metrics_csv(&rows)?)?;
        per_seed.push(rows);
        if first.is_none() {
            out.write_str("cost.csv", &cost_csv(&result.cost))?;
            first = Some(result);
        }
    }
    write_tables(&out, &median_rows(&per_seed))?;
    let first = first.expect("at least one seed");
    for cell in &first.cells {
        write_eval_curves(&out, &format!("curves/{}_{}_", cell.regime, cell.resolution), &cell.eval)?;
    }
    let curves: Vec<Curves> =
        first.cells.iter().map(|c| Curves { label: format!("{} {}px", c.regime, c.resolution), eval: &c.eval }).collect();
    write_plots(&out, &curves)?;
    Ok(())
}

fn write_eval_curves(out: &OutputDir, prefix: &str, eval: &EvalResult) -> Result<()> {
    out.write_str(&format!("{prefix}det.csv"), &curve_csv("far", "tar", &eval.det_curve))?;
    out.write_str(&format!("{prefix}open_set.csv"), &curve_csv("fpir", "tpir", &eval.open_set_curve))?;
    let cmc: Vec<(f64, f64)> = eval.cmc_curve.iter().map(|&(k, r)| (k as f64, r)).collect();
    out.write_str(&format!("{prefix}cmc.csv"), &curve_csv("rank", "rate", &cmc))?;
    Ok(())
}

pub fn evaluate_cmd(cfg: &ExperimentConfig, checkpoint: &Path, resolution: usize, label: &str, force: bool) -> Result<()> {
    let params = load_checkpoint(cfg, checkpoint)?;
    let protocol = load_protocol(cfg)?;
    let out = begin(cfg, "evaluate", force)?;
    let eval = evaluate_model(&cfg.model, &params, &protocol.eval, &protocol.enrolled, resolution, &cfg.eval)?;
    write_eval(&out, "", label, resolution, &eval)?;
    write_plots(&out, &[Curves { label: format!("{label} {resolution}px"), eval: &eval }])?;
    Ok(())
}

pub fn extract_cmd(cfg: &ExperimentConfig, checkpoint: &Path, resolution: usize, force: bool) -> Result<()> {
    let params = load_checkpoint(cfg, checkpoint)?;
    let ds = load_dataset(cfg)?;
    let out = begin(cfg, "extract", force)?;
    let images = ds.at_resolution(resolution)?;
    let emb = extract_embeddings(&cfg.model, &params, &images, cfg.eval.flip)?;
    let d = emb.shape()[1];
    let dims: Vec<String> = (0..d).map(|i| format!("e{i}")).collect();
    let mut text = format!("path,identity,media_id,detector_score,{}\n", dims.join(","));
    for (i, r) in ds.manifest.records.iter().enumerate() {
        let v: Vec<String> = emb.row(i).iter().map(f64::to_string).collect();
        let _ = writeln!(text, "{},{},{},{},{}", r.image_path.display(), r.identity, r.media_id, r.detector_score, v.join(","));
    }
    out.write_str("embeddings.csv", &text)?;

    let mut text = format!("identity,source_count,{}\n", dims.join(","));
    for id in ds.manifest.identities() {
        let idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.manifest.records[i].identity == id).collect();
        let rows: Vec<&[f64]> = idx.iter().map(|&i| emb.row(i)).collect();
        let media: Vec<u64> = idx.iter().map(|&i| ds.manifest.records[i].media_id).collect();
        let scores: Vec<f64> = idx.iter().map(|&i| ds.manifest.records[i].detector_score).collect();
        let t = build_template(id, &rows, &media, &scores, cfg.fusion)
            .with_context(|| format!("fusing the template of identity {id}"))?;
        let v: Vec<String> = t.vector.iter().map(f64::to_string).collect();
        let _ = writeln!(text, "{id},{},{}", t.source_count, v.join(","));
    }
    out.write_str("templates.csv", &text)?;
    Ok(())
}

pub fn cost_cmd(cfg: &ExperimentConfig, force: bool) -> Result<()> {
    let out = begin(cfg, "cost", force)?;
    let repeats = cfg.cost.wall_clock_repeats;
    let params;
    let timing = if repeats > 0 {
        params = build(&cfg.model, 2, cfg.train.seed)?;
        Some((&params, repeats))
    } else {
        None
    };
    let table = cost_table(&cfg.model, &cfg.cost.resolutions, timing)?;
    out.write_str("cost.csv", &cost_csv(&table))?;
    print!("{}", cost_csv(&table));
    Ok(())
}

/// Prints one line per check; fails if any exceeds the tolerance.
pub fn gradcheck_cmd(cfg: &ExperimentConfig, force: bool) -> Result<()> {
    let out = begin(cfg, "gradcheck", force)?;
    let entries = gradsuite::run_suite(cfg.train.seed)?;
    let mut csv = String::from("check,max_rel_error,coordinates,passed\n");
    for e in &entries {
        println!(
            "{:<28} {:>10.3e} {:>5} {}",
            e.name,
            e.max_rel_error,
            e.coordinates,
            if e.passed() { "ok" } else { "FAIL" }
        );
        let _ = writeln!(csv, "{},{:e},{},{}", e.name, e.max_rel_error, e.coordinates, e.passed());
    }
    out.write_str("gradcheck.csv", &csv)?;
    let failed: Vec<&str> = entries.iter().filter(|e| !e.passed()).map(|e| e.name.as_str()).collect();
    if !failed.is_empty() {
        bail!("gradient check above {:e}: {}", gradsuite::TOLERANCE, failed.join(" "));
    }
    Ok(())
}

/// Rebuilds the tables and a markdown summary from an earlier run's metrics.
pub fn report_cmd(cfg: &ExperimentConfig, input: &Path, force: bool) -> Result<()> {
    let src = input.join("metrics.csv");
    let text = std::fs::read_to_string(&src).with_context(|| format!("cannot read {}", src.display()))?;
    let mut rows = parse_metrics_csv(&text)?;
    sort_rows(&mut rows);
    let out = begin(cfg, "report", force)?;
    write_tables(&out, &rows)?;
    out.write_str("report.md", &markdown(&rows))?;
    Ok(())
}

fn markdown(rows: &[MetricRow]) -> String {
    let mut cols: Vec<(String, u64, f64)> = Vec::new();
    for r in rows {
        let key = (r.protocol.clone(), r.target.to_bits(), r.target);
        if !cols.iter().any(|c| c.0 == key.0 && c.1 == key.1) {
            cols.push(key);
        }
    }
    let mut lines: Vec<(usize, String)> = Vec::new();
    for r in rows {
        if !lines.iter().any(|(res, reg)| *res == r.resolution && *reg == r.regime) {
            lines.push((r.resolution, r.regime.clone()));
        }
    }
    let mut s = String::from("| resolution | regime |");
    for (p, _, t) in &cols {
        let _ = write!(s, " {p}@{t} |");
    }
    s.push_str("\n|---|---|");
    s.push_str(&"---|".repeat(cols.len()));
    s.push('\n');
    for (res, reg) in &lines {
        let _ = write!(s, "| {res} | {reg} |");
        for (p, bits, _) in &cols {
            let cell = rows
                .iter()
                .find(|r| r.resolution == *res && &r.regime == reg && &r.protocol == p && r.target.to_bits() == *bits)
                .map(|r| format!("{:.2}", r.value))
                .unwrap_or_default();
            let _ = write!(s, " {cell} |");
        }
        s.push('\n');
    }
    s
}
