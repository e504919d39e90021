//! Flat `section.key = value` experiment configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key is
//! optional; the defaults are listed by [`ExperimentConfig::documented_defaults`]
//! and are what `config.resolved` contains for an empty file.

use std::collections::BTreeMap;
use std::fmt::{self, Display, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use resdistill::distill::{FeaturePoint, RegimeConfig, RegimeKind, TrainConfig};
use resdistill::eval::{EvalConfig, Fusion};
use resdistill::losses::ClassifierKind;
use resdistill::nn::{BlockConfig, ModelConfig, NormConfig};

#[derive(Debug, thiserror::Error)]
pub struct ConfigError {
    pub path: PathBuf,
    pub line: Option<usize>,
    pub key: String,
    pub message: String,
}

impl Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(line) => write!(f, "{}:{line}: {}: {}", self.path.display(), self.key, self.message),
            None => write!(f, "{}: {}: {}", self.path.display(), self.key, self.message),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic,
    Manifest(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    pub num_ids: usize,
    pub per_id: usize,
    pub base_res: usize,
    pub channels: usize,
    pub seed: u64,
    /// Identities trained on and enrolled; the rest are unknown at evaluation.
    pub train_ids: usize,
    /// Images per enrolled identity held back from training.
    pub eval_per_id: usize,
    pub split_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudentConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Feature-matching weight of the kd and kd_kt regimes.
    pub alpha: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LadderConfig {
    pub resolutions: Vec<usize>,
    pub regimes: Vec<RegimeKind>,
    pub seeds: Vec<u64>,
    /// Epochs per student regime.
    pub epochs: BTreeMap<&'static str, usize>,
}

impl LadderConfig {
    pub fn epochs_for(&self, kind: RegimeKind) -> usize {
        self.epochs[kind.as_str()]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostConfig {
    pub resolutions: Vec<usize>,
    /// Timed forward passes per resolution; 0 leaves `wall_ms` empty.
    pub wall_clock_repeats: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub student: StudentConfig,
    pub ladder: LadderConfig,
    pub eval: EvalConfig,
    pub fusion: Fusion,
    pub cost: CostConfig,
}

const KEYS: &[(&str, &str)] = &[
    ("run.output_dir", "runs/default"),
    ("model.in_channels", "1"),
    ("model.widths", "16,32,64,128"),
    ("model.kernel", "3"),
    ("model.strides", "2,2,2,2"),
    ("model.padding", "1"),
    ("model.embed_dim", "64"),
    ("model.bn_momentum", "0.9"),
    ("model.bn_epsilon", "0.00001"),
    ("data.source", "synthetic"),
    ("data.manifest", ""),
    ("data.num_ids", "50"),
    ("data.per_id", "40"),
    ("data.base_res", "64"),
    ("data.channels", "1"),
    ("data.seed", "0"),
    ("data.train_ids", "35"),
    ("data.eval_per_id", "10"),
    ("data.split_seed", "0"),
    ("train.epochs", "20"),
    ("train.batch_size", "32"),
    ("train.learning_rate", "0.05"),
    ("train.momentum", "0.9"),
    ("train.weight_decay", "0.0005"),
    ("train.seed", "0"),
    ("train.teacher_resolution", "64"),
    ("train.student_resolution", "32"),
    ("train.cls_kind", "arcface"),
    ("train.arc_scale", "16"),
    ("train.arc_margin", "0.3"),
    ("train.feature_point", "embedding"),
    ("train.alpha", "0.1"),
    ("train.student_epochs", "8"),
    ("train.student_learning_rate", "0.02"),
    ("ladder.resolutions", "64,48,32"),
    ("ladder.regimes", "scratch,kd,kt,kd_kt"),
    ("ladder.seeds", "0"),
    ("ladder.epochs.scratch", ""),
    ("ladder.epochs.kd", ""),
    ("ladder.epochs.kt", ""),
    ("ladder.epochs.kd_kt", ""),
    ("eval.far_targets", "0.001,0.01,0.1"),
    ("eval.fpir_targets", "0.01,0.1"),
    ("eval.ranks", "1,5,10"),
    ("eval.fusion", "average"),
    ("eval.flip", "false"),
    ("eval.unknown_fraction", "1"),
    ("cost.resolutions", "112,96,80,64,48,32"),
    ("cost.wall_clock_repeats", "0"),
];

struct Entries<'a> {
    path: &'a Path,
    /// Value and source line of every key set in the file.
    set: BTreeMap<String, (String, usize)>,
}

impl Entries<'_> {
    fn err(&self, key: &str, message: impl Into<String>) -> ConfigError {
        ConfigError {
            path: self.path.to_path_buf(),
            line: self.set.get(key).map(|(_, l)| *l),
            key: key.to_string(),
            message: message.into(),
        }
    }

    fn raw(&self, key: &str) -> &str {
        match self.set.get(key) {
            Some((v, _)) => v,
            None => KEYS.iter().find(|(k, _)| *k == key).map(|(_, d)| *d).expect("known key"),
        }
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<T, ConfigError>
    where
        T::Err: Display,
    {
        let raw = self.raw(key);
        raw.parse().map_err(|e| self.err(key, format!("cannot parse `{raw}`: {e}")))
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, ConfigError>
    where
        T::Err: Display,
    {
        let raw = self.raw(key);
        if raw.trim().is_empty() {
            return Ok(Vec::new());
        }
        raw.split(',')
            .map(|item| {
                let item = item.trim();
                item.parse().map_err(|e| self.err(key, format!("cannot parse list item `{item}`: {e}")))
            })
            .collect()
    }
}

fn join<T: Display>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// `(key, default)` for every accepted key, in file order. An empty
    /// `ladder.epochs.*` default means `train.student_epochs`.
    pub fn documented_defaults() -> &'static [(&'static str, &'static str)] {
        KEYS
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
            path: path.to_path_buf(),
            line: None,
            key: "<file>".into(),
            message: e.to_string(),
        })?;
        Self::parse(&text, path)
    }

    /// Parses config text; `path` is used in error messages only.
    pub fn parse(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let mut set = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let fail = |key: &str, message: &str| ConfigError {
                path: path.to_path_buf(),
                line: Some(line_no),
                key: key.to_string(),
                message: message.to_string(),
            };
            let (key, value) = trimmed.split_once('=').ok_or_else(|| fail(trimmed, "expected `section.key = value`"))?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.iter().any(|(k, _)| *k == key) {
                return Err(fail(key, "unknown key"));
            }
            if set.insert(key.to_string(), (value.to_string(), line_no)).is_some() {
                return Err(fail(key, "key given twice"));
            }
        }
        let entries = Entries { path, set };
        let cfg = Self::from_entries(&entries)?;
        cfg.validate(&entries)?;
        Ok(cfg)
    }

    fn from_entries(e: &Entries) -> Result<Self, ConfigError> {
        let widths: Vec<usize> = e.list("model.widths")?;
        let strides: Vec<usize> = e.list("model.strides")?;
        if widths.len() != strides.len() {
            return Err(e.err(
                "model.strides",
                format!("{} strides given for {} blocks in model.widths", strides.len(), widths.len()),
            ));
        }
        let (kernel, padding): (usize, usize) = (e.get("model.kernel")?, e.get("model.padding")?);
        let model = ModelConfig {
            in_channels: e.get("model.in_channels")?,
            blocks: widths
                .iter()
                .zip(&strides)
                .map(|(&out_channels, &stride)| BlockConfig { out_channels, kernel, stride, padding })
                .collect(),
            embed_dim: e.get("model.embed_dim")?,
            norm: NormConfig { momentum: e.get("model.bn_momentum")?, epsilon: e.get("model.bn_epsilon")? },
        };

        let source = match e.raw("data.source") {
            "synthetic" => DataSource::Synthetic,
            "manifest" => {
                let m = e.raw("data.manifest");
                if m.is_empty() {
                    return Err(e.err("data.manifest", "required when data.source = manifest"));
                }
                DataSource::Manifest(PathBuf::from(m))
            }
            other => return Err(e.err("data.source", format!("expected synthetic or manifest, got `{other}`"))),
        };
        let data = DataConfig {
            source,
            num_ids: e.get("data.num_ids")?,
            per_id: e.get("data.per_id")?,
            base_res: e.get("data.base_res")?,
            channels: e.get("data.channels")?,
            seed: e.get("data.seed")?,
            train_ids: e.get("data.train_ids")?,
            eval_per_id: e.get("data.eval_per_id")?,
            split_seed: e.get("data.split_seed")?,
        };

        let cls_kind = match e.raw("train.cls_kind") {
            "softmax" => ClassifierKind::Softmax,
            "arcface" => ClassifierKind::ArcFace { scale: e.get("train.arc_scale")?, margin: e.get("train.arc_margin")? },
            other => return Err(e.err("train.cls_kind", format!("expected softmax or arcface, got `{other}`"))),
        };
        let train = TrainConfig {
            epochs: e.get("train.epochs")?,
            batch_size: e.get("train.batch_size")?,
            learning_rate: e.get("train.learning_rate")?,
            momentum: e.get("train.momentum")?,
            weight_decay: e.get("train.weight_decay")?,
            seed: e.get("train.seed")?,
            teacher_resolution: e.get("train.teacher_resolution")?,
            student_resolution: e.get("train.student_resolution")?,
            cls_kind,
            feature_point: e.get::<FeaturePoint>("train.feature_point")?,
        };
        let student = StudentConfig {
            epochs: e.get("train.student_epochs")?,
            learning_rate: e.get("train.student_learning_rate")?,
            alpha: e.get("train.alpha")?,
        };

        let mut epochs = BTreeMap::new();
        for kind in RegimeKind::ALL {
            let key = format!("ladder.epochs.{kind}");
            let n = if e.raw(&key).is_empty() { student.epochs } else { e.get(&key)? };
            epochs.insert(kind.as_str(), n);
        }
        let ladder = LadderConfig {
            resolutions: e.list("ladder.resolutions")?,
            regimes: e.list("ladder.regimes")?,
            seeds: e.list("ladder.seeds")?,
            epochs,
        };

        let eval = EvalConfig {
            far_targets: e.list("eval.far_targets")?,
            fpir_targets: e.list("eval.fpir_targets")?,
            ranks: e.list("eval.ranks")?,
            flip: e.get("eval.flip")?,
            unknown_fraction: e.get("eval.unknown_fraction")?,
            split_seed: data.split_seed,
        };
        Ok(ExperimentConfig {
            output_dir: PathBuf::from(e.raw("run.output_dir")),
            model,
            data,
            train,
            student,
            ladder,
            eval,
            fusion: e.get("eval.fusion")?,
            cost: CostConfig {
                resolutions: e.list("cost.resolutions")?,
                wall_clock_repeats: e.get("cost.wall_clock_repeats")?,
            },
        })
    }

    fn validate(&self, e: &Entries) -> Result<(), ConfigError> {
        if e.raw("run.output_dir").is_empty() {
            return Err(e.err("run.output_dir", "must not be empty"));
        }
        self.model.validate().map_err(|err| e.err("model.widths", err.to_string()))?;
        let min = self.model.min_resolution();
        if self.data.channels != self.model.in_channels {
            return Err(e.err(
                "model.in_channels",
                format!("{} does not match data.channels = {}", self.model.in_channels, self.data.channels),
            ));
        }
        if self.data.num_ids < 2 || self.data.per_id < 2 {
            return Err(e.err("data.num_ids", "synthetic data needs at least 2 identities with 2 images each"));
        }
        if self.data.base_res < min {
            return Err(e.err("data.base_res", format!("{} is below min_resolution {min}", self.data.base_res)));
        }
        if self.data.train_ids < 2 {
            return Err(e.err("data.train_ids", "at least 2 identities must be enrolled"));
        }
        if self.data.source == DataSource::Synthetic && self.data.train_ids > self.data.num_ids {
            return Err(e.err(
                "data.train_ids",
                format!("{} exceeds data.num_ids = {}", self.data.train_ids, self.data.num_ids),
            ));
        }
        if self.data.eval_per_id == 0 {
            return Err(e.err("data.eval_per_id", "must be at least 1"));
        }

        for (key, r) in [
            ("train.teacher_resolution", self.train.teacher_resolution),
            ("train.student_resolution", self.train.student_resolution),
        ] {
            if r < min {
                return Err(e.err(key, format!("{r} is below min_resolution {min}")));
            }
        }
        if self.train.teacher_resolution > self.data.base_res {
            return Err(e.err(
                "train.teacher_resolution",
                format!("{} exceeds data.base_res = {}", self.train.teacher_resolution, self.data.base_res),
            ));
        }
        self.train.validate(&self.model).map_err(|err| e.err("train", err.to_string()))?;
        if !(self.student.learning_rate >= 0.0 && self.student.learning_rate.is_finite()) {
            return Err(e.err("train.student_learning_rate", "must be finite and non-negative"));
        }
        if !(self.student.alpha >= 0.0 && self.student.alpha.is_finite()) {
            return Err(e.err("train.alpha", format!("must be finite and non-negative, got {}", self.student.alpha)));
        }
        for &kind in &self.ladder.regimes {
            self.regime(kind).map_err(|err| e.err("train.alpha", format!("regime {kind}: {err}")))?;
        }

        let res = &self.ladder.resolutions;
        if res.is_empty() {
            return Err(e.err("ladder.resolutions", "must list at least the teacher resolution"));
        }
        if let Some(&r) = res.iter().find(|&&r| r < min) {
            return Err(e.err("ladder.resolutions", format!("{r} is below min_resolution {min}")));
        }
        if res.windows(2).any(|w| w[0] <= w[1]) {
            return Err(e.err("ladder.resolutions", "must be strictly descending"));
        }
        if res[0] > self.data.base_res {
            return Err(e.err("ladder.resolutions", format!("{} exceeds data.base_res = {}", res[0], self.data.base_res)));
        }
        let mut seen = Vec::new();
        for &kind in &self.ladder.regimes {
            if seen.contains(&kind) {
                return Err(e.err("ladder.regimes", format!("{kind} listed twice")));
            }
            seen.push(kind);
        }
        if self.ladder.seeds.is_empty() {
            return Err(e.err("ladder.seeds", "must list at least one seed"));
        }

        for (key, targets) in [("eval.far_targets", &self.eval.far_targets), ("eval.fpir_targets", &self.eval.fpir_targets)] {
            if let Some(t) = targets.iter().find(|&&t| !(t > 0.0 && t <= 1.0)) {
                return Err(e.err(key, format!("target {t} is outside (0, 1]")));
            }
        }
        if self.eval.ranks.iter().any(|&k| k == 0) {
            return Err(e.err("eval.ranks", "ranks start at 1"));
        }
        if !(0.0..=1.0).contains(&self.eval.unknown_fraction) {
            return Err(e.err("eval.unknown_fraction", "must lie in [0, 1]"));
        }
        if let Some(&r) = self.cost.resolutions.iter().find(|&&r| r < min) {
            return Err(e.err("cost.resolutions", format!("{r} is below min_resolution {min}")));
        }
        if self.cost.wall_clock_repeats != 0 && self.cost.wall_clock_repeats < 3 {
            return Err(e.err("cost.wall_clock_repeats", "must be 0 (no timing) or at least 3"));
        }
        Ok(())
    }

    /// The regime with this config's feature-matching weight.
    pub fn regime(&self, kind: RegimeKind) -> resdistill::Result<RegimeConfig> {
        RegimeConfig::standard(kind, self.student.alpha)
    }

    /// Training settings of a student at `resolution` under `kind`.
    pub fn student_train(&self, kind: RegimeKind, resolution: usize) -> TrainConfig {
        TrainConfig {
            epochs: self.ladder.epochs_for(kind),
            learning_rate: self.student.learning_rate,
            student_resolution: resolution,
            ..self.train.clone()
        }
    }

    /// Every key with its resolved value; parses back to an equal config.
    pub fn dump(&self) -> String {
        let m = &self.model;
        let b0 = &m.blocks[0];
        let d = &self.data;
        let t = &self.train;
        let (cls, scale, margin) = match t.cls_kind {
            ClassifierKind::Softmax => ("softmax", 16.0, 0.3),
            ClassifierKind::ArcFace { scale, margin } => ("arcface", scale, margin),
        };
        let (source, manifest) = match &d.source {
            DataSource::Synthetic => ("synthetic", String::new()),
            DataSource::Manifest(p) => ("manifest", p.display().to_string()),
        };
        let mut values: Vec<(String, String)> = vec![
            ("run.output_dir".into(), self.output_dir.display().to_string()),
            ("model.in_channels".into(), m.in_channels.to_string()),
            ("model.widths".into(), join(&m.blocks.iter().map(|b| b.out_channels).collect::<Vec<_>>())),
            ("model.kernel".into(), b0.kernel.to_string()),
            ("model.strides".into(), join(&m.blocks.iter().map(|b| b.stride).collect::<Vec<_>>())),
            ("model.padding".into(), b0.padding.to_string()),
            ("model.embed_dim".into(), m.embed_dim.to_string()),
            ("model.bn_momentum".into(), m.norm.momentum.to_string()),
            ("model.bn_epsilon".into(), m.norm.epsilon.to_string()),
            ("data.source".into(), source.into()),
            ("data.manifest".into(), manifest),
            ("data.num_ids".into(), d.num_ids.to_string()),
            ("data.per_id".into(), d.per_id.to_string()),
            ("data.base_res".into(), d.base_res.to_string()),
            ("data.channels".into(), d.channels.to_string()),
            ("data.seed".into(), d.seed.to_string()),
            ("data.train_ids".into(), d.train_ids.to_string()),
            ("data.eval_per_id".into(), d.eval_per_id.to_string()),
            ("data.split_seed".into(), d.split_seed.to_string()),
            ("train.epochs".into(), t.epochs.to_string()),
            ("train.batch_size".into(), t.batch_size.to_string()),
            ("train.learning_rate".into(), t.learning_rate.to_string()),
            ("train.momentum".into(), t.momentum.to_string()),
            ("train.weight_decay".into(), t.weight_decay.to_string()),
            ("train.seed".into(), t.seed.to_string()),
            ("train.teacher_resolution".into(), t.teacher_resolution.to_string()),
            ("train.student_resolution".into(), t.student_resolution.to_string()),
            ("train.cls_kind".into(), cls.into()),
            ("train.arc_scale".into(), scale.to_string()),
            ("train.arc_margin".into(), margin.to_string()),
            ("train.feature_point".into(), t.feature_point.as_str().into()),
            ("train.alpha".into(), self.student.alpha.to_string()),
            ("train.student_epochs".into(), self.student.epochs.to_string()),
            ("train.student_learning_rate".into(), self.student.learning_rate.to_string()),
            ("ladder.resolutions".into(), join(&self.ladder.resolutions)),
            ("ladder.regimes".into(), join(&self.ladder.regimes)),
            ("ladder.seeds".into(), join(&self.ladder.seeds)),
        ];
        for kind in RegimeKind::ALL {
            values.push((format!("ladder.epochs.{kind}"), self.ladder.epochs_for(kind).to_string()));
        }
        values.extend([
            ("eval.far_targets".into(), join(&self.eval.far_targets)),
            ("eval.fpir_targets".into(), join(&self.eval.fpir_targets)),
            ("eval.ranks".into(), join(&self.eval.ranks)),
            ("eval.fusion".into(), self.fusion.as_str().into()),
            ("eval.flip".into(), self.eval.flip.to_string()),
            ("eval.unknown_fraction".into(), self.eval.unknown_fraction.to_string()),
            ("cost.resolutions".into(), join(&self.cost.resolutions)),
            ("cost.wall_clock_repeats".into(), self.cost.wall_clock_repeats.to_string()),
        ]);
        debug_assert_eq!(values.len(), KEYS.len());
        let mut out = String::new();
        let mut section = "";
        for (k, v) in &values {
            let s = k.split('.').next().unwrap_or_default();
            if s != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                section = s;
            }
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}
