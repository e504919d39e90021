use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::losses::ClassifierKind;
use crate::nn::ModelConfig;

/// Feature-matching weight used by the distillation regimes unless configured.
pub const DEFAULT_KD_ALPHA: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RegimeKind {
    Scratch,
    Kd,
    Kt,
    KdKt,
}

impl RegimeKind {
    pub const ALL: [RegimeKind; 4] = [RegimeKind::Scratch, RegimeKind::Kd, RegimeKind::Kt, RegimeKind::KdKt];

    pub fn as_str(self) -> &'static str {
        match self {
            RegimeKind::Scratch => "scratch",
            RegimeKind::Kd => "kd",
            RegimeKind::Kt => "kt",
            RegimeKind::KdKt => "kd_kt",
        }
    }

    pub fn uses_teacher_features(self) -> bool {
        matches!(self, RegimeKind::Kd | RegimeKind::KdKt)
    }

    pub fn init(self) -> StudentInit {
        match self {
            RegimeKind::Scratch | RegimeKind::Kd => StudentInit::Random,
            RegimeKind::Kt | RegimeKind::KdKt => StudentInit::FromTeacher,
        }
    }
}

impl fmt::Display for RegimeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RegimeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RegimeKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown regime `{s}`; expected scratch, kd, kt or kd_kt")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StudentInit {
    Random,
    FromTeacher,
}

/// A validated training regime. Fields are private so every value obeys
/// the regime rules.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegimeConfig {
    kind: RegimeKind,
    alpha: f64,
    init: StudentInit,
}

impl RegimeConfig {
    /// Scratch and KD start from random weights, KT and KD+KT from the
    /// teacher. Feature matching (`alpha > 0`) is required for KD and KD+KT
    /// and forbidden otherwise.
    pub fn new(kind: RegimeKind, alpha: f64, init: StudentInit) -> Result<Self> {
        if !alpha.is_finite() || alpha < 0.0 {
            return Err(Error::invalid(format!("regime {kind}: alpha must be finite and non-negative, got {alpha}")));
        }
        if kind.uses_teacher_features() != (alpha > 0.0) {
            return Err(Error::invalid(format!(
                "regime {kind} requires alpha {} 0, got {alpha}",
                if kind.uses_teacher_features() { ">" } else { "=" }
            )));
        }
        if kind.init() != init {
            return Err(Error::invalid(format!("regime {kind} requires student_init {:?}, got {init:?}", kind.init())));
        }
        Ok(RegimeConfig { kind, alpha, init })
    }

    /// The regime with its required initialisation and, for the feature
    /// matching regimes, weight `kd_alpha`.
    pub fn standard(kind: RegimeKind, kd_alpha: f64) -> Result<Self> {
        let alpha = if kind.uses_teacher_features() { kd_alpha } else { 0.0 };
        RegimeConfig::new(kind, alpha, kind.init())
    }

    pub fn kind(&self) -> RegimeKind {
        self.kind
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn student_init(&self) -> StudentInit {
        self.init
    }
}

/// Which student/teacher representation the feature-matching term compares.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeaturePoint {
    /// Projected embedding as produced by the network.
    Embedding,
    /// Projected embedding scaled to unit length, the form used for matching at test time.
    NormalizedEmbedding,
    /// Globally pooled backbone features before the projection.
    Pooled,
}

impl FeaturePoint {
    pub const ALL: [FeaturePoint; 3] = [FeaturePoint::Embedding, FeaturePoint::NormalizedEmbedding, FeaturePoint::Pooled];

    pub fn as_str(self) -> &'static str {
        match self {
            FeaturePoint::Embedding => "embedding",
            FeaturePoint::NormalizedEmbedding => "normalized_embedding",
            FeaturePoint::Pooled => "pooled",
        }
    }
}

impl FromStr for FeaturePoint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FeaturePoint::ALL.into_iter().find(|k| k.as_str() == s).ok_or_else(|| {
            Error::invalid(format!("unknown feature point `{s}`; expected embedding, normalized_embedding or pooled"))
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub teacher_resolution: usize,
    pub student_resolution: usize,
    pub cls_kind: ClassifierKind,
    pub feature_point: FeaturePoint,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 32,
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
            teacher_resolution: 64,
            student_resolution: 32,
            cls_kind: ClassifierKind::arcface_default(),
            feature_point: FeaturePoint::Embedding,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::invalid(format!("batch_size must be at least 2 for batch norm, got {}", self.batch_size)));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning_rate must be finite and non-negative, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::invalid(format!("weight_decay must be finite and non-negative, got {}", self.weight_decay)));
        }
        if self.student_resolution > self.teacher_resolution {
            return Err(Error::invalid(format!(
                "student resolution {} exceeds teacher resolution {}",
                self.student_resolution, self.teacher_resolution
            )));
        }
        let min = model.min_resolution();
        if self.student_resolution < min {
            return Err(Error::Resolution { resolution: self.student_resolution, min_resolution: min });
        }
        if let ClassifierKind::ArcFace { scale, margin } = self.cls_kind {
            if scale <= 0.0 || !(0.0..std::f64::consts::FRAC_PI_2).contains(&margin) {
                return Err(Error::invalid(format!("arcface needs scale > 0 and margin in [0, π/2), got {scale}, {margin}")));
            }
        }
        Ok(())
    }
}
