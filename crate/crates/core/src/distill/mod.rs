//! Teacher training and the four student regimes: from scratch, feature
//! distillation (KD), weight transfer (KT) and both combined.

mod ladder;
mod regime;
mod sgd;
mod train;

pub use ladder::{check_resolutions, run_ladder, LadderCell, LadderPlan, LadderResult, TEACHER_LABEL};
pub use regime::{FeaturePoint, RegimeConfig, RegimeKind, StudentInit, TrainConfig, DEFAULT_KD_ALPHA};
pub use sgd::{learning_rate_at, Sgd};
pub use train::{
    distill_loop, epoch_order, init_student, teacher_features, train_student, train_teacher, EpochRecord, TrainLog,
    TRAIN_LOG_HEADER,
};
