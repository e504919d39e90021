use rayon::prelude::*;

use crate::cost::{cost_table, CostReport};
use crate::data::{make_pairs, Protocol, ResolutionPair};
use crate::error::{Error, Result};
use crate::eval::{evaluate_model, EvalConfig, EvalResult, MetricRow};
use crate::nn::{ModelConfig, ParameterSet};

use super::regime::{RegimeConfig, TrainConfig};
use super::train::{init_student, train_student, train_teacher, TrainLog};

/// Label of the teacher's row in result tables.
pub const TEACHER_LABEL: &str = "teacher";

#[derive(Clone, Debug, PartialEq)]
pub struct LadderPlan {
    /// Descending; the first entry is the teacher resolution.
    pub resolutions: Vec<usize>,
    /// Student regimes with their epoch budgets.
    pub regimes: Vec<(RegimeConfig, usize)>,
    pub student_learning_rate: f64,
}

#[derive(Clone, Debug)]
pub struct LadderCell {
    pub resolution: usize,
    pub regime: String,
    pub params: ParameterSet,
    pub log: TrainLog,
    pub eval: EvalResult,
}

impl LadderCell {
    /// `{regime}_{resolution}.rdt`
    pub fn checkpoint_name(&self) -> String {
        format!("{}_{}.rdt", self.regime, self.resolution)
    }
}

#[derive(Clone, Debug)]
pub struct LadderResult {
    /// Teacher first, then students by resolution (descending) and plan order.
    pub cells: Vec<LadderCell>,
    pub cost: Vec<CostReport>,
}

impl LadderResult {
    pub fn rows(&self) -> Vec<MetricRow> {
        self.cells.iter().flat_map(|c| c.eval.rows(c.resolution, &c.regime)).collect()
    }

    pub fn cell(&self, regime: &str, resolution: usize) -> Option<&LadderCell> {
        self.cells.iter().find(|c| c.regime == regime && c.resolution == resolution)
    }
}

pub fn check_resolutions(model: &ModelConfig, resolutions: &[usize]) -> Result<()> {
    if resolutions.is_empty() {
        return Err(Error::invalid("the resolution ladder is empty"));
    }
    if resolutions.windows(2).any(|w| w[0] <= w[1]) {
        return Err(Error::invalid(format!("ladder resolutions must be strictly descending, got {resolutions:?}")));
    }
    let min = model.min_resolution();
    if let Some(&r) = resolutions.iter().find(|&&r| r < min) {
        return Err(Error::Resolution { resolution: r, min_resolution: min });
    }
    Ok(())
}

/// Trains the teacher at `plan.resolutions[0]` and one student per
/// (lower resolution, regime), evaluating each at its own resolution.
/// Student cells run in parallel on the current rayon pool; the result order
/// does not depend on scheduling.
pub fn run_ladder(
    model: &ModelConfig,
    protocol: &Protocol,
    plan: &LadderPlan,
    train_cfg: &TrainConfig,
    eval_cfg: &EvalConfig,
) -> Result<LadderResult> {
    check_resolutions(model, &plan.resolutions)?;
    let teacher_res = plan.resolutions[0];
    let (train, eval_data) = (&protocol.train, &protocol.eval);
    let base = train.base_resolution()?;
    if teacher_res > base {
        return Err(Error::invalid(format!("teacher resolution {teacher_res} exceeds the data resolution {base}")));
    }
    let teacher_cfg = TrainConfig { teacher_resolution: teacher_res, student_resolution: teacher_res, ..train_cfg.clone() };
    log::info!("training teacher at {teacher_res}px for {} epochs", teacher_cfg.epochs);
    let (teacher, teacher_log) = train_teacher(model, train, &teacher_cfg)?;
    let teacher_eval = evaluate_model(model, &teacher, eval_data, &protocol.enrolled, teacher_res, eval_cfg)?;
    let mut cells = vec![LadderCell {
        resolution: teacher_res,
        regime: TEACHER_LABEL.to_string(),
        params: teacher.clone(),
        log: teacher_log,
        eval: teacher_eval,
    }];

    let pairs: Vec<(usize, Vec<ResolutionPair>)> = plan.resolutions[1..]
        .iter()
        .map(|&r| Ok((r, make_pairs(train, teacher_res, r)?)))
        .collect::<Result<_>>()?;
    let jobs: Vec<(usize, &Vec<ResolutionPair>, &(RegimeConfig, usize))> =
        pairs.iter().flat_map(|(r, p)| plan.regimes.iter().map(move |g| (*r, p, g))).collect();
    let students = jobs
        .par_iter()
        .map(|&(r, pairs, (regime, epochs))| {
            let cfg = TrainConfig {
                epochs: *epochs,
                learning_rate: plan.student_learning_rate,
                teacher_resolution: teacher_res,
                student_resolution: r,
                ..train_cfg.clone()
            };
            log::info!("training {} student at {r}px for {epochs} epochs", regime.kind());
            let init = init_student(regime, model, &teacher, train_cfg.seed.wrapping_add(1))?;
            let (params, log) = train_student(model, regime, &teacher, init, pairs, &cfg)?;
            let eval = evaluate_model(model, &params, eval_data, &protocol.enrolled, r, eval_cfg)?;
            Ok(LadderCell { resolution: r, regime: regime.kind().to_string(), params, log, eval })
        })
        .collect::<Result<Vec<_>>>()?;
    cells.extend(students);
    Ok(LadderResult { cells, cost: cost_table(model, &plan.resolutions, None)? })
}
