//! End-to-end experiment runs: teacher, refinement, distillation, evaluation,
//! single-stream baselines and ablation arms.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataio::Dataset;
use crate::distill::{train_student, DistillConfig, DistilledStudent};
use crate::error::{Error, Result};
use crate::evalmetrics::{evaluate_model, EvalReport};
use crate::miltrain::{train_teacher, MilConfig, OptimConfig, TrainedModel};
use crate::models::{Aggregator, Model, ModelConfig, ModelDims};
use crate::refinery::{build_pseudo_labels, PseudoLabelStore, RefineConfig};
use crate::relattn::ComponentMask;

/// Every knob of a full run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub dims: ModelDims,
    /// Teacher and baseline training.
    pub mil: MilConfig,
    pub refine: RefineConfig,
    pub distill: DistillConfig,
    pub distill_optim: OptimConfig,
    pub aggregator: Aggregator,
    /// Attention terms enabled in the teacher.
    pub teacher_mask: ComponentMask,
    pub freeze_rel_table: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dims: ModelDims::default(),
            mil: MilConfig::default(),
            refine: RefineConfig::default(),
            distill: DistillConfig::default(),
            distill_optim: OptimConfig::default(),
            aggregator: Aggregator::Attention,
            teacher_mask: ComponentMask::ALL,
            freeze_rel_table: false,
        }
    }
}

impl ExperimentConfig {
    /// Compact widths and schedule for single-machine runs on synthetic data.
    pub fn desk(seed: u64) -> Self {
        let optim = OptimConfig {
            epochs: 60,
            lr_temporal: 1e-2,
            lr_other: 1e-2,
            ..OptimConfig::default()
        };
        Self {
            seed,
            dims: ModelDims {
                width: 64,
                proj_hidden: 64,
                heads: 4,
                bucket_cap: 25,
                ffn_hidden: 128,
                head_hidden: vec![64, 32],
            },
            mil: MilConfig {
                optim: optim.clone(),
                ..MilConfig::default()
            },
            distill: DistillConfig {
                proj_hidden: 128,
                proj_out: 64,
                ..DistillConfig::default()
            },
            distill_optim: optim,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.mil.validate()?;
        self.distill.validate()?;
        self.distill_optim.validate()?;
        if self.refine.epsilon == 0 || self.refine.epsilon % 2 == 0 {
            return Err(Error::config(format!("epsilon {} must be odd", self.refine.epsilon)));
        }
        Ok(())
    }

    pub fn teacher_config(&self, dataset: &Dataset) -> ModelConfig {
        ModelConfig {
            input_widths: dataset.stream_widths(),
            dims: self.dims.clone(),
            mask: if dataset.stream_count() == 1 {
                ComponentMask {
                    cross_c2c: false,
                    ..self.teacher_mask
                }
            } else {
                self.teacher_mask
            },
            aggregator: self.aggregator,
            freeze_rel_table: self.freeze_rel_table,
        }
    }

    pub fn student_config(&self, dataset: &Dataset) -> ModelConfig {
        ModelConfig {
            aggregator: self.aggregator,
            freeze_rel_table: self.freeze_rel_table,
            ..ModelConfig::student(dataset.stream_width(dataset.student_stream), self.dims.clone())
        }
    }

    /// Sets one named hyperparameter from a number.
    pub fn set_param(&mut self, name: &str, value: f64) -> Result<()> {
        let as_count = |v: f64| -> Result<usize> {
            if v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
                Ok(v as usize)
            } else {
                Err(Error::config(format!("`{name}` needs a whole number, got {v}")))
            }
        };
        match name {
            "alpha" => self.distill.alpha = value,
            "tau" => self.distill.tau = value,
            "delta" => self.distill.delta = value,
            "epsilon" => self.refine.epsilon = as_count(value)?,
            "k" | "bucket_cap" => self.dims.bucket_cap = as_count(value)?,
            "lambda_smooth" => self.mil.lambda_smooth = value,
            "lambda_sparse" => self.mil.lambda_sparse = value,
            "epochs" => {
                self.mil.optim.epochs = as_count(value)?;
                self.distill_optim.epochs = as_count(value)?;
            }
            "lr_temporal" => {
                self.mil.optim.lr_temporal = value;
                self.distill_optim.lr_temporal = value;
            }
            "lr_other" => {
                self.mil.optim.lr_other = value;
                self.distill_optim.lr_other = value;
            }
            "weight_decay" => {
                self.mil.optim.weight_decay = value;
                self.distill_optim.weight_decay = value;
            }
            _ => return Err(Error::config(format!("unknown hyperparameter `{name}`"))),
        }
        self.validate()
    }

    /// Stable digest of the configuration for artifact headers.
    pub fn fingerprint(&self) -> String {
        crate::dataio::fingerprint(&serde_json::to_vec(self).expect("configuration serializes"))
    }
}

/// Hyperparameters accepted by [`ExperimentConfig::set_param`].
pub const SWEEPABLE: &[&str] = &[
    "alpha",
    "tau",
    "delta",
    "epsilon",
    "k",
    "lambda_smooth",
    "lambda_sparse",
    "epochs",
    "lr_temporal",
    "lr_other",
    "weight_decay",
];

/// Independent seed for a named sub-task (splitmix64 over the tag).
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut z = tag
        .bytes()
        .fold(seed ^ 0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x1000_0000_01b3));
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn fit_teacher(dataset: &Dataset, cfg: &ExperimentConfig) -> Result<TrainedModel> {
    let model = Model::init(cfg.teacher_config(dataset), derive_seed(cfg.seed, "teacher-init"))?;
    train_teacher(dataset, model, &cfg.mil, derive_seed(cfg.seed, "mil-train"))
}

pub fn fit_student(
    dataset: &Dataset,
    teacher: &Model,
    labels: &PseudoLabelStore,
    cfg: &ExperimentConfig,
) -> Result<DistilledStudent> {
    let student = Model::init(cfg.student_config(dataset), derive_seed(cfg.seed, "student-init"))?;
    train_student(
        dataset,
        teacher,
        student,
        labels,
        &cfg.distill,
        &cfg.distill_optim,
        derive_seed(cfg.seed, "distill-train"),
    )
}

/// Artifacts and scores of one complete run.
#[derive(Clone, Debug)]
pub struct FullRun {
    pub teacher: TrainedModel,
    pub labels: PseudoLabelStore,
    pub student: DistilledStudent,
    pub teacher_eval: EvalReport,
    pub student_eval: EvalReport,
}

pub fn run_full(dataset: &Dataset, cfg: &ExperimentConfig) -> Result<FullRun> {
    cfg.validate()?;
    let teacher = fit_teacher(dataset, cfg)?;
    let teacher_eval = evaluate_model(&teacher.model, dataset)?.0;
    let (labels, student) = distill_from(dataset, &teacher.model, cfg)?;
    let student_eval = evaluate_model(&student.model, dataset)?.0;
    Ok(FullRun {
        teacher,
        labels,
        student,
        teacher_eval,
        student_eval,
    })
}

/// Refinement and distillation from an already trained teacher.
pub fn distill_from(
    dataset: &Dataset,
    teacher: &Model,
    cfg: &ExperimentConfig,
) -> Result<(PseudoLabelStore, DistilledStudent)> {
    let labels = build_pseudo_labels(teacher, dataset, &cfg.refine)?;
    let student = fit_student(dataset, teacher, &labels, cfg)?;
    Ok((labels, student))
}

/// A single-stream model trained with the teacher's MIL recipe on stream `t` alone.
///
/// On the designated student stream this is the MIL-only student.
pub fn single_stream_baseline(dataset: &Dataset, t: usize, cfg: &ExperimentConfig) -> Result<(TrainedModel, EvalReport)> {
    let single = dataset.with_streams(&[t])?;
    let config = ModelConfig {
        aggregator: cfg.aggregator,
        freeze_rel_table: cfg.freeze_rel_table,
        ..ModelConfig::student(single.stream_width(0), cfg.dims.clone())
    };
    let model = Model::init(config, derive_seed(cfg.seed, "student-init"))?;
    let trained = train_teacher(&single, model, &cfg.mil, derive_seed(cfg.seed, "mil-train"))?;
    let report = evaluate_model(&trained.model, &single)?.0;
    Ok((trained, report))
}

/// Component toggles of the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arm {
    Full,
    NoNce,
    NoBce,
    NoMinMax,
    NoMovingAverage,
    /// Mean pooling replaces attention in teacher and student.
    NoTam,
    /// Teacher attention restricted to the given terms.
    Mask(ComponentMask),
}

impl Arm {
    pub const COMPONENTS: [Arm; 6] = [
        Arm::Full,
        Arm::NoNce,
        Arm::NoBce,
        Arm::NoMinMax,
        Arm::NoMovingAverage,
        Arm::NoTam,
    ];

    pub fn apply(&self, cfg: &ExperimentConfig) -> ExperimentConfig {
        let mut c = cfg.clone();
        match *self {
            Arm::Full => {}
            Arm::NoNce => c.distill.alpha = 0.0,
            Arm::NoBce => c.distill.use_bce = false,
            Arm::NoMinMax => c.refine.normalize = false,
            Arm::NoMovingAverage => c.refine.epsilon = 1,
            Arm::NoTam => c.aggregator = Aggregator::MeanPool,
            Arm::Mask(m) => c.teacher_mask = m,
        }
        c
    }

    /// True when the arm leaves the teacher untouched.
    pub fn shares_teacher(&self) -> bool {
        !matches!(self, Arm::NoTam | Arm::Mask(_))
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Arm::Full => f.write_str("full"),
            Arm::NoNce => f.write_str("no-nce"),
            Arm::NoBce => f.write_str("no-bce"),
            Arm::NoMinMax => f.write_str("no-minmax"),
            Arm::NoMovingAverage => f.write_str("no-ma"),
            Arm::NoTam => f.write_str("no-tam"),
            Arm::Mask(m) => write!(f, "mask:{m}"),
        }
    }
}

impl FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "full" => Arm::Full,
            "no-nce" => Arm::NoNce,
            "no-bce" => Arm::NoBce,
            "no-minmax" => Arm::NoMinMax,
            "no-ma" => Arm::NoMovingAverage,
            "no-tam" => Arm::NoTam,
            other => match other.strip_prefix("mask:") {
                Some(m) => Arm::Mask(m.parse()?),
                None => return Err(Error::config(format!("unknown ablation arm `{other}`"))),
            },
        })
    }
}

/// Test metrics of one ablation trial.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm: String,
    pub teacher_auc: f64,
    pub student_auc: f64,
    pub student_ap: f64,
}

/// Runs one arm; arms that keep the teacher reuse `shared` when supplied.
pub fn run_arm(dataset: &Dataset, cfg: &ExperimentConfig, arm: Arm, shared: Option<&TrainedModel>) -> Result<ArmResult> {
    let c = arm.apply(cfg);
    c.validate()?;
    let trained;
    let teacher = match shared {
        Some(t) if arm.shares_teacher() => t,
        _ => {
            trained = fit_teacher(dataset, &c)?;
            &trained
        }
    };
    let teacher_auc = evaluate_model(&teacher.model, dataset)?.0.auc;
    let (_, student) = distill_from(dataset, &teacher.model, &c)?;
    let report = evaluate_model(&student.model, dataset)?.0;
    Ok(ArmResult {
        arm: arm.to_string(),
        teacher_auc,
        student_auc: report.auc,
        student_ap: report.ap,
    })
}

/// True when changing `name` changes the teacher, not only distillation.
pub fn affects_teacher(name: &str) -> bool {
    !matches!(name, "alpha" | "tau" | "delta" | "epsilon")
}

/// One row of a hyperparameter sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param: String,
    pub value: f64,
    pub seed: u64,
    pub teacher_auc: f64,
    pub student_auc: f64,
    pub student_ap: f64,
}

fn trial_config(cfg: &ExperimentConfig, label: &str, derived: bool) -> ExperimentConfig {
    let mut c = cfg.clone();
    if derived {
        c.seed = derive_seed(cfg.seed, &format!("trial:{label}"));
    }
    c
}

/// Sweeps one hyperparameter over `values`.
///
/// Serial trials share the run seed, and a teacher untouched by the parameter
/// is trained once. Parallel trials each draw an independent seed derived from
/// the run seed and the trial label, so results do not depend on scheduling.
pub fn sweep(dataset: &Dataset, cfg: &ExperimentConfig, name: &str, values: &[f64], parallel: bool) -> Result<Vec<SweepRow>> {
    use rayon::prelude::*;
    let trials = values
        .iter()
        .map(|&v| {
            let mut c = trial_config(cfg, &format!("{name}={v}"), parallel);
            c.set_param(name, v)?;
            Ok((v, c))
        })
        .collect::<Result<Vec<_>>>()?;
    let shared = if !parallel && !affects_teacher(name) {
        Some(fit_teacher(dataset, cfg)?)
    } else {
        None
    };
    let run = |(v, c): &(f64, ExperimentConfig)| -> Result<SweepRow> {
        let r = run_arm(dataset, c, Arm::Full, shared.as_ref())?;
        Ok(SweepRow {
            param: name.to_string(),
            value: *v,
            seed: c.seed,
            teacher_auc: r.teacher_auc,
            student_auc: r.student_auc,
            student_ap: r.student_ap,
        })
    };
    if parallel {
        trials.par_iter().map(run).collect()
    } else {
        trials.iter().map(run).collect()
    }
}

/// Runs component arms; seeding follows [`sweep`].
pub fn ablate_arms(dataset: &Dataset, cfg: &ExperimentConfig, arms: &[Arm], parallel: bool) -> Result<Vec<ArmResult>> {
    use rayon::prelude::*;
    if parallel {
        arms.par_iter()
            .map(|arm| run_arm(dataset, &trial_config(cfg, &arm.to_string(), true), *arm, None))
            .collect()
    } else {
        let shared = if arms.iter().any(Arm::shares_teacher) {
            Some(fit_teacher(dataset, cfg)?)
        } else {
            None
        };
        arms.iter().map(|arm| run_arm(dataset, cfg, *arm, shared.as_ref())).collect()
    }
}
