use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dakd::models::Aggregator;
use dakd::pipeline::ExperimentConfig;
use dakd::relattn::ComponentMask;

/// Weakly-supervised video anomaly detection: multi-stream teacher, single-stream student.
#[derive(Debug, Parser)]
#[command(name = "dakd", version)]
pub struct Cli {
    /// Run directory; every artifact of the command is written here.
    #[arg(long, global = true, env = "DAKD_OUT", default_value = "run")]
    pub out: PathBuf,

    /// Worker threads for data-parallel steps (defaults to all cores).
    #[arg(long, global = true, env = "DAKD_WORKERS")]
    pub workers: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-stream dataset into `<out>/data`.
    Synth(SynthArgs),
    /// Train the multi-stream teacher with the MIL objective.
    TrainTeacher(StageArgs),
    /// Turn teacher scores into soft segment labels.
    Refine(RefineArgs),
    /// Train the single-stream student from the teacher.
    Distill(DistillArgs),
    /// Score the test split and report AUC, AP and per-class AUC.
    Eval(EvalArgs),
    /// Sweep one hyperparameter or toggle pipeline components.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// TOML file of generator settings; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub snr: Option<f64>,
    #[arg(long)]
    pub anomaly_fraction: Option<f64>,
    #[arg(long)]
    pub nuisance_rate: Option<f64>,
    #[arg(long)]
    pub train_normal: Option<usize>,
    #[arg(long)]
    pub train_anomalous: Option<usize>,
    #[arg(long)]
    pub test_normal: Option<usize>,
    #[arg(long)]
    pub test_anomalous: Option<usize>,
    #[arg(long)]
    pub min_clips: Option<usize>,
    #[arg(long)]
    pub max_clips: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Full-size widths and schedule.
    Reference,
    /// Compact widths and a faster schedule for single-machine runs.
    Desk,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AggregatorArg {
    Attention,
    MeanPool,
}

/// Run settings shared by every training and evaluation command.
#[derive(Clone, Debug, Args)]
pub struct RunArgs {
    /// Dataset manifest; defaults to `<out>/data/manifest.toml`.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "reference")]
    pub preset: Preset,

    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub proj_hidden: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    /// Relative-distance bucket cap.
    #[arg(long)]
    pub k: Option<usize>,
    /// Feedforward width after attention; 0 disables it.
    #[arg(long)]
    pub ffn_hidden: Option<usize>,
    /// Hidden widths of the scoring head, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub head_hidden: Option<Vec<usize>>,
    #[arg(long, value_enum)]
    pub aggregator: Option<AggregatorArg>,
    /// Teacher attention terms: `all` or a `+`-joined subset of self, cross, c2p, p2c.
    #[arg(long)]
    pub mask: Option<ComponentMask>,
    /// Keep the relative position table at its initial values.
    #[arg(long)]
    pub freeze_rel_table: bool,

    #[arg(long)]
    pub lambda_smooth: Option<f64>,
    #[arg(long)]
    pub lambda_sparse: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_normal: Option<usize>,
    #[arg(long)]
    pub batch_anomalous: Option<usize>,
    #[arg(long)]
    pub lr_temporal: Option<f64>,
    #[arg(long)]
    pub lr_other: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,

    /// Moving-average width used to smooth teacher scores.
    #[arg(long)]
    pub epsilon: Option<usize>,
    /// Skip min-max scaling of smoothed teacher scores.
    #[arg(long)]
    pub no_minmax: bool,
    /// Threshold splitting segments into anomalous and normal for InfoNCE.
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    /// Weight of the InfoNCE term; 0 disables it.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub no_bce: bool,
    #[arg(long)]
    pub nce_hidden: Option<usize>,
    #[arg(long)]
    pub nce_out: Option<usize>,
}

impl RunArgs {
    pub fn experiment(&self) -> ExperimentConfig {
        let mut c = match self.preset {
            Preset::Reference => ExperimentConfig {
                seed: self.seed,
                ..ExperimentConfig::default()
            },
            Preset::Desk => ExperimentConfig::desk(self.seed),
        };
        set(&mut c.dims.width, self.width);
        set(&mut c.dims.proj_hidden, self.proj_hidden);
        set(&mut c.dims.heads, self.heads);
        set(&mut c.dims.bucket_cap, self.k);
        set(&mut c.dims.ffn_hidden, self.ffn_hidden);
        set(&mut c.dims.head_hidden, self.head_hidden.clone());
        if let Some(a) = self.aggregator {
            c.aggregator = match a {
                AggregatorArg::Attention => Aggregator::Attention,
                AggregatorArg::MeanPool => Aggregator::MeanPool,
            };
        }
        set(&mut c.teacher_mask, self.mask);
        c.freeze_rel_table |= self.freeze_rel_table;

        set(&mut c.mil.lambda_smooth, self.lambda_smooth);
        set(&mut c.mil.lambda_sparse, self.lambda_sparse);
        for o in [&mut c.mil.optim, &mut c.distill_optim] {
            set(&mut o.epochs, self.epochs);
            set(&mut o.normal_per_batch, self.batch_normal);
            set(&mut o.anomalous_per_batch, self.batch_anomalous);
            set(&mut o.lr_temporal, self.lr_temporal);
            set(&mut o.lr_other, self.lr_other);
            set(&mut o.weight_decay, self.weight_decay);
        }

        set(&mut c.refine.epsilon, self.epsilon);
        c.refine.normalize &= !self.no_minmax;
        set(&mut c.distill.delta, self.delta);
        set(&mut c.distill.tau, self.tau);
        set(&mut c.distill.alpha, self.alpha);
        c.distill.use_bce &= !self.no_bce;
        set(&mut c.distill.proj_hidden, self.nce_hidden);
        set(&mut c.distill.proj_out, self.nce_out);
        c
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

#[derive(Debug, Args)]
pub struct StageArgs {
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct RefineArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Teacher checkpoint; defaults to `<out>/teacher.ckpt`.
    #[arg(long)]
    pub teacher: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DistillArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Teacher checkpoint; defaults to `<out>/teacher.ckpt`.
    #[arg(long)]
    pub teacher: Option<PathBuf>,
    /// Soft labels; defaults to `<out>/pseudo_labels.csv`.
    #[arg(long)]
    pub labels: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Role {
    Teacher,
    Student,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Checkpoint to evaluate.
    #[arg(long, conflicts_with = "untrained", required_unless_present = "untrained")]
    pub model: Option<PathBuf>,
    /// Evaluate a freshly initialized model instead of a checkpoint.
    #[arg(long, value_enum)]
    pub untrained: Option<Role>,
    /// Suffix of the report files; defaults to the checkpoint file stem.
    #[arg(long)]
    pub tag: Option<String>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Hyperparameter to sweep.
    #[arg(long, requires = "values", conflicts_with = "arms")]
    pub param: Option<String>,
    /// Values of the swept hyperparameter, comma separated.
    #[arg(long, value_delimiter = ',', requires = "param")]
    pub values: Option<Vec<f64>>,
    /// Component arms, comma separated: full, no-nce, no-bce, no-minmax, no-ma, no-tam, mask:<terms>.
    #[arg(long, value_delimiter = ',')]
    pub arms: Option<Vec<String>>,
    /// Run trials concurrently, each with its own derived seed.
    #[arg(long)]
    pub parallel: bool,
}
