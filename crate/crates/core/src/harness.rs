//! Experiment configuration, the training loop and run artifacts, multi-seed
//! aggregation, the collaboration-reward sweep and the cost-scaling benchmark.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{build_baseline, BaselineConfig, BaselineKind, BaselineModel};
use crate::blocks::Topology;
use crate::data::{
    build_interference_tasks, build_mnist_mtl_from_dir, InterferenceConfig, MnistMtlConfig,
    MtlSample, TaskSplit,
};
use crate::diagnostics::{export_routing_map, PolicyTimeline, RoutingMap};
use crate::error::{Error, Result};
use crate::model::{evaluate_model, write_metrics_row, MultiTaskModel, METRICS_HEADER};
use crate::policies::{AgentMode, Dispatcher, Policy, Representation};
use crate::rl::{
    build_routing_net, CollabKind, FinalRewardKind, RewardConfig, RlAlgorithm, RoutingNet,
    RoutingNetConfig, TrainerConfig, WplVariant,
};
use crate::routing::AccuracyTable;
use crate::tensor::{checkpoint, opcount, ParamStore, SgdConfig, Tensor};

macro_rules! named_enum {
    ($(#[$m:meta])* $name:ident { $($variant:ident => $s:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn name(&self) -> &'static str {
                match self { $($name::$variant => $s),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                $(if s == $s { return Ok($name::$variant); })+
                let known: Vec<&str> = vec![$($s),+];
                Err(Error::Validation(format!(
                    "unknown {} {s:?} (expected one of {})",
                    stringify!($name),
                    known.join(", ")
                )))
            }
        }
    };
}

named_enum!(Dataset {
    MnistMtl => "mnist_mtl",
    Interference => "interference",
});

named_enum!(Architecture {
    RoutingAllFc => "routing_all_fc",
    RoutingAllFcRecurrentPass => "routing_all_fc_recurrent_pass",
    RoutingSingleAgent => "routing_single_agent",
    RoutingDispatched => "routing_dispatched",
    TaskSpecific1fc => "task_specific_1fc",
    TaskSpecificAllfc => "task_specific_allfc",
    CrossStitch => "cross_stitch",
    SoftMixture => "soft_mixture",
});

impl Architecture {
    pub fn baseline(&self) -> Option<BaselineKind> {
        match self {
            Architecture::TaskSpecific1fc => Some(BaselineKind::TaskSpecific1fc),
            Architecture::TaskSpecificAllfc => Some(BaselineKind::TaskSpecificAllfc),
            Architecture::CrossStitch => Some(BaselineKind::CrossStitch),
            Architecture::SoftMixture => Some(BaselineKind::SoftMixture),
            _ => None,
        }
    }

    pub fn is_routed(&self) -> bool {
        self.baseline().is_none()
    }

    pub fn agent_mode(&self) -> Option<AgentMode> {
        match self {
            Architecture::RoutingAllFc | Architecture::RoutingAllFcRecurrentPass => {
                Some(AgentMode::PerTask)
            }
            Architecture::RoutingSingleAgent => Some(AgentMode::Single),
            Architecture::RoutingDispatched => Some(AgentMode::Dispatched),
            _ => None,
        }
    }
}

fn rl_name(a: RlAlgorithm) -> &'static str {
    match a {
        RlAlgorithm::Wpl => "wpl",
        RlAlgorithm::Reinforce => "reinforce",
        RlAlgorithm::QTabular => "q_tabular",
        RlAlgorithm::QApprox => "q_approx",
    }
}

fn choose<T: Copy>(key: &str, v: &str, options: &[(&str, T)]) -> Result<T> {
    options
        .iter()
        .find(|(n, _)| *n == v)
        .map(|(_, t)| *t)
        .ok_or_else(|| {
            let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
            Error::Validation(format!(
                "{key} = {v:?}: expected one of {}",
                names.join(", ")
            ))
        })
}

const RL: &[(&str, RlAlgorithm)] = &[
    ("wpl", RlAlgorithm::Wpl),
    ("reinforce", RlAlgorithm::Reinforce),
    ("q_tabular", RlAlgorithm::QTabular),
    ("q_approx", RlAlgorithm::QApprox),
];
const REPR: &[(&str, Representation)] = &[
    ("tabular", Representation::Tabular),
    ("approx", Representation::Approx),
];
const VARIANT: &[(&str, WplVariant)] = &[
    ("appendix_a4", WplVariant::AppendixA4),
    ("algorithm3", WplVariant::Algorithm3),
];
const COLLAB: &[(&str, CollabKind)] = &[
    ("avg_probability", CollabKind::AvgProbability),
    ("avg_times_chosen", CollabKind::AvgTimesChosen),
];
const FINAL: &[(&str, FinalRewardKind)] = &[
    ("plus_minus_one", FinalRewardKind::PlusMinusOne),
    ("negative_loss", FinalRewardKind::NegativeLoss),
];

fn name_of<T: Copy + PartialEq>(options: &[(&'static str, T)], v: T) -> &'static str {
    options
        .iter()
        .find(|(_, t)| *t == v)
        .map(|(n, _)| *n)
        .unwrap_or("?")
}

/// Everything a run needs. Serialized as flat `key = value` lines.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: Dataset,
    pub architecture: Architecture,
    pub rl: RlAlgorithm,
    pub representation: Representation,
    pub wpl_variant: WplVariant,
    pub rho: f64,
    pub collab_kind: CollabKind,
    pub gamma: f64,
    pub final_reward: FinalRewardKind,
    pub lambda_pi: f64,
    pub q_alpha: f64,
    pub approx_lr: f64,
    pub reinforce_baseline: bool,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub epsilon_anneal: f64,
    pub learning_rate: f64,
    pub anneal_every: usize,
    pub anneal_divisor: f64,
    pub batch_size: usize,
    pub hidden_dim: usize,
    pub hidden_layers: usize,
    /// Blocks per routed layer (also cross-stitch columns). 0 = one per task.
    pub blocks_per_layer: usize,
    /// Width of a shared encoder in front of the routed layers. 0 = none.
    pub encoder_dim: usize,
    /// Route length for the recurrent architecture. 0 = number of layers.
    pub max_depth: usize,
    pub stitch_noise: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Empty = train without writing artifacts.
    pub output_dir: String,
    pub timeline_every: usize,
    pub mnist_dir: String,
    pub mnist_train_per_digit: usize,
    pub mnist_test_per_digit: usize,
    pub interference: InterferenceConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let sgd = SgdConfig::default();
        let tc = TrainerConfig::default();
        let mnist = MnistMtlConfig::default();
        ExperimentConfig {
            dataset: Dataset::Interference,
            architecture: Architecture::RoutingAllFc,
            rl: RlAlgorithm::Wpl,
            representation: Representation::Tabular,
            wpl_variant: tc.wpl_variant,
            rho: tc.reward.rho,
            collab_kind: tc.reward.collab_kind,
            gamma: tc.reward.gamma,
            final_reward: tc.reward.final_kind,
            lambda_pi: tc.lambda_pi,
            q_alpha: tc.q_alpha,
            approx_lr: tc.approx_lr,
            reinforce_baseline: tc.reinforce_baseline,
            epsilon_start: tc.epsilon_start,
            epsilon_end: tc.epsilon_end,
            epsilon_anneal: tc.epsilon_anneal,
            learning_rate: sgd.learning_rate,
            anneal_every: sgd.anneal_every,
            anneal_divisor: sgd.anneal_divisor,
            batch_size: 32,
            hidden_dim: 32,
            hidden_layers: 2,
            blocks_per_layer: 0,
            encoder_dim: 0,
            max_depth: 0,
            stitch_noise: 0.01,
            epochs: 30,
            seed: 0,
            output_dir: String::new(),
            timeline_every: 1000,
            mnist_dir: String::new(),
            mnist_train_per_digit: mnist.train_per_digit,
            mnist_test_per_digit: mnist.test_per_digit,
            interference: InterferenceConfig::default(),
        }
    }
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Validation(format!("{key} = {v:?} is not a valid number")))
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Validation(format!("{key} = {v:?} is not a boolean"))),
    }
}

impl ExperimentConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let ic = &mut self.interference;
        match key {
            "dataset" => self.dataset = v.parse()?,
            "architecture" => self.architecture = v.parse()?,
            "rl" => self.rl = choose(key, v, RL)?,
            "representation" => self.representation = choose(key, v, REPR)?,
            "wpl_variant" => self.wpl_variant = choose(key, v, VARIANT)?,
            "rho" => self.rho = num(key, v)?,
            "collab_kind" => self.collab_kind = choose(key, v, COLLAB)?,
            "gamma" => self.gamma = num(key, v)?,
            "final_reward" => self.final_reward = choose(key, v, FINAL)?,
            "lambda_pi" => self.lambda_pi = num(key, v)?,
            "q_alpha" => self.q_alpha = num(key, v)?,
            "approx_lr" => self.approx_lr = num(key, v)?,
            "reinforce_baseline" => self.reinforce_baseline = boolean(key, v)?,
            "epsilon_start" => self.epsilon_start = num(key, v)?,
            "epsilon_end" => self.epsilon_end = num(key, v)?,
            "epsilon_anneal" => self.epsilon_anneal = num(key, v)?,
            "learning_rate" => self.learning_rate = num(key, v)?,
            "anneal_every" => self.anneal_every = num(key, v)?,
            "anneal_divisor" => self.anneal_divisor = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "hidden_dim" => self.hidden_dim = num(key, v)?,
            "hidden_layers" => self.hidden_layers = num(key, v)?,
            "blocks_per_layer" => self.blocks_per_layer = num(key, v)?,
            "encoder_dim" => self.encoder_dim = num(key, v)?,
            "max_depth" => self.max_depth = num(key, v)?,
            "stitch_noise" => self.stitch_noise = num(key, v)?,
            "epochs" => self.epochs = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "output_dir" => self.output_dir = v.to_string(),
            "timeline_every" => self.timeline_every = num(key, v)?,
            "mnist_dir" => self.mnist_dir = v.to_string(),
            "mnist_train_per_digit" => self.mnist_train_per_digit = num(key, v)?,
            "mnist_test_per_digit" => self.mnist_test_per_digit = num(key, v)?,
            "interference_tasks" => ic.num_tasks = num(key, v)?,
            "interference_dim" => ic.dim = num(key, v)?,
            "interference_samples_per_task" => ic.samples_per_task = num(key, v)?,
            "interference_test_per_task" => ic.test_per_task = num(key, v)?,
            "interference_clusters" => ic.num_clusters = num(key, v)?,
            "interference_conflict_fraction" => ic.conflict_fraction = num(key, v)?,
            "interference_noise" => ic.noise = num(key, v)?,
            "interference_margin" => ic.margin = num(key, v)?,
            _ => return Err(Error::Validation(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// `(key, value)` pairs in a fixed order; `set` accepts every one back.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let ic = &self.interference;
        vec![
            ("dataset", self.dataset.to_string()),
            ("architecture", self.architecture.to_string()),
            ("rl", rl_name(self.rl).to_string()),
            (
                "representation",
                name_of(REPR, self.representation).to_string(),
            ),
            (
                "wpl_variant",
                name_of(VARIANT, self.wpl_variant).to_string(),
            ),
            ("rho", self.rho.to_string()),
            ("collab_kind", name_of(COLLAB, self.collab_kind).to_string()),
            ("gamma", self.gamma.to_string()),
            (
                "final_reward",
                name_of(FINAL, self.final_reward).to_string(),
            ),
            ("lambda_pi", self.lambda_pi.to_string()),
            ("q_alpha", self.q_alpha.to_string()),
            ("approx_lr", self.approx_lr.to_string()),
            ("reinforce_baseline", self.reinforce_baseline.to_string()),
            ("epsilon_start", self.epsilon_start.to_string()),
            ("epsilon_end", self.epsilon_end.to_string()),
            ("epsilon_anneal", self.epsilon_anneal.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("anneal_every", self.anneal_every.to_string()),
            ("anneal_divisor", self.anneal_divisor.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("hidden_dim", self.hidden_dim.to_string()),
            ("hidden_layers", self.hidden_layers.to_string()),
            ("blocks_per_layer", self.blocks_per_layer.to_string()),
            ("encoder_dim", self.encoder_dim.to_string()),
            ("max_depth", self.max_depth.to_string()),
            ("stitch_noise", self.stitch_noise.to_string()),
            ("epochs", self.epochs.to_string()),
            ("seed", self.seed.to_string()),
            ("output_dir", self.output_dir.clone()),
            ("timeline_every", self.timeline_every.to_string()),
            ("mnist_dir", self.mnist_dir.clone()),
            (
                "mnist_train_per_digit",
                self.mnist_train_per_digit.to_string(),
            ),
            (
                "mnist_test_per_digit",
                self.mnist_test_per_digit.to_string(),
            ),
            ("interference_tasks", ic.num_tasks.to_string()),
            ("interference_dim", ic.dim.to_string()),
            (
                "interference_samples_per_task",
                ic.samples_per_task.to_string(),
            ),
            ("interference_test_per_task", ic.test_per_task.to_string()),
            ("interference_clusters", ic.num_clusters.to_string()),
            (
                "interference_conflict_fraction",
                ic.conflict_fraction.to_string(),
            ),
            ("interference_noise", ic.noise.to_string()),
            ("interference_margin", ic.margin.to_string()),
        ]
    }

    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = ExperimentConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Validation(format!("line {}: expected key = value", n + 1))
            })?;
            c.set(k.trim(), v.trim())?;
        }
        Ok(c)
    }

    pub fn serialize(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    /// Applies `RNTN_SEED` when it is set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(s) = std::env::var("RNTN_SEED") {
            self.seed = num("RNTN_SEED", s.trim())?;
        }
        Ok(())
    }

    pub fn num_tasks(&self) -> usize {
        match self.dataset {
            Dataset::MnistMtl => 10,
            Dataset::Interference => self.interference.num_tasks,
        }
    }

    pub fn blocks(&self) -> usize {
        if self.blocks_per_layer == 0 {
            self.num_tasks()
        } else {
            self.blocks_per_layer
        }
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            learning_rate: self.learning_rate,
            anneal_every: self.anneal_every,
            anneal_divisor: self.anneal_divisor,
        }
    }

    pub fn trainer(&self) -> TrainerConfig {
        TrainerConfig {
            algorithm: self.rl,
            reward: RewardConfig {
                rho: self.rho,
                collab_kind: self.collab_kind,
                gamma: self.gamma,
                final_kind: self.final_reward,
            },
            lambda_pi: self.lambda_pi,
            wpl_variant: self.wpl_variant,
            q_alpha: self.q_alpha,
            approx_lr: self.approx_lr,
            reinforce_baseline: self.reinforce_baseline,
            history_decay: 0.99,
            sgd: self.sgd(),
            epsilon_start: self.epsilon_start,
            epsilon_end: self.epsilon_end,
            epsilon_anneal: self.epsilon_anneal,
        }
    }

    /// Checks values and the architecture/algorithm pairing.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.epochs == 0
            || self.batch_size == 0
            || self.hidden_dim == 0
            || self.timeline_every == 0
        {
            return bad(
                "epochs, batch_size, hidden_dim and timeline_every must be positive".into(),
            );
        }
        if !(0.0..=1.0).contains(&self.rho) || !(0.0..=1.0).contains(&self.gamma) {
            return bad(format!(
                "rho ({}) and gamma ({}) must lie in [0, 1]",
                self.rho, self.gamma
            ));
        }
        if [self.lambda_pi, self.q_alpha, self.approx_lr]
            .iter()
            .any(|r| r.is_nan() || *r < 0.0)
        {
            return bad("router learning rates must be non-negative".into());
        }
        self.sgd()
            .validate()
            .map_err(|e| Error::Validation(e.to_string()))?;
        if self.dataset == Dataset::MnistMtl && self.mnist_dir.is_empty() {
            return bad("dataset mnist_mtl needs mnist_dir".into());
        }
        if self.dataset == Dataset::Interference && self.interference.num_tasks < 1 {
            return bad("interference_tasks must be positive".into());
        }
        if self.architecture == Architecture::RoutingAllFcRecurrentPass && self.encoder_dim == 0 {
            return bad("routing_all_fc_recurrent_pass needs encoder_dim = hidden_dim".into());
        }
        if self.encoder_dim != 0
            && self.architecture == Architecture::RoutingAllFcRecurrentPass
            && self.encoder_dim != self.hidden_dim
        {
            return bad("recurrent routing needs encoder_dim = hidden_dim so every block can follow any other".into());
        }
        let Some(mode) = self.architecture.agent_mode() else {
            return Ok(());
        };
        let tabular = self.representation == Representation::Tabular;
        match self.rl {
            RlAlgorithm::Wpl => {
                if !tabular {
                    return bad(
                        "wpl is defined only for the tabular setting; use representation = tabular"
                            .into(),
                    );
                }
                if mode == AgentMode::Single {
                    return bad("wpl is a multi-agent learner; routing_single_agent needs reinforce or q learning".into());
                }
            }
            RlAlgorithm::QTabular if !tabular => {
                return bad("q_tabular needs representation = tabular".into());
            }
            RlAlgorithm::QApprox if tabular => {
                return bad("q_approx needs representation = approx".into());
            }
            _ => {}
        }
        Ok(())
    }
}

/// A routed network or one of the baselines.
#[derive(Clone, Debug)]
pub enum ExperimentModel {
    Routed(Box<RoutingNet>),
    Baseline(Box<BaselineModel>),
}

impl ExperimentModel {
    pub fn as_model(&self) -> &dyn MultiTaskModel {
        match self {
            ExperimentModel::Routed(m) => m.as_ref(),
            ExperimentModel::Baseline(m) => m.as_ref(),
        }
    }

    pub fn as_model_mut(&mut self) -> &mut dyn MultiTaskModel {
        match self {
            ExperimentModel::Routed(m) => m.as_mut(),
            ExperimentModel::Baseline(m) => m.as_mut(),
        }
    }
}

pub fn load_dataset(config: &ExperimentConfig) -> Result<TaskSplit> {
    match config.dataset {
        Dataset::Interference => build_interference_tasks(config.interference, config.seed),
        Dataset::MnistMtl => build_mnist_mtl_from_dir(
            &config.mnist_dir,
            MnistMtlConfig {
                train_per_digit: config.mnist_train_per_digit,
                test_per_digit: config.mnist_test_per_digit,
            },
            config.seed,
        ),
    }
}

/// Builds the configured model for inputs of width `input_dim`.
pub fn build_model(
    config: &ExperimentConfig,
    input_dim: usize,
    classes: usize,
) -> Result<ExperimentModel> {
    config.validate()?;
    let h = config.hidden_dim;
    let k = config.blocks();
    let enc = (config.encoder_dim > 0).then_some((input_dim, config.encoder_dim));
    let first = if config.encoder_dim > 0 {
        config.encoder_dim
    } else {
        input_dim
    };
    let mut dims = vec![first];
    dims.extend(std::iter::repeat_n(h, config.hidden_layers));
    dims.push(classes);
    if let Some(kind) = config.architecture.baseline() {
        let mut bc = BaselineConfig::new(kind, dims, config.num_tasks());
        bc.encoder = enc;
        bc.k = k;
        bc.stitch_noise = config.stitch_noise;
        bc.sgd = config.sgd();
        return Ok(ExperimentModel::Baseline(Box::new(build_baseline(
            bc,
            config.seed,
        )?)));
    }
    let topology = match config.architecture {
        Architecture::RoutingAllFcRecurrentPass => {
            let depth = if config.max_depth == 0 {
                dims.len() - 1
            } else {
                config.max_depth
            };
            Topology::recurrent(&dims, k, true, depth)
        }
        _ => Topology::layered(&dims, k, false),
    };
    let rc = RoutingNetConfig {
        topology,
        encoder: enc,
        agent_mode: config
            .architecture
            .agent_mode()
            .expect("routed architecture"),
        representation: config.representation,
        num_tasks: config.num_tasks(),
        trainer: config.trainer(),
    };
    Ok(ExperimentModel::Routed(Box::new(build_routing_net(
        rc,
        config.seed,
    )?)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub per_task: Vec<f64>,
    pub mean: f64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    /// Counted floating-point operations spent in training this epoch.
    pub ops: u64,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub dataset: String,
    pub architecture: String,
    pub rl: String,
    pub seed: u64,
    pub param_count: usize,
    pub epochs: Vec<EpochReport>,
    pub final_accuracy: AccuracyTable,
    pub distinct_per_depth: Option<Vec<usize>>,
    pub artifacts: Vec<String>,
}

impl RunReport {
    /// The report with wall times zeroed, for determinism comparisons.
    pub fn without_timing(&self) -> RunReport {
        let mut r = self.clone();
        r.epochs.iter_mut().for_each(|e| e.wall_time_s = 0.0);
        r
    }
}

pub const ARTIFACTS: [&str; 6] = [
    "config.txt",
    "metrics.csv",
    "timeline.csv",
    "routing_map.json",
    "checkpoint.bin",
    "report.json",
];

/// Everything produced by [`train`].
pub struct TrainOutcome {
    pub model: ExperimentModel,
    pub report: RunReport,
    pub timeline: Option<PolicyTimeline>,
    pub routing_map: Option<RoutingMap>,
}

/// Trains `model` on `split`, evaluating after every epoch. Metrics rows go
/// to `metrics` when given.
pub fn train(
    config: &ExperimentConfig,
    split: &TaskSplit,
    mut model: ExperimentModel,
    mut metrics: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let num_tasks = split.num_tasks();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7a11_5eed);
    let mut timeline = match &model {
        ExperimentModel::Routed(net)
            if net.trainer.agents.agents.iter().all(Policy::is_tabular) =>
        {
            Some(PolicyTimeline::new(
                config.timeline_every,
                &net.model.registry,
            )?)
        }
        _ => None,
    };
    if let Some(w) = metrics.as_deref_mut() {
        writeln!(w, "{METRICS_HEADER}")?;
    }
    let per_epoch = split.epoch_order(config.seed, 0).len();
    if per_epoch == 0 {
        return Err(Error::Validation("training split is empty".into()));
    }
    let total = (per_epoch * config.epochs) as f64;
    let mut seen = 0usize;
    let mut epochs = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let start = Instant::now();
        let order = split.epoch_order(config.seed, epoch);
        let (mut loss_sum, mut hits) = (0.0, 0usize);
        let body = || -> Result<()> {
            for chunk in order.chunks(config.batch_size) {
                if let (Some(tl), ExperimentModel::Routed(net)) = (timeline.as_mut(), &model) {
                    tl.observe(seen, chunk.len(), &net.trainer.agents)?;
                }
                let m = model.as_model_mut();
                m.set_progress(seen as f64 / total);
                let batch: Vec<(usize, &MtlSample)> =
                    chunk.iter().map(|&i| (i, &split.train[i])).collect();
                let records = m.train_batch(&batch, epoch, &mut rng)?;
                for r in &records {
                    loss_sum += r.loss;
                    hits += r.correct as usize;
                    if let Some(w) = metrics.as_deref_mut() {
                        write_metrics_row(&mut *w, r)?;
                    }
                }
                seen += chunk.len();
            }
            Ok(())
        };
        let (res, ops) = opcount::measure(body);
        res?;
        let train_time = start.elapsed().as_secs_f64();
        let acc = evaluate_model(model.as_model(), &split.test, num_tasks)?;
        info!(
            "epoch {epoch}: mean test accuracy {:.4}, train loss {:.4}",
            acc.mean,
            loss_sum / order.len() as f64
        );
        epochs.push(EpochReport {
            epoch,
            per_task: acc.per_task.clone(),
            mean: acc.mean,
            train_loss: loss_sum / order.len() as f64,
            train_accuracy: hits as f64 / order.len() as f64,
            ops,
            wall_time_s: train_time,
        });
    }
    let final_accuracy = evaluate_model(model.as_model(), &split.test, num_tasks)?;
    let routing_map = match &model {
        ExperimentModel::Routed(net) => Some(export_routing_map(
            &net.model,
            &net.trainer.agents,
            &split.test,
            num_tasks,
        )?),
        ExperimentModel::Baseline(_) => None,
    };
    let report = RunReport {
        dataset: config.dataset.to_string(),
        architecture: config.architecture.to_string(),
        rl: rl_name(config.rl).to_string(),
        seed: config.seed,
        param_count: model.as_model().params().scalar_count(),
        epochs,
        final_accuracy,
        distinct_per_depth: routing_map.as_ref().map(|m| m.distinct_per_depth.clone()),
        artifacts: Vec::new(),
    };
    Ok(TrainOutcome {
        model,
        report,
        timeline,
        routing_map,
    })
}

const ROUTER_TABLE: u64 = 1 << 40;
const ROUTER_APPROX: u64 = 2 << 40;
const DISPATCHER: u64 = 3 << 40;

/// Model parameters, then router tables or approximator weights, as one
/// checkpoint. Router record ids are tagged in the high bits.
pub fn save_checkpoint<W: Write>(w: W, model: &ExperimentModel) -> Result<()> {
    let mut owned: Vec<(u64, Tensor)> = Vec::new();
    let base: &ParamStore = model.as_model().params();
    for p in base.iter() {
        owned.push((p.id.0 as u64, p.value.clone()));
    }
    if let ExperimentModel::Routed(net) = model {
        for (a, policy) in net.trainer.agents.agents.iter().enumerate() {
            match policy {
                Policy::Tabular(t) => {
                    for (d, row) in t.rows.iter().enumerate() {
                        owned.push((
                            ROUTER_TABLE | (a as u64) << 20 | d as u64,
                            Tensor::vector(row.clone()),
                        ));
                    }
                }
                Policy::Approx(p) => {
                    for q in p.store.iter() {
                        owned.push((
                            ROUTER_APPROX | (a as u64) << 20 | q.id.0 as u64,
                            q.value.clone(),
                        ));
                    }
                }
            }
        }
        if let Some(Dispatcher::Learned(d)) = &net.trainer.agents.dispatcher {
            for q in d.store.iter() {
                owned.push((DISPATCHER | q.id.0 as u64, q.value.clone()));
            }
        }
    }
    checkpoint::write_records(w, owned.iter().map(|(id, t)| (*id, t)))
}

/// Restores a checkpoint written by [`save_checkpoint`] into a model built
/// from the same configuration.
pub fn load_checkpoint<R: Read>(r: R, model: &mut ExperimentModel) -> Result<()> {
    let records = checkpoint::read_records(r)?;
    let (base, router): (Vec<_>, Vec<_>) =
        records.into_iter().partition(|(id, _)| *id < ROUTER_TABLE);
    match model {
        ExperimentModel::Baseline(m) => {
            if !router.is_empty() {
                return Err(Error::Format {
                    offset: 0,
                    reason: "checkpoint holds router state but the model has no router".into(),
                });
            }
            m.store_mut().load_values(base)
        }
        ExperimentModel::Routed(net) => {
            net.model.store.load_values(base)?;
            let mut approx: Vec<Vec<(u64, Tensor)>> =
                vec![Vec::new(); net.trainer.agents.agents.len()];
            let mut disp = Vec::new();
            for (id, t) in router {
                let tag = id & !((1 << 40) - 1);
                let a = ((id >> 20) & 0xF_FFFF) as usize;
                let low = id & 0xF_FFFF;
                let bad = || Error::Format {
                    offset: 0,
                    reason: format!("router record {id:#x} does not match the model"),
                };
                match tag {
                    ROUTER_TABLE => match net.trainer.agents.agents.get_mut(a) {
                        Some(Policy::Tabular(tab)) => {
                            let row = tab.rows.get_mut(low as usize).ok_or_else(bad)?;
                            if row.len() != t.len() {
                                return Err(bad());
                            }
                            row.copy_from_slice(t.data());
                        }
                        _ => return Err(bad()),
                    },
                    ROUTER_APPROX => approx.get_mut(a).ok_or_else(bad)?.push((low, t)),
                    DISPATCHER => disp.push((id & ((1 << 40) - 1), t)),
                    _ => return Err(bad()),
                }
            }
            for (policy, recs) in net.trainer.agents.agents.iter_mut().zip(approx) {
                if let Policy::Approx(p) = policy {
                    p.store.load_values(recs)?;
                }
            }
            if let Some(Dispatcher::Learned(d)) = &mut net.trainer.agents.dispatcher {
                d.store.load_values(disp)?;
            }
            Ok(())
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

/// Trains and evaluates one configuration. When `output_dir` is set the
/// directory receives exactly the files in [`ARTIFACTS`].
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunReport> {
    config.validate()?;
    let split = load_dataset(config)?;
    let model = build_model(config, split.input_dim(), split.max_classes())?;
    if config.output_dir.is_empty() {
        return Ok(train(config, &split, model, None)?.report);
    }
    let dir = PathBuf::from(&config.output_dir);
    fs::create_dir_all(&dir)?;
    fs::write(dir.join(ARTIFACTS[0]), config.serialize())?;
    let mut metrics = create(&dir.join(ARTIFACTS[1]))?;
    let mut out = train(config, &split, model, Some(&mut metrics))?;
    metrics.flush()?;

    let mut tl = create(&dir.join(ARTIFACTS[2]))?;
    match &out.timeline {
        Some(t) => t.write_csv(&mut tl)?,
        None => writeln!(tl, "sample_count,task,depth,action,probability")?,
    }
    tl.flush()?;
    let map = out.routing_map.clone().unwrap_or(RoutingMap {
        tasks: Vec::new(),
        distinct_per_depth: Vec::new(),
        block_tasks: Default::default(),
    });
    fs::write(dir.join(ARTIFACTS[3]), map.to_json()?)?;
    let mut ck = create(&dir.join(ARTIFACTS[4]))?;
    save_checkpoint(&mut ck, &out.model)?;
    ck.flush()?;
    out.report.artifacts = ARTIFACTS.iter().map(|s| s.to_string()).collect();
    fs::write(
        dir.join(ARTIFACTS[5]),
        serde_json::to_string_pretty(&out.report)?,
    )?;
    Ok(out.report)
}

/// Per-seed results next to their mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiSeedReport {
    pub seeds: Vec<u64>,
    pub per_seed_mean: Vec<f64>,
    pub per_seed_per_task: Vec<Vec<f64>>,
    pub mean: f64,
    pub mean_per_task: Vec<f64>,
}

impl MultiSeedReport {
    pub fn from_reports(reports: &[RunReport]) -> Result<Self> {
        if reports.is_empty() {
            return Err(Error::contract("no runs to aggregate"));
        }
        let n = reports.len() as f64;
        let tasks = reports[0].final_accuracy.per_task.len();
        let mean_per_task = (0..tasks)
            .map(|t| {
                reports
                    .iter()
                    .map(|r| r.final_accuracy.per_task[t])
                    .sum::<f64>()
                    / n
            })
            .collect();
        Ok(MultiSeedReport {
            seeds: reports.iter().map(|r| r.seed).collect(),
            per_seed_mean: reports.iter().map(|r| r.final_accuracy.mean).collect(),
            per_seed_per_task: reports
                .iter()
                .map(|r| r.final_accuracy.per_task.clone())
                .collect(),
            mean: reports.iter().map(|r| r.final_accuracy.mean).sum::<f64>() / n,
            mean_per_task,
        })
    }
}

fn sub_config(base: &ExperimentConfig, seed: u64, sub: &str) -> ExperimentConfig {
    let mut c = base.clone();
    c.seed = seed;
    if !base.output_dir.is_empty() {
        c.output_dir = Path::new(&base.output_dir)
            .join(sub)
            .to_string_lossy()
            .into_owned();
    }
    c
}

/// Runs seeds `base, base + 1, ..` in parallel, each in `seed_<s>/`.
pub fn run_seeds(
    config: &ExperimentConfig,
    count: usize,
) -> Result<(Vec<RunReport>, MultiSeedReport)> {
    let configs: Vec<ExperimentConfig> = (0..count as u64)
        .map(|i| {
            let s = config.seed.wrapping_add(i);
            sub_config(config, s, &format!("seed_{s}"))
        })
        .collect();
    let reports = configs
        .par_iter()
        .map(run_experiment)
        .collect::<Result<Vec<_>>>()?;
    let agg = MultiSeedReport::from_reports(&reports)?;
    Ok((reports, agg))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub rho: f64,
    pub seed: u64,
    pub per_task: Vec<f64>,
    pub mean: f64,
}

pub const DEFAULT_RHOS: [f64; 3] = [0.0, 0.1, 0.3];

/// One run per `(rho, seed)` in parallel. With an output directory each run
/// owns `rho_<rho>/seed_<s>/` and the merged table goes to `sweep.csv`.
pub fn rho_sweep(base: &ExperimentConfig, rhos: &[f64], seeds: usize) -> Result<Vec<SweepRow>> {
    if !base.architecture.is_routed() {
        return Err(Error::Validation(format!(
            "rho sweep needs a routed architecture, not {}",
            base.architecture
        )));
    }
    let mut jobs = Vec::new();
    for &rho in rhos {
        for i in 0..seeds.max(1) as u64 {
            let s = base.seed.wrapping_add(i);
            let mut c = sub_config(base, s, &format!("rho_{rho}/seed_{s}"));
            c.rho = rho;
            c.validate()?;
            jobs.push(c);
        }
    }
    let rows = jobs
        .par_iter()
        .map(|c| {
            let r = run_experiment(c)?;
            Ok(SweepRow {
                rho: c.rho,
                seed: c.seed,
                per_task: r.final_accuracy.per_task,
                mean: r.final_accuracy.mean,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if !base.output_dir.is_empty() {
        fs::create_dir_all(&base.output_dir)?;
        let mut w = create(&Path::new(&base.output_dir).join("sweep.csv"))?;
        write_sweep_csv(&mut w, &rows)?;
        w.flush()?;
    }
    Ok(rows)
}

pub fn write_sweep_csv<W: Write>(mut w: W, rows: &[SweepRow]) -> Result<()> {
    let tasks = rows.first().map_or(0, |r| r.per_task.len());
    let cols: Vec<String> = (0..tasks).map(|t| format!("task_{t}")).collect();
    writeln!(w, "rho,seed,{},mean", cols.join(","))?;
    for r in rows {
        let vals: Vec<String> = r.per_task.iter().map(f64::to_string).collect();
        writeln!(w, "{},{},{},{}", r.rho, r.seed, vals.join(","), r.mean)?;
    }
    Ok(())
}

named_enum!(ScalingArch {
    Routing => "routing",
    CrossStitch => "cross_stitch",
});

#[derive(Clone, Debug, PartialEq)]
pub struct ScalingConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub hidden_layers: usize,
    pub samples_per_epoch: usize,
    pub timed_epochs: usize,
    pub seed: u64,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        ScalingConfig {
            input_dim: 784,
            hidden_dim: 64,
            hidden_layers: 2,
            samples_per_epoch: 200,
            timed_epochs: 3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub architecture: String,
    pub k: usize,
    /// Forward + backward + update operations for one single-sample step.
    pub ops_per_step: u64,
    pub epoch_wall_time_s: f64,
    /// Epoch wall time divided by the number of tasks (`k`).
    pub wall_time_per_task_s: f64,
}

/// Per-step operation counts and epoch wall times for `k` blocks (and `k`
/// tasks) per layer. Each configuration gets one warm-up epoch.
pub fn scaling_benchmark(
    block_counts: &[usize],
    architectures: &[ScalingArch],
    config: &ScalingConfig,
) -> Result<Vec<ScalingRow>> {
    if config.timed_epochs == 0 || config.samples_per_epoch == 0 {
        return Err(Error::Validation(
            "scaling benchmark needs samples and timed epochs".into(),
        ));
    }
    let mut rows = Vec::new();
    for &arch in architectures {
        for &k in block_counts {
            if k == 0 {
                return Err(Error::Validation("block count must be positive".into()));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            let samples: Vec<MtlSample> = (0..config.samples_per_epoch)
                .map(|i| MtlSample {
                    x: Tensor::from_fn(&[config.input_dim], |_| rng.gen_range(0.0..1.0)),
                    t: i % k,
                    y: rng.gen_range(0..2),
                })
                .collect();
            let mut ec = ExperimentConfig {
                architecture: match arch {
                    ScalingArch::Routing => Architecture::RoutingAllFc,
                    ScalingArch::CrossStitch => Architecture::CrossStitch,
                },
                hidden_dim: config.hidden_dim,
                hidden_layers: config.hidden_layers,
                blocks_per_layer: k,
                batch_size: 1,
                seed: config.seed,
                ..ExperimentConfig::default()
            };
            ec.interference.num_tasks = k;
            let mut model = build_model(&ec, config.input_dim, 2)?;
            let m = model.as_model_mut();
            let (r, ops) = opcount::measure(|| m.train_batch(&[(0, &samples[0])], 0, &mut rng));
            r?;
            let mut times = Vec::new();
            for epoch in 0..=config.timed_epochs {
                let start = Instant::now();
                for (i, s) in samples.iter().enumerate() {
                    m.train_batch(&[(i, s)], epoch, &mut rng)?;
                }
                if epoch > 0 {
                    times.push(start.elapsed().as_secs_f64());
                }
            }
            let t = times.iter().sum::<f64>() / times.len() as f64;
            rows.push(ScalingRow {
                architecture: arch.to_string(),
                k,
                ops_per_step: ops,
                epoch_wall_time_s: t,
                wall_time_per_task_s: t / k as f64,
            });
        }
    }
    Ok(rows)
}

pub fn write_scaling_csv<W: Write>(mut w: W, rows: &[ScalingRow]) -> Result<()> {
    writeln!(
        w,
        "architecture,k,ops_per_step,epoch_wall_time_s,wall_time_per_task_s"
    )?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.architecture, r.k, r.ops_per_step, r.epoch_wall_time_s, r.wall_time_per_task_s
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.interference.samples_per_task = 60;
        c.interference.test_per_task = 20;
        c.interference.dim = 6;
        c.hidden_dim = 8;
        c.epochs = 2;
        c.timeline_every = 50;
        c
    }

    #[test]
    fn config_round_trip() {
        let mut c = small();
        c.rho = 0.3;
        c.learning_rate = 0.1 + 0.2;
        c.wpl_variant = WplVariant::Algorithm3;
        c.output_dir = "/tmp/x y".into();
        let text = c.serialize();
        let back = ExperimentConfig::parse(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.serialize(), text);
    }

    #[test]
    fn parse_comments_and_errors() {
        let c = ExperimentConfig::parse("# header\nrho = 0.1  # trailing\n\nepochs=3\n").unwrap();
        assert_eq!((c.rho, c.epochs), (0.1, 3));
        assert!(ExperimentConfig::parse("bogus = 1")
            .unwrap_err()
            .is_validation());
        assert!(ExperimentConfig::parse("epochs")
            .unwrap_err()
            .is_validation());
        assert!(ExperimentConfig::parse("epochs = many")
            .unwrap_err()
            .is_validation());
        assert!(ExperimentConfig::parse("architecture = mlp")
            .unwrap_err()
            .is_validation());
    }

    #[test]
    fn wpl_with_approximator_rejected() {
        let mut c = small();
        c.representation = Representation::Approx;
        let e = c.validate().unwrap_err();
        assert!(e.is_validation());
        assert!(e.to_string().contains("tabular"));
        c.rl = RlAlgorithm::Reinforce;
        c.validate().unwrap();
        c.architecture = Architecture::RoutingSingleAgent;
        c.validate().unwrap();
        c.rl = RlAlgorithm::Wpl;
        c.representation = Representation::Tabular;
        assert!(c.validate().unwrap_err().is_validation());
        c.rl = RlAlgorithm::QApprox;
        assert!(c.validate().unwrap_err().is_validation());
    }

    #[test]
    fn deterministic_runs() {
        let c = small();
        let a = run_experiment(&c).unwrap();
        let b = run_experiment(&c).unwrap();
        assert_eq!(a.without_timing(), b.without_timing());
        assert_eq!(a.epochs.len(), 2);
    }

    #[test]
    fn every_architecture_trains() {
        for &arch in Architecture::ALL {
            let mut c = small();
            c.architecture = arch;
            c.epochs = 1;
            if arch == Architecture::RoutingAllFcRecurrentPass {
                c.encoder_dim = c.hidden_dim;
            }
            if arch == Architecture::RoutingSingleAgent {
                c.rl = RlAlgorithm::Reinforce;
            }
            let r = run_experiment(&c).unwrap();
            assert_eq!(r.epochs.len(), 1, "{arch}");
            assert!(r.final_accuracy.mean.is_finite());
        }
    }

    #[test]
    fn seeds_are_consecutive() {
        let mut c = small();
        c.seed = 7;
        c.epochs = 1;
        let (reports, agg) = run_seeds(&c, 3).unwrap();
        assert_eq!(agg.seeds, vec![7, 8, 9]);
        assert_eq!(agg.per_seed_mean.len(), 3);
        let m = reports.iter().map(|r| r.final_accuracy.mean).sum::<f64>() / 3.0;
        assert!((agg.mean - m).abs() < 1e-15);
    }

    #[test]
    fn checkpoint_restores_predictions() {
        let c = small();
        let split = load_dataset(&c).unwrap();
        let model = build_model(&c, split.input_dim(), 2).unwrap();
        let trained = train(&c, &split, model, None).unwrap().model;
        let mut buf = Vec::new();
        save_checkpoint(&mut buf, &trained).unwrap();
        let mut fresh = build_model(&c, split.input_dim(), 2).unwrap();
        load_checkpoint(buf.as_slice(), &mut fresh).unwrap();
        for s in &split.test {
            assert_eq!(
                trained.as_model().predict(s).unwrap(),
                fresh.as_model().predict(s).unwrap()
            );
        }
    }
}
