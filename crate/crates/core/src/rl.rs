//! Rewards, router update rules and the joint router/block training step.

use std::collections::HashMap;

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{Action, BlockRegistry, Topology};
use crate::data::MtlSample;
use crate::error::{Error, Result};
use crate::model::{MultiTaskModel, StepRecord};
use crate::policies::{
    AgentMode, AgentSet, ApproxPolicy, Dispatcher, Policy, PolicyDims, PolicyKind, Representation,
};
use crate::routing::{Encoder, RoutedModel, SelectMode, Trace};
use crate::tensor::{argmax, sgd_step, Graph, ParamStore, SgdConfig, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollabKind {
    AvgProbability,
    AvgTimesChosen,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalRewardKind {
    PlusMinusOne,
    NegativeLoss,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub rho: f64,
    pub collab_kind: CollabKind,
    pub gamma: f64,
    pub final_kind: FinalRewardKind,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            rho: 0.0,
            collab_kind: CollabKind::AvgProbability,
            gamma: 1.0,
            final_kind: FinalRewardKind::PlusMinusOne,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::Config(format!(
                "rho must be in [0, 1], got {}",
                self.rho
            )));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!(
                "gamma must be in [0, 1], got {}",
                self.gamma
            )));
        }
        Ok(())
    }
}

/// Exponential moving averages of how often, and with what probability,
/// the router picked each block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockUsageHistory {
    pub decay: f64,
    prob: HashMap<Action, f64>,
    chosen: HashMap<Action, f64>,
}

impl BlockUsageHistory {
    pub fn new(decay: f64) -> Self {
        BlockUsageHistory {
            decay,
            prob: HashMap::new(),
            chosen: HashMap::new(),
        }
    }

    pub fn statistic(&self, kind: CollabKind, block: Action) -> f64 {
        let map = match kind {
            CollabKind::AvgProbability => &self.prob,
            CollabKind::AvgTimesChosen => &self.chosen,
        };
        map.get(&block).copied().unwrap_or(0.0)
    }

    /// Sets a block's running statistics directly.
    pub fn set(&mut self, block: Action, avg_probability: f64, avg_times_chosen: f64) {
        self.prob.insert(block, avg_probability);
        self.chosen.insert(block, avg_times_chosen);
    }

    /// Folds one decision into the averages: every legal block sees its
    /// probability, the chosen one also counts as picked.
    pub fn observe(&mut self, legal: &[Action], probs: &[f64], chosen: usize) {
        let d = self.decay;
        for (j, (a, p)) in legal.iter().zip(probs).enumerate() {
            if a.is_pass() {
                continue;
            }
            let e = self.prob.entry(*a).or_insert(0.0);
            *e = d * *e + (1.0 - d) * p;
            let c = self.chosen.entry(*a).or_insert(0.0);
            *c = d * *c + (1.0 - d) * (j == chosen) as usize as f64;
        }
    }
}

/// Fills `r_final` and the immediate rewards, then updates `history`.
///
/// `r_i = rho × statistic(a_i)` read before this trace is folded in; PASS
/// steps earn no immediate reward.
pub fn compute_rewards(
    trace: &mut Trace,
    y_true: usize,
    loss: f64,
    config: &RewardConfig,
    history: &mut BlockUsageHistory,
    registry: &BlockRegistry,
) -> Result<()> {
    trace.r_final = match config.final_kind {
        FinalRewardKind::PlusMinusOne => {
            if trace.predicted_class() == y_true {
                1.0
            } else {
                -1.0
            }
        }
        FinalRewardKind::NegativeLoss => -loss,
    };
    for step in &mut trace.steps {
        step.reward = match step.action {
            Action::Pass => 0.0,
            a => config.rho * history.statistic(config.collab_kind, a),
        };
    }
    for step in &trace.steps {
        let legal = registry.legal_actions(step.state.i)?;
        history.observe(&legal, &step.probs, step.action_index);
    }
    Ok(())
}

/// `R_i = r_final + Σ_{j≥i} γ^{j−i} r_j` for every step.
pub fn returns(trace: &Trace, gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; trace.steps.len()];
    let mut acc = 0.0;
    for (i, step) in trace.steps.iter().enumerate().rev() {
        acc = step.reward + gamma * acc;
        out[i] = trace.r_final + acc;
    }
    out
}

/// Clip to `[0, 1]`, then normalize. An all-zero result falls back to uniform.
pub fn simplex_projection(pi: &[f64]) -> Vec<f64> {
    let clipped: Vec<f64> = pi.iter().map(|&x| x.clamp(0.0, 1.0)).collect();
    let s: f64 = clipped.iter().sum();
    if s.is_nan() || s <= 0.0 {
        warn!("simplex projection of {pi:?} has no positive mass; using uniform");
        return vec![1.0 / pi.len() as f64; pi.len()];
    }
    clipped.into_iter().map(|x| x / s).collect()
}

/// Which probability scales a WPL gradient of a given sign.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WplVariant {
    /// Negative gradients scaled by `1 − π(a)`, others by `π(a)`.
    Algorithm3,
    /// Positive gradients scaled by `1 − π(a)`, others by `π(a)`.
    AppendixA4,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WplState {
    /// Historical average return per `(agent, depth, action index)`.
    pub r_hat: HashMap<(usize, usize, usize), f64>,
    pub lambda_pi: f64,
    pub gamma: f64,
    pub variant: WplVariant,
}

impl WplState {
    pub fn new(lambda_pi: f64, gamma: f64, variant: WplVariant) -> Self {
        WplState {
            r_hat: HashMap::new(),
            lambda_pi,
            gamma,
            variant,
        }
    }
}

fn tabular_pg<'a>(
    policy: &'a mut Policy,
    rule: &str,
) -> Result<&'a mut crate::policies::TabularPolicy> {
    match policy {
        Policy::Tabular(t) if t.kind == PolicyKind::Pg => Ok(t),
        Policy::Tabular(_) => Err(Error::contract(format!(
            "{rule} needs a policy-gradient table, not Q-values"
        ))),
        Policy::Approx(_) => Err(Error::contract(format!(
            "{rule} is defined only for the tabular setting"
        ))),
    }
}

/// Weighted Policy Learner update of the agent that produced `trace`.
pub fn wpl_update(trace: &Trace, policy: &mut Policy, state: &mut WplState) -> Result<()> {
    let table = tabular_pg(policy, "WPL")?;
    let rets = returns(trace, state.gamma);
    let lambda = state.lambda_pi;
    for (step, &ret) in trace.steps.iter().zip(&rets) {
        let key = (step.agent, step.state.i, step.action_index);
        let r_hat = state.r_hat.entry(key).or_insert(0.0);
        *r_hat = (1.0 - lambda) * *r_hat + lambda * ret;
        let mut delta = ret - *r_hat;
        let row = table.row_mut(step.state.i)?;
        let p = row[step.action_index];
        let damp_by_complement = match state.variant {
            WplVariant::Algorithm3 => delta < 0.0,
            WplVariant::AppendixA4 => delta > 0.0,
        };
        delta *= if damp_by_complement { 1.0 - p } else { p };
        let mut raw = row.clone();
        raw[step.action_index] += lambda * delta;
        *row = simplex_projection(&raw);
    }
    Ok(())
}

/// REINFORCE settings and the optional running-average baseline.
#[derive(Clone, Debug, PartialEq)]
pub struct ReinforceState {
    pub lambda_pi: f64,
    pub gamma: f64,
    pub use_baseline: bool,
    pub baseline: f64,
    pub baseline_decay: f64,
}

impl ReinforceState {
    pub fn new(lambda_pi: f64, gamma: f64, use_baseline: bool) -> Self {
        ReinforceState {
            lambda_pi,
            gamma,
            use_baseline,
            baseline: 0.0,
            baseline_decay: 0.99,
        }
    }
}

/// Ascends `λπ · R_i · ∇ log π(a_i | s_i)` for every step.
///
/// Tables are parameterized directly by probabilities, so the gradient is
/// `R_i / π(a_i)` on the chosen entry, followed by simplex projection.
pub fn reinforce_update(
    trace: &Trace,
    policy: &mut Policy,
    state: &mut ReinforceState,
) -> Result<()> {
    let mut rets = returns(trace, state.gamma);
    if state.use_baseline {
        let b = state.baseline;
        if let Some(first) = rets.first() {
            state.baseline = state.baseline_decay * b + (1.0 - state.baseline_decay) * first;
        }
        rets.iter_mut().for_each(|r| *r -= b);
    }
    match policy {
        Policy::Tabular(t) => {
            if t.kind != PolicyKind::Pg {
                return Err(Error::contract("REINFORCE needs a policy-gradient table"));
            }
            for (step, &ret) in trace.steps.iter().zip(&rets) {
                let row = t.row_mut(step.state.i)?;
                let p = row[step.action_index];
                if ret == 0.0 || p <= 0.0 {
                    continue;
                }
                let mut raw = row.clone();
                raw[step.action_index] += state.lambda_pi * ret / p;
                *row = simplex_projection(&raw);
            }
            Ok(())
        }
        Policy::Approx(p) => {
            if p.kind != PolicyKind::Pg {
                return Err(Error::contract(
                    "REINFORCE needs a policy-gradient approximator",
                ));
            }
            let inputs = trace
                .steps
                .iter()
                .map(|s| p.encode(&s.state))
                .collect::<Result<Vec<_>>>()?;
            let targets: Vec<(usize, usize, f64)> = trace
                .steps
                .iter()
                .zip(&rets)
                .map(|(s, &r)| (s.state.i, s.action_index, r))
                .collect();
            policy_gradient_step(p, &inputs, &targets, state.lambda_pi)
        }
    }
}

/// One SGD step on `−Σ R · log π(a | input)` for an approximator.
fn policy_gradient_step(
    p: &mut ApproxPolicy,
    inputs: &[Tensor],
    targets: &[(usize, usize, f64)],
    lr: f64,
) -> Result<()> {
    let mut all = Vec::new();
    {
        let mut g = Graph::new(&p.store);
        for (input, &(depth, action, ret)) in inputs.iter().zip(targets) {
            if ret == 0.0 {
                continue;
            }
            let logits = p.output(&mut g, depth, input)?;
            let logp = g.log_softmax(logits);
            let pick = g.pick(logp, action)?;
            let loss = g.scale(pick, -ret);
            all.push(g.backward(loss)?);
        }
    }
    apply_sgd(&mut p.store, &all, lr);
    Ok(())
}

fn apply_sgd(store: &mut ParamStore, grads: &[crate::tensor::Gradients], lr: f64) {
    if grads.is_empty() {
        return;
    }
    for g in grads {
        store.accumulate(g);
    }
    let cfg = SgdConfig {
        learning_rate: lr,
        anneal_every: usize::MAX,
        anneal_divisor: 1.0,
    };
    sgd_step(store, &cfg, 0);
}

/// REINFORCE on the dispatcher, rewarded with the routed sample's return.
pub fn dispatcher_update(trace: &Trace, set: &mut AgentSet, lr: f64, gamma: f64) -> Result<()> {
    let (Some(record), Some(Dispatcher::Learned(d))) = (&trace.dispatch, &mut set.dispatcher)
    else {
        return Ok(());
    };
    let ret = returns(trace, gamma)
        .first()
        .copied()
        .unwrap_or(trace.r_final);
    policy_gradient_step(
        d,
        std::slice::from_ref(&record.input),
        &[(1, record.agent, ret)],
        lr,
    )
}

/// One-step Q-learning over the trace. The last step's target is
/// `r_n + r_final`; earlier steps bootstrap from the next depth's row.
pub fn q_tabular_update(trace: &Trace, policy: &mut Policy, alpha: f64, gamma: f64) -> Result<()> {
    let table = match policy {
        Policy::Tabular(t) if t.kind == PolicyKind::Q => t,
        _ => return Err(Error::contract("tabular Q-learning needs a Q table")),
    };
    let n = trace.steps.len();
    for (i, step) in trace.steps.iter().enumerate() {
        let target = if i + 1 < n {
            let next = table.row(trace.steps[i + 1].state.i)?;
            step.reward + gamma * next.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        } else {
            step.reward + trace.r_final
        };
        let row = table.row_mut(step.state.i)?;
        let q = &mut row[step.action_index];
        *q += alpha * (target - *q);
    }
    Ok(())
}

/// Semi-gradient Q-learning for approximators: one SGD step on the squared
/// TD error per trace step, no target network.
pub fn q_approx_update(trace: &Trace, policy: &mut Policy, lr: f64, gamma: f64) -> Result<()> {
    let p = match policy {
        Policy::Approx(p) if p.kind == PolicyKind::Q => p,
        _ => {
            return Err(Error::contract(
                "approximate Q-learning needs a Q approximator",
            ))
        }
    };
    let n = trace.steps.len();
    for (i, step) in trace.steps.iter().enumerate() {
        let target = if i + 1 < n {
            let next = &trace.steps[i + 1].state;
            let q_next = p.outputs(next.i, &p.encode(next)?)?;
            step.reward + gamma * q_next.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        } else {
            step.reward + trace.r_final
        };
        let input = p.encode(&step.state)?;
        let grads = {
            let mut g = Graph::new(&p.store);
            let q = p.output(&mut g, step.state.i, &input)?;
            let qa = g.pick(q, step.action_index)?;
            let loss = g.squared_error(qa, target)?;
            g.backward(loss)?
        };
        apply_sgd(&mut p.store, &[grads], lr);
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RlAlgorithm {
    Wpl,
    Reinforce,
    QTabular,
    QApprox,
}

impl RlAlgorithm {
    pub fn policy_kind(&self) -> PolicyKind {
        match self {
            RlAlgorithm::Wpl | RlAlgorithm::Reinforce => PolicyKind::Pg,
            RlAlgorithm::QTabular | RlAlgorithm::QApprox => PolicyKind::Q,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainerConfig {
    pub algorithm: RlAlgorithm,
    pub reward: RewardConfig,
    pub lambda_pi: f64,
    pub wpl_variant: WplVariant,
    pub q_alpha: f64,
    /// Learning rate for approximator routers and the dispatcher.
    pub approx_lr: f64,
    pub reinforce_baseline: bool,
    pub history_decay: f64,
    pub sgd: SgdConfig,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Share of training over which ε is annealed linearly.
    pub epsilon_anneal: f64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            algorithm: RlAlgorithm::Wpl,
            reward: RewardConfig::default(),
            lambda_pi: 0.05,
            wpl_variant: WplVariant::AppendixA4,
            q_alpha: 0.1,
            approx_lr: 0.01,
            reinforce_baseline: false,
            history_decay: 0.99,
            sgd: SgdConfig::default(),
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_anneal: 0.25,
        }
    }
}

/// Router state owned by one training run.
#[derive(Clone, Debug)]
pub struct RouterTrainer {
    pub config: TrainerConfig,
    pub agents: AgentSet,
    pub history: BlockUsageHistory,
    pub wpl: WplState,
    pub reinforce: ReinforceState,
}

impl RouterTrainer {
    pub fn new(config: TrainerConfig, agents: AgentSet) -> Result<Self> {
        config.reward.validate()?;
        config.sgd.validate()?;
        agents.check()?;
        let expected = config.algorithm.policy_kind();
        if agents.agents.iter().any(|p| p.kind() != expected) {
            return Err(Error::Validation(format!(
                "{:?} needs {:?} policies",
                config.algorithm, expected
            )));
        }
        if config.algorithm == RlAlgorithm::Wpl && agents.agents.iter().any(|p| !p.is_tabular()) {
            return Err(Error::Validation(
                "WPL is defined only for the tabular setting".into(),
            ));
        }
        if config.algorithm == RlAlgorithm::QTabular
            && agents.agents.iter().any(|p| !p.is_tabular())
        {
            return Err(Error::Validation(
                "tabular Q-learning needs tabular agents".into(),
            ));
        }
        if config.algorithm == RlAlgorithm::QApprox && agents.agents.iter().any(|p| p.is_tabular())
        {
            return Err(Error::Validation(
                "approximate Q-learning needs approximator agents".into(),
            ));
        }
        let g = config.reward.gamma;
        Ok(RouterTrainer {
            history: BlockUsageHistory::new(config.history_decay),
            wpl: WplState::new(config.lambda_pi, g, config.wpl_variant),
            reinforce: ReinforceState::new(config.lambda_pi, g, config.reinforce_baseline),
            config,
            agents,
        })
    }

    /// ε for Q agents: linear from `epsilon_start` to `epsilon_end` over
    /// the first `epsilon_anneal` of training.
    pub fn set_progress(&mut self, fraction: f64) {
        let c = &self.config;
        let f = if c.epsilon_anneal > 0.0 {
            (fraction / c.epsilon_anneal).clamp(0.0, 1.0)
        } else {
            1.0
        };
        self.agents.epsilon = c.epsilon_start + (c.epsilon_end - c.epsilon_start) * f;
    }

    /// Updates the router from a reward-annotated trace.
    pub fn update(&mut self, trace: &Trace) -> Result<()> {
        let Some(agent) = trace.steps.first().map(|s| s.agent) else {
            return Ok(());
        };
        let gamma = self.config.reward.gamma;
        let policy = &mut self.agents.agents[agent];
        match self.config.algorithm {
            RlAlgorithm::Wpl => wpl_update(trace, policy, &mut self.wpl)?,
            RlAlgorithm::Reinforce => {
                if let Policy::Approx(_) = policy {
                    self.reinforce.lambda_pi = self.config.approx_lr;
                } else {
                    self.reinforce.lambda_pi = self.config.lambda_pi;
                }
                reinforce_update(trace, policy, &mut self.reinforce)?
            }
            RlAlgorithm::QTabular => q_tabular_update(trace, policy, self.config.q_alpha, gamma)?,
            RlAlgorithm::QApprox => q_approx_update(trace, policy, self.config.approx_lr, gamma)?,
        }
        dispatcher_update(trace, &mut self.agents, self.config.approx_lr, gamma)
    }
}

/// Output of one joint training step.
pub struct TrainStepOutput {
    pub records: Vec<StepRecord>,
    pub traces: Vec<Trace>,
}

/// Joint router/block update over a mini-batch.
///
/// Each sample is routed (sampling from the policy), the cross-entropy loss
/// is backpropagated through the blocks on its route only, the mean
/// gradient is applied with SGD, and then each trace updates the router.
/// Block and router updates are independent.
pub fn train_step(
    batch: &[(usize, &MtlSample)],
    model: &mut RoutedModel,
    trainer: &mut RouterTrainer,
    epoch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<TrainStepOutput> {
    if batch.is_empty() {
        return Ok(TrainStepOutput {
            records: Vec::new(),
            traces: Vec::new(),
        });
    }
    let mut outcomes = Vec::with_capacity(batch.len());
    for &(idx, sample) in batch {
        let (trace, loss, grads) = {
            let mut g = Graph::new(&model.store);
            let out = model.forward(&mut g, sample, &trainer.agents, SelectMode::Sample, rng)?;
            let loss = g.cross_entropy(out.prediction, sample.y)?;
            let lv = g.value(loss).data()[0];
            (out.trace, lv, g.backward(loss)?)
        };
        model.store.accumulate(&grads);
        outcomes.push((idx, sample, trace, loss));
    }
    model.store.scale_grads(1.0 / batch.len() as f64);
    sgd_step(&mut model.store, &trainer.config.sgd, epoch);

    let lr = trainer.config.sgd.lr_at(epoch);
    let mut records = Vec::with_capacity(batch.len());
    let mut traces = Vec::with_capacity(batch.len());
    for (idx, sample, mut trace, loss) in outcomes {
        compute_rewards(
            &mut trace,
            sample.y,
            loss,
            &trainer.config.reward,
            &mut trainer.history,
            &model.registry,
        )?;
        trainer.update(&trace)?;
        records.push(StepRecord {
            epoch,
            sample_idx: idx,
            task: sample.t,
            loss,
            correct: trace.predicted_class() == sample.y,
            r_final: Some(trace.r_final),
            actions: trace.actions(),
            effective_lr: lr,
        });
        traces.push(trace);
    }
    Ok(TrainStepOutput { records, traces })
}

/// A routed model together with its router trainer.
#[derive(Clone, Debug)]
pub struct RoutingNet {
    pub model: RoutedModel,
    pub trainer: RouterTrainer,
}

impl MultiTaskModel for RoutingNet {
    fn train_batch(
        &mut self,
        batch: &[(usize, &MtlSample)],
        epoch: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<StepRecord>> {
        Ok(train_step(batch, &mut self.model, &mut self.trainer, epoch, rng)?.records)
    }

    fn predict(&self, sample: &MtlSample) -> Result<usize> {
        Ok(self
            .model
            .predict(sample, &self.trainer.agents)?
            .predicted_class())
    }

    fn params(&self) -> &ParamStore {
        &self.model.store
    }

    fn set_progress(&mut self, fraction: f64) {
        self.trainer.set_progress(fraction);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoutingNetConfig {
    pub topology: Topology,
    /// Optional shared encoder `[input_dim, encoded_dim]` in front of the routed layers.
    pub encoder: Option<(usize, usize)>,
    pub agent_mode: AgentMode,
    pub representation: Representation,
    pub num_tasks: usize,
    pub trainer: TrainerConfig,
}

/// Seeded construction of blocks, encoder and router agents.
pub fn build_routing_net(config: RoutingNetConfig, seed: u64) -> Result<RoutingNet> {
    config.topology.validate()?;
    if config.num_tasks == 0 {
        return Err(Error::Config("routing net needs at least one task".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let encoder = match config.encoder {
        Some((i, o)) => {
            if o != config.topology.input_dim() {
                return Err(Error::Config(format!(
                    "encoder width {o} != routed input width {}",
                    config.topology.input_dim()
                )));
            }
            Some(Encoder::new(&mut store, i, o, &mut rng))
        }
        None => None,
    };
    let registry = BlockRegistry::new(config.topology, &mut store, &mut rng)?;
    let dims = PolicyDims {
        input_dims: registry.input_dims(),
        action_counts: registry.action_counts(),
        num_tasks: config.num_tasks,
    };
    let agents = AgentSet::new(
        config.agent_mode,
        config.representation,
        config.trainer.algorithm.policy_kind(),
        &dims,
        seed ^ 0x5eed_0a6e,
    )?;
    let trainer = RouterTrainer::new(config.trainer, agents)?;
    Ok(RoutingNet {
        model: RoutedModel {
            store,
            encoder,
            registry,
        },
        trainer,
    })
}

/// Greedy action index of a Q row (lowest index on ties).
pub fn greedy_q(row: &[f64]) -> usize {
    argmax(row)
}
