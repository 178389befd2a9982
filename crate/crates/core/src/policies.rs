//! Router policies and the agent architectures built from them.
//!
//! * [`TabularPolicy`]: one row per depth, one column per legal action.
//! * [`ApproxPolicy`]: one two-layer perceptron per depth over
//!   `concat(v, one_hot(t))`.
//! * [`AgentSet`]: a single agent, one agent per task (indexed by the task
//!   id), or per-task agents behind a learned dispatcher.

use std::io::Write;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::Action;
use crate::error::{Error, Result};
use crate::routing::{Decision, DispatchRecord, Router, RoutingState, SelectMode};
use crate::tensor::{argmax, softmax, Graph, NodeId, ParamId, ParamStore, Tensor};

pub const APPROX_HIDDEN: usize = 64;

/// What a policy's numbers mean.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PolicyKind {
    /// Action probabilities, trained by policy gradient.
    Pg,
    /// Action values, trained by Q-learning.
    Q,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TabularPolicy {
    pub kind: PolicyKind,
    /// `rows[depth - 1][action]`
    pub rows: Vec<Vec<f64>>,
}

impl TabularPolicy {
    /// PG rows start uniform, Q rows start at zero.
    pub fn new(kind: PolicyKind, action_counts: &[usize]) -> Self {
        let rows = action_counts
            .iter()
            .map(|&n| match kind {
                PolicyKind::Pg => vec![1.0 / n as f64; n],
                PolicyKind::Q => vec![0.0; n],
            })
            .collect();
        TabularPolicy { kind, rows }
    }

    pub fn row(&self, depth: usize) -> Result<&[f64]> {
        self.rows
            .get(depth.wrapping_sub(1))
            .map(Vec::as_slice)
            .ok_or_else(|| Error::contract(format!("tabular policy has no row for depth {depth}")))
    }

    pub fn row_mut(&mut self, depth: usize) -> Result<&mut Vec<f64>> {
        self.rows
            .get_mut(depth.wrapping_sub(1))
            .ok_or_else(|| Error::contract(format!("tabular policy has no row for depth {depth}")))
    }
}

#[derive(Clone, Debug)]
struct Mlp {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Per-depth two-layer perceptrons.
#[derive(Clone, Debug)]
pub struct ApproxPolicy {
    pub kind: PolicyKind,
    pub store: ParamStore,
    nets: Vec<Mlp>,
    num_tasks: usize,
    input_dims: Vec<usize>,
    action_counts: Vec<usize>,
}

impl ApproxPolicy {
    /// `input_dims[i]` is the width of `v` at depth `i + 1`.
    pub fn new(
        kind: PolicyKind,
        input_dims: &[usize],
        action_counts: &[usize],
        num_tasks: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if input_dims.len() != action_counts.len() || input_dims.is_empty() {
            return Err(Error::contract(
                "approximator needs one input width and action count per depth",
            ));
        }
        let mut store = ParamStore::new();
        let nets = input_dims
            .iter()
            .zip(action_counts)
            .map(|(&d, &a)| {
                let inp = d + num_tasks;
                Mlp {
                    w1: store.add_glorot(APPROX_HIDDEN, inp, rng),
                    b1: store.add_zeros(&[APPROX_HIDDEN]),
                    w2: store.add_glorot(a, APPROX_HIDDEN, rng),
                    b2: store.add_zeros(&[a]),
                }
            })
            .collect();
        Ok(ApproxPolicy {
            kind,
            store,
            nets,
            num_tasks,
            input_dims: input_dims.to_vec(),
            action_counts: action_counts.to_vec(),
        })
    }

    pub fn depths(&self) -> usize {
        self.nets.len()
    }

    pub fn num_tasks(&self) -> usize {
        self.num_tasks
    }

    pub fn action_count(&self, depth: usize) -> usize {
        self.action_counts[depth - 1]
    }

    /// `concat(v, one_hot(t))`
    pub fn encode(&self, state: &RoutingState) -> Result<Tensor> {
        let want = self
            .input_dims
            .get(state.i.wrapping_sub(1))
            .ok_or_else(|| {
                Error::contract(format!("approximator has no net for depth {}", state.i))
            })?;
        if state.v.len() != *want {
            return Err(Error::dim("approximator input", &[*want], &[state.v.len()]));
        }
        if state.t >= self.num_tasks {
            return Err(Error::contract(format!(
                "task {} >= {} tasks",
                state.t, self.num_tasks
            )));
        }
        let mut x = Vec::with_capacity(want + self.num_tasks);
        x.extend_from_slice(state.v.data());
        x.extend((0..self.num_tasks).map(|j| (j == state.t) as usize as f64));
        Ok(Tensor::vector(x))
    }

    /// Records the depth-`depth` net on `graph`; returns its output (logits or Q-values).
    pub fn output(&self, graph: &mut Graph<'_>, depth: usize, input: &Tensor) -> Result<NodeId> {
        let net = self
            .nets
            .get(depth.wrapping_sub(1))
            .ok_or_else(|| Error::contract(format!("approximator has no net for depth {depth}")))?;
        let x = graph.input(input.clone());
        let (w1, b1, w2, b2) = (
            graph.param(net.w1),
            graph.param(net.b1),
            graph.param(net.w2),
            graph.param(net.b2),
        );
        let h = graph.linear(x, w1, Some(b1))?;
        let h = graph.relu(h);
        graph.linear(h, w2, Some(b2))
    }

    /// Raw net outputs for `input` at `depth`.
    pub fn outputs(&self, depth: usize, input: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.store);
        let y = self.output(&mut g, depth, input)?;
        Ok(g.value(y).data().to_vec())
    }
}

#[derive(Clone, Debug)]
pub enum Policy {
    Tabular(TabularPolicy),
    Approx(ApproxPolicy),
}

impl Policy {
    pub fn kind(&self) -> PolicyKind {
        match self {
            Policy::Tabular(p) => p.kind,
            Policy::Approx(p) => p.kind,
        }
    }

    pub fn is_tabular(&self) -> bool {
        matches!(self, Policy::Tabular(_))
    }

    /// Probabilities (PG) or Q-values (Q) over the legal actions at `state`.
    pub fn values(&self, state: &RoutingState) -> Result<Vec<f64>> {
        match self {
            Policy::Tabular(p) => Ok(p.row(state.i)?.to_vec()),
            Policy::Approx(p) => {
                let out = p.outputs(state.i, &p.encode(state)?)?;
                Ok(match p.kind {
                    PolicyKind::Pg => softmax(&out),
                    PolicyKind::Q => out,
                })
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentMode {
    Single,
    PerTask,
    Dispatched,
}

#[derive(Clone, Debug)]
pub enum Dispatcher {
    /// PG approximator with a single "depth" whose actions are agent indices.
    Learned(ApproxPolicy),
    /// Always the same agent.
    Constant(usize),
}

#[derive(Clone, Debug)]
pub struct AgentSet {
    pub mode: AgentMode,
    pub agents: Vec<Policy>,
    pub dispatcher: Option<Dispatcher>,
    /// Exploration rate for Q agents while sampling.
    pub epsilon: f64,
}

/// How to build each routing agent.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Representation {
    Tabular,
    Approx,
}

/// Dimensions an agent set is built against.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PolicyDims {
    pub input_dims: Vec<usize>,
    pub action_counts: Vec<usize>,
    pub num_tasks: usize,
}

impl AgentSet {
    pub fn new(
        mode: AgentMode,
        repr: Representation,
        kind: PolicyKind,
        dims: &PolicyDims,
        seed: u64,
    ) -> Result<Self> {
        let n_agents = match mode {
            AgentMode::Single => 1,
            AgentMode::PerTask | AgentMode::Dispatched => dims.num_tasks,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let agents = (0..n_agents)
            .map(|_| init_policy(repr, kind, dims, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let dispatcher = match mode {
            AgentMode::Dispatched => Some(Dispatcher::Learned(ApproxPolicy::new(
                PolicyKind::Pg,
                &dims.input_dims[..1],
                &[n_agents],
                dims.num_tasks,
                &mut rng,
            )?)),
            _ => None,
        };
        Ok(AgentSet {
            mode,
            agents,
            dispatcher,
            epsilon: 0.0,
        })
    }

    pub fn num_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn check(&self) -> Result<()> {
        let ok = match self.mode {
            AgentMode::Single => self.agents.len() == 1,
            AgentMode::PerTask => !self.agents.is_empty(),
            AgentMode::Dispatched => self.dispatcher.is_some() && !self.agents.is_empty(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::contract(format!(
                "agent set in {:?} mode has {} agents",
                self.mode,
                self.agents.len()
            )))
        }
    }
}

pub fn init_policy(
    repr: Representation,
    kind: PolicyKind,
    dims: &PolicyDims,
    rng: &mut impl Rng,
) -> Result<Policy> {
    Ok(match repr {
        Representation::Tabular => Policy::Tabular(TabularPolicy::new(kind, &dims.action_counts)),
        Representation::Approx => Policy::Approx(ApproxPolicy::new(
            kind,
            &dims.input_dims,
            &dims.action_counts,
            dims.num_tasks,
            rng,
        )?),
    })
}

fn renormalized(mut p: Vec<f64>) -> Vec<f64> {
    for x in p.iter_mut() {
        if x.is_nan() || *x <= 0.0 {
            *x = 0.0;
        }
    }
    let s: f64 = p.iter().sum();
    if s > 0.0 {
        p.iter_mut().for_each(|x| *x /= s);
    } else {
        let n = p.len() as f64;
        p.iter_mut().for_each(|x| *x = 1.0 / n);
    }
    p
}

fn sample_index(p: &[f64], rng: &mut dyn RngCore) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    // rounding left u above the cumulative sum; take the last supported action
    p.iter().rposition(|&x| x > 0.0).unwrap_or(p.len() - 1)
}

impl AgentSet {
    pub fn agent_for(&self, state: &RoutingState, dispatched: Option<usize>) -> Result<usize> {
        let id = match self.mode {
            AgentMode::Single => 0,
            AgentMode::PerTask => state.t,
            AgentMode::Dispatched => dispatched
                .ok_or_else(|| Error::contract("dispatched agent set used without a dispatch"))?,
        };
        if id >= self.agents.len() {
            return Err(Error::contract(format!(
                "agent {id} out of range ({} agents)",
                self.agents.len()
            )));
        }
        Ok(id)
    }

    /// `select_action`: the chosen action index (into `legal`), its
    /// probability or Q-value and the consulted agent.
    pub fn select_action(
        &self,
        state: &RoutingState,
        legal: &[Action],
        dispatched: Option<usize>,
        mode: SelectMode,
        rng: &mut dyn RngCore,
    ) -> Result<Decision> {
        if legal.is_empty() {
            return Err(Error::contract(format!(
                "no legal actions at depth {}",
                state.i
            )));
        }
        let agent = self.agent_for(state, dispatched)?;
        let policy = &self.agents[agent];
        let values = policy.values(state)?;
        if values.len() != legal.len() {
            return Err(Error::dim(
                "policy row vs legal actions",
                &[values.len()],
                &[legal.len()],
            ));
        }
        let (index, probs) = match policy.kind() {
            PolicyKind::Pg => {
                let p = renormalized(values.clone());
                let i = match mode {
                    SelectMode::Greedy => argmax(&p),
                    SelectMode::Sample => sample_index(&p, rng),
                };
                (i, p)
            }
            PolicyKind::Q => {
                let best = argmax(&values);
                let eps = match mode {
                    SelectMode::Greedy => 0.0,
                    SelectMode::Sample => self.epsilon,
                };
                let n = values.len() as f64;
                let p: Vec<f64> = (0..values.len())
                    .map(|i| eps / n + if i == best { 1.0 - eps } else { 0.0 })
                    .collect();
                let i = if eps > 0.0 && rng.gen::<f64>() < eps {
                    rng.gen_range(0..values.len())
                } else {
                    best
                };
                (i, p)
            }
        };
        let value = match policy.kind() {
            PolicyKind::Pg => probs[index],
            PolicyKind::Q => values[index],
        };
        Ok(Decision {
            action: legal[index],
            index,
            value,
            agent,
            probs,
        })
    }
}

impl Router for AgentSet {
    fn dispatch(
        &self,
        state: &RoutingState,
        mode: SelectMode,
        rng: &mut dyn RngCore,
    ) -> Result<Option<DispatchRecord>> {
        if self.mode != AgentMode::Dispatched {
            return Ok(None);
        }
        match &self.dispatcher {
            None => Err(Error::contract("dispatched agent set without a dispatcher")),
            Some(Dispatcher::Constant(a)) => Ok(Some(DispatchRecord {
                input: state.v.clone(),
                agent: *a,
                prob: 1.0,
            })),
            Some(Dispatcher::Learned(d)) => {
                let input = d.encode(state)?;
                let p = softmax(&d.outputs(1, &input)?);
                let agent = match mode {
                    SelectMode::Greedy => argmax(&p),
                    SelectMode::Sample => sample_index(&p, rng),
                };
                Ok(Some(DispatchRecord {
                    input,
                    agent,
                    prob: p[agent],
                }))
            }
        }
    }

    fn decide(
        &self,
        state: &RoutingState,
        legal: &[Action],
        dispatched: Option<usize>,
        mode: SelectMode,
        rng: &mut dyn RngCore,
    ) -> Result<Decision> {
        self.select_action(state, legal, dispatched, mode, rng)
    }
}

/// `[agent][depth][action]`: probabilities for PG agents, a one-hot argmax
/// for Q agents. Only tabular agents can be snapshotted without probe states.
pub type PolicySnapshot = Vec<Vec<Vec<f64>>>;

pub fn policy_snapshot(set: &AgentSet) -> Result<PolicySnapshot> {
    set.agents
        .iter()
        .map(|p| match p {
            Policy::Tabular(t) => Ok(t
                .rows
                .iter()
                .map(|row| match t.kind {
                    PolicyKind::Pg => row.clone(),
                    PolicyKind::Q => {
                        let best = argmax(row);
                        (0..row.len())
                            .map(|i| (i == best) as usize as f64)
                            .collect()
                    }
                })
                .collect()),
            Policy::Approx(_) => Err(Error::contract(
                "approximator policies depend on v; snapshot needs tabular agents",
            )),
        })
        .collect()
}

/// CSV with columns `agent,depth,action,probability` (depth is 1-based).
pub fn write_snapshot_csv<W: Write>(mut w: W, snapshot: &PolicySnapshot) -> Result<()> {
    writeln!(w, "agent,depth,action,probability")?;
    for (agent, rows) in snapshot.iter().enumerate() {
        for (d, row) in rows.iter().enumerate() {
            for (a, p) in row.iter().enumerate() {
                writeln!(w, "{agent},{},{a},{p}", d + 1)?;
            }
        }
    }
    Ok(())
}
