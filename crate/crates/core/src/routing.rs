//! Recursive forward routing and the traces it records.

use std::io::Write;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blocks::{Action, BlockRegistry};
use crate::data::MtlSample;
use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, ParamId, ParamStore, Tensor};

/// The router's view of one decision point.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingState {
    pub v: Tensor,
    pub t: usize,
    /// 1-based depth.
    pub i: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SelectMode {
    Sample,
    Greedy,
}

/// What a router returns for one state.
#[derive(Clone, Debug, PartialEq)]
pub struct Decision {
    pub action: Action,
    /// Position of `action` in the legal-action list.
    pub index: usize,
    /// Probability (PG agents) or Q-value (Q agents) of the chosen action.
    pub value: f64,
    pub agent: usize,
    /// The full distribution over legal actions the choice was drawn from.
    pub probs: Vec<f64>,
}

/// A dispatching agent's choice of routing agent for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct DispatchRecord {
    pub input: Tensor,
    pub agent: usize,
    pub prob: f64,
}

pub trait Router {
    /// Called once per sample before depth 1.
    fn dispatch(
        &self,
        _state: &RoutingState,
        _mode: SelectMode,
        _rng: &mut dyn RngCore,
    ) -> Result<Option<DispatchRecord>> {
        Ok(None)
    }

    fn decide(
        &self,
        state: &RoutingState,
        legal: &[Action],
        dispatched: Option<usize>,
        mode: SelectMode,
        rng: &mut dyn RngCore,
    ) -> Result<Decision>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub state: RoutingState,
    pub action: Action,
    pub action_index: usize,
    pub agent: usize,
    pub value: f64,
    pub probs: Vec<f64>,
    pub reward: f64,
}

/// `(S, A, R, r_final)` plus the prediction of one routed forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    pub steps: Vec<Step>,
    pub r_final: f64,
    /// Classifier logits.
    pub prediction: Tensor,
    pub dispatch: Option<DispatchRecord>,
}

impl Trace {
    pub fn states(&self) -> impl Iterator<Item = &RoutingState> {
        self.steps.iter().map(|s| &s.state)
    }

    pub fn actions(&self) -> Vec<Action> {
        self.steps.iter().map(|s| s.action).collect()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.reward).collect()
    }

    pub fn task(&self) -> usize {
        self.steps.first().map(|s| s.state.t).unwrap_or(0)
    }

    pub fn predicted_class(&self) -> usize {
        self.prediction.argmax()
    }
}

pub struct RouteOutput {
    pub prediction: NodeId,
    pub trace: Trace,
}

/// Routes `x` through `n = registry.max_depth()` router decisions.
///
/// The returned trace has exactly `n` steps, PASS included; immediate
/// rewards and `r_final` are left at zero for the reward stage.
pub fn route_forward<R: Router + ?Sized>(
    graph: &mut Graph<'_>,
    registry: &BlockRegistry,
    x: NodeId,
    t: usize,
    router: &R,
    mode: SelectMode,
    rng: &mut dyn RngCore,
) -> Result<RouteOutput> {
    let n = registry.max_depth();
    let mut cur = x;
    let mut state = RoutingState {
        v: graph.value(x).clone(),
        t,
        i: 1,
    };
    let dispatch = router.dispatch(&state, mode, rng)?;
    let dispatched = dispatch.as_ref().map(|d| d.agent);
    let mut steps = Vec::with_capacity(n);
    while state.i <= n {
        let depth = state.i;
        let legal = registry.legal_actions(depth)?;
        let d = router.decide(&state, &legal, dispatched, mode, rng)?;
        if legal.get(d.index) != Some(&d.action) {
            return Err(Error::Routing {
                depth,
                reason: format!(
                    "illegal action {} (legal: {} actions)",
                    d.action.label(),
                    legal.len()
                ),
            });
        }
        let next = match d.action {
            Action::Pass => registry.apply_pass(state.clone())?,
            Action::Block { layer, index } => {
                cur = registry
                    .apply_block(graph, layer, index, cur)
                    .map_err(|e| match e {
                        Error::Dimension { .. } => Error::Routing {
                            depth,
                            reason: e.to_string(),
                        },
                        other => other,
                    })?;
                RoutingState {
                    v: graph.value(cur).clone(),
                    t,
                    i: depth + 1,
                }
            }
        };
        steps.push(Step {
            state,
            action: d.action,
            action_index: d.index,
            agent: d.agent,
            value: d.value,
            probs: d.probs,
            reward: 0.0,
        });
        state = next;
    }
    let classes = registry.topology().num_classes();
    if graph.value(cur).len() != classes {
        return Err(Error::Routing {
            depth: n,
            reason: format!(
                "route ended with width {} instead of {classes} classes",
                graph.value(cur).len()
            ),
        });
    }
    Ok(RouteOutput {
        prediction: cur,
        trace: Trace {
            steps,
            r_final: 0.0,
            prediction: graph.value(cur).clone(),
            dispatch,
        },
    })
}

/// Re-applies a recorded action sequence.
pub fn replay(
    graph: &mut Graph<'_>,
    registry: &BlockRegistry,
    x: NodeId,
    actions: &[Action],
) -> Result<NodeId> {
    let mut cur = x;
    for a in actions {
        if let Action::Block { layer, index } = *a {
            cur = registry.apply_block(graph, layer, index, cur)?;
        }
    }
    Ok(cur)
}

/// Router that replays a fixed action per depth.
#[derive(Clone, Debug)]
pub struct FixedRouter {
    pub actions: Vec<Action>,
}

impl Router for FixedRouter {
    fn decide(
        &self,
        state: &RoutingState,
        legal: &[Action],
        _dispatched: Option<usize>,
        _mode: SelectMode,
        _rng: &mut dyn RngCore,
    ) -> Result<Decision> {
        let action = *self
            .actions
            .get(state.i - 1)
            .ok_or_else(|| Error::Routing {
                depth: state.i,
                reason: "fixed router has no action for this depth".into(),
            })?;
        let index = legal
            .iter()
            .position(|a| *a == action)
            .unwrap_or(usize::MAX);
        let mut probs = vec![0.0; legal.len()];
        if let Some(p) = probs.get_mut(index) {
            *p = 1.0;
        }
        Ok(Decision {
            action,
            index,
            value: 1.0,
            agent: 0,
            probs,
        })
    }
}

/// Optional shared affine+ReLU layer in front of the routed layers.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Encoder {
    pub fn new(
        store: &mut ParamStore,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl rand::Rng,
    ) -> Self {
        Encoder {
            weight: store.add_glorot(out_dim, in_dim, rng),
            bias: store.add_zeros(&[out_dim]),
        }
    }

    pub fn apply(&self, graph: &mut Graph<'_>, x: NodeId) -> Result<NodeId> {
        let (w, b) = (graph.param(self.weight), graph.param(self.bias));
        let y = graph.linear(x, w, Some(b))?;
        Ok(graph.relu(y))
    }
}

/// Function blocks plus the optional encoder, sharing one parameter store.
#[derive(Clone, Debug)]
pub struct RoutedModel {
    pub store: ParamStore,
    pub encoder: Option<Encoder>,
    pub registry: BlockRegistry,
}

impl RoutedModel {
    pub fn forward<R: Router + ?Sized>(
        &self,
        graph: &mut Graph<'_>,
        sample: &MtlSample,
        router: &R,
        mode: SelectMode,
        rng: &mut dyn RngCore,
    ) -> Result<RouteOutput> {
        let x = graph.input(sample.x.clone());
        let x = match &self.encoder {
            Some(enc) => enc.apply(graph, x)?,
            None => x,
        };
        route_forward(graph, &self.registry, x, sample.t, router, mode, rng)
    }

    /// Greedy prediction and its trace for one sample.
    pub fn predict<R: Router + ?Sized>(&self, sample: &MtlSample, router: &R) -> Result<Trace> {
        let mut graph = Graph::new(&self.store);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Ok(self
            .forward(&mut graph, sample, router, SelectMode::Greedy, &mut rng)?
            .trace)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyTable {
    pub per_task: Vec<f64>,
    pub counts: Vec<usize>,
    pub mean: f64,
}

impl AccuracyTable {
    pub fn from_hits(hits: &[usize], counts: &[usize]) -> Result<Self> {
        if let Some(t) = counts.iter().position(|&c| c == 0) {
            return Err(Error::contract(format!(
                "task {t} has no evaluation samples"
            )));
        }
        let per_task: Vec<f64> = hits
            .iter()
            .zip(counts)
            .map(|(&h, &c)| h as f64 / c as f64)
            .collect();
        let mean = per_task.iter().sum::<f64>() / per_task.len() as f64;
        Ok(AccuracyTable {
            per_task,
            counts: counts.to_vec(),
            mean,
        })
    }
}

/// Greedy per-task accuracy. Samples are evaluated in parallel; the result
/// does not depend on scheduling.
pub fn evaluate<R: Router + Sync + ?Sized>(
    samples: &[MtlSample],
    num_tasks: usize,
    model: &RoutedModel,
    router: &R,
) -> Result<AccuracyTable> {
    if samples.is_empty() || num_tasks == 0 {
        return Err(Error::contract("evaluation over an empty split"));
    }
    let outcomes: Vec<(usize, bool)> = samples
        .par_iter()
        .map(|s| {
            let trace = model.predict(s, router)?;
            Ok((s.t, trace.predicted_class() == s.y))
        })
        .collect::<Result<_>>()?;
    let mut hits = vec![0; num_tasks];
    let mut counts = vec![0; num_tasks];
    for (t, ok) in outcomes {
        if t >= num_tasks {
            return Err(Error::contract(format!(
                "sample task {t} >= {num_tasks} tasks"
            )));
        }
        counts[t] += 1;
        hits[t] += ok as usize;
    }
    AccuracyTable::from_hits(&hits, &counts)
}

#[derive(Serialize)]
struct TraceRecord<'a> {
    task: usize,
    actions: Vec<String>,
    rewards: &'a [f64],
    r_final: f64,
    correct: bool,
}

/// One JSON object per line: `{task, actions, rewards, r_final, correct}`.
pub fn write_trace_jsonl<W: Write>(mut w: W, traces: &[(Trace, usize)]) -> Result<()> {
    for (trace, y) in traces {
        let rewards = trace.rewards();
        let rec = TraceRecord {
            task: trace.task(),
            actions: trace.actions().iter().map(Action::label).collect(),
            rewards: &rewards,
            r_final: trace.r_final,
            correct: trace.predicted_class() == *y,
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::Topology;

    fn identity_registry(k: usize) -> (ParamStore, BlockRegistry) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let reg = BlockRegistry::new(
            Topology::layered(&[3, 3, 3, 3], k, false),
            &mut store,
            &mut rng,
        )
        .unwrap();
        for b in reg.blocks() {
            *store.value_mut(b.weight) =
                Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        }
        (store, reg)
    }

    #[test]
    fn identity_blocks_route_to_input() {
        let (store, reg) = identity_registry(2);
        let router = FixedRouter {
            actions: (0..3).map(|l| Action::block(l, 0)).collect(),
        };
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::vector(vec![0.5, 1.0, 2.0]));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = route_forward(&mut g, &reg, x, 0, &router, SelectMode::Greedy, &mut rng).unwrap();
        assert_eq!(out.trace.prediction.data(), &[0.5, 1.0, 2.0]);
        assert_eq!(out.trace.steps.len(), 3);
        assert_eq!(out.trace.actions(), router.actions);
        assert_eq!(
            out.trace
                .steps
                .iter()
                .map(|s| s.state.i)
                .collect::<Vec<_>>(),
            vec![1, 2, 3]
        );
    }

    #[test]
    fn illegal_action_is_a_routing_error() {
        let (store, reg) = identity_registry(2);
        let router = FixedRouter {
            actions: vec![
                Action::block(0, 0),
                Action::block(0, 1),
                Action::block(2, 0),
            ],
        };
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::vector(vec![0.5, 1.0, 2.0]));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        match route_forward(&mut g, &reg, x, 0, &router, SelectMode::Greedy, &mut rng) {
            Err(Error::Routing { depth, reason }) => {
                assert_eq!(depth, 2);
                assert!(reason.contains("0.1"));
            }
            other => panic!("unexpected {:?}", other.map(|o| o.trace)),
        }
    }

    #[test]
    fn accuracy_table_rejects_empty_task() {
        assert!(AccuracyTable::from_hits(&[1, 0], &[2, 0]).is_err());
        let t = AccuracyTable::from_hits(&[1, 2], &[2, 2]).unwrap();
        assert_eq!(t.mean, 0.75);
    }

    #[test]
    fn trace_jsonl_fields() {
        let trace = Trace {
            steps: vec![Step {
                state: RoutingState {
                    v: Tensor::vector(vec![1.0]),
                    t: 2,
                    i: 1,
                },
                action: Action::Pass,
                action_index: 0,
                agent: 2,
                value: 1.0,
                probs: vec![1.0],
                reward: 0.25,
            }],
            r_final: -1.0,
            prediction: Tensor::vector(vec![0.1, 0.9]),
            dispatch: None,
        };
        let mut buf = Vec::new();
        write_trace_jsonl(&mut buf, &[(trace, 1)]).unwrap();
        let v: serde_json::Value = serde_json::from_slice(&buf).unwrap();
        assert_eq!(v["task"], 2);
        assert_eq!(v["actions"][0], "PASS");
        assert_eq!(v["rewards"][0], 0.25);
        assert_eq!(v["r_final"], -1.0);
        assert_eq!(v["correct"], true);
    }
}
