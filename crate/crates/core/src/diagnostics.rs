//! Policy timelines, block adoption curves and routing maps.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blocks::{Action, BlockRegistry};
use crate::data::MtlSample;
use crate::error::{Error, Result};
use crate::policies::{policy_snapshot, AgentSet, PolicySnapshot};
use crate::routing::{RoutedModel, Router};

/// Shannon entropy in bits.
pub fn entropy_bits(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * x.log2())
        .sum::<f64>()
}

/// Agent policies sampled every `every` training samples.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyTimeline {
    pub every: usize,
    /// Legal actions per depth (index 0 is depth 1).
    pub legal: Vec<Vec<Action>>,
    pub entries: Vec<(usize, PolicySnapshot)>,
    next: usize,
}

impl PolicyTimeline {
    pub fn new(every: usize, registry: &BlockRegistry) -> Result<Self> {
        if every == 0 {
            return Err(Error::Config("timeline cadence must be positive".into()));
        }
        let legal = (1..=registry.max_depth())
            .map(|d| registry.legal_actions(d))
            .collect::<Result<_>>()?;
        Ok(PolicyTimeline {
            every,
            legal,
            entries: Vec::new(),
            next: 0,
        })
    }

    /// Call before training on samples `seen..seen + upcoming`. Records one
    /// snapshot for every multiple of `every` in that range.
    pub fn observe(&mut self, seen: usize, upcoming: usize, agents: &AgentSet) -> Result<()> {
        if self.next >= seen + upcoming.max(1) {
            return Ok(());
        }
        let snap = policy_snapshot(agents)?;
        while self.next < seen + upcoming.max(1) {
            if self.next >= seen {
                self.entries.push((self.next, snap.clone()));
            }
            self.next += self.every;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn sample_counts(&self) -> Vec<usize> {
        self.entries.iter().map(|(c, _)| *c).collect()
    }

    /// The first depth at which `block` is a legal action, with its index.
    fn locate(&self, block: Action) -> Result<(usize, usize)> {
        self.legal
            .iter()
            .enumerate()
            .find_map(|(d, acts)| acts.iter().position(|a| *a == block).map(|i| (d, i)))
            .ok_or_else(|| Error::Lookup(format!("block {} is not routable", block.label())))
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "sample_count,task,depth,action,probability")?;
        for (count, snap) in &self.entries {
            for (agent, rows) in snap.iter().enumerate() {
                for (d, row) in rows.iter().enumerate() {
                    for (a, p) in row.iter().enumerate() {
                        writeln!(
                            w,
                            "{count},{agent},{},{},{p}",
                            d + 1,
                            self.legal[d][a].label()
                        )?;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Per agent, the probability of choosing `block` at each snapshot.
pub fn block_adoption_curve(timeline: &PolicyTimeline, block: Action) -> Result<Vec<Vec<f64>>> {
    if block.is_pass() {
        return Err(Error::Lookup("PASS is not a block".into()));
    }
    let (d, i) = timeline.locate(block)?;
    let agents = timeline.entries.first().map_or(0, |(_, s)| s.len());
    Ok((0..agents)
        .map(|a| timeline.entries.iter().map(|(_, s)| s[a][d][i]).collect())
        .collect())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskPath {
    pub task: usize,
    /// Action labels, one per depth.
    pub path: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoutingMap {
    pub tasks: Vec<TaskPath>,
    /// Distinct blocks used per depth across tasks (PASS excluded).
    pub distinct_per_depth: Vec<usize>,
    /// Block label to the tasks whose path uses it.
    pub block_tasks: BTreeMap<String, Vec<usize>>,
}

impl RoutingMap {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Most frequent greedy path per task over `samples`.
pub fn export_routing_map<R: Router + Sync + ?Sized>(
    model: &RoutedModel,
    router: &R,
    samples: &[MtlSample],
    num_tasks: usize,
) -> Result<RoutingMap> {
    let paths: Vec<(usize, Vec<Action>)> = samples
        .par_iter()
        .map(|s| Ok((s.t, model.predict(s, router)?.actions())))
        .collect::<Result<_>>()?;
    let mut freq: Vec<HashMap<Vec<Action>, usize>> = vec![HashMap::new(); num_tasks];
    for (t, p) in paths {
        let slot = freq
            .get_mut(t)
            .ok_or_else(|| Error::contract(format!("sample task {t} >= {num_tasks} tasks")))?;
        *slot.entry(p).or_insert(0) += 1;
    }
    let depth = model.registry.max_depth();
    let mut tasks = Vec::new();
    let mut per_depth: Vec<Vec<Action>> = vec![Vec::new(); depth];
    let mut block_tasks: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (t, f) in freq.into_iter().enumerate() {
        // ties broken toward the smallest path for determinism
        let Some((path, _)) = f
            .into_iter()
            .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(&a.0)))
        else {
            continue;
        };
        for (d, a) in path.iter().enumerate() {
            if a.is_pass() {
                continue;
            }
            if !per_depth[d].contains(a) {
                per_depth[d].push(*a);
            }
            let users = block_tasks.entry(a.label()).or_default();
            if !users.contains(&t) {
                users.push(t);
            }
        }
        tasks.push(TaskPath {
            task: t,
            path: path.iter().map(Action::label).collect(),
        });
    }
    Ok(RoutingMap {
        tasks,
        distinct_per_depth: per_depth.iter().map(Vec::len).collect(),
        block_tasks,
    })
}
