//! Static and soft-sharing comparison models: task-specific heads,
//! task-specific stacks, cross-stitch columns and soft block mixtures.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::MtlSample;
use crate::error::{Error, Result};
use crate::model::{MultiTaskModel, StepRecord};
use crate::routing::Encoder;
use crate::tensor::{sgd_step, Graph, NodeId, ParamId, ParamStore, SgdConfig, Tensor};

/// `out_i = Σ_j w[i][j] · v_j` for a `k×k` weight node.
pub fn cross_stitch_forward(
    graph: &mut Graph<'_>,
    inputs: &[NodeId],
    weights: NodeId,
) -> Result<Vec<NodeId>> {
    let k = inputs.len();
    let shape = graph.value(weights).shape().to_vec();
    if shape != [k, k] {
        return Err(Error::dim("cross-stitch weights", &[k, k], &shape));
    }
    (0..k)
        .map(|i| graph.combine(inputs, weights, i * k))
        .collect()
}

/// `softmax(logits) · stack(outputs)`.
pub fn soft_mixture_forward(
    graph: &mut Graph<'_>,
    outputs: &[NodeId],
    logits: NodeId,
) -> Result<NodeId> {
    let n = graph.value(logits).len();
    if n != outputs.len() {
        return Err(Error::dim("soft-mixture logits", &[outputs.len()], &[n]));
    }
    let w = graph.softmax(logits);
    graph.combine(outputs, w, 0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    TaskSpecific1fc,
    TaskSpecificAllfc,
    CrossStitch,
    SoftMixture,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 4] = [
        BaselineKind::TaskSpecific1fc,
        BaselineKind::TaskSpecificAllfc,
        BaselineKind::CrossStitch,
        BaselineKind::SoftMixture,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            BaselineKind::TaskSpecific1fc => "task_specific_1fc",
            BaselineKind::TaskSpecificAllfc => "task_specific_allfc",
            BaselineKind::CrossStitch => "cross_stitch",
            BaselineKind::SoftMixture => "soft_mixture",
        }
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown baseline kind {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineConfig {
    pub kind: BaselineKind,
    /// Widths from the (encoded) input through the hidden layers to the classes.
    pub dims: Vec<usize>,
    pub num_tasks: usize,
    /// Optional shared encoder `[input_dim, encoded_dim]`.
    pub encoder: Option<(usize, usize)>,
    /// Columns for cross-stitch, blocks per layer for the soft mixture.
    /// Ignored by the task-specific models.
    pub k: usize,
    pub stitch_noise: f64,
    /// Keep the cross-stitch matrices at their initial values.
    pub freeze_stitch: bool,
    pub sgd: SgdConfig,
}

impl BaselineConfig {
    pub fn new(kind: BaselineKind, dims: Vec<usize>, num_tasks: usize) -> Self {
        BaselineConfig {
            kind,
            dims,
            num_tasks,
            encoder: None,
            k: num_tasks,
            stitch_noise: 0.01,
            freeze_stitch: false,
            sgd: SgdConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.len() < 2 || self.dims.contains(&0) {
            return Err(Error::Config(format!(
                "baseline dims {:?} need >= 2 positive widths",
                self.dims
            )));
        }
        if self.num_tasks == 0 {
            return Err(Error::Config("baseline needs at least one task".into()));
        }
        if matches!(
            self.kind,
            BaselineKind::CrossStitch | BaselineKind::SoftMixture
        ) && self.k == 0
        {
            return Err(Error::Config(format!("{} needs k >= 1", self.kind)));
        }
        if let Some((_, e)) = self.encoder {
            if e != self.dims[0] {
                return Err(Error::Config(format!(
                    "encoder width {e} != first layer input {}",
                    self.dims[0]
                )));
            }
        }
        self.sgd.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Dense {
    w: ParamId,
    b: ParamId,
    relu: bool,
}

impl Dense {
    fn new(store: &mut ParamStore, i: usize, o: usize, relu: bool, rng: &mut impl Rng) -> Self {
        Dense {
            w: store.add_glorot(o, i, rng),
            b: store.add_zeros(&[o]),
            relu,
        }
    }

    fn apply(&self, g: &mut Graph<'_>, x: NodeId) -> Result<NodeId> {
        let (w, b) = (g.param(self.w), g.param(self.b));
        let y = g.linear(x, w, Some(b))?;
        Ok(if self.relu { g.relu(y) } else { y })
    }
}

fn stack(store: &mut ParamStore, dims: &[usize], rng: &mut impl Rng) -> Vec<Dense> {
    let last = dims.len() - 2;
    (0..=last)
        .map(|l| Dense::new(store, dims[l], dims[l + 1], l < last, rng))
        .collect()
}

#[derive(Clone, Debug)]
enum Layout {
    Shared1fc {
        trunk: Vec<Dense>,
        heads: Vec<Dense>,
    },
    AllFc {
        columns: Vec<Vec<Dense>>,
    },
    CrossStitch {
        columns: Vec<Vec<Dense>>,
        /// One `k×k` matrix after every hidden layer.
        stitches: Vec<ParamId>,
    },
    SoftMixture {
        /// `[layer][block]`
        layers: Vec<Vec<Dense>>,
        /// `[layer][task]`, each of length `k`.
        logits: Vec<Vec<ParamId>>,
    },
}

#[derive(Clone, Debug)]
pub struct BaselineModel {
    config: BaselineConfig,
    store: ParamStore,
    encoder: Option<Encoder>,
    layout: Layout,
}

/// Builds a baseline with Glorot weights, zero biases, identity-plus-noise
/// stitch matrices and zero mixture logits.
pub fn build_baseline(config: BaselineConfig, seed: u64) -> Result<BaselineModel> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let encoder = config
        .encoder
        .map(|(i, o)| Encoder::new(&mut store, i, o, &mut rng));
    let dims = &config.dims;
    let t = config.num_tasks;
    let layout = match config.kind {
        BaselineKind::TaskSpecific1fc => {
            let n = dims.len();
            let trunk: Vec<Dense> = (0..n - 2)
                .map(|l| Dense::new(&mut store, dims[l], dims[l + 1], true, &mut rng))
                .collect();
            let heads = (0..t)
                .map(|_| Dense::new(&mut store, dims[n - 2], dims[n - 1], false, &mut rng))
                .collect();
            Layout::Shared1fc { trunk, heads }
        }
        BaselineKind::TaskSpecificAllfc => Layout::AllFc {
            columns: (0..t).map(|_| stack(&mut store, dims, &mut rng)).collect(),
        },
        BaselineKind::CrossStitch => {
            let k = config.k;
            let columns = (0..k).map(|_| stack(&mut store, dims, &mut rng)).collect();
            let noise = config.stitch_noise;
            let stitches = (0..dims.len() - 2)
                .map(|_| {
                    let m = Tensor::from_fn(&[k, k], |idx| {
                        let eye = (idx / k == idx % k) as usize as f64;
                        if noise > 0.0 {
                            eye + rng.gen_range(-noise..noise)
                        } else {
                            eye
                        }
                    });
                    store.add(m)
                })
                .collect();
            Layout::CrossStitch { columns, stitches }
        }
        BaselineKind::SoftMixture => {
            let k = config.k;
            let last = dims.len() - 2;
            let layers = (0..=last)
                .map(|l| {
                    (0..k)
                        .map(|_| Dense::new(&mut store, dims[l], dims[l + 1], l < last, &mut rng))
                        .collect()
                })
                .collect();
            let logits = (0..=last)
                .map(|_| (0..t).map(|_| store.add_zeros(&[k])).collect())
                .collect();
            Layout::SoftMixture { layers, logits }
        }
    };
    Ok(BaselineModel {
        config,
        store,
        encoder,
        layout,
    })
}

impl BaselineModel {
    pub fn kind(&self) -> BaselineKind {
        self.config.kind
    }

    pub fn config(&self) -> &BaselineConfig {
        &self.config
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Parameters only task `t`'s head reads (the classifier of 1-fc, the
    /// whole stack of all-fc). Empty for the soft-sharing models.
    pub fn task_params(&self, t: usize) -> Vec<ParamId> {
        match &self.layout {
            Layout::Shared1fc { heads, .. } => {
                heads.get(t).map(|d| vec![d.w, d.b]).unwrap_or_default()
            }
            Layout::AllFc { columns } => columns
                .get(t)
                .map(|c| c.iter().flat_map(|d| [d.w, d.b]).collect())
                .unwrap_or_default(),
            _ => Vec::new(),
        }
    }

    /// Cross-stitch matrices, one per hidden layer.
    pub fn stitch_params(&self) -> &[ParamId] {
        match &self.layout {
            Layout::CrossStitch { stitches, .. } => stitches,
            _ => &[],
        }
    }

    /// Mixture logits as `[layer][task]`.
    pub fn mixture_logits(&self) -> Option<&[Vec<ParamId>]> {
        match &self.layout {
            Layout::SoftMixture { logits, .. } => Some(logits),
            _ => None,
        }
    }

    fn check_task(&self, t: usize) -> Result<()> {
        if t >= self.config.num_tasks {
            return Err(Error::contract(format!(
                "task {t} >= {} tasks",
                self.config.num_tasks
            )));
        }
        Ok(())
    }

    /// Class logits for task `t`.
    pub fn forward(&self, g: &mut Graph<'_>, x: &Tensor, t: usize) -> Result<NodeId> {
        self.check_task(t)?;
        let mut v = g.input(x.clone());
        if let Some(enc) = &self.encoder {
            v = enc.apply(g, v)?;
        }
        match &self.layout {
            Layout::Shared1fc { trunk, heads } => {
                for d in trunk {
                    v = d.apply(g, v)?;
                }
                heads[t].apply(g, v)
            }
            Layout::AllFc { columns } => {
                for d in &columns[t] {
                    v = d.apply(g, v)?;
                }
                Ok(v)
            }
            Layout::CrossStitch { columns, stitches } => {
                let k = columns.len();
                let mut vs = vec![v; k];
                for l in 0..columns[0].len() {
                    for (c, col) in columns.iter().enumerate() {
                        vs[c] = col[l].apply(g, vs[c])?;
                    }
                    if let Some(&s) = stitches.get(l) {
                        let w = if self.config.freeze_stitch {
                            g.input(self.store.value(s).clone())
                        } else {
                            g.param(s)
                        };
                        vs = cross_stitch_forward(g, &vs, w)?;
                    }
                }
                Ok(vs[t % k])
            }
            Layout::SoftMixture { layers, logits } => {
                for (layer, lg) in layers.iter().zip(logits) {
                    let outs = layer
                        .iter()
                        .map(|d| d.apply(g, v))
                        .collect::<Result<Vec<_>>>()?;
                    let w = g.param(lg[t]);
                    v = soft_mixture_forward(g, &outs, w)?;
                }
                Ok(v)
            }
        }
    }
}

impl MultiTaskModel for BaselineModel {
    fn train_batch(
        &mut self,
        batch: &[(usize, &MtlSample)],
        epoch: usize,
        _rng: &mut ChaCha8Rng,
    ) -> Result<Vec<StepRecord>> {
        if batch.is_empty() {
            return Ok(Vec::new());
        }
        let lr = self.config.sgd.lr_at(epoch);
        let mut records = Vec::with_capacity(batch.len());
        for &(idx, s) in batch {
            let (grads, loss, pred) = {
                let mut g = Graph::new(&self.store);
                let logits = self.forward(&mut g, &s.x, s.t)?;
                let pred = g.value(logits).argmax();
                let loss = g.cross_entropy(logits, s.y)?;
                (g.backward(loss)?, g.value(loss).data()[0], pred)
            };
            self.store.accumulate(&grads);
            records.push(StepRecord {
                epoch,
                sample_idx: idx,
                task: s.t,
                loss,
                correct: pred == s.y,
                r_final: None,
                actions: Vec::new(),
                effective_lr: lr,
            });
        }
        self.store.scale_grads(1.0 / batch.len() as f64);
        sgd_step(&mut self.store, &self.config.sgd, epoch);
        Ok(records)
    }

    fn predict(&self, sample: &MtlSample) -> Result<usize> {
        let mut g = Graph::new(&self.store);
        let logits = self.forward(&mut g, &sample.x, sample.t)?;
        Ok(g.value(logits).argmax())
    }

    fn params(&self) -> &ParamStore {
        &self.store
    }
}
