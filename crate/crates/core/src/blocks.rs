//! Routable function blocks grouped into layers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::routing::RoutingState;
use crate::tensor::{Graph, NodeId, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    AffineRelu,
    AffineSoftmaxClassifier,
}

/// A router decision: apply block `(layer, index)` or skip with PASS.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Action {
    Block { layer: usize, index: usize },
    Pass,
}

impl Action {
    pub fn block(layer: usize, index: usize) -> Self {
        Action::Block { layer, index }
    }

    pub fn is_pass(&self) -> bool {
        matches!(self, Action::Pass)
    }

    /// `"layer.index"` or `"PASS"`.
    pub fn label(&self) -> String {
        match self {
            Action::Block { layer, index } => format!("{layer}.{index}"),
            Action::Pass => "PASS".to_string(),
        }
    }

    pub fn parse_label(s: &str) -> Result<Self> {
        if s == "PASS" {
            return Ok(Action::Pass);
        }
        let (l, i) = s
            .split_once('.')
            .ok_or_else(|| Error::Lookup(format!("bad block label {s:?}")))?;
        let parse = |x: &str| {
            x.parse::<usize>()
                .map_err(|_| Error::Lookup(format!("bad block label {s:?}")))
        };
        Ok(Action::block(parse(l)?, parse(i)?))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FunctionBlock {
    pub layer: usize,
    pub index: usize,
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: ParamId,
    pub bias: ParamId,
    pub kind: BlockKind,
}

impl FunctionBlock {
    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub blocks: usize,
    pub kind: BlockKind,
}

impl LayerSpec {
    pub fn is_square(&self) -> bool {
        self.in_dim == self.out_dim
    }
}

/// Topology of a registry; this is also its JSON export format.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    pub layers: Vec<LayerSpec>,
    pub pass_enabled: bool,
    pub layered: bool,
    /// Router invocations per sample. Must equal the layer count when layered.
    #[serde(default)]
    pub max_depth: usize,
}

impl Topology {
    /// `dims = [input, hidden.., classes]`, `k` blocks in every layer.
    pub fn layered(dims: &[usize], k: usize, pass_enabled: bool) -> Self {
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|l| LayerSpec {
                in_dim: dims[l],
                out_dim: dims[l + 1],
                blocks: k,
                kind: if l + 1 == n {
                    BlockKind::AffineSoftmaxClassifier
                } else {
                    BlockKind::AffineRelu
                },
            })
            .collect();
        Topology {
            layers,
            pass_enabled,
            layered: true,
            max_depth: n,
        }
    }

    /// Non-layered variant: any square hidden block may be picked at any
    /// depth before the last; the last depth always picks a classifier.
    pub fn recurrent(dims: &[usize], k: usize, pass_enabled: bool, max_depth: usize) -> Self {
        let mut t = Topology::layered(dims, k, pass_enabled);
        t.layered = false;
        t.max_depth = max_depth;
        t
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.layers.len();
        if n == 0 {
            return Err(Error::Config("registry needs at least one layer".into()));
        }
        for (l, spec) in self.layers.iter().enumerate() {
            if spec.blocks == 0 || spec.in_dim == 0 || spec.out_dim == 0 {
                return Err(Error::Config(format!(
                    "layer {l} has a zero dimension or no blocks"
                )));
            }
            let is_last = l + 1 == n;
            if is_last != (spec.kind == BlockKind::AffineSoftmaxClassifier) {
                return Err(Error::Config(format!(
                    "classifier blocks must appear exactly in the final layer (layer {l})"
                )));
            }
        }
        if self.layered {
            if self.max_depth != n {
                return Err(Error::Config(format!(
                    "layered registry with {n} layers needs max_depth {n}, got {}",
                    self.max_depth
                )));
            }
            for l in 1..n {
                if self.layers[l - 1].out_dim != self.layers[l].in_dim {
                    return Err(Error::Config(format!(
                        "layer {} out_dim {} != layer {l} in_dim {}",
                        l - 1,
                        self.layers[l - 1].out_dim,
                        self.layers[l].in_dim
                    )));
                }
            }
        } else {
            if self.max_depth == 0 {
                return Err(Error::Config("max_depth must be positive".into()));
            }
            let hidden = &self.layers[..n - 1];
            if hidden.is_empty() && self.max_depth > 1 {
                return Err(Error::Config(
                    "non-layered routing needs square hidden layers".into(),
                ));
            }
            let d = self.layers[n - 1].in_dim;
            if let Some((l, _)) = hidden
                .iter()
                .enumerate()
                .find(|(_, s)| s.in_dim != d || s.out_dim != d)
            {
                return Err(Error::Config(format!(
                    "non-layered routing needs every hidden layer to be {d}→{d}; layer {l} is not"
                )));
            }
        }
        if self.pass_enabled && !self.layers[..n - 1].iter().any(LayerSpec::is_square) {
            return Err(Error::Config(
                "PASS needs at least one layer with in_dim == out_dim".into(),
            ));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().map(|l| l.out_dim).unwrap_or(0)
    }
}

/// The set of function blocks, addressable by `(layer, index)`.
#[derive(Clone, Debug)]
pub struct BlockRegistry {
    topology: Topology,
    layers: Vec<Vec<FunctionBlock>>,
}

impl BlockRegistry {
    /// Allocates block parameters in `store`: Glorot-uniform weights, zero biases.
    pub fn new(topology: Topology, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        topology.validate()?;
        let layers = topology
            .layers
            .iter()
            .enumerate()
            .map(|(l, spec)| {
                (0..spec.blocks)
                    .map(|index| FunctionBlock {
                        layer: l,
                        index,
                        in_dim: spec.in_dim,
                        out_dim: spec.out_dim,
                        weight: store.add_glorot(spec.out_dim, spec.in_dim, rng),
                        bias: store.add_zeros(&[spec.out_dim]),
                        kind: spec.kind,
                    })
                    .collect()
            })
            .collect();
        Ok(BlockRegistry { topology, layers })
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn max_depth(&self) -> usize {
        self.topology.max_depth
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layered(&self) -> bool {
        self.topology.layered
    }

    pub fn pass_enabled(&self) -> bool {
        self.topology.pass_enabled
    }

    pub fn layer(&self, l: usize) -> &[FunctionBlock] {
        &self.layers[l]
    }

    pub fn blocks(&self) -> impl Iterator<Item = &FunctionBlock> {
        self.layers.iter().flatten()
    }

    pub fn block(&self, layer: usize, index: usize) -> Result<&FunctionBlock> {
        self.layers
            .get(layer)
            .and_then(|l| l.get(index))
            .ok_or_else(|| Error::Lookup(format!("no function block ({layer}, {index})")))
    }

    /// Legal router actions at 1-based `depth`, blocks in `(layer, index)`
    /// order with PASS (when legal) last.
    pub fn legal_actions(&self, depth: usize) -> Result<Vec<Action>> {
        let n = self.max_depth();
        if depth == 0 || depth > n {
            return Err(Error::contract(format!("depth {depth} outside 1..={n}")));
        }
        let last = self.layers.len() - 1;
        let mut out = Vec::new();
        if self.layered() {
            let l = depth - 1;
            out.extend(self.layers[l].iter().map(|b| Action::block(l, b.index)));
            if self.pass_enabled() && l != last && self.topology.layers[l].is_square() {
                out.push(Action::Pass);
            }
        } else if depth == n {
            out.extend(
                self.layers[last]
                    .iter()
                    .map(|b| Action::block(last, b.index)),
            );
        } else {
            for l in 0..last {
                out.extend(self.layers[l].iter().map(|b| Action::block(l, b.index)));
            }
            if self.pass_enabled() {
                out.push(Action::Pass);
            }
        }
        Ok(out)
    }

    /// Number of legal actions at each depth, depth 1 first.
    pub fn action_counts(&self) -> Vec<usize> {
        (1..=self.max_depth())
            .map(|d| self.legal_actions(d).map(|a| a.len()).unwrap_or(0))
            .collect()
    }

    /// Representation width at each depth's input, depth 1 first.
    pub fn input_dims(&self) -> Vec<usize> {
        (0..self.max_depth())
            .map(|i| {
                if self.layered() {
                    self.topology.layers[i].in_dim
                } else if i == 0 {
                    self.topology.input_dim()
                } else {
                    self.topology.layers.last().unwrap().in_dim
                }
            })
            .collect()
    }

    /// Applies block `(layer, index)` to `v`, recording the ops on `graph`.
    pub fn apply_block(
        &self,
        graph: &mut Graph<'_>,
        layer: usize,
        index: usize,
        v: NodeId,
    ) -> Result<NodeId> {
        let block = self.block(layer, index)?;
        let len = graph.value(v).len();
        if len != block.in_dim {
            return Err(Error::dim("apply_block", &[block.in_dim], &[len]));
        }
        let (w, b) = (graph.param(block.weight), graph.param(block.bias));
        let y = graph.linear(v, w, Some(b))?;
        Ok(match block.kind {
            BlockKind::AffineRelu => graph.relu(y),
            BlockKind::AffineSoftmaxClassifier => y,
        })
    }

    /// PASS: same vector, same task, depth + 1.
    pub fn apply_pass(&self, state: RoutingState) -> Result<RoutingState> {
        if !self.pass_enabled() {
            return Err(Error::contract("PASS action used while PASS is disabled"));
        }
        Ok(RoutingState {
            i: state.i + 1,
            ..state
        })
    }

    pub fn topology_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.topology)?)
    }

    /// Scalar parameter count of all blocks.
    pub fn param_count(&self) -> usize {
        self.blocks()
            .map(|b| b.out_dim * b.in_dim + b.out_dim)
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn registry(topology: Topology) -> (ParamStore, BlockRegistry) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = BlockRegistry::new(topology, &mut store, &mut rng).unwrap();
        (store, r)
    }

    fn set(store: &mut ParamStore, id: ParamId, data: &[f64]) {
        let shape = store.value(id).shape().to_vec();
        *store.value_mut(id) = Tensor::new(shape, data.to_vec()).unwrap();
    }

    #[test]
    fn relu_block_clamps_negative() {
        let (mut store, reg) = registry(Topology::layered(&[2, 2, 2], 1, false));
        let b = reg.block(0, 0).unwrap().clone();
        set(&mut store, b.weight, &[1.0, 0.0, 0.0, 1.0]);
        set(&mut store, b.bias, &[0.0, 0.0]);
        let mut g = Graph::new(&store);
        let v = g.input(Tensor::vector(vec![2.0, -3.0]));
        let y = reg.apply_block(&mut g, 0, 0, v).unwrap();
        assert_eq!(g.value(y).data(), &[2.0, 0.0]);
    }

    #[test]
    fn zero_weight_block_returns_bias() {
        let (mut store, reg) = registry(Topology::layered(&[2, 2, 2], 1, false));
        let b = reg.block(0, 0).unwrap().clone();
        set(&mut store, b.weight, &[0.0; 4]);
        set(&mut store, b.bias, &[1.0, 1.0]);
        let mut g = Graph::new(&store);
        let v = g.input(Tensor::vector(vec![-7.0, 4.0]));
        let y = reg.apply_block(&mut g, 0, 0, v).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 1.0]);
    }

    #[test]
    fn lookup_and_dimension_errors() {
        let (store, reg) = registry(Topology::layered(&[3, 4, 2], 2, false));
        let mut g = Graph::new(&store);
        let v = g.input(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(
            reg.apply_block(&mut g, 0, 5, v),
            Err(Error::Lookup(_))
        ));
        assert!(matches!(
            reg.apply_block(&mut g, 0, 0, v),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn layered_legal_actions() {
        let (_, reg) = registry(Topology::layered(&[20, 48, 48, 2], 10, false));
        let acts = reg.legal_actions(2).unwrap();
        assert_eq!(
            acts,
            (0..10).map(|i| Action::block(1, i)).collect::<Vec<_>>()
        );
        assert!(reg.legal_actions(0).is_err());
        assert!(reg.legal_actions(4).is_err());
    }

    #[test]
    fn pass_excluded_where_dims_differ() {
        let (_, reg) = registry(Topology::layered(&[20, 48, 48, 2], 3, true));
        assert!(!reg.legal_actions(1).unwrap().contains(&Action::Pass));
        assert!(reg.legal_actions(2).unwrap().contains(&Action::Pass));
        // classifier depth never offers PASS
        assert!(!reg.legal_actions(3).unwrap().contains(&Action::Pass));
    }

    #[test]
    fn non_layered_offers_union_of_square_layers() {
        let (_, reg) = registry(Topology::recurrent(&[48, 48, 48, 2], 3, true, 3));
        let acts = reg.legal_actions(1).unwrap();
        let mut want: Vec<_> = (0..2)
            .flat_map(|l| (0..3).map(move |i| Action::block(l, i)))
            .collect();
        want.push(Action::Pass);
        assert_eq!(acts, want);
        assert_eq!(
            reg.legal_actions(3).unwrap(),
            (0..3).map(|i| Action::block(2, i)).collect::<Vec<_>>()
        );
    }

    #[test]
    fn topology_validation() {
        assert!(Topology::recurrent(&[20, 48, 48, 2], 3, true, 3)
            .validate()
            .is_err());
        assert!(Topology::layered(&[20, 30, 2], 2, true).validate().is_err());
        let mut t = Topology::layered(&[4, 4, 2], 2, false);
        t.max_depth = 3;
        assert!(t.validate().is_err());
    }

    #[test]
    fn pass_semantics() {
        let (_, reg) = registry(Topology::layered(&[4, 4, 4, 2], 2, true));
        let v = Tensor::vector(vec![0.1, -0.2, 0.3, 0.4]);
        let s = RoutingState {
            v: v.clone(),
            t: 3,
            i: 1,
        };
        let s2 = reg.apply_pass(s).unwrap();
        assert_eq!((s2.t, s2.i), (3, 2));
        assert_eq!(
            s2.v.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            v.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
        let (_, nopass) = registry(Topology::layered(&[4, 4, 2], 2, false));
        assert!(nopass.apply_pass(s2).is_err());
    }

    #[test]
    fn topology_json_shape() {
        let (_, reg) = registry(Topology::layered(&[5, 48, 2], 4, false));
        let v: serde_json::Value = serde_json::from_str(&reg.topology_json().unwrap()).unwrap();
        assert_eq!(v["layers"][0]["in_dim"], 5);
        assert_eq!(v["layers"][0]["blocks"], 4);
        assert_eq!(v["layers"][1]["kind"], "affine_softmax_classifier");
        assert_eq!(v["pass_enabled"], false);
        assert_eq!(v["layered"], true);
    }

    #[test]
    fn action_labels_round_trip() {
        for a in [Action::Pass, Action::block(2, 11)] {
            assert_eq!(Action::parse_label(&a.label()).unwrap(), a);
        }
    }
}
