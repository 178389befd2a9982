//! Routing networks for multi-task learning.
//!
//! A router picks one function block per depth for every input and is
//! trained with reinforcement learning from the prediction outcome, while the
//! chosen blocks are trained with SGD on the task loss.

pub mod baselines;
pub mod blocks;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod harness;
pub mod model;
pub mod policies;
pub mod rl;
pub mod routing;
pub mod tensor;

pub use blocks::{Action, BlockKind, BlockRegistry, FunctionBlock, Topology};
pub use data::{MtlSample, TaskSplit};
pub use error::{Error, Result};
pub use policies::{AgentMode, AgentSet, Policy, PolicyKind, Representation, TabularPolicy};
pub use routing::{
    route_forward, AccuracyTable, RoutedModel, Router, RoutingState, SelectMode, Trace,
};
pub use tensor::{Graph, ParamStore, SgdConfig, Tensor};
