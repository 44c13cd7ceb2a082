//! Structured filter pruning for convolutional networks that contain
//! concatenation layers.
//!
//! The crate works on a small intermediate representation ([`NetworkIR`])
//! of conv, batch norm, activation, concat, max pool, upsample and output
//! layers. From it, [`build_graph`] derives a connectivity graph between
//! convolutions in which every edge records the concatenation slice the
//! producer feeds. Pruning a conv's filters then removes the matching
//! kernel columns from every consumer at the right offset.
//!
//! ```
//! use catprune::{build_graph, zoo};
//!
//! let ir = zoo::elan();
//! let graph = build_graph(&ir).unwrap();
//! let affected = graph.affected_layers(4).unwrap();
//! assert_eq!(affected[1].dst, 7);
//! assert_eq!(affected[1].slice_offset, 64);
//! ```

pub mod builder;
pub mod cost;
mod error;
pub mod eval;
pub mod graph;
pub mod io;
pub mod ir;
pub mod orchestrator;
pub mod prune;
pub mod sensitivity;
pub mod synth;
mod tensor;
pub mod zoo;

pub use builder::NetworkBuilder;
pub use cost::{cost_report, CostDiff, CostReport};
pub use error::{Error, Result};
pub use eval::{proxy_score, ProxyScore};
pub use graph::{build_graph, export_dot, ConnectivityGraph};
pub use io::{load_model, save_model};
pub use ir::{ActivationFn, ConvAttrs, LayerId, LayerKind, LayerSpec, NetworkIR};
pub use prune::{apply_plan, select_filters, Criterion, PrunedModel, PruningPlan, SelectionMode};
pub use tensor::TensorBuf;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/connectivity.md")]
    mod connectivity {}
    #[doc = include_str!("../../../book/src/pruning.md")]
    mod pruning {}
    #[doc = include_str!("../../../book/src/cost.md")]
    mod cost {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/sensitivity.md")]
    mod sensitivity {}
    #[doc = include_str!("../../../book/src/iterating.md")]
    mod iterating {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
