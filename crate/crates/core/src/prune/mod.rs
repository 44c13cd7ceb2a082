//! Structured filter pruning.
//!
//! Removing filters from a conv deletes rows (dim 0) of its weight, the
//! matching bias entries and the matching parameters of any batch norm that
//! reads it. Each consumer found through the connectivity graph loses the
//! kernel columns (dim 1) at the pruned filters' positions inside the
//! concatenation slice the conv feeds.

mod criteria;
mod fusion;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use criteria::{rank, score_filters, Criterion};
pub use fusion::{fuse_bn, prune_after_fusion, prune_before_fusion, prune_with, FusionMode, PruneRequest};

use crate::error::{Error, Result};
use crate::graph::{build_graph, ConnectivityGraph};
use crate::io;
use crate::ir::{LayerId, LayerKind, NetworkIR};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    /// Every layer is scored on the original weights.
    #[default]
    Independent,
    /// Layers are scored in topological order, ignoring kernels whose
    /// input filters were already selected upstream.
    Greedy,
}

impl std::str::FromStr for SelectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "independent" => Ok(SelectionMode::Independent),
            "greedy" => Ok(SelectionMode::Greedy),
            other => Err(Error::Parse(format!(
                "unknown selection mode `{other}` (valid: independent, greedy)"
            ))),
        }
    }
}

/// Filters to remove per conv. Index lists are sorted and unique.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PruningPlan {
    pub mode: SelectionMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub criterion: Option<Criterion>,
    pub removals: BTreeMap<LayerId, Vec<usize>>,
}

impl PruningPlan {
    pub fn is_empty(&self) -> bool {
        self.removals.values().all(Vec::is_empty)
    }

    pub fn removed_count(&self) -> usize {
        self.removals.values().map(Vec::len).sum()
    }

    pub fn validate(&self, ir: &NetworkIR) -> Result<()> {
        for (&layer, filters) in &self.removals {
            let attrs = ir
                .layer(layer)
                .and_then(|l| l.conv_attrs())
                .ok_or_else(|| Error::InvalidPlan(format!("layer {layer} is not a Conv2D")))?;
            if filters.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::InvalidPlan(format!(
                    "layer {layer}: filter indices must be sorted and unique"
                )));
            }
            if filters.iter().any(|&f| f >= attrs.out_channels) {
                return Err(Error::InvalidPlan(format!(
                    "layer {layer}: filter index out of range for {} filters",
                    attrs.out_channels
                )));
            }
            if filters.len() >= attrs.out_channels {
                return Err(Error::RateTooHigh {
                    layer,
                    rate: 1.0,
                });
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        io::write_json(path.as_ref(), self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        io::read_json(path.as_ref())
    }
}

/// Result of [`apply_plan`].
#[derive(Debug, Clone, PartialEq)]
pub struct PrunedModel {
    pub ir: NetworkIR,
    pub plan: PruningPlan,
    /// Surviving original filter indices of every pruned conv.
    pub kept: BTreeMap<LayerId, Vec<usize>>,
    /// Connectivity graph of `ir`, with slice sizes updated.
    pub graph: ConnectivityGraph,
}

/// Number of filters removed from `out_channels` at `rate`: `floor(rate * n)`.
pub fn filters_for_rate(layer: LayerId, out_channels: usize, rate: f64) -> Result<usize> {
    if !(0.0..).contains(&rate) || rate.is_nan() {
        return Err(Error::InvalidRate(rate));
    }
    // The small epsilon keeps products such as 0.29 * 100 from flooring to 28.
    let n = (rate * out_channels as f64 + 1e-9).floor() as usize;
    if n >= out_channels {
        return Err(Error::RateTooHigh { layer, rate });
    }
    Ok(n)
}

/// Pick `floor(rate * out_channels)` filters per listed layer.
pub fn select_filters(
    ir: &NetworkIR,
    plan_layers: &[(LayerId, f64)],
    criterion: Criterion,
    mode: SelectionMode,
) -> Result<PruningPlan> {
    let mut seen = BTreeSet::new();
    for &(layer, _) in plan_layers {
        if !seen.insert(layer) {
            return Err(Error::InvalidPlan(format!("layer {layer} listed twice")));
        }
    }
    let mut order: Vec<(LayerId, f64)> = plan_layers.to_vec();
    order.sort_by_key(|(l, _)| *l);

    let graph = match mode {
        SelectionMode::Greedy => Some(build_graph(ir)?),
        SelectionMode::Independent => None,
    };
    let mut removals: BTreeMap<LayerId, Vec<usize>> = BTreeMap::new();
    for (layer, rate) in order {
        let attrs = ir
            .layer(layer)
            .and_then(|l| l.conv_attrs())
            .ok_or(Error::UnknownVertex(layer))?;
        let n = filters_for_rate(layer, attrs.out_channels, rate)?;
        if n == 0 {
            continue;
        }
        let masked: Vec<usize> = match &graph {
            Some(g) => {
                let mut cols = Vec::new();
                for e in g.incoming(layer) {
                    if let Some(filters) = removals.get(&e.src) {
                        let offset = g.slice_offset(layer, e.slice_index)?;
                        cols.extend(filters.iter().map(|f| offset + f));
                    }
                }
                cols
            }
            None => Vec::new(),
        };
        let scores = criteria::score_filters_masked(ir, layer, criterion, &masked)?;
        let mut chosen: Vec<usize> = rank(&scores).into_iter().take(n).collect();
        chosen.sort_unstable();
        removals.insert(layer, chosen);
    }
    Ok(PruningPlan {
        mode,
        criterion: Some(criterion),
        removals,
    })
}

/// Structurally remove the plan's filters and every dependent kernel.
pub fn apply_plan(ir: &NetworkIR, graph: &ConnectivityGraph, plan: &PruningPlan) -> Result<PrunedModel> {
    plan.validate(ir)?;
    check_graph(ir, graph)?;
    for &layer in plan.removals.keys() {
        if !graph.contains(layer) {
            return Err(Error::PlanGraphMismatch(format!("layer {layer} is not a graph vertex")));
        }
    }

    let removals: BTreeMap<LayerId, Vec<usize>> = plan
        .removals
        .iter()
        .filter(|(_, f)| !f.is_empty())
        .map(|(&l, f)| (l, f.clone()))
        .collect();

    // Rows to keep per pruned conv, and input columns to drop per consumer.
    let mut kept: BTreeMap<LayerId, Vec<usize>> = BTreeMap::new();
    let mut dropped_cols: BTreeMap<LayerId, BTreeSet<usize>> = BTreeMap::new();
    for (&x, filters) in &removals {
        let out_c = graph.vertex(x).expect("checked vertex").out_channels;
        let removed: BTreeSet<usize> = filters.iter().copied().collect();
        kept.insert(x, (0..out_c).filter(|f| !removed.contains(f)).collect());
        for (dst, cols) in graph.kernel_columns(x, filters)? {
            dropped_cols.entry(dst).or_default().extend(cols);
        }
    }

    let mut out = ir.clone();
    for layer in &mut out.layers {
        match &mut layer.kind {
            LayerKind::Conv2d(attrs) => {
                if let Some(rows) = kept.get(&layer.id) {
                    for name in ["weight", "bias"] {
                        if let Some(t) = layer.weights.get_mut(name) {
                            *t = t.select_dim0(rows)?;
                        }
                    }
                    attrs.out_channels = rows.len();
                }
                if let Some(cols) = dropped_cols.get(&layer.id) {
                    let keep: Vec<usize> = (0..attrs.in_channels).filter(|c| !cols.contains(c)).collect();
                    let w = layer.weights.get_mut("weight").expect("validated conv");
                    *w = w.select_dim1(&keep)?;
                    attrs.in_channels = keep.len();
                }
            }
            LayerKind::BatchNorm2d { channels, .. } => {
                if let Some(rows) = kept.get(&layer.inputs[0]) {
                    for t in layer.weights.values_mut() {
                        *t = t.select_dim0(rows)?;
                    }
                    *channels = rows.len();
                }
            }
            _ => {}
        }
    }

    out.validate()
        .map_err(|e| Error::Internal(format!("pruned model failed validation: {e}")))?;
    let next_graph = graph.after_removal(&removals)?;
    Ok(PrunedModel {
        ir: out,
        plan: plan.clone(),
        kept,
        graph: next_graph,
    })
}

fn check_graph(ir: &NetworkIR, graph: &ConnectivityGraph) -> Result<()> {
    let convs = ir.conv_ids();
    if convs.len() != graph.vertex_count() {
        return Err(Error::PlanGraphMismatch(format!(
            "network has {} convs, graph has {} vertices",
            convs.len(),
            graph.vertex_count()
        )));
    }
    for id in convs {
        let attrs = ir.layer(id).and_then(|l| l.conv_attrs()).expect("conv");
        match graph.vertex(id) {
            Some(v) if v.out_channels == attrs.out_channels && v.in_channels == attrs.in_channels => {}
            _ => {
                return Err(Error::PlanGraphMismatch(format!(
                    "conv {id} does not match its graph vertex"
                )))
            }
        }
    }
    Ok(())
}
