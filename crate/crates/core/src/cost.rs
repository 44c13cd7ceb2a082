//! Parameter and FLOP accounting.
//!
//! Convention: one multiply-accumulate is two FLOPs. A conv costs
//! `2 * out_h * out_w * out_c * in_c * k_h * k_w` FLOPs plus
//! `out_h * out_w * out_c` for the bias; an unfused batch norm costs
//! `2 * h * w * c`. Pooling, upsampling, concatenation and activations are
//! counted as free. All counts are `u64`.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::ConnectivityGraph;
use crate::ir::{LayerId, LayerKind, NetworkIR};
use crate::prune::PruningPlan;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub id: LayerId,
    pub kind: String,
    pub params: u64,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub per_layer: Vec<LayerCost>,
    pub total_params: u64,
    pub total_flops: u64,
}

impl CostReport {
    fn from_layers(per_layer: Vec<LayerCost>) -> Self {
        let total_params = per_layer.iter().map(|l| l.params).sum();
        let total_flops = per_layer.iter().map(|l| l.flops).sum();
        CostReport {
            per_layer,
            total_params,
            total_flops,
        }
    }

    pub fn layer(&self, id: LayerId) -> Option<&LayerCost> {
        self.per_layer.iter().find(|l| l.id == id)
    }
}

struct ConvShape {
    out_c: u64,
    in_c: u64,
    area: u64,
    bias: bool,
    out_hw: u64,
}

impl ConvShape {
    fn params(&self) -> u64 {
        self.out_c * self.in_c * self.area + if self.bias { self.out_c } else { 0 }
    }

    fn flops(&self) -> u64 {
        2 * self.out_hw * self.out_c * self.in_c * self.area + if self.bias { self.out_hw * self.out_c } else { 0 }
    }
}

fn bn_params(channels: u64) -> u64 {
    4 * channels
}

fn bn_flops(channels: u64, hw: u64) -> u64 {
    2 * hw * channels
}

/// Per-layer parameter and FLOP counts.
pub fn cost_report(ir: &NetworkIR) -> Result<CostReport> {
    layer_costs(ir, |_, c| c, |_, c| c)
}

/// Total parameter count. Needs only layer attributes.
pub fn count_params(ir: &NetworkIR) -> u64 {
    ir.layers
        .iter()
        .map(|l| match &l.kind {
            LayerKind::Conv2d(a) => ConvShape {
                out_c: a.out_channels as u64,
                in_c: a.in_channels as u64,
                area: a.kernel_area() as u64,
                bias: a.has_bias,
                out_hw: 0,
            }
            .params(),
            LayerKind::BatchNorm2d { channels, .. } => bn_params(*channels as u64),
            _ => 0,
        })
        .sum()
}

pub fn count_flops(ir: &NetworkIR) -> Result<u64> {
    Ok(cost_report(ir)?.total_flops)
}

/// Costs the network would have after `plan`, computed from the plan and the
/// connectivity graph without touching any weights.
pub fn predict_pruned(ir: &NetworkIR, graph: &ConnectivityGraph, plan: &PruningPlan) -> Result<CostReport> {
    let removed = |id: LayerId| plan.removals.get(&id).map_or(0, Vec::len);
    let mut lost_inputs: BTreeMap<LayerId, usize> = BTreeMap::new();
    for (&x, filters) in &plan.removals {
        for a in graph.affected_layers(x)? {
            *lost_inputs.entry(a.dst).or_default() += filters.len();
        }
    }
    layer_costs(
        ir,
        |id, out_c| out_c - removed(id),
        |id, in_c| in_c - lost_inputs.get(&id).copied().unwrap_or(0),
    )
}

fn layer_costs(
    ir: &NetworkIR,
    out_channels: impl Fn(LayerId, usize) -> usize,
    in_channels: impl Fn(LayerId, usize) -> usize,
) -> Result<CostReport> {
    let shapes = ir.infer_shapes()?;
    let per_layer = ir
        .layers
        .iter()
        .map(|l| {
            let [_, h, w] = shapes[&l.id];
            let hw = (h * w) as u64;
            let (params, flops) = match &l.kind {
                LayerKind::Conv2d(a) => {
                    let s = ConvShape {
                        out_c: out_channels(l.id, a.out_channels) as u64,
                        in_c: in_channels(l.id, a.in_channels) as u64,
                        area: a.kernel_area() as u64,
                        bias: a.has_bias,
                        out_hw: hw,
                    };
                    (s.params(), s.flops())
                }
                LayerKind::BatchNorm2d { channels, .. } => {
                    let c = out_channels(l.inputs[0], *channels) as u64;
                    (bn_params(c), bn_flops(c, hw))
                }
                _ => (0, 0),
            };
            LayerCost {
                id: l.id,
                kind: l.kind.name().to_string(),
                params,
                flops,
            }
        })
        .collect();
    Ok(CostReport::from_layers(per_layer))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDelta {
    pub id: LayerId,
    pub kind: String,
    pub base_params: u64,
    pub params: u64,
    pub base_flops: u64,
    pub flops: u64,
}

impl LayerDelta {
    pub fn params_pct(&self) -> f64 {
        pct_removed(self.base_params, self.params)
    }

    pub fn flops_pct(&self) -> f64 {
        pct_removed(self.base_flops, self.flops)
    }
}

fn pct_removed(base: u64, now: u64) -> f64 {
    if base == 0 {
        0.0
    } else {
        100.0 * (base as f64 - now as f64) / base as f64
    }
}

/// Per-layer comparison of a pruned model against its baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostDiff {
    pub rows: Vec<LayerDelta>,
    pub base_params: u64,
    pub params: u64,
    pub base_flops: u64,
    pub flops: u64,
    pub params_sparsity: f64,
    pub flops_sparsity: f64,
}

pub fn sparsity(base: u64, now: u64) -> f64 {
    if base == 0 {
        0.0
    } else {
        1.0 - now as f64 / base as f64
    }
}

pub fn diff_reports(base: &CostReport, pruned: &CostReport) -> Result<CostDiff> {
    if base.per_layer.len() != pruned.per_layer.len() {
        return Err(Error::MismatchedModels(format!(
            "{} layers vs {}",
            base.per_layer.len(),
            pruned.per_layer.len()
        )));
    }
    let mut rows = Vec::with_capacity(base.per_layer.len());
    for (b, p) in base.per_layer.iter().zip(&pruned.per_layer) {
        if b.id != p.id || b.kind != p.kind {
            return Err(Error::MismatchedModels(format!(
                "layer {} ({}) paired with layer {} ({})",
                b.id, b.kind, p.id, p.kind
            )));
        }
        if p.params > b.params || p.flops > b.flops {
            return Err(Error::MismatchedModels(format!("layer {} grew", b.id)));
        }
        rows.push(LayerDelta {
            id: b.id,
            kind: b.kind.clone(),
            base_params: b.params,
            params: p.params,
            base_flops: b.flops,
            flops: p.flops,
        });
    }
    Ok(CostDiff {
        rows,
        base_params: base.total_params,
        params: pruned.total_params,
        base_flops: base.total_flops,
        flops: pruned.total_flops,
        params_sparsity: sparsity(base.total_params, pruned.total_params),
        flops_sparsity: sparsity(base.total_flops, pruned.total_flops),
    })
}

impl CostDiff {
    pub const CSV_HEADER: &'static str = "layer_id,kind,params,flops,params_pct,flops_pct";

    /// Writes one row per layer, then a `total` row. Percentages are the
    /// share of the baseline count removed.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{:.4},{:.4}",
                r.id,
                r.kind,
                r.params,
                r.flops,
                r.params_pct(),
                r.flops_pct()
            )?;
        }
        writeln!(
            w,
            "total,,{},{},{:.4},{:.4}",
            self.params,
            self.flops,
            100.0 * self.params_sparsity,
            100.0 * self.flops_sparsity
        )
    }
}
