//! Per-layer sensitivity sweeps and automatic layer/rate selection.
//!
//! Each non-excluded conv is pruned on its own at every rate of the grid and
//! the damaged model is scored against a reference. A `(layer, rate)` pair
//! qualifies when `V = x * y^a` exceeds the threshold, where `x` is the
//! parameter or FLOP count removed as a fraction of the baseline total and
//! `y` is the proxy score. Each layer takes its largest qualifying rate.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost::{cost_report, count_params, CostReport};
use crate::error::{Error, Result};
use crate::eval::proxy_score;
use crate::graph::ConnectivityGraph;
use crate::ir::{LayerId, LayerKind, NetworkIR};
use crate::prune::{apply_plan, select_filters, Criterion, SelectionMode};
use crate::tensor::TensorBuf;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostBasis {
    Params,
    Flops,
    /// Select under each basis and keep the larger rate per layer.
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionConfig {
    pub a: f64,
    pub threshold: f64,
    pub rate_grid: Vec<f64>,
    pub basis: CostBasis,
    /// Layers never pruned. `None` means the convs feeding Output layers.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exclusions: Option<BTreeSet<LayerId>>,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            a: 2.0,
            threshold: 0.01,
            rate_grid: vec![0.125, 0.25, 0.375, 0.5, 0.625, 0.75],
            basis: CostBasis::Both,
            exclusions: None,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rate_grid.is_empty() {
            return Err(Error::Parse("rate grid is empty".into()));
        }
        if let Some(&r) = self.rate_grid.iter().find(|r| !(**r > 0.0 && **r < 1.0)) {
            return Err(Error::InvalidRate(r));
        }
        if !(self.threshold > 0.0) || !self.threshold.is_finite() {
            return Err(Error::Parse(format!("threshold must be positive, got {}", self.threshold)));
        }
        if !(self.a >= 0.0) || !self.a.is_finite() {
            return Err(Error::Parse(format!("exponent a must be non-negative, got {}", self.a)));
        }
        Ok(())
    }

    pub fn exclusions_for(&self, ir: &NetworkIR) -> BTreeSet<LayerId> {
        self.exclusions.clone().unwrap_or_else(|| default_exclusions(ir))
    }
}

/// Convs whose output reaches an Output layer without passing another conv:
/// the detection-head output layers of a YOLO-style network.
pub fn default_exclusions(ir: &NetworkIR) -> BTreeSet<LayerId> {
    let mut out = BTreeSet::new();
    for id in ir.output_ids() {
        let mut stack = vec![id];
        while let Some(cur) = stack.pop() {
            let layer = ir.layer(cur).expect("valid ir");
            match layer.kind {
                LayerKind::Conv2d(_) => {
                    out.insert(cur);
                }
                _ => stack.extend(layer.inputs.iter().copied()),
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRecord {
    pub layer: LayerId,
    pub rate: f64,
    pub score: f64,
    pub params_removed: u64,
    pub flops_removed: u64,
    /// `params_removed` over the baseline parameter total.
    pub params_fraction: f64,
    /// `flops_removed` over the baseline FLOP total.
    pub flops_fraction: f64,
}

impl SensitivityRecord {
    pub fn v(&self, basis: CostBasis, a: f64) -> f64 {
        match basis {
            CostBasis::Params => v_value(self.params_fraction, self.score, a),
            CostBasis::Flops => v_value(self.flops_fraction, self.score, a),
            CostBasis::Both => v_value(self.params_fraction, self.score, a)
                .max(v_value(self.flops_fraction, self.score, a)),
        }
    }
}

/// `V(x, y) = x * y^a`.
pub fn v_value(x: f64, y: f64, a: f64) -> f64 {
    x * y.powf(a)
}

/// Sweep scored against `ir` itself, with `ir`'s costs as the baseline.
pub fn sweep(
    ir: &NetworkIR,
    graph: &ConnectivityGraph,
    criterion: Criterion,
    config: &SelectionConfig,
    calibration: &[TensorBuf],
) -> Result<Vec<SensitivityRecord>> {
    let baseline = cost_report(ir)?;
    sweep_against(ir, graph, criterion, config, calibration, ir, &baseline)
}

/// Sweep `ir`, scoring each damaged model against `reference` and
/// normalizing removed costs by `baseline`. Records are sorted by layer,
/// then rate, whatever order the cells finish in.
pub fn sweep_against(
    ir: &NetworkIR,
    graph: &ConnectivityGraph,
    criterion: Criterion,
    config: &SelectionConfig,
    calibration: &[TensorBuf],
    reference: &NetworkIR,
    baseline: &CostReport,
) -> Result<Vec<SensitivityRecord>> {
    config.validate()?;
    let excluded = config.exclusions_for(ir);
    let current = cost_report(ir)?;
    let cells: Vec<(LayerId, f64)> = graph
        .vertices()
        .filter(|l| !excluded.contains(l))
        .flat_map(|l| config.rate_grid.iter().map(move |&r| (l, r)))
        .collect();

    let mut records = cells
        .par_iter()
        .map(|&(layer, rate)| -> Result<SensitivityRecord> {
            let plan = select_filters(ir, &[(layer, rate)], criterion, SelectionMode::Independent)?;
            let pruned = apply_plan(ir, graph, &plan)?;
            let score = proxy_score(&pruned.ir, reference, calibration)?.value();
            let after = cost_report(&pruned.ir)?;
            let params_removed = current.total_params - after.total_params;
            let flops_removed = current.total_flops - after.total_flops;
            Ok(SensitivityRecord {
                layer,
                rate,
                score,
                params_removed,
                flops_removed,
                params_fraction: fraction(params_removed, baseline.total_params),
                flops_fraction: fraction(flops_removed, baseline.total_flops),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    records.sort_by(|a, b| a.layer.cmp(&b.layer).then(a.rate.total_cmp(&b.rate)));
    debug_assert_eq!(count_params(ir), current.total_params);
    Ok(records)
}

fn fraction(part: u64, total: u64) -> f64 {
    if total == 0 {
        0.0
    } else {
        part as f64 / total as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub layer: LayerId,
    pub rate: f64,
    /// Basis under which the rate qualified (`Both` when either gives it).
    pub basis: CostBasis,
}

/// Per layer, the largest rate whose V exceeds the threshold, sorted by layer.
pub fn select(records: &[SensitivityRecord], config: &SelectionConfig) -> Vec<Selection> {
    let bases: &[CostBasis] = match config.basis {
        CostBasis::Both => &[CostBasis::Params, CostBasis::Flops],
        CostBasis::Params => &[CostBasis::Params],
        CostBasis::Flops => &[CostBasis::Flops],
    };
    let excluded = config.exclusions.clone().unwrap_or_default();
    let mut best: BTreeMap<LayerId, Selection> = BTreeMap::new();
    for &basis in bases {
        for r in records {
            if excluded.contains(&r.layer) || !(r.v(basis, config.a) > config.threshold) {
                continue;
            }
            let candidate = Selection {
                layer: r.layer,
                rate: r.rate,
                basis,
            };
            best.entry(r.layer)
                .and_modify(|s| {
                    if r.rate > s.rate {
                        *s = candidate;
                    } else if r.rate == s.rate && s.basis != basis {
                        s.basis = CostBasis::Both;
                    }
                })
                .or_insert(candidate);
        }
    }
    best.into_values().collect()
}

pub const CSV_HEADER: &str = "layer,rate,score,params_removed,flops_removed,v_params,v_flops";

pub fn write_csv<W: Write>(records: &[SensitivityRecord], a: f64, mut w: W) -> std::io::Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.layer,
            r.rate,
            r.score,
            r.params_removed,
            r.flops_removed,
            r.v(CostBasis::Params, a),
            r.v(CostBasis::Flops, a)
        )?;
    }
    Ok(())
}
