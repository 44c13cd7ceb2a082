use crate::error::{Error, Result};
use crate::graph::build_graph;
use crate::ir::{LayerId, LayerKind, NetworkIR};
use crate::tensor::TensorBuf;

use super::{apply_plan, select_filters, Criterion, PrunedModel, PruningPlan, SelectionMode};

/// Fold every batch norm into the conv it reads:
/// `W'_i = W_i * g_i / sqrt(var_i + eps)` and
/// `b'_i = (b_i - mean_i) * g_i / sqrt(var_i + eps) + beta_i`.
/// Conv ids are preserved and readers of a folded batch norm are rewired to
/// the conv. A conv whose output also feeds other layers cannot absorb its
/// batch norm.
pub fn fuse_bn(ir: &NetworkIR) -> Result<NetworkIR> {
    let consumers = ir.consumers();
    let mut out = ir.clone();
    let mut folded: Vec<(LayerId, LayerId)> = Vec::new();

    for layer in &ir.layers {
        let LayerKind::BatchNorm2d { epsilon, .. } = layer.kind else {
            continue;
        };
        let conv_id = layer.inputs[0];
        let sole_reader = consumers.get(&conv_id).map(Vec::as_slice) == Some(&[layer.id][..]);
        let conv = ir.layer(conv_id).filter(|c| c.is_conv());
        let Some(conv) = conv.filter(|_| sole_reader) else {
            return Err(Error::OrphanBatchNorm(layer.id));
        };
        let attrs = *conv.conv_attrs().expect("conv");
        let (g, beta, mean, var) = (
            layer.weight("gamma")?.data(),
            layer.weight("beta")?.data(),
            layer.weight("running_mean")?.data(),
            layer.weight("running_var")?.data(),
        );
        let weight = conv.weight("weight")?;
        let row = weight.row_len();
        let mut w = weight.data().to_vec();
        let mut b = match conv.weights.get("bias") {
            Some(t) => t.data().to_vec(),
            None => vec![0.0; attrs.out_channels],
        };
        for i in 0..attrs.out_channels {
            let scale = g[i] as f64 / (var[i] as f64 + epsilon as f64).sqrt();
            for v in &mut w[i * row..(i + 1) * row] {
                *v = (*v as f64 * scale) as f32;
            }
            b[i] = ((b[i] as f64 - mean[i] as f64) * scale + beta[i] as f64) as f32;
        }
        let target = out.layer_mut(conv_id).expect("conv exists");
        target.weights.insert("weight".into(), TensorBuf::new(weight.shape().to_vec(), w)?);
        target
            .weights
            .insert("bias".into(), TensorBuf::new(vec![attrs.out_channels], b)?);
        if let LayerKind::Conv2d(a) = &mut target.kind {
            a.has_bias = true;
        }
        folded.push((layer.id, conv_id));
    }

    out.layers.retain(|l| !folded.iter().any(|(bn, _)| *bn == l.id));
    for layer in &mut out.layers {
        for input in &mut layer.inputs {
            if let Some((_, conv)) = folded.iter().find(|(bn, _)| bn == input) {
                *input = *conv;
            }
        }
    }
    out.validate()
        .map_err(|e| Error::Internal(format!("fused model failed validation: {e}")))?;
    Ok(out)
}

/// Where batch norm folding happens relative to pruning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FusionMode {
    /// Prune only; batch norms stay.
    #[default]
    Off,
    /// Prune convs together with their batch norms, then fold.
    Before,
    /// Fold first, then prune the fused convs.
    After,
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(FusionMode::Off),
            "before" => Ok(FusionMode::Before),
            "after" => Ok(FusionMode::After),
            other => Err(Error::Parse(format!(
                "unknown fusion mode `{other}` (valid: before, after, off)"
            ))),
        }
    }
}

/// What to prune: a fixed plan, or rates from which filters are selected on
/// whatever weights the pipeline sees at selection time.
#[derive(Debug, Clone, PartialEq)]
pub enum PruneRequest {
    Plan(PruningPlan),
    Rates {
        layers: Vec<(LayerId, f64)>,
        criterion: Criterion,
        mode: SelectionMode,
    },
}

impl PruneRequest {
    fn resolve(&self, ir: &NetworkIR) -> Result<PruningPlan> {
        match self {
            PruneRequest::Plan(p) => Ok(p.clone()),
            PruneRequest::Rates {
                layers,
                criterion,
                mode,
            } => select_filters(ir, layers, *criterion, *mode),
        }
    }
}

/// Select and prune on the unfused model (conv and batch norm together),
/// then optionally fold the batch norms.
pub fn prune_before_fusion(ir: &NetworkIR, request: &PruneRequest, fuse: bool) -> Result<PrunedModel> {
    let plan = request.resolve(ir)?;
    let graph = build_graph(ir)?;
    let mut pruned = apply_plan(ir, &graph, &plan)?;
    if fuse {
        pruned.ir = fuse_bn(&pruned.ir)?;
        pruned.graph = build_graph(&pruned.ir)?;
    }
    Ok(pruned)
}

/// Fold batch norms first, then select and prune on the fused convs.
pub fn prune_after_fusion(ir: &NetworkIR, request: &PruneRequest) -> Result<PrunedModel> {
    let fused = fuse_bn(ir)?;
    let plan = request.resolve(&fused)?;
    let graph = build_graph(&fused)?;
    apply_plan(&fused, &graph, &plan)
}

pub fn prune_with(ir: &NetworkIR, request: &PruneRequest, fusion: FusionMode) -> Result<PrunedModel> {
    match fusion {
        FusionMode::Off => prune_before_fusion(ir, request, false),
        FusionMode::Before => prune_before_fusion(ir, request, true),
        FusionMode::After => prune_after_fusion(ir, request),
    }
}
