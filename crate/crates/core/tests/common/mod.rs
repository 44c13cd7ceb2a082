#![allow(dead_code)]

use std::collections::BTreeMap;

use std::collections::BTreeSet;

use catprune::eval::{calibration_batch, outputs};
use catprune::ir::{LayerId, LayerKind, NetworkIR};
use catprune::sensitivity::{CostBasis, SelectionConfig, SensitivityRecord};
use catprune::TensorBuf;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Largest elementwise difference between the Output layers of two networks.
pub fn max_output_diff(a: &NetworkIR, b: &NetworkIR, inputs: &[TensorBuf]) -> f32 {
    let mut worst = 0.0f32;
    for x in inputs {
        let oa = outputs(a, x).unwrap();
        let ob = outputs(b, x).unwrap();
        assert_eq!(oa.len(), ob.len());
        for (ta, tb) in oa.iter().zip(&ob) {
            let d = ta.max_abs_diff(tb).expect("same shapes");
            worst = worst.max(d);
        }
    }
    worst
}

pub fn inputs(ir: &NetworkIR, n: usize, seed: u64) -> Vec<TensorBuf> {
    calibration_batch(ir.input_shape, n, seed)
}

/// Where each channel of a layer's output comes from: `(conv, filter)` or
/// `None` for the network input. Walks layers one by one, independent of the
/// connectivity graph.
pub fn provenance(ir: &NetworkIR) -> BTreeMap<LayerId, Vec<Option<(LayerId, usize)>>> {
    let mut prov: BTreeMap<LayerId, Vec<Option<(LayerId, usize)>>> = BTreeMap::new();
    let input: Vec<Option<(LayerId, usize)>> = vec![None; ir.input_shape[0]];
    for layer in &ir.layers {
        let channels = match &layer.kind {
            LayerKind::Conv2d(a) => (0..a.out_channels).map(|f| Some((layer.id, f))).collect(),
            LayerKind::Concat => layer
                .inputs
                .iter()
                .flat_map(|i| prov[i].iter().copied())
                .collect(),
            _ => match layer.inputs.first() {
                Some(i) => prov[i].clone(),
                None => input.clone(),
            },
        };
        prov.insert(layer.id, channels);
    }
    prov
}

/// Input-channel provenance of every conv.
pub fn conv_inputs(ir: &NetworkIR) -> BTreeMap<LayerId, Vec<Option<(LayerId, usize)>>> {
    let prov = provenance(ir);
    let input: Vec<Option<(LayerId, usize)>> = vec![None; ir.input_shape[0]];
    ir.layers
        .iter()
        .filter(|l| l.is_conv())
        .map(|l| {
            let src = match l.inputs.first() {
                Some(i) => prov[i].clone(),
                None => input.clone(),
            };
            (l.id, src)
        })
        .collect()
}

/// Kernel columns that read filter `f` of conv `x`, per consumer.
pub fn columns_reading(ir: &NetworkIR, x: LayerId, filters: &[usize]) -> Vec<(LayerId, Vec<usize>)> {
    conv_inputs(ir)
        .into_iter()
        .filter_map(|(y, src)| {
            let cols: Vec<usize> = src
                .iter()
                .enumerate()
                .filter(|(_, p)| matches!(p, Some((c, f)) if *c == x && filters.contains(f)))
                .map(|(i, _)| i)
                .collect();
            (!cols.is_empty()).then_some((y, cols))
        })
        .collect()
}

pub fn random_records(rng: &mut ChaCha8Rng) -> Vec<SensitivityRecord> {
    let grid = [0.125, 0.25, 0.375, 0.5, 0.625, 0.75];
    let mut out = Vec::new();
    for layer in 0..rng.random_range(1..8usize) {
        for &rate in &grid {
            if rng.random_bool(0.15) {
                continue;
            }
            out.push(SensitivityRecord {
                layer: layer * 3,
                rate,
                score: rng.random(),
                params_removed: 0,
                flops_removed: 0,
                params_fraction: rng.random::<f64>() * 0.1,
                flops_fraction: rng.random::<f64>() * 0.1,
            });
        }
    }
    out
}

/// Scans every (layer, rate) pair under each basis.
pub fn brute_select(records: &[SensitivityRecord], config: &SelectionConfig) -> Vec<(usize, f64)> {
    let layers: BTreeSet<usize> = records.iter().map(|r| r.layer).collect();
    let x = |r: &SensitivityRecord, b: CostBasis| match b {
        CostBasis::Params => r.params_fraction,
        _ => r.flops_fraction,
    };
    let bases = match config.basis {
        CostBasis::Both => vec![CostBasis::Params, CostBasis::Flops],
        b => vec![b],
    };
    let mut out = Vec::new();
    for l in layers {
        let mut best: Option<f64> = None;
        for r in records.iter().filter(|r| r.layer == l) {
            for &b in &bases {
                if x(r, b) * r.score.powf(config.a) > config.threshold && best.is_none_or(|v| r.rate > v) {
                    best = Some(r.rate);
                }
            }
        }
        if let Some(rate) = best {
            out.push((l, rate));
        }
    }
    out
}
