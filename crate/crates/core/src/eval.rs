//! Reference forward pass and output-fidelity scoring.
//!
//! The engine is a direct nested-loop implementation. It accumulates in
//! `f64` and rounds each layer's output to `f32`, which makes results
//! independent of summation order up to a single rounding per layer. Zero
//! terms are added exactly, so a network with zeroed filters produces the
//! same bits as its structurally pruned counterpart.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ir::{ConvAttrs, LayerId, LayerKind, LayerSpec, NetworkIR};
use crate::tensor::TensorBuf;

/// Output of every layer, keyed by layer id.
pub type ActivationMap = BTreeMap<LayerId, TensorBuf>;

/// Fidelity of a model's outputs to a reference: the mean over output
/// layers of `1 / (1 + mse)`. Equals 1 exactly for identical outputs.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct ProxyScore(pub f64);

impl ProxyScore {
    pub fn value(self) -> f64 {
        self.0
    }
}

pub fn forward(ir: &NetworkIR, input: &TensorBuf) -> Result<ActivationMap> {
    let mut maps = run(ir, std::slice::from_ref(input), None)?;
    Ok(maps.pop().expect("one input, one activation map"))
}

/// Forward every input; samples are evaluated in parallel.
pub fn forward_batch(ir: &NetworkIR, inputs: &[TensorBuf]) -> Result<Vec<ActivationMap>> {
    run(ir, inputs, None)
}

/// Activations of the Output layers, in layer order.
pub fn outputs(ir: &NetworkIR, input: &TensorBuf) -> Result<Vec<TensorBuf>> {
    let mut acts = forward(ir, input)?;
    Ok(ir
        .output_ids()
        .into_iter()
        .map(|id| acts.remove(&id).expect("output evaluated"))
        .collect())
}

/// Seeded standard-normal inputs of the given `[c, h, w]` shape.
pub fn calibration_batch(input_shape: [usize; 3], n: usize, seed: u64) -> Vec<TensorBuf> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let numel: usize = input_shape.iter().product();
    (0..n)
        .map(|_| {
            let data = (0..numel)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect::<Vec<f32>>();
            TensorBuf::new(input_shape.to_vec(), data).expect("shape matches data")
        })
        .collect()
}

pub fn proxy_score(
    pruned: &NetworkIR,
    reference: &NetworkIR,
    calibration: &[TensorBuf],
) -> Result<ProxyScore> {
    if calibration.is_empty() {
        return Err(Error::shape(None, "calibration batch is empty"));
    }
    if pruned.input_shape != reference.input_shape {
        return Err(Error::shape(None, "models have different input shapes"));
    }
    let out_p = pruned.output_ids();
    let out_r = reference.output_ids();
    if out_p.len() != out_r.len() || out_p.is_empty() {
        return Err(Error::shape(
            None,
            format!("output arity mismatch: {} vs {}", out_p.len(), out_r.len()),
        ));
    }
    let acts_p = forward_batch(pruned, calibration)?;
    let acts_r = forward_batch(reference, calibration)?;
    let mut total = 0.0;
    for (&op, &or) in out_p.iter().zip(&out_r) {
        let mut sq = 0.0f64;
        let mut count = 0usize;
        for (ap, ar) in acts_p.iter().zip(&acts_r) {
            let (tp, tr) = (&ap[&op], &ar[&or]);
            if tp.shape() != tr.shape() {
                return Err(Error::shape(
                    op,
                    format!("output shape {:?} vs reference {:?}", tp.shape(), tr.shape()),
                ));
            }
            sq += tp
                .data()
                .iter()
                .zip(tr.data())
                .map(|(a, b)| {
                    let d = *a as f64 - *b as f64;
                    d * d
                })
                .sum::<f64>();
            count += tp.len();
        }
        total += 1.0 / (1.0 + sq / count as f64);
    }
    Ok(ProxyScore(total / out_p.len() as f64))
}

/// Replace every batch norm's running statistics with the per-channel mean
/// and (population) variance of its input over the calibration batch.
/// Layers are processed in order, so each batch norm sees inputs already
/// normalized with the refreshed statistics upstream.
pub fn recalibrate_bn(ir: &NetworkIR, calibration: &[TensorBuf]) -> Result<NetworkIR> {
    if calibration.is_empty() {
        return Err(Error::shape(None, "calibration batch is empty"));
    }
    let mut out = ir.clone();
    run(ir, calibration, Some(&mut out))?;
    Ok(out)
}

/// Dense zero-mask equivalent of removing `removals[x]` filters from each
/// conv `x`: the filters' weights and biases are zeroed, as are gamma and
/// beta of any batch norm reading the conv.
pub fn zero_mask(ir: &NetworkIR, removals: &BTreeMap<LayerId, Vec<usize>>) -> Result<NetworkIR> {
    let mut out = ir.clone();
    for (&x, filters) in removals {
        let bns = ir.trailing_batch_norms(x);
        let layer = out.layer_mut(x).ok_or(Error::UnknownVertex(x))?;
        if !layer.is_conv() {
            return Err(Error::UnknownVertex(x));
        }
        for name in ["weight", "bias"] {
            if let Some(t) = layer.weights.get_mut(name) {
                let row = t.row_len();
                for &f in filters {
                    t.data_mut()[f * row..(f + 1) * row].fill(0.0);
                }
            }
        }
        for bn in bns {
            let layer = out.layer_mut(bn).expect("batch norm exists");
            for name in ["gamma", "beta"] {
                let t = layer.weights.get_mut(name).expect("validated batch norm");
                for &f in filters {
                    t.data_mut()[f] = 0.0;
                }
            }
        }
    }
    Ok(out)
}

fn run(
    ir: &NetworkIR,
    inputs: &[TensorBuf],
    mut recalibrate: Option<&mut NetworkIR>,
) -> Result<Vec<ActivationMap>> {
    for x in inputs {
        if x.shape() != ir.input_shape {
            return Err(Error::shape(
                None,
                format!("input shape {:?}, model expects {:?}", x.shape(), ir.input_shape),
            ));
        }
    }
    let mut maps: Vec<ActivationMap> = vec![ActivationMap::new(); inputs.len()];
    for layer in &ir.layers {
        let mut layer = layer;
        let refreshed;
        if let (Some(target), LayerKind::BatchNorm2d { .. }) = (recalibrate.as_deref_mut(), &layer.kind) {
            let src = layer.inputs[0];
            let feats: Vec<&TensorBuf> = maps.iter().map(|m| &m[&src]).collect();
            let (mean, var) = channel_stats(&feats);
            let spec = target.layer_mut(layer.id).expect("same layers");
            spec.weights.insert("running_mean".into(), mean);
            spec.weights.insert("running_var".into(), var);
            refreshed = spec.clone();
            layer = &refreshed;
        }
        let results: Vec<Result<TensorBuf>> = maps
            .par_iter()
            .zip(inputs.par_iter())
            .map(|(acts, input)| eval_layer(layer, acts, input))
            .collect();
        for (acts, r) in maps.iter_mut().zip(results) {
            acts.insert(layer.id, r?);
        }
    }
    Ok(maps)
}

fn channel_stats(feats: &[&TensorBuf]) -> (TensorBuf, TensorBuf) {
    let shape = feats[0].shape();
    let (c, hw) = (shape[0], shape[1] * shape[2]);
    let mut mean = vec![0.0f32; c];
    let mut var = vec![0.0f32; c];
    let n = (feats.len() * hw) as f64;
    for ch in 0..c {
        let values = || feats.iter().flat_map(|t| t.data()[ch * hw..(ch + 1) * hw].iter());
        let m = values().map(|&v| v as f64).sum::<f64>() / n;
        let v = values().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / n;
        mean[ch] = m as f32;
        var[ch] = v as f32;
    }
    (
        TensorBuf::new(vec![c], mean).expect("c values"),
        TensorBuf::new(vec![c], var).expect("c values"),
    )
}

fn eval_layer(
    layer: &LayerSpec,
    acts: &ActivationMap,
    input: &TensorBuf,
) -> Result<TensorBuf> {
    let arg = |i: usize| -> &TensorBuf {
        match layer.inputs.get(i) {
            Some(src) => &acts[src],
            None => input,
        }
    };
    match &layer.kind {
        LayerKind::Conv2d(a) => conv2d(
            arg(0),
            a,
            layer.weight("weight")?,
            layer.weights.get("bias"),
        ),
        LayerKind::BatchNorm2d { epsilon, .. } => {
            let x = arg(0);
            let hw = x.shape()[1] * x.shape()[2];
            let (g, b, m, v) = (
                layer.weight("gamma")?.data(),
                layer.weight("beta")?.data(),
                layer.weight("running_mean")?.data(),
                layer.weight("running_var")?.data(),
            );
            let mut out = x.clone();
            for (ch, chunk) in out.data_mut().chunks_mut(hw).enumerate() {
                let scale = g[ch] as f64 / (v[ch] as f64 + *epsilon as f64).sqrt();
                for val in chunk {
                    *val = ((*val as f64 - m[ch] as f64) * scale + b[ch] as f64) as f32;
                }
            }
            Ok(out)
        }
        LayerKind::Activation { function } => {
            let mut out = arg(0).clone();
            out.data_mut().iter_mut().for_each(|v| *v = function.apply(*v));
            Ok(out)
        }
        LayerKind::Output => Ok(arg(0).clone()),
        LayerKind::Concat => {
            let parts: Vec<&TensorBuf> = (0..layer.inputs.len()).map(arg).collect();
            let (h, w) = (parts[0].shape()[1], parts[0].shape()[2]);
            let c = parts.iter().map(|p| p.shape()[0]).sum();
            let mut data = Vec::with_capacity(c * h * w);
            for p in parts {
                data.extend_from_slice(p.data());
            }
            TensorBuf::new(vec![c, h, w], data)
        }
        LayerKind::MaxPool2d {
            kernel,
            stride,
            padding,
        } => Ok(maxpool2d(arg(0), *kernel, *stride, *padding)),
        LayerKind::Upsample2d { scale } => Ok(upsample_nearest(arg(0), *scale)),
    }
    .map_err(|e| match e {
        Error::Shape { layer: None, msg } => Error::shape(layer.id, msg),
        e => e,
    })
}

fn conv2d(x: &TensorBuf, a: &ConvAttrs, weight: &TensorBuf, bias: Option<&TensorBuf>) -> Result<TensorBuf> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if c != a.in_channels {
        return Err(Error::shape(None, format!("conv expects {} channels, got {c}", a.in_channels)));
    }
    let (oh, ow) = a
        .output_hw(h, w)
        .ok_or_else(|| Error::shape(None, "kernel does not fit input"))?;
    let (kh, kw) = (a.kernel_h, a.kernel_w);
    let (s, p) = (a.stride, a.padding);
    let xd: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
    let wd = weight.data();
    // Valid output range along one axis for kernel tap `k`.
    let span = |k: usize, len: usize, out: usize| -> (usize, usize) {
        let lo = if k < p { (p - k).div_ceil(s) } else { 0 };
        let hi = if len + p > k { ((len + p - k - 1) / s + 1).min(out) } else { 0 };
        (lo, hi.max(lo))
    };
    let mut out = vec![0.0f32; a.out_channels * oh * ow];
    // Each output accumulates bias, then taps in (ic, ky, kx) order.
    let mut plane = vec![0.0f64; oh * ow];
    for oc in 0..a.out_channels {
        plane.fill(bias.map_or(0.0, |b| b.data()[oc] as f64));
        for ic in 0..c {
            for ky in 0..kh {
                let (y0, y1) = span(ky, h, oh);
                for kx in 0..kw {
                    let wv = wd[((oc * c + ic) * kh + ky) * kw + kx] as f64;
                    let (x0, x1) = span(kx, w, ow);
                    for oy in y0..y1 {
                        let row = (ic * h + oy * s + ky - p) * w;
                        let acc = &mut plane[oy * ow..(oy + 1) * ow];
                        for ox in x0..x1 {
                            acc[ox] += xd[row + ox * s + kx - p] * wv;
                        }
                    }
                }
            }
        }
        for (o, v) in out[oc * oh * ow..(oc + 1) * oh * ow].iter_mut().zip(&plane) {
            *o = *v as f32;
        }
    }
    TensorBuf::new(vec![a.out_channels, oh, ow], out)
}

fn maxpool2d(x: &TensorBuf, kernel: usize, stride: usize, padding: usize) -> TensorBuf {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let oh = (h + 2 * padding - kernel) / stride + 1;
    let ow = (w + 2 * padding - kernel) / stride + 1;
    let mut out = vec![f32::NEG_INFINITY; c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f32::NEG_INFINITY;
                for ky in 0..kernel {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kernel {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        best = best.max(x.data()[(ch * h + iy as usize) * w + ix as usize]);
                    }
                }
                out[(ch * oh + oy) * ow + ox] = best;
            }
        }
    }
    TensorBuf::new(vec![c, oh, ow], out).expect("pool output shape")
}

fn upsample_nearest(x: &TensorBuf, scale: usize) -> TensorBuf {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (oh, ow) = (h * scale, w * scale);
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                out.push(x.data()[(ch * h + oy / scale) * w + ox / scale]);
            }
        }
    }
    TensorBuf::new(vec![c, oh, ow], out).expect("upsample output shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::builder::NetworkBuilder;
    use crate::ir::{ActivationFn, ConvAttrs};
    use crate::zoo;

    #[test]
    fn identity_1x1_conv_is_identity() {
        let mut b = NetworkBuilder::new("id", [3, 5, 5], 0);
        let w = zoo::identity_kernel(3).into_data();
        let c = b.conv_with(None, ConvAttrs::square(3, 3, 1), w, None);
        b.output(c);
        let ir = b.finish().unwrap();
        let x = calibration_batch([3, 5, 5], 1, 4).pop().unwrap();
        assert_eq!(outputs(&ir, &x).unwrap()[0], x);
    }

    #[test]
    fn all_ones_kernel_sums_neighbourhood() {
        let mut b = NetworkBuilder::new("ones", [1, 6, 6], 0);
        b.conv_with(None, ConvAttrs::square(1, 1, 3), vec![1.0; 9], None);
        let ir = b.finish().unwrap();
        let x = TensorBuf::filled(vec![1, 6, 6], 0.5);
        let y = &forward(&ir, &x).unwrap()[&0];
        for r in 1..5 {
            for c in 1..5 {
                assert_eq!(y.data()[r * 6 + c], 4.5);
            }
        }
        assert_eq!(y.data()[0], 2.0);
    }

    #[test]
    fn maxpool_and_upsample() {
        let x = TensorBuf::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = maxpool2d(&x, 2, 2, 0);
        assert_eq!(p.data(), &[4.0]);
        let same = maxpool2d(&x, 3, 1, 1);
        assert_eq!(same.data(), &[4.0; 4]);
        let u = upsample_nearest(&x, 2);
        assert_eq!(&u.data()[..4], &[1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn proxy_score_is_one_for_identical_models() {
        let ir = zoo::redundant_toy(3);
        let calib = calibration_batch(ir.input_shape, 4, 1);
        assert_eq!(proxy_score(&ir, &ir, &calib).unwrap().value(), 1.0);
    }

    #[test]
    fn recalibration_with_zero_input_gives_zero_first_mean() {
        let mut b = NetworkBuilder::new("bn", [2, 4, 4], 0);
        let c = b.conv(None, 3, 3, 1, 1, false);
        let n = b.bn(c);
        let a = b.act(n, ActivationFn::Relu);
        b.output(a);
        let ir = b.finish().unwrap();
        let zeros = vec![TensorBuf::zeros(vec![2, 4, 4]); 3];
        let out = recalibrate_bn(&ir, &zeros).unwrap();
        let bn = out.layer(n).unwrap();
        assert!(bn.weights["running_mean"].data().iter().all(|&m| m == 0.0));
        assert_eq!(bn.weights["gamma"], ir.layer(n).unwrap().weights["gamma"]);
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let ir = zoo::elan();
        assert!(forward(&ir, &TensorBuf::zeros(vec![3, 8, 8])).is_err());
    }
}
