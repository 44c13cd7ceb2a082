//! Network intermediate representation.
//!
//! A network is a flat list of layers in topological order. Every layer names
//! its inputs by id; a layer with no inputs reads the network input. Layer ids
//! are unique and strictly increasing along the list, but need not be
//! contiguous (folding batch norms removes ids without renumbering the rest).

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::TensorBuf;

pub type LayerId = usize;

/// `[channels, height, width]` of a feature map.
pub type FeatureShape = [usize; 3];

pub const DEFAULT_BN_EPSILON: f32 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationFn {
    Relu,
    /// Leaky ReLU with a fixed negative slope of 0.1.
    LeakyRelu,
    Silu,
    Relu6,
}

impl ActivationFn {
    pub fn apply(self, x: f32) -> f32 {
        match self {
            ActivationFn::Relu => x.max(0.0),
            ActivationFn::LeakyRelu => {
                if x >= 0.0 {
                    x
                } else {
                    0.1 * x
                }
            }
            ActivationFn::Silu => x / (1.0 + (-x).exp()),
            ActivationFn::Relu6 => x.clamp(0.0, 6.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvAttrs {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub has_bias: bool,
}

impl ConvAttrs {
    pub fn square(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        ConvAttrs {
            out_channels,
            in_channels,
            kernel_h: kernel,
            kernel_w: kernel,
            stride: 1,
            padding: kernel / 2,
            has_bias: false,
        }
    }

    pub fn kernel_area(&self) -> usize {
        self.kernel_h * self.kernel_w
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let oh = window_out(h, self.kernel_h, self.stride, self.padding)?;
        let ow = window_out(w, self.kernel_w, self.stride, self.padding)?;
        Some((oh, ow))
    }
}

fn window_out(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    if stride == 0 || kernel == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

fn default_epsilon() -> f32 {
    DEFAULT_BN_EPSILON
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "attrs")]
pub enum LayerKind {
    #[serde(rename = "Conv2D")]
    Conv2d(ConvAttrs),
    #[serde(rename = "BatchNorm2D")]
    BatchNorm2d {
        channels: usize,
        #[serde(default = "default_epsilon")]
        epsilon: f32,
    },
    Activation {
        function: ActivationFn,
    },
    Concat,
    #[serde(rename = "MaxPool2D")]
    MaxPool2d {
        kernel: usize,
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    #[serde(rename = "Upsample2D")]
    Upsample2d { scale: usize },
    Output,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv2d(_) => "Conv2D",
            LayerKind::BatchNorm2d { .. } => "BatchNorm2D",
            LayerKind::Activation { .. } => "Activation",
            LayerKind::Concat => "Concat",
            LayerKind::MaxPool2d { .. } => "MaxPool2D",
            LayerKind::Upsample2d { .. } => "Upsample2D",
            LayerKind::Output => "Output",
        }
    }

    /// Layers that forward channels one-to-one without touching their count.
    pub fn is_channel_passthrough(&self) -> bool {
        matches!(
            self,
            LayerKind::BatchNorm2d { .. }
                | LayerKind::Activation { .. }
                | LayerKind::MaxPool2d { .. }
                | LayerKind::Upsample2d { .. }
                | LayerKind::Output
        )
    }
}

pub const BN_TENSORS: [&str; 4] = ["gamma", "beta", "running_mean", "running_var"];

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub id: LayerId,
    pub kind: LayerKind,
    pub inputs: Vec<LayerId>,
    pub weights: BTreeMap<String, TensorBuf>,
}

impl LayerSpec {
    pub fn new(id: LayerId, kind: LayerKind, inputs: Vec<LayerId>) -> Self {
        LayerSpec {
            id,
            kind,
            inputs,
            weights: BTreeMap::new(),
        }
    }

    pub fn with_weight(mut self, name: &str, tensor: TensorBuf) -> Self {
        self.weights.insert(name.to_string(), tensor);
        self
    }

    pub fn conv_attrs(&self) -> Option<&ConvAttrs> {
        match &self.kind {
            LayerKind::Conv2d(a) => Some(a),
            _ => None,
        }
    }

    pub fn weight(&self, name: &str) -> Result<&TensorBuf> {
        self.weights.get(name).ok_or_else(|| Error::MissingWeight {
            layer: self.id,
            name: name.to_string(),
        })
    }

    pub fn is_conv(&self) -> bool {
        matches!(self.kind, LayerKind::Conv2d(_))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkIR {
    pub name: String,
    pub input_shape: FeatureShape,
    pub layers: Vec<LayerSpec>,
}

impl NetworkIR {
    pub fn position(&self, id: LayerId) -> Option<usize> {
        self.layers.binary_search_by_key(&id, |l| l.id).ok()
    }

    pub fn layer(&self, id: LayerId) -> Option<&LayerSpec> {
        self.position(id).map(|p| &self.layers[p])
    }

    pub fn layer_mut(&mut self, id: LayerId) -> Option<&mut LayerSpec> {
        self.position(id).map(move |p| &mut self.layers[p])
    }

    pub fn conv_ids(&self) -> Vec<LayerId> {
        self.layers.iter().filter(|l| l.is_conv()).map(|l| l.id).collect()
    }

    pub fn output_ids(&self) -> Vec<LayerId> {
        self.layers
            .iter()
            .filter(|l| l.kind == LayerKind::Output)
            .map(|l| l.id)
            .collect()
    }

    /// Map from layer id to the ids of layers reading it, in list order.
    pub fn consumers(&self) -> HashMap<LayerId, Vec<LayerId>> {
        let mut map: HashMap<LayerId, Vec<LayerId>> = HashMap::new();
        for layer in &self.layers {
            for &src in &layer.inputs {
                let entry = map.entry(src).or_default();
                if entry.last() != Some(&layer.id) {
                    entry.push(layer.id);
                }
            }
        }
        map
    }

    /// The batch norm layers reading `conv` directly.
    pub fn trailing_batch_norms(&self, conv: LayerId) -> Vec<LayerId> {
        self.layers
            .iter()
            .filter(|l| matches!(l.kind, LayerKind::BatchNorm2d { .. }) && l.inputs == [conv])
            .map(|l| l.id)
            .collect()
    }

    /// Check every structural invariant and return the inferred output shapes.
    pub fn validate(&self) -> Result<BTreeMap<LayerId, FeatureShape>> {
        self.check_structure()?;
        self.infer_shapes()
    }

    fn check_structure(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::shape(None, "network has no layers"));
        }
        if self.input_shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(None, "input shape has a zero dimension"));
        }
        if !self.layers[0].inputs.is_empty() {
            return Err(Error::shape(self.layers[0].id, "first layer must read the network input"));
        }
        let mut prev: Option<LayerId> = None;
        for layer in &self.layers {
            if let Some(p) = prev {
                if layer.id <= p {
                    return Err(Error::shape(
                        layer.id,
                        format!("layer ids must be strictly increasing (follows {p})"),
                    ));
                }
            }
            prev = Some(layer.id);
            for &src in &layer.inputs {
                if src >= layer.id || self.position(src).is_none() {
                    return Err(Error::shape(
                        layer.id,
                        format!("input {src} is not an earlier layer"),
                    ));
                }
            }
            match (&layer.kind, layer.inputs.len()) {
                (LayerKind::Concat, n) if n < 2 => {
                    return Err(Error::shape(layer.id, "Concat needs at least two inputs"));
                }
                (LayerKind::Concat, _) => {}
                (_, n) if n > 1 => {
                    return Err(Error::shape(layer.id, format!("{} takes one input", layer.kind.name())));
                }
                _ => {}
            }
        }
        let consumers = self.consumers();
        for id in self.output_ids() {
            if consumers.contains_key(&id) {
                return Err(Error::shape(id, "Output layers cannot feed other layers"));
            }
        }
        Ok(())
    }

    /// Output shape of every layer. Also checks weight tensors against attributes.
    pub fn infer_shapes(&self) -> Result<BTreeMap<LayerId, FeatureShape>> {
        let mut shapes: BTreeMap<LayerId, FeatureShape> = BTreeMap::new();
        for layer in &self.layers {
            let input_of = |i: usize| -> Result<FeatureShape> {
                match layer.inputs.get(i) {
                    None => Ok(self.input_shape),
                    Some(src) => shapes
                        .get(src)
                        .copied()
                        .ok_or_else(|| Error::shape(layer.id, format!("input {src} has no shape"))),
                }
            };
            let shape = match &layer.kind {
                LayerKind::Conv2d(a) => {
                    let [c, h, w] = input_of(0)?;
                    if a.in_channels != c {
                        return Err(Error::shape(
                            layer.id,
                            format!("declares in_channels={} but receives {c}", a.in_channels),
                        ));
                    }
                    if a.out_channels == 0 || a.kernel_h == 0 || a.kernel_w == 0 || a.stride == 0 {
                        return Err(Error::shape(layer.id, "zero-sized convolution attribute"));
                    }
                    let weight = layer.weight("weight")?;
                    let expected = [a.out_channels, a.in_channels, a.kernel_h, a.kernel_w];
                    if weight.shape() != expected {
                        return Err(Error::shape(
                            layer.id,
                            format!("weight shape {:?}, expected {expected:?}", weight.shape()),
                        ));
                    }
                    match (a.has_bias, layer.weights.get("bias")) {
                        (true, None) => {
                            return Err(Error::MissingWeight {
                                layer: layer.id,
                                name: "bias".into(),
                            })
                        }
                        (true, Some(b)) if b.shape() != [a.out_channels] => {
                            return Err(Error::shape(layer.id, format!("bias shape {:?}", b.shape())));
                        }
                        (false, Some(_)) => {
                            return Err(Error::shape(layer.id, "bias tensor present but has_bias=false"));
                        }
                        _ => {}
                    }
                    let (oh, ow) = a.output_hw(h, w).ok_or_else(|| {
                        Error::shape(layer.id, format!("kernel does not fit {h}x{w} input"))
                    })?;
                    [a.out_channels, oh, ow]
                }
                LayerKind::BatchNorm2d { channels, epsilon } => {
                    let shape = input_of(0)?;
                    if *channels != shape[0] {
                        return Err(Error::shape(
                            layer.id,
                            format!("declares {channels} channels but receives {}", shape[0]),
                        ));
                    }
                    if !(*epsilon >= 0.0) {
                        return Err(Error::shape(layer.id, "epsilon must be non-negative"));
                    }
                    match layer.inputs.first().and_then(|&src| self.layer(src)) {
                        Some(src) if src.is_conv() => {}
                        _ => {
                            return Err(Error::shape(
                                layer.id,
                                "BatchNorm2D must directly follow a Conv2D",
                            ))
                        }
                    }
                    for name in BN_TENSORS {
                        let t = layer.weight(name)?;
                        if t.shape() != [*channels] {
                            return Err(Error::shape(
                                layer.id,
                                format!("{name} shape {:?}, expected [{channels}]", t.shape()),
                            ));
                        }
                    }
                    shape
                }
                LayerKind::Activation { .. } | LayerKind::Output => input_of(0)?,
                LayerKind::Concat => {
                    let mut total = 0;
                    let mut hw: Option<(usize, usize)> = None;
                    for i in 0..layer.inputs.len() {
                        let [c, h, w] = input_of(i)?;
                        if let Some(prev) = hw {
                            if prev != (h, w) {
                                return Err(Error::shape(
                                    layer.id,
                                    format!("concat spatial mismatch {prev:?} vs {:?}", (h, w)),
                                ));
                            }
                        }
                        hw = Some((h, w));
                        total += c;
                    }
                    let (h, w) = hw.expect("concat has inputs");
                    [total, h, w]
                }
                LayerKind::MaxPool2d {
                    kernel,
                    stride,
                    padding,
                } => {
                    let [c, h, w] = input_of(0)?;
                    if *padding * 2 > *kernel {
                        return Err(Error::shape(layer.id, "max-pool padding exceeds half the kernel"));
                    }
                    let oh = window_out(h, *kernel, *stride, *padding);
                    let ow = window_out(w, *kernel, *stride, *padding);
                    match (oh, ow) {
                        (Some(oh), Some(ow)) => [c, oh, ow],
                        _ => return Err(Error::shape(layer.id, "pool window does not fit input")),
                    }
                }
                LayerKind::Upsample2d { scale } => {
                    if *scale == 0 {
                        return Err(Error::shape(layer.id, "upsample scale must be positive"));
                    }
                    let [c, h, w] = input_of(0)?;
                    [c, h * scale, w * scale]
                }
            };
            shapes.insert(layer.id, shape);
        }
        Ok(shapes)
    }

    /// Channel count flowing into `layer` (the concatenated width for a Concat).
    pub fn input_channels(&self, shapes: &BTreeMap<LayerId, FeatureShape>, layer: &LayerSpec) -> usize {
        if layer.inputs.is_empty() {
            return self.input_shape[0];
        }
        layer.inputs.iter().map(|src| shapes[src][0]).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::builder::NetworkBuilder;

    fn chain() -> NetworkIR {
        let mut b = NetworkBuilder::new("chain", [3, 8, 8], 1);
        let c0 = b.conv(None, 8, 3, 1, 1, false);
        b.conv(Some(c0), 4, 3, 1, 1, false);
        b.finish().unwrap()
    }

    #[test]
    fn chain_is_valid() {
        let ir = chain();
        let shapes = ir.validate().unwrap();
        assert_eq!(shapes[&0], [8, 8, 8]);
        assert_eq!(shapes[&1], [4, 8, 8]);
    }

    #[test]
    fn in_channel_mismatch_names_layer() {
        let mut ir = chain();
        let l = ir.layer_mut(1).unwrap();
        if let LayerKind::Conv2d(a) = &mut l.kind {
            a.in_channels = 7;
        }
        match ir.validate() {
            Err(Error::Shape { layer: Some(1), .. }) => {}
            other => panic!("expected shape error at layer 1, got {other:?}"),
        }
    }

    #[test]
    fn shape_rules() {
        let mut b = NetworkBuilder::new("s", [3, 20, 20], 2);
        let a = b.conv(None, 32, 1, 1, 0, false);
        let c = b.conv(None, 64, 1, 1, 0, false);
        let cat = b.concat(&[a, c]);
        let up = b.upsample(cat, 2);
        let same = b.conv(Some(up), 8, 3, 1, 1, true);
        let pool = b.maxpool(same, 2, 2, 0);
        let ir = b.finish().unwrap();
        let shapes = ir.infer_shapes().unwrap();
        assert_eq!(shapes[&cat], [96, 20, 20]);
        assert_eq!(shapes[&up], [96, 40, 40]);
        assert_eq!(shapes[&same], [8, 40, 40]);
        assert_eq!(shapes[&pool], [8, 20, 20]);
    }

    #[test]
    fn ids_must_increase() {
        let mut ir = chain();
        ir.layers[1].id = 0;
        assert!(ir.validate().is_err());
    }

    #[test]
    fn missing_weight_detected() {
        let mut ir = chain();
        ir.layers[1].weights.remove("weight");
        assert!(matches!(ir.validate(), Err(Error::MissingWeight { layer: 1, .. })));
    }

    #[test]
    fn activations() {
        assert_eq!(ActivationFn::LeakyRelu.apply(-2.0), -0.2);
        assert_eq!(ActivationFn::Relu6.apply(7.0), 6.0);
        assert_eq!(ActivationFn::Relu.apply(-1.0), 0.0);
        assert!((ActivationFn::Silu.apply(0.0)).abs() < 1e-7);
    }
}
