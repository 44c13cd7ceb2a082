//! Incremental construction of [`NetworkIR`] values with seeded weights.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::ir::{
    ActivationFn, ConvAttrs, FeatureShape, LayerId, LayerKind, LayerSpec, NetworkIR,
    DEFAULT_BN_EPSILON,
};
use crate::tensor::TensorBuf;

/// Appends layers with consecutive ids and tracks shapes as it goes.
///
/// Layer methods never fail; the first inconsistency is remembered and
/// returned by [`NetworkBuilder::finish`].
pub struct NetworkBuilder {
    ir: NetworkIR,
    shapes: Vec<FeatureShape>,
    rng: ChaCha8Rng,
    error: Option<Error>,
}

impl NetworkBuilder {
    pub fn new(name: &str, input_shape: FeatureShape, seed: u64) -> Self {
        NetworkBuilder {
            ir: NetworkIR {
                name: name.to_string(),
                input_shape,
                layers: Vec::new(),
            },
            shapes: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            error: None,
        }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn next_id(&self) -> LayerId {
        self.ir.layers.len()
    }

    /// Output shape of a layer added so far, or the network input for `None`.
    pub fn shape(&self, id: Option<LayerId>) -> FeatureShape {
        match id {
            None => self.ir.input_shape,
            Some(id) => self.shapes.get(id).copied().unwrap_or([1, 1, 1]),
        }
    }

    fn push(&mut self, layer: LayerSpec, shape: FeatureShape) -> LayerId {
        let id = layer.id;
        self.ir.layers.push(layer);
        self.shapes.push(shape);
        id
    }

    fn fail(&mut self, id: LayerId, msg: String) {
        if self.error.is_none() {
            self.error = Some(Error::shape(id, msg));
        }
    }

    fn inputs(id: Option<LayerId>) -> Vec<LayerId> {
        id.into_iter().collect()
    }

    /// Convolution with He-normal weights and, optionally, a small random bias.
    pub fn conv(
        &mut self,
        input: Option<LayerId>,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> LayerId {
        let [c, _, _] = self.shape(input);
        let attrs = ConvAttrs {
            out_channels,
            in_channels: c,
            kernel_h: kernel,
            kernel_w: kernel,
            stride,
            padding,
            has_bias: bias,
        };
        let fan_in = (c * kernel * kernel).max(1) as f32;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
        let weight: Vec<f32> = (0..out_channels * c * kernel * kernel)
            .map(|_| normal.sample(&mut self.rng))
            .collect();
        let bias = bias.then(|| {
            let n = Normal::new(0.0, 0.1).expect("finite std");
            (0..out_channels).map(|_| n.sample(&mut self.rng)).collect()
        });
        self.conv_with(input, attrs, weight, bias)
    }

    /// Convolution with explicit weights in `[out, in, kh, kw]` order.
    pub fn conv_with(
        &mut self,
        input: Option<LayerId>,
        attrs: ConvAttrs,
        weight: Vec<f32>,
        bias: Option<Vec<f32>>,
    ) -> LayerId {
        let id = self.next_id();
        let [c, h, w] = self.shape(input);
        if c != attrs.in_channels {
            self.fail(id, format!("in_channels {} but input has {c}", attrs.in_channels));
        }
        let out_hw = attrs.output_hw(h, w);
        if out_hw.is_none() {
            self.fail(id, "kernel does not fit input".into());
        }
        let (oh, ow) = out_hw.unwrap_or((1, 1));
        let mut attrs = attrs;
        attrs.has_bias = bias.is_some();
        let mut layer = LayerSpec::new(id, LayerKind::Conv2d(attrs), Self::inputs(input));
        let wshape = vec![attrs.out_channels, attrs.in_channels, attrs.kernel_h, attrs.kernel_w];
        match TensorBuf::new(wshape, weight) {
            Ok(t) => layer = layer.with_weight("weight", t),
            Err(e) => self.fail(id, e.to_string()),
        }
        if let Some(b) = bias {
            match TensorBuf::new(vec![attrs.out_channels], b) {
                Ok(t) => layer = layer.with_weight("bias", t),
                Err(e) => self.fail(id, e.to_string()),
            }
        }
        self.push(layer, [attrs.out_channels, oh, ow])
    }

    /// Batch norm with randomized affine parameters and running statistics.
    pub fn bn(&mut self, input: LayerId) -> LayerId {
        let c = self.shape(Some(input))[0];
        let small = Normal::new(0.0f32, 0.1).expect("finite std");
        let gamma: Vec<f32> = (0..c).map(|_| self.rng.random_range(0.5..1.5)).collect();
        let beta: Vec<f32> = (0..c).map(|_| small.sample(&mut self.rng)).collect();
        let mean: Vec<f32> = (0..c).map(|_| small.sample(&mut self.rng)).collect();
        let var: Vec<f32> = (0..c).map(|_| self.rng.random_range(0.5..1.5)).collect();
        self.bn_with(input, DEFAULT_BN_EPSILON, gamma, beta, mean, var)
    }

    pub fn bn_with(
        &mut self,
        input: LayerId,
        epsilon: f32,
        gamma: Vec<f32>,
        beta: Vec<f32>,
        mean: Vec<f32>,
        var: Vec<f32>,
    ) -> LayerId {
        let id = self.next_id();
        let shape = self.shape(Some(input));
        let c = shape[0];
        let mut layer = LayerSpec::new(
            id,
            LayerKind::BatchNorm2d {
                channels: c,
                epsilon,
            },
            vec![input],
        );
        for (name, values) in [
            ("gamma", gamma),
            ("beta", beta),
            ("running_mean", mean),
            ("running_var", var),
        ] {
            match TensorBuf::new(vec![c], values) {
                Ok(t) => layer = layer.with_weight(name, t),
                Err(e) => self.fail(id, format!("{name}: {e}")),
            }
        }
        self.push(layer, shape)
    }

    pub fn act(&mut self, input: LayerId, function: ActivationFn) -> LayerId {
        let id = self.next_id();
        let shape = self.shape(Some(input));
        self.push(
            LayerSpec::new(id, LayerKind::Activation { function }, vec![input]),
            shape,
        )
    }

    pub fn concat(&mut self, inputs: &[LayerId]) -> LayerId {
        let id = self.next_id();
        let mut c = 0;
        let mut hw = None;
        for &src in inputs {
            let [sc, h, w] = self.shape(Some(src));
            if hw.is_some_and(|p| p != (h, w)) {
                self.fail(id, "concat spatial mismatch".into());
            }
            hw = Some((h, w));
            c += sc;
        }
        let (h, w) = hw.unwrap_or((1, 1));
        self.push(LayerSpec::new(id, LayerKind::Concat, inputs.to_vec()), [c.max(1), h, w])
    }

    pub fn maxpool(&mut self, input: LayerId, kernel: usize, stride: usize, padding: usize) -> LayerId {
        let id = self.next_id();
        let [c, h, w] = self.shape(Some(input));
        let out = |s: usize| (s + 2 * padding).checked_sub(kernel).map(|v| v / stride.max(1) + 1);
        let (oh, ow) = match (out(h), out(w)) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                self.fail(id, "pool window does not fit".into());
                (1, 1)
            }
        };
        self.push(
            LayerSpec::new(
                id,
                LayerKind::MaxPool2d {
                    kernel,
                    stride,
                    padding,
                },
                vec![input],
            ),
            [c, oh, ow],
        )
    }

    pub fn upsample(&mut self, input: LayerId, scale: usize) -> LayerId {
        let id = self.next_id();
        let [c, h, w] = self.shape(Some(input));
        self.push(
            LayerSpec::new(id, LayerKind::Upsample2d { scale }, vec![input]),
            [c, h * scale, w * scale],
        )
    }

    pub fn output(&mut self, input: LayerId) -> LayerId {
        let id = self.next_id();
        let shape = self.shape(Some(input));
        self.push(LayerSpec::new(id, LayerKind::Output, vec![input]), shape)
    }

    /// The conv + batch norm + activation block used throughout YOLO-style nets.
    /// Returns the activation id.
    pub fn conv_bn_act(
        &mut self,
        input: Option<LayerId>,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        function: ActivationFn,
    ) -> LayerId {
        let c = self.conv(input, out_channels, kernel, stride, kernel / 2, false);
        let n = self.bn(c);
        self.act(n, function)
    }

    pub fn finish(self) -> Result<NetworkIR> {
        if let Some(e) = self.error {
            return Err(e);
        }
        self.ir.validate()?;
        Ok(self.ir)
    }
}
