//! Bundled network configurations.
//!
//! The YOLO-style builders follow the layer lists of the public YOLOv7 and
//! YOLOv7-tiny configs (ELAN blocks, max-pool downsampling branches, SPP
//! pooling, FPN/PAN head with upsampling) with seeded random weights. They
//! differ from upstream in one place: the 1x1 convolution right after the
//! SPP pooling concatenation is omitted, so the pooled concat feeds the next
//! layer directly. The connectivity graphs have 91 and 57 vertices.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::builder::NetworkBuilder;
use crate::error::{Error, Result};
use crate::eval;
use crate::ir::{ActivationFn, ConvAttrs, LayerId, LayerKind, NetworkIR};
use crate::tensor::TensorBuf;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ZooOptions {
    /// Square input resolution; must be a multiple of 32.
    pub input_hw: usize,
    /// Channel divisor applied to every layer width.
    pub width_div: usize,
    pub seed: u64,
}

impl Default for ZooOptions {
    fn default() -> Self {
        ZooOptions {
            input_hw: 640,
            width_div: 1,
            seed: 0,
        }
    }
}

impl ZooOptions {
    /// Small variant suitable for running the reference forward pass.
    pub fn small(seed: u64) -> Self {
        ZooOptions {
            input_hw: 64,
            width_div: 16,
            seed,
        }
    }

    fn ch(&self, c: usize) -> usize {
        (c / self.width_div.max(1)).max(2)
    }
}

pub const BUNDLED: [&str; 5] = ["elan", "yolov7", "yolov7-tiny", "redundant-toy", "magnitude-toy"];

/// Look up a bundled network by name.
pub fn by_name(name: &str, opts: ZooOptions) -> Result<NetworkIR> {
    match name {
        "elan" => Ok(elan()),
        "yolov7" => yolov7(opts),
        "yolov7-tiny" => yolov7_tiny(opts),
        "redundant-toy" => Ok(redundant_toy(opts.seed)),
        "magnitude-toy" => magnitude_toy(opts.seed),
        other => Err(Error::Parse(format!(
            "unknown bundled model `{other}` (available: {})",
            BUNDLED.join(", ")
        ))),
    }
}

/// The stem and first ELAN block of YOLOv7-tiny, without batch norm or
/// activation layers, so layer ids coincide with convolution numbers:
/// convs 0..=5, the concatenation is layer 6 (inputs `[5, 4, 3, 2]`, 64
/// channels each) and conv 7 merges it.
pub fn elan() -> NetworkIR {
    let mut b = NetworkBuilder::new("elan", [3, 64, 64], 7);
    let c0 = b.conv(None, 32, 3, 2, 1, false);
    let c1 = b.conv(Some(c0), 64, 3, 2, 1, false);
    let c2 = b.conv(Some(c1), 64, 1, 1, 0, false);
    let c3 = b.conv(Some(c1), 64, 1, 1, 0, false);
    let c4 = b.conv(Some(c3), 64, 3, 1, 1, false);
    let c5 = b.conv(Some(c4), 64, 3, 1, 1, false);
    let cat = b.concat(&[c5, c4, c3, c2]);
    let c7 = b.conv(Some(cat), 128, 1, 1, 0, false);
    b.output(c7);
    b.finish().expect("elan fixture is valid")
}

struct Yolo<'a> {
    b: NetworkBuilder,
    opts: &'a ZooOptions,
    act: ActivationFn,
}

impl Yolo<'_> {
    fn cba(&mut self, input: Option<LayerId>, c: usize, k: usize, s: usize) -> LayerId {
        let c = self.opts.ch(c);
        self.b.conv_bn_act(input, c, k, s, self.act)
    }

    fn pool(&mut self, input: LayerId, k: usize) -> LayerId {
        self.b.maxpool(input, k, 1, k / 2)
    }

    /// Tiny ELAN: two 1x1 branches, two stacked 3x3, concat of all four.
    fn elan_tiny(&mut self, input: LayerId, c: usize) -> LayerId {
        let a = self.cba(Some(input), c, 1, 1);
        let b = self.cba(Some(input), c, 1, 1);
        let c1 = self.cba(Some(b), c, 3, 1);
        let c2 = self.cba(Some(c1), c, 3, 1);
        let cat = self.b.concat(&[c2, c1, b, a]);
        self.cba(Some(cat), 2 * c, 1, 1)
    }

    /// Backbone ELAN: four stacked 3x3, every other one concatenated.
    fn elan(&mut self, input: LayerId, c: usize, out: usize) -> LayerId {
        let a = self.cba(Some(input), c, 1, 1);
        let b = self.cba(Some(input), c, 1, 1);
        let c1 = self.cba(Some(b), c, 3, 1);
        let c2 = self.cba(Some(c1), c, 3, 1);
        let c3 = self.cba(Some(c2), c, 3, 1);
        let c4 = self.cba(Some(c3), c, 3, 1);
        let cat = self.b.concat(&[c4, c2, b, a]);
        self.cba(Some(cat), out, 1, 1)
    }

    /// Head ELAN: every stacked 3x3 output is concatenated.
    fn elan_head(&mut self, input: LayerId, c: usize, inner: usize) -> LayerId {
        let a = self.cba(Some(input), c, 1, 1);
        let b = self.cba(Some(input), c, 1, 1);
        let c1 = self.cba(Some(b), inner, 3, 1);
        let c2 = self.cba(Some(c1), inner, 3, 1);
        let c3 = self.cba(Some(c2), inner, 3, 1);
        let c4 = self.cba(Some(c3), inner, 3, 1);
        let cat = self.b.concat(&[c4, c3, c2, c1, b, a]);
        self.cba(Some(cat), c, 1, 1)
    }

    /// Max-pool branch next to a strided 3x3 branch, concatenated with `extra`.
    fn mp_block(&mut self, input: LayerId, c: usize, extra: Option<LayerId>) -> LayerId {
        let m = self.b.maxpool(input, 2, 2, 0);
        let p = self.cba(Some(m), c, 1, 1);
        let q1 = self.cba(Some(input), c, 1, 1);
        let q2 = self.cba(Some(q1), c, 3, 2);
        match extra {
            Some(e) => self.b.concat(&[q2, p, e]),
            None => self.b.concat(&[q2, p]),
        }
    }

    fn detect(&mut self, inputs: [LayerId; 3]) {
        let det = self.opts.ch(255);
        for input in inputs {
            let d = self.b.conv(Some(input), det, 1, 1, 0, true);
            self.b.output(d);
        }
    }
}

fn check_opts(opts: &ZooOptions) -> Result<()> {
    if opts.input_hw == 0 || opts.input_hw % 32 != 0 {
        return Err(Error::shape(None, "input resolution must be a positive multiple of 32"));
    }
    Ok(())
}

/// YOLOv7-tiny-style detector (LeakyReLU, 57 convolutions).
pub fn yolov7_tiny(opts: ZooOptions) -> Result<NetworkIR> {
    check_opts(&opts)?;
    let hw = opts.input_hw;
    let mut y = Yolo {
        b: NetworkBuilder::new("yolov7-tiny-style", [3, hw, hw], opts.seed),
        opts: &opts,
        act: ActivationFn::LeakyRelu,
    };
    let x0 = y.cba(None, 32, 3, 2);
    let x1 = y.cba(Some(x0), 64, 3, 2);
    let e1 = y.elan_tiny(x1, 32);
    let p = y.b.maxpool(e1, 2, 2, 0);
    let e2 = y.elan_tiny(p, 64);
    let p = y.b.maxpool(e2, 2, 2, 0);
    let e3 = y.elan_tiny(p, 128);
    let p = y.b.maxpool(e3, 2, 2, 0);
    let e4 = y.elan_tiny(p, 256);

    // SPP: pooled branch concatenated, then nested into the CSP concat.
    let route = y.cba(Some(e4), 256, 1, 1);
    let s = y.cba(Some(e4), 256, 1, 1);
    let m5 = y.pool(s, 5);
    let m9 = y.pool(s, 9);
    let m13 = y.pool(s, 13);
    let spp = y.b.concat(&[m13, m9, m5, s]);
    let csp = y.b.concat(&[spp, route]);
    let h37 = y.cba(Some(csp), 256, 1, 1);

    let h38 = y.cba(Some(h37), 128, 1, 1);
    let up = y.b.upsample(h38, 2);
    let lat = y.cba(Some(e3), 128, 1, 1);
    let cat = y.b.concat(&[lat, up]);
    let e5 = y.elan_tiny(cat, 64);

    let h48 = y.cba(Some(e5), 64, 1, 1);
    let up = y.b.upsample(h48, 2);
    let lat = y.cba(Some(e2), 64, 1, 1);
    let cat = y.b.concat(&[lat, up]);
    let e6 = y.elan_tiny(cat, 32);

    let down = y.cba(Some(e6), 128, 3, 2);
    let cat = y.b.concat(&[down, e5]);
    let e7 = y.elan_tiny(cat, 64);

    let down = y.cba(Some(e7), 256, 3, 2);
    let cat = y.b.concat(&[down, h37]);
    let e8 = y.elan_tiny(cat, 128);

    let o1 = y.cba(Some(e6), 128, 3, 1);
    let o2 = y.cba(Some(e7), 256, 3, 1);
    let o3 = y.cba(Some(e8), 512, 3, 1);
    y.detect([o1, o2, o3]);
    y.b.finish()
}

/// YOLOv7-style detector (SiLU, 91 convolutions).
pub fn yolov7(opts: ZooOptions) -> Result<NetworkIR> {
    check_opts(&opts)?;
    let hw = opts.input_hw;
    let mut y = Yolo {
        b: NetworkBuilder::new("yolov7-style", [3, hw, hw], opts.seed),
        opts: &opts,
        act: ActivationFn::Silu,
    };
    let x0 = y.cba(None, 32, 3, 1);
    let x1 = y.cba(Some(x0), 64, 3, 2);
    let x2 = y.cba(Some(x1), 64, 3, 1);
    let x3 = y.cba(Some(x2), 128, 3, 2);
    let e1 = y.elan(x3, 64, 256);
    let m1 = y.mp_block(e1, 128, None);
    let e2 = y.elan(m1, 128, 512);
    let m2 = y.mp_block(e2, 256, None);
    let e3 = y.elan(m2, 256, 1024);
    let m3 = y.mp_block(e3, 512, None);
    let e4 = y.elan(m3, 256, 1024);

    // SPPCSPC
    let cv1 = y.cba(Some(e4), 512, 1, 1);
    let cv3 = y.cba(Some(cv1), 512, 3, 1);
    let cv4 = y.cba(Some(cv3), 512, 1, 1);
    let m5 = y.pool(cv4, 5);
    let m9 = y.pool(cv4, 9);
    let m13 = y.pool(cv4, 13);
    let pooled = y.b.concat(&[cv4, m5, m9, m13]);
    let cv6 = y.cba(Some(pooled), 512, 3, 1);
    let cv2 = y.cba(Some(e4), 512, 1, 1);
    let cat = y.b.concat(&[cv6, cv2]);
    let sppcspc = y.cba(Some(cat), 512, 1, 1);

    let h = y.cba(Some(sppcspc), 256, 1, 1);
    let up = y.b.upsample(h, 2);
    let lat = y.cba(Some(e3), 256, 1, 1);
    let cat = y.b.concat(&[lat, up]);
    let e5 = y.elan_head(cat, 256, 128);

    let h = y.cba(Some(e5), 128, 1, 1);
    let up = y.b.upsample(h, 2);
    let lat = y.cba(Some(e2), 128, 1, 1);
    let cat = y.b.concat(&[lat, up]);
    let e6 = y.elan_head(cat, 128, 64);

    let cat = y.mp_block(e6, 128, Some(e5));
    let e7 = y.elan_head(cat, 256, 128);
    let cat = y.mp_block(e7, 256, Some(sppcspc));
    let e8 = y.elan_head(cat, 512, 256);

    let r1 = y.cba(Some(e6), 256, 3, 1);
    let r2 = y.cba(Some(e7), 512, 3, 1);
    let r3 = y.cba(Some(e8), 1024, 3, 1);
    y.detect([r1, r2, r3]);
    y.b.finish()
}

fn conv_weights(
    rng: &mut ChaCha8Rng,
    scales: &[f32],
    in_channels: usize,
    kernel: usize,
) -> Vec<f32> {
    let per = in_channels * kernel * kernel;
    let normal = Normal::new(0.0f32, 1.0).expect("unit normal");
    let mut out = Vec::with_capacity(scales.len() * per);
    for &s in scales {
        let v: Vec<f32> = (0..per).map(|_| normal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-12);
        out.extend(v.into_iter().map(|x| x / norm * s));
    }
    out
}

/// Magnitudes for `n` filters of which `live` carry signal; the rest are
/// near-dead. Shuffled so the live filters sit at random indices.
fn redundant_scales(rng: &mut ChaCha8Rng, n: usize, live: usize) -> Vec<f32> {
    use rand::seq::SliceRandom;
    let mut s: Vec<f32> = (0..n)
        .map(|i| if i < live { 1.0 } else { 1e-4 })
        .collect();
    s.shuffle(rng);
    s
}

fn redundant_conv(
    b: &mut NetworkBuilder,
    rng: &mut ChaCha8Rng,
    input: Option<LayerId>,
    filters: usize,
    live: usize,
    kernel: usize,
) -> LayerId {
    let in_c = b.shape(input)[0];
    let scales = redundant_scales(rng, filters, live);
    let w = conv_weights(rng, &scales, in_c, kernel);
    let mut attrs = ConvAttrs::square(in_c, filters, kernel);
    attrs.has_bias = false;
    b.conv_with(input, attrs, w, None)
}

/// Small concat network in which most filters are redundant: their weights
/// are four orders of magnitude below the live filters'. The convs differ in
/// how redundant they are:
///
/// | conv | filters | live |
/// |------|---------|------|
/// | 0    | 64      | 2    |
/// | 2    | 32      | 8    |
/// | 4    | 64      | 4    |
/// | 8    | 32      | 2    |
///
/// Live filters sit at shuffled indices. A 1x1 head with bias reads an
/// upsampled deep branch concatenated with the first conv's output.
pub fn redundant_toy(seed: u64) -> NetworkIR {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = NetworkBuilder::new("redundant-toy", [4, 12, 12], seed);
    let c0 = redundant_conv(&mut b, &mut rng, None, 64, 2, 3);
    let a0 = b.act(c0, ActivationFn::LeakyRelu);
    let c1 = redundant_conv(&mut b, &mut rng, Some(a0), 32, 8, 3);
    let a1 = b.act(c1, ActivationFn::LeakyRelu);
    let c2 = redundant_conv(&mut b, &mut rng, Some(a0), 64, 4, 1);
    let a2 = b.act(c2, ActivationFn::LeakyRelu);
    let cat = b.concat(&[a1, a2]);
    let pool = b.maxpool(cat, 2, 2, 0);
    let c3 = redundant_conv(&mut b, &mut rng, Some(pool), 32, 2, 3);
    let a3 = b.act(c3, ActivationFn::LeakyRelu);
    let up = b.upsample(a3, 2);
    let head_in = b.concat(&[up, a0]);
    let head_c = b.shape(Some(head_in))[0];
    let hw = conv_weights(&mut rng, &[1.0; 4], head_c, 1)
        .into_iter()
        .map(|x| x * 4.0)
        .collect();
    let head = b.conv_with(Some(head_in), ConvAttrs::square(head_c, 4, 1), hw, Some(vec![0.0; 4]));
    b.output(head);
    b.finish().expect("redundant toy is valid")
}

/// Two-conv network whose readout was fitted by least squares, so a hidden
/// filter's contribution to the output tracks its weight magnitude.
///
/// The hidden 3x3 conv has 16 filters with magnitudes spread geometrically
/// over [0.05, 1]. A teacher readout maps the ReLU features to 4 outputs;
/// the student's 1x1 readout and bias are then fitted to the teacher's
/// outputs on seeded data.
pub fn magnitude_toy(seed: u64) -> Result<NetworkIR> {
    const HIDDEN: usize = 16;
    const OUT: usize = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scales: Vec<f32> = (0..HIDDEN)
        .map(|i| 0.05f32 * (20.0f32).powf(i as f32 / (HIDDEN - 1) as f32))
        .collect();
    let mut order: Vec<usize> = (0..HIDDEN).collect();
    {
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
    }
    let scales: Vec<f32> = order.iter().map(|&i| scales[i] * 3.0).collect();
    let hidden_w = conv_weights(&mut rng, &scales, 3, 3);

    let build = |readout: Vec<f32>, bias: Vec<f32>| -> Result<NetworkIR> {
        let mut b = NetworkBuilder::new("magnitude-toy", [3, 8, 8], seed);
        let h = b.conv_with(None, ConvAttrs::square(3, HIDDEN, 3), hidden_w.clone(), None);
        let a = b.act(h, ActivationFn::Relu);
        let o = b.conv_with(Some(a), ConvAttrs::square(HIDDEN, OUT, 1), readout, Some(bias));
        b.output(o);
        b.finish()
    };

    let normal = Normal::new(0.0f32, 1.0).expect("unit normal");
    let teacher_readout: Vec<f32> = (0..OUT * HIDDEN)
        .map(|_| normal.sample(&mut rng) * 0.5 + 0.5)
        .collect();
    let teacher = build(teacher_readout, vec![0.0; OUT])?;
    let data = eval::calibration_batch(teacher.input_shape, 24, seed ^ 0x5eed);

    // Rows: one per (sample, pixel); columns: hidden features plus bias.
    let mut rows: Vec<f64> = Vec::new();
    let mut targets: Vec<Vec<f64>> = vec![Vec::new(); OUT];
    let hidden_id = 1;
    let out_id = teacher
        .output_ids()
        .first()
        .copied()
        .and_then(|o| teacher.layer(o).map(|l| l.inputs[0]))
        .ok_or_else(|| Error::Internal("magnitude toy has no output".into()))?;
    for x in &data {
        let acts = eval::forward(&teacher, x)?;
        let feat = &acts[&hidden_id];
        let out = &acts[&out_id];
        let hw = feat.shape()[1] * feat.shape()[2];
        for p in 0..hw {
            for c in 0..HIDDEN {
                rows.push(feat.data()[c * hw + p] as f64);
            }
            rows.push(1.0);
            for (o, t) in targets.iter_mut().enumerate() {
                t.push(out.data()[o * hw + p] as f64);
            }
        }
    }
    let n = rows.len() / (HIDDEN + 1);
    let design = DMatrix::from_row_slice(n, HIDDEN + 1, &rows);
    let svd = design.svd(true, true);
    let mut readout = vec![0.0f32; OUT * HIDDEN];
    let mut bias = vec![0.0f32; OUT];
    for (o, t) in targets.iter().enumerate() {
        let sol = svd
            .solve(&DVector::from_column_slice(t), 1e-10)
            .map_err(|e| Error::Internal(format!("least squares: {e}")))?;
        for c in 0..HIDDEN {
            readout[o * HIDDEN + c] = sol[c] as f32;
        }
        bias[o] = sol[HIDDEN] as f32;
    }
    build(readout, bias)
}

/// Identity 1x1 convolution weights for `channels` channels.
pub fn identity_kernel(channels: usize) -> TensorBuf {
    let mut t = TensorBuf::zeros(vec![channels, channels, 1, 1]);
    for c in 0..channels {
        t.data_mut()[c * channels + c] = 1.0;
    }
    t
}

/// Number of convolutions in a network (the connectivity graph's vertex count).
pub fn conv_count(ir: &NetworkIR) -> usize {
    ir.layers
        .iter()
        .filter(|l| matches!(l.kind, LayerKind::Conv2d(_)))
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_conv_counts() {
        let small = ZooOptions::small(0);
        assert_eq!(conv_count(&yolov7(small).unwrap()), 91);
        assert_eq!(conv_count(&yolov7_tiny(small).unwrap()), 57);
        assert_eq!(conv_count(&elan()), 7);
    }

    #[test]
    fn rejects_bad_resolution() {
        let opts = ZooOptions {
            input_hw: 100,
            ..ZooOptions::small(0)
        };
        assert!(yolov7_tiny(opts).is_err());
    }

    #[test]
    fn toys_are_valid() {
        redundant_toy(1).validate().unwrap();
        magnitude_toy(1).unwrap().validate().unwrap();
    }
}
