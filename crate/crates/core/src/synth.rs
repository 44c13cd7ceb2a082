//! Seeded random networks and plans for property tests.
//!
//! Generated networks mix conv blocks (with optional batch norm and
//! activation), nested and fan-out concatenations, max pooling and
//! upsampling. Every network contains a concat read by three branches:
//! directly by a conv, through a max pool and through an upsample. Each
//! dangling tensor gets a 1x1 conv head and an Output layer.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::builder::NetworkBuilder;
use crate::graph::build_graph;
use crate::ir::{ActivationFn, LayerId, NetworkIR};
use crate::prune::PruningPlan;
use crate::sensitivity::default_exclusions;

#[derive(Debug, Clone)]
pub struct SynthOptions {
    /// Upper bound on body convs; heads add one conv per path.
    pub max_body_convs: usize,
    pub max_channels: usize,
    pub batch_norm: bool,
    pub input_hw: usize,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            max_body_convs: 10,
            max_channels: 8,
            batch_norm: true,
            input_hw: 8,
        }
    }
}

struct Gen {
    b: NetworkBuilder,
    rng: ChaCha8Rng,
    opts: SynthOptions,
    /// Tensors that later layers may read, with a flag for "already read".
    open: Vec<(LayerId, bool)>,
    body_convs: usize,
}

const ACTIVATIONS: [ActivationFn; 4] = [
    ActivationFn::Relu,
    ActivationFn::LeakyRelu,
    ActivationFn::Silu,
    ActivationFn::Relu6,
];

impl Gen {
    fn hw(&self, id: LayerId) -> usize {
        self.b.shape(Some(id))[1]
    }

    /// Prefer tensors nobody reads yet, so few heads are needed.
    fn pick(&mut self) -> LayerId {
        let unread: Vec<usize> = (0..self.open.len()).filter(|&i| !self.open[i].1).collect();
        let i = if !unread.is_empty() && self.rng.random_bool(0.7) {
            *unread.choose(&mut self.rng).expect("non-empty")
        } else {
            self.rng.random_range(0..self.open.len())
        };
        self.open[i].1 = true;
        self.open[i].0
    }

    fn mark_read(&mut self, id: LayerId) {
        if let Some(e) = self.open.iter_mut().find(|e| e.0 == id) {
            e.1 = true;
        }
    }

    fn conv_block(&mut self, input: Option<LayerId>, stride_ok: bool) -> LayerId {
        let out = self.rng.random_range(2..=self.opts.max_channels);
        let hw = input.map_or(self.opts.input_hw, |i| self.hw(i));
        let k = if self.rng.random_bool(0.5) { 3 } else { 1 };
        let stride = if stride_ok && hw >= 4 && hw % 2 == 0 && self.rng.random_bool(0.2) {
            2
        } else {
            1
        };
        let bias = self.rng.random_bool(0.5);
        let mut id = self.b.conv(input, out, k, stride, k / 2, bias);
        self.body_convs += 1;
        if self.opts.batch_norm && self.rng.random_bool(0.5) {
            id = self.b.bn(id);
        }
        if self.rng.random_bool(0.7) {
            let f = *ACTIVATIONS.choose(&mut self.rng).expect("non-empty");
            id = self.b.act(id, f);
        }
        id
    }

    fn concat(&mut self) -> Option<LayerId> {
        let first = self.pick();
        let hw = self.hw(first);
        let same: Vec<LayerId> = self
            .open
            .iter()
            .map(|e| e.0)
            .filter(|&id| self.hw(id) == hw)
            .collect();
        let extra = self.rng.random_range(1..=2);
        let mut inputs = vec![first];
        for _ in 0..extra {
            // Repeats are allowed; they become parallel graph edges.
            let id = *same.choose(&mut self.rng).expect("contains first");
            self.mark_read(id);
            inputs.push(id);
        }
        let channels: usize = inputs.iter().map(|&i| self.b.shape(Some(i))[0]).sum();
        (channels <= 4 * self.opts.max_channels).then(|| self.b.concat(&inputs))
    }

    fn pool(&mut self, input: LayerId) -> LayerId {
        let hw = self.hw(input);
        if hw >= 4 && hw % 2 == 0 && self.rng.random_bool(0.5) {
            self.b.maxpool(input, 2, 2, 0)
        } else {
            self.b.maxpool(input, 3, 1, 1)
        }
    }

    /// Concat fanned out to a conv, a pool then conv, and an upsample then conv.
    fn motif(&mut self) {
        let a = self.pick();
        let hw = self.hw(a);
        let partner = self
            .open
            .iter()
            .map(|e| e.0)
            .filter(|&id| id != a && self.hw(id) == hw)
            .last()
            .unwrap_or(a);
        self.mark_read(partner);
        let cat = self.b.concat(&[a, partner]);
        let direct = self.conv_block(Some(cat), false);
        let pooled = self.pool(cat);
        let after_pool = self.conv_block(Some(pooled), false);
        let up = self.b.upsample(cat, 2);
        let after_up = self.conv_block(Some(up), false);
        for id in [direct, after_pool, after_up] {
            self.open.push((id, false));
        }
    }

    fn step(&mut self) {
        let roll = self.rng.random_range(0..10);
        let id = match roll {
            0..=4 => {
                let input = self.pick();
                Some(self.conv_block(Some(input), true))
            }
            5..=6 => self.concat(),
            7 => {
                let input = self.pick();
                Some(self.pool(input))
            }
            _ => {
                let input = self.pick();
                (self.hw(input) <= 8).then(|| self.b.upsample(input, 2))
            }
        };
        if let Some(id) = id {
            self.open.push((id, false));
        }
    }
}

/// A random valid network. Equal seeds give equal networks.
pub fn random_network(seed: u64, opts: &SynthOptions) -> NetworkIR {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = rng.random_range(1..=4);
    let b = NetworkBuilder::new(&format!("synth-{seed}"), [c, opts.input_hw, opts.input_hw], seed);
    let mut g = Gen {
        b,
        rng,
        opts: opts.clone(),
        open: Vec::new(),
        body_convs: 0,
    };
    let stem = g.conv_block(None, false);
    g.open.push((stem, false));
    if g.rng.random_bool(0.5) {
        // A second reader of the network input.
        let other = g.conv_block(None, false);
        g.open.push((other, false));
    }
    let budget = opts.max_body_convs.saturating_sub(3).max(g.body_convs + 1);
    let motif_at = g.rng.random_range(0..4);
    let mut steps = 0;
    let mut placed = false;
    while g.body_convs < budget && steps < 40 {
        if !placed && steps >= motif_at {
            g.motif();
            placed = true;
        } else {
            g.step();
        }
        steps += 1;
    }
    if !placed {
        g.motif();
    }
    let dangling: Vec<LayerId> = g.open.iter().filter(|e| !e.1).map(|e| e.0).collect();
    for id in dangling {
        let head = g.b.conv(Some(id), 2, 1, 1, 0, true);
        g.b.output(head);
    }
    g.b.finish().expect("generated network is valid")
}

/// A random plan over the convs that do not feed an Output layer directly.
/// Each such conv is pruned with probability one half, losing between one
/// filter and all but one.
pub fn random_plan(ir: &NetworkIR, seed: u64) -> PruningPlan {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let graph = build_graph(ir).expect("valid network");
    let excluded = default_exclusions(ir);
    let mut plan = PruningPlan::default();
    for v in graph.vertices() {
        let n = graph.vertex(v).expect("vertex").out_channels;
        if excluded.contains(&v) || n < 2 || !rng.random_bool(0.5) {
            continue;
        }
        let k = rng.random_range(1..n);
        let mut filters: Vec<usize> = rand::seq::index::sample(&mut rng, n, k).into_vec();
        filters.sort_unstable();
        plan.removals.insert(v, filters);
    }
    plan
}

/// Longest number of convs on any path through the network.
pub fn conv_depth(ir: &NetworkIR) -> usize {
    let mut depth: Vec<usize> = Vec::with_capacity(ir.layers.len());
    let mut best = 0;
    for layer in &ir.layers {
        let upstream = layer
            .inputs
            .iter()
            .map(|&i| depth[ir.position(i).expect("valid input")])
            .max()
            .unwrap_or(0);
        let d = upstream + usize::from(layer.is_conv());
        best = best.max(d);
        depth.push(d);
    }
    best
}
