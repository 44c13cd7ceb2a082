//! Layer connectivity graph.
//!
//! Vertices are convolutions. An edge `(x, y, w)` says that the output of
//! conv `x` reaches conv `y` through non-convolutional layers only, arriving
//! in slice `w` of the (possibly concatenated) input of `y`. Slice 0 is also
//! used when no concatenation is crossed. For every conv fed by a
//! concatenation the vertex stores the ordered channel counts of the slices,
//! so the channel offset of slice `w` is the sum of the sizes before it.
//!
//! Nested concatenations are flattened into one slice list, and max-pool,
//! upsample, batch norm and activation layers are transparent: they forward
//! channels one-to-one.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::ir::{LayerId, LayerKind, NetworkIR};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Edge {
    pub src: LayerId,
    pub dst: LayerId,
    pub slice_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VertexInfo {
    pub in_channels: usize,
    pub out_channels: usize,
}

/// One consumer of a pruned conv, as returned by
/// [`ConnectivityGraph::affected_layers`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AffectedLayer {
    pub dst: LayerId,
    pub slice_index: usize,
    /// Input channel of `dst` where the slice starts.
    pub slice_offset: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ConnectivityGraph {
    vertices: BTreeMap<LayerId, VertexInfo>,
    edges: Vec<Edge>,
    slice_sizes: BTreeMap<LayerId, Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Producer {
    Conv(LayerId),
    NetworkInput,
}

#[derive(Debug, Clone, Copy)]
struct Slice {
    producer: Producer,
    channels: usize,
}

/// Build the connectivity graph of a validated network.
pub fn build_graph(ir: &NetworkIR) -> Result<ConnectivityGraph> {
    let mut memo: HashMap<LayerId, Vec<Slice>> = HashMap::new();
    let mut graph = ConnectivityGraph::default();

    for layer in &ir.layers {
        let slices: Vec<Slice> = match &layer.kind {
            LayerKind::Conv2d(a) => vec![Slice {
                producer: Producer::Conv(layer.id),
                channels: a.out_channels,
            }],
            LayerKind::Concat => layer
                .inputs
                .iter()
                .flat_map(|src| memo[src].iter().copied())
                .collect(),
            _ => match layer.inputs.first() {
                Some(src) => memo[src].clone(),
                None => vec![Slice {
                    producer: Producer::NetworkInput,
                    channels: ir.input_shape[0],
                }],
            },
        };
        memo.insert(layer.id, slices);

        let LayerKind::Conv2d(attrs) = &layer.kind else {
            continue;
        };
        graph.vertices.insert(
            layer.id,
            VertexInfo {
                in_channels: attrs.in_channels,
                out_channels: attrs.out_channels,
            },
        );
        let incoming: Vec<Slice> = match layer.inputs.first() {
            Some(src) => memo[src].clone(),
            None => vec![Slice {
                producer: Producer::NetworkInput,
                channels: ir.input_shape[0],
            }],
        };
        let total: usize = incoming.iter().map(|s| s.channels).sum();
        if total != attrs.in_channels {
            return Err(Error::Graph(format!(
                "conv {} expects {} input channels but its slices carry {total}",
                layer.id, attrs.in_channels
            )));
        }
        for (w, slice) in incoming.iter().enumerate() {
            if let Producer::Conv(x) = slice.producer {
                graph.edges.push(Edge {
                    src: x,
                    dst: layer.id,
                    slice_index: w,
                });
            }
        }
        if incoming.len() > 1 {
            graph
                .slice_sizes
                .insert(layer.id, incoming.iter().map(|s| s.channels).collect());
        }
    }
    graph.edges.sort();
    Ok(graph)
}

impl ConnectivityGraph {
    pub fn vertices(&self) -> impl Iterator<Item = LayerId> + '_ {
        self.vertices.keys().copied()
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn contains(&self, id: LayerId) -> bool {
        self.vertices.contains_key(&id)
    }

    pub fn vertex(&self, id: LayerId) -> Option<&VertexInfo> {
        self.vertices.get(&id)
    }

    /// Edges sorted by `(src, dst, slice_index)`.
    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn slice_sizes(&self, id: LayerId) -> Option<&[usize]> {
        self.slice_sizes.get(&id).map(Vec::as_slice)
    }

    /// Edges entering `dst`, ordered by source then slice.
    pub fn incoming(&self, dst: LayerId) -> impl Iterator<Item = &Edge> + '_ {
        self.edges.iter().filter(move |e| e.dst == dst)
    }

    /// Channel offset at which slice `slice_index` starts in the input of `dst`.
    pub fn slice_offset(&self, dst: LayerId, slice_index: usize) -> Result<usize> {
        match self.slice_sizes.get(&dst) {
            Some(sizes) if slice_index < sizes.len() => Ok(sizes[..slice_index].iter().sum()),
            Some(sizes) => Err(Error::Graph(format!(
                "conv {dst} has {} slices, slice {slice_index} requested",
                sizes.len()
            ))),
            None if slice_index == 0 => Ok(0),
            None => Err(Error::Graph(format!(
                "conv {dst} has no slice sizes but slice {slice_index} requested"
            ))),
        }
    }

    /// Convs whose kernels must shrink when filters of `x` are removed,
    /// in ascending `dst` order.
    pub fn affected_layers(&self, x: LayerId) -> Result<Vec<AffectedLayer>> {
        if !self.contains(x) {
            return Err(Error::UnknownVertex(x));
        }
        let mut out = Vec::new();
        for e in self.edges.iter().filter(|e| e.src == x) {
            out.push(AffectedLayer {
                dst: e.dst,
                slice_index: e.slice_index,
                slice_offset: self.slice_offset(e.dst, e.slice_index)?,
            });
        }
        out.sort_by_key(|a| (a.dst, a.slice_index));
        Ok(out)
    }

    /// Input-channel indices of every consumer that correspond to the given
    /// filters of `x`. Indices are relative to the unpruned consumer.
    pub fn kernel_columns(&self, x: LayerId, filters: &[usize]) -> Result<Vec<(LayerId, Vec<usize>)>> {
        let mut by_dst: BTreeMap<LayerId, Vec<usize>> = BTreeMap::new();
        for a in self.affected_layers(x)? {
            by_dst
                .entry(a.dst)
                .or_default()
                .extend(filters.iter().map(|&f| a.slice_offset + f));
        }
        Ok(by_dst
            .into_iter()
            .map(|(dst, mut cols)| {
                cols.sort_unstable();
                cols.dedup();
                (dst, cols)
            })
            .collect())
    }

    /// The graph of the network obtained by removing `removals[x]` filters
    /// from each conv `x`. Topology is unchanged; channel counts and slice
    /// sizes shrink.
    pub fn after_removal(&self, removals: &BTreeMap<LayerId, Vec<usize>>) -> Result<ConnectivityGraph> {
        let mut next = self.clone();
        for (&x, filters) in removals {
            let n = filters.len();
            let v = next.vertices.get_mut(&x).ok_or(Error::UnknownVertex(x))?;
            v.out_channels -= n;
            for e in self.edges.iter().filter(|e| e.src == x) {
                next.vertices.get_mut(&e.dst).expect("edge endpoint").in_channels -= n;
                if let Some(sizes) = next.slice_sizes.get_mut(&e.dst) {
                    sizes[e.slice_index] -= n;
                }
            }
        }
        Ok(next)
    }

    /// Graphviz rendering. Nodes show the layer id and filter count, edges
    /// their slice index.
    pub fn to_dot(&self) -> String {
        export_dot(self)
    }
}

pub fn export_dot(g: &ConnectivityGraph) -> String {
    if g.vertices.is_empty() {
        return "digraph {}\n".to_string();
    }
    let mut s = String::from("digraph {\n    node [shape=box];\n");
    for (id, info) in &g.vertices {
        let _ = write!(s, "    {id} [label=\"{id}\\nout={}", info.out_channels);
        if let Some(sizes) = g.slice_sizes.get(id) {
            let sizes: Vec<String> = sizes.iter().map(ToString::to_string).collect();
            let _ = write!(s, "\\nslices={}", sizes.join(","));
        }
        s.push_str("\"];\n");
    }
    for e in &g.edges {
        let _ = writeln!(s, "    {} -> {} [label=\"{}\"];", e.src, e.dst, e.slice_index);
    }
    s.push_str("}\n");
    s
}
