mod common;

use std::collections::BTreeSet;

use catprune::graph::{build_graph, export_dot, AffectedLayer, Edge};
use catprune::synth::{random_network, SynthOptions};
use catprune::{zoo, NetworkBuilder};

#[test]
fn elan_edges_and_offsets() {
    let g = build_graph(&zoo::elan()).unwrap();
    assert_eq!(g.vertex_count(), 7);
    assert!(g.edges().contains(&Edge { src: 4, dst: 5, slice_index: 0 }));
    assert!(g.edges().contains(&Edge { src: 4, dst: 7, slice_index: 1 }));
    assert_eq!(g.slice_sizes(7), Some(&[64, 64, 64, 64][..]));
    assert_eq!(
        g.affected_layers(4).unwrap(),
        vec![
            AffectedLayer { dst: 5, slice_index: 0, slice_offset: 0 },
            AffectedLayer { dst: 7, slice_index: 1, slice_offset: 64 },
        ]
    );
    assert!(g.affected_layers(7).unwrap().is_empty());
}

#[test]
fn chain_has_one_unsliced_edge() {
    let mut b = NetworkBuilder::new("chain", [3, 8, 8], 0);
    let c0 = b.conv(None, 8, 3, 1, 1, false);
    let c1 = b.conv(Some(c0), 4, 3, 1, 1, false);
    let ir = b.finish().unwrap();
    let g = build_graph(&ir).unwrap();
    assert_eq!(g.edges(), &[Edge { src: c0, dst: c1, slice_index: 0 }]);
    assert_eq!(g.slice_sizes(c1), None);
    assert_eq!(
        g.affected_layers(c0).unwrap(),
        vec![AffectedLayer { dst: c1, slice_index: 0, slice_offset: 0 }]
    );
}

#[test]
fn dot_of_three_conv_chain() {
    let mut b = NetworkBuilder::new("chain", [3, 8, 8], 0);
    let c0 = b.conv(None, 8, 3, 1, 1, false);
    let c1 = b.conv(Some(c0), 4, 3, 1, 1, false);
    b.conv(Some(c1), 2, 1, 1, 0, false);
    let dot = export_dot(&build_graph(&b.finish().unwrap()).unwrap());
    assert_eq!(dot.matches("->").count(), 2);
    assert!(dot.contains("0 -> 1 [label=\"0\"]"));
    assert!(dot.contains("1 -> 2 [label=\"0\"]"));
}

#[test]
fn dot_of_elan() {
    let dot = export_dot(&build_graph(&zoo::elan()).unwrap());
    assert!(dot.starts_with("digraph {"));
    assert!(dot.contains("4 -> 7 [label=\"1\"]"));
    assert_eq!(dot.matches("label=\"").count() - dot.matches("->").count(), 7);
}

#[test]
fn kernel_columns_match_channel_provenance() {
    let opts = SynthOptions::default();
    for seed in 0..120 {
        let ir = random_network(seed, &opts);
        let g = build_graph(&ir).unwrap();
        assert_eq!(g, build_graph(&ir).unwrap());
        assert_eq!(g.vertices().collect::<Vec<_>>(), ir.conv_ids());
        for x in g.vertices() {
            let n = g.vertex(x).unwrap().out_channels;
            let all: Vec<usize> = (0..n).collect();
            assert_eq!(
                g.kernel_columns(x, &all).unwrap(),
                common::columns_reading(&ir, x, &all),
                "seed {seed}, conv {x}"
            );
            let last = [n - 1];
            assert_eq!(g.kernel_columns(x, &last).unwrap(), common::columns_reading(&ir, x, &last));

            let oracle: BTreeSet<_> = common::columns_reading(&ir, x, &[0]).into_iter().map(|(y, _)| y).collect();
            let affected: BTreeSet<_> = g.affected_layers(x).unwrap().into_iter().map(|a| a.dst).collect();
            assert_eq!(affected, oracle, "seed {seed}, conv {x}");

            for a in g.affected_layers(x).unwrap() {
                let in_c = g.vertex(a.dst).unwrap().in_channels;
                let size = g.slice_sizes(a.dst).map_or(in_c, |s| s[a.slice_index]);
                assert!(a.slice_offset + size <= in_c);
            }
        }
        for y in g.vertices() {
            if let Some(sizes) = g.slice_sizes(y) {
                assert_eq!(sizes.iter().sum::<usize>(), g.vertex(y).unwrap().in_channels);
            }
        }
    }
}

/// Perturbing one filter of `x` changes the inputs of exactly the convs the
/// graph lists, at the listed columns, plus convs further downstream.
#[test]
fn perturbation_reaches_affected_columns() {
    use catprune::eval::forward;

    let opts = SynthOptions::default();
    for seed in 0..25 {
        let ir = random_network(seed, &opts);
        let g = build_graph(&ir).unwrap();
        let x_in = &common::inputs(&ir, 1, seed)[0];
        let base = forward(&ir, x_in).unwrap();
        for x in g.vertices() {
            let mut bumped = ir.clone();
            let layer = bumped.layer_mut(x).unwrap();
            let w = layer.weights.get_mut("weight").unwrap();
            let row = w.row_len();
            for v in &mut w.data_mut()[..row] {
                *v += 10.0;
            }
            let acts = forward(&bumped, x_in).unwrap();

            let direct = g.kernel_columns(x, &[0]).unwrap();
            // Convs reached through at least one other conv.
            let mut indirect: BTreeSet<_> = BTreeSet::new();
            for e in g.edges() {
                if indirect.contains(&e.src) || (e.src != x && direct.iter().any(|(y, _)| *y == e.src)) {
                    indirect.insert(e.dst);
                }
            }
            let mut exact = 0;
            for layer in ir.layers.iter().filter(|l| l.is_conv()) {
                let Some(&src) = layer.inputs.first() else { continue };
                let (a, b) = (&base[&src], &acts[&src]);
                let hw = a.shape()[1] * a.shape()[2];
                let changed: Vec<usize> = (0..a.shape()[0])
                    .filter(|&c| a.data()[c * hw..(c + 1) * hw] != b.data()[c * hw..(c + 1) * hw])
                    .collect();
                if indirect.contains(&layer.id) {
                    continue;
                }
                match direct.iter().find(|(y, _)| *y == layer.id) {
                    Some((_, cols)) => {
                        // A ReLU can hide the bump, so only inclusion is required.
                        assert!(changed.iter().all(|c| cols.contains(c)), "seed {seed}: conv {}", layer.id);
                        exact += usize::from(&changed == cols);
                    }
                    None => assert!(changed.is_empty(), "seed {seed}: conv {} changed", layer.id),
                }
            }
            if !direct.is_empty() && direct.iter().all(|(y, _)| !indirect.contains(y)) {
                assert!(exact > 0, "seed {seed}: bump of conv {x} invisible");
            }
        }
    }
}

#[test]
fn bundled_vertex_counts() {
    let tiny = zoo::yolov7_tiny(zoo::ZooOptions::default()).unwrap();
    assert_eq!(build_graph(&tiny).unwrap().vertex_count(), 57);
    let full = zoo::yolov7(zoo::ZooOptions::default()).unwrap();
    assert_eq!(build_graph(&full).unwrap().vertex_count(), 91);
}
