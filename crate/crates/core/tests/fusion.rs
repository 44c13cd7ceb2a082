mod common;

use catprune::prune::{fuse_bn, prune_after_fusion, prune_before_fusion, PruneRequest};
use catprune::prune::{Criterion, PruningPlan, SelectionMode};
use catprune::synth::{random_network, random_plan, SynthOptions};
use catprune::{zoo, Error, LayerKind, NetworkBuilder};

fn bn_count(ir: &catprune::NetworkIR) -> usize {
    ir.layers.iter().filter(|l| matches!(l.kind, LayerKind::BatchNorm2d { .. })).count()
}

#[test]
fn fused_matches_unfused_outputs() {
    let nets = [
        zoo::elan(),
        zoo::yolov7_tiny(zoo::ZooOptions::small(2)).unwrap(),
        random_network(3, &SynthOptions::default()),
    ];
    for ir in &nets {
        let fused = fuse_bn(ir).unwrap();
        assert_eq!(fused.layers.len(), ir.layers.len() - bn_count(ir));
        assert_eq!(bn_count(&fused), 0);
        assert_eq!(fused.conv_ids(), ir.conv_ids());
        let diff = common::max_output_diff(ir, &fused, &common::inputs(ir, 4, 1));
        assert!(diff <= 1e-5, "{}: {diff}", ir.name);
    }
}

#[test]
fn pruning_commutes_with_fusion() {
    for seed in 0..30 {
        let ir = random_network(seed, &SynthOptions::default());
        let req = PruneRequest::Plan(random_plan(&ir, seed + 100));
        let before = prune_before_fusion(&ir, &req, true).unwrap();
        let after = prune_after_fusion(&ir, &req).unwrap();
        assert_eq!(before.kept, after.kept);
        assert_eq!(before.graph, after.graph);
        assert_eq!(before.ir.layers.len(), after.ir.layers.len());
        for (a, b) in before.ir.layers.iter().zip(&after.ir.layers) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.inputs, b.inputs);
            assert_eq!(a.weights.keys().collect::<Vec<_>>(), b.weights.keys().collect::<Vec<_>>());
            for (name, t) in &a.weights {
                let d = t.max_abs_diff(&b.weights[name]).expect("same shape");
                assert!(d <= 1e-5, "seed {seed}: layer {} {name} differs by {d}", a.id);
            }
        }
        let diff = common::max_output_diff(&before.ir, &after.ir, &common::inputs(&ir, 2, seed));
        assert!(diff <= 1e-5);
    }
}

#[test]
fn empty_plan_in_both_orders_is_plain_fusion() {
    let ir = zoo::elan();
    let req = PruneRequest::Plan(PruningPlan::default());
    let fused = fuse_bn(&ir).unwrap();
    assert_eq!(prune_before_fusion(&ir, &req, true).unwrap().ir, fused);
    assert_eq!(prune_after_fusion(&ir, &req).unwrap().ir, fused);
    assert_eq!(prune_before_fusion(&ir, &req, false).unwrap().ir, ir);
}

#[test]
fn rate_requests_select_on_the_weights_each_order_sees() {
    let ir = zoo::elan();
    let req = PruneRequest::Rates {
        layers: vec![(0, 0.5), (4, 0.25)],
        criterion: Criterion::SmallestL2,
        mode: SelectionMode::Independent,
    };
    let before = prune_before_fusion(&ir, &req, true).unwrap();
    let after = prune_after_fusion(&ir, &req).unwrap();
    for p in [&before, &after] {
        assert_eq!(p.plan.removals[&0].len(), 16);
        assert_eq!(p.plan.removals[&4].len(), 16);
        assert_eq!(bn_count(&p.ir), 0);
    }
}

#[test]
fn batch_norm_on_shared_conv_output_is_rejected() {
    let mut b = NetworkBuilder::new("shared", [2, 6, 6], 0);
    let c = b.conv(None, 4, 3, 1, 1, false);
    let n = b.bn(c);
    let up = b.upsample(c, 2);
    let d = b.conv(Some(up), 2, 1, 1, 0, true);
    b.output(n);
    b.output(d);
    let ir = b.finish().unwrap();
    assert!(matches!(fuse_bn(&ir), Err(Error::OrphanBatchNorm(id)) if id == n));
}
