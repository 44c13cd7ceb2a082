use catprune::io::{load_tensor_batch, save_tensor_batch};
use catprune::synth::{random_network, random_plan, SynthOptions};
use catprune::{apply_plan, build_graph, load_model, save_model, zoo, Error, NetworkBuilder, NetworkIR};

fn chain() -> NetworkIR {
    let mut b = NetworkBuilder::new("chain", [3, 16, 16], 1);
    let c0 = b.conv(None, 8, 3, 1, 1, true);
    b.conv(Some(c0), 4, 3, 1, 1, true);
    b.finish().unwrap()
}

#[test]
fn chain_round_trip_keeps_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
    let ir = chain();
    save_model(&ir, &a).unwrap();
    let back = load_model(&a).unwrap();
    assert_eq!(back, ir);
    assert_eq!(back.layers.len(), 2);
    save_model(&back, &b).unwrap();
    let manifest = |p: &std::path::Path| std::fs::read_to_string(p).unwrap().replace("b.bin", "a.bin");
    assert_eq!(manifest(&a), manifest(&b));
    assert_eq!(std::fs::read(dir.path().join("a.bin")).unwrap(), std::fs::read(dir.path().join("b.bin")).unwrap());
    // 8*3*9 + 8 + 4*8*9 + 4 floats.
    assert_eq!(std::fs::metadata(dir.path().join("a.bin")).unwrap().len(), 4 * (216 + 8 + 288 + 4));
}

#[test]
fn pruned_model_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    for seed in 0..10 {
        let ir = random_network(seed, &SynthOptions::default());
        let pruned = apply_plan(&ir, &build_graph(&ir).unwrap(), &random_plan(&ir, seed)).unwrap();
        let path = dir.path().join(format!("p{seed}.json"));
        save_model(&pruned.ir, &path).unwrap();
        assert_eq!(load_model(&path).unwrap(), pruned.ir);
    }
    let tiny = zoo::yolov7_tiny(zoo::ZooOptions::small(0)).unwrap();
    save_model(&tiny, dir.path().join("tiny.json")).unwrap();
    assert_eq!(load_model(dir.path().join("tiny.json")).unwrap(), tiny);
}

#[test]
fn wrong_in_channels_names_the_layer() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    save_model(&chain(), &path).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    v["layers"][1]["attrs"]["in_channels"] = 7.into();
    std::fs::write(&path, serde_json::to_string(&v).unwrap()).unwrap();
    match load_model(&path) {
        Err(Error::Shape { layer: Some(1), .. }) => {}
        other => panic!("expected a shape error at layer 1, got {other:?}"),
    }
}

#[test]
fn unwritable_path_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("missing").join("m.json");
    assert!(matches!(save_model(&chain(), &path), Err(Error::Io { .. })));
    assert!(matches!(load_model(&path), Err(Error::Io { .. })));
}

#[test]
fn truncated_blob_is_a_parse_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    save_model(&chain(), &path).unwrap();
    let bin = dir.path().join("m.bin");
    let bytes = std::fs::read(&bin).unwrap();
    std::fs::write(&bin, &bytes[..bytes.len() - 4]).unwrap();
    assert!(matches!(load_model(&path), Err(Error::Parse(_))));
}

#[test]
fn tensor_batches_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("batch.json");
    let batch = catprune::eval::calibration_batch([3, 5, 4], 3, 2);
    save_tensor_batch(&batch, &path).unwrap();
    assert_eq!(load_tensor_batch(&path).unwrap(), batch);
}
