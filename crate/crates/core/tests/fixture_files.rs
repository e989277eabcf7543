//! Fixture directories written byte-by-byte the way an external exporter
//! would, without going through `save_fixture`.

use std::fs;
use std::path::Path;

use serde_json::json;
use zsattr_core::data::{assemble_batches, load_annotations};
use zsattr_core::fixtures::load_fixture;
use zsattr_core::hierarchy::AttributeHierarchy;
use zsattr_core::model::{InstanceInput, Model, ModelConfig};
use zsattr_core::Error;

const D_Q: usize = 4;
const D_V: usize = 3;
const HW: usize = 4;
const N_Z: usize = 2;

fn write_array(dir: &Path, entries: &mut Vec<serde_json::Value>, name: &str, shape: &[usize], seed: f32) {
    let file = format!("{}.bin", name.replace('/', "__"));
    let n: usize = shape.iter().product();
    let mut bytes = Vec::with_capacity(4 * n);
    for k in 0..n {
        let v = seed + 0.125 * k as f32 - 0.5;
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(dir.join(&file), bytes).unwrap();
    entries.push(json!({
        "name": name, "dtype": "f32", "shape": shape, "file": file, "byte_order": "little"
    }));
}

/// Three instances, two super-classes (one of them `other`), three objects.
fn exporter_dir(dir: &Path) {
    let mut entries = Vec::new();
    write_array(dir, &mut entries, "attr_text_emb", &[3, D_Q], 0.1);
    write_array(dir, &mut entries, "super_text_emb", &[2, D_Q], 0.2);
    write_array(dir, &mut entries, "obj_text_emb", &[3, D_Q], 0.3);
    for (k, id) in ["7", "8", "9"].iter().enumerate() {
        let s = k as f32;
        write_array(dir, &mut entries, &format!("f_img/{id}"), &[HW, D_V], s);
        write_array(dir, &mut entries, &format!("f_crop/{id}"), &[HW, D_V], s + 0.5);
        write_array(dir, &mut entries, &format!("z_hat/{id}"), &[N_Z, D_Q], s - 0.5);
        // second row belongs to `other` and is all zero
        let file = format!("mask_{id}.bin");
        let mut bytes = Vec::new();
        for v in [1.0f32, -1.0, 0.5, 0.25, 0.0, 0.0, 0.0, 0.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(dir.join(&file), bytes).unwrap();
        entries.push(json!({
            "name": format!("mask_token_feats/{id}"), "dtype": "f32", "shape": [2, D_Q],
            "file": file, "byte_order": "little"
        }));
    }
    let manifest = json!({
        "format": "zsattr-fixture",
        "version": 1,
        "dims": {"d_q": D_Q, "d_v": D_V, "h": 2, "w": 2, "n_z": N_Z},
        "entries": entries,
        "metadata": {"qformer_layer": "final"}
    });
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest).unwrap()).unwrap();
}

fn hierarchy() -> AttributeHierarchy {
    AttributeHierarchy::new(
        vec!["red".into(), "wet".into(), "round".into()],
        vec!["color".into(), "other".into()],
        vec![0, 1, 0],
        vec!["ball".into(), "cup".into(), "dog".into()],
    )
    .unwrap()
}

#[test]
fn exporter_directory_loads_with_all_arrays() {
    let dir = tempfile::tempdir().unwrap();
    exporter_dir(dir.path());
    let fx = load_fixture(dir.path()).unwrap();
    fx.validate_against(&hierarchy()).unwrap();
    assert_eq!(fx.instances.len(), 3);
    assert_eq!(fx.attr_text_emb.get2(0, 1), f64::from(0.1f32 + 0.125 - 0.5));
    let inst = fx.instance("8").unwrap();
    assert_eq!(inst.f_crop.shape(), &[HW, D_V]);
    assert_eq!(inst.mask_token_feats.row(1), &[0.0; D_Q]);
    assert_eq!(fx.metadata["qformer_layer"], json!("final"));
}

#[test]
fn declared_shape_must_match_payload() {
    let dir = tempfile::tempdir().unwrap();
    exporter_dir(dir.path());
    let path = dir.path().join("manifest.json");
    let mut m: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    // claim [2,3] for a payload of a different size
    m["entries"][0]["shape"] = json!([2, 3]);
    fs::write(&path, m.to_string()).unwrap();
    match load_fixture(dir.path()) {
        Err(Error::Fixture { array, .. }) => assert_eq!(array, "attr_text_emb"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn five_floats_cannot_fill_two_by_three() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("x.bin"), [0u8; 20]).unwrap();
    let manifest = json!({
        "format": "zsattr-fixture", "version": 1,
        "entries": [{"name": "x", "dtype": "f32", "shape": [2, 3], "file": "x.bin", "byte_order": "little"}]
    });
    fs::write(dir.path().join("manifest.json"), manifest.to_string()).unwrap();
    let err = zsattr_core::fixtures::ArrayBundle::read(dir.path()).unwrap_err();
    assert!(matches!(err, Error::Fixture { ref array, .. } if array == "x"), "{err}");
}

#[test]
fn missing_payload_and_wrong_dtype_name_the_array() {
    let dir = tempfile::tempdir().unwrap();
    exporter_dir(dir.path());
    fs::remove_file(dir.path().join("z_hat__9.bin")).unwrap();
    match load_fixture(dir.path()) {
        Err(Error::Fixture { array, .. }) => assert_eq!(array, "z_hat/9"),
        other => panic!("unexpected {other:?}"),
    }
    let dir = tempfile::tempdir().unwrap();
    exporter_dir(dir.path());
    let path = dir.path().join("manifest.json");
    let mut m: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    m["entries"][1]["dtype"] = json!("f16");
    fs::write(&path, m.to_string()).unwrap();
    match load_fixture(dir.path()) {
        Err(Error::Fixture { array, reason }) => {
            assert_eq!(array, "super_text_emb");
            assert!(reason.contains("dtype"));
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn loading_leaves_files_untouched_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    exporter_dir(dir.path());
    let before = fs::read(dir.path().join("manifest.json")).unwrap();
    let a = load_fixture(dir.path()).unwrap();
    let b = std::thread::scope(|s| s.spawn(|| load_fixture(dir.path()).unwrap()).join().unwrap());
    assert_eq!(a, b);
    assert_eq!(before, fs::read(dir.path().join("manifest.json")).unwrap());
}

fn annotations(dir: &Path) -> std::path::PathBuf {
    let lines = [
        json!({"instance_id": "7", "image_id": "a", "image_height": 4, "image_width": 4,
               "box": [0.0, 0.0, 4.0, 4.0], "mask": {"height": 4, "width": 4, "counts": [0, 16]},
               "object": "ball", "positive_attributes": ["red"], "negative_attributes": ["wet"]}),
        json!({"instance_id": "8", "image_id": "a", "image_height": 4, "image_width": 4,
               "box": [0.0, 0.0, 2.0, 2.0], "mask": {"height": 4, "width": 4, "counts": [0, 2, 2, 2, 10]},
               "object": "cup", "positive_attributes": [], "negative_attributes": []}),
        json!({"instance_id": "9", "image_id": "b", "image_height": 4, "image_width": 4,
               "box": [1.0, 1.0, 2.0, 2.0], "mask": {"height": 4, "width": 4, "counts": [16]},
               "object": "dog", "positive_attributes": ["round", "wet"], "negative_attributes": ["red"]}),
    ];
    let path = dir.join("annotations.jsonl");
    fs::write(&path, lines.iter().map(|l| l.to_string() + "\n").collect::<String>()).unwrap();
    path
}

#[test]
fn annotations_resolve_and_batch_against_fixture() {
    let dir = tempfile::tempdir().unwrap();
    exporter_dir(dir.path());
    let fx = load_fixture(dir.path()).unwrap();
    let h = hierarchy();
    let examples = load_annotations(&annotations(dir.path()), &h).unwrap();
    assert_eq!(examples.len(), 3);
    assert_eq!(examples[0].labels.values(), &[1, 0, -1]);
    assert_eq!(examples[1].labels.values(), &[-1, -1, -1]);
    assert_eq!(examples[2].labels.values(), &[0, 1, 1]);
    assert_eq!(examples[2].object_index, 2);

    let singles = assemble_batches(&examples, &fx, 1, None).unwrap();
    assert_eq!(singles.len(), 3);
    let ids: Vec<_> = singles.iter().map(|b| b.items[0].example.instance.instance_id.as_str()).collect();
    assert_eq!(ids, ["7", "8", "9"]);
    let a = assemble_batches(&examples, &fx, 2, Some(7)).unwrap();
    let b = assemble_batches(&examples, &fx, 2, Some(7)).unwrap();
    let order = |bs: &[zsattr_core::data::Batch]| -> Vec<String> {
        bs.iter().flat_map(|b| b.items.iter().map(|i| i.example.instance.instance_id.clone())).collect()
    };
    assert_eq!(order(&a), order(&b));

    // the model consumes the exporter fixture directly
    let cfg = ModelConfig {
        d: 4,
        d_ff: 8,
        ..ModelConfig::default()
    };
    let model = Model::new(cfg, fx.dims, 0).unwrap();
    for item in &singles {
        let out = model.infer(&fx, h.delta(), &InstanceInput::from(&item.items[0])).unwrap();
        assert_eq!(out.c_bar.len(), 3);
    }
}

#[test]
fn unknown_attribute_names_are_listed() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.jsonl");
    let rec = |id: &str, pos: &str| {
        json!({"instance_id": id, "image_id": "a", "image_height": 2, "image_width": 2,
               "box": [0.0, 0.0, 1.0, 1.0], "mask": {"height": 2, "width": 2, "counts": [4]},
               "object": "ball", "positive_attributes": [pos], "negative_attributes": []})
        .to_string()
    };
    fs::write(&path, format!("{}\n{}\n", rec("1", "shiny"), rec("2", "fuzzy"))).unwrap();
    match load_annotations(&path, &hierarchy()) {
        Err(Error::UnknownAttributes(names)) => {
            assert!(names.contains(&"shiny".to_string()) && names.contains(&"fuzzy".to_string()))
        }
        other => panic!("unexpected {other:?}"),
    }
    fs::write(&path, format!("{}\n{{not json\n", rec("1", "red"))).unwrap();
    match load_annotations(&path, &hierarchy()) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
        other => panic!("unexpected {other:?}"),
    }
}
