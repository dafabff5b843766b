mod common;

use std::io::Read;
use std::path::Path;

use stylefit::checkpoint::{load, save};
use stylefit::model::{Model, RngState};
use stylefit::style_rep::RepVariant;
use stylefit::Error;

fn model() -> Model<f64> {
    Model {
        styles: vec!["a".into(), "b".into(), "c".into()],
        senet: common::senet(1, 5, 4, 8, 3, RepVariant::Params),
        pooled: None,
        scanet: Some(common::scanet(2, 5, 4, 8)),
        rng: RngState { seed: 3, word_pos: 77 },
    }
}

fn entries(path: &Path) -> Vec<(String, Vec<u8>)> {
    let mut archive = tar::Archive::new(std::fs::File::open(path).unwrap());
    archive
        .entries()
        .unwrap()
        .map(|e| {
            let mut e = e.unwrap();
            let name = e.path().unwrap().to_string_lossy().into_owned();
            let mut data = Vec::new();
            e.read_to_end(&mut data).unwrap();
            (name, data)
        })
        .collect()
}

fn rewrite(path: &Path, entries: &[(String, Vec<u8>)]) {
    let mut b = tar::Builder::new(std::fs::File::create(path).unwrap());
    for (name, data) in entries {
        let mut h = tar::Header::new_gnu();
        h.set_size(data.len() as u64);
        h.set_mode(0o644);
        h.set_cksum();
        b.append_data(&mut h, name, data.as_slice()).unwrap();
    }
    b.finish().unwrap();
}

#[test]
fn double_precision_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let m = model();
    save(&m, &path).unwrap();
    let back: Model<f64> = load(&path).unwrap();
    let x = common::random_rows::<f64>(&mut common::rng(4), 3, 5, 1.0);
    let (a, b) = (m.senet.encode_outfit(&x).unwrap(), back.senet.encode_outfit(&x).unwrap());
    assert_eq!(a, b);
    let sa = m.scanet.as_ref().unwrap();
    let sb = back.scanet.as_ref().unwrap();
    assert_eq!(sa.encode_items(&x).unwrap(), sb.encode_items(&x).unwrap());
    assert_eq!(back.styles, m.styles);
    assert_eq!(back.rng, m.rng);
    let manifest = entries(&path).into_iter().find(|e| e.0 == "manifest.json").unwrap().1;
    let manifest: serde_json::Value = serde_json::from_slice(&manifest).unwrap();
    assert_eq!(manifest["version"], "1");
    assert_eq!(manifest["dtype"], "float64");
}

#[test]
fn saving_twice_gives_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("sub/b.ckpt"));
    save(&model(), &a).unwrap();
    save(&model(), &b).unwrap();
    assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
}

#[test]
fn corrupted_tensor_fails_checksum() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save(&model(), &path).unwrap();
    let mut es = entries(&path);
    let blob = es.iter_mut().find(|e| e.0.ends_with(".bin")).unwrap();
    blob.1[0] ^= 0xff;
    rewrite(&path, &es);
    match load::<f64>(&path) {
        Err(Error::Checkpoint(msg)) => assert!(msg.contains("checksum"), "{msg}"),
        other => panic!("expected checksum error, got {:?}", other.err()),
    }
}

#[test]
fn unsupported_version_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save(&model(), &path).unwrap();
    let mut es = entries(&path);
    let manifest = es.iter_mut().find(|e| e.0 == "manifest.json").unwrap();
    let mut v: serde_json::Value = serde_json::from_slice(&manifest.1).unwrap();
    v["version"] = "2".into();
    manifest.1 = serde_json::to_vec(&v).unwrap();
    rewrite(&path, &es);
    assert!(matches!(load::<f64>(&path), Err(Error::Version { found, .. }) if found == "2"));
}

#[test]
fn missing_tensor_and_garbage_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save(&model(), &path).unwrap();
    let es: Vec<_> = entries(&path)
        .into_iter()
        .filter(|e| e.0 != "senet/senet.pma.seed.bin")
        .collect();
    rewrite(&path, &es);
    match load::<f64>(&path) {
        Err(Error::Checkpoint(msg)) => assert!(msg.contains("missing blob"), "{msg}"),
        other => panic!("expected missing blob, got {:?}", other.err()),
    }
    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    assert!(matches!(load::<f64>(&junk), Err(Error::Checkpoint(_))));
    assert!(matches!(load::<f64>(dir.path().join("absent.ckpt")), Err(Error::Io { .. })));
}
