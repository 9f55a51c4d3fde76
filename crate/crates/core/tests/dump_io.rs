mod oracle;

use std::fs;
use std::io::{Seek, SeekFrom, Write};
use std::path::Path;

use mmdyn_core::contextualization::{similarity_curve, CurveKind};
use mmdyn_core::dump_io::{
    generate_synthetic_dump, load_tensor, read_manifest, synthesize, validate_dump, SynthSpec,
    TensorRef, ValidatedDump, MANIFEST_FILE,
};
use mmdyn_core::{Error, Tensor};
use serde_json::Value;
use tempfile::TempDir;

fn written_random_dump(layers: usize, t: usize, heads: usize, head_dim: usize) -> TempDir {
    let dir = TempDir::new().unwrap();
    let mut r = oracle::rng(5);
    oracle::random_dump(&mut r, layers, t, heads, head_dim, t / 2, 12)
        .write(dir.path())
        .unwrap();
    dir
}

fn edit_manifest(dir: &Path, edit: impl FnOnce(&mut Value)) {
    let path = dir.join(MANIFEST_FILE);
    let mut v: Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    edit(&mut v);
    fs::write(&path, serde_json::to_string_pretty(&v).unwrap()).unwrap();
}

fn patch(dir: &Path, tensor: &TensorRef, index: usize, value: f32) {
    let mut f = fs::OpenOptions::new()
        .write(true)
        .open(dir.join(&tensor.path))
        .unwrap();
    f.seek(SeekFrom::Start(tensor.offset_bytes + 4 * index as u64))
        .unwrap();
    f.write_all(&value.to_le_bytes()).unwrap();
}

fn schema_key(err: Error) -> String {
    match err {
        Error::SchemaViolation { key, .. } => key,
        other => panic!("expected SchemaViolation, got {other:?}"),
    }
}

#[test]
fn well_formed_manifest_has_l_plus_one_hidden_refs() {
    let dir = written_random_dump(4, 8, 2, 8);
    let m = read_manifest(dir.path()).unwrap();
    assert_eq!((m.num_layers, m.num_tokens, m.hidden_size), (4, 8, 16));
    assert_eq!(m.layers.len(), 5);
    assert!(m.layers.iter().all(|l| l.hidden.shape == [8, 16]));
    assert!(m.layers[0].attention().is_none());
    assert!(m.layers[1..].iter().all(|l| l.attention().is_some()));
    // the manifest file itself is accepted too
    assert_eq!(
        read_manifest(dir.path().join(MANIFEST_FILE))
            .unwrap()
            .layers
            .len(),
        5
    );
}

#[test]
fn f16_dtype_is_unsupported() {
    let dir = written_random_dump(1, 4, 1, 4);
    edit_manifest(dir.path(), |v| v["dtype"] = "f16le".into());
    assert!(matches!(read_manifest(dir.path()), Err(Error::UnsupportedDtype(d)) if d == "f16le"));
}

#[test]
fn overlapping_spans_violate_schema() {
    let dir = written_random_dump(1, 6, 1, 4);
    edit_manifest(dir.path(), |v| {
        v["spans"]["visual"] = serde_json::json!([0, 4]);
        v["spans"]["text"] = serde_json::json!([3, 6]);
    });
    assert_eq!(schema_key(read_manifest(dir.path()).unwrap_err()), "spans");
}

#[test]
fn missing_and_unknown_keys_are_named() {
    let dir = written_random_dump(1, 4, 1, 4);
    edit_manifest(dir.path(), |v| {
        v.as_object_mut().unwrap().remove("num_heads");
    });
    assert_eq!(
        schema_key(read_manifest(dir.path()).unwrap_err()),
        "num_heads"
    );

    let dir = written_random_dump(1, 4, 1, 4);
    edit_manifest(dir.path(), |v| v["layers"][1]["W_V"]["stride"] = 3.into());
    assert_eq!(schema_key(read_manifest(dir.path()).unwrap_err()), "stride");
}

#[test]
fn missing_manifest_and_vocab() {
    let dir = TempDir::new().unwrap();
    assert!(matches!(
        read_manifest(dir.path()),
        Err(Error::MissingFile(_))
    ));
    let dir = written_random_dump(1, 4, 1, 4);
    fs::remove_file(dir.path().join("vocab.txt")).unwrap();
    assert!(matches!(
        read_manifest(dir.path()),
        Err(Error::MissingFile(_))
    ));
}

#[test]
fn hidden_list_length_is_checked_at_read() {
    let dir = written_random_dump(2, 4, 1, 4);
    edit_manifest(dir.path(), |v| {
        v["layers"].as_array_mut().unwrap().pop();
    });
    assert_eq!(schema_key(read_manifest(dir.path()).unwrap_err()), "layers");
}

#[test]
fn synthetic_dump_validates() {
    let dir = TempDir::new().unwrap();
    let spec = SynthSpec::new(3, 8, 16, 2, 4).with_curve(vec![0.1, 0.2, 0.3, 0.4]);
    let m = generate_synthetic_dump(&spec, 1, dir.path()).unwrap();
    let report = validate_dump(&m);
    assert!(report.ok(), "{:?}", report.failures().collect::<Vec<_>>());
    assert!(report.entries.iter().any(|e| e.check.contains("row-sum")));
}

#[test]
fn row_summing_to_point_eight_is_named() {
    let dir = written_random_dump(3, 6, 2, 4);
    let m = read_manifest(dir.path()).unwrap();
    let probs = m.layers[2].attn_probs.as_ref().unwrap();
    let tensor = load_tensor(dir.path(), probs).unwrap();
    let (head, row, t) = (1, 3, 6);
    let start = (head * t + row) * t;
    let total: f64 = tensor.as_slice()[start..start + t]
        .iter()
        .map(|&x| x as f64)
        .sum();
    for j in 0..=row {
        let scaled = (tensor.as_slice()[start + j] as f64 * 0.8 / total) as f32;
        patch(dir.path(), probs, start + j, scaled);
    }
    let report = validate_dump(&read_manifest(dir.path()).unwrap());
    assert!(!report.ok());
    let failures: Vec<String> = report.failures().map(|e| e.to_string()).collect();
    assert_eq!(failures, ["attn_probs row-sum layer 2 head 1 row 3"]);
    assert!(matches!(
        ValidatedDump::open(dir.path()),
        Err(Error::ValidationFailed { .. })
    ));
}

#[test]
fn nan_hidden_value_fails_finiteness() {
    let dir = written_random_dump(2, 4, 1, 4);
    let m = read_manifest(dir.path()).unwrap();
    patch(dir.path(), &m.layers[1].hidden, 5, f32::NAN);
    let report = validate_dump(&read_manifest(dir.path()).unwrap());
    let failures: Vec<_> = report.failures().collect();
    assert_eq!(failures.len(), 1);
    assert_eq!(failures[0].check, "finiteness");
    assert!(failures[0].subject.contains("layers[1].hidden"));
}

#[test]
fn acausal_attention_fails() {
    let dir = written_random_dump(1, 4, 1, 4);
    let m = read_manifest(dir.path()).unwrap();
    patch(
        dir.path(),
        m.layers[1].attn_probs.as_ref().unwrap(),
        1,
        0.01,
    );
    let report = validate_dump(&read_manifest(dir.path()).unwrap());
    assert!(report.failures().any(|e| e.check == "causal-mask"));
}

#[test]
fn truncated_tensor_file_fails_extent() {
    let dir = written_random_dump(1, 4, 1, 4);
    let path = dir.path().join("tensors.bin");
    let len = fs::metadata(&path).unwrap().len();
    fs::OpenOptions::new()
        .write(true)
        .open(&path)
        .unwrap()
        .set_len(len - 4)
        .unwrap();
    let report = validate_dump(&read_manifest(dir.path()).unwrap());
    assert!(!report.ok());
}

fn bits(t: &Tensor) -> Vec<u32> {
    t.as_slice().iter().map(|x| x.to_bits()).collect()
}

fn caption_spec() -> SynthSpec {
    let mut spec = SynthSpec::new(4, 10, 32, 2, 5).with_curve(vec![0.0, 0.2, 0.1, 0.3, 0.25]);
    spec.caption = Some("a red bus parked on the street".into());
    spec.caption_plan = vec![0, 1, 2, 4, 1];
    spec
}

#[test]
fn synth_round_trip_is_bit_exact() {
    let spec = caption_spec();
    let data = synthesize(&spec, 9).unwrap();
    let dir = TempDir::new().unwrap();
    generate_synthetic_dump(&spec, 9, dir.path()).unwrap();
    let dump = ValidatedDump::open(dir.path()).unwrap();
    for l in 0..=4 {
        assert_eq!(bits(&dump.hidden(l).unwrap()), bits(&data.hidden[l]));
    }
    for l in 1..=4 {
        let (got, want) = (dump.block(l).unwrap(), &data.blocks[l - 1]);
        for (g, w) in [
            (&got.attn_probs, &want.attn_probs),
            (&got.attn_input, &want.attn_input),
            (&got.w_v, &want.w_v),
            (&got.b_v, &want.b_v),
            (&got.w_o, &want.w_o),
            (&got.b_o, &want.b_o),
        ] {
            assert_eq!(g.shape(), w.shape());
            assert_eq!(bits(g), bits(w));
        }
    }
    let head = dump.load_head().unwrap();
    assert_eq!(bits(&head.unembedding), bits(&data.unembedding));
    assert_eq!(head.vocab, data.vocab);
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

#[test]
fn same_seed_same_bytes() {
    let spec = caption_spec();
    let (a, b, c) = (
        TempDir::new().unwrap(),
        TempDir::new().unwrap(),
        TempDir::new().unwrap(),
    );
    generate_synthetic_dump(&spec, 3, a.path()).unwrap();
    generate_synthetic_dump(&spec, 3, b.path()).unwrap();
    generate_synthetic_dump(&spec, 4, c.path()).unwrap();
    assert_eq!(dir_bytes(a.path()), dir_bytes(b.path()));
    assert_ne!(dir_bytes(a.path()), dir_bytes(c.path()));
}

#[test]
fn planted_curve_is_recovered() {
    let planted = [0.0, 0.2, 0.1, 0.3, 0.25];
    for norm in ["layernorm", "rmsnorm"] {
        let mut spec = caption_spec();
        spec.norm_kind = serde_json::from_value(norm.into()).unwrap();
        let dir = TempDir::new().unwrap();
        generate_synthetic_dump(&spec, 21, dir.path()).unwrap();
        let curve =
            similarity_curve(&ValidatedDump::open(dir.path()).unwrap(), CurveKind::Inter).unwrap();
        assert_eq!(curve.values.len(), 5);
        for (got, want) in curve.values.iter().zip(planted) {
            assert!((got - want).abs() < 1e-3, "{got} vs {want}");
        }
    }
}

#[test]
fn similarity_one_makes_tokens_collinear() {
    let spec = SynthSpec::new(2, 6, 16, 2, 3).with_curve(vec![1.0; 3]);
    let data = synthesize(&spec, 2).unwrap();
    for hidden in &data.hidden {
        let rows = oracle::rows_of(hidden);
        for a in &rows {
            for b in &rows {
                assert!((oracle::cosine(a, b) - 1.0).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn infeasible_specs() {
    let spec = SynthSpec::new(2, 6, 16, 2, 3).with_curve(vec![0.0, 1.5, 0.0]);
    assert!(matches!(
        synthesize(&spec, 0),
        Err(Error::InfeasibleSpec(_))
    ));
    let spec = SynthSpec::new(2, 6, 16, 2, 3).with_curve(vec![0.0, -1.01, 0.0]);
    assert!(matches!(
        synthesize(&spec, 0),
        Err(Error::InfeasibleSpec(_))
    ));
    let spec = SynthSpec::new(2, 6, 16, 2, 3).with_curve(vec![0.0; 2]);
    assert!(matches!(
        synthesize(&spec, 0),
        Err(Error::InfeasibleSpec(_))
    ));
    let mut spec = SynthSpec::new(2, 6, 16, 2, 3);
    spec.caption = Some("red bus".into());
    spec.caption_plan = vec![0, 3, 0];
    assert!(matches!(
        synthesize(&spec, 0),
        Err(Error::InfeasibleSpec(_))
    ));
}

#[test]
fn synth_spec_json_schema() {
    let json = r#"{
        "num_layers": 2, "hidden_size": 16, "num_heads": 2, "num_tokens": 6,
        "visual": [0, 3], "text": [3, 6], "planted_curve": [0.1, 0.2, 0.3]
    }"#;
    let spec: SynthSpec = serde_json::from_str(json).unwrap();
    assert_eq!(
        spec,
        SynthSpec::new(2, 6, 16, 2, 3).with_curve(vec![0.1, 0.2, 0.3])
    );
    assert!(serde_json::from_str::<SynthSpec>(&json.replace("\"text\"", "\"txt\"")).is_err());
}
