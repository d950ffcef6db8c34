use metagraph::ggnn::{init_params, ModelConfig};
use metagraph_cli::checkpoint::{decode, encode, load_checkpoint, save_checkpoint, Manifest, SCHEMA_VERSION};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny() -> ModelConfig {
    ModelConfig {
        layers: 2,
        hidden_width: 8,
        output_dim: 3,
        ..ModelConfig::default()
    }
}

fn split(bytes: &[u8]) -> (Manifest, Vec<u8>) {
    let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let manifest = serde_json::from_slice(&bytes[12..12 + len]).unwrap();
    (manifest, bytes[12 + len..].to_vec())
}

fn join(manifest: &Manifest, payload: &[u8]) -> Vec<u8> {
    let json = serde_json::to_vec(manifest).unwrap();
    let mut out = b"MGRAPHCK".to_vec();
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(payload);
    out
}

#[test]
fn round_trip_within_float32_rounding() {
    let model = tiny();
    let params = init_params(&model, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let columns = vec!["B0000".to_string(), "B0001".into(), "F0000".into()];
    save_checkpoint(&path, &params, "multitask", &model, Some(columns.clone()), 99).unwrap();
    let (loaded, manifest) = load_checkpoint(&path).unwrap();

    assert_eq!(loaded.names().collect::<Vec<_>>(), params.names().collect::<Vec<_>>());
    for ((name, a), (_, b)) in params.iter().zip(loaded.iter()) {
        assert_eq!(a.shape(), b.shape(), "{name}");
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 1e-7 * x.abs().max(1e-30), "{name}: {x} vs {y}");
        }
    }
    assert_eq!(manifest.model, model);
    assert_eq!(manifest.kind, "multitask");
    assert_eq!(manifest.columns, Some(columns));
    assert_eq!(manifest.seed, 99);
    assert_eq!(manifest.schema_version, SCHEMA_VERSION);
}

#[test]
fn offsets_are_contiguous_and_exhaustive() {
    let model = tiny();
    let params = init_params(&model, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let bytes = encode(&params, "maml", &model, None, 0).unwrap();
    let (manifest, payload) = split(&bytes);
    let mut next = 0;
    for t in &manifest.tensors {
        assert_eq!(t.offset, next);
        assert_eq!(t.len, t.shape.iter().product::<usize>());
        next += t.len;
    }
    assert_eq!(payload.len(), 4 * next);
    assert_eq!(next, model.param_count());
}

#[test]
fn truncated_payload_names_both_sizes() {
    let model = tiny();
    let params = init_params(&model, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let bytes = encode(&params, "maml", &model, None, 0).unwrap();
    let expected = 4 * model.param_count();
    let err = decode(&bytes[..bytes.len() - 4]).unwrap_err().to_string();
    assert!(err.contains(&format!("payload has {} bytes", expected - 4)), "{err}");
    assert!(err.contains(&format!("expects {expected}")), "{err}");
    assert!(decode(&[bytes.as_slice(), &[0, 0, 0, 0]].concat()).is_err());
}

#[test]
fn version_mismatch_is_rejected() {
    let model = tiny();
    let params = init_params(&model, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let (mut manifest, payload) = split(&encode(&params, "maml", &model, None, 0).unwrap());
    manifest.schema_version = SCHEMA_VERSION + 1;
    let err = decode(&join(&manifest, &payload)).unwrap_err().to_string();
    assert!(err.contains("schema version"), "{err}");
}

#[test]
fn manifest_shape_mismatch_is_rejected() {
    let model = tiny();
    let params = init_params(&model, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let (mut manifest, payload) = split(&encode(&params, "maml", &model, None, 0).unwrap());
    let last = manifest.tensors.len() - 1;
    manifest.tensors[last].shape = vec![2, 2];
    assert!(decode(&join(&manifest, &payload)).is_err());

    let (mut manifest, payload) = split(&encode(&params, "maml", &model, None, 0).unwrap());
    manifest.model.hidden_width = 9;
    assert!(decode(&join(&manifest, &payload)).is_err());
}

#[test]
fn garbage_is_not_a_checkpoint() {
    assert!(decode(b"not a checkpoint at all").unwrap_err().to_string().contains("magic"));
    assert!(decode(b"").is_err());
}
