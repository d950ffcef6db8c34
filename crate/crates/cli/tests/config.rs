use metagraph::metalearn::{Algorithm, OuterOptimizer};
use metagraph_cli::config::{apply_override, resolve, RunConfig};
use serde_json::json;

fn overrides(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

#[test]
fn defaults_match_published_hyperparameters() {
    let c = resolve(None, &[], None, None).unwrap();
    assert_eq!(c.model.layers, 7);
    assert_eq!(c.model.hidden_width, 1024);
    assert_eq!(c.model.feature_width, 75);
    assert_eq!(c.meta.inner_lr, 0.05);
    assert_eq!(c.meta.inner_steps, 2);
    assert_eq!(c.meta.inner_batch, 32);
    assert_eq!(c.meta.meta_batch, 32);
    assert_eq!(c.meta.outer_lr(), 0.003);
    assert_eq!(c.meta.outer_optimizer, OuterOptimizer::Adam);
    assert_eq!(c.benchmark.ks, [16, 32, 64, 128, 256]);
    assert_eq!(c.benchmark.finetune.lr, 1e-4);
    assert_eq!(c.benchmark.finetune.patience, 10);
    assert_eq!(c.pretrain.batch_size, 512);
    assert_eq!(c.pretrain.patience, 20);
    assert!((c.pretrain.lr - 10f64.powf(-3.75)).abs() < 1e-15);
    assert_eq!(c.seed, 0);
}

#[test]
fn fomaml_defaults_to_half_outer_rate() {
    let c = resolve(None, &overrides(&["meta.algorithm=fomaml"]), None, None).unwrap();
    assert_eq!(c.meta.algorithm, Algorithm::Fomaml);
    assert_eq!(c.meta.outer_lr(), 0.0015);
    let c = resolve(None, &overrides(&["meta.algorithm=fomaml", "meta.outer_lr=0.01"]), None, None).unwrap();
    assert_eq!(c.meta.outer_lr(), 0.01);
}

#[test]
fn overrides_parse_json_or_fall_back_to_strings() {
    let mut doc = json!({"model": {"layers": 7}});
    apply_override(&mut doc, "model.layers=3").unwrap();
    apply_override(&mut doc, "benchmark.ks=[16,64]").unwrap();
    apply_override(&mut doc, "meta.algorithm=anil").unwrap();
    apply_override(&mut doc, "meta.inner_dropout=true").unwrap();
    assert_eq!(
        doc,
        json!({
            "model": {"layers": 3},
            "benchmark": {"ks": [16, 64]},
            "meta": {"algorithm": "anil", "inner_dropout": true}
        })
    );
    assert!(apply_override(&mut doc, "no_equals_sign").is_err());
    assert!(apply_override(&mut doc, "model..layers=1").is_err());
    assert!(apply_override(&mut doc, "model.layers.deeper=1").is_err());
}

#[test]
fn unknown_and_invalid_fields_are_config_errors() {
    let err = resolve(None, &overrides(&["modle.layers=3"]), None, None).unwrap_err();
    assert_eq!(err.exit_code(), 1);
    let err = resolve(None, &overrides(&["meta.algorithm=reptile"]), None, None).unwrap_err();
    assert_eq!(err.exit_code(), 1);
    let err = resolve(None, &overrides(&["model.output_dim=4"]), None, None).unwrap_err();
    assert_eq!(err.exit_code(), 1);
    let err = resolve(None, &overrides(&["model.layers=0"]), None, None).unwrap_err();
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn seed_precedence_is_flag_then_file_then_environment() {
    let dir = tempfile::tempdir().unwrap();
    let with_seed = dir.path().join("a.json");
    std::fs::write(&with_seed, r#"{"seed": 11}"#).unwrap();
    let without = dir.path().join("b.json");
    std::fs::write(&without, r#"{"model": {"layers": 2}}"#).unwrap();

    assert_eq!(resolve(Some(&with_seed), &[], Some(5), Some("7")).unwrap().seed, 5);
    assert_eq!(resolve(Some(&with_seed), &[], None, Some("7")).unwrap().seed, 11);
    assert_eq!(resolve(Some(&without), &[], None, Some("7")).unwrap().seed, 7);
    assert_eq!(resolve(Some(&without), &[], None, None).unwrap().seed, 0);
    assert_eq!(resolve(None, &overrides(&["seed=3"]), None, Some("7")).unwrap().seed, 3);
    assert!(resolve(None, &[], None, Some("minus one")).is_err());
}

#[test]
fn global_seed_reaches_every_stage() {
    let c = resolve(None, &[], Some(42), None).unwrap();
    assert_eq!(c.registry.seed, 42);
    assert_eq!(c.meta.base_seed, 42);
    assert_eq!(c.benchmark.base_seed, 42);
}

#[test]
fn resolved_config_round_trips_through_json() {
    let c = resolve(None, &overrides(&["model.layers=2", "meta.algorithm=anil"]), Some(9), None).unwrap();
    let text = serde_json::to_string_pretty(&c).unwrap();
    let back: RunConfig = serde_json::from_str(&text).unwrap();
    assert_eq!(back, c);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("replay.json");
    std::fs::write(&path, text).unwrap();
    assert_eq!(resolve(Some(&path), &[], None, Some("1")).unwrap(), c);
}

#[test]
fn missing_or_malformed_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    assert_eq!(resolve(Some(&missing), &[], None, None).unwrap_err().exit_code(), 1);
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "[1, 2]").unwrap();
    assert_eq!(resolve(Some(&bad), &[], None, None).unwrap_err().exit_code(), 1);
}
