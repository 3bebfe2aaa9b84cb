//! Harness-level tests: config schema rejection, byte-level determinism
//! of outputs, and the documented behavior of a few subcommands through
//! the real dispatch path.

use std::path::PathBuf;

use toruslab_cli::commands::{dispatch, Ctx};
use toruslab_cli::config::{ExperimentConfig, SpecSource};

fn tmp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("toruslab-test-{tag}-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn ctx(cfg: ExperimentConfig, out: PathBuf, seed: u64) -> Ctx {
    Ctx { cfg, out_dir: out, seed }
}

#[test]
fn config_rejects_unknown_fields() {
    let err = serde_json::from_str::<ExperimentConfig>(r#"{ "command": "orbit", "bogus": 1 }"#)
        .unwrap_err();
    assert!(err.to_string().contains("bogus"));
}

#[test]
fn config_rejects_wrong_command() {
    let cfg: ExperimentConfig =
        serde_json::from_str(r#"{ "command": "height", "spec": "trapped-q3" }"#).unwrap();
    let out = tmp_dir("wrongcmd");
    let err = dispatch("orbit", &ctx(cfg, out, 0)).unwrap_err();
    assert!(err.contains("declares command"));
}

#[test]
fn orbit_command_reports_height_three() {
    let cfg: ExperimentConfig =
        serde_json::from_str(r#"{ "spec": "std-sl2", "x": ["1/3", "2/3"] }"#).unwrap();
    let out = tmp_dir("orbit");
    let record = dispatch("orbit", &ctx(cfg, out.clone(), 0)).unwrap();
    assert_eq!(record.verdicts["finite"], serde_json::json!(true));
    assert_eq!(record.verdicts["height_q"], serde_json::json!("3"));
    let body = std::fs::read_to_string(out.join("orbit.json")).unwrap();
    assert!(body.contains("\"height_q\":\"3\""));
}

#[test]
fn decay_scan_outputs_are_bitwise_deterministic() {
    let cfg_text = r#"{
        "spec": "std-sl2",
        "x": [0.41421356, 0.73205081],
        "a": [1, 0],
        "n_list": [0, 5, 10],
        "samples": 500
    }"#;
    let run = |tag: &str| {
        let cfg: ExperimentConfig = serde_json::from_str(cfg_text).unwrap();
        let out = tmp_dir(tag);
        dispatch("decay-scan", &ctx(cfg, out.clone(), 42)).unwrap();
        std::fs::read(out.join("decay.csv")).unwrap()
    };
    assert_eq!(run("det-a"), run("det-b"), "identical configs must give identical CSV bytes");
}

#[test]
fn named_fp_spec_carries_its_start() {
    let cfg: ExperimentConfig =
        serde_json::from_str(r#"{ "spec": "fp-fixedpoint", "n": 5 }"#).unwrap();
    let out = tmp_dir("fpfix");
    let record = dispatch("fp-evolve", &ctx(cfg, out, 0)).unwrap();
    assert_eq!(record.verdicts["fixed_point_branch"], serde_json::json!(true));
}

#[test]
fn inline_spec_round_trip() {
    let cfg: ExperimentConfig = serde_json::from_str(
        r#"{
            "spec": {
                "dim": 2,
                "labels": ["a", "b"],
                "weights": ["1/2", "1/2"],
                "generators": [[[1,1],[0,1]], [[1,0],[1,1]]],
                "translations": [["0","0"], ["0","0"]]
            },
            "x": ["1/3", "2/3"]
        }"#,
    )
    .unwrap();
    let out = tmp_dir("inline");
    let record = dispatch("height", &ctx(cfg, out, 0)).unwrap();
    assert_eq!(record.verdicts["height_q"], serde_json::json!("3"));
}

#[test]
fn float_mode_rejected_for_exact_commands() {
    // orbit demands exact coordinates; a float x must be refused
    let cfg: ExperimentConfig =
        serde_json::from_str(r#"{ "spec": "std-sl2", "x": [0.3333, 0.6667] }"#).unwrap();
    let out = tmp_dir("floatreject");
    let err = dispatch("orbit", &ctx(cfg, out, 0)).unwrap_err();
    assert!(err.contains("exact"), "got: {err}");
}

#[test]
fn spec_source_named_and_inline_parse() {
    let named: SpecSource = serde_json::from_str(r#""std-sl2""#).unwrap();
    assert!(matches!(named, SpecSource::Named(_)));
    let inline: SpecSource = serde_json::from_str(
        r#"{ "dim": 1, "labels": ["a"], "weights": ["1/1"], "generators": [[[1]]], "translations": [["1/2"]] }"#,
    )
    .unwrap();
    assert!(matches!(inline, SpecSource::Inline(_)));
}
