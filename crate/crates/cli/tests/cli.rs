use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use pillars_core::architectures::{cost_all, ArchConfig, BackboneVariant};
use pillars_core::exact::{format_fixed, parse_decimal};
use pillars_core::report::{compare_table, Table};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pillars")).args(args).output().unwrap()
}

fn stdout(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn data(rel: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data").join(rel).to_string_lossy().into_owned()
}

fn assert_domain_error(args: &[&str]) {
    let out = run(args);
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(out.status.code(), Some(1), "{args:?}: {err}");
    assert_eq!(err.lines().count(), 1, "{args:?}: {err}");
    assert!(err.starts_with("error: "), "{err}");
    assert!(!err.contains("panicked"), "{err}");
}

#[test]
fn list_names_every_variant() {
    let names: Vec<String> =
        stdout(&["list"]).lines().map(|l| l.split_whitespace().next().unwrap().to_string()).collect();
    let expected: Vec<String> = BackboneVariant::ALL.iter().map(|v| v.label().to_string()).collect();
    assert_eq!(names, expected);
}

#[test]
fn cost_totals_agree_with_compare() {
    let cfg = ArchConfig::default();
    let table = compare_table(&cost_all(&cfg).unwrap());
    let csv = stdout(&["compare", "--format", "csv"]);
    assert_eq!(Table::from_csv(&csv).unwrap(), table);
    let idx = |h: &str| table.headers.iter().position(|x| x == h).unwrap();
    let (name, madds, gmadds) = (idx("variant"), idx("madds"), idx("gmadds"));
    for row in &table.rows {
        let text = stdout(&["cost", &row[name]]);
        let total = text.lines().find(|l| l.starts_with("TOTAL") && l.contains("MAdd")).unwrap();
        let g = format_fixed(&parse_decimal(&row[gmadds]).unwrap(), 2);
        assert_eq!(total, format!("TOTAL {} MAdd = {g} GMAdd", row[madds]));
    }
}

#[test]
fn pareto_prints_front() {
    assert_eq!(stdout(&["pareto"]), "ShufflenetV2\nMobilenetV1\nCSPDarknet\n");
    assert_eq!(stdout(&["pareto", "--scope", "car"]).lines().count(), 4);
}

#[test]
fn csv_outputs_round_trip() {
    for args in [
        &["cost", "resnet", "--format", "csv"][..],
        &["map", "--format", "csv"],
        &["compare", "--metric", "fps_backbone", "--format", "csv"],
        &["export", "--format", "csv"],
    ] {
        let text = stdout(args);
        let table = Table::from_csv(&text).unwrap();
        assert!(!table.rows.is_empty(), "{args:?}");
        assert_eq!(table.to_csv(), text, "{args:?}");
    }
}

#[test]
fn json_outputs_parse() {
    for args in [&["export"][..], &["map", "--format", "json"], &["describe", "xception", "--format", "json"]] {
        serde_json::from_str::<serde_json::Value>(&stdout(args)).unwrap();
    }
}

#[test]
fn plot_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.svg");
    let b = dir.path().join("b.svg");
    stdout(&["plot", "--output", a.to_str().unwrap()]);
    stdout(&["plot", "--output", b.to_str().unwrap()]);
    let (a, b) = (fs::read(a).unwrap(), fs::read(b).unwrap());
    assert_eq!(a, b);
    let svg = String::from_utf8(a).unwrap();
    assert!(svg.starts_with("<svg") || svg.starts_with("<?xml"));
    assert_eq!(svg.matches("class=\"pareto\"").count(), 3);
    assert_eq!(stdout(&["plot"]).as_bytes(), svg.as_bytes());
}

#[test]
fn amdahl_projections() {
    let gpu = data("profiles/mmdet3d_rtx2070s.json");
    let text = stdout(&["amdahl", "--profile", &gpu, "--speedup", "backbone=inf"]);
    assert!(text.lines().any(|l| l.starts_with("pipeline_speedup") && l.ends_with("1.639")), "{text}");
    let text = stdout(&["amdahl", "--fraction", "0.5", "--speedup", "2"]);
    assert!(text.lines().any(|l| l.starts_with("max_speedup") && l.ends_with("2.000")), "{text}");
    stdout(&["amdahl", "--profile", &data("profiles/fpga_zcu104.json"), "--speedup", "backbone=4"]);
}

#[test]
fn exit_codes() {
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["--version"]).status.code(), Some(0));
    assert_eq!(run(&[]).status.code(), Some(2));
    assert_eq!(run(&["bogus"]).status.code(), Some(2));
    assert_eq!(run(&["cost", "nope"]).status.code(), Some(2));
    assert_eq!(run(&["compare", "--format", "yaml"]).status.code(), Some(2));
    assert_eq!(run(&["amdahl", "--fraction", "0.5", "--profile", "x.json"]).status.code(), Some(2));
    assert_domain_error(&["cost", "base", "--set", "units.nope=1"]);
    assert_domain_error(&["cost", "base", "--config", "/nonexistent/config.json"]);
    assert_domain_error(&["pareto", "--data", "/nonexistent/data.json"]);
    assert_domain_error(&["amdahl", "--fraction", "1.5"]);
    assert_domain_error(&["amdahl", "--fraction", "0.5", "--speedup", "0"]);
    assert_domain_error(&["amdahl", "--profile", &data("profiles/mmdet3d_rtx2070s.json"), "--speedup", "warp=2"]);
}

#[test]
fn overrides_change_costs() {
    let total = |args: &[&str]| {
        let text = stdout(args);
        text.lines().find(|l| l.starts_with("TOTAL") && l.contains("MAdd")).unwrap().to_string()
    };
    let base = total(&["cost", "resnext"]);
    let narrow = total(&["cost", "resnext", "--set", "units.resnext_groups=8"]);
    assert_ne!(base, narrow);
    let shallow = total(&["cost", "base", "--set", "block_units=[1,1,1]"]);
    assert_ne!(shallow, total(&["cost", "base"]));
    let no_bn = total(&["cost", "base", "--set", "count_batchnorm=false"]);
    assert_ne!(no_bn, total(&["cost", "base"]));
}

#[test]
fn toml_and_json_configs_agree() {
    let dir = tempfile::tempdir().unwrap();
    let toml = dir.path().join("cfg.toml");
    fs::write(&toml, "block_units = [2, 3, 3]\n\n[units]\nresnext_groups = 16\n").unwrap();
    let json = dir.path().join("cfg.json");
    fs::write(&json, r#"{"block_units": [2, 3, 3], "units": {"resnext_groups": 16}}"#).unwrap();
    let a = stdout(&["cost", "resnext", "--config", toml.to_str().unwrap()]);
    let b = stdout(&["cost", "resnext", "--config", json.to_str().unwrap()]);
    let c = stdout(&["cost", "resnext", "--set", "block_units=[2,3,3]", "--set", "units.resnext_groups=16"]);
    assert_eq!(a, b);
    assert_eq!(a, c);
}

#[test]
fn malformed_inputs_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let configs = [
        "",
        "{",
        "[]",
        "null",
        r#"{"block_units": "many"}"#,
        r#"{"block_units": [1, 2]}"#,
        r#"{"block_channels": [0, 128, 256]}"#,
        r#"{"block_strides": [3, 2, 2]}"#,
        r#"{"units": {"resnext_groups": 0}}"#,
        r#"{"pseudo_image": {"channels": 64, "height": 0, "width": 10}}"#,
        r#"{"pseudo_image": {"channels": 64, "height": 3, "width": 3}}"#,
        r#"{"neck_upsample": [1, 2]}"#,
        r#"{"num_classes": 0}"#,
        r#"{"max_pillars": -1}"#,
        r#"{"unknown": 1}"#,
        "\u{feff}\u{0}garbage",
    ];
    for (i, text) in configs.iter().enumerate() {
        let path = dir.path().join(format!("cfg{i}.json"));
        fs::write(&path, text).unwrap();
        for v in ["base", "resnext", "shufflenetv1", "cspdarknet"] {
            assert_domain_error(&["cost", v, "--config", path.to_str().unwrap()]);
        }
    }
    // knobs that only constrain the variant using them
    for (set, variant) in [("units.resnext_groups=7", "resnext"), ("units.shufflenet_v1_groups=5", "shufflenetv1")] {
        stdout(&["cost", "base", "--set", set]);
        assert_domain_error(&["cost", variant, "--set", set]);
    }
    let bad_toml = dir.path().join("bad.toml");
    fs::write(&bad_toml, "block_units = [1, 2\n").unwrap();
    assert_domain_error(&["cost", "base", "--config", bad_toml.to_str().unwrap()]);

    let datasets = [
        "",
        "{}",
        r#"{"base": "x", "points": []}"#,
        r#"[{"name": "a"}]"#,
        r#"[{"name": "a", "gmadds": -1, "ap": {"Car": {"Easy": 1, "Moderate": 1, "Hard": 1}}}]"#,
        r#"[{"name": "a", "gmadds": 1, "ap": {"Car": {"Easy": 101, "Moderate": 1, "Hard": 1}}}]"#,
        r#"[{"name": "a", "gmadds": 1, "ap": {"Truck": {"Easy": 1, "Moderate": 1, "Hard": 1}}}]"#,
        r#"[{"name": "a", "gmadds": "x", "ap": {}}]"#,
    ];
    for (i, text) in datasets.iter().enumerate() {
        let path = dir.path().join(format!("data{i}.json"));
        fs::write(&path, text).unwrap();
        let p = path.to_str().unwrap();
        assert_domain_error(&["pareto", "--data", p]);
        assert_domain_error(&["plot", "--data", p]);
        assert_domain_error(&["map", "--data", p]);
    }

    let profiles = [
        "{}",
        r#"{"stage_fractions": {"backbone": 0.7, "rest": 0.7}, "base_latency_ms": 10}"#,
        r#"{"stage_fractions": {"backbone": 1.0}, "base_latency_ms": 0}"#,
        r#"{"stage_fractions": {"backbone": 0.5}, "base_latency_ms": "fast"}"#,
    ];
    for (i, text) in profiles.iter().enumerate() {
        let path = dir.path().join(format!("profile{i}.json"));
        fs::write(&path, text).unwrap();
        assert_domain_error(&["amdahl", "--profile", path.to_str().unwrap(), "--speedup", "backbone=2"]);
    }

    for set in ["block_units", "block_units=", "=1", "units.resnext_groups=x", "a.b.c=1", "count_batchnorm=3"] {
        assert_domain_error(&["cost", "base", "--set", set]);
    }
}
