mod common;

use std::fs;

use common::{dolphin, fixture, stderr, stdout, write, SMALL};
use tempfile::tempdir;

#[test]
fn full_scale_shapes() {
    let out = dolphin(&["shapes", "--preset", "full-scale"], &[]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("frames T: 8"), "{text}");
    assert!(text.contains("visual: input 224x224x3"), "{text}");
    assert!(text.contains("multi-scale segments 784/196/49"), "{text}");
    assert!(text.contains("LLM tokens: 16 (B x 16 x 4096)"), "{text}");
    assert!(
        text.contains("visual global output: B x 8 x 256 x 1024"),
        "{text}"
    );
}

#[test]
fn toy_shapes_list_the_parameter_sheet() {
    let text = stdout(&dolphin(&["shapes"], &[]));
    for line in ["50464", "33824", "12320", "82432"] {
        assert!(
            text.replace(['_', ','], "").contains(line),
            "{line} missing from\n{text}"
        );
    }
    assert!(
        text.contains("audio global output: B x 8 x 8 x 32"),
        "{text}"
    );
}

#[test]
fn preset_from_the_environment() {
    let text = stdout(&dolphin(&["shapes"], &[("DOLPHIN_PRESET", "full_scale")]));
    assert!(text.contains("784/196/49"), "{text}");
}

#[test]
fn gradcheck_fault_injection_exits_3() {
    let dir = tempdir().unwrap();
    let report = dir.path().join("grad.txt");
    let out = dolphin(
        &[
            "gradcheck",
            "--seeds",
            "1",
            "--block",
            "feed_forward",
            "--fault",
            "flip-sign",
            "--report",
            report.to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    let text = fs::read_to_string(&report).unwrap();
    assert!(text.contains("FAIL"), "{text}");
    assert_eq!(text, stdout(&out));
}

#[test]
fn gradcheck_is_deterministic() {
    let args = [
        "gradcheck",
        "--seeds",
        "2",
        "--block",
        "feed_forward",
        "--block",
        "cross_attention",
    ];
    let (a, b) = (dolphin(&args, &[]), dolphin(&args, &[]));
    assert!(a.status.success(), "{}", stderr(&a));
    assert_eq!(a.stdout, b.stdout);
    assert!(stdout(&a).contains("all passed"), "{}", stdout(&a));
}

#[test]
fn unknown_block_is_a_usage_error() {
    let out = dolphin(&["gradcheck", "--block", "nope"], &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("expected one of"));
}

#[test]
fn training_reports_steps_and_frozen_groups() {
    let dir = tempdir().unwrap();
    let cfg = write(dir.path(), "small.toml", SMALL);
    let report = dir.path().join("steps.jsonl");
    let ckpt = dir.path().join("ckpt");
    let args = [
        "--config",
        cfg.to_str().unwrap(),
        "train",
        "--report",
        report.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ];
    let out = dolphin(&args, &[]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(
        stdout(&out).contains("frozen: visual_encoder, audio_encoder, readout"),
        "{}",
        stdout(&out)
    );
    let lines: Vec<serde_json::Value> = fs::read_to_string(&report)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[3]["step"], 3);
    assert!(lines
        .iter()
        .all(|l| l["loss"].as_f64().unwrap().is_finite()));
    assert!(ckpt.join("manifest.txt").exists());

    // An existing checkpoint directory is never overwritten.
    let again = dolphin(&args, &[]);
    assert_eq!(again.status.code(), Some(2), "{}", stderr(&again));
}

#[test]
fn training_flags_override_the_config() {
    let dir = tempdir().unwrap();
    let cfg = write(dir.path(), "small.toml", SMALL);
    let report = dir.path().join("steps.jsonl");
    let out = dolphin(
        &[
            "--config",
            cfg.to_str().unwrap(),
            "train",
            "--report",
            report.to_str().unwrap(),
            "--stage",
            "1",
            "--stage",
            "2",
            "--steps",
            "2",
        ],
        &[("DOLPHIN_TRAIN__LR", "0.25")],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(fs::read_to_string(&report).unwrap().lines().count(), 4);
    assert!(
        stdout(&out).contains("stage 2: 2 steps"),
        "{}",
        stdout(&out)
    );
}

#[test]
fn curation_of_the_fixture_is_byte_identical() {
    let dir = tempdir().unwrap();
    let run = |name: &str| {
        let output = dir.path().join(name);
        let stats = dir.path().join(format!("{name}.stats"));
        let out = dolphin(
            &[
                "curate",
                "--input",
                fixture().to_str().unwrap(),
                "--output",
                output.to_str().unwrap(),
                "--stats",
                stats.to_str().unwrap(),
            ],
            &[],
        );
        assert!(out.status.success(), "{}", stderr(&out));
        assert_eq!(fs::read_to_string(&stats).unwrap(), stdout(&out));
        (fs::read(output).unwrap(), stdout(&out))
    };
    let (a, table) = run("a.jsonl");
    let (b, _) = run("b.jsonl");
    assert_eq!(a, b);
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 75);
    assert!(table.contains("Total"), "{table}");
}

#[test]
fn malformed_lines_are_quarantined() {
    let dir = tempdir().unwrap();
    let mut text = fs::read_to_string(fixture()).unwrap();
    text.push_str("{not json\n");
    let input = write(dir.path(), "in.jsonl", &text);
    let (output, quarantine) = (dir.path().join("out.jsonl"), dir.path().join("q.jsonl"));
    let out = dolphin(
        &[
            "curate",
            "--input",
            input.to_str().unwrap(),
            "--output",
            output.to_str().unwrap(),
            "--quarantine",
            quarantine.to_str().unwrap(),
        ],
        &[],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let q = fs::read_to_string(quarantine).unwrap();
    assert_eq!(q.lines().count(), 1);
    assert!(q.contains("\"line\":101"), "{q}");
}

#[test]
fn missing_input_exits_4_without_output() {
    let dir = tempdir().unwrap();
    let output = dir.path().join("out.jsonl");
    let out = dolphin(
        &[
            "curate",
            "--input",
            "/nonexistent/in.jsonl",
            "--output",
            output.to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(out.status.code(), Some(4));
    assert!(stderr(&out).contains("/nonexistent/in.jsonl"));
    assert!(!output.exists());
}

#[test]
fn bad_configs_exit_2() {
    let dir = tempdir().unwrap();
    let unknown = write(dir.path(), "a.toml", "[train]\nlearning_rate = 1.0\n");
    let out = dolphin(&["--config", unknown.to_str().unwrap(), "shapes"], &[]);
    assert_eq!(out.status.code(), Some(2));
    let out = dolphin(&["shapes"], &[("DOLPHIN_MODEL__ADAPTER__HEADS", "3")]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    let out = dolphin(
        &["shapes"],
        &[("DOLPHIN_MODEL__ADAPTER__VISUAL__HEIGHT", "16")],
    );
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn fixture_is_the_seeded_synthetic_corpus() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("synth.jsonl");
    let out = dolphin(
        &[
            "synth",
            "--count",
            "100",
            "--seed",
            "2024",
            "--output",
            path.to_str().unwrap(),
        ],
        &[],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(fs::read(path).unwrap(), fs::read(fixture()).unwrap());
}
