use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use dp_consensus::experiments::ExperimentConfig;

fn bin(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dp-consensus"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const SMALL: &[&str] = &[
    "--set",
    "run.horizon=40",
    "--set",
    "data.points_per_node=20",
];

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    args.iter().chain(SMALL).copied().collect()
}

#[test]
fn run_replays_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("default.toml");
    fs::write(&cfg, ExperimentConfig::default().to_toml()).unwrap();
    for name in ["a.csv", "b.csv"] {
        let out = bin(
            &with_small(&[
                "run",
                "--config",
                "default.toml",
                "--seed",
                "42",
                "--output",
                name,
            ]),
            dir.path(),
        );
        assert!(out.status.success(), "{}", stderr(&out));
    }
    let a = fs::read(dir.path().join("a.csv")).unwrap();
    let b = fs::read(dir.path().join("b.csv")).unwrap();
    assert_eq!(a, b);
    let text = String::from_utf8(a).unwrap();
    assert!(text.starts_with("# dp-consensus run\n# master_seed = 42\n"));
    assert!(text.contains("# horizon = 40\n"));
    assert!(text.contains("stage,t,normalized_error,consensus_dev,probe_error\n"));
}

#[test]
fn comment_header_replays_as_a_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin(
        &[
            "schedule",
            "--T",
            "30",
            "--epsilon",
            "2",
            "--seed",
            "5",
            "--output",
            "a.csv",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let text = fs::read_to_string(dir.path().join("a.csv")).unwrap();
    let toml: String = text
        .lines()
        .take_while(|l| l.starts_with('#'))
        .skip(2)
        .filter(|l| !l.starts_with("# budget_check"))
        .map(|l| format!("{}\n", l.trim_start_matches('#').trim_start()))
        .collect();
    fs::write(dir.path().join("replay.toml"), toml).unwrap();
    let out = bin(
        &[
            "schedule",
            "--config",
            "replay.toml",
            "--seed",
            "5",
            "--output",
            "b.csv",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(text, fs::read_to_string(dir.path().join("b.csv")).unwrap());
}

#[test]
fn different_seeds_give_different_runs() {
    let dir = tempfile::tempdir().unwrap();
    let a = bin(&with_small(&["run", "--seed", "1"]), dir.path());
    let b = bin(&with_small(&["run", "--seed", "2"]), dir.path());
    assert!(a.status.success() && b.status.success());
    assert_ne!(a.stdout, b.stdout);
}

#[test]
fn every_command_replays_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    let commands: &[&[&str]] = &[
        &["sweep", "--set", "sweep.n_seeds=2", "--jobs", "2"],
        &["audit", "--samples", "1000"],
        &["bound"],
        &["schedule"],
    ];
    for args in commands {
        let runs: Vec<Vec<u8>> = (0..2)
            .map(|k| {
                let name = format!("{}-{k}.out", args[0]);
                let mut full = with_small(args);
                full.extend(["--seed", "7", "--output", name.as_str()]);
                let out = bin(&full, dir.path());
                assert!(out.status.success(), "{args:?}: {}", stderr(&out));
                fs::read(dir.path().join(name)).unwrap()
            })
            .collect();
        assert_eq!(runs[0], runs[1], "{args:?}");
    }
    let a = fs::read(dir.path().join("sweep-0.summary.json")).unwrap();
    let b = fs::read(dir.path().join("sweep-1.summary.json")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn schedule_reports_a_passing_budget_check() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin(
        &[
            "schedule",
            "--T",
            "1000",
            "--epsilon",
            "4",
            "--delta",
            "1e-3",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("# budget_check: pass = true"));
    let rows = text.lines().filter(|l| !l.starts_with('#')).count();
    assert_eq!(rows, 1001);
}

#[test]
fn audit_and_bound_emit_json_with_verdicts() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin(
        &with_small(&["audit", "--samples", "1000", "--epsilon", "4"]),
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let doc: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(doc["exceed_rate"].is_number());
    assert_eq!(doc["pass"], true);
    assert_eq!(doc["master_seed"], 0);
    assert_eq!(doc["config"]["audit"]["samples"], 1000);

    let out = bin(&with_small(&["bound"]), dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let doc: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    for key in ["terms", "total", "empirical_mean", "n_runs", "pass"] {
        assert!(!doc[key].is_null(), "missing {key}");
    }
    assert_eq!(doc["n_runs"], 50);
}

#[test]
fn validation_errors_exit_1_and_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cases: &[(&[&str], &str)] = &[
        (&["run", "--set", "graph.colour=red"], "graph.colour"),
        (&["run", "--set", "privacy.epsilon=-2"], "privacy.epsilon"),
        (&["schedule", "--delta", "2"], "privacy.delta"),
        (&["run", "--set", "data.dimension"], "data.dimension"),
        (&["audit", "--samples", "10"], "audit.samples"),
        (&["bound", "--runs", "3"], "--runs"),
    ];
    for (args, key) in cases {
        let out = bin(args, dir.path());
        assert_eq!(out.status.code(), Some(1), "{args:?}");
        assert!(stderr(&out).contains(key), "{args:?}: {}", stderr(&out));
    }

    fs::write(dir.path().join("bad.toml"), "[graph]\nn_nodes = \"ten\"\n").unwrap();
    let out = bin(&["run", "--config", "bad.toml"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("n_nodes"), "{}", stderr(&out));

    let out = bin(&["launch"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn runtime_failures_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin(
        &with_small(&["schedule", "--output", "missing/dir/out.csv"]),
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn help_lists_every_key_with_its_default() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin(&["--help"], dir.path());
    assert!(out.status.success());
    let help = String::from_utf8(out.stdout).unwrap();
    for (key, value) in ExperimentConfig::default().entries() {
        assert!(
            help.contains(&format!("{key} = {value}")),
            "{key} missing from help"
        );
    }
}
