use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "--set",
    "data.train_videos=10",
    "--set",
    "data.test_videos=4",
    "--set",
    "train.epochs=2",
    "--set",
    "infer.steps=10",
];

fn diffant(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_diffant"))
        .args(args)
        .env("DIFFANT_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = diffant(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn with_tiny<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = args.to_vec();
    v.extend_from_slice(TINY);
    v
}

fn report_value(path: &Path, section: &str, key: &str) -> f64 {
    let text = std::fs::read_to_string(path).unwrap();
    let mut current = "";
    for line in text.lines() {
        if let Some(s) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            current = s;
        } else if current == section {
            if let Some(v) = line.strip_prefix(&format!("{key}=")) {
                return v.parse().unwrap();
            }
        }
    }
    panic!("{section}.{key} missing from {text}");
}

#[test]
fn pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let ckpt = dir.path().join("m.ckpt");
    let pred = dir.path().join("pred.txt");
    let report = dir.path().join("report.txt");
    ok(&with_tiny(&["synth", "--out", p(&data)]));
    assert!(data.join("manifest.tsv").exists());
    ok(&with_tiny(&[
        "train",
        "--data",
        p(&data),
        "--out",
        p(&ckpt),
    ]));
    let log = std::fs::read_to_string(dir.path().join("m.ckpt.log")).unwrap();
    assert!(log.starts_with("# diffant"));
    let steps: Vec<&str> = log.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(steps.len(), 4);
    assert!(steps.iter().all(|l| l.split('\t').count() == 8));

    ok(&[
        "anticipate",
        "--checkpoint",
        p(&ckpt),
        "--data",
        p(&data),
        "--out",
        p(&pred),
        "--keep-intermediate",
    ]);
    ok(&with_tiny(&[
        "eval",
        "--data",
        p(&data),
        "--predictions",
        p(&pred),
        "--out",
        p(&report),
    ]));
    let v = report_value(&report, "moc", "value");
    assert!((0.0..=1.0).contains(&v));
    assert!(dir.path().join("report.txt.csv").exists());
    let steps_csv = std::fs::read_to_string(dir.path().join("report.txt.steps.csv")).unwrap();
    assert_eq!(steps_csv.lines().count(), 11);

    let svg = dir.path().join("curve.svg");
    ok(&[
        "plot",
        "--kind",
        "curve",
        "--input",
        p(&dir.path().join("report.txt.steps.csv")),
        "--out",
        p(&svg),
    ]);
    assert!(std::fs::read_to_string(&svg).unwrap().starts_with("<svg"));
    let tl = dir.path().join("timeline.svg");
    ok(&with_tiny(&[
        "plot",
        "--kind",
        "timeline",
        "--predictions",
        p(&pred),
        "--data",
        p(&data),
        "--out",
        p(&tl),
    ]));
    assert!(dir.path().join("timeline.svg.csv").exists());

    // Deterministic anticipation is reproducible byte for byte.
    let again = dir.path().join("again.txt");
    ok(&[
        "anticipate",
        "--checkpoint",
        p(&ckpt),
        "--data",
        p(&data),
        "--out",
        p(&again),
        "--keep-intermediate",
    ]);
    assert_eq!(
        std::fs::read(&pred).unwrap(),
        std::fs::read(&again).unwrap()
    );

    // Stochastic samples feed the diversity protocols.
    let sto = dir.path().join("sto.txt");
    ok(&[
        "anticipate",
        "--checkpoint",
        p(&ckpt),
        "--data",
        p(&data),
        "--out",
        p(&sto),
        "--mode",
        "stochastic",
        "--samples",
        "3",
    ]);
    let shared = dir.path().join("shared.txt");
    ok(&[
        "anticipate",
        "--checkpoint",
        p(&ckpt),
        "--data",
        p(&data),
        "--out",
        p(&shared),
        "--mode",
        "stochastic",
        "--samples",
        "3",
        "--renoise",
        "shared",
    ]);
    assert!(shared.exists());
    let div = dir.path().join("div.txt");
    ok(&with_tiny(&[
        "eval",
        "--data",
        p(&data),
        "--predictions",
        p(&sto),
        "--out",
        p(&div),
        "--protocol",
        "div-top1",
        "--m",
        "1,3",
    ]));
    assert!(
        report_value(&div, "diversity.top1", "m3")
            >= report_value(&div, "diversity.top1", "m1") - 1e-12
    );
}

#[test]
fn ground_truth_predictions_score_one() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&with_tiny(&["synth", "--out", p(&data)]));
    let mapping = std::fs::read_to_string(data.join("mapping.txt")).unwrap();
    let names: Vec<&str> = mapping
        .lines()
        .filter_map(|l| l.split_whitespace().nth(1))
        .collect();
    assert!(!names.is_empty());
    // Rebuild the stride-3 test labels and dump the true future at alpha 0.3.
    let manifest = std::fs::read_to_string(data.join("manifest.tsv")).unwrap();
    let mut dump = String::new();
    for line in manifest.lines() {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols[3] != "test" {
            continue;
        }
        let labels = std::fs::read_to_string(data.join(cols[1])).unwrap();
        let frames: Vec<&str> = labels.lines().step_by(3).collect();
        let l = (0.3 * frames.len() as f64 + 1e-9).floor() as usize;
        dump.push_str(&format!("{}\t0\t0.3\t{}\n", cols[0], frames[l..].join(" ")));
    }
    let pred = dir.path().join("gt.txt");
    std::fs::write(&pred, dump).unwrap();
    let report = dir.path().join("r.txt");
    ok(&with_tiny(&[
        "eval",
        "--data",
        p(&data),
        "--predictions",
        p(&pred),
        "--out",
        p(&report),
        "--alpha",
        "0.3",
        "--beta",
        "0.5",
    ]));
    assert_eq!(report_value(&report, "moc", "value"), 1.0);

    // A mismatched observation fraction is a config error.
    let out = diffant(&with_tiny(&[
        "eval",
        "--data",
        p(&data),
        "--predictions",
        p(&pred),
        "--out",
        p(&report),
        "--alpha",
        "0.2",
    ]));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn exit_codes_follow_error_kind() {
    let dir = tempfile::tempdir().unwrap();
    let out = diffant(&[
        "synth",
        "--out",
        p(dir.path()),
        "--set",
        "model.no_such_key=1",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.no_such_key"));

    let out = diffant(&["synth", "--out", p(dir.path()), "--set", "train.lr=-1"]);
    assert_eq!(out.status.code(), Some(2));

    let out = diffant(&["no-such-command"]);
    assert_eq!(out.status.code(), Some(2));

    let missing = dir.path().join("missing");
    let out = diffant(&[
        "eval",
        "--data",
        p(&missing),
        "--predictions",
        "x",
        "--out",
        "y",
    ]);
    assert_eq!(out.status.code(), Some(3));

    let out = Command::new(env!("CARGO_BIN_EXE_diffant"))
        .args(["synth", "--out", p(dir.path())])
        .env("DIFFANT_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn corrupt_checkpoint_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&with_tiny(&["synth", "--out", p(&data)]));
    let ckpt = dir.path().join("bad.ckpt");
    std::fs::write(&ckpt, b"garbage").unwrap();
    let out = diffant(&[
        "anticipate",
        "--checkpoint",
        p(&ckpt),
        "--data",
        p(&data),
        "--out",
        p(&dir.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(3));
}
