use std::path::Path;
use std::process::{Command, Output};

fn dcgnn(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dcgnn"))
        .current_dir(dir)
        .env_remove("DCGNN_OUT_DIR")
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn generate_complete_graph_writes_45_edges() {
    let tmp = tempfile::tempdir().unwrap();
    let o = dcgnn(
        tmp.path(),
        &["--out-dir", "er", "generate", "erdos-renyi", "--n", "10", "--p", "1"],
    );
    assert!(o.status.success());
    let edges = std::fs::read_to_string(tmp.path().join("er/edges.csv")).unwrap();
    assert_eq!(edges.lines().count(), 45);
    assert!(tmp.path().join("er/manifest.json").exists());
}

#[test]
fn sinkhorn_two_by_two_fixture() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("c.csv"), "0,1\n1,0\n").unwrap();
    let o = dcgnn(
        tmp.path(),
        &[
            "--out-dir",
            "s",
            "sinkhorn",
            "--cost",
            "c.csv",
            "--lambda",
            "1",
            "--tolerance",
            "1e-12",
        ],
    );
    assert!(o.status.success());
    let text = std::fs::read_to_string(tmp.path().join("s/coupling.csv")).unwrap();
    let p: Vec<f64> = text
        .split([',', '\n'])
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().unwrap())
        .collect();
    let big = 0.5 / (1.0 + (-1f64).exp());
    for (got, want) in p.iter().zip([big, 0.5 - big, 0.5 - big, big]) {
        assert!((got - want).abs() < 1e-10);
    }
}

#[test]
fn resistance_on_a_three_node_path() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("e.csv"), "0,1\n1,2\n").unwrap();
    std::fs::write(tmp.path().join("f.csv"), "1\n1\n1\n").unwrap();
    let o = dcgnn(
        tmp.path(),
        &[
            "--out-dir",
            "r",
            "resistance",
            "--edges",
            "e.csv",
            "--features",
            "f.csv",
            "--global",
            "0,1",
            "--local",
            "0,1",
        ],
    );
    assert!(o.status.success());
    let line = stdout(&o);
    let r: f64 = line.trim().strip_prefix("r_tot ").unwrap().parse().unwrap();
    assert!((r - 4.0).abs() < 1e-12);
    assert!(tmp.path().join("r/heatmap.csv").exists());
}

#[test]
fn missing_feature_file_exits_2_and_names_it() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("e.csv"), "0,1\n").unwrap();
    let o = dcgnn(
        tmp.path(),
        &["train", "--edges", "e.csv", "--features", "absent_features.csv"],
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("absent_features.csv"));
}

#[test]
fn training_is_reproducible_and_rerunnable() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let gen = [
        "--out-dir",
        "g",
        "generate",
        "sbm",
        "--n",
        "40",
        "--p-in",
        "0.05",
        "--p-out",
        "0.2",
        "--seed",
        "2",
    ];
    assert!(dcgnn(d, &gen).status.success());
    let train = |out: &str| {
        let o = dcgnn(
            d,
            &[
                "--out-dir",
                out,
                "train",
                "--graph",
                "g/graph.json",
                "--epochs",
                "6",
                "--seed",
                "4",
            ],
        );
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    };
    train("a");
    train("b");
    let a = std::fs::read(d.join("a/metrics.csv")).unwrap();
    assert_eq!(a, std::fs::read(d.join("b/metrics.csv")).unwrap());
    assert_eq!(String::from_utf8_lossy(&a).lines().count(), 7);

    let o = Command::new(env!("CARGO_BIN_EXE_dcgnn"))
        .current_dir(d)
        .env("DCGNN_OUT_DIR", "c")
        .args(["rerun", "a/manifest.json"])
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_eq!(a, std::fs::read(d.join("c/metrics.csv")).unwrap());

    let o = dcgnn(
        d,
        &[
            "--out-dir",
            "e",
            "eval",
            "--graph",
            "g/graph.json",
            "--checkpoint",
            "a/checkpoint.json",
        ],
    );
    assert!(o.status.success());
    assert!(stdout(&o).starts_with("accuracy"));
}

#[test]
fn divergence_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert!(dcgnn(
        d,
        &[
            "--out-dir",
            "g",
            "generate",
            "sbm",
            "--n",
            "30",
            "--p-in",
            "0.1",
            "--p-out",
            "0.2"
        ]
    )
    .status
    .success());
    let o = dcgnn(
        d,
        &[
            "--out-dir",
            "t",
            "train",
            "--graph",
            "g/graph.json",
            "--epochs",
            "3",
            "--lr",
            "1e300",
        ],
    );
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn convergence_check_trace_and_guard() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let o = dcgnn(
        d,
        &[
            "--out-dir",
            "c",
            "convergence-check",
            "--er-n",
            "20",
            "--er-p",
            "0.3",
            "--layers",
            "20",
        ],
    );
    assert!(o.status.success(), "{}", stdout(&o));
    let trace = std::fs::read_to_string(d.join("c/trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 1 + 20);
    let o = dcgnn(
        d,
        &[
            "--out-dir",
            "x",
            "convergence-check",
            "--er-n",
            "20",
            "--er-p",
            "0.3",
            "--message-transform",
        ],
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gradcheck_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let o = dcgnn(tmp.path(), &["--out-dir", "g", "gradcheck"]);
    assert!(o.status.success(), "{}", stdout(&o));
}

#[test]
fn homophily_of_generated_sbm() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert!(dcgnn(
        d,
        &[
            "--out-dir",
            "g",
            "generate",
            "sbm",
            "--n",
            "60",
            "--p-in",
            "0.0",
            "--p-out",
            "0.3"
        ]
    )
    .status
    .success());
    let o = dcgnn(d, &["--out-dir", "h", "homophily", "--graph", "g/graph.json"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim(), "edge homophily 0.0000");
}
