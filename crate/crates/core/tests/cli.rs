use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use approx::assert_relative_eq;
use serde_json::Value;
use tempfile::TempDir;

use trafficgcn::graph::Topology;

const SMALL: &[&str] = &[
    "--window",
    "6",
    "--epochs",
    "2",
    "--set",
    "model.gcn_hidden=8",
    "--set",
    "model.hidden=8",
    "--set",
    "model.head_hidden=8",
];

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trafficgcn"))
        .args(args)
        .output()
        .expect("spawn binary")
}

fn ok(args: &[&str]) -> Output {
    let out = bin(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    /// Ring of `n` nodes and `steps` synthetic rows.
    fn new(n: usize, steps: usize) -> Self {
        let dir = TempDir::new().unwrap();
        let f = Self { dir };
        fs::write(
            f.path("topo.json"),
            Topology::ring(n).unwrap().to_json().unwrap(),
        )
        .unwrap();
        ok(&[
            "gen-synth",
            "--topology",
            &f.s("topo.json"),
            "--steps",
            &steps.to_string(),
            "--seed",
            "3",
            "--out",
            &f.s("data.csv"),
        ]);
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn s(&self, name: &str) -> String {
        self.path(name).to_str().unwrap().to_string()
    }

    fn train(&self, out: &str, extra: &[&str]) -> Output {
        let (data, topo, out) = (self.s("data.csv"), self.s("topo.json"), self.s(out));
        let mut args = vec!["train", "--data", &data, "--topology", &topo, "--out", &out];
        args.extend_from_slice(SMALL);
        args.extend_from_slice(extra);
        bin(&args)
    }
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn abilene() -> String {
    format!("{}/topologies/abilene.json", env!("CARGO_MANIFEST_DIR"))
}

#[test]
fn gen_synth_is_reproducible_and_sized() {
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for out in [&a, &b] {
        ok(&[
            "gen-synth",
            "--topology",
            &abilene(),
            "--steps",
            "2016",
            "--seed",
            "7",
            "--out",
            out.to_str().unwrap(),
        ]);
    }
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text, fs::read_to_string(&b).unwrap());
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("timestamp,ATLA,"));
    assert_eq!(lines.count(), 2016);
}

#[test]
fn gen_synth_rejects_bad_input() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("x.csv");
    let out = out.to_str().unwrap();
    assert_eq!(
        bin(&[
            "gen-synth",
            "--topology",
            &abilene(),
            "--steps",
            "0",
            "--out",
            out
        ])
        .status
        .code(),
        Some(2)
    );
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{\"nodes\": [").unwrap();
    let res = bin(&[
        "gen-synth",
        "--topology",
        bad.to_str().unwrap(),
        "--steps",
        "5",
        "--out",
        out,
    ]);
    assert_eq!(res.status.code(), Some(2));
    assert!(stderr(&res).starts_with("error:"));
}

#[test]
fn train_eval_predict_round_trip() {
    let f = Fixture::new(5, 300);
    let res = f.train("run", &["--json"]);
    assert!(res.status.success(), "{}", stderr(&res));
    let printed: Value = serde_json::from_slice(&res.stdout).unwrap();

    let metrics = read_json(&f.path("run/metrics.json"));
    assert_eq!(printed, metrics);
    for key in [
        "mae",
        "rmse",
        "r2",
        "config_fingerprint",
        "seed",
        "n_samples",
        "persistence",
        "best_epoch",
    ] {
        assert!(metrics.get(key).is_some(), "{key}");
    }
    assert_eq!(metrics["units"], "original");
    assert_eq!(metrics["epochs_run"], 2);

    let ck = read_json(&f.path("run/checkpoint.json"));
    assert_eq!(ck["version"], 1);
    assert!(ck["tensors"]["gcn.0.weight"]["shape"].is_array());

    let history = fs::read_to_string(f.path("run/history.csv")).unwrap();
    let rows: Vec<&str> = history.lines().filter(|l| !l.starts_with('#')).collect();
    assert!(history.starts_with("# seed: 0\n# config_fingerprint: "));
    assert_eq!(rows[0], "epoch,train_loss,val_mae,val_rmse,val_r2,seconds");
    assert_eq!(rows.len(), 3);
    assert!(rows[1].ends_with(','));

    let eval = ok(&[
        "eval",
        "--checkpoint",
        &f.s("run/checkpoint.json"),
        "--data",
        &f.s("data.csv"),
    ]);
    let report: Value = serde_json::from_slice(&eval.stdout).unwrap();
    for key in ["mae", "rmse", "r2"] {
        assert_relative_eq!(
            report[key].as_f64().unwrap(),
            metrics[key].as_f64().unwrap(),
            max_relative = 1e-12
        );
    }
    assert_eq!(report["config_fingerprint"], metrics["config_fingerprint"]);

    ok(&[
        "predict",
        "--checkpoint",
        &f.s("run/checkpoint.json"),
        "--data",
        &f.s("data.csv"),
        "--out",
        &f.s("pred.csv"),
    ]);
    let pred = fs::read_to_string(f.path("pred.csv")).unwrap();
    let rows: Vec<&str> = pred.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows[0], "timestamp,n0,n1,n2,n3,n4");
    assert_eq!(
        rows.len() - 1,
        metrics["n_samples"].as_u64().unwrap() as usize
    );
}

#[test]
fn multi_step_predictions_name_each_step() {
    let f = Fixture::new(3, 200);
    let res = f.train("run", &["--horizon", "2"]);
    assert!(res.status.success(), "{}", stderr(&res));
    ok(&[
        "predict",
        "--checkpoint",
        &f.s("run/checkpoint.json"),
        "--data",
        &f.s("data.csv"),
        "--split",
        "val",
        "--out",
        &f.s("p.csv"),
    ]);
    let text = fs::read_to_string(f.path("p.csv")).unwrap();
    let header = text.lines().find(|l| !l.starts_with('#')).unwrap();
    assert_eq!(header, "timestamp,n0@+1,n0@+2,n1@+1,n1@+2,n2@+1,n2@+2");
}

#[test]
fn learnable_checkpoint_stores_embeddings() {
    let f = Fixture::new(4, 200);
    let res = f.train("run", &["--adjacency", "learnable"]);
    assert!(res.status.success(), "{}", stderr(&res));
    let ck = read_json(&f.path("run/checkpoint.json"));
    assert_eq!(ck["tensors"]["adjacency_embeddings"]["shape"][0], 4);
}

#[test]
fn broken_checkpoints_and_mismatched_data_exit_2() {
    let f = Fixture::new(5, 200);
    assert!(f.train("run", &[]).status.success());

    fs::write(f.path("corrupt.json"), "{\"version\": 1, \"config\": ").unwrap();
    let res = bin(&[
        "eval",
        "--checkpoint",
        &f.s("corrupt.json"),
        "--data",
        &f.s("data.csv"),
    ]);
    assert_eq!(res.status.code(), Some(2));
    assert!(stderr(&res).contains("parse error"), "{}", stderr(&res));

    let other = Fixture::new(4, 200);
    let res = bin(&[
        "eval",
        "--checkpoint",
        &f.s("run/checkpoint.json"),
        "--data",
        &other.s("data.csv"),
    ]);
    assert_eq!(res.status.code(), Some(2));
    let msg = stderr(&res);
    assert!(msg.contains("N=4") && msg.contains("N=5"), "{msg}");
}

#[test]
fn divergence_exits_3() {
    let f = Fixture::new(4, 200);
    let res = f.train(
        "run",
        &[
            "--set",
            "train.learning_rate=1e300",
            "--set",
            "train.clip_norm=0",
        ],
    );
    assert_eq!(res.status.code(), Some(3), "{}", stderr(&res));
}

#[test]
fn ablate_writes_one_row_per_cell() {
    let f = Fixture::new(4, 200);
    let (data, topo, grid) = (f.s("data.csv"), f.s("topo.json"), f.s("grid.csv"));
    let mut args = vec![
        "ablate",
        "--data",
        &data,
        "--topology",
        &topo,
        "--axes",
        "temporal",
        "--out",
        &grid,
    ];
    args.extend_from_slice(SMALL);
    ok(&args);
    let text = fs::read_to_string(f.path("grid.csv")).unwrap();
    let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows[0], "delta,mae,rmse,r2,seed");
    assert_eq!(rows.len(), 3);
    let mut deltas: Vec<&str> = rows[1..]
        .iter()
        .map(|r| r.split(',').next().unwrap())
        .collect();
    deltas.sort();
    assert_eq!(deltas, ["temporal=gru", "temporal=lstm"]);

    let res = bin(&[
        "ablate",
        "--data",
        &f.s("data.csv"),
        "--topology",
        &f.s("topo.json"),
        "--axes",
        "temporal,depth",
        "--out",
        &f.s("x.csv"),
    ]);
    assert_eq!(res.status.code(), Some(2));
    assert!(stderr(&res).contains("depth"));
}

#[test]
fn config_file_and_overrides_combine() {
    let f = Fixture::new(4, 200);
    fs::write(f.path("run.ini"), "seed = 11\n[train]\nbatch_size = 8\n").unwrap();
    let res = f.train(
        "run",
        &[
            "--config",
            &f.s("run.ini"),
            "--set",
            "graph.adjacency=correlation",
        ],
    );
    assert!(res.status.success(), "{}", stderr(&res));
    let metrics = read_json(&f.path("run/metrics.json"));
    assert_eq!(metrics["seed"], 11);
    assert_eq!(metrics["config"]["train"]["batch_size"], 8);
    assert_eq!(metrics["config"]["graph"]["adjacency"], "correlation");

    fs::write(f.path("bad.ini"), "[train]\nbatch_size = many\n").unwrap();
    let res = f.train("run2", &["--config", &f.s("bad.ini")]);
    assert_eq!(res.status.code(), Some(2));
    assert!(stderr(&res).contains("line 2"), "{}", stderr(&res));
}
