use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use caser::checkpoint;
use caser::data::read_instance_cache;
use caser::synthetic::{planted_sequences, PlantedConfig};

const BIN: &str = env!("CARGO_BIN_EXE_caser");

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let seqs = planted_sequences(
            &PlantedConfig {
                users: 80,
                items: 100,
                clusters: 5,
                sequence_len: 20,
                ..Default::default()
            },
            3,
        )
        .unwrap();
        let mut tsv = String::new();
        for s in &seqs {
            for (t, i) in s.items.iter().enumerate() {
                tsv.push_str(&format!("user{}\titem{}\t{}\n", s.user, i, 1000 + t));
            }
        }
        fs::write(dir.path().join("data.tsv"), tsv).unwrap();
        fs::write(
            dir.path().join("run.cfg"),
            format!(
                "data = {}\nd = 6\nL = 3\nT = 2\nn_h = 2\nn_v = 2\nepochs = 2\nmin_feedback = 2\n",
                dir.path().join("data.tsv").display()
            ),
        )
        .unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(BIN)
            .args(args)
            .env("CASER_THREADS", "2")
            .current_dir(self.dir.path())
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_twice_gives_identical_checkpoints_and_logs_config() {
    let w = Workspace::new();
    let (a, b) = (w.path("a.casr"), w.path("b.casr"));
    let out = w.run(&[
        "train",
        "--config",
        "run.cfg",
        "--seed",
        "42",
        "--out",
        s(&a),
        "--log",
        "log.csv",
    ]);
    assert!(out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("seed = 42") && stderr.contains("dim = 6"));
    w.ok(&["train", "--config", "run.cfg", "--seed", "42", "--out", s(&b)]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let log = fs::read_to_string(w.path("log.csv")).unwrap();
    assert_eq!(log.lines().next(), Some("epoch,train_loss,val_MAP,val_Prec@1,wall_ms"));
    assert_eq!(log.lines().count(), 3);

    w.ok(&["train", "--config", "run.cfg", "--seed", "43", "--out", s(&b)]);
    assert_ne!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn evaluate_recommend_and_inspect_a_checkpoint() {
    let w = Workspace::new();
    let m = w.path("m.casr");
    w.ok(&["train", "-c", "run.cfg", "--out", s(&m)]);

    let csv = w.ok(&[
        "evaluate",
        "-c",
        "run.cfg",
        "--checkpoint",
        s(&m),
        "--csv",
        "--per-user",
        "pu.tsv",
    ]);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "prec@1,prec@5,prec@10,recall@1,recall@5,recall@10,MAP,users");
    assert_eq!(lines[1].split(',').count(), 8);
    assert!(fs::read_to_string(w.path("pu.tsv")).unwrap().lines().count() > 1);

    let rec = w.ok(&[
        "recommend",
        "-c",
        "run.cfg",
        "--checkpoint",
        s(&m),
        "--user",
        "user5",
        "-N",
        "7",
    ]);
    assert_eq!(rec.lines().count(), 8);
    assert!(rec
        .lines()
        .skip(1)
        .all(|l| l.split('\t').nth(1).unwrap().starts_with("item")));

    let dump = w.ok(&["inspect", "--checkpoint", s(&m), "--filters"]);
    let (params, _) = checkpoint::load(&m).unwrap();
    let rows: Vec<Vec<f64>> = dump
        .lines()
        .skip(1)
        .map(|l| l.split(',').skip(1).map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), params.vertical.rows());
    for (k, row) in rows.iter().enumerate() {
        assert_eq!(row.as_slice(), params.vertical.row(k));
    }
}

#[test]
fn grad_check_passes() {
    let w = Workspace::new();
    let out = w.ok(&["grad-check"]);
    assert!(out.contains("PASS"));
    for name in ["user_embedding", "vertical_filters", "output_bias"] {
        assert!(out.contains(name));
    }
}

#[test]
fn sweep_runs_every_grid_point() {
    let w = Workspace::new();
    let out = w.run(&["sweep", "-c", "run.cfg", "--grid", "d=4,6", "--grid", "L=2,3"]);
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert_eq!(stdout.lines().next(), Some("d,L,val_MAP,best_epoch"));
    assert_eq!(stdout.lines().count(), 5);
    assert!(String::from_utf8_lossy(&out.stderr).contains("best: "));
}

#[test]
fn mine_rules_prepare_and_ablate() {
    let w = Workspace::new();
    let out = w.ok(&["mine-rules", "-c", "run.cfg", "--out", "rules.csv", "--max-order", "2"]);
    assert!(out.starts_with("rules ") && out.contains(" SI "));
    let rules = fs::read_to_string(w.path("rules.csv")).unwrap();
    assert_eq!(
        rules.lines().next(),
        Some("antecedent,consequent,skip,support,confidence")
    );

    let stats = w.ok(&["prepare", "-c", "run.cfg", "--out", "inst.bin"]);
    let cache = read_instance_cache(fs::File::open(w.path("inst.bin")).unwrap()).unwrap();
    assert!(stats.contains(&format!("instances     {}", cache.instances.len())));
    assert_eq!((cache.markov_order, cache.targets), (3, 2));

    let table = w.ok(&[
        "ablate", "-c", "run.cfg", "--masks", "p,pvh", "--pop", "--set", "epochs=1",
    ]);
    let labels: Vec<&str> = table.lines().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(labels, ["mask", "p", "pvh", "pop"]);
}

#[test]
fn exit_codes() {
    let w = Workspace::new();
    assert_eq!(
        w.run(&["train", "-c", "run.cfg", "--set", "bogus=1", "--out", "x"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(w.run(&["train", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(
        w.run(&["ablate", "-c", "run.cfg", "--masks", "q"]).status.code(),
        Some(2)
    );
    assert_eq!(
        w.run(&["train", "--data", "missing.tsv", "--out", "x"]).status.code(),
        Some(1)
    );
    let out = w.run(&["inspect", "--checkpoint", "run.cfg"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad magic"));
}
