use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_gad::graph::{read_labels, save_graph, write_labels};
use rand_gad::metrics::auc;
use rand_gad::synth::{generate, SynthConfig};
use rand_gad::train::write_scores_csv;
use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_rand-gad"));
    c.env("RAND_GAD_THREADS", "2");
    c
}

fn run(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("binary runs");
    if !out.status.success() {
        eprintln!("stderr: {}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new(nodes: usize) -> Fixture {
        let dir = TempDir::new().unwrap();
        let g = generate(&SynthConfig {
            nodes,
            dims: 60,
            topic_words: 10,
            seed: 3,
            ..SynthConfig::default()
        })
        .unwrap();
        save_graph(
            &g,
            &dir.path().join("edges.txt"),
            &dir.path().join("attrs.csv"),
            None,
        )
        .unwrap();
        Fixture { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn inject(&self, out: &str, extra: &[&str]) -> Output {
        run(bin()
            .arg("inject")
            .arg("--edges")
            .arg(self.path("edges.txt"))
            .arg("--attrs")
            .arg(self.path("attrs.csv"))
            .arg("--out")
            .arg(self.path(out))
            .args(extra))
    }

    /// Injected graph under `anom/`, returned as (edges, attrs, labels).
    fn injected(&self) -> (PathBuf, PathBuf, PathBuf) {
        let dir = self.path("anom");
        if !dir.exists() {
            let out = self.inject(
                "anom",
                &[
                    "--p",
                    "5",
                    "--q",
                    "2",
                    "--attr-count",
                    "10",
                    "--k",
                    "20",
                    "--seed",
                    "1",
                ],
            );
            assert!(out.status.success());
        }
        (
            dir.join("edges.txt"),
            dir.join("attributes.csv"),
            dir.join("labels.txt"),
        )
    }

    fn train(&self, out: &str, extra: &[&str]) -> Output {
        let (e, a, l) = self.injected();
        run(bin()
            .arg("train")
            .arg("--edges")
            .arg(e)
            .arg("--attrs")
            .arg(a)
            .arg("--labels")
            .arg(l)
            .arg("--out")
            .arg(self.path(out))
            .args(extra))
    }
}

fn read(p: &Path) -> String {
    fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn inject_counts_and_is_reproducible() {
    let f = Fixture::new(120);
    let args = [
        "--p",
        "5",
        "--q",
        "2",
        "--attr-count",
        "10",
        "--k",
        "20",
        "--seed",
        "1",
    ];
    assert!(f.inject("a", &args).status.success());
    assert!(f.inject("b", &args).status.success());
    let labels = read_labels(&f.path("a/labels.txt")).unwrap();
    assert_eq!(labels.iter().filter(|&&v| v == 1).count(), 20);
    for name in [
        "edges.txt",
        "attributes.csv",
        "labels.txt",
        "anomalies.json",
    ] {
        assert_eq!(
            fs::read(f.path("a").join(name)).unwrap(),
            fs::read(f.path("b").join(name)).unwrap(),
            "{name}"
        );
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&read(&f.path("a/manifest.json"))).unwrap();
    assert_eq!(manifest["subcommand"], "inject");
    assert_eq!(manifest["seed"], 1);
    assert_eq!(
        manifest["inputs"]["edges"]["sha256"]
            .as_str()
            .unwrap()
            .len(),
        64
    );
    assert_eq!(manifest["config"]["attr-count"], "10");
}

#[test]
fn inject_nothing_gives_zero_labels() {
    let f = Fixture::new(60);
    assert!(f
        .inject("z", &["--q", "0", "--attr-count", "0"])
        .status
        .success());
    let labels = read_labels(&f.path("z/labels.txt")).unwrap();
    assert_eq!(labels.len(), 60);
    assert!(labels.iter().all(|&v| v == 0));
}

#[test]
fn pool_dumps_all_strategies() {
    let f = Fixture::new(60);
    let out = run(bin()
        .arg("pool")
        .arg("--edges")
        .arg(f.path("edges.txt"))
        .arg("--attrs")
        .arg(f.path("attrs.csv"))
        .arg("--out")
        .arg(f.path("pool"))
        .args(["--knn-k", "4"]));
    assert!(out.status.success());
    let text = read(&f.path("pool/pool.tsv"));
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("strategy\tcenter\tcandidate\tweight"));
    let knn = text.lines().filter(|l| l.starts_with("knn\t")).count();
    assert_eq!(knn, 60 * 4);
    for s in ["one-hop", "two-hop", "ppr"] {
        assert!(text.lines().any(|l| l.split('\t').next() == Some(s)), "{s}");
    }
}

#[test]
fn train_writes_artifacts_and_is_deterministic() {
    let f = Fixture::new(120);
    let args = [
        "--epochs",
        "12",
        "--lr",
        "5e-3",
        "--alpha",
        "0.5",
        "--mask-rate",
        "0.03",
        "--seed",
        "1",
    ];
    assert!(f.train("r1", &args).status.success());
    assert!(f.train("r2", &args).status.success());
    for name in [
        "scores.csv",
        "history.csv",
        "summary.json",
        "embeddings.csv",
        "config.txt",
        "manifest.json",
    ] {
        assert!(f.path("r1").join(name).exists(), "{name}");
    }
    assert_eq!(
        fs::read(f.path("r1/scores.csv")).unwrap(),
        fs::read(f.path("r2/scores.csv")).unwrap()
    );
    let summary: serde_json::Value =
        serde_json::from_str(&read(&f.path("r1/summary.json"))).unwrap();
    let a = summary["auc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&a));
    assert!(summary["ap"].as_f64().is_some());
    let history = read(&f.path("r1/history.csv"));
    assert_eq!(history.lines().count(), 13);

    // Re-running from the recorded config reproduces the scores.
    let (e, at, l) = f.injected();
    let out = run(bin()
        .arg("train")
        .args([
            "--edges",
            e.to_str().unwrap(),
            "--attrs",
            at.to_str().unwrap(),
            "--labels",
            l.to_str().unwrap(),
        ])
        .arg("--config")
        .arg(f.path("r1/config.txt"))
        .arg("--out")
        .arg(f.path("r3")));
    assert!(out.status.success());
    assert_eq!(
        fs::read(f.path("r1/scores.csv")).unwrap(),
        fs::read(f.path("r3/scores.csv")).unwrap()
    );
}

#[test]
fn alpha_one_drops_topology_from_loss() {
    let f = Fixture::new(80);
    assert!(f
        .train("a1", &["--epochs", "5", "--alpha", "1.0"])
        .status
        .success());
    let history = read(&f.path("a1/history.csv"));
    let header: Vec<&str> = history.lines().next().unwrap().split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    for line in history.lines().skip(1) {
        let v: Vec<f64> = line
            .split(',')
            .map(|x| x.parse().unwrap_or(f64::NAN))
            .collect();
        let (loss, topo, attr) = (v[col("loss")], v[col("l_topo")], v[col("l_attr")]);
        assert!(topo > 0.0);
        assert!(
            (loss - attr).abs() <= 1e-12 * attr.abs().max(1.0),
            "{loss} vs {attr}"
        );
    }
}

#[test]
fn alpha_sweep_writes_eleven_summaries() {
    let f = Fixture::new(60);
    let out = f.train("sweep", &["--epochs", "4", "--sweep", "alpha=0:1:0.1"]);
    assert!(out.status.success());
    let mut dirs: Vec<String> = fs::read_dir(f.path("sweep"))
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().join("summary.json").exists())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    dirs.sort();
    assert_eq!(dirs.len(), 11, "{dirs:?}");
    assert_eq!(dirs[0], "alpha=0.0");
    assert_eq!(dirs[3], "alpha=0.3");
    let s: serde_json::Value =
        serde_json::from_str(&read(&f.path("sweep/alpha=0.3/summary.json"))).unwrap();
    assert_eq!(s["config"]["model"]["alpha"].as_f64(), Some(0.3));
}

#[test]
fn sweep_subcommand_matches_train_flag() {
    let f = Fixture::new(60);
    let (e, a, _) = f.injected();
    let out = run(bin()
        .arg("sweep")
        .args([
            "--edges",
            e.to_str().unwrap(),
            "--attrs",
            a.to_str().unwrap(),
        ])
        .arg("--out")
        .arg(f.path("sw"))
        .args(["--epochs", "4", "--sweep", "mask-rate=0:0.1:0.05"]));
    assert!(out.status.success());
    for v in ["0.00", "0.05", "0.10"] {
        assert!(
            f.path("sw")
                .join(format!("mask-rate={v}/scores.csv"))
                .exists(),
            "{v}"
        );
    }
}

#[test]
fn eval_labels_as_scores_is_perfect() {
    let dir = TempDir::new().unwrap();
    let labels: Vec<u8> = (0..40).map(|i| u8::from(i % 7 == 0)).collect();
    let scores: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
    write_labels(&labels, &dir.path().join("l.txt")).unwrap();
    write_scores_csv(&scores, &dir.path().join("s.csv")).unwrap();
    let out = run(bin()
        .arg("eval")
        .arg("--scores")
        .arg(dir.path().join("s.csv"))
        .arg("--labels")
        .arg(dir.path().join("l.txt"))
        .arg("--out")
        .arg(dir.path().join("m")));
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("AUC\t1\n"), "{stdout}");
    let m: serde_json::Value =
        serde_json::from_str(&read(&dir.path().join("m/metrics.json"))).unwrap();
    assert_eq!(m["auc"].as_f64(), Some(1.0));
    assert_eq!(m["ap"].as_f64(), Some(1.0));
}

fn eval_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let dir = TempDir::new().unwrap();
    write_labels(labels, &dir.path().join("l.txt")).unwrap();
    write_scores_csv(scores, &dir.path().join("s.csv")).unwrap();
    let out = run(bin()
        .arg("eval")
        .arg("--scores")
        .arg(dir.path().join("s.csv"))
        .arg("--labels")
        .arg(dir.path().join("l.txt")));
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    let line = stdout.lines().find(|l| l.starts_with("AUC")).unwrap();
    line.split('\t').nth(1).unwrap().parse().unwrap()
}

#[test]
fn eval_shuffled_file_matches_library() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    let mut pairs: Vec<(f64, u8)> = (0..150)
        .map(|i| ((i % 23) as f64 * 0.37, u8::from(i % 5 == 0)))
        .collect();
    pairs.shuffle(&mut rng);
    let (scores, labels): (Vec<f64>, Vec<u8>) = pairs.into_iter().unzip();
    assert_eq!(eval_auc(&scores, &labels), auc(&scores, &labels).unwrap());
}

#[test]
fn eval_tied_file_matches_pairwise_oracle() {
    // 100 rows over 4 score levels: most pairs tie.
    let labels: Vec<u8> = (0..100).map(|i| u8::from(i % 3 == 0)).collect();
    let scores: Vec<f64> = (0..100).map(|i| ((i * 7) % 4) as f64).collect();
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for i in 0..100 {
        for j in 0..100 {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                wins += match scores[i].partial_cmp(&scores[j]).unwrap() {
                    std::cmp::Ordering::Greater => 1.0,
                    std::cmp::Ordering::Equal => 0.5,
                    std::cmp::Ordering::Less => 0.0,
                };
            }
        }
    }
    assert_eq!(eval_auc(&scores, &labels), wins / pairs);
}

#[test]
fn exit_codes() {
    let f = Fixture::new(40);
    fs::write(f.path("bad.cfg"), "alpah=0.3\n").unwrap();
    let out = f.train("x", &["--config", f.path("bad.cfg").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let out = f.train("x", &["--sweep", "nope=0:1:0.5"]);
    assert_eq!(out.status.code(), Some(2));
    let out = f.train("x", &["--alpha", "1.5"]);
    assert_eq!(out.status.code(), Some(2));

    fs::write(f.path("broken.txt"), "0 1\nzero 2\n").unwrap();
    let out = run(bin()
        .arg("train")
        .arg("--edges")
        .arg(f.path("broken.txt"))
        .arg("--attrs")
        .arg(f.path("attrs.csv"))
        .arg("--out")
        .arg(f.path("y")));
    assert_eq!(out.status.code(), Some(3));

    write_scores_csv(&[0.1, 0.2, 0.3], &f.path("s.csv")).unwrap();
    write_labels(&[0, 1], &f.path("l.txt")).unwrap();
    let out = run(bin()
        .arg("eval")
        .arg("--scores")
        .arg(f.path("s.csv"))
        .arg("--labels")
        .arg(f.path("l.txt")));
    assert_eq!(out.status.code(), Some(3));

    let out = run(bin().arg("train").arg("--bogus"));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn overflowing_attributes_exit_numeric() {
    let f = Fixture::new(60);
    let (e, a, l) = f.injected();
    let mut rows: Vec<String> = read(&a).lines().map(String::from).collect();
    let first: Vec<&str> = rows[0].split(',').collect();
    let mut patched = vec!["1e200".to_string()];
    patched.extend(first[1..].iter().map(|s| s.to_string()));
    rows[0] = patched.join(",");
    fs::write(f.path("huge.csv"), rows.join("\n") + "\n").unwrap();
    let out = run(bin()
        .arg("train")
        .arg("--edges")
        .arg(e)
        .arg("--attrs")
        .arg(f.path("huge.csv"))
        .arg("--labels")
        .arg(l)
        .arg("--out")
        .arg(f.path("nan"))
        .args(["--epochs", "5"]));
    assert_eq!(
        out.status.code(),
        Some(4),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(!f.path("nan/scores.csv").exists());
    assert!(fs::read_dir(f.path("nan")).unwrap().any(|e| e
        .unwrap()
        .file_name()
        .to_string_lossy()
        .starts_with("last_good")));
}
