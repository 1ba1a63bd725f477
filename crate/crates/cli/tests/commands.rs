use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_crossat");

const DESK: &str = "\
features = f.txt
words = w.txt
checkpoint = m.ckpt
metrics = metrics.csv
index = idx.txt
report = report.txt
embeddings = emb.txt
ablation_out = ablation.csv
synth_classes = 5
synth_per_class = 10
synth_d_in = 16
d_shared = 8
batch_size = 32
epochs = 15
";

fn crossat(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .current_dir(dir)
        .env("CROSSAT_CONFIG", "run.cfg")
        .args(args)
        .output()
        .expect("spawn crossat")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = crossat(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.cfg"), DESK).unwrap();
    dir
}

fn first_sketch_of_unseen(dir: &Path) -> String {
    let gallery = std::fs::read_to_string(dir.join("idx.txt")).unwrap();
    let label = gallery.lines().nth(1).unwrap().split('\t').nth(1).unwrap().to_string();
    let feats = std::fs::read_to_string(dir.join("f.txt")).unwrap();
    feats
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.split('\t').collect::<Vec<_>>())
        .find(|f| f[1] == "sketch" && f[2] == label)
        .map(|f| f[0].to_string())
        .unwrap()
}

#[test]
fn synth_train_eval_end_to_end() {
    let dir = workspace();
    let p = dir.path();
    ok(p, &["synth"]);
    ok(p, &["train"]);
    for f in ["f.txt", "w.txt", "m.ckpt", "metrics.csv"] {
        assert!(p.join(f).exists(), "{f} missing");
    }
    let summary = ok(p, &["eval"]);
    let fields: Vec<&str> = summary.trim().split(',').collect();
    assert_eq!(fields[0], "sketch_to_image");
    let map: f64 = fields[2].parse().unwrap();
    assert!((0.0..=1.0).contains(&map));
    assert!(std::fs::read_to_string(p.join("report.txt")).unwrap().starts_with("#crossat-eval v1"));

    ok(p, &["encode"]);
    let emb = std::fs::read_to_string(p.join("emb.txt")).unwrap();
    assert!(emb.starts_with("#crossat-embeddings v1"));
    assert_eq!(emb.lines().count(), 101);
}

#[test]
fn query_prints_exactly_k_lines() {
    let dir = workspace();
    let p = dir.path();
    ok(p, &["synth"]);
    ok(p, &["train", "--set", "epochs=3"]);
    ok(p, &["index"]);
    let id = first_sketch_of_unseen(p);
    let out = ok(p, &["query", &id, "--set", "k=5"]);
    assert_eq!(out.lines().count(), 5);
    let dists: Vec<f64> = out.lines().map(|l| l.split('\t').nth(2).unwrap().parse().unwrap()).collect();
    assert!(dists.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn missing_checkpoint_is_a_usage_error() {
    let dir = workspace();
    let p = dir.path();
    ok(p, &["synth"]);
    for cmd in [&["eval"][..], &["query", "s_000_0000"][..]] {
        let out = crossat(p, cmd);
        assert_eq!(out.status.code(), Some(2), "{cmd:?}");
        assert!(out.stdout.is_empty());
        assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint"));
    }
}

#[test]
fn unknown_key_suggests_nearest() {
    let dir = workspace();
    let out = crossat(dir.path(), &["config", "--set", "metricc=hamming"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("\"metric\""));
}

#[test]
fn overrides_beat_the_config_file() {
    let dir = workspace();
    let text = ok(dir.path(), &["config", "--set", "lambda3=0.5", "--set", "epochs=7"]);
    assert!(text.lines().any(|l| l == "lambda3 = 0.5"));
    assert!(text.lines().any(|l| l == "epochs = 7"));
    assert!(text.lines().any(|l| l == "d_shared = 8"));
}

#[test]
fn ablate_emits_one_row_per_cell() {
    let dir = workspace();
    let p = dir.path();
    ok(p, &["synth"]);
    let out = ok(p, &["ablate", "--set", "epochs=2", "--set", "ablate_seeds=0", "--set", "null_shuffles=2"]);
    // header plus 2^3 cells of the default switch grid
    assert_eq!(out.lines().count(), 1 + 8);
    let csv = std::fs::read_to_string(p.join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2 + 8);
}
