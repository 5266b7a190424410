use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn vfusion(args: &[&str], cache: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vfusion"))
        .args(args)
        .env("VFUSION_CACHE_DIR", cache)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

const TINY: &str = r#"
name = "NAME"
out_dir = "runs"

[dataset]
adapter = "synthetic"
seed = 1

[dataset.params]
classes = 3
window_len = 16
train = 24
valid = 12
test = 12
unlabeled = 24
modalities = [
    { id = "a", channels = 3, noise = 0.1 },
    { id = "b", channels = 3, noise = 1.0 },
    { id = "c", channels = 3, noise = 0.5 },
]

[graph]
sources = [
    { name = "a", channels = 3, rate_hz = 32.0, window_len = 16 },
    { name = "b", channels = 3, rate_hz = 32.0, window_len = 16 },
    { name = "c", channels = 3, rate_hz = 32.0, window_len = 16 },
]
fused = [{ name = "a+b", kind = "late", inputs = ["a", "b"] }]
contrastive = ["a", "b", "c", "a+b"]
classification = ["a", "b", "c", "a+b"]
inference = ["b", "a+b"]
feature_dim = 8
num_classes = 3

[extractor]
stem_kernel = 3
block_kernel = 3
widths = [4, 6]
blocks_per_stage = 1

[train]
batch_size = 8
max_epochs = 2
steps_per_epoch = 2
seeds = [0, 1]
"#;

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        Self { dir: tempfile::tempdir().unwrap() }
    }

    fn cache(&self) -> PathBuf {
        self.dir.path().join("cache")
    }

    fn config(&self, name: &str, body: &str) -> String {
        let path = self.dir.path().join(format!("{name}.toml"));
        std::fs::write(&path, body.replace("NAME", name)).unwrap();
        path.to_string_lossy().into_owned()
    }

    fn run(&self, args: &[&str]) -> Output {
        vfusion(args, &self.cache())
    }

    fn exp(&self, name: &str) -> PathBuf {
        self.dir.path().join("runs").join(name)
    }
}

#[test]
fn unknown_key_exits_2_naming_it() {
    let ws = Workspace::new();
    let cfg = ws.config("bad", &TINY.replace("[train]", "[train]\nlearning_rat = 0.1"));
    let out = ws.run(&["prepare", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2), "{}", text(&out));
    assert!(text(&out).contains("learning_rat"), "{}", text(&out));
}

#[test]
fn usage_errors_exit_4() {
    let ws = Workspace::new();
    assert_eq!(ws.run(&[]).status.code(), Some(4));
    assert_eq!(ws.run(&["train", "--bogus"]).status.code(), Some(4));
    assert_eq!(ws.run(&["train", "--config", "/nonexistent/x.toml"]).status.code(), Some(4));
    assert_eq!(ws.run(&["--help"]).status.code(), Some(0));
}

#[test]
fn prepare_is_idempotent_and_honors_the_cache_override() {
    let ws = Workspace::new();
    let cfg = ws.config("prep", TINY);
    let first = ws.run(&["prepare", "--config", &cfg]);
    assert!(first.status.success(), "{}", text(&first));
    assert!(text(&first).contains("created"));
    assert!(text(&first).contains("train: 24 windows"));
    assert!(text(&first).contains("unlabeled: 24 windows"));
    let entries: Vec<_> = std::fs::read_dir(ws.cache()).unwrap().collect();
    assert_eq!(entries.len(), 1);
    let second = ws.run(&["prepare", "--config", &cfg]);
    assert!(text(&second).contains("up to date"), "{}", text(&second));
    assert!(!ws.dir.path().join("runs/cache").exists());
}

#[test]
fn missing_data_exits_3() {
    let ws = Workspace::new();
    let body = TINY.replace("adapter = \"synthetic\"\nseed = 1", "adapter = \"uci_har\"\nroot = \"nowhere\"");
    let body = body[..body.find("[dataset.params]").unwrap()].to_string() + &body[body.find("[graph]").unwrap()..];
    let cfg = ws.config("nodata", &body);
    let out = ws.run(&["prepare", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(3), "{}", text(&out));
    assert!(text(&out).contains("nowhere"));
}

/// Minimal copy of the UCI-HAR layout.
fn write_har(root: &Path, train_rows: usize, test_rows: usize) {
    for (tag, rows) in [("train", train_rows), ("test", test_rows)] {
        let dir = root.join(tag).join("Inertial Signals");
        std::fs::create_dir_all(&dir).unwrap();
        let (mut y, mut subj) = (String::new(), String::new());
        for r in 0..rows {
            writeln!(y, "{}", r % 6 + 1).unwrap();
            writeln!(subj, "{}", 1 + r / 5).unwrap();
        }
        std::fs::write(root.join(tag).join(format!("y_{tag}.txt")), y).unwrap();
        std::fs::write(root.join(tag).join(format!("subject_{tag}.txt")), subj).unwrap();
        for prefix in ["total_acc", "body_gyro"] {
            for axis in ["x", "y", "z"] {
                let mut body = String::new();
                for r in 0..rows {
                    let line: Vec<String> = (0..128).map(|t| format!("{:.4e}", ((r + t) % 17) as f32 * 0.1)).collect();
                    writeln!(body, " {}", line.join(" ")).unwrap();
                }
                std::fs::write(dir.join(format!("{prefix}_{axis}_{tag}.txt")), body).unwrap();
            }
        }
    }
}

#[test]
fn shipped_configs_parse_and_uci_har_prepares() {
    let ws = Workspace::new();
    let configs = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let local = ws.dir.path().join("configs");
    std::fs::create_dir_all(&local).unwrap();
    let mut seen = 0;
    for entry in std::fs::read_dir(&configs).unwrap() {
        let path = entry.unwrap().path();
        let body = std::fs::read_to_string(&path).unwrap();
        // Missing raw data is fine here; only schema errors (exit 2) are not.
        let copy = local.join(path.file_name().unwrap());
        std::fs::write(&copy, &body).unwrap();
        let out = ws.run(&["prepare", "--config", copy.to_str().unwrap()]);
        assert_ne!(out.status.code(), Some(2), "{}: {}", path.display(), text(&out));
        seen += 1;
    }
    assert!(seen >= 4);

    // The UCI-HAR config on a miniature copy of the distribution.
    let har = ws.dir.path().join("data/UCI HAR Dataset");
    write_har(&har, 50, 20);
    let out = ws.run(&["prepare", "--config", local.join("uci_har_afvf.toml").to_str().unwrap()]);
    assert!(out.status.success(), "{}", text(&out));
    let t = text(&out);
    assert!(t.contains("test: 20 windows"), "{t}");
    assert!(t.contains("train: 45 windows") && t.contains("valid: 5 windows"), "{t}");
}

#[test]
fn train_eval_report_round_trip() {
    let ws = Workspace::new();
    let cfg = ws.config("exp", TINY);
    let out = ws.run(&["train", "--config", &cfg]);
    assert!(out.status.success(), "{}", text(&out));
    let exp = ws.exp("exp");
    for seed in ["0", "1"] {
        for f in ["checkpoint.json", "graph.json", "config.toml", "epochs.csv", "run.json"] {
            assert!(exp.join(seed).join(f).is_file(), "missing {seed}/{f}");
        }
    }
    let csv = std::fs::read_to_string(exp.join("0/epochs.csv")).unwrap();
    assert!(csv.starts_with("epoch,lr,cls_loss,ctr_loss,valid_f1_a,valid_f1_a+b,valid_f1_b,valid_f1_c,monitored"), "{csv}");
    assert_eq!(csv.lines().count(), 3);

    // Rerun skips finished seeds; an unfinished seed is retrained identically.
    let original = std::fs::read(exp.join("1/checkpoint.json")).unwrap();
    std::fs::remove_file(exp.join("1/run.json")).unwrap();
    let out = ws.run(&["train", "--config", &cfg]);
    assert!(text(&out).contains("seed 0: already finished"), "{}", text(&out));
    assert!(!text(&out).contains("seed 1: already finished"));
    assert_eq!(std::fs::read(exp.join("1/checkpoint.json")).unwrap(), original);

    // --seed overrides the configured list.
    let out = ws.run(&["train", "--config", &cfg, "--seed", "7"]);
    assert!(out.status.success(), "{}", text(&out));
    assert!(exp.join("7/run.json").is_file());
    assert!(!exp.join("2").exists());

    // Single sensor, then the fused node.
    let out = ws.run(&["eval", "--config", &cfg, "--nodes", "b"]);
    assert!(out.status.success(), "{}", text(&out));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(exp.join("eval.json")).unwrap()).unwrap();
    assert_eq!(report["nodes"].as_object().unwrap().keys().collect::<Vec<_>>(), vec!["b"]);
    assert_eq!(report["nodes"]["b"]["f1"]["n"], 2);
    let out = ws.run(&["eval", "--config", &cfg, "--nodes", "a+b", "--seed", "0"]);
    assert!(out.status.success(), "{}", text(&out));
    let per_run: serde_json::Value = serde_json::from_slice(&std::fs::read(exp.join("0/eval.json")).unwrap()).unwrap();
    assert_eq!(per_run[0]["node"], "a+b");
    assert_eq!(per_run[0]["samples"], 12);

    let out = ws.run(&["eval", "--config", &cfg, "--nodes", "wrist"]);
    assert_eq!(out.status.code(), Some(4), "{}", text(&out));
    assert!(text(&out).contains("valid nodes: a, b, c, a+b"), "{}", text(&out));

    // A second experiment and a directory without metrics.
    let base = TINY
        .replace("fused = [{ name = \"a+b\", kind = \"late\", inputs = [\"a\", \"b\"] }]\n", "")
        .replace("contrastive = [\"a\", \"b\", \"c\", \"a+b\"]", "contrastive = []")
        .replace("classification = [\"a\", \"b\", \"c\", \"a+b\"]", "classification = [\"b\"]")
        .replace("inference = [\"b\", \"a+b\"]", "inference = [\"b\"]");
    let base_cfg = ws.config("baseline", &base);
    assert!(ws.run(&["train", "--config", &base_cfg]).status.success());
    let empty = ws.exp("empty");
    std::fs::create_dir_all(&empty).unwrap();
    let table_path = ws.dir.path().join("table.txt");
    let out = ws.run(&[
        "report",
        ws.exp("baseline").to_str().unwrap(),
        exp.to_str().unwrap(),
        empty.to_str().unwrap(),
        "--out",
        table_path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", text(&out));
    let table = std::fs::read_to_string(&table_path).unwrap();
    let rows: Vec<&str> = table.lines().skip(2).collect();
    assert_eq!(rows.len(), 3, "{table}");
    assert!(rows[0].starts_with("baseline") && rows[0].contains(" b "), "{table}");
    assert!(rows[1].starts_with("exp") && rows[1].contains("a+b"), "{table}");
    assert!(rows[2].starts_with("empty") && rows[2].contains("absent"), "{table}");
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));
}

#[test]
fn ablation_switch_changes_the_trained_graph() {
    let ws = Workspace::new();
    let body = TINY.replace("[train]", "[loss]\nexclude_fusion_inputs = true\n\n[train]").replace("inference = [\"b\", \"a+b\"]", "inference = [\"a+b\"]");
    let cfg = ws.config("ablated", &body);
    let out = ws.run(&["train", "--config", &cfg, "--seed", "0"]);
    assert!(out.status.success(), "{}", text(&out));
    let graph: serde_json::Value = serde_json::from_slice(&std::fs::read(ws.exp("ablated").join("0/graph.json")).unwrap()).unwrap();
    assert_eq!(graph["classification"], serde_json::json!(["c", "a+b"]));
    assert_eq!(graph["contrastive"], serde_json::json!(["c", "a+b"]));
}
