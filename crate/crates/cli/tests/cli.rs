use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ttt4rec"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn ttt4rec")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Synthetic raw log: `users` users with 6..=12 interactions over 150 items.
fn raw_log(users: u32, seed: u64) -> Vec<(u32, u32, i64)> {
    let mut state = seed
        .wrapping_mul(6364136223846793005)
        .wrapping_add(1442695040888963407);
    let mut next = move |m: u64| {
        state = state
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        (state >> 33) % m
    };
    let mut rows = Vec::new();
    for u in 1..=users {
        let len = 6 + next(7);
        for t in 0..len {
            rows.push((u, 1 + next(150) as u32, 1000 + t as i64));
        }
    }
    rows
}

fn write_amazon(path: &Path, users: u32, seed: u64) {
    let text: String = raw_log(users, seed)
        .iter()
        .map(|(u, i, t)| format!("U{u},I{i},4.0,{t}\n"))
        .collect();
    fs::write(path, text).unwrap();
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        write_amazon(&root.join("raw.csv"), 300, 1);
        let raw = root.join("raw.csv");
        let ds = root.join("ds.txt");
        ok(&[
            "ingest",
            "--format",
            "amazon",
            "--input",
            p(&raw),
            "--out",
            p(&ds),
            "--max-seq-len",
            "10",
        ]);
        fs::write(
            root.join("run.toml"),
            "[data]\ndataset = \"ds.txt\"\n\n[model]\nembed_dim = 8\nmlp_hidden = 16\n\n\
             [train]\nepochs = 2\nbatch_size = 64\n",
        )
        .unwrap();
        Fixture { _dir: dir, root }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn ingest_is_deterministic_and_prints_a_summary() {
    let f = Fixture::new();
    let again = f.path("again.txt");
    let out = ok(&[
        "ingest",
        "--format",
        "amazon",
        "--input",
        p(&f.path("raw.csv")),
        "--out",
        p(&again),
        "--max-seq-len",
        "10",
    ]);
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("users=300"), "{stdout}");
    for key in ["items=", "interactions=", "density="] {
        assert!(stdout.contains(key), "{stdout}");
    }
    assert_eq!(
        fs::read(f.path("ds.txt")).unwrap(),
        fs::read(&again).unwrap()
    );
}

#[test]
fn wrong_format_flag_is_a_parse_error_with_a_sample() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("ratings.dat");
    let text: String = raw_log(20, 2)
        .iter()
        .map(|(u, i, t)| format!("{u}::{i}::5::{t}\n"))
        .collect();
    fs::write(&raw, text).unwrap();
    let out = run(&[
        "ingest",
        "--format",
        "amazon",
        "--input",
        p(&raw),
        "--out",
        p(&dir.path().join("x.txt")),
    ]);
    assert!(!out.status.success());
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.contains("::"), "no line sample in: {stderr}");
    assert!(!dir.path().join("x.txt").exists());
}

#[test]
fn train_writes_a_self_describing_run_and_honors_overrides() {
    let f = Fixture::new();
    let run_dir = f.path("run");
    ok(&[
        "train",
        "--config",
        p(&f.path("run.toml")),
        "--epochs",
        "1",
        "--out",
        p(&run_dir),
    ]);

    let rows = csv_rows(&run_dir.join("metrics.csv"));
    assert_eq!(
        rows[0],
        [
            "epoch",
            "train_loss",
            "ndcg5",
            "ndcg10",
            "hr5",
            "hr10",
            "seconds"
        ]
    );
    assert_eq!(rows.len(), 2, "one epoch, one row");
    assert!(run_dir.join("checkpoints/epoch-001.ckpt").exists());
    assert!(run_dir.join("model.ckpt").exists());
    assert!(run_dir.join("report.json").exists());
    assert_eq!(
        fs::read_to_string(run_dir.join("metrics.jsonl"))
            .unwrap()
            .lines()
            .count(),
        1
    );

    let resolved: toml::Value =
        toml::from_str(&fs::read_to_string(run_dir.join("config.toml")).unwrap()).unwrap();
    assert_eq!(resolved["train"]["epochs"].as_integer(), Some(1));
    assert_eq!(resolved["train"]["lr"].as_float(), Some(0.001));
    assert_eq!(resolved["train"]["seed"].as_integer(), Some(42));
    assert_eq!(resolved["model"]["max_seq_len"].as_integer(), Some(10));

    // The resolved config alone reproduces the run.
    let again = f.path("again");
    ok(&[
        "train",
        "--config",
        p(&run_dir.join("config.toml")),
        "--out",
        p(&again),
    ]);
    assert_eq!(
        fs::read(run_dir.join("metrics.csv")).unwrap(),
        fs::read(again.join("metrics.csv")).unwrap()
    );
    assert_eq!(
        fs::read(run_dir.join("model.ckpt")).unwrap(),
        fs::read(again.join("model.ckpt")).unwrap()
    );
}

#[test]
fn unknown_config_key_fails() {
    let f = Fixture::new();
    let bad = f.path("bad.toml");
    fs::write(&bad, "[data]\ndataset = \"ds.txt\"\n[train]\nepoch = 3\n").unwrap();
    let out = run(&["train", "--config", p(&bad), "--out", p(&f.path("r"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("epoch"));
}

#[test]
fn eval_reproduces_the_final_training_row() {
    let f = Fixture::new();
    let run_dir = f.path("run");
    ok(&[
        "train",
        "--config",
        p(&f.path("run.toml")),
        "--out",
        p(&run_dir),
    ]);
    let eval_dir = f.path("eval");
    let out = ok(&[
        "eval",
        "--checkpoint",
        p(&run_dir.join("model.ckpt")),
        "--dataset",
        p(&f.path("ds.txt")),
        "--out",
        p(&eval_dir),
    ]);
    let stdout = String::from_utf8(out.stdout).unwrap();
    for key in ["NDCG@5=", "NDCG@10=", "HR@5=", "HR@10="] {
        assert!(stdout.contains(key), "{stdout}");
    }
    let train_rows = csv_rows(&run_dir.join("metrics.csv"));
    let eval_rows = csv_rows(&eval_dir.join("eval.csv"));
    assert_eq!(train_rows[0], eval_rows[0]);
    assert_eq!(eval_rows.len(), 2);
    let last = train_rows.last().unwrap();
    assert_eq!(last[2..6], eval_rows[1][2..6]);
    assert!(eval_dir.join("eval.json").exists());
}

#[test]
fn untrained_checkpoint_scores_near_chance() {
    let f = Fixture::new();
    let run_dir = f.path("run");
    ok(&[
        "train",
        "--config",
        p(&f.path("run.toml")),
        "--epochs",
        "1",
        "--lr",
        "0",
        "--out",
        p(&run_dir),
    ]);
    let eval_dir = f.path("eval");
    ok(&[
        "eval",
        "--checkpoint",
        p(&run_dir.join("model.ckpt")),
        "--dataset",
        p(&f.path("ds.txt")),
        "--out",
        p(&eval_dir),
    ]);
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(eval_dir.join("eval.json")).unwrap()).unwrap();
    let hr10 = json["hr10"].as_f64().unwrap();
    // 300 users: one standard deviation of the chance rate is about 0.017.
    assert!((hr10 - 0.10).abs() < 0.06, "HR@10 {hr10}");
}

#[test]
fn corrupted_checkpoint_fails() {
    let f = Fixture::new();
    let run_dir = f.path("run");
    ok(&[
        "train",
        "--config",
        p(&f.path("run.toml")),
        "--epochs",
        "1",
        "--out",
        p(&run_dir),
    ]);
    let ckpt = run_dir.join("model.ckpt");
    let mut bytes = fs::read(&ckpt).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    fs::write(&ckpt, &bytes).unwrap();
    let out = run(&[
        "eval",
        "--checkpoint",
        p(&ckpt),
        "--dataset",
        p(&f.path("ds.txt")),
    ]);
    assert!(!out.status.success());

    fs::write(&ckpt, &bytes[..mid]).unwrap();
    let out = run(&[
        "eval",
        "--checkpoint",
        p(&ckpt),
        "--dataset",
        p(&f.path("ds.txt")),
    ]);
    assert!(!out.status.success());
}

#[test]
fn vocab_mismatch_names_both_sizes() {
    let f = Fixture::new();
    let run_dir = f.path("run");
    ok(&[
        "train",
        "--config",
        p(&f.path("run.toml")),
        "--epochs",
        "1",
        "--out",
        p(&run_dir),
    ]);
    // Fewer users draw fewer distinct items.
    let small_raw = f.path("small.csv");
    let text: String = raw_log(300, 1)
        .iter()
        .filter(|(_, i, _)| *i <= 120)
        .map(|(u, i, t)| format!("U{u},I{i},4.0,{t}\n"))
        .collect();
    fs::write(&small_raw, text).unwrap();
    let small = f.path("small.txt");
    ok(&[
        "ingest",
        "--format",
        "amazon",
        "--input",
        p(&small_raw),
        "--out",
        p(&small),
    ]);
    let out = run(&[
        "eval",
        "--checkpoint",
        p(&run_dir.join("model.ckpt")),
        "--dataset",
        p(&small),
    ]);
    assert!(!out.status.success());
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.contains("150") && stderr.contains("120"), "{stderr}");
}

#[test]
fn grid_enumerates_cells_and_resumes() {
    let f = Fixture::new();
    let cfg = f.path("grid.toml");
    fs::write(
        &cfg,
        "[data]\ndataset = \"ds.txt\"\n\n[model]\nembed_dim = 8\nmlp_hidden = 16\n\n\
         [train]\nepochs = 1\nbatch_size = 64\n\n\
         [grid]\ninitializer_range = [0.01, 0.1]\nmini_batch_size = [1, 5]\n",
    )
    .unwrap();
    let root = f.path("grid");
    ok(&["grid", "--config", p(&cfg), "--out", p(&root)]);
    let rows = csv_rows(&root.join("grid.csv"));
    assert_eq!(rows.len(), 5);
    assert_eq!(
        rows[0],
        [
            "initializer_range",
            "mini_batch_size",
            "status",
            "ndcg5",
            "ndcg10",
            "hr5",
            "hr10"
        ]
    );
    let cells: Vec<(String, String)> = rows[1..]
        .iter()
        .map(|r| (r[0].clone(), r[1].clone()))
        .collect();
    let want = [("0.01", "1"), ("0.01", "5"), ("0.1", "1"), ("0.1", "5")];
    assert_eq!(cells, want.map(|(a, b)| (a.to_string(), b.to_string())));
    assert!(rows[1..].iter().all(|r| r[2] == "ok"));
    let first = fs::read(root.join("grid.csv")).unwrap();

    // Simulate an interrupted run: one cell never finished.
    let cell = root.join("sigma-0.1_b-1");
    fs::remove_file(cell.join("report.json")).unwrap();
    let out = ok(&["grid", "--config", p(&cfg), "--out", p(&root)]);
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert_eq!(stderr.matches("skipping").count(), 3, "{stderr}");
    assert_eq!(stderr.matches("training").count(), 1, "{stderr}");
    assert_eq!(fs::read(root.join("grid.csv")).unwrap(), first);
}

#[test]
fn failed_grid_cell_is_recorded_and_the_grid_continues() {
    let f = Fixture::new();
    let cfg = f.path("grid.toml");
    // A mini-batch size of 0 is invalid; the other cell still runs.
    fs::write(
        &cfg,
        "[data]\ndataset = \"ds.txt\"\n\n[model]\nembed_dim = 8\nmlp_hidden = 16\n\n\
         [train]\nepochs = 1\nbatch_size = 64\n\n\
         [grid]\ninitializer_range = [0.02]\nmini_batch_size = [0, 1]\n",
    )
    .unwrap();
    let root = f.path("grid");
    let out = run(&["grid", "--config", p(&cfg), "--out", p(&root)]);
    assert!(!out.status.success());
    let rows = csv_rows(&root.join("grid.csv"));
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[1][2], "failed");
    assert_eq!(rows[2][2], "ok");
    assert!(root.join("sigma-0.02_b-0/error.txt").exists());
}
