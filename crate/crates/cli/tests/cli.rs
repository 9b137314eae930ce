//! End-to-end runs of the `pixar` binary on a tiny model.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const CONFIG: &str = "\
seed = 3
[model]
n_layers = 1
hidden_dim = 16
n_heads = 2
ff_hidden_dim = 32
window = 48
[train]
steps = 8
batch_size = 2
warmup_steps = 2
lr_max = 1e-3
lr_min = 1e-4
checkpoint_every = 3
[stage2]
steps = 4
batch_size = 2
checkpoint_every = 2
fake_samples_per_seq = 4
[data]
l_max = 40
l_min = 10
[cls]
epochs = 2
";

const CORPUS: &str = "The cat sat on the mat. A dog ran in the park. Birds sing at dawn. \
The sun is warm today. We like to read books. Rain fell all night long.\n";

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        fs::write(root.join("run.cfg"), CONFIG).unwrap();
        fs::write(root.join("corpus.txt"), CORPUS).unwrap();
        fs::write(root.join("task.tsv"), "The cat sat on the\tmat\nBirds sing at\tdawn\n").unwrap();
        fs::write(root.join("train.tsv"), "ok\t\t0\nno\t\t1\nok ok\t\t0\nno no\t\t1\n").unwrap();
        fs::write(root.join("val.tsv"), "ok\t\t0\nno\t\t1\n").unwrap();
        Self { _dir: dir, root }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn run(&self, out: &str, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_pixar"))
            .arg("--config")
            .arg(self.path("run.cfg"))
            .arg("--out-dir")
            .arg(self.path(out))
            .args(args)
            .current_dir(&self.root)
            .env("RUST_LOG", "warn")
            .output()
            .unwrap()
    }

    fn ok(&self, out: &str, args: &[&str]) -> String {
        let o = self.run(out, args);
        assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
        String::from_utf8(o.stdout).unwrap()
    }

    fn dataset(&self) {
        self.ok("run", &["build-dataset", "--input", "corpus.txt", "--output", "ds.bin"]);
    }
}

fn read(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn diagnostic(o: &Output) -> String {
    let err = String::from_utf8_lossy(&o.stderr);
    let line = err.lines().last().unwrap_or_default().to_string();
    assert!(line.starts_with("error kind="), "{err}");
    line
}

#[test]
fn segment_writes_one_sample_per_line() {
    let f = Fixture::new();
    f.ok("run", &["segment", "--input", "corpus.txt", "--output", "seg.txt"]);
    let seg = fs::read_to_string(f.path("seg.txt")).unwrap();
    let lines: Vec<&str> = seg.lines().collect();
    assert!(lines.len() >= 3);
    assert!(lines.iter().all(|l| l.chars().count() <= 40));
    assert_eq!(lines.join(" "), CORPUS.trim());
}

#[test]
fn training_resumes_to_identical_files() {
    let f = Fixture::new();
    f.dataset();
    f.ok("a", &["pretrain1", "--dataset", "ds.bin", "--stop-after", "5"]);
    f.ok("a", &["pretrain1", "--dataset", "ds.bin"]);
    f.ok("b", &["pretrain1", "--dataset", "ds.bin"]);
    for name in ["stage1.ckpt", "stage1_metrics.csv"] {
        assert_eq!(read(&f.path("a").join(name)), read(&f.path("b").join(name)), "{name}");
    }
    let metrics = fs::read_to_string(f.path("a/stage1_metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 9);

    let ck = f.path("b/stage1.ckpt");
    let ck = ck.to_str().unwrap();
    f.ok("a", &["pretrain2", "--checkpoint", ck, "--dataset", "ds.bin", "--stop-after", "1"]);
    f.ok("a", &["pretrain2", "--checkpoint", ck, "--dataset", "ds.bin"]);
    f.ok("b", &["pretrain2", "--checkpoint", ck, "--dataset", "ds.bin", "--lambda-m", "1.0"]);
    for name in ["stage2.ckpt", "stage2_metrics.csv"] {
        assert_eq!(read(&f.path("a").join(name)), read(&f.path("b").join(name)), "{name}");
    }
    let metrics = fs::read_to_string(f.path("b/stage2_metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 5);

    // A stage-2 checkpoint is not a valid starting point for stage 2.
    let o = f.run("c", &["pretrain2", "--checkpoint", "b/stage2.ckpt", "--dataset", "ds.bin"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(diagnostic(&o).contains("stage-1"));
}

#[test]
fn evaluation_commands_write_reports() {
    let f = Fixture::new();
    f.dataset();
    f.ok("run", &["pretrain1", "--dataset", "ds.bin", "--steps", "3"]);
    let ck = "run/stage1.ckpt";

    let text = f.ok("run", &["generate", "--checkpoint", ck, "--prompt", "The cat", "--steps", "3"]);
    let pbm = read(&f.path("run/generation.pbm"));
    assert!(pbm.starts_with(b"P4\n"));
    let txt = fs::read_to_string(f.path("run/generation.txt")).unwrap();
    assert_eq!(txt.lines().next().unwrap(), text.trim_end_matches('\n'));
    let again = f.ok("run", &["generate", "--checkpoint", ck, "--prompt", "The cat", "--steps", "3"]);
    assert_eq!(text, again);
    assert_eq!(pbm, read(&f.path("run/generation.pbm")));

    let summary = f.ok("run", &["eval-gen", "--checkpoint", ck, "--task", "task.tsv"]);
    assert!(summary.starts_with("accuracy="));
    let csv = fs::read_to_string(f.path("run/eval_gen.csv")).unwrap();
    assert!(csv.starts_with("accuracy,readability,evaluated,skipped\n"));

    f.ok("run", &["attack", "--checkpoint", ck, "--task", "task.tsv", "--ratios", "0,0.1,0.5"]);
    let csv = fs::read_to_string(f.path("run/attack.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 4, "{csv}");
    assert_eq!(rows[0], "ratio,accuracy,readability,evaluated,skipped");
    assert!(rows[1].starts_with("0,") && rows[2].starts_with("0.1,") && rows[3].starts_with("0.5,"));

    let out = f.ok("run", &["attn", "--checkpoint", ck, "--prompt", "The cat", "--layers", "all"]);
    assert_eq!(out.lines().count(), 2);
    assert!(read(&f.path("run/attn_layer0.pgm")).starts_with(b"P5\n"));

    f.ok("run", &["eval-cls", "--checkpoint", ck, "--train", "train.tsv", "--val", "val.tsv", "--freeze"]);
    let csv = fs::read_to_string(f.path("run/eval_cls.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("epoch,train_loss,val_score"));
    assert!(csv.lines().count() >= 2);
}

#[test]
fn exit_codes_follow_the_failure_class() {
    let f = Fixture::new();
    assert_eq!(f.run("run", &["--help"]).status.code(), Some(0));
    assert_eq!(f.run("run", &["no-such-command"]).status.code(), Some(1));
    assert_eq!(f.run("run", &["attack", "--task", "task.tsv"]).status.code(), Some(1));

    let o = f.run("run", &["--set", "model.depth=3", "segment", "--input", "corpus.txt", "--output", "s.txt"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(diagnostic(&o), "error kind=config code=1 msg=\"unknown config key `model.depth`\"");

    fs::write(f.path("bad.cfg"), "[train]\nstepz = 3\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_pixar"))
        .args(["--config", f.path("bad.cfg").to_str().unwrap(), "segment", "--input", "x", "--output", "y"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));

    let o = f.run("run", &["eval-gen", "--checkpoint", "missing.ckpt", "--task", "task.tsv"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(diagnostic(&o).starts_with("error kind=io code=2"));

    f.dataset();
    let o = f.run("run", &["pretrain1", "--dataset", "ds.bin", "--set", "train.lr_max=1e30", "--set", "train.lr_min=1e29"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(diagnostic(&o).starts_with("error kind=non-finite code=3"));
}
