use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
seed = 5

[train]
max_epochs = 1
patience = 1
batch_size = 32

[phantom]
cases = 2
dims = [16, 16, 16]
spacing = [3.0, 3.0, 3.0]
brain_radii = [0.7, 0.8, 0.7]
lesion_count = [1, 3]
lesion_radius = [1.5, 2.0]
lesion_volume_ml = [0.5, 1.2]
"#;

fn msseg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_msseg"))
        .current_dir(dir)
        .env("RUST_LOG", "info")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

/// Exit status is nonzero and stderr ends with a single `error[kind]: ...` line.
fn failure(out: &Output) -> String {
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    let last = err.lines().last().unwrap_or_default().to_string();
    assert!(last.starts_with("error["), "{err}");
    last
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), CONFIG).unwrap();
    dir
}

#[test]
fn inspect_prints_the_parameter_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&msseg(dir.path(), &["inspect"]));
    for n in ["470466", "172928", "41344", "8320"] {
        assert!(out.contains(n), "{n} missing from\n{out}");
    }
    assert!(out.contains("fc1_fc2_fc3") && out.contains("conv3d"));
}

#[test]
fn bad_configs_fail_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "[train]\nlearning_rate = 1.0\n").unwrap();
    let line = failure(&msseg(dir.path(), &["--config", "bad.toml", "inspect"]));
    assert!(line.contains("learning_rate"), "{line}");
    let line = failure(&msseg(dir.path(), &["--config", "absent.toml", "inspect"]));
    assert!(line.contains("absent.toml"), "{line}");
    let line = failure(&msseg(dir.path(), &["inspect", "--model", "nothing.msc"]));
    assert!(line.contains("nothing.msc"), "{line}");
    let line = failure(&msseg(dir.path(), &["adapt", "--freeze", "fc4", "--model", "m", "--cases", "c", "--out", "o"]));
    assert!(line.starts_with("error["), "{line}");
}

#[test]
fn rejects_incompatible_model_files() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("junk.msc"), b"not a model").unwrap();
    let line = failure(&msseg(dir.path(), &["inspect", "--model", "junk.msc"]));
    assert!(line.starts_with("error[format]") || line.starts_with("error[version]"), "{line}");
}

#[test]
fn phantom_train_infer_evaluate() {
    let dir = setup();
    let d = dir.path();
    ok(&msseg(d, &["--config", "run.toml", "phantom", "--out", "src"]));
    for f in ["flair.nii", "t1.nii", "brain.nii", "lesion.nii"] {
        assert!(d.join("src/source-000").join(f).is_file(), "{f}");
    }
    let train = msseg(d, &["--config", "run.toml", "--deterministic", "train-source", "--cases", "src", "--out", "a.msc"]);
    ok(&train);
    let log = String::from_utf8_lossy(&train.stderr);
    assert!(log.contains("seed 5") && log.contains("max_epochs = 1"), "{log}");

    // identical config and seed give identical files
    ok(&msseg(d, &["--config", "run.toml", "train-source", "--cases", "src", "--out", "b.msc"]));
    assert_eq!(std::fs::read(d.join("a.msc")).unwrap(), std::fs::read(d.join("b.msc")).unwrap());

    let inspect = ok(&msseg(d, &["inspect", "--model", "a.msc"]));
    assert!(inspect.contains("net 2") && inspect.contains("procedure = train_cascade"));

    ok(&msseg(d, &["--config", "run.toml", "infer", "--model", "a.msc", "--cases", "src", "--out", "pred"]));
    assert!(d.join("pred/source-001/probability.nii").is_file());
    assert!(d.join("pred/source-001/mask.nii").is_file());

    // against its own output masks every metric is 1
    let table = ok(&msseg(d, &["evaluate", "--model", "a.msc", "--cases", "src", "--silver", "pred", "--out", "self.tsv"]));
    let tsv = std::fs::read_to_string(d.join("self.tsv")).unwrap();
    assert!(table.contains("mean (std)"));
    for row in tsv.lines().skip(1).filter(|r| r.starts_with("source-")) {
        let cells: Vec<&str> = row.split('\t').collect();
        for v in &cells[1..4] {
            assert_eq!(v.parse::<f64>().unwrap(), 1.0, "{row}");
        }
    }
    ok(&msseg(d, &["evaluate", "--model", "a.msc", "--cases", "src", "--out", "expert.tsv"]));
    assert!(d.join("expert.tsv").is_file());
}

#[test]
fn auto_adaptation_picks_last_layer_below_three_ml() {
    let dir = setup();
    let d = dir.path();
    ok(&msseg(d, &["--config", "run.toml", "phantom", "--out", "src", "--cases", "2"]));
    std::fs::write(
        d.join("target.toml"),
        CONFIG
            .replace("cases = 2", "cases = 1")
            .replace("spacing = [3.0, 3.0, 3.0]", "spacing = [4.0, 4.0, 4.0]")
            .replace("[0.5, 1.2]", "[2.1, 2.5]"),
    )
    .unwrap();
    let gen = ok(&msseg(d, &["--config", "target.toml", "phantom", "--out", "tgt", "--domain", "shifted"]));
    assert!(gen.contains("1 target cases"), "{gen}");
    ok(&msseg(d, &["--config", "run.toml", "train-source", "--cases", "src", "--out", "src.msc"]));
    let out = msseg(d, &["--config", "run.toml", "adapt", "--model", "src.msc", "--cases", "tgt", "--out", "tgt.msc"]);
    let stdout = ok(&out);
    assert!(stdout.contains("adapted with fc3"), "{stdout}");
    assert!(stdout.contains("8320 trainable"), "{stdout}");
    let ml: f64 = stdout.split('(').nth(1).and_then(|s| s.split(' ').next()).unwrap().parse().unwrap();
    assert!((2.1..=2.5).contains(&ml), "{stdout}");
    let log = String::from_utf8_lossy(&out.stderr);
    assert!(log.contains("auto freeze: fc3"), "{log}");
    let inspect = ok(&msseg(d, &["inspect", "--model", "tgt.msc"]));
    assert!(inspect.contains("adapt.freeze = fc3"), "{inspect}");
}

#[test]
fn grid_writes_one_row_per_cell() {
    let dir = setup();
    let d = dir.path();
    std::fs::write(
        d.join("grid.toml"),
        format!("{CONFIG}\n[grid]\nmodes = [\"fc3\", \"fc2_fc3\"]\nsizes = [1]\n"),
    )
    .unwrap();
    ok(&msseg(d, &["--config", "grid.toml", "phantom", "--out", "src"]));
    ok(&msseg(d, &["--config", "grid.toml", "phantom", "--out", "tr", "--domain", "shifted", "--seed", "6", "--cases", "1"]));
    ok(&msseg(d, &["--config", "grid.toml", "phantom", "--out", "te", "--domain", "shifted", "--seed", "7", "--cases", "1"]));
    ok(&msseg(d, &["--config", "grid.toml", "train-source", "--cases", "src", "--out", "s.msc"]));
    // phantom ids repeat across seeds, so train and test sets overlap by id
    let line = failure(&msseg(d, &["--config", "grid.toml", "grid", "--model", "s.msc", "--train", "tr", "--test", "te"]));
    assert!(line.contains("both the training and the test set"), "{line}");
    std::fs::rename(d.join("te/target-000"), d.join("te/test-000")).unwrap();
    let table = ok(&msseg(d, &["--config", "grid.toml", "grid", "--model", "s.msc", "--train", "tr", "--test", "te", "--out", "g.tsv"]));
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows.len(), 3, "{table}");
    assert!(rows[1].starts_with("fc3\t1\t") && rows[2].starts_with("fc2_fc3\t1\t"), "{table}");
}
