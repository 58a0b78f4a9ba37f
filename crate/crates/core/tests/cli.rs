use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mamex::data::{data_hash, generate_synthetic, load_dataset, Dataset, SyntheticSpec};

fn mamex(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mamex"))
        .args(args)
        .env("MAMEX_LOG", "error")
        .output()
        .expect("run mamex")
}

fn ok(args: &[&str]) -> String {
    let out = mamex(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str], code: i32) -> String {
    let out = mamex(args);
    assert_eq!(
        out.status.code(),
        Some(code),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stderr).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    data: PathBuf,
    config: PathBuf,
}

fn fixture() -> Fixture {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().to_owned();
    let data = root.join("data");
    ok(&[
        "synth",
        "--out-dir",
        s(&data),
        "--users",
        "40",
        "--items",
        "80",
        "--dim",
        "6",
        "--interactions-per-user",
        "4",
        "--seed",
        "5",
    ]);
    let config = root.join("toy.conf");
    fs::write(
        &config,
        "d = 8\nnum_experts = 4\ntop_k = 2\nepochs = 3\nbatch_size = 16\ninit_std = 0.1\n",
    )
    .unwrap();
    Fixture {
        _tmp: tmp,
        root,
        data,
        config,
    }
}

fn train(f: &Fixture, name: &str, extra: &[&str]) -> PathBuf {
    let out = f.root.join(name);
    let mut args = vec![
        "train",
        "--config",
        s(&f.config),
        "--data-dir",
        s(&f.data),
        "--out-dir",
        s(&out),
    ];
    args.extend_from_slice(extra);
    ok(&args);
    out
}

fn read(p: impl AsRef<Path>) -> String {
    fs::read_to_string(p).unwrap()
}

#[test]
fn synth_files_parse_back_losslessly() {
    let f = fixture();
    let spec = SyntheticSpec {
        n_users: 40,
        n_items: 80,
        dim: 6,
        interactions_per_user: 4,
        seed: 5,
        ..SyntheticSpec::default()
    };
    let (set, table) = generate_synthetic(&spec).unwrap();
    assert_eq!(load_dataset(&f.data).unwrap(), Dataset::new(&set, &table).unwrap());
}

#[test]
fn synth_is_deterministic_and_guards_output() {
    let f = fixture();
    let again = f.root.join("again");
    ok(&[
        "synth",
        "--out-dir",
        s(&again),
        "--users",
        "40",
        "--items",
        "80",
        "--dim",
        "6",
        "--interactions-per-user",
        "4",
        "--seed",
        "5",
    ]);
    assert_eq!(data_hash(&f.data).unwrap(), data_hash(&again).unwrap());
    for file in ["interactions.tsv", "image.tsv", "text.tsv", "manifest.txt"] {
        assert_eq!(
            fs::read(f.data.join(file)).unwrap(),
            fs::read(again.join(file)).unwrap()
        );
    }
    let err = fails(&["synth", "--out-dir", s(&f.data)], 4);
    assert!(err.contains("--force"), "{err}");
    ok(&[
        "synth",
        "--out-dir",
        s(&f.data),
        "--users",
        "30",
        "--items",
        "50",
        "--force",
    ]);
    assert_ne!(data_hash(&f.data).unwrap(), data_hash(&again).unwrap());
}

#[test]
fn synth_rejects_zero_items() {
    let tmp = tempfile::tempdir().unwrap();
    fails(&["synth", "--out-dir", s(&tmp.path().join("d")), "--items", "0"], 3);
}

#[test]
fn usage_errors_exit_two() {
    fails(&["train", "--data-dir", "x"], 2);
    fails(&["bogus"], 2);
}

#[test]
fn split_writes_item_partitions() {
    let f = fixture();
    let out = f.root.join("split");
    ok(&["split", "--data-dir", s(&f.data), "--out-dir", s(&out), "--seed", "1"]);
    let count = |n: &str| read(out.join(n)).lines().count();
    assert_eq!(
        (
            count("train_items.txt"),
            count("valid_items.txt"),
            count("test_items.txt")
        ),
        (64, 8, 8)
    );
}

#[test]
fn train_rerun_is_identical() {
    let f = fixture();
    let a = train(&f, "a", &[]);
    let b = train(&f, "b", &[]);
    for file in ["epoch_log.tsv", "report.tsv", "model.ckpt"] {
        assert_eq!(
            fs::read(a.join(file)).unwrap(),
            fs::read(b.join(file)).unwrap(),
            "{file}"
        );
    }
    assert_eq!(read(a.join("epoch_log.tsv")).lines().count(), 4);
    let manifest = read(a.join("run_manifest.txt"));
    assert!(manifest.contains("data_hash = ") && manifest.contains("[config]"));
}

#[test]
fn train_no_align_echoes_zero_lambda1() {
    let f = fixture();
    let out = train(&f, "na", &["--variant", "no_align"]);
    let report = read(out.join("report.tsv"));
    assert!(report.contains("# lambda1 = 0\n"), "{report}");
    assert!(report.contains("# variant = no_align\n"));
}

#[test]
fn train_names_unknown_config_key() {
    let f = fixture();
    let bad = f.root.join("bad.conf");
    fs::write(&bad, "d = 8\nlearning_rate = 0.1\n").unwrap();
    let err = fails(
        &[
            "train",
            "--config",
            s(&bad),
            "--data-dir",
            s(&f.data),
            "--out-dir",
            s(&f.root.join("o")),
        ],
        3,
    );
    assert!(err.contains("learning_rate"), "{err}");
}

#[test]
fn train_names_missing_modality() {
    let f = fixture();
    fs::remove_file(f.data.join("text.tsv")).unwrap();
    let err = fails(
        &[
            "train",
            "--config",
            s(&f.config),
            "--data-dir",
            s(&f.data),
            "--out-dir",
            s(&f.root.join("o")),
        ],
        4,
    );
    assert!(err.contains("`text`"), "{err}");
}

#[test]
fn eval_is_stable_and_guards_inputs() {
    let f = fixture();
    let run = train(&f, "run", &[]);
    let ckpt = run.join("model.ckpt");
    let eval = |partition: &str| {
        ok(&[
            "eval",
            "--checkpoint",
            s(&ckpt),
            "--data-dir",
            s(&f.data),
            "--partition",
            partition,
        ])
    };
    let test = eval("test");
    assert_eq!(test, eval("test"));
    // The final report is the test evaluation of the saved checkpoint.
    let report = read(run.join("report.tsv"));
    assert!(report.ends_with(&test), "{report}\n---\n{test}");
    let candidates = |out: &str| out.lines().nth(1).unwrap().split('\t').nth(1).unwrap().to_owned();
    assert_eq!(candidates(&eval("valid")), "8");
    assert_eq!(candidates(&test), "8");
    assert!(eval("valid").starts_with("partition") && eval("valid").contains("\nvalid\t"));

    let wrong = f.root.join("wrong.conf");
    fs::write(&wrong, "d = 8\nnum_experts = 6\n").unwrap();
    let err = fails(
        &[
            "eval",
            "--checkpoint",
            s(&ckpt),
            "--data-dir",
            s(&f.data),
            "--config",
            s(&wrong),
        ],
        4,
    );
    assert!(err.contains("num_experts: checkpoint=4 expected=6"), "{err}");

    let mut bytes = fs::read(&ckpt).unwrap();
    bytes.truncate(bytes.len() - 100);
    let broken = f.root.join("broken.ckpt");
    fs::write(&broken, bytes).unwrap();
    let err = fails(&["eval", "--checkpoint", s(&broken), "--data-dir", s(&f.data)], 4);
    assert!(err.contains("checksum") || err.contains("truncated"), "{err}");

    let other = f.root.join("other");
    ok(&[
        "synth",
        "--out-dir",
        s(&other),
        "--users",
        "40",
        "--items",
        "80",
        "--dim",
        "6",
        "--interactions-per-user",
        "4",
        "--seed",
        "6",
    ]);
    let err = fails(&["eval", "--checkpoint", s(&ckpt), "--data-dir", s(&other)], 4);
    assert!(err.contains("data_hash: checkpoint="), "{err}");
}

#[test]
fn ablate_rows_match_individual_runs() {
    let f = fixture();
    let out = f.root.join("abl");
    let table = ok(&[
        "ablate",
        "--config",
        s(&f.config),
        "--data-dir",
        s(&f.data),
        "--out-dir",
        s(&out),
        "--seeds",
        "2",
        "--variant",
        "no_mmf,full",
    ]);
    let rows: Vec<&str> = table
        .lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("variant") && !l.is_empty())
        .map(|l| l.split('\t').next().unwrap())
        .collect();
    assert_eq!(rows, vec!["full", "no_mmf", "full"]);

    let runs = read(out.join("runs.tsv"));
    let single = train(&f, "single", &["--variant", "no_mmf", "--seed", "1"]);
    let report = read(single.join("report.tsv"));
    let metrics: Vec<&str> = report.lines().last().unwrap().split('\t').collect();
    let row = runs.lines().find(|l| l.starts_with("no_mmf\t1\t")).unwrap();
    let fields: Vec<&str> = row.split('\t').collect();
    assert_eq!(&fields[2..6], &metrics[5..9]);
}
