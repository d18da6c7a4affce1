use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn pacmeta(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pacmeta"))
        .args(args)
        .env_remove("PACMETA_SEED")
        .output()
        .unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn small_config(dir: &Path) -> String {
    let path = dir.join("small.conf");
    fs::write(
        &path,
        format!(
            "run_name = a\nout_dir = {}\nseed = 4\nenv.kind = gaussian_blobs\nenv.samples_per_task = 60\n\
             env.test_samples_per_task = 40\nenv.n_test_tasks = 2\ntrain.hidden = 8\ntrain.data_batch = 16\n\
             train.epochs = 2\ntrain.trace_mc_samples = 1\n",
            dir.display()
        ),
    )
    .unwrap();
    path.display().to_string()
}

fn parse_pairs(text: &str) -> Vec<(String, String)> {
    text.lines()
        .map(|l| {
            let (k, v) = l.split_once('=').expect("key=value line");
            (k.to_string(), v.to_string())
        })
        .collect()
}

#[test]
fn bound_prints_parseable_pairs() {
    let out = pacmeta(&[
        "bound", "--which", "quad", "--emp", "0.1,0.2", "--kl-task", "5,7", "--m", "1000", "--kl-hyper", "3",
    ]);
    assert!(out.status.success());
    let pairs = parse_pairs(&stdout(&out));
    let get = |k: &str| pairs.iter().find(|p| p.0 == k).map(|p| p.1.clone()).unwrap();
    assert_eq!(get("which"), "quad");
    let bound: f64 = get("bound").parse().unwrap();
    let parts: f64 = ["empirical_term", "task_complexity", "meta_complexity"]
        .iter()
        .map(|k| get(k).parse::<f64>().unwrap())
        .sum();
    assert!((bound - parts).abs() < 1e-12, "{bound} vs {parts}");
}

#[test]
fn bad_input_exits_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let conf = small_config(dir.path());
    let cases: [&[&str]; 4] = [
        &["bound", "--which", "nope", "--emp", "0.1", "--kl-task", "1", "--m", "100", "--n", "2"],
        &["train", "/does/not/exist.conf"],
        &["train", &conf, "--no_such_key=1"],
        &["train", &conf, "--epochs=3"],
    ];
    for args in cases {
        assert_eq!(pacmeta(args).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn train_echoes_overrides_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let conf = small_config(dir.path());
    let first = pacmeta(&["train", &conf, "--train.lr=0.002"]);
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    assert!(stdout(&first).lines().any(|l| l.trim() == "train.lr = 0.002"), "{}", stdout(&first));

    let resolved = dir.path().join("a").join("config.resolved");
    let second = pacmeta(&["train", resolved.to_str().unwrap(), "--run_name=b"]);
    assert!(second.status.success());
    for file in ["theta.pmck", "trace.csv"] {
        let a = fs::read(dir.path().join("a").join(file)).unwrap();
        let b = fs::read(dir.path().join("b").join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between runs");
    }
}

#[test]
fn eval_writes_test_tables_and_rejects_corrupt_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let conf = small_config(dir.path());
    assert!(pacmeta(&["train", &conf]).status.success());
    let run = dir.path().join("a");
    let before: Vec<_> = fs::read_dir(&run).unwrap().map(|e| e.unwrap().file_name()).collect();

    let ck = run.join("theta.pmck");
    let out = pacmeta(&["eval", ck.to_str().unwrap(), &conf]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let mut added: Vec<String> = fs::read_dir(&run)
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .filter(|n| !before.contains(n))
        .map(|n| n.to_string_lossy().into_owned())
        .collect();
    added.sort();
    assert_eq!(added, ["test_table.csv", "test_tasks.csv"]);

    let bytes = fs::read(&ck).unwrap();
    let broken = dir.path().join("broken.pmck");
    fs::write(&broken, &bytes[..bytes.len() / 2]).unwrap();
    assert_eq!(pacmeta(&["eval", broken.to_str().unwrap(), &conf]).status.code(), Some(2));
}
