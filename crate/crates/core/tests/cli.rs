use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use diffbias::experiments::{read_csv, sha256_file, RunManifest, UTurnRow};

const COMMANDS: [&str; 7] = [
    "gen-grammar",
    "gen-data",
    "regimes",
    "eps-sweep",
    "uturn",
    "sample-split",
    "loss-decomp",
];

const SMALL: &str = r#"{
  "grammar": {"q": 4, "q_eff": 3, "depth": 3, "log_scale": 1.0, "seed": 3},
  "schedule": {"steps": 100},
  "seed": 7,
  "n_train": 200,
  "n_test": 100,
  "eps_grid": [0.0, 2.0, 50.0],
  "regimes": {"trajectories": 12, "every": 10, "denoisers": ["eps:eps=2"]},
  "eps_sweep": {"n_eval": 40, "reps": 2, "samples": 40, "replicates": 2},
  "uturn": {"starts": 4, "reps": 3, "t_fracs": [0.1, 0.3], "denoisers": ["eps:eps=2", "bp:k=1"]},
  "sample_split": {"t_fracs": [0.2], "n_eval": 20, "reps": 2, "pairs": 4},
  "loss_decomp": {"t": 20, "n_eval": 20, "reps": 2}
}"#;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_diffbias")).args(args).output().unwrap()
}

fn run_all(config: &Path, out: &Path, threads: &str) {
    for cmd in COMMANDS {
        let o = run(&[
            cmd,
            "--config",
            config.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--threads",
            threads,
        ]);
        assert!(o.status.success(), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
    }
}

fn data_files(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| !n.ends_with(".manifest.json"))
        .collect();
    names.sort();
    names
}

#[test]
fn outputs_are_identical_across_thread_counts_and_resumable() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("small.json");
    fs::write(&config, SMALL).unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_all(&config, &a, "1");
    run_all(&config, &b, "3");

    let names = data_files(&a);
    assert_eq!(names, data_files(&b));
    for expected in [
        "grammar.json",
        "train.txt",
        "test.txt",
        "regimes.csv",
        "eps_sweep.csv",
        "eps_sweep_hist_eps0.csv",
        "eps_sweep_hist_eps50.csv",
        "uturn.csv",
        "sample_split.csv",
        "loss_decomp.csv",
    ] {
        assert!(names.iter().any(|n| n == expected), "missing {expected}");
    }
    for n in &names {
        assert_eq!(fs::read(a.join(n)).unwrap(), fs::read(b.join(n)).unwrap(), "{n} differs");
    }

    let manifest: RunManifest =
        serde_json::from_str(&fs::read_to_string(a.join("uturn.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.seed, 7);
    assert_eq!(manifest.files["uturn.csv"], sha256_file(&a.join("uturn.csv")).unwrap());
    let rows: Vec<UTurnRow> = read_csv(&a.join("uturn.csv")).unwrap();
    assert_eq!(rows.len(), 2 * 2 * 3);

    let before = fs::read(a.join("uturn.csv")).unwrap();
    fs::write(a.join("uturn.csv.partial"), "stale").unwrap();
    let again = run(&["uturn", "--config", config.to_str().unwrap(), "--out", a.to_str().unwrap()]);
    assert!(again.status.success());
    assert!(String::from_utf8_lossy(&again.stderr).contains("already complete"));
    assert!(!a.join("uturn.csv.partial").exists());
    assert_eq!(fs::read(a.join("uturn.csv")).unwrap(), before);

    let other = run(&[
        "uturn",
        "--config",
        config.to_str().unwrap(),
        "--out",
        a.to_str().unwrap(),
        "--seed",
        "8",
    ]);
    assert_eq!(other.status.code(), Some(2));
}

#[test]
fn bad_configurations_exit_with_code_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cases = [
        r#"{"seed": 1, "unknown": 3}"#,
        r#"{"seed": "#,
        r#"{"eps_grid": [-1.0]}"#,
        r#"{"grammar": {"q": 3, "q_eff": 4}}"#,
        r#"{"regimes": {"denoisers": ["bogus"]}}"#,
    ];
    for (i, text) in cases.iter().enumerate() {
        let path = tmp.path().join(format!("bad{i}.json"));
        fs::write(&path, text).unwrap();
        let o = run(&["regimes", "--config", path.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(2), "{text}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let missing = run(&["gen-grammar", "--config", tmp.path().join("nope.json").to_str().unwrap()]);
    assert_eq!(missing.status.code(), Some(2));
    let flag = run(&["gen-grammar", "--steps", "0", "--out", out.to_str().unwrap()]);
    assert_eq!(flag.status.code(), Some(2));
}
