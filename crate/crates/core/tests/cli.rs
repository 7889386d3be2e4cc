use std::path::Path;
use std::process::{Command, Output};

fn disenhcn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_disenhcn"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const NO_FILTERS: [&str; 4] = ["--set", "min_locations_per_user=0", "--set", "min_activities_per_user=0"];

/// Small synthetic corpus, prepared and trained for a few epochs.
fn trained(dir: &Path, extra: &[&str]) {
    let small = ["--set", "synth_users=30", "--set", "synth_records_per_user=20"];
    assert!(disenhcn(&[&["synth", "--out", p(dir)], &small[..]].concat()).status.success());
    let prep = disenhcn(&[&["prepare", "--input", p(&dir.join("records.csv")), "--out", p(&dir.join("data"))], &NO_FILTERS[..]].concat());
    assert!(prep.status.success(), "{}", String::from_utf8_lossy(&prep.stderr));
    let train = disenhcn(
        &[
            &["train", "--data", p(&dir.join("data")), "--out", p(&dir.join("model")), "--set", "epochs=3", "--set", "d=12"],
            extra,
        ]
        .concat(),
    );
    assert!(train.status.success(), "{}", String::from_utf8_lossy(&train.stderr));
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(disenhcn(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(disenhcn(&["gradcheck", "--nope"]).status.code(), Some(1));
    let o = disenhcn(&["gradcheck", "--set", "gama=1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("gama"));
    assert_eq!(disenhcn(&["synth"]).status.code(), Some(1));
}

#[test]
fn data_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.csv");
    let o = disenhcn(&["prepare", "--input", p(&missing), "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(2));

    assert!(disenhcn(&["synth", "--out", p(dir.path()), "--set", "synth_noise=0"]).status.success());
    // default filters need 10 distinct locations per user; pools hold 5
    let o = disenhcn(&["prepare", "--input", p(&dir.path().join("records.csv")), "--out", p(&dir.path().join("d"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("filtering"));
}

#[test]
fn gradcheck_passes_by_default() {
    let o = disenhcn(&["gradcheck"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert!(out.contains("PASS"));
    assert!(out.contains("worst entry"));
}

#[test]
fn prepare_summary_and_rerun_identity() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(disenhcn(&["synth", "--out", p(d)]).status.success());
    let input = d.join("records.csv");
    let first = disenhcn(&[&["prepare", "--input", p(&input), "--out", p(&d.join("a"))], &NO_FILTERS[..]].concat());
    let second = disenhcn(&[&["prepare", "--input", p(&input), "--out", p(&d.join("b"))], &NO_FILTERS[..]].concat());
    let table = stdout(&first);
    assert!(table.contains("#User") && table.contains("#Records"));
    assert!(table.contains(" 100 ") && table.contains(" 30 "));
    for f in ["vocab.json", "train.csv", "valid.csv", "test.csv"] {
        assert_eq!(std::fs::read(d.join("a").join(f)).unwrap(), std::fs::read(d.join("b").join(f)).unwrap());
    }
    assert_eq!(stdout(&first), stdout(&second));
}

#[test]
fn train_echo_evaluate_predict_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    trained(d, &[]);
    let model = d.join("model");
    for f in ["best.ckpt", "last.ckpt", "train_log.csv", "config.txt"] {
        assert!(model.join(f).exists(), "{f}");
    }
    let log = std::fs::read_to_string(model.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 4);
    assert!(log.starts_with("epoch,bpr,l2,ind,total,val_recall10,val_ndcg10,lr,seconds\n"));
    let echo = std::fs::read_to_string(model.join("config.txt")).unwrap();
    for kv in ["d = 12", "layers = 1", "gamma = 0.003", "lambda = 0.00003", "lr = 0.001", "batch_size = 2048"] {
        assert!(echo.contains(kv), "{kv}");
    }

    let ckpt = model.join("best.ckpt");
    let data = d.join("data");
    let ev = disenhcn(&["evaluate", "--ckpt", p(&ckpt), "--data", p(&data), "--out", p(&d.join("eval"))]);
    assert!(ev.status.success());
    let v: serde_json::Value = serde_json::from_str(stdout(&ev).trim()).unwrap();
    assert_eq!(v["k"], 10);
    let recall = v["recall"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&recall));
    let again = disenhcn(&["evaluate", "--ckpt", p(&ckpt), "--data", p(&data)]);
    assert_eq!(stdout(&ev), stdout(&again));
    assert!(d.join("eval/metrics.json").exists() && d.join("eval/ranks.csv").exists());

    let pr = disenhcn(&[
        "predict", "--ckpt", p(&ckpt), "--data", p(&data), "--user", "u0", "--location", "l0", "--time", "t0", "--k", "30",
    ]);
    assert!(pr.status.success());
    let mut acts: Vec<String> = stdout(&pr).lines().map(|l| l.split('\t').nth(1).unwrap().to_owned()).collect();
    let scores: Vec<f64> = stdout(&pr).lines().map(|l| l.split('\t').nth(2).unwrap().parse().unwrap()).collect();
    assert!(scores.windows(2).all(|w| w[0] >= w[1]));
    acts.sort();
    acts.dedup();
    assert_eq!(acts.len(), 30);

    let unknown = disenhcn(&[
        "predict", "--ckpt", p(&ckpt), "--data", p(&data), "--user", "nobody", "--location", "l0", "--time", "t0",
    ]);
    assert_eq!(unknown.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("nobody"));

    let ins = disenhcn(&["inspect", "--ckpt", p(&ckpt), "--data", p(&data), "--out", p(&d.join("inspect"))]);
    assert!(ins.status.success());
    let csv = std::fs::read_to_string(d.join("inspect/attention.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "aspect,type,min,q1,median,q3,max");
    assert_eq!(csv.lines().count(), 1 + 3 * 8);
    let stats: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("inspect/adjacency_stats.json")).unwrap()).unwrap();
    assert!(stats["types"]["LTA"]["nnz"].as_u64().unwrap() > 0);
}

#[test]
fn disabled_type_is_absent_from_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    trained(d, &["--set", "enabled_types=L,T,A,U"]);
    let ins = disenhcn(&[
        "inspect", "--ckpt", p(&d.join("model/best.ckpt")), "--data", p(&d.join("data")), "--out", p(&d.join("i")),
    ]);
    assert!(ins.status.success());
    let csv = std::fs::read_to_string(d.join("i/attention.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 * 4);
    assert!(!csv.contains(",LT,"));
}
