use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn ftz(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ftz")).args(args).output().expect("spawn ftz")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn assert_one_line_failure(o: &Output) {
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error: "), "{err}");
}

fn smoke() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/smoke.toml")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn map_layers_prints_csv() {
    let o = ftz(&["map-layers", "--anchor-depth", "12", "--augment-depth", "6", "--k", "4"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o), "i,j\n3,1\n6,3\n9,4\n12,6\n");
}

#[test]
fn bad_invocations_fail_with_one_line() {
    assert_one_line_failure(&ftz(&["map-layers", "--anchor-depth", "4", "--augment-depth", "2", "--k", "5"]));
    assert_one_line_failure(&ftz(&["map-layers", "--anchor-depth", "4"]));
    assert_one_line_failure(&ftz(&["gen-data", "--seed", "1", "--n", "2", "--split", "test", "--out", "x"]));
    assert_one_line_failure(&ftz(&["gen-data", "--seed", "1", "--n", "0", "--split", "eval", "--out", "/tmp/never"]));
    assert_one_line_failure(&ftz(&["inspect-ckpt", "--path", "/definitely/missing.ftz"]));
    assert_one_line_failure(&ftz(&["train", "--config", "/definitely/missing.toml", "--stage", "1", "--out", "x"]));
    assert_one_line_failure(&ftz(&["frobnicate"]));
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s2");
    assert_one_line_failure(&ftz(&["train", "--config", s(&smoke()), "--stage", "2", "--out", s(&out)]));
    assert_one_line_failure(&ftz(&["train", "--config", s(&smoke()), "--stage", "3", "--out", s(&out)]));
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    for p in [&a, &b] {
        assert!(ftz(&["gen-data", "--seed", "9", "--n", "12", "--split", "train", "--out", s(p)]).status.success());
    }
    let bytes = std::fs::read(&a).unwrap();
    assert_eq!(bytes, std::fs::read(&b).unwrap());
    assert_eq!(bytes.iter().filter(|&&c| c == b'\n').count(), 12);
}

#[test]
fn gradcheck_passes() {
    let o = ftz(&["gradcheck", "--instances", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert!(out.starts_with("op,instances,max_rel_error,passed\n"));
    assert!(out.contains("fusion_block,") && out.contains("connector,"));
    assert!(!out.contains(",false"));
}

#[test]
fn train_eval_inspect_round() {
    let dir = tempfile::tempdir().unwrap();
    let s1 = dir.path().join("s1");
    let s2 = dir.path().join("s2");
    let o = ftz(&["train", "--config", s(&smoke()), "--stage", "1", "--out", s(&s1)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = std::fs::read_to_string(s1.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("step,stage,loss,lr\n1,1,"));
    assert_eq!(metrics.lines().count(), 1 + 12);

    // Reusing the saved base reproduces stage 1 exactly.
    let again = dir.path().join("s1b");
    let base = s1.join("pretrained.ftz");
    let o = ftz(&["train", "--config", s(&smoke()), "--stage", "1", "--out", s(&again), "--base", s(&base)]);
    assert!(o.status.success());
    assert_eq!(
        std::fs::read(s1.join("checkpoint.ftz")).unwrap(),
        std::fs::read(again.join("checkpoint.ftz")).unwrap()
    );

    let init = s1.join("checkpoint.ftz");
    let o = ftz(&["train", "--config", s(&smoke()), "--stage", "2", "--out", s(&s2), "--init", s(&init)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = std::fs::read_to_string(s2.join("metrics.csv")).unwrap();
    assert!(metrics.lines().nth(1).unwrap().starts_with("1,2,"));

    let data = dir.path().join("eval.jsonl");
    assert!(ftz(&["gen-data", "--seed", "4", "--n", "9", "--split", "eval", "--out", s(&data)]).status.success());
    let report = dir.path().join("report.csv");
    let ckpt = s2.join("checkpoint.ftz");
    let o = ftz(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--out", s(&report)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(&report).unwrap();
    assert_eq!(csv, stdout(&o));
    assert!(csv.starts_with("mode,seed,task,correct,total,accuracy\n"));
    assert!(csv.contains("ftz,0,count,") && csv.contains(",3,"));

    let o = ftz(&["inspect-ckpt", "--path", s(&ckpt)]);
    let manifest = stdout(&o);
    assert!(manifest.starts_with("name,dtype,frozen,shape\n"));
    assert!(manifest.lines().any(|l| l.starts_with("anchor.") && l.contains(",0,true,")));
    assert!(manifest.contains("\nfusion.8.w_o,0,false,64x64\n"), "{manifest}");

    // A vocabulary sidecar that disagrees with the data is a configuration error.
    let vocab = ftz::training::vocab_sidecar(&ckpt);
    let text = std::fs::read_to_string(&vocab).unwrap().replace("circle\t", "ring\t");
    std::fs::write(&vocab, text).unwrap();
    let o = ftz(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--out", s(&report)]);
    assert_one_line_failure(&o);
}

#[test]
fn compare_towers_emits_table() {
    let dir = tempfile::tempdir().unwrap();
    let o = ftz(&["compare-towers", "--config", s(&smoke()), "--seeds", "3", "--out", s(dir.path())]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = stdout(&o);
    assert!(table.starts_with("mode,seed,caption_acc,count_acc,exist_acc\n"));
    assert_eq!(table.lines().count(), 4);
    assert_eq!(std::fs::read_to_string(dir.path().join("comparison.csv")).unwrap(), table);
    assert!(dir.path().join("comparison_means.csv").exists());
}
