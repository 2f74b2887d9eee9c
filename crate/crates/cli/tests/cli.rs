use std::path::Path;
use std::process::{Command, Output};

fn dise(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dise")).args(args).output().expect("spawn dise")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&dise(&[])), 2);
    assert_eq!(code(&dise(&["gen-data", "--n", "x"])), 2);
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d.jsonl");
    let o = dise(&["gen-data", "--n", "5", "--max-heavy", "4", "--seed", "1", "--out", p(&out), "--weights", "1,2"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn bad_data_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.jsonl");
    std::fs::write(&bad, "not a dataset\n").unwrap();
    let ck = dir.path().join("m.ckpt");
    let o = dise(&[
        "train", "--data", p(&bad), "--preset", "desk", "--modality", "1d", "--steps", "1", "--seed", "0",
        "--out-ckpt", p(&ck),
    ]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    let missing = dir.path().join("nope.jsonl");
    let o = dise(&[
        "train", "--data", p(&missing), "--preset", "desk", "--modality", "1d", "--steps", "1", "--seed", "0",
        "--out-ckpt", p(&ck),
    ]);
    assert_eq!(code(&o), 3);
}

#[test]
fn end_to_end_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.jsonl");
    let o = dise(&["gen-data", "--n", "60", "--max-heavy", "5", "--seed", "3", "--out", p(&data)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let ck = dir.path().join("m.ckpt");
    let o = dise(&[
        "train", "--data", p(&data), "--preset", "desk", "--modality", "1d-hsqc", "--steps", "4", "--seed", "9",
        "--out-ckpt", p(&ck),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let eval = |name: &str| {
        let r = dir.path().join(name);
        let o = dise(&[
            "evaluate", "--ckpt", p(&ck), "--data", p(&data), "--split", "test", "--runs", "6", "--seed", "5",
            "--out-report", p(&r),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        std::fs::read_to_string(r).unwrap()
    };
    let a = eval("a.report");
    assert!(a.starts_with("#dise-report v1"));
    assert!(a.contains("[summary]"));
    assert_eq!(a, eval("b.report"));
    assert!(dir.path().join("a.sizes").exists());

    // A corrupted checkpoint is a model error.
    let mut bytes = std::fs::read(&ck).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, bytes).unwrap();
    let r = dir.path().join("c.report");
    let o = dise(&[
        "evaluate", "--ckpt", p(&bad), "--data", p(&data), "--runs", "2", "--seed", "5", "--out-report", p(&r),
    ]);
    assert_eq!(code(&o), 4);

    // Elucidate a single record with trajectories.
    let text = std::fs::read_to_string(&data).unwrap();
    let at = text.find("\"id\":\"").unwrap() + 6;
    let id = &text[at..at + text[at..].find('"').unwrap()];
    let out = dir.path().join("one.cands");
    let o = dise(&[
        "elucidate", "--ckpt", p(&ck), "--record", id, "--data", p(&data), "--runs", "4", "--seed", "2",
        "--trajectory-stride", "10", "--out", p(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.starts_with("#dise-candidates v1"));
    assert_eq!(std::fs::read_dir(dir.path().join("one.trajectories")).unwrap().count(), 4);

    let o = dise(&[
        "elucidate", "--ckpt", p(&ck), "--record", "mol-999999", "--data", p(&data), "--seed", "2", "--out", p(&out),
    ]);
    assert_eq!(code(&o), 3);
}
