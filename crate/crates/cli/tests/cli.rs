use std::path::Path;
use std::process::{Command, Output};

fn lion(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lion"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn lion")
}

fn ok(args: &[&str]) -> String {
    let out = lion(args);
    assert!(
        out.status.success(),
        "lion {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path) {
    ok(&[
        "gen-data",
        "--seed",
        "3",
        "--out",
        s(dir),
        "--train-scenes",
        "12",
        "--eval-scenes",
        "4",
        "--noise-rate",
        "0.2",
    ]);
}

#[test]
fn gen_data_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    gen(&a);
    gen(&b);
    for f in ["train.jsonl", "eval.jsonl", "meta.json"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn renders_the_grounding_question() {
    let out = ok(&[
        "render-template",
        "--subtype",
        "rec",
        "--index",
        "2",
        "--expr",
        "a glass of beer",
    ]);
    assert_eq!(
        out.trim_end(),
        "How can I locate a glass of beer in the image? Please provide the coordinates."
    );
    let missing = lion(&["render-template", "--subtype", "rec", "--index", "2"]);
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(lion(&["gen-data", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(lion(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn staged_pipeline_and_bad_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data);
    let boot = tmp.path().join("boot.ck");
    let tiny = [
        "--d-model",
        "8",
        "--n-heads",
        "2",
        "--d-ff",
        "16",
        "--queries",
        "2",
        "--rank",
        "2",
    ];
    let mut args = vec![
        "bootstrap",
        "--data",
        s(&data),
        "--out",
        s(&boot),
        "--steps",
        "3",
        "--batch-size",
        "2",
        "--warmup-steps",
        "1",
    ];
    args.extend(tiny);
    ok(&args);
    assert!(Path::new(&format!("{}.metrics.jsonl", boot.display())).exists());

    let s1 = tmp.path().join("s1.ck");
    ok(&[
        "train",
        "--stage",
        "s1",
        "--data",
        s(&data),
        "--init",
        s(&boot),
        "--out",
        s(&s1),
        "--steps",
        "2",
        "--batch-size",
        "2",
        "--warmup-steps",
        "1",
    ]);
    let info = ok(&["inspect-checkpoint", s(&s1)]);
    assert!(info.contains("provenance [bootstrap, s1]"), "{info}");

    // s2 before s1 is refused
    let s2 = tmp.path().join("s2.ck");
    let out = lion(&[
        "train",
        "--stage",
        "s2",
        "--data",
        s(&data),
        "--init",
        s(&boot),
        "--out",
        s(&s2),
        "--steps",
        "2",
        "--warmup-steps",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("s1"));

    let report = tmp.path().join("vqa.json");
    let out = ok(&[
        "eval",
        "--task",
        "vqa",
        "--data",
        s(&data),
        "--checkpoint",
        s(&s1),
        "--limit",
        "3",
        "--out",
        s(&report),
    ]);
    assert!(out.starts_with("vqa top1_accuracy = "), "{out}");
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v["n_samples"], 3);

    let bytes = std::fs::read(&s1).unwrap();
    let cut = tmp.path().join("cut.ck");
    std::fs::write(&cut, &bytes[..bytes.len() - 5]).unwrap();
    let out = lion(&["inspect-checkpoint", s(&cut)]);
    assert_eq!(out.status.code(), Some(1));
    let out = lion(&[
        "eval",
        "--task",
        "rec",
        "--data",
        s(&data),
        "--checkpoint",
        s(&cut),
    ]);
    assert_eq!(out.status.code(), Some(1));
}
