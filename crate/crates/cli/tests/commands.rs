use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use edgestereo::data::{pfm, visual};

fn edgestereo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_edgestereo"))
        .args(args)
        .env("EDGESTEREO_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = edgestereo(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().into_string().unwrap(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn gen_data_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        ok(&["gen-data", "--count", "4", "--seed", "9", "--out", p(dir)]);
    }
    let files = tree(&a);
    assert_eq!(files.len(), 4 * 5 + 1);
    let manifest = fs::read_to_string(a.join("manifest.toml")).unwrap();
    assert_eq!(manifest.matches("[[samples]]").count(), 4);
    assert_eq!(files, tree(&b));
}

#[test]
fn unwritable_output_fails_with_message() {
    let tmp = tempfile::tempdir().unwrap();
    let blocker = tmp.path().join("file");
    fs::write(&blocker, b"x").unwrap();
    let out = edgestereo(&["gen-data", "--count", "1", "--out", p(&blocker.join("sub"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn eval_of_ground_truth_against_itself() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&["gen-data", "--count", "2", "--out", p(&data)]);
    let report = ok(&["eval", "--pred", p(&data), "--gt", p(&data)]);
    assert!(report.contains("epe = 0.000"), "{report}");
    assert!(report.contains("bad_3 = 0.0%"), "{report}");
}

#[test]
fn train_resume_infer_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    fs::write(
        &cfg,
        "seed = 3\n[training]\niterations = [2, 3, 2]\n[data]\ncount = 4\nheld_out = 2\n",
    )
    .unwrap();
    let (full, part) = (tmp.path().join("full"), tmp.path().join("part"));
    let out = ok(&["train", "--config", p(&cfg), "--out", p(&full), "--log-every", "1"]);
    assert!(out.contains("epe = "), "{out}");
    assert!(full.join("final.ckpt").exists() && full.join("phase3.ckpt").exists());

    ok(&["train", "--config", p(&cfg), "--out", p(&part), "--stop-before", "2:1"]);
    assert!(!part.join("final.ckpt").exists());
    let latest = part.join("latest.ckpt");
    ok(&["train", "--config", p(&cfg), "--out", p(&part), "--resume", p(&latest)]);
    assert_eq!(
        fs::read_to_string(full.join("loss.csv")).unwrap(),
        fs::read_to_string(part.join("loss.csv")).unwrap()
    );
    assert_eq!(fs::read(full.join("final.ckpt")).unwrap(), fs::read(part.join("final.ckpt")).unwrap());

    // a checkpoint from a different architecture is refused
    let other = tmp.path().join("other.toml");
    fs::write(&other, "[model]\ncontext_pyramid = \"P-1_2_4_6\"\n").unwrap();
    let refused = edgestereo(&["train", "--config", p(&other), "--out", p(&part), "--resume", p(&latest)]);
    assert!(!refused.status.success());

    let data = tmp.path().join("data");
    ok(&["gen-data", "--count", "2", "--seed", "5", "--out", p(&data)]);
    let ckpt = full.join("final.ckpt");
    let single = tmp.path().join("single");
    let report = ok(&[
        "infer",
        "--checkpoint",
        p(&ckpt),
        "--left",
        p(&data.join("000000_left.png")),
        "--right",
        p(&data.join("000000_right.png")),
        "--gt",
        p(&data.join("000000_disp.pfm")),
        "--out",
        p(&single),
    ]);
    assert!(report.contains("epe = "));
    let d = pfm::read_pfm(&single.join("disparity.pfm")).unwrap();
    assert_eq!(&d.shape()[2..], &[32, 64]);
    assert_eq!(&visual::read_gray(&single.join("edges.png")).unwrap().shape()[1..], &[32, 64]);
    assert!(single.join("error.png").exists());

    let preds = tmp.path().join("preds");
    ok(&["infer", "--checkpoint", p(&ckpt), "--data", p(&data), "--out", p(&preds)]);
    let report = ok(&["eval", "--pred", p(&preds), "--gt", p(&data)]);
    assert!(report.contains("valid_count = "), "{report}");
}

#[test]
fn gradcheck_passes_on_this_build() {
    let table = ok(&["gradcheck", "--seed", "1"]);
    assert!(table.lines().count() > 12);
    assert!(!table.contains("FAIL"), "{table}");
    assert!(table.contains("correlation1d"));
}
