//! Drives the `stylebooth` binary end to end.

use std::path::Path;
use std::process::{Command, Output};

use stylebooth::image::Image;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stylebooth"))
        .args(args)
        .env_remove("STYLEBOOTH_BACKEND")
        .output()
        .expect("spawn stylebooth")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn textured(path: &Path) {
    let mut data = Vec::with_capacity(3 * 16 * 16);
    for c in 0..3 {
        for i in 0..256 {
            data.push(((i * 7 + c * 31) % 97) as f32 / 97.0);
        }
    }
    Image::from_planar(16, 16, data).unwrap().save_png(path).unwrap();
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(code(&bin(&["--help"])), 0);
    assert_eq!(code(&bin(&["--no-such-flag"])), 1);
    assert_eq!(code(&bin(&["pipeline", "report"])), 1);
}

#[test]
fn eval_rejects_a_benchmark_with_no_usable_records() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("records.jsonl");
    std::fs::write(&path, "\n   \n").unwrap();
    let o = bin(&["eval", "--records", path.to_str().unwrap()]);
    assert_eq!(code(&o), 1, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn edit_writes_an_image() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.png");
    let out = dir.path().join("out.png");
    textured(&input);
    let o = bin(&[
        "edit",
        "--image",
        input.to_str().unwrap(),
        "--instruction",
        "Let this image be in the style of <style>",
        "--style",
        "Cubism",
        "--out",
        out.to_str().unwrap(),
        "--steps",
        "2",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let edited = Image::load(&out).unwrap();
    assert_eq!((edited.width(), edited.height()), (16, 16));
}

#[test]
fn edit_refuses_unbound_placeholder() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.png");
    textured(&input);
    let o = bin(&["edit", "--image", input.to_str().unwrap(), "--instruction", "in the style of <style>"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn pipeline_run_report_resume() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let run = run.to_str().unwrap();
    let small = [
        "--max-styles", "2", "--max-prompts", "2", "--max-captions", "2", "--tuner-steps", "2", "--steps", "2",
    ];
    let o = bin(&[&["pipeline", "run", "--run-dir", run][..], &small].concat());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("finalize"));

    let o = bin(&["pipeline", "report", "--run-dir", run]);
    assert_eq!(code(&o), 0);
    let table = stdout(&o);
    assert!(table.lines().next().unwrap().starts_with("style"));
    assert!(table.contains("Average"));

    let o = bin(&["pipeline", "report", "--run-dir", run, "--json"]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["rows"].as_array().unwrap().len(), 2);

    let o = bin(&["pipeline", "resume", "--run-dir", run]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("nothing to do"));
}

#[test]
fn report_on_missing_run_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin(&["pipeline", "report", "--run-dir", dir.path().join("absent").to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}
