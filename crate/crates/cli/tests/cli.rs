use std::path::Path;
use std::process::{Command, Output};

use rcsbnet::io::{write_gray_png, write_rgb_png};
use rcsbnet::Tensor;

fn rcsbnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rcsbnet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: &[&str] = &[
    "--set",
    "train.epochs=2",
    "--set",
    "data.synthetic=4",
    "--set",
    "data.height=32",
    "--set",
    "data.width=32",
    "--set",
    "model.channels=8",
];

fn train_small(out: &Path) -> Output {
    let mut args = vec!["train", "--config", "tiny_overfit", "--seed", "5", "--out", s(out)];
    args.extend_from_slice(SMALL);
    rcsbnet(&args)
}

fn disc(h: usize, w: usize) -> Tensor<f32> {
    let data = (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f32 - h as f32 / 2.0, (i % w) as f32 - w as f32 / 2.0);
            (y * y + x * x < (h * w) as f32 / 10.0) as u8 as f32
        })
        .collect();
    Tensor::plane(h, w, data).unwrap()
}

fn photo(h: usize, w: usize) -> Tensor<f32> {
    let data = (0..3 * h * w).map(|i| ((i * 7) % 251) as f32 / 250.0).collect();
    Tensor::from_vec([1, 3, h, w], data).unwrap()
}

#[test]
fn help_lists_shared_flags() {
    let o = rcsbnet(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    for mode in ["train", "infer", "eval", "gen-contours", "param-count", "dump-weight-maps"] {
        assert!(stdout(&o).contains(mode), "{mode} missing");
    }
    let o = rcsbnet(&["train", "--help"]);
    assert_eq!(o.status.code(), Some(0));
    for flag in ["--config", "--set", "--seed", "--out", "--resume"] {
        assert!(stdout(&o).contains(flag), "{flag} missing");
    }
}

#[test]
fn usage_errors_exit_one() {
    let o = rcsbnet(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"));
    assert_eq!(rcsbnet(&["param-count", "--bogus"]).status.code(), Some(1));
    assert_eq!(rcsbnet(&[]).status.code(), Some(1));
    let o = rcsbnet(&["param-count", "--set", "model.nonexistent=3"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("nonexistent"));
    assert_eq!(rcsbnet(&["param-count", "--config", "no_such_preset"]).status.code(), Some(1));
}

#[test]
fn param_count_prints_table() {
    let o = rcsbnet(&["param-count", "--config", "default"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.starts_with("total "));
    assert!(text.contains("encoder.backbone"));
    assert!(text.contains("decoder.s32"));
    assert!(text.contains("refinement"));
}

#[test]
fn eval_reports_unmatched_stems() {
    let dir = tempfile::tempdir().unwrap();
    let (pred, gt) = (dir.path().join("p"), dir.path().join("g"));
    write_gray_png(&pred.join("a.png"), &disc(8, 8)).unwrap();
    write_gray_png(&pred.join("b.png"), &disc(8, 8)).unwrap();
    write_gray_png(&gt.join("a.png"), &disc(8, 8)).unwrap();
    write_gray_png(&gt.join("c.png"), &disc(8, 8)).unwrap();
    let o = rcsbnet(&["eval", "--pred", s(&pred), "--gt", s(&gt), "--out", s(&dir.path().join("r"))]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("\"b\"") && err.contains("\"c\""), "{err}");
}

#[test]
fn eval_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let (pred, gt) = (dir.path().join("p"), dir.path().join("g"));
    for i in 0..2 {
        write_gray_png(&gt.join(format!("{i}.png")), &disc(12, 16)).unwrap();
        let soft = disc(12, 16).map(|v| 0.2 + 0.6 * v);
        write_gray_png(&pred.join(format!("{i}.png")), &soft).unwrap();
    }
    let mut reports = Vec::new();
    for run in 0..2 {
        let out = dir.path().join(format!("r{run}"));
        let o = rcsbnet(&["eval", "--pred", s(&pred), "--gt", s(&gt), "--out", s(&out)]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        assert!(stdout(&o).contains("report.json"));
        reports.push((
            std::fs::read(out.join("report.json")).unwrap(),
            std::fs::read(out.join("curves.csv")).unwrap(),
        ));
    }
    assert_eq!(reports[0], reports[1]);
    assert_eq!(String::from_utf8_lossy(&reports[0].1).lines().count(), 257);
}

#[test]
fn train_infer_and_dump() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let o = train_small(&run);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let ck = run.join("checkpoint.safetensors");
    assert!(ck.is_file());
    let log = std::fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);

    let again = dir.path().join("again");
    assert_eq!(train_small(&again).status.code(), Some(0));
    assert_eq!(std::fs::read(&ck).unwrap(), std::fs::read(again.join("checkpoint.safetensors")).unwrap());

    let o = rcsbnet(&["train", "--resume", "--out", s(&run), "--set", "train.epochs=3"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(std::fs::read_to_string(run.join("train_log.jsonl")).unwrap().lines().count(), 2);

    let images = dir.path().join("images");
    write_rgb_png(&images.join("x.png"), &photo(40, 30)).unwrap();
    let out = dir.path().join("pred");
    let o = rcsbnet(&["infer", "--checkpoint", s(&ck), "--input", s(&images), "--out", s(&out), "--contours"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let sal = rcsbnet::io::read_gray(&out.join("x.png")).unwrap();
    assert_eq!(sal.shape(), [1, 1, 40, 30]);
    assert!(out.join("x_contour.png").is_file());

    let mask = dir.path().join("mask.png");
    write_gray_png(&mask, &disc(40, 30)).unwrap();
    let maps = dir.path().join("maps");
    let picture = images.join("x.png");
    let args = [
        "dump-weight-maps",
        "--checkpoint",
        s(&ck),
        "--image",
        s(&picture),
        "--mask",
        s(&mask),
        "--out",
        s(&maps),
    ];
    let o = rcsbnet(&args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for name in ["confidence", "dc_saliency", "dc_contour", "wiou", "focal", "saliency", "contour"] {
        assert!(maps.join(format!("{name}.png")).is_file(), "{name}");
    }
    let first = std::fs::read(maps.join("wiou.png")).unwrap();
    assert_eq!(rcsbnet(&args).status.code(), Some(0));
    assert_eq!(first, std::fs::read(maps.join("wiou.png")).unwrap());
}

#[test]
fn runtime_failures_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.safetensors");
    let o = rcsbnet(&["infer", "--checkpoint", s(&missing), "--input", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn gen_contours_writes_pngs() {
    let dir = tempfile::tempdir().unwrap();
    write_gray_png(&dir.path().join("masks/m1.png"), &disc(20, 20)).unwrap();
    write_gray_png(&dir.path().join("masks/m2.png"), &disc(10, 14)).unwrap();
    let o = rcsbnet(&["gen-contours", "--root", s(dir.path())]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let c = rcsbnet::io::read_gray(&dir.path().join("contours/m1.png")).unwrap();
    assert_eq!(c.shape(), [1, 1, 20, 20]);
    assert!(c.data().iter().any(|&v| v == 1.0));
    assert_eq!(rcsbnet(&["gen-contours"]).status.code(), Some(1));
}
