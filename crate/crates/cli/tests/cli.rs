use std::path::Path;
use std::process::{Command, Output};

use anaconv::dataio::idx::{encode_images, encode_labels, IdxImages};
use anaconv::dataio::{load_checkpoint, targets_to_json, Split};
use anaconv::nn::models;
use anaconv::{KernelFamily, KernelSize, KernelSpec};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_anaconv"))
        .args(args)
        .env("ANALYTIC_CONV_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Small MNIST-shaped dataset: class = brightest quadrant band.
fn write_fixture(dir: &Path, n: usize) {
    for split in [Split::Train, Split::Test] {
        let mut pixels = Vec::with_capacity(n * 784);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let label = (i % 10) as u8;
            for r in 0..28 {
                for c in 0..28 {
                    let on = (r / 3) % 10 == label as usize || (c + i) % 17 == 0;
                    pixels.push(if on { 200 } else { ((r * c + i) % 23) as u8 });
                }
            }
            labels.push(label);
        }
        let (img, lbl) = split.file_names();
        std::fs::write(dir.join(img), encode_images(&IdxImages { count: n, rows: 28, cols: 28, pixels })).unwrap();
        std::fs::write(dir.join(lbl), encode_labels(&labels)).unwrap();
    }
}

#[test]
fn compact_values_and_errors() {
    let o = run(&["compact", "--arrangement", "(3x64)G30Lg15Lt15Tf36P96"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim(), "0.4726");
    assert!(stderr(&o).contains("\"kernel\":\"7x7\""), "config echo missing");

    let o = run(&["compact", "--arrangement", "(3x64)P192"]);
    assert_eq!(stdout(&o).trim(), "0.0000");

    let o = run(&["compact", "--arrangement", "(3x64)G30Lg15"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("45"));

    let o = run(&["compact", "--arrangement", "G0.5P0.5"]);
    assert_eq!(o.status.code(), Some(1));

    let o = run(&["compact", "--arrangement", "(1x1)P1", "--nope"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn gradcheck_passes_and_detects_fault() {
    let o = run(&["gradcheck", "--points", "4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = stdout(&o);
    for fam in ["Gabor", "LoG", "LoT", "TGD1st", "TGD2nd", "Plain"] {
        let line = table.lines().find(|l| l.starts_with(fam)).unwrap();
        assert!(line.ends_with("pass"), "{line}");
    }

    let o = run(&["gradcheck", "--arrangement", "(2x2)M4"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("no AKPs"));

    let o = run(&["gradcheck", "--points", "2", "--inject-fault"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stdout(&o).contains("FAIL"));
}

#[test]
fn fit_reports_parameter_counts() {
    let dir = tempfile::tempdir().unwrap();
    let targets: Vec<_> = [0.2, 1.1, 2.4]
        .iter()
        .map(|&t| {
            KernelSpec::new(KernelFamily::Gabor, vec![3.0, t, 0.1, 1.2], KernelSize::square(7))
                .unwrap()
                .sample()
                .unwrap()
        })
        .collect();
    let path = dir.path().join("targets.json");
    std::fs::write(&path, targets_to_json(&targets)).unwrap();
    let report = dir.path().join("report.json");
    let o = run(&["fit", "--targets", path.to_str().unwrap(), "--family", "G", "--out", report.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(v["akp_total"], 12);
    assert_eq!(v["param_total"], 147);
    for k in v["kernels"].as_array().unwrap() {
        assert!(k["rmse"].as_f64().unwrap() < 1e-4);
    }

    let o = run(&["fit", "--targets", path.to_str().unwrap(), "--family", "M"]);
    assert_eq!(o.status.code(), Some(1));
    let o = run(&["fit", "--targets", path.to_str().unwrap(), "--family", "Q"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn train_eval_render_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("mnist");
    std::fs::create_dir(&data).unwrap();
    write_fixture(&data, 40);
    let d = data.to_str().unwrap();

    let train = |name: &str, epochs: &str| {
        let ckpt = dir.path().join(name);
        let o = run(&[
            "train",
            "--net",
            "anann-lenet",
            "--data-dir",
            d,
            "--epochs",
            epochs,
            "--batch",
            "8",
            "--seed",
            "7",
            "--out",
            ckpt.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(stderr(&o).contains("G0.1562Lg0.0781Lt0.0781Tf0.1875P0.5"));
        let metrics = std::fs::read_to_string(format!("{}.metrics.jsonl", ckpt.display())).unwrap();
        (ckpt, metrics)
    };

    // zero epochs leaves the initialization
    let (c0, m0) = train("zero.ckpt", "0");
    assert!(m0.is_empty());
    let pattern = anaconv::parse_pattern(models::EXP3_RATIOS).unwrap();
    assert_eq!(load_checkpoint(&c0).unwrap().network, models::anann_lenet(&pattern, 7).unwrap());

    // same seed, identical metrics and checkpoints
    let (c1, m1) = train("a.ckpt", "2");
    let (c2, m2) = train("b.ckpt", "2");
    assert_eq!(m1.lines().count(), 2);
    assert_eq!(m1, m2);
    assert_eq!(load_checkpoint(&c1).unwrap().network, load_checkpoint(&c2).unwrap().network);
    let first: serde_json::Value = serde_json::from_str(m1.lines().next().unwrap()).unwrap();
    assert!(first["train"]["loss"].as_f64().unwrap().is_finite());
    assert!(first["test"]["accuracy"].as_f64().is_some());

    let o = run(&["eval", "--ckpt", c1.to_str().unwrap(), "--data-dir", d]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(v["items"], 40);

    let img = |name: &str, layer: &str| {
        let out = dir.path().join(name);
        let o = run(&["render", "--ckpt", c1.to_str().unwrap(), "--layer", layer, "--out", out.to_str().unwrap()]);
        (o, out)
    };
    let (o, a) = img("l1.pgm", "1");
    assert!(o.status.success(), "{}", stderr(&o));
    let (_, b) = img("l1b.pgm", "1");
    let bytes = std::fs::read(&a).unwrap();
    assert!(bytes.starts_with(b"P5\n"));
    assert_eq!(bytes, std::fs::read(&b).unwrap());
    let (o, _) = img("bad.pgm", "2");
    assert_eq!(o.status.code(), Some(1));

    let o = run(&["train", "--net", "lenet", "--arrangement", "P1.0", "--data-dir", d, "--out", "x"]);
    assert_eq!(o.status.code(), Some(1));
    let o = run(&["train", "--net", "anann-lenet", "--arrangement", "G0.5Zz0.5", "--data-dir", d, "--out", "x"]);
    assert_eq!(o.status.code(), Some(1));
    let missing = dir.path().join("none");
    let o = run(&["train", "--net", "lenet", "--data-dir", missing.to_str().unwrap(), "--out", "x"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn thread_setting_is_validated() {
    let o = Command::new(env!("CARGO_BIN_EXE_anaconv"))
        .args(["compact", "--arrangement", "(1x1)P1", "--kernel", "3"])
        .env("ANALYTIC_CONV_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
}
