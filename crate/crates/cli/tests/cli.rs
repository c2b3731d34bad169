use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
model.height = 8
model.width = 8
model.dim = 24
model.heads = 2
model.mm_blocks = 1
model.single_blocks = 1
model.lora_rank = 2
model.lora_alpha = 4
model.mod_dim = 12
model.mod_heads = 1
model.time_features = 8
model.ev_frequencies = 2
train.batch = 2
train.pretrain_steps = 3
train.finetune_steps = 3
data.train = 6
data.held_out = 2
sample.steps = 2
";

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bracketflow")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = bin(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tiny_config(dir: &Path) -> String {
    let path = dir.join("tiny.cfg");
    std::fs::write(&path, TINY).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn train_generate_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let run = dir.path().join("run");
    let stdout = ok(&["train", "--config", &cfg, "--out", p(&run), "--seed", "5"]);
    assert!(stdout.contains("total="));
    let ckpt = run.join("model.ckpt");
    assert!(ckpt.exists());
    let csv = std::fs::read_to_string(run.join("loss.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("step,l_img,l_rad,l_bracket,total"));
    assert_eq!(lines.count(), 6);

    let img = dir.path().join("gen.pfm");
    let preview = dir.path().join("gen.ppm");
    let frames = dir.path().join("frames");
    let stdout = ok(&[
        "generate",
        "--checkpoint",
        p(&ckpt),
        "--prompt",
        "night lamp",
        "--seed",
        "3",
        "--out",
        p(&img),
        "--preview",
        p(&preview),
        "--brackets-dir",
        p(&frames),
    ]);
    assert!(stdout.contains("log_radiance="));
    let hdr = bracketflow::io::read_pfm(&img).unwrap();
    assert_eq!((hdr.width(), hdr.height()), (8, 8));
    assert!(preview.exists());
    assert_eq!(std::fs::read_dir(&frames).unwrap().count(), 4);
    let echo = std::fs::read_to_string(dir.path().join("gen.pfm.config")).unwrap();
    assert!(echo.contains("model.dim = 24"));

    // Same seed, same image.
    let again = dir.path().join("again.pfm");
    ok(&["generate", "--checkpoint", p(&ckpt), "--prompt", "night lamp", "--seed", "3", "--out", p(&again)]);
    assert_eq!(std::fs::read(&img).unwrap(), std::fs::read(&again).unwrap());

    let report = dir.path().join("eval.csv");
    ok(&["eval", "--checkpoint", p(&ckpt), "--out", p(&report)]);
    let text = std::fs::read_to_string(&report).unwrap();
    assert!(text.starts_with("sample,ls,bracket_l1,monotonicity_rate,radiance_mae"));
    assert!(text.lines().last().unwrap().starts_with("aggregate,"));
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["train", "--config", &cfg, "--out", p(&a)]);
    ok(&["train", "--config", &cfg, "--out", p(&b), "--max-steps", "4"]);
    let partial = b.join("model.ckpt");
    ok(&["train", "--resume", p(&partial), "--out", p(&b)]);
    assert_eq!(std::fs::read(a.join("model.ckpt")).unwrap(), std::fs::read(b.join("model.ckpt")).unwrap());
    assert_eq!(
        std::fs::read_to_string(a.join("loss.csv")).unwrap(),
        std::fs::read_to_string(b.join("loss.csv")).unwrap()
    );
}

#[test]
fn synth_data_feeds_training() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let data = dir.path().join("data");
    ok(&["synth-data", "--config", &cfg, "--out", p(&data), "--count", "3", "--seed", "9"]);
    let manifest = std::fs::read_to_string(data.join("manifest.txt")).unwrap();
    assert_eq!(manifest.lines().filter(|l| !l.starts_with('#')).count(), 3);
    assert!(data.join("scene_00000.pfm").exists());
    let run = dir.path().join("run");
    ok(&["train", "--config", &cfg, "--data", p(&data), "--out", p(&run), "--set", "train.finetune_steps=1"]);
    assert!(run.join("model.ckpt").exists());
}

#[test]
fn brackets_then_fuse_recovers_the_image() {
    let dir = tempfile::tempdir().unwrap();
    let w = 16;
    let data: Vec<f64> = (0..w * w * 3).map(|i| 0.002 * (1.0 + (i % 97) as f64)).collect();
    let img = bracketflow::linear_image::RgbImage::new(w, w, data).unwrap();
    let src = dir.path().join("src.pfm");
    bracketflow::io::write_pfm(&src, &img).unwrap();
    let frames = dir.path().join("frames");
    ok(&["brackets", p(&src), "--out-dir", p(&frames)]);
    let names = ["bracket_0_ev-4.ppm", "bracket_1_ev-2.ppm", "bracket_2_ev0.ppm", "bracket_3_ev2.ppm"];
    let paths: Vec<String> = names.iter().map(|n| p(&frames.join(n)).to_string()).collect();
    let out = dir.path().join("fused.pfm");
    let mut args = vec!["fuse"];
    args.extend(paths.iter().map(String::as_str));
    args.extend(["--ev", "-4,-2,0,2", "--out", p(&out)]);
    ok(&args);
    let fused = bracketflow::io::read_pfm(&out).unwrap();
    let rel = fused
        .data()
        .iter()
        .zip(img.data())
        .map(|(a, b)| (a - b).abs() / b)
        .fold(0.0, f64::max);
    // 16-bit quantization of the brightest usable frame bounds the error.
    assert!(rel < 0.02, "max relative error {rel}");
}

#[test]
fn tonemap_and_radscale() {
    let dir = tempfile::tempdir().unwrap();
    let img = bracketflow::linear_image::RgbImage::filled(4, 4, [0.5, 1.0, 2.0]).unwrap();
    let src = dir.path().join("a.pfm");
    bracketflow::io::write_pfm(&src, &img).unwrap();
    let out = dir.path().join("a.ppm");
    ok(&["tonemap", p(&src), "--out", p(&out), "--exposure", "-1"]);
    assert!(bracketflow::io::read_ppm(&out).unwrap().max_value() < 1.0);

    let stdout = ok(&["radscale", p(&src)]);
    assert!(stdout.contains("scale="), "{stdout}");
    let norm = dir.path().join("n.pfm");
    ok(&["radscale", p(&src), "--exposure-time", "0.01", "--iso", "100", "--f-number", "2", "--out", p(&norm)]);
    assert!(norm.exists());
}

#[test]
fn errors_are_reported_with_a_kind() {
    let dir = tempfile::tempdir().unwrap();
    let img = bracketflow::linear_image::RgbImage::filled(2, 2, [0.5; 3]).unwrap();
    let src = dir.path().join("a.pfm");
    bracketflow::io::write_pfm(&src, &img).unwrap();

    let out = bin(&["radscale", p(&src), "--iso", "100"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("kind=invalid_meta"));

    let out = bin(&["brackets", p(&src), "--ev", "-2,2", "--out-dir", p(dir.path())]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("kind=invalid_ev_list"));

    let out = bin(&["tonemap", p(&dir.path().join("missing.pfm")), "--out", p(&dir.path().join("x.ppm"))]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("kind=io"));

    let out = bin(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("kind=usage"));

    let cfg = tiny_config(dir.path());
    let out = bin(&["train", "--config", &cfg, "--out", p(dir.path()), "--set", "model.heads=5"]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("kind=config"));
}
