use std::path::Path;
use std::process::{Command, Output};

use ddnet_core::checkpoint::{save_checkpoint, Checkpoint};
use ddnet_core::image::{load_image, save_image};
use ddnet_core::model::{Model, ModelConfig};
use ddnet_core::Image;

fn ddnet(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ddnet"))
        .args(args)
        .current_dir(dir)
        .env_remove("DDNET_SERVER")
        .env_remove("DDNET_DEVICE")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn scene(k: usize) -> Image {
    Image::from_fn(24, 24, 3, |c, y, x| 0.1 + ((x * (k + 2) + 3 * y + c) % 13) as f32 / 16.0).unwrap()
}

fn small() -> ModelConfig {
    ModelConfig {
        base_channels: 2,
        num_scales: 2,
        ..ModelConfig::default()
    }
}

#[test]
fn full_workflow_with_embedded_server() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    for k in 0..3 {
        save_image(&scene(k), root.join(format!("clear/c{k}.png"))).unwrap();
    }

    let o = ddnet(root, &["synthesize", "--in", "clear", "--out", "synth", "--seed", "4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("3 pairs"));
    assert!(root.join("synth/coefficients.csv").is_file());

    std::fs::write(
        root.join("train.toml"),
        "epochs = 1\nbatch = 3\npatch = 16\nbase_channels = 2\nnum_scales = 2\ntrain_root = \"synth\"\nout_dir = \"run\"\n",
    )
    .unwrap();
    let o = ddnet(root, &["train", "--config", "train.toml", "--set", "seed=9"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("epoch   1/1"), "{}", stdout(&o));
    assert!(root.join("run/final.ckpt").is_file());
    let log = std::fs::read_to_string(root.join("run/train_log.csv")).unwrap();
    assert_eq!(log.lines().next().unwrap(), "step,epoch,lr,lap,coarse,final,total");
    assert_eq!(log.lines().count(), 2);

    let o = ddnet(root, &["enhance", "--ckpt", "run/final.ckpt", "--in", "synth/low", "--out", "bright", "--tile", "80"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().count(), 3);
    assert_eq!(load_image(root.join("bright/c2.png")).unwrap().height(), 24);

    let o = ddnet(root, &["eval", "--ckpt", "run/final.ckpt", "--data", "synth", "--report", "rep"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("PSNR") && stdout(&o).contains("(3 images)"));
    assert_eq!(std::fs::read_to_string(root.join("rep/eval.csv")).unwrap().lines().count(), 4);
    assert!(root.join("rep/eval.json").is_file());

    let o = ddnet(root, &["bench", "--ckpt", "run/final.ckpt", "--res", "40x30", "--res", "64x48", "--report", "rep"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = stdout(&o);
    assert!(table.contains("40x30") && table.contains("64x48") && table.contains("reference only"));
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(root.join("rep/bench.json")).unwrap()).unwrap();
    assert_eq!(json["rows"].as_array().unwrap().len(), 2);
    assert_eq!(std::fs::read_to_string(root.join("rep/bench.csv")).unwrap().lines().count(), 3);

    let o = ddnet(root, &["gradmap", "--in", "clear/c0.png", "--out", "grad.png"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(load_image(root.join("grad.png")).unwrap().width(), 24);
}

#[test]
fn enhance_with_zero_checkpoint_is_identity() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = Checkpoint {
        model: Model::zeroed(&small()).unwrap(),
        step: 0,
        epoch: 0,
        optimizer: None,
    };
    save_checkpoint(&ckpt, dir.path().join("zero.ckpt")).unwrap();
    save_image(&scene(1), dir.path().join("x.png")).unwrap();
    let o = ddnet(dir.path(), &["enhance", "--ckpt", "zero.ckpt", "--in", "x.png", "--out", "y.png"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(load_image(dir.path().join("y.png")).unwrap(), load_image(dir.path().join("x.png")).unwrap());
}

fn error_line(o: &Output) -> String {
    let err = stderr(o);
    assert_eq!(err.lines().count(), 1, "{err}");
    err.trim_end().to_string()
}

#[test]
fn failures_print_one_categorized_line() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();

    let o = ddnet(root, &["enhance", "--ckpt", "missing.ckpt", "--in", "a.png", "--out", "o"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(error_line(&o).starts_with("error[checkpoint]: "));

    let o = ddnet(root, &["gradmap", "--in", "missing.png", "--out", "g.png"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(error_line(&o).starts_with("error[io]: "));

    std::fs::write(root.join("bad.ckpt"), "not a checkpoint").unwrap();
    let o = ddnet(root, &["bench", "--ckpt", "bad.ckpt", "--res", "32x32"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(error_line(&o).starts_with("error[checkpoint]: "));

    let o = ddnet(root, &["bench", "--ckpt", "bad.ckpt", "--repeats", "2"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(error_line(&o).starts_with("error[argument]: "));

    let o = ddnet(root, &["train", "--set", "no_such_key=1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(error_line(&o).starts_with("error[argument]: "));

    save_image(&scene(0), root.join("a.png")).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_ddnet"))
        .args(["enhance", "--ckpt", "bad.ckpt", "--in", "a.png", "--out", "o"])
        .current_dir(root)
        .env("DDNET_DEVICE", "cuda:0")
        .env_remove("DDNET_SERVER")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(error_line(&o).starts_with("error[device]: "));

    let o = ddnet(root, &["--server", "http://127.0.0.1:1", "gradmap", "--in", "a.png", "--out", "b.png"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(error_line(&o).starts_with("error[connection]: "));
}
