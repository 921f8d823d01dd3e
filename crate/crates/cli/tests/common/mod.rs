#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const HEADER: &str = "epoch,step,photo_gen_loss,photo_disc_loss,monet_gen_loss,monet_disc_loss";

pub fn fixture(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(rel)
}

pub fn cyclegan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cyclegan"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

/// One epoch at 64×64, batch 2, on the bundled 8-photo / 4-painting set.
pub fn train_fixture(out: &Path) -> Output {
    let data = fixture("data");
    cyclegan(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--size",
        "64",
        "--epochs",
        "1",
        "--batch",
        "2",
        "--base-channels",
        "16",
        "--seed",
        "3",
    ])
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}
