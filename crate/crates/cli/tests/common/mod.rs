#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

/// Small volumes and a two-level network, enough to exercise every command.
pub const TINY: &str = "\
seed = 11
volumes = 6
size_x = 16
size_y = 16
size_z = 16
tube_diameter_min = 2
tube_diameter_max = 3
apex_offset = 4
label_fraction_min = 0.005
label_fraction_max = 0.2
ambiguity_fraction = 0
split_train = 0.5
split_val = 0.17
split_test = 0.33
depth = 2
base_filters = 2
learning_rate = 0.001
epochs = 2
slice_batch_axial = 4
slice_batch_other = 4
";

pub fn write_tiny_config(dir: &Path) -> std::path::PathBuf {
    let p = dir.join("tiny.txt");
    std::fs::write(&p, TINY).unwrap();
    p
}

pub fn runet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_runet"))
        .args(args)
        .output()
        .expect("runet binary runs")
}

pub fn check(args: &[&str]) -> Output {
    let out = runet(args);
    assert!(
        out.status.success(),
        "runet {args:?} failed with {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}
