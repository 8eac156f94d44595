//! Running the `flowcast` binary from tests.
#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

pub fn flowcast(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_flowcast"))
        .args(args)
        .env("FMF_THREADS", "1")
        .output()
        .expect("spawn flowcast");
    out
}

/// Run and require success, echoing stderr on failure.
pub fn ok(args: &[&str]) -> Output {
    let out = flowcast(args);
    assert!(
        out.status.success(),
        "flowcast {args:?} failed with {:?}:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn code(args: &[&str]) -> i32 {
    flowcast(args).status.code().expect("exit code")
}

pub fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}
