#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const SAMPLES: &str = "16";

pub fn tpedit(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tpedit"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("tpedit runs")
}

/// Runs `tpedit` and panics with its stderr unless it succeeds.
pub fn ok(args: &[&str], cwd: &Path) -> String {
    let out = tpedit(args, cwd);
    assert!(
        out.status.success(),
        "tpedit {args:?} failed ({:?}):\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Runs `tpedit`, expects it to fail, and returns its exit code and stderr.
pub fn fails(args: &[&str], cwd: &Path) -> (i32, String) {
    let out = tpedit(args, cwd);
    assert!(!out.status.success(), "tpedit {args:?} unexpectedly succeeded");
    (
        out.status.code().expect("exit code"),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

/// Field flags for a checkpoint small enough to train in well under a second.
pub const SMALL_FIELD: &[&str] = &["--resolution", "12", "--feature-dim", "4", "--hidden", "12", "--geom-dim", "6"];

/// A 16x16 two-object dataset and a briefly trained checkpoint in a temp dir.
pub struct Scene {
    pub dir: tempfile::TempDir,
}

impl Scene {
    pub fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        ok(
            &[
                "synth",
                "--out",
                "data",
                "--width",
                "16",
                "--height",
                "16",
                "--train",
                "8",
                "--holdout",
                "1",
            ],
            dir.path(),
        );
        let mut args = vec![
            "pretrain",
            "--data",
            "data",
            "--out",
            "field.pnck",
            "--iters",
            "120",
            "--rays",
            "96",
            "--samples",
            SAMPLES,
        ];
        args.extend_from_slice(SMALL_FIELD);
        ok(&args, dir.path());
        Self { dir }
    }

    pub fn path(&self) -> &Path {
        self.dir.path()
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}
