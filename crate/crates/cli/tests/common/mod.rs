#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

pub fn repo() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn fixtures() -> PathBuf {
    repo().join("fixtures")
}

/// A scratch directory with its own database file.
pub struct Workspace {
    pub dir: tempfile::TempDir,
}

impl Workspace {
    pub fn new() -> Self {
        Self { dir: tempfile::tempdir().unwrap() }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    pub fn db(&self) -> String {
        self.path("bank.db").display().to_string()
    }

    /// The binary with a clean environment pointed at this workspace.
    pub fn cmd(&self) -> Command {
        let mut c = Command::new(env!("CARGO_BIN_EXE_juvenotes"));
        c.current_dir(self.dir.path())
            .env_clear()
            .env("PATH", std::env::var("PATH").unwrap_or_default())
            .env("DATABASE_URL", self.db())
            .env("OCR_FIXTURES_DIR", fixtures().join("layouts"))
            .env("PROMPT_PATH", repo().join("prompts/system.txt"));
        c
    }

    pub fn run(&self, args: &[&str]) -> Output {
        self.cmd().args(args).output().unwrap()
    }

    /// Runs with `--json` and parses the summary; panics on failure.
    pub fn json(&self, args: &[&str]) -> Value {
        let mut full = vec!["--json"];
        full.extend_from_slice(args);
        let out = self.run(&full);
        assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
        serde_json::from_slice(&out.stdout).unwrap()
    }

    pub fn seed(&self) {
        let dir = fixtures().display().to_string();
        self.json(&["seed", "--fixtures-dir", &dir]);
    }

    pub fn process(&self, paper: &FixturePaper, out: Option<&Path>) -> Value {
        let file = fixtures().join(&paper.file).display().to_string();
        let year = paper.year.to_string();
        let mut args = vec![
            "process",
            file.as_str(),
            "--course",
            paper.course.as_str(),
            "--paper-title",
            paper.title.as_str(),
            "--paper-year",
            year.as_str(),
            "--provider",
            "local",
        ];
        let out_s;
        if let Some(p) = out {
            out_s = p.display().to_string();
            args.extend(["--out", out_s.as_str()]);
        }
        self.json(&args)
    }
}

#[derive(Debug, Clone)]
pub struct FixturePaper {
    pub file: String,
    pub course: String,
    pub title: String,
    pub year: i32,
    pub entry: Value,
}

/// Documents listed in the fixture manifest.
pub fn manifest() -> Vec<FixturePaper> {
    let raw = std::fs::read_to_string(fixtures().join("manifest.json")).unwrap();
    let v: Value = serde_json::from_str(&raw).unwrap();
    v["documents"]
        .as_array()
        .unwrap()
        .iter()
        .map(|d| FixturePaper {
            file: d["file"].as_str().unwrap().into(),
            course: d["course"].as_str().unwrap().into(),
            title: d["paper"]["title"].as_str().unwrap().into(),
            year: d["paper"]["year"].as_i64().unwrap() as i32,
            entry: d.clone(),
        })
        .collect()
}

pub fn fixture_paper(file: &str) -> FixturePaper {
    manifest().into_iter().find(|p| p.file == file).unwrap()
}
