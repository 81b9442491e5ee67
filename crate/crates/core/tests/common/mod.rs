#![allow(dead_code)]

use std::path::PathBuf;

use testchain::dataset::{load_dataset, Dataset};
use testchain::SandboxSession;

pub fn interpreter() -> PathBuf {
    std::env::var_os("TESTCHAIN_PYTHON").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("python3"))
}

pub fn session() -> SandboxSession {
    SandboxSession::start_default(interpreter()).expect("python sandbox starts")
}

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests").join("fixtures").join(name)
}

pub fn fixture_dataset() -> Dataset {
    load_dataset(&fixture("fixture.jsonl")).expect("fixture dataset loads")
}
