//! Shared helpers for the acceptance suite in `tests/acceptance.rs`.

use std::path::PathBuf;

/// The MNIST directory: `$FLATGRAD_DATA` or `data/mnist` at the workspace root.
pub fn mnist_dir() -> Option<PathBuf> {
    let dir = std::env::var_os("FLATGRAD_DATA")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"));
    if dir.join("train-images-idx3-ubyte").exists() {
        Some(dir)
    } else {
        eprintln!(
            "MNIST not found at {}; run `flatgrad fetch-data` first",
            dir.display()
        );
        None
    }
}
