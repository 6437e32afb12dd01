#![allow(dead_code)]

use std::path::{Path, PathBuf};

use digitnet::mnist::{Dataset, MnistFiles};

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn fixture_images() -> PathBuf {
    fixture_dir().join("mini-images-idx3-ubyte")
}

pub fn fixture_labels() -> PathBuf {
    fixture_dir().join("mini-labels-idx1-ubyte")
}

pub fn fixture_dataset() -> Dataset {
    Dataset::load(&fixture_images(), &fixture_labels()).unwrap()
}

/// Full MNIST directory: `MNIST_DIR` if set, else `data/mnist` at the
/// workspace root. `None` when the files are not there.
pub fn mnist_dir() -> Option<PathBuf> {
    let dir = std::env::var_os("MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"));
    MnistFiles::locate(&dir).ok().map(|_| dir)
}

pub fn mnist() -> Option<(Dataset, Dataset)> {
    let dir = mnist_dir()?;
    let files = MnistFiles::locate(&dir).ok()?;
    Some((files.load_train().unwrap(), files.load_test().unwrap()))
}
