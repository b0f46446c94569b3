//! Shared fixtures for the benchmarks.

use std::sync::Arc;

use robustlab::fonts::{train_test, PrototypeSet, SyntheticDataset, NUM_CLASSES};
use robustlab::nn::{ArchitectureKind, Classifier};

/// A small synthetic test split.
pub fn dataset(n: usize) -> SyntheticDataset {
    let protos = Arc::new(PrototypeSet::builtin(28).expect("builtin prototypes"));
    train_test(protos, NUM_CLASSES, n, 3).expect("dataset").1
}

/// An untrained classifier for 28x28 inputs.
pub fn classifier(kind: ArchitectureKind) -> Classifier {
    Classifier::build(kind, &[1, 28, 28], NUM_CLASSES, 5).expect("classifier")
}
