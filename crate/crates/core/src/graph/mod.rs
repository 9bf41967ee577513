//! Datasets and the renormalised adjacency operator.

mod dataset;
mod normalized;
pub mod synthetic;

pub use dataset::{
    load_dataset, DatasetFormat, RawDataset, Splits, DATASET_FILES, EDGES_FILE, FEATURES_FILE, LABELS_FILE, SPLITS_FILE,
};
pub use normalized::{normalize, NormalizedGraph};
pub use synthetic::SyntheticSpec;
