use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::DenseMatrix;

pub const EDGES_FILE: &str = "edges.tsv";
pub const FEATURES_FILE: &str = "features.csv";
pub const LABELS_FILE: &str = "labels.txt";
pub const SPLITS_FILE: &str = "splits.json";

/// The files that make up a dataset directory, in hashing order.
pub const DATASET_FILES: [&str; 4] = [EDGES_FILE, FEATURES_FILE, LABELS_FILE, SPLITS_FILE];

/// On-disk dataset layouts understood by [`load_dataset`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DatasetFormat {
    /// `edges.tsv`, `features.csv`, `labels.txt` and `splits.json` in one directory.
    #[default]
    Directory,
}

impl FromStr for DatasetFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dir" | "directory" => Ok(DatasetFormat::Directory),
            other => Err(Error::Config(format!("unknown dataset format '{other}' (valid: dir)"))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// A node-classification dataset as read from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDataset {
    pub num_nodes: usize,
    /// Undirected edges exactly as listed in the input, duplicates included.
    pub edges: Vec<(usize, usize)>,
    pub features: DenseMatrix,
    /// `None` marks an unlabeled node.
    pub labels: Vec<Option<usize>>,
    pub num_classes: usize,
    pub splits: Splits,
}

impl RawDataset {
    /// Assembles a dataset, inferring the class count from the labels, and validates it.
    pub fn new(
        edges: Vec<(usize, usize)>,
        features: DenseMatrix,
        labels: Vec<Option<usize>>,
        splits: Splits,
    ) -> Result<Self> {
        let num_classes = labels.iter().flatten().max().map_or(0, |&m| m + 1);
        let ds = Self {
            num_nodes: features.rows(),
            edges,
            features,
            labels,
            num_classes,
            splits,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    /// Distinct undirected edges, ignoring self loops.
    pub fn unique_edges(&self) -> BTreeSet<(usize, usize)> {
        self.edges
            .iter()
            .filter(|(u, v)| u != v)
            .map(|&(u, v)| (u.min(v), u.max(v)))
            .collect()
    }

    /// Labels of the given nodes; errors when one is unlabeled.
    pub fn labels_of(&self, idx: &[usize]) -> Result<Vec<usize>> {
        idx.iter()
            .map(|&i| {
                self.labels
                    .get(i)
                    .copied()
                    .flatten()
                    .ok_or_else(|| Error::Input(format!("node {i} has no label")))
            })
            .collect()
    }

    /// Checks every structural invariant of the dataset.
    pub fn validate(&self) -> Result<()> {
        let n = self.num_nodes;
        if self.features.rows() != n {
            return Err(Error::Validation(format!(
                "{} feature rows for {n} nodes",
                self.features.rows()
            )));
        }
        if self.labels.len() != n {
            return Err(Error::Validation(format!("{} labels for {n} nodes", self.labels.len())));
        }
        if !self.features.is_finite() {
            return Err(Error::Validation("features contain NaN or Inf".into()));
        }
        if let Some((u, v)) = self.edges.iter().find(|(u, v)| *u >= n || *v >= n) {
            return Err(Error::Validation(format!("edge ({u}, {v}) references a node >= {n}")));
        }
        if let Some(bad) = self.labels.iter().flatten().find(|&&y| y >= self.num_classes) {
            return Err(Error::Validation(format!(
                "label {bad} outside [0, {})",
                self.num_classes
            )));
        }
        let mut seen = vec![None::<&str>; n];
        for (name, idx) in [
            ("train", &self.splits.train),
            ("val", &self.splits.val),
            ("test", &self.splits.test),
        ] {
            for &i in idx {
                if i >= n {
                    return Err(Error::Validation(format!("{name} index {i} >= {n}")));
                }
                if let Some(other) = seen[i] {
                    return Err(Error::Validation(format!(
                        "node {i} appears in both {other} and {name} splits"
                    )));
                }
                seen[i] = Some(name);
                if self.labels[i].is_none() {
                    return Err(Error::Validation(format!("{name} node {i} is unlabeled")));
                }
            }
        }
        Ok(())
    }

    /// Writes the dataset in the directory format.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

        let mut edges = String::new();
        for (u, v) in &self.edges {
            edges.push_str(&format!("{u}\t{v}\n"));
        }
        write(&dir.join(EDGES_FILE), &edges)?;

        let mut features = String::new();
        for r in 0..self.features.rows() {
            let row: Vec<String> = self.features.row(r).iter().map(|v| v.to_string()).collect();
            features.push_str(&row.join(","));
            features.push('\n');
        }
        write(&dir.join(FEATURES_FILE), &features)?;

        let mut labels = String::new();
        for y in &self.labels {
            match y {
                Some(y) => labels.push_str(&format!("{y}\n")),
                None => labels.push_str("-1\n"),
            }
        }
        write(&dir.join(LABELS_FILE), &labels)?;

        write(&dir.join(SPLITS_FILE), &serde_json::to_string(&self.splits)?)
    }
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: PathBuf::from(path),
        line,
        msg: msg.into(),
    }
}

/// Loads and validates a dataset.
pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<RawDataset> {
    match format {
        DatasetFormat::Directory => load_directory(path),
    }
}

fn load_directory(dir: &Path) -> Result<RawDataset> {
    if !dir.is_dir() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
        ));
    }

    let features = parse_features(&dir.join(FEATURES_FILE))?;
    let edges = parse_edges(&dir.join(EDGES_FILE))?;
    let labels = parse_labels(&dir.join(LABELS_FILE))?;

    let splits_path = dir.join(SPLITS_FILE);
    let splits: Splits =
        serde_json::from_str(&read(&splits_path)?).map_err(|e| parse_err(&splits_path, e.line(), e.to_string()))?;

    RawDataset::new(edges, features, labels, splits)
}

fn parse_edges(path: &Path) -> Result<Vec<(usize, usize)>> {
    let text = read(path)?;
    let mut edges = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let (Some(a), Some(b), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(parse_err(path, i + 1, "expected two tab-separated node ids"));
        };
        let parse = |s: &str| {
            s.trim()
                .parse::<usize>()
                .map_err(|e| parse_err(path, i + 1, format!("bad node id '{s}': {e}")))
        };
        edges.push((parse(a)?, parse(b)?));
    }
    Ok(edges)
}

fn parse_features(path: &Path) -> Result<DenseMatrix> {
    let text = read(path)?;
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let before = data.len();
        for field in line.split(',') {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|e| parse_err(path, i + 1, format!("bad value '{field}': {e}")))?;
            data.push(v);
        }
        let width = data.len() - before;
        match cols {
            None => cols = Some(width),
            Some(c) if c != width => {
                return Err(parse_err(path, i + 1, format!("{width} columns, expected {c}")));
            }
            _ => {}
        }
        rows += 1;
    }
    DenseMatrix::new(rows, cols.unwrap_or(0), data)
}

fn parse_labels(path: &Path) -> Result<Vec<Option<usize>>> {
    let text = read(path)?;
    let mut labels = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let s = line.trim();
        if s.is_empty() {
            continue;
        }
        let y: i64 = s
            .parse()
            .map_err(|e| parse_err(path, i + 1, format!("bad label '{s}': {e}")))?;
        labels.push(match y {
            -1 => None,
            y if y >= 0 => Some(y as usize),
            y => return Err(parse_err(path, i + 1, format!("negative label {y}"))),
        });
    }
    Ok(labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> RawDataset {
        RawDataset::new(
            vec![(0, 1), (1, 2)],
            DenseMatrix::from_rows(&[[1.0, 0.0], [0.5, 0.25], [0.0, 1.0]]).unwrap(),
            vec![Some(0), Some(1), None],
            Splits {
                train: vec![0],
                val: vec![1],
                test: vec![],
            },
        )
        .unwrap()
    }

    #[test]
    fn three_node_toy_loads() {
        let dir = tempfile::tempdir().unwrap();
        toy().save(dir.path()).unwrap();
        let ds = load_dataset(dir.path(), DatasetFormat::Directory).unwrap();
        assert_eq!(ds.num_nodes, 3);
        assert_eq!(ds.unique_edges().len(), 2);
        assert_eq!(ds.num_classes, 2);
        assert_eq!(ds, toy());
    }

    #[test]
    fn malformed_edge_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        toy().save(dir.path()).unwrap();
        fs::write(dir.path().join(EDGES_FILE), "0\t1\n1 2\n").unwrap();
        match load_dataset(dir.path(), DatasetFormat::Directory) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn ragged_features_rejected() {
        let dir = tempfile::tempdir().unwrap();
        toy().save(dir.path()).unwrap();
        fs::write(dir.path().join(FEATURES_FILE), "1,0\n0\n1,1\n").unwrap();
        assert!(matches!(
            load_dataset(dir.path(), DatasetFormat::Directory),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn inconsistent_counts_are_validation_errors() {
        let dir = tempfile::tempdir().unwrap();
        toy().save(dir.path()).unwrap();
        fs::write(dir.path().join(LABELS_FILE), "0\n1\n").unwrap();
        assert!(matches!(
            load_dataset(dir.path(), DatasetFormat::Directory),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn overlapping_splits_rejected() {
        let mut ds = toy();
        ds.splits.test = vec![0];
        assert!(matches!(ds.validate(), Err(Error::Validation(_))));
    }

    #[test]
    fn edge_out_of_range_rejected() {
        let mut ds = toy();
        ds.edges.push((0, 3));
        assert!(ds.validate().is_err());
    }

    #[test]
    fn missing_directory_is_io_error() {
        let err = load_dataset(Path::new("/nonexistent/dataset"), DatasetFormat::Directory).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }
}
