//! Dataset file formats.
//!
//! * edge file: UTF-8, one `src dst` pair per line, `#` comments
//! * feature file: `A2QF`, u32 N, u32 F (little-endian), then N*F f32 row-major
//! * split file: `train:`, `val:`, `test:` lines with node indices
//! * labels file: one integer per line, `-1` for unlabeled

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use super::{CsrGraph, DatasetSplit, NodeFeatures};
use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"A2QF";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetFiles {
    pub edges: PathBuf,
    pub features: PathBuf,
    pub split: PathBuf,
    pub labels: PathBuf,
}

/// Loads a dataset and returns the graph with self-loops added once.
pub fn load_graph(files: &DatasetFiles) -> Result<(CsrGraph, NodeFeatures, DatasetSplit)> {
    let features = read_feature_file(&files.features)?;
    let n = features.num_nodes();
    let edges = read_edge_file(&files.edges, n)?;
    let graph = CsrGraph::from_edges(n, &edges, true)?;
    let labels = read_labels_file(&files.labels)?;
    if labels.len() != n {
        return Err(Error::Shape(format!(
            "labels file has {} rows, feature file has {n}",
            labels.len()
        )));
    }
    let split = read_split_file(&files.split, labels)?;
    Ok((graph, features, split))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_index(file: &str, line: usize, tok: &str) -> Result<usize> {
    tok.parse::<usize>()
        .map_err(|_| Error::parse(file, line, format!("bad node index {tok:?}")))
}

fn read_edge_file(path: &Path, num_nodes: usize) -> Result<Vec<(usize, usize)>> {
    let text = read_text(path)?;
    let name = path.display().to_string();
    let mut edges = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut toks = line.split_whitespace();
        let (Some(a), Some(b), None) = (toks.next(), toks.next(), toks.next()) else {
            return Err(Error::parse(&name, lineno + 1, "expected `src dst`"));
        };
        let src = parse_index(&name, lineno + 1, a)?;
        let dst = parse_index(&name, lineno + 1, b)?;
        for idx in [src, dst] {
            if idx >= num_nodes {
                return Err(Error::NodeOutOfRange {
                    index: idx,
                    num_nodes,
                });
            }
        }
        edges.push((src, dst));
    }
    Ok(edges)
}

fn read_feature_file(path: &Path) -> Result<NodeFeatures> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let name = path.display().to_string();
    if bytes.len() < 12 || &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::parse(&name, 0, "missing A2QF header"));
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let f = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[12..];
    if body.len() != n * f * 4 {
        return Err(Error::Shape(format!(
            "feature file declares {n}x{f} values but holds {} bytes",
            body.len()
        )));
    }
    let data: Vec<f64> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    NodeFeatures::new(Array2::from_shape_vec((n, f), data).expect("shape checked"))
}

fn read_labels_file(path: &Path) -> Result<Vec<Option<usize>>> {
    let text = read_text(path)?;
    let name = path.display().to_string();
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let v: i64 = l
                .trim()
                .parse()
                .map_err(|_| Error::parse(&name, i + 1, format!("bad label {l:?}")))?;
            match v {
                -1 => Ok(None),
                v if v >= 0 => Ok(Some(v as usize)),
                _ => Err(Error::parse(&name, i + 1, format!("label {v} below -1"))),
            }
        })
        .collect()
}

fn read_split_file(path: &Path, labels: Vec<Option<usize>>) -> Result<DatasetSplit> {
    let text = read_text(path)?;
    let name = path.display().to_string();
    let mut parts: [Option<Vec<usize>>; 3] = [None, None, None];
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, rest)) = line.split_once(':') else {
            return Err(Error::parse(&name, lineno + 1, "expected `train:`, `val:` or `test:`"));
        };
        let slot = match key.trim() {
            "train" => 0,
            "val" => 1,
            "test" => 2,
            other => return Err(Error::parse(&name, lineno + 1, format!("unknown split {other:?}"))),
        };
        if parts[slot].is_some() {
            return Err(Error::parse(&name, lineno + 1, format!("split {key:?} repeated")));
        }
        let idx = rest
            .split_whitespace()
            .map(|t| parse_index(&name, lineno + 1, t))
            .collect::<Result<Vec<_>>>()?;
        parts[slot] = Some(idx);
    }
    let [Some(train), Some(val), Some(test)] = parts else {
        return Err(Error::parse(&name, 0, "split file needs train, val and test lines"));
    };
    DatasetSplit::new(labels, &train, &val, &test)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub fn write_edge_file(path: &Path, g: &CsrGraph) -> Result<()> {
    let mut out = String::from("# undirected edge list\n");
    for (s, d) in g.edges() {
        out.push_str(&format!("{s} {d}\n"));
    }
    write_file(path, out.as_bytes())
}

/// Writes features as f32; values are rounded to single precision.
pub fn write_feature_file(path: &Path, x: &NodeFeatures) -> Result<()> {
    let n = u32::try_from(x.num_nodes()).map_err(|_| Error::Shape("too many nodes".into()))?;
    let f = u32::try_from(x.dim()).map_err(|_| Error::Shape("feature dim too large".into()))?;
    let mut bytes = Vec::with_capacity(12 + 4 * x.data().len());
    bytes.extend_from_slice(FEATURE_MAGIC);
    bytes.extend_from_slice(&n.to_le_bytes());
    bytes.extend_from_slice(&f.to_le_bytes());
    for &v in x.data().iter() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    write_file(path, &bytes)
}

pub fn write_labels_file(path: &Path, split: &DatasetSplit) -> Result<()> {
    let mut out = String::new();
    for l in &split.labels {
        match l {
            Some(c) => out.push_str(&format!("{c}\n")),
            None => out.push_str("-1\n"),
        }
    }
    write_file(path, out.as_bytes())
}

pub fn write_split_file(path: &Path, split: &DatasetSplit) -> Result<()> {
    let line = |name: &str, idx: Vec<usize>| {
        let body: Vec<String> = idx.iter().map(|i| i.to_string()).collect();
        format!("{name}: {}\n", body.join(" "))
    };
    let out = line("train", split.train_nodes())
        + &line("val", split.val_nodes())
        + &line("test", split.test_nodes());
    write_file(path, out.as_bytes())
}
