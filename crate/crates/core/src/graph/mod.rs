//! Graph storage and the sparse kernels that act on it.
//!
//! Adjacency is kept in canonical CSR form: rows sorted, no duplicate
//! entries, undirected (every edge stored in both rows). Self-loops are a
//! property of the graph value, not of the input file.

mod io;
mod ops;
mod synth;

pub use io::{load_graph, write_edge_file, write_feature_file, write_labels_file, write_split_file, DatasetFiles};
pub use ops::{aggregate, norm_coeffs, AggregateMode, NormCoeffs};
pub use synth::{
    planted_communities, synth_citation, synth_powerlaw, CitationSpec, PowerLawSpec, SynthDataset,
};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Immutable undirected adjacency in compressed sparse row layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsrGraph {
    num_nodes: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    has_self_loops: bool,
}

impl CsrGraph {
    /// Builds a canonical graph from an undirected edge list.
    ///
    /// Each pair is inserted in both directions. A pair repeated verbatim is
    /// rejected; a pair and its reverse describe the same edge and are merged.
    /// Self-loop pairs are rejected since loops are controlled by `self_loops`.
    pub fn from_edges(num_nodes: usize, edges: &[(usize, usize)], self_loops: bool) -> Result<Self> {
        let mut directed = Vec::with_capacity(edges.len());
        for &(src, dst) in edges {
            for idx in [src, dst] {
                if idx >= num_nodes {
                    return Err(Error::NodeOutOfRange {
                        index: idx,
                        num_nodes,
                    });
                }
            }
            if src == dst {
                return Err(Error::InvalidParam(format!(
                    "self-loop {src} -> {dst} in edge list"
                )));
            }
            directed.push((src, dst));
        }
        directed.sort_unstable();
        if let Some(w) = directed.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::DuplicateEdge {
                src: w[0].0,
                dst: w[0].1,
            });
        }

        let mut pairs: Vec<(usize, usize)> = Vec::with_capacity(2 * directed.len() + num_nodes);
        for &(s, d) in &directed {
            pairs.push((s, d));
            pairs.push((d, s));
        }
        if self_loops {
            pairs.extend((0..num_nodes).map(|i| (i, i)));
        }
        Ok(Self::from_sorted_pairs(num_nodes, pairs, self_loops))
    }

    fn from_sorted_pairs(num_nodes: usize, mut pairs: Vec<(usize, usize)>, has_self_loops: bool) -> Self {
        pairs.sort_unstable();
        pairs.dedup();
        let mut row_ptr = vec![0usize; num_nodes + 1];
        for &(s, _) in &pairs {
            row_ptr[s + 1] += 1;
        }
        for i in 0..num_nodes {
            row_ptr[i + 1] += row_ptr[i];
        }
        let col_idx = pairs.into_iter().map(|(_, d)| d).collect();
        CsrGraph {
            num_nodes,
            row_ptr,
            col_idx,
            has_self_loops,
        }
    }

    /// Validates raw CSR arrays against the canonical-form invariants.
    pub fn from_csr(
        num_nodes: usize,
        row_ptr: Vec<usize>,
        col_idx: Vec<usize>,
        has_self_loops: bool,
    ) -> Result<Self> {
        if row_ptr.len() != num_nodes + 1 || row_ptr[0] != 0 {
            return Err(Error::Shape("row_ptr must have num_nodes + 1 entries starting at 0".into()));
        }
        if row_ptr.windows(2).any(|w| w[0] > w[1]) || row_ptr[num_nodes] != col_idx.len() {
            return Err(Error::Shape("row_ptr must be non-decreasing and end at nnz".into()));
        }
        for i in 0..num_nodes {
            let row = &col_idx[row_ptr[i]..row_ptr[i + 1]];
            if let Some(&bad) = row.iter().find(|&&j| j >= num_nodes) {
                return Err(Error::NodeOutOfRange {
                    index: bad,
                    num_nodes,
                });
            }
            if row.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Shape(format!("row {i} is not strictly increasing")));
            }
            if has_self_loops && row.binary_search(&i).is_err() {
                return Err(Error::Shape(format!("row {i} is missing its self-loop")));
            }
        }
        Ok(CsrGraph {
            num_nodes,
            row_ptr,
            col_idx,
            has_self_loops,
        })
    }

    /// Rebuilds the arrays from the stored entries.
    pub fn canonicalize(&self) -> Self {
        let pairs = (0..self.num_nodes)
            .flat_map(|i| self.neighbors(i).iter().map(move |&j| (i, j)))
            .collect();
        Self::from_sorted_pairs(self.num_nodes, pairs, self.has_self_loops)
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn col_idx(&self) -> &[usize] {
        &self.col_idx
    }

    pub fn has_self_loops(&self) -> bool {
        self.has_self_loops
    }

    /// Columns of row `i`, self-loop included when present.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.col_idx[self.row_ptr[i]..self.row_ptr[i + 1]]
    }

    /// Row length, i.e. d̃ when the graph carries self-loops.
    pub fn degree(&self, i: usize) -> usize {
        self.row_ptr[i + 1] - self.row_ptr[i]
    }

    pub fn degrees(&self) -> Vec<usize> {
        (0..self.num_nodes).map(|i| self.degree(i)).collect()
    }

    /// Degree not counting the self-loop.
    pub fn in_degree(&self, i: usize) -> usize {
        self.degree(i) - usize::from(self.has_self_loops)
    }

    /// Undirected edges `(i, j)` with `i < j`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        (0..self.num_nodes)
            .flat_map(|i| {
                self.neighbors(i)
                    .iter()
                    .filter(move |&&j| j > i)
                    .map(move |&j| (i, j))
            })
            .collect()
    }

    pub fn with_self_loops(&self) -> Self {
        if self.has_self_loops {
            return self.clone();
        }
        let mut pairs: Vec<(usize, usize)> = (0..self.num_nodes)
            .flat_map(|i| self.neighbors(i).iter().map(move |&j| (i, j)))
            .collect();
        pairs.extend((0..self.num_nodes).map(|i| (i, i)));
        Self::from_sorted_pairs(self.num_nodes, pairs, true)
    }

    /// Subgraph induced by `keep` (sorted, unique), renumbered in that order.
    pub fn induced_subgraph(&self, keep: &[usize]) -> Result<Self> {
        let mut map = vec![usize::MAX; self.num_nodes];
        for (new, &old) in keep.iter().enumerate() {
            if old >= self.num_nodes {
                return Err(Error::NodeOutOfRange {
                    index: old,
                    num_nodes: self.num_nodes,
                });
            }
            map[old] = new;
        }
        let mut pairs = Vec::new();
        for (new, &old) in keep.iter().enumerate() {
            for &j in self.neighbors(old) {
                if map[j] != usize::MAX {
                    pairs.push((new, map[j]));
                }
            }
        }
        Ok(Self::from_sorted_pairs(keep.len(), pairs, self.has_self_loops))
    }
}

/// Dense row-major node feature matrix, one row per node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeFeatures {
    data: Array2<f64>,
}

impl NodeFeatures {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidParam(format!("non-finite feature value {bad}")));
        }
        Ok(NodeFeatures { data })
    }

    pub fn num_nodes(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.data
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        NodeFeatures {
            data: self.data.select(ndarray::Axis(0), rows),
        }
    }
}

/// Labels plus disjoint train/val/test masks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub labels: Vec<Option<usize>>,
    pub train_mask: Vec<bool>,
    pub val_mask: Vec<bool>,
    pub test_mask: Vec<bool>,
}

impl DatasetSplit {
    pub fn new(
        labels: Vec<Option<usize>>,
        train: &[usize],
        val: &[usize],
        test: &[usize],
    ) -> Result<Self> {
        let n = labels.len();
        let mut masks = [vec![false; n], vec![false; n], vec![false; n]];
        for (mask, idx) in masks.iter_mut().zip([train, val, test]) {
            for &i in idx {
                if i >= n {
                    return Err(Error::NodeOutOfRange {
                        index: i,
                        num_nodes: n,
                    });
                }
                mask[i] = true;
            }
        }
        let [train_mask, val_mask, test_mask] = masks;
        let split = DatasetSplit {
            labels,
            train_mask,
            val_mask,
            test_mask,
        };
        split.validate()?;
        Ok(split)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.labels.len();
        if self.train_mask.len() != n || self.val_mask.len() != n || self.test_mask.len() != n {
            return Err(Error::Shape("mask length differs from label count".into()));
        }
        for i in 0..n {
            let hits = [self.train_mask[i], self.val_mask[i], self.test_mask[i]]
                .iter()
                .filter(|&&b| b)
                .count();
            if hits > 1 {
                return Err(Error::InvalidParam(format!("node {i} appears in more than one split")));
            }
            if self.train_mask[i] && self.labels[i].is_none() {
                return Err(Error::InvalidParam(format!("train node {i} has no label")));
            }
        }
        Ok(())
    }

    pub fn num_nodes(&self) -> usize {
        self.labels.len()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().flatten().max().map_or(0, |&c| c + 1)
    }

    pub fn train_nodes(&self) -> Vec<usize> {
        mask_indices(&self.train_mask)
    }

    pub fn val_nodes(&self) -> Vec<usize> {
        mask_indices(&self.val_mask)
    }

    pub fn test_nodes(&self) -> Vec<usize> {
        mask_indices(&self.test_mask)
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        DatasetSplit {
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
            train_mask: rows.iter().map(|&i| self.train_mask[i]).collect(),
            val_mask: rows.iter().map(|&i| self.val_mask[i]).collect(),
            test_mask: rows.iter().map(|&i| self.test_mask[i]).collect(),
        }
    }
}

pub(crate) fn mask_indices(mask: &[bool]) -> Vec<usize> {
    mask.iter()
        .enumerate()
        .filter_map(|(i, &m)| m.then_some(i))
        .collect()
}
