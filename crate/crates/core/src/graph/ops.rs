use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::CsrGraph;
use crate::error::{Error, Result};

/// Per-node d̃^(-1/2).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormCoeffs {
    pub inv_sqrt_deg: Vec<f64>,
}

impl NormCoeffs {
    pub fn len(&self) -> usize {
        self.inv_sqrt_deg.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inv_sqrt_deg.is_empty()
    }
}

/// Symmetric normalization coefficients. Requires self-loops so every
/// row has degree at least one.
pub fn norm_coeffs(g: &CsrGraph) -> Result<NormCoeffs> {
    if !g.has_self_loops() {
        return Err(Error::InvalidParam(
            "normalization requires a graph with self-loops".into(),
        ));
    }
    Ok(NormCoeffs {
        inv_sqrt_deg: g.degrees().iter().map(|&d| 1.0 / (d as f64).sqrt()).collect(),
    })
}

#[derive(Debug, Clone, Copy)]
pub enum AggregateMode<'a> {
    /// h_i = Σ_{j ∈ N(i) ∪ {i}} c_i c_j x_j
    GcnNorm(&'a NormCoeffs),
    /// h_i = (1 + ε) x_i + Σ_{j ∈ N(i)} x_j, self-loop excluded
    GinSum { eps: f64 },
}

pub fn aggregate(g: &CsrGraph, x: ArrayView2<f64>, mode: AggregateMode<'_>) -> Result<Array2<f64>> {
    let n = g.num_nodes();
    if x.nrows() != n {
        return Err(Error::Shape(format!(
            "feature rows {} != graph nodes {n}",
            x.nrows()
        )));
    }
    let f = x.ncols();
    let mut out = Array2::<f64>::zeros((n, f));
    match mode {
        AggregateMode::GcnNorm(c) => {
            if c.len() != n {
                return Err(Error::Shape(format!("{} coefficients for {n} nodes", c.len())));
            }
            if !g.has_self_loops() {
                return Err(Error::InvalidParam("gcn aggregation requires self-loops".into()));
            }
            let c = &c.inv_sqrt_deg;
            for i in 0..n {
                let mut row = out.row_mut(i);
                for &j in g.neighbors(i) {
                    let w = c[i] * c[j];
                    row.scaled_add(w, &x.row(j));
                }
            }
        }
        AggregateMode::GinSum { eps } => {
            for i in 0..n {
                let mut row = out.row_mut(i);
                row.scaled_add(1.0 + eps, &x.row(i));
                for &j in g.neighbors(i) {
                    if j != i {
                        row += &x.row(j);
                    }
                }
            }
        }
    }
    Ok(out)
}
