//! Fake-quantized forward pass with an activation tape.

use ndarray::{Array1, Array2, Axis};

use super::linalg::matmul;
use super::{Layer, ModelParams, QuantTable, SiteParams, SiteSlot, BN_EPS};
use crate::error::{Error, Result};
use crate::graph::{norm_coeffs, CsrGraph, DatasetSplit, NodeFeatures};
use crate::nns::Assignment;
use crate::quant::{quantize_scalar, sign_f, QuantParam, Signedness};
use crate::util::argmax;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QAxis {
    /// One parameter per row (node).
    Row,
    /// One parameter per column (channel).
    Col,
}

/// Everything one fake-quantizer saw and produced.
#[derive(Debug, Clone, PartialEq)]
pub struct QRecord {
    pub x: Array2<f64>,
    pub xq: Array2<f64>,
    pub codes: Array2<i64>,
    pub sat: Array2<bool>,
    pub params: Vec<QuantParam>,
    pub axis: QAxis,
}

impl QRecord {
    pub fn param(&self, i: usize, j: usize) -> &QuantParam {
        match self.axis {
            QAxis::Row => &self.params[i],
            QAxis::Col => &self.params[j],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnTape {
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
    pub inv_std: Array1<f64>,
    pub xhat: Array2<f64>,
    pub batch: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerTape {
    Gcn {
        w: Option<QRecord>,
        /// `c ⊙ (X W)` before the column site.
        p_scaled: Array2<f64>,
        agg: Option<QRecord>,
        /// Pre-activation output.
        pre: Array2<f64>,
        out: Array2<f64>,
    },
    Gin {
        col: Option<QRecord>,
        /// Aggregated features before the first node site.
        h: Array2<f64>,
        w1: Option<QRecord>,
        z1: Array2<f64>,
        bn: Option<BnTape>,
        /// BN output (or `z1`) before the ReLU.
        y: Array2<f64>,
        u: Array2<f64>,
        w2: Option<QRecord>,
        pre: Array2<f64>,
        out: Array2<f64>,
    },
}

impl LayerTape {
    pub fn out(&self) -> &Array2<f64> {
        match self {
            LayerTape::Gcn { out, .. } | LayerTape::Gin { out, .. } => out,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tape {
    pub layers: Vec<LayerTape>,
    /// Node-site records, aligned with `QuantTable::sites`.
    pub sites: Vec<QRecord>,
    /// Per-site group selections in bank mode.
    pub assignments: Vec<Option<Assignment>>,
    pub logits: Array2<f64>,
    pub train_mode: bool,
}

/// Freezes every quantization decision of a base tape. Quantized values are
/// then smooth in the inputs and parameters with exactly the
/// straight-through derivatives, which makes finite differences meaningful:
///
/// * in range: `x_q = x + s·(code - x₀/s₀)`
/// * saturated: `x_q = sign(x₀)·s·M(b)` with `M` the smooth level count
pub type FrozenQuant<'a> = &'a Tape;

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOpts<'a> {
    /// Batch statistics for BN; otherwise running statistics.
    pub train: bool,
    pub frozen: Option<FrozenQuant<'a>>,
}

fn fake_quant(x: Array2<f64>, params: Vec<QuantParam>, axis: QAxis, frozen: Option<&QRecord>) -> Result<QRecord> {
    let (n, f) = x.dim();
    let expect = if axis == QAxis::Row { n } else { f };
    if params.len() != expect {
        return Err(Error::Shape(format!("{} quantizers for {expect} lines", params.len())));
    }
    let mut xq = Array2::zeros((n, f));
    let mut codes = Array2::zeros((n, f));
    let mut sat = Array2::from_elem((n, f), false);
    match frozen {
        None => {
            for ((i, j), &v) in x.indexed_iter() {
                let p = if axis == QAxis::Row { &params[i] } else { &params[j] };
                if p.signedness == Signedness::Unsigned && v < 0.0 {
                    return Err(Error::NegativeUnsigned(v));
                }
                let (c, s) = quantize_scalar(v, p);
                codes[[i, j]] = c;
                sat[[i, j]] = s;
                xq[[i, j]] = p.step * c as f64;
            }
        }
        Some(base) => {
            if base.x.dim() != (n, f) || base.axis != axis {
                return Err(Error::Shape("frozen record does not match".into()));
            }
            for ((i, j), &v) in x.indexed_iter() {
                let p = if axis == QAxis::Row { &params[i] } else { &params[j] };
                let p0 = base.param(i, j);
                let x0 = base.x[[i, j]];
                let c = base.codes[[i, j]];
                xq[[i, j]] = if base.sat[[i, j]] {
                    sign_f(x0) * p.step * p0.smooth_max_code(p.bits)
                } else {
                    v + p.step * (c as f64 - x0 / p0.step)
                };
            }
            codes.assign(&base.codes);
            sat.assign(&base.sat);
        }
    }
    Ok(QRecord {
        x,
        xq,
        codes,
        sat,
        params,
        axis,
    })
}

fn max_abs_rows(x: &Array2<f64>) -> Vec<f64> {
    x.rows()
        .into_iter()
        .map(|r| r.iter().fold(0.0f64, |m, v| m.max(v.abs())))
        .collect()
}

/// Per-row parameters of a node site, selecting bank groups if needed.
fn site_params(
    site: &SiteParams,
    x: &Array2<f64>,
    frozen: Option<&Assignment>,
) -> Result<(Vec<QuantParam>, Option<Assignment>)> {
    let n = x.nrows();
    Ok(match site {
        SiteParams::PerNode(v) => {
            if v.len() != n {
                return Err(Error::Shape(format!("per-node table of {} for {n} nodes", v.len())));
            }
            (v.clone(), None)
        }
        SiteParams::Shared(p) => (vec![*p; n], None),
        SiteParams::Bank(bank) => {
            let a = match frozen {
                Some(a) => a.clone(),
                None => Assignment(max_abs_rows(x).into_iter().map(|f| bank.select_one(f)).collect()),
            };
            (a.0.iter().map(|&k| bank.groups[k]).collect(), Some(a))
        }
    })
}

struct SiteRunner<'a> {
    qt: Option<&'a QuantTable>,
    frozen: Option<&'a Tape>,
    sites: Vec<Option<QRecord>>,
    assignments: Vec<Option<Assignment>>,
}

impl SiteRunner<'_> {
    /// Applies the node site at `(layer, slot)` if the table has one.
    fn apply(&mut self, layer: usize, slot: SiteSlot, x: Array2<f64>) -> Result<(Array2<f64>, bool)> {
        let Some(qt) = self.qt else { return Ok((x, false)) };
        let Some(idx) = qt.site_index(layer, slot) else { return Ok((x, false)) };
        let site = &qt.sites[idx];
        if x.ncols() != site.spec.dim {
            return Err(Error::Shape(format!("site expects width {}, got {}", site.spec.dim, x.ncols())));
        }
        let frozen_assign = self.frozen.and_then(|t| t.assignments[idx].as_ref());
        let (params, assign) = site_params(&site.params, &x, frozen_assign)?;
        let rec = fake_quant(x, params, QAxis::Row, self.frozen.map(|t| &t.sites[idx]))?;
        let xq = rec.xq.clone();
        self.sites[idx] = Some(rec);
        self.assignments[idx] = assign;
        Ok((xq, true))
    }
}

fn relu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

fn add_bias(x: &mut Array2<f64>, b: &Array1<f64>) {
    for mut row in x.rows_mut() {
        row += b;
    }
}

/// Runs the network. With `qt = None` nothing is quantized.
pub fn forward(
    model: &ModelParams,
    qt: Option<&QuantTable>,
    g: &CsrGraph,
    x0: &NodeFeatures,
    opts: ForwardOpts<'_>,
) -> Result<Tape> {
    let n = g.num_nodes();
    if x0.num_nodes() != n {
        return Err(Error::Shape(format!("{} feature rows for {n} nodes", x0.num_nodes())));
    }
    if x0.dim() != model.config.in_dim {
        return Err(Error::Shape(format!("input width {} != model {}", x0.dim(), model.config.in_dim)));
    }
    if let Some(qt) = qt {
        qt.check(model, n)?;
    }
    let frozen = opts.frozen;
    if let Some(t) = frozen {
        if qt.is_none() || t.layers.len() != model.layers.len() {
            return Err(Error::Shape("frozen tape does not match this forward".into()));
        }
    }
    let nsites = qt.map_or(0, |q| q.sites.len());
    let mut runner = SiteRunner {
        qt,
        frozen,
        sites: vec![None; nsites],
        assignments: vec![None; nsites],
    };
    let quant = qt.is_some();
    let nl = model.layers.len();
    let mut layers: Vec<LayerTape> = Vec::with_capacity(nl);
    let norm = match model.config.arch {
        super::Arch::Gcn => Some(norm_coeffs(g)?),
        super::Arch::Gin => None,
    };

    for (l, layer) in model.layers.iter().enumerate() {
        let last = l + 1 == nl;
        let input: &Array2<f64> = if l == 0 { x0.data() } else { layers[l - 1].out() };
        let base = frozen.map(|t| &t.layers[l]);
        let tape = match layer {
            Layer::Gcn(gl) => {
                let c = &norm.as_ref().expect("gcn norm").inv_sqrt_deg;
                let (xin, _) = runner.apply(l, SiteSlot::GcnInput, input.clone())?;
                let (wq, w_rec) = if quant {
                    let fb = match base {
                        Some(LayerTape::Gcn { w, .. }) => w.as_ref(),
                        _ => None,
                    };
                    let r = fake_quant(gl.lin.w.clone(), gl.lin.w_quant.clone(), QAxis::Col, fb)?;
                    (r.xq.clone(), Some(r))
                } else {
                    (gl.lin.w.clone(), None)
                };
                let mut p = matmul(&xin, &wq);
                for (i, mut row) in p.rows_mut().into_iter().enumerate() {
                    row *= c[i];
                }
                let (bq, agg_rec) = if quant {
                    let fb = match base {
                        Some(LayerTape::Gcn { agg, .. }) => agg.as_ref(),
                        _ => None,
                    };
                    let r = fake_quant(p.clone(), gl.agg_quant.clone(), QAxis::Col, fb)?;
                    (r.xq.clone(), Some(r))
                } else {
                    (p.clone(), None)
                };
                let mut pre = Array2::zeros(bq.dim());
                for i in 0..n {
                    let mut row = pre.row_mut(i);
                    for &j in g.neighbors(i) {
                        row += &bq.row(j);
                    }
                    row *= c[i];
                }
                add_bias(&mut pre, &gl.lin.b);
                let out = if last { pre.clone() } else { relu(&pre) };
                LayerTape::Gcn {
                    w: w_rec,
                    p_scaled: p,
                    agg: agg_rec,
                    pre,
                    out,
                }
            }
            Layer::Gin(gl) => {
                let (xc, col_rec) = match (&gl.in_quant, quant) {
                    (Some(qs), true) => {
                        let fb = match base {
                            Some(LayerTape::Gin { col, .. }) => col.as_ref(),
                            _ => None,
                        };
                        let r = fake_quant(input.clone(), qs.clone(), QAxis::Col, fb)?;
                        (r.xq.clone(), Some(r))
                    }
                    _ => (input.clone(), None),
                };
                let mut h = xc.mapv(|v| v * (1.0 + gl.eps));
                for i in 0..n {
                    let mut row = h.row_mut(i);
                    for &j in g.neighbors(i) {
                        if j != i {
                            row += &xc.row(j);
                        }
                    }
                }
                let (hq, _) = runner.apply(l, SiteSlot::GinPreMlp, h.clone())?;
                let (w1q, w1_rec) = quant_weights(&gl.lin1, quant, base.and_then(|b| match b {
                    LayerTape::Gin { w1, .. } => w1.as_ref(),
                    _ => None,
                }))?;
                let mut z1 = matmul(&hq, &w1q);
                add_bias(&mut z1, &gl.lin1.b);
                let (y, bn_tape) = match &gl.bn {
                    None => (z1.clone(), None),
                    Some(bn) => {
                        let (mean, var) = if opts.train {
                            let mean = z1.mean_axis(Axis(0)).expect("non-empty batch");
                            let var = z1
                                .axis_iter(Axis(1))
                                .zip(&mean)
                                .map(|(col, m)| col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64)
                                .collect::<Array1<f64>>();
                            (mean, var)
                        } else {
                            (bn.running_mean.clone(), bn.running_var.clone())
                        };
                        let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
                        let mut xhat = z1.clone();
                        for mut row in xhat.rows_mut() {
                            row -= &mean;
                            row *= &inv_std;
                        }
                        let mut y = xhat.clone();
                        for mut row in y.rows_mut() {
                            row *= &bn.gamma;
                            row += &bn.beta;
                        }
                        (
                            y,
                            Some(BnTape {
                                mean,
                                var,
                                inv_std,
                                xhat,
                                batch: opts.train,
                            }),
                        )
                    }
                };
                let u = relu(&y);
                let (uq, _) = runner.apply(l, SiteSlot::GinMid, u.clone())?;
                let (w2q, w2_rec) = quant_weights(&gl.lin2, quant, base.and_then(|b| match b {
                    LayerTape::Gin { w2, .. } => w2.as_ref(),
                    _ => None,
                }))?;
                let mut pre = matmul(&uq, &w2q);
                add_bias(&mut pre, &gl.lin2.b);
                let out = if last { pre.clone() } else { relu(&pre) };
                LayerTape::Gin {
                    col: col_rec,
                    h,
                    w1: w1_rec,
                    z1,
                    bn: bn_tape,
                    y,
                    u,
                    w2: w2_rec,
                    pre,
                    out,
                }
            }
        };
        layers.push(tape);
    }
    let logits = layers.last().expect("two layers").out().clone();
    let sites = runner
        .sites
        .into_iter()
        .map(|s| s.ok_or_else(|| Error::Shape("node site was never reached".into())))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tape {
        layers,
        sites,
        assignments: runner.assignments,
        logits,
        train_mode: opts.train,
    })
}

fn quant_weights(lin: &super::Linear, quant: bool, frozen: Option<&QRecord>) -> Result<(Array2<f64>, Option<QRecord>)> {
    if !quant {
        return Ok((lin.w.clone(), None));
    }
    let r = fake_quant(lin.w.clone(), lin.w_quant.clone(), QAxis::Col, frozen)?;
    Ok((r.xq.clone(), Some(r)))
}

/// Fraction of `nodes` whose logits argmax equals the label.
pub fn accuracy(logits: &Array2<f64>, split: &DatasetSplit, nodes: &[usize]) -> f64 {
    if nodes.is_empty() {
        return f64::NAN;
    }
    let hits = nodes
        .iter()
        .filter(|&&i| split.labels[i] == Some(argmax(logits.row(i).as_slice().expect("row-major"))))
        .count();
    hits as f64 / nodes.len() as f64
}
