//! Manual reverse pass through a recorded [`Tape`].

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use super::forward::{forward, ForwardOpts, LayerTape, QAxis, QRecord, Tape};
use super::linalg::{matmul_nt, matmul_tn};
use super::{Layer, ModelParams, QuantMode, QuantTable, SiteParams, SiteSlot};
use crate::error::{Error, Result};
use crate::graph::{norm_coeffs, CsrGraph, DatasetSplit, NodeFeatures};
use crate::nns::accumulate_group_grads;
use crate::quant::{local_grad_term, memory_loss, quant_grad, QuantGrad};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GradMode {
    /// Node-site `(s, b)` follow the task gradient.
    Global,
    /// Node-site `(s, b)` follow their own quantization error.
    Local,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub grad_mode: GradMode,
    pub lambda: f64,
    /// Memory target in KB. `None` disables the penalty.
    pub m_target: Option<f64>,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            grad_mode: GradMode::Global,
            lambda: 0.0,
            m_target: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub task: f64,
    pub memory: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrad {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub w_step: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerGrad {
    Gcn {
        lin: LinearGrad,
        agg_step: Vec<f64>,
    },
    Gin {
        eps: f64,
        in_step: Option<Vec<f64>>,
        lin1: LinearGrad,
        bn: Option<(Array1<f64>, Array1<f64>)>,
        lin2: LinearGrad,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SiteGrad {
    /// One entry per learnable parameter of the site.
    pub d_step: Vec<f64>,
    pub d_bits: Vec<f64>,
    /// Rows whose task gradient at this site is exactly zero.
    pub zero_rows: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
    pub sites: Vec<SiteGrad>,
}

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Mean negative log-likelihood of the softmax over train nodes.
pub fn nll_loss(logits: &Array2<f64>, split: &DatasetSplit) -> Result<f64> {
    Ok(nll_with_grad(logits, split)?.0)
}

fn nll_with_grad(logits: &Array2<f64>, split: &DatasetSplit) -> Result<(f64, Array2<f64>)> {
    let train = split.train_nodes();
    if train.is_empty() {
        return Err(Error::Empty("train mask"));
    }
    if logits.nrows() != split.num_nodes() {
        return Err(Error::Shape("logits and split disagree on node count".into()));
    }
    let k = train.len() as f64;
    let mut loss = 0.0;
    let mut d = Array2::zeros(logits.dim());
    for &i in &train {
        let y = split.labels[i].expect("validated train label");
        if y >= logits.ncols() {
            return Err(Error::InvalidParam(format!("label {y} beyond {} classes", logits.ncols())));
        }
        let ls = log_softmax_row(logits.row(i).as_slice().expect("row-major"));
        loss -= ls[y];
        for (c, v) in ls.iter().enumerate() {
            d[[i, c]] = (v.exp() - if c == y { 1.0 } else { 0.0 }) / k;
        }
    }
    Ok((loss / k, d))
}

/// STE input gradient plus per-line `(s, b)` gradients of one record.
fn quant_backward(rec: &QRecord, g: &Array2<f64>) -> (Array2<f64>, Vec<QuantGrad>) {
    let mut dx = Array2::zeros(g.dim());
    let mut per = vec![QuantGrad::default(); rec.params.len()];
    for ((i, j), &gv) in g.indexed_iter() {
        let p = rec.param(i, j);
        let x = rec.x[[i, j]];
        if x.abs() <= p.threshold() {
            dx[[i, j]] = gv;
        }
        if gv != 0.0 {
            let line = if rec.axis == QAxis::Row { i } else { j };
            per[line] += quant_grad(x, p, rec.codes[[i, j]], rec.sat[[i, j]]).scaled(gv);
        }
    }
    (dx, per)
}

fn sum_rows(x: &Array2<f64>) -> Array1<f64> {
    x.sum_axis(Axis(0))
}

fn relu_mask(d: &Array2<f64>, pre: &Array2<f64>) -> Array2<f64> {
    let mut out = d.clone();
    out.zip_mut_with(pre, |g, &p| {
        if p <= 0.0 {
            *g = 0.0
        }
    });
    out
}

/// Per-node bits used at each learnable-bit site, for the memory penalty.
fn site_bits(qt: &QuantTable, tape: &Tape) -> Vec<Vec<f64>> {
    qt.sites
        .iter()
        .zip(&tape.assignments)
        .map(|(site, assign)| match (&site.params, assign) {
            (SiteParams::PerNode(v), _) => v.iter().map(|p| p.bits).collect(),
            (SiteParams::Bank(b), Some(a)) => a.0.iter().map(|&k| b.groups[k].bits).collect(),
            _ => Vec::new(),
        })
        .collect()
}

fn memory_term(qt: &QuantTable, tape: &Tape, cfg: &LossConfig) -> Result<(f64, Vec<Vec<f64>>)> {
    let Some(m_target) = cfg.m_target else {
        return Ok((0.0, vec![Vec::new(); qt.sites.len()]));
    };
    if !qt.mode.learns_bits() {
        return Ok((0.0, vec![Vec::new(); qt.sites.len()]));
    }
    let bits = site_bits(qt, tape);
    let dims: Vec<usize> = qt.sites.iter().map(|s| s.spec.dim).collect();
    memory_loss(&bits, &dims, m_target)
}

struct SiteCtx<'a> {
    qt: &'a QuantTable,
    tape: &'a Tape,
    cfg: &'a LossConfig,
    mem_grads: Vec<Vec<f64>>,
    out: Vec<Option<SiteGrad>>,
}

impl SiteCtx<'_> {
    /// Backward through node site `idx` given the upstream gradient.
    fn backward(&mut self, idx: usize, g: &Array2<f64>) -> Result<Array2<f64>> {
        let rec = &self.tape.sites[idx];
        let site = &self.qt.sites[idx];
        let (dx, global) = quant_backward(rec, g);
        let n = g.nrows();
        let zero_rows = g.rows().into_iter().map(|r| r.iter().all(|&v| v == 0.0)).collect();
        let mut per_row: Vec<QuantGrad> = match self.cfg.grad_mode {
            GradMode::Global => global,
            GradMode::Local => (0..n)
                .map(|i| {
                    let p = &rec.params[i];
                    let d = rec.x.ncols();
                    let mut acc = QuantGrad::default();
                    for &v in rec.x.row(i) {
                        acc += local_grad_term(v, p);
                    }
                    if d > 0 {
                        acc.scaled(1.0 / d as f64)
                    } else {
                        acc
                    }
                })
                .collect(),
        };
        if let Some(mg) = self.mem_grads.get(idx).filter(|v| !v.is_empty()) {
            for (pr, m) in per_row.iter_mut().zip(mg) {
                pr.d_bits += self.cfg.lambda * m;
            }
        }
        let learns_bits = self.qt.mode.learns_bits();
        let (d_step, d_bits) = match &site.params {
            SiteParams::PerNode(_) => per_row.iter().map(|q| (q.d_step, q.d_bits)).unzip(),
            SiteParams::Shared(_) => {
                let scale = match self.cfg.grad_mode {
                    GradMode::Global => 1.0,
                    GradMode::Local => 1.0 / n.max(1) as f64,
                };
                let s: f64 = per_row.iter().map(|q| q.d_step).sum::<f64>() * scale;
                (vec![s], vec![0.0])
            }
            SiteParams::Bank(bank) => {
                let a = self.tape.assignments[idx]
                    .as_ref()
                    .ok_or_else(|| Error::Shape("bank site without assignment".into()))?;
                let sums = accumulate_group_grads(a, &per_row, bank.len())?.to_grads();
                sums.iter().map(|q| (q.d_step, q.d_bits)).unzip()
            }
        };
        let d_bits = if learns_bits { d_bits } else { vec![0.0; d_step.len()] };
        self.out[idx] = Some(SiteGrad {
            d_step,
            d_bits,
            zero_rows,
        });
        Ok(dx)
    }
}

fn linear_grad(rec: Option<&QRecord>, dwq: Array2<f64>, db: Array1<f64>) -> LinearGrad {
    match rec {
        Some(r) => {
            let (dw, per) = quant_backward(r, &dwq);
            LinearGrad {
                w: dw,
                b: db,
                w_step: per.iter().map(|q| q.d_step).collect(),
            }
        }
        None => LinearGrad {
            w: dwq,
            w_step: Vec::new(),
            b: db,
        },
    }
}

/// Gradients of `L_task + λ L_memory` from a tape. Node-site `(s, b)`
/// follow `cfg.grad_mode`; everything else uses the task gradient.
#[allow(clippy::too_many_arguments)]
pub fn backward(
    model: &ModelParams,
    qt: Option<&QuantTable>,
    g: &CsrGraph,
    x0: &NodeFeatures,
    tape: &Tape,
    split: &DatasetSplit,
    cfg: &LossConfig,
) -> Result<(LossParts, Gradients)> {
    if tape.layers.len() != model.layers.len() || qt.map_or(0, |q| q.sites.len()) != tape.sites.len() {
        return Err(Error::Shape("tape does not match model".into()));
    }
    let (task, dlogits) = nll_with_grad(&tape.logits, split)?;
    let (memory, mem_grads) = match qt {
        Some(qt) => memory_term(qt, tape, cfg)?,
        None => (0.0, Vec::new()),
    };
    let parts = LossParts {
        task,
        memory,
        total: task + cfg.lambda * memory,
    };
    let mut sites = qt.map(|qt| SiteCtx {
        qt,
        tape,
        cfg,
        mem_grads,
        out: vec![None; qt.sites.len()],
    });
    let norm = match model.config.arch {
        super::Arch::Gcn => Some(norm_coeffs(g)?),
        super::Arch::Gin => None,
    };
    let nl = model.layers.len();
    let mut layer_grads: Vec<Option<LayerGrad>> = vec![None; nl];
    let mut d_out = dlogits;
    for l in (0..nl).rev() {
        let last = l + 1 == nl;
        let input: &Array2<f64> = if l == 0 { x0.data() } else { tape.layers[l - 1].out() };
        let site_of = |slot: SiteSlot| qt.and_then(|q| q.site_index(l, slot));
        match (&model.layers[l], &tape.layers[l]) {
            (Layer::Gcn(gl), LayerTape::Gcn { w, agg, pre, .. }) => {
                let c = &norm.as_ref().expect("gcn norm").inv_sqrt_deg;
                let dpre = if last { d_out.clone() } else { relu_mask(&d_out, pre) };
                let db = sum_rows(&dpre);
                let mut da = dpre;
                for (i, mut row) in da.rows_mut().into_iter().enumerate() {
                    row *= c[i];
                }
                let mut dbq = Array2::zeros(da.dim());
                for j in 0..g.num_nodes() {
                    let mut row = dbq.row_mut(j);
                    for &i in g.neighbors(j) {
                        row += &da.row(i);
                    }
                }
                let (mut dp, agg_step) = match agg {
                    Some(r) => {
                        let (dx, per) = quant_backward(r, &dbq);
                        (dx, per.iter().map(|q| q.d_step).collect())
                    }
                    None => (dbq, Vec::new()),
                };
                for (i, mut row) in dp.rows_mut().into_iter().enumerate() {
                    row *= c[i];
                }
                let site = site_of(SiteSlot::GcnInput);
                let xin = site.map_or(input, |s| &tape.sites[s].xq);
                let wq = w.as_ref().map_or(&gl.lin.w, |r| &r.xq);
                let dwq = matmul_tn(xin, &dp);
                layer_grads[l] = Some(LayerGrad::Gcn {
                    lin: linear_grad(w.as_ref(), dwq, db),
                    agg_step,
                });
                if l > 0 || site.is_some() {
                    let dxin = matmul_nt(&dp, wq);
                    d_out = match (site, sites.as_mut()) {
                        (Some(s), Some(ctx)) => ctx.backward(s, &dxin)?,
                        _ => dxin,
                    };
                }
            }
            (
                Layer::Gin(gl),
                LayerTape::Gin {
                    col,
                    h,
                    w1,
                    bn,
                    y,
                    u,
                    w2,
                    pre,
                    ..
                },
            ) => {
                let n = g.num_nodes();
                let dpre = if last { d_out.clone() } else { relu_mask(&d_out, pre) };
                let site_b = site_of(SiteSlot::GinMid);
                let site_a = site_of(SiteSlot::GinPreMlp);
                let uq = site_b.map_or(u, |s| &tape.sites[s].xq);
                let hq = site_a.map_or(h, |s| &tape.sites[s].xq);
                let w2q = w2.as_ref().map_or(&gl.lin2.w, |r| &r.xq);
                let w1q = w1.as_ref().map_or(&gl.lin1.w, |r| &r.xq);

                let lin2 = linear_grad(w2.as_ref(), matmul_tn(uq, &dpre), sum_rows(&dpre));
                let duq = matmul_nt(&dpre, w2q);
                let du = match (site_b, sites.as_mut()) {
                    (Some(s), Some(ctx)) => ctx.backward(s, &duq)?,
                    _ => duq,
                };
                let dy = relu_mask(&du, y);
                let (dz1, bn_grad) = match (&gl.bn, bn) {
                    (Some(p), Some(t)) => {
                        let dgamma = (&dy * &t.xhat).sum_axis(Axis(0));
                        let dbeta = sum_rows(&dy);
                        let mut dxhat = dy.clone();
                        for mut row in dxhat.rows_mut() {
                            row *= &p.gamma;
                        }
                        let dz1 = if t.batch {
                            let nf = n as f64;
                            let s1 = dxhat.sum_axis(Axis(0));
                            let s2 = (&dxhat * &t.xhat).sum_axis(Axis(0));
                            let mut out = Array2::zeros(dxhat.dim());
                            for ((i, j), o) in out.indexed_iter_mut() {
                                *o = t.inv_std[j] / nf * (nf * dxhat[[i, j]] - s1[j] - t.xhat[[i, j]] * s2[j]);
                            }
                            out
                        } else {
                            let mut out = dxhat;
                            for mut row in out.rows_mut() {
                                row *= &t.inv_std;
                            }
                            out
                        };
                        (dz1, Some((dgamma, dbeta)))
                    }
                    _ => (dy, None),
                };
                let lin1 = linear_grad(w1.as_ref(), matmul_tn(hq, &dz1), sum_rows(&dz1));
                let dhq = matmul_nt(&dz1, w1q);
                let dh = match (site_a, sites.as_mut()) {
                    (Some(s), Some(ctx)) => ctx.backward(s, &dhq)?,
                    _ => dhq,
                };
                let xc = col.as_ref().map_or(input, |r| &r.xq);
                let deps = (&dh * xc).sum();
                let mut in_step = None;
                if l > 0 || col.is_some() {
                    let mut dxc = dh.mapv(|v| v * (1.0 + gl.eps));
                    for i in 0..n {
                        let mut row = dxc.row_mut(i);
                        for &j in g.neighbors(i) {
                            if j != i {
                                row += &dh.row(j);
                            }
                        }
                    }
                    d_out = match col {
                        Some(r) => {
                            let (dx, per) = quant_backward(r, &dxc);
                            in_step = Some(per.iter().map(|q| q.d_step).collect());
                            dx
                        }
                        None => dxc,
                    };
                }
                layer_grads[l] = Some(LayerGrad::Gin {
                    eps: deps,
                    in_step,
                    lin1,
                    bn: bn_grad,
                    lin2,
                });
            }
            _ => return Err(Error::Shape("tape layer kind differs from model".into())),
        }
    }
    let site_grads = match sites {
        Some(ctx) => ctx
            .out
            .into_iter()
            .map(|s| s.ok_or_else(|| Error::Shape("site not reached in backward".into())))
            .collect::<Result<Vec<_>>>()?,
        None => Vec::new(),
    };
    Ok((
        parts,
        Gradients {
            layers: layer_grads.into_iter().map(|l| l.expect("every layer visited")).collect(),
            sites: site_grads,
        },
    ))
}

/// Forward then backward in one call.
pub fn loss_and_grads(
    model: &ModelParams,
    qt: Option<&QuantTable>,
    g: &CsrGraph,
    x0: &NodeFeatures,
    split: &DatasetSplit,
    cfg: &LossConfig,
    opts: ForwardOpts<'_>,
) -> Result<(LossParts, Gradients, Tape)> {
    let tape = forward(model, qt, g, x0, opts)?;
    let (parts, grads) = backward(model, qt, g, x0, &tape, split, cfg)?;
    Ok((parts, grads, tape))
}

/// Fraction of nodes whose task-gradient row at node site `site` is exactly
/// zero. Requires gradients from a global-mode backward.
pub fn zero_grad_fraction(grads: &Gradients, site: usize) -> Result<f64> {
    let s = grads
        .sites
        .get(site)
        .ok_or_else(|| Error::InvalidParam(format!("no node site {site}")))?;
    if s.zero_rows.is_empty() {
        return Err(Error::Empty("site has no rows"));
    }
    Ok(s.zero_rows.iter().filter(|&&z| z).count() as f64 / s.zero_rows.len() as f64)
}

impl QuantMode {
    pub fn name(&self) -> &'static str {
        match self {
            QuantMode::PerNodeLearned => "per_node_learned",
            QuantMode::UniformFixed { .. } => "uniform_fixed",
            QuantMode::NnsBank { .. } => "nns_bank",
        }
    }
}
