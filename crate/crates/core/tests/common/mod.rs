#![allow(dead_code)]

use a2q::graph::{CsrGraph, DatasetSplit, NodeFeatures};
use a2q::model::{
    backward, forward, ForwardOpts, Gradients, Layer, LayerGrad, LayerTape, LossConfig, ModelParams, QuantTable,
};
use ndarray::Array2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Weight,
    Bias,
    Eps,
    Bn,
    WeightStep,
    ColStep,
    NodeStep,
    NodeBit,
}

/// Every trainable scalar in a fixed order.
pub fn params_mut<'a>(m: &'a mut ModelParams, qt: Option<&'a mut QuantTable>) -> Vec<(Kind, &'a mut f64)> {
    let quant = qt.is_some();
    let mut out: Vec<(Kind, &'a mut f64)> = Vec::new();
    for layer in m.layers.iter_mut() {
        match layer {
            Layer::Gcn(l) => {
                out.extend(l.lin.w.iter_mut().map(|v| (Kind::Weight, v)));
                out.extend(l.lin.b.iter_mut().map(|v| (Kind::Bias, v)));
                if quant {
                    out.extend(l.lin.w_quant.iter_mut().map(|p| (Kind::WeightStep, &mut p.step)));
                    out.extend(l.agg_quant.iter_mut().map(|p| (Kind::ColStep, &mut p.step)));
                }
            }
            Layer::Gin(l) => {
                out.push((Kind::Eps, &mut l.eps));
                if let Some(q) = l.in_quant.as_mut().filter(|_| quant) {
                    out.extend(q.iter_mut().map(|p| (Kind::ColStep, &mut p.step)));
                }
                for (lin, bn) in [(&mut l.lin1, l.bn.as_mut()), (&mut l.lin2, None)] {
                    out.extend(lin.w.iter_mut().map(|v| (Kind::Weight, v)));
                    out.extend(lin.b.iter_mut().map(|v| (Kind::Bias, v)));
                    if quant {
                        out.extend(lin.w_quant.iter_mut().map(|p| (Kind::WeightStep, &mut p.step)));
                    }
                    if let Some(bn) = bn {
                        out.extend(bn.gamma.iter_mut().map(|v| (Kind::Bn, v)));
                        out.extend(bn.beta.iter_mut().map(|v| (Kind::Bn, v)));
                    }
                }
            }
        }
    }
    if let Some(qt) = qt {
        for site in qt.sites.iter_mut() {
            let entries = site.params.entries_mut();
            // split borrow: steps first, then bits
            let (steps, bits): (Vec<_>, Vec<_>) = entries
                .iter_mut()
                .map(|p| {
                    let a2q::quant::QuantParam { step, bits, .. } = p;
                    (step, bits)
                })
                .unzip();
            out.extend(steps.into_iter().map(|v| (Kind::NodeStep, v)));
            out.extend(bits.into_iter().map(|v| (Kind::NodeBit, v)));
        }
    }
    out
}

/// Gradients flattened in the order of [`params_mut`].
pub fn flat_grads(g: &Gradients) -> Vec<f64> {
    let mut out = Vec::new();
    for lg in &g.layers {
        match lg {
            LayerGrad::Gcn { lin, agg_step } => {
                out.extend(lin.w.iter());
                out.extend(lin.b.iter());
                out.extend(lin.w_step.iter());
                out.extend(agg_step.iter());
            }
            LayerGrad::Gin { eps, in_step, lin1, bn, lin2 } => {
                out.push(*eps);
                if let Some(s) = in_step {
                    out.extend(s.iter());
                }
                out.extend(lin1.w.iter());
                out.extend(lin1.b.iter());
                out.extend(lin1.w_step.iter());
                if let Some((gm, bt)) = bn {
                    out.extend(gm.iter());
                    out.extend(bt.iter());
                }
                out.extend(lin2.w.iter());
                out.extend(lin2.b.iter());
                out.extend(lin2.w_step.iter());
            }
        }
    }
    for s in &g.sites {
        out.extend(s.d_step.iter());
        out.extend(s.d_bits.iter());
    }
    out
}

fn relu_pattern(t: &a2q::model::Tape) -> Vec<bool> {
    let mut v = Vec::new();
    for l in &t.layers {
        match l {
            LayerTape::Gcn { pre, .. } => v.extend(pre.iter().map(|&x| x > 0.0)),
            LayerTape::Gin { y, pre, .. } => {
                v.extend(y.iter().map(|&x| x > 0.0));
                v.extend(pre.iter().map(|&x| x > 0.0));
            }
        }
    }
    v
}

pub struct FdOutcome {
    pub checked: usize,
    pub skipped: usize,
    pub worst_rel: f64,
    pub kinds_checked: Vec<Kind>,
    pub failures: Vec<String>,
}

/// Compares analytic gradients of `L_total` with central differences taken
/// on the frozen-quantization surrogate around the same point.
pub fn finite_difference_check(
    model: &ModelParams,
    qt: Option<&QuantTable>,
    g: &CsrGraph,
    x0: &NodeFeatures,
    split: &DatasetSplit,
    cfg: &LossConfig,
    rel_tol: f64,
) -> FdOutcome {
    let opts = ForwardOpts { train: true, frozen: None };
    let base = forward(model, qt, g, x0, opts).unwrap();
    let (_, grads) = backward(model, qt, g, x0, &base, split, cfg).unwrap();
    let analytic = flat_grads(&grads);
    let base_pattern = relu_pattern(&base);

    let eval = |m: &ModelParams, q: Option<&QuantTable>| -> Option<f64> {
        let t = forward(m, q, g, x0, ForwardOpts { train: true, frozen: q.map(|_| &base) }).unwrap();
        if relu_pattern(&t) != base_pattern {
            return None;
        }
        let (parts, _) = backward(m, q, g, x0, &t, split, cfg).unwrap();
        Some(parts.total)
    };

    let mut m = model.clone();
    let mut q = qt.cloned();
    let count = params_mut(&mut m, q.as_mut()).len();
    assert_eq!(count, analytic.len(), "parameter and gradient layouts differ");
    let mut out = FdOutcome {
        checked: 0,
        skipped: 0,
        worst_rel: 0.0,
        kinds_checked: Vec::new(),
        failures: Vec::new(),
    };
    for k in 0..count {
        let (kind, theta) = {
            let ps = params_mut(&mut m, q.as_mut());
            (ps[k].0, *ps[k].1)
        };
        let h = 1e-6 * theta.abs().max(1e-2);
        let mut at = |v: f64| {
            {
                let mut ps = params_mut(&mut m, q.as_mut());
                *ps[k].1 = v;
            }
            let r = eval(&m, q.as_ref());
            let mut ps = params_mut(&mut m, q.as_mut());
            *ps[k].1 = theta;
            r
        };
        let (Some(lp), Some(lm)) = (at(theta + h), at(theta - h)) else {
            out.skipped += 1;
            continue;
        };
        let fd = (lp - lm) / (2.0 * h);
        let a = analytic[k];
        let scale = a.abs().max(fd.abs());
        // tiny gradients are compared in absolute terms
        let rel = if scale < 1e-7 { (a - fd).abs() / 1e-7 * 1e-5 } else { (a - fd).abs() / scale };
        out.checked += 1;
        if !out.kinds_checked.contains(&kind) && scale >= 1e-7 {
            out.kinds_checked.push(kind);
        }
        out.worst_rel = out.worst_rel.max(rel);
        if rel >= rel_tol {
            out.failures.push(format!("{kind:?}[{k}] analytic {a:e} fd {fd:e} rel {rel:e}"));
        }
    }
    out
}

/// Six-node graph used by the gradient checks.
pub fn six_node_graph() -> (CsrGraph, NodeFeatures, DatasetSplit) {
    let g = CsrGraph::from_edges(6, &[(0, 1), (1, 2), (2, 0), (2, 3), (3, 4), (4, 5)], true).unwrap();
    let x = Array2::from_shape_fn((6, 4), |(i, j)| ((i * 4 + j) as f64 * 0.731 + 0.2).sin() * 0.8);
    let split = DatasetSplit::new(
        vec![Some(0), Some(1), Some(2), Some(0), Some(1), Some(2)],
        &[0, 1, 3, 5],
        &[2],
        &[4],
    )
    .unwrap();
    (g, NodeFeatures::new(x).unwrap(), split)
}

/// Non-zero biases keep pre-activations away from the ReLU kink.
pub fn randomize_biases(m: &mut ModelParams, seed: u64) {
    let mut k = seed as f64;
    let mut next = || {
        k += 1.0;
        0.05 + 0.1 * (k * 12.9898).sin().abs()
    };
    for layer in m.layers.iter_mut() {
        match layer {
            Layer::Gcn(l) => l.lin.b.iter_mut().for_each(|b| *b = next()),
            Layer::Gin(l) => {
                l.lin1.b.iter_mut().for_each(|b| *b = next());
                l.lin2.b.iter_mut().for_each(|b| *b = next());
            }
        }
    }
}
