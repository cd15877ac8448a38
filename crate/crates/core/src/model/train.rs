//! Full-batch training loop.

use serde::{Deserialize, Serialize};

use super::adam::{Adam, AdamConfig};
use super::backward::{backward, LossConfig};
use super::forward::{accuracy, forward, ForwardOpts, LayerTape, Tape};
use super::{Layer, ModelConfig, ModelParams, QuantMode, QuantTable, SiteParams, BN_MOMENTUM};
use crate::error::{Error, Result};
use crate::graph::{mask_indices, CsrGraph, DatasetSplit, NodeFeatures};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub adam: AdamConfig,
    pub loss: LossConfig,
    pub seed: u64,
    /// Train on the subgraph induced by train and val nodes only.
    pub inductive: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            adam: AdamConfig::default(),
            loss: LossConfig {
                lambda: 1e-4,
                ..LossConfig::default()
            },
            seed: 0,
            inductive: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub task_loss: f64,
    pub memory_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    /// Dimension-weighted mean of rounded node-site bits; `None` for FP32.
    pub avg_bits: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

/// Rounded bits each node uses at each node site in a given pass.
pub fn site_node_bits(qt: &QuantTable, tape: &Tape) -> Vec<Vec<u32>> {
    qt.sites
        .iter()
        .zip(&tape.sites)
        .map(|(site, rec)| match &site.params {
            SiteParams::PerNode(v) => v.iter().map(|p| p.rounded_bits()).collect(),
            _ => rec.params.iter().map(|p| p.rounded_bits()).collect(),
        })
        .collect()
}

/// Dimension-weighted average of rounded bits at the node sites of a pass.
pub fn tape_avg_bits(qt: &QuantTable, tape: &Tape) -> Option<f64> {
    let bits = site_node_bits(qt, tape);
    let dims: Vec<usize> = qt.sites.iter().map(|s| s.spec.dim).collect();
    crate::report::avg_bits(&bits, &dims).ok()
}

fn update_running_stats(model: &mut ModelParams, tape: &Tape) {
    for (layer, lt) in model.layers.iter_mut().zip(&tape.layers) {
        if let (Layer::Gin(l), LayerTape::Gin { bn: Some(t), .. }) = (layer, lt) {
            if let Some(bn) = l.bn.as_mut() {
                bn.running_mean = &bn.running_mean * (1.0 - BN_MOMENTUM) + &t.mean * BN_MOMENTUM;
                bn.running_var = &bn.running_var * (1.0 - BN_MOMENTUM) + &t.var * BN_MOMENTUM;
            }
        }
    }
}

fn has_bn(model: &ModelParams) -> bool {
    model
        .layers
        .iter()
        .any(|l| matches!(l, Layer::Gin(g) if g.bn.is_some()))
}

/// Float-path inference with frozen BN statistics.
pub fn evaluate(model: &ModelParams, qt: Option<&QuantTable>, g: &CsrGraph, x0: &NodeFeatures) -> Result<Tape> {
    forward(model, qt, g, x0, ForwardOpts::default())
}

/// Trains a model. `mode = None` trains the FP32 network. `init` supplies
/// starting weights (e.g. an FP32 checkpoint for quantization-aware
/// fine-tuning); otherwise weights are drawn from `cfg.seed`.
pub fn train(
    g: &CsrGraph,
    x0: &NodeFeatures,
    split: &DatasetSplit,
    model_cfg: ModelConfig,
    mode: Option<QuantMode>,
    cfg: &TrainConfig,
    init: Option<&ModelParams>,
) -> Result<(ModelParams, Option<QuantTable>, History)> {
    cfg.adam.validate()?;
    if !(cfg.loss.lambda >= 0.0) {
        return Err(Error::InvalidParam("lambda must be non-negative".into()));
    }
    split.validate()?;
    if split.num_nodes() != g.num_nodes() || x0.num_nodes() != g.num_nodes() {
        return Err(Error::Shape("graph, features and split disagree on node count".into()));
    }
    if cfg.inductive && mode == Some(QuantMode::PerNodeLearned) {
        return Err(Error::InvalidParam(
            "per-node tables cannot be used on unseen nodes; use nns_bank for inductive runs".into(),
        ));
    }
    let (g_tr, x_tr, s_tr) = if cfg.inductive {
        let keep: Vec<usize> = mask_indices(
            &split
                .train_mask
                .iter()
                .zip(&split.val_mask)
                .map(|(a, b)| *a || *b)
                .collect::<Vec<_>>(),
        );
        (g.induced_subgraph(&keep)?, x0.select_rows(&keep), split.select_rows(&keep))
    } else {
        (g.clone(), x0.clone(), split.clone())
    };

    let mut model = match init {
        Some(m) => {
            if m.config != model_cfg {
                return Err(Error::InvalidParam("initial model config differs from requested".into()));
            }
            m.clone()
        }
        None => ModelParams::init(model_cfg, cfg.seed)?,
    };
    let mut qt = match mode {
        Some(mode) => Some(QuantTable::init(&model, mode, g_tr.num_nodes(), cfg.seed ^ 0x9e37_79b9_7f4a_7c15)?),
        None => None,
    };
    let mut opt = Adam::new(cfg.adam);
    let train_nodes = s_tr.train_nodes();
    let val_nodes = s_tr.val_nodes();
    let bn = has_bn(&model);
    let mut history = History::default();

    for epoch in 0..cfg.epochs {
        let tape = forward(&model, qt.as_ref(), &g_tr, &x_tr, ForwardOpts { train: true, frozen: None })?;
        let (parts, grads) = backward(&model, qt.as_ref(), &g_tr, &x_tr, &tape, &s_tr, &cfg.loss)?;
        if !parts.total.is_finite() {
            return Err(Error::Diverged {
                epoch,
                loss: parts.total,
            });
        }
        let (train_acc, val_acc, avg_bits) = {
            let eval_tape;
            let t = if bn {
                eval_tape = evaluate(&model, qt.as_ref(), &g_tr, &x_tr)?;
                &eval_tape
            } else {
                &tape
            };
            (
                accuracy(&t.logits, &s_tr, &train_nodes),
                accuracy(&t.logits, &s_tr, &val_nodes),
                qt.as_ref().and_then(|q| tape_avg_bits(q, &tape)),
            )
        };
        history.epochs.push(EpochRecord {
            epoch,
            loss: parts.total,
            task_loss: parts.task,
            memory_loss: parts.memory,
            train_acc,
            val_acc,
            avg_bits,
        });
        update_running_stats(&mut model, &tape);
        opt.step(&mut model, qt.as_mut(), &grads)?;
    }
    Ok((model, qt, history))
}
