//! Adam with separate learning rates for weights, steps and bitwidths.

use serde::{Deserialize, Serialize};

use super::backward::{Gradients, LayerGrad, LinearGrad};
use super::{Layer, Linear, ModelParams, QuantTable};
use crate::error::{Error, Result};
use crate::quant::QuantParam;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr_weights: f64,
    pub lr_step: f64,
    pub lr_bit: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty on weight matrices only.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr_weights: 1e-2,
            lr_step: 1e-4,
            lr_bit: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lr_weights", self.lr_weights), ("lr_step", self.lr_step), ("lr_bit", self.lr_bit)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParam(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::InvalidParam("adam betas must lie in [0, 1) and eps > 0".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidParam("weight decay must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Group {
    Weight,
    Other,
    Step,
    Bit,
}

#[derive(Debug, Clone, Default)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            ..Default::default()
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    /// One update of every trainable value, followed by the clamps and a
    /// bank refresh.
    pub fn step(&mut self, model: &mut ModelParams, qt: Option<&mut QuantTable>, grads: &Gradients) -> Result<()> {
        if grads.layers.len() != model.layers.len() {
            return Err(Error::Shape("gradient layers do not match model".into()));
        }
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        let mut cursor = 0usize;
        let (m, v) = (&mut self.m, &mut self.v);
        let mut update = |group: Group, theta: &mut f64, g: f64| {
            if cursor == m.len() {
                m.push(0.0);
                v.push(0.0);
            }
            let (lr, g) = match group {
                Group::Weight => (c.lr_weights, g + c.weight_decay * *theta),
                Group::Other => (c.lr_weights, g),
                Group::Step => (c.lr_step, g),
                Group::Bit => (c.lr_bit, g),
            };
            m[cursor] = c.beta1 * m[cursor] + (1.0 - c.beta1) * g;
            v[cursor] = c.beta2 * v[cursor] + (1.0 - c.beta2) * g * g;
            let mhat = m[cursor] / bc1;
            let vhat = v[cursor] / bc2;
            *theta -= lr * mhat / (vhat.sqrt() + c.eps);
            cursor += 1;
        };

        for (layer, lg) in model.layers.iter_mut().zip(&grads.layers) {
            match (layer, lg) {
                (Layer::Gcn(l), LayerGrad::Gcn { lin, agg_step }) => {
                    linear(&mut l.lin, lin, &mut update);
                    steps(&mut l.agg_quant, agg_step, &mut update);
                }
                (
                    Layer::Gin(l),
                    LayerGrad::Gin {
                        eps,
                        in_step,
                        lin1,
                        bn,
                        lin2,
                    },
                ) => {
                    update(Group::Other, &mut l.eps, *eps);
                    if let (Some(q), Some(g)) = (l.in_quant.as_mut(), in_step) {
                        steps(q, g, &mut update);
                    }
                    linear(&mut l.lin1, lin1, &mut update);
                    if let (Some(p), Some((dg, db))) = (l.bn.as_mut(), bn) {
                        for (t, g) in p.gamma.iter_mut().zip(dg) {
                            update(Group::Other, t, *g);
                        }
                        for (t, g) in p.beta.iter_mut().zip(db) {
                            update(Group::Other, t, *g);
                        }
                    }
                    linear(&mut l.lin2, lin2, &mut update);
                }
                _ => return Err(Error::Shape("gradient layer kind differs from model".into())),
            }
        }
        if let Some(qt) = qt {
            if grads.sites.len() != qt.sites.len() {
                return Err(Error::Shape("gradient sites do not match table".into()));
            }
            let learn_bits = qt.mode.learns_bits();
            for (site, sg) in qt.sites.iter_mut().zip(&grads.sites) {
                let entries = site.params.entries_mut();
                if sg.d_step.len() != entries.len() {
                    return Err(Error::Shape("site gradient length mismatch".into()));
                }
                for (p, g) in entries.iter_mut().zip(&sg.d_step) {
                    update(Group::Step, &mut p.step, *g);
                }
                if learn_bits {
                    for (p, g) in entries.iter_mut().zip(&sg.d_bits) {
                        update(Group::Bit, &mut p.bits, *g);
                    }
                }
                entries.iter_mut().for_each(QuantParam::clamp);
            }
            qt.refresh();
        }
        Ok(())
    }
}

fn steps(params: &mut [QuantParam], grads: &[f64], update: &mut impl FnMut(Group, &mut f64, f64)) {
    for (p, g) in params.iter_mut().zip(grads) {
        update(Group::Step, &mut p.step, *g);
        p.clamp();
    }
}

fn linear(lin: &mut Linear, g: &LinearGrad, update: &mut impl FnMut(Group, &mut f64, f64)) {
    for (t, d) in lin.w.iter_mut().zip(&g.w) {
        update(Group::Weight, t, *d);
    }
    for (t, d) in lin.b.iter_mut().zip(&g.b) {
        update(Group::Other, t, *d);
    }
    steps(&mut lin.w_quant, &g.w_step, update);
}
