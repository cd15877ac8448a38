//! Two-layer GCN and GIN with fake quantization, manual backward passes,
//! Adam and the training loop.
//!
//! Quantization happens at three kinds of places:
//!
//! * weight matrices, one quantizer per output column at a fixed 4 bits;
//! * column sites, where features enter an integer aggregation and must
//!   share one step per column (GCN: the update output before `Ã`; GIN: the
//!   layer input before the neighbour sum);
//! * node sites, the per-node learnable quantizers held in a [`QuantTable`].
//!
//! Running with `qt = None` disables every quantizer and gives the FP32
//! reference network.

mod adam;
mod backward;
mod checkpoint;
mod forward;
pub(crate) mod linalg;
mod train;

pub use adam::{Adam, AdamConfig};
pub use backward::{backward, GradMode, loss_and_grads, nll_loss, zero_grad_fraction, Gradients, LayerGrad, LinearGrad, LossConfig, LossParts, SiteGrad};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use forward::{forward, accuracy, FrozenQuant, ForwardOpts, LayerTape, QAxis, QRecord, Tape};
pub use train::{evaluate, site_node_bits, tape_avg_bits, train, EpochRecord, History, TrainConfig};

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nns::ParamBank;
use crate::quant::{QuantParam, Signedness, WEIGHT_BITS};
use crate::util::init_step;

pub const DEFAULT_HIDDEN: usize = 16;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Arch {
    Gcn,
    Gin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// `F_in x F_out`.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    /// One quantizer per output column, bits fixed at 4.
    pub w_quant: Vec<QuantParam>,
}

impl Linear {
    fn init<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let w = Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-bound..=bound));
        Linear {
            w,
            b: Array1::zeros(fan_out),
            w_quant: signed_column_quantizers(fan_out, rng),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.w.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.w.ncols()
    }
}

fn column_quantizers<R: Rng>(n: usize, signedness: Signedness, rng: &mut R) -> Vec<QuantParam> {
    (0..n)
        .map(|_| QuantParam::new(init_step(rng), WEIGHT_BITS, signedness))
        .collect()
}

fn signed_column_quantizers<R: Rng>(n: usize, rng: &mut R) -> Vec<QuantParam> {
    column_quantizers(n, Signedness::Signed, rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

impl BatchNorm {
    fn new(f: usize) -> Self {
        BatchNorm {
            gamma: Array1::ones(f),
            beta: Array1::zeros(f),
            running_mean: Array1::zeros(f),
            running_var: Array1::ones(f),
        }
    }

    /// Per-channel `(scale, shift)` with running statistics merged in.
    pub fn affine(&self) -> (Array1<f64>, Array1<f64>) {
        let scale: Array1<f64> = self
            .gamma
            .iter()
            .zip(&self.running_var)
            .map(|(g, v)| g / (v + BN_EPS).sqrt())
            .collect();
        let shift = &self.beta - &(&scale * &self.running_mean);
        (scale, shift)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GcnLayer {
    pub lin: Linear,
    /// Column site on the update output, ahead of the integer aggregation.
    pub agg_quant: Vec<QuantParam>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GinLayer {
    pub eps: f64,
    /// Column site on the layer input, ahead of the neighbour sum. Absent on
    /// layer 0 when the first-layer input is not quantized.
    pub in_quant: Option<Vec<QuantParam>>,
    pub lin1: Linear,
    pub bn: Option<BatchNorm>,
    pub lin2: Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Layer {
    Gcn(GcnLayer),
    Gin(GinLayer),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Arch,
    pub in_dim: usize,
    pub hidden: usize,
    pub classes: usize,
    pub batch_norm: bool,
    pub quantize_first_layer: bool,
    /// The raw input is known to be non-negative, so a quantized GCN input
    /// site on layer 0 can use the unsigned path (1 bit suffices for binary
    /// features).
    #[serde(default)]
    pub nonnegative_input: bool,
}

impl ModelConfig {
    pub fn gcn(in_dim: usize, classes: usize) -> Self {
        ModelConfig {
            arch: Arch::Gcn,
            in_dim,
            hidden: DEFAULT_HIDDEN,
            classes,
            batch_norm: false,
            quantize_first_layer: false,
            nonnegative_input: false,
        }
    }

    pub fn gin(in_dim: usize, classes: usize) -> Self {
        ModelConfig {
            arch: Arch::Gin,
            batch_norm: true,
            ..Self::gcn(in_dim, classes)
        }
    }

    /// Feature width entering each layer, plus the output width.
    pub fn dims(&self) -> [usize; 3] {
        [self.in_dim, self.hidden, self.classes]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub layers: Vec<Layer>,
}

impl ModelParams {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init_with(config, &mut rng)
    }

    pub fn init_with<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        if config.in_dim == 0 || config.hidden == 0 || config.classes == 0 {
            return Err(Error::InvalidParam("model dimensions must be positive".into()));
        }
        let dims = config.dims();
        let layers = (0..2)
            .map(|l| {
                let (fi, fo) = (dims[l], dims[l + 1]);
                match config.arch {
                    Arch::Gcn => Layer::Gcn(GcnLayer {
                        lin: Linear::init(fi, fo, rng),
                        agg_quant: signed_column_quantizers(fo, rng),
                    }),
                    Arch::Gin => {
                        let in_quant = if l > 0 {
                            Some(column_quantizers(fi, Signedness::Unsigned, rng))
                        } else if config.quantize_first_layer {
                            Some(column_quantizers(fi, Signedness::Signed, rng))
                        } else {
                            None
                        };
                        Layer::Gin(GinLayer {
                            eps: 0.0,
                            in_quant,
                            lin1: Linear::init(fi, fo, rng),
                            bn: config.batch_norm.then(|| BatchNorm::new(fo)),
                            lin2: Linear::init(fo, fo, rng),
                        })
                    }
                }
            })
            .collect();
        Ok(ModelParams { config, layers })
    }

    /// Node-level quantization sites in forward order.
    pub fn node_sites(&self) -> Vec<SiteSpec> {
        node_sites(&self.config)
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SiteSlot {
    /// GCN layer input, quantized before the update matmul.
    GcnInput,
    /// GIN aggregated features, quantized before the first MLP linear.
    GinPreMlp,
    /// GIN hidden features, quantized before the second MLP linear.
    GinMid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteSpec {
    pub layer: usize,
    pub slot: SiteSlot,
    pub dim: usize,
    pub signedness: Signedness,
}

pub fn node_sites(cfg: &ModelConfig) -> Vec<SiteSpec> {
    let dims = cfg.dims();
    let mut out = Vec::new();
    for l in 0..2 {
        match cfg.arch {
            Arch::Gcn => {
                if l > 0 || cfg.quantize_first_layer {
                    out.push(SiteSpec {
                        layer: l,
                        slot: SiteSlot::GcnInput,
                        dim: dims[l],
                        signedness: if l == 0 && !cfg.nonnegative_input {
                            Signedness::Signed
                        } else {
                            Signedness::Unsigned
                        },
                    });
                }
            }
            Arch::Gin => {
                out.push(SiteSpec {
                    layer: l,
                    slot: SiteSlot::GinPreMlp,
                    dim: dims[l],
                    signedness: Signedness::Signed,
                });
                out.push(SiteSpec {
                    layer: l,
                    slot: SiteSlot::GinMid,
                    dim: dims[l + 1],
                    signedness: Signedness::Unsigned,
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum QuantMode {
    /// One learnable `(s, b)` per node per site.
    PerNodeLearned,
    /// One shared quantizer per site with fixed bits and a learned step.
    UniformFixed { bits: f64 },
    /// A bank of `groups` parameters per site, selected per node.
    NnsBank { groups: usize },
}

impl QuantMode {
    pub fn learns_bits(&self) -> bool {
        !matches!(self, QuantMode::UniformFixed { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SiteParams {
    PerNode(Vec<QuantParam>),
    Shared(QuantParam),
    Bank(ParamBank),
}

impl SiteParams {
    /// Number of learnable entries.
    pub fn len(&self) -> usize {
        match self {
            SiteParams::PerNode(v) => v.len(),
            SiteParams::Shared(_) => 1,
            SiteParams::Bank(b) => b.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn entries(&self) -> &[QuantParam] {
        match self {
            SiteParams::PerNode(v) => v,
            SiteParams::Shared(p) => std::slice::from_ref(p),
            SiteParams::Bank(b) => &b.groups,
        }
    }

    pub fn entries_mut(&mut self) -> &mut [QuantParam] {
        match self {
            SiteParams::PerNode(v) => v,
            SiteParams::Shared(p) => std::slice::from_mut(p),
            SiteParams::Bank(b) => &mut b.groups,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSite {
    pub spec: SiteSpec,
    pub params: SiteParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantTable {
    pub mode: QuantMode,
    pub sites: Vec<NodeSite>,
}

impl QuantTable {
    /// Fresh table for `model` on a graph with `num_nodes` nodes. Bits start
    /// at 4 (or the fixed width), steps are drawn from the truncated normal.
    pub fn init(model: &ModelParams, mode: QuantMode, num_nodes: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sites = model
            .node_sites()
            .into_iter()
            .map(|spec| {
                let s = spec.signedness;
                let params = match mode {
                    QuantMode::PerNodeLearned => SiteParams::PerNode(
                        (0..num_nodes)
                            .map(|_| QuantParam::new(init_step(&mut rng), 4.0, s))
                            .collect(),
                    ),
                    QuantMode::UniformFixed { bits } => {
                        if !(bits >= s.min_bits() && bits <= crate::quant::BITS_MAX) {
                            return Err(Error::InvalidParam(format!("uniform bitwidth {bits} out of range")));
                        }
                        SiteParams::Shared(QuantParam::new(init_step(&mut rng), bits, s))
                    }
                    QuantMode::NnsBank { groups } => SiteParams::Bank(ParamBank::init_with(groups, s, &mut rng)?),
                };
                Ok(NodeSite { spec, params })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(QuantTable { mode, sites })
    }

    pub fn site_index(&self, layer: usize, slot: SiteSlot) -> Option<usize> {
        self.sites
            .iter()
            .position(|s| s.spec.layer == layer && s.spec.slot == slot)
    }

    /// Checks that the table fits `model` on a graph with `num_nodes` nodes.
    pub fn check(&self, model: &ModelParams, num_nodes: usize) -> Result<()> {
        let specs = model.node_sites();
        if specs.len() != self.sites.len() || specs.iter().zip(&self.sites).any(|(a, b)| *a != b.spec) {
            return Err(Error::Shape("quantization sites do not match the model".into()));
        }
        for site in &self.sites {
            if let SiteParams::PerNode(v) = &site.params {
                if v.len() != num_nodes {
                    return Err(Error::Shape(format!(
                        "per-node table has {} entries for {num_nodes} nodes",
                        v.len()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Re-sorts every bank after a parameter update.
    pub fn refresh(&mut self) {
        for site in &mut self.sites {
            if let SiteParams::Bank(b) = &mut site.params {
                b.refresh();
            }
        }
    }
}
