//! Experiment configuration: `key = value` text, unknown keys rejected.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{CitationSpec, DatasetFiles};
use crate::model::{AdamConfig, Arch, GradMode, QuantMode, DEFAULT_HIDDEN};
use crate::nns::DEFAULT_GROUPS;
use crate::util::{parse_kv, parse_value};

/// Environment variable naming a directory with real Cora files
/// (`edges.txt`, `features.bin`, `labels.txt`, `split.txt`).
pub const CORA_DIR_ENV: &str = "A2Q_CORA_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DatasetKind {
    /// Real Cora files if available, otherwise the Cora-shaped generator.
    Cora,
    SynthCitation,
    /// Power-law graph with planted community labels.
    Powerlaw,
    Files,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QuantKind {
    Fp32,
    UniformFixed,
    PerNodeLearned,
    NnsBank,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetKind,
    pub data_dir: Option<PathBuf>,
    pub edges: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub split: Option<PathBuf>,
    pub synth_nodes: usize,
    pub synth_exponent: f64,
    pub synth_classes: usize,
    pub synth_dim: usize,
    pub synth_noise: f64,
    pub synth_train_frac: f64,
    /// Seed of the synthetic dataset, independent of the training seed.
    pub data_seed: u64,

    pub model: Arch,
    pub hidden: usize,
    pub batch_norm: bool,

    pub quant: QuantKind,
    pub uniform_bits: f64,
    pub nns_groups: usize,
    pub quantize_first_layer: bool,
    /// Count layer-0 input bits in `avg_bits` and the compression ratio.
    /// Defaults to `quantize_first_layer`.
    pub count_first_layer: Option<bool>,

    pub grad_mode: GradMode,
    pub lambda: f64,
    /// Memory target in KB; takes precedence over `target_avg_bits`.
    pub m_target: Option<f64>,
    /// Memory target expressed as a uniform bitwidth over all node sites.
    pub target_avg_bits: Option<f64>,
    pub inductive: bool,
    pub epochs: usize,
    /// FP32 epochs run by `quantize` when no `init_from` checkpoint is given.
    pub pretrain_epochs: usize,
    pub adam: AdamConfig,
    pub seeds: Vec<u64>,

    pub init_from: Option<PathBuf>,
    pub accel_config: Option<PathBuf>,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetKind::Cora,
            data_dir: None,
            edges: None,
            features: None,
            labels: None,
            split: None,
            synth_nodes: 1000,
            synth_exponent: 2.5,
            synth_classes: 4,
            synth_dim: 16,
            synth_noise: 1.0,
            synth_train_frac: 0.5,
            data_seed: 0,
            model: Arch::Gcn,
            hidden: DEFAULT_HIDDEN,
            batch_norm: false,
            quant: QuantKind::Fp32,
            uniform_bits: 4.0,
            nns_groups: DEFAULT_GROUPS,
            quantize_first_layer: false,
            count_first_layer: None,
            grad_mode: GradMode::Global,
            lambda: 1e-4,
            m_target: None,
            target_avg_bits: None,
            inductive: false,
            epochs: 200,
            pretrain_epochs: 200,
            adam: AdamConfig::default(),
            seeds: vec![0],
            init_from: None,
            accel_config: None,
            out: PathBuf::from("runs"),
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean {v:?} for {key}"))),
    }
}

fn opt_f64(key: &str, v: &str) -> Result<Option<f64>> {
    if v == "none" {
        Ok(None)
    } else {
        parse_value(key, v).map(Some)
    }
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (v != "none" && !v.is_empty()).then(|| PathBuf::from(v))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or("none".into(), |p| p.display().to_string())
}

fn show_f64(v: Option<f64>) -> String {
    v.map_or("none".into(), |v| format!("{v:?}"))
}

impl ExperimentConfig {
    /// Parses `key = value` text on top of the defaults. Relative paths are
    /// resolved against `base` (normally the config file's directory).
    pub fn parse(text: &str, file: &str, base: Option<&Path>) -> Result<Self> {
        let mut c = ExperimentConfig::default();
        let resolve = |v: &str| {
            opt_path(v).map(|p| match base {
                Some(b) if p.is_relative() => b.join(p),
                _ => p,
            })
        };
        let mut out_set = false;
        let mut bn = None;
        for e in parse_kv(text, file)? {
            let (k, v) = (e.key.as_str(), e.value.as_str());
            match k {
                "dataset" => {
                    c.dataset = match v {
                        "cora" => DatasetKind::Cora,
                        "synth_citation" => DatasetKind::SynthCitation,
                        "powerlaw" => DatasetKind::Powerlaw,
                        "files" => DatasetKind::Files,
                        _ => return Err(Error::Config(format!("unknown dataset {v:?}"))),
                    }
                }
                "data_dir" => c.data_dir = resolve(v),
                "edges" => c.edges = resolve(v),
                "features" => c.features = resolve(v),
                "labels" => c.labels = resolve(v),
                "split" => c.split = resolve(v),
                "synth_nodes" => c.synth_nodes = parse_value(k, v)?,
                "synth_exponent" => c.synth_exponent = parse_value(k, v)?,
                "synth_classes" => c.synth_classes = parse_value(k, v)?,
                "synth_dim" => c.synth_dim = parse_value(k, v)?,
                "synth_noise" => c.synth_noise = parse_value(k, v)?,
                "synth_train_frac" => c.synth_train_frac = parse_value(k, v)?,
                "data_seed" => c.data_seed = parse_value(k, v)?,
                "model" => {
                    c.model = match v {
                        "gcn" => Arch::Gcn,
                        "gin" => Arch::Gin,
                        _ => return Err(Error::Config(format!("unknown model {v:?}"))),
                    };
                }
                "hidden" => c.hidden = parse_value(k, v)?,
                "batch_norm" => bn = Some(parse_bool(k, v)?),
                "quant" => {
                    c.quant = match v {
                        "fp32" => QuantKind::Fp32,
                        "uniform_fixed" => QuantKind::UniformFixed,
                        "per_node_learned" => QuantKind::PerNodeLearned,
                        "nns_bank" => QuantKind::NnsBank,
                        _ => return Err(Error::Config(format!("unknown quant mode {v:?}"))),
                    }
                }
                "uniform_bits" => c.uniform_bits = parse_value(k, v)?,
                "nns_groups" => c.nns_groups = parse_value(k, v)?,
                "quantize_first_layer" => c.quantize_first_layer = parse_bool(k, v)?,
                "count_first_layer" => c.count_first_layer = Some(parse_bool(k, v)?),
                "grad_mode" => {
                    c.grad_mode = match v {
                        "global" => GradMode::Global,
                        "local" => GradMode::Local,
                        _ => return Err(Error::Config(format!("unknown grad_mode {v:?}"))),
                    }
                }
                "lambda" => c.lambda = parse_value(k, v)?,
                "m_target" => c.m_target = opt_f64(k, v)?,
                "target_avg_bits" => c.target_avg_bits = opt_f64(k, v)?,
                "inductive" => c.inductive = parse_bool(k, v)?,
                "epochs" => c.epochs = parse_value(k, v)?,
                "pretrain_epochs" => c.pretrain_epochs = parse_value(k, v)?,
                "lr_weights" => c.adam.lr_weights = parse_value(k, v)?,
                "lr_step" => c.adam.lr_step = parse_value(k, v)?,
                "lr_bit" => c.adam.lr_bit = parse_value(k, v)?,
                "beta1" => c.adam.beta1 = parse_value(k, v)?,
                "beta2" => c.adam.beta2 = parse_value(k, v)?,
                "adam_eps" => c.adam.eps = parse_value(k, v)?,
                "weight_decay" => c.adam.weight_decay = parse_value(k, v)?,
                "seed" => c.seeds = vec![parse_value(k, v)?],
                "seeds" => {
                    c.seeds = v
                        .split(',')
                        .map(|s| parse_value(k, s.trim()))
                        .collect::<Result<_>>()?;
                }
                "init_from" => c.init_from = resolve(v),
                "accel_config" => c.accel_config = resolve(v),
                "out" => {
                    c.out = resolve(v).ok_or_else(|| Error::Config("out must be a path".into()))?;
                    out_set = true;
                }
                _ => {
                    return Err(Error::Parse {
                        file: file.to_string(),
                        line: e.line,
                        msg: format!("unknown config key {k}"),
                    })
                }
            }
        }
        c.batch_norm = bn.unwrap_or(c.model == Arch::Gin);
        c.count_first_layer = Some(c.count_first_layer());
        if !out_set {
            if let Some(b) = base {
                c.out = b.join(&c.out);
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string(), path.parent())
    }

    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.seeds.is_empty() {
            return bad("at least one seed is required");
        }
        if !(self.lambda >= 0.0) {
            return bad("lambda must be non-negative");
        }
        if self.hidden == 0 {
            return bad("hidden must be positive");
        }
        if let Some(m) = self.m_target {
            if !(m > 0.0) {
                return bad("m_target must be positive");
            }
        }
        if let Some(b) = self.target_avg_bits {
            if !(b > 0.0 && b <= 32.0) {
                return bad("target_avg_bits must lie in (0, 32]");
            }
        }
        match self.quant {
            QuantKind::UniformFixed if !(1.0..=8.0).contains(&self.uniform_bits) => {
                return bad("uniform_bits must lie in [1, 8]");
            }
            QuantKind::NnsBank if self.nns_groups == 0 => return bad("nns_groups must be positive"),
            QuantKind::PerNodeLearned if self.inductive => {
                return bad("per_node_learned needs a fixed node set; use nns_bank with inductive = true");
            }
            _ => {}
        }
        if self.dataset == DatasetKind::Files
            && (self.edges.is_none() || self.features.is_none() || self.labels.is_none() || self.split.is_none())
            && self.data_dir.is_none()
        {
            return bad("dataset = files needs data_dir or all of edges, features, labels, split");
        }
        if self.dataset == DatasetKind::Powerlaw && (self.synth_classes == 0 || self.synth_dim == 0) {
            return bad("powerlaw dataset needs positive synth_classes and synth_dim");
        }
        Ok(())
    }

    pub fn quant_mode(&self) -> Option<QuantMode> {
        match self.quant {
            QuantKind::Fp32 => None,
            QuantKind::UniformFixed => Some(QuantMode::UniformFixed {
                bits: self.uniform_bits,
            }),
            QuantKind::PerNodeLearned => Some(QuantMode::PerNodeLearned),
            QuantKind::NnsBank => Some(QuantMode::NnsBank {
                groups: self.nns_groups,
            }),
        }
    }

    pub fn count_first_layer(&self) -> bool {
        self.count_first_layer.unwrap_or(self.quantize_first_layer)
    }

    pub fn quant_name(&self) -> &'static str {
        match self.quant {
            QuantKind::Fp32 => "fp32",
            QuantKind::UniformFixed => "uniform_fixed",
            QuantKind::PerNodeLearned => "per_node_learned",
            QuantKind::NnsBank => "nns_bank",
        }
    }

    pub fn dataset_name(&self) -> &'static str {
        match self.dataset {
            DatasetKind::Cora => "cora",
            DatasetKind::SynthCitation => "synth_citation",
            DatasetKind::Powerlaw => "powerlaw",
            DatasetKind::Files => "files",
        }
    }

    pub fn dataset_files(&self) -> Option<DatasetFiles> {
        let from_dir = |d: &Path| DatasetFiles {
            edges: d.join("edges.txt"),
            features: d.join("features.bin"),
            labels: d.join("labels.txt"),
            split: d.join("split.txt"),
        };
        match self.dataset {
            DatasetKind::Files => Some(match (&self.edges, &self.features, &self.labels, &self.split) {
                (Some(e), Some(f), Some(l), Some(s)) => DatasetFiles {
                    edges: e.clone(),
                    features: f.clone(),
                    labels: l.clone(),
                    split: s.clone(),
                },
                _ => from_dir(self.data_dir.as_deref()?),
            }),
            DatasetKind::Cora => self
                .data_dir
                .clone()
                .or_else(|| std::env::var_os(CORA_DIR_ENV).map(PathBuf::from))
                .map(|d| from_dir(&d)),
            _ => None,
        }
    }

    pub fn citation_spec(&self) -> CitationSpec {
        match self.dataset {
            DatasetKind::SynthCitation => CitationSpec {
                nodes: self.synth_nodes,
                ..CitationSpec::cora_like(self.data_seed)
            },
            _ => CitationSpec::cora_like(self.data_seed),
        }
    }

    /// Canonical text of every setting except `out`. Paths are written as
    /// given, so moving a config changes its hash only if paths change.
    pub fn canonical_text(&self) -> String {
        let mut s = String::new();
        let a = &self.adam;
        let arch = match self.model {
            Arch::Gcn => "gcn",
            Arch::Gin => "gin",
        };
        let gm = match self.grad_mode {
            GradMode::Global => "global",
            GradMode::Local => "local",
        };
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let _ = write!(
            s,
            "dataset = {}\ndata_dir = {}\nedges = {}\nfeatures = {}\nlabels = {}\nsplit = {}\n\
             synth_nodes = {}\nsynth_exponent = {:?}\nsynth_classes = {}\nsynth_dim = {}\nsynth_noise = {:?}\n\
             synth_train_frac = {:?}\ndata_seed = {}\nmodel = {arch}\nhidden = {}\nbatch_norm = {}\nquant = {}\n\
             uniform_bits = {:?}\nnns_groups = {}\nquantize_first_layer = {}\ncount_first_layer = {}\n\
             grad_mode = {gm}\nlambda = {:?}\nm_target = {}\ntarget_avg_bits = {}\ninductive = {}\nepochs = {}\n\
             pretrain_epochs = {}\nlr_weights = {:?}\nlr_step = {:?}\nlr_bit = {:?}\nbeta1 = {:?}\nbeta2 = {:?}\n\
             adam_eps = {:?}\nweight_decay = {:?}\nseeds = {}\ninit_from = {}\naccel_config = {}\n",
            self.dataset_name(),
            show_path(&self.data_dir),
            show_path(&self.edges),
            show_path(&self.features),
            show_path(&self.labels),
            show_path(&self.split),
            self.synth_nodes,
            self.synth_exponent,
            self.synth_classes,
            self.synth_dim,
            self.synth_noise,
            self.synth_train_frac,
            self.data_seed,
            self.hidden,
            self.batch_norm,
            self.quant_name(),
            self.uniform_bits,
            self.nns_groups,
            self.quantize_first_layer,
            self.count_first_layer(),
            self.lambda,
            show_f64(self.m_target),
            show_f64(self.target_avg_bits),
            self.inductive,
            self.epochs,
            self.pretrain_epochs,
            a.lr_weights,
            a.lr_step,
            a.lr_bit,
            a.beta1,
            a.beta2,
            a.eps,
            a.weight_decay,
            seeds.join(","),
            show_path(&self.init_from),
            show_path(&self.accel_config),
        );
        s
    }

    /// Hex sha256 of [`canonical_text`](Self::canonical_text).
    pub fn hash(&self) -> String {
        hex_digest(&self.hash_bytes())
    }

    pub fn hash_bytes(&self) -> [u8; 32] {
        Sha256::digest(self.canonical_text().as_bytes()).into()
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
