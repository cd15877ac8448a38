//! Command implementations behind the `a2q` binary.
//!
//! Every command runs once per configured seed and writes into
//! `<out>/seed_<k>/`: `model.a2qc` (train, quantize) and `<command>.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{hex_digest, DatasetKind, ExperimentConfig, QuantKind};
use super::metrics::{avg_bits, compression_ratio};
use crate::accel::{raw_input_bits, simulate, AccelConfig, CycleReport, Workload};
use crate::error::{Error, Result};
use crate::graph::{load_graph, synth_citation, CsrGraph, DatasetSplit, NodeFeatures, PowerLawSpec, SynthDataset};
use crate::model::{
    accuracy, evaluate, load_checkpoint, save_checkpoint, site_node_bits, train, Checkpoint, History, LossConfig,
    ModelConfig, ModelParams, QuantTable, Tape, TrainConfig,
};
use crate::quant::MEMORY_ETA;
use crate::runtime::{int_forward, op_counts, OpCounts};
use crate::util::mean_std;

pub const RECORD_SCHEMA_VERSION: u32 = 1;
pub const SUMMARY_SCHEMA_VERSION: u32 = 1;
pub const CHECKPOINT_FILE: &str = "model.a2qc";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Train,
    Quantize,
    Infer,
    Simulate,
    Report,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Quantize => "quantize",
            Command::Infer => "infer",
            Command::Simulate => "simulate",
            Command::Report => "report",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub graph: CsrGraph,
    pub features: NodeFeatures,
    pub split: DatasetSplit,
    /// Generated rather than read from files.
    pub synthetic: bool,
}

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    if let Some(files) = cfg.dataset_files() {
        let (graph, features, split) = load_graph(&files)?;
        return Ok(Dataset {
            graph,
            features,
            split,
            synthetic: false,
        });
    }
    let d = match cfg.dataset {
        DatasetKind::Cora | DatasetKind::SynthCitation => synth_citation(cfg.citation_spec())?,
        DatasetKind::Powerlaw => SynthDataset::planted(
            PowerLawSpec::new(cfg.synth_nodes, cfg.synth_exponent, cfg.data_seed),
            cfg.synth_classes,
            cfg.synth_dim,
            cfg.synth_noise,
            cfg.synth_train_frac,
        )?,
        DatasetKind::Files => return Err(Error::Config("dataset files are not configured".into())),
    };
    Ok(Dataset {
        graph: d.graph,
        features: d.features,
        split: d.split,
        synthetic: true,
    })
}

pub fn model_config(cfg: &ExperimentConfig, d: &Dataset) -> ModelConfig {
    ModelConfig {
        arch: cfg.model,
        in_dim: d.features.dim(),
        hidden: cfg.hidden,
        classes: d.split.num_classes(),
        batch_norm: cfg.batch_norm,
        quantize_first_layer: cfg.quantize_first_layer,
        nonnegative_input: d.features.data().iter().all(|&v| v >= 0.0),
    }
}

/// Nodes of the graph the model is trained on.
fn training_nodes(cfg: &ExperimentConfig, d: &Dataset) -> usize {
    if cfg.inductive {
        d.split
            .train_mask
            .iter()
            .zip(&d.split.val_mask)
            .filter(|(a, b)| **a || **b)
            .count()
    } else {
        d.graph.num_nodes()
    }
}

/// Memory target in KB: explicit `m_target`, or `target_avg_bits` over every
/// node site of the training graph.
pub fn memory_target(cfg: &ExperimentConfig, mc: &ModelConfig, n: usize) -> Option<f64> {
    cfg.m_target.or_else(|| {
        cfg.target_avg_bits.map(|b| {
            let dims: usize = crate::model::node_sites(mc).iter().map(|s| s.dim).sum();
            b * (dims * n) as f64 / MEMORY_ETA
        })
    })
}

pub fn train_config(cfg: &ExperimentConfig, mc: &ModelConfig, d: &Dataset, seed: u64, epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        adam: cfg.adam,
        loss: LossConfig {
            grad_mode: cfg.grad_mode,
            lambda: cfg.lambda,
            m_target: memory_target(cfg, mc, training_nodes(cfg, d)),
        },
        seed,
        inductive: cfg.inductive,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema_version: u32,
    pub command: Command,
    pub config_hash: String,
    pub seed: u64,
    pub dataset: String,
    pub synthetic_data: bool,
    pub model: String,
    pub quant: String,
    pub history: Option<History>,
    pub train_accuracy: Option<f64>,
    pub val_accuracy: Option<f64>,
    /// Test accuracy of the float (fake-quantized) path.
    pub test_accuracy: Option<f64>,
    /// Test accuracy of the integer runtime.
    pub int_test_accuracy: Option<f64>,
    pub avg_bits: Option<f64>,
    pub compression_ratio: Option<f64>,
    pub op_counts: Option<OpCounts>,
    pub cycle_report: Option<CycleReport>,
    pub checkpoint: Option<String>,
    /// Excluded from determinism checks.
    pub wall_clock_secs: f64,
}

impl RunRecord {
    fn new(cmd: Command, cfg: &ExperimentConfig, seed: u64, d: &Dataset) -> Self {
        RunRecord {
            schema_version: RECORD_SCHEMA_VERSION,
            command: cmd,
            config_hash: cfg.hash(),
            seed,
            dataset: cfg.dataset_name().into(),
            synthetic_data: d.synthetic,
            model: match cfg.model {
                crate::model::Arch::Gcn => "gcn".into(),
                crate::model::Arch::Gin => "gin".into(),
            },
            quant: cfg.quant_name().into(),
            history: None,
            train_accuracy: None,
            val_accuracy: None,
            test_accuracy: None,
            int_test_accuracy: None,
            avg_bits: None,
            compression_ratio: None,
            op_counts: None,
            cycle_report: None,
            checkpoint: None,
            wall_clock_secs: 0.0,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let r: RunRecord = serde_json::from_str(&text).map_err(|e| Error::Serde(format!("{}: {e}", path.display())))?;
        if r.schema_version != RECORD_SCHEMA_VERSION {
            return Err(Error::Serde(format!("{}: unsupported record schema {}", path.display(), r.schema_version)));
        }
        Ok(r)
    }
}

pub fn seed_dir(cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    cfg.out.join(format!("seed_{seed}"))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `avg_bits` over node sites of an evaluation pass, skipping layer-0 sites
/// unless `count_first_layer`.
pub fn record_avg_bits(qt: &QuantTable, tape: &Tape, count_first_layer: bool) -> Option<f64> {
    let bits = site_node_bits(qt, tape);
    let (b, d): (Vec<_>, Vec<_>) = qt
        .sites
        .iter()
        .zip(bits)
        .filter(|(s, _)| count_first_layer || s.spec.layer > 0)
        .map(|(s, b)| (b, s.spec.dim))
        .unzip();
    avg_bits(&b, &d).ok()
}

fn fill_eval(
    rec: &mut RunRecord,
    cfg: &ExperimentConfig,
    d: &Dataset,
    model: &ModelParams,
    qt: Option<&QuantTable>,
) -> Result<Tape> {
    let tape = evaluate(model, qt, &d.graph, &d.features)?;
    rec.train_accuracy = Some(accuracy(&tape.logits, &d.split, &d.split.train_nodes()));
    rec.val_accuracy = Some(accuracy(&tape.logits, &d.split, &d.split.val_nodes()));
    rec.test_accuracy = Some(accuracy(&tape.logits, &d.split, &d.split.test_nodes()));
    if let Some(qt) = qt {
        rec.avg_bits = record_avg_bits(qt, &tape, cfg.count_first_layer());
        rec.compression_ratio = rec.avg_bits.map(|b| {
            compression_ratio(
                b,
                d.graph.num_nodes(),
                model.config.in_dim,
                model.config.hidden,
                model.num_layers(),
                cfg.count_first_layer(),
            )
        });
    }
    Ok(tape)
}

fn checkpoint_for(cfg: &ExperimentConfig, model: ModelParams, qt: Option<QuantTable>) -> Checkpoint {
    Checkpoint {
        model,
        qt,
        config_hash: cfg.hash_bytes(),
    }
}

fn save_outputs(cfg: &ExperimentConfig, seed: u64, ck: Option<&Checkpoint>, rec: &mut RunRecord) -> Result<PathBuf> {
    let dir = seed_dir(cfg, seed);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    if let Some(ck) = ck {
        save_checkpoint(&dir.join(CHECKPOINT_FILE), ck)?;
        rec.checkpoint = Some(CHECKPOINT_FILE.into());
    }
    let path = dir.join(format!("{}.json", rec.command.name()));
    write_file(&path, &rec.to_json()?)?;
    Ok(path)
}

/// Trains in the configured mode from scratch, or from `init_from`.
pub fn run_train(cfg: &ExperimentConfig, seed: u64) -> Result<RunRecord> {
    let t0 = Instant::now();
    let d = load_dataset(cfg)?;
    let mc = model_config(cfg, &d);
    let init = match &cfg.init_from {
        Some(p) => Some(load_checkpoint(p)?.model),
        None => None,
    };
    let tc = train_config(cfg, &mc, &d, seed, cfg.epochs);
    let (model, qt, history) = train(&d.graph, &d.features, &d.split, mc, cfg.quant_mode(), &tc, init.as_ref())?;
    let mut rec = RunRecord::new(Command::Train, cfg, seed, &d);
    fill_eval(&mut rec, cfg, &d, &model, qt.as_ref())?;
    rec.history = Some(history);
    let ck = checkpoint_for(cfg, model, qt);
    rec.wall_clock_secs = t0.elapsed().as_secs_f64();
    save_outputs(cfg, seed, Some(&ck), &mut rec)?;
    Ok(rec)
}

/// Quantization-aware fine-tuning of an FP32 model: loaded from `init_from`
/// or pretrained here for `pretrain_epochs`.
pub fn run_quantize(cfg: &ExperimentConfig, seed: u64) -> Result<RunRecord> {
    let t0 = Instant::now();
    let mode = cfg
        .quant_mode()
        .ok_or_else(|| Error::Config("quantize needs a quant mode other than fp32".into()))?;
    let d = load_dataset(cfg)?;
    let mc = model_config(cfg, &d);
    let base = match &cfg.init_from {
        Some(p) => {
            let ck = load_checkpoint(p)?;
            if ck.qt.is_some() {
                return Err(Error::Checkpoint(format!("{} is already quantized", p.display())));
            }
            ck.model
        }
        None => {
            let tc = train_config(cfg, &mc, &d, seed, cfg.pretrain_epochs);
            train(&d.graph, &d.features, &d.split, mc, None, &tc, None)?.0
        }
    };
    let tc = train_config(cfg, &mc, &d, seed, cfg.epochs);
    let (model, qt, history) = train(&d.graph, &d.features, &d.split, mc, Some(mode), &tc, Some(&base))?;
    let mut rec = RunRecord::new(Command::Quantize, cfg, seed, &d);
    fill_eval(&mut rec, cfg, &d, &model, qt.as_ref())?;
    rec.history = Some(history);
    let ck = checkpoint_for(cfg, model, qt);
    rec.wall_clock_secs = t0.elapsed().as_secs_f64();
    save_outputs(cfg, seed, Some(&ck), &mut rec)?;
    Ok(rec)
}

fn load_seed_checkpoint(cfg: &ExperimentConfig, seed: u64, d: &Dataset) -> Result<Checkpoint> {
    let path = seed_dir(cfg, seed).join(CHECKPOINT_FILE);
    let ck = load_checkpoint(&path)?;
    let mc = model_config(cfg, d);
    let c = &ck.model.config;
    if c.arch != mc.arch || c.in_dim != mc.in_dim || c.classes != mc.classes {
        return Err(Error::Checkpoint(format!("{} does not match the configured model and dataset", path.display())));
    }
    if ck.qt.is_some() != (cfg.quant != QuantKind::Fp32) {
        return Err(Error::Checkpoint(format!(
            "{} was trained with a different quant mode than {}",
            path.display(),
            cfg.quant_name()
        )));
    }
    if let Some(qt) = &ck.qt {
        qt.check(&ck.model, d.graph.num_nodes())?;
    }
    Ok(ck)
}

/// Integer inference of the seed's checkpoint. FP32 checkpoints run the
/// float path.
pub fn run_infer(cfg: &ExperimentConfig, seed: u64) -> Result<RunRecord> {
    let t0 = Instant::now();
    let d = load_dataset(cfg)?;
    let ck = load_seed_checkpoint(cfg, seed, &d)?;
    let mut rec = RunRecord::new(Command::Infer, cfg, seed, &d);
    fill_eval(&mut rec, cfg, &d, &ck.model, ck.qt.as_ref())?;
    if let Some(qt) = &ck.qt {
        let out = int_forward(&ck.model, qt, &d.graph, &d.features)?;
        rec.int_test_accuracy = Some(accuracy(&out.logits, &d.split, &d.split.test_nodes()));
        let groups = match qt.mode {
            crate::model::QuantMode::NnsBank { groups } => Some(groups),
            _ => None,
        };
        rec.op_counts = Some(op_counts(&ck.model, &d.graph, groups, raw_input_bits(&d.features).is_some()));
    }
    rec.wall_clock_secs = t0.elapsed().as_secs_f64();
    save_outputs(cfg, seed, None, &mut rec)?;
    Ok(rec)
}

/// Accelerator cycle and energy model of the seed's checkpoint.
pub fn run_simulate(cfg: &ExperimentConfig, seed: u64) -> Result<RunRecord> {
    let t0 = Instant::now();
    if cfg.quant == QuantKind::Fp32 {
        return Err(Error::Config(
            "simulate needs a quantized checkpoint; fp32 has no feature bitwidths to schedule".into(),
        ));
    }
    let accel = match &cfg.accel_config {
        Some(p) => AccelConfig::load(p)?,
        None => AccelConfig::default(),
    };
    let d = load_dataset(cfg)?;
    let ck = load_seed_checkpoint(cfg, seed, &d)?;
    let qt = ck.qt.as_ref().expect("quantized checkpoint");
    let mut rec = RunRecord::new(Command::Simulate, cfg, seed, &d);
    let tape = fill_eval(&mut rec, cfg, &d, &ck.model, Some(qt))?;
    let bits = site_node_bits(qt, &tape);
    let w = Workload::from_model(&ck.model, qt, &d.graph, &bits, raw_input_bits(&d.features).unwrap_or(32))?;
    rec.cycle_report = Some(simulate(&w, &accel)?);
    rec.wall_clock_secs = t0.elapsed().as_secs_f64();
    save_outputs(cfg, seed, None, &mut rec)?;
    Ok(rec)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub command: Command,
    pub dataset: String,
    pub model: String,
    pub quant: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub metrics: BTreeMap<String, MetricSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema_version: u32,
    pub rows: Vec<SummaryRow>,
}

pub const SUMMARY_METRICS: [&str; 6] = [
    "test_accuracy",
    "int_test_accuracy",
    "avg_bits",
    "compression_ratio",
    "speedup_vs_int4",
    "energy_pj",
];

fn metric(r: &RunRecord, name: &str) -> Option<f64> {
    match name {
        "test_accuracy" => r.test_accuracy,
        "int_test_accuracy" => r.int_test_accuracy,
        "avg_bits" => r.avg_bits,
        "compression_ratio" => r.compression_ratio,
        "speedup_vs_int4" => r.cycle_report.as_ref().map(|c| c.speedup_vs_int4),
        "energy_pj" => r.cycle_report.as_ref().map(|c| c.energy_pj),
        _ => None,
    }
}

/// Groups records by command and config hash and summarises each metric as
/// mean and sample standard deviation over seeds.
pub fn summarize(records: &[RunRecord]) -> Summary {
    let mut groups: BTreeMap<(Command, String), Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        groups.entry((r.command, r.config_hash.clone())).or_default().push(r);
    }
    let rows = groups
        .into_values()
        .map(|mut rs| {
            rs.sort_by_key(|r| r.seed);
            let metrics = SUMMARY_METRICS
                .iter()
                .filter_map(|&m| {
                    let v: Vec<f64> = rs.iter().filter_map(|r| metric(r, m)).collect();
                    (!v.is_empty()).then(|| {
                        let (mean, std) = mean_std(&v);
                        (m.to_string(), MetricSummary { n: v.len(), mean, std })
                    })
                })
                .collect();
            SummaryRow {
                command: rs[0].command,
                dataset: rs[0].dataset.clone(),
                model: rs[0].model.clone(),
                quant: rs[0].quant.clone(),
                config_hash: rs[0].config_hash.clone(),
                seeds: rs.iter().map(|r| r.seed).collect(),
                metrics,
            }
        })
        .collect();
    Summary {
        schema_version: SUMMARY_SCHEMA_VERSION,
        rows,
    }
}

pub fn summary_csv(s: &Summary) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec![
        "schema_version".to_string(),
        "command".into(),
        "dataset".into(),
        "model".into(),
        "quant".into(),
        "config_hash".into(),
        "seeds".into(),
    ];
    for m in SUMMARY_METRICS {
        header.push(format!("{m}_mean"));
        header.push(format!("{m}_std"));
    }
    let csv_err = |e: csv::Error| Error::Serde(e.to_string());
    w.write_record(&header).map_err(csv_err)?;
    for r in &s.rows {
        let mut row = vec![
            s.schema_version.to_string(),
            r.command.name().to_string(),
            r.dataset.clone(),
            r.model.clone(),
            r.quant.clone(),
            r.config_hash.clone(),
            r.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(";"),
        ];
        for m in SUMMARY_METRICS {
            match r.metrics.get(m) {
                Some(ms) => {
                    row.push(format!("{}", ms.mean));
                    row.push(format!("{}", ms.std));
                }
                None => {
                    row.push(String::new());
                    row.push(String::new());
                }
            }
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Serde(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Serde(e.to_string()))
}

/// Collects every `seed_*/<command>.json` under `out` in a stable order.
pub fn collect_records(out: &Path) -> Result<Vec<RunRecord>> {
    let mut paths = Vec::new();
    let entries = fs::read_dir(out).map_err(|e| Error::io(out, e))?;
    for e in entries {
        let e = e.map_err(|e| Error::io(out, e))?;
        let dir = e.path();
        let is_seed = dir.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("seed_"));
        if !(is_seed && dir.is_dir()) {
            continue;
        }
        for cmd in [Command::Train, Command::Quantize, Command::Infer, Command::Simulate] {
            let p = dir.join(format!("{}.json", cmd.name()));
            if p.exists() {
                paths.push(p);
            }
        }
    }
    paths.sort();
    paths.iter().map(|p| RunRecord::load(p)).collect()
}

/// Writes `summary.json` and `summary.csv` into `out`.
pub fn run_report(cfg: &ExperimentConfig) -> Result<Summary> {
    let records = collect_records(&cfg.out)?;
    if records.is_empty() {
        return Err(Error::Empty("no run records under the output directory"));
    }
    let s = summarize(&records);
    write_file(
        &cfg.out.join("summary.json"),
        &serde_json::to_string_pretty(&s).map_err(|e| Error::Serde(e.to_string()))?,
    )?;
    write_file(&cfg.out.join("summary.csv"), &summary_csv(&s)?)?;
    Ok(s)
}

/// Runs `cmd` for every configured seed (`report` runs once).
pub fn run(cmd: Command, cfg: &ExperimentConfig) -> Result<Vec<RunRecord>> {
    if cmd == Command::Report {
        run_report(cfg)?;
        return Ok(Vec::new());
    }
    cfg.seeds
        .iter()
        .map(|&seed| match cmd {
            Command::Train => run_train(cfg, seed),
            Command::Quantize => run_quantize(cfg, seed),
            Command::Infer => run_infer(cfg, seed),
            Command::Simulate => run_simulate(cfg, seed),
            Command::Report => unreachable!(),
        })
        .collect()
}

/// Record JSON with `wall_clock_secs` removed, for determinism checks.
pub fn strip_wall_clock(json: &str) -> Result<String> {
    let mut v: serde_json::Value = serde_json::from_str(json).map_err(|e| Error::Serde(e.to_string()))?;
    if let Some(o) = v.as_object_mut() {
        o.remove("wall_clock_secs");
    }
    serde_json::to_string_pretty(&v).map_err(|e| Error::Serde(e.to_string()))
}

/// Short hex digest of a file's bytes.
pub fn file_digest(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex_digest(&Sha256::digest(&bytes)))
}
