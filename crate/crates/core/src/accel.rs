//! Analytic tile-level model of a precision-scalable bit-serial accelerator.
//!
//! This is not an RTL or pipeline simulator. The only timing primitive is
//! the bit-serial law: an `m`-bit feature times a weight takes `m` cycles.
//! Rows are mapped one per PE in tiles of `num_pes`, and all PEs in a tile
//! run in lockstep, so a tile costs as much as its slowest row.
//!
//! * Update: `ceil(F_in / macs) · max_bits(tile) · F_out` cycles per tile.
//!   Rows are sorted by bitwidth so that similar precisions share a tile.
//! * Aggregate: `max_deg(tile) · ceil(F / macs)` cycles per tile, with rows
//!   sorted by in-degree.
//!
//! Traffic: each layer reads its compressed input features, its weights and
//! (for aggregation) the CSR arrays from DRAM once; input and output buffers
//! swap between layers. Tiles that no longer fit in the input buffer are
//! charged one extra DRAM write and read each. Energy is a linear function of
//! operation counts and traffic with a user-supplied per-op table, so all
//! energies are relative to that table.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{CsrGraph, NodeFeatures};
use crate::model::{Layer, ModelParams, QuantTable, SiteSlot};
use crate::quant::WEIGHT_BITS;
use crate::util::{parse_kv, parse_value};

/// Per-op energies in pJ. Defaults are common 45nm figures (8-bit integer
/// multiply 0.2 pJ, 32-bit float multiply 3.7 pJ, SRAM about 10 pJ per 64-bit
/// access, DRAM a few tens of pJ per bit amortised).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyTable {
    pub int_mac_pj: f64,
    pub float_mul_pj: f64,
    pub sram_access_pj_per_bit: f64,
    pub dram_access_pj_per_bit: f64,
}

impl Default for EnergyTable {
    fn default() -> Self {
        EnergyTable {
            int_mac_pj: 0.2,
            float_mul_pj: 3.7,
            sram_access_pj_per_bit: 0.15625,
            dram_access_pj_per_bit: 7.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccelConfig {
    pub num_pes: usize,
    pub macs_per_pe: usize,
    pub weight_bits: u32,
    pub input_buffer_bytes: u64,
    pub output_buffer_bytes: u64,
    pub edge_buffer_bytes: u64,
    pub weight_buffer_bytes: u64,
    pub energy: EnergyTable,
    /// Sort update rows by bitwidth before tiling.
    pub sort_update: bool,
    /// Sort aggregation rows by in-degree before tiling.
    pub sort_aggregate: bool,
}

impl Default for AccelConfig {
    fn default() -> Self {
        AccelConfig {
            num_pes: 256,
            macs_per_pe: 16,
            weight_bits: WEIGHT_BITS as u32,
            input_buffer_bytes: 2 << 20,
            output_buffer_bytes: 2 << 20,
            edge_buffer_bytes: 256 << 10,
            weight_buffer_bytes: 256 << 10,
            energy: EnergyTable::default(),
            sort_update: true,
            sort_aggregate: true,
        }
    }
}

impl AccelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_pes == 0 || self.macs_per_pe == 0 || self.weight_bits == 0 {
            return Err(Error::Config("num_pes, macs_per_pe and weight_bits must be positive".into()));
        }
        if self.input_buffer_bytes == 0
            || self.output_buffer_bytes == 0
            || self.edge_buffer_bytes == 0
            || self.weight_buffer_bytes == 0
        {
            return Err(Error::Config("buffer sizes must be positive".into()));
        }
        self.energy.validate()
    }

    /// Parses `key = value` text on top of the defaults.
    pub fn parse(text: &str, file: &str) -> Result<Self> {
        let mut c = AccelConfig::default();
        for e in parse_kv(text, file)? {
            let v = e.value.as_str();
            match e.key.as_str() {
                "num_pes" => c.num_pes = parse_value(&e.key, v)?,
                "macs_per_pe" => c.macs_per_pe = parse_value(&e.key, v)?,
                "weight_bits" => c.weight_bits = parse_value(&e.key, v)?,
                "input_buffer_bytes" => c.input_buffer_bytes = parse_value(&e.key, v)?,
                "output_buffer_bytes" => c.output_buffer_bytes = parse_value(&e.key, v)?,
                "edge_buffer_bytes" => c.edge_buffer_bytes = parse_value(&e.key, v)?,
                "weight_buffer_bytes" => c.weight_buffer_bytes = parse_value(&e.key, v)?,
                "int_mac_pj" => c.energy.int_mac_pj = parse_value(&e.key, v)?,
                "float_mul_pj" => c.energy.float_mul_pj = parse_value(&e.key, v)?,
                "sram_access_pj_per_bit" => c.energy.sram_access_pj_per_bit = parse_value(&e.key, v)?,
                "dram_access_pj_per_bit" => c.energy.dram_access_pj_per_bit = parse_value(&e.key, v)?,
                "sort_update" => c.sort_update = parse_value(&e.key, v)?,
                "sort_aggregate" => c.sort_aggregate = parse_value(&e.key, v)?,
                k => {
                    return Err(Error::Parse {
                        file: file.to_string(),
                        line: e.line,
                        msg: format!("unknown accelerator key {k}"),
                    })
                }
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn to_text(&self) -> String {
        let e = &self.energy;
        format!(
            "num_pes = {}\nmacs_per_pe = {}\nweight_bits = {}\ninput_buffer_bytes = {}\noutput_buffer_bytes = {}\n\
             edge_buffer_bytes = {}\nweight_buffer_bytes = {}\nint_mac_pj = {}\nfloat_mul_pj = {}\n\
             sram_access_pj_per_bit = {}\ndram_access_pj_per_bit = {}\nsort_update = {}\nsort_aggregate = {}\n",
            self.num_pes,
            self.macs_per_pe,
            self.weight_bits,
            self.input_buffer_bytes,
            self.output_buffer_bytes,
            self.edge_buffer_bytes,
            self.weight_buffer_bytes,
            e.int_mac_pj,
            e.float_mul_pj,
            e.sram_access_pj_per_bit,
            e.dram_access_pj_per_bit,
            self.sort_update,
            self.sort_aggregate
        )
    }
}

impl EnergyTable {
    pub fn validate(&self) -> Result<()> {
        for (k, v) in [
            ("int_mac_pj", self.int_mac_pj),
            ("float_mul_pj", self.float_mul_pj),
            ("sram_access_pj_per_bit", self.sram_access_pj_per_bit),
            ("dram_access_pj_per_bit", self.dram_access_pj_per_bit),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("energy entry {k} must be a positive number, got {v}")));
            }
        }
        Ok(())
    }
}

/// One phase of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PhaseWork {
    /// Dense update `X · W` with per-row feature bitwidths.
    Update {
        layer: usize,
        f_in: usize,
        f_out: usize,
        bits: Vec<u32>,
        /// Bits come from a learned site; the baseline forces them to 4.
        learned: bool,
    },
    /// Neighbour accumulation. `degrees[i]` counts the terms summed into row
    /// `i`; `src_bits` is the width of the aggregated codes.
    Aggregate {
        layer: usize,
        f: usize,
        src_bits: u32,
        degrees: Vec<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Workload {
    pub num_nodes: usize,
    /// CSR entries, for edge traffic.
    pub nnz: usize,
    pub phases: Vec<PhaseWork>,
    /// Dimension-weighted mean of the learned bits, if any.
    pub avg_bits: Option<f64>,
}

impl Workload {
    pub fn validate(&self) -> Result<()> {
        for p in &self.phases {
            match p {
                PhaseWork::Update { bits, .. } => {
                    if bits.len() != self.num_nodes {
                        return Err(Error::Shape("update bits per node".into()));
                    }
                    if let Some(b) = bits.iter().find(|&&b| !(1..=32).contains(&b)) {
                        return Err(Error::InvalidParam(format!("bitwidth {b} out of range")));
                    }
                }
                PhaseWork::Aggregate { degrees, src_bits, .. } => {
                    if degrees.len() != self.num_nodes {
                        return Err(Error::Shape("aggregate degrees per node".into()));
                    }
                    if *src_bits == 0 {
                        return Err(Error::InvalidParam("aggregated codes need a positive width".into()));
                    }
                }
            }
        }
        Ok(())
    }

    /// The same workload with every learned feature bitwidth set to `bits`.
    pub fn with_uniform_bits(&self, bits: u32) -> Workload {
        let mut w = self.clone();
        for p in &mut w.phases {
            if let PhaseWork::Update {
                bits: b, learned: true, ..
            } = p
            {
                b.iter_mut().for_each(|x| *x = bits);
            }
        }
        w.avg_bits = w.avg_bits.map(|_| bits as f64);
        w
    }

    /// Builds the workload of `model` on `g`. `node_bits[s][i]` is the rounded
    /// bitwidth node `i` uses at node site `s` (see
    /// [`site_node_bits`](crate::model::site_node_bits)); `raw_bits` is
    /// the width charged for an unquantized input (its natural width if
    /// integral, 32 for float features).
    pub fn from_model(
        model: &ModelParams,
        qt: &QuantTable,
        g: &CsrGraph,
        node_bits: &[Vec<u32>],
        raw_bits: u32,
    ) -> Result<Workload> {
        let n = g.num_nodes();
        if node_bits.len() != qt.sites.len() || node_bits.iter().any(|b| b.len() != n) {
            return Err(Error::Shape("node bits do not match table and graph".into()));
        }
        let mut phases = Vec::new();
        for (l, layer) in model.layers.iter().enumerate() {
            match layer {
                Layer::Gcn(gl) => {
                    let (bits, learned) = match qt.site_index(l, SiteSlot::GcnInput) {
                        Some(s) => (node_bits[s].clone(), true),
                        None => (vec![raw_bits; n], false),
                    };
                    phases.push(PhaseWork::Update {
                        layer: l,
                        f_in: gl.lin.fan_in(),
                        f_out: gl.lin.fan_out(),
                        bits,
                        learned,
                    });
                    phases.push(PhaseWork::Aggregate {
                        layer: l,
                        f: gl.lin.fan_out(),
                        src_bits: WEIGHT_BITS as u32,
                        degrees: g.degrees(),
                    });
                }
                Layer::Gin(gl) => {
                    let src_bits = if gl.in_quant.is_some() { WEIGHT_BITS as u32 } else { raw_bits };
                    let degrees = (0..n)
                        .map(|i| g.neighbors(i).iter().filter(|&&j| j != i).count() + 1)
                        .collect();
                    phases.push(PhaseWork::Aggregate {
                        layer: l,
                        f: gl.lin1.fan_in(),
                        src_bits,
                        degrees,
                    });
                    for (slot, lin) in [(SiteSlot::GinPreMlp, &gl.lin1), (SiteSlot::GinMid, &gl.lin2)] {
                        let s = qt
                            .site_index(l, slot)
                            .ok_or_else(|| Error::Shape("missing GIN node site".into()))?;
                        phases.push(PhaseWork::Update {
                            layer: l,
                            f_in: lin.fan_in(),
                            f_out: lin.fan_out(),
                            bits: node_bits[s].clone(),
                            learned: true,
                        });
                    }
                }
            }
        }
        let dims: Vec<usize> = qt.sites.iter().map(|s| s.spec.dim).collect();
        let w = Workload {
            num_nodes: n,
            nnz: g.nnz(),
            phases,
            avg_bits: crate::report::avg_bits(node_bits, &dims).ok(),
        };
        w.validate()?;
        Ok(w)
    }
}

/// Natural width of an integral input: magnitude bits plus a sign bit if
/// any value is negative. `None` if the input is not integral.
pub fn raw_input_bits(x0: &NodeFeatures) -> Option<u32> {
    crate::runtime::FixedMatrix::from_integral(x0.data())
        .ok()
        .map(|m| m.bits.first().copied().unwrap_or(1))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tile {
    pub rows: Vec<usize>,
    /// Largest scheduling key (bits or degree) in the tile.
    pub max_key: usize,
}

/// Groups rows into tiles of `tile_size`, optionally after a stable sort by
/// descending key.
pub fn schedule_tiles(keys: &[usize], tile_size: usize, sort: bool) -> Vec<Tile> {
    let mut order: Vec<usize> = (0..keys.len()).collect();
    if sort {
        order.sort_by(|&a, &b| keys[b].cmp(&keys[a]).then(a.cmp(&b)));
    }
    order
        .chunks(tile_size.max(1))
        .map(|c| Tile {
            rows: c.to_vec(),
            max_key: c.iter().map(|&i| keys[i]).max().unwrap_or(0),
        })
        .collect()
}

pub fn cycles_update(max_bits: u32, f_in: usize, f_out: usize, macs_per_pe: usize) -> u64 {
    (f_in.div_ceil(macs_per_pe) as u64) * max_bits as u64 * f_out as u64
}

pub fn cycles_aggregate(max_degree: usize, f: usize, macs_per_pe: usize) -> u64 {
    max_degree as u64 * f.div_ceil(macs_per_pe) as u64
}

/// Counts that energy is a linear function of.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ActivityCounts {
    pub int_ops: u64,
    pub float_ops: u64,
    pub sram_bits: u64,
    pub dram_bits: u64,
}

pub fn energy_estimate(c: &ActivityCounts, e: &EnergyTable) -> Result<f64> {
    e.validate()?;
    Ok(c.int_ops as f64 * e.int_mac_pj
        + c.float_ops as f64 * e.float_mul_pj
        + c.sram_bits as f64 * e.sram_access_pj_per_bit
        + c.dram_bits as f64 * e.dram_access_pj_per_bit)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseReport {
    pub layer: usize,
    pub kind: String,
    pub tiles: usize,
    pub cycles: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleReport {
    pub cycles_update: u64,
    pub cycles_aggregate: u64,
    pub total_cycles: u64,
    pub baseline_cycles: u64,
    pub dram_bits: u64,
    pub sram_bits: u64,
    pub spill_bits: u64,
    pub counts: ActivityCounts,
    /// Relative to the configured energy table.
    pub energy_pj: f64,
    pub speedup_vs_int4: f64,
    pub avg_bits: Option<f64>,
    pub phases: Vec<PhaseReport>,
}

struct Totals {
    update: u64,
    aggregate: u64,
    counts: ActivityCounts,
    spill: u64,
    phases: Vec<PhaseReport>,
}

fn run(w: &Workload, cfg: &AccelConfig) -> Totals {
    let n = w.num_nodes as u64;
    let mut t = Totals {
        update: 0,
        aggregate: 0,
        counts: ActivityCounts::default(),
        spill: 0,
        phases: Vec::new(),
    };
    let in_buffer_bits = cfg.input_buffer_bytes * 8;
    let mut loaded_layer = None;
    for p in &w.phases {
        match p {
            PhaseWork::Update {
                layer,
                f_in,
                f_out,
                bits,
                ..
            } => {
                let keys: Vec<usize> = bits.iter().map(|&b| b as usize).collect();
                let tiles = schedule_tiles(&keys, cfg.num_pes, cfg.sort_update);
                let mut cycles = 0;
                let mut resident = 0u64;
                for tile in &tiles {
                    cycles += cycles_update(tile.max_key as u32, *f_in, *f_out, cfg.macs_per_pe);
                    let tile_bits: u64 = tile.rows.iter().map(|&i| bits[i] as u64 * *f_in as u64).sum();
                    resident += tile_bits;
                    if resident > in_buffer_bits {
                        t.spill += 2 * tile_bits;
                    }
                }
                let feat_bits: u64 = bits.iter().map(|&b| b as u64 * *f_in as u64).sum();
                let weight_bits = (*f_in * *f_out) as u64 * cfg.weight_bits as u64;
                t.counts.dram_bits += weight_bits;
                if loaded_layer != Some(*layer) {
                    t.counts.dram_bits += feat_bits;
                    loaded_layer = Some(*layer);
                }
                t.counts.sram_bits += feat_bits + weight_bits + n * *f_out as u64 * 32;
                t.counts.int_ops += n * (*f_in * *f_out) as u64;
                t.counts.float_ops += n * *f_out as u64;
                t.update += cycles;
                t.phases.push(PhaseReport {
                    layer: *layer,
                    kind: "update".into(),
                    tiles: tiles.len(),
                    cycles,
                });
            }
            PhaseWork::Aggregate {
                layer,
                f,
                src_bits,
                degrees,
            } => {
                let tiles = schedule_tiles(degrees, cfg.num_pes, cfg.sort_aggregate);
                let cycles: u64 = tiles
                    .iter()
                    .map(|tile| cycles_aggregate(tile.max_key, *f, cfg.macs_per_pe))
                    .sum();
                let terms: u64 = degrees.iter().map(|&d| d as u64).sum();
                let edge_bits = 32 * (w.nnz as u64 + n + 1);
                t.counts.dram_bits += edge_bits;
                if loaded_layer != Some(*layer) {
                    t.counts.dram_bits += n * *f as u64 * *src_bits as u64;
                    loaded_layer = Some(*layer);
                }
                t.counts.sram_bits += terms * *f as u64 * *src_bits as u64 + edge_bits + n * *f as u64 * 32;
                t.counts.int_ops += terms * *f as u64;
                t.counts.float_ops += n * *f as u64;
                t.aggregate += cycles;
                t.phases.push(PhaseReport {
                    layer: *layer,
                    kind: "aggregate".into(),
                    tiles: tiles.len(),
                    cycles,
                });
            }
        }
    }
    t.counts.dram_bits += t.spill;
    t
}

/// Runs the model on `w` and on the same workload with learned bits forced
/// to 4.
pub fn simulate(w: &Workload, cfg: &AccelConfig) -> Result<CycleReport> {
    cfg.validate()?;
    w.validate()?;
    let t = run(w, cfg);
    let base = run(&w.with_uniform_bits(4), cfg);
    let total = t.update + t.aggregate;
    let baseline = base.update + base.aggregate;
    let speedup = if total == 0 { 1.0 } else { baseline as f64 / total as f64 };
    Ok(CycleReport {
        cycles_update: t.update,
        cycles_aggregate: t.aggregate,
        total_cycles: total,
        baseline_cycles: baseline,
        dram_bits: t.counts.dram_bits,
        sram_bits: t.counts.sram_bits,
        spill_bits: t.spill,
        counts: t.counts,
        energy_pj: energy_estimate(&t.counts, &cfg.energy)?,
        speedup_vs_int4: speedup,
        avg_bits: w.avg_bits,
        phases: t.phases,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tile_examples() {
        assert_eq!(schedule_tiles(&vec![4; 256], 256, true).len(), 1);
        let mut bits = vec![2; 512];
        bits[300] = 8;
        let tiles = schedule_tiles(&bits, 256, true);
        assert_eq!(tiles.iter().map(|t| t.max_key).collect::<Vec<_>>(), vec![8, 2]);
        assert_eq!(tiles[0].rows[0], 300);
        let natural = schedule_tiles(&bits, 256, false);
        assert_eq!(natural[0].rows, (0..256).collect::<Vec<_>>());
        assert_eq!(natural[1].max_key, 8);
    }

    #[test]
    fn cycle_examples() {
        assert_eq!(cycles_update(4, 16, 1, 16), 4);
        assert_eq!(cycles_update(8, 16, 1, 16), 8);
        assert_eq!(cycles_update(8, 0, 5, 16), 0);
        assert_eq!(cycles_aggregate(1, 16, 16), 1);
        assert_eq!(cycles_aggregate(10, 40, 16), 30);
    }

    #[test]
    fn energy_is_linear() {
        let e = EnergyTable::default();
        assert_eq!(energy_estimate(&ActivityCounts::default(), &e).unwrap(), 0.0);
        let c = ActivityCounts {
            int_ops: 10,
            float_ops: 3,
            sram_bits: 100,
            dram_bits: 7,
        };
        let d = ActivityCounts {
            int_ops: 20,
            float_ops: 6,
            sram_bits: 200,
            dram_bits: 14,
        };
        let (a, b) = (energy_estimate(&c, &e).unwrap(), energy_estimate(&d, &e).unwrap());
        assert!((b - 2.0 * a).abs() < 1e-9);
        assert!((e.float_mul_pj / e.int_mac_pj - 18.5).abs() < 1e-9);
        let bad = EnergyTable {
            dram_access_pj_per_bit: f64::NAN,
            ..e
        };
        assert!(energy_estimate(&c, &bad).is_err());
    }

    #[test]
    fn config_round_trip() {
        let c = AccelConfig {
            num_pes: 64,
            sort_aggregate: false,
            ..AccelConfig::default()
        };
        assert_eq!(AccelConfig::parse(&c.to_text(), "t").unwrap(), c);
        assert!(AccelConfig::parse("bogus = 1\n", "t").is_err());
        assert!(AccelConfig::parse("num_pes = 0\n", "t").is_err());
        assert!(AccelConfig::parse("float_mul_pj = -1\n", "t").is_err());
    }

    fn update_only(bits: Vec<u32>, f_in: usize, f_out: usize) -> Workload {
        Workload {
            num_nodes: bits.len(),
            nnz: 0,
            phases: vec![PhaseWork::Update {
                layer: 0,
                f_in,
                f_out,
                bits,
                learned: true,
            }],
            avg_bits: None,
        }
    }

    #[test]
    fn self_baseline_and_halving() {
        let cfg = AccelConfig::default();
        let r = simulate(&update_only(vec![4; 1000], 64, 8), &cfg).unwrap();
        assert_eq!(r.speedup_vs_int4, 1.0);
        assert_eq!(r.total_cycles, r.baseline_cycles);
        let r = simulate(&update_only(vec![2; 1000], 64, 8), &cfg).unwrap();
        assert_eq!(r.speedup_vs_int4, 2.0);
    }
}
