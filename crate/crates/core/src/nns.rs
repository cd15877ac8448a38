//! Nearest-neighbour parameter banks.
//!
//! A bank holds `m` quantizer groups. Each node picks the group whose
//! maximum quantization value `q_max` is closest to the node's largest
//! absolute feature. Ties go to the smaller `q_max`, then to the smaller
//! group index.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{QuantGrad, QuantParam, Signedness};
use crate::util::{init_step, ExactSum};

pub const DEFAULT_GROUPS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBank {
    pub groups: Vec<QuantParam>,
    sorted_qmax: Vec<f64>,
    perm: Vec<usize>,
}

/// Per-node group indices for one forward pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment(pub Vec<usize>);

impl ParamBank {
    pub fn init(m: usize, signedness: Signedness, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init_with(m, signedness, &mut rng)
    }

    pub fn init_with<R: rand::Rng + ?Sized>(m: usize, signedness: Signedness, rng: &mut R) -> Result<Self> {
        if m == 0 {
            return Err(Error::InvalidParam("bank needs at least one group".into()));
        }
        let groups = (0..m)
            .map(|_| QuantParam::new(init_step(rng), 4.0, signedness))
            .collect();
        Ok(Self::from_groups(groups))
    }

    pub fn from_groups(groups: Vec<QuantParam>) -> Self {
        let mut bank = ParamBank {
            groups,
            sorted_qmax: Vec::new(),
            perm: Vec::new(),
        };
        bank.refresh();
        bank
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn sorted_qmax(&self) -> &[f64] {
        &self.sorted_qmax
    }

    pub fn permutation(&self) -> &[usize] {
        &self.perm
    }

    /// Rebuilds the sorted key array. Call after every parameter update.
    pub fn refresh(&mut self) {
        let q: Vec<f64> = self.groups.iter().map(QuantParam::q_max).collect();
        let mut perm: Vec<usize> = (0..q.len()).collect();
        perm.sort_by(|&a, &b| q[a].total_cmp(&q[b]).then(a.cmp(&b)));
        self.sorted_qmax = perm.iter().map(|&k| q[k]).collect();
        self.perm = perm;
    }

    /// Group index for one node's max-abs feature `f`.
    pub fn select_one(&self, f: f64) -> usize {
        let q = &self.sorted_qmax;
        let hi = q.partition_point(|&v| v < f);
        if hi == 0 {
            return self.perm[0];
        }
        // first entry of the run of equal values below f
        let lo_val = q[hi - 1];
        let lo = q[..hi].partition_point(|&v| v < lo_val);
        if hi == q.len() {
            return self.perm[lo];
        }
        if (f - lo_val).abs() <= (f - q[hi]).abs() {
            self.perm[lo]
        } else {
            self.perm[hi]
        }
    }

    /// Selects a group for every row of a row-major `n x d` matrix.
    pub fn select(&self, x: ndarray::ArrayView2<f64>) -> Assignment {
        Assignment(
            x.rows()
                .into_iter()
                .map(|r| self.select_one(r.iter().fold(0.0f64, |m, v| m.max(v.abs()))))
                .collect(),
        )
    }
}

/// Reference selection by linear scan over all groups.
pub fn select_brute_force(groups: &[QuantParam], f: f64) -> usize {
    let mut best = 0;
    for k in 1..groups.len() {
        let (dk, db) = ((f - groups[k].q_max()).abs(), (f - groups[best].q_max()).abs());
        let (qk, qb) = (groups[k].q_max(), groups[best].q_max());
        if dk < db || (dk == db && qk < qb) {
            best = k;
        }
    }
    best
}

/// Group gradient sums held exactly in fixed point.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GroupGradSums {
    pub d_step: Vec<ExactSum>,
    pub d_bits: Vec<ExactSum>,
}

impl GroupGradSums {
    pub fn to_grads(&self) -> Vec<QuantGrad> {
        self.d_step
            .iter()
            .zip(&self.d_bits)
            .map(|(s, b)| QuantGrad {
                d_step: s.value(),
                d_bits: b.value(),
            })
            .collect()
    }
}

/// Sums per-node gradients into their groups. No averaging.
pub fn accumulate_group_grads(assignment: &Assignment, grads: &[QuantGrad], m: usize) -> Result<GroupGradSums> {
    if assignment.0.len() != grads.len() {
        return Err(Error::Shape(format!(
            "{} assignments vs {} gradients",
            assignment.0.len(),
            grads.len()
        )));
    }
    let mut out = GroupGradSums {
        d_step: vec![ExactSum::default(); m],
        d_bits: vec![ExactSum::default(); m],
    };
    for (&k, g) in assignment.0.iter().zip(grads) {
        if k >= m {
            return Err(Error::InvalidParam(format!("group {k} out of range for bank of {m}")));
        }
        out.d_step[k].add(g.d_step);
        out.d_bits[k].add(g.d_bits);
    }
    Ok(out)
}
