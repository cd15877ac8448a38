//! Small numeric helpers shared across modules.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::quant::STEP_MIN;

pub const STEP_INIT_MEAN: f64 = 0.01;
pub const STEP_INIT_STD: f64 = 0.01;

/// Draws a step size from N(0.01, 0.01) truncated to `>= STEP_MIN` by
/// rejection.
pub fn init_step<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let d = Normal::new(STEP_INIT_MEAN, STEP_INIT_STD).expect("valid normal");
    loop {
        let s = d.sample(rng);
        if s >= STEP_MIN {
            return s;
        }
    }
}

/// Order-independent exact accumulator. Values are rounded once to a
/// multiple of 2^-64 and summed in 128-bit integers, so the sum of any
/// partition of a set of values equals the sum of the whole set.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ExactSum(i128);

const FIXED_SCALE: f64 = 18446744073709551616.0; // 2^64

impl ExactSum {
    pub fn to_fixed(v: f64) -> i128 {
        debug_assert!(v.is_finite() && v.abs() < 4.0e18);
        (v * FIXED_SCALE).round() as i128
    }

    pub fn add(&mut self, v: f64) {
        self.0 += Self::to_fixed(v);
    }

    pub fn add_fixed(&mut self, v: i128) {
        self.0 += v;
    }

    pub fn raw(&self) -> i128 {
        self.0
    }

    pub fn value(&self) -> f64 {
        self.0 as f64 / FIXED_SCALE
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Average ranks with ties sharing the mean rank.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation. Returns 0 when either input is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

/// One `key = value` entry with its 1-based line number.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KvEntry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

/// Parses `key = value` text. `#` starts a comment; blank lines are skipped;
/// repeated keys are an error.
pub fn parse_kv(text: &str, file: &str) -> crate::Result<Vec<KvEntry>> {
    let mut out: Vec<KvEntry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| crate::Error::Parse {
            file: file.to_string(),
            line: i + 1,
            msg,
        };
        let (k, v) = line.split_once('=').ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(err("empty key".into()));
        }
        if out.iter().any(|e| e.key == k) {
            return Err(err(format!("duplicate key {k}")));
        }
        out.push(KvEntry {
            key: k.to_string(),
            value: v.to_string(),
            line: i + 1,
        });
    }
    Ok(out)
}

/// Parses a config value, mapping failures to a config error naming the key.
pub fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> crate::Result<T> {
    value
        .parse()
        .map_err(|_| crate::Error::Config(format!("invalid value {value:?} for {key}")))
}
