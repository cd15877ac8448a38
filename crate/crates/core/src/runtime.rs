//! Integer inference.
//!
//! Matrix products and neighbour sums run on integer codes in `i64`
//! accumulators. Each of them is followed by exactly one elementwise float
//! pass (the epilogue) that applies the fused scales, folded BN and bias,
//! the ReLU, and re-quantizes to the codes of the next site.
//!
//! An unquantized first layer runs its update (GCN) or aggregation (GIN) in
//! float when the raw input is not integral, exactly as the float path does;
//! integer arithmetic starts at the first quantization site.
//!
//! The adjacency itself is never quantized: aggregation only adds codes
//! along CSR rows, and the `D^-1/2` factors are folded into the epilogues
//! on either side.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{CsrGraph, NodeFeatures};
use crate::model::linalg::matmul;
use crate::model::{Layer, ModelParams, QuantTable, SiteParams, SiteSlot};
use crate::nns::ParamBank;
use crate::quant::{quantize_scalar, QuantParam, Signedness};

/// Scale axis of a [`FixedMatrix`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Scales {
    /// One step per row (node features, `diag(S_X) · X̄`).
    Rows(Vec<f64>),
    /// One step per column (weights, `W̄ · diag(S_W)`).
    Cols(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedMatrix {
    pub codes: Array2<i64>,
    pub scales: Scales,
    /// Bitwidth per scale line.
    pub bits: Vec<u32>,
    pub signedness: Signedness,
}

impl FixedMatrix {
    fn quantize(x: &Array2<f64>, params: &[QuantParam], rows: bool) -> Result<Self> {
        let expect = if rows { x.nrows() } else { x.ncols() };
        if params.len() != expect {
            return Err(Error::Shape(format!("{} quantizers for {expect} lines", params.len())));
        }
        let signedness = params.first().map_or(Signedness::Signed, |p| p.signedness);
        let mut codes = Array2::zeros(x.dim());
        for ((i, j), &v) in x.indexed_iter() {
            let p = &params[if rows { i } else { j }];
            if p.signedness == Signedness::Unsigned && v < 0.0 {
                return Err(Error::NegativeUnsigned(v));
            }
            codes[[i, j]] = quantize_scalar(v, p).0;
        }
        let steps = params.iter().map(|p| p.step).collect();
        Ok(FixedMatrix {
            codes,
            scales: if rows { Scales::Rows(steps) } else { Scales::Cols(steps) },
            bits: params.iter().map(QuantParam::rounded_bits).collect(),
            signedness,
        })
    }

    pub fn quantize_rows(x: &Array2<f64>, params: &[QuantParam]) -> Result<Self> {
        Self::quantize(x, params, true)
    }

    pub fn quantize_cols(x: &Array2<f64>, params: &[QuantParam]) -> Result<Self> {
        Self::quantize(x, params, false)
    }

    /// Integral input taken as codes with step 1 per column.
    pub fn from_integral(x: &Array2<f64>) -> Result<Self> {
        let mut codes = Array2::zeros(x.dim());
        let mut max_abs = 0i64;
        let mut any_negative = false;
        for ((i, j), &v) in x.indexed_iter() {
            if v.fract() != 0.0 || v.abs() > (1u64 << 31) as f64 {
                return Err(Error::InvalidParam(format!(
                    "unquantized first-layer input must be integral, found {v}"
                )));
            }
            codes[[i, j]] = v as i64;
            max_abs = max_abs.max(v.abs() as i64);
            any_negative |= v < 0.0;
        }
        let mag_bits = 64 - max_abs.leading_zeros();
        let (signedness, bits) = if any_negative {
            (Signedness::Signed, mag_bits + 1)
        } else {
            (Signedness::Unsigned, mag_bits.max(1))
        };
        Ok(FixedMatrix {
            codes,
            scales: Scales::Cols(vec![1.0; x.ncols()]),
            bits: vec![bits; x.ncols()],
            signedness,
        })
    }

    pub fn dequantize(&self) -> Array2<f64> {
        let mut out = self.codes.mapv(|c| c as f64);
        for ((i, j), v) in out.indexed_iter_mut() {
            *v *= match &self.scales {
                Scales::Rows(s) => s[i],
                Scales::Cols(s) => s[j],
            };
        }
        out
    }

    fn row_scale(&self, i: usize) -> f64 {
        match &self.scales {
            Scales::Rows(s) => s[i],
            Scales::Cols(_) => 1.0,
        }
    }

    fn col_scale(&self, j: usize) -> f64 {
        match &self.scales {
            Scales::Rows(_) => 1.0,
            Scales::Cols(s) => s[j],
        }
    }
}

/// `X̄ · W̄` in 64-bit integers. Fails if the worst-case dot product could
/// overflow.
pub fn int_matmul(x: &Array2<i64>, w: &Array2<i64>) -> Result<Array2<i64>> {
    let (n, k) = x.dim();
    if w.nrows() != k {
        return Err(Error::Shape(format!("inner dims {k} vs {}", w.nrows())));
    }
    let mx = x.iter().fold(0i64, |m, c| m.max(c.abs())) as i128;
    let mw = w.iter().fold(0i64, |m, c| m.max(c.abs())) as i128;
    if mx * mw * k as i128 > i64::MAX as i128 {
        return Err(Error::Overflow("update matmul"));
    }
    let m = w.ncols();
    let mut out = Array2::<i64>::zeros((n, m));
    for i in 0..n {
        for kk in 0..k {
            let a = x[[i, kk]];
            if a != 0 {
                for j in 0..m {
                    out[[i, j]] += a * w[[kk, j]];
                }
            }
        }
    }
    Ok(out)
}

/// Integer neighbour sums over CSR rows, optionally skipping the self-loop.
pub fn int_neighbor_sum(g: &CsrGraph, codes: &Array2<i64>, include_self: bool) -> Result<Array2<i64>> {
    let n = g.num_nodes();
    if codes.nrows() != n {
        return Err(Error::Shape(format!("{} code rows for {n} nodes", codes.nrows())));
    }
    let max_deg = (0..n).map(|i| g.degree(i)).max().unwrap_or(0) as i128;
    let mc = codes.iter().fold(0i64, |m, c| m.max(c.abs())) as i128;
    if mc * max_deg > i64::MAX as i128 {
        return Err(Error::Overflow("aggregation"));
    }
    let mut out = Array2::<i64>::zeros(codes.dim());
    for i in 0..n {
        for &j in g.neighbors(i) {
            if include_self || j != i {
                for f in 0..codes.ncols() {
                    out[[i, f]] += codes[[j, f]];
                }
            }
        }
    }
    Ok(out)
}

/// Where an epilogue sends its values.
#[derive(Debug, Clone, Copy)]
pub enum Requant<'a> {
    Rows(&'a [QuantParam]),
    Cols(&'a [QuantParam]),
    /// Select a bank group per row from the row's max-abs value, then
    /// quantize with it.
    Bank(&'a ParamBank),
    Float,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EpilogueOut {
    Fixed(FixedMatrix, Option<Vec<usize>>),
    Float(Array2<f64>),
}

/// The single elementwise float pass after an integer kernel:
///
/// ```text
/// v_ij = acc_ij · row_i · col_j + off_j,  then ReLU, then re-quantize
/// ```
#[derive(Debug, Clone, Default)]
pub struct Epilogue {
    pub row_mult: Vec<f64>,
    pub col_mult: Vec<f64>,
    pub col_off: Option<Vec<f64>>,
    pub relu: bool,
}

impl Epilogue {
    pub fn apply(&self, acc: &Array2<i64>, next: Requant<'_>) -> Result<EpilogueOut> {
        let (n, f) = acc.dim();
        if self.row_mult.len() != n || self.col_mult.len() != f {
            return Err(Error::Shape("epilogue scale lengths".into()));
        }
        let mut v = Array2::zeros((n, f));
        for ((i, j), o) in v.indexed_iter_mut() {
            let mut x = acc[[i, j]] as f64 * self.row_mult[i] * self.col_mult[j];
            if let Some(off) = &self.col_off {
                x += off[j];
            }
            if self.relu && x < 0.0 {
                x = 0.0;
            }
            *o = x;
        }
        Ok(match next {
            Requant::Float => EpilogueOut::Float(v),
            Requant::Rows(p) => EpilogueOut::Fixed(FixedMatrix::quantize_rows(&v, p)?, None),
            Requant::Cols(p) => EpilogueOut::Fixed(FixedMatrix::quantize_cols(&v, p)?, None),
            Requant::Bank(bank) => {
                let sel = bank.select(v.view()).0;
                let params: Vec<QuantParam> = sel.iter().map(|&k| bank.groups[k]).collect();
                EpilogueOut::Fixed(FixedMatrix::quantize_rows(&v, &params)?, Some(sel))
            }
        })
    }
}

/// Update step with the fused rank-1 rescale `s_X ⊗ s_W`, re-quantized with
/// per-row next-site parameters.
pub fn fuse_update(x: &FixedMatrix, w: &FixedMatrix, next: &[QuantParam]) -> Result<FixedMatrix> {
    let (Scales::Rows(sx), Scales::Cols(sw)) = (&x.scales, &w.scales) else {
        return Err(Error::InvalidParam("fuse_update needs row-scaled X and column-scaled W".into()));
    };
    if next.iter().any(|p| !(p.step > 0.0)) {
        return Err(Error::InvalidParam("next step must be positive".into()));
    }
    let acc = int_matmul(&x.codes, &w.codes)?;
    let ep = Epilogue {
        row_mult: sx.clone(),
        col_mult: sw.clone(),
        col_off: None,
        relu: false,
    };
    match ep.apply(&acc, Requant::Rows(next))? {
        EpilogueOut::Fixed(m, _) => Ok(m),
        EpilogueOut::Float(_) => unreachable!("row requantization"),
    }
}

/// Normalized aggregation `D^-1/2 Ã` on column-scaled codes whose right-side
/// `D^-1/2` was already folded in by the producer. `fused_norm` carries the
/// left-side `d_i^-1/2` per row.
pub fn int_aggregate(g: &CsrGraph, b: &FixedMatrix, fused_norm: &[f64], next: Requant<'_>) -> Result<EpilogueOut> {
    let Scales::Cols(sb) = &b.scales else {
        return Err(Error::InvalidParam("aggregation input must share one step per column".into()));
    };
    let acc = int_neighbor_sum(g, &b.codes, true)?;
    Epilogue {
        row_mult: fused_norm.to_vec(),
        col_mult: sb.clone(),
        col_off: None,
        relu: false,
    }
    .apply(&acc, next)
}

/// Folds a frozen BN affine `(γ, θ)` into the re-quantization for the next
/// step: returns multiplier `γ / s` and offset `θ / s` per channel.
pub fn fold_bn(gamma: &[f64], theta: &[f64], next_step: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if next_step == 0.0 || !next_step.is_finite() {
        return Err(Error::InvalidParam("next step must be non-zero".into()));
    }
    if gamma.len() != theta.len() {
        return Err(Error::Shape("gamma and theta lengths differ".into()));
    }
    Ok((
        gamma.iter().map(|g| g / next_step).collect(),
        theta.iter().map(|t| t / next_step).collect(),
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntForward {
    pub logits: Array2<f64>,
    /// Codes at every node site, aligned with `QuantTable::sites`.
    pub site_codes: Vec<Array2<i64>>,
    /// Codes at each layer's column site, if it has one.
    pub column_codes: Vec<Option<Array2<i64>>>,
    pub assignments: Vec<Option<Vec<usize>>>,
}

fn requant_for<'a>(qt: &'a QuantTable, idx: usize, n: usize, buf: &'a mut Vec<QuantParam>) -> Result<Requant<'a>> {
    Ok(match &qt.sites[idx].params {
        SiteParams::PerNode(v) => {
            if v.len() != n {
                return Err(Error::Shape(format!("per-node table of {} for {n} nodes", v.len())));
            }
            Requant::Rows(v)
        }
        SiteParams::Shared(p) => {
            *buf = vec![*p; n];
            Requant::Rows(buf)
        }
        SiteParams::Bank(b) => Requant::Bank(b),
    })
}

fn expect_fixed(out: EpilogueOut) -> (FixedMatrix, Option<Vec<usize>>) {
    match out {
        EpilogueOut::Fixed(m, a) => (m, a),
        EpilogueOut::Float(_) => unreachable!("requantizing epilogue"),
    }
}

fn col_steps(m: &FixedMatrix) -> Vec<f64> {
    (0..m.codes.ncols()).map(|j| m.col_scale(j)).collect()
}

fn row_steps(m: &FixedMatrix) -> Vec<f64> {
    (0..m.codes.nrows()).map(|i| m.row_scale(i)).collect()
}

/// Runs the whole network on integer codes.
pub fn int_forward(model: &ModelParams, qt: &QuantTable, g: &CsrGraph, x0: &NodeFeatures) -> Result<IntForward> {
    let n = g.num_nodes();
    if x0.num_nodes() != n || x0.dim() != model.config.in_dim {
        return Err(Error::Shape("input does not match graph and model".into()));
    }
    qt.check(model, n)?;
    let nl = model.layers.len();
    let mut site_codes: Vec<Option<Array2<i64>>> = vec![None; qt.sites.len()];
    let mut assignments = vec![None; qt.sites.len()];
    let mut column_codes = vec![None; nl];
    let mut buf = Vec::new();
    let mut logits = None;

    match model.config.arch {
        crate::model::Arch::Gcn => {
            let c = crate::graph::norm_coeffs(g)?.inv_sqrt_deg;
            // layer input: row-scaled node-site codes, raw integral codes, or
            // raw float features for an unquantized first layer
            let mut x: Option<FixedMatrix> = match qt.site_index(0, SiteSlot::GcnInput) {
                Some(idx) => {
                    let req = requant_for(qt, idx, n, &mut buf)?;
                    let out = match req {
                        Requant::Rows(p) => FixedMatrix::quantize_rows(x0.data(), p)?,
                        Requant::Bank(b) => {
                            let sel = b.select(x0.data().view()).0;
                            let params: Vec<QuantParam> = sel.iter().map(|&k| b.groups[k]).collect();
                            assignments[idx] = Some(sel);
                            FixedMatrix::quantize_rows(x0.data(), &params)?
                        }
                        _ => unreachable!(),
                    };
                    site_codes[idx] = Some(out.codes.clone());
                    Some(out)
                }
                None => FixedMatrix::from_integral(x0.data()).ok(),
            };
            for (l, layer) in model.layers.iter().enumerate() {
                let Layer::Gcn(gl) = layer else {
                    return Err(Error::Shape("mixed layer kinds".into()));
                };
                let last = l + 1 == nl;
                let w = FixedMatrix::quantize_cols(&gl.lin.w, &gl.lin.w_quant)?;
                let b = match x.take() {
                    Some(x) => {
                        if col_steps(&x).iter().any(|&s| s != 1.0) {
                            return Err(Error::InvalidParam("column-scaled GCN input is not supported".into()));
                        }
                        let acc = int_matmul(&x.codes, &w.codes)?;
                        // right-side D^-1/2 folded into the producer's rescale
                        let row_mult: Vec<f64> = row_steps(&x).iter().zip(&c).map(|(s, ci)| s * ci).collect();
                        let ep = Epilogue {
                            row_mult,
                            col_mult: col_steps(&w),
                            col_off: None,
                            relu: false,
                        };
                        expect_fixed(ep.apply(&acc, Requant::Cols(&gl.agg_quant))?).0
                    }
                    None => {
                        // unquantized first layer: float update, as in the float path
                        let mut p = matmul(x0.data(), &w.dequantize());
                        for (i, mut row) in p.rows_mut().into_iter().enumerate() {
                            row *= c[i];
                        }
                        FixedMatrix::quantize_cols(&p, &gl.agg_quant)?
                    }
                };
                column_codes[l] = Some(b.codes.clone());
                let acc = int_neighbor_sum(g, &b.codes, true)?;
                let ep = Epilogue {
                    row_mult: c.clone(),
                    col_mult: col_steps(&b),
                    col_off: Some(gl.lin.b.to_vec()),
                    relu: !last,
                };
                if last {
                    let EpilogueOut::Float(v) = ep.apply(&acc, Requant::Float)? else { unreachable!() };
                    logits = Some(v);
                } else {
                    let idx = qt
                        .site_index(l + 1, SiteSlot::GcnInput)
                        .ok_or_else(|| Error::Shape("missing hidden node site".into()))?;
                    let req = requant_for(qt, idx, n, &mut buf)?;
                    let (m, a) = expect_fixed(ep.apply(&acc, req)?);
                    site_codes[idx] = Some(m.codes.clone());
                    assignments[idx] = a;
                    x = Some(m);
                }
            }
        }
        crate::model::Arch::Gin => {
            let mut x: Option<FixedMatrix> = None;
            for (l, layer) in model.layers.iter().enumerate() {
                let Layer::Gin(gl) = layer else {
                    return Err(Error::Shape("mixed layer kinds".into()));
                };
                let last = l + 1 == nl;
                let xc = match x.take() {
                    Some(m) => Some(m),
                    None => match &gl.in_quant {
                        Some(q) => Some(FixedMatrix::quantize_cols(x0.data(), q)?),
                        None => FixedMatrix::from_integral(x0.data()).ok(),
                    },
                };
                let h = match &xc {
                    Some(xc) => {
                        if gl.in_quant.is_some() {
                            column_codes[l] = Some(xc.codes.clone());
                        }
                        // (1+ε) x_i + Σ_{j≠i} x_j: integer neighbour sum, ε applied in the pass
                        let nsum = int_neighbor_sum(g, &xc.codes, false)?;
                        let sx = col_steps(xc);
                        let mut h = Array2::zeros(nsum.dim());
                        for ((i, j), o) in h.indexed_iter_mut() {
                            *o = sx[j] * ((1.0 + gl.eps) * xc.codes[[i, j]] as f64 + nsum[[i, j]] as f64);
                        }
                        h
                    }
                    None => {
                        let mut h = x0.data().mapv(|v| v * (1.0 + gl.eps));
                        for i in 0..n {
                            let mut row = h.row_mut(i);
                            for &j in g.neighbors(i) {
                                if j != i {
                                    row += &x0.data().row(j);
                                }
                            }
                        }
                        h
                    }
                };
                let ia = qt
                    .site_index(l, SiteSlot::GinPreMlp)
                    .ok_or_else(|| Error::Shape("missing GIN node site".into()))?;
                let hc = match requant_for(qt, ia, n, &mut buf)? {
                    Requant::Rows(p) => FixedMatrix::quantize_rows(&h, p)?,
                    Requant::Bank(b) => {
                        let sel = b.select(h.view()).0;
                        let params: Vec<QuantParam> = sel.iter().map(|&k| b.groups[k]).collect();
                        assignments[ia] = Some(sel);
                        FixedMatrix::quantize_rows(&h, &params)?
                    }
                    _ => unreachable!(),
                };
                site_codes[ia] = Some(hc.codes.clone());

                // Lin1 + BN + bias folded into one per-channel affine
                let w1 = FixedMatrix::quantize_cols(&gl.lin1.w, &gl.lin1.w_quant)?;
                let acc = int_matmul(&hc.codes, &w1.codes)?;
                let f1 = w1.codes.ncols();
                let (mult, off) = match &gl.bn {
                    Some(bn) => {
                        let (scale, shift) = bn.affine();
                        let off: Vec<f64> = (0..f1).map(|j| shift[j] + scale[j] * gl.lin1.b[j]).collect();
                        ((0..f1).map(|j| w1.col_scale(j) * scale[j]).collect::<Vec<_>>(), off)
                    }
                    None => (col_steps(&w1), gl.lin1.b.to_vec()),
                };
                let ib = qt
                    .site_index(l, SiteSlot::GinMid)
                    .ok_or_else(|| Error::Shape("missing GIN node site".into()))?;
                let ep = Epilogue {
                    row_mult: row_steps(&hc),
                    col_mult: mult,
                    col_off: Some(off),
                    relu: true,
                };
                let req = requant_for(qt, ib, n, &mut buf)?;
                let (uc, a) = expect_fixed(ep.apply(&acc, req)?);
                site_codes[ib] = Some(uc.codes.clone());
                assignments[ib] = a;

                let w2 = FixedMatrix::quantize_cols(&gl.lin2.w, &gl.lin2.w_quant)?;
                let acc = int_matmul(&uc.codes, &w2.codes)?;
                let ep = Epilogue {
                    row_mult: row_steps(&uc),
                    col_mult: col_steps(&w2),
                    col_off: Some(gl.lin2.b.to_vec()),
                    relu: !last,
                };
                if last {
                    let EpilogueOut::Float(v) = ep.apply(&acc, Requant::Float)? else { unreachable!() };
                    logits = Some(v);
                } else {
                    let Layer::Gin(next) = &model.layers[l + 1] else { unreachable!() };
                    let q = next
                        .in_quant
                        .as_ref()
                        .ok_or_else(|| Error::Shape("hidden GIN layer needs an input column site".into()))?;
                    x = Some(expect_fixed(ep.apply(&acc, Requant::Cols(q))?).0);
                }
            }
        }
    }
    Ok(IntForward {
        logits: logits.expect("last layer emits logits"),
        site_codes: site_codes
            .into_iter()
            .map(|c| c.ok_or_else(|| Error::Shape("node site not produced".into())))
            .collect::<Result<_>>()?,
        column_codes,
        assignments,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct OpCounts {
    /// Integer multiply-accumulates in update matmuls.
    pub update_int_ops: u64,
    /// Integer additions in neighbour aggregation.
    pub aggregate_int_ops: u64,
    /// Float elementwise operations, including NNS selection compares.
    pub float_ops: u64,
}

impl OpCounts {
    pub fn int_ops(&self) -> u64 {
        self.update_int_ops + self.aggregate_int_ops
    }
}

/// Operation counts for one integer inference of `model` on `g`.
/// `bank_groups` is the bank size when node sites select from a bank;
/// `integral_input` says whether an unquantized first layer can run on
/// integer codes (otherwise its first kernel is counted as float work).
pub fn op_counts(model: &ModelParams, g: &CsrGraph, bank_groups: Option<usize>, integral_input: bool) -> OpCounts {
    let n = g.num_nodes() as u64;
    let nnz = g.nnz() as u64;
    let self_loops = if g.has_self_loops() { n } else { 0 };
    let select = |f: u64| match bank_groups {
        Some(m) if m > 1 => n * (f + (m as f64).log2().ceil() as u64),
        Some(_) => n * f,
        None => 0,
    };
    let mut c = OpCounts::default();
    if n == 0 {
        return c;
    }
    let sites = model.node_sites();
    for (l, layer) in model.layers.iter().enumerate() {
        let has_site = |slot| sites.iter().any(|s| s.layer == l && s.slot == slot);
        match layer {
            Layer::Gcn(gl) => {
                let (fi, fo) = (gl.lin.fan_in() as u64, gl.lin.fan_out() as u64);
                if l == 0 && !has_site(SiteSlot::GcnInput) && !integral_input {
                    c.float_ops += n * fi * fo;
                } else {
                    c.update_int_ops += n * fi * fo;
                }
                c.aggregate_int_ops += nnz * fo;
                c.float_ops += 2 * n * fo;
                if has_site(SiteSlot::GcnInput) && l == 0 {
                    c.float_ops += n * fi + select(fi);
                }
                if l > 0 {
                    c.float_ops += select(fi);
                }
            }
            Layer::Gin(gl) => {
                let (fi, fo) = (gl.lin1.fan_in() as u64, gl.lin1.fan_out() as u64);
                c.update_int_ops += n * fi * fo + n * fo * fo;
                if l == 0 && gl.in_quant.is_none() && !integral_input {
                    c.float_ops += (nnz - self_loops) * fi;
                } else {
                    c.aggregate_int_ops += (nnz - self_loops) * fi;
                }
                c.float_ops += n * fi + 2 * n * fo + select(fi) + select(fo);
            }
        }
    }
    c
}
