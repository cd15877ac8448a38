//! Dense kernels over standard-layout matrices. The left operand of the
//! forward product is often a sparse binary bag-of-words matrix, so zero
//! entries are skipped.

use ndarray::Array2;

fn slice(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

/// `a · b`
pub(crate) fn matmul(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let (n, k) = a.dim();
    let m = b.ncols();
    assert_eq!(k, b.nrows());
    let mut out = Array2::<f64>::zeros((n, m));
    if m == 0 {
        return out;
    }
    let (av, bv) = (slice(a), slice(b));
    let ov = out.as_slice_mut().expect("fresh array");
    for i in 0..n {
        let orow = &mut ov[i * m..(i + 1) * m];
        for (kk, &x) in av[i * k..(i + 1) * k].iter().enumerate() {
            if x != 0.0 {
                for (o, &w) in orow.iter_mut().zip(&bv[kk * m..(kk + 1) * m]) {
                    *o += x * w;
                }
            }
        }
    }
    out
}

/// `aᵀ · g`
pub(crate) fn matmul_tn(a: &Array2<f64>, g: &Array2<f64>) -> Array2<f64> {
    let (n, k) = a.dim();
    let m = g.ncols();
    assert_eq!(n, g.nrows());
    let mut out = Array2::<f64>::zeros((k, m));
    if m == 0 {
        return out;
    }
    let (av, gv) = (slice(a), slice(g));
    let ov = out.as_slice_mut().expect("fresh array");
    for i in 0..n {
        let grow = &gv[i * m..(i + 1) * m];
        for (kk, &x) in av[i * k..(i + 1) * k].iter().enumerate() {
            if x != 0.0 {
                for (o, &d) in ov[kk * m..(kk + 1) * m].iter_mut().zip(grow) {
                    *o += x * d;
                }
            }
        }
    }
    out
}

/// `g · bᵀ`
pub(crate) fn matmul_nt(g: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let (n, m) = g.dim();
    let k = b.nrows();
    assert_eq!(m, b.ncols());
    let mut out = Array2::<f64>::zeros((n, k));
    let (gv, bv) = (slice(g), slice(b));
    let ov = out.as_slice_mut().expect("fresh array");
    for i in 0..n {
        let grow = &gv[i * m..(i + 1) * m];
        if grow.iter().all(|&v| v == 0.0) {
            continue;
        }
        for kk in 0..k {
            ov[i * k + kk] = grow.iter().zip(&bv[kk * m..(kk + 1) * m]).map(|(a, b)| a * b).sum();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn agrees_with_ndarray() {
        let a = array![[1.0, 0.0, 2.0], [0.0, -1.0, 3.0]];
        let b = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        assert_eq!(matmul(&a, &b), a.dot(&b));
        let g = array![[1.0, -1.0], [0.5, 2.0]];
        assert_eq!(matmul_tn(&a, &g), a.t().dot(&g));
        assert_eq!(matmul_nt(&g, &b), g.dot(&b.t()));
    }
}
