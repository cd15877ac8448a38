use crate::error::{Error, Result};

/// Dimension-weighted mean of rounded bitwidths over node sites:
/// `Σ_l Σ_i dim_l [b_il] / Σ_l Σ_i dim_l`.
pub fn avg_bits(bits: &[Vec<u32>], dims: &[usize]) -> Result<f64> {
    if bits.len() != dims.len() {
        return Err(Error::Shape(format!("{} bit rows vs {} dims", bits.len(), dims.len())));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (row, &d) in bits.iter().zip(dims) {
        num += d as f64 * row.iter().map(|&b| b as f64).sum::<f64>();
        den += d as f64 * row.len() as f64;
    }
    if den == 0.0 {
        return Err(Error::Empty("no node-site bitwidths"));
    }
    Ok(num / den)
}

/// FP32 feature memory over quantized memory including one 32-bit step per
/// node per layer:
///
/// ```text
/// r = 32 E / (b_m E + 32 N L),  E = [N F0] + (L - 1) N F1
/// ```
///
/// The first-layer term is included only when `count_first_layer` is set.
pub fn compression_ratio(avg_bits: f64, n: usize, f0: usize, f1: usize, layers: usize, count_first_layer: bool) -> f64 {
    let (n, f0, f1, l) = (n as f64, f0 as f64, f1 as f64, layers as f64);
    let elems = if count_first_layer { n * f0 } else { 0.0 } + (l - 1.0) * n * f1;
    32.0 * elems / (avg_bits * elems + 32.0 * n * l)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn averages() {
        assert_eq!(avg_bits(&[vec![4; 5]], &[7]).unwrap(), 4.0);
        assert_eq!(avg_bits(&[vec![2; 3], vec![4; 3]], &[8, 8]).unwrap(), 3.0);
        assert!(avg_bits(&[], &[]).is_err());
    }

    #[test]
    fn ratios() {
        let r = compression_ratio(4.0, 1000, 100000, 100000, 2, true);
        assert!((r - 8.0).abs() < 0.01);
        let r = compression_ratio(1.70, 2708, 1433, 16, 2, true);
        assert!((r - 18.35).abs() < 0.01, "{r}");
    }
}
