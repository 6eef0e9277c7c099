//! Gauss–Hermite quadrature for expectations under standard normals.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

/// Nodes and weights for `E[g(Z)]`, `Z ~ N(0, 1)`, exact for polynomials of
/// degree `< 2n`. Computed by Golub–Welsch; the weights sum to one.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n > 0, "at least one node");
    let jacobi = DMatrix::from_fn(n, n, |i, j| if i + 1 == j || j + 1 == i { (i.max(j) as f64).sqrt() } else { 0.0 });
    let eig = SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|k| (eig.eigenvalues[k], eig.eigenvectors[(0, k)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    (pairs.iter().map(|p| p.0).collect(), pairs.iter().map(|p| p.1 / total).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadratureResult {
    pub value: f64,
    pub nodes: usize,
    /// Difference to the previous refinement level.
    pub error_estimate: f64,
}

const LEVELS: [usize; 3] = [64, 128, 256];

/// `E[g(Z)]` for `Z ~ N(0, I_dim)`, `dim ≤ 2`, refining 64 → 128 → 256
/// nodes per axis until successive values agree to `1e-12` relative.
pub fn gaussian_expectation(dim: usize, g: impl Fn(&[f64]) -> f64) -> Result<QuadratureResult> {
    if dim == 0 || dim > 2 {
        return Err(Error::QuadratureDimension(dim));
    }
    let mut prev: Option<f64> = None;
    let mut last = QuadratureResult { value: f64::NAN, nodes: 0, error_estimate: f64::INFINITY };
    for &n in &LEVELS {
        let (x, w) = gauss_hermite(n);
        let value = if dim == 1 {
            x.iter().zip(&w).map(|(&xi, &wi)| wi * g(&[xi])).sum()
        } else {
            let mut s = 0.0;
            for (i, &xi) in x.iter().enumerate() {
                for (j, &xj) in x.iter().enumerate() {
                    s += w[i] * w[j] * g(&[xi, xj]);
                }
            }
            s
        };
        let err = prev.map_or(f64::INFINITY, |p: f64| (value - p).abs());
        last = QuadratureResult { value, nodes: n, error_estimate: err };
        if err <= 1e-12 * (1.0 + value.abs()) {
            break;
        }
        prev = Some(value);
    }
    Ok(last)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moments_of_standard_normal() {
        let (x, w) = gauss_hermite(20);
        let m = |p: i32| x.iter().zip(&w).map(|(a, b)| b * a.powi(p)).sum::<f64>();
        assert!((m(0) - 1.0).abs() < 1e-13);
        assert!(m(1).abs() < 1e-13);
        assert!((m(2) - 1.0).abs() < 1e-12);
        assert!((m(4) - 3.0).abs() < 1e-11);
        assert!((m(6) - 15.0).abs() < 1e-10);
    }

    #[test]
    fn gaussian_integral_closed_form() {
        // E[exp(−λZ²)] = (1 + 2λ)^{−1/2}
        let r = gaussian_expectation(1, |z| (-0.25 * z[0] * z[0]).exp()).unwrap();
        assert!((r.value - 1.5f64.powf(-0.5)).abs() < 1e-13, "{r:?}");
        let r2 = gaussian_expectation(2, |z| (z[0] * z[1]).cos()).unwrap();
        // E[cos(XY)] = E[exp(−X²/2)] = 2^{−1/2}
        assert!((r2.value - 0.5f64.sqrt()).abs() < 1e-10);
        assert!(matches!(gaussian_expectation(3, |_| 1.0), Err(Error::QuadratureDimension(3))));
    }
}
