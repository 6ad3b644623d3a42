use super::matching::perfect_matching;
use super::{FractionalAllocation, WeightedPermutations};
use crate::error::{ApexError, Result};

/// Entries at or below this are treated as zero.
const SUPPORT_TOL: f64 = 1e-10;
/// Accepted deviation of the input from bi-stochasticity.
const INPUT_TOL: f64 = 1e-8;

/// Writes `x` as a convex combination of permutation matrices.
///
/// Each step takes a perfect matching on the current support and subtracts
/// its smallest entry. That zeroes at least one entry, which moves the
/// residual onto a proper face of the polytope, so there are at most
/// `(n-1)^2 + 1` terms.
pub fn birkhoff_decompose(x: &FractionalAllocation) -> Result<WeightedPermutations> {
    let n = x.n();
    let err = x.bistochastic_error();
    if err > INPUT_TOL {
        return Err(ApexError::NotBistochastic(format!(
            "row/column sums deviate from 1 by {err:e}"
        )));
    }
    let mut r: Vec<f64> = x.as_slice().iter().map(|&v| v.max(0.0)).collect();
    let mut terms = Vec::new();
    let max_terms = n * n;
    loop {
        let adj: Vec<bool> = r.iter().map(|&v| v > SUPPORT_TOL).collect();
        if !adj.iter().any(|&b| b) {
            break;
        }
        let mass: f64 = r.iter().sum::<f64>() / n as f64;
        let pi = match perfect_matching(&adj, n) {
            Some(pi) => pi,
            // Only float dust left over.
            None if mass <= INPUT_TOL * n as f64 => break,
            None => return Err(ApexError::NoPerfectMatching { residual: mass }),
        };
        let theta = (0..n)
            .map(|i| r[i * n + pi[i]])
            .fold(f64::INFINITY, f64::min);
        for (i, &j) in pi.iter().enumerate() {
            let v = &mut r[i * n + j];
            *v -= theta;
            if *v <= SUPPORT_TOL {
                *v = 0.0;
            }
        }
        terms.push((theta, pi));
        if terms.len() > max_terms {
            return Err(ApexError::NoPerfectMatching { residual: mass });
        }
    }
    let total: f64 = terms.iter().map(|(w, _)| w).sum();
    if total <= 0.0 {
        return Err(ApexError::NotBistochastic("zero matrix".into()));
    }
    for (w, _) in &mut terms {
        *w /= total;
    }
    Ok(WeightedPermutations { terms })
}
