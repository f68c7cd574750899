//! Parameter-minimising factor shapes by exhaustive divisor enumeration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flops::network_flops;
use crate::kron::{count_params, KronShape};
use crate::network::{Activation, LayerKind, LayerSpec, LossKind};

pub fn divisors(n: usize) -> Vec<usize> {
    let mut small = Vec::new();
    let mut large = Vec::new();
    let mut d = 1;
    while d * d <= n {
        if n.is_multiple_of(d) {
            small.push(d);
            if d * d != n {
                large.push(n / d);
            }
        }
        d += 1;
    }
    small.extend(large.into_iter().rev());
    small
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeCandidate {
    pub m1: usize,
    pub n1: usize,
    pub m2: usize,
    pub n2: usize,
    /// `2m₁n₁ + m₂n₂`: one mask, one `A` and one `B`.
    pub objective: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeSolution {
    pub best: ShapeCandidate,
    /// Every candidate attaining the minimum, in enumeration order.
    pub optimal: Vec<ShapeCandidate>,
    /// All `(m₁ | m, n₁ | n)` pairs, ordered by `m₁` then `n₁`.
    pub candidates: Vec<ShapeCandidate>,
}

fn check_dims(m: usize, n: usize) -> Result<()> {
    if m == 0 || n == 0 {
        return Err(Error::InvalidArgument(format!(
            "layer dims must be positive, got {m}x{n}"
        )));
    }
    Ok(())
}

/// Minimises `2m₁n₁ + m₂n₂` subject to `m₁m₂ = m`, `n₁n₂ = n`. Ties go to
/// the smallest `m₁`, then the smallest `n₁`.
pub fn optimal_shape(m: usize, n: usize) -> Result<ShapeSolution> {
    check_dims(m, n)?;
    let mut candidates = Vec::new();
    for &m1 in &divisors(m) {
        for &n1 in &divisors(n) {
            let (m2, n2) = (m / m1, n / n1);
            candidates.push(ShapeCandidate {
                m1,
                n1,
                m2,
                n2,
                objective: 2 * m1 * n1 + m2 * n2,
            });
        }
    }
    let min = candidates.iter().map(|c| c.objective).min().expect("1 divides everything");
    let optimal: Vec<ShapeCandidate> = candidates.iter().copied().filter(|c| c.objective == min).collect();
    Ok(ShapeSolution {
        best: optimal[0],
        optimal,
        candidates,
    })
}

/// `2√(2mn)`, the minimum of the continuous relaxation.
pub fn objective_lower_bound(m: usize, n: usize) -> f64 {
    2.0 * (2.0 * m as f64 * n as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeRow {
    pub m1: usize,
    pub n1: usize,
    pub m2: usize,
    pub n2: usize,
    pub r: usize,
    pub params: usize,
    pub rank_ceiling: usize,
    /// `r` is above `min(m₁n₁, m₂n₂)`.
    pub exceeds_ceiling: bool,
    /// Analytic flops of one training step (single layer, squared loss).
    pub training_flops: u64,
}

/// Parameter and flop table over every divisor shape and every rank in
/// `r_grid`, for a batch of `batch` rows.
pub fn shape_report(m: usize, n: usize, r_grid: &[usize], batch: usize) -> Result<Vec<ShapeRow>> {
    check_dims(m, n)?;
    if r_grid.contains(&0) {
        return Err(Error::InvalidArgument("ranks must be positive".into()));
    }
    let sol = optimal_shape(m, n)?;
    let mut rows = Vec::with_capacity(sol.candidates.len() * r_grid.len());
    for c in &sol.candidates {
        for &r in r_grid {
            let shape = KronShape::with_any_rank(c.m1, c.n1, c.m2, c.n2, r)?;
            let spec = LayerSpec {
                kind: LayerKind::Kron { shape },
                activation: Activation::Identity,
            };
            let flops = network_flops(&[spec], batch, LossKind::SquaredFrobenius)?;
            rows.push(ShapeRow {
                m1: c.m1,
                n1: c.n1,
                m2: c.m2,
                n2: c.n2,
                r,
                params: count_params(&shape),
                rank_ceiling: shape.rank_ceiling(),
                exceeds_ceiling: r > shape.rank_ceiling(),
                training_flops: flops.total(),
            });
        }
    }
    Ok(rows)
}

/// Tile sizes `(m₂, n₂)` that evenly divide an `m×n` matrix, excluding
/// `1×1` and the whole matrix, sorted lexicographically. With
/// `powers_of_two`, only sizes whose sides are both powers of two (≥ 2)
/// are kept.
pub fn enumerate_block_sizes(m: usize, n: usize, powers_of_two: bool) -> Vec<(usize, usize)> {
    if m == 0 || n == 0 {
        return Vec::new();
    }
    let keep = |d: usize| !powers_of_two || (d >= 2 && d.is_power_of_two());
    let mut out = Vec::new();
    for &m2 in &divisors(m) {
        for &n2 in &divisors(n) {
            if (m2, n2) == (1, 1) || (m2, n2) == (m, n) {
                continue;
            }
            if keep(m2) && keep(n2) {
                out.push((m2, n2));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn divisors_sorted() {
        assert_eq!(divisors(1), vec![1]);
        assert_eq!(divisors(12), vec![1, 2, 3, 4, 6, 12]);
        assert_eq!(divisors(16), vec![1, 2, 4, 8, 16]);
    }

    #[test]
    fn unit_layer() {
        let s = optimal_shape(1, 1).unwrap();
        assert_eq!(s.best.objective, 3);
        assert_eq!((s.best.m1, s.best.n1, s.best.m2, s.best.n2), (1, 1, 1, 1));
    }

    #[test]
    fn primes_have_two_block_sizes() {
        assert_eq!(enumerate_block_sizes(7, 7, false), vec![(1, 7), (7, 1)]);
    }

    #[test]
    fn report_row_count() {
        let rows = shape_report(6, 10, &[1, 2, 3], 1).unwrap();
        assert_eq!(rows.len(), 4 * 4 * 3);
        assert!(rows.iter().any(|r| r.exceeds_ceiling));
    }
}
