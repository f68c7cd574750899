//! Masked Kronecker-factored layers: `W = Σᵢ (S ⊙ Aᵢ) ⊗ Bᵢ`.
//!
//! The forward and backward kernels never build `W`. They run on the
//! reshaped input (see [`BlockIndexMaps`]) and cache the per-rank
//! intermediates the backward pass reuses.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::arith::{Arith, Plain};
use crate::blocks::{extract_block, kron, tile_grid, BlockIndexMaps};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Factorization pattern `(m1, n1, m2, n2, r)` for an `m1*m2 x n1*n2` layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct KronShape {
    pub m1: usize,
    pub n1: usize,
    pub m2: usize,
    pub n2: usize,
    pub r: usize,
}

impl KronShape {
    /// Validated shape: positive dims and `r <= min(m1*n1, m2*n2)`.
    pub fn new(m1: usize, n1: usize, m2: usize, n2: usize, r: usize) -> Result<Self> {
        let shape = Self::with_any_rank(m1, n1, m2, n2, r)?;
        if r > shape.rank_ceiling() {
            return Err(Error::InvalidArgument(format!(
                "rank {r} exceeds the full rank {} of a ({m1},{n1},{m2},{n2}) factorization",
                shape.rank_ceiling()
            )));
        }
        Ok(shape)
    }

    /// Shape without the rank ceiling. Exact decompositions of block-sparse
    /// matrices need one term per nonzero tile, which can exceed it.
    pub fn with_any_rank(m1: usize, n1: usize, m2: usize, n2: usize, r: usize) -> Result<Self> {
        if [m1, n1, m2, n2, r].contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "shape entries must be positive, got ({m1},{n1},{m2},{n2},r={r})"
            )));
        }
        Ok(Self { m1, n1, m2, n2, r })
    }

    pub fn m(&self) -> usize {
        self.m1 * self.m2
    }

    pub fn n(&self) -> usize {
        self.n1 * self.n2
    }

    pub fn rank_ceiling(&self) -> usize {
        (self.m1 * self.n1).min(self.m2 * self.n2)
    }

    pub fn block(&self) -> (usize, usize) {
        (self.m2, self.n2)
    }
}

/// Trainable parameter count: one mask plus `r` pairs of factors.
pub fn count_params(shape: &KronShape) -> usize {
    let a = shape.m1 * shape.n1;
    a + shape.r * (a + shape.m2 * shape.n2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KronFactor {
    shape: KronShape,
    s: Matrix,
    a: Vec<Matrix>,
    b: Vec<Matrix>,
}

/// Intermediates kept from the forward pass.
#[derive(Debug, Clone)]
pub struct KronCache {
    maps: BlockIndexMaps,
    x_fold: Matrix,
    mids: Vec<Matrix>,
    masked: Vec<Matrix>,
}

impl KronCache {
    pub fn batch(&self) -> usize {
        self.maps.batch
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KronGradient {
    pub ds: Matrix,
    pub da: Vec<Matrix>,
    pub db: Vec<Matrix>,
    /// Gradient with respect to the layer input; only filled when requested.
    pub dx: Option<Matrix>,
}

fn labeled<A: Arith>(ar: &mut A, prefix: &str, step: &str) {
    if ar.counts() {
        ar.label(&format!("{prefix}{step}"));
    }
}

impl KronFactor {
    pub fn new(shape: KronShape, s: Matrix, a: Vec<Matrix>, b: Vec<Matrix>) -> Result<Self> {
        let f = Self { shape, s, a, b };
        f.validate()?;
        Ok(f)
    }

    fn validate(&self) -> Result<()> {
        let sh = &self.shape;
        let small = (sh.m1, sh.n1);
        if self.s.shape() != small {
            return Err(Error::shape("KronFactor", format!("S {small:?}"), format!("{:?}", self.s.shape())));
        }
        if self.a.len() != sh.r || self.b.len() != sh.r {
            return Err(Error::shape(
                "KronFactor",
                format!("{} factor pairs", sh.r),
                format!("{} A and {} B", self.a.len(), self.b.len()),
            ));
        }
        for a in &self.a {
            if a.shape() != small {
                return Err(Error::shape("KronFactor", format!("A {small:?}"), format!("{:?}", a.shape())));
            }
        }
        for b in &self.b {
            if b.shape() != (sh.m2, sh.n2) {
                return Err(Error::shape(
                    "KronFactor",
                    format!("B ({}, {})", sh.m2, sh.n2),
                    format!("{:?}", b.shape()),
                ));
            }
        }
        Ok(())
    }

    /// Random factors with an open mask.
    ///
    /// `A` and `B` are drawn from `U(-c, c)` with `c` chosen so that each
    /// entry of the materialized weight has the Glorot variance `2/(m+n)`:
    /// `r (c²/3)² = 2/(m+n)`.
    pub fn init<R: Rng + ?Sized>(shape: KronShape, rng: &mut R) -> Self {
        let fan = (shape.m() + shape.n()) as f64;
        let c = (18.0 / (shape.r as f64 * fan)).powf(0.25);
        let a = (0..shape.r)
            .map(|_| Matrix::random_uniform(shape.m1, shape.n1, c, rng))
            .collect();
        let b = (0..shape.r)
            .map(|_| Matrix::random_uniform(shape.m2, shape.n2, c, rng))
            .collect();
        Self {
            shape,
            s: Matrix::ones(shape.m1, shape.n1),
            a,
            b,
        }
    }

    pub fn zeros(shape: KronShape) -> Self {
        Self {
            shape,
            s: Matrix::zeros(shape.m1, shape.n1),
            a: vec![Matrix::zeros(shape.m1, shape.n1); shape.r],
            b: vec![Matrix::zeros(shape.m2, shape.n2); shape.r],
        }
    }

    pub fn shape(&self) -> &KronShape {
        &self.shape
    }

    pub fn s(&self) -> &Matrix {
        &self.s
    }

    pub fn s_mut(&mut self) -> &mut Matrix {
        &mut self.s
    }

    pub fn a(&self) -> &[Matrix] {
        &self.a
    }

    pub fn b(&self) -> &[Matrix] {
        &self.b
    }

    /// Every trainable matrix in canonical order: `S, A1..Ar, B1..Br`.
    pub fn params(&self) -> Vec<&Matrix> {
        std::iter::once(&self.s).chain(&self.a).chain(&self.b).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        std::iter::once(&mut self.s)
            .chain(self.a.iter_mut())
            .chain(self.b.iter_mut())
            .collect()
    }

    pub fn param_count(&self) -> usize {
        count_params(&self.shape)
    }

    /// Dense `m x n` weight `Σᵢ kron(S ⊙ Aᵢ, Bᵢ)`.
    pub fn materialize(&self) -> Matrix {
        let mut w = Matrix::zeros(self.shape.m(), self.shape.n());
        for (a, b) in self.a.iter().zip(&self.b) {
            let masked = self.s.hadamard_with(a, &mut Plain);
            let term = kron(&masked, b);
            for (d, t) in w.data_mut().iter_mut().zip(term.data()) {
                *d += t;
            }
        }
        w
    }

    /// Fraction of mask entries with magnitude below `eps_zero`.
    pub fn sparsity_rate(&self, eps_zero: f64) -> f64 {
        let zero = self.s.data().iter().filter(|v| v.abs() < eps_zero).count();
        zero as f64 / self.s.len() as f64
    }

    /// Layer output `X · Wᵀ` for a batch `X` of shape `N x n`.
    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, KronCache)> {
        self.forward_with(x, &mut Plain, "")
    }

    pub fn forward_with<A: Arith>(
        &self,
        x: &Matrix,
        ar: &mut A,
        tag: &str,
    ) -> Result<(Matrix, KronCache)> {
        let sh = &self.shape;
        if x.cols() != sh.n() {
            return Err(Error::shape(
                "kron forward",
                format!("input width {}", sh.n()),
                format!("{}", x.cols()),
            ));
        }
        let maps = BlockIndexMaps::new(sh.m1, sh.n1, sh.m2, sh.n2, x.rows())?;
        let x_fold = maps.fold_input(x)?;
        let x_fold_t = x_fold.transpose();

        let mut mids = Vec::with_capacity(sh.r);
        let mut masked = Vec::with_capacity(sh.r);
        let mut acc: Option<Matrix> = None;
        for (a, b) in self.a.iter().zip(&self.b) {
            labeled(ar, tag, "fwd.bx");
            let z = b.matmul_nt_with(&x_fold_t, ar)?;
            let mid = maps.fold_mid(&z)?;
            labeled(ar, tag, "fwd.mask");
            let c = self.s.hadamard_with(a, ar);
            labeled(ar, tag, "fwd.mid");
            let o_i = mid.matmul_nt_with(&c, ar)?;
            labeled(ar, tag, "fwd.sum");
            match acc.as_mut() {
                None => acc = Some(o_i),
                Some(o) => o.accumulate(&o_i, ar),
            }
            mids.push(mid);
            masked.push(c);
        }
        let out = maps.fold_output(&acc.expect("rank is positive"))?;
        Ok((
            out,
            KronCache {
                maps,
                x_fold,
                mids,
                masked,
            },
        ))
    }

    /// Gradients of the loss given `d_out = ∂J/∂O` in the `N x m` layout.
    pub fn backward(&self, cache: &KronCache, d_out: &Matrix, need_dx: bool) -> Result<KronGradient> {
        self.backward_with(cache, d_out, need_dx, &mut Plain, "")
    }

    pub fn backward_with<A: Arith>(
        &self,
        cache: &KronCache,
        d_out: &Matrix,
        need_dx: bool,
        ar: &mut A,
        tag: &str,
    ) -> Result<KronGradient> {
        let sh = &self.shape;
        let maps = &cache.maps;
        if (maps.m1, maps.n1, maps.m2, maps.n2) != (sh.m1, sh.n1, sh.m2, sh.n2)
            || cache.mids.len() != sh.r
        {
            return Err(Error::shape(
                "kron backward",
                "cache from this factor",
                "cache from a different shape",
            ));
        }
        let d_fold = maps.unfold_output(d_out)?;

        let mut grads_masked = Vec::with_capacity(sh.r);
        let mut db = Vec::with_capacity(sh.r);
        let mut dx_fold: Option<Matrix> = None;
        for i in 0..sh.r {
            labeled(ar, tag, "bwd.g");
            grads_masked.push(d_fold.t_matmul_with(&cache.mids[i], ar)?);

            labeled(ar, tag, "bwd.dmid");
            let d_mid = d_fold.matmul_with(&cache.masked[i], ar)?;
            let d_z = maps.unfold_mid(&d_mid)?;

            labeled(ar, tag, "bwd.db");
            db.push(d_z.matmul_nt_with(&cache.x_fold, ar)?);

            if need_dx {
                labeled(ar, tag, "bwd.dx");
                let part = self.b[i].t_matmul_with(&d_z, ar)?;
                labeled(ar, tag, "bwd.dxsum");
                match dx_fold.as_mut() {
                    None => dx_fold = Some(part),
                    Some(acc) => acc.accumulate(&part, ar),
                }
            }
        }

        labeled(ar, tag, "bwd.ds");
        let mut ds: Option<Matrix> = None;
        for (g, a) in grads_masked.iter().zip(&self.a) {
            let term = g.hadamard_with(a, ar);
            match ds.as_mut() {
                None => ds = Some(term),
                Some(acc) => acc.accumulate(&term, ar),
            }
        }
        labeled(ar, tag, "bwd.da");
        let da = grads_masked
            .iter()
            .map(|g| g.hadamard_with(&self.s, ar))
            .collect();

        let dx = match dx_fold {
            Some(f) => Some(maps.unfold_input(&f)?),
            None => None,
        };
        Ok(KronGradient {
            ds: ds.expect("rank is positive"),
            da,
            db,
            dx,
        })
    }
}

impl KronGradient {
    /// Gradient matrices in the same order as [`KronFactor::params`].
    pub fn params(&self) -> Vec<&Matrix> {
        std::iter::once(&self.ds).chain(&self.da).chain(&self.db).collect()
    }
}

/// Exact factorization of a block-wise sparse matrix: one rank term per
/// nonzero `m2 x n2` tile, a binary mask, one-hot `Aᵢ` and `Bᵢ` equal to the
/// tile. Tiles are visited row-major over `(i1, j1)`. An all-zero matrix
/// yields a single all-zero term.
pub fn reconstruct_from_blockwise(w: &Matrix, m2: usize, n2: usize) -> Result<KronFactor> {
    let (m1, n1) = tile_grid(w, m2, n2)?;
    let mut s = Matrix::zeros(m1, n1);
    let mut a = Vec::new();
    let mut b = Vec::new();
    for i1 in 0..m1 {
        for j1 in 0..n1 {
            let tile = extract_block(w, m2, n2, i1, j1)?;
            if tile.data().iter().any(|&v| v != 0.0) {
                s[(i1, j1)] = 1.0;
                let mut one_hot = Matrix::zeros(m1, n1);
                one_hot[(i1, j1)] = 1.0;
                a.push(one_hot);
                b.push(tile);
            }
        }
    }
    if a.is_empty() {
        let shape = KronShape::with_any_rank(m1, n1, m2, n2, 1)?;
        return Ok(KronFactor::zeros(shape));
    }
    let shape = KronShape::with_any_rank(m1, n1, m2, n2, a.len())?;
    KronFactor::new(shape, s, a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_factor(shape: KronShape, seed: u64) -> KronFactor {
        let mut r = rng(seed);
        let s = Matrix::random_normal(shape.m1, shape.n1, &mut r);
        let a = (0..shape.r).map(|_| Matrix::random_normal(shape.m1, shape.n1, &mut r)).collect();
        let b = (0..shape.r).map(|_| Matrix::random_normal(shape.m2, shape.n2, &mut r)).collect();
        KronFactor::new(shape, s, a, b).unwrap()
    }

    /// Definitional oracle: W[i1*m2+i2, j1*n2+j2] = Σᵢ S[i1,j1] Aᵢ[i1,j1] Bᵢ[i2,j2].
    fn materialize_oracle(f: &KronFactor) -> Matrix {
        let sh = *f.shape();
        Matrix::from_fn(sh.m(), sh.n(), |row, col| {
            let (i1, i2) = (row / sh.m2, row % sh.m2);
            let (j1, j2) = (col / sh.n2, col % sh.n2);
            (0..sh.r)
                .map(|i| f.s()[(i1, j1)] * f.a()[i][(i1, j1)] * f.b()[i][(i2, j2)])
                .sum()
        })
    }

    #[test]
    fn shape_rank_ceiling() {
        assert!(KronShape::new(2, 2, 1, 1, 2).is_err());
        assert!(KronShape::new(2, 2, 1, 1, 1).is_ok());
        assert!(KronShape::with_any_rank(2, 2, 1, 1, 4).is_ok());
        assert!(KronShape::new(0, 2, 1, 1, 1).is_err());
    }

    #[test]
    fn count_params_examples() {
        assert_eq!(count_params(&KronShape::new(4, 8, 2, 32, 1).unwrap()), 128);
        assert_eq!(count_params(&KronShape::new(1, 1, 1, 1, 1).unwrap()), 3);
        // 8x256 with 4x4 and 8x8 tiles at rank 4
        let p44 = count_params(&KronShape::new(2, 64, 4, 4, 4).unwrap());
        let p88 = count_params(&KronShape::new(1, 32, 8, 8, 4).unwrap());
        assert_eq!((p44, p88, p44 + p88), (704, 416, 1120));
        assert_eq!(count_params(&KronShape::new(5, 392, 2, 2, 2).unwrap()), 5888);
    }

    #[test]
    fn materialize_scalar_factor_is_b() {
        let shape = KronShape::new(1, 1, 2, 3, 1).unwrap();
        let b = Matrix::from_fn(2, 3, |i, j| (i * 3 + j) as f64);
        let f = KronFactor::new(shape, Matrix::ones(1, 1), vec![Matrix::ones(1, 1)], vec![b.clone()]).unwrap();
        assert_eq!(f.materialize(), b);
    }

    #[test]
    fn materialize_zero_mask() {
        let mut f = random_factor(KronShape::new(2, 3, 2, 2, 2).unwrap(), 1);
        *f.s_mut() = Matrix::zeros(2, 3);
        assert_eq!(f.materialize(), Matrix::zeros(4, 6));
    }

    #[test]
    fn materialize_matches_oracle() {
        let f = random_factor(KronShape::new(3, 2, 2, 4, 3).unwrap(), 7);
        assert!(f.materialize().max_abs_diff(&materialize_oracle(&f)) <= 1e-12);
    }

    #[test]
    fn forward_zero_mask_is_zero() {
        let mut f = random_factor(KronShape::new(2, 3, 3, 2, 2).unwrap(), 2);
        *f.s_mut() = Matrix::zeros(2, 3);
        let x = Matrix::random_normal(4, 6, &mut rng(4));
        let (o, _) = f.forward(&x).unwrap();
        assert_eq!(o, Matrix::zeros(4, 6));
    }

    #[test]
    fn forward_degenerate_is_dense_b() {
        let shape = KronShape::new(1, 1, 3, 4, 1).unwrap();
        let b = Matrix::random_normal(3, 4, &mut rng(8));
        let f = KronFactor::new(shape, Matrix::ones(1, 1), vec![Matrix::ones(1, 1)], vec![b.clone()]).unwrap();
        let x = Matrix::random_normal(5, 4, &mut rng(9));
        let (o, _) = f.forward(&x).unwrap();
        assert!(o.max_abs_diff(&x.matmul_nt(&b).unwrap()) <= 1e-12);
    }

    #[test]
    fn forward_matches_dense() {
        let f = random_factor(KronShape::new(3, 2, 2, 3, 2).unwrap(), 11);
        let x = Matrix::random_normal(5, 6, &mut rng(12));
        let (o, _) = f.forward(&x).unwrap();
        let dense = x.matmul_nt(&f.materialize()).unwrap();
        assert!(o.max_abs_diff(&dense) <= 1e-10);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let f = random_factor(KronShape::new(2, 2, 2, 2, 1).unwrap(), 1);
        assert!(f.forward(&Matrix::ones(2, 5)).is_err());
    }

    #[test]
    fn backward_zero_a_gives_zero_ds_and_zero_s_gives_zero_da() {
        let shape = KronShape::new(2, 3, 2, 2, 2).unwrap();
        let x = Matrix::random_normal(3, 6, &mut rng(1));
        let d_out = Matrix::random_normal(3, 4, &mut rng(2));

        let f = random_factor(shape, 3);
        let zero_a = KronFactor::new(shape, f.s().clone(), vec![Matrix::zeros(2, 3); 2], f.b().to_vec()).unwrap();
        let (_, cache) = zero_a.forward(&x).unwrap();
        let g = zero_a.backward(&cache, &d_out, false).unwrap();
        assert_eq!(g.ds, Matrix::zeros(2, 3));

        let zero_s = KronFactor::new(shape, Matrix::zeros(2, 3), f.a().to_vec(), f.b().to_vec()).unwrap();
        let (_, cache) = zero_s.forward(&x).unwrap();
        let g = zero_s.backward(&cache, &d_out, false).unwrap();
        assert!(g.da.iter().all(|d| *d == Matrix::zeros(2, 3)));
    }

    #[test]
    fn backward_rejects_foreign_cache() {
        let f = random_factor(KronShape::new(2, 3, 2, 2, 2).unwrap(), 1);
        let g = random_factor(KronShape::new(3, 2, 2, 2, 2).unwrap(), 1);
        let (_, cache) = g.forward(&Matrix::ones(2, 4)).unwrap();
        assert!(f.backward(&cache, &Matrix::ones(2, 6), false).is_err());
    }

    #[test]
    fn sparsity_rate_counts_mask() {
        let shape = KronShape::new(2, 4, 1, 1, 1).unwrap();
        let mut f = KronFactor::init(shape, &mut rng(0));
        assert_eq!(f.sparsity_rate(1e-6), 0.0);
        for j in 0..3 {
            f.s_mut()[(0, j)] = 0.0;
        }
        assert_eq!(f.sparsity_rate(1e-6), 0.375);
        *f.s_mut() = Matrix::zeros(2, 4);
        assert_eq!(f.sparsity_rate(1e-6), 1.0);
    }

    #[test]
    fn zeroing_mask_entry_zeroes_exactly_one_tile() {
        let mut f = random_factor(KronShape::new(2, 3, 2, 2, 2).unwrap(), 5);
        let before = f.materialize();
        f.s_mut()[(1, 2)] = 0.0;
        let after = f.materialize();
        for i1 in 0..2 {
            for j1 in 0..3 {
                let tile = extract_block(&after, 2, 2, i1, j1).unwrap();
                if (i1, j1) == (1, 2) {
                    assert_eq!(tile, Matrix::zeros(2, 2));
                } else {
                    assert_eq!(tile, extract_block(&before, 2, 2, i1, j1).unwrap());
                }
            }
        }
    }

    #[test]
    fn reconstruct_zero_matrix() {
        let f = reconstruct_from_blockwise(&Matrix::zeros(4, 4), 2, 2).unwrap();
        assert_eq!(f.shape().r, 1);
        assert_eq!(f.materialize(), Matrix::zeros(4, 4));
    }

    #[test]
    fn reconstruct_single_tile() {
        let mut w = Matrix::zeros(4, 6);
        let tile = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        crate::blocks::write_block(&mut w, &tile, 1, 2);
        let f = reconstruct_from_blockwise(&w, 2, 2).unwrap();
        assert_eq!(f.shape().r, 1);
        assert_eq!(f.b()[0], tile);
        assert_eq!(f.a()[0].data().iter().filter(|&&v| v == 1.0).count(), 1);
        assert_eq!(f.materialize(), w);
    }

    #[test]
    fn reconstruct_counts_nonzero_tiles() {
        // 8x8 with 4x4 tiles: one tile zeroed leaves r = 3, three zeroed leave r = 1
        let base = Matrix::random_normal(8, 8, &mut rng(21));
        let mut w = base.clone();
        crate::blocks::write_block(&mut w, &Matrix::zeros(4, 4), 0, 1);
        let f = reconstruct_from_blockwise(&w, 4, 4).unwrap();
        assert_eq!(f.shape().r, 3);
        assert_eq!(f.materialize(), w);

        let mut w = base;
        for &(i1, j1) in &[(0, 0), (0, 1), (1, 1)] {
            crate::blocks::write_block(&mut w, &Matrix::zeros(4, 4), i1, j1);
        }
        let f = reconstruct_from_blockwise(&w, 4, 4).unwrap();
        assert_eq!(f.shape().r, 1);
        assert_eq!(f.materialize(), w);
        assert!(reconstruct_from_blockwise(&w, 3, 4).is_err());
    }
}
