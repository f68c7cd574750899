//! Kronecker and Hadamard products, tile extraction, and the reshape index
//! maps that let a factored layer run without materializing its weight.
//!
//! Index convention used throughout the crate: block `(i1, j1)` of
//! `kron(A, B)` is the tile `A[i1, j1] * B`, i.e.
//! `kron(A, B)[i1*m2 + i2, j1*n2 + j2] = A[i1, j1] * B[i2, j2]`.

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub fn kron(a: &Matrix, b: &Matrix) -> Matrix {
    let (m1, n1) = a.shape();
    let (m2, n2) = b.shape();
    let mut out = Matrix::zeros(m1 * m2, n1 * n2);
    for i1 in 0..m1 {
        for j1 in 0..n1 {
            let s = a[(i1, j1)];
            for i2 in 0..m2 {
                let dst = &mut out.row_mut(i1 * m2 + i2)[j1 * n2..(j1 + 1) * n2];
                for (d, &v) in dst.iter_mut().zip(b.row(i2)) {
                    *d = s * v;
                }
            }
        }
    }
    out
}

pub fn hadamard(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "hadamard",
            format!("{}x{}", a.rows(), a.cols()),
            format!("{}x{}", b.rows(), b.cols()),
        ));
    }
    Ok(a.hadamard_with(b, &mut crate::arith::Plain))
}

/// Tile `(i1, j1)` of `w` for a grid of `m2 x n2` tiles.
pub fn extract_block(w: &Matrix, m2: usize, n2: usize, i1: usize, j1: usize) -> Result<Matrix> {
    let (m1, n1) = tile_grid(w, m2, n2)?;
    if i1 >= m1 || j1 >= n1 {
        return Err(Error::IndexOutOfRange {
            row: i1,
            col: j1,
            rows: m1,
            cols: n1,
        });
    }
    Ok(Matrix::from_fn(m2, n2, |i2, j2| {
        w[(i1 * m2 + i2, j1 * n2 + j2)]
    }))
}

/// Writes `tile` into position `(i1, j1)` of `w`.
pub fn write_block(w: &mut Matrix, tile: &Matrix, i1: usize, j1: usize) {
    let (m2, n2) = tile.shape();
    for i2 in 0..m2 {
        w.row_mut(i1 * m2 + i2)[j1 * n2..(j1 + 1) * n2].copy_from_slice(tile.row(i2));
    }
}

/// Number of tile rows and tile columns of `w` for `m2 x n2` tiles.
pub fn tile_grid(w: &Matrix, m2: usize, n2: usize) -> Result<(usize, usize)> {
    if m2 == 0 || !w.rows().is_multiple_of(m2) {
        return Err(Error::NotDivisible {
            what: "row count",
            dim: w.rows(),
            by: m2,
        });
    }
    if n2 == 0 || !w.cols().is_multiple_of(n2) {
        return Err(Error::NotDivisible {
            what: "column count",
            dim: w.cols(),
            by: n2,
        });
    }
    Ok((w.rows() / m2, w.cols() / n2))
}

/// Squared Frobenius norm of every tile, row-major over `(i1, j1)`.
pub fn tile_sq_norms(w: &Matrix, m2: usize, n2: usize) -> Result<Matrix> {
    let (m1, n1) = tile_grid(w, m2, n2)?;
    let mut norms = Matrix::zeros(m1, n1);
    for i in 0..w.rows() {
        let row = w.row(i);
        for (j1, chunk) in row.chunks_exact(n2).enumerate() {
            norms[(i / m2, j1)] += chunk.iter().map(|v| v * v).sum::<f64>();
        }
    }
    Ok(norms)
}

/// Reshape maps between the `N x n` batch layout and the layouts the
/// factored kernels multiply in.
///
/// With sample `s`, tile column `j1`, in-tile column `j2` (and likewise
/// `i1`, `i2` for outputs):
///
/// * input:  `[N x n]       -> [n2 x N*n1]`, `(s, j1*n2+j2) -> (j2, s*n1+j1)`
/// * mid:    `[m2 x N*n1]   -> [N*m2 x n1]`, `(i2, s*n1+j1) -> (s*m2+i2, j1)`
/// * output: `[N*m2 x m1]   -> [N x m]`,     `(s*m2+i2, i1) -> (s, i1*m2+i2)`
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockIndexMaps {
    pub m1: usize,
    pub n1: usize,
    pub m2: usize,
    pub n2: usize,
    pub batch: usize,
}

impl BlockIndexMaps {
    pub fn new(m1: usize, n1: usize, m2: usize, n2: usize, batch: usize) -> Result<Self> {
        if [m1, n1, m2, n2, batch].contains(&0) {
            return Err(Error::InvalidArgument(
                "block index map dimensions must be positive".into(),
            ));
        }
        Ok(Self {
            m1,
            n1,
            m2,
            n2,
            batch,
        })
    }

    pub fn m(&self) -> usize {
        self.m1 * self.m2
    }

    pub fn n(&self) -> usize {
        self.n1 * self.n2
    }

    fn expect(&self, x: &Matrix, rows: usize, cols: usize, op: &'static str) -> Result<()> {
        if x.shape() != (rows, cols) {
            return Err(Error::shape(
                op,
                format!("{rows}x{cols}"),
                format!("{}x{}", x.rows(), x.cols()),
            ));
        }
        Ok(())
    }

    pub fn fold_input(&self, x: &Matrix) -> Result<Matrix> {
        if !x.cols().is_multiple_of(self.n2) || x.cols() / self.n2 != self.n1 {
            return Err(Error::NotDivisible {
                what: "input width",
                dim: x.cols(),
                by: self.n2,
            });
        }
        self.expect(x, self.batch, self.n(), "fold_input")?;
        let (n1, n2) = (self.n1, self.n2);
        let mut out = Matrix::zeros(n2, self.batch * n1);
        for s in 0..self.batch {
            let row = x.row(s);
            for j1 in 0..n1 {
                for j2 in 0..n2 {
                    out[(j2, s * n1 + j1)] = row[j1 * n2 + j2];
                }
            }
        }
        Ok(out)
    }

    pub fn unfold_input(&self, folded: &Matrix) -> Result<Matrix> {
        self.expect(folded, self.n2, self.batch * self.n1, "unfold_input")?;
        let (n1, n2) = (self.n1, self.n2);
        let mut out = Matrix::zeros(self.batch, self.n());
        for s in 0..self.batch {
            for j1 in 0..n1 {
                for j2 in 0..n2 {
                    out[(s, j1 * n2 + j2)] = folded[(j2, s * n1 + j1)];
                }
            }
        }
        Ok(out)
    }

    pub fn fold_mid(&self, z: &Matrix) -> Result<Matrix> {
        self.expect(z, self.m2, self.batch * self.n1, "fold_mid")?;
        let (m2, n1) = (self.m2, self.n1);
        let mut out = Matrix::zeros(self.batch * m2, n1);
        for i2 in 0..m2 {
            let row = z.row(i2);
            for s in 0..self.batch {
                out.row_mut(s * m2 + i2)
                    .copy_from_slice(&row[s * n1..(s + 1) * n1]);
            }
        }
        Ok(out)
    }

    pub fn unfold_mid(&self, folded: &Matrix) -> Result<Matrix> {
        self.expect(folded, self.batch * self.m2, self.n1, "unfold_mid")?;
        let (m2, n1) = (self.m2, self.n1);
        let mut out = Matrix::zeros(m2, self.batch * n1);
        for i2 in 0..m2 {
            for s in 0..self.batch {
                out.row_mut(i2)[s * n1..(s + 1) * n1].copy_from_slice(folded.row(s * m2 + i2));
            }
        }
        Ok(out)
    }

    pub fn fold_output(&self, o: &Matrix) -> Result<Matrix> {
        self.expect(o, self.batch * self.m2, self.m1, "fold_output")?;
        let (m1, m2) = (self.m1, self.m2);
        let mut out = Matrix::zeros(self.batch, self.m());
        for s in 0..self.batch {
            for i2 in 0..m2 {
                let src = o.row(s * m2 + i2);
                for i1 in 0..m1 {
                    out[(s, i1 * m2 + i2)] = src[i1];
                }
            }
        }
        Ok(out)
    }

    pub fn unfold_output(&self, y: &Matrix) -> Result<Matrix> {
        self.expect(y, self.batch, self.m(), "unfold_output")?;
        let (m1, m2) = (self.m1, self.m2);
        let mut out = Matrix::zeros(self.batch * m2, m1);
        for s in 0..self.batch {
            for i2 in 0..m2 {
                for i1 in 0..m1 {
                    out[(s * m2 + i2, i1)] = y[(s, i1 * m2 + i2)];
                }
            }
        }
        Ok(out)
    }
}
