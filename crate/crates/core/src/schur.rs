//! Block-sparse storage of the reduced camera matrix `S` and the products,
//! preconditioner and density metric built on it.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use thiserror::Error;

use crate::mcg::Partition;
use crate::{Mat9, Vec9, POSE_DIM};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("landmark block {0} is singular")]
    SingularLandmarkBlock(usize),
    #[error("diagonal block {0} of S is not positive definite")]
    NotPositiveDefinite(usize),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
}

/// Symmetric block-sparse matrix of 9x9 blocks stored by block rows. Both
/// `(m, j)` and `(j, m)` are stored; columns within a row are sorted.
#[derive(Debug, Clone, PartialEq)]
pub struct SchurMatrix {
    n_poses: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    blocks: Vec<Mat9>,
}

impl SchurMatrix {
    /// Builds from sorted per-row column lists and matching blocks.
    pub(crate) fn from_rows(rows: Vec<Vec<(usize, Mat9)>>) -> Self {
        let n_poses = rows.len();
        let mut row_ptr = Vec::with_capacity(n_poses + 1);
        let nnz = rows.iter().map(Vec::len).sum();
        let mut col_idx = Vec::with_capacity(nnz);
        let mut blocks = Vec::with_capacity(nnz);
        row_ptr.push(0);
        for row in rows {
            debug_assert!(row.windows(2).all(|w| w[0].0 < w[1].0));
            for (j, b) in row {
                col_idx.push(j);
                blocks.push(b);
            }
            row_ptr.push(col_idx.len());
        }
        SchurMatrix {
            n_poses,
            row_ptr,
            col_idx,
            blocks,
        }
    }

    /// Builds from arbitrary `(row, col, block)` triplets; repeated positions
    /// are summed. No symmetry is imposed.
    pub fn from_blocks(n_poses: usize, entries: impl IntoIterator<Item = (usize, usize, Mat9)>) -> Self {
        let mut rows: Vec<Vec<(usize, Mat9)>> = vec![Vec::new(); n_poses];
        for (m, j, b) in entries {
            assert!(m < n_poses && j < n_poses, "block ({m}, {j}) out of range");
            rows[m].push((j, b));
        }
        for row in &mut rows {
            row.sort_by_key(|(j, _)| *j);
            let mut merged: Vec<(usize, Mat9)> = Vec::with_capacity(row.len());
            for &(j, b) in row.iter() {
                match merged.last_mut() {
                    Some((lj, lb)) if *lj == j => *lb += b,
                    _ => merged.push((j, b)),
                }
            }
            *row = merged;
        }
        Self::from_rows(rows)
    }

    /// Block-diagonal matrix with the given diagonal blocks.
    pub fn block_diagonal(blocks: Vec<Mat9>) -> Self {
        Self::from_rows(blocks.into_iter().enumerate().map(|(i, b)| vec![(i, b)]).collect())
    }

    pub fn identity(n_poses: usize) -> Self {
        Self::block_diagonal(vec![Mat9::identity(); n_poses])
    }

    pub fn num_poses(&self) -> usize {
        self.n_poses
    }

    pub fn dim(&self) -> usize {
        POSE_DIM * self.n_poses
    }

    pub fn num_blocks(&self) -> usize {
        self.col_idx.len()
    }

    /// Column indices and blocks of block row `m`.
    pub fn row(&self, m: usize) -> impl Iterator<Item = (usize, &Mat9)> {
        let range = self.row_ptr[m]..self.row_ptr[m + 1];
        self.col_idx[range.clone()]
            .iter()
            .copied()
            .zip(self.blocks[range].iter())
    }

    pub fn block(&self, m: usize, j: usize) -> Option<&Mat9> {
        let range = self.row_ptr[m]..self.row_ptr[m + 1];
        self.col_idx[range.clone()]
            .binary_search(&j)
            .ok()
            .map(|k| &self.blocks[range.start + k])
    }

    pub fn diagonal_block(&self, m: usize) -> Option<&Mat9> {
        self.block(m, m)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut out = DMatrix::zeros(n, n);
        for m in 0..self.n_poses {
            for (j, b) in self.row(m) {
                out.fixed_view_mut::<9, 9>(POSE_DIM * m, POSE_DIM * j).copy_from(b);
            }
        }
        out
    }

    /// Present blocks, diagonal included, over `n_p^2`.
    pub fn density(&self) -> f64 {
        if self.n_poses == 0 {
            return 0.0;
        }
        self.num_blocks() as f64 / (self.n_poses as f64 * self.n_poses as f64)
    }

    /// `S v`, one block row at a time in column order.
    pub fn spmv(&self, v: &DVector<f64>) -> DVector<f64> {
        assert_eq!(v.len(), self.dim(), "spmv dimension mismatch");
        let mut out = DVector::zeros(self.dim());
        out.as_mut_slice()
            .par_chunks_mut(POSE_DIM)
            .enumerate()
            .for_each(|(m, dst)| {
                let mut acc = Vec9::zeros();
                for (j, b) in self.row(m) {
                    acc += b * v.fixed_rows::<9>(POSE_DIM * j);
                }
                dst.copy_from_slice(acc.as_slice());
            });
        out
    }

    /// `S Z` for a tall matrix `Z` whose column `p` is supported only on the
    /// block rows of subset `p`. Each block `S_mj` is applied once, to the
    /// column owning pose `j`.
    pub fn spmm_structured(&self, z: &DMatrix<f64>, partition: &Partition) -> DMatrix<f64> {
        assert_eq!(z.nrows(), self.dim(), "spmm dimension mismatch");
        assert_eq!(z.ncols(), partition.num_subsets(), "one column per subset");
        let width = z.ncols();
        let rows: Vec<Vec<Vec9>> = (0..self.n_poses)
            .into_par_iter()
            .map(|m| {
                let mut acc = vec![Vec9::zeros(); width];
                for (j, b) in self.row(m) {
                    let c = partition.subset_of(j);
                    acc[c] += b * z.fixed_view::<9, 1>(POSE_DIM * j, c);
                }
                acc
            })
            .collect();
        let mut out = DMatrix::zeros(self.dim(), width);
        for (m, acc) in rows.iter().enumerate() {
            for (c, v) in acc.iter().enumerate() {
                out.fixed_view_mut::<9, 1>(POSE_DIM * m, c).copy_from(v);
            }
        }
        out
    }

    /// `S Z` column by column through [`SchurMatrix::spmv`].
    pub fn spmm(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.dim(), z.ncols());
        for c in 0..z.ncols() {
            out.set_column(c, &self.spmv(&z.column(c).into_owned()));
        }
        out
    }

    /// `max ||S_mj - S_jm^T||_F / (1 + ||S_mj||_F)`, or infinity when the
    /// block pattern is not symmetric.
    pub fn symmetry_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for m in 0..self.n_poses {
            for (j, b) in self.row(m) {
                match self.block(j, m) {
                    Some(t) => worst = worst.max((b - t.transpose()).norm() / (1.0 + b.norm())),
                    None => return f64::INFINITY,
                }
            }
        }
        worst
    }
}

/// Block-Jacobi preconditioner: inverses of the diagonal blocks of `S`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockJacobiPreconditioner {
    pub inv_diag_blocks: Vec<Mat9>,
}

impl BlockJacobiPreconditioner {
    pub fn identity(n_poses: usize) -> Self {
        BlockJacobiPreconditioner {
            inv_diag_blocks: vec![Mat9::identity(); n_poses],
        }
    }

    pub fn num_poses(&self) -> usize {
        self.inv_diag_blocks.len()
    }

    /// `D(S)^{-1} r`.
    pub fn apply(&self, r: &DVector<f64>) -> DVector<f64> {
        assert_eq!(r.len(), POSE_DIM * self.num_poses(), "preconditioner dimension mismatch");
        let mut out = DVector::zeros(r.len());
        out.as_mut_slice()
            .par_chunks_mut(POSE_DIM)
            .zip(self.inv_diag_blocks.par_iter())
            .enumerate()
            .for_each(|(m, (dst, inv))| {
                let z = inv * r.fixed_rows::<9>(POSE_DIM * m);
                dst.copy_from_slice(z.as_slice());
            });
        out
    }
}

/// Inverts every diagonal block of `S` through a Cholesky factorisation.
pub fn block_jacobi(s: &SchurMatrix) -> Result<BlockJacobiPreconditioner, LinalgError> {
    let inv_diag_blocks = (0..s.num_poses())
        .map(|m| {
            let d = s.diagonal_block(m).ok_or(LinalgError::NotPositiveDefinite(m))?;
            let sym = (d + d.transpose()) * 0.5;
            sym.cholesky()
                .map(|c| c.inverse())
                .filter(|inv| inv.iter().all(|v| v.is_finite()))
                .ok_or(LinalgError::NotPositiveDefinite(m))
        })
        .collect::<Result<_, _>>()?;
    Ok(BlockJacobiPreconditioner { inv_diag_blocks })
}
