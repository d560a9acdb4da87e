//! Dense row-major f64 matrices and the handful of operations the rest of
//! the crate is built on: products, scaled sums, block concatenation, and a
//! pivoted-elimination rank estimate.
//!
//! Everything here is a pure function over immutable inputs; identical
//! inputs produce bit-identical outputs.

use thiserror::Error;

/// Default relative tolerance for [`numerical_rank`].
pub const DEFAULT_RANK_TOL: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("{op}: dimension mismatch between {lhs_rows}x{lhs_cols} and {rhs_rows}x{rhs_cols}")]
    ShapeMismatch {
        op: &'static str,
        lhs_rows: usize,
        lhs_cols: usize,
        rhs_rows: usize,
        rhs_cols: usize,
    },
    #[error("concat: empty part list")]
    EmptyConcat,
    #[error("matrix must have positive dimensions, got {rows}x{cols}")]
    EmptyMatrix { rows: usize, cols: usize },
    #[error("data length {len} does not match shape {rows}x{cols}")]
    DataLength { len: usize, rows: usize, cols: usize },
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("rank tolerance must be positive, got {0}")]
    BadTolerance(f64),
}

/// Concatenation axis for [`concat`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

/// Dense row-major matrix of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Build from row-major data. Rejects empty shapes, length mismatches,
    /// and non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        if rows == 0 || cols == 0 {
            return Err(TensorError::EmptyMatrix { rows, cols });
        }
        if data.len() != rows * cols {
            return Err(TensorError::DataLength {
                len: data.len(),
                rows,
                cols,
            });
        }
        if let Some(idx) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite {
                row: idx / cols,
                col: idx % cols,
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix must have positive dimensions");
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Seeded matrix with i.i.d. N(0, std^2) entries.
    pub fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut crate::rng::Rng) -> Self {
        assert!(rows > 0 && cols > 0, "matrix must have positive dimensions");
        let data = (0..rows * cols).map(|_| std * rng.next_gaussian()).collect();
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        debug_assert!(row < self.rows && col < self.cols);
        self.data[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        debug_assert!(row < self.rows && col < self.cols);
        self.data[row * self.cols + col] = value;
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Elementwise scale by a constant.
    pub fn scale(&self, factor: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| factor * v).collect(),
        }
    }

    /// Elementwise product.
    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix, TensorError> {
        check_same_shape("hadamard", self, other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Contiguous sub-block, used to undo a concatenation.
    pub fn slice(
        &self,
        row_start: usize,
        col_start: usize,
        rows: usize,
        cols: usize,
    ) -> Result<Matrix, TensorError> {
        if row_start + rows > self.rows || col_start + cols > self.cols {
            return Err(TensorError::ShapeMismatch {
                op: "slice",
                lhs_rows: self.rows,
                lhs_cols: self.cols,
                rhs_rows: row_start + rows,
                rhs_cols: col_start + cols,
            });
        }
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                out.data[r * cols + c] = self.get(row_start + r, col_start + c);
            }
        }
        Ok(out)
    }

    /// Bitwise equality, distinguishing -0.0 from +0.0.
    pub fn bits_eq(&self, other: &Matrix) -> bool {
        self.shape() == other.shape()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

fn check_same_shape(op: &'static str, a: &Matrix, b: &Matrix) -> Result<(), TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs_rows: a.rows,
            lhs_cols: a.cols,
            rhs_rows: b.rows,
            rhs_cols: b.cols,
        });
    }
    Ok(())
}

/// Standard matrix product. `lhs.cols` must equal `rhs.rows`.
pub fn matmul(lhs: &Matrix, rhs: &Matrix) -> Result<Matrix, TensorError> {
    if lhs.cols != rhs.rows {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            lhs_rows: lhs.rows,
            lhs_cols: lhs.cols,
            rhs_rows: rhs.rows,
            rhs_cols: rhs.cols,
        });
    }
    let mut out = Matrix::zeros(lhs.rows, rhs.cols);
    for i in 0..lhs.rows {
        for k in 0..lhs.cols {
            let a = lhs.data[i * lhs.cols + k];
            let rhs_row = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
            let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for (o, b) in out_row.iter_mut().zip(rhs_row) {
                *o += a * b;
            }
        }
    }
    Ok(out)
}

/// `alpha * x + y`, elementwise.
pub fn axpy(alpha: f64, x: &Matrix, y: &Matrix) -> Result<Matrix, TensorError> {
    check_same_shape("axpy", x, y)?;
    let data = x
        .data
        .iter()
        .zip(&y.data)
        .map(|(xv, yv)| alpha * xv + yv)
        .collect();
    Ok(Matrix {
        rows: x.rows,
        cols: x.cols,
        data,
    })
}

/// Block concatenation along the chosen axis. All parts must agree on the
/// non-concatenated dimension.
pub fn concat(parts: &[&Matrix], axis: Axis) -> Result<Matrix, TensorError> {
    let first = parts.first().ok_or(TensorError::EmptyConcat)?;
    match axis {
        Axis::Rows => {
            let cols = first.cols;
            let mut rows = 0;
            for p in parts {
                if p.cols != cols {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat(rows)",
                        lhs_rows: first.rows,
                        lhs_cols: cols,
                        rhs_rows: p.rows,
                        rhs_cols: p.cols,
                    });
                }
                rows += p.rows;
            }
            let mut data = Vec::with_capacity(rows * cols);
            for p in parts {
                data.extend_from_slice(&p.data);
            }
            Ok(Matrix { rows, cols, data })
        }
        Axis::Cols => {
            let rows = first.rows;
            let mut cols = 0;
            for p in parts {
                if p.rows != rows {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat(cols)",
                        lhs_rows: rows,
                        lhs_cols: first.cols,
                        rhs_rows: p.rows,
                        rhs_cols: p.cols,
                    });
                }
                cols += p.cols;
            }
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for p in parts {
                    data.extend_from_slice(p.row(r));
                }
            }
            Ok(Matrix { rows, cols, data })
        }
    }
}

/// Rank estimate by elimination with full pivoting. Pivots with magnitude
/// at most `tol * max|entry|` of the input count as zero, so the zero
/// matrix has rank 0. The result never exceeds `min(rows, cols)`.
pub fn numerical_rank(m: &Matrix, tol: f64) -> Result<usize, TensorError> {
    if tol <= 0.0 {
        return Err(TensorError::BadTolerance(tol));
    }
    let threshold = tol * m.max_abs();
    let mut work = m.clone();
    let (rows, cols) = work.shape();
    let mut rank = 0;
    let max_rank = rows.min(cols);
    let mut row_perm: Vec<usize> = (0..rows).collect();
    let mut col_perm: Vec<usize> = (0..cols).collect();

    while rank < max_rank {
        // pick the largest remaining entry as pivot
        let mut best = 0.0f64;
        let (mut pr, mut pc) = (rank, rank);
        for r in rank..rows {
            for c in rank..cols {
                let v = work.get(row_perm[r], col_perm[c]).abs();
                if v > best {
                    best = v;
                    pr = r;
                    pc = c;
                }
            }
        }
        if best <= threshold {
            break;
        }
        row_perm.swap(rank, pr);
        col_perm.swap(rank, pc);

        let pivot = work.get(row_perm[rank], col_perm[rank]);
        for r in rank + 1..rows {
            let factor = work.get(row_perm[r], col_perm[rank]) / pivot;
            if factor == 0.0 {
                continue;
            }
            for c in rank..cols {
                let v = work.get(row_perm[r], col_perm[c])
                    - factor * work.get(row_perm[rank], col_perm[c]);
                work.set(row_perm[r], col_perm[c], v);
            }
        }
        rank += 1;
    }
    Ok(rank)
}
