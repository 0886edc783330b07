//! Compressed sparse row storage for the symmetric data and certificate
//! matrices.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

/// A real sparse matrix in CSR layout. Symmetric matrices store both
/// triangles so that products need no transposition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsrMatrix {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self {
            nrows,
            ncols,
            row_ptr: vec![0; nrows + 1],
            col_idx: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Builds a matrix from `(row, col, value)` triplets. Duplicates are
    /// summed in input order; entries that sum to exactly zero are kept so
    /// the sparsity pattern reflects structure rather than cancellation.
    pub fn from_triplets(
        nrows: usize,
        ncols: usize,
        triplets: &[(usize, usize, f64)],
    ) -> Result<Self> {
        let mut counts = vec![0usize; nrows + 1];
        for &(i, j, _) in triplets {
            if i >= nrows || j >= ncols {
                return Err(Error::shape(
                    format!("index within {nrows}x{ncols}"),
                    format!("({i}, {j})"),
                ));
            }
            counts[i + 1] += 1;
        }
        for i in 0..nrows {
            counts[i + 1] += counts[i];
        }
        let mut next = counts.clone();
        let mut cols = vec![0usize; triplets.len()];
        let mut vals = vec![0.0; triplets.len()];
        for &(i, j, v) in triplets {
            let slot = next[i];
            cols[slot] = j;
            vals[slot] = v;
            next[i] += 1;
        }

        let mut row_ptr = Vec::with_capacity(nrows + 1);
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        row_ptr.push(0);
        let mut scratch: Vec<(usize, f64)> = Vec::new();
        for i in 0..nrows {
            scratch.clear();
            scratch.extend((counts[i]..counts[i + 1]).map(|k| (cols[k], vals[k])));
            // stable sort keeps duplicate summation in input order
            scratch.sort_by_key(|&(c, _)| c);
            let mut iter = scratch.iter().peekable();
            while let Some(&(c, mut v)) = iter.next() {
                while let Some(&&(c2, v2)) = iter.peek() {
                    if c2 != c {
                        break;
                    }
                    v += v2;
                    iter.next();
                }
                col_idx.push(c);
                values.push(v);
            }
            row_ptr.push(col_idx.len());
        }
        Ok(Self {
            nrows,
            ncols,
            row_ptr,
            col_idx,
            values,
        })
    }

    pub fn from_dense(m: &DMatrix<f64>) -> Self {
        let mut t = Vec::new();
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                if m[(i, j)] != 0.0 {
                    t.push((i, j, m[(i, j)]));
                }
            }
        }
        Self::from_triplets(m.nrows(), m.ncols(), &t).expect("indices in range")
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Iterates the stored entries of row `i` as `(col, value)`.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[range.clone()]
            .iter()
            .copied()
            .zip(self.values[range].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let range = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.col_idx[range.clone()].binary_search(&j) {
            Ok(k) => self.values[range.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        (0..self.nrows)
            .flat_map(|i| self.row(i).map(move |(j, v)| (i, j, v)))
            .collect()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows, self.ncols);
        for (i, j, v) in self.triplets() {
            m[(i, j)] += v;
        }
        m
    }

    /// Exact structural and numerical symmetry.
    pub fn is_symmetric(&self) -> bool {
        self.nrows == self.ncols
            && (0..self.nrows).all(|i| self.row(i).all(|(j, v)| self.get(j, i) == v))
    }

    pub fn mul_vec(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.ncols {
            return Err(Error::shape(self.ncols, x.len()));
        }
        let out = par::map_range(self.nrows, |i| self.row(i).map(|(j, v)| v * x[j]).sum());
        Ok(DVector::from_vec(out))
    }

    /// Sparse-times-dense product `A·Y`.
    pub fn mul_dense(&self, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if y.nrows() != self.ncols {
            return Err(Error::shape(
                format!("{} rows", self.ncols),
                format!("{} rows", y.nrows()),
            ));
        }
        let p = y.ncols();
        let rows = par::map_range(self.nrows, |i| {
            let mut acc = vec![0.0; p];
            for (j, v) in self.row(i) {
                for (c, a) in acc.iter_mut().enumerate() {
                    *a += v * y[(j, c)];
                }
            }
            acc
        });
        Ok(DMatrix::from_fn(self.nrows, p, |i, c| rows[i][c]))
    }

    /// Upper bound on the largest eigenvalue of a symmetric matrix from
    /// Gershgorin discs.
    pub fn gershgorin_upper(&self) -> f64 {
        (0..self.nrows)
            .map(|i| {
                self.row(i)
                    .map(|(j, v)| if i == j { v } else { v.abs() })
                    .sum::<f64>()
            })
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Largest absolute row sum (the infinity norm).
    pub fn max_row_norm(&self) -> f64 {
        (0..self.nrows)
            .map(|i| self.row(i).map(|(_, v)| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    /// `self + other`, which must have the same shape.
    pub fn add(&self, other: &CsrMatrix) -> Result<CsrMatrix> {
        if self.nrows != other.nrows || self.ncols != other.ncols {
            return Err(Error::shape(
                format!("{}x{}", self.nrows, self.ncols),
                format!("{}x{}", other.nrows, other.ncols),
            ));
        }
        let mut t = self.triplets();
        t.extend(other.triplets());
        CsrMatrix::from_triplets(self.nrows, self.ncols, &t)
    }

    /// Writes the matrix as coordinate triplets, one `row col value` line per
    /// stored entry of the upper triangle (0-based), preceded by a
    /// `rows cols entries` header line.
    pub fn write_symmetric_triplets<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        let upper: Vec<_> = self.triplets().into_iter().filter(|&(i, j, _)| i <= j).collect();
        writeln!(w, "{} {} {}", self.nrows, self.ncols, upper.len())?;
        for (i, j, v) in upper {
            writeln!(w, "{i} {j} {v:e}")?;
        }
        Ok(())
    }

    /// Reads the format produced by [`CsrMatrix::write_symmetric_triplets`].
    pub fn read_symmetric_triplets<R: std::io::BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines().enumerate();
        let parse_err = |line: usize, message: &str| Error::Parse {
            line: line + 1,
            message: message.to_string(),
        };
        let (_, header) = lines.next().ok_or_else(|| parse_err(0, "missing header"))?;
        let header = header?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(|s| s.parse().map_err(|_| parse_err(0, "bad header")))
            .collect::<Result<_>>()?;
        if dims.len() != 3 {
            return Err(parse_err(0, "header must be `rows cols entries`"));
        }
        let mut t = Vec::with_capacity(2 * dims[2]);
        for (n, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 3 {
                return Err(parse_err(n, "expected `row col value`"));
            }
            let i: usize = f[0].parse().map_err(|_| parse_err(n, "bad row"))?;
            let j: usize = f[1].parse().map_err(|_| parse_err(n, "bad column"))?;
            let v: f64 = f[2].parse().map_err(|_| parse_err(n, "bad value"))?;
            t.push((i, j, v));
            if i != j {
                t.push((j, i, v));
            }
        }
        CsrMatrix::from_triplets(dims[0], dims[1], &t)
    }
}
