//! Block-sparse symmetric positive-definite solves for the damped normal
//! equations: a block Cholesky on a minimum-degree ordering, and
//! Jacobi-preconditioned conjugate gradients for very large systems.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};
use crate::objective::{ResidualJacobian, TangentFrame};
use crate::par;

/// `H = JᵀJ` in variable-block form.
#[derive(Clone, Debug)]
pub(crate) struct BlockSystem {
    sizes: Vec<usize>,
    offsets: Vec<usize>,
    dim: usize,
    diag: Vec<DMatrix<f64>>,
    /// Upper off-diagonal blocks `H_ab`, `a < b`.
    off: BTreeMap<(usize, usize), DMatrix<f64>>,
}

impl BlockSystem {
    pub fn from_jacobian(rj: &ResidualJacobian, frame: &TangentFrame, nvars: usize) -> Self {
        let sizes: Vec<usize> = (0..nvars).map(|n| frame.size(n)).collect();
        let offsets: Vec<usize> = (0..nvars).map(|n| frame.offset(n)).collect();
        let mut diag: Vec<DMatrix<f64>> =
            sizes.iter().map(|&s| DMatrix::zeros(s, s)).collect();
        let mut off: BTreeMap<(usize, usize), DMatrix<f64>> = BTreeMap::new();
        let products = par::map(&rj.factors, |fj| {
            let mut out = Vec::new();
            for (x, (a, ba)) in fj.blocks.iter().enumerate() {
                for (b, bb) in &fj.blocks[x..] {
                    let (a, b, m) = if a <= b {
                        (*a, *b, ba.tr_mul(bb))
                    } else {
                        (*b, *a, bb.tr_mul(ba))
                    };
                    out.push((a, b, m));
                }
            }
            out
        });
        for (a, b, m) in products.into_iter().flatten() {
            if a == b {
                diag[a] += m;
            } else {
                *off.entry((a, b)).or_insert_with(|| DMatrix::zeros(m.nrows(), m.ncols())) += m;
            }
        }
        Self {
            dim: frame.dim(),
            sizes,
            offsets,
            diag,
            off,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mean_diagonal(&self) -> f64 {
        if self.dim == 0 {
            return 0.0;
        }
        self.diag.iter().map(|b| b.trace()).sum::<f64>() / self.dim as f64
    }

    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.sizes.len()];
        for &(a, b) in self.off.keys() {
            adj[a].push(b);
            adj[b].push(a);
        }
        for v in &mut adj {
            v.sort_unstable();
        }
        adj
    }

    /// `(H + λI) x`.
    pub fn mul(&self, x: &DVector<f64>, lambda: f64) -> DVector<f64> {
        let mut y = x * lambda;
        for (n, b) in self.diag.iter().enumerate() {
            let xs = x.rows(self.offsets[n], self.sizes[n]);
            let mut ys = y.rows_mut(self.offsets[n], self.sizes[n]);
            ys += b * xs;
        }
        for (&(a, b), m) in &self.off {
            let xa = x.rows(self.offsets[a], self.sizes[a]).into_owned();
            let xb = x.rows(self.offsets[b], self.sizes[b]).into_owned();
            let mut ya = y.rows_mut(self.offsets[a], self.sizes[a]);
            ya += m * xb;
            let mut yb = y.rows_mut(self.offsets[b], self.sizes[b]);
            yb += m.tr_mul(&xa);
        }
        y
    }
}

/// Elimination order and the fill pattern of the block Cholesky factor.
#[derive(Clone, Debug)]
pub(crate) struct Symbolic {
    /// `order[k]` is the variable eliminated at step `k`.
    order: Vec<usize>,
    /// Inverse of `order`.
    position: Vec<usize>,
    /// For each step, the later steps with a nonzero block in that column.
    col_struct: Vec<Vec<usize>>,
}

impl Symbolic {
    /// Minimum-degree ordering on the variable adjacency graph, ties broken
    /// by variable index.
    pub fn analyze(adjacency: &[Vec<usize>]) -> Self {
        let n = adjacency.len();
        let mut adj: Vec<HashSet<usize>> = adjacency
            .iter()
            .map(|v| v.iter().copied().collect())
            .collect();
        let mut queue: BTreeSet<(usize, usize)> = (0..n).map(|v| (adj[v].len(), v)).collect();
        let mut order = Vec::with_capacity(n);
        let mut neighbours = Vec::with_capacity(n);
        while let Some((_, v)) = queue.pop_first() {
            let nb: Vec<usize> = {
                let mut nb: Vec<usize> = adj[v].iter().copied().collect();
                nb.sort_unstable();
                nb
            };
            for &a in &nb {
                queue.remove(&(adj[a].len(), a));
                adj[a].remove(&v);
            }
            for (x, &a) in nb.iter().enumerate() {
                for &b in &nb[x + 1..] {
                    adj[a].insert(b);
                    adj[b].insert(a);
                }
            }
            for &a in &nb {
                queue.insert((adj[a].len(), a));
            }
            adj[v].clear();
            order.push(v);
            neighbours.push(nb);
        }
        let mut position = vec![0; n];
        for (k, &v) in order.iter().enumerate() {
            position[v] = k;
        }
        let col_struct = neighbours
            .into_iter()
            .map(|nb| {
                let mut s: Vec<usize> = nb.into_iter().map(|v| position[v]).collect();
                s.sort_unstable();
                s
            })
            .collect();
        Self {
            order,
            position,
            col_struct,
        }
    }

    /// Factorizes `H + λI` and solves for `rhs`. Fails when the damped
    /// system is not numerically positive definite.
    pub fn solve(&self, sys: &BlockSystem, lambda: f64, rhs: &DVector<f64>) -> Result<DVector<f64>> {
        let nb = self.order.len();
        let size = |k: usize| sys.sizes[self.order[k]];
        let mut diag: Vec<DMatrix<f64>> = (0..nb)
            .map(|k| {
                let v = self.order[k];
                let mut d = sys.diag[v].clone();
                for i in 0..d.nrows() {
                    d[(i, i)] += lambda;
                }
                d
            })
            .collect();
        // lower blocks (i, j), i > j in step positions
        let mut work: HashMap<(usize, usize), DMatrix<f64>> = HashMap::new();
        for (&(a, b), m) in &sys.off {
            let (pa, pb) = (self.position[a], self.position[b]);
            if pa > pb {
                work.insert((pa, pb), m.clone());
            } else {
                work.insert((pb, pa), m.transpose());
            }
        }

        let mut l_diag: Vec<DMatrix<f64>> = Vec::with_capacity(nb);
        let mut l_off: Vec<Vec<DMatrix<f64>>> = Vec::with_capacity(nb);
        for k in 0..nb {
            let a_kk = std::mem::replace(&mut diag[k], DMatrix::zeros(0, 0));
            let chol = Cholesky::new(a_kk).ok_or_else(|| {
                Error::LinearSolve(format!("damped system not positive definite at block {k}"))
            })?;
            let l_kk = chol.l();
            let col: Vec<DMatrix<f64>> = self.col_struct[k]
                .iter()
                .map(|&i| {
                    let a_ik = work
                        .remove(&(i, k))
                        .unwrap_or_else(|| DMatrix::zeros(size(i), size(k)));
                    let x = l_kk
                        .solve_lower_triangular(&a_ik.transpose())
                        .expect("nonsingular Cholesky factor");
                    x.transpose()
                })
                .collect();
            for (x, &i) in self.col_struct[k].iter().enumerate() {
                diag[i] -= &col[x] * col[x].transpose();
                for (y, &j) in self.col_struct[k][..x].iter().enumerate() {
                    let upd = &col[x] * col[y].transpose();
                    *work
                        .entry((i, j))
                        .or_insert_with(|| DMatrix::zeros(size(i), size(j))) -= upd;
                }
            }
            l_diag.push(l_kk);
            l_off.push(col);
        }

        let seg = |x: &DVector<f64>, k: usize| {
            let v = self.order[k];
            x.rows(sys.offsets[v], sys.sizes[v]).into_owned()
        };
        let mut y: Vec<DVector<f64>> = (0..nb).map(|k| seg(rhs, k)).collect();
        for k in 0..nb {
            let yk = l_diag[k]
                .solve_lower_triangular(&y[k])
                .expect("nonsingular Cholesky factor");
            for (x, &i) in self.col_struct[k].iter().enumerate() {
                y[i] -= &l_off[k][x] * &yk;
            }
            y[k] = yk;
        }
        for k in (0..nb).rev() {
            let mut acc = y[k].clone();
            for (x, &i) in self.col_struct[k].iter().enumerate() {
                acc -= l_off[k][x].tr_mul(&y[i]);
            }
            y[k] = l_diag[k]
                .tr_solve_lower_triangular(&acc)
                .expect("nonsingular Cholesky factor");
        }
        let mut out = DVector::zeros(sys.dim);
        for k in 0..nb {
            let v = self.order[k];
            out.rows_mut(sys.offsets[v], sys.sizes[v]).copy_from(&y[k]);
        }
        if out.iter().all(|v| v.is_finite()) {
            Ok(out)
        } else {
            Err(Error::LinearSolve("non-finite Cholesky solution".into()))
        }
    }
}

/// Jacobi-preconditioned conjugate gradients on `(H + λI) x = rhs`.
pub(crate) fn pcg(
    sys: &BlockSystem,
    lambda: f64,
    rhs: &DVector<f64>,
    rel_tol: f64,
    max_iter: usize,
) -> Result<DVector<f64>> {
    let mut precond = DVector::zeros(sys.dim);
    for (n, b) in sys.diag.iter().enumerate() {
        for i in 0..b.nrows() {
            precond[sys.offsets[n] + i] = 1.0 / (b[(i, i)] + lambda);
        }
    }
    let mut x = DVector::zeros(sys.dim);
    let mut r = rhs.clone();
    let target = rel_tol * rhs.norm();
    let mut z = r.component_mul(&precond);
    let mut p = z.clone();
    let mut rz = r.dot(&z);
    for _ in 0..max_iter {
        if r.norm() <= target {
            break;
        }
        let ap = sys.mul(&p, lambda);
        let pap = p.dot(&ap);
        if !(pap > 0.0) {
            return Err(Error::LinearSolve("conjugate gradients lost positivity".into()));
        }
        let alpha = rz / pap;
        x.axpy(alpha, &p, 1.0);
        r.axpy(-alpha, &ap, 1.0);
        z = r.component_mul(&precond);
        let rz_new = r.dot(&z);
        p = &z + &p * (rz_new / rz);
        rz = rz_new;
    }
    if x.iter().all(|v| v.is_finite()) {
        Ok(x)
    } else {
        Err(Error::LinearSolve("non-finite conjugate-gradient iterate".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{lift, random_initialization, rot2, GraphBuilder};
    use crate::objective::residuals_and_jacobian;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn system() -> (BlockSystem, DMatrix<f64>) {
        let mut b = GraphBuilder::new(2);
        for i in 0..7 {
            b.add_pose(i);
        }
        for i in 0..6 {
            b.add_relative_pose(i, i + 1, rot2(0.2), DVector::from_vec(vec![1.0, 0.1]), 2.0, 3.0);
        }
        b.add_relative_pose(6, 0, rot2(0.5), DVector::from_vec(vec![0.3, 0.1]), 1.0, 1.0);
        b.add_relative_pose(2, 5, rot2(-0.5), DVector::from_vec(vec![0.3, 2.1]), 1.0, 1.0);
        let g = b.build().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random_initialization(&g, 3, &mut rng).unwrap();
        let (rj, frame) = residuals_and_jacobian(&lift(&g, 3).unwrap(), &a).unwrap();
        let j = rj.to_dense(&frame);
        let sys = BlockSystem::from_jacobian(&rj, &frame, g.variables().len());
        (sys, j.tr_mul(&j))
    }

    #[test]
    fn block_cholesky_matches_dense_solve() {
        let (sys, h) = system();
        let lambda = 1e-3;
        let rhs = DVector::from_fn(sys.dim(), |i, _| (i as f64 * 0.37).sin());
        let sym = Symbolic::analyze(&sys.adjacency());
        let x = sym.solve(&sys, lambda, &rhs).unwrap();
        let dense = &h + DMatrix::identity(sys.dim(), sys.dim()) * lambda;
        let x_ref = dense.clone().cholesky().unwrap().solve(&rhs);
        assert!((&x - &x_ref).amax() <= 1e-8 * x_ref.amax().max(1.0));
        assert!((sys.mul(&x, lambda) - &rhs).amax() <= 1e-8);
        let xp = pcg(&sys, lambda, &rhs, 1e-12, 10 * sys.dim()).unwrap();
        assert!((&xp - &x_ref).amax() <= 1e-6 * x_ref.amax().max(1.0));
    }

    #[test]
    fn ordering_is_a_permutation() {
        let (sys, _) = system();
        let sym = Symbolic::analyze(&sys.adjacency());
        let mut o = sym.order.clone();
        o.sort_unstable();
        assert_eq!(o, (0..14).collect::<Vec<_>>());
    }

    #[test]
    fn indefinite_system_is_reported() {
        let (sys, _) = system();
        let sym = Symbolic::analyze(&sys.adjacency());
        let rhs = DVector::from_element(sys.dim(), 1.0);
        assert!(matches!(
            sym.solve(&sys, -1e6, &rhs),
            Err(Error::LinearSolve(_))
        ));
    }
}
