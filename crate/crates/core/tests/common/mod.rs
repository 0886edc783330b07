//! Independent oracles shared by the integration and acceptance tests.
//!
//! Nothing here calls into the library's objective assembly or certifier:
//! the data matrix is rebuilt from the factor definitions, the constraint
//! set is enumerated one scalar equation at a time, and the relaxation is
//! solved with a dense primal-dual interior-point method.

#![allow(dead_code)]

use certfg::graph::{Factor, FactorGraph, VariableKey, VariableKind};
use certfg::io::{generate_synthetic, NoiseSpec, SyntheticConfig, SyntheticProblem, Topology};
use certfg::objective::LiftedAssignment;
use nalgebra::{DMatrix, DVector};

/// Row offset and row count of every variable in the aggregate `Y`.
pub fn layout(graph: &FactorGraph) -> (Vec<usize>, usize) {
    let d = graph.d();
    let mut offsets = Vec::new();
    let mut n = 0;
    for v in graph.variables() {
        offsets.push(n);
        n += match v.kind {
            VariableKind::Rotation => d,
            VariableKind::Translation | VariableKind::UnitBearing => 1,
        };
    }
    (offsets, n)
}

/// Dense `Q` built as `Σ w CᵀC` with `C` the linear selector of each
/// factor's residual in terms of the block rows of `Y`.
pub fn dense_q(graph: &FactorGraph) -> DMatrix<f64> {
    let d = graph.d();
    let (off, n) = layout(graph);
    let at = |k: &VariableKey| off[graph.var_index(k).unwrap()];
    let mut q = DMatrix::zeros(n, n);
    for f in graph.factors() {
        let (c, w) = match f {
            Factor::RelativeRotation { i, j, measurement, kappa } => {
                // Y_j − R̃ᵀ Y_i
                let mut c = DMatrix::zeros(d, n);
                c.view_mut((0, at(j)), (d, d)).fill_with_identity();
                c.view_mut((0, at(i)), (d, d)).copy_from(&(-measurement.transpose()));
                (c, *kappa)
            }
            Factor::RelativeTranslation { rot_i, t_i, t_j, measurement, tau } => {
                // y_tj − y_ti − t̃ᵀ Y_i
                let mut c = DMatrix::zeros(1, n);
                c[(0, at(t_j))] += 1.0;
                c[(0, at(t_i))] -= 1.0;
                for a in 0..d {
                    c[(0, at(rot_i) + a)] -= measurement[a];
                }
                (c, *tau)
            }
            Factor::Range { t_i, t_j, bearing, range, sigma } => {
                let mut c = DMatrix::zeros(1, n);
                c[(0, at(t_j))] += 1.0;
                c[(0, at(t_i))] -= 1.0;
                c[(0, at(bearing))] -= range;
                (c, 1.0 / (sigma * sigma))
            }
        };
        q += c.transpose() * c * w;
    }
    q
}

/// One scalar constraint `(Z_ij + Z_ji) / 2 = b`.
#[derive(Clone, Copy, Debug)]
pub struct Constraint {
    pub i: usize,
    pub j: usize,
    pub b: f64,
}

impl Constraint {
    pub fn dense(&self, n: usize) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(n, n);
        a[(self.i, self.j)] += 0.5;
        a[(self.j, self.i)] += 0.5;
        a
    }

    pub fn apply(&self, z: &DMatrix<f64>) -> f64 {
        0.5 * (z[(self.i, self.j)] + z[(self.j, self.i)])
    }
}

/// The constraint set of the relaxation: identity diagonal blocks for
/// rotations, unit diagonal entries for bearings.
pub fn constraints(graph: &FactorGraph) -> Vec<Constraint> {
    let d = graph.d();
    let (off, _) = layout(graph);
    let mut out = Vec::new();
    for (n, v) in graph.variables().iter().enumerate() {
        match v.kind {
            VariableKind::Rotation => {
                for a in 0..d {
                    for b in a..d {
                        out.push(Constraint {
                            i: off[n] + a,
                            j: off[n] + b,
                            b: if a == b { 1.0 } else { 0.0 },
                        });
                    }
                }
            }
            VariableKind::UnitBearing => out.push(Constraint { i: off[n], j: off[n], b: 1.0 }),
            VariableKind::Translation => {}
        }
    }
    out
}

/// Optimal value of `min ⟨Q, Z⟩ s.t. A(Z) = b, Z ⪰ 0` by an infeasible-start
/// primal-dual interior-point method (HKM direction). Rows in `drop` are
/// removed first (used to fix the translation gauge, which leaves the
/// optimum unchanged and makes the dual strictly feasible).
pub fn solve_relaxation(q: &DMatrix<f64>, cons: &[Constraint], drop: &[usize]) -> f64 {
    let keep: Vec<usize> = (0..q.nrows()).filter(|i| !drop.contains(i)).collect();
    let pos = |i: usize| keep.iter().position(|&k| k == i).expect("constraint on a dropped row");
    let c = DMatrix::from_fn(keep.len(), keep.len(), |a, b| q[(keep[a], keep[b])]);
    let cons: Vec<Constraint> = cons
        .iter()
        .map(|c| Constraint { i: pos(c.i), j: pos(c.j), b: c.b })
        .collect();
    let n = c.nrows();
    let m = cons.len();
    let scale = c.amax().max(1.0);
    let c = c / scale;
    let b = DVector::from_iterator(m, cons.iter().map(|k| k.b));
    let a_op = |x: &DMatrix<f64>| DVector::from_iterator(m, cons.iter().map(|k| k.apply(x)));
    let a_adj = |y: &DVector<f64>| adjoint(&cons, y, n);
    let sym = |x: DMatrix<f64>| (&x + x.transpose()) * 0.5;
    // Largest step keeping `x + α dx` positive definite, capped at 1.
    let max_step = |x: &DMatrix<f64>, dx: &DMatrix<f64>| -> f64 {
        let l = x.clone().cholesky().expect("iterate positive definite").l();
        let li = l.try_inverse().expect("triangular factor invertible");
        let lo = sym(&li * dx * li.transpose()).symmetric_eigenvalues().min();
        if lo >= 0.0 { 1.0 } else { (-1.0 / lo).min(1.0) }
    };

    let mut x = DMatrix::<f64>::identity(n, n);
    let mut s = DMatrix::<f64>::identity(n, n);
    let mut y = DVector::<f64>::zeros(m);
    let mut sigma = 0.3;
    for _ in 0..200 {
        let rp = &b - a_op(&x);
        let rd = &c - a_adj(&y) - &s;
        let pobj = c.dot(&x);
        let dobj = b.dot(&y);
        let gap = (pobj - dobj).abs() / pobj.abs().max(dobj.abs()).max(1e-9);
        if gap <= 1e-8 && rp.norm() <= 1e-9 * (1.0 + b.norm()) && rd.norm() <= 1e-9 {
            return 0.5 * (pobj + dobj) * scale;
        }
        let mu = x.dot(&s) / n as f64;
        let si = s.clone().cholesky().expect("dual slack positive definite").inverse();
        // M_ij = ⟨A_i, X A_j S⁻¹⟩, closed form for the elementary A's.
        let w = |a: usize, bb: usize, k: usize, l: usize| 0.5 * (x[(a, k)] * si[(l, bb)] + x[(a, l)] * si[(k, bb)]);
        let mmat = DMatrix::from_fn(m, m, |i, j| {
            let (ci, cj) = (cons[i], cons[j]);
            0.5 * (w(ci.i, ci.j, cj.i, cj.j) + w(ci.j, ci.i, cj.i, cj.j))
        });
        let rhs = &rp + a_op(&(&x - &si * (sigma * mu) + &x * &rd * &si));
        let dy = mmat.lu().solve(&rhs).expect("Schur complement nonsingular");
        let ds = &rd - a_adj(&dy);
        let dx = sym(-&x + &si * (sigma * mu) - &x * &ds * &si);
        let ap = (0.95 * max_step(&x, &dx)).min(1.0);
        let ad = (0.95 * max_step(&s, &ds)).min(1.0);
        x += &dx * ap;
        s += &ds * ad;
        y += &dy * ad;
        sigma = if ap.min(ad) > 0.9 { 0.05 } else { 0.3 };
    }
    panic!("interior-point oracle did not converge");
}

/// The relaxation value of a graph, with the first translation anchored.
pub fn relaxation_value(graph: &FactorGraph) -> f64 {
    let (off, _) = layout(graph);
    let anchor = off[graph.var_index(&VariableKey::translation(0)).unwrap()];
    solve_relaxation(&dense_q(graph), &constraints(graph), &[anchor])
}

/// Dense aggregate `Y` of an assignment, rows ordered as in [`layout`].
pub fn aggregate(graph: &FactorGraph, a: &LiftedAssignment) -> DMatrix<f64> {
    let (off, n) = layout(graph);
    let mut y = DMatrix::zeros(n, a.p());
    for (k, pt) in a.points().iter().enumerate() {
        let m = pt.to_matrix().transpose();
        y.view_mut((off[k], 0), m.shape()).copy_from(&m);
    }
    y
}

/// Multipliers by least squares on `(Q + Σ λ_m A_m) Y = 0` over the
/// explicit constraint list.
pub fn least_squares_multipliers(q: &DMatrix<f64>, cons: &[Constraint], y: &DMatrix<f64>) -> DVector<f64> {
    let n = q.nrows();
    let cols = DMatrix::from_fn(n * y.ncols(), cons.len(), |r, m| {
        let ay = cons[m].dense(n) * y;
        ay[(r % n, r / n)]
    });
    let qy = q * y;
    let rhs = -DVector::from_column_slice(qy.as_slice());
    cols.svd(true, true).solve(&rhs, 1e-14).expect("svd solve")
}

/// `Σ λ_m A_m`.
pub fn adjoint(cons: &[Constraint], lambda: &DVector<f64>, n: usize) -> DMatrix<f64> {
    cons.iter()
        .zip(lambda.iter())
        .fold(DMatrix::zeros(n, n), |acc, (c, l)| acc + c.dense(n) * *l)
}

pub fn min_eigenvalue(s: &DMatrix<f64>) -> f64 {
    let sym = (s + s.transpose()) * 0.5;
    sym.symmetric_eigenvalues().min()
}

/// Largest deviation of the relative poses (with respect to pose 0) of
/// `estimate` from those of `truth`, translations scaled by their size.
pub fn relative_pose_error(graph: &FactorGraph, estimate: &LiftedAssignment, truth: &LiftedAssignment) -> (f64, f64) {
    let get = |a: &LiftedAssignment, k: VariableKey| a.point(graph.var_index(&k).unwrap()).to_matrix();
    let (r0, t0) = (get(estimate, VariableKey::rotation(0)), get(estimate, VariableKey::translation(0)));
    let (g0, s0) = (get(truth, VariableKey::rotation(0)), get(truth, VariableKey::translation(0)));
    let mut rot = 0.0f64;
    let mut trans = 0.0f64;
    for i in 0..graph.num_poses() {
        let ri = get(estimate, VariableKey::rotation(i));
        let gi = get(truth, VariableKey::rotation(i));
        rot = rot.max((r0.transpose() * &ri - g0.transpose() * &gi).norm());
        let ti = r0.transpose() * (get(estimate, VariableKey::translation(i)) - &t0);
        let si = g0.transpose() * (get(truth, VariableKey::translation(i)) - &s0);
        trans = trans.max((&ti - &si).norm() / si.norm().max(1.0));
    }
    (rot, trans)
}

pub fn synthetic(topology: Topology, dim: usize, size: usize, noise: NoiseSpec, seed: u64) -> SyntheticProblem {
    generate_synthetic(&SyntheticConfig {
        topology,
        chain_dim: dim,
        size,
        noise,
        loop_closure_probability: 0.2,
        seed,
        ..SyntheticConfig::default()
    })
    .expect("valid synthetic config")
}
