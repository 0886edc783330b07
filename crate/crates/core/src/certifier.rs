//! Post-hoc optimality certificates: closed-form block Lagrange multipliers,
//! the certificate matrix `S = Q + Λ`, its minimum eigenpair and the
//! tolerance-adjusted PSD verdict.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifolds::Point;
use crate::objective::{LiftedAssignment, ObjectiveMatrix};
use crate::par;
use crate::sparse::CsrMatrix;

/// Per-variable multiplier data.
#[derive(Clone, Debug, PartialEq)]
pub enum MultiplierBlock {
    Rotation(DMatrix<f64>),
    Bearing(f64),
    Translation,
}

/// Closed-form least-squares multipliers at a feasible assignment.
///
/// For a rotation block row `X` (`d × p`) with gradient block `G = (QY)_n`
/// the estimate is `Λ = −Sym(G Xᵀ)`; for a bearing row `y` it is
/// `λ = −G yᵀ`; translations carry no constraint.
pub fn compute_multipliers(
    q: &ObjectiveMatrix,
    assignment: &LiftedAssignment,
) -> Result<Vec<MultiplierBlock>> {
    let y = assignment.to_block_rows();
    let qy = q.apply(&y)?;
    multipliers_from_product(q, assignment, &qy)
}

fn multipliers_from_product(
    q: &ObjectiveMatrix,
    assignment: &LiftedAssignment,
    qy: &DMatrix<f64>,
) -> Result<Vec<MultiplierBlock>> {
    let index = q.index();
    if assignment.points().len() != index.len() {
        return Err(Error::shape(index.len(), assignment.points().len()));
    }
    let ids: Vec<usize> = (0..index.len()).collect();
    Ok(par::map(&ids, |&n| {
        let g = qy.rows(index.offset(n), index.size(n));
        match assignment.point(n) {
            Point::Stiefel(s) => {
                let gx = g * s.matrix();
                MultiplierBlock::Rotation((&gx + gx.transpose()) * -0.5)
            }
            Point::Sphere(s) => MultiplierBlock::Bearing(-(g * s.vector())[0]),
            Point::Euclidean(_) => MultiplierBlock::Translation,
        }
    }))
}

/// `S = Q + blockdiag(multipliers)`.
pub fn assemble_certificate(
    q: &ObjectiveMatrix,
    multipliers: &[MultiplierBlock],
) -> Result<CsrMatrix> {
    let index = q.index();
    if multipliers.len() != index.len() {
        return Err(Error::shape(index.len(), multipliers.len()));
    }
    let mut t = q.matrix().triplets();
    for (n, m) in multipliers.iter().enumerate() {
        let o = index.offset(n);
        match m {
            MultiplierBlock::Rotation(l) => {
                if l.shape() != (index.size(n), index.size(n)) {
                    return Err(Error::shape(
                        format!("{0}x{0} multiplier", index.size(n)),
                        format!("{}x{}", l.nrows(), l.ncols()),
                    ));
                }
                for i in 0..l.nrows() {
                    for j in 0..l.ncols() {
                        t.push((o + i, o + j, l[(i, j)]));
                    }
                }
            }
            MultiplierBlock::Bearing(l) => {
                if index.size(n) != 1 {
                    return Err(Error::shape("1x1 multiplier block", index.size(n)));
                }
                t.push((o, o, *l));
            }
            MultiplierBlock::Translation => {}
        }
    }
    CsrMatrix::from_triplets(q.dim(), q.dim(), &t)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToleranceRule {
    pub eta_min: f64,
    pub eta_max: f64,
    pub relative: f64,
}

impl Default for ToleranceRule {
    fn default() -> Self {
        Self {
            eta_min: 1e-3,
            eta_max: 1e-1,
            relative: 1e-6,
        }
    }
}

impl ToleranceRule {
    /// `η = min(η_max, max(relative · f⋆, η_min))`.
    pub fn eta(&self, f_star: f64) -> f64 {
        self.eta_max.min((self.relative * f_star).max(self.eta_min))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta_min > 0.0 && self.eta_min <= self.eta_max && self.relative >= 0.0) {
            return Err(Error::InvalidConfig(format!("invalid tolerance rule {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EigenOptions {
    /// Residual tolerance, relative to `max(1, ‖S‖∞)`.
    pub tol: f64,
    /// Largest dimension handled by the dense eigensolver.
    pub dense_threshold: usize,
    pub krylov_dim: usize,
    pub keep: usize,
    pub max_matvecs: usize,
    pub seed: u64,
}

impl Default for EigenOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            dense_threshold: 2000,
            krylov_dim: 60,
            keep: 12,
            max_matvecs: 50_000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EigenPair {
    pub value: f64,
    pub vector: DVector<f64>,
    /// `‖S v − λ v‖`.
    pub residual: f64,
    pub matvecs: usize,
}

/// Smallest eigenvalue of a symmetric matrix and a unit eigenvector.
pub fn min_eigenpair(s: &CsrMatrix, opts: &EigenOptions) -> Result<EigenPair> {
    let r = s.nrows();
    if r != s.ncols() {
        return Err(Error::shape("square matrix", format!("{}x{}", r, s.ncols())));
    }
    if r == 0 {
        return Err(Error::EmptyGraph);
    }
    if r <= opts.dense_threshold {
        return dense_min_eigenpair(s);
    }
    lanczos_min_eigenpair(s, opts)
}

fn dense_min_eigenpair(s: &CsrMatrix) -> Result<EigenPair> {
    let eig = SymmetricEigen::new(s.to_dense());
    let k = eig.eigenvalues.imin();
    let value = eig.eigenvalues[k];
    let vector = eig.eigenvectors.column(k).normalize();
    let residual = (s.mul_vec(&vector)? - &vector * value).norm();
    Ok(EigenPair {
        value,
        vector,
        residual,
        matvecs: 0,
    })
}

/// Thick-restart Lanczos with full reorthogonalization on `σI − S`, where
/// `σ` bounds the spectrum of `S` from above.
fn lanczos_min_eigenpair(s: &CsrMatrix, opts: &EigenOptions) -> Result<EigenPair> {
    let r = s.nrows();
    let sigma = s.gershgorin_upper().max(0.0) + 1.0;
    let scale = s.max_row_norm().max(1.0);
    let target = opts.tol * scale;
    let m_max = opts.krylov_dim.clamp(2, r);
    let keep = opts.keep.clamp(1, m_max - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let apply = |x: &DVector<f64>| -> Result<DVector<f64>> { Ok(x * sigma - s.mul_vec(x)?) };

    let mut v: Vec<DVector<f64>> = Vec::with_capacity(m_max);
    let mut w: Vec<DVector<f64>> = Vec::with_capacity(m_max);
    let mut next = DVector::from_fn(r, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut matvecs = 0;
    let mut best: Option<(f64, DVector<f64>, f64)> = None;
    loop {
        while v.len() < m_max {
            let mut x = next.clone();
            for _ in 0..2 {
                for b in &v {
                    let c = b.dot(&x);
                    x.axpy(-c, b, 1.0);
                }
            }
            let n = x.norm();
            if n <= 1e-10 * next.norm().max(1e-300) {
                // invariant subspace: continue with a fresh random direction
                next = DVector::from_fn(r, |_, _| rng.sample::<f64, _>(StandardNormal));
                if v.len() >= r {
                    break;
                }
                continue;
            }
            x /= n;
            let ax = apply(&x)?;
            matvecs += 1;
            next = ax.clone();
            v.push(x);
            w.push(ax);
        }
        let m = v.len();
        let vm = DMatrix::from_columns(&v);
        let wm = DMatrix::from_columns(&w);
        let t = vm.tr_mul(&wm);
        let t = (&t + t.transpose()) * 0.5;
        let eig = SymmetricEigen::new(t);
        let mut idx: Vec<usize> = (0..m).collect();
        idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let y0 = eig.eigenvectors.column(idx[0]).into_owned();
        let theta = eig.eigenvalues[idx[0]];
        let u = &vm * &y0;
        let au = &wm * &y0;
        let res_vec = &au - &u * theta;
        let residual = res_vec.norm();
        if best.as_ref().is_none_or(|b| residual < b.2) {
            best = Some((sigma - theta, u.clone(), residual));
        }
        if residual <= target || m >= r {
            let vector = u.normalize();
            let value = sigma - theta;
            let residual = (s.mul_vec(&vector)? - &vector * value).norm();
            return Ok(EigenPair {
                value,
                vector,
                residual,
                matvecs,
            });
        }
        if matvecs >= opts.max_matvecs {
            let (_, _, residual) = best.expect("at least one Ritz pair");
            return Err(Error::EigenNonConvergence {
                iterations: matvecs,
                residual,
            });
        }
        let ym = DMatrix::from_fn(m, keep, |i, j| eig.eigenvectors[(i, idx[j])]);
        let vk = &vm * &ym;
        let wk = &wm * &ym;
        v = vk.column_iter().map(|c| c.into_owned()).collect();
        w = wk.column_iter().map(|c| c.into_owned()).collect();
        next = res_vec;
    }
}

/// The verdict for a computed eigenpair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub certified: bool,
    pub eta: f64,
}

/// Certified iff `λ_min > −η` with `η` from the rule.
pub fn certify(lambda_min: f64, f_star: f64, rule: &ToleranceRule) -> Verdict {
    let eta = rule.eta(f_star);
    Verdict {
        certified: lambda_min > -eta,
        eta,
    }
}

/// Everything computed while certifying one stationary point.
#[derive(Clone, Debug)]
pub struct Certificate {
    pub s: CsrMatrix,
    pub multipliers: Vec<MultiplierBlock>,
    pub f_star: f64,
    pub lambda_min: f64,
    pub v_min: DVector<f64>,
    pub eigen_residual: f64,
    pub eta: f64,
    pub certified: bool,
    /// `‖S Y‖_F`.
    pub stationarity_residual: f64,
}

/// Multipliers, `S`, minimum eigenpair and verdict at `assignment`.
pub fn build_certificate(
    q: &ObjectiveMatrix,
    assignment: &LiftedAssignment,
    f_star: f64,
    rule: &ToleranceRule,
    opts: &EigenOptions,
) -> Result<Certificate> {
    let y = assignment.to_block_rows();
    let qy = q.apply(&y)?;
    let multipliers = multipliers_from_product(q, assignment, &qy)?;
    let s = assemble_certificate(q, &multipliers)?;
    let stationarity_residual = s.mul_dense(&y)?.norm();
    let eig = min_eigenpair(&s, opts)?;
    let verdict = certify(eig.value, f_star, rule);
    Ok(Certificate {
        s,
        multipliers,
        f_star,
        lambda_min: eig.value,
        v_min: eig.vector,
        eigen_residual: eig.residual,
        eta: verdict.eta,
        certified: verdict.certified,
        stationarity_residual,
    })
}

/// Upper bound on the suboptimality of a feasible point.
pub fn suboptimality_bound(f_feasible: f64, f_sdp: f64) -> f64 {
    f_feasible - f_sdp
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{lift, random_initialization, rot2, GraphBuilder, VariableKey};
    use crate::objective::assemble_q;
    use crate::optimizer::{local_optimize, OptimizerConfig};
    use nalgebra::DVector;
    use rand::SeedableRng;

    fn ring(n: usize, noise: f64, seed: u64) -> crate::graph::FactorGraph {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = GraphBuilder::new(2);
        for i in 0..n {
            b.add_pose(i);
        }
        let step = 2.0 * std::f64::consts::PI / n as f64;
        for i in 0..n {
            let e: f64 = rng.sample::<f64, _>(StandardNormal) * noise;
            b.add_relative_pose(
                i,
                (i + 1) % n,
                rot2(step + e),
                DVector::from_vec(vec![1.0, e]),
                1.0,
                1.0,
            );
        }
        b.build().unwrap()
    }

    #[test]
    fn zero_q_gives_zero_multipliers() {
        let mut b = GraphBuilder::new(2);
        b.add_pose(0).add_pose(1).add_landmark(0);
        b.add_range(VariableKey::translation(0), VariableKey::landmark(0), 1.0, 1.0);
        let g = b.build().unwrap();
        // remove the only factor's contribution by building Q for a copy
        // with no factors: zero Q
        let mut bare = GraphBuilder::new(2);
        bare.add_pose(0).add_pose(1).add_landmark(0);
        let q = assemble_q(&bare.build().unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_initialization(&g, 3, &mut rng).unwrap();
        let pts: Vec<_> = a.points()[..5].to_vec();
        let a = LiftedAssignment::new(pts).unwrap();
        let m = compute_multipliers(&q, &a).unwrap();
        for b in &m {
            match b {
                MultiplierBlock::Rotation(l) => assert_eq!(l.amax(), 0.0),
                MultiplierBlock::Bearing(l) => assert_eq!(*l, 0.0),
                MultiplierBlock::Translation => {}
            }
        }
        let s = assemble_certificate(&q, &m).unwrap();
        assert_eq!(s.to_dense(), q.matrix().to_dense());
    }

    #[test]
    fn rotation_multiplier_matches_dense_least_squares() {
        let g = ring(5, 0.3, 2);
        let q = assemble_q(&g);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_initialization(&g, 3, &mut rng).unwrap();
        let qy = q.apply(&a.to_block_rows()).unwrap();
        let m = compute_multipliers(&q, &a).unwrap();
        for n in 0..g.variables().len() {
            let Point::Stiefel(s) = a.point(n) else { continue };
            let x = s.matrix().transpose();
            let gblk = qy.rows(q.index().offset(n), 2).into_owned();
            // min over symmetric Λ of ‖G + Λ X‖ in the basis E11, E22, E12+E21
            let basis = [
                DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]),
                DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 1.0]),
                DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]),
            ];
            let cols: Vec<DVector<f64>> = basis
                .iter()
                .map(|e| DVector::from_column_slice((e * &x).as_slice()))
                .collect();
            let a_ls = DMatrix::from_columns(&cols);
            let b_ls = -DVector::from_column_slice(gblk.as_slice());
            let coef = a_ls.clone().svd(true, true).solve(&b_ls, 1e-14).unwrap();
            let lam: DMatrix<f64> = basis
                .iter()
                .zip(coef.iter())
                .map(|(e, c)| e * *c)
                .fold(DMatrix::zeros(2, 2), |acc, e| acc + e);
            let MultiplierBlock::Rotation(closed) = &m[n] else { panic!() };
            assert!((closed - lam).amax() <= 1e-10);
        }
    }

    #[test]
    fn multipliers_are_locally_optimal() {
        let g = ring(6, 0.2, 5);
        let q = assemble_q(&g);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random_initialization(&g, 4, &mut rng).unwrap();
        let qy = q.apply(&a.to_block_rows()).unwrap();
        let m = compute_multipliers(&q, &a).unwrap();
        for n in 0..g.variables().len() {
            let Point::Stiefel(s) = a.point(n) else { continue };
            let x = s.matrix().transpose();
            let gblk = qy.rows(q.index().offset(n), 2).into_owned();
            let MultiplierBlock::Rotation(l) = &m[n] else { panic!() };
            let base = (&gblk + l * &x).norm_squared();
            for _ in 0..50 {
                let p = DMatrix::from_fn(2, 2, |_, _| rng.sample::<f64, _>(StandardNormal) * 1e-3);
                let p = &p + p.transpose();
                assert!((&gblk + (l + p) * &x).norm_squared() >= base - 1e-14);
            }
        }
    }

    #[test]
    fn solved_instance_is_stationary_and_certified() {
        let g = ring(8, 0.0, 0);
        let q = assemble_q(&g);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let init = random_initialization(&g, 3, &mut rng).unwrap();
        let tight = OptimizerConfig {
            absolute_error: 1e-14,
            relative_error: 1e-12,
            ..OptimizerConfig::default()
        };
        let sp = local_optimize(&lift(&g, 3).unwrap(), &q, init, &tight).unwrap();
        let cert = build_certificate(
            &q,
            &sp.assignment,
            sp.objective,
            &ToleranceRule::default(),
            &EigenOptions::default(),
        )
        .unwrap();
        assert!(cert.s.is_symmetric());
        assert!(cert.stationarity_residual <= 1e-8, "{}", cert.stationarity_residual);
        assert!(cert.certified);
        let qy = q.apply(&sp.assignment.to_block_rows()).unwrap();
        for (n, m) in cert.multipliers.iter().enumerate() {
            if let MultiplierBlock::Rotation(l) = m {
                let o = q.index().offset(n);
                let x = sp.assignment.point(n).block_row();
                let kkt = (qy.rows(o, 2) + l * x).norm();
                assert!(kkt <= 1e-6 * qy.norm().max(1e-300) || kkt <= 1e-10);
            }
        }
    }

    #[test]
    fn eigenpairs_of_small_matrices() {
        let s = CsrMatrix::from_dense(&DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, -1.0, 2.0])));
        let e = min_eigenpair(&s, &EigenOptions::default()).unwrap();
        assert!((e.value + 1.0).abs() <= 1e-12);
        assert!((e.vector[1].abs() - 1.0).abs() <= 1e-12);
        let i = CsrMatrix::from_dense(&DMatrix::identity(4, 4));
        let e = min_eigenpair(&i, &EigenOptions::default()).unwrap();
        assert!((e.value - 1.0).abs() <= 1e-12);
        assert!((e.vector.norm() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn lanczos_matches_dense_on_sparse_random_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 200;
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, rng.random_range(-1.0..4.0)));
            for _ in 0..3 {
                let j = rng.random_range(0..n);
                let v: f64 = rng.sample(StandardNormal);
                t.push((i, j, v));
                t.push((j, i, v));
            }
        }
        let s = CsrMatrix::from_triplets(n, n, &t).unwrap();
        let dense = min_eigenpair(&s, &EigenOptions::default()).unwrap();
        let opts = EigenOptions {
            dense_threshold: 0,
            tol: 1e-10,
            ..EigenOptions::default()
        };
        let lz = min_eigenpair(&s, &opts).unwrap();
        assert!((lz.value - dense.value).abs() <= 1e-8, "{} {}", lz.value, dense.value);
        assert!(lz.residual <= 1e-10 * s.max_row_norm().max(1.0) * 1.01);
        assert!((lz.vector.norm() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn tolerance_rule_examples() {
        let rule = ToleranceRule::default();
        assert!((rule.eta(1.025e3) - 1.025e-3).abs() <= 1e-18);
        assert_eq!(rule.eta(0.0), 1e-3);
        assert_eq!(rule.eta(1e9), 1e-1);
        assert!(certify(-0.9e-3, 0.0, &rule).certified);
        assert!(!certify(-1.1e-3, 0.0, &rule).certified);
        assert_eq!(suboptimality_bound(5.0, 5.0), 0.0);
    }
}
