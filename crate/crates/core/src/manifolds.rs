//! Lifted variable domains: the Stiefel manifold `St(d, p)` for rotations,
//! the unit sphere `S^{p-1}` for bearings and `R^p` for translations.
//!
//! Every point is stored in its natural `p × k` form (`k = d` for Stiefel
//! points, `k = 1` otherwise). The aggregate block-row matrix used by the
//! objective holds the transpose of each point.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Maximum constraint violation accepted for a constructed point.
pub const CONSTRAINT_TOL: f64 = 1e-10;

const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManifoldKind {
    Stiefel,
    Sphere,
    Euclidean,
}

/// A `p × d` matrix with orthonormal columns.
#[derive(Clone, Debug, PartialEq)]
pub struct StiefelPoint {
    matrix: DMatrix<f64>,
}

impl StiefelPoint {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        let (p, d) = matrix.shape();
        if d == 0 || p < d {
            return Err(Error::InvalidDimensions { d, p });
        }
        let point = Self { matrix };
        let res = point.orthonormality_residual();
        if !(res <= CONSTRAINT_TOL) {
            return Err(Error::InvalidMeasurement(format!(
                "columns are not orthonormal (residual {res:e})"
            )));
        }
        Ok(point)
    }

    /// Embeds a `d × d` orthogonal matrix into `St(d, p)` by zero padding.
    pub fn from_orthogonal(r: &DMatrix<f64>, p: usize) -> Result<Self> {
        let d = r.nrows();
        if r.ncols() != d || p < d {
            return Err(Error::InvalidDimensions { d, p });
        }
        let mut m = DMatrix::zeros(p, d);
        m.view_mut((0, 0), (d, d)).copy_from(r);
        Self::new(m)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn d(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn p(&self) -> usize {
        self.matrix.nrows()
    }

    /// Max-abs entry of `MᵀM − I`.
    pub fn orthonormality_residual(&self) -> f64 {
        let g = self.matrix.transpose() * &self.matrix;
        let d = g.nrows();
        (&g - DMatrix::<f64>::identity(d, d)).amax()
    }
}

/// A unit vector in `R^p`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpherePoint {
    vector: DVector<f64>,
}

impl SpherePoint {
    pub fn new(vector: DVector<f64>) -> Result<Self> {
        if vector.is_empty() {
            return Err(Error::InvalidDimensions { d: 1, p: 0 });
        }
        let res = (vector.norm() - 1.0).abs();
        if !(res <= CONSTRAINT_TOL) {
            return Err(Error::InvalidMeasurement(format!(
                "vector is not unit norm (residual {res:e})"
            )));
        }
        Ok(Self { vector })
    }

    pub fn vector(&self) -> &DVector<f64> {
        &self.vector
    }

    pub fn p(&self) -> usize {
        self.vector.len()
    }
}

/// An unconstrained vector in `R^p`.
#[derive(Clone, Debug, PartialEq)]
pub struct EuclideanPoint {
    vector: DVector<f64>,
}

impl EuclideanPoint {
    pub fn new(vector: DVector<f64>) -> Result<Self> {
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidMeasurement("non-finite translation".into()));
        }
        Ok(Self { vector })
    }

    pub fn vector(&self) -> &DVector<f64> {
        &self.vector
    }

    pub fn p(&self) -> usize {
        self.vector.len()
    }
}

/// A point on one of the lifted domains.
#[derive(Clone, Debug, PartialEq)]
pub enum Point {
    Stiefel(StiefelPoint),
    Sphere(SpherePoint),
    Euclidean(EuclideanPoint),
}

/// A tangent vector, stored with the same `p × k` shape as its base point.
#[derive(Clone, Debug, PartialEq)]
pub struct TangentVector {
    kind: ManifoldKind,
    data: DMatrix<f64>,
}

impl TangentVector {
    pub fn kind(&self) -> ManifoldKind {
        self.kind
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn scaled(&self, s: f64) -> TangentVector {
        TangentVector {
            kind: self.kind,
            data: &self.data * s,
        }
    }

    pub fn norm(&self) -> f64 {
        self.data.norm()
    }
}

impl Point {
    pub fn kind(&self) -> ManifoldKind {
        match self {
            Point::Stiefel(_) => ManifoldKind::Stiefel,
            Point::Sphere(_) => ManifoldKind::Sphere,
            Point::Euclidean(_) => ManifoldKind::Euclidean,
        }
    }

    /// Lift rank `p`.
    pub fn rank(&self) -> usize {
        match self {
            Point::Stiefel(s) => s.p(),
            Point::Sphere(s) => s.p(),
            Point::Euclidean(e) => e.p(),
        }
    }

    /// Number of columns in the `p × k` storage form.
    pub fn cols(&self) -> usize {
        match self {
            Point::Stiefel(s) => s.d(),
            _ => 1,
        }
    }

    /// The point as a `p × k` matrix.
    pub fn to_matrix(&self) -> DMatrix<f64> {
        match self {
            Point::Stiefel(s) => s.matrix.clone(),
            Point::Sphere(s) => DMatrix::from_column_slice(s.p(), 1, s.vector.as_slice()),
            Point::Euclidean(e) => DMatrix::from_column_slice(e.p(), 1, e.vector.as_slice()),
        }
    }

    /// The point's block row (`k × p`) in the aggregate decision variable.
    pub fn block_row(&self) -> DMatrix<f64> {
        self.to_matrix().transpose()
    }

    /// Builds a point of the given kind from its `p × k` matrix, checking the
    /// domain constraint.
    pub fn from_matrix(kind: ManifoldKind, m: DMatrix<f64>) -> Result<Point> {
        match kind {
            ManifoldKind::Stiefel => Ok(Point::Stiefel(StiefelPoint::new(m)?)),
            ManifoldKind::Sphere | ManifoldKind::Euclidean => {
                if m.ncols() != 1 {
                    return Err(Error::shape("one column", format!("{} columns", m.ncols())));
                }
                let v = DVector::from_column_slice(m.as_slice());
                if kind == ManifoldKind::Sphere {
                    Ok(Point::Sphere(SpherePoint::new(v)?))
                } else {
                    Ok(Point::Euclidean(EuclideanPoint::new(v)?))
                }
            }
        }
    }

    /// Max constraint violation of the domain's defining equations.
    pub fn constraint_residual(&self) -> f64 {
        match self {
            Point::Stiefel(s) => s.orthonormality_residual(),
            Point::Sphere(s) => (s.vector.norm() - 1.0).abs(),
            Point::Euclidean(_) => 0.0,
        }
    }

    pub fn tangent_dim(&self) -> usize {
        tangent_dim(self.kind(), self.cols(), self.rank())
    }

    fn check_shape(&self, m: &DMatrix<f64>) -> Result<()> {
        let expected = (self.rank(), self.cols());
        if m.shape() != expected {
            return Err(Error::shape(
                format!("{}x{}", expected.0, expected.1),
                format!("{}x{}", m.nrows(), m.ncols()),
            ));
        }
        Ok(())
    }

    /// Orthogonal projection of an ambient `p × k` matrix onto the tangent
    /// space at this point.
    pub fn project(&self, ambient: &DMatrix<f64>) -> Result<TangentVector> {
        self.check_shape(ambient)?;
        let data = match self {
            Point::Stiefel(s) => {
                let m = &s.matrix;
                let mtv = m.transpose() * ambient;
                let sym = (&mtv + mtv.transpose()) * 0.5;
                ambient - m * sym
            }
            Point::Sphere(s) => {
                let u = &s.vector;
                let a = DVector::from_column_slice(ambient.as_slice());
                let t = &a - u * u.dot(&a);
                DMatrix::from_column_slice(t.len(), 1, t.as_slice())
            }
            Point::Euclidean(_) => ambient.clone(),
        };
        Ok(TangentVector {
            kind: self.kind(),
            data,
        })
    }

    /// Wraps a matrix already known to be tangent (no projection applied).
    pub fn tangent_unchecked(&self, data: DMatrix<f64>) -> Result<TangentVector> {
        self.check_shape(&data)?;
        Ok(TangentVector {
            kind: self.kind(),
            data,
        })
    }

    /// First-order retraction. Stiefel points use a sign-corrected thin QR of
    /// `M + V`, spheres use metric projection, translations are additive.
    pub fn retract(&self, tangent: &TangentVector) -> Result<Point> {
        if tangent.kind != self.kind() {
            return Err(Error::shape(
                format!("{:?} tangent", self.kind()),
                format!("{:?} tangent", tangent.kind),
            ));
        }
        self.check_shape(&tangent.data)?;
        if tangent.data.iter().all(|&v| v == 0.0) {
            return Ok(self.clone());
        }
        match self {
            Point::Stiefel(s) => {
                let q = sign_corrected_qr(&s.matrix + &tangent.data)?;
                Ok(Point::Stiefel(StiefelPoint::new(q)?))
            }
            Point::Sphere(s) => {
                let t = DVector::from_column_slice(tangent.data.as_slice());
                let x = &s.vector + t;
                let n = x.norm();
                if !(n >= DEGENERATE_NORM) {
                    return Err(Error::DegenerateRetraction(
                        "sphere step lands on the origin".into(),
                    ));
                }
                Ok(Point::Sphere(SpherePoint::new(x / n)?))
            }
            Point::Euclidean(e) => {
                let t = DVector::from_column_slice(tangent.data.as_slice());
                Ok(Point::Euclidean(EuclideanPoint::new(&e.vector + t)?))
            }
        }
    }

    /// Embeds the point at rank `p + 1` by appending a zero row.
    pub fn lifted(&self) -> Point {
        self.lifted_to(self.rank() + 1)
    }

    /// Zero-pads the point up to rank `p_new ≥ p`.
    pub fn lifted_to(&self, p_new: usize) -> Point {
        assert!(p_new >= self.rank(), "cannot lift to a lower rank");
        let m = self.to_matrix();
        let mut out = DMatrix::zeros(p_new, m.ncols());
        out.view_mut((0, 0), m.shape()).copy_from(&m);
        match self {
            Point::Stiefel(_) => Point::Stiefel(StiefelPoint { matrix: out }),
            Point::Sphere(_) => Point::Sphere(SpherePoint {
                vector: DVector::from_column_slice(out.as_slice()),
            }),
            Point::Euclidean(_) => Point::Euclidean(EuclideanPoint {
                vector: DVector::from_column_slice(out.as_slice()),
            }),
        }
    }

    /// An orthonormal basis of the tangent space (Frobenius inner product),
    /// each element in `p × k` form.
    pub fn tangent_basis(&self) -> Vec<DMatrix<f64>> {
        let p = self.rank();
        match self {
            Point::Stiefel(s) => {
                let m = &s.matrix;
                let d = s.d();
                let n = orthonormal_complement(m);
                let mut basis = Vec::with_capacity(tangent_dim(ManifoldKind::Stiefel, d, p));
                let inv_sqrt2 = std::f64::consts::FRAC_1_SQRT_2;
                for a in 0..d {
                    for b in a + 1..d {
                        let mut omega = DMatrix::zeros(d, d);
                        omega[(a, b)] = inv_sqrt2;
                        omega[(b, a)] = -inv_sqrt2;
                        basis.push(m * omega);
                    }
                }
                for i in 0..n.ncols() {
                    for j in 0..d {
                        let mut e = DMatrix::zeros(p, d);
                        e.set_column(j, &n.column(i));
                        basis.push(e);
                    }
                }
                basis
            }
            Point::Sphere(s) => {
                let u = DMatrix::from_column_slice(p, 1, s.vector.as_slice());
                let n = orthonormal_complement(&u);
                (0..n.ncols())
                    .map(|i| DMatrix::from_column_slice(p, 1, n.column(i).as_slice()))
                    .collect()
            }
            Point::Euclidean(_) => (0..p)
                .map(|i| {
                    let mut e = DMatrix::zeros(p, 1);
                    e[(i, 0)] = 1.0;
                    e
                })
                .collect(),
        }
    }
}

/// Dimension of the tangent space of a `kind` domain with `k` columns at rank
/// `p`: `kp − k(k+1)/2` for Stiefel, `p − 1` for the sphere, `p` otherwise.
pub fn tangent_dim(kind: ManifoldKind, k: usize, p: usize) -> usize {
    match kind {
        ManifoldKind::Stiefel => k * p - k * (k + 1) / 2,
        ManifoldKind::Sphere => p - 1,
        ManifoldKind::Euclidean => p,
    }
}

pub fn project_to_tangent(point: &Point, ambient: &DMatrix<f64>) -> Result<TangentVector> {
    point.project(ambient)
}

pub fn retract(point: &Point, tangent: &TangentVector) -> Result<Point> {
    point.retract(tangent)
}

pub fn lift_rank(point: &Point) -> Point {
    point.lifted()
}

/// Samples a point uniformly (with respect to the invariant measure) on the
/// requested domain. Euclidean points are standard Gaussian.
pub fn random_point<R: Rng + ?Sized>(
    kind: ManifoldKind,
    d: usize,
    p: usize,
    rng: &mut R,
) -> Result<Point> {
    if d == 0 || p < d {
        return Err(Error::InvalidDimensions { d, p });
    }
    match kind {
        ManifoldKind::Stiefel => loop {
            let g = DMatrix::from_fn(p, d, |_, _| rng.sample::<f64, _>(StandardNormal));
            // rank deficiency has probability zero; resample if it happens
            if let Ok(q) = sign_corrected_qr(g) {
                return Ok(Point::Stiefel(StiefelPoint::new(q)?));
            }
        },
        ManifoldKind::Sphere => loop {
            let g = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
            let n = g.norm();
            if n > DEGENERATE_NORM {
                return Ok(Point::Sphere(SpherePoint::new(g / n)?));
            }
        },
        ManifoldKind::Euclidean => {
            let g = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
            Ok(Point::Euclidean(EuclideanPoint::new(g)?))
        }
    }
}

/// Thin QR with the diagonal of `R` made positive, so the `Q` factor is a
/// continuous function of its argument.
fn sign_corrected_qr(a: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let scale = a.amax().max(1.0);
    let qr = a.qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..q.ncols() {
        let rjj = r[(j, j)];
        if !(rjj.abs() > DEGENERATE_NORM * scale) {
            return Err(Error::DegenerateRetraction(
                "rank-deficient Stiefel factor".into(),
            ));
        }
        if rjj < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    Ok(q)
}

/// Returns a `p × (p − k)` matrix `N` such that `[M N]` is orthogonal, given
/// `M` (`p × k`) with orthonormal columns.
pub fn orthonormal_complement(m: &DMatrix<f64>) -> DMatrix<f64> {
    let (p, k) = m.shape();
    let mut basis: Vec<DVector<f64>> = (0..k).map(|j| m.column(j).into_owned()).collect();
    let mut out = DMatrix::zeros(p, p - k);
    for col in 0..p - k {
        // greedily pick the coordinate axis with the largest residual
        let mut best: Option<(f64, DVector<f64>)> = None;
        for i in 0..p {
            let mut v = DVector::zeros(p);
            v[i] = 1.0;
            for _ in 0..2 {
                for b in &basis {
                    let c = b.dot(&v);
                    v.axpy(-c, b, 1.0);
                }
            }
            let n = v.norm();
            if best.as_ref().is_none_or(|(bn, _)| n > *bn) {
                best = Some((n, v));
            }
        }
        let (n, v) = best.expect("p > 0");
        let v = v / n;
        out.set_column(col, &v);
        basis.push(v);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_ambient(p: usize, k: usize, r: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(p, k, |_, _| r.sample::<f64, _>(StandardNormal))
    }

    #[test]
    fn projecting_stiefel_base_point_leaves_skew_part() {
        let mut r = rng(1);
        let x = random_point(ManifoldKind::Stiefel, 3, 5, &mut r).unwrap();
        let m = x.to_matrix();
        let t = x.project(&m).unwrap();
        let mtv = m.transpose() * t.data();
        assert!((&mtv + mtv.transpose()).amax() <= 1e-12);
        // M itself is purely normal, so its projection vanishes
        assert!(t.data().amax() <= 1e-12);
    }

    #[test]
    fn sphere_projection_removes_radial_component() {
        let u = Point::Sphere(SpherePoint::new(DVector::from_vec(vec![1.0, 0.0, 0.0])).unwrap());
        let t = u
            .project(&DMatrix::from_column_slice(3, 1, &[1.0, 1.0, 0.0]))
            .unwrap();
        assert_eq!(t.data().as_slice(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn projection_matches_dense_tangent_basis_oracle() {
        // Oracle: tangent space as the null space of the linearized
        // constraint map V ↦ Sym(MᵀV), computed by SVD, then an explicit
        // least-squares projection.
        let mut r = rng(7);
        for _ in 0..20 {
            let (d, p) = (3, 5);
            let x = random_point(ManifoldKind::Stiefel, d, p, &mut r).unwrap();
            let m = x.to_matrix();
            let a = random_ambient(p, d, &mut r);

            let n = p * d;
            let ncon = d * (d + 1) / 2;
            let mut lin = DMatrix::zeros(ncon, n);
            for col in 0..n {
                let mut e = DMatrix::zeros(p, d);
                e[(col % p, col / p)] = 1.0;
                let mte = m.transpose() * &e;
                let sym = &mte + mte.transpose();
                let mut row = 0;
                for i in 0..d {
                    for j in i..d {
                        lin[(row, col)] = sym[(i, j)];
                        row += 1;
                    }
                }
            }
            let svd = nalgebra::SVD::new(lin.transpose() * &lin, true, true);
            let v = svd.v_t.unwrap().transpose();
            // eigenvectors with zero singular value span the tangent space
            let mut tangent_cols = Vec::new();
            for (i, s) in svd.singular_values.iter().enumerate() {
                if *s < 1e-9 {
                    tangent_cols.push(v.column(i).into_owned());
                }
            }
            assert_eq!(tangent_cols.len(), tangent_dim(ManifoldKind::Stiefel, d, p));
            let b = DMatrix::from_columns(&tangent_cols);
            let av = DVector::from_column_slice(a.as_slice());
            let proj = &b * (b.transpose() * av);

            let t = x.project(&a).unwrap();
            let diff = (DVector::from_column_slice(t.data().as_slice()) - proj).amax();
            assert!(diff <= 1e-10, "projection mismatch {diff:e}");
        }
    }

    #[test]
    fn projection_is_idempotent_and_self_adjoint() {
        let mut r = rng(3);
        for kind in [ManifoldKind::Stiefel, ManifoldKind::Sphere, ManifoldKind::Euclidean] {
            let d = if kind == ManifoldKind::Stiefel { 2 } else { 1 };
            let x = random_point(kind, d, 4, &mut r).unwrap();
            let k = x.cols();
            let a = random_ambient(4, k, &mut r);
            let b = random_ambient(4, k, &mut r);
            let pa = x.project(&a).unwrap();
            let ppa = x.project(pa.data()).unwrap();
            assert!((pa.data() - ppa.data()).amax() <= 1e-12);
            let pb = x.project(&b).unwrap();
            let lhs = pa.data().dot(&b);
            let rhs = a.dot(pb.data());
            assert!((lhs - rhs).abs() <= 1e-12);
        }
    }

    #[test]
    fn projection_rejects_shape_mismatch() {
        let x = random_point(ManifoldKind::Stiefel, 2, 3, &mut rng(0)).unwrap();
        assert!(matches!(
            x.project(&DMatrix::zeros(3, 3)),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn zero_step_retraction_is_bitwise_identity() {
        let mut r = rng(11);
        for kind in [ManifoldKind::Stiefel, ManifoldKind::Sphere, ManifoldKind::Euclidean] {
            let x = random_point(kind, 2, 4, &mut r).unwrap();
            let zero = x.project(&DMatrix::zeros(4, x.cols())).unwrap();
            assert_eq!(x.retract(&zero).unwrap(), x);
        }
    }

    #[test]
    fn sphere_retraction_is_metric_projection() {
        let x = Point::Sphere(SpherePoint::new(DVector::from_vec(vec![1.0, 0.0, 0.0])).unwrap());
        let t = x
            .project(&DMatrix::from_column_slice(3, 1, &[0.0, 1.0, 0.0]))
            .unwrap();
        let y = x.retract(&t).unwrap().to_matrix();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((y - DMatrix::from_column_slice(3, 1, &[s, s, 0.0])).amax() <= 1e-15);
    }

    #[test]
    fn antipodal_sphere_step_is_an_error() {
        let x = Point::Sphere(SpherePoint::new(DVector::from_vec(vec![1.0, 0.0])).unwrap());
        // not a tangent vector, but exercises the degenerate guard
        let t = x
            .tangent_unchecked(DMatrix::from_column_slice(2, 1, &[-1.0, 0.0]))
            .unwrap();
        assert!(matches!(x.retract(&t), Err(Error::DegenerateRetraction(_))));
    }

    #[test]
    fn stiefel_retraction_is_second_order_close_to_the_ambient_step() {
        let mut r = rng(5);
        let x = random_point(ManifoldKind::Stiefel, 3, 5, &mut r).unwrap();
        let v = x.project(&random_ambient(5, 3, &mut r)).unwrap();
        let mut errs = Vec::new();
        for t in [1e-2, 1e-3, 1e-4] {
            let y = x.retract(&v.scaled(t)).unwrap();
            assert!(y.constraint_residual() <= 1e-10);
            errs.push((y.to_matrix() - (x.to_matrix() + v.data() * t)).norm());
        }
        // quadratic decay: each 10x step reduction shrinks the gap ~100x
        assert!(errs[0] / errs[1] > 50.0 && errs[1] / errs[2] > 50.0, "{errs:?}");
    }

    #[test]
    fn random_points_satisfy_constraints() {
        let mut r = rng(9);
        let e = random_point(ManifoldKind::Euclidean, 1, 3, &mut r).unwrap();
        assert!(e.to_matrix().iter().all(|v| v.is_finite()));
        let q = random_point(ManifoldKind::Stiefel, 3, 3, &mut r).unwrap().to_matrix();
        assert!((q.determinant().abs() - 1.0).abs() <= 1e-12);
        assert!(random_point(ManifoldKind::Stiefel, 3, 2, &mut r).is_err());
        assert!(random_point(ManifoldKind::Sphere, 0, 2, &mut r).is_err());
    }

    #[test]
    fn sphere_samples_are_symmetric() {
        let mut r = rng(13);
        let n = 100_000;
        let mut mean = DVector::<f64>::zeros(4);
        for _ in 0..n {
            mean += random_point(ManifoldKind::Sphere, 1, 4, &mut r).unwrap().to_matrix().column(0);
        }
        mean /= n as f64;
        assert!(mean.amax() <= 0.02, "mean {mean}");
    }

    #[test]
    fn lifting_pads_with_zeros() {
        let s = Point::Sphere(SpherePoint::new(DVector::from_vec(vec![1.0, 0.0])).unwrap());
        assert_eq!(s.lifted().to_matrix().as_slice(), &[1.0, 0.0, 0.0]);
        let i2 = Point::Stiefel(StiefelPoint::new(DMatrix::identity(2, 2)).unwrap());
        let l = i2.lifted();
        assert_eq!(l.to_matrix(), DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]));
        assert_eq!(l.constraint_residual(), 0.0);
    }

    #[test]
    fn tangent_basis_is_orthonormal_and_tangent() {
        let mut r = rng(17);
        for (kind, d, p) in [
            (ManifoldKind::Stiefel, 2, 2),
            (ManifoldKind::Stiefel, 3, 5),
            (ManifoldKind::Sphere, 1, 4),
            (ManifoldKind::Euclidean, 1, 3),
        ] {
            let x = random_point(kind, d, p, &mut r).unwrap();
            let basis = x.tangent_basis();
            assert_eq!(basis.len(), x.tangent_dim());
            for (i, a) in basis.iter().enumerate() {
                let pa = x.project(a).unwrap();
                assert!((pa.data() - a).amax() <= 1e-12);
                for (j, b) in basis.iter().enumerate() {
                    let expect = if i == j { 1.0 } else { 0.0 };
                    assert!((a.dot(b) - expect).abs() <= 1e-12);
                }
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(200))]

            #[test]
            fn retraction_preserves_constraints(
                seed in any::<u64>(),
                kind_ix in 0usize..3,
                d in 1usize..4,
                extra in 0usize..3,
                scale in 1e-6f64..10.0,
            ) {
                let kind = [ManifoldKind::Stiefel, ManifoldKind::Sphere, ManifoldKind::Euclidean][kind_ix];
                let mut r = rng(seed);
                let p = d + extra;
                let x = random_point(kind, d, p, &mut r).unwrap();
                let a = random_ambient(p, x.cols(), &mut r) * scale;
                let t = x.project(&a).unwrap();
                let y = x.retract(&t).unwrap();
                prop_assert!(y.constraint_residual() <= CONSTRAINT_TOL);
            }
        }
    }
}
