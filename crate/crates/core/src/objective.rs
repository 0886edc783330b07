//! The quadratic objective `f(Y) = tr(Yᵀ Q Y)` over the aggregate
//! block-row variable, its per-factor residuals and their Jacobians in
//! orthonormal tangent coordinates.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::graph::{Factor, FactorGraph, LiftedGraph};
use crate::manifolds::{ManifoldKind, Point, TangentVector};
use crate::par;
use crate::sparse::CsrMatrix;

/// Row offsets of each variable's block in the aggregate variable `Y`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockIndexMap {
    offsets: Vec<usize>,
    sizes: Vec<usize>,
    total: usize,
}

impl BlockIndexMap {
    pub fn new(graph: &FactorGraph) -> Self {
        Self::from_sizes(
            graph
                .variables()
                .iter()
                .map(|v| v.kind.block_rows(graph.d()))
                .collect(),
        )
    }

    pub fn from_sizes(sizes: Vec<usize>) -> Self {
        let mut offsets = Vec::with_capacity(sizes.len());
        let mut total = 0;
        for &s in &sizes {
            offsets.push(total);
            total += s;
        }
        Self { offsets, sizes, total }
    }

    pub fn len(&self) -> usize {
        self.sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sizes.is_empty()
    }

    pub fn offset(&self, n: usize) -> usize {
        self.offsets[n]
    }

    pub fn size(&self, n: usize) -> usize {
        self.sizes[n]
    }

    /// Total number of rows `r`.
    pub fn total(&self) -> usize {
        self.total
    }
}

/// One point per graph variable, all at the same lift rank.
#[derive(Clone, Debug, PartialEq)]
pub struct LiftedAssignment {
    points: Vec<Point>,
    p: usize,
}

impl LiftedAssignment {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        let p = points.first().ok_or(Error::EmptyGraph)?.rank();
        if let Some(bad) = points.iter().find(|pt| pt.rank() != p) {
            return Err(Error::shape(format!("rank {p}"), format!("rank {}", bad.rank())));
        }
        Ok(Self { points, p })
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn point(&self, n: usize) -> &Point {
        &self.points[n]
    }

    pub fn into_points(self) -> Vec<Point> {
        self.points
    }

    pub fn index_map(&self) -> BlockIndexMap {
        BlockIndexMap::from_sizes(self.points.iter().map(Point::cols).collect())
    }

    /// Stacks the block rows into the aggregate `r × p` variable.
    pub fn to_block_rows(&self) -> DMatrix<f64> {
        let map = self.index_map();
        let mut y = DMatrix::zeros(map.total(), self.p);
        for (n, pt) in self.points.iter().enumerate() {
            y.rows_mut(map.offset(n), map.size(n)).copy_from(&pt.block_row());
        }
        y
    }

    /// Inverse of [`LiftedAssignment::to_block_rows`], checking every
    /// domain constraint.
    pub fn from_block_rows(
        domains: &[ManifoldKind],
        map: &BlockIndexMap,
        y: &DMatrix<f64>,
    ) -> Result<Self> {
        if y.nrows() != map.total() || domains.len() != map.len() {
            return Err(Error::shape(
                format!("{} rows", map.total()),
                format!("{} rows", y.nrows()),
            ));
        }
        let points = domains
            .iter()
            .enumerate()
            .map(|(n, &kind)| {
                Point::from_matrix(kind, y.rows(map.offset(n), map.size(n)).transpose())
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(points)
    }

    /// Zero-pads every point to rank `p_new`.
    pub fn lifted_to(&self, p_new: usize) -> Self {
        Self {
            points: self.points.iter().map(|pt| pt.lifted_to(p_new)).collect(),
            p: p_new,
        }
    }

    pub fn max_constraint_residual(&self) -> f64 {
        self.points
            .iter()
            .map(Point::constraint_residual)
            .fold(0.0, f64::max)
    }

    /// Retracts every point along its tangent vector.
    pub fn retract(&self, tangents: &[TangentVector]) -> Result<Self> {
        if tangents.len() != self.points.len() {
            return Err(Error::shape(self.points.len(), tangents.len()));
        }
        let idx: Vec<usize> = (0..self.points.len()).collect();
        let points = par::map(&idx, |&n| self.points[n].retract(&tangents[n]))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { points, p: self.p })
    }
}

/// Coefficient form of one factor: residual `√w · Σ_n C_nᵀ X_n` where `X_n`
/// is variable `n`'s block row, and contribution `w Σ C_a C_bᵀ` to `Q`.
#[derive(Clone, Debug)]
pub(crate) struct FactorTerm {
    pub weight: f64,
    /// Residual rows `m` per lifted column.
    pub m: usize,
    pub blocks: Vec<(usize, DMatrix<f64>)>,
}

pub(crate) fn factor_term(graph: &FactorGraph, f: &Factor) -> FactorTerm {
    let d = graph.d();
    let one = || DMatrix::from_element(1, 1, 1.0);
    let minus_one = || DMatrix::from_element(1, 1, -1.0);
    match f {
        Factor::RelativeRotation { i, j, measurement, kappa } => FactorTerm {
            weight: *kappa,
            m: d,
            blocks: vec![
                (graph.idx(i), -measurement),
                (graph.idx(j), DMatrix::identity(d, d)),
            ],
        },
        Factor::RelativeTranslation { rot_i, t_i, t_j, measurement, tau } => FactorTerm {
            weight: *tau,
            m: 1,
            blocks: vec![
                (graph.idx(rot_i), DMatrix::from_column_slice(d, 1, (-measurement).as_slice())),
                (graph.idx(t_i), minus_one()),
                (graph.idx(t_j), one()),
            ],
        },
        Factor::Range { t_i, t_j, bearing, range, sigma } => FactorTerm {
            weight: 1.0 / (sigma * sigma),
            m: 1,
            blocks: vec![
                (graph.idx(t_i), minus_one()),
                (graph.idx(t_j), one()),
                (graph.idx(bearing), DMatrix::from_element(1, 1, -range)),
            ],
        },
    }
}

pub(crate) fn factor_terms(graph: &FactorGraph) -> Vec<FactorTerm> {
    graph.factors().iter().map(|f| factor_term(graph, f)).collect()
}

/// The assembled data matrix `Q` together with its block layout.
#[derive(Clone, Debug)]
pub struct ObjectiveMatrix {
    q: CsrMatrix,
    index: BlockIndexMap,
}

/// Assembles the symmetric positive-semidefinite matrix `Q` with
/// `f(Y) = tr(Yᵀ Q Y)` equal to the sum of the weighted factor losses.
pub fn assemble_q(graph: &FactorGraph) -> ObjectiveMatrix {
    let index = BlockIndexMap::new(graph);
    let terms = factor_terms(graph);
    let mut triplets = Vec::new();
    for term in &terms {
        for (a, ca) in &term.blocks {
            for (b, cb) in &term.blocks {
                let block = ca * cb.transpose() * term.weight;
                let (oa, ob) = (index.offset(*a), index.offset(*b));
                for r in 0..block.nrows() {
                    for c in 0..block.ncols() {
                        triplets.push((oa + r, ob + c, block[(r, c)]));
                    }
                }
            }
        }
    }
    let n = index.total();
    let q = CsrMatrix::from_triplets(n, n, &triplets).expect("block offsets within Q");
    ObjectiveMatrix { q, index }
}

impl ObjectiveMatrix {
    pub fn matrix(&self) -> &CsrMatrix {
        &self.q
    }

    pub fn index(&self) -> &BlockIndexMap {
        &self.index
    }

    pub fn dim(&self) -> usize {
        self.index.total()
    }

    /// `Q·Y` for an aggregate `r × p` variable.
    pub fn apply(&self, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.q.mul_dense(y)
    }

    /// `tr(Yᵀ Q Y)`.
    pub fn evaluate_rows(&self, y: &DMatrix<f64>) -> Result<f64> {
        let qy = self.apply(y)?;
        Ok(y.dot(&qy))
    }

    pub fn evaluate(&self, assignment: &LiftedAssignment) -> Result<f64> {
        if assignment.points().len() != self.index.len() {
            return Err(Error::shape(self.index.len(), assignment.points().len()));
        }
        self.evaluate_rows(&assignment.to_block_rows())
    }

    /// Writes `Q` as symmetric coordinate triplets.
    pub fn write_triplets<W: std::io::Write>(&self, w: W) -> Result<()> {
        self.q.write_symmetric_triplets(w)
    }
}

/// `tr(Yᵀ Q Y)` for an assignment.
pub fn evaluate(q: &ObjectiveMatrix, assignment: &LiftedAssignment) -> Result<f64> {
    q.evaluate(assignment)
}

/// Loss of a single factor computed from its defining formula.
pub fn factor_loss(graph: &FactorGraph, f: &Factor, assignment: &LiftedAssignment) -> f64 {
    let pt = |k| assignment.point(graph.idx(k)).to_matrix();
    match f {
        Factor::RelativeRotation { i, j, measurement, kappa } => {
            kappa * (pt(j) - pt(i) * measurement).norm_squared()
        }
        Factor::RelativeTranslation { rot_i, t_i, t_j, measurement, tau } => {
            tau * (pt(t_j) - pt(t_i) - pt(rot_i) * measurement).norm_squared()
        }
        Factor::Range { t_i, t_j, bearing, range, sigma } => {
            (pt(t_j) - pt(t_i) - pt(bearing) * *range).norm_squared() / (sigma * sigma)
        }
    }
}

/// Sum of [`factor_loss`] over every factor.
pub fn direct_objective(graph: &FactorGraph, assignment: &LiftedAssignment) -> f64 {
    graph
        .factors()
        .iter()
        .map(|f| factor_loss(graph, f, assignment))
        .sum()
}

/// Orthonormal tangent bases at every point of an assignment, laid out as
/// consecutive coordinate ranges.
#[derive(Clone, Debug)]
pub struct TangentFrame {
    bases: Vec<Vec<DMatrix<f64>>>,
    offsets: Vec<usize>,
    dim: usize,
}

impl TangentFrame {
    pub fn new(assignment: &LiftedAssignment) -> Self {
        let bases = par::map(assignment.points(), Point::tangent_basis);
        let mut offsets = Vec::with_capacity(bases.len());
        let mut dim = 0;
        for b in &bases {
            offsets.push(dim);
            dim += b.len();
        }
        Self { bases, offsets, dim }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn offset(&self, n: usize) -> usize {
        self.offsets[n]
    }

    pub fn size(&self, n: usize) -> usize {
        self.bases[n].len()
    }

    pub fn basis(&self, n: usize) -> &[DMatrix<f64>] {
        &self.bases[n]
    }

    /// Maps stacked coordinates to one tangent vector per variable.
    pub fn to_tangents(
        &self,
        assignment: &LiftedAssignment,
        delta: &DVector<f64>,
    ) -> Result<Vec<TangentVector>> {
        if delta.len() != self.dim {
            return Err(Error::shape(self.dim, delta.len()));
        }
        assignment
            .points()
            .iter()
            .enumerate()
            .map(|(n, pt)| {
                let mut v = DMatrix::zeros(pt.rank(), pt.cols());
                for (c, e) in self.bases[n].iter().enumerate() {
                    v += e * delta[self.offsets[n] + c];
                }
                pt.tangent_unchecked(v)
            })
            .collect()
    }

    /// Coordinates of the tangent projection of per-variable ambient
    /// matrices (`p × k` each).
    pub fn coordinates(&self, ambient: &[DMatrix<f64>]) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim);
        for (n, a) in ambient.iter().enumerate() {
            for (c, e) in self.bases[n].iter().enumerate() {
                out[self.offsets[n] + c] = e.dot(a);
            }
        }
        out
    }
}

/// Residual rows of one factor with its nonzero Jacobian blocks.
#[derive(Clone, Debug)]
pub struct FactorJacobian {
    pub row_offset: usize,
    pub nrows: usize,
    /// `(variable, block)` with each block `nrows × tangent_dim(variable)`.
    pub blocks: Vec<(usize, DMatrix<f64>)>,
}

/// Stacked weighted residuals `r` (with `f = ‖r‖²`) and the block-sparse
/// Jacobian of `r` in tangent coordinates.
#[derive(Clone, Debug)]
pub struct ResidualJacobian {
    pub residuals: DVector<f64>,
    pub factors: Vec<FactorJacobian>,
    pub ncols: usize,
}

impl ResidualJacobian {
    pub fn cost(&self) -> f64 {
        self.residuals.norm_squared()
    }

    /// `Jᵀ r`. The Riemannian gradient of `f` has coordinates `2 Jᵀ r`.
    pub fn jt_r(&self, frame: &TangentFrame) -> DVector<f64> {
        let mut g = DVector::zeros(self.ncols);
        for fj in &self.factors {
            let r = self.residuals.rows(fj.row_offset, fj.nrows);
            for (n, b) in &fj.blocks {
                let mut seg = g.rows_mut(frame.offset(*n), b.ncols());
                seg += b.tr_mul(&r);
            }
        }
        g
    }

    pub fn to_dense(&self, frame: &TangentFrame) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(self.residuals.len(), self.ncols);
        for fj in &self.factors {
            for (n, b) in &fj.blocks {
                j.view_mut((fj.row_offset, frame.offset(*n)), b.shape())
                    .copy_from(b);
            }
        }
        j
    }
}

/// Residuals and Jacobian at `assignment` for a lifted graph.
pub fn residuals_and_jacobian(
    lifted: &LiftedGraph<'_>,
    assignment: &LiftedAssignment,
) -> Result<(ResidualJacobian, TangentFrame)> {
    lifted.check(assignment)?;
    let terms = factor_terms(lifted.graph());
    let frame = TangentFrame::new(assignment);
    let rj = linearize(&terms, assignment, &frame);
    Ok((rj, frame))
}

/// Residuals only, as a flat vector with `‖r‖² = f`.
pub(crate) fn residuals(terms: &[FactorTerm], assignment: &LiftedAssignment) -> DVector<f64> {
    let parts = par::map(terms, |t| factor_residual(t, assignment));
    DVector::from_iterator(parts.iter().map(Vec::len).sum(), parts.into_iter().flatten())
}

/// Column-major `m × p` residual of one factor, i.e. `(Σ P_n C_n)ᵀ` scaled.
fn factor_residual(t: &FactorTerm, assignment: &LiftedAssignment) -> Vec<f64> {
    let p = assignment.p();
    let mut acc = DMatrix::zeros(p, t.m);
    for (n, c) in &t.blocks {
        acc += assignment.point(*n).to_matrix() * c;
    }
    let s = t.weight.sqrt();
    let mut out = vec![0.0; t.m * p];
    for col in 0..p {
        for q in 0..t.m {
            out[q + t.m * col] = s * acc[(col, q)];
        }
    }
    out
}

pub(crate) fn linearize(
    terms: &[FactorTerm],
    assignment: &LiftedAssignment,
    frame: &TangentFrame,
) -> ResidualJacobian {
    let p = assignment.p();
    let parts = par::map(terms, |t| {
        let res = factor_residual(t, assignment);
        let s = t.weight.sqrt();
        let rows = t.m * p;
        let blocks = t
            .blocks
            .iter()
            .map(|(n, c)| {
                let basis = frame.basis(*n);
                let mut b = DMatrix::zeros(rows, basis.len());
                for (k, e) in basis.iter().enumerate() {
                    let ec = e * c;
                    for col in 0..p {
                        for q in 0..t.m {
                            b[(q + t.m * col, k)] = s * ec[(col, q)];
                        }
                    }
                }
                (*n, b)
            })
            .collect::<Vec<_>>();
        (res, blocks)
    });
    let mut residuals = Vec::new();
    let mut factors = Vec::with_capacity(parts.len());
    for (res, blocks) in parts {
        factors.push(FactorJacobian {
            row_offset: residuals.len(),
            nrows: res.len(),
            blocks,
        });
        residuals.extend(res);
    }
    ResidualJacobian {
        residuals: DVector::from_vec(residuals),
        factors,
        ncols: frame.dim(),
    }
}
