//! The Riemannian Staircase: optimize at rank `p`, certify, and either stop
//! or escape the saddle at rank `p + 1`. Certified low-rank solutions are
//! rounded to the original domains and optionally refined.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::certifier::{build_certificate, Certificate, EigenOptions, ToleranceRule};
use crate::error::{Error, Result};
use crate::graph::{lift, FactorGraph, ProblemClass, VariableKey, VariableKind};
use crate::manifolds::{EuclideanPoint, Point, SpherePoint, StiefelPoint};
use crate::objective::{assemble_q, factor_terms, residuals, FactorTerm, LiftedAssignment};
use crate::optimizer::{local_optimize, OptimizerConfig, Termination};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EscapeConfig {
    pub initial_step: f64,
    pub shrink: f64,
    pub max_halvings: usize,
    pub sufficient_decrease: f64,
}

impl Default for EscapeConfig {
    fn default() -> Self {
        Self {
            initial_step: 1.0,
            shrink: 0.5,
            max_halvings: 32,
            sufficient_decrease: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StaircaseConfig {
    /// Rank cap; defaults to `p₀ + 8`, never above the row count of `Y`.
    pub p_max: Option<usize>,
    pub escape: EscapeConfig,
    pub optimizer: OptimizerConfig,
    pub tolerance: ToleranceRule,
    pub eigen: EigenOptions,
    /// Local refinement after rounding; defaults to on for range-aided
    /// graphs.
    pub refine: Option<bool>,
}

impl StaircaseConfig {
    /// Defaults with the optimizer preset of the graph's problem class.
    pub fn for_class(class: ProblemClass) -> Self {
        let optimizer = match class {
            ProblemClass::Pgo => OptimizerConfig::pose_graph(),
            ProblemClass::Landmark => OptimizerConfig::landmark(),
            ProblemClass::RangeAided => OptimizerConfig::range_aided(),
        };
        Self {
            p_max: None,
            escape: EscapeConfig::default(),
            optimizer,
            tolerance: ToleranceRule::default(),
            eigen: EigenOptions::default(),
            refine: None,
        }
    }
}

impl Default for StaircaseConfig {
    fn default() -> Self {
        Self::for_class(ProblemClass::Pgo)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveStatus {
    Certified,
    StalledUncertified,
    RankCapExceeded,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelRecord {
    pub rank: usize,
    pub iterations: usize,
    pub termination: Termination,
    pub objective: f64,
    pub gradient_norm: f64,
    pub lambda_min: f64,
    pub eta: f64,
    pub eigen_residual: f64,
    pub stationarity_residual: f64,
    pub certified: bool,
    pub optimize_time_s: f64,
    pub certify_time_s: f64,
    pub escape_time_s: f64,
    /// Objective after escaping to the next rank, if an escape succeeded.
    pub escape_objective: Option<f64>,
    pub escape_step: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub status: SolveStatus,
    pub levels: Vec<LevelRecord>,
    pub sdp_value: Option<f64>,
    pub rounded_value: Option<f64>,
    pub refined_value: Option<f64>,
    pub term_rank: usize,
    pub certified: bool,
    /// Sum of the per-level optimization times.
    pub opt_time_s: f64,
    pub total_time_s: f64,
}

/// A rank-`d` solution on the original domains.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundedSolution {
    pub assignment: LiftedAssignment,
    pub objective: f64,
}

impl RoundedSolution {
    pub fn rotation(&self, graph: &FactorGraph, pose: usize) -> Option<DMatrix<f64>> {
        self.value(graph, &VariableKey::rotation(pose))
    }

    pub fn translation(&self, graph: &FactorGraph, pose: usize) -> Option<DVector<f64>> {
        self.vector(graph, &VariableKey::translation(pose))
    }

    pub fn landmark(&self, graph: &FactorGraph, l: usize) -> Option<DVector<f64>> {
        self.vector(graph, &VariableKey::landmark(l))
    }

    pub fn value(&self, graph: &FactorGraph, key: &VariableKey) -> Option<DMatrix<f64>> {
        graph.var_index(key).map(|n| self.assignment.point(n).to_matrix())
    }

    fn vector(&self, graph: &FactorGraph, key: &VariableKey) -> Option<DVector<f64>> {
        self.value(graph, key).map(|m| m.column(0).into_owned())
    }
}

#[derive(Clone, Debug)]
pub struct StaircaseResult {
    pub report: SolveReport,
    /// The last stationary point (certified when the status says so).
    pub solution: LiftedAssignment,
    pub certificate: Certificate,
    pub rounded: RoundedSolution,
    pub refined: Option<RoundedSolution>,
}

fn cost(terms: &[FactorTerm], y: &LiftedAssignment) -> f64 {
    residuals(terms, y).norm_squared()
}

/// Lifts `y` to rank `p + 1` and line-searches along `(0 v_min)`.
///
/// Returns the escaped point, its objective and the accepted step.
pub fn saddle_escape(
    graph: &FactorGraph,
    y: &LiftedAssignment,
    v_min: &DVector<f64>,
    lambda_min: f64,
    config: &EscapeConfig,
) -> Result<(LiftedAssignment, f64, f64)> {
    let terms = factor_terms(graph);
    let map = y.index_map();
    if v_min.len() != map.total() {
        return Err(Error::shape(map.total(), v_min.len()));
    }
    let p = y.p() + 1;
    let lifted = y.lifted_to(p);
    let f0 = cost(&terms, &lifted);
    let direction = lifted
        .points()
        .iter()
        .enumerate()
        .map(|(n, pt)| {
            let mut v = DMatrix::zeros(p, pt.cols());
            for c in 0..pt.cols() {
                v[(p - 1, c)] = v_min[map.offset(n) + c];
            }
            pt.project(&v)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut alpha = config.initial_step;
    for _ in 0..=config.max_halvings {
        let step: Vec<_> = direction.iter().map(|t| t.scaled(alpha)).collect();
        if let Ok(candidate) = lifted.retract(&step) {
            let f = cost(&terms, &candidate);
            if f <= f0 - config.sufficient_decrease * alpha * alpha * lambda_min.abs() {
                return Ok((candidate, f, alpha));
            }
        }
        alpha *= config.shrink;
    }
    Err(Error::EscapeFailed {
        halvings: config.max_halvings,
    })
}

/// Projects a rank-`p` solution onto the rank-`d` domains.
pub fn round_solution(graph: &FactorGraph, y: &LiftedAssignment) -> Result<RoundedSolution> {
    let d = graph.d();
    let map = y.index_map();
    let mut agg = y.to_block_rows();
    // The objective only sees translation differences. A common offset can
    // leave the row space of the rotations and inflate the rank, so remove
    // it before truncating.
    let translations: Vec<usize> = (0..graph.variables().len())
        .filter(|&n| graph.variables()[n].kind == VariableKind::Translation)
        .map(|n| map.offset(n))
        .collect();
    if !translations.is_empty() {
        let mut mean = nalgebra::RowDVector::zeros(agg.ncols());
        for &o in &translations {
            mean += agg.row(o);
        }
        mean /= translations.len() as f64;
        for &o in &translations {
            let centered = agg.row(o) - &mean;
            agg.set_row(o, &centered);
        }
    }
    // Y V_d = U_d Σ_d, with V from the small p × p Gram matrix. This is more
    // accurate than the left factor of a thin SVD of the tall Y.
    let eig = (agg.transpose() * &agg).symmetric_eigen();
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    if order.len() < d {
        return Err(Error::Rounding("fewer singular values than d".into()));
    }
    let s1 = eig.eigenvalues[order[0]].max(0.0).sqrt();
    let sd = eig.eigenvalues[order[d - 1]].max(0.0).sqrt();
    if !(sd > 1e-12 * s1.max(1e-300)) {
        return Err(Error::Rounding(format!(
            "rank-deficient solution (σ_d = {sd:e}, σ_1 = {s1:e})"
        )));
    }
    let vd = DMatrix::from_fn(agg.ncols(), d, |i, j| eig.eigenvectors[(i, order[j])]);
    let mut yd = &agg * vd;

    let rotation_blocks: Vec<usize> = graph
        .variables()
        .iter()
        .enumerate()
        .filter(|(_, v)| v.kind == VariableKind::Rotation)
        .map(|(n, _)| n)
        .collect();
    let negative = rotation_blocks
        .iter()
        .filter(|&&n| yd.rows(map.offset(n), d).determinant() < 0.0)
        .count();
    if 2 * negative > rotation_blocks.len() {
        yd.column_mut(d - 1).neg_mut();
    }

    let points = graph
        .variables()
        .iter()
        .enumerate()
        .map(|(n, decl)| {
            let block = yd.rows(map.offset(n), map.size(n));
            Ok(match decl.kind {
                VariableKind::Rotation => {
                    Point::Stiefel(StiefelPoint::new(nearest_rotation(&block.transpose())?)?)
                }
                VariableKind::Translation => {
                    Point::Euclidean(EuclideanPoint::new(block.transpose().column(0).into_owned())?)
                }
                VariableKind::UnitBearing => {
                    let v = block.transpose().column(0).into_owned();
                    let norm = v.norm();
                    let unit = if norm > 1e-12 {
                        v / norm
                    } else {
                        let mut e = DVector::zeros(d);
                        e[0] = 1.0;
                        e
                    };
                    Point::Sphere(SpherePoint::new(unit)?)
                }
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let assignment = LiftedAssignment::new(points)?;
    let objective = cost(&factor_terms(graph), &assignment);
    Ok(RoundedSolution {
        assignment,
        objective,
    })
}

/// Nearest element of SO(d) in Frobenius norm.
fn nearest_rotation(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = m.nrows();
    let svd = m.clone().svd(true, true);
    let (u, vt) = (
        svd.u.expect("requested"),
        svd.v_t.expect("requested"),
    );
    let mut r = &u * &vt;
    if r.determinant() < 0.0 {
        let k = svd.singular_values.imin();
        let mut flip = DMatrix::identity(d, d);
        flip[(k, k)] = -1.0;
        r = &u * flip * &vt;
    }
    if !r.iter().all(|v| v.is_finite()) {
        return Err(Error::Rounding("non-finite rotation block".into()));
    }
    // re-orthonormalize to full precision
    let qr = r.clone().qr();
    let mut q = qr.q();
    let rr = qr.r();
    for j in 0..d {
        if rr[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    Ok(q)
}

/// Local optimization at rank `d` from a rounded solution.
pub fn refine_solution(
    graph: &FactorGraph,
    rounded: &RoundedSolution,
    config: &OptimizerConfig,
) -> Result<RoundedSolution> {
    let q = assemble_q(graph);
    let lifted = lift(graph, graph.d())?;
    let sp = local_optimize(&lifted, &q, rounded.assignment.clone(), config)?;
    Ok(RoundedSolution {
        assignment: sp.assignment,
        objective: sp.objective,
    })
}

/// Runs the staircase from `init`, whose rank is the initial rank `p₀`.
pub fn run_staircase(
    graph: &FactorGraph,
    config: &StaircaseConfig,
    init: LiftedAssignment,
) -> Result<StaircaseResult> {
    let start = Instant::now();
    let d = graph.d();
    let q = assemble_q(graph);
    let r = q.dim();
    let p0 = init.p();
    let p_max = config.p_max.unwrap_or(p0 + 8).min(r.max(p0));
    if p0 < d || p0 > p_max {
        return Err(Error::InvalidConfig(format!(
            "need d ≤ p₀ ≤ p_max (d = {d}, p₀ = {p0}, p_max = {p_max})"
        )));
    }
    config.tolerance.validate()?;
    config.optimizer.validate()?;

    let mut levels = Vec::new();
    let mut y = init;
    let (status, solution, certificate) = loop {
        let p = y.p();
        let lifted = lift(graph, p)?;
        let t = Instant::now();
        let sp = local_optimize(&lifted, &q, y, &config.optimizer)?;
        let optimize_time_s = t.elapsed().as_secs_f64();

        let t = Instant::now();
        let cert = build_certificate(&q, &sp.assignment, sp.objective, &config.tolerance, &config.eigen)?;
        let certify_time_s = t.elapsed().as_secs_f64();
        let stationary = cert.stationarity_residual
            <= config.optimizer.stationarity_factor * sp.objective.max(1.0);
        let certified = cert.certified && stationary;

        let mut record = LevelRecord {
            rank: p,
            iterations: sp.iterations,
            termination: sp.termination,
            objective: sp.objective,
            gradient_norm: sp.gradient_norm,
            lambda_min: cert.lambda_min,
            eta: cert.eta,
            eigen_residual: cert.eigen_residual,
            stationarity_residual: cert.stationarity_residual,
            certified,
            optimize_time_s,
            certify_time_s,
            escape_time_s: 0.0,
            escape_objective: None,
            escape_step: None,
        };
        if certified {
            levels.push(record);
            break (SolveStatus::Certified, sp.assignment, cert);
        }
        if cert.certified {
            // no negative curvature to follow, but not stationary either
            levels.push(record);
            break (SolveStatus::StalledUncertified, sp.assignment, cert);
        }
        if p + 1 > p_max {
            levels.push(record);
            break (SolveStatus::RankCapExceeded, sp.assignment, cert);
        }
        let t = Instant::now();
        let escaped = saddle_escape(graph, &sp.assignment, &cert.v_min, cert.lambda_min, &config.escape);
        record.escape_time_s = t.elapsed().as_secs_f64();
        match escaped {
            Ok((next, f, alpha)) => {
                record.escape_objective = Some(f);
                record.escape_step = Some(alpha);
                levels.push(record);
                y = next;
            }
            Err(Error::EscapeFailed { .. }) => {
                levels.push(record);
                break (SolveStatus::StalledUncertified, sp.assignment, cert);
            }
            Err(e) => return Err(e),
        }
    };

    let certified = status == SolveStatus::Certified;
    let rounded = round_solution(graph, &solution)?;
    let refine = config.refine.unwrap_or_else(|| graph.has_range_factors());
    let refined = if refine {
        Some(refine_solution(graph, &rounded, &config.optimizer)?)
    } else {
        None
    };
    let report = SolveReport {
        status,
        sdp_value: certified.then_some(certificate.f_star),
        rounded_value: Some(rounded.objective),
        refined_value: refined.as_ref().map(|r| r.objective),
        term_rank: solution.p(),
        certified,
        opt_time_s: levels.iter().map(|l| l.optimize_time_s).sum(),
        total_time_s: start.elapsed().as_secs_f64(),
        levels,
    };
    Ok(StaircaseResult {
        report,
        solution,
        certificate,
        rounded,
        refined,
    })
}
