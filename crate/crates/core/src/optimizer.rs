//! Riemannian Levenberg–Marquardt over a lifted factor graph.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::LiftedGraph;
use crate::linsolve::{pcg, BlockSystem, Symbolic};
use crate::objective::{
    factor_terms, linearize, residuals, LiftedAssignment, ObjectiveMatrix, TangentFrame,
};

pub const MIN_DAMPING: f64 = 1e-12;
pub const MAX_DAMPING: f64 = 1e12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub relative_error: f64,
    pub absolute_error: f64,
    pub max_iteration: usize,
    /// Initial damping as a multiple of the mean diagonal of `JᵀJ`.
    pub initial_damping_scale: f64,
    pub damping_increase: f64,
    pub damping_decrease: f64,
    /// Terminate immediately once the gradient norm falls below this.
    pub gradient_floor: f64,
    /// Decrease-based termination also requires
    /// `‖grad‖ ≤ stationarity_factor · max(1, f)`.
    pub stationarity_factor: f64,
    /// Tangent dimension above which conjugate gradients replace the
    /// direct solver.
    pub iterative_threshold: usize,
}

impl OptimizerConfig {
    /// Pose-graph defaults.
    pub fn pose_graph() -> Self {
        Self {
            relative_error: 1e-5,
            absolute_error: 1e-4,
            max_iteration: 100,
            initial_damping_scale: 1e-6,
            damping_increase: 10.0,
            damping_decrease: 0.1,
            gradient_floor: 1e-10,
            stationarity_factor: 1e-4,
            iterative_threshold: 200_000,
        }
    }

    /// Pose-and-landmark defaults.
    pub fn landmark() -> Self {
        Self {
            max_iteration: 150,
            ..Self::pose_graph()
        }
    }

    /// Range-aided defaults.
    pub fn range_aided() -> Self {
        Self {
            relative_error: 1e-8,
            absolute_error: 1e-8,
            max_iteration: 300,
            ..Self::pose_graph()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.relative_error,
            self.absolute_error,
            self.initial_damping_scale,
            self.damping_increase,
            self.damping_decrease,
            self.gradient_floor,
            self.stationarity_factor,
        ];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidConfig("optimizer tolerances must be positive".into()));
        }
        if self.max_iteration == 0 {
            return Err(Error::InvalidConfig("max_iteration must be at least 1".into()));
        }
        if self.damping_increase <= 1.0 || self.damping_decrease >= 1.0 {
            return Err(Error::InvalidConfig(
                "damping must increase on rejection and decrease on acceptance".into(),
            ));
        }
        Ok(())
    }
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::pose_graph()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    GradientFloor,
    RelativeDecrease,
    AbsoluteDecrease,
    /// No step was accepted even at maximal damping.
    DampingSaturated,
    IterationCap,
}

#[derive(Clone, Debug)]
pub struct StationaryPoint {
    pub assignment: LiftedAssignment,
    pub objective: f64,
    pub gradient_norm: f64,
    pub iterations: usize,
    pub termination: Termination,
}

#[derive(Clone, Copy, Debug)]
pub struct Progress {
    pub iteration: usize,
    pub objective: f64,
    pub gradient_norm: f64,
    pub damping: f64,
}

pub fn local_optimize(
    lifted: &LiftedGraph<'_>,
    q: &ObjectiveMatrix,
    init: LiftedAssignment,
    config: &OptimizerConfig,
) -> Result<StationaryPoint> {
    local_optimize_with_progress(lifted, q, init, config, &mut |_| {})
}

pub fn local_optimize_with_progress(
    lifted: &LiftedGraph<'_>,
    q: &ObjectiveMatrix,
    init: LiftedAssignment,
    config: &OptimizerConfig,
    progress: &mut dyn FnMut(&Progress),
) -> Result<StationaryPoint> {
    config.validate()?;
    lifted.check(&init)?;
    let graph = lifted.graph();
    let nvars = graph.variables().len();
    let terms = factor_terms(graph);

    if q.index().len() != nvars {
        return Err(Error::shape(nvars, q.index().len()));
    }
    // residual form of tr(YᵀQY): no cancellation near zero
    let cost = |y: &LiftedAssignment| residuals(&terms, y).norm_squared();
    let mut x = init;
    let mut f = cost(&x);
    if !f.is_finite() {
        return Err(Error::NonFiniteObjective);
    }
    let mut symbolic: Option<Symbolic> = None;
    let mut lambda: Option<f64> = None;
    let mut iterations = 0;
    // (decrease, previous objective) of the last accepted step
    let mut last_step: Option<(f64, f64)> = None;

    loop {
        let frame = TangentFrame::new(&x);
        let rj = linearize(&terms, &x, &frame);
        let jtr = rj.jt_r(&frame);
        let grad_norm = 2.0 * jtr.norm();
        let done = |x: &LiftedAssignment, iterations, termination| StationaryPoint {
            assignment: x.clone(),
            objective: f,
            gradient_norm: grad_norm,
            iterations,
            termination,
        };
        if grad_norm <= config.gradient_floor {
            return Ok(done(&x, iterations, Termination::GradientFloor));
        }
        // Decrease tests only end the run at a point that passes the
        // stationarity gate, so a stalled but non-stationary iterate keeps
        // going until the iteration cap.
        let stationary = grad_norm <= config.stationarity_factor * f.max(1.0);
        if let Some((decrease, f_prev)) = last_step.filter(|_| stationary || f <= config.gradient_floor) {
            if decrease < config.absolute_error {
                return Ok(done(&x, iterations, Termination::AbsoluteDecrease));
            }
            if decrease / f_prev.max(f64::EPSILON) < config.relative_error {
                return Ok(done(&x, iterations, Termination::RelativeDecrease));
            }
        }
        if iterations >= config.max_iteration {
            return Ok(done(&x, iterations, Termination::IterationCap));
        }

        let sys = BlockSystem::from_jacobian(&rj, &frame, nvars);
        let lam = lambda.get_or_insert_with(|| {
            (config.initial_damping_scale * sys.mean_diagonal()).clamp(MIN_DAMPING, MAX_DAMPING)
        });
        let use_direct = sys.dim() <= config.iterative_threshold;
        if use_direct && symbolic.is_none() {
            symbolic = Some(Symbolic::analyze(&sys.adjacency()));
        }
        let rhs = -&jtr;

        // inner loop: raise damping until a step decreases the objective
        let accepted = loop {
            let step = if let Some(sym) = symbolic.as_ref().filter(|_| use_direct) {
                sym.solve(&sys, *lam, &rhs)
            } else {
                pcg(&sys, *lam, &rhs, 1e-10, 10 * sys.dim().max(10))
            };
            let candidate = match step {
                Ok(delta) => {
                    let tangents = frame.to_tangents(&x, &delta)?;
                    match x.retract(&tangents) {
                        Ok(y) => {
                            let fy = cost(&y);
                            fy.is_finite().then_some((y, fy))
                        }
                        Err(Error::DegenerateRetraction(_)) => None,
                        Err(e) => return Err(e),
                    }
                }
                Err(Error::LinearSolve(msg)) => {
                    if *lam >= MAX_DAMPING {
                        return Err(Error::LinearSolve(msg));
                    }
                    None
                }
                Err(e) => return Err(e),
            };
            match candidate {
                Some((y, fy)) if fy < f => {
                    *lam = (*lam * config.damping_decrease).max(MIN_DAMPING);
                    break Some((y, fy));
                }
                _ => {
                    if *lam >= MAX_DAMPING {
                        break None;
                    }
                    *lam = (*lam * config.damping_increase).min(MAX_DAMPING);
                }
            }
        };
        iterations += 1;

        let Some((y, fy)) = accepted else {
            return Ok(done(&x, iterations, Termination::DampingSaturated));
        };
        last_step = Some((f - fy, f));
        x = y;
        f = fy;
        progress(&Progress {
            iteration: iterations,
            objective: f,
            gradient_norm: grad_norm,
            damping: *lam,
        });
    }
}
