//! Factor-graph data model: variables, typed factors, validation, the
//! rank-`p` lift, and initial assignments.

use std::collections::HashMap;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifolds::{random_point, EuclideanPoint, ManifoldKind, Point, SpherePoint, StiefelPoint};
use crate::objective::LiftedAssignment;

/// Tolerance for accepting a measured rotation as an element of SO(d).
pub const ROTATION_TOL: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SymbolClass {
    PoseRotation,
    PoseTranslation,
    Landmark,
    BearingAux,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VariableKey {
    pub class: SymbolClass,
    pub index: usize,
}

impl VariableKey {
    pub const fn rotation(index: usize) -> Self {
        Self { class: SymbolClass::PoseRotation, index }
    }

    pub const fn translation(index: usize) -> Self {
        Self { class: SymbolClass::PoseTranslation, index }
    }

    pub const fn landmark(index: usize) -> Self {
        Self { class: SymbolClass::Landmark, index }
    }

    pub const fn bearing(index: usize) -> Self {
        Self { class: SymbolClass::BearingAux, index }
    }
}

impl fmt::Display for VariableKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = match self.class {
            SymbolClass::PoseRotation => 'R',
            SymbolClass::PoseTranslation => 't',
            SymbolClass::Landmark => 'l',
            SymbolClass::BearingAux => 'b',
        };
        write!(f, "{c}{}", self.index)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariableKind {
    Rotation,
    Translation,
    UnitBearing,
}

impl VariableKind {
    /// Domain of the rank-`p` lift of this kind of variable.
    pub fn lifted_domain(self) -> ManifoldKind {
        match self {
            VariableKind::Rotation => ManifoldKind::Stiefel,
            VariableKind::Translation => ManifoldKind::Euclidean,
            VariableKind::UnitBearing => ManifoldKind::Sphere,
        }
    }

    /// Rows occupied in the aggregate decision variable.
    pub fn block_rows(self, d: usize) -> usize {
        match self {
            VariableKind::Rotation => d,
            _ => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariableDecl {
    pub key: VariableKey,
    pub kind: VariableKind,
    pub d: usize,
}

impl VariableDecl {
    pub fn new(key: VariableKey, d: usize) -> Self {
        let kind = match key.class {
            SymbolClass::PoseRotation => VariableKind::Rotation,
            SymbolClass::PoseTranslation | SymbolClass::Landmark => VariableKind::Translation,
            SymbolClass::BearingAux => VariableKind::UnitBearing,
        };
        Self { key, kind, d }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Factor {
    /// `κ‖R_j − R_i R̃‖²_F`
    RelativeRotation {
        i: VariableKey,
        j: VariableKey,
        measurement: DMatrix<f64>,
        kappa: f64,
    },
    /// `τ‖t_j − t_i − R_i t̃‖²`
    RelativeTranslation {
        rot_i: VariableKey,
        t_i: VariableKey,
        t_j: VariableKey,
        measurement: DVector<f64>,
        tau: f64,
    },
    /// `σ⁻²‖t_j − t_i − r̃ b‖²` with `b` a unit bearing.
    Range {
        t_i: VariableKey,
        t_j: VariableKey,
        bearing: VariableKey,
        range: f64,
        sigma: f64,
    },
}

impl Factor {
    pub fn keys(&self) -> Vec<VariableKey> {
        match self {
            Factor::RelativeRotation { i, j, .. } => vec![*i, *j],
            Factor::RelativeTranslation { rot_i, t_i, t_j, .. } => vec![*rot_i, *t_i, *t_j],
            Factor::Range { t_i, t_j, bearing, .. } => vec![*t_i, *t_j, *bearing],
        }
    }

    fn expected_kinds(&self) -> Vec<VariableKind> {
        use VariableKind::*;
        match self {
            Factor::RelativeRotation { .. } => vec![Rotation, Rotation],
            Factor::RelativeTranslation { .. } => vec![Rotation, Translation, Translation],
            Factor::Range { .. } => vec![Translation, Translation, UnitBearing],
        }
    }

    fn validate_measurement(&self, d: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidMeasurement(m));
        match self {
            Factor::RelativeRotation { measurement: r, kappa, .. } => {
                if r.shape() != (d, d) {
                    return bad(format!("rotation measurement must be {d}x{d}"));
                }
                let ortho = (r.transpose() * r - DMatrix::<f64>::identity(d, d)).amax();
                let det = r.determinant();
                if !(ortho <= ROTATION_TOL) || !((det - 1.0).abs() <= ROTATION_TOL) {
                    return bad(format!(
                        "rotation measurement is not in SO({d}) (orthonormality {ortho:e}, det {det})"
                    ));
                }
                if !(kappa.is_finite() && *kappa >= 0.0) {
                    return bad(format!("concentration {kappa} must be finite and nonnegative"));
                }
            }
            Factor::RelativeTranslation { measurement: t, tau, .. } => {
                if t.len() != d || t.iter().any(|v| !v.is_finite()) {
                    return bad(format!("translation measurement must be a finite {d}-vector"));
                }
                if !(tau.is_finite() && *tau >= 0.0) {
                    return bad(format!("precision {tau} must be finite and nonnegative"));
                }
            }
            Factor::Range { range, sigma, .. } => {
                if !(range.is_finite() && *range > 0.0) {
                    return bad(format!("range {range} must be positive"));
                }
                if !(sigma.is_finite() && *sigma > 0.0) {
                    return bad(format!("range std-dev {sigma} must be positive"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProblemClass {
    Pgo,
    Landmark,
    RangeAided,
}

impl ProblemClass {
    pub fn as_str(self) -> &'static str {
        match self {
            ProblemClass::Pgo => "pgo",
            ProblemClass::Landmark => "landmark",
            ProblemClass::RangeAided => "range-aided",
        }
    }
}

impl fmt::Display for ProblemClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ProblemClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pgo" => Ok(ProblemClass::Pgo),
            "landmark" => Ok(ProblemClass::Landmark),
            "range-aided" | "range" => Ok(ProblemClass::RangeAided),
            other => Err(Error::InvalidConfig(format!("unknown problem class `{other}`"))),
        }
    }
}

/// A validated factor graph over rank-`d` variables.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorGraph {
    d: usize,
    variables: Vec<VariableDecl>,
    factors: Vec<Factor>,
    index: HashMap<VariableKey, usize>,
}

impl FactorGraph {
    pub fn d(&self) -> usize {
        self.d
    }

    pub fn variables(&self) -> &[VariableDecl] {
        &self.variables
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    pub fn var_index(&self, key: &VariableKey) -> Option<usize> {
        self.index.get(key).copied()
    }

    pub(crate) fn idx(&self, key: &VariableKey) -> usize {
        self.index[key]
    }

    /// Bipartite incidence as `(factor, variable)` index pairs.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.factors
            .iter()
            .enumerate()
            .flat_map(|(k, f)| f.keys().into_iter().map(move |key| (k, self.index[&key])))
            .collect()
    }

    pub fn num_poses(&self) -> usize {
        self.count(SymbolClass::PoseRotation)
    }

    pub fn num_landmarks(&self) -> usize {
        self.count(SymbolClass::Landmark)
    }

    fn count(&self, class: SymbolClass) -> usize {
        self.variables.iter().filter(|v| v.key.class == class).count()
    }

    pub fn has_range_factors(&self) -> bool {
        self.factors.iter().any(|f| matches!(f, Factor::Range { .. }))
    }

    /// The narrowest problem class containing every factor.
    pub fn problem_class(&self) -> ProblemClass {
        if self.has_range_factors() {
            ProblemClass::RangeAided
        } else if self.num_landmarks() > 0 {
            ProblemClass::Landmark
        } else {
            ProblemClass::Pgo
        }
    }
}

/// Validates declarations and factors and assembles a [`FactorGraph`].
pub fn build_graph(decls: Vec<VariableDecl>, factors: Vec<Factor>) -> Result<FactorGraph> {
    let d = decls.first().ok_or(Error::EmptyGraph)?.d;
    if !(2..=3).contains(&d) {
        return Err(Error::InvalidGraph(format!("ambient dimension {d} must be 2 or 3")));
    }
    let mut index = HashMap::with_capacity(decls.len());
    for (n, decl) in decls.iter().enumerate() {
        if decl.d != d {
            return Err(Error::InvalidGraph(format!(
                "variable {} has dimension {}, graph has {d}",
                decl.key, decl.d
            )));
        }
        if VariableDecl::new(decl.key, d).kind != decl.kind {
            return Err(Error::InvalidGraph(format!(
                "variable {} declared with kind {:?}",
                decl.key, decl.kind
            )));
        }
        if index.insert(decl.key, n).is_some() {
            return Err(Error::DuplicateKey(decl.key));
        }
    }

    let mut bearing_uses: HashMap<VariableKey, usize> = HashMap::new();
    for f in &factors {
        let keys = f.keys();
        for (key, kind) in keys.iter().zip(f.expected_kinds()) {
            let n = *index.get(key).ok_or(Error::DanglingKey(*key))?;
            if decls[n].kind != kind {
                return Err(Error::InvalidGraph(format!(
                    "factor expects {key} to be a {kind:?} variable"
                )));
            }
        }
        for a in 0..keys.len() {
            for b in a + 1..keys.len() {
                if keys[a] == keys[b] {
                    return Err(Error::InvalidGraph(format!(
                        "factor references {} twice",
                        keys[a]
                    )));
                }
            }
        }
        f.validate_measurement(d)?;
        if let Factor::Range { bearing, .. } = f {
            *bearing_uses.entry(*bearing).or_default() += 1;
        }
    }
    for decl in &decls {
        if decl.kind == VariableKind::UnitBearing {
            let uses = bearing_uses.get(&decl.key).copied().unwrap_or(0);
            if uses != 1 {
                return Err(Error::InvalidGraph(format!(
                    "bearing {} is used by {uses} range factors (expected 1)",
                    decl.key
                )));
            }
        }
    }

    Ok(FactorGraph {
        d,
        variables: decls,
        factors,
        index,
    })
}

/// Incremental construction with generated bearing auxiliaries.
///
/// Bearings are declared at the moment their range factor is added, so they
/// follow all previously declared variables in the block ordering.
#[derive(Clone, Debug)]
pub struct GraphBuilder {
    d: usize,
    decls: Vec<VariableDecl>,
    factors: Vec<Factor>,
    next_bearing: usize,
}

impl GraphBuilder {
    pub fn new(d: usize) -> Self {
        Self {
            d,
            decls: Vec::new(),
            factors: Vec::new(),
            next_bearing: 0,
        }
    }

    /// Declares the rotation and translation of pose `i`.
    pub fn add_pose(&mut self, i: usize) -> &mut Self {
        self.decls.push(VariableDecl::new(VariableKey::rotation(i), self.d));
        self.decls.push(VariableDecl::new(VariableKey::translation(i), self.d));
        self
    }

    pub fn add_landmark(&mut self, l: usize) -> &mut Self {
        self.decls.push(VariableDecl::new(VariableKey::landmark(l), self.d));
        self
    }

    /// Adds the rotation and translation factors of a relative pose
    /// measurement from pose `i` to pose `j`.
    pub fn add_relative_pose(
        &mut self,
        i: usize,
        j: usize,
        rotation: DMatrix<f64>,
        translation: DVector<f64>,
        kappa: f64,
        tau: f64,
    ) -> &mut Self {
        self.factors.push(Factor::RelativeRotation {
            i: VariableKey::rotation(i),
            j: VariableKey::rotation(j),
            measurement: rotation,
            kappa,
        });
        self.factors.push(Factor::RelativeTranslation {
            rot_i: VariableKey::rotation(i),
            t_i: VariableKey::translation(i),
            t_j: VariableKey::translation(j),
            measurement: translation,
            tau,
        });
        self
    }

    /// Adds a relative position measurement of landmark `l` from pose `i`.
    pub fn add_landmark_observation(
        &mut self,
        i: usize,
        l: usize,
        translation: DVector<f64>,
        tau: f64,
    ) -> &mut Self {
        self.factors.push(Factor::RelativeTranslation {
            rot_i: VariableKey::rotation(i),
            t_i: VariableKey::translation(i),
            t_j: VariableKey::landmark(l),
            measurement: translation,
            tau,
        });
        self
    }

    /// Adds a range factor between two translation-like variables, declaring
    /// a fresh bearing auxiliary. Returns the bearing key.
    pub fn add_range(
        &mut self,
        t_i: VariableKey,
        t_j: VariableKey,
        range: f64,
        sigma: f64,
    ) -> VariableKey {
        let bearing = VariableKey::bearing(self.next_bearing);
        self.next_bearing += 1;
        self.decls.push(VariableDecl::new(bearing, self.d));
        self.factors.push(Factor::Range {
            t_i,
            t_j,
            bearing,
            range,
            sigma,
        });
        bearing
    }

    pub fn build(self) -> Result<FactorGraph> {
        build_graph(self.decls, self.factors)
    }
}

/// A factor graph viewed at lift rank `p`: identical variables, factors and
/// incidence, with each variable's domain replaced by its lifted domain.
#[derive(Clone, Copy, Debug)]
pub struct LiftedGraph<'g> {
    graph: &'g FactorGraph,
    p: usize,
}

impl<'g> LiftedGraph<'g> {
    pub fn graph(&self) -> &'g FactorGraph {
        self.graph
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn domain(&self, n: usize) -> ManifoldKind {
        self.graph.variables[n].kind.lifted_domain()
    }

    pub fn domains(&self) -> Vec<ManifoldKind> {
        (0..self.graph.variables.len()).map(|n| self.domain(n)).collect()
    }

    /// Checks that `assignment` conforms to this lifted graph.
    pub fn check(&self, assignment: &LiftedAssignment) -> Result<()> {
        if assignment.points().len() != self.graph.variables.len() {
            return Err(Error::shape(
                format!("{} variables", self.graph.variables.len()),
                format!("{} points", assignment.points().len()),
            ));
        }
        if assignment.p() != self.p {
            return Err(Error::shape(format!("rank {}", self.p), format!("rank {}", assignment.p())));
        }
        for (n, (pt, decl)) in assignment.points().iter().zip(&self.graph.variables).enumerate() {
            if pt.kind() != self.domain(n) || pt.cols() != decl.kind.block_rows(self.graph.d) {
                return Err(Error::shape(
                    format!("{:?} point for {}", self.domain(n), decl.key),
                    format!("{:?} with {} columns", pt.kind(), pt.cols()),
                ));
            }
        }
        Ok(())
    }
}

pub fn lift(graph: &FactorGraph, p: usize) -> Result<LiftedGraph<'_>> {
    if p < graph.d {
        return Err(Error::InvalidDimensions { d: graph.d, p });
    }
    Ok(LiftedGraph { graph, p })
}

/// Samples every variable independently from its lifted domain.
pub fn random_initialization<R: Rng + ?Sized>(
    graph: &FactorGraph,
    p: usize,
    rng: &mut R,
) -> Result<LiftedAssignment> {
    let lifted = lift(graph, p)?;
    let points = graph
        .variables
        .iter()
        .enumerate()
        .map(|(n, decl)| random_point(lifted.domain(n), decl.kind.block_rows(graph.d), p, rng))
        .collect::<Result<Vec<_>>>()?;
    LiftedAssignment::new(points)
}

/// Chains relative pose measurements along consecutive pose indices.
pub fn odometry_initialization<R: Rng + ?Sized>(
    graph: &FactorGraph,
    p: usize,
    rng: &mut R,
) -> Result<LiftedAssignment> {
    odometry_initialization_with_landmarks(graph, p, &HashMap::new(), rng)
}

/// As [`odometry_initialization`], with known positions for some landmarks
/// (keyed by landmark index).
pub fn odometry_initialization_with_landmarks<R: Rng + ?Sized>(
    graph: &FactorGraph,
    p: usize,
    landmarks: &HashMap<usize, DVector<f64>>,
    rng: &mut R,
) -> Result<LiftedAssignment> {
    lift(graph, p)?;
    let d = graph.d;
    let n_poses = graph.num_poses();
    for i in 0..n_poses {
        if graph.var_index(&VariableKey::rotation(i)).is_none()
            || graph.var_index(&VariableKey::translation(i)).is_none()
        {
            return Err(Error::InvalidGraph(format!(
                "odometry initialization needs poses indexed 0..{n_poses}"
            )));
        }
    }

    let mut rotations: Vec<DMatrix<f64>> = Vec::with_capacity(n_poses);
    let mut positions: Vec<DVector<f64>> = Vec::with_capacity(n_poses);
    if n_poses > 0 {
        rotations.push(DMatrix::identity(d, d));
        positions.push(DVector::zeros(d));
    }
    for i in 0..n_poses.saturating_sub(1) {
        let (ri, ti) = (VariableKey::rotation(i), VariableKey::translation(i));
        let (rj, tj) = (VariableKey::rotation(i + 1), VariableKey::translation(i + 1));
        let mut rot = None;
        let mut trans = None;
        for f in &graph.factors {
            match f {
                Factor::RelativeRotation { i: a, j: b, measurement, .. } if rot.is_none() => {
                    if (*a, *b) == (ri, rj) {
                        rot = Some(&rotations[i] * measurement);
                    } else if (*a, *b) == (rj, ri) {
                        rot = Some(&rotations[i] * measurement.transpose());
                    }
                }
                Factor::RelativeTranslation { rot_i, t_i, t_j, measurement, .. }
                    if trans.is_none() =>
                {
                    if (*rot_i, *t_i, *t_j) == (ri, ti, tj) {
                        trans = Some((true, measurement.clone()));
                    } else if (*rot_i, *t_i, *t_j) == (rj, tj, ti) {
                        trans = Some((false, measurement.clone()));
                    }
                }
                _ => {}
            }
        }
        let (Some(r_next), Some((forward, t_meas))) = (rot, trans) else {
            return Err(Error::MissingOdometry(i, i + 1));
        };
        let t_next = if forward {
            &positions[i] + &rotations[i] * t_meas
        } else {
            &positions[i] - &r_next * t_meas
        };
        rotations.push(r_next);
        positions.push(t_next);
    }

    // landmark positions, propagated until no more can be resolved
    let mut landmark_pos: HashMap<usize, DVector<f64>> = landmarks.clone();
    let position_of = |key: &VariableKey, lm: &HashMap<usize, DVector<f64>>| match key.class {
        SymbolClass::PoseTranslation => Some(positions[key.index].clone()),
        SymbolClass::Landmark => lm.get(&key.index).cloned(),
        _ => None,
    };
    loop {
        let mut progress = false;
        for f in &graph.factors {
            match f {
                Factor::RelativeTranslation { rot_i, t_i, t_j, measurement, .. }
                    if t_j.class == SymbolClass::Landmark
                        && !landmark_pos.contains_key(&t_j.index)
                        && rot_i.class == SymbolClass::PoseRotation =>
                {
                    if let Some(origin) = position_of(t_i, &landmark_pos) {
                        landmark_pos
                            .insert(t_j.index, origin + &rotations[rot_i.index] * measurement);
                        progress = true;
                    }
                }
                _ => {}
            }
        }
        if !progress {
            for f in &graph.factors {
                if let Factor::Range { t_i, t_j, range, .. } = f {
                    for (a, b) in [(t_i, t_j), (t_j, t_i)] {
                        if b.class == SymbolClass::Landmark && !landmark_pos.contains_key(&b.index) {
                            if let Some(origin) = position_of(a, &landmark_pos) {
                                let u = random_point(ManifoldKind::Sphere, 1, d, rng)?.to_matrix();
                                landmark_pos.insert(b.index, origin + u.column(0) * *range);
                                progress = true;
                                break;
                            }
                        }
                    }
                    if progress {
                        break;
                    }
                }
            }
        }
        if !progress {
            break;
        }
    }

    let pad = |v: &DVector<f64>| {
        let mut out = DVector::zeros(p);
        out.rows_mut(0, v.len()).copy_from(v);
        out
    };
    let mut points: Vec<Option<Point>> = vec![None; graph.variables.len()];
    for (n, decl) in graph.variables.iter().enumerate() {
        let pt = match decl.key.class {
            SymbolClass::PoseRotation => Some(Point::Stiefel(StiefelPoint::from_orthogonal(
                &rotations[decl.key.index],
                p,
            )?)),
            SymbolClass::PoseTranslation => Some(Point::Euclidean(EuclideanPoint::new(pad(
                &positions[decl.key.index],
            ))?)),
            SymbolClass::Landmark => {
                let v = landmark_pos
                    .get(&decl.key.index)
                    .cloned()
                    .unwrap_or_else(|| DVector::zeros(d));
                Some(Point::Euclidean(EuclideanPoint::new(pad(&v))?))
            }
            SymbolClass::BearingAux => None,
        };
        points[n] = pt;
    }
    for f in &graph.factors {
        if let Factor::Range { t_i, t_j, bearing, .. } = f {
            let a = points[graph.idx(t_i)].as_ref().expect("translations set").to_matrix();
            let b = points[graph.idx(t_j)].as_ref().expect("translations set").to_matrix();
            let diff = DVector::from_column_slice((b - a).as_slice());
            let n = diff.norm();
            let pt = if n > 1e-12 {
                Point::Sphere(SpherePoint::new(diff / n)?)
            } else {
                random_point(ManifoldKind::Sphere, 1, p, rng)?
            };
            points[graph.idx(bearing)] = Some(pt);
        }
    }
    LiftedAssignment::new(points.into_iter().map(|p| p.expect("every variable set")).collect())
}

/// Planar rotation by `theta`.
pub fn rot2(theta: f64) -> DMatrix<f64> {
    let (s, c) = theta.sin_cos();
    DMatrix::from_row_slice(2, 2, &[c, -s, s, c])
}
