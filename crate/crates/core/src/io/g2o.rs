//! The g2o text dialect: SE2/SE3 pose vertices and edges, XY/XYZ landmarks
//! and the `EDGE_RANGE id1 id2 range sigma` extension.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::graph::{Factor, FactorGraph, GraphBuilder, VariableKey};
use crate::objective::LiftedAssignment;

const QUATERNION_TOL: f64 = 1e-6;
const PSD_TOL: f64 = 1e-8;

/// One parsed input line.
#[derive(Clone, Debug, PartialEq)]
pub enum DatasetRecord {
    VertexSe2 { id: u64, x: f64, y: f64, theta: f64 },
    VertexSe3 { id: u64, t: [f64; 3], q: [f64; 4] },
    VertexXy { id: u64, p: [f64; 2] },
    VertexXyz { id: u64, p: [f64; 3] },
    EdgeSe2 { from: u64, to: u64, x: f64, y: f64, theta: f64, info: Vec<f64> },
    EdgeSe3 { from: u64, to: u64, t: [f64; 3], q: [f64; 4], info: Vec<f64> },
    EdgeSe2Xy { pose: u64, landmark: u64, p: [f64; 2], info: Vec<f64> },
    EdgeSe3Xyz { pose: u64, landmark: u64, p: [f64; 3], info: Vec<f64> },
    EdgeRange { from: u64, to: u64, range: f64, sigma: f64 },
    /// Gauge fixing hint; the solver does not anchor, so it is recorded only.
    Fix { ids: Vec<u64> },
}

/// A parsed dataset: the factor graph plus the id bookkeeping needed to map
/// results back to the file.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub graph: FactorGraph,
    pub d: usize,
    /// g2o id of each pose index.
    pub pose_ids: Vec<u64>,
    /// g2o id of each landmark index.
    pub landmark_ids: Vec<u64>,
    /// Landmark positions given by vertex lines, keyed by landmark index.
    pub landmark_guesses: BTreeMap<usize, DVector<f64>>,
    pub records: Vec<DatasetRecord>,
}

fn err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

/// Parses one non-comment line.
pub fn parse_line(line: &str, lineno: usize) -> Result<Option<DatasetRecord>> {
    let content = line.split('#').next().unwrap_or("").trim();
    if content.is_empty() {
        return Ok(None);
    }
    let mut tokens = content.split_whitespace();
    let tag = tokens.next().expect("non-empty line");
    let rest: Vec<&str> = tokens.collect();
    let id = |i: usize| -> Result<u64> {
        rest.get(i)
            .ok_or_else(|| err(lineno, format!("{tag}: missing id")))?
            .parse()
            .map_err(|_| err(lineno, format!("{tag}: bad id `{}`", rest[i])))
    };
    let nums = |start: usize, count: usize| -> Result<Vec<f64>> {
        if rest.len() != start + count {
            return Err(err(
                lineno,
                format!("{tag}: expected {} fields, found {}", start + count, rest.len()),
            ));
        }
        rest[start..]
            .iter()
            .map(|s| {
                let v: f64 = s
                    .parse()
                    .map_err(|_| err(lineno, format!("{tag}: bad number `{s}`")))?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(err(lineno, format!("{tag}: non-finite number `{s}`")))
                }
            })
            .collect()
    };
    let rec = match tag {
        "VERTEX_SE2" => {
            let v = nums(1, 3)?;
            DatasetRecord::VertexSe2 { id: id(0)?, x: v[0], y: v[1], theta: v[2] }
        }
        "VERTEX_SE3:QUAT" | "VERTEX_SE3" => {
            let v = nums(1, 7)?;
            DatasetRecord::VertexSe3 {
                id: id(0)?,
                t: [v[0], v[1], v[2]],
                q: [v[3], v[4], v[5], v[6]],
            }
        }
        "VERTEX_XY" => {
            let v = nums(1, 2)?;
            DatasetRecord::VertexXy { id: id(0)?, p: [v[0], v[1]] }
        }
        "VERTEX_XYZ" | "VERTEX_TRACKXYZ" => {
            let v = nums(1, 3)?;
            DatasetRecord::VertexXyz { id: id(0)?, p: [v[0], v[1], v[2]] }
        }
        "EDGE_SE2" => {
            let v = nums(2, 3 + 6)?;
            DatasetRecord::EdgeSe2 {
                from: id(0)?,
                to: id(1)?,
                x: v[0],
                y: v[1],
                theta: v[2],
                info: v[3..].to_vec(),
            }
        }
        "EDGE_SE3:QUAT" | "EDGE_SE3" => {
            let v = nums(2, 7 + 21)?;
            DatasetRecord::EdgeSe3 {
                from: id(0)?,
                to: id(1)?,
                t: [v[0], v[1], v[2]],
                q: [v[3], v[4], v[5], v[6]],
                info: v[7..].to_vec(),
            }
        }
        "EDGE_SE2_XY" => {
            let v = nums(2, 2 + 3)?;
            DatasetRecord::EdgeSe2Xy {
                pose: id(0)?,
                landmark: id(1)?,
                p: [v[0], v[1]],
                info: v[2..].to_vec(),
            }
        }
        "EDGE_SE3_XYZ" | "EDGE_SE3_TRACKXYZ" => {
            let v = nums(2, 3 + 6)?;
            DatasetRecord::EdgeSe3Xyz {
                pose: id(0)?,
                landmark: id(1)?,
                p: [v[0], v[1], v[2]],
                info: v[3..].to_vec(),
            }
        }
        "EDGE_RANGE" => {
            let v = nums(2, 2)?;
            DatasetRecord::EdgeRange { from: id(0)?, to: id(1)?, range: v[0], sigma: v[1] }
        }
        "FIX" => {
            if rest.is_empty() {
                return Err(err(lineno, "FIX: missing id"));
            }
            DatasetRecord::Fix {
                ids: (0..rest.len()).map(id).collect::<Result<_>>()?,
            }
        }
        other => return Err(err(lineno, format!("unknown tag `{other}`"))),
    };
    Ok(Some(rec))
}

/// Symmetric matrix from its row-major upper triangle.
fn upper_to_full(n: usize, upper: &[f64]) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    let mut k = 0;
    for i in 0..n {
        for j in i..n {
            m[(i, j)] = upper[k];
            m[(j, i)] = upper[k];
            k += 1;
        }
    }
    m
}

fn check_psd(m: &DMatrix<f64>, lineno: usize) -> Result<()> {
    let min = SymmetricEigen::new(m.clone())
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    if min < -PSD_TOL {
        return Err(err(
            lineno,
            format!("information matrix is not positive semidefinite (min eigenvalue {min:e})"),
        ));
    }
    Ok(())
}

/// `trace(B⁻¹)` of an information block, infinite when singular.
fn trace_of_inverse(block: &DMatrix<f64>) -> f64 {
    let eig = SymmetricEigen::new(block.clone());
    if eig.eigenvalues.iter().any(|&l| l <= 0.0) {
        return f64::INFINITY;
    }
    eig.eigenvalues.iter().map(|l| 1.0 / l).sum()
}

/// `τ = d / trace(I_tt⁻¹)`.
fn translational_precision(info_tt: &DMatrix<f64>) -> f64 {
    info_tt.nrows() as f64 / trace_of_inverse(info_tt)
}

/// Rotation matrix of the quaternion `(qx, qy, qz, qw)`, renormalized.
pub fn quaternion_to_rotation(q: [f64; 4], lineno: usize) -> Result<DMatrix<f64>> {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(n.is_finite() && n > QUATERNION_TOL) {
        return Err(err(lineno, "degenerate quaternion"));
    }
    let [x, y, z, w] = q.map(|v| v / n);
    Ok(DMatrix::from_row_slice(
        3,
        3,
        &[
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - z * w),
            2.0 * (x * z + y * w),
            2.0 * (x * y + z * w),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - x * w),
            2.0 * (x * z - y * w),
            2.0 * (y * z + x * w),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ))
}

/// Quaternion `(qx, qy, qz, qw)` of a rotation matrix, with `qw ≥ 0`.
pub fn rotation_to_quaternion(r: &DMatrix<f64>) -> [f64; 4] {
    let m = nalgebra::Matrix3::from_fn(|i, j| r[(i, j)]);
    let rot = nalgebra::Rotation3::from_matrix_unchecked(m);
    let q = nalgebra::UnitQuaternion::from_rotation_matrix(&rot);
    let (x, y, z, w) = (q.i, q.j, q.k, q.w);
    if w < 0.0 {
        [-x, -y, -z, -w]
    } else {
        [x, y, z, w]
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum VertexClass {
    Pose,
    Landmark,
}

/// Parses g2o text into a [`Dataset`].
pub fn parse_str(text: &str) -> Result<Dataset> {
    let mut records = Vec::new();
    let mut lines = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if let Some(rec) = parse_line(line, i + 1)? {
            records.push(rec);
            lines.push(i + 1);
        }
    }
    build_dataset(records, &lines)
}

pub fn parse_dataset(path: &Path) -> Result<Dataset> {
    parse_str(&std::fs::read_to_string(path)?)
}

fn build_dataset(records: Vec<DatasetRecord>, lines: &[usize]) -> Result<Dataset> {
    let mut d: Option<usize> = None;
    let mut set_d = |dim: usize, lineno: usize| -> Result<()> {
        match d {
            Some(prev) if prev != dim => Err(err(lineno, "mixed 2D and 3D records")),
            _ => {
                d = Some(dim);
                Ok(())
            }
        }
    };
    let mut classes: BTreeMap<u64, VertexClass> = BTreeMap::new();
    let mut declared: BTreeSet<u64> = BTreeSet::new();
    let mut classify = |id: u64, class: VertexClass, lineno: usize| -> Result<()> {
        match classes.insert(id, class) {
            Some(prev) if prev != class => Err(err(
                lineno,
                format!("vertex {id} used both as a pose and as a landmark"),
            )),
            _ => Ok(()),
        }
    };
    let mut landmark_vertices: BTreeMap<u64, DVector<f64>> = BTreeMap::new();
    for (rec, &lineno) in records.iter().zip(lines) {
        let mut declare = |id: u64| -> Result<()> {
            if !declared.insert(id) {
                return Err(err(lineno, format!("duplicate vertex id {id}")));
            }
            Ok(())
        };
        match rec {
            DatasetRecord::VertexSe2 { id, .. } => {
                set_d(2, lineno)?;
                declare(*id)?;
                classify(*id, VertexClass::Pose, lineno)?;
            }
            DatasetRecord::VertexSe3 { id, .. } => {
                set_d(3, lineno)?;
                declare(*id)?;
                classify(*id, VertexClass::Pose, lineno)?;
            }
            DatasetRecord::VertexXy { id, p } => {
                set_d(2, lineno)?;
                declare(*id)?;
                classify(*id, VertexClass::Landmark, lineno)?;
                landmark_vertices.insert(*id, DVector::from_column_slice(p));
            }
            DatasetRecord::VertexXyz { id, p } => {
                set_d(3, lineno)?;
                declare(*id)?;
                classify(*id, VertexClass::Landmark, lineno)?;
                landmark_vertices.insert(*id, DVector::from_column_slice(p));
            }
            DatasetRecord::EdgeSe2 { from, to, .. } | DatasetRecord::EdgeSe3 { from, to, .. } => {
                set_d(if matches!(rec, DatasetRecord::EdgeSe2 { .. }) { 2 } else { 3 }, lineno)?;
                classify(*from, VertexClass::Pose, lineno)?;
                classify(*to, VertexClass::Pose, lineno)?;
            }
            DatasetRecord::EdgeSe2Xy { pose, landmark, .. }
            | DatasetRecord::EdgeSe3Xyz { pose, landmark, .. } => {
                set_d(if matches!(rec, DatasetRecord::EdgeSe2Xy { .. }) { 2 } else { 3 }, lineno)?;
                classify(*pose, VertexClass::Pose, lineno)?;
                classify(*landmark, VertexClass::Landmark, lineno)?;
            }
            DatasetRecord::EdgeRange { .. } | DatasetRecord::Fix { .. } => {}
        }
    }
    let d = d.ok_or(Error::EmptyGraph)?;

    let mut pose_index: BTreeMap<u64, usize> = BTreeMap::new();
    let mut landmark_index: BTreeMap<u64, usize> = BTreeMap::new();
    for (&id, &class) in &classes {
        match class {
            VertexClass::Pose => {
                let n = pose_index.len();
                pose_index.insert(id, n);
            }
            VertexClass::Landmark => {
                let n = landmark_index.len();
                landmark_index.insert(id, n);
            }
        }
    }
    let key_of = |id: u64, lineno: usize| -> Result<VariableKey> {
        if let Some(&i) = pose_index.get(&id) {
            Ok(VariableKey::translation(i))
        } else if let Some(&l) = landmark_index.get(&id) {
            Ok(VariableKey::landmark(l))
        } else {
            Err(err(lineno, format!("range edge references unknown vertex {id}")))
        }
    };

    let mut b = GraphBuilder::new(d);
    for i in 0..pose_index.len() {
        b.add_pose(i);
    }
    for l in 0..landmark_index.len() {
        b.add_landmark(l);
    }
    for (rec, &lineno) in records.iter().zip(lines) {
        match rec {
            DatasetRecord::EdgeSe2 { from, to, x, y, theta, info } => {
                let full = upper_to_full(3, info);
                check_psd(&full, lineno)?;
                let tau = translational_precision(&full.view((0, 0), (2, 2)).into_owned());
                let kappa = full[(2, 2)];
                b.add_relative_pose(
                    pose_index[from],
                    pose_index[to],
                    crate::graph::rot2(*theta),
                    DVector::from_vec(vec![*x, *y]),
                    kappa,
                    tau,
                );
            }
            DatasetRecord::EdgeSe3 { from, to, t, q, info } => {
                let full = upper_to_full(6, info);
                check_psd(&full, lineno)?;
                let tau = translational_precision(&full.view((0, 0), (3, 3)).into_owned());
                let kappa = 3.0 / (2.0 * trace_of_inverse(&full.view((3, 3), (3, 3)).into_owned()));
                b.add_relative_pose(
                    pose_index[from],
                    pose_index[to],
                    quaternion_to_rotation(*q, lineno)?,
                    DVector::from_column_slice(t),
                    kappa,
                    tau,
                );
            }
            DatasetRecord::EdgeSe2Xy { pose, landmark, p, info } => {
                let full = upper_to_full(2, info);
                check_psd(&full, lineno)?;
                b.add_landmark_observation(
                    pose_index[pose],
                    landmark_index[landmark],
                    DVector::from_column_slice(p),
                    translational_precision(&full),
                );
            }
            DatasetRecord::EdgeSe3Xyz { pose, landmark, p, info } => {
                let full = upper_to_full(3, info);
                check_psd(&full, lineno)?;
                b.add_landmark_observation(
                    pose_index[pose],
                    landmark_index[landmark],
                    DVector::from_column_slice(p),
                    translational_precision(&full),
                );
            }
            DatasetRecord::EdgeRange { from, to, range, sigma } => {
                if !(*range > 0.0 && *sigma > 0.0) {
                    return Err(err(lineno, "range and sigma must be positive"));
                }
                let a = key_of(*from, lineno)?;
                let c = key_of(*to, lineno)?;
                if a == c {
                    return Err(err(lineno, "range edge joins a vertex to itself"));
                }
                b.add_range(a, c, *range, *sigma);
            }
            DatasetRecord::VertexSe3 { q, .. } => {
                quaternion_to_rotation(*q, lineno)?;
            }
            _ => {}
        }
    }
    let graph = b.build()?;
    let landmark_guesses = landmark_vertices
        .into_iter()
        .map(|(id, p)| (landmark_index[&id], p))
        .collect();
    Ok(Dataset {
        graph,
        d,
        pose_ids: pose_index.keys().copied().collect(),
        landmark_ids: landmark_index.keys().copied().collect(),
        landmark_guesses,
        records,
    })
}

/// Writes a graph in the g2o dialect. Pose edges are reconstructed by
/// pairing each rotation factor with the translation factor of the same
/// pose pair; weights are encoded as isotropic information blocks that the
/// parser maps back to the same `κ`, `τ`. Vertex lines are written from
/// `estimate` when given (a rank-`d` assignment).
pub fn write_g2o<W: std::io::Write>(
    graph: &FactorGraph,
    estimate: Option<&LiftedAssignment>,
    mut w: W,
) -> Result<()> {
    let d = graph.d();
    let fmt = |v: f64| format!("{v:e}");
    let join = |vals: &[f64]| vals.iter().map(|v| fmt(*v)).collect::<Vec<_>>().join(" ");
    let landmark_id = |l: usize| graph.num_poses() + l;
    if let Some(est) = estimate {
        if est.p() != d {
            return Err(Error::shape(format!("rank {d} estimate"), format!("rank {}", est.p())));
        }
        for i in 0..graph.num_poses() {
            let r = est.point(graph.idx(&VariableKey::rotation(i))).to_matrix();
            let t = est.point(graph.idx(&VariableKey::translation(i))).to_matrix();
            if d == 2 {
                let theta = r[(1, 0)].atan2(r[(0, 0)]);
                writeln!(w, "VERTEX_SE2 {i} {}", join(&[t[0], t[1], theta]))?;
            } else {
                let q = rotation_to_quaternion(&r);
                writeln!(w, "VERTEX_SE3:QUAT {i} {} {}", join(t.as_slice()), join(&q))?;
            }
        }
        for l in 0..graph.num_landmarks() {
            let p = est.point(graph.idx(&VariableKey::landmark(l))).to_matrix();
            let tag = if d == 2 { "VERTEX_XY" } else { "VERTEX_XYZ" };
            writeln!(w, "{tag} {} {}", landmark_id(l), join(p.as_slice()))?;
        }
    }

    let id_of = |k: &VariableKey| match k.class {
        crate::graph::SymbolClass::Landmark => landmark_id(k.index),
        _ => k.index,
    };
    let mut used = vec![false; graph.factors().len()];
    for (a, f) in graph.factors().iter().enumerate() {
        match f {
            Factor::RelativeRotation { i, j, measurement, kappa } => {
                let partner = graph.factors().iter().enumerate().position(|(b, g)| {
                    !used[b]
                        && matches!(g, Factor::RelativeTranslation { rot_i, t_i, t_j, .. }
                            if rot_i == i
                                && *t_i == VariableKey::translation(i.index)
                                && *t_j == VariableKey::translation(j.index))
                });
                let Some(b) = partner else {
                    return Err(Error::InvalidGraph(format!(
                        "rotation factor {i}→{j} has no matching translation factor"
                    )));
                };
                used[a] = true;
                used[b] = true;
                let Factor::RelativeTranslation { measurement: t, tau, .. } = &graph.factors()[b]
                else {
                    unreachable!()
                };
                if d == 2 {
                    let theta = measurement[(1, 0)].atan2(measurement[(0, 0)]);
                    writeln!(
                        w,
                        "EDGE_SE2 {} {} {} {}",
                        i.index,
                        j.index,
                        join(&[t[0], t[1], theta]),
                        join(&[*tau, 0.0, 0.0, *tau, 0.0, *kappa])
                    )?;
                } else {
                    let q = rotation_to_quaternion(measurement);
                    let mut info = Vec::with_capacity(21);
                    let diag = [*tau, *tau, *tau, 2.0 * kappa, 2.0 * kappa, 2.0 * kappa];
                    for r in 0..6 {
                        for c in r..6 {
                            info.push(if r == c { diag[r] } else { 0.0 });
                        }
                    }
                    writeln!(
                        w,
                        "EDGE_SE3:QUAT {} {} {} {} {}",
                        i.index,
                        j.index,
                        join(t.as_slice()),
                        join(&q),
                        join(&info)
                    )?;
                }
            }
            Factor::RelativeTranslation { .. } => {}
            Factor::Range { t_i, t_j, range, sigma, .. } => {
                used[a] = true;
                writeln!(
                    w,
                    "EDGE_RANGE {} {} {} {}",
                    id_of(t_i),
                    id_of(t_j),
                    fmt(*range),
                    fmt(*sigma)
                )?;
            }
        }
    }
    for (a, f) in graph.factors().iter().enumerate() {
        if let Factor::RelativeTranslation { rot_i, t_i, t_j, measurement, tau } = f {
            if used[a] {
                continue;
            }
            if t_j.class != crate::graph::SymbolClass::Landmark
                || *t_i != VariableKey::translation(rot_i.index)
            {
                return Err(Error::InvalidGraph(format!(
                    "translation factor {t_i}→{t_j} cannot be expressed as a g2o edge"
                )));
            }
            let (tag, info) = if d == 2 {
                ("EDGE_SE2_XY", vec![*tau, 0.0, *tau])
            } else {
                ("EDGE_SE3_XYZ", vec![*tau, 0.0, 0.0, *tau, 0.0, *tau])
            };
            writeln!(
                w,
                "{tag} {} {} {} {}",
                rot_i.index,
                landmark_id(t_j.index),
                join(measurement.as_slice()),
                join(&info)
            )?;
        }
    }
    Ok(())
}
