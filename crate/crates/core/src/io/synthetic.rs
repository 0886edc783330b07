//! Synthetic problems with known ground truth: odometric backbones on chain
//! and grid topologies, random loop closures, optional landmarks and range
//! measurements, and isotropic noise.

use nalgebra::{DMatrix, DVector, Matrix3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{rot2, FactorGraph, GraphBuilder, SymbolClass, VariableKey, VariableKind};
use crate::manifolds::{EuclideanPoint, Point, SpherePoint, StiefelPoint};
use crate::objective::LiftedAssignment;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Topology {
    Chain,
    Grid2d,
    Grid3d,
}

impl std::str::FromStr for Topology {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "chain" => Ok(Topology::Chain),
            "grid2d" => Ok(Topology::Grid2d),
            "grid3d" => Ok(Topology::Grid3d),
            other => Err(Error::InvalidConfig(format!("unknown topology `{other}`"))),
        }
    }
}

/// Measurement noise. Zero noise yields exact measurements with unit
/// weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct NoiseSpec {
    /// Translational standard deviation per axis.
    pub translation_sigma: f64,
    /// Rotational Langevin concentration; zero means noiseless.
    pub rotation_kappa: f64,
    pub range_sigma: f64,
}

impl NoiseSpec {
    /// Converts an angular standard deviation (radians) to a concentration
    /// by `κ = 1 / (2σ²)`.
    pub fn with_angular_sigma(mut self, sigma: f64) -> Self {
        self.rotation_kappa = if sigma > 0.0 { 1.0 / (2.0 * sigma * sigma) } else { 0.0 };
        self
    }

    fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("translation sigma", self.translation_sigma),
            ("rotation concentration", self.rotation_kappa),
            ("range sigma", self.range_sigma),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be finite and nonnegative")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub topology: Topology,
    /// Dimension of a chain (grids imply their own).
    pub chain_dim: usize,
    /// Number of poses for a chain, side length for grids.
    pub size: usize,
    pub noise: NoiseSpec,
    pub loop_closure_probability: f64,
    pub landmarks: usize,
    /// Observations per landmark, from distinct random poses.
    pub observations_per_landmark: usize,
    pub ranges: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            topology: Topology::Chain,
            chain_dim: 2,
            size: 10,
            noise: NoiseSpec::default(),
            loop_closure_probability: 0.1,
            landmarks: 0,
            observations_per_landmark: 2,
            ranges: 0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticProblem {
    pub graph: FactorGraph,
    /// Ground truth at rank `d`, bearings included.
    pub ground_truth: LiftedAssignment,
    /// Sampler used for rotational noise.
    pub rotation_sampler: &'static str,
}

/// Samples `θ` from the von Mises distribution with mean zero and
/// concentration `k` (Best–Fisher rejection).
pub fn sample_von_mises<R: Rng + ?Sized>(k: f64, rng: &mut R) -> f64 {
    use std::f64::consts::PI;
    if k <= 0.0 {
        return rng.random_range(-PI..PI);
    }
    let tau = 1.0 + (1.0 + 4.0 * k * k).sqrt();
    let rho = (tau - (2.0 * tau).sqrt()) / (2.0 * k);
    let r = (1.0 + rho * rho) / (2.0 * rho);
    loop {
        let u1: f64 = rng.random();
        let z = (PI * u1).cos();
        let f = (1.0 + r * z) / (r + z);
        let c = k * (r - f);
        let u2: f64 = rng.random();
        if c * (2.0 - c) - u2 > 0.0 || (c / u2).ln() + 1.0 - c >= 0.0 {
            let u3: f64 = rng.random();
            let theta = f.clamp(-1.0, 1.0).acos();
            return if u3 > 0.5 { theta } else { -theta };
        }
    }
}

fn unit3<R: Rng + ?Sized>(rng: &mut R) -> Vector3<f64> {
    loop {
        let v = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
        let n = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

/// Rotation noise on SO(3) with density proportional to `exp(κ tr R)`.
///
/// Above `κ = 5` a tangent-space Gaussian with per-axis variance `1/(2κ)` is
/// used; otherwise the angle is drawn by rejection from its exact marginal.
pub fn sample_langevin_so3<R: Rng + ?Sized>(kappa: f64, rng: &mut R) -> DMatrix<f64> {
    let axis_angle = if kappa > 5.0 {
        let s = (1.0 / (2.0 * kappa)).sqrt();
        Vector3::from_fn(|_, _| s * rng.sample::<f64, _>(StandardNormal))
    } else {
        // angle density ∝ exp(2κ cos θ)(1 − cos θ) on [0, π]
        let bound = if kappa > 0.25 {
            1.0 / (2.0 * kappa * std::f64::consts::E)
        } else {
            2.0 * (-4.0 * kappa).exp()
        };
        let theta = loop {
            let t = rng.random_range(0.0..std::f64::consts::PI);
            let x = 1.0 - t.cos();
            let h = (-2.0 * kappa * x).exp() * x;
            if rng.random::<f64>() * bound <= h {
                break t;
            }
        };
        unit3(rng) * theta
    };
    let r = Rotation3::new(axis_angle);
    DMatrix::from_fn(3, 3, |i, j| r[(i, j)])
}

fn rotation_noise<R: Rng + ?Sized>(d: usize, kappa: f64, rng: &mut R) -> Option<DMatrix<f64>> {
    if kappa == 0.0 {
        return None;
    }
    Some(if d == 2 {
        rot2(sample_von_mises(2.0 * kappa, rng))
    } else {
        sample_langevin_so3(kappa, rng)
    })
}

fn random_rotation3<R: Rng + ?Sized>(rng: &mut R, max_angle: f64) -> DMatrix<f64> {
    let a = unit3(rng) * rng.random_range(0.0..max_angle);
    let r = Rotation3::new(a);
    DMatrix::from_fn(3, 3, |i, j| r[(i, j)])
}

/// Ground-truth poses and the odometric / loop-closure edge list.
fn layout<R: Rng + ?Sized>(
    cfg: &SyntheticConfig,
    rng: &mut R,
) -> Result<(usize, Vec<(DMatrix<f64>, DVector<f64>)>, Vec<(usize, usize)>)> {
    let n = cfg.size;
    match cfg.topology {
        Topology::Chain => {
            let d = cfg.chain_dim;
            if !(2..=3).contains(&d) || n < 2 {
                return Err(Error::InvalidConfig("chain needs d ∈ {2, 3} and ≥ 2 poses".into()));
            }
            let mut poses = Vec::with_capacity(n);
            let mut heading = 0.0;
            let mut t = DVector::zeros(d);
            let mut r = DMatrix::identity(d, d);
            for _ in 0..n {
                poses.push((r.clone(), t.clone()));
                let mut step = DVector::zeros(d);
                step[0] = 1.0;
                t += &r * step;
                if d == 2 {
                    heading += rng.random_range(-0.6..0.6);
                    r = rot2(heading);
                } else {
                    r = random_rotation3(rng, std::f64::consts::PI);
                }
            }
            let mut edges: Vec<(usize, usize)> = (0..n - 1).map(|i| (i, i + 1)).collect();
            for j in 2..n {
                if rng.random::<f64>() < cfg.loop_closure_probability {
                    let i = rng.random_range(0..j - 1);
                    edges.push((i, j));
                }
            }
            Ok((d, poses, edges))
        }
        Topology::Grid2d | Topology::Grid3d => {
            let d = if cfg.topology == Topology::Grid2d { 2 } else { 3 };
            if n < 2 {
                return Err(Error::InvalidConfig("grid side must be at least 2".into()));
            }
            // boustrophedon visiting order over the lattice
            let mut cells: Vec<[usize; 3]> = Vec::new();
            let layers = if d == 3 { n } else { 1 };
            for z in 0..layers {
                for yy in 0..n {
                    let y = if z % 2 == 0 { yy } else { n - 1 - yy };
                    for xx in 0..n {
                        let x = if (y + z) % 2 == 0 { xx } else { n - 1 - xx };
                        cells.push([x, y, z]);
                    }
                }
            }
            let poses: Vec<_> = cells
                .iter()
                .map(|c| {
                    let t = DVector::from_fn(d, |k, _| c[k] as f64);
                    let r = if d == 2 {
                        rot2(rng.random_range(-std::f64::consts::PI..std::f64::consts::PI))
                    } else {
                        random_rotation3(rng, std::f64::consts::PI)
                    };
                    (r, t)
                })
                .collect();
            let mut edges: Vec<(usize, usize)> = (0..cells.len() - 1).map(|i| (i, i + 1)).collect();
            let index_of = |c: [usize; 3]| cells.iter().position(|x| *x == c).expect("cell");
            for (j, c) in cells.iter().enumerate() {
                for axis in 0..d {
                    if c[axis] + 1 >= n {
                        continue;
                    }
                    let mut nb = *c;
                    nb[axis] += 1;
                    let k = index_of(nb);
                    let (a, b) = if j < k { (j, k) } else { (k, j) };
                    if b == a + 1 {
                        continue;
                    }
                    if rng.random::<f64>() < cfg.loop_closure_probability {
                        edges.push((a, b));
                    }
                }
            }
            Ok((d, poses, edges))
        }
    }
}

/// Generates a synthetic problem; identical configurations give identical
/// problems.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticProblem> {
    cfg.noise.validate()?;
    if !(0.0..=1.0).contains(&cfg.loop_closure_probability) {
        return Err(Error::InvalidConfig("loop-closure probability must lie in [0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (d, poses, edges) = layout(cfg, &mut rng)?;
    let noise = cfg.noise;
    let trans_noise = Normal::new(0.0, noise.translation_sigma)
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let range_noise =
        Normal::new(0.0, noise.range_sigma).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let tau = if noise.translation_sigma > 0.0 {
        1.0 / (noise.translation_sigma * noise.translation_sigma)
    } else {
        1.0
    };
    let kappa = if noise.rotation_kappa > 0.0 { noise.rotation_kappa } else { 1.0 };
    let sigma_r = if noise.range_sigma > 0.0 { noise.range_sigma } else { 1.0 };

    let mut b = GraphBuilder::new(d);
    for i in 0..poses.len() {
        b.add_pose(i);
    }
    for (i, j) in edges {
        let (ri, ti) = &poses[i];
        let (rj, tj) = &poses[j];
        let mut r_meas = ri.transpose() * rj;
        if let Some(e) = rotation_noise(d, noise.rotation_kappa, &mut rng) {
            r_meas = reorthonormalize(&(r_meas * e));
        }
        let mut t_meas = ri.transpose() * (tj - ti);
        if noise.translation_sigma > 0.0 {
            t_meas += DVector::from_fn(d, |_, _| trans_noise.sample(&mut rng));
        }
        b.add_relative_pose(i, j, r_meas, t_meas, kappa, tau);
    }

    // landmarks scattered over the bounding box of the trajectory
    let mut lo = DVector::from_element(d, f64::INFINITY);
    let mut hi = DVector::from_element(d, f64::NEG_INFINITY);
    for (_, t) in &poses {
        lo = lo.inf(t);
        hi = hi.sup(t);
    }
    let landmarks: Vec<DVector<f64>> = (0..cfg.landmarks)
        .map(|_| {
            DVector::from_fn(d, |k, _| {
                rng.random_range((lo[k] - 1.0)..(hi[k] + 1.0))
            })
        })
        .collect();
    for (l, p) in landmarks.iter().enumerate() {
        b.add_landmark(l);
        let k = cfg.observations_per_landmark.min(poses.len());
        let observers = rand::seq::index::sample(&mut rng, poses.len(), k).into_vec();
        for i in observers {
            let (ri, ti) = &poses[i];
            let mut m = ri.transpose() * (p - ti);
            if noise.translation_sigma > 0.0 {
                m += DVector::from_fn(d, |_, _| trans_noise.sample(&mut rng));
            }
            b.add_landmark_observation(i, l, m, tau);
        }
    }

    let position = |k: &VariableKey| match k.class {
        SymbolClass::Landmark => landmarks[k.index].clone(),
        _ => poses[k.index].1.clone(),
    };
    let mut range_pairs = Vec::with_capacity(cfg.ranges);
    let np = poses.len();
    for _ in 0..cfg.ranges {
        let (a, c) = loop {
            let a = VariableKey::translation(rng.random_range(0..np));
            let c = if cfg.landmarks > 0 {
                VariableKey::landmark(rng.random_range(0..cfg.landmarks))
            } else {
                VariableKey::translation(rng.random_range(0..np))
            };
            if a != c && (position(&c) - position(&a)).norm() > 1e-6 {
                break (a, c);
            }
        };
        let true_range = (position(&c) - position(&a)).norm();
        let mut r = true_range;
        if noise.range_sigma > 0.0 {
            r = loop {
                let s = true_range + range_noise.sample(&mut rng);
                if s > 0.0 {
                    break s;
                }
            };
        }
        b.add_range(a, c, r, sigma_r);
        range_pairs.push((a, c));
    }
    let graph = b.build()?;

    let mut range_iter = range_pairs.iter();
    let points = graph
        .variables()
        .iter()
        .map(|decl| {
            Ok(match decl.kind {
                VariableKind::Rotation => {
                    Point::Stiefel(StiefelPoint::new(poses[decl.key.index].0.clone())?)
                }
                VariableKind::Translation => Point::Euclidean(EuclideanPoint::new(position(&decl.key))?),
                VariableKind::UnitBearing => {
                    let (a, c) = range_iter.next().expect("one bearing per range");
                    let v = position(c) - position(a);
                    let n = v.norm();
                    Point::Sphere(SpherePoint::new(v / n)?)
                }
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SyntheticProblem {
        graph,
        ground_truth: LiftedAssignment::new(points)?,
        rotation_sampler: match (d, noise.rotation_kappa) {
            (_, k) if k == 0.0 => "none",
            (2, _) => "von-mises-rejection",
            (_, k) if k > 5.0 => "tangent-gaussian",
            _ => "angle-rejection",
        },
    })
}

fn reorthonormalize(m: &DMatrix<f64>) -> DMatrix<f64> {
    if m.nrows() == 3 {
        let r = Rotation3::from_matrix(&Matrix3::from_fn(|i, j| m[(i, j)]));
        DMatrix::from_fn(3, 3, |i, j| r[(i, j)])
    } else {
        rot2(m[(1, 0)].atan2(m[(0, 0)]))
    }
}
