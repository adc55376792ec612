use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::cloud::PointCloud;
use crate::error::{Error, Result};

/// Synthetic shape classes. The class label of a kind is its position in
/// [`ShapeKind::ALL`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShapeKind {
    Sphere,
    Cube,
    Cylinder,
    Torus,
    Plane,
}

pub const CYLINDER_RADIUS: f64 = 0.5;
pub const CYLINDER_HALF_HEIGHT: f64 = 1.0;
pub const TORUS_MAJOR: f64 = 1.0;
pub const TORUS_MINOR: f64 = 0.35;

impl ShapeKind {
    pub const ALL: [ShapeKind; 5] = [
        ShapeKind::Sphere,
        ShapeKind::Cube,
        ShapeKind::Cylinder,
        ShapeKind::Torus,
        ShapeKind::Plane,
    ];

    pub fn label(self) -> usize {
        Self::ALL.iter().position(|&k| k == self).unwrap()
    }

    pub fn from_label(label: usize) -> Result<Self> {
        Self::ALL
            .get(label)
            .copied()
            .ok_or_else(|| Error::Config(format!("no shape with label {label}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Sphere => "sphere",
            ShapeKind::Cube => "cube",
            ShapeKind::Cylinder => "cylinder",
            ShapeKind::Torus => "torus",
            ShapeKind::Plane => "plane",
        }
    }

    /// Number of geometric regions used as part labels.
    ///
    /// Sphere: upper/lower hemisphere. Cube: six faces. Cylinder: side,
    /// top cap, bottom cap. Torus: outer/inner half of the tube. Plane:
    /// four quadrants.
    pub fn num_parts(self) -> usize {
        match self {
            ShapeKind::Sphere => 2,
            ShapeKind::Cube => 6,
            ShapeKind::Cylinder => 3,
            ShapeKind::Torus => 2,
            ShapeKind::Plane => 4,
        }
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown shape kind `{s}`")))
    }
}

fn unit_gaussian<R: Rng>(rng: &mut R) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-12 {
            return v.map(|x| x / n);
        }
    }
}

fn sample_one<R: Rng>(kind: ShapeKind, rng: &mut R) -> ([f64; 3], [f64; 3], usize) {
    match kind {
        ShapeKind::Sphere => {
            let p = unit_gaussian(rng);
            (p, p, usize::from(p[2] < 0.0))
        }
        ShapeKind::Cube => {
            // Faces have equal area: pick one uniformly.
            let face = rng.random_range(0..6);
            let axis = face / 2;
            let sign = if face % 2 == 0 { 1.0 } else { -1.0 };
            let mut p = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            p[axis] = sign;
            let mut n = [0.0; 3];
            n[axis] = sign;
            (p, n, face)
        }
        ShapeKind::Cylinder => {
            let (r, h) = (CYLINDER_RADIUS, CYLINDER_HALF_HEIGHT);
            let side = 2.0 * PI * r * 2.0 * h;
            let cap = PI * r * r;
            let u = rng.random_range(0.0..side + 2.0 * cap);
            let theta = rng.random_range(0.0..2.0 * PI);
            if u < side {
                let z = rng.random_range(-h..h);
                let (s, c) = theta.sin_cos();
                ([r * c, r * s, z], [c, s, 0.0], 0)
            } else {
                // Uniform on a disc: radius ~ sqrt(U).
                let rho = r * rng.random::<f64>().sqrt();
                let (s, c) = theta.sin_cos();
                let top = u < side + cap;
                let z = if top { h } else { -h };
                let nz = if top { 1.0 } else { -1.0 };
                ([rho * c, rho * s, z], [0.0, 0.0, nz], if top { 1 } else { 2 })
            }
        }
        ShapeKind::Torus => {
            let (big, small) = (TORUS_MAJOR, TORUS_MINOR);
            // The area element is proportional to (R + r cos v); rejection
            // sampling on v makes the draw area-uniform.
            let v = loop {
                let v = rng.random_range(0.0..2.0 * PI);
                if rng.random_range(0.0..big + small) <= big + small * v.cos() {
                    break v;
                }
            };
            let u = rng.random_range(0.0..2.0 * PI);
            let (su, cu) = u.sin_cos();
            let (sv, cv) = v.sin_cos();
            let ring = big + small * cv;
            ([ring * cu, ring * su, small * sv], [cv * cu, cv * su, sv], usize::from(cv < 0.0))
        }
        ShapeKind::Plane => {
            let x: f64 = rng.random_range(-1.0..1.0);
            let y: f64 = rng.random_range(-1.0..1.0);
            let part = usize::from(x < 0.0) + 2 * usize::from(y < 0.0);
            ([x, y, 0.0], [0.0, 0.0, 1.0], part)
        }
    }
}

/// Raw area-uniform surface sample in the shape's canonical frame, with
/// normals and part labels, before normalisation.
pub fn sample_surface<R: Rng>(kind: ShapeKind, n: usize, rng: &mut R) -> PointCloud {
    let mut points = Vec::with_capacity(n);
    let mut normals = Vec::with_capacity(n);
    let mut parts = Vec::with_capacity(n);
    for _ in 0..n {
        let (p, nv, part) = sample_one(kind, rng);
        points.push(p);
        normals.push(nv);
        parts.push(Some(part));
    }
    PointCloud {
        points,
        normals: Some(normals),
        label: kind.label(),
        part_labels: Some(parts),
    }
}

/// `n` points on the surface of `kind`, normalised to the unit sphere.
/// Deterministic in `(kind, n, seed)`.
pub fn generate_shape(kind: ShapeKind, n: usize, seed: u64) -> Result<PointCloud> {
    generate_variant(&ShapeSpec::canonical(kind), n, seed)
}

/// A shape with per-axis stretch factors drawn per sample, to give each
/// class some intra-class variation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    /// Stretch factors are drawn from `U(1 - jitter, 1 + jitter)`.
    pub jitter: f64,
}

impl ShapeSpec {
    pub fn canonical(kind: ShapeKind) -> Self {
        ShapeSpec { kind, jitter: 0.0 }
    }
}

pub fn generate_variant(spec: &ShapeSpec, n: usize, seed: u64) -> Result<PointCloud> {
    if n < 16 {
        return Err(Error::Input(format!("need at least 16 points, got {n}")));
    }
    if !(0.0..1.0).contains(&spec.jitter) {
        return Err(Error::Config(format!("jitter must lie in [0, 1), got {}", spec.jitter)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cloud = sample_surface(spec.kind, n, &mut rng);
    if spec.jitter > 0.0 {
        let j = spec.jitter;
        let s: [f64; 3] = std::array::from_fn(|_| rng.random_range(1.0 - j..1.0 + j));
        for p in &mut cloud.points {
            for k in 0..3 {
                p[k] *= s[k];
            }
        }
        // Normals transform with the inverse transpose.
        if let Some(normals) = &mut cloud.normals {
            for nv in normals.iter_mut() {
                let t = [nv[0] / s[0], nv[1] / s[1], nv[2] / s[2]];
                let len = (t[0] * t[0] + t[1] * t[1] + t[2] * t[2]).sqrt();
                *nv = t.map(|v| v / len);
            }
        }
    }
    Ok(cloud.normalized())
}
