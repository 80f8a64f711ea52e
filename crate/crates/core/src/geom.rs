//! Quaternion/SE(3) algebra, pinhole projection, and the translation-recovery
//! and quaternion-completion formulas used by the pose head.
//!
//! All geometry runs in f64. Functions here are pure and thread-safe.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum quaternion norm accepted before rotation conversion.
pub const MIN_QUAT_NORM: f64 = 1e-9;

/// Rotation as (w, x, y, z). Not necessarily unit norm: the pose head emits
/// raw completed quaternions and normalization happens inside
/// [`quat_to_rotmat`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Quaternion { w, x, y, z }
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn normalized(&self) -> Result<Quaternion> {
        let n = self.norm();
        if n <= MIN_QUAT_NORM {
            return Err(Error::DegenerateRotation {
                norm: n,
                min: MIN_QUAT_NORM,
            });
        }
        Ok(Quaternion::new(self.w / n, self.x / n, self.y / n, self.z / n))
    }

    pub fn dot(&self, other: &Quaternion) -> f64 {
        self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn neg(&self) -> Quaternion {
        Quaternion::new(-self.w, -self.x, -self.y, -self.z)
    }

    /// Quaternion for a rotation of `angle` radians about a (non-zero) axis.
    pub fn from_axis_angle(axis: [f64; 3], angle: f64) -> Quaternion {
        let len = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
        let (s, c) = ((angle / 2.0).sin(), (angle / 2.0).cos());
        Quaternion::new(c, s * axis[0] / len, s * axis[1] / len, s * axis[2] / len)
    }

    /// Geodesic interpolation between two unit quaternions, `u` in [0, 1].
    /// Takes the shorter arc.
    pub fn slerp(&self, other: &Quaternion, u: f64) -> Quaternion {
        let mut b = *other;
        let mut d = self.dot(&b);
        if d < 0.0 {
            b = b.neg();
            d = -d;
        }
        let d = d.min(1.0);
        let theta = d.acos();
        if theta < 1e-10 {
            // nearly parallel: linear blend then renormalize
            let q = Quaternion::new(
                self.w + u * (b.w - self.w),
                self.x + u * (b.x - self.x),
                self.y + u * (b.y - self.y),
                self.z + u * (b.z - self.z),
            );
            return q.normalized().expect("non-degenerate slerp endpoints");
        }
        let s = theta.sin();
        let a = ((1.0 - u) * theta).sin() / s;
        let c = (u * theta).sin() / s;
        Quaternion::new(
            a * self.w + c * b.w,
            a * self.x + c * b.x,
            a * self.y + c * b.y,
            a * self.z + c * b.z,
        )
    }

    /// Rotation angle (radians) between two unit quaternions, double cover
    /// folded out.
    pub fn angle_to(&self, other: &Quaternion) -> f64 {
        let d = self.dot(other).abs().min(1.0);
        2.0 * d.acos()
    }
}

/// Rigid pose: rotation quaternion plus translation in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Quaternion,
    pub translation: [f64; 3],
}

impl Pose {
    pub fn new(rotation: Quaternion, translation: [f64; 3]) -> Self {
        Pose {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Pose::new(Quaternion::IDENTITY, [0.0; 3])
    }

    /// Composition `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Result<Pose> {
        let r = quat_to_rotmat(&self.rotation)?;
        let t = mat_vec(&r, &other.translation);
        let q1 = self.rotation.normalized()?;
        let q2 = other.rotation.normalized()?;
        // Hamilton product q1 * q2
        let q = Quaternion::new(
            q1.w * q2.w - q1.x * q2.x - q1.y * q2.y - q1.z * q2.z,
            q1.w * q2.x + q1.x * q2.w + q1.y * q2.z - q1.z * q2.y,
            q1.w * q2.y - q1.x * q2.z + q1.y * q2.w + q1.z * q2.x,
            q1.w * q2.z + q1.x * q2.y - q1.y * q2.x + q1.z * q2.w,
        );
        Ok(Pose::new(
            q,
            [
                t[0] + self.translation[0],
                t[1] + self.translation[1],
                t[2] + self.translation[2],
            ],
        ))
    }
}

/// Pinhole camera intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub f_x: f64,
    pub f_y: f64,
    pub p_x: f64,
    pub p_y: f64,
}

impl CameraIntrinsics {
    pub fn new(f_x: f64, f_y: f64, p_x: f64, p_y: f64) -> Result<Self> {
        if f_x <= 0.0 || f_y <= 0.0 {
            return Err(Error::InvalidInput {
                op: "CameraIntrinsics::new",
                msg: format!("focal lengths must be positive, got ({f_x}, {f_y})"),
            });
        }
        Ok(CameraIntrinsics { f_x, f_y, p_x, p_y })
    }
}

/// Axis-aligned bounding box given by center and extents, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub c_x: f64,
    pub c_y: f64,
    pub width: f64,
    pub height: f64,
}

impl BoundingBox {
    pub fn new(c_x: f64, c_y: f64, width: f64, height: f64) -> Result<Self> {
        if width <= 0.0 || height <= 0.0 {
            return Err(Error::InvalidInput {
                op: "BoundingBox::new",
                msg: format!("extents must be positive, got {width}x{height}"),
            });
        }
        Ok(BoundingBox {
            c_x,
            c_y,
            width,
            height,
        })
    }
}

/// A 3D model as a point set, with the symmetry flag used by metric selection.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectModel {
    pub class_id: u32,
    pub name: String,
    /// m x 3 points in meters, m >= 4.
    pub points: Vec<[f64; 3]>,
    pub symmetric: bool,
    /// Max pairwise point distance, meters.
    pub diameter: f64,
}

impl ObjectModel {
    pub fn new(
        class_id: u32,
        name: impl Into<String>,
        points: Vec<[f64; 3]>,
        symmetric: bool,
    ) -> Result<Self> {
        if points.len() < 4 {
            return Err(Error::InvalidInput {
                op: "ObjectModel::new",
                msg: format!("need at least 4 points, got {}", points.len()),
            });
        }
        let diameter = max_pairwise_distance(&points);
        Ok(ObjectModel {
            class_id,
            name: name.into(),
            points,
            symmetric,
            diameter,
        })
    }

    pub fn num_points(&self) -> usize {
        self.points.len()
    }
}

fn max_pairwise_distance(points: &[[f64; 3]]) -> f64 {
    let mut best = 0.0f64;
    for (i, a) in points.iter().enumerate() {
        for b in &points[i + 1..] {
            let d2 = (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2);
            best = best.max(d2);
        }
    }
    best.sqrt()
}

/// Convert a quaternion to a 3x3 rotation matrix, normalizing first.
///
/// The raw (possibly non-unit) quaternion is what the regression losses see;
/// only the rotation itself requires unit norm.
pub fn quat_to_rotmat(q: &Quaternion) -> Result<[[f64; 3]; 3]> {
    let q = q.normalized()?;
    let (w, x, y, z) = (q.w, q.x, q.y, q.z);
    Ok([
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ])
}

/// Complete a quaternion from its imaginary part: w = 1 - norm(x, y, z).
///
/// The result is deliberately NOT normalized; the regularization loss acts on
/// the raw norm.
pub fn complete_quaternion(x: f64, y: f64, z: f64) -> Quaternion {
    let w = 1.0 - (x * x + y * y + z * z).sqrt();
    Quaternion::new(w, x, y, z)
}

/// Project a camera-space point onto the image plane.
pub fn project_center(t: &[f64; 3], k: &CameraIntrinsics) -> Result<[f64; 2]> {
    if t[2] <= 0.0 {
        return Err(Error::InvalidDepth(t[2]));
    }
    Ok([
        k.f_x * t[0] / t[2] + k.p_x,
        k.f_y * t[1] / t[2] + k.p_y,
    ])
}

/// Recover the full translation from a detected center, the head's center
/// offset, and the predicted depth.
pub fn recover_translation(
    c: &[f64; 2],
    delta_c: &[f64; 2],
    t_z: f64,
    k: &CameraIntrinsics,
) -> Result<[f64; 3]> {
    if t_z <= 0.0 {
        return Err(Error::InvalidDepth(t_z));
    }
    Ok([
        (c[0] + delta_c[0] - k.p_x) * t_z / k.f_x,
        (c[1] + delta_c[1] - k.p_y) * t_z / k.f_y,
        t_z,
    ])
}

/// Apply a rigid transform to every point: x -> R x + t.
pub fn transform_points(pose: &Pose, points: &[[f64; 3]]) -> Result<Vec<[f64; 3]>> {
    let r = quat_to_rotmat(&pose.rotation)?;
    let t = &pose.translation;
    Ok(points
        .iter()
        .map(|p| {
            let v = mat_vec(&r, p);
            [v[0] + t[0], v[1] + t[1], v[2] + t[2]]
        })
        .collect())
}

fn mat_vec(m: &[[f64; 3]; 3], v: &[f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

#[derive(Debug, Deserialize)]
struct ModelRecord {
    class_id: u32,
    name: String,
    symmetric: bool,
    points_file: String,
}

/// Load object models from a JSON-lines registry.
///
/// Each line holds `{class_id, name, symmetric, points_file}` where
/// `points_file` is a path, relative to the registry file, to a headerless
/// three-column CSV of x,y,z in meters.
pub fn load_object_models(path: &Path) -> Result<Vec<ObjectModel>> {
    let text = std::fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut models = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: ModelRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        let points = load_points_csv(&base.join(&rec.points_file))?;
        models.push(ObjectModel::new(rec.class_id, rec.name, points, rec.symmetric)?);
    }
    Ok(models)
}

/// Write an object-model registry next to per-model CSV point files.
pub fn save_object_models(models: &[ObjectModel], registry_path: &Path) -> Result<()> {
    use std::fmt::Write as _;
    let base = registry_path.parent().unwrap_or(Path::new("."));
    let points_dir = base.join("points");
    std::fs::create_dir_all(&points_dir)?;
    let mut registry = String::new();
    for m in models {
        let rel = format!("points/{:03}.csv", m.class_id);
        let mut csv = String::new();
        for p in &m.points {
            writeln!(csv, "{},{},{}", p[0], p[1], p[2]).unwrap();
        }
        std::fs::write(base.join(&rel), csv)?;
        writeln!(
            registry,
            "{}",
            serde_json::json!({
                "class_id": m.class_id,
                "name": m.name,
                "symmetric": m.symmetric,
                "points_file": rel,
            })
        )
        .unwrap();
    }
    std::fs::write(registry_path, registry)?;
    Ok(())
}

fn load_points_csv(path: &Path) -> Result<Vec<[f64; 3]>> {
    let text = std::fs::read_to_string(path)?;
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 3 {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("expected 3 columns, got {}", cols.len()),
            });
        }
        let mut p = [0.0; 3];
        for (j, c) in cols.iter().enumerate() {
            p[j] = c.trim().parse::<f64>().map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
        }
        points.push(p);
    }
    Ok(points)
}
