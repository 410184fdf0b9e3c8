//! Triangle meshes, rigid transforms, least-squares rigid alignment,
//! bite-plane canonical frames and closest-point queries.
//!
//! Coordinates are millimetres. The canonical frame puts the origin at the
//! incisor point, +y anterior, +z toward the palate and +x on the subject's
//! left, with `x = y × z`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("point sets have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("points are collinear")]
    CollinearPoints,
    #[error("mesh has no faces")]
    EmptyMesh,
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),
    #[error("OBJ parse error at line {line}: {message}")]
    Obj { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A triangle mesh, `M = (V, F)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    vertices: Vec<Vec3>,
    faces: Vec<[usize; 3]>,
}

impl Mesh {
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>) -> Result<Self, GeometryError> {
        validate_faces(&faces, vertices.len())?;
        Ok(Self { vertices, faces })
    }

    /// Builds a mesh from a flat `[x0, y0, z0, x1, ...]` buffer.
    pub fn from_flat(flat: &[f64], faces: Vec<[usize; 3]>) -> Result<Self, GeometryError> {
        if !flat.len().is_multiple_of(3) {
            return Err(GeometryError::InvalidMesh(format!(
                "flat vertex buffer length {} is not a multiple of 3",
                flat.len()
            )));
        }
        let vertices = flat.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect();
        Self::new(vertices, faces)
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn flat_vertices(&self) -> Vec<f64> {
        self.vertices.iter().flat_map(|v| [v.x, v.y, v.z]).collect()
    }

    pub fn triangle(&self, face: usize) -> [Vec3; 3] {
        let [a, b, c] = self.faces[face];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    /// Reads the `v`/`f` subset of Wavefront OBJ. Polygons are
    /// fan-triangulated; texture/normal indices after `/` are ignored.
    pub fn read_obj(path: impl AsRef<Path>) -> Result<Self, GeometryError> {
        let text = fs::read_to_string(path)?;
        Self::parse_obj(&text)
    }

    pub fn parse_obj(text: &str) -> Result<Self, GeometryError> {
        let mut vertices = Vec::new();
        let mut faces = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let err = |message: String| GeometryError::Obj { line, message };
            let mut tokens = raw.split_whitespace();
            match tokens.next() {
                Some("v") => {
                    let coords: Vec<f64> = tokens
                        .take(3)
                        .map(|t| t.parse::<f64>().map_err(|e| err(format!("bad coordinate {t:?}: {e}"))))
                        .collect::<Result<_, _>>()?;
                    if coords.len() != 3 {
                        return Err(err("vertex needs three coordinates".into()));
                    }
                    vertices.push(Vec3::new(coords[0], coords[1], coords[2]));
                }
                Some("f") => {
                    let mut poly = Vec::new();
                    for t in tokens {
                        let head = t.split('/').next().unwrap_or("");
                        let i: i64 = head.parse().map_err(|e| err(format!("bad face index {t:?}: {e}")))?;
                        let resolved = if i > 0 {
                            i - 1
                        } else if i < 0 {
                            vertices.len() as i64 + i
                        } else {
                            return Err(err("face index 0 is invalid".into()));
                        };
                        if resolved < 0 || resolved as usize >= vertices.len() {
                            return Err(err(format!("face index {i} out of range")));
                        }
                        poly.push(resolved as usize);
                    }
                    if poly.len() < 3 {
                        return Err(err("face needs at least three vertices".into()));
                    }
                    for k in 1..poly.len() - 1 {
                        faces.push([poly[0], poly[k], poly[k + 1]]);
                    }
                }
                _ => {}
            }
        }
        Self::new(vertices, faces)
    }

    /// OBJ text with 1-based indices and 9 significant digits per coordinate.
    pub fn to_obj_string(&self) -> String {
        let mut out = String::with_capacity(self.vertices.len() * 40 + self.faces.len() * 20);
        for v in &self.vertices {
            let _ = writeln!(out, "v {} {} {}", sig9(v.x), sig9(v.y), sig9(v.z));
        }
        for f in &self.faces {
            let _ = writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
        }
        out
    }

    pub fn write_obj(&self, path: impl AsRef<Path>) -> Result<(), GeometryError> {
        fs::write(path, self.to_obj_string())?;
        Ok(())
    }
}

pub(crate) fn validate_faces(faces: &[[usize; 3]], vertex_count: usize) -> Result<(), GeometryError> {
    for (k, f) in faces.iter().enumerate() {
        if f.iter().any(|&i| i >= vertex_count) {
            return Err(GeometryError::InvalidMesh(format!(
                "face {k} references a vertex >= {vertex_count}"
            )));
        }
        if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
            return Err(GeometryError::InvalidMesh(format!("face {k} repeats a vertex")));
        }
    }
    Ok(())
}

/// Formats with 9 significant digits, `%g` style.
fn sig9(value: f64) -> String {
    if value == 0.0 || !value.is_finite() {
        return format!("{value}");
    }
    let exp = value.abs().log10().floor() as i32;
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        let s = format!("{value:.decimals$}");
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        format!("{value:.8e}")
    }
}

/// Rotation (unit quaternion) followed by translation.
///
/// Serialized as `{"rotation":[w,x,y,z],"translation":[x,y,z]}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "TransformRepr", into = "TransformRepr")]
pub struct RigidTransform {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vec3,
}

#[derive(Serialize, Deserialize)]
struct TransformRepr {
    rotation: [f64; 4],
    translation: [f64; 3],
}

impl From<TransformRepr> for RigidTransform {
    fn from(r: TransformRepr) -> Self {
        let [w, i, j, k] = r.rotation;
        Self::new(
            UnitQuaternion::new_normalize(Quaternion::new(w, i, j, k)),
            Vec3::from(r.translation),
        )
    }
}

impl From<RigidTransform> for TransformRepr {
    fn from(t: RigidTransform) -> Self {
        let q = t.rotation;
        Self {
            rotation: [q.w, q.i, q.j, q.k],
            translation: [t.translation.x, t.translation.y, t.translation.z],
        }
    }
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vec3) -> Self {
        Self { rotation, translation }
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self::new(UnitQuaternion::identity(), translation)
    }

    /// Builds from a proper rotation matrix. The matrix is not re-orthogonalized.
    pub fn from_matrix(rotation: &Matrix3<f64>, translation: Vec3) -> Self {
        let rot = Rotation3::from_matrix_unchecked(*rotation);
        Self::new(UnitQuaternion::from_rotation_matrix(&rot), translation)
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn apply_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    pub fn inverse(&self) -> Self {
        let inv = self.rotation.inverse();
        Self::new(inv, -(inv * self.translation))
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        Self::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }
}

pub fn apply_transform(t: &RigidTransform, p: &Vec3) -> Vec3 {
    t.apply(p)
}

fn centroid(points: &[Vec3]) -> Vec3 {
    points.iter().fold(Vec3::zeros(), |acc, p| acc + p) / points.len() as f64
}

/// Least-squares rigid transform taking `source` onto `target`
/// (Kabsch: SVD of the cross-covariance with reflection correction).
pub fn rigid_align(source: &[Vec3], target: &[Vec3]) -> Result<RigidTransform, GeometryError> {
    if source.len() != target.len() {
        return Err(GeometryError::LengthMismatch(source.len(), target.len()));
    }
    if source.len() < 3 {
        return Err(GeometryError::TooFewPoints {
            needed: 3,
            got: source.len(),
        });
    }
    let cs = centroid(source);
    let ct = centroid(target);

    let mut cov = Matrix3::zeros();
    let mut spread = Matrix3::zeros();
    for (s, t) in source.iter().zip(target) {
        let ds = s - cs;
        cov += (t - ct) * ds.transpose();
        spread += ds * ds.transpose();
    }

    let sv = spread.symmetric_eigenvalues();
    let (mut hi, mut mid) = (f64::MIN, f64::MIN);
    for &e in sv.iter() {
        if e > hi {
            mid = hi;
            hi = e;
        } else if e > mid {
            mid = e;
        }
    }
    if hi <= 0.0 || mid <= hi * 1e-12 {
        return Err(GeometryError::CollinearPoints);
    }

    let svd = cov.svd(true, true);
    let u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v_t requested");
    let d = (u * v_t).determinant().signum();
    let correction = Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, d));
    let rotation = u * correction * v_t;
    let rotation = RigidTransform::from_matrix(&rotation, Vec3::zeros()).rotation;
    let translation = ct - rotation * cs;
    Ok(RigidTransform::new(rotation, translation))
}

/// Canonical frame from three bite-plate points and the incisor origin.
///
/// The returned transform maps world coordinates into the canonical frame:
/// `origin` goes to zero, the bite-plane normal becomes +z, and the
/// in-plane direction from the molar midpoint toward `front` becomes +y.
/// When `origin` lies off the plane, +z points to its side; otherwise
/// +z = (left − right) × y.
pub fn bite_plane_frame(
    left_molar: &Vec3,
    right_molar: &Vec3,
    front: &Vec3,
    origin: &Vec3,
) -> Result<RigidTransform, GeometryError> {
    let mid = (left_molar + right_molar) * 0.5;
    let across = left_molar - right_molar;
    let ahead = front - mid;
    let scale = across.norm().max(ahead.norm());
    let normal = across.cross(&ahead);
    if scale == 0.0 || normal.norm() <= 1e-12 * scale * scale {
        return Err(GeometryError::CollinearPoints);
    }
    let mut z = normal.normalize();
    let offset = (origin - mid).dot(&z);
    if offset.abs() > 1e-9 * scale && offset < 0.0 {
        z = -z;
    }
    let y = (ahead - z * ahead.dot(&z)).normalize();
    let x = y.cross(&z);

    let rows = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
    let rotation = RigidTransform::from_matrix(&rows, Vec3::zeros()).rotation;
    Ok(RigidTransform::new(rotation, -(rotation * origin)))
}

/// Result of a closest-point query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceHit {
    pub point: Vec3,
    pub face_index: usize,
    pub distance: f64,
    pub barycentric: [f64; 3],
}

/// Closest point on triangle `(a, b, c)` to `p`, with barycentric weights.
/// Region classification follows Ericson, *Real-Time Collision Detection* 5.1.5.
pub fn closest_point_on_triangle(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> (Vec3, [f64; 3]) {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return (*a, [1.0, 0.0, 0.0]);
    }

    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return (*b, [0.0, 1.0, 0.0]);
    }

    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return (a + ab * v, [1.0 - v, v, 0.0]);
    }

    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return (*c, [0.0, 0.0, 1.0]);
    }

    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return (a + ac * w, [1.0 - w, 0.0, w]);
    }

    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return (b + (c - b) * w, [0.0, 1.0 - w, w]);
    }

    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    (a + ab * v + ac * w, [1.0 - v - w, v, w])
}

/// Globally nearest surface point, by exhaustive scan over faces.
pub fn closest_point_on_mesh(q: &Vec3, mesh: &Mesh) -> Result<SurfaceHit, GeometryError> {
    if mesh.faces.is_empty() {
        return Err(GeometryError::EmptyMesh);
    }
    let mut best: Option<SurfaceHit> = None;
    for (face_index, f) in mesh.faces.iter().enumerate() {
        let [a, b, c] = f.map(|i| mesh.vertices[i]);
        let (point, barycentric) = closest_point_on_triangle(q, &a, &b, &c);
        let d2 = (q - point).norm_squared();
        if best.is_none_or(|h| d2 < h.distance) {
            best = Some(SurfaceHit {
                point,
                face_index,
                distance: d2,
                barycentric,
            });
        }
    }
    let mut hit = best.expect("mesh has faces");
    hit.distance = (q - hit.point).norm();
    Ok(hit)
}
