//! Statistical shape models: a PCA palate model `mean + B·x` and a bilinear
//! tongue model `mean + Σᵢⱼ xᵢ·yⱼ·c_ij`, with anatomy weights `x` and pose
//! weights `y`. Both are stored in a single JSON model file.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{validate_faces, GeometryError, Mesh};

pub const MODEL_FORMAT: &str = "articfeed-model";
pub const MODEL_VERSION: u32 = 1;
pub const MODEL_AXES: &str = "+x left,+y anterior,+z superior";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("model format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

fn mismatch(what: &str, expected: usize, got: usize) -> ModelError {
    ModelError::DimensionMismatch(format!("{what}: expected {expected}, got {got}"))
}

/// Linear palate model.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub mean: DVector<f64>,
    /// 3V × n, one column per mode.
    pub basis: DMatrix<f64>,
    pub sigmas: Vec<f64>,
    pub faces: Vec<[usize; 3]>,
}

impl PcaModel {
    pub fn new(
        mean: DVector<f64>,
        basis: DMatrix<f64>,
        sigmas: Vec<f64>,
        faces: Vec<[usize; 3]>,
    ) -> Result<Self, ModelError> {
        let model = Self {
            mean,
            basis,
            sigmas,
            faces,
        };
        model.validate()?;
        Ok(model)
    }

    fn validate(&self) -> Result<(), ModelError> {
        if !self.mean.len().is_multiple_of(3) {
            return Err(ModelError::DimensionMismatch(
                "mean length is not divisible by 3".into(),
            ));
        }
        if self.basis.nrows() != self.mean.len() {
            return Err(mismatch("basis rows", self.mean.len(), self.basis.nrows()));
        }
        if self.sigmas.len() != self.basis.ncols() {
            return Err(mismatch("sigmas", self.basis.ncols(), self.sigmas.len()));
        }
        check_sigmas(&self.sigmas)?;
        validate_faces(&self.faces, self.vertex_count())?;
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.basis.ncols()
    }

    pub fn vertex_count(&self) -> usize {
        self.mean.len() / 3
    }

    pub fn mean_mesh(&self) -> Mesh {
        Mesh::from_flat(self.mean.as_slice(), self.faces.clone()).expect("validated")
    }

    pub fn reconstruct(&self, x: &DVector<f64>) -> Result<Mesh, ModelError> {
        if x.len() != self.dim() {
            return Err(mismatch("palate weights", self.dim(), x.len()));
        }
        let flat = &self.mean + &self.basis * x;
        Ok(Mesh::from_flat(flat.as_slice(), self.faces.clone())?)
    }
}

pub fn reconstruct_pca(model: &PcaModel, x: &DVector<f64>) -> Result<Mesh, ModelError> {
    model.reconstruct(x)
}

/// Bilinear tongue model.
#[derive(Debug, Clone, PartialEq)]
pub struct MultilinearModel {
    pub mean: DVector<f64>,
    /// 3V × (n·m); column `i·m + j` holds `c_ij`.
    pub core: DMatrix<f64>,
    pub n: usize,
    pub m: usize,
    pub neutral_x: DVector<f64>,
    pub neutral_y: DVector<f64>,
    pub sigmas_x: Vec<f64>,
    pub sigmas_y: Vec<f64>,
    pub faces: Vec<[usize; 3]>,
}

impl MultilinearModel {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !self.mean.len().is_multiple_of(3) {
            return Err(ModelError::DimensionMismatch(
                "mean length is not divisible by 3".into(),
            ));
        }
        if self.core.nrows() != self.mean.len() {
            return Err(mismatch("core block length", self.mean.len(), self.core.nrows()));
        }
        if self.core.ncols() != self.n * self.m {
            return Err(mismatch("core blocks", self.n * self.m, self.core.ncols()));
        }
        if self.neutral_x.len() != self.n || self.sigmas_x.len() != self.n {
            return Err(mismatch(
                "anatomy vectors",
                self.n,
                self.neutral_x.len().min(self.sigmas_x.len()),
            ));
        }
        if self.neutral_y.len() != self.m || self.sigmas_y.len() != self.m {
            return Err(mismatch(
                "pose vectors",
                self.m,
                self.neutral_y.len().min(self.sigmas_y.len()),
            ));
        }
        if self
            .neutral_x
            .iter()
            .chain(self.neutral_y.iter())
            .any(|v| !v.is_finite())
        {
            return Err(ModelError::DimensionMismatch("neutral weights must be finite".into()));
        }
        check_sigmas(&self.sigmas_x)?;
        check_sigmas(&self.sigmas_y)?;
        validate_faces(&self.faces, self.vertex_count())?;
        Ok(())
    }

    pub fn vertex_count(&self) -> usize {
        self.mean.len() / 3
    }

    pub fn mean_mesh(&self) -> Mesh {
        Mesh::from_flat(self.mean.as_slice(), self.faces.clone()).expect("validated")
    }

    fn check_weights(&self, x: &[f64], y: &[f64]) -> Result<(), ModelError> {
        if x.len() != self.n {
            return Err(mismatch("anatomy weights", self.n, x.len()));
        }
        if y.len() != self.m {
            return Err(mismatch("pose weights", self.m, y.len()));
        }
        Ok(())
    }

    /// Flat `3V` vertex buffer for weights `(x, y)`.
    pub fn reconstruct_flat(&self, x: &[f64], y: &[f64]) -> Result<Vec<f64>, ModelError> {
        self.check_weights(x, y)?;
        let mut out = self.mean.as_slice().to_vec();
        for (i, xi) in x.iter().enumerate() {
            for (j, yj) in y.iter().enumerate() {
                let w = xi * yj;
                if w == 0.0 {
                    continue;
                }
                let col = self.core.column(i * self.m + j);
                for (o, c) in out.iter_mut().zip(col.iter()) {
                    *o += w * c;
                }
            }
        }
        Ok(out)
    }

    pub fn reconstruct(&self, x: &[f64], y: &[f64]) -> Result<Mesh, ModelError> {
        let flat = self.reconstruct_flat(x, y)?;
        Ok(Mesh::from_flat(&flat, self.faces.clone())?)
    }
}

pub fn reconstruct_multilinear(model: &MultilinearModel, x: &[f64], y: &[f64]) -> Result<Mesh, ModelError> {
    model.reconstruct(x, y)
}

fn check_sigmas(sigmas: &[f64]) -> Result<(), ModelError> {
    if sigmas.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(ModelError::DimensionMismatch("sigmas must be positive".into()));
    }
    Ok(())
}

/// Pairs an EMA coil with the tongue-mesh vertex it is glued to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Correspondence {
    pub coil_id: String,
    pub vertex_index: usize,
}

impl Correspondence {
    pub fn new(coil_id: impl Into<String>, vertex_index: usize) -> Self {
        Self {
            coil_id: coil_id.into(),
            vertex_index,
        }
    }
}

pub fn validate_correspondences(correspondences: &[Correspondence], vertex_count: usize) -> Result<(), ModelError> {
    let mut seen = std::collections::HashSet::new();
    for c in correspondences {
        if c.vertex_index >= vertex_count {
            return Err(ModelError::DimensionMismatch(format!(
                "coil {} maps to vertex {} but the mesh has {vertex_count}",
                c.coil_id, c.vertex_index
            )));
        }
        if !seen.insert(c.coil_id.as_str()) {
            return Err(ModelError::DimensionMismatch(format!(
                "coil {} appears twice in the correspondences",
                c.coil_id
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub enum ShapeModel {
    Pca(PcaModel),
    Multilinear(MultilinearModel),
}

impl ShapeModel {
    pub fn into_pca(self) -> Result<PcaModel, ModelError> {
        match self {
            ShapeModel::Pca(m) => Ok(m),
            ShapeModel::Multilinear(_) => Err(ModelError::Format("expected a pca model".into())),
        }
    }

    pub fn into_multilinear(self) -> Result<MultilinearModel, ModelError> {
        match self {
            ShapeModel::Multilinear(m) => Ok(m),
            ShapeModel::Pca(_) => Err(ModelError::Format("expected a multilinear model".into())),
        }
    }
}

impl From<PcaModel> for ShapeModel {
    fn from(m: PcaModel) -> Self {
        ShapeModel::Pca(m)
    }
}

impl From<MultilinearModel> for ShapeModel {
    fn from(m: MultilinearModel) -> Self {
        ShapeModel::Multilinear(m)
    }
}

// On-disk layout. Kind-specific fields are optional here and checked on load.
#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    kind: String,
    vertices: usize,
    faces: Vec<[usize; 3]>,
    mean: Vec<f64>,
    n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    basis: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sigmas: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    m: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    core: Option<Vec<Vec<Vec<f64>>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    neutral_x: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    neutral_y: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sigmas_x: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sigmas_y: Option<Vec<f64>>,
    units: String,
    axes: String,
}

impl ModelFile {
    fn from_model(model: &ShapeModel) -> Self {
        let (mean, faces) = match model {
            ShapeModel::Pca(p) => (&p.mean, &p.faces),
            ShapeModel::Multilinear(t) => (&t.mean, &t.faces),
        };
        let mut file = ModelFile {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            kind: String::new(),
            vertices: mean.len() / 3,
            faces: faces.clone(),
            mean: mean.as_slice().to_vec(),
            n: 0,
            basis: None,
            sigmas: None,
            m: None,
            core: None,
            neutral_x: None,
            neutral_y: None,
            sigmas_x: None,
            sigmas_y: None,
            units: "mm".into(),
            axes: MODEL_AXES.into(),
        };
        match model {
            ShapeModel::Pca(p) => {
                file.kind = "pca".into();
                file.n = p.dim();
                file.basis = Some(p.basis.column_iter().map(|c| c.iter().copied().collect()).collect());
                file.sigmas = Some(p.sigmas.clone());
            }
            ShapeModel::Multilinear(t) => {
                file.kind = "multilinear".into();
                file.n = t.n;
                file.m = Some(t.m);
                file.core = Some(
                    (0..t.n)
                        .map(|i| {
                            (0..t.m)
                                .map(|j| t.core.column(i * t.m + j).iter().copied().collect())
                                .collect()
                        })
                        .collect(),
                );
                file.neutral_x = Some(t.neutral_x.as_slice().to_vec());
                file.neutral_y = Some(t.neutral_y.as_slice().to_vec());
                file.sigmas_x = Some(t.sigmas_x.clone());
                file.sigmas_y = Some(t.sigmas_y.clone());
            }
        }
        file
    }

    fn into_model(self) -> Result<ShapeModel, ModelError> {
        let fmt = |msg: String| ModelError::Format(msg);
        if self.format != MODEL_FORMAT {
            return Err(fmt(format!("bad magic {:?}", self.format)));
        }
        if self.version != MODEL_VERSION {
            return Err(fmt(format!("unsupported version {}", self.version)));
        }
        if self.units != "mm" {
            return Err(fmt(format!("unsupported units {:?}", self.units)));
        }
        let len = self.vertices * 3;
        if self.mean.len() != len {
            return Err(fmt(format!("mean has {} values, expected {len}", self.mean.len())));
        }
        let block = |what: &str, v: &[f64]| -> Result<(), ModelError> {
            if v.len() != len {
                return Err(fmt(format!("{what} has {} values, expected {len}", v.len())));
            }
            Ok(())
        };
        let model: ShapeModel = match self.kind.as_str() {
            "pca" => {
                let basis = self.basis.ok_or_else(|| fmt("missing basis".into()))?;
                let sigmas = self.sigmas.ok_or_else(|| fmt("missing sigmas".into()))?;
                if basis.len() != self.n {
                    return Err(fmt(format!("basis has {} modes, n = {}", basis.len(), self.n)));
                }
                for col in &basis {
                    block("basis mode", col)?;
                }
                let mat = DMatrix::from_fn(len, self.n, |r, c| basis[c][r]);
                PcaModel {
                    mean: DVector::from_vec(self.mean),
                    basis: mat,
                    sigmas,
                    faces: self.faces,
                }
                .into()
            }
            "multilinear" => {
                let m = self.m.ok_or_else(|| fmt("missing m".into()))?;
                let core = self.core.ok_or_else(|| fmt("missing core".into()))?;
                if core.len() != self.n || core.iter().any(|row| row.len() != m) {
                    return Err(fmt(format!("core must be {} x {m} blocks", self.n)));
                }
                for row in &core {
                    for c in row {
                        block("core block", c)?;
                    }
                }
                let mat = DMatrix::from_fn(len, self.n * m, |r, c| core[c / m][c % m][r]);
                MultilinearModel {
                    mean: DVector::from_vec(self.mean),
                    core: mat,
                    n: self.n,
                    m,
                    neutral_x: DVector::from_vec(self.neutral_x.ok_or_else(|| fmt("missing neutral_x".into()))?),
                    neutral_y: DVector::from_vec(self.neutral_y.ok_or_else(|| fmt("missing neutral_y".into()))?),
                    sigmas_x: self.sigmas_x.ok_or_else(|| fmt("missing sigmas_x".into()))?,
                    sigmas_y: self.sigmas_y.ok_or_else(|| fmt("missing sigmas_y".into()))?,
                    faces: self.faces,
                }
                .into()
            }
            other => return Err(fmt(format!("unknown kind {other:?}"))),
        };
        let checked = match &model {
            ShapeModel::Pca(p) => p.validate(),
            ShapeModel::Multilinear(t) => t.validate(),
        };
        checked.map_err(|e| fmt(e.to_string()))?;
        Ok(model)
    }
}

pub fn model_to_json(model: &ShapeModel) -> String {
    serde_json::to_string(&ModelFile::from_model(model)).expect("model serializes")
}

pub fn model_from_json(text: &str) -> Result<ShapeModel, ModelError> {
    let file: ModelFile = serde_json::from_str(text).map_err(|e| ModelError::Format(e.to_string()))?;
    file.into_model()
}

pub fn save_model(path: impl AsRef<Path>, model: &ShapeModel) -> Result<(), ModelError> {
    fs::write(path, model_to_json(model))?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ShapeModel, ModelError> {
    let text = fs::read_to_string(path)?;
    model_from_json(&text)
}

/// Row-major grid triangulation with `2·(g−1)²` triangles.
pub fn grid_faces(grid: usize) -> Vec<[usize; 3]> {
    let mut faces = Vec::with_capacity(2 * (grid - 1) * (grid - 1));
    for r in 0..grid - 1 {
        for c in 0..grid - 1 {
            let a = r * grid + c;
            let b = a + 1;
            let d = a + grid;
            let e = d + 1;
            faces.push([a, b, e]);
            faces.push([a, e, d]);
        }
    }
    faces
}

// Parameter-space coordinates in [0,1]² for each grid vertex.
fn grid_params(grid: usize) -> Vec<(f64, f64)> {
    let step = 1.0 / (grid - 1) as f64;
    (0..grid)
        .flat_map(|r| (0..grid).map(move |c| (c as f64 * step, r as f64 * step)))
        .collect()
}

/// A smooth random displacement field: a handful of Gaussian bumps in
/// parameter space, each with a random 3D direction, normalized to
/// `amplitude` mm RMS over the surface.
fn smooth_field(rng: &mut ChaCha8Rng, params: &[(f64, f64)], amplitude: f64) -> Vec<f64> {
    let bumps: Vec<_> = (0..4)
        .map(|_| {
            let cu: f64 = rng.random_range(0.0..1.0);
            let cv: f64 = rng.random_range(0.0..1.0);
            let width: f64 = rng.random_range(0.25..0.6);
            let dir = [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ];
            (cu, cv, width, dir)
        })
        .collect();
    let mut field = vec![0.0; params.len() * 3];
    for (k, &(u, v)) in params.iter().enumerate() {
        for (cu, cv, width, dir) in &bumps {
            let g = (-((u - cu).powi(2) + (v - cv).powi(2)) / (2.0 * width * width)).exp();
            for a in 0..3 {
                field[3 * k + a] += g * dir[a];
            }
        }
    }
    let rms = (field.iter().map(|f| f * f).sum::<f64>() / params.len() as f64).sqrt();
    let scale = if rms > 0.0 { amplitude / rms } else { 0.0 };
    field.iter_mut().for_each(|f| *f *= scale);
    field
}

/// Deterministic synthetic tongue model on a `grid × grid` height field.
///
/// The mean is a dome about 50 mm long and 40 mm wide sitting below the
/// bite plane. Modes are smooth random deformation fields with unit weight
/// variance (`sigmas = 1`). The neutral anatomy is the all-ones vector and
/// the neutral pose is zero, so reconstruction at neutral is the mean while
/// the pose modes remain reachable from it.
pub fn generate_synthetic_model(seed: u64, n: usize, m: usize, grid: usize) -> MultilinearModel {
    assert!(n >= 1 && m >= 1, "model dimensions must be positive");
    assert!(grid >= 2, "grid must be at least 2");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = grid_params(grid);
    let mut mean = Vec::with_capacity(params.len() * 3);
    for &(u, v) in &params {
        let x = 40.0 * (u - 0.5);
        let y = -5.0 - 50.0 * v;
        let bulge = (-((u - 0.5) / 0.35).powi(2)).exp() * (std::f64::consts::PI * v).sin();
        mean.extend_from_slice(&[x, y, -18.0 + 14.0 * bulge]);
    }
    // per-mode amplitude keeps Σᵢ xᵢ·c_ij around 2 mm at neutral anatomy
    let amplitude = 2.0 / (n as f64).sqrt();
    let len = params.len() * 3;
    let mut core = DMatrix::zeros(len, n * m);
    for col in 0..n * m {
        let field = smooth_field(&mut rng, &params, amplitude);
        core.column_mut(col).copy_from_slice(&field);
    }
    MultilinearModel {
        mean: DVector::from_vec(mean),
        core,
        n,
        m,
        neutral_x: DVector::from_element(n, 1.0),
        neutral_y: DVector::zeros(m),
        sigmas_x: vec![1.0; n],
        sigmas_y: vec![1.0; m],
        faces: grid_faces(grid),
    }
}

/// Deterministic synthetic palate model: a vault above the bite plane with
/// `n` smooth unit-variance modes.
pub fn generate_synthetic_palate(seed: u64, n: usize, grid: usize) -> PcaModel {
    assert!(n >= 1, "model dimension must be positive");
    assert!(grid >= 2, "grid must be at least 2");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9a1a_7e00);
    let params = grid_params(grid);
    let mut mean = Vec::with_capacity(params.len() * 3);
    for &(u, v) in &params {
        let x = 44.0 * (u - 0.5);
        let y = -2.0 - 48.0 * v;
        let vault = (-((u - 0.5) / 0.3).powi(2)).exp() * (0.5 + 0.5 * (std::f64::consts::PI * v).sin());
        mean.extend_from_slice(&[x, y, 3.0 + 12.0 * vault]);
    }
    let len = params.len() * 3;
    let mut basis = DMatrix::zeros(len, n);
    for col in 0..n {
        let field = smooth_field(&mut rng, &params, 1.5);
        basis.column_mut(col).copy_from_slice(&field);
    }
    PcaModel {
        mean: DVector::from_vec(mean),
        basis,
        sigmas: vec![1.0; n],
        faces: grid_faces(grid),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pca_zero_and_unit_weights() {
        let model = generate_synthetic_palate(3, 4, 6);
        let zero = model.reconstruct(&DVector::zeros(4)).unwrap();
        assert_eq!(zero.flat_vertices(), model.mean.as_slice());

        let mut x = DVector::zeros(4);
        x[0] = 2.0;
        let got = model.reconstruct(&x).unwrap().flat_vertices();
        for (k, g) in got.iter().enumerate() {
            assert_eq!(*g, model.mean[k] + 2.0 * model.basis[(k, 0)]);
        }
        assert!(matches!(
            model.reconstruct(&DVector::zeros(3)),
            Err(ModelError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn multilinear_scalar_bilinear_form() {
        let mut model = generate_synthetic_model(1, 1, 1, 3);
        let c: Vec<f64> = model.core.column(0).iter().copied().collect();
        let got = model.reconstruct_flat(&[2.0], &[3.0]).unwrap();
        for k in 0..got.len() {
            assert!((got[k] - (model.mean[k] + 6.0 * c[k])).abs() < 1e-12);
        }
        model.core.fill(0.0);
        assert_eq!(model.reconstruct_flat(&[5.0], &[-7.0]).unwrap(), model.mean.as_slice());
        assert!(model.reconstruct_flat(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn synthetic_model_shape() {
        let a = generate_synthetic_model(7, 2, 3, 10);
        let b = generate_synthetic_model(7, 2, 3, 10);
        assert_eq!(a, b);
        assert_eq!(a.vertex_count(), 100);
        assert_eq!(a.faces.len(), 162);
        a.validate().unwrap();
        assert_ne!(a, generate_synthetic_model(8, 2, 3, 10));

        let m = generate_synthetic_model(1, 2, 3, 10);
        let neutral = m
            .reconstruct_flat(m.neutral_x.as_slice(), m.neutral_y.as_slice())
            .unwrap();
        assert_eq!(neutral, m.mean.as_slice());
    }

    #[test]
    fn correspondence_validation() {
        let ok = [Correspondence::new("tt", 3), Correspondence::new("tb", 4)];
        validate_correspondences(&ok, 5).unwrap();
        assert!(validate_correspondences(&[Correspondence::new("tt", 5)], 5).is_err());
        let dup = [Correspondence::new("tt", 1), Correspondence::new("tt", 2)];
        assert!(validate_correspondences(&dup, 5).is_err());
    }

    #[test]
    fn model_file_rejects_bad_documents() {
        let model: ShapeModel = generate_synthetic_model(2, 2, 2, 3).into();
        let json = model_to_json(&model);
        assert_eq!(model_from_json(&json).unwrap(), model);

        let truncated = &json[..json.len() / 2];
        assert!(matches!(model_from_json(truncated), Err(ModelError::Format(_))));

        let bad_magic = json.replace(MODEL_FORMAT, "something-else");
        assert!(matches!(model_from_json(&bad_magic), Err(ModelError::Format(_))));

        let bad_version = json.replace("\"version\":1", "\"version\":2");
        assert!(matches!(model_from_json(&bad_version), Err(ModelError::Format(_))));

        // right number of core blocks, but each one a vertex short
        let mut value: serde_json::Value = serde_json::from_str(&json).unwrap();
        for row in value["core"].as_array_mut().unwrap() {
            for block in row.as_array_mut().unwrap() {
                let b = block.as_array_mut().unwrap();
                b.truncate(b.len() - 3);
            }
        }
        assert!(matches!(
            model_from_json(&value.to_string()),
            Err(ModelError::Format(_))
        ));
    }

    #[test]
    fn pca_file_round_trip() {
        let model: ShapeModel = generate_synthetic_palate(5, 3, 4).into();
        let back = model_from_json(&model_to_json(&model)).unwrap();
        assert_eq!(back, model);
        assert!(back.clone().into_multilinear().is_err());
        back.into_pca().unwrap();
    }
}
