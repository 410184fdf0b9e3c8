//! Per-frame tongue tracking.
//!
//! Each frame minimizes
//!
//! ```text
//! E(x, y) = Σ_c |v_c(x, y) − p_c|²
//!         + α·(|x − x₀|²_σ + |y − y₀|²_σ)
//!         + β·(|x − x_prev|² + |y − y_prev|²)
//! ```
//!
//! over the visible correspondence coils `c`, warm-started at the previous
//! frame's weights. After `freeze_after` frames the anatomy weights are
//! replaced by the average of their estimates so far and held fixed.

use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{minimize, FitError, SolverOptions};
use crate::geometry::{Mesh, Vec3};
use crate::models::{validate_correspondences, Correspondence, MultilinearModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackerConfig {
    pub correspondences: Vec<Correspondence>,
    /// Pull toward the model's neutral weights (σ-weighted).
    pub alpha_prior: f64,
    /// Pull toward the previous frame's weights.
    pub beta_temporal: f64,
    pub freeze_after: usize,
    pub solver: SolverOptions,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            correspondences: Vec::new(),
            alpha_prior: 0.1,
            beta_temporal: 1.0,
            freeze_after: 200,
            solver: SolverOptions::default(),
        }
    }
}

impl TrackerConfig {
    pub fn new(correspondences: Vec<Correspondence>) -> Self {
        Self {
            correspondences,
            ..Default::default()
        }
    }

    pub fn validate(&self, model: &MultilinearModel) -> Result<(), FitError> {
        if self.correspondences.is_empty() {
            return Err(FitError::InvalidConfig("no tongue correspondences".into()));
        }
        if self.freeze_after == 0 {
            return Err(FitError::InvalidConfig("freeze_after must be at least 1".into()));
        }
        if !(self.alpha_prior >= 0.0 && self.beta_temporal >= 0.0) {
            return Err(FitError::InvalidConfig("regularization weights must be >= 0".into()));
        }
        self.solver.validate()?;
        validate_correspondences(&self.correspondences, model.vertex_count())?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackerState {
    pub x: DVector<f64>,
    pub y: DVector<f64>,
    pub frame_count: usize,
    pub frozen: bool,
    /// Anatomy estimates collected until the freeze.
    pub x_history: Vec<DVector<f64>>,
}

impl TrackerState {
    /// Starts at the model's neutral weights.
    pub fn neutral(model: &MultilinearModel) -> Self {
        Self {
            x: model.neutral_x.clone(),
            y: model.neutral_y.clone(),
            frame_count: 0,
            frozen: false,
            x_history: Vec::new(),
        }
    }

    fn check(&self, model: &MultilinearModel) -> Result<(), FitError> {
        if self.x.len() != model.n || self.y.len() != model.m {
            return Err(FitError::DimensionMismatch(format!(
                "tracker state is ({}, {}) but the model is ({}, {})",
                self.x.len(),
                self.y.len(),
                model.n,
                model.m
            )));
        }
        Ok(())
    }
}

/// Per-frame solver record.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FrameDiagnostics {
    pub iterations: usize,
    pub gradient_norm: f64,
    /// RMS distance (mm) between visible coils and their vertices.
    pub residual: f64,
    /// Largest such distance (mm).
    pub max_residual: f64,
    pub visible_coils: usize,
    pub converged: bool,
    /// Set when no correspondence coil was visible; weights were held.
    pub held: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackOutput {
    pub vertices: Vec<f64>,
    pub diagnostics: FrameDiagnostics,
}

// The rows of the model that matter for one correspondence.
#[derive(Debug, Clone)]
struct CoilBlock {
    mean: Vec3,
    /// 3 × (n·m) slice of the core.
    core: DMatrix<f64>,
}

impl CoilBlock {
    fn new(model: &MultilinearModel, vertex: usize) -> Self {
        let rows = model.core.rows(3 * vertex, 3).into_owned();
        Self {
            mean: Vec3::new(
                model.mean[3 * vertex],
                model.mean[3 * vertex + 1],
                model.mean[3 * vertex + 2],
            ),
            core: rows,
        }
    }

    fn vertex(&self, kron: &DVector<f64>) -> Vec3 {
        let d = &self.core * kron;
        self.mean + Vec3::new(d[0], d[1], d[2])
    }
}

/// The tracking objective for one frame, with analytic gradient.
#[derive(Debug, Clone)]
pub struct TongueObjective {
    n: usize,
    m: usize,
    blocks: Vec<CoilBlock>,
    targets: Vec<Vec3>,
    neutral_x: DVector<f64>,
    neutral_y: DVector<f64>,
    inv_var_x: DVector<f64>,
    inv_var_y: DVector<f64>,
    sigmas_x: Vec<f64>,
    sigmas_y: Vec<f64>,
    prev_x: DVector<f64>,
    prev_y: DVector<f64>,
    alpha: f64,
    beta: f64,
}

impl TongueObjective {
    /// `targets` pairs correspondence vertices with measured coil positions.
    pub fn new(
        model: &MultilinearModel,
        targets: &[(usize, Vec3)],
        alpha_prior: f64,
        beta_temporal: f64,
        prev_x: DVector<f64>,
        prev_y: DVector<f64>,
    ) -> Self {
        Self {
            n: model.n,
            m: model.m,
            blocks: targets.iter().map(|(v, _)| CoilBlock::new(model, *v)).collect(),
            targets: targets.iter().map(|(_, p)| *p).collect(),
            neutral_x: model.neutral_x.clone(),
            neutral_y: model.neutral_y.clone(),
            inv_var_x: DVector::from_iterator(model.n, model.sigmas_x.iter().map(|s| 1.0 / (s * s))),
            inv_var_y: DVector::from_iterator(model.m, model.sigmas_y.iter().map(|s| 1.0 / (s * s))),
            sigmas_x: model.sigmas_x.clone(),
            sigmas_y: model.sigmas_y.clone(),
            prev_x,
            prev_y,
            alpha: alpha_prior,
            beta: beta_temporal,
        }
    }

    fn kron(&self, x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.n * self.m, |k, _| x[k / self.m] * y[k % self.m])
    }

    /// Value of `E`; gradients are written into `gx`, `gy`.
    pub fn evaluate(&self, x: &DVector<f64>, y: &DVector<f64>, gx: &mut DVector<f64>, gy: &mut DVector<f64>) -> f64 {
        let kron = self.kron(x, y);
        // G = Σ_c r_cᵀ · core_c, reshaped n × m
        let mut g = DMatrix::zeros(self.n, self.m);
        let mut value = 0.0;
        for (block, p) in self.blocks.iter().zip(&self.targets) {
            let r = block.vertex(&kron) - p;
            value += r.norm_squared();
            for k in 0..self.n * self.m {
                let c = block.core.column(k);
                g[(k / self.m, k % self.m)] += r[0] * c[0] + r[1] * c[1] + r[2] * c[2];
            }
        }
        gx.copy_from(&(&g * y * 2.0));
        gy.copy_from(&(g.transpose() * x * 2.0));

        let dx0 = x - &self.neutral_x;
        let dy0 = y - &self.neutral_y;
        let dxp = x - &self.prev_x;
        let dyp = y - &self.prev_y;
        value +=
            self.alpha * (dx0.dot(&dx0.component_mul(&self.inv_var_x)) + dy0.dot(&dy0.component_mul(&self.inv_var_y)));
        value += self.beta * (dxp.norm_squared() + dyp.norm_squared());
        *gx += dx0.component_mul(&self.inv_var_x) * (2.0 * self.alpha) + dxp * (2.0 * self.beta);
        *gy += dy0.component_mul(&self.inv_var_y) * (2.0 * self.alpha) + dyp * (2.0 * self.beta);
        value
    }

    pub fn value(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        let mut gx = DVector::zeros(self.n);
        let mut gy = DVector::zeros(self.m);
        self.evaluate(x, y, &mut gx, &mut gy)
    }

    /// Distances (mm) between each target and its model vertex.
    pub fn residuals(&self, x: &DVector<f64>, y: &DVector<f64>) -> Vec<f64> {
        let kron = self.kron(x, y);
        self.blocks
            .iter()
            .zip(&self.targets)
            .map(|(b, p)| (b.vertex(&kron) - p).norm())
            .collect()
    }

    fn minimize_joint(
        &self,
        x0: &DVector<f64>,
        y0: &DVector<f64>,
        opts: &SolverOptions,
    ) -> Result<(DVector<f64>, DVector<f64>, super::Minimum), FitError> {
        let (n, m) = (self.n, self.m);
        let mut z0 = DVector::zeros(n + m);
        z0.rows_mut(0, n).copy_from(x0);
        z0.rows_mut(n, m).copy_from(y0);
        let mut gx = DVector::zeros(n);
        let mut gy = DVector::zeros(m);
        let res = minimize(
            |z, grad| {
                let x = z.rows(0, n).into_owned();
                let y = z.rows(n, m).into_owned();
                let v = self.evaluate(&x, &y, &mut gx, &mut gy);
                grad.rows_mut(0, n).copy_from(&gx);
                grad.rows_mut(n, m).copy_from(&gy);
                v
            },
            z0,
            opts,
        )?;
        Ok((res.x.rows(0, n).into_owned(), res.x.rows(n, m).into_owned(), res))
    }

    fn minimize_pose(
        &self,
        x: &DVector<f64>,
        y0: &DVector<f64>,
        opts: &SolverOptions,
    ) -> Result<(DVector<f64>, super::Minimum), FitError> {
        let mut gx = DVector::zeros(self.n);
        let res = minimize(|y, grad| self.evaluate(x, y, &mut gx, grad), y0.clone(), opts)?;
        Ok((res.x.clone(), res))
    }
}

/// Largest relative deviation between the analytic gradient and central
/// differences with step `1e-5·σ` per weight, relative to the larger of the
/// two gradients' max-norms.
pub fn objective_gradient_check(objective: &TongueObjective, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
    let mut gx = DVector::zeros(objective.n);
    let mut gy = DVector::zeros(objective.m);
    objective.evaluate(x, y, &mut gx, &mut gy);

    let mut numeric_x = DVector::zeros(objective.n);
    for i in 0..objective.n {
        let h = 1e-5 * objective.sigmas_x[i];
        let (mut xp, mut xm) = (x.clone(), x.clone());
        xp[i] += h;
        xm[i] -= h;
        numeric_x[i] = (objective.value(&xp, y) - objective.value(&xm, y)) / (2.0 * h);
    }
    let mut numeric_y = DVector::zeros(objective.m);
    for j in 0..objective.m {
        let h = 1e-5 * objective.sigmas_y[j];
        let (mut yp, mut ym) = (y.clone(), y.clone());
        yp[j] += h;
        ym[j] -= h;
        numeric_y[j] = (objective.value(x, &yp) - objective.value(x, &ym)) / (2.0 * h);
    }

    let scale = gx.amax().max(gy.amax()).max(numeric_x.amax()).max(numeric_y.amax());
    if scale == 0.0 {
        return 0.0;
    }
    let err = (&gx - &numeric_x).amax().max((&gy - &numeric_y).amax());
    err / scale
}

/// Owns the tracker state for one stream of frames.
#[derive(Debug, Clone)]
pub struct Tracker {
    model: Arc<MultilinearModel>,
    config: TrackerConfig,
    state: TrackerState,
}

impl Tracker {
    pub fn new(model: Arc<MultilinearModel>, config: TrackerConfig) -> Result<Self, FitError> {
        config.validate(&model)?;
        let state = TrackerState::neutral(&model);
        Ok(Self { model, config, state })
    }

    pub fn with_state(
        model: Arc<MultilinearModel>,
        config: TrackerConfig,
        state: TrackerState,
    ) -> Result<Self, FitError> {
        config.validate(&model)?;
        state.check(&model)?;
        Ok(Self { model, config, state })
    }

    pub fn state(&self) -> &TrackerState {
        &self.state
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.config
    }

    pub fn model(&self) -> &Arc<MultilinearModel> {
        &self.model
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.model.faces
    }

    /// Fits one frame. Coils absent from `coils` are treated as missing.
    pub fn track(&mut self, coils: &HashMap<String, Vec3>) -> Result<TrackOutput, FitError> {
        let (state, output) = advance(&self.state, &self.model, &self.config, coils)?;
        self.state = state;
        Ok(output)
    }
}

fn advance(
    state: &TrackerState,
    model: &MultilinearModel,
    cfg: &TrackerConfig,
    coils: &HashMap<String, Vec3>,
) -> Result<(TrackerState, TrackOutput), FitError> {
    state.check(model)?;
    let targets: Vec<(usize, Vec3)> = cfg
        .correspondences
        .iter()
        .filter_map(|c| coils.get(&c.coil_id).map(|p| (c.vertex_index, *p)))
        .collect();

    if targets.is_empty() {
        let vertices = model.reconstruct_flat(state.x.as_slice(), state.y.as_slice())?;
        let diagnostics = FrameDiagnostics {
            held: true,
            ..Default::default()
        };
        return Ok((state.clone(), TrackOutput { vertices, diagnostics }));
    }

    let objective = TongueObjective::new(
        model,
        &targets,
        cfg.alpha_prior,
        cfg.beta_temporal,
        state.x.clone(),
        state.y.clone(),
    );
    let mut next = state.clone();
    next.frame_count += 1;

    let result = if next.frozen {
        let (y, res) = objective.minimize_pose(&next.x, &next.y, &cfg.solver)?;
        next.y = y;
        res
    } else {
        let (x, y, res) = objective.minimize_joint(&next.x, &next.y, &cfg.solver)?;
        next.x = x;
        next.y = y;
        next.x_history.push(next.x.clone());
        if next.frame_count >= cfg.freeze_after {
            let count = next.x_history.len() as f64;
            let sum = next.x_history.iter().fold(DVector::zeros(model.n), |acc, x| acc + x);
            next.x = sum / count;
            next.frozen = true;
            next.x_history.clear();
            // re-fit the pose against the averaged anatomy
            let (y, res) = objective.minimize_pose(&next.x, &next.y, &cfg.solver)?;
            next.y = y;
            res
        } else {
            res
        }
    };

    let residuals = objective.residuals(&next.x, &next.y);
    let rms = (residuals.iter().map(|r| r * r).sum::<f64>() / residuals.len() as f64).sqrt();
    let vertices = model.reconstruct_flat(next.x.as_slice(), next.y.as_slice())?;
    let diagnostics = FrameDiagnostics {
        iterations: result.iterations,
        gradient_norm: result.gradient_norm,
        residual: rms,
        max_residual: residuals.iter().copied().fold(0.0, f64::max),
        visible_coils: targets.len(),
        converged: result.converged,
        held: false,
    };
    Ok((next, TrackOutput { vertices, diagnostics }))
}

/// Functional form of [`Tracker::track`]: returns the advanced state, the
/// reconstructed mesh and the solver record.
pub fn track_frame(
    state: &TrackerState,
    model: &MultilinearModel,
    cfg: &TrackerConfig,
    coils: &HashMap<String, Vec3>,
) -> Result<(TrackerState, Mesh, FrameDiagnostics), FitError> {
    cfg.validate(model)?;
    let (next, out) = advance(state, model, cfg, coils)?;
    let mesh = Mesh::from_flat(&out.vertices, model.faces.clone())?;
    Ok((next, mesh, out.diagnostics))
}
