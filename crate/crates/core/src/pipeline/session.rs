use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{PipelineError, SessionConfig};
use crate::fitting::fit_palate;
use crate::geometry::{bite_plane_frame, Vec3};
use crate::models::PcaModel;
use crate::stream::CoilFrame;

/// Palate fit settings used by the palate-trace task.
pub const PALATE_PRIOR_WEIGHT: f64 = 1e-6;
pub const PALATE_OUTER_ITERATIONS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    /// No reference pose yet.
    Setup,
    /// Reference pose captured; waiting for the bite plane.
    Biteplane,
    /// Canonical frame established; palate trace is optional.
    Palate,
    /// Palate fitted.
    Live,
}

impl Phase {
    pub fn of(config: &SessionConfig) -> Self {
        if config.reference_pose.is_none() {
            Phase::Setup
        } else if config.bite_transform.is_none() {
            Phase::Biteplane
        } else if config.palate_weights.is_none() {
            Phase::Palate
        } else {
            Phase::Live
        }
    }

    /// Whether tongue fitting runs: the model lives in the canonical frame.
    pub fn tracks(self) -> bool {
        matches!(self, Phase::Palate | Phase::Live)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Reference,
    Biteplane,
    Palate,
    /// Records the origin point with the trace coil (roles.origin = "recorded").
    Origin,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Reference => "reference",
            TaskKind::Biteplane => "biteplane",
            TaskKind::Palate => "palate",
            TaskKind::Origin => "origin",
        }
    }
}

/// What a completed task changed.
#[derive(Debug, Clone, PartialEq)]
pub enum TaskOutcome {
    Reference { coils: usize, frames: usize },
    Biteplane { frames: usize },
    Palate { points: usize, residual: f64 },
    Origin { point: Vec3 },
}

fn mean_of(points: impl IntoIterator<Item = Vec3>) -> Option<(Vec3, usize)> {
    let (sum, count) = points
        .into_iter()
        .fold((Vec3::zeros(), 0usize), |(s, c), p| (s + p, c + 1));
    (count > 0).then(|| (sum / count as f64, count))
}

/// Reference pose: per-coil mean over `frames` (raw device coordinates).
/// Every reference coil must be visible at least once.
pub fn record_reference(config: &SessionConfig, frames: &[CoilFrame]) -> Result<SessionConfig, PipelineError> {
    let mut pose = BTreeMap::new();
    for id in &config.roles.reference {
        let Some((mean, _)) = mean_of(frames.iter().filter_map(|f| f.position(id))) else {
            return Err(PipelineError::InsufficientReference);
        };
        pose.insert(id.clone(), [mean.x, mean.y, mean.z]);
    }
    let mut out = config.clone();
    out.reference_pose = Some(pose);
    // everything downstream was expressed relative to the old pose
    out.bite_transform = None;
    out.palate_weights = None;
    out.palate_residual = None;
    if out.roles.origin_coil().is_none() {
        out.origin_point = None;
    }
    Ok(out)
}

/// Origin point: mean of the trace coil over head-corrected `frames`.
pub fn record_origin(config: &SessionConfig, frames: &[CoilFrame]) -> Result<SessionConfig, PipelineError> {
    if config.reference_pose.is_none() {
        return Err(PipelineError::NoReferencePose);
    }
    let coil = config
        .roles
        .trace_coil()
        .ok_or_else(|| PipelineError::InvalidRoles("no coil to record the origin with".into()))?;
    let (mean, _) = mean_of(frames.iter().filter_map(|f| f.position(coil))).ok_or(PipelineError::OriginMissing)?;
    let mut out = config.clone();
    out.origin_point = Some([mean.x, mean.y, mean.z]);
    Ok(out)
}

/// Bite plane from head-corrected `frames`. Each bite coil (and the origin
/// coil, if the origin is a coil) must be visible in at least half of them.
pub fn record_bite_plane(config: &SessionConfig, frames: &[CoilFrame]) -> Result<SessionConfig, PipelineError> {
    if config.reference_pose.is_none() {
        return Err(PipelineError::NoReferencePose);
    }
    let roles = &config.roles;
    let average = |id: &str| -> Option<Vec3> {
        let (mean, count) = mean_of(frames.iter().filter_map(|f| f.position(id)))?;
        (2 * count >= frames.len()).then_some(mean)
    };
    let (Some(left), Some(right), Some(front)) = (
        average(&roles.bite_left),
        average(&roles.bite_right),
        average(&roles.bite_front),
    ) else {
        return Err(PipelineError::BiteCoilsMissing);
    };
    let origin = match roles.origin_coil() {
        Some(id) => average(id).ok_or(PipelineError::BiteCoilsMissing)?,
        None => Vec3::from(config.origin_point.ok_or(PipelineError::OriginMissing)?),
    };
    let mut out = config.clone();
    out.bite_transform = Some(bite_plane_frame(&left, &right, &front, &origin)?);
    out.palate_weights = None;
    out.palate_residual = None;
    Ok(out)
}

/// Palate weights from normalized `frames` of the trace coil.
pub fn record_palate_trace(
    config: &SessionConfig,
    frames: &[CoilFrame],
    palate: &PcaModel,
) -> Result<SessionConfig, PipelineError> {
    if config.bite_transform.is_none() {
        return Err(PipelineError::NoBitePlane);
    }
    let coil = config
        .roles
        .trace_coil()
        .ok_or_else(|| PipelineError::InvalidRoles("no palate trace coil".into()))?;
    let trace: Vec<Vec3> = frames.iter().filter_map(|f| f.position(coil)).collect();
    if trace.is_empty() {
        return Err(PipelineError::EmptyTrace);
    }
    let fit = fit_palate(palate, &trace, PALATE_PRIOR_WEIGHT, PALATE_OUTER_ITERATIONS)?;
    let mut out = config.clone();
    out.palate_weights = Some(fit.weights.iter().copied().collect());
    out.palate_residual = Some(fit.mean_residual);
    Ok(out)
}

#[derive(Debug)]
struct ActiveTask {
    kind: TaskKind,
    frames: Vec<CoilFrame>,
    started_at: Option<f64>,
    auto_stop: Option<f64>,
}

/// The session workflow: holds the config and the frames of the running task.
#[derive(Debug)]
pub struct Session {
    config: SessionConfig,
    palate: Option<Arc<PcaModel>>,
    task: Option<ActiveTask>,
}

impl Session {
    pub fn new(config: SessionConfig, palate: Option<Arc<PcaModel>>) -> Result<Self, PipelineError> {
        config.validate()?;
        if let (Some(w), Some(p)) = (&config.palate_weights, &palate) {
            if w.len() != p.dim() {
                return Err(PipelineError::Config(format!(
                    "palate_weights has {} entries but the palate model has {} modes",
                    w.len(),
                    p.dim()
                )));
            }
        }
        Ok(Self {
            config,
            palate,
            task: None,
        })
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn phase(&self) -> Phase {
        Phase::of(&self.config)
    }

    pub fn palate_model(&self) -> Option<&Arc<PcaModel>> {
        self.palate.as_ref()
    }

    pub fn active_task(&self) -> Option<TaskKind> {
        self.task.as_ref().map(|t| t.kind)
    }

    /// Replaces the config wholesale (roles changes, settings).
    pub fn set_config(&mut self, config: SessionConfig) -> Result<(), PipelineError> {
        config.validate()?;
        self.config = config;
        Ok(())
    }

    pub fn start_task(&mut self, kind: TaskKind) -> Result<(), PipelineError> {
        self.start(kind, None)
    }

    /// Starts a task that stops itself after `seconds` of frame time.
    pub fn start_timed_task(&mut self, kind: TaskKind, seconds: f64) -> Result<(), PipelineError> {
        self.start(kind, Some(seconds))
    }

    fn start(&mut self, kind: TaskKind, auto_stop: Option<f64>) -> Result<(), PipelineError> {
        if let Some(t) = &self.task {
            return Err(PipelineError::TaskActive(t.kind.name().into()));
        }
        match kind {
            TaskKind::Reference => {}
            TaskKind::Biteplane | TaskKind::Origin => {
                if self.config.reference_pose.is_none() {
                    return Err(PipelineError::NoReferencePose);
                }
            }
            TaskKind::Palate => {
                if self.config.bite_transform.is_none() {
                    return Err(PipelineError::NoBitePlane);
                }
                if self.palate.is_none() {
                    return Err(PipelineError::NoPalateModel);
                }
            }
        }
        self.task = Some(ActiveTask {
            kind,
            frames: Vec::new(),
            started_at: None,
            auto_stop,
        });
        Ok(())
    }

    /// Feeds one frame to the running task. `raw` is the device frame,
    /// `corrected` the head-corrected one and `normalized` the frame in the
    /// canonical coordinate system. Returns true when a timed task has
    /// collected enough and should be stopped.
    pub fn observe(&mut self, raw: &CoilFrame, corrected: Option<&CoilFrame>, normalized: Option<&CoilFrame>) -> bool {
        let Some(task) = self.task.as_mut() else {
            return false;
        };
        let frame = match task.kind {
            TaskKind::Reference => Some(raw),
            TaskKind::Biteplane | TaskKind::Origin => corrected,
            TaskKind::Palate => normalized,
        };
        if let Some(f) = frame {
            let start = *task.started_at.get_or_insert(f.t);
            task.frames.push(f.clone());
            if let (Some(limit), n) = (task.auto_stop, task.frames.len()) {
                // a frame covers one period, so n frames span (t - start) + period
                let elapsed = f.t - start;
                let period = if n > 1 { elapsed / (n - 1) as f64 } else { 0.0 };
                return elapsed + period >= limit - 1e-9;
            }
        }
        false
    }

    /// Ends the running task and applies its result to the config. On
    /// error the config is left unchanged.
    pub fn stop_task(&mut self) -> Result<TaskOutcome, PipelineError> {
        let task = self.task.take().ok_or(PipelineError::NoTask)?;
        let frames = task.frames.len();
        let (config, outcome) = match task.kind {
            TaskKind::Reference => {
                let c = record_reference(&self.config, &task.frames)?;
                let coils = c.roles.reference.len();
                (c, TaskOutcome::Reference { coils, frames })
            }
            TaskKind::Biteplane => (
                record_bite_plane(&self.config, &task.frames)?,
                TaskOutcome::Biteplane { frames },
            ),
            TaskKind::Origin => {
                let c = record_origin(&self.config, &task.frames)?;
                let point = Vec3::from(c.origin_point.expect("origin just recorded"));
                (c, TaskOutcome::Origin { point })
            }
            TaskKind::Palate => {
                let palate = self.palate.as_ref().ok_or(PipelineError::NoPalateModel)?;
                let c = record_palate_trace(&self.config, &task.frames, palate)?;
                let residual = c.palate_residual.unwrap_or(f64::NAN);
                let points = task
                    .frames
                    .iter()
                    .filter(|f| c.roles.trace_coil().is_some_and(|id| f.position(id).is_some()))
                    .count();
                (c, TaskOutcome::Palate { points, residual })
            }
        };
        self.config = config;
        Ok(outcome)
    }

    /// Drops the running task without applying anything.
    pub fn cancel_task(&mut self) {
        self.task = None;
    }
}
