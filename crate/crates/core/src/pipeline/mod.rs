//! The processing unit: head correction, bite-plane normalization,
//! smoothing, delay, tongue fitting and fan-out to sinks, plus the session
//! workflow (reference pose, bite plane, palate trace).
//!
//! Per frame the order is fixed: head-correct → normalize → smooth →
//! delay → fit.

mod broadcast;
mod correct;
mod run;
mod session;
mod sinks;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fitting::{FitError, SolverOptions};
use crate::geometry::{GeometryError, RigidTransform, Vec3};
use crate::models::{Correspondence, ModelError};
use crate::stream::{CoilSample, StreamError};

pub use broadcast::{
    frame_message, BroadcastServer, BroadcastSink, ClientMessage, PlaySource, ServerMessage, TaskAction, Weights,
    WireCoil, BROADCAST_VERSION,
};
pub use correct::{head_correct, normalize, smooth, Smoother};
pub use run::{
    percentile, run_session, Models, Output, Processor, SessionEnd, SessionOptions, SessionReport, SinkReport,
    SourceOpener,
};
pub use session::{
    record_bite_plane, record_origin, record_palate_trace, record_reference, Phase, Session, TaskKind, TaskOutcome,
    PALATE_OUTER_ITERATIONS, PALATE_PRIOR_WEIGHT,
};
pub use sinks::{ChannelSink, FrameSink, QueuePolicy, RecorderSink, SessionEvent, SinkError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("fewer than three usable reference coils")]
    InsufficientReference,
    #[error("bite-plane coils were not visible often enough")]
    BiteCoilsMissing,
    #[error("the origin point has not been recorded")]
    OriginMissing,
    #[error("no bite plane recorded yet")]
    NoBitePlane,
    #[error("no reference pose captured yet")]
    NoReferencePose,
    #[error("palate trace has no visible samples")]
    EmptyTrace,
    #[error("no palate model loaded")]
    NoPalateModel,
    #[error("task {0} is already running")]
    TaskActive(String),
    #[error("no task is running")]
    NoTask,
    #[error("invalid roles: {0}")]
    InvalidRoles(String),
    #[error("invalid setting: {0}")]
    InvalidSetting(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Stream(#[from] StreamError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("session config: {0}")]
    Config(String),
}

impl PipelineError {
    /// Numeric code used in `error` messages to visualization clients.
    pub fn code(&self) -> u16 {
        match self {
            PipelineError::NoBitePlane
            | PipelineError::NoReferencePose
            | PipelineError::TaskActive(_)
            | PipelineError::NoTask => 409,
            PipelineError::InvalidRoles(_) | PipelineError::InvalidSetting(_) | PipelineError::Config(_) => 400,
            PipelineError::NoPalateModel => 404,
            _ => 422,
        }
    }
}

/// Which coil plays which part.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoilRoles {
    /// Head-reference coils used for head correction (at least three).
    pub reference: Vec<String>,
    pub tongue: Vec<Correspondence>,
    pub bite_left: String,
    pub bite_right: String,
    pub bite_front: String,
    /// Coil marking the origin, or `"recorded"` to use a recorded point.
    pub origin: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jaw: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upper_lip: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lower_lip: Option<String>,
    /// Coil that traces the palate; defaults to the first tongue coil.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub palate_trace: Option<String>,
}

pub const RECORDED_ORIGIN: &str = "recorded";

impl CoilRoles {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::InvalidRoles(m));
        if self.reference.len() < 3 {
            return bad(format!("need at least 3 reference coils, got {}", self.reference.len()));
        }
        let mut seen = std::collections::HashSet::new();
        for r in &self.reference {
            if !seen.insert(r) {
                return bad(format!("reference coil {r} listed twice"));
            }
        }
        let mut tongue = std::collections::HashSet::new();
        for c in &self.tongue {
            if !tongue.insert(&c.coil_id) {
                return bad(format!("tongue coil {} listed twice", c.coil_id));
            }
            if seen.contains(&c.coil_id) {
                return bad(format!("coil {} is both reference and tongue", c.coil_id));
            }
        }
        let bite = [&self.bite_left, &self.bite_right, &self.bite_front];
        if bite[0] == bite[1] || bite[1] == bite[2] || bite[0] == bite[2] {
            return bad("bite-plane coils must be distinct".into());
        }
        if self.origin.is_empty() {
            return bad("origin must name a coil or \"recorded\"".into());
        }
        Ok(())
    }

    pub fn trace_coil(&self) -> Option<&str> {
        self.palate_trace
            .as_deref()
            .or_else(|| self.tongue.first().map(|c| c.coil_id.as_str()))
    }

    pub fn origin_coil(&self) -> Option<&str> {
        (self.origin != RECORDED_ORIGIN).then_some(self.origin.as_str())
    }
}

/// Tracker parameters that live in the session config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackingSettings {
    pub alpha_prior: f64,
    pub beta_temporal: f64,
    pub freeze_after: usize,
    pub solver: SolverOptions,
}

impl Default for TrackingSettings {
    fn default() -> Self {
        let d = crate::fitting::TrackerConfig::default();
        Self {
            alpha_prior: d.alpha_prior,
            beta_temporal: d.beta_temporal,
            freeze_after: d.freeze_after,
            solver: d.solver,
        }
    }
}

/// Session state persisted as JSON. Vertex indices are 0-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub roles: CoilRoles,
    /// Reference-coil positions defining the head-corrected frame (mm).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_pose: Option<BTreeMap<String, [f64; 3]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bite_transform: Option<RigidTransform>,
    /// Recorded origin in head-corrected coordinates (mm).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin_point: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub palate_weights: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub palate_residual: Option<f64>,
    #[serde(default = "default_window")]
    pub smoothing_window: usize,
    /// Seconds.
    #[serde(default)]
    pub delay: f64,
    /// Extra affine `[[a, b, c, tx], ...]` applied after bite-plane normalization.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transform: Option<[[f64; 4]; 3]>,
    /// Length (s) of the automatic reference-pose capture at session start.
    #[serde(default = "default_reference_seconds")]
    pub reference_seconds: f64,
    #[serde(default)]
    pub tracking: TrackingSettings,
}

fn default_window() -> usize {
    5
}

fn default_reference_seconds() -> f64 {
    1.0
}

impl SessionConfig {
    pub fn new(roles: CoilRoles) -> Self {
        Self {
            roles,
            reference_pose: None,
            bite_transform: None,
            origin_point: None,
            palate_weights: None,
            palate_residual: None,
            smoothing_window: default_window(),
            delay: 0.0,
            transform: None,
            reference_seconds: default_reference_seconds(),
            tracking: TrackingSettings::default(),
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.roles.validate()?;
        if self.smoothing_window == 0 || self.smoothing_window.is_multiple_of(2) {
            return Err(PipelineError::InvalidSetting(format!(
                "smoothing_window must be odd and >= 1, got {}",
                self.smoothing_window
            )));
        }
        if !(self.delay >= 0.0 && self.delay.is_finite()) {
            return Err(PipelineError::InvalidSetting(format!(
                "delay must be >= 0, got {}",
                self.delay
            )));
        }
        if self.bite_transform.is_some() && self.reference_pose.is_none() {
            return Err(PipelineError::Config("bite_transform requires reference_pose".into()));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<(), PipelineError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| PipelineError::Config(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn reference_points(&self) -> Option<BTreeMap<String, Vec3>> {
        self.reference_pose
            .as_ref()
            .map(|m| m.iter().map(|(k, v)| (k.clone(), Vec3::from(*v))).collect())
    }

    pub fn tracker_config(&self) -> crate::fitting::TrackerConfig {
        crate::fitting::TrackerConfig {
            correspondences: self.roles.tongue.clone(),
            alpha_prior: self.tracking.alpha_prior,
            beta_temporal: self.tracking.beta_temporal,
            freeze_after: self.tracking.freeze_after,
            solver: self.tracking.solver,
        }
    }
}

/// One fully processed frame, as sent to sinks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessedFrame {
    pub seq: u64,
    pub t: f64,
    /// Head-corrected, normalized and smoothed coils.
    pub coils: Vec<CoilSample>,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    /// Flat 3V tongue vertex buffer (mm).
    pub vertices: Vec<f64>,
    /// RMS coil-to-vertex distance (mm).
    pub residual: f64,
    pub solver_iterations: usize,
    pub head_corrected: bool,
    pub held: bool,
}
