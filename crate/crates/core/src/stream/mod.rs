//! EMA data ingestion: recorded sweeps (JSONL, CSV), the EMA-RT/1 device
//! protocol, a device simulator that speaks it, and the matching client.

mod client;
mod device;
pub mod protocol;
mod sweep;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{RigidTransform, Vec3};

pub use client::{connect_device, DeviceClient, DeviceStream};
pub use device::{serve_device, DeviceServer, DeviceSource};
pub use sweep::{read_sweep, write_sweep, SweepFormat, SweepWriter};

#[derive(Debug, Error)]
pub enum StreamError {
    #[error("{path}: line {line}: {message}")]
    Format { path: String, line: usize, message: String },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("connection lost")]
    ConnectionLost,
    #[error("device replied ERR {code} {message}")]
    Remote { code: u16, message: String },
    #[error("invalid frame: {0}")]
    InvalidFrame(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One coil measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoilSample {
    pub id: String,
    /// Position in mm.
    pub pos: [f64; 3],
    /// Orientation quaternion `[w, x, y, z]`.
    pub ori: Option<[f64; 4]>,
    /// False when the sensor reading is missing or invalid.
    pub ok: bool,
}

impl CoilSample {
    pub fn new(id: impl Into<String>, pos: Vec3) -> Self {
        Self {
            id: id.into(),
            pos: [pos.x, pos.y, pos.z],
            ori: None,
            ok: true,
        }
    }

    pub fn missing(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            pos: [0.0; 3],
            ori: None,
            ok: false,
        }
    }

    pub fn position(&self) -> Vec3 {
        Vec3::from(self.pos)
    }

    pub fn set_position(&mut self, p: Vec3) {
        self.pos = [p.x, p.y, p.z];
    }

    /// Moves the sample (position and orientation) through `t`.
    pub fn transformed(&self, t: &RigidTransform) -> Self {
        let mut out = self.clone();
        if !self.ok {
            return out;
        }
        out.set_position(t.apply(&self.position()));
        if let Some([w, x, y, z]) = self.ori {
            let q = nalgebra::UnitQuaternion::new_normalize(nalgebra::Quaternion::new(w, x, y, z));
            let r = t.rotation * q;
            out.ori = Some([r.w, r.i, r.j, r.k]);
        }
        out
    }

    pub fn validate(&self) -> Result<(), StreamError> {
        if let Some(q) = self.ori {
            let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(StreamError::InvalidFrame(format!(
                    "coil {} orientation has norm {norm}",
                    self.id
                )));
            }
        }
        if self.ok && self.pos.iter().any(|v| !v.is_finite()) {
            return Err(StreamError::InvalidFrame(format!(
                "coil {} position is not finite",
                self.id
            )));
        }
        Ok(())
    }
}

/// All coil samples at one instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoilFrame {
    pub seq: u64,
    /// Seconds.
    pub t: f64,
    pub coils: Vec<CoilSample>,
}

impl CoilFrame {
    pub fn get(&self, id: &str) -> Option<&CoilSample> {
        self.coils.iter().find(|c| c.id == id)
    }

    /// Position of `id` if present and valid.
    pub fn position(&self, id: &str) -> Option<Vec3> {
        self.get(id).filter(|c| c.ok).map(CoilSample::position)
    }

    pub fn transformed(&self, t: &RigidTransform) -> Self {
        Self {
            seq: self.seq,
            t: self.t,
            coils: self.coils.iter().map(|c| c.transformed(t)).collect(),
        }
    }

    pub fn validate(&self) -> Result<(), StreamError> {
        let mut seen = std::collections::HashSet::new();
        for c in &self.coils {
            if !seen.insert(c.id.as_str()) {
                return Err(StreamError::InvalidFrame(format!("duplicate coil id {}", c.id)));
            }
            c.validate()?;
        }
        if !self.t.is_finite() {
            return Err(StreamError::InvalidFrame("timestamp is not finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepHeader {
    /// Sampling rate in Hz.
    pub rate: f64,
    pub coil_ids: Vec<String>,
}

impl SweepHeader {
    pub fn new(rate: f64, coil_ids: Vec<String>) -> Self {
        Self { rate, coil_ids }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.rate.is_finite() && self.rate > 0.0) {
            return Err(format!("rate must be positive, got {}", self.rate));
        }
        let mut seen = std::collections::HashSet::new();
        for id in &self.coil_ids {
            if !seen.insert(id) {
                return Err(format!("duplicate coil id {id}"));
            }
        }
        Ok(())
    }
}

/// Anything that yields coil frames in order: a device connection or a
/// recorded sweep.
pub trait FrameSource: Send {
    fn header(&self) -> SweepHeader;
    /// `Ok(None)` marks a clean end of data.
    fn next_frame(&mut self) -> Result<Option<CoilFrame>, StreamError>;
}

/// Plays back an in-memory sweep, optionally paced at its rate.
pub struct SweepPlayer {
    header: SweepHeader,
    frames: std::vec::IntoIter<CoilFrame>,
    pace: Option<(std::time::Instant, f64)>,
    emitted: u64,
}

impl SweepPlayer {
    pub fn new(header: SweepHeader, frames: Vec<CoilFrame>) -> Self {
        Self {
            header,
            frames: frames.into_iter(),
            pace: None,
            emitted: 0,
        }
    }

    /// Releases frames no faster than `rate` Hz.
    pub fn paced(mut self, rate: f64) -> Self {
        self.pace = Some((std::time::Instant::now(), rate));
        self
    }

    pub fn open(path: impl AsRef<std::path::Path>) -> Result<Self, StreamError> {
        let (header, frames) = read_sweep(path)?;
        Ok(Self::new(header, frames))
    }
}

impl FrameSource for SweepPlayer {
    fn header(&self) -> SweepHeader {
        self.header.clone()
    }

    fn next_frame(&mut self) -> Result<Option<CoilFrame>, StreamError> {
        let Some(frame) = self.frames.next() else {
            return Ok(None);
        };
        if let Some((start, rate)) = self.pace {
            let due = start + std::time::Duration::from_secs_f64(self.emitted as f64 / rate);
            if let Some(wait) = due.checked_duration_since(std::time::Instant::now()) {
                std::thread::sleep(wait);
            }
        }
        self.emitted += 1;
        Ok(Some(frame))
    }
}
