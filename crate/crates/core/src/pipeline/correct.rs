use std::collections::{BTreeMap, HashMap, VecDeque};

use nalgebra::{Matrix3, Vector3};

use super::{CoilRoles, PipelineError, SessionConfig};
use crate::geometry::{rigid_align, Vec3};
use crate::stream::CoilFrame;

/// Removes rigid head motion: aligns the frame's visible reference coils to
/// `reference_pose` and carries every coil along.
pub fn head_correct(
    frame: &CoilFrame,
    roles: &CoilRoles,
    reference_pose: &BTreeMap<String, Vec3>,
) -> Result<CoilFrame, PipelineError> {
    let (current, target): (Vec<Vec3>, Vec<Vec3>) = roles
        .reference
        .iter()
        .filter_map(|id| Some((frame.position(id)?, *reference_pose.get(id)?)))
        .unzip();
    if current.len() < 3 {
        return Err(PipelineError::InsufficientReference);
    }
    let t = rigid_align(&current, &target).map_err(|_| PipelineError::InsufficientReference)?;
    Ok(frame.transformed(&t))
}

/// Bite-plane normalization followed by the optional user affine.
pub fn normalize(frame: &CoilFrame, config: &SessionConfig) -> CoilFrame {
    let mut out = match &config.bite_transform {
        Some(t) => frame.transformed(t),
        None => frame.clone(),
    };
    if let Some(a) = &config.transform {
        let m = Matrix3::new(
            a[0][0], a[0][1], a[0][2], a[1][0], a[1][1], a[1][2], a[2][0], a[2][1], a[2][2],
        );
        let shift = Vector3::new(a[0][3], a[1][3], a[2][3]);
        for c in out.coils.iter_mut().filter(|c| c.ok) {
            c.set_position(m * c.position() + shift);
            // orientations are not meaningful under a general affine
            c.ori = None;
        }
    }
    out
}

/// Causal moving average over the last `window` valid samples of each coil.
/// Invalid samples pass through untouched and do not enter the average.
#[derive(Debug, Clone)]
pub struct Smoother {
    window: usize,
    history: HashMap<String, VecDeque<Vec3>>,
}

impl Smoother {
    pub fn new(window: usize) -> Result<Self, PipelineError> {
        if window == 0 || window.is_multiple_of(2) {
            return Err(PipelineError::InvalidSetting(format!(
                "smoothing window must be odd and >= 1, got {window}"
            )));
        }
        Ok(Self {
            window,
            history: HashMap::new(),
        })
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn set_window(&mut self, window: usize) -> Result<(), PipelineError> {
        *self = Self::new(window)?;
        Ok(())
    }

    pub fn push(&mut self, frame: &CoilFrame) -> CoilFrame {
        let mut out = frame.clone();
        for c in out.coils.iter_mut().filter(|c| c.ok) {
            let h = self.history.entry(c.id.clone()).or_default();
            if h.len() == self.window {
                h.pop_front();
            }
            h.push_back(c.position());
            let mean = h.iter().fold(Vec3::zeros(), |a, p| a + p) / h.len() as f64;
            c.set_position(mean);
        }
        out
    }
}

/// Smooths a whole sequence with a fresh [`Smoother`].
pub fn smooth(window: usize, frames: &[CoilFrame]) -> Result<Vec<CoilFrame>, PipelineError> {
    let mut s = Smoother::new(window)?;
    Ok(frames.iter().map(|f| s.push(f)).collect())
}
