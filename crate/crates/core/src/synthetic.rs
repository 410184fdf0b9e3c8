//! A synthetic EMA subject for the device simulator, tests and examples.
//!
//! The subject has three head-reference coils, an upper-incisor coil used as
//! origin, three bite-plate coils and three tongue coils glued to vertices
//! of a tongue model. Tongue coils follow the model at a fixed anatomy and a
//! smooth pose trajectory; during an optional window the tongue tip instead
//! slides over a palate model's surface. Everything is then carried by a
//! slowly moving head pose into world coordinates.

use std::f64::consts::TAU;
use std::sync::Arc;

use nalgebra::{DVector, UnitQuaternion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::{RigidTransform, Vec3};
use crate::models::{
    generate_synthetic_model, generate_synthetic_palate, save_model, Correspondence, ModelError, MultilinearModel,
    PcaModel, ShapeModel,
};
use crate::pipeline::{CoilRoles, SessionConfig};
use crate::stream::{CoilFrame, CoilSample, SweepHeader};

pub const REFERENCE_COILS: [&str; 3] = ["ref1", "ref2", "ref3"];
pub const ORIGIN_COIL: &str = "ui";
pub const BITE_COILS: [&str; 3] = ["bite_l", "bite_r", "bite_f"];
pub const TONGUE_COILS: [&str; 3] = ["tt", "tb", "td"];

#[derive(Debug, Clone)]
pub struct SyntheticSubject {
    pub tongue: Arc<MultilinearModel>,
    pub palate: Arc<PcaModel>,
    /// Anatomy weights the tongue coils are generated with.
    pub anatomy: DVector<f64>,
    pub palate_weights: DVector<f64>,
    pub correspondences: Vec<Correspondence>,
    pub rate: f64,
    /// Peak head rotation (rad) and translation (mm) of the head motion.
    pub head_motion: (f64, f64),
    /// Canonical-to-world placement of the head.
    pub placement: RigidTransform,
    /// Time window (s) in which the tongue tip traces the palate.
    pub palate_trace: Option<(f64, f64)>,
    /// Amplitude of the pose trajectory in σ units.
    pub pose_amplitude: f64,
    /// Fraction of tongue samples reported invalid.
    pub dropout: f64,
    /// Number of frames to emit; `None` streams forever.
    pub frames: Option<u64>,
    phases: Vec<(f64, f64)>,
    seed: u64,
}

impl SyntheticSubject {
    /// Tongue model `(n, m)` on a `grid × grid` mesh, palate with 4 modes.
    pub fn new(seed: u64, n: usize, m: usize, grid: usize) -> Self {
        let tongue = generate_synthetic_model(seed, n, m, grid);
        let palate = generate_synthetic_palate(seed, 4, grid.max(4));
        Self::with_models(seed, Arc::new(tongue), Arc::new(palate))
    }

    pub fn with_models(seed: u64, tongue: Arc<MultilinearModel>, palate: Arc<PcaModel>) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5eed));
        let g = (tongue.vertex_count() as f64).sqrt().round() as usize;
        // tip, blade and dorsum along the midline of the grid
        let mid = g / 2;
        let row = |frac: f64| ((g - 1) as f64 * frac).round() as usize;
        let correspondences = vec![
            Correspondence::new(TONGUE_COILS[0], row(0.15) * g + mid),
            Correspondence::new(TONGUE_COILS[1], row(0.45) * g + mid),
            Correspondence::new(TONGUE_COILS[2], row(0.75) * g + mid.saturating_sub(1)),
        ];
        let anatomy = DVector::from_fn(tongue.n, |i, _| tongue.neutral_x[i] + 0.2 * (rng.random::<f64>() - 0.5));
        let palate_weights = DVector::from_fn(palate.basis.ncols(), |_, _| rng.random_range(-1.0..1.0));
        let phases = (0..tongue.m)
            .map(|_| (rng.random_range(0.3..1.5), rng.random_range(0.0..TAU)))
            .collect();
        Self {
            tongue,
            palate,
            anatomy,
            palate_weights,
            correspondences,
            rate: 100.0,
            head_motion: (0.03, 2.0),
            placement: RigidTransform::new(
                UnitQuaternion::from_euler_angles(0.1, -0.2, 0.3),
                Vec3::new(10.0, -20.0, 100.0),
            ),
            palate_trace: None,
            pose_amplitude: 0.5,
            dropout: 0.0,
            frames: None,
            phases,
            seed,
        }
    }

    pub fn coil_ids() -> Vec<String> {
        REFERENCE_COILS
            .iter()
            .chain([ORIGIN_COIL].iter())
            .chain(BITE_COILS.iter())
            .chain(TONGUE_COILS.iter())
            .map(|s| s.to_string())
            .collect()
    }

    /// Coil roles matching this subject's coil layout.
    pub fn roles(&self) -> CoilRoles {
        CoilRoles {
            reference: REFERENCE_COILS.iter().map(|s| s.to_string()).collect(),
            tongue: self.correspondences.clone(),
            bite_left: BITE_COILS[0].into(),
            bite_right: BITE_COILS[1].into(),
            bite_front: BITE_COILS[2].into(),
            origin: ORIGIN_COIL.into(),
            jaw: None,
            upper_lip: None,
            lower_lip: None,
            palate_trace: Some(TONGUE_COILS[0].into()),
        }
    }

    /// Session config for this subject. With `calibrated`, the reference
    /// pose is the canonical one and the bite plane is already recorded
    /// (the identity), so tracking starts with the first frame.
    pub fn session_config(&self, calibrated: bool) -> SessionConfig {
        let mut cfg = SessionConfig::new(self.roles());
        if calibrated {
            let fixed = Self::canonical_fixed();
            cfg.reference_pose = Some(
                fixed
                    .iter()
                    .filter(|(id, _)| REFERENCE_COILS.contains(id))
                    .map(|(id, p)| (id.to_string(), [p.x, p.y, p.z]))
                    .collect(),
            );
            cfg.bite_transform = Some(RigidTransform::identity());
        }
        cfg
    }

    /// Writes `tongue.json` and `palate.json` into `dir`.
    pub fn write_models(&self, dir: impl AsRef<std::path::Path>) -> Result<(), ModelError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        save_model(
            dir.join("tongue.json"),
            &ShapeModel::Multilinear((*self.tongue).clone()),
        )?;
        save_model(dir.join("palate.json"), &ShapeModel::Pca((*self.palate).clone()))?;
        Ok(())
    }

    pub fn header(&self) -> SweepHeader {
        SweepHeader::new(self.rate, Self::coil_ids())
    }

    /// Fixed coils in the canonical frame.
    pub fn canonical_fixed() -> Vec<(&'static str, Vec3)> {
        vec![
            (REFERENCE_COILS[0], Vec3::new(0.0, 25.0, 45.0)),
            (REFERENCE_COILS[1], Vec3::new(55.0, -70.0, 30.0)),
            (REFERENCE_COILS[2], Vec3::new(-55.0, -70.0, 30.0)),
            (ORIGIN_COIL, Vec3::zeros()),
            (BITE_COILS[0], Vec3::new(22.0, -32.0, -1.5)),
            (BITE_COILS[1], Vec3::new(-22.0, -32.0, -1.5)),
            (BITE_COILS[2], Vec3::new(0.0, -3.0, -1.5)),
        ]
    }

    pub fn pose_weights(&self, t: f64) -> DVector<f64> {
        DVector::from_fn(self.tongue.m, |j, _| {
            let (freq, phase) = self.phases[j];
            self.tongue.neutral_y[j] + self.pose_amplitude * (TAU * freq * t + phase).sin()
        })
    }

    /// Head pose at time `t`, canonical to world.
    pub fn head_pose(&self, t: f64) -> RigidTransform {
        let (rot, shift) = self.head_motion;
        let wobble = RigidTransform::new(
            UnitQuaternion::from_euler_angles(
                rot * (TAU * 0.21 * t).sin(),
                rot * (TAU * 0.13 * t + 1.0).sin(),
                rot * (TAU * 0.17 * t + 2.0).sin(),
            ),
            Vec3::new(
                shift * (TAU * 0.11 * t).sin(),
                shift * (TAU * 0.07 * t + 0.5).sin(),
                shift * (TAU * 0.05 * t + 1.5).sin(),
            ),
        );
        self.placement.compose(&wobble)
    }

    /// Point on the palate surface for parameters `(u, v)` in [0, 1]².
    pub fn palate_point(&self, u: f64, v: f64) -> Vec3 {
        let mesh = self
            .palate
            .reconstruct(&self.palate_weights)
            .expect("palate weights match");
        let g = (self.palate.vertex_count() as f64).sqrt().round() as usize;
        let span = (g - 1) as f64;
        let (cu, cv) = ((u.clamp(0.0, 1.0) * span), (v.clamp(0.0, 1.0) * span));
        let c = (cu.floor() as usize).min(g - 2);
        let r = (cv.floor() as usize).min(g - 2);
        let (fu, fv) = (cu - c as f64, cv - r as f64);
        let vert = |rr: usize, cc: usize| mesh.vertices()[rr * g + cc];
        let (a, b, d, e) = (vert(r, c), vert(r, c + 1), vert(r + 1, c), vert(r + 1, c + 1));
        if fu >= fv {
            a * (1.0 - fu) + b * (fu - fv) + e * fv
        } else {
            a * (1.0 - fv) + e * fu + d * (fv - fu)
        }
    }

    /// Tongue-tip trace path over the palate, `s` in [0, 1].
    pub fn trace_point(&self, s: f64) -> Vec3 {
        self.palate_point(0.5 + 0.35 * (TAU * 3.0 * s).sin(), 0.05 + 0.9 * s)
    }

    /// All coils in the canonical frame at frame index `k`.
    pub fn canonical_frame(&self, k: u64) -> CoilFrame {
        let t = k as f64 / self.rate;
        let mut coils: Vec<CoilSample> = Self::canonical_fixed()
            .into_iter()
            .map(|(id, p)| CoilSample::new(id, p))
            .collect();
        let y = self.pose_weights(t);
        let flat = self
            .tongue
            .reconstruct_flat(self.anatomy.as_slice(), y.as_slice())
            .expect("weights match");
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ k.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        for c in &self.correspondences {
            let v = c.vertex_index;
            let mut p = Vec3::new(flat[3 * v], flat[3 * v + 1], flat[3 * v + 2]);
            if c.coil_id == TONGUE_COILS[0] {
                if let Some((t0, t1)) = self.palate_trace {
                    if t >= t0 && t < t1 {
                        p = self.trace_point((t - t0) / (t1 - t0));
                    }
                }
            }
            if self.dropout > 0.0 && rng.random::<f64>() < self.dropout {
                coils.push(CoilSample::missing(c.coil_id.clone()));
            } else {
                coils.push(CoilSample::new(c.coil_id.clone(), p));
            }
        }
        CoilFrame { seq: k, t, coils }
    }

    /// Frame `k` in world coordinates, or `None` past the configured length.
    pub fn frame(&self, k: u64) -> Option<CoilFrame> {
        if self.frames.is_some_and(|n| k >= n) {
            return None;
        }
        let canonical = self.canonical_frame(k);
        Some(canonical.transformed(&self.head_pose(canonical.t)))
    }

    /// Materializes `count` frames as a sweep.
    pub fn sweep(&self, count: u64) -> (SweepHeader, Vec<CoilFrame>) {
        let frames = (0..count)
            .map(|k| {
                let c = self.canonical_frame(k);
                c.transformed(&self.head_pose(c.t))
            })
            .collect();
        (self.header(), frames)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_rigid() {
        let s = SyntheticSubject::new(3, 2, 3, 12);
        assert_eq!(s.frame(17), s.frame(17));
        let f = s.frame(40).unwrap();
        let back = f.transformed(&s.head_pose(f.t).inverse());
        for (id, p) in SyntheticSubject::canonical_fixed() {
            assert!((back.position(id).unwrap() - p).norm() < 1e-9);
        }
    }

    #[test]
    fn trace_points_lie_on_palate() {
        let mut s = SyntheticSubject::new(5, 2, 3, 12);
        s.palate_trace = Some((0.0, 1.0));
        let mesh = s.palate.reconstruct(&s.palate_weights).unwrap();
        for k in 0..100 {
            let p = s.canonical_frame(k).position("tt").unwrap();
            let hit = crate::geometry::closest_point_on_mesh(&p, &mesh).unwrap();
            assert!(hit.distance < 1e-9);
        }
    }

    #[test]
    fn finite_length() {
        let mut s = SyntheticSubject::new(1, 1, 1, 6);
        s.frames = Some(3);
        assert!(s.frame(2).is_some());
        assert!(s.frame(3).is_none());
    }
}
