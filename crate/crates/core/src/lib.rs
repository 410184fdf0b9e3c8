//! Real-time electromagnetic articulography (EMA) processing.
//!
//! Coil data arrives from recorded sweeps or a networked device, is
//! head-corrected and normalized into the subject's bite-plane frame,
//! and drives per-frame fits of a bilinear tongue model and a PCA palate
//! model. Fitted meshes are broadcast to visualization clients.

pub mod cli;
pub mod fitting;
pub mod geometry;
pub mod models;
pub mod pipeline;
pub mod stream;
pub mod synthetic;
