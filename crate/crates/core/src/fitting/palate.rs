use log::warn;
use nalgebra::{DMatrix, DVector};

use super::{minimize, FitError, SolverOptions};
use crate::geometry::{closest_point_on_mesh, Vec3};
use crate::models::PcaModel;

#[derive(Debug, Clone, PartialEq)]
pub struct PalateFit {
    pub weights: DVector<f64>,
    /// Mean point-to-surface distance (mm) at `weights`.
    pub mean_residual: f64,
    /// Mean residual at the start and after every accepted outer iteration.
    pub residual_history: Vec<f64>,
}

// s_k(x) = offset + jacobian · x for one trace point with frozen face/barycentrics.
struct Anchor {
    offset: Vec3,
    jacobian: DMatrix<f64>,
}

// (face index, barycentric coordinates) of a closest point
type Assignment = (usize, [f64; 3]);

fn mean_distance(model: &PcaModel, x: &DVector<f64>, trace: &[Vec3]) -> Result<(f64, Vec<Assignment>), FitError> {
    let mesh = model.reconstruct(x)?;
    let mut total = 0.0;
    let mut hits = Vec::with_capacity(trace.len());
    for q in trace {
        let hit = closest_point_on_mesh(q, &mesh)?;
        total += hit.distance;
        hits.push((hit.face_index, hit.barycentric));
    }
    Ok((total / trace.len() as f64, hits))
}

fn anchors(model: &PcaModel, hits: &[(usize, [f64; 3])]) -> Vec<Anchor> {
    let n = model.dim();
    hits.iter()
        .map(|&(face, bary)| {
            let mut offset = Vec3::zeros();
            let mut jacobian = DMatrix::zeros(3, n);
            for (&vi, &w) in model.faces[face].iter().zip(bary.iter()) {
                for a in 0..3 {
                    let row = 3 * vi + a;
                    offset[a] += w * model.mean[row];
                    for c in 0..n {
                        jacobian[(a, c)] += w * model.basis[(row, c)];
                    }
                }
            }
            Anchor { offset, jacobian }
        })
        .collect()
}

/// Fits palate weights to a traced point cloud.
///
/// Alternates closest-point assignment on the current reconstruction with
/// minimizing `Σ|q_k − s_k(x)|² + prior_weight·Σ(xᵢ/σᵢ)²` for the frozen
/// assignment. Stops after `outer_iterations`, when the assignment no
/// longer changes, or when the mean residual would increase.
pub fn fit_palate(
    model: &PcaModel,
    trace: &[Vec3],
    prior_weight: f64,
    outer_iterations: usize,
) -> Result<PalateFit, FitError> {
    let n = model.dim();
    if n == 0 {
        return Err(FitError::DegenerateModel);
    }
    if trace.is_empty() {
        return Err(FitError::EmptyTrace);
    }
    if trace.len() < 3 * n {
        warn!(
            "palate trace has {} points for {n} weights; the fit leans on the prior",
            trace.len()
        );
    }
    let inv_var: Vec<f64> = model.sigmas.iter().map(|s| 1.0 / (s * s)).collect();
    let opts = SolverOptions {
        max_iterations: 500,
        gradient_tolerance: 1e-10,
        memory: n.clamp(3, 20),
    };

    let mut x = DVector::zeros(n);
    let (mut residual, mut hits) = mean_distance(model, &x, trace)?;
    let mut history = vec![residual];

    for _ in 0..outer_iterations {
        let anchors = anchors(model, &hits);
        let result = minimize(
            |w, grad| {
                let mut value = 0.0;
                grad.fill(0.0);
                for (anchor, q) in anchors.iter().zip(trace) {
                    let r = anchor.offset + &anchor.jacobian * w - q;
                    value += r.norm_squared();
                    grad.gemv_tr(2.0, &anchor.jacobian, &DVector::from_column_slice(r.as_slice()), 1.0);
                }
                for i in 0..n {
                    value += prior_weight * w[i] * w[i] * inv_var[i];
                    grad[i] += 2.0 * prior_weight * w[i] * inv_var[i];
                }
                value
            },
            x.clone(),
            &opts,
        )?;
        let (next_residual, next_hits) = mean_distance(model, &result.x, trace)?;
        if next_residual > residual {
            break;
        }
        let stable = next_hits.iter().zip(&hits).all(|(a, b)| a.0 == b.0);
        let step = (&result.x - &x).norm();
        x = result.x;
        residual = next_residual;
        hits = next_hits;
        history.push(residual);
        if stable && step <= 1e-12 * (1.0 + x.norm()) {
            break;
        }
    }

    Ok(PalateFit {
        weights: x,
        mean_residual: residual,
        residual_history: history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::generate_synthetic_palate;

    #[test]
    fn mean_mesh_trace_stays_at_zero() {
        let model = generate_synthetic_palate(11, 5, 8);
        let trace = model.mean_mesh().vertices().to_vec();
        let fit = fit_palate(&model, &trace, 1e-4, 10).unwrap();
        assert!(fit.weights.norm() <= 1e-6, "{}", fit.weights);
        assert!(fit.mean_residual < 1e-9);
    }

    #[test]
    fn empty_trace() {
        let model = generate_synthetic_palate(11, 2, 4);
        assert!(matches!(fit_palate(&model, &[], 1.0, 10), Err(FitError::EmptyTrace)));
    }

    #[test]
    fn residual_history_non_increasing() {
        let model = generate_synthetic_palate(4, 4, 10);
        let x_true = DVector::from_vec(vec![0.8, -0.4, 0.3, 0.1]);
        let mesh = model.reconstruct(&x_true).unwrap();
        let trace: Vec<_> = mesh.vertices().iter().step_by(3).copied().collect();
        let fit = fit_palate(&model, &trace, 1e-6, 20).unwrap();
        for w in fit.residual_history.windows(2) {
            assert!(w[1] <= w[0]);
        }
        assert_eq!(*fit.residual_history.last().unwrap(), fit.mean_residual);
    }
}
