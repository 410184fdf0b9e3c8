//! Fit PCA palate weights to a traced set of points.

use articfeed::fitting::fit_palate;
use articfeed::geometry::Vec3;
use articfeed::models::generate_synthetic_palate;
use articfeed::pipeline::{PALATE_OUTER_ITERATIONS, PALATE_PRIOR_WEIGHT};
use nalgebra::DVector;

fn main() {
    let model = generate_synthetic_palate(3, 4, 16);
    let truth = DVector::from_vec(vec![0.8, -0.4, 0.2, 0.0]);
    let surface = model.reconstruct(&truth).expect("weights match model");

    // trace along the midline and two parasagittal lines
    let trace: Vec<Vec3> = surface
        .vertices()
        .iter()
        .enumerate()
        .filter(|(i, _)| matches!(i % 16, 4 | 8 | 12))
        .map(|(_, p)| *p)
        .collect();

    let fit = fit_palate(&model, &trace, PALATE_PRIOR_WEIGHT, PALATE_OUTER_ITERATIONS).expect("fit");
    println!("points: {}", trace.len());
    println!("true weights:   {:?}", truth.as_slice());
    println!("fitted weights: {:?}", fit.weights.as_slice());
    println!(
        "mean residual {:.2e} mm after {} iterations",
        fit.mean_residual,
        fit.residual_history.len()
    );
}
