//! Track tongue shape from three coils with the bilinear model.

use std::collections::HashMap;
use std::sync::Arc;

use articfeed::fitting::{Tracker, TrackerConfig};
use articfeed::geometry::Vec3;
use articfeed::models::{generate_synthetic_model, Correspondence};

fn main() {
    let grid = 20;
    let model = Arc::new(generate_synthetic_model(7, 3, 4, grid));
    let corr = vec![
        Correspondence::new("tt", 3 * grid + 10),
        Correspondence::new("tb", 10 * grid + 10),
        Correspondence::new("td", 15 * grid + 9),
    ];
    let config = TrackerConfig {
        freeze_after: 100,
        ..TrackerConfig::new(corr.clone())
    };
    let mut tracker = Tracker::new(model.clone(), config).expect("valid config");

    let anatomy = [1.2, 0.9, 1.05];
    for k in 0..300 {
        let t = k as f64 / 100.0;
        let pose = [(2.0 * t).sin(), 0.5 * (3.0 * t).cos(), 0.3 * t.sin(), 0.0];
        let flat = model.reconstruct_flat(&anatomy, &pose).expect("weights");
        let coils: HashMap<String, Vec3> = corr
            .iter()
            .map(|c| {
                let v = c.vertex_index;
                (
                    c.coil_id.clone(),
                    Vec3::new(flat[3 * v], flat[3 * v + 1], flat[3 * v + 2]),
                )
            })
            .collect();
        let out = tracker.track(&coils).expect("track");
        if k % 50 == 0 {
            let s = tracker.state();
            println!(
                "frame {k:3}: residual {:.2e} mm, {} iterations, frozen {}, y = {:.3?}",
                out.diagnostics.residual,
                out.diagnostics.iterations,
                s.frozen,
                s.y.as_slice()
            );
        }
    }
}
