//! Recover a head pose from three reference coils with `rigid_align`.

use articfeed::geometry::{rigid_align, RigidTransform, Vec3};
use nalgebra::UnitQuaternion;

fn main() {
    let reference = [
        Vec3::new(0.0, 25.0, 45.0),
        Vec3::new(55.0, -70.0, 30.0),
        Vec3::new(-55.0, -70.0, 30.0),
    ];
    let head = RigidTransform::new(
        UnitQuaternion::from_euler_angles(0.1, -0.25, 0.6),
        Vec3::new(12.0, -4.0, 30.0),
    );
    let observed: Vec<Vec3> = reference.iter().map(|p| head.apply(p)).collect();

    // maps observed coils back onto the reference pose
    let correction = rigid_align(&observed, &reference).expect("non-collinear coils");
    let rms = (observed
        .iter()
        .zip(&reference)
        .map(|(p, q)| (correction.apply(p) - q).norm_squared())
        .sum::<f64>()
        / 3.0)
        .sqrt();
    println!("correction: {correction:?}");
    println!("residual RMS: {rms:.3e} mm");

    let tongue_tip = head.apply(&Vec3::new(0.0, -20.0, -5.0));
    println!("tongue tip in head frame: {:?}", correction.apply(&tongue_tip));
}
