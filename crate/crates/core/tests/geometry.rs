use articfeed::geometry::{
    apply_transform, bite_plane_frame, closest_point_on_mesh, closest_point_on_triangle, rigid_align, GeometryError,
    Mesh, RigidTransform, Vec3,
};
use nalgebra::{Quaternion, UnitQuaternion};
use proptest::prelude::*;

fn rotation(q: [f64; 4]) -> UnitQuaternion<f64> {
    UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3]))
}

fn quat() -> impl Strategy<Value = [f64; 4]> {
    prop::array::uniform4(-1.0..1.0f64)
        .prop_filter("non-zero quaternion", |q| q.iter().map(|v| v * v).sum::<f64>() > 0.05)
}

fn point() -> impl Strategy<Value = Vec3> {
    prop::array::uniform3(-100.0..100.0f64).prop_map(Vec3::from)
}

fn spread_enough(points: &[Vec3]) -> bool {
    // smallest triangle area among the first three, relative to size
    let a = points[1] - points[0];
    let b = points[2] - points[0];
    a.cross(&b).norm() > 1.0
}

// Closest point on segment [a, b].
fn on_segment(p: &Vec3, a: &Vec3, b: &Vec3) -> Vec3 {
    let d = b - a;
    let t = ((p - a).dot(&d) / d.norm_squared()).clamp(0.0, 1.0);
    a + d * t
}

// Independent closest point: plane projection if inside, else nearest edge.
fn closest_reference(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> Vec3 {
    let n = (b - a).cross(&(c - a)).normalize();
    let q = p - n * (p - a).dot(&n);
    let inside = [(a, b), (b, c), (c, a)]
        .iter()
        .all(|(u, v)| (*v - *u).cross(&(q - *u)).dot(&n) >= 0.0);
    if inside {
        return q;
    }
    [on_segment(p, a, b), on_segment(p, b, c), on_segment(p, c, a)]
        .into_iter()
        .min_by(|x, y| (p - x).norm().total_cmp(&(p - y).norm()))
        .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn triangle_closest_point_matches_reference(a in point(), b in point(), c in point(), p in point()) {
        prop_assume!((b - a).cross(&(c - a)).norm() > 1e-3);
        let (got, bary) = closest_point_on_triangle(&p, &a, &b, &c);
        let want = closest_reference(&p, &a, &b, &c);
        prop_assert!(((p - got).norm() - (p - want).norm()).abs() < 1e-9);
        let rebuilt = a * bary[0] + b * bary[1] + c * bary[2];
        prop_assert!((rebuilt - got).norm() < 1e-9);
        prop_assert!(bary.iter().all(|w| *w >= -1e-12));
        prop_assert!((bary.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn align_recovers_known_motion(
        q in quat(),
        shift in prop::array::uniform3(-500.0..500.0f64),
        points in prop::collection::vec(point(), 3..20),
    ) {
        prop_assume!(spread_enough(&points));
        let motion = RigidTransform::new(rotation(q), Vec3::from(shift));
        let moved: Vec<Vec3> = points.iter().map(|p| motion.apply(p)).collect();
        let found = rigid_align(&points, &moved).unwrap();
        let rms = (points
            .iter()
            .zip(&moved)
            .map(|(p, t)| (found.apply(p) - t).norm_squared())
            .sum::<f64>()
            / points.len() as f64)
            .sqrt();
        prop_assert!(rms < 1e-9, "rms {rms}");
        prop_assert!((found.rotation_matrix().determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn align_is_a_local_optimum_under_noise(
        q in quat(),
        points in prop::collection::vec(point(), 5..12),
        noise in prop::collection::vec(prop::array::uniform3(-1.0..1.0f64), 12),
        probe in prop::array::uniform3(-1.0..1.0f64),
    ) {
        prop_assume!(spread_enough(&points));
        let motion = RigidTransform::new(rotation(q), Vec3::new(3.0, -4.0, 5.0));
        let target: Vec<Vec3> = points
            .iter()
            .zip(&noise)
            .map(|(p, e)| motion.apply(p) + Vec3::from(*e))
            .collect();
        let found = rigid_align(&points, &target).unwrap();
        let cost = |t: &RigidTransform| points.iter().zip(&target).map(|(p, q)| (t.apply(p) - q).norm_squared()).sum::<f64>();
        let base = cost(&found);
        // small rotations and shifts about the optimum never do better
        let axis = Vec3::from(probe);
        let nudges = [
            RigidTransform::new(UnitQuaternion::from_scaled_axis(axis * 1e-3), Vec3::zeros()),
            RigidTransform::from_translation(axis * 1e-3),
        ];
        for n in nudges {
            prop_assert!(cost(&n.compose(&found)) >= base - 1e-9);
        }
    }

    #[test]
    fn bite_frame_inverts_head_pose(q in quat(), shift in prop::array::uniform3(-200.0..200.0f64)) {
        let left = Vec3::new(22.0, -32.0, -1.5);
        let right = Vec3::new(-22.0, -32.0, -1.5);
        let front = Vec3::new(0.0, -3.0, -1.5);
        let origin = Vec3::zeros();
        let pose = RigidTransform::new(rotation(q), Vec3::from(shift));
        let frame = bite_plane_frame(&pose.apply(&left), &pose.apply(&right), &pose.apply(&front), &pose.apply(&origin)).unwrap();
        let round = frame.compose(&pose);
        for p in [left, right, front, origin, Vec3::new(10.0, 20.0, 30.0)] {
            prop_assert!((round.apply(&p) - p).norm() < 1e-9);
        }
        let zs: Vec<f64> = [left, right, front].iter().map(|p| frame.apply(&pose.apply(p)).z).collect();
        prop_assert!((zs[0] - zs[1]).abs() < 1e-9 && (zs[1] - zs[2]).abs() < 1e-9);
        prop_assert!(frame.apply(&pose.apply(&origin)).norm() < 1e-9);
    }

    #[test]
    fn obj_round_trip(
        verts in prop::collection::vec(prop::array::uniform3(-1e3..1e3f64), 3..40),
        picks in prop::collection::vec(prop::array::uniform3(0usize..1000), 1..30),
    ) {
        let v = verts.len();
        let faces: Vec<[usize; 3]> = picks
            .iter()
            .map(|f| [f[0] % v, f[1] % v, f[2] % v])
            .filter(|f| f[0] != f[1] && f[1] != f[2] && f[0] != f[2])
            .collect();
        prop_assume!(!faces.is_empty());
        let mesh = Mesh::new(verts.iter().map(|p| Vec3::from(*p)).collect(), faces.clone()).unwrap();
        let back = Mesh::parse_obj(&mesh.to_obj_string()).unwrap();
        prop_assert_eq!(back.faces(), &faces[..]);
        for (a, b) in back.vertices().iter().zip(mesh.vertices()) {
            prop_assert!((a - b).norm() <= 1e-6 * b.norm().max(1.0));
        }
    }
}

#[test]
fn align_beats_random_perturbations() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    let random_point = |rng: &mut rand_chacha::ChaCha8Rng, r: f64| {
        Vec3::new(
            rng.random_range(-r..r),
            rng.random_range(-r..r),
            rng.random_range(-r..r),
        )
    };
    let source: Vec<Vec3> = (0..12).map(|_| random_point(&mut rng, 50.0)).collect();
    let motion = RigidTransform::new(
        UnitQuaternion::from_euler_angles(0.4, -1.1, 2.0),
        Vec3::new(5.0, 1.0, -8.0),
    );
    let target: Vec<Vec3> = source
        .iter()
        .map(|p| motion.apply(p) + random_point(&mut rng, 2.0))
        .collect();
    let found = rigid_align(&source, &target).unwrap();
    let cost = |t: &RigidTransform| {
        source
            .iter()
            .zip(&target)
            .map(|(p, q)| (t.apply(p) - q).norm_squared())
            .sum::<f64>()
    };
    let best = cost(&found);
    for k in 0..1000 {
        let scale = 10f64.powf(-4.0 + 4.0 * (k as f64 / 1000.0));
        let nudge = RigidTransform::new(
            UnitQuaternion::from_scaled_axis(random_point(&mut rng, scale)),
            random_point(&mut rng, 10.0 * scale),
        );
        assert!(cost(&nudge.compose(&found)) >= best - 1e-9, "perturbation {k}");
    }
}

#[test]
fn mesh_closest_point_matches_brute_force() {
    let g = 6;
    let mut verts = Vec::new();
    for r in 0..g {
        for c in 0..g {
            let (x, y) = (c as f64 * 2.0, r as f64 * 2.0);
            verts.push(Vec3::new(x, y, 0.3 * (x * 0.7).sin() + 0.2 * (y * 0.5).cos()));
        }
    }
    let mesh = Mesh::new(verts, articfeed::models::grid_faces(g)).unwrap();
    for k in 0..300 {
        let t = k as f64;
        let q = Vec3::new(
            (t * 0.37).sin() * 8.0 + 5.0,
            (t * 0.23).cos() * 8.0 + 5.0,
            (t * 0.11).sin() * 3.0,
        );
        let hit = closest_point_on_mesh(&q, &mesh).unwrap();
        let best = (0..mesh.faces().len())
            .map(|f| {
                let [a, b, c] = mesh.triangle(f);
                (q - closest_reference(&q, &a, &b, &c)).norm()
            })
            .fold(f64::INFINITY, f64::min);
        assert!(
            (hit.distance - best).abs() < 1e-9,
            "query {k}: {} vs {best}",
            hit.distance
        );
        let [a, b, c] = mesh.triangle(hit.face_index);
        let w = hit.barycentric;
        assert!((a * w[0] + b * w[1] + c * w[2] - hit.point).norm() < 1e-9);
    }
}

#[test]
fn degenerate_inputs_are_rejected() {
    let line: Vec<Vec3> = (0..5).map(|k| Vec3::new(k as f64, 2.0 * k as f64, 0.0)).collect();
    assert!(matches!(rigid_align(&line, &line), Err(GeometryError::CollinearPoints)));
    let p = Vec3::new(1.0, 0.0, 0.0);
    assert!(matches!(
        bite_plane_frame(&p, &(p * 2.0), &(p * 3.0), &Vec3::zeros()),
        Err(GeometryError::CollinearPoints)
    ));
    assert!(matches!(
        rigid_align(&line[..2], &line[..2]),
        Err(GeometryError::TooFewPoints { needed: 3, got: 2 })
    ));
}

#[test]
fn apply_transform_matches_method() {
    let t = RigidTransform::new(
        UnitQuaternion::from_euler_angles(0.3, -0.1, 1.2),
        Vec3::new(1.0, 2.0, 3.0),
    );
    let p = Vec3::new(-4.0, 5.0, 0.5);
    assert_eq!(apply_transform(&t, &p), t.apply(&p));
    let json = serde_json::to_string(&t).unwrap();
    let back: RigidTransform = serde_json::from_str(&json).unwrap();
    assert!((back.apply(&p) - t.apply(&p)).norm() < 1e-12);
}

#[test]
fn obj_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.obj");
    let mesh = articfeed::models::generate_synthetic_model(3, 1, 1, 7).mean_mesh();
    mesh.write_obj(&path).unwrap();
    let back = Mesh::read_obj(&path).unwrap();
    assert_eq!(back.faces(), mesh.faces());
    for (a, b) in back.vertices().iter().zip(mesh.vertices()) {
        assert!((a - b).norm() < 1e-6);
    }
}
