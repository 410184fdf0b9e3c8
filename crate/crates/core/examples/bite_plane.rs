//! Build the bite-plane frame from a recording of a subject biting a plate.

use articfeed::geometry::{bite_plane_frame, Vec3};
use articfeed::pipeline::{normalize, record_bite_plane, record_reference};
use articfeed::synthetic::{SyntheticSubject, BITE_COILS};

fn main() {
    let subject = SyntheticSubject::new(1, 2, 3, 12);
    let frames: Vec<_> = (0..100).map(|k| subject.frame(k).expect("frame")).collect();

    let config = subject.session_config(false);
    let config = record_reference(&config, &frames[..50]).expect("reference");
    let config = record_bite_plane(&config, &frames[50..]).expect("bite plane");
    println!("bite transform: {:?}", config.bite_transform);

    let normalized = normalize(&frames[99], &config);
    for id in BITE_COILS.iter().chain(["ui"].iter()) {
        println!("{id:>7}: {:?}", normalized.position(id).map(|p| [p.x, p.y, p.z]));
    }

    // the same frame computed directly from four points
    let frame = bite_plane_frame(
        &Vec3::new(22.0, -32.0, -1.5),
        &Vec3::new(-22.0, -32.0, -1.5),
        &Vec3::new(0.0, -3.0, -1.5),
        &Vec3::zeros(),
    )
    .expect("bite frame");
    println!(
        "canonical bite coils map to identity: {:?}",
        frame.apply(&Vec3::new(1.0, 2.0, 3.0))
    );
}
