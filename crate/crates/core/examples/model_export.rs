//! Save and load model files and export reconstructed meshes as OBJ.

use articfeed::geometry::Mesh;
use articfeed::models::{generate_synthetic_model, generate_synthetic_palate, load_model, save_model, ShapeModel};
use nalgebra::DVector;

fn main() {
    let dir = std::env::temp_dir().join("articfeed-models");
    std::fs::create_dir_all(&dir).expect("temp dir");

    let tongue = generate_synthetic_model(5, 2, 3, 20);
    let palate = generate_synthetic_palate(5, 4, 20);
    save_model(dir.join("tongue.json"), &ShapeModel::from(tongue)).expect("save tongue");
    save_model(dir.join("palate.json"), &ShapeModel::from(palate)).expect("save palate");

    let tongue = load_model(dir.join("tongue.json"))
        .and_then(|m| m.into_multilinear())
        .expect("load tongue");
    let palate = load_model(dir.join("palate.json"))
        .and_then(|m| m.into_pca())
        .expect("load palate");
    println!("tongue: V={} n={} m={}", tongue.vertex_count(), tongue.n, tongue.m);
    println!("palate: V={} k={}", palate.vertex_count(), palate.basis.ncols());

    let curled = tongue.reconstruct(&[1.0, 1.0], &[0.0, 1.5, -0.5]).expect("weights");
    curled.write_obj(dir.join("tongue_curled.obj")).expect("write");
    let roof = palate
        .reconstruct(&DVector::from_vec(vec![1.0, 0.0, 0.0, 0.0]))
        .expect("weights");
    roof.write_obj(dir.join("palate.obj")).expect("write");

    let back = Mesh::read_obj(dir.join("tongue_curled.obj")).expect("read");
    println!(
        "wrote {} vertices / {} faces to {}",
        back.vertices().len(),
        back.faces().len(),
        dir.display()
    );
}
