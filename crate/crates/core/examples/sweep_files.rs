//! Write a synthetic sweep as JSONL and CSV and read both back.

use articfeed::stream::{read_sweep, write_sweep};
use articfeed::synthetic::SyntheticSubject;

fn main() {
    let dir = std::env::temp_dir().join("articfeed-sweeps");
    std::fs::create_dir_all(&dir).expect("temp dir");
    let mut subject = SyntheticSubject::new(2, 2, 3, 10);
    subject.dropout = 0.05;
    let (header, frames) = subject.sweep(500);

    for name in ["sweep.jsonl", "sweep.csv"] {
        let path = dir.join(name);
        write_sweep(&path, &header, &frames).expect("write");
        let (back_header, back) = read_sweep(&path).expect("read");
        let missing = back.iter().flat_map(|f| &f.coils).filter(|c| !c.ok).count();
        println!(
            "{}: {} frames at {} Hz, coils {:?}, {missing} missing samples",
            path.display(),
            back.len(),
            back_header.rate,
            back_header.coil_ids
        );
    }
}
