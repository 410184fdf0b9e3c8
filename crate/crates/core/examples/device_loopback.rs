//! Serve a synthetic subject over EMA-RT/1 and stream from it.

use std::sync::Arc;

use articfeed::stream::{connect_device, serve_device, DeviceSource};
use articfeed::synthetic::SyntheticSubject;

fn main() {
    let mut subject = SyntheticSubject::new(4, 2, 3, 10);
    subject.frames = Some(200);
    let server = serve_device(DeviceSource::Synthetic(Arc::new(subject)), "127.0.0.1:0", 100.0).expect("bind");
    println!("device on {}", server.local_addr());

    let mut client = connect_device(server.local_addr()).expect("connect");
    let header = client.describe();
    println!("rate {} Hz, coils {:?}", header.rate, header.coil_ids);

    let single = client.single().expect("single frame");
    println!("SINGLE: seq {} t {:.3}", single.seq, single.t);

    client.start(Some(200.0)).expect("start");
    let mut count = 0;
    while let Some(frame) = client.next_frame().expect("frame") {
        if count % 50 == 0 {
            println!("seq {:4} t {:.3} tt {:?}", frame.seq, frame.t, frame.position("tt"));
        }
        count += 1;
    }
    println!("{count} frames streamed");
    server.shutdown();
}
