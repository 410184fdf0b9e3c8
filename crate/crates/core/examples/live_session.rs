//! A full live session: device, processing, WebSocket broadcast and recording.
//!
//! Run it and connect a visualization client to the printed address, or
//! watch the frame summary it prints.

use std::sync::Arc;

use articfeed::pipeline::{run_session, BroadcastServer, FrameSink, Models, RecorderSink, SessionOptions};
use articfeed::stream::{connect_device, serve_device, DeviceSource, DeviceStream};
use articfeed::synthetic::SyntheticSubject;

fn main() {
    let mut subject = SyntheticSubject::new(11, 2, 3, 20);
    subject.frames = Some(1000);
    let models = Models::new((*subject.tongue).clone(), Some((*subject.palate).clone()));
    let config = subject.session_config(true);

    let device = serve_device(DeviceSource::Synthetic(Arc::new(subject)), "127.0.0.1:0", 100.0).expect("device");
    let stream = DeviceStream::new(connect_device(device.local_addr()).expect("connect"), None);

    let broadcast = BroadcastServer::bind("127.0.0.1:0").expect("ws bind");
    println!("visualization clients: ws://{}", broadcast.local_addr());
    let record_dir = std::env::temp_dir().join("articfeed-live");
    let sinks: Vec<Box<dyn FrameSink>> = vec![
        Box::new(broadcast.sink()),
        Box::new(RecorderSink::new(&record_dir).expect("recorder")),
    ];
    let options = SessionOptions {
        control: Some(broadcast.control()),
        ..Default::default()
    };

    let report = run_session(Box::new(stream), config, &models, sinks, options).expect("session");
    print!("{}", report.metrics());
    println!("recordings in {}", record_dir.display());
}
