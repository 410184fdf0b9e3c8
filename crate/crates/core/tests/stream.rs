use std::io::{BufRead, BufReader, Write};
use std::net::TcpListener;
use std::sync::Arc;
use std::time::{Duration, Instant};

use articfeed::geometry::Vec3;
use articfeed::stream::protocol::{decode_frame, encode_frame, ServerMessage};
use articfeed::stream::{
    connect_device, read_sweep, serve_device, write_sweep, CoilFrame, CoilSample, DeviceSource, DeviceStream,
    FrameSource, StreamError, SweepHeader, SweepPlayer, SweepWriter,
};
use articfeed::synthetic::SyntheticSubject;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sample() -> impl Strategy<Value = CoilSample> {
    (
        "[a-z][a-z0-9_]{0,7}",
        prop::array::uniform3(-1e4..1e4f64),
        prop::option::of(prop::array::uniform4(-1.0..1.0f64)),
        any::<bool>(),
    )
        .prop_filter_map("degenerate quaternion", |(id, pos, ori, ok)| {
            let ori = match ori {
                Some(q) => {
                    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if n < 1e-3 {
                        return None;
                    }
                    Some(q.map(|v| v / n))
                }
                None => None,
            };
            Some(CoilSample { id, pos, ori, ok })
        })
}

fn frame() -> impl Strategy<Value = CoilFrame> {
    (
        any::<u64>(),
        -1e6..1e6f64,
        prop::collection::btree_map("[a-z][a-z0-9_]{0,7}", sample(), 0..12),
    )
        .prop_map(|(seq, t, coils)| CoilFrame {
            seq,
            t,
            coils: coils
                .into_iter()
                .map(|(id, mut s)| {
                    s.id = id;
                    s
                })
                .collect(),
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn frame_encoding_round_trips(f in frame()) {
        let bytes = encode_frame(&f);
        let len = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as usize;
        prop_assert_eq!(len + 4, bytes.len());
        prop_assert_eq!(decode_frame(&bytes).unwrap(), f);
    }
}

fn random_sweep(seed: u64, count: usize, with_ori: bool) -> (SweepHeader, Vec<CoilFrame>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<String> = ["ref1", "ref2", "ref3", "tt", "tb"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let frames = (0..count)
        .map(|k| CoilFrame {
            seq: k as u64,
            t: k as f64 / 250.0,
            coils: ids
                .iter()
                .map(|id| {
                    if rng.random::<f64>() < 0.1 {
                        return CoilSample::missing(id.clone());
                    }
                    let mut s = CoilSample::new(
                        id.clone(),
                        Vec3::new(
                            rng.random_range(-100.0..100.0),
                            rng.random_range(-100.0..100.0),
                            rng.random_range(-100.0..100.0),
                        ),
                    );
                    if with_ori {
                        let q = nalgebra::UnitQuaternion::from_euler_angles(
                            rng.random_range(-3.0..3.0),
                            rng.random_range(-1.5..1.5),
                            rng.random_range(-3.0..3.0),
                        );
                        s.ori = Some([q.w, q.i, q.j, q.k]);
                    }
                    s
                })
                .collect(),
        })
        .collect();
    (SweepHeader::new(250.0, ids), frames)
}

fn close_rel(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

fn assert_frames_match(got: &[CoilFrame], want: &[CoilFrame], with_ori: bool) {
    assert_eq!(got.len(), want.len());
    for (g, w) in got.iter().zip(want) {
        assert_eq!(g.seq, w.seq);
        assert!(close_rel(g.t, w.t, 1e-9));
        assert_eq!(g.coils.len(), w.coils.len());
        for (a, b) in g.coils.iter().zip(&w.coils) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.ok, b.ok);
            if b.ok {
                for k in 0..3 {
                    assert!(close_rel(a.pos[k], b.pos[k], 1e-9), "{} {:?} {:?}", a.id, a.pos, b.pos);
                }
                if with_ori {
                    let (qa, qb) = (a.ori.unwrap(), b.ori.unwrap());
                    assert!(qa.iter().zip(&qb).all(|(x, y)| (x - y).abs() <= 1e-9));
                }
            }
        }
    }
}

#[test]
fn jsonl_and_csv_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    for (name, with_ori) in [("s.jsonl", true), ("s.csv", false)] {
        let (header, frames) = random_sweep(3, 100, with_ori);
        let path = dir.path().join(name);
        write_sweep(&path, &header, &frames).unwrap();
        let (h, back) = read_sweep(&path).unwrap();
        assert_eq!(h.coil_ids, header.coil_ids);
        assert!(close_rel(h.rate, header.rate, 1e-9));
        assert_frames_match(&back, &frames, with_ori);
    }
}

#[test]
fn streaming_writer_matches_batch_writer() {
    let dir = tempfile::tempdir().unwrap();
    let (header, frames) = random_sweep(4, 20, true);
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    write_sweep(&a, &header, &frames).unwrap();
    let mut w = SweepWriter::create(&b, &header).unwrap();
    for f in &frames {
        w.write_frame(f).unwrap();
    }
    w.finish().unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn empty_sweep_is_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let header = SweepHeader::new(100.0, vec!["tt".into()]);
    for name in ["e.jsonl", "e.csv"] {
        let path = dir.path().join(name);
        write_sweep(&path, &header, &[]).unwrap();
        let (h, frames) = read_sweep(&path).unwrap();
        assert_eq!(h.coil_ids, header.coil_ids);
        assert!(frames.is_empty());
    }
    let bad = dir.path().join("missing-dir").join("x.jsonl");
    assert!(matches!(write_sweep(&bad, &header, &[]), Err(StreamError::Io(_))));
}

#[test]
fn minimal_files_parse() {
    let dir = tempfile::tempdir().unwrap();
    let jsonl = dir.path().join("m.jsonl");
    std::fs::write(
        &jsonl,
        "{\"type\":\"header\",\"rate\":100.0,\"coils\":[\"tt\",\"tb\"]}\n{\"t\":0.01,\"pos\":{\"tt\":[1,2,3]}}\n",
    )
    .unwrap();
    let (h, frames) = read_sweep(&jsonl).unwrap();
    assert_eq!(h.rate, 100.0);
    assert_eq!(frames.len(), 1);
    assert_eq!(frames[0].position("tt"), Some(Vec3::new(1.0, 2.0, 3.0)));
    assert!(!frames[0].get("tb").unwrap().ok);

    let csv = dir.path().join("m.csv");
    std::fs::write(&csv, "t,tt_x,tt_y,tt_z\n0.01,1,2,3\n").unwrap();
    let (_, frames) = read_sweep(&csv).unwrap();
    assert_eq!(frames.len(), 1);
    assert_eq!(frames[0].t, 0.01);
    assert_eq!(frames[0].position("tt"), Some(Vec3::new(1.0, 2.0, 3.0)));

    std::fs::write(&csv, "t,tt_x,tt_y,tt_z\n0.01,1,2,3\n0.02,1,abc,3\n").unwrap();
    match read_sweep(&csv) {
        Err(StreamError::Format { line, .. }) => assert_eq!(line, 3),
        other => panic!("expected a format error, got {other:?}"),
    }

    std::fs::write(&csv, "t,tt_x,tt_y,tt_z\n0.01,,,\n").unwrap();
    let (_, frames) = read_sweep(&csv).unwrap();
    assert!(!frames[0].get("tt").unwrap().ok);

    let other = dir.path().join("m.txt");
    std::fs::write(&other, "").unwrap();
    assert!(matches!(read_sweep(&other), Err(StreamError::Format { .. })));
    assert!(matches!(
        read_sweep(dir.path().join("absent.jsonl")),
        Err(StreamError::Io(_))
    ));
}

#[test]
fn loopback_reproduces_recorded_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let (header, frames) = random_sweep(9, 1000, true);
    let path = dir.path().join("loop.jsonl");
    write_sweep(&path, &header, &frames).unwrap();
    let (h, from_file) = read_sweep(&path).unwrap();

    let server = serve_device(DeviceSource::sweep(h.clone(), from_file.clone()), "127.0.0.1:0", 2000.0).unwrap();
    let client = connect_device(server.local_addr()).unwrap();
    assert_eq!(client.describe().coil_ids, h.coil_ids);
    let mut stream = DeviceStream::new(client, None);
    let mut got = Vec::new();
    while let Some(f) = stream.next_frame().unwrap() {
        got.push(f);
    }
    assert_frames_match(&got, &from_file, true);
    assert!(got.iter().enumerate().all(|(k, f)| f.seq == k as u64));
}

#[test]
fn start_50_paces_at_50_hz() {
    let subject = Arc::new(SyntheticSubject::new(1, 2, 3, 8));
    let server = serve_device(DeviceSource::Synthetic(subject), "127.0.0.1:0", 100.0).unwrap();
    let mut client = connect_device(server.local_addr()).unwrap();
    client.start(Some(50.0)).unwrap();
    let start = Instant::now();
    let mut seqs = Vec::new();
    while start.elapsed() < Duration::from_millis(1000) {
        seqs.push(client.next_frame().unwrap().unwrap().seq);
    }
    let rest = client.stop().unwrap();
    let count = seqs.len();
    assert!((49..=51).contains(&count), "{count} frames in 1 s");
    seqs.extend(rest.iter().map(|f| f.seq));
    assert!(seqs.iter().enumerate().all(|(k, s)| *s == k as u64));
}

#[test]
fn long_run_rate_within_two_percent() {
    let subject = Arc::new(SyntheticSubject::new(2, 2, 3, 8));
    let server = serve_device(DeviceSource::Synthetic(subject), "127.0.0.1:0", 200.0).unwrap();
    let mut client = connect_device(server.local_addr()).unwrap();
    client.start(None).unwrap();
    let start = Instant::now();
    let mut count = 0u64;
    while count < 600 {
        client.next_frame().unwrap().unwrap();
        count += 1;
    }
    // frame 0 leaves at t = 0, frame 599 at t = 599 / rate
    let rate = 599.0 / start.elapsed().as_secs_f64();
    assert!((rate - 200.0).abs() <= 4.0, "measured {rate} Hz");
    client.bye().unwrap();
}

#[test]
fn protocol_replies() {
    let (header, frames) = random_sweep(1, 3, false);
    let server = serve_device(DeviceSource::sweep(header, frames.clone()), "127.0.0.1:0", 100.0).unwrap();
    let mut client = connect_device(server.local_addr()).unwrap();
    assert_eq!(
        client.send_raw("FOO").unwrap(),
        ServerMessage::Err {
            code: 400,
            message: "unknown command".into()
        }
    );
    let one = client.single().unwrap();
    assert_eq!(one.seq, 0);
    assert_eq!(one.coils, frames[0].coils);
    assert!(matches!(
        client.send_raw("START -1").unwrap(),
        ServerMessage::Err { code: 422, .. }
    ));
    client.single().unwrap();
    client.single().unwrap();
    assert!(matches!(client.single(), Err(StreamError::Remote { code: 410, .. })));
    client.bye().unwrap();

    // raw socket: commands before HELLO are refused
    let stream = std::net::TcpStream::connect(server.local_addr()).unwrap();
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut writer = stream;
    writer.write_all(b"DESCRIBE\nHELLO EMA-RT/9\nHELLO EMA-RT/1\n").unwrap();
    let mut lines = Vec::new();
    for _ in 0..3 {
        let mut line = String::new();
        reader.read_line(&mut line).unwrap();
        lines.push(line.trim_end().to_string());
    }
    assert_eq!(
        lines,
        ["ERR 426 hello required", "ERR 505 unsupported version", "OK HELLO"]
    );
}

#[test]
fn single_is_followed_by_silence() {
    let subject = Arc::new(SyntheticSubject::new(1, 2, 3, 8));
    let server = serve_device(DeviceSource::Synthetic(subject), "127.0.0.1:0", 100.0).unwrap();
    let stream = std::net::TcpStream::connect(server.local_addr()).unwrap();
    stream.set_read_timeout(Some(Duration::from_millis(300))).unwrap();
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut writer = stream;
    writer.write_all(b"HELLO EMA-RT/1\nSINGLE\n").unwrap();
    let read = |r: &mut BufReader<_>| articfeed::stream::protocol::read_server_message(r);
    assert_eq!(read(&mut reader).unwrap(), Some(ServerMessage::Ok("HELLO".into())));
    assert_eq!(read(&mut reader).unwrap(), Some(ServerMessage::Ok("SINGLE".into())));
    assert!(matches!(read(&mut reader).unwrap(), Some(ServerMessage::Frame(f)) if f.seq == 0));
    // nothing else arrives
    assert!(reader.fill_buf().is_err());
}

#[test]
fn server_vanishing_mid_stream_is_connection_lost() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let fake = std::thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        let mut reader = BufReader::new(stream.try_clone().unwrap());
        let mut out = stream;
        let mut line = String::new();
        for reply in ["OK HELLO", "OK DESCRIBE", "OK START"] {
            line.clear();
            reader.read_line(&mut line).unwrap();
            writeln!(out, "{reply}").unwrap();
            if reply == "OK DESCRIBE" {
                let body = br#"{"type":"description","rate":100.0,"coils":["tt"]}"#;
                out.write_all(&(body.len() as u32).to_be_bytes()).unwrap();
                out.write_all(body).unwrap();
            }
        }
        let frame = CoilFrame {
            seq: 0,
            t: 0.0,
            coils: vec![CoilSample::new("tt", Vec3::new(1.0, 2.0, 3.0))],
        };
        out.write_all(&encode_frame(&frame)).unwrap();
        let second = encode_frame(&CoilFrame { seq: 1, ..frame });
        out.write_all(&second[..second.len() / 2]).unwrap();
    });
    let mut client = connect_device(addr).unwrap();
    client.start(None).unwrap();
    assert_eq!(client.next_frame().unwrap().unwrap().seq, 0);
    fake.join().unwrap();
    assert!(matches!(client.next_frame(), Err(StreamError::ConnectionLost)));
}

#[test]
fn sweep_player_paces_and_ends() {
    let (header, frames) = random_sweep(2, 20, false);
    let mut player = SweepPlayer::new(header, frames).paced(100.0);
    let start = Instant::now();
    let mut count = 0;
    while player.next_frame().unwrap().is_some() {
        count += 1;
    }
    assert_eq!(count, 20);
    assert!(start.elapsed() >= Duration::from_millis(185));
}
