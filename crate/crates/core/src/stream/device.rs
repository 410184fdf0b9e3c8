//! EMA-RT/1 device simulator.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, RecvTimeoutError};
use log::{debug, info, warn};

use super::protocol::{encode_payload, parse_command, write_reply, Command, Payload, PROTOCOL_VERSION};
use super::{CoilFrame, StreamError, SweepHeader};
use crate::synthetic::SyntheticSubject;

/// What the simulator plays.
#[derive(Debug, Clone)]
pub enum DeviceSource {
    /// A recorded sweep. Timestamps come from the file; seq is renumbered
    /// per connection.
    Sweep {
        header: SweepHeader,
        frames: Arc<Vec<CoilFrame>>,
    },
    Synthetic(Arc<SyntheticSubject>),
}

impl DeviceSource {
    pub fn sweep(header: SweepHeader, frames: Vec<CoilFrame>) -> Self {
        DeviceSource::Sweep {
            header,
            frames: Arc::new(frames),
        }
    }

    pub fn header(&self) -> SweepHeader {
        match self {
            DeviceSource::Sweep { header, .. } => header.clone(),
            DeviceSource::Synthetic(s) => s.header(),
        }
    }

    fn frame(&self, index: u64) -> Option<CoilFrame> {
        match self {
            DeviceSource::Sweep { frames, .. } => frames.get(index as usize).cloned(),
            DeviceSource::Synthetic(s) => s.frame(index),
        }
    }
}

/// Handle to a running simulator. Dropping it stops the server.
pub struct DeviceServer {
    addr: SocketAddr,
    shutdown: Arc<AtomicBool>,
    accept_thread: Option<JoinHandle<()>>,
}

impl DeviceServer {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn is_running(&self) -> bool {
        !self.shutdown.load(Ordering::SeqCst)
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        if let Some(h) = self.accept_thread.take() {
            let _ = h.join();
        }
    }
}

impl Drop for DeviceServer {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Starts the simulator on `bind`. `rate` is the advertised rate and the
/// pacing used by `START` without an argument.
pub fn serve_device(source: DeviceSource, bind: impl ToSocketAddrs, rate: f64) -> Result<DeviceServer, StreamError> {
    let mut header = source.header();
    header.rate = rate;
    header.validate().map_err(StreamError::Protocol)?;
    let listener = TcpListener::bind(bind)?;
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?;
    let shutdown = Arc::new(AtomicBool::new(false));
    let source = Arc::new(source);
    let header = Arc::new(header);
    let flag = shutdown.clone();
    let accept_thread = thread::Builder::new().name("ema-device-accept".into()).spawn(move || {
        info!("device simulator listening on {addr}");
        while !flag.load(Ordering::SeqCst) {
            match listener.accept() {
                Ok((stream, peer)) => {
                    debug!("device client {peer} connected");
                    let (source, header, flag) = (source.clone(), header.clone(), flag.clone());
                    let _ = thread::Builder::new()
                        .name(format!("ema-device-{peer}"))
                        .spawn(move || {
                            if let Err(e) = serve_connection(stream, &source, &header, &flag) {
                                debug!("device client {peer}: {e}");
                            }
                        });
                }
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                    thread::sleep(Duration::from_millis(5));
                }
                Err(e) => {
                    warn!("accept failed: {e}");
                    thread::sleep(Duration::from_millis(50));
                }
            }
        }
    })?;
    Ok(DeviceServer {
        addr,
        shutdown,
        accept_thread: Some(accept_thread),
    })
}

struct Streaming {
    rate: f64,
    start: Instant,
    sent: u64,
}

impl Streaming {
    fn deadline(&self) -> Instant {
        self.start + Duration::from_secs_f64(self.sent as f64 / self.rate)
    }
}

fn serve_connection(
    stream: TcpStream,
    source: &DeviceSource,
    header: &SweepHeader,
    shutdown: &AtomicBool,
) -> Result<(), StreamError> {
    stream.set_nonblocking(false)?;
    stream.set_nodelay(true)?;
    let read_half = stream.try_clone()?;
    let (tx, rx) = unbounded::<String>();
    thread::spawn(move || {
        let reader = BufReader::new(read_half);
        for line in reader.lines() {
            match line {
                Ok(l) => {
                    if tx.send(l).is_err() {
                        break;
                    }
                }
                Err(_) => break,
            }
        }
    });

    let mut out = BufWriter::new(stream);
    let mut greeted = false;
    let mut position: u64 = 0;
    let mut streaming: Option<Streaming> = None;

    let send_frame = |out: &mut BufWriter<TcpStream>, position: &mut u64| -> Result<bool, StreamError> {
        match source.frame(*position) {
            Some(mut frame) => {
                frame.seq = *position;
                out.write_all(&encode_payload(&Payload::frame(&frame)))?;
                *position += 1;
                Ok(true)
            }
            None => Ok(false),
        }
    };

    loop {
        if shutdown.load(Ordering::SeqCst) {
            break;
        }
        let timeout = match &streaming {
            Some(s) => s.deadline().saturating_duration_since(Instant::now()),
            None => Duration::from_millis(50),
        };
        match rx.recv_timeout(timeout) {
            Ok(line) => {
                let line = line.trim();
                if line.is_empty() {
                    continue;
                }
                let command = match parse_command(line) {
                    Ok(c) => c,
                    Err(e) if greeted => {
                        write_reply(&mut out, &e.reply())?;
                        out.flush()?;
                        continue;
                    }
                    Err(_) => Command::Describe, // rejected below as pre-HELLO
                };
                if !greeted && !matches!(command, Command::Hello(_)) {
                    write_reply(&mut out, "ERR 426 hello required")?;
                    out.flush()?;
                    continue;
                }
                match command {
                    Command::Hello(version) => {
                        if version == PROTOCOL_VERSION {
                            greeted = true;
                            write_reply(&mut out, "OK HELLO")?;
                        } else {
                            write_reply(&mut out, "ERR 505 unsupported version")?;
                        }
                    }
                    Command::Describe => {
                        write_reply(&mut out, "OK DESCRIBE")?;
                        out.write_all(&encode_payload(&Payload::description(header)))?;
                    }
                    Command::Single => {
                        if source.frame(position).is_some() {
                            write_reply(&mut out, "OK SINGLE")?;
                            send_frame(&mut out, &mut position)?;
                        } else {
                            write_reply(&mut out, "ERR 410 end of data")?;
                        }
                    }
                    Command::Start(rate) => {
                        write_reply(&mut out, "OK START")?;
                        streaming = Some(Streaming {
                            rate: rate.unwrap_or(header.rate),
                            start: Instant::now(),
                            sent: 0,
                        });
                    }
                    Command::Stop => {
                        streaming = None;
                        write_reply(&mut out, "OK STOP")?;
                    }
                    Command::Bye => {
                        write_reply(&mut out, "OK BYE")?;
                        out.flush()?;
                        break;
                    }
                }
                out.flush()?;
            }
            Err(RecvTimeoutError::Timeout) => {}
            Err(RecvTimeoutError::Disconnected) => break,
        }

        if let Some(s) = streaming.as_mut() {
            let mut wrote = false;
            while Instant::now() >= s.deadline() {
                if send_frame(&mut out, &mut position)? {
                    s.sent += 1;
                    wrote = true;
                } else {
                    write_reply(&mut out, "OK END")?;
                    streaming = None;
                    wrote = true;
                    break;
                }
            }
            if wrote {
                out.flush()?;
            }
        }
    }
    let _ = out.get_ref().shutdown(std::net::Shutdown::Both);
    Ok(())
}
