//! WebSocket broadcast to visualization clients.
//!
//! Server messages are JSON text frames tagged by `type`: `hello`, `mesh`,
//! `frame`, `state` and `error`. A newly connected client receives `hello`,
//! the current meshes and the current state before any frame. Client
//! messages (`set_roles`, `task`, `play`, `stop`, `set`) are forwarded to
//! the session through [`BroadcastServer::control`].

use std::collections::BTreeMap;
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use crossbeam_channel::{bounded, unbounded, Receiver, Sender, TrySendError};
use log::{debug, info, warn};
use serde::{Deserialize, Serialize};
use tungstenite::{Message, WebSocket};

use super::sinks::{FrameSink, QueuePolicy, SessionEvent, SinkError};
use super::{CoilRoles, Phase, ProcessedFrame, TaskKind};

pub const BROADCAST_VERSION: u32 = 1;
const CLIENT_QUEUE: usize = 256;
const POLL: Duration = Duration::from_millis(2);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireCoil {
    pub id: String,
    pub pos: [f64; 3],
    pub ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

/// Server → client messages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Hello {
        version: u32,
    },
    Mesh {
        name: String,
        /// Flat 3V buffer (mm).
        vertices: Vec<f64>,
        faces: Vec<[usize; 3]>,
    },
    Frame {
        t: f64,
        coils: Vec<WireCoil>,
        weights: Weights,
        vertices: Vec<f64>,
        /// RMS fit residual (mm); null when the frame was not fitted.
        residual: Option<f64>,
    },
    State {
        phase: Phase,
        roles: CoilRoles,
    },
    Error {
        code: u16,
        message: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskAction {
    Start,
    Stop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlaySource {
    Device,
    File,
}

/// Client → server messages. `set_roles` carries the role fields inline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMessage {
    SetRoles(CoilRoles),
    Task {
        name: TaskKind,
        action: TaskAction,
    },
    Play {
        source: PlaySource,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        path: Option<String>,
    },
    Stop,
    Set {
        key: String,
        value: serde_json::Value,
    },
}

// Borrowing twin of ServerMessage::Frame so the processing thread does not
// copy the vertex buffer to serialize it.
#[derive(Serialize)]
struct FrameRef<'a> {
    #[serde(rename = "type")]
    kind: &'static str,
    t: f64,
    coils: Vec<CoilRef<'a>>,
    weights: WeightsRef<'a>,
    vertices: &'a [f64],
    residual: Option<f64>,
}

#[derive(Serialize)]
struct CoilRef<'a> {
    id: &'a str,
    pos: [f64; 3],
    ok: bool,
}

#[derive(Serialize)]
struct WeightsRef<'a> {
    x: &'a [f64],
    y: &'a [f64],
}

/// The `frame` message for a processed frame.
pub fn frame_message(frame: &ProcessedFrame) -> String {
    let msg = FrameRef {
        kind: "frame",
        t: frame.t,
        coils: frame
            .coils
            .iter()
            .map(|c| CoilRef {
                id: &c.id,
                pos: c.pos,
                ok: c.ok,
            })
            .collect(),
        weights: WeightsRef {
            x: &frame.x,
            y: &frame.y,
        },
        vertices: &frame.vertices,
        residual: frame.residual.is_finite().then_some(frame.residual),
    };
    serde_json::to_string(&msg).expect("frame message serializes")
}

fn to_json(msg: &ServerMessage) -> Arc<str> {
    serde_json::to_string(msg).expect("server message serializes").into()
}

struct Client {
    id: u64,
    tx: Sender<Arc<str>>,
    // kept to discard the oldest message when the queue is full
    rx: Receiver<Arc<str>>,
}

#[derive(Default)]
struct Greeting {
    meshes: BTreeMap<String, Arc<str>>,
    state: Option<Arc<str>>,
}

struct Shared {
    clients: Mutex<Vec<Client>>,
    greeting: Mutex<Greeting>,
    dropped: AtomicU64,
    next_id: AtomicU64,
}

impl Shared {
    fn push(&self, client: &Client, msg: Arc<str>) -> bool {
        match client.tx.try_send(msg) {
            Ok(()) => true,
            Err(TrySendError::Full(msg)) => {
                let _ = client.rx.try_recv();
                self.dropped.fetch_add(1, Ordering::Relaxed);
                client.tx.try_send(msg).is_ok()
            }
            Err(TrySendError::Disconnected(_)) => false,
        }
    }

    fn broadcast(&self, msg: Arc<str>) {
        let mut clients = self.clients.lock().expect("clients lock");
        clients.retain(|c| self.push(c, msg.clone()));
    }
}

/// WebSocket server for visualization clients. Dropping it stops the
/// accept loop; connected clients are closed when the sink goes away.
pub struct BroadcastServer {
    addr: SocketAddr,
    shared: Arc<Shared>,
    shutdown: Arc<AtomicBool>,
    accept_thread: Option<JoinHandle<()>>,
    control_rx: Receiver<ClientMessage>,
}

impl BroadcastServer {
    pub fn bind(addr: impl ToSocketAddrs) -> Result<Self, std::io::Error> {
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let shared = Arc::new(Shared {
            clients: Mutex::new(Vec::new()),
            greeting: Mutex::new(Greeting::default()),
            dropped: AtomicU64::new(0),
            next_id: AtomicU64::new(0),
        });
        let shutdown = Arc::new(AtomicBool::new(false));
        let (control_tx, control_rx) = unbounded();
        let (sh, flag) = (shared.clone(), shutdown.clone());
        let accept_thread = thread::Builder::new().name("ws-accept".into()).spawn(move || {
            info!("broadcast listening on ws://{addr}");
            while !flag.load(Ordering::SeqCst) {
                match listener.accept() {
                    Ok((stream, peer)) => {
                        let (sh, flag, control) = (sh.clone(), flag.clone(), control_tx.clone());
                        let _ = thread::Builder::new().name(format!("ws-{peer}")).spawn(move || {
                            if let Err(e) = serve_client(stream, &sh, &flag, &control) {
                                debug!("ws client {peer}: {e}");
                            }
                        });
                    }
                    Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(5)),
                    Err(e) => {
                        warn!("ws accept failed: {e}");
                        thread::sleep(Duration::from_millis(50));
                    }
                }
            }
        })?;
        Ok(Self {
            addr,
            shared,
            shutdown,
            accept_thread: Some(accept_thread),
            control_rx,
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Control messages sent by clients.
    pub fn control(&self) -> Receiver<ClientMessage> {
        self.control_rx.clone()
    }

    pub fn client_count(&self) -> usize {
        self.shared.clients.lock().expect("clients lock").len()
    }

    /// Messages discarded because a client was too slow.
    pub fn dropped(&self) -> u64 {
        self.shared.dropped.load(Ordering::Relaxed)
    }

    pub fn sink(&self) -> BroadcastSink {
        BroadcastSink {
            shared: self.shared.clone(),
        }
    }
}

impl Drop for BroadcastServer {
    fn drop(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        if let Some(h) = self.accept_thread.take() {
            let _ = h.join();
        }
    }
}

fn serve_client(
    stream: TcpStream,
    shared: &Shared,
    shutdown: &AtomicBool,
    control: &Sender<ClientMessage>,
) -> Result<(), tungstenite::Error> {
    stream.set_nonblocking(false)?;
    stream.set_nodelay(true)?;
    let mut ws: WebSocket<TcpStream> = tungstenite::accept(stream).map_err(|e| match e {
        tungstenite::HandshakeError::Failure(e) => e,
        tungstenite::HandshakeError::Interrupted(_) => tungstenite::Error::ConnectionClosed,
    })?;
    ws.get_ref().set_read_timeout(Some(POLL))?;

    let (tx, rx) = bounded::<Arc<str>>(CLIENT_QUEUE);
    let id = shared.next_id.fetch_add(1, Ordering::Relaxed);
    {
        // hold the greeting lock while registering so no update slips between
        let greeting = shared.greeting.lock().expect("greeting lock");
        let _ = tx.try_send(to_json(&ServerMessage::Hello {
            version: BROADCAST_VERSION,
        }));
        for m in greeting.meshes.values() {
            let _ = tx.try_send(m.clone());
        }
        if let Some(s) = &greeting.state {
            let _ = tx.try_send(s.clone());
        }
        shared.clients.lock().expect("clients lock").push(Client {
            id,
            tx: tx.clone(),
            rx: rx.clone(),
        });
    }
    debug!("ws client {id} registered");

    let result = (|| loop {
        if shutdown.load(Ordering::SeqCst) {
            let _ = ws.close(None);
            let _ = ws.flush();
            return Ok(());
        }
        while let Ok(msg) = rx.try_recv() {
            ws.send(Message::text(&*msg))?;
        }
        match ws.read() {
            Ok(Message::Text(text)) => match serde_json::from_str::<ClientMessage>(text.as_str()) {
                Ok(msg) => {
                    let _ = control.send(msg);
                }
                Err(e) => {
                    let reply = ServerMessage::Error {
                        code: 400,
                        message: format!("bad client message: {e}"),
                    };
                    let _ = tx.try_send(to_json(&reply));
                }
            },
            Ok(Message::Close(_)) => return Ok(()),
            Ok(_) => {}
            Err(tungstenite::Error::Io(e))
                if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) => {}
            Err(e) => return Err(e),
        }
    })();
    shared.clients.lock().expect("clients lock").retain(|c| c.id != id);
    match result {
        Err(tungstenite::Error::ConnectionClosed) | Err(tungstenite::Error::AlreadyClosed) => Ok(()),
        other => other,
    }
}

/// Feeds session events to the connected clients.
pub struct BroadcastSink {
    shared: Arc<Shared>,
}

impl FrameSink for BroadcastSink {
    fn name(&self) -> &str {
        "broadcast"
    }

    fn policy(&self) -> QueuePolicy {
        QueuePolicy::DropOldest
    }

    fn handle(&mut self, event: &SessionEvent) -> Result<(), SinkError> {
        match event {
            SessionEvent::Frame { json, .. } => self.shared.broadcast(json.clone()),
            SessionEvent::Mesh { name, vertices, faces } => {
                let msg = to_json(&ServerMessage::Mesh {
                    name: name.clone(),
                    vertices: vertices.to_vec(),
                    faces: faces.to_vec(),
                });
                let mut greeting = self.shared.greeting.lock().expect("greeting lock");
                greeting.meshes.insert(name.clone(), msg.clone());
                self.shared.broadcast(msg);
            }
            SessionEvent::State { phase, roles } => {
                let msg = to_json(&ServerMessage::State {
                    phase: *phase,
                    roles: (**roles).clone(),
                });
                let mut greeting = self.shared.greeting.lock().expect("greeting lock");
                greeting.state = Some(msg.clone());
                self.shared.broadcast(msg);
            }
            SessionEvent::Error { code, message } => self.shared.broadcast(to_json(&ServerMessage::Error {
                code: *code,
                message: message.clone(),
            })),
            SessionEvent::Started { .. } => {}
        }
        Ok(())
    }
}
