use std::collections::{HashMap, VecDeque};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, never, select, Receiver, Sender, TrySendError};
use log::{debug, info, warn};
use serde::{Deserialize, Serialize};

use super::broadcast::{frame_message, ClientMessage, PlaySource, TaskAction};
use super::correct::{head_correct, normalize, Smoother};
use super::session::{Phase, Session, TaskKind, TaskOutcome};
use super::sinks::{FrameSink, QueuePolicy, SessionEvent};
use super::{PipelineError, ProcessedFrame, SessionConfig};
use crate::fitting::{Tracker, TrackerConfig};
use crate::geometry::{RigidTransform, Vec3};
use crate::models::{load_model, MultilinearModel, PcaModel};
use crate::stream::{CoilFrame, FrameSource, SweepHeader};

/// The shape models a session fits.
#[derive(Debug, Clone)]
pub struct Models {
    pub tongue: Arc<MultilinearModel>,
    pub palate: Option<Arc<PcaModel>>,
}

impl Models {
    pub fn new(tongue: MultilinearModel, palate: Option<PcaModel>) -> Self {
        Self {
            tongue: Arc::new(tongue),
            palate: palate.map(Arc::new),
        }
    }

    /// Loads `tongue.json` and, if present, `palate.json` from `dir`.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let dir = dir.as_ref();
        let tongue = load_model(dir.join("tongue.json"))?.into_multilinear()?;
        let palate_path = dir.join("palate.json");
        let palate = if palate_path.exists() {
            Some(load_model(palate_path)?.into_pca()?)
        } else {
            None
        };
        Ok(Self::new(tongue, palate))
    }
}

/// A frame that went through the pipeline, with its compute time.
#[derive(Debug, Clone)]
pub struct Output {
    pub raw: Arc<CoilFrame>,
    pub frame: ProcessedFrame,
    /// Time spent on this frame, excluding the delay wait.
    pub work: Duration,
}

struct Pending {
    due: Instant,
    raw: Arc<CoilFrame>,
    frame: CoilFrame,
    head_corrected: bool,
    fit: bool,
    work: Duration,
}

#[derive(Debug, Default, Clone)]
struct Counters {
    frames: u64,
    dropouts: u64,
    seq_gaps: u64,
    out_of_order: u64,
    missing_samples: u64,
    held: u64,
    residual_sum: f64,
    residual_max: f64,
    fitted: u64,
}

/// Single-threaded core of a session: head correction, normalization,
/// smoothing, delay and tongue fitting, plus the session workflow. It owns
/// the tracker state; [`run_session`] drives it from one thread.
pub struct Processor {
    session: Session,
    tongue: Arc<MultilinearModel>,
    tracker: Option<Tracker>,
    tracker_key: Option<(TrackerConfig, RigidTransform)>,
    idle_vertices: Vec<f64>,
    smoother: Smoother,
    pending: VecDeque<Pending>,
    events: Vec<SessionEvent>,
    last_t: Option<f64>,
    last_seq: Option<u64>,
    t_offset: f64,
    period: f64,
    new_source: bool,
    next_seq: u64,
    counters: Counters,
}

impl Processor {
    pub fn new(config: SessionConfig, models: &Models) -> Result<Self, PipelineError> {
        let session = Session::new(config, models.palate.clone())?;
        let tongue = models.tongue.clone();
        let idle_vertices = tongue.reconstruct_flat(tongue.neutral_x.as_slice(), tongue.neutral_y.as_slice())?;
        let smoother = Smoother::new(session.config().smoothing_window)?;
        let mut p = Self {
            session,
            tongue,
            tracker: None,
            tracker_key: None,
            idle_vertices,
            smoother,
            pending: VecDeque::new(),
            events: Vec::new(),
            last_t: None,
            last_seq: None,
            t_offset: 0.0,
            period: 0.01,
            new_source: true,
            next_seq: 0,
            counters: Counters::default(),
        };
        p.refresh()?;
        p.auto_reference()?;
        Ok(p)
    }

    pub fn session(&self) -> &Session {
        &self.session
    }

    pub fn config(&self) -> &SessionConfig {
        self.session.config()
    }

    pub fn phase(&self) -> Phase {
        self.session.phase()
    }

    pub fn tracker(&self) -> Option<&Tracker> {
        self.tracker.as_ref()
    }

    /// Events (state changes, meshes, errors) produced since the last call.
    pub fn take_events(&mut self) -> Vec<SessionEvent> {
        std::mem::take(&mut self.events)
    }

    /// Events describing the current state, for new sinks.
    pub fn snapshot_events(&self) -> Vec<SessionEvent> {
        let mut out = vec![SessionEvent::Mesh {
            name: "tongue".into(),
            vertices: Arc::new(self.tongue.mean.iter().copied().collect()),
            faces: Arc::new(self.tongue.faces.clone()),
        }];
        out.extend(self.palate_mesh());
        out.push(self.state_event());
        out
    }

    fn state_event(&self) -> SessionEvent {
        SessionEvent::State {
            phase: self.phase(),
            roles: Box::new(self.config().roles.clone()),
        }
    }

    fn palate_mesh(&self) -> Option<SessionEvent> {
        let palate = self.session.palate_model()?;
        let mesh = match &self.config().palate_weights {
            Some(w) => palate.reconstruct(&nalgebra::DVector::from_column_slice(w)).ok()?,
            None => palate.mean_mesh(),
        };
        Some(SessionEvent::Mesh {
            name: "palate".into(),
            vertices: Arc::new(mesh.flat_vertices()),
            faces: Arc::new(mesh.faces().to_vec()),
        })
    }

    fn error(&mut self, e: &PipelineError) {
        warn!("{e}");
        self.events.push(SessionEvent::Error {
            code: e.code(),
            message: e.to_string(),
        });
    }

    // Rebuilds the tracker when the canonical frame or tracking settings change.
    fn refresh(&mut self) -> Result<(), PipelineError> {
        let cfg = self.session.config();
        let key = match (self.session.phase().tracks(), cfg.bite_transform) {
            (true, Some(bite)) => Some((cfg.tracker_config(), bite)),
            _ => None,
        };
        if key != self.tracker_key {
            self.tracker = match &key {
                Some((tc, _)) => Some(Tracker::new(self.tongue.clone(), tc.clone())?),
                None => None,
            };
            self.tracker_key = key;
            self.smoother = Smoother::new(cfg.smoothing_window)?;
        }
        Ok(())
    }

    fn auto_reference(&mut self) -> Result<(), PipelineError> {
        if self.phase() == Phase::Setup && self.session.active_task().is_none() {
            let seconds = self.config().reference_seconds;
            self.session.start_timed_task(TaskKind::Reference, seconds)?;
            debug!("capturing reference pose over {seconds} s");
        }
        Ok(())
    }

    fn finish_task(&mut self) {
        match self.session.stop_task() {
            Ok(outcome) => {
                info!("task finished: {outcome:?}");
                if let Err(e) = self.refresh() {
                    self.error(&e);
                }
                if matches!(outcome, TaskOutcome::Palate { .. }) {
                    self.events.extend(self.palate_mesh());
                }
                self.events.push(self.state_event());
            }
            Err(e) => self.error(&e),
        }
    }

    /// Marks the start of a new source. Timestamps of the new source are
    /// shifted if needed so that t stays monotone over the session.
    pub fn begin_source(&mut self, header: &SweepHeader) {
        self.new_source = true;
        self.last_seq = None;
        if header.rate > 0.0 {
            self.period = 1.0 / header.rate;
        }
    }

    /// Runs one device frame through correction, normalization and
    /// smoothing and queues it for fitting after the configured delay.
    pub fn ingest(&mut self, mut raw: CoilFrame, now: Instant) {
        let start = Instant::now();
        if self.new_source {
            self.new_source = false;
            self.t_offset = match self.last_t {
                Some(last) if raw.t <= last => last + self.period - raw.t,
                _ => 0.0,
            };
        }
        raw.t += self.t_offset;
        if let Some(expected) = self.last_seq.map(|s| s + 1) {
            if raw.seq > expected {
                self.counters.seq_gaps += raw.seq - expected;
                self.counters.dropouts += raw.seq - expected;
            }
        }
        if self.last_t.is_some_and(|last| raw.t <= last) {
            self.counters.out_of_order += 1;
            self.counters.dropouts += 1;
            return;
        }
        self.last_t = Some(raw.t);
        self.last_seq = Some(raw.seq);
        self.counters.missing_samples += raw.coils.iter().filter(|c| !c.ok).count() as u64;

        let cfg = self.session.config();
        let corrected = match cfg.reference_points() {
            Some(pose) => match head_correct(&raw, &cfg.roles, &pose) {
                Ok(f) => Some(f),
                Err(_) => {
                    self.counters.dropouts += 1;
                    None
                }
            },
            None => None,
        };
        let normalized = match (&corrected, cfg.bite_transform.is_some()) {
            (Some(f), true) => Some(normalize(f, cfg)),
            _ => None,
        };
        if self.session.observe(&raw, corrected.as_ref(), normalized.as_ref()) {
            self.finish_task();
        }
        let fit = normalized.is_some() && self.tracker.is_some();
        let head_corrected = corrected.is_some();
        let frame = match normalized.or(corrected) {
            Some(f) => self.smoother.push(&f),
            None => raw.clone(),
        };
        let delay = Duration::from_secs_f64(self.session.config().delay);
        self.pending.push_back(Pending {
            due: now + delay,
            raw: Arc::new(raw),
            frame,
            head_corrected,
            fit,
            work: start.elapsed(),
        });
    }

    /// When the next delayed frame becomes due.
    pub fn next_due(&self) -> Option<Instant> {
        self.pending.front().map(|p| p.due)
    }

    pub fn pending(&self) -> usize {
        self.pending.len()
    }

    /// Fits and returns every queued frame that is due at `now`.
    pub fn release(&mut self, now: Instant) -> Vec<Output> {
        let mut out = Vec::new();
        while self.pending.front().is_some_and(|p| p.due <= now) {
            let p = self.pending.pop_front().expect("front checked");
            out.push(self.fit(p));
        }
        out
    }

    /// Releases everything regardless of delay.
    pub fn flush(&mut self) -> Vec<Output> {
        let mut out = Vec::new();
        while let Some(p) = self.pending.pop_front() {
            out.push(self.fit(p));
        }
        out
    }

    /// Ingest and release without delay; frames held by a configured delay
    /// stay queued.
    pub fn process(&mut self, raw: CoilFrame) -> Vec<Output> {
        let now = Instant::now();
        self.ingest(raw, now);
        self.release(now)
    }

    fn fit(&mut self, p: Pending) -> Output {
        let start = Instant::now();
        let mut held = true;
        let mut residual = f64::NAN;
        let mut iterations = 0;
        let (x, y, vertices) = match self.tracker.as_mut() {
            Some(tracker) if p.fit => {
                let coils: HashMap<String, Vec3> = tracker
                    .config()
                    .correspondences
                    .iter()
                    .filter_map(|c| p.frame.position(&c.coil_id).map(|pos| (c.coil_id.clone(), pos)))
                    .collect();
                match tracker.track(&coils) {
                    Ok(out) => {
                        held = out.diagnostics.held;
                        if !held {
                            residual = out.diagnostics.residual;
                            iterations = out.diagnostics.iterations;
                        }
                        let s = tracker.state();
                        (s.x.as_slice().to_vec(), s.y.as_slice().to_vec(), out.vertices)
                    }
                    Err(e) => {
                        let s = tracker.state();
                        let state = (s.x.clone(), s.y.clone());
                        let vertices = self
                            .tongue
                            .reconstruct_flat(state.0.as_slice(), state.1.as_slice())
                            .unwrap_or_else(|_| self.idle_vertices.clone());
                        self.error(&e.into());
                        (state.0.as_slice().to_vec(), state.1.as_slice().to_vec(), vertices)
                    }
                }
            }
            Some(tracker) => {
                let s = tracker.state();
                let vertices = self
                    .tongue
                    .reconstruct_flat(s.x.as_slice(), s.y.as_slice())
                    .unwrap_or_else(|_| self.idle_vertices.clone());
                (s.x.as_slice().to_vec(), s.y.as_slice().to_vec(), vertices)
            }
            None => (
                self.tongue.neutral_x.as_slice().to_vec(),
                self.tongue.neutral_y.as_slice().to_vec(),
                self.idle_vertices.clone(),
            ),
        };
        let c = &mut self.counters;
        c.frames += 1;
        if held {
            c.held += 1;
        } else {
            c.fitted += 1;
            c.residual_sum += residual;
            c.residual_max = c.residual_max.max(residual);
        }
        let frame = ProcessedFrame {
            seq: self.next_seq,
            t: p.frame.t,
            coils: p.frame.coils,
            x,
            y,
            vertices,
            residual,
            solver_iterations: iterations,
            head_corrected: p.head_corrected,
            held,
        };
        self.next_seq += 1;
        Output {
            raw: p.raw,
            frame,
            work: p.work + start.elapsed(),
        }
    }

    /// Applies a client control message. `play` and `stop` are handled by
    /// the session loop, not here.
    pub fn control(&mut self, msg: &ClientMessage) {
        if let Err(e) = self.try_control(msg) {
            self.error(&e);
        }
    }

    fn try_control(&mut self, msg: &ClientMessage) -> Result<(), PipelineError> {
        match msg {
            ClientMessage::SetRoles(roles) => {
                roles.validate()?;
                let mut cfg = SessionConfig::new(roles.clone());
                let old = self.session.config();
                cfg.smoothing_window = old.smoothing_window;
                cfg.delay = old.delay;
                cfg.transform = old.transform;
                cfg.reference_seconds = old.reference_seconds;
                cfg.tracking = old.tracking.clone();
                self.session.cancel_task();
                self.session.set_config(cfg)?;
                self.refresh()?;
                self.auto_reference()?;
                self.events.push(self.state_event());
            }
            ClientMessage::Task { name, action } => match action {
                TaskAction::Start => {
                    if *name == TaskKind::Reference {
                        // a user-started capture replaces the automatic one
                        if self.session.active_task() == Some(TaskKind::Reference) {
                            self.session.cancel_task();
                        }
                        let seconds = self.config().reference_seconds;
                        self.session.start_timed_task(TaskKind::Reference, seconds)?;
                    } else {
                        self.session.start_task(*name)?;
                    }
                }
                TaskAction::Stop => {
                    if self.session.active_task() != Some(*name) {
                        return Err(PipelineError::NoTask);
                    }
                    self.finish_task();
                }
            },
            ClientMessage::Set { key, value } => {
                let mut cfg = self.config().clone();
                match key.as_str() {
                    "smoothing_window" => {
                        let w = value
                            .as_u64()
                            .ok_or_else(|| PipelineError::InvalidSetting(format!("smoothing_window: {value}")))?;
                        cfg.smoothing_window = w as usize;
                        self.smoother.set_window(w as usize)?;
                    }
                    "delay" => {
                        cfg.delay = value
                            .as_f64()
                            .ok_or_else(|| PipelineError::InvalidSetting(format!("delay: {value}")))?;
                    }
                    other => return Err(PipelineError::InvalidSetting(format!("unknown key {other}"))),
                }
                self.session.set_config(cfg)?;
            }
            ClientMessage::Play { .. } | ClientMessage::Stop => {}
        }
        Ok(())
    }

    fn counters(&self) -> &Counters {
        &self.counters
    }
}

/// Opens a source for a client `play` request.
pub type SourceOpener = Box<dyn FnMut(PlaySource, Option<&str>) -> Result<Box<dyn FrameSource>, PipelineError> + Send>;

pub struct SessionOptions {
    /// Set to end the session from outside (e.g. on Ctrl-C).
    pub stop: Arc<AtomicBool>,
    /// Control messages from visualization clients.
    pub control: Option<Receiver<ClientMessage>>,
    pub opener: Option<SourceOpener>,
    /// Keep running after the source ends, waiting for `play` or `stop`.
    pub linger: bool,
    /// Per-sink queue length.
    pub queue_capacity: usize,
    pub max_frames: Option<u64>,
}

impl Default for SessionOptions {
    fn default() -> Self {
        Self {
            stop: Arc::new(AtomicBool::new(false)),
            control: None,
            opener: None,
            linger: false,
            queue_capacity: 256,
            max_frames: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", content = "detail", rename_all = "snake_case")]
pub enum SessionEnd {
    SourceExhausted,
    SourceError(String),
    Stopped,
    FrameLimit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SinkReport {
    pub name: String,
    pub delivered: u64,
    pub dropped: u64,
    pub blocked_ms: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    pub frames: u64,
    /// Frames lost or unusable: sequence gaps, out-of-order frames and
    /// frames without enough reference coils.
    pub dropouts: u64,
    pub seq_gaps: u64,
    pub out_of_order: u64,
    /// Coil samples reported invalid by the source.
    pub missing_samples: u64,
    /// Frames for which no fit ran.
    pub held_frames: u64,
    pub latency_p50_ms: f64,
    pub latency_p99_ms: f64,
    pub latency_max_ms: f64,
    pub frame_period_ms: f64,
    /// Frames whose processing took longer than one frame period.
    pub budget_overruns: u64,
    pub mean_residual_mm: Option<f64>,
    pub max_residual_mm: Option<f64>,
    pub duration_s: f64,
    pub end: SessionEnd,
    pub phase: Phase,
    pub sinks: Vec<SinkReport>,
    pub config: SessionConfig,
}

impl SessionReport {
    /// `key=value` lines for quick inspection.
    pub fn metrics(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push('=');
            s.push_str(&v);
            s.push('\n');
        };
        kv("frames", self.frames.to_string());
        kv("dropouts", self.dropouts.to_string());
        kv("missing_samples", self.missing_samples.to_string());
        kv("held_frames", self.held_frames.to_string());
        kv("latency_p50_ms", format!("{:.3}", self.latency_p50_ms));
        kv("latency_p99_ms", format!("{:.3}", self.latency_p99_ms));
        kv("latency_max_ms", format!("{:.3}", self.latency_max_ms));
        kv("budget_overruns", self.budget_overruns.to_string());
        if let Some(r) = self.mean_residual_mm {
            kv("mean_residual_mm", format!("{r:.6}"));
        }
        for sink in &self.sinks {
            kv(&format!("sink.{}.dropped", sink.name), sink.dropped.to_string());
            kv(
                &format!("sink.{}.blocked_ms", sink.name),
                format!("{:.3}", sink.blocked_ms),
            );
        }
        kv("duration_s", format!("{:.3}", self.duration_s));
        kv(
            "end",
            serde_json::to_value(&self.end)
                .ok()
                .and_then(|v| v.get("reason").and_then(|r| r.as_str()).map(str::to_string))
                .unwrap_or_default(),
        );
        s
    }
}

/// Nearest-rank percentile of `sorted`.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

struct SinkHandle {
    name: String,
    policy: QueuePolicy,
    tx: Option<Sender<SessionEvent>>,
    rx: Receiver<SessionEvent>,
    thread: Option<JoinHandle<Option<String>>>,
    delivered: u64,
    dropped: u64,
    blocked: Duration,
}

impl SinkHandle {
    fn spawn(mut sink: Box<dyn FrameSink>, capacity: usize) -> Self {
        let name = sink.name().to_string();
        let policy = sink.policy();
        let (tx, rx) = bounded::<SessionEvent>(capacity.max(1));
        let thread_rx = rx.clone();
        let thread_name = name.clone();
        let thread = thread::Builder::new()
            .name(format!("sink-{name}"))
            .spawn(move || {
                let mut failure = None;
                for event in thread_rx.iter() {
                    if let Err(e) = sink.handle(&event) {
                        warn!("sink {thread_name} failed: {e}; disconnecting it");
                        failure = Some(e.to_string());
                        break;
                    }
                }
                if failure.is_none() {
                    if let Err(e) = sink.finish() {
                        failure = Some(e.to_string());
                    }
                }
                failure
            })
            .expect("spawn sink thread");
        Self {
            name,
            policy,
            tx: Some(tx),
            rx,
            thread: Some(thread),
            delivered: 0,
            dropped: 0,
            blocked: Duration::ZERO,
        }
    }

    fn send(&mut self, event: SessionEvent) {
        let Some(tx) = &self.tx else { return };
        let result = match tx.try_send(event) {
            Ok(()) => Ok(()),
            Err(TrySendError::Full(event)) => match self.policy {
                QueuePolicy::DropOldest => {
                    let _ = self.rx.try_recv();
                    self.dropped += 1;
                    tx.try_send(event).map_err(|_| ())
                }
                QueuePolicy::Block => {
                    let start = Instant::now();
                    let r = tx.send(event).map_err(|_| ());
                    self.blocked += start.elapsed();
                    r
                }
            },
            Err(TrySendError::Disconnected(_)) => Err(()),
        };
        match result {
            Ok(()) => self.delivered += 1,
            Err(()) => {
                if self.thread.as_ref().is_some_and(|t| t.is_finished()) {
                    debug!("sink {} disconnected", self.name);
                    self.tx = None;
                }
            }
        }
    }

    fn close(mut self) -> SinkReport {
        self.tx = None;
        drop(self.rx);
        let failure = self
            .thread
            .take()
            .and_then(|t| t.join().unwrap_or(Some("sink thread panicked".into())));
        SinkReport {
            name: self.name,
            delivered: self.delivered,
            dropped: self.dropped,
            blocked_ms: self.blocked.as_secs_f64() * 1e3,
            failure,
        }
    }
}

enum Input {
    Frame(u64, CoilFrame),
    End(u64, Option<String>),
}

fn spawn_ingestion(mut source: Box<dyn FrameSource>, generation: u64, tx: Sender<Input>) -> Arc<AtomicBool> {
    let stop = Arc::new(AtomicBool::new(false));
    let flag = stop.clone();
    thread::Builder::new()
        .name(format!("ingest-{generation}"))
        .spawn(move || loop {
            if flag.load(Ordering::SeqCst) {
                break;
            }
            match source.next_frame() {
                Ok(Some(f)) => {
                    if tx.send(Input::Frame(generation, f)).is_err() {
                        break;
                    }
                }
                Ok(None) => {
                    let _ = tx.send(Input::End(generation, None));
                    break;
                }
                Err(e) => {
                    let _ = tx.send(Input::End(generation, Some(e.to_string())));
                    break;
                }
            }
        })
        .expect("spawn ingestion thread");
    stop
}

/// Runs a session until the source ends (or errors), `options.stop` is
/// set, or a client sends `stop`. Source errors end the session with a
/// partial report rather than an `Err`.
pub fn run_session(
    source: Box<dyn FrameSource>,
    config: SessionConfig,
    models: &Models,
    sinks: Vec<Box<dyn FrameSink>>,
    mut options: SessionOptions,
) -> Result<SessionReport, PipelineError> {
    let mut processor = Processor::new(config, models)?;
    let mut sinks: Vec<SinkHandle> = sinks
        .into_iter()
        .map(|s| SinkHandle::spawn(s, options.queue_capacity))
        .collect();
    let dispatch = |sinks: &mut Vec<SinkHandle>, event: SessionEvent| {
        for s in sinks.iter_mut() {
            s.send(event.clone());
        }
    };

    let started = Instant::now();
    let header = source.header();
    processor.begin_source(&header);
    for e in processor.snapshot_events() {
        dispatch(&mut sinks, e);
    }
    dispatch(
        &mut sinks,
        SessionEvent::Started {
            header: Box::new(header),
        },
    );

    let (input_tx, input_rx) = bounded::<Input>(4096);
    let mut generation = 0u64;
    let mut ingest_stop = Some(spawn_ingestion(source, generation, input_tx.clone()));
    let control = options.control.take().unwrap_or_else(never);
    let mut latencies: Vec<f64> = Vec::new();
    let mut end: Option<SessionEnd> = None;
    let mut source_done = false;

    loop {
        let now = Instant::now();
        let wait = processor
            .next_due()
            .map(|d| d.saturating_duration_since(now))
            .unwrap_or(Duration::from_millis(50))
            .min(Duration::from_millis(50));
        select! {
            recv(input_rx) -> msg => match msg {
                Ok(Input::Frame(g, f)) if g == generation => processor.ingest(f, Instant::now()),
                Ok(Input::End(g, err)) if g == generation => {
                    ingest_stop = None;
                    source_done = true;
                    match err {
                        Some(e) => {
                            warn!("source failed: {e}");
                            processor.error(&PipelineError::Config(format!("source: {e}")));
                            end = Some(SessionEnd::SourceError(e));
                        }
                        None => end = Some(SessionEnd::SourceExhausted),
                    }
                }
                _ => {}
            },
            recv(control) -> msg => if let Ok(msg) = msg {
                match &msg {
                    ClientMessage::Stop => {
                        if let Some(flag) = ingest_stop.take() {
                            flag.store(true, Ordering::SeqCst);
                        }
                        generation += 1;
                        source_done = true;
                        end = Some(SessionEnd::Stopped);
                    }
                    ClientMessage::Play { source, path } => {
                        let opened = match options.opener.as_mut() {
                            Some(open) => open(*source, path.as_deref()),
                            None => Err(PipelineError::InvalidSetting("this session cannot open sources".into())),
                        };
                        match opened {
                            Ok(src) => {
                                if let Some(flag) = ingest_stop.take() {
                                    flag.store(true, Ordering::SeqCst);
                                }
                                generation += 1;
                                let header = src.header();
                                processor.begin_source(&header);
                                dispatch(&mut sinks, SessionEvent::Started { header: Box::new(header) });
                                ingest_stop = Some(spawn_ingestion(src, generation, input_tx.clone()));
                                source_done = false;
                                end = None;
                            }
                            Err(e) => processor.error(&e),
                        }
                    }
                    other => processor.control(other),
                }
            },
            default(wait) => {}
        }

        for out in processor.release(Instant::now()) {
            let t0 = Instant::now();
            let json: Arc<str> = frame_message(&out.frame).into();
            latencies.push((out.work + t0.elapsed()).as_secs_f64() * 1e3);
            dispatch(
                &mut sinks,
                SessionEvent::Frame {
                    raw: out.raw,
                    processed: Arc::new(out.frame),
                    json,
                },
            );
        }
        for e in processor.take_events() {
            dispatch(&mut sinks, e);
        }

        if options.stop.load(Ordering::SeqCst) {
            end = Some(SessionEnd::Stopped);
            break;
        }
        if options.max_frames.is_some_and(|n| processor.counters().frames >= n) {
            end = Some(SessionEnd::FrameLimit);
            break;
        }
        if source_done && processor.pending() == 0 && (!options.linger || matches!(end, Some(SessionEnd::Stopped))) {
            // drain frames that were already queued by the ingestion thread
            if !input_rx.is_empty() && !matches!(end, Some(SessionEnd::Stopped)) {
                continue;
            }
            break;
        }
    }
    if let Some(flag) = ingest_stop {
        flag.store(true, Ordering::SeqCst);
    }
    drop(input_rx);

    let c = processor.counters().clone();
    let period = processor.period;
    let sink_reports: Vec<SinkReport> = sinks.into_iter().map(SinkHandle::close).collect();
    let budget_overruns = latencies.iter().filter(|&&l| l > period * 1e3).count() as u64;
    latencies.sort_by(f64::total_cmp);
    let report = SessionReport {
        frames: c.frames,
        dropouts: c.dropouts,
        seq_gaps: c.seq_gaps,
        out_of_order: c.out_of_order,
        missing_samples: c.missing_samples,
        held_frames: c.held,
        latency_p50_ms: percentile(&latencies, 50.0),
        latency_p99_ms: percentile(&latencies, 99.0),
        latency_max_ms: latencies.last().copied().unwrap_or(0.0),
        frame_period_ms: period * 1e3,
        budget_overruns,
        mean_residual_mm: (c.fitted > 0).then(|| c.residual_sum / c.fitted as f64),
        max_residual_mm: (c.fitted > 0).then_some(c.residual_max),
        duration_s: started.elapsed().as_secs_f64(),
        end: end.unwrap_or(SessionEnd::Stopped),
        phase: processor.phase(),
        sinks: sink_reports,
        config: processor.config().clone(),
    };
    info!(
        "session ended ({:?}): {} frames, p99 {:.3} ms",
        report.end, report.frames, report.latency_p99_ms
    );
    Ok(report)
}
