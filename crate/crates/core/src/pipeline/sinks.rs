use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use crossbeam_channel::Sender;
use thiserror::Error;

use super::{CoilRoles, Phase, ProcessedFrame};
use crate::stream::{CoilFrame, StreamError, SweepHeader, SweepWriter};

#[derive(Debug, Error)]
pub enum SinkError {
    #[error(transparent)]
    Stream(#[from] StreamError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("sink closed")]
    Closed,
}

/// What happens when a sink falls behind.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueuePolicy {
    /// Discard the oldest queued event to make room.
    DropOldest,
    /// Wait for room, stalling the processing thread.
    Block,
}

/// Messages fanned out from the processing thread.
#[derive(Debug, Clone)]
pub enum SessionEvent {
    /// A source started; carries its header.
    Started {
        header: Box<SweepHeader>,
    },
    Frame {
        raw: Arc<CoilFrame>,
        processed: Arc<ProcessedFrame>,
        /// The broadcast `frame` message, serialized once on the processing thread.
        json: Arc<str>,
    },
    Mesh {
        name: String,
        vertices: Arc<Vec<f64>>,
        faces: Arc<Vec<[usize; 3]>>,
    },
    State {
        phase: Phase,
        roles: Box<CoilRoles>,
    },
    Error {
        code: u16,
        message: String,
    },
}

/// A consumer of session events. Each sink runs on its own thread and is
/// fed through a bounded queue. An error disconnects that sink only.
pub trait FrameSink: Send {
    fn name(&self) -> &str;

    fn policy(&self) -> QueuePolicy;

    fn handle(&mut self, event: &SessionEvent) -> Result<(), SinkError>;

    /// Called once after the last event.
    fn finish(&mut self) -> Result<(), SinkError> {
        Ok(())
    }
}

/// Forwards events with their arrival time to a channel.
pub struct ChannelSink {
    name: String,
    policy: QueuePolicy,
    tx: Sender<(Instant, SessionEvent)>,
}

impl ChannelSink {
    pub fn new(name: impl Into<String>, policy: QueuePolicy, tx: Sender<(Instant, SessionEvent)>) -> Self {
        Self {
            name: name.into(),
            policy,
            tx,
        }
    }
}

impl FrameSink for ChannelSink {
    fn name(&self) -> &str {
        &self.name
    }

    fn policy(&self) -> QueuePolicy {
        self.policy
    }

    fn handle(&mut self, event: &SessionEvent) -> Result<(), SinkError> {
        self.tx
            .send((Instant::now(), event.clone()))
            .map_err(|_| SinkError::Closed)
    }
}

/// Writes the raw and the processed coil streams as JSONL sweeps in a
/// directory (`raw.jsonl`, `processed.jsonl`).
pub struct RecorderSink {
    dir: PathBuf,
    raw: Option<SweepWriter>,
    processed: Option<SweepWriter>,
    frames: u64,
}

impl RecorderSink {
    pub fn new(dir: impl AsRef<Path>) -> Result<Self, SinkError> {
        std::fs::create_dir_all(dir.as_ref())?;
        Ok(Self {
            dir: dir.as_ref().to_path_buf(),
            raw: None,
            processed: None,
            frames: 0,
        })
    }

    pub fn raw_path(&self) -> PathBuf {
        self.dir.join("raw.jsonl")
    }

    pub fn processed_path(&self) -> PathBuf {
        self.dir.join("processed.jsonl")
    }
}

impl FrameSink for RecorderSink {
    fn name(&self) -> &str {
        "recorder"
    }

    fn policy(&self) -> QueuePolicy {
        QueuePolicy::Block
    }

    fn handle(&mut self, event: &SessionEvent) -> Result<(), SinkError> {
        match event {
            SessionEvent::Started { header } if self.raw.is_none() => {
                self.raw = Some(SweepWriter::create(self.raw_path(), header)?);
                self.processed = Some(SweepWriter::create(self.processed_path(), header)?);
            }
            SessionEvent::Frame { raw, processed, .. } => {
                let (Some(rw), Some(pw)) = (self.raw.as_mut(), self.processed.as_mut()) else {
                    return Ok(());
                };
                rw.write_frame(raw)?;
                pw.write_frame(&CoilFrame {
                    seq: processed.seq,
                    t: processed.t,
                    coils: processed.coils.clone(),
                })?;
                self.frames += 1;
            }
            _ => {}
        }
        Ok(())
    }

    fn finish(&mut self) -> Result<(), SinkError> {
        if let Some(w) = self.raw.take() {
            w.finish()?;
        }
        if let Some(w) = self.processed.take() {
            w.finish()?;
        }
        log::info!("recorder wrote {} frames to {}", self.frames, self.dir.display());
        Ok(())
    }
}
