//! EMA-RT/1 client.

use std::collections::VecDeque;
use std::io::{BufReader, Write};
use std::net::{TcpStream, ToSocketAddrs};

use super::protocol::{read_server_message, ServerMessage, PROTOCOL_VERSION};
use super::{CoilFrame, FrameSource, StreamError, SweepHeader};

/// Connection to an EMA-RT/1 device. Single consumer; may be moved
/// between threads.
pub struct DeviceClient {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
    header: SweepHeader,
    streaming: bool,
    ended: bool,
    closed: bool,
    // frames that arrived while waiting for a reply
    pending: VecDeque<CoilFrame>,
}

/// Connects, greets and fetches the device description.
pub fn connect_device(address: impl ToSocketAddrs) -> Result<DeviceClient, StreamError> {
    DeviceClient::connect(address)
}

impl DeviceClient {
    pub fn connect(address: impl ToSocketAddrs) -> Result<Self, StreamError> {
        let stream = TcpStream::connect(address)?;
        stream.set_nodelay(true)?;
        let mut client = Self {
            reader: BufReader::new(stream.try_clone()?),
            writer: stream,
            header: SweepHeader::new(1.0, Vec::new()),
            streaming: false,
            ended: false,
            closed: false,
            pending: VecDeque::new(),
        };
        client.command(&format!("HELLO {PROTOCOL_VERSION}"), "HELLO")?;
        client.header = client.fetch_description()?;
        Ok(client)
    }

    pub fn describe(&self) -> SweepHeader {
        self.header.clone()
    }

    fn fetch_description(&mut self) -> Result<SweepHeader, StreamError> {
        self.command("DESCRIBE", "DESCRIBE")?;
        loop {
            match self.read()? {
                ServerMessage::Description(h) => return Ok(h),
                ServerMessage::Frame(f) => self.pending.push_back(f),
                other => return Err(StreamError::Protocol(format!("expected description, got {other:?}"))),
            }
        }
    }

    fn read(&mut self) -> Result<ServerMessage, StreamError> {
        match read_server_message(&mut self.reader)? {
            Some(m) => Ok(m),
            None => Err(StreamError::ConnectionLost),
        }
    }

    // Sends a command and waits for its OK, buffering frames in flight.
    fn command(&mut self, line: &str, expect: &str) -> Result<(), StreamError> {
        self.writer.write_all(line.as_bytes())?;
        self.writer.write_all(b"\n")?;
        self.writer.flush()?;
        loop {
            match self.read()? {
                ServerMessage::Ok(cmd) if cmd == expect => return Ok(()),
                ServerMessage::Ok(cmd) if cmd == "END" => {
                    self.streaming = false;
                    self.ended = true;
                }
                ServerMessage::Ok(cmd) => {
                    return Err(StreamError::Protocol(format!("expected OK {expect}, got OK {cmd}")))
                }
                ServerMessage::Err { code, message } => return Err(StreamError::Remote { code, message }),
                ServerMessage::Frame(f) => self.pending.push_back(f),
                ServerMessage::Description(_) => {}
            }
        }
    }

    /// Requests exactly one frame.
    pub fn single(&mut self) -> Result<CoilFrame, StreamError> {
        self.command("SINGLE", "SINGLE")?;
        match self.read()? {
            ServerMessage::Frame(f) => Ok(f),
            other => Err(StreamError::Protocol(format!("expected a frame, got {other:?}"))),
        }
    }

    pub fn start(&mut self, rate: Option<f64>) -> Result<(), StreamError> {
        let line = match rate {
            Some(r) => format!("START {r}"),
            None => "START".to_string(),
        };
        self.command(&line, "START")?;
        self.streaming = true;
        self.ended = false;
        Ok(())
    }

    /// Stops streaming. Frames that were already in flight are returned.
    pub fn stop(&mut self) -> Result<Vec<CoilFrame>, StreamError> {
        self.command("STOP", "STOP")?;
        self.streaming = false;
        Ok(self.pending.drain(..).collect())
    }

    /// Next streamed frame; `Ok(None)` once the device reports end of data.
    pub fn next_frame(&mut self) -> Result<Option<CoilFrame>, StreamError> {
        if let Some(f) = self.pending.pop_front() {
            return Ok(Some(f));
        }
        if self.ended || self.closed {
            return Ok(None);
        }
        match self.read()? {
            ServerMessage::Frame(f) => Ok(Some(f)),
            ServerMessage::Ok(cmd) if cmd == "END" => {
                self.ended = true;
                self.streaming = false;
                Ok(None)
            }
            ServerMessage::Err { code, message } => Err(StreamError::Remote { code, message }),
            other => Err(StreamError::Protocol(format!(
                "unexpected message while streaming: {other:?}"
            ))),
        }
    }

    pub fn is_streaming(&self) -> bool {
        self.streaming
    }

    /// Says goodbye; the server closes the connection afterwards.
    pub fn bye(&mut self) -> Result<(), StreamError> {
        if self.closed {
            return Ok(());
        }
        self.command("BYE", "BYE")?;
        self.closed = true;
        Ok(())
    }

    /// Raw line access for protocol tests.
    pub fn send_raw(&mut self, line: &str) -> Result<ServerMessage, StreamError> {
        self.writer.write_all(line.as_bytes())?;
        self.writer.write_all(b"\n")?;
        self.writer.flush()?;
        self.read()
    }
}

/// Streams from a device at a given rate through the [`FrameSource`] trait.
pub struct DeviceStream {
    client: DeviceClient,
    rate: Option<f64>,
    started: bool,
}

impl DeviceStream {
    pub fn new(client: DeviceClient, rate: Option<f64>) -> Self {
        Self {
            client,
            rate,
            started: false,
        }
    }

    pub fn into_client(self) -> DeviceClient {
        self.client
    }
}

impl FrameSource for DeviceStream {
    fn header(&self) -> SweepHeader {
        self.client.describe()
    }

    fn next_frame(&mut self) -> Result<Option<CoilFrame>, StreamError> {
        if !self.started {
            self.client.start(self.rate)?;
            self.started = true;
        }
        self.client.next_frame()
    }
}

impl Drop for DeviceClient {
    fn drop(&mut self) {
        let _ = self.writer.shutdown(std::net::Shutdown::Both);
    }
}
