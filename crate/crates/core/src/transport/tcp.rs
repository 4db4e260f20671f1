//! Codec messages over TCP, one frame per message: a 4-byte little-endian
//! length followed by the encoded bytes.

use std::io::{self, Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::thread;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::fedavg::{GlobalModelMsg, LocalModel, Worker};
use crate::metrics::{Phase, PhaseRecord};
use crate::transport::{codec, Control, Exchange, TrafficMeter, Transport, WireMessage};

/// Frames above this size are rejected before allocation.
pub const MAX_FRAME: usize = 1 << 30;
pub const CONNECT_ATTEMPTS: u32 = 5;
pub const CONNECT_DELAY: Duration = Duration::from_secs(2);

pub fn write_frame(stream: &mut impl Write, payload: &[u8]) -> io::Result<()> {
    let len = u32::try_from(payload.len())
        .ok()
        .filter(|&n| n as usize <= MAX_FRAME)
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "frame too large"))?;
    stream.write_all(&len.to_le_bytes())?;
    stream.write_all(payload)?;
    stream.flush()
}

/// Reads one frame; the returned duration covers the payload only, not the
/// wait for its length prefix.
pub fn read_frame(stream: &mut impl Read) -> io::Result<(Vec<u8>, Duration)> {
    let mut len = [0u8; 4];
    stream.read_exact(&mut len)?;
    let started = Instant::now();
    let len = u32::from_le_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("frame of {len} bytes"),
        ));
    }
    let mut buf = vec![0; len];
    stream.read_exact(&mut buf)?;
    Ok((buf, started.elapsed()))
}

fn lost(worker: usize, e: io::Error) -> Error {
    Error::protocol(Some(worker as u32), format!("connection lost: {e}"))
}

fn send_control(stream: &mut TcpStream, c: Control) -> io::Result<()> {
    let bytes = codec::encode(&WireMessage::Control(c)).expect("control messages always encode");
    write_frame(stream, &bytes)
}

/// Server end: one registered connection per worker id.
pub struct TcpServer {
    conns: Vec<TcpStream>,
    meter: TrafficMeter,
}

impl TcpServer {
    /// Accepts connections on `listener` until workers `0..k` have each
    /// registered once. Duplicate or out-of-range ids are rejected and
    /// dropped.
    pub fn accept(listener: &TcpListener, k: usize, wait: Duration) -> Result<Self> {
        let deadline = Instant::now() + wait;
        let mut slots: Vec<Option<TcpStream>> = (0..k).map(|_| None).collect();
        let net = |e: io::Error| Error::Connectivity(format!("accepting workers: {e}"));
        listener.set_nonblocking(true).map_err(net)?;
        while slots.iter().any(Option::is_none) {
            match listener.accept() {
                Ok((mut stream, _)) => {
                    stream.set_nonblocking(false).map_err(net)?;
                    stream
                        .set_read_timeout(Some(Duration::from_secs(10)))
                        .map_err(net)?;
                    stream.set_nodelay(true).map_err(net)?;
                    let id = match read_frame(&mut stream).map(|(b, _)| codec::decode(&b)) {
                        Ok(Ok(WireMessage::Control(Control::Register(id)))) => id as usize,
                        // Not a worker handshake; ignore the connection.
                        _ => continue,
                    };
                    if id < k && slots[id].is_none() {
                        send_control(&mut stream, Control::Accept).map_err(net)?;
                        stream.set_read_timeout(None).map_err(net)?;
                        slots[id] = Some(stream);
                    } else {
                        let _ = send_control(&mut stream, Control::Reject);
                    }
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                    if Instant::now() >= deadline {
                        let n = slots.iter().filter(|s| s.is_some()).count();
                        return Err(Error::Connectivity(format!(
                            "only {n} of {k} workers registered in time"
                        )));
                    }
                    thread::sleep(Duration::from_millis(10));
                }
                Err(e) => return Err(net(e)),
            }
        }
        listener.set_nonblocking(false).map_err(net)?;
        Ok(TcpServer {
            conns: slots
                .into_iter()
                .map(|s| s.expect("all slots filled"))
                .collect(),
            meter: TrafficMeter::new(k),
        })
    }

    pub fn meter(&self) -> &TrafficMeter {
        &self.meter
    }

    /// Bounds every blocking read on worker connections.
    pub fn set_read_timeout(&self, timeout: Option<Duration>) -> Result<()> {
        for (w, c) in self.conns.iter().enumerate() {
            c.set_read_timeout(timeout).map_err(|e| lost(w, e))?;
        }
        Ok(())
    }
}

impl Transport for TcpServer {
    fn workers(&self) -> usize {
        self.conns.len()
    }

    fn begin_run(&mut self, run: u32, _seed: u64) -> Result<()> {
        self.meter = TrafficMeter::new(self.conns.len());
        for (w, c) in self.conns.iter_mut().enumerate() {
            send_control(c, Control::Begin(run)).map_err(|e| lost(w, e))?;
        }
        Ok(())
    }

    fn exchange(&mut self, global: &GlobalModelMsg) -> Result<Exchange> {
        let started = Instant::now();
        let payload = codec::encode(&WireMessage::Global(global.clone()))?;
        for (w, c) in self.conns.iter_mut().enumerate() {
            write_frame(c, &payload).map_err(|e| lost(w, e))?;
            self.meter.record_received(w, payload.len());
        }
        let mut updates = Vec::with_capacity(self.conns.len());
        for (w, c) in self.conns.iter_mut().enumerate() {
            let (bytes, _) = read_frame(c).map_err(|e| lost(w, e))?;
            match codec::decode(&bytes)? {
                WireMessage::Update(u) if u.round == global.round => {
                    self.meter.record_sent(w, bytes.len());
                    updates.push(u);
                }
                other => {
                    return Err(Error::protocol(
                        Some(w as u32),
                        format!("expected update for round {}, got {other}", global.round),
                    ))
                }
            }
        }
        let span_ms = started.elapsed().as_secs_f64() * 1e3;
        let mut phases = Vec::with_capacity(4 * updates.len());
        for (w, u) in updates.iter().enumerate() {
            let t = u.timing;
            let busy = f64::from(t.compute_ms) + f64::from(t.recv_ms) + f64::from(t.send_ms);
            for (phase, ms) in [
                (Phase::Receive, f64::from(t.recv_ms)),
                (Phase::Compute, f64::from(t.compute_ms)),
                (Phase::Send, f64::from(t.send_ms)),
                (Phase::Idle, (span_ms - busy).max(0.0)),
            ] {
                phases.push(PhaseRecord {
                    worker: Some(w as u32),
                    round: global.round,
                    phase,
                    virtual_ms: ms,
                    host_ms: Some(ms),
                });
            }
        }
        Ok(Exchange {
            updates,
            span_ms,
            phases,
            round_bytes: self.meter.close_round(),
        })
    }

    fn shutdown(&mut self) -> Result<()> {
        for (w, c) in self.conns.iter_mut().enumerate() {
            send_control(c, Control::Shutdown).map_err(|e| lost(w, e))?;
        }
        Ok(())
    }
}

/// Connects, retrying `attempts` times `delay` apart.
pub fn connect_with_retry(
    addr: impl ToSocketAddrs + Copy,
    attempts: u32,
    delay: Duration,
) -> Result<TcpStream> {
    let mut last = None;
    for attempt in 0..attempts.max(1) {
        if attempt > 0 {
            thread::sleep(delay);
        }
        match TcpStream::connect(addr) {
            Ok(s) => {
                s.set_nodelay(true)
                    .map_err(|e| Error::Connectivity(e.to_string()))?;
                return Ok(s);
            }
            Err(e) => last = Some(e),
        }
    }
    Err(Error::Connectivity(format!(
        "could not connect after {} attempts: {}",
        attempts.max(1),
        last.expect("at least one attempt")
    )))
}

/// Worker handshake; a rejection is a connectivity failure.
pub fn register(stream: &mut TcpStream, id: u32) -> Result<()> {
    let net = |e: io::Error| Error::Connectivity(format!("registering worker {id}: {e}"));
    send_control(stream, Control::Register(id)).map_err(net)?;
    let (bytes, _) = read_frame(stream).map_err(net)?;
    match codec::decode(&bytes)? {
        WireMessage::Control(Control::Accept) => Ok(()),
        WireMessage::Control(Control::Reject) => Err(Error::Connectivity(format!(
            "server rejected worker id {id}"
        ))),
        other => Err(Error::protocol(
            Some(id),
            format!("unexpected registration reply: {other}"),
        )),
    }
}

/// Worker main loop: builds state on `Begin(run)`, trains on every global
/// model, returns on `Shutdown`. Yields the number of rounds served.
pub fn serve_worker<M: LocalModel>(
    stream: &mut TcpStream,
    id: u32,
    mut make_worker: impl FnMut(u32) -> Result<Worker<M>>,
) -> Result<u32> {
    let mut worker = None;
    let mut last_send_ms = 0u32;
    let mut served = 0;
    loop {
        let (bytes, recv) = read_frame(stream)
            .map_err(|e| Error::Connectivity(format!("server connection: {e}")))?;
        match codec::decode(&bytes)? {
            WireMessage::Control(Control::Begin(run)) => {
                worker = Some(make_worker(run)?);
                last_send_ms = 0;
            }
            WireMessage::Control(Control::Shutdown) => return Ok(served),
            WireMessage::Global(msg) => {
                let w = worker
                    .as_mut()
                    .ok_or_else(|| Error::protocol(Some(id), "global model before Begin"))?;
                let (mut update, _) = w.handle(&msg)?;
                update.timing.recv_ms = recv.as_millis().min(u128::from(u32::MAX)) as u32;
                update.timing.send_ms = last_send_ms;
                let payload = codec::encode(&WireMessage::Update(update))?;
                let started = Instant::now();
                write_frame(stream, &payload)
                    .map_err(|e| Error::Connectivity(format!("server connection: {e}")))?;
                last_send_ms = started.elapsed().as_millis().min(u128::from(u32::MAX)) as u32;
                served += 1;
            }
            other => {
                return Err(Error::protocol(
                    Some(id),
                    format!("unexpected message: {other}"),
                ))
            }
        }
    }
}
