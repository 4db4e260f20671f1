//! Little-endian binary layout of round messages.
//!
//! ```text
//! "FEDW" | version u8 | type u8 | round u32 | tensor count u16
//! [LocalUpdate only] sample_count u32 | compute_ms u32 | recv_ms u32 | send_ms u32
//! per tensor: name len u16 | UTF-8 name | ndim u8 | dims u32 * ndim | f32 * numel
//! ```
//!
//! Control messages carry no tensors; the round field holds
//! `opcode << 24 | argument`.

use crate::error::{Error, Result};
use crate::fedavg::{GlobalModelMsg, LocalUpdateMsg, UpdateTiming};
use crate::nn::{Parameter, ParameterSet};
use crate::tensor::{Tensor, MAX_RANK};

pub const MAGIC: [u8; 4] = *b"FEDW";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 12;
pub const UPDATE_EXTRA_LEN: usize = 16;

const TYPE_GLOBAL: u8 = 0;
const TYPE_UPDATE: u8 = 1;
const TYPE_CONTROL: u8 = 2;

/// Largest argument a control message can carry.
pub const CONTROL_ARG_MAX: u32 = (1 << 24) - 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Register(u32),
    Accept,
    Reject,
    Shutdown,
    /// Start of repeat run `n`; workers rebuild their state for that seed.
    Begin(u32),
}

impl Control {
    fn pack(self) -> Result<u32> {
        let (op, arg) = match self {
            Control::Register(id) => (1, id),
            Control::Accept => (2, 0),
            Control::Reject => (3, 0),
            Control::Shutdown => (4, 0),
            Control::Begin(run) => (5, run),
        };
        if arg > CONTROL_ARG_MAX {
            return Err(Error::validation(format!(
                "control argument {arg} exceeds {CONTROL_ARG_MAX}"
            )));
        }
        Ok(op << 24 | arg)
    }

    fn unpack(word: u32) -> Result<Self> {
        let arg = word & CONTROL_ARG_MAX;
        let no_arg = |c: Control| {
            if arg == 0 {
                Ok(c)
            } else {
                Err(Error::format(6, "unexpected control argument"))
            }
        };
        match word >> 24 {
            1 => Ok(Control::Register(arg)),
            2 => no_arg(Control::Accept),
            3 => no_arg(Control::Reject),
            4 => no_arg(Control::Shutdown),
            5 => Ok(Control::Begin(arg)),
            op => Err(Error::format(6, format!("unknown control opcode {op}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum WireMessage {
    Global(GlobalModelMsg),
    Update(LocalUpdateMsg),
    Control(Control),
}

impl WireMessage {
    pub fn round(&self) -> Option<u32> {
        match self {
            WireMessage::Global(m) => Some(m.round),
            WireMessage::Update(m) => Some(m.round),
            WireMessage::Control(_) => None,
        }
    }

    /// Bitwise equality, treating NaN payloads as values.
    pub fn bit_eq(&self, other: &WireMessage) -> bool {
        match (self, other) {
            (WireMessage::Global(a), WireMessage::Global(b)) => {
                a.round == b.round && a.weights.bit_eq(&b.weights)
            }
            (WireMessage::Update(a), WireMessage::Update(b)) => {
                a.round == b.round
                    && a.sample_count == b.sample_count
                    && a.timing == b.timing
                    && a.weights.bit_eq(&b.weights)
            }
            (WireMessage::Control(a), WireMessage::Control(b)) => a == b,
            _ => false,
        }
    }
}

impl std::fmt::Display for WireMessage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            WireMessage::Global(m) => write!(f, "global model for round {}", m.round),
            WireMessage::Update(m) => write!(f, "local update for round {}", m.round),
            WireMessage::Control(c) => write!(f, "control {c:?}"),
        }
    }
}

fn tensor_block_len(weights: &ParameterSet) -> usize {
    weights
        .iter()
        .map(|p| 2 + p.name().len() + 1 + 4 * p.value.rank() + 4 * p.numel())
        .sum()
}

/// Exact size of [`encode`]'s output.
pub fn encoded_len(msg: &WireMessage) -> usize {
    match msg {
        WireMessage::Global(m) => HEADER_LEN + tensor_block_len(&m.weights),
        WireMessage::Update(m) => HEADER_LEN + UPDATE_EXTRA_LEN + tensor_block_len(&m.weights),
        WireMessage::Control(_) => HEADER_LEN,
    }
}

pub fn encode(msg: &WireMessage) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(encoded_len(msg));
    let (kind, round, weights) = match msg {
        WireMessage::Global(m) => (TYPE_GLOBAL, m.round, Some(&m.weights)),
        WireMessage::Update(m) => (TYPE_UPDATE, m.round, Some(&m.weights)),
        WireMessage::Control(c) => (TYPE_CONTROL, c.pack()?, None),
    };
    let count = weights.map_or(0, ParameterSet::len);
    let count = u16::try_from(count)
        .map_err(|_| Error::validation(format!("{count} tensors exceed the u16 count field")))?;
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(kind);
    out.extend_from_slice(&round.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    if let WireMessage::Update(m) = msg {
        for v in [
            m.sample_count,
            m.timing.compute_ms,
            m.timing.recv_ms,
            m.timing.send_ms,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for p in weights.into_iter().flat_map(ParameterSet::iter) {
        let name = p.name().as_bytes();
        let name_len = u16::try_from(name.len()).map_err(|_| {
            Error::validation(format!("tensor name of {} bytes is too long", name.len()))
        })?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(p.value.rank() as u8);
        for &d in p.value.shape() {
            let d = u32::try_from(d)
                .map_err(|_| Error::validation(format!("dimension {d} exceeds u32")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    debug_assert_eq!(out.len(), encoded_len(msg));
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.pos,
                format!(
                    "truncated {what}: need {n} bytes, {} left",
                    self.bytes.len() - self.pos
                ),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<WireMessage> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format(0, "bad magic"));
    }
    let version = r.u8("version")?;
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let kind = r.u8("message type")?;
    let round = r.u32("round")?;
    let count_at = r.pos;
    let count = r.u16("tensor count")?;
    let msg = match kind {
        TYPE_CONTROL => {
            if count != 0 {
                return Err(Error::format(count_at, "control message declares tensors"));
            }
            WireMessage::Control(Control::unpack(round)?)
        }
        TYPE_GLOBAL => WireMessage::Global(GlobalModelMsg {
            round,
            weights: read_tensors(&mut r, count)?,
        }),
        TYPE_UPDATE => {
            let sample_count = r.u32("sample count")?;
            let timing = UpdateTiming {
                compute_ms: r.u32("compute_ms")?,
                recv_ms: r.u32("recv_ms")?,
                send_ms: r.u32("send_ms")?,
            };
            WireMessage::Update(LocalUpdateMsg {
                round,
                weights: read_tensors(&mut r, count)?,
                sample_count,
                timing,
            })
        }
        other => return Err(Error::format(5, format!("unknown message type {other}"))),
    };
    if r.pos != bytes.len() {
        return Err(Error::format(
            r.pos,
            format!("{} trailing bytes", bytes.len() - r.pos),
        ));
    }
    Ok(msg)
}

fn read_tensors(r: &mut Reader<'_>, count: u16) -> Result<ParameterSet> {
    let mut set = ParameterSet::new();
    for _ in 0..count {
        let name_len = r.u16("name length")?;
        let name_at = r.pos;
        let name = std::str::from_utf8(r.take(usize::from(name_len), "name")?)
            .map_err(|e| Error::format(name_at + e.valid_up_to(), "tensor name is not UTF-8"))?;
        let rank_at = r.pos;
        let rank = usize::from(r.u8("ndim")?);
        if rank == 0 || rank > MAX_RANK {
            return Err(Error::format(
                rank_at,
                format!("ndim {rank} outside 1..={MAX_RANK}"),
            ));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut numel = 1usize;
        for _ in 0..rank {
            let at = r.pos;
            let d = r.u32("dimension")? as usize;
            if d == 0 {
                return Err(Error::format(at, "zero dimension"));
            }
            numel = numel
                .checked_mul(d)
                .filter(|n| n.checked_mul(4).is_some())
                .ok_or_else(|| Error::format(at, "tensor size overflows"))?;
            shape.push(d);
        }
        let payload = r.take(4 * numel, "tensor payload")?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let param = Parameter::new(name, Tensor::new(shape, data)?)
            .map_err(|e| Error::format(name_at, e.to_string()))?;
        set.push(param)
            .map_err(|e| Error::format(name_at, e.to_string()))?;
    }
    Ok(set)
}
