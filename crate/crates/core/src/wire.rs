//! Bitcoin P2P framing and the handful of messages a passive listener needs.
//!
//! Every frame is a 24-byte header followed by the payload:
//!
//! ```text
//! +-----------+--------------+---------------+--------------+
//! | magic (4) | command (12) | length (4 LE) | checksum (4) |
//! +-----------+--------------+---------------+--------------+
//! | payload (length bytes)                                  |
//! +---------------------------------------------------------+
//! ```
//!
//! The checksum is the first four bytes of `SHA256(SHA256(payload))`.
//! Only `version`, `verack`, `getaddr`, `addr`, `inv`, `getdata`, `ping` and
//! `pong` have typed payloads; every other command is carried through as raw
//! bytes so callers can skip it.

use std::fmt;
use std::io::{self, Read, Write};
use std::net::{IpAddr, Ipv4Addr, Ipv6Addr, SocketAddr, TcpStream};
use std::time::{Duration, Instant};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::types::Hash32;

pub const HEADER_LEN: usize = 24;
pub const COMMAND_LEN: usize = 12;
pub const DEFAULT_MAX_PAYLOAD: usize = 32 * 1024 * 1024;
pub const MAX_INV_VECTORS: usize = 50_000;
pub const MAX_ADDR_ENTRIES: usize = 1000;
pub const MAX_USER_AGENT_LEN: usize = 256;
pub const DEFAULT_PROTOCOL_VERSION: i32 = 70012;
pub const DEFAULT_HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(10);
/// Protocol version from which the `relay` byte is part of `version`.
const RELAY_FIELD_VERSION: i32 = 70001;

const ADDR_ENTRY_LEN: usize = 30;
const INV_VECTOR_LEN: usize = 36;
const ONIONCAT_PREFIX: [u8; 6] = [0xfd, 0x87, 0xd8, 0x7e, 0xeb, 0x43];

/// Network identifier at the start of each frame.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Magic(pub [u8; 4]);

impl Magic {
    pub const MAINNET: Magic = Magic([0xf9, 0xbe, 0xb4, 0xd9]);
    pub const TESTNET3: Magic = Magic([0x0b, 0x11, 0x09, 0x07]);
    pub const REGTEST: Magic = Magic([0xfa, 0xbf, 0xb5, 0xda]);
    /// Used by the simulator so it can never be mistaken for a real network.
    pub const SIMNET: Magic = Magic([0xb5, 0x0a, 0x12, 0x5e]);

    pub fn from_name(name: &str) -> Option<Magic> {
        match name {
            "mainnet" | "main" => Some(Magic::MAINNET),
            "testnet" | "testnet3" => Some(Magic::TESTNET3),
            "regtest" => Some(Magic::REGTEST),
            "sim" | "simnet" => Some(Magic::SIMNET),
            other => {
                let mut bytes = [0u8; 4];
                hex::decode_to_slice(other, &mut bytes).ok()?;
                Some(Magic(bytes))
            }
        }
    }
}

impl fmt::Debug for Magic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Magic({})", hex::encode(self.0))
    }
}

#[derive(Debug, Error)]
pub enum WireError {
    #[error("truncated input")]
    Truncated,
    #[error("non-canonical compact-size encoding")]
    NonCanonical,
    #[error("command {0:?} longer than 12 bytes")]
    CommandTooLong(String),
    #[error("command field is not zero-padded printable ascii")]
    BadCommand,
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("checksum mismatch")]
    BadChecksum,
    #[error("payload of {len} bytes exceeds limit of {limit}")]
    OversizedPayload { len: usize, limit: usize },
    #[error("{0} inventory vectors exceed the limit of 50000")]
    TooManyVectors(u64),
    #[error("{0} addresses exceed the limit of 1000")]
    TooManyAddresses(u64),
    #[error("malformed {command} payload: {reason}")]
    Malformed { command: &'static str, reason: String },
    #[error("handshake timed out")]
    HandshakeTimeout,
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, WireError>;

pub fn checksum(payload: &[u8]) -> [u8; 4] {
    let digest = Sha256::digest(Sha256::digest(payload));
    [digest[0], digest[1], digest[2], digest[3]]
}

/// Canonical compact-size ("varint") encoding.
pub fn encode_varint(n: u64) -> Vec<u8> {
    let mut out = Vec::with_capacity(9);
    put_varint(&mut out, n);
    out
}

fn put_varint(out: &mut Vec<u8>, n: u64) {
    match n {
        0..=0xfc => out.push(n as u8),
        0xfd..=0xffff => {
            out.push(0xfd);
            out.extend_from_slice(&(n as u16).to_le_bytes());
        }
        0x1_0000..=0xffff_ffff => {
            out.push(0xfe);
            out.extend_from_slice(&(n as u32).to_le_bytes());
        }
        _ => {
            out.push(0xff);
            out.extend_from_slice(&n.to_le_bytes());
        }
    }
}

/// Returns the value and the number of bytes consumed.
pub fn decode_varint(bytes: &[u8]) -> Result<(u64, usize)> {
    let (&tag, rest) = bytes.split_first().ok_or(WireError::Truncated)?;
    let (value, width, min) = match tag {
        0xfd => (le_uint(rest, 2)?, 2, 0xfd),
        0xfe => (le_uint(rest, 4)?, 4, 0x1_0000),
        0xff => (le_uint(rest, 8)?, 8, 0x1_0000_0000),
        small => return Ok((u64::from(small), 1)),
    };
    if value < min {
        return Err(WireError::NonCanonical);
    }
    Ok((value, 1 + width))
}

fn le_uint(bytes: &[u8], width: usize) -> Result<u64> {
    let chunk = bytes.get(..width).ok_or(WireError::Truncated)?;
    Ok(chunk
        .iter()
        .rev()
        .fold(0u64, |acc, &b| (acc << 8) | u64::from(b)))
}

/// Bounds-checked cursor over a payload.
struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Cursor { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(WireError::Truncated)?;
        let slice = self.buf.get(self.pos..end).ok_or(WireError::Truncated)?;
        self.pos = end;
        Ok(slice)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut out = [0u8; N];
        out.copy_from_slice(self.take(N)?);
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32_le(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn i32_le(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.array()?))
    }

    fn u64_le(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn i64_le(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(self.array()?))
    }

    fn varint(&mut self) -> Result<u64> {
        let (value, used) = decode_varint(&self.buf[self.pos..])?;
        self.pos += used;
        Ok(value)
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn is_empty(&self) -> bool {
        self.remaining() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MessageHeader {
    pub magic: Magic,
    pub command: [u8; COMMAND_LEN],
    pub payload_length: u32,
    pub checksum: [u8; 4],
}

impl MessageHeader {
    pub fn to_bytes(&self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[0..4].copy_from_slice(&self.magic.0);
        out[4..16].copy_from_slice(&self.command);
        out[16..20].copy_from_slice(&self.payload_length.to_le_bytes());
        out[20..24].copy_from_slice(&self.checksum);
        out
    }

    pub fn from_bytes(bytes: &[u8; HEADER_LEN]) -> Self {
        let mut magic = [0u8; 4];
        magic.copy_from_slice(&bytes[0..4]);
        let mut command = [0u8; COMMAND_LEN];
        command.copy_from_slice(&bytes[4..16]);
        let mut checksum = [0u8; 4];
        checksum.copy_from_slice(&bytes[20..24]);
        MessageHeader {
            magic: Magic(magic),
            command,
            payload_length: u32::from_le_bytes([bytes[16], bytes[17], bytes[18], bytes[19]]),
            checksum,
        }
    }

    /// Command name, validated as printable ascii followed only by NULs.
    pub fn command_name(&self) -> Result<String> {
        let end = self
            .command
            .iter()
            .position(|&b| b == 0)
            .unwrap_or(COMMAND_LEN);
        let (name, pad) = self.command.split_at(end);
        if !name.iter().all(|b| b.is_ascii_graphic()) || pad.iter().any(|&b| b != 0) {
            return Err(WireError::BadCommand);
        }
        Ok(String::from_utf8_lossy(name).into_owned())
    }
}

fn command_bytes(command: &str) -> Result<[u8; COMMAND_LEN]> {
    if command.len() > COMMAND_LEN {
        return Err(WireError::CommandTooLong(command.to_string()));
    }
    if !command.bytes().all(|b| b.is_ascii_graphic()) {
        return Err(WireError::BadCommand);
    }
    let mut out = [0u8; COMMAND_LEN];
    out[..command.len()].copy_from_slice(command.as_bytes());
    Ok(out)
}

pub fn encode_message(magic: Magic, command: &str, payload: &[u8]) -> Result<Vec<u8>> {
    let payload_length = u32::try_from(payload.len()).map_err(|_| WireError::OversizedPayload {
        len: payload.len(),
        limit: u32::MAX as usize,
    })?;
    let header = MessageHeader {
        magic,
        command: command_bytes(command)?,
        payload_length,
        checksum: checksum(payload),
    };
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend_from_slice(&header.to_bytes());
    out.extend_from_slice(payload);
    Ok(out)
}

/// Reads exactly one frame. Never consumes more than the header plus the
/// declared payload length, so the stream stays aligned on the next frame.
pub fn decode_message<R: Read>(
    reader: &mut R,
    magic: Magic,
    max_payload: usize,
) -> Result<(String, Vec<u8>)> {
    let mut head = [0u8; HEADER_LEN];
    read_exact(reader, &mut head)?;
    let header = MessageHeader::from_bytes(&head);
    if header.magic != magic {
        return Err(WireError::BadMagic(header.magic.0));
    }
    let command = header.command_name()?;
    let len = header.payload_length as usize;
    if len > max_payload {
        return Err(WireError::OversizedPayload {
            len,
            limit: max_payload,
        });
    }
    let mut payload = vec![0u8; len];
    read_exact(reader, &mut payload)?;
    if checksum(&payload) != header.checksum {
        return Err(WireError::BadChecksum);
    }
    Ok((command, payload))
}

fn read_exact<R: Read>(reader: &mut R, buf: &mut [u8]) -> Result<()> {
    reader.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => WireError::Truncated,
        _ => WireError::Io(e),
    })
}

/// A peer address as carried in `version` and `addr` payloads.
///
/// IPv4 peers use the IPv4-mapped IPv6 form; Tor v2 peers use the OnionCat
/// range and are kept opaque.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NetAddress {
    pub services: u64,
    pub ip: [u8; 16],
    pub port: u16,
}

impl NetAddress {
    pub fn from_socket(addr: SocketAddr, services: u64) -> Self {
        let ip = match addr.ip() {
            IpAddr::V4(v4) => v4.to_ipv6_mapped().octets(),
            IpAddr::V6(v6) => v6.octets(),
        };
        NetAddress {
            services,
            ip,
            port: addr.port(),
        }
    }

    pub fn unspecified() -> Self {
        NetAddress {
            services: 0,
            ip: [0u8; 16],
            port: 0,
        }
    }

    pub fn is_onion(&self) -> bool {
        self.ip[..6] == ONIONCAT_PREFIX
    }

    /// `None` for onion addresses, which have no socket form.
    pub fn socket_addr(&self) -> Option<SocketAddr> {
        if self.is_onion() {
            return None;
        }
        let v6 = Ipv6Addr::from(self.ip);
        let ip = match v6.to_ipv4_mapped() {
            Some(v4) => IpAddr::V4(v4),
            None => IpAddr::V6(v6),
        };
        Some(SocketAddr::new(ip, self.port))
    }

    /// Textual peer identity: `a.b.c.d:port`, `[v6]:port` or `name.onion:port`.
    pub fn peer_string(&self) -> String {
        match self.socket_addr() {
            Some(sa) => sa.to_string(),
            None => {
                let name = data_encoding::BASE32_NOPAD
                    .encode(&self.ip[6..])
                    .to_ascii_lowercase();
                format!("{name}.onion:{}", self.port)
            }
        }
    }

    fn put(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.services.to_le_bytes());
        out.extend_from_slice(&self.ip);
        out.extend_from_slice(&self.port.to_be_bytes());
    }

    fn read(cur: &mut Cursor<'_>) -> Result<Self> {
        let services = cur.u64_le()?;
        let ip = cur.array::<16>()?;
        let port = u16::from_be_bytes(cur.array()?);
        Ok(NetAddress { services, ip, port })
    }
}

impl From<Ipv4Addr> for NetAddress {
    fn from(ip: Ipv4Addr) -> Self {
        NetAddress {
            services: 0,
            ip: ip.to_ipv6_mapped().octets(),
            port: 0,
        }
    }
}

/// One `addr` entry: a peer address with its last-seen time in seconds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AddrEntry {
    pub last_seen: u32,
    pub addr: NetAddress,
}

pub fn encode_addr(entries: &[AddrEntry]) -> Result<Vec<u8>> {
    if entries.len() > MAX_ADDR_ENTRIES {
        return Err(WireError::TooManyAddresses(entries.len() as u64));
    }
    let mut out = Vec::with_capacity(3 + entries.len() * ADDR_ENTRY_LEN);
    put_varint(&mut out, entries.len() as u64);
    for entry in entries {
        out.extend_from_slice(&entry.last_seen.to_le_bytes());
        entry.addr.put(&mut out);
    }
    Ok(out)
}

pub fn decode_addr(payload: &[u8]) -> Result<Vec<AddrEntry>> {
    let mut cur = Cursor::new(payload);
    let count = cur.varint()?;
    if count > MAX_ADDR_ENTRIES as u64 {
        return Err(WireError::TooManyAddresses(count));
    }
    if (cur.remaining() as u64) < count * ADDR_ENTRY_LEN as u64 {
        return Err(WireError::Truncated);
    }
    (0..count)
        .map(|_| {
            let last_seen = cur.u32_le()?;
            let addr = NetAddress::read(&mut cur)?;
            Ok(AddrEntry { last_seen, addr })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum InvKind {
    Tx,
    Block,
    /// Any other type code (witness, filtered, compact...). Kept so the
    /// caller can log and skip it.
    Unknown(u32),
}

impl InvKind {
    pub fn code(&self) -> u32 {
        match self {
            InvKind::Tx => 1,
            InvKind::Block => 2,
            InvKind::Unknown(code) => *code,
        }
    }

    pub fn from_code(code: u32) -> Self {
        match code {
            1 => InvKind::Tx,
            2 => InvKind::Block,
            other => InvKind::Unknown(other),
        }
    }

    pub fn is_known(&self) -> bool {
        !matches!(self, InvKind::Unknown(_))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct InvVector {
    pub kind: InvKind,
    pub hash: Hash32,
}

impl InvVector {
    pub fn tx(hash: Hash32) -> Self {
        InvVector {
            kind: InvKind::Tx,
            hash,
        }
    }

    pub fn block(hash: Hash32) -> Self {
        InvVector {
            kind: InvKind::Block,
            hash,
        }
    }
}

pub fn encode_inv(vectors: &[InvVector]) -> Result<Vec<u8>> {
    if vectors.len() > MAX_INV_VECTORS {
        return Err(WireError::TooManyVectors(vectors.len() as u64));
    }
    let mut out = Vec::with_capacity(3 + vectors.len() * INV_VECTOR_LEN);
    put_varint(&mut out, vectors.len() as u64);
    for v in vectors {
        out.extend_from_slice(&v.kind.code().to_le_bytes());
        out.extend_from_slice(v.hash.wire_bytes());
    }
    Ok(out)
}

pub fn decode_inv(payload: &[u8]) -> Result<Vec<InvVector>> {
    let mut cur = Cursor::new(payload);
    let count = cur.varint()?;
    if count > MAX_INV_VECTORS as u64 {
        return Err(WireError::TooManyVectors(count));
    }
    if (cur.remaining() as u64) < count * INV_VECTOR_LEN as u64 {
        return Err(WireError::Truncated);
    }
    (0..count)
        .map(|_| {
            let kind = InvKind::from_code(cur.u32_le()?);
            let hash = Hash32(cur.array()?);
            Ok(InvVector { kind, hash })
        })
        .collect()
}

/// Contents of a `version` message.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VersionInfo {
    pub protocol_version: i32,
    pub services: u64,
    pub timestamp: i64,
    pub addr_recv: NetAddress,
    pub addr_from: NetAddress,
    pub nonce: u64,
    pub user_agent: String,
    pub start_height: i32,
    pub relay: bool,
}

impl VersionInfo {
    /// What the listener advertises unless configured otherwise.
    pub fn listener(timestamp: i64, nonce: u64) -> Self {
        VersionInfo {
            protocol_version: DEFAULT_PROTOCOL_VERSION,
            services: 0,
            timestamp,
            addr_recv: NetAddress::unspecified(),
            addr_from: NetAddress::unspecified(),
            nonce,
            user_agent: format!("/blocksonar:{}/", env!("CARGO_PKG_VERSION")),
            start_height: 0,
            relay: true,
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut out = Vec::with_capacity(86 + self.user_agent.len());
        out.extend_from_slice(&self.protocol_version.to_le_bytes());
        out.extend_from_slice(&self.services.to_le_bytes());
        out.extend_from_slice(&self.timestamp.to_le_bytes());
        self.addr_recv.put(&mut out);
        self.addr_from.put(&mut out);
        out.extend_from_slice(&self.nonce.to_le_bytes());
        put_varint(&mut out, self.user_agent.len() as u64);
        out.extend_from_slice(self.user_agent.as_bytes());
        out.extend_from_slice(&self.start_height.to_le_bytes());
        if self.protocol_version >= RELAY_FIELD_VERSION {
            out.push(u8::from(self.relay));
        }
        Ok(out)
    }

    pub fn decode(payload: &[u8]) -> Result<Self> {
        let malformed = |reason: String| WireError::Malformed {
            command: "version",
            reason,
        };
        let mut cur = Cursor::new(payload);
        let protocol_version = cur.i32_le()?;
        let services = cur.u64_le()?;
        let timestamp = cur.i64_le()?;
        let addr_recv = NetAddress::read(&mut cur)?;
        let addr_from = NetAddress::read(&mut cur)?;
        let nonce = cur.u64_le()?;
        let ua_len = cur.varint()?;
        if ua_len > MAX_USER_AGENT_LEN as u64 {
            return Err(malformed(format!("user agent of {ua_len} bytes")));
        }
        let user_agent = String::from_utf8_lossy(cur.take(ua_len as usize)?).into_owned();
        let start_height = cur.i32_le()?;
        // Pre-70001 peers omit the relay flag entirely.
        let relay = if cur.is_empty() { true } else { cur.u8()? != 0 };
        let info = VersionInfo {
            protocol_version,
            services,
            timestamp,
            addr_recv,
            addr_from,
            nonce,
            user_agent,
            start_height,
            relay,
        };
        info.validate()?;
        Ok(info)
    }

    fn validate(&self) -> Result<()> {
        if self.protocol_version <= 0 {
            return Err(WireError::Malformed {
                command: "version",
                reason: format!("protocol version {}", self.protocol_version),
            });
        }
        if self.user_agent.len() > MAX_USER_AGENT_LEN {
            return Err(WireError::Malformed {
                command: "version",
                reason: format!("user agent of {} bytes", self.user_agent.len()),
            });
        }
        Ok(())
    }
}

/// The message subset understood by the listener and the simulator.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Message {
    Version(VersionInfo),
    Verack,
    GetAddr,
    Addr(Vec<AddrEntry>),
    Inv(Vec<InvVector>),
    GetData(Vec<InvVector>),
    Ping(u64),
    Pong(u64),
    /// Anything else, passed through untouched.
    Other { command: String, payload: Vec<u8> },
}

impl Message {
    pub fn command(&self) -> &str {
        match self {
            Message::Version(_) => "version",
            Message::Verack => "verack",
            Message::GetAddr => "getaddr",
            Message::Addr(_) => "addr",
            Message::Inv(_) => "inv",
            Message::GetData(_) => "getdata",
            Message::Ping(_) => "ping",
            Message::Pong(_) => "pong",
            Message::Other { command, .. } => command,
        }
    }

    pub fn payload(&self) -> Result<Vec<u8>> {
        Ok(match self {
            Message::Version(v) => v.encode()?,
            Message::Verack | Message::GetAddr => Vec::new(),
            Message::Addr(entries) => encode_addr(entries)?,
            Message::Inv(vectors) | Message::GetData(vectors) => encode_inv(vectors)?,
            Message::Ping(nonce) | Message::Pong(nonce) => nonce.to_le_bytes().to_vec(),
            Message::Other { payload, .. } => payload.clone(),
        })
    }

    pub fn from_parts(command: String, payload: Vec<u8>) -> Result<Self> {
        Ok(match command.as_str() {
            "version" => Message::Version(VersionInfo::decode(&payload)?),
            "verack" => Message::Verack,
            "getaddr" => Message::GetAddr,
            "addr" => Message::Addr(decode_addr(&payload)?),
            "inv" => Message::Inv(decode_inv(&payload)?),
            "getdata" => Message::GetData(decode_inv(&payload)?),
            "ping" if payload.len() == 8 => Message::Ping(u64::from_le_bytes(
                payload.as_slice().try_into().expect("length checked"),
            )),
            "pong" if payload.len() == 8 => Message::Pong(u64::from_le_bytes(
                payload.as_slice().try_into().expect("length checked"),
            )),
            _ => Message::Other { command, payload },
        })
    }

    pub fn to_frame(&self, magic: Magic) -> Result<Vec<u8>> {
        encode_message(magic, self.command(), &self.payload()?)
    }
}

pub fn write_message<W: Write>(writer: &mut W, magic: Magic, msg: &Message) -> Result<()> {
    writer.write_all(&msg.to_frame(magic)?)?;
    writer.flush()?;
    Ok(())
}

pub fn read_message<R: Read>(reader: &mut R, magic: Magic, max_payload: usize) -> Result<Message> {
    let (command, payload) = decode_message(reader, magic, max_payload)?;
    Message::from_parts(command, payload)
}

/// A byte stream whose reads can be bounded in time.
pub trait Connection: Read + Write {
    fn set_read_timeout(&mut self, timeout: Option<Duration>) -> io::Result<()>;
}

impl Connection for TcpStream {
    fn set_read_timeout(&mut self, timeout: Option<Duration>) -> io::Result<()> {
        TcpStream::set_read_timeout(self, timeout)
    }
}

/// Runs the version/verack exchange and returns the peer's `version`.
///
/// Both sides send `version` immediately, so the same routine serves the
/// dialing and the accepting end. Frames other than `version`/`verack` that
/// arrive before completion are skipped. The read timeout is left cleared.
pub fn handshake<C: Connection>(
    conn: &mut C,
    magic: Magic,
    self_info: &VersionInfo,
    timeout: Duration,
) -> Result<VersionInfo> {
    let deadline = Instant::now() + timeout;
    write_message(conn, magic, &Message::Version(self_info.clone()))?;

    let mut peer: Option<VersionInfo> = None;
    let mut got_verack = false;
    let outcome = loop {
        if peer.is_some() && got_verack {
            break Ok(());
        }
        let remaining = deadline.saturating_duration_since(Instant::now());
        if remaining.is_zero() {
            break Err(WireError::HandshakeTimeout);
        }
        conn.set_read_timeout(Some(remaining))?;
        let (command, payload) = match decode_message(conn, magic, DEFAULT_MAX_PAYLOAD) {
            Ok(frame) => frame,
            Err(WireError::Io(e))
                if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) =>
            {
                break Err(WireError::HandshakeTimeout);
            }
            Err(e) => break Err(e),
        };
        match command.as_str() {
            "version" if peer.is_none() => {
                let info = VersionInfo::decode(&payload).map_err(|e| {
                    WireError::ProtocolViolation(format!("malformed version: {e}"))
                })?;
                write_message(conn, magic, &Message::Verack)?;
                peer = Some(info);
            }
            "version" => break Err(WireError::ProtocolViolation("duplicate version".into())),
            "verack" if peer.is_none() => {
                break Err(WireError::ProtocolViolation("verack before version".into()))
            }
            "verack" => got_verack = true,
            other => log::debug!("skipping {other} during handshake"),
        }
    };
    conn.set_read_timeout(None)?;
    outcome.map(|()| peer.expect("loop exits with a version"))
}
