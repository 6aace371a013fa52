//! Reading captured traffic: pcap/pcapng files and a plain hex-lines format.

use std::fs::File;
use std::io::BufReader;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};

use etherparse::{NetSlice, SlicedPacket, TransportSlice};
use pcap_parser::pcapng::Block;
use pcap_parser::{create_reader, Linktype, PcapBlockOwned, PcapError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transport {
    Tcp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawCapture {
    /// Microseconds since the capture's epoch.
    pub timestamp_us: u64,
    pub src: SocketAddr,
    pub dst: SocketAddr,
    #[serde(with = "crate::protocol::hex_bytes")]
    pub payload: Vec<u8>,
    pub transport: Transport,
    /// Where the record came from, e.g. `modbus_50.pcap#7`.
    pub reference: String,
}

#[derive(Debug, Error)]
pub enum CaptureError {
    #[error("capture source unavailable: {path}: {source}")]
    SourceUnavailable {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed capture file {path}: {message}")]
    Malformed { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "path", rename_all = "lowercase")]
pub enum CaptureSource {
    Pcap(PathBuf),
    HexLines(PathBuf),
}

impl CaptureSource {
    /// `.hex`/`.hexlines`/`.txt` files are read as hex lines, anything else as pcap or pcapng.
    pub fn from_path(path: impl Into<PathBuf>) -> Self {
        let path = path.into();
        match path.extension().and_then(|e| e.to_str()) {
            Some("hex" | "hexlines" | "txt") => CaptureSource::HexLines(path),
            _ => CaptureSource::Pcap(path),
        }
    }

    pub fn path(&self) -> &Path {
        match self {
            CaptureSource::Pcap(p) | CaptureSource::HexLines(p) => p,
        }
    }
}

/// Reads every TCP record with a non-empty payload sent *to* one of `ports`,
/// sorted by timestamp (file order breaks ties).
pub fn ingest_traffic(source: &CaptureSource, ports: &[u16]) -> Result<Vec<RawCapture>, CaptureError> {
    let mut records = match source {
        CaptureSource::Pcap(p) => read_pcap(p)?,
        CaptureSource::HexLines(p) => read_hex_lines(p)?,
    };
    records.retain(|r| !r.payload.is_empty() && ports.contains(&r.dst.port()));
    records.sort_by_key(|r| r.timestamp_us);
    Ok(records)
}

fn unavailable(path: &Path, source: std::io::Error) -> CaptureError {
    CaptureError::SourceUnavailable { path: path.display().to_string(), source }
}

fn malformed(path: &Path, message: impl Into<String>) -> CaptureError {
    CaptureError::Malformed { path: path.display().to_string(), message: message.into() }
}

fn read_pcap(path: &Path) -> Result<Vec<RawCapture>, CaptureError> {
    let file = File::open(path).map_err(|e| unavailable(path, e))?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("capture").to_string();
    let mut reader = create_reader(1 << 16, BufReader::new(file)).map_err(|e| malformed(path, e.to_string()))?;
    let mut out = Vec::new();
    let mut legacy_link = Linktype::ETHERNET;
    // per-interface link type and timestamp units per second, for pcapng
    let mut interfaces: Vec<(Linktype, u64)> = Vec::new();
    let mut index = 0usize;
    loop {
        match reader.next() {
            Ok((offset, block)) => {
                let packet: Option<(u64, Linktype, &[u8])> = match &block {
                    PcapBlockOwned::LegacyHeader(h) => {
                        legacy_link = h.network;
                        None
                    }
                    PcapBlockOwned::Legacy(b) => {
                        let ts = b.ts_sec as u64 * 1_000_000 + b.ts_usec as u64;
                        let n = (b.caplen as usize).min(b.data.len());
                        Some((ts, legacy_link, &b.data[..n]))
                    }
                    PcapBlockOwned::NG(Block::InterfaceDescription(idb)) => {
                        interfaces.push((idb.linktype, idb.ts_resolution().unwrap_or(1_000_000)));
                        None
                    }
                    PcapBlockOwned::NG(Block::EnhancedPacket(epb)) => {
                        let (link, res) = interfaces.get(epb.if_id as usize).copied().unwrap_or((Linktype::ETHERNET, 1_000_000));
                        let raw = ((epb.ts_high as u64) << 32) | epb.ts_low as u64;
                        let ts = (raw as u128 * 1_000_000 / res.max(1) as u128) as u64;
                        let n = (epb.caplen as usize).min(epb.data.len());
                        Some((ts, link, &epb.data[..n]))
                    }
                    PcapBlockOwned::NG(_) => None,
                };
                if let Some((ts, link, data)) = packet {
                    index += 1;
                    if let Some(mut rec) = tcp_record(link, data, ts) {
                        rec.reference = format!("{name}#{index}");
                        out.push(rec);
                    }
                }
                reader.consume(offset);
            }
            Err(PcapError::Eof) => break,
            Err(PcapError::Incomplete(_)) => reader.refill().map_err(|e| malformed(path, e.to_string()))?,
            Err(e) => return Err(malformed(path, e.to_string())),
        }
    }
    Ok(out)
}

fn tcp_record(link: Linktype, data: &[u8], timestamp_us: u64) -> Option<RawCapture> {
    let sliced = match link {
        Linktype::ETHERNET => SlicedPacket::from_ethernet(data).ok()?,
        Linktype::LINUX_SLL => SlicedPacket::from_linux_sll(data).ok()?,
        Linktype::RAW | Linktype::IPV4 | Linktype::IPV6 => SlicedPacket::from_ip(data).ok()?,
        _ => return None,
    };
    let (src_ip, dst_ip): (IpAddr, IpAddr) = match sliced.net? {
        NetSlice::Ipv4(ip) => (ip.header().source_addr().into(), ip.header().destination_addr().into()),
        NetSlice::Ipv6(ip) => (ip.header().source_addr().into(), ip.header().destination_addr().into()),
    };
    let TransportSlice::Tcp(tcp) = sliced.transport? else {
        return None;
    };
    Some(RawCapture {
        timestamp_us,
        src: SocketAddr::new(src_ip, tcp.source_port()),
        dst: SocketAddr::new(dst_ip, tcp.destination_port()),
        payload: tcp.payload().to_vec(),
        transport: Transport::Tcp,
        reference: String::new(),
    })
}

/// Format: `<timestamp_ms> <src ip:port> <dst ip:port> <hex payload>`, `#` starts a comment.
fn read_hex_lines(path: &Path) -> Result<Vec<RawCapture>, CaptureError> {
    let text = std::fs::read_to_string(path).map_err(|e| unavailable(path, e))?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("capture").to_string();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = |what: &str| malformed(path, format!("line {}: {what}", i + 1));
        let toks: Vec<&str> = line.split_whitespace().collect();
        let [ts, src, dst, hex_payload] = toks[..] else {
            return Err(bad("expected 4 columns"));
        };
        out.push(RawCapture {
            timestamp_us: ts.parse::<u64>().map_err(|_| bad("bad timestamp"))? * 1000,
            src: src.parse().map_err(|_| bad("bad source endpoint"))?,
            dst: dst.parse().map_err(|_| bad("bad destination endpoint"))?,
            payload: hex::decode(hex_payload).map_err(|_| bad("bad hex payload"))?,
            transport: Transport::Tcp,
            reference: format!("{name}:{}", i + 1),
        });
    }
    Ok(out)
}
