//! Full-mesh TCP transport.
//!
//! Rank `r` listens on its roster address, accepts one connection from
//! every higher rank and dials every lower rank. The dialler sends its
//! rank id and the acceptor echoes its own. Each outgoing edge has a
//! writer thread fed by a channel, so `send` never blocks; receives block
//! on the socket of the requested peer.
//!
//! Frame layout (little endian): `u32 tag`, `u32 seq`, `u64 count`, then
//! `count` fp16 (2 bytes) or fp32 (4 bytes) values. The low byte of the tag
//! is the primitive, the next byte the element type.

use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::Path;
use std::sync::mpsc::{self, Sender};
use std::task::{Context, Poll};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use zerodp_core::collectives::{Frame, Payload, Primitive, Transport};
use zerodp_core::{CommError, Half};

const DTYPE_F16: u32 = 1;
const DTYPE_F32: u32 = 2;
const HANDSHAKE_MAGIC: u32 = 0x5a44_5030;

/// Parse a roster: one `host:port` per line in rank order; blank lines and
/// `#` comments are skipped.
pub fn parse_roster(text: &str) -> Result<Vec<String>, String> {
    let roster: Vec<String> = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(str::to_owned)
        .collect();
    if roster.is_empty() {
        return Err("roster lists no ranks".into());
    }
    for (i, addr) in roster.iter().enumerate() {
        if addr
            .rsplit_once(':')
            .and_then(|(_, p)| p.parse::<u16>().ok())
            .is_none()
        {
            return Err(format!(
                "roster line {}: expected host:port, got {addr:?}",
                i + 1
            ));
        }
    }
    Ok(roster)
}

pub fn read_roster(path: &Path) -> Result<Vec<String>, String> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read roster {}: {e}", path.display()))?;
    parse_roster(&text)
}

/// Loopback roster with `n` currently free ports.
pub fn loopback_roster(n: usize) -> io::Result<Vec<String>> {
    let listeners = (0..n)
        .map(|_| TcpListener::bind("127.0.0.1:0"))
        .collect::<io::Result<Vec<_>>>()?;
    listeners
        .iter()
        .map(|l| l.local_addr().map(|a| a.to_string()))
        .collect()
}

pub fn encode_frame(frame: &Frame) -> Vec<u8> {
    let (dtype, count) = match &frame.payload {
        Payload::F16(v) => (DTYPE_F16, v.len()),
        Payload::F32(v) => (DTYPE_F32, v.len()),
    };
    let mut out = Vec::with_capacity(16 + count * 4);
    out.extend_from_slice(&(frame.primitive as u32 | dtype << 8).to_le_bytes());
    out.extend_from_slice(&frame.seq.to_le_bytes());
    out.extend_from_slice(&(count as u64).to_le_bytes());
    match &frame.payload {
        Payload::F16(v) => v
            .iter()
            .for_each(|h| out.extend_from_slice(&h.to_bits().to_le_bytes())),
        Payload::F32(v) => v
            .iter()
            .for_each(|x| out.extend_from_slice(&x.to_bits().to_le_bytes())),
    }
    out
}

pub fn decode_frame<R: Read>(r: &mut R) -> io::Result<Frame> {
    let mut head = [0u8; 16];
    r.read_exact(&mut head)?;
    let tag = u32::from_le_bytes(head[0..4].try_into().expect("4 bytes"));
    let seq = u32::from_le_bytes(head[4..8].try_into().expect("4 bytes"));
    let count = u64::from_le_bytes(head[8..16].try_into().expect("8 bytes"));
    let bad = |what: String| io::Error::new(io::ErrorKind::InvalidData, what);
    let primitive = Primitive::from_u32(tag & 0xff)
        .ok_or_else(|| bad(format!("unknown primitive tag {tag:#x}")))?;
    let count = usize::try_from(count).map_err(|_| bad(format!("frame too large: {count}")))?;
    let payload = match tag >> 8 {
        DTYPE_F16 => {
            let mut buf = vec![0u8; count * 2];
            r.read_exact(&mut buf)?;
            Payload::F16(
                buf.chunks_exact(2)
                    .map(|c| Half::from_bits(u16::from_le_bytes([c[0], c[1]])))
                    .collect(),
            )
        }
        DTYPE_F32 => {
            let mut buf = vec![0u8; count * 4];
            r.read_exact(&mut buf)?;
            Payload::F32(
                buf.chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            )
        }
        other => return Err(bad(format!("unknown element type {other}"))),
    };
    Ok(Frame {
        primitive,
        seq,
        payload,
    })
}

struct Edge {
    tx: Option<Sender<Vec<u8>>>,
    writer: Option<JoinHandle<io::Result<()>>>,
    reader: BufReader<TcpStream>,
}

pub struct TcpTransport {
    rank: usize,
    n_ranks: usize,
    edges: Vec<Option<Edge>>,
}

#[derive(Clone, Copy, Debug)]
pub struct TcpOptions {
    /// How long to keep dialling peers that are not up yet.
    pub connect_timeout: Duration,
    /// Longest wait for a single frame.
    pub read_timeout: Duration,
}

impl Default for TcpOptions {
    fn default() -> Self {
        TcpOptions {
            connect_timeout: Duration::from_secs(30),
            read_timeout: Duration::from_secs(120),
        }
    }
}

fn resolve(addr: &str) -> io::Result<SocketAddr> {
    addr.to_socket_addrs()?
        .next()
        .ok_or_else(|| io::Error::new(io::ErrorKind::NotFound, format!("cannot resolve {addr}")))
}

fn write_u32(s: &mut TcpStream, v: u32) -> io::Result<()> {
    s.write_all(&v.to_le_bytes())
}

fn read_u32(s: &mut TcpStream) -> io::Result<u32> {
    let mut b = [0u8; 4];
    s.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

impl TcpTransport {
    /// Join the mesh described by `roster` as `rank`.
    pub fn connect(rank: usize, roster: &[String], opts: TcpOptions) -> Result<Self, CommError> {
        let n = roster.len();
        let fail = |reason: String| CommError::Transport { rank, reason };
        if rank >= n {
            return Err(fail(format!("rank {rank} not in roster of {n}")));
        }
        let listener = TcpListener::bind(resolve(&roster[rank]).map_err(|e| fail(e.to_string()))?)
            .map_err(|e| fail(format!("bind {}: {e}", roster[rank])))?;
        let mut streams: Vec<Option<TcpStream>> = (0..n).map(|_| None).collect();

        for (peer, addr) in roster.iter().enumerate().take(rank) {
            let target = resolve(addr).map_err(|e| fail(e.to_string()))?;
            let deadline = Instant::now() + opts.connect_timeout;
            let mut s = loop {
                match TcpStream::connect(target) {
                    Ok(s) => break s,
                    Err(e) if Instant::now() >= deadline => {
                        return Err(fail(format!("connect to rank {peer} at {addr}: {e}")))
                    }
                    Err(_) => thread::sleep(Duration::from_millis(20)),
                }
            };
            let hello = (|| {
                write_u32(&mut s, HANDSHAKE_MAGIC)?;
                write_u32(&mut s, rank as u32)?;
                Ok::<_, io::Error>((read_u32(&mut s)?, read_u32(&mut s)?))
            })()
            .map_err(|e| fail(format!("handshake with rank {peer}: {e}")))?;
            if hello != (HANDSHAKE_MAGIC, peer as u32) {
                return Err(fail(format!("rank {peer} at {addr} answered {hello:?}")));
            }
            streams[peer] = Some(s);
        }

        listener
            .set_nonblocking(true)
            .map_err(|e| fail(e.to_string()))?;
        let deadline = Instant::now() + opts.connect_timeout;
        let mut missing = n - 1 - rank;
        while missing > 0 {
            match listener.accept() {
                Ok((mut s, _)) => {
                    s.set_nonblocking(false).map_err(|e| fail(e.to_string()))?;
                    let (magic, peer) = (read_u32(&mut s), read_u32(&mut s));
                    let (Ok(HANDSHAKE_MAGIC), Ok(peer)) = (magic, peer) else {
                        continue;
                    };
                    let peer = peer as usize;
                    if peer <= rank || peer >= n || streams[peer].is_some() {
                        return Err(fail(format!("unexpected hello from rank {peer}")));
                    }
                    write_u32(&mut s, HANDSHAKE_MAGIC)
                        .and_then(|_| write_u32(&mut s, rank as u32))
                        .map_err(|e| fail(format!("handshake with rank {peer}: {e}")))?;
                    streams[peer] = Some(s);
                    missing -= 1;
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                    if Instant::now() >= deadline {
                        return Err(fail(format!("{missing} higher ranks never connected")));
                    }
                    thread::sleep(Duration::from_millis(10));
                }
                Err(e) => return Err(fail(format!("accept: {e}"))),
            }
        }

        let mut edges = Vec::with_capacity(n);
        for (peer, s) in streams.into_iter().enumerate() {
            let Some(s) = s else {
                edges.push(None);
                continue;
            };
            s.set_nodelay(true).map_err(|e| fail(e.to_string()))?;
            s.set_read_timeout(Some(opts.read_timeout))
                .map_err(|e| fail(e.to_string()))?;
            let out = s.try_clone().map_err(|e| fail(e.to_string()))?;
            let (tx, rx) = mpsc::channel::<Vec<u8>>();
            let writer = thread::Builder::new()
                .name(format!("rank{rank}-to-{peer}"))
                .spawn(move || {
                    let mut w = BufWriter::new(out);
                    for bytes in rx {
                        w.write_all(&bytes)?;
                        w.flush()?;
                    }
                    Ok(())
                })
                .map_err(|e| fail(e.to_string()))?;
            edges.push(Some(Edge {
                tx: Some(tx),
                writer: Some(writer),
                reader: BufReader::new(s),
            }));
        }
        Ok(TcpTransport {
            rank,
            n_ranks: n,
            edges,
        })
    }

    fn edge(&mut self, peer: usize) -> Result<&mut Edge, CommError> {
        let rank = self.rank;
        self.edges
            .get_mut(peer)
            .and_then(Option::as_mut)
            .ok_or(CommError::Transport {
                rank,
                reason: format!("no connection to rank {peer}"),
            })
    }

    /// Flush and join all writer threads.
    pub fn shutdown(mut self) -> Result<(), CommError> {
        self.close()
    }

    fn close(&mut self) -> Result<(), CommError> {
        let rank = self.rank;
        for edge in self.edges.iter_mut().flatten() {
            edge.tx.take();
            if let Some(h) = edge.writer.take() {
                match h.join() {
                    Ok(Ok(())) => {}
                    Ok(Err(e)) => {
                        return Err(CommError::Transport {
                            rank,
                            reason: format!("writer failed: {e}"),
                        })
                    }
                    Err(_) => {
                        return Err(CommError::Transport {
                            rank,
                            reason: "writer thread panicked".into(),
                        })
                    }
                }
            }
        }
        Ok(())
    }
}

impl Drop for TcpTransport {
    fn drop(&mut self) {
        let _ = self.close();
    }
}

impl Transport for TcpTransport {
    fn rank(&self) -> usize {
        self.rank
    }

    fn n_ranks(&self) -> usize {
        self.n_ranks
    }

    fn send(&mut self, to: usize, frame: Frame) -> Result<(), CommError> {
        let rank = self.rank;
        let bytes = encode_frame(&frame);
        let edge = self.edge(to)?;
        edge.tx
            .as_ref()
            .and_then(|tx| tx.send(bytes).ok())
            .ok_or(CommError::Transport {
                rank,
                reason: format!("connection to rank {to} closed"),
            })
    }

    fn poll_recv(&mut self, from: usize, _cx: &mut Context<'_>) -> Poll<Result<Frame, CommError>> {
        let rank = self.rank;
        let edge = match self.edge(from) {
            Ok(e) => e,
            Err(e) => return Poll::Ready(Err(e)),
        };
        Poll::Ready(
            decode_frame(&mut edge.reader).map_err(|e| CommError::Transport {
                rank,
                reason: format!("receive from rank {from}: {e}"),
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_round_trip() {
        for payload in [
            Payload::F16(vec![Half::ONE, Half::from_bits(0x8001)]),
            Payload::F32(vec![1.5, -0.0, f32::MAX]),
            Payload::F32(vec![]),
        ] {
            let f = Frame {
                primitive: Primitive::Broadcast,
                seq: 7,
                payload,
            };
            let bytes = encode_frame(&f);
            assert_eq!(decode_frame(&mut bytes.as_slice()).unwrap(), f);
        }
    }

    #[test]
    fn bad_tag_is_rejected() {
        let mut bytes = encode_frame(&Frame {
            primitive: Primitive::AllGather,
            seq: 0,
            payload: Payload::F32(vec![]),
        });
        bytes[0] = 9;
        assert!(decode_frame(&mut bytes.as_slice()).is_err());
    }

    #[test]
    fn roster_parsing() {
        let r = parse_roster("# ranks\n127.0.0.1:4000\n\nlocalhost:4001 # second\n").unwrap();
        assert_eq!(r, vec!["127.0.0.1:4000", "localhost:4001"]);
        assert!(parse_roster("").is_err());
        assert!(parse_roster("nohost").is_err());
    }
}
