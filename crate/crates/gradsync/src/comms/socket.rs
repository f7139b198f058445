//! Socket transport for the collectives.
//!
//! Wire format, bit-exact: every frame is
//!
//! ```text
//! [u32 LE message tag][u32 LE sender rank][u64 LE payload byte length]
//! [payload: little-endian IEEE-754 f64 x N]
//! ```
//!
//! with tags 1 = chunk, 2 = barrier, 3 = hello. Rendezvous: rank 0 listens
//! on the configured address; every other rank connects and sends a hello
//! frame carrying its rank. Rank 0 then relays the logical ring: a chunk
//! frame from rank `i` is delivered to rank `(i + 1) mod world`, so the
//! ring schedule from [`super::ring`] runs unchanged even though only rank
//! 0 accepts connections.

use super::ring::{
    chunk_ranges, gather_recv_chunk, gather_send_chunk, scatter_recv_chunk, scatter_send_chunk,
};
use super::CommError;
use std::collections::VecDeque;
use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

pub const TAG_CHUNK: u32 = 1;
pub const TAG_BARRIER: u32 = 2;
pub const TAG_HELLO: u32 = 3;

/// Frames larger than this are treated as stream corruption.
const MAX_PAYLOAD_BYTES: u64 = 1 << 31;

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub tag: u32,
    pub rank: u32,
    pub payload: Vec<f64>,
}

pub fn write_frame(w: &mut impl Write, tag: u32, rank: u32, payload: &[f64]) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(16 + payload.len() * 8);
    buf.extend_from_slice(&tag.to_le_bytes());
    buf.extend_from_slice(&rank.to_le_bytes());
    buf.extend_from_slice(&((payload.len() * 8) as u64).to_le_bytes());
    for v in payload {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

pub fn read_frame(r: &mut impl Read) -> std::io::Result<Frame> {
    let mut head = [0u8; 16];
    r.read_exact(&mut head)?;
    let tag = u32::from_le_bytes(head[0..4].try_into().unwrap());
    let rank = u32::from_le_bytes(head[4..8].try_into().unwrap());
    let byte_len = u64::from_le_bytes(head[8..16].try_into().unwrap());
    if byte_len % 8 != 0 || byte_len > MAX_PAYLOAD_BYTES {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            format!("bad payload length {byte_len}"),
        ));
    }
    let mut raw = vec![0u8; byte_len as usize];
    r.read_exact(&mut raw)?;
    let payload = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Frame { tag, rank, payload })
}

fn transport_err(ctx: &str, e: impl std::fmt::Display) -> CommError {
    CommError::Transport(format!("{ctx}: {e}"))
}

struct HubShared {
    /// Frames relayed to rank 0 itself (sent by rank world-1).
    inbox: Mutex<VecDeque<Frame>>,
    inbox_cv: Condvar,
    /// Barrier frames counted by the relay threads.
    barrier: Mutex<usize>,
    barrier_cv: Condvar,
    dead: Mutex<Option<String>>,
}

impl HubShared {
    fn mark_dead(&self, msg: String) {
        let mut dead = self.dead.lock().unwrap();
        if dead.is_none() {
            *dead = Some(msg);
        }
        drop(dead);
        self.inbox_cv.notify_all();
        self.barrier_cv.notify_all();
    }

    fn check_dead(&self) -> Result<(), CommError> {
        if let Some(msg) = self.dead.lock().unwrap().as_ref() {
            return Err(CommError::Transport(msg.clone()));
        }
        Ok(())
    }
}

struct Hub {
    world: usize,
    /// Write halves to every peer, indexed by rank (slot 0 unused).
    writers: Vec<Option<Arc<Mutex<TcpStream>>>>,
    shared: Arc<HubShared>,
}

struct Peer {
    rank: usize,
    world: usize,
    stream: TcpStream,
}

/// One rank's socket endpoint: rank 0 hosts the relay hub, every other
/// rank holds a single connection to it.
pub enum SocketLink {
    Hub(Hub),
    Peer(Peer),
}

impl SocketLink {
    /// Connects the full group. Rank 0 binds `addr`; other ranks retry
    /// connecting until the hub is up (10 s deadline).
    pub fn establish(addr: &str, rank: usize, world: usize) -> Result<Self, CommError> {
        assert!(world >= 2, "socket transport needs world >= 2");
        assert!(rank < world);
        if rank == 0 {
            let listener =
                TcpListener::bind(addr).map_err(|e| transport_err("hub bind", e))?;
            Self::hub_from_listener(listener, world)
        } else {
            let deadline = Instant::now() + Duration::from_secs(10);
            let stream = loop {
                match TcpStream::connect(addr) {
                    Ok(s) => break s,
                    Err(e) => {
                        if Instant::now() >= deadline {
                            return Err(transport_err("peer connect", e));
                        }
                        std::thread::sleep(Duration::from_millis(20));
                    }
                }
            };
            stream
                .set_nodelay(true)
                .map_err(|e| transport_err("set_nodelay", e))?;
            let mut s = stream;
            write_frame(&mut s, TAG_HELLO, rank as u32, &[])
                .map_err(|e| transport_err("hello", e))?;
            Ok(SocketLink::Peer(Peer {
                rank,
                world,
                stream: s,
            }))
        }
    }

    /// Builds the hub from an already-bound listener (lets tests use an
    /// OS-assigned port).
    pub fn hub_from_listener(listener: TcpListener, world: usize) -> Result<Self, CommError> {
        let mut writers: Vec<Option<Arc<Mutex<TcpStream>>>> = (0..world).map(|_| None).collect();
        let shared = Arc::new(HubShared {
            inbox: Mutex::new(VecDeque::new()),
            inbox_cv: Condvar::new(),
            barrier: Mutex::new(0),
            barrier_cv: Condvar::new(),
            dead: Mutex::new(None),
        });
        let mut readers = Vec::new();
        for _ in 1..world {
            let (stream, _) = listener
                .accept()
                .map_err(|e| transport_err("hub accept", e))?;
            stream
                .set_nodelay(true)
                .map_err(|e| transport_err("set_nodelay", e))?;
            let mut read_half = stream
                .try_clone()
                .map_err(|e| transport_err("stream clone", e))?;
            let hello = read_frame(&mut read_half).map_err(|e| transport_err("hello read", e))?;
            if hello.tag != TAG_HELLO {
                return Err(CommError::Protocol(format!(
                    "expected hello frame, got tag {}",
                    hello.tag
                )));
            }
            let peer_rank = hello.rank as usize;
            if peer_rank == 0 || peer_rank >= world || writers[peer_rank].is_some() {
                return Err(CommError::Protocol(format!(
                    "bad or duplicate hello rank {peer_rank}"
                )));
            }
            writers[peer_rank] = Some(Arc::new(Mutex::new(stream)));
            readers.push((peer_rank, read_half));
        }

        for (peer_rank, read_half) in readers {
            let shared = shared.clone();
            let dest = (peer_rank + 1) % world;
            let forward = if dest == 0 {
                None
            } else {
                Some(writers[dest].as_ref().expect("all peers connected").clone())
            };
            std::thread::spawn(move || {
                hub_relay_loop(peer_rank, read_half, forward, shared);
            });
        }

        Ok(SocketLink::Hub(Hub {
            world,
            writers,
            shared,
        }))
    }

    fn world(&self) -> usize {
        match self {
            SocketLink::Hub(h) => h.world,
            SocketLink::Peer(p) => p.world,
        }
    }

    fn rank(&self) -> usize {
        match self {
            SocketLink::Hub(_) => 0,
            SocketLink::Peer(p) => p.rank,
        }
    }

    fn send_next(&mut self, payload: &[f64]) -> Result<(), CommError> {
        match self {
            SocketLink::Hub(h) => {
                let writer = h.writers[1].as_ref().expect("rank 1 connected");
                let mut s = writer.lock().unwrap();
                write_frame(&mut *s, TAG_CHUNK, 0, payload)
                    .map_err(|e| transport_err("hub send", e))
            }
            SocketLink::Peer(p) => write_frame(&mut p.stream, TAG_CHUNK, p.rank as u32, payload)
                .map_err(|e| transport_err("peer send", e)),
        }
    }

    fn recv_prev(&mut self) -> Result<Frame, CommError> {
        let prev = (self.rank() + self.world() - 1) % self.world();
        let frame = match self {
            SocketLink::Hub(h) => {
                let mut inbox = h.shared.inbox.lock().unwrap();
                loop {
                    if let Some(f) = inbox.pop_front() {
                        break f;
                    }
                    h.shared.check_dead()?;
                    inbox = h.shared.inbox_cv.wait(inbox).unwrap();
                }
            }
            SocketLink::Peer(p) => {
                read_frame(&mut p.stream).map_err(|e| transport_err("peer recv", e))?
            }
        };
        if frame.tag != TAG_CHUNK {
            return Err(CommError::Protocol(format!(
                "expected chunk frame, got tag {}",
                frame.tag
            )));
        }
        if frame.rank as usize != prev {
            return Err(CommError::Protocol(format!(
                "expected chunk from rank {prev}, got rank {}",
                frame.rank
            )));
        }
        Ok(frame)
    }

    /// Runs the ring schedule over the wire and replaces `data` with the
    /// elementwise mean. Bitwise identical to the in-process reduction.
    pub fn ring_allreduce_mean(&mut self, data: &mut [f64]) -> Result<(), CommError> {
        let world = self.world();
        let rank = self.rank();
        let ranges = chunk_ranges(data.len(), world);
        let mut buf = data.to_vec();

        for step in 0..world - 1 {
            let send_range = ranges[scatter_send_chunk(rank, step, world)].clone();
            self.send_next(&buf[send_range])?;
            let incoming = self.recv_prev()?;
            let recv_range = ranges[scatter_recv_chunk(rank, step, world)].clone();
            if incoming.payload.len() != recv_range.len() {
                return Err(CommError::Protocol(format!(
                    "chunk length {} does not match range {:?}",
                    incoming.payload.len(),
                    recv_range
                )));
            }
            for (dst, src) in buf[recv_range].iter_mut().zip(&incoming.payload) {
                *dst += src;
            }
        }

        let owned = ranges[(rank + 1) % world].clone();
        for v in &mut buf[owned] {
            *v /= world as f64;
        }

        for step in 0..world - 1 {
            let send_range = ranges[gather_send_chunk(rank, step, world)].clone();
            self.send_next(&buf[send_range])?;
            let incoming = self.recv_prev()?;
            let recv_range = ranges[gather_recv_chunk(rank, step, world)].clone();
            if incoming.payload.len() != recv_range.len() {
                return Err(CommError::Protocol(format!(
                    "chunk length {} does not match range {:?}",
                    incoming.payload.len(),
                    recv_range
                )));
            }
            buf[recv_range].copy_from_slice(&incoming.payload);
        }

        data.copy_from_slice(&buf);
        Ok(())
    }

    /// Barrier: peers report to the hub; the hub releases everyone once all
    /// world-1 reports arrived.
    pub fn barrier(&mut self) -> Result<(), CommError> {
        match self {
            SocketLink::Hub(h) => {
                let mut count = h.shared.barrier.lock().unwrap();
                while *count < h.world - 1 {
                    h.shared.check_dead()?;
                    count = h.shared.barrier_cv.wait(count).unwrap();
                }
                *count -= h.world - 1;
                drop(count);
                for writer in h.writers.iter().flatten() {
                    let mut s = writer.lock().unwrap();
                    write_frame(&mut *s, TAG_BARRIER, 0, &[])
                        .map_err(|e| transport_err("barrier release", e))?;
                }
                Ok(())
            }
            SocketLink::Peer(p) => {
                write_frame(&mut p.stream, TAG_BARRIER, p.rank as u32, &[])
                    .map_err(|e| transport_err("barrier send", e))?;
                let frame =
                    read_frame(&mut p.stream).map_err(|e| transport_err("barrier recv", e))?;
                if frame.tag != TAG_BARRIER {
                    return Err(CommError::Protocol(format!(
                        "expected barrier release, got tag {}",
                        frame.tag
                    )));
                }
                Ok(())
            }
        }
    }
}

fn hub_relay_loop(
    peer_rank: usize,
    mut read_half: TcpStream,
    forward: Option<Arc<Mutex<TcpStream>>>,
    shared: Arc<HubShared>,
) {
    loop {
        let frame = match read_frame(&mut read_half) {
            Ok(f) => f,
            Err(e) => {
                // EOF after shutdown is normal; anything mid-collective
                // surfaces as a transport error on the next wait.
                shared.mark_dead(format!("peer {peer_rank} disconnected: {e}"));
                return;
            }
        };
        match frame.tag {
            TAG_CHUNK => match &forward {
                Some(writer) => {
                    let mut s = writer.lock().unwrap();
                    if let Err(e) = write_frame(&mut *s, frame.tag, frame.rank, &frame.payload) {
                        shared.mark_dead(format!("relay from {peer_rank} failed: {e}"));
                        return;
                    }
                }
                None => {
                    shared.inbox.lock().unwrap().push_back(frame);
                    shared.inbox_cv.notify_all();
                }
            },
            TAG_BARRIER => {
                *shared.barrier.lock().unwrap() += 1;
                shared.barrier_cv.notify_all();
            }
            other => {
                shared.mark_dead(format!("unexpected tag {other} from peer {peer_rank}"));
                return;
            }
        }
    }
}
