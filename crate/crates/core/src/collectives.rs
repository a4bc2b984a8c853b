//! Collective primitives over a pluggable point-to-point transport, with
//! per-rank element accounting.
//!
//! Each rank runs its side of a collective as an `async` function. Sends
//! never block; a receive waits for the next frame on one directed edge.
//! The in-process [`SimNetwork`] keeps one FIFO queue per edge and
//! [`run_lockstep`] polls the rank futures round-robin on a single thread,
//! which makes a whole multi-rank run a pure function of its inputs.
//!
//! All reductions sum contributions in ascending rank order, starting from
//! rank 0's value, in fp32.

use alloc::boxed::Box;
use alloc::collections::VecDeque;
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::{Cell, RefCell};
use core::future::{poll_fn, Future};
use core::pin::Pin;
use core::task::{Context, Poll, Waker};

use crate::error::{CommError, ConfigError};
use crate::numerics::{FlatTensor, Half};
use crate::zerodp::PartitionLayout;

/// Which collective a frame or counter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u32)]
pub enum Primitive {
    ReduceScatter = 1,
    AllGather = 2,
    Broadcast = 3,
    PointReduce = 4,
}

impl Primitive {
    pub const ALL: [Primitive; 4] = [
        Primitive::ReduceScatter,
        Primitive::AllGather,
        Primitive::Broadcast,
        Primitive::PointReduce,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Primitive::ReduceScatter => "reduce_scatter",
            Primitive::AllGather => "all_gather",
            Primitive::Broadcast => "broadcast",
            Primitive::PointReduce => "point_reduce",
        }
    }

    fn index(self) -> usize {
        self as usize - 1
    }

    pub fn from_u32(v: u32) -> Option<Primitive> {
        Primitive::ALL.into_iter().find(|p| *p as u32 == v)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F16(Vec<Half>),
    F32(Vec<f32>),
}

impl Payload {
    pub fn len(&self) -> usize {
        match self {
            Payload::F16(v) => v.len(),
            Payload::F32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Payload::F16(_) => "fp16",
            Payload::F32(_) => "fp32",
        }
    }
}

/// One message on a directed edge.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub primitive: Primitive,
    /// Per-edge sequence number assigned by the sender.
    pub seq: u32,
    pub payload: Payload,
}

/// Element types that can travel in a [`Payload`].
pub trait Element: Copy + Sized {
    fn into_payload(values: Vec<Self>) -> Payload;
    fn from_payload(payload: Payload) -> Result<Vec<Self>, Payload>;
    fn widen(self) -> f32;
}

impl Element for f32 {
    fn into_payload(values: Vec<f32>) -> Payload {
        Payload::F32(values)
    }

    fn from_payload(payload: Payload) -> Result<Vec<f32>, Payload> {
        match payload {
            Payload::F32(v) => Ok(v),
            other => Err(other),
        }
    }

    fn widen(self) -> f32 {
        self
    }
}

impl Element for Half {
    fn into_payload(values: Vec<Half>) -> Payload {
        Payload::F16(values)
    }

    fn from_payload(payload: Payload) -> Result<Vec<Half>, Payload> {
        match payload {
            Payload::F16(v) => Ok(v),
            other => Err(other),
        }
    }

    fn widen(self) -> f32 {
        self.to_f32()
    }
}

/// Point-to-point message passing between ranks.
pub trait Transport {
    fn rank(&self) -> usize;
    fn n_ranks(&self) -> usize;
    fn send(&mut self, to: usize, frame: Frame) -> Result<(), CommError>;
    fn poll_recv(&mut self, from: usize, cx: &mut Context<'_>) -> Poll<Result<Frame, CommError>>;
}

impl<T: Transport + ?Sized> Transport for Box<T> {
    fn rank(&self) -> usize {
        (**self).rank()
    }

    fn n_ranks(&self) -> usize {
        (**self).n_ranks()
    }

    fn send(&mut self, to: usize, frame: Frame) -> Result<(), CommError> {
        (**self).send(to, frame)
    }

    fn poll_recv(&mut self, from: usize, cx: &mut Context<'_>) -> Poll<Result<Frame, CommError>> {
        (**self).poll_recv(from, cx)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PrimitiveStats {
    pub elements_sent: u64,
    pub elements_received: u64,
    pub messages: u64,
}

/// Per-primitive element counters for one rank.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CommStats {
    pub by_primitive: [PrimitiveStats; 4],
}

impl CommStats {
    pub fn get(&self, p: Primitive) -> &PrimitiveStats {
        &self.by_primitive[p.index()]
    }

    fn get_mut(&mut self, p: Primitive) -> &mut PrimitiveStats {
        &mut self.by_primitive[p.index()]
    }

    pub fn total_sent(&self) -> u64 {
        self.by_primitive.iter().map(|s| s.elements_sent).sum()
    }

    pub fn total_received(&self) -> u64 {
        self.by_primitive.iter().map(|s| s.elements_received).sum()
    }

    pub fn total_messages(&self) -> u64 {
        self.by_primitive.iter().map(|s| s.messages).sum()
    }

    /// Counter difference `self - earlier`.
    pub fn since(&self, earlier: &CommStats) -> CommStats {
        let mut out = CommStats::default();
        for p in Primitive::ALL {
            let (a, b) = (self.get(p), earlier.get(p));
            *out.get_mut(p) = PrimitiveStats {
                elements_sent: a.elements_sent - b.elements_sent,
                elements_received: a.elements_received - b.elements_received,
                messages: a.messages - b.messages,
            };
        }
        out
    }
}

/// Sum `values` in iteration order, starting from the first element.
#[inline]
pub fn ordered_sum<I: IntoIterator<Item = f32>>(values: I) -> f32 {
    let mut it = values.into_iter();
    let first = it.next().unwrap_or(0.0);
    it.fold(first, |acc, v| acc + v)
}

/// One rank's endpoint of a data-parallel group.
pub struct ProcessGroup<T> {
    transport: T,
    stats: CommStats,
    send_seq: Vec<u32>,
    recv_seq: Vec<u32>,
}

impl<T: Transport> ProcessGroup<T> {
    pub fn new(transport: T) -> Self {
        let n = transport.n_ranks();
        ProcessGroup {
            transport,
            stats: CommStats::default(),
            send_seq: vec![0; n],
            recv_seq: vec![0; n],
        }
    }

    pub fn rank(&self) -> usize {
        self.transport.rank()
    }

    pub fn n_ranks(&self) -> usize {
        self.transport.n_ranks()
    }

    pub fn stats(&self) -> &CommStats {
        &self.stats
    }

    pub fn transport(&self) -> &T {
        &self.transport
    }

    pub fn into_transport(self) -> T {
        self.transport
    }

    fn send(&mut self, to: usize, primitive: Primitive, payload: Payload) -> Result<(), CommError> {
        let seq = self.send_seq[to];
        self.send_seq[to] = seq.wrapping_add(1);
        let s = self.stats.get_mut(primitive);
        s.elements_sent += payload.len() as u64;
        s.messages += 1;
        self.transport.send(
            to,
            Frame {
                primitive,
                seq,
                payload,
            },
        )
    }

    async fn recv(&mut self, from: usize, primitive: Primitive) -> Result<Payload, CommError> {
        let transport = &mut self.transport;
        let frame = poll_fn(|cx| transport.poll_recv(from, cx)).await?;
        let rank = self.transport.rank();
        if frame.primitive != primitive {
            return Err(CommError::UnexpectedFrame {
                rank,
                from,
                expected: primitive.name(),
                got: frame.primitive.name(),
            });
        }
        let expected = self.recv_seq[from];
        if frame.seq != expected {
            return Err(CommError::Sequence {
                rank,
                from,
                expected,
                got: frame.seq,
            });
        }
        self.recv_seq[from] = expected.wrapping_add(1);
        self.stats.get_mut(primitive).elements_received += frame.payload.len() as u64;
        Ok(frame.payload)
    }

    async fn recv_elems<E: Element>(
        &mut self,
        from: usize,
        primitive: Primitive,
        expected_len: usize,
    ) -> Result<Vec<E>, CommError> {
        let payload = self.recv(from, primitive).await?;
        let rank = self.rank();
        let values = E::from_payload(payload).map_err(|other| CommError::UnexpectedFrame {
            rank,
            from,
            expected: E::into_payload(Vec::new()).kind(),
            got: other.kind(),
        })?;
        if values.len() != expected_len {
            return Err(CommError::LengthMismatch {
                rank,
                from,
                local: expected_len,
                peer: values.len(),
            });
        }
        Ok(values)
    }

    fn chunk_len(&self, len: usize) -> Result<usize, CommError> {
        let n = self.n_ranks();
        if !len.is_multiple_of(n) {
            return Err(CommError::NotDivisible {
                rank: self.rank(),
                len,
                n_ranks: n,
            });
        }
        Ok(len / n)
    }

    /// Reduce-scatter: rank `r` returns the fp32 sum over ranks of chunk `r`.
    ///
    /// Runs `N - 1` shifted ring rounds: in round `s` every rank sends its
    /// slice of chunk `r + s` straight to that chunk's owner. Each rank sends
    /// `len (N - 1) / N` elements, the same as a neighbour-forwarding ring,
    /// but the owner sees raw contributions and can add them in ascending
    /// rank order.
    pub async fn ring_reduce_scatter<E: Element>(
        &mut self,
        local: &[E],
    ) -> Result<FlatTensor, CommError> {
        let n = self.n_ranks();
        let rank = self.rank();
        let c = self.chunk_len(local.len())?;
        if n == 1 {
            return Ok(FlatTensor::from_vec(
                local.iter().map(|v| v.widen()).collect(),
            ));
        }
        let mut parts: Vec<Option<Vec<E>>> = vec![None; n];
        for s in 1..n {
            let dest = (rank + s) % n;
            self.send(
                dest,
                Primitive::ReduceScatter,
                E::into_payload(local[dest * c..(dest + 1) * c].to_vec()),
            )?;
            let src = (rank + n - s) % n;
            parts[src] = Some(self.recv_elems(src, Primitive::ReduceScatter, c).await?);
        }
        let own = &local[rank * c..(rank + 1) * c];
        let out = (0..c)
            .map(|i| {
                ordered_sum((0..n).map(|j| match &parts[j] {
                    Some(p) => p[i].widen(),
                    None => own[i].widen(),
                }))
            })
            .collect();
        Ok(FlatTensor::from_vec(out))
    }

    /// Ring all-gather: every rank returns all chunks concatenated in rank
    /// order. Each rank forwards `N - 1` chunks to its successor.
    pub async fn ring_all_gather<E: Element>(&mut self, owned: &[E]) -> Result<Vec<E>, CommError> {
        let n = self.n_ranks();
        let rank = self.rank();
        let c = owned.len();
        if n == 1 {
            return Ok(owned.to_vec());
        }
        let next = (rank + 1) % n;
        let prev = (rank + n - 1) % n;
        let mut chunks: Vec<Option<Vec<E>>> = vec![None; n];
        chunks[rank] = Some(owned.to_vec());
        for s in 0..n - 1 {
            let send_idx = (rank + n - s) % n;
            let outgoing = chunks[send_idx]
                .clone()
                .expect("chunk forwarded before arrival");
            self.send(next, Primitive::AllGather, E::into_payload(outgoing))?;
            let recv_idx = (rank + n - s - 1) % n;
            chunks[recv_idx] = Some(self.recv_elems(prev, Primitive::AllGather, c).await?);
        }
        Ok(chunks.into_iter().flatten().flatten().collect())
    }

    /// All-reduce as reduce-scatter followed by all-gather.
    pub async fn all_reduce<E: Element>(&mut self, local: &[E]) -> Result<FlatTensor, CommError> {
        let owned = self.ring_reduce_scatter(local).await?;
        Ok(FlatTensor::from_vec(self.ring_all_gather(&owned).await?))
    }

    /// Pipelined ring broadcast of `len` elements from `root`. `data` is
    /// read only on the root. Every rank except the root's predecessor
    /// forwards the chunk once, so `len (N - 1)` elements cross the ring.
    pub async fn ring_broadcast<E: Element>(
        &mut self,
        root: usize,
        data: Option<&[E]>,
        len: usize,
    ) -> Result<Vec<E>, CommError> {
        let n = self.n_ranks();
        let rank = self.rank();
        if root >= n {
            return Err(CommError::RootOutOfRange { root, n_ranks: n });
        }
        let next = (rank + 1) % n;
        let prev = (rank + n - 1) % n;
        let values = if rank == root {
            let values = data.expect("broadcast root must supply data").to_vec();
            if values.len() != len {
                return Err(CommError::LengthMismatch {
                    rank,
                    from: root,
                    local: len,
                    peer: values.len(),
                });
            }
            values
        } else {
            self.recv_elems(prev, Primitive::Broadcast, len).await?
        };
        if n > 1 && next != root {
            self.send(next, Primitive::Broadcast, E::into_payload(values.clone()))?;
        }
        Ok(values)
    }
}

/// A contiguous slice of one owner's partition reduced in one round.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub owner: usize,
    pub start: usize,
    pub end: usize,
}

/// Constant-size staging buffer for gradient reduction.
#[derive(Clone, Debug)]
pub struct Bucket {
    capacity_elements: usize,
    staged_start: usize,
    staged: VecDeque<Half>,
    peak: usize,
}

impl Bucket {
    pub fn new(capacity_elements: usize) -> Result<Self, ConfigError> {
        if capacity_elements == 0 {
            return Err(ConfigError::ZeroBucket);
        }
        Ok(Bucket {
            capacity_elements,
            staged_start: 0,
            staged: VecDeque::with_capacity(capacity_elements),
            peak: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity_elements
    }

    pub fn staged_len(&self) -> usize {
        self.staged.len()
    }

    /// Largest number of elements ever staged at once.
    pub fn peak(&self) -> usize {
        self.peak
    }
}

/// Reduction windows in the order gradients become available during the
/// backward pass: partitions from last to first, each cut from its top end
/// into pieces of at most `capacity` elements.
pub fn bucket_windows(layout: &PartitionLayout, capacity: usize) -> Vec<Window> {
    let mut out = Vec::new();
    for owner in (0..layout.n_ranks()).rev() {
        let r = layout.range(owner);
        let mut end = r.end;
        while end > r.start {
            let start = end.saturating_sub(capacity).max(r.start);
            out.push(Window { owner, start, end });
            end = start;
        }
    }
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BucketStats {
    pub rounds: usize,
    pub peak_staged: usize,
}

/// Streams fp16 gradients into a bucket and reduces each full window to its
/// owner, which accumulates fp32 sums for its own partition.
pub struct GradReducer {
    layout: PartitionLayout,
    bucket: Bucket,
    windows: Vec<Window>,
    next_window: usize,
    sums: Vec<f32>,
    own_grads: Vec<Half>,
    rank: usize,
    rounds: usize,
}

impl GradReducer {
    pub fn new(layout: PartitionLayout, rank: usize, capacity: usize) -> Result<Self, ConfigError> {
        let bucket = Bucket::new(capacity)?;
        let windows = bucket_windows(&layout, capacity);
        let owned = layout.range(rank).len();
        Ok(GradReducer {
            layout,
            bucket,
            windows,
            next_window: 0,
            sums: vec![0.0; owned],
            own_grads: vec![Half::ZERO; owned],
            rank,
            rounds: 0,
        })
    }

    pub fn windows(&self) -> &[Window] {
        &self.windows
    }

    /// The window the next staged values must belong to.
    pub fn current_window(&self) -> Option<Window> {
        self.windows.get(self.next_window).copied()
    }

    pub fn bucket(&self) -> &Bucket {
        &self.bucket
    }

    /// Stage gradients for `[start, start + values.len())`. Values extend
    /// the staged region downward inside the current window; once the
    /// window is covered it is reduced to its owner.
    pub async fn push<T: Transport>(
        &mut self,
        group: &mut ProcessGroup<T>,
        start: usize,
        values: &[Half],
    ) -> Result<(), CommError> {
        let w = self
            .current_window()
            .expect("gradients pushed after the last window");
        let staged_low = if self.bucket.staged.is_empty() {
            w.end
        } else {
            self.bucket.staged_start
        };
        assert!(
            start >= w.start && start + values.len() == staged_low,
            "gradient segment [{start}, {}) does not extend window {w:?}",
            start + values.len()
        );
        for &v in values.iter().rev() {
            self.bucket.staged.push_front(v);
        }
        self.bucket.staged_start = start;
        self.bucket.peak = self.bucket.peak.max(self.bucket.staged.len());
        debug_assert!(self.bucket.staged.len() <= self.bucket.capacity_elements);
        if start == w.start {
            self.flush(group, w).await?;
        }
        Ok(())
    }

    async fn flush<T: Transport>(
        &mut self,
        group: &mut ProcessGroup<T>,
        w: Window,
    ) -> Result<(), CommError> {
        let staged: Vec<Half> = self.bucket.staged.drain(..).collect();
        let len = w.end - w.start;
        if w.owner == self.rank {
            let base = self.layout.range(self.rank).start;
            let lo = w.start - base;
            self.own_grads[lo..lo + len].copy_from_slice(&staged);
            for j in 0..group.n_ranks() {
                let contribution = if j == self.rank {
                    staged.clone()
                } else {
                    group
                        .recv_elems::<Half>(j, Primitive::PointReduce, len)
                        .await?
                };
                let acc = &mut self.sums[lo..lo + len];
                if j == 0 {
                    for (a, g) in acc.iter_mut().zip(&contribution) {
                        *a = g.to_f32();
                    }
                } else {
                    for (a, g) in acc.iter_mut().zip(&contribution) {
                        *a += g.to_f32();
                    }
                }
            }
        } else {
            group.send(w.owner, Primitive::PointReduce, Payload::F16(staged))?;
        }
        self.rounds += 1;
        self.next_window += 1;
        Ok(())
    }

    pub fn is_done(&self) -> bool {
        self.next_window == self.windows.len()
    }

    /// Owner fp32 sums for this rank's partition, the rank's own fp16
    /// gradients for that partition, and staging statistics.
    pub fn finish(self) -> (FlatTensor, Vec<Half>, BucketStats) {
        assert!(
            self.is_done(),
            "reduction finished with windows outstanding"
        );
        (
            FlatTensor::from_vec(self.sums),
            self.own_grads,
            BucketStats {
                rounds: self.rounds,
                peak_staged: self.bucket.peak,
            },
        )
    }
}

/// Reduce a full fp16 gradient vector (length = padded size) so each owner
/// ends up with fp32 sums over its partition, in chunks of at most
/// `capacity` elements.
pub async fn bucketed_reduce_to_owner<T: Transport>(
    group: &mut ProcessGroup<T>,
    grads: &[Half],
    layout: &PartitionLayout,
    capacity: usize,
) -> Result<(FlatTensor, BucketStats), crate::error::Error> {
    if grads.len() != layout.padded() {
        return Err(CommError::LengthMismatch {
            rank: group.rank(),
            from: group.rank(),
            local: layout.padded(),
            peer: grads.len(),
        }
        .into());
    }
    let mut reducer = GradReducer::new(layout.clone(), group.rank(), capacity)?;
    let windows = reducer.windows().to_vec();
    for w in windows {
        reducer.push(group, w.start, &grads[w.start..w.end]).await?;
    }
    let (sums, _, stats) = reducer.finish();
    Ok((sums, stats))
}

/// Shared per-edge FIFO queues for in-process ranks.
pub struct SimNetwork {
    n_ranks: usize,
    queues: RefCell<Vec<VecDeque<Frame>>>,
    activity: Cell<u64>,
}

impl SimNetwork {
    pub fn new(n_ranks: usize) -> Rc<Self> {
        Rc::new(SimNetwork {
            n_ranks,
            queues: RefCell::new((0..n_ranks * n_ranks).map(|_| VecDeque::new()).collect()),
            activity: Cell::new(0),
        })
    }

    /// One transport endpoint per rank.
    pub fn endpoints(self: &Rc<Self>) -> Vec<SimTransport> {
        (0..self.n_ranks)
            .map(|rank| SimTransport {
                rank,
                net: Rc::clone(self),
            })
            .collect()
    }

    /// Frames sent but not yet received.
    pub fn in_flight(&self) -> usize {
        self.queues.borrow().iter().map(VecDeque::len).sum()
    }

    fn activity(&self) -> u64 {
        self.activity.get()
    }
}

pub struct SimTransport {
    rank: usize,
    net: Rc<SimNetwork>,
}

impl Transport for SimTransport {
    fn rank(&self) -> usize {
        self.rank
    }

    fn n_ranks(&self) -> usize {
        self.net.n_ranks
    }

    fn send(&mut self, to: usize, frame: Frame) -> Result<(), CommError> {
        let n = self.net.n_ranks;
        if to >= n || to == self.rank {
            return Err(CommError::Transport {
                rank: self.rank,
                reason: alloc::format!("invalid destination {to}"),
            });
        }
        self.net.queues.borrow_mut()[self.rank * n + to].push_back(frame);
        self.net.activity.set(self.net.activity.get() + 1);
        Ok(())
    }

    fn poll_recv(&mut self, from: usize, _cx: &mut Context<'_>) -> Poll<Result<Frame, CommError>> {
        let n = self.net.n_ranks;
        match self.net.queues.borrow_mut()[from * n + self.rank].pop_front() {
            Some(frame) => {
                self.net.activity.set(self.net.activity.get() + 1);
                Poll::Ready(Ok(frame))
            }
            None => Poll::Pending,
        }
    }
}

/// Drive one future per rank to completion on the current thread, polling
/// ranks in ascending order each sweep. If a full sweep makes no progress,
/// ranks still waiting report [`CommError::Deadlock`].
pub fn run_lockstep<'a, O>(
    net: &SimNetwork,
    futures: Vec<Pin<Box<dyn Future<Output = O> + 'a>>>,
) -> Vec<Result<O, CommError>> {
    let mut futures: Vec<Option<Pin<Box<dyn Future<Output = O> + 'a>>>> =
        futures.into_iter().map(Some).collect();
    let mut outputs: Vec<Option<O>> = futures.iter().map(|_| None).collect();
    let mut cx = Context::from_waker(Waker::noop());
    let mut remaining = futures.len();
    while remaining > 0 {
        let before = net.activity();
        let mut finished = false;
        for (slot, out) in futures.iter_mut().zip(outputs.iter_mut()) {
            if let Some(fut) = slot {
                if let Poll::Ready(v) = fut.as_mut().poll(&mut cx) {
                    *out = Some(v);
                    *slot = None;
                    remaining -= 1;
                    finished = true;
                }
            }
        }
        if !finished && net.activity() == before && remaining > 0 {
            let pending = remaining;
            return outputs
                .into_iter()
                .map(|o| o.ok_or(CommError::Deadlock { pending }))
                .collect();
        }
    }
    outputs
        .into_iter()
        .map(|o| Ok(o.expect("all ranks finished")))
        .collect()
}

/// Poll a future that never waits on other local tasks (e.g. one backed by
/// blocking sockets) to completion.
pub fn block_on<F: Future>(fut: F) -> F::Output {
    let mut fut = core::pin::pin!(fut);
    let mut cx = Context::from_waker(Waker::noop());
    loop {
        if let Poll::Ready(v) = fut.as_mut().poll(&mut cx) {
            return v;
        }
        core::hint::spin_loop();
    }
}

/// Run the same collective on every rank of a fresh in-process group.
pub fn run_sim<'a, R, F, Fut>(n_ranks: usize, mut f: F) -> Result<Vec<(R, CommStats)>, CommError>
where
    F: FnMut(usize, ProcessGroup<SimTransport>) -> Fut,
    Fut: Future<Output = (R, ProcessGroup<SimTransport>)> + 'a,
    R: 'a,
{
    let net = SimNetwork::new(n_ranks);
    type RankFuture<'a, R> = Pin<Box<dyn Future<Output = (R, ProcessGroup<SimTransport>)> + 'a>>;
    let futures: Vec<RankFuture<'a, R>> = net
        .endpoints()
        .into_iter()
        .enumerate()
        .map(|(rank, t)| Box::pin(f(rank, ProcessGroup::new(t))) as RankFuture<'a, R>)
        .collect();
    let results = run_lockstep(&net, futures)
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    Ok(results
        .into_iter()
        .map(|(r, g)| {
            let stats = *g.stats();
            (r, stats)
        })
        .collect())
}
