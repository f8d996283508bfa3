//! Deterministic in-process SPMD fabric.
//!
//! `spmd_run` launches one worker thread per rank, all executing the same
//! program parameterized by rank id. Point-to-point messages are buffered
//! at send time (the sender's copy is immediately reusable) and matched
//! FIFO per `(src, dst, tag)`, so counters and results depend only on the
//! program, never on thread scheduling.
//!
//! Byte counters account payload only, not tags or envelopes: the scaling
//! claims the fabric exists to measure are about data volume.

use std::collections::VecDeque;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::Serialize;

use crate::dist::ProcessGrid;
use crate::error::{Error, Result};
use crate::layout::BlockedMatrix;

/// Anything the fabric can ship between ranks.
pub trait Message: Send + 'static {
    /// Payload size in bytes as seen by the per-rank counters.
    fn payload_bytes(&self) -> usize;
}

impl Message for Vec<f64> {
    fn payload_bytes(&self) -> usize {
        self.len() * std::mem::size_of::<f64>()
    }
}

impl Message for BlockedMatrix {
    fn payload_bytes(&self) -> usize {
        self.arena().len() * std::mem::size_of::<f64>()
    }
}

struct Envelope<M> {
    tag: u64,
    payload: M,
}

struct Channel<M> {
    queue: Mutex<VecDeque<Envelope<M>>>,
    ready: Condvar,
}

impl<M> Default for Channel<M> {
    fn default() -> Self {
        Self {
            queue: Mutex::new(VecDeque::new()),
            ready: Condvar::new(),
        }
    }
}

struct BarrierState {
    arrived: usize,
    generation: u64,
}

/// Per-rank traffic counters.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct RankCounters {
    pub sent_bytes: u64,
    pub recv_bytes: u64,
    pub sent_msgs: u64,
    pub recv_msgs: u64,
}

/// Counters for every rank of one SPMD run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TransportStats {
    pub per_rank: Vec<RankCounters>,
}

impl TransportStats {
    pub fn total_sent_bytes(&self) -> u64 {
        self.per_rank.iter().map(|r| r.sent_bytes).sum()
    }

    pub fn total_recv_bytes(&self) -> u64 {
        self.per_rank.iter().map(|r| r.recv_bytes).sum()
    }
}

/// Knobs for one SPMD run.
#[derive(Debug, Clone)]
pub struct TransportConfig {
    /// Window of global quiescence (all live ranks blocked, no message
    /// delivered) after which blocked waits give up with `Deadlock`.
    pub deadlock_timeout: Duration,
}

impl Default for TransportConfig {
    fn default() -> Self {
        Self {
            deadlock_timeout: Duration::from_secs(5),
        }
    }
}

struct Fabric<M> {
    p: usize,
    channels: Vec<Channel<M>>,
    barrier: Mutex<BarrierState>,
    barrier_ready: Condvar,
    sent_bytes: Vec<AtomicU64>,
    recv_bytes: Vec<AtomicU64>,
    sent_msgs: Vec<AtomicU64>,
    recv_msgs: Vec<AtomicU64>,
    /// Bumped on every delivery and barrier release; a stable value across a
    /// full timeout window of global blockage means nobody can make progress.
    activity: AtomicU64,
    blocked: AtomicUsize,
    live: AtomicUsize,
    poisoned: AtomicBool,
    timeout: Duration,
}

impl<M: Message> Fabric<M> {
    fn new(p: usize, timeout: Duration) -> Self {
        Self {
            p,
            channels: (0..p * p).map(|_| Channel::default()).collect(),
            barrier: Mutex::new(BarrierState {
                arrived: 0,
                generation: 0,
            }),
            barrier_ready: Condvar::new(),
            sent_bytes: (0..p).map(|_| AtomicU64::new(0)).collect(),
            recv_bytes: (0..p).map(|_| AtomicU64::new(0)).collect(),
            sent_msgs: (0..p).map(|_| AtomicU64::new(0)).collect(),
            recv_msgs: (0..p).map(|_| AtomicU64::new(0)).collect(),
            activity: AtomicU64::new(0),
            blocked: AtomicUsize::new(0),
            live: AtomicUsize::new(p),
            poisoned: AtomicBool::new(false),
            timeout,
        }
    }

    fn channel(&self, src: usize, dst: usize) -> &Channel<M> {
        &self.channels[src * self.p + dst]
    }

    fn poison(&self) {
        self.poisoned.store(true, Ordering::SeqCst);
        for ch in &self.channels {
            ch.ready.notify_all();
        }
        self.barrier_ready.notify_all();
    }

    /// True when every live rank other than the caller is blocked.
    fn all_others_blocked(&self) -> bool {
        self.blocked.load(Ordering::SeqCst) + 1 >= self.live.load(Ordering::SeqCst)
    }

    fn stats(&self) -> TransportStats {
        TransportStats {
            per_rank: (0..self.p)
                .map(|r| RankCounters {
                    sent_bytes: self.sent_bytes[r].load(Ordering::SeqCst),
                    recv_bytes: self.recv_bytes[r].load(Ordering::SeqCst),
                    sent_msgs: self.sent_msgs[r].load(Ordering::SeqCst),
                    recv_msgs: self.recv_msgs[r].load(Ordering::SeqCst),
                })
                .collect(),
        }
    }
}

/// Completed-at-post send handle; payloads are copied into the destination
/// queue when `isend` returns.
#[must_use]
pub struct SendHandle {
    _completed: (),
}

/// Pending receive; consume with [`RankCtx::wait`].
#[must_use]
pub struct RecvHandle {
    src: usize,
    tag: u64,
}

/// One rank's view of the fabric inside an SPMD program.
pub struct RankCtx<'f, M: Message> {
    fabric: &'f Fabric<M>,
    rank: usize,
    coords: (usize, usize),
}

impl<'f, M: Message> RankCtx<'f, M> {
    pub fn rank(&self) -> usize {
        self.rank
    }

    /// Grid coordinates (row, col) of this rank.
    pub fn coords(&self) -> (usize, usize) {
        self.coords
    }

    pub fn nranks(&self) -> usize {
        self.fabric.p
    }

    /// Nonblocking send. The payload is deposited into the destination's
    /// queue immediately, so local buffers may be reused right away and
    /// computation can proceed while the receiver is still busy.
    pub fn isend(&self, dest: usize, tag: u64, payload: M) -> Result<SendHandle> {
        if dest >= self.fabric.p {
            return Err(Error::IndexOutOfRange(format!(
                "send to rank {dest} of {}",
                self.fabric.p
            )));
        }
        let bytes = payload.payload_bytes() as u64;
        let ch = self.fabric.channel(self.rank, dest);
        {
            let mut q = ch.queue.lock().unwrap();
            q.push_back(Envelope { tag, payload });
            self.fabric.sent_bytes[self.rank].fetch_add(bytes, Ordering::SeqCst);
            self.fabric.sent_msgs[self.rank].fetch_add(1, Ordering::SeqCst);
            self.fabric.activity.fetch_add(1, Ordering::SeqCst);
            ch.ready.notify_all();
        }
        Ok(SendHandle { _completed: () })
    }

    /// Posts a receive for the next message from `src` carrying `tag`.
    pub fn irecv(&self, src: usize, tag: u64) -> RecvHandle {
        RecvHandle { src, tag }
    }

    /// Blocks until the matching message exists; FIFO per `(src, tag)`.
    pub fn wait(&self, h: RecvHandle) -> Result<M> {
        if h.src >= self.fabric.p {
            return Err(Error::IndexOutOfRange(format!(
                "receive from rank {} of {}",
                h.src, self.fabric.p
            )));
        }
        let fab = self.fabric;
        let ch = fab.channel(h.src, self.rank);
        let mut q = ch.queue.lock().unwrap();
        loop {
            if let Some(pos) = q.iter().position(|e| e.tag == h.tag) {
                let env = q.remove(pos).unwrap();
                let bytes = env.payload.payload_bytes() as u64;
                fab.recv_bytes[self.rank].fetch_add(bytes, Ordering::SeqCst);
                fab.recv_msgs[self.rank].fetch_add(1, Ordering::SeqCst);
                fab.activity.fetch_add(1, Ordering::SeqCst);
                return Ok(env.payload);
            }
            if fab.poisoned.load(Ordering::SeqCst) {
                return Err(Error::Deadlock(format!(
                    "rank {} gave up waiting for tag {} from rank {}",
                    self.rank, h.tag, h.src
                )));
            }
            let before = fab.activity.load(Ordering::SeqCst);
            fab.blocked.fetch_add(1, Ordering::SeqCst);
            let (guard, timed_out) = ch.ready.wait_timeout(q, fab.timeout).unwrap();
            fab.blocked.fetch_sub(1, Ordering::SeqCst);
            q = guard;
            if timed_out.timed_out()
                && fab.activity.load(Ordering::SeqCst) == before
                && fab.all_others_blocked()
            {
                fab.poison();
                return Err(Error::Deadlock(format!(
                    "quiescence with unmatched receive: rank {} waits for tag {} from rank {}",
                    self.rank, h.tag, h.src
                )));
            }
        }
    }

    /// Sends complete at post time; provided for symmetry with `wait`.
    pub fn wait_send(&self, _h: SendHandle) -> Result<()> {
        Ok(())
    }

    /// Collective barrier over all ranks.
    pub fn barrier(&self) -> Result<()> {
        let fab = self.fabric;
        let mut st = fab.barrier.lock().unwrap();
        let gen = st.generation;
        st.arrived += 1;
        if st.arrived == fab.p {
            st.arrived = 0;
            st.generation += 1;
            fab.activity.fetch_add(1, Ordering::SeqCst);
            fab.barrier_ready.notify_all();
            return Ok(());
        }
        loop {
            if st.generation != gen {
                return Ok(());
            }
            if fab.poisoned.load(Ordering::SeqCst) {
                return Err(Error::Deadlock(format!(
                    "rank {} gave up in barrier",
                    self.rank
                )));
            }
            let before = fab.activity.load(Ordering::SeqCst);
            fab.blocked.fetch_add(1, Ordering::SeqCst);
            let (guard, timed_out) = fab.barrier_ready.wait_timeout(st, fab.timeout).unwrap();
            fab.blocked.fetch_sub(1, Ordering::SeqCst);
            st = guard;
            if timed_out.timed_out()
                && fab.activity.load(Ordering::SeqCst) == before
                && fab.all_others_blocked()
                && st.generation == gen
            {
                fab.poison();
                return Err(Error::Deadlock(format!(
                    "quiescence inside barrier: rank {} of {} arrived",
                    self.rank, st.arrived
                )));
            }
        }
    }
}

/// Runs `program` on every rank of `grid` concurrently and returns the
/// per-rank results together with the traffic counters.
pub fn spmd_run<M, T, F>(grid: &ProcessGrid, program: F) -> Result<(Vec<T>, TransportStats)>
where
    M: Message,
    T: Send,
    F: Fn(&RankCtx<'_, M>) -> Result<T> + Sync,
{
    spmd_run_with(grid, &TransportConfig::default(), program)
}

/// [`spmd_run`] with explicit transport configuration.
pub fn spmd_run_with<M, T, F>(
    grid: &ProcessGrid,
    cfg: &TransportConfig,
    program: F,
) -> Result<(Vec<T>, TransportStats)>
where
    M: Message,
    T: Send,
    F: Fn(&RankCtx<'_, M>) -> Result<T> + Sync,
{
    let p = grid.size();
    let fabric = Fabric::<M>::new(p, cfg.deadlock_timeout);
    let program = &program;
    let fabric_ref = &fabric;

    let outcomes: Vec<std::thread::Result<Result<T>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..p)
            .map(|rank| {
                s.spawn(move || {
                    let ctx = RankCtx {
                        fabric: fabric_ref,
                        rank,
                        coords: grid.coords_of(rank),
                    };
                    let out = catch_unwind(AssertUnwindSafe(|| program(&ctx)));
                    fabric_ref.live.fetch_sub(1, Ordering::SeqCst);
                    if out.is_err() {
                        // A dead rank can never match anybody's receive.
                        fabric_ref.poison();
                    }
                    out
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("rank thread itself never panics"))
            .collect()
    });

    let mut results = Vec::with_capacity(p);
    let mut failure: Option<Error> = None;
    for (rank, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(Ok(v)) => results.push(v),
            Ok(Err(e)) => {
                if failure.is_none() {
                    failure = Some(e);
                }
            }
            Err(payload) => {
                let msg = payload
                    .downcast_ref::<&str>()
                    .map(|s| s.to_string())
                    .or_else(|| payload.downcast_ref::<String>().cloned())
                    .unwrap_or_else(|| "opaque panic payload".into());
                // Panics trump secondary deadlock reports from other ranks.
                failure = Some(Error::RankPanic(rank, msg));
            }
        }
    }
    if let Some(e) = failure {
        return Err(e);
    }
    Ok((results, fabric.stats()))
}
