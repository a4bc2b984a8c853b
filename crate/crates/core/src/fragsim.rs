//! Free-list heap simulator for short- and long-lived allocations.
//!
//! The interleaved policy places every request first-fit in one heap. The
//! defragmenting policy reserves a contiguous region at the bottom of the
//! heap, sized from the trace's long-lived total, and serves long-lived
//! requests there; short-lived requests use the rest.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Lifetime {
    Short,
    Long,
}

impl Lifetime {
    pub fn name(self) -> &'static str {
        match self {
            Lifetime::Short => "short",
            Lifetime::Long => "long",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AllocEvent {
    Alloc {
        id: String,
        size: u64,
        lifetime: Lifetime,
    },
    Free {
        id: String,
    },
}

impl AllocEvent {
    pub fn alloc(id: impl Into<String>, size: u64, lifetime: Lifetime) -> Self {
        AllocEvent::Alloc {
            id: id.into(),
            size,
            lifetime,
        }
    }

    pub fn free(id: impl Into<String>) -> Self {
        AllocEvent::Free { id: id.into() }
    }
}

impl fmt::Display for AllocEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AllocEvent::Alloc { id, size, lifetime } => {
                write!(f, "alloc {id} {size} {}", lifetime.name())
            }
            AllocEvent::Free { id } => write!(f, "free {id}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum TraceError {
    #[error("event {index}: free of unknown id {id:?}")]
    UnknownId { index: usize, id: String },
    #[error("event {index}: id {id:?} freed twice")]
    DoubleFree { index: usize, id: String },
    #[error("event {index}: id {id:?} is already live")]
    DuplicateId { index: usize, id: String },
    #[error("event {index}: zero-sized allocation {id:?}")]
    ZeroSize { index: usize, id: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Policy {
    Interleaved,
    MdDefrag,
}

impl Policy {
    pub fn name(self) -> &'static str {
        match self {
            Policy::Interleaved => "interleaved",
            Policy::MdDefrag => "md_defrag",
        }
    }
}

impl core::str::FromStr for Policy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "interleaved" => Ok(Policy::Interleaved),
            "md_defrag" | "md" => Ok(Policy::MdDefrag),
            other => Err(alloc::format!(
                "unknown policy {other:?} (expected interleaved or md_defrag)"
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Fit {
    #[default]
    First,
    Best,
}

/// Sorted, coalesced free list over `[base, base + capacity)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FreeList {
    base: u64,
    capacity: u64,
    /// `(offset, len)` holes.
    holes: Vec<(u64, u64)>,
    fit: Fit,
}

impl FreeList {
    pub fn new(base: u64, capacity: u64, fit: Fit) -> Self {
        let holes = if capacity > 0 {
            alloc::vec![(base, capacity)]
        } else {
            Vec::new()
        };
        FreeList {
            base,
            capacity,
            holes,
            fit,
        }
    }

    pub fn holes(&self) -> &[(u64, u64)] {
        &self.holes
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    pub fn free_bytes(&self) -> u64 {
        self.holes.iter().map(|h| h.1).sum()
    }

    pub fn allocated_bytes(&self) -> u64 {
        self.capacity - self.free_bytes()
    }

    pub fn largest_hole(&self) -> u64 {
        self.holes.iter().map(|h| h.1).max().unwrap_or(0)
    }

    /// Place `size` bytes; returns the offset and the number of holes examined.
    pub fn allocate(&mut self, size: u64) -> (Option<u64>, u64) {
        let mut examined = 0;
        let mut chosen: Option<usize> = None;
        for (i, &(_, len)) in self.holes.iter().enumerate() {
            examined += 1;
            if len < size {
                continue;
            }
            match self.fit {
                Fit::First => {
                    chosen = Some(i);
                    break;
                }
                Fit::Best => {
                    if chosen.is_none_or(|c| len < self.holes[c].1) {
                        chosen = Some(i);
                    }
                }
            }
        }
        let Some(i) = chosen else {
            return (None, examined);
        };
        let (offset, len) = self.holes[i];
        if len == size {
            self.holes.remove(i);
        } else {
            self.holes[i] = (offset + size, len - size);
        }
        (Some(offset), examined)
    }

    /// Return `[offset, offset + size)` and merge with neighbouring holes.
    pub fn release(&mut self, offset: u64, size: u64) {
        debug_assert!(offset >= self.base && offset + size <= self.base + self.capacity);
        let i = self.holes.partition_point(|h| h.0 < offset);
        self.holes.insert(i, (offset, size));
        if i + 1 < self.holes.len() && self.holes[i].0 + self.holes[i].1 == self.holes[i + 1].0 {
            self.holes[i].1 += self.holes[i + 1].1;
            self.holes.remove(i + 1);
        }
        if i > 0 && self.holes[i - 1].0 + self.holes[i - 1].1 == self.holes[i].0 {
            self.holes[i - 1].1 += self.holes[i].1;
            self.holes.remove(i);
        }
    }
}

/// Heap under one placement policy.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HeapModel {
    pub capacity: u64,
    pub policy: Policy,
    pub fit: Fit,
}

impl HeapModel {
    pub fn new(capacity: u64, policy: Policy) -> Self {
        HeapModel {
            capacity,
            policy,
            fit: Fit::First,
        }
    }

    pub fn with_fit(mut self, fit: Fit) -> Self {
        self.fit = fit;
        self
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FragReport {
    pub events: usize,
    pub peak_allocated: u64,
    pub oom: bool,
    pub failing_request: Option<u64>,
    pub free_at_failure: Option<u64>,
    pub max_contiguous_at_failure: Option<u64>,
    /// Holes visited by all placement searches.
    pub holes_examined: u64,
    /// Bytes reserved for long-lived allocations (defragmenting policy).
    pub reserved: u64,
    /// Free bytes when the run stopped.
    pub free_final: u64,
    /// Largest block a short-lived request could get when the run stopped.
    pub largest_free_final: u64,
}

/// Check that every free names a live id and no id is allocated twice
/// while live.
pub fn validate_trace(trace: &[AllocEvent]) -> Result<(), TraceError> {
    let mut live: BTreeMap<&str, bool> = BTreeMap::new();
    for (index, ev) in trace.iter().enumerate() {
        match ev {
            AllocEvent::Alloc { id, size, .. } => {
                if *size == 0 {
                    return Err(TraceError::ZeroSize {
                        index,
                        id: id.clone(),
                    });
                }
                if live.get(id.as_str()) == Some(&true) {
                    return Err(TraceError::DuplicateId {
                        index,
                        id: id.clone(),
                    });
                }
                live.insert(id, true);
            }
            AllocEvent::Free { id } => match live.get(id.as_str()) {
                Some(true) => {
                    live.insert(id, false);
                }
                Some(false) => {
                    return Err(TraceError::DoubleFree {
                        index,
                        id: id.clone(),
                    })
                }
                None => {
                    return Err(TraceError::UnknownId {
                        index,
                        id: id.clone(),
                    })
                }
            },
        }
    }
    Ok(())
}

/// Sum of all long-lived allocation sizes in the trace.
pub fn long_lived_total(trace: &[AllocEvent]) -> u64 {
    trace
        .iter()
        .map(|e| match e {
            AllocEvent::Alloc {
                size,
                lifetime: Lifetime::Long,
                ..
            } => *size,
            _ => 0,
        })
        .sum()
}

/// Largest number of short-lived bytes live at once.
pub fn peak_short_live(trace: &[AllocEvent]) -> u64 {
    let mut sizes: BTreeMap<&str, u64> = BTreeMap::new();
    let (mut live, mut peak) = (0u64, 0u64);
    for e in trace {
        match e {
            AllocEvent::Alloc {
                id,
                size,
                lifetime: Lifetime::Short,
            } => {
                sizes.insert(id, *size);
                live += size;
                peak = peak.max(live);
            }
            AllocEvent::Alloc { id, .. } => {
                sizes.remove(id.as_str());
            }
            AllocEvent::Free { id } => {
                if let Some(s) = sizes.remove(id.as_str()) {
                    live -= s;
                }
            }
        }
    }
    peak
}

/// Replay `trace` on `heap`, stopping at the first request that cannot be
/// placed.
pub fn simulate(heap: &HeapModel, trace: &[AllocEvent]) -> Result<FragReport, TraceError> {
    validate_trace(trace)?;
    let reserved = match heap.policy {
        Policy::Interleaved => 0,
        Policy::MdDefrag => long_lived_total(trace).min(heap.capacity),
    };
    let mut long_region = FreeList::new(0, reserved, heap.fit);
    let mut short_region = FreeList::new(reserved, heap.capacity - reserved, heap.fit);
    // id -> (offset, size, served from the long region)
    let mut placed: BTreeMap<&str, (u64, u64, bool)> = BTreeMap::new();
    let mut report = FragReport {
        reserved,
        ..FragReport::default()
    };

    for ev in trace {
        match ev {
            AllocEvent::Alloc { id, size, lifetime } => {
                let in_long = heap.policy == Policy::MdDefrag && *lifetime == Lifetime::Long;
                let region = if in_long {
                    &mut long_region
                } else {
                    &mut short_region
                };
                let (offset, examined) = region.allocate(*size);
                let largest = region.largest_hole();
                report.holes_examined += examined;
                match offset {
                    Some(offset) => {
                        placed.insert(id, (offset, *size, in_long));
                    }
                    None => {
                        report.oom = true;
                        report.failing_request = Some(*size);
                        report.free_at_failure =
                            Some(long_region.free_bytes() + short_region.free_bytes());
                        report.max_contiguous_at_failure = Some(largest);
                        break;
                    }
                }
            }
            AllocEvent::Free { id } => {
                let (offset, size, in_long) = placed.remove(id.as_str()).expect("validated trace");
                if in_long {
                    long_region.release(offset, size);
                } else {
                    short_region.release(offset, size);
                }
            }
        }
        report.events += 1;
        let allocated = long_region.allocated_bytes() + short_region.allocated_bytes();
        report.peak_allocated = report.peak_allocated.max(allocated);
    }
    report.free_final = long_region.free_bytes() + short_region.free_bytes();
    report.largest_free_final = short_region.largest_hole();
    Ok(report)
}

/// Event sequence of one training iteration with activation checkpointing.
///
/// Forward, per layer: a long-lived checkpoint, then a short-lived
/// activation that is freed once the next layer's is allocated. Backward,
/// per layer in reverse: a short-lived activation gradient, a long-lived
/// parameter gradient, then the activation gradient is freed.
pub fn gen_training_trace(
    layers: usize,
    ckpt_size: u64,
    temp_size: u64,
    grads_size: u64,
) -> Vec<AllocEvent> {
    use alloc::format;
    let mut t = Vec::with_capacity(6 * layers);
    for l in 0..layers {
        t.push(AllocEvent::alloc(
            format!("ckpt{l}"),
            ckpt_size,
            Lifetime::Long,
        ));
        t.push(AllocEvent::alloc(
            format!("act{l}"),
            temp_size,
            Lifetime::Short,
        ));
        if l > 0 {
            t.push(AllocEvent::free(format!("act{}", l - 1)));
        }
    }
    if layers > 0 {
        t.push(AllocEvent::free(format!("act{}", layers - 1)));
    }
    for l in (0..layers).rev() {
        t.push(AllocEvent::alloc(
            format!("agrad{l}"),
            temp_size,
            Lifetime::Short,
        ));
        t.push(AllocEvent::alloc(
            format!("grad{l}"),
            grads_size,
            Lifetime::Long,
        ));
        t.push(AllocEvent::free(format!("agrad{l}")));
    }
    t
}

/// Long(5)/short(5) pairs filling a 100-byte heap, all shorts freed, then
/// one 10-byte short request.
pub fn interleaving_fixture() -> (u64, Vec<AllocEvent>) {
    use alloc::format;
    let mut t = Vec::new();
    for i in 0..10 {
        t.push(AllocEvent::alloc(format!("long{i}"), 5, Lifetime::Long));
        t.push(AllocEvent::alloc(format!("short{i}"), 5, Lifetime::Short));
    }
    for i in 0..10 {
        t.push(AllocEvent::free(format!("short{i}")));
    }
    t.push(AllocEvent::alloc("request", 10, Lifetime::Short));
    t.push(AllocEvent::free("request"));
    (100, t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interleaved_fixture_fails_with_half_free() {
        let (cap, trace) = interleaving_fixture();
        let r = simulate(&HeapModel::new(cap, Policy::Interleaved), &trace).unwrap();
        assert!(r.oom);
        assert_eq!(r.failing_request, Some(10));
        assert_eq!(r.free_at_failure, Some(50));
        assert_eq!(r.max_contiguous_at_failure, Some(5));
    }

    #[test]
    fn md_fixture_succeeds() {
        let (cap, trace) = interleaving_fixture();
        let r = simulate(&HeapModel::new(cap, Policy::MdDefrag), &trace).unwrap();
        assert!(!r.oom);
        assert_eq!(r.reserved, 50);
        assert_eq!(r.largest_free_final, 50);
        assert_eq!(r.events, trace.len());
    }

    #[test]
    fn all_long_trace_never_fails() {
        let trace: Vec<_> = (0..8)
            .map(|i| AllocEvent::alloc(alloc::format!("l{i}"), 10, Lifetime::Long))
            .collect();
        for policy in [Policy::Interleaved, Policy::MdDefrag] {
            let r = simulate(&HeapModel::new(100, policy), &trace).unwrap();
            assert!(!r.oom);
            assert_eq!(r.free_final, 20);
        }
        let r = simulate(&HeapModel::new(100, Policy::Interleaved), &trace).unwrap();
        assert_eq!(r.largest_free_final, 20);
    }

    #[test]
    fn malformed_traces() {
        let t = [AllocEvent::free("x")];
        assert!(matches!(
            validate_trace(&t),
            Err(TraceError::UnknownId { index: 0, .. })
        ));
        let t = [
            AllocEvent::alloc("x", 1, Lifetime::Short),
            AllocEvent::free("x"),
            AllocEvent::free("x"),
        ];
        assert!(matches!(
            validate_trace(&t),
            Err(TraceError::DoubleFree { index: 2, .. })
        ));
        let t = [
            AllocEvent::alloc("x", 1, Lifetime::Short),
            AllocEvent::alloc("x", 1, Lifetime::Short),
        ];
        assert!(matches!(
            validate_trace(&t),
            Err(TraceError::DuplicateId { .. })
        ));
    }

    #[test]
    fn empty_trace() {
        let r = simulate(&HeapModel::new(64, Policy::Interleaved), &[]).unwrap();
        assert_eq!(r.events, 0);
        assert!(!r.oom);
        assert_eq!(r.largest_free_final, 64);
    }

    #[test]
    fn generator_shape() {
        let one = gen_training_trace(1, 4, 2, 3);
        let longs = one
            .iter()
            .filter(|e| {
                matches!(
                    e,
                    AllocEvent::Alloc {
                        lifetime: Lifetime::Long,
                        ..
                    }
                )
            })
            .count();
        assert_eq!(longs, 2);
        validate_trace(&one).unwrap();
        let n = |l| gen_training_trace(l, 4, 2, 3).len();
        assert_eq!(n(5) - n(4), n(4) - n(3));
        assert_eq!(peak_short_live(&gen_training_trace(4, 4, 2, 3)), 4);
    }

    #[test]
    fn free_list_coalesces() {
        let mut f = FreeList::new(0, 30, Fit::First);
        let a = f.allocate(10).0.unwrap();
        let b = f.allocate(10).0.unwrap();
        let c = f.allocate(10).0.unwrap();
        f.release(a, 10);
        f.release(c, 10);
        assert_eq!(f.holes(), &[(0, 10), (20, 10)]);
        f.release(b, 10);
        assert_eq!(f.holes(), &[(0, 30)]);
    }

    #[test]
    fn best_fit_picks_smallest_hole() {
        let mut f = FreeList::new(0, 100, Fit::Best);
        let a = f.allocate(30).0.unwrap();
        let _ = f.allocate(10).0.unwrap();
        let c = f.allocate(5).0.unwrap();
        let _ = f.allocate(10).0.unwrap();
        f.release(a, 30);
        f.release(c, 5);
        assert_eq!(f.allocate(5).0, Some(c));
    }
}
