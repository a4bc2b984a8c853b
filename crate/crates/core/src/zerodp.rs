//! Data-parallel stage engines: replicated baseline and the three
//! partitioned stages (optimizer states; + gradients; + parameters).
//!
//! Every rank executes [`RankState::train_step`] collectively. The stages
//! differ only in what each rank keeps resident and which collectives move
//! data; the arithmetic on every element is the same, so all stages follow
//! the baseline trajectory bit for bit.

use alloc::boxed::Box;
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::future::Future;
use core::hash::Hasher;
use core::ops::Range;
use core::pin::Pin;
use core::str::FromStr;

use crate::collectives::{
    run_lockstep, BucketStats, CommStats, GradReducer, ProcessGroup, SimNetwork, SimTransport,
    Transport, Window,
};
use crate::error::{CommError, ConfigError, Result};
use crate::model::{Batch, LayerRange, ModelSpec, Pass};
use crate::mpadam::{adam_step, materialize_f16, AdamHyper, OptimizerShard};
use crate::numerics::{f32_to_f16, to_f32s, FlatTensor, Half, SeededRng};
use crate::planner::MemoryEstimate;

/// Non-owned parameter chunks a fully partitioned rank may hold at once.
pub const PREFETCH_WINDOW: usize = 1;

/// Padded flat index space split into `n_ranks` equal contiguous ranges.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartitionLayout {
    psi: usize,
    padded: usize,
    n_ranks: usize,
}

impl PartitionLayout {
    /// Panics if `psi` or `n_ranks` is zero.
    pub fn new(psi: usize, n_ranks: usize) -> Self {
        assert!(
            psi >= 1 && n_ranks >= 1,
            "layout needs psi >= 1 and n_ranks >= 1"
        );
        let padded = psi.div_ceil(n_ranks) * n_ranks;
        PartitionLayout {
            psi,
            padded,
            n_ranks,
        }
    }

    pub fn psi(&self) -> usize {
        self.psi
    }

    pub fn padded(&self) -> usize {
        self.padded
    }

    pub fn n_ranks(&self) -> usize {
        self.n_ranks
    }

    pub fn chunk_len(&self) -> usize {
        self.padded / self.n_ranks
    }

    pub fn range(&self, rank: usize) -> Range<usize> {
        let c = self.chunk_len();
        rank * c..(rank + 1) * c
    }

    pub fn ranges(&self) -> Vec<Range<usize>> {
        (0..self.n_ranks).map(|r| self.range(r)).collect()
    }

    pub fn owner_of(&self, index: usize) -> usize {
        index / self.chunk_len()
    }
}

pub fn make_layout(psi: usize, n_ranks: usize) -> PartitionLayout {
    PartitionLayout::new(psi, n_ranks)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    Baseline,
    /// Optimizer states partitioned.
    Pos,
    /// Optimizer states and gradients partitioned.
    PosG,
    /// Optimizer states, gradients and parameters partitioned.
    PosGP,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Baseline, Stage::Pos, Stage::PosG, Stage::PosGP];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Baseline => "base",
            Stage::Pos => "os",
            Stage::PosG => "os+g",
            Stage::PosGP => "os+g+p",
        }
    }

    pub fn partitions_optimizer(self) -> bool {
        self != Stage::Baseline
    }

    pub fn partitions_gradients(self) -> bool {
        matches!(self, Stage::PosG | Stage::PosGP)
    }

    pub fn partitions_parameters(self) -> bool {
        self == Stage::PosGP
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = ConfigError;

    fn from_str(s: &str) -> core::result::Result<Self, Self::Err> {
        match s {
            "base" | "baseline" => Ok(Stage::Baseline),
            "os" | "pos" => Ok(Stage::Pos),
            "os+g" | "posg" => Ok(Stage::PosG),
            "os+g+p" | "posgp" => Ok(Stage::PosGP),
            other => Err(ConfigError::Invalid(alloc::format!(
                "unknown stage {other:?} (expected base, os, os+g or os+g+p)"
            ))),
        }
    }
}

/// Adds `delta` to the averaged gradient at a flat index on a given step.
/// Used to check that divergence detection works.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Fault {
    /// 1-based step number.
    pub step: u32,
    pub index: usize,
    pub delta: f32,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EngineConfig {
    pub bucket_capacity: usize,
    pub fault: Option<Fault>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            bucket_capacity: 64,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub rank: usize,
    pub step: u32,
    /// Loss of this rank's shard of the batch.
    pub loss: f32,
    /// Communication during this step only.
    pub comm: CommStats,
    /// Resident model-state bytes after the step.
    pub state: MemoryEstimate,
    /// Peak number of non-owned parameter chunks cached during the step.
    pub peak_cached_chunks: usize,
    pub bucket: BucketStats,
}

/// One rank's resident model and optimizer state.
#[derive(Clone, Debug)]
pub struct RankState {
    rank: usize,
    stage: Stage,
    layout: PartitionLayout,
    spec: ModelSpec,
    /// Full fp16 replica, or only the owned range when parameters are partitioned.
    params: Vec<Half>,
    /// Full fp16 gradients, or only the owned range when gradients are partitioned.
    grads: Vec<Half>,
    shard: OptimizerShard,
}

/// A contiguous run of flat indices inside one layer and one chunk.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Piece {
    chunk: usize,
    start: usize,
    end: usize,
}

/// Layer ranges with the last one stretched over the padding, so every
/// chunk of the padded space belongs to some layer.
fn scheduling_ranges(spec: &ModelSpec, layout: &PartitionLayout) -> Vec<LayerRange> {
    let mut ranges = spec.layer_ranges();
    if let Some(last) = ranges.last_mut() {
        last.end = layout.padded();
    }
    ranges
}

/// Forward schedule: layers ascending, each cut at chunk boundaries.
fn forward_pieces(spec: &ModelSpec, layout: &PartitionLayout) -> Vec<Piece> {
    let c = layout.chunk_len();
    let mut out = Vec::new();
    for layer in scheduling_ranges(spec, layout) {
        let mut pos = layer.start;
        while pos < layer.end {
            let chunk = pos / c;
            let end = layer.end.min((chunk + 1) * c);
            out.push(Piece {
                chunk,
                start: pos,
                end,
            });
            pos = end;
        }
    }
    out
}

/// Backward schedule: layers descending, cut at chunk and bucket-window
/// boundaries so each piece feeds exactly one reduction window.
fn backward_pieces(spec: &ModelSpec, layout: &PartitionLayout, windows: &[Window]) -> Vec<Piece> {
    let mut cuts: Vec<usize> = windows.iter().map(|w| w.start).collect();
    cuts.extend(spec.layer_ranges().iter().map(|l| l.start));
    cuts.sort_unstable();
    cuts.dedup();
    let c = layout.chunk_len();
    let mut out = Vec::new();
    let mut end = layout.padded();
    while end > 0 {
        // Largest cut strictly below `end`.
        let start = match cuts.binary_search(&end) {
            Ok(i) | Err(i) => cuts[..i].last().copied().unwrap_or(0),
        };
        out.push(Piece {
            chunk: (end - 1) / c,
            start,
            end,
        });
        end = start;
    }
    out
}

/// Divide reduced gradient sums by the number of ranks and the loss scale.
pub fn average_gradients(sums: &[f32], n_ranks: usize, loss_scale: f32) -> Vec<f32> {
    let divisor = n_ranks as f32 * loss_scale;
    sums.iter().map(|s| s / divisor).collect()
}

impl RankState {
    /// Build rank `rank`'s state from the shared fp32 initial weights
    /// (length = `layout.padded()`, zero padding).
    pub fn new(
        stage: Stage,
        rank: usize,
        layout: PartitionLayout,
        spec: ModelSpec,
        init_master: &[f32],
    ) -> Result<Self> {
        spec.validate()?;
        if init_master.len() != layout.padded() || spec.param_count() != layout.psi() {
            return Err(ConfigError::Invalid(alloc::format!(
                "initial weights ({}) / layout ({} of {}) do not match the model ({} params)",
                init_master.len(),
                layout.psi(),
                layout.padded(),
                spec.param_count()
            ))
            .into());
        }
        if rank >= layout.n_ranks() {
            return Err(ConfigError::Invalid(alloc::format!(
                "rank {rank} out of range for {} ranks",
                layout.n_ranks()
            ))
            .into());
        }
        let owned = layout.range(rank);
        let shard_range = if stage.partitions_optimizer() {
            owned.clone()
        } else {
            0..layout.padded()
        };
        let shard = OptimizerShard::new(shard_range.clone(), init_master[shard_range].to_vec());
        let param_range = if stage.partitions_parameters() {
            owned.clone()
        } else {
            0..layout.padded()
        };
        let params = init_master[param_range]
            .iter()
            .map(|&x| f32_to_f16(x))
            .collect();
        let grad_len = if stage.partitions_gradients() {
            owned.len()
        } else {
            layout.padded()
        };
        Ok(RankState {
            rank,
            stage,
            layout,
            spec,
            params,
            grads: vec![Half::ZERO; grad_len],
            shard,
        })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn layout(&self) -> &PartitionLayout {
        &self.layout
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn shard(&self) -> &OptimizerShard {
        &self.shard
    }

    /// Resident fp16 parameters and the flat range they cover.
    pub fn params(&self) -> (Range<usize>, &[Half]) {
        let range = if self.stage.partitions_parameters() {
            self.layout.range(self.rank)
        } else {
            0..self.layout.padded()
        };
        (range, &self.params)
    }

    /// Resident fp16 gradients and the flat range they cover.
    pub fn grads(&self) -> (Range<usize>, &[Half]) {
        let range = if self.stage.partitions_gradients() {
            self.layout.range(self.rank)
        } else {
            0..self.layout.padded()
        };
        (range, &self.grads)
    }

    /// Logical bytes of resident model state, sampled between steps.
    pub fn measured_state_bytes(&self) -> MemoryEstimate {
        MemoryEstimate::from_parts(
            (self.params.len() * 2) as f64,
            (self.grads.len() * 2) as f64,
            self.shard.resident_bytes() as f64,
            0.0,
            0.0,
        )
    }

    /// Run one training step. All ranks of the group must call this with
    /// the same global batch.
    pub async fn train_step<T: Transport>(
        &mut self,
        group: &mut ProcessGroup<T>,
        global_batch: &Batch,
        hyper: &AdamHyper,
        cfg: &EngineConfig,
    ) -> Result<StepReport> {
        let n = self.layout.n_ranks();
        if group.n_ranks() != n || group.rank() != self.rank {
            return Err(ConfigError::Invalid(alloc::format!(
                "group (rank {} of {}) does not match state (rank {} of {n})",
                group.rank(),
                group.n_ranks(),
                self.rank
            ))
            .into());
        }
        if !global_batch.batch_size.is_multiple_of(n) {
            return Err(ConfigError::BatchNotDivisible {
                batch: global_batch.batch_size,
                n_ranks: n,
            }
            .into());
        }
        hyper.validate()?;
        let per_rank = global_batch.batch_size / n;
        let batch_start = self.rank * per_rank;
        let local = global_batch.slice(&self.spec, batch_start, per_rank);
        let before = *group.stats();
        let step = self.shard.step_count() + 1;

        let mut peak_cached = 0;
        let mut bucket = BucketStats::default();
        let (loss, sums) = match self.stage {
            Stage::Baseline | Stage::Pos => {
                let padded = self.layout.padded();
                let params = to_f32s(&self.params);
                let mut pass =
                    Pass::new(&self.spec, &local, batch_start, padded, hyper.loss_scale)?;
                pass.forward_segment(0, &params)?;
                let mut grads = vec![0.0; padded];
                pass.backward_segment(padded, &params, &mut grads)?;
                for (dst, g) in self.grads.iter_mut().zip(&grads) {
                    *dst = f32_to_f16(*g);
                }
                let sums = if self.stage == Stage::Baseline {
                    group.all_reduce(&self.grads).await?
                } else {
                    group.ring_reduce_scatter(&self.grads).await?
                };
                (pass.loss().unwrap_or(0.0), sums)
            }
            Stage::PosG | Stage::PosGP => {
                let out = self
                    .partitioned_pass(group, &local, batch_start, hyper, cfg)
                    .await?;
                peak_cached = out.peak_cached;
                bucket = out.bucket;
                (out.loss, out.sums)
            }
        };

        let mut avg = average_gradients(&sums, n, hyper.loss_scale);
        let shard_range = self.shard.range();
        if let Some(f) = cfg.fault {
            if f.step == step && shard_range.contains(&f.index) {
                avg[f.index - shard_range.start] += f.delta;
            }
        }
        adam_step(&mut self.shard, &avg, hyper)?;
        let fresh = materialize_f16(&self.shard)?;
        self.params = match self.stage {
            Stage::Baseline | Stage::PosGP => fresh,
            Stage::Pos | Stage::PosG => group.ring_all_gather(&fresh).await?,
        };

        Ok(StepReport {
            rank: self.rank,
            step,
            loss,
            comm: group.stats().since(&before),
            state: self.measured_state_bytes(),
            peak_cached_chunks: peak_cached,
            bucket,
        })
    }

    /// Forward and backward with gradients streamed into bucketed
    /// reduce-to-owner; parameters come from broadcasts when partitioned.
    async fn partitioned_pass<T: Transport>(
        &mut self,
        group: &mut ProcessGroup<T>,
        local: &Batch,
        batch_start: usize,
        hyper: &AdamHyper,
        cfg: &EngineConfig,
    ) -> Result<PassOutput> {
        let padded = self.layout.padded();
        let mut pass = Pass::new(&self.spec, local, batch_start, padded, hyper.loss_scale)?;
        let mut reducer = GradReducer::new(self.layout.clone(), self.rank, cfg.bucket_capacity)?;
        let mut cache = ChunkCache::new(self.rank);

        if self.stage == Stage::PosGP {
            let pieces = forward_pieces(&self.spec, &self.layout);
            for (i, p) in pieces.iter().enumerate() {
                let chunk = cache
                    .fetch(group, &self.layout, &self.params, p.chunk)
                    .await?;
                let base = self.layout.range(p.chunk).start;
                pass.forward_segment(p.start, &chunk[p.start - base..p.end - base])?;
                if pieces.get(i + 1).map(|q| q.chunk) != Some(p.chunk) {
                    cache.evict();
                }
            }
        } else {
            let params = to_f32s(&self.params);
            pass.forward_segment(0, &params)?;
        }

        let full = if self.stage == Stage::PosG {
            Some(to_f32s(&self.params))
        } else {
            None
        };
        let pieces = backward_pieces(&self.spec, &self.layout, reducer.windows());
        let mut grads = Vec::new();
        for (i, p) in pieces.iter().enumerate() {
            grads.clear();
            grads.resize(p.end - p.start, 0.0);
            match &full {
                Some(params) => {
                    pass.backward_segment(p.end, &params[p.start..p.end], &mut grads)?;
                }
                None => {
                    let chunk = cache
                        .fetch(group, &self.layout, &self.params, p.chunk)
                        .await?;
                    let base = self.layout.range(p.chunk).start;
                    pass.backward_segment(p.end, &chunk[p.start - base..p.end - base], &mut grads)?;
                    if pieces.get(i + 1).map(|q| q.chunk) != Some(p.chunk) {
                        cache.evict();
                    }
                }
            }
            let halves: Vec<Half> = grads.iter().map(|&g| f32_to_f16(g)).collect();
            reducer.push(group, p.start, &halves).await?;
        }

        let (sums, own_grads, bucket) = reducer.finish();
        self.grads = own_grads;
        Ok(PassOutput {
            loss: pass.loss().unwrap_or(0.0),
            sums,
            peak_cached: cache.peak_nonowned,
            bucket,
        })
    }
}

struct PassOutput {
    loss: f32,
    sums: FlatTensor,
    peak_cached: usize,
    bucket: BucketStats,
}

/// Transient cache of one broadcast parameter chunk.
struct ChunkCache {
    rank: usize,
    current: Option<(usize, Vec<f32>)>,
    live_nonowned: usize,
    peak_nonowned: usize,
}

impl ChunkCache {
    fn new(rank: usize) -> Self {
        ChunkCache {
            rank,
            current: None,
            live_nonowned: 0,
            peak_nonowned: 0,
        }
    }

    /// Widened parameters of `chunk`, broadcasting it from its owner if it
    /// is not cached. Every rank reaches the same fetches in the same order.
    async fn fetch<T: Transport>(
        &mut self,
        group: &mut ProcessGroup<T>,
        layout: &PartitionLayout,
        owned: &[Half],
        chunk: usize,
    ) -> core::result::Result<&[f32], CommError> {
        if self.current.as_ref().map(|(k, _)| *k) != Some(chunk) {
            self.evict();
            let data = (chunk == self.rank).then_some(owned);
            let values = group
                .ring_broadcast(chunk, data, layout.chunk_len())
                .await?;
            if chunk != self.rank {
                self.live_nonowned += 1;
                self.peak_nonowned = self.peak_nonowned.max(self.live_nonowned);
            }
            self.current = Some((chunk, to_f32s(&values)));
        }
        Ok(&self.current.as_ref().expect("chunk cached").1)
    }

    fn evict(&mut self) {
        if let Some((k, _)) = self.current.take() {
            if k != self.rank {
                self.live_nonowned -= 1;
            }
        }
    }
}

/// Seeded source of initial weights and per-step global batches.
#[derive(Clone, Debug)]
pub struct Workload {
    spec: ModelSpec,
    global_batch: usize,
    rng: SeededRng,
}

impl Workload {
    pub fn new(spec: ModelSpec, global_batch: usize, seed: u64) -> Self {
        Workload {
            spec,
            global_batch,
            rng: SeededRng::new(seed),
        }
    }

    /// Initial fp32 weights padded to `padded`. Call once, before batches.
    pub fn init_master(&mut self, padded: usize) -> Vec<f32> {
        self.spec.init_params(&mut self.rng, padded).into_vec()
    }

    pub fn next_batch(&mut self) -> Batch {
        Batch::random(&self.spec, self.global_batch, &mut self.rng)
    }
}

/// 64-bit FNV-1a over the little-endian bytes of the fp32 values.
pub fn digest_f32(values: &[f32]) -> u64 {
    let mut h = fnv::FnvHasher::default();
    for v in values {
        h.write(&v.to_bits().to_le_bytes());
    }
    h.finish()
}

/// All ranks of one stage running in-process over a [`SimNetwork`].
pub struct SimCluster {
    stage: Stage,
    layout: PartitionLayout,
    ranks: Vec<RankState>,
    groups: Vec<ProcessGroup<SimTransport>>,
    net: Rc<SimNetwork>,
    cfg: EngineConfig,
}

impl SimCluster {
    pub fn new(
        stage: Stage,
        spec: ModelSpec,
        n_ranks: usize,
        init_master: &[f32],
        cfg: EngineConfig,
    ) -> Result<Self> {
        if n_ranks == 0 {
            return Err(ConfigError::Invalid("need at least one rank".into()).into());
        }
        if cfg.bucket_capacity == 0 {
            return Err(ConfigError::ZeroBucket.into());
        }
        let layout = PartitionLayout::new(spec.param_count(), n_ranks);
        let ranks = (0..n_ranks)
            .map(|r| RankState::new(stage, r, layout.clone(), spec, init_master))
            .collect::<Result<Vec<_>>>()?;
        let net = SimNetwork::new(n_ranks);
        let groups = net.endpoints().into_iter().map(ProcessGroup::new).collect();
        Ok(SimCluster {
            stage,
            layout,
            ranks,
            groups,
            net,
            cfg,
        })
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn layout(&self) -> &PartitionLayout {
        &self.layout
    }

    pub fn ranks(&self) -> &[RankState] {
        &self.ranks
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn step(&mut self, batch: &Batch, hyper: &AdamHyper) -> Result<Vec<StepReport>> {
        let cfg = self.cfg;
        type StepFuture<'a> = Pin<Box<dyn Future<Output = Result<StepReport>> + 'a>>;
        let futures: Vec<StepFuture<'_>> = self
            .ranks
            .iter_mut()
            .zip(self.groups.iter_mut())
            .map(|(state, group)| {
                Box::pin(async move { state.train_step(group, batch, hyper, &cfg).await })
                    as StepFuture<'_>
            })
            .collect();
        let outcomes = run_lockstep(&self.net, futures);
        // Report a rank's own error ahead of the stall it caused elsewhere.
        let mut stall = None;
        let mut reports = Vec::with_capacity(outcomes.len());
        for outcome in outcomes {
            match outcome {
                Ok(Ok(report)) => reports.push(report),
                Ok(Err(e)) => return Err(e),
                Err(e) => stall = Some(e),
            }
        }
        match stall {
            Some(e) => Err(e.into()),
            None => Ok(reports),
        }
    }

    /// fp32 master weights over the padded space, assembled from the shards.
    pub fn master(&self) -> Vec<f32> {
        if !self.stage.partitions_optimizer() {
            return self.ranks[0].shard().master().to_vec();
        }
        self.ranks
            .iter()
            .flat_map(|r| r.shard().master().iter().copied())
            .collect()
    }

    pub fn digest(&self) -> u64 {
        digest_f32(&self.master())
    }
}

/// What diverged first in one (ranks, stage) run.
#[derive(Clone, Debug, PartialEq)]
pub struct Divergence {
    pub n_ranks: usize,
    pub stage: Stage,
    pub step: u32,
    pub index: usize,
    pub what: &'static str,
    pub rank: usize,
}

impl fmt::Display for Divergence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "N={} stage {}: {} diverges from baseline at step {} index {} (rank {})",
            self.n_ranks, self.stage, self.what, self.step, self.index, self.rank
        )
    }
}

#[derive(Clone, Debug)]
pub struct SuiteConfig {
    pub spec: ModelSpec,
    pub n_ranks: Vec<usize>,
    pub steps: u32,
    pub seed: u64,
    pub global_batch: usize,
    pub hyper: AdamHyper,
    pub engine: EngineConfig,
    /// Inject `engine.fault` only into this stage's run.
    pub fault_stage: Option<Stage>,
}

impl SuiteConfig {
    pub fn new(spec: ModelSpec, steps: u32, seed: u64) -> Self {
        SuiteConfig {
            spec,
            n_ranks: vec![1, 2, 4, 8],
            steps,
            seed,
            global_batch: 16,
            hyper: AdamHyper::default(),
            engine: EngineConfig::default(),
            fault_stage: None,
        }
    }
}

/// Per-(ranks, stage) comparison of every step against the baseline.
#[derive(Clone, Debug, Default)]
pub struct Verdict {
    pub runs: Vec<(usize, Stage)>,
    pub divergences: Vec<Divergence>,
    /// `(ranks, stage, digest)` of the final fp32 masters.
    pub digests: Vec<(usize, Stage, u64)>,
    /// Any run whose measured state bytes disagreed with the planner.
    pub memory_mismatches: Vec<(usize, Stage)>,
}

impl Verdict {
    pub fn all_equal(&self) -> bool {
        self.divergences.is_empty()
    }
}

fn first_mismatch<T, F: Fn(&T, &T) -> bool>(a: &[T], b: &[T], eq: F) -> Option<usize> {
    a.iter()
        .zip(b)
        .position(|(x, y)| !eq(x, y))
        .or_else(|| (a.len() != b.len()).then_some(a.len().min(b.len())))
}

/// First place where `state` departs from the baseline `oracle` held by
/// the same rank: `(flat index, what)`.
fn compare_to_oracle(state: &RankState, oracle: &RankState) -> Option<(usize, &'static str)> {
    let shard = state.shard();
    let range = shard.range();
    let reference = &oracle.shard().master()[range.clone()];
    if let Some(off) = first_mismatch(shard.master(), reference, |a, b| a.to_bits() == b.to_bits())
    {
        return Some((range.start + off, "fp32 master"));
    }
    let (range, params) = state.params();
    first_mismatch(params, &oracle.params().1[range.clone()], |a, b| a == b)
        .map(|off| (range.start + off, "fp16 params"))
}

const WHAT: [&str; 2] = ["fp32 master", "fp16 params"];

/// One rank's share of an equivalence run. Every rank of `group` calls
/// this collectively; all of them return the same aggregated verdict.
///
/// Each rank trains all four stages side by side over the same group and
/// checks after every step that its resident state matches its own
/// baseline replica.
pub async fn verify_rank<T: Transport>(
    group: &mut ProcessGroup<T>,
    cfg: &SuiteConfig,
) -> Result<Verdict> {
    let n = group.n_ranks();
    let rank = group.rank();
    let psi = cfg.spec.param_count();
    if !cfg.global_batch.is_multiple_of(n) {
        return Err(ConfigError::BatchNotDivisible {
            batch: cfg.global_batch,
            n_ranks: n,
        }
        .into());
    }
    if psi >= 1 << 24 || cfg.steps >= 1 << 24 {
        return Err(
            ConfigError::Invalid("verification is limited to desk-scale runs".into()).into(),
        );
    }
    let layout = PartitionLayout::new(psi, n);
    let mut workload = Workload::new(cfg.spec, cfg.global_batch, cfg.seed);
    let init = workload.init_master(layout.padded());
    let mut states = Stage::ALL
        .iter()
        .map(|&stage| RankState::new(stage, rank, layout.clone(), cfg.spec, &init))
        .collect::<Result<Vec<_>>>()?;
    let quiet = EngineConfig {
        fault: None,
        ..cfg.engine
    };
    let mut first: [Option<(u32, usize, usize)>; 4] = [None; 4];
    for step in 1..=cfg.steps {
        let batch = workload.next_batch();
        for state in states.iter_mut() {
            let engine = if cfg.fault_stage == Some(state.stage()) {
                &cfg.engine
            } else {
                &quiet
            };
            state.train_step(group, &batch, &cfg.hyper, engine).await?;
        }
        let (oracle, rest) = states.split_first().expect("baseline present");
        for (slot, state) in first[1..].iter_mut().zip(rest) {
            if slot.is_none() {
                *slot = compare_to_oracle(state, oracle).map(|(index, what)| {
                    (
                        step,
                        index,
                        WHAT.iter().position(|w| *w == what).unwrap_or(0),
                    )
                });
            }
        }
    }

    // Exchange local findings: per stage (step, index, what, state bytes ok).
    let mut local = Vec::with_capacity(16);
    for (slot, state) in first.iter().zip(&states) {
        let planned = crate::planner::model_state_bytes(
            layout.padded() as f64,
            crate::planner::ADAM_K,
            n as f64,
            state.stage(),
        );
        let (step, index, what) = slot.unwrap_or((0, 0, 0));
        let mem_ok = state.measured_state_bytes() == planned;
        local.extend([step as f32, index as f32, what as f32, mem_ok as u8 as f32]);
    }
    let all = group.ring_all_gather(&local).await?;

    let mut verdict = Verdict::default();
    for (i, state) in states.iter().enumerate() {
        let stage = state.stage();
        verdict.runs.push((n, stage));
        let found = (0..n)
            .map(|r| &all[r * 16 + i * 4..r * 16 + i * 4 + 4])
            .enumerate()
            .filter(|(_, f)| f[0] > 0.0)
            .map(|(r, f)| (f[0] as u32, f[1] as usize, f[2] as usize, r))
            .min();
        if let Some((step, index, what, r)) = found {
            verdict.divergences.push(Divergence {
                n_ranks: n,
                stage,
                step,
                index,
                what: WHAT[what],
                rank: r,
            });
        }
        if (0..n).any(|r| all[r * 16 + i * 4 + 3] == 0.0) {
            verdict.memory_mismatches.push((n, stage));
        }
        let master = if stage.partitions_optimizer() {
            group.ring_all_gather(state.shard().master()).await?
        } else {
            state.shard().master().to_vec()
        };
        verdict.digests.push((n, stage, digest_f32(&master)));
    }
    Ok(verdict)
}

/// Run [`verify_rank`] for every configured rank count on the in-process
/// network and merge the verdicts.
pub fn run_equivalence_suite(cfg: &SuiteConfig) -> Result<Verdict> {
    let mut verdict = Verdict::default();
    for &n in &cfg.n_ranks {
        if n == 0 {
            return Err(ConfigError::Invalid("rank counts must be positive".into()).into());
        }
        let net = SimNetwork::new(n);
        let mut groups: Vec<ProcessGroup<SimTransport>> =
            net.endpoints().into_iter().map(ProcessGroup::new).collect();
        type VerifyFuture<'a> = Pin<Box<dyn Future<Output = Result<Verdict>> + 'a>>;
        let futures: Vec<VerifyFuture<'_>> = groups
            .iter_mut()
            .map(|g| Box::pin(verify_rank(g, cfg)) as VerifyFuture<'_>)
            .collect();
        let mut outcomes = Vec::with_capacity(n);
        let mut stall = None;
        for outcome in run_lockstep(&net, futures) {
            match outcome {
                Ok(Ok(v)) => outcomes.push(v),
                Ok(Err(e)) => return Err(e),
                Err(e) => stall = Some(e),
            }
        }
        if let Some(e) = stall {
            return Err(e.into());
        }
        let v = outcomes.swap_remove(0);
        verdict.runs.extend(v.runs);
        verdict.divergences.extend(v.divergences);
        verdict.digests.extend(v.digests);
        verdict.memory_mismatches.extend(v.memory_mismatches);
    }
    Ok(verdict)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn layout_examples() {
        let l = make_layout(10, 4);
        assert_eq!(l.padded(), 12);
        assert_eq!(l.ranges(), vec![0..3, 3..6, 6..9, 9..12]);
        let l = make_layout(8, 1);
        assert_eq!(l.ranges(), vec![0..8]);
        assert_eq!(make_layout(7, 2).padded(), 8);
    }

    #[test]
    fn stage_names_round_trip() {
        for s in Stage::ALL {
            assert_eq!(s.name().parse::<Stage>().unwrap(), s);
        }
        assert!("zero".parse::<Stage>().is_err());
    }

    #[test]
    fn schedules_cover_padded_space() {
        let spec = ModelSpec::new(2, 8, 1, 2).unwrap();
        let layout = PartitionLayout::new(spec.param_count(), 4);
        let fwd = forward_pieces(&spec, &layout);
        assert_eq!(fwd.first().unwrap().start, 0);
        assert_eq!(fwd.last().unwrap().end, layout.padded());
        assert!(fwd
            .windows(2)
            .all(|w| w[0].end == w[1].start && w[0].chunk <= w[1].chunk));
        let windows = crate::collectives::bucket_windows(&layout, 5);
        let bwd = backward_pieces(&spec, &layout, &windows);
        assert_eq!(bwd.first().unwrap().end, layout.padded());
        assert_eq!(bwd.last().unwrap().start, 0);
        assert!(bwd
            .windows(2)
            .all(|w| w[0].start == w[1].end && w[0].chunk >= w[1].chunk));
        assert!(bwd.iter().all(|p| p.end - p.start <= 5));
    }

    #[test]
    fn padding_gradient_stays_zero() {
        // psi = 7 is not possible for an MLP, so pick one with odd psi.
        let spec = ModelSpec::new(1, 1, 1, 1).unwrap(); // psi = 4
        let spec3 = ModelSpec::new(2, 1, 1, 1).unwrap(); // psi = 5
        for spec in [spec, spec3] {
            let n = 2;
            let mut w = Workload::new(spec, 4, 3);
            let layout = PartitionLayout::new(spec.param_count(), n);
            let init = w.init_master(layout.padded());
            for stage in Stage::ALL {
                let mut c =
                    SimCluster::new(stage, spec, n, &init, EngineConfig::default()).unwrap();
                let b = w.clone().next_batch();
                c.step(&b, &AdamHyper::default()).unwrap();
                let m = c.master();
                assert!(m[layout.psi()..].iter().all(|&v| v == 0.0), "{stage}");
            }
        }
    }

    #[test]
    fn batch_must_split_evenly() {
        let spec = ModelSpec::new(2, 2, 1, 1).unwrap();
        let layout = PartitionLayout::new(spec.param_count(), 2);
        let mut w = Workload::new(spec, 3, 1);
        let init = w.init_master(layout.padded());
        let mut c = SimCluster::new(Stage::PosG, spec, 2, &init, EngineConfig::default()).unwrap();
        let err = c.step(&w.next_batch(), &AdamHyper::default()).unwrap_err();
        assert!(matches!(
            err,
            Error::Config(ConfigError::BatchNotDivisible {
                batch: 3,
                n_ranks: 2
            })
        ));
    }

    #[test]
    fn zero_steps_is_trivially_equal() {
        let spec = ModelSpec::new(2, 8, 1, 2).unwrap();
        let mut cfg = SuiteConfig::new(spec, 0, 1);
        cfg.n_ranks = vec![2];
        let v = run_equivalence_suite(&cfg).unwrap();
        assert!(v.all_equal());
    }
}
