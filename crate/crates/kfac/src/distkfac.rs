//! The per-iteration orchestrator: runs the six-stage hybrid
//! data/model-parallel optimizer across a pool of simulated workers.
//!
//! Stages 1-2 are data-parallel (forward with A capture, backward with G
//! capture), stage 3 reduces gradients and, on refresh iterations, the
//! packed Kronecker factors to their layer owners, stages 4-5 are
//! model-parallel (damped inversion and preconditioning on owners), and
//! stage 6 gathers the preconditioned gradients back so every replica
//! applies an identical update. Workers execute sequentially in rank
//! order; collectives are the only synchronization points, so the same
//! observable results would hold for concurrently scheduled workers.

use crate::collectives::{
    all_gather_v, all_reduce, reduce_scatter_v, CollectiveError, CommLedger, ReduceOp, Segment,
    SegmentKind, WorkerAssignment,
};
use crate::fim::{
    self, BnFimMode, BnFisherBlock, BnFisherData, FimError, KroneckerPair,
};
use crate::linalg::{self, DenseMatrix};
use crate::metrics::{self, PercentileSummary};
use crate::model::{apply_update, Batch, LayerSpec, ModelError, Network, Shape};
use crate::schedules::{
    self, DampingConfig, IntervalHeuristic, LrMomentumConfig, ScheduleError,
};
use crate::tensor::TensorBuffer;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("stage {stage} failed on worker {worker}: {detail}")]
    Stage {
        stage: u8,
        worker: usize,
        detail: String,
    },
    #[error("worker shards are not equal-sized")]
    UnequalShards,
    #[error("expected {expected} worker shards, got {got}")]
    WrongWorkerCount { expected: usize, got: usize },
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
}

fn stage_err<E: std::fmt::Display>(stage: u8, worker: usize) -> impl FnOnce(E) -> TrainError {
    move |e| TrainError::Stage {
        stage,
        worker,
        detail: e.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StalenessMode {
    Off,
    Rampup,
    Step13,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StalenessConfig {
    pub mode: StalenessMode,
    /// Iterations below this always refresh (the curvature changes
    /// rapidly early in training).
    pub fresh_floor: u64,
    /// A's refresh interval as a multiple of G's.
    pub a_multiplier: u64,
}

impl Default for StalenessConfig {
    fn default() -> Self {
        StalenessConfig {
            mode: StalenessMode::Off,
            fresh_floor: 50,
            a_multiplier: 1,
        }
    }
}

/// Per-kind refresh decision for one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefreshDecision {
    pub a: bool,
    pub g: bool,
    pub f_bn: bool,
}

impl RefreshDecision {
    pub fn all() -> Self {
        RefreshDecision {
            a: true,
            g: true,
            f_bn: true,
        }
    }

    pub fn any(&self) -> bool {
        self.a || self.g || self.f_bn
    }
}

/// Decide which curvature kinds to refresh at iteration `t`, epoch `e`.
pub fn staleness_controller(t: u64, e: u64, cfg: &StalenessConfig) -> RefreshDecision {
    let heuristic = match cfg.mode {
        StalenessMode::Off => return RefreshDecision::all(),
        StalenessMode::Rampup => IntervalHeuristic::Rampup,
        StalenessMode::Step13 => IntervalHeuristic::Step13,
    };
    if t < cfg.fresh_floor {
        return RefreshDecision::all();
    }
    let interval_g = schedules::refresh_interval(e, heuristic).max(1);
    let interval_a = interval_g * cfg.a_multiplier.max(1);
    RefreshDecision {
        a: t % interval_a == 0,
        g: t % interval_g == 0,
        f_bn: t % interval_g == 0,
    }
}

/// Relative Frobenius change between consecutive curvature snapshots;
/// undefined (None) when the previous snapshot has zero norm.
pub fn diff_metric(current: &DenseMatrix, previous: &DenseMatrix) -> Option<f64> {
    let prev_norm = linalg::frobenius_norm(previous);
    if prev_norm == 0.0 {
        return None;
    }
    let mut diff = current.clone();
    for (d, p) in diff.values_mut().iter_mut().zip(previous.values()) {
        *d -= p;
    }
    Some(linalg::frobenius_norm(&diff) / prev_norm)
}

/// Everything the orchestrator needs to run one optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub damping: DampingConfig,
    pub lr: LrMomentumConfig,
    pub staleness: StalenessConfig,
    pub bn_mode: BnFimMode,
    pub rescale_weights: bool,
    pub stat_ema: f64,
    /// Fixed (eta, momentum) pair that bypasses the schedules (used by
    /// the compare command's constant-rate runs).
    pub constant_rate: Option<(f64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FactorKind {
    A,
    G,
    FBn,
}

#[derive(Debug, Clone)]
pub struct Worker {
    pub rank: usize,
    pub net: Network,
    pub pairs: HashMap<usize, KroneckerPair>,
    pub bn_blocks: HashMap<usize, BnFisherBlock>,
    /// Previous curvature snapshots of owned layers, for the Diff metric.
    pub prev_factors: HashMap<(usize, FactorKind), DenseMatrix>,
}

/// Percentile summaries of the Diff metric across layers, per kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffRecord {
    pub iteration: u64,
    pub a: Option<PercentileSummary>,
    pub g: Option<PercentileSummary>,
    pub f_bn: Option<PercentileSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace {
    pub iteration: u64,
    pub epoch: f64,
    pub loss: f64,
    pub train_acc: f64,
    pub gamma: Option<f64>,
    pub lr: f64,
    pub momentum: f64,
    pub refreshed: Option<RefreshDecision>,
    pub diff_a: Option<PercentileSummary>,
    pub diff_g: Option<PercentileSummary>,
    pub diff_f_bn: Option<PercentileSummary>,
    pub stage3_bytes: u64,
    pub stage6_bytes: u64,
}

pub struct WorkerPool {
    pub workers: Vec<Worker>,
    pub assignment: WorkerAssignment,
    pub ledger: CommLedger,
    pub settings: TrainSettings,
    pub gamma: f64,
    pub iteration: u64,
    pub diff_history: Vec<DiffRecord>,
}

/// Serializable pool state for bit-exact resume.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoolState {
    pub iteration: u64,
    pub gamma: f64,
    pub records: Vec<Vec<crate::model::LayerRecord>>,
    pub pairs: Vec<Vec<(usize, KroneckerPair)>>,
    pub bn_blocks: Vec<Vec<(usize, BnFisherBlock)>>,
    pub prev_factors: Vec<Vec<(usize, FactorKind, DenseMatrix)>>,
    pub diff_history: Vec<DiffRecord>,
}

impl WorkerPool {
    /// Build `workers` identical replicas (same seed) and the round-robin
    /// layer assignment.
    pub fn new(
        input_shape: Shape,
        specs: &[LayerSpec],
        seed: u64,
        workers: usize,
        settings: TrainSettings,
    ) -> Result<Self, ModelError> {
        assert!(workers >= 1, "need at least one worker");
        let mut pool = Vec::with_capacity(workers);
        for rank in 0..workers {
            pool.push(Worker {
                rank,
                net: Network::new(input_shape, specs, seed)?,
                pairs: HashMap::new(),
                bn_blocks: HashMap::new(),
                prev_factors: HashMap::new(),
            });
        }
        let assignment = crate::collectives::assign_layers(specs.len(), workers);
        let gamma = settings.damping.gamma0;
        Ok(WorkerPool {
            workers: pool,
            assignment,
            ledger: CommLedger::new(workers),
            settings,
            gamma,
            iteration: 0,
            diff_history: Vec::new(),
        })
    }

    pub fn worker_count(&self) -> usize {
        self.workers.len()
    }

    /// Bitwise equality of all replicas' parameters.
    pub fn replicas_identical(&self) -> bool {
        let reference: Vec<u64> = self.workers[0]
            .net
            .params_flat()
            .iter()
            .map(|v| v.to_bits())
            .collect();
        self.workers.iter().skip(1).all(|w| {
            w.net
                .params_flat()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<u64>>()
                == reference
        })
    }

    pub fn export_state(&self) -> PoolState {
        PoolState {
            iteration: self.iteration,
            gamma: self.gamma,
            records: self
                .workers
                .iter()
                .map(|w| w.net.layers.iter().map(|l| l.record.clone()).collect())
                .collect(),
            pairs: self
                .workers
                .iter()
                .map(|w| {
                    let mut v: Vec<_> = w.pairs.iter().map(|(k, p)| (*k, p.clone())).collect();
                    v.sort_by_key(|(k, _)| *k);
                    v
                })
                .collect(),
            bn_blocks: self
                .workers
                .iter()
                .map(|w| {
                    let mut v: Vec<_> = w.bn_blocks.iter().map(|(k, b)| (*k, b.clone())).collect();
                    v.sort_by_key(|(k, _)| *k);
                    v
                })
                .collect(),
            prev_factors: self
                .workers
                .iter()
                .map(|w| {
                    let mut v: Vec<_> = w
                        .prev_factors
                        .iter()
                        .map(|((l, k), m)| (*l, *k, m.clone()))
                        .collect();
                    v.sort_by_key(|(l, k, _)| (*l, *k as u8));
                    v
                })
                .collect(),
            diff_history: self.diff_history.clone(),
        }
    }

    pub fn import_state(&mut self, state: PoolState) -> Result<(), TrainError> {
        if state.records.len() != self.workers.len() {
            return Err(TrainError::WrongWorkerCount {
                expected: self.workers.len(),
                got: state.records.len(),
            });
        }
        self.iteration = state.iteration;
        self.gamma = state.gamma;
        self.diff_history = state.diff_history;
        for (w, records) in self.workers.iter_mut().zip(state.records) {
            for (layer, record) in w.net.layers.iter_mut().zip(records) {
                layer.record = record;
            }
        }
        for (w, pairs) in self.workers.iter_mut().zip(state.pairs) {
            w.pairs = pairs.into_iter().collect();
        }
        for (w, blocks) in self.workers.iter_mut().zip(state.bn_blocks) {
            w.bn_blocks = blocks.into_iter().collect();
        }
        for (w, prevs) in self.workers.iter_mut().zip(state.prev_factors) {
            w.prev_factors = prevs.into_iter().map(|(l, k, m)| ((l, k), m)).collect();
        }
        Ok(())
    }
}

fn validate_shards(pool: &WorkerPool, shards: &[Vec<Batch>]) -> Result<(), TrainError> {
    if shards.len() != pool.worker_count() {
        return Err(TrainError::WrongWorkerCount {
            expected: pool.worker_count(),
            got: shards.len(),
        });
    }
    let chunks = shards[0].len();
    let size = shards[0].first().map_or(0, Batch::size);
    for s in shards {
        if s.len() != chunks || s.iter().any(|b| b.size() != size) || chunks == 0 {
            return Err(TrainError::UnequalShards);
        }
    }
    Ok(())
}

/// Stages 1-2 for one worker: forward/backward over the shard's
/// accumulation chunks; returns (mean loss, batch top-1 hits, samples).
fn forward_backward(
    worker: &mut Worker,
    chunks: &[Batch],
) -> Result<(f64, usize, usize), TrainError> {
    let rank = worker.rank;
    worker.net.clear_iteration();
    let mut loss_sum = 0.0;
    let mut hits = 0;
    let mut samples = 0;
    for batch in chunks {
        let (logits, loss) = worker
            .net
            .forward_train(batch)
            .map_err(stage_err(1, rank))?;
        worker
            .net
            .backward(&logits, &batch.labels)
            .map_err(stage_err(2, rank))?;
        loss_sum += loss;
        for i in 0..logits.rows() {
            let label = metrics::argmax_row(batch.labels.row(i));
            if metrics::argmax_row(logits.row(i)) == label {
                hits += 1;
            }
        }
        samples += batch.size();
    }
    if chunks.len() > 1 {
        worker.net.scale_grads(1.0 / chunks.len() as f64);
    }
    Ok((loss_sum / chunks.len() as f64, hits, samples))
}

/// Stage-3 segments for one worker: gradients always; packed factors and
/// BN Fisher statistics only for the kinds being refreshed.
fn stage3_segments(
    worker: &Worker,
    decisions: &RefreshDecision,
    bn_mode: BnFimMode,
) -> Result<Vec<Segment>, TrainError> {
    let rank = worker.rank;
    let mut segments = Vec::new();
    for (idx, layer) in worker.net.layers.iter().enumerate() {
        segments.push(Segment::unpacked(
            idx,
            SegmentKind::Grad,
            layer.record.weight_grad.data().to_vec(),
        ));
        if layer.spec.is_kron() {
            if decisions.a {
                let cap = layer
                    .record
                    .captured_input
                    .as_ref()
                    .ok_or_else(|| TrainError::Stage {
                        stage: 3,
                        worker: rank,
                        detail: format!("layer {idx} missing captured input"),
                    })?;
                let a = fim::compute_a_factor(cap).map_err(stage_err(3, rank))?;
                let packed = linalg::pack_symmetric(&a).map_err(stage_err(3, rank))?;
                segments.push(
                    Segment::packed(idx, SegmentKind::AFactor, packed.into_values())
                        .map_err(stage_err(3, rank))?,
                );
            }
            if decisions.g {
                let cap = layer
                    .record
                    .captured_output_grad
                    .as_ref()
                    .ok_or_else(|| TrainError::Stage {
                        stage: 3,
                        worker: rank,
                        detail: format!("layer {idx} missing captured output grads"),
                    })?;
                let g = fim::compute_g_factor(cap).map_err(stage_err(3, rank))?;
                let packed = linalg::pack_symmetric(&g).map_err(stage_err(3, rank))?;
                segments.push(
                    Segment::packed(idx, SegmentKind::GFactor, packed.into_values())
                        .map_err(stage_err(3, rank))?,
                );
            }
        } else if decisions.f_bn {
            let block =
                fim::compute_bn_block_for_layer(layer, bn_mode).map_err(stage_err(3, rank))?;
            let seg = match block.data {
                BnFisherData::Full(f) => {
                    let packed = linalg::pack_symmetric(&f).map_err(stage_err(3, rank))?;
                    Segment::packed(idx, SegmentKind::BnFisher, packed.into_values())
                        .map_err(stage_err(3, rank))?
                }
                BnFisherData::Diagonal(d) => Segment::unpacked(idx, SegmentKind::BnFisher, d),
            };
            segments.push(seg);
        }
    }
    Ok(segments)
}

struct OwnedStage3 {
    grads: HashMap<usize, Vec<f64>>,
    a_factors: HashMap<usize, DenseMatrix>,
    g_factors: HashMap<usize, DenseMatrix>,
    bn_blocks: HashMap<usize, BnFisherData>,
}

fn sort_owned(segments: Vec<Segment>, bn_mode: BnFimMode) -> Result<OwnedStage3, CollectiveError> {
    let mut owned = OwnedStage3 {
        grads: HashMap::new(),
        a_factors: HashMap::new(),
        g_factors: HashMap::new(),
        bn_blocks: HashMap::new(),
    };
    for seg in segments {
        match seg.kind {
            SegmentKind::Grad => {
                owned.grads.insert(seg.layer_index, seg.payload);
            }
            SegmentKind::AFactor => {
                let p = crate::linalg::SymmetricPacked::from_values(seg.payload)
                    .map_err(|_| CollectiveError::BadPackedLength { len: 0 })?;
                owned
                    .a_factors
                    .insert(seg.layer_index, linalg::unpack_symmetric(&p));
            }
            SegmentKind::GFactor => {
                let p = crate::linalg::SymmetricPacked::from_values(seg.payload)
                    .map_err(|_| CollectiveError::BadPackedLength { len: 0 })?;
                owned
                    .g_factors
                    .insert(seg.layer_index, linalg::unpack_symmetric(&p));
            }
            SegmentKind::BnFisher => {
                let data = match bn_mode {
                    BnFimMode::Full => {
                        let p = crate::linalg::SymmetricPacked::from_values(seg.payload)
                            .map_err(|_| CollectiveError::BadPackedLength { len: 0 })?;
                        BnFisherData::Full(linalg::unpack_symmetric(&p))
                    }
                    BnFimMode::Diagonal => BnFisherData::Diagonal(seg.payload),
                };
                owned.bn_blocks.insert(seg.layer_index, data);
            }
            SegmentKind::PrecondGrad => {}
        }
    }
    Ok(owned)
}

/// Track a refreshed factor's Diff and store the new snapshot.
fn record_diff(
    worker: &mut Worker,
    layer: usize,
    kind: FactorKind,
    new: &DenseMatrix,
    diffs: &mut HashMap<(usize, FactorKind), f64>,
) {
    if let Some(prev) = worker.prev_factors.get(&(layer, kind)) {
        if let Some(d) = diff_metric(new, prev) {
            diffs.insert((layer, kind), d);
        }
    }
    worker.prev_factors.insert((layer, kind), new.clone());
}

fn bn_data_as_matrix(data: &BnFisherData) -> DenseMatrix {
    match data {
        BnFisherData::Full(f) => f.clone(),
        BnFisherData::Diagonal(d) => DenseMatrix::from_values(1, d.len(), d.clone()),
    }
}

/// One iteration of the distributed K-FAC optimizer (Stages 1-6 plus the
/// parameter update). `shards[w]` holds worker w's accumulation chunks of
/// its shard of the global batch.
pub fn kfac_iteration(
    pool: &mut WorkerPool,
    shards: &[Vec<Batch>],
    iterations_per_epoch: usize,
) -> Result<IterationTrace, TrainError> {
    validate_shards(pool, shards)?;
    let t = pool.iteration;
    let epoch = t as f64 / iterations_per_epoch as f64;
    let epoch_int = t / iterations_per_epoch as u64;
    let decisions = staleness_controller(t, epoch_int, &pool.settings.staleness);
    let p = pool.worker_count();

    // stages 1-2: data-parallel forward/backward with captures
    let mut loss_sum = 0.0;
    let mut hits = 0;
    let mut samples = 0;
    for (worker, chunks) in pool.workers.iter_mut().zip(shards) {
        let (loss, h, n) = forward_backward(worker, chunks)?;
        loss_sum += loss;
        hits += h;
        samples += n;
    }
    let loss = loss_sum / p as f64;
    if !loss.is_finite() {
        return Err(TrainError::Stage {
            stage: 2,
            worker: 0,
            detail: format!("non-finite loss {loss}"),
        });
    }

    // stage 3: reduce gradients (+ refreshed factors) to layer owners
    let bn_mode = pool.settings.bn_mode;
    let mut inputs = Vec::with_capacity(p);
    for worker in &pool.workers {
        inputs.push(stage3_segments(worker, &decisions, bn_mode)?);
    }
    let sent_before = pool.ledger.total_sent_bytes();
    let scattered = reduce_scatter_v(&inputs, &pool.assignment, ReduceOp::Mean, &mut pool.ledger, t)
        .map_err(stage_err(3, 0))?;
    let stage3_bytes = pool.ledger.total_sent_bytes() - sent_before;

    // stages 4-5: owners refresh curvature and precondition
    let gamma = pool.gamma;
    let gamma_bn = schedules::bn_damping(gamma, pool.settings.damping.rho_bn);
    let stat_ema = pool.settings.stat_ema;
    let mut diffs: HashMap<(usize, FactorKind), f64> = HashMap::new();
    let mut owned_outputs: Vec<Vec<Segment>> = Vec::with_capacity(p);
    for (worker, segments) in pool.workers.iter_mut().zip(scattered) {
        let rank = worker.rank;
        let owned = sort_owned(segments, bn_mode).map_err(stage_err(4, rank))?;
        let mut out = Vec::new();
        let layer_specs: Vec<_> = worker.net.layers.iter().map(|l| l.spec).collect();
        for (layer_idx, grad_flat) in {
            let mut v: Vec<_> = owned.grads.iter().map(|(k, v)| (*k, v.clone())).collect();
            v.sort_by_key(|(k, _)| *k);
            v
        } {
            let spec = layer_specs[layer_idx];
            if spec.is_kron() {
                let d_out = spec.d_out();
                let d_a = spec.input_cols().expect("kron layer");
                let grad = DenseMatrix::from_values(d_out, d_a, grad_flat);
                if decisions.a {
                    let new_raw = owned.a_factors.get(&layer_idx).cloned().ok_or_else(|| {
                        TrainError::Stage {
                            stage: 4,
                            worker: rank,
                            detail: format!("layer {layer_idx} missing reduced A factor"),
                        }
                    })?;
                    let prev = worker.pairs.get(&layer_idx).map(|p| p.a_factor.clone());
                    let blended = fim::blend_ema(new_raw, prev.as_ref(), stat_ema);
                    record_diff(worker, layer_idx, FactorKind::A, &blended, &mut diffs);
                    match worker.pairs.get_mut(&layer_idx) {
                        Some(pair) => pair.a_factor = blended,
                        None => {
                            worker
                                .pairs
                                .insert(layer_idx, KroneckerPair::new(blended, DenseMatrix::zeros(d_out, d_out)));
                        }
                    }
                }
                if decisions.g {
                    let new_raw = owned.g_factors.get(&layer_idx).cloned().ok_or_else(|| {
                        TrainError::Stage {
                            stage: 4,
                            worker: rank,
                            detail: format!("layer {layer_idx} missing reduced G factor"),
                        }
                    })?;
                    let prev = worker.pairs.get(&layer_idx).map(|p| p.g_factor.clone());
                    let blended = fim::blend_ema(new_raw, prev.as_ref(), stat_ema);
                    record_diff(worker, layer_idx, FactorKind::G, &blended, &mut diffs);
                    match worker.pairs.get_mut(&layer_idx) {
                        Some(pair) => pair.g_factor = blended,
                        None => {
                            return Err(TrainError::Stage {
                                stage: 4,
                                worker: rank,
                                detail: format!("layer {layer_idx} G factor arrived before A"),
                            })
                        }
                    }
                }
                let pair = worker.pairs.get_mut(&layer_idx).ok_or_else(|| {
                    TrainError::Stage {
                        stage: 5,
                        worker: rank,
                        detail: format!("layer {layer_idx} has no Kronecker pair"),
                    }
                })?;
                let precond =
                    fim::precondition(pair, &grad, gamma, decisions.a || decisions.g, t)
                        .map_err(stage_err(5, rank))?;
                out.push(Segment::unpacked(
                    layer_idx,
                    SegmentKind::PrecondGrad,
                    precond.values().to_vec(),
                ));
            } else {
                if decisions.f_bn {
                    let new_data = owned.bn_blocks.get(&layer_idx).cloned().ok_or_else(|| {
                        TrainError::Stage {
                            stage: 4,
                            worker: rank,
                            detail: format!("layer {layer_idx} missing reduced BN block"),
                        }
                    })?;
                    let blended = match (&new_data, worker.bn_blocks.get(&layer_idx)) {
                        (BnFisherData::Full(f), prev) => {
                            let prev_m = prev.and_then(|b| match &b.data {
                                BnFisherData::Full(pf) => Some(pf.clone()),
                                _ => None,
                            });
                            BnFisherData::Full(fim::blend_ema(f.clone(), prev_m.as_ref(), stat_ema))
                        }
                        (BnFisherData::Diagonal(d), prev) => {
                            let prev_d = prev.and_then(|b| match &b.data {
                                BnFisherData::Diagonal(pd) =>

                                    Some(DenseMatrix::from_values(1, pd.len(), pd.clone())),
                                _ => None,
                            });
                            let new_m = DenseMatrix::from_values(1, d.len(), d.clone());
                            let blended = fim::blend_ema(new_m, prev_d.as_ref(), stat_ema);
                            BnFisherData::Diagonal(blended.values().to_vec())
                        }
                    };
                    let snapshot = bn_data_as_matrix(&blended);
                    record_diff(worker, layer_idx, FactorKind::FBn, &snapshot, &mut diffs);
                    worker.bn_blocks.insert(
                        layer_idx,
                        BnFisherBlock {
                            data: blended,
                            last_refresh: Some(t),
                        },
                    );
                }
                let block = worker.bn_blocks.get(&layer_idx).ok_or_else(|| {
                    TrainError::Stage {
                        stage: 5,
                        worker: rank,
                        detail: FimError::StaleInverses.to_string(),
                    }
                })?;
                let precond = fim::precondition_bn(block, &grad_flat, gamma_bn)
                    .map_err(stage_err(5, rank))?;
                out.push(Segment::unpacked(layer_idx, SegmentKind::PrecondGrad, precond));
            }
        }
        owned_outputs.push(out);
    }

    // stage 6: gather preconditioned gradients to every replica
    let sent_before = pool.ledger.total_sent_bytes();
    let gathered = all_gather_v(&owned_outputs, &pool.assignment, &mut pool.ledger, t)
        .map_err(stage_err(6, 0))?;
    let stage6_bytes = pool.ledger.total_sent_bytes() - sent_before;

    // update: identical scalars + identical gathered gradients on every
    // replica keep parameters bitwise equal
    let (eta, momentum) = match pool.settings.constant_rate {
        Some(pair) => pair,
        None => {
            let eta = schedules::learning_rate(&pool.settings.lr, epoch);
            (eta, schedules::momentum(&pool.settings.lr, eta))
        }
    };
    for (worker, segments) in pool.workers.iter_mut().zip(gathered) {
        let rank = worker.rank;
        for seg in segments {
            let layer = &mut worker.net.layers[seg.layer_index];
            let precond = TensorBuffer::from_vec(layer.record.weights.shape(), seg.payload);
            apply_update(&mut layer.record, &precond, eta, momentum)
                .map_err(stage_err(7, rank))?;
            if pool.settings.rescale_weights && layer.spec.is_kron() {
                let d_out = layer.spec.d_out();
                schedules::rescale_weights(layer.record.weights.data_mut(), d_out, 1e-9);
            }
        }
    }

    pool.gamma = schedules::damping_step(&pool.settings.damping, pool.gamma)?;
    pool.iteration += 1;

    let summarize = |kind: FactorKind| -> Option<PercentileSummary> {
        let vals: Vec<f64> = {
            let mut per_layer: Vec<_> = diffs
                .iter()
                .filter(|((_, k), _)| *k == kind)
                .map(|((l, _), v)| (*l, *v))
                .collect();
            per_layer.sort_by_key(|(l, _)| *l);
            per_layer.dedup_by_key(|(l, _)| *l);
            per_layer.into_iter().map(|(_, v)| v).collect()
        };
        metrics::percentiles(&vals).ok()
    };
    let diff_a = summarize(FactorKind::A);
    let diff_g = summarize(FactorKind::G);
    let diff_f_bn = summarize(FactorKind::FBn);
    if diff_a.is_some() || diff_g.is_some() || diff_f_bn.is_some() {
        pool.diff_history.push(DiffRecord {
            iteration: t,
            a: diff_a,
            g: diff_g,
            f_bn: diff_f_bn,
        });
    }

    Ok(IterationTrace {
        iteration: t,
        epoch,
        loss,
        train_acc: hits as f64 / samples as f64,
        gamma: Some(gamma),
        lr: eta,
        momentum,
        refreshed: Some(decisions),
        diff_a,
        diff_g,
        diff_f_bn,
        stage3_bytes,
        stage6_bytes,
    })
}

/// One data-parallel SGD baseline iteration: forward/backward, a
/// deterministic mean-AllReduce of the gradients, then the same momentum
/// update rule.
pub fn sgd_iteration(
    pool: &mut WorkerPool,
    shards: &[Vec<Batch>],
    iterations_per_epoch: usize,
) -> Result<IterationTrace, TrainError> {
    validate_shards(pool, shards)?;
    let t = pool.iteration;
    let epoch = t as f64 / iterations_per_epoch as f64;
    let p = pool.worker_count();

    let mut loss_sum = 0.0;
    let mut hits = 0;
    let mut samples = 0;
    for (worker, chunks) in pool.workers.iter_mut().zip(shards) {
        let (loss, h, n) = forward_backward(worker, chunks)?;
        loss_sum += loss;
        hits += h;
        samples += n;
    }
    let loss = loss_sum / p as f64;
    if !loss.is_finite() {
        return Err(TrainError::Stage {
            stage: 2,
            worker: 0,
            detail: format!("non-finite loss {loss}"),
        });
    }

    let mut inputs = Vec::with_capacity(p);
    for worker in &pool.workers {
        let segs: Vec<Segment> = worker
            .net
            .layers
            .iter()
            .enumerate()
            .map(|(idx, l)| {
                Segment::unpacked(idx, SegmentKind::Grad, l.record.weight_grad.data().to_vec())
            })
            .collect();
        inputs.push(segs);
    }
    let sent_before = pool.ledger.total_sent_bytes();
    let reduced = all_reduce(&inputs, &mut pool.ledger, t).map_err(stage_err(3, 0))?;
    let stage3_bytes = pool.ledger.total_sent_bytes() - sent_before;

    let (eta, momentum) = match pool.settings.constant_rate {
        Some(pair) => pair,
        None => {
            let eta = schedules::learning_rate(&pool.settings.lr, epoch);
            (eta, schedules::momentum(&pool.settings.lr, eta))
        }
    };
    for (worker, segments) in pool.workers.iter_mut().zip(reduced) {
        let rank = worker.rank;
        for seg in segments {
            let layer = &mut worker.net.layers[seg.layer_index];
            let grad = TensorBuffer::from_vec(layer.record.weights.shape(), seg.payload);
            apply_update(&mut layer.record, &grad, eta, momentum).map_err(stage_err(7, rank))?;
        }
    }

    pool.iteration += 1;
    Ok(IterationTrace {
        iteration: t,
        epoch,
        loss,
        train_acc: hits as f64 / samples as f64,
        gamma: None,
        lr: eta,
        momentum,
        refreshed: None,
        diff_a: None,
        diff_g: None,
        diff_f_bn: None,
        stage3_bytes,
        stage6_bytes: 0,
    })
}
