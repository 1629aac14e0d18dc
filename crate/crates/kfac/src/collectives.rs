//! In-process collective communication over simulated workers, with
//! variable-length segments, deterministic rank-order reduction, and
//! exact element/byte accounting (symmetric payloads travel packed).
//!
//! Collectives are synchronization barriers: each call takes every
//! worker's contribution at once and produces every worker's result, so
//! the same code serves a sequential round-robin pool or real threads.

use crate::linalg::packed_len;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CollectiveError {
    #[error("worker {worker} segment schema differs from rank 0: {detail}")]
    SchemaMismatch { worker: usize, detail: String },
    #[error("layer {0} has no assigned owner")]
    UnassignedLayer(usize),
    #[error("missing segment for layer {layer} on owner {owner}")]
    MissingOwnerSegment { layer: usize, owner: usize },
    #[error("redundant owners disagree on layer {layer}")]
    RedundantOwnerMismatch { layer: usize },
    #[error("packed payload length {len} is not triangular")]
    BadPackedLength { len: usize },
    #[error("collective requires at least one worker")]
    NoWorkers,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SegmentKind {
    Grad,
    AFactor,
    GFactor,
    BnFisher,
    PrecondGrad,
}

impl SegmentKind {
    pub fn name(&self) -> &'static str {
        match self {
            SegmentKind::Grad => "grad",
            SegmentKind::AFactor => "a_factor",
            SegmentKind::GFactor => "g_factor",
            SegmentKind::BnFisher => "bn_fisher",
            SegmentKind::PrecondGrad => "precond_grad",
        }
    }
}

/// One variable-length payload travelling through a collective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub layer_index: usize,
    pub kind: SegmentKind,
    pub payload: Vec<f64>,
    pub packed: bool,
}

impl Segment {
    pub fn unpacked(layer_index: usize, kind: SegmentKind, payload: Vec<f64>) -> Self {
        Segment {
            layer_index,
            kind,
            payload,
            packed: false,
        }
    }

    /// A packed-symmetric payload; the length must be triangular.
    pub fn packed(
        layer_index: usize,
        kind: SegmentKind,
        payload: Vec<f64>,
    ) -> Result<Self, CollectiveError> {
        let len = payload.len();
        let dim = ((((8 * len + 1) as f64).sqrt() - 1.0) / 2.0).round() as usize;
        if packed_len(dim) != len {
            return Err(CollectiveError::BadPackedLength { len });
        }
        Ok(Segment {
            layer_index,
            kind,
            payload,
            packed: true,
        })
    }

    fn schema(&self) -> (usize, SegmentKind, usize, bool) {
        (self.layer_index, self.kind, self.payload.len(), self.packed)
    }
}

/// Layer ownership for the model-parallel stages.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkerAssignment {
    pub layer_to_workers: Vec<Vec<usize>>,
    pub worker_to_layers: Vec<Vec<usize>>,
}

impl WorkerAssignment {
    pub fn workers(&self) -> usize {
        self.worker_to_layers.len()
    }

    pub fn layers(&self) -> usize {
        self.layer_to_workers.len()
    }

    pub fn owners(&self, layer: usize) -> Result<&[usize], CollectiveError> {
        self.layer_to_workers
            .get(layer)
            .filter(|o| !o.is_empty())
            .map(|o| o.as_slice())
            .ok_or(CollectiveError::UnassignedLayer(layer))
    }

    pub fn owns(&self, worker: usize, layer: usize) -> bool {
        self.layer_to_workers
            .get(layer)
            .is_some_and(|o| o.contains(&worker))
    }
}

/// Round-robin layer-to-worker assignment. With more workers than layers
/// the surplus workers take layers redundantly in cyclic order, so every
/// worker holds at least one layer.
pub fn assign_layers(layers: usize, workers: usize) -> WorkerAssignment {
    assert!(layers >= 1 && workers >= 1, "need at least one of each");
    let mut layer_to_workers = vec![Vec::new(); layers];
    let mut worker_to_layers = vec![Vec::new(); workers];
    if workers <= layers {
        for l in 0..layers {
            let w = l % workers;
            layer_to_workers[l].push(w);
            worker_to_layers[w].push(l);
        }
    } else {
        for w in 0..workers {
            let l = w % layers;
            layer_to_workers[l].push(w);
            worker_to_layers[w].push(l);
        }
    }
    WorkerAssignment {
        layer_to_workers,
        worker_to_layers,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Collective {
    ReduceScatterV,
    AllGatherV,
    AllReduce,
}

impl Collective {
    pub fn name(&self) -> &'static str {
        match self {
            Collective::ReduceScatterV => "reduce_scatter_v",
            Collective::AllGatherV => "all_gather_v",
            Collective::AllReduce => "all_reduce",
        }
    }

    fn idx(&self) -> usize {
        match self {
            Collective::ReduceScatterV => 0,
            Collective::AllGatherV => 1,
            Collective::AllReduce => 2,
        }
    }
}

/// The reduction operator; factors and gradients are per-shard means over
/// equal shards, so mean-of-means is exact.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Mean,
}

const ELEM_BYTES: u64 = 8;

/// One emitted accounting row (sent traffic, aggregated per worker and
/// packed flag within a collective call).
#[derive(Debug, Clone, PartialEq)]
pub struct LedgerRow {
    pub collective: Collective,
    pub iteration: u64,
    pub worker: usize,
    pub elements: u64,
    pub bytes: u64,
    pub packed: bool,
}

/// Cumulative element/byte counts per worker plus the emitted rows.
#[derive(Debug, Clone, Default)]
pub struct CommLedger {
    pub rows: Vec<LedgerRow>,
    sent_elements: Vec<u64>,
    recv_elements: Vec<u64>,
    sent_by_collective: [u64; 3],
    recv_by_collective: [u64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkerTotals {
    pub worker: usize,
    pub sent_elements: u64,
    pub sent_bytes: u64,
    pub recv_elements: u64,
    pub recv_bytes: u64,
}

impl CommLedger {
    pub fn new(workers: usize) -> Self {
        CommLedger {
            rows: Vec::new(),
            sent_elements: vec![0; workers],
            recv_elements: vec![0; workers],
            sent_by_collective: [0; 3],
            recv_by_collective: [0; 3],
        }
    }

    fn record_call(
        &mut self,
        collective: Collective,
        iteration: u64,
        sent: &[[u64; 2]],
        recv: &[u64],
    ) {
        for (w, per_packed) in sent.iter().enumerate() {
            for (packed, elements) in [(false, per_packed[0]), (true, per_packed[1])] {
                if elements == 0 {
                    continue;
                }
                self.rows.push(LedgerRow {
                    collective,
                    iteration,
                    worker: w,
                    elements,
                    bytes: elements * ELEM_BYTES,
                    packed,
                });
                self.sent_elements[w] += elements;
                self.sent_by_collective[collective.idx()] += elements;
            }
        }
        for (w, elements) in recv.iter().enumerate() {
            self.recv_elements[w] += elements;
            self.recv_by_collective[collective.idx()] += elements;
        }
    }

    pub fn total_sent_bytes(&self) -> u64 {
        self.sent_elements.iter().sum::<u64>() * ELEM_BYTES
    }

    pub fn sent_elements_by(&self, collective: Collective) -> u64 {
        self.sent_by_collective[collective.idx()]
    }

    pub fn recv_elements_by(&self, collective: Collective) -> u64 {
        self.recv_by_collective[collective.idx()]
    }

    /// Per-worker cumulative totals.
    pub fn report(&self) -> Vec<WorkerTotals> {
        self.sent_elements
            .iter()
            .zip(&self.recv_elements)
            .enumerate()
            .map(|(worker, (s, r))| WorkerTotals {
                worker,
                sent_elements: *s,
                sent_bytes: s * ELEM_BYTES,
                recv_elements: *r,
                recv_bytes: r * ELEM_BYTES,
            })
            .collect()
    }
}

fn check_schema(inputs: &[Vec<Segment>]) -> Result<(), CollectiveError> {
    if inputs.is_empty() {
        return Err(CollectiveError::NoWorkers);
    }
    let reference: Vec<_> = inputs[0].iter().map(Segment::schema).collect();
    for (w, segs) in inputs.iter().enumerate().skip(1) {
        let schema: Vec<_> = segs.iter().map(Segment::schema).collect();
        if schema != reference {
            return Err(CollectiveError::SchemaMismatch {
                worker: w,
                detail: format!("{} segments vs {}", schema.len(), reference.len()),
            });
        }
    }
    Ok(())
}

/// Elementwise mean over workers, summed in ascending rank order so the
/// result is bitwise deterministic.
fn mean_in_rank_order(inputs: &[Vec<Segment>], segment: usize) -> Vec<f64> {
    let p = inputs.len() as f64;
    let mut acc = inputs[0][segment].payload.clone();
    for worker in inputs.iter().skip(1) {
        for (a, v) in acc.iter_mut().zip(&worker[segment].payload) {
            *a += v;
        }
    }
    acc.iter_mut().for_each(|v| *v /= p);
    acc
}

/// Reduce every segment to its elementwise mean over workers and deliver
/// each reduced segment only to the owning worker(s) of its layer.
pub fn reduce_scatter_v(
    inputs: &[Vec<Segment>],
    assignment: &WorkerAssignment,
    _op: ReduceOp,
    ledger: &mut CommLedger,
    iteration: u64,
) -> Result<Vec<Vec<Segment>>, CollectiveError> {
    check_schema(inputs)?;
    let p = inputs.len();
    let mut outputs: Vec<Vec<Segment>> = vec![Vec::new(); p];
    let mut sent = vec![[0u64; 2]; p];
    let mut recv = vec![0u64; p];
    for (j, seg) in inputs[0].iter().enumerate() {
        let owners = assignment.owners(seg.layer_index)?;
        let reduced = mean_in_rank_order(inputs, j);
        let len = seg.payload.len() as u64;
        for &owner in owners {
            outputs[owner].push(Segment {
                layer_index: seg.layer_index,
                kind: seg.kind,
                payload: reduced.clone(),
                packed: seg.packed,
            });
            // every peer ships its contribution to the owner
            for w in 0..p {
                if w != owner {
                    sent[w][usize::from(seg.packed)] += len;
                    recv[owner] += len;
                }
            }
        }
    }
    ledger.record_call(Collective::ReduceScatterV, iteration, &sent, &recv);
    Ok(outputs)
}

/// Broadcast owner-held segments so every worker ends with an identical,
/// (layer, kind)-sorted copy of all segments. Redundant owners must agree
/// bitwise.
pub fn all_gather_v(
    owned: &[Vec<Segment>],
    assignment: &WorkerAssignment,
    ledger: &mut CommLedger,
    iteration: u64,
) -> Result<Vec<Vec<Segment>>, CollectiveError> {
    if owned.is_empty() {
        return Err(CollectiveError::NoWorkers);
    }
    let p = owned.len();
    // collect contributions keyed by (layer, kind)
    let mut keys: Vec<(usize, SegmentKind)> = Vec::new();
    let mut layers_seen = vec![false; assignment.layers()];
    for segs in owned {
        for s in segs {
            let key = (s.layer_index, s.kind);
            if !keys.contains(&key) {
                keys.push(key);
            }
            if let Some(seen) = layers_seen.get_mut(s.layer_index) {
                *seen = true;
            }
        }
    }
    keys.sort();
    for (layer, seen) in layers_seen.iter().enumerate() {
        if !seen {
            let owner = assignment.owners(layer)?[0];
            return Err(CollectiveError::MissingOwnerSegment { layer, owner });
        }
    }

    let mut gathered: Vec<Segment> = Vec::with_capacity(keys.len());
    let mut sent = vec![[0u64; 2]; p];
    let mut recv = vec![0u64; p];
    for (layer, kind) in keys {
        let owners = assignment.owners(layer)?;
        let mut copies: Vec<(usize, &Segment)> = Vec::new();
        for (w, segs) in owned.iter().enumerate() {
            for s in segs {
                if s.layer_index == layer && s.kind == kind {
                    copies.push((w, s));
                }
            }
        }
        for &owner in owners {
            if !copies.iter().any(|(w, _)| *w == owner) {
                return Err(CollectiveError::MissingOwnerSegment { layer, owner });
            }
        }
        for (w, _) in &copies {
            if !owners.contains(w) {
                return Err(CollectiveError::SchemaMismatch {
                    worker: *w,
                    detail: format!("holds layer {layer} it does not own"),
                });
            }
        }
        let first = copies[0].1;
        for (_, c) in &copies[1..] {
            if c.payload != first.payload || c.packed != first.packed {
                return Err(CollectiveError::RedundantOwnerMismatch { layer });
            }
        }
        // lowest-rank owner ships to everyone outside the owner set
        let sender = *owners.iter().min().expect("non-empty owners");
        let len = first.payload.len() as u64;
        for w in 0..p {
            if !owners.contains(&w) {
                sent[sender][usize::from(first.packed)] += len;
                recv[w] += len;
            }
        }
        gathered.push(first.clone());
    }
    ledger.record_call(Collective::AllGatherV, iteration, &sent, &recv);
    Ok(vec![gathered; p])
}

/// Deterministic mean-AllReduce: every worker receives the elementwise
/// mean of every segment, reduced in rank order.
pub fn all_reduce(
    inputs: &[Vec<Segment>],
    ledger: &mut CommLedger,
    iteration: u64,
) -> Result<Vec<Vec<Segment>>, CollectiveError> {
    check_schema(inputs)?;
    let p = inputs.len();
    let mut reduced: Vec<Segment> = Vec::with_capacity(inputs[0].len());
    let mut sent = vec![[0u64; 2]; p];
    let mut recv = vec![0u64; p];
    for (j, seg) in inputs[0].iter().enumerate() {
        let payload = mean_in_rank_order(inputs, j);
        if p > 1 {
            let len = seg.payload.len() as u64;
            for w in 0..p {
                sent[w][usize::from(seg.packed)] += len;
                recv[w] += len;
            }
        }
        reduced.push(Segment {
            layer_index: seg.layer_index,
            kind: seg.kind,
            payload,
            packed: seg.packed,
        });
    }
    ledger.record_call(Collective::AllReduce, iteration, &sent, &recv);
    Ok(vec![reduced; p])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn grad(layer: usize, payload: Vec<f64>) -> Segment {
        Segment::unpacked(layer, SegmentKind::Grad, payload)
    }

    #[test]
    fn assign_round_robin() {
        let a = assign_layers(3, 2);
        assert_eq!(a.worker_to_layers[0], vec![0, 2]);
        assert_eq!(a.worker_to_layers[1], vec![1]);

        let b = assign_layers(4, 4);
        for l in 0..4 {
            assert_eq!(b.layer_to_workers[l], vec![l]);
        }

        let c = assign_layers(2, 5);
        assert!(c.worker_to_layers.iter().all(|ls| !ls.is_empty()));
        assert_eq!(c.layer_to_workers[0], vec![0, 2, 4]);
        assert_eq!(c.layer_to_workers[1], vec![1, 3]);
    }

    #[test]
    fn reduce_scatter_hand_mean() {
        let assignment = WorkerAssignment {
            layer_to_workers: vec![vec![1]],
            worker_to_layers: vec![vec![], vec![0]],
        };
        let inputs = vec![vec![grad(0, vec![2.0, 4.0])], vec![grad(0, vec![4.0, 8.0])]];
        let mut ledger = CommLedger::new(2);
        let out = reduce_scatter_v(&inputs, &assignment, ReduceOp::Mean, &mut ledger, 0).unwrap();
        assert!(out[0].is_empty());
        assert_eq!(out[1][0].payload, vec![3.0, 6.0]);
    }

    #[test]
    fn reduce_scatter_single_worker_identity() {
        let assignment = assign_layers(2, 1);
        let inputs = vec![vec![grad(0, vec![1.0]), grad(1, vec![2.0, 3.0])]];
        let mut ledger = CommLedger::new(1);
        let out = reduce_scatter_v(&inputs, &assignment, ReduceOp::Mean, &mut ledger, 0).unwrap();
        assert_eq!(out[0].len(), 2);
        assert_eq!(out[0][1].payload, vec![2.0, 3.0]);
        // no peers, no traffic
        assert_eq!(ledger.total_sent_bytes(), 0);
    }

    #[test]
    fn reduce_scatter_matches_sequential_oracle() {
        for p in [2usize, 3, 4] {
            let layers = 3;
            let assignment = assign_layers(layers, p);
            let mut rng = crate::rng::stream(&[p as u64]);
            let inputs: Vec<Vec<Segment>> = (0..p)
                .map(|_| {
                    (0..layers)
                        .map(|l| grad(l, (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()))
                        .collect()
                })
                .collect();
            let mut ledger = CommLedger::new(p);
            let out =
                reduce_scatter_v(&inputs, &assignment, ReduceOp::Mean, &mut ledger, 0).unwrap();
            // oracle: gather all, mean in rank order, route to owner
            for l in 0..layers {
                let mut acc = inputs[0][l].payload.clone();
                for w in 1..p {
                    for (a, v) in acc.iter_mut().zip(&inputs[w][l].payload) {
                        *a += v;
                    }
                }
                acc.iter_mut().for_each(|v| *v /= p as f64);
                let owner = assignment.layer_to_workers[l][0];
                let got = out[owner].iter().find(|s| s.layer_index == l).unwrap();
                assert_eq!(got.payload, acc, "P={p} layer {l}");
            }
        }
    }

    #[test]
    fn reduce_scatter_rejects_schema_mismatch() {
        let assignment = assign_layers(1, 2);
        let inputs = vec![vec![grad(0, vec![1.0, 2.0])], vec![grad(0, vec![1.0])]];
        let mut ledger = CommLedger::new(2);
        assert!(matches!(
            reduce_scatter_v(&inputs, &assignment, ReduceOp::Mean, &mut ledger, 0),
            Err(CollectiveError::SchemaMismatch { worker: 1, .. })
        ));
    }

    #[test]
    fn all_gather_two_way_split() {
        let assignment = assign_layers(2, 2);
        let owned = vec![vec![grad(0, vec![1.0, 2.0])], vec![grad(1, vec![3.0])]];
        let mut ledger = CommLedger::new(2);
        let out = all_gather_v(&owned, &assignment, &mut ledger, 0).unwrap();
        assert_eq!(out[0], out[1]);
        assert_eq!(out[0].len(), 2);
        assert_eq!(out[0][0].payload, vec![1.0, 2.0]);
        assert_eq!(out[0][1].payload, vec![3.0]);
    }

    #[test]
    fn all_gather_single_worker_identity() {
        let assignment = assign_layers(1, 1);
        let owned = vec![vec![grad(0, vec![5.0])]];
        let mut ledger = CommLedger::new(1);
        let out = all_gather_v(&owned, &assignment, &mut ledger, 0).unwrap();
        assert_eq!(out[0][0].payload, vec![5.0]);
        assert_eq!(ledger.total_sent_bytes(), 0);
    }

    #[test]
    fn all_gather_redundant_owner_consistency() {
        let assignment = assign_layers(1, 3); // layer 0 owned by all 3
        let seg = grad(0, vec![1.0, 1.0]);
        let owned = vec![vec![seg.clone()], vec![seg.clone()], vec![seg.clone()]];
        let mut ledger = CommLedger::new(3);
        let out = all_gather_v(&owned, &assignment, &mut ledger, 0).unwrap();
        assert_eq!(out.len(), 3);

        let mut bad = owned;
        bad[2][0].payload[0] = 9.0;
        assert!(matches!(
            all_gather_v(&bad, &assignment, &mut ledger, 1),
            Err(CollectiveError::RedundantOwnerMismatch { layer: 0 })
        ));
    }

    #[test]
    fn all_gather_missing_owner_errors() {
        let assignment = assign_layers(2, 2);
        let owned = vec![vec![grad(0, vec![1.0])], vec![]];
        let mut ledger = CommLedger::new(2);
        assert!(matches!(
            all_gather_v(&owned, &assignment, &mut ledger, 0),
            Err(CollectiveError::MissingOwnerSegment { .. })
        ));
    }

    #[test]
    fn composite_equals_direct_all_reduce_bitwise() {
        for p in [2usize, 3, 4] {
            let layers = 4;
            let assignment = assign_layers(layers, p);
            let mut rng = crate::rng::stream(&[0xc0, p as u64]);
            let inputs: Vec<Vec<Segment>> = (0..p)
                .map(|_| {
                    (0..layers)
                        .map(|l| {
                            grad(
                                l,
                                (0..(l + 1) * 2)
                                    .map(|_| rng.random_range(-1.0..1.0))
                                    .collect(),
                            )
                        })
                        .collect()
                })
                .collect();
            let mut ledger = CommLedger::new(p);
            let scattered =
                reduce_scatter_v(&inputs, &assignment, ReduceOp::Mean, &mut ledger, 0).unwrap();
            let gathered = all_gather_v(&scattered, &assignment, &mut ledger, 0).unwrap();
            let direct = all_reduce(&inputs, &mut ledger, 0).unwrap();
            for w in 0..p {
                assert_eq!(gathered[w].len(), direct[w].len());
                for (a, b) in gathered[w].iter().zip(&direct[w]) {
                    assert_eq!(a.layer_index, b.layer_index);
                    let bits_a: Vec<u64> = a.payload.iter().map(|v| v.to_bits()).collect();
                    let bits_b: Vec<u64> = b.payload.iter().map(|v| v.to_bits()).collect();
                    assert_eq!(bits_a, bits_b, "P={p} worker {w}");
                }
            }
        }
    }

    #[test]
    fn ledger_packed_accounting_and_conservation() {
        // two layers over two workers: layer 0 has a single owner
        let assignment = assign_layers(2, 2);
        let packed = Segment::packed(0, SegmentKind::AFactor, vec![0.0; 5050]).unwrap();
        let inputs = vec![vec![packed.clone()], vec![packed]];
        let mut ledger = CommLedger::new(2);
        reduce_scatter_v(&inputs, &assignment, ReduceOp::Mean, &mut ledger, 3).unwrap();
        // one non-owner ships 5050 packed elements to the owner
        assert_eq!(ledger.sent_elements_by(Collective::ReduceScatterV), 5050);
        assert_eq!(
            ledger.recv_elements_by(Collective::ReduceScatterV),
            ledger.sent_elements_by(Collective::ReduceScatterV)
        );
        let row = &ledger.rows[0];
        assert!(row.packed);
        assert_eq!(row.elements, 5050);
        assert_eq!(row.bytes, 5050 * 8);
        assert_eq!(row.iteration, 3);

        // unpacked equivalent costs d^2
        let dense = Segment::unpacked(0, SegmentKind::AFactor, vec![0.0; 10000]);
        let inputs = vec![vec![dense.clone()], vec![dense]];
        let mut ledger2 = CommLedger::new(2);
        reduce_scatter_v(&inputs, &assignment, ReduceOp::Mean, &mut ledger2, 0).unwrap();
        assert_eq!(ledger2.sent_elements_by(Collective::ReduceScatterV), 10000);
    }

    #[test]
    fn ledger_zero_traffic() {
        let ledger = CommLedger::new(3);
        assert_eq!(ledger.total_sent_bytes(), 0);
        assert!(ledger.report().iter().all(|t| t.sent_elements == 0));
    }

    #[test]
    fn packed_segment_validation() {
        assert!(Segment::packed(0, SegmentKind::AFactor, vec![0.0; 6]).is_ok());
        assert!(matches!(
            Segment::packed(0, SegmentKind::AFactor, vec![0.0; 7]),
            Err(CollectiveError::BadPackedLength { len: 7 })
        ));
    }

    #[test]
    fn all_reduce_conservation() {
        let mut rng = crate::rng::stream(&[0xaa]);
        let inputs: Vec<Vec<Segment>> = (0..3)
            .map(|_| vec![grad(0, (0..5).map(|_| rng.random_range(-1.0..1.0)).collect())])
            .collect();
        let mut ledger = CommLedger::new(3);
        all_reduce(&inputs, &mut ledger, 0).unwrap();
        assert_eq!(
            ledger.sent_elements_by(Collective::AllReduce),
            ledger.recv_elements_by(Collective::AllReduce)
        );
        assert_eq!(ledger.sent_elements_by(Collective::AllReduce), 15);
    }
}
