//! Communication and compute accounting.
//!
//! Payload sizes come from a [`MessageCatalogue`], transport overhead from a
//! static TCP/IP model (per-segment headers plus delayed ACKs), and latency
//! from a resource-block split of a 5G slice with capped Shannon efficiency.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::schemes::{RoundOutcome, Stage};
use crate::types::{Context, Message, MessageKind, MessageTrace, NodeId};

/// Bytes per transmitted tensor element (float32).
pub const BYTES_PER_VALUE: u64 = 4;

/// Application-layer payload sizes.
///
/// The dimensions here describe the tensors as they travel on the wire and
/// are independent of the resolution the simulator processes internally.
#[derive(Clone, Debug, PartialEq)]
pub struct MessageCatalogue {
    pub view_width: u64,
    pub view_height: u64,
    pub embedding_dim: u64,
    pub bins: u64,
}

impl Default for MessageCatalogue {
    fn default() -> Self {
        MessageCatalogue {
            view_width: 224,
            view_height: 224,
            embedding_dim: 25_088,
            bins: 32,
        }
    }
}

impl MessageCatalogue {
    pub fn view_bytes(&self) -> u64 {
        self.view_width * self.view_height * 3 * BYTES_PER_VALUE
    }

    pub fn embedding_bytes(&self) -> u64 {
        self.embedding_dim * BYTES_PER_VALUE
    }

    pub fn histogram_bytes(&self) -> u64 {
        self.bins * self.bins * BYTES_PER_VALUE
    }

    pub fn prediction_bytes(&self) -> u64 {
        1
    }

    pub fn context_bytes(&self, context: &Context) -> u64 {
        match context {
            Context::Empty => 0,
            Context::Embedding(_) => self.embedding_bytes(),
            Context::Histogram(_) => self.histogram_bytes(),
        }
    }

    /// Payload of a message kind; context messages need the context variant.
    pub fn payload(&self, kind: MessageKind, context: Option<&Context>) -> u64 {
        match kind {
            MessageKind::View => self.view_bytes(),
            MessageKind::Embedding => self.embedding_bytes(),
            MessageKind::Histogram => self.histogram_bytes(),
            MessageKind::Context => context.map_or(0, |c| self.context_bytes(c)),
            MessageKind::LocalPrediction | MessageKind::FinalPrediction => self.prediction_bytes(),
        }
    }
}

/// Static TCP/IP cost model.
#[derive(Clone, Debug, PartialEq)]
pub struct TransportModel {
    pub mss: u64,
    pub header_per_segment: u64,
    pub ack_every: u64,
    pub ack_size: u64,
    pub per_connection_setup: u64,
}

impl Default for TransportModel {
    fn default() -> Self {
        TransportModel {
            mss: 1460,
            header_per_segment: 40,
            ack_every: 2,
            ack_size: 40,
            per_connection_setup: 0,
        }
    }
}

impl TransportModel {
    pub fn validate(&self) -> Result<()> {
        if self.mss == 0 || self.ack_every == 0 {
            return Err(Error::config("transport mss and ack_every must be >= 1"));
        }
        Ok(())
    }

    /// Segments needed for a payload; an empty payload still costs one.
    pub fn segments(&self, payload: u64) -> u64 {
        payload.div_ceil(self.mss).max(1)
    }
}

/// On-the-wire cost of one application message.
pub fn wire_bytes(msg: &Message, tm: &TransportModel) -> u64 {
    payload_wire_bytes(msg.payload_bytes, tm)
}

pub fn payload_wire_bytes(payload: u64, tm: &TransportModel) -> u64 {
    let segments = tm.segments(payload);
    payload
        + segments * tm.header_per_segment
        + (segments / tm.ack_every) * tm.ack_size
        + tm.per_connection_setup
}

/// Total wire bytes of a round, both directions.
pub fn round_overhead(trace: &MessageTrace, tm: &TransportModel) -> u64 {
    trace.messages().map(|m| wire_bytes(m, tm)).sum()
}

/// Percentage of views not transmitted relative to a baseline.
pub fn transmission_gain(baseline_views: usize, transmitted_views: usize) -> Result<f64> {
    if baseline_views == 0 || transmitted_views > baseline_views {
        return Err(Error::InvalidCounts {
            baseline: baseline_views,
            transmitted: transmitted_views,
        });
    }
    Ok(100.0 * (1.0 - transmitted_views as f64 / baseline_views as f64))
}

/// Radio parameters of the slice shared by the source nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct RadioConfig {
    pub carrier_hz: f64,
    pub bandwidth_hz: f64,
    pub scs_hz: f64,
    pub mimo_layers: u32,
    pub total_rbs: u32,
    pub subcarriers_per_rb: u32,
    pub max_spectral_efficiency: f64,
    pub overhead_factor: f64,
    /// Explicit per-node SNR in dB, indexed by node. Nodes beyond the list
    /// draw theirs uniformly from `snr_range_db` using `snr_seed`.
    pub node_snr_db: Vec<f64>,
    pub snr_range_db: (f64, f64),
    pub snr_seed: u64,
}

impl Default for RadioConfig {
    fn default() -> Self {
        RadioConfig {
            carrier_hz: 3.5e9,
            bandwidth_hz: 50e6,
            scs_hz: 15e3,
            mimo_layers: 2,
            total_rbs: 50,
            subcarriers_per_rb: 12,
            max_spectral_efficiency: 7.4,
            overhead_factor: 0.75,
            node_snr_db: Vec::new(),
            snr_range_db: (0.0, 20.0),
            snr_seed: 0,
        }
    }
}

impl RadioConfig {
    pub fn snr_db(&self, node: NodeId) -> f64 {
        let Some(index) = node.index() else {
            return self.snr_range_db.1;
        };
        if let Some(snr) = self.node_snr_db.get(index) {
            return *snr;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(crate::seed::derive(self.snr_seed, &[index as u64]));
        let (lo, hi) = self.snr_range_db;
        if hi > lo {
            rng.random_range(lo..hi)
        } else {
            lo
        }
    }

    /// Capped Shannon efficiency with the protocol overhead factor applied.
    pub fn spectral_efficiency(&self, snr_db: f64) -> f64 {
        let linear = 10f64.powf(snr_db / 10.0);
        (1.0 + linear).log2().min(self.max_spectral_efficiency) * self.overhead_factor
    }
}

/// Throughput of one node when the slice's RBs are split evenly among
/// `active_nodes` nodes.
pub fn node_throughput(radio: &RadioConfig, node: NodeId, active_nodes: usize) -> f64 {
    let share = radio.total_rbs as f64 / active_nodes.max(1) as f64;
    share
        * radio.subcarriers_per_rb as f64
        * radio.scs_hz
        * radio.mimo_layers as f64
        * radio.spectral_efficiency(radio.snr_db(node))
}

/// Wall time of each processing stage on one class of node, in ms.
#[derive(Clone, Debug, PartialEq)]
pub struct StageTimes {
    pub extract_ms: f64,
    pub head_ms: f64,
    pub pool_ms: f64,
    pub hist_ms: f64,
    pub consensus_ms: f64,
    pub similarity_ms: f64,
    pub average_ms: f64,
}

impl StageTimes {
    pub fn of(&self, stage: Stage) -> f64 {
        match stage {
            Stage::Histogram => self.hist_ms,
            Stage::Extract => self.extract_ms,
            Stage::Similarity => self.similarity_ms,
            Stage::Head => self.head_ms,
            Stage::Pool => self.pool_ms,
            Stage::Average => self.average_ms,
            Stage::Consensus => self.consensus_ms,
        }
    }

    fn values(&self) -> [f64; 7] {
        [
            self.extract_ms,
            self.head_ms,
            self.pool_ms,
            self.hist_ms,
            self.consensus_ms,
            self.similarity_ms,
            self.average_ms,
        ]
    }
}

/// Processing times for source nodes and the controller.
#[derive(Clone, Debug, PartialEq)]
pub struct ProcessingProfile {
    pub source: StageTimes,
    pub controller: StageTimes,
}

impl Default for ProcessingProfile {
    /// Source stage times put a local single-view inference near 20.4 ms; the
    /// controller runs the backbone on faster hardware.
    fn default() -> Self {
        ProcessingProfile {
            source: StageTimes {
                extract_ms: 19.2,
                head_ms: 1.2,
                pool_ms: 0.05,
                hist_ms: 1.5,
                consensus_ms: 0.01,
                similarity_ms: 0.02,
                average_ms: 0.02,
            },
            controller: StageTimes {
                extract_ms: 4.0,
                head_ms: 0.3,
                pool_ms: 0.02,
                hist_ms: 0.5,
                consensus_ms: 0.01,
                similarity_ms: 0.01,
                average_ms: 0.02,
            },
        }
    }
}

impl ProcessingProfile {
    pub fn zero() -> Self {
        let z = StageTimes {
            extract_ms: 0.0,
            head_ms: 0.0,
            pool_ms: 0.0,
            hist_ms: 0.0,
            consensus_ms: 0.0,
            similarity_ms: 0.0,
            average_ms: 0.0,
        };
        ProcessingProfile {
            source: z.clone(),
            controller: z,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = self.source.values().into_iter().chain(self.controller.values());
        if all.into_iter().any(|v| !(v >= 0.0 && v.is_finite())) {
            return Err(Error::config("processing times must be finite and >= 0"));
        }
        Ok(())
    }

    fn times(&self, node: NodeId) -> &StageTimes {
        if node.is_controller() {
            &self.controller
        } else {
            &self.source
        }
    }
}

/// Round latency in ms.
///
/// Protocol steps run one after another. Within a step the controller first
/// finishes its own processing, then every source node works in parallel:
/// local processing plus the airtime of every message it sends or receives in
/// that step. The step lasts as long as its slowest node.
pub fn round_latency(
    outcome: &RoundOutcome,
    radio: &RadioConfig,
    tm: &TransportModel,
    profile: &ProcessingProfile,
) -> f64 {
    let active = outcome.available_views.max(1);
    let mut steps: BTreeMap<u16, StepLoad> = BTreeMap::new();
    for op in &outcome.ops {
        let load = steps.entry(op.step).or_default();
        let t = profile.times(op.node).of(op.stage);
        if op.node.is_controller() {
            load.controller_ms += t;
        } else {
            *load.source_ms.entry(op.node).or_default() += t;
        }
    }
    for entry in outcome.trace.entries() {
        let m = &entry.message;
        let link = if m.sender.is_controller() { m.receiver } else { m.sender };
        let bits = wire_bytes(m, tm) as f64 * 8.0;
        let ms = 1e3 * bits / node_throughput(radio, link, active);
        *steps
            .entry(entry.step)
            .or_default()
            .source_ms
            .entry(link)
            .or_default() += ms;
    }
    steps
        .values()
        .map(|s| s.controller_ms + s.source_ms.values().copied().fold(0.0, f64::max))
        .sum()
}

#[derive(Default)]
struct StepLoad {
    controller_ms: f64,
    source_ms: BTreeMap<NodeId, f64>,
}

/// FLOPs per model stage.
#[derive(Clone, Debug, PartialEq)]
pub struct ComputeCostModel {
    pub backbone_flops: u64,
    pub pool_flops: u64,
    pub head_flops: u64,
}

impl Default for ComputeCostModel {
    fn default() -> Self {
        ComputeCostModel {
            backbone_flops: 30_700_000_000,
            pool_flops: 300_000,
            head_flops: 239_400_000,
        }
    }
}

impl ComputeCostModel {
    pub fn of(&self, stage: Stage) -> u64 {
        match stage {
            Stage::Extract => self.backbone_flops,
            Stage::Pool => self.pool_flops,
            Stage::Head => self.head_flops,
            Stage::Histogram | Stage::Similarity | Stage::Average | Stage::Consensus => 0,
        }
    }
}

/// Model FLOPs of one round split by where they ran.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FlopTally {
    pub per_source: BTreeMap<NodeId, u64>,
    pub controller: u64,
}

impl FlopTally {
    pub fn source_total(&self) -> u64 {
        self.per_source.values().sum()
    }
}

pub fn round_flops(outcome: &RoundOutcome, cost: &ComputeCostModel) -> FlopTally {
    let mut tally = FlopTally::default();
    for op in &outcome.ops {
        let flops = cost.of(op.stage);
        if op.node.is_controller() {
            tally.controller += flops;
        } else {
            *tally.per_source.entry(op.node).or_default() += flops;
        }
    }
    tally
}
