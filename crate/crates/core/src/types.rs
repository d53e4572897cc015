//! Domain vocabulary shared by the descriptors, models, protocols and the
//! accounting layer.
//!
//! All values are immutable after construction. Raster data and embedding
//! vectors sit behind `Arc` so that views can be handed to many rounds (and
//! many worker threads) without copying.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Colour channels per pixel. Views are always RGB.
pub const CHANNELS: usize = 3;

/// Default capture resolution.
pub const DEFAULT_VIEW_SIZE: u32 = 224;

/// Default number of object classes.
pub const DEFAULT_CLASSES: usize = 40;

/// Largest class count whose labels still fit the one-byte prediction message.
pub const MAX_CLASSES: usize = 256;

/// A participant in the network: a source node `0..V` or the central controller.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(u32);

impl NodeId {
    pub const CONTROLLER: NodeId = NodeId(u32::MAX);

    pub fn source(index: usize) -> Self {
        let raw = u32::try_from(index).expect("source index fits in u32");
        assert!(raw != u32::MAX, "index collides with the controller sentinel");
        NodeId(raw)
    }

    /// Index of a source node, `None` for the controller.
    pub fn index(self) -> Option<usize> {
        if self.is_controller() {
            None
        } else {
            Some(self.0 as usize)
        }
    }

    pub fn is_controller(self) -> bool {
        self == Self::CONTROLLER
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.index() {
            Some(i) => write!(f, "n{i}"),
            None => f.write_str("ctrl"),
        }
    }
}

/// Discrete time tick.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TimePeriod(pub u64);

impl TimePeriod {
    pub fn next(self) -> Self {
        TimePeriod(self.0 + 1)
    }
}

/// Identifies where a view came from inside a dataset: the instance ordinal
/// and the view's position in that instance's capture list. Used to look up
/// precomputed embeddings and cached features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CaptureId {
    pub instance: u32,
    pub view: u16,
}

impl fmt::Display for CaptureId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.instance, self.view)
    }
}

/// One RGB raster captured by a source node during a time period.
#[derive(Clone, Debug, PartialEq)]
pub struct View {
    width: u32,
    height: u32,
    pixels: Arc<[u8]>,
    node: NodeId,
    period: TimePeriod,
    capture: Option<CaptureId>,
}

impl View {
    /// Builds a view from row-major interleaved RGB bytes.
    pub fn new(width: u32, height: u32, pixels: impl Into<Arc<[u8]>>) -> Result<Self> {
        let pixels = pixels.into();
        let count = width as usize * height as usize;
        if count == 0 {
            return Err(Error::InvalidView(format!("{width}x{height} has no pixels")));
        }
        if pixels.len() != count * CHANNELS {
            return Err(Error::InvalidView(format!(
                "{width}x{height} needs {} bytes, got {}",
                count * CHANNELS,
                pixels.len()
            )));
        }
        Ok(View {
            width,
            height,
            pixels,
            node: NodeId::source(0),
            period: TimePeriod::default(),
            capture: None,
        })
    }

    /// A single-colour view.
    pub fn uniform(width: u32, height: u32, rgb: [u8; 3]) -> Result<Self> {
        let count = width as usize * height as usize;
        let pixels: Vec<u8> = rgb.iter().copied().cycle().take(count * CHANNELS).collect();
        View::new(width, height, pixels)
    }

    pub fn with_node(mut self, node: NodeId) -> Self {
        self.node = node;
        self
    }

    pub fn with_period(mut self, period: TimePeriod) -> Self {
        self.period = period;
        self
    }

    pub fn with_capture(mut self, capture: CaptureId) -> Self {
        self.capture = Some(capture);
        self
    }

    /// Same capture metadata, new pixel data of identical dimensions.
    pub(crate) fn with_pixels(&self, pixels: Vec<u8>) -> Self {
        debug_assert_eq!(pixels.len(), self.pixels.len());
        View {
            pixels: pixels.into(),
            ..self.clone()
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn rgb(&self) -> impl Iterator<Item = [u8; 3]> + '_ {
        self.pixels.chunks_exact(CHANNELS).map(|p| [p[0], p[1], p[2]])
    }

    pub fn node(&self) -> NodeId {
        self.node
    }

    pub fn period(&self) -> TimePeriod {
        self.period
    }

    pub fn capture(&self) -> Option<CaptureId> {
        self.capture
    }
}

/// Fixed-length real feature vector produced by a backbone.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding(Arc<[f64]>);

impl Embedding {
    pub fn new(values: impl Into<Arc<[f64]>>) -> Result<Self> {
        let values = values.into();
        if values.is_empty() {
            return Err(Error::EmptyInput);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteEmbedding);
        }
        Ok(Embedding(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Embedding(self.0.iter().map(|v| v * factor).collect())
    }
}

/// Normalised B×B chroma histogram over the a*/b* plane, row index a*, column b*.
#[derive(Clone, Debug, PartialEq)]
pub struct ColorHistogram {
    bins: usize,
    data: Arc<[f64]>,
}

/// Tolerance on the unit-mass invariant.
pub const HISTOGRAM_MASS_TOLERANCE: f64 = 1e-6;

impl ColorHistogram {
    /// Wraps a flattened row-major B×B matrix. Entries must be non-negative and
    /// sum to one.
    pub fn new(bins: usize, data: impl Into<Arc<[f64]>>) -> Result<Self> {
        let hist = Self::from_raw(bins, data)?;
        let mass = hist.mass();
        if (mass - 1.0).abs() > HISTOGRAM_MASS_TOLERANCE {
            return Err(Error::InvalidHistogram(format!("mass {mass} is not 1")));
        }
        Ok(hist)
    }

    /// Like [`ColorHistogram::new`] without the unit-mass check.
    pub fn from_raw(bins: usize, data: impl Into<Arc<[f64]>>) -> Result<Self> {
        let data = data.into();
        if bins == 0 {
            return Err(Error::InvalidHistogram("zero bins".into()));
        }
        if data.len() != bins * bins {
            return Err(Error::InvalidHistogram(format!(
                "{} entries for {bins}x{bins} bins",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidHistogram("negative or non-finite entry".into()));
        }
        Ok(ColorHistogram { bins, data })
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, a_bin: usize, b_bin: usize) -> f64 {
        self.data[a_bin * self.bins + b_bin]
    }

    pub fn mass(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_normalized(&self) -> bool {
        (self.mass() - 1.0).abs() <= HISTOGRAM_MASS_TOLERANCE
    }
}

/// Per-period context broadcast by the controller.
#[derive(Clone, Debug, Default, PartialEq)]
pub enum Context {
    #[default]
    Empty,
    Embedding(Embedding),
    Histogram(ColorHistogram),
}

impl Context {
    pub fn is_empty(&self) -> bool {
        matches!(self, Context::Empty)
    }
}

/// A class label. Serialised as a single byte on the wire.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Prediction(u8);

impl Prediction {
    pub fn new(label: usize, classes: usize) -> Result<Self> {
        if classes > MAX_CLASSES || label >= classes {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        Ok(Prediction(label as u8))
    }

    pub fn label(self) -> usize {
        self.0 as usize
    }

    pub fn to_byte(self) -> u8 {
        self.0
    }

    pub fn from_byte(byte: u8) -> Self {
        Prediction(byte)
    }
}

impl fmt::Display for Prediction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A labelled multi-view collection: the views captured by the nodes in one
/// period, plus optional held-out views used to derive the previous-period
/// context.
#[derive(Clone, Debug)]
pub struct MultiViewInstance {
    pub instance_id: String,
    pub true_label: Prediction,
    pub views: Vec<View>,
    pub context_views: Vec<View>,
}

/// Scenario-wide expectations checked by [`validate_instance`].
#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioParams {
    pub view_width: u32,
    pub view_height: u32,
    pub classes: usize,
}

impl Default for ScenarioParams {
    fn default() -> Self {
        ScenarioParams {
            view_width: DEFAULT_VIEW_SIZE,
            view_height: DEFAULT_VIEW_SIZE,
            classes: DEFAULT_CLASSES,
        }
    }
}

/// Checks every structural invariant of an instance against the scenario.
pub fn validate_instance(
    instance: MultiViewInstance,
    params: &ScenarioParams,
) -> Result<MultiViewInstance> {
    if instance.views.is_empty() {
        return Err(Error::EmptyCollection);
    }
    if params.classes > MAX_CLASSES || instance.true_label.label() >= params.classes {
        return Err(Error::LabelOutOfRange {
            label: instance.true_label.label(),
            classes: params.classes,
        });
    }
    let expected = (params.view_width, params.view_height);
    for view in instance.views.iter().chain(&instance.context_views) {
        if view.dims() != expected {
            return Err(Error::dims(
                format!("{}x{}", expected.0, expected.1),
                format!("{}x{}", view.width(), view.height()),
            ));
        }
    }
    let mut seen = HashSet::new();
    for view in &instance.views {
        let node = view.node();
        let Some(index) = node.index() else {
            return Err(Error::InvalidView("view assigned to the controller".into()));
        };
        if !seen.insert(node) {
            return Err(Error::DuplicateNode(index));
        }
    }
    Ok(instance)
}

/// Application-layer message types.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MessageKind {
    View,
    Embedding,
    Histogram,
    Context,
    LocalPrediction,
    FinalPrediction,
}

impl MessageKind {
    pub const ALL: [MessageKind; 6] = [
        MessageKind::View,
        MessageKind::Embedding,
        MessageKind::Histogram,
        MessageKind::Context,
        MessageKind::LocalPrediction,
        MessageKind::FinalPrediction,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MessageKind::View => "view",
            MessageKind::Embedding => "embedding",
            MessageKind::Histogram => "histogram",
            MessageKind::Context => "context",
            MessageKind::LocalPrediction => "local-prediction",
            MessageKind::FinalPrediction => "final-prediction",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Phase {
    ContextDissemination,
    Upstream,
    Downstream,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::ContextDissemination => "context",
            Phase::Upstream => "upstream",
            Phase::Downstream => "downstream",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Message {
    pub sender: NodeId,
    pub receiver: NodeId,
    pub kind: MessageKind,
    pub payload_bytes: u64,
    pub period: TimePeriod,
}

/// One trace record: the message, the phase it belongs to and the index of
/// the protocol step that emitted it. Steps run sequentially; messages in the
/// same step are concurrent.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TraceEntry {
    pub step: u16,
    pub phase: Phase,
    pub message: Message,
}

/// Ordered, append-only record of the messages exchanged in one round.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MessageTrace {
    entries: Vec<TraceEntry>,
}

impl MessageTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, step: u16, phase: Phase, message: Message) {
        if let Some(last) = self.entries.last() {
            debug_assert!(step >= last.step, "trace steps must not go backwards");
        }
        self.entries.push(TraceEntry {
            step,
            phase,
            message,
        });
    }

    pub fn entries(&self) -> &[TraceEntry] {
        &self.entries
    }

    pub fn messages(&self) -> impl Iterator<Item = &Message> {
        self.entries.iter().map(|e| &e.message)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count(&self, kind: MessageKind) -> usize {
        self.messages().filter(|m| m.kind == kind).count()
    }

    /// Payload bytes per message kind.
    pub fn payload_by_kind(&self) -> BTreeMap<MessageKind, u64> {
        let mut out = BTreeMap::new();
        for m in self.messages() {
            *out.entry(m.kind).or_default() += m.payload_bytes;
        }
        out
    }

    pub fn kinds(&self) -> Vec<MessageKind> {
        let mut kinds: Vec<_> = self.messages().map(|m| m.kind).collect();
        kinds.sort();
        kinds.dedup();
        kinds
    }
}
