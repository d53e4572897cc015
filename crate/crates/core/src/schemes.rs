//! The six collaborative inference protocols.
//!
//! Every `run_*` function executes one time period as a fixed sequence of
//! steps and records each message and each processing stage it triggered.
//! Nothing is shared between calls; cross-period context is passed in and
//! handed back in [`RoundOutcome::next_context`].

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::descriptors::{average_histograms, cosine, nhi};
use crate::error::{Error, Result};
use crate::models::view_pool;
use crate::network::MessageCatalogue;
use crate::pipeline::Pipeline;
use crate::types::{
    ColorHistogram, Context, Embedding, Message, MessageKind, MessageTrace, MultiViewInstance,
    NodeId, Phase, Prediction, TimePeriod, View,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SchemeId {
    Ci,
    SciE,
    SciCh,
    Ei,
    SeiE,
    SeiCh,
}

impl SchemeId {
    pub const ALL: [SchemeId; 6] = [
        SchemeId::Ci,
        SchemeId::SciE,
        SchemeId::SciCh,
        SchemeId::Ei,
        SchemeId::SeiE,
        SchemeId::SeiCh,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SchemeId::Ci => "CI",
            SchemeId::SciE => "SCI-E",
            SchemeId::SciCh => "SCI-CH",
            SchemeId::Ei => "EI",
            SchemeId::SeiE => "SEI-E",
            SchemeId::SeiCh => "SEI-CH",
        }
    }

    pub fn is_selective(self) -> bool {
        !matches!(self, SchemeId::Ci | SchemeId::Ei)
    }

    /// Inference on the controller (as opposed to local inference plus voting).
    pub fn is_centralized(self) -> bool {
        matches!(self, SchemeId::Ci | SchemeId::SciE | SchemeId::SciCh)
    }

    pub fn uses_embedding_context(self) -> bool {
        matches!(self, SchemeId::SciE | SchemeId::SeiE)
    }

    pub fn uses_histogram_context(self) -> bool {
        matches!(self, SchemeId::SciCh | SchemeId::SeiCh)
    }

    pub fn default_gamma(self) -> Option<f64> {
        if self.uses_embedding_context() {
            Some(0.4)
        } else if self.uses_histogram_context() {
            Some(0.7)
        } else {
            None
        }
    }
}

impl fmt::Display for SchemeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SchemeId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace('_', "-");
        SchemeId::ALL
            .into_iter()
            .find(|id| id.name() == norm)
            .ok_or_else(|| Error::config(format!("unknown scheme `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SchemeConfig {
    pub scheme: SchemeId,
    /// Similarity threshold; present exactly for selective schemes.
    pub gamma: Option<f64>,
    pub bins: usize,
    /// Per-node availability, indexed by node. Nodes past the end are
    /// available.
    pub availability: Vec<bool>,
    /// When histogram gating would discard every view, let the node with the
    /// lowest similarity through anyway.
    pub single_view_fallback: bool,
    pub catalogue: MessageCatalogue,
}

impl SchemeConfig {
    pub fn new(scheme: SchemeId) -> Self {
        SchemeConfig {
            scheme,
            gamma: scheme.default_gamma(),
            bins: 32,
            availability: Vec::new(),
            single_view_fallback: true,
            catalogue: MessageCatalogue::default(),
        }
    }

    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma = Some(gamma);
        self
    }

    pub fn with_availability(mut self, mask: Vec<bool>) -> Self {
        self.availability = mask;
        self
    }

    pub fn is_available(&self, node: NodeId) -> bool {
        node.index()
            .and_then(|i| self.availability.get(i).copied())
            .unwrap_or(true)
    }

    pub fn validate(&self) -> Result<()> {
        match (self.scheme.is_selective(), self.gamma) {
            (true, Some(g)) if (0.0..=1.0).contains(&g) => {}
            (true, Some(g)) => return Err(Error::config(format!("gamma {g} outside [0, 1]"))),
            (true, None) => {
                return Err(Error::config(format!("{} needs a threshold", self.scheme)))
            }
            (false, Some(_)) => {
                return Err(Error::config(format!("{} takes no threshold", self.scheme)))
            }
            (false, None) => {}
        }
        if self.bins == 0 {
            return Err(Error::config("bins must be >= 1"));
        }
        Ok(())
    }

    fn threshold(&self) -> f64 {
        self.gamma.unwrap_or(1.0)
    }
}

/// Processing stages, used for latency and FLOP accounting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Histogram,
    Extract,
    Similarity,
    Head,
    Pool,
    Average,
    Consensus,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OpRecord {
    pub step: u16,
    pub node: NodeId,
    pub stage: Stage,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Label(Prediction),
    Dropped,
}

impl Verdict {
    pub fn label(self) -> Option<Prediction> {
        match self {
            Verdict::Label(p) => Some(p),
            Verdict::Dropped => None,
        }
    }

    pub fn is_dropped(self) -> bool {
        matches!(self, Verdict::Dropped)
    }
}

/// What one source node did during the round.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeReport {
    pub node: NodeId,
    /// Similarity to the context, when the node compared against one.
    pub similarity: Option<f64>,
    /// Whether the node's view (or local prediction) took part in inference.
    pub selected: bool,
    pub local_prediction: Option<Prediction>,
}

#[derive(Clone, Debug)]
pub struct RoundOutcome {
    pub scheme: SchemeId,
    pub period: TimePeriod,
    pub verdict: Verdict,
    pub trace: MessageTrace,
    /// Views, embeddings or local predictions that reached the controller
    /// and were used for the final decision.
    pub transmitted_views: usize,
    pub available_views: usize,
    pub ops: Vec<OpRecord>,
    pub next_context: Context,
    pub nodes: Vec<NodeReport>,
}

impl RoundOutcome {
    /// A bare outcome carrying only what the accounting functions read.
    pub fn for_accounting(trace: MessageTrace, ops: Vec<OpRecord>, available_views: usize) -> Self {
        RoundOutcome {
            scheme: SchemeId::Ci,
            period: TimePeriod(0),
            verdict: Verdict::Dropped,
            trace,
            transmitted_views: 0,
            available_views,
            ops,
            next_context: Context::Empty,
            nodes: Vec::new(),
        }
    }

    pub fn prediction(&self) -> Option<Prediction> {
        self.verdict.label()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Gate {
    Keep,
    Discard,
}

/// Keep iff `similarity < gamma`.
pub fn quality_gate(similarity: f64, gamma: f64) -> Gate {
    if similarity < gamma {
        Gate::Keep
    } else {
        Gate::Discard
    }
}

/// Most frequent label; ties go to the lowest label.
pub fn consensus(predictions: &[Prediction]) -> Result<Prediction> {
    let mut counts: BTreeMap<Prediction, usize> = BTreeMap::new();
    for p in predictions {
        *counts.entry(*p).or_default() += 1;
    }
    let mut best: Option<(Prediction, usize)> = None;
    for (label, n) in counts {
        if best.is_none_or(|(_, m)| n > m) {
            best = Some((label, n));
        }
    }
    best.map(|(p, _)| p).ok_or(Error::EmptyInput)
}

/// Runs the round for whichever scheme `config` names.
pub fn run_round(
    instance: &MultiViewInstance,
    config: &SchemeConfig,
    pipeline: &Pipeline<'_>,
    prev_context: &Context,
) -> Result<RoundOutcome> {
    match config.scheme {
        SchemeId::Ci => run_ci(instance, config, pipeline),
        SchemeId::SciE => run_sci_e(instance, config, pipeline, prev_context),
        SchemeId::SciCh => run_sci_ch(instance, config, pipeline),
        SchemeId::Ei => run_ei(instance, config, pipeline),
        SchemeId::SeiE => run_sei_e(instance, config, pipeline, prev_context),
        SchemeId::SeiCh => run_sei_ch(instance, config, pipeline),
    }
}

/// Accumulates the trace and stage log of one round.
struct Round<'v> {
    config: &'v SchemeConfig,
    period: TimePeriod,
    views: Vec<&'v View>,
    trace: MessageTrace,
    ops: Vec<OpRecord>,
}

impl<'v> Round<'v> {
    fn start(instance: &'v MultiViewInstance, config: &'v SchemeConfig, expected: SchemeId) -> Result<Self> {
        if config.scheme != expected {
            return Err(Error::config(format!(
                "config is for {}, not {expected}",
                config.scheme
            )));
        }
        config.validate()?;
        let mut views: Vec<&View> = instance
            .views
            .iter()
            .filter(|v| config.is_available(v.node()))
            .collect();
        if views.is_empty() {
            return Err(Error::NoAvailableNodes);
        }
        views.sort_by_key(|v| v.node());
        Ok(Round {
            config,
            period: views[0].period(),
            views,
            trace: MessageTrace::new(),
            ops: Vec::new(),
        })
    }

    fn op(&mut self, step: u16, node: NodeId, stage: Stage) {
        self.ops.push(OpRecord { step, node, stage });
    }

    fn send(&mut self, step: u16, phase: Phase, sender: NodeId, receiver: NodeId, kind: MessageKind, context: Option<&Context>) {
        let payload_bytes = self.config.catalogue.payload(kind, context);
        self.trace.push(
            step,
            phase,
            Message {
                sender,
                receiver,
                kind,
                payload_bytes,
                period: self.period,
            },
        );
    }

    fn nodes(&self) -> Vec<NodeId> {
        self.views.iter().map(|v| v.node()).collect()
    }

    fn uplink(&mut self, step: u16, node: NodeId, kind: MessageKind) {
        self.send(step, Phase::Upstream, node, NodeId::CONTROLLER, kind, None);
    }

    fn broadcast_context(&mut self, step: u16, context: &Context) {
        for node in self.nodes() {
            self.send(step, Phase::ContextDissemination, NodeId::CONTROLLER, node, MessageKind::Context, Some(context));
        }
    }

    fn broadcast_final(&mut self, step: u16) {
        for node in self.nodes() {
            self.send(step, Phase::Downstream, NodeId::CONTROLLER, node, MessageKind::FinalPrediction, None);
        }
    }

    fn finish(
        self,
        verdict: Verdict,
        transmitted_views: usize,
        next_context: Context,
        nodes: Vec<NodeReport>,
    ) -> RoundOutcome {
        RoundOutcome {
            scheme: self.config.scheme,
            period: self.period,
            verdict,
            trace: self.trace,
            transmitted_views,
            available_views: self.views.len(),
            ops: self.ops,
            next_context,
            nodes,
        }
    }
}

fn embedding_context(context: &Context) -> Result<Option<&Embedding>> {
    match context {
        Context::Empty => Ok(None),
        Context::Embedding(e) => Ok(Some(e)),
        Context::Histogram(_) => Err(Error::config(
            "embedding-based schemes need an embedding context",
        )),
    }
}

fn report(node: NodeId, similarity: Option<f64>, selected: bool) -> NodeReport {
    NodeReport {
        node,
        similarity,
        selected,
        local_prediction: None,
    }
}

/// Centralised, non-selective: every node ships its raw view.
pub fn run_ci(
    instance: &MultiViewInstance,
    config: &SchemeConfig,
    pipeline: &Pipeline<'_>,
) -> Result<RoundOutcome> {
    let mut round = Round::start(instance, config, SchemeId::Ci)?;
    let views = round.views.clone();
    for v in &views {
        round.uplink(0, v.node(), MessageKind::View);
    }
    let mut embeddings = Vec::with_capacity(views.len());
    for v in &views {
        round.op(1, NodeId::CONTROLLER, Stage::Extract);
        embeddings.push(pipeline.extract(v)?);
    }
    round.op(1, NodeId::CONTROLLER, Stage::Pool);
    round.op(1, NodeId::CONTROLLER, Stage::Head);
    let label = pipeline.classify_pooled(&embeddings)?;
    round.broadcast_final(1);
    let nodes = views.iter().map(|v| report(v.node(), None, true)).collect();
    Ok(round.finish(Verdict::Label(label), views.len(), Context::Empty, nodes))
}

/// Centralised, gated on cosine similarity to the previous pooled embedding.
pub fn run_sci_e(
    instance: &MultiViewInstance,
    config: &SchemeConfig,
    pipeline: &Pipeline<'_>,
    prev_context: &Context,
) -> Result<RoundOutcome> {
    let mut round = Round::start(instance, config, SchemeId::SciE)?;
    let context = embedding_context(prev_context)?;
    if context.is_some() {
        round.broadcast_context(0, prev_context);
    }
    let views = round.views.clone();
    let mut received = Vec::new();
    let mut nodes = Vec::new();
    for v in &views {
        let node = v.node();
        round.op(1, node, Stage::Extract);
        let e = pipeline.extract(v)?;
        let similarity = match context {
            Some(c) => {
                round.op(1, node, Stage::Similarity);
                Some(cosine(c, &e)?)
            }
            None => None,
        };
        let keep = similarity.is_none_or(|s| quality_gate(s, config.threshold()) == Gate::Keep);
        if keep {
            round.uplink(1, node, MessageKind::Embedding);
            received.push(e);
        }
        nodes.push(report(node, similarity, keep));
    }
    if received.is_empty() {
        return Ok(round.finish(Verdict::Dropped, 0, prev_context.clone(), nodes));
    }
    round.op(2, NodeId::CONTROLLER, Stage::Pool);
    round.op(2, NodeId::CONTROLLER, Stage::Head);
    let pooled = view_pool(&received)?;
    let label = pipeline.head().classify(&pooled)?;
    round.broadcast_final(2);
    let n = received.len();
    Ok(round.finish(Verdict::Label(label), n, Context::Embedding(pooled), nodes))
}

/// Histogram phase shared by the two CH schemes: upload, average, broadcast,
/// compare. Returns the per-node similarities and the selection mask.
fn histogram_gating(
    round: &mut Round<'_>,
    pipeline: &Pipeline<'_>,
) -> Result<(Vec<f64>, Vec<bool>)> {
    let config = round.config;
    let views = round.views.clone();
    let mut hists: Vec<ColorHistogram> = Vec::with_capacity(views.len());
    for v in &views {
        round.op(0, v.node(), Stage::Histogram);
        hists.push(pipeline.hist(v, config.bins)?);
        round.uplink(0, v.node(), MessageKind::Histogram);
    }
    round.op(1, NodeId::CONTROLLER, Stage::Average);
    let average = average_histograms(&hists)?;
    let context = Context::Histogram(average.clone());
    round.broadcast_context(1, &context);
    let mut similarities = Vec::with_capacity(views.len());
    for (v, h) in views.iter().zip(&hists) {
        round.op(2, v.node(), Stage::Similarity);
        similarities.push(nhi(h, &average)?);
    }
    let mut selected: Vec<bool> = similarities
        .iter()
        .map(|s| quality_gate(*s, config.threshold()) == Gate::Keep)
        .collect();
    if config.single_view_fallback && !selected.iter().any(|s| *s) {
        // Views are ordered by node, so the first minimum is the lowest NodeId.
        let mut best = 0;
        for (i, s) in similarities.iter().enumerate() {
            if *s < similarities[best] {
                best = i;
            }
        }
        selected[best] = true;
    }
    Ok((similarities, selected))
}

/// Centralised, gated on histogram intersection with the current average.
pub fn run_sci_ch(
    instance: &MultiViewInstance,
    config: &SchemeConfig,
    pipeline: &Pipeline<'_>,
) -> Result<RoundOutcome> {
    let mut round = Round::start(instance, config, SchemeId::SciCh)?;
    let (similarities, selected) = histogram_gating(&mut round, pipeline)?;
    let views = round.views.clone();
    let mut chosen = Vec::new();
    for (v, keep) in views.iter().zip(&selected) {
        if *keep {
            round.uplink(2, v.node(), MessageKind::View);
            chosen.push(*v);
        }
    }
    let nodes = views
        .iter()
        .zip(similarities.iter().zip(&selected))
        .map(|(v, (s, k))| report(v.node(), Some(*s), *k))
        .collect();
    if chosen.is_empty() {
        return Ok(round.finish(Verdict::Dropped, 0, Context::Empty, nodes));
    }
    let mut embeddings = Vec::with_capacity(chosen.len());
    for v in &chosen {
        round.op(3, NodeId::CONTROLLER, Stage::Extract);
        embeddings.push(pipeline.extract(v)?);
    }
    round.op(3, NodeId::CONTROLLER, Stage::Pool);
    round.op(3, NodeId::CONTROLLER, Stage::Head);
    let label = pipeline.classify_pooled(&embeddings)?;
    round.broadcast_final(3);
    let n = chosen.len();
    Ok(round.finish(Verdict::Label(label), n, Context::Empty, nodes))
}

/// Ensemble, non-selective: local inference everywhere, majority vote.
pub fn run_ei(
    instance: &MultiViewInstance,
    config: &SchemeConfig,
    pipeline: &Pipeline<'_>,
) -> Result<RoundOutcome> {
    let mut round = Round::start(instance, config, SchemeId::Ei)?;
    let views = round.views.clone();
    let mut votes = Vec::with_capacity(views.len());
    let mut nodes = Vec::with_capacity(views.len());
    for v in &views {
        round.op(0, v.node(), Stage::Extract);
        round.op(0, v.node(), Stage::Head);
        let p = pipeline.local_predict(v)?;
        round.uplink(0, v.node(), MessageKind::LocalPrediction);
        votes.push(p);
        nodes.push(NodeReport {
            local_prediction: Some(p),
            ..report(v.node(), None, true)
        });
    }
    round.op(1, NodeId::CONTROLLER, Stage::Consensus);
    let label = consensus(&votes)?;
    round.broadcast_final(1);
    Ok(round.finish(Verdict::Label(label), votes.len(), Context::Empty, nodes))
}

/// Ensemble, gated on cosine similarity to the previous pooled embedding.
/// Embeddings always go up; only gated nodes run their head and vote.
pub fn run_sei_e(
    instance: &MultiViewInstance,
    config: &SchemeConfig,
    pipeline: &Pipeline<'_>,
    prev_context: &Context,
) -> Result<RoundOutcome> {
    let mut round = Round::start(instance, config, SchemeId::SeiE)?;
    let context = embedding_context(prev_context)?;
    if context.is_some() {
        round.broadcast_context(0, prev_context);
    }
    let views = round.views.clone();
    let mut embeddings = Vec::with_capacity(views.len());
    for v in &views {
        round.op(1, v.node(), Stage::Extract);
        embeddings.push(pipeline.extract(v)?);
        round.uplink(1, v.node(), MessageKind::Embedding);
    }
    let mut votes = Vec::new();
    let mut nodes = Vec::with_capacity(views.len());
    for (v, e) in views.iter().zip(&embeddings) {
        let node = v.node();
        let similarity = match context {
            Some(c) => {
                round.op(2, node, Stage::Similarity);
                Some(cosine(c, e)?)
            }
            None => None,
        };
        let keep = similarity.is_none_or(|s| quality_gate(s, config.threshold()) == Gate::Keep);
        let mut local = None;
        if keep {
            round.op(2, node, Stage::Head);
            let p = pipeline.local_predict(v)?;
            round.uplink(2, node, MessageKind::LocalPrediction);
            votes.push(p);
            local = Some(p);
        }
        nodes.push(NodeReport {
            local_prediction: local,
            ..report(node, similarity, keep)
        });
    }
    round.op(3, NodeId::CONTROLLER, Stage::Pool);
    let next = Context::Embedding(view_pool(&embeddings)?);
    if votes.is_empty() {
        return Ok(round.finish(Verdict::Dropped, 0, next, nodes));
    }
    round.op(3, NodeId::CONTROLLER, Stage::Consensus);
    let label = consensus(&votes)?;
    round.broadcast_final(3);
    let n = votes.len();
    Ok(round.finish(Verdict::Label(label), n, next, nodes))
}

/// Ensemble, gated on histogram intersection with the current average.
pub fn run_sei_ch(
    instance: &MultiViewInstance,
    config: &SchemeConfig,
    pipeline: &Pipeline<'_>,
) -> Result<RoundOutcome> {
    let mut round = Round::start(instance, config, SchemeId::SeiCh)?;
    let (similarities, selected) = histogram_gating(&mut round, pipeline)?;
    let views = round.views.clone();
    let mut votes = Vec::new();
    let mut nodes = Vec::with_capacity(views.len());
    for ((v, s), keep) in views.iter().zip(&similarities).zip(&selected) {
        let mut local = None;
        if *keep {
            round.op(2, v.node(), Stage::Extract);
            round.op(2, v.node(), Stage::Head);
            let p = pipeline.local_predict(v)?;
            round.uplink(2, v.node(), MessageKind::LocalPrediction);
            votes.push(p);
            local = Some(p);
        }
        nodes.push(NodeReport {
            local_prediction: local,
            ..report(v.node(), Some(*s), *keep)
        });
    }
    if votes.is_empty() {
        return Ok(round.finish(Verdict::Dropped, 0, Context::Empty, nodes));
    }
    round.op(3, NodeId::CONTROLLER, Stage::Consensus);
    let label = consensus(&votes)?;
    round.broadcast_final(3);
    let n = votes.len();
    Ok(round.finish(Verdict::Label(label), n, Context::Empty, nodes))
}

/// Runs consecutive periods of one scheme, threading the context.
#[derive(Clone, Debug)]
pub struct Session {
    config: SchemeConfig,
    context: Context,
    period: TimePeriod,
}

impl Session {
    pub fn new(config: SchemeConfig) -> Self {
        Session {
            config,
            context: Context::Empty,
            period: TimePeriod(0),
        }
    }

    pub fn with_context(mut self, context: Context) -> Self {
        self.context = context;
        self
    }

    pub fn context(&self) -> &Context {
        &self.context
    }

    pub fn period(&self) -> TimePeriod {
        self.period
    }

    /// Runs the next period. Views are stamped with the session's period.
    pub fn step(&mut self, instance: &MultiViewInstance, pipeline: &Pipeline<'_>) -> Result<RoundOutcome> {
        let mut stamped = instance.clone();
        for v in &mut stamped.views {
            *v = v.clone().with_period(self.period);
        }
        let outcome = run_round(&stamped, &self.config, pipeline, &self.context)?;
        self.context = outcome.next_context.clone();
        self.period = self.period.next();
        Ok(outcome)
    }
}
