//! Experiment runner: sweeps schemes over a dataset and aggregates metrics.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::dataset::{add_noise, generate_synthetic, load_dataset, Dataset, NoiseSpec, SignalPower, SyntheticSpec};
use crate::error::{Error, Result};
use crate::models::{view_pool, Backbone, CentroidHead, Head, PrecomputedBackbone, ToyModel, ToyModelParams};
use crate::network::{
    round_flops, round_latency, round_overhead, transmission_gain, ComputeCostModel, MessageCatalogue,
    ProcessingProfile, RadioConfig, TransportModel,
};
use crate::pipeline::{FeatureCache, Pipeline};
use crate::schemes::{run_round, RoundOutcome, SchemeConfig, SchemeId};
use crate::seed::derive;
use crate::types::{Context, MultiViewInstance, Prediction, TimePeriod, View};

#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSource {
    Manifest(PathBuf),
    Synthetic(SyntheticSpec),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DroppedPolicy {
    #[default]
    CountAsError,
    Exclude,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Backend {
    /// Palette-projection model; works on any raster dataset.
    #[default]
    Toy,
    /// Embeddings from dataset sidecars with a class-mean head.
    Precomputed,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Execution {
    #[default]
    Parallel,
    Sequential,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub schemes: Vec<SchemeId>,
    pub n_values: Vec<usize>,
    /// Thresholds for selective schemes; empty means each scheme's default.
    pub gammas: Vec<f64>,
    pub repeats: usize,
    pub seed: u64,
    /// Noise levels in dB; `None` is the clean dataset.
    pub snr_db: Vec<Option<f64>>,
    pub noise_power: SignalPower,
    /// Numbers of randomly chosen offline nodes per round.
    pub failures: Vec<usize>,
    /// Hold out half of each instance's views as previous-period context.
    pub split_context: bool,
    pub dropped: DroppedPolicy,
    pub backend: Backend,
    pub bins: usize,
    /// Toy backend parameters. For synthetic datasets the palette fields
    /// (seed, classes, bins, colours per class) are taken from the generator.
    pub toy: ToyModelParams,
    pub catalogue: MessageCatalogue,
    pub transport: TransportModel,
    pub radio: RadioConfig,
    pub profile: ProcessingProfile,
    pub cost: ComputeCostModel,
    pub execution: Execution,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetSource::Synthetic(SyntheticSpec::default()),
            schemes: SchemeId::ALL.to_vec(),
            n_values: (1..=6).collect(),
            gammas: Vec::new(),
            repeats: 12,
            seed: 0,
            snr_db: vec![None],
            noise_power: SignalPower::MeanSquare,
            failures: vec![0],
            split_context: true,
            dropped: DroppedPolicy::CountAsError,
            backend: Backend::Toy,
            bins: 32,
            toy: ToyModelParams::default(),
            catalogue: MessageCatalogue::default(),
            transport: TransportModel::default(),
            radio: RadioConfig::default(),
            profile: ProcessingProfile::default(),
            cost: ComputeCostModel::default(),
            execution: Execution::Parallel,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::config(format!("`{key}`: expected a boolean, got `{value}`"))),
    }
}

/// `1..6`, `1,3,5` or a single number.
fn parse_range(key: &str, value: &str) -> Result<Vec<usize>> {
    if let Some((a, b)) = value.split_once("..") {
        let (a, b): (usize, usize) = (parse(key, a)?, parse(key, b.trim_start_matches('='))?);
        if a > b {
            return Err(Error::config(format!("`{key}`: empty range {value}")));
        }
        return Ok((a..=b).collect());
    }
    parse_list(key, value)
}

fn parse_snr_list(key: &str, value: &str) -> Result<Vec<Option<f64>>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| match s {
            "clean" | "none" | "inf" => Ok(None),
            _ => parse(key, s).map(Some),
        })
        .collect()
}

impl ExperimentConfig {
    /// Parses a flat `key = value` file on top of the defaults.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut config = ExperimentConfig::default();
        config.apply_kv(text)?;
        Ok(config)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Self::from_kv(&text)
    }

    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected `key = value`", i + 1)))?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    fn synthetic_mut(&mut self) -> &mut SyntheticSpec {
        if !matches!(self.dataset, DatasetSource::Synthetic(_)) {
            self.dataset = DatasetSource::Synthetic(SyntheticSpec::default());
        }
        match &mut self.dataset {
            DatasetSource::Synthetic(s) => s,
            DatasetSource::Manifest(_) => unreachable!(),
        }
    }

    /// Sets one configuration key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "dataset" => {
                self.dataset = match value {
                    "synthetic" => DatasetSource::Synthetic(SyntheticSpec::default()),
                    path => DatasetSource::Manifest(PathBuf::from(path)),
                }
            }
            "synthetic.classes" => self.synthetic_mut().classes = parse(key, value)?,
            "synthetic.instances_per_class" => self.synthetic_mut().instances_per_class = parse(key, value)?,
            "synthetic.views" => self.synthetic_mut().views_per_instance = parse(key, value)?,
            "synthetic.width" => self.synthetic_mut().width = parse(key, value)?,
            "synthetic.height" => self.synthetic_mut().height = parse(key, value)?,
            "synthetic.colors_per_class" => self.synthetic_mut().colors_per_class = parse(key, value)?,
            "synthetic.noise" => self.synthetic_mut().within_class_noise = parse(key, value)?,
            "synthetic.background_tint" => self.synthetic_mut().background_tint = parse(key, value)?,
            "synthetic.radius" => {
                let (lo, hi) = value
                    .split_once("..")
                    .ok_or_else(|| Error::config(format!("`{key}`: expected `min..max`, got `{value}`")))?;
                self.synthetic_mut().object_radius = (parse(key, lo)?, parse(key, hi)?);
            }
            "synthetic.seed" => self.synthetic_mut().seed = parse(key, value)?,
            "schemes" | "scheme" => {
                self.schemes = if value.trim() == "all" {
                    SchemeId::ALL.to_vec()
                } else {
                    parse_list(key, value)?
                }
            }
            "n" => self.n_values = parse_range(key, value)?,
            "gamma" | "gammas" => {
                self.gammas = if value.trim() == "default" {
                    Vec::new()
                } else {
                    parse_list(key, value)?
                }
            }
            "repeats" => self.repeats = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "snr" => self.snr_db = parse_snr_list(key, value)?,
            "noise_power" => {
                self.noise_power = match value {
                    "mean_square" => SignalPower::MeanSquare,
                    "variance" => SignalPower::Variance,
                    _ => return Err(Error::config(format!("`{key}`: mean_square or variance"))),
                }
            }
            "failures" => self.failures = parse_list(key, value)?,
            "split_context" => self.split_context = parse_bool(key, value)?,
            "dropped" => {
                self.dropped = match value {
                    "count-as-error" | "error" => DroppedPolicy::CountAsError,
                    "exclude" => DroppedPolicy::Exclude,
                    _ => return Err(Error::config(format!("`{key}`: count-as-error or exclude"))),
                }
            }
            "backend" => {
                self.backend = match value {
                    "toy" => Backend::Toy,
                    "precomputed" => Backend::Precomputed,
                    _ => return Err(Error::config(format!("`{key}`: toy or precomputed"))),
                }
            }
            "execution" => {
                self.execution = match value {
                    "parallel" => Execution::Parallel,
                    "sequential" => Execution::Sequential,
                    _ => return Err(Error::config(format!("`{key}`: parallel or sequential"))),
                }
            }
            "bins" => self.bins = parse(key, value)?,
            "toy.seed" => self.toy.seed = parse(key, value)?,
            "toy.dim" => self.toy.dim = parse(key, value)?,
            "toy.grid" => self.toy.grid = parse(key, value)?,
            "toy.fanout" => self.toy.fanout = parse(key, value)?,
            "toy.texture_gain" => self.toy.texture_gain = parse(key, value)?,
            "toy.pool" => self.toy.pool = parse(key, value)?,
            "toy.achromatic_radius" => self.toy.achromatic_radius = parse(key, value)?,
            "toy.colors_per_class" => self.toy.colors_per_class = parse(key, value)?,
            "catalogue.view_width" => self.catalogue.view_width = parse(key, value)?,
            "catalogue.view_height" => self.catalogue.view_height = parse(key, value)?,
            "catalogue.embedding_dim" => self.catalogue.embedding_dim = parse(key, value)?,
            "catalogue.bins" => self.catalogue.bins = parse(key, value)?,
            "transport.mss" => self.transport.mss = parse(key, value)?,
            "transport.header_per_segment" => self.transport.header_per_segment = parse(key, value)?,
            "transport.ack_every" => self.transport.ack_every = parse(key, value)?,
            "transport.ack_size" => self.transport.ack_size = parse(key, value)?,
            "transport.per_connection_setup" => self.transport.per_connection_setup = parse(key, value)?,
            "radio.total_rbs" => self.radio.total_rbs = parse(key, value)?,
            "radio.scs_hz" => self.radio.scs_hz = parse(key, value)?,
            "radio.mimo_layers" => self.radio.mimo_layers = parse(key, value)?,
            "radio.max_spectral_efficiency" => self.radio.max_spectral_efficiency = parse(key, value)?,
            "radio.overhead_factor" => self.radio.overhead_factor = parse(key, value)?,
            "radio.node_snr_db" => self.radio.node_snr_db = parse_list(key, value)?,
            "radio.snr_min_db" => self.radio.snr_range_db.0 = parse(key, value)?,
            "radio.snr_max_db" => self.radio.snr_range_db.1 = parse(key, value)?,
            "profile" => {
                self.profile = match value {
                    "default" => ProcessingProfile::default(),
                    "zero" => ProcessingProfile::zero(),
                    _ => return Err(Error::config(format!("`{key}`: default or zero"))),
                }
            }
            "cost.backbone_flops" => self.cost.backbone_flops = parse(key, value)?,
            "cost.pool_flops" => self.cost.pool_flops = parse(key, value)?,
            "cost.head_flops" => self.cost.head_flops = parse(key, value)?,
            _ => return Err(Error::config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(Error::config("repeats must be >= 1"));
        }
        if self.schemes.is_empty() || self.n_values.is_empty() || self.snr_db.is_empty() || self.failures.is_empty() {
            return Err(Error::config("schemes, n, snr and failures must be non-empty"));
        }
        if self.n_values.contains(&0) {
            return Err(Error::config("n must be >= 1"));
        }
        if let Some(g) = self.gammas.iter().find(|g| !(0.0..=1.0).contains(*g)) {
            return Err(Error::config(format!("gamma {g} outside [0, 1]")));
        }
        if self.bins == 0 {
            return Err(Error::config("bins must be >= 1"));
        }
        self.transport.validate()?;
        self.profile.validate()?;
        if let DatasetSource::Synthetic(s) = &self.dataset {
            s.validate()?;
        }
        Ok(())
    }

    /// The grid points this config expands to, in output order.
    pub fn points(&self) -> Vec<SweepPoint> {
        let mut points = Vec::new();
        for &scheme in &self.schemes {
            let gammas: Vec<Option<f64>> = if !scheme.is_selective() {
                vec![None]
            } else if self.gammas.is_empty() {
                vec![scheme.default_gamma()]
            } else {
                self.gammas.iter().copied().map(Some).collect()
            };
            for &n in &self.n_values {
                for &gamma in &gammas {
                    for &snr_db in &self.snr_db {
                        for &failed in &self.failures {
                            if failed < n {
                                points.push(SweepPoint { scheme, n, gamma, snr_db, failed });
                            }
                        }
                    }
                }
            }
        }
        points.sort_by(|a, b| a.order_key().total_cmp_key(&b.order_key()));
        points.dedup();
        points
    }
}

/// One cell of the experiment grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepPoint {
    pub scheme: SchemeId,
    pub n: usize,
    pub gamma: Option<f64>,
    pub snr_db: Option<f64>,
    pub failed: usize,
}

impl SweepPoint {
    /// Sort key: scheme, N, gamma, SNR from highest to lowest with the clean
    /// level last, failures.
    fn order_key(&self) -> (usize, usize, f64, f64, usize) {
        let scheme = SchemeId::ALL.iter().position(|s| *s == self.scheme).expect("known scheme");
        (
            scheme,
            self.n,
            self.gamma.unwrap_or(-1.0),
            self.snr_db.map_or(f64::INFINITY, |s| -s),
            self.failed,
        )
    }
}

/// Aggregated metrics of one sweep point over all repeats.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub scheme: SchemeId,
    pub n: usize,
    pub gamma: Option<f64>,
    pub snr_db: Option<f64>,
    pub failed: usize,
    pub repeats: usize,
    pub rounds: usize,
    /// Accuracy under the configured dropped-round policy.
    pub accuracy_pct: f64,
    pub accuracy_std: f64,
    pub accuracy_count_as_error_pct: f64,
    /// `None` when every round was dropped.
    pub accuracy_exclude_pct: Option<f64>,
    pub transmission_gain_pct: f64,
    pub transmission_gain_std: f64,
    pub overhead_bytes: f64,
    pub overhead_std: f64,
    pub latency_ms: f64,
    pub latency_std: f64,
    pub dropped_rate: f64,
    pub dropped_rate_std: f64,
    pub transmitted_views: f64,
    /// Mean model FLOPs per available source node and round.
    pub source_flops: f64,
    pub controller_flops: f64,
}

impl MetricsRow {
    pub fn point(&self) -> SweepPoint {
        SweepPoint {
            scheme: self.scheme,
            n: self.n,
            gamma: self.gamma,
            snr_db: self.snr_db,
            failed: self.failed,
        }
    }
}

/// Puts rows in output order: scheme, N, gamma, SNR, failures.
pub fn sort_rows(rows: &mut [MetricsRow]) {
    rows.sort_by(|a, b| a.point().order_key().total_cmp_key(&b.point().order_key()));
}

trait TotalKey {
    fn total_cmp_key(&self, other: &Self) -> std::cmp::Ordering;
}

impl TotalKey for (usize, usize, f64, f64, usize) {
    fn total_cmp_key(&self, o: &Self) -> std::cmp::Ordering {
        self.0
            .cmp(&o.0)
            .then(self.1.cmp(&o.1))
            .then(self.2.total_cmp(&o.2))
            .then(self.3.total_cmp(&o.3))
            .then(self.4.cmp(&o.4))
    }
}

/// Per-round numbers the aggregation needs.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundRecord {
    pub correct: Option<bool>,
    pub transmitted: usize,
    pub available: usize,
    pub overhead_bytes: u64,
    pub latency_ms: f64,
    pub source_flops: u64,
    pub controller_flops: u64,
}

/// Loaded data plus models, shared by every point of a run.
pub struct Prepared {
    pub dataset: Dataset,
    backbone: Box<dyn Backbone>,
    head: Box<dyn Head>,
    /// One cache per configured noise level, in `snr_db` order.
    caches: Vec<(Option<f64>, FeatureCache)>,
    noisy: Vec<(Option<f64>, Vec<Vec<View>>)>,
}

impl Prepared {
    pub fn pipeline(&self, snr_db: Option<f64>) -> Pipeline<'_> {
        let p = Pipeline::new(self.backbone.as_ref(), self.head.as_ref());
        match self.caches.iter().find(|(s, _)| *s == snr_db) {
            Some((_, cache)) => p.with_cache(cache),
            None => p,
        }
    }

    fn views(&self, snr_db: Option<f64>, sample: usize) -> &[View] {
        self.noisy
            .iter()
            .find(|(s, _)| *s == snr_db)
            .map(|(_, v)| v[sample].as_slice())
            .unwrap_or(&self.dataset.samples[sample].views)
    }
}

pub fn load_source(source: &DatasetSource) -> Result<Dataset> {
    match source {
        DatasetSource::Manifest(p) => load_dataset(p),
        DatasetSource::Synthetic(s) => generate_synthetic(s),
    }
}

fn build_models(config: &ExperimentConfig, dataset: &Dataset) -> Result<(Box<dyn Backbone>, Box<dyn Head>)> {
    match config.backend {
        Backend::Toy => {
            let params = match &config.dataset {
                DatasetSource::Synthetic(s) => ToyModelParams {
                    seed: s.palette_seed,
                    classes: s.classes,
                    bins: s.palette_bins,
                    colors_per_class: s.colors_per_class,
                    ..config.toy.clone()
                },
                DatasetSource::Manifest(_) => ToyModelParams {
                    classes: dataset.classes,
                    ..config.toy.clone()
                },
            };
            let model = ToyModel::new(params)?;
            Ok((Box::new(model.clone()), Box::new(model)))
        }
        Backend::Precomputed => {
            if !dataset.has_embeddings() {
                return Err(Error::config("precomputed backend needs embedding sidecars for every instance"));
            }
            let dim = dataset.samples[0].embeddings.as_ref().expect("checked")[0].dim();
            let mut backbone = PrecomputedBackbone::new(dim);
            let mut labelled = Vec::new();
            for s in &dataset.samples {
                for (v, e) in s.views.iter().zip(s.embeddings.as_ref().expect("checked")) {
                    backbone.insert(v.capture().expect("loaded views carry ids"), e.clone())?;
                    labelled.push((e, s.label));
                }
            }
            let head = CentroidHead::fit_class_means(labelled, dataset.classes)?;
            Ok((Box::new(backbone), Box::new(head)))
        }
    }
}

fn noise_seed(base: u64, snr_db: f64, capture: (u32, u16)) -> u64 {
    derive(base, &[2, snr_db.to_bits(), capture.0 as u64, capture.1 as u64])
}

/// Loads or generates the dataset, builds the models, applies each noise
/// level and precomputes per-view features.
pub fn prepare(config: &ExperimentConfig) -> Result<Prepared> {
    config.validate()?;
    let dataset = load_source(&config.dataset)?;
    let (backbone, head) = build_models(config, &dataset)?;
    let mut noisy = Vec::new();
    for &snr in &config.snr_db {
        let Some(db) = snr else { continue };
        if noisy.iter().any(|(s, _)| *s == snr) {
            continue;
        }
        let spec = NoiseSpec {
            level: crate::dataset::NoiseLevel::TargetSnrDb(db),
            power: config.noise_power,
        };
        let per_sample = map_ordered(config.execution, &dataset.samples, |s| {
            s.views
                .iter()
                .map(|v| {
                    let id = v.capture().expect("dataset views carry ids");
                    add_noise(v, &spec, noise_seed(config.seed, db, (id.instance, id.view))).map(|(nv, _)| nv)
                })
                .collect::<Result<Vec<_>>>()
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        noisy.push((snr, per_sample));
    }
    let mut prepared = Prepared {
        dataset,
        backbone,
        head,
        caches: Vec::new(),
        noisy,
    };
    let mut levels: Vec<Option<f64>> = Vec::new();
    for s in &config.snr_db {
        if !levels.contains(s) {
            levels.push(*s);
        }
    }
    for snr in levels {
        let indices: Vec<usize> = (0..prepared.dataset.samples.len()).collect();
        let entries = map_ordered(config.execution, &indices, |&i| {
            prepared
                .views(snr, i)
                .iter()
                .map(|v| FeatureCache::compute(prepared.backbone.as_ref(), prepared.head.as_ref(), v, Some(config.bins)))
                .collect::<Result<Vec<_>>>()
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        prepared
            .caches
            .push((snr, FeatureCache::from_entries(entries.into_iter().flatten())));
    }
    Ok(prepared)
}

/// Ordered map that fans out over rayon when available and requested.
fn map_ordered<T: Sync, R: Send>(execution: Execution, items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    #[cfg(feature = "parallel")]
    if execution == Execution::Parallel {
        use rayon::prelude::*;
        return items.par_iter().map(f).collect();
    }
    let _ = execution;
    items.iter().map(f).collect()
}

/// Inputs of one round: the sampled instance, the previous-period context
/// and the scheme configuration.
pub fn round_inputs(
    config: &ExperimentConfig,
    prepared: &Prepared,
    point: &SweepPoint,
    repeat: usize,
    sample: usize,
) -> Result<(MultiViewInstance, Context, SchemeConfig)> {
    let run_seed = config.seed.wrapping_add(repeat as u64);
    let s = &prepared.dataset.samples[sample];
    let mut source = s.clone();
    source.views = prepared.views(point.snr_db, sample).to_vec();
    let instance = source.instance(point.n, config.split_context, derive(run_seed, &[0, sample as u64, point.n as u64]), TimePeriod(1))?;

    let pipeline = prepared.pipeline(point.snr_db);
    let context = if point.scheme.uses_embedding_context() && !instance.context_views.is_empty() {
        let embeddings = instance
            .context_views
            .iter()
            .map(|v| pipeline.extract(v))
            .collect::<Result<Vec<_>>>()?;
        Context::Embedding(view_pool(&embeddings)?)
    } else {
        Context::Empty
    };

    let mut availability = vec![true; point.n];
    if point.failed > 0 {
        use rand::seq::index;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(derive(run_seed, &[1, sample as u64, point.n as u64]));
        for i in index::sample(&mut rng, point.n, point.failed) {
            availability[i] = false;
        }
    }
    let mut scheme = SchemeConfig::new(point.scheme);
    scheme.gamma = point.gamma;
    scheme.bins = config.bins;
    scheme.availability = availability;
    scheme.catalogue = config.catalogue.clone();
    Ok((instance, context, scheme))
}

/// Radio used for one round: per-node SNRs are redrawn every round.
pub fn round_radio(config: &ExperimentConfig, repeat: usize, sample: usize) -> RadioConfig {
    let run_seed = config.seed.wrapping_add(repeat as u64);
    RadioConfig {
        snr_seed: derive(run_seed, &[3, sample as u64]),
        ..config.radio.clone()
    }
}

pub fn run_one(
    config: &ExperimentConfig,
    prepared: &Prepared,
    point: &SweepPoint,
    repeat: usize,
    sample: usize,
) -> Result<RoundOutcome> {
    let (instance, context, scheme) = round_inputs(config, prepared, point, repeat, sample)?;
    run_round(&instance, &scheme, &prepared.pipeline(point.snr_db), &context)
}

fn record(config: &ExperimentConfig, outcome: &RoundOutcome, truth: Prediction, radio: &RadioConfig) -> RoundRecord {
    let flops = round_flops(outcome, &config.cost);
    RoundRecord {
        correct: outcome.prediction().map(|p| p == truth),
        transmitted: outcome.transmitted_views,
        available: outcome.available_views,
        overhead_bytes: round_overhead(&outcome.trace, &config.transport),
        latency_ms: round_latency(outcome, radio, &config.transport, &config.profile),
        source_flops: flops.source_total(),
        controller_flops: flops.controller,
    }
}

/// Every round of one repeat at one point.
pub fn run_repeat(
    config: &ExperimentConfig,
    prepared: &Prepared,
    point: &SweepPoint,
    repeat: usize,
) -> Result<Vec<RoundRecord>> {
    (0..prepared.dataset.samples.len())
        .map(|i| {
            let outcome = run_one(config, prepared, point, repeat, i)?;
            let radio = round_radio(config, repeat, i);
            Ok(record(config, &outcome, prepared.dataset.samples[i].label, &radio))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default)]
struct RepeatSummary {
    accuracy_error: f64,
    accuracy_exclude: Option<f64>,
    gain: f64,
    overhead: f64,
    latency: f64,
    dropped: f64,
    transmitted: f64,
    source_flops: f64,
    controller_flops: f64,
}

fn summarize(records: &[RoundRecord]) -> Result<RepeatSummary> {
    let n = records.len() as f64;
    if records.is_empty() {
        return Err(Error::EmptyInput);
    }
    let correct = records.iter().filter(|r| r.correct == Some(true)).count() as f64;
    let answered = records.iter().filter(|r| r.correct.is_some()).count() as f64;
    let available: usize = records.iter().map(|r| r.available).sum();
    let transmitted: usize = records.iter().map(|r| r.transmitted).sum();
    let mean = |f: &dyn Fn(&RoundRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
    Ok(RepeatSummary {
        accuracy_error: 100.0 * correct / n,
        accuracy_exclude: (answered > 0.0).then(|| 100.0 * correct / answered),
        gain: transmission_gain(available, transmitted)?,
        overhead: mean(&|r| r.overhead_bytes as f64),
        latency: mean(&|r| r.latency_ms),
        dropped: (n - answered) / n,
        transmitted: transmitted as f64 / n,
        source_flops: records.iter().map(|r| r.source_flops as f64 / r.available.max(1) as f64).sum::<f64>() / n,
        controller_flops: mean(&|r| r.controller_flops as f64),
    })
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn aggregate(config: &ExperimentConfig, point: &SweepPoint, repeats: &[Vec<RoundRecord>]) -> Result<MetricsRow> {
    let sums = repeats.iter().map(|r| summarize(r)).collect::<Result<Vec<_>>>()?;
    let col = |f: fn(&RepeatSummary) -> f64| mean_std(&sums.iter().map(f).collect::<Vec<_>>());
    let (acc_err, acc_err_std) = col(|s| s.accuracy_error);
    let excl: Vec<f64> = sums.iter().filter_map(|s| s.accuracy_exclude).collect();
    let accuracy_exclude_pct = (!excl.is_empty()).then(|| mean_std(&excl).0);
    let (accuracy_pct, accuracy_std) = match config.dropped {
        DroppedPolicy::CountAsError => (acc_err, acc_err_std),
        DroppedPolicy::Exclude if !excl.is_empty() => mean_std(&excl),
        DroppedPolicy::Exclude => (0.0, 0.0),
    };
    let (gain, gain_std) = col(|s| s.gain);
    let (overhead, overhead_std) = col(|s| s.overhead);
    let (latency, latency_std) = col(|s| s.latency);
    let (dropped, dropped_std) = col(|s| s.dropped);
    Ok(MetricsRow {
        scheme: point.scheme,
        n: point.n,
        gamma: point.gamma,
        snr_db: point.snr_db,
        failed: point.failed,
        repeats: repeats.len(),
        rounds: repeats.iter().map(Vec::len).sum(),
        accuracy_pct,
        accuracy_std,
        accuracy_count_as_error_pct: acc_err,
        accuracy_exclude_pct,
        transmission_gain_pct: gain,
        transmission_gain_std: gain_std,
        overhead_bytes: overhead,
        overhead_std,
        latency_ms: latency,
        latency_std,
        dropped_rate: dropped,
        dropped_rate_std: dropped_std,
        transmitted_views: col(|s| s.transmitted).0,
        source_flops: col(|s| s.source_flops).0,
        controller_flops: col(|s| s.controller_flops).0,
    })
}

/// Runs a prepared experiment. Rows come back in output order regardless of
/// how the work was scheduled.
pub fn run_prepared(config: &ExperimentConfig, prepared: &Prepared) -> Result<Vec<MetricsRow>> {
    let points = config.points();
    for p in &points {
        let available = if config.split_context {
            prepared.dataset.min_views() - prepared.dataset.min_views() / 2
        } else {
            prepared.dataset.min_views()
        };
        if p.n > available {
            return Err(Error::NotEnoughViews {
                requested: p.n,
                available,
            });
        }
    }
    let jobs: Vec<(usize, usize)> = (0..points.len())
        .flat_map(|p| (0..config.repeats).map(move |r| (p, r)))
        .collect();
    let results = map_ordered(config.execution, &jobs, |&(p, r)| run_repeat(config, prepared, &points[p], r));
    let mut grouped: Vec<Vec<Vec<RoundRecord>>> = vec![Vec::new(); points.len()];
    for ((p, _), res) in jobs.iter().zip(results) {
        grouped[*p].push(res?);
    }
    points
        .iter()
        .zip(&grouped)
        .map(|(p, reps)| aggregate(config, p, reps))
        .collect()
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<MetricsRow>> {
    let prepared = prepare(config)?;
    run_prepared(config, &prepared)
}

/// 0.1, 0.2, ..., 0.9 and 1.0.
pub fn default_gamma_grid() -> Vec<f64> {
    (1..=10).map(|i| i as f64 / 10.0).collect()
}

/// Runs the selective schemes of `config` once per threshold and groups the
/// rows by threshold, ascending.
pub fn sweep_threshold(config: &ExperimentConfig, gammas: &[f64]) -> Result<Vec<(f64, Vec<MetricsRow>)>> {
    if gammas.is_empty() {
        return Err(Error::config("threshold sweep needs at least one gamma"));
    }
    let mut cfg = config.clone();
    cfg.schemes.retain(|s| s.is_selective());
    if cfg.schemes.is_empty() {
        return Err(Error::config("threshold sweep needs a selective scheme"));
    }
    cfg.gammas = gammas.to_vec();
    let rows = run_experiment(&cfg)?;
    let mut groups: BTreeMap<u64, (f64, Vec<MetricsRow>)> = BTreeMap::new();
    for row in rows {
        let g = row.gamma.expect("selective rows carry gamma");
        groups.entry(g.to_bits()).or_insert_with(|| (g, Vec::new())).1.push(row);
    }
    let mut out: Vec<(f64, Vec<MetricsRow>)> = groups.into_values().collect();
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(out)
}

pub const CSV_HEADER: [&str; 22] = [
    "scheme",
    "n",
    "gamma",
    "snr_db",
    "failed_nodes",
    "repeats",
    "rounds",
    "accuracy_pct",
    "accuracy_std",
    "accuracy_count_as_error_pct",
    "accuracy_exclude_pct",
    "transmission_gain_pct",
    "transmission_gain_std",
    "overhead_bytes",
    "overhead_std",
    "latency_ms",
    "latency_std",
    "dropped_rate",
    "dropped_rate_std",
    "transmitted_views",
    "source_flops",
    "controller_flops",
];

struct Fixed(f64);

impl fmt::Display for Fixed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // Avoid "-0.000000".
        let v = if self.0 == 0.0 { 0.0 } else { self.0 };
        write!(f, "{v:.6}")
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| Fixed(x).to_string()).unwrap_or_default()
}

pub fn csv_record(row: &MetricsRow) -> Vec<String> {
    vec![
        row.scheme.to_string(),
        row.n.to_string(),
        opt(row.gamma),
        opt(row.snr_db),
        row.failed.to_string(),
        row.repeats.to_string(),
        row.rounds.to_string(),
        Fixed(row.accuracy_pct).to_string(),
        Fixed(row.accuracy_std).to_string(),
        Fixed(row.accuracy_count_as_error_pct).to_string(),
        opt(row.accuracy_exclude_pct),
        Fixed(row.transmission_gain_pct).to_string(),
        Fixed(row.transmission_gain_std).to_string(),
        Fixed(row.overhead_bytes).to_string(),
        Fixed(row.overhead_std).to_string(),
        Fixed(row.latency_ms).to_string(),
        Fixed(row.latency_std).to_string(),
        Fixed(row.dropped_rate).to_string(),
        Fixed(row.dropped_rate_std).to_string(),
        Fixed(row.transmitted_views).to_string(),
        Fixed(row.source_flops).to_string(),
        Fixed(row.controller_flops).to_string(),
    ]
}

pub fn write_csv<W: std::io::Write>(rows: &[MetricsRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for row in rows {
        w.write_record(csv_record(row))?;
    }
    w.flush()?;
    Ok(())
}

pub fn emit_csv(rows: &[MetricsRow], path: &Path) -> Result<()> {
    write_csv(rows, std::fs::File::create(path)?)
}
