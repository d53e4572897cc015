//! The split classification pipeline: single-view backbone, view pooling and
//! a classification head shared by the single- and multi-view paths.
//!
//! Two backends ship with the crate. [`ToyModel`] is a deterministic stand-in
//! for a trained CNN that works directly on chroma statistics and is
//! co-designed with the synthetic dataset. [`PrecomputedBackbone`] serves
//! embeddings exported offline from a real network, paired with a
//! [`CentroidHead`] fitted on those vectors.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::descriptors::{bucket_center, chroma_bucket, cosine, srgb_to_lab};
use crate::error::{Error, Result};
use crate::palette::{ClassPalette, PaletteSpec};
use crate::types::{CaptureId, ColorHistogram, Embedding, Prediction, View};

/// Feature extraction network.
pub trait Backbone: Send + Sync {
    fn dim(&self) -> usize;
    fn extract(&self, view: &View) -> Result<Embedding>;
}

/// Classification network mapping an embedding to one of `classes()` labels.
pub trait Head: Send + Sync {
    fn classes(&self) -> usize;
    fn dim(&self) -> usize;
    fn classify(&self, embedding: &Embedding) -> Result<Prediction>;
}

/// Orderless element-wise maximum over a set of embeddings.
pub fn view_pool(embeddings: &[Embedding]) -> Result<Embedding> {
    let first = embeddings.first().ok_or(Error::EmptyInput)?;
    let mut pooled = first.values().to_vec();
    for e in &embeddings[1..] {
        if e.dim() != pooled.len() {
            return Err(Error::dims(pooled.len(), e.dim()));
        }
        for (slot, v) in pooled.iter_mut().zip(e.values()) {
            *slot = slot.max(*v);
        }
    }
    Embedding::new(pooled)
}

pub fn classify_single(head: &dyn Head, embedding: &Embedding) -> Result<Prediction> {
    head.classify(embedding)
}

/// Pool, then classify with the same head.
pub fn classify_multi(head: &dyn Head, embeddings: &[Embedding]) -> Result<Prediction> {
    head.classify(&view_pool(embeddings)?)
}

/// Nearest-centroid classifier under cosine similarity. Ties go to the lowest
/// class index.
#[derive(Clone, Debug)]
pub struct CentroidHead {
    centroids: Vec<Embedding>,
}

impl CentroidHead {
    pub fn new(centroids: Vec<Embedding>) -> Result<Self> {
        let first = centroids.first().ok_or(Error::EmptyInput)?;
        if centroids.len() < 2 || centroids.len() > crate::types::MAX_CLASSES {
            return Err(Error::config(format!(
                "a head needs 2..=256 classes, got {}",
                centroids.len()
            )));
        }
        let dim = first.dim();
        if let Some(bad) = centroids.iter().find(|c| c.dim() != dim) {
            return Err(Error::dims(dim, bad.dim()));
        }
        Ok(CentroidHead { centroids })
    }

    /// Class-mean centroids fitted on labelled embeddings. Classes without
    /// samples get a zero centroid and are never selected over a class with
    /// positive similarity.
    pub fn fit_class_means<'a>(
        samples: impl IntoIterator<Item = (&'a Embedding, Prediction)>,
        classes: usize,
    ) -> Result<Self> {
        let mut sums: Vec<Option<Vec<f64>>> = vec![None; classes];
        let mut counts = vec![0usize; classes];
        for (e, label) in samples {
            let k = label.label();
            if k >= classes {
                return Err(Error::LabelOutOfRange { label: k, classes });
            }
            let sum = sums[k].get_or_insert_with(|| vec![0.0; e.dim()]);
            if sum.len() != e.dim() {
                return Err(Error::dims(sum.len(), e.dim()));
            }
            for (s, v) in sum.iter_mut().zip(e.values()) {
                *s += v;
            }
            counts[k] += 1;
        }
        let dim = sums
            .iter()
            .flatten()
            .map(Vec::len)
            .next()
            .ok_or(Error::EmptyInput)?;
        let centroids = sums
            .into_iter()
            .zip(counts)
            .map(|(sum, n)| match sum {
                Some(s) => Embedding::new(s.into_iter().map(|v| v / n as f64).collect::<Vec<_>>()),
                None => Embedding::new(vec![0.0; dim]),
            })
            .collect::<Result<Vec<_>>>()?;
        CentroidHead::new(centroids)
    }

    pub fn centroid(&self, class: usize) -> &Embedding {
        &self.centroids[class]
    }

    /// Cosine similarity to every centroid.
    pub fn scores(&self, embedding: &Embedding) -> Result<Vec<f64>> {
        self.centroids.iter().map(|c| cosine(c, embedding)).collect()
    }
}

impl Head for CentroidHead {
    fn classes(&self) -> usize {
        self.centroids.len()
    }

    fn dim(&self) -> usize {
        self.centroids[0].dim()
    }

    fn classify(&self, embedding: &Embedding) -> Result<Prediction> {
        let scores = self.scores(embedding)?;
        let mut best = 0;
        for (k, s) in scores.iter().enumerate().skip(1) {
            if *s > scores[best] {
                best = k;
            }
        }
        Prediction::new(best, self.classes())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyModelParams {
    pub seed: u64,
    /// Embedding dimension; a multiple of `grid * grid`.
    pub dim: usize,
    pub classes: usize,
    /// Chroma bins per axis of the internal histogram.
    pub bins: usize,
    pub colors_per_class: usize,
    /// The view is split into `grid x grid` cells, each projected into its
    /// own block of the embedding.
    pub grid: usize,
    /// Output coordinates each chroma bucket projects onto, per cell.
    pub fanout: usize,
    /// Buckets whose centre lies closer than this to the neutral axis are
    /// treated as background and ignored.
    pub achromatic_radius: f64,
    /// Side of the square average-pooling window applied to the raster
    /// before binning; 1 bins raw pixels.
    pub pool: usize,
    /// Weight of the per-cell high-frequency energy feature. It responds to
    /// edges and, far more, to pixel noise.
    pub texture_gain: f64,
    /// Fixed input resolution, if the model only accepts one.
    pub input_dims: Option<(u32, u32)>,
}

impl Default for ToyModelParams {
    fn default() -> Self {
        ToyModelParams {
            seed: 7,
            dim: 3136,
            classes: 10,
            bins: 32,
            colors_per_class: 3,
            grid: 4,
            fanout: 4,
            achromatic_radius: 14.0,
            pool: 4,
            texture_gain: 1.0,
            input_dims: None,
        }
    }
}

impl ToyModelParams {
    pub fn palette_spec(&self) -> PaletteSpec {
        PaletteSpec::new(self.classes, self.colors_per_class, self.bins, self.seed)
    }
}

/// Deterministic stand-in for a trained single-view CNN.
///
/// The backbone splits the view into a grid of cells and takes each cell's
/// chroma histogram, drops the near-neutral buckets, normalises by the
/// view's total foreground, applies a square-root power normalisation and
/// projects it with a sparse non-negative random matrix into the cell's block.
/// Embeddings are therefore non-negative, sparse and spatially laid out,
/// like flattened post-ReLU feature maps. The head holds one centroid per
/// class: the class palette spread evenly over every cell.
#[derive(Clone, Debug)]
pub struct ToyModel {
    params: ToyModelParams,
    block: usize,
    projection: Vec<Vec<(usize, f64)>>,
    texture: Vec<(usize, f64)>,
    salient: Vec<bool>,
    head: CentroidHead,
}

impl ToyModel {
    pub fn new(params: ToyModelParams) -> Result<Self> {
        let cells = params.grid * params.grid;
        if cells == 0 || !params.dim.is_multiple_of(cells) {
            return Err(Error::config("toy model dim must be a positive multiple of grid^2"));
        }
        let block = params.dim / cells;
        if params.fanout == 0 || 2 * params.fanout > block {
            return Err(Error::config("toy model needs 1 <= fanout <= dim / (2 grid^2)"));
        }
        if params.pool == 0 {
            return Err(Error::config("toy model pool window must be at least 1"));
        }
        let bins = params.bins;
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed ^ 0x005e_ed0f_7072_6f6a);
        // Texture coordinates are reserved in every block, so the feature is
        // orthogonal to all chroma projections and hence to the centroids.
        let mut texture: Vec<(usize, f64)> = Vec::with_capacity(params.fanout);
        while texture.len() < params.fanout {
            let idx = rng.random_range(0..block);
            if texture.iter().all(|(i, _)| *i != idx) {
                texture.push((idx, rng.random_range(0.5..1.5)));
            }
        }
        let projection = (0..bins * bins)
            .map(|_| {
                let mut row: Vec<(usize, f64)> = Vec::with_capacity(params.fanout);
                while row.len() < params.fanout {
                    let idx = rng.random_range(0..block);
                    if row.iter().chain(&texture).all(|(i, _)| *i != idx) {
                        row.push((idx, rng.random_range(0.5..1.5)));
                    }
                }
                row
            })
            .collect();
        let salient = (0..bins * bins)
            .map(|j| {
                let a = bucket_center(j / bins, bins);
                let b = bucket_center(j % bins, bins);
                a.hypot(b) >= params.achromatic_radius
            })
            .collect();
        let palette = ClassPalette::generate(&params.palette_spec())?;
        let mut model = ToyModel {
            params,
            block,
            projection,
            texture,
            salient,
            head: CentroidHead {
                centroids: Vec::new(),
            },
        };
        let centroids = (0..palette.classes())
            .map(|k| {
                let mut proto = vec![0.0; bins * bins];
                let colors = palette.colors(k);
                for c in colors {
                    proto[c.bucket(bins)] = 1.0 / colors.len() as f64;
                }
                model.embed_histogram(&ColorHistogram::from_raw(bins, proto)?)
            })
            .collect::<Result<Vec<_>>>()?;
        model.head = CentroidHead::new(centroids)?;
        Ok(model)
    }

    pub fn params(&self) -> &ToyModelParams {
        &self.params
    }

    pub fn head(&self) -> &CentroidHead {
        &self.head
    }

    /// Embedding of a view whose every cell has chroma histogram `h`, at the
    /// model's bin count.
    pub fn embed_histogram(&self, h: &ColorHistogram) -> Result<Embedding> {
        if h.bins() != self.params.bins {
            return Err(Error::BinCountMismatch(self.params.bins, h.bins()));
        }
        let cells = self.params.grid * self.params.grid;
        let mut out = vec![0.0; self.params.dim];
        for c in 0..cells {
            self.project_cell(h.as_slice(), cells as f64, &mut out[c * self.block..(c + 1) * self.block]);
        }
        Embedding::new(out)
    }

    /// Adds the projection of one cell's bucket masses to `out`. Masses are
    /// divided by `scale` times the salient mass of `masses`.
    fn project_cell(&self, masses: &[f64], scale: f64, out: &mut [f64]) {
        let foreground: f64 = masses.iter().zip(&self.salient).filter(|(_, s)| **s).map(|(v, _)| v).sum();
        if foreground <= 0.0 {
            return;
        }
        self.project_masses(masses, scale * foreground, out);
    }

    fn project_masses(&self, masses: &[f64], total: f64, out: &mut [f64]) {
        for ((v, row), salient) in masses.iter().zip(&self.projection).zip(&self.salient) {
            if !salient || *v == 0.0 {
                continue;
            }
            let f = (v / total).sqrt();
            for (idx, w) in row {
                out[*idx] += f * w;
            }
        }
    }
}

impl Backbone for ToyModel {
    fn dim(&self) -> usize {
        self.params.dim
    }

    fn extract(&self, view: &View) -> Result<Embedding> {
        if let Some((w, h)) = self.params.input_dims {
            if view.dims() != (w, h) {
                return Err(Error::UnsupportedDimensions {
                    width: view.width(),
                    height: view.height(),
                });
            }
        }
        let (g, bins) = (self.params.grid, self.params.bins);
        let buckets = bins * bins;
        let (w, h, pooled) = average_pool(view, self.params.pool);
        let mut counts = vec![0.0; g * g * buckets];
        let mut foreground = 0.0;
        for (i, rgb) in pooled.into_iter().enumerate() {
            let lab = srgb_to_lab(rgb);
            let j = chroma_bucket(lab.a, bins) * bins + chroma_bucket(lab.b, bins);
            if !self.salient[j] {
                continue;
            }
            let cell = (i / w) * g / h * g + (i % w) * g / w;
            counts[cell * buckets + j] += 1.0;
            foreground += 1.0;
        }
        let mut out = vec![0.0; self.params.dim];
        if foreground > 0.0 {
            for (c, cell) in counts.chunks_exact(buckets).enumerate() {
                self.project_masses(cell, foreground, &mut out[c * self.block..(c + 1) * self.block]);
            }
        }
        if self.params.texture_gain > 0.0 {
            for (c, energy) in cell_energy(view, g).into_iter().enumerate() {
                let f = self.params.texture_gain * energy;
                for (idx, w) in &self.texture {
                    out[c * self.block + idx] += f * w;
                }
            }
        }
        Embedding::new(out)
    }
}

/// Mean absolute discrete Laplacian per grid cell, over interior pixels and
/// channels, scaled to [0, 1].
fn cell_energy(view: &View, g: usize) -> Vec<f64> {
    let (w, h) = (view.width() as usize, view.height() as usize);
    let px = view.pixels();
    let at = |x: usize, y: usize, c: usize| px[(y * w + x) * 3 + c] as f64;
    let mut sums = vec![0.0; g * g];
    let mut counts = vec![0usize; g * g];
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let mut e = 0.0;
            for c in 0..3 {
                let lap = 4.0 * at(x, y, c) - at(x - 1, y, c) - at(x + 1, y, c) - at(x, y - 1, c) - at(x, y + 1, c);
                e += lap.abs();
            }
            let cell = y * g / h * g + x * g / w;
            sums[cell] += e / (3.0 * 4.0 * 255.0);
            counts[cell] += 1;
        }
    }
    sums.iter().zip(&counts).map(|(s, n)| if *n == 0 { 0.0 } else { s / *n as f64 }).collect()
}

/// Non-overlapping `k x k` mean pooling; edge windows average what they cover.
fn average_pool(view: &View, k: usize) -> (usize, usize, Vec<[u8; 3]>) {
    let (w, h) = (view.width() as usize, view.height() as usize);
    if k == 1 {
        return (w, h, view.rgb().collect());
    }
    let (pw, ph) = (w.div_ceil(k), h.div_ceil(k));
    let mut sums = vec![[0u32; 4]; pw * ph];
    for (i, rgb) in view.rgb().enumerate() {
        let s = &mut sums[(i / w / k) * pw + (i % w) / k];
        for c in 0..3 {
            s[c] += rgb[c] as u32;
        }
        s[3] += 1;
    }
    let out = sums
        .into_iter()
        .map(|s| {
            let n = s[3] as f64;
            [0, 1, 2].map(|c| (s[c] as f64 / n).round() as u8)
        })
        .collect();
    (pw, ph, out)
}

impl Head for ToyModel {
    fn classes(&self) -> usize {
        self.head.classes()
    }

    fn dim(&self) -> usize {
        self.params.dim
    }

    fn classify(&self, embedding: &Embedding) -> Result<Prediction> {
        self.head.classify(embedding)
    }
}

/// Serves embeddings exported offline, keyed by capture.
#[derive(Clone, Debug, Default)]
pub struct PrecomputedBackbone {
    dim: usize,
    table: HashMap<CaptureId, Embedding>,
}

impl PrecomputedBackbone {
    pub fn new(dim: usize) -> Self {
        PrecomputedBackbone {
            dim,
            table: HashMap::new(),
        }
    }

    pub fn insert(&mut self, capture: CaptureId, embedding: Embedding) -> Result<()> {
        if embedding.dim() != self.dim {
            return Err(Error::dims(self.dim, embedding.dim()));
        }
        self.table.insert(capture, embedding);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    pub fn embeddings(&self) -> impl Iterator<Item = (&CaptureId, &Embedding)> {
        self.table.iter()
    }
}

impl Backbone for PrecomputedBackbone {
    fn dim(&self) -> usize {
        self.dim
    }

    fn extract(&self, view: &View) -> Result<Embedding> {
        let capture = view
            .capture()
            .ok_or_else(|| Error::MissingEmbedding("view has no capture id".into()))?;
        self.table
            .get(&capture)
            .cloned()
            .ok_or_else(|| Error::MissingEmbedding(capture.to_string()))
    }
}
