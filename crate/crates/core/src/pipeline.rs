use std::collections::HashMap;

use crate::descriptors::hist;
use crate::error::Result;
use crate::models::{classify_multi, Backbone, Head};
use crate::types::{CaptureId, ColorHistogram, Embedding, Prediction, View};

/// The models a round runs with, plus an optional feature cache.
#[derive(Clone, Copy)]
pub struct Pipeline<'a> {
    backbone: &'a dyn Backbone,
    head: &'a dyn Head,
    cache: Option<&'a FeatureCache>,
}

impl<'a> Pipeline<'a> {
    pub fn new(backbone: &'a dyn Backbone, head: &'a dyn Head) -> Self {
        Pipeline {
            backbone,
            head,
            cache: None,
        }
    }

    /// Serve features of captured views from `cache`. The cache must have
    /// been built from exactly the views this pipeline will see.
    pub fn with_cache(mut self, cache: &'a FeatureCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn backbone(&self) -> &'a dyn Backbone {
        self.backbone
    }

    pub fn head(&self) -> &'a dyn Head {
        self.head
    }

    fn cached(&self, view: &View) -> Option<&'a CachedFeatures> {
        self.cache.zip(view.capture()).and_then(|(c, id)| c.entries.get(&id))
    }

    pub fn hist(&self, view: &View, bins: usize) -> Result<ColorHistogram> {
        if let Some(h) = self.cached(view).and_then(|f| f.hist.as_ref()) {
            if h.bins() == bins {
                return Ok(h.clone());
            }
        }
        hist(view, bins)
    }

    pub fn extract(&self, view: &View) -> Result<Embedding> {
        match self.cached(view) {
            Some(f) => Ok(f.embedding.clone()),
            None => self.backbone.extract(view),
        }
    }

    /// Full single-view pipeline: backbone then head.
    pub fn local_predict(&self, view: &View) -> Result<Prediction> {
        match self.cached(view) {
            Some(f) => Ok(f.local),
            None => self.head.classify(&self.backbone.extract(view)?),
        }
    }

    pub fn classify_pooled(&self, embeddings: &[Embedding]) -> Result<Prediction> {
        classify_multi(self.head, embeddings)
    }
}

#[derive(Clone, Debug)]
struct CachedFeatures {
    hist: Option<ColorHistogram>,
    embedding: Embedding,
    local: Prediction,
}

/// Per-capture features computed once and shared by every round of a sweep.
#[derive(Clone, Debug, Default)]
pub struct FeatureCache {
    entries: HashMap<CaptureId, CachedFeatures>,
}

impl FeatureCache {
    /// Computes the features of one captured view. `bins` of `None` skips the
    /// histogram.
    pub fn compute(
        backbone: &dyn Backbone,
        head: &dyn Head,
        view: &View,
        bins: Option<usize>,
    ) -> Result<(CaptureId, FeatureEntry)> {
        let id = view.capture().ok_or_else(|| {
            crate::error::Error::InvalidView("cached views need a capture id".into())
        })?;
        let embedding = backbone.extract(view)?;
        let local = head.classify(&embedding)?;
        let hist = bins.map(|b| hist(view, b)).transpose()?;
        Ok((
            id,
            FeatureEntry(CachedFeatures {
                hist,
                embedding,
                local,
            }),
        ))
    }

    pub fn from_entries(entries: impl IntoIterator<Item = (CaptureId, FeatureEntry)>) -> Self {
        FeatureCache {
            entries: entries.into_iter().map(|(id, e)| (id, e.0)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Opaque cache entry produced by [`FeatureCache::compute`].
#[derive(Clone, Debug)]
pub struct FeatureEntry(CachedFeatures);
