//! Hand-built rounds: views whose embeddings are chosen directly, served by
//! capture id through a `PrecomputedBackbone`.
#![allow(dead_code)]

use mvedge::models::{CentroidHead, PrecomputedBackbone};
use mvedge::pipeline::Pipeline;
use mvedge::types::{CaptureId, Embedding, MultiViewInstance, NodeId, Prediction, View};

pub const SIDE: u32 = 8;

pub fn unit(dim: usize, axis: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    v[axis] = 1.0;
    v
}

pub struct Fixture {
    pub backbone: PrecomputedBackbone,
    pub head: CentroidHead,
    views: Vec<View>,
    instance: u32,
}

impl Fixture {
    /// Head with one axis-aligned centroid per class.
    pub fn new(dim: usize, classes: usize) -> Self {
        let centroids = (0..classes).map(|k| Embedding::new(unit(dim, k)).unwrap()).collect();
        Fixture {
            backbone: PrecomputedBackbone::new(dim),
            head: CentroidHead::new(centroids).unwrap(),
            views: Vec::new(),
            instance: 0,
        }
    }

    /// Adds a uniform view on the next node with the given embedding.
    pub fn view(&mut self, rgb: [u8; 3], embedding: Vec<f64>) -> &mut Self {
        let index = self.views.len();
        let capture = CaptureId {
            instance: self.instance,
            view: index as u16,
        };
        self.backbone.insert(capture, Embedding::new(embedding).unwrap()).unwrap();
        let view = View::uniform(SIDE, SIDE, rgb)
            .unwrap()
            .with_node(NodeId::source(index))
            .with_capture(capture);
        self.views.push(view);
        self
    }

    pub fn instance(&self, label: usize) -> MultiViewInstance {
        MultiViewInstance {
            instance_id: format!("fixture-{}", self.instance),
            true_label: Prediction::new(label, self.head_classes()).unwrap(),
            views: self.views.clone(),
            context_views: Vec::new(),
        }
    }

    pub fn pipeline(&self) -> Pipeline<'_> {
        Pipeline::new(&self.backbone, &self.head)
    }

    fn head_classes(&self) -> usize {
        use mvedge::models::Head;
        self.head.classes()
    }
}

pub fn label(p: usize) -> Prediction {
    Prediction::new(p, 256).unwrap()
}
