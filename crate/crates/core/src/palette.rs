//! Per-class chroma signatures.
//!
//! Each class owns a few saturated colours that sit exactly on chroma bucket
//! centres and never share a bucket with another class. The synthetic
//! generator paints views from these colours and the toy model derives its
//! class centroids from them, so both sides agree as long as they are built
//! from the same [`PaletteSpec`].

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::descriptors::{bucket_center, chroma_bucket, lab_to_srgb, srgb_to_lab, LabPixel};
use crate::error::{Error, Result};

/// Lightness excursion the generator may apply to a palette colour while
/// keeping it inside its chroma bucket.
pub const LIGHTNESS_JITTER: f64 = 6.0;

const LIGHTNESS_CANDIDATES: [f64; 9] = [60.0, 55.0, 65.0, 50.0, 70.0, 45.0, 75.0, 40.0, 80.0];

#[derive(Clone, Debug, PartialEq)]
pub struct PaletteSpec {
    pub classes: usize,
    pub colors_per_class: usize,
    pub bins: usize,
    pub seed: u64,
    /// Smallest a*/b* radius a palette colour may have.
    pub min_chroma: f64,
    pub max_chroma: f64,
}

impl PaletteSpec {
    pub fn new(classes: usize, colors_per_class: usize, bins: usize, seed: u64) -> Self {
        PaletteSpec {
            classes,
            colors_per_class,
            bins,
            seed,
            min_chroma: 24.0,
            max_chroma: 72.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PaletteColor {
    pub lab: LabPixel,
    pub rgb: [u8; 3],
    pub a_bin: usize,
    pub b_bin: usize,
}

impl PaletteColor {
    pub fn bucket(&self, bins: usize) -> usize {
        self.a_bin * bins + self.b_bin
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassPalette {
    spec: PaletteSpec,
    colors: Vec<Vec<PaletteColor>>,
}

impl ClassPalette {
    pub fn generate(spec: &PaletteSpec) -> Result<Self> {
        if spec.classes < 2 || spec.colors_per_class == 0 || spec.bins == 0 {
            return Err(Error::config(
                "palette needs at least two classes, one colour per class and one bin",
            ));
        }
        let mut cells = candidate_cells(spec);
        let needed = spec.classes * spec.colors_per_class;
        if cells.len() < needed {
            return Err(Error::config(format!(
                "{} chroma cells available at {} bins, {needed} needed",
                cells.len(),
                spec.bins
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        cells.shuffle(&mut rng);
        let colors = cells
            .chunks(spec.colors_per_class)
            .take(spec.classes)
            .map(|c| c.to_vec())
            .collect();
        Ok(ClassPalette {
            spec: spec.clone(),
            colors,
        })
    }

    pub fn spec(&self) -> &PaletteSpec {
        &self.spec
    }

    pub fn classes(&self) -> usize {
        self.colors.len()
    }

    pub fn colors(&self, class: usize) -> &[PaletteColor] {
        &self.colors[class]
    }
}

/// Number of chroma cells a palette can draw from.
pub fn available_cells(spec: &PaletteSpec) -> usize {
    candidate_cells(spec).len()
}

fn candidate_cells(spec: &PaletteSpec) -> Vec<PaletteColor> {
    let bins = spec.bins;
    let mut cells = Vec::new();
    for a_bin in 0..bins {
        for b_bin in 0..bins {
            let a = bucket_center(a_bin, bins);
            let b = bucket_center(b_bin, bins);
            let radius = a.hypot(b);
            if radius < spec.min_chroma || radius > spec.max_chroma {
                continue;
            }
            let stays_in_bucket = |l: f64| {
                lab_to_srgb(LabPixel { l, a, b }).is_some_and(|rgb| {
                    let back = srgb_to_lab(rgb);
                    chroma_bucket(back.a, bins) == a_bin && chroma_bucket(back.b, bins) == b_bin
                })
            };
            let lightness = LIGHTNESS_CANDIDATES.iter().copied().find(|&l| {
                [l - LIGHTNESS_JITTER, l, l + LIGHTNESS_JITTER]
                    .iter()
                    .all(|&x| stays_in_bucket(x))
            });
            if let Some(l) = lightness {
                let lab = LabPixel { l, a, b };
                cells.push(PaletteColor {
                    lab,
                    rgb: lab_to_srgb(lab).expect("checked in gamut"),
                    a_bin,
                    b_bin,
                });
            }
        }
    }
    cells
}
