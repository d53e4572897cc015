//! View descriptors and similarity measures.
//!
//! Colour conversion is sRGB (D65) to CIE 1976 L*a*b*. Chroma histograms bin
//! only the a*/b* plane over `[-128, 127]` in `B` equal-width buckets per axis.

use std::sync::LazyLock;

use crate::error::{Error, Result};
use crate::types::{ColorHistogram, Embedding, View};

/// Lower edge of the a*/b* histogram range.
pub const CHROMA_MIN: f64 = -128.0;
/// Upper edge of the a*/b* histogram range.
pub const CHROMA_MAX: f64 = 127.0;

/// D65 reference white, Y normalised to 1.
const WHITE: [f64; 3] = [0.950_47, 1.0, 1.088_83];

const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.412_456_4, 0.357_576_1, 0.180_437_5],
    [0.212_672_9, 0.715_152_2, 0.072_175_0],
    [0.019_333_9, 0.119_192_0, 0.950_304_1],
];

const XYZ_TO_RGB: [[f64; 3]; 3] = [
    [3.240_454_2, -1.537_138_5, -0.498_531_4],
    [-0.969_266_0, 1.876_010_8, 0.041_556_0],
    [0.055_643_4, -0.204_025_9, 1.057_225_2],
];

const EPSILON: f64 = 216.0 / 24_389.0;
const KAPPA: f64 = 24_389.0 / 27.0;

static LINEAR: LazyLock<[f64; 256]> = LazyLock::new(|| {
    let mut table = [0.0; 256];
    for (i, v) in table.iter_mut().enumerate() {
        *v = srgb_to_linear(i as f64 / 255.0);
    }
    table
});

/// A pixel in CIE L*a*b*. a* and b* are clamped to the histogram range.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabPixel {
    pub l: f64,
    pub a: f64,
    pub b: f64,
}

fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.040_45 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn linear_to_srgb(c: f64) -> f64 {
    if c <= 0.003_130_8 {
        12.92 * c
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

fn lab_f(t: f64) -> f64 {
    if t > EPSILON {
        t.cbrt()
    } else {
        (KAPPA * t + 16.0) / 116.0
    }
}

fn lab_f_inv(f: f64) -> f64 {
    let cube = f * f * f;
    if cube > EPSILON {
        cube
    } else {
        (116.0 * f - 16.0) / KAPPA
    }
}

/// Converts one 8-bit sRGB pixel.
pub fn srgb_to_lab(rgb: [u8; 3]) -> LabPixel {
    let lin = [
        LINEAR[rgb[0] as usize],
        LINEAR[rgb[1] as usize],
        LINEAR[rgb[2] as usize],
    ];
    let xyz: [f64; 3] =
        std::array::from_fn(|r| (0..3).map(|c| RGB_TO_XYZ[r][c] * lin[c]).sum::<f64>() / WHITE[r]);
    let [fx, fy, fz] = xyz.map(lab_f);
    LabPixel {
        l: (116.0 * fy - 16.0).clamp(0.0, 100.0),
        a: (500.0 * (fx - fy)).clamp(CHROMA_MIN, CHROMA_MAX),
        b: (200.0 * (fy - fz)).clamp(CHROMA_MIN, CHROMA_MAX),
    }
}

/// Inverse conversion. Returns `None` when the colour lies outside the sRGB
/// gamut by more than half a quantisation step.
pub fn lab_to_srgb(lab: LabPixel) -> Option<[u8; 3]> {
    let fy = (lab.l + 16.0) / 116.0;
    let fx = fy + lab.a / 500.0;
    let fz = fy - lab.b / 200.0;
    let xyz = [
        lab_f_inv(fx) * WHITE[0],
        lab_f_inv(fy) * WHITE[1],
        lab_f_inv(fz) * WHITE[2],
    ];
    let mut out = [0u8; 3];
    for (r, slot) in out.iter_mut().enumerate() {
        let lin: f64 = (0..3).map(|c| XYZ_TO_RGB[r][c] * xyz[c]).sum();
        let v = linear_to_srgb(lin.max(0.0)) * 255.0;
        if !(-0.5..=255.5).contains(&v) || lin < -1e-4 {
            return None;
        }
        *slot = v.round().clamp(0.0, 255.0) as u8;
    }
    Some(out)
}

/// One L*a*b* pixel per input pixel, in raster order.
pub fn rgb_to_lab(view: &View) -> Vec<LabPixel> {
    view.rgb().map(srgb_to_lab).collect()
}

/// Width of one chroma bucket for `bins` buckets per axis.
pub fn bucket_width(bins: usize) -> f64 {
    (CHROMA_MAX - CHROMA_MIN) / bins as f64
}

/// Bucket index of a chroma coordinate; out-of-range values land in the
/// edge buckets.
pub fn chroma_bucket(value: f64, bins: usize) -> usize {
    let pos = ((value - CHROMA_MIN) / bucket_width(bins)).floor();
    if pos <= 0.0 {
        0
    } else {
        (pos as usize).min(bins - 1)
    }
}

/// Centre of a chroma bucket.
pub fn bucket_center(index: usize, bins: usize) -> f64 {
    CHROMA_MIN + (index as f64 + 0.5) * bucket_width(bins)
}

/// Normalised B×B a*/b* histogram of a view.
pub fn hist(view: &View, bins: usize) -> Result<ColorHistogram> {
    if bins == 0 {
        return Err(Error::InvalidHistogram("zero bins".into()));
    }
    let mut counts = vec![0u32; bins * bins];
    for rgb in view.rgb() {
        let lab = srgb_to_lab(rgb);
        counts[chroma_bucket(lab.a, bins) * bins + chroma_bucket(lab.b, bins)] += 1;
    }
    let total = view.pixel_count() as f64;
    let data: Vec<f64> = counts.into_iter().map(|c| c as f64 / total).collect();
    ColorHistogram::from_raw(bins, data)
}

/// Normalised histogram intersection `Σ min(h1, h2) / Σ h2`, in `[0, 1]`.
pub fn nhi(h1: &ColorHistogram, h2: &ColorHistogram) -> Result<f64> {
    if h1.bins() != h2.bins() {
        return Err(Error::BinCountMismatch(h1.bins(), h2.bins()));
    }
    let denom = h2.mass();
    if denom <= 0.0 {
        return Ok(0.0);
    }
    let overlap: f64 = h1
        .as_slice()
        .iter()
        .zip(h2.as_slice())
        .map(|(a, b)| a.min(*b))
        .sum();
    Ok((overlap / denom).clamp(0.0, 1.0))
}

/// Cosine similarity. A zero-norm operand yields 0.
pub fn cosine(c: &Embedding, e: &Embedding) -> Result<f64> {
    if c.dim() != e.dim() {
        return Err(Error::dims(c.dim(), e.dim()));
    }
    let (mut dot, mut nc, mut ne) = (0.0, 0.0, 0.0);
    for (x, y) in c.values().iter().zip(e.values()) {
        dot += x * y;
        nc += x * x;
        ne += y * y;
    }
    if nc == 0.0 || ne == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (nc.sqrt() * ne.sqrt())).clamp(-1.0, 1.0))
}

/// Element-wise mean of histograms with equal bin counts.
pub fn average_histograms(hs: &[ColorHistogram]) -> Result<ColorHistogram> {
    let first = hs.first().ok_or(Error::EmptyInput)?;
    let bins = first.bins();
    let mut acc = vec![0.0; bins * bins];
    for h in hs {
        if h.bins() != bins {
            return Err(Error::BinCountMismatch(bins, h.bins()));
        }
        for (slot, v) in acc.iter_mut().zip(h.as_slice()) {
            *slot += v;
        }
    }
    let n = hs.len() as f64;
    acc.iter_mut().for_each(|v| *v /= n);
    ColorHistogram::from_raw(bins, acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Scalar CIE reference with XYZ on the 0..100 scale, written separately
    /// from the table-driven conversion above.
    fn reference_lab(rgb: [u8; 3]) -> (f64, f64, f64) {
        let lin = |c: u8| {
            let c = c as f64 / 255.0;
            100.0
                * if c > 0.04045 {
                    ((c + 0.055) / 1.055).powf(2.4)
                } else {
                    c / 12.92
                }
        };
        let (r, g, b) = (lin(rgb[0]), lin(rgb[1]), lin(rgb[2]));
        let x = r * 0.4124564 + g * 0.3575761 + b * 0.1804375;
        let y = r * 0.2126729 + g * 0.7151522 + b * 0.0721750;
        let z = r * 0.0193339 + g * 0.1191920 + b * 0.9503041;
        let f = |t: f64| {
            if t > 0.008856 {
                t.powf(1.0 / 3.0)
            } else {
                7.787 * t + 16.0 / 116.0
            }
        };
        let (fx, fy, fz) = (f(x / 95.047), f(y / 100.0), f(z / 108.883));
        (116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz))
    }

    fn view_from(pixels: &[[u8; 3]], width: u32) -> View {
        let flat: Vec<u8> = pixels.iter().flatten().copied().collect();
        View::new(width, pixels.len() as u32 / width, flat).unwrap()
    }

    #[test]
    fn white_and_black_anchor_points() {
        let white = srgb_to_lab([255, 255, 255]);
        assert!((white.l - 100.0).abs() < 0.5 && white.a.abs() < 0.5 && white.b.abs() < 0.5);
        let black = srgb_to_lab([0, 0, 0]);
        assert!(black.l.abs() < 0.5 && black.a.abs() < 0.5 && black.b.abs() < 0.5);
    }

    #[test]
    fn mid_gray_matches_reference() {
        let lab = srgb_to_lab([119, 119, 119]);
        let (l, _, _) = reference_lab([119, 119, 119]);
        assert!(lab.a.abs() < 0.5 && lab.b.abs() < 0.5);
        assert!((lab.l - l).abs() < 1e-3);
        // Independent value from a third-party colour library.
        assert!((lab.l - 50.0344).abs() < 1e-3);
    }

    #[test]
    fn saturated_colours_match_reference() {
        // (r, g, b) -> (L, a, b) from an external implementation; blue's b*
        // exceeds the histogram range and is clamped.
        let cases = [
            ([255, 0, 0], (53.2406, 80.0923, 67.2028)),
            ([0, 0, 255], (32.2957, 79.1856, -107.8573)),
            ([30, 200, 60], (70.8078, -67.1583, 55.9504)),
        ];
        for (rgb, (l, a, b)) in cases {
            let lab = srgb_to_lab(rgb);
            assert!((lab.l - l).abs() < 1e-2, "{rgb:?}: {lab:?}");
            assert!((lab.a - a).abs() < 1e-2, "{rgb:?}: {lab:?}");
            assert!((lab.b - b).abs() < 1e-2, "{rgb:?}: {lab:?}");
        }
    }

    #[test]
    fn lab_round_trip_in_gamut() {
        for rgb in [[12u8, 200, 90], [250, 128, 3], [77, 77, 200], [128, 128, 128]] {
            let back = lab_to_srgb(srgb_to_lab(rgb)).unwrap();
            assert_eq!(back, rgb);
        }
        assert!(lab_to_srgb(LabPixel { l: 95.0, a: 120.0, b: -120.0 }).is_none());
    }

    #[test]
    fn uniform_view_fills_one_bucket() {
        let view = View::uniform(5, 7, [200, 40, 90]).unwrap();
        let h = hist(&view, 32).unwrap();
        let ones = h.as_slice().iter().filter(|v| **v == 1.0).count();
        let zeros = h.as_slice().iter().filter(|v| **v == 0.0).count();
        assert_eq!((ones, zeros), (1, 32 * 32 - 1));
    }

    #[test]
    fn two_colour_image_matches_hand_count() {
        // Red and pure gray, two pixels each, four buckets per axis.
        let view = view_from(&[[255, 0, 0], [128, 128, 128], [128, 128, 128], [255, 0, 0]], 2);
        let h = hist(&view, 4).unwrap();
        // Bucket width 63.75: red a*=80.09 -> 3, b*=67.20 -> 3; gray (0,0) -> 2, 2.
        let mut expected = vec![0.0; 16];
        expected[3 * 4 + 3] = 0.5;
        expected[2 * 4 + 2] = 0.5;
        assert_eq!(h.as_slice(), expected.as_slice());
    }

    #[test]
    fn zero_bins_is_rejected() {
        let view = View::uniform(1, 1, [0, 0, 0]).unwrap();
        assert!(hist(&view, 0).is_err());
    }

    #[test]
    fn nhi_examples() {
        let a = ColorHistogram::new(2, vec![0.7, 0.3, 0.0, 0.0]).unwrap();
        let b = ColorHistogram::new(2, vec![0.4, 0.6, 0.0, 0.0]).unwrap();
        assert!((nhi(&a, &b).unwrap() - 0.7).abs() < 1e-12);
        assert_eq!(nhi(&a, &a).unwrap(), 1.0);
        let c = ColorHistogram::new(2, vec![0.0, 0.0, 0.5, 0.5]).unwrap();
        assert_eq!(nhi(&a, &c).unwrap(), 0.0);
        let d = ColorHistogram::new(1, vec![1.0]).unwrap();
        assert!(matches!(nhi(&a, &d), Err(Error::BinCountMismatch(2, 1))));
    }

    #[test]
    fn cosine_examples() {
        let e = |v: &[f64]| Embedding::new(v.to_vec()).unwrap();
        let v = e(&[0.3, 1.2, 4.0]);
        assert!((cosine(&v, &v).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine(&e(&[1.0, 0.0]), &e(&[0.0, 1.0])).unwrap(), 0.0);
        assert!((cosine(&e(&[1.0, 2.0, 3.0]), &e(&[4.0, 5.0, 6.0])).unwrap() - 0.97463).abs() < 1e-5);
        assert_eq!(cosine(&e(&[0.0, 0.0]), &e(&[1.0, 1.0])).unwrap(), 0.0);
        assert!(cosine(&e(&[1.0]), &e(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn average_examples() {
        let h = |v: &[f64]| ColorHistogram::new(2, v.to_vec()).unwrap();
        let single = h(&[0.1, 0.2, 0.3, 0.4]);
        assert_eq!(average_histograms(std::slice::from_ref(&single)).unwrap(), single);
        let avg = average_histograms(&[h(&[1.0, 0.0, 0.0, 0.0]), h(&[0.0, 1.0, 0.0, 0.0])]).unwrap();
        assert_eq!(avg.as_slice(), &[0.5, 0.5, 0.0, 0.0]);
        let three = [
            h(&[0.1, 0.2, 0.3, 0.4]),
            h(&[0.4, 0.3, 0.2, 0.1]),
            h(&[0.7, 0.1, 0.1, 0.1]),
        ];
        let avg = average_histograms(&three).unwrap();
        for (got, want) in avg.as_slice().iter().zip([0.4, 0.2, 0.2, 0.2]) {
            assert!((got - want).abs() < 1e-12);
        }
        assert!(matches!(average_histograms(&[]), Err(Error::EmptyInput)));
        let other = ColorHistogram::new(1, vec![1.0]).unwrap();
        assert!(average_histograms(&[single, other]).is_err());
    }

    fn arb_pixels() -> impl Strategy<Value = Vec<[u8; 3]>> {
        prop::collection::vec(any::<[u8; 3]>(), 1..64)
    }

    proptest! {
        #[test]
        fn lab_agrees_with_scalar_reference(rgb in any::<[u8; 3]>()) {
            let lab = srgb_to_lab(rgb);
            let (l, a, b) = reference_lab(rgb);
            prop_assert!((lab.l - l).abs() < 0.05);
            prop_assert!((lab.a - a.clamp(CHROMA_MIN, CHROMA_MAX)).abs() < 0.05);
            prop_assert!((lab.b - b.clamp(CHROMA_MIN, CHROMA_MAX)).abs() < 0.05);
        }

        #[test]
        fn histogram_is_normalized_and_permutation_invariant(pixels in arb_pixels(), seed in any::<u64>()) {
            let n = pixels.len() as u32;
            let h = hist(&view_from(&pixels, n), 16).unwrap();
            prop_assert!(h.is_normalized());
            let mut shuffled = pixels.clone();
            let len = shuffled.len();
            for i in 0..len {
                let j = (seed.wrapping_mul(i as u64 + 1).rotate_left(17) % len as u64) as usize;
                shuffled.swap(i, j);
            }
            prop_assert_eq!(hist(&view_from(&shuffled, n), 16).unwrap(), h);
        }

        #[test]
        fn coarse_histogram_is_block_sum_of_fine(pixels in arb_pixels()) {
            let n = pixels.len() as u32;
            let view = view_from(&pixels, n);
            for (coarse, fine) in [(4usize, 8usize), (8, 32)] {
                let hc = hist(&view, coarse).unwrap();
                let hf = hist(&view, fine).unwrap();
                let k = fine / coarse;
                for i in 0..coarse {
                    for j in 0..coarse {
                        let mut sum = 0.0;
                        for di in 0..k {
                            for dj in 0..k {
                                sum += hf.get(i * k + di, j * k + dj);
                            }
                        }
                        prop_assert!((hc.get(i, j) - sum).abs() < 1e-12);
                    }
                }
            }
        }

        #[test]
        fn nhi_is_symmetric_and_bounded(a in arb_pixels(), b in arb_pixels()) {
            let ha = hist(&view_from(&a, a.len() as u32), 8).unwrap();
            let hb = hist(&view_from(&b, b.len() as u32), 8).unwrap();
            let ab = nhi(&ha, &hb).unwrap();
            let ba = nhi(&hb, &ha).unwrap();
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!((nhi(&ha, &ha).unwrap() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn cosine_is_scale_invariant(
            v in prop::collection::vec(0.0f64..10.0, 8),
            w in prop::collection::vec(0.0f64..10.0, 8),
            alpha in 1e-3f64..1e3,
            beta in 1e-3f64..1e3,
        ) {
            let c = Embedding::new(v).unwrap();
            let e = Embedding::new(w).unwrap();
            let base = cosine(&c, &e).unwrap();
            let scaled = cosine(&c.scaled(alpha), &e.scaled(beta)).unwrap();
            prop_assert!((base - scaled).abs() < 1e-12);
        }

        #[test]
        fn average_keeps_unit_mass(views in prop::collection::vec(arb_pixels(), 1..6)) {
            let hs: Vec<_> = views
                .iter()
                .map(|p| hist(&view_from(p, p.len() as u32), 8).unwrap())
                .collect();
            prop_assert!(average_histograms(&hs).unwrap().is_normalized());
        }
    }
}
