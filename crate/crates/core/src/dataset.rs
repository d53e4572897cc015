//! Multi-view datasets: on-disk format, synthetic generation, view sampling
//! and Gaussian noise injection.
//!
//! A dataset directory holds one manifest, binary PPM rasters and optional
//! float32 embedding sidecars. Manifest lines are
//! `instance_id<TAB>label<TAB>view[,view...][<TAB>sidecar]`, paths relative to
//! the manifest. Lines starting with `#` are comments, except
//! `# classes = K` which fixes the class count.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::descriptors::{bucket_width, lab_to_srgb, srgb_to_lab, LabPixel};
use crate::error::{Error, Result};
use crate::palette::{ClassPalette, PaletteSpec, LIGHTNESS_JITTER};
use crate::seed::derive;
use crate::types::{
    CaptureId, Embedding, MultiViewInstance, NodeId, Prediction, TimePeriod, View, CHANNELS,
    MAX_CLASSES,
};

/// Casts up to this chroma keep every background pixel in a bucket whose
/// centre is within the toy model's default achromatic radius.
pub const MAX_BACKGROUND_TINT: f64 = 8.0;

const SIDECAR_MAGIC: &[u8; 4] = b"MVE1";
const SIDECAR_HEADER: usize = 16;

// ---------------------------------------------------------------------------
// Rasters

pub fn write_ppm(path: &Path, view: &View) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    write!(out, "P6\n{} {}\n255\n", view.width(), view.height())?;
    out.write_all(view.pixels())?;
    out.flush()?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<View> {
    let bytes = read_file(path)?;
    let (width, height, offset) = parse_ppm_header(path, &bytes)?;
    let expected = width as usize * height as usize * CHANNELS;
    let data = &bytes[offset..];
    if data.len() != expected {
        return Err(malformed(path, format!("expected {expected} pixel bytes, found {}", data.len())));
    }
    View::new(width, height, data.to_vec()).map_err(|e| malformed(path, e.to_string()))
}

/// Width and height of a PPM file without decoding its pixels.
pub fn ppm_dims(path: &Path) -> Result<(u32, u32)> {
    let bytes = read_file(path)?;
    let (w, h, _) = parse_ppm_header(path, &bytes)?;
    Ok((w, h))
}

fn malformed(path: &Path, reason: impl Into<String>) -> Error {
    Error::MalformedRaster {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })
}

fn parse_ppm_header(path: &Path, bytes: &[u8]) -> Result<(u32, u32, usize)> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() {
            match bytes[pos] {
                b'#' => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(malformed(path, "truncated header"));
        }
        fields.push(&bytes[start..pos]);
    }
    // Exactly one whitespace byte separates maxval from the raster.
    if pos >= bytes.len() {
        return Err(malformed(path, "missing pixel data"));
    }
    pos += 1;
    if fields[0] != b"P6" {
        return Err(malformed(path, "not a binary PPM (P6)"));
    }
    let num = |f: &[u8], what: &str| -> Result<u32> {
        std::str::from_utf8(f)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| malformed(path, format!("bad {what}")))
    };
    let width = num(fields[1], "width")?;
    let height = num(fields[2], "height")?;
    if num(fields[3], "maxval")? != 255 {
        return Err(malformed(path, "only maxval 255 is supported"));
    }
    if width == 0 || height == 0 {
        return Err(malformed(path, "zero-sized raster"));
    }
    Ok((width, height, pos))
}

// ---------------------------------------------------------------------------
// Embedding sidecars

pub fn write_sidecar(path: &Path, rows: &[Embedding]) -> Result<()> {
    let dim = rows.first().map_or(0, Embedding::dim);
    if rows.iter().any(|r| r.dim() != dim) {
        return Err(Error::config("sidecar rows must share one dimension"));
    }
    let mut out = BufWriter::new(fs::File::create(path)?);
    out.write_all(SIDECAR_MAGIC)?;
    out.write_all(&(rows.len() as u32).to_le_bytes())?;
    out.write_all(&(dim as u32).to_le_bytes())?;
    out.write_all(&0u32.to_le_bytes())?;
    for row in rows {
        for v in row.values() {
            out.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads a sidecar and checks it holds exactly `views` rows.
pub fn read_sidecar(path: &Path, views: usize) -> Result<Vec<Embedding>> {
    let bytes = read_file(path)?;
    let bad = |reason: String| Error::SidecarShapeMismatch {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < SIDECAR_HEADER || &bytes[..4] != SIDECAR_MAGIC {
        return Err(bad("missing MVE1 header".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    let (count, dim) = (word(4), word(8));
    if count != views {
        return Err(bad(format!("{count} rows for {views} views")));
    }
    if dim == 0 {
        return Err(bad("zero embedding dimension".into()));
    }
    let body = &bytes[SIDECAR_HEADER..];
    if body.len() != count * dim * 4 {
        return Err(bad(format!(
            "{} data bytes, expected {count}x{dim} float32",
            body.len()
        )));
    }
    body.chunks_exact(dim * 4)
        .map(|row| {
            let values: Vec<f64> = row
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
                .collect();
            Embedding::new(values)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Manifest

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub instance_id: String,
    pub label: usize,
    pub views: Vec<PathBuf>,
    pub sidecar: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    /// Directory relative paths are resolved against.
    pub root: PathBuf,
    pub instances: Vec<ManifestEntry>,
    pub classes: usize,
    pub view_dims: (u32, u32),
}

impl DatasetManifest {
    /// Parses a manifest and checks that every referenced file exists and
    /// every raster header is well formed.
    pub fn open(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut declared = None;
        let mut instances = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim_end_matches('\r');
            let bad = |reason: &str| Error::MalformedManifest {
                line: line_no,
                reason: reason.to_string(),
            };
            if line.trim().is_empty() {
                continue;
            }
            if let Some(comment) = line.trim_start().strip_prefix('#') {
                if let Some((key, value)) = comment.split_once('=') {
                    if key.trim() == "classes" {
                        declared = Some(value.trim().parse::<usize>().map_err(|_| bad("bad class count"))?);
                    }
                }
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if !(3..=4).contains(&fields.len()) {
                return Err(bad("expected 3 or 4 tab-separated fields"));
            }
            let label = fields[1].trim().parse::<usize>().map_err(|_| bad("label is not an integer"))?;
            let views: Vec<PathBuf> = fields[2]
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(PathBuf::from)
                .collect();
            if views.is_empty() {
                return Err(bad("instance has no views"));
            }
            let sidecar = fields
                .get(3)
                .map(|s| s.trim())
                .filter(|s| !s.is_empty())
                .map(PathBuf::from);
            instances.push(ManifestEntry {
                instance_id: fields[0].trim().to_string(),
                label,
                views,
                sidecar,
            });
        }
        if instances.is_empty() {
            return Err(Error::MalformedManifest {
                line: 0,
                reason: "no instances".into(),
            });
        }
        let max_label = instances.iter().map(|e| e.label).max().unwrap_or(0);
        let classes = declared.unwrap_or(max_label + 1);
        if classes > MAX_CLASSES || max_label >= classes {
            return Err(Error::LabelOutOfRange {
                label: max_label,
                classes,
            });
        }
        let mut view_dims = None;
        for entry in &instances {
            for v in &entry.views {
                let dims = ppm_dims(&root.join(v))?;
                match view_dims {
                    None => view_dims = Some(dims),
                    Some(d) if d != dims => {
                        return Err(malformed(
                            &root.join(v),
                            format!("{}x{} differs from dataset size {}x{}", dims.0, dims.1, d.0, d.1),
                        ))
                    }
                    Some(_) => {}
                }
            }
            if let Some(s) = &entry.sidecar {
                let p = root.join(s);
                if !p.is_file() {
                    return Err(Error::MissingFile(p));
                }
            }
        }
        Ok(DatasetManifest {
            root,
            instances,
            classes,
            view_dims: view_dims.expect("at least one view"),
        })
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// Decodes one instance. Views carry capture ids `(index, view)`.
    pub fn load_instance(&self, index: usize) -> Result<Sample> {
        let entry = &self.instances[index];
        let views = entry
            .views
            .iter()
            .enumerate()
            .map(|(v, p)| {
                read_ppm(&self.root.join(p)).map(|view| {
                    view.with_capture(CaptureId {
                        instance: index as u32,
                        view: v as u16,
                    })
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let embeddings = entry
            .sidecar
            .as_ref()
            .map(|s| read_sidecar(&self.root.join(s), views.len()))
            .transpose()?;
        Ok(Sample {
            instance_id: entry.instance_id.clone(),
            label: Prediction::new(entry.label, self.classes)?,
            views,
            embeddings,
        })
    }

    pub fn load(&self) -> Result<Dataset> {
        let samples = (0..self.len())
            .map(|i| self.load_instance(i))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            classes: self.classes,
            view_dims: self.view_dims,
            samples,
        })
    }
}

/// Opens a manifest and decodes every instance.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    DatasetManifest::open(manifest_path)?.load()
}

// ---------------------------------------------------------------------------
// In-memory datasets

/// One labelled object with all its captured views.
#[derive(Clone, Debug)]
pub struct Sample {
    pub instance_id: String,
    pub label: Prediction,
    pub views: Vec<View>,
    /// Offline embeddings, one row per view, if the dataset ships them.
    pub embeddings: Option<Vec<Embedding>>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub classes: usize,
    pub view_dims: (u32, u32),
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn has_embeddings(&self) -> bool {
        !self.samples.is_empty() && self.samples.iter().all(|s| s.embeddings.is_some())
    }

    pub fn min_views(&self) -> usize {
        self.samples.iter().map(|s| s.views.len()).min().unwrap_or(0)
    }

    /// Writes rasters, sidecars and `manifest.tsv` under `dir` and returns
    /// the manifest path.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir.join("views"))?;
        let manifest_path = dir.join("manifest.tsv");
        let mut manifest = BufWriter::new(fs::File::create(&manifest_path)?);
        writeln!(manifest, "# classes = {}", self.classes)?;
        for (i, s) in self.samples.iter().enumerate() {
            if s.instance_id.contains(['\t', '\n']) {
                return Err(Error::config(format!("instance id {:?} contains a tab or newline", s.instance_id)));
            }
            let mut paths = Vec::with_capacity(s.views.len());
            for (v, view) in s.views.iter().enumerate() {
                let rel = format!("views/{i:05}_{v:02}.ppm");
                write_ppm(&dir.join(&rel), view)?;
                paths.push(rel);
            }
            write!(manifest, "{}\t{}\t{}", s.instance_id, s.label.label(), paths.join(","))?;
            if let Some(rows) = &s.embeddings {
                let rel = format!("views/{i:05}.mve");
                write_sidecar(&dir.join(&rel), rows)?;
                write!(manifest, "\t{rel}")?;
            }
            writeln!(manifest)?;
        }
        manifest.flush()?;
        Ok(manifest_path)
    }
}

// ---------------------------------------------------------------------------
// View sampling

/// Seeded sampling of the views a round sees. With `split_context`, half the
/// views (rounded down) are held out as previous-period context and the `n`
/// current views are drawn from the rest.
pub fn sample_views(
    views: &[View],
    n: usize,
    split_context: bool,
    seed: u64,
) -> Result<(Vec<View>, Vec<View>)> {
    let total = views.len();
    let held_out = if split_context { total / 2 } else { 0 };
    let remaining = total - held_out;
    if n == 0 || n > remaining || (split_context && held_out == 0) {
        return Err(Error::NotEnoughViews {
            requested: n,
            available: remaining,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut rng);
    let context = order[..held_out].iter().map(|&i| views[i].clone()).collect();
    let current = index::sample(&mut rng, remaining, n)
        .into_iter()
        .map(|j| views[order[held_out + j]].clone())
        .collect();
    Ok((current, context))
}

impl Sample {
    /// Builds the round input: `n` current views on nodes `0..n`, plus the
    /// held-out context views when `split_context` is set.
    pub fn instance(
        &self,
        n: usize,
        split_context: bool,
        seed: u64,
        period: TimePeriod,
    ) -> Result<MultiViewInstance> {
        let (current, context) = sample_views(&self.views, n, split_context, seed)?;
        let place = |vs: Vec<View>| -> Vec<View> {
            vs.into_iter()
                .enumerate()
                .map(|(i, v)| v.with_node(NodeId::source(i)).with_period(period))
                .collect()
        };
        Ok(MultiViewInstance {
            instance_id: self.instance_id.clone(),
            true_label: self.label,
            views: place(current),
            context_views: place(context),
        })
    }
}

// ---------------------------------------------------------------------------
// Synthetic generation

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub instances_per_class: usize,
    pub views_per_instance: usize,
    pub width: u32,
    pub height: u32,
    /// Signature colours per class.
    pub colors_per_class: usize,
    /// Chroma bins the signatures are separable at.
    pub palette_bins: usize,
    /// Seed of the class signatures. Must match the toy model's seed for the
    /// two to agree.
    pub palette_seed: u64,
    /// 0 renders exact signature colours. Larger values add per-pixel chroma
    /// jitter (in bucket widths) and, with this probability per view, a
    /// patch painted in another class's colour.
    pub within_class_noise: f64,
    /// Largest chroma of the per-view background cast, in Lab units. Casts
    /// stay near the neutral axis, so they change colour histograms but not
    /// what a chroma classifier sees as foreground.
    pub background_tint: f64,
    /// Range of the ellipse semi-axes, as fractions of the view size.
    pub object_radius: (f64, f64),
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 10,
            instances_per_class: 10,
            views_per_instance: 12,
            width: 64,
            height: 64,
            colors_per_class: 3,
            palette_bins: 32,
            palette_seed: 7,
            within_class_noise: 0.0,
            background_tint: 2.0,
            object_radius: (0.15, 0.4),
            seed: 1,
        }
    }
}

impl SyntheticSpec {
    pub fn palette_spec(&self) -> PaletteSpec {
        PaletteSpec::new(self.classes, self.colors_per_class, self.palette_bins, self.palette_seed)
    }

    pub fn validate(&self) -> Result<()> {
        if self.instances_per_class == 0 || self.views_per_instance == 0 {
            return Err(Error::config("synthetic dataset needs instances and views"));
        }
        if self.width < 8 || self.height < 8 {
            return Err(Error::config("synthetic views must be at least 8x8"));
        }
        if self.colors_per_class < 2 {
            return Err(Error::config("classes need at least two signature colours"));
        }
        if !(0.0..=1.0).contains(&self.within_class_noise) {
            return Err(Error::config("within_class_noise must lie in [0, 1]"));
        }
        if !(0.0..=MAX_BACKGROUND_TINT).contains(&self.background_tint) {
            return Err(Error::config(format!("background_tint must lie in [0, {MAX_BACKGROUND_TINT}]")));
        }
        let (lo, hi) = self.object_radius;
        if !(lo > 0.0 && lo < hi && hi <= 1.0) {
            return Err(Error::config("object_radius must satisfy 0 < min < max <= 1"));
        }
        Ok(())
    }
}

/// Renders a labelled dataset from per-class chroma signatures.
///
/// Each view shows an ellipse on a neutral grey background. The ellipse is
/// split into angular sectors painted with the class's signature colours in
/// instance-specific proportions that vary a little from view to view.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let palette = ClassPalette::generate(&spec.palette_spec())?;
    let mut samples = Vec::with_capacity(spec.classes * spec.instances_per_class);
    for class in 0..spec.classes {
        for k in 0..spec.instances_per_class {
            let ordinal = samples.len();
            let mut rng = ChaCha8Rng::seed_from_u64(derive(spec.seed, &[0, class as u64, k as u64]));
            let colors = palette.colors(class);
            let used = rng.random_range(2..=colors.len());
            let mut chosen: Vec<usize> = (0..colors.len()).collect();
            chosen.shuffle(&mut rng);
            chosen.truncate(used);
            let weights: Vec<f64> = chosen.iter().map(|_| rng.random_range(0.3..1.0)).collect();
            let views = (0..spec.views_per_instance)
                .map(|v| {
                    let seed = derive(spec.seed, &[1, ordinal as u64, v as u64]);
                    render_view(spec, &palette, class, &chosen, &weights, seed).map(|view| {
                        view.with_capture(CaptureId {
                            instance: ordinal as u32,
                            view: v as u16,
                        })
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            samples.push(Sample {
                instance_id: format!("c{class:03}_i{k:04}"),
                label: Prediction::new(class, spec.classes)?,
                views,
                embeddings: None,
            });
        }
    }
    Ok(Dataset {
        classes: spec.classes,
        view_dims: (spec.width, spec.height),
        samples,
    })
}

fn render_view(
    spec: &SyntheticSpec,
    palette: &ClassPalette,
    class: usize,
    chosen: &[usize],
    weights: &[f64],
    seed: u64,
) -> Result<View> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (spec.width as f64, spec.height as f64);
    let gray: u8 = rng.random_range(90..=170);
    // Small objects placed anywhere in the frame, possibly cut by its edge,
    // so that views of one object overlap only partly in space.
    let radius = spec.object_radius.0..spec.object_radius.1;
    let rx = w * rng.random_range(radius.clone());
    let ry = h * rng.random_range(radius);
    let cx = w * rng.random_range(0.2..0.8);
    let cy = h * rng.random_range(0.2..0.8);
    let rotation = rng.random_range(0.0..std::f64::consts::TAU);

    // Sector boundaries from per-view perturbed proportions.
    let view_w: Vec<f64> = weights.iter().map(|x| x * rng.random_range(0.8..1.25)).collect();
    let total: f64 = view_w.iter().sum();
    let mut bounds = Vec::with_capacity(view_w.len());
    let mut acc = 0.0;
    for x in &view_w {
        acc += x / total;
        bounds.push(acc * std::f64::consts::TAU);
    }
    let base: Vec<LabPixel> = chosen
        .iter()
        .map(|&c| {
            let mut lab = palette.colors(class)[c].lab;
            lab.l += [-LIGHTNESS_JITTER, 0.0, LIGHTNESS_JITTER][rng.random_range(0..3)];
            lab
        })
        .collect();
    let rgb_of = |lab: LabPixel, fallback: [u8; 3]| lab_to_srgb(lab).unwrap_or(fallback);
    let exact: Vec<[u8; 3]> = base.iter().zip(chosen).map(|(lab, &c)| rgb_of(*lab, palette.colors(class)[c].rgb)).collect();

    let nu = spec.within_class_noise;
    let jitter = Normal::new(0.0, (nu * bucket_width(spec.palette_bins)).max(f64::MIN_POSITIVE))
        .expect("finite sd");

    // Optional confuser patch in another class's colour.
    let confuser = if nu > 0.0 && rng.random_bool(nu) {
        let other = (class + rng.random_range(1..spec.classes)) % spec.classes;
        let colors = palette.colors(other);
        let color = colors[rng.random_range(0..colors.len())].rgb;
        let pw = (w * rng.random_range(0.2..0.35)) as u32;
        let ph = (h * rng.random_range(0.2..0.35)) as u32;
        let x0 = rng.random_range(0..spec.width - pw);
        let y0 = rng.random_range(0..spec.height - ph);
        Some((x0, y0, pw, ph, color))
    } else {
        None
    };

    let background = if spec.background_tint > 0.0 {
        let r = rng.random_range(0.0..=spec.background_tint);
        let theta = rng.random_range(0.0..std::f64::consts::TAU);
        let lab = LabPixel {
            l: srgb_to_lab([gray; 3]).l,
            a: r * theta.cos(),
            b: r * theta.sin(),
        };
        rgb_of(lab, [gray; 3])
    } else {
        [gray; 3]
    };

    let mut pixels = Vec::with_capacity(spec.width as usize * spec.height as usize * CHANNELS);
    let (sin, cos) = rotation.sin_cos();
    for y in 0..spec.height {
        for x in 0..spec.width {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            let u = (dx * cos + dy * sin) / rx;
            let v = (-dx * sin + dy * cos) / ry;
            let mut rgb = background;
            if u * u + v * v <= 1.0 {
                let angle = v.atan2(u).rem_euclid(std::f64::consts::TAU);
                let s = bounds.iter().position(|b| angle < *b).unwrap_or(bounds.len() - 1);
                rgb = if nu > 0.0 {
                    let lab = LabPixel {
                        l: base[s].l,
                        a: base[s].a + jitter.sample(&mut rng),
                        b: base[s].b + jitter.sample(&mut rng),
                    };
                    rgb_of(lab, exact[s])
                } else {
                    exact[s]
                };
            }
            if let Some((x0, y0, pw, ph, color)) = confuser {
                if (x0..x0 + pw).contains(&x) && (y0..y0 + ph).contains(&y) {
                    rgb = color;
                }
            }
            pixels.extend_from_slice(&rgb);
        }
    }
    View::new(spec.width, spec.height, pixels)
}

// ---------------------------------------------------------------------------
// Noise

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NoiseLevel {
    /// Per-channel standard deviation in 8-bit units.
    Sigma(f64),
    TargetSnrDb(f64),
}

/// What "signal power" means when converting between SNR and sigma.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SignalPower {
    /// Mean of the squared 8-bit values.
    #[default]
    MeanSquare,
    /// Variance of the 8-bit values.
    Variance,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSpec {
    pub level: NoiseLevel,
    pub power: SignalPower,
}

impl NoiseSpec {
    pub fn sigma(sigma: f64) -> Self {
        NoiseSpec {
            level: NoiseLevel::Sigma(sigma),
            power: SignalPower::default(),
        }
    }

    pub fn snr_db(db: f64) -> Self {
        NoiseSpec {
            level: NoiseLevel::TargetSnrDb(db),
            power: SignalPower::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.level {
            NoiseLevel::Sigma(s) if s.is_finite() && s >= 0.0 => Ok(()),
            NoiseLevel::TargetSnrDb(db) if db.is_finite() => Ok(()),
            _ => Err(Error::config("noise needs a finite sigma >= 0 or a finite SNR")),
        }
    }
}

pub fn signal_power(view: &View, power: SignalPower) -> f64 {
    let px = view.pixels();
    let n = px.len() as f64;
    let mean_sq = px.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / n;
    match power {
        SignalPower::MeanSquare => mean_sq,
        SignalPower::Variance => {
            let mean = px.iter().map(|&v| v as f64).sum::<f64>() / n;
            (mean_sq - mean * mean).max(0.0)
        }
    }
}

/// Adds zero-mean Gaussian noise independently to every channel of every
/// pixel, rounds and clamps to 8 bits. Returns the noisy view and the SNR
/// implied by the noise level, `+inf` when sigma is 0.
pub fn add_noise(view: &View, spec: &NoiseSpec, seed: u64) -> Result<(View, f64)> {
    spec.validate()?;
    let power = signal_power(view, spec.power);
    let sigma = match spec.level {
        NoiseLevel::Sigma(s) => s,
        NoiseLevel::TargetSnrDb(db) => (power / 10f64.powf(db / 10.0)).sqrt(),
    };
    if sigma == 0.0 {
        return Ok((view.clone(), f64::INFINITY));
    }
    let snr = 10.0 * (power / (sigma * sigma)).log10();
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pixels = view
        .pixels()
        .iter()
        .map(|&v| (v as f64 + normal.sample(&mut rng)).round().clamp(0.0, 255.0) as u8)
        .collect();
    Ok((view.with_pixels(pixels), snr))
}
