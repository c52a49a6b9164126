//! Dataset manifests, image sources, the synthetic shape generator and the
//! stream of training samples.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{extract_crops, CropPair};
use crate::geometry::{
    mask_iou, rasterize, rasterize_ring, resample_arclength, split_components, BBox, Contour, GeometryError,
    InstanceMode, Mask, MultiPolygon, Point,
};
use crate::head::initial_contour;
use crate::image::{Image, ImageError};
use crate::matching::{segment_match, MatchResult};
use crate::model::ModelError;
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("manifest {pointer}: {message}")]
    Schema { pointer: String, message: String },
    #[error("instance {instance} references missing image id {image_id}")]
    MissingImage { instance: u64, image_id: u64 },
    #[error("instance {instance} has unknown category `{category}`")]
    UnknownCategory { instance: u64, category: String },
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("no image with id {0}")]
    NoImage(u64),
    #[error("unknown shape family `{0}` (expected ellipse, polygon or star)")]
    ShapeFamily(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub id: u64,
    pub file: String,
    pub width: usize,
    pub height: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category: String,
    pub polygons: MultiPolygon,
    pub bbox: BBox,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Dataset {
    pub images: Vec<ImageEntry>,
    pub categories: Vec<String>,
    pub instances: Vec<InstanceAnnotation>,
    pub split: Split,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawManifest {
    images: Vec<ImageEntry>,
    categories: Vec<String>,
    instances: Vec<RawInstance>,
    #[serde(default)]
    split: Split,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawInstance {
    id: u64,
    image_id: u64,
    category: String,
    polygons: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bbox: Option<[f64; 4]>,
}

fn schema(pointer: String, message: impl Into<String>) -> DataError {
    DataError::Schema { pointer, message: message.into() }
}

fn json_pointer(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for seg in path.iter() {
        out.push('/');
        match seg {
            Segment::Seq { index } => out.push_str(&index.to_string()),
            Segment::Map { key } => out.push_str(&key.replace('~', "~0").replace('/', "~1")),
            Segment::Enum { variant } => out.push_str(variant),
            Segment::Unknown => out.push('?'),
        }
    }
    if out.is_empty() {
        out.push('/');
    }
    out
}

impl Dataset {
    /// Parses and validates manifest JSON. Polygons are clamped to their
    /// image and brought into canonical orientation; missing boxes are
    /// derived tight to the polygons.
    pub fn from_json(text: &str) -> Result<Self, DataError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let raw: RawManifest = serde_path_to_error::deserialize(de).map_err(|e| {
            let pointer = json_pointer(e.path());
            schema(pointer, e.into_inner().to_string())
        })?;
        let dims: HashMap<u64, (usize, usize)> = raw.images.iter().map(|i| (i.id, (i.width, i.height))).collect();
        let mut seen = HashSet::new();
        for (n, img) in raw.images.iter().enumerate() {
            if img.width == 0 || img.height == 0 {
                return Err(schema(format!("/images/{n}"), "image dimensions must be positive"));
            }
            if !seen.insert(img.id) {
                return Err(schema(format!("/images/{n}/id"), format!("duplicate image id {}", img.id)));
            }
        }
        let cats: HashSet<&str> = raw.categories.iter().map(String::as_str).collect();
        let mut instances = Vec::with_capacity(raw.instances.len());
        for (n, ri) in raw.instances.iter().enumerate() {
            let &(w, h) = dims.get(&ri.image_id).ok_or(DataError::MissingImage { instance: ri.id, image_id: ri.image_id })?;
            if !cats.contains(ri.category.as_str()) {
                return Err(DataError::UnknownCategory { instance: ri.id, category: ri.category.clone() });
            }
            if ri.polygons.is_empty() {
                return Err(schema(format!("/instances/{n}/polygons"), "at least one polygon required"));
            }
            let mut rings = Vec::with_capacity(ri.polygons.len());
            for (p, flat) in ri.polygons.iter().enumerate() {
                let here = || format!("/instances/{n}/polygons/{p}");
                if flat.len() < 6 || flat.len() % 2 != 0 {
                    return Err(schema(here(), format!("need an even number (>= 6) of coordinates, got {}", flat.len())));
                }
                let pts = flat
                    .chunks_exact(2)
                    .map(|c| Point::new(c[0].clamp(0.0, w as f64), c[1].clamp(0.0, h as f64)))
                    .collect();
                rings.push(Contour::new(pts).map_err(|e| schema(here(), e.to_string()))?);
            }
            let polygons = MultiPolygon::new(rings)?;
            let tight = polygons.bbox().map_err(|e| schema(format!("/instances/{n}/polygons"), e.to_string()))?;
            let bbox = match ri.bbox {
                None => tight,
                Some([x0, y0, x1, y1]) => {
                    let b = BBox::new(x0, y0, x1, y1).map_err(|e| schema(format!("/instances/{n}/bbox"), e.to_string()))?;
                    if tight.x0 < b.x0 || tight.y0 < b.y0 || tight.x1 > b.x1 || tight.y1 > b.y1 {
                        return Err(schema(format!("/instances/{n}/bbox"), "box does not contain the polygons"));
                    }
                    b
                }
            };
            instances.push(InstanceAnnotation { id: ri.id, image_id: ri.image_id, category: ri.category.clone(), polygons, bbox });
        }
        Ok(Dataset { images: raw.images, categories: raw.categories, instances, split: raw.split })
    }

    pub fn to_json(&self) -> String {
        let raw = RawManifest {
            images: self.images.clone(),
            categories: self.categories.clone(),
            split: self.split,
            instances: self
                .instances
                .iter()
                .map(|i| RawInstance {
                    id: i.id,
                    image_id: i.image_id,
                    category: i.category.clone(),
                    polygons: i
                        .polygons
                        .rings()
                        .iter()
                        .map(|r| r.vertices().iter().flat_map(|p| [p.x, p.y]).collect())
                        .collect(),
                    bbox: Some([i.bbox.x0, i.bbox.y0, i.bbox.x1, i.bbox.y1]),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&raw).expect("manifest serializes")
    }

    pub fn image(&self, id: u64) -> Option<&ImageEntry> {
        self.images.iter().find(|i| i.id == id)
    }

    /// Instances whose category is in `keep`, with the images they use.
    pub fn filter_categories(&self, keep: &[&str]) -> Dataset {
        let instances: Vec<_> = self.instances.iter().filter(|i| keep.contains(&i.category.as_str())).cloned().collect();
        let used: HashSet<u64> = instances.iter().map(|i| i.image_id).collect();
        Dataset {
            images: self.images.iter().filter(|i| used.contains(&i.id)).cloned().collect(),
            categories: self.categories.iter().filter(|c| keep.contains(&c.as_str())).cloned().collect(),
            instances,
            split: self.split,
        }
    }

    /// The first `n` instances and the images they use.
    pub fn take_instances(&self, n: usize) -> Dataset {
        let instances: Vec<_> = self.instances.iter().take(n).cloned().collect();
        let used: HashSet<u64> = instances.iter().map(|i| i.image_id).collect();
        Dataset {
            images: self.images.iter().filter(|i| used.contains(&i.id)).cloned().collect(),
            categories: self.categories.clone(),
            instances,
            split: self.split,
        }
    }
}

/// Reads and validates a manifest file.
pub fn load_dataset(path: &Path) -> Result<Dataset, DataError> {
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io { path: path.to_owned(), source })?;
    Dataset::from_json(&text)
}

pub fn export_dataset(ds: &Dataset, path: &Path) -> Result<(), DataError> {
    std::fs::write(path, ds.to_json()).map_err(|source| DataError::Io { path: path.to_owned(), source })
}

/// Where pixels come from.
pub trait ImageSource: Sync {
    fn load(&self, id: u64) -> Result<Image, DataError>;
}

/// PNG files relative to a manifest directory.
pub struct DirSource {
    root: PathBuf,
    files: HashMap<u64, String>,
}

impl DirSource {
    pub fn new(root: impl Into<PathBuf>, ds: &Dataset) -> Self {
        DirSource { root: root.into(), files: ds.images.iter().map(|i| (i.id, i.file.clone())).collect() }
    }
}

impl ImageSource for DirSource {
    fn load(&self, id: u64) -> Result<Image, DataError> {
        let file = self.files.get(&id).ok_or(DataError::NoImage(id))?;
        Ok(Image::load_png(&self.root.join(file))?)
    }
}

/// Decoded images held in memory.
#[derive(Clone, Debug, Default)]
pub struct MemorySource(pub HashMap<u64, Image>);

impl ImageSource for MemorySource {
    fn load(&self, id: u64) -> Result<Image, DataError> {
        self.0.get(&id).cloned().ok_or(DataError::NoImage(id))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeFamily {
    Ellipse,
    Polygon,
    Star,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 3] = [ShapeFamily::Ellipse, ShapeFamily::Polygon, ShapeFamily::Star];

    pub fn name(self) -> &'static str {
        match self {
            ShapeFamily::Ellipse => "ellipse",
            ShapeFamily::Polygon => "polygon",
            ShapeFamily::Star => "star",
        }
    }
}

impl fmt::Display for ShapeFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeFamily {
    type Err = DataError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ShapeFamily::ALL.into_iter().find(|f| f.name() == s).ok_or_else(|| DataError::ShapeFamily(s.to_owned()))
    }
}

/// Parses a comma-separated family list such as `ellipse,star`.
pub fn parse_shape_mix(s: &str) -> Result<Vec<ShapeFamily>, DataError> {
    s.split(',').map(|p| p.trim().parse()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub images: usize,
    pub image_size: usize,
    pub families: Vec<ShapeFamily>,
    /// Chance that an instance consists of two separate pieces.
    pub two_component_prob: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { seed: 7, images: 64, image_size: 128, families: ShapeFamily::ALL.to_vec(), two_component_prob: 0.0 }
    }
}

/// A generated dataset together with its rendered images.
#[derive(Clone, Debug)]
pub struct SyntheticSet {
    pub dataset: Dataset,
    pub images: MemorySource,
}

impl SyntheticSet {
    /// Writes `manifest.json` and `images/*.png` under `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<PathBuf, DataError> {
        let io = |path: &Path| {
            let path = path.to_owned();
            move |source| DataError::Io { path, source }
        };
        std::fs::create_dir_all(dir.join("images")).map_err(io(dir))?;
        for entry in &self.dataset.images {
            self.images.load(entry.id)?.save_png(&dir.join(&entry.file))?;
        }
        let manifest = dir.join("manifest.json");
        export_dataset(&self.dataset, &manifest)?;
        Ok(manifest)
    }
}

fn ring_from_radii(c: Point, n: usize, phase: f64, r: impl Fn(f64) -> (f64, f64)) -> Vec<Point> {
    (0..n)
        .map(|i| {
            let t = phase + std::f64::consts::TAU * i as f64 / n as f64;
            let (dx, dy) = r(t);
            Point::new(c.x + dx, c.y + dy)
        })
        .collect()
}

/// Closed outline of one shape of the given family, bounded by a circle of
/// radius `radius` around `c`.
fn shape_outline(rng: &mut ChaCha8Rng, family: ShapeFamily, c: Point, radius: f64) -> Result<Contour, GeometryError> {
    let n = rng.gen_range(64..=256);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let pts = match family {
        ShapeFamily::Ellipse => {
            let (a, b) = (radius * rng.gen_range(0.55..1.0), radius * rng.gen_range(0.55..1.0));
            let rot = rng.gen_range(0.0..std::f64::consts::PI);
            let (s, co) = rot.sin_cos();
            ring_from_radii(c, n, phase, |t| {
                let (x, y) = (a * t.cos(), b * t.sin());
                (x * co - y * s, x * s + y * co)
            })
        }
        ShapeFamily::Star => {
            let lobes = rng.gen_range(4..=7) as f64;
            let depth = rng.gen_range(0.2..0.4);
            let lobe_phase = rng.gen_range(0.0..std::f64::consts::TAU);
            ring_from_radii(c, n, phase, |t| {
                let r = radius * (1.0 - depth) / (1.0 + depth) * (1.0 + depth * (lobes * t + lobe_phase).cos());
                (r * t.cos(), r * t.sin())
            })
        }
        ShapeFamily::Polygon => {
            // convex corners on the bounding circle, rounded by a few rounds
            // of corner cutting, then resampled to `n` vertices
            let m = rng.gen_range(3..=6);
            let start = rng.gen_range(0.0..std::f64::consts::TAU);
            let mut corners: Vec<f64> = (0..m)
                .map(|i| start + std::f64::consts::TAU * (i as f64 + rng.gen_range(-0.2..0.2)) / m as f64)
                .collect();
            corners.sort_by(f64::total_cmp);
            let mut ring: Vec<Point> =
                corners.iter().map(|t| Point::new(c.x + radius * t.cos(), c.y + radius * t.sin())).collect();
            for _ in 0..3 {
                let k = ring.len();
                ring = (0..k)
                    .flat_map(|i| {
                        let (p, q) = (ring[i], ring[(i + 1) % k]);
                        [p.lerp(q, 0.2), p.lerp(q, 0.8)]
                    })
                    .collect();
            }
            return resample_arclength(&Contour::new(ring)?, n).and_then(|r| Contour::new(r.into_vertices()));
        }
    };
    Contour::new(pts)
}

/// Fractional pixel coverage of a multipolygon from 4×4 supersampling.
pub fn render_coverage(poly: &MultiPolygon, width: usize, height: usize) -> Vec<f32> {
    const SS: usize = 4;
    let mut fine = Mask::new(SS * width, SS * height);
    for r in poly.rings() {
        rasterize_ring(&r.map(|p| Point::new(SS as f64 * p.x, SS as f64 * p.y)), &mut fine);
    }
    let mut out = vec![0f32; width * height];
    for (i, o) in out.iter_mut().enumerate() {
        let (x, y) = (i % width, i / width);
        let mut hits = 0;
        for dy in 0..SS {
            for dx in 0..SS {
                hits += fine.get(SS * x + dx, SS * y + dy) as usize;
            }
        }
        *o = hits as f32 / (SS * SS) as f32;
    }
    out
}

fn random_color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)]
}

fn color_distance(a: [f32; 3], b: [f32; 3]) -> f32 {
    a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum()
}

/// Smooth two-tone texture: base color modulated by a random plane wave.
struct Texture {
    base: [f32; 3],
    amp: f32,
    kx: f32,
    ky: f32,
    phase: f32,
}

impl Texture {
    fn random(rng: &mut ChaCha8Rng, base: [f32; 3], amp: f32) -> Self {
        let freq = rng.gen_range(0.05..0.35);
        let dir = rng.gen_range(0.0..std::f32::consts::TAU);
        Texture { base, amp, kx: freq * dir.cos(), ky: freq * dir.sin(), phase: rng.gen_range(0.0..std::f32::consts::TAU) }
    }

    fn at(&self, c: usize, x: usize, y: usize) -> f32 {
        let wave = (self.kx * x as f32 + self.ky * y as f32 + self.phase).sin();
        (self.base[c] + self.amp * wave).clamp(0.0, 1.0)
    }
}

/// Renders `cfg.images` images with 1–3 non-overlapping instances each.
/// Every instance is one shape, or two disjoint shapes of the same family
/// with probability `two_component_prob`. Deterministic in `cfg.seed`.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<SyntheticSet, DataError> {
    if cfg.families.is_empty() {
        return Err(DataError::ShapeFamily(String::new()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let size = cfg.image_size;
    let sz = size as f64;
    let mut ds = Dataset { categories: cfg.families.iter().map(|f| f.name().to_owned()).collect(), ..Default::default() };
    let mut store = HashMap::new();
    let mut next_instance = 0u64;
    for image_id in 0..cfg.images as u64 {
        let bg_base = random_color(&mut rng);
        let bg = Texture::random(&mut rng, bg_base, 0.08);
        let mut data: Vec<f32> = (0..3 * size * size).map(|i| bg.at(i / (size * size), i % size, (i / size) % size)).collect();
        let noise: Vec<f32> = (0..3 * size * size).map(|_| rng.gen_range(-0.03..0.03)).collect();

        let count = rng.gen_range(1..=3);
        let mut discs: Vec<(Point, f64)> = Vec::new();
        let mut place = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| -> Option<(Point, f64)> {
            for _ in 0..50 {
                let r = sz * rng.gen_range(lo..hi);
                let c = Point::new(rng.gen_range(r + 2.0..sz - r - 2.0), rng.gen_range(r + 2.0..sz - r - 2.0));
                if discs.iter().all(|(d, dr)| d.dist(c) > r + dr + 3.0) {
                    discs.push((c, r));
                    return Some((c, r));
                }
            }
            None
        };
        for _ in 0..count {
            let family = cfg.families[rng.gen_range(0..cfg.families.len())];
            let pieces = if rng.gen_bool(cfg.two_component_prob.clamp(0.0, 1.0)) { 2 } else { 1 };
            let (lo, hi) = if pieces == 2 { (0.08, 0.16) } else { (0.12, 0.3) };
            let mut rings = Vec::new();
            for _ in 0..pieces {
                if let Some((c, r)) = place(&mut rng, lo, hi) {
                    rings.push(shape_outline(&mut rng, family, c, r)?);
                }
            }
            if rings.is_empty() {
                continue;
            }
            let poly = MultiPolygon::new(rings)?;
            let fill_base = loop {
                let col = random_color(&mut rng);
                if color_distance(col, bg.base) > 0.6 {
                    break col;
                }
            };
            let fill = Texture::random(&mut rng, fill_base, 0.06);
            let cov = render_coverage(&poly, size, size);
            for (p, &a) in cov.iter().enumerate().filter(|(_, a)| **a > 0.0) {
                let (x, y) = (p % size, p / size);
                for ch in 0..3 {
                    let i = ch * size * size + p;
                    data[i] = (1.0 - a) * data[i] + a * fill.at(ch, x, y);
                }
            }
            ds.instances.push(InstanceAnnotation {
                id: next_instance,
                image_id,
                category: family.name().to_owned(),
                bbox: poly.bbox()?,
                polygons: poly,
            });
            next_instance += 1;
        }
        for (d, n) in data.iter_mut().zip(&noise) {
            *d = (*d + n).clamp(0.0, 1.0);
        }
        // quantize like a PNG round trip so memory and disk agree
        let img = Image::from_rgb8(&Image::new(size, size, data)?.to_rgb8());
        store.insert(image_id, img);
        ds.images.push(ImageEntry { id: image_id, file: format!("images/{image_id:05}.png"), width: size, height: size });
    }
    Ok(SyntheticSet { dataset: ds, images: MemorySource(store) })
}

/// Exactly `n` instances: `n` images are generated (each holds at least
/// one shape) and the first `n` instances kept, together with their images.
pub fn generate_instances(cfg: &SynthConfig, n: usize) -> Result<SyntheticSet, DataError> {
    let full = generate_synthetic(&SynthConfig { images: n, ..cfg.clone() })?;
    let dataset = full.dataset.take_instances(n);
    let keep: HashSet<u64> = dataset.images.iter().map(|i| i.id).collect();
    let images = MemorySource(full.images.0.into_iter().filter(|(id, _)| keep.contains(id)).collect());
    Ok(SyntheticSet { dataset, images })
}

/// IoU of a rendered instance (coverage ≥ 0.5) against its polygon raster.
pub fn render_self_iou(poly: &MultiPolygon, width: usize, height: usize) -> Result<f64, GeometryError> {
    let cov = render_coverage(poly, width, height);
    let rendered = Mask::from_fn(width, height, |x, y| cov[y * width + x] >= 0.5);
    mask_iou(&rendered, &rasterize(poly, width, height))
}

/// One network input with its supervision, all in crop coordinates.
#[derive(Clone, Debug)]
pub struct TrainingSample<T> {
    pub instance_id: u64,
    /// Which ring of the instance (per-component mode), 0 otherwise.
    pub component: usize,
    pub image_box: BBox,
    pub crop: CropPair<T>,
    pub initial: Vec<Point>,
    /// Ground-truth ring resampled to `K` vertices.
    pub gt: Contour,
    pub matched: MatchResult,
}

impl<T: Scalar> TrainingSample<T> {
    /// Mirror image of the sample about the crop's vertical axis, with the
    /// matching recomputed.
    pub fn flipped(&self) -> Result<Self, DataError> {
        let s = self.crop.search.shape()[2] as f64;
        let mut search = self.crop.search.clone();
        let (c, h, w) = (search.shape()[0], search.shape()[1], search.shape()[2]);
        for row in search.data_mut().chunks_mut(w).take(c * h) {
            row.reverse();
        }
        let mirror = |p: Point| Point::new(s - p.x, p.y);
        let cb = self.crop.crop_box;
        let crop_box = BBox::new(s - cb.x1, cb.y0, s - cb.x0, cb.y1)?;
        let crop = CropPair { search, crop_box, ..self.crop.clone() };
        let gt = Contour::new(self.gt.vertices().iter().map(|&p| mirror(p)).collect())?;
        // mirrored vertices run the other way round; reversing restores orientation
        let initial: Vec<Point> = self.initial.iter().rev().map(|&p| mirror(p)).collect();
        let init_contour = Contour::from_ring(initial.clone())?;
        let matched = segment_match(&init_contour, &gt, &crop_box)?;
        Ok(TrainingSample { crop, initial, gt, matched, ..self.clone() })
    }
}

/// Builds the samples of a dataset: one per ring with its tight box in
/// per-component mode, one per instance with the union box otherwise (the
/// largest ring is then the regression target).
pub fn iterate_training_pairs<'a, T: Scalar>(
    ds: &'a Dataset,
    images: &'a dyn ImageSource,
    mode: InstanceMode,
    s: f64,
    k: usize,
    crop_size: usize,
) -> impl Iterator<Item = Result<TrainingSample<T>, DataError>> + 'a {
    let mut cache: BTreeMap<u64, Image> = BTreeMap::new();
    ds.instances.iter().flat_map(move |inst| {
        let comps = match split_components(&inst.polygons, mode) {
            Ok(c) => c,
            Err(e) => return vec![Err(e.into())],
        };
        let img = match cache.get(&inst.image_id) {
            Some(i) => i.clone(),
            None => match images.load(inst.image_id) {
                Ok(i) => {
                    cache.clear();
                    cache.insert(inst.image_id, i.clone());
                    i
                }
                Err(e) => return vec![Err(e)],
            },
        };
        comps
            .iter()
            .enumerate()
            .map(|(ci, comp)| build_sample(&img, inst.id, ci, &comp.bbox, comp.primary_ring(), s, k, crop_size))
            .collect()
    })
}

#[allow(clippy::too_many_arguments)]
fn build_sample<T: Scalar>(
    img: &Image,
    instance_id: u64,
    component: usize,
    b: &BBox,
    ring: &Contour,
    s: f64,
    k: usize,
    crop_size: usize,
) -> Result<TrainingSample<T>, DataError> {
    let crop = extract_crops::<T>(img, b, s, crop_size)?;
    let initial = initial_contour(&crop, k)?;
    let gt = Contour::new(ring.vertices().iter().map(|&p| crop.transform.to_crop(p)).collect())?;
    let gt = resample_arclength(&gt, k)?;
    let matched = segment_match(&Contour::from_ring(initial.clone())?, &gt, &crop.crop_box)?;
    Ok(TrainingSample { instance_id, component, image_box: *b, crop, initial, gt, matched })
}
