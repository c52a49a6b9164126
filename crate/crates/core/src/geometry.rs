//! Polygon and contour primitives in image coordinates (x right, y down).
//!
//! Orientation convention: a ring is *canonical* when its shoelace sum
//! `Σ (x_i·y_{i+1} − x_{i+1}·y_i)` is positive. Because the y-axis points
//! down this is the order top-left → top-right → bottom-right → bottom-left,
//! i.e. clockwise on screen and counter-clockwise in the usual y-up frame.
//! [`Contour::new`] brings every ingested ring into this orientation, so
//! circular-convolution neighbours always run the same way around an object.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid bounding box ({x0}, {y0}, {x1}, {y1}): need x1 > x0 and y1 > y0")]
    InvalidBox { x0: f64, y0: f64, x1: f64, y1: f64 },
    #[error("contour needs at least 3 distinct vertices, got {0}")]
    TooFewVertices(usize),
    #[error("non-finite coordinate")]
    NonFinite,
    #[error("contour has zero length")]
    Degenerate,
    #[error("sample count {k} invalid: {reason}")]
    InvalidSampleCount { k: usize, reason: &'static str },
    #[error("object extent must be positive, got {0} x {1}")]
    ZeroExtent(f64, f64),
    #[error("mask dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("empty multipolygon")]
    EmptyMultiPolygon,
}

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn dist(self, o: Point) -> f64 {
        (self.x - o.x).hypot(self.y - o.y)
    }

    pub fn dist2(self, o: Point) -> f64 {
        (self.x - o.x).powi(2) + (self.y - o.y).powi(2)
    }

    pub fn lerp(self, o: Point, t: f64) -> Point {
        Point::new(self.x + t * (o.x - self.x), self.y + t * (o.y - self.y))
    }

    fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

/// Axis-aligned box with `x1 > x0`, `y1 > y0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self, GeometryError> {
        let finite = [x0, y0, x1, y1].iter().all(|v| v.is_finite());
        if !finite || x1 <= x0 || y1 <= y0 {
            return Err(GeometryError::InvalidBox { x0, y0, x1, y1 });
        }
        Ok(BBox { x0, y0, x1, y1 })
    }

    /// Tight box around a point set.
    pub fn from_points(points: &[Point]) -> Result<Self, GeometryError> {
        let mut it = points.iter();
        let first = it.next().ok_or(GeometryError::TooFewVertices(0))?;
        let (mut x0, mut y0, mut x1, mut y1) = (first.x, first.y, first.x, first.y);
        for p in it {
            x0 = x0.min(p.x);
            y0 = y0.min(p.y);
            x1 = x1.max(p.x);
            y1 = y1.max(p.y);
        }
        BBox::new(x0, y0, x1, y1)
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn center(&self) -> Point {
        Point::new(0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))
    }

    pub fn perimeter(&self) -> f64 {
        2.0 * (self.width() + self.height())
    }

    pub fn union(&self, o: &BBox) -> BBox {
        BBox { x0: self.x0.min(o.x0), y0: self.y0.min(o.y0), x1: self.x1.max(o.x1), y1: self.y1.max(o.y1) }
    }

    pub fn intersects(&self, o: &BBox) -> bool {
        self.x0 < o.x1 && o.x0 < self.x1 && self.y0 < o.y1 && o.y0 < self.y1
    }

    pub fn corners(&self) -> [Point; 4] {
        [
            Point::new(self.x0, self.y0),
            Point::new(self.x1, self.y0),
            Point::new(self.x1, self.y1),
            Point::new(self.x0, self.y1),
        ]
    }

    /// Point at arc length `s` along the boundary, starting at the top-left
    /// corner and running top → right → bottom → left. `s` wraps.
    pub fn point_at_arc(&self, s: f64) -> Point {
        let (w, h) = (self.width(), self.height());
        let s = s.rem_euclid(self.perimeter());
        if s < w {
            Point::new(self.x0 + s, self.y0)
        } else if s < w + h {
            Point::new(self.x1, self.y0 + (s - w))
        } else if s < 2.0 * w + h {
            Point::new(self.x1 - (s - w - h), self.y1)
        } else {
            Point::new(self.x0, self.y1 - (s - 2.0 * w - h))
        }
    }

    /// Inverse of [`BBox::point_at_arc`] for a point on (or projected onto)
    /// the nearest side. Result lies in `[0, perimeter)`.
    pub fn arc_position(&self, p: Point) -> f64 {
        let (w, h) = (self.width(), self.height());
        let sides = [
            ((p.y - self.y0).abs(), (p.x - self.x0).clamp(0.0, w)),
            ((p.x - self.x1).abs(), w + (p.y - self.y0).clamp(0.0, h)),
            ((p.y - self.y1).abs(), w + h + (self.x1 - p.x).clamp(0.0, w)),
            ((p.x - self.x0).abs(), 2.0 * w + h + (self.y1 - p.y).clamp(0.0, h)),
        ];
        let best = sides.iter().min_by(|a, b| a.0.total_cmp(&b.0)).expect("four sides");
        best.1.rem_euclid(self.perimeter())
    }
}

/// Closed ring of at least three vertices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Contour {
    vertices: Vec<Point>,
}

impl Contour {
    /// Ingests a ring: drops consecutive duplicates (including a repeated
    /// closing vertex) and reverses it if needed so its orientation is
    /// canonical. The first vertex is kept first.
    pub fn new(vertices: Vec<Point>) -> Result<Self, GeometryError> {
        if vertices.iter().any(|p| !p.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        let mut v: Vec<Point> = Vec::with_capacity(vertices.len());
        for p in vertices {
            if v.last() != Some(&p) {
                v.push(p);
            }
        }
        while v.len() > 1 && v.first() == v.last() {
            v.pop();
        }
        if v.len() < 3 {
            return Err(GeometryError::TooFewVertices(v.len()));
        }
        let mut c = Contour { vertices: v };
        if c.signed_area() < 0.0 {
            c.vertices[1..].reverse();
        }
        Ok(c)
    }

    /// Wraps vertices verbatim (no reordering or de-duplication). Used for
    /// model output, where vertex indices must stay aligned with the input.
    pub fn from_ring(vertices: Vec<Point>) -> Result<Self, GeometryError> {
        if vertices.iter().any(|p| !p.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        if vertices.len() < 3 {
            return Err(GeometryError::TooFewVertices(vertices.len()));
        }
        Ok(Contour { vertices })
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn into_vertices(self) -> Vec<Point> {
        self.vertices
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn edges(&self) -> impl Iterator<Item = (Point, Point)> + '_ {
        let n = self.vertices.len();
        (0..n).map(move |i| (self.vertices[i], self.vertices[(i + 1) % n]))
    }

    /// Half the shoelace sum; positive for canonical orientation.
    pub fn signed_area(&self) -> f64 {
        0.5 * self.edges().map(|(a, b)| a.x * b.y - b.x * a.y).sum::<f64>()
    }

    pub fn area(&self) -> f64 {
        self.signed_area().abs()
    }

    pub fn perimeter(&self) -> f64 {
        self.edges().map(|(a, b)| a.dist(b)).sum()
    }

    pub fn bbox(&self) -> Result<BBox, GeometryError> {
        BBox::from_points(&self.vertices)
    }

    /// Cumulative arc length at each vertex, starting at 0.
    pub fn cumulative_lengths(&self) -> Vec<f64> {
        let mut acc = 0.0;
        let mut out = Vec::with_capacity(self.vertices.len());
        for (a, b) in self.edges() {
            out.push(acc);
            acc += a.dist(b);
        }
        out
    }

    /// Point at arc length `s` from the first vertex (wrapping).
    pub fn point_at_arc(&self, s: f64) -> Point {
        let cum = self.cumulative_lengths();
        point_at_arc_with(&self.vertices, &cum, self.perimeter(), s)
    }

    pub fn map(&self, f: impl Fn(Point) -> Point) -> Contour {
        Contour { vertices: self.vertices.iter().map(|&p| f(p)).collect() }
    }

    /// Same ring starting at vertex `m`.
    pub fn rotated(&self, m: usize) -> Contour {
        let mut v = self.vertices.clone();
        let n = v.len();
        v.rotate_left(m % n);
        Contour { vertices: v }
    }
}

pub(crate) fn point_at_arc_with(vertices: &[Point], cum: &[f64], perimeter: f64, s: f64) -> Point {
    let n = vertices.len();
    if perimeter <= 0.0 {
        return vertices[0];
    }
    let s = s.rem_euclid(perimeter);
    let i = match cum.binary_search_by(|c| c.total_cmp(&s)) {
        Ok(i) => i,
        Err(i) => i - 1,
    };
    let a = vertices[i];
    let b = vertices[(i + 1) % n];
    let seg = if i + 1 < n { cum[i + 1] - cum[i] } else { perimeter - cum[i] };
    if seg <= 0.0 {
        a
    } else {
        a.lerp(b, ((s - cum[i]) / seg).clamp(0.0, 1.0))
    }
}

/// One or more outer rings of a single instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MultiPolygon {
    rings: Vec<Contour>,
}

impl MultiPolygon {
    pub fn new(rings: Vec<Contour>) -> Result<Self, GeometryError> {
        if rings.is_empty() {
            return Err(GeometryError::EmptyMultiPolygon);
        }
        Ok(MultiPolygon { rings })
    }

    pub fn single(ring: Contour) -> Self {
        MultiPolygon { rings: vec![ring] }
    }

    pub fn rings(&self) -> &[Contour] {
        &self.rings
    }

    pub fn bbox(&self) -> Result<BBox, GeometryError> {
        let all: Vec<Point> = self.rings.iter().flat_map(|r| r.vertices().iter().copied()).collect();
        BBox::from_points(&all)
    }
}

/// `K` points evenly spaced by arc length around the box, starting at the
/// top-left corner in canonical orientation. When the side lengths are
/// multiples of the spacing (always the case for squares) the corners are
/// among the samples.
pub fn sample_box_contour(b: &BBox, k: usize) -> Result<Contour, GeometryError> {
    if k < 4 || !k.is_multiple_of(4) {
        return Err(GeometryError::InvalidSampleCount { k, reason: "need k >= 4 and divisible by 4" });
    }
    let step = b.perimeter() / k as f64;
    let pts = (0..k).map(|i| b.point_at_arc(i as f64 * step)).collect();
    Contour::from_ring(pts)
}

/// `K` points evenly spaced by arc length along the ring, first vertex kept.
pub fn resample_arclength(c: &Contour, k: usize) -> Result<Contour, GeometryError> {
    if k < 3 {
        return Err(GeometryError::InvalidSampleCount { k, reason: "need k >= 3" });
    }
    let perimeter = c.perimeter();
    if perimeter <= 0.0 {
        return Err(GeometryError::Degenerate);
    }
    let cum = c.cumulative_lengths();
    let step = perimeter / k as f64;
    let pts = (0..k).map(|i| point_at_arc_with(c.vertices(), &cum, perimeter, i as f64 * step)).collect();
    Contour::from_ring(pts)
}

/// Relative coordinates: `((x − min x)/obj_w, (y − min y)/obj_h)` with minima
/// over the given vertices. Invariant to translation and to joint scaling of
/// vertices and object size.
pub fn normalize_coords(points: &[Point], obj_w: f64, obj_h: f64) -> Result<Vec<[f64; 2]>, GeometryError> {
    if !(obj_w > 0.0 && obj_h > 0.0) {
        return Err(GeometryError::ZeroExtent(obj_w, obj_h));
    }
    let min_x = points.iter().map(|p| p.x).fold(f64::INFINITY, f64::min);
    let min_y = points.iter().map(|p| p.y).fold(f64::INFINITY, f64::min);
    Ok(points.iter().map(|p| [(p.x - min_x) / obj_w, (p.y - min_y) / obj_h]).collect())
}

/// Binary image, row-major, `true` = foreground.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Mask { width, height, data: vec![false; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let data = (0..width * height).map(|i| f(i % width, i / width)).collect();
        Mask { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn union_with(&mut self, o: &Mask) {
        self.data.iter_mut().zip(&o.data).for_each(|(a, b)| *a |= *b);
    }

    fn check_dims(&self, o: &Mask) -> Result<(), GeometryError> {
        if self.width != o.width || self.height != o.height {
            return Err(GeometryError::DimensionMismatch(self.width, self.height, o.width, o.height));
        }
        Ok(())
    }
}

/// Fills one ring into `mask` (OR) with the even-odd rule: pixel `(col, row)`
/// is inside iff its center `(col + 0.5, row + 0.5)` is.
pub fn rasterize_ring(ring: &Contour, mask: &mut Mask) {
    let mut xs: Vec<f64> = Vec::new();
    for row in 0..mask.height {
        let y = row as f64 + 0.5;
        xs.clear();
        for (a, b) in ring.edges() {
            // half-open in y so a vertex on the scanline is counted once
            if (a.y <= y && y < b.y) || (b.y <= y && y < a.y) {
                xs.push(a.x + (y - a.y) * (b.x - a.x) / (b.y - a.y));
            }
        }
        xs.sort_by(f64::total_cmp);
        for span in xs.chunks_exact(2) {
            // columns whose center lies in [span0, span1)
            let first = (span[0] - 0.5).ceil().max(0.0);
            let end = (span[1] - 0.5).ceil().min(mask.width as f64);
            let mut col = first;
            while col < end {
                mask.set(col as usize, row, true);
                col += 1.0;
            }
        }
    }
}

/// Union of the even-odd fills of every ring.
pub fn rasterize(poly: &MultiPolygon, width: usize, height: usize) -> Mask {
    let mut mask = Mask::new(width, height);
    for ring in poly.rings() {
        rasterize_ring(ring, &mut mask);
    }
    mask
}

/// `|a ∧ b| / |a ∨ b|`; two empty masks have IoU 1.
pub fn mask_iou(a: &Mask, b: &Mask) -> Result<f64, GeometryError> {
    a.check_dims(b)?;
    let (mut inter, mut uni) = (0usize, 0usize);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        inter += (x && y) as usize;
        uni += (x || y) as usize;
    }
    Ok(if uni == 0 { 1.0 } else { inter as f64 / uni as f64 })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum InstanceMode {
    /// One box around all rings of an instance.
    PerInstance,
    /// One box per ring.
    #[default]
    PerComponent,
}

impl std::str::FromStr for InstanceMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "per-instance" => Ok(InstanceMode::PerInstance),
            "per-component" => Ok(InstanceMode::PerComponent),
            other => Err(format!("unknown mode `{other}` (expected per-instance or per-component)")),
        }
    }
}

/// A unit of annotation: the rings covered by one box.
#[derive(Clone, Debug, PartialEq)]
pub struct Component {
    pub rings: Vec<Contour>,
    pub bbox: BBox,
}

impl Component {
    /// The ring used as the regression target: the largest by area.
    pub fn primary_ring(&self) -> &Contour {
        self.rings
            .iter()
            .max_by(|a, b| a.area().total_cmp(&b.area()))
            .expect("component has at least one ring")
    }
}

pub fn split_components(poly: &MultiPolygon, mode: InstanceMode) -> Result<Vec<Component>, GeometryError> {
    match mode {
        InstanceMode::PerComponent => poly
            .rings()
            .iter()
            .map(|r| Ok(Component { rings: vec![r.clone()], bbox: r.bbox()? }))
            .collect(),
        InstanceMode::PerInstance => Ok(vec![Component { rings: poly.rings().to_vec(), bbox: poly.bbox()? }]),
    }
}

/// A crossing of a ground-truth edge with the box boundary.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intersection {
    pub point: Point,
    /// Arc length along the ground-truth ring from its first vertex.
    pub gt_arc: f64,
    /// Index of the ground-truth edge `(v_edge, v_edge+1)`.
    pub edge: usize,
    /// Arc position on the box boundary (see [`BBox::arc_position`]).
    pub box_arc: f64,
}

pub(crate) fn geometry_eps(scale: f64) -> f64 {
    1e-9 * scale.max(1.0)
}

/// All points where ground-truth edges meet the box boundary, ordered by
/// ground-truth arc length. Points closer than a relative 1e-9 along the
/// ring (a vertex on a side, a crossing through a corner, a tangential
/// touch) are reported once; edges parallel to a side contribute nothing.
pub fn contour_box_intersections(gt: &Contour, b: &BBox) -> Vec<Intersection> {
    let eps = geometry_eps(b.width().max(b.height()));
    let cum = gt.cumulative_lengths();
    let perimeter = gt.perimeter();
    let mut hits: Vec<Intersection> = Vec::new();
    for (e, (p, q)) in gt.edges().enumerate() {
        let len = p.dist(q);
        // horizontal sides: y = const, x within [x0, x1]
        for y_side in [b.y0, b.y1] {
            if (q.y - p.y).abs() <= f64::EPSILON * len.max(1.0) {
                continue;
            }
            let t = (y_side - p.y) / (q.y - p.y);
            let x = p.x + t * (q.x - p.x);
            if (-eps..=1.0 + eps).contains(&t) && x >= b.x0 - eps && x <= b.x1 + eps {
                let t = t.clamp(0.0, 1.0);
                let pt = Point::new(x.clamp(b.x0, b.x1), y_side);
                hits.push(Intersection { point: pt, gt_arc: cum[e] + t * len, edge: e, box_arc: b.arc_position(pt) });
            }
        }
        for x_side in [b.x0, b.x1] {
            if (q.x - p.x).abs() <= f64::EPSILON * len.max(1.0) {
                continue;
            }
            let t = (x_side - p.x) / (q.x - p.x);
            let y = p.y + t * (q.y - p.y);
            if (-eps..=1.0 + eps).contains(&t) && y >= b.y0 - eps && y <= b.y1 + eps {
                let t = t.clamp(0.0, 1.0);
                let pt = Point::new(x_side, y.clamp(b.y0, b.y1));
                hits.push(Intersection { point: pt, gt_arc: cum[e] + t * len, edge: e, box_arc: b.arc_position(pt) });
            }
        }
    }
    dedupe_by_arc(hits, perimeter, geometry_eps(perimeter))
}

pub(crate) fn dedupe_by_arc(mut hits: Vec<Intersection>, perimeter: f64, tol: f64) -> Vec<Intersection> {
    for h in &mut hits {
        if perimeter - h.gt_arc <= tol {
            h.gt_arc = 0.0;
        }
    }
    hits.sort_by(|a, b| a.gt_arc.total_cmp(&b.gt_arc));
    let mut out: Vec<Intersection> = Vec::with_capacity(hits.len());
    for h in hits {
        if out.last().is_some_and(|l| h.gt_arc - l.gt_arc <= tol) {
            continue;
        }
        out.push(h);
    }
    out
}
