//! Text-region polygons and the soft erasure mask built from them.
//!
//! A region's soft mask has a hard core (the polygon shrunk by `d`), a linear
//! ramp out to the polygon dilated by the same `d`, and zero beyond. The offset
//! distance follows the usual shrink rule from text detection,
//! `d = A * (1 - r^2) / L`.

use thiserror::Error;

use crate::exec::Exec;

const EPS: f64 = 1e-9;
/// Outer corners whose miter would reach further than this multiple of the
/// offset are cut square instead.
const MITER_LIMIT: f64 = 2.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("polygon needs at least 3 vertices, got {0}")]
    TooFewVertices(usize),
    #[error("polygon has a non-finite vertex")]
    NonFinite,
    #[error("polygon has zero area")]
    ZeroArea,
    #[error("polygon edges intersect")]
    SelfIntersecting,
    #[error("degenerate polygon")]
    Degenerate,
    #[error("offset ratio must lie in (0, 1), got {0}")]
    InvalidRatio(f64),
    #[error("polygon vanished")]
    Vanished,
    #[error("offset outline is not a simple polygon")]
    OffsetFailed,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    fn sub(self, o: Point) -> Point {
        Point::new(self.x - o.x, self.y - o.y)
    }

    fn add(self, o: Point) -> Point {
        Point::new(self.x + o.x, self.y + o.y)
    }

    fn scale(self, s: f64) -> Point {
        Point::new(self.x * s, self.y * s)
    }

    fn dot(self, o: Point) -> f64 {
        self.x * o.x + self.y * o.y
    }

    fn cross(self, o: Point) -> f64 {
        self.x * o.y - self.y * o.x
    }

    fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    fn normalized(self) -> Point {
        let n = self.norm();
        Point::new(self.x / n, self.y / n)
    }

    pub fn distance(self, o: Point) -> f64 {
        self.sub(o).norm()
    }
}

/// Closed, simple polygon in pixel coordinates (x right, y down).
#[derive(Debug, Clone, PartialEq)]
pub struct TextPolygon {
    vertices: Vec<Point>,
}

impl TextPolygon {
    pub fn new(vertices: Vec<Point>) -> Result<Self, GeometryError> {
        if vertices.len() < 3 {
            return Err(GeometryError::TooFewVertices(vertices.len()));
        }
        if vertices
            .iter()
            .any(|p| !p.x.is_finite() || !p.y.is_finite())
        {
            return Err(GeometryError::NonFinite);
        }
        let poly = Self { vertices };
        if poly.signed_area().abs() <= EPS {
            return Err(GeometryError::ZeroArea);
        }
        if !poly.is_simple() {
            return Err(GeometryError::SelfIntersecting);
        }
        Ok(poly)
    }

    pub fn from_coords(coords: &[[f64; 2]]) -> Result<Self, GeometryError> {
        Self::new(coords.iter().map(|&[x, y]| Point::new(x, y)).collect())
    }

    /// Axis-aligned rectangle `[x0, x1] x [y0, y1]`.
    pub fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self, GeometryError> {
        Self::from_coords(&[[x0, y0], [x1, y0], [x1, y1], [x0, y1]])
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn coords(&self) -> Vec<[f64; 2]> {
        self.vertices.iter().map(|p| [p.x, p.y]).collect()
    }

    fn edges(&self) -> impl Iterator<Item = (Point, Point)> + '_ {
        let n = self.vertices.len();
        (0..n).map(move |i| (self.vertices[i], self.vertices[(i + 1) % n]))
    }

    /// Shoelace area; positive when the vertex order has interior on the left
    /// in x-right/y-up terms.
    pub fn signed_area(&self) -> f64 {
        0.5 * self.edges().map(|(a, b)| a.cross(b)).sum::<f64>()
    }

    pub fn area(&self) -> f64 {
        self.signed_area().abs()
    }

    pub fn perimeter(&self) -> f64 {
        self.edges().map(|(a, b)| a.distance(b)).sum()
    }

    pub fn bounding_box(&self) -> (f64, f64, f64, f64) {
        let mut b = (
            f64::INFINITY,
            f64::INFINITY,
            f64::NEG_INFINITY,
            f64::NEG_INFINITY,
        );
        for p in &self.vertices {
            b.0 = b.0.min(p.x);
            b.1 = b.1.min(p.y);
            b.2 = b.2.max(p.x);
            b.3 = b.3.max(p.y);
        }
        b
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        Self {
            vertices: self
                .vertices
                .iter()
                .map(|p| Point::new(p.x + dx, p.y + dy))
                .collect(),
        }
    }

    pub fn is_convex(&self) -> bool {
        let n = self.vertices.len();
        let mut sign = 0.0f64;
        for i in 0..n {
            let a = self.vertices[i];
            let b = self.vertices[(i + 1) % n];
            let c = self.vertices[(i + 2) % n];
            let z = b.sub(a).cross(c.sub(b));
            if z.abs() <= EPS {
                continue;
            }
            if sign == 0.0 {
                sign = z.signum();
            } else if z.signum() != sign {
                return false;
            }
        }
        true
    }

    fn is_simple(&self) -> bool {
        let n = self.vertices.len();
        for i in 0..n {
            let (a, b) = (self.vertices[i], self.vertices[(i + 1) % n]);
            if a.distance(b) <= EPS {
                return false;
            }
            for j in (i + 1)..n {
                // adjacent edges share a vertex
                if j == i + 1 || (i == 0 && j == n - 1) {
                    continue;
                }
                let (c, d) = (self.vertices[j], self.vertices[(j + 1) % n]);
                if segments_intersect(a, b, c, d) {
                    return false;
                }
            }
        }
        true
    }

    /// Even-odd containment test.
    pub fn contains(&self, p: Point) -> bool {
        let mut inside = false;
        for (a, b) in self.edges() {
            if (a.y > p.y) != (b.y > p.y) {
                let x = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
                if p.x < x {
                    inside = !inside;
                }
            }
        }
        inside
    }

    /// Closest point on the outline to `p`.
    pub fn nearest_boundary_point(&self, p: Point) -> Point {
        let mut best = self.vertices[0];
        let mut best_d = f64::INFINITY;
        for (a, b) in self.edges() {
            let q = closest_on_segment(p, a, b);
            let d = q.distance(p);
            if d < best_d {
                best_d = d;
                best = q;
            }
        }
        best
    }

    pub fn distance_to_boundary(&self, p: Point) -> f64 {
        self.nearest_boundary_point(p).distance(p)
    }

    /// Same polygon with positive signed area.
    fn oriented(&self) -> Vec<Point> {
        let mut v = self.vertices.clone();
        if self.signed_area() < 0.0 {
            v.reverse();
        }
        v
    }

    fn convex_hull(&self) -> TextPolygon {
        let mut pts = self.vertices.clone();
        pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
        let mut lower: Vec<Point> = Vec::new();
        for &p in &pts {
            while lower.len() >= 2 {
                let k = lower.len();
                if lower[k - 1].sub(lower[k - 2]).cross(p.sub(lower[k - 1])) <= 0.0 {
                    lower.pop();
                } else {
                    break;
                }
            }
            lower.push(p);
        }
        let mut upper: Vec<Point> = Vec::new();
        for &p in pts.iter().rev() {
            while upper.len() >= 2 {
                let k = upper.len();
                if upper[k - 1].sub(upper[k - 2]).cross(p.sub(upper[k - 1])) <= 0.0 {
                    upper.pop();
                } else {
                    break;
                }
            }
            upper.push(p);
        }
        lower.pop();
        upper.pop();
        lower.extend(upper);
        TextPolygon { vertices: lower }
    }
}

fn closest_on_segment(p: Point, a: Point, b: Point) -> Point {
    let ab = b.sub(a);
    let len2 = ab.dot(ab);
    if len2 <= 0.0 {
        return a;
    }
    let t = (p.sub(a).dot(ab) / len2).clamp(0.0, 1.0);
    a.add(ab.scale(t))
}

fn segments_intersect(a: Point, b: Point, c: Point, d: Point) -> bool {
    let d1 = b.sub(a).cross(c.sub(a));
    let d2 = b.sub(a).cross(d.sub(a));
    let d3 = d.sub(c).cross(a.sub(c));
    let d4 = d.sub(c).cross(b.sub(c));
    if ((d1 > EPS && d2 < -EPS) || (d1 < -EPS && d2 > EPS))
        && ((d3 > EPS && d4 < -EPS) || (d3 < -EPS && d4 > EPS))
    {
        return true;
    }
    let on = |p: Point, q: Point, r: Point, z: f64| {
        z.abs() <= EPS
            && r.x >= p.x.min(q.x) - EPS
            && r.x <= p.x.max(q.x) + EPS
            && r.y >= p.y.min(q.y) - EPS
            && r.y <= p.y.max(q.y) + EPS
    };
    on(a, b, c, d1) || on(a, b, d, d2) || on(c, d, a, d3) || on(c, d, b, d4)
}

/// Offset distance `A (1 - r^2) / L` used for both the shrunk core and the
/// dilated outline.
pub fn compute_offset(poly: &TextPolygon, ratio: f64) -> Result<f64, GeometryError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(GeometryError::InvalidRatio(ratio));
    }
    let perimeter = poly.perimeter();
    if perimeter <= EPS {
        return Err(GeometryError::Degenerate);
    }
    Ok(poly.area() * (1.0 - ratio * ratio) / perimeter)
}

/// Offsets every edge along its outward normal: negative distances shrink,
/// positive distances dilate. Joins are mitred, and outer corners sharper
/// than the miter limit are cut square, so axis-aligned rectangles stay
/// exact rectangles.
pub fn offset_polygon(
    poly: &TextPolygon,
    signed_distance: f64,
) -> Result<TextPolygon, GeometryError> {
    if !signed_distance.is_finite() {
        return Err(GeometryError::NonFinite);
    }
    if signed_distance == 0.0 {
        return Ok(poly.clone());
    }
    if signed_distance < 0.0 && poly.is_convex() {
        return shrink_convex(poly, -signed_distance);
    }
    let out = offset_vertices(&poly.oriented(), signed_distance);
    finish(out, poly.signed_area() < 0.0)
}

fn finish(mut out: Vec<Point>, reverse: bool) -> Result<TextPolygon, GeometryError> {
    dedup_ring(&mut out);
    if out.len() < 3 {
        return Err(GeometryError::Vanished);
    }
    if reverse {
        out.reverse();
    }
    let candidate = TextPolygon { vertices: out };
    if candidate.area() <= EPS {
        return Err(GeometryError::Vanished);
    }
    if !candidate.is_simple() {
        return Err(GeometryError::OffsetFailed);
    }
    Ok(candidate)
}

fn dedup_ring(v: &mut Vec<Point>) {
    v.dedup_by(|a, b| a.distance(*b) <= 1e-9);
    while v.len() > 1 && v[0].distance(v[v.len() - 1]) <= 1e-9 {
        v.pop();
    }
}

fn outward_normal(a: Point, b: Point) -> Point {
    let d = b.sub(a).normalized();
    Point::new(d.y, -d.x)
}

/// Intersection of the half-planes behind each edge moved inward by `d`
/// (Sutherland-Hodgman against the original outline). Exact for convex input.
fn shrink_convex(poly: &TextPolygon, d: f64) -> Result<TextPolygon, GeometryError> {
    let ring = poly.oriented();
    let n = ring.len();
    let mut current = ring.clone();
    for i in 0..n {
        let a = ring[i];
        let b = ring[(i + 1) % n];
        let nrm = outward_normal(a, b);
        // keep n . (p - a) <= -d
        let side = |p: Point| nrm.dot(p.sub(a)) + d;
        let mut next = Vec::with_capacity(current.len() + 1);
        for j in 0..current.len() {
            let p = current[j];
            let q = current[(j + 1) % current.len()];
            let (sp, sq) = (side(p), side(q));
            if sp <= 0.0 {
                next.push(p);
            }
            if (sp < 0.0 && sq > 0.0) || (sp > 0.0 && sq < 0.0) {
                let t = sp / (sp - sq);
                next.push(p.add(q.sub(p).scale(t)));
            }
        }
        current = next;
        if current.len() < 3 {
            return Err(GeometryError::Vanished);
        }
    }
    finish(current, poly.signed_area() < 0.0)
}

fn offset_vertices(ring: &[Point], d: f64) -> Vec<Point> {
    let n = ring.len();
    let mut out = Vec::with_capacity(n * 2);
    for i in 0..n {
        let prev = ring[(i + n - 1) % n];
        let v = ring[i];
        let next = ring[(i + 1) % n];
        let n1 = outward_normal(prev, v);
        let n2 = outward_normal(v, next);
        let turn = v.sub(prev).cross(next.sub(v));
        let cos = n1.dot(n2).clamp(-1.0, 1.0);
        let outer_corner = turn * d > 0.0;
        if turn.abs() <= EPS && cos > 0.0 {
            // collinear: plain shift
            out.push(v.add(n1.scale(d)));
            continue;
        }
        let miter_factor = (2.0 / (1.0 + cos).max(1e-12)).sqrt();
        if outer_corner && miter_factor > MITER_LIMIT {
            let e1 = v.sub(prev).normalized();
            let e2 = next.sub(v).normalized();
            let bis = n1.add(n2).normalized().scale(d.signum());
            let ad = d.abs();
            // chamfer line: bis . (p - v) = |d|
            let s1 = ad * (1.0 - bis.dot(n1.scale(d.signum()))) / bis.dot(e1);
            let s2 = ad * (1.0 - bis.dot(n2.scale(d.signum()))) / bis.dot(e2);
            out.push(v.add(n1.scale(d)).add(e1.scale(s1)));
            out.push(v.add(n2.scale(d)).add(e2.scale(s2)));
        } else if 1.0 + cos < 1e-9 {
            out.push(v.add(n1.scale(d)));
            out.push(v.add(n2.scale(d)));
        } else {
            let m = n1.add(n2).scale(d / (1.0 + cos));
            out.push(v.add(m));
        }
    }
    out
}

/// Shrunk core and dilated outline of one text region.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetBands {
    pub inner: TextPolygon,
    pub outer: TextPolygon,
    pub offset: f64,
}

impl OffsetBands {
    /// Builds both bands at the shrink distance for `ratio`. A core that
    /// vanishes falls back to the original polygon; a dilation that fails on
    /// awkward concave input falls back to dilating the convex hull.
    pub fn new(poly: &TextPolygon, ratio: f64) -> Result<Self, GeometryError> {
        let offset = compute_offset(poly, ratio)?;
        let inner = offset_polygon(poly, -offset).unwrap_or_else(|_| poly.clone());
        let outer = match offset_polygon(poly, offset) {
            Ok(p) => p,
            Err(_) => offset_polygon(&poly.convex_hull(), offset)?,
        };
        Ok(Self {
            inner,
            outer,
            offset,
        })
    }

    /// Soft value at `p`: 1 inside the core, 0 outside the outline, and
    /// `1 - dist(p, core) / width` in between, where `width` is measured from
    /// the nearest core point through `p` to the outline.
    pub fn value_at(&self, p: Point) -> f64 {
        if self.inner.contains(p) {
            return 1.0;
        }
        if !self.outer.contains(p) {
            return 0.0;
        }
        let q = self.inner.nearest_boundary_point(p);
        let dist = q.distance(p);
        if dist <= EPS {
            return 1.0;
        }
        let dir = p.sub(q).scale(1.0 / dist);
        match ray_exit(&self.outer, q, dir, dist) {
            Some(width) if width > dist => (1.0 - dist / width).clamp(0.0, 1.0),
            _ => 0.0,
        }
    }
}

/// Smallest ray parameter `t >= min_t` at which `origin + t * dir` crosses
/// the outline.
fn ray_exit(poly: &TextPolygon, origin: Point, dir: Point, min_t: f64) -> Option<f64> {
    let mut best: Option<f64> = None;
    for (a, b) in poly.edges() {
        let e = b.sub(a);
        let denom = dir.cross(e);
        if denom.abs() <= 1e-15 {
            continue;
        }
        let w = a.sub(origin);
        let t = w.cross(e) / denom;
        let s = w.cross(dir) / denom;
        if (-1e-12..=1.0 + 1e-12).contains(&s) && t >= min_t - 1e-12 {
            best = Some(best.map_or(t, |bt: f64| bt.min(t)));
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum MaskMode {
    Hard,
    #[default]
    Soft,
}

impl std::str::FromStr for MaskMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "hard" => Ok(MaskMode::Hard),
            "soft" => Ok(MaskMode::Soft),
            other => Err(format!(
                "unknown mask mode {other:?} (expected hard or soft)"
            )),
        }
    }
}

/// Per-pixel erasure weights in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMask {
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl SoftMask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![0.0; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, values: Vec<f32>) -> Option<Self> {
        (values.len() == height * width && values.iter().all(|v| (0.0..=1.0).contains(v)))
            .then_some(Self {
                height,
                width,
                values,
            })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.values[y * self.width + x]
    }

    pub fn max(&self, other: &SoftMask) -> SoftMask {
        assert_eq!((self.height, self.width), (other.height, other.width));
        SoftMask {
            height: self.height,
            width: self.width,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a.max(*b))
                .collect(),
        }
    }

    pub fn to_image(&self) -> crate::image::Image {
        crate::image::Image::from_vec(self.height, self.width, 1, self.values.clone())
            .expect("mask buffer matches its shape")
    }

    pub fn from_image(img: &crate::image::Image) -> Option<Self> {
        if img.channels() != 1 {
            return None;
        }
        Self::from_vec(img.height(), img.width(), img.data().to_vec())
    }
}

/// Pixel centers sit at `(x + 0.5, y + 0.5)`.
#[inline]
pub fn pixel_center(y: usize, x: usize) -> Point {
    Point::new(x as f64 + 0.5, y as f64 + 0.5)
}

pub fn render_soft_mask(
    polys: &[TextPolygon],
    height: usize,
    width: usize,
    ratio: f64,
    mode: MaskMode,
) -> Result<SoftMask, GeometryError> {
    render_soft_mask_with(Exec::default(), polys, height, width, ratio, mode)
}

/// Rasterizes the mask; overlapping regions combine by pointwise maximum.
pub fn render_soft_mask_with(
    exec: Exec,
    polys: &[TextPolygon],
    height: usize,
    width: usize,
    ratio: f64,
    mode: MaskMode,
) -> Result<SoftMask, GeometryError> {
    enum Region {
        Hard(TextPolygon),
        Soft(OffsetBands),
    }
    let regions = polys
        .iter()
        .map(|p| {
            Ok(match mode {
                MaskMode::Hard => Region::Hard(p.clone()),
                MaskMode::Soft => Region::Soft(OffsetBands::new(p, ratio)?),
            })
        })
        .collect::<Result<Vec<_>, GeometryError>>()?;
    let boxes: Vec<_> = regions
        .iter()
        .map(|r| match r {
            Region::Hard(p) => p.bounding_box(),
            Region::Soft(b) => b.outer.bounding_box(),
        })
        .collect();

    let mut values = vec![0.0f32; height * width];
    if width == 0 {
        return Ok(SoftMask {
            height,
            width,
            values,
        });
    }
    exec.for_each_chunk(&mut values, width, |y, row| {
        let cy = y as f64 + 0.5;
        for (region, bb) in regions.iter().zip(&boxes) {
            if cy < bb.1 || cy > bb.3 {
                continue;
            }
            let x0 = (bb.0 - 0.5).floor().max(0.0) as usize;
            let x1 = ((bb.2 - 0.5).ceil().max(0.0) as usize).min(width - 1);
            for (x, slot) in row.iter_mut().enumerate().take(x1 + 1).skip(x0) {
                let p = pixel_center(y, x);
                let v = match region {
                    Region::Hard(poly) => {
                        if poly.contains(p) {
                            1.0
                        } else {
                            0.0
                        }
                    }
                    Region::Soft(bands) => bands.value_at(p),
                } as f32;
                if v > *slot {
                    *slot = v;
                }
            }
        }
    });
    Ok(SoftMask {
        height,
        width,
        values,
    })
}
