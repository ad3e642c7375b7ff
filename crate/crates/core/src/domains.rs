//! Planar polygons, the Koch snowflake prefractal family, and domain-sequence
//! convergence measurements.

use std::fmt::Write as _;
use std::ops::{Add, Mul, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point (or vector) in the plane.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn dot(self, other: Point) -> f64 {
        self.x * other.x + self.y * other.y
    }

    pub fn cross(self, other: Point) -> f64 {
        self.x * other.y - self.y * other.x
    }

    pub fn distance(self, other: Point) -> f64 {
        (self - other).norm()
    }

    fn robust(self) -> robust::Coord<f64> {
        robust::Coord {
            x: self.x,
            y: self.y,
        }
    }
}

impl Add for Point {
    type Output = Point;
    fn add(self, o: Point) -> Point {
        Point::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Point {
    type Output = Point;
    fn sub(self, o: Point) -> Point {
        Point::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Point {
    type Output = Point;
    fn mul(self, s: f64) -> Point {
        Point::new(self.x * s, self.y * s)
    }
}

/// Exact sign of the orientation of `(a, b, c)`: positive for a left turn.
pub(crate) fn orient(a: Point, b: Point, c: Point) -> f64 {
    robust::orient2d(a.robust(), b.robust(), c.robust())
}

/// Closed-segment intersection test with exact predicates.
pub(crate) fn segments_intersect(p1: Point, p2: Point, q1: Point, q2: Point) -> bool {
    let d1 = orient(q1, q2, p1);
    let d2 = orient(q1, q2, p2);
    let d3 = orient(p1, p2, q1);
    let d4 = orient(p1, p2, q2);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    (d1 == 0.0 && on_segment(q1, q2, p1))
        || (d2 == 0.0 && on_segment(q1, q2, p2))
        || (d3 == 0.0 && on_segment(p1, p2, q1))
        || (d4 == 0.0 && on_segment(p1, p2, q2))
}

/// Proper crossing: the open segments cross at a single interior point.
/// Touching, shared endpoints and collinear overlap do not count.
pub(crate) fn segments_cross(p1: Point, p2: Point, q1: Point, q2: Point) -> bool {
    let d1 = orient(q1, q2, p1);
    let d2 = orient(q1, q2, p2);
    let d3 = orient(p1, p2, q1);
    let d4 = orient(p1, p2, q2);
    ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
}

// assumes collinearity of a, b, p
fn on_segment(a: Point, b: Point, p: Point) -> bool {
    p.x >= a.x.min(b.x) && p.x <= a.x.max(b.x) && p.y >= a.y.min(b.y) && p.y <= a.y.max(b.y)
}

/// Euclidean distance from `p` to the closed segment `[a, b]`.
pub fn distance_to_segment(p: Point, a: Point, b: Point) -> f64 {
    let d = b - a;
    let len2 = d.dot(d);
    if len2 == 0.0 {
        return p.distance(a);
    }
    let t = ((p - a).dot(d) / len2).clamp(0.0, 1.0);
    p.distance(a + d * t)
}

/// Axis-aligned bounding box `(min, max)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundingBox {
    pub min: Point,
    pub max: Point,
}

impl BoundingBox {
    pub fn of(points: &[Point]) -> Self {
        let mut min = Point::new(f64::INFINITY, f64::INFINITY);
        let mut max = Point::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in points {
            min.x = min.x.min(p.x);
            min.y = min.y.min(p.y);
            max.x = max.x.max(p.x);
            max.y = max.y.max(p.y);
        }
        BoundingBox { min, max }
    }

    pub fn diagonal(&self) -> f64 {
        (self.max - self.min).norm()
    }

    pub fn contains(&self, p: Point, pad: f64) -> bool {
        p.x >= self.min.x - pad
            && p.x <= self.max.x + pad
            && p.y >= self.min.y - pad
            && p.y <= self.max.y + pad
    }

    pub fn overlaps(&self, other: &BoundingBox, pad: f64) -> bool {
        self.min.x <= other.max.x + pad
            && other.min.x <= self.max.x + pad
            && self.min.y <= other.max.y + pad
            && other.min.y <= self.max.y + pad
    }
}

/// A simple planar polygon with counter-clockwise vertex order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Point>", into = "Vec<Point>")]
pub struct Polygon {
    vertices: Vec<Point>,
    bbox: BoundingBox,
}

impl TryFrom<Vec<Point>> for Polygon {
    type Error = Error;

    fn try_from(v: Vec<Point>) -> Result<Self> {
        Polygon::new(v)
    }
}

impl From<Polygon> for Vec<Point> {
    fn from(p: Polygon) -> Self {
        p.vertices
    }
}

impl Polygon {
    /// Validates and wraps a CCW vertex list. The closing edge is implicit.
    pub fn new(vertices: Vec<Point>) -> Result<Self> {
        if vertices.len() < 3 {
            return Err(Error::Validation(format!(
                "polygon needs at least 3 vertices, got {}",
                vertices.len()
            )));
        }
        if let Some(p) = vertices
            .iter()
            .find(|p| !p.x.is_finite() || !p.y.is_finite())
        {
            return Err(Error::Validation(format!("non-finite vertex {p:?}")));
        }
        let poly = Polygon {
            bbox: BoundingBox::of(&vertices),
            vertices,
        };
        let area = poly.signed_area();
        if !(area > 0.0) {
            return Err(Error::Validation(format!(
                "polygon must be counter-clockwise with positive area (signed area {area:e})"
            )));
        }
        if let Some((i, j)) = poly.first_self_intersection() {
            return Err(Error::Validation(format!(
                "polygon is not simple: edges {i} and {j} intersect"
            )));
        }
        Ok(poly)
    }

    /// Like [`Polygon::new`] but reverses clockwise input.
    pub fn from_any_orientation(mut vertices: Vec<Point>) -> Result<Self> {
        if vertices.len() >= 3 && shoelace(&vertices) < 0.0 {
            vertices.reverse();
        }
        Polygon::new(vertices)
    }

    /// Axis-aligned rectangle `[x0, x1] × [y0, y1]`.
    pub fn rectangle(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        Polygon::new(vec![
            Point::new(x0, y0),
            Point::new(x1, y0),
            Point::new(x1, y1),
            Point::new(x0, y1),
        ])
    }

    pub fn unit_square() -> Self {
        Polygon::rectangle(0.0, 0.0, 1.0, 1.0).expect("unit square is valid")
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn bbox(&self) -> BoundingBox {
        self.bbox
    }

    /// Iterator over directed edges `(v_i, v_{i+1})`, closing edge included.
    pub fn edges(&self) -> impl Iterator<Item = (Point, Point)> + '_ {
        let n = self.vertices.len();
        (0..n).map(move |i| (self.vertices[i], self.vertices[(i + 1) % n]))
    }

    pub fn signed_area(&self) -> f64 {
        shoelace(&self.vertices)
    }

    /// Largest vertex-to-vertex distance.
    pub fn diameter(&self) -> f64 {
        let hull = convex_hull(&self.vertices);
        let mut d: f64 = 0.0;
        for (i, a) in hull.iter().enumerate() {
            for b in &hull[i + 1..] {
                d = d.max(a.distance(*b));
            }
        }
        d
    }

    /// Membership tolerance used by the containment predicates.
    pub fn epsilon(&self) -> f64 {
        1e-12 * self.bbox.diagonal()
    }

    /// Point-in-polygon test; points within `epsilon()` of an edge count as inside.
    pub fn contains_point(&self, p: Point) -> bool {
        let eps = self.epsilon();
        if !self.bbox.contains(p, eps) {
            return false;
        }
        let mut inside = false;
        for (a, b) in self.edges() {
            if distance_to_segment(p, a, b) <= eps {
                return true;
            }
            if (a.y > p.y) != (b.y > p.y) {
                let s = orient(a, b, p);
                // upward edge with p on its left, or downward edge with p on its right
                if (b.y > a.y && s > 0.0) || (b.y < a.y && s < 0.0) {
                    inside = !inside;
                }
            }
        }
        inside
    }

    /// Minimum distance from `p` to the polygon boundary.
    pub fn boundary_distance(&self, p: Point) -> f64 {
        self.edges()
            .map(|(a, b)| distance_to_segment(p, a, b))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn centroid(&self) -> Point {
        let a = self.signed_area();
        let o = self.vertices[0];
        let (mut cx, mut cy) = (0.0, 0.0);
        for (p, q) in self.edges() {
            let (p, q) = (p - o, q - o);
            let c = p.cross(q);
            cx += (p.x + q.x) * c;
            cy += (p.y + q.y) * c;
        }
        Point::new(o.x + cx / (6.0 * a), o.y + cy / (6.0 * a))
    }

    /// Uniform scaling about `center`.
    pub fn scaled(&self, center: Point, factor: f64) -> Result<Polygon> {
        Polygon::new(
            self.vertices
                .iter()
                .map(|&p| center + (p - center) * factor)
                .collect(),
        )
    }

    pub fn translated(&self, offset: Point) -> Polygon {
        let vertices: Vec<Point> = self.vertices.iter().map(|&p| p + offset).collect();
        Polygon {
            bbox: BoundingBox::of(&vertices),
            vertices,
        }
    }

    fn first_self_intersection(&self) -> Option<(usize, usize)> {
        let n = self.vertices.len();
        let edge = |i: usize| (self.vertices[i], self.vertices[(i + 1) % n]);
        for i in 0..n {
            let (a, b) = edge(i);
            if a == b {
                return Some((i, i));
            }
            // consecutive edges may only share their common vertex
            let (_, c) = edge((i + 1) % n);
            if orient(a, b, c) == 0.0 && (c - b).dot(a - b) > 0.0 {
                return Some((i, (i + 1) % n));
            }
        }
        if n == 3 {
            return None;
        }
        let grid = SegmentGrid::new(self.edges().collect(), self.bbox);
        grid.find_pair(|i, j| {
            let adjacent = j == i + 1 || (i == 0 && j == n - 1);
            if adjacent {
                return false;
            }
            let (p1, p2) = edge(i);
            let (q1, q2) = edge(j);
            segments_intersect(p1, p2, q1, q2)
        })
    }
}

fn shoelace(v: &[Point]) -> f64 {
    // relative to the first vertex to limit cancellation
    let o = v[0];
    let n = v.len();
    let mut s = 0.0;
    for i in 1..n - 1 {
        s += (v[i] - o).cross(v[i + 1] - o);
    }
    0.5 * s
}

fn convex_hull(points: &[Point]) -> Vec<Point> {
    let mut pts: Vec<Point> = points.to_vec();
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut lower: Vec<Point> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && orient(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<Point> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && orient(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

/// Uniform bucket grid over a set of segments, for pairwise tests.
struct SegmentGrid {
    cells: Vec<Vec<usize>>,
}

impl SegmentGrid {
    fn new(segments: Vec<(Point, Point)>, bbox: BoundingBox) -> Self {
        let n = segments.len();
        let side = ((n as f64).sqrt().ceil() as usize).clamp(1, 1024);
        let w = (bbox.max.x - bbox.min.x).max(f64::MIN_POSITIVE);
        let h = (bbox.max.y - bbox.min.y).max(f64::MIN_POSITIVE);
        let cell = |x: f64, y: f64| {
            let i = (((x - bbox.min.x) / w) * side as f64)
                .floor()
                .clamp(0.0, (side - 1) as f64) as usize;
            let j = (((y - bbox.min.y) / h) * side as f64)
                .floor()
                .clamp(0.0, (side - 1) as f64) as usize;
            (i, j)
        };
        let mut cells = vec![Vec::new(); side * side];
        for (k, (a, b)) in segments.iter().enumerate() {
            let (i0, j0) = cell(a.x.min(b.x), a.y.min(b.y));
            let (i1, j1) = cell(a.x.max(b.x), a.y.max(b.y));
            for i in i0..=i1 {
                for j in j0..=j1 {
                    cells[j * side + i].push(k);
                }
            }
        }
        SegmentGrid { cells }
    }

    fn find_pair(&self, mut hit: impl FnMut(usize, usize) -> bool) -> Option<(usize, usize)> {
        for bucket in &self.cells {
            for (a, &i) in bucket.iter().enumerate() {
                for &j in &bucket[a + 1..] {
                    let (i, j) = if i < j { (i, j) } else { (j, i) };
                    if hit(i, j) {
                        return Some((i, j));
                    }
                }
            }
        }
        None
    }
}

/// Shoelace area of a valid polygon.
pub fn polygon_area(p: &Polygon) -> f64 {
    p.signed_area()
}

/// `true` iff every vertex and edge midpoint of `inner` lies in `outer` and no
/// pair of edges crosses properly.
pub fn contains_polygon(outer: &Polygon, inner: &Polygon) -> bool {
    let pad = outer.epsilon();
    if !inner.bbox.overlaps(&outer.bbox, pad) {
        return false;
    }
    let probes_inside = inner
        .edges()
        .all(|(a, b)| outer.contains_point(a) && outer.contains_point((a + b) * 0.5));
    if !probes_inside {
        return false;
    }
    let grid_box = BoundingBox {
        min: Point::new(
            outer.bbox.min.x.min(inner.bbox.min.x),
            outer.bbox.min.y.min(inner.bbox.min.y),
        ),
        max: Point::new(
            outer.bbox.max.x.max(inner.bbox.max.x),
            outer.bbox.max.y.max(inner.bbox.max.y),
        ),
    };
    let n_outer = outer.len();
    let segments: Vec<(Point, Point)> = outer.edges().chain(inner.edges()).collect();
    let grid = SegmentGrid::new(segments.clone(), grid_box);
    grid.find_pair(|i, j| {
        // only outer-vs-inner pairs
        if (i < n_outer) == (j < n_outer) {
            return false;
        }
        let (p1, p2) = segments[i];
        let (q1, q2) = segments[j];
        // touching within the epsilon band is not a crossing
        segments_cross(p1, p2, q1, q2)
            && distance_to_segment(p1, q1, q2) > pad
            && distance_to_segment(p2, q1, q2) > pad
            && distance_to_segment(q1, p1, p2) > pad
            && distance_to_segment(q2, p1, p2) > pad
    })
    .is_none()
}

/// Area of the symmetric difference of two nested polygons.
pub fn symmetric_difference_area(a: &Polygon, b: &Polygon) -> Result<f64> {
    if a == b {
        return Ok(0.0);
    }
    if !(contains_polygon(a, b) || contains_polygon(b, a)) {
        return Err(Error::Unsupported(
            "symmetric difference is only implemented for nested polygons".into(),
        ));
    }
    Ok((polygon_area(a) - polygon_area(b)).abs())
}

/// Largest supported prefractal level: 3·4^10 ≈ 3.1M vertices.
pub const MAX_KOCH_LEVEL: u32 = 10;

/// Generator of one member of the Koch snowflake family.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrefractalSpec {
    pub base_side: f64,
    pub level: u32,
    pub center: Point,
}

impl PrefractalSpec {
    pub fn new(base_side: f64, level: u32, center: Point) -> Self {
        PrefractalSpec {
            base_side,
            level,
            center,
        }
    }

    pub fn unit(level: u32) -> Self {
        PrefractalSpec::new(1.0, level, Point::new(0.0, 0.0))
    }

    pub fn with_level(self, level: u32) -> Self {
        PrefractalSpec { level, ..self }
    }

    fn validate(&self, max_level: u32) -> Result<()> {
        if !(self.base_side > 0.0 && self.base_side.is_finite()) {
            return Err(Error::Validation(format!(
                "base_side must be positive, got {}",
                self.base_side
            )));
        }
        if !(self.center.x.is_finite() && self.center.y.is_finite()) {
            return Err(Error::Validation("center must be finite".into()));
        }
        if self.level > max_level {
            return Err(Error::Resource(format!(
                "Koch level {} exceeds the configured maximum {max_level} ({} vertices)",
                self.level,
                3u128 * 4u128.pow(self.level)
            )));
        }
        Ok(())
    }

    /// Area of the level-0 triangle, `√3/4·s²`.
    pub fn base_area(&self) -> f64 {
        3f64.sqrt() / 4.0 * self.base_side * self.base_side
    }

    /// Closed-form area of this level: `A₀(1 + ⅓Σ_{k<m}(4/9)^k)`.
    pub fn recurrence_area(&self) -> f64 {
        let a0 = self.base_area();
        let sum: f64 = (0..self.level).map(|k| (4.0f64 / 9.0).powi(k as i32)).sum();
        a0 * (1.0 + sum / 3.0)
    }
}

/// Base triangle of the snowflake, CCW, centroid at `spec.center`.
fn base_triangle(spec: &PrefractalSpec) -> Vec<Point> {
    let r = spec.base_side / 3f64.sqrt();
    [90.0f64, 210.0, 330.0]
        .iter()
        .map(|deg| {
            let t = deg.to_radians();
            Point::new(spec.center.x + r * t.cos(), spec.center.y + r * t.sin())
        })
        .collect()
}

/// Koch generator on one directed edge: the two third-points and the outward apex.
fn koch_edge(a: Point, b: Point) -> (Point, Point, Point) {
    let d = b - a;
    let p1 = Point::new(a.x + d.x / 3.0, a.y + d.y / 3.0);
    let p2 = Point::new(a.x + 2.0 * d.x / 3.0, a.y + 2.0 * d.y / 3.0);
    // right-hand normal points outward for CCW polygons
    let k = 3f64.sqrt() / 6.0;
    let apex = Point::new(a.x + 0.5 * d.x + k * d.y, a.y + 0.5 * d.y - k * d.x);
    (p1, apex, p2)
}

fn koch_refine(vertices: &[Point], chords: Option<&mut Vec<(Point, Point)>>) -> Vec<Point> {
    let n = vertices.len();
    let mut out = Vec::with_capacity(4 * n);
    let mut chords = chords;
    for i in 0..n {
        let a = vertices[i];
        let b = vertices[(i + 1) % n];
        let (p1, apex, p2) = koch_edge(a, b);
        out.extend_from_slice(&[a, p1, apex, p2]);
        if let Some(c) = chords.as_deref_mut() {
            c.push((p1, p2));
        }
    }
    out
}

/// Level-`m` Koch snowflake: `3·4^m` vertices, generator pointing outward, CCW.
pub fn koch_prefractal(spec: &PrefractalSpec) -> Result<Polygon> {
    koch_prefractal_with_max(spec, MAX_KOCH_LEVEL)
}

/// [`koch_prefractal`] with an explicit level bound.
pub fn koch_prefractal_with_max(spec: &PrefractalSpec, max_level: u32) -> Result<Polygon> {
    spec.validate(max_level)?;
    let mut v = base_triangle(spec);
    for _ in 0..spec.level {
        v = koch_refine(&v, None);
    }
    Polygon::new(v)
}

/// Levels `0..=spec.level` of one snowflake family. Vertices shared between
/// levels are bit-identical, so the family is exactly nested.
pub fn koch_family(spec: &PrefractalSpec) -> Result<KochFamily> {
    spec.validate(MAX_KOCH_LEVEL)?;
    let mut v = base_triangle(spec);
    let mut levels = vec![Polygon::new(v.clone())?];
    let mut chords = Vec::new();
    for _ in 0..spec.level {
        v = koch_refine(&v, Some(&mut chords));
        levels.push(Polygon::new(v.clone())?);
    }
    Ok(KochFamily { levels, chords })
}

/// All levels of a snowflake plus the chords closing every generator.
#[derive(Clone, Debug)]
pub struct KochFamily {
    pub levels: Vec<Polygon>,
    /// Middle-third segment of every edge of levels `0..m`. Together with the
    /// edges of the finest level they contain the boundary of every level.
    pub chords: Vec<(Point, Point)>,
}

impl KochFamily {
    /// Segments whose union covers the boundary of every level.
    pub fn conforming_segments(&self) -> Vec<(Point, Point)> {
        let finest = self.levels.last().expect("family is never empty");
        finest.edges().chain(self.chords.iter().copied()).collect()
    }
}

/// NTA constants `(M, r₀)` of a domain family, carried as metadata only.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NtaConstants {
    pub m_nta: f64,
    pub r0: f64,
}

/// Domains `Ω₁ … Ω_M`, a proxy for the limit Ω, and an ambient box Ω*.
#[derive(Clone, Debug)]
pub struct DomainSequence {
    pub members: Vec<Polygon>,
    /// Level index (or any label) of each member, used in reports.
    pub labels: Vec<u32>,
    pub limit_proxy: Polygon,
    pub limit_label: u32,
    pub ambient: Polygon,
    pub nta_constants: Option<NtaConstants>,
    /// Segments covering all member boundaries; when present, a single
    /// triangulation conforming to every member can be built.
    pub conforming_segments: Option<Vec<(Point, Point)>>,
    nested: bool,
}

impl DomainSequence {
    pub fn new(members: Vec<Polygon>, limit_proxy: Polygon, ambient: Polygon) -> Result<Self> {
        let labels = (0..members.len() as u32).collect();
        let limit_label = members.len() as u32;
        DomainSequence::build(
            members,
            labels,
            limit_proxy,
            limit_label,
            ambient,
            None,
            None,
        )
    }

    fn build(
        members: Vec<Polygon>,
        labels: Vec<u32>,
        limit_proxy: Polygon,
        limit_label: u32,
        ambient: Polygon,
        nta_constants: Option<NtaConstants>,
        conforming_segments: Option<Vec<(Point, Point)>>,
    ) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::Validation(
                "domain sequence needs at least one member".into(),
            ));
        }
        for (i, m) in members
            .iter()
            .chain(std::iter::once(&limit_proxy))
            .enumerate()
        {
            if !contains_polygon(&ambient, m) || ambient.boundary_distance(m.vertices()[0]) == 0.0 {
                return Err(Error::Domain(format!(
                    "member {i} is not inside the ambient domain"
                )));
            }
        }
        for m in members.iter().chain(std::iter::once(&limit_proxy)) {
            let strict = m
                .vertices()
                .iter()
                .all(|&p| ambient.boundary_distance(p) > ambient.epsilon());
            if !strict {
                return Err(Error::Domain(
                    "members must lie strictly inside the ambient domain".into(),
                ));
            }
        }
        let nested = members.windows(2).all(|w| contains_polygon(&w[1], &w[0]))
            && contains_polygon(&limit_proxy, members.last().unwrap());
        Ok(DomainSequence {
            members,
            labels,
            limit_proxy,
            limit_label,
            ambient,
            nta_constants,
            conforming_segments,
            nested,
        })
    }

    /// Koch levels `levels` with the level `limit_level` snowflake as limit proxy
    /// and an ambient box `margin` away from the proxy's bounding box.
    pub fn koch(
        base: PrefractalSpec,
        levels: std::ops::RangeInclusive<u32>,
        limit_level: u32,
        margin: f64,
        nta: Option<NtaConstants>,
    ) -> Result<Self> {
        if *levels.end() > limit_level || levels.is_empty() {
            return Err(Error::Argument(
                "member levels must be non-empty and not exceed the limit level".into(),
            ));
        }
        if !(margin > 0.0) {
            return Err(Error::Argument("ambient margin must be positive".into()));
        }
        let family = koch_family(&base.with_level(limit_level))?;
        let members: Vec<Polygon> = levels
            .clone()
            .map(|m| family.levels[m as usize].clone())
            .collect();
        let labels = levels.collect();
        let limit_proxy = family.levels[limit_level as usize].clone();
        let bb = limit_proxy.bbox();
        let ambient = Polygon::rectangle(
            bb.min.x - margin,
            bb.min.y - margin,
            bb.max.x + margin,
            bb.max.y + margin,
        )?;
        let segments = family.conforming_segments();
        DomainSequence::build(
            members,
            labels,
            limit_proxy,
            limit_level,
            ambient,
            nta,
            Some(segments),
        )
    }

    /// `true` if `Ω_m ⊆ Ω_{m+1}` for all members and the last member is inside the proxy.
    pub fn is_nested(&self) -> bool {
        self.nested
    }
}

/// Convergence measurements for a [`DomainSequence`].
#[derive(Clone, Debug, Serialize)]
pub struct ConvergenceReport {
    pub labels: Vec<u32>,
    /// `λ(Ω_m Δ Ω)` for each member.
    pub symmetric_difference: Vec<f64>,
    pub strictly_decreasing: bool,
    /// For each probe `K`, the first member index from which all later members contain `K`.
    pub first_containing: Vec<Option<usize>>,
}

pub fn sequence_convergence_report(
    seq: &DomainSequence,
    probes: &[Polygon],
) -> Result<ConvergenceReport> {
    let symmetric_difference = seq
        .members
        .iter()
        .map(|m| symmetric_difference_area(m, &seq.limit_proxy))
        .collect::<Result<Vec<_>>>()?;
    let strictly_decreasing = symmetric_difference.windows(2).all(|w| w[1] < w[0]);
    let first_containing = probes
        .iter()
        .map(|k| {
            let inside: Vec<bool> = seq.members.iter().map(|m| contains_polygon(m, k)).collect();
            // first index after which every member contains K
            let mut first = None;
            for i in (0..inside.len()).rev() {
                if inside[i] {
                    first = Some(i);
                } else {
                    break;
                }
            }
            first
        })
        .collect();
    Ok(ConvergenceReport {
        labels: seq.labels.clone(),
        symmetric_difference,
        strictly_decreasing,
        first_containing,
    })
}

/// Plain-text form: one `x y` line per vertex, CCW, shortest round-trip decimals.
pub fn write_polygon(p: &Polygon) -> String {
    let mut s = String::with_capacity(p.len() * 40);
    for v in p.vertices() {
        writeln!(s, "{} {}", v.x, v.y).unwrap();
    }
    s
}

pub fn read_polygon(text: &str) -> Result<Polygon> {
    let mut vertices = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let mut next = || -> Result<f64> {
            it.next()
                .ok_or_else(|| Error::Parse(format!("line {}: expected two numbers", n + 1)))?
                .parse::<f64>()
                .map_err(|e| Error::Parse(format!("line {}: {e}", n + 1)))
        };
        let x = next()?;
        let y = next()?;
        vertices.push(Point::new(x, y));
    }
    Polygon::new(vertices)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SQRT3: f64 = 1.7320508075688772;

    fn recurrence(a0: f64, m: u32) -> f64 {
        // independent restatement: A_{m+1} = A_m + 3·4^m·(A₀/9^{m+1})
        let mut area = a0;
        for k in 0..m {
            let triangles = 3.0 * 4f64.powi(k as i32);
            area += triangles * a0 / 9f64.powi(k as i32 + 1);
        }
        area
    }

    #[test]
    fn level_zero_is_equilateral_triangle() {
        let p = koch_prefractal(&PrefractalSpec::unit(0)).unwrap();
        assert_eq!(p.len(), 3);
        for (a, b) in p.edges() {
            assert!((a.distance(b) - 1.0).abs() < 1e-15);
        }
        assert!((polygon_area(&p) - SQRT3 / 4.0).abs() < 1e-15);
    }

    #[test]
    fn vertex_count_follows_subdivision() {
        for m in 0..=5 {
            let p = koch_prefractal(&PrefractalSpec::unit(m)).unwrap();
            assert_eq!(p.len(), 3 * 4usize.pow(m));
        }
        assert_eq!(
            koch_prefractal(&PrefractalSpec::unit(3)).unwrap().len(),
            192
        );
    }

    #[test]
    fn level_two_area() {
        let p = koch_prefractal(&PrefractalSpec::unit(2)).unwrap();
        let expected = SQRT3 / 4.0 * (1.0 + 1.0 / 3.0 + 4.0 / 27.0);
        assert!((polygon_area(&p) - expected).abs() < 1e-13);
        assert!((polygon_area(&p) - 0.641500299099584).abs() < 1e-12);
        assert!((polygon_area(&p) - recurrence(SQRT3 / 4.0, 2)).abs() < 1e-13);
    }

    #[test]
    fn simple_areas() {
        assert_eq!(polygon_area(&Polygon::unit_square()), 1.0);
        let t = koch_prefractal(&PrefractalSpec::unit(0)).unwrap();
        assert!((polygon_area(&t) - 0.4330127018922193).abs() < 1e-15);
        let s1 = koch_prefractal(&PrefractalSpec::unit(1)).unwrap();
        assert!((polygon_area(&s1) - 0.5773502691896257).abs() < 1e-14);
    }

    #[test]
    fn rejects_degenerate_polygons() {
        let line = vec![
            Point::new(0.0, 0.0),
            Point::new(1.0, 0.0),
            Point::new(2.0, 0.0),
        ];
        assert!(matches!(Polygon::new(line), Err(Error::Validation(_))));
        let cw = vec![
            Point::new(0.0, 0.0),
            Point::new(0.0, 1.0),
            Point::new(1.0, 0.0),
        ];
        assert!(Polygon::new(cw.clone()).is_err());
        assert!(Polygon::from_any_orientation(cw).is_ok());
        let bowtie = vec![
            Point::new(0.0, 0.0),
            Point::new(1.0, 1.0),
            Point::new(1.0, 0.0),
            Point::new(0.0, 1.0),
        ];
        assert!(Polygon::new(bowtie).is_err());
        assert!(Polygon::new(vec![Point::new(0.0, 0.0), Point::new(1.0, 0.0)]).is_err());
    }

    #[test]
    fn koch_levels_are_simple_and_ccw() {
        // Polygon::new runs the intersection sweep
        for m in 0..=6 {
            let p = koch_prefractal(&PrefractalSpec::new(2.5, m, Point::new(0.3, -1.0))).unwrap();
            assert!(p.signed_area() > 0.0);
        }
    }

    #[test]
    fn level_limit_is_a_resource_error() {
        let err = koch_prefractal_with_max(&PrefractalSpec::unit(5), 4).unwrap_err();
        assert!(matches!(err, Error::Resource(_)));
        assert!(koch_prefractal(&PrefractalSpec::new(-1.0, 1, Point::new(0.0, 0.0))).is_err());
    }

    #[test]
    fn symmetric_difference_examples() {
        let a = koch_prefractal(&PrefractalSpec::unit(1)).unwrap();
        assert_eq!(symmetric_difference_area(&a, &a).unwrap(), 0.0);
        let t = koch_prefractal(&PrefractalSpec::unit(0)).unwrap();
        let d = symmetric_difference_area(&t, &a).unwrap();
        assert!((d - 0.14433756729740643).abs() < 1e-14, "{d}");

        let a0 = SQRT3 / 4.0;
        let fam = koch_family(&PrefractalSpec::unit(5)).unwrap();
        for m in 0..5u32 {
            let expected: f64 =
                a0 / 3.0 * (m..5).map(|k| (4.0f64 / 9.0).powi(k as i32)).sum::<f64>();
            let got = symmetric_difference_area(&fam.levels[m as usize], &fam.levels[5]).unwrap();
            assert!((got - expected).abs() < 1e-12, "m={m}: {got} vs {expected}");
        }
    }

    #[test]
    fn non_nested_difference_is_unsupported() {
        let a = Polygon::unit_square();
        let b = a.translated(Point::new(0.5, 0.5));
        assert!(matches!(
            symmetric_difference_area(&a, &b),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn containment_examples() {
        let sq = Polygon::unit_square();
        let shrunk = sq.scaled(Point::new(0.5, 0.5), 0.9).unwrap();
        assert!(contains_polygon(&sq, &shrunk));
        assert!(!contains_polygon(&shrunk, &sq));
        let far = sq.translated(Point::new(3.0, 0.0));
        assert!(!contains_polygon(&sq, &far));

        let t = koch_prefractal(&PrefractalSpec::unit(0)).unwrap();
        let s3 = koch_prefractal(&PrefractalSpec::unit(3)).unwrap();
        assert!(contains_polygon(&s3, &t));
        // oracle: every vertex inside by the point test alone
        assert!(t.vertices().iter().all(|&v| s3.contains_point(v)));
        assert!(!contains_polygon(&t, &s3));
    }

    #[test]
    fn koch_family_is_nested_and_area_monotone() {
        let fam = koch_family(&PrefractalSpec::unit(5)).unwrap();
        let a0 = SQRT3 / 4.0;
        let limit = a0 * 8.0 / 5.0;
        for m in 0..5 {
            assert!(
                contains_polygon(&fam.levels[m + 1], &fam.levels[m]),
                "level {m}"
            );
            let (am, an) = (
                polygon_area(&fam.levels[m]),
                polygon_area(&fam.levels[m + 1]),
            );
            assert!(an > am);
            let deficit = a0 / 3.0 * (4.0f64 / 9.0).powi(m as i32) / (1.0 - 4.0 / 9.0);
            assert!(((limit - am) - deficit).abs() < 1e-12);
        }
        // the family and the stand-alone generator agree bit for bit
        let lone = koch_prefractal(&PrefractalSpec::unit(4)).unwrap();
        assert_eq!(lone.vertices(), fam.levels[4].vertices());
    }

    #[test]
    fn conforming_segments_cover_every_level() {
        let fam = koch_family(&PrefractalSpec::unit(3)).unwrap();
        let segs = fam.conforming_segments();
        for level in &fam.levels {
            for (a, b) in level.edges() {
                // every edge is a union of segments lying on it
                let on: f64 = segs
                    .iter()
                    .filter(|(p, q)| {
                        distance_to_segment(*p, a, b) < 1e-12
                            && distance_to_segment(*q, a, b) < 1e-12
                    })
                    .map(|(p, q)| p.distance(*q))
                    .sum();
                assert!((on - a.distance(b)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn convergence_report_for_koch_family() {
        let seq = DomainSequence::koch(PrefractalSpec::unit(0), 0..=4, 5, 0.1, None).unwrap();
        assert!(seq.is_nested());
        let probe = koch_prefractal(&PrefractalSpec::unit(0)).unwrap();
        let report = sequence_convergence_report(&seq, &[probe]).unwrap();
        assert!(report.strictly_decreasing);
        assert_eq!(report.first_containing, vec![Some(0)]);
        let a0 = SQRT3 / 4.0;
        let bound = (4.0f64 / 9.0).powi(4) * (a0 / 3.0) / (1.0 - 4.0 / 9.0);
        assert!(*report.symmetric_difference.last().unwrap() <= bound);
    }

    #[test]
    fn single_member_equal_to_proxy() {
        let p = koch_prefractal(&PrefractalSpec::unit(2)).unwrap();
        let amb = Polygon::rectangle(-1.0, -1.0, 1.0, 1.0).unwrap();
        let seq = DomainSequence::new(vec![p.clone()], p, amb).unwrap();
        let report = sequence_convergence_report(&seq, &[]).unwrap();
        assert_eq!(report.symmetric_difference, vec![0.0]);
    }

    #[test]
    fn members_outside_ambient_are_rejected() {
        let p = koch_prefractal(&PrefractalSpec::unit(2)).unwrap();
        let tiny = Polygon::rectangle(-0.1, -0.1, 0.1, 0.1).unwrap();
        assert!(matches!(
            DomainSequence::new(vec![p.clone()], p, tiny),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn polygon_text_round_trip() {
        let p = koch_prefractal(&PrefractalSpec::new(1.3, 3, Point::new(0.1, 0.7))).unwrap();
        let text = write_polygon(&p);
        let q = read_polygon(&text).unwrap();
        assert_eq!(p.vertices(), q.vertices());
        assert_eq!(write_polygon(&q), text);
        assert!(read_polygon("0 0\n1 x\n").is_err());
    }
}
