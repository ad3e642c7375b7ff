//! Conforming triangulations of polygons for P1 elements.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::OnceLock;

use spade::{
    AngleLimit, ConstrainedDelaunayTriangulation, Point2, RefinementParameters, Triangulation,
};

use crate::domains::{orient, BoundingBox, Point, Polygon};
use crate::error::{Error, Result};

/// Minimum interior angle every produced mesh must satisfy, in degrees.
pub const MIN_ANGLE_DEG: f64 = 20.0;

const REFINE_ANGLE_DEG: f64 = 25.0;

/// A conforming triangulation with Dirichlet boundary flags.
#[derive(Debug)]
pub struct Mesh {
    vertices: Vec<Point>,
    triangles: Vec<[usize; 3]>,
    boundary: Vec<bool>,
    h: f64,
    locator: OnceLock<Locator>,
}

impl Clone for Mesh {
    fn clone(&self) -> Self {
        Mesh {
            vertices: self.vertices.clone(),
            triangles: self.triangles.clone(),
            boundary: self.boundary.clone(),
            h: self.h,
            locator: OnceLock::new(),
        }
    }
}

impl PartialEq for Mesh {
    fn eq(&self, other: &Self) -> bool {
        self.vertices == other.vertices
            && self.triangles == other.triangles
            && self.boundary == other.boundary
    }
}

impl Mesh {
    /// Validates a triangulation. Boundary flags must mark exactly the vertices
    /// on edges that belong to a single triangle.
    pub fn new(
        vertices: Vec<Point>,
        triangles: Vec<[usize; 3]>,
        boundary: Vec<bool>,
    ) -> Result<Self> {
        if boundary.len() != vertices.len() {
            return Err(Error::Validation(
                "one boundary flag per vertex is required".into(),
            ));
        }
        let topo = Mesh::from_topology(vertices, triangles)?;
        if topo.boundary != boundary {
            let i = topo
                .boundary
                .iter()
                .zip(&boundary)
                .position(|(a, b)| a != b)
                .unwrap();
            return Err(Error::Validation(format!(
                "boundary flag of vertex {i} disagrees with the mesh topology"
            )));
        }
        Ok(topo)
    }

    /// Validates a triangulation and derives boundary flags from its topology.
    pub fn from_topology(vertices: Vec<Point>, triangles: Vec<[usize; 3]>) -> Result<Self> {
        if triangles.is_empty() {
            return Err(Error::Validation("mesh has no triangles".into()));
        }
        let nv = vertices.len();
        if let Some(t) = triangles.iter().find(|t| t.iter().any(|&i| i >= nv)) {
            return Err(Error::Validation(format!(
                "triangle {t:?} references a missing vertex"
            )));
        }
        let mut h: f64 = 0.0;
        for t in &triangles {
            for k in 0..3 {
                h = h.max(vertices[t[k]].distance(vertices[t[(k + 1) % 3]]));
            }
        }
        for (i, t) in triangles.iter().enumerate() {
            let [a, b, c] = t.map(|k| vertices[k]);
            let area = 0.5 * (b - a).cross(c - a);
            if orient(a, b, c) <= 0.0 || area <= 1e-10 * h * h {
                return Err(Error::Validation(format!(
                    "triangle {i} is inverted or degenerate (area {area:e})"
                )));
            }
        }
        let mut directed: HashMap<(usize, usize), usize> =
            HashMap::with_capacity(3 * triangles.len());
        for (i, t) in triangles.iter().enumerate() {
            for k in 0..3 {
                if directed.insert((t[k], t[(k + 1) % 3]), i).is_some() {
                    return Err(Error::Validation(format!(
                        "edge ({}, {}) is used twice with the same orientation",
                        t[k],
                        t[(k + 1) % 3]
                    )));
                }
            }
        }
        let mut boundary = vec![false; nv];
        for &(a, b) in directed.keys() {
            if !directed.contains_key(&(b, a)) {
                boundary[a] = true;
                boundary[b] = true;
            }
        }
        let mut used = vec![false; nv];
        triangles.iter().flatten().for_each(|&i| used[i] = true);
        if let Some(i) = used.iter().position(|u| !u) {
            return Err(Error::Validation(format!(
                "vertex {i} belongs to no triangle"
            )));
        }
        Ok(Mesh {
            vertices,
            triangles,
            boundary,
            h,
            locator: OnceLock::new(),
        })
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn boundary_flags(&self) -> &[bool] {
        &self.boundary
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_triangles(&self) -> usize {
        self.triangles.len()
    }

    /// Maximum edge length.
    pub fn h(&self) -> f64 {
        self.h
    }

    /// Indices of vertices not on the boundary, increasing.
    pub fn interior_indices(&self) -> Vec<usize> {
        (0..self.vertices.len())
            .filter(|&i| !self.boundary[i])
            .collect()
    }

    pub fn triangle_points(&self, t: usize) -> [Point; 3] {
        self.triangles[t].map(|i| self.vertices[i])
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangle_points(t);
        0.5 * (b - a).cross(c - a)
    }

    pub fn total_area(&self) -> f64 {
        (0..self.triangles.len())
            .map(|t| self.triangle_area(t))
            .sum()
    }

    /// Undirected edges `(min, max)` sorted, with their triangle multiplicity.
    pub fn edges(&self) -> Vec<((usize, usize), u8)> {
        let mut map: HashMap<(usize, usize), u8> = HashMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                *map.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        let mut edges: Vec<_> = map.into_iter().collect();
        edges.sort_unstable();
        edges
    }

    /// Edges belonging to exactly one triangle.
    pub fn boundary_edges(&self) -> Vec<(usize, usize)> {
        self.edges()
            .into_iter()
            .filter(|&(_, m)| m == 1)
            .map(|(e, _)| e)
            .collect()
    }

    /// Smallest interior angle over all triangles, in degrees.
    pub fn min_angle_deg(&self) -> f64 {
        (0..self.triangles.len())
            .map(|t| triangle_min_angle(self.triangle_points(t)))
            .fold(f64::INFINITY, f64::min)
            .to_degrees()
    }

    /// Triangle containing `x` and the barycentric coordinates of `x` in it.
    pub fn locate_point(&self, x: Point) -> Option<(usize, [f64; 3])> {
        self.locator
            .get_or_init(|| Locator::new(self))
            .locate(self, x)
    }

    /// Sub-mesh of the triangles whose centroid lies in `p`, plus the map from
    /// sub-mesh vertex indices to indices in `self`. The mesh must conform to `p`.
    pub fn restrict(&self, p: &Polygon) -> Result<(Mesh, Vec<usize>)> {
        let keep: Vec<usize> = (0..self.triangles.len())
            .filter(|&t| {
                let [a, b, c] = self.triangle_points(t);
                p.contains_point(Point::new((a.x + b.x + c.x) / 3.0, (a.y + b.y + c.y) / 3.0))
            })
            .collect();
        if keep.is_empty() {
            return Err(Error::Meshing("no triangle lies inside the polygon".into()));
        }
        let mut new_index = vec![usize::MAX; self.vertices.len()];
        let mut parent = Vec::new();
        for &t in &keep {
            for &v in &self.triangles[t] {
                if new_index[v] == usize::MAX {
                    new_index[v] = 0;
                }
            }
        }
        for (v, slot) in new_index.iter_mut().enumerate() {
            if *slot != usize::MAX {
                *slot = parent.len();
                parent.push(v);
            }
        }
        let vertices = parent.iter().map(|&v| self.vertices[v]).collect();
        let triangles = keep
            .iter()
            .map(|&t| self.triangles[t].map(|v| new_index[v]))
            .collect();
        let sub = Mesh::from_topology(vertices, triangles)?;
        let eps = 1e-9 * p.bbox().diagonal();
        for (i, &on) in sub.boundary.iter().enumerate() {
            if on && p.boundary_distance(sub.vertices[i]) > eps {
                return Err(Error::Meshing(format!(
                    "mesh does not conform to the polygon: boundary vertex {i} at {:?} is off the polygon",
                    sub.vertices[i]
                )));
            }
        }
        Ok((sub, parent))
    }
}

fn triangle_min_angle(p: [Point; 3]) -> f64 {
    let mut m = f64::INFINITY;
    for k in 0..3 {
        let a = p[(k + 1) % 3] - p[k];
        let b = p[(k + 2) % 3] - p[k];
        m = m.min(a.cross(b).abs().atan2(a.dot(b)));
    }
    m
}

/// Bucket grid over triangle bounding boxes.
#[derive(Debug)]
struct Locator {
    bbox: BoundingBox,
    nx: usize,
    ny: usize,
    cells: Vec<Vec<u32>>,
}

impl Locator {
    fn new(mesh: &Mesh) -> Self {
        let bbox = BoundingBox::of(&mesh.vertices);
        let side = ((mesh.triangles.len() as f64).sqrt().ceil() as usize).max(1);
        let w = (bbox.max.x - bbox.min.x).max(f64::MIN_POSITIVE);
        let hgt = (bbox.max.y - bbox.min.y).max(f64::MIN_POSITIVE);
        let (nx, ny) = if w >= hgt {
            (side, ((side as f64 * hgt / w).ceil() as usize).max(1))
        } else {
            (((side as f64 * w / hgt).ceil() as usize).max(1), side)
        };
        let mut loc = Locator {
            bbox,
            nx,
            ny,
            cells: vec![Vec::new(); nx * ny],
        };
        for t in 0..mesh.triangles.len() {
            let tb = BoundingBox::of(&mesh.triangle_points(t));
            let (i0, j0) = loc.cell(tb.min);
            let (i1, j1) = loc.cell(tb.max);
            for j in j0..=j1 {
                for i in i0..=i1 {
                    loc.cells[j * nx + i].push(t as u32);
                }
            }
        }
        loc
    }

    fn cell(&self, p: Point) -> (usize, usize) {
        let fx =
            (p.x - self.bbox.min.x) / (self.bbox.max.x - self.bbox.min.x).max(f64::MIN_POSITIVE);
        let fy =
            (p.y - self.bbox.min.y) / (self.bbox.max.y - self.bbox.min.y).max(f64::MIN_POSITIVE);
        let i = (fx * self.nx as f64)
            .floor()
            .clamp(0.0, (self.nx - 1) as f64) as usize;
        let j = (fy * self.ny as f64)
            .floor()
            .clamp(0.0, (self.ny - 1) as f64) as usize;
        (i, j)
    }

    fn locate(&self, mesh: &Mesh, x: Point) -> Option<(usize, [f64; 3])> {
        const TOL: f64 = 1e-12;
        let pad = 1e-12 * self.bbox.diagonal();
        if !self.bbox.contains(x, pad) {
            return None;
        }
        let (i, j) = self.cell(x);
        let mut best: Option<(usize, [f64; 3], f64)> = None;
        for &t in &self.cells[j * self.nx + i] {
            let t = t as usize;
            let [a, b, c] = mesh.triangle_points(t);
            let det = (b - a).cross(c - a);
            let l1 = (x - a).cross(c - a) / det;
            let l2 = (b - a).cross(x - a) / det;
            let l0 = 1.0 - l1 - l2;
            let worst = l0.min(l1).min(l2);
            if worst >= 0.0 {
                return Some((t, [l0, l1, l2]));
            }
            if worst >= -TOL && best.map_or(true, |(_, _, w)| worst > w) {
                best = Some((t, [l0, l1, l2], worst));
            }
        }
        best.map(|(t, l, _)| {
            let l = l.map(|v| v.max(0.0));
            let s = l[0] + l[1] + l[2];
            (t, l.map(|v| v / s))
        })
    }
}

/// Constrained Delaunay triangulation of `p` with maximum edge length `h_target`
/// and minimum angle at least [`MIN_ANGLE_DEG`]. Polygon vertices are kept.
pub fn triangulate(p: &Polygon, h_target: f64) -> Result<Mesh> {
    check_h(p, h_target)?;
    let segments: Vec<(Point, Point)> = p.edges().collect();
    // hull corners strictly outside the polygon
    let bb = p.bbox();
    let pad = 0.1 * bb.diagonal();
    let corners = [
        Point::new(bb.min.x - pad, bb.min.y - pad),
        Point::new(bb.max.x + pad, bb.min.y - pad),
        Point::new(bb.max.x + pad, bb.max.y + pad),
        Point::new(bb.min.x - pad, bb.max.y + pad),
    ];
    let mesh = refine_cdt(&segments, &corners, h_target, true, p.signed_area())?;
    // excluded outer faces leave only the polygon interior; confirm it
    let (sub, _) = mesh.restrict(p)?;
    if sub.n_triangles() != mesh.n_triangles() {
        return Err(Error::Meshing(
            "triangles outside the polygon survived refinement".into(),
        ));
    }
    Ok(mesh)
}

/// Triangulates the convex polygon `outer` while conforming to every segment in
/// `segments`, which must lie inside `outer` and may only meet at endpoints.
pub fn triangulate_pslg(
    outer: &Polygon,
    segments: &[(Point, Point)],
    h_target: f64,
) -> Result<Mesh> {
    check_h(outer, h_target)?;
    let verts = outer.vertices();
    let n = verts.len();
    let convex = (0..n).all(|i| orient(verts[i], verts[(i + 1) % n], verts[(i + 2) % n]) > 0.0);
    if !convex {
        return Err(Error::Unsupported(
            "the outer polygon of a segment triangulation must be convex".into(),
        ));
    }
    for &(a, b) in segments {
        if !outer.contains_point(a) || !outer.contains_point(b) {
            return Err(Error::Domain(
                "constraint segment leaves the outer polygon".into(),
            ));
        }
    }
    let mut all: Vec<(Point, Point)> = outer.edges().collect();
    all.extend_from_slice(segments);
    refine_cdt(&all, &[], h_target, false, outer.signed_area())
}

fn check_h(p: &Polygon, h_target: f64) -> Result<()> {
    if !(h_target > 0.0 && h_target.is_finite()) {
        return Err(Error::Argument(format!(
            "h_target must be positive, got {h_target}"
        )));
    }
    let d = p.diameter();
    if h_target > d {
        return Err(Error::Argument(format!(
            "h_target {h_target} exceeds the polygon diameter {d}"
        )));
    }
    Ok(())
}

fn point_key(p: Point) -> (u64, u64) {
    ((p.x + 0.0).to_bits(), (p.y + 0.0).to_bits())
}

fn refine_cdt(
    segments: &[(Point, Point)],
    free_points: &[Point],
    h_target: f64,
    exclude_outer: bool,
    area: f64,
) -> Result<Mesh> {
    let mut points: Vec<Point> = Vec::new();
    let mut index: HashMap<(u64, u64), usize> = HashMap::new();
    let mut id = |p: Point, points: &mut Vec<Point>| -> usize {
        *index.entry(point_key(p)).or_insert_with(|| {
            points.push(p);
            points.len() - 1
        })
    };
    let mut edges: Vec<[usize; 2]> = Vec::new();
    for &(a, b) in segments {
        let pieces = ((a.distance(b) / h_target).ceil() as usize).max(1);
        let mut prev = id(a, &mut points);
        for k in 1..=pieces {
            let q = if k == pieces {
                b
            } else {
                a + (b - a) * (k as f64 / pieces as f64)
            };
            let cur = id(q, &mut points);
            edges.push([prev, cur]);
            prev = cur;
        }
    }
    for &q in free_points {
        id(q, &mut points);
    }
    let mut area_factor = 0.25;
    let mut last = String::new();
    for _attempt in 0..8 {
        let max_area = area_factor * h_target * h_target;
        let mesh = run_spade(&points, &edges, max_area, area, exclude_outer)?;
        let angle = mesh.min_angle_deg();
        if mesh.h() <= h_target && angle >= MIN_ANGLE_DEG {
            return Ok(mesh);
        }
        last = format!(
            "area limit {max_area:.3e}: h = {:.4e} (target {h_target:.4e}), min angle {angle:.2}°",
            mesh.h()
        );
        area_factor *= 0.6;
    }
    Err(Error::Meshing(format!(
        "quality targets not reached after 8 refinement rounds; last round {last}"
    )))
}

fn run_spade(
    points: &[Point],
    edges: &[[usize; 2]],
    max_area: f64,
    area: f64,
    exclude_outer: bool,
) -> Result<Mesh> {
    let pts: Vec<Point2<f64>> = points.iter().map(|p| Point2::new(p.x, p.y)).collect();
    let mut conflict = None;
    let mut cdt: ConstrainedDelaunayTriangulation<Point2<f64>> =
        ConstrainedDelaunayTriangulation::try_bulk_load_cdt(pts, edges.to_vec(), |e| {
            conflict.get_or_insert(e);
        })
        .map_err(|e| Error::Meshing(format!("triangulation failed: {e:?}")))?;
    if let Some(e) = conflict {
        return Err(Error::Meshing(format!(
            "constraint segments {e:?} intersect"
        )));
    }
    if cdt.num_vertices() != points.len() {
        return Err(Error::Meshing("duplicate input points".into()));
    }
    let budget = (40.0 * area / max_area) as usize + 20 * points.len() + 1000;
    let params = RefinementParameters::<f64>::new()
        .with_angle_limit(AngleLimit::from_deg(REFINE_ANGLE_DEG))
        .with_max_allowed_area(max_area)
        .with_max_additional_vertices(budget)
        .exclude_outer_faces(exclude_outer);
    let result = cdt.refine(params);
    if !result.refinement_complete {
        return Err(Error::Meshing(format!(
            "refinement exhausted its budget of {budget} additional vertices"
        )));
    }
    let excluded: std::collections::HashSet<_> = result.excluded_faces.into_iter().collect();
    let mut tris: Vec<[usize; 3]> = Vec::new();
    for face in cdt.inner_faces() {
        if excluded.contains(&face.fix()) {
            continue;
        }
        let v = face.vertices().map(|v| v.fix().index());
        tris.push(v);
    }
    let all: Vec<Point> = cdt
        .vertices()
        .map(|v| Point::new(v.position().x, v.position().y))
        .collect();
    let mut new_index = vec![usize::MAX; all.len()];
    for &i in tris.iter().flatten() {
        new_index[i] = 0;
    }
    let mut vertices = Vec::new();
    for (i, slot) in new_index.iter_mut().enumerate() {
        if *slot != usize::MAX {
            *slot = vertices.len();
            vertices.push(all[i]);
        }
    }
    let mut triangles: Vec<[usize; 3]> = tris.iter().map(|t| t.map(|i| new_index[i])).collect();
    for t in &mut triangles {
        if orient(vertices[t[0]], vertices[t[1]], vertices[t[2]]) < 0.0 {
            t.swap(1, 2);
        }
    }
    Mesh::from_topology(vertices, triangles)
}

/// Red refinement: every triangle split into four through its edge midpoints.
pub fn refine_uniform(m: &Mesh) -> Mesh {
    let mut vertices = m.vertices.clone();
    let mut boundary = m.boundary.clone();
    let boundary_edges: std::collections::HashSet<(usize, usize)> =
        m.boundary_edges().into_iter().collect();
    let mut mid: HashMap<(usize, usize), usize> = HashMap::new();
    let mut triangles = Vec::with_capacity(4 * m.triangles.len());
    for t in &m.triangles {
        let mut mids = [0usize; 3];
        for k in 0..3 {
            let (a, b) = (t[k], t[(k + 1) % 3]);
            let key = (a.min(b), a.max(b));
            mids[k] = *mid.entry(key).or_insert_with(|| {
                let (p, q) = (m.vertices[key.0], m.vertices[key.1]);
                vertices.push(Point::new(0.5 * (p.x + q.x), 0.5 * (p.y + q.y)));
                boundary.push(boundary_edges.contains(&key));
                vertices.len() - 1
            });
        }
        let [a, b, c] = *t;
        let [mab, mbc, mca] = mids;
        triangles.extend_from_slice(&[
            [a, mab, mca],
            [mab, b, mbc],
            [mca, mbc, c],
            [mab, mbc, mca],
        ]);
    }
    let mut h: f64 = 0.0;
    for t in &triangles {
        for k in 0..3 {
            h = h.max(vertices[t[k]].distance(vertices[t[(k + 1) % 3]]));
        }
    }
    Mesh {
        vertices,
        triangles,
        boundary,
        h,
        locator: OnceLock::new(),
    }
}

/// Text form: header `V T`, then `x y flag` per vertex and `i j k` per triangle.
pub fn write_mesh(m: &Mesh) -> String {
    let mut s = String::with_capacity(48 * m.n_vertices() + 24 * m.n_triangles());
    writeln!(s, "{} {}", m.n_vertices(), m.n_triangles()).unwrap();
    for (p, &b) in m.vertices.iter().zip(&m.boundary) {
        writeln!(s, "{} {} {}", p.x, p.y, u8::from(b)).unwrap();
    }
    for t in &m.triangles {
        writeln!(s, "{} {} {}", t[0], t[1], t[2]).unwrap();
    }
    s
}

pub fn read_mesh(text: &str) -> Result<Mesh> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let parse_err = |n: usize, what: &str| Error::Parse(format!("line {}: {what}", n + 1));
    let (n0, header) = lines
        .next()
        .ok_or_else(|| Error::Parse("empty mesh file".into()))?;
    let head: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| parse_err(n0, "bad header")))
        .collect::<Result<_>>()?;
    let [nv, nt] = head[..] else {
        return Err(parse_err(n0, "header must be `V T`"));
    };
    let mut vertices = Vec::with_capacity(nv);
    let mut boundary = Vec::with_capacity(nv);
    for _ in 0..nv {
        let (n, l) = lines
            .next()
            .ok_or_else(|| Error::Parse("missing vertex lines".into()))?;
        let f: Vec<&str> = l.split_whitespace().collect();
        if f.len() != 3 {
            return Err(parse_err(n, "expected `x y flag`"));
        }
        let x: f64 = f[0].parse().map_err(|_| parse_err(n, "bad x"))?;
        let y: f64 = f[1].parse().map_err(|_| parse_err(n, "bad y"))?;
        let flag = match f[2] {
            "0" => false,
            "1" => true,
            _ => return Err(parse_err(n, "flag must be 0 or 1")),
        };
        vertices.push(Point::new(x, y));
        boundary.push(flag);
    }
    let mut triangles = Vec::with_capacity(nt);
    for _ in 0..nt {
        let (n, l) = lines
            .next()
            .ok_or_else(|| Error::Parse("missing triangle lines".into()))?;
        let f: Vec<usize> = l
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| parse_err(n, "bad index")))
            .collect::<Result<_>>()?;
        let [i, j, k] = f[..] else {
            return Err(parse_err(n, "expected `i j k`"));
        };
        triangles.push([i, j, k]);
    }
    if let Some((n, _)) = lines.next() {
        return Err(parse_err(n, "trailing content"));
    }
    Mesh::new(vertices, triangles, boundary)
}
