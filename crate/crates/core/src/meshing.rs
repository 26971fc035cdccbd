//! Surface extraction and evaluation: marching cubes, Chamfer distance,
//! mesh sampling and depth metrics.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{self, BoundingBox, Vec3};
use crate::meshing_tables::TRI_TABLE;
use crate::model::{point_sdf, query_samples, ModelConfig, ModelParams, PointQuery, SceneContext};
use crate::renderer::{render_view, RenderConfig};
use crate::scenegen::{AnalyticScene, SceneBundle};

/// Corner offsets of a cube in table order.
const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

const EDGES: [[usize; 2]; 12] = [
    [0, 1],
    [1, 2],
    [2, 3],
    [3, 0],
    [4, 5],
    [5, 6],
    [6, 7],
    [7, 4],
    [0, 4],
    [1, 5],
    [2, 6],
    [3, 7],
];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[u32; 3]>,
}

impl Mesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len() as u32;
        for (i, t) in self.triangles.iter().enumerate() {
            if t.iter().any(|&v| v >= n) {
                return Err(Error::invalid(format!("triangle {i} indexes past {n} vertices")));
            }
            if t[0] == t[1] || t[1] == t[2] || t[0] == t[2] {
                return Err(Error::invalid(format!("triangle {i} is degenerate")));
            }
        }
        Ok(())
    }

    pub fn edge_count(&self) -> usize {
        let mut edges: Vec<(u32, u32)> = self
            .triangles
            .iter()
            .flat_map(|t| [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])])
            .map(|(a, b)| (a.min(b), a.max(b)))
            .collect();
        edges.sort_unstable();
        edges.dedup();
        edges.len()
    }

    /// V - E + F.
    pub fn euler_characteristic(&self) -> i64 {
        self.vertices.len() as i64 - self.edge_count() as i64 + self.triangles.len() as i64
    }

    pub fn triangle(&self, i: usize) -> [Vec3; 3] {
        self.triangles[i].map(|v| self.vertices[v as usize])
    }

    /// Unnormalised normal `(b - a) x (c - a)`.
    pub fn face_normal(&self, i: usize) -> Vec3 {
        let [a, b, c] = self.triangle(i);
        geometry::cross(geometry::sub(b, a), geometry::sub(c, a))
    }

    pub fn area(&self, i: usize) -> f64 {
        0.5 * geometry::norm(self.face_normal(i))
    }
}

/// Sample positions of a `(res + 1)^3` grid spanning `bbox`, `x` slowest.
pub fn grid_points(bbox: &BoundingBox, res: usize) -> Vec<Vec3> {
    let n = res + 1;
    let e = bbox.extent();
    let mut pts = Vec::with_capacity(n * n * n);
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                pts.push([i, j, k].map(|_| 0.0));
                let p = pts.last_mut().expect("just pushed");
                for (a, idx) in [i, j, k].into_iter().enumerate() {
                    p[a] = bbox.min[a] + e[a] * idx as f64 / res as f64;
                }
            }
        }
    }
    pts
}

/// Zero level set of SDF samples on the grid of [`grid_points`]. Triangles
/// face toward positive values; vertices on shared cube edges are merged.
pub fn marching_cubes_grid(values: &[f64], bbox: &BoundingBox, res: usize) -> Result<Mesh> {
    let n = res + 1;
    if res < 1 || values.len() != n * n * n {
        return Err(Error::invalid(format!(
            "expected {} grid values for resolution {res}, got {}",
            n * n * n,
            values.len()
        )));
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index: i });
    }
    let e = bbox.extent();
    let id = |i: usize, j: usize, k: usize| (i * n + j) * n + k;
    let pos = |g: usize| -> Vec3 {
        let (i, j, k) = (g / (n * n), (g / n) % n, g % n);
        let idx = [i, j, k];
        [0, 1, 2].map(|a| bbox.min[a] + e[a] * idx[a] as f64 / res as f64)
    };
    let mut mesh = Mesh::default();
    let mut edge_vertex: HashMap<(usize, usize), u32> = HashMap::new();
    for i in 0..res {
        for j in 0..res {
            for k in 0..res {
                let corner_ids = CORNERS.map(|c| id(i + c[0], j + c[1], k + c[2]));
                let case = corner_ids
                    .iter()
                    .enumerate()
                    .filter(|&(_, &g)| values[g] < 0.0)
                    .fold(0usize, |acc, (b, _)| acc | (1 << b));
                let row = &TRI_TABLE[case];
                for tri in row.chunks(3).take_while(|t| t[0] >= 0) {
                    let mut verts = [0u32; 3];
                    for (slot, &edge) in verts.iter_mut().zip(tri) {
                        let [a, b] = EDGES[edge as usize].map(|c| corner_ids[c]);
                        let key = (a.min(b), a.max(b));
                        *slot = *edge_vertex.entry(key).or_insert_with(|| {
                            let (va, vb) = (values[key.0], values[key.1]);
                            let t = va / (va - vb);
                            let (pa, pb) = (pos(key.0), pos(key.1));
                            mesh.vertices
                                .push(geometry::add(pa, geometry::scale(geometry::sub(pb, pa), t)));
                            (mesh.vertices.len() - 1) as u32
                        });
                    }
                    // table winding faces the negative side
                    mesh.triangles.push([verts[0], verts[2], verts[1]]);
                }
            }
        }
    }
    Ok(mesh)
}

/// Samples `sdf` on a `(res + 1)^3` grid and extracts its zero level set.
pub fn marching_cubes(sdf: impl Fn(Vec3) -> f64, bbox: &BoundingBox, res: usize) -> Result<Mesh> {
    let values: Vec<f64> = grid_points(bbox, res).into_iter().map(sdf).collect();
    marching_cubes_grid(&values, bbox, res)
}

/// How grid points are grouped into ray context when the learned SDF is
/// evaluated.
#[derive(Debug, Clone, PartialEq)]
pub enum GridQuery {
    /// Every grid line along `axis` (0, 1 or 2) is one ray of samples.
    Lines {
        axis: usize,
    },
    Points(PointQuery),
}

/// Grid axis closest to a viewing direction.
pub fn dominant_axis(dir: Vec3) -> usize {
    (0..3)
        .max_by(|&a, &b| dir[a].abs().total_cmp(&dir[b].abs()))
        .unwrap_or(2)
}

/// Learned SDF on the grid of [`grid_points`].
pub fn model_sdf_grid(
    params: &ModelParams,
    config: &ModelConfig,
    ctx: &SceneContext,
    res: usize,
    query: &GridQuery,
) -> Result<Vec<f64>> {
    let bbox = ctx.bbox();
    let pts = grid_points(bbox, res);
    match query {
        GridQuery::Points(q) => point_sdf(params, config, ctx, &pts, q),
        &GridQuery::Lines { axis } => {
            if axis > 2 {
                return Err(Error::invalid(format!("grid axis {axis} out of range")));
            }
            let n = res + 1;
            let stride = [n * n, n, 1][axis];
            let starts: Vec<usize> = (0..pts.len()).filter(|&g| (g / stride) % n == 0).collect();
            let mut out = vec![0.0; pts.len()];
            let lines_per_chunk = (8192 / n).max(1);
            for chunk in starts.chunks(lines_per_chunk) {
                let idx: Vec<usize> = chunk
                    .iter()
                    .flat_map(|&s| (0..n).map(move |t| s + t * stride))
                    .collect();
                let samples: Vec<Vec3> = idx.iter().map(|&g| pts[g]).collect();
                let f = query_samples(params, config, ctx, &samples, n)?;
                for (&g, &v) in idx.iter().zip(f.sdf.values()) {
                    out[g] = v;
                }
            }
            Ok(out)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Chamfer {
    pub accuracy: f64,
    pub completeness: f64,
    pub mean: f64,
}

/// Uniform grid over a point set for exact nearest-neighbour queries.
pub struct PointGrid<'a> {
    points: &'a [Vec3],
    min: Vec3,
    cell: f64,
    dims: [usize; 3],
    starts: Vec<usize>,
    order: Vec<u32>,
}

impl<'a> PointGrid<'a> {
    pub fn new(points: &'a [Vec3]) -> Self {
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        for p in points {
            for a in 0..3 {
                min[a] = min[a].min(p[a]);
                max[a] = max[a].max(p[a]);
            }
        }
        let ext: Vec3 = [0, 1, 2].map(|a| (max[a] - min[a]).max(1e-9));
        let vol = ext[0] * ext[1] * ext[2];
        // about two points per cell
        let cell = (2.0 * vol / points.len().max(1) as f64)
            .cbrt()
            .max(ext.iter().cloned().fold(0.0, f64::max) / 256.0);
        let dims = ext.map(|e| ((e / cell).floor() as usize + 1).min(256));
        let total = dims[0] * dims[1] * dims[2];
        let mut counts = vec![0usize; total + 1];
        let keys: Vec<usize> = points
            .iter()
            .map(|p| {
                let c = Self::cell_of(p, &min, cell, &dims);
                (c[0] * dims[1] + c[1]) * dims[2] + c[2]
            })
            .collect();
        for &k in &keys {
            counts[k + 1] += 1;
        }
        for i in 0..total {
            counts[i + 1] += counts[i];
        }
        let mut fill = counts.clone();
        let mut order = vec![0u32; points.len()];
        for (i, &k) in keys.iter().enumerate() {
            order[fill[k]] = i as u32;
            fill[k] += 1;
        }
        Self {
            points,
            min,
            cell,
            dims,
            starts: counts,
            order,
        }
    }

    fn cell_of(p: &Vec3, min: &Vec3, cell: f64, dims: &[usize; 3]) -> [usize; 3] {
        [0, 1, 2].map(|a| {
            let c = ((p[a] - min[a]) / cell).floor();
            (c.max(0.0) as usize).min(dims[a] - 1)
        })
    }

    /// Distance from `q` to the nearest stored point.
    pub fn nearest(&self, q: Vec3) -> f64 {
        let c = Self::cell_of(&q, &self.min, self.cell, &self.dims);
        let mut best = f64::INFINITY;
        for r in 0usize.. {
            let lo = c.map(|v| v.saturating_sub(r));
            let hi = [0, 1, 2].map(|a| (c[a] + r).min(self.dims[a] - 1));
            for i in lo[0]..=hi[0] {
                for j in lo[1]..=hi[1] {
                    for k in lo[2]..=hi[2] {
                        let ring = [i.abs_diff(c[0]), j.abs_diff(c[1]), k.abs_diff(c[2])];
                        if ring.into_iter().max() != Some(r) {
                            continue;
                        }
                        let key = (i * self.dims[1] + j) * self.dims[2] + k;
                        for &pi in &self.order[self.starts[key]..self.starts[key + 1]] {
                            best = best.min(squared_distance(q, self.points[pi as usize]));
                        }
                    }
                }
            }
            // lower bound on distance to any unvisited cell
            let mut bound = f64::INFINITY;
            for a in 0..3 {
                if lo[a] > 0 {
                    bound = bound.min(q[a] - (self.min[a] + lo[a] as f64 * self.cell));
                }
                if hi[a] + 1 < self.dims[a] {
                    bound = bound.min(self.min[a] + (hi[a] + 1) as f64 * self.cell - q[a]);
                }
            }
            if bound == f64::INFINITY || (bound > 0.0 && best <= bound * bound) {
                break;
            }
        }
        best.sqrt()
    }
}

fn squared_distance(a: Vec3, b: Vec3) -> f64 {
    let d = geometry::sub(a, b);
    geometry::dot(d, d)
}

fn mean_nearest(from: &[Vec3], to: &[Vec3]) -> f64 {
    let grid = PointGrid::new(to);
    from.iter().map(|&p| grid.nearest(p)).sum::<f64>() / from.len() as f64
}

fn check_clouds(pred: &[Vec3], gt: &[Vec3]) -> Result<()> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::invalid("Chamfer distance needs two non-empty point clouds"));
    }
    Ok(())
}

/// Symmetric L2 Chamfer distance with exact nearest neighbours.
pub fn chamfer(pred: &[Vec3], gt: &[Vec3]) -> Result<Chamfer> {
    check_clouds(pred, gt)?;
    let accuracy = mean_nearest(pred, gt);
    let completeness = mean_nearest(gt, pred);
    Ok(Chamfer {
        accuracy,
        completeness,
        mean: 0.5 * (accuracy + completeness),
    })
}

/// Quadratic-time reference for [`chamfer`].
pub fn chamfer_brute_force(pred: &[Vec3], gt: &[Vec3]) -> Result<Chamfer> {
    check_clouds(pred, gt)?;
    let one_way = |from: &[Vec3], to: &[Vec3]| {
        from.iter()
            .map(|&p| {
                to.iter()
                    .map(|&q| squared_distance(p, q))
                    .fold(f64::INFINITY, f64::min)
                    .sqrt()
            })
            .sum::<f64>()
            / from.len() as f64
    };
    let accuracy = one_way(pred, gt);
    let completeness = one_way(gt, pred);
    Ok(Chamfer {
        accuracy,
        completeness,
        mean: 0.5 * (accuracy + completeness),
    })
}

/// `n` points on the mesh, triangles drawn in proportion to area.
pub fn sample_mesh(mesh: &Mesh, n: usize, rng: &mut impl Rng) -> Result<Vec<Vec3>> {
    if mesh.is_empty() {
        return Err(Error::invalid("cannot sample an empty mesh"));
    }
    let mut cdf = Vec::with_capacity(mesh.triangles.len());
    let mut total = 0.0;
    for i in 0..mesh.triangles.len() {
        total += mesh.area(i);
        cdf.push(total);
    }
    if !(total > 0.0) {
        return Err(Error::invalid("mesh has zero total area"));
    }
    Ok((0..n)
        .map(|_| {
            let u = rng.random::<f64>() * total;
            let i = cdf.partition_point(|&c| c <= u).min(cdf.len() - 1);
            let [a, b, c] = mesh.triangle(i);
            let (r1, r2): (f64, f64) = (rng.random(), rng.random());
            let s = r1.sqrt();
            let (wa, wb, wc) = (1.0 - s, s * (1.0 - r2), s * r2);
            [0, 1, 2].map(|k| wa * a[k] + wb * b[k] + wc * c[k])
        })
        .collect())
}

/// Uniform samples on a sphere surface.
pub fn sphere_samples(center: Vec3, radius: f64, n: usize, rng: &mut impl Rng) -> Vec<Vec3> {
    use rand_distr::{Distribution, StandardNormal};
    (0..n)
        .map(|_| loop {
            let v: Vec3 = [0; 3].map(|_| StandardNormal.sample(rng));
            let len = geometry::norm(v);
            if len > 1e-9 {
                break geometry::add(center, geometry::scale(v, radius / len));
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthMetrics {
    pub thresholds: Vec<f64>,
    /// Percentage of masked pixels with error below each threshold.
    pub pct_below: Vec<f64>,
    pub abs_err: f64,
    /// Mean relative error in percent.
    pub rel_err: f64,
}

pub fn depth_metrics(pred: &[f64], gt: &[f64], mask: &[bool], thresholds: &[f64]) -> Result<DepthMetrics> {
    if pred.len() != gt.len() || mask.len() != gt.len() {
        return Err(Error::Shape {
            op: "depth_metrics",
            lhs: vec![pred.len()],
            rhs: vec![gt.len(), mask.len()],
        });
    }
    let idx: Vec<usize> = (0..gt.len()).filter(|&i| mask[i]).collect();
    if idx.is_empty() {
        return Err(Error::invalid("depth metrics need at least one masked pixel"));
    }
    if let Some(&i) = idx.iter().find(|&&i| !(gt[i] > 0.0)) {
        return Err(Error::Domain {
            op: "depth_metrics",
            detail: format!("ground-truth depth {} at pixel {i} is not positive", gt[i]),
        });
    }
    let n = idx.len() as f64;
    let errs: Vec<f64> = idx.iter().map(|&i| (pred[i] - gt[i]).abs()).collect();
    let pct_below = thresholds
        .iter()
        .map(|&t| 100.0 * errs.iter().filter(|&&e| e < t).count() as f64 / n)
        .collect();
    Ok(DepthMetrics {
        thresholds: thresholds.to_vec(),
        pct_below,
        abs_err: errs.iter().sum::<f64>() / n,
        rel_err: 100.0 * idx.iter().zip(&errs).map(|(&i, e)| e / gt[i]).sum::<f64>() / n,
    })
}

impl DepthMetrics {
    pub fn report_pairs(&self) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = self
            .thresholds
            .iter()
            .zip(&self.pct_below)
            .map(|(t, p)| (format!("pct_below_{t}"), *p))
            .collect();
        out.push(("abs_err".into(), self.abs_err));
        out.push(("rel_err".into(), self.rel_err));
        out
    }
}

/// Colour, depth and accumulated opacity of a rendered bundle view.
pub struct RenderedView {
    pub color: Vec<f64>,
    pub depth: Vec<f64>,
    pub acc: Vec<f64>,
}

/// Renders bundle view `view` with every other view as a source, as in
/// training.
pub fn render_bundle_view(
    params: &ModelParams,
    config: &ModelConfig,
    bundle: &SceneBundle,
    view: usize,
    rcfg: &RenderConfig,
) -> Result<RenderedView> {
    let target = bundle
        .views
        .get(view)
        .ok_or_else(|| Error::invalid(format!("view {view} out of range")))?;
    let sources: Vec<_> = bundle
        .views
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != view)
        .map(|(_, v)| (&v.camera, &v.image))
        .collect();
    let ctx = SceneContext::build(params, config, &bundle.bbox, &sources, None)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (color, depth, acc) = render_view(params, config, &ctx, &target.camera, rcfg, 1024, &mut rng)?;
    Ok(RenderedView { color, depth, acc })
}

/// Depth metrics over the foreground pixels of every bundle view, each
/// rendered from the others. Returns the pooled metrics and the renders.
pub fn bundle_depth_metrics(
    params: &ModelParams,
    config: &ModelConfig,
    bundle: &SceneBundle,
    rcfg: &RenderConfig,
    thresholds: &[f64],
) -> Result<(DepthMetrics, Vec<RenderedView>)> {
    let mut views = Vec::with_capacity(bundle.views.len());
    let (mut pred, mut gt, mut mask) = (Vec::new(), Vec::new(), Vec::new());
    for (i, v) in bundle.views.iter().enumerate() {
        let r = render_bundle_view(params, config, bundle, i, rcfg)?;
        pred.extend_from_slice(&r.depth);
        gt.extend_from_slice(&v.depth);
        mask.extend_from_slice(&v.mask);
        views.push(r);
    }
    Ok((depth_metrics(&pred, &gt, &mask, thresholds)?, views))
}

/// Mesh of the learned zero level set with all bundle views as sources.
/// Grid lines run along the axis closest to the first camera's view
/// direction.
pub fn extract_mesh(
    params: &ModelParams,
    config: &ModelConfig,
    bundle: &SceneBundle,
    res: usize,
    query: Option<&GridQuery>,
) -> Result<Mesh> {
    let sources: Vec<_> = bundle.views.iter().map(|v| (&v.camera, &v.image)).collect();
    let ctx = SceneContext::build(params, config, &bundle.bbox, &sources, None)?;
    let default = GridQuery::Lines {
        axis: dominant_axis(bundle.views[0].camera.forward()),
    };
    let values = model_sdf_grid(params, config, &ctx, res, query.unwrap_or(&default))?;
    marching_cubes_grid(&values, &bundle.bbox, res)
}

/// `n` points on the zero level set of an analytic scene: area-weighted
/// samples of a fine marching-cubes mesh, each projected onto the surface
/// by Newton steps along the SDF gradient.
pub fn analytic_surface_samples(
    scene: &AnalyticScene,
    bbox: &BoundingBox,
    n: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Vec3>> {
    let mesh = marching_cubes(|p| scene.sdf(p), bbox, 128)?;
    let mut pts = sample_mesh(&mesh, n, rng)?;
    for p in &mut pts {
        for _ in 0..3 {
            let d = scene.sdf(*p);
            let g = scene.normal(*p);
            *p = geometry::sub(*p, geometry::scale(g, d));
        }
    }
    Ok(pts)
}

/// Flat `key: value` report, one pair per line.
pub fn format_report(pairs: &[(String, f64)]) -> String {
    let mut s = String::new();
    for (k, v) in pairs {
        let _ = writeln!(s, "{k}: {v}");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sphere(p: Vec3) -> f64 {
        geometry::norm(p) - 1.0
    }

    #[test]
    fn all_positive_grid_is_empty() {
        let m = marching_cubes(|_| 1.0, &BoundingBox::cube(1.0), 8).unwrap();
        assert!(m.is_empty() && m.vertices.is_empty());
    }

    #[test]
    fn sphere_is_closed_and_outward() {
        let bbox = BoundingBox::cube(2.0);
        let res = 24;
        let m = marching_cubes(sphere, &bbox, res).unwrap();
        m.validate().unwrap();
        assert_eq!(m.euler_characteristic(), 2);
        let diag = 3f64.sqrt() * 4.0 / res as f64;
        assert!(m.vertices.iter().all(|&v| sphere(v).abs() < diag));
        for i in 0..m.triangles.len() {
            let [a, b, c] = m.triangle(i);
            let centroid = [0, 1, 2].map(|k| (a[k] + b[k] + c[k]) / 3.0);
            // grid points lying exactly on the surface give zero-area faces
            if m.area(i) > 0.0 {
                assert!(geometry::dot(m.face_normal(i), centroid) > 0.0);
            }
        }
    }

    #[test]
    fn plane_is_one_sheet() {
        let bbox = BoundingBox::cube(1.0);
        let m = marching_cubes(|p| p[2] - 0.13, &bbox, 10).unwrap();
        m.validate().unwrap();
        assert!(m.vertices.iter().all(|v| (v[2] - 0.13).abs() < 0.2));
        // open disc-like sheet
        assert_eq!(m.euler_characteristic(), 1);
        for i in 0..m.triangles.len() {
            assert!(m.face_normal(i)[2] > 0.0);
        }
    }

    #[test]
    fn chamfer_examples() {
        let c = chamfer(&[[0.0; 3]], &[[3.0, 4.0, 0.0]]).unwrap();
        assert_eq!((c.accuracy, c.completeness, c.mean), (5.0, 5.0, 5.0));
        let pts = vec![[1.0, 2.0, 3.0], [0.5, 0.0, -1.0]];
        assert_eq!(chamfer(&pts, &pts).unwrap().mean, 0.0);
        assert!(chamfer(&[], &pts).is_err());
    }

    #[test]
    fn grid_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a: Vec<Vec3> = (0..500).map(|_| [0; 3].map(|_| rng.random_range(-1.0..1.0))).collect();
        let mut b: Vec<Vec3> = (0..300).map(|_| [0; 3].map(|_| rng.random_range(-0.5..2.0))).collect();
        b.push([10.0, -3.0, 0.0]);
        let fast = chamfer(&a, &b).unwrap();
        let slow = chamfer_brute_force(&a, &b).unwrap();
        assert!((fast.accuracy - slow.accuracy).abs() < 1e-12);
        assert!((fast.completeness - slow.completeness).abs() < 1e-12);
    }

    #[test]
    fn area_weighted_sampling() {
        let mesh = Mesh {
            vertices: vec![
                [0.0; 3],
                [3.0, 0.0, 0.0],
                [0.0, 3.0, 0.0],
                [5.0, 0.0, 0.0],
                [6.0, 0.0, 0.0],
                [5.0, 1.0, 0.0],
            ],
            triangles: vec![[0, 1, 2], [3, 4, 5]],
        };
        let pts = sample_mesh(&mesh, 10000, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let big = pts.iter().filter(|p| p[0] < 4.0).count();
        assert!((8700..=9300).contains(&big), "{big}");
        assert!(pts
            .iter()
            .filter(|p| p[0] < 4.0)
            .all(|p| p[0] >= 0.0 && p[1] >= 0.0 && p[0] + p[1] <= 3.0 + 1e-12));
    }

    #[test]
    fn depth_metric_examples() {
        let gt = vec![10.0; 4];
        let mask = vec![true; 4];
        let m = depth_metrics(&gt, &gt, &mask, &[1.0, 2.0, 4.0]).unwrap();
        assert_eq!(m.pct_below, vec![100.0; 3]);
        assert_eq!((m.abs_err, m.rel_err), (0.0, 0.0));
        let shifted: Vec<f64> = gt.iter().map(|g| g + 1.5).collect();
        let m = depth_metrics(&shifted, &gt, &mask, &[1.0, 2.0, 4.0]).unwrap();
        assert_eq!(m.pct_below, vec![0.0, 100.0, 100.0]);
        assert_eq!(m.abs_err, 1.5);
        let scaled: Vec<f64> = gt.iter().map(|g| 1.1 * g).collect();
        let m = depth_metrics(&scaled, &gt, &mask, &[1.0]).unwrap();
        assert!((m.rel_err - 10.0).abs() < 1e-12);
        assert!(depth_metrics(&gt, &[0.0; 4], &mask, &[1.0]).is_err());
    }

    #[test]
    fn analytic_samples_lie_on_surface() {
        use crate::scenegen::ShapeKind;
        let bbox = BoundingBox::new([-1.25; 3], [1.25; 3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for kind in [ShapeKind::Sphere, ShapeKind::Union] {
            let scene = AnalyticScene::preset(kind);
            let pts = analytic_surface_samples(&scene, &bbox, 500, &mut rng).unwrap();
            assert!(pts.iter().all(|&p| scene.sdf(p).abs() < 1e-6));
        }
    }
}
