//! 2D feature extraction, the variance/mean cost volume, its regulariser,
//! and trilinear lookups into the regularised volume.
//!
//! Volumes are grids of `R` nodes per axis spanning the bounding box
//! (node `0` on `min`, node `R-1` on `max`). A [`FeatureVolume`] may store
//! only a subset of its cells; absent cells behave exactly like masked ones.
//! Training evaluates the volume only at cells its rays can reach, which
//! yields the same values there as a dense evaluation.

use std::rc::Rc;

use rand::Rng;

use crate::diff::DualArray;
use crate::error::{Error, Result};
use crate::geometry::{BoundingBox, Camera, Vec3};
use crate::params::{join, Linear, ParamSet};

/// Feature grid over an image; grid node `(i, j)` sits on image pixel
/// `(stride * i, stride * j)`.
#[derive(Debug, Clone)]
pub struct FeatureMap2D {
    /// `[H_f, W_f, C]`
    pub values: DualArray,
    pub stride: f64,
}

impl FeatureMap2D {
    pub fn new(values: DualArray, stride: f64) -> Result<Self> {
        if values.rank() != 3 {
            return Err(Error::invalid(format!(
                "feature map must be [H, W, C], got {:?}",
                values.shape()
            )));
        }
        Ok(Self { values, stride })
    }

    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn pixel_to_grid(&self, px: [f64; 2]) -> [f64; 2] {
        [px[0] / self.stride, px[1] / self.stride]
    }
}

/// Gathers fixed rows of `x: [N, C]` into `[M, K*C]`; entry `m*K + k` of
/// `idx` selects the row placed in slot `k` of output row `m` (`None`
/// leaves zeros). The backward pass scatter-adds.
pub fn gather_rows_padded(x: &DualArray, idx: Vec<Option<u32>>, k: usize) -> Result<DualArray> {
    if x.rank() != 2 || k == 0 || idx.len() % k != 0 || idx.is_empty() {
        return Err(Error::invalid("gather_rows_padded: bad shapes"));
    }
    let (n, c) = (x.shape()[0], x.shape()[1]);
    if idx.iter().flatten().any(|&r| r as usize >= n) {
        return Err(Error::invalid("gather_rows_padded: row index out of range"));
    }
    let m = idx.len() / k;
    let xv = x.values();
    let mut out = vec![0.0; m * k * c];
    for (slot, r) in idx.iter().enumerate() {
        if let Some(r) = r {
            let r = *r as usize;
            out[slot * c..(slot + 1) * c].copy_from_slice(&xv[r * c..(r + 1) * c]);
        }
    }
    DualArray::custom(&[x], vec![m, k * c], out, move |g, _| {
        let mut gx = vec![0.0; n * c];
        for (slot, r) in idx.iter().enumerate() {
            if let Some(r) = r {
                let r = *r as usize;
                for j in 0..c {
                    gx[r * c + j] += g[slot * c + j];
                }
            }
        }
        vec![Some(gx)]
    })
}

/// Bilinear lookups into `map: [H, W, C]` at grid coordinates `(x, y)`,
/// clamped to the border. `None` coordinates produce zero rows.
pub fn bilinear_gather(map: &DualArray, coords: &[Option<[f64; 2]>]) -> Result<DualArray> {
    if map.rank() != 3 || coords.is_empty() {
        return Err(Error::invalid(
            "bilinear_gather: expected [H, W, C] map and coordinates",
        ));
    }
    let (h, w, c) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    // per point: 4 (flat pixel, weight) taps
    let taps: Vec<[(usize, f64); 4]> = coords
        .iter()
        .map(|co| match co {
            None => [(0, 0.0); 4],
            Some([x, y]) => {
                let x = x.clamp(0.0, (w - 1) as f64);
                let y = y.clamp(0.0, (h - 1) as f64);
                let x0 = (x.floor() as usize).min(w.saturating_sub(2));
                let y0 = (y.floor() as usize).min(h.saturating_sub(2));
                let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
                let (fx, fy) = (x - x0 as f64, y - y0 as f64);
                [
                    (y0 * w + x0, (1.0 - fx) * (1.0 - fy)),
                    (y0 * w + x1, fx * (1.0 - fy)),
                    (y1 * w + x0, (1.0 - fx) * fy),
                    (y1 * w + x1, fx * fy),
                ]
            }
        })
        .collect();
    let mv = map.values();
    let mut out = vec![0.0; coords.len() * c];
    for (i, (t, co)) in taps.iter().zip(coords).enumerate() {
        if co.is_none() {
            continue;
        }
        // nested lerps reproduce constant maps exactly
        let (fx, fy) = (t[1].1 + t[3].1, t[2].1 + t[3].1);
        let row = &mut out[i * c..(i + 1) * c];
        for j in 0..c {
            let [a, b, d, e] = t.map(|(p, _)| mv[p * c + j]);
            let top = a + fx * (b - a);
            let bottom = d + fx * (e - d);
            row[j] = top + fy * (bottom - top);
        }
    }
    let total = map.len();
    DualArray::custom(&[map], vec![coords.len(), c], out, move |g, _| {
        let mut gm = vec![0.0; total];
        for (i, t) in taps.iter().enumerate() {
            for &(p, wt) in t {
                if wt != 0.0 {
                    for j in 0..c {
                        gm[p * c + j] += wt * g[i * c + j];
                    }
                }
            }
        }
        vec![Some(gm)]
    })
}

/// Two-layer strided encoder: 3x3 stride-2 convolutions with an ELU between.
#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub conv1: Linear,
    pub conv2: Linear,
}

impl EncoderParams {
    pub fn init(rng: &mut impl Rng, channels: usize) -> Self {
        Self {
            conv1: Linear::init(rng, 9 * 3, channels),
            conv2: Linear::init(rng, 9 * channels, channels),
        }
    }

    pub fn channels(&self) -> usize {
        self.conv2.fan_out()
    }
}

impl ParamSet for EncoderParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &DualArray)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
    }

    fn map(&self, prefix: &str, f: &mut dyn FnMut(&str, &DualArray) -> DualArray) -> Self {
        Self {
            conv1: self.conv1.map(&join(prefix, "conv1"), f),
            conv2: self.conv2.map(&join(prefix, "conv2"), f),
        }
    }
}

/// 3x3, stride 2, zero padding 1 over `[H, W, Cin]`, as im2col + matmul.
fn conv2d_s2(x: &DualArray, layer: &Linear) -> Result<DualArray> {
    let (h, w, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if layer.fan_in() != 9 * cin {
        return Err(Error::Shape {
            op: "conv2d",
            lhs: x.shape().to_vec(),
            rhs: layer.weight.shape().to_vec(),
        });
    }
    let (ho, wo) = ((h - 1) / 2 + 1, (w - 1) / 2 + 1);
    let mut idx = Vec::with_capacity(ho * wo * 9);
    for oy in 0..ho {
        for ox in 0..wo {
            for ky in 0..3 {
                for kx in 0..3 {
                    let (iy, ix) = ((2 * oy + ky) as isize - 1, (2 * ox + kx) as isize - 1);
                    let inside = iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w;
                    idx.push(inside.then(|| (iy as usize * w + ix as usize) as u32));
                }
            }
        }
    }
    let cols = gather_rows_padded(&x.reshape(vec![h * w, cin])?, idx, 9)?;
    layer.forward(&cols)?.reshape(vec![ho, wo, layer.fan_out()])
}

/// Encodes an `[H, W, 3]` image in `[0, 1]` into an `H/4 x W/4 x C` map.
pub fn extract_features(image: &DualArray, params: &EncoderParams) -> Result<FeatureMap2D> {
    if image.rank() != 3 || image.shape()[2] != 3 {
        return Err(Error::invalid(format!(
            "expected [H, W, 3] image, got {:?}",
            image.shape()
        )));
    }
    if image.shape()[0] < 8 || image.shape()[1] < 8 {
        return Err(Error::invalid(format!(
            "image {}x{} is smaller than 8x8",
            image.shape()[1],
            image.shape()[0]
        )));
    }
    let h1 = conv2d_s2(image, &params.conv1)?.elu()?;
    let h2 = conv2d_s2(&h1, &params.conv2)?;
    FeatureMap2D::new(h2, 4.0)
}

/// Grid of per-node feature vectors over a bounding box, possibly sparse.
#[derive(Debug, Clone)]
pub struct FeatureVolume {
    pub bbox: BoundingBox,
    pub resolution: usize,
    /// Flat node ids (`(i * R + j) * R + k`, `i` along x) of stored rows.
    pub cells: Rc<Vec<usize>>,
    lookup: Rc<Vec<u32>>,
    /// `[cells.len(), channels]`
    pub values: DualArray,
    /// Validity per stored row; invalid rows hold zeros.
    pub mask: Rc<Vec<bool>>,
}

impl FeatureVolume {
    pub fn new(
        bbox: BoundingBox,
        resolution: usize,
        cells: Vec<usize>,
        values: DualArray,
        mask: Vec<bool>,
    ) -> Result<Self> {
        if resolution < 2 {
            return Err(Error::invalid("volume resolution must be at least 2"));
        }
        let total = resolution.pow(3);
        if values.rank() != 2 || values.shape()[0] != cells.len() || mask.len() != cells.len() {
            return Err(Error::invalid("volume values/mask do not match cell list"));
        }
        let mut lookup = vec![0u32; total];
        for (row, &c) in cells.iter().enumerate() {
            if c >= total || lookup[c] != 0 {
                return Err(Error::invalid(format!("bad or duplicate cell id {c}")));
            }
            lookup[c] = row as u32 + 1;
        }
        Ok(Self {
            bbox,
            resolution,
            cells: Rc::new(cells),
            lookup: Rc::new(lookup),
            values,
            mask: Rc::new(mask),
        })
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn is_dense(&self) -> bool {
        self.cells.len() == self.resolution.pow(3)
    }

    pub fn cell_id(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.resolution + j) * self.resolution + k
    }

    /// Stored row of a node, if any.
    pub fn row(&self, cell: usize) -> Option<usize> {
        match self.lookup.get(cell) {
            Some(&r) if r > 0 => Some(r as usize - 1),
            _ => None,
        }
    }

    pub fn valid_row(&self, cell: usize) -> Option<usize> {
        self.row(cell).filter(|&r| self.mask[r])
    }

    /// Feature at a node, or `None` when absent.
    pub fn node_feature(&self, i: usize, j: usize, k: usize) -> Option<&[f64]> {
        let c = self.channels();
        self.row(self.cell_id(i, j, k))
            .map(|r| &self.values.values()[r * c..(r + 1) * c])
    }

    /// Returns `[R, R, R, C]` values with absent cells zero-filled.
    pub fn dense_values(&self) -> Vec<f64> {
        let c = self.channels();
        let mut out = vec![0.0; self.resolution.pow(3) * c];
        for (row, &cell) in self.cells.iter().enumerate() {
            out[cell * c..(cell + 1) * c].copy_from_slice(&self.values.values()[row * c..(row + 1) * c]);
        }
        out
    }
}

pub fn node_position(bbox: &BoundingBox, resolution: usize, cell: usize) -> Vec3 {
    let r = resolution;
    let ijk = [cell / (r * r), (cell / r) % r, cell % r];
    let e = bbox.extent();
    [0, 1, 2].map(|a| bbox.min[a] + e[a] * ijk[a] as f64 / (r - 1) as f64)
}

/// All node ids within Chebyshev distance `radius` of any node in `cells`,
/// sorted.
pub fn dilate_cells(resolution: usize, cells: &[usize], radius: usize) -> Vec<usize> {
    let r = resolution as isize;
    let rad = radius as isize;
    let mut hit = vec![false; resolution.pow(3)];
    for &c in cells {
        let (i, j, k) = (
            (c / (resolution * resolution)) as isize,
            ((c / resolution) % resolution) as isize,
            (c % resolution) as isize,
        );
        for di in -rad..=rad {
            for dj in -rad..=rad {
                for dk in -rad..=rad {
                    let (a, b, d) = (i + di, j + dj, k + dk);
                    if a >= 0 && b >= 0 && d >= 0 && a < r && b < r && d < r {
                        hit[((a * r + b) * r + d) as usize] = true;
                    }
                }
            }
        }
    }
    hit.iter().enumerate().filter_map(|(i, &h)| h.then_some(i)).collect()
}

/// Per-row population variance and mean over the valid views:
/// output `[n, 2C]` as `concat(Var, Mean)`. Rows with fewer than two valid
/// views are zero and reported invalid.
pub fn masked_moments(per_view: &[DualArray], masks: &[Vec<bool>]) -> Result<(DualArray, Vec<bool>)> {
    let first = per_view
        .first()
        .ok_or_else(|| Error::invalid("masked_moments: no views"))?;
    let (n, c) = (first.shape()[0], first.shape()[1]);
    if per_view.iter().any(|v| v.shape() != first.shape())
        || masks.len() != per_view.len()
        || masks.iter().any(|m| m.len() != n)
    {
        return Err(Error::invalid("masked_moments: inconsistent view shapes"));
    }
    let views: Vec<Rc<Vec<f64>>> = per_view.iter().map(|v| v.data_rc()).collect();
    let counts: Vec<usize> = (0..n).map(|i| masks.iter().filter(|m| m[i]).count()).collect();
    let valid: Vec<bool> = counts.iter().map(|&k| k >= 2).collect();
    let mut out = vec![0.0; n * 2 * c];
    let mut means = vec![0.0; n * c];
    for i in 0..n {
        if !valid[i] {
            continue;
        }
        let k = counts[i] as f64;
        for j in 0..c {
            let mut s = 0.0;
            for (v, m) in views.iter().zip(masks) {
                if m[i] {
                    s += v[i * c + j];
                }
            }
            let mean = s / k;
            let mut var = 0.0;
            for (v, m) in views.iter().zip(masks) {
                if m[i] {
                    let d = v[i * c + j] - mean;
                    var += d * d;
                }
            }
            out[i * 2 * c + j] = var / k;
            out[i * 2 * c + c + j] = mean;
            means[i * c + j] = mean;
        }
    }
    let masks = masks.to_vec();
    let refs: Vec<&DualArray> = per_view.iter().collect();
    let moments = DualArray::custom(&refs, vec![n, 2 * c], out, move |g, needs| {
        views
            .iter()
            .zip(&masks)
            .zip(needs)
            .map(|((v, m), &need)| {
                need.then(|| {
                    let mut gv = vec![0.0; n * c];
                    for i in 0..n {
                        if !(m[i] && counts[i] >= 2) {
                            continue;
                        }
                        let k = counts[i] as f64;
                        for j in 0..c {
                            let d = v[i * c + j] - means[i * c + j];
                            gv[i * c + j] = g[i * 2 * c + j] * 2.0 * d / k + g[i * 2 * c + c + j] / k;
                        }
                    }
                    gv
                })
            })
            .collect()
    })?;
    Ok((moments, valid))
}

/// Variance/mean cost volume over `cells` (all nodes when `None`).
pub fn build_cost_volume(
    bbox: &BoundingBox,
    resolution: usize,
    sources: &[(&Camera, &FeatureMap2D)],
    cells: Option<Vec<usize>>,
) -> Result<FeatureVolume> {
    if sources.len() < 2 {
        return Err(Error::invalid(format!(
            "cost volume needs at least 2 source views, got {}",
            sources.len()
        )));
    }
    if resolution < 2 {
        return Err(Error::invalid("volume resolution must be at least 2"));
    }
    let cells = cells.unwrap_or_else(|| (0..resolution.pow(3)).collect());
    let positions: Vec<Vec3> = cells.iter().map(|&c| node_position(bbox, resolution, c)).collect();
    let mut gathered = Vec::with_capacity(sources.len());
    let mut masks = Vec::with_capacity(sources.len());
    for (cam, fmap) in sources {
        let coords: Vec<Option<[f64; 2]>> = positions
            .iter()
            .map(|&p| {
                let pr = cam.project(p);
                pr.valid.then(|| fmap.pixel_to_grid(pr.pixel))
            })
            .collect();
        masks.push(coords.iter().map(Option::is_some).collect::<Vec<bool>>());
        gathered.push(bilinear_gather(&fmap.values, &coords)?);
    }
    let (values, mask) = masked_moments(&gathered, &masks)?;
    FeatureVolume::new(*bbox, resolution, cells, values, mask)
}

/// Stand-in regulariser: two dense 3x3x3 convolutions (ELU between)
/// mapping `2C -> C` channels.
#[derive(Debug, Clone)]
pub struct PsiParams {
    pub conv1: Linear,
    pub conv2: Linear,
}

impl PsiParams {
    pub fn init(rng: &mut impl Rng, channels: usize) -> Self {
        Self {
            conv1: Linear::init(rng, 27 * 2 * channels, channels),
            conv2: Linear::init(rng, 27 * channels, channels),
        }
    }

    pub fn channels(&self) -> usize {
        self.conv2.fan_out()
    }
}

impl ParamSet for PsiParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &DualArray)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
    }

    fn map(&self, prefix: &str, f: &mut dyn FnMut(&str, &DualArray) -> DualArray) -> Self {
        Self {
            conv1: self.conv1.map(&join(prefix, "conv1"), f),
            conv2: self.conv2.map(&join(prefix, "conv2"), f),
        }
    }
}

/// One masked 3x3x3 convolution evaluated at `out_cells`.
fn conv3d_masked(
    input: &FeatureVolume,
    layer: &Linear,
    out_cells: &[usize],
    out_mask: &[bool],
    activate: bool,
) -> Result<DualArray> {
    let r = input.resolution as isize;
    let mut idx = Vec::with_capacity(out_cells.len() * 27);
    for &c in out_cells {
        let n = input.resolution;
        let (i, j, k) = ((c / (n * n)) as isize, ((c / n) % n) as isize, (c % n) as isize);
        for di in -1..=1 {
            for dj in -1..=1 {
                for dk in -1..=1 {
                    let (a, b, d) = (i + di, j + dj, k + dk);
                    let inside = a >= 0 && b >= 0 && d >= 0 && a < r && b < r && d < r;
                    idx.push(
                        inside
                            .then(|| input.valid_row(((a * r + b) * r + d) as usize))
                            .flatten()
                            .map(|row| row as u32),
                    );
                }
            }
        }
    }
    let cols = gather_rows_padded(&input.values, idx, 27)?;
    let mut y = layer.forward(&cols)?;
    if activate {
        y = y.elu()?;
    }
    let keep: Vec<f64> = out_mask.iter().map(|&m| m as u8 as f64).collect();
    y.mul(&DualArray::from_parts(vec![out_cells.len(), 1], keep))
}

/// Applies the regulariser. Outputs are produced at `out_cells` (every
/// stored cell of `cost` when `None`); the input must store the 2-ring
/// around them for the result to match a dense evaluation.
pub fn regularize_volume(cost: &FeatureVolume, psi: &PsiParams, out_cells: Option<&[usize]>) -> Result<FeatureVolume> {
    if psi.conv1.fan_in() != 27 * cost.channels() {
        return Err(Error::Shape {
            op: "regularize_volume",
            lhs: vec![cost.channels()],
            rhs: vec![psi.conv1.fan_in() / 27],
        });
    }
    let mask_at = |cells: &[usize]| -> Vec<bool> { cells.iter().map(|&c| cost.valid_row(c).is_some()).collect() };
    let (mid_cells, final_cells) = match out_cells {
        Some(out) => (dilate_cells(cost.resolution, out, 1), out.to_vec()),
        None => (cost.cells.to_vec(), cost.cells.to_vec()),
    };
    let mid_mask = mask_at(&mid_cells);
    let hidden = conv3d_masked(cost, &psi.conv1, &mid_cells, &mid_mask, true)?;
    let hidden = FeatureVolume::new(cost.bbox, cost.resolution, mid_cells, hidden, mid_mask)?;
    let final_mask = mask_at(&final_cells);
    let out = conv3d_masked(&hidden, &psi.conv2, &final_cells, &final_mask, false)?;
    FeatureVolume::new(cost.bbox, cost.resolution, final_cells, out, final_mask)
}

/// Fractional node coordinates of `p`, or `None` outside the box.
fn grid_coords(bbox: &BoundingBox, resolution: usize, p: Vec3) -> Option<[f64; 3]> {
    if !bbox.contains(p) {
        return None;
    }
    let e = bbox.extent();
    Some([0, 1, 2].map(|a| (p[a] - bbox.min[a]) / e[a] * (resolution - 1) as f64))
}

/// Trilinear weights over the valid corner rows around `p`, renormalised to
/// sum to one. Empty when `p` is outside or no weighted corner is valid.
pub fn trilinear_taps(volume: &FeatureVolume, p: Vec3) -> Vec<(usize, f64)> {
    let Some(g) = grid_coords(&volume.bbox, volume.resolution, p) else {
        return Vec::new();
    };
    let n = volume.resolution;
    let base = g.map(|v| (v.floor() as usize).min(n - 2));
    let frac = [0, 1, 2].map(|a| g[a] - base[a] as f64);
    let mut taps = Vec::with_capacity(8);
    let mut total = 0.0;
    for corner in 0..8 {
        let off = [(corner >> 2) & 1, (corner >> 1) & 1, corner & 1];
        let mut w = 1.0;
        for a in 0..3 {
            w *= if off[a] == 1 { frac[a] } else { 1.0 - frac[a] };
        }
        if w == 0.0 {
            continue;
        }
        let cell = volume.cell_id(base[0] + off[0], base[1] + off[1], base[2] + off[2]);
        if let Some(row) = volume.valid_row(cell) {
            taps.push((row, w));
            total += w;
        }
    }
    if total <= 0.0 {
        return Vec::new();
    }
    taps.iter_mut().for_each(|t| t.1 /= total);
    taps
}

/// Batched trilinear lookup: `[N, C]` features and per-point validity.
pub fn trilinear_gather(volume: &FeatureVolume, points: &[Vec3]) -> Result<(DualArray, Vec<bool>)> {
    if points.is_empty() {
        return Err(Error::invalid("trilinear_gather: no points"));
    }
    let c = volume.channels();
    let taps: Vec<Vec<(usize, f64)>> = points.iter().map(|&p| trilinear_taps(volume, p)).collect();
    let valid = taps.iter().map(|t| !t.is_empty()).collect();
    let vv = volume.values.values();
    let mut out = vec![0.0; points.len() * c];
    for (i, t) in taps.iter().enumerate() {
        for &(row, w) in t {
            for j in 0..c {
                out[i * c + j] += w * vv[row * c + j];
            }
        }
    }
    let total = volume.values.len();
    let feats = DualArray::custom(&[&volume.values], vec![points.len(), c], out, move |g, _| {
        let mut gv = vec![0.0; total];
        for (i, t) in taps.iter().enumerate() {
            for &(row, w) in t {
                for j in 0..c {
                    gv[row * c + j] += w * g[i * c + j];
                }
            }
        }
        vec![Some(gv)]
    })?;
    Ok((feats, valid))
}

/// Single-point form of [`trilinear_gather`].
pub fn trilinear_sample(volume: &FeatureVolume, p: Vec3) -> (Vec<f64>, bool) {
    let c = volume.channels();
    let taps = trilinear_taps(volume, p);
    let mut f = vec![0.0; c];
    for &(row, w) in &taps {
        for j in 0..c {
            f[j] += w * volume.values.values()[row * c + j];
        }
    }
    (f, !taps.is_empty())
}
