//! SDF volume rendering: discrete opacity, transmittance compositing,
//! hierarchical importance sampling and the batched ray renderer.
//!
//! A ray with samples `t_0 < ... < t_{N-1}` has `N - 1` intervals. Interval
//! `j` gets opacity from `sdf(t_j)` and `sdf(t_{j+1})`, colour from sample
//! `j`, and depth from the camera-frame `z` of its midpoint.

use rand::Rng;

use crate::diff::{sigmoid, DualArray};
use crate::error::{Error, Result};
use crate::featvol::gather_rows_padded;
use crate::geometry::{dot, BoundingBox, Camera, Ray, Vec3};
use crate::model::{blend_colors, query_samples, ModelConfig, ModelParams, SceneContext};

/// Opacity of one interval, `max((σ(s a) − σ(s b)) / σ(s a), 0)`.
pub fn sdf_to_alpha(sdf_j: f64, sdf_j1: f64, s: f64) -> Result<f64> {
    if !(s > 0.0) {
        return Err(Error::Domain {
            op: "sdf_to_alpha",
            detail: format!("sharpness must be positive, got {s}"),
        });
    }
    Ok(alpha_of(s * sdf_j, s * sdf_j1))
}

fn alpha_of(a: f64, b: f64) -> f64 {
    let (sa, sb) = (sigmoid(a), sigmoid(b));
    ((sa - sb) / sa).max(0.0)
}

/// Batched opacities: `sdf: [B, N]`, `s: [1]` to `[B, N - 1]`.
pub fn sdf_to_alpha_batch(sdf: &DualArray, s: &DualArray) -> Result<DualArray> {
    if sdf.rank() != 2 || sdf.shape()[1] < 2 || s.len() != 1 {
        return Err(Error::invalid("sdf_to_alpha_batch expects [B, N >= 2] and a scalar"));
    }
    let sv = s.item();
    if !(sv > 0.0) {
        return Err(Error::Domain {
            op: "sdf_to_alpha",
            detail: format!("sharpness must be positive, got {sv}"),
        });
    }
    let (b, n) = (sdf.shape()[0], sdf.shape()[1]);
    let x = sdf.data_rc();
    let mut out = vec![0.0; b * (n - 1)];
    for r in 0..b {
        for j in 0..n - 1 {
            out[r * (n - 1) + j] = alpha_of(sv * x[r * n + j], sv * x[r * n + j + 1]);
        }
    }
    let alpha = out.clone();
    DualArray::custom(&[sdf, s], vec![b, n - 1], out, move |g, needs| {
        let mut gx = vec![0.0; b * n];
        let mut gs = 0.0;
        for r in 0..b {
            for j in 0..n - 1 {
                let k = r * (n - 1) + j;
                if alpha[k] <= 0.0 {
                    continue;
                }
                let (x0, x1) = (x[r * n + j], x[r * n + j + 1]);
                let ratio = 1.0 - alpha[k];
                let da = ratio * (1.0 - sigmoid(sv * x0));
                let db = -ratio * (1.0 - sigmoid(sv * x1));
                gx[r * n + j] += g[k] * da * sv;
                gx[r * n + j + 1] += g[k] * db * sv;
                gs += g[k] * (da * x0 + db * x1);
            }
        }
        vec![needs[0].then_some(gx), needs[1].then(|| vec![gs])]
    })
}

/// Compositing weights `T_j α_j` for `alpha: [B, N]`.
pub fn transmittance_weights(alpha: &DualArray) -> Result<DualArray> {
    if alpha.rank() != 2 {
        return Err(Error::invalid("transmittance_weights expects [B, N]"));
    }
    let (b, n) = (alpha.shape()[0], alpha.shape()[1]);
    let a = alpha.data_rc();
    let mut trans = vec![0.0; b * n];
    let mut out = vec![0.0; b * n];
    for r in 0..b {
        let mut t = 1.0;
        for j in 0..n {
            trans[r * n + j] = t;
            out[r * n + j] = t * a[r * n + j];
            t *= 1.0 - a[r * n + j];
        }
    }
    DualArray::custom(&[alpha], vec![b, n], out, move |g, _| {
        let mut ga = vec![0.0; b * n];
        for r in 0..b {
            // tail = sum_{k>j} g_k α_k prod_{j<i<k} (1 − α_i)
            let mut tail = 0.0;
            for j in (0..n).rev() {
                let i = r * n + j;
                ga[i] = trans[i] * (g[i] - tail);
                tail = g[i] * a[i] + (1.0 - a[i]) * tail;
            }
        }
        vec![Some(ga)]
    })
}

#[derive(Debug, Clone)]
pub struct Composite {
    /// `[B, k]`
    pub rendered: DualArray,
    /// `[B, N]`
    pub weights: DualArray,
    /// `[B]`
    pub acc: DualArray,
}

/// Composites `quantity: [B, N, k]` with opacities `alpha: [B, N]`.
pub fn composite(alpha: &DualArray, quantity: &DualArray) -> Result<Composite> {
    if quantity.rank() != 3 || quantity.shape()[..2] != alpha.shape()[..] {
        return Err(Error::Shape {
            op: "composite",
            lhs: alpha.shape().to_vec(),
            rhs: quantity.shape().to_vec(),
        });
    }
    let (b, n) = (alpha.shape()[0], alpha.shape()[1]);
    let weights = transmittance_weights(alpha)?;
    let rendered = weights.reshape(vec![b, n, 1])?.mul(quantity)?.sum_axis(1)?;
    let acc = weights.sum_axis(1)?;
    Ok(Composite { rendered, weights, acc })
}

/// Draws `n_fine` sorted distances from the piecewise-constant density over
/// the intervals of `t` (one weight per interval, floored at `1e-5`).
pub fn importance_resample(
    t: &[f64],
    interval_weights: &[f64],
    n_fine: usize,
    stratified: bool,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    if n_fine < 1 {
        return Err(Error::invalid("n_fine must be at least 1"));
    }
    if t.len() < 2 || interval_weights.len() != t.len() - 1 {
        return Err(Error::invalid("need one weight per interval of at least two samples"));
    }
    if interval_weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::invalid("interval weights must be non-negative"));
    }
    let pdf: Vec<f64> = interval_weights.iter().map(|w| w + 1e-5).collect();
    let total: f64 = pdf.iter().sum();
    let mut cdf = Vec::with_capacity(pdf.len() + 1);
    cdf.push(0.0);
    let mut acc = 0.0;
    for p in &pdf {
        acc += p / total;
        cdf.push(acc);
    }
    *cdf.last_mut().expect("non-empty") = 1.0;
    let mut out: Vec<f64> = (0..n_fine)
        .map(|i| {
            let u = if stratified {
                (i as f64 + rng.random::<f64>()) / n_fine as f64
            } else {
                (i as f64 + 0.5) / n_fine as f64
            };
            let bin = cdf.partition_point(|&c| c <= u).clamp(1, pdf.len()) - 1;
            let frac = ((u - cdf[bin]) / (cdf[bin + 1] - cdf[bin])).clamp(0.0, 1.0);
            t[bin] + frac * (t[bin + 1] - t[bin])
        })
        .collect();
    out.sort_by(f64::total_cmp);
    Ok(out)
}

/// Sorted union of two sample sets.
pub fn merge_samples(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = a.iter().chain(b).copied().collect();
    out.sort_by(f64::total_cmp);
    out
}

/// Depth quantity of an interval: camera-frame `z` of its midpoint.
fn interval_depths(ray: &Ray, t: &[f64], forward: Vec3) -> Vec<f64> {
    let cos = dot(ray.direction, forward);
    t.windows(2).map(|w| 0.5 * (w[0] + w[1]) * cos).collect()
}

/// Result of the analytic-SDF renderer.
#[derive(Debug, Clone)]
pub struct OracleRender {
    pub depth: f64,
    pub acc: f64,
    pub weights: Vec<f64>,
}

/// Renders one ray through an analytic SDF with `n` evenly spaced samples
/// over `[near, far]`, using the same opacity and compositing kernels as
/// the learned renderer. Depth is camera-frame `z` along `forward`.
pub fn render_oracle(ray: &Ray, sdf: impl Fn(Vec3) -> f64, n: usize, s: f64, forward: Vec3) -> Result<OracleRender> {
    if n < 2 {
        return Err(Error::invalid("oracle rendering needs at least 2 samples"));
    }
    let t: Vec<f64> = (0..n)
        .map(|i| ray.near + (ray.far - ray.near) * i as f64 / (n - 1) as f64)
        .collect();
    let vals: Vec<f64> = t.iter().map(|&ti| sdf(ray.at(ti))).collect();
    let sdf_arr = DualArray::from_parts(vec![1, n], vals);
    let alpha = sdf_to_alpha_batch(&sdf_arr, &DualArray::scalar(s))?;
    let z = DualArray::from_parts(vec![1, n - 1, 1], interval_depths(ray, &t, forward));
    let c = composite(&alpha, &z)?;
    Ok(OracleRender {
        depth: c.rendered.item(),
        acc: c.acc.item(),
        weights: c.weights.to_vec(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderConfig {
    pub n_coarse: usize,
    pub n_fine: usize,
    /// Jitter coarse and fine samples (training).
    pub stratified: bool,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            n_coarse: 16,
            n_fine: 16,
            stratified: false,
        }
    }
}

/// Rendered quantities for a batch of `B` rays. Rays that miss the
/// bounding box render as zero colour, zero depth and zero opacity.
#[derive(Debug, Clone)]
pub struct RenderOutput {
    /// `[B, 3]`
    pub color: DualArray,
    /// `[B, 1]`
    pub depth: DualArray,
    /// `[B, 1]`
    pub acc: DualArray,
    /// Fine-pass signed distances of the rays that hit, `[M, 1]`.
    pub sdf: DualArray,
    /// Clipped rays that hit the box, with their index in the batch.
    pub hits: Vec<(usize, Ray)>,
    /// Final per-ray sample distances, parallel to `hits`.
    pub samples: Vec<Vec<f64>>,
}

/// Restricts each ray to its overlap with `bbox`.
pub fn clip_to_box(ray: &Ray, bbox: &BoundingBox) -> Option<Ray> {
    let (t0, t1) = bbox.intersect(ray.origin, ray.direction)?;
    let (near, far) = (t0.max(ray.near), t1.min(ray.far));
    (far - near > 1e-9).then(|| Ray { near, far, ..*ray })
}

/// Coarse pass on constants, importance resampling, then the full fine
/// pass. `ctx` may be taped; `coarse_ctx`/`coarse_params` must not be.
#[allow(clippy::too_many_arguments)]
pub fn render_rays(
    params: &ModelParams,
    coarse_params: &ModelParams,
    config: &ModelConfig,
    ctx: &SceneContext,
    coarse_ctx: &SceneContext,
    target: &Camera,
    rays: &[Ray],
    rcfg: &RenderConfig,
    rng: &mut impl Rng,
) -> Result<RenderOutput> {
    let hits: Vec<(usize, Ray)> = rays
        .iter()
        .enumerate()
        .filter_map(|(i, r)| clip_to_box(r, ctx.bbox()).map(|c| (i, c)))
        .collect();
    let b = rays.len();
    if hits.is_empty() {
        return Ok(RenderOutput {
            color: DualArray::zeros(vec![b, 3]),
            depth: DualArray::zeros(vec![b, 1]),
            acc: DualArray::zeros(vec![b, 1]),
            sdf: DualArray::zeros(vec![1, 1]),
            hits,
            samples: Vec::new(),
        });
    }
    let nc = rcfg.n_coarse;
    let coarse_t: Vec<Vec<f64>> = hits
        .iter()
        .map(|(_, r)| crate::geometry::sample_coarse(r, nc, rcfg.stratified, rng))
        .collect::<Result<_>>()?;
    let samples: Vec<Vec<f64>> = if rcfg.n_fine == 0 {
        coarse_t
    } else {
        let pts: Vec<Vec3> = hits
            .iter()
            .zip(&coarse_t)
            .flat_map(|((_, r), t)| t.iter().map(|&ti| r.at(ti)))
            .collect();
        let coarse = query_samples(coarse_params, config, coarse_ctx, &pts, nc)?;
        let sdf = coarse.sdf.reshape(vec![hits.len(), nc])?;
        let alpha = sdf_to_alpha_batch(&sdf, &coarse_params.sharpness()?)?;
        let w = transmittance_weights(&alpha)?;
        coarse_t
            .iter()
            .zip(w.values().chunks(nc - 1))
            .map(|(t, w)| {
                let fine = importance_resample(t, w, rcfg.n_fine, rcfg.stratified, rng)?;
                Ok(merge_samples(t, &fine))
            })
            .collect::<Result<_>>()?
    };
    let n = samples[0].len();
    let h = hits.len();
    let mut points = Vec::with_capacity(h * n);
    let mut dirs = Vec::with_capacity(h);
    let mut z = Vec::with_capacity(h * (n - 1));
    let forward = target.forward();
    for ((_, r), t) in hits.iter().zip(&samples) {
        points.extend(t.iter().map(|&ti| r.at(ti)));
        dirs.push(r.direction);
        z.extend(interval_depths(r, t, forward));
    }
    let feats = query_samples(params, config, ctx, &points, n)?;
    let alpha = sdf_to_alpha_batch(&feats.sdf.reshape(vec![h, n])?, &params.sharpness()?)?;
    let colors = blend_colors(params, ctx, &feats, &points, &dirs, target)?
        .reshape(vec![h, n, 3])?
        .narrow(1, 0, n - 1)?;
    let c = composite(&alpha, &colors)?;
    let z = DualArray::from_parts(vec![h, n - 1], z);
    let depth = c.weights.mul(&z)?.sum_axis(1)?;
    // scatter hit rows back into batch order
    let mut slot: Vec<Option<u32>> = vec![None; b];
    for (row, (i, _)) in hits.iter().enumerate() {
        slot[*i] = Some(row as u32);
    }
    Ok(RenderOutput {
        color: gather_rows_padded(&c.rendered, slot.clone(), 1)?,
        depth: gather_rows_padded(&depth.reshape(vec![h, 1])?, slot.clone(), 1)?,
        acc: gather_rows_padded(&c.acc.reshape(vec![h, 1])?, slot, 1)?,
        sdf: feats.sdf,
        hits,
        samples,
    })
}

/// Renders a full view without gradients, `chunk` rays at a time. Returns
/// `[H*W*3]` colours, `[H*W]` depths and `[H*W]` opacities.
pub fn render_view(
    params: &ModelParams,
    config: &ModelConfig,
    ctx: &SceneContext,
    target: &Camera,
    rcfg: &RenderConfig,
    chunk: usize,
    rng: &mut impl Rng,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let params = crate::params::ParamSet::detached(params);
    let ctx = ctx.detached();
    let mut rays = Vec::with_capacity(target.width * target.height);
    for y in 0..target.height {
        for x in 0..target.width {
            rays.push(target.pixel_to_ray([x as f64, y as f64], 0.0, f64::MAX)?);
        }
    }
    let (mut color, mut depth, mut acc) = (Vec::new(), Vec::new(), Vec::new());
    for part in rays.chunks(chunk.max(1)) {
        let out = render_rays(&params, &params, config, &ctx, &ctx, target, part, rcfg, rng)?;
        color.extend_from_slice(out.color.values());
        depth.extend_from_slice(out.depth.values());
        acc.extend_from_slice(out.acc.values());
    }
    Ok((color, depth, acc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn alpha_cases() {
        assert_eq!(sdf_to_alpha(0.4, 0.4, 10.0).unwrap(), 0.0);
        assert!(sdf_to_alpha(0.1, -0.1, 1e4).unwrap() > 0.999);
        assert_eq!(sdf_to_alpha(0.1, 0.3, 10.0).unwrap(), 0.0);
        assert!(sdf_to_alpha(0.1, 0.0, 0.0).is_err());
    }

    #[test]
    fn composite_cases() {
        let q = DualArray::new(vec![1, 3, 1], vec![5.0, 7.0, 9.0]).unwrap();
        let c = composite(&DualArray::new(vec![1, 3], vec![1.0, 0.3, 0.8]).unwrap(), &q).unwrap();
        assert_eq!(c.rendered.values(), &[5.0]);
        assert_eq!(c.weights.values(), &[1.0, 0.0, 0.0]);
        let c = composite(&DualArray::zeros(vec![1, 3]), &q).unwrap();
        assert_eq!((c.rendered.item(), c.acc.item()), (0.0, 0.0));
        let q2 = DualArray::new(vec![1, 2, 1], vec![1.0, 1.0]).unwrap();
        let c = composite(&DualArray::new(vec![1, 2], vec![0.5, 1.0]).unwrap(), &q2).unwrap();
        assert_eq!(c.weights.values(), &[0.5, 0.5]);
        assert_eq!(c.acc.item(), 1.0);
    }

    #[test]
    fn weights_gradient_including_opaque_entries() {
        let a = DualArray::new(vec![2, 4], vec![0.2, 0.9, 0.4, 0.7, 0.5, 0.1, 0.3, 0.6]).unwrap();
        let w = DualArray::new(vec![2, 4], vec![1.0, -2.0, 0.5, 3.0, 0.7, 1.1, -0.4, 2.0]).unwrap();
        let e = grad_check(|x| transmittance_weights(x)?.mul(&w)?.sum(), &a, 1e-6).unwrap();
        assert!(e < 1e-6, "{e}");
    }

    #[test]
    fn alpha_gradient_in_sdf_and_sharpness() {
        let sdf = DualArray::new(vec![2, 4], vec![0.4, 0.2, 0.05, -0.1, 0.3, 0.1, -0.05, -0.2]).unwrap();
        let s = DualArray::scalar(6.0);
        let e = grad_check(|x| sdf_to_alpha_batch(x, &s)?.sum(), &sdf, 1e-6).unwrap();
        assert!(e < 1e-6, "{e}");
        let e = grad_check(|x| sdf_to_alpha_batch(&sdf, x)?.square()?.sum(), &s, 1e-6).unwrap();
        assert!(e < 1e-6, "{e}");
    }

    #[test]
    fn resample_concentrates_on_heavy_bin() {
        let t: Vec<f64> = (0..9).map(|i| i as f64).collect();
        let mut w = vec![0.0; 8];
        w[5] = 1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fine = importance_resample(&t, &w, 1000, true, &mut rng).unwrap();
        let inside = fine.iter().filter(|&&x| (5.0..=6.0).contains(&x)).count();
        assert!(inside >= 950, "{inside}");
        assert!(fine.windows(2).all(|p| p[0] <= p[1]));
        assert!(importance_resample(&t, &w, 0, true, &mut rng).is_err());
    }

    #[test]
    fn oracle_depth_on_axis() {
        let cam = Camera::look_at([0.0, 0.0, 4.0], [0.0; 3], [0.0, 1.0, 0.0], 80.0, 65, 65).unwrap();
        let ray = cam.pixel_to_ray([32.0, 32.0], 0.0, f64::MAX).unwrap();
        let ray = clip_to_box(&ray, &BoundingBox::cube(1.25)).unwrap();
        let out = render_oracle(&ray, |p| crate::geometry::norm(p) - 1.0, 128, 200.0, cam.forward()).unwrap();
        assert!((out.depth - 3.0).abs() < 0.01, "{}", out.depth);
        let miss = render_oracle(&ray, |_| 5.0, 128, 200.0, cam.forward()).unwrap();
        assert!(miss.acc < 1e-12 && miss.depth.abs() < 1e-12);
    }
}
