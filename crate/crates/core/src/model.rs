//! The full reconstruction network: parameters, checkpoint naming, the
//! per-scene context (features and regularised volume), and the
//! point-to-SDF / point-to-colour pipeline shared by training, rendering
//! and meshing.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diff::checkpoint::{self, NamedArray};
use crate::diff::DualArray;
use crate::epiattn::{self, direction_features, embedding_width, EpipolarParams, Mlp, RayParams};
use crate::error::{Error, Result};
use crate::featvol::{
    self, build_cost_volume, dilate_cells, extract_features, regularize_volume, EncoderParams, FeatureMap2D,
    FeatureVolume, PsiParams,
};
use crate::geometry::{self, epipolar_gather, BoundingBox, Camera, Ray, Vec3};
use crate::params::ParamSet;

/// Architecture hyperparameters. Checkpoints only load into a model built
/// with the same values.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub channels: usize,
    pub heads: usize,
    pub ray_heads: usize,
    pub embed_freqs: usize,
    pub volume_resolution: usize,
    pub geometry_hidden: usize,
    pub weight_hidden: usize,
    /// Adds the attention input back onto the ray-stage output.
    pub residual: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 16,
            heads: 4,
            ray_heads: 1,
            embed_freqs: 4,
            volume_resolution: 32,
            geometry_hidden: 64,
            weight_hidden: 32,
            residual: false,
        }
    }
}

impl ModelConfig {
    pub fn ray_width(&self) -> usize {
        self.channels + embedding_width(self.embed_freqs)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.heads == 0 || self.channels % self.heads != 0 {
            return Err(Error::invalid(format!(
                "channels {} not divisible by heads {}",
                self.channels, self.heads
            )));
        }
        if self.ray_heads == 0 || self.ray_width() % self.ray_heads != 0 {
            return Err(Error::invalid(format!(
                "ray width {} not divisible by ray_heads {}",
                self.ray_width(),
                self.ray_heads
            )));
        }
        if self.volume_resolution < 2 || self.geometry_hidden == 0 || self.weight_hidden == 0 {
            return Err(Error::invalid("volume resolution and decoder widths must be positive"));
        }
        Ok(())
    }
}

/// Initial value of the sharpness parameter `v`, with `s = exp(10 v)`.
pub const SHARPNESS_INIT: f64 = 0.3;
/// Initial geometry-decoder output bias (empty scene).
pub const SDF_BIAS_INIT: f64 = 0.3;
/// Scale applied to the Glorot draw of the SDF output layer.
pub const SDF_OUT_SCALE: f64 = 0.01;

#[derive(Debug, Clone)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    pub psi: PsiParams,
    pub epipolar: EpipolarParams,
    pub ray: RayParams,
    pub geometry: Mlp,
    pub blend: Mlp,
    /// `[1]`, log-sharpness scaled by 1/10.
    pub sharpness: DualArray,
}

impl ModelParams {
    pub fn init(config: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let width = config.ray_width();
        let mut geometry = Mlp::init(rng, width, config.geometry_hidden, 1);
        // shrunken output weights keep the initial SDF near SDF_BIAS_INIT
        let w = &geometry.out.weight;
        geometry.out.weight = DualArray::from_parts(
            w.shape().to_vec(),
            w.values().iter().map(|v| v * SDF_OUT_SCALE).collect(),
        );
        geometry.out.bias = DualArray::vector(vec![SDF_BIAS_INIT]);
        Ok(Self {
            encoder: EncoderParams::init(rng, c),
            psi: PsiParams::init(rng, c),
            epipolar: EpipolarParams::init(rng, c),
            ray: RayParams::init(rng, width),
            geometry,
            blend: Mlp::init(rng, width + c + 4, config.weight_hidden, 1),
            sharpness: DualArray::vector(vec![SHARPNESS_INIT]),
        })
    }

    /// `s = exp(10 v)`.
    pub fn sharpness(&self) -> Result<DualArray> {
        self.sharpness.scale(10.0)?.exp()
    }

    pub fn sharpness_value(&self) -> f64 {
        (10.0 * self.sharpness.item()).exp()
    }

    pub fn to_named(&self) -> Vec<NamedArray> {
        self.named()
            .into_iter()
            .map(|(name, a)| NamedArray {
                name,
                shape: a.shape().to_vec(),
                values: a.to_vec(),
            })
            .collect()
    }

    /// Loads values into a model of `config`'s shape; the first missing,
    /// extra or misshapen record is reported by name.
    pub fn from_named(config: &ModelConfig, records: &[NamedArray]) -> Result<Self> {
        let template = Self::init(config, &mut ChaCha8Rng::seed_from_u64(0))?;
        let expected = template.named();
        for (i, (name, a)) in expected.iter().enumerate() {
            let Some(r) = records.get(i) else {
                return Err(Error::ParamMismatch {
                    name: name.clone(),
                    detail: "missing from checkpoint".into(),
                });
            };
            if &r.name != name {
                return Err(Error::ParamMismatch {
                    name: name.clone(),
                    detail: format!("checkpoint has `{}` in its place", r.name),
                });
            }
            if r.shape != a.shape() {
                return Err(Error::ParamMismatch {
                    name: name.clone(),
                    detail: format!("shape {:?} in checkpoint, model expects {:?}", r.shape, a.shape()),
                });
            }
        }
        if let Some(extra) = records.get(expected.len()) {
            return Err(Error::ParamMismatch {
                name: extra.name.clone(),
                detail: "not a parameter of this model".into(),
            });
        }
        let mut it = records.iter();
        Ok(template.map("", &mut |_, _| {
            let r = it.next().expect("validated above");
            DualArray::from_parts(r.shape.clone(), r.values.clone())
        }))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::write(path, &self.to_named())
    }

    pub fn load(config: &ModelConfig, path: &Path) -> Result<Self> {
        Self::from_named(config, &checkpoint::read(path)?)
    }
}

impl ParamSet for ModelParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &DualArray)) {
        use crate::params::join;
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.psi.visit(&join(prefix, "psi"), f);
        self.epipolar.visit(&join(prefix, "epipolar"), f);
        self.ray.visit(&join(prefix, "ray"), f);
        self.geometry.visit(&join(prefix, "geometry"), f);
        self.blend.visit(&join(prefix, "blend"), f);
        f(join(prefix, "sharpness"), &self.sharpness);
    }

    fn map(&self, prefix: &str, f: &mut dyn FnMut(&str, &DualArray) -> DualArray) -> Self {
        use crate::params::join;
        Self {
            encoder: self.encoder.map(&join(prefix, "encoder"), f),
            psi: self.psi.map(&join(prefix, "psi"), f),
            epipolar: self.epipolar.map(&join(prefix, "epipolar"), f),
            ray: self.ray.map(&join(prefix, "ray"), f),
            geometry: self.geometry.map(&join(prefix, "geometry"), f),
            blend: self.blend.map(&join(prefix, "blend"), f),
            sharpness: f(&join(prefix, "sharpness"), &self.sharpness),
        }
    }
}

/// An RGB image as `[H, W, 3]` values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::invalid(format!(
                "{} values do not fill a {width}x{height} RGB image",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn to_array(&self) -> DualArray {
        DualArray::from_parts(vec![self.height, self.width, 3], self.data.clone())
    }
}

#[derive(Debug, Clone)]
pub struct SourceView {
    pub camera: Camera,
    pub features: FeatureMap2D,
    /// Colour map used for blending, stride 1.
    pub colors: FeatureMap2D,
}

/// Everything derived from the source views for one forward pass.
#[derive(Debug, Clone)]
pub struct SceneContext {
    pub sources: Vec<SourceView>,
    pub volume: FeatureVolume,
}

/// Node ids whose trilinear stencil a point on any ray segment (inside the
/// box) can touch.
pub fn cells_along_rays(bbox: &BoundingBox, resolution: usize, rays: &[Ray]) -> Vec<usize> {
    let r = resolution;
    let e = bbox.extent();
    let cell = (0..3).map(|a| e[a] / (r - 1) as f64).fold(f64::INFINITY, f64::min);
    let mut hit = vec![false; r * r * r];
    for ray in rays {
        let steps = ((ray.far - ray.near) / (0.5 * cell)).ceil() as usize + 1;
        for i in 0..=steps {
            let t = ray.near + (ray.far - ray.near) * i as f64 / steps as f64;
            let p = ray.at(t);
            if !bbox.contains(p) {
                continue;
            }
            let g = [0, 1, 2].map(|a| ((p[a] - bbox.min[a]) / e[a] * (r - 1) as f64).floor() as usize);
            let base = g.map(|v| v.min(r - 2));
            for corner in 0..8 {
                let (di, dj, dk) = ((corner >> 2) & 1, (corner >> 1) & 1, corner & 1);
                hit[((base[0] + di) * r + base[1] + dj) * r + base[2] + dk] = true;
            }
        }
    }
    hit.iter().enumerate().filter_map(|(i, &h)| h.then_some(i)).collect()
}

impl SceneContext {
    /// Encodes the source views and builds the regularised volume. With
    /// `cells`, the volume is evaluated only there (exactly as a dense
    /// evaluation would give).
    pub fn build(
        params: &ModelParams,
        config: &ModelConfig,
        bbox: &BoundingBox,
        sources: &[(&Camera, &Image)],
        cells: Option<&[usize]>,
    ) -> Result<Self> {
        let mut views = Vec::with_capacity(sources.len());
        for (cam, img) in sources {
            if img.width != cam.width || img.height != cam.height {
                return Err(Error::invalid("source image size does not match its camera"));
            }
            let arr = img.to_array();
            views.push(SourceView {
                camera: (*cam).clone(),
                features: extract_features(&arr, &params.encoder)?,
                colors: FeatureMap2D::new(arr, 1.0)?,
            });
        }
        let pairs: Vec<(&Camera, &FeatureMap2D)> = views.iter().map(|v| (&v.camera, &v.features)).collect();
        let res = config.volume_resolution;
        let volume = match cells {
            Some(out) => {
                let support = dilate_cells(res, out, 2);
                let cost = build_cost_volume(bbox, res, &pairs, Some(support))?;
                regularize_volume(&cost, &params.psi, Some(out))?
            }
            None => {
                let cost = build_cost_volume(bbox, res, &pairs, None)?;
                regularize_volume(&cost, &params.psi, None)?
            }
        };
        Ok(Self { sources: views, volume })
    }

    /// Copy holding constants only.
    pub fn detached(&self) -> Self {
        let mut out = self.clone();
        for v in &mut out.sources {
            v.features.values = v.features.values.detach();
        }
        out.volume.values = out.volume.values.detach();
        out
    }

    pub fn bbox(&self) -> &BoundingBox {
        &self.volume.bbox
    }
}

/// Intermediate features of a batch of samples.
#[derive(Debug, Clone)]
pub struct SampleFeatures {
    /// Fused epipolar feature `[M, C]` (identical across views).
    pub x: DualArray,
    /// Ray-aggregated feature `[M, C']`.
    pub xhat: DualArray,
    /// Signed distances `[M, 1]`.
    pub sdf: DualArray,
    /// View-major projection validity, `N_V * M`.
    pub valid: Vec<bool>,
}

/// Runs gather, both attention stages and the geometry decoder on
/// `points`, grouped into rays of `samples_per_ray` consecutive samples.
pub fn query_samples(
    params: &ModelParams,
    config: &ModelConfig,
    ctx: &SceneContext,
    points: &[Vec3],
    samples_per_ray: usize,
) -> Result<SampleFeatures> {
    if points.is_empty() || points.len() % samples_per_ray != 0 {
        return Err(Error::invalid("sample count is not a multiple of samples per ray"));
    }
    let m = points.len();
    let c = config.channels;
    let nv = ctx.sources.len();
    let (f_b, _) = featvol::trilinear_gather(&ctx.volume, points)?;
    let pairs: Vec<(&Camera, &FeatureMap2D)> = ctx.sources.iter().map(|v| (&v.camera, &v.features)).collect();
    let (f_e, mask) = epipolar_gather(points, &pairs)?;
    let valid: Vec<bool> = mask.into_iter().flatten().collect();
    let f_em = epiattn::with_mask_channel(&f_e.reshape(vec![nv * m, c])?, &valid)?;
    let x = epiattn::epipolar_fuse(&f_b, &f_em, nv, &params.epipolar, config.heads)?;
    let xhat = epiattn::ray_attend(
        &x,
        points,
        samples_per_ray,
        &params.ray,
        config.embed_freqs,
        config.ray_heads,
        config.residual,
    )?;
    let sdf = epiattn::geometry_decoder(&xhat, &params.geometry)?;
    Ok(SampleFeatures { x, xhat, sdf, valid })
}

/// Blended sample colours `[M, 3]` for samples on rays of `target`.
/// `ray_dirs` holds one direction per ray.
pub fn blend_colors(
    params: &ModelParams,
    ctx: &SceneContext,
    feats: &SampleFeatures,
    points: &[Vec3],
    ray_dirs: &[Vec3],
    target: &Camera,
) -> Result<DualArray> {
    let m = points.len();
    let nv = ctx.sources.len();
    let per_ray = m / ray_dirs.len();
    let mut dirs = Vec::with_capacity(nv * m * 4);
    let mut colors = Vec::with_capacity(nv);
    for src in &ctx.sources {
        for (i, &p) in points.iter().enumerate() {
            dirs.extend(direction_features(p, &src.camera, target, ray_dirs[i / per_ray]));
        }
        let coords: Vec<Option<[f64; 2]>> = points
            .iter()
            .map(|&p| {
                let pr = src.camera.project(p);
                pr.valid.then_some(pr.pixel)
            })
            .collect();
        colors.push(featvol::bilinear_gather(&src.colors.values, &coords)?);
    }
    let dirs = DualArray::from_parts(vec![nv * m, 4], dirs);
    let w = epiattn::weight_decoder(&feats.xhat, &feats.x, &dirs, Some(&feats.valid), nv, &params.blend)?;
    // colours [N_V, M, 3] -> [M, N_V, 3]
    let refs: Vec<&DualArray> = colors.iter().collect();
    let stacked = DualArray::concat(&refs, 0)?
        .reshape(vec![nv, m, 3])?
        .permute(&[1, 0, 2])?;
    w.reshape(vec![m, nv, 1])?.mul(&stacked)?.sum_axis(1)
}

/// Signed distances at arbitrary points, each queried as the centre of a
/// short ray segment along `axis` (unit vector) with `context` samples
/// spaced `spacing` apart.
pub fn point_sdf(
    params: &ModelParams,
    config: &ModelConfig,
    ctx: &SceneContext,
    points: &[Vec3],
    query: &PointQuery,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(points.len());
    let chunk = 4096 / query.context.max(1);
    for part in points.chunks(chunk.max(1)) {
        let mut samples = Vec::with_capacity(part.len() * query.context);
        for &p in part {
            let half = (query.context as f64 - 1.0) / 2.0;
            for i in 0..query.context {
                let off = (i as f64 - half) * query.spacing;
                samples.push(geometry::add(p, geometry::scale(query.axis, off)));
            }
        }
        let f = query_samples(params, config, ctx, &samples, query.context)?;
        let centre = query.context / 2;
        out.extend(f.sdf.values().chunks(query.context).map(|ray| ray[centre]));
    }
    Ok(out)
}

/// How isolated points are placed in ray context for SDF queries.
#[derive(Debug, Clone, PartialEq)]
pub struct PointQuery {
    /// Odd sample count per query segment; the point is the middle one.
    pub context: usize,
    pub spacing: f64,
    pub axis: Vec3,
}

impl Default for PointQuery {
    fn default() -> Self {
        Self {
            context: 1,
            spacing: 0.0,
            axis: [0.0, 0.0, -1.0],
        }
    }
}
