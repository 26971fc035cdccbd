//! Synthetic scenes: analytic SDF primitives, sphere-traced ground truth,
//! the affine pseudo-monocular depth oracle, and scene bundles on disk.
//!
//! Bundle layout: `cameras.txt`, `bbox.txt`, and per view `i`
//! `view_{i}.ppm`, `depth_{i}.pfm`, `mono_{i}.pfm`, `mask_{i}.pgm`.
//! Colours are 8-bit and depths `f32` on disk; generated bundles are
//! quantised the same way in memory so that a round trip is exact.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::formats;
use crate::geometry::{self, format_cameras, parse_cameras, BoundingBox, Camera, Vec3};
use crate::model::Image;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Primitive {
    Sphere { center: Vec3, radius: f64 },
    Box { center: Vec3, half: Vec3 },
}

impl Primitive {
    pub fn sdf(&self, p: Vec3) -> f64 {
        match *self {
            Primitive::Sphere { center, radius } => geometry::norm(geometry::sub(p, center)) - radius,
            Primitive::Box { center, half } => {
                let q = [0, 1, 2].map(|i| (p[i] - center[i]).abs() - half[i]);
                let outside = geometry::norm(q.map(|v| v.max(0.0)));
                outside + q[0].max(q[1]).max(q[2]).min(0.0)
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match self {
            Primitive::Sphere { radius, .. } => *radius > 0.0,
            Primitive::Box { half, .. } => half.iter().all(|&h| h > 0.0),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("degenerate primitive {self:?}")))
        }
    }
}

/// Union of one or more Lambertian primitives under a directional light.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticScene {
    pub primitives: Vec<(Primitive, [f64; 3])>,
    pub light_dir: Vec3,
    pub ambient: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Sphere,
    Box,
    Union,
}

impl std::str::FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sphere" => Ok(ShapeKind::Sphere),
            "box" => Ok(ShapeKind::Box),
            "union" => Ok(ShapeKind::Union),
            _ => Err(Error::invalid(format!("unknown shape `{s}` (sphere|box|union)"))),
        }
    }
}

impl AnalyticScene {
    pub fn new(primitives: Vec<(Primitive, [f64; 3])>, light_dir: Vec3, ambient: f64) -> Result<Self> {
        if primitives.is_empty() {
            return Err(Error::invalid("scene needs at least one primitive"));
        }
        for (p, _) in &primitives {
            p.validate()?;
        }
        if (geometry::norm(light_dir) - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("light direction must be a unit vector"));
        }
        Ok(Self {
            primitives,
            light_dir,
            ambient,
        })
    }

    /// Default scenes, scaled so the object fits in the unit ball.
    pub fn preset(kind: ShapeKind) -> Self {
        let light = geometry::normalize([0.4, 0.6, 0.7]);
        let prims = match kind {
            ShapeKind::Sphere => vec![(
                Primitive::Sphere {
                    center: [0.0; 3],
                    radius: 1.0,
                },
                [0.8, 0.55, 0.35],
            )],
            ShapeKind::Box => vec![(
                Primitive::Box {
                    center: [0.0; 3],
                    half: [0.55; 3],
                },
                [0.35, 0.6, 0.8],
            )],
            ShapeKind::Union => vec![
                (
                    Primitive::Sphere {
                        center: [-0.35, 0.0, 0.0],
                        radius: 0.6,
                    },
                    [0.8, 0.55, 0.35],
                ),
                (
                    Primitive::Box {
                        center: [0.45, 0.0, 0.0],
                        half: [0.4; 3],
                    },
                    [0.35, 0.6, 0.8],
                ),
            ],
        };
        Self::new(prims, light, 0.1).expect("preset scenes are valid")
    }

    pub fn sdf(&self, p: Vec3) -> f64 {
        self.primitives
            .iter()
            .map(|(prim, _)| prim.sdf(p))
            .fold(f64::INFINITY, f64::min)
    }

    fn albedo(&self, p: Vec3) -> [f64; 3] {
        self.primitives
            .iter()
            .min_by(|a, b| a.0.sdf(p).total_cmp(&b.0.sdf(p)))
            .map(|(_, c)| *c)
            .expect("non-empty")
    }

    /// Central-difference gradient direction.
    pub fn normal(&self, p: Vec3) -> Vec3 {
        let h = 1e-6;
        let g = [0, 1, 2].map(|i| {
            let mut a = p;
            let mut b = p;
            a[i] += h;
            b[i] -= h;
            self.sdf(a) - self.sdf(b)
        });
        geometry::normalize(g)
    }
}

/// Sphere tracing: a hit is declared at `|sdf| < 1e-5 * scale`, after which
/// stepping continues to refine the depth.
fn trace(scene: &AnalyticScene, origin: Vec3, dir: Vec3, scale: f64) -> Option<f64> {
    let mut t = 0.0;
    let mut hit = false;
    for _ in 0..256 {
        let d = scene.sdf(geometry::add(origin, geometry::scale(dir, t)));
        if d.abs() < 1e-5 * scale {
            hit = true;
            if d.abs() < 1e-12 * scale {
                break;
            }
        } else if hit || t > 100.0 * scale {
            break;
        }
        t += d;
    }
    hit.then_some(t)
}

/// Per-pixel colour, camera-frame depth and hit mask.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub image: Image,
    pub depth: Vec<f64>,
    pub mask: Vec<bool>,
}

pub fn render_ground_truth(scene: &AnalyticScene, cam: &Camera) -> Result<GroundTruth> {
    let eye = cam.center();
    if scene.sdf(eye) <= 0.0 {
        return Err(Error::invalid("camera is inside the scene geometry"));
    }
    let scale = 1.0;
    let (w, h) = (cam.width, cam.height);
    let mut rgb = vec![0.0; w * h * 3];
    let mut depth = vec![0.0; w * h];
    let mut mask = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let ray = cam.pixel_to_ray([x as f64, y as f64], 0.0, f64::MAX)?;
            let Some(t) = trace(scene, eye, ray.direction, scale) else {
                continue;
            };
            let p = ray.at(t);
            let i = y * w + x;
            let n = scene.normal(p);
            let shade = geometry::dot(n, scene.light_dir).max(0.0);
            let albedo = scene.albedo(p);
            for c in 0..3 {
                rgb[i * 3 + c] = (albedo[c] * shade + scene.ambient).min(1.0);
            }
            depth[i] = cam.to_camera(p)[2];
            mask[i] = true;
        }
    }
    Ok(GroundTruth {
        image: Image::new(w, h, rgb)?,
        depth,
        mask,
    })
}

/// `(gt - beta) / alpha + N(0, sigma)` on valid pixels; zero elsewhere.
pub fn pseudo_mono_depth(
    gt: &[f64],
    mask: &[bool],
    alpha: f64,
    beta: f64,
    sigma: f64,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    if alpha == 0.0 || !alpha.is_finite() {
        return Err(Error::invalid("mono-depth alpha must be non-zero"));
    }
    let noise =
        Normal::new(0.0, sigma.max(0.0)).map_err(|e| Error::invalid(format!("bad noise sigma {sigma}: {e}")))?;
    Ok(gt
        .iter()
        .zip(mask)
        .map(|(&d, &m)| {
            if !m {
                return 0.0;
            }
            let n = if sigma > 0.0 { noise.sample(rng) } else { 0.0 };
            (d - beta) / alpha + n
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct BundleView {
    pub camera: Camera,
    pub image: Image,
    pub depth: Vec<f64>,
    pub mask: Vec<bool>,
    pub mono: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneBundle {
    pub views: Vec<BundleView>,
    pub bbox: BoundingBox,
}

impl SceneBundle {
    pub fn width(&self) -> usize {
        self.views[0].camera.width
    }

    pub fn height(&self) -> usize {
        self.views[0].camera.height
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub shape: ShapeKind,
    pub views: usize,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    pub mono_alpha: f64,
    pub mono_beta: f64,
    pub mono_sigma: f64,
    /// Horizontal field of view.
    pub fov_degrees: f64,
    pub view_spacing_degrees: f64,
    pub distance: f64,
    pub bbox_half: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            shape: ShapeKind::Sphere,
            views: 3,
            width: 64,
            height: 64,
            seed: 0,
            mono_alpha: 1.3,
            mono_beta: 0.2,
            mono_sigma: 0.01,
            fov_degrees: 40.0,
            view_spacing_degrees: 15.0,
            distance: 4.0,
            bbox_half: 1.25,
        }
    }
}

/// Cameras on a horizontal circle around the origin, evenly spaced and
/// centred on the `+z` axis.
pub fn default_rig(spec: &SceneSpec) -> Result<Vec<Camera>> {
    let focal = (spec.width as f64 / 2.0) / (spec.fov_degrees.to_radians() / 2.0).tan();
    (0..spec.views)
        .map(|i| {
            let a = (i as f64 - (spec.views as f64 - 1.0) / 2.0) * spec.view_spacing_degrees.to_radians();
            let eye = [spec.distance * a.sin(), 0.0, spec.distance * a.cos()];
            Camera::look_at(eye, [0.0; 3], [0.0, 1.0, 0.0], focal, spec.width, spec.height)
        })
        .collect()
}

pub fn generate_bundle(spec: &SceneSpec) -> Result<SceneBundle> {
    if spec.views < 2 {
        return Err(Error::invalid(format!(
            "a bundle needs at least 2 views (cost volume), got {}",
            spec.views
        )));
    }
    if spec.width < 8 || spec.height < 8 {
        return Err(Error::invalid("images must be at least 8x8"));
    }
    let scene = AnalyticScene::preset(spec.shape);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut views = Vec::with_capacity(spec.views);
    for cam in default_rig(spec)? {
        let gt = render_ground_truth(&scene, &cam)?;
        let depth: Vec<f64> = gt.depth.iter().map(|&d| d as f32 as f64).collect();
        let mono = pseudo_mono_depth(
            &depth,
            &gt.mask,
            spec.mono_alpha,
            spec.mono_beta,
            spec.mono_sigma,
            &mut rng,
        )?
        .into_iter()
        .map(|d| d as f32 as f64)
        .collect();
        let rgb = gt
            .image
            .data
            .iter()
            .map(|&v| formats::quantize(v) as f64 / 255.0)
            .collect();
        views.push(BundleView {
            image: Image::new(cam.width, cam.height, rgb)?,
            camera: cam,
            depth,
            mask: gt.mask,
            mono,
        });
    }
    Ok(SceneBundle {
        views,
        bbox: BoundingBox::cube(spec.bbox_half),
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_bundle(bundle: &SceneBundle, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let cams: Vec<Camera> = bundle.views.iter().map(|v| v.camera.clone()).collect();
    write_file(&dir.join("cameras.txt"), format_cameras(&cams).as_bytes())?;
    write_file(&dir.join("bbox.txt"), formats::format_bbox(&bundle.bbox).as_bytes())?;
    for (i, v) in bundle.views.iter().enumerate() {
        let (w, h) = (v.camera.width, v.camera.height);
        let rgb: Vec<u8> = v.image.data.iter().map(|&c| formats::quantize(c)).collect();
        write_file(&dir.join(format!("view_{i}.ppm")), &formats::encode_ppm(w, h, &rgb))?;
        let f32s = |d: &[f64]| d.iter().map(|&x| x as f32).collect::<Vec<f32>>();
        write_file(
            &dir.join(format!("depth_{i}.pfm")),
            &formats::encode_pfm(w, h, &f32s(&v.depth)),
        )?;
        write_file(
            &dir.join(format!("mono_{i}.pfm")),
            &formats::encode_pfm(w, h, &f32s(&v.mono)),
        )?;
        let m: Vec<u8> = v.mask.iter().map(|&b| if b { 255 } else { 0 }).collect();
        write_file(&dir.join(format!("mask_{i}.pgm")), &formats::encode_pgm(w, h, &m))?;
    }
    Ok(())
}

pub fn read_bundle(dir: &Path) -> Result<SceneBundle> {
    let cam_path = dir.join("cameras.txt");
    let text = String::from_utf8(read_file(&cam_path)?)
        .map_err(|_| Error::parse(cam_path.display().to_string(), 1, "not UTF-8"))?;
    let cams = parse_cameras(&text, &cam_path.display().to_string())?;
    let bbox_path = dir.join("bbox.txt");
    let bbox_text = String::from_utf8(read_file(&bbox_path)?)
        .map_err(|_| Error::parse(bbox_path.display().to_string(), 1, "not UTF-8"))?;
    let bbox = formats::parse_bbox(&bbox_text, &bbox_path.display().to_string())?;
    let mut views = Vec::with_capacity(cams.len());
    for (i, camera) in cams.into_iter().enumerate() {
        let (w, h) = (camera.width, camera.height);
        let load = |name: String| -> Result<(String, Vec<u8>)> {
            let p = dir.join(&name);
            Ok((p.display().to_string(), read_file(&p)?))
        };
        let check = |file: &str, fw: usize, fh: usize| -> Result<()> {
            if (fw, fh) != (w, h) {
                return Err(Error::parse(
                    file,
                    1,
                    format!("view {i}: size {fw}x{fh} does not match camera {w}x{h}"),
                ));
            }
            Ok(())
        };
        let (f, bytes) = load(format!("view_{i}.ppm"))?;
        let (iw, ih, rgb) = formats::parse_ppm(&bytes, &f)?;
        check(&f, iw, ih)?;
        let (f, bytes) = load(format!("depth_{i}.pfm"))?;
        let (dw, dh, depth) = formats::parse_pfm(&bytes, &f)?;
        check(&f, dw, dh)?;
        let (f, bytes) = load(format!("mono_{i}.pfm"))?;
        let (mw, mh, mono) = formats::parse_pfm(&bytes, &f)?;
        check(&f, mw, mh)?;
        let (f, bytes) = load(format!("mask_{i}.pgm"))?;
        let (kw, kh, mask) = formats::parse_pgm(&bytes, &f)?;
        check(&f, kw, kh)?;
        views.push(BundleView {
            image: Image::new(w, h, rgb.iter().map(|&c| c as f64 / 255.0).collect())?,
            camera,
            depth: depth.iter().map(|&d| d as f64).collect(),
            mask: mask.iter().map(|&m| m >= 128).collect(),
            mono: mono.iter().map(|&d| d as f64).collect(),
        });
    }
    if views.len() < 2 {
        return Err(Error::parse(
            cam_path.display().to_string(),
            1,
            "bundle needs at least 2 views",
        ));
    }
    Ok(SceneBundle { views, bbox })
}
