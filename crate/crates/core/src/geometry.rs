//! Pinhole cameras, rays, and the epipolar gather.
//!
//! Pixel coordinates address pixel centres: pixel `(i, j)` is centred at
//! `u = i, v = j`. Camera frames follow the usual vision convention (`+x`
//! right, `+y` down, `+z` forward).

use std::fmt::Write as _;

use rand::Rng;

use crate::diff::DualArray;
use crate::error::{Error, Result};
use crate::featvol::{bilinear_gather, FeatureMap2D};

pub type Vec3 = [f64; 3];

pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn normalize(a: Vec3) -> Vec3 {
    scale(a, 1.0 / norm(a))
}

/// Minimum camera-frame depth for a projection to count as valid.
pub const MIN_DEPTH: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Rigid world-to-camera transform, row-major.
    pub world_to_cam: [[f64; 4]; 4],
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub pixel: [f64; 2],
    pub depth: f64,
    pub valid: bool,
}

impl Camera {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        world_to_cam: [[f64; 4]; 4],
        width: usize,
        height: usize,
    ) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::invalid(format!(
                "focal lengths must be positive, got {fx}, {fy}"
            )));
        }
        if width < 2 || height < 2 {
            return Err(Error::invalid(format!(
                "image must be at least 2x2, got {width}x{height}"
            )));
        }
        let m = &world_to_cam;
        if m[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::invalid("world_to_cam bottom row must be 0 0 0 1"));
        }
        let r = |i: usize| [m[i][0], m[i][1], m[i][2]];
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                if (dot(r(i), r(j)) - expect).abs() > 1e-9 {
                    return Err(Error::invalid("world_to_cam rotation is not orthonormal"));
                }
            }
        }
        if (dot(cross(r(0), r(1)), r(2)) - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("world_to_cam rotation has determinant -1"));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            world_to_cam,
            width,
            height,
        })
    }

    /// Camera at `eye` looking at `target`, with `up` roughly opposite the
    /// image `+y` axis.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, focal: f64, width: usize, height: usize) -> Result<Self> {
        let z = normalize(sub(target, eye));
        let x = cross(z, up);
        if norm(x) < 1e-12 {
            return Err(Error::invalid("look_at: up is parallel to the viewing direction"));
        }
        let x = normalize(x);
        let y = cross(z, x);
        let t = [-dot(x, eye), -dot(y, eye), -dot(z, eye)];
        let m = [
            [x[0], x[1], x[2], t[0]],
            [y[0], y[1], y[2], t[1]],
            [z[0], z[1], z[2], t[2]],
            [0.0, 0.0, 0.0, 1.0],
        ];
        Camera::new(
            focal,
            focal,
            (width as f64 - 1.0) / 2.0,
            (height as f64 - 1.0) / 2.0,
            m,
            width,
            height,
        )
    }

    fn rotation_row(&self, i: usize) -> Vec3 {
        let m = &self.world_to_cam;
        [m[i][0], m[i][1], m[i][2]]
    }

    pub fn to_camera(&self, p: Vec3) -> Vec3 {
        let m = &self.world_to_cam;
        [0, 1, 2].map(|i| m[i][0] * p[0] + m[i][1] * p[1] + m[i][2] * p[2] + m[i][3])
    }

    /// Rotates a camera-frame direction into the world frame.
    pub fn dir_to_world(&self, d: Vec3) -> Vec3 {
        let (r0, r1, r2) = (self.rotation_row(0), self.rotation_row(1), self.rotation_row(2));
        add(add(scale(r0, d[0]), scale(r1, d[1])), scale(r2, d[2]))
    }

    /// Rotates a world direction into the camera frame.
    pub fn dir_to_camera(&self, d: Vec3) -> Vec3 {
        [0, 1, 2].map(|i| dot(self.rotation_row(i), d))
    }

    pub fn center(&self) -> Vec3 {
        let m = &self.world_to_cam;
        scale(self.dir_to_world([m[0][3], m[1][3], m[2][3]]), -1.0)
    }

    /// World-frame optical axis.
    pub fn forward(&self) -> Vec3 {
        self.rotation_row(2)
    }

    pub fn contains_pixel(&self, px: [f64; 2]) -> bool {
        px[0] >= 0.0 && px[0] < self.width as f64 && px[1] >= 0.0 && px[1] < self.height as f64
    }

    pub fn project(&self, p: Vec3) -> Projection {
        let q = self.to_camera(p);
        let depth = q[2];
        if depth <= MIN_DEPTH {
            return Projection {
                pixel: [f64::NAN, f64::NAN],
                depth,
                valid: false,
            };
        }
        let pixel = [self.fx * q[0] / depth + self.cx, self.fy * q[1] / depth + self.cy];
        Projection {
            pixel,
            depth,
            valid: self.contains_pixel(pixel),
        }
    }

    /// Viewing ray through `px` with the given near/far range.
    pub fn pixel_to_ray(&self, px: [f64; 2], near: f64, far: f64) -> Result<Ray> {
        if !self.contains_pixel(px) {
            return Err(Error::invalid(format!(
                "pixel {px:?} outside {}x{} image",
                self.width, self.height
            )));
        }
        let d = [(px[0] - self.cx) / self.fx, (px[1] - self.cy) / self.fy, 1.0];
        Ray::new(self.center(), self.dir_to_world(d), near, far)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub near: f64,
    pub far: f64,
}

impl Ray {
    /// Builds a ray, normalising `direction`.
    pub fn new(origin: Vec3, direction: Vec3, near: f64, far: f64) -> Result<Self> {
        let n = norm(direction);
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::invalid("ray direction must be non-zero"));
        }
        if !(near >= 0.0 && near < far) {
            return Err(Error::invalid(format!("invalid ray range [{near}, {far}]")));
        }
        Ok(Self {
            origin,
            direction: scale(direction, 1.0 / n),
            near,
            far,
        })
    }

    pub fn at(&self, t: f64) -> Vec3 {
        add(self.origin, scale(self.direction, t))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub min: Vec3,
    pub max: Vec3,
}

impl BoundingBox {
    pub fn new(min: Vec3, max: Vec3) -> Result<Self> {
        if (0..3).any(|i| !(min[i] < max[i])) {
            return Err(Error::invalid(format!(
                "bounding box min {min:?} not below max {max:?}"
            )));
        }
        Ok(Self { min, max })
    }

    pub fn cube(half: f64) -> Self {
        Self {
            min: [-half; 3],
            max: [half; 3],
        }
    }

    pub fn extent(&self) -> Vec3 {
        sub(self.max, self.min)
    }

    pub fn contains(&self, p: Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    /// Slab test; returns the parametric entry/exit distances with entry
    /// clamped to zero.
    pub fn intersect(&self, origin: Vec3, dir: Vec3) -> Option<(f64, f64)> {
        let mut t0 = 0.0f64;
        let mut t1 = f64::INFINITY;
        for i in 0..3 {
            if dir[i].abs() < 1e-15 {
                if origin[i] < self.min[i] || origin[i] > self.max[i] {
                    return None;
                }
                continue;
            }
            let a = (self.min[i] - origin[i]) / dir[i];
            let b = (self.max[i] - origin[i]) / dir[i];
            t0 = t0.max(a.min(b));
            t1 = t1.min(a.max(b));
        }
        (t0 < t1).then_some((t0, t1))
    }
}

/// Coarse sample distances along `ray`: bin midpoints, or one uniform draw
/// per equal-width bin when `stratified`.
pub fn sample_coarse(ray: &Ray, n: usize, stratified: bool, rng: &mut impl Rng) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::invalid(format!("need at least 2 coarse samples, got {n}")));
    }
    let width = (ray.far - ray.near) / n as f64;
    Ok((0..n)
        .map(|i| {
            let u: f64 = if stratified { rng.random() } else { 0.5 };
            ray.near + (i as f64 + u) * width
        })
        .collect())
}

/// Projects every point into every source view and bilinearly samples the
/// view's feature map. Returns features `[N_V, N_S, C]` and a `[N_V][N_S]`
/// validity mask; invalid projections hold zero features.
pub fn epipolar_gather(points: &[Vec3], sources: &[(&Camera, &FeatureMap2D)]) -> Result<(DualArray, Vec<Vec<bool>>)> {
    if sources.is_empty() {
        return Err(Error::invalid("epipolar gather needs at least one source view"));
    }
    if points.is_empty() {
        return Err(Error::invalid("epipolar gather needs at least one point"));
    }
    let channels = sources[0].1.channels();
    let mut per_view = Vec::with_capacity(sources.len());
    let mut mask = Vec::with_capacity(sources.len());
    for (cam, fmap) in sources {
        if fmap.channels() != channels {
            return Err(Error::Shape {
                op: "epipolar_gather",
                lhs: vec![channels],
                rhs: vec![fmap.channels()],
            });
        }
        let coords: Vec<Option<[f64; 2]>> = points
            .iter()
            .map(|&p| {
                let pr = cam.project(p);
                pr.valid.then(|| fmap.pixel_to_grid(pr.pixel))
            })
            .collect();
        mask.push(coords.iter().map(Option::is_some).collect());
        per_view.push(bilinear_gather(&fmap.values, &coords)?);
    }
    let refs: Vec<&DualArray> = per_view.iter().collect();
    let stacked = DualArray::concat(&refs, 0)?.reshape(vec![sources.len(), points.len(), channels])?;
    Ok((stacked, mask))
}

pub fn format_cameras(cams: &[Camera]) -> String {
    let mut s = String::new();
    for (i, c) in cams.iter().enumerate() {
        if i > 0 {
            s.push('\n');
        }
        let _ = writeln!(s, "{} {} {} {} {} {}", c.fx, c.fy, c.cx, c.cy, c.width, c.height);
        for row in &c.world_to_cam {
            let _ = writeln!(s, "{} {} {} {}", row[0], row[1], row[2], row[3]);
        }
    }
    s
}

/// Parses the `cameras.txt` block format; `file` names the source in errors.
pub fn parse_cameras(text: &str, file: &str) -> Result<Vec<Camera>> {
    let mut cams = Vec::new();
    let mut lines = text.lines().enumerate().peekable();
    loop {
        while matches!(lines.peek(), Some((_, l)) if l.trim().is_empty()) {
            lines.next();
        }
        let Some((n0, header)) = lines.next() else { break };
        let h: Vec<&str> = header.split_whitespace().collect();
        if h.len() != 6 {
            return Err(Error::parse(file, n0 + 1, "expected `fx fy cx cy width height`"));
        }
        let num = |s: &str, line: usize| -> Result<f64> {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::parse(file, line, format!("bad number `{s}`")))
        };
        let size = |s: &str, line: usize| -> Result<usize> {
            s.parse::<usize>()
                .map_err(|_| Error::parse(file, line, format!("bad image size `{s}`")))
        };
        let (fx, fy, cx, cy) = (
            num(h[0], n0 + 1)?,
            num(h[1], n0 + 1)?,
            num(h[2], n0 + 1)?,
            num(h[3], n0 + 1)?,
        );
        let (w, hh) = (size(h[4], n0 + 1)?, size(h[5], n0 + 1)?);
        let mut m = [[0.0; 4]; 4];
        for row in &mut m {
            let (n, line) = lines
                .next()
                .ok_or_else(|| Error::parse(file, n0 + 1, "camera block ends early"))?;
            let vals: Vec<&str> = line.split_whitespace().collect();
            if vals.len() != 4 {
                return Err(Error::parse(file, n + 1, "expected 4 matrix entries"));
            }
            for (dst, v) in row.iter_mut().zip(vals) {
                *dst = num(v, n + 1)?;
            }
        }
        let cam = Camera::new(fx, fy, cx, cy, m, w, hh).map_err(|e| Error::parse(file, n0 + 1, e.to_string()))?;
        cams.push(cam);
    }
    if cams.is_empty() {
        return Err(Error::parse(file, 1, "no cameras"));
    }
    Ok(cams)
}
