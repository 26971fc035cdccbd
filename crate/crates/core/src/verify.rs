//! Finite-difference gradient suites over the differentiable operations,
//! shared by the `grad-check` command and the test suites.

use std::fmt::Write as _;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diff::{grad_check, grad_check_with, DualArray, Stencil};
use crate::epiattn::{self, EpipolarParams, Mlp, RayParams};
use crate::error::{Error, Result};
use crate::featvol::{self, EncoderParams, FeatureVolume, PsiParams};
use crate::geometry::{BoundingBox, Camera, Ray, Vec3};
use crate::losses::{self, LossComponents, LossWeights};
use crate::model::{Image, ModelConfig, ModelParams, SceneContext};
use crate::params::{glorot, ParamSet};
use crate::renderer::{self, RenderConfig};

/// Threshold for primitive operations.
pub const PRIMITIVE_TOL: f64 = 1e-5;
/// Threshold for composite modules and losses.
pub const MODULE_TOL: f64 = 1e-4;
/// Step for primitive operations.
const STEP: f64 = 1e-5;
/// Largest starting Ridders step for composite modules. Their gradient
/// components go down to 1e-8 against O(1) intermediates, so small fixed
/// steps drown in roundoff.
pub const MODULE_STEP: f64 = 3e-2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Diffcore,
    Featvol,
    Epiattn,
    Renderer,
    Losses,
}

impl Suite {
    pub const ALL: [Suite; 5] = [
        Suite::Diffcore,
        Suite::Featvol,
        Suite::Epiattn,
        Suite::Renderer,
        Suite::Losses,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Diffcore => "diffcore",
            Suite::Featvol => "featvol",
            Suite::Epiattn => "epiattn",
            Suite::Renderer => "renderer",
            Suite::Losses => "losses",
        }
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown module `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub suite: &'static str,
    pub name: String,
    pub error: f64,
    pub threshold: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.error < self.threshold
    }
}

struct Runner {
    suite: &'static str,
    rng: ChaCha8Rng,
    out: Vec<CheckResult>,
}

impl Runner {
    fn check<F>(&mut self, name: &str, tol: f64, x: &DualArray, f: F) -> Result<()>
    where
        F: Fn(&DualArray) -> Result<DualArray>,
    {
        let error = if tol == PRIMITIVE_TOL {
            grad_check(f, x, STEP)?
        } else {
            grad_check_with(f, x, MODULE_STEP, Stencil::Ridders)?
        };
        self.out.push(CheckResult {
            suite: self.suite,
            name: name.to_string(),
            error,
            threshold: tol,
        });
        Ok(())
    }

    /// Values with magnitude in `[0.2, 1.5]` and random sign, away from
    /// the kinks of abs/max/elu.
    fn away_from_zero(&mut self, shape: &[usize]) -> DualArray {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let m = self.rng.random_range(0.2..1.5);
                if self.rng.random::<bool>() {
                    m
                } else {
                    -m
                }
            })
            .collect();
        DualArray::from_parts(shape.to_vec(), data)
    }

    fn positive(&mut self, shape: &[usize]) -> DualArray {
        let n = shape.iter().product();
        DualArray::from_parts(
            shape.to_vec(),
            (0..n).map(|_| self.rng.random_range(0.3..2.0)).collect(),
        )
    }

    fn uniform(&mut self, shape: &[usize], lo: f64, hi: f64) -> DualArray {
        let n = shape.iter().product();
        DualArray::from_parts(shape.to_vec(), (0..n).map(|_| self.rng.random_range(lo..hi)).collect())
    }
}

/// Weighted sum reducing any output to a scalar.
fn contract(y: DualArray, w: &DualArray) -> Result<DualArray> {
    y.reshape(vec![y.len()])?.mul(w)?.sum()
}

fn weights_for(r: &mut Runner, n: usize) -> DualArray {
    r.uniform(&[n], -1.0, 1.0)
}

pub fn run_suite(suite: Suite, seed: u64) -> Result<Vec<CheckResult>> {
    let mut r = Runner {
        suite: suite.name(),
        rng: ChaCha8Rng::seed_from_u64(seed),
        out: Vec::new(),
    };
    match suite {
        Suite::Diffcore => diffcore(&mut r)?,
        Suite::Featvol => featvol_checks(&mut r)?,
        Suite::Epiattn => epiattn_checks(&mut r)?,
        Suite::Renderer => renderer_checks(&mut r)?,
        Suite::Losses => loss_checks(&mut r)?,
    }
    Ok(r.out)
}

pub fn run_all(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for s in Suite::ALL {
        out.extend(run_suite(s, seed)?);
    }
    Ok(out)
}

pub fn format_table(results: &[CheckResult]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<10} {:<36} {:>12} {:>10}  result",
        "module", "check", "rel_error", "threshold"
    );
    for c in results {
        let _ = writeln!(
            s,
            "{:<10} {:<36} {:>12.3e} {:>10.0e}  {}",
            c.suite,
            c.name,
            c.error,
            c.threshold,
            if c.passed() { "pass" } else { "FAIL" }
        );
    }
    s
}

fn diffcore(r: &mut Runner) -> Result<()> {
    let t = PRIMITIVE_TOL;
    let a = r.away_from_zero(&[3, 4]);
    let b = r.away_from_zero(&[3, 4]);
    let w = weights_for(r, 12);
    let pos = r.positive(&[3, 4]);
    let row = r.away_from_zero(&[1, 4]);

    r.check("add", t, &a, |x| contract(x.add(&b)?, &w))?;
    r.check("add (broadcast rhs)", t, &row, |x| contract(a.add(x)?, &w))?;
    r.check("sub", t, &b, |x| contract(a.sub(x)?, &w))?;
    r.check("mul", t, &a, |x| contract(x.mul(&b)?, &w))?;
    r.check("div numerator", t, &a, |x| contract(x.div(&pos)?, &w))?;
    r.check("div denominator", t, &pos, |x| contract(a.div(x)?, &w))?;
    // separate the arguments of maximum
    let b_far = DualArray::from_parts(vec![3, 4], a.values().iter().map(|v| v + 0.5).collect());
    let b_near = DualArray::from_parts(vec![3, 4], a.values().iter().map(|v| v - 0.5).collect());
    r.check("maximum (rhs wins)", t, &a, |x| contract(x.maximum(&b_far)?, &w))?;
    r.check("maximum (lhs wins)", t, &a, |x| contract(x.maximum(&b_near)?, &w))?;
    r.check("neg", t, &a, |x| contract(x.neg()?, &w))?;
    r.check("scale", t, &a, |x| contract(x.scale(1.7)?, &w))?;
    r.check("add_scalar", t, &a, |x| contract(x.add_scalar(0.3)?, &w))?;
    r.check("exp", t, &a, |x| contract(x.exp()?, &w))?;
    r.check("log", t, &pos, |x| contract(x.log()?, &w))?;
    r.check("sqrt", t, &pos, |x| contract(x.sqrt()?, &w))?;
    r.check("square", t, &a, |x| contract(x.square()?, &w))?;
    r.check("abs", t, &a, |x| contract(x.abs()?, &w))?;
    r.check("elu", t, &a, |x| contract(x.elu()?, &w))?;
    r.check("sigmoid", t, &a, |x| contract(x.sigmoid()?, &w))?;
    r.check("max_scalar", t, &a, |x| contract(x.max_scalar(0.0)?, &w))?;
    r.check("sum", t, &a, |x| x.sum()?.mul(&DualArray::scalar(1.3)))?;
    r.check("mean", t, &a, |x| x.mean()?.square())?;
    let w3 = weights_for(r, 3);
    let w4 = weights_for(r, 4);
    r.check("sum_axis", t, &a, |x| contract(x.sum_axis(1)?, &w3))?;
    r.check("mean_axis", t, &a, |x| contract(x.mean_axis(0)?, &w4))?;
    r.check("variance_axis", t, &a, |x| contract(x.variance_axis(1)?, &w3))?;
    let m2 = r.away_from_zero(&[4, 5]);
    let w15 = weights_for(r, 15);
    r.check("matmul lhs", t, &a, |x| contract(x.matmul(&m2)?, &w15))?;
    r.check("matmul rhs", t, &m2, |x| contract(a.matmul(x)?, &w15))?;
    r.check("reshape", t, &a, |x| contract(x.reshape(vec![2, 6])?.square()?, &w))?;
    r.check("broadcast_to", t, &row, |x| contract(x.broadcast_to(&[3, 4])?, &w))?;
    let cube = r.away_from_zero(&[2, 3, 4]);
    let w24 = weights_for(r, 24);
    r.check("permute", t, &cube, |x| {
        contract(x.permute(&[2, 0, 1])?.square()?, &w24)
    })?;
    let wc = weights_for(r, 24);
    r.check("concat", t, &a, |x| {
        contract(DualArray::concat(&[x, &b], 1)?.square()?, &wc)
    })?;
    let w6 = weights_for(r, 6);
    r.check("narrow", t, &a, |x| contract(x.narrow(1, 1, 2)?.square()?, &w6))?;
    let w16 = weights_for(r, 16);
    r.check("gather_rows", t, &a, |x| {
        contract(x.gather_rows(&[2, 0, 2, 1])?.square()?, &w16)
    })?;
    r.check("softmax_last", t, &a, |x| contract(x.softmax_last()?, &w))?;
    Ok(())
}

fn small_camera(eye: Vec3, size: usize) -> Result<Camera> {
    Camera::look_at(eye, [0.0; 3], [0.0, 1.0, 0.0], size as f64 * 1.2, size, size)
}

fn featvol_checks(r: &mut Runner) -> Result<()> {
    let t = MODULE_TOL;
    let enc = EncoderParams::init(&mut r.rng, 3);
    let img = r.uniform(&[8, 8, 3], 0.0, 1.0);
    let w = weights_for(r, 2 * 2 * 3);
    r.check("encoder conv1", t, &enc.conv1.weight, |x| {
        let p = EncoderParams {
            conv1: crate::params::Linear {
                weight: x.clone(),
                bias: enc.conv1.bias.clone(),
            },
            conv2: enc.conv2.clone(),
        };
        contract(featvol::extract_features(&img, &p)?.values, &w)
    })?;
    r.check("encoder image", t, &img, |x| {
        contract(featvol::extract_features(x, &enc)?.values, &w)
    })?;

    let map = r.away_from_zero(&[5, 6, 2]);
    let coords = vec![Some([1.3, 2.6]), None, Some([4.2, 0.4]), Some([-0.5, 3.0])];
    let w8 = weights_for(r, 8);
    r.check("bilinear_gather", t, &map, |x| {
        contract(featvol::bilinear_gather(x, &coords)?, &w8)
    })?;

    let views: Vec<DualArray> = (0..3).map(|_| r.away_from_zero(&[5, 2])).collect();
    let masks = vec![
        vec![true, true, false, true, true],
        vec![true, false, false, true, true],
        vec![true, true, true, false, true],
    ];
    let w20 = weights_for(r, 20);
    r.check("masked_moments", t, &views[1], |x| {
        let per = [views[0].clone(), x.clone(), views[2].clone()];
        contract(featvol::masked_moments(&per, &masks)?.0, &w20)
    })?;

    let bbox = BoundingBox::cube(1.0);
    let res = 4;
    let n = res * res * res;
    let cost_vals = r.away_from_zero(&[n, 4]);
    let mask: Vec<bool> = (0..n).map(|i| i % 7 != 0).collect();
    let cost_vals = DualArray::from_parts(
        vec![n, 4],
        cost_vals
            .values()
            .chunks(4)
            .zip(&mask)
            .flat_map(|(row, &m)| row.iter().map(move |&v| if m { v } else { 0.0 }))
            .collect(),
    );
    let cost = FeatureVolume::new(bbox, res, (0..n).collect(), cost_vals, mask.clone())?;
    let psi = PsiParams::init(&mut r.rng, 2);
    let wv = weights_for(r, n * 2);
    r.check("regularize_volume conv1", t, &psi.conv1.weight, |x| {
        let p = PsiParams {
            conv1: crate::params::Linear {
                weight: x.clone(),
                bias: psi.conv1.bias.clone(),
            },
            conv2: psi.conv2.clone(),
        };
        contract(featvol::regularize_volume(&cost, &p, None)?.values, &wv)
    })?;
    r.check("regularize_volume conv2", t, &psi.conv2.weight, |x| {
        let p = PsiParams {
            conv1: psi.conv1.clone(),
            conv2: crate::params::Linear {
                weight: x.clone(),
                bias: psi.conv2.bias.clone(),
            },
        };
        contract(featvol::regularize_volume(&cost, &p, None)?.values, &wv)
    })?;
    let pts: Vec<Vec3> = (0..6)
        .map(|_| [0; 3].map(|_| r.rng.random_range(-0.95..0.95)))
        .collect();
    let w12 = weights_for(r, 24);
    r.check("trilinear_gather", t, &cost.values, |x| {
        let v = FeatureVolume::new(bbox, res, (0..n).collect(), x.clone(), mask.clone())?;
        contract(featvol::trilinear_gather(&v, &pts)?.0, &w12)
    })?;
    Ok(())
}

fn epiattn_checks(r: &mut Runner) -> Result<()> {
    let t = MODULE_TOL;
    let q = r.away_from_zero(&[5, 4]);
    let k = r.away_from_zero(&[6, 4]);
    let v = r.away_from_zero(&[6, 4]);
    let w = weights_for(r, 20);
    r.check("linearized_attention q", t, &q, |x| {
        contract(epiattn::linearized_attention(x, &k, &v)?, &w)
    })?;
    r.check("linearized_attention k", t, &k, |x| {
        contract(epiattn::linearized_attention(&q, x, &v)?, &w)
    })?;
    r.check("linearized_attention v", t, &v, |x| {
        contract(epiattn::linearized_attention(&q, &k, x)?, &w)
    })?;
    let gq = r.away_from_zero(&[6, 4]);
    let gk = r.away_from_zero(&[9, 4]);
    let gv = r.away_from_zero(&[9, 4]);
    let wg = weights_for(r, 24);
    r.check("grouped_attention 3 groups 2 heads", t, &gk, |x| {
        contract(epiattn::grouped_attention(&gq, x, &gv, 3, 2)?, &wg)
    })?;

    let (ns, nv, c, h) = (4, 2, 8, 2);
    let params = EpipolarParams::init(&mut r.rng, c);
    let f_b = r.away_from_zero(&[ns, c]);
    let f_e = r.away_from_zero(&[nv, ns, c]);
    let mask = vec![vec![true, true, false, true], vec![true, true, true, true]];
    let f_e = epiattn::with_mask_channel(&f_e.reshape(vec![nv * ns, c])?, &mask.concat())?
        .narrow(1, 0, c)?
        .reshape(vec![nv, ns, c])?;
    let wx = weights_for(r, ns * nv * c);
    let run = |p: &EpipolarParams, fb: &DualArray, fe: &DualArray| -> Result<DualArray> {
        contract(epiattn::epipolar_aggregate(fb, fe, &mask, p, h)?, &wx)
    };
    r.check("epipolar_aggregate w_q", t, &params.w_q, |x| {
        run(
            &EpipolarParams {
                w_q: x.clone(),
                ..params.clone()
            },
            &f_b,
            &f_e,
        )
    })?;
    r.check("epipolar_aggregate w_k", t, &params.w_k, |x| {
        run(
            &EpipolarParams {
                w_k: x.clone(),
                ..params.clone()
            },
            &f_b,
            &f_e,
        )
    })?;
    r.check("epipolar_aggregate w_v", t, &params.w_v, |x| {
        run(
            &EpipolarParams {
                w_v: x.clone(),
                ..params.clone()
            },
            &f_b,
            &f_e,
        )
    })?;
    r.check("epipolar_aggregate F_B", t, &f_b, |x| run(&params, x, &f_e))?;
    r.check("epipolar_aggregate F_E", t, &f_e, |x| run(&params, &f_b, x))?;

    let freqs = 1;
    let width = c + epiattn::embedding_width(freqs);
    let rp = RayParams::init(&mut r.rng, width);
    let xs = r.away_from_zero(&[ns, nv, c]);
    let pos: Vec<Vec3> = (0..ns).map(|i| [0.1 * i as f64, -0.2, 0.3 + 0.05 * i as f64]).collect();
    let wr = weights_for(r, ns * width);
    let ray = |p: &RayParams, x: &DualArray| contract(epiattn::ray_aggregate(x, &pos, p, freqs, 1)?, &wr);
    r.check("ray_aggregate w_q", t, &rp.w_q, |x| {
        ray(
            &RayParams {
                w_q: x.clone(),
                ..rp.clone()
            },
            &xs,
        )
    })?;
    r.check("ray_aggregate w_k", t, &rp.w_k, |x| {
        ray(
            &RayParams {
                w_k: x.clone(),
                ..rp.clone()
            },
            &xs,
        )
    })?;
    r.check("ray_aggregate w_v", t, &rp.w_v, |x| {
        ray(
            &RayParams {
                w_v: x.clone(),
                ..rp.clone()
            },
            &xs,
        )
    })?;
    r.check("ray_aggregate X", t, &xs, |x| ray(&rp, x))?;

    let mlp = Mlp::init(&mut r.rng, width, 8, 1);
    let xhat = r.away_from_zero(&[ns, width]);
    let wd = weights_for(r, ns);
    r.check("geometry_decoder input", t, &xhat, |x| {
        contract(epiattn::geometry_decoder(x, &mlp)?, &wd)
    })?;
    r.check("geometry_decoder l1", t, &mlp.l1.weight, |x| {
        let m = Mlp {
            l1: crate::params::Linear {
                weight: x.clone(),
                bias: mlp.l1.bias.clone(),
            },
            ..mlp.clone()
        };
        contract(epiattn::geometry_decoder(&xhat, &m)?, &wd)
    })?;

    let blend = Mlp::init(&mut r.rng, width + c + 4, 8, 1);
    let xm = r.away_from_zero(&[ns, c]);
    let dirs = r.uniform(&[nv * ns, 4], -1.0, 1.0);
    let valid = vec![true, true, false, true, true, true, true, true];
    let ww = weights_for(r, ns * nv);
    let dec = |xh: &DualArray, m: &Mlp| contract(epiattn::weight_decoder(xh, &xm, &dirs, Some(&valid), nv, m)?, &ww);
    r.check("weight_decoder X_hat", t, &xhat, |x| dec(x, &blend))?;
    r.check("weight_decoder out", t, &blend.out.weight, |x| {
        let m = Mlp {
            out: crate::params::Linear {
                weight: x.clone(),
                bias: blend.out.bias.clone(),
            },
            ..blend.clone()
        };
        dec(&xhat, &m)
    })?;
    Ok(())
}

/// Small model and scene for end-to-end render checks.
pub fn toy_setup(seed: u64) -> Result<(ModelConfig, ModelParams, Vec<(Camera, Image)>, BoundingBox)> {
    let config = ModelConfig {
        channels: 4,
        heads: 2,
        ray_heads: 1,
        embed_freqs: 1,
        volume_resolution: 6,
        geometry_hidden: 8,
        weight_hidden: 8,
        residual: false,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = ModelParams::init(&config, &mut rng)?;
    // random output weights and a small bias put a surface inside the box
    let hidden = config.geometry_hidden;
    let w_out = glorot(&mut rng, hidden, 1);
    let params = params.map("", &mut |name, a| match name {
        "geometry.out.weight" => w_out.clone(),
        "geometry.out.bias" => DualArray::from_parts(vec![1], vec![0.02]),
        _ => a.clone(),
    });
    let size = 12;
    let mut views = Vec::new();
    for eye in [[0.3, 0.2, 2.0], [-0.4, 0.1, 2.0], [0.0, -0.5, 2.0]] {
        let cam = small_camera(eye, size)?;
        let data = (0..size * size * 3).map(|_| rng.random_range(0.0..1.0)).collect();
        views.push((cam, Image::new(size, size, data)?));
    }
    Ok((config, params, views, BoundingBox::cube(1.0)))
}

/// A toy ray with some opacity whose intervals all sit clearly on one side
/// of the alpha clamp, so small parameter changes cannot cross it.
fn clamp_free_ray(
    params: &ModelParams,
    config: &ModelConfig,
    ctx: &SceneContext,
    target: &Camera,
    rcfg: &RenderConfig,
) -> Result<Ray> {
    let s = params.sharpness_value();
    let phi = |x: f64| crate::diff::ops::sigmoid(s * x);
    let steps = 2 * target.width;
    for iy in 0..steps {
        for ix in 0..steps {
            let px = [(ix as f64 + 0.5) * 0.5, (iy as f64 + 0.5) * 0.5];
            let ray = target.pixel_to_ray(px, 0.0, f64::MAX)?;
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let out = renderer::render_rays(params, params, config, ctx, ctx, target, &[ray], rcfg, &mut rng)?;
            if out.hits.is_empty() {
                continue;
            }
            let sdf = out.sdf.values();
            let ratios: Vec<f64> = sdf.windows(2).map(|w| (phi(w[0]) - phi(w[1])) / phi(w[0])).collect();
            if ratios.iter().all(|r| r.abs() > 0.02) && ratios.iter().any(|&r| r > 0.05) {
                return Ok(ray);
            }
        }
    }
    Err(Error::invalid("no toy ray clear of the alpha clamp"))
}

fn renderer_checks(r: &mut Runner) -> Result<()> {
    let t = MODULE_TOL;
    let sdf = r.uniform(&[2, 5], -0.4, 0.6);
    let s = DualArray::vector(vec![4.0]);
    let w8 = weights_for(r, 8);
    r.check("sdf_to_alpha sdf", t, &sdf, |x| {
        contract(renderer::sdf_to_alpha_batch(x, &s)?, &w8)
    })?;
    r.check("sdf_to_alpha sharpness", t, &s, |x| {
        contract(renderer::sdf_to_alpha_batch(&sdf, x)?, &w8)
    })?;
    let alpha = r.uniform(&[2, 5], 0.05, 0.9);
    let w10 = weights_for(r, 10);
    r.check("transmittance_weights", t, &alpha, |x| {
        contract(renderer::transmittance_weights(x)?, &w10)
    })?;
    let qty = r.away_from_zero(&[2, 5, 3]);
    let w6 = weights_for(r, 6);
    r.check("composite alpha", t, &alpha, |x| {
        contract(renderer::composite(x, &qty)?.rendered, &w6)
    })?;
    r.check("composite quantity", t, &qty, |x| {
        contract(renderer::composite(&alpha, x)?.rendered, &w6)
    })?;

    let rcfg = RenderConfig {
        n_coarse: 4,
        n_fine: 0,
        stratified: false,
    };
    // Redraw the toy until some pixel's ray stays clear of the alpha clamp.
    let mut attempt = 0;
    let (config, params, views, bbox, coarse_ctx, ray) = loop {
        let (config, params, views, bbox) = toy_setup(r.rng.random())?;
        let sources: Vec<(&Camera, &Image)> = views[1..].iter().map(|(c, i)| (c, i)).collect();
        let ctx = SceneContext::build(&params, &config, &bbox, &sources, None)?;
        match clamp_free_ray(&params, &config, &ctx, &views[0].0, &rcfg) {
            Ok(ray) => break (config, params, views, bbox, ctx, ray),
            Err(e) if attempt >= 20 => return Err(e),
            Err(_) => attempt += 1,
        }
    };
    let target = &views[0].0;
    let sources: Vec<(&Camera, &Image)> = views[1..].iter().map(|(c, i)| (c, i)).collect();
    let rays = vec![ray];
    let wout = weights_for(r, rays.len() * 5);
    let render = |p: &ModelParams| -> Result<DualArray> {
        let ctx = SceneContext::build(p, &config, &bbox, &sources, None)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = renderer::render_rays(p, &params, &config, &ctx, &coarse_ctx, target, &rays, &rcfg, &mut rng)?;
        let all = DualArray::concat(&[&out.color, &out.depth, &out.acc], 1)?;
        contract(all, &wout)
    };
    for name in [
        "sharpness",
        "geometry.out.bias",
        "geometry.l2.weight",
        "blend.l1.weight",
        "ray.w_q",
        "epipolar.w_k",
        "psi.conv2.weight",
        "encoder.conv1.weight",
    ] {
        let base = params
            .named()
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, a)| a)
            .ok_or_else(|| Error::invalid(format!("no parameter {name}")))?;
        r.check(&format!("render_rays {name}"), t, &base, |x| {
            render(&params.map("", &mut |n, a| if n == name { x.clone() } else { a.clone() }))
        })?;
    }
    Ok(())
}

fn loss_checks(r: &mut Runner) -> Result<()> {
    let t = MODULE_TOL;
    let pred = r.uniform(&[6, 3], 0.0, 1.0);
    let gt: Vec<f64> = pred
        .values()
        .iter()
        .enumerate()
        .map(|(i, v)| v + if i % 2 == 0 { 0.2 } else { -0.3 })
        .collect();
    let mask = vec![true, false, true, true, true, false];
    r.check("color_loss", t, &pred, |x| losses::color_loss(x, &gt, &mask))?;
    let grads = r.away_from_zero(&[5, 3]);
    r.check("eikonal_from_gradients", t, &grads, losses::eikonal_from_gradients)?;
    let sdf = r.away_from_zero(&[7, 1]).scale(0.1)?;
    r.check("sparse_loss", t, &sdf, |x| losses::sparse_loss(x, 16.0))?;

    let k = 4;
    let depth = r.uniform(&[k * k, 1], 2.5, 3.5);
    let mono: Vec<f64> = (0..k * k)
        .map(|i| 1.0 + 0.1 * (i % k) as f64 + 0.05 * (i / k) as f64 + 0.01 * ((i * 7) % 5) as f64)
        .collect();
    let valid = vec![true; k * k];
    let triples = losses::sample_triples(&valid, 8, &mut r.rng);
    r.check("global_triplet_loss", t, &depth, |x| {
        Ok(losses::global_triplet_loss(x, &mono, &triples)?.0)
    })?;
    r.check("local_gradient_loss", t, &depth, |x| {
        Ok(losses::local_gradient_loss(x, &mono, &valid, k)?.0)
    })?;
    let weights = LossWeights::default();
    r.check("total_loss", t, &depth, |x| {
        let c = LossComponents {
            color: x.narrow(0, 0, 3)?.mean()?,
            eikonal: losses::eikonal_from_gradients(&x.narrow(0, 3, 6)?.reshape(vec![2, 3])?.scale(0.3)?)?,
            sparse: losses::sparse_loss(&x.scale(0.05)?, weights.tau)?,
            global: losses::global_triplet_loss(x, &mono, &triples)?.0,
            local: losses::local_gradient_loss(x, &mono, &valid, k)?.0,
        };
        losses::total_loss(&c, &weights)
    })?;
    Ok(())
}
