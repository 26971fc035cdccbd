//! Epipolar cross-attention, ray self-attention and the two decoders.
//!
//! All attention here is linearised with the kernel `phi(x) = elu(x) + 1`:
//! `out_i = phi(q_i)^T S / phi(q_i)^T z` with `S = sum_j phi(k_j) v_j^T` and
//! `z = sum_j phi(k_j)`, one pass over the keys.
//!
//! In the epipolar stage the query of a sample is the same for every view,
//! so the fused feature `X` does not vary along the view axis. The batched
//! entry points therefore carry `X` as `[M, C]` (one row per sample);
//! [`epipolar_aggregate`] expands it to the full `[N_S, N_V, C]` layout.

use rand::Rng;

use crate::diff::{elu, DualArray};
use crate::error::{Error, Result};
use crate::geometry::{self, Camera, Vec3};
use crate::params::{glorot, join, Linear, ParamSet};

const MIN_DENOMINATOR: f64 = 1e-12;

/// `elu(x) + 1`, strictly positive.
pub fn phi(x: &DualArray) -> Result<DualArray> {
    x.elu()?.add_scalar(1.0)
}

fn phi_scalar(x: f64) -> f64 {
    elu(x) + 1.0
}

fn phi_deriv(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        x.exp()
    }
}

/// Multi-head linearised attention over independent groups.
///
/// `q: [G*Nq, C]`, `k, v: [G*Nk, C]`; rows of group `g` are contiguous.
/// Channels are split into `heads` blocks of `C / heads`.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(y, &x)| *y += alpha * x);
}

pub fn grouped_attention(
    q: &DualArray,
    k: &DualArray,
    v: &DualArray,
    groups: usize,
    heads: usize,
) -> Result<DualArray> {
    if q.rank() != 2 || k.rank() != 2 || v.shape() != k.shape() || q.shape()[1] != k.shape()[1] {
        return Err(Error::Shape {
            op: "attention",
            lhs: q.shape().to_vec(),
            rhs: k.shape().to_vec(),
        });
    }
    let c = q.shape()[1];
    if heads == 0 || c % heads != 0 {
        return Err(Error::invalid(format!("{c} channels do not split into {heads} heads")));
    }
    if groups == 0 || q.shape()[0] % groups != 0 || k.shape()[0] % groups != 0 {
        return Err(Error::invalid("attention rows do not split into groups"));
    }
    let nq = q.shape()[0] / groups;
    let nk = k.shape()[0] / groups;
    let d = c / heads;
    let (qd, kd, vd) = (q.data_rc(), k.data_rc(), v.data_rc());
    let pq: Vec<f64> = qd.iter().map(|&x| phi_scalar(x)).collect();
    let pk: Vec<f64> = kd.iter().map(|&x| phi_scalar(x)).collect();
    // per (group, head): S [d, d] and z [d]
    let mut s_all = vec![0.0; groups * heads * d * d];
    let mut z_all = vec![0.0; groups * heads * d];
    let mut den_all = vec![0.0; groups * nq * heads];
    let mut out = vec![0.0; groups * nq * c];
    for g in 0..groups {
        for h in 0..heads {
            let gh = g * heads + h;
            let s = &mut s_all[gh * d * d..(gh + 1) * d * d];
            let z = &mut z_all[gh * d..(gh + 1) * d];
            for j in 0..nk {
                let row = (g * nk + j) * c + h * d;
                let vrow = &vd[row..row + d];
                for (a, &ka) in pk[row..row + d].iter().enumerate() {
                    z[a] += ka;
                    axpy(ka, vrow, &mut s[a * d..(a + 1) * d]);
                }
            }
            for i in 0..nq {
                let row = (g * nq + i) * c + h * d;
                let prow = &pq[row..row + d];
                let den = dot(prow, z);
                if !(den >= MIN_DENOMINATOR) {
                    return Err(Error::Domain {
                        op: "attention",
                        detail: format!("denominator {den:e} below {MIN_DENOMINATOR:e}"),
                    });
                }
                den_all[(g * nq + i) * heads + h] = den;
                let orow = &mut out[row..row + d];
                for (a, &pa) in prow.iter().enumerate() {
                    axpy(pa / den, &s[a * d..(a + 1) * d], orow);
                }
            }
        }
    }
    let out_saved = out.clone();
    let (qlen, klen) = (q.len(), k.len());
    DualArray::custom(&[q, k, v], vec![groups * nq, c], out, move |go, needs| {
        let mut gq = vec![0.0; qlen];
        let mut gk = vec![0.0; klen];
        let mut gv = vec![0.0; klen];
        let mut gs = vec![0.0; d * d];
        let mut gz = vec![0.0; d];
        let mut gnum = vec![0.0; d];
        for g in 0..groups {
            for h in 0..heads {
                let gh = g * heads + h;
                let s = &s_all[gh * d * d..(gh + 1) * d * d];
                let z = &z_all[gh * d..(gh + 1) * d];
                gs.iter_mut().for_each(|x| *x = 0.0);
                gz.iter_mut().for_each(|x| *x = 0.0);
                for i in 0..nq {
                    let row = (g * nq + i) * c + h * d;
                    let den = den_all[(g * nq + i) * heads + h];
                    // d out_b / d num_b = 1/den ; d out_b / d den = -out_b/den
                    let gden = -dot(&go[row..row + d], &out_saved[row..row + d]) / den;
                    gnum.iter_mut().zip(&go[row..row + d]).for_each(|(x, &g)| *x = g / den);
                    for a in 0..d {
                        let pa = pq[row + a];
                        let gpa = z[a] * gden + dot(&s[a * d..(a + 1) * d], &gnum);
                        axpy(pa, &gnum, &mut gs[a * d..(a + 1) * d]);
                        gz[a] += pa * gden;
                        gq[row + a] = gpa * phi_deriv(qd[row + a]);
                    }
                }
                for j in 0..nk {
                    let row = (g * nk + j) * c + h * d;
                    let vrow = &vd[row..row + d];
                    for a in 0..d {
                        let gsrow = &gs[a * d..(a + 1) * d];
                        gk[row + a] = (gz[a] + dot(gsrow, vrow)) * phi_deriv(kd[row + a]);
                        axpy(pk[row + a], gsrow, &mut gv[row..row + d]);
                    }
                }
            }
        }
        vec![needs[0].then_some(gq), needs[1].then_some(gk), needs[2].then_some(gv)]
    })
}

/// Single-head linearised attention, `q: [N, d]`, `k, v: [N_k, d]`.
pub fn linearized_attention(q: &DualArray, k: &DualArray, v: &DualArray) -> Result<DualArray> {
    grouped_attention(q, k, v, 1, 1)
}

/// Epipolar-stage projections. Keys and values see the feature plus the
/// validity flag, hence `C + 1` input rows.
#[derive(Debug, Clone)]
pub struct EpipolarParams {
    pub w_q: DualArray,
    pub w_k: DualArray,
    pub w_v: DualArray,
}

impl EpipolarParams {
    pub fn init(rng: &mut impl Rng, channels: usize) -> Self {
        Self {
            w_q: glorot(rng, channels, channels),
            w_k: glorot(rng, channels + 1, channels),
            w_v: glorot(rng, channels + 1, channels),
        }
    }
}

impl ParamSet for EpipolarParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &DualArray)) {
        f(join(prefix, "w_q"), &self.w_q);
        f(join(prefix, "w_k"), &self.w_k);
        f(join(prefix, "w_v"), &self.w_v);
    }

    fn map(&self, prefix: &str, f: &mut dyn FnMut(&str, &DualArray) -> DualArray) -> Self {
        Self {
            w_q: f(&join(prefix, "w_q"), &self.w_q),
            w_k: f(&join(prefix, "w_k"), &self.w_k),
            w_v: f(&join(prefix, "w_v"), &self.w_v),
        }
    }
}

/// Appends the 0/1 validity column to view-major epipolar features
/// `[N_V * M, C]`, zeroing rows of invalid entries.
pub fn with_mask_channel(f_e: &DualArray, mask: &[bool]) -> Result<DualArray> {
    if f_e.rank() != 2 || f_e.shape()[0] != mask.len() {
        return Err(Error::invalid("epipolar mask does not match feature rows"));
    }
    let m: Vec<f64> = mask.iter().map(|&b| b as u8 as f64).collect();
    let col = DualArray::from_parts(vec![mask.len(), 1], m);
    let zeroed = f_e.mul(&col)?;
    DualArray::concat(&[&zeroed, &col], 1)
}

/// Batched epipolar fusion. `f_b: [M, C]`, `f_em: [N_V * M, C + 1]`
/// (view-major, mask channel last). Returns `X` as `[M, C]`.
pub fn epipolar_fuse(
    f_b: &DualArray,
    f_em: &DualArray,
    n_views: usize,
    params: &EpipolarParams,
    heads: usize,
) -> Result<DualArray> {
    let (m, c) = (f_b.shape()[0], f_b.shape()[1]);
    if f_em.shape() != [n_views * m, c + 1] {
        return Err(Error::Shape {
            op: "epipolar_fuse",
            lhs: f_b.shape().to_vec(),
            rhs: f_em.shape().to_vec(),
        });
    }
    if c % heads != 0 {
        return Err(Error::invalid(format!("{c} channels do not split into {heads} heads")));
    }
    let q = f_b.matmul(&params.w_q)?;
    let regroup = |w: &DualArray| -> Result<DualArray> {
        f_em.matmul(w)?
            .reshape(vec![n_views, m, c])?
            .permute(&[1, 0, 2])?
            .reshape(vec![m * n_views, c])
    };
    let k = regroup(&params.w_k)?;
    let v = regroup(&params.w_v)?;
    grouped_attention(&q, &k, &v, m, heads)
}

/// `F_B: [N_S, C]`, `F_E: [N_V, N_S, C]`, `mask: [N_V][N_S]` to
/// `X: [N_S, N_V, C]`.
pub fn epipolar_aggregate(
    f_b: &DualArray,
    f_e: &DualArray,
    mask: &[Vec<bool>],
    params: &EpipolarParams,
    heads: usize,
) -> Result<DualArray> {
    if f_e.rank() != 3 || f_b.rank() != 2 || f_e.shape()[1..] != f_b.shape()[..] {
        return Err(Error::Shape {
            op: "epipolar_aggregate",
            lhs: f_b.shape().to_vec(),
            rhs: f_e.shape().to_vec(),
        });
    }
    let (nv, ns, c) = (f_e.shape()[0], f_e.shape()[1], f_e.shape()[2]);
    let flat: Vec<bool> = mask.iter().flatten().copied().collect();
    let f_em = with_mask_channel(&f_e.reshape(vec![nv * ns, c])?, &flat)?;
    let x = epipolar_fuse(f_b, &f_em, nv, params, heads)?;
    x.reshape(vec![ns, 1, c])?.broadcast_to(&[ns, nv, c])
}

/// `x` followed by `sin(2^k pi x), cos(2^k pi x)` per coordinate,
/// `k = 0..L`.
pub fn positional_embedding(x: Vec3, freqs: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(3 + 6 * freqs);
    out.extend_from_slice(&x);
    for k in 0..freqs {
        let f = (1u64 << k) as f64 * std::f64::consts::PI;
        for &c in &x {
            out.push((f * c).sin());
        }
        for &c in &x {
            out.push((f * c).cos());
        }
    }
    out
}

pub fn embedding_width(freqs: usize) -> usize {
    3 + 6 * freqs
}

/// Embeddings of many points as a constant `[M, 3 + 6L]` array.
pub fn embed_points(points: &[Vec3], freqs: usize) -> DualArray {
    let data = points.iter().flat_map(|&p| positional_embedding(p, freqs)).collect();
    DualArray::from_parts(vec![points.len(), embedding_width(freqs)], data)
}

/// Ray-stage projections, `C' x C'`.
#[derive(Debug, Clone)]
pub struct RayParams {
    pub w_q: DualArray,
    pub w_k: DualArray,
    pub w_v: DualArray,
}

impl RayParams {
    pub fn init(rng: &mut impl Rng, width: usize) -> Self {
        Self {
            w_q: glorot(rng, width, width),
            w_k: glorot(rng, width, width),
            w_v: glorot(rng, width, width),
        }
    }
}

impl ParamSet for RayParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &DualArray)) {
        f(join(prefix, "w_q"), &self.w_q);
        f(join(prefix, "w_k"), &self.w_k);
        f(join(prefix, "w_v"), &self.w_v);
    }

    fn map(&self, prefix: &str, f: &mut dyn FnMut(&str, &DualArray) -> DualArray) -> Self {
        Self {
            w_q: f(&join(prefix, "w_q"), &self.w_q),
            w_k: f(&join(prefix, "w_k"), &self.w_k),
            w_v: f(&join(prefix, "w_v"), &self.w_v),
        }
    }
}

/// Batched ray self-attention. `x: [B * N_S, C]` holds the view-averaged
/// fused features of `B` rays; returns `X_hat: [B * N_S, C']`.
pub fn ray_attend(
    x: &DualArray,
    positions: &[Vec3],
    samples_per_ray: usize,
    params: &RayParams,
    freqs: usize,
    heads: usize,
    residual: bool,
) -> Result<DualArray> {
    if positions.len() != x.shape()[0] || samples_per_ray == 0 {
        return Err(Error::invalid("ray_attend: positions do not match feature rows"));
    }
    let emb = embed_points(positions, freqs);
    let xin = DualArray::concat(&[x, &emb], 1)?;
    let q = xin.matmul(&params.w_q)?;
    let k = xin.matmul(&params.w_k)?;
    let v = xin.matmul(&params.w_v)?;
    let out = grouped_attention(&q, &k, &v, positions.len() / samples_per_ray, heads)?;
    if residual {
        out.add(&xin)
    } else {
        Ok(out)
    }
}

/// `X: [N_S, N_V, C]` and sample positions to `X_hat: [N_S, C']`.
pub fn ray_aggregate(
    x: &DualArray,
    positions: &[Vec3],
    params: &RayParams,
    freqs: usize,
    heads: usize,
) -> Result<DualArray> {
    if x.rank() != 3 {
        return Err(Error::invalid(format!("expected [N_S, N_V, C], got {:?}", x.shape())));
    }
    let mean = x.mean_axis(1)?;
    ray_attend(&mean, positions, positions.len(), params, freqs, heads, false)
}

/// Two hidden ELU layers and a linear head.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn init(rng: &mut impl Rng, input: usize, hidden: usize, output: usize) -> Self {
        Self {
            l1: Linear::init(rng, input, hidden),
            l2: Linear::init(rng, hidden, hidden),
            out: Linear::init(rng, hidden, output),
        }
    }

    pub fn forward(&self, x: &DualArray) -> Result<DualArray> {
        let h = self.l1.forward(x)?.elu()?;
        let h = self.l2.forward(&h)?.elu()?;
        self.out.forward(&h)
    }
}

impl ParamSet for Mlp {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &DualArray)) {
        self.l1.visit(&join(prefix, "l1"), f);
        self.l2.visit(&join(prefix, "l2"), f);
        self.out.visit(&join(prefix, "out"), f);
    }

    fn map(&self, prefix: &str, f: &mut dyn FnMut(&str, &DualArray) -> DualArray) -> Self {
        Self {
            l1: self.l1.map(&join(prefix, "l1"), f),
            l2: self.l2.map(&join(prefix, "l2"), f),
            out: self.out.map(&join(prefix, "out"), f),
        }
    }
}

/// `X_hat: [M, C']` to signed distances `[M, 1]`.
pub fn geometry_decoder(xhat: &DualArray, mlp: &Mlp) -> Result<DualArray> {
    mlp.forward(xhat)
}

/// Per-view direction features of a sample: the unit direction from the
/// point to the source camera centre in target-camera coordinates, and its
/// dot product with the target ray direction.
pub fn direction_features(point: Vec3, source: &Camera, target: &Camera, ray_dir: Vec3) -> [f64; 4] {
    let to_src = geometry::normalize(geometry::sub(source.center(), point));
    let local = target.dir_to_camera(to_src);
    [local[0], local[1], local[2], geometry::dot(to_src, ray_dir)]
}

/// Blending weights `[M, N_V]`. `dirs` is view-major `[N_V * M, 4]`;
/// `valid` (view-major) removes views whose projection missed the image.
pub fn weight_decoder(
    xhat: &DualArray,
    x: &DualArray,
    dirs: &DualArray,
    valid: Option<&[bool]>,
    n_views: usize,
    mlp: &Mlp,
) -> Result<DualArray> {
    let m = xhat.shape()[0];
    if x.shape()[0] != m || dirs.shape() != [n_views * m, 4] {
        return Err(Error::invalid("weight_decoder: inconsistent shapes"));
    }
    let per_sample = DualArray::concat(&[xhat, x], 1)?;
    let width = per_sample.shape()[1];
    let tiled = per_sample
        .reshape(vec![1, m, width])?
        .broadcast_to(&[n_views, m, width])?
        .reshape(vec![n_views * m, width])?;
    let scores = mlp
        .forward(&DualArray::concat(&[&tiled, dirs], 1)?)?
        .reshape(vec![n_views, m])?
        .permute(&[1, 0])?;
    let scores = match valid {
        Some(valid) => {
            let mut bias = vec![0.0; m * n_views];
            for v in 0..n_views {
                for s in 0..m {
                    if !valid[v * m + s] {
                        bias[s * n_views + v] = -1e4;
                    }
                }
            }
            scores.add(&DualArray::from_parts(vec![m, n_views], bias))?
        }
        None => scores,
    };
    scores.softmax_last()
}
