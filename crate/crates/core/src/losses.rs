//! Training objectives: colour L1, eikonal, sparsity, the affine-invariant
//! global triplet depth loss, the local depth-gradient direction loss, and
//! their weighted sum.

use std::collections::BTreeSet;

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::diff::{DualArray, Tape};
use crate::error::{Error, Result};
use crate::geometry::Vec3;

/// Lower bound on gradient norms in the cosine of [`local_gradient_loss`].
pub const COSINE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// Eikonal.
    pub lambda1: f64,
    /// Sparsity.
    pub lambda2: f64,
    /// Global triplet.
    pub lambda3: f64,
    /// Local gradient.
    pub lambda4: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.1,
            lambda2: 0.02,
            lambda3: 0.05,
            lambda4: 0.05,
            tau: 16.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let l = [self.lambda1, self.lambda2, self.lambda3, self.lambda4];
        if l.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::invalid(format!("loss weights must be finite and >= 0: {l:?}")));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::invalid(format!("tau must be positive, got {}", self.tau)));
        }
        Ok(())
    }
}

/// Mean absolute error over masked rows and all channels. `pred: [n, k]`,
/// `gt` row-major `n * k`.
pub fn color_loss(pred: &DualArray, gt: &[f64], mask: &[bool]) -> Result<DualArray> {
    if pred.rank() != 2 || pred.len() != gt.len() || mask.len() != pred.shape()[0] {
        return Err(Error::invalid("color_loss: prediction, target and mask disagree"));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::invalid("color_loss: empty mask"));
    }
    let k = pred.shape()[1];
    let target = DualArray::from_parts(pred.shape().to_vec(), gt.to_vec());
    let m: Vec<f64> = mask.iter().map(|&b| b as u8 as f64).collect();
    let m = DualArray::from_parts(vec![mask.len(), 1], m);
    pred.sub(&target)?
        .abs()?
        .mul(&m)?
        .sum()?
        .scale(1.0 / (count * k) as f64)
}

/// Exact eikonal residual of `sdf_fn` (which maps `[M, 3]` positions to `M`
/// values, each depending only on its own row) via one backward pass with
/// the positions as leaves.
pub fn eikonal_loss(sdf_fn: impl Fn(&DualArray) -> Result<DualArray>, points: &[Vec3]) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::invalid("eikonal_loss: no points"));
    }
    let tape = Tape::new();
    let flat = points.iter().flatten().copied().collect();
    let x = tape.leaf(DualArray::new(vec![points.len(), 3], flat)?);
    let y = sdf_fn(&x)?;
    if y.len() != points.len() {
        return Err(Error::invalid("eikonal_loss: sdf_fn must return one value per point"));
    }
    let g = tape.backward(&y.sum()?)?.get(&x);
    let total: f64 = g
        .values()
        .chunks(3)
        .map(|v| {
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            (n - 1.0) * (n - 1.0)
        })
        .sum();
    Ok(total / points.len() as f64)
}

/// Differentiable eikonal residual from spatial gradients `[M, 3]`.
pub fn eikonal_from_gradients(grad: &DualArray) -> Result<DualArray> {
    grad.square()?
        .sum_axis(1)?
        .add_scalar(1e-12)?
        .sqrt()?
        .add_scalar(-1.0)?
        .square()?
        .mean()
}

/// Mean of `exp(-tau |sdf|)`.
pub fn sparse_loss(sdf: &DualArray, tau: f64) -> Result<DualArray> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("tau must be positive, got {tau}")));
    }
    sdf.abs()?.scale(-tau)?.exp()?.mean()
}

/// Ray index triple `(s, 1, 2)`.
pub type Triple = (usize, usize, usize);

/// Mean over triples of `((p1-ps)(m2-ms) - (p2-ps)(m1-ms))^2`. Returns
/// zero and `false` when there are no triples.
pub fn global_triplet_loss(pred: &DualArray, mono: &[f64], triples: &[Triple]) -> Result<(DualArray, bool)> {
    if pred.len() != mono.len() {
        return Err(Error::invalid("global_triplet_loss: depth lengths differ"));
    }
    if triples.is_empty() {
        return Ok((DualArray::scalar(0.0), false));
    }
    if triples.iter().any(|&(s, a, b)| s.max(a).max(b) >= mono.len()) {
        return Err(Error::invalid("global_triplet_loss: triple index out of range"));
    }
    let p = pred.reshape(vec![pred.len(), 1])?;
    let pick = |f: fn(&Triple) -> usize| -> Result<DualArray> {
        let rows: Vec<usize> = triples.iter().map(f).collect();
        p.gather_rows(&rows)
    };
    let (ps, p1, p2) = (pick(|t| t.0)?, pick(|t| t.1)?, pick(|t| t.2)?);
    let n = triples.len();
    let dm = |f: fn(&Triple) -> usize| {
        DualArray::from_parts(vec![n, 1], triples.iter().map(|t| mono[f(t)] - mono[t.0]).collect())
    };
    let (m1, m2) = (dm(|t| t.1), dm(|t| t.2));
    let cross = p1.sub(&ps)?.mul(&m2)?.sub(&p2.sub(&ps)?.mul(&m1)?)?;
    Ok((cross.square()?.mean()?, true))
}

/// Direction disagreement of forward-difference depth gradients on a
/// `size x size` patch (row-major): mean of `(1 - cos)^2`, with gradient
/// norms floored at [`COSINE_EPS`] in the cosine's denominator. A pixel
/// counts when it and its right and lower neighbours are all valid.
/// Returns zero and `false` when no pixel counts.
pub fn local_gradient_loss(pred: &DualArray, mono: &[f64], mask: &[bool], size: usize) -> Result<(DualArray, bool)> {
    if size < 2 || pred.len() != size * size || mono.len() != pred.len() || mask.len() != pred.len() {
        return Err(Error::invalid(
            "local_gradient_loss: expects matching patches of at least 2x2",
        ));
    }
    let mut terms = Vec::new();
    for y in 0..size - 1 {
        for x in 0..size - 1 {
            let (i, r, d) = (y * size + x, y * size + x + 1, (y + 1) * size + x);
            if mask[i] && mask[r] && mask[d] {
                terms.push((i, r, d));
            }
        }
    }
    if terms.is_empty() {
        return Ok((DualArray::scalar(0.0), false));
    }
    let p = pred.data_rc();
    let count = terms.len() as f64;
    let mut loss = 0.0;
    // per term: (a, m, |a|, |m|, cos)
    let mut saved = Vec::with_capacity(terms.len());
    for &(i, r, d) in &terms {
        let a = [p[r] - p[i], p[d] - p[i]];
        let m = [mono[r] - mono[i], mono[d] - mono[i]];
        let (na, nm) = (a[0].hypot(a[1]), m[0].hypot(m[1]));
        let cos = (a[0] * m[0] + a[1] * m[1]) / (na.max(COSINE_EPS) * nm.max(COSINE_EPS));
        loss += (1.0 - cos) * (1.0 - cos);
        saved.push((a, m, na, nm, cos));
    }
    let n = pred.len();
    let out = DualArray::custom(&[pred], vec![1], vec![loss / count], move |g, _| {
        let mut gp = vec![0.0; n];
        for (&(i, r, d), &(a, m, na, nm, cos)) in terms.iter().zip(&saved) {
            let outer = g[0] * 2.0 * (cos - 1.0) / count;
            let den = na.max(COSINE_EPS) * nm.max(COSINE_EPS);
            let mut da = [m[0] / den, m[1] / den];
            if na > COSINE_EPS {
                let k = cos / (na * na);
                da[0] -= k * a[0];
                da[1] -= k * a[1];
            }
            gp[r] += outer * da[0];
            gp[d] += outer * da[1];
            gp[i] -= outer * (da[0] + da[1]);
        }
        vec![Some(gp)]
    })?;
    Ok((out, true))
}

/// Draws up to `count` distinct triples of distinct valid indices.
pub fn sample_triples(valid: &[bool], count: usize, rng: &mut impl Rng) -> Vec<Triple> {
    let idx: Vec<usize> = (0..valid.len()).filter(|&i| valid[i]).collect();
    if idx.len() < 3 {
        return Vec::new();
    }
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count * 20 {
        if out.len() == count {
            break;
        }
        let pick: Vec<usize> = idx.choose_multiple(rng, 3).copied().collect();
        let t = (pick[0], pick[1], pick[2]);
        if seen.insert(t) {
            out.push(t);
        }
    }
    out
}

/// The five loss terms of one batch.
#[derive(Debug, Clone)]
pub struct LossComponents {
    pub color: DualArray,
    pub eikonal: DualArray,
    pub sparse: DualArray,
    pub global: DualArray,
    pub local: DualArray,
}

impl LossComponents {
    pub fn values(&self) -> [f64; 5] {
        [
            self.color.item(),
            self.eikonal.item(),
            self.sparse.item(),
            self.global.item(),
            self.local.item(),
        ]
    }
}

/// `L_color + λ1 L_eik + λ2 L_sparse + λ3 L_global + λ4 L_local`.
pub fn total_loss(c: &LossComponents, w: &LossWeights) -> Result<DualArray> {
    c.color
        .add(&c.eikonal.scale(w.lambda1)?)?
        .add(&c.sparse.scale(w.lambda2)?)?
        .add(&c.global.scale(w.lambda3)?)?
        .add(&c.local.scale(w.lambda4)?)
}

pub const CSV_HEADER: &str = "iter,L_color,L_eik,L_sparse,L_global,L_local,total";

/// One metrics row; floats use the shortest round-trip representation.
pub fn csv_row(iter: usize, components: [f64; 5], total: f64) -> String {
    let mut row = iter.to_string();
    for v in components.iter().chain([total].iter()) {
        row.push(',');
        row.push_str(&format!("{v:?}"));
    }
    row
}
