//! The closed forward op set. Every op records a node when any operand is
//! attached to a tape.

use super::DualArray;
use crate::error::{Error, Result};

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::Shape {
                    op,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

/// For each flat output index, the flat index of the broadcast input.
fn broadcast_map(out: &[usize], input: &[usize]) -> Vec<usize> {
    let n: usize = out.iter().product();
    let rank = out.len();
    let offset = rank - input.len();
    let mut strides = vec![0usize; rank];
    let mut s = 1;
    for i in (0..input.len()).rev() {
        if input[i] != 1 {
            strides[i + offset] = s;
        }
        s *= input[i];
    }
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut flat = 0usize;
    for _ in 0..n {
        map.push(flat);
        for d in (0..rank).rev() {
            idx[d] += 1;
            flat += strides[d];
            if idx[d] < out[d] {
                break;
            }
            flat -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

fn reduce_into(map: &[usize], g: &[f64], len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len];
    for (&m, &v) in map.iter().zip(g) {
        out[m] += v;
    }
    out
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
    Max,
}

impl DualArray {
    fn binary(&self, other: &DualArray, kind: Binary) -> Result<DualArray> {
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
            Binary::Max => "maximum",
        };
        let shape = broadcast_shape(name, self.shape(), other.shape())?;
        let same = self.shape() == other.shape();
        let (ma, mb) = if same {
            (None, None)
        } else {
            (
                Some(broadcast_map(&shape, self.shape())),
                Some(broadcast_map(&shape, other.shape())),
            )
        };
        let a = self.data_rc();
        let b = other.data_rc();
        let n: usize = shape.iter().product();
        let ia = |i: usize| ma.as_ref().map_or(i, |m| m[i]);
        let ib = |i: usize| mb.as_ref().map_or(i, |m| m[i]);
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let (x, y) = (a[ia(i)], b[ib(i)]);
            out.push(match kind {
                Binary::Add => x + y,
                Binary::Sub => x - y,
                Binary::Mul => x * y,
                Binary::Div => {
                    if y == 0.0 {
                        return Err(Error::Domain {
                            op: "div",
                            detail: "division by zero".into(),
                        });
                    }
                    x / y
                }
                Binary::Max => x.max(y),
            });
        }
        let (la, lb) = (self.len(), other.len());
        DualArray::custom(&[self, other], shape, out, move |g, needs| {
            let ia = |i: usize| ma.as_ref().map_or(i, |m| m[i]);
            let ib = |i: usize| mb.as_ref().map_or(i, |m| m[i]);
            let mut ga = needs[0].then(|| vec![0.0; la]);
            let mut gb = needs[1].then(|| vec![0.0; lb]);
            for (i, &gi) in g.iter().enumerate() {
                let (ja, jb) = (ia(i), ib(i));
                let (x, y) = (a[ja], b[jb]);
                let (da, db) = match kind {
                    Binary::Add => (gi, gi),
                    Binary::Sub => (gi, -gi),
                    Binary::Mul => (gi * y, gi * x),
                    Binary::Div => (gi / y, -gi * x / (y * y)),
                    // ties route the gradient to the left operand
                    Binary::Max => {
                        if x >= y {
                            (gi, 0.0)
                        } else {
                            (0.0, gi)
                        }
                    }
                };
                if let Some(ga) = ga.as_mut() {
                    ga[ja] += da;
                }
                if let Some(gb) = gb.as_mut() {
                    gb[jb] += db;
                }
            }
            vec![ga, gb]
        })
    }

    pub fn add(&self, other: &DualArray) -> Result<DualArray> {
        self.binary(other, Binary::Add)
    }

    pub fn sub(&self, other: &DualArray) -> Result<DualArray> {
        self.binary(other, Binary::Sub)
    }

    pub fn mul(&self, other: &DualArray) -> Result<DualArray> {
        self.binary(other, Binary::Mul)
    }

    pub fn div(&self, other: &DualArray) -> Result<DualArray> {
        self.binary(other, Binary::Div)
    }

    /// Elementwise maximum of two arrays.
    pub fn maximum(&self, other: &DualArray) -> Result<DualArray> {
        self.binary(other, Binary::Max)
    }

    /// Elementwise map with derivative `df(x, f(x))`.
    fn unary(&self, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Result<DualArray> {
        let x = self.data_rc();
        let y: Vec<f64> = x.iter().map(|&v| f(v)).collect();
        let y_saved = std::rc::Rc::new(y.clone());
        DualArray::custom(&[self], self.shape().to_vec(), y, move |g, _| {
            vec![Some(
                g.iter()
                    .zip(x.iter().zip(y_saved.iter()))
                    .map(|(gi, (&xi, &yi))| gi * df(xi, yi))
                    .collect(),
            )]
        })
    }

    pub fn neg(&self) -> Result<DualArray> {
        self.unary(|x| -x, |_, _| -1.0)
    }

    pub fn scale(&self, c: f64) -> Result<DualArray> {
        self.unary(move |x| c * x, move |_, _| c)
    }

    pub fn add_scalar(&self, c: f64) -> Result<DualArray> {
        self.unary(move |x| x + c, |_, _| 1.0)
    }

    pub fn exp(&self) -> Result<DualArray> {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn log(&self) -> Result<DualArray> {
        if let Some(v) = self.values().iter().find(|v| **v <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {v}"),
            });
        }
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    pub fn sqrt(&self) -> Result<DualArray> {
        if let Some(v) = self.values().iter().find(|v| **v < 0.0) {
            return Err(Error::Domain {
                op: "sqrt",
                detail: format!("negative input {v}"),
            });
        }
        self.unary(f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn square(&self) -> Result<DualArray> {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    /// Absolute value; the subgradient at 0 is taken as 0.
    pub fn abs(&self) -> Result<DualArray> {
        self.unary(f64::abs, |x, _| x.signum() * (x != 0.0) as u8 as f64)
    }

    pub fn elu(&self) -> Result<DualArray> {
        self.unary(elu, |x, y| if x > 0.0 { 1.0 } else { y + 1.0 })
    }

    pub fn sigmoid(&self) -> Result<DualArray> {
        self.unary(sigmoid, |_, y| y * (1.0 - y))
    }

    /// `max(x, c)` against a constant.
    pub fn max_scalar(&self, c: f64) -> Result<DualArray> {
        self.unary(move |x| x.max(c), move |x, _| if x >= c { 1.0 } else { 0.0 })
    }

    pub fn sum(&self) -> Result<DualArray> {
        let n = self.len();
        let s = self.values().iter().sum();
        DualArray::custom(&[self], vec![1], vec![s], move |g, _| vec![Some(vec![g[0]; n])])
    }

    pub fn mean(&self) -> Result<DualArray> {
        let n = self.len() as f64;
        self.sum()?.scale(1.0 / n)
    }

    /// Sum over `axis`, removing it (a rank-1 input reduces to shape `[1]`).
    pub fn sum_axis(&self, axis: usize) -> Result<DualArray> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(format!("axis {axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.values();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let base = (o * len + k) * inner;
                for i in 0..inner {
                    out[o * inner + i] += x[base + i];
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        DualArray::custom(&[self], out_shape, out, move |g, _| {
            let mut gx = vec![0.0; outer * len * inner];
            for o in 0..outer {
                for k in 0..len {
                    let base = (o * len + k) * inner;
                    gx[base..base + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(gx)]
        })
    }

    pub fn mean_axis(&self, axis: usize) -> Result<DualArray> {
        let n = *self
            .shape()
            .get(axis)
            .ok_or_else(|| Error::invalid(format!("axis {axis} out of range")))?;
        self.sum_axis(axis)?.scale(1.0 / n as f64)
    }

    /// Population variance (divisor N) over `axis`.
    pub fn variance_axis(&self, axis: usize) -> Result<DualArray> {
        let mean = self.mean_axis(axis)?;
        let mut keep = self.shape().to_vec();
        keep[axis] = 1;
        let centered = self.sub(&mean.reshape(keep)?)?;
        centered.square()?.mean_axis(axis)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, other: &DualArray) -> Result<DualArray> {
        let (a, b) = (self.shape(), other.shape());
        if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        }
        let (m, k, n) = (a[0], a[1], b[1]);
        let av = self.data_rc();
        let bv = other.data_rc();
        let out = gemm(m, k, n, &av, false, &bv, false);
        DualArray::custom(&[self, other], vec![m, n], out, move |g, needs| {
            // dA = G B^T, dB = A^T G
            let ga = needs[0].then(|| gemm(m, n, k, g, false, &bv, true));
            let gb = needs[1].then(|| gemm(k, m, n, &av, true, g, false));
            vec![ga, gb]
        })
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<DualArray> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.len() || shape.contains(&0) {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape,
            });
        }
        DualArray::custom(&[self], shape, self.to_vec(), |g, _| vec![Some(g.to_vec())])
    }

    pub fn broadcast_to(&self, shape: impl Into<Vec<usize>>) -> Result<DualArray> {
        let shape = shape.into();
        let full = broadcast_shape("broadcast_to", self.shape(), &shape)?;
        if full != shape {
            return Err(Error::Shape {
                op: "broadcast_to",
                lhs: self.shape().to_vec(),
                rhs: shape,
            });
        }
        let map = broadcast_map(&shape, self.shape());
        let x = self.values();
        let out = map.iter().map(|&i| x[i]).collect();
        let len = self.len();
        DualArray::custom(&[self], shape, out, move |g, _| vec![Some(reduce_into(&map, g, len))])
    }

    pub fn permute(&self, axes: &[usize]) -> Result<DualArray> {
        let shape = self.shape().to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len()
            || axes
                .iter()
                .any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true))
        {
            return Err(Error::invalid(format!(
                "permute: {axes:?} is not a permutation of rank {}",
                shape.len()
            )));
        }
        let in_strides = strides(&shape);
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let perm_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let map = broadcast_map_with_strides(&out_shape, &perm_strides);
        let x = self.values();
        let out = map.iter().map(|&i| x[i]).collect();
        let len = self.len();
        DualArray::custom(&[self], out_shape, out, move |g, _| {
            vec![Some(reduce_into(&map, g, len))]
        })
    }

    pub fn concat(parts: &[&DualArray], axis: usize) -> Result<DualArray> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat of zero arrays"))?;
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::invalid(format!("concat axis {axis} out of range")));
        }
        for p in parts {
            let ok = p.rank() == rank && (0..rank).all(|d| d == axis || p.shape()[d] == first.shape()[d]);
            if !ok {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let widths: Vec<usize> = parts.iter().map(|p| p.shape()[axis] * inner).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&p.values()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total / inner;
        let widths_b = widths.clone();
        DualArray::custom(parts, shape, out, move |g, needs| {
            let mut grads: Vec<Option<Vec<f64>>> = needs
                .iter()
                .zip(&widths_b)
                .map(|(&n, &w)| n.then(|| Vec::with_capacity(outer * w)))
                .collect();
            for o in 0..outer {
                let mut off = o * total;
                for (gp, &w) in grads.iter_mut().zip(&widths_b) {
                    if let Some(gp) = gp {
                        gp.extend_from_slice(&g[off..off + w]);
                    }
                    off += w;
                }
            }
            grads
        })
    }

    /// Contiguous slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<DualArray> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::invalid(format!(
                "narrow({axis}, {start}, {len}) out of range for {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let full = shape[axis] * inner;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full + start * inner;
            out.extend_from_slice(&self.values()[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let total = self.len();
        DualArray::custom(&[self], out_shape, out, move |g, _| {
            let mut gx = vec![0.0; total];
            for o in 0..outer {
                let base = o * full + start * inner;
                gx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(gx)]
        })
    }

    /// Selects rows (entries along axis 0) by index; indices may repeat.
    pub fn gather_rows(&self, rows: &[usize]) -> Result<DualArray> {
        let n = self.shape()[0];
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::invalid(format!("row {bad} out of range ({n} rows)")));
        }
        if rows.is_empty() {
            return Err(Error::invalid("gather_rows with no rows"));
        }
        let width = self.len() / n;
        let mut out = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            out.extend_from_slice(&self.values()[r * width..(r + 1) * width]);
        }
        let mut shape = self.shape().to_vec();
        shape[0] = rows.len();
        let rows = rows.to_vec();
        let total = self.len();
        DualArray::custom(&[self], shape, out, move |g, _| {
            let mut gx = vec![0.0; total];
            for (i, &r) in rows.iter().enumerate() {
                for c in 0..width {
                    gx[r * width + c] += g[i * width + c];
                }
            }
            vec![Some(gx)]
        })
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&self) -> Result<DualArray> {
        let width = *self.shape().last().expect("non-empty shape");
        let x = self.values();
        let mut out = Vec::with_capacity(x.len());
        for row in x.chunks(width) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            out.extend(e.iter().map(|v| v / s));
        }
        let y = std::rc::Rc::new(out.clone());
        DualArray::custom(&[self], self.shape().to_vec(), out, move |g, _| {
            let mut gx = Vec::with_capacity(g.len());
            for (gr, yr) in g.chunks(width).zip(y.chunks(width)) {
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                gx.extend(gr.iter().zip(yr).map(|(gi, yi)| yi * (gi - dot)));
            }
            vec![Some(gx)]
        })
    }
}

fn broadcast_map_with_strides(out: &[usize], strides: &[usize]) -> Vec<usize> {
    let n: usize = out.iter().product();
    let rank = out.len();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut flat = 0usize;
    for _ in 0..n {
        map.push(flat);
        for d in (0..rank).rev() {
            idx[d] += 1;
            flat += strides[d];
            if idx[d] < out[d] {
                break;
            }
            flat -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `C[m,n] = op(A) op(B)` with `op` an optional transpose; inputs row-major
/// in their stored (untransposed) layout.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], trans_a: bool, b: &[f64], trans_b: bool) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    // stored A is [m,k] (or [k,m] when transposed); same for B
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: pointers and strides describe the full extents of `a`, `b` and `c`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::{grad_check, Tape};

    fn v(x: &[f64]) -> DualArray {
        DualArray::vector(x.to_vec())
    }

    #[test]
    fn identities() {
        assert_eq!(v(&[0.0]).elu().unwrap().item(), 0.0);
        assert_eq!(v(&[0.0]).sigmoid().unwrap().item(), 0.5);
        assert_eq!(v(&[1.0, 2.0, 3.0]).mean().unwrap().item(), 2.0);
        let var = v(&[1.0, 3.0]).reshape(vec![2, 1]).unwrap().variance_axis(0).unwrap();
        assert_eq!(var.item(), 1.0);
    }

    #[test]
    fn identity_matmul() {
        let eye = DualArray::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let a = DualArray::new(vec![3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(eye.matmul(&a).unwrap(), a);
    }

    #[test]
    fn shape_errors_report_both_shapes() {
        let a = DualArray::zeros(vec![2, 3]);
        let b = DualArray::zeros(vec![2, 3]);
        match a.matmul(&b) {
            Err(Error::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(DualArray::zeros(vec![3]).add(&DualArray::zeros(vec![2])).is_err());
    }

    #[test]
    fn log_domain() {
        assert!(matches!(v(&[1.0, 0.0]).log(), Err(Error::Domain { op: "log", .. })));
        assert!(v(&[-1.0]).sqrt().is_err());
    }

    #[test]
    fn basic_gradients() {
        let tape = Tape::new();
        let x = tape.leaf(DualArray::scalar(3.0));
        let g = tape.backward(&x.mul(&x).unwrap()).unwrap();
        assert_eq!(g.get(&x).item(), 6.0);

        let tape = Tape::new();
        let x = tape.leaf(v(&[1.0, 2.0, 3.0, 4.0]));
        let g = tape.backward(&x.mean().unwrap()).unwrap();
        assert_eq!(g.get(&x).values(), &[0.25; 4]);

        let tape = Tape::new();
        let x = tape.leaf(DualArray::scalar(0.0));
        let g = tape.backward(&x.sigmoid().unwrap()).unwrap();
        assert_eq!(g.get(&x).item(), 0.25);
    }

    #[test]
    fn broadcasting_forward_and_backward() {
        let a = DualArray::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = DualArray::new(vec![3], vec![10., 20., 30.]).unwrap();
        let c = a.add(&b).unwrap();
        assert_eq!(c.values(), &[11., 22., 33., 14., 25., 36.]);
        let col = DualArray::new(vec![2, 1], vec![2., 3.]).unwrap();
        let d = a.mul(&col).unwrap();
        assert_eq!(d.values(), &[2., 4., 6., 12., 15., 18.]);
        let err = grad_check(|x| a.mul(x)?.sum(), &col, 1e-5).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn permute_and_concat() {
        let a = DualArray::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let t = a.permute(&[1, 0]).unwrap();
        assert_eq!(t.shape(), &[3, 2]);
        assert_eq!(t.values(), &[1., 4., 2., 5., 3., 6.]);
        let c = DualArray::concat(&[&a, &a], 1).unwrap();
        assert_eq!(c.shape(), &[2, 6]);
        assert_eq!(c.values()[3..6], [1., 2., 3.]);
        let n = c.narrow(1, 2, 3).unwrap();
        assert_eq!(n.values(), &[3., 1., 2., 6., 4., 5.]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let a = DualArray::new(vec![2, 3], vec![1., 2., 3., -1., 0., 50.]).unwrap();
        let s = a.softmax_last().unwrap();
        for row in s.values().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
    }
}
