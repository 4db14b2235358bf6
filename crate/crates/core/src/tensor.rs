//! Dense row-major tensors and the handful of numerical primitives the
//! segmentation head is written in.
//!
//! Every op here is a pure function with a fixed accumulation order, so the
//! same inputs always give bit-identical outputs.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};

use crate::error::{shape_err, Error, Result};

/// Scalar type a [`Tensor`] can hold. `f32` is the working precision, `f64`
/// is used for finite-difference checks.
pub trait Real:
    Float + FromPrimitive + Debug + Display + Default + Send + Sync + Sum + 'static
{
    /// GFST dtype tag.
    const DTYPE: u8;
    const BYTES: usize;

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("representable literal")
    }
}

impl Real for f32 {
    const DTYPE: u8 = 0;
    const BYTES: usize = 4;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Real for f64 {
    const DTYPE: u8 = 1;
    const BYTES: usize = 8;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    /// Builds a tensor, rejecting extent mismatches and non-finite scalars.
    pub fn new(dims: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(shape_err!(
                "dims {:?} need {} scalars, got {}",
                dims,
                expected,
                data.len()
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor {:?}", dims)));
        }
        Ok(Self { dims, data })
    }

    /// Internal constructor for op outputs; finiteness is only checked in
    /// debug builds.
    pub(crate) fn from_op(dims: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "non-finite op output {:?}",
            dims
        );
        Self { dims, data }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, T::zero())
    }

    pub fn full(dims: &[usize], value: T) -> Self {
        let n = dims.iter().product();
        Self::from_op(dims.to_vec(), vec![value; n])
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = dims.iter().product();
        Self::from_op(dims.to_vec(), (0..n).map(&mut f).collect())
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { T::one() } else { T::zero() })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn reshape(self, dims: &[usize]) -> Result<Self> {
        if dims.iter().product::<usize>() != self.data.len() {
            return Err(shape_err!("cannot reshape {:?} into {:?}", self.dims, dims));
        }
        Ok(Self {
            dims: dims.to_vec(),
            data: self.data,
        })
    }

    pub fn get(&self, idx: &[usize]) -> T {
        self.data[self.offset(idx)]
    }

    pub fn offset(&self, idx: &[usize]) -> usize {
        assert_eq!(idx.len(), self.dims.len(), "index rank");
        idx.iter().zip(&self.dims).fold(0, |acc, (&i, &d)| {
            assert!(i < d, "index {:?} out of bounds {:?}", idx, self.dims);
            acc * d + i
        })
    }

    /// Contiguous slab for leading index `i` (e.g. one image of a batch).
    pub fn slab(&self, i: usize) -> &[T] {
        let stride = self.data.len() / self.dims[0];
        &self.data[i * stride..(i + 1) * stride]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_op(self.dims.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_with(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.dims != other.dims {
            return Err(shape_err!("zip {:?} vs {:?}", self.dims, other.dims));
        }
        Ok(Self::from_op(
            self.dims.clone(),
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor::from_op(
            self.dims.clone(),
            self.data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap_or(0.0)).unwrap_or_else(U::zero))
                .collect(),
        )
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }
}

/// Splits `dims` around `axis` into (outer, extent, inner) sizes.
fn split_axis(dims: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= dims.len() {
        return Err(shape_err!("axis {} out of range for rank {}", axis, dims.len()));
    }
    let outer = dims[..axis].iter().product();
    let inner = dims[axis + 1..].iter().product();
    Ok((outer, dims[axis], inner))
}

/// `a[m×k] · b[k×n]`, summing over `k` left to right.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 || a.dims[1] != b.dims[0] {
        return Err(shape_err!("matmul {:?} · {:?}", a.dims, b.dims));
    }
    let (m, k, n) = (a.dims[0], a.dims[1], b.dims[1]);
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a.data[i * k + kk];
            let brow = &b.data[kk * n..(kk + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + aik * bv;
            }
        }
    }
    Ok(Tensor::from_op(vec![m, n], out))
}

/// Numerically stable softmax along `axis` (max-subtracted).
pub fn softmax<T: Real>(t: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, n, inner) = split_axis(&t.dims, axis)?;
    if n == 0 {
        return Err(shape_err!("softmax over empty axis {}", axis));
    }
    let mut out = t.data.clone();
    let mut buf = vec![T::zero(); n];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            softmax_strided(&t.data, &mut out, base, inner, &mut buf);
        }
    }
    Ok(Tensor::from_op(t.dims.clone(), out))
}

fn softmax_strided<T: Real>(src: &[T], dst: &mut [T], base: usize, stride: usize, buf: &mut [T]) {
    let n = buf.len();
    let mut max = T::neg_infinity();
    for j in 0..n {
        max = max.max(src[base + j * stride]);
    }
    let mut sum = T::zero();
    for (j, b) in buf.iter_mut().enumerate() {
        *b = (src[base + j * stride] - max).exp();
        sum = sum + *b;
    }
    for (j, b) in buf.iter().enumerate() {
        dst[base + j * stride] = *b / sum;
    }
}

/// Softmax over a plain slice.
pub fn softmax_slice<T: Real>(v: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); v.len()];
    let mut buf = vec![T::zero(); v.len()];
    if !v.is_empty() {
        softmax_strided(v, &mut out, 0, 1, &mut buf);
    }
    out
}

pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

pub fn norm<T: Real>(v: &[T]) -> T {
    dot(v, v).sqrt()
}

/// Norms below this are treated as zero by [`cosine`] and [`l2_normalize`].
pub fn norm_floor<T: Real>() -> T {
    T::lit(1e-12)
}

/// Cosine similarity; zero when either vector has (near) zero norm.
pub fn cosine<T: Real>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(shape_err!("cosine of lengths {} and {}", a.len(), b.len()));
    }
    let (na, nb) = (norm(a), norm(b));
    if na < norm_floor() || nb < norm_floor() {
        return Ok(T::zero());
    }
    let c = dot(a, b) / (na * nb);
    Ok(c.max(-T::one()).min(T::one()))
}

/// Unit vector along `v`; the zero vector maps to itself.
pub fn l2_normalize<T: Real>(v: &[T]) -> Vec<T> {
    let n = norm(v);
    if n < norm_floor() {
        return vec![T::zero(); v.len()];
    }
    v.iter().map(|&x| x / n).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceMode {
    Max,
    Mean,
}

/// Removes `axis` by taking its max or mean.
pub fn reduce<T: Real>(t: &Tensor<T>, axis: usize, mode: ReduceMode) -> Result<Tensor<T>> {
    let (outer, n, inner) = split_axis(&t.dims, axis)?;
    if n == 0 {
        return Err(shape_err!("reduce over empty axis {}", axis));
    }
    let mut out = Vec::with_capacity(outer * inner);
    let extent = T::from_usize(n).expect("extent");
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let it = (0..n).map(|j| t.data[base + j * inner]);
            out.push(match mode {
                ReduceMode::Max => it.fold(T::neg_infinity(), T::max),
                ReduceMode::Mean => it.fold(T::zero(), |a, v| a + v) / extent,
            });
        }
    }
    let mut dims = t.dims.clone();
    dims.remove(axis);
    Ok(Tensor::from_op(dims, out))
}

fn conv_shapes<T: Real>(x: &Tensor<T>, w: &Tensor<T>) -> Result<(usize, usize, usize, usize, usize)> {
    if x.rank() != 4 || w.rank() != 4 || w.dims[2] != 3 || w.dims[3] != 3 {
        return Err(shape_err!("conv2d input {:?} weight {:?}", x.dims, w.dims));
    }
    if x.dims[1] != w.dims[1] {
        return Err(shape_err!(
            "conv2d channel mismatch: input {} vs weight {}",
            x.dims[1],
            w.dims[1]
        ));
    }
    Ok((x.dims[0], x.dims[1], w.dims[0], x.dims[2], x.dims[3]))
}

/// Valid output range `[lo, hi)` along one spatial axis for kernel tap `k`
/// (0..3) with zero padding 1.
fn tap_range(k: usize, extent: usize) -> (usize, usize) {
    match k {
        0 => (1.min(extent), extent),
        1 => (0, extent),
        _ => (0, extent.saturating_sub(1)),
    }
}

/// 3×3 convolution, stride 1, zero padding 1.
pub fn conv2d<T: Real>(x: &Tensor<T>, w: &Tensor<T>, bias: &[T]) -> Result<Tensor<T>> {
    let (batch, cin, cout, h, wd) = conv_shapes(x, w)?;
    if bias.len() != cout {
        return Err(shape_err!("conv2d bias {} for {} outputs", bias.len(), cout));
    }
    let plane = h * wd;
    let mut out = vec![T::zero(); batch * cout * plane];
    for b in 0..batch {
        for co in 0..cout {
            let o = &mut out[(b * cout + co) * plane..(b * cout + co + 1) * plane];
            o.iter_mut().for_each(|v| *v = bias[co]);
            for ci in 0..cin {
                let src = &x.data[(b * cin + ci) * plane..(b * cin + ci + 1) * plane];
                let kern = &w.data[(co * cin + ci) * 9..(co * cin + ci + 1) * 9];
                for kh in 0..3 {
                    let (y0, y1) = tap_range(kh, h);
                    for kw in 0..3 {
                        let (x0, x1) = tap_range(kw, wd);
                        let wt = kern[kh * 3 + kw];
                        for y in y0..y1 {
                            let sy = y + kh - 1;
                            let orow = &mut o[y * wd + x0..y * wd + x1];
                            let srow = &src[sy * wd + x0 + kw - 1..sy * wd + x1 + kw - 1];
                            for (ov, &sv) in orow.iter_mut().zip(srow) {
                                *ov = *ov + wt * sv;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_op(vec![batch, cout, h, wd], out))
}

/// Gradients of [`conv2d`] given the upstream gradient `dout`.
pub struct Conv2dGrads<T> {
    pub dx: Tensor<T>,
    pub dw: Tensor<T>,
    pub db: Vec<T>,
}

pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dout: &Tensor<T>,
    need_dx: bool,
) -> Result<Conv2dGrads<T>> {
    let (batch, cin, cout, h, wd) = conv_shapes(x, w)?;
    if dout.dims != [batch, cout, h, wd] {
        return Err(shape_err!("conv2d_backward dout {:?}", dout.dims));
    }
    let plane = h * wd;
    let mut dx = vec![T::zero(); if need_dx { x.len() } else { 0 }];
    let mut dw = vec![T::zero(); w.len()];
    let mut db = vec![T::zero(); cout];
    for b in 0..batch {
        for co in 0..cout {
            let g = &dout.data[(b * cout + co) * plane..(b * cout + co + 1) * plane];
            db[co] = g.iter().fold(db[co], |a, &v| a + v);
            for ci in 0..cin {
                let src = &x.data[(b * cin + ci) * plane..(b * cin + ci + 1) * plane];
                let widx = (co * cin + ci) * 9;
                for kh in 0..3 {
                    let (y0, y1) = tap_range(kh, h);
                    for kw in 0..3 {
                        let (x0, x1) = tap_range(kw, wd);
                        let wt = w.data[widx + kh * 3 + kw];
                        let mut acc = T::zero();
                        for y in y0..y1 {
                            let sy = y + kh - 1;
                            let grow = &g[y * wd + x0..y * wd + x1];
                            let s0 = sy * wd + x0 + kw - 1;
                            let srow = &src[s0..s0 + (x1 - x0)];
                            for (&gv, &sv) in grow.iter().zip(srow) {
                                acc = acc + gv * sv;
                            }
                            if need_dx {
                                let doff = (b * cin + ci) * plane + s0;
                                let drow = &mut dx[doff..doff + (x1 - x0)];
                                for (dv, &gv) in drow.iter_mut().zip(grow) {
                                    *dv = *dv + wt * gv;
                                }
                            }
                        }
                        dw[widx + kh * 3 + kw] = dw[widx + kh * 3 + kw] + acc;
                    }
                }
            }
        }
    }
    let dx = if need_dx {
        Tensor::from_op(x.dims.clone(), dx)
    } else {
        Tensor::zeros(&[0])
    };
    Ok(Conv2dGrads {
        dx,
        dw: Tensor::from_op(w.dims.clone(), dw),
        db,
    })
}

pub fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Mean of `values` computed in an order that does not depend on how the
/// values are arranged: sorted, then summed in double precision.
pub fn order_free_mean<T: Real>(values: &mut [T]) -> T {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let sum: f64 = values.iter().map(|v| v.to_f64().unwrap_or(0.0)).sum();
    T::lit(sum / values.len() as f64)
}
