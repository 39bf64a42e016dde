//! Dense row-major tensors over a selectable float width, plus the raw
//! numeric kernels (matmul, conv, pooling) the tape differentiates.

use crate::error::{Error, Result};
use num_traits::Float;

/// Element type for tensors. f64 is the default everywhere; f32 is opt-in
/// for training speed. Everything numeric in the kit is generic over this.
pub trait Scalar:
    Float
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Default
    + Send
    + Sync
    + 'static
{
    const DTYPE: &'static str;
    const BYTES: usize;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    /// `bytes.len()` must equal `BYTES`.
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8-byte slice"))
    }
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4-byte slice"))
    }
}

/// Contiguous row-major tensor. Shape `[]` is not used; scalars are `[1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "from_vec",
                format!("shape {:?} wants {} elements, got {}", shape, n, data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![S::zero(); n],
        }
    }

    pub fn full(shape: &[usize], v: S) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn scalar_tensor(v: S) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_f64_slice(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::from_vec(shape, data.iter().map(|&v| S::from_f64(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Single-element tensors stand in for scalars on the tape.
    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn scalar_value(&self) -> S {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip(&self, other: &Self, f: impl Fn(S, S) -> S) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "zip",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + *b;
        }
    }

    pub fn scale(&self, c: S) -> Self {
        self.map(|v| v * c)
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape, shape),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Gather entries along the leading dimension, in the order given.
    pub fn select_rows(&self, idxs: &[usize]) -> Result<Self> {
        if self.shape.is_empty() {
            return Err(Error::shape("select_rows", "rank 0 tensor"));
        }
        let rows = self.shape[0];
        let stride: usize = self.shape[1..].iter().product();
        let mut data = Vec::with_capacity(idxs.len() * stride);
        for &i in idxs {
            if i >= rows {
                return Err(Error::invalid(
                    "select_rows",
                    format!("index {} out of {} rows", i, rows),
                ));
            }
            data.extend_from_slice(&self.data[i * stride..(i + 1) * stride]);
        }
        let mut shape = self.shape.clone();
        shape[0] = idxs.len();
        Ok(Tensor { shape, data })
    }

    pub fn mean(&self) -> S {
        if self.data.is_empty() {
            return S::zero();
        }
        let sum: S = self.data.iter().copied().sum();
        sum / S::from_f64(self.data.len() as f64)
    }

    /// 4-D view as (n, c, h, w); errors if the rank is wrong.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        if self.shape.len() != 4 {
            return Err(Error::shape(
                "dims4",
                format!("expected rank 4, got {:?}", self.shape),
            ));
        }
        Ok((self.shape[0], self.shape[1], self.shape[2], self.shape[3]))
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::shape(
                "dims2",
                format!("expected rank 2, got {:?}", self.shape),
            ));
        }
        Ok((self.shape[0], self.shape[1]))
    }
}

// ---------------------------------------------------------------------------
// Raw kernels. Forward and backward pairs live together so the index maths
// stays in one place.
// ---------------------------------------------------------------------------

/// a [m,k] * b [k,n] -> [m,n]
pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::shape(
            "matmul",
            format!("{:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let mut out = vec![S::zero(); m * n];
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == S::zero() {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    Tensor::from_vec(&[m, n], out)
}

/// a [m,k] used transposed: a^T [k,m] * g [m,n] -> [k,n]
pub fn matmul_tn<S: Scalar>(a: &Tensor<S>, g: &Tensor<S>) -> Result<Tensor<S>> {
    let (m, k) = a.dims2()?;
    let (m2, n) = g.dims2()?;
    if m != m2 {
        return Err(Error::shape(
            "matmul_tn",
            format!("{:?}^T x {:?}", a.shape(), g.shape()),
        ));
    }
    let mut out = vec![S::zero(); k * n];
    for i in 0..m {
        let arow = &a.data()[i * k..(i + 1) * k];
        let grow = &g.data()[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == S::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o = *o + av * gv;
            }
        }
    }
    Tensor::from_vec(&[k, n], out)
}

/// g [m,n] * b^T [n,k] -> [m,k]
pub fn matmul_nt<S: Scalar>(g: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (m, n) = g.dims2()?;
    let (k, n2) = b.dims2()?;
    if n != n2 {
        return Err(Error::shape(
            "matmul_nt",
            format!("{:?} x {:?}^T", g.shape(), b.shape()),
        ));
    }
    let mut out = vec![S::zero(); m * k];
    for i in 0..m {
        let grow = &g.data()[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for (p, o) in orow.iter_mut().enumerate() {
            let brow = &b.data()[p * n..(p + 1) * n];
            let mut acc = S::zero();
            for (&gv, &bv) in grow.iter().zip(brow) {
                acc = acc + gv * bv;
            }
            *o = acc;
        }
    }
    Tensor::from_vec(&[m, k], out)
}

pub fn conv2d_out_hw(h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Result<(usize, usize)> {
    if stride == 0 || stride > 2 {
        return Err(Error::invalid("conv2d", format!("stride {} unsupported (1 or 2)", stride)));
    }
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(Error::shape(
            "conv2d",
            format!("kernel {}x{} larger than padded input {}x{}", kh, kw, h + 2 * pad, w + 2 * pad),
        ));
    }
    Ok(((h + 2 * pad - kh) / stride + 1, (w + 2 * pad - kw) / stride + 1))
}

/// x [n,ci,h,w] (zero padded) convolved with k [co,ci,kh,kw], stride 1 or 2.
pub fn conv2d<S: Scalar>(x: &Tensor<S>, k: &Tensor<S>, stride: usize, pad: usize) -> Result<Tensor<S>> {
    let (n, ci, h, w) = x.dims4()?;
    let (co, ci2, kh, kw) = k.dims4()?;
    if ci != ci2 {
        return Err(Error::shape(
            "conv2d",
            format!("input channels {} vs kernel {}", ci, ci2),
        ));
    }
    let (oh, ow) = conv2d_out_hw(h, w, kh, kw, stride, pad)?;
    let mut out = vec![S::zero(); n * co * oh * ow];
    let xd = x.data();
    let kd = k.data();
    for b in 0..n {
        for oc in 0..co {
            let kbase = oc * ci * kh * kw;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = S::zero();
                    let iy0 = (oy * stride) as isize - pad as isize;
                    let ix0 = (ox * stride) as isize - pad as isize;
                    for ic in 0..ci {
                        let xbase = (b * ci + ic) * h * w;
                        let kcbase = kbase + ic * kh * kw;
                        for ky in 0..kh {
                            let iy = iy0 + ky as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let xrow = xbase + iy as usize * w;
                            let krow = kcbase + ky * kw;
                            for kx in 0..kw {
                                let ix = ix0 + kx as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc = acc + xd[xrow + ix as usize] * kd[krow + kx];
                            }
                        }
                    }
                    out[((b * co + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::from_vec(&[n, co, oh, ow], out)
}

/// Gradients of conv2d wrt input and kernel given upstream g [n,co,oh,ow].
pub fn conv2d_backward<S: Scalar>(
    x: &Tensor<S>,
    k: &Tensor<S>,
    g: &Tensor<S>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let (n, ci, h, w) = x.dims4()?;
    let (co, _, kh, kw) = k.dims4()?;
    let (_, _, oh, ow) = g.dims4()?;
    let mut dx = vec![S::zero(); x.len()];
    let mut dk = vec![S::zero(); k.len()];
    let xd = x.data();
    let kd = k.data();
    let gd = g.data();
    for b in 0..n {
        for oc in 0..co {
            let kbase = oc * ci * kh * kw;
            for oy in 0..oh {
                for ox in 0..ow {
                    let gv = gd[((b * co + oc) * oh + oy) * ow + ox];
                    if gv == S::zero() {
                        continue;
                    }
                    let iy0 = (oy * stride) as isize - pad as isize;
                    let ix0 = (ox * stride) as isize - pad as isize;
                    for ic in 0..ci {
                        let xbase = (b * ci + ic) * h * w;
                        let kcbase = kbase + ic * kh * kw;
                        for ky in 0..kh {
                            let iy = iy0 + ky as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let xrow = xbase + iy as usize * w;
                            let krow = kcbase + ky * kw;
                            for kx in 0..kw {
                                let ix = ix0 + kx as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                dx[xrow + ix as usize] = dx[xrow + ix as usize] + gv * kd[krow + kx];
                                dk[krow + kx] = dk[krow + kx] + gv * xd[xrow + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::from_vec(x.shape(), dx)?,
        Tensor::from_vec(k.shape(), dk)?,
    ))
}

/// Non-overlapping-or-strided average pooling, no padding.
pub fn avgpool2d<S: Scalar>(x: &Tensor<S>, k: usize, stride: usize) -> Result<Tensor<S>> {
    let (n, c, h, w) = x.dims4()?;
    if k == 0 || stride == 0 || k > h || k > w {
        return Err(Error::invalid(
            "avgpool2d",
            format!("kernel {} stride {} on {}x{}", k, stride, h, w),
        ));
    }
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let inv = S::from_f64(1.0 / (k * k) as f64);
    let mut out = vec![S::zero(); n * c * oh * ow];
    let xd = x.data();
    for bc in 0..n * c {
        let xbase = bc * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = S::zero();
                for ky in 0..k {
                    let row = xbase + (oy * stride + ky) * w + ox * stride;
                    for kx in 0..k {
                        acc = acc + xd[row + kx];
                    }
                }
                out[(bc * oh + oy) * ow + ox] = acc * inv;
            }
        }
    }
    Tensor::from_vec(&[n, c, oh, ow], out)
}

pub fn avgpool2d_backward<S: Scalar>(
    x_shape: &[usize],
    k: usize,
    stride: usize,
    g: &Tensor<S>,
) -> Result<Tensor<S>> {
    let (n, c, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (_, _, oh, ow) = g.dims4()?;
    let inv = S::from_f64(1.0 / (k * k) as f64);
    let mut dx = vec![S::zero(); n * c * h * w];
    let gd = g.data();
    for bc in 0..n * c {
        let xbase = bc * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let gv = gd[(bc * oh + oy) * ow + ox] * inv;
                for ky in 0..k {
                    let row = xbase + (oy * stride + ky) * w + ox * stride;
                    for kx in 0..k {
                        dx[row + kx] = dx[row + kx] + gv;
                    }
                }
            }
        }
    }
    Tensor::from_vec(x_shape, dx)
}

/// Channel layout helper: treats [B,C] as (B, C, 1) and [N,C,H,W] as (N, C, H*W).
/// Errors on other ranks.
pub fn channel_view(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape.len() {
        2 => Ok((shape[0], shape[1], 1)),
        4 => Ok((shape[0], shape[1], shape[2] * shape[3])),
        _ => Err(Error::shape(
            "channel_view",
            format!("expected rank 2 or 4, got {:?}", shape),
        )),
    }
}
