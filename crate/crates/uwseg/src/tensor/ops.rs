//! Differentiable tensor operations.
//!
//! Every op computes its forward value eagerly, reports its analytic FLOP
//! cost to the [`flops`] collector, and records a backward closure when the
//! graph is being tracked. Reductions and normalization statistics accumulate
//! in f64 to keep finite-difference gradient checks meaningful in f32.

use super::{flops, rng::SplitMix64, Tensor};
use crate::error::{Error, Result};
use ndarray::linalg::general_mat_mul;
use ndarray::ArrayView2;

/// Reduction layout for [`Tensor::normalize`].
///
/// - `Layer`: zero mean / unit variance along the last axis, per lane.
/// - `Instance`: per leading-axis slice, over all remaining entries.
/// - `Batch`: per channel (axis 1), across the batch and all trailing axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    Layer,
    Instance,
    Batch,
}

// ---------------------------------------------------------------------------
// GEMM helpers (f32, ndarray-backed)
// ---------------------------------------------------------------------------

fn gemm_into(alpha: f32, a: ArrayView2<f32>, b: ArrayView2<f32>, beta: f32, out: &mut [f32]) {
    let (m, _) = a.dim();
    let (_, n) = b.dim();
    let mut c = ndarray::ArrayViewMut2::from_shape((m, n), out).expect("gemm output shape");
    general_mat_mul(alpha, &a, &b, beta, &mut c);
}

fn view2(data: &[f32], rows: usize, cols: usize) -> ArrayView2<'_, f32> {
    ArrayView2::from_shape((rows, cols), data).expect("matrix view shape")
}

// ---------------------------------------------------------------------------
// Broadcast helpers
// ---------------------------------------------------------------------------

fn broadcast_shape(a: &[usize], b: &[usize], op: &str) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for d in 0..rank {
        let da = if d < rank - a.len() { 1 } else { a[d - (rank - a.len())] };
        let db = if d < rank - b.len() { 1 } else { b[d - (rank - b.len())] };
        if da != db && da != 1 && db != 1 {
            return Err(Error::Shape(format!(
                "{op}: shapes {a:?} and {b:?} are not broadcast-compatible"
            )));
        }
        out[d] = da.max(db);
    }
    Ok(out)
}

/// Per-output-dim element strides for a right-aligned operand; 0 marks a
/// broadcast dimension.
fn bcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let mut strides = vec![0usize; out.len()];
    let offset = out.len() - shape.len();
    let mut s = 1usize;
    for d in (0..shape.len()).rev() {
        strides[offset + d] = if shape[d] == 1 { 0 } else { s };
        s *= shape[d];
    }
    strides
}

fn for_each_bcast(
    out_shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = out_shape.len();
    let numel: usize = out_shape.iter().product();
    let mut coords = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for io in 0..numel {
        f(io, ia, ib);
        for d in (0..rank).rev() {
            coords[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
            ia -= sa[d] * out_shape[d];
            ib -= sb[d] * out_shape[d];
        }
    }
}

/// Sum `g` (laid out as `out_shape`) into the shape of one operand.
fn reduce_to_shape(g: &[f32], out_shape: &[usize], shape: &[usize]) -> Vec<f32> {
    if out_shape == shape {
        return g.to_vec();
    }
    let strides = bcast_strides(shape, out_shape);
    let zero = vec![0usize; out_shape.len()];
    let n: usize = shape.iter().product();
    let mut acc = vec![0.0f64; n];
    for_each_bcast(out_shape, &strides, &zero, |io, ia, _| {
        acc[ia] += g[io] as f64;
    });
    acc.into_iter().map(|v| v as f32).collect()
}

// ---------------------------------------------------------------------------
// Elementwise / binary ops
// ---------------------------------------------------------------------------

impl Tensor {
    fn binary(&self, rhs: &Tensor, op: &'static str) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), rhs.shape());
        let out_shape = broadcast_shape(&sa, &sb, op)?;
        let numel: usize = out_shape.iter().product();
        flops::add(numel as u64);

        let same = sa == sb;
        let mut data = vec![0.0f32; numel];
        {
            let a = self.data();
            let b = rhs.data();
            if same {
                match op {
                    "add" => data.iter_mut().zip(a.iter().zip(b.iter())).for_each(|(o, (x, y))| *o = x + y),
                    _ => data.iter_mut().zip(a.iter().zip(b.iter())).for_each(|(o, (x, y))| *o = x * y),
                }
            } else {
                let stra = bcast_strides(&sa, &out_shape);
                let strb = bcast_strides(&sb, &out_shape);
                if op == "add" {
                    for_each_bcast(&out_shape, &stra, &strb, |io, ia, ib| data[io] = a[ia] + b[ib]);
                } else {
                    for_each_bcast(&out_shape, &stra, &strb, |io, ia, ib| data[io] = a[ia] * b[ib]);
                }
            }
        }

        let lhs_h = self.clone();
        let rhs_h = rhs.clone();
        let out_shape_b = out_shape.clone();
        let backward: super::BackwardFn = match op {
            "add" => Box::new(move |g, _| {
                vec![
                    Some(reduce_to_shape(g, &out_shape_b, &lhs_h.shape())),
                    Some(reduce_to_shape(g, &out_shape_b, &rhs_h.shape())),
                ]
            }),
            _ => Box::new(move |g, _| {
                let (sa, sb) = (lhs_h.shape(), rhs_h.shape());
                let a = lhs_h.data();
                let b = rhs_h.data();
                let stra = bcast_strides(&sa, &out_shape_b);
                let strb = bcast_strides(&sb, &out_shape_b);
                let mut da = vec![0.0f64; a.len()];
                let mut db = vec![0.0f64; b.len()];
                for_each_bcast(&out_shape_b, &stra, &strb, |io, ia, ib| {
                    da[ia] += g[io] as f64 * b[ib] as f64;
                    db[ib] += g[io] as f64 * a[ia] as f64;
                });
                vec![
                    Some(da.into_iter().map(|v| v as f32).collect()),
                    Some(db.into_iter().map(|v| v as f32).collect()),
                ]
            }),
        };
        Ok(Tensor::from_op(data, out_shape, vec![self.clone(), rhs.clone()], backward))
    }

    /// Elementwise sum; the smaller operand broadcasts against the larger
    /// when its right-aligned dimensions are equal or 1.
    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, "add")
    }

    /// Elementwise product with the same broadcast rule as [`Tensor::add`].
    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, "mul")
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.add(&rhs.mul_scalar(-1.0))
    }

    pub fn add_scalar(&self, s: f32) -> Tensor {
        flops::add(self.numel() as u64);
        let data = self.data().iter().map(|v| v + s).collect();
        Tensor::from_op(data, self.shape(), vec![self.clone()], Box::new(|g, _| vec![Some(g.to_vec())]))
    }

    pub fn mul_scalar(&self, s: f32) -> Tensor {
        flops::add(self.numel() as u64);
        let data = self.data().iter().map(|v| v * s).collect();
        Tensor::from_op(
            data,
            self.shape(),
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(g.iter().map(|v| v * s).collect())]),
        )
    }

    pub fn relu(&self) -> Tensor {
        flops::add(self.numel() as u64);
        let data: Vec<f32> = self.data().iter().map(|v| v.max(0.0)).collect();
        Tensor::from_op(
            data,
            self.shape(),
            vec![self.clone()],
            Box::new(|g, out| {
                vec![Some(g.iter().zip(out).map(|(g, y)| if *y > 0.0 { *g } else { 0.0 }).collect())]
            }),
        )
    }

    pub fn sigmoid(&self) -> Tensor {
        flops::add(self.numel() as u64);
        fn sig(x: f32) -> f32 {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        }
        let data: Vec<f32> = self.data().iter().map(|v| sig(*v)).collect();
        Tensor::from_op(
            data,
            self.shape(),
            vec![self.clone()],
            Box::new(|g, out| vec![Some(g.iter().zip(out).map(|(g, y)| g * y * (1.0 - y)).collect())]),
        )
    }

    /// GELU via the tanh approximation.
    pub fn gelu(&self) -> Tensor {
        flops::add(self.numel() as u64);
        const C0: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const C1: f64 = 0.044_715;
        let data: Vec<f32> = self
            .data()
            .iter()
            .map(|&v| {
                let x = v as f64;
                (0.5 * x * (1.0 + (C0 * (x + C1 * x * x * x)).tanh())) as f32
            })
            .collect();
        let x_h = self.clone();
        Tensor::from_op(
            data,
            self.shape(),
            vec![self.clone()],
            Box::new(move |g, _| {
                let x = x_h.data();
                let dg = g
                    .iter()
                    .zip(x.iter())
                    .map(|(&g, &v)| {
                        let x = v as f64;
                        let t = (C0 * (x + C1 * x * x * x)).tanh();
                        let d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C0 * (1.0 + 3.0 * C1 * x * x);
                        (g as f64 * d) as f32
                    })
                    .collect();
                vec![Some(dg)]
            }),
        )
    }

    /// Elementwise square root. The derivative at exactly zero is defined as
    /// zero (subgradient), so edge magnitudes of constant regions do not
    /// produce infinities.
    pub fn sqrt(&self, site: &'static str) -> Result<Tensor> {
        {
            let data = self.data();
            if let Some(v) = data.iter().find(|v| **v < 0.0) {
                return Err(Error::Contract(format!(
                    "sqrt of negative input ({v}) at {site}"
                )));
            }
        }
        flops::add(self.numel() as u64);
        let data: Vec<f32> = self.data().iter().map(|v| v.sqrt()).collect();
        Ok(Tensor::from_op(
            data,
            self.shape(),
            vec![self.clone()],
            Box::new(|g, out| {
                vec![Some(
                    g.iter()
                        .zip(out)
                        .map(|(g, y)| if *y == 0.0 { 0.0 } else { 0.5 * g / y })
                        .collect(),
                )]
            }),
        ))
    }

    /// Natural logarithm; requires strictly positive input (clamp first).
    pub fn ln(&self) -> Result<Tensor> {
        {
            let data = self.data();
            if let Some(v) = data.iter().find(|v| **v <= 0.0) {
                return Err(Error::Contract(format!("ln of non-positive input: {v}")));
            }
        }
        flops::add(self.numel() as u64);
        let data: Vec<f32> = self.data().iter().map(|v| v.ln()).collect();
        let x_h = self.clone();
        Ok(Tensor::from_op(
            data,
            self.shape(),
            vec![self.clone()],
            Box::new(move |g, _| {
                let x = x_h.data();
                vec![Some(g.iter().zip(x.iter()).map(|(g, x)| g / x).collect())]
            }),
        ))
    }

    /// Clamp into [lo, hi]; gradient passes only where the input was inside.
    pub fn clamp(&self, lo: f32, hi: f32) -> Tensor {
        flops::add(self.numel() as u64);
        let data: Vec<f32> = self.data().iter().map(|v| v.clamp(lo, hi)).collect();
        let x_h = self.clone();
        Tensor::from_op(
            data,
            self.shape(),
            vec![self.clone()],
            Box::new(move |g, _| {
                let x = x_h.data();
                vec![Some(
                    g.iter()
                        .zip(x.iter())
                        .map(|(g, x)| if *x >= lo && *x <= hi { *g } else { 0.0 })
                        .collect(),
                )]
            }),
        )
    }

    pub fn sum_all(&self) -> Tensor {
        flops::add(self.numel() as u64);
        let s: f64 = self.data().iter().map(|v| *v as f64).sum();
        let n = self.numel();
        Tensor::from_op(
            vec![s as f32],
            vec![1],
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean_all(&self) -> Tensor {
        flops::add(self.numel() as u64);
        let n = self.numel();
        let s: f64 = self.data().iter().map(|v| *v as f64).sum();
        Tensor::from_op(
            vec![(s / n as f64) as f32],
            vec![1],
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(vec![g[0] / n as f32; n])]),
        )
    }
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

impl Tensor {
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} ({} elements) into {:?} ({} elements)",
                self.shape(),
                self.numel(),
                shape,
                numel
            )));
        }
        let data = self.to_vec();
        Ok(Tensor::from_op(
            data,
            shape.to_vec(),
            vec![self.clone()],
            Box::new(|g, _| vec![Some(g.to_vec())]),
        ))
    }

    /// Swap the last two axes.
    pub fn transpose_last2(&self) -> Result<Tensor> {
        let shape = self.shape();
        if shape.len() < 2 {
            return Err(Error::Shape(format!(
                "transpose_last2 needs rank >= 2, got {shape:?}"
            )));
        }
        let (r, c) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let batch = self.numel() / (r * c);
        let mut out_shape = shape.clone();
        let rank = out_shape.len();
        out_shape.swap(rank - 2, rank - 1);

        fn transpose_blocks(src: &[f32], batch: usize, r: usize, c: usize) -> Vec<f32> {
            let mut out = vec![0.0f32; src.len()];
            for b in 0..batch {
                let base = b * r * c;
                for i in 0..r {
                    for j in 0..c {
                        out[base + j * r + i] = src[base + i * c + j];
                    }
                }
            }
            out
        }

        let data = transpose_blocks(&self.data(), batch, r, c);
        Ok(Tensor::from_op(
            data,
            out_shape,
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(transpose_blocks(g, batch, c, r))]),
        ))
    }

    /// Contiguous slice of length `len` starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::Shape(format!(
                "narrow(axis={axis}, start={start}, len={len}) out of bounds for {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let dim = shape[axis];
        let mut out_shape = shape.clone();
        out_shape[axis] = len;

        let mut data = vec![0.0f32; outer * len * inner];
        {
            let src = self.data();
            for o in 0..outer {
                let s = (o * dim + start) * inner;
                let d = o * len * inner;
                data[d..d + len * inner].copy_from_slice(&src[s..s + len * inner]);
            }
        }
        let total = self.numel();
        Ok(Tensor::from_op(
            data,
            out_shape,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut dx = vec![0.0f32; total];
                for o in 0..outer {
                    let d = (o * dim + start) * inner;
                    let s = o * len * inner;
                    dx[d..d + len * inner].copy_from_slice(&g[s..s + len * inner]);
                }
                vec![Some(dx)]
            }),
        ))
    }
}

/// Concatenate along `axis`; all other dimensions must match.
pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::Shape("concat of zero tensors".into()));
    }
    let first = parts[0].shape();
    if axis >= first.len() {
        return Err(Error::Shape(format!("concat axis {axis} out of range for {first:?}")));
    }
    let mut axis_total = 0usize;
    for p in parts {
        let s = p.shape();
        if s.len() != first.len()
            || s.iter().enumerate().any(|(d, v)| d != axis && *v != first[d])
        {
            return Err(Error::Shape(format!(
                "concat shape mismatch: {:?} vs {:?} along axis {axis}",
                first, s
            )));
        }
        axis_total += s[axis];
    }
    let mut out_shape = first.clone();
    out_shape[axis] = axis_total;
    let outer: usize = first[..axis].iter().product();
    let inner: usize = first[axis + 1..].iter().product();

    let mut data = vec![0.0f32; outer * axis_total * inner];
    let mut offset = 0usize;
    let mut part_dims = Vec::with_capacity(parts.len());
    for p in parts {
        let dim = p.shape()[axis];
        let src = p.data();
        for o in 0..outer {
            let s = o * dim * inner;
            let d = (o * axis_total + offset) * inner;
            data[d..d + dim * inner].copy_from_slice(&src[s..s + dim * inner]);
        }
        offset += dim;
        part_dims.push(dim);
    }

    Ok(Tensor::from_op(
        data,
        out_shape,
        parts.to_vec(),
        Box::new(move |g, _| {
            let mut grads = Vec::with_capacity(part_dims.len());
            let mut offset = 0usize;
            for &dim in &part_dims {
                let mut dp = vec![0.0f32; outer * dim * inner];
                for o in 0..outer {
                    let s = (o * axis_total + offset) * inner;
                    let d = o * dim * inner;
                    dp[d..d + dim * inner].copy_from_slice(&g[s..s + dim * inner]);
                }
                grads.push(Some(dp));
                offset += dim;
            }
            grads
        }),
    ))
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

impl Tensor {
    /// 2-D matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), rhs.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape(format!(
                "matmul expects [m,k] x [k,n], got {sa:?} x {sb:?}"
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        flops::add(2 * (m * k * n) as u64);
        let mut data = vec![0.0f32; m * n];
        gemm_into(1.0, view2(&self.data(), m, k), view2(&rhs.data(), k, n), 0.0, &mut data);

        let a_h = self.clone();
        let b_h = rhs.clone();
        Ok(Tensor::from_op(
            data,
            vec![m, n],
            vec![self.clone(), rhs.clone()],
            Box::new(move |g, _| {
                let a = a_h.data();
                let b = b_h.data();
                let gv = view2(g, m, n);
                let mut da = vec![0.0f32; m * k];
                gemm_into(1.0, gv, view2(&b, k, n).reversed_axes(), 0.0, &mut da);
                let mut db = vec![0.0f32; k * n];
                gemm_into(1.0, view2(&a, m, k).reversed_axes(), gv, 0.0, &mut db);
                vec![Some(da), Some(db)]
            }),
        ))
    }

    /// Batched matrix product `[B,m,k] x [B,k,n] -> [B,m,n]`.
    pub fn bmm(&self, rhs: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), rhs.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::Shape(format!(
                "bmm expects [B,m,k] x [B,k,n], got {sa:?} x {sb:?}"
            )));
        }
        let (bsz, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        flops::add(2 * (bsz * m * k * n) as u64);
        let mut data = vec![0.0f32; bsz * m * n];
        {
            let a = self.data();
            let b = rhs.data();
            for i in 0..bsz {
                gemm_into(
                    1.0,
                    view2(&a[i * m * k..(i + 1) * m * k], m, k),
                    view2(&b[i * k * n..(i + 1) * k * n], k, n),
                    0.0,
                    &mut data[i * m * n..(i + 1) * m * n],
                );
            }
        }
        let a_h = self.clone();
        let b_h = rhs.clone();
        Ok(Tensor::from_op(
            data,
            vec![bsz, m, n],
            vec![self.clone(), rhs.clone()],
            Box::new(move |g, _| {
                let a = a_h.data();
                let b = b_h.data();
                let mut da = vec![0.0f32; bsz * m * k];
                let mut db = vec![0.0f32; bsz * k * n];
                for i in 0..bsz {
                    let gv = view2(&g[i * m * n..(i + 1) * m * n], m, n);
                    gemm_into(
                        1.0,
                        gv,
                        view2(&b[i * k * n..(i + 1) * k * n], k, n).reversed_axes(),
                        0.0,
                        &mut da[i * m * k..(i + 1) * m * k],
                    );
                    gemm_into(
                        1.0,
                        view2(&a[i * m * k..(i + 1) * m * k], m, k).reversed_axes(),
                        gv,
                        0.0,
                        &mut db[i * k * n..(i + 1) * k * n],
                    );
                }
                vec![Some(da), Some(db)]
            }),
        ))
    }
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

struct ConvGeom {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    padding: usize,
    groups: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn cpg(&self) -> usize {
        self.c_in / self.groups
    }
    fn opg(&self) -> usize {
        self.c_out / self.groups
    }
}

fn conv_out_dim(input: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    let span = input + 2 * padding;
    if span < k {
        return None;
    }
    Some((span - k) / stride + 1)
}

/// Lower one (sample, group) into a [cpg*k*k, ho*wo] patch matrix.
fn im2col(x: &[f32], g: &ConvGeom, b: usize, group: usize, cols: &mut [f32]) {
    let (cpg, k, ho, wo) = (g.cpg(), g.k, g.ho, g.wo);
    let hw = g.h * g.w;
    let plane0 = (b * g.c_in + group * cpg) * hw;
    for c in 0..cpg {
        let src = &x[plane0 + c * hw..plane0 + (c + 1) * hw];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        dst[oy * wo..(oy + 1) * wo].fill(0.0);
                        continue;
                    }
                    let row_src = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        dst[oy * wo + ox] =
                            if ix < 0 || ix >= g.w as isize { 0.0 } else { row_src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Scatter a patch-matrix gradient back onto the input plane.
fn col2im(dcols: &[f32], g: &ConvGeom, b: usize, group: usize, dx: &mut [f32]) {
    let (cpg, k, ho, wo) = (g.cpg(), g.k, g.ho, g.wo);
    let hw = g.h * g.w;
    let plane0 = (b * g.c_in + group * cpg) * hw;
    for c in 0..cpg {
        let dst = &mut dx[plane0 + c * hw..plane0 + (c + 1) * hw];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &dcols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        dst[iy as usize * g.w + ix as usize] += src[oy * wo + ox];
                    }
                }
            }
        }
    }
}

impl Tensor {
    /// 2-D cross-correlation (no kernel flip) of `x[B,C_in,H,W]` with
    /// `w[C_out, C_in/groups, k, k]`. Output size is floor-divided; a kernel
    /// larger than the padded input is a shape error. With `fixed` set, the
    /// kernel is treated as non-learnable: gradients flow to the input only.
    pub fn conv2d(&self, weight: &Tensor, stride: usize, padding: usize, groups: usize, fixed: bool) -> Result<Tensor> {
        let xs = self.shape();
        let ws = weight.shape();
        if xs.len() != 4 || ws.len() != 4 || ws[2] != ws[3] {
            return Err(Error::Shape(format!(
                "conv2d expects x[B,C,H,W] and w[Co,Ci/g,k,k], got {xs:?} and {ws:?}"
            )));
        }
        if stride == 0 || groups == 0 || xs[1] % groups != 0 || ws[0] % groups != 0 || ws[1] != xs[1] / groups {
            return Err(Error::Shape(format!(
                "conv2d channel/group mismatch: x {xs:?}, w {ws:?}, groups {groups}"
            )));
        }
        let k = ws[2];
        let (ho, wo) = match (conv_out_dim(xs[2], k, stride, padding), conv_out_dim(xs[3], k, stride, padding)) {
            (Some(h), Some(w)) if h > 0 && w > 0 => (h, w),
            _ => {
                return Err(Error::Shape(format!(
                    "conv2d output size is not positive: x {xs:?}, w {ws:?}, stride {stride}, padding {padding}"
                )))
            }
        };
        let geom = ConvGeom {
            batch: xs[0],
            c_in: xs[1],
            h: xs[2],
            w: xs[3],
            c_out: ws[0],
            k,
            stride,
            padding,
            groups,
            ho,
            wo,
        };
        let (cpg, opg) = (geom.cpg(), geom.opg());
        flops::add(2 * (geom.batch * geom.c_out * cpg * k * k * ho * wo) as u64);

        let mut out = vec![0.0f32; geom.batch * geom.c_out * ho * wo];
        let mut cols = vec![0.0f32; cpg * k * k * ho * wo];
        {
            let x = self.data();
            let w = weight.data();
            for b in 0..geom.batch {
                for gr in 0..geom.groups {
                    im2col(&x, &geom, b, gr, &mut cols);
                    let wg = &w[gr * opg * cpg * k * k..(gr + 1) * opg * cpg * k * k];
                    let dst0 = (b * geom.c_out + gr * opg) * ho * wo;
                    gemm_into(
                        1.0,
                        view2(wg, opg, cpg * k * k),
                        view2(&cols, cpg * k * k, ho * wo),
                        0.0,
                        &mut out[dst0..dst0 + opg * ho * wo],
                    );
                }
            }
        }

        let x_h = self.clone();
        let w_h = weight.clone();
        let want_dw = !fixed && weight.is_tracked();
        Ok(Tensor::from_op(
            out,
            vec![geom.batch, geom.c_out, ho, wo],
            vec![self.clone(), weight.clone()],
            Box::new(move |g, _| {
                let x = x_h.data();
                let w = w_h.data();
                let (cpg, opg) = (geom.cpg(), geom.opg());
                let rows = cpg * geom.k * geom.k;
                let mut dx = vec![0.0f32; x.len()];
                let mut dw = if want_dw { vec![0.0f32; w.len()] } else { Vec::new() };
                let mut cols = vec![0.0f32; rows * geom.ho * geom.wo];
                let mut dcols = vec![0.0f32; rows * geom.ho * geom.wo];
                for b in 0..geom.batch {
                    for gr in 0..geom.groups {
                        let g0 = (b * geom.c_out + gr * opg) * geom.ho * geom.wo;
                        let gv = view2(&g[g0..g0 + opg * geom.ho * geom.wo], opg, geom.ho * geom.wo);
                        if want_dw {
                            im2col(&x, &geom, b, gr, &mut cols);
                            gemm_into(
                                1.0,
                                gv,
                                view2(&cols, rows, geom.ho * geom.wo).reversed_axes(),
                                1.0,
                                &mut dw[gr * opg * rows..(gr + 1) * opg * rows],
                            );
                        }
                        let wg = &w[gr * opg * rows..(gr + 1) * opg * rows];
                        gemm_into(1.0, view2(wg, opg, rows).reversed_axes(), gv, 0.0, &mut dcols);
                        col2im(&dcols, &geom, b, gr, &mut dx);
                    }
                }
                vec![Some(dx), if want_dw { Some(dw) } else { None }]
            }),
        ))
    }
}

// ---------------------------------------------------------------------------
// Bilinear resize
// ---------------------------------------------------------------------------

impl Tensor {
    /// Bilinear resampling with half-pixel centers:
    /// `src = (dst + 0.5) * in/out - 0.5`, clamped. Resizing to the input
    /// size returns a bit-identical copy.
    pub fn bilinear_resize(&self, out_h: usize, out_w: usize) -> Result<Tensor> {
        let shape = self.shape();
        if shape.len() != 4 {
            return Err(Error::Shape(format!(
                "bilinear_resize expects [B,C,H,W], got {shape:?}"
            )));
        }
        if out_h == 0 || out_w == 0 {
            return Err(Error::Shape("bilinear_resize to empty output".into()));
        }
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        flops::add((b * c * out_h * out_w) as u64);

        if out_h == h && out_w == w {
            let data = self.to_vec();
            return Ok(Tensor::from_op(
                data,
                shape,
                vec![self.clone()],
                Box::new(|g, _| vec![Some(g.to_vec())]),
            ));
        }

        // (index0, index1, fraction) per output coordinate
        fn axis_map(n_in: usize, n_out: usize) -> Vec<(usize, usize, f32)> {
            let scale = n_in as f64 / n_out as f64;
            (0..n_out)
                .map(|d| {
                    let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                    let i0 = s.floor() as usize;
                    let i1 = (i0 + 1).min(n_in - 1);
                    (i0, i1, (s - i0 as f64) as f32)
                })
                .collect()
        }

        let ymap = axis_map(h, out_h);
        let xmap = axis_map(w, out_w);
        let mut out = vec![0.0f32; b * c * out_h * out_w];
        {
            let x = self.data();
            for bc in 0..b * c {
                let src = &x[bc * h * w..(bc + 1) * h * w];
                let dst = &mut out[bc * out_h * out_w..(bc + 1) * out_h * out_w];
                for (oy, &(y0, y1, fy)) in ymap.iter().enumerate() {
                    for (ox, &(x0, x1, fx)) in xmap.iter().enumerate() {
                        let v00 = src[y0 * w + x0];
                        let v01 = src[y0 * w + x1];
                        let v10 = src[y1 * w + x0];
                        let v11 = src[y1 * w + x1];
                        let top = v00 + fx * (v01 - v00);
                        let bot = v10 + fx * (v11 - v10);
                        dst[oy * out_w + ox] = top + fy * (bot - top);
                    }
                }
            }
        }
        let total_in = self.numel();
        Ok(Tensor::from_op(
            out,
            vec![b, c, out_h, out_w],
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut dx = vec![0.0f32; total_in];
                for bc in 0..b * c {
                    let gsl = &g[bc * out_h * out_w..(bc + 1) * out_h * out_w];
                    let dst = &mut dx[bc * h * w..(bc + 1) * h * w];
                    for (oy, &(y0, y1, fy)) in ymap.iter().enumerate() {
                        for (ox, &(x0, x1, fx)) in xmap.iter().enumerate() {
                            let gv = gsl[oy * out_w + ox];
                            dst[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                            dst[y0 * w + x1] += gv * (1.0 - fy) * fx;
                            dst[y1 * w + x0] += gv * fy * (1.0 - fx);
                            dst[y1 * w + x1] += gv * fy * fx;
                        }
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }
}

// ---------------------------------------------------------------------------
// Softmax and normalization
// ---------------------------------------------------------------------------

impl Tensor {
    /// Numerically stable softmax along `axis` (max subtraction, f64
    /// exponential sums).
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::Shape(format!("softmax axis {axis} out of range for {shape:?}")));
        }
        flops::add(self.numel() as u64);
        let n = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();

        let mut out = vec![0.0f32; self.numel()];
        {
            let x = self.data();
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |a: usize| (o * n + a) * inner + i;
                    let mut m = f32::NEG_INFINITY;
                    for a in 0..n {
                        m = m.max(x[idx(a)]);
                    }
                    let mut s = 0.0f64;
                    for a in 0..n {
                        s += ((x[idx(a)] - m) as f64).exp();
                    }
                    for a in 0..n {
                        out[idx(a)] = (((x[idx(a)] - m) as f64).exp() / s) as f32;
                    }
                }
            }
        }
        Ok(Tensor::from_op(
            out,
            shape,
            vec![self.clone()],
            Box::new(move |g, y| {
                let mut dx = vec![0.0f32; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |a: usize| (o * n + a) * inner + i;
                        let mut dot = 0.0f64;
                        for a in 0..n {
                            dot += g[idx(a)] as f64 * y[idx(a)] as f64;
                        }
                        for a in 0..n {
                            let j = idx(a);
                            dx[j] = (y[j] as f64 * (g[j] as f64 - dot)) as f32;
                        }
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Zero-mean, unit-variance normalization (no affine). Statistics use
    /// biased variance accumulated in f64; `eps` guards zero-variance lanes,
    /// which come out as exactly zero.
    pub fn normalize(&self, mode: NormMode, eps: f32) -> Result<Tensor> {
        let shape = self.shape();
        flops::add(self.numel() as u64);

        // (lane base offsets, lane length, lane element stride)
        let lanes: Vec<usize>;
        let (lane_len, lane_stride): (usize, usize);
        match mode {
            NormMode::Layer => {
                let n = *shape.last().ok_or_else(|| Error::Shape("normalize on rank-0 tensor".into()))?;
                lane_len = n;
                lane_stride = 1;
                lanes = (0..self.numel() / n).map(|o| o * n).collect();
            }
            NormMode::Instance => {
                if shape.is_empty() {
                    return Err(Error::Shape("normalize on rank-0 tensor".into()));
                }
                let n = self.numel() / shape[0];
                lane_len = n;
                lane_stride = 1;
                lanes = (0..shape[0]).map(|b| b * n).collect();
            }
            NormMode::Batch => {
                if shape.len() < 2 {
                    return Err(Error::Shape(format!(
                        "batch normalize needs rank >= 2, got {shape:?}"
                    )));
                }
                // handled separately below (strided lanes)
                lane_len = 0;
                lane_stride = 0;
                lanes = Vec::new();
            }
        }

        if mode == NormMode::Batch {
            return self.normalize_batch(eps);
        }

        let mut out = vec![0.0f32; self.numel()];
        {
            let x = self.data();
            for &base in &lanes {
                normalize_lane(&x, &mut out, base, lane_len, lane_stride, eps);
            }
        }
        let x_h = self.clone();
        let lanes_b = lanes;
        Ok(Tensor::from_op(
            out,
            shape,
            vec![self.clone()],
            Box::new(move |g, y| {
                let x = x_h.data();
                let mut dx = vec![0.0f32; g.len()];
                for &base in &lanes_b {
                    normalize_lane_backward(&x, y, g, &mut dx, base, lane_len, lane_stride, eps);
                }
                vec![Some(dx)]
            }),
        ))
    }

    fn normalize_batch(&self, eps: f32) -> Result<Tensor> {
        let shape = self.shape();
        let (b, c) = (shape[0], shape[1]);
        let sp: usize = shape[2..].iter().product();
        let mut out = vec![0.0f32; self.numel()];
        {
            let x = self.data();
            for ch in 0..c {
                batch_lane(&x, &mut out, b, c, sp, ch, eps);
            }
        }
        let x_h = self.clone();
        Ok(Tensor::from_op(
            out,
            shape,
            vec![self.clone()],
            Box::new(move |g, y| {
                let x = x_h.data();
                let mut dx = vec![0.0f32; g.len()];
                let n = (b * sp) as f64;
                for ch in 0..c {
                    // recompute sigma for this channel
                    let mut mean = 0.0f64;
                    for bi in 0..b {
                        for s in 0..sp {
                            mean += x[(bi * c + ch) * sp + s] as f64;
                        }
                    }
                    mean /= n;
                    let mut var = 0.0f64;
                    for bi in 0..b {
                        for s in 0..sp {
                            let d = x[(bi * c + ch) * sp + s] as f64 - mean;
                            var += d * d;
                        }
                    }
                    var /= n;
                    let inv = 1.0 / (var + eps as f64).sqrt();
                    let (mut gm, mut gym) = (0.0f64, 0.0f64);
                    for bi in 0..b {
                        for s in 0..sp {
                            let j = (bi * c + ch) * sp + s;
                            gm += g[j] as f64;
                            gym += g[j] as f64 * y[j] as f64;
                        }
                    }
                    gm /= n;
                    gym /= n;
                    for bi in 0..b {
                        for s in 0..sp {
                            let j = (bi * c + ch) * sp + s;
                            dx[j] = (inv * (g[j] as f64 - gm - y[j] as f64 * gym)) as f32;
                        }
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }
}

fn normalize_lane(x: &[f32], out: &mut [f32], base: usize, len: usize, stride: usize, eps: f32) {
    let n = len as f64;
    let mut mean = 0.0f64;
    for i in 0..len {
        mean += x[base + i * stride] as f64;
    }
    mean /= n;
    let mut var = 0.0f64;
    for i in 0..len {
        let d = x[base + i * stride] as f64 - mean;
        var += d * d;
    }
    var /= n;
    let inv = 1.0 / (var + eps as f64).sqrt();
    for i in 0..len {
        out[base + i * stride] = ((x[base + i * stride] as f64 - mean) * inv) as f32;
    }
}

#[allow(clippy::too_many_arguments)]
fn normalize_lane_backward(
    x: &[f32],
    y: &[f32],
    g: &[f32],
    dx: &mut [f32],
    base: usize,
    len: usize,
    stride: usize,
    eps: f32,
) {
    let n = len as f64;
    let mut mean = 0.0f64;
    for i in 0..len {
        mean += x[base + i * stride] as f64;
    }
    mean /= n;
    let mut var = 0.0f64;
    for i in 0..len {
        let d = x[base + i * stride] as f64 - mean;
        var += d * d;
    }
    var /= n;
    let inv = 1.0 / (var + eps as f64).sqrt();
    let (mut gm, mut gym) = (0.0f64, 0.0f64);
    for i in 0..len {
        let j = base + i * stride;
        gm += g[j] as f64;
        gym += g[j] as f64 * y[j] as f64;
    }
    gm /= n;
    gym /= n;
    for i in 0..len {
        let j = base + i * stride;
        dx[j] = (inv * (g[j] as f64 - gm - y[j] as f64 * gym)) as f32;
    }
}

fn batch_lane(x: &[f32], out: &mut [f32], b: usize, c: usize, sp: usize, ch: usize, eps: f32) {
    let n = (b * sp) as f64;
    let mut mean = 0.0f64;
    for bi in 0..b {
        for s in 0..sp {
            mean += x[(bi * c + ch) * sp + s] as f64;
        }
    }
    mean /= n;
    let mut var = 0.0f64;
    for bi in 0..b {
        for s in 0..sp {
            let d = x[(bi * c + ch) * sp + s] as f64 - mean;
            var += d * d;
        }
    }
    var /= n;
    let inv = 1.0 / (var + eps as f64).sqrt();
    for bi in 0..b {
        for s in 0..sp {
            let j = (bi * c + ch) * sp + s;
            out[j] = ((x[j] as f64 - mean) * inv) as f32;
        }
    }
}

// ---------------------------------------------------------------------------
// Dropout
// ---------------------------------------------------------------------------

impl Tensor {
    /// Inverted dropout: keeps with probability 1-p and rescales. Identity in
    /// eval mode or at p = 0.
    pub fn dropout(&self, p: f32, train: bool, rng: &mut SplitMix64) -> Tensor {
        if !train || p <= 0.0 {
            return self.clone();
        }
        flops::add(self.numel() as u64);
        let keep = 1.0 - p;
        let scale = 1.0 / keep;
        let mask: Vec<f32> = (0..self.numel())
            .map(|_| if rng.chance(keep) { scale } else { 0.0 })
            .collect();
        let data: Vec<f32> = self.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        Tensor::from_op(
            data,
            self.shape(),
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(g.iter().zip(&mask).map(|(g, m)| g * m).collect())]),
        )
    }
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
