//! Edge-aware composite training loss.
//!
//! Predicted masks pass through a per-class sigmoid; the mask term is mean
//! binary cross-entropy against one-hot targets, and the edge term is BCE
//! between a normalized Scharr edge magnitude of the probabilities and a
//! morphological-gradient edge ground truth. Total: lambda1 * edge +
//! lambda2 * mask.

use crate::error::{Error, Result};
use crate::tensor::{flops, Tensor};

/// Mask label value excluded from losses and metrics (padding regions).
pub const IGNORE_LABEL: u8 = 255;

/// BCE probability clamp.
pub const BCE_EPS: f32 = 1e-7;

/// Horizontal Scharr kernel (x-direction derivative).
pub const SCHARR_KX: [[f32; 3]; 3] = [[-3.0, 0.0, 3.0], [-10.0, 0.0, 10.0], [-3.0, 0.0, 3.0]];
/// Vertical Scharr kernel (y-direction derivative).
pub const SCHARR_KY: [[f32; 3]; 3] = [[-3.0, -10.0, -3.0], [0.0, 0.0, 0.0], [3.0, 10.0, 3.0]];

/// Maximum magnitude of the normalized operator on [0,1] inputs: both
/// derivatives saturate at 16, so |g| <= 16 * sqrt(2).
const SCHARR_MAX: f32 = 22.627417; // 16 * sqrt(2)

#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub lambda1: f32,
    pub lambda2: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda1: 1.0, lambda2: 3.0 }
    }
}

/// Predicted edge magnitude and binary edge ground truth.
#[derive(Debug)]
pub struct EdgeMaps {
    pub e: Tensor,
    pub g_e: Tensor,
}

// ---------------------------------------------------------------------------
// Scharr stencil
// ---------------------------------------------------------------------------

/// Depthwise fixed-kernel 3x3 derivative, stride 1, padding 1 with edge
/// replication, so constant maps yield exactly zero response everywhere
/// (image borders are not treated as steps).
///
/// Accumulation groups symmetric taps first (3*(a+c) + 10*b per line), so a
/// horizontally flipped input produces exactly negated/mirrored responses
/// and the edge magnitude commutes with flips bit-for-bit.
fn scharr_conv(m: &Tensor, horizontal: bool) -> Result<Tensor> {
    let shape = m.shape();
    if shape.len() != 4 {
        return Err(Error::Shape(format!("scharr expects [B,C,H,W], got {shape:?}")));
    }
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    flops::add(18 * (b * c * h * w) as u64);

    let line = |p: f32, q: f32, r: f32| 3.0 * (p + r) + 10.0 * q;
    let mut out = vec![0.0f32; m.numel()];
    {
        let x = m.data();
        for plane in 0..b * c {
            let src = &x[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * h * w..(plane + 1) * h * w];
            let get = |y: isize, xx: isize| -> f32 {
                let y = y.clamp(0, h as isize - 1) as usize;
                let xx = xx.clamp(0, w as isize - 1) as usize;
                src[y * w + xx]
            };
            for y in 0..h as isize {
                for xx in 0..w as isize {
                    let v = if horizontal {
                        line(get(y - 1, xx + 1), get(y, xx + 1), get(y + 1, xx + 1))
                            - line(get(y - 1, xx - 1), get(y, xx - 1), get(y + 1, xx - 1))
                    } else {
                        line(get(y + 1, xx - 1), get(y + 1, xx), get(y + 1, xx + 1))
                            - line(get(y - 1, xx - 1), get(y - 1, xx), get(y - 1, xx + 1))
                    };
                    dst[y as usize * w + xx as usize] = v;
                }
            }
        }
    }

    let kernel = if horizontal { SCHARR_KX } else { SCHARR_KY };
    Ok(Tensor::from_op(
        out,
        shape,
        vec![m.clone()],
        Box::new(move |g, _| {
            let mut dx = vec![0.0f32; g.len()];
            for plane in 0..b * c {
                let gp = &g[plane * h * w..(plane + 1) * h * w];
                let dp = &mut dx[plane * h * w..(plane + 1) * h * w];
                for y in 0..h {
                    for xx in 0..w {
                        let gv = gp[y * w + xx];
                        if gv == 0.0 {
                            continue;
                        }
                        for (r, row) in kernel.iter().enumerate() {
                            for (cc, &k) in row.iter().enumerate() {
                                if k == 0.0 {
                                    continue;
                                }
                                // adjoint of edge replication: clamp taps
                                let iy = (y as isize + r as isize - 1).clamp(0, h as isize - 1);
                                let ix = (xx as isize + cc as isize - 1).clamp(0, w as isize - 1);
                                dp[iy as usize * w + ix as usize] += k * gv;
                            }
                        }
                    }
                }
            }
            vec![Some(dx)]
        }),
    ))
}

/// Normalized edge magnitude of per-class probability maps:
/// sqrt(gx^2 + gy^2) / (16*sqrt(2)), clamped into [0, 1). Differentiable;
/// exactly zero on constant inputs.
pub fn scharr_edges(m: &Tensor) -> Result<Tensor> {
    let gx = scharr_conv(m, true)?;
    let gy = scharr_conv(m, false)?;
    let mag = gx.mul(&gx)?.add(&gy.mul(&gy)?)?.sqrt("scharr edge magnitude")?;
    Ok(mag.mul_scalar(1.0 / SCHARR_MAX).clamp(0.0, 1.0 - 1e-6))
}

// ---------------------------------------------------------------------------
// Morphological edge ground truth
// ---------------------------------------------------------------------------

fn cross_sweep(src: &[u8], h: usize, w: usize, dilate: bool) -> Vec<u8> {
    let mut out = vec![0u8; src.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = src[y * w + x];
            let mut consider = |yy: isize, xx: isize| {
                // out-of-bounds neighbors do not constrain the result
                if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                    return;
                }
                let v = src[yy as usize * w + xx as usize];
                acc = if dilate { acc.max(v) } else { acc.min(v) };
            };
            consider(y as isize - 1, x as isize);
            consider(y as isize + 1, x as isize);
            consider(y as isize, x as isize - 1);
            consider(y as isize, x as isize + 1);
            out[y * w + x] = acc;
        }
    }
    out
}

/// Per-class morphological gradient of a one-hot mask: dilation minus
/// erosion with a 3x3 cross structuring element applied `radius` times.
/// Output is binary {0,1} and carries no gradient.
pub fn morph_edge_gt(one_hot: &Tensor, radius: usize) -> Result<Tensor> {
    let shape = one_hot.shape();
    if shape.len() != 4 {
        return Err(Error::Shape(format!("morph_edge_gt expects [B,C,H,W], got {shape:?}")));
    }
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let data = one_hot.to_vec();
    if let Some(v) = data.iter().find(|v| **v != 0.0 && **v != 1.0) {
        return Err(Error::Contract(format!(
            "morph_edge_gt requires a binary one-hot mask, found value {v}"
        )));
    }
    let mut out = vec![0.0f32; data.len()];
    for plane in 0..b * c {
        let src: Vec<u8> = data[plane * h * w..(plane + 1) * h * w]
            .iter()
            .map(|v| *v as u8)
            .collect();
        let mut dil = src.clone();
        let mut ero = src;
        for _ in 0..radius {
            dil = cross_sweep(&dil, h, w, true);
            ero = cross_sweep(&ero, h, w, false);
        }
        let dst = &mut out[plane * h * w..(plane + 1) * h * w];
        for i in 0..h * w {
            dst[i] = (dil[i] - ero[i]) as f32;
        }
    }
    Tensor::from_vec(out, &shape)
}

// ---------------------------------------------------------------------------
// Binary cross-entropy
// ---------------------------------------------------------------------------

/// Mean over all entries of -[t ln p + (1-t) ln(1-p)], with p clamped into
/// [eps, 1-eps].
pub fn bce(p: &Tensor, t: &Tensor, eps: f32) -> Result<Tensor> {
    if p.shape() != t.shape() {
        return Err(Error::Shape(format!(
            "bce shape mismatch: prediction {:?} vs target {:?}",
            p.shape(),
            t.shape()
        )));
    }
    let pc = p.clamp(eps, 1.0 - eps);
    let one_minus = pc.mul_scalar(-1.0).add_scalar(1.0);
    let pos = t.mul(&pc.ln()?)?;
    let neg = t.mul_scalar(-1.0).add_scalar(1.0).mul(&one_minus.ln()?)?;
    Ok(pos.add(&neg)?.mean_all().mul_scalar(-1.0))
}

// ---------------------------------------------------------------------------
// Total loss
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct LossOutput {
    pub total: Tensor,
    /// Unweighted edge BCE component.
    pub edge_bce: f32,
    /// Unweighted mask BCE component.
    pub mask_bce: f32,
}

/// Predicted edge magnitude and morphological edge GT for given
/// probabilities and one-hot targets.
pub fn edge_maps(prob: &Tensor, one_hot: &Tensor, radius: usize) -> Result<EdgeMaps> {
    Ok(EdgeMaps { e: scharr_edges(prob)?, g_e: morph_edge_gt(one_hot, radius)? })
}

/// Composite objective on full-resolution logits against a one-hot target:
/// lambda1 * BCE(edges(sigmoid(logits)), morph(target)) +
/// lambda2 * BCE(sigmoid(logits), target). Returns the differentiable total
/// plus both unweighted components for logging.
pub fn total_loss(
    logits: &Tensor,
    one_hot: &Tensor,
    weights: &LossWeights,
    edge_radius: usize,
) -> Result<LossOutput> {
    let (ls, ts) = (logits.shape(), one_hot.shape());
    if ls.len() != 4 || ts.len() != 4 || ls[1] != ts[1] {
        return Err(Error::Config(format!(
            "class count mismatch between prediction {ls:?} and target {ts:?}"
        )));
    }
    if ls != ts {
        return Err(Error::Shape(format!(
            "spatial size mismatch between prediction {ls:?} and target {ts:?}"
        )));
    }
    if weights.lambda1 < 0.0 || weights.lambda2 < 0.0 {
        return Err(Error::Config("loss weights must be nonnegative".into()));
    }
    flops::scope("loss", || {
        let prob = logits.sigmoid();
        let mask_term = bce(&prob, one_hot, BCE_EPS)?;
        let maps = edge_maps(&prob, one_hot, edge_radius)?;
        let edge_term = bce(&maps.e, &maps.g_e, BCE_EPS)?;
        let mask_bce = mask_term.item();
        let edge_bce = edge_term.item();
        let total = edge_term
            .mul_scalar(weights.lambda1)
            .add(&mask_term.mul_scalar(weights.lambda2))?;
        Ok(LossOutput { total, edge_bce, mask_bce })
    })
}

/// Expand an integer label map into per-class binary planes. Pixels labeled
/// [`IGNORE_LABEL`] get an all-zero row.
pub fn one_hot(labels: &[u8], b: usize, h: usize, w: usize, n_cls: usize) -> Result<Tensor> {
    if labels.len() != b * h * w {
        return Err(Error::Shape(format!(
            "label buffer length {} != {b}x{h}x{w}",
            labels.len()
        )));
    }
    let mut data = vec![0.0f32; b * n_cls * h * w];
    for bi in 0..b {
        for i in 0..h * w {
            let l = labels[bi * h * w + i];
            if l == IGNORE_LABEL {
                continue;
            }
            if l as usize >= n_cls {
                return Err(Error::Contract(format!(
                    "label {l} out of range for {n_cls} classes at pixel ({}, {}) of sample {bi}",
                    i / w,
                    i % w
                )));
            }
            data[(bi * n_cls + l as usize) * h * w + i] = 1.0;
        }
    }
    Tensor::from_vec(data, &[b, n_cls, h, w])
}
