//! Layout-aware image kernels on `[B, C, H, W]` tensors.

use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tensor::Tensor;

/// Softmax over the channel axis, stabilized by the per-pixel channel max.
pub fn softmax_channels<F: Real>(logits: &Tensor<F>) -> Result<Tensor<F>> {
    let [b, c, h, w] = logits.dims4()?;
    if c == 0 {
        return Err(TensorError::InvalidArgument {
            op: "softmax_channels",
            msg: "at least one channel is required".into(),
        });
    }
    if !logits.all_finite() {
        return Err(TensorError::NonFinite {
            op: "softmax_channels",
        });
    }
    let plane = h * w;
    let src = logits.data();
    let mut out = vec![F::zero(); src.len()];
    for n in 0..b {
        let base = n * c * plane;
        for p in 0..plane {
            let mut peak = F::neg_infinity();
            for k in 0..c {
                peak = peak.max(src[base + k * plane + p]);
            }
            let mut total = F::zero();
            for k in 0..c {
                let e = (src[base + k * plane + p] - peak).exp();
                out[base + k * plane + p] = e;
                total += e;
            }
            for k in 0..c {
                out[base + k * plane + p] = out[base + k * plane + p] / total;
            }
        }
    }
    Tensor::new(logits.shape().to_vec(), out)
}

/// Vector-Jacobian product of the channel softmax given its output.
pub fn softmax_channels_backward<F: Real>(
    probs: &Tensor<F>,
    grad: &Tensor<F>,
) -> Result<Tensor<F>> {
    let [b, c, h, w] = probs.dims4()?;
    let plane = h * w;
    let (y, g) = (probs.data(), grad.data());
    let mut out = vec![F::zero(); y.len()];
    for n in 0..b {
        let base = n * c * plane;
        for p in 0..plane {
            let mut dot = F::zero();
            for k in 0..c {
                let i = base + k * plane + p;
                dot += g[i] * y[i];
            }
            for k in 0..c {
                let i = base + k * plane + p;
                out[i] = y[i] * (g[i] - dot);
            }
        }
    }
    Tensor::new(probs.shape().to_vec(), out)
}

/// Horizontal forward difference `x[.., i + 1] - x[.., i]`; the last column is dropped.
pub fn grad_x<F: Real>(x: &Tensor<F>) -> Result<Tensor<F>> {
    let [b, c, h, w] = x.dims4()?;
    if w < 2 {
        return Err(TensorError::InvalidArgument {
            op: "grad_x",
            msg: format!("width {w} too small for a forward difference"),
        });
    }
    let src = x.data();
    let mut out = Vec::with_capacity(b * c * h * (w - 1));
    for row in src.chunks_exact(w) {
        out.extend(row.windows(2).map(|p| p[1] - p[0]));
    }
    Tensor::new(vec![b, c, h, w - 1], out)
}

pub fn grad_x_backward<F: Real>(input_shape: &[usize], grad: &Tensor<F>) -> Result<Tensor<F>> {
    let w = input_shape[3];
    let mut out = Tensor::zeros(input_shape.to_vec());
    for (dst, g) in out
        .data_mut()
        .chunks_exact_mut(w)
        .zip(grad.data().chunks_exact(w - 1))
    {
        for (i, &gv) in g.iter().enumerate() {
            dst[i + 1] += gv;
            dst[i] -= gv;
        }
    }
    Ok(out)
}

/// Vertical forward difference; the last row is dropped.
pub fn grad_y<F: Real>(x: &Tensor<F>) -> Result<Tensor<F>> {
    let [b, c, h, w] = x.dims4()?;
    if h < 2 {
        return Err(TensorError::InvalidArgument {
            op: "grad_y",
            msg: format!("height {h} too small for a forward difference"),
        });
    }
    let src = x.data();
    let mut out = Vec::with_capacity(b * c * (h - 1) * w);
    for plane in src.chunks_exact(h * w) {
        for y in 0..h - 1 {
            out.extend((0..w).map(|x| plane[(y + 1) * w + x] - plane[y * w + x]));
        }
    }
    Tensor::new(vec![b, c, h - 1, w], out)
}

pub fn grad_y_backward<F: Real>(input_shape: &[usize], grad: &Tensor<F>) -> Result<Tensor<F>> {
    let (h, w) = (input_shape[2], input_shape[3]);
    let mut out = Tensor::zeros(input_shape.to_vec());
    for (dst, g) in out
        .data_mut()
        .chunks_exact_mut(h * w)
        .zip(grad.data().chunks_exact((h - 1) * w))
    {
        for y in 0..h - 1 {
            for x in 0..w {
                let gv = g[y * w + x];
                dst[(y + 1) * w + x] += gv;
                dst[y * w + x] -= gv;
            }
        }
    }
    Ok(out)
}

pub fn flip_w<F: Real>(x: &Tensor<F>) -> Result<Tensor<F>> {
    let [_, _, _, w] = x.dims4()?;
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(w) {
        row.reverse();
    }
    Ok(out)
}

pub fn upsample_nearest2x<F: Real>(x: &Tensor<F>) -> Result<Tensor<F>> {
    let [b, c, h, w] = x.dims4()?;
    let (oh, ow) = (2 * h, 2 * w);
    let src = x.data();
    let mut out = vec![F::zero(); b * c * oh * ow];
    for (dst, plane) in out.chunks_exact_mut(oh * ow).zip(src.chunks_exact(h * w)) {
        for y in 0..oh {
            for xx in 0..ow {
                dst[y * ow + xx] = plane[(y / 2) * w + xx / 2];
            }
        }
    }
    Tensor::new(vec![b, c, oh, ow], out)
}

pub fn upsample_nearest2x_backward<F: Real>(
    input_shape: &[usize],
    grad: &Tensor<F>,
) -> Result<Tensor<F>> {
    let (h, w) = (input_shape[2], input_shape[3]);
    let ow = 2 * w;
    let mut out = Tensor::zeros(input_shape.to_vec());
    for (dst, g) in out
        .data_mut()
        .chunks_exact_mut(h * w)
        .zip(grad.data().chunks_exact(4 * h * w))
    {
        for y in 0..2 * h {
            for x in 0..ow {
                dst[(y / 2) * w + x / 2] += g[y * ow + x];
            }
        }
    }
    Ok(out)
}

/// Zero-insertion upsampling: input pixel `(y, x)` lands on `(2y, 2x)`, the rest is zero.
pub fn upsample_zeros2x<F: Real>(x: &Tensor<F>) -> Result<Tensor<F>> {
    let [b, c, h, w] = x.dims4()?;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![F::zero(); b * c * oh * ow];
    for (dst, plane) in out
        .chunks_exact_mut(oh * ow)
        .zip(x.data().chunks_exact(h * w))
    {
        for y in 0..h {
            for xx in 0..w {
                dst[2 * y * ow + 2 * xx] = plane[y * w + xx];
            }
        }
    }
    Tensor::new(vec![b, c, oh, ow], out)
}

pub fn upsample_zeros2x_backward<F: Real>(
    input_shape: &[usize],
    grad: &Tensor<F>,
) -> Result<Tensor<F>> {
    let (h, w) = (input_shape[2], input_shape[3]);
    let ow = 2 * w;
    let mut out = Tensor::zeros(input_shape.to_vec());
    for (dst, g) in out
        .data_mut()
        .chunks_exact_mut(h * w)
        .zip(grad.data().chunks_exact(4 * h * w))
    {
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = g[2 * y * ow + 2 * x];
            }
        }
    }
    Ok(out)
}

/// Linear interpolation taps for resampling `src` samples onto `dst` samples
/// with half-pixel centers (`align_corners = false`), clamped at the borders.
pub fn linear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = pos.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}

/// Bilinear resize of every plane to `(out_h, out_w)`.
pub fn resize_bilinear<F: Real>(x: &Tensor<F>, out_h: usize, out_w: usize) -> Result<Tensor<F>> {
    let [b, c, h, w] = x.dims4()?;
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(TensorError::InvalidArgument {
            op: "resize_bilinear",
            msg: format!("cannot resize {h}x{w} to {out_h}x{out_w}"),
        });
    }
    let ty = linear_taps(h, out_h);
    let tx = linear_taps(w, out_w);
    let mut out = vec![F::zero(); b * c * out_h * out_w];
    for (dst, plane) in out
        .chunks_exact_mut(out_h * out_w)
        .zip(x.data().chunks_exact(h * w))
    {
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = F::from_f64_lossy(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = F::from_f64_lossy(fx);
                let top = plane[y0 * w + x0] * (F::one() - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (F::one() - fx) + plane[y1 * w + x1] * fx;
                dst[oy * out_w + ox] = top * (F::one() - fy) + bot * fy;
            }
        }
    }
    Tensor::new(vec![b, c, out_h, out_w], out)
}

/// Adjoint of [`resize_bilinear`].
pub fn resize_bilinear_backward<F: Real>(
    input_shape: &[usize],
    grad: &Tensor<F>,
) -> Result<Tensor<F>> {
    let (h, w) = (input_shape[2], input_shape[3]);
    let [_, _, out_h, out_w] = grad.dims4()?;
    let ty = linear_taps(h, out_h);
    let tx = linear_taps(w, out_w);
    let mut out = Tensor::zeros(input_shape.to_vec());
    for (dst, g) in out
        .data_mut()
        .chunks_exact_mut(h * w)
        .zip(grad.data().chunks_exact(out_h * out_w))
    {
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = F::from_f64_lossy(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = F::from_f64_lossy(fx);
                let gv = g[oy * out_w + ox];
                dst[y0 * w + x0] += gv * (F::one() - fy) * (F::one() - fx);
                dst[y0 * w + x1] += gv * (F::one() - fy) * fx;
                dst[y1 * w + x0] += gv * fy * (F::one() - fx);
                dst[y1 * w + x1] += gv * fy * fx;
            }
        }
    }
    Ok(out)
}

pub fn concat_channels<F: Real>(parts: &[&Tensor<F>]) -> Result<Tensor<F>> {
    let first = parts.first().ok_or_else(|| TensorError::InvalidArgument {
        op: "concat_channels",
        msg: "no tensors given".into(),
    })?;
    let [b, _, h, w] = first.dims4()?;
    let mut total_c = 0;
    for p in parts {
        let [pb, pc, ph, pw] = p.dims4()?;
        for (dim, name, e, a) in [
            (0, "batch", b, pb),
            (2, "height", h, ph),
            (3, "width", w, pw),
        ] {
            if e != a {
                return Err(TensorError::DimMismatch {
                    op: "concat_channels",
                    dim,
                    name,
                    expected: e,
                    actual: a,
                });
            }
        }
        total_c += pc;
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(b * total_c * plane);
    for n in 0..b {
        for p in parts {
            let pc = p.shape()[1];
            out.extend_from_slice(&p.data()[n * pc * plane..(n + 1) * pc * plane]);
        }
    }
    Tensor::new(vec![b, total_c, h, w], out)
}

/// Split a channel-concatenated gradient back into per-part gradients.
pub fn split_channels<F: Real>(grad: &Tensor<F>, channels: &[usize]) -> Result<Vec<Tensor<F>>> {
    let [b, c, h, w] = grad.dims4()?;
    debug_assert_eq!(channels.iter().sum::<usize>(), c);
    let plane = h * w;
    let mut parts: Vec<Vec<F>> = channels
        .iter()
        .map(|&pc| Vec::with_capacity(b * pc * plane))
        .collect();
    for n in 0..b {
        let mut offset = n * c * plane;
        for (part, &pc) in parts.iter_mut().zip(channels) {
            part.extend_from_slice(&grad.data()[offset..offset + pc * plane]);
            offset += pc * plane;
        }
    }
    parts
        .into_iter()
        .zip(channels)
        .map(|(d, &pc)| Tensor::new(vec![b, pc, h, w], d))
        .collect()
}

/// Sum over channels, keeping a singleton channel axis.
pub fn sum_channels<F: Real>(x: &Tensor<F>) -> Result<Tensor<F>> {
    let [b, c, h, w] = x.dims4()?;
    let plane = h * w;
    let mut out = vec![F::zero(); b * plane];
    for n in 0..b {
        let dst = &mut out[n * plane..(n + 1) * plane];
        for k in 0..c {
            let src = &x.data()[(n * c + k) * plane..(n * c + k + 1) * plane];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    Tensor::new(vec![b, 1, h, w], out)
}

/// Repeat a single-channel tensor `channels` times.
pub fn broadcast_channels<F: Real>(x: &Tensor<F>, channels: usize) -> Result<Tensor<F>> {
    let [b, c, h, w] = x.dims4()?;
    if c != 1 {
        return Err(TensorError::DimMismatch {
            op: "broadcast_channels",
            dim: 1,
            name: "channels",
            expected: 1,
            actual: c,
        });
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(b * channels * plane);
    for n in 0..b {
        for _ in 0..channels {
            out.extend_from_slice(&x.data()[n * plane..(n + 1) * plane]);
        }
    }
    Tensor::new(vec![b, channels, h, w], out)
}

/// Multiply channel `k` by `weights[k]`.
pub fn scale_channels<F: Real>(x: &Tensor<F>, weights: &[F]) -> Result<Tensor<F>> {
    let [b, c, h, w] = x.dims4()?;
    if weights.len() != c {
        return Err(TensorError::DimMismatch {
            op: "scale_channels",
            dim: 1,
            name: "channels",
            expected: weights.len(),
            actual: c,
        });
    }
    let plane = h * w;
    let mut out = x.clone();
    for (i, chunk) in out.data_mut().chunks_exact_mut(plane).enumerate() {
        let s = weights[i % c];
        chunk.iter_mut().for_each(|v| *v *= s);
    }
    let _ = b;
    Ok(out)
}
