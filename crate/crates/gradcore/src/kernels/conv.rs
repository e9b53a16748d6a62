//! 2-D cross-correlation via im2col + GEMM.

use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    pub fn new<F: Real>(
        input: &Tensor<F>,
        weight: &Tensor<F>,
        bias: Option<&Tensor<F>>,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        const OP: &str = "conv2d";
        let [batch, in_channels, height, width] = input.dims4()?;
        let [out_channels, w_in, kernel_h, kernel_w] =
            weight.dims4().map_err(|_| TensorError::Rank {
                op: OP,
                expected: 4,
                shape: weight.shape().to_vec(),
            })?;
        if stride == 0 {
            return Err(TensorError::InvalidArgument {
                op: OP,
                msg: "stride must be at least 1".into(),
            });
        }
        if w_in != in_channels {
            return Err(TensorError::DimMismatch {
                op: OP,
                dim: 1,
                name: "input channels",
                expected: w_in,
                actual: in_channels,
            });
        }
        if let Some(b) = bias {
            if b.numel() != out_channels {
                return Err(TensorError::DimMismatch {
                    op: OP,
                    dim: 0,
                    name: "bias length",
                    expected: out_channels,
                    actual: b.numel(),
                });
            }
        }
        if height + 2 * padding < kernel_h {
            return Err(TensorError::DimMismatch {
                op: OP,
                dim: 2,
                name: "padded height smaller than kernel height",
                expected: kernel_h,
                actual: height + 2 * padding,
            });
        }
        if width + 2 * padding < kernel_w {
            return Err(TensorError::DimMismatch {
                op: OP,
                dim: 3,
                name: "padded width smaller than kernel width",
                expected: kernel_w,
                actual: width + 2 * padding,
            });
        }
        Ok(Self {
            batch,
            in_channels,
            out_channels,
            height,
            width,
            kernel_h,
            kernel_w,
            stride,
            padding,
            out_height: (height + 2 * padding - kernel_h) / stride + 1,
            out_width: (width + 2 * padding - kernel_w) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn out_plane(&self) -> usize {
        self.out_height * self.out_width
    }

    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.padding == 0
    }

    /// Source column for output column `ox` and kernel column `kx`, if inside the image.
    #[inline]
    fn src(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

fn im2col<F: Real>(g: &ConvGeometry, image: &[F], col: &mut [F]) {
    let plane = g.out_plane();
    let mut row = 0;
    for c in 0..g.in_channels {
        let chan = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oy in 0..g.out_height {
                    let line = &mut dst[oy * g.out_width..(oy + 1) * g.out_width];
                    match g.src(oy, ky, g.height) {
                        None => line.iter_mut().for_each(|v| *v = F::zero()),
                        Some(iy) => {
                            let src = &chan[iy * g.width..(iy + 1) * g.width];
                            for (ox, v) in line.iter_mut().enumerate() {
                                *v = g.src(ox, kx, g.width).map_or(F::zero(), |ix| src[ix]);
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im<F: Real>(g: &ConvGeometry, col: &[F], image: &mut [F]) {
    let plane = g.out_plane();
    let mut row = 0;
    for c in 0..g.in_channels {
        let chan = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let srcrow = &col[row * plane..(row + 1) * plane];
                for oy in 0..g.out_height {
                    let Some(iy) = g.src(oy, ky, g.height) else {
                        continue;
                    };
                    let line = &srcrow[oy * g.out_width..(oy + 1) * g.out_width];
                    let dst = &mut chan[iy * g.width..(iy + 1) * g.width];
                    for (ox, &v) in line.iter().enumerate() {
                        if let Some(ix) = g.src(ox, kx, g.width) {
                            dst[ix] += v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

pub fn conv2d_forward<F: Real>(
    input: &Tensor<F>,
    weight: &Tensor<F>,
    bias: Option<&Tensor<F>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<F>> {
    let g = ConvGeometry::new(input, weight, bias, stride, padding)?;
    let in_plane = g.in_channels * g.height * g.width;
    let out_plane = g.out_plane();
    let k = g.patch_len();
    let mut out = vec![F::zero(); g.batch * g.out_channels * out_plane];
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![F::zero(); k * out_plane]
    };
    for b in 0..g.batch {
        let image = &input.data()[b * in_plane..(b + 1) * in_plane];
        let dst = &mut out[b * g.out_channels * out_plane..(b + 1) * g.out_channels * out_plane];
        if let Some(bias) = bias {
            for (oc, &bv) in bias.data().iter().enumerate() {
                dst[oc * out_plane..(oc + 1) * out_plane]
                    .iter_mut()
                    .for_each(|v| *v = bv);
            }
        }
        let cols: &[F] = if g.is_pointwise() {
            image
        } else {
            im2col(&g, image, &mut col);
            &col
        };
        F::gemm(
            g.out_channels,
            k,
            out_plane,
            F::one(),
            weight.data(),
            (k, 1),
            cols,
            (out_plane, 1),
            F::one(),
            dst,
            (out_plane, 1),
        );
    }
    Tensor::new(
        vec![g.batch, g.out_channels, g.out_height, g.out_width],
        out,
    )
}

pub struct ConvGrads<F> {
    pub input: Option<Tensor<F>>,
    pub weight: Option<Tensor<F>>,
    pub bias: Option<Tensor<F>>,
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<F: Real>(
    input: &Tensor<F>,
    weight: &Tensor<F>,
    with_bias: bool,
    stride: usize,
    padding: usize,
    grad_out: &Tensor<F>,
    need_input: bool,
    need_weight: bool,
) -> Result<ConvGrads<F>> {
    let g = ConvGeometry::new(input, weight, None, stride, padding)?;
    let in_plane = g.in_channels * g.height * g.width;
    let out_plane = g.out_plane();
    let k = g.patch_len();
    let go = grad_out.data();
    let mut gin = need_input.then(|| vec![F::zero(); input.numel()]);
    let mut gw = need_weight.then(|| vec![F::zero(); weight.numel()]);
    let mut gb = with_bias.then(|| vec![F::zero(); g.out_channels]);
    let mut col = vec![F::zero(); if g.is_pointwise() { 0 } else { k * out_plane }];
    let mut dcol = vec![F::zero(); if need_input { k * out_plane } else { 0 }];
    for b in 0..g.batch {
        let go_b = &go[b * g.out_channels * out_plane..(b + 1) * g.out_channels * out_plane];
        if let Some(gb) = gb.as_mut() {
            for (oc, acc) in gb.iter_mut().enumerate() {
                *acc += go_b[oc * out_plane..(oc + 1) * out_plane]
                    .iter()
                    .copied()
                    .sum();
            }
        }
        if let Some(gw) = gw.as_mut() {
            let image = &input.data()[b * in_plane..(b + 1) * in_plane];
            let cols: &[F] = if g.is_pointwise() {
                image
            } else {
                im2col(&g, image, &mut col);
                &col
            };
            // dW[oc, k] += dOut[oc, p] · col[k, p]^T
            F::gemm(
                g.out_channels,
                out_plane,
                k,
                F::one(),
                go_b,
                (out_plane, 1),
                cols,
                (1, out_plane),
                F::one(),
                gw,
                (k, 1),
            );
        }
        if let Some(gin) = gin.as_mut() {
            let dst = &mut gin[b * in_plane..(b + 1) * in_plane];
            // dcol[k, p] = W[oc, k]^T · dOut[oc, p]
            let target: &mut [F] = if g.is_pointwise() { dst } else { &mut dcol };
            F::gemm(
                k,
                g.out_channels,
                out_plane,
                F::one(),
                weight.data(),
                (1, k),
                go_b,
                (out_plane, 1),
                F::zero(),
                target,
                (out_plane, 1),
            );
            if !g.is_pointwise() {
                col2im(&g, &dcol, dst);
            }
        }
    }
    Ok(ConvGrads {
        input: gin
            .map(|d| Tensor::new(input.shape().to_vec(), d))
            .transpose()?,
        weight: gw
            .map(|d| Tensor::new(weight.shape().to_vec(), d))
            .transpose()?,
        bias: gb
            .map(|d| Tensor::new(vec![g.out_channels], d))
            .transpose()?,
    })
}
