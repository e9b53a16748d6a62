//! Horizontal epipolar shifts with bilinear taps and zero fill.
//!
//! A shift by `d` in direction `LtoR` reads the source at `x + d`; `RtoL`
//! reads at `x - d`. Because every channel moves by a constant amount, the
//! sampler reduces to two taps per pixel with weights shared across a row.

use std::fmt;

use gradcore::{CustomOp, Real, Tape, Tensor, TensorError, Var};

use crate::error::{invalid, Result};
use crate::quantize::DisparityLevels;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum WarpDirection {
    /// Left-view content into the right camera: sample at `x + d`.
    LtoR,
    /// Right-view content into the left camera: sample at `x - d`.
    RtoL,
}

impl WarpDirection {
    pub fn sign(self) -> f64 {
        match self {
            WarpDirection::LtoR => 1.0,
            WarpDirection::RtoL => -1.0,
        }
    }

    pub fn reverse(self) -> Self {
        match self {
            WarpDirection::LtoR => WarpDirection::RtoL,
            WarpDirection::RtoL => WarpDirection::LtoR,
        }
    }
}

impl fmt::Display for WarpDirection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WarpDirection::LtoR => "L->R",
            WarpDirection::RtoL => "R->L",
        })
    }
}

/// Integer offset and fractional weight of a signed shift.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Taps<F> {
    offset: isize,
    frac: F,
}

impl<F: Real> Taps<F> {
    pub(crate) fn new(shift: f64) -> Self {
        let o = shift.floor();
        Self {
            offset: o as isize,
            frac: F::from_f64_lossy(shift - o),
        }
    }

    /// `dst[x] = (1-f)·src[x+o] + f·src[x+o+1]`, zero outside.
    #[inline]
    pub(crate) fn apply(&self, src: &[F], dst: &mut [F]) {
        dst.iter_mut().for_each(|v| *v = F::zero());
        self.accumulate(src, dst, F::one());
    }

    /// `dst[x] += scale·shift(src)[x]`.
    #[inline]
    pub(crate) fn accumulate(&self, src: &[F], dst: &mut [F], scale: F) {
        let w = src.len() as isize;
        let w0 = scale * (F::one() - self.frac);
        add_shifted(src, dst, self.offset, w0, w);
        if self.frac != F::zero() {
            add_shifted(src, dst, self.offset + 1, scale * self.frac, w);
        }
    }

    /// Adjoint of [`Taps::accumulate`]: scatter `g` back onto the source row.
    #[inline]
    pub(crate) fn accumulate_adjoint(&self, g: &[F], src_grad: &mut [F]) {
        let w = g.len() as isize;
        add_shifted(g, src_grad, -self.offset, F::one() - self.frac, w);
        if self.frac != F::zero() {
            add_shifted(g, src_grad, -(self.offset + 1), self.frac, w);
        }
    }
}

/// `dst[x] += weight·src[x + o]` for every `x` with `x + o` in range.
#[inline]
fn add_shifted<F: Real>(src: &[F], dst: &mut [F], o: isize, weight: F, w: isize) {
    let lo = (-o).clamp(0, w);
    let hi = (w - o).clamp(0, w);
    if lo >= hi {
        return;
    }
    let (lo, hi) = (lo as usize, hi as usize);
    let start = (lo as isize + o) as usize;
    for (d, &s) in dst[lo..hi].iter_mut().zip(&src[start..start + (hi - lo)]) {
        *d += weight * s;
    }
}

fn check_shift(op: &'static str, d: f64) -> Result<()> {
    if !d.is_finite() {
        return Err(invalid(op, format!("shift must be finite, got {d}")));
    }
    if d < 0.0 {
        return Err(invalid(op, format!("shift must be >= 0, got {d}")));
    }
    Ok(())
}

/// Shift channel `c` of `x` by `shifts[c]` (signed, in pixels).
fn shift_channels<F: Real>(x: &Tensor<F>, shifts: &[f64]) -> Result<Tensor<F>> {
    let [b, c, h, w] = x.dims4()?;
    debug_assert_eq!(shifts.len(), c);
    let mut out = Tensor::zeros(x.shape().to_vec());
    let src = x.data();
    let dst = out.data_mut();
    for (ci, &s) in shifts.iter().enumerate() {
        let taps = Taps::<F>::new(s);
        for bi in 0..b {
            let base = (bi * c + ci) * h * w;
            for y in 0..h {
                let r = base + y * w;
                taps.apply(&src[r..r + w], &mut dst[r..r + w]);
            }
        }
    }
    Ok(out)
}

fn shift_channels_adjoint<F: Real>(g: &Tensor<F>, shifts: &[f64]) -> Result<Tensor<F>> {
    let [b, c, h, w] = g.dims4()?;
    let mut out = Tensor::zeros(g.shape().to_vec());
    let src = g.data();
    let dst = out.data_mut();
    for (ci, &s) in shifts.iter().enumerate() {
        let taps = Taps::<F>::new(s);
        for bi in 0..b {
            let base = (bi * c + ci) * h * w;
            for y in 0..h {
                let r = base + y * w;
                taps.accumulate_adjoint(&src[r..r + w], &mut dst[r..r + w]);
            }
        }
    }
    Ok(out)
}

struct ShiftOp {
    shifts: Vec<f64>,
}

impl<F: Real> CustomOp<F> for ShiftOp {
    fn name(&self) -> &'static str {
        "shift"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<F>],
        _output: &Tensor<F>,
        grad_output: &Tensor<F>,
    ) -> gradcore::Result<Vec<Option<Tensor<F>>>> {
        let g = shift_channels_adjoint(grad_output, &self.shifts).map_err(|e| {
            TensorError::InvalidArgument {
                op: "shift backward",
                msg: e.to_string(),
            }
        })?;
        Ok(vec![Some(g)])
    }
}

/// Every channel of `x` shifted by the same disparity `d`.
pub fn shift_sample<F: Real>(x: &Tensor<F>, d: f64, dir: WarpDirection) -> Result<Tensor<F>> {
    check_shift("shift_sample", d)?;
    let c = x.dims4()?[1];
    shift_channels(x, &vec![dir.sign() * d; c])
}

/// Differentiable [`shift_sample`]; gradients flow to `x` only.
pub fn shift_sample_on<F: Real>(
    tape: &mut Tape<F>,
    x: Var,
    d: f64,
    dir: WarpDirection,
) -> Result<Var> {
    check_shift("shift_sample", d)?;
    let c = tape.value(x).dims4()?[1];
    let shifts = vec![dir.sign() * d; c];
    let value = shift_channels(tape.value(x), &shifts)?;
    Ok(tape.custom(&[x], value, Box::new(ShiftOp { shifts })))
}

fn level_shifts(
    op: &'static str,
    channels: usize,
    levels: &DisparityLevels,
    dir: WarpDirection,
) -> Result<Vec<f64>> {
    if channels != levels.len() {
        return Err(invalid(
            op,
            format!(
                "volume has {channels} channels but there are {} levels",
                levels.len()
            ),
        ));
    }
    for &d in levels.values() {
        check_shift(op, d)?;
    }
    Ok(levels.values().iter().map(|&d| dir.sign() * d).collect())
}

/// Channel `n` of `v` shifted by level `d_n`.
pub fn warp_volume<F: Real>(
    v: &Tensor<F>,
    levels: &DisparityLevels,
    dir: WarpDirection,
) -> Result<Tensor<F>> {
    let shifts = level_shifts("warp_volume", v.dims4()?[1], levels, dir)?;
    shift_channels(v, &shifts)
}

/// Differentiable [`warp_volume`].
pub fn warp_volume_on<F: Real>(
    tape: &mut Tape<F>,
    v: Var,
    levels: &DisparityLevels,
    dir: WarpDirection,
) -> Result<Var> {
    let shifts = level_shifts("warp_volume", tape.value(v).dims4()?[1], levels, dir)?;
    let value = shift_channels(tape.value(v), &shifts)?;
    Ok(tape.custom(&[v], value, Box::new(ShiftOp { shifts })))
}
