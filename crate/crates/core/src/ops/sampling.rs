//! Average pooling over rectangular bins and bilinear resizing.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Row and column bins of an average pooling. Each output cell averages the
/// half-open input rectangle `rows[i] x cols[j]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolPlan {
    in_h: usize,
    in_w: usize,
    rows: Vec<(usize, usize)>,
    cols: Vec<(usize, usize)>,
}

impl PoolPlan {
    /// Fixed-window pooling without padding.
    pub fn fixed(in_h: usize, in_w: usize, kernel: usize, stride: usize) -> Result<Self> {
        if kernel == 0 || stride == 0 {
            return Err(Error::InvalidArgument("pool kernel and stride must be >= 1".into()));
        }
        if in_h < kernel || in_w < kernel {
            return Err(Error::shape(
                "avg_pool",
                format!("{in_h}x{in_w} input is smaller than a {kernel}x{kernel} window"),
            ));
        }
        let bins = |n: usize| {
            (0..(n - kernel) / stride + 1)
                .map(|i| (i * stride, i * stride + kernel))
                .collect()
        };
        Ok(PoolPlan {
            in_h,
            in_w,
            rows: bins(in_h),
            cols: bins(in_w),
        })
    }

    /// Adaptive pooling to an exact output size. Bin `i` covers
    /// `[floor(i*n/out), ceil((i+1)*n/out))`, so bins may overlap and an
    /// output larger than the input repeats cells.
    pub fn adaptive(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Result<Self> {
        if in_h == 0 || in_w == 0 || out_h == 0 || out_w == 0 {
            return Err(Error::InvalidArgument(format!(
                "adaptive pool {in_h}x{in_w} -> {out_h}x{out_w}"
            )));
        }
        let bins = |n: usize, out: usize| {
            (0..out)
                .map(|i| (i * n / out, ((i + 1) * n).div_ceil(out)))
                .collect()
        };
        Ok(PoolPlan {
            in_h,
            in_w,
            rows: bins(in_h, out_h),
            cols: bins(in_w, out_w),
        })
    }

    pub fn output_extent(&self) -> (usize, usize) {
        (self.rows.len(), self.cols.len())
    }

    fn check(&self, x: &[usize]) -> Result<(usize, usize)> {
        match *x {
            [b, c, h, w] if h == self.in_h && w == self.in_w => Ok((b, c)),
            _ => Err(Error::shape(
                "avg_pool",
                format!("plan built for {}x{}, input {x:?}", self.in_h, self.in_w),
            )),
        }
    }

    pub(crate) fn forward<T: Scalar>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (b, c) = self.check(x.shape())?;
        let (oh, ow) = self.output_extent();
        let src = x.data();
        let plane = self.in_h * self.in_w;
        Ok(Tensor::from_fn4([b, c, oh, ow], |bi, ci, i, j| {
            let base = (bi * c + ci) * plane;
            let (r0, r1) = self.rows[i];
            let (c0, c1) = self.cols[j];
            let mut acc = T::zero();
            for y in r0..r1 {
                for v in &src[base + y * self.in_w + c0..base + y * self.in_w + c1] {
                    acc = acc + *v;
                }
            }
            acc / T::of(((r1 - r0) * (c1 - c0)) as f64)
        }))
    }

    pub(crate) fn backward<T: Scalar>(&self, x_shape: &[usize], g: &Tensor<T>) -> Tensor<T> {
        let (b, c) = (x_shape[0], x_shape[1]);
        let (oh, ow) = self.output_extent();
        let plane = self.in_h * self.in_w;
        let mut dx = Tensor::zeros(x_shape);
        let dst = dx.data_mut();
        for bc in 0..b * c {
            for (i, &(r0, r1)) in self.rows.iter().enumerate() {
                for (j, &(c0, c1)) in self.cols.iter().enumerate() {
                    let share = g.data()[(bc * oh + i) * ow + j]
                        / T::of(((r1 - r0) * (c1 - c0)) as f64);
                    for y in r0..r1 {
                        for v in &mut dst[bc * plane + y * self.in_w + c0..bc * plane + y * self.in_w + c1] {
                            *v = *v + share;
                        }
                    }
                }
            }
        }
        dx
    }
}

/// Interpolation taps along one axis: `out[o] = (1-f)*in[lo] + f*in[hi]`.
#[derive(Clone, Debug, PartialEq)]
struct AxisTaps {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
}

impl AxisTaps {
    /// Half-pixel-centre sampling (`align_corners = false`).
    fn new(input: usize, output: usize) -> Self {
        let scale = input as f64 / output as f64;
        let mut taps = AxisTaps {
            lo: Vec::with_capacity(output),
            hi: Vec::with_capacity(output),
            frac: Vec::with_capacity(output),
        };
        for o in 0..output {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            taps.lo.push(lo);
            taps.hi.push(hi);
            taps.frac.push(if hi == lo { 0.0 } else { src - lo as f64 });
        }
        taps
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResizePlan {
    in_h: usize,
    in_w: usize,
    ys: AxisTaps,
    xs: AxisTaps,
}

impl ResizePlan {
    pub fn new(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Result<Self> {
        if in_h == 0 || in_w == 0 || out_h == 0 || out_w == 0 {
            return Err(Error::InvalidArgument(format!(
                "bilinear resize {in_h}x{in_w} -> {out_h}x{out_w}"
            )));
        }
        Ok(ResizePlan {
            in_h,
            in_w,
            ys: AxisTaps::new(in_h, out_h),
            xs: AxisTaps::new(in_w, out_w),
        })
    }

    fn out_extent(&self) -> (usize, usize) {
        (self.ys.lo.len(), self.xs.lo.len())
    }

    pub(crate) fn forward<T: Scalar>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let [b, c, h, w] = x.dims4()?;
        if (h, w) != (self.in_h, self.in_w) {
            return Err(Error::shape(
                "bilinear_resize",
                format!("plan built for {}x{}, input {h}x{w}", self.in_h, self.in_w),
            ));
        }
        let (oh, ow) = self.out_extent();
        let src = x.data();
        let fx: Vec<T> = self.xs.frac.iter().map(|&f| T::of(f)).collect();
        let mut out = Vec::with_capacity(b * c * oh * ow);
        for bc in 0..b * c {
            let base = bc * h * w;
            for oy in 0..oh {
                let fy = T::of(self.ys.frac[oy]);
                let r0 = &src[base + self.ys.lo[oy] * w..base + (self.ys.lo[oy] + 1) * w];
                let r1 = &src[base + self.ys.hi[oy] * w..base + (self.ys.hi[oy] + 1) * w];
                for ox in 0..ow {
                    let (l, r, f) = (self.xs.lo[ox], self.xs.hi[ox], fx[ox]);
                    let top = r0[l] + (r0[r] - r0[l]) * f;
                    let bot = r1[l] + (r1[r] - r1[l]) * f;
                    out.push(top + (bot - top) * fy);
                }
            }
        }
        Tensor::new(&[b, c, oh, ow], out)
    }

    pub(crate) fn backward<T: Scalar>(&self, x_shape: &[usize], g: &Tensor<T>) -> Tensor<T> {
        let (oh, ow) = self.out_extent();
        let (h, w) = (self.in_h, self.in_w);
        let bc_count = x_shape[0] * x_shape[1];
        let mut dx = Tensor::zeros(x_shape);
        let dst = dx.data_mut();
        let gd = g.data();
        for bc in 0..bc_count {
            let base = bc * h * w;
            for oy in 0..oh {
                let fy = T::of(self.ys.frac[oy]);
                let (y0, y1) = (self.ys.lo[oy], self.ys.hi[oy]);
                for ox in 0..ow {
                    let gv = gd[(bc * oh + oy) * ow + ox];
                    let fx = T::of(self.xs.frac[ox]);
                    let (x0, x1) = (self.xs.lo[ox], self.xs.hi[ox]);
                    let one = T::one();
                    let top = gv * (one - fy);
                    let bot = gv * fy;
                    dst[base + y0 * w + x0] = dst[base + y0 * w + x0] + top * (one - fx);
                    dst[base + y0 * w + x1] = dst[base + y0 * w + x1] + top * fx;
                    dst[base + y1 * w + x0] = dst[base + y1 * w + x0] + bot * (one - fx);
                    dst[base + y1 * w + x1] = dst[base + y1 * w + x1] + bot * fx;
                }
            }
        }
        dx
    }
}
