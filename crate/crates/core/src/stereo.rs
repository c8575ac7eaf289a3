//! Stereo-specific differentiable operators.
//!
//! Convention: the left image is the reference and a left pixel at column
//! `x` with disparity `d` corresponds to column `x - d` in the right image.

use crate::error::{Error, Result};
use crate::graph::{Graph, Op, Var};
use crate::tensor::{Scalar, Tensor};

fn check_pair(op: &'static str, a: &[usize], b: &[usize]) -> Result<[usize; 4]> {
    match *a {
        [n, c, h, w] if a == b => Ok([n, c, h, w]),
        _ => Err(Error::shape(op, format!("{a:?} vs {b:?}"))),
    }
}

pub(crate) fn correlation_forward<T: Scalar>(
    fl: &Tensor<T>,
    fr: &Tensor<T>,
    max_disp: usize,
) -> Result<Tensor<T>> {
    let [b, c, h, w] = check_pair("correlation1d", fl.shape(), fr.shape())?;
    if max_disp >= w {
        return Err(Error::InvalidArgument(format!(
            "correlation max_disp {max_disp} must be below the feature width {w}"
        )));
    }
    let norm = T::one() / T::of(c as f64);
    let (l, r) = (fl.data(), fr.data());
    let plane = h * w;
    let mut out = Tensor::zeros(&[b, max_disp + 1, h, w]);
    let dst = out.data_mut();
    for bi in 0..b {
        for d in 0..=max_disp {
            let o = &mut dst[(bi * (max_disp + 1) + d) * plane..][..plane];
            for ci in 0..c {
                let base = (bi * c + ci) * plane;
                for y in 0..h {
                    let lrow = &l[base + y * w..base + (y + 1) * w];
                    let rrow = &r[base + y * w..base + (y + 1) * w];
                    let orow = &mut o[y * w..(y + 1) * w];
                    for x in d..w {
                        orow[x] = orow[x] + lrow[x] * rrow[x - d];
                    }
                }
            }
            o.iter_mut().for_each(|v| *v = *v * norm);
        }
    }
    Ok(out)
}

pub(crate) fn correlation_backward<T: Scalar>(
    fl: &Tensor<T>,
    fr: &Tensor<T>,
    g: &Tensor<T>,
    max_disp: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let [b, c, h, w] = fl.dims4()?;
    let norm = T::one() / T::of(c as f64);
    let plane = h * w;
    let mut dl = Tensor::zeros(fl.shape());
    let mut dr = Tensor::zeros(fr.shape());
    let (l, r, gd) = (fl.data(), fr.data(), g.data());
    for bi in 0..b {
        for d in 0..=max_disp {
            let gp = &gd[(bi * (max_disp + 1) + d) * plane..][..plane];
            for ci in 0..c {
                let base = (bi * c + ci) * plane;
                for y in 0..h {
                    let row = base + y * w;
                    for x in d..w {
                        let gv = gp[y * w + x] * norm;
                        dl.data_mut()[row + x] = dl.data()[row + x] + gv * r[row + x - d];
                        dr.data_mut()[row + x - d] = dr.data()[row + x - d] + gv * l[row + x];
                    }
                }
            }
        }
    }
    Ok((dl, dr))
}

/// Left/right taps and interpolation weight of a clamped horizontal sample.
/// `inside` is false when the coordinate was clamped to the border, where
/// the sample does not depend on the coordinate.
#[inline]
fn horizontal_tap<T: Scalar>(xs: T, w: usize) -> (usize, usize, T, bool) {
    let max = T::of((w - 1) as f64);
    let inside = xs > T::zero() && xs < max;
    let xc = xs.max(T::zero()).min(max);
    let lo = xc.floor().to_usize().unwrap_or(0).min(w - 1);
    let hi = (lo + 1).min(w - 1);
    let frac = xc - T::of(lo as f64);
    (lo, hi, frac, inside)
}

pub(crate) fn warp_forward<T: Scalar>(right: &Tensor<T>, disp: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, c, h, w] = right.dims4()?;
    if disp.shape() != [b, 1, h, w] {
        return Err(Error::shape(
            "warp_right_to_left",
            format!("image {:?}, disparity {:?}", right.shape(), disp.shape()),
        ));
    }
    let plane = h * w;
    let src = right.data();
    let mut out = Vec::with_capacity(right.len());
    for bi in 0..b {
        let dplane = &disp.data()[bi * plane..(bi + 1) * plane];
        for ci in 0..c {
            let base = (bi * c + ci) * plane;
            for y in 0..h {
                let row = &src[base + y * w..base + (y + 1) * w];
                for x in 0..w {
                    let xs = T::of(x as f64) - dplane[y * w + x];
                    let (lo, hi, f, _) = horizontal_tap(xs, w);
                    out.push(row[lo] + (row[hi] - row[lo]) * f);
                }
            }
        }
    }
    Tensor::new(right.shape(), out)
}

pub(crate) fn warp_backward<T: Scalar>(
    right: &Tensor<T>,
    disp: &Tensor<T>,
    g: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let [b, c, h, w] = right.dims4()?;
    let plane = h * w;
    let src = right.data();
    let mut dright = Tensor::zeros(right.shape());
    let mut ddisp = Tensor::zeros(disp.shape());
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * plane;
            for y in 0..h {
                for x in 0..w {
                    let di = bi * plane + y * w + x;
                    let gv = g.data()[base + y * w + x];
                    let xs = T::of(x as f64) - disp.data()[di];
                    let (lo, hi, f, inside) = horizontal_tap(xs, w);
                    let row = base + y * w;
                    let dr = dright.data_mut();
                    dr[row + lo] = dr[row + lo] + gv * (T::one() - f);
                    dr[row + hi] = dr[row + hi] + gv * f;
                    if inside {
                        // d out / d xs = right[hi] - right[lo]; xs = x - d
                        let dd = ddisp.data_mut();
                        dd[di] = dd[di] - gv * (src[row + hi] - src[row + lo]);
                    }
                }
            }
        }
    }
    Ok((dright, ddisp))
}

fn last_two(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape.len() {
        0 | 1 => Err(Error::shape(
            "spatial_gradients",
            format!("need at least two axes, got {shape:?}"),
        )),
        n => {
            let (h, w) = (shape[n - 2], shape[n - 1]);
            if h == 0 || w == 0 {
                return Err(Error::shape("spatial_gradients", "empty spatial extent"));
            }
            Ok((shape[..n - 2].iter().product(), h, w))
        }
    }
}

pub(crate) fn diff_x<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (planes, h, w) = last_two(x.shape())?;
    let s = x.data();
    let mut out = Tensor::zeros(x.shape());
    let d = out.data_mut();
    for row in 0..planes * h {
        for i in 0..w - 1 {
            d[row * w + i] = s[row * w + i + 1] - s[row * w + i];
        }
    }
    Ok(out)
}

pub(crate) fn diff_x_adjoint<T: Scalar>(g: &Tensor<T>) -> Result<Tensor<T>> {
    let (planes, h, w) = last_two(g.shape())?;
    let s = g.data();
    let mut out = Tensor::zeros(g.shape());
    let d = out.data_mut();
    for row in 0..planes * h {
        for i in 0..w - 1 {
            let gv = s[row * w + i];
            d[row * w + i + 1] = d[row * w + i + 1] + gv;
            d[row * w + i] = d[row * w + i] - gv;
        }
    }
    Ok(out)
}

pub(crate) fn diff_y<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (planes, h, w) = last_two(x.shape())?;
    let s = x.data();
    let mut out = Tensor::zeros(x.shape());
    let d = out.data_mut();
    for p in 0..planes {
        for y in 0..h - 1 {
            for i in 0..w {
                let at = (p * h + y) * w + i;
                d[at] = s[at + w] - s[at];
            }
        }
    }
    Ok(out)
}

pub(crate) fn diff_y_adjoint<T: Scalar>(g: &Tensor<T>) -> Result<Tensor<T>> {
    let (planes, h, w) = last_two(g.shape())?;
    let s = g.data();
    let mut out = Tensor::zeros(g.shape());
    let d = out.data_mut();
    for p in 0..planes {
        for y in 0..h - 1 {
            for i in 0..w {
                let at = (p * h + y) * w + i;
                d[at + w] = d[at + w] + s[at];
                d[at] = d[at] - s[at];
            }
        }
    }
    Ok(out)
}

impl<T: Scalar> Graph<T> {
    /// 1-D horizontal correlation with a single-pixel patch, normalized by
    /// the channel count. Output channel `d` holds the score at
    /// displacement `d`; out-of-range displacements are zero.
    pub fn correlation1d(&mut self, fl: Var, fr: Var, max_disp: usize) -> Result<Var> {
        let value = correlation_forward(self.value(fl), self.value(fr), max_disp)?;
        self.push(Op::Correlation(max_disp), vec![fl, fr], value)
    }

    /// Synthesizes the left view by sampling `right` at `x - disp`, with
    /// linear interpolation and clamp-to-edge borders.
    pub fn warp_right_to_left(&mut self, right: Var, disp: Var) -> Result<Var> {
        let value = warp_forward(self.value(right), self.value(disp))?;
        self.push(Op::Warp, vec![right, disp], value)
    }

    /// Per-element photometric error `|left - synthesized|`.
    pub fn error_map(&mut self, left: Var, synthesized: Var) -> Result<Var> {
        if self.shape(left) != self.shape(synthesized) {
            return Err(Error::shape(
                "error_map",
                format!("{:?} vs {:?}", self.shape(left), self.shape(synthesized)),
            ));
        }
        let diff = self.sub(left, synthesized)?;
        self.abs(diff)
    }

    /// Resizes a disparity map to `h x w` and scales its values by the
    /// horizontal size ratio so they stay in pixels of the new grid.
    pub fn upsample_disparity(&mut self, coarse: Var, h: usize, w: usize) -> Result<Var> {
        let [_, c, _, cw] = self.value(coarse).dims4()?;
        if c != 1 {
            return Err(Error::shape("upsample_disparity", "disparity must have one channel"));
        }
        let resized = self.bilinear_resize(coarse, h, w)?;
        self.scale(resized, w as f64 / cw as f64)
    }

    /// `max(2 * u(coarse) + residual, 0)` where `u` doubles spatial extents.
    pub fn compose_disparity(&mut self, coarse: Var, residual: Var) -> Result<Var> {
        let [cb, _, ch, cw] = self.value(coarse).dims4()?;
        let [rb, rc, rh, rw] = self.value(residual).dims4()?;
        if (rb, rc, rh, rw) != (cb, 1, 2 * ch, 2 * cw) {
            return Err(Error::shape(
                "compose_disparity",
                format!(
                    "residual {:?} must be exactly twice coarse {:?}",
                    self.shape(residual),
                    self.shape(coarse)
                ),
            ));
        }
        let up = self.upsample_disparity(coarse, rh, rw)?;
        self.refine_disparity(up, residual)
    }

    /// `max(upsampled + residual, 0)`.
    pub fn refine_disparity(&mut self, upsampled: Var, residual: Var) -> Result<Var> {
        let sum = self.add(upsampled, residual)?;
        self.relu(sum)
    }

    /// Forward differences along width and height; the last column (row)
    /// of the respective result is zero.
    pub fn spatial_gradients(&mut self, x: Var) -> Result<(Var, Var)> {
        let gx = diff_x(self.value(x))?;
        let gy = diff_y(self.value(x))?;
        let gx = self.push(Op::DiffX, vec![x], gx)?;
        let gy = self.push(Op::DiffY, vec![x], gy)?;
        Ok((gx, gy))
    }
}

/// Forward differences of a plain tensor, for callers that do not need a
/// graph.
pub fn spatial_gradients_of<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    Ok((diff_x(x)?, diff_y(x)?))
}
