//! 2-D convolution through im2col and a strided GEMM.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConvParams {
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl ConvParams {
    pub const fn new(stride: usize, pad: usize, dilation: usize) -> Self {
        ConvParams {
            stride,
            pad,
            dilation,
        }
    }

    /// Stride 1 with the padding that preserves spatial extents for an odd
    /// kernel at the given dilation.
    pub const fn same(kernel: usize, dilation: usize) -> Self {
        ConvParams {
            stride: 1,
            pad: dilation * (kernel - 1) / 2,
            dilation,
        }
    }

    /// Output extent along one axis, or `None` when it would be non-positive.
    pub fn output_extent(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.pad;
        if padded < span {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }
}

impl Default for ConvParams {
    fn default() -> Self {
        ConvParams::new(1, 0, 1)
    }
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    batch: usize,
    in_c: usize,
    in_h: usize,
    in_w: usize,
    out_c: usize,
    kh: usize,
    kw: usize,
    out_h: usize,
    out_w: usize,
    p: ConvParams,
}

impl Geometry {
    fn new(x: &[usize], w: &[usize], p: ConvParams) -> Result<Self> {
        if p.stride == 0 || p.dilation == 0 {
            return Err(Error::InvalidArgument(format!(
                "conv2d stride and dilation must be >= 1, got {p:?}"
            )));
        }
        let (&[batch, in_c, in_h, in_w], &[out_c, wc, kh, kw]) = (x, w) else {
            return Err(Error::shape(
                "conv2d",
                format!("expected rank-4 input and weight, got {x:?} and {w:?}"),
            ));
        };
        if kh == 0 || kw == 0 {
            return Err(Error::shape("conv2d", "empty kernel"));
        }
        if wc != in_c {
            return Err(Error::shape(
                "conv2d",
                format!("input has {in_c} channels, weight expects {wc}"),
            ));
        }
        let (Some(out_h), Some(out_w)) = (p.output_extent(in_h, kh), p.output_extent(in_w, kw))
        else {
            return Err(Error::shape(
                "conv2d",
                format!("non-positive output extent for input {x:?}, kernel {kh}x{kw}, {p:?}"),
            ));
        };
        Ok(Geometry {
            batch,
            in_c,
            in_h,
            in_w,
            out_c,
            kh,
            kw,
            out_h,
            out_w,
            p,
        })
    }

    fn patch(&self) -> usize {
        self.in_c * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_image(&self) -> usize {
        self.in_c * self.in_h * self.in_w
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.p.stride == 1 && self.p.pad == 0
    }

    /// Input coordinate hit by output coordinate `o` at kernel tap `k`.
    #[inline]
    fn source(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.p.stride + k * self.p.dilation) as isize - self.p.pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }

    fn im2col<T: Scalar>(&self, img: &[T], cols: &mut [T]) {
        let plane = self.out_plane();
        let mut row = 0;
        for c in 0..self.in_c {
            let chan = &img[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let dst = &mut cols[row * plane..(row + 1) * plane];
                    for oy in 0..self.out_h {
                        let line = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        match self.source(oy, i, self.in_h) {
                            None => line.fill(T::zero()),
                            Some(iy) => {
                                let src = &chan[iy * self.in_w..(iy + 1) * self.in_w];
                                for (ox, v) in line.iter_mut().enumerate() {
                                    *v = match self.source(ox, j, self.in_w) {
                                        Some(ix) => src[ix],
                                        None => T::zero(),
                                    };
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, cols: &[T], img: &mut [T]) {
        let plane = self.out_plane();
        let mut row = 0;
        for c in 0..self.in_c {
            let chan = &mut img[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let src = &cols[row * plane..(row + 1) * plane];
                    for oy in 0..self.out_h {
                        let Some(iy) = self.source(oy, i, self.in_h) else {
                            continue;
                        };
                        let dst = &mut chan[iy * self.in_w..(iy + 1) * self.in_w];
                        for ox in 0..self.out_w {
                            if let Some(ix) = self.source(ox, j, self.in_w) {
                                dst[ix] = dst[ix] + src[oy * self.out_w + ox];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Shape-checks a convolution and returns its output shape.
pub fn conv2d_output_shape(x: &[usize], w: &[usize], p: ConvParams) -> Result<[usize; 4]> {
    let g = Geometry::new(x, w, p)?;
    Ok([g.batch, g.out_c, g.out_h, g.out_w])
}

pub(crate) fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    p: ConvParams,
) -> Result<Tensor<T>> {
    let g = Geometry::new(x.shape(), w.shape(), p)?;
    if let Some(b) = bias {
        if b.shape() != [g.out_c] {
            return Err(Error::shape(
                "conv2d",
                format!("bias shape {:?}, expected [{}]", b.shape(), g.out_c),
            ));
        }
    }
    let plane = g.out_plane();
    let patch = g.patch();
    let mut out = Tensor::zeros(&[g.batch, g.out_c, g.out_h, g.out_w]);
    out.data_mut()
        .par_chunks_mut(g.out_c * plane)
        .zip(x.data().par_chunks(g.in_image()))
        .for_each(|(dst, img)| {
            let owned;
            let cols: &[T] = if g.is_pointwise() {
                img
            } else {
                let mut buf = vec![T::zero(); patch * plane];
                g.im2col(img, &mut buf);
                owned = buf;
                &owned
            };
            T::gemm(
                g.out_c,
                patch,
                plane,
                T::one(),
                (w.data(), patch as isize, 1),
                (cols, plane as isize, 1),
                T::zero(),
                (dst, plane as isize, 1),
            );
            if let Some(b) = bias {
                for (k, chunk) in dst.chunks_mut(plane).enumerate() {
                    let bk = b.data()[k];
                    chunk.iter_mut().for_each(|v| *v = *v + bk);
                }
            }
        });
    Ok(out)
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_out: &Tensor<T>,
    p: ConvParams,
    need: [bool; 3],
) -> Result<ConvGrads<T>> {
    let g = Geometry::new(x.shape(), w.shape(), p)?;
    let plane = g.out_plane();
    let patch = g.patch();
    let [need_x, need_w, need_b] = need;

    // One (dx, dw) pair per batch item; dw partials are summed in batch
    // order afterwards so the result does not depend on scheduling.
    let per_item: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = grad_out
        .data()
        .par_chunks(g.out_c * plane)
        .zip(x.data().par_chunks(g.in_image()))
        .map(|(gout, img)| {
            let dw = need_w.then(|| {
                let owned;
                let cols: &[T] = if g.is_pointwise() {
                    img
                } else {
                    let mut buf = vec![T::zero(); patch * plane];
                    g.im2col(img, &mut buf);
                    owned = buf;
                    &owned
                };
                let mut dw = vec![T::zero(); g.out_c * patch];
                T::gemm(
                    g.out_c,
                    plane,
                    patch,
                    T::one(),
                    (gout, plane as isize, 1),
                    (cols, 1, plane as isize),
                    T::zero(),
                    (&mut dw, patch as isize, 1),
                );
                dw
            });
            let dx = need_x.then(|| {
                let mut dimg = vec![T::zero(); g.in_image()];
                if g.is_pointwise() {
                    T::gemm(
                        patch,
                        g.out_c,
                        plane,
                        T::one(),
                        (w.data(), 1, patch as isize),
                        (gout, plane as isize, 1),
                        T::zero(),
                        (&mut dimg, plane as isize, 1),
                    );
                } else {
                    let mut dcols = vec![T::zero(); patch * plane];
                    T::gemm(
                        patch,
                        g.out_c,
                        plane,
                        T::one(),
                        (w.data(), 1, patch as isize),
                        (gout, plane as isize, 1),
                        T::zero(),
                        (&mut dcols, plane as isize, 1),
                    );
                    g.col2im(&dcols, &mut dimg);
                }
                dimg
            });
            (dx, dw)
        })
        .collect();

    let mut input = need_x.then(|| Vec::with_capacity(x.len()));
    let mut weight = need_w.then(|| vec![T::zero(); w.len()]);
    for (dx, dw) in per_item {
        if let (Some(acc), Some(dx)) = (input.as_mut(), dx) {
            acc.extend(dx);
        }
        if let (Some(acc), Some(dw)) = (weight.as_mut(), dw) {
            for (a, v) in acc.iter_mut().zip(dw) {
                *a = *a + v;
            }
        }
    }
    let bias = need_b.then(|| {
        let mut db = vec![T::zero(); g.out_c];
        for item in grad_out.data().chunks(g.out_c * plane) {
            for (k, chunk) in item.chunks(plane).enumerate() {
                db[k] = db[k] + chunk.iter().copied().sum::<T>();
            }
        }
        db
    });
    Ok(ConvGrads {
        input: input.map(|d| Tensor::new(x.shape(), d)).transpose()?,
        weight: weight.map(|d| Tensor::new(w.shape(), d)).transpose()?,
        bias: bias.map(|d| Tensor::new(&[g.out_c], d)).transpose()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct seven-loop convolution used as the oracle.
    fn naive(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], p: ConvParams) -> Tensor<f64> {
        let [n, c, h, wd] = x.dims4().unwrap();
        let [k, _, kh, kw] = w.dims4().unwrap();
        let oh = p.output_extent(h, kh).unwrap();
        let ow = p.output_extent(wd, kw).unwrap();
        Tensor::from_fn4([n, k, oh, ow], |bi, ki, oy, ox| {
            let mut acc = b[ki];
            for ci in 0..c {
                for i in 0..kh {
                    for j in 0..kw {
                        let iy = (oy * p.stride + i * p.dilation) as isize - p.pad as isize;
                        let ix = (ox * p.stride + j * p.dilation) as isize - p.pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                            acc += x.at4(bi, ci, iy as usize, ix as usize) * w.at4(ki, ci, i, j);
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn ones_kernel_counts_neighbours() {
        let x = Tensor::<f64>::ones(&[1, 1, 3, 3]);
        let w = Tensor::<f64>::ones(&[1, 1, 3, 3]);
        let y = conv2d_forward(&x, &w, None, ConvParams::new(1, 1, 1)).unwrap();
        assert_eq!(y.at4(0, 0, 1, 1), 9.0);
        assert_eq!(y.at4(0, 0, 0, 0), 4.0);
        assert_eq!(y.at4(0, 0, 2, 2), 4.0);
        assert_eq!(y.at4(0, 0, 0, 1), 6.0);
    }

    #[test]
    fn dilated_kernel_samples_corners_and_centre() {
        let x = Tensor::<f64>::from_fn(&[1, 1, 5, 5], |i| i as f64);
        let w = Tensor::<f64>::from_fn(&[1, 1, 3, 3], |i| if i % 2 == 0 { 1.0 } else { 0.0 });
        let y = conv2d_forward(&x, &w, None, ConvParams::new(1, 0, 2)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        // corners 0, 4, 20, 24 and centre 12
        assert_eq!(y.item(), 0.0 + 4.0 + 20.0 + 24.0 + 12.0);
    }

    #[test]
    fn one_by_one_identity() {
        let x = Tensor::<f32>::from_fn(&[2, 1, 3, 4], |i| i as f32 * 0.5 - 2.0);
        let w = Tensor::<f32>::ones(&[1, 1, 1, 1]);
        let b = Tensor::<f32>::zeros(&[1]);
        let y = conv2d_forward(&x, &w, Some(&b), ConvParams::default()).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn matches_naive_loops() {
        let cases = [
            ([2, 3, 7, 6], [4, 3, 3, 3], ConvParams::new(1, 1, 1)),
            ([1, 2, 8, 9], [3, 2, 3, 3], ConvParams::new(2, 1, 1)),
            ([1, 2, 9, 9], [2, 2, 3, 3], ConvParams::new(1, 2, 2)),
            ([1, 3, 5, 7], [2, 3, 1, 1], ConvParams::new(1, 0, 1)),
            ([1, 1, 6, 6], [1, 1, 5, 3], ConvParams::new(1, 2, 1)),
        ];
        for (xs, ws, p) in cases {
            let x = Tensor::<f64>::from_fn(&xs, |i| ((i * 37 % 11) as f64 - 5.0) / 3.0);
            let w = Tensor::<f64>::from_fn(&ws, |i| ((i * 13 % 7) as f64 - 3.0) / 4.0);
            let b: Vec<f64> = (0..ws[0]).map(|k| k as f64 * 0.1).collect();
            let bt = Tensor::new(&[ws[0]], b.clone()).unwrap();
            let got = conv2d_forward(&x, &w, Some(&bt), p).unwrap();
            let want = naive(&x, &w, &b, p);
            assert_eq!(got.shape(), want.shape());
            assert!(got.max_abs_diff(&want).unwrap() < 1e-12, "{xs:?} {ws:?} {p:?}");
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        let x = Tensor::<f32>::zeros(&[1, 2, 4, 4]);
        let w = Tensor::<f32>::zeros(&[1, 3, 3, 3]);
        assert!(conv2d_forward(&x, &w, None, ConvParams::default()).is_err());
        let w = Tensor::<f32>::zeros(&[1, 2, 5, 5]);
        assert!(conv2d_forward(&x, &w, None, ConvParams::default()).is_err());
        let w = Tensor::<f32>::zeros(&[1, 2, 3, 3]);
        assert!(conv2d_forward(&x, &w, None, ConvParams::new(0, 0, 1)).is_err());
    }
}
