//! im2col-based 2-D convolution kernels (NCHW).

use crate::scalar::Scalar;
use crate::tensor::{gemm, MatRef};

/// Geometry relating an image plane to its column grid.
///
/// A forward convolution reads an image of `channels x height x width` and
/// produces one column per output location on an `out_h x out_w` grid.
/// Transposed convolution reuses the same geometry with the roles of input
/// and output swapped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// Geometry of a forward convolution; `None` if the kernel does not fit.
    pub fn forward(
        channels: usize,
        height: usize,
        width: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        if stride == 0 || height + 2 * pad < kh || width + 2 * pad < kw {
            return None;
        }
        Some(ConvGeom {
            channels,
            height,
            width,
            kh,
            kw,
            stride,
            pad,
            out_h: (height + 2 * pad - kh) / stride + 1,
            out_w: (width + 2 * pad - kw) / stride + 1,
        })
    }

    /// Geometry whose image is the output of a transposed convolution over
    /// an `in_h x in_w` grid.
    pub fn transposed(
        channels: usize,
        in_h: usize,
        in_w: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        if stride == 0 || in_h == 0 || in_w == 0 {
            return None;
        }
        let full_h = (in_h - 1) * stride + kh;
        let full_w = (in_w - 1) * stride + kw;
        if full_h <= 2 * pad || full_w <= 2 * pad {
            return None;
        }
        Some(ConvGeom {
            channels,
            height: full_h - 2 * pad,
            width: full_w - 2 * pad,
            kh,
            kw,
            stride,
            pad,
            out_h: in_h,
            out_w: in_w,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn col_len(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    #[inline]
    fn source(&self, o: usize, k: usize, limit: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < limit).then_some(pos as usize)
    }
}

pub fn im2col<T: Scalar>(img: &[T], g: &ConvGeom, cols: &mut [T]) {
    let ncol = g.col_len();
    for c in 0..g.channels {
        let plane = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ncol..(row + 1) * ncol];
                for oy in 0..g.out_h {
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    match g.source(oy, ki, g.height) {
                        None => line.fill(T::zero()),
                        Some(iy) => {
                            let src = &plane[iy * g.width..(iy + 1) * g.width];
                            for (ox, v) in line.iter_mut().enumerate() {
                                *v = match g.source(ox, kj, g.width) {
                                    Some(ix) => src[ix],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds columns back onto the image (adjoint of [`im2col`]).
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, img: &mut [T]) {
    let ncol = g.col_len();
    for c in 0..g.channels {
        let plane = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ncol..(row + 1) * ncol];
                for oy in 0..g.out_h {
                    let Some(iy) = g.source(oy, ki, g.height) else {
                        continue;
                    };
                    let line = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    let dst = &mut plane[iy * g.width..(iy + 1) * g.width];
                    for (ox, &v) in line.iter().enumerate() {
                        if let Some(ix) = g.source(ox, kj, g.width) {
                            dst[ix] += v;
                        }
                    }
                }
            }
        }
    }
}

fn add_bias<T: Scalar>(out: &mut [T], bias: &[T], plane: usize) {
    for (chunk, &b) in out.chunks_mut(plane).zip(bias) {
        for v in chunk {
            *v += b;
        }
    }
}

fn bias_grad<T: Scalar>(grad: &[T], channels: usize, plane: usize, db: &mut [T]) {
    for (c, chunk) in grad.chunks(plane).enumerate() {
        db[c % channels] += chunk.iter().copied().sum::<T>();
    }
}

/// `x: [batch, cin, h, w]`, `w: [cout, cin, kh, kw]`; output `[batch, cout, out_h, out_w]`.
pub fn conv2d_forward<T: Scalar>(
    x: &[T],
    batch: usize,
    g: &ConvGeom,
    weight: &[T],
    cout: usize,
    bias: Option<&[T]>,
) -> Vec<T> {
    let (rows, ncol) = (g.col_rows(), g.col_len());
    let mut cols = vec![T::zero(); rows * ncol];
    let mut out = vec![T::zero(); batch * cout * ncol];
    for b in 0..batch {
        im2col(&x[b * g.image_len()..(b + 1) * g.image_len()], g, &mut cols);
        let dst = &mut out[b * cout * ncol..(b + 1) * cout * ncol];
        gemm(
            MatRef::new(weight, cout, rows),
            MatRef::new(&cols, rows, ncol),
            T::zero(),
            dst,
            false,
        );
        if let Some(bias) = bias {
            add_bias(dst, bias, ncol);
        }
    }
    out
}

pub struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    batch: usize,
    g: &ConvGeom,
    weight: &[T],
    cout: usize,
    grad: &[T],
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let (rows, ncol) = (g.col_rows(), g.col_len());
    let mut cols = vec![T::zero(); rows * ncol];
    let mut dx = need.0.then(|| vec![T::zero(); x.len()]);
    let mut dw = need.1.then(|| vec![T::zero(); weight.len()]);
    let mut db = need.2.then(|| vec![T::zero(); cout]);
    for b in 0..batch {
        let gb = &grad[b * cout * ncol..(b + 1) * cout * ncol];
        if let Some(dw) = dw.as_mut() {
            im2col(&x[b * g.image_len()..(b + 1) * g.image_len()], g, &mut cols);
            gemm(
                MatRef::new(gb, cout, ncol),
                MatRef::new(&cols, rows, ncol).t(),
                T::one(),
                dw,
                false,
            );
        }
        if let Some(dx) = dx.as_mut() {
            gemm(
                MatRef::new(weight, cout, rows).t(),
                MatRef::new(gb, cout, ncol),
                T::zero(),
                &mut cols,
                false,
            );
            col2im(&cols, g, &mut dx[b * g.image_len()..(b + 1) * g.image_len()]);
        }
        if let Some(db) = db.as_mut() {
            bias_grad(gb, cout, ncol, db);
        }
    }
    ConvGrads { dx, dw, db }
}

/// `x: [batch, cin, in_h, in_w]`, `w: [cin, cout, kh, kw]`; `g` is the
/// transposed geometry with `channels = cout`.
pub fn conv_transpose2d_forward<T: Scalar>(
    x: &[T],
    batch: usize,
    cin: usize,
    g: &ConvGeom,
    weight: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let (rows, ncol) = (g.col_rows(), g.col_len());
    let mut cols = vec![T::zero(); rows * ncol];
    let plane = g.height * g.width;
    let mut out = vec![T::zero(); batch * g.image_len()];
    for b in 0..batch {
        gemm(
            MatRef::new(weight, cin, rows).t(),
            MatRef::new(&x[b * cin * ncol..(b + 1) * cin * ncol], cin, ncol),
            T::zero(),
            &mut cols,
            false,
        );
        let dst = &mut out[b * g.image_len()..(b + 1) * g.image_len()];
        col2im(&cols, g, dst);
        if let Some(bias) = bias {
            add_bias(dst, bias, plane);
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn conv_transpose2d_backward<T: Scalar>(
    x: &[T],
    batch: usize,
    cin: usize,
    g: &ConvGeom,
    weight: &[T],
    grad: &[T],
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let (rows, ncol) = (g.col_rows(), g.col_len());
    let mut cols = vec![T::zero(); rows * ncol];
    let mut dx = need.0.then(|| vec![T::zero(); x.len()]);
    let mut dw = need.1.then(|| vec![T::zero(); weight.len()]);
    let mut db = need.2.then(|| vec![T::zero(); g.channels]);
    for b in 0..batch {
        let gb = &grad[b * g.image_len()..(b + 1) * g.image_len()];
        if dx.is_some() || dw.is_some() {
            im2col(gb, g, &mut cols);
        }
        if let Some(dx) = dx.as_mut() {
            gemm(
                MatRef::new(weight, cin, rows),
                MatRef::new(&cols, rows, ncol),
                T::zero(),
                &mut dx[b * cin * ncol..(b + 1) * cin * ncol],
                false,
            );
        }
        if let Some(dw) = dw.as_mut() {
            gemm(
                MatRef::new(&x[b * cin * ncol..(b + 1) * cin * ncol], cin, ncol),
                MatRef::new(&cols, rows, ncol).t(),
                T::one(),
                dw,
                false,
            );
        }
        if let Some(db) = db.as_mut() {
            bias_grad(gb, g.channels, g.height * g.width, db);
        }
    }
    ConvGrads { dx, dw, db }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution, independent of im2col.
    #[allow(clippy::too_many_arguments)]
    fn direct_conv(
        x: &[f64],
        cin: usize,
        h: usize,
        w: usize,
        wt: &[f64],
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> (Vec<f64>, usize, usize) {
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0; cout * oh * ow];
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..cin {
                        for ki in 0..k {
                            for kj in 0..k {
                                let iy = (oy * stride + ki) as isize - pad as isize;
                                let ix = (ox * stride + kj) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += x[(ci * h + iy as usize) * w + ix as usize]
                                    * wt[((co * cin + ci) * k + ki) * k + kj];
                            }
                        }
                    }
                    out[(co * oh + oy) * ow + ox] = acc;
                }
            }
        }
        (out, oh, ow)
    }

    #[test]
    fn all_ones_3x3_over_4x4_gives_nines() {
        let g = ConvGeom::forward(1, 4, 4, 3, 3, 1, 0).unwrap();
        let out = conv2d_forward(&[1.0f64; 16], 1, &g, &[1.0; 9], 1, None);
        assert_eq!((g.out_h, g.out_w), (2, 2));
        assert_eq!(out, vec![9.0; 4]);
    }

    #[test]
    fn matches_direct_loop_with_stride_and_padding() {
        let (cin, h, w, cout, k) = (2, 5, 6, 3, 3);
        let x: Vec<f64> = (0..cin * h * w).map(|i| ((i * 37 % 11) as f64) / 7.0 - 0.6).collect();
        let wt: Vec<f64> = (0..cout * cin * k * k).map(|i| ((i * 13 % 7) as f64) / 5.0 - 0.5).collect();
        for (stride, pad) in [(1, 0), (1, 1), (2, 1), (2, 0)] {
            let g = ConvGeom::forward(cin, h, w, k, k, stride, pad).unwrap();
            let got = conv2d_forward(&x, 1, &g, &wt, cout, None);
            let (expect, oh, ow) = direct_conv(&x, cin, h, w, &wt, cout, k, stride, pad);
            assert_eq!((g.out_h, g.out_w), (oh, ow));
            for (a, b) in got.iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12, "stride {stride} pad {pad}");
            }
        }
    }

    #[test]
    fn transposed_geometry_doubles_with_k4_s2_p1() {
        let g = ConvGeom::transposed(3, 8, 8, 4, 4, 2, 1).unwrap();
        assert_eq!((g.height, g.width), (16, 16));
        let fwd = ConvGeom::forward(3, 16, 16, 4, 4, 2, 1).unwrap();
        assert_eq!((fwd.out_h, fwd.out_w), (8, 8));
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)>
        let g = ConvGeom::forward(2, 5, 5, 3, 3, 2, 1).unwrap();
        let x: Vec<f64> = (0..g.image_len()).map(|i| (i as f64 * 0.37).sin()).collect();
        let c: Vec<f64> = (0..g.col_rows() * g.col_len()).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut cols = vec![0.0; c.len()];
        im2col(&x, &g, &mut cols);
        let mut img = vec![0.0; x.len()];
        col2im(&c, &g, &mut img);
        let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&img).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
