//! 2-D convolution kernels (im2col + GEMM) and their two adjoints.
//!
//! `conv2d`, `conv2d_bwd_input`, and `conv2d_bwd_weight` are the three slots
//! of one trilinear form ⟨gy, conv(x, w)⟩; each one's derivative w.r.t. either
//! argument is another member of the trio, which is what lets the tape
//! differentiate a gradient a second time.

use ndarray::{ArrayD, ArrayView2, ArrayViewD, IxDyn};

use super::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(x_shape: &[usize], w_shape: &[usize], stride: usize, pad: usize) -> Self {
        assert_eq!(x_shape.len(), 4, "conv input must be [B,C,H,W]");
        assert_eq!(w_shape.len(), 4, "conv weight must be [O,I,KH,KW]");
        assert_eq!(x_shape[1], w_shape[1], "conv channel mismatch");
        let (in_h, in_w) = (x_shape[2], x_shape[3]);
        let (kh, kw) = (w_shape[2], w_shape[3]);
        assert!(in_h + 2 * pad >= kh && in_w + 2 * pad >= kw, "kernel larger than padded input");
        ConvGeom {
            batch: x_shape[0],
            in_ch: x_shape[1],
            in_h,
            in_w,
            out_ch: w_shape[0],
            kh,
            kw,
            stride,
            pad,
            out_h: (in_h + 2 * pad - kh) / stride + 1,
            out_w: (in_w + 2 * pad - kw) / stride + 1,
        }
    }

    fn cols(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }
}

/// Gather one sample's receptive fields into a `[out_h*out_w, in_ch*kh*kw]` matrix.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let k = g.cols();
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let row = (oy * g.out_w + ox) * k;
            let mut c = row;
            for ci in 0..g.in_ch {
                let plane = ci * g.in_h * g.in_w;
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        col[c] = if iy >= 0
                            && iy < g.in_h as isize
                            && ix >= 0
                            && ix < g.in_w as isize
                        {
                            x[plane + iy as usize * g.in_w + ix as usize]
                        } else {
                            T::zero()
                        };
                        c += 1;
                    }
                }
            }
        }
    }
}

/// Scatter-add a `[out_h*out_w, in_ch*kh*kw]` column matrix back onto one sample.
fn col2im<T: Scalar>(col: &[T], g: &ConvGeom, x: &mut [T]) {
    let k = g.cols();
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let row = (oy * g.out_w + ox) * k;
            let mut c = row;
            for ci in 0..g.in_ch {
                let plane = ci * g.in_h * g.in_w;
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if iy >= 0 && iy < g.in_h as isize && ix >= 0 && ix < g.in_w as isize {
                            x[plane + iy as usize * g.in_w + ix as usize] += col[c];
                        }
                        c += 1;
                    }
                }
            }
        }
    }
}

fn sample_slice<'a, T: Scalar>(a: &'a ArrayViewD<'_, T>, b: usize, plane: usize) -> &'a [T] {
    let data = a.as_slice().expect("conv operands must be contiguous");
    &data[b * plane..(b + 1) * plane]
}

/// y[b,o,oy,ox] = Σ_{i,ky,kx} x[b,i,oy*s+ky-p,ox*s+kx-p] · w[o,i,ky,kx]
pub fn conv2d<T: Scalar>(
    x: &ArrayViewD<'_, T>,
    w: &ArrayViewD<'_, T>,
    stride: usize,
    pad: usize,
) -> ArrayD<T> {
    let g = ConvGeom::new(x.shape(), w.shape(), stride, pad);
    let k = g.cols();
    let wmat = flat2(w, g.out_ch, k);
    let mut col = vec![T::zero(); g.out_h * g.out_w * k];
    let mut out = ArrayD::zeros(IxDyn(&[g.batch, g.out_ch, g.out_h, g.out_w]));
    let out_plane = g.out_ch * g.out_h * g.out_w;
    let out_slice = out.as_slice_mut().unwrap();
    for b in 0..g.batch {
        im2col(sample_slice(x, b, g.in_ch * g.in_h * g.in_w), &g, &mut col);
        let colm = ArrayView2::from_shape((g.out_h * g.out_w, k), &col[..]).unwrap();
        // [O, K] x [K, OHW] -> [O, OHW], already in output layout
        let y = wmat.dot(&colm.t());
        out_slice[b * out_plane..(b + 1) * out_plane]
            .copy_from_slice(y.as_standard_layout().as_slice().unwrap());
    }
    out
}

/// Adjoint of `conv2d` in its input slot: gx given (gy, w).
pub fn conv2d_bwd_input<T: Scalar>(
    gy: &ArrayViewD<'_, T>,
    w: &ArrayViewD<'_, T>,
    in_h: usize,
    in_w: usize,
    stride: usize,
    pad: usize,
) -> ArrayD<T> {
    let gys = gy.shape();
    let ws = w.shape();
    let g = ConvGeom::new(&[gys[0], ws[1], in_h, in_w], ws, stride, pad);
    assert_eq!(&gys[1..], &[g.out_ch, g.out_h, g.out_w], "gy shape mismatch in conv backward");
    let k = g.cols();
    let wmat = flat2(w, g.out_ch, k);
    let mut gx = ArrayD::zeros(IxDyn(&[g.batch, g.in_ch, g.in_h, g.in_w]));
    let gx_slice = gx.as_slice_mut().unwrap();
    let in_plane = g.in_ch * g.in_h * g.in_w;
    let out_plane = g.out_ch * g.out_h * g.out_w;
    for b in 0..g.batch {
        let gym = ArrayView2::from_shape(
            (g.out_ch, g.out_h * g.out_w),
            sample_slice(gy, b, out_plane),
        )
        .unwrap();
        // [OHW, O] x [O, K] -> [OHW, K]
        let colg = gym.t().dot(&wmat);
        col2im(
            colg.as_standard_layout().as_slice().unwrap(),
            &g,
            &mut gx_slice[b * in_plane..(b + 1) * in_plane],
        );
    }
    gx
}

/// Adjoint of `conv2d` in its weight slot: gw given (x, gy).
pub fn conv2d_bwd_weight<T: Scalar>(
    x: &ArrayViewD<'_, T>,
    gy: &ArrayViewD<'_, T>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> ArrayD<T> {
    let xs = x.shape();
    let gys = gy.shape();
    let g = ConvGeom::new(xs, &[gys[1], xs[1], kh, kw], stride, pad);
    assert_eq!(&gys[..], &[g.batch, g.out_ch, g.out_h, g.out_w], "gy shape mismatch");
    let k = g.cols();
    let mut col = vec![T::zero(); g.out_h * g.out_w * k];
    let mut gw = ndarray::Array2::<T>::zeros((g.out_ch, k));
    let in_plane = g.in_ch * g.in_h * g.in_w;
    let out_plane = g.out_ch * g.out_h * g.out_w;
    for b in 0..g.batch {
        im2col(sample_slice(x, b, in_plane), &g, &mut col);
        let colm = ArrayView2::from_shape((g.out_h * g.out_w, k), &col[..]).unwrap();
        let gym = ArrayView2::from_shape(
            (g.out_ch, g.out_h * g.out_w),
            sample_slice(gy, b, out_plane),
        )
        .unwrap();
        // [O, OHW] x [OHW, K] -> [O, K]
        gw = gw + gym.dot(&colm);
    }
    gw.into_shape_with_order(IxDyn(&[g.out_ch, g.in_ch, g.kh, g.kw])).unwrap()
}

fn flat2<'a, T: Scalar>(a: &'a ArrayViewD<'_, T>, r: usize, c: usize) -> ArrayView2<'a, T> {
    ArrayView2::from_shape((r, c), a.as_slice().expect("weight must be contiguous")).unwrap()
}
