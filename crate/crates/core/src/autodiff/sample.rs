//! Bilinear sampling kernels shared by the warping core and the tape ops.
//!
//! Conventions used everywhere in this crate:
//! - sample positions are in pixel units with the identity grid at pixel
//!   centers (output pixel (i, j) sits at position x = j, y = i);
//! - out-of-bounds positions are border-clamped, which makes the sampled
//!   value constant (zero spatial gradient) outside the grid;
//! - resizing maps grids cell-centered: source position of output index `o`
//!   is `(o + 0.5) * in / out - 0.5`, so doubling chains compose cleanly.

use super::scalar::Scalar;

/// One bilinear read: corner indices, interpolation fractions, and whether the
/// position was clamped along each axis (clamped axes have zero derivative).
#[derive(Debug, Clone, Copy)]
pub struct BilinearTap<T> {
    pub x0: usize,
    pub x1: usize,
    pub y0: usize,
    pub y1: usize,
    pub fx: T,
    pub fy: T,
}

impl<T: Scalar> BilinearTap<T> {
    /// Resolve a sample position against a `height`×`width` grid.
    pub fn at(height: usize, width: usize, px: T, py: T) -> Self {
        let (x0, x1, fx) = Self::axis(px, width);
        let (y0, y1, fy) = Self::axis(py, height);
        BilinearTap { x0, x1, y0, y1, fx, fy }
    }

    fn axis(p: T, len: usize) -> (usize, usize, T) {
        let floor = p.floor();
        let f = p - floor;
        let i0 = floor.to_f64() as i64;
        let max = len as i64 - 1;
        let c0 = i0.clamp(0, max) as usize;
        let c1 = (i0 + 1).clamp(0, max) as usize;
        (c0, c1, f)
    }

    /// Interpolated value given the four corner reads.
    ///
    /// Written so that an exactly-integral position (fx = fy = 0) returns the
    /// corner value bitwise: the weighted terms multiply by exact zeros and
    /// ones only.
    #[inline]
    pub fn value(&self, v00: T, v01: T, v10: T, v11: T) -> T {
        let one = T::one();
        let top = (one - self.fx) * v00 + self.fx * v01;
        let bot = (one - self.fx) * v10 + self.fx * v11;
        (one - self.fy) * top + self.fy * bot
    }

    /// Derivative of `value` w.r.t. the x sample position, in pixel units.
    /// Zero when the position is clamped (x0 == x1).
    #[inline]
    pub fn dvalue_dx(&self, v00: T, v01: T, v10: T, v11: T) -> T {
        let one = T::one();
        (one - self.fy) * (v01 - v00) + self.fy * (v11 - v10)
    }

    /// Derivative of `value` w.r.t. the y sample position, in pixel units.
    #[inline]
    pub fn dvalue_dy(&self, v00: T, v01: T, v10: T, v11: T) -> T {
        let one = T::one();
        (one - self.fx) * (v10 - v00) + self.fx * (v11 - v01)
    }

    /// The four corner weights, in (w00, w01, w10, w11) order.
    #[inline]
    pub fn weights(&self) -> (T, T, T, T) {
        let one = T::one();
        (
            (one - self.fy) * (one - self.fx),
            (one - self.fy) * self.fx,
            self.fy * (one - self.fx),
            self.fy * self.fx,
        )
    }
}

/// Bilinear read of a single plane stored row-major as `data[h * width + w]`.
#[inline]
pub fn bilinear_sample<T: Scalar>(data: &[T], height: usize, width: usize, px: T, py: T) -> T {
    let t = BilinearTap::at(height, width, px, py);
    t.value(
        data[t.y0 * width + t.x0],
        data[t.y0 * width + t.x1],
        data[t.y1 * width + t.x0],
        data[t.y1 * width + t.x1],
    )
}

/// Cell-centered source position for resizing `in_len` samples to `out_len`.
#[inline]
pub fn resize_src_pos<T: Scalar>(out_idx: usize, in_len: usize, out_len: usize) -> T {
    let half = T::from_f64(0.5);
    (T::from_f64(out_idx as f64) + half) * T::from_f64(in_len as f64)
        / T::from_f64(out_len as f64)
        - half
}

/// Bilinear resize of one row-major plane to `oh`×`ow` (cell-centered,
/// border-clamped). Constant planes stay constant.
pub fn resize_plane<T: Scalar>(src: &[T], h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    let mut out = vec![T::zero(); oh * ow];
    for oy in 0..oh {
        let py = resize_src_pos::<T>(oy, h, oh);
        for ox in 0..ow {
            let px = resize_src_pos::<T>(ox, w, ow);
            out[oy * ow + ox] = bilinear_sample(src, h, w, px, py);
        }
    }
    out
}

/// Adjoint of [`resize_plane`]: scatter `grad` (an `oh`×`ow` cotangent of the
/// resize output) back onto the `h`×`w` source grid.
pub fn resize_plane_adjoint<T: Scalar>(
    grad: &[T],
    oh: usize,
    ow: usize,
    h: usize,
    w: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); h * w];
    for oy in 0..oh {
        let py = resize_src_pos::<T>(oy, h, oh);
        for ox in 0..ow {
            let px = resize_src_pos::<T>(ox, w, ow);
            let t = BilinearTap::at(h, w, px, py);
            let (w00, w01, w10, w11) = t.weights();
            let g = grad[oy * ow + ox];
            out[t.y0 * w + t.x0] += w00 * g;
            out[t.y0 * w + t.x1] += w01 * g;
            out[t.y1 * w + t.x0] += w10 * g;
            out[t.y1 * w + t.x1] += w11 * g;
        }
    }
    out
}
