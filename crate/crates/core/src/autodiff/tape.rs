//! The eager autodiff tape.

use ndarray::{ArrayD, Axis, IxDyn, Slice};

use super::conv;
use super::sample::{resize_plane, resize_plane_adjoint, BilinearTap};
use super::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, T),
    AddScalar(NodeId, T),
    Matmul(NodeId, NodeId),
    Transpose2(NodeId),
    Reshape(NodeId),
    /// Sum over the given axes, keeping them as size-1 dims.
    SumAxes(NodeId, Vec<usize>),
    /// Broadcast a size-1-or-scalar input up to this node's shape.
    Broadcast(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    Conv2d { x: NodeId, w: NodeId, stride: usize, pad: usize },
    ConvBwdInput { gy: NodeId, w: NodeId, stride: usize, pad: usize },
    ConvBwdWeight { x: NodeId, gy: NodeId, stride: usize, pad: usize },
    /// x + v broadcast along `axis` (bias).
    AddVec { x: NodeId, v: NodeId, axis: usize },
    /// x * v broadcast along `axis` (per-channel gain).
    MulVec { x: NodeId, v: NodeId, axis: usize },
    /// x[B,C,...] * s[B,C] broadcast over trailing axes.
    MulChannel { x: NodeId, s: NodeId },
    LeakyRelu(NodeId, T),
    /// g scaled by the leaky-relu mask of x; the mask is constant under
    /// differentiation (lrelu's second derivative vanishes a.e.).
    LreluMask { g: NodeId, x: NodeId, alpha: T },
    Softplus(NodeId),
    Sigmoid(NodeId),
    Square(NodeId),
    Rsqrt(NodeId),
    /// Bilinear resize of the two trailing axes (cell-centered).
    Resize { x: NodeId, oh: usize, ow: usize },
    /// Adjoint of `Resize`: scatter g back onto a `th`×`tw` grid.
    ResizeAdj { g: NodeId, th: usize, tw: usize },
    /// out[b,c,i,j] = x[b,c] sampled at (j + f_x·W/2, i + f_y·H/2), border-clamped.
    GridSample { x: NodeId, f: NodeId },
    GridSampleGradX { x: NodeId, f: NodeId, gy: NodeId },
    GridSampleGradF { x: NodeId, f: NodeId, gy: NodeId },
    Slice(NodeId, Vec<(usize, usize)>),
    /// Place the input into a zero array of the given shape at the offsets.
    PadZero(NodeId, Vec<usize>, Vec<usize>),
    Concat(Vec<NodeId>, usize),
    /// Reverse the last axis (horizontal flip of [B,C,H,W]).
    FlipW(NodeId),
}

struct Node<T> {
    value: ArrayD<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradient nodes produced by [`Tape::backward`], keyed by the node they
/// differentiate. Gradients live on the same tape and can be differentiated
/// again.
pub struct Gradients {
    map: Vec<Option<NodeId>>,
}

impl Gradients {
    pub fn of(&self, id: NodeId) -> Option<NodeId> {
        self.map.get(id.0).copied().flatten()
    }
}

/// Records eager tensor ops and differentiates them in reverse.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, value: ArrayD<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Insert a differentiable leaf (parameters, inputs that need gradients).
    pub fn var(&mut self, value: ArrayD<T>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Insert a non-differentiated constant.
    pub fn constant(&mut self, value: ArrayD<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: T) -> NodeId {
        self.constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| -x);
        let rg = self.rg(a);
        self.push(v, Op::Neg(a), rg)
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x * c);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: T) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x + c);
        let rg = self.rg(a);
        self.push(v, Op::AddScalar(a, c), rg)
    }

    pub fn leaky_relu(&mut self, a: NodeId, alpha: T) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| if x > T::zero() { x } else { x * alpha });
        let rg = self.rg(a);
        self.push(v, Op::LeakyRelu(a, alpha), rg)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.leaky_relu(a, T::zero())
    }

    fn lrelu_mask(&mut self, g: NodeId, x: NodeId, alpha: T) -> NodeId {
        let mut v = self.nodes[g.0].value.clone();
        ndarray::Zip::from(&mut v).and(&self.nodes[x.0].value).for_each(|gv, &xv| {
            if xv <= T::zero() {
                *gv = *gv * alpha;
            }
        });
        let rg = self.rg(g);
        self.push(v, Op::LreluMask { g, x, alpha }, rg)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        // log(1 + e^x), stabilized for large |x|
        let v = self.nodes[a.0].value.mapv(|x| {
            if x > T::zero() {
                x + (T::one() + (-x).exp()).ln()
            } else {
                (T::one() + x.exp()).ln()
            }
        });
        let rg = self.rg(a);
        self.push(v, Op::Softplus(a), rg)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| {
            if x >= T::zero() {
                T::one() / (T::one() + (-x).exp())
            } else {
                let e = x.exp();
                e / (T::one() + e)
            }
        });
        let rg = self.rg(a);
        self.push(v, Op::Sigmoid(a), rg)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x * x);
        let rg = self.rg(a);
        self.push(v, Op::Square(a), rg)
    }

    /// 1/sqrt(x); callers add an epsilon first.
    pub fn rsqrt(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| T::one() / x.sqrt());
        let rg = self.rg(a);
        self.push(v, Op::Rsqrt(a), rg)
    }

    // ---- linear algebra / shape ----

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0], "matmul shape mismatch");
        let av = as2(&self.nodes[a.0].value);
        let bv = as2(&self.nodes[b.0].value);
        let v = av.dot(&bv).into_dyn();
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Matmul(a, b), rg)
    }

    pub fn transpose2(&mut self, a: NodeId) -> NodeId {
        assert_eq!(self.shape(a).len(), 2, "transpose2 wants a matrix");
        let v = self.nodes[a.0].value.t().as_standard_layout().to_owned();
        let rg = self.rg(a);
        self.push(v, Op::Transpose2(a), rg)
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let n: usize = shape.iter().product();
        assert_eq!(self.nodes[a.0].value.len(), n, "reshape element count mismatch");
        let v = self.nodes[a.0]
            .value
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape");
        let rg = self.rg(a);
        self.push(v, Op::Reshape(a), rg)
    }

    /// Sum over `axes`, keeping them as length-1 dims.
    pub fn sum_axes(&mut self, a: NodeId, axes: &[usize]) -> NodeId {
        let mut v = self.nodes[a.0].value.clone();
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        for &ax in sorted.iter().rev() {
            v = v.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
        let rg = self.rg(a);
        self.push(v, Op::SumAxes(a, sorted), rg)
    }

    /// Broadcast `a` (scalar or size-1 axes) to `shape`.
    pub fn broadcast(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let v = self.nodes[a.0]
            .value
            .broadcast(IxDyn(shape))
            .expect("broadcast shape incompatible")
            .to_owned();
        let rg = self.rg(a);
        self.push(v, Op::Broadcast(a), rg)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = ArrayD::from_elem(IxDyn(&[]), self.nodes[a.0].value.sum());
        let rg = self.rg(a);
        self.push(v, Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = T::from_f64(self.nodes[a.0].value.len() as f64);
        let v = ArrayD::from_elem(IxDyn(&[]), self.nodes[a.0].value.sum() / n);
        let rg = self.rg(a);
        self.push(v, Op::MeanAll(a), rg)
    }

    // ---- conv ----

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> NodeId {
        let v = conv::conv2d(&self.nodes[x.0].value.view(), &self.nodes[w.0].value.view(), stride, pad);
        let rg = self.rg(x) || self.rg(w);
        self.push(v, Op::Conv2d { x, w, stride, pad }, rg)
    }

    fn conv2d_bwd_input(
        &mut self,
        gy: NodeId,
        w: NodeId,
        in_h: usize,
        in_w: usize,
        stride: usize,
        pad: usize,
    ) -> NodeId {
        let v = conv::conv2d_bwd_input(
            &self.nodes[gy.0].value.view(),
            &self.nodes[w.0].value.view(),
            in_h,
            in_w,
            stride,
            pad,
        );
        let rg = self.rg(gy) || self.rg(w);
        self.push(v, Op::ConvBwdInput { gy, w, stride, pad }, rg)
    }

    fn conv2d_bwd_weight(
        &mut self,
        x: NodeId,
        gy: NodeId,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> NodeId {
        let v = conv::conv2d_bwd_weight(
            &self.nodes[x.0].value.view(),
            &self.nodes[gy.0].value.view(),
            kh,
            kw,
            stride,
            pad,
        );
        let rg = self.rg(x) || self.rg(gy);
        self.push(v, Op::ConvBwdWeight { x, gy, stride, pad }, rg)
    }

    /// x[B,C,H,W] + b[C] (axis = 1), or x[B,D] + b[D] (axis = 1).
    pub fn bias_add(&mut self, x: NodeId, b: NodeId, axis: usize) -> NodeId {
        let bs = self.shape(b);
        assert_eq!(bs.len(), 1, "bias must be a vector");
        assert_eq!(self.shape(x)[axis], bs[0], "bias length mismatch");
        let mut v = self.nodes[x.0].value.clone();
        let bv = self.nodes[b.0].value.clone();
        for (i, mut lane) in v.axis_iter_mut(Axis(axis)).enumerate() {
            lane.mapv_inplace(|e| e + bv[i]);
        }
        let rg = self.rg(x) || self.rg(b);
        self.push(v, Op::AddVec { x, v: b, axis }, rg)
    }

    /// x scaled elementwise by the vector v along `axis`.
    pub fn mul_vec(&mut self, x: NodeId, v: NodeId, axis: usize) -> NodeId {
        let vs = self.shape(v);
        assert_eq!(vs.len(), 1, "gain must be a vector");
        assert_eq!(self.shape(x)[axis], vs[0], "gain length mismatch");
        let mut out = self.nodes[x.0].value.clone();
        let vv = self.nodes[v.0].value.clone();
        for (i, mut lane) in out.axis_iter_mut(Axis(axis)).enumerate() {
            lane.mapv_inplace(|e| e * vv[i]);
        }
        let rg = self.rg(x) || self.rg(v);
        self.push(out, Op::MulVec { x, v, axis }, rg)
    }

    /// x[B,C,...] * s[B,C], s broadcast over the trailing axes.
    pub fn mul_channel(&mut self, x: NodeId, s: NodeId) -> NodeId {
        let (xs, ss) = (self.shape(x).to_vec(), self.shape(s).to_vec());
        assert!(ss.len() == 2 && xs[0] == ss[0] && xs[1] == ss[1], "mul_channel shape mismatch");
        let spatial: usize = xs[2..].iter().product();
        let mut v = self.nodes[x.0].value.clone();
        {
            let sv = self.nodes[s.0].value.as_slice().unwrap().to_vec();
            let vs = v.as_slice_mut().expect("mul_channel wants contiguous input");
            for bc in 0..xs[0] * xs[1] {
                let g = sv[bc];
                for e in &mut vs[bc * spatial..(bc + 1) * spatial] {
                    *e = *e * g;
                }
            }
        }
        let rg = self.rg(x) || self.rg(s);
        self.push(v, Op::MulChannel { x, s }, rg)
    }

    // ---- resampling ----

    /// Bilinear resize of the two trailing axes to `oh`×`ow`.
    pub fn resize(&mut self, x: NodeId, oh: usize, ow: usize) -> NodeId {
        let xs = self.shape(x).to_vec();
        let n = xs.len();
        assert!(n >= 2, "resize wants at least 2 axes");
        let (h, w) = (xs[n - 2], xs[n - 1]);
        if h == oh && w == ow {
            return self.reshape(x, &xs); // identity, but keeps the graph uniform
        }
        let planes: usize = xs[..n - 2].iter().product();
        let mut out_shape = xs.clone();
        out_shape[n - 2] = oh;
        out_shape[n - 1] = ow;
        let src = self.nodes[x.0].value.as_slice().expect("resize wants contiguous input");
        let mut out = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            out.extend(resize_plane(&src[p * h * w..(p + 1) * h * w], h, w, oh, ow));
        }
        let v = ArrayD::from_shape_vec(IxDyn(&out_shape), out).unwrap();
        let rg = self.rg(x);
        self.push(v, Op::Resize { x, oh, ow }, rg)
    }

    fn resize_adj(&mut self, g: NodeId, th: usize, tw: usize) -> NodeId {
        let gs = self.shape(g).to_vec();
        let n = gs.len();
        let (gh, gw) = (gs[n - 2], gs[n - 1]);
        let planes: usize = gs[..n - 2].iter().product();
        let mut out_shape = gs.clone();
        out_shape[n - 2] = th;
        out_shape[n - 1] = tw;
        let src = self.nodes[g.0].value.as_slice().expect("resize_adj wants contiguous input");
        let mut out = Vec::with_capacity(planes * th * tw);
        for p in 0..planes {
            out.extend(resize_plane_adjoint(&src[p * gh * gw..(p + 1) * gh * gw], gh, gw, th, tw));
        }
        let v = ArrayD::from_shape_vec(IxDyn(&out_shape), out).unwrap();
        let rg = self.rg(g);
        self.push(v, Op::ResizeAdj { g, th, tw }, rg)
    }

    /// Warp x[B,C,H,W] by the displacement field f[B,2,H,W] (channel 0 = dx,
    /// channel 1 = dy, in normalized units where ±1 is half the extent).
    pub fn grid_sample(&mut self, x: NodeId, f: NodeId) -> NodeId {
        let (xs, fs) = (self.shape(x).to_vec(), self.shape(f).to_vec());
        assert_eq!(xs.len(), 4, "grid_sample input must be [B,C,H,W]");
        assert!(fs.len() == 4 && fs[1] == 2, "grid_sample field must be [B,2,H,W]");
        assert!(xs[0] == fs[0] && xs[2] == fs[2] && xs[3] == fs[3], "grid_sample dim mismatch");
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let half_w = T::from_f64(w as f64 / 2.0);
        let half_h = T::from_f64(h as f64 / 2.0);
        let xv = self.nodes[x.0].value.as_slice().unwrap();
        let fv = self.nodes[f.0].value.as_slice().unwrap();
        let mut out = vec![T::zero(); b * c * h * w];
        for bi in 0..b {
            let fbase = bi * 2 * h * w;
            for i in 0..h {
                for j in 0..w {
                    let dx = fv[fbase + i * w + j];
                    let dy = fv[fbase + h * w + i * w + j];
                    let px = T::from_f64(j as f64) + dx * half_w;
                    let py = T::from_f64(i as f64) + dy * half_h;
                    let t = BilinearTap::at(h, w, px, py);
                    for ci in 0..c {
                        let plane = (bi * c + ci) * h * w;
                        let src = &xv[plane..plane + h * w];
                        out[plane + i * w + j] = t.value(
                            src[t.y0 * w + t.x0],
                            src[t.y0 * w + t.x1],
                            src[t.y1 * w + t.x0],
                            src[t.y1 * w + t.x1],
                        );
                    }
                }
            }
        }
        let v = ArrayD::from_shape_vec(IxDyn(&xs), out).unwrap();
        let rg = self.rg(x) || self.rg(f);
        self.push(v, Op::GridSample { x, f }, rg)
    }

    fn grid_sample_grad_x(&mut self, x: NodeId, f: NodeId, gy: NodeId) -> NodeId {
        let xs = self.shape(x).to_vec();
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let half_w = T::from_f64(w as f64 / 2.0);
        let half_h = T::from_f64(h as f64 / 2.0);
        let fv = self.nodes[f.0].value.as_slice().unwrap();
        let gv = self.nodes[gy.0].value.as_slice().unwrap();
        let mut out = vec![T::zero(); b * c * h * w];
        for bi in 0..b {
            let fbase = bi * 2 * h * w;
            for i in 0..h {
                for j in 0..w {
                    let dx = fv[fbase + i * w + j];
                    let dy = fv[fbase + h * w + i * w + j];
                    let px = T::from_f64(j as f64) + dx * half_w;
                    let py = T::from_f64(i as f64) + dy * half_h;
                    let t = BilinearTap::at(h, w, px, py);
                    let (w00, w01, w10, w11) = t.weights();
                    for ci in 0..c {
                        let plane = (bi * c + ci) * h * w;
                        let g = gv[plane + i * w + j];
                        out[plane + t.y0 * w + t.x0] += w00 * g;
                        out[plane + t.y0 * w + t.x1] += w01 * g;
                        out[plane + t.y1 * w + t.x0] += w10 * g;
                        out[plane + t.y1 * w + t.x1] += w11 * g;
                    }
                }
            }
        }
        let v = ArrayD::from_shape_vec(IxDyn(&xs), out).unwrap();
        let rg = self.rg(gy);
        self.push(v, Op::GridSampleGradX { x, f, gy }, rg)
    }

    fn grid_sample_grad_f(&mut self, x: NodeId, f: NodeId, gy: NodeId) -> NodeId {
        let xs = self.shape(x).to_vec();
        let fs = self.shape(f).to_vec();
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let half_w = T::from_f64(w as f64 / 2.0);
        let half_h = T::from_f64(h as f64 / 2.0);
        let xv = self.nodes[x.0].value.as_slice().unwrap();
        let fv = self.nodes[f.0].value.as_slice().unwrap();
        let gv = self.nodes[gy.0].value.as_slice().unwrap();
        let mut out = vec![T::zero(); b * 2 * h * w];
        for bi in 0..b {
            let fbase = bi * 2 * h * w;
            for i in 0..h {
                for j in 0..w {
                    let dx = fv[fbase + i * w + j];
                    let dy = fv[fbase + h * w + i * w + j];
                    let px = T::from_f64(j as f64) + dx * half_w;
                    let py = T::from_f64(i as f64) + dy * half_h;
                    let t = BilinearTap::at(h, w, px, py);
                    let mut gx = T::zero();
                    let mut gyv = T::zero();
                    for ci in 0..c {
                        let plane = (bi * c + ci) * h * w;
                        let src = &xv[plane..plane + h * w];
                        let (v00, v01, v10, v11) = (
                            src[t.y0 * w + t.x0],
                            src[t.y0 * w + t.x1],
                            src[t.y1 * w + t.x0],
                            src[t.y1 * w + t.x1],
                        );
                        let g = gv[plane + i * w + j];
                        gx += g * t.dvalue_dx(v00, v01, v10, v11);
                        gyv += g * t.dvalue_dy(v00, v01, v10, v11);
                    }
                    out[fbase + i * w + j] = gx * half_w;
                    out[fbase + h * w + i * w + j] = gyv * half_h;
                }
            }
        }
        let v = ArrayD::from_shape_vec(IxDyn(&fs), out).unwrap();
        let rg = self.rg(gy);
        self.push(v, Op::GridSampleGradF { x, f, gy }, rg)
    }

    // ---- slicing ----

    pub fn slice(&mut self, a: NodeId, ranges: &[(usize, usize)]) -> NodeId {
        let shape = self.shape(a).to_vec();
        assert_eq!(ranges.len(), shape.len(), "slice rank mismatch");
        let mut v = self.nodes[a.0].value.view();
        for (ax, &(s, e)) in ranges.iter().enumerate() {
            assert!(s < e && e <= shape[ax], "slice out of bounds");
            v.slice_axis_inplace(Axis(ax), Slice::from(s..e));
        }
        let out = v.as_standard_layout().to_owned();
        let rg = self.rg(a);
        self.push(out, Op::Slice(a, ranges.to_vec()), rg)
    }

    fn pad_zero(&mut self, a: NodeId, offsets: &[usize], shape: &[usize]) -> NodeId {
        let mut v = ArrayD::zeros(IxDyn(shape));
        {
            let mut view = v.view_mut();
            let ashape = self.shape(a).to_vec();
            for (ax, &off) in offsets.iter().enumerate() {
                view.slice_axis_inplace(Axis(ax), Slice::from(off..off + ashape[ax]));
            }
            view.assign(&self.nodes[a.0].value);
        }
        let rg = self.rg(a);
        self.push(v, Op::PadZero(a, offsets.to_vec(), shape.to_vec()), rg)
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> NodeId {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
        let v = ndarray::concatenate(Axis(axis), &views).expect("concat shape mismatch");
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(v.as_standard_layout().to_owned(), Op::Concat(parts.to_vec(), axis), rg)
    }

    pub fn flip_w(&mut self, a: NodeId) -> NodeId {
        let n = self.shape(a).len();
        let mut v = self.nodes[a.0].value.clone();
        v.invert_axis(Axis(n - 1));
        let out = v.as_standard_layout().to_owned();
        let rg = self.rg(a);
        self.push(out, Op::FlipW(a), rg)
    }

    // ---- backward ----

    /// Reverse-mode differentiation from a scalar `root`. The returned
    /// gradients are tape nodes; differentiating them again is supported for
    /// every op except the grid-sample adjoints.
    pub fn backward(&mut self, root: NodeId) -> Gradients {
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward root must be scalar");
        let mut map: Vec<Option<NodeId>> = vec![None; self.nodes.len()];
        let seed_shape = self.shape(root).to_vec();
        let seed = self.constant(ArrayD::from_elem(IxDyn(&seed_shape), T::one()));
        map[root.0] = Some(seed);

        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let g = match map[i] {
                Some(g) => g,
                None => continue,
            };
            let op = self.nodes[i].op.clone();
            self.backprop_op(i, &op, g, &mut map);
        }
        Gradients { map }
    }

    fn accumulate(&mut self, map: &mut [Option<NodeId>], target: NodeId, grad: NodeId) {
        if !self.rg(target) {
            return;
        }
        map[target.0] = Some(match map[target.0] {
            Some(existing) => self.add(existing, grad),
            None => grad,
        });
    }

    fn backprop_op(&mut self, node: usize, op: &Op<T>, g: NodeId, map: &mut [Option<NodeId>]) {
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(map, a, g);
                self.accumulate(map, b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(map, a, g);
                let ng = self.neg(g);
                self.accumulate(map, b, ng);
            }
            Op::Mul(a, b) => {
                if self.rg(a) {
                    let ga = self.mul(g, b);
                    self.accumulate(map, a, ga);
                }
                if self.rg(b) {
                    let gb = self.mul(g, a);
                    self.accumulate(map, b, gb);
                }
            }
            Op::Neg(a) => {
                let ga = self.neg(g);
                self.accumulate(map, a, ga);
            }
            Op::Scale(a, c) => {
                let ga = self.scale(g, c);
                self.accumulate(map, a, ga);
            }
            Op::AddScalar(a, _) => self.accumulate(map, a, g),
            Op::Matmul(a, b) => {
                if self.rg(a) {
                    let bt = self.transpose2(b);
                    let ga = self.matmul(g, bt);
                    self.accumulate(map, a, ga);
                }
                if self.rg(b) {
                    let at = self.transpose2(a);
                    let gb = self.matmul(at, g);
                    self.accumulate(map, b, gb);
                }
            }
            Op::Transpose2(a) => {
                let ga = self.transpose2(g);
                self.accumulate(map, a, ga);
            }
            Op::Reshape(a) => {
                let shape = self.shape(a).to_vec();
                let ga = self.reshape(g, &shape);
                self.accumulate(map, a, ga);
            }
            Op::SumAxes(a, ref _axes) => {
                let shape = self.shape(a).to_vec();
                let ga = self.broadcast(g, &shape);
                self.accumulate(map, a, ga);
            }
            Op::Broadcast(a) => {
                let in_shape = self.shape(a).to_vec();
                let out_shape = self.shape(NodeId(node)).to_vec();
                let ga = if in_shape.is_empty() {
                    self.sum_all(g)
                } else {
                    let axes: Vec<usize> = (0..out_shape.len())
                        .filter(|&ax| in_shape[ax] == 1 && out_shape[ax] != 1)
                        .collect();
                    if axes.is_empty() {
                        self.reshape(g, &in_shape)
                    } else {
                        self.sum_axes(g, &axes)
                    }
                };
                self.accumulate(map, a, ga);
            }
            Op::SumAll(a) => {
                let shape = self.shape(a).to_vec();
                let ga = self.broadcast(g, &shape);
                self.accumulate(map, a, ga);
            }
            Op::MeanAll(a) => {
                let shape = self.shape(a).to_vec();
                let n = T::from_f64(self.nodes[a.0].value.len() as f64);
                let gs = self.scale(g, T::one() / n);
                let ga = self.broadcast(gs, &shape);
                self.accumulate(map, a, ga);
            }
            Op::Conv2d { x, w, stride, pad } => {
                let xs = self.shape(x).to_vec();
                let ws = self.shape(w).to_vec();
                if self.rg(x) {
                    let gx = self.conv2d_bwd_input(g, w, xs[2], xs[3], stride, pad);
                    self.accumulate(map, x, gx);
                }
                if self.rg(w) {
                    let gw = self.conv2d_bwd_weight(x, g, ws[2], ws[3], stride, pad);
                    self.accumulate(map, w, gw);
                }
            }
            Op::ConvBwdInput { gy, w, stride, pad } => {
                // value = B_input(gy, w); cotangent g has the input shape
                if self.rg(gy) {
                    let ggy = self.conv2d(g, w, stride, pad);
                    self.accumulate(map, gy, ggy);
                }
                if self.rg(w) {
                    let ws = self.shape(w).to_vec();
                    let gw = self.conv2d_bwd_weight(g, gy, ws[2], ws[3], stride, pad);
                    self.accumulate(map, w, gw);
                }
            }
            Op::ConvBwdWeight { x, gy, stride, pad } => {
                // value = B_weight(x, gy); cotangent g has the weight shape
                if self.rg(x) {
                    let xs = self.shape(x).to_vec();
                    let gx = self.conv2d_bwd_input(gy, g, xs[2], xs[3], stride, pad);
                    self.accumulate(map, x, gx);
                }
                if self.rg(gy) {
                    let ggy = self.conv2d(x, g, stride, pad);
                    self.accumulate(map, gy, ggy);
                }
            }
            Op::AddVec { x, v, axis } => {
                self.accumulate(map, x, g);
                if self.rg(v) {
                    let n = self.shape(NodeId(node)).len();
                    let axes: Vec<usize> = (0..n).filter(|&a| a != axis).collect();
                    let gs = self.sum_axes(g, &axes);
                    let vlen = self.shape(v)[0];
                    let gv = self.reshape(gs, &[vlen]);
                    self.accumulate(map, v, gv);
                }
            }
            Op::MulVec { x, v, axis } => {
                if self.rg(x) {
                    let gx = self.mul_vec(g, v, axis);
                    self.accumulate(map, x, gx);
                }
                if self.rg(v) {
                    let prod = self.mul(g, x);
                    let n = self.shape(NodeId(node)).len();
                    let axes: Vec<usize> = (0..n).filter(|&a| a != axis).collect();
                    let gs = self.sum_axes(prod, &axes);
                    let vlen = self.shape(v)[0];
                    let gv = self.reshape(gs, &[vlen]);
                    self.accumulate(map, v, gv);
                }
            }
            Op::MulChannel { x, s } => {
                if self.rg(x) {
                    let gx = self.mul_channel(g, s);
                    self.accumulate(map, x, gx);
                }
                if self.rg(s) {
                    let prod = self.mul(g, x);
                    let n = self.shape(NodeId(node)).len();
                    let axes: Vec<usize> = (2..n).collect();
                    let gs = self.sum_axes(prod, &axes);
                    let ss = self.shape(s).to_vec();
                    let gsr = self.reshape(gs, &ss);
                    self.accumulate(map, s, gsr);
                }
            }
            Op::LeakyRelu(a, alpha) => {
                let ga = self.lrelu_mask(g, a, alpha);
                self.accumulate(map, a, ga);
            }
            Op::LreluMask { g: gin, x, alpha } => {
                // d/d(gin) of gin*mask(x) is mask(x) again; x gets nothing (a.e.)
                if self.rg(gin) {
                    let gg = self.lrelu_mask(g, x, alpha);
                    self.accumulate(map, gin, gg);
                }
            }
            Op::Softplus(a) => {
                let s = self.sigmoid(a);
                let ga = self.mul(g, s);
                self.accumulate(map, a, ga);
            }
            Op::Sigmoid(a) => {
                let y = NodeId(node);
                let ny = self.neg(y);
                let one_minus = self.add_scalar(ny, T::one());
                let dy = self.mul(y, one_minus);
                let ga = self.mul(g, dy);
                self.accumulate(map, a, ga);
            }
            Op::Square(a) => {
                let two_a = self.scale(a, T::from_f64(2.0));
                let ga = self.mul(g, two_a);
                self.accumulate(map, a, ga);
            }
            Op::Rsqrt(a) => {
                let y = NodeId(node);
                let y2 = self.mul(y, y);
                let y3 = self.mul(y2, y);
                let d = self.scale(y3, T::from_f64(-0.5));
                let ga = self.mul(g, d);
                self.accumulate(map, a, ga);
            }
            Op::Resize { x, .. } => {
                let xs = self.shape(x).to_vec();
                let n = xs.len();
                let ga = self.resize_adj(g, xs[n - 2], xs[n - 1]);
                self.accumulate(map, x, ga);
            }
            Op::ResizeAdj { g: gin, .. } => {
                let gs = self.shape(gin).to_vec();
                let n = gs.len();
                let gg = self.resize(g, gs[n - 2], gs[n - 1]);
                self.accumulate(map, gin, gg);
            }
            Op::GridSample { x, f } => {
                if self.rg(x) {
                    let gx = self.grid_sample_grad_x(x, f, g);
                    self.accumulate(map, x, gx);
                }
                if self.rg(f) {
                    let gf = self.grid_sample_grad_f(x, f, g);
                    self.accumulate(map, f, gf);
                }
            }
            Op::GridSampleGradX { .. } | Op::GridSampleGradF { .. } => {
                unimplemented!("second-order gradients through grid_sample are not supported")
            }
            Op::Slice(a, ref ranges) => {
                let shape = self.shape(a).to_vec();
                let offsets: Vec<usize> = ranges.iter().map(|&(s, _)| s).collect();
                let ga = self.pad_zero(g, &offsets, &shape);
                self.accumulate(map, a, ga);
            }
            Op::PadZero(a, ref offsets, _) => {
                let ashape = self.shape(a).to_vec();
                let ranges: Vec<(usize, usize)> =
                    offsets.iter().zip(&ashape).map(|(&o, &l)| (o, o + l)).collect();
                let ga = self.slice(g, &ranges);
                self.accumulate(map, a, ga);
            }
            Op::Concat(ref parts, axis) => {
                let parts = parts.clone();
                let mut offset = 0;
                let gshape = self.shape(g).to_vec();
                for p in parts {
                    let len = self.shape(p)[axis];
                    let ranges: Vec<(usize, usize)> = gshape
                        .iter()
                        .enumerate()
                        .map(|(ax, &l)| if ax == axis { (offset, offset + len) } else { (0, l) })
                        .collect();
                    if self.rg(p) {
                        let gp = self.slice(g, &ranges);
                        self.accumulate(map, p, gp);
                    }
                    offset += len;
                }
            }
            Op::FlipW(a) => {
                let ga = self.flip_w(g);
                self.accumulate(map, a, ga);
            }
        }
    }
}

fn as2<T: Scalar>(a: &ArrayD<T>) -> ndarray::ArrayView2<'_, T> {
    a.view().into_dimensionality::<ndarray::Ix2>().expect("expected a matrix")
}
