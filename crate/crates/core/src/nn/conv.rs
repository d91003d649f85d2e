//! Grouped 2-D cross-correlation with zero padding.
//!
//! One kernel covers standard, depthwise (`groups == C_in`, one filter per
//! channel) and pointwise (1x1) convolution. Loops run kernel taps outermost
//! and contiguous output rows innermost; every output element is produced by a
//! single task in a fixed order, so results are bit-reproducible under rayon.

use std::rc::Rc;

use rayon::prelude::*;

use crate::autodiff::{BackwardOp, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvGeometry {
    /// Stride 1 with "same" padding for an odd `kernel` extent.
    pub fn same(kernel: usize, groups: usize) -> Self {
        Self { stride: 1, padding: (kernel - 1) / 2, groups }
    }
}

/// A convolution's kernel, optional bias and geometry.
#[derive(Clone, Debug)]
pub struct ConvParams<T> {
    /// `(C_out, C_in / groups, K_h, K_w)`
    pub kernel: Tensor<T>,
    /// `(C_out)`
    pub bias: Option<Tensor<T>>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl<T: Scalar> ConvParams<T> {
    pub fn new(kernel: Tensor<T>, bias: Option<Tensor<T>>, geom: ConvGeometry) -> Result<Self> {
        let (cout, _, _, _) = kernel.dims4()?;
        if geom.stride == 0 || geom.groups == 0 {
            return Err(Error::invalid("stride and groups must be positive"));
        }
        if cout % geom.groups != 0 {
            return Err(Error::invalid(format!(
                "{cout} output channels not divisible by {} groups",
                geom.groups
            )));
        }
        if let Some(b) = &bias {
            if b.shape() != [cout] {
                return Err(Error::ShapeMismatch { op: "conv2d bias", lhs: b.shape().to_vec(), rhs: vec![cout] });
            }
        }
        Ok(Self { kernel, bias, stride: geom.stride, padding: geom.padding, groups: geom.groups })
    }

    /// Depthwise kernel `(C, 1, K, K)`, stride 1, same padding.
    pub fn depthwise(kernel: Tensor<T>, bias: Option<Tensor<T>>) -> Result<Self> {
        let (c, _, k, _) = kernel.dims4()?;
        let p = Self::new(kernel, bias, ConvGeometry::same(k, c))?;
        if !p.is_depthwise() {
            return Err(Error::invalid(format!(
                "kernel {:?} is not a depthwise kernel",
                p.kernel.shape()
            )));
        }
        Ok(p)
    }

    /// Pointwise kernel `(C_out, C_in, 1, 1)`.
    pub fn pointwise(kernel: Tensor<T>, bias: Option<Tensor<T>>) -> Result<Self> {
        let p = Self::new(kernel, bias, ConvGeometry { stride: 1, padding: 0, groups: 1 })?;
        if !p.is_pointwise() {
            return Err(Error::invalid(format!(
                "kernel {:?} is not a 1x1 kernel",
                p.kernel.shape()
            )));
        }
        Ok(p)
    }

    pub fn geometry(&self) -> ConvGeometry {
        ConvGeometry { stride: self.stride, padding: self.padding, groups: self.groups }
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape()[1] * self.groups
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub fn is_depthwise(&self) -> bool {
        let s = self.kernel.shape();
        s[1] == 1 && self.groups == s[0] && s[2] == s[3]
    }

    pub fn is_pointwise(&self) -> bool {
        let s = self.kernel.shape();
        s[2] == 1 && s[3] == 1 && self.groups == 1
    }

    pub fn param_count(&self) -> usize {
        self.kernel.numel() + self.bias.as_ref().map_or(0, |b| b.numel())
    }
}

pub fn conv2d<T: Scalar>(x: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>> {
    let s = ConvShape::new(x.shape(), p.kernel.shape(), p.geometry())?;
    Ok(s.forward(x.data(), p.kernel.data(), p.bias.as_ref().map(|b| b.data())))
}

/// Per-channel spatial convolution: output channel `m` reads only input channel `m`.
pub fn depthwise_conv2d<T: Scalar>(x: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>> {
    let (_, c, _, _) = x.dims4()?;
    if !p.is_depthwise() || p.groups != c {
        return Err(Error::invalid(format!(
            "depthwise convolution over {c} channels needs a (C, 1, K, K) kernel with groups == C, got {:?} with {} groups",
            p.kernel.shape(),
            p.groups
        )));
    }
    conv2d(x, p)
}

/// Weighted linear combination of input channels at every pixel.
pub fn pointwise_conv2d<T: Scalar>(x: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>> {
    if !p.is_pointwise() {
        return Err(Error::invalid(format!(
            "pointwise convolution needs a 1x1 kernel with one group, got {:?}",
            p.kernel.shape()
        )));
    }
    conv2d(x, p)
}

/// `pointwise(depthwise(x))` with a 3x3, 5x5 or 7x7 depthwise stage.
pub fn depthwise_separable_conv2d<T: Scalar>(
    x: &Tensor<T>,
    dw: &ConvParams<T>,
    pw: &ConvParams<T>,
) -> Result<Tensor<T>> {
    check_separable(dw)?;
    let d = depthwise_conv2d(x, dw)?;
    pointwise_conv2d(&d, pw)
}

fn check_separable<T: Scalar>(dw: &ConvParams<T>) -> Result<()> {
    let k = dw.kernel.shape()[2];
    if ![3, 5, 7].contains(&k) || dw.stride != 1 || dw.padding != (k - 1) / 2 {
        return Err(Error::invalid(format!(
            "separable depthwise stage must be 3x3/5x5/7x7, stride 1, same padding; got {k}x{k}, stride {}, padding {}",
            dw.stride, dw.padding
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug)]
struct ConvShape {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
    cin_g: usize,
    cout_g: usize,
}

/// Output positions `[lo, hi)` whose tap `k` lands inside the input.
fn valid_range(k: usize, pad: usize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    // need 0 <= o*stride + k - pad < in_len
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if in_len + pad > k { ((in_len + pad - k - 1) / stride + 1).min(out_len) } else { 0 };
    (lo, hi.max(lo))
}

impl ConvShape {
    fn new(x: &[usize], k: &[usize], g: ConvGeometry) -> Result<Self> {
        let [n, cin, h, w] = *x else {
            return Err(Error::invalid(format!("conv2d input must be NCHW, got {x:?}")));
        };
        let [cout, cin_g, kh, kw] = *k else {
            return Err(Error::invalid(format!("conv2d kernel must be rank 4, got {k:?}")));
        };
        if g.stride == 0 || g.groups == 0 {
            return Err(Error::invalid("stride and groups must be positive"));
        }
        if cin % g.groups != 0 || cout % g.groups != 0 || cin / g.groups != cin_g {
            return Err(Error::invalid(format!(
                "conv2d channel/groups mismatch: input {cin} channels, kernel {k:?}, {} groups",
                g.groups
            )));
        }
        if kh > h + 2 * g.padding || kw > w + 2 * g.padding {
            return Err(Error::invalid(format!(
                "kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * g.padding,
                w + 2 * g.padding
            )));
        }
        let oh = (h + 2 * g.padding - kh) / g.stride + 1;
        let ow = (w + 2 * g.padding - kw) / g.stride + 1;
        Ok(Self {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            oh,
            ow,
            stride: g.stride,
            pad: g.padding,
            cin_g,
            cout_g: cout / g.groups,
        })
    }

    fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.cout, self.oh, self.ow]
    }

    fn w_index(&self, oc: usize, icl: usize, ki: usize, kj: usize) -> usize {
        ((oc * self.cin_g + icl) * self.kh + ki) * self.kw + kj
    }

    fn forward<T: Scalar>(&self, x: &[T], w: &[T], bias: Option<&[T]>) -> Tensor<T> {
        let s = *self;
        let (in_plane, out_plane) = (s.h * s.w, s.oh * s.ow);
        let mut out = vec![T::zero(); s.n * s.cout * out_plane];
        out.par_chunks_mut(out_plane).enumerate().for_each(|(idx, plane)| {
            let (b, oc) = (idx / s.cout, idx % s.cout);
            if let Some(bias) = bias {
                plane.fill(bias[oc]);
            }
            let group = oc / s.cout_g;
            for icl in 0..s.cin_g {
                let ic = group * s.cin_g + icl;
                let xin = &x[(b * s.cin + ic) * in_plane..][..in_plane];
                for ki in 0..s.kh {
                    let (oh_lo, oh_hi) = valid_range(ki, s.pad, s.stride, s.h, s.oh);
                    for kj in 0..s.kw {
                        let (ow_lo, ow_hi) = valid_range(kj, s.pad, s.stride, s.w, s.ow);
                        if ow_lo >= ow_hi {
                            continue;
                        }
                        let wv = w[s.w_index(oc, icl, ki, kj)];
                        for o_r in oh_lo..oh_hi {
                            let ir = o_r * s.stride + ki - s.pad;
                            let orow = &mut plane[o_r * s.ow..][ow_lo..ow_hi];
                            let irow = &xin[ir * s.w..][..s.w];
                            if s.stride == 1 {
                                let src = &irow[ow_lo + kj - s.pad..ow_hi + kj - s.pad];
                                for (o, &i) in orow.iter_mut().zip(src) {
                                    *o += wv * i;
                                }
                            } else {
                                for (t, o) in orow.iter_mut().enumerate() {
                                    *o += wv * irow[(ow_lo + t) * s.stride + kj - s.pad];
                                }
                            }
                        }
                    }
                }
            }
        });
        Tensor::new(self.out_shape(), out).expect("shape computed from inputs")
    }

    fn backward_input<T: Scalar>(&self, dy: &[T], w: &[T]) -> Vec<T> {
        let s = *self;
        let (in_plane, out_plane) = (s.h * s.w, s.oh * s.ow);
        let mut dx = vec![T::zero(); s.n * s.cin * in_plane];
        dx.par_chunks_mut(in_plane).enumerate().for_each(|(idx, plane)| {
            let (b, ic) = (idx / s.cin, idx % s.cin);
            let (group, icl) = (ic / s.cin_g, ic % s.cin_g);
            for ocl in 0..s.cout_g {
                let oc = group * s.cout_g + ocl;
                let g = &dy[(b * s.cout + oc) * out_plane..][..out_plane];
                for ki in 0..s.kh {
                    let (oh_lo, oh_hi) = valid_range(ki, s.pad, s.stride, s.h, s.oh);
                    for kj in 0..s.kw {
                        let (ow_lo, ow_hi) = valid_range(kj, s.pad, s.stride, s.w, s.ow);
                        if ow_lo >= ow_hi {
                            continue;
                        }
                        let wv = w[s.w_index(oc, icl, ki, kj)];
                        for o_r in oh_lo..oh_hi {
                            let ir = o_r * s.stride + ki - s.pad;
                            let grow = &g[o_r * s.ow..][ow_lo..ow_hi];
                            let drow = &mut plane[ir * s.w..][..s.w];
                            if s.stride == 1 {
                                let dst = &mut drow[ow_lo + kj - s.pad..ow_hi + kj - s.pad];
                                for (d, &gv) in dst.iter_mut().zip(grow) {
                                    *d += wv * gv;
                                }
                            } else {
                                for (t, &gv) in grow.iter().enumerate() {
                                    drow[(ow_lo + t) * s.stride + kj - s.pad] += wv * gv;
                                }
                            }
                        }
                    }
                }
            }
        });
        dx
    }

    fn backward_weight<T: Scalar>(&self, dy: &[T], x: &[T]) -> Vec<T> {
        let s = *self;
        let (in_plane, out_plane) = (s.h * s.w, s.oh * s.ow);
        let per_oc = s.cin_g * s.kh * s.kw;
        let mut dw = vec![T::zero(); s.cout * per_oc];
        dw.par_chunks_mut(per_oc).enumerate().for_each(|(oc, wgrad)| {
            let group = oc / s.cout_g;
            for icl in 0..s.cin_g {
                let ic = group * s.cin_g + icl;
                for ki in 0..s.kh {
                    let (oh_lo, oh_hi) = valid_range(ki, s.pad, s.stride, s.h, s.oh);
                    for kj in 0..s.kw {
                        let (ow_lo, ow_hi) = valid_range(kj, s.pad, s.stride, s.w, s.ow);
                        let mut acc = T::zero();
                        for b in 0..s.n {
                            let g = &dy[(b * s.cout + oc) * out_plane..][..out_plane];
                            let xin = &x[(b * s.cin + ic) * in_plane..][..in_plane];
                            for o_r in oh_lo..oh_hi {
                                let ir = o_r * s.stride + ki - s.pad;
                                let grow = &g[o_r * s.ow..][ow_lo..ow_hi];
                                let irow = &xin[ir * s.w..][..s.w];
                                for (t, &gv) in grow.iter().enumerate() {
                                    acc += gv * irow[(ow_lo + t) * s.stride + kj - s.pad];
                                }
                            }
                        }
                        wgrad[(icl * s.kh + ki) * s.kw + kj] = acc;
                    }
                }
            }
        });
        dw
    }

    fn backward_bias<T: Scalar>(&self, dy: &[T]) -> Vec<T> {
        let out_plane = self.oh * self.ow;
        (0..self.cout)
            .map(|oc| {
                (0..self.n)
                    .map(|b| dy[(b * self.cout + oc) * out_plane..][..out_plane].iter().copied().sum::<T>())
                    .sum()
            })
            .collect()
    }
}

struct ConvBackward<T> {
    x: Rc<Tensor<T>>,
    w: Rc<Tensor<T>>,
    shape: ConvShape,
    has_bias: bool,
}

impl<T: Scalar> BackwardOp<T> for ConvBackward<T> {
    fn backward(&self, grad: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let s = &self.shape;
        let dx = needs[0].then(|| {
            Tensor::new(self.x.shape().to_vec(), s.backward_input(grad.data(), self.w.data()))
                .expect("input shape")
        });
        let dw = needs[1].then(|| {
            Tensor::new(self.w.shape().to_vec(), s.backward_weight(grad.data(), self.x.data()))
                .expect("kernel shape")
        });
        let mut out = vec![dx, dw];
        if self.has_bias {
            out.push(needs[2].then(|| Tensor::new(vec![s.cout], s.backward_bias(grad.data())).expect("bias shape")));
        }
        out
    }
}

impl<T: Scalar> Graph<T> {
    pub fn conv2d(&mut self, x: &Var<T>, w: &Var<T>, bias: Option<&Var<T>>, geom: ConvGeometry) -> Result<Var<T>> {
        let shape = ConvShape::new(x.shape(), w.shape(), geom)?;
        if let Some(b) = bias {
            if b.shape() != [shape.cout] {
                return Err(Error::ShapeMismatch { op: "conv2d bias", lhs: b.shape().to_vec(), rhs: vec![shape.cout] });
            }
        }
        let out = shape.forward(x.value().data(), w.value().data(), bias.map(|b| b.value().data()));
        let op = ConvBackward { x: x.shared(), w: w.shared(), shape, has_bias: bias.is_some() };
        let var = match bias {
            Some(b) => self.record("conv2d", &[x, w, b], out, op),
            None => self.record("conv2d", &[x, w], out, op),
        };
        Ok(var)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::tensor::Rng;

    /// Direct nested-loop cross-correlation, independent of the row kernel above.
    pub(crate) fn naive_conv(x: &Tensor<f64>, k: &Tensor<f64>, b: Option<&Tensor<f64>>, g: ConvGeometry) -> Tensor<f64> {
        let (n, cin, h, w) = x.dims4().unwrap();
        let (cout, cin_g, kh, kw) = k.dims4().unwrap();
        let oh = (h + 2 * g.padding - kh) / g.stride + 1;
        let ow = (w + 2 * g.padding - kw) / g.stride + 1;
        let cout_g = cout / g.groups;
        let mut out = Tensor::zeros(vec![n, cout, oh, ow]).unwrap();
        for bi in 0..n {
            for oc in 0..cout {
                let grp = oc / cout_g;
                for r in 0..oh {
                    for c in 0..ow {
                        let mut acc = b.map_or(0.0, |b| b.data()[oc]);
                        for icl in 0..cin_g {
                            let ic = grp * cin_g + icl;
                            for i in 0..kh {
                                for j in 0..kw {
                                    let ir = (r * g.stride + i) as isize - g.padding as isize;
                                    let jc = (c * g.stride + j) as isize - g.padding as isize;
                                    if ir < 0 || jc < 0 || ir >= h as isize || jc >= w as isize {
                                        continue;
                                    }
                                    let xv = x.data()[((bi * cin + ic) * h + ir as usize) * w + jc as usize];
                                    acc += k.data()[((oc * cin_g + icl) * kh + i) * kw + j] * xv;
                                }
                            }
                        }
                        out.data_mut()[((bi * cout + oc) * oh + r) * ow + c] = acc;
                    }
                }
            }
        }
        out
    }

    fn max_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn one_by_one_kernel_scales() {
        let mut rng = Rng::new(0);
        let x = rng.normal_tensor::<f64>(&[2, 1, 5, 4], 1.0).unwrap();
        let k = Tensor::full(vec![1, 1, 1, 1], 2.0).unwrap();
        let p = ConvParams::pointwise(k, None).unwrap();
        let y = conv2d(&x, &p).unwrap();
        assert_eq!(y, x.map(|v| 2.0 * v));
    }

    #[test]
    fn ones_kernel_on_constant_image() {
        let x = Tensor::<f64>::ones(vec![1, 1, 5, 5]).unwrap();
        let k = Tensor::ones(vec![1, 1, 3, 3]).unwrap();
        let geom = ConvGeometry { stride: 1, padding: 1, groups: 1 };
        let y = conv2d(&x, &ConvParams::new(k.clone(), None, geom).unwrap()).unwrap();
        let oracle = naive_conv(&x, &k, None, geom);
        assert_eq!(y, oracle);
        assert_eq!(y.data()[2 * 5 + 2], 9.0);
        assert_eq!(y.data()[0], 4.0);
        assert_eq!(y.data()[2], 6.0);
    }

    #[test]
    fn matches_naive_for_strides_and_groups() {
        let mut rng = Rng::new(5);
        for &(cin, cout, k, stride, pad, groups) in
            &[(3, 4, 3, 1, 1, 1), (4, 6, 3, 2, 1, 2), (2, 2, 5, 1, 2, 2), (3, 5, 2, 2, 0, 1), (4, 4, 7, 1, 3, 4)]
        {
            let x = rng.normal_tensor::<f64>(&[2, cin, 7, 6], 1.0).unwrap();
            let w = rng.normal_tensor::<f64>(&[cout, cin / groups, k, k], 1.0).unwrap();
            let b = rng.normal_tensor::<f64>(&[cout], 1.0).unwrap();
            let geom = ConvGeometry { stride, padding: pad, groups };
            let y = conv2d(&x, &ConvParams::new(w.clone(), Some(b.clone()), geom).unwrap()).unwrap();
            let oracle = naive_conv(&x, &w, Some(&b), geom);
            assert_eq!(y.shape(), oracle.shape());
            assert!(max_diff(&y, &oracle) < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_channel_grouping_and_oversized_kernel() {
        let x = Tensor::<f32>::zeros(vec![1, 3, 4, 4]).unwrap();
        let geom = ConvGeometry { stride: 1, padding: 0, groups: 2 };
        let k = Tensor::zeros(vec![2, 1, 3, 3]).unwrap();
        assert!(conv2d(&x, &ConvParams::new(k, None, geom).unwrap()).is_err());
        let big = Tensor::zeros(vec![1, 3, 7, 7]).unwrap();
        let geom = ConvGeometry { stride: 1, padding: 1, groups: 1 };
        assert!(conv2d(&x, &ConvParams::new(big, None, geom).unwrap()).is_err());
    }

    #[test]
    fn depthwise_per_channel_scaling() {
        let mut rng = Rng::new(2);
        let x = rng.normal_tensor::<f64>(&[1, 2, 4, 4], 1.0).unwrap();
        let k = Tensor::new(vec![2, 1, 1, 1], vec![1.0, -1.0]).unwrap();
        let p = ConvParams::new(k, None, ConvGeometry { stride: 1, padding: 0, groups: 2 }).unwrap();
        let y = depthwise_conv2d(&x, &p).unwrap();
        assert_eq!(y.narrow_channels(0, 1).unwrap(), x.narrow_channels(0, 1).unwrap());
        assert_eq!(y.narrow_channels(1, 1).unwrap(), x.narrow_channels(1, 1).unwrap().map(|v| -v));
    }

    #[test]
    fn depthwise_rejects_standard_kernel() {
        let x = Tensor::<f32>::zeros(vec![1, 2, 4, 4]).unwrap();
        let k = Tensor::zeros(vec![2, 2, 3, 3]).unwrap();
        let p = ConvParams::new(k, None, ConvGeometry::same(3, 1)).unwrap();
        assert!(depthwise_conv2d(&x, &p).is_err());
        assert!(ConvParams::<f32>::depthwise(Tensor::zeros(vec![2, 2, 3, 3]).unwrap(), None).is_err());
    }

    #[test]
    fn single_channel_depthwise_equals_standard() {
        let mut rng = Rng::new(3);
        let x = rng.normal_tensor::<f64>(&[2, 1, 6, 6], 1.0).unwrap();
        let k = rng.normal_tensor::<f64>(&[1, 1, 3, 3], 1.0).unwrap();
        let dw = ConvParams::depthwise(k.clone(), None).unwrap();
        let std = ConvParams::new(k, None, ConvGeometry::same(3, 1)).unwrap();
        assert_eq!(depthwise_conv2d(&x, &dw).unwrap(), conv2d(&x, &std).unwrap());
    }

    #[test]
    fn pointwise_identity_and_channel_sum() {
        let mut rng = Rng::new(4);
        let x = rng.normal_tensor::<f64>(&[1, 3, 4, 4], 1.0).unwrap();
        let eye = Tensor::from_fn(vec![3, 3, 1, 1], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 }).unwrap();
        assert_eq!(pointwise_conv2d(&x, &ConvParams::pointwise(eye, None).unwrap()).unwrap(), x);
        let ones = Tensor::ones(vec![1, 3, 1, 1]).unwrap();
        let y = pointwise_conv2d(&x, &ConvParams::pointwise(ones, None).unwrap()).unwrap();
        for p in 0..16 {
            let s: f64 = (0..3).map(|c| x.data()[c * 16 + p]).sum();
            assert!((y.data()[p] - s).abs() < 1e-12);
        }
        let k3 = Tensor::zeros(vec![1, 3, 3, 3]).unwrap();
        let p = ConvParams::new(k3, None, ConvGeometry::same(3, 1)).unwrap();
        assert!(pointwise_conv2d(&x, &p).is_err());
    }

    #[test]
    fn separable_identity_and_parameter_count() {
        let mut rng = Rng::new(6);
        let x = rng.normal_tensor::<f64>(&[1, 3, 5, 5], 1.0).unwrap();
        for k in [3usize, 5, 7] {
            let delta = Tensor::from_fn(vec![3, 1, k, k], |i| if i % (k * k) == (k * k) / 2 { 1.0 } else { 0.0 }).unwrap();
            let eye = Tensor::from_fn(vec![3, 3, 1, 1], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 }).unwrap();
            let dw = ConvParams::depthwise(delta, None).unwrap();
            let pw = ConvParams::pointwise(eye, None).unwrap();
            assert_eq!(depthwise_separable_conv2d(&x, &dw, &pw).unwrap(), x);
            let cout = 8;
            let pw8 = ConvParams::pointwise(Tensor::<f64>::zeros(vec![cout, 3, 1, 1]).unwrap(), None).unwrap();
            assert_eq!(dw.param_count() + pw8.param_count(), 3 * k * k + 3 * cout);
        }
    }

    #[test]
    fn separable_rejects_even_or_strided_depthwise() {
        let x = Tensor::<f32>::zeros(vec![1, 2, 6, 6]).unwrap();
        let pw = ConvParams::pointwise(Tensor::zeros(vec![2, 2, 1, 1]).unwrap(), None).unwrap();
        let k4 = ConvParams::new(Tensor::zeros(vec![2, 1, 4, 4]).unwrap(), None, ConvGeometry { stride: 1, padding: 1, groups: 2 }).unwrap();
        assert!(depthwise_separable_conv2d(&x, &k4, &pw).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..3 {
            let mut rng = Rng::new(100 + seed);
            let geom = ConvGeometry { stride: 1 + (seed as usize % 2), padding: 1, groups: 2 };
            let x0 = rng.normal_tensor::<f64>(&[2, 4, 5, 5], 1.0).unwrap();
            let w0 = rng.normal_tensor::<f64>(&[4, 2, 3, 3], 1.0).unwrap();
            let b0 = rng.normal_tensor::<f64>(&[4], 1.0).unwrap();
            let probe = rng.normal_tensor::<f64>(&[2, 4, 5usize.div_ceil(geom.stride), 5usize.div_ceil(geom.stride)], 1.0).unwrap();
            let loss = |g: &mut Graph<f64>, y: Var<f64>| {
                let p = g.constant(probe.clone());
                let m = g.mul(&y, &p)?;
                Ok(g.sum(&m))
            };
            let ex = grad_check(
                |g, x| {
                    let w = g.constant(w0.clone());
                    let b = g.constant(b0.clone());
                    let y = g.conv2d(x, &w, Some(&b), geom)?;
                    loss(g, y)
                },
                &x0,
                1e-6,
            )
            .unwrap();
            let ew = grad_check(
                |g, w| {
                    let x = g.constant(x0.clone());
                    let y = g.conv2d(&x, w, None, geom)?;
                    loss(g, y)
                },
                &w0,
                1e-6,
            )
            .unwrap();
            let eb = grad_check(
                |g, b| {
                    let x = g.constant(x0.clone());
                    let w = g.constant(w0.clone());
                    let y = g.conv2d(&x, &w, Some(b), geom)?;
                    loss(g, y)
                },
                &b0,
                1e-6,
            )
            .unwrap();
            assert!(ex < 1e-6 && ew < 1e-6 && eb < 1e-6, "{ex} {ew} {eb}");
        }
    }
}
