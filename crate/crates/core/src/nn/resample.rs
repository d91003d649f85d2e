//! 3x3 average pooling and 2x bilinear upsampling.

use crate::autodiff::{BackwardOp, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

const POOL_K: usize = 3;
const POOL_PAD: usize = 1;

/// Mean over 3x3 windows with one pixel of zero padding; the divisor is
/// always 9, pads included.
pub fn avgpool2d<T: Scalar>(x: &Tensor<T>, stride: usize) -> Result<Tensor<T>> {
    let mut g = Graph::no_grad();
    let v = g.constant(x.clone());
    Ok(g.avgpool2d(&v, stride)?.value().clone())
}

/// Samples output pixel `i` at input coordinate `(i + 0.5) / 2 - 0.5`,
/// clamped to the edges.
pub fn bilinear_upsample2x<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::no_grad();
    let v = g.constant(x.clone());
    Ok(g.bilinear_upsample2x(&v)?.value().clone())
}

#[derive(Clone, Copy)]
struct PoolShape {
    planes: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    stride: usize,
}

impl PoolShape {
    /// Input rows covered by output row `o`, clipped to the image.
    fn window(o: usize, stride: usize, len: usize) -> std::ops::Range<usize> {
        let start = (o * stride).saturating_sub(POOL_PAD);
        let end = (o * stride + POOL_K - POOL_PAD).min(len);
        start..end
    }
}

struct PoolBackward {
    shape: PoolShape,
    n: usize,
    c: usize,
}

impl<T: Scalar> BackwardOp<T> for PoolBackward {
    fn backward(&self, grad: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let s = self.shape;
        vec![needs[0].then(|| {
            let ninth = T::of(1.0 / 9.0);
            let mut dx = vec![T::zero(); s.planes * s.h * s.w];
            for p in 0..s.planes {
                let g = &grad.data()[p * s.oh * s.ow..][..s.oh * s.ow];
                let d = &mut dx[p * s.h * s.w..][..s.h * s.w];
                for r in 0..s.oh {
                    for c in 0..s.ow {
                        let gv = g[r * s.ow + c] * ninth;
                        for ir in PoolShape::window(r, s.stride, s.h) {
                            for ic in PoolShape::window(c, s.stride, s.w) {
                                d[ir * s.w + ic] += gv;
                            }
                        }
                    }
                }
            }
            Tensor::new(vec![self.n, self.c, s.h, s.w], dx).expect("input shape")
        })]
    }
}

/// Precomputed source taps of one upsampled axis.
#[derive(Clone)]
struct Taps {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
}

fn taps(len: usize) -> Taps {
    let out = 2 * len;
    let mut t = Taps { lo: Vec::with_capacity(out), hi: Vec::with_capacity(out), frac: Vec::with_capacity(out) };
    for i in 0..out {
        let src = ((i as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (len - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(len - 1);
        t.lo.push(lo);
        t.hi.push(hi);
        t.frac.push(src - lo as f64);
    }
    t
}

struct UpsampleBackward {
    in_shape: Vec<usize>,
    rows: Taps,
    cols: Taps,
}

impl<T: Scalar> BackwardOp<T> for UpsampleBackward {
    fn backward(&self, grad: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![needs[0].then(|| {
            let (h, w) = (self.in_shape[2], self.in_shape[3]);
            let (oh, ow) = (2 * h, 2 * w);
            let planes = self.in_shape[0] * self.in_shape[1];
            let mut dx = vec![T::zero(); planes * h * w];
            for p in 0..planes {
                let g = &grad.data()[p * oh * ow..][..oh * ow];
                let d = &mut dx[p * h * w..][..h * w];
                for r in 0..oh {
                    let (r0, r1, fy) = (self.rows.lo[r], self.rows.hi[r], T::of(self.rows.frac[r]));
                    for c in 0..ow {
                        let (c0, c1, fx) = (self.cols.lo[c], self.cols.hi[c], T::of(self.cols.frac[c]));
                        let gv = g[r * ow + c];
                        let top = gv * (T::one() - fy);
                        let bot = gv * fy;
                        d[r0 * w + c0] += top * (T::one() - fx);
                        d[r0 * w + c1] += top * fx;
                        d[r1 * w + c0] += bot * (T::one() - fx);
                        d[r1 * w + c1] += bot * fx;
                    }
                }
            }
            Tensor::new(self.in_shape.clone(), dx).expect("input shape")
        })]
    }
}

impl<T: Scalar> Graph<T> {
    pub fn avgpool2d(&mut self, x: &Var<T>, stride: usize) -> Result<Var<T>> {
        let (n, c, h, w) = x.value().dims4()?;
        if !(1..=2).contains(&stride) {
            return Err(Error::invalid(format!("average pooling stride must be 1 or 2, got {stride}")));
        }
        if h + 2 * POOL_PAD < POOL_K || w + 2 * POOL_PAD < POOL_K {
            return Err(Error::invalid(format!("pooling output would be empty for {h}x{w}")));
        }
        let oh = (h + 2 * POOL_PAD - POOL_K) / stride + 1;
        let ow = (w + 2 * POOL_PAD - POOL_K) / stride + 1;
        let s = PoolShape { planes: n * c, h, w, oh, ow, stride };
        let ninth = T::of(1.0 / 9.0);
        let mut out = vec![T::zero(); s.planes * oh * ow];
        for p in 0..s.planes {
            let src = &x.value().data()[p * h * w..][..h * w];
            let dst = &mut out[p * oh * ow..][..oh * ow];
            for r in 0..oh {
                for col in 0..ow {
                    let mut acc = T::zero();
                    for ir in PoolShape::window(r, stride, h) {
                        for ic in PoolShape::window(col, stride, w) {
                            acc += src[ir * w + ic];
                        }
                    }
                    dst[r * ow + col] = acc * ninth;
                }
            }
        }
        let out = Tensor::new(vec![n, c, oh, ow], out)?;
        let op = PoolBackward { shape: s, n, c };
        Ok(self.record("avgpool2d", &[x], out, op))
    }

    pub fn bilinear_upsample2x(&mut self, x: &Var<T>) -> Result<Var<T>> {
        let (n, c, h, w) = x.value().dims4()?;
        let (rows, cols) = (taps(h), taps(w));
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); n * c * oh * ow];
        for p in 0..n * c {
            let src = &x.value().data()[p * h * w..][..h * w];
            let dst = &mut out[p * oh * ow..][..oh * ow];
            for r in 0..oh {
                let (r0, r1, fy) = (rows.lo[r], rows.hi[r], T::of(rows.frac[r]));
                for col in 0..ow {
                    let (c0, c1, fx) = (cols.lo[col], cols.hi[col], T::of(cols.frac[col]));
                    // lerp form keeps constant regions exactly constant
                    let (a, b) = (src[r0 * w + c0], src[r0 * w + c1]);
                    let top = a + fx * (b - a);
                    let (a, b) = (src[r1 * w + c0], src[r1 * w + c1]);
                    let bot = a + fx * (b - a);
                    dst[r * ow + col] = top + fy * (bot - top);
                }
            }
        }
        let out = Tensor::new(vec![n, c, oh, ow], out)?;
        let op = UpsampleBackward { in_shape: x.shape().to_vec(), rows, cols };
        Ok(self.record("upsample2x", &[x], out, op))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::tensor::Rng;

    #[test]
    fn stride_two_halves_extents() {
        let x = Tensor::<f32>::zeros(vec![1, 2, 64, 64]).unwrap();
        assert_eq!(avgpool2d(&x, 2).unwrap().shape(), &[1, 2, 32, 32]);
        assert_eq!(avgpool2d(&x, 1).unwrap().shape(), &[1, 2, 64, 64]);
        assert!(avgpool2d(&x, 3).is_err());
    }

    #[test]
    fn constant_input_windowed_mean() {
        let c = 2.5;
        let x = Tensor::<f64>::full(vec![1, 1, 8, 8], c).unwrap();
        let y = avgpool2d(&x, 2).unwrap();
        // Oracle: count in-bounds members of each padded 3x3 window.
        for r in 0..4 {
            for col in 0..4 {
                let inside = |o: usize| (0..3).filter(|k| (2 * o + k) >= 1 && (2 * o + k) - 1 < 8).count();
                let expect = c * (inside(r) * inside(col)) as f64 / 9.0;
                assert!((y.data()[r * 4 + col] - expect).abs() < 1e-12);
            }
        }
        assert_eq!(y.data()[5], c);
        assert!((y.data()[0] - c * 4.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn upsample_preserves_constants_and_separable_structure() {
        let x = Tensor::<f64>::full(vec![1, 2, 3, 4], 1.75).unwrap();
        let y = bilinear_upsample2x(&x).unwrap();
        assert_eq!(y.shape(), &[1, 2, 6, 8]);
        assert!(y.data().iter().all(|&v| v == 1.75));

        let x = Tensor::<f64>::new(vec![1, 1, 2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let y = bilinear_upsample2x(&x).unwrap();
        let row0 = &y.data()[0..4];
        for r in 1..4 {
            assert_eq!(&y.data()[r * 4..r * 4 + 4], row0);
        }
        assert_eq!(row0, &[0.0, 0.25, 0.75, 1.0]);
        let one = Tensor::<f64>::full(vec![1, 1, 1, 1], 2.5).unwrap();
        assert_eq!(bilinear_upsample2x(&one).unwrap().data(), &[2.5; 4]);
    }

    #[test]
    fn upsample_matches_direct_formula() {
        let mut rng = Rng::new(8);
        let x = rng.normal_tensor::<f64>(&[2, 3, 5, 4], 1.0).unwrap();
        let y = bilinear_upsample2x(&x).unwrap();
        let sample = |plane: &[f64], h: usize, w: usize, sy: f64, sx: f64| {
            let sy = sy.max(0.0).min((h - 1) as f64);
            let sx = sx.max(0.0).min((w - 1) as f64);
            let (y0, x0) = (sy.floor(), sx.floor());
            let (y1, x1) = ((y0 + 1.0).min((h - 1) as f64), (x0 + 1.0).min((w - 1) as f64));
            let at = |r: f64, c: f64| plane[r as usize * w + c as usize];
            let (ty, tx) = (sy - y0, sx - x0);
            at(y0, x0) * (1.0 - ty) * (1.0 - tx) + at(y0, x1) * (1.0 - ty) * tx + at(y1, x0) * ty * (1.0 - tx) + at(y1, x1) * ty * tx
        };
        for p in 0..6 {
            let plane = &x.data()[p * 20..][..20];
            for r in 0..10 {
                for c in 0..8 {
                    let expect = sample(plane, 5, 4, (r as f64 + 0.5) / 2.0 - 0.5, (c as f64 + 0.5) / 2.0 - 0.5);
                    assert!((y.data()[p * 80 + r * 8 + c] - expect).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn pool_and_upsample_gradients() {
        for seed in 0..3 {
            let mut rng = Rng::new(60 + seed);
            let x0 = rng.normal_tensor::<f64>(&[2, 2, 6, 5], 1.0).unwrap();
            let p_pool = rng.normal_tensor::<f64>(&[2, 2, 3, 3], 1.0).unwrap();
            let p_up = rng.normal_tensor::<f64>(&[2, 2, 12, 10], 1.0).unwrap();
            let e_pool = grad_check(|g, x| {
                let y = g.avgpool2d(x, 2)?;
                let p = g.constant(p_pool.clone());
                let m = g.mul(&y, &p)?;
                Ok(g.sum(&m))
            }, &x0, 1e-6).unwrap();
            let e_up = grad_check(|g, x| {
                let y = g.bilinear_upsample2x(x)?;
                let p = g.constant(p_up.clone());
                let m = g.mul(&y, &p)?;
                Ok(g.sum(&m))
            }, &x0, 1e-6).unwrap();
            assert!(e_pool < 1e-5 && e_up < 1e-5, "{e_pool} {e_up}");
        }
    }
}
