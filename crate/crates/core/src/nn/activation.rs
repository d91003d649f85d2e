//! ReLU and per-pixel channel softmax.

use std::rc::Rc;

use crate::autodiff::{BackwardOp, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// `max(0, x)`. The subgradient at exactly 0 is taken as 0.
pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Softmax over the channel axis at every pixel, max-subtracted.
pub fn softmax_channels<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::no_grad();
    let v = g.constant(x.clone());
    Ok(g.softmax_channels(&v)?.value().clone())
}

struct ReluBackward<T> {
    x: Rc<Tensor<T>>,
}

impl<T: Scalar> BackwardOp<T> for ReluBackward<T> {
    fn backward(&self, grad: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![needs[0].then(|| {
            let data = grad
                .data()
                .iter()
                .zip(self.x.data())
                .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                .collect();
            Tensor::new(grad.shape().to_vec(), data).expect("same shape")
        })]
    }
}

struct SoftmaxBackward<T> {
    y: Tensor<T>,
}

impl<T: Scalar> BackwardOp<T> for SoftmaxBackward<T> {
    fn backward(&self, grad: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![needs[0].then(|| {
            let (n, c, h, w) = self.y.dims4().expect("NCHW");
            let plane = h * w;
            let mut dx = Tensor::zeros_like(grad);
            let (y, g) = (self.y.data(), grad.data());
            let out = dx.data_mut();
            for b in 0..n {
                for p in 0..plane {
                    let idx = |ch: usize| (b * c + ch) * plane + p;
                    let dot: T = (0..c).map(|ch| y[idx(ch)] * g[idx(ch)]).sum();
                    for ch in 0..c {
                        out[idx(ch)] = y[idx(ch)] * (g[idx(ch)] - dot);
                    }
                }
            }
            dx
        })]
    }
}

impl<T: Scalar> Graph<T> {
    pub fn relu(&mut self, x: &Var<T>) -> Var<T> {
        let out = relu(x.value());
        self.record("relu", &[x], out, ReluBackward { x: x.shared() })
    }

    pub fn softmax_channels(&mut self, x: &Var<T>) -> Result<Var<T>> {
        let (n, c, h, w) = x.value().dims4()?;
        if c < 2 {
            return Err(Error::invalid(format!("channel softmax needs C >= 2, got {c}")));
        }
        let plane = h * w;
        let src = x.value().data();
        let mut out = vec![T::zero(); src.len()];
        for b in 0..n {
            for p in 0..plane {
                let idx = |ch: usize| (b * c + ch) * plane + p;
                let max = (0..c).map(|ch| src[idx(ch)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for ch in 0..c {
                    let e = (src[idx(ch)] - max).exp();
                    out[idx(ch)] = e;
                    total += e;
                }
                for ch in 0..c {
                    out[idx(ch)] /= total;
                }
            }
        }
        let y = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.record("softmax", &[x], y.clone(), SoftmaxBackward { y }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::tensor::Rng;

    #[test]
    fn relu_definition_and_idempotence() {
        let x = Tensor::<f64>::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        assert_eq!(relu(&relu(&x)), relu(&x));
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::new(vec![3], vec![0.0, -0.5, 0.5]).unwrap());
        let y = g.relu(&x);
        let loss = g.sum(&y);
        let grad = g.backward(&loss).unwrap().get(&x);
        assert_eq!(grad.data(), &[0.0, 0.0, 1.0]);
        // One-sided differences at 0 are 0 (left) and 1 (right); the
        // convention picks the left one.
        let h = 1e-6;
        let left = (relu(&Tensor::scalar(0.0)).data()[0] - relu(&Tensor::scalar(-h)).data()[0]) / h;
        assert_eq!(grad.data()[0], left);
    }

    #[test]
    fn softmax_symmetry_shift_invariance_and_range() {
        let x = Tensor::<f64>::zeros(vec![1, 2, 1, 1]).unwrap();
        assert_eq!(softmax_channels(&x).unwrap().data(), &[0.5, 0.5]);
        let mut rng = Rng::new(3);
        let x = rng.normal_tensor::<f64>(&[2, 3, 4, 4], 5.0).unwrap();
        let y = softmax_channels(&x).unwrap();
        let y2 = softmax_channels(&x.map(|v| v + 123.0)).unwrap();
        for (a, b) in y.data().iter().zip(y2.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        for b in 0..2 {
            for p in 0..16 {
                let s: f64 = (0..3).map(|c| y.data()[(b * 3 + c) * 16 + p]).sum();
                assert!((s - 1.0).abs() <= 1e-6);
            }
        }
        assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(softmax_channels(&Tensor::<f64>::zeros(vec![1, 1, 2, 2]).unwrap()).is_err());
    }

    #[test]
    fn softmax_and_relu_gradients() {
        for seed in 0..3 {
            let mut rng = Rng::new(70 + seed);
            let x0 = rng.normal_tensor::<f64>(&[2, 3, 3, 3], 1.5).unwrap();
            let probe = rng.normal_tensor::<f64>(&[2, 3, 3, 3], 1.0).unwrap();
            let es = grad_check(|g, x| {
                let y = g.softmax_channels(x)?;
                let p = g.constant(probe.clone());
                let m = g.mul(&y, &p)?;
                Ok(g.sum(&m))
            }, &x0, 1e-6).unwrap();
            let er = grad_check(|g, x| {
                let y = g.relu(x);
                let p = g.constant(probe.clone());
                let m = g.mul(&y, &p)?;
                Ok(g.sum(&m))
            }, &x0, 1e-6).unwrap();
            assert!(es < 1e-5 && er < 1e-5, "{es} {er}");
        }
    }
}
