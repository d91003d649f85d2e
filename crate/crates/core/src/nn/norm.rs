//! Per-channel batch normalization over NCHW tensors.

use std::rc::Rc;

use crate::autodiff::{BackwardOp, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;
/// Weight kept on the old running statistic at each update.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Training,
    Inference,
}

#[derive(Clone, Debug)]
pub struct BatchNormState<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub eps: f64,
    pub momentum: f64,
    pub mode: BnMode,
}

impl<T: Scalar> BatchNormState<T> {
    /// gamma 1, beta 0, running statistics (0, 1), training mode.
    pub fn new(channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: Tensor::ones(vec![channels])?,
            beta: Tensor::zeros(vec![channels])?,
            running_mean: Tensor::zeros(vec![channels])?,
            running_var: Tensor::ones(vec![channels])?,
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
            mode: BnMode::Training,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }
}

/// Batch statistics of one training-mode application.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance used for normalization.
    pub var: Vec<T>,
    /// Elements per channel.
    pub count: usize,
}

/// `running = momentum * running + (1 - momentum) * batch`, with the
/// unbiased batch variance for `running_var`.
pub fn update_running_stats<T: Scalar>(
    running_mean: &mut Tensor<T>,
    running_var: &mut Tensor<T>,
    stats: &BatchStats<T>,
    momentum: f64,
) {
    let m = T::of(momentum);
    let one_m = T::one() - m;
    let unbias = T::of(stats.count as f64 / (stats.count as f64 - 1.0));
    for (r, &b) in running_mean.data_mut().iter_mut().zip(&stats.mean) {
        *r = m * *r + one_m * b;
    }
    for (r, &b) in running_var.data_mut().iter_mut().zip(&stats.var) {
        *r = m * *r + one_m * b * unbias;
    }
}

/// Functional batch norm. In training mode the running statistics of `state`
/// are updated.
pub fn batchnorm2d<T: Scalar>(x: &Tensor<T>, state: &mut BatchNormState<T>) -> Result<Tensor<T>> {
    let mut g = Graph::no_grad();
    let xv = g.constant(x.clone());
    let gamma = g.constant(state.gamma.clone());
    let beta = g.constant(state.beta.clone());
    match state.mode {
        BnMode::Training => {
            let (y, stats) = g.batch_norm_train(&xv, &gamma, &beta, state.eps)?;
            update_running_stats(&mut state.running_mean, &mut state.running_var, &stats, state.momentum);
            Ok(y.value().clone())
        }
        BnMode::Inference => {
            let y = g.batch_norm_infer(&xv, &gamma, &beta, &state.running_mean, &state.running_var, state.eps)?;
            Ok(y.value().clone())
        }
    }
}

fn check_channels<T: Scalar>(x: &Var<T>, params: &[&Tensor<T>]) -> Result<(usize, usize, usize, usize)> {
    let dims = x.value().dims4()?;
    for p in params {
        if p.shape() != [dims.1] {
            return Err(Error::ShapeMismatch { op: "batchnorm2d", lhs: x.shape().to_vec(), rhs: p.shape().to_vec() });
        }
    }
    Ok(dims)
}

/// Normalized input and per-channel `1 / sqrt(var + eps)`.
struct BnBackward<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
    gamma: Rc<Tensor<T>>,
    training: bool,
}

impl<T: Scalar> BackwardOp<T> for BnBackward<T> {
    fn backward(&self, grad: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let (n, c, h, w) = grad.dims4().expect("NCHW");
        let plane = h * w;
        let m = T::of((n * plane) as f64);
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for ch in 0..c {
            for b in 0..n {
                let base = (b * c + ch) * plane;
                let g = &grad.data()[base..base + plane];
                let xh = &self.xhat.data()[base..base + plane];
                for (&gv, &xv) in g.iter().zip(xh) {
                    dgamma[ch] += gv * xv;
                    dbeta[ch] += gv;
                }
            }
        }
        let dx = needs[0].then(|| {
            let mut dx = Tensor::zeros_like(grad);
            for ch in 0..c {
                let scale = self.gamma.data()[ch] * self.inv_std[ch];
                for b in 0..n {
                    let base = (b * c + ch) * plane;
                    let g = &grad.data()[base..base + plane];
                    let xh = &self.xhat.data()[base..base + plane];
                    let out = &mut dx.data_mut()[base..base + plane];
                    if self.training {
                        let k = scale / m;
                        for ((o, &gv), &xv) in out.iter_mut().zip(g).zip(xh) {
                            *o = k * (m * gv - dbeta[ch] - xv * dgamma[ch]);
                        }
                    } else {
                        for (o, &gv) in out.iter_mut().zip(g) {
                            *o = scale * gv;
                        }
                    }
                }
            }
            dx
        });
        vec![
            dx,
            needs[1].then(|| Tensor::new(vec![c], dgamma).expect("c >= 1")),
            needs[2].then(|| Tensor::new(vec![c], dbeta).expect("c >= 1")),
        ]
    }
}

fn normalize<T: Scalar>(
    x: &Tensor<T>,
    mean: &[T],
    inv_std: &[T],
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (n, c, h, w) = x.dims4().expect("checked NCHW");
    let plane = h * w;
    let mut xhat = Tensor::zeros_like(x);
    let mut y = Tensor::zeros_like(x);
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * plane;
            let (gm, bt) = (gamma.data()[ch], beta.data()[ch]);
            let src = &x.data()[base..base + plane];
            let xh = &mut xhat.data_mut()[base..base + plane];
            for (o, &v) in xh.iter_mut().zip(src) {
                *o = (v - mean[ch]) * inv_std[ch];
            }
            let out = &mut y.data_mut()[base..base + plane];
            for (o, &v) in out.iter_mut().zip(xhat.data()[base..base + plane].iter()) {
                *o = gm * v + bt;
            }
        }
    }
    (y, xhat)
}

impl<T: Scalar> Graph<T> {
    /// Normalizes by the batch statistics of `x`; returns them for the
    /// running-average update.
    pub fn batch_norm_train(
        &mut self,
        x: &Var<T>,
        gamma: &Var<T>,
        beta: &Var<T>,
        eps: f64,
    ) -> Result<(Var<T>, BatchStats<T>)> {
        let (n, c, h, w) = check_channels(x, &[gamma.value(), beta.value()])?;
        let plane = h * w;
        let count = n * plane;
        if count < 2 {
            return Err(Error::invalid(format!(
                "training-mode batch norm needs N*H*W >= 2, got shape {:?}",
                x.shape()
            )));
        }
        let inv_count = T::of(1.0 / count as f64);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut s = T::zero();
            for b in 0..n {
                let base = (b * c + ch) * plane;
                s += x.value().data()[base..base + plane].iter().copied().sum::<T>();
            }
            mean[ch] = s * inv_count;
            let mut v = T::zero();
            for b in 0..n {
                let base = (b * c + ch) * plane;
                for &xv in &x.value().data()[base..base + plane] {
                    let d = xv - mean[ch];
                    v += d * d;
                }
            }
            var[ch] = v * inv_count;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| (v + T::of(eps)).sqrt().recip()).collect();
        let (y, xhat) = normalize(x.value(), &mean, &inv_std, gamma.value(), beta.value());
        let op = BnBackward { xhat, inv_std, gamma: gamma.shared(), training: true };
        let out = self.record("batch_norm", &[x, gamma, beta], y, op);
        Ok((out, BatchStats { mean, var, count }))
    }

    /// Normalizes by fixed running statistics.
    pub fn batch_norm_infer(
        &mut self,
        x: &Var<T>,
        gamma: &Var<T>,
        beta: &Var<T>,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        eps: f64,
    ) -> Result<Var<T>> {
        check_channels(x, &[gamma.value(), beta.value(), running_mean, running_var])?;
        if running_var.data().iter().any(|&v| v <= T::zero()) {
            return Err(Error::invalid("running variance must be strictly positive"));
        }
        let inv_std: Vec<T> = running_var.data().iter().map(|&v| (v + T::of(eps)).sqrt().recip()).collect();
        let (y, xhat) = normalize(x.value(), running_mean.data(), &inv_std, gamma.value(), beta.value());
        let op = BnBackward { xhat, inv_std, gamma: gamma.shared(), training: false };
        Ok(self.record("batch_norm", &[x, gamma, beta], y, op))
    }
}
