//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is a tape: every operation appends a node whose inputs were
//! appended before it, so replaying the node list backwards is a valid
//! topological order. Values live behind `Rc` inside [`Var`] handles; a node
//! keeps only the values its backward rule needs. A graph built with
//! [`Graph::no_grad`] records nothing and intermediate values are freed as
//! soon as their handles drop.
//!
//! When a value feeds several consumers its gradient is the sum of the
//! contributions, accumulated in reverse tape order.

use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Vector-Jacobian product of one recorded operation.
///
/// `needs[i]` tells whether input `i` wants a gradient; implementations may
/// return `None` for inputs that do not.
pub trait BackwardOp<T: Scalar> {
    fn backward(&self, grad: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>>;
}

/// Handle to a value on a [`Graph`].
#[derive(Clone, Debug)]
pub struct Var<T> {
    id: usize,
    value: Rc<Tensor<T>>,
    tracked: bool,
}

impl<T: Scalar> Var<T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shared(&self) -> Rc<Tensor<T>> {
        Rc::clone(&self.value)
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    /// Whether gradients flow back through this value.
    pub fn requires_grad(&self) -> bool {
        self.tracked
    }
}

enum Entry<T> {
    Constant,
    Leaf,
    Op { inputs: Vec<usize>, op: Box<dyn BackwardOp<T>> },
}

pub struct Graph<T> {
    entries: Vec<Entry<T>>,
    recording: bool,
    op_counts: BTreeMap<&'static str, usize>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new(), recording: true, op_counts: BTreeMap::new() }
    }

    /// A graph that evaluates operations without recording them.
    pub fn no_grad() -> Self {
        Self { recording: false, ..Self::new() }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of times each named operation was evaluated on this graph.
    pub fn op_counts(&self) -> &BTreeMap<&'static str, usize> {
        &self.op_counts
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var<T> {
        let tracked = requires_grad && self.recording;
        let id = self.entries.len();
        self.entries.push(if tracked { Entry::Leaf } else { Entry::Constant });
        Var { id, value: Rc::new(value), tracked }
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var<T> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var<T> {
        self.leaf(value, false)
    }

    /// Appends the result of an operation. `op` is kept only when recording
    /// and at least one input is tracked.
    pub fn record<O>(&mut self, name: &'static str, inputs: &[&Var<T>], value: Tensor<T>, op: O) -> Var<T>
    where
        O: BackwardOp<T> + 'static,
    {
        *self.op_counts.entry(name).or_insert(0) += 1;
        let tracked = self.recording && inputs.iter().any(|v| v.tracked);
        let id = self.entries.len();
        if tracked {
            let inputs = inputs.iter().map(|v| v.id).collect();
            self.entries.push(Entry::Op { inputs, op: Box::new(op) });
        } else {
            self.entries.push(Entry::Constant);
        }
        Var { id, value: Rc::new(value), tracked }
    }

    fn is_tracked(&self, id: usize) -> bool {
        !matches!(self.entries[id], Entry::Constant)
    }

    /// Gradients of the scalar `loss` with respect to every tracked leaf.
    pub fn backward(&self, loss: &Var<T>) -> Result<Gradients<T>> {
        if !loss.value.is_scalar() {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let mut leaves = HashMap::new();
        if !loss.tracked {
            return Ok(Gradients { leaves });
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::new();
        grads.resize_with(loss.id + 1, || None);
        grads[loss.id] = Some(Tensor::full(loss.shape().to_vec(), T::one())?);

        for id in (0..=loss.id).rev() {
            let Some(grad) = grads[id].take() else { continue };
            match &self.entries[id] {
                Entry::Constant => {}
                Entry::Leaf => {
                    leaves.insert(id, grad);
                }
                Entry::Op { inputs, op } => {
                    let needs: Vec<bool> = inputs.iter().map(|&i| self.is_tracked(i)).collect();
                    let input_grads = op.backward(&grad, &needs);
                    debug_assert_eq!(input_grads.len(), inputs.len());
                    for ((&input, g), need) in inputs.iter().zip(input_grads).zip(needs) {
                        let (true, Some(g)) = (need, g) else { continue };
                        match &mut grads[input] {
                            Some(acc) => acc.add_assign(&g)?,
                            slot @ None => *slot = Some(g),
                        }
                    }
                }
            }
        }
        Ok(Gradients { leaves })
    }
}

/// Leaf gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    leaves: HashMap<usize, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `var`; zeros when `var` did not influence the loss.
    pub fn get(&self, var: &Var<T>) -> Tensor<T> {
        match self.leaves.get(&var.id) {
            Some(g) => g.clone(),
            None => Tensor::zeros_like(var.value()),
        }
    }

    pub fn take(&mut self, var: &Var<T>) -> Tensor<T> {
        self.leaves.remove(&var.id).unwrap_or_else(|| Tensor::zeros_like(var.value()))
    }

    pub fn contains(&self, var: &Var<T>) -> bool {
        self.leaves.contains_key(&var.id)
    }
}

// ----------------------------------------------------------------------------
// Elementwise and structural primitives

struct PassThrough {
    count: usize,
}

impl<T: Scalar> BackwardOp<T> for PassThrough {
    fn backward(&self, grad: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        (0..self.count).map(|i| needs[i].then(|| grad.clone())).collect()
    }
}

struct SubBackward;

impl<T: Scalar> BackwardOp<T> for SubBackward {
    fn backward(&self, grad: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![needs[0].then(|| grad.clone()), needs[1].then(|| grad.map(|g| -g))]
    }
}

struct MulBackward<T> {
    a: Rc<Tensor<T>>,
    b: Rc<Tensor<T>>,
}

impl<T: Scalar> BackwardOp<T> for MulBackward<T> {
    fn backward(&self, grad: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let times = |other: &Tensor<T>| {
            let data = grad.data().iter().zip(other.data()).map(|(&g, &o)| g * o).collect();
            Tensor::new(grad.shape().to_vec(), data).expect("shape checked in forward")
        };
        vec![needs[0].then(|| times(&self.b)), needs[1].then(|| times(&self.a))]
    }
}

struct DivBackward<T> {
    b: Rc<Tensor<T>>,
    out: Tensor<T>,
}

impl<T: Scalar> BackwardOp<T> for DivBackward<T> {
    fn backward(&self, grad: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let ga = needs[0].then(|| {
            let data = grad.data().iter().zip(self.b.data()).map(|(&g, &b)| g / b).collect();
            Tensor::new(grad.shape().to_vec(), data).expect("shape checked in forward")
        });
        let gb = needs[1].then(|| {
            let data = grad
                .data()
                .iter()
                .zip(self.b.data())
                .zip(self.out.data())
                .map(|((&g, &b), &q)| -g * q / b)
                .collect();
            Tensor::new(grad.shape().to_vec(), data).expect("shape checked in forward")
        });
        vec![ga, gb]
    }
}

struct ScaleBackward<T> {
    k: T,
}

impl<T: Scalar> BackwardOp<T> for ScaleBackward<T> {
    fn backward(&self, grad: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let k = self.k;
        vec![needs[0].then(|| grad.map(|g| g * k))]
    }
}

struct BroadcastBackward {
    shape: Vec<usize>,
}

impl<T: Scalar> BackwardOp<T> for BroadcastBackward {
    fn backward(&self, grad: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        // grad has one entry per leading-axis row (or a single entry).
        let rows = grad.numel();
        let per_row = self.shape.iter().product::<usize>() / rows;
        vec![needs[0].then(|| {
            let data = grad.data().iter().flat_map(|&g| std::iter::repeat_n(g, per_row)).collect();
            Tensor::new(self.shape.clone(), data).expect("shape recorded in forward")
        })]
    }
}

struct ConcatBackward {
    n: usize,
    ca: usize,
    cb: usize,
    plane: usize,
}

impl<T: Scalar> BackwardOp<T> for ConcatBackward {
    fn backward(&self, grad: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let h_w = grad.shape()[2..].to_vec();
        let split = |start: usize, len: usize| {
            let mut data = Vec::with_capacity(self.n * len * self.plane);
            let c = self.ca + self.cb;
            for b in 0..self.n {
                let base = (b * c + start) * self.plane;
                data.extend_from_slice(&grad.data()[base..base + len * self.plane]);
            }
            Tensor::new(vec![self.n, len, h_w[0], h_w[1]], data).expect("shape recorded in forward")
        };
        vec![needs[0].then(|| split(0, self.ca)), needs[1].then(|| split(self.ca, self.cb))]
    }
}

struct NarrowBackward {
    shape: Vec<usize>,
    start: usize,
}

impl<T: Scalar> BackwardOp<T> for NarrowBackward {
    fn backward(&self, grad: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![needs[0].then(|| {
            let (n, c, h, w) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
            let len = grad.shape()[1];
            let plane = h * w;
            let mut out = Tensor::zeros(self.shape.clone()).expect("shape recorded in forward");
            for b in 0..n {
                let dst = (b * c + self.start) * plane;
                let src = b * len * plane;
                out.data_mut()[dst..dst + len * plane]
                    .copy_from_slice(&grad.data()[src..src + len * plane]);
            }
            out
        })]
    }
}

struct MaskBackward {
    mask: Vec<bool>,
}

impl<T: Scalar> BackwardOp<T> for MaskBackward {
    fn backward(&self, grad: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![needs[0].then(|| {
            let mut g = grad.clone();
            for (x, &m) in g.data_mut().iter_mut().zip(&self.mask) {
                if m {
                    *x = T::zero();
                }
            }
            g
        })]
    }
}

impl<T: Scalar> Graph<T> {
    pub fn add(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let out = a.value().zip_map(b.value(), "add", |x, y| x + y)?;
        Ok(self.record("add", &[a, b], out, PassThrough { count: 2 }))
    }

    pub fn sub(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let out = a.value().zip_map(b.value(), "sub", |x, y| x - y)?;
        Ok(self.record("sub", &[a, b], out, SubBackward))
    }

    pub fn mul(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let out = a.value().zip_map(b.value(), "mul", |x, y| x * y)?;
        let op = MulBackward { a: a.shared(), b: b.shared() };
        Ok(self.record("mul", &[a, b], out, op))
    }

    pub fn div(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let out = a.value().zip_map(b.value(), "div", |x, y| x / y)?;
        let op = DivBackward { b: b.shared(), out: out.clone() };
        Ok(self.record("div", &[a, b], out, op))
    }

    pub fn scale(&mut self, a: &Var<T>, k: T) -> Var<T> {
        let out = a.value().map(|x| x * k);
        self.record("scale", &[a], out, ScaleBackward { k })
    }

    pub fn add_scalar(&mut self, a: &Var<T>, k: T) -> Var<T> {
        let out = a.value().map(|x| x + k);
        self.record("add_scalar", &[a], out, PassThrough { count: 1 })
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, a: &Var<T>) -> Var<T> {
        let out = Tensor::scalar(a.value().sum());
        self.record("sum", &[a], out, BroadcastBackward { shape: a.shape().to_vec() })
    }

    /// Sum over every axis but the first, shape `[N]`.
    pub fn sum_per_sample(&mut self, a: &Var<T>) -> Var<T> {
        let n = a.shape()[0];
        let per = a.value().numel() / n;
        let sums = a.value().data().chunks(per).map(|c| c.iter().copied().sum()).collect();
        let out = Tensor::new(vec![n], sums).expect("n >= 1");
        self.record("sum_per_sample", &[a], out, BroadcastBackward { shape: a.shape().to_vec() })
    }

    /// Replaces masked elements by `value`; masked elements get no gradient.
    pub fn mask_fill(&mut self, a: &Var<T>, mask: Vec<bool>, value: T) -> Result<Var<T>> {
        if mask.len() != a.value().numel() {
            return Err(Error::invalid(format!(
                "mask of length {} for tensor of {} elements",
                mask.len(),
                a.value().numel()
            )));
        }
        let mut out = a.value().clone();
        for (x, &m) in out.data_mut().iter_mut().zip(&mask) {
            if m {
                *x = value;
            }
        }
        Ok(self.record("mask_fill", &[a], out, MaskBackward { mask }))
    }

    /// Concatenates two NCHW tensors along channels, `a` first.
    pub fn concat_channels(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let (na, ca, ha, wa) = a.value().dims4()?;
        let (nb, cb, hb, wb) = b.value().dims4()?;
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(Error::ShapeMismatch {
                op: "concat_channels",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let plane = ha * wa;
        let mut data = Vec::with_capacity(na * (ca + cb) * plane);
        for n in 0..na {
            data.extend_from_slice(&a.value().data()[n * ca * plane..(n + 1) * ca * plane]);
            data.extend_from_slice(&b.value().data()[n * cb * plane..(n + 1) * cb * plane]);
        }
        let out = Tensor::new(vec![na, ca + cb, ha, wa], data)?;
        let op = ConcatBackward { n: na, ca, cb, plane };
        Ok(self.record("concat", &[a, b], out, op))
    }

    /// Channels `[start, start + len)` of an NCHW tensor.
    pub fn narrow_channels(&mut self, a: &Var<T>, start: usize, len: usize) -> Result<Var<T>> {
        let out = a.value().narrow_channels(start, len)?;
        let op = NarrowBackward { shape: a.shape().to_vec(), start };
        Ok(self.record("narrow", &[a], out, op))
    }
}

// ----------------------------------------------------------------------------
// Finite-difference checking

/// Largest `|analytic - central| / max(1, |central|)` over every coordinate
/// of `x`, where `central` is the central difference with step `eps`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &Var<f64>) -> Result<Var<f64>>,
{
    let coords: Vec<usize> = (0..x.numel()).collect();
    grad_check_at(f, x, eps, &coords)
}

/// [`grad_check`] restricted to the listed flat coordinates.
pub fn grad_check_at<F>(f: F, x: &Tensor<f64>, eps: f64, coords: &[usize]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &Var<f64>) -> Result<Var<f64>>,
{
    if !(1e-7..=1e-2).contains(&eps) {
        return Err(Error::invalid(format!("finite-difference step {eps} outside [1e-7, 1e-2]")));
    }
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let y = f(&mut g, &xv)?;
    let analytic = g.backward(&y)?.get(&xv);

    let eval = |probe: Tensor<f64>| -> Result<f64> {
        let mut g = Graph::no_grad();
        let v = g.constant(probe);
        f(&mut g, &v)?.value().item()
    };
    let mut worst = 0.0f64;
    for &i in coords {
        if i >= x.numel() {
            return Err(Error::invalid(format!("coordinate {i} out of range")));
        }
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let central = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let err = (analytic.data()[i] - central).abs() / central.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn add_elementwise_and_identity() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[2], &[1.0, 2.0]));
        let b = g.constant(t(&[2], &[3.0, 4.0]));
        assert_eq!(g.add(&a, &b).unwrap().value().data(), &[4.0, 6.0]);
        let z = g.constant(Tensor::zeros_like(a.value()));
        assert_eq!(g.add(&a, &z).unwrap().value(), a.value());
    }

    #[test]
    fn add_shape_mismatch_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]).unwrap());
        let b = g.constant(Tensor::zeros(vec![3, 2]).unwrap());
        let msg = g.add(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    }

    #[test]
    fn gradient_of_sum_of_add_is_ones() {
        let mut rng = Rng::new(1);
        let a0 = rng.normal_tensor::<f64>(&[3, 4], 1.0).unwrap();
        let b0 = rng.normal_tensor::<f64>(&[3, 4], 1.0).unwrap();
        let mut g = Graph::new();
        let a = g.param(a0.clone());
        let b = g.constant(b0.clone());
        let s = g.add(&a, &b).unwrap();
        let loss = g.sum(&s);
        let ga = g.backward(&loss).unwrap().get(&a);
        assert!(ga.data().iter().all(|&x| x == 1.0));
        let err = grad_check(
            |g, x| {
                let b = g.constant(b0.clone());
                let s = g.add(x, &b)?;
                Ok(g.sum(&s))
            },
            &a0,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn linear_map_and_disconnected_leaf() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[3], &[1.0, -2.0, 5.0]));
        let unused = g.param(t(&[2], &[1.0, 1.0]));
        let y = g.scale(&x, 2.0);
        let loss = g.sum(&y);
        let grads = g.backward(&loss).unwrap();
        assert_eq!(grads.get(&x).data(), &[2.0, 2.0, 2.0]);
        assert_eq!(grads.get(&unused).data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let y = g.scale(&x, 3.0);
        assert!(g.backward(&y).is_err());
    }

    #[test]
    fn fan_out_accumulates() {
        // loss = sum(x * x + x) => d/dx = 2x + 1
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2], &[3.0, -1.0]));
        let sq = g.mul(&x, &x).unwrap();
        let s = g.add(&sq, &x).unwrap();
        let loss = g.sum(&s);
        assert_eq!(g.backward(&loss).unwrap().get(&x).data(), &[7.0, -1.0]);
    }

    #[test]
    fn random_three_op_chain_matches_finite_differences() {
        for seed in 0..5 {
            let mut rng = Rng::new(seed);
            let x0 = rng.uniform_tensor::<f64>(&[2, 5], 0.5, 2.0).unwrap();
            let c = rng.uniform_tensor::<f64>(&[2, 5], 0.5, 2.0).unwrap();
            let err = grad_check(
                |g, x| {
                    let c = g.constant(c.clone());
                    let m = g.mul(x, &c)?;
                    let d = g.div(&m, x)?;
                    let q = g.mul(&d, x)?;
                    let r = g.sub(&q, &c)?;
                    let r2 = g.mul(&r, &r)?;
                    Ok(g.sum(&r2))
                },
                &x0,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-5, "seed {seed}: {err}");
        }
    }

    #[test]
    fn concat_splits_gradient_at_boundary() {
        let mut rng = Rng::new(9);
        let a0 = rng.normal_tensor::<f64>(&[1, 4, 8, 8], 1.0).unwrap();
        let b0 = rng.normal_tensor::<f64>(&[1, 6, 8, 8], 1.0).unwrap();
        let mut g = Graph::new();
        let a = g.param(a0.clone());
        let b = g.param(b0.clone());
        let c = g.concat_channels(&a, &b).unwrap();
        assert_eq!(c.shape(), &[1, 10, 8, 8]);
        assert_eq!(&c.value().narrow_channels(0, 4).unwrap(), a.value());
        assert_eq!(&c.value().narrow_channels(4, 6).unwrap(), b.value());
        let w = rng.normal_tensor::<f64>(&[1, 10, 8, 8], 1.0).unwrap();
        let wv = g.constant(w.clone());
        let p = g.mul(&c, &wv).unwrap();
        let loss = g.sum(&p);
        let grads = g.backward(&loss).unwrap();
        assert_eq!(grads.get(&a), w.narrow_channels(0, 4).unwrap());
        assert_eq!(grads.get(&b), w.narrow_channels(4, 6).unwrap());
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(vec![1, 2, 4, 4]).unwrap());
        let b = g.constant(Tensor::zeros(vec![1, 2, 4, 5]).unwrap());
        assert!(g.concat_channels(&a, &b).is_err());
        let c = g.constant(Tensor::zeros(vec![2, 2, 4, 4]).unwrap());
        assert!(g.concat_channels(&a, &c).is_err());
    }

    #[test]
    fn grad_check_contract() {
        let x = t(&[4], &[0.3, -1.2, 2.0, 0.7]);
        let sum_sq = |g: &mut Graph<f64>, x: &Var<f64>| {
            let s = g.mul(x, x)?;
            Ok(g.sum(&s))
        };
        assert!(grad_check(sum_sq, &x, 1e-5).unwrap() < 1e-6);
        let sum = |g: &mut Graph<f64>, x: &Var<f64>| Ok(g.sum(x));
        assert!(grad_check(sum, &x, 1e-4).unwrap() < 1e-8);
        assert!(grad_check(sum, &x, 1.0).is_err());
        let not_scalar = |g: &mut Graph<f64>, x: &Var<f64>| Ok(g.scale(x, 2.0));
        assert!(grad_check(not_scalar, &x, 1e-5).is_err());
    }

    #[test]
    fn no_grad_graph_records_nothing() {
        let mut g = Graph::<f32>::no_grad();
        let x = g.param(Tensor::ones(vec![3]).unwrap());
        assert!(!x.requires_grad());
        let y = g.scale(&x, 2.0);
        let loss = g.sum(&y);
        assert!(!g.backward(&loss).unwrap().contains(&x));
    }
}
