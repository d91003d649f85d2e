//! Finite-difference suite over every differentiable primitive, both block
//! types and the model with its Dice loss, at 64-bit precision.

use crate::autodiff::{grad_check, grad_check_at, Graph, Var};
use crate::blocks::{dmr_block, es_block, Ctx, DmrBlockParams, EsBlockParams};
use crate::error::Result;
use crate::model::{Model, ModelConfig};
use crate::nn::{BnMode, ConvGeometry, BN_EPS};
use crate::params::{ParamBuilder, ParamId, ParamStore};
use crate::tensor::{Rng, Tensor};

/// Central-difference step.
pub const FD_EPS: f64 = 1e-6;
pub const OP_TOLERANCE: f64 = 1e-4;
/// For paths through batch norm and the end-to-end model.
pub const BN_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub seeds: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

type Case = fn(u64) -> Result<f64>;

/// Every case with its tolerance, in report order.
pub fn cases() -> Vec<(&'static str, f64, Case)> {
    vec![
        ("add", OP_TOLERANCE, case_add as Case),
        ("sub", OP_TOLERANCE, case_sub),
        ("mul", OP_TOLERANCE, case_mul),
        ("div", OP_TOLERANCE, case_div),
        ("scale", OP_TOLERANCE, case_scale),
        ("add_scalar", OP_TOLERANCE, case_add_scalar),
        ("sum", OP_TOLERANCE, case_sum),
        ("sum_per_sample", OP_TOLERANCE, case_sum_per_sample),
        ("mask_fill", OP_TOLERANCE, case_mask_fill),
        ("concat_channels", OP_TOLERANCE, case_concat),
        ("narrow_channels", OP_TOLERANCE, case_narrow),
        ("relu", OP_TOLERANCE, case_relu),
        ("softmax_channels", OP_TOLERANCE, case_softmax),
        ("avgpool2d", OP_TOLERANCE, case_avgpool),
        ("bilinear_upsample2x", OP_TOLERANCE, case_upsample),
        ("conv2d", OP_TOLERANCE, case_conv),
        ("conv2d_strided", OP_TOLERANCE, case_conv_strided),
        ("depthwise_conv2d", OP_TOLERANCE, case_depthwise),
        ("pointwise_conv2d", OP_TOLERANCE, case_pointwise),
        ("batch_norm_train", BN_TOLERANCE, case_bn_train),
        ("batch_norm_infer", BN_TOLERANCE, case_bn_infer),
        ("dice_loss", OP_TOLERANCE, case_dice),
        ("es_block", BN_TOLERANCE, case_es_block),
        ("dmr_block", BN_TOLERANCE, case_dmr_block),
        ("model_dice", BN_TOLERANCE, case_model),
    ]
}

/// Runs every case over seeds `0..seeds` and keeps the worst error of each.
pub fn run_suite(seeds: usize) -> Result<Vec<CheckResult>> {
    cases().into_iter().map(|(name, tolerance, f)| run_case(name, tolerance, f, seeds)).collect()
}

pub fn run_case(name: &'static str, tolerance: f64, f: Case, seeds: usize) -> Result<CheckResult> {
    let mut worst = 0.0f64;
    for s in 0..seeds as u64 {
        worst = worst.max(f(s)?);
    }
    Ok(CheckResult { name, max_rel_err: worst, tolerance, seeds })
}

fn rng(seed: u64) -> Rng {
    Rng::new(0x6772_6164 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

fn normal(r: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    r.normal_tensor(shape, 1.0).expect("non-empty shape")
}

/// Values with magnitude in `[lo, lo + 1]` and random sign.
fn away_from_zero(r: &mut Rng, shape: &[usize], lo: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| (lo + r.uniform(0.0, 1.0)) * if r.bernoulli(0.5) { 1.0 } else { -1.0 }).collect();
    Tensor::new(shape.to_vec(), data).expect("sized")
}

/// `Σ y ⊙ probe` so that every output coordinate carries a distinct weight.
fn probe_loss(g: &mut Graph<f64>, y: &Var<f64>, probe: &Tensor<f64>) -> Result<Var<f64>> {
    let p = g.constant(probe.clone());
    let m = g.mul(y, &p)?;
    Ok(g.sum(&m))
}

/// Checks a unary map over the full input, with a random probe on the output.
fn unary<F>(seed: u64, x: Tensor<f64>, f: F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &Var<f64>) -> Result<Var<f64>>,
{
    let mut g = Graph::no_grad();
    let v = g.constant(x.clone());
    let shape = f(&mut g, &v)?.shape().to_vec();
    let probe = normal(&mut rng(seed ^ 0xff), &shape);
    grad_check(
        |g, x| {
            let y = f(g, x)?;
            probe_loss(g, &y, &probe)
        },
        &x,
        FD_EPS,
    )
}

/// Checks both operands of a binary map.
fn binary<F>(seed: u64, a: Tensor<f64>, b: Tensor<f64>, f: F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &Var<f64>, &Var<f64>) -> Result<Var<f64>>,
{
    let ea = unary(seed, a.clone(), |g, x| {
        let c = g.constant(b.clone());
        f(g, x, &c)
    })?;
    let eb = unary(seed, b, |g, x| {
        let c = g.constant(a.clone());
        f(g, &c, x)
    })?;
    Ok(ea.max(eb))
}

fn case_add(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    binary(seed, normal(&mut r, &[2, 3, 4]), normal(&mut r, &[2, 3, 4]), |g, a, b| g.add(a, b))
}

fn case_sub(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    binary(seed, normal(&mut r, &[2, 3, 4]), normal(&mut r, &[2, 3, 4]), |g, a, b| g.sub(a, b))
}

fn case_mul(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    binary(seed, normal(&mut r, &[2, 3, 4]), normal(&mut r, &[2, 3, 4]), |g, a, b| g.mul(a, b))
}

fn case_div(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    binary(seed, normal(&mut r, &[2, 3, 4]), away_from_zero(&mut r, &[2, 3, 4], 0.5), |g, a, b| g.div(a, b))
}

fn case_scale(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let k = r.uniform(-2.0, 2.0);
    unary(seed, normal(&mut r, &[3, 5]), |g, x| Ok(g.scale(x, k)))
}

fn case_add_scalar(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let k = r.uniform(-2.0, 2.0);
    unary(seed, normal(&mut r, &[3, 5]), |g, x| Ok(g.add_scalar(x, k)))
}

fn case_sum(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    unary(seed, normal(&mut r, &[2, 2, 3, 3]), |g, x| Ok(g.sum(x)))
}

fn case_sum_per_sample(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    unary(seed, normal(&mut r, &[3, 2, 3, 3]), |g, x| Ok(g.sum_per_sample(x)))
}

fn case_mask_fill(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let mask: Vec<bool> = (0..6).map(|_| r.bernoulli(0.5)).collect();
    unary(seed, normal(&mut r, &[6]), |g, x| g.mask_fill(x, mask.clone(), 1.0))
}

fn case_concat(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    binary(seed, normal(&mut r, &[2, 2, 3, 3]), normal(&mut r, &[2, 3, 3, 3]), |g, a, b| g.concat_channels(a, b))
}

fn case_narrow(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    unary(seed, normal(&mut r, &[2, 5, 3, 3]), |g, x| g.narrow_channels(x, 1, 3))
}

fn case_relu(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    unary(seed, away_from_zero(&mut r, &[2, 3, 4, 4], 0.01), |g, x| Ok(g.relu(x)))
}

fn case_softmax(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let x = normal(&mut r, &[2, 3, 4, 4]).map(|v| 3.0 * v);
    unary(seed, x, |g, x| g.softmax_channels(x))
}

fn case_avgpool(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    unary(seed, normal(&mut r, &[2, 3, 6, 4]), |g, x| g.avgpool2d(x, 2))
}

fn case_upsample(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    unary(seed, normal(&mut r, &[2, 2, 3, 4]), |g, x| g.bilinear_upsample2x(x))
}

/// Checks input, weight and bias of one convolution.
fn conv_case(seed: u64, x_shape: &[usize], w_shape: &[usize], geom: ConvGeometry) -> Result<f64> {
    let mut r = rng(seed);
    let x = normal(&mut r, x_shape);
    let w = normal(&mut r, w_shape);
    let b = normal(&mut r, &[w_shape[0]]);
    let e_in = unary(seed, x.clone(), |g, xv| {
        let wv = g.constant(w.clone());
        let bv = g.constant(b.clone());
        g.conv2d(xv, &wv, Some(&bv), geom)
    })?;
    let e_w = unary(seed, w.clone(), |g, wv| {
        let xv = g.constant(x.clone());
        let bv = g.constant(b.clone());
        g.conv2d(&xv, wv, Some(&bv), geom)
    })?;
    let e_b = unary(seed, b.clone(), |g, bv| {
        let xv = g.constant(x.clone());
        let wv = g.constant(w.clone());
        g.conv2d(&xv, &wv, Some(bv), geom)
    })?;
    Ok(e_in.max(e_w).max(e_b))
}

fn case_conv(seed: u64) -> Result<f64> {
    conv_case(seed, &[2, 3, 5, 5], &[4, 3, 3, 3], ConvGeometry::same(3, 1))
}

fn case_conv_strided(seed: u64) -> Result<f64> {
    conv_case(seed, &[1, 2, 6, 6], &[3, 2, 3, 3], ConvGeometry { stride: 2, padding: 1, groups: 1 })
}

fn case_depthwise(seed: u64) -> Result<f64> {
    conv_case(seed, &[2, 3, 6, 6], &[3, 1, 5, 5], ConvGeometry::same(5, 3))
}

fn case_pointwise(seed: u64) -> Result<f64> {
    conv_case(seed, &[2, 4, 3, 3], &[5, 4, 1, 1], ConvGeometry::same(1, 1))
}

fn bn_case(seed: u64, training: bool) -> Result<f64> {
    let mut r = rng(seed);
    let c = 3;
    let x = normal(&mut r, &[2, c, 3, 3]).map(|v| 2.0 * v + 0.5);
    let gamma = r.uniform_tensor::<f64>(&[c], 0.5, 1.5)?;
    let beta = normal(&mut r, &[c]);
    let mean = normal(&mut r, &[c]);
    let var = r.uniform_tensor::<f64>(&[c], 0.5, 2.0)?;
    let apply = |g: &mut Graph<f64>, x: &Var<f64>, ga: &Var<f64>, be: &Var<f64>| -> Result<Var<f64>> {
        if training {
            Ok(g.batch_norm_train(x, ga, be, BN_EPS)?.0)
        } else {
            g.batch_norm_infer(x, ga, be, &mean, &var, BN_EPS)
        }
    };
    let e_x = unary(seed, x.clone(), |g, xv| {
        let (ga, be) = (g.constant(gamma.clone()), g.constant(beta.clone()));
        apply(g, xv, &ga, &be)
    })?;
    let e_g = unary(seed, gamma.clone(), |g, ga| {
        let (xv, be) = (g.constant(x.clone()), g.constant(beta.clone()));
        apply(g, &xv, ga, &be)
    })?;
    let e_b = unary(seed, beta.clone(), |g, be| {
        let (xv, ga) = (g.constant(x.clone()), g.constant(gamma.clone()));
        apply(g, &xv, &ga, be)
    })?;
    Ok(e_x.max(e_g).max(e_b))
}

fn case_bn_train(seed: u64) -> Result<f64> {
    bn_case(seed, true)
}

fn case_bn_infer(seed: u64) -> Result<f64> {
    bn_case(seed, false)
}

fn case_dice(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let p = r.uniform_tensor::<f64>(&[2, 1, 4, 4], 0.05, 0.95)?;
    let gt = r.binary_tensor::<f64>(&[2, 1, 4, 4], 0.4)?;
    grad_check(|g, x| g.dice_loss(x, &gt), &p, FD_EPS)
}

/// Replaces the leaf of `target` with `p` and keeps every other entry
/// constant.
fn leaves_with(g: &mut Graph<f64>, store: &ParamStore<f64>, target: ParamId, p: &Var<f64>) -> Vec<Var<f64>> {
    store.ids().map(|j| if j == target { p.clone() } else { g.leaf(store.get(j).clone(), false) }).collect()
}

/// Checks the input fully and three coordinates of every trainable tensor.
fn block_case<F>(seed: u64, store: &ParamStore<f64>, x: &Tensor<f64>, block: F) -> Result<f64>
where
    F: Fn(&mut Ctx<'_, f64>, &Var<f64>) -> Result<Var<f64>>,
{
    let mut g = Graph::no_grad();
    let shape = {
        let xv = g.constant(x.clone());
        let mut ctx = Ctx::new(&mut g, store, BnMode::Training);
        block(&mut ctx, &xv)?.shape().to_vec()
    };
    let probe = normal(&mut rng(seed ^ 0xb10c), &shape);
    let mut worst = grad_check(
        |g, xv| {
            let mut ctx = Ctx::new(g, store, BnMode::Training);
            let y = block(&mut ctx, xv)?;
            probe_loss(ctx.g, &y, &probe)
        },
        x,
        FD_EPS,
    )?;
    for id in store.trainable_ids().collect::<Vec<_>>() {
        let n = store.get(id).numel();
        let err = grad_check_at(
            |g, p| {
                let xv = g.constant(x.clone());
                let vars = leaves_with(g, store, id, p);
                let mut ctx = Ctx::with_vars(g, store, vars, BnMode::Training)?;
                let y = block(&mut ctx, &xv)?;
                probe_loss(ctx.g, &y, &probe)
            },
            store.get(id),
            FD_EPS,
            &[0, n / 2, n - 1],
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

fn case_es_block(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let scale = [3, 5, 7][seed as usize % 3];
    let p = EsBlockParams::build(&mut ParamBuilder { store: &mut store, rng: &mut r }, "es", 3, 4, scale, 2)?;
    let x = away_from_zero(&mut r, &[2, 3, 5, 5], 0.01);
    block_case(seed, &store, &x, |ctx, xv| es_block(ctx, xv, &p))
}

fn case_dmr_block(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let p = DmrBlockParams::build(&mut ParamBuilder { store: &mut store, rng: &mut r }, "dmr", 4)?;
    let x = normal(&mut r, &[2, 4, 5, 5]);
    block_case(seed, &store, &x, |ctx, xv| dmr_block(ctx, xv, &p))
}

/// Micro model in training mode with the Dice loss on the foreground
/// channel; checks a sample of input and parameter coordinates.
fn case_model(seed: u64) -> Result<f64> {
    let cfg = ModelConfig { seed, ..ModelConfig::micro() };
    let model = Model::<f64>::build(&cfg)?;
    let store = model.store();
    let mut r = rng(seed);
    let x = r.uniform_tensor::<f64>(&[2, 3, 32, 32], 0.0, 1.0)?;
    let gt = r.binary_tensor::<f64>(&[2, 1, 32, 32], 0.3)?;
    let loss = |ctx: &mut Ctx<'_, f64>, xv: &Var<f64>| -> Result<Var<f64>> {
        let probs = model.forward_ctx(ctx, xv)?;
        let fg = ctx.g.narrow_channels(&probs, 1, 1)?;
        ctx.g.dice_loss(&fg, &gt)
    };
    let coords: Vec<usize> = (0..6).map(|_| r.below(x.numel())).collect();
    let mut worst = grad_check_at(
        |g, xv| {
            let mut ctx = Ctx::new(g, store, BnMode::Training);
            loss(&mut ctx, xv)
        },
        &x,
        FD_EPS,
        &coords,
    )?;
    let ids: Vec<ParamId> = store.trainable_ids().collect();
    for _ in 0..10 {
        let id = ids[r.below(ids.len())];
        let n = store.get(id).numel();
        let err = grad_check_at(
            |g, p| {
                let xv = g.constant(x.clone());
                let vars = leaves_with(g, store, id, p);
                let mut ctx = Ctx::with_vars(g, store, vars, BnMode::Training)?;
                loss(&mut ctx, &xv)
            },
            store.get(id),
            FD_EPS,
            &[r.below(n)],
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_case_passes_on_two_seeds() {
        for r in run_suite(2).unwrap() {
            assert!(r.passed(), "{} rel-err {:e}", r.name, r.max_rel_err);
        }
    }
}
