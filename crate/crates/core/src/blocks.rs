//! Composite network units: the expand-squeeze (ES) block, the dual
//! multiscale residual (DMR) block, encoder and decoder stages, and the
//! input and output blocks.
//!
//! Blocks only hold [`ParamId`] handles into a [`ParamStore`]. A forward pass
//! runs through a [`Ctx`], which binds the store onto a [`Graph`] and collects
//! the batch statistics produced by training-mode batch norm.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{update_running_stats, BatchStats, BnMode, ConvGeometry};
use crate::params::{BnSpec, ConvSpec, ParamBuilder, ParamStore};
use crate::tensor::Scalar;

/// Operation names counted as layers.
pub const LAYER_OPS: [&str; 6] = ["conv2d", "batch_norm", "relu", "avgpool2d", "upsample2x", "softmax"];

/// Kernel extents of the three ES branches of a stage.
pub const BRANCH_SCALES: [usize; 3] = [3, 5, 7];

/// Batch statistics of one batch-norm application, pending a running update.
#[derive(Clone, Debug)]
pub struct BnUpdate<T> {
    pub spec: BnSpec,
    pub stats: BatchStats<T>,
}

/// Forward-pass context: a graph, the parameter leaves bound on it and the
/// batch-norm mode.
pub struct Ctx<'a, T: Scalar> {
    pub g: &'a mut Graph<T>,
    store: &'a ParamStore<T>,
    vars: Vec<Var<T>>,
    mode: BnMode,
    updates: Vec<BnUpdate<T>>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(g: &'a mut Graph<T>, store: &'a ParamStore<T>, mode: BnMode) -> Self {
        let vars = store.bind(g);
        Self { g, store, vars, mode, updates: Vec::new() }
    }

    /// Uses caller-provided leaves, one per store entry.
    pub fn with_vars(g: &'a mut Graph<T>, store: &'a ParamStore<T>, vars: Vec<Var<T>>, mode: BnMode) -> Result<Self> {
        if vars.len() != store.len() {
            return Err(Error::invalid(format!("{} leaves for {} parameters", vars.len(), store.len())));
        }
        Ok(Self { g, store, vars, mode, updates: Vec::new() })
    }

    pub fn mode(&self) -> BnMode {
        self.mode
    }

    /// Parameter leaves, indexed like the store.
    pub fn vars(&self) -> &[Var<T>] {
        &self.vars
    }

    pub fn into_parts(self) -> (Vec<Var<T>>, Vec<BnUpdate<T>>) {
        (self.vars, self.updates)
    }

    pub fn conv(&mut self, x: &Var<T>, c: &ConvSpec) -> Result<Var<T>> {
        let w = &self.vars[c.weight.index()];
        let b = c.bias.map(|id| &self.vars[id.index()]);
        self.g.conv2d(x, w, b, c.geom)
    }

    pub fn bn(&mut self, x: &Var<T>, s: &BnSpec) -> Result<Var<T>> {
        let gamma = &self.vars[s.gamma.index()];
        let beta = &self.vars[s.beta.index()];
        match self.mode {
            BnMode::Training => {
                let (y, stats) = self.g.batch_norm_train(x, gamma, beta, s.eps)?;
                self.updates.push(BnUpdate { spec: *s, stats });
                Ok(y)
            }
            BnMode::Inference => self.g.batch_norm_infer(
                x,
                gamma,
                beta,
                self.store.get(s.running_mean),
                self.store.get(s.running_var),
                s.eps,
            ),
        }
    }

    pub fn relu(&mut self, x: &Var<T>) -> Var<T> {
        self.g.relu(x)
    }

    fn concat(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        self.g.concat_channels(a, b)
    }
}

/// Folds pending batch statistics into the running statistics of `store`.
pub fn apply_bn_updates<T: Scalar>(store: &mut ParamStore<T>, updates: &[BnUpdate<T>], momentum: f64) {
    for u in updates {
        let mut mean = store.get(u.spec.running_mean).clone();
        let mut var = store.get(u.spec.running_var).clone();
        update_running_stats(&mut mean, &mut var, &u.stats, momentum);
        *store.get_mut(u.spec.running_mean) = mean;
        *store.get_mut(u.spec.running_var) = var;
    }
}

fn check_channels<T: Scalar>(block: &str, x: &Var<T>, expected: usize) -> Result<(usize, usize, usize, usize)> {
    let dims = x.value().dims4()?;
    if dims.1 != expected {
        return Err(Error::invalid(format!("{block}: expected {expected} input channels, got {}", dims.1)));
    }
    Ok(dims)
}

fn pointwise(k_groups: usize) -> ConvGeometry {
    ConvGeometry::same(1, k_groups)
}

/// relu, depthwise W×W, expanding 1×1, squeezing 1×1, batch norm.
#[derive(Clone, Debug)]
pub struct EsBlockParams {
    pub scale: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub dw: ConvSpec,
    pub expand: ConvSpec,
    pub squeeze: ConvSpec,
    pub bn: BnSpec,
}

impl EsBlockParams {
    pub fn build<T: Scalar>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        scale: usize,
        expansion: usize,
    ) -> Result<Self> {
        if scale == 0 || scale.is_multiple_of(2) {
            return Err(Error::invalid(format!("ES scale must be odd, got {scale}")));
        }
        let wide = expansion * out_channels;
        Ok(Self {
            scale,
            in_channels,
            out_channels,
            dw: b.conv(&format!("{name}.dw"), in_channels, in_channels, scale, ConvGeometry::same(scale, in_channels), false)?,
            expand: b.conv(&format!("{name}.expand"), in_channels, wide, 1, pointwise(1), false)?,
            squeeze: b.conv(&format!("{name}.squeeze"), wide, out_channels, 1, pointwise(1), false)?,
            bn: b.bn(&format!("{name}.bn"), out_channels)?,
        })
    }
}

pub fn es_block<T: Scalar>(ctx: &mut Ctx<'_, T>, x: &Var<T>, p: &EsBlockParams) -> Result<Var<T>> {
    check_channels("es_block", x, p.in_channels)?;
    let a = ctx.relu(x);
    let d = ctx.conv(&a, &p.dw)?;
    let e = ctx.conv(&d, &p.expand)?;
    let s = ctx.conv(&e, &p.squeeze)?;
    ctx.bn(&s, &p.bn)
}

/// Two-layer cross-scale block with a 1×1 shortcut.
#[derive(Clone, Debug)]
pub struct DmrBlockParams {
    pub channels: usize,
    pub branch: usize,
    pub f3_1: ConvSpec,
    pub f5_1: ConvSpec,
    pub f3_2: ConvSpec,
    pub f5_2: ConvSpec,
    pub f1_3: ConvSpec,
    pub f1_2: ConvSpec,
    pub bn_t1: BnSpec,
    pub bn_t2: BnSpec,
    pub bn_t3: BnSpec,
    pub bn_t4: BnSpec,
    pub bn_t5: BnSpec,
}

impl DmrBlockParams {
    /// Branch width is `max(1, channels / 2)`; output width is `channels`.
    pub fn build<T: Scalar>(b: &mut ParamBuilder<'_, T>, name: &str, channels: usize) -> Result<Self> {
        let br = (channels / 2).max(1);
        let c = channels;
        Ok(Self {
            channels,
            branch: br,
            f3_1: b.conv(&format!("{name}.f3_1"), c, br, 3, ConvGeometry::same(3, 1), false)?,
            f5_1: b.conv(&format!("{name}.f5_1"), c, br, 5, ConvGeometry::same(5, 1), false)?,
            f3_2: b.conv(&format!("{name}.f3_2"), 2 * br, br, 3, ConvGeometry::same(3, 1), false)?,
            f5_2: b.conv(&format!("{name}.f5_2"), 2 * br, br, 5, ConvGeometry::same(5, 1), false)?,
            f1_3: b.conv(&format!("{name}.f1_3"), 2 * br, c, 1, pointwise(1), true)?,
            f1_2: b.conv(&format!("{name}.f1_2"), c, c, 1, pointwise(1), false)?,
            bn_t1: b.bn(&format!("{name}.bn_t1"), br)?,
            bn_t2: b.bn(&format!("{name}.bn_t2"), br)?,
            bn_t3: b.bn(&format!("{name}.bn_t3"), br)?,
            bn_t4: b.bn(&format!("{name}.bn_t4"), br)?,
            bn_t5: b.bn(&format!("{name}.bn_t5"), c)?,
        })
    }
}

pub fn dmr_block<T: Scalar>(ctx: &mut Ctx<'_, T>, f_in: &Var<T>, p: &DmrBlockParams) -> Result<Var<T>> {
    check_channels("dmr_block", f_in, p.channels)?;
    let c = ctx.conv(f_in, &p.f3_1)?;
    let t1 = ctx.bn(&c, &p.bn_t1)?;
    let c = ctx.conv(f_in, &p.f5_1)?;
    let t2 = ctx.bn(&c, &p.bn_t2)?;

    let t12 = ctx.concat(&t1, &t2)?;
    let c = ctx.conv(&t12, &p.f3_2)?;
    let c = ctx.bn(&c, &p.bn_t3)?;
    let t3 = ctx.relu(&c);

    let t21 = ctx.concat(&t2, &t1)?;
    let c = ctx.conv(&t21, &p.f5_2)?;
    let c = ctx.bn(&c, &p.bn_t4)?;
    let t4 = ctx.relu(&c);

    let t43 = ctx.concat(&t4, &t3)?;
    let t_prime = ctx.conv(&t43, &p.f1_3)?;

    let c = ctx.conv(f_in, &p.f1_2)?;
    let c = ctx.bn(&c, &p.bn_t5)?;
    let t5 = ctx.relu(&c);
    ctx.g.add(&t_prime, &t5)
}

/// Three parallel ES blocks at scales 3, 5 and 7 on a shared input,
/// concatenated and fused by a biased 1×1 conv.
#[derive(Clone, Debug)]
pub struct EsGroup {
    pub branches: [EsBlockParams; 3],
    pub fuse: ConvSpec,
}

impl EsGroup {
    pub fn build<T: Scalar>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        in_channels: usize,
        width: usize,
        expansion: usize,
    ) -> Result<Self> {
        let mk = |b: &mut ParamBuilder<'_, T>, s: usize| {
            EsBlockParams::build(b, &format!("{name}.es{s}"), in_channels, width, s, expansion)
        };
        let branches = [mk(b, BRANCH_SCALES[0])?, mk(b, BRANCH_SCALES[1])?, mk(b, BRANCH_SCALES[2])?];
        let fuse = b.conv(&format!("{name}.fuse"), 3 * width, width, 1, pointwise(1), true)?;
        Ok(Self { branches, fuse })
    }

    pub fn in_channels(&self) -> usize {
        self.branches[0].in_channels
    }
}

/// Output of the three branches, concatenated in scale order.
pub fn es_branches<T: Scalar>(ctx: &mut Ctx<'_, T>, x: &Var<T>, p: &EsGroup) -> Result<Var<T>> {
    let a = es_block(ctx, x, &p.branches[0])?;
    let b = es_block(ctx, x, &p.branches[1])?;
    let c = es_block(ctx, x, &p.branches[2])?;
    let ab = ctx.concat(&a, &b)?;
    ctx.concat(&ab, &c)
}

pub fn es_group<T: Scalar>(ctx: &mut Ctx<'_, T>, x: &Var<T>, p: &EsGroup) -> Result<Var<T>> {
    let cat = es_branches(ctx, x, p)?;
    ctx.conv(&cat, &p.fuse)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Resample {
    /// Average pooling with the given stride after the ES groups.
    Down { stride: usize },
    /// 2× bilinear upsampling of the input before the skip merge.
    Up,
    None,
}

#[derive(Clone, Debug)]
pub struct StageParams {
    pub in_channels: usize,
    pub width: usize,
    /// Channels of the processed skip merged by a decoder stage.
    pub skip_channels: usize,
    pub resample: Resample,
    /// Decoder only: 1×1 fuse of `{upsampled x, skip}` to `width`.
    pub merge: Option<ConvSpec>,
    pub groups: Vec<EsGroup>,
}

impl StageParams {
    pub fn encoder<T: Scalar>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        in_channels: usize,
        width: usize,
        repeat: usize,
        expansion: usize,
    ) -> Result<Self> {
        let groups = build_groups(b, name, in_channels, width, repeat, expansion)?;
        Ok(Self {
            in_channels,
            width,
            skip_channels: 0,
            resample: Resample::Down { stride: 2 },
            merge: None,
            groups,
        })
    }

    pub fn decoder<T: Scalar>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        in_channels: usize,
        skip_channels: usize,
        width: usize,
        repeat: usize,
        expansion: usize,
    ) -> Result<Self> {
        let merge = b.conv(&format!("{name}.merge"), in_channels + skip_channels, width, 1, pointwise(1), true)?;
        let groups = build_groups(b, name, width, width, repeat, expansion)?;
        Ok(Self { in_channels, width, skip_channels, resample: Resample::Up, merge: Some(merge), groups })
    }
}

fn build_groups<T: Scalar>(
    b: &mut ParamBuilder<'_, T>,
    name: &str,
    in_channels: usize,
    width: usize,
    repeat: usize,
    expansion: usize,
) -> Result<Vec<EsGroup>> {
    if repeat == 0 {
        return Err(Error::invalid("stage repeat must be at least 1"));
    }
    (0..repeat)
        .map(|r| {
            let cin = if r == 0 { in_channels } else { width };
            EsGroup::build(b, &format!("{name}.g{r}"), cin, width, expansion)
        })
        .collect()
}

fn run_groups<T: Scalar>(ctx: &mut Ctx<'_, T>, x: &Var<T>, groups: &[EsGroup]) -> Result<Var<T>> {
    let mut h = x.clone();
    for grp in groups {
        h = es_group(ctx, &h, grp)?;
    }
    Ok(h)
}

/// Returns `(features, skip)`: `skip` is the stage output at input
/// resolution and `features` its pooled version.
pub fn encoder_stage<T: Scalar>(ctx: &mut Ctx<'_, T>, x: &Var<T>, p: &StageParams) -> Result<(Var<T>, Var<T>)> {
    let Resample::Down { stride } = p.resample else {
        return Err(Error::invalid("encoder_stage needs a downsampling stage"));
    };
    let (_, _, h, w) = check_channels("encoder_stage", x, p.in_channels)?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::invalid(format!("encoder_stage: spatial extents {h}x{w} are not even")));
    }
    let skip = run_groups(ctx, x, &p.groups)?;
    let features = ctx.g.avgpool2d(&skip, stride)?;
    Ok((features, skip))
}

pub fn decoder_stage<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    x: &Var<T>,
    skip_processed: &Var<T>,
    p: &StageParams,
) -> Result<Var<T>> {
    let (Resample::Up, Some(merge)) = (p.resample, p.merge.as_ref()) else {
        return Err(Error::invalid("decoder_stage needs an upsampling stage"));
    };
    check_channels("decoder_stage", x, p.in_channels)?;
    check_channels("decoder_stage skip", skip_processed, p.skip_channels)?;
    let up = ctx.g.bilinear_upsample2x(x)?;
    if up.shape()[2..] != skip_processed.shape()[2..] || up.shape()[0] != skip_processed.shape()[0] {
        return Err(Error::ShapeMismatch {
            op: "decoder_stage",
            lhs: up.shape().to_vec(),
            rhs: skip_processed.shape().to_vec(),
        });
    }
    let cat = ctx.concat(&up, skip_processed)?;
    let merged = ctx.conv(&cat, merge)?;
    run_groups(ctx, &merged, &p.groups)
}

/// Stem: 3×3 conv, batch norm, relu.
#[derive(Clone, Debug)]
pub struct InputBlockParams {
    pub in_channels: usize,
    pub width: usize,
    pub conv: ConvSpec,
    pub bn: BnSpec,
}

impl InputBlockParams {
    pub fn build<T: Scalar>(b: &mut ParamBuilder<'_, T>, name: &str, in_channels: usize, width: usize) -> Result<Self> {
        if in_channels != 1 && in_channels != 3 {
            return Err(Error::invalid(format!("input block supports 1 or 3 channels, got {in_channels}")));
        }
        Ok(Self {
            in_channels,
            width,
            conv: b.conv(&format!("{name}.conv"), in_channels, width, 3, ConvGeometry::same(3, 1), false)?,
            bn: b.bn(&format!("{name}.bn"), width)?,
        })
    }
}

pub fn input_block<T: Scalar>(ctx: &mut Ctx<'_, T>, image: &Var<T>, p: &InputBlockParams) -> Result<Var<T>> {
    check_channels("input_block", image, p.in_channels)?;
    let c = ctx.conv(image, &p.conv)?;
    let n = ctx.bn(&c, &p.bn)?;
    Ok(ctx.relu(&n))
}

/// Head: 3×3 conv to two classes, batch norm, channel softmax.
#[derive(Clone, Debug)]
pub struct OutputBlockParams {
    pub in_channels: usize,
    pub conv: ConvSpec,
    pub bn: BnSpec,
}

impl OutputBlockParams {
    pub fn build<T: Scalar>(b: &mut ParamBuilder<'_, T>, name: &str, in_channels: usize) -> Result<Self> {
        Ok(Self {
            in_channels,
            conv: b.conv(&format!("{name}.conv"), in_channels, 2, 3, ConvGeometry::same(3, 1), false)?,
            bn: b.bn(&format!("{name}.bn"), 2)?,
        })
    }
}

/// Per-pixel `(background, foreground)` probabilities.
pub fn output_block<T: Scalar>(ctx: &mut Ctx<'_, T>, features: &Var<T>, p: &OutputBlockParams) -> Result<Var<T>> {
    check_channels("output_block", features, p.in_channels)?;
    let c = ctx.conv(features, &p.conv)?;
    let n = ctx.bn(&c, &p.bn)?;
    ctx.g.softmax_channels(&n)
}

/// Foreground decision for a pair of class probabilities; exact ties go to
/// the background.
pub fn is_foreground<T: Scalar>(background: T, foreground: T) -> bool {
    foreground > background
}
